//! Coordinate embeddings and region feature pooling, composed from graph
//! primitives so gradients flow through both features and coordinates.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

/// Output grid of RoI pooling.
pub const ROI_GRID: usize = 7;
/// Regular sub-samples per bin edge; 2 means 2x2 samples averaged per bin.
pub const ROI_SAMPLING: usize = 2;

/// Sinusoidal embedding of scalar coordinates into `dim` channels.
/// Channel pair `k` holds `(sin(x / T^(2k/dim)), cos(x / T^(2k/dim)))`,
/// interleaved sin/cos per frequency.
pub fn sinusoidal_embed_1d<T: Scalar>(
    g: &mut Graph<T>,
    coords: NodeId,
    dim: usize,
    temperature: f64,
) -> Result<NodeId> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::domain(
            "sinusoidal_embed",
            format!("dim {dim} must be even and positive"),
        ));
    }
    let n = g.value(coords).numel();
    let col = g.reshape(coords, &[n, 1])?;
    let half = dim / 2;
    let inv_freq = Tensor::from_fn(&[1, half], |k| {
        T::from_f64(1.0 / temperature.powf(2.0 * k as f64 / dim as f64))
    });
    let freqs = g.constant(inv_freq);
    let args = g.matmul(col, freqs)?; // [n, half]
    let s = g.sin(args);
    let c = g.cos(args);
    let cat = g.concat(&[s, c], 1)?; // [n, 2*half] grouped: sins then cosines
    let mut order = Vec::with_capacity(dim);
    for k in 0..half {
        order.push(k);
        order.push(half + k);
    }
    g.gather_cols(cat, &order)
}

/// 2-D variant: each coordinate of `points [N,2]` receives `dim/2` channels;
/// x channels first, then y.
pub fn sinusoidal_embed_2d<T: Scalar>(
    g: &mut Graph<T>,
    points: NodeId,
    dim: usize,
    temperature: f64,
) -> Result<NodeId> {
    if dim % 2 != 0 {
        return Err(Error::domain(
            "sinusoidal_embed",
            format!("dim {dim} must be even"),
        ));
    }
    let shape = g.value(points).shape().to_vec();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::shape(
            "sinusoidal_embed",
            format!("expected [N,2] points, got {:?}", shape),
        ));
    }
    let xs = g.narrow(points, 1, 0, 1)?;
    let ys = g.narrow(points, 1, 1, 1)?;
    let ex = sinusoidal_embed_1d(g, xs, dim / 2, temperature)?;
    let ey = sinusoidal_embed_1d(g, ys, dim / 2, temperature)?;
    g.concat(&[ex, ey], 1)
}

/// Normalized centers of an `h x w` grid, row-major, as `[h*w, 2]` (x, y).
pub fn grid_centers<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[h * w, 2], |i| {
        let (cell, coord) = (i / 2, i % 2);
        let (r, c) = (cell / w, cell % w);
        if coord == 0 {
            T::from_f64((c as f64 + 0.5) / w as f64)
        } else {
            T::from_f64((r as f64 + 0.5) / h as f64)
        }
    })
}

/// Normalized-coordinate point -> continuous pixel coordinate.
/// Pixel centers sit at (i + 0.5) / extent in normalized space.
pub fn to_pixel_coords<T: Scalar>(
    g: &mut Graph<T>,
    points_norm: NodeId,
    h: usize,
    w: usize,
) -> Result<NodeId> {
    let n = g.value(points_norm).shape()[0];
    let xs = g.narrow(points_norm, 1, 0, 1)?;
    let ys = g.narrow(points_norm, 1, 1, 1)?;
    let xp = g.affine(xs, w as f64, -0.5);
    let yp = g.affine(ys, h as f64, -0.5);
    let cat = g.concat(&[xp, yp], 1)?;
    g.reshape(cat, &[n, 2])
}

/// RoIAlign: pool `map [d,H,W]` over `rois [N,4]` (normalized center form)
/// into a fixed 7x7 grid; each bin averages a regular 2x2 set of bilinear
/// samples. Output is `[N, 7, 7, d]`. Differentiable w.r.t. map and rois;
/// a zero-size roi collapses all samples onto its center point.
pub fn roi_align<T: Scalar>(g: &mut Graph<T>, map: NodeId, rois: NodeId) -> Result<NodeId> {
    let ms = g.value(map).shape().to_vec();
    let rs = g.value(rois).shape().to_vec();
    if ms.len() != 3 {
        return Err(Error::shape(
            "roi_align",
            format!("map must be [d,H,W], got {:?}", ms),
        ));
    }
    if rs.len() != 2 || rs[1] != 4 {
        return Err(Error::shape(
            "roi_align",
            format!("rois must be [N,4], got {:?}", rs),
        ));
    }
    let (d, h, w) = (ms[0], ms[1], ms[2]);
    let n = rs[0];
    let grid = ROI_GRID;
    let sub = ROI_SAMPLING;
    let s = grid * grid * sub * sub;

    let cx = g.narrow(rois, 1, 0, 1)?;
    let cy = g.narrow(rois, 1, 1, 1)?;
    let bw = g.narrow(rois, 1, 2, 1)?;
    let bh = g.narrow(rois, 1, 3, 1)?;
    let half_w = g.mul_scalar(bw, 0.5);
    let half_h = g.mul_scalar(bh, 0.5);
    let x1 = g.sub(cx, half_w)?;
    let y1 = g.sub(cy, half_h)?;

    // RoI-frame offsets of every sub-sample, ordered (bin_y, bin_x, sy, sx).
    let frame = |i: usize, pick_y: bool| -> f64 {
        let sx = i % sub;
        let sy = (i / sub) % sub;
        let bx = (i / (sub * sub)) % grid;
        let by = i / (sub * sub * grid);
        if pick_y {
            (by as f64 + (sy as f64 + 0.5) / sub as f64) / grid as f64
        } else {
            (bx as f64 + (sx as f64 + 0.5) / sub as f64) / grid as f64
        }
    };
    let gx = g.constant(Tensor::from_fn(&[s], |i| T::from_f64(frame(i, false))));
    let gy = g.constant(Tensor::from_fn(&[s], |i| T::from_f64(frame(i, true))));

    // Normalized absolute coordinates of every sample: [N, S].
    let wx = g.mul(bw, gx)?;
    let px = g.add(wx, x1)?;
    let hy = g.mul(bh, gy)?;
    let py = g.add(hy, y1)?;

    let pxf = g.reshape(px, &[n * s, 1])?;
    let pyf = g.reshape(py, &[n * s, 1])?;
    let pts_norm = g.concat(&[pxf, pyf], 1)?;
    let pts_pix = to_pixel_coords(g, pts_norm, h, w)?;

    let sampled = g.bilinear_sample(map, pts_pix)?; // [N*S, d]
    let per_bin = g.reshape(sampled, &[n * grid * grid, sub * sub, d])?;
    let pooled = g.mean_axis(per_bin, 1)?; // [N*49, d]
    g.reshape(pooled, &[n, grid, grid, d])
}
