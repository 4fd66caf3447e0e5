//! Deterministic synthetic-shapes detection dataset.
//!
//! Solid-colored rectangles, circles, and triangles on a noisy dark
//! background; classes separate quickly by color and shape so training-based
//! checks measure implementation correctness rather than modeling power.
//! Images are binary PPM (P6), annotations one JSON file. Per-image seeds
//! derive as `seed ^ image_index`, so generation is order-independent and
//! bytewise reproducible.

use crate::error::{Error, Result};
use crate::geometry::CenterBox;
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};

pub const CLASS_NAMES: [&str; 3] = ["rectangle", "circle", "triangle"];
const CLASS_COLORS: [[u8; 3]; 3] = [[214, 64, 52], [58, 196, 92], [66, 98, 222]];
const BACKGROUND: [u8; 3] = [40, 40, 40];
/// Generated objects overlap at most this much.
const MAX_PLACEMENT_IOU: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object size range as a fraction of the image side.
    pub min_size: f64,
    pub max_size: f64,
    /// Uniform pixel noise amplitude in [0,1] units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 96,
            min_objects: 1,
            max_objects: 4,
            min_size: 0.18,
            max_size: 0.42,
            noise: 0.04,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.image_size < 16 {
            problems.push(format!("image_size {} too small", self.image_size));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            problems.push(format!(
                "object range [{}, {}] invalid",
                self.min_objects, self.max_objects
            ));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            problems.push(format!(
                "size range [{}, {}] invalid",
                self.min_size, self.max_size
            ));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            problems.push(format!("noise {} outside [0, 0.5]", self.noise));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Parse a flat `key=value` spec file ('#' comments allowed).
    pub fn from_file(path: &Path) -> Result<SceneSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut spec = SceneSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |what: &str| Error::Config(format!("bad value `{v}` for key `{k}` ({what})"));
            match k {
                "image_size" => spec.image_size = v.parse().map_err(|_| bad("integer"))?,
                "min_objects" => spec.min_objects = v.parse().map_err(|_| bad("integer"))?,
                "max_objects" => spec.max_objects = v.parse().map_err(|_| bad("integer"))?,
                "min_size" => spec.min_size = v.parse().map_err(|_| bad("number"))?,
                "max_size" => spec.max_size = v.parse().map_err(|_| bad("number"))?,
                "noise" => spec.noise = v.parse().map_err(|_| bad("number"))?,
                "seed" => spec.seed = v.parse().map_err(|_| bad("integer"))?,
                other => {
                    return Err(Error::Config(format!("unknown scene spec key `{other}`")));
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeInstance {
    pub label: usize,
    pub cbox: CenterBox,
}

/// Pixel-center membership test for each shape class, in normalized
/// coordinates. Rasterization and the annotation share this definition.
pub fn shape_contains(label: usize, b: &CenterBox, x: f64, y: f64) -> bool {
    let dx = x - b.cx;
    let dy = y - b.cy;
    match label {
        0 => dx.abs() <= b.w / 2.0 && dy.abs() <= b.h / 2.0,
        1 => {
            let rx = b.w / 2.0;
            let ry = b.h / 2.0;
            (dx / rx) * (dx / rx) + (dy / ry) * (dy / ry) <= 1.0
        }
        2 => {
            // Upward isoceles triangle: apex at top-center, base at bottom.
            let fy = dy / b.h + 0.5; // 0 at apex row, 1 at base
            if !(0.0..=1.0).contains(&fy) {
                return false;
            }
            dx.abs() <= fy * b.w / 2.0
        }
        _ => false,
    }
}

fn sample_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<ShapeInstance> {
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<ShapeInstance> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = false;
        for _attempt in 0..200 {
            let label = rng.gen_range(0..CLASS_NAMES.len());
            let mut w = rng.gen_range(spec.min_size..=spec.max_size);
            let h = rng.gen_range(spec.min_size..=spec.max_size);
            if label == 2 {
                // A pointy apex on a tall narrow triangle can miss pixel
                // centers for more than a row; keep triangles wide.
                w = w.max(h);
            }
            let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
            let cand = CenterBox::new(cx, cy, w, h);
            if placed
                .iter()
                .all(|p| crate::geometry::iou(&p.cbox, &cand) <= MAX_PLACEMENT_IOU)
            {
                placed.push(ShapeInstance { label, cbox: cand });
                ok = true;
                break;
            }
        }
        if !ok {
            break; // keep what fits; min_objects=1 always places
        }
    }
    placed
}

/// Render one scene to RGB bytes, row-major.
pub fn render_scene(spec: &SceneSpec, shapes: &[ShapeInstance], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = spec.image_size;
    let mut img = vec![0u8; n * n * 3];
    for py in 0..n {
        for px in 0..n {
            let x = (px as f64 + 0.5) / n as f64;
            let y = (py as f64 + 0.5) / n as f64;
            let mut color = BACKGROUND;
            // Later shapes draw over earlier ones.
            for s in shapes {
                if shape_contains(s.label, &s.cbox, x, y) {
                    color = CLASS_COLORS[s.label];
                }
            }
            let noise = rng.gen_range(-spec.noise..=spec.noise) * 255.0;
            for c in 0..3 {
                let v = (color[c] as f64 + noise).round().clamp(0.0, 255.0);
                img[(py * n + px) * 3 + c] = v as u8;
            }
        }
    }
    img
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageMeta {
    pub id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: u64,
    pub label: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub images: Vec<ImageMeta>,
    pub annotations: Vec<AnnotationRecord>,
}

/// Per-image annotation after loading.
#[derive(Debug, Clone)]
pub struct Annotation {
    pub image_id: u64,
    pub objects: Vec<ShapeInstance>,
}

fn image_file_name(index: usize) -> String {
    format!("images/{index:06}.ppm")
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(rgb);
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let err = |msg: &str| Error::Dataset(format!("{}: {msg}", path.display()));
    // Header: "P6" <ws> width <ws> height <ws> maxval <single ws> data.
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("bad header"))?);
    }
    if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
        return Err(err("not a maxval-255 P6 file"));
    }
    let width: usize = fields[1].parse().map_err(|_| err("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| err("bad height"))?;
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(err("truncated pixel data"));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

/// Generate `count` images plus `annotations.json` under `out_dir`.
pub fn generate(spec: &SceneSpec, count: usize, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| Error::io(images_dir.display().to_string(), e))?;
    let mut manifest = DatasetManifest {
        images: Vec::with_capacity(count),
        annotations: Vec::new(),
    };
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (i as u64));
        let shapes = sample_scene(spec, &mut rng);
        let rgb = render_scene(spec, &shapes, &mut rng);
        let file = image_file_name(i);
        write_ppm(&out_dir.join(&file), spec.image_size, spec.image_size, &rgb)?;
        manifest.images.push(ImageMeta {
            id: i as u64,
            file,
            width: spec.image_size,
            height: spec.image_size,
        });
        for s in &shapes {
            manifest.annotations.push(AnnotationRecord {
                image_id: i as u64,
                label: s.label,
                cx: s.cbox.cx,
                cy: s.cbox.cy,
                w: s.cbox.w,
                h: s.cbox.h,
            });
        }
    }
    let json = serde_json::to_string(&manifest)
        .map_err(|e| Error::Dataset(format!("serializing annotations: {e}")))?;
    let ann_path = out_dir.join("annotations.json");
    std::fs::write(&ann_path, json).map_err(|e| Error::io(ann_path.display().to_string(), e))?;
    Ok(manifest)
}

/// A loaded dataset: validated manifest plus lazy image access.
pub struct Dataset {
    pub dir: PathBuf,
    pub images: Vec<ImageMeta>,
    pub annotations: Vec<Annotation>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let ann_path = dir.join("annotations.json");
        let text = std::fs::read_to_string(&ann_path)
            .map_err(|e| Error::io(ann_path.display().to_string(), e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("annotations.json: {e}")))?;
        let mut images = manifest.images;
        images.sort_by_key(|m| m.id);
        for m in &images {
            let p = dir.join(&m.file);
            if !p.exists() {
                return Err(Error::Dataset(format!(
                    "missing image file {} for image id {}",
                    m.file, m.id
                )));
            }
        }
        let mut by_id: std::collections::BTreeMap<u64, Vec<ShapeInstance>> =
            images.iter().map(|m| (m.id, Vec::new())).collect();
        for (i, a) in manifest.annotations.iter().enumerate() {
            let slot = by_id.get_mut(&a.image_id).ok_or_else(|| {
                Error::Dataset(format!(
                    "annotation {i} references unknown image id {}",
                    a.image_id
                ))
            })?;
            if a.label >= CLASS_NAMES.len() {
                return Err(Error::Dataset(format!(
                    "annotation {i} for image {}: label {} out of range 0..{}",
                    a.image_id,
                    a.label,
                    CLASS_NAMES.len()
                )));
            }
            let b = CenterBox::new(a.cx, a.cy, a.w, a.h);
            let corner = b.to_corner();
            let eps = 1e-9;
            if !(b.w >= 0.0
                && b.h >= 0.0
                && corner.x1 >= -eps
                && corner.y1 >= -eps
                && corner.x2 <= 1.0 + eps
                && corner.y2 <= 1.0 + eps)
            {
                return Err(Error::Dataset(format!(
                    "annotation {i} for image {}: box {b:?} outside [0,1]",
                    a.image_id
                )));
            }
            slot.push(ShapeInstance {
                label: a.label,
                cbox: b,
            });
        }
        let annotations = images
            .iter()
            .map(|m| Annotation {
                image_id: m.id,
                objects: by_id.remove(&m.id).unwrap_or_default(),
            })
            .collect();
        Ok(Dataset {
            dir: dir.to_path_buf(),
            images,
            annotations,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Image pixels as `[3,H,W]` in [0,1].
    pub fn load_image<T: Scalar>(&self, index: usize) -> Result<Tensor<T>> {
        let meta = &self.images[index];
        let (w, h, rgb) = read_ppm(&self.dir.join(&meta.file))?;
        if w != meta.width || h != meta.height {
            return Err(Error::Dataset(format!(
                "image id {}: file is {w}x{h}, manifest says {}x{}",
                meta.id, meta.width, meta.height
            )));
        }
        let mut t = Tensor::zeros(&[3, h, w]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    t.data_mut()[(c * h + y) * w + x] =
                        T::from_f64(rgb[(y * w + x) * 3 + c] as f64 / 255.0);
                }
            }
        }
        Ok(t)
    }

    /// Indices 0..len in a seeded shuffled order.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx
    }

    pub fn max_objects(&self) -> usize {
        self.annotations
            .iter()
            .map(|a| a.objects.len())
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(name: &str) -> PathBuf {
        let d = std::env::temp_dir().join("sdd_dataset_tests").join(name);
        let _ = std::fs::remove_dir_all(&d);
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        fn walk(dir: &Path, base: &Path, out: &mut Vec<(String, Vec<u8>)>) {
            let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap()).collect();
            entries.sort_by_key(|e| e.path());
            for e in entries {
                let p = e.path();
                if p.is_dir() {
                    walk(&p, base, out);
                } else {
                    out.push((
                        p.strip_prefix(base).unwrap().display().to_string(),
                        std::fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        walk(dir, dir, &mut files);
        files
    }

    #[test]
    fn regeneration_is_bytewise_identical() {
        let spec = SceneSpec {
            image_size: 32,
            seed: 5,
            ..Default::default()
        };
        let d1 = tmp_dir("gen1");
        let d2 = tmp_dir("gen2");
        generate(&spec, 6, &d1).unwrap();
        generate(&spec, 6, &d2).unwrap();
        assert_eq!(dir_snapshot(&d1), dir_snapshot(&d2));
    }

    #[test]
    fn annotation_tightly_bounds_rendered_mask() {
        // Rasterization oracle: each shape's solo mask bounding box must
        // match its annotation within one pixel on every side.
        let spec = SceneSpec {
            image_size: 64,
            seed: 11,
            ..Default::default()
        };
        let n = spec.image_size;
        for img_idx in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ img_idx);
            let shapes = sample_scene(&spec, &mut rng);
            for s in &shapes {
                let (mut x0, mut y0, mut x1, mut y1) = (n, n, 0usize, 0usize);
                let mut any = false;
                for py in 0..n {
                    for px in 0..n {
                        let x = (px as f64 + 0.5) / n as f64;
                        let y = (py as f64 + 0.5) / n as f64;
                        if shape_contains(s.label, &s.cbox, x, y) {
                            any = true;
                            x0 = x0.min(px);
                            y0 = y0.min(py);
                            x1 = x1.max(px);
                            y1 = y1.max(py);
                        }
                    }
                }
                assert!(any, "shape rendered no pixels: {s:?}");
                let c = s.cbox.to_corner();
                let tol = 1.0;
                assert!((x0 as f64 - c.x1 * n as f64).abs() <= tol + 0.5, "{s:?}");
                assert!((x1 as f64 + 1.0 - c.x2 * n as f64).abs() <= tol + 0.5, "{s:?}");
                assert!((y0 as f64 - c.y1 * n as f64).abs() <= tol + 0.5, "{s:?}");
                assert!((y1 as f64 + 1.0 - c.y2 * n as f64).abs() <= tol + 0.5, "{s:?}");
            }
        }
    }

    #[test]
    fn object_counts_stay_in_range_and_overlap_bounded() {
        let spec = SceneSpec {
            image_size: 48,
            seed: 3,
            ..Default::default()
        };
        for i in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ i);
            let shapes = sample_scene(&spec, &mut rng);
            assert!(shapes.len() >= spec.min_objects && shapes.len() <= spec.max_objects);
            for a in 0..shapes.len() {
                for b in a + 1..shapes.len() {
                    assert!(
                        crate::geometry::iou(&shapes[a].cbox, &shapes[b].cbox)
                            <= MAX_PLACEMENT_IOU + 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn load_roundtrip_and_shuffle() {
        let spec = SceneSpec {
            image_size: 32,
            seed: 7,
            ..Default::default()
        };
        let d = tmp_dir("load");
        generate(&spec, 5, &d).unwrap();
        let ds = Dataset::load(&d).unwrap();
        assert_eq!(ds.len(), 5);
        // Pixel roundtrip: regenerate image 2 and compare.
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 2);
        let shapes = sample_scene(&spec, &mut rng);
        let rgb = render_scene(&spec, &shapes, &mut rng);
        let t = ds.load_image::<f64>(2).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    let expect = rgb[(y * 32 + x) * 3 + c] as f64 / 255.0;
                    let got = t.data()[(c * 32 + y) * 32 + x];
                    assert!((got - expect).abs() < 1e-12);
                }
            }
        }
        // Shuffle is a permutation.
        let mut idx = ds.shuffled_indices(9);
        idx.sort_unstable();
        assert_eq!(idx, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn loader_names_offending_records() {
        let spec = SceneSpec {
            image_size: 32,
            seed: 1,
            ..Default::default()
        };
        let d = tmp_dir("badload");
        generate(&spec, 3, &d).unwrap();
        std::fs::remove_file(d.join("images/000001.ppm")).unwrap();
        let err = Dataset::load(&d).err().expect("load should fail").to_string();
        assert!(err.contains("000001") && err.contains("1"), "{err}");

        let d2 = tmp_dir("badlabel");
        generate(&spec, 1, &d2).unwrap();
        let text = std::fs::read_to_string(d2.join("annotations.json")).unwrap();
        let mut manifest: DatasetManifest = serde_json::from_str(&text).unwrap();
        manifest.annotations[0].label = 9;
        std::fs::write(
            d2.join("annotations.json"),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let err = Dataset::load(&d2).err().expect("load should fail").to_string();
        assert!(err.contains("label 9"), "{err}");
    }

    #[test]
    fn spec_file_rejects_unknown_key() {
        let d = tmp_dir("specfile");
        let p = d.join("scene.cfg");
        std::fs::write(&p, "image_size=64\nbogus_key=3\n").unwrap();
        let err = SceneSpec::from_file(&p).unwrap_err().to_string();
        assert!(err.contains("bogus_key"), "{err}");
    }
}
