//! Named parameter registry and the standard layers built on it.
//!
//! Parameters live in a [`ParamStore`] in creation order; a forward pass
//! installs them all as graph leaves so `ParamId` doubles as the leaf
//! `NodeId`. Creation order is deterministic, which is what makes seeded
//! builds bitwise reproducible and checkpoint records stable.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Install every parameter as a graph leaf, in id order, on an empty
    /// graph — so `ParamId == NodeId` for the rest of the forward pass.
    pub fn install(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<()> {
        if !g.is_empty() {
            return Err(Error::Msg(
                "parameters must be installed on an empty graph".into(),
            ));
        }
        for (_, t) in &self.entries {
            g.leaf(t.clone(), requires_grad);
        }
        Ok(())
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn xavier_uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-limit..limit)))
}

/// Linear map `x [.., in] -> x·W + b [.., out]`; Xavier-uniform weight,
/// zero bias. The bias is optional: a key-projection bias in attention is
/// exactly cancelled by the softmax, so such maps omit it.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            xavier_uniform(rng, &[fan_in, fan_out], fan_in, fan_out),
        );
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b: Some(b) }
    }

    pub fn new_no_bias<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            xavier_uniform(rng, &[fan_in, fan_out], fan_in, fan_out),
        );
        Linear { w, b: None }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, self.w)?;
        match self.b {
            Some(b) => g.add(y, b),
            None => Ok(y),
        }
    }
}

/// 3x3-style convolution with bias, `[cin,h,w] -> [cout,h',w']`.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            xavier_uniform(rng, &[cout, cin, k, k], cin * k * k, cout * k * k),
        );
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[cout]));
        Conv {
            w,
            b,
            cout,
            stride,
            pad,
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let y = g.conv2d(x, self.w, self.stride, self.pad)?;
        let bias = g.reshape(self.b, &[self.cout, 1, 1])?;
        g.add(y, bias)
    }
}

/// Layer norm over the last axis with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        let gain = store.add(format!("{prefix}.g"), Tensor::full(&[dim], T::ONE));
        let bias = store.add(format!("{prefix}.b"), Tensor::zeros(&[dim]));
        LayerNorm {
            gain,
            bias,
            eps: 1e-5,
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let n = g.layer_norm(x, self.eps)?;
        let scaled = g.mul(n, self.gain)?;
        g.add(scaled, self.bias)
    }
}

/// Multi-layer perceptron with relu between layers, none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dims: &[usize],
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{prefix}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        for (i, lin) in self.layers.iter().enumerate() {
            cur = lin.apply(g, cur)?;
            if i + 1 < self.layers.len() {
                cur = g.relu(cur);
            }
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn install_aligns_param_ids_with_node_ids() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[2], 1.0));
        let b = store.add("b", Tensor::full(&[3], 2.0));
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        assert_eq!(g.value(a).data(), &[1.0, 1.0]);
        assert_eq!(g.value(b).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn same_seed_same_weights() {
        let build = || {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            Linear::new(&mut store, &mut rng, "l", 8, 4);
            store.get(0).data().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn linear_applies_bias() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = store.add("b", Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap());
        let lin = Linear { w, b: Some(b) };
        let mut g = Graph::new();
        store.install(&mut g, false).unwrap();
        let x = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let y = lin.apply(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0]);
    }
}
