//! Named parameter collections and linear-layer helpers shared by every
//! learned model in the crate.

use crate::error::{CoreError, CoreResult};
use crate::numcore::init::orthogonal_init;
use crate::numcore::tape::{Tape, VarId};
use crate::numcore::Tensor;
use rand_chacha::ChaCha12Rng;

/// Ordered, named parameter tensors. Iteration order is insertion order,
/// which makes optimizer state, checkpoints and gradient plumbing
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Register every parameter as a tape leaf, in store order.
    pub fn register(&self, tape: &mut Tape) -> Vec<VarId> {
        self.tensors.iter().map(|t| tape.leaf_tensor(t)).collect()
    }

    /// Register every parameter with gradients disabled (frozen forward).
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<VarId> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.rows(), t.cols(), &t.data, false))
            .collect()
    }

    /// Collect per-parameter gradients (by store order) out of a backward
    /// result.
    pub fn grads(&self, ids: &[VarId], grads: &crate::numcore::tape::TapeGrads) -> Vec<Option<Vec<f64>>> {
        ids.iter().map(|&id| grads.get(id).map(|g| g.to_vec())).collect()
    }

    /// Euclidean distance between two stores with identical layouts.
    pub fn l2_distance(&self, other: &ParamStore) -> f64 {
        let mut s = 0.0;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                s += (x - y) * (x - y);
            }
        }
        s.sqrt()
    }

    /// Polyak-average `src` into `self`: p <- (1 - tau) p + tau q.
    pub fn polyak_from(&mut self, src: &ParamStore, tau: f64) {
        for (dst, s) in self.tensors.iter_mut().zip(&src.tensors) {
            for (d, q) in dst.data.iter_mut().zip(&s.data) {
                *d = (1.0 - tau) * *d + tau * q;
            }
        }
    }

    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

/// A linear layer's parameter handles within some [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    /// Orthogonal weight (given gain), zero bias.
    pub fn orthogonal(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut ChaCha12Rng,
    ) -> CoreResult<Linear> {
        let w = orthogonal_init(fan_in, fan_out, gain, rng)?.with_grad();
        let b = Tensor::zeros(vec![1, fan_out]).with_grad();
        Ok(Linear {
            w: store.insert(format!("{prefix}.w"), w),
            b: store.insert(format!("{prefix}.b"), b),
        })
    }

    /// Zero weight and bias (residual output heads).
    pub fn zeros(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = Tensor::zeros(vec![fan_in, fan_out]).with_grad();
        let b = Tensor::zeros(vec![1, fan_out]).with_grad();
        Linear {
            w: store.insert(format!("{prefix}.w"), w),
            b: store.insert(format!("{prefix}.b"), b),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[VarId], x: VarId) -> CoreResult<VarId> {
        let h = tape.matmul(x, ids[self.w])?;
        tape.add(h, ids[self.b])
    }
}

/// LayerNorm affine parameter handles.
#[derive(Debug, Clone, Copy)]
pub struct LnParams {
    pub gamma: usize,
    pub beta: usize,
}

impl LnParams {
    pub fn unit(store: &mut ParamStore, prefix: &str, dim: usize) -> LnParams {
        let gamma = Tensor::new(vec![1, dim], vec![1.0; dim]).expect("shape").with_grad();
        let beta = Tensor::zeros(vec![1, dim]).with_grad();
        LnParams {
            gamma: store.insert(format!("{prefix}.g"), gamma),
            beta: store.insert(format!("{prefix}.b"), beta),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[VarId], x: VarId) -> CoreResult<VarId> {
        tape.layernorm(x, ids[self.gamma], ids[self.beta])
    }
}

/// A fully-connected stack: hidden layers with relu (optionally layernorm
/// before the activation), linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<Option<LnParams>>,
}

impl Mlp {
    /// Orthogonal-initialized MLP. `dims` runs input..=output;
    /// `layernorm` inserts LayerNorm after every hidden layer.
    pub fn orthogonal(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        layernorm: bool,
        hidden_gain: f64,
        out_gain: f64,
        rng: &mut ChaCha12Rng,
    ) -> CoreResult<Mlp> {
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for i in 0..dims.len() - 1 {
            let last = i + 2 == dims.len();
            let gain = if last { out_gain } else { hidden_gain };
            layers.push(Linear::orthogonal(
                store,
                &format!("{prefix}.l{i}"),
                dims[i],
                dims[i + 1],
                gain,
                rng,
            )?);
            if !last && layernorm {
                norms.push(Some(LnParams::unit(
                    store,
                    &format!("{prefix}.ln{i}"),
                    dims[i + 1],
                )));
            } else {
                norms.push(None);
            }
        }
        Ok(Mlp { layers, norms })
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[VarId], x: VarId) -> CoreResult<VarId> {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, ids, h)?;
            if i + 1 < n {
                if let Some(ln) = &self.norms[i] {
                    h = ln.forward(tape, ids, h)?;
                }
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Forward without a tape (frozen nets, target networks).
    pub fn forward_nograd(&self, store: &ParamStore, x: &[f64], rows: usize) -> CoreResult<Vec<f64>> {
        let mut cur = x.to_vec();
        let mut cols = x.len() / rows;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = store.at(layer.w);
            let b = store.at(layer.b);
            let (fi, fo) = (w.rows(), w.cols());
            if fi != cols {
                return Err(CoreError::config(format!(
                    "mlp layer {i}: input cols {cols} != fan-in {fi}"
                )));
            }
            let mut out = vec![0.0; rows * fo];
            crate::numcore::tape::matmul_acc(&cur, &w.data, &mut out, rows, fi, fo);
            for r in 0..rows {
                for j in 0..fo {
                    out[r * fo + j] += b.data[j];
                }
            }
            if i + 1 < n {
                if let Some(ln) = &self.norms[i] {
                    let gamma = &store.at(ln.gamma).data;
                    let beta = &store.at(ln.beta).data;
                    for r in 0..rows {
                        let row = &mut out[r * fo..(r + 1) * fo];
                        let mean = row.iter().sum::<f64>() / fo as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / fo as f64;
                        let inv = 1.0 / (var + crate::numcore::tape::LAYERNORM_EPS).sqrt();
                        for j in 0..fo {
                            row[j] = (row[j] - mean) * inv * gamma[j] + beta[j];
                        }
                    }
                }
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            cur = out;
            cols = fo;
        }
        Ok(cur)
    }
}

