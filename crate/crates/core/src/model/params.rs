use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::CancerType;

/// Layer widths of one single-scale network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width D of the incoming bags.
    pub input_dim: usize,
    /// Graph representation width (512 by default).
    pub width: usize,
    /// Gated-attention hidden width.
    pub attn_hidden: usize,
    /// Number of residual GCN blocks.
    pub blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: crate::embedding::BUILTIN_DIM,
            width: 512,
            attn_hidden: 256,
            blocks: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 || self.attn_hidden == 0 || self.blocks == 0 {
            return Err(Error::Config(format!("model dimensions must all be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnBlock {
    pub norm_scale: Array1<f64>,
    pub norm_shift: Array1<f64>,
    pub conv_weight: Array2<f64>,
    pub conv_bias: Array1<f64>,
}

/// Trainable weights of one single-scale network. Row-vector convention:
/// a layer maps `h` to `h . weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub proj_weight: Array2<f64>,
    pub proj_bias: Array1<f64>,
    pub blocks: Vec<GcnBlock>,
    /// Sigmoid-gate projection (width x attn_hidden).
    pub attn_u: Array2<f64>,
    /// Tanh projection (width x attn_hidden).
    pub attn_w: Array2<f64>,
    /// Attention score vector (attn_hidden).
    pub attn_v: Array1<f64>,
    /// Expands the one-hot cancer type (7 x width).
    pub class_weight: Array2<f64>,
    pub class_bias: Array1<f64>,
    /// Classifier over concat(pooled, class feature): (2 * width) x 2.
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

/// Borrowed view of one named tensor.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

impl ModelParams {
    /// All weights and biases zero, norm scales one.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let e = cfg.width;
        Self {
            proj_weight: Array2::zeros((cfg.input_dim, e)),
            proj_bias: Array1::zeros(e),
            blocks: (0..cfg.blocks)
                .map(|_| GcnBlock {
                    norm_scale: Array1::ones(e),
                    norm_shift: Array1::zeros(e),
                    conv_weight: Array2::zeros((e, e)),
                    conv_bias: Array1::zeros(e),
                })
                .collect(),
            attn_u: Array2::zeros((e, cfg.attn_hidden)),
            attn_w: Array2::zeros((e, cfg.attn_hidden)),
            attn_v: Array1::zeros(cfg.attn_hidden),
            class_weight: Array2::zeros((CancerType::COUNT, e)),
            class_bias: Array1::zeros(e),
            head_weight: Array2::zeros((2 * e, 2)),
            head_bias: Array1::zeros(2),
        }
    }

    /// Glorot-uniform matrices, zero biases, unit norm scales.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let e = cfg.width;
        let h = cfg.attn_hidden;
        let mut p = Self::zeros(cfg);
        p.proj_weight = glorot(rng, cfg.input_dim, e);
        for b in &mut p.blocks {
            b.conv_weight = glorot(rng, e, e);
        }
        p.attn_u = glorot(rng, e, h);
        p.attn_w = glorot(rng, e, h);
        p.attn_v = glorot(rng, h, 1).into_shape_with_order(h).expect("column vector");
        p.class_weight = glorot(rng, CancerType::COUNT, e);
        p.head_weight = glorot(rng, 2 * e, 2);
        p
    }

    /// Same shapes, every entry zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.proj_weight.nrows(),
            width: self.proj_weight.ncols(),
            attn_hidden: self.attn_v.len(),
            blocks: self.blocks.len(),
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        fn t2<'a>(name: String, a: &'a Array2<f64>) -> TensorRef<'a> {
            TensorRef {
                name,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            }
        }
        fn t1<'a>(name: String, a: &'a Array1<f64>) -> TensorRef<'a> {
            TensorRef {
                name,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            }
        }
        let mut out = vec![t2("proj.weight".into(), &self.proj_weight), t1("proj.bias".into(), &self.proj_bias)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(t1(format!("blocks.{i}.norm.scale"), &b.norm_scale));
            out.push(t1(format!("blocks.{i}.norm.shift"), &b.norm_shift));
            out.push(t2(format!("blocks.{i}.conv.weight"), &b.conv_weight));
            out.push(t1(format!("blocks.{i}.conv.bias"), &b.conv_bias));
        }
        out.push(t2("attn.u".into(), &self.attn_u));
        out.push(t2("attn.w".into(), &self.attn_w));
        out.push(t1("attn.v".into(), &self.attn_v));
        out.push(t2("class_fc.weight".into(), &self.class_weight));
        out.push(t1("class_fc.bias".into(), &self.class_bias));
        out.push(t2("head.weight".into(), &self.head_weight));
        out.push(t1("head.bias".into(), &self.head_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        fn s<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("proj.weight".into(), s(&mut self.proj_weight)),
            ("proj.bias".into(), s(&mut self.proj_bias)),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.norm.scale"), s(&mut b.norm_scale)));
            out.push((format!("blocks.{i}.norm.shift"), s(&mut b.norm_shift)));
            out.push((format!("blocks.{i}.conv.weight"), s(&mut b.conv_weight)));
            out.push((format!("blocks.{i}.conv.bias"), s(&mut b.conv_bias)));
        }
        out.push(("attn.u".into(), s(&mut self.attn_u)));
        out.push(("attn.w".into(), s(&mut self.attn_w)));
        out.push(("attn.v".into(), s(&mut self.attn_v)));
        out.push(("class_fc.weight".into(), s(&mut self.class_weight)));
        out.push(("class_fc.bias".into(), s(&mut self.class_bias)));
        out.push(("head.weight".into(), s(&mut self.head_weight)));
        out.push(("head.bias".into(), s(&mut self.head_bias)));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.name == y.name && x.shape == y.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let src = other.tensors();
        for ((_, dst), s) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s.data) {
                *d += scale * v;
            }
        }
    }

    /// Rebuild from named tensors (checkpoint loading). Names and shapes
    /// must match what `tensors()` would produce for `cfg`.
    pub fn from_named(cfg: &ModelConfig, lookup: impl Fn(&str) -> Option<(Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut p = Self::zeros(cfg);
        let shapes: Vec<(String, Vec<usize>)> = p.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        for ((name, slot), (_, shape)) in p.tensors_mut().into_iter().zip(shapes) {
            let (got_shape, data) =
                lookup(&name).ok_or_else(|| Error::Data(format!("checkpoint missing tensor {name}")))?;
            if got_shape != shape {
                return Err(Error::Data(format!("tensor {name}: shape {got_shape:?}, expected {shape:?}")));
            }
            slot.copy_from_slice(&data);
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_glorot_bounds() {
        let cfg = ModelConfig {
            input_dim: 10,
            width: 16,
            attn_hidden: 8,
            blocks: 2,
        };
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let a = (6.0f64 / 26.0).sqrt();
        assert!(p.proj_weight.iter().all(|v| v.abs() <= a));
        assert!(p.proj_bias.iter().all(|&v| v == 0.0));
        assert!(p.blocks.iter().all(|b| b.norm_scale.iter().all(|&v| v == 1.0)));
        assert_eq!(p.config(), cfg);
        assert_eq!(p.tensors().len(), 2 + 4 * 2 + 7);
        let expected = 10 * 16 + 16 + 2 * (16 * 3 + 256) + 2 * 16 * 8 + 8 + 7 * 16 + 16 + 32 * 2 + 2;
        assert_eq!(p.num_parameters(), expected);
    }

    #[test]
    fn add_scaled_and_zeros_like() {
        let cfg = ModelConfig {
            input_dim: 3,
            width: 4,
            attn_hidden: 2,
            blocks: 1,
        };
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let mut z = p.zeros_like();
        assert!(z.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
        z.add_scaled(&p, 2.0);
        assert_eq!(z.proj_weight, &p.proj_weight * 2.0);
        assert!(z.same_shape(&p));
    }
}
