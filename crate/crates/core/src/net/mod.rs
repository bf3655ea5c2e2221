//! The core model: attention over arc length, an MLP encoder and an LDL head,
//! with handwritten reverse-mode gradients.
//!
//! ```text
//! s_norm ──attention──▶ s̃ ─┐
//! sdot_norm ───────────────┼──MLP──▶ φ ──LDL head──▶ Q = L D Lᵀ
//! g_norm ──────────────────┘
//! ```

pub mod attention;
pub mod checkpoint;
pub mod head;
pub mod mlp;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, QUALITY_DIM};
use crate::spd::{lower_len, SpdMatrix};

pub use attention::{attention_embed, AttentionParams};
pub use head::{softplus, spd_head, SpdHeadParams};
pub use mlp::{mlp_forward, Dense, MlpParams};

/// Architecture of the core model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output matrix dimension.
    pub n: usize,
    /// Number of attention keys.
    pub keys: usize,
    pub value_dim: usize,
    /// Width of the spatial embedding `s̃`.
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Width of `φ`.
    pub phi_dim: usize,
    pub quality_dim: usize,
    pub temperature_init: f64,
    pub temperature_floor: f64,
    /// When false the keys stay on an even grid and receive no updates.
    pub learnable_keys: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 3,
            keys: 32,
            value_dim: 8,
            embed_dim: 4,
            hidden: vec![32, 32],
            phi_dim: 16,
            quality_dim: QUALITY_DIM,
            temperature_init: 0.1,
            temperature_floor: 1e-3,
            learnable_keys: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("keys", self.keys),
            ("value_dim", self.value_dim),
            ("embed_dim", self.embed_dim),
            ("phi_dim", self.phi_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidParameter(format!("{name} must be positive")));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidParameter("hidden widths must be positive".into()));
        }
        if !(self.temperature_floor > 0.0) || !(self.temperature_init >= self.temperature_floor) {
            return Err(Error::InvalidParameter(
                "temperature must start at or above a positive floor".into(),
            ));
        }
        Ok(())
    }

    pub fn mlp_in_dim(&self) -> usize {
        self.embed_dim + 1 + self.quality_dim
    }
}

/// All learnable parameters, including the spectral parameters consumed by
/// the covariance dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreModelParams {
    pub attention: AttentionParams,
    pub mlp: MlpParams,
    pub head: SpdHeadParams,
    pub spectral_theta: Vec<f64>,
}

/// A named view of one parameter tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl CoreModelParams {
    /// Seeded initialization: keys uniform on the circle, weights zero-mean
    /// with variance `1/fan_in`, biases and spectral parameters zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussian = |count: usize, fan_in: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let d = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
            (0..count).map(|_| d.sample(rng)).collect()
        };
        let key_angles = if cfg.learnable_keys {
            (0..cfg.keys).map(|_| rng.random_range(0.0..1.0)).collect()
        } else {
            (0..cfg.keys).map(|j| j as f64 / cfg.keys as f64).collect()
        };
        let attention = AttentionParams {
            key_angles,
            values: gaussian(cfg.keys * cfg.value_dim, cfg.keys, &mut rng),
            out_proj: gaussian(cfg.embed_dim * cfg.value_dim, cfg.value_dim, &mut rng),
            temperature: cfg.temperature_init,
            value_dim: cfg.value_dim,
        };
        let mut dims = vec![cfg.mlp_in_dim()];
        dims.extend(&cfg.hidden);
        dims.push(cfg.phi_dim);
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                in_dim: w[0],
                out_dim: w[1],
                weights: gaussian(w[0] * w[1], w[0], &mut rng),
                bias: vec![0.0; w[1]],
            })
            .collect();
        let head = SpdHeadParams {
            dim: cfg.n,
            phi_dim: cfg.phi_dim,
            a_vecs: gaussian(cfg.n * cfg.phi_dim, cfg.phi_dim, &mut rng),
            // Start close to L = I.
            b_vecs: gaussian(lower_len(cfg.n) * cfg.phi_dim, cfg.phi_dim, &mut rng)
                .into_iter()
                .map(|x| 0.1 * x)
                .collect(),
        };
        Ok(CoreModelParams {
            attention,
            mlp: MlpParams { layers },
            head,
            spectral_theta: vec![0.0; cfg.n],
        })
    }

    pub fn zeros_like(&self) -> Self {
        CoreModelParams {
            attention: self.attention.zeros_like(),
            mlp: self.mlp.zeros_like(),
            head: self.head.zeros_like(),
            spectral_theta: vec![0.0; self.spectral_theta.len()],
        }
    }

    pub fn dim(&self) -> usize {
        self.head.dim
    }

    /// Canonical names and shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let a = &self.attention;
        let mut out = vec![
            TensorView {
                name: "attention.key_angles".into(),
                shape: vec![a.keys()],
                data: &a.key_angles,
            },
            TensorView {
                name: "attention.values".into(),
                shape: vec![a.keys(), a.value_dim],
                data: &a.values,
            },
            TensorView {
                name: "attention.out_proj".into(),
                shape: vec![a.out_dim(), a.value_dim],
                data: &a.out_proj,
            },
            TensorView {
                name: "attention.temperature".into(),
                shape: vec![1],
                data: std::slice::from_ref(&a.temperature),
            },
        ];
        for (i, l) in self.mlp.layers.iter().enumerate() {
            out.push(TensorView {
                name: format!("mlp.layers.{i}.weight"),
                shape: vec![l.out_dim, l.in_dim],
                data: &l.weights,
            });
            out.push(TensorView {
                name: format!("mlp.layers.{i}.bias"),
                shape: vec![l.out_dim],
                data: &l.bias,
            });
        }
        let h = &self.head;
        out.push(TensorView {
            name: "head.a_vecs".into(),
            shape: vec![h.dim, h.phi_dim],
            data: &h.a_vecs,
        });
        out.push(TensorView {
            name: "head.b_vecs".into(),
            shape: vec![lower_len(h.dim), h.phi_dim],
            data: &h.b_vecs,
        });
        out.push(TensorView {
            name: "spectral_theta".into(),
            shape: vec![self.spectral_theta.len()],
            data: &self.spectral_theta,
        });
        out
    }

    /// Mutable slices in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.attention.key_angles,
            &mut self.attention.values,
            &mut self.attention.out_proj,
            std::slice::from_mut(&mut self.attention.temperature),
        ];
        for l in &mut self.mlp.layers {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.a_vecs);
        out.push(&mut self.head.b_vecs);
        out.push(&mut self.spectral_theta);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        for t in self.tensors_mut() {
            let len = t.len();
            t.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &CoreModelParams, scale: f64) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, x) in dst.iter_mut().zip(s.data) {
                *d += scale * x;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Euclidean norm of each tensor, for divergence diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.tensors()
            .into_iter()
            .map(|t| (t.name, t.data.iter().map(|x| x * x).sum::<f64>().sqrt()))
            .collect()
    }
}

/// Activations of one forward evaluation.
#[derive(Debug, Clone)]
pub struct ModelCache {
    pub attention: attention::AttentionCache,
    pub mlp: mlp::MlpCache,
    pub head: head::HeadCache,
}

impl ModelCache {
    pub fn phi(&self) -> &[f64] {
        self.mlp.output()
    }

    /// `Q`, row-major.
    pub fn matrix(&self) -> &[f64] {
        &self.head.matrix
    }
}

/// Gradient of a loss with respect to the model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrad {
    pub s_norm: f64,
    pub sdot_norm: f64,
    pub g_norm: Vec<f64>,
}

pub fn model_forward_cached(features: &FeatureVector, params: &CoreModelParams) -> ModelCache {
    let attention = attention::attention_forward(features.s_norm, &params.attention);
    let input = mlp::mlp_input(&attention.output, features.sdot_norm, &features.g_norm);
    let mlp = mlp::mlp_forward_cached(input, &params.mlp);
    let head = head::head_forward(mlp.output(), &params.head);
    ModelCache {
        attention,
        mlp,
        head,
    }
}

/// `Q(φ(s̃(s), ṡ, g))`.
pub fn model_forward(features: &FeatureVector, params: &CoreModelParams) -> Result<SpdMatrix> {
    let expected = params.mlp.in_dim() - params.attention.out_dim() - 1;
    if features.g_norm.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "model expects {expected} quality features, got {}",
            features.g_norm.len()
        )));
    }
    let cache = model_forward_cached(features, params);
    SpdMatrix::new(params.dim(), cache.head.matrix)
}

/// Reverse pass for an upstream gradient `∂ℓ/∂Q` given as a full `n × n`
/// row-major array. Accumulates into `grads` (the spectral entries are left
/// untouched) and returns the input gradient.
pub fn model_backward(
    cache: &ModelCache,
    params: &CoreModelParams,
    grad_q: &[f64],
    grads: &mut CoreModelParams,
) -> InputGrad {
    let grad_phi = head::head_backward(&cache.head, cache.phi(), &params.head, grad_q, &mut grads.head);
    let grad_in = mlp::mlp_backward(&cache.mlp, &params.mlp, &grad_phi, &mut grads.mlp);
    let c = params.attention.out_dim();
    let grad_s = attention::attention_backward(&cache.attention, &params.attention, &grad_in[..c], &mut grads.attention);
    InputGrad {
        s_norm: grad_s,
        sdot_norm: grad_in[c],
        g_norm: grad_in[c + 1..].to_vec(),
    }
}
