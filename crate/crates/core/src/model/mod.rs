//! A small pre-norm decoder-only transformer with hand-written backward pass.
//!
//! Everything is generic over [`Float`] so that training can run in `f32`
//! while gradient checks and attribution oracles run in `f64`.

mod adapt;
pub mod optim;
mod backward;
pub mod checkpoint;
mod forward;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, LinalgScalar, ScalarOperand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub use adapt::{adapt_embeddings, AdaptOutcome, AdaptSettings};
pub use backward::{gradients, loss, LossValue, TrainExample};
pub use forward::{
    forward, layer_output_with_zeroed_value, next_token_logits, ForwardOutput, ForwardTrace,
    LayerTrace,
};

/// Scalar type the model can run in.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite conversion")
    }
}

impl Float for f32 {}
impl Float for f64 {}

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub seed: u64,
    /// Reuse the token embedding as the output projection.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 256,
            max_context: 256,
            seed: 0,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(LabError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(LabError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<F> {
    pub gain: Array1<F>,
    pub bias: Array1<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    pub attn_norm: Norm<F>,
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub ffn_norm: Norm<F>,
    pub w_in: Array2<F>,
    pub b_in: Array1<F>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
}

/// Model weights. Also used as the container for gradients and optimizer
/// moments, which share the exact same shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<F> {
    pub config: ModelConfig,
    /// `vocab_size × d_model`
    pub token_embedding: Array2<F>,
    /// `max_context × d_model`
    pub position_embedding: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Norm<F>,
    /// `d_model × vocab_size`; absent when embeddings are tied.
    pub output_projection: Option<Array2<F>>,
}

/// Tensors that embedding adaptation is allowed to touch.
pub fn is_embedding_tensor(name: &str) -> bool {
    name == "token_embedding" || name == "output_projection"
}

impl<F: Float> Parameters<F> {
    /// Seeded Gaussian init (std 0.02, residual output projections scaled by
    /// `1/sqrt(2 n_layers)`), unit norm gains, zero biases.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut mat = |rows: usize, cols: usize, std: f64| -> Array2<F> {
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn((rows, cols), || F::lit(dist.sample(&mut rng)))
        };
        let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
        let token_embedding = mat(v, d, std);
        let position_embedding = mat(config.max_context, d, std);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Norm::identity(d),
                wq: mat(d, d, std),
                bq: Array1::zeros(d),
                wk: mat(d, d, std),
                bk: Array1::zeros(d),
                wv: mat(d, d, std),
                bv: Array1::zeros(d),
                wo: mat(d, d, resid_std),
                bo: Array1::zeros(d),
                ffn_norm: Norm::identity(d),
                w_in: mat(d, ff, std),
                b_in: Array1::zeros(ff),
                w_out: mat(ff, d, resid_std),
                b_out: Array1::zeros(d),
            })
            .collect();
        let output_projection = (!config.tie_embeddings).then(|| mat(d, v, std));
        Ok(Parameters {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            final_norm: Norm::identity(d),
            output_projection,
        })
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, mut t) in out.tensors_mut() {
            t.fill(F::zero());
        }
        out
    }

    pub fn cast<G: Float>(&self) -> Parameters<G> {
        let m2 = |a: &Array2<F>| a.mapv(|x| G::lit(x.as_f64()));
        let m1 = |a: &Array1<F>| a.mapv(|x| G::lit(x.as_f64()));
        let norm = |n: &Norm<F>| Norm {
            gain: m1(&n.gain),
            bias: m1(&n.bias),
        };
        Parameters {
            config: self.config.clone(),
            token_embedding: m2(&self.token_embedding),
            position_embedding: m2(&self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: norm(&l.attn_norm),
                    wq: m2(&l.wq),
                    bq: m1(&l.bq),
                    wk: m2(&l.wk),
                    bk: m1(&l.bk),
                    wv: m2(&l.wv),
                    bv: m1(&l.bv),
                    wo: m2(&l.wo),
                    bo: m1(&l.bo),
                    ffn_norm: norm(&l.ffn_norm),
                    w_in: m2(&l.w_in),
                    b_in: m1(&l.b_in),
                    w_out: m2(&l.w_out),
                    b_out: m1(&l.b_out),
                })
                .collect(),
            final_norm: norm(&self.final_norm),
            output_projection: self.output_projection.as_ref().map(m2),
        }
    }

    /// Output projection as a `d_model × vocab_size` view.
    pub fn unembedding(&self) -> ndarray::ArrayView2<'_, F> {
        match &self.output_projection {
            Some(w) => w.view(),
            None => self.token_embedding.t(),
        }
    }

    /// Every tensor in a fixed order, with a stable name.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out: Vec<(String, ArrayViewD<'_, F>)> = vec![
            ("token_embedding".into(), self.token_embedding.view().into_dyn()),
            (
                "position_embedding".into(),
                self.position_embedding.view().into_dyn(),
            ),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("attn_norm.gain"), l.attn_norm.gain.view().into_dyn()),
                (p("attn_norm.bias"), l.attn_norm.bias.view().into_dyn()),
                (p("wq"), l.wq.view().into_dyn()),
                (p("bq"), l.bq.view().into_dyn()),
                (p("wk"), l.wk.view().into_dyn()),
                (p("bk"), l.bk.view().into_dyn()),
                (p("wv"), l.wv.view().into_dyn()),
                (p("bv"), l.bv.view().into_dyn()),
                (p("wo"), l.wo.view().into_dyn()),
                (p("bo"), l.bo.view().into_dyn()),
                (p("ffn_norm.gain"), l.ffn_norm.gain.view().into_dyn()),
                (p("ffn_norm.bias"), l.ffn_norm.bias.view().into_dyn()),
                (p("w_in"), l.w_in.view().into_dyn()),
                (p("b_in"), l.b_in.view().into_dyn()),
                (p("w_out"), l.w_out.view().into_dyn()),
                (p("b_out"), l.b_out.view().into_dyn()),
            ]);
        }
        out.push(("final_norm.gain".into(), self.final_norm.gain.view().into_dyn()));
        out.push(("final_norm.bias".into(), self.final_norm.bias.view().into_dyn()));
        if let Some(w) = &self.output_projection {
            out.push(("output_projection".into(), w.view().into_dyn()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let Parameters {
            token_embedding,
            position_embedding,
            layers,
            final_norm,
            output_projection,
            ..
        } = self;
        let mut out: Vec<(String, ArrayViewMutD<'_, F>)> = vec![
            ("token_embedding".into(), token_embedding.view_mut().into_dyn()),
            (
                "position_embedding".into(),
                position_embedding.view_mut().into_dyn(),
            ),
        ];
        for (i, l) in layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            let LayerParams {
                attn_norm,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ffn_norm,
                w_in,
                b_in,
                w_out,
                b_out,
            } = l;
            out.extend([
                (p("attn_norm.gain"), attn_norm.gain.view_mut().into_dyn()),
                (p("attn_norm.bias"), attn_norm.bias.view_mut().into_dyn()),
                (p("wq"), wq.view_mut().into_dyn()),
                (p("bq"), bq.view_mut().into_dyn()),
                (p("wk"), wk.view_mut().into_dyn()),
                (p("bk"), bk.view_mut().into_dyn()),
                (p("wv"), wv.view_mut().into_dyn()),
                (p("bv"), bv.view_mut().into_dyn()),
                (p("wo"), wo.view_mut().into_dyn()),
                (p("bo"), bo.view_mut().into_dyn()),
                (p("ffn_norm.gain"), ffn_norm.gain.view_mut().into_dyn()),
                (p("ffn_norm.bias"), ffn_norm.bias.view_mut().into_dyn()),
                (p("w_in"), w_in.view_mut().into_dyn()),
                (p("b_in"), b_in.view_mut().into_dyn()),
                (p("w_out"), w_out.view_mut().into_dyn()),
                (p("b_out"), b_out.view_mut().into_dyn()),
            ]);
        }
        out.push(("final_norm.gain".into(), final_norm.gain.view_mut().into_dyn()));
        out.push(("final_norm.bias".into(), final_norm.bias.view_mut().into_dyn()));
        if let Some(w) = output_projection {
            out.push(("output_projection".into(), w.view_mut().into_dyn()));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// L2 norm over every entry, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|x| x.as_f64().powi(2)).collect::<Vec<_>>())
            .sum::<f64>()
            .sqrt()
    }

    /// `self *= factor`, entrywise.
    pub fn scale(&mut self, factor: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    /// `self += other`, entrywise. Shapes must match.
    pub fn add_assign(&mut self, other: &Parameters<F>) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }
}

impl<F: Float> Norm<F> {
    fn identity(d: usize) -> Self {
        Norm {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = ModelConfig {
            vocab_size: 40,
            max_context: 16,
            d_model: 64,
            d_ff: 32,
            n_layers: 2,
            ..ModelConfig::default()
        };
        let a = Parameters::<f32>::init(&cfg).unwrap();
        let b = Parameters::<f32>::init(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
        assert_eq!(cfg.head_dim(), 16);
        let c = Parameters::<f32>::init(&ModelConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            d_model: 30,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(LabError::Config(_))));
        let zero = ModelConfig {
            n_layers: 0,
            ..ModelConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn tensor_listing_is_consistent() {
        let cfg = ModelConfig {
            vocab_size: 20,
            max_context: 8,
            d_model: 8,
            d_ff: 16,
            n_layers: 2,
            n_heads: 2,
            ..ModelConfig::default()
        };
        let mut p = Parameters::<f64>::init(&cfg).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = p.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert_eq!(names.len(), 2 + 16 * 2 + 2 + 1);
        let tied = Parameters::<f64>::init(&ModelConfig {
            tie_embeddings: true,
            ..cfg
        })
        .unwrap();
        assert!(tied.output_projection.is_none());
        assert_eq!(tied.tensors().len(), names.len() - 1);
        assert_eq!(tied.unembedding().dim(), (8, 20));
    }
}
