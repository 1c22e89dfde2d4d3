//! The single-stream vision-language decoder transformer.
//!
//! Input layout:
//!
//! ```text
//! <s_img> v0 v_p1..v_pk <e_img> <s_event> e.. <e_event> <s_place> p.. <e_place> <rel> inf.. <end>
//! ```
//!
//! Every field (with its delimiters) is omitted when masked or absent; the
//! relation token doubles as the inference start delimiter. Visual rows are
//! projected features (GELU of an affine map); person grounding adds the
//! projected person feature into the word embedding of that person's tag
//! token wherever it appears in text. The visual prefix attends
//! bidirectionally within itself, text attends causally among text and
//! freely to the prefix, and the prefix never attends into text, which is
//! what keeps text positions causal through stacked layers.

mod assemble;
mod forward;
mod loss;
mod train;

pub use assemble::{assemble, assemble_parts, AssembledInput, Field, LayoutParts, ModalityMask};
pub use forward::{forward, forward_hidden, project_visual};
pub use loss::{loss_ep, loss_inference, perplexity, supervision, LossNorm, Objective};
pub(crate) use loss::build_objective;
pub use train::{train, TrainOptions, TrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::graph::MAX_VISUAL_FEATURES;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Resolved from the vocabulary when 0.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub feature_dim: usize,
    pub max_visual: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 256,
            vocab_size: 0,
            max_seq_len: 64,
            feature_dim: 64,
            max_visual: MAX_VISUAL_FEATURES,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(ModelError::BadConfig("layer/head/width fields must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 {
            return Err(ModelError::BadConfig("vocab_size unresolved".into()));
        }
        if self.max_visual > MAX_VISUAL_FEATURES {
            return Err(ModelError::BadConfig(format!(
                "max_visual {} exceeds the cap of {MAX_VISUAL_FEATURES}",
                self.max_visual
            )));
        }
        if self.max_seq_len < 4 {
            return Err(ModelError::BadConfig("max_seq_len too small".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("assembled length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("scene {scene_id} has {count} visual features, model allows {max}")]
    VisualOverflow { scene_id: String, count: usize, max: usize },
    #[error("feature dim {got} does not match model feature_dim {want}")]
    FeatureDim { got: usize, want: usize },
    #[error("text mentions [Person{tag}] but scene {scene_id} has no such feature")]
    UnknownPerson { scene_id: String, tag: u32 },
    #[error("inference sequence is empty")]
    EmptyInference,
    #[error("the event/place objective needs event and place present and unmasked")]
    EpRequiresText,
    #[error("candidate sequence is empty")]
    EmptyCandidate,
    #[error("loss is not finite at step {step}")]
    Diverged { step: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub heads: Vec<HeadParams<T>>,
    pub attn_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
}

/// All transformer weights. The output projection is tied to `tok_emb`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub vis_w: Tensor<T>,
    pub vis_b: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub ln_f_gain: Tensor<T>,
    pub ln_f_bias: Tensor<T>,
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> ModelParams<T> {
    /// Gaussian(0, 0.02) weights, unit gains, zero biases. Deterministic in
    /// `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seeds::stream(seed, seeds::TAG_INIT);
        let (d, dh, dff) = (config.d_model, config.head_dim(), config.d_ff);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::filled(&[d], T::one()),
                ln1_bias: Tensor::zeros(&[d]),
                heads: (0..config.n_heads)
                    .map(|_| HeadParams {
                        wq: Tensor::randn(&[d, dh], INIT_STD, &mut rng),
                        wk: Tensor::randn(&[d, dh], INIT_STD, &mut rng),
                        wv: Tensor::randn(&[d, dh], INIT_STD, &mut rng),
                        wo: Tensor::randn(&[dh, d], INIT_STD, &mut rng),
                    })
                    .collect(),
                attn_bias: Tensor::zeros(&[d]),
                ln2_gain: Tensor::filled(&[d], T::one()),
                ln2_bias: Tensor::zeros(&[d]),
                ffn_w1: Tensor::randn(&[d, dff], INIT_STD, &mut rng),
                ffn_b1: Tensor::zeros(&[dff]),
                ffn_w2: Tensor::randn(&[dff, d], INIT_STD, &mut rng),
                ffn_b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(ModelParams {
            tok_emb: Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng),
            pos_emb: Tensor::randn(&[config.max_seq_len, d], INIT_STD, &mut rng),
            vis_w: Tensor::randn(&[config.feature_dim, d], INIT_STD, &mut rng),
            vis_b: Tensor::zeros(&[d]),
            layers,
            ln_f_gain: Tensor::filled(&[d], T::one()),
            ln_f_bias: Tensor::zeros(&[d]),
            config,
        })
    }

    /// All-zero weights; gives exactly uniform output distributions, which
    /// several analytic tests rely on.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (d, dh, dff) = (config.d_model, config.head_dim(), config.d_ff);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::zeros(&[d]),
                ln1_bias: Tensor::zeros(&[d]),
                heads: (0..config.n_heads)
                    .map(|_| HeadParams {
                        wq: Tensor::zeros(&[d, dh]),
                        wk: Tensor::zeros(&[d, dh]),
                        wv: Tensor::zeros(&[d, dh]),
                        wo: Tensor::zeros(&[dh, d]),
                    })
                    .collect(),
                attn_bias: Tensor::zeros(&[d]),
                ln2_gain: Tensor::zeros(&[d]),
                ln2_bias: Tensor::zeros(&[d]),
                ffn_w1: Tensor::zeros(&[d, dff]),
                ffn_b1: Tensor::zeros(&[dff]),
                ffn_w2: Tensor::zeros(&[dff, d]),
                ffn_b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(ModelParams {
            tok_emb: Tensor::zeros(&[config.vocab_size, d]),
            pos_emb: Tensor::zeros(&[config.max_seq_len, d]),
            vis_w: Tensor::zeros(&[config.feature_dim, d]),
            vis_b: Tensor::zeros(&[d]),
            layers,
            ln_f_gain: Tensor::zeros(&[d]),
            ln_f_bias: Tensor::zeros(&[d]),
            config,
        })
    }

    /// Stable (name, tensor) listing; the positional order is shared with
    /// [`ModelParams::params_mut`] and [`ParamVars::in_order`].
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("vis_w".into(), &self.vis_w),
            ("vis_b".into(), &self.vis_b),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_gain"), &layer.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), &layer.ln1_bias));
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{i}.h{h}.wq"), &head.wq));
                out.push((format!("layer{i}.h{h}.wk"), &head.wk));
                out.push((format!("layer{i}.h{h}.wv"), &head.wv));
                out.push((format!("layer{i}.h{h}.wo"), &head.wo));
            }
            out.push((format!("layer{i}.attn_bias"), &layer.attn_bias));
            out.push((format!("layer{i}.ln2_gain"), &layer.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), &layer.ln2_bias));
            out.push((format!("layer{i}.ffn_w1"), &layer.ffn_w1));
            out.push((format!("layer{i}.ffn_b1"), &layer.ffn_b1));
            out.push((format!("layer{i}.ffn_w2"), &layer.ffn_w2));
            out.push((format!("layer{i}.ffn_b2"), &layer.ffn_b2));
        }
        out.push(("ln_f_gain".into(), &self.ln_f_gain));
        out.push(("ln_f_bias".into(), &self.ln_f_bias));
        out
    }

    /// Mutable views in the same order as [`ModelParams::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.vis_w,
            &mut self.vis_b,
        ];
        for layer in &mut self.layers {
            out.push(&mut layer.ln1_gain);
            out.push(&mut layer.ln1_bias);
            for head in &mut layer.heads {
                out.push(&mut head.wq);
                out.push(&mut head.wk);
                out.push(&mut head.wv);
                out.push(&mut head.wo);
            }
            out.push(&mut layer.attn_bias);
            out.push(&mut layer.ln2_gain);
            out.push(&mut layer.ln2_bias);
            out.push(&mut layer.ffn_w1);
            out.push(&mut layer.ffn_b1);
            out.push(&mut layer.ffn_w2);
            out.push(&mut layer.ffn_b2);
        }
        out.push(&mut self.ln_f_gain);
        out.push(&mut self.ln_f_bias);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Inserts every parameter into the tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars {
            tok_emb: tape.param(self.tok_emb.clone()),
            pos_emb: tape.param(self.pos_emb.clone()),
            vis_w: tape.param(self.vis_w.clone()),
            vis_b: tape.param(self.vis_b.clone()),
            layers: self
                .layers
                .iter()
                .map(|layer| LayerVars {
                    ln1_gain: tape.param(layer.ln1_gain.clone()),
                    ln1_bias: tape.param(layer.ln1_bias.clone()),
                    heads: layer
                        .heads
                        .iter()
                        .map(|head| HeadVars {
                            wq: tape.param(head.wq.clone()),
                            wk: tape.param(head.wk.clone()),
                            wv: tape.param(head.wv.clone()),
                            wo: tape.param(head.wo.clone()),
                        })
                        .collect(),
                    attn_bias: tape.param(layer.attn_bias.clone()),
                    ln2_gain: tape.param(layer.ln2_gain.clone()),
                    ln2_bias: tape.param(layer.ln2_bias.clone()),
                    ffn_w1: tape.param(layer.ffn_w1.clone()),
                    ffn_b1: tape.param(layer.ffn_b1.clone()),
                    ffn_w2: tape.param(layer.ffn_w2.clone()),
                    ffn_b2: tape.param(layer.ffn_b2.clone()),
                })
                .collect(),
            ln_f_gain: tape.param(self.ln_f_gain.clone()),
            ln_f_bias: tape.param(self.ln_f_bias.clone()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            vis_w: self.vis_w.cast(),
            vis_b: self.vis_b.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadParams {
                            wq: h.wq.cast(),
                            wk: h.wk.cast(),
                            wv: h.wv.cast(),
                            wo: h.wo.cast(),
                        })
                        .collect(),
                    attn_bias: l.attn_bias.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    ffn_w1: l.ffn_w1.cast(),
                    ffn_b1: l.ffn_b1.cast(),
                    ffn_w2: l.ffn_w2.cast(),
                    ffn_b2: l.ffn_b2.cast(),
                })
                .collect(),
            ln_f_gain: self.ln_f_gain.cast(),
            ln_f_bias: self.ln_f_bias.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub heads: Vec<HeadVars>,
    pub attn_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

/// Tape handles for one bound copy of the parameters.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub vis_w: Var,
    pub vis_b: Var,
    pub layers: Vec<LayerVars>,
    pub ln_f_gain: Var,
    pub ln_f_bias: Var,
}

impl ParamVars {
    /// Vars in [`ModelParams::named_params`] order, for gradient collection.
    pub fn in_order(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb, self.vis_w, self.vis_b];
        for layer in &self.layers {
            out.push(layer.ln1_gain);
            out.push(layer.ln1_bias);
            for head in &layer.heads {
                out.push(head.wq);
                out.push(head.wk);
                out.push(head.wv);
                out.push(head.wo);
            }
            out.push(layer.attn_bias);
            out.push(layer.ln2_gain);
            out.push(layer.ln2_bias);
            out.push(layer.ffn_w1);
            out.push(layer.ffn_b1);
            out.push(layer.ffn_w2);
            out.push(layer.ffn_b2);
        }
        out.push(self.ln_f_gain);
        out.push(self.ln_f_bias);
        out
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::micro_config;
    use super::*;

    #[test]
    fn param_orders_are_aligned() {
        let params = ModelParams::<f32>::init(micro_config(10), 0).unwrap();
        let named = params.named_params();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape).in_order();
        assert_eq!(named.len(), vars.len());
        for ((name, tensor), var) in named.iter().zip(&vars) {
            assert_eq!(tape.value(*var).shape(), tensor.shape(), "order mismatch at {name}");
        }
        let mut params2 = params.clone();
        assert_eq!(params2.params_mut().len(), named.len());
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = ModelParams::<f32>::init(micro_config(10), 7).unwrap();
        let b = ModelParams::<f32>::init(micro_config(10), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.named_params().iter().all(|(_, t)| t.all_finite()));
        let c = ModelParams::<f32>::init(micro_config(10), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = micro_config(10);
        cfg.n_heads = 3; // 4 % 3 != 0
        assert!(matches!(ModelParams::<f32>::init(cfg, 0), Err(ModelError::BadConfig(_))));
        let mut cfg = micro_config(10);
        cfg.vocab_size = 0;
        assert!(ModelParams::<f32>::init(cfg, 0).is_err());
        let mut cfg = micro_config(10);
        cfg.max_visual = 99;
        assert!(ModelParams::<f32>::init(cfg, 0).is_err());
    }
}
