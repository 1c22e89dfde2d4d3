//! Pre-norm transformer stack with per-head attention blocks.

use super::{AssembledInput, ModelConfig, ParamVars};
use crate::autodiff::{Scalar, Tape, Var};

/// GELU of an affine map from feature space into the model width. Applied to
/// every visual feature row.
pub fn project_visual<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, features: Var) -> Var {
    let lin = tape.matmul(features, pv.vis_w);
    let lin = tape.add_bias(lin, pv.vis_b);
    tape.gelu(lin)
}

/// Hidden states after the final layer norm, `[L, d_model]`.
pub fn forward_hidden<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    input: &AssembledInput,
) -> Var {
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut h = input.x;
    for layer in &pv.layers {
        let normed = tape.layer_norm(h, layer.ln1_gain, layer.ln1_bias);
        let mut attn: Option<Var> = None;
        for head in &layer.heads {
            let q = tape.matmul(normed, head.wq);
            let k = tape.matmul(normed, head.wk);
            let v = tape.matmul(normed, head.wv);
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, scale);
            let scores = tape.masked_fill(scores, input.attn_mask.clone());
            let weights = tape.softmax_lastdim(scores);
            let ctx = tape.matmul(weights, v);
            let out = tape.matmul(ctx, head.wo);
            attn = Some(match attn {
                Some(acc) => tape.add(acc, out),
                None => out,
            });
        }
        let attn = tape.add_bias(attn.expect("at least one head"), layer.attn_bias);
        h = tape.add(h, attn);

        let normed = tape.layer_norm(h, layer.ln2_gain, layer.ln2_bias);
        let ff = tape.matmul(normed, layer.ffn_w1);
        let ff = tape.add_bias(ff, layer.ffn_b1);
        let ff = tape.gelu(ff);
        let ff = tape.matmul(ff, layer.ffn_w2);
        let ff = tape.add_bias(ff, layer.ffn_b2);
        h = tape.add(h, ff);
    }
    tape.layer_norm(h, pv.ln_f_gain, pv.ln_f_bias)
}

/// Logits at every position, `[L, vocab]`. The output projection is the
/// transposed token embedding.
pub fn forward<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, cfg: &ModelConfig, input: &AssembledInput) -> Var {
    let hidden = forward_hidden(tape, pv, cfg, input);
    tape.matmul_nt(hidden, pv.tok_emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{mm, mm_nt, Tensor, LAYER_NORM_EPS};
    use crate::graph::Relation;
    use crate::model::test_support::micro_config;
    use crate::model::{assemble, ModalityMask, ModelParams};
    use crate::token::TokenSeq;
    use crate::{Corpus, Vocab};

    fn fixture() -> (Corpus, Vocab) {
        let mut entry = crate::graph::tests::tiny_scene("s0", 4, 2);
        entry.events[0].event_text = "[Person1] waves at [Person2]".into();
        let corpus = Corpus::from_entries(4, vec![entry]).unwrap();
        let vocab = Vocab::build(&corpus, 1).unwrap();
        (corpus, vocab)
    }

    fn assembled_logits(params: &ModelParams<f64>, vocab: &Vocab, corpus: &Corpus, inf: &str) -> Tensor<f64> {
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let entry = &corpus.scenes()[0];
        let seq = TokenSeq::new(vocab.encode(inf).ids);
        let input = assemble(
            &mut tape,
            &pv,
            &params.config,
            vocab,
            &entry.scene,
            Some(&entry.events[0]),
            Relation::Before,
            Some(&seq),
            ModalityMask::default(),
        )
        .unwrap();
        let logits = forward(&mut tape, &pv, &params.config, &input);
        tape.value(logits).clone()
    }

    #[test]
    fn project_visual_of_zero_is_zero() {
        let cfg = micro_config(30);
        let mut params = ModelParams::<f64>::init(cfg.clone(), 1).unwrap();
        params.vis_b = Tensor::zeros(&[cfg.d_model]);
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let zero = tape.constant(Tensor::zeros(&[1, cfg.feature_dim]));
        let out = project_visual(&mut tape, &pv, zero);
        assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn project_visual_is_near_identity_for_large_positive_inputs() {
        // With W = I and b = 0, GELU(x) -> x as x grows.
        let cfg = micro_config(30);
        let mut params = ModelParams::<f64>::init(cfg.clone(), 1).unwrap();
        let d = cfg.d_model;
        let mut eye = Tensor::zeros(&[cfg.feature_dim, d]);
        for i in 0..cfg.feature_dim.min(d) {
            eye.set2(i, i, 1.0);
        }
        params.vis_w = eye;
        params.vis_b = Tensor::zeros(&[d]);
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let big = tape.constant(Tensor::filled(&[1, cfg.feature_dim], 40.0));
        let out = project_visual(&mut tape, &pv, big);
        for &x in tape.value(out).data() {
            assert!((x - 40.0).abs() < 1e-9, "{x}");
        }
    }

    #[test]
    fn project_visual_matches_hand_dot_products() {
        let cfg = micro_config(30);
        let params = ModelParams::<f64>::init(cfg.clone(), 5).unwrap();
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let feature = vec![0.3, -1.2, 0.7, 2.0];
        let f = tape.constant(Tensor::from_vec(&[1, 4], feature.clone()));
        let out = project_visual(&mut tape, &pv, f);
        // independent dense computation
        for j in 0..cfg.d_model {
            let mut lin = params.vis_b.data()[j];
            for (i, &x) in feature.iter().enumerate() {
                lin += x * params.vis_w.at2(i, j);
            }
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let expected = 0.5 * lin * (1.0 + (c * (lin + 0.044715 * lin.powi(3))).tanh());
            let got = tape.value(out).at2(0, j);
            assert!((got - expected).abs() < 1e-12, "col {j}: {got} vs {expected}");
        }
    }

    #[test]
    fn permuting_head_blocks_leaves_logits_unchanged() {
        let (corpus, vocab) = fixture();
        let cfg = crate::model::ModelConfig {
            n_heads: 2,
            d_model: 8,
            ..micro_config(vocab.size() as usize)
        };
        let params = ModelParams::<f64>::init(cfg, 3).unwrap();
        let mut swapped = params.clone();
        swapped.layers[0].heads.swap(0, 1);
        let a = assembled_logits(&params, &vocab, &corpus, "walk into the bar");
        let b = assembled_logits(&swapped, &vocab, &corpus, "walk into the bar");
        assert_eq!(a, b);
    }

    #[test]
    fn changing_a_future_token_leaves_earlier_logits_unchanged() {
        let (corpus, vocab) = fixture();
        let cfg = micro_config(vocab.size() as usize);
        let params = ModelParams::<f64>::init(cfg, 4).unwrap();
        let a = assembled_logits(&params, &vocab, &corpus, "walk into the bar");
        let b = assembled_logits(&params, &vocab, &corpus, "walk into the pub");
        // layouts agree except at the final inference token (pre-END);
        // every earlier row must match bitwise
        let changed_row = a.rows() - 2;
        for i in 0..changed_row {
            assert_eq!(a.row(i), b.row(i), "row {i} differs");
        }
        assert_ne!(a.row(changed_row), b.row(changed_row));
    }

    /// Straight-line dense recomputation of the whole forward pass for a
    /// 1-layer 1-head model, sharing nothing with the tape implementation.
    #[test]
    fn micro_forward_matches_straight_line_oracle() {
        let (corpus, vocab) = fixture();
        let cfg = micro_config(vocab.size() as usize);
        let params = ModelParams::<f64>::init(cfg.clone(), 9).unwrap();

        // Tape path.
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let entry = &corpus.scenes()[0];
        let seq = TokenSeq::new(vocab.encode("walk in").ids);
        let input = assemble(
            &mut tape,
            &pv,
            &cfg,
            &vocab,
            &entry.scene,
            Some(&entry.events[0]),
            Relation::Before,
            Some(&seq),
            ModalityMask::default(),
        )
        .unwrap();
        let logits = forward(&mut tape, &pv, &cfg, &input);
        let got = tape.value(logits).clone();
        let x0 = tape.value(input.x).clone();

        // Oracle path: plain loops over Vec<f64>.
        let d = cfg.d_model;
        let n = input.len;
        let ln = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            let mut out = Tensor::zeros(x.shape());
            for i in 0..x.rows() {
                let row = x.row(i);
                let mean: f64 = row.iter().sum::<f64>() / d as f64;
                let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                for j in 0..d {
                    out.set2(i, j, (row[j] - mean) / (var + LAYER_NORM_EPS).sqrt() * g.data()[j] + b.data()[j]);
                }
            }
            out
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());

        let layer = &params.layers[0];
        let head = &layer.heads[0];
        let normed = ln(&x0, &layer.ln1_gain, &layer.ln1_bias);
        let q = mm(&normed, &head.wq);
        let k = mm(&normed, &head.wk);
        let v = mm(&normed, &head.wv);
        let mut scores = mm_nt(&q, &k);
        for e in scores.data_mut().iter_mut() {
            *e /= (cfg.head_dim() as f64).sqrt();
        }
        let mut weights = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let mut exps = vec![0.0; n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if input.attn_mask.at(i, j) {
                    max = max.max(scores.at2(i, j));
                }
            }
            let mut sum = 0.0;
            for j in 0..n {
                if input.attn_mask.at(i, j) {
                    exps[j] = (scores.at2(i, j) - max).exp();
                    sum += exps[j];
                }
            }
            for j in 0..n {
                weights.set2(i, j, exps[j] / sum);
            }
        }
        let ctx = mm(&weights, &v);
        let proj = mm(&ctx, &head.wo);
        let mut h = x0.clone();
        for i in 0..n {
            for j in 0..d {
                h.set2(i, j, h.at2(i, j) + proj.at2(i, j) + layer.attn_bias.data()[j]);
            }
        }
        let normed2 = ln(&h, &layer.ln2_gain, &layer.ln2_bias);
        let mut ff1 = mm(&normed2, &layer.ffn_w1);
        for i in 0..n {
            for j in 0..cfg.d_ff {
                ff1.set2(i, j, gelu(ff1.at2(i, j) + layer.ffn_b1.data()[j]));
            }
        }
        let ff2 = mm(&ff1, &layer.ffn_w2);
        for i in 0..n {
            for j in 0..d {
                h.set2(i, j, h.at2(i, j) + ff2.at2(i, j) + layer.ffn_b2.data()[j]);
            }
        }
        let hf = ln(&h, &params.ln_f_gain, &params.ln_f_bias);
        let expected = mm_nt(&hf, &params.tok_emb);

        assert_eq!(got.shape(), expected.shape());
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
