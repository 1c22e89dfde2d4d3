//! Training objectives and perplexity scoring.
//!
//! Next-token supervision is expressed as (position, target) pairs: position
//! `p` is trained to predict the token at `p + 1`. The inference objective
//! covers the relation-token position through the last inference token, so
//! its targets are the inference tokens followed by `<end>`. The event/place
//! objective adds the event and place fields the same way; each field's
//! closing delimiter is a target too, which is what lets the decoders detect
//! field ends when generating event and place from the image alone.

use serde::{Deserialize, Serialize};

use super::{assemble, forward_hidden, AssembledInput, ModalityMask, ModelConfig, ModelError, ModelParams, ParamVars};
use crate::autodiff::{Scalar, Tape, Var};
use crate::graph::{EventRecord, Relation, VisualScene};
use crate::token::{TokenSeq, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Negative log-likelihood of the inference tokens only.
    Eq1,
    /// Adds event and place generation terms to the inference loss.
    Eq2,
}

/// Loss normalization. Sums match the written objectives; training divides
/// by the supervised token count for learning-rate stability.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossNorm {
    Sum,
    MeanTokens,
}

/// The supervised (position, target) pairs for an assembled input under an
/// objective. Positions are strictly increasing.
pub fn supervision(input: &AssembledInput, objective: Objective) -> Vec<(usize, u32)> {
    let mut out = Vec::new();
    let mut span = |range: Option<(usize, usize)>| {
        if let Some((start, end)) = range {
            for p in start..end {
                let target = input.tokens[p + 1].expect("text spans contain tokens");
                out.push((p, target));
            }
        }
    };
    if objective == Objective::Eq2 {
        span(input.event_span);
        span(input.place_span);
    }
    if let (Some(rel), Some(end)) = (input.rel_pos, input.end_pos) {
        for p in rel..end {
            out.push((p, input.tokens[p + 1].expect("inference span contains tokens")));
        }
    }
    out.sort_unstable_by_key(|&(p, _)| p);
    out
}

/// Builds the summed objective on the tape. Returns the scalar loss node and
/// the supervised token count.
#[allow(clippy::too_many_arguments)]
pub(crate) fn build_objective<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    vocab: &Vocab,
    scene: &VisualScene,
    event: Option<&EventRecord>,
    relation: Relation,
    inference: &TokenSeq,
    mask: ModalityMask,
    objective: Objective,
) -> Result<(Var, usize), ModelError> {
    if inference.is_empty() {
        return Err(ModelError::EmptyInference);
    }
    if objective == Objective::Eq2 && (event.is_none() || !mask.use_event || !mask.use_place) {
        return Err(ModelError::EpRequiresText);
    }
    let input = assemble(tape, pv, cfg, vocab, scene, event, relation, Some(inference), mask)?;
    let pairs = supervision(&input, objective);
    debug_assert!(!pairs.is_empty());

    let hidden = forward_hidden(tape, pv, cfg, &input);
    // Project only the supervised rows through the output head.
    let mut slices = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        let start = pairs[i].0;
        let mut stop = start + 1;
        while i + 1 < pairs.len() && pairs[i + 1].0 == stop {
            stop += 1;
            i += 1;
        }
        slices.push(tape.slice_rows(hidden, start, stop));
        i += 1;
    }
    let rows = tape.concat_rows(&slices);
    let logits = tape.matmul_nt(rows, pv.tok_emb);
    let targets: Vec<Option<u32>> = pairs.iter().map(|&(_, t)| Some(t)).collect();
    Ok(tape.cross_entropy_sum(logits, &targets))
}

fn objective_value<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    scene: &VisualScene,
    event: Option<&EventRecord>,
    relation: Relation,
    inference: &TokenSeq,
    mask: ModalityMask,
    objective: Objective,
    norm: LossNorm,
) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let (sum, count) =
        build_objective(&mut tape, &pv, &params.config, vocab, scene, event, relation, inference, mask, objective)?;
    let total = tape.value(sum).item().to_f64().unwrap();
    Ok(match norm {
        LossNorm::Sum => total,
        LossNorm::MeanTokens => total / count as f64,
    })
}

/// Inference-only negative log-likelihood.
pub fn loss_inference<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    scene: &VisualScene,
    event: Option<&EventRecord>,
    relation: Relation,
    inference: &TokenSeq,
    mask: ModalityMask,
    norm: LossNorm,
) -> Result<f64, ModelError> {
    objective_value(params, vocab, scene, event, relation, inference, mask, Objective::Eq1, norm)
}

/// Event + place + inference negative log-likelihood, factored left to right
/// over one assembled sequence.
pub fn loss_ep<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    scene: &VisualScene,
    event: Option<&EventRecord>,
    relation: Relation,
    inference: &TokenSeq,
    mask: ModalityMask,
    norm: LossNorm,
) -> Result<f64, ModelError> {
    objective_value(params, vocab, scene, event, relation, inference, mask, Objective::Eq2, norm)
}

/// `exp` of the mean per-token NLL of a candidate inference. Lower is better.
pub fn perplexity<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    scene: &VisualScene,
    event: Option<&EventRecord>,
    relation: Relation,
    candidate: &TokenSeq,
    mask: ModalityMask,
) -> Result<f64, ModelError> {
    if candidate.is_empty() {
        return Err(ModelError::EmptyCandidate);
    }
    let nll = loss_inference(params, vocab, scene, event, relation, candidate, mask, LossNorm::MeanTokens)?;
    Ok(nll.exp())
}
