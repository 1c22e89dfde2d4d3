//! Minibatch Adam training over (scene, event, relation, inference)
//! instances.
//!
//! Every inference in the train split is one instance; with the event/place
//! objective the event and place terms ride along on each instance. A batch
//! is a set of independent subgraphs on one tape, so sequences need no
//! padding; the batch loss is the summed objective divided by the supervised
//! token count. Single-threaded over steps, bitwise deterministic in the
//! seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{build_objective, ModalityMask, ModelError, ModelParams, Objective};
use crate::autodiff::{AdamState, Scalar, Tape};
use crate::graph::{Corpus, Split};
use crate::seeds;
use crate::token::{TokenSeq, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub objective: Objective,
    pub mask: ModalityMask,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            objective: Objective::Eq1,
            mask: ModalityMask::default(),
            lr: 1e-3,
            batch_size: 16,
            steps: 600,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub instances: usize,
    /// Mean per-token loss at every step.
    pub losses: Vec<f64>,
    pub final_train_loss: f64,
    /// Mean per-token loss over the dev split, when it is non-empty.
    pub final_dev_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Instance {
    scene: usize,
    event: usize,
    inference: usize,
}

fn collect_instances(corpus: &Corpus, split: Split) -> Vec<Instance> {
    let mut out = Vec::new();
    for (scene, event_idx, event) in corpus.events_in(split) {
        for (inference, _) in event.inferences.iter().enumerate() {
            out.push(Instance {
                scene,
                event: event_idx,
                inference,
            });
        }
    }
    out
}

/// Trains in place and reports the loss curve. The dev loss at the end uses
/// the same objective and mask as training.
pub fn train<T: Scalar>(
    params: &mut ModelParams<T>,
    vocab: &Vocab,
    corpus: &Corpus,
    opts: &TrainOptions,
) -> Result<TrainReport, ModelError> {
    let instances = collect_instances(corpus, Split::Train);
    if instances.is_empty() {
        return Err(ModelError::BadConfig("train split has no inference instances".into()));
    }
    let batch_size = opts.batch_size.max(1);

    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut order_rng = seeds::stream(opts.seed, seeds::TAG_ORDER);
    let mut cursor = order.len(); // trigger a shuffle on first use
    let mut adam = {
        let named = params.named_params();
        let refs: Vec<_> = named.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs, opts.lr)
    };

    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let mut batch_parts = Vec::with_capacity(batch_size);
        let mut token_count = 0usize;
        for _ in 0..batch_size {
            if cursor == order.len() {
                for i in (1..order.len()).rev() {
                    let j = order_rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            let inst = instances[order[cursor]];
            cursor += 1;

            let entry = &corpus.scenes()[inst.scene];
            let event = &entry.events[inst.event];
            let inf = &event.inferences[inst.inference];
            let seq = TokenSeq::new(vocab.encode(&inf.text).ids);
            let (sum, count) = build_objective(
                &mut tape,
                &pv,
                &params.config,
                vocab,
                &entry.scene,
                Some(event),
                inf.relation,
                &seq,
                opts.mask,
                opts.objective,
            )?;
            batch_parts.push(sum);
            token_count += count;
        }
        let mut total = batch_parts[0];
        for &part in &batch_parts[1..] {
            total = tape.add(total, part);
        }
        let loss = tape.scale(total, 1.0 / token_count as f64);
        let loss_value = tape.value(loss).item().to_f64().unwrap();
        if !loss_value.is_finite() {
            return Err(ModelError::Diverged { step });
        }
        losses.push(loss_value);

        tape.backward(loss);
        let grads: Vec<_> = pv.in_order().iter().map(|&v| tape.grad_or_zeros(v)).collect();
        let grad_refs: Vec<_> = grads.iter().collect();
        let mut param_refs = params.params_mut();
        adam.step(&mut param_refs, &grad_refs);
    }

    let final_dev_loss = mean_split_loss(params, vocab, corpus, Split::Dev, opts)?;
    Ok(TrainReport {
        steps: opts.steps,
        instances: instances.len(),
        final_train_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
        final_dev_loss,
    })
}

/// Mean per-token loss of a whole split under the training objective.
pub(crate) fn mean_split_loss<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    corpus: &Corpus,
    split: Split,
    opts: &TrainOptions,
) -> Result<Option<f64>, ModelError> {
    let instances = collect_instances(corpus, split);
    if instances.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for inst in instances {
        let entry = &corpus.scenes()[inst.scene];
        let event = &entry.events[inst.event];
        let inf = &event.inferences[inst.inference];
        let seq = TokenSeq::new(vocab.encode(&inf.text).ids);
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let (sum, count) = build_objective(
            &mut tape,
            &pv,
            &params.config,
            vocab,
            &entry.scene,
            Some(event),
            inf.relation,
            &seq,
            opts.mask,
            opts.objective,
        )?;
        total += tape.value(sum).item().to_f64().unwrap();
        tokens += count;
    }
    Ok(Some(total / tokens as f64))
}
