//! Input assembly: layout, embeddings, person grounding, attention mask.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{forward::project_visual, ModelConfig, ModelError, ParamVars};
use crate::autodiff::{Mask, Scalar, Tape, Tensor, Var};
use crate::graph::{EventRecord, Relation, VisualScene};
use crate::token::{self, TokenSeq, Vocab};

/// Which input fields the model sees. `use_pg` controls person grounding
/// (summing projected person features into person-token embeddings) and only
/// matters while `use_image` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalityMask {
    pub use_image: bool,
    pub use_event: bool,
    pub use_place: bool,
    pub use_pg: bool,
}

impl Default for ModalityMask {
    fn default() -> Self {
        ModalityMask {
            use_image: true,
            use_event: true,
            use_place: true,
            use_pg: true,
        }
    }
}

impl ModalityMask {
    pub fn text_only() -> Self {
        ModalityMask {
            use_image: false,
            use_pg: false,
            ..Default::default()
        }
    }

    pub fn image_only() -> Self {
        ModalityMask {
            use_event: false,
            use_place: false,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    Visual,
    Event,
    Place,
    Relation,
    Inference,
}

/// Raw layout description, used directly by the decoders to build partial
/// sequences mid-generation. [`assemble`] is the record-level front door.
#[derive(Clone, Debug)]
pub struct LayoutParts<'a> {
    /// Present iff the visual prefix is included.
    pub scene: Option<&'a VisualScene>,
    pub event_ids: Option<Vec<u32>>,
    pub close_event: bool,
    pub place_ids: Option<Vec<u32>>,
    pub close_place: bool,
    pub relation: Option<Relation>,
    pub inference_ids: Option<Vec<u32>>,
    pub append_end: bool,
    pub use_pg: bool,
    /// When set, a person token without a matching scene feature is an
    /// error. Generation paths relax this because sampled text may mention
    /// people the scene does not have.
    pub strict_persons: bool,
}

/// One assembled model input: the embedded sequence plus everything the
/// forward pass and the losses need to know about its structure.
#[derive(Clone, Debug)]
pub struct AssembledInput {
    pub x: Var,
    pub len: usize,
    pub attn_mask: Arc<Mask>,
    pub fields: Vec<Field>,
    /// Token id per position; `None` at feature rows.
    pub tokens: Vec<Option<u32>>,
    /// Visual prefix length including its delimiters (0 when masked out).
    pub n_visual: usize,
    /// Positions of `<s_event>`/`<e_event>`, when the field is closed.
    pub event_span: Option<(usize, usize)>,
    pub place_span: Option<(usize, usize)>,
    pub rel_pos: Option<usize>,
    pub end_pos: Option<usize>,
}

enum PosKind {
    Tok(u32),
    Feat,
}

/// Assembles the canonical layout from corpus records.
pub fn assemble<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    vocab: &Vocab,
    scene: &VisualScene,
    event: Option<&EventRecord>,
    relation: Relation,
    inference: Option<&TokenSeq>,
    mask: ModalityMask,
) -> Result<AssembledInput, ModelError> {
    let parts = LayoutParts {
        scene: mask.use_image.then_some(scene),
        event_ids: match event {
            Some(ev) if mask.use_event => Some(vocab.encode(&ev.event_text).ids),
            _ => None,
        },
        close_event: true,
        place_ids: match event {
            Some(ev) if mask.use_place => Some(vocab.encode(&ev.place_text).ids),
            _ => None,
        },
        close_place: true,
        relation: Some(relation),
        inference_ids: inference.map(|seq| seq.ids.clone()),
        append_end: inference.is_some(),
        use_pg: mask.use_pg,
        strict_persons: true,
    };
    assemble_parts(tape, pv, cfg, parts)
}

/// Assembles an arbitrary (possibly partial) layout.
pub fn assemble_parts<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    parts: LayoutParts<'_>,
) -> Result<AssembledInput, ModelError> {
    let mut kinds: Vec<(PosKind, Field)> = Vec::new();
    let mut event_span = None;
    let mut place_span = None;
    let mut rel_pos = None;
    let mut end_pos = None;

    let n_features = match parts.scene {
        Some(scene) => {
            let count = scene.visual_count();
            if count > cfg.max_visual {
                return Err(ModelError::VisualOverflow {
                    scene_id: scene.scene_id.clone(),
                    count,
                    max: cfg.max_visual,
                });
            }
            if scene.image_feature.len() != cfg.feature_dim {
                return Err(ModelError::FeatureDim {
                    got: scene.image_feature.len(),
                    want: cfg.feature_dim,
                });
            }
            for p in &scene.persons {
                if p.feature.len() != cfg.feature_dim {
                    return Err(ModelError::FeatureDim {
                        got: p.feature.len(),
                        want: cfg.feature_dim,
                    });
                }
            }
            kinds.push((PosKind::Tok(token::S_IMG), Field::Visual));
            for _ in 0..count {
                kinds.push((PosKind::Feat, Field::Visual));
            }
            kinds.push((PosKind::Tok(token::E_IMG), Field::Visual));
            count
        }
        None => 0,
    };
    let n_visual = if parts.scene.is_some() { n_features + 2 } else { 0 };

    if let Some(ids) = &parts.event_ids {
        let start = kinds.len();
        kinds.push((PosKind::Tok(token::S_EVENT), Field::Event));
        for &id in ids {
            kinds.push((PosKind::Tok(id), Field::Event));
        }
        if parts.close_event {
            kinds.push((PosKind::Tok(token::E_EVENT), Field::Event));
            event_span = Some((start, kinds.len() - 1));
        }
    }
    if let Some(ids) = &parts.place_ids {
        let start = kinds.len();
        kinds.push((PosKind::Tok(token::S_PLACE), Field::Place));
        for &id in ids {
            kinds.push((PosKind::Tok(id), Field::Place));
        }
        if parts.close_place {
            kinds.push((PosKind::Tok(token::E_PLACE), Field::Place));
            place_span = Some((start, kinds.len() - 1));
        }
    }
    if let Some(relation) = parts.relation {
        rel_pos = Some(kinds.len());
        kinds.push((PosKind::Tok(Vocab::relation_token(relation)), Field::Relation));
    }
    if let Some(ids) = &parts.inference_ids {
        for &id in ids {
            kinds.push((PosKind::Tok(id), Field::Inference));
        }
        if parts.append_end {
            end_pos = Some(kinds.len());
            kinds.push((PosKind::Tok(token::END), Field::Inference));
        }
    }

    let len = kinds.len();
    if len > cfg.max_seq_len {
        return Err(ModelError::TooLong {
            len,
            max: cfg.max_seq_len,
        });
    }

    // Person grounding: text position -> visual feature row (row 0 is the
    // whole image, row `tag` is that person).
    let mut grounding: Vec<(usize, usize)> = Vec::new();
    if let Some(scene) = parts.scene {
        for (pos, (kind, _)) in kinds.iter().enumerate() {
            let PosKind::Tok(id) = kind else { continue };
            let Some(tag) = Vocab::person_of(*id) else { continue };
            if scene.persons.iter().any(|p| p.tag.0 == tag) {
                if parts.use_pg {
                    grounding.push((pos, tag as usize));
                }
            } else if parts.strict_persons {
                return Err(ModelError::UnknownPerson {
                    scene_id: scene.scene_id.clone(),
                    tag,
                });
            }
        }
    }

    // Visual projection, shared by the prefix rows and the grounding sum.
    let proj = parts.scene.map(|scene| {
        let dim = cfg.feature_dim;
        let mut data: Vec<T> = Vec::with_capacity(n_features * dim);
        data.extend(scene.image_feature.iter().map(|&x| T::from(x).unwrap()));
        for p in &scene.persons {
            data.extend(p.feature.iter().map(|&x| T::from(x).unwrap()));
        }
        let features = tape.constant(Tensor::from_vec(&[n_features, dim], data));
        project_visual(tape, pv, features)
    });

    // Embed: contiguous token runs via table lookups, the feature block via
    // the projection, stitched with a row concat.
    let mut chunks: Vec<Var> = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    let mut feat_emitted = false;
    for (kind, _) in &kinds {
        match kind {
            PosKind::Tok(id) => run.push(*id as usize),
            PosKind::Feat => {
                if !run.is_empty() {
                    chunks.push(tape.embedding(pv.tok_emb, &run));
                    run.clear();
                }
                if !feat_emitted {
                    // the feature block is contiguous; emit it whole
                    chunks.push(proj.expect("feature rows imply a scene"));
                    feat_emitted = true;
                }
            }
        }
    }
    if !run.is_empty() {
        chunks.push(tape.embedding(pv.tok_emb, &run));
    }
    let mut x = tape.concat_rows(&chunks);

    if !grounding.is_empty() {
        let mut select = Tensor::<T>::zeros(&[len, n_features]);
        for &(pos, row) in &grounding {
            select.set2(pos, row, T::one());
        }
        let select = tape.constant(select);
        let pg = tape.matmul(select, proj.expect("grounding implies a scene"));
        x = tape.add(x, pg);
    }

    let positions: Vec<usize> = (0..len).collect();
    let pos_emb = tape.embedding(pv.pos_emb, &positions);
    x = tape.add(x, pos_emb);

    // Prefix rows see each other; text rows see the prefix and their causal
    // past; prefix rows never see text.
    let mut allow = vec![false; len * len];
    for i in 0..len {
        for j in 0..len {
            allow[i * len + j] = j < n_visual || (i >= n_visual && j <= i);
        }
    }

    Ok(AssembledInput {
        x,
        len,
        attn_mask: Arc::new(Mask::new(len, len, allow)),
        fields: kinds.iter().map(|(_, f)| *f).collect(),
        tokens: kinds
            .iter()
            .map(|(k, _)| match k {
                PosKind::Tok(id) => Some(*id),
                PosKind::Feat => None,
            })
            .collect(),
        n_visual,
        event_span,
        place_span,
        rel_pos,
        end_pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::micro_config;
    use crate::model::ModelParams;
    use crate::token::TokenSeq;
    use crate::Corpus;

    pub(crate) fn scene_with_persons(n: usize, dim: usize) -> VisualScene {
        VisualScene {
            scene_id: "s0".into(),
            image_feature: vec![0.3; dim],
            persons: (1..=n as u32)
                .map(|t| crate::graph::PersonFeature {
                    tag: crate::graph::PersonTag(t),
                    feature: vec![0.1 * t as f32; dim],
                })
                .collect(),
        }
    }

    fn fixture() -> (Corpus, Vocab) {
        let mut entry = crate::graph::tests::tiny_scene("s0", 4, 2);
        entry.events[0].event_text = "[Person1] waves one two three".into(); // 5 tokens
        entry.events[0].place_text = "at the bar".into(); // 3 tokens
        let corpus = Corpus::from_entries(4, vec![entry]).unwrap();
        let vocab = Vocab::build(&corpus, 1).unwrap();
        (corpus, vocab)
    }

    #[test]
    fn layout_length_matches_hand_count() {
        let (corpus, vocab) = fixture();
        let cfg = ModelConfig {
            max_seq_len: 32,
            ..micro_config(vocab.size() as usize)
        };
        let params = ModelParams::<f32>::init(cfg.clone(), 0).unwrap();
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let entry = &corpus.scenes()[0];
        let inference = TokenSeq::new(vocab.encode("walk into the bar").ids); // 4 tokens
        let input = assemble(
            &mut tape,
            &pv,
            &cfg,
            &vocab,
            &entry.scene,
            Some(&entry.events[0]),
            Relation::Before,
            Some(&inference),
            ModalityMask::default(),
        )
        .unwrap();
        // 2 img delims + 3 features + (2+5) event + (2+3) place + 1 rel + 4 inf + 1 end
        assert_eq!(input.len, 23);
        assert_eq!(input.n_visual, 5);
        assert_eq!(input.rel_pos, Some(17));
        assert_eq!(input.end_pos, Some(22));
        assert_eq!(tape.value(input.x).shape(), &[23, cfg.d_model]);
        assert_eq!(input.fields.iter().filter(|f| **f == Field::Visual).count(), 5);
    }

    #[test]
    fn masked_fields_are_omitted_entirely() {
        let (corpus, vocab) = fixture();
        let cfg = ModelConfig {
            max_seq_len: 32,
            ..micro_config(vocab.size() as usize)
        };
        let params = ModelParams::<f32>::init(cfg.clone(), 0).unwrap();
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let entry = &corpus.scenes()[0];
        let input = assemble(
            &mut tape,
            &pv,
            &cfg,
            &vocab,
            &entry.scene,
            Some(&entry.events[0]),
            Relation::Intent,
            None,
            ModalityMask::text_only(),
        )
        .unwrap();
        assert_eq!(input.n_visual, 0);
        assert!(input.fields.iter().all(|f| *f != Field::Visual));
        assert!(input.tokens.iter().all(|t| t.is_some()));
        // no inference ids and no END: the sequence ends at the relation token
        assert_eq!(input.rel_pos, Some(input.len - 1));
        assert_eq!(input.end_pos, None);
    }

    #[test]
    fn zero_projection_makes_grounding_additive_identity() {
        let (corpus, vocab) = fixture();
        let cfg = ModelConfig {
            max_seq_len: 32,
            ..micro_config(vocab.size() as usize)
        };
        let mut params = ModelParams::<f32>::init(cfg.clone(), 0).unwrap();
        params.vis_w = Tensor::zeros(&[cfg.feature_dim, cfg.d_model]);
        params.vis_b = Tensor::zeros(&[cfg.d_model]);
        let entry = &corpus.scenes()[0];

        let embed = |use_pg: bool| {
            let mut tape = Tape::new();
            let pv = params.bind(&mut tape);
            let input = assemble(
                &mut tape,
                &pv,
                &cfg,
                &vocab,
                &entry.scene,
                Some(&entry.events[0]),
                Relation::Before,
                None,
                ModalityMask {
                    use_pg,
                    ..ModalityMask::default()
                },
            )
            .unwrap();
            tape.value(input.x).clone()
        };
        assert_eq!(embed(true), embed(false));
    }

    #[test]
    fn overflow_and_unknown_person_are_errors() {
        let (corpus, vocab) = fixture();
        let cfg = micro_config(vocab.size() as usize);
        let params = ModelParams::<f32>::init(cfg.clone(), 0).unwrap();
        let entry = &corpus.scenes()[0];

        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let tight = ModelConfig { max_seq_len: 8, ..cfg.clone() };
        let err = assemble(
            &mut tape,
            &pv,
            &tight,
            &vocab,
            &entry.scene,
            Some(&entry.events[0]),
            Relation::Before,
            None,
            ModalityMask::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::TooLong { .. }), "{err}");

        let mut event = entry.events[0].clone();
        event.event_text = "[Person7] waves".into();
        let err = assemble(
            &mut tape,
            &pv,
            &cfg,
            &vocab,
            &entry.scene,
            Some(&event),
            Relation::Before,
            None,
            ModalityMask::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::UnknownPerson { tag: 7, .. }), "{err}");

        let big_scene = scene_with_persons(5, 4); // 6 visual features > max_visual 4
        let err = assemble(
            &mut tape,
            &pv,
            &cfg,
            &vocab,
            &big_scene,
            None,
            Relation::Before,
            None,
            ModalityMask::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::VisualOverflow { .. }), "{err}");
    }

    #[test]
    fn attention_mask_shape_is_prefix_bidirectional_text_causal() {
        let (corpus, vocab) = fixture();
        let cfg = ModelConfig {
            max_seq_len: 32,
            ..micro_config(vocab.size() as usize)
        };
        let params = ModelParams::<f32>::init(cfg.clone(), 0).unwrap();
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let entry = &corpus.scenes()[0];
        let input = assemble(
            &mut tape,
            &pv,
            &cfg,
            &vocab,
            &entry.scene,
            Some(&entry.events[0]),
            Relation::After,
            None,
            ModalityMask::default(),
        )
        .unwrap();
        let m = &input.attn_mask;
        let nv = input.n_visual;
        // visual sees all of visual, including later prefix rows
        assert!(m.at(0, nv - 1));
        // visual never sees text
        assert!(!m.at(1, nv));
        // text sees visual and its own past, not its future
        assert!(m.at(nv + 1, 0));
        assert!(m.at(nv + 1, nv));
        assert!(!m.at(nv, nv + 1));
    }
}
