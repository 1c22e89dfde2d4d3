//! JSONL corpus serialization.
//!
//! Line 1 is a header: `{"format":"vcg","version":1,"feature_dim":D}`.
//! Every following line is one scene graph. Feature vectors are inline
//! arrays by default; a header with `"features":"<file>"` instead points at
//! a sidecar tensor file (see [`crate::tensorfile`]) holding records named
//! `<scene_id>/image` and `<scene_id>/person<N>`, which keeps large corpora
//! diffable.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Corpus, EventRecord, Inference, PersonFeature, PersonTag, Relation, SceneEntry, Split, VisualScene};
use crate::tensorfile::{self, TensorRecord};

pub const FORMAT: &str = "vcg";
pub const VERSION: u32 = 1;
const SIDECAR_MAGIC: &[u8; 4] = b"VCGF";

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("invalid corpus: {0}")]
    Invalid(#[from] super::CorpusError),
    #[error("sidecar {path}: missing tensor {name}")]
    MissingFeature { path: String, name: String },
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    feature_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawScene {
    scene_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_feature: Option<Vec<f32>>,
    persons: Vec<RawPerson>,
    split: Split,
    events: Vec<RawEvent>,
}

#[derive(Serialize, Deserialize)]
struct RawPerson {
    tag: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct RawEvent {
    event: String,
    place: String,
    subject: u32,
    inferences: Vec<RawInference>,
}

#[derive(Serialize, Deserialize)]
struct RawInference {
    relation: Relation,
    text: String,
}

fn to_raw(entry: &SceneEntry, inline_features: bool) -> RawScene {
    RawScene {
        scene_id: entry.scene.scene_id.clone(),
        image_feature: inline_features.then(|| entry.scene.image_feature.clone()),
        persons: entry
            .scene
            .persons
            .iter()
            .map(|p| RawPerson {
                tag: p.tag.0,
                feature: inline_features.then(|| p.feature.clone()),
            })
            .collect(),
        split: entry.split,
        events: entry
            .events
            .iter()
            .map(|ev| RawEvent {
                event: ev.event_text.clone(),
                place: ev.place_text.clone(),
                subject: ev.subject.0,
                inferences: ev
                    .inferences
                    .iter()
                    .map(|i| RawInference {
                        relation: i.relation,
                        text: i.text.clone(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn from_raw(raw: RawScene, features: Option<&HashMap<String, Vec<f32>>>, line: usize) -> Result<SceneEntry, LoadError> {
    let lookup = |name: String, inline: Option<Vec<f32>>| -> Result<Vec<f32>, LoadError> {
        if let Some(v) = inline {
            return Ok(v);
        }
        match features.and_then(|m| m.get(&name)) {
            Some(v) => Ok(v.clone()),
            None => Err(LoadError::Malformed {
                line,
                message: format!("no inline feature and no sidecar tensor {name:?}"),
            }),
        }
    };
    let image_feature = lookup(format!("{}/image", raw.scene_id), raw.image_feature)?;
    let mut persons = Vec::with_capacity(raw.persons.len());
    for p in raw.persons {
        let feature = lookup(format!("{}/person{}", raw.scene_id, p.tag), p.feature)?;
        persons.push(PersonFeature {
            tag: PersonTag(p.tag),
            feature,
        });
    }
    Ok(SceneEntry {
        scene: VisualScene {
            scene_id: raw.scene_id,
            image_feature,
            persons,
        },
        split: raw.split,
        events: raw
            .events
            .into_iter()
            .map(|ev| EventRecord {
                subject: PersonTag(ev.subject),
                inferences: ev
                    .inferences
                    .into_iter()
                    .map(|i| Inference {
                        relation: i.relation,
                        text: i.text,
                        subject: PersonTag(ev.subject),
                    })
                    .collect(),
                event_text: ev.event,
                place_text: ev.place,
            })
            .collect(),
    })
}

/// Writes the canonical JSONL form: header first, scenes in corpus order,
/// compact JSON. Loading and re-saving a canonical file is byte-identical.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> std::io::Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        feature_dim: corpus.feature_dim(),
        features: None,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for entry in corpus.scenes() {
        serde_json::to_writer(&mut w, &to_raw(entry, true))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus<P: AsRef<Path>>(corpus: &Corpus, path: P) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus(corpus, &mut w)?;
    w.flush()
}

/// Saves with feature vectors in a binary sidecar next to the corpus file.
pub fn save_corpus_with_sidecar<P: AsRef<Path>>(
    corpus: &Corpus,
    path: P,
    sidecar_name: &str,
) -> std::io::Result<()> {
    let path = path.as_ref();
    let sidecar_path = path.parent().unwrap_or_else(|| Path::new(".")).join(sidecar_name);

    let mut records = Vec::new();
    for entry in corpus.scenes() {
        let dim = corpus.feature_dim() as u32;
        records.push(TensorRecord {
            name: format!("{}/image", entry.scene.scene_id),
            dims: vec![dim],
            data: entry.scene.image_feature.clone(),
        });
        for p in &entry.scene.persons {
            records.push(TensorRecord {
                name: format!("{}/person{}", entry.scene.scene_id, p.tag.0),
                dims: vec![dim],
                data: p.feature.clone(),
            });
        }
    }
    let mut sidecar = BufWriter::new(File::create(&sidecar_path)?);
    sidecar.write_all(SIDECAR_MAGIC)?;
    sidecar.write_all(&VERSION.to_le_bytes())?;
    tensorfile::write_records(&mut sidecar, &records)?;
    sidecar.flush()?;

    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        feature_dim: corpus.feature_dim(),
        features: Some(sidecar_name.to_string()),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for entry in corpus.scenes() {
        serde_json::to_writer(&mut w, &to_raw(entry, false))?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

fn read_sidecar(path: &Path) -> Result<HashMap<String, Vec<f32>>, LoadError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SIDECAR_MAGIC {
        return Err(LoadError::Malformed {
            line: 0,
            message: format!("sidecar {path:?} has bad magic {magic:?}"),
        });
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)?;
    let records = tensorfile::read_records(&mut r)?;
    Ok(records.into_iter().map(|rec| (rec.name, rec.data)).collect())
}

/// Parses a corpus from a reader. `sidecar_dir` resolves a relative sidecar
/// reference in the header, if any.
pub fn read_corpus<R: BufRead>(r: R, sidecar_dir: Option<&Path>) -> Result<Corpus, LoadError> {
    let mut lines = r.lines();
    let header_line = lines.next().ok_or(LoadError::Malformed {
        line: 1,
        message: "empty file, expected header".into(),
    })??;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|source| LoadError::Json { line: 1, source })?;
    if header.format != FORMAT {
        return Err(LoadError::Malformed {
            line: 1,
            message: format!("unknown format {:?}", header.format),
        });
    }
    if header.version != VERSION {
        return Err(LoadError::Malformed {
            line: 1,
            message: format!("unsupported version {}", header.version),
        });
    }
    let features = match &header.features {
        Some(name) => {
            let dir = sidecar_dir.ok_or_else(|| LoadError::Malformed {
                line: 1,
                message: format!("header references sidecar {name:?} but no base directory is available"),
            })?;
            Some(read_sidecar(&dir.join(name))?)
        }
        None => None,
    };

    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawScene =
            serde_json::from_str(&line).map_err(|source| LoadError::Json { line: line_no, source })?;
        entries.push(from_raw(raw, features.as_ref(), line_no)?);
    }
    Ok(Corpus::from_entries(header.feature_dim, entries)?)
}

/// Loads and validates a corpus file. Any invariant violation is reported as
/// an error naming the offending scene and rule.
pub fn load_corpus<P: AsRef<Path>>(path: P) -> Result<Corpus, LoadError> {
    let path = path.as_ref();
    let file = BufReader::new(File::open(path)?);
    read_corpus(file, path.parent())
}
