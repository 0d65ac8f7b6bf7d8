//! Record-per-line preference dataset with precomputed masks.
//!
//! The first line is a header naming the schema version, tokenizer, mask
//! mode, and tolerance. Every record stores both mask vectors for the named
//! tokenizer; loading recomputes the masks from spans and the error type from
//! the responses, so any tampering with stored bits or labels is detected.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{classify_step_diff_with, ActionRegistry, CoordMetric, DiffKind};
use crate::dpo::{TokenizedPair, Tokenizer};

use super::{build_mask, MaskError, MaskMode, MaskVector, PreferencePair};

pub const PREFS_SCHEMA: &str = "prefs/v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefHeader {
    pub schema_version: String,
    pub tokenizer_id: String,
    pub mask_mode: MaskMode,
    pub tolerance_px: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefRecord {
    #[serde(flatten)]
    pub pair: PreferencePair,
    pub chosen_mask: MaskVector,
    pub rejected_mask: MaskVector,
}

#[derive(Debug)]
pub struct PrefDataset {
    pub header: PrefHeader,
    pub records: Vec<PrefRecord>,
}

impl PrefDataset {
    /// Tokenize every record for the training core.
    pub fn to_tokenized(&self, tokenizer: &dyn Tokenizer) -> Result<Vec<TokenizedPair>, PrefError> {
        self.records
            .iter()
            .map(|record| {
                let context = tokenizer.tokenize_context(&record.pair.context);
                let chosen =
                    tokenizer.tokenize_response(&record.pair.chosen).map_err(MaskError::from)?;
                let rejected =
                    tokenizer.tokenize_response(&record.pair.rejected).map_err(MaskError::from)?;
                Ok(TokenizedPair {
                    context,
                    chosen,
                    rejected,
                    chosen_mask: record.chosen_mask.clone(),
                    rejected_mask: record.rejected_mask.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum PrefError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset tokenizer {found:?} does not match requested {expected:?}")]
    TokenizerMismatch { expected: String, found: String },
    #[error("corrupt preference record at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("pair at step {step} of {query} has error type Match")]
    MatchPair { query: String, step: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PrefError + '_ {
    move |source| PrefError::Io { path: path.to_path_buf(), source }
}

/// Write pairs with precomputed masks for the named tokenizer. The file
/// starts with a header line even when the pair list is empty.
pub fn persist_pref(
    path: &Path,
    pairs: &[PreferencePair],
    tokenizer: &dyn Tokenizer,
    mode: MaskMode,
    tolerance_px: u32,
) -> Result<(), PrefError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let header = PrefHeader {
        schema_version: PREFS_SCHEMA.to_string(),
        tokenizer_id: tokenizer.id().to_string(),
        mask_mode: mode,
        tolerance_px,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for pair in pairs {
        if pair.error_type == DiffKind::Match {
            return Err(PrefError::MatchPair {
                query: pair.source.query_id.clone(),
                step: pair.source.step_index,
            });
        }
        let record = PrefRecord {
            chosen_mask: build_mask(&pair.chosen, pair.error_type, mode, tokenizer)?,
            rejected_mask: build_mask(&pair.rejected, pair.error_type, mode, tokenizer)?,
            pair: pair.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Load a dataset, verifying the tokenizer, recomputing every mask from the
/// stored spans (any single-bit tamper fails the self-check), and
/// re-deriving every error type from the stored responses.
pub fn load_pref(
    path: &Path,
    tokenizer: &dyn Tokenizer,
    registry: &ActionRegistry,
    metric: CoordMetric,
) -> Result<PrefDataset, PrefError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header: PrefHeader = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(io_err(path))?;
            serde_json::from_str(&line)
                .map_err(|e| PrefError::Corrupt { line: 1, reason: format!("bad header: {e}") })?
        }
        None => return Err(PrefError::Corrupt { line: 1, reason: "missing header".into() }),
    };
    if header.schema_version != PREFS_SCHEMA {
        return Err(PrefError::Corrupt {
            line: 1,
            reason: format!("schema {} != {PREFS_SCHEMA}", header.schema_version),
        });
    }
    if header.tokenizer_id != tokenizer.id() {
        return Err(PrefError::TokenizerMismatch {
            expected: tokenizer.id().to_string(),
            found: header.tokenizer_id,
        });
    }

    let mut records = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PrefRecord = serde_json::from_str(&line)
            .map_err(|e| PrefError::Corrupt { line: line_no, reason: e.to_string() })?;

        let recomputed = classify_step_diff_with(
            &record.pair.chosen,
            &record.pair.rejected,
            header.tolerance_px,
            registry,
            metric,
        );
        if recomputed.kind != record.pair.error_type {
            return Err(PrefError::Corrupt {
                line: line_no,
                reason: format!(
                    "stored error type {:?} but responses classify as {:?}",
                    record.pair.error_type, recomputed.kind
                ),
            });
        }
        for (label, response, stored) in [
            ("chosen", &record.pair.chosen, &record.chosen_mask),
            ("rejected", &record.pair.rejected, &record.rejected_mask),
        ] {
            let expected = build_mask(response, record.pair.error_type, header.mask_mode, tokenizer)?;
            if &expected != stored {
                return Err(PrefError::Corrupt {
                    line: line_no,
                    reason: format!("{label} mask fails the span self-check"),
                });
            }
        }
        records.push(record);
    }
    Ok(PrefDataset { header, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{AgentResponse, FormatConfig, ToolCall};
    use crate::dpo::ByteTokenizer;
    use crate::prefs::PairSource;
    use crate::trajectory::{Observation, StepContext};

    fn fmt() -> FormatConfig {
        FormatConfig::default()
    }

    fn pair(step: u32) -> PreferencePair {
        PreferencePair {
            context: StepContext {
                query: "press the thing".into(),
                current_obs: Observation {
                    step_index: step,
                    screenshot_ref: "abc".into(),
                    feature_vec: None,
                },
                history: vec![],
            },
            chosen: AgentResponse::new("t", "press", vec![ToolCall::coord("Click", 100, 100)], &fmt()),
            rejected: AgentResponse::new(
                "s",
                "press",
                vec![ToolCall::coord("Click", 200, 200)],
                &fmt(),
            ),
            error_type: DiffKind::ExecError,
            tolerance_px: 20,
            source: PairSource { query_id: "q".into(), step_index: step },
        }
    }

    fn load(path: &Path) -> Result<PrefDataset, PrefError> {
        load_pref(path, &ByteTokenizer, &ActionRegistry::default(), CoordMetric::Euclidean)
    }

    #[test]
    fn empty_set_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        persist_pref(&path, &[], &ByteTokenizer, MaskMode::ThreeSpan, 20).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let ds = load(&path).unwrap();
        assert!(ds.records.is_empty());
        assert_eq!(ds.header.tolerance_px, 20);
    }

    #[test]
    fn roundtrip_preserves_pairs_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        let pairs = vec![pair(1), pair(2)];
        persist_pref(&path, &pairs, &ByteTokenizer, MaskMode::ThreeSpan, 20).unwrap();
        let ds = load(&path).unwrap();
        assert_eq!(ds.records.len(), 2);
        assert_eq!(ds.records[0].pair, pairs[0]);
        let tokenized = ds.to_tokenized(&ByteTokenizer).unwrap();
        assert_eq!(tokenized.len(), 2);
        assert_eq!(tokenized[0].chosen_mask, ds.records[0].chosen_mask);
    }

    #[test]
    fn single_bit_tamper_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        persist_pref(&path, &[pair(1)], &ByteTokenizer, MaskMode::ThreeSpan, 20).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // Flip the first 1 inside the chosen mask's weight array.
        let marker = "\"chosen_mask\":{\"weights\":[";
        let at = text.find(marker).unwrap() + marker.len();
        let flip = text[at..].find('1').unwrap() + at;
        let mut tampered = text.clone();
        tampered.replace_range(flip..flip + 1, "0");
        fs::write(&path, tampered).unwrap();
        match load(&path) {
            Err(PrefError::Corrupt { reason, .. }) => assert!(reason.contains("self-check")),
            other => panic!("expected corrupt record, got {other:?}"),
        }
    }

    #[test]
    fn tampered_error_type_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        persist_pref(&path, &[pair(1)], &ByteTokenizer, MaskMode::ThreeSpan, 20).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let tampered = text.replace("\"ExecError\"", "\"PlanError\"");
        assert_ne!(tampered, text);
        fs::write(&path, tampered).unwrap();
        assert!(matches!(load(&path), Err(PrefError::Corrupt { .. })));
    }

    #[test]
    fn tokenizer_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        persist_pref(&path, &[pair(1)], &ByteTokenizer, MaskMode::ThreeSpan, 20).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("byte-258", "wordpiece-9000")).unwrap();
        assert!(matches!(load(&path), Err(PrefError::TokenizerMismatch { .. })));
    }
}
