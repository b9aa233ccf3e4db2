//! Example ingestion (JSONL) and a synthetic corpus generator.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::commit::{DatasetCommitment, ExampleLeaf};
use crate::digest::{tag, Digest, Hasher};
use crate::error::{Error, Result};
use crate::manifest::PolicyManifest;
use crate::model::Sequence;
use crate::sampler::BinMatrix;

/// Identifier of the only preprocessing pipeline: bytes are tokens.
pub const BYTE_PIPELINE: &str = "byte-level/1";

/// One JSONL record. Exactly one of `text` and `tokens` is present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u8>>,
    pub source_id: String,
    pub license_id: String,
    #[serde(default)]
    pub policy_tags: BTreeSet<String>,
}

pub fn proc_digest(payload: &[u8]) -> Digest {
    let mut h = Hasher::new(tag::LEAF);
    h.str(BYTE_PIPELINE).bytes(payload);
    h.finish()
}

impl Record {
    pub fn into_leaf(self) -> Result<ExampleLeaf> {
        let payload = match (self.text, self.tokens) {
            (Some(t), None) => t.into_bytes(),
            (None, Some(t)) => t,
            _ => {
                return Err(Error::Schema(format!(
                    "record `{}` needs exactly one of text and tokens",
                    self.source_id
                )))
            }
        };
        Ok(ExampleLeaf {
            proc_digest: proc_digest(&payload),
            payload,
            source_id: self.source_id,
            license_id: self.license_id,
            policy_tags: self.policy_tags,
        })
    }

    pub fn from_leaf(leaf: &ExampleLeaf) -> Record {
        let (text, tokens) = match std::str::from_utf8(&leaf.payload) {
            Ok(s) if !s.chars().any(|c| c.is_control() && c != '\n' && c != '\t') => {
                (Some(s.to_string()), None)
            }
            _ => (None, Some(leaf.payload.clone())),
        };
        Record {
            text,
            tokens,
            source_id: leaf.source_id.clone(),
            license_id: leaf.license_id.clone(),
            policy_tags: leaf.policy_tags.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub leaves: Vec<ExampleLeaf>,
}

impl Dataset {
    pub fn from_jsonl(text: &str) -> Result<Dataset> {
        let leaves = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<Record>(l)
                    .map_err(|e| Error::Schema(format!("line {}: {e}", i + 1)))?
                    .into_leaf()
            })
            .collect::<Result<Vec<_>>>()?;
        if leaves.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Dataset { leaves })
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.leaves {
            out.push_str(&serde_json::to_string(&Record::from_leaf(l)).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn commitment(&self) -> Result<DatasetCommitment> {
        DatasetCommitment::build(&self.leaves)
    }

    pub fn matrix(&self, bins: &[String]) -> Result<BinMatrix> {
        let rows: Vec<_> = self
            .leaves
            .iter()
            .map(|l| (l.policy_tags.clone(), l.token_count()))
            .collect();
        BinMatrix::new(bins.to_vec(), &rows)
    }

    pub fn sequence(&self, index: u64) -> Result<Sequence> {
        let leaf = self.leaves.get(index as usize).ok_or(Error::IndexOutOfRange {
            index,
            len: self.leaves.len() as u64,
        })?;
        Ok(Sequence::from_bytes(&leaf.payload))
    }

    /// Every example must carry an admissible license and only declared tags.
    pub fn check_policy(&self, manifest: &PolicyManifest) -> Result<()> {
        for (i, l) in self.leaves.iter().enumerate() {
            check_leaf_policy(l, manifest)
                .map_err(|m| Error::Schema(format!("example {i}: {m}")))?;
        }
        Ok(())
    }
}

/// Why a leaf is out of policy, if it is.
pub fn check_leaf_policy(leaf: &ExampleLeaf, manifest: &PolicyManifest) -> Result<(), String> {
    if !manifest.admissible_licenses.contains(&leaf.license_id) {
        return Err(format!("license `{}` is not admissible", leaf.license_id));
    }
    if let Some(t) = leaf.policy_tags.iter().find(|t| !manifest.bins.contains(t)) {
        return Err(format!("tag `{t}` is not a declared bin"));
    }
    if leaf.proc_digest != proc_digest(&leaf.payload) {
        return Err("processing digest does not match the payload".into());
    }
    Ok(())
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub examples: usize,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Probability of a second tag, per non-general bin.
    pub bin_rates: Vec<(String, f64)>,
}

impl SynthConfig {
    pub fn new(examples: usize, vocab: usize, seq_len: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            examples,
            vocab,
            min_len: 2,
            max_len: seq_len + 1,
            seed,
            bin_rates: vec![
                ("safety".into(), 0.2),
                ("medical".into(), 0.08),
                ("finance".into(), 0.12),
                ("telemetry".into(), 0.05),
            ],
        }
    }
}

/// Noisy arithmetic progressions mod `vocab`, so that a model can learn
/// something. Every example is tagged `general` plus at most one other bin.
pub fn synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.examples == 0 {
        return Err(Error::EmptyDataset);
    }
    if cfg.vocab == 0 || cfg.vocab > 256 || cfg.min_len < 2 || cfg.max_len < cfg.min_len {
        return Err(Error::Schema("synthetic: bad vocab or length range".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let licenses: Vec<String> = crate::manifest::default_licenses().into_iter().collect();
    let v = cfg.vocab as u32;
    let leaves = (0..cfg.examples)
        .map(|i| {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let start = rng.random_range(0..v);
            let step = rng.random_range(1..=2u32);
            let payload: Vec<u8> = (0..len as u32)
                .map(|j| {
                    let t = if rng.random_bool(0.1) {
                        rng.random_range(0..v)
                    } else {
                        (start + j * step) % v
                    };
                    t as u8
                })
                .collect();
            let mut tags = BTreeSet::from(["general".to_string()]);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (bin, rate) in &cfg.bin_rates {
                acc += rate;
                if u < acc {
                    tags.insert(bin.clone());
                    break;
                }
            }
            ExampleLeaf {
                proc_digest: proc_digest(&payload),
                payload,
                source_id: format!("synthetic/{}/{i}", cfg.seed),
                license_id: licenses[rng.random_range(0..licenses.len())].clone(),
                policy_tags: tags,
            }
        })
        .collect();
    Ok(Dataset { leaves })
}

/// Public per-leaf metadata written next to a dataset commitment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafMeta {
    pub index: u64,
    pub leaf: Digest,
    pub source_id: String,
    pub license_id: String,
    pub policy_tags: BTreeSet<String>,
    pub tokens: u64,
}

pub fn sidecar(dataset: &Dataset) -> Vec<LeafMeta> {
    dataset
        .leaves
        .iter()
        .enumerate()
        .map(|(i, l)| LeafMeta {
            index: i as u64,
            leaf: l.digest(),
            source_id: l.source_id.clone(),
            license_id: l.license_id.clone(),
            policy_tags: l.policy_tags.clone(),
            tokens: l.token_count(),
        })
        .collect()
}
