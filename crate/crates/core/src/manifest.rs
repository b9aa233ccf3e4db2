//! The public policy manifest: everything the verifier needs to hold the
//! prover to, with a canonical hash `h_Π`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::{tag, Digest, Hasher};
use crate::error::{Error, Result};
use crate::fxp::FxpFormat;
use crate::lut::{softmax_bound, TableFn, TableSet};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamWHyper, ScheduleId};
use crate::sampler::{Quota, SamplerDescriptor, SamplerMode};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPoint {
    pub int_bits: u8,
    pub frac_bits: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    /// Ceiling on the certified L1 softmax deviation for unclipped rows.
    pub delta_sm: f64,
    /// Per-table ceiling on the certified max abs error, keyed by table name.
    pub tables: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub bias_correction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub id: ScheduleId,
    pub base_lr: f64,
    pub warmup_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub epochs: u64,
    pub steps_per_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyManifest {
    pub version: u32,
    pub fixed_point: FixedPoint,
    pub budgets: Budgets,
    /// Window applied to max-subtracted logits before the exp lookup.
    pub softmax_clip: [f64; 2],
    pub model: ModelConfig,
    pub optimizer: OptimizerSpec,
    pub schedule: ScheduleSpec,
    pub sampler: SamplerDescriptor,
    pub training: TrainingSpec,
    pub bins: Vec<String>,
    pub quotas: BTreeMap<String, Quota>,
    pub admissible_licenses: BTreeSet<String>,
    /// How an example tagged with several bins is counted.
    pub multi_bin_counting: String,
}

pub const ONCE_PER_BIN: &str = "once_per_bin";
pub const STANDARD_BIAS_CORRECTION: &str = "standard";

pub fn default_bins() -> Vec<String> {
    ["general", "safety", "medical", "finance", "telemetry"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

pub fn default_licenses() -> BTreeSet<String> {
    ["apache-2.0", "cc-by-4.0", "cc0-1.0", "mit"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl PolicyManifest {
    /// Small end-to-end configuration: `tiny` model, 2 epochs of 8 steps.
    pub fn tiny(seed: Digest) -> PolicyManifest {
        PolicyManifest::with_model(ModelConfig::tiny(), seed, 2, 8, 4)
    }

    /// The desk-scale configuration.
    pub fn desk(seed: Digest) -> PolicyManifest {
        PolicyManifest::with_model(ModelConfig::desk(), seed, 2, 16, 8)
    }

    /// Defaults at `b = q = 14` with quotas scaled to the run length. The
    /// `general` bin is sized so it never binds; the others do.
    pub fn with_model(
        model: ModelConfig,
        seed: Digest,
        epochs: u64,
        steps_per_epoch: u64,
        batch_size: u64,
    ) -> PolicyManifest {
        let q = 14u8;
        let per_epoch = steps_per_epoch * batch_size;
        let max_tokens = 4 * model.seq_len as u64 + 64;
        let quota = |frac: f64| {
            let items = ((per_epoch as f64 * frac).ceil() as u64).max(1);
            Quota {
                items,
                tokens: items * max_tokens,
            }
        };
        let quotas = [
            ("general", quota(1.0)),
            ("safety", quota(0.3)),
            ("medical", quota(0.1)),
            ("finance", quota(0.15)),
            ("telemetry", quota(0.05)),
        ]
        .into_iter()
        .map(|(b, q)| (b.to_string(), q))
        .collect();
        let ulp = (-(q as f64)).exp2();
        PolicyManifest {
            version: MANIFEST_VERSION,
            fixed_point: FixedPoint {
                int_bits: 14,
                frac_bits: q,
            },
            budgets: Budgets {
                delta_sm: 3e-3,
                tables: TableFn::ALL
                    .iter()
                    .map(|f| {
                        // ln is interpolated on a coarser grid.
                        let b = if *f == TableFn::Ln { 2.0 * ulp } else { ulp };
                        (f.name().to_string(), b)
                    })
                    .collect(),
            },
            softmax_clip: [-8.0, 0.0],
            model,
            optimizer: OptimizerSpec {
                beta1: 0.9,
                beta2: 0.95,
                epsilon: 1e-8,
                weight_decay: 0.05,
                clip_norm: 1.0,
                bias_correction: STANDARD_BIAS_CORRECTION.into(),
            },
            schedule: ScheduleSpec {
                id: ScheduleId::CosineWarmup,
                base_lr: 0.01,
                warmup_fraction: 0.03,
            },
            sampler: SamplerDescriptor::public(seed, batch_size),
            training: TrainingSpec {
                epochs,
                steps_per_epoch,
            },
            bins: default_bins(),
            quotas,
            admissible_licenses: default_licenses(),
            multi_bin_counting: ONCE_PER_BIN.into(),
        }
    }

    pub fn from_json(text: &str) -> Result<PolicyManifest> {
        let m: PolicyManifest =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<PolicyManifest> {
        PolicyManifest::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn format(&self) -> Result<FxpFormat> {
        FxpFormat::new(self.fixed_point.int_bits, self.fixed_point.frac_bits)
    }

    pub fn hyper(&self) -> Result<AdamWHyper> {
        let o = &self.optimizer;
        AdamWHyper::new(
            self.format()?,
            o.beta1,
            o.beta2,
            o.epsilon,
            o.weight_decay,
            o.clip_norm,
            self.schedule.base_lr,
            self.schedule.warmup_fraction,
            self.schedule.id,
        )
    }

    pub fn total_steps(&self) -> u64 {
        self.training.epochs * self.training.steps_per_epoch
    }

    pub fn tables(&self) -> Result<TableSet> {
        TableSet::standard(self.format()?)
    }

    pub fn build_model(&self) -> Result<Model> {
        let fmt = self.format()?;
        Model::new(
            self.model.clone(),
            fmt,
            TableSet::standard(fmt)?,
            (self.softmax_clip[0], self.softmax_clip[1]),
        )
    }

    /// Structural checks. A bin without a quota is named in the error.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schema(m));
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported manifest version {}", self.version));
        }
        self.format()?;
        self.model.validate()?;
        self.hyper()?;
        if self.optimizer.bias_correction != STANDARD_BIAS_CORRECTION {
            return bad(format!(
                "unknown bias correction `{}`",
                self.optimizer.bias_correction
            ));
        }
        if self.multi_bin_counting != ONCE_PER_BIN {
            return bad(format!(
                "unknown multi-bin counting rule `{}`",
                self.multi_bin_counting
            ));
        }
        if self.budgets.delta_sm.is_nan() || self.budgets.delta_sm <= 0.0 {
            return bad("budgets.delta_sm must be positive".into());
        }
        for (name, b) in &self.budgets.tables {
            if !TableFn::ALL.iter().any(|f| f.name() == name) {
                return bad(format!("budget for unknown table `{name}`"));
            }
            if b.is_nan() || *b <= 0.0 {
                return bad(format!("budget for table `{name}` must be positive"));
            }
        }
        for f in TableFn::ALL {
            if !self.budgets.tables.contains_key(f.name()) {
                return bad(format!("budget missing for table `{}`", f.name()));
            }
        }
        let [lo, hi] = self.softmax_clip;
        if !(lo < 0.0 && hi >= 0.0) {
            return bad("softmax_clip must satisfy lo < 0 <= hi".into());
        }
        if self.sampler.batch_size == 0 {
            return bad("sampler.batch_size must be positive".into());
        }
        if self.sampler.shuffle != "per_batch" {
            return bad(format!("unknown shuffle policy `{}`", self.sampler.shuffle));
        }
        if self.training.epochs == 0 || self.training.steps_per_epoch == 0 {
            return bad("training needs at least one epoch and one step".into());
        }
        let mut seen = BTreeSet::new();
        for b in &self.bins {
            if b.is_empty() || !seen.insert(b) {
                return bad(format!("bin `{b}` is empty or duplicated"));
            }
        }
        for b in &self.bins {
            if !self.quotas.contains_key(b) {
                return bad(format!("quota missing for bin `{b}`"));
            }
        }
        if let Some(extra) = self.quotas.keys().find(|k| !seen.contains(k)) {
            return bad(format!("quota for undeclared bin `{extra}`"));
        }
        if self.admissible_licenses.is_empty() {
            return bad("admissible_licenses is empty".into());
        }
        Ok(())
    }

    /// `h_Π`: a digest over a canonical, key-sorted binary form of the manifest.
    pub fn hash(&self) -> Digest {
        let v = serde_json::to_value(self).expect("manifest serializes");
        let mut h = Hasher::new(tag::MANIFEST);
        canonical(&v, &mut h);
        h.finish()
    }

    /// Checks every table bound and the softmax bound against the budgets.
    pub fn check_budgets(&self, tables: &TableSet) -> Result<()> {
        for t in tables.iter() {
            let name = t.function().name();
            let budget = *self
                .budgets
                .tables
                .get(name)
                .ok_or_else(|| Error::Schema(format!("budget missing for table `{name}`")))?;
            if t.max_error() > budget {
                return Err(Error::BudgetExceeded {
                    what: format!("{name} table"),
                    bound: t.max_error(),
                    budget,
                });
            }
        }
        let sm = softmax_bound(&tables.exp, self.softmax_clip[0], self.model.seq_len);
        if sm.unclipped() > self.budgets.delta_sm {
            return Err(Error::BudgetExceeded {
                what: "softmax".into(),
                bound: sm.unclipped(),
                budget: self.budgets.delta_sm,
            });
        }
        Ok(())
    }

    /// Compares the configuration a run actually used against this manifest.
    pub fn check_runtime(&self, runtime: &PolicyManifest) -> Result<()> {
        let a = serde_json::to_value(self).expect("manifest serializes");
        let b = serde_json::to_value(runtime).expect("manifest serializes");
        match first_difference(&a, &b, "") {
            Some(field) => Err(Error::ManifestMismatch { field }),
            None => Ok(()),
        }
    }

    pub fn is_private(&self) -> bool {
        self.sampler.mode == SamplerMode::Private
    }
}

fn canonical(v: &Value, h: &mut Hasher) {
    match v {
        Value::Null => {
            h.update(&[0]);
        }
        Value::Bool(b) => {
            h.update(&[1, *b as u8]);
        }
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                h.update(&[2]).u64(u);
            } else if let Some(i) = n.as_i64() {
                h.update(&[3]).i64(i);
            } else {
                let f = n.as_f64().expect("finite number");
                h.update(&[4]).update(&f.to_bits().to_le_bytes());
            }
        }
        Value::String(s) => {
            h.update(&[5]).str(s);
        }
        Value::Array(a) => {
            h.update(&[6]).u64(a.len() as u64);
            for x in a {
                canonical(x, h);
            }
        }
        Value::Object(o) => {
            let sorted: BTreeMap<&String, &Value> = o.iter().collect();
            h.update(&[7]).u64(sorted.len() as u64);
            for (k, x) in sorted {
                h.str(k);
                canonical(x, h);
            }
        }
    }
}

/// Dotted path of the first field that differs, in key order.
pub fn first_difference(a: &Value, b: &Value, path: &str) -> Option<String> {
    let join = |k: &str| {
        if path.is_empty() {
            k.to_string()
        } else {
            format!("{path}.{k}")
        }
    };
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            keys.into_iter().find_map(|k| match (x.get(k), y.get(k)) {
                (Some(p), Some(q)) => first_difference(p, q, &join(k)),
                _ => Some(join(k)),
            })
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x
            .iter()
            .zip(y)
            .enumerate()
            .find_map(|(i, (p, q))| first_difference(p, q, &join(&i.to_string()))),
        _ if a == b => None,
        _ => Some(if path.is_empty() { "<root>".into() } else { path.into() }),
    }
}
