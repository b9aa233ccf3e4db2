//! Federated simulation: non-IID client shards, per-round proving, audits of
//! a random fraction of client steps, and detection-rate measurement.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commit::ExampleLeaf;
use crate::dataset::{proc_digest, synthetic, Dataset, SynthConfig};
use crate::digest::{tag, Digest, Hasher};
use crate::error::{Error, Result};
use crate::fxp::div_round;
use crate::manifest::PolicyManifest;
use crate::model::{Adapters, ModelConfig};
use crate::proof::{audit_set, verify_step, Coverage, ProverOptions, Trainer, VerifyContext};
use crate::sampler::SamplerMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// The client trains with an inflated learning rate.
    LrTamper,
    /// The client trains on examples outside the committed dataset.
    OutOfPolicy,
}

impl AnomalyKind {
    pub fn name(&self) -> &'static str {
        match self {
            AnomalyKind::LrTamper => "lr_tamper",
            AnomalyKind::OutOfPolicy => "out_of_policy",
        }
    }
}

/// A misbehaving client, active from `round` on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anomaly {
    pub client: usize,
    pub kind: AnomalyKind,
    pub round: u32,
}

fn default_batch() -> u64 {
    1
}

fn default_grid() -> Vec<f64> {
    vec![0.05, 0.10, 0.20]
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub clients: usize,
    pub alpha: f64,
    pub rounds: u32,
    pub coverage: f64,
    pub steps_per_round: u64,
    #[serde(default = "default_batch")]
    pub batch_size: u64,
    /// Synthetic corpus size; four examples per client when zero.
    #[serde(default)]
    pub examples: usize,
    #[serde(default)]
    pub anomalies: Vec<Anomaly>,
    pub seed: u64,
    /// Monte Carlo trials per coverage level; zero skips the sweep.
    #[serde(default)]
    pub trials: u64,
    #[serde(default = "default_grid")]
    pub coverage_grid: Vec<f64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl FedConfig {
    pub fn from_json(text: &str) -> Result<FedConfig> {
        let c: FedConfig =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schema(m));
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return bad(format!("coverage {} outside (0, 1]", self.coverage));
        }
        if let Some(q) = self.coverage_grid.iter().find(|q| !(**q > 0.0 && **q <= 1.0)) {
            return bad(format!("coverage grid value {q} outside (0, 1]"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be positive", self.alpha));
        }
        if self.rounds == 0 || self.steps_per_round == 0 || self.batch_size == 0 {
            return bad("rounds, steps_per_round and batch_size must be positive".into());
        }
        for a in &self.anomalies {
            if a.client >= self.clients || a.round >= self.rounds {
                return bad(format!(
                    "anomaly for client {} in round {} is outside the schedule",
                    a.client, a.round
                ));
            }
        }
        Ok(())
    }

    fn examples(&self) -> usize {
        if self.examples == 0 {
            (4 * self.clients).max(32)
        } else {
            self.examples
        }
    }

    /// Manifest shared by every client: private sampling, one epoch per
    /// round, ceilings that never bind on a single shard.
    pub fn manifest(&self) -> PolicyManifest {
        let mut seed = Hasher::new(tag::SAMPLER);
        seed.str("fedsim").u64(self.seed);
        let mut m = PolicyManifest::with_model(
            ModelConfig::tiny(),
            seed.finish(),
            1,
            self.steps_per_round,
            self.batch_size,
        );
        m.sampler.mode = SamplerMode::Private;
        m.sampler.replacement = true;
        m.schedule.warmup_fraction = 0.0;
        let general = m.quotas["general"];
        for q in m.quotas.values_mut() {
            *q = general;
        }
        m
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let m = ModelConfig::tiny();
        synthetic(&SynthConfig::new(self.examples(), m.vocab_size, m.seq_len, self.seed))
    }
}

/// The bin an example is allocated by: its first non-`general` tag.
fn primary_bin(leaf: &ExampleLeaf, bins: &[String]) -> usize {
    bins.iter()
        .position(|b| b != "general" && leaf.policy_tags.contains(b))
        .or_else(|| bins.iter().position(|b| b == "general"))
        .unwrap_or(0)
}

fn dirichlet(rng: &mut ChaCha20Rng, k: usize, alpha: f64) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive alpha");
    let draws: Vec<f64> = (0..k).map(|_| g.sample(rng)).collect();
    let s: f64 = draws.iter().sum();
    if s > 0.0 && s.is_finite() {
        draws.iter().map(|x| x / s).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Largest-remainder rounding of `p * n` to integers summing to `n`.
fn apportion(p: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|x| x * n as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|a, b| {
        let ra = raw[*a] - raw[*a].floor();
        let rb = raw[*b] - raw[*b].floor();
        rb.total_cmp(&ra).then(a.cmp(b))
    });
    let short = n - out.iter().sum::<usize>();
    for i in order.into_iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Splits examples over `k` clients: for every bin, client proportions come
/// from Dirichlet(α). Shards are disjoint, cover the dataset, and are never
/// empty.
pub fn partition_dirichlet(
    dataset: &Dataset,
    bins: &[String],
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<u64>>> {
    if k == 0 || alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::Schema("partition needs k >= 1 and alpha > 0".into()));
    }
    if k > dataset.len() {
        return Err(Error::TooManyClients {
            clients: k,
            examples: dataset.len(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut by_bin = vec![Vec::new(); bins.len().max(1)];
    for (i, leaf) in dataset.leaves.iter().enumerate() {
        by_bin[primary_bin(leaf, bins)].push(i as u64);
    }
    let mut shards = vec![Vec::new(); k];
    for members in by_bin.iter_mut().filter(|m| !m.is_empty()) {
        members.shuffle(&mut rng);
        let counts = apportion(&dirichlet(&mut rng, k, alpha), members.len());
        let mut it = members.iter();
        for (shard, c) in shards.iter_mut().zip(counts) {
            shard.extend(it.by_ref().take(c));
        }
    }
    while let Some(empty) = shards.iter().position(|s| s.is_empty()) {
        let donor = (0..k).max_by_key(|i| (shards[*i].len(), usize::MAX - i)).unwrap();
        shards[donor].sort_unstable();
        let x = shards[donor].pop().expect("donor is not empty");
        shards[empty].push(x);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Probability that at least one of `tampered` bad steps lands in a uniform
/// audit of `ceil(q * total)` steps, independently over `rounds` rounds.
pub fn detection_probability(q: f64, total: u64, tampered: u64, rounds: u32) -> f64 {
    let n = audited_steps(q, total);
    let miss = miss_probability(total, tampered.min(total), n);
    1.0 - miss.powi(rounds as i32)
}

pub fn audited_steps(q: f64, total: u64) -> u64 {
    ((q * total as f64 - 1e-9).ceil().max(0.0) as u64).min(total)
}

/// `C(total - tampered, n) / C(total, n)`.
pub fn miss_probability(total: u64, tampered: u64, n: u64) -> f64 {
    if tampered == 0 {
        return 1.0;
    }
    if n + tampered > total {
        return 0.0;
    }
    (0..n)
        .map(|i| (total - tampered - i) as f64 / (total - i) as f64)
        .product()
}

/// Detection over rounds with differing sizes: `(total, tampered, audited)`
/// per round.
pub fn detection_probability_rounds(rounds: &[(u64, u64, u64)]) -> f64 {
    1.0 - rounds
        .iter()
        .map(|(n, m, a)| miss_probability(*n, *m, *a))
        .product::<f64>()
}

/// Unweighted fixed-point mean of client adapters.
pub fn fed_avg(updates: &[&Adapters]) -> Result<Adapters> {
    let first = *updates
        .first()
        .ok_or_else(|| Error::Shape("no updates to aggregate".into()))?;
    if updates.iter().any(|u| !u.same_shape(first)) {
        return Err(Error::Shape("client adapters differ in shape".into()));
    }
    let k = updates.len() as i128;
    let mut out = first.clone();
    let sources: Vec<Vec<&Vec<i64>>> = updates
        .iter()
        .map(|u| u.tensors().map(|t| &t.data).collect())
        .collect();
    for (ti, t) in out.tensors_mut().enumerate() {
        for (j, x) in t.data.iter_mut().enumerate() {
            let s: i128 = sources.iter().map(|u| u[ti][j] as i128).sum();
            *x = div_round(s, k) as i64;
        }
    }
    Ok(out)
}

/// Per-client outcome of one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client: usize,
    pub steps: u64,
    pub audited: u64,
    pub verified: u64,
    pub failed: u64,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub client: usize,
    pub step: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub total_steps: u64,
    pub audited_steps: u64,
    pub clients: Vec<ClientReport>,
    pub detections: Vec<Detection>,
    /// Anomalies active this round.
    pub injected: Vec<Anomaly>,
    /// Per configured anomaly: detected in this or an earlier round.
    pub anomaly_detected: Vec<bool>,
    /// Detections on clients with no active anomaly.
    pub false_positives: u64,
}

/// One client's proved round.
struct ClientRound {
    client: usize,
    ctx: VerifyContext,
    transcripts: Vec<crate::proof::StepTranscript>,
    params: Adapters,
}

/// In-memory federation: the shared manifest, the corpus, shards and the
/// current global adapters.
pub struct Federation {
    pub config: FedConfig,
    pub manifest: PolicyManifest,
    pub dataset: Dataset,
    pub shards: Vec<Vec<u64>>,
    pub global: Adapters,
    pub tainted: BTreeSet<usize>,
    detected: Vec<bool>,
    round: u32,
}

fn round_secret(seed: u64, client: usize, round: u32) -> Digest {
    let mut h = Hasher::new(tag::AUDIT);
    h.str("fedsim-client").u64(seed).u64(client as u64).u64(round as u64);
    h.finish()
}

fn foreign_leaves(seed: u64) -> Vec<ExampleLeaf> {
    (0..4u8)
        .map(|i| {
            let payload: Vec<u8> = (0..4).map(|j| (i + j) % 11).collect();
            ExampleLeaf {
                proc_digest: proc_digest(&payload),
                payload,
                source_id: format!("scraped/{seed}/{i}"),
                license_id: "proprietary".into(),
                policy_tags: BTreeSet::from(["telemetry".to_string()]),
            }
        })
        .collect()
}

impl Federation {
    pub fn new(config: FedConfig) -> Result<Federation> {
        config.validate()?;
        let manifest = config.manifest();
        let dataset = config.dataset()?;
        let shards =
            partition_dirichlet(&dataset, &manifest.bins, config.clients, config.alpha, config.seed)?;
        let fmt = manifest.format()?;
        Ok(Federation {
            global: Adapters::init(&manifest.model, fmt),
            detected: vec![false; config.anomalies.len()],
            tainted: BTreeSet::new(),
            round: 0,
            config,
            manifest,
            dataset,
            shards,
        })
    }

    fn active(&self, client: usize, round: u32) -> Option<AnomalyKind> {
        self.config
            .anomalies
            .iter()
            .find(|a| a.client == client && a.round <= round)
            .map(|a| a.kind)
    }

    fn prove_client(&self, client: usize, round: u32) -> Result<ClientRound> {
        let mut opts = ProverOptions::with_secret(round_secret(self.config.seed, client, round));
        opts.universe = Some(self.shards[client].clone());
        opts.start = Some(self.global.clone());
        match self.active(client, round) {
            Some(AnomalyKind::LrTamper) => {
                let mut rt = self.manifest.clone();
                rt.schedule.base_lr *= 4.0;
                opts.runtime = Some(rt);
                opts.skip_runtime_check = true;
            }
            Some(AnomalyKind::OutOfPolicy) => opts.foreign = foreign_leaves(self.config.seed),
            None => {}
        }
        let art = Trainer::new(&self.manifest, &self.dataset, opts)?.run()?;
        let ctx = VerifyContext::starting_from(
            &self.manifest,
            art.publics,
            None,
            Some(self.shards[client].clone()),
            Some(&self.global),
        )?;
        Ok(ClientRound {
            client,
            ctx,
            transcripts: art.transcripts,
            params: art.params,
        })
    }

    fn prove_all(&self, clients: &[usize], round: u32) -> Result<Vec<ClientRound>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers.max(1))
            .build()
            .expect("thread pool");
        pool.install(|| {
            clients
                .par_iter()
                .map(|c| self.prove_client(*c, round))
                .collect()
        })
    }

    /// Proves every participating client, audits `ceil(q * steps)` steps
    /// chosen by the round's audit RNG, excludes detected clients and
    /// averages the rest.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.round;
        if round >= self.config.rounds {
            return Err(Error::Schema("all rounds have run".into()));
        }
        let clients: Vec<usize> = (0..self.config.clients)
            .filter(|c| !self.tainted.contains(c))
            .collect();
        let proved = self.prove_all(&clients, round)?;
        let steps: Vec<(usize, usize)> = proved
            .iter()
            .enumerate()
            .flat_map(|(ci, c)| (0..c.transcripts.len()).map(move |t| (ci, t)))
            .collect();
        let total = steps.len() as u64;
        let audit = audit_set(
            Coverage::Spot {
                fraction: self.config.coverage,
                seed: self.config.seed,
            },
            total,
            &round_digest(self.config.seed, round),
        );

        let mut reports: Vec<ClientReport> = proved
            .iter()
            .map(|c| ClientReport {
                client: c.client,
                steps: c.transcripts.len() as u64,
                audited: 0,
                verified: 0,
                failed: 0,
                excluded: false,
            })
            .collect();
        let mut detections = Vec::new();
        for a in &audit {
            let (ci, t) = steps[*a as usize];
            let c = &proved[ci];
            let r = &mut reports[ci];
            r.audited += 1;
            match verify_step(&c.ctx, &c.transcripts[t], None) {
                Ok(()) => r.verified += 1,
                Err(e) => {
                    r.failed += 1;
                    detections.push(Detection {
                        client: c.client,
                        step: t as u64,
                        error: e.kind_name().to_string(),
                    });
                }
            }
        }
        for r in &mut reports {
            if r.failed > 0 {
                r.excluded = true;
                self.tainted.insert(r.client);
            }
        }
        let accepted: Vec<&Adapters> = proved
            .iter()
            .zip(&reports)
            .filter(|(_, r)| !r.excluded)
            .map(|(c, _)| &c.params)
            .collect();
        if !accepted.is_empty() {
            self.global = fed_avg(&accepted)?;
        }

        let injected: Vec<Anomaly> = self
            .config
            .anomalies
            .iter()
            .filter(|a| a.round <= round && clients.contains(&a.client))
            .copied()
            .collect();
        for (i, a) in self.config.anomalies.iter().enumerate() {
            if a.round <= round && self.tainted.contains(&a.client) {
                self.detected[i] = true;
            }
        }
        let false_positives = reports
            .iter()
            .filter(|r| r.failed > 0 && self.active(r.client, round).is_none())
            .count() as u64;
        self.round += 1;
        Ok(RoundReport {
            round,
            total_steps: total,
            audited_steps: audit.len() as u64,
            clients: reports,
            detections,
            injected,
            anomaly_detected: self.detected.clone(),
            false_positives,
        })
    }

    pub fn run(&mut self) -> Result<Vec<RoundReport>> {
        (self.round..self.config.rounds)
            .map(|_| self.run_round())
            .collect()
    }

    /// Fully verifies every step of every round with nobody excluded, which
    /// is the trajectory any audit that has not yet fired observes.
    pub fn verdicts(&self) -> Result<Vec<RoundVerdicts>> {
        let clients: Vec<usize> = (0..self.config.clients).collect();
        let mut global = self.global.clone();
        let mut out = Vec::new();
        let mut fed = Federation {
            config: self.config.clone(),
            manifest: self.manifest.clone(),
            dataset: self.dataset.clone(),
            shards: self.shards.clone(),
            global: global.clone(),
            tainted: BTreeSet::new(),
            detected: Vec::new(),
            round: 0,
        };
        for round in 0..self.config.rounds {
            fed.global = global.clone();
            let proved = fed.prove_all(&clients, round)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.workers.max(1))
                .build()
                .expect("thread pool");
            let steps: Vec<StepVerdict> = pool.install(|| {
                proved
                    .par_iter()
                    .flat_map_iter(|c| {
                        c.transcripts.iter().map(|tr| StepVerdict {
                            client: c.client,
                            ok: verify_step(&c.ctx, tr, None).is_ok(),
                        })
                    })
                    .collect()
            });
            let params: Vec<&Adapters> = proved.iter().map(|c| &c.params).collect();
            global = fed_avg(&params)?;
            out.push(RoundVerdicts { round, steps });
        }
        Ok(out)
    }
}

fn round_digest(seed: u64, round: u32) -> Digest {
    let mut h = Hasher::new(tag::AUDIT);
    h.str("fedsim-round").u64(seed).u64(round as u64);
    h.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepVerdict {
    pub client: usize,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundVerdicts {
    pub round: u32,
    pub steps: Vec<StepVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub coverage: f64,
    pub rounds: u32,
    pub client: usize,
    pub trials: u64,
    pub detected: u64,
    pub rate: f64,
    pub analytic: f64,
    /// Binomial standard error of the rate under the analytic probability.
    pub sigma: f64,
}

impl MonteCarlo {
    pub fn within(&self, k_sigma: f64) -> bool {
        (self.rate - self.analytic).abs() <= k_sigma * self.sigma + 1e-12
    }
}

/// Replays audits over precomputed verdicts: a trial detects `client` when
/// some audited step of that client failed within the first `rounds` rounds.
pub fn monte_carlo(
    verdicts: &[RoundVerdicts],
    client: usize,
    coverage: f64,
    rounds: u32,
    trials: u64,
    seed: u64,
) -> MonteCarlo {
    let rounds = (rounds as usize).min(verdicts.len());
    let shape: Vec<(u64, u64, u64)> = verdicts[..rounds]
        .iter()
        .map(|r| {
            let n = r.steps.len() as u64;
            let bad = r.steps.iter().filter(|s| s.client == client && !s.ok).count() as u64;
            (n, bad, audited_steps(coverage, n))
        })
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut detected = 0;
    for _ in 0..trials {
        let hit = verdicts[..rounds].iter().zip(&shape).any(|(r, (n, _, a))| {
            rand::seq::index::sample(&mut rng, *n as usize, *a as usize)
                .into_iter()
                .any(|i| r.steps[i].client == client && !r.steps[i].ok)
        });
        detected += hit as u64;
    }
    let analytic = detection_probability_rounds(&shape);
    let rate = detected as f64 / trials.max(1) as f64;
    MonteCarlo {
        coverage,
        rounds: rounds as u32,
        client,
        trials,
        detected,
        rate,
        analytic,
        sigma: (analytic * (1.0 - analytic) / trials.max(1) as f64).sqrt(),
    }
}

/// Coverage-versus-detection rows: one line per coverage level with one
/// column per anomaly kind.
pub fn summary_csv(rows: &[(AnomalyKind, MonteCarlo)]) -> String {
    let kinds: BTreeSet<AnomalyKind> = rows.iter().map(|(k, _)| *k).collect();
    let mut qs: Vec<f64> = rows.iter().map(|(_, m)| m.coverage).collect();
    qs.sort_by(f64::total_cmp);
    qs.dedup();
    let mut out = String::from("coverage,rounds");
    for k in &kinds {
        let _ = write!(out, ",{0}_rate,{0}_analytic", k.name());
    }
    out.push('\n');
    for q in qs {
        let rounds = rows
            .iter()
            .find(|(_, m)| m.coverage == q)
            .map_or(0, |(_, m)| m.rounds);
        let _ = write!(out, "{q},{rounds}");
        for k in &kinds {
            let hits: Vec<&MonteCarlo> = rows
                .iter()
                .filter(|(kk, m)| kk == k && m.coverage == q)
                .map(|(_, m)| m)
                .collect();
            let n = hits.len().max(1) as f64;
            let rate = hits.iter().map(|m| m.rate).sum::<f64>() / n;
            let an = hits.iter().map(|m| m.analytic).sum::<f64>() / n;
            let _ = write!(out, ",{rate:.4},{an:.4}");
        }
        out.push('\n');
    }
    out
}

/// Monte Carlo over every configured anomaly and coverage level.
pub fn sweep(config: &FedConfig, verdicts: &[RoundVerdicts]) -> Vec<(AnomalyKind, MonteCarlo)> {
    let mut rows = Vec::new();
    for (i, a) in config.anomalies.iter().enumerate() {
        for (j, q) in config.coverage_grid.iter().enumerate() {
            let seed = config.seed ^ ((i as u64) << 32) ^ j as u64;
            rows.push((
                a.kind,
                monte_carlo(verdicts, a.client, *q, config.rounds, config.trials, seed),
            ));
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(clients: usize, rounds: u32, q: f64) -> FedConfig {
        FedConfig {
            clients,
            alpha: 0.3,
            rounds,
            coverage: q,
            steps_per_round: 2,
            batch_size: 1,
            examples: 0,
            anomalies: vec![],
            seed: 11,
            trials: 0,
            coverage_grid: default_grid(),
            workers: 2,
        }
    }

    fn binom(n: u64, k: u64) -> u128 {
        (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
    }

    #[test]
    fn detection_matches_enumeration() {
        assert!((detection_probability(0.2, 10, 1, 1) - 0.2).abs() < 1e-15);
        // Enumerate every audit pair over 10 steps with step 0 tampered.
        let mut hit = 0;
        let mut all = 0;
        for a in 0..10 {
            for b in a + 1..10 {
                all += 1;
                hit += (a == 0 || b == 0) as u32;
            }
        }
        assert_eq!(all as u128, binom(10, 2));
        assert_eq!(hit as f64 / all as f64, 0.2);
        assert_eq!(detection_probability(1.0, 37, 1, 1), 1.0);
        assert_eq!(detection_probability(0.3, 37, 0, 4), 0.0);
    }

    #[test]
    fn miss_probability_is_a_binomial_ratio() {
        for (n, m, a) in [(20u64, 3u64, 5u64), (30, 1, 7), (12, 4, 8)] {
            let want = binom(n - m, a) as f64 / binom(n, a) as f64;
            assert!((miss_probability(n, m, a) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let d = synthetic(&SynthConfig::new(40, 11, 4, 1)).unwrap();
        let bins = crate::manifest::default_bins();
        let s = partition_dirichlet(&d, &bins, 1, 0.1, 5).unwrap();
        assert_eq!(s, vec![(0..40).collect::<Vec<u64>>()]);
        assert!(matches!(
            partition_dirichlet(&d, &bins, 41, 0.1, 5),
            Err(Error::TooManyClients { .. })
        ));
    }

    #[test]
    fn shards_are_disjoint_covering_and_seeded() {
        let d = synthetic(&SynthConfig::new(300, 11, 4, 2)).unwrap();
        let bins = crate::manifest::default_bins();
        for (k, alpha) in [(7, 0.1), (50, 0.3), (300, 0.1)] {
            let s = partition_dirichlet(&d, &bins, k, alpha, 9).unwrap();
            assert_eq!(s, partition_dirichlet(&d, &bins, k, alpha, 9).unwrap());
            assert!(s.iter().all(|x| !x.is_empty()));
            let mut all: Vec<u64> = s.concat();
            all.sort_unstable();
            assert_eq!(all, (0..300).collect::<Vec<_>>());
        }
    }

    #[test]
    fn large_alpha_tracks_global_proportions() {
        let d = synthetic(&SynthConfig::new(5000, 11, 4, 3)).unwrap();
        let bins = crate::manifest::default_bins();
        let s = partition_dirichlet(&d, &bins, 5, 1e3, 4).unwrap();
        let share = |idx: &[u64], b: usize| {
            idx.iter()
                .filter(|i| primary_bin(&d.leaves[**i as usize], &bins) == b)
                .count() as f64
                / idx.len() as f64
        };
        let all: Vec<u64> = (0..5000).collect();
        for b in 0..bins.len() {
            let g = share(&all, b);
            for shard in &s {
                assert!((share(shard, b) - g).abs() < 0.05, "bin {b}");
            }
        }
    }

    #[test]
    fn fed_avg_rounds_half_even() {
        let m = ModelConfig::tiny();
        let fmt = crate::fxp::FxpFormat::new(14, 14).unwrap();
        let mut a = Adapters::init(&m, fmt);
        let mut b = a.clone();
        a.tensors_mut().next().unwrap().data[0] = 1;
        b.tensors_mut().next().unwrap().data[0] = 2;
        let avg = fed_avg(&[&a, &b]).unwrap();
        assert_eq!(avg.tensors().next().unwrap().data[0], 2);
        assert_eq!(fed_avg(&[&a, &a]).unwrap(), a);
    }

    #[test]
    fn honest_federation_has_no_detections() {
        let mut f = Federation::new(config(3, 2, 1.0)).unwrap();
        let reports = f.run().unwrap();
        assert_eq!(reports.len(), 2);
        for r in &reports {
            assert_eq!(r.audited_steps, r.total_steps);
            assert!(r.detections.is_empty());
            assert_eq!(r.false_positives, 0);
        }
    }

    #[test]
    fn full_coverage_catches_each_anomaly_in_its_round() {
        let mut c = config(4, 2, 1.0);
        c.anomalies = vec![
            Anomaly {
                client: 1,
                kind: AnomalyKind::LrTamper,
                round: 0,
            },
            Anomaly {
                client: 3,
                kind: AnomalyKind::OutOfPolicy,
                round: 1,
            },
        ];
        let mut f = Federation::new(c).unwrap();
        let r0 = f.run_round().unwrap();
        assert_eq!(r0.anomaly_detected, vec![true, false]);
        assert!(r0
            .detections
            .iter()
            .all(|d| d.client == 1 && d.error == "ConstraintViolation"));
        let r1 = f.run_round().unwrap();
        assert_eq!(r1.anomaly_detected, vec![true, true]);
        assert!(r1.clients.iter().all(|c| c.client != 1));
        assert!(r1
            .detections
            .iter()
            .all(|d| d.client == 3 && d.error == "OutOfPolicyBatch"));
        assert_eq!(r0.false_positives + r1.false_positives, 0);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = config(2, 1, 0.0);
        assert!(c.validate().is_err());
        c.coverage = 0.5;
        c.validate().unwrap();
        c.anomalies.push(Anomaly {
            client: 2,
            kind: AnomalyKind::LrTamper,
            round: 0,
        });
        assert!(c.validate().is_err());
        assert!(FedConfig::from_json(r#"{"clients": 0}"#).is_err());
    }
}
