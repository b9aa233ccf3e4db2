//! Step verification and run verification.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commit::{verify_counter, verify_membership, DatasetCommitment};
use crate::dataset::{check_leaf_policy, LeafMeta};
use crate::digest::{tag, Digest, Hasher};
use crate::error::{Error, Result};
use crate::fxp::{FxpFormat, OpTally};
use crate::lut::{TableSet, TableSpec};
use crate::manifest::PolicyManifest;
use crate::model::{loss_and_grads, Adapters, Backbone, Model, Sequence};
use crate::optim::{clip_gradients, schedule_eta, verify_adamw_transition, AdamWHyper};
use crate::sampler::{
    derive_public_batch, verify_private_openings, BinMatrix, QuotaFilter, QuotaLedger,
    SamplerMode, Universe,
};

use super::fold::{ceil_log2, fold_all, EpochCertificate, FoldNode, RunCertificate};
use super::transcript::{
    activation_digests, delta_digest, grads_digest, state_of, BatchAttestation, PublicStep,
    StepTranscript,
};
use super::Publics;

/// Public inputs a verifier holds: the manifest, `(c_D, h_0, h_Π)` and, for
/// public sampling, the per-leaf metadata needed to replay batches.
pub struct VerifyContext {
    pub manifest: PolicyManifest,
    pub publics: Publics,
    format: FxpFormat,
    hyper: AdamWHyper,
    backbone: Backbone,
    backbone_digest: Digest,
    template: Adapters,
    start: Adapters,
    matrix: Option<BinMatrix>,
    n_leaves: Option<u64>,
    universe: Option<Vec<u64>>,
    models: Mutex<HashMap<Vec<TableSpec>, Model>>,
}

impl VerifyContext {
    pub fn new(
        manifest: &PolicyManifest,
        publics: Publics,
        sidecar: Option<&[LeafMeta]>,
        universe: Option<Vec<u64>>,
    ) -> Result<VerifyContext> {
        Self::starting_from(manifest, publics, sidecar, universe, None)
    }

    /// As `new`, for a run that started from `start` rather than the
    /// manifest initialization.
    pub fn starting_from(
        manifest: &PolicyManifest,
        publics: Publics,
        sidecar: Option<&[LeafMeta]>,
        universe: Option<Vec<u64>>,
        start: Option<&Adapters>,
    ) -> Result<VerifyContext> {
        manifest.validate()?;
        if manifest.hash() != publics.h_pi {
            return Err(Error::ManifestMismatch {
                field: "h_pi".into(),
            });
        }
        let format = manifest.format()?;
        let (matrix, n_leaves) = match sidecar {
            Some(meta) => {
                let c = DatasetCommitment::from_digests(meta.iter().map(|m| m.leaf).collect())?;
                if c.root() != publics.c_d {
                    return Err(Error::CertificateMismatch(
                        "leaf metadata does not match c_D".into(),
                    ));
                }
                let rows: Vec<_> = meta
                    .iter()
                    .map(|m| (m.policy_tags.clone(), m.tokens))
                    .collect();
                (
                    Some(BinMatrix::new(manifest.bins.clone(), &rows)?),
                    Some(meta.len() as u64),
                )
            }
            None => (None, None),
        };
        if manifest.sampler.mode == SamplerMode::Public && n_leaves.is_none() {
            return Err(Error::Schema(
                "public sampling replay needs the leaf metadata".into(),
            ));
        }
        let backbone = Backbone::init(&manifest.model, format)?;
        let (start, _, h_0) = super::prover::start_state(manifest, start)?;
        if h_0 != publics.h_0 {
            return Err(Error::CertificateMismatch(
                "h_0 is not the committed initial state".into(),
            ));
        }
        Ok(VerifyContext {
            format,
            hyper: manifest.hyper()?,
            backbone_digest: backbone.digest(format),
            backbone,
            template: Adapters::init(&manifest.model, format),
            start,
            matrix,
            n_leaves,
            universe,
            models: Mutex::new(HashMap::new()),
            manifest: manifest.clone(),
            publics,
        })
    }

    pub fn template(&self) -> &Adapters {
        &self.template
    }

    pub fn format(&self) -> FxpFormat {
        self.format
    }

    fn universe(&self) -> Universe<'_> {
        match &self.universe {
            Some(u) => Universe::Shard(u),
            None => Universe::All(self.n_leaves.unwrap_or(0)),
        }
    }

    fn model(&self, specs: &[TableSpec]) -> Result<Model> {
        if let Some(m) = self.models.lock().unwrap().get(specs) {
            return Ok(m.clone());
        }
        let m = Model::with_backbone(
            self.manifest.model.clone(),
            self.format,
            self.backbone.clone(),
            TableSet::from_specs(specs)?,
            (self.manifest.softmax_clip[0], self.manifest.softmax_clip[1]),
        )?;
        self.models
            .lock()
            .unwrap()
            .insert(specs.to_vec(), m.clone());
        Ok(m)
    }

    /// Ledgers in force before each step, replayed from public batches.
    fn replay_ledgers(&self, steps: &[&PublicStep]) -> Result<Vec<Option<QuotaLedger>>> {
        let Some(m) = &self.matrix else {
            return Ok(vec![None; steps.len()]);
        };
        let spe = self.manifest.training.steps_per_epoch;
        let mut ledger = QuotaLedger::new(0, &self.manifest.bins);
        let mut out = Vec::with_capacity(steps.len());
        for (i, s) in steps.iter().enumerate() {
            let epoch = i as u64 / spe;
            if ledger.epoch() != epoch {
                ledger = QuotaLedger::new(epoch, &self.manifest.bins);
            }
            out.push(Some(ledger.clone()));
            if let Some(idx) = s.batch.indices() {
                ledger
                    .update(&idx, m)
                    .map_err(|e| Error::OutOfPolicyBatch(e.to_string()))?;
            }
        }
        Ok(out)
    }
}

/// Consecutive steps must hand over the same state: via the public state
/// digests when present, and via the witness tensors when both are held.
fn check_state_continuity(ctx: &VerifyContext, transcripts: &[StepTranscript]) -> Result<()> {
    let spe = ctx.manifest.training.steps_per_epoch;
    let mut prev_post = Some(ctx.publics.h_0);
    let mut prev_tensors = Some((ctx.start.clone(), None::<crate::optim::AdamWState>));
    for (i, tr) in transcripts.iter().enumerate() {
        let at = |e: Error| e.at(i as u64 / spe, i as u64);
        if let (Some(post), Some((pre, _))) = (prev_post, tr.public.states) {
            if pre != post {
                return Err(at(cv("pre_state")));
            }
        }
        if let (Some((params, opt)), Some(w)) = (&prev_tensors, &tr.witness) {
            let opt_ok = match opt {
                Some(o) => *o == w.opt_pre,
                None => w.opt_pre == crate::optim::AdamWState::new(params),
            };
            if w.params_pre != *params || !opt_ok {
                return Err(at(cv("pre_state")));
            }
        }
        prev_post = tr.public.states.map(|(_, post)| post);
        prev_tensors = tr
            .witness
            .as_ref()
            .map(|w| (w.params_post.clone(), Some(w.opt_post.clone())));
    }
    Ok(())
}

fn cv(tensor: &str) -> Error {
    Error::ConstraintViolation {
        tensor: tensor.into(),
        coordinate: 0,
    }
}

/// Checks one transcript: manifest binding, table budgets, batch attestation,
/// re-execution, the AdamW transition and the chain link, in that order.
/// `ledger` is the quota ledger before this step (public sampling).
pub fn verify_step(
    ctx: &VerifyContext,
    tr: &StepTranscript,
    ledger: Option<&QuotaLedger>,
) -> Result<()> {
    let p = &tr.public;
    let m = &ctx.manifest;
    let fmt = ctx.format;
    let total = m.total_steps();
    if p.h_pi != ctx.publics.h_pi {
        return Err(Error::ManifestMismatch {
            field: "h_pi".into(),
        });
    }

    // Tables: every declared table must be certified within budget.
    if p.tables.iter().any(|s| s.format != fmt) {
        return Err(Error::ManifestMismatch {
            field: "fixed_point".into(),
        });
    }
    let model = ctx.model(&p.tables)?;
    m.check_budgets(&model.tables)?;

    // Batch attestation.
    let n = m.sampler.batch_size as usize;
    let sequences: Vec<Sequence> = match (&p.batch, m.sampler.mode) {
        (BatchAttestation::Public(items), SamplerMode::Public) => {
            let got: Vec<u64> = items.iter().map(|i| i.index).collect();
            let filter = match (ledger, &ctx.matrix) {
                (Some(l), Some(mx)) if m.sampler.quota_aware => Some(QuotaFilter {
                    ledger: l,
                    matrix: mx,
                    quotas: &m.quotas,
                }),
                _ => None,
            };
            let want = derive_public_batch(
                &m.sampler.seed,
                p.step,
                m.sampler.batch_size,
                ctx.universe(),
                m.sampler.replacement,
                filter.as_ref(),
            )
            .map_err(|e| Error::OutOfPolicyBatch(format!("replay failed: {e}")))?;
            if got != want {
                return Err(Error::OutOfPolicyBatch(format!(
                    "indices {got:?} do not match replayed batch {want:?}"
                )));
            }
            for it in items {
                let leaf = it.leaf.digest();
                if it.path.leaf_index != it.index
                    || !verify_membership(&ctx.publics.c_d, &leaf, &it.path)
                {
                    return Err(Error::OutOfPolicyBatch(format!(
                        "index {} is not a committed leaf",
                        it.index
                    )));
                }
                check_leaf_policy(&it.leaf, m).map_err(Error::OutOfPolicyBatch)?;
            }
            items
                .iter()
                .map(|i| Sequence::from_bytes(&i.leaf.payload))
                .collect()
        }
        (BatchAttestation::Private(c), SamplerMode::Private) => {
            let w = tr.witness.as_ref().ok_or_else(|| missing_witness(p.step))?;
            if w.openings.len() != n || w.examples.len() != n {
                return Err(Error::OutOfPolicyBatch(format!(
                    "expected {n} openings, found {}",
                    w.openings.len()
                )));
            }
            verify_private_openings(&ctx.publics.c_d, c, &w.openings)?;
            for (o, x) in w.openings.iter().zip(&w.examples) {
                if x.digest() != o.leaf {
                    return Err(Error::OutOfPolicyBatch(format!(
                        "example for index {} does not match its leaf",
                        o.index
                    )));
                }
                check_leaf_policy(x, m).map_err(Error::OutOfPolicyBatch)?;
            }
            w.examples
                .iter()
                .map(|x| Sequence::from_bytes(&x.payload))
                .collect()
        }
        _ => {
            return Err(Error::ManifestMismatch {
                field: "sampler.mode".into(),
            })
        }
    };
    if sequences.len() != n {
        return Err(Error::OutOfPolicyBatch(format!(
            "batch of {} where the manifest fixes {n}",
            sequences.len()
        )));
    }

    let w = tr.witness.as_ref().ok_or_else(|| missing_witness(p.step))?;
    if !w.params_pre.same_shape(&ctx.template) || !w.params_post.same_shape(&ctx.template) {
        return Err(cv("shape"));
    }

    // Pre-state.
    let pre_state = state_of(&w.params_pre, &w.opt_pre, fmt, &ctx.backbone_digest);
    if let Some((pre, _)) = p.states {
        if pre != pre_state {
            return Err(cv("pre_state"));
        }
    }
    if w.opt_pre.t != p.step {
        return Err(cv("t"));
    }

    // Re-execution.
    let out = loss_and_grads(&model, &w.params_pre, &sequences)?;
    let act = activation_digests(&out.checksums, &w.salt);
    if act.len() != p.activation.len() {
        return Err(cv("activation"));
    }
    if let Some(i) = act.iter().zip(&p.activation).position(|(a, b)| a != b) {
        return Err(Error::ConstraintViolation {
            tensor: "activation".into(),
            coordinate: i,
        });
    }
    if grads_digest(&out.grads, fmt, &w.salt) != p.grads {
        return Err(cv("grads"));
    }
    if out.loss != w.loss || p.loss.is_some_and(|l| l != out.loss) {
        return Err(cv("loss"));
    }

    // Optimizer transition under the manifest schedule.
    let eta = schedule_eta(&ctx.hyper, p.step, total, &model.tables)?;
    if p.link.eta != eta {
        return Err(cv("eta"));
    }
    let (clipped, _) = clip_gradients(&out.grads, &ctx.hyper, &model.tables, &mut OpTally::default())?;
    verify_adamw_transition(
        &w.opt_pre,
        &w.opt_post,
        &clipped,
        &ctx.hyper,
        eta,
        &w.params_pre,
        &w.params_post,
        &model.tables,
    )?;
    let post_state = state_of(&w.params_post, &w.opt_post, fmt, &ctx.backbone_digest);
    if let Some((_, post)) = p.states {
        if post != post_state {
            return Err(cv("post_state"));
        }
    }
    let delta = delta_digest(&w.salt, &pre_state, &post_state, &w.params_pre, &w.params_post);
    if delta != p.link.delta_digest {
        return Err(cv("delta"));
    }

    check_link(ctx, p)
}

fn missing_witness(step: u64) -> Error {
    Error::CertificateMismatch(format!("no witness for step {step}"))
}

/// Recomputes the chain link and its metadata.
pub fn check_link(ctx: &VerifyContext, p: &PublicStep) -> Result<()> {
    p.link.verify()?;
    let spe = ctx.manifest.training.steps_per_epoch;
    let meta = &p.link.meta;
    if meta.step != p.step || meta.epoch != p.step / spe || p.epoch != meta.epoch {
        return Err(Error::ChainBreak(format!(
            "link metadata names step {} epoch {}",
            meta.step, meta.epoch
        )));
    }
    if meta.batch_commitment != p.batch.commitment() {
        return Err(Error::ChainBreak("link binds a different batch".into()));
    }
    if meta.schedule_id != ctx.manifest.schedule.id.name() {
        return Err(Error::ChainBreak(format!(
            "link names schedule `{}`",
            meta.schedule_id
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Coverage {
    Full,
    /// Audit `ceil(fraction * T)` steps drawn with `seed` and `h_T`.
    Spot { fraction: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub coverage: Coverage,
    pub workers: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            coverage: Coverage::Full,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub h_t: Digest,
    pub total_steps: u64,
    pub audited: Vec<u64>,
    /// `(check, milliseconds)` in execution order.
    pub timings: Vec<(String, f64)>,
}

/// Steps to audit: all under full coverage, otherwise a uniform subset
/// without replacement seeded by `(seed, h_T)`.
pub fn audit_set(coverage: Coverage, total: u64, h_t: &Digest) -> Vec<u64> {
    match coverage {
        Coverage::Full => (0..total).collect(),
        Coverage::Spot { fraction, seed } => {
            let k = ((fraction * total as f64 - 1e-9).ceil().max(0.0) as u64).min(total);
            let mut h = Hasher::new(tag::AUDIT);
            h.u64(seed).digest(h_t);
            let mut rng = ChaCha20Rng::from_seed(h.finish().0);
            let mut v: Vec<u64> = rand::seq::index::sample(&mut rng, total as usize, k as usize)
                .into_iter()
                .map(|i| i as u64)
                .collect();
            v.sort_unstable();
            v
        }
    }
}

/// Run verification: chain continuity, leaf checks over the audit set,
/// per-epoch quotas, then folding. The earliest failing step is reported.
pub fn verify_run(
    ctx: &VerifyContext,
    run: &RunCertificate,
    epochs: &[EpochCertificate],
    transcripts: &[StepTranscript],
    opts: &VerifyOptions,
) -> Result<VerifyReport> {
    let m = &ctx.manifest;
    let spe = m.training.steps_per_epoch;
    let total = m.total_steps();
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64() * 1e3));
        clock = Instant::now();
    };

    if run.c_d != ctx.publics.c_d || run.h_0 != ctx.publics.h_0 || run.h_pi != ctx.publics.h_pi {
        return Err(Error::CertificateMismatch(
            "run certificate publics differ".into(),
        ));
    }
    // Continuity h_0 -> h_T.
    let mut head = ctx.publics.h_0;
    for (i, tr) in transcripts.iter().enumerate() {
        let i = i as u64;
        let p = &tr.public;
        let at = |e: Error| e.at(i / spe, i);
        if p.step != i {
            return Err(at(Error::ChainBreak(format!(
                "expected step {i}, found step {}",
                p.step
            ))));
        }
        if p.link.h_prev != head {
            return Err(at(Error::ChainBreak(format!(
                "step {i} does not continue from the previous head"
            ))));
        }
        if p.h_pi != ctx.publics.h_pi {
            return Err(at(Error::ManifestMismatch {
                field: "h_pi".into(),
            }));
        }
        check_link(ctx, p).map_err(at)?;
        head = p.link.h_next;
    }
    if transcripts.len() as u64 != total {
        let n = transcripts.len() as u64;
        return Err(Error::ChainBreak(format!("run ends after {n} of {total} steps"))
            .at(n / spe, n));
    }
    if head != run.h_t {
        return Err(Error::ChainBreak("final head differs from h_T".into()).at(
            (total - 1) / spe,
            total - 1,
        ));
    }
    lap("continuity", &mut timings);
    if run.total_steps != total {
        return Err(Error::CertificateMismatch(format!(
            "run certificate covers {} of {total} steps",
            run.total_steps
        )));
    }

    let publics: Vec<&PublicStep> = transcripts.iter().map(|t| &t.public).collect();
    let ledgers = ctx.replay_ledgers(&publics)?;

    // Leaf verification.
    let audited = audit_set(opts.coverage, total, &run.h_t);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .expect("thread pool");
    let results: Vec<Result<()>> = pool.install(|| {
        audited
            .par_iter()
            .map(|t| {
                let i = *t as usize;
                verify_step(ctx, &transcripts[i], ledgers[i].as_ref()).map_err(|e| e.at(t / spe, *t))
            })
            .collect()
    });
    let first = results.into_iter().find_map(Result::err);
    let handover = check_state_continuity(ctx, transcripts).err();
    let key = |e: &Error| e.location().map_or(u64::MAX, |(_, s)| s);
    match (first, handover) {
        (Some(a), Some(b)) => return Err(if key(&b) < key(&a) { b } else { a }),
        (Some(e), None) | (None, Some(e)) => return Err(e),
        (None, None) => {}
    }
    lap("steps", &mut timings);

    // Quotas.
    if epochs.len() as u64 != m.training.epochs {
        return Err(Error::CertificateMismatch(format!(
            "{} epoch certificates for {} epochs",
            epochs.len(),
            m.training.epochs
        )));
    }
    for (e, cert) in epochs.iter().enumerate() {
        let e = e as u64;
        let last = (e + 1) * spe - 1;
        let at = |err: Error| err.at(e, last);
        if cert.epoch != e || cert.h_pi != ctx.publics.h_pi || cert.steps != spe {
            return Err(at(Error::CertificateMismatch(format!(
                "epoch certificate {e} header"
            ))));
        }
        if !cert.quota_ok {
            return Err(at(Error::CertificateMismatch(format!(
                "epoch {e} reports a quota failure"
            ))));
        }
        if m.sampler.mode == SamplerMode::Public {
            let mut ledger = ledgers[last as usize].clone().expect("public replay");
            let mx = ctx.matrix.as_ref().expect("public replay");
            ledger.update(&publics[last as usize].batch.indices().unwrap(), mx)?;
            ledger.check(&m.quotas).map_err(at)?;
            let want = ledger.counter_values();
            if cert.counters.len() != want.len() {
                return Err(at(Error::CertificateMismatch("counter openings".into())));
            }
            for o in &cert.counters {
                if !verify_counter(&cert.counter_root, o) || want.get(&o.label) != Some(&o.count) {
                    return Err(at(Error::CertificateMismatch(format!(
                        "counter `{}` does not match the replayed ledger",
                        o.label
                    ))));
                }
            }
        } else if !cert.counters.is_empty() {
            return Err(at(Error::CertificateMismatch(
                "private epoch discloses counters".into(),
            )));
        }
    }
    lap("quotas", &mut timings);

    // Folding.
    let mut roots = Vec::with_capacity(epochs.len());
    for (e, cert) in epochs.iter().enumerate() {
        let lo = e * spe as usize;
        let leaves: Vec<FoldNode> = publics[lo..lo + spe as usize]
            .iter()
            .map(|p| FoldNode::leaf(p))
            .collect();
        let (root, depth) = fold_all(&leaves, opts.workers)?;
        if root != cert.root || depth != cert.depth || depth != ceil_log2(spe) {
            return Err(Error::CertificateMismatch(format!("epoch {e} folding root"))
                .at(e as u64, (e as u64 + 1) * spe - 1));
        }
        roots.push(root);
    }
    let (root, top) = fold_all(&roots, opts.workers)?;
    let digests: Vec<Digest> = epochs.iter().map(|c| c.digest()).collect();
    if root != run.root
        || digests != run.epochs
        || run.h_t != root.h_end
        || run.depth != ceil_log2(spe) + top
    {
        return Err(Error::CertificateMismatch("run folding root".into()));
    }
    lap("folding", &mut timings);

    Ok(VerifyReport {
        h_t: run.h_t,
        total_steps: total,
        audited,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{sidecar, synthetic, Dataset, SynthConfig};
    use crate::proof::{ProverOptions, RunArtifacts, Trainer};

    fn setup(private: bool) -> (PolicyManifest, Dataset) {
        let mut m = PolicyManifest::tiny(Digest([7; 32]));
        if private {
            m.sampler.mode = SamplerMode::Private;
        }
        let d = synthetic(&SynthConfig::new(64, m.model.vocab_size, m.model.seq_len, 3)).unwrap();
        (m, d)
    }

    fn prove(m: &PolicyManifest, d: &Dataset) -> RunArtifacts {
        Trainer::new(m, d, ProverOptions::with_secret(Digest([9; 32])))
            .unwrap()
            .run()
            .unwrap()
    }

    fn context(m: &PolicyManifest, d: &Dataset, a: &RunArtifacts) -> VerifyContext {
        VerifyContext::new(m, a.publics, Some(&sidecar(d)), None).unwrap()
    }

    #[test]
    fn honest_public_run_verifies() {
        let (m, d) = setup(false);
        let a = prove(&m, &d);
        let ctx = context(&m, &d, &a);
        let r = verify_run(&ctx, &a.run, &a.epochs, &a.transcripts, &VerifyOptions::default())
            .unwrap();
        assert_eq!(r.total_steps, m.total_steps());
        assert_eq!(r.audited.len() as u64, m.total_steps());
    }

    #[test]
    fn honest_private_run_verifies() {
        let (m, d) = setup(true);
        let a = prove(&m, &d);
        assert!(a.transcripts.iter().all(|t| t.public.states.is_none()));
        let ctx = VerifyContext::new(&m, a.publics, None, None).unwrap();
        let opts = VerifyOptions {
            workers: 2,
            ..VerifyOptions::default()
        };
        verify_run(&ctx, &a.run, &a.epochs, &a.transcripts, &opts).unwrap();
    }

    #[test]
    fn transcripts_roundtrip_through_bytes() {
        let (m, d) = setup(true);
        let a = prove(&m, &d);
        let fmt = m.format().unwrap();
        let like = Adapters::init(&m.model, fmt);
        for t in &a.transcripts {
            assert_eq!(&StepTranscript::from_bytes(&t.to_bytes(fmt), &like).unwrap(), t);
        }
    }

    #[test]
    fn tampered_state_is_rejected() {
        let (m, d) = setup(false);
        let a = prove(&m, &d);
        let ctx = context(&m, &d, &a);
        let mut tr = a.transcripts[3].clone();
        let w = tr.witness.as_mut().unwrap();
        w.params_post.tensors_mut().next().unwrap().data[0] += 1;
        let err = verify_step(&ctx, &tr, None).unwrap_err();
        assert!(matches!(err, Error::ConstraintViolation { .. }), "{err}");
    }

    #[test]
    fn reordered_steps_break_the_chain() {
        let (m, d) = setup(false);
        let a = prove(&m, &d);
        let ctx = context(&m, &d, &a);
        let mut trs = a.transcripts.clone();
        trs.swap(2, 3);
        let err = verify_run(&ctx, &a.run, &a.epochs, &trs, &VerifyOptions::default())
            .unwrap_err();
        assert!(matches!(err.root(), Error::ChainBreak(_)), "{err}");
        assert_eq!(err.location(), Some((0, 2)));
    }

    #[test]
    fn wrong_manifest_is_rejected_up_front() {
        let (m, d) = setup(false);
        let a = prove(&m, &d);
        let mut other = m.clone();
        other.optimizer.weight_decay = 0.02;
        let err = VerifyContext::new(&other, a.publics, Some(&sidecar(&d)), None)
            .err()
            .unwrap();
        assert!(matches!(err, Error::ManifestMismatch { .. }));
    }

    #[test]
    fn spot_audit_set_is_deterministic_and_sized() {
        let h = Digest([5; 32]);
        let c = Coverage::Spot { fraction: 0.1, seed: 4 };
        let a = audit_set(c, 1000, &h);
        assert_eq!(a.len(), 100);
        assert_eq!(a, audit_set(c, 1000, &h));
        assert_ne!(a, audit_set(c, 1000, &Digest([6; 32])));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(audit_set(Coverage::Full, 5, &h), vec![0, 1, 2, 3, 4]);
    }
}
