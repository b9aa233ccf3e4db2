//! ProveUpdate: sample, re-execute, clip, AdamW, chain, and close epochs.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::commit::{DatasetCommitment, ExampleLeaf, Salt};
use crate::dataset::Dataset;
use crate::digest::{tag, Digest, Hasher};
use crate::error::{Error, Result};
use crate::fxp::{FxpFormat, OpTally};
use crate::lut::{TableSet, TableSpec};
use crate::manifest::PolicyManifest;
use crate::model::{loss_and_grads, Adapters, Model, Sequence};
use crate::optim::{
    adamw_step, clip_gradients, extend_chain, schedule_eta, AdamWHyper, AdamWState, StepMeta,
};
use crate::sampler::{
    derive_public_batch, draw_private_batch, BatchOpening, BinMatrix, QuotaFilter, QuotaLedger, SaltRecord,
    SamplerMode, Universe,
};

use super::fold::{fold_all, run_certificate, EpochCertificate, FoldNode, RunCertificate};
use super::transcript::{
    activation_digests, delta_digest, grads_digest, state_of, BatchAttestation, PublicItem,
    PublicStep, StepTranscript, StepWitness,
};
use super::Publics;

/// Knobs for a prover run. Everything except `secret` defaults to honest
/// behaviour.
#[derive(Debug, Clone)]
pub struct ProverOptions {
    /// Prover-local key: private sampling randomness and counter salts.
    pub secret: Digest,
    /// Configuration actually executed; the manifest when `None`.
    pub runtime: Option<PolicyManifest>,
    /// Skip the runtime-versus-manifest comparison (a dishonest prover).
    pub skip_runtime_check: bool,
    /// Tables actually used; the standard set when `None`.
    pub tables: Option<Vec<TableSpec>>,
    /// Force every batch to come from this bin, ignoring quotas.
    pub over_quota: Option<String>,
    /// Restrict sampling to these dataset indices.
    pub universe: Option<Vec<u64>>,
    /// Adapters to start from instead of the manifest initialization.
    pub start: Option<Adapters>,
    /// Train on these uncommitted leaves in place of the first batch item.
    pub foreign: Vec<ExampleLeaf>,
    pub keep_witness: bool,
}

impl Default for ProverOptions {
    fn default() -> Self {
        ProverOptions {
            secret: Digest::ZERO,
            runtime: None,
            skip_runtime_check: false,
            tables: None,
            over_quota: None,
            universe: None,
            start: None,
            foreign: Vec::new(),
            keep_witness: true,
        }
    }
}

impl ProverOptions {
    pub fn with_secret(secret: Digest) -> ProverOptions {
        ProverOptions {
            secret,
            ..ProverOptions::default()
        }
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub publics: Publics,
    pub transcripts: Vec<StepTranscript>,
    pub epochs: Vec<EpochCertificate>,
    pub run: RunCertificate,
    pub salts: Vec<SaltRecord>,
    pub params: Adapters,
    pub losses: Vec<f64>,
}

fn derive(secret: &Digest, label: &str) -> Digest {
    let mut h = Hasher::new(tag::AUDIT);
    h.str(label).digest(secret);
    h.finish()
}

pub fn initial_state(manifest: &PolicyManifest) -> Result<(Adapters, AdamWState, Digest)> {
    start_state(manifest, None)
}

/// Fresh moments over `start` (or the initialization) and the state digest.
pub fn start_state(
    manifest: &PolicyManifest,
    start: Option<&Adapters>,
) -> Result<(Adapters, AdamWState, Digest)> {
    let fmt = manifest.format()?;
    let params = match start {
        Some(a) if !a.same_shape(&Adapters::init(&manifest.model, fmt)) => {
            return Err(Error::Shape("start adapters do not match the model".into()))
        }
        Some(a) => a.clone(),
        None => Adapters::init(&manifest.model, fmt),
    };
    let opt = AdamWState::new(&params);
    let backbone = crate::model::Backbone::init(&manifest.model, fmt)?.digest(fmt);
    let h0 = state_of(&params, &opt, fmt, &backbone);
    Ok((params, opt, h0))
}

pub struct Trainer<'a> {
    manifest: PolicyManifest,
    runtime: PolicyManifest,
    h_pi: Digest,
    dataset: &'a Dataset,
    commitment: DatasetCommitment,
    matrix: BinMatrix,
    model: Model,
    hyper: AdamWHyper,
    format: FxpFormat,
    params: Adapters,
    opt: AdamWState,
    h_0: Digest,
    head: Digest,
    state: Digest,
    step: u64,
    ledger: QuotaLedger,
    rng: ChaCha20Rng,
    opts: ProverOptions,
    epoch_leaves: Vec<FoldNode>,
    epochs: Vec<EpochCertificate>,
    salts: Vec<SaltRecord>,
    last_loss: i64,
}

impl<'a> Trainer<'a> {
    /// Aborts with `ManifestMismatch` before any step when the runtime
    /// configuration differs from the manifest.
    pub fn new(
        manifest: &PolicyManifest,
        dataset: &'a Dataset,
        opts: ProverOptions,
    ) -> Result<Trainer<'a>> {
        manifest.validate()?;
        let runtime = opts.runtime.clone().unwrap_or_else(|| manifest.clone());
        if !opts.skip_runtime_check {
            manifest.check_runtime(&runtime)?;
        }
        runtime.validate()?;
        dataset.check_policy(manifest)?;
        let format = runtime.format()?;
        let tables = match &opts.tables {
            Some(specs) => TableSet::from_specs(specs)?,
            None => TableSet::standard(format)?,
        };
        let model = Model::new(
            runtime.model.clone(),
            format,
            tables,
            (runtime.softmax_clip[0], runtime.softmax_clip[1]),
        )?;
        let params = match &opts.start {
            Some(a) if !a.same_shape(&Adapters::init(&runtime.model, format)) => {
                return Err(Error::Shape("start adapters do not match the model".into()))
            }
            Some(a) => a.clone(),
            None => Adapters::init(&runtime.model, format),
        };
        let opt = AdamWState::new(&params);
        let h_0 = state_of(&params, &opt, format, &model.backbone_digest());
        if let Some(u) = &opts.universe {
            if u.iter().any(|i| *i >= dataset.len() as u64) {
                return Err(Error::IndexOutOfRange {
                    index: *u.iter().max().unwrap(),
                    len: dataset.len() as u64,
                });
            }
        }
        Ok(Trainer {
            h_pi: manifest.hash(),
            commitment: dataset.commitment()?,
            matrix: dataset.matrix(&runtime.bins)?,
            hyper: runtime.hyper()?,
            ledger: QuotaLedger::new(0, &runtime.bins),
            rng: ChaCha20Rng::from_seed(derive(&opts.secret, "private-sampler").0),
            manifest: manifest.clone(),
            runtime,
            dataset,
            model,
            format,
            params,
            opt,
            h_0,
            head: h_0,
            state: h_0,
            step: 0,
            opts,
            epoch_leaves: Vec::new(),
            epochs: Vec::new(),
            salts: Vec::new(),
            last_loss: 0,
        })
    }

    pub fn publics(&self) -> Publics {
        Publics {
            c_d: self.commitment.root(),
            h_0: self.h_0,
            h_pi: self.h_pi,
        }
    }

    pub fn params(&self) -> &Adapters {
        &self.params
    }

    pub fn head(&self) -> Digest {
        self.head
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    fn total(&self) -> u64 {
        self.runtime.total_steps()
    }

    fn select(&mut self) -> Result<(Vec<u64>, BatchAttestation, Vec<Salt>)> {
        let t = self.step;
        let s = &self.runtime.sampler;
        let n = s.batch_size;
        if let Some(bin) = self.opts.over_quota.clone() {
            let pool: Vec<u64> = self
                .matrix
                .examples_in(&bin)
                .into_iter()
                .map(|i| i as u64)
                .filter(|i| match &self.opts.universe {
                    Some(u) => u.contains(i),
                    None => true,
                })
                .collect();
            if pool.is_empty() {
                return Err(Error::UnknownBin(bin));
            }
            let mut idx: Vec<u64> = (0..n)
                .map(|_| pool[self.rng.random_range(0..pool.len())])
                .collect();
            idx.sort_unstable();
            return self.attest(idx);
        }
        let universe = match &self.opts.universe {
            Some(u) => Universe::Shard(u),
            None => Universe::All(self.dataset.len() as u64),
        };
        let filter = QuotaFilter {
            ledger: &self.ledger,
            matrix: &self.matrix,
            quotas: &self.runtime.quotas,
        };
        let filter = s.quota_aware.then_some(&filter);
        match s.mode {
            SamplerMode::Public => {
                let idx = derive_public_batch(&s.seed, t, n, universe, s.replacement, filter)?;
                self.attest(idx)
            }
            SamplerMode::Private => {
                let pb = draw_private_batch(
                    &mut self.rng,
                    n,
                    universe,
                    s.replacement,
                    &self.commitment,
                    filter,
                )?;
                let salts = pb.openings.iter().map(|o| o.salt).collect();
                Ok((pb.indices, BatchAttestation::Private(pb.commitment), salts))
            }
        }
    }

    fn attest(&mut self, idx: Vec<u64>) -> Result<(Vec<u64>, BatchAttestation, Vec<Salt>)> {
        match self.runtime.sampler.mode {
            SamplerMode::Public => {
                let items = idx
                    .iter()
                    .map(|i| {
                        Ok(PublicItem {
                            index: *i,
                            leaf: self.dataset.leaves[*i as usize].clone(),
                            path: self.commitment.open(*i)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((idx, BatchAttestation::Public(items), Vec::new()))
            }
            SamplerMode::Private => {
                let mut salts = Vec::with_capacity(idx.len());
                let mut items = Vec::with_capacity(idx.len());
                for i in &idx {
                    let mut s = [0u8; 16];
                    self.rng.fill_bytes(&mut s);
                    items.push(crate::sampler::batch_item_commitment(
                        &s,
                        &self.commitment.leaf_digest(*i)?,
                    ));
                    salts.push(s);
                }
                let c = crate::sampler::private_batch_commitment(&items);
                Ok((idx, BatchAttestation::Private(c), salts))
            }
        }
    }

    /// Attestation over substituted leaves, paths still pointing at the
    /// committed indices.
    fn reattest(
        &self,
        indices: &[u64],
        leaves: &[ExampleLeaf],
        salts: &[Salt],
    ) -> Result<BatchAttestation> {
        Ok(match self.runtime.sampler.mode {
            SamplerMode::Public => BatchAttestation::Public(
                indices
                    .iter()
                    .zip(leaves)
                    .map(|(i, l)| {
                        Ok(PublicItem {
                            index: *i,
                            leaf: l.clone(),
                            path: self.commitment.open(*i)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            SamplerMode::Private => {
                let items: Vec<Digest> = salts
                    .iter()
                    .zip(leaves)
                    .map(|(s, l)| crate::sampler::batch_item_commitment(s, &l.digest()))
                    .collect();
                BatchAttestation::Private(crate::sampler::private_batch_commitment(&items))
            }
        })
    }

    /// One ProveUpdate. Returns the transcript and, at the last step of an
    /// epoch, the epoch certificate.
    pub fn prove_step(&mut self) -> Result<(StepTranscript, Option<EpochCertificate>)> {
        let spe = self.runtime.training.steps_per_epoch;
        let (t, epoch) = (self.step, self.step / spe);
        self.prove_step_inner().map_err(|e| e.at(epoch, t))
    }

    fn prove_step_inner(&mut self) -> Result<(StepTranscript, Option<EpochCertificate>)> {
        let t = self.step;
        if t >= self.total() {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: self.total(),
            });
        }
        let spe = self.runtime.training.steps_per_epoch;
        let epoch = t / spe;
        let fmt = self.format;
        let private = self.runtime.sampler.mode == SamplerMode::Private;

        let (indices, mut batch, item_salts) = self.select()?;
        let mut leaves: Vec<ExampleLeaf> = indices
            .iter()
            .map(|i| self.dataset.leaves[*i as usize].clone())
            .collect();
        if !self.opts.foreign.is_empty() {
            leaves[0] = self.opts.foreign[t as usize % self.opts.foreign.len()].clone();
            batch = self.reattest(&indices, &leaves, &item_salts)?;
        }
        let batch_seqs: Vec<Sequence> = leaves
            .iter()
            .map(|l| Sequence::from_bytes(&l.payload))
            .collect();
        let out = loss_and_grads(&self.model, &self.params, &batch_seqs)?;

        let mut salt = [0u8; 16];
        if private {
            self.rng.fill_bytes(&mut salt);
        }
        let mut tally = OpTally::default();
        let (clipped, _) = clip_gradients(&out.grads, &self.hyper, &self.model.tables, &mut tally)?;
        let eta = schedule_eta(&self.hyper, t, self.total(), &self.model.tables)?;
        let (params, opt) = adamw_step(
            &self.params,
            &self.opt,
            &clipped,
            &self.hyper,
            eta,
            &self.model.tables,
            &mut tally,
        )?;
        let post_state = state_of(&params, &opt, fmt, &self.model.backbone_digest());
        let delta = delta_digest(&salt, &self.state, &post_state, &self.params, &params);
        let meta = StepMeta {
            batch_commitment: batch.commitment(),
            step: t,
            epoch,
            schedule_id: self.runtime.schedule.id.name().to_string(),
        };
        let link = extend_chain(self.head, delta, eta, meta);
        self.ledger.update(&indices, &self.matrix)?;

        let public = PublicStep {
            step: t,
            epoch,
            h_pi: self.h_pi,
            tables: self.model.tables.specs(),
            batch,
            grads: grads_digest(&out.grads, fmt, &salt),
            activation: activation_digests(&out.checksums, &salt),
            states: (!private).then_some((self.state, post_state)),
            loss: (!private).then_some(out.loss),
            link: link.clone(),
        };
        let openings = if private && self.opts.keep_witness {
            indices
                .iter()
                .zip(&item_salts)
                .zip(&leaves)
                .map(|((i, s), l)| {
                    Ok(BatchOpening {
                        index: *i,
                        salt: *s,
                        leaf: l.digest(),
                        path: self.commitment.open(*i)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        self.last_loss = out.loss;
        let witness = self.opts.keep_witness.then(|| StepWitness {
            salt,
            openings,
            examples: if private { leaves } else { Vec::new() },
            loss: out.loss,
            params_pre: self.params.clone(),
            opt_pre: self.opt.clone(),
            params_post: params.clone(),
            opt_post: opt.clone(),
        });
        if private {
            self.salts.push(SaltRecord {
                step: t,
                transcript: salt,
                items: item_salts,
            });
        }
        let transcript = StepTranscript { public, witness };
        self.epoch_leaves.push(FoldNode::leaf(&transcript.public));

        self.params = params;
        self.opt = opt;
        self.state = post_state;
        self.head = link.h_next;
        self.step += 1;

        let cert = if self.step.is_multiple_of(spe) {
            Some(self.close_epoch(epoch)?)
        } else {
            None
        };
        Ok((transcript, cert))
    }

    fn close_epoch(&mut self, epoch: u64) -> Result<EpochCertificate> {
        self.ledger.check(&self.runtime.quotas)?;
        self.ledger.close();
        let cc = self.ledger.commit(&derive(&self.opts.secret, "counters"))?;
        let (root, depth) = fold_all(&self.epoch_leaves, 1)?;
        let cert = EpochCertificate {
            epoch,
            root,
            depth,
            steps: self.epoch_leaves.len() as u64,
            counter_root: cc.root(),
            quota_ok: true,
            counters: if self.runtime.sampler.mode == SamplerMode::Public {
                cc.open_all()
            } else {
                Vec::new()
            },
            h_pi: self.h_pi,
            coverage: if self.opts.keep_witness { 1.0 } else { 0.0 },
        };
        self.epoch_leaves.clear();
        self.ledger = QuotaLedger::new(epoch + 1, &self.runtime.bins);
        self.epochs.push(cert.clone());
        Ok(cert)
    }

    /// Runs every remaining step and folds the run certificate.
    pub fn run(mut self) -> Result<RunArtifacts> {
        let mut transcripts = Vec::with_capacity(self.total() as usize);
        let mut losses = Vec::with_capacity(self.total() as usize);
        while self.step < self.total() {
            let (tr, _) = self.prove_step()?;
            losses.push(self.format.dequantize(self.last_loss));
            transcripts.push(tr);
        }
        let publics = self.publics();
        let run = run_certificate(&publics, &self.epochs, 1)?;
        Ok(RunArtifacts {
            publics,
            transcripts,
            epochs: self.epochs,
            run,
            salts: self.salts,
            params: self.params,
            losses,
        })
    }

    /// The manifest the transcripts are bound to.
    pub fn manifest(&self) -> &PolicyManifest {
        &self.manifest
    }
}
