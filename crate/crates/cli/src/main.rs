use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vft_core::dataset::{sidecar, synthetic, Dataset, SynthConfig};
use vft_core::digest::{Digest, Hasher};
use vft_core::fedsim::{self, FedConfig, Federation};
use vft_core::manifest::PolicyManifest;
use vft_core::proof::{
    initial_state, notarize, verify_run, Coverage, ProverOptions, Publics, Trainer, VerifyContext,
    VerifyOptions,
};
use vft_core::sampler::{open_salts, seal_salts, SamplerMode};

mod workspace;

use workspace::{write_json, Workspace};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] vft_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 0 accepted, 1 usage/IO, 2 manifest mismatch, 3 verification failure,
    /// 4 quota violation.
    fn code(&self) -> u8 {
        use vft_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.root() {
                E::ManifestMismatch { .. } => 2,
                E::QuotaViolation { .. } => 4,
                E::Io(_) | E::Schema(_) | E::EmptyDataset | E::InvalidFormat(_) => 1,
                E::TooManyClients { .. } | E::BatchTooLarge { .. } | E::UnknownBin(_) => 1,
                _ => 3,
            },
        }
    }
}

#[derive(Parser)]
#[command(name = "vft", version, about = "Verifiable fixed-point LoRA fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampling {
    Public,
    Private,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Audit {
    Full,
    Spot,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic JSONL corpus and a matching manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest_out: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        examples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        epochs: u64,
        /// Total steps across all epochs.
        #[arg(long, default_value_t = 20)]
        steps: u64,
        #[arg(long, value_enum, default_value_t = Sampling::Public)]
        mode: Sampling,
    },
    /// Commit a dataset under a manifest and register (c_D, h_0, h_Pi).
    Commit {
        #[arg(long)]
        workspace: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train and emit step transcripts and certificates.
    TrainProve {
        #[arg(long)]
        workspace: PathBuf,
        /// Total steps to run; must match the manifest.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<Sampling>,
        /// Prover secret seed (private sampling and salts).
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify a run from its publics, transcripts and certificates.
    Verify {
        #[arg(long)]
        workspace: PathBuf,
        #[arg(long, value_enum, default_value_t = Audit::Full)]
        mode: Audit,
        #[arg(long, default_value_t = 0.1)]
        coverage: f64,
        /// Audit seed for spot mode.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the prover's sealed salts against the published transcripts.
    Audit {
        #[arg(long)]
        workspace: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the federated audit simulator.
    Fedsim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workspace: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        coverage: Option<f64>,
    },
}

fn workers() -> usize {
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("VFT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|v| *v > 0)
        .map_or(n, |cap| cap.min(n))
}

fn prover_secret(seed: u64) -> Digest {
    let mut h = Hasher::new(vft_core::digest::tag::AUDIT);
    h.str("vft-prover").u64(seed);
    h.finish()
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn mode_of(s: Sampling) -> SamplerMode {
    match s {
        Sampling::Public => SamplerMode::Public,
        Sampling::Private => SamplerMode::Private,
    }
}

fn training_split(steps: u64, epochs: u64) -> Result<u64, CliError> {
    if epochs == 0 || steps == 0 || !steps.is_multiple_of(epochs) {
        return Err(CliError::Usage(format!(
            "{steps} steps do not split into {epochs} equal epochs"
        )));
    }
    Ok(steps / epochs)
}

fn synth(
    out: PathBuf,
    manifest_out: Option<PathBuf>,
    examples: usize,
    seed: u64,
    epochs: u64,
    steps: u64,
    mode: Sampling,
) -> Result<(), CliError> {
    let mut h = Hasher::new(vft_core::digest::tag::SAMPLER);
    h.str("vft-synth").u64(seed);
    let mut m = PolicyManifest::with_model(
        vft_core::model::ModelConfig::tiny(),
        h.finish(),
        epochs,
        training_split(steps, epochs)?,
        4,
    );
    m.sampler.mode = mode_of(mode);
    let d = synthetic(&SynthConfig::new(
        examples,
        m.model.vocab_size,
        m.model.seq_len,
        seed,
    ))?;
    std::fs::write(&out, d.to_jsonl())?;
    if let Some(p) = manifest_out {
        std::fs::write(p, m.to_json() + "\n")?;
    }
    println!("{} examples written to {}", d.len(), out.display());
    Ok(())
}

fn commit(ws: &Workspace, dataset: PathBuf, manifest: PathBuf) -> Result<(), CliError> {
    let _lock = ws.lock()?;
    let m = PolicyManifest::load(&manifest)?;
    let d = Dataset::load(&dataset)?;
    d.check_policy(&m)?;
    let c = d.commitment()?;
    let publics = Publics {
        c_d: c.root(),
        h_0: initial_state(&m)?.2,
        h_pi: m.hash(),
    };
    ws.create()?;
    std::fs::write(ws.path("manifest.json"), m.to_json() + "\n")?;
    std::fs::write(ws.path("dataset.vftc"), c.to_bytes())?;
    std::fs::write(ws.path("private/dataset.jsonl"), d.to_jsonl())?;
    write_json(&ws.path("leaves.json"), &sidecar(&d))?;
    write_json(&ws.path("publics.json"), &publics)?;
    let repeat = notarize(&ws.path("notary.log"), &publics, now())?;
    println!("c_D  {}", publics.c_d);
    println!("h_0  {}", publics.h_0);
    println!("h_Pi {}", publics.h_pi);
    if repeat {
        eprintln!("note: this triple was already registered");
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    h_t: Digest,
    total_steps: u64,
    epochs: usize,
    run_depth: u32,
    /// Omitted under private sampling: per-step losses fingerprint batches.
    #[serde(skip_serializing_if = "Option::is_none")]
    losses: Option<Vec<f64>>,
}

fn train_prove(
    ws: &Workspace,
    steps: Option<u64>,
    epochs: Option<u64>,
    mode: Option<Sampling>,
    seed: u64,
) -> Result<(), CliError> {
    let _lock = ws.lock()?;
    let m = ws.manifest()?;
    let publics = ws.publics()?;
    let d = ws.dataset()?;
    if ws.commitment()?.root() != publics.c_d {
        return Err(CliError::Usage(
            "dataset.vftc does not match the registered c_D; rerun commit".into(),
        ));
    }
    let mut runtime = m.clone();
    if let Some(e) = epochs {
        runtime.training.epochs = e;
    }
    if let Some(t) = steps {
        runtime.training.steps_per_epoch = training_split(t, runtime.training.epochs)?;
    } else if epochs.is_some() {
        let t = m.total_steps();
        runtime.training.steps_per_epoch = training_split(t, runtime.training.epochs)?;
    }
    if let Some(s) = mode {
        runtime.sampler.mode = mode_of(s);
    }
    let secret = prover_secret(seed);
    let mut opts = ProverOptions::with_secret(secret);
    opts.runtime = Some(runtime);
    let a = Trainer::new(&m, &d, opts)?.run()?;
    if a.publics != publics {
        return Err(CliError::Usage(
            "registered publics do not match this workspace; rerun commit".into(),
        ));
    }
    ws.clear_run()?;
    let fmt = m.format()?;
    for t in &a.transcripts {
        std::fs::write(ws.transcript_path(t.public.step), t.to_bytes(fmt))?;
    }
    for (e, c) in a.epochs.iter().enumerate() {
        std::fs::write(ws.epoch_path(e), c.to_bytes())?;
    }
    std::fs::write(ws.path("certificates/run.vftr"), a.run.to_bytes())?;
    std::fs::write(ws.path("private/salts.vfts"), seal_salts(&a.salts, &secret))?;
    let report = TrainReport {
        h_t: a.run.h_t,
        total_steps: a.transcripts.len() as u64,
        epochs: a.epochs.len(),
        run_depth: a.run.depth,
        losses: (!m.is_private()).then(|| a.losses.clone()),
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    ws.write_report("train.json", &text)?;
    println!(
        "{} steps in {} epochs, h_T {}",
        report.total_steps, report.epochs, report.h_t
    );
    Ok(())
}

#[derive(Serialize)]
struct Failure {
    kind: &'static str,
    threat: Option<String>,
    epoch: Option<u64>,
    step: Option<u64>,
    message: String,
}

#[derive(Serialize)]
struct VerifyJson {
    accepted: bool,
    mode: &'static str,
    coverage: f64,
    h_t: Option<Digest>,
    total_steps: Option<u64>,
    audited_steps: Vec<u64>,
    timings_ms: Vec<(String, f64)>,
    failure: Option<Failure>,
}

fn verify(ws: &Workspace, mode: Audit, coverage: f64, seed: u64) -> Result<(), CliError> {
    let _lock = ws.lock()?;
    if mode == Audit::Spot && !(coverage > 0.0 && coverage <= 1.0) {
        return Err(CliError::Usage(format!("coverage {coverage} outside (0, 1]")));
    }
    let m = ws.manifest()?;
    let publics = ws.publics()?;
    let outcome = (|| -> Result<vft_core::proof::VerifyReport, CliError> {
        let meta = ws.sidecar()?;
        let side = (m.sampler.mode == SamplerMode::Public).then_some(meta.as_slice());
        let ctx = VerifyContext::new(&m, publics, side, None)?;
        let like = initial_state(&m)?.0;
        let transcripts = ws.transcripts(&like)?;
        let epochs = ws.epochs()?;
        let run = ws.run()?;
        let opts = VerifyOptions {
            coverage: match mode {
                Audit::Full => Coverage::Full,
                Audit::Spot => Coverage::Spot {
                    fraction: coverage,
                    seed,
                },
            },
            workers: workers(),
        };
        Ok(verify_run(&ctx, &run, &epochs, &transcripts, &opts)?)
    })();
    let mut report = VerifyJson {
        accepted: outcome.is_ok(),
        mode: if mode == Audit::Full { "full" } else { "spot" },
        coverage: if mode == Audit::Full { 1.0 } else { coverage },
        h_t: None,
        total_steps: None,
        audited_steps: Vec::new(),
        timings_ms: Vec::new(),
        failure: None,
    };
    match &outcome {
        Ok(r) => {
            report.h_t = Some(r.h_t);
            report.total_steps = Some(r.total_steps);
            report.audited_steps = r.audited.clone();
            report.timings_ms = r.timings.clone();
        }
        Err(CliError::Core(e)) => {
            report.failure = Some(Failure {
                kind: e.kind_name(),
                threat: e.threat().map(|t| t.to_string()),
                epoch: e.location().map(|l| l.0),
                step: e.location().map(|l| l.1),
                message: e.to_string(),
            })
        }
        Err(CliError::Usage(_)) => {}
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    ws.write_report("verify.json", &text)?;
    match outcome {
        Ok(r) => {
            println!(
                "accepted: {} of {} steps audited, h_T {}",
                r.audited.len(),
                r.total_steps,
                r.h_t
            );
            Ok(())
        }
        Err(e) => Err(e),
    }
}

#[derive(Serialize)]
struct AuditJson {
    steps: usize,
    items: usize,
    matched: bool,
}

fn audit(ws: &Workspace, seed: u64) -> Result<(), CliError> {
    let _lock = ws.lock()?;
    let m = ws.manifest()?;
    let secret = prover_secret(seed);
    let records = open_salts(&std::fs::read(ws.path("private/salts.vfts"))?, &secret)?;
    let like = initial_state(&m)?.0;
    let transcripts = ws.transcripts(&like)?;
    if !m.is_private() && records.is_empty() {
        println!("public sampling: no sealed salts to audit");
        return Ok(());
    }
    if records.len() != transcripts.len() {
        return Err(vft_core::Error::CertificateMismatch(format!(
            "{} salt records for {} transcripts",
            records.len(),
            transcripts.len()
        ))
        .into());
    }
    let mut items = 0;
    for (r, t) in records.iter().zip(&transcripts) {
        let w = t.witness.as_ref().ok_or_else(|| {
            vft_core::Error::CertificateMismatch("transcript carries no witness".into())
                .at(t.public.link.meta.epoch, t.public.step)
        })?;
        let opened: Vec<_> = w.openings.iter().map(|o| o.salt).collect();
        if r.step != t.public.step || r.transcript != w.salt || r.items != opened {
            return Err(vft_core::Error::CertificateMismatch(
                "sealed salts disagree with the transcript".into(),
            )
            .at(t.public.link.meta.epoch, t.public.step)
            .into());
        }
        items += r.items.len();
    }
    let report = AuditJson {
        steps: records.len(),
        items,
        matched: true,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    ws.write_report("audit.json", &text)?;
    println!("{} steps, {items} item salts match", report.steps);
    Ok(())
}

fn fedsim_cmd(
    ws: &Workspace,
    config: PathBuf,
    seed: Option<u64>,
    coverage: Option<f64>,
) -> Result<(), CliError> {
    let _lock = ws.lock()?;
    let mut cfg = FedConfig::from_json(&std::fs::read_to_string(&config)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(q) = coverage {
        cfg.coverage = q;
    }
    cfg.workers = cfg.workers.min(workers()).max(1);
    cfg.validate()?;
    let mut fed = Federation::new(cfg.clone())?;
    let reports = fed.run()?;
    let mut jsonl = String::new();
    for r in &reports {
        jsonl.push_str(&serde_json::to_string(r).expect("report serializes"));
        jsonl.push('\n');
    }
    ws.write_report("fedsim-rounds.jsonl", &jsonl)?;
    let detections: usize = reports.iter().map(|r| r.detections.len()).sum();
    println!(
        "{} rounds, {} detections, {} false positives",
        reports.len(),
        detections,
        reports.iter().map(|r| r.false_positives).sum::<u64>()
    );
    if cfg.trials > 0 && !cfg.anomalies.is_empty() {
        let verdicts = Federation::new(cfg.clone())?.verdicts()?;
        let csv = fedsim::summary_csv(&fedsim::sweep(&cfg, &verdicts));
        let p = ws.write_report("fedsim-summary.csv", &csv)?;
        println!("summary written to {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            out,
            manifest_out,
            examples,
            seed,
            epochs,
            steps,
            mode,
        } => synth(out, manifest_out, examples, seed, epochs, steps, mode),
        Command::Commit {
            workspace,
            dataset,
            manifest,
        } => commit(&Workspace::new(workspace), dataset, manifest),
        Command::TrainProve {
            workspace,
            steps,
            epochs,
            mode,
            seed,
        } => train_prove(&Workspace::new(workspace), steps, epochs, mode, seed),
        Command::Verify {
            workspace,
            mode,
            coverage,
            seed,
        } => verify(&Workspace::new(workspace), mode, coverage, seed),
        Command::Audit { workspace, seed } => audit(&Workspace::new(workspace), seed),
        Command::Fedsim {
            config,
            workspace,
            seed,
            coverage,
        } => fedsim_cmd(&Workspace::new(workspace), config, seed, coverage),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(c) = &e {
                if let Some((epoch, step)) = c.location() {
                    eprintln!("  at epoch {epoch}, step {step} ({})", c.kind_name());
                }
            }
            ExitCode::from(e.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::CliError;
    use vft_core::Error;

    #[test]
    fn exit_codes() {
        let core = |e: Error| CliError::Core(e).code();
        assert_eq!(CliError::Usage("x".into()).code(), 1);
        assert_eq!(core(Error::ManifestMismatch { field: "lr".into() }), 2);
        assert_eq!(core(Error::ChainBreak("gap".into()).at(0, 3)), 3);
        let quota = Error::QuotaViolation {
            bin: "medical".into(),
            count: 7,
            ceiling: 6,
        };
        assert_eq!(core(quota.at(1, 9)), 4);
        assert_eq!(core(Error::Schema("bad".into())), 1);
    }
}
