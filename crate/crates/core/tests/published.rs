//! Published reference values: the deployment quota table, learning-rate
//! tampering and federated audit coverage.

use vft_core::dataset::{synthetic, SynthConfig};
use vft_core::digest::Digest;
use vft_core::fedsim::{detection_probability, AnomalyKind, FedConfig, Federation};
use vft_core::manifest::PolicyManifest;
use vft_core::model::ModelConfig;
use vft_core::optim::extend_chain;
use vft_core::proof::{verify_step, ProverOptions, Trainer, VerifyContext};
use vft_core::sampler::{reference_quotas, BinMatrix, QuotaLedger, SamplerMode};
use vft_core::Error;

#[test]
fn reference_ceilings() {
    let q = reference_quotas();
    let items: Vec<(&str, u64)> = q.iter().map(|(k, v)| (k.as_str(), v.items)).collect();
    assert_eq!(
        items,
        [
            ("finance", 900),
            ("general", 12_000),
            ("medical", 600),
            ("safety", 1_800),
            ("telemetry", 300)
        ]
    );
    // Every bin at half its ceiling passes.
    let labels: Vec<String> = q.keys().cloned().collect();
    let rows: Vec<_> = labels
        .iter()
        .flat_map(|l| {
            let n = q[l].items / 2;
            (0..n).map(move |_| ([l.clone()].into(), 1u64))
        })
        .collect();
    let matrix = BinMatrix::new(labels.clone(), &rows).unwrap();
    let mut ledger = QuotaLedger::new(0, &labels);
    ledger
        .update(&(0..rows.len() as u64).collect::<Vec<_>>(), &matrix)
        .unwrap();
    ledger.check(&q).unwrap();
}

#[test]
fn doubled_learning_rate_fails_the_step() {
    let mut m = PolicyManifest::tiny(Digest([3; 32]));
    m.sampler.mode = SamplerMode::Private;
    let cfg = ModelConfig::tiny();
    let d = synthetic(&SynthConfig::new(64, cfg.vocab_size, cfg.seq_len, 4)).unwrap();
    let a = Trainer::new(&m, &d, ProverOptions::with_secret(Digest([9; 32])))
        .unwrap()
        .run()
        .unwrap();
    let ctx = VerifyContext::new(&m, a.publics, None, None).unwrap();
    for t in [3usize, 7, 12] {
        let mut tr = a.transcripts[t].clone();
        verify_step(&ctx, &tr, None).unwrap();
        let l = tr.public.link.clone();
        assert!(l.eta > 0);
        tr.public.link = extend_chain(l.h_prev, l.delta_digest, 2 * l.eta, l.meta);
        let err = verify_step(&ctx, &tr, None).unwrap_err();
        assert!(
            matches!(err, Error::ConstraintViolation { .. }),
            "step {t}: {err}"
        );
    }
}

#[test]
fn audit_coverage_table() {
    // 200 clients, 25 steps each, one tampering client per round.
    let total = 200 * 25;
    assert!(detection_probability(0.10, total, 25, 2) > 0.99);
    assert!(detection_probability(0.20, total, 25, 2) > 0.9999);
    assert!(detection_probability(0.05, total, 25, 3) > 0.95);
}

#[test]
fn simulated_coverage_sweep_has_one_row_per_level() {
    let cfg = FedConfig {
        clients: 12,
        alpha: 0.3,
        rounds: 2,
        coverage: 0.1,
        steps_per_round: 3,
        batch_size: 1,
        examples: 0,
        anomalies: vec![vft_core::fedsim::Anomaly {
            client: 4,
            kind: AnomalyKind::LrTamper,
            round: 0,
        }],
        seed: 5,
        trials: 500,
        coverage_grid: vec![0.05, 0.10, 0.20],
        workers: 1,
    };
    let fed = Federation::new(cfg.clone()).unwrap();
    let verdicts = fed.verdicts().unwrap();
    let rows = vft_core::fedsim::sweep(&cfg, &verdicts);
    let csv = vft_core::fedsim::summary_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "coverage,rounds,lr_tamper_rate,lr_tamper_analytic");
    assert_eq!(lines.len(), 4);
    for (line, q) in lines[1..].iter().zip(["0.05", "0.1", "0.2"]) {
        assert!(line.starts_with(&format!("{q},2,")), "{line}");
    }
}
