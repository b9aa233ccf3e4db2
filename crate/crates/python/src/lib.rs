//! Python bindings: fixed-point helpers, audit arithmetic and an in-memory
//! tiny run that can be verified, spot-checked and tampered with.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIndexError};
use pyo3::prelude::*;

use vft_core::dataset::{sidecar, synthetic, LeafMeta, SynthConfig};
use vft_core::fedsim;
use vft_core::manifest::PolicyManifest;
use vft_core::optim::extend_chain;
use vft_core::proof::{
    verify_run, verify_step, Coverage, ProverOptions, RunArtifacts, Trainer, VerifyContext, VerifyOptions,
};
use vft_core::sampler::SamplerMode;
use vft_core::{Digest, FxpFormat};

create_exception!(vft, VftError, PyException);

fn py_err(e: vft_core::Error) -> PyErr {
    let loc = e
        .location()
        .map(|(epoch, step)| format!(" at epoch {epoch} step {step}"))
        .unwrap_or_default();
    let threat = e.threat().map(|t| format!(" [{t}]")).unwrap_or_default();
    VftError::new_err(format!("{}{loc}{threat}: {e}", e.kind_name()))
}

/// Raw integer for `x` in the signed `(int_bits, frac_bits)` format.
#[pyfunction]
#[pyo3(signature = (x, int_bits = 14, frac_bits = 14))]
fn quantize(x: f64, int_bits: u8, frac_bits: u8) -> PyResult<i64> {
    let fmt = FxpFormat::new(int_bits, frac_bits).map_err(py_err)?;
    fmt.quantize(x).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (raw, int_bits = 14, frac_bits = 14))]
fn dequantize(raw: i64, int_bits: u8, frac_bits: u8) -> PyResult<f64> {
    let fmt = FxpFormat::new(int_bits, frac_bits).map_err(py_err)?;
    Ok(fmt.dequantize(raw))
}

/// Probability that spot checks at coverage `q` catch at least one of
/// `tampered` out of `total` steps within `rounds` rounds.
#[pyfunction]
fn detection_probability(q: f64, total: u64, tampered: u64, rounds: u32) -> f64 {
    fedsim::detection_probability(q, total, tampered, rounds)
}

/// A completed run of the tiny model held in memory.
#[pyclass(module = "vft")]
struct TinyRun {
    manifest: PolicyManifest,
    artifacts: RunArtifacts,
    leaves: Vec<LeafMeta>,
}

impl TinyRun {
    fn context(&self) -> PyResult<VerifyContext> {
        // Public sampling is replayed from the leaf metadata.
        let side = (!self.manifest.is_private()).then_some(self.leaves.as_slice());
        VerifyContext::new(&self.manifest, self.artifacts.publics, side, None).map_err(py_err)
    }
}

#[pymethods]
impl TinyRun {
    #[new]
    #[pyo3(signature = (examples = 64, seed = 4, private = false))]
    fn new(examples: usize, seed: u64, private: bool) -> PyResult<TinyRun> {
        let mut manifest = PolicyManifest::tiny(Digest([3; 32]));
        if private {
            manifest.sampler.mode = SamplerMode::Private;
        }
        let cfg = &manifest.model;
        let data = synthetic(&SynthConfig::new(examples, cfg.vocab_size, cfg.seq_len, seed))
            .map_err(py_err)?;
        let mut secret = [0u8; 32];
        secret[..8].copy_from_slice(&seed.to_le_bytes());
        let artifacts = Trainer::new(&manifest, &data, ProverOptions::with_secret(Digest(secret)))
            .and_then(Trainer::run)
            .map_err(py_err)?;
        Ok(TinyRun {
            manifest,
            artifacts,
            leaves: sidecar(&data),
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.artifacts.transcripts.len()
    }

    /// `(c_D, h_0, h_Pi)` as hex strings.
    #[getter]
    fn publics(&self) -> (String, String, String) {
        let p = &self.artifacts.publics;
        (p.c_d.to_hex(), p.h_0.to_hex(), p.h_pi.to_hex())
    }

    /// Final chain head.
    #[getter]
    fn head(&self) -> String {
        self.artifacts.run.h_t.to_hex()
    }

    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.artifacts.losses.clone()
    }

    /// Verifies the run and returns the audited step ids. Spot checking is
    /// used when `coverage` is given.
    #[pyo3(signature = (coverage = None, seed = 0))]
    fn verify(&self, coverage: Option<f64>, seed: u64) -> PyResult<Vec<u64>> {
        let a = &self.artifacts;
        let ctx = self.context()?;
        let opts = VerifyOptions {
            coverage: match coverage {
                Some(fraction) => Coverage::Spot { fraction, seed },
                None => Coverage::Full,
            },
            workers: 1,
        };
        let report =
            verify_run(&ctx, &a.run, &a.epochs, &a.transcripts, &opts).map_err(py_err)?;
        Ok(report.audited)
    }

    /// Re-executes a single step from its witness.
    fn verify_step(&self, step: usize) -> PyResult<()> {
        let tr = self
            .artifacts
            .transcripts
            .get(step)
            .ok_or_else(|| PyIndexError::new_err(format!("no step {step}")))?;
        verify_step(&self.context()?, tr, None).map_err(py_err)
    }

    /// Rewrites the chain link of `step` as if the learning rate had been
    /// multiplied by `factor`.
    #[pyo3(signature = (step, factor = 2))]
    fn tamper_lr(&mut self, step: usize, factor: i64) -> PyResult<()> {
        let tr = self
            .artifacts
            .transcripts
            .get_mut(step)
            .ok_or_else(|| PyIndexError::new_err(format!("no step {step}")))?;
        let l = tr.public.link.clone();
        tr.public.link = extend_chain(l.h_prev, l.delta_digest, factor * l.eta, l.meta);
        Ok(())
    }
}

#[pymodule]
fn vft(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VftError", m.py().get_type::<VftError>())?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(dequantize, m)?)?;
    m.add_function(wrap_pyfunction!(detection_probability, m)?)?;
    m.add_class::<TinyRun>()?;
    Ok(())
}
