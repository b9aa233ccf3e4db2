//! Step transcripts, the prover, the verifier and recursive folding.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::error::Result;

pub mod fold;
pub mod prover;
pub mod transcript;
pub mod verify;

pub use fold::{
    ceil_log2, fold, fold_all, run_certificate, EpochCertificate, FoldNode, RunCertificate,
};
pub use prover::{initial_state, start_state, ProverOptions, RunArtifacts, Trainer};
pub use transcript::{BatchAttestation, PublicItem, PublicStep, StepTranscript, StepWitness};
pub use verify::{
    audit_set, check_link, verify_run, verify_step, Coverage, VerifyContext, VerifyOptions,
    VerifyReport,
};

/// The published triple `(c_D, h_0, h_Π)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Publics {
    pub c_d: Digest,
    pub h_0: Digest,
    pub h_pi: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotaryEntry {
    pub unix_time: u64,
    #[serde(flatten)]
    pub publics: Publics,
    /// The same triple was registered before.
    pub repeat: bool,
}

/// Appends one registration line; returns whether the triple was already
/// present.
pub fn notarize(log: &Path, publics: &Publics, unix_time: u64) -> Result<bool> {
    let repeat = match std::fs::read_to_string(log) {
        Ok(text) => text
            .lines()
            .filter_map(|l| serde_json::from_str::<NotaryEntry>(l).ok())
            .any(|e| e.publics == *publics),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
        Err(e) => return Err(e.into()),
    };
    let entry = NotaryEntry {
        unix_time,
        publics: *publics,
        repeat,
    };
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(log)?;
    writeln!(f, "{}", serde_json::to_string(&entry).expect("entry serializes"))?;
    Ok(repeat)
}
