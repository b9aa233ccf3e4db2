//! On-disk layout of a run workspace.
//!
//! ```text
//! manifest.json      committed policy manifest
//! publics.json       (c_D, h_0, h_Pi)
//! dataset.vftc       dataset commitment tree
//! leaves.json        per-leaf public metadata (tags, token counts)
//! notary.log         one JSON line per registration
//! transcripts/       step-NNNNNN.vftt
//! certificates/      epoch-NNNN.vfte, run.vftr
//! reports/           JSON/CSV reports, never salts or private indices
//! private/           prover-local: dataset.jsonl, salts.vfts
//! ```

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use vft_core::commit::DatasetCommitment;
use vft_core::dataset::{Dataset, LeafMeta};
use vft_core::manifest::PolicyManifest;
use vft_core::model::Adapters;
use vft_core::proof::{EpochCertificate, Publics, RunCertificate, StepTranscript};

use crate::CliError;

pub struct Workspace {
    root: PathBuf,
}

/// Held for the lifetime of a command; removed on drop.
pub struct Lock {
    path: PathBuf,
    _file: File,
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Workspace {
        Workspace { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn create(&self) -> Result<(), CliError> {
        for d in ["transcripts", "certificates", "reports", "private"] {
            fs::create_dir_all(self.path(d))?;
        }
        Ok(())
    }

    pub fn lock(&self) -> Result<Lock, CliError> {
        fs::create_dir_all(&self.root)?;
        let path = self.path(".lock");
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => CliError::Usage(format!(
                    "workspace {} is in use (remove {} if no command is running)",
                    self.root.display(),
                    path.display()
                )),
                _ => e.into(),
            })?;
        Ok(Lock { path, _file: file })
    }

    pub fn manifest(&self) -> Result<PolicyManifest, CliError> {
        Ok(PolicyManifest::load(&self.path("manifest.json"))?)
    }

    pub fn publics(&self) -> Result<Publics, CliError> {
        read_json(&self.path("publics.json"))
    }

    pub fn sidecar(&self) -> Result<Vec<LeafMeta>, CliError> {
        read_json(&self.path("leaves.json"))
    }

    pub fn dataset(&self) -> Result<Dataset, CliError> {
        Ok(Dataset::load(&self.path("private/dataset.jsonl"))?)
    }

    pub fn commitment(&self) -> Result<DatasetCommitment, CliError> {
        Ok(DatasetCommitment::from_bytes(&fs::read(
            self.path("dataset.vftc"),
        )?)?)
    }

    pub fn transcript_path(&self, step: u64) -> PathBuf {
        self.path(&format!("transcripts/step-{step:06}.vftt"))
    }

    pub fn epoch_path(&self, epoch: usize) -> PathBuf {
        self.path(&format!("certificates/epoch-{epoch:04}.vfte"))
    }

    /// Removes artifacts of an earlier run.
    pub fn clear_run(&self) -> Result<(), CliError> {
        for d in ["transcripts", "certificates"] {
            let p = self.path(d);
            if p.exists() {
                fs::remove_dir_all(&p)?;
            }
            fs::create_dir_all(&p)?;
        }
        Ok(())
    }

    /// Transcripts in step order, decoded against the adapter layout.
    pub fn transcripts(&self, like: &Adapters) -> Result<Vec<StepTranscript>, CliError> {
        sorted(&self.path("transcripts"), "vftt")?
            .iter()
            .map(|p| Ok(StepTranscript::from_bytes(&fs::read(p)?, like)?))
            .collect()
    }

    pub fn epochs(&self) -> Result<Vec<EpochCertificate>, CliError> {
        sorted(&self.path("certificates"), "vfte")?
            .iter()
            .map(|p| Ok(EpochCertificate::from_bytes(&fs::read(p)?)?))
            .collect()
    }

    pub fn run(&self) -> Result<RunCertificate, CliError> {
        Ok(RunCertificate::from_bytes(&fs::read(
            self.path("certificates/run.vftr"),
        )?)?)
    }

    pub fn write_report(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let p = self.path(&format!("reports/{name}"));
        fs::create_dir_all(self.path("reports"))?;
        fs::write(&p, contents)?;
        Ok(p)
    }
}

fn sorted(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    out.retain(|p| p.extension().is_some_and(|e| e == ext));
    out.sort();
    Ok(out)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
