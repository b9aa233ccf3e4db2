//! Binary folding of step transcripts into epoch and run certificates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commit::CounterOpening;
use crate::digest::{tag, Decoder, Digest, Encoder, Hasher};
use crate::error::{Error, Result};

use super::transcript::PublicStep;

/// A leaf or an internal node of the folding tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldNode {
    pub digest: Digest,
    pub h_start: Digest,
    pub h_end: Digest,
    pub first_step: u64,
    pub last_step: u64,
}

impl FoldNode {
    pub fn leaf(step: &PublicStep) -> FoldNode {
        FoldNode {
            digest: step.digest(),
            h_start: step.link.h_prev,
            h_end: step.link.h_next,
            first_step: step.step,
            last_step: step.step,
        }
    }

    fn encode(&self, e: &mut Encoder) {
        e.digest(&self.digest)
            .digest(&self.h_start)
            .digest(&self.h_end)
            .u64(self.first_step)
            .u64(self.last_step);
    }

    fn decode(d: &mut Decoder<'_>) -> Result<FoldNode> {
        Ok(FoldNode {
            digest: d.digest()?,
            h_start: d.digest()?,
            h_end: d.digest()?,
            first_step: d.u64()?,
            last_step: d.u64()?,
        })
    }
}

/// `H(0x04 ‖ left ‖ right ‖ h_start ‖ h_end)`; the boundaries must meet.
pub fn fold(left: &FoldNode, right: &FoldNode) -> Result<FoldNode> {
    if left.h_end != right.h_start {
        return Err(Error::BoundaryMismatch(format!(
            "steps {}..={} end at {} but {}..={} start at {}",
            left.first_step,
            left.last_step,
            left.h_end,
            right.first_step,
            right.last_step,
            right.h_start
        )));
    }
    if left.last_step + 1 != right.first_step {
        return Err(Error::BoundaryMismatch(format!(
            "step {} is not followed by step {}",
            left.last_step, right.first_step
        )));
    }
    let mut h = Hasher::new(tag::FOLD);
    h.digest(&left.digest)
        .digest(&right.digest)
        .digest(&left.h_start)
        .digest(&right.h_end);
    Ok(FoldNode {
        digest: h.finish(),
        h_start: left.h_start,
        h_end: right.h_end,
        first_step: left.first_step,
        last_step: right.last_step,
    })
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

/// Folds a level at a time; an odd last node is promoted unchanged. Returns
/// the root and the number of levels, `ceil(log2 n)`.
pub fn fold_all(leaves: &[FoldNode], workers: usize) -> Result<(FoldNode, u32)> {
    if leaves.is_empty() {
        return Err(Error::BoundaryMismatch("nothing to fold".into()));
    }
    let pool = pool(workers);
    let mut level = leaves.to_vec();
    let mut depth = 0;
    while level.len() > 1 {
        let next: Vec<Result<FoldNode>> = pool.install(|| {
            level
                .par_chunks(2)
                .map(|c| match c {
                    [l, r] => fold(l, r),
                    [x] => Ok(*x),
                    _ => unreachable!(),
                })
                .collect()
        });
        level = next.into_iter().collect::<Result<Vec<_>>>()?;
        depth += 1;
    }
    Ok((level[0], depth))
}

pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochCertificate {
    pub epoch: u64,
    pub root: FoldNode,
    pub depth: u32,
    pub steps: u64,
    /// Root of the salted per-bin counter commitment `c_u`.
    pub counter_root: Digest,
    pub quota_ok: bool,
    /// Disclosed counters; empty under private sampling.
    pub counters: Vec<CounterOpening>,
    pub h_pi: Digest,
    /// Fraction of steps whose witness the prover retained for audit.
    pub coverage: f64,
}

impl EpochCertificate {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_magic(b"VFTE", 1);
        e.u64(self.epoch);
        self.root.encode(&mut e);
        e.u64(self.depth as u64)
            .u64(self.steps)
            .digest(&self.counter_root)
            .u8(self.quota_ok as u8)
            .u64(self.counters.len() as u64);
        for c in &self.counters {
            e.str(&c.label).u64(c.count).bytes(&c.salt);
            c.path.encode(&mut e);
        }
        e.digest(&self.h_pi).f64(self.coverage);
        e.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EpochCertificate> {
        let (mut d, version) = Decoder::expect_magic(bytes, b"VFTE")?;
        if version != 1 {
            return Err(Error::Decode(format!("unsupported VFTE version {version}")));
        }
        let epoch = d.u64()?;
        let root = FoldNode::decode(&mut d)?;
        let depth = d.u64()? as u32;
        let steps = d.u64()?;
        let counter_root = d.digest()?;
        let quota_ok = d.u8()? != 0;
        let n = d.u64()?;
        let counters = (0..n)
            .map(|_| {
                Ok(CounterOpening {
                    label: d.string()?,
                    count: d.u64()?,
                    salt: d
                        .bytes()?
                        .try_into()
                        .map_err(|_| Error::Decode("counter salt".into()))?,
                    path: crate::commit::MerklePath::decode(&mut d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cert = EpochCertificate {
            epoch,
            root,
            depth,
            steps,
            counter_root,
            quota_ok,
            counters,
            h_pi: d.digest()?,
            coverage: d.f64()?,
        };
        d.finish()?;
        Ok(cert)
    }

    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new(tag::CERTIFICATE);
        h.update(&self.to_bytes());
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCertificate {
    pub c_d: Digest,
    pub h_0: Digest,
    pub h_pi: Digest,
    pub epochs: Vec<Digest>,
    pub root: FoldNode,
    pub h_t: Digest,
    pub total_steps: u64,
    pub depth: u32,
}

impl RunCertificate {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_magic(b"VFTR", 1);
        e.digest(&self.c_d)
            .digest(&self.h_0)
            .digest(&self.h_pi)
            .digests(&self.epochs);
        self.root.encode(&mut e);
        e.digest(&self.h_t)
            .u64(self.total_steps)
            .u64(self.depth as u64);
        e.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<RunCertificate> {
        let (mut d, version) = Decoder::expect_magic(bytes, b"VFTR")?;
        if version != 1 {
            return Err(Error::Decode(format!("unsupported VFTR version {version}")));
        }
        let cert = RunCertificate {
            c_d: d.digest()?,
            h_0: d.digest()?,
            h_pi: d.digest()?,
            epochs: d.digests()?,
            root: FoldNode::decode(&mut d)?,
            h_t: d.digest()?,
            total_steps: d.u64()?,
            depth: d.u64()? as u32,
        };
        d.finish()?;
        Ok(cert)
    }

    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new(tag::CERTIFICATE);
        h.update(&self.to_bytes());
        h.finish()
    }
}

/// Folds epoch roots into the run root; the run depth adds the epoch-level
/// folds to the deepest epoch tree.
pub fn run_certificate(
    publics: &super::Publics,
    epochs: &[EpochCertificate],
    workers: usize,
) -> Result<RunCertificate> {
    let roots: Vec<FoldNode> = epochs.iter().map(|e| e.root).collect();
    let (root, top) = fold_all(&roots, workers)?;
    if root.h_start != publics.h_0 {
        return Err(Error::BoundaryMismatch("run does not start at h_0".into()));
    }
    Ok(RunCertificate {
        c_d: publics.c_d,
        h_0: publics.h_0,
        h_pi: publics.h_pi,
        epochs: epochs.iter().map(|e| e.digest()).collect(),
        root,
        h_t: root.h_end,
        total_steps: epochs.iter().map(|e| e.steps).sum(),
        depth: epochs.iter().map(|e| e.depth).max().unwrap_or(0) + top,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: u64) -> Vec<FoldNode> {
        let h = |i: u64| Digest([i as u8; 32]);
        (0..n)
            .map(|i| FoldNode {
                digest: crate::digest::hash(tag::TRANSCRIPT, &[&i.to_le_bytes()]),
                h_start: h(i),
                h_end: h(i + 1),
                first_step: i,
                last_step: i,
            })
            .collect()
    }

    #[test]
    fn depth_law() {
        for (n, want) in [(1u64, 0u32), (2, 1), (3, 2), (10, 4), (1000, 10)] {
            let (root, depth) = fold_all(&chain(n), 2).unwrap();
            assert_eq!(depth, want, "n = {n}");
            assert_eq!(depth, ceil_log2(n));
            assert_eq!((root.first_step, root.last_step), (0, n - 1));
        }
    }

    #[test]
    fn workers_do_not_change_root() {
        let leaves = chain(37);
        let a = fold_all(&leaves, 1).unwrap();
        for w in [2, 4, 8] {
            assert_eq!(fold_all(&leaves, w).unwrap(), a);
        }
    }

    #[test]
    fn boundaries_must_meet() {
        let l = chain(4);
        let n = fold(&l[0], &l[1]).unwrap();
        assert_eq!((n.h_start, n.h_end), (l[0].h_start, l[1].h_end));
        assert!(matches!(fold(&l[0], &l[2]), Err(Error::BoundaryMismatch(_))));
        let mut gap = l.clone();
        gap.remove(2);
        assert!(matches!(fold_all(&gap, 1), Err(Error::BoundaryMismatch(_))));
    }

    #[test]
    fn node_digest_formula() {
        let l = chain(2);
        let n = fold(&l[0], &l[1]).unwrap();
        let mut bytes = vec![tag::FOLD];
        for d in [l[0].digest, l[1].digest, l[0].h_start, l[1].h_end] {
            bytes.extend_from_slice(&d.0);
        }
        use sha2::Digest as _;
        let want: [u8; 32] = sha2::Sha256::digest(&bytes).into();
        assert_eq!(n.digest.0, want);
    }

    #[test]
    fn certificate_bytes_roundtrip() {
        let (root, depth) = fold_all(&chain(5), 1).unwrap();
        let e = EpochCertificate {
            epoch: 0,
            root,
            depth,
            steps: 5,
            counter_root: Digest([3; 32]),
            quota_ok: true,
            counters: vec![],
            h_pi: Digest([4; 32]),
            coverage: 1.0,
        };
        assert_eq!(EpochCertificate::from_bytes(&e.to_bytes()).unwrap(), e);
        let r = RunCertificate {
            c_d: Digest([1; 32]),
            h_0: root.h_start,
            h_pi: e.h_pi,
            epochs: vec![e.digest()],
            root,
            h_t: root.h_end,
            total_steps: 5,
            depth,
        };
        assert_eq!(RunCertificate::from_bytes(&r.to_bytes()).unwrap(), r);
    }
}
