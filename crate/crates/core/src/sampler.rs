//! Batch selection (replayable public mode, salted private mode), per-epoch
//! quota ledgers and the quota check.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::commit::{CounterCommitment, DatasetCommitment, MerklePath, Salt};
use crate::digest::{tag, Digest, Hasher};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Public,
    Private,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerDescriptor {
    pub mode: SamplerMode,
    pub seed: Digest,
    pub batch_size: u64,
    pub replacement: bool,
    /// Shuffling policy id. Only per-batch derivation is defined.
    pub shuffle: String,
    /// Skip candidates that would push a bin past its ceiling.
    pub quota_aware: bool,
}

impl SamplerDescriptor {
    pub fn public(seed: Digest, batch_size: u64) -> SamplerDescriptor {
        SamplerDescriptor {
            mode: SamplerMode::Public,
            seed,
            batch_size,
            replacement: false,
            shuffle: "per_batch".into(),
            quota_aware: true,
        }
    }
}

/// Uniform indices in `[0, n)` from `H(0x05 ‖ s ‖ LE64(t) ‖ LE64(ctr))`, with
/// rejection of the biased top range.
#[derive(Debug, Clone)]
pub struct CandidateStream {
    seed: Digest,
    step: u64,
    ctr: u64,
    n: u64,
    zone: u64,
}

impl CandidateStream {
    pub fn new(seed: Digest, step: u64, n: u64) -> CandidateStream {
        assert!(n > 0, "empty universe");
        // Largest multiple of n representable; values at or above it are rejected.
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        CandidateStream {
            seed,
            step,
            ctr: 0,
            n,
            zone,
        }
    }

    pub fn raw(seed: &Digest, step: u64, ctr: u64) -> u64 {
        let mut h = Hasher::new(tag::SAMPLER);
        h.digest(seed).u64(step).u64(ctr);
        let d = h.finish();
        u64::from_le_bytes(d.0[..8].try_into().unwrap())
    }
}

impl Iterator for CandidateStream {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        loop {
            let x = CandidateStream::raw(&self.seed, self.step, self.ctr);
            self.ctr += 1;
            if x < self.zone || self.zone == u64::MAX {
                return Some(x % self.n);
            }
        }
    }
}

/// Per-example bin memberships and token counts (the incidence matrix `M`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinMatrix {
    labels: Vec<String>,
    tags: Vec<Vec<usize>>,
    tokens: Vec<u64>,
}

impl BinMatrix {
    pub fn new(labels: Vec<String>, examples: &[(BTreeSet<String>, u64)]) -> Result<BinMatrix> {
        let tags = examples
            .iter()
            .map(|(set, _)| {
                set.iter()
                    .map(|t| {
                        labels
                            .iter()
                            .position(|l| l == t)
                            .ok_or_else(|| Error::UnknownBin(t.clone()))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BinMatrix {
            labels,
            tags,
            tokens: examples.iter().map(|(_, n)| *n).collect(),
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn bins_of(&self, example: usize) -> impl Iterator<Item = &str> {
        self.tags[example].iter().map(|i| self.labels[*i].as_str())
    }

    pub fn tokens_of(&self, example: usize) -> u64 {
        self.tokens[example]
    }

    pub fn examples_in(&self, bin: &str) -> Vec<usize> {
        (0..self.len())
            .filter(|i| self.bins_of(*i).any(|b| b == bin))
            .collect()
    }
}

/// Per-epoch ceilings for one bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quota {
    pub items: u64,
    pub tokens: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCount {
    pub items: u64,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuotaLedger {
    epoch: u64,
    closed: bool,
    counts: BTreeMap<String, BinCount>,
}

impl QuotaLedger {
    pub fn new(epoch: u64, labels: &[String]) -> QuotaLedger {
        QuotaLedger {
            epoch,
            closed: false,
            counts: labels
                .iter()
                .map(|l| (l.clone(), BinCount::default()))
                .collect(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn counts(&self) -> &BTreeMap<String, BinCount> {
        &self.counts
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Adds one selection. Each example counts once in every bin it is tagged with.
    pub fn update(&mut self, selection: &[u64], m: &BinMatrix) -> Result<()> {
        if self.closed {
            return Err(Error::EpochClosed(self.epoch));
        }
        for idx in selection {
            let i = *idx as usize;
            if i >= m.len() {
                return Err(Error::IndexOutOfRange {
                    index: *idx,
                    len: m.len() as u64,
                });
            }
            for b in m.bins_of(i) {
                let c = self
                    .counts
                    .get_mut(b)
                    .ok_or_else(|| Error::UnknownBin(b.to_string()))?;
                c.items += 1;
                c.tokens += m.tokens_of(i);
            }
        }
        Ok(())
    }

    /// `Σ M e_t ⪯ γ`, inclusive, items then tokens.
    pub fn check(&self, quotas: &BTreeMap<String, Quota>) -> Result<()> {
        for (bin, c) in &self.counts {
            let q = quotas
                .get(bin)
                .ok_or_else(|| Error::Schema(format!("quota missing for bin `{bin}`")))?;
            if c.items > q.items {
                return Err(Error::QuotaViolation {
                    bin: bin.clone(),
                    count: c.items,
                    ceiling: q.items,
                });
            }
            if c.tokens > q.tokens {
                return Err(Error::QuotaViolation {
                    bin: format!("{bin}:tokens"),
                    count: c.tokens,
                    ceiling: q.tokens,
                });
            }
        }
        Ok(())
    }

    /// Would adding `example` (on top of `pending`) stay within every ceiling?
    fn admits(
        &self,
        pending: &BTreeMap<String, BinCount>,
        example: usize,
        m: &BinMatrix,
        quotas: &BTreeMap<String, Quota>,
    ) -> bool {
        m.bins_of(example).all(|b| {
            let base = self.counts.get(b).copied().unwrap_or_default();
            let p = pending.get(b).copied().unwrap_or_default();
            match quotas.get(b) {
                Some(q) => {
                    base.items + p.items < q.items
                        && base.tokens + p.tokens + m.tokens_of(example) <= q.tokens
                }
                None => false,
            }
        })
    }

    /// Counter labels and values committed under `c_u`.
    pub fn counter_values(&self) -> BTreeMap<String, u64> {
        self.counts
            .iter()
            .flat_map(|(b, c)| [(format!("{b}.items"), c.items), (format!("{b}.tokens"), c.tokens)])
            .collect()
    }

    /// Commits the counters with salts derived from `secret`.
    pub fn commit(&self, secret: &Digest) -> Result<CounterCommitment> {
        let values = self.counter_values();
        let salts = values
            .keys()
            .map(|k| (k.clone(), counter_salt(secret, self.epoch, k)))
            .collect();
        CounterCommitment::commit(&values, &salts)
    }
}

pub fn counter_salt(secret: &Digest, epoch: u64, label: &str) -> Salt {
    let mut h = Hasher::new(tag::COUNTER);
    h.str("salt").digest(secret).u64(epoch).str(label);
    h.finish().0[..16].try_into().unwrap()
}

/// Maps a position in the sampling universe to a dataset index.
#[derive(Debug, Clone, Copy)]
pub enum Universe<'a> {
    /// The whole dataset, `[0, n)`.
    All(u64),
    /// A client shard: positions index into this list.
    Shard(&'a [u64]),
}

impl Universe<'_> {
    pub fn len(&self) -> u64 {
        match self {
            Universe::All(n) => *n,
            Universe::Shard(s) => s.len() as u64,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn map(&self, pos: u64) -> u64 {
        match self {
            Universe::All(_) => pos,
            Universe::Shard(s) => s[pos as usize],
        }
    }
}

/// Quota filter for batch derivation.
pub struct QuotaFilter<'a> {
    pub ledger: &'a QuotaLedger,
    pub matrix: &'a BinMatrix,
    pub quotas: &'a BTreeMap<String, Quota>,
}

/// Selects `n` indices from an iterator of universe positions.
fn select(
    candidates: impl Iterator<Item = u64>,
    n: u64,
    universe: Universe<'_>,
    replacement: bool,
    filter: Option<&QuotaFilter<'_>>,
) -> Result<Vec<u64>> {
    let size = universe.len();
    if size == 0 {
        return Err(Error::EmptyDataset);
    }
    if n > size && !replacement {
        return Err(Error::BatchTooLarge {
            batch: n,
            universe: size,
        });
    }
    let budget = 64 * size + 64 * n + 1024;
    let mut out = Vec::with_capacity(n as usize);
    let mut seen = BTreeSet::new();
    let mut pending: BTreeMap<String, BinCount> = BTreeMap::new();
    for (tries, pos) in candidates.enumerate() {
        if out.len() as u64 == n {
            break;
        }
        if tries as u64 >= budget {
            return Err(Error::Schema(format!(
                "sampler could not fill a batch of {n} within quota"
            )));
        }
        let idx = universe.map(pos);
        if !replacement && seen.contains(&idx) {
            continue;
        }
        if let Some(f) = filter {
            if !f.ledger.admits(&pending, idx as usize, f.matrix, f.quotas) {
                continue;
            }
            for b in f.matrix.bins_of(idx as usize) {
                let c = pending.entry(b.to_string()).or_default();
                c.items += 1;
                c.tokens += f.matrix.tokens_of(idx as usize);
            }
        }
        seen.insert(idx);
        out.push(idx);
    }
    out.sort_unstable();
    Ok(out)
}

/// Replayable batch `I_t` for step `t`, sorted.
pub fn derive_public_batch(
    seed: &Digest,
    t: u64,
    n: u64,
    universe: Universe<'_>,
    replacement: bool,
    filter: Option<&QuotaFilter<'_>>,
) -> Result<Vec<u64>> {
    if universe.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stream = CandidateStream::new(*seed, t, universe.len());
    select(stream, n, universe, replacement, filter)
}

pub fn batch_item_commitment(salt: &Salt, leaf: &Digest) -> Digest {
    let mut h = Hasher::new(tag::BATCH_ITEM);
    h.update(salt).digest(leaf);
    h.finish()
}

/// Commitment over the salted per-item commitments, sorted so the order of
/// selection leaks nothing.
pub fn private_batch_commitment(items: &[Digest]) -> Digest {
    let mut sorted = items.to_vec();
    sorted.sort_unstable();
    let mut h = Hasher::new(tag::BATCH);
    h.u64(sorted.len() as u64);
    for d in &sorted {
        h.digest(d);
    }
    h.finish()
}

/// Commitment to a public batch: the sorted index list and leaf digests.
pub fn public_batch_commitment(indices: &[u64], leaves: &[Digest]) -> Digest {
    let mut h = Hasher::new(tag::BATCH);
    h.u64(indices.len() as u64);
    for (i, d) in indices.iter().zip(leaves) {
        h.u64(*i).digest(d);
    }
    h.finish()
}

/// One opened element of a private batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchOpening {
    pub index: u64,
    #[serde(with = "crate::commit::hex_salt")]
    pub salt: Salt,
    pub leaf: Digest,
    pub path: MerklePath,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrivateBatch {
    pub indices: Vec<u64>,
    pub commitment: Digest,
    pub openings: Vec<BatchOpening>,
}

/// Hidden batch drawn with the prover's own randomness.
pub fn draw_private_batch<R: RngCore>(
    rng: &mut R,
    n: u64,
    universe: Universe<'_>,
    replacement: bool,
    dataset: &DatasetCommitment,
    filter: Option<&QuotaFilter<'_>>,
) -> Result<PrivateBatch> {
    if universe.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let size = universe.len();
    let stream = std::iter::repeat_with(|| rng.random_range(0..size));
    let indices = select(stream, n, universe, replacement, filter)?;
    let mut openings = Vec::with_capacity(indices.len());
    for idx in &indices {
        let mut salt = [0u8; 16];
        rng.fill_bytes(&mut salt);
        openings.push(BatchOpening {
            index: *idx,
            salt,
            leaf: dataset.leaf_digest(*idx)?,
            path: dataset.open(*idx)?,
        });
    }
    let items: Vec<Digest> = openings
        .iter()
        .map(|o| batch_item_commitment(&o.salt, &o.leaf))
        .collect();
    Ok(PrivateBatch {
        indices,
        commitment: private_batch_commitment(&items),
        openings,
    })
}

/// Checks a set of openings against `c_D` and a private batch commitment.
pub fn verify_private_openings(
    root: &Digest,
    commitment: &Digest,
    openings: &[BatchOpening],
) -> Result<()> {
    for o in openings {
        if o.path.leaf_index != o.index || !crate::commit::verify_membership(root, &o.leaf, &o.path)
        {
            return Err(Error::OutOfPolicyBatch(format!(
                "index {} is not a committed leaf",
                o.index
            )));
        }
    }
    let items: Vec<Digest> = openings
        .iter()
        .map(|o| batch_item_commitment(&o.salt, &o.leaf))
        .collect();
    if private_batch_commitment(&items) != *commitment {
        return Err(Error::OutOfPolicyBatch(
            "openings do not match the batch commitment".into(),
        ));
    }
    Ok(())
}

/// Prover-local salts for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaltRecord {
    pub step: u64,
    pub transcript: Salt,
    pub items: Vec<Salt>,
}

const SALT_MAGIC: &[u8; 4] = b"VFTS";

fn salt_key(key: &Digest, label: &str) -> Digest {
    let mut h = Hasher::new(tag::AUDIT);
    h.str(label).digest(key);
    h.finish()
}

/// Encrypts salt records at rest: ChaCha20 under a key derived from `key`,
/// with a nonce derived from the plaintext and a keyed integrity tag.
pub fn seal_salts(records: &[SaltRecord], key: &Digest) -> Vec<u8> {
    use chacha20::cipher::{KeyIvInit, StreamCipher};

    let mut body = crate::digest::Encoder::new();
    body.u64(records.len() as u64);
    for r in records {
        body.u64(r.step).bytes(&r.transcript).u64(r.items.len() as u64);
        for s in &r.items {
            body.bytes(s);
        }
    }
    let mut buf = body.into_bytes();
    let mut h = Hasher::new(tag::AUDIT);
    h.str("vfts-nonce").digest(key).bytes(&buf);
    let nonce: [u8; 12] = h.finish().0[..12].try_into().unwrap();
    let enc = salt_key(key, "vfts-enc");
    chacha20::ChaCha20::new(&enc.0.into(), &nonce.into()).apply_keystream(&mut buf);
    let mut mac = Hasher::new(tag::AUDIT);
    mac.digest(&salt_key(key, "vfts-mac")).update(&nonce).bytes(&buf);
    let mut e = crate::digest::Encoder::with_magic(SALT_MAGIC, 1);
    e.bytes(&nonce).bytes(&buf).digest(&mac.finish());
    e.into_bytes()
}

pub fn open_salts(bytes: &[u8], key: &Digest) -> Result<Vec<SaltRecord>> {
    use chacha20::cipher::{KeyIvInit, StreamCipher};

    let (mut d, version) = crate::digest::Decoder::expect_magic(bytes, SALT_MAGIC)?;
    if version != 1 {
        return Err(Error::Decode(format!("unsupported salt file version {version}")));
    }
    let nonce: [u8; 12] = d
        .bytes()?
        .try_into()
        .map_err(|_| Error::Decode("salt file nonce".into()))?;
    let mut buf = d.bytes()?.to_vec();
    let tag_got = d.digest()?;
    d.finish()?;
    let mut mac = Hasher::new(tag::AUDIT);
    mac.digest(&salt_key(key, "vfts-mac")).update(&nonce).bytes(&buf);
    if mac.finish() != tag_got {
        return Err(Error::Decode("salt file fails authentication".into()));
    }
    let enc = salt_key(key, "vfts-enc");
    chacha20::ChaCha20::new(&enc.0.into(), &nonce.into()).apply_keystream(&mut buf);
    let mut d = crate::digest::Decoder::new(&buf);
    let take = |d: &mut crate::digest::Decoder<'_>| -> Result<Salt> {
        d.bytes()?
            .try_into()
            .map_err(|_| Error::Decode("salt must be 16 bytes".into()))
    };
    let n = d.u64()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let step = d.u64()?;
        let transcript = take(&mut d)?;
        let k = d.u64()?;
        let items = (0..k).map(|_| take(&mut d)).collect::<Result<Vec<_>>>()?;
        out.push(SaltRecord {
            step,
            transcript,
            items,
        });
    }
    d.finish()?;
    Ok(out)
}

/// The quota ceilings from the reference deployment (per epoch).
pub fn reference_quotas() -> BTreeMap<String, Quota> {
    [
        ("general", 12_000, 16_000_000),
        ("safety", 1_800, 2_400_000),
        ("medical", 600, 800_000),
        ("finance", 900, 1_200_000),
        ("telemetry", 300, 400_000),
    ]
    .into_iter()
    .map(|(b, items, tokens)| (b.to_string(), Quota { items, tokens }))
    .collect()
}
