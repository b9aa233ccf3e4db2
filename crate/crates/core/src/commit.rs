//! Dataset Merkle commitments, salted counter commitments and state digests.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::digest::{tag, Decoder, Digest, Encoder, Hasher};
use crate::error::{Error, Result};

/// One committed training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleLeaf {
    /// Tokenized example (byte-level tokens).
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub source_id: String,
    pub license_id: String,
    pub proc_digest: Digest,
    pub policy_tags: BTreeSet<String>,
}

impl ExampleLeaf {
    pub fn encode(&self, e: &mut Encoder) {
        e.bytes(&self.payload)
            .str(&self.source_id)
            .str(&self.license_id)
            .digest(&self.proc_digest)
            .u64(self.policy_tags.len() as u64);
        for t in &self.policy_tags {
            e.str(t);
        }
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<ExampleLeaf> {
        let payload = d.bytes()?.to_vec();
        let source_id = d.string()?;
        let license_id = d.string()?;
        let proc_digest = d.digest()?;
        let n = d.u64()?;
        let mut policy_tags = BTreeSet::new();
        for _ in 0..n {
            policy_tags.insert(d.string()?);
        }
        Ok(ExampleLeaf {
            payload,
            source_id,
            license_id,
            proc_digest,
            policy_tags,
        })
    }

    pub fn digest(&self) -> Digest {
        let mut e = Encoder::new();
        self.encode(&mut e);
        let mut h = Hasher::new(tag::LEAF);
        h.update(e.as_slice());
        h.finish()
    }

    pub fn token_count(&self) -> u64 {
        self.payload.len() as u64
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

pub fn node_hash(left: &Digest, right: &Digest) -> Digest {
    let mut h = Hasher::new(tag::NODE);
    h.digest(left).digest(right);
    h.finish()
}

/// Which side of the running hash a sibling sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerklePath {
    pub leaf_index: u64,
    pub siblings: Vec<(Digest, Side)>,
}

impl MerklePath {
    pub fn encode(&self, e: &mut Encoder) {
        e.u64(self.leaf_index).u64(self.siblings.len() as u64);
        for (d, s) in &self.siblings {
            e.digest(d).u8(matches!(s, Side::Right) as u8);
        }
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<MerklePath> {
        let leaf_index = d.u64()?;
        let n = d.u64()?;
        if n > 64 {
            return Err(Error::Decode("merkle path too long".into()));
        }
        let siblings = (0..n)
            .map(|_| {
                let dg = d.digest()?;
                let side = match d.u8()? {
                    0 => Side::Left,
                    1 => Side::Right,
                    x => return Err(Error::Decode(format!("bad side {x}"))),
                };
                Ok((dg, side))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MerklePath {
            leaf_index,
            siblings,
        })
    }
}

/// Binary Merkle tree. Odd levels duplicate their last digest; a single leaf
/// is still hashed once with itself so every path has at least one sibling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleTree {
    levels: Vec<Vec<Digest>>,
}

impl MerkleTree {
    pub fn from_leaves(leaves: Vec<Digest>) -> Result<MerkleTree> {
        if leaves.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut levels = vec![leaves];
        loop {
            let cur = levels.last().unwrap();
            if cur.len() == 1 && levels.len() > 1 {
                break;
            }
            let next = cur
                .chunks(2)
                .map(|c| node_hash(&c[0], c.get(1).unwrap_or(&c[0])))
                .collect();
            levels.push(next);
        }
        Ok(MerkleTree { levels })
    }

    pub fn root(&self) -> Digest {
        self.levels.last().unwrap()[0]
    }

    pub fn leaf_count(&self) -> u64 {
        self.levels[0].len() as u64
    }

    pub fn leaves(&self) -> &[Digest] {
        &self.levels[0]
    }

    pub fn levels(&self) -> &[Vec<Digest>] {
        &self.levels
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn open(&self, index: u64) -> Result<MerklePath> {
        let len = self.leaf_count();
        if index >= len {
            return Err(Error::IndexOutOfRange { index, len });
        }
        let mut i = index as usize;
        let siblings = self.levels[..self.levels.len() - 1]
            .iter()
            .map(|level| {
                let (sib, side) = if i.is_multiple_of(2) {
                    (*level.get(i + 1).unwrap_or(&level[i]), Side::Right)
                } else {
                    (level[i - 1], Side::Left)
                };
                i /= 2;
                (sib, side)
            })
            .collect();
        Ok(MerklePath {
            leaf_index: index,
            siblings,
        })
    }
}

/// Sides must agree with the bits of the claimed index, which binds the
/// index as well as the leaf.
pub fn verify_membership(root: &Digest, leaf: &Digest, path: &MerklePath) -> bool {
    if path.siblings.is_empty() || path.siblings.len() > 64 {
        return false;
    }
    let mut acc = *leaf;
    for (level, (sib, side)) in path.siblings.iter().enumerate() {
        let bit = (path.leaf_index >> level) & 1;
        acc = match (side, bit) {
            (Side::Right, 0) => node_hash(&acc, sib),
            (Side::Left, 1) => node_hash(sib, &acc),
            _ => return false,
        };
    }
    (path.siblings.len() == 64 || path.leaf_index >> path.siblings.len() == 0) && acc == *root
}

/// `c_D` together with the stored tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetCommitment {
    tree: MerkleTree,
}

impl DatasetCommitment {
    pub fn build(leaves: &[ExampleLeaf]) -> Result<DatasetCommitment> {
        use rayon::prelude::*;
        let digests = leaves.par_iter().map(ExampleLeaf::digest).collect();
        Ok(DatasetCommitment {
            tree: MerkleTree::from_leaves(digests)?,
        })
    }

    pub fn from_digests(digests: Vec<Digest>) -> Result<DatasetCommitment> {
        Ok(DatasetCommitment {
            tree: MerkleTree::from_leaves(digests)?,
        })
    }

    pub fn root(&self) -> Digest {
        self.tree.root()
    }

    pub fn leaf_count(&self) -> u64 {
        self.tree.leaf_count()
    }

    pub fn leaf_digest(&self, index: u64) -> Result<Digest> {
        self.tree
            .leaves()
            .get(index as usize)
            .copied()
            .ok_or(Error::IndexOutOfRange {
                index,
                len: self.leaf_count(),
            })
    }

    pub fn tree(&self) -> &MerkleTree {
        &self.tree
    }

    pub fn open(&self, index: u64) -> Result<MerklePath> {
        self.tree.open(index)
    }

    /// `VFTC` file: leaf count, then every level from the leaves up.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_magic(b"VFTC", 1);
        e.u64(self.leaf_count()).u64(self.tree.levels.len() as u64);
        for level in &self.tree.levels {
            e.digests(level);
        }
        e.into_bytes()
    }

    /// Parses and rebuilds from the leaf level; rejects inconsistent files.
    pub fn from_bytes(bytes: &[u8]) -> Result<DatasetCommitment> {
        let (mut d, version) = Decoder::expect_magic(bytes, b"VFTC")?;
        if version != 1 {
            return Err(Error::Decode(format!("unsupported VFTC version {version}")));
        }
        let n = d.u64()?;
        let nlevels = d.u64()?;
        if nlevels == 0 || nlevels > 65 {
            return Err(Error::Decode("bad level count".into()));
        }
        let levels = (0..nlevels)
            .map(|_| d.digests())
            .collect::<Result<Vec<_>>>()?;
        d.finish()?;
        if levels[0].len() as u64 != n {
            return Err(Error::Decode("leaf count mismatch".into()));
        }
        let tree = MerkleTree::from_leaves(levels[0].clone())?;
        if tree.levels != levels {
            return Err(Error::Decode("stored levels do not match leaves".into()));
        }
        Ok(DatasetCommitment { tree })
    }
}

pub type Salt = [u8; 16];

pub fn counter_leaf(label: &str, count: u64, salt: &Salt) -> Digest {
    let mut h = Hasher::new(tag::COUNTER);
    h.str(label).u64(count).update(salt);
    h.finish()
}

/// Per-label salted counters under a Merkle root `c_u`. Labels are kept in
/// sorted order so the leaf position of a label is canonical.
#[derive(Debug, Clone)]
pub struct CounterCommitment {
    entries: BTreeMap<String, (u64, Salt)>,
    tree: MerkleTree,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterOpening {
    pub label: String,
    pub count: u64,
    #[serde(with = "hex_salt")]
    pub salt: Salt,
    pub path: MerklePath,
}

pub(crate) mod hex_salt {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("salt must be 16 bytes"))
    }
}

impl CounterCommitment {
    pub fn commit(
        counts: &BTreeMap<String, u64>,
        salts: &BTreeMap<String, Salt>,
    ) -> Result<CounterCommitment> {
        let entries = counts
            .iter()
            .map(|(label, c)| {
                let salt = salts
                    .get(label)
                    .ok_or_else(|| Error::UnknownBin(label.clone()))?;
                Ok((label.clone(), (*c, *salt)))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        if salts.len() != counts.len() {
            let extra = salts.keys().find(|k| !counts.contains_key(*k)).unwrap();
            return Err(Error::UnknownBin(extra.clone()));
        }
        let leaves = entries
            .iter()
            .map(|(l, (c, s))| counter_leaf(l, *c, s))
            .collect();
        Ok(CounterCommitment {
            entries,
            tree: MerkleTree::from_leaves(leaves)?,
        })
    }

    pub fn root(&self) -> Digest {
        self.tree.root()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn open(&self, label: &str) -> Result<CounterOpening> {
        let pos = self
            .entries
            .keys()
            .position(|k| k == label)
            .ok_or_else(|| Error::UnknownBin(label.to_string()))?;
        let (count, salt) = self.entries[label];
        Ok(CounterOpening {
            label: label.to_string(),
            count,
            salt,
            path: self.tree.open(pos as u64)?,
        })
    }

    pub fn open_all(&self) -> Vec<CounterOpening> {
        self.entries
            .keys()
            .map(|k| self.open(k).expect("label present"))
            .collect()
    }
}

pub fn verify_counter(root: &Digest, opening: &CounterOpening) -> bool {
    let leaf = counter_leaf(&opening.label, opening.count, &opening.salt);
    verify_membership(root, &leaf, &opening.path)
}

/// Combines per-tensor digests (in the caller's canonical order) with the
/// frozen-backbone digest.
pub fn state_digest(tensor_digests: &[Digest], frozen: &Digest) -> Digest {
    let mut h = Hasher::new(tag::STATE);
    h.u64(tensor_digests.len() as u64);
    for d in tensor_digests {
        h.digest(d);
    }
    h.digest(frozen);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(i: u8) -> ExampleLeaf {
        ExampleLeaf {
            payload: vec![i, i + 1, 7],
            source_id: format!("src{i}"),
            license_id: "cc-by".into(),
            proc_digest: Digest([i; 32]),
            policy_tags: ["general".to_string()].into_iter().collect(),
        }
    }

    /// Recursive reference, independent of the level-by-level builder.
    fn reference_root(ds: &[Digest]) -> Digest {
        fn go(level: Vec<Digest>) -> Digest {
            if level.len() == 1 {
                return level[0];
            }
            let mut next = Vec::new();
            let mut i = 0;
            while i < level.len() {
                let l = level[i];
                let r = if i + 1 < level.len() { level[i + 1] } else { l };
                let mut bytes = vec![0x01u8];
                bytes.extend_from_slice(&l.0);
                bytes.extend_from_slice(&r.0);
                use sha2::Digest as _;
                next.push(Digest(sha2::Sha256::digest(&bytes).into()));
                i += 2;
            }
            go(next)
        }
        if ds.len() == 1 {
            return go(vec![ds[0], ds[0]]);
        }
        go(ds.to_vec())
    }

    #[test]
    fn single_and_duplicate_leaf_roots() {
        let d = leaf(1).digest();
        let one = DatasetCommitment::build(&[leaf(1)]).unwrap();
        assert_eq!(one.root(), node_hash(&d, &d));
        let two = DatasetCommitment::build(&[leaf(1), leaf(1)]).unwrap();
        assert_eq!(two.root(), one.root());
        let p = one.open(0).unwrap();
        assert_eq!(p.siblings.len(), 1);
        assert!(verify_membership(&one.root(), &d, &p));
    }

    #[test]
    fn matches_reference_implementation() {
        for n in 1..=17u8 {
            let leaves: Vec<_> = (0..n).map(leaf).collect();
            let c = DatasetCommitment::build(&leaves).unwrap();
            let ds: Vec<_> = leaves.iter().map(|l| l.digest()).collect();
            assert_eq!(c.root(), reference_root(&ds), "n={n}");
        }
    }

    #[test]
    fn four_leaf_opening_by_hand() {
        let leaves: Vec<_> = (0..4).map(leaf).collect();
        let ds: Vec<_> = leaves.iter().map(|l| l.digest()).collect();
        let c = DatasetCommitment::build(&leaves).unwrap();
        let p = c.open(2).unwrap();
        assert_eq!(p.siblings.len(), 2);
        let root = node_hash(&node_hash(&ds[0], &ds[1]), &node_hash(&ds[2], &ds[3]));
        assert_eq!(p.siblings[0], (ds[3], Side::Right));
        assert_eq!(p.siblings[1], (node_hash(&ds[0], &ds[1]), Side::Left));
        assert_eq!(c.root(), root);
        assert!(matches!(
            c.open(7),
            Err(Error::IndexOutOfRange { index: 7, len: 4 })
        ));
    }

    #[test]
    fn every_single_perturbation_rejected() {
        let leaves: Vec<_> = (0..4).map(leaf).collect();
        let c = DatasetCommitment::build(&leaves).unwrap();
        for i in 0..4u64 {
            let d = c.leaf_digest(i).unwrap();
            let p = c.open(i).unwrap();
            assert!(verify_membership(&c.root(), &d, &p));
            let mut bad = d;
            bad.0[0] ^= 1;
            assert!(!verify_membership(&c.root(), &bad, &p));
            for k in 0..p.siblings.len() {
                let mut q = p.clone();
                q.siblings[k].1 = match q.siblings[k].1 {
                    Side::Left => Side::Right,
                    Side::Right => Side::Left,
                };
                assert!(!verify_membership(&c.root(), &d, &q));
                let mut q = p.clone();
                q.siblings[k].0 .0[5] ^= 0x80;
                assert!(!verify_membership(&c.root(), &d, &q));
            }
            let mut q = p.clone();
            q.siblings.swap(0, 1);
            assert!(!verify_membership(&c.root(), &d, &q));
            let mut q = p.clone();
            q.leaf_index ^= 1;
            assert!(!verify_membership(&c.root(), &d, &q));
        }
    }

    #[test]
    fn vftc_roundtrip_and_tamper() {
        let leaves: Vec<_> = (0..5).map(leaf).collect();
        let c = DatasetCommitment::build(&leaves).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(DatasetCommitment::from_bytes(&bytes).unwrap(), c);
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 3] ^= 1;
        assert!(DatasetCommitment::from_bytes(&bad).is_err());
        assert!(matches!(
            DatasetCommitment::build(&[]),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn counters_open_and_reject() {
        let counts: BTreeMap<String, u64> =
            [("general".into(), 10), ("medical".into(), 3), ("safety".into(), 0)]
                .into_iter()
                .collect();
        let salts: BTreeMap<String, Salt> = counts
            .keys()
            .enumerate()
            .map(|(i, k)| (k.clone(), [i as u8 + 1; 16]))
            .collect();
        let cc = CounterCommitment::commit(&counts, &salts).unwrap();
        let o = cc.open("medical").unwrap();
        assert_eq!(o.count, 3);
        assert!(verify_counter(&cc.root(), &o));
        let mut bad = o.clone();
        bad.count += 1;
        assert!(!verify_counter(&cc.root(), &bad));
        let mut bad = o.clone();
        bad.salt[0] ^= 1;
        assert!(!verify_counter(&cc.root(), &bad));
        assert!(matches!(cc.open("finance"), Err(Error::UnknownBin(_))));
        let total: u64 = cc.open_all().iter().map(|o| o.count).sum();
        assert_eq!(total, 13);
    }

    #[test]
    fn state_digest_order_sensitive() {
        let a = Digest([1; 32]);
        let b = Digest([2; 32]);
        let f = Digest([3; 32]);
        assert_ne!(state_digest(&[a, b], &f), state_digest(&[b, a], &f));
        assert_eq!(state_digest(&[a, b], &f), state_digest(&[a, b], &f));
    }
}
