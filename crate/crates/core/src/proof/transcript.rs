//! Step transcripts: a public part that is hashed into the folding tree and an
//! optional witness that lets a verifier re-execute the step.

use crate::commit::{ExampleLeaf, MerklePath, Salt};
use crate::digest::{tag, Decoder, Digest, Encoder, Hasher};
use crate::error::{Error, Result};
use crate::fxp::FxpFormat;
use crate::lut::TableSpec;
use crate::model::Adapters;
use crate::optim::{AdamWState, ChainLink, StepMeta};
use crate::sampler::{public_batch_commitment, BatchOpening};

const MAGIC: &[u8; 4] = b"VFTT";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicItem {
    pub index: u64,
    pub leaf: ExampleLeaf,
    pub path: MerklePath,
}

/// How a batch is attested in the public transcript.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchAttestation {
    /// Replayable indices with their leaves and membership paths.
    Public(Vec<PublicItem>),
    /// Salted commitment only; openings travel in the witness.
    Private(Digest),
}

impl BatchAttestation {
    pub fn commitment(&self) -> Digest {
        match self {
            BatchAttestation::Public(items) => {
                let idx: Vec<u64> = items.iter().map(|i| i.index).collect();
                let leaves: Vec<Digest> = items.iter().map(|i| i.leaf.digest()).collect();
                public_batch_commitment(&idx, &leaves)
            }
            BatchAttestation::Private(c) => *c,
        }
    }

    pub fn indices(&self) -> Option<Vec<u64>> {
        match self {
            BatchAttestation::Public(items) => Some(items.iter().map(|i| i.index).collect()),
            BatchAttestation::Private(_) => None,
        }
    }

    fn encode(&self, e: &mut Encoder) {
        match self {
            BatchAttestation::Public(items) => {
                e.u8(0).u64(items.len() as u64);
                for it in items {
                    e.u64(it.index);
                    it.leaf.encode(e);
                    it.path.encode(e);
                }
            }
            BatchAttestation::Private(c) => {
                e.u8(1).digest(c);
            }
        }
    }

    fn decode(d: &mut Decoder<'_>) -> Result<BatchAttestation> {
        match d.u8()? {
            0 => {
                let n = d.u64()?;
                let items = (0..n)
                    .map(|_| {
                        Ok(PublicItem {
                            index: d.u64()?,
                            leaf: ExampleLeaf::decode(d)?,
                            path: MerklePath::decode(d)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(BatchAttestation::Public(items))
            }
            1 => Ok(BatchAttestation::Private(d.digest()?)),
            x => Err(Error::Decode(format!("unknown batch attestation {x}"))),
        }
    }
}

/// Everything a verifier sees without the auditor channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicStep {
    pub step: u64,
    pub epoch: u64,
    pub h_pi: Digest,
    /// Tables the prover evaluated with.
    pub tables: Vec<TableSpec>,
    pub batch: BatchAttestation,
    /// Salted digest of the unclipped gradients.
    pub grads: Digest,
    /// Salted per-block activation checksums.
    pub activation: Vec<Digest>,
    /// Pre and post state digests; public sampling only.
    pub states: Option<(Digest, Digest)>,
    /// Mean loss; public sampling only.
    pub loss: Option<i64>,
    pub link: ChainLink,
}

impl PublicStep {
    pub fn encode(&self, e: &mut Encoder) {
        e.u64(self.step).u64(self.epoch).digest(&self.h_pi);
        e.u64(self.tables.len() as u64);
        for t in &self.tables {
            t.encode(e);
        }
        self.batch.encode(e);
        e.digest(&self.grads).digests(&self.activation);
        match &self.states {
            Some((a, b)) => e.u8(1).digest(a).digest(b),
            None => e.u8(0),
        };
        match self.loss {
            Some(l) => e.u8(1).i64(l),
            None => e.u8(0),
        };
        let l = &self.link;
        e.digest(&l.h_prev)
            .digest(&l.h_next)
            .digest(&l.delta_digest)
            .i64(l.eta);
        l.meta.encode(e);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<PublicStep> {
        let step = d.u64()?;
        let epoch = d.u64()?;
        let h_pi = d.digest()?;
        let n = d.u64()?;
        if n > 64 {
            return Err(Error::Decode("too many tables".into()));
        }
        let tables = (0..n)
            .map(|_| TableSpec::decode(d))
            .collect::<Result<Vec<_>>>()?;
        let batch = BatchAttestation::decode(d)?;
        let grads = d.digest()?;
        let activation = d.digests()?;
        let states = match d.u8()? {
            0 => None,
            1 => Some((d.digest()?, d.digest()?)),
            x => return Err(Error::Decode(format!("bad state flag {x}"))),
        };
        let loss = match d.u8()? {
            0 => None,
            1 => Some(d.i64()?),
            x => return Err(Error::Decode(format!("bad loss flag {x}"))),
        };
        let link = ChainLink {
            h_prev: d.digest()?,
            h_next: d.digest()?,
            delta_digest: d.digest()?,
            eta: d.i64()?,
            meta: StepMeta::decode(d)?,
        };
        Ok(PublicStep {
            step,
            epoch,
            h_pi,
            tables,
            batch,
            grads,
            activation,
            states,
            loss,
            link,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.encode(&mut e);
        e.into_bytes()
    }

    /// Leaf digest used by the folding tree.
    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new(tag::TRANSCRIPT);
        h.update(&self.to_bytes());
        h.finish()
    }
}

/// Material disclosed to an auditor for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepWitness {
    pub salt: Salt,
    /// Private sampling: per-item openings and the examples behind them.
    pub openings: Vec<BatchOpening>,
    pub examples: Vec<ExampleLeaf>,
    pub loss: i64,
    pub params_pre: Adapters,
    pub opt_pre: AdamWState,
    pub params_post: Adapters,
    pub opt_post: AdamWState,
}

impl StepWitness {
    fn encode(&self, fmt: FxpFormat, e: &mut Encoder) {
        e.bytes(&self.salt).u64(self.openings.len() as u64);
        for o in &self.openings {
            e.u64(o.index).bytes(&o.salt).digest(&o.leaf);
            o.path.encode(e);
        }
        e.u64(self.examples.len() as u64);
        for x in &self.examples {
            x.encode(e);
        }
        e.i64(self.loss);
        self.params_pre.encode(fmt, e);
        self.opt_pre.encode(fmt, e);
        self.params_post.encode(fmt, e);
        self.opt_post.encode(fmt, e);
    }

    fn decode(like: &Adapters, d: &mut Decoder<'_>) -> Result<StepWitness> {
        let salt = salt(d.bytes()?)?;
        let n = d.u64()?;
        let openings = (0..n)
            .map(|_| {
                Ok(BatchOpening {
                    index: d.u64()?,
                    salt: salt_of(d)?,
                    leaf: d.digest()?,
                    path: MerklePath::decode(d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = d.u64()?;
        let examples = (0..n)
            .map(|_| ExampleLeaf::decode(d))
            .collect::<Result<Vec<_>>>()?;
        Ok(StepWitness {
            salt,
            openings,
            examples,
            loss: d.i64()?,
            params_pre: Adapters::decode_like(like, d)?,
            opt_pre: AdamWState::decode_like(like, d)?,
            params_post: Adapters::decode_like(like, d)?,
            opt_post: AdamWState::decode_like(like, d)?,
        })
    }
}

fn salt(b: &[u8]) -> Result<Salt> {
    b.try_into()
        .map_err(|_| Error::Decode("salt must be 16 bytes".into()))
}

fn salt_of(d: &mut Decoder<'_>) -> Result<Salt> {
    salt(d.bytes()?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepTranscript {
    pub public: PublicStep,
    pub witness: Option<StepWitness>,
}

impl StepTranscript {
    pub fn digest(&self) -> Digest {
        self.public.digest()
    }

    pub fn step(&self) -> u64 {
        self.public.step
    }

    /// Drops the witness, leaving what may be published.
    pub fn public_only(&self) -> StepTranscript {
        StepTranscript {
            public: self.public.clone(),
            witness: None,
        }
    }

    pub fn to_bytes(&self, fmt: FxpFormat) -> Vec<u8> {
        let mut e = Encoder::with_magic(MAGIC, VERSION);
        e.bytes(&self.public.to_bytes());
        match &self.witness {
            Some(w) => {
                let mut we = Encoder::new();
                w.encode(fmt, &mut we);
                e.u8(1).bytes(we.as_slice());
            }
            None => {
                e.u8(0);
            }
        }
        e.into_bytes()
    }

    /// `like` supplies the adapter layout for the witness tensors.
    pub fn from_bytes(bytes: &[u8], like: &Adapters) -> Result<StepTranscript> {
        let (mut d, version) = Decoder::expect_magic(bytes, MAGIC)?;
        if version != VERSION {
            return Err(Error::Decode(format!("transcript version {version}")));
        }
        let mut pd = Decoder::new(d.bytes()?);
        let public = PublicStep::decode(&mut pd)?;
        pd.finish()?;
        let witness = match d.u8()? {
            0 => None,
            1 => {
                let mut wd = Decoder::new(d.bytes()?);
                let w = StepWitness::decode(like, &mut wd)?;
                wd.finish()?;
                Some(w)
            }
            x => return Err(Error::Decode(format!("bad witness flag {x}"))),
        };
        d.finish()?;
        Ok(StepTranscript { public, witness })
    }
}

pub fn salted(tag: u8, salt: &Salt, d: &Digest) -> Digest {
    let mut h = Hasher::new(tag);
    h.update(salt).digest(d);
    h.finish()
}

pub fn grads_digest(grads: &Adapters, fmt: FxpFormat, salt: &Salt) -> Digest {
    let mut h = Hasher::new(tag::GRADS);
    h.update(salt);
    for d in grads.digests("g.", fmt) {
        h.digest(&d);
    }
    h.finish()
}

pub fn activation_digests(checksums: &[Digest], salt: &Salt) -> Vec<Digest> {
    checksums
        .iter()
        .map(|c| salted(tag::ACTIVATION, salt, c))
        .collect()
}

/// State digest over adapters, moments and the frozen backbone.
pub fn state_of(params: &Adapters, opt: &AdamWState, fmt: FxpFormat, backbone: &Digest) -> Digest {
    let mut digests = params.digests("", fmt);
    digests.extend(opt.digests(fmt));
    crate::commit::state_digest(&digests, backbone)
}

/// `H(Δ_t)`: binds the pre and post states and the adapter delta.
pub fn delta_digest(
    salt: &Salt,
    pre_state: &Digest,
    post_state: &Digest,
    pre: &Adapters,
    post: &Adapters,
) -> Digest {
    let mut h = Hasher::new(tag::DELTA);
    h.update(salt).digest(pre_state).digest(post_state);
    for ((name, a), b) in pre.names().iter().zip(pre.tensors()).zip(post.tensors()) {
        let diff: Vec<i64> = a.data.iter().zip(&b.data).map(|(x, y)| y - x).collect();
        h.str(name).raws(&diff);
    }
    h.finish()
}
