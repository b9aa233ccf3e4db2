//! Toy causal transformer with frozen backbone and trainable LoRA adapters.

mod layers;
mod train;

pub use layers::{gelu_approx, layer_norm, lora_forward, rsqrt_approx, softmax_approx, Softmax};
pub use train::{loss_and_grads, Sequence, StepOutput};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::{tag, Decoder, Digest, Encoder, Hasher};
use crate::error::{Error, Result};
use crate::fxp::FxpFormat;
use crate::lut::TableSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub lora_rank: usize,
    pub lora_attention: bool,
    pub lora_mlp: bool,
    /// Seed for the frozen backbone and the adapter initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    /// `d_model=8, H=2, L=4, vocab=11, r=2`.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            seq_len: 4,
            vocab_size: 11,
            n_blocks: 1,
            d_ff: 16,
            lora_rank: 2,
            lora_attention: true,
            lora_mlp: true,
            init_seed: 7,
        }
    }

    /// Byte-level desk-scale default.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            seq_len: 16,
            vocab_size: 256,
            n_blocks: 1,
            d_ff: 32,
            lora_rank: 2,
            lora_attention: true,
            lora_mlp: true,
            init_seed: 7,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Schema(format!("model: {m}")));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1");
        }
        if self.seq_len == 0 {
            return bad("seq_len must be at least 1");
        }
        if self.vocab_size < 2 || self.vocab_size > 256 {
            return bad("vocab_size must be in 2..=256");
        }
        if self.n_blocks == 0 || self.d_ff == 0 {
            return bad("n_blocks and d_ff must be positive");
        }
        if !self.lora_attention && !self.lora_mlp {
            return bad("at least one adapter placement is required");
        }
        Ok(())
    }

    /// Adapted linear modules in canonical order.
    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::new();
        for block in 0..self.n_blocks {
            for module in Module::ALL {
                let on = match module {
                    Module::Q | Module::K | Module::V | Module::O => self.lora_attention,
                    Module::W1 | Module::W2 => self.lora_mlp,
                };
                if on {
                    out.push(Slot { block, module });
                }
            }
        }
        out
    }

    /// `(d_out, d_in)` of a linear module.
    pub fn linear_shape(&self, module: Module) -> (usize, usize) {
        let d = self.d_model;
        match module {
            Module::Q | Module::K | Module::V | Module::O => (d, d),
            Module::W1 => (self.d_ff, d),
            Module::W2 => (d, self.d_ff),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Module {
    Q,
    K,
    V,
    O,
    W1,
    W2,
}

impl Module {
    pub const ALL: [Module; 6] = [
        Module::Q,
        Module::K,
        Module::V,
        Module::O,
        Module::W1,
        Module::W2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Module::Q => "wq",
            Module::K => "wk",
            Module::V => "wv",
            Module::O => "wo",
            Module::W1 => "w1",
            Module::W2 => "w2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot {
    pub block: usize,
    pub module: Module,
}

impl Slot {
    pub fn name(&self) -> String {
        format!("blocks.{}.{}", self.block, self.module.name())
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64, fmt: FxpFormat) -> Tensor {
    let values: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_f64(rows, cols, &values, fmt).expect("init values are in range")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl Block {
    pub fn weight(&self, m: Module) -> &Tensor {
        match m {
            Module::Q => &self.wq,
            Module::K => &self.wk,
            Module::V => &self.wv,
            Module::O => &self.wo,
            Module::W1 => &self.w1,
            Module::W2 => &self.w2,
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 10] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("w2", &self.w2),
        ]
    }
}

/// Frozen weights: embeddings, projections, layer norms and unembedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Backbone {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub unembed: Tensor,
}

impl Backbone {
    pub fn init(cfg: &ModelConfig, fmt: FxpFormat) -> Result<Backbone> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let d = cfg.d_model;
        let ones = || Tensor::from_raw(1, d, vec![fmt.one(); d]).unwrap();
        let lin = |rng: &mut ChaCha8Rng, o: usize, i: usize| {
            uniform(rng, o, i, 1.0 / (i as f64).sqrt(), fmt)
        };
        let tok_emb = uniform(&mut rng, cfg.vocab_size, d, 1.0, fmt);
        let pos_emb = uniform(&mut rng, cfg.seq_len, d, 0.5, fmt);
        let blocks = (0..cfg.n_blocks)
            .map(|_| Block {
                ln1_g: ones(),
                ln1_b: Tensor::zeros(1, d),
                wq: lin(&mut rng, d, d),
                wk: lin(&mut rng, d, d),
                wv: lin(&mut rng, d, d),
                wo: lin(&mut rng, d, d),
                ln2_g: ones(),
                ln2_b: Tensor::zeros(1, d),
                w1: lin(&mut rng, cfg.d_ff, d),
                w2: lin(&mut rng, d, cfg.d_ff),
            })
            .collect();
        let unembed = lin(&mut rng, cfg.vocab_size, d);
        Ok(Backbone {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: ones(),
            lnf_b: Tensor::zeros(1, d),
            unembed,
        })
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.named() {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn digest(&self, fmt: FxpFormat) -> Digest {
        let mut h = Hasher::new(tag::BACKBONE);
        for (name, t) in self.named() {
            h.digest(&t.digest(&name, fmt));
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoraAdapter {
    /// `r x d_in`
    pub a: Tensor,
    /// `d_out x r`
    pub b: Tensor,
}

/// All adapters in canonical slot order. `tensors()` lists `A` then `B` for
/// each slot, which is the order used by the optimizer and digests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adapters {
    pub slots: Vec<Slot>,
    pub adapters: Vec<LoraAdapter>,
}

impl Adapters {
    /// `A` uniform, `B = 0`, so the initial model equals the backbone.
    pub fn init(cfg: &ModelConfig, fmt: FxpFormat) -> Adapters {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed ^ 0xada9_7e25);
        let slots = cfg.slots();
        let adapters = slots
            .iter()
            .map(|s| {
                let (o, i) = cfg.linear_shape(s.module);
                LoraAdapter {
                    a: uniform(&mut rng, cfg.lora_rank, i, 1.0 / (i as f64).sqrt(), fmt),
                    b: Tensor::zeros(o, cfg.lora_rank),
                }
            })
            .collect();
        Adapters { slots, adapters }
    }

    pub fn zeros_like(&self) -> Adapters {
        Adapters {
            slots: self.slots.clone(),
            adapters: self
                .adapters
                .iter()
                .map(|a| LoraAdapter {
                    a: Tensor::zeros(a.a.rows, a.a.cols),
                    b: Tensor::zeros(a.b.rows, a.b.cols),
                })
                .collect(),
        }
    }

    pub fn get(&self, block: usize, module: Module) -> Option<&LoraAdapter> {
        self.slots
            .iter()
            .position(|s| s.block == block && s.module == module)
            .map(|i| &self.adapters[i])
    }

    pub fn names(&self) -> Vec<String> {
        self.slots
            .iter()
            .flat_map(|s| [format!("{}.A", s.name()), format!("{}.B", s.name())])
            .collect()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.adapters.iter().flat_map(|a| [&a.a, &a.b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.adapters.iter_mut().flat_map(|a| [&mut a.a, &mut a.b])
    }

    pub fn tensor_count(&self) -> usize {
        self.adapters.len() * 2
    }

    pub fn same_shape(&self, other: &Adapters) -> bool {
        self.slots == other.slots
            && self
                .tensors()
                .zip(other.tensors())
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Per-tensor digests, named with `prefix`.
    pub fn digests(&self, prefix: &str, fmt: FxpFormat) -> Vec<Digest> {
        self.names()
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| t.digest(&format!("{prefix}{n}"), fmt))
            .collect()
    }

    pub fn encode(&self, fmt: FxpFormat, e: &mut Encoder) {
        e.u64(self.tensor_count() as u64);
        for (n, t) in self.names().iter().zip(self.tensors()) {
            t.encode(n, fmt, e);
        }
    }

    /// Decodes tensors into the slot layout of `like`.
    pub fn decode_like(like: &Adapters, d: &mut Decoder<'_>) -> Result<Adapters> {
        let n = d.u64()? as usize;
        if n != like.tensor_count() {
            return Err(Error::Decode(format!(
                "expected {} adapter tensors, found {n}",
                like.tensor_count()
            )));
        }
        let mut out = like.clone();
        for (name, t) in like.names().into_iter().zip(out.tensors_mut()) {
            let (got, _, tensor) = Tensor::decode(d)?;
            if got != name || tensor.shape() != t.shape() {
                return Err(Error::Decode(format!("adapter tensor {got} out of place")));
            }
            *t = tensor;
        }
        Ok(out)
    }
}

/// Everything needed to evaluate the model: config, format, frozen weights and
/// the lookup tables in use.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub format: FxpFormat,
    pub backbone: Backbone,
    pub tables: TableSet,
    /// Softmax clip window after max-subtraction, as raws.
    pub clip: (i64, i64),
    backbone_digest: Digest,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        format: FxpFormat,
        tables: TableSet,
        clip: (f64, f64),
    ) -> Result<Model> {
        let backbone = Backbone::init(&config, format)?;
        Model::with_backbone(config, format, backbone, tables, clip)
    }

    pub fn with_backbone(
        config: ModelConfig,
        format: FxpFormat,
        backbone: Backbone,
        tables: TableSet,
        clip: (f64, f64),
    ) -> Result<Model> {
        config.validate()?;
        let clip = (format.quantize(clip.0)?, format.quantize(clip.1)?);
        let exp = tables.exp.spec();
        if clip.0 < exp.lo_raw || clip.1 > exp.hi_raw || clip.0 > 0 || clip.1 < 0 {
            return Err(Error::TableDomain {
                function: "exp",
                value: format.dequantize(if clip.0 < exp.lo_raw { clip.0 } else { clip.1 }),
                lo: exp.lo(),
                hi: exp.hi(),
            });
        }
        let backbone_digest = backbone.digest(format);
        Ok(Model {
            config,
            format,
            backbone,
            tables,
            clip,
            backbone_digest,
        })
    }

    pub fn backbone_digest(&self) -> Digest {
        self.backbone_digest
    }

    /// Header (config), backbone tensors, then adapters, in canonical order.
    pub fn to_bytes(&self, adapters: &Adapters) -> Result<Vec<u8>> {
        let mut e = Encoder::with_magic(b"VFTM", 1);
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Decode(e.to_string()))?;
        e.bytes(&cfg).u8(self.format.int_bits() as u8).u8(self.format.frac_bits() as u8);
        let named = self.backbone.named();
        e.u64(named.len() as u64);
        for (n, t) in named {
            t.encode(&n, self.format, &mut e);
        }
        adapters.encode(self.format, &mut e);
        Ok(e.into_bytes())
    }

    /// Returns the config, format, backbone and adapters stored in a model file.
    pub fn parse_bytes(bytes: &[u8]) -> Result<(ModelConfig, FxpFormat, Backbone, Adapters)> {
        let (mut d, version) = Decoder::expect_magic(bytes, b"VFTM")?;
        if version != 1 {
            return Err(Error::Decode(format!("unsupported VFTM version {version}")));
        }
        let config: ModelConfig =
            serde_json::from_slice(d.bytes()?).map_err(|e| Error::Decode(e.to_string()))?;
        let format = FxpFormat::from_bytes([d.u8()?, d.u8()?])?;
        let mut backbone = Backbone::init(&config, format)?;
        let n = d.u64()? as usize;
        let names: Vec<String> = backbone.named().into_iter().map(|(n, _)| n).collect();
        if n != names.len() {
            return Err(Error::Decode("backbone tensor count".into()));
        }
        let mut decoded = Vec::with_capacity(n);
        for name in &names {
            let (got, _, t) = Tensor::decode(&mut d)?;
            if &got != name {
                return Err(Error::Decode(format!("backbone tensor {got} out of place")));
            }
            decoded.push(t);
        }
        let mut it = decoded.into_iter();
        let mut next = |like: &Tensor| -> Result<Tensor> {
            let t = it.next().unwrap();
            if t.shape() != like.shape() {
                return Err(Error::Decode("backbone tensor shape".into()));
            }
            Ok(t)
        };
        backbone.tok_emb = next(&backbone.tok_emb)?;
        backbone.pos_emb = next(&backbone.pos_emb)?;
        for b in backbone.blocks.iter_mut() {
            for t in [
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.w1,
                &mut b.w2,
            ] {
                *t = next(t)?;
            }
        }
        backbone.lnf_g = next(&backbone.lnf_g)?;
        backbone.lnf_b = next(&backbone.lnf_b)?;
        backbone.unembed = next(&backbone.unembed)?;
        let like = Adapters::init(&config, format);
        let adapters = Adapters::decode_like(&like, &mut d)?;
        d.finish()?;
        Ok((config, format, backbone, adapters))
    }
}
