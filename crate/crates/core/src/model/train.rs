use crate::digest::{tag, Digest, Hasher};
use crate::error::{Error, Result};
use crate::fxp::{div_round, FxpFormat, OpTally};
use crate::tensor::Tensor;

use super::layers::{
    layer_norm_bwd, layer_norm_fwd, linear_bwd, linear_fwd, softmax_approx, softmax_bwd, LnCache,
};
use super::{Adapters, Model, Module};

/// One training sequence. Inputs are `tokens[..n]` and targets
/// `tokens[1..=n]` with `n = min(seq_len, len - 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<u32>,
}

impl Sequence {
    pub fn new(tokens: Vec<u32>) -> Sequence {
        Sequence { tokens }
    }

    pub fn from_bytes(bytes: &[u8]) -> Sequence {
        Sequence {
            tokens: bytes.iter().map(|b| *b as u32).collect(),
        }
    }

    pub fn positions(&self, seq_len: usize) -> usize {
        self.tokens.len().saturating_sub(1).min(seq_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Mean per-token cross-entropy, as a raw.
    pub loss: i64,
    /// Gradients in the adapter layout.
    pub grads: Adapters,
    /// One digest per block output.
    pub checksums: Vec<Digest>,
    pub tally: OpTally,
    pub n_tokens: u64,
    pub max_rowsum_dev: i64,
}

struct BlockCache {
    ln1: LnCache,
    ln1_out: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    u: [Option<Tensor>; 6],
    /// `probs[head][i]` has length `i + 1`.
    probs: Vec<Vec<Vec<i64>>>,
    o: Tensor,
    ln2: LnCache,
    ln2_out: Tensor,
    h1: Tensor,
    a: Tensor,
}

struct Forward {
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    probs: Vec<Vec<i64>>,
    loss_sum: i128,
    outputs: Vec<Tensor>,
    max_rowsum_dev: i64,
}

fn module_index(m: Module) -> usize {
    Module::ALL.iter().position(|x| *x == m).unwrap()
}

struct Ctx<'a> {
    model: &'a Model,
    adapters: &'a Adapters,
    fmt: FxpFormat,
    scale: i64,
}

impl Ctx<'_> {
    fn attention_fwd(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        tally: &mut OpTally,
        dev: &mut i64,
    ) -> Result<(Tensor, Vec<Vec<Vec<i64>>>)> {
        let cfg = &self.model.config;
        let (n, hd) = (q.rows, cfg.head_dim());
        let fmt = self.fmt;
        let exp = &self.model.tables.exp;
        let mut o = Tensor::zeros(n, cfg.d_model);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = h * hd..(h + 1) * hd;
            let mut head = Vec::with_capacity(n);
            for i in 0..n {
                let scores = (0..=i)
                    .map(|j| {
                        let s = fmt.dot(&q.row(i)[cols.clone()], &k.row(j)[cols.clone()])?;
                        fmt.mul(s, self.scale)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sm = softmax_approx(&scores, exp, self.model.clip, fmt)?;
                *dev = (*dev).max(sm.rowsum_dev);
                for c in cols.clone() {
                    o.data[i * cfg.d_model + c] =
                        fmt.dot_iter((0..=i).map(|j| (sm.p[j], v.at(j, c))))?;
                }
                tally.mul(2 * (i as u64 + 1) + hd as u64 + (i as u64 + 1));
                tally.lookup("exp", exp.max_error(), i as u64 + 1);
                head.push(sm.p);
            }
            probs.push(head);
        }
        Ok((o, probs))
    }

    fn attention_bwd(
        &self,
        d_o: &Tensor,
        c: &BlockCache,
        tally: &mut OpTally,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let cfg = &self.model.config;
        let (n, hd, dm) = (d_o.rows, cfg.head_dim(), cfg.d_model);
        let fmt = self.fmt;
        let mut dq = Tensor::zeros(n, dm);
        let mut dk = Tensor::zeros(n, dm);
        let mut dv = Tensor::zeros(n, dm);
        for h in 0..cfg.n_heads {
            let cols = h * hd..(h + 1) * hd;
            let p = &c.probs[h];
            let mut ds = Vec::with_capacity(n);
            for (i, p_i) in p.iter().enumerate() {
                let dp = (0..=i)
                    .map(|j| fmt.dot(&d_o.row(i)[cols.clone()], &c.v.row(j)[cols.clone()]))
                    .collect::<Result<Vec<_>>>()?;
                let row = softmax_bwd(p_i, &dp, fmt)?
                    .into_iter()
                    .map(|x| fmt.mul(x, self.scale))
                    .collect::<Result<Vec<_>>>()?;
                tally.mul(3 * (i as u64 + 1) + 1);
                ds.push(row);
            }
            for col in cols.clone() {
                for j in 0..n {
                    dv.data[j * dm + col] =
                        fmt.dot_iter((j..n).map(|i| (p[i][j], d_o.at(i, col))))?;
                    dk.data[j * dm + col] =
                        fmt.dot_iter((j..n).map(|i| (ds[i][j], c.q.at(i, col))))?;
                    dq.data[j * dm + col] =
                        fmt.dot_iter((0..=j).map(|i| (ds[j][i], c.k.at(i, col))))?;
                }
            }
            tally.mul(3 * (n * hd) as u64);
        }
        Ok((dq, dk, dv))
    }

    fn forward(&self, inputs: &[u32], targets: &[u32], tally: &mut OpTally) -> Result<Forward> {
        let m = self.model;
        let bb = &m.backbone;
        let cfg = &m.config;
        let fmt = self.fmt;
        let n = inputs.len();
        let mut x = Tensor::zeros(n, cfg.d_model);
        for (i, t) in inputs.iter().enumerate() {
            for c in 0..cfg.d_model {
                x.data[i * cfg.d_model + c] =
                    fmt.add(bb.tok_emb.at(*t as usize, c), bb.pos_emb.at(i, c))?;
            }
        }
        let mut dev = 0i64;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        let mut outputs = Vec::with_capacity(cfg.n_blocks);
        for (bi, blk) in bb.blocks.iter().enumerate() {
            let ad = |md: Module| self.adapters.get(bi, md);
            let mut u: [Option<Tensor>; 6] = Default::default();
            let (ln1_out, ln1) = layer_norm_fwd(&x, &blk.ln1_g, &blk.ln1_b, &m.tables.rsqrt, fmt, tally)?;
            let (q, uq) = linear_fwd(&ln1_out, &blk.wq, ad(Module::Q), fmt, tally)?;
            let (k, uk) = linear_fwd(&ln1_out, &blk.wk, ad(Module::K), fmt, tally)?;
            let (v, uv) = linear_fwd(&ln1_out, &blk.wv, ad(Module::V), fmt, tally)?;
            let (o, probs) = self.attention_fwd(&q, &k, &v, tally, &mut dev)?;
            let (attn, uo) = linear_fwd(&o, &blk.wo, ad(Module::O), fmt, tally)?;
            let x1 = x.add(&attn, fmt)?;
            let (ln2_out, ln2) = layer_norm_fwd(&x1, &blk.ln2_g, &blk.ln2_b, &m.tables.rsqrt, fmt, tally)?;
            let (h1, u1) = linear_fwd(&ln2_out, &blk.w1, ad(Module::W1), fmt, tally)?;
            let a = Tensor {
                data: h1.data.iter().map(|v| m.tables.gelu.eval_clamped(*v)).collect(),
                ..h1.clone()
            };
            tally.lookup("gelu", m.tables.gelu.max_error(), a.len() as u64);
            let (mlp, u2) = linear_fwd(&a, &blk.w2, ad(Module::W2), fmt, tally)?;
            let x2 = x1.add(&mlp, fmt)?;
            u[module_index(Module::Q)] = uq;
            u[module_index(Module::K)] = uk;
            u[module_index(Module::V)] = uv;
            u[module_index(Module::O)] = uo;
            u[module_index(Module::W1)] = u1;
            u[module_index(Module::W2)] = u2;
            outputs.push(x2.clone());
            x = x2;
            blocks.push(BlockCache {
                ln1,
                ln1_out,
                q,
                k,
                v,
                u,
                probs,
                o,
                ln2,
                ln2_out,
                h1,
                a,
            });
        }
        let (lnf_out, lnf) = layer_norm_fwd(&x, &bb.lnf_g, &bb.lnf_b, &m.tables.rsqrt, fmt, tally)?;
        let z = lnf_out.matmul_t(&bb.unembed, fmt, tally)?;
        let mut probs = Vec::with_capacity(n);
        let mut loss_sum: i128 = 0;
        for (i, y) in targets.iter().enumerate() {
            let sm = softmax_approx(z.row(i), &m.tables.exp, m.clip, fmt)?;
            dev = dev.max(sm.rowsum_dev);
            let ln_sum = m.tables.ln.eval(sm.exp_sum)?;
            loss_sum += ln_sum as i128 - sm.shifted[*y as usize] as i128;
            probs.push(sm.p);
        }
        tally.mul((n * cfg.vocab_size) as u64);
        tally.lookup("exp", m.tables.exp.max_error(), (n * cfg.vocab_size) as u64);
        tally.lookup("ln", m.tables.ln.max_error(), n as u64);
        Ok(Forward {
            blocks,
            lnf,
            probs,
            loss_sum,
            outputs,
            max_rowsum_dev: dev,
        })
    }

    fn backward(
        &self,
        fw: &Forward,
        targets: &[u32],
        n_tokens: i64,
        grads: &mut Adapters,
        tally: &mut OpTally,
    ) -> Result<()> {
        let m = self.model;
        let bb = &m.backbone;
        let cfg = &m.config;
        let fmt = self.fmt;
        let n = targets.len();
        let one = fmt.one() as i128;
        let mut dz = Tensor::zeros(n, cfg.vocab_size);
        for (i, y) in targets.iter().enumerate() {
            for j in 0..cfg.vocab_size {
                let hot = if j == *y as usize { one } else { 0 };
                dz.data[i * cfg.vocab_size + j] =
                    fmt.check(div_round(fw.probs[i][j] as i128 - hot, n_tokens as i128), "dz")?;
            }
        }
        tally.mul(dz.len() as u64);
        let dlnf = dz.matmul(&bb.unembed, fmt, tally)?;
        let mut dx = layer_norm_bwd(&dlnf, &bb.lnf_g, &fw.lnf, fmt, tally)?;

        for (bi, blk) in bb.blocks.iter().enumerate().rev() {
            let c = &fw.blocks[bi];
            let slot = |md: Module| {
                grads
                    .slots
                    .iter()
                    .position(|s| s.block == bi && s.module == md)
            };
            let with_u = |md: Module| {
                self.adapters
                    .get(bi, md)
                    .map(|a| (a, c.u[module_index(md)].as_ref().unwrap()))
            };
            let mut record = |md: Module, g: &super::layers::LinearGrads| -> Result<()> {
                if let (Some(s), Some(da), Some(db)) = (slot(md), &g.da, &g.db) {
                    grads.adapters[s].a.add_assign(da, fmt)?;
                    grads.adapters[s].b.add_assign(db, fmt)?;
                }
                Ok(())
            };

            let g2 = linear_bwd(&dx, &c.a, &blk.w2, with_u(Module::W2), true, fmt, tally)?;
            record(Module::W2, &g2)?;
            let dh1 = Tensor {
                data: g2
                    .dx
                    .data
                    .iter()
                    .zip(&c.h1.data)
                    .map(|(d, h)| fmt.mul(*d, m.tables.gelu_prime.eval_clamped(*h)))
                    .collect::<Result<Vec<_>>>()?,
                ..c.h1.clone()
            };
            tally.mul(dh1.len() as u64);
            tally.lookup("gelu_prime", m.tables.gelu_prime.max_error(), dh1.len() as u64);
            let g1 = linear_bwd(&dh1, &c.ln2_out, &blk.w1, with_u(Module::W1), true, fmt, tally)?;
            record(Module::W1, &g1)?;
            let dx1 = dx.add(&layer_norm_bwd(&g1.dx, &blk.ln2_g, &c.ln2, fmt, tally)?, fmt)?;
            let go = linear_bwd(&dx1, &c.o, &blk.wo, with_u(Module::O), true, fmt, tally)?;
            record(Module::O, &go)?;
            let (dq, dk, dv) = self.attention_bwd(&go.dx, c, tally)?;
            let need = bi > 0;
            let gq = linear_bwd(&dq, &c.ln1_out, &blk.wq, with_u(Module::Q), need, fmt, tally)?;
            let gk = linear_bwd(&dk, &c.ln1_out, &blk.wk, with_u(Module::K), need, fmt, tally)?;
            let gv = linear_bwd(&dv, &c.ln1_out, &blk.wv, with_u(Module::V), need, fmt, tally)?;
            record(Module::Q, &gq)?;
            record(Module::K, &gk)?;
            record(Module::V, &gv)?;
            if need {
                let dln1 = gq.dx.add(&gk.dx, fmt)?.add(&gv.dx, fmt)?;
                dx = dx1.add(&layer_norm_bwd(&dln1, &blk.ln1_g, &c.ln1, fmt, tally)?, fmt)?;
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy over every target position of the batch, gradients for
/// the adapter tensors only, and one activation digest per block.
pub fn loss_and_grads(model: &Model, adapters: &Adapters, batch: &[Sequence]) -> Result<StepOutput> {
    let cfg = &model.config;
    let fmt = model.format;
    if !adapters.same_shape(&Adapters::init(cfg, fmt)) {
        return Err(Error::Shape("adapters do not match model config".into()));
    }
    for s in batch {
        if let Some(t) = s.tokens.iter().find(|t| **t as usize >= cfg.vocab_size) {
            return Err(Error::Shape(format!(
                "token {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }
    let ctx = Ctx {
        model,
        adapters,
        fmt,
        scale: fmt.quantize(1.0 / (cfg.head_dim() as f64).sqrt())?,
    };
    let n_tokens: usize = batch.iter().map(|s| s.positions(cfg.seq_len)).sum();
    let mut grads = adapters.zeros_like();
    let mut tally = OpTally::default();
    let mut hashers: Vec<Hasher> = (0..cfg.n_blocks)
        .map(|b| {
            let mut h = Hasher::new(tag::ACTIVATION);
            h.u64(b as u64);
            h
        })
        .collect();
    let mut loss_sum: i128 = 0;
    let mut dev = 0;
    for s in batch {
        let n = s.positions(cfg.seq_len);
        if n == 0 {
            for h in hashers.iter_mut() {
                h.raws(&[]);
            }
            continue;
        }
        let (inputs, targets) = (&s.tokens[..n], &s.tokens[1..=n]);
        let fw = ctx.forward(inputs, targets, &mut tally)?;
        for (h, out) in hashers.iter_mut().zip(&fw.outputs) {
            h.raws(&out.data);
        }
        loss_sum += fw.loss_sum;
        dev = dev.max(fw.max_rowsum_dev);
        ctx.backward(&fw, targets, n_tokens as i64, &mut grads, &mut tally)?;
    }
    let loss = if n_tokens == 0 {
        0
    } else {
        tally.mul(1);
        fmt.check(div_round(loss_sum, n_tokens as i128), "loss")?
    };
    Ok(StepOutput {
        loss,
        grads,
        checksums: hashers.into_iter().map(Hasher::finish).collect(),
        tally,
        n_tokens: n_tokens as u64,
        max_rowsum_dev: dev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lut::TableSet;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};

    fn tiny(fmt: FxpFormat) -> Model {
        Model::new(ModelConfig::tiny(), fmt, TableSet::standard(fmt).unwrap(), (-8.0, 8.0)).unwrap()
    }

    fn batch(seed: u64, vocab: u32, len: usize, count: usize) -> Vec<Sequence> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| Sequence::new((0..len).map(|_| rng.random_range(0..vocab)).collect()))
            .collect()
    }

    fn random_adapters(model: &Model, seed: u64) -> Adapters {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ad = Adapters::init(&model.config, model.format);
        for t in ad.tensors_mut() {
            for v in t.data.iter_mut() {
                *v = model.format.quantize(rng.random_range(-0.5..0.5)).unwrap();
            }
        }
        ad
    }

    #[test]
    fn deterministic_and_local() {
        let fmt = FxpFormat::default();
        let m = tiny(fmt);
        let ad = Adapters::init(&m.config, fmt);
        let b = batch(1, 11, 5, 3);
        let a1 = loss_and_grads(&m, &ad, &b).unwrap();
        let a2 = loss_and_grads(&m, &ad, &b).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1.checksums.len(), 1);
        assert_eq!(a1.n_tokens, 12);
        assert!(a1.grads.same_shape(&ad));
        assert_eq!(m.backbone.digest(fmt), m.backbone_digest());
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let fmt = FxpFormat::default();
        let mut m = tiny(fmt);
        m.backbone.unembed = Tensor::zeros(11, 8);
        let ad = Adapters::init(&m.config, fmt);
        let out = loss_and_grads(&m, &ad, &batch(2, 11, 5, 2)).unwrap();
        let tau = out.tally.budget(fmt).tau();
        assert!((fmt.dequantize(out.loss) - (11f64).ln()).abs() <= tau);
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        let fmt = FxpFormat::default();
        let m = tiny(fmt);
        let ad = Adapters::init(&m.config, fmt);
        let r = loss_and_grads(&m, &ad, &[Sequence::new(vec![1, 11, 2])]);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let fmt = FxpFormat::default();
        let m = tiny(fmt);
        let ad = random_adapters(&m, 5);
        let b = batch(3, 11, 5, 2);
        let out = loss_and_grads(&m, &ad, &b).unwrap();
        let tau = out.tally.budget(fmt).tau();
        let h = 64i64;
        let mut checked = 0;
        for ti in 0..ad.tensor_count() {
            for ci in (0..ad.tensors().nth(ti).unwrap().len()).step_by(3) {
                let mut plus = ad.clone();
                plus.tensors_mut().nth(ti).unwrap().data[ci] += h;
                let mut minus = ad.clone();
                minus.tensors_mut().nth(ti).unwrap().data[ci] -= h;
                let lp = fmt.dequantize(loss_and_grads(&m, &plus, &b).unwrap().loss);
                let lm = fmt.dequantize(loss_and_grads(&m, &minus, &b).unwrap().loss);
                let fd = (lp - lm) / (2.0 * fmt.dequantize(h));
                let g = fmt.dequantize(out.grads.tensors().nth(ti).unwrap().data[ci]);
                assert!((fd - g).abs() <= 10.0 * tau, "tensor {ti} coord {ci}: {fd} vs {g}");
                checked += 1;
            }
        }
        assert!(checked > 20);
    }
}
