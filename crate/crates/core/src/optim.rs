//! Fixed-point AdamW, gradient clipping, the learning-rate schedule and the
//! step hash chain.

use serde::{Deserialize, Serialize};

use crate::digest::{tag, Decoder, Digest, Encoder, Hasher};
use crate::error::{Error, Result};
use crate::fxp::{round_shift, FxpFormat, OpTally};
use crate::lut::{recip_wide, rsqrt_wide, TableSet};
use crate::model::Adapters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleId {
    CosineWarmup,
    Constant,
}

impl ScheduleId {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleId::CosineWarmup => "cosine_warmup",
            ScheduleId::Constant => "constant",
        }
    }
}

/// Optimizer constants as raws in one format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub format: FxpFormat,
    pub beta1: i64,
    pub beta2: i64,
    pub epsilon: i64,
    pub weight_decay: i64,
    pub clip_norm: i64,
    pub base_lr: i64,
    pub warmup_fraction: f64,
    pub schedule: ScheduleId,
}

impl AdamWHyper {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        format: FxpFormat,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        weight_decay: f64,
        clip_norm: f64,
        base_lr: f64,
        warmup_fraction: f64,
        schedule: ScheduleId,
    ) -> Result<AdamWHyper> {
        let bad = |m: &str| Err(Error::Schema(format!("optimizer: {m}")));
        if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        let positive = |x: f64| x > 0.0;
        if !positive(epsilon) || weight_decay < 0.0 || !positive(clip_norm) || base_lr < 0.0 {
            return bad("epsilon and clip_norm must be positive, decay and rate nonnegative");
        }
        if !(0.0..1.0).contains(&warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        let mut h = AdamWHyper {
            format,
            beta1: format.quantize(beta1)?,
            beta2: format.quantize(beta2)?,
            epsilon: 0,
            weight_decay: format.quantize(weight_decay)?,
            clip_norm: format.quantize(clip_norm)?,
            base_lr: format.quantize(base_lr)?,
            warmup_fraction,
            schedule,
        };
        let moment_scale = ((format.frac_bits() + h.moment_bits()) as i32).min(62);
        h.epsilon = (epsilon * (moment_scale as f64).exp2()).round().min(i64::MAX as f64) as i64;
        if h.beta1 <= 0 || h.beta1 >= format.one() || h.beta2 <= 0 || h.beta2 >= format.one() {
            return bad("betas collapse to 0 or 1 at this precision");
        }
        if h.clip_norm <= 0 {
            return bad("clip_norm collapses to 0 at this precision");
        }
        Ok(h)
    }

    /// `(0.9, 0.95, 1e-8, 0.05)`, clip 1.0, base rate 0.01, 3% warmup.
    pub fn standard(format: FxpFormat) -> AdamWHyper {
        AdamWHyper::new(format, 0.9, 0.95, 1e-8, 0.05, 1.0, 0.01, 0.03, ScheduleId::CosineWarmup)
            .expect("defaults are valid")
    }

    /// Extra fraction bits carried by the moments: `q` rounded down to even,
    /// so the second moment of a one-ulp gradient is still representable.
    pub fn moment_bits(&self) -> u32 {
        self.format.frac_bits() & !1
    }

    /// `epsilon` at moment scale, at least one raw unit.
    pub fn effective_epsilon(&self) -> i64 {
        self.epsilon.max(1)
    }
}

/// First and second moments, stored with [`AdamWHyper::moment_bits`] extra
/// fraction bits over the parameter format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdamWState {
    pub m: Adapters,
    pub v: Adapters,
    pub t: u64,
}

impl AdamWState {
    pub fn new(like: &Adapters) -> AdamWState {
        AdamWState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn digests(&self, fmt: FxpFormat) -> Vec<Digest> {
        let mut out = self.m.digests("m.", fmt);
        out.extend(self.v.digests("v.", fmt));
        out
    }

    pub fn encode(&self, fmt: FxpFormat, e: &mut Encoder) {
        e.u64(self.t);
        self.m.encode(fmt, e);
        self.v.encode(fmt, e);
    }

    pub fn decode_like(like: &Adapters, d: &mut Decoder<'_>) -> Result<AdamWState> {
        let t = d.u64()?;
        let m = Adapters::decode_like(like, d)?;
        let v = Adapters::decode_like(like, d)?;
        Ok(AdamWState { m, v, t })
    }
}

fn wide(v: i128, op: &'static str) -> Result<i64> {
    i64::try_from(v).map_err(|_| Error::RangeOverflow(op))
}

/// `β^n` by square-and-multiply, rounding after each product.
fn pow_fx(fmt: FxpFormat, base: i64, mut n: u64) -> Result<i64> {
    let mut acc = fmt.one();
    let mut b = base;
    while n > 0 {
        if n & 1 == 1 {
            acc = fmt.mul(acc, b)?;
        }
        n >>= 1;
        if n > 0 {
            b = fmt.mul(b, b)?;
        }
    }
    Ok(acc)
}

/// Rescales the gradients to `clip_norm` when their global L2 norm exceeds
/// it. Returns the (possibly unchanged) gradients and whether clipping fired.
pub fn clip_gradients(
    grads: &Adapters,
    hyper: &AdamWHyper,
    tables: &TableSet,
    tally: &mut OpTally,
) -> Result<(Adapters, bool)> {
    let fmt = hyper.format;
    let sumsq: i128 = grads
        .tensors()
        .flat_map(|t| t.data.iter())
        .map(|g| *g as i128 * *g as i128)
        .sum();
    let c = hyper.clip_norm as i128;
    if sumsq <= c * c {
        return Ok((grads.clone(), false));
    }
    let norm2 = round_shift(sumsq, fmt.frac_bits()).max(1);
    let factor = fmt.mul(hyper.clip_norm, rsqrt_wide(&tables.rsqrt, norm2)?)?;
    let mut out = grads.clone();
    let mut n = 0u64;
    for t in out.tensors_mut() {
        for g in t.data.iter_mut() {
            *g = fmt.mul(*g, factor)?;
            n += 1;
        }
    }
    tally.mul(n + 2);
    tally.lookup("rsqrt", tables.rsqrt.max_error(), 1);
    Ok((out, true))
}

/// One AdamW update of the adapter tensors. `grads` must already be clipped.
pub fn adamw_step(
    params: &Adapters,
    state: &AdamWState,
    grads: &Adapters,
    hyper: &AdamWHyper,
    eta: i64,
    tables: &TableSet,
    tally: &mut OpTally,
) -> Result<(Adapters, AdamWState)> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(Error::Shape("optimizer tensors do not match adapters".into()));
    }
    let fmt = hyper.format;
    let q = fmt.frac_bits();
    let e = hyper.moment_bits();
    let one = fmt.one();
    let s = one as i128;
    let (b1, b2) = (hyper.beta1 as i128, hyper.beta2 as i128);
    let (c1, c2) = (s - b1, s - b2);
    let n = state.t + 1;
    let rc1 = recip_wide(&tables.recip, one - pow_fx(fmt, hyper.beta1, n)?)? as i128;
    let rc2 = recip_wide(&tables.recip, one - pow_fx(fmt, hyper.beta2, n)?)? as i128;
    let eps = hyper.effective_epsilon() as i128;
    let eta_lambda = fmt.mul(eta, hyper.weight_decay)?;
    let eta = eta as i128;

    let mut new_params = params.clone();
    let mut new_state = AdamWState {
        m: state.m.clone(),
        v: state.v.clone(),
        t: n,
    };
    let mut count = 0u64;
    let tensors = new_params
        .tensors_mut()
        .zip(new_state.m.tensors_mut())
        .zip(new_state.v.tensors_mut())
        .zip(grads.tensors());
    for (((theta, m), v), g) in tensors {
        for i in 0..theta.data.len() {
            let gi = g.data[i] as i128;
            let mi = wide(round_shift(b1 * m.data[i] as i128 + ((c1 * gi) << e), q), "adamw m")?;
            let vi = wide(
                round_shift(((b2 * v.data[i] as i128) << (q - e)) + c2 * gi * gi, 2 * q - e),
                "adamw v",
            )?;
            let m_hat = round_shift(mi as i128 * rc1, q);
            let v_hat = round_shift(vi as i128 * rc2, q);
            let r = (rsqrt_wide(&tables.rsqrt, (v_hat + eps).max(1))? as i128) << (e / 2);
            let upd = fmt.check(round_shift(eta * m_hat * r, 2 * q + e), "adamw update")?;
            let decay = fmt.mul(eta_lambda, theta.data[i])?;
            theta.data[i] = fmt.sub(fmt.sub(theta.data[i], upd)?, decay)?;
            m.data[i] = mi;
            v.data[i] = vi;
            count += 1;
        }
    }
    tally.mul(7 * count + 1);
    tally.lookup("rsqrt", tables.rsqrt.max_error(), count);
    tally.lookup("recip", tables.recip.max_error(), 2);
    Ok((new_params, new_state))
}

/// Recomputes the update and requires bit-exact agreement.
#[allow(clippy::too_many_arguments)]
pub fn verify_adamw_transition(
    pre_state: &AdamWState,
    post_state: &AdamWState,
    grads: &Adapters,
    hyper: &AdamWHyper,
    eta: i64,
    pre_params: &Adapters,
    post_params: &Adapters,
    tables: &TableSet,
) -> Result<()> {
    let (want_params, want_state) = adamw_step(
        pre_params,
        pre_state,
        grads,
        hyper,
        eta,
        tables,
        &mut OpTally::default(),
    )?;
    if post_state.t != want_state.t {
        return Err(Error::ConstraintViolation {
            tensor: "t".into(),
            coordinate: 0,
        });
    }
    let groups = [
        ("", &want_params, post_params),
        ("m.", &want_state.m, &post_state.m),
        ("v.", &want_state.v, &post_state.v),
    ];
    for (prefix, want, got) in groups {
        if !want.same_shape(got) {
            return Err(Error::ConstraintViolation {
                tensor: format!("{prefix}shape"),
                coordinate: 0,
            });
        }
        for ((name, w), g) in want.names().iter().zip(want.tensors()).zip(got.tensors()) {
            if let Some(i) = w.data.iter().zip(&g.data).position(|(a, b)| a != b) {
                return Err(Error::ConstraintViolation {
                    tensor: format!("{prefix}{name}"),
                    coordinate: i,
                });
            }
        }
    }
    Ok(())
}

pub fn warmup_steps(hyper: &AdamWHyper, total: u64) -> u64 {
    // The small guard keeps exact products such as 0.03 * 100 from rounding
    // up past an integer.
    (hyper.warmup_fraction * total as f64 - 1e-9).ceil().max(0.0) as u64
}

/// Learning rate for step `t` of `total`: linear warmup, then cosine decay to
/// zero through the cosine table.
pub fn schedule_eta(hyper: &AdamWHyper, t: u64, total: u64, tables: &TableSet) -> Result<i64> {
    if t >= total {
        return Err(Error::IndexOutOfRange { index: t, len: total });
    }
    let fmt = hyper.format;
    if hyper.schedule == ScheduleId::Constant {
        return Ok(hyper.base_lr);
    }
    let w = warmup_steps(hyper, total);
    if t < w {
        return fmt.check(
            crate::fxp::div_round(hyper.base_lr as i128 * t as i128, w as i128),
            "schedule",
        );
    }
    let progress = fmt.check(
        crate::fxp::div_round((t - w) as i128 * fmt.scale() as i128, (total - w) as i128),
        "schedule",
    )?;
    fmt.mul(hyper.base_lr, tables.cos_decay.eval(progress)?)
}

/// Double-precision schedule used as a reference.
pub fn schedule_eta_f64(base: f64, warmup_fraction: f64, t: u64, total: u64) -> f64 {
    let w = (warmup_fraction * total as f64 - 1e-9).ceil().max(0.0) as u64;
    if t < w {
        return base * t as f64 / w as f64;
    }
    let p = (t - w) as f64 / (total - w) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepMeta {
    pub batch_commitment: Digest,
    pub step: u64,
    pub epoch: u64,
    pub schedule_id: String,
}

impl StepMeta {
    pub fn encode(&self, e: &mut Encoder) {
        e.digest(&self.batch_commitment)
            .u64(self.step)
            .u64(self.epoch)
            .str(&self.schedule_id);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<StepMeta> {
        Ok(StepMeta {
            batch_commitment: d.digest()?,
            step: d.u64()?,
            epoch: d.u64()?,
            schedule_id: d.string()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainLink {
    pub h_prev: Digest,
    pub h_next: Digest,
    pub delta_digest: Digest,
    pub eta: i64,
    pub meta: StepMeta,
}

pub fn chain_digest(h_prev: &Digest, delta_digest: &Digest, eta: i64, meta: &StepMeta) -> Digest {
    let mut e = Encoder::new();
    meta.encode(&mut e);
    let mut h = Hasher::new(tag::CHAIN);
    h.digest(h_prev)
        .digest(delta_digest)
        .i64(eta)
        .update(e.as_slice());
    h.finish()
}

pub fn extend_chain(h_prev: Digest, delta_digest: Digest, eta: i64, meta: StepMeta) -> ChainLink {
    ChainLink {
        h_next: chain_digest(&h_prev, &delta_digest, eta, &meta),
        h_prev,
        delta_digest,
        eta,
        meta,
    }
}

impl ChainLink {
    pub fn verify(&self) -> Result<()> {
        if chain_digest(&self.h_prev, &self.delta_digest, self.eta, &self.meta) != self.h_next {
            return Err(Error::ChainBreak(format!(
                "step {} link does not recompute",
                self.meta.step
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn setup() -> (FxpFormat, TableSet, AdamWHyper, Adapters) {
        let fmt = FxpFormat::default();
        let tables = TableSet::standard(fmt).unwrap();
        let hyper = AdamWHyper::standard(fmt);
        let ad = Adapters::init(&ModelConfig::tiny(), fmt);
        (fmt, tables, hyper, ad)
    }

    fn random_like(like: &Adapters, fmt: FxpFormat, seed: u64, scale: f64) -> Adapters {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut out = like.clone();
        for t in out.tensors_mut() {
            for v in t.data.iter_mut() {
                *v = fmt.quantize(rng.random_range(-scale..scale)).unwrap();
            }
        }
        out
    }

    #[test]
    fn decay_only_step() {
        let (fmt, tables, hyper, ad) = setup();
        let st = AdamWState::new(&ad);
        let eta = fmt.quantize(0.01).unwrap();
        let (p, s) = adamw_step(&ad, &st, &ad.zeros_like(), &hyper, eta, &tables, &mut OpTally::default()).unwrap();
        assert!(s.m.tensors().chain(s.v.tensors()).all(Tensor::is_zero));
        let el = fmt.mul(eta, hyper.weight_decay).unwrap();
        for (a, b) in ad.tensors().zip(p.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*y, x - fmt.mul(el, *x).unwrap());
            }
        }
    }

    #[test]
    fn zero_rate_keeps_params() {
        let (fmt, tables, hyper, ad) = setup();
        let g = random_like(&ad, fmt, 1, 0.1);
        let st = AdamWState::new(&ad);
        let (p, s) = adamw_step(&ad, &st, &g, &hyper, 0, &tables, &mut OpTally::default()).unwrap();
        assert_eq!(p, ad);
        assert!(!s.m.tensors().all(Tensor::is_zero));
        assert_eq!(s.t, 1);
    }

    #[test]
    fn transition_checks() {
        let (fmt, tables, hyper, ad) = setup();
        let g = random_like(&ad, fmt, 2, 0.1);
        let st = AdamWState::new(&ad);
        let eta = fmt.quantize(0.01).unwrap();
        let (p, s) = adamw_step(&ad, &st, &g, &hyper, eta, &tables, &mut OpTally::default()).unwrap();
        verify_adamw_transition(&st, &s, &g, &hyper, eta, &ad, &p, &tables).unwrap();

        let mut bad = p.clone();
        bad.adapters[1].b.data[3] += 1;
        let e = verify_adamw_transition(&st, &s, &g, &hyper, eta, &ad, &bad, &tables).unwrap_err();
        assert!(matches!(e, Error::ConstraintViolation { ref tensor, coordinate: 3 } if tensor == "blocks.0.wk.B"));

        let (p2, s2) = adamw_step(&ad, &st, &g, &hyper, 2 * eta, &tables, &mut OpTally::default()).unwrap();
        assert!(matches!(
            verify_adamw_transition(&st, &s2, &g, &hyper, eta, &ad, &p2, &tables),
            Err(Error::ConstraintViolation { .. })
        ));
    }

    #[test]
    fn clipping_bounds_norm() {
        let (fmt, tables, hyper, ad) = setup();
        let g = random_like(&ad, fmt, 3, 2.0);
        let (c, fired) = clip_gradients(&g, &hyper, &tables, &mut OpTally::default()).unwrap();
        assert!(fired);
        let norm: f64 = c
            .tensors()
            .flat_map(|t| t.to_f64(fmt))
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!((norm - 1.0).abs() < 0.01, "{norm}");
        let small = random_like(&ad, fmt, 4, 0.001);
        let (c, fired) = clip_gradients(&small, &hyper, &tables, &mut OpTally::default()).unwrap();
        assert!(!fired);
        assert_eq!(c, small);
    }

    #[test]
    fn schedule_shape() {
        let (fmt, tables, hyper, _) = setup();
        assert_eq!(schedule_eta(&hyper, 0, 100, &tables).unwrap(), 0);
        assert_eq!(warmup_steps(&hyper, 100), 3);
        let at_w = schedule_eta(&hyper, 3, 100, &tables).unwrap();
        assert!((at_w - hyper.base_lr).abs() <= 1);
        for t in 0..100 {
            let got = fmt.dequantize(schedule_eta(&hyper, t, 100, &tables).unwrap());
            let want = schedule_eta_f64(0.01, 0.03, t, 100);
            // base-rate quantization, one product and the cosine lookup
            let tau = fmt.ulp() + 2.0 * fmt.half_ulp() + tables.cos_decay.max_error();
            assert!((got - want).abs() <= tau, "t={t}: {got} vs {want}");
        }
        assert!(schedule_eta(&hyper, 100, 100, &tables).is_err());
    }

    #[test]
    fn chain_links() {
        let meta = StepMeta {
            batch_commitment: Digest([4; 32]),
            step: 3,
            epoch: 0,
            schedule_id: "cosine_warmup".into(),
        };
        let a = extend_chain(Digest([1; 32]), Digest([2; 32]), 164, meta.clone());
        let b = extend_chain(Digest([1; 32]), Digest([2; 32]), 164, meta.clone());
        assert_eq!(a, b);
        a.verify().unwrap();
        let mut m2 = meta;
        m2.step = 4;
        assert_ne!(extend_chain(Digest([1; 32]), Digest([2; 32]), 164, m2).h_next, a.h_next);
        let mut bad = a.clone();
        bad.eta += 1;
        assert!(matches!(bad.verify(), Err(Error::ChainBreak(_))));
    }

    #[test]
    fn pow_by_squaring() {
        let fmt = FxpFormat::default();
        let b = fmt.quantize(0.9).unwrap();
        assert_eq!(pow_fx(fmt, b, 0).unwrap(), fmt.one());
        assert_eq!(pow_fx(fmt, b, 1).unwrap(), b);
        let p10 = fmt.dequantize(pow_fx(fmt, b, 10).unwrap());
        assert!((p10 - 0.9f64.powi(10)).abs() < 1e-3);
    }
}
