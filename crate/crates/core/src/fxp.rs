//! Deterministic fixed-point arithmetic.
//!
//! Values are two's-complement `i64` raws with `q` fractional bits and `b`
//! integer bits. Every operation is range checked: a result with
//! `|raw| >= 2^(b+q)` is a [`Error::RangeOverflow`], never a wraparound.
//! Products are formed in `i128` and rescaled with round-half-to-even.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FxpFormat {
    int_bits: u8,
    frac_bits: u8,
}

impl Default for FxpFormat {
    fn default() -> Self {
        FxpFormat {
            int_bits: 14,
            frac_bits: 14,
        }
    }
}

impl FxpFormat {
    pub fn new(int_bits: u8, frac_bits: u8) -> Result<Self> {
        if !(1..=32).contains(&int_bits)
            || !(1..=32).contains(&frac_bits)
            || int_bits as u32 + frac_bits as u32 > 62
        {
            return Err(Error::InvalidFormat(format!(
                "b={int_bits}, q={frac_bits} (need 1<=b,q<=32, b+q<=62)"
            )));
        }
        Ok(FxpFormat {
            int_bits,
            frac_bits,
        })
    }

    pub fn int_bits(&self) -> u32 {
        self.int_bits as u32
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits as u32
    }

    /// `S = 2^q`.
    pub fn scale(&self) -> i64 {
        1i64 << self.frac_bits
    }

    /// Exclusive bound on `|raw|`.
    pub fn limit(&self) -> i64 {
        1i64 << (self.int_bits + self.frac_bits)
    }

    pub fn max_raw(&self) -> i64 {
        self.limit() - 1
    }

    /// Weight of one raw unit, `2^-q`.
    pub fn ulp(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    /// Worst-case error of one round-to-nearest step, `2^(-q-1)`.
    pub fn half_ulp(&self) -> f64 {
        self.ulp() / 2.0
    }

    pub fn one(&self) -> i64 {
        self.scale()
    }

    #[inline]
    pub fn check(&self, raw: i128, op: &'static str) -> Result<i64> {
        let lim = self.limit() as i128;
        if raw <= -lim || raw >= lim {
            return Err(Error::RangeOverflow(op));
        }
        Ok(raw as i64)
    }

    pub fn to_bytes(&self) -> [u8; 2] {
        [self.int_bits, self.frac_bits]
    }

    pub fn from_bytes(bytes: [u8; 2]) -> Result<Self> {
        FxpFormat::new(bytes[0], bytes[1])
    }

    pub fn quantize(&self, x: f64) -> Result<i64> {
        if !x.is_finite() || x.abs() >= (self.int_bits as f64).exp2() {
            return Err(Error::RangeOverflow("quantize"));
        }
        // Scaling by a power of two is exact in binary floating point, so the
        // only rounding is the ties-to-even step below.
        let scaled = x * (self.frac_bits as f64).exp2();
        self.check(scaled.round_ties_even() as i128, "quantize")
    }

    pub fn dequantize(&self, raw: i64) -> f64 {
        raw as f64 * self.ulp()
    }

    #[inline]
    pub fn add(&self, a: i64, b: i64) -> Result<i64> {
        self.check(a as i128 + b as i128, "add")
    }

    #[inline]
    pub fn sub(&self, a: i64, b: i64) -> Result<i64> {
        self.check(a as i128 - b as i128, "sub")
    }

    #[inline]
    pub fn mul(&self, a: i64, b: i64) -> Result<i64> {
        self.check(
            round_shift(a as i128 * b as i128, self.frac_bits as u32),
            "mul",
        )
    }

    /// Dot product with exact `i128` accumulation and a single rescale.
    #[inline]
    pub fn dot(&self, a: &[i64], b: &[i64]) -> Result<i64> {
        debug_assert_eq!(a.len(), b.len());
        let mut acc: i128 = 0;
        for (x, y) in a.iter().zip(b) {
            acc += *x as i128 * *y as i128;
        }
        self.check(round_shift(acc, self.frac_bits as u32), "dot")
    }

    /// Dot product over arbitrary index pairs, rounding once.
    #[inline]
    pub fn dot_iter(&self, pairs: impl IntoIterator<Item = (i64, i64)>) -> Result<i64> {
        let acc: i128 = pairs.into_iter().map(|(x, y)| x as i128 * y as i128).sum();
        self.check(round_shift(acc, self.frac_bits as u32), "dot")
    }

    /// Strided dot product: `sum_k a[k] * b[offset + k * stride]`.
    #[inline]
    pub fn dot_strided(&self, a: &[i64], b: &[i64], offset: usize, stride: usize) -> Result<i64> {
        let mut acc: i128 = 0;
        for (k, x) in a.iter().enumerate() {
            acc += *x as i128 * b[offset + k * stride] as i128;
        }
        self.check(round_shift(acc, self.frac_bits as u32), "dot")
    }

    /// `a / b` in real terms: `round(a * S / b)`.
    pub fn div(&self, a: i64, b: i64) -> Result<i64> {
        if b == 0 {
            return Err(Error::RangeOverflow("div by zero"));
        }
        self.check(
            div_round(a as i128 * self.scale() as i128, b as i128),
            "div",
        )
    }

    /// Divide a raw by a plain integer count.
    pub fn div_int(&self, a: i64, n: i64) -> Result<i64> {
        if n == 0 {
            return Err(Error::RangeOverflow("div by zero"));
        }
        self.check(div_round(a as i128, n as i128), "div_int")
    }
}

/// `round_half_even(v / 2^shift)`.
#[inline]
pub fn round_shift(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let floor = v >> shift;
    let rem = v - (floor << shift);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// `round_half_even(n / d)` for any nonzero `d`.
pub fn div_round(n: i128, d: i128) -> i128 {
    let (n, d) = if d < 0 { (-n, -d) } else { (n, d) };
    let floor = n.div_euclid(d);
    let rem = n.rem_euclid(d);
    let twice = 2 * rem;
    if twice > d || (twice == d && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// A single fixed-point scalar tagged with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FxpValue {
    raw: i64,
    format: FxpFormat,
}

impl FxpValue {
    pub fn from_raw(raw: i64, format: FxpFormat) -> Result<Self> {
        let raw = format.check(raw as i128, "from_raw")?;
        Ok(FxpValue { raw, format })
    }

    pub fn zero(format: FxpFormat) -> Self {
        FxpValue { raw: 0, format }
    }

    pub fn raw(&self) -> i64 {
        self.raw
    }

    pub fn format(&self) -> FxpFormat {
        self.format
    }

    pub fn to_f64(&self) -> f64 {
        self.format.dequantize(self.raw)
    }

    pub fn to_le_bytes(&self) -> [u8; 8] {
        self.raw.to_le_bytes()
    }

    fn same_format(&self, other: &FxpValue) -> Result<FxpFormat> {
        if self.format != other.format {
            return Err(Error::InvalidFormat("operands use different formats".into()));
        }
        Ok(self.format)
    }
}

pub fn quantize(x: f64, format: FxpFormat) -> Result<FxpValue> {
    Ok(FxpValue {
        raw: format.quantize(x)?,
        format,
    })
}

pub fn dequantize(v: FxpValue) -> f64 {
    v.to_f64()
}

pub fn mul_rescale(a: FxpValue, b: FxpValue) -> Result<FxpValue> {
    let format = a.same_format(&b)?;
    Ok(FxpValue {
        raw: format.mul(a.raw, b.raw)?,
        format,
    })
}

pub fn add_checked(a: FxpValue, b: FxpValue) -> Result<FxpValue> {
    let format = a.same_format(&b)?;
    Ok(FxpValue {
        raw: format.add(a.raw, b.raw)?,
        format,
    })
}

pub fn sub_checked(a: FxpValue, b: FxpValue) -> Result<FxpValue> {
    let format = a.same_format(&b)?;
    Ok(FxpValue {
        raw: format.sub(a.raw, b.raw)?,
        format,
    })
}

/// Kinds of operations that contribute to the error budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Quantize,
    Mul,
    /// A lookup-based nonlinearity with the given certified absolute bound.
    Nonlinearity(f64),
}

/// Accumulated worst-case error bounds; `tau = eps_fxp + delta_sm` always.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    frac_bits: u32,
    eps_fxp: f64,
    delta_sm: f64,
    tau: f64,
}

impl ErrorBudget {
    pub fn new(format: FxpFormat) -> Self {
        ErrorBudget {
            frac_bits: format.frac_bits(),
            eps_fxp: 0.0,
            delta_sm: 0.0,
            tau: 0.0,
        }
    }

    pub fn eps_fxp(&self) -> f64 {
        self.eps_fxp
    }

    pub fn delta_sm(&self) -> f64 {
        self.delta_sm
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn per_op_bound(&self) -> f64 {
        (-(self.frac_bits as f64) - 1.0).exp2()
    }

    pub fn combine(&self, other: &ErrorBudget) -> ErrorBudget {
        let eps_fxp = self.eps_fxp + other.eps_fxp;
        let delta_sm = self.delta_sm + other.delta_sm;
        ErrorBudget {
            frac_bits: self.frac_bits,
            eps_fxp,
            delta_sm,
            tau: eps_fxp + delta_sm,
        }
    }
}

pub fn accumulate_error(budget: ErrorBudget, op: OpKind, count: u64) -> ErrorBudget {
    let mut out = budget;
    match op {
        OpKind::Quantize | OpKind::Mul => out.eps_fxp += count as f64 * budget.per_op_bound(),
        OpKind::Nonlinearity(bound) => out.delta_sm += count as f64 * bound,
    }
    out.tau = out.eps_fxp + out.delta_sm;
    out
}

/// Operation counters gathered by an instrumented computation; converted to an
/// [`ErrorBudget`] on demand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpTally {
    pub quantize: u64,
    pub mul: u64,
    /// `(certified bound, count)` per lookup function, keyed by function name.
    pub nonlinear: std::collections::BTreeMap<String, (f64, u64)>,
}

impl OpTally {
    pub fn mul(&mut self, n: u64) {
        self.mul += n;
    }

    pub fn lookup(&mut self, name: &str, bound: f64, n: u64) {
        let e = self.nonlinear.entry(name.to_string()).or_insert((bound, 0));
        e.0 = e.0.max(bound);
        e.1 += n;
    }

    pub fn merge(&mut self, other: &OpTally) {
        self.quantize += other.quantize;
        self.mul += other.mul;
        for (k, (b, n)) in &other.nonlinear {
            self.lookup(k, *b, *n);
        }
    }

    pub fn budget(&self, format: FxpFormat) -> ErrorBudget {
        let mut b = ErrorBudget::new(format);
        b = accumulate_error(b, OpKind::Quantize, self.quantize);
        b = accumulate_error(b, OpKind::Mul, self.mul);
        for (bound, n) in self.nonlinear.values() {
            b = accumulate_error(b, OpKind::Nonlinearity(*bound), *n);
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q14() -> FxpFormat {
        FxpFormat::default()
    }

    #[test]
    fn format_bounds() {
        assert!(FxpFormat::new(0, 14).is_err());
        assert!(FxpFormat::new(14, 33).is_err());
        assert!(FxpFormat::new(32, 31).is_err());
        assert!(FxpFormat::new(32, 30).is_ok());
        let f = FxpFormat::from_bytes(q14().to_bytes()).unwrap();
        assert_eq!(f, q14());
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0, q14()).unwrap().raw(), 0);
        assert_eq!(quantize(1.0, q14()).unwrap().raw(), 16384);
        assert_eq!(quantize(-1.0, q14()).unwrap().raw(), -16384);
        assert!(matches!(
            quantize(16384.0, q14()),
            Err(Error::RangeOverflow(_))
        ));
        assert!(quantize(f64::NAN, q14()).is_err());
    }

    #[test]
    fn rounding_is_half_even() {
        // 0.5 ulp ties go to the even neighbour.
        let f = q14();
        assert_eq!(f.quantize(0.5 * f.ulp()).unwrap(), 0);
        assert_eq!(f.quantize(1.5 * f.ulp()).unwrap(), 2);
        assert_eq!(f.quantize(-1.5 * f.ulp()).unwrap(), -2);
        assert_eq!(round_shift(3, 1), 2);
        assert_eq!(round_shift(5, 1), 2);
        assert_eq!(round_shift(-3, 1), -2);
        assert_eq!(round_shift(-5, 1), -2);
        assert_eq!(div_round(7, 2), 4);
        assert_eq!(div_round(5, 2), 2);
        assert_eq!(div_round(-5, 2), -2);
        assert_eq!(div_round(5, -2), -2);
        assert_eq!(div_round(10, 3), 3);
    }

    #[test]
    fn mul_and_add_examples() {
        let f = q14();
        let one = quantize(1.0, f).unwrap();
        assert_eq!(mul_rescale(one, one).unwrap(), one);
        let two = quantize(2.0, f).unwrap();
        let half = quantize(0.5, f).unwrap();
        assert_eq!(mul_rescale(two, half).unwrap(), one);
        let neg = quantize(-1.0, f).unwrap();
        assert_eq!(add_checked(one, neg).unwrap().raw(), 0);
        let q = quantize(0.25, f).unwrap();
        assert_eq!(add_checked(half, q).unwrap(), quantize(0.75, f).unwrap());
        let max = FxpValue::from_raw(f.max_raw(), f).unwrap();
        assert!(matches!(add_checked(max, one), Err(Error::RangeOverflow(_))));
        let big = quantize(200.0, f).unwrap();
        assert!(matches!(mul_rescale(big, big), Err(Error::RangeOverflow(_))));
    }

    #[test]
    fn mixed_formats_rejected() {
        let a = quantize(1.0, q14()).unwrap();
        let b = quantize(1.0, FxpFormat::new(14, 20).unwrap()).unwrap();
        assert!(mul_rescale(a, b).is_err());
    }

    #[test]
    fn budget_accumulation() {
        let b = ErrorBudget::new(q14());
        assert_eq!(accumulate_error(b, OpKind::Quantize, 0), b);
        let b4 = accumulate_error(b, OpKind::Mul, 4);
        assert_eq!(b4.eps_fxp(), 4.0 * 2f64.powi(-15));
        assert_eq!(b4.tau(), b4.eps_fxp());
        let b5 = accumulate_error(b4, OpKind::Nonlinearity(1e-3), 2);
        assert_eq!(b5.delta_sm(), 2e-3);
        assert_eq!(b5.tau(), b5.eps_fxp() + b5.delta_sm());
    }
}
