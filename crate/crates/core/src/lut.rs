//! Lookup tables for the nonlinearities, evaluated with fixed-point linear
//! interpolation and certified by checking every representable input in the
//! domain against a reference implementation.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::digest::{tag, Decoder, Digest, Encoder, Hasher};
use crate::error::{Error, Result};
use crate::fxp::{round_shift, FxpFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFn {
    Exp,
    Gelu,
    GeluPrime,
    Rsqrt,
    Recip,
    Ln,
    /// `0.5 * (1 + cos(pi * x))` on `[0, 1]`, the cosine-decay factor.
    CosDecay,
}

impl TableFn {
    pub const ALL: [TableFn; 7] = [
        TableFn::Exp,
        TableFn::Gelu,
        TableFn::GeluPrime,
        TableFn::Rsqrt,
        TableFn::Recip,
        TableFn::Ln,
        TableFn::CosDecay,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TableFn::Exp => "exp",
            TableFn::Gelu => "gelu",
            TableFn::GeluPrime => "gelu_prime",
            TableFn::Rsqrt => "rsqrt",
            TableFn::Recip => "recip",
            TableFn::Ln => "ln",
            TableFn::CosDecay => "cos_decay",
        }
    }

    fn code(&self) -> u8 {
        match self {
            TableFn::Exp => 0,
            TableFn::Gelu => 1,
            TableFn::GeluPrime => 2,
            TableFn::Rsqrt => 3,
            TableFn::Recip => 4,
            TableFn::Ln => 5,
            TableFn::CosDecay => 6,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        TableFn::ALL
            .into_iter()
            .find(|f| f.code() == c)
            .ok_or_else(|| Error::Decode(format!("unknown table function {c}")))
    }

    /// Reference implementation. Uses `libm` so table contents do not depend
    /// on the platform's math library.
    pub fn reference(&self, x: f64) -> f64 {
        const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
        match self {
            TableFn::Exp => libm::exp(x),
            TableFn::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            TableFn::GeluPrime => {
                0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
                    + x * FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x)
            }
            TableFn::Rsqrt => 1.0 / libm::sqrt(x),
            TableFn::Recip => 1.0 / x,
            TableFn::Ln => libm::log(x),
            TableFn::CosDecay => 0.5 * (1.0 + libm::cos(std::f64::consts::PI * x)),
        }
    }
}

/// Everything needed to regenerate a table bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TableSpec {
    pub function: TableFn,
    pub format: FxpFormat,
    /// Domain bounds as raw fixed-point values (inclusive).
    pub lo_raw: i64,
    pub hi_raw: i64,
    /// Entries are spaced `2^-stride_log2` apart.
    pub stride_log2: u32,
}

impl TableSpec {
    /// Shipped defaults for a format.
    pub fn standard(function: TableFn, format: FxpFormat) -> TableSpec {
        let q = format.frac_bits();
        let s = format.scale();
        let (lo_raw, hi_raw, stride_log2) = match function {
            TableFn::Exp | TableFn::Gelu | TableFn::GeluPrime => (-8 * s, 8 * s, q.min(14)),
            TableFn::Rsqrt => (1, 16 * s, q.min(14)),
            TableFn::Recip => ((s >> 10).max(1), 2 * s, q.min(14)),
            TableFn::Ln => (s, 256 * s, q.min(8)),
            TableFn::CosDecay => (0, s, q.min(14)),
        };
        let spec = TableSpec {
            function,
            format,
            lo_raw,
            hi_raw,
            stride_log2,
        };
        spec.aligned()
    }

    /// Same function and domain with a coarser stride.
    pub fn with_stride(mut self, stride_log2: u32) -> TableSpec {
        self.stride_log2 = stride_log2;
        self.aligned()
    }

    fn aligned(mut self) -> TableSpec {
        // Round the lower bound up to the stride grid so the domain starts on
        // an entry.
        let step = self.step();
        if self.lo_raw.rem_euclid(step) != 0 {
            self.lo_raw += step - self.lo_raw.rem_euclid(step);
        }
        let span = self.hi_raw - self.lo_raw;
        self.hi_raw = self.lo_raw + span - span.rem_euclid(step);
        self
    }

    fn shift(&self) -> u32 {
        self.format.frac_bits() - self.stride_log2
    }

    fn step(&self) -> i64 {
        1i64 << (self.format.frac_bits().saturating_sub(self.stride_log2))
    }

    pub fn entry_count(&self) -> usize {
        ((self.hi_raw - self.lo_raw) / self.step()) as usize + 1
    }

    pub fn lo(&self) -> f64 {
        self.format.dequantize(self.lo_raw)
    }

    pub fn hi(&self) -> f64 {
        self.format.dequantize(self.hi_raw)
    }

    fn validate(&self) -> Result<()> {
        if self.stride_log2 > self.format.frac_bits() {
            return Err(Error::Schema(format!(
                "{} table stride 2^-{} finer than format",
                self.function.name(),
                self.stride_log2
            )));
        }
        if self.lo_raw >= self.hi_raw
            || (self.hi_raw - self.lo_raw) % self.step() != 0
            || self.lo_raw % self.step() != 0
        {
            return Err(Error::Schema(format!(
                "{} table domain not aligned to stride",
                self.function.name()
            )));
        }
        let positive_only = matches!(
            self.function,
            TableFn::Rsqrt | TableFn::Recip | TableFn::Ln
        );
        if positive_only && self.lo_raw <= 0 {
            return Err(Error::Schema(format!(
                "{} table domain must be positive",
                self.function.name()
            )));
        }
        if self.entry_count() > 1 << 22 {
            return Err(Error::Schema(format!(
                "{} table too large ({} entries)",
                self.function.name(),
                self.entry_count()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u8(self.function.code())
            .u8(self.format.int_bits() as u8)
            .u8(self.format.frac_bits() as u8)
            .i64(self.lo_raw)
            .i64(self.hi_raw)
            .u8(self.stride_log2 as u8);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<TableSpec> {
        let function = TableFn::from_code(d.u8()?)?;
        let format = FxpFormat::from_bytes([d.u8()?, d.u8()?])?;
        Ok(TableSpec {
            function,
            format,
            lo_raw: d.i64()?,
            hi_raw: d.i64()?,
            stride_log2: d.u8()? as u32,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LookupTable {
    spec: TableSpec,
    entries: Vec<i64>,
    max_error: f64,
    digest: Digest,
}

impl LookupTable {
    pub fn build(spec: TableSpec) -> Result<LookupTable> {
        spec.validate()?;
        let fmt = spec.format;
        let step = spec.step();
        let entries = (0..spec.entry_count())
            .map(|i| {
                let x = fmt.dequantize(spec.lo_raw + i as i64 * step);
                let y = spec.function.reference(x);
                if !y.is_finite() || y.abs() >= (fmt.int_bits() as f64).exp2() {
                    return Err(Error::RangeOverflow("table entry"));
                }
                fmt.quantize(y)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut h = Hasher::new(tag::TABLE);
        let mut e = Encoder::new();
        spec.encode(&mut e);
        h.update(e.as_slice()).raws(&entries);
        let mut table = LookupTable {
            spec,
            entries,
            max_error: 0.0,
            digest: h.finish(),
        };
        table.max_error = table.measure_error();
        Ok(table)
    }

    /// Shared, cached instance; building large tables is not free.
    pub fn cached(spec: TableSpec) -> Result<Arc<LookupTable>> {
        static CACHE: OnceLock<Mutex<HashMap<TableSpec, Arc<LookupTable>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(t) = cache.lock().unwrap().get(&spec) {
            return Ok(t.clone());
        }
        let t = Arc::new(LookupTable::build(spec)?);
        cache.lock().unwrap().insert(spec, t.clone());
        Ok(t)
    }

    /// Maximum absolute error over every representable input in the domain.
    /// Very wide domains (fine formats) are swept on a power-of-two sub-grid
    /// that still includes every entry point.
    fn measure_error(&self) -> f64 {
        const MAX_SAMPLES: i64 = 1 << 22;
        let fmt = self.spec.format;
        let span = self.spec.hi_raw - self.spec.lo_raw;
        let mut stride = 1i64;
        while span / stride > MAX_SAMPLES && stride < self.spec.step() {
            stride <<= 1;
        }
        let mut worst = 0.0f64;
        for x in (self.spec.lo_raw..=self.spec.hi_raw).step_by(stride as usize) {
            let got = fmt.dequantize(self.interp(x));
            let want = self.spec.function.reference(fmt.dequantize(x));
            worst = worst.max((got - want).abs());
        }
        worst
    }

    pub fn spec(&self) -> &TableSpec {
        &self.spec
    }

    pub fn function(&self) -> TableFn {
        self.spec.function
    }

    pub fn max_error(&self) -> f64 {
        self.max_error
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn entries(&self) -> &[i64] {
        &self.entries
    }

    #[inline]
    fn interp(&self, x: i64) -> i64 {
        let off = x - self.spec.lo_raw;
        let shift = self.spec.shift();
        let idx = (off >> shift) as usize;
        let frac = off & ((1i64 << shift) - 1);
        if frac == 0 {
            return self.entries[idx];
        }
        let y0 = self.entries[idx];
        let y1 = self.entries[idx + 1];
        // |y1 - y0| and frac are both far below 2^62, the product fits i128.
        y0 + round_shift((y1 - y0) as i128 * frac as i128, shift) as i64
    }

    pub fn eval(&self, x: i64) -> Result<i64> {
        if x < self.spec.lo_raw || x > self.spec.hi_raw {
            return Err(Error::TableDomain {
                function: self.spec.function.name(),
                value: self.spec.format.dequantize(x),
                lo: self.spec.lo(),
                hi: self.spec.hi(),
            });
        }
        Ok(self.interp(x))
    }

    /// Evaluate after clamping the input into the domain.
    pub fn eval_clamped(&self, x: i64) -> i64 {
        self.interp(x.clamp(self.spec.lo_raw, self.spec.hi_raw))
    }

    /// Table with certification metadata, then entries.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_magic(b"VFTL", 1);
        self.spec.encode(&mut e);
        e.f64(self.max_error).digest(&self.digest).raws(&self.entries);
        e.into_bytes()
    }

    /// Decode and re-certify; rejects files whose entries or declared bound do
    /// not match a fresh build.
    pub fn from_bytes(bytes: &[u8]) -> Result<LookupTable> {
        let (mut d, version) = Decoder::expect_magic(bytes, b"VFTL")?;
        if version != 1 {
            return Err(Error::Decode(format!("unsupported VFTL version {version}")));
        }
        let spec = TableSpec::decode(&mut d)?;
        let declared = d.f64()?;
        let digest = d.digest()?;
        let entries = d.raws()?;
        d.finish()?;
        let fresh = LookupTable::build(spec)?;
        if fresh.entries != entries || fresh.digest != digest || fresh.max_error != declared {
            return Err(Error::Decode(format!(
                "{} table does not match its certification",
                spec.function.name()
            )));
        }
        Ok(fresh)
    }
}

/// Worst-case L1 deviation of the lookup softmax for rows of length `len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxBound {
    /// Entry rounding plus normalization rounding; applies to every row whose
    /// shifted logits stay inside the clip window.
    pub rounding: f64,
    /// Extra worst-case deviation when clipping binds.
    pub clip_tail: f64,
}

impl SoftmaxBound {
    pub fn unclipped(&self) -> f64 {
        self.rounding
    }

    pub fn worst_case(&self) -> f64 {
        self.rounding + self.clip_tail
    }
}

pub fn softmax_bound(exp: &LookupTable, clip_lo: f64, len: usize) -> SoftmaxBound {
    let eps = exp.max_error();
    let l = len as f64;
    let half_ulp = exp.spec().format.half_ulp();
    SoftmaxBound {
        rounding: 2.0 * l * eps / (1.0 - eps) + l * half_ulp,
        clip_tail: 2.0 * (l - 1.0) * libm::exp(clip_lo),
    }
}

/// The tables a computation uses, keyed by function.
#[derive(Debug, Clone)]
pub struct TableSet {
    pub exp: Arc<LookupTable>,
    pub gelu: Arc<LookupTable>,
    pub gelu_prime: Arc<LookupTable>,
    pub rsqrt: Arc<LookupTable>,
    pub recip: Arc<LookupTable>,
    pub ln: Arc<LookupTable>,
    pub cos_decay: Arc<LookupTable>,
}

impl TableSet {
    pub fn standard(format: FxpFormat) -> Result<TableSet> {
        let specs: Vec<TableSpec> = TableFn::ALL
            .iter()
            .map(|f| TableSpec::standard(*f, format))
            .collect();
        TableSet::from_specs(&specs)
    }

    pub fn from_specs(specs: &[TableSpec]) -> Result<TableSet> {
        let find = |f: TableFn| -> Result<Arc<LookupTable>> {
            let spec = specs
                .iter()
                .find(|s| s.function == f)
                .ok_or_else(|| Error::Schema(format!("missing {} table", f.name())))?;
            LookupTable::cached(*spec)
        };
        Ok(TableSet {
            exp: find(TableFn::Exp)?,
            gelu: find(TableFn::Gelu)?,
            gelu_prime: find(TableFn::GeluPrime)?,
            rsqrt: find(TableFn::Rsqrt)?,
            recip: find(TableFn::Recip)?,
            ln: find(TableFn::Ln)?,
            cos_decay: find(TableFn::CosDecay)?,
        })
    }

    pub fn specs(&self) -> Vec<TableSpec> {
        self.iter().map(|t| *t.spec()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<LookupTable>> {
        [
            &self.exp,
            &self.gelu,
            &self.gelu_prime,
            &self.rsqrt,
            &self.recip,
            &self.ln,
            &self.cos_decay,
        ]
        .into_iter()
    }

    pub fn get(&self, f: TableFn) -> &Arc<LookupTable> {
        match f {
            TableFn::Exp => &self.exp,
            TableFn::Gelu => &self.gelu,
            TableFn::GeluPrime => &self.gelu_prime,
            TableFn::Rsqrt => &self.rsqrt,
            TableFn::Recip => &self.recip,
            TableFn::Ln => &self.ln,
            TableFn::CosDecay => &self.cos_decay,
        }
    }

    /// Replace one table; used to model a prover swapping in a different table.
    pub fn with_table(mut self, spec: TableSpec) -> Result<TableSet> {
        let t = LookupTable::cached(spec)?;
        match spec.function {
            TableFn::Exp => self.exp = t,
            TableFn::Gelu => self.gelu = t,
            TableFn::GeluPrime => self.gelu_prime = t,
            TableFn::Rsqrt => self.rsqrt = t,
            TableFn::Recip => self.recip = t,
            TableFn::Ln => self.ln = t,
            TableFn::CosDecay => self.cos_decay = t,
        }
        Ok(self)
    }
}

/// `x^-1/2` for any positive raw, reducing by exact powers of four into the
/// rsqrt table's `[1, 4)` window when the input leaves the table domain.
pub fn rsqrt_wide(table: &LookupTable, x: i128) -> Result<i64> {
    let spec = table.spec();
    if x <= 0 {
        return Err(Error::TableDomain {
            function: "rsqrt",
            value: x as f64 * spec.format.ulp(),
            lo: spec.lo(),
            hi: spec.hi(),
        });
    }
    if x >= spec.lo_raw as i128 && x <= spec.hi_raw as i128 {
        return Ok(table.interp(x as i64));
    }
    let one = spec.format.one();
    let mut m = x;
    let mut k: i32 = 0;
    while m >= 4 * one as i128 {
        m >>= 2;
        k += 1;
    }
    while m < one as i128 {
        m <<= 2;
        k -= 1;
    }
    // Shifting right drops low bits; rsqrt is smooth enough on [1, 4) that the
    // truncation stays within one entry's rounding.
    let base = table.eval(m as i64)? as i128;
    let out = if k >= 0 {
        round_shift(base, k as u32)
    } else {
        base << (-k) as u32
    };
    spec.format.check(out, "rsqrt")
}

/// `1/x` for any positive raw, scaling by powers of two into `[1, 2)` when
/// the input leaves the reciprocal table's domain.
pub fn recip_wide(table: &LookupTable, x: i64) -> Result<i64> {
    let spec = table.spec();
    if x <= 0 {
        return Err(Error::TableDomain {
            function: "recip",
            value: spec.format.dequantize(x),
            lo: spec.lo(),
            hi: spec.hi(),
        });
    }
    if x >= spec.lo_raw && x <= spec.hi_raw {
        return Ok(table.interp(x));
    }
    let one = spec.format.one() as i128;
    let mut m = x as i128;
    let mut k: i32 = 0;
    while m >= 2 * one {
        m >>= 1;
        k += 1;
    }
    while m < one {
        m <<= 1;
        k -= 1;
    }
    let base = table.eval(m as i64)? as i128;
    let out = if k >= 0 {
        round_shift(base, k as u32)
    } else {
        base << (-k) as u32
    };
    spec.format.check(out, "recip")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmt() -> FxpFormat {
        FxpFormat::default()
    }

    #[test]
    fn standard_tables_build_and_certify() {
        let set = TableSet::standard(fmt()).unwrap();
        for t in set.iter() {
            // Exact-stride tables only carry entry rounding.
            if t.spec().stride_log2 == fmt().frac_bits() {
                assert!(
                    t.max_error() <= fmt().half_ulp() + 1e-12,
                    "{} bound {}",
                    t.function().name(),
                    t.max_error()
                );
            } else {
                assert!(t.max_error() <= 2.0 * fmt().ulp(), "{}", t.max_error());
            }
        }
    }

    #[test]
    fn gelu_and_rsqrt_examples() {
        let set = TableSet::standard(fmt()).unwrap();
        assert!(set.gelu.eval(0).unwrap().abs() <= 1);
        let one = fmt().one();
        let r = set.rsqrt.eval(one).unwrap();
        assert!((fmt().dequantize(r) - 1.0).abs() <= set.rsqrt.max_error());
        assert!(matches!(
            set.gelu.eval(9 * one),
            Err(Error::TableDomain { function: "gelu", .. })
        ));
        assert!(set.rsqrt.eval(0).is_err());
    }

    #[test]
    fn dense_sweep_respects_declared_bound() {
        // Coarse table, interpolation dominates the error.
        let spec = TableSpec::standard(TableFn::Exp, fmt()).with_stride(4);
        let t = LookupTable::build(spec).unwrap();
        let mut worst = 0.0f64;
        for x in (spec.lo_raw..=spec.hi_raw).step_by(7) {
            let got = fmt().dequantize(t.eval(x).unwrap());
            let want = libm::exp(fmt().dequantize(x));
            worst = worst.max((got - want).abs());
        }
        assert!(worst <= t.max_error());
        assert!(t.max_error() > 1e-3, "coarse table should be loose");
    }

    #[test]
    fn rsqrt_wide_range_reduction() {
        let set = TableSet::standard(fmt()).unwrap();
        for v in [0.25f64, 3.0, 17.0, 100.0, 1000.0, 9000.0] {
            let x = fmt().quantize(v).unwrap();
            let got = fmt().dequantize(rsqrt_wide(&set.rsqrt, x as i128).unwrap());
            let want = 1.0 / v.sqrt();
            assert!((got - want).abs() <= 2.0 * fmt().ulp(), "{v}: {got} vs {want}");
        }
    }

    #[test]
    fn recip_wide_range_reduction() {
        let set = TableSet::standard(fmt()).unwrap();
        for v in [1e-4f64, 0.01, 0.5, 3.0, 100.0] {
            let x = fmt().quantize(v).unwrap();
            let got = fmt().dequantize(recip_wide(&set.recip, x).unwrap());
            let want = 1.0 / fmt().dequantize(x);
            assert!((got - want).abs() <= want * 1e-3 + fmt().ulp(), "{v}: {got} vs {want}");
        }
    }

    #[test]
    fn serialization_recertifies() {
        let spec = TableSpec::standard(TableFn::CosDecay, fmt());
        let t = LookupTable::build(spec).unwrap();
        let bytes = t.to_bytes();
        let back = LookupTable::from_bytes(&bytes).unwrap();
        assert_eq!(back.digest(), t.digest());
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 1] ^= 1;
        assert!(LookupTable::from_bytes(&bad).is_err());
    }

    #[test]
    fn misaligned_or_unsafe_specs_rejected() {
        let mut spec = TableSpec::standard(TableFn::Ln, fmt());
        spec.lo_raw = 0;
        assert!(LookupTable::build(spec).is_err());
        let spec = TableSpec::standard(TableFn::Exp, fmt()).with_stride(15);
        assert!(LookupTable::build(spec).is_err());
    }
}
