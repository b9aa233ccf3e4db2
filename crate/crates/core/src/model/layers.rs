use crate::error::{Error, Result};
use crate::fxp::{div_round, FxpFormat, OpTally};
use crate::lut::{rsqrt_wide, LookupTable};
use crate::tensor::Tensor;

use super::LoraAdapter;

/// `y = x·Wᵀ + (x·Aᵀ)·Bᵀ`, never forming `W + BA`.
pub fn lora_forward(
    x: &Tensor,
    w: &Tensor,
    adapter: Option<&LoraAdapter>,
    fmt: FxpFormat,
    tally: &mut OpTally,
) -> Result<Tensor> {
    Ok(linear_fwd(x, w, adapter, fmt, tally)?.0)
}

/// Forward pass that also returns the low-rank activation `u = x·Aᵀ`.
pub(super) fn linear_fwd(
    x: &Tensor,
    w: &Tensor,
    adapter: Option<&LoraAdapter>,
    fmt: FxpFormat,
    tally: &mut OpTally,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut y = x.matmul_t(w, fmt, tally)?;
    let Some(ad) = adapter else {
        return Ok((y, None));
    };
    let u = x.matmul_t(&ad.a, fmt, tally)?;
    y.add_assign(&u.matmul_t(&ad.b, fmt, tally)?, fmt)?;
    Ok((y, Some(u)))
}

pub(super) struct LinearGrads {
    pub dx: Tensor,
    pub da: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub(super) fn linear_bwd(
    dy: &Tensor,
    x: &Tensor,
    w: &Tensor,
    adapter: Option<(&LoraAdapter, &Tensor)>,
    need_dx: bool,
    fmt: FxpFormat,
    tally: &mut OpTally,
) -> Result<LinearGrads> {
    let mut dx = if need_dx {
        dy.matmul(w, fmt, tally)?
    } else {
        Tensor::zeros(x.rows, x.cols)
    };
    let Some((ad, u)) = adapter else {
        return Ok(LinearGrads {
            dx,
            da: None,
            db: None,
        });
    };
    let db = dy.t_matmul(u, fmt, tally)?;
    let du = dy.matmul(&ad.b, fmt, tally)?;
    let da = du.t_matmul(x, fmt, tally)?;
    if need_dx {
        dx.add_assign(&du.matmul(&ad.a, fmt, tally)?, fmt)?;
    }
    Ok(LinearGrads {
        dx,
        da: Some(da),
        db: Some(db),
    })
}

pub(super) struct LnCache {
    pub xhat: Tensor,
    pub r: Vec<i64>,
}

/// Row-wise layer norm with frozen affine parameters and an rsqrt lookup.
pub fn layer_norm(
    x: &Tensor,
    g: &Tensor,
    b: &Tensor,
    rsqrt: &LookupTable,
    fmt: FxpFormat,
    tally: &mut OpTally,
) -> Result<Tensor> {
    Ok(layer_norm_fwd(x, g, b, rsqrt, fmt, tally)?.0)
}

pub(super) fn layer_norm_fwd(
    x: &Tensor,
    g: &Tensor,
    b: &Tensor,
    rsqrt: &LookupTable,
    fmt: FxpFormat,
    tally: &mut OpTally,
) -> Result<(Tensor, LnCache)> {
    let d = x.cols as i128;
    let eps = fmt.quantize(1e-5)?.max(1) as i128;
    let mut y = Tensor::zeros(x.rows, x.cols);
    let mut xhat = Tensor::zeros(x.rows, x.cols);
    let mut rs = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = div_round(row.iter().map(|v| *v as i128).sum(), d) as i64;
        let xc: Vec<i64> = row.iter().map(|v| v - mean).collect();
        let ss: i128 = xc.iter().map(|v| *v as i128 * *v as i128).sum();
        let var = div_round(ss, d * fmt.scale() as i128);
        let r = rsqrt_wide(rsqrt, var + eps)?;
        rs.push(r);
        for (j, &v) in xc.iter().enumerate() {
            let h = fmt.mul(v, r)?;
            xhat.data[i * x.cols + j] = h;
            y.data[i * x.cols + j] = fmt.add(fmt.mul(h, g.data[j])?, b.data[j])?;
        }
    }
    tally.mul(2 * x.rows as u64 + 2 * x.len() as u64);
    tally.lookup("rsqrt", rsqrt.max_error(), x.rows as u64);
    Ok((y, LnCache { xhat, r: rs }))
}

pub(super) fn layer_norm_bwd(
    dy: &Tensor,
    g: &Tensor,
    cache: &LnCache,
    fmt: FxpFormat,
    tally: &mut OpTally,
) -> Result<Tensor> {
    let d = dy.cols as i128;
    let mut dx = Tensor::zeros(dy.rows, dy.cols);
    for i in 0..dy.rows {
        let dxhat = dy
            .row(i)
            .iter()
            .zip(&g.data)
            .map(|(a, b)| fmt.mul(*a, *b))
            .collect::<Result<Vec<_>>>()?;
        let xh = cache.xhat.row(i);
        let m1 = div_round(dxhat.iter().map(|v| *v as i128).sum(), d) as i64;
        let m2 = div_round(
            dxhat
                .iter()
                .zip(xh)
                .map(|(a, b)| *a as i128 * *b as i128)
                .sum(),
            d * fmt.scale() as i128,
        ) as i64;
        for j in 0..dy.cols {
            let inner = fmt.sub(fmt.sub(dxhat[j], m1)?, fmt.mul(xh[j], m2)?)?;
            dx.data[i * dy.cols + j] = fmt.mul(cache.r[i], inner)?;
        }
    }
    tally.mul(3 * dy.len() as u64 + 2 * dy.rows as u64);
    Ok(dx)
}

/// Lookup softmax of one row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Softmax {
    pub p: Vec<i64>,
    /// `|Σp − 1|` as a raw.
    pub rowsum_dev: i64,
    /// Sum of the exp lookups; at least one since the max entry maps to `exp(0)`.
    pub exp_sum: i64,
    /// Max-subtracted, clipped logits.
    pub shifted: Vec<i64>,
}

/// Max-subtract, clip to `clip`, exp by table lookup, normalize with one
/// rounded division per entry.
pub fn softmax_approx(
    z: &[i64],
    exp: &LookupTable,
    clip: (i64, i64),
    fmt: FxpFormat,
) -> Result<Softmax> {
    let spec = exp.spec();
    if clip.0 < spec.lo_raw || clip.1 > spec.hi_raw {
        let bad = if clip.0 < spec.lo_raw { clip.0 } else { clip.1 };
        return Err(Error::TableDomain {
            function: "exp",
            value: fmt.dequantize(bad),
            lo: spec.lo(),
            hi: spec.hi(),
        });
    }
    if z.is_empty() {
        return Err(Error::Shape("softmax of empty row".into()));
    }
    let zmax = *z.iter().max().unwrap();
    let shifted: Vec<i64> = z.iter().map(|v| (v - zmax).clamp(clip.0, clip.1)).collect();
    let e = shifted
        .iter()
        .map(|s| exp.eval(*s))
        .collect::<Result<Vec<_>>>()?;
    let exp_sum: i64 = e.iter().sum();
    let s = fmt.scale() as i128;
    let p: Vec<i64> = e
        .iter()
        .map(|v| div_round(*v as i128 * s, exp_sum as i128) as i64)
        .collect();
    let rowsum_dev = (p.iter().sum::<i64>() - fmt.one()).abs();
    Ok(Softmax {
        p,
        rowsum_dev,
        exp_sum,
        shifted,
    })
}

/// `ds_j = p_j (dp_j − Σ_k p_k dp_k)`.
pub(super) fn softmax_bwd(p: &[i64], dp: &[i64], fmt: FxpFormat) -> Result<Vec<i64>> {
    let inner = fmt.dot(p, dp)?;
    p.iter()
        .zip(dp)
        .map(|(pj, dj)| fmt.mul(*pj, fmt.sub(*dj, inner)?))
        .collect()
}

pub fn gelu_approx(x: i64, table: &LookupTable) -> Result<i64> {
    table.eval(x)
}

pub fn rsqrt_approx(x: i64, table: &LookupTable) -> Result<i64> {
    table.eval(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lut::TableSet;
    use rand::{Rng, SeedableRng};

    fn fmt() -> FxpFormat {
        FxpFormat::default()
    }

    fn clip() -> (i64, i64) {
        (fmt().quantize(-8.0).unwrap(), fmt().quantize(8.0).unwrap())
    }

    #[test]
    fn lora_zero_adapter_and_identity() {
        let f = fmt();
        let mut tally = OpTally::default();
        let x = Tensor::from_f64(2, 3, &[0.5, -1.0, 0.25, 1.5, 0.0, -0.75], f).unwrap();
        let w = Tensor::from_f64(2, 3, &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6], f).unwrap();
        let zero = LoraAdapter {
            a: Tensor::zeros(2, 3),
            b: Tensor::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0], f).unwrap(),
        };
        let plain = x.matmul_t(&w, f, &mut tally).unwrap();
        assert_eq!(lora_forward(&x, &w, Some(&zero), f, &mut tally).unwrap(), plain);

        let mut eye = Tensor::zeros(3, 3);
        for i in 0..3 {
            eye.data[i * 3 + i] = f.one();
        }
        let id = LoraAdapter {
            a: eye.clone(),
            b: eye,
        };
        let y = lora_forward(&x, &Tensor::zeros(3, 3), Some(&id), f, &mut tally).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn softmax_symmetry_and_singleton() {
        let t = TableSet::standard(fmt()).unwrap();
        let c = fmt().quantize(1.7).unwrap();
        for l in 1..=16 {
            let sm = softmax_approx(&vec![c; l], &t.exp, clip(), fmt()).unwrap();
            let want = fmt().quantize(1.0 / l as f64).unwrap();
            assert!(sm.p.iter().all(|p| (p - want).abs() <= 1), "L={l}");
            assert!(sm.rowsum_dev <= l as i64);
        }
        let sm = softmax_approx(&[123], &t.exp, clip(), fmt()).unwrap();
        assert_eq!(sm.p, vec![fmt().one()]);
        assert_eq!(sm.rowsum_dev, 0);
    }

    #[test]
    fn softmax_clip_must_fit_table() {
        let t = TableSet::standard(fmt()).unwrap();
        let wide = (fmt().quantize(-9.0).unwrap(), 0);
        assert!(matches!(
            softmax_approx(&[0, 1], &t.exp, wide, fmt()),
            Err(Error::TableDomain { function: "exp", .. })
        ));
    }

    #[test]
    fn softmax_rows_close_to_exact() {
        let t = TableSet::standard(fmt()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let z: Vec<f64> = (0..16).map(|_| rng.random_range(-4.0..4.0)).collect();
            let raws: Vec<i64> = z.iter().map(|v| fmt().quantize(*v).unwrap()).collect();
            let zq: Vec<f64> = raws.iter().map(|r| fmt().dequantize(*r)).collect();
            let m = zq.iter().cloned().fold(f64::MIN, f64::max);
            let s: f64 = zq.iter().map(|v| (v - m).exp()).sum();
            let sm = softmax_approx(&raws, &t.exp, clip(), fmt()).unwrap();
            let l1: f64 = sm
                .p
                .iter()
                .zip(&zq)
                .map(|(p, v)| (fmt().dequantize(*p) - (v - m).exp() / s).abs())
                .sum();
            assert!(l1 <= 3e-3, "{l1}");
            assert!(sm.rowsum_dev <= 16);
        }
    }

    #[test]
    fn layer_norm_backward_matches_difference_quotient() {
        let f = FxpFormat::new(14, 20).unwrap();
        let t = TableSet::standard(f).unwrap();
        let mut tally = OpTally::default();
        let xs = [0.3, -1.2, 0.8, 2.0, -0.4, 0.1];
        let x = Tensor::from_f64(1, 6, &xs, f).unwrap();
        let g = Tensor::from_f64(1, 6, &[1.0, 0.5, 2.0, 1.0, -1.0, 0.75], f).unwrap();
        let b = Tensor::zeros(1, 6);
        let dy = Tensor::from_f64(1, 6, &[0.2, -0.1, 0.4, 0.3, 0.05, -0.6], f).unwrap();
        let (_, cache) = layer_norm_fwd(&x, &g, &b, &t.rsqrt, f, &mut tally).unwrap();
        let dx = layer_norm_bwd(&dy, &g, &cache, f, &mut tally).unwrap();
        let obj = |v: &[f64]| {
            let xt = Tensor::from_f64(1, 6, v, f).unwrap();
            let y = layer_norm(&xt, &g, &b, &t.rsqrt, f, &mut OpTally::default()).unwrap();
            y.to_f64(f).iter().zip(dy.to_f64(f)).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-3;
        for j in 0..6 {
            let mut p = xs.to_vec();
            p[j] += h;
            let mut m = xs.to_vec();
            m[j] -= h;
            let fd = (obj(&p) - obj(&m)) / (2.0 * h);
            let got = f.dequantize(dx.data[j]);
            assert!((fd - got).abs() < 5e-3, "{j}: fd {fd} vs {got}");
        }
    }
}
