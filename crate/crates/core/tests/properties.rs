//! Invariants checked against independent oracles: exact rationals for the
//! arithmetic, a from-scratch SHA-256 tree for commitments, exact binomial
//! ratios for audit detection.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use proptest::prelude::*;
use sha2::{Digest as _, Sha256};

use vft_core::commit::{verify_membership, MerkleTree, Side};
use vft_core::digest::{Decoder, Digest, Encoder, Hasher};
use vft_core::fedsim::{audited_steps, detection_probability, fed_avg, miss_probability};
use vft_core::fxp::{div_round, round_shift, FxpFormat};
use vft_core::lut::{rsqrt_wide, LookupTable, TableFn, TableSpec};
use vft_core::model::{Adapters, ModelConfig};
use vft_core::optim::{extend_chain, StepMeta};
use vft_core::proof::{ceil_log2, fold_all, FoldNode};
use vft_core::sampler::{
    derive_public_batch, open_salts, seal_salts, BinMatrix, Quota, QuotaFilter, QuotaLedger,
    SaltRecord, Universe,
};
use vft_core::Error;

fn ratio(n: i128, d: i128) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Round half to even on an exact rational.
fn round_even(r: &BigRational) -> i128 {
    let fl = r.floor();
    let frac = r - &fl;
    let half = ratio(1, 2);
    let base = fl.to_integer();
    let up = frac > half || (frac == half && (&base % 2i32).abs().is_one());
    (base + BigInt::from(up as u8)).to_i128().unwrap()
}

proptest! {
    #[test]
    fn round_shift_is_exact_half_even(v in any::<i64>(), shift in 0u32..40) {
        let v = v as i128 * 977;
        prop_assert_eq!(round_shift(v, shift), round_even(&ratio(v, 1i128 << shift)));
    }

    #[test]
    fn div_round_is_exact_half_even(n in any::<i64>(), d in any::<i32>().prop_filter("nonzero", |d| *d != 0)) {
        prop_assert_eq!(div_round(n as i128, d as i128), round_even(&ratio(n as i128, d as i128)));
    }

    #[test]
    fn mul_matches_rational_or_overflows(a in -(1i64 << 30)..(1i64 << 30), b in -(1i64 << 30)..(1i64 << 30)) {
        let f = FxpFormat::default();
        let exact = round_even(&ratio(a as i128 * b as i128, f.scale() as i128));
        match f.mul(a, b) {
            Ok(r) => prop_assert_eq!(r as i128, exact),
            Err(Error::RangeOverflow(_)) => prop_assert!(exact.abs() >= f.limit() as i128),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn add_never_wraps(a in any::<i64>(), b in any::<i64>()) {
        let f = FxpFormat::default();
        let exact = a as i128 + b as i128;
        let ok = exact.abs() < f.limit() as i128;
        prop_assert_eq!(f.add(a, b).is_ok(), ok);
    }

    #[test]
    fn dot_rounds_once(pairs in prop::collection::vec((-(1i64 << 20)..(1i64 << 20), -(1i64 << 20)..(1i64 << 20)), 1..32)) {
        let f = FxpFormat::default();
        let (a, b): (Vec<i64>, Vec<i64>) = pairs.into_iter().unzip();
        let sum: BigRational = a.iter().zip(&b)
            .map(|(x, y)| ratio(*x as i128 * *y as i128, f.scale() as i128))
            .fold(BigRational::zero(), |s, t| s + t);
        let exact = round_even(&sum);
        match f.dot(&a, &b) {
            Ok(r) => prop_assert_eq!(r as i128, exact),
            Err(_) => prop_assert!(exact.abs() >= f.limit() as i128),
        }
    }

    #[test]
    fn quantize_within_half_ulp(x in -16000.0f64..16000.0, q in 4u8..30) {
        let f = FxpFormat::new(14, q).unwrap();
        let r = f.quantize(x).unwrap();
        prop_assert!((f.dequantize(r) - x).abs() <= f.half_ulp());
        prop_assert_eq!(f.quantize(f.dequantize(r)).unwrap(), r);
    }

    #[test]
    fn codec_roundtrips(a in any::<u64>(), b in any::<i64>(), s in ".{0,40}", raws in prop::collection::vec(any::<i64>(), 0..16), bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let mut e = Encoder::new();
        e.u64(a).i64(b).str(&s).raws(&raws).bytes(&bytes);
        let buf = e.into_bytes();
        let mut d = Decoder::new(&buf);
        prop_assert_eq!(d.u64().unwrap(), a);
        prop_assert_eq!(d.i64().unwrap(), b);
        prop_assert_eq!(d.string().unwrap(), s);
        prop_assert_eq!(d.raws().unwrap(), raws);
        prop_assert_eq!(d.bytes().unwrap(), &bytes[..]);
        prop_assert!(d.finish().is_ok());
        // Any truncation is a decode error, never a panic.
        let mut short = Decoder::new(&buf[..buf.len() - 1]);
        let r = (|| -> vft_core::Result<()> {
            short.u64()?; short.i64()?; short.string()?; short.raws()?; short.bytes()?; short.finish()
        })();
        prop_assert!(r.is_err());
    }
}

fn sha(tag: u8, parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update([tag]);
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Recursive tree with duplicated odd nodes, built directly on SHA-256.
fn oracle_root(level: &[[u8; 32]]) -> [u8; 32] {
    let next: Vec<[u8; 32]> = level
        .chunks(2)
        .map(|c| sha(0x01, &[&c[0], c.get(1).unwrap_or(&c[0])]))
        .collect();
    if next.len() == 1 {
        next[0]
    } else {
        oracle_root(&next)
    }
}

fn leaves(n: usize, salt: u64) -> Vec<Digest> {
    (0..n as u64)
        .map(|i| {
            let mut h = Hasher::new(0x00);
            h.u64(salt).u64(i);
            h.finish()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merkle_root_matches_oracle(n in 1usize..70, salt in any::<u64>()) {
        let ls = leaves(n, salt);
        let tree = MerkleTree::from_leaves(ls.clone()).unwrap();
        let raw: Vec<[u8; 32]> = ls.iter().map(|d| d.0).collect();
        prop_assert_eq!(tree.root().0, oracle_root(&raw));
    }

    #[test]
    fn merkle_openings_bind_leaf_and_index(n in 1usize..70, salt in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let ls = leaves(n, salt);
        let tree = MerkleTree::from_leaves(ls.clone()).unwrap();
        let i = pick.index(n);
        let path = tree.open(i as u64).unwrap();
        prop_assert!(verify_membership(&tree.root(), &ls[i], &path));
        let other = leaves(1, salt ^ 1)[0];
        prop_assert!(!verify_membership(&tree.root(), &other, &path));
        let mut moved = path.clone();
        moved.leaf_index ^= 1;
        if moved.leaf_index as usize != i && ls.get(moved.leaf_index as usize) != Some(&ls[i]) {
            prop_assert!(!verify_membership(&tree.root(), &ls[i], &moved));
        }
        let mut flipped = path.clone();
        flipped.siblings[0].1 = match flipped.siblings[0].1 { Side::Left => Side::Right, Side::Right => Side::Left };
        prop_assert!(!verify_membership(&tree.root(), &ls[i], &flipped));
    }

    #[test]
    fn public_batches_are_sorted_distinct_and_replayable(seed in any::<[u8; 32]>(), t in any::<u64>(), n in 1u64..500, k in 1u64..16) {
        let k = k.min(n);
        let s = Digest(seed);
        let b = derive_public_batch(&s, t, k, Universe::All(n), false, None).unwrap();
        prop_assert_eq!(b.len() as u64, k);
        prop_assert!(b.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(b.iter().all(|i| *i < n));
        prop_assert_eq!(derive_public_batch(&s, t, k, Universe::All(n), false, None).unwrap(), b);
    }

    #[test]
    fn shard_batches_stay_in_shard(seed in any::<[u8; 32]>(), shard in prop::collection::btree_set(0u64..10_000, 1..40), k in 1u64..8) {
        let shard: Vec<u64> = shard.into_iter().collect();
        let b = derive_public_batch(&Digest(seed), 3, k, Universe::Shard(&shard), true, None).unwrap();
        prop_assert_eq!(b.len() as u64, k);
        prop_assert!(b.iter().all(|i| shard.contains(i)));
    }

    #[test]
    fn fold_depth_and_worker_independence(n in 1usize..80, workers in 1usize..5) {
        let mut h = Digest::ZERO;
        let nodes: Vec<FoldNode> = (0..n as u64).map(|i| {
            let mut x = Hasher::new(0x03);
            x.digest(&h).u64(i);
            let next = x.finish();
            let node = FoldNode { digest: next, h_start: h, h_end: next, first_step: i, last_step: i };
            h = next;
            node
        }).collect();
        let (root, depth) = fold_all(&nodes, workers).unwrap();
        let (serial, _) = fold_all(&nodes, 1).unwrap();
        prop_assert_eq!(root, serial);
        prop_assert_eq!(depth, (n as f64).log2().ceil() as u32);
        prop_assert_eq!(depth, ceil_log2(n as u64));
        prop_assert_eq!((root.first_step, root.last_step), (0, n as u64 - 1));
        prop_assert_eq!((root.h_start, root.h_end), (Digest::ZERO, h));
        if n > 1 {
            let mut swapped = nodes.clone();
            swapped.swap(0, 1);
            prop_assert!(fold_all(&swapped, workers).is_err());
        }
    }

    #[test]
    fn chain_links_bind_every_field(prev in any::<[u8; 32]>(), delta in any::<[u8; 32]>(), eta in any::<i64>(), step in any::<u64>()) {
        let meta = StepMeta { batch_commitment: Digest(delta), step, epoch: 0, schedule_id: "cosine_warmup".into() };
        let link = extend_chain(Digest(prev), Digest(delta), eta, meta);
        prop_assert!(link.verify().is_ok());
        let mut bad = link.clone();
        bad.eta = eta.wrapping_add(1);
        prop_assert!(bad.verify().is_err());
        let mut bad = link.clone();
        bad.meta.step = step.wrapping_add(1);
        prop_assert!(bad.verify().is_err());
        let mut bad = link;
        bad.h_prev.0[31] ^= 1;
        prop_assert!(bad.verify().is_err());
    }

    #[test]
    fn salts_roundtrip_and_resist_tampering(key in any::<[u8; 32]>(), steps in prop::collection::vec((any::<[u8; 16]>(), prop::collection::vec(any::<[u8; 16]>(), 0..5)), 0..6), flip in any::<prop::sample::Index>()) {
        let records: Vec<SaltRecord> = steps.into_iter().enumerate()
            .map(|(i, (t, items))| SaltRecord { step: i as u64, transcript: t, items })
            .collect();
        let key = Digest(key);
        let sealed = seal_salts(&records, &key);
        prop_assert_eq!(open_salts(&sealed, &key).unwrap(), records);
        let mut bad = sealed.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x40;
        prop_assert!(open_salts(&bad, &key).is_err());
        let mut other = key;
        other.0[0] ^= 1;
        prop_assert!(open_salts(&sealed, &other).is_err());
    }

    #[test]
    fn rsqrt_wide_relative_error(x in 1i64..(1i64 << 40)) {
        let f = FxpFormat::default();
        let t = LookupTable::build(TableSpec::standard(TableFn::Rsqrt, f)).unwrap();
        let got = f.dequantize(rsqrt_wide(&t, x as i128).unwrap());
        let want = 1.0 / f.dequantize(x).sqrt();
        // Entry rounding plus the output's own rounding, scaled back.
        let tol = 2.0 * t.max_error() * want.max(1.0) + 2.0 * f.ulp();
        prop_assert!((got - want).abs() <= tol, "x={x} got={got} want={want}");
    }

    #[test]
    fn fed_avg_is_rounded_exact_mean(k in 1usize..7, seed in any::<u64>()) {
        let cfg = ModelConfig::tiny();
        let f = FxpFormat::default();
        let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(seed);
        let ups: Vec<Adapters> = (0..k).map(|_| {
            let mut a = Adapters::init(&cfg, f);
            for t in a.tensors_mut() {
                for v in t.data.iter_mut() {
                    *v = rand::Rng::random_range(&mut rng, -(1i64 << 20)..(1i64 << 20));
                }
            }
            a
        }).collect();
        let refs: Vec<&Adapters> = ups.iter().collect();
        let avg = fed_avg(&refs).unwrap();
        for (ti, t) in avg.tensors().enumerate() {
            for (j, v) in t.data.iter().enumerate() {
                let sum: i128 = ups.iter().map(|u| u.tensors().nth(ti).unwrap().data[j] as i128).sum();
                prop_assert_eq!(*v as i128, round_even(&ratio(sum, k as i128)));
            }
        }
    }
}

fn binomial(n: u64, k: u64) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    (0..k).fold(BigInt::one(), |acc, i| acc * BigInt::from(n - i) / BigInt::from(i + 1))
}

proptest! {
    #[test]
    fn miss_probability_matches_binomial_ratio(total in 1u64..400, m in 0u64..60, n in 0u64..400) {
        let m = m.min(total);
        let n = n.min(total);
        let exact = BigRational::new(binomial(total - m, n), binomial(total, n));
        let want = exact.to_f64().unwrap();
        let got = miss_probability(total, m, n);
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1e-300) + 1e-300, "{got} vs {want}");
    }

    #[test]
    fn detection_is_monotone_in_coverage_and_rounds(total in 10u64..5000, m in 1u64..50, q in 0.01f64..0.5, rounds in 1u32..5) {
        let m = m.min(total);
        let p = detection_probability(q, total, m, rounds);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(detection_probability((q * 1.5).min(1.0), total, m, rounds) >= p - 1e-15);
        prop_assert!(detection_probability(q, total, m, rounds + 1) >= p - 1e-15);
        let n = audited_steps(q, total);
        prop_assert!(n as f64 >= q * total as f64 - 1e-6 && n <= total);
    }
}

#[test]
fn tamper_free_rounds_are_never_detected() {
    assert_eq!(detection_probability(0.3, 1000, 0, 4), 0.0);
    assert_eq!(detection_probability(1.0, 1000, 1, 1), 1.0);
}

#[test]
fn sampler_is_roughly_uniform() {
    // Chi-square over 32 cells; the 0.1% critical value at 31 dof is 61.1.
    let n = 32u64;
    let mut counts = vec![0u64; n as usize];
    let seed = Digest([7; 32]);
    for t in 0..20_000 {
        for i in derive_public_batch(&seed, t, 1, Universe::All(n), false, None).unwrap() {
            counts[i as usize] += 1;
        }
    }
    let expect = 20_000.0 / n as f64;
    let chi: f64 = counts.iter().map(|c| (*c as f64 - expect).powi(2) / expect).sum();
    assert!(chi < 61.1, "chi-square {chi}");
    let distinct: BTreeSet<_> = counts.iter().collect();
    assert!(distinct.len() > 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn table_error_stays_within_certified_bound(pick in 0usize..4, stride in 6u32..12, xs in prop::collection::vec(any::<prop::sample::Index>(), 64)) {
        let f = FxpFormat::default();
        let func = [TableFn::Exp, TableFn::Gelu, TableFn::Rsqrt, TableFn::Recip][pick];
        let t = LookupTable::build(TableSpec::standard(func, f).with_stride(stride)).unwrap();
        let (lo, hi) = (t.spec().lo_raw, t.spec().hi_raw);
        for ix in xs {
            let x = lo + ix.index((hi - lo + 1) as usize) as i64;
            let err = (f.dequantize(t.eval(x).unwrap()) - func.reference(f.dequantize(x))).abs();
            prop_assert!(err <= t.max_error() + 1e-12, "{} at {x}: {err} > {}", func.name(), t.max_error());
        }
        prop_assert!(t.eval(lo - 1).is_err() && t.eval(hi + 1).is_err());
    }

    #[test]
    fn quota_filter_never_exceeds_ceilings(seed in any::<[u8; 32]>(), cap in 1u64..6, steps in 1u64..12) {
        let labels: Vec<String> = ["general", "safety"].iter().map(|s| s.to_string()).collect();
        let rows: Vec<(BTreeSet<String>, u64)> = (0..40u64)
            .map(|i| {
                let mut tags: BTreeSet<String> = ["general".to_string()].into();
                if i % 3 == 0 {
                    tags.insert("safety".into());
                }
                (tags, 4)
            })
            .collect();
        let matrix = BinMatrix::new(labels.clone(), &rows).unwrap();
        let quotas: BTreeMap<String, Quota> = [
            ("general".to_string(), Quota { items: 1_000, tokens: 1_000_000 }),
            ("safety".to_string(), Quota { items: cap, tokens: 4 * cap }),
        ].into();
        let mut ledger = QuotaLedger::new(0, &labels);
        for t in 0..steps {
            let filter = QuotaFilter { ledger: &ledger, matrix: &matrix, quotas: &quotas };
            let b = derive_public_batch(&Digest(seed), t, 3, Universe::All(40), false, Some(&filter)).unwrap();
            ledger.update(&b, &matrix).unwrap();
            prop_assert!(ledger.check(&quotas).is_ok());
        }
        let safety = ledger.counts()["safety"].items;
        prop_assert!(safety <= cap);
    }
}
