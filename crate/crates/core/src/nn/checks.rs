//! Randomized finite-difference checks for every differentiable primitive.
//!
//! Each case builds a tiny graph with random shapes and values, wraps it
//! into a scalar via a fixed random linear functional, and compares
//! analytic gradients against central differences. Inputs are registered
//! as parameters so input gradients are verified alongside weights.

use super::{grad_check, NodeId, PadMode, ParamStore, Tape};
use crate::rng::SeedStream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Result of one primitive's randomized check sweep.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
}

impl CheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

fn random_values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>() * (hi - lo) + lo).collect()
}

/// Values bounded away from zero, for kinked ops like relu.
fn random_values_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen::<f64>() * 0.9 + 0.1;
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

macro_rules! sweep {
    ($name:expr, $cases:expr, $seed:expr, |$rng:ident, $store:ident, $tape_builder:ident| $body:expr) => {{
        let mut worst = 0.0f64;
        for case in 0..$cases {
            let mut stream = SeedStream::with_index($seed, concat!("check/", $name), case as u64);
            let $rng = stream.rng();
            let mut $store = ParamStore::new();
            let $tape_builder: Box<dyn FnMut(&mut Tape, &ParamStore) -> NodeId> = $body;
            let mut builder = $tape_builder;
            let err = grad_check(&mut $store, |t, s| builder(t, s));
            worst = worst.max(err);
        }
        CheckReport { name: $name.to_string(), cases: $cases, max_rel_error: worst }
    }};
}

/// Run the full primitive sweep: `cases` random shapes/seeds per op.
pub fn primitive_checks(seed: u64, cases: usize) -> Vec<CheckReport> {
    let mut reports = Vec::new();

    reports.push(sweep!("conv2d", cases, seed, |rng, store, build| {
        let ci = rng.gen_range(1..4);
        let co = rng.gen_range(1..4);
        let h = rng.gen_range(4..9);
        let w = rng.gen_range(4..9);
        let stride = rng.gen_range(1..3);
        let pad = rng.gen_range(0..2);
        let mode = if rng.gen_bool(0.5) { PadMode::Zero } else { PadMode::Replicate };
        let (kh, kw) = if pad == 0 { (1, 1) } else { (3, 3) };
        let wid = store.add_he("w", vec![co, ci, kh, kw], ci * kh * kw, rng.gen());
        let bid = store.add_values("b", vec![co], random_values(rng, co, -0.3, 0.3));
        let xid = store.add_values("x", vec![ci, h, w], random_values(rng, ci * h * w, -1.0, 1.0));
        let fw: Vec<f64> = random_values(rng, 4096, -1.0, 1.0);
        Box::new(move |tape, store| {
            let x = tape.param(store, xid);
            let y = tape.conv2d(store, x, wid, bid, stride, pad, mode);
            let mask: Vec<f64> = fw[..tape.dims(y)[1] * tape.dims(y)[2]].to_vec();
            let m = tape.mask_mul(y, &mask);
            let g = tape.gap(m);
            let k = tape.values(g).len();
            let terms: Vec<(NodeId, f64)> = (0..k).map(|i| (tape.pick(g, i), fw[i])).collect();
            tape.affine(&terms, 0.0)
        })
    }));

    reports.push(sweep!("relu", cases, seed, |rng, store, build| {
        let n = rng.gen_range(2..24);
        let xid = store.add_values("x", vec![n], random_values_off_zero(rng, n));
        let fw = random_values(rng, n, -1.0, 1.0);
        Box::new(move |tape, store| {
            let x = tape.param(store, xid);
            let y = tape.relu(x);
            let terms: Vec<(NodeId, f64)> = (0..n).map(|i| (tape.pick(y, i), fw[i])).collect();
            tape.affine(&terms, 0.0)
        })
    }));

    reports.push(sweep!("upsample_nearest", cases, seed, |rng, store, build| {
        let (c, h, w) = (rng.gen_range(1..3), rng.gen_range(2..5), rng.gen_range(2..5));
        let (oh, ow) = (h * rng.gen_range(1..3), w * rng.gen_range(1..3));
        let xid = store.add_values("x", vec![c, h, w], random_values(rng, c * h * w, -1.0, 1.0));
        let fw = random_values(rng, c * oh * ow + c, -1.0, 1.0);
        Box::new(move |tape, store| {
            let x = tape.param(store, xid);
            let y = tape.upsample_nearest(x, oh, ow);
            let mask: Vec<f64> = fw[..oh * ow].to_vec();
            let m = tape.mask_mul(y, &mask);
            let g = tape.gap(m);
            let terms: Vec<(NodeId, f64)> = (0..c).map(|i| (tape.pick(g, i), fw[oh * ow + i])).collect();
            tape.affine(&terms, 0.0)
        })
    }));

    reports.push(sweep!("upsample_bilinear", cases, seed, |rng, store, build| {
        let (c, h, w) = (rng.gen_range(1..3), rng.gen_range(2..5), rng.gen_range(2..5));
        let (oh, ow) = (rng.gen_range(h..3 * h), rng.gen_range(w..3 * w));
        let xid = store.add_values("x", vec![c, h, w], random_values(rng, c * h * w, -1.0, 1.0));
        let fw = random_values(rng, c * oh * ow + c, -1.0, 1.0);
        Box::new(move |tape, store| {
            let x = tape.param(store, xid);
            let y = tape.upsample_bilinear(x, oh, ow);
            let mask: Vec<f64> = fw[..oh * ow].to_vec();
            let m = tape.mask_mul(y, &mask);
            let g = tape.gap(m);
            let terms: Vec<(NodeId, f64)> = (0..c).map(|i| (tape.pick(g, i), fw[oh * ow + i])).collect();
            tape.affine(&terms, 0.0)
        })
    }));

    reports.push(sweep!("crop_concat", cases, seed, |rng, store, build| {
        let (c, h, w) = (rng.gen_range(1..3), rng.gen_range(3..6), rng.gen_range(3..6));
        let ch = rng.gen_range(1..h);
        let cw = rng.gen_range(1..w);
        let r0 = rng.gen_range(0..=h - ch);
        let c0 = rng.gen_range(0..=w - cw);
        let xid = store.add_values("x", vec![c, h, w], random_values(rng, c * h * w, -1.0, 1.0));
        let yid = store.add_values("y", vec![c, ch, cw], random_values(rng, c * ch * cw, -1.0, 1.0));
        let fw = random_values(rng, ch * cw + 2 * c, -1.0, 1.0);
        Box::new(move |tape, store| {
            let x = tape.param(store, xid);
            let y = tape.param(store, yid);
            let cr = tape.crop(x, r0, c0, ch, cw).unwrap();
            let cat = tape.concat_ch(cr, y);
            let mask: Vec<f64> = fw[..ch * cw].to_vec();
            let m = tape.mask_mul(cat, &mask);
            let g = tape.gap(m);
            let k = tape.values(g).len();
            let terms: Vec<(NodeId, f64)> = (0..k).map(|i| (tape.pick(g, i), fw[ch * cw + i])).collect();
            tape.affine(&terms, 0.0)
        })
    }));

    reports.push(sweep!("gap_masked", cases, seed, |rng, store, build| {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(2..5));
        let xid = store.add_values("x", vec![c, h, w], random_values(rng, c * h * w, -1.0, 1.0));
        let mut mask: Vec<f64> = (0..h * w).map(|_| f64::from(rng.gen_bool(0.6))).collect();
        if mask.iter().all(|&m| m == 0.0) {
            mask[0] = 1.0;
        }
        let fw = random_values(rng, 2 * c, -1.0, 1.0);
        Box::new(move |tape, store| {
            let x = tape.param(store, xid);
            let g1 = tape.gap(x);
            let g2 = tape.masked_gap(x, &mask).unwrap();
            let mut terms: Vec<(NodeId, f64)> = (0..c).map(|i| (tape.pick(g1, i), fw[i])).collect();
            for i in 0..c {
                let p = tape.pick(g2, i);
                terms.push((p, fw[c + i]));
            }
            tape.affine(&terms, 0.0)
        })
    }));

    reports.push(sweep!("dense", cases, seed, |rng, store, build| {
        let n = rng.gen_range(2..10);
        let m = rng.gen_range(1..8);
        let wid = store.add_he("w", vec![m, n], n, rng.gen());
        let bid = store.add_values("b", vec![m], random_values(rng, m, -0.3, 0.3));
        let xid = store.add_values("x", vec![n], random_values(rng, n, -1.0, 1.0));
        let fw = random_values(rng, m, -1.0, 1.0);
        Box::new(move |tape, store| {
            let x = tape.param(store, xid);
            let y = tape.dense(store, x, wid, bid);
            let terms: Vec<(NodeId, f64)> = (0..m).map(|i| (tape.pick(y, i), fw[i])).collect();
            tape.affine(&terms, 0.0)
        })
    }));

    reports.push(sweep!("softmax_ce", cases, seed, |rng, store, build| {
        let (k, h, w) = (rng.gen_range(2..5), rng.gen_range(1..4), rng.gen_range(1..4));
        let xid = store.add_values("x", vec![k, h, w], random_values(rng, k * h * w, -2.0, 2.0));
        let labels: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..k) as u8).collect();
        Box::new(move |tape, store| {
            let x = tape.param(store, xid);
            let p = tape.softmax_ch(x);
            tape.nll_mean_ch(p, &labels)
        })
    }));

    reports.push(sweep!("softmax_vec_policy", cases, seed, |rng, store, build| {
        let n = rng.gen_range(2..8);
        let xid = store.add_values("x", vec![n], random_values(rng, n, -2.0, 2.0));
        let action = rng.gen_range(0..n);
        let coeff = rng.gen::<f64>() * 2.0 - 1.0;
        Box::new(move |tape, store| {
            let x = tape.param(store, xid);
            let p = tape.softmax_vec(x);
            let nll = tape.nll_vec(p, action);
            let ent = tape.entropy_vec(p);
            tape.affine(&[(nll, 1.0), (ent, coeff)], 0.0)
        })
    }));

    reports.push(sweep!("scalar_ops", cases, seed, |rng, store, build| {
        let xid = store.add_values("x", vec![3], random_values_off_zero(rng, 3));
        Box::new(move |tape, store| {
            let x = tape.param(store, xid);
            let a = tape.pick(x, 0);
            let b = tape.pick(x, 1);
            let c = tape.pick(x, 2);
            let sq = tape.square(a);
            let sq2 = tape.square(b);
            let ln = tape.ln(sq2); // square keeps the argument positive
            let comb = tape.affine(&[(sq, 0.7), (ln, -0.4), (c, 1.3)], 0.25);
            tape.square(comb)
        })
    }));

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_sweep_passes_tolerance() {
        for report in primitive_checks(1234, 4) {
            assert!(
                report.passed(1e-4),
                "{} failed with max error {}",
                report.name,
                report.max_rel_error
            );
        }
    }
}
