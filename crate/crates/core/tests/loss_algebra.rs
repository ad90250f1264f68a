mod common;

use common::*;
use reviewkd::fusion::{Hcl, PoolLevel};
use reviewkd::losses::{distance, kd_logit_loss, total_loss};
use reviewkd::nets::Session;
use reviewkd_tensor::{Graph, ParamStore, Tensor};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn naive_and_reordered_totals_agree() {
    for n in 1..=5 {
        for seed in 0..4 {
            for hcl in [false, true] {
                let (a, b) = naive_and_reordered(n, seed, hcl).unwrap();
                assert!(rel(a, b) < 1e-6, "n={n} seed={seed}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn self_distillation_is_null() {
    for n in 1..=5 {
        for v in self_distillation_losses(n, n as u64).unwrap() {
            assert!(v.abs() < 1e-9, "n={n}: {v}");
        }
    }
}

#[test]
fn term_counts_follow_stage_count() {
    for n in 1..=5 {
        assert_eq!(term_counts(n, 7).unwrap(), (n * (n + 1) / 2, n));
    }
}

#[test]
fn distance_matches_scalar_loop() {
    let mut r = rng(3);
    let a = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
    let b = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
    let mut g = Graph::new();
    let (x, y) = (g.input(a.clone()), g.input(b.clone()));
    let d = distance(&mut g, x, y).unwrap();
    assert!((g.scalar(d) - mse_oracle(&a, &b)).abs() < 1e-7);

    let mut g = Graph::new();
    let (x, y) = (g.input(Tensor::zeros(&[1, 1, 2, 2])), g.input(Tensor::full(&[1, 1, 2, 2], 2.0)));
    let d = distance(&mut g, x, y).unwrap();
    assert_eq!(g.scalar(d), 4.0);
}

/// Average-pools each channel of a (1,1,4,4) map to `l × l` with a scalar loop.
fn pool_oracle(t: &Tensor, l: usize) -> Vec<f64> {
    let k = 4 / l;
    let mut out = Vec::new();
    for by in 0..l {
        for bx in 0..l {
            let mut sum = 0.0;
            for y in by * k..(by + 1) * k {
                for x in bx * k..(bx + 1) * k {
                    sum += t.data()[y * 4 + x];
                }
            }
            out.push(sum / (k * k) as f64);
        }
    }
    out
}

#[test]
fn hcl_matches_pooling_oracle() {
    let mut r = rng(11);
    let hcl = Hcl::new(vec![PoolLevel::Size(2), PoolLevel::Size(1)], vec![0.5, 0.5]).unwrap();
    for _ in 0..10 {
        let a = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut r);
        let b = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut r);
        let expected: f64 = [2, 1]
            .iter()
            .map(|&l| {
                let (pa, pb) = (pool_oracle(&a, l), pool_oracle(&b, l));
                0.5 * pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / pa.len() as f64
            })
            .sum();
        assert!((hcl_value(&hcl, &a, &b).unwrap() - expected).abs() < 1e-7);
    }
}

#[test]
fn hcl_full_level_is_plain_mse() {
    let mut r = rng(5);
    let hcl = full_only();
    let sized = Hcl::new(vec![PoolLevel::Size(8)], vec![1.0]).unwrap();
    for _ in 0..20 {
        let a = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r);
        let b = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r);
        let mse = mse_oracle(&a, &b);
        assert!((hcl_value(&hcl, &a, &b).unwrap() - mse).abs() < 1e-7);
        assert!((hcl_value(&sized, &a, &b).unwrap() - mse).abs() < 1e-7);
    }
}

#[test]
fn hcl_levels_larger_than_input_are_clamped() {
    let mut r = rng(6);
    let a = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r);
    let b = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut r);
    let big = Hcl::new(vec![PoolLevel::Size(16)], vec![1.0]).unwrap();
    assert!((hcl_value(&big, &a, &b).unwrap() - mse_oracle(&a, &b)).abs() < 1e-12);
}

#[test]
fn total_loss_examples() {
    let mut g = Graph::new();
    let logits = g.input(Tensor::zeros(&[4, 5]));
    let obj = total_loss(&mut g, logits, &[0, 1, 2, 3], None, 0.0).unwrap();
    let b = obj.breakdown(&g);
    assert!((b.ce - 5f64.ln()).abs() < 1e-12);
    assert_eq!(b.total, b.ce);
    assert!(total_loss(&mut g, logits, &[0, 1, 2, 5], None, 0.0).is_err());
}

/// Scalar KL(p ‖ q) with p, q the softmax of `t / T` and `s / T`, times T².
fn kd_oracle(s: &[f64], t: &[f64], temp: f64) -> f64 {
    let softmax = |v: &[f64]| {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| ((x - m) / temp).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect::<Vec<_>>()
    };
    let (p, q) = (softmax(t), softmax(s));
    temp * temp * p.iter().zip(&q).map(|(p, q)| if *p > 0.0 { p * (p / q).ln() } else { 0.0 }).sum::<f64>()
}

fn kd_value(s: &[f64], t: &[f64], temp: f64) -> f64 {
    let mut g = Graph::new();
    let k = s.len();
    let a = g.input(Tensor::new(&[1, k], s.to_vec()).unwrap());
    let b = g.input(Tensor::new(&[1, k], t.to_vec()).unwrap());
    let v = kd_logit_loss(&mut g, a, b, temp).unwrap();
    g.scalar(v)
}

#[test]
fn logit_kd_matches_scalar_oracle() {
    assert!(kd_value(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0], 4.0).abs() < 1e-12);
    let (s, t) = ([0.0, 0.0], [10.0, -10.0]);
    let p = 1.0 / (1.0 + (-20f64).exp());
    let hand = p * (2.0 * p).ln() + (1.0 - p) * (2.0 * (1.0 - p)).ln();
    assert!((kd_value(&s, &t, 1.0) - hand).abs() < 1e-10);
    let mut r = rng(9);
    for _ in 0..10 {
        let s: Vec<f64> = Tensor::randn(&[5], 2.0, &mut r).into_data();
        let t: Vec<f64> = Tensor::randn(&[5], 2.0, &mut r).into_data();
        assert!((kd_value(&s, &t, 3.0) - kd_oracle(&s, &t, 3.0)).abs() < 1e-10);
        let s2: Vec<f64> = s.iter().map(|x| 2.0 * x).collect();
        let t2: Vec<f64> = t.iter().map(|x| 2.0 * x).collect();
        assert!((kd_value(&s2, &t2, 2.0) - 4.0 * kd_value(&s, &t, 1.0)).abs() < 1e-10);
    }
}

#[test]
fn residual_single_stage_identity_is_null() {
    use reviewkd::fusion::Abf;
    use reviewkd::losses::{mkd_review_residual_loss, Distance};
    let mut store = ParamStore::new();
    let head = Abf::identity(&mut store, "head", 3, false, &mut rng(0));
    let mut s = Session::train(&store);
    let st = random_stages(&mut s, &[3], 4, 2, 1);
    let terms = mkd_review_residual_loss(&mut s, &st, &st, &head, &[], &Distance::Mse).unwrap();
    assert_eq!(terms.terms.len(), 1);
    assert!(s.graph.scalar(terms.total).abs() < 1e-12);
}
