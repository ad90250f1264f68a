#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reviewkd::fusion::{Abf, Hcl, PoolLevel};
use reviewkd::losses::{
    mkd_loss, mkd_review_naive_loss, mkd_review_reordered_loss, mkd_review_residual_loss, skd_loss, skd_review_loss,
    Distance,
};
use reviewkd::nets::{review_pairs, ArchSpec, Session, StageNet, StageVars, StudentTransform, TransformBank};
use reviewkd::types::Source;
use reviewkd::Result;
use reviewkd_tensor::gradcheck::relative_error;
use reviewkd_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sum with a distinct weight per element, so no direction is invisible.
pub fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = g.input(Tensor::from_fn(&shape, |i| ((i * 37) % 11) as f64 / 7.0 - 0.6));
    let m = g.mul(v, w)?;
    Ok(g.sum_all(m))
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    /// Worst norm-wise relative error over the checked tensors.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose step straddles a kink of a piecewise-linear
    /// activation (central differences at `h` and `h/2` disagree).
    pub skipped: usize,
}

impl GradCheck {
    pub fn passes(&self) -> bool {
        self.max_rel_error < TOL && self.skipped * 4 <= self.checked
    }
}

/// Central difference at `STEP`, or `None` when it disagrees with the one at
/// `STEP / 2`, which only happens if the function is not smooth there.
fn central(mut f: impl FnMut(f64) -> Result<f64>) -> Result<Option<f64>> {
    let d = |f: &mut dyn FnMut(f64) -> Result<f64>, h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let full = d(&mut f, STEP)?;
    let half = d(&mut f, STEP / 2.0)?;
    let scale = full.abs().max(half.abs()).max(1e-6);
    Ok(((full - half).abs() <= 1e-4 * scale).then_some(full))
}

/// Compares analytic and central-difference gradients over every input
/// tensor and up to `samples` coordinates of each listed parameter.
pub fn grad_error(
    store: &ParamStore,
    inputs: &[Tensor],
    params: &[ParamId],
    samples: usize,
    f: impl Fn(&mut Session<'_>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut s = Session::train(store);
        let leaves: Vec<Var> = inputs.iter().map(|t| s.graph.leaf(t.clone())).collect();
        let out = f(&mut s, &leaves)?;
        Ok(s.graph.scalar(out))
    };
    let mut s = Session::train(store);
    let leaves: Vec<Var> = inputs.iter().map(|t| s.graph.leaf(t.clone())).collect();
    let out = f(&mut s, &leaves)?;
    let grads = s.graph.backward(out)?;
    let mut report = GradCheck::default();
    let compare = |report: &mut GradCheck, pairs: Vec<(f64, Option<f64>)>| {
        let (analytic, numeric): (Vec<f64>, Vec<f64>) =
            pairs.iter().filter_map(|&(a, n)| n.map(|n| (a, n))).unzip();
        report.checked += pairs.len();
        report.skipped += pairs.len() - analytic.len();
        report.max_rel_error = report.max_rel_error.max(relative_error(&analytic, &numeric));
    };

    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(leaves[k]).map_or(vec![0.0; x.len()], |t| t.data().to_vec());
        let mut pairs = Vec::with_capacity(x.len());
        for (i, &a) in analytic.iter().enumerate() {
            let n = central(|h| {
                let mut probe = inputs.to_vec();
                probe[k].data_mut()[i] += h;
                eval(store, &probe)
            })?;
            pairs.push((a, n));
        }
        compare(&mut report, pairs);
    }

    for &id in params {
        let len = store.value(id).len();
        let picks: Vec<usize> = if len <= samples {
            (0..len).collect()
        } else {
            (0..samples).map(|k| k * len / samples).collect()
        };
        let full = grads.param(id).map_or(vec![0.0; len], |t| t.data().to_vec());
        let mut pairs = Vec::with_capacity(picks.len());
        for &i in &picks {
            let n = central(|h| {
                let mut probe = store.clone();
                probe.value_mut(id).data_mut()[i] += h;
                eval(&probe, inputs)
            })?;
            pairs.push((full[i], n));
        }
        compare(&mut report, pairs);
    }
    Ok(report)
}

/// ABF with lower (1,4,4,4), deeper (1,8,2,2) and attention gating.
pub fn abf_grad_error(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let abf = Abf::new(&mut store, "abf", 4, 8, 6, true, &mut r);
    let lower = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut r);
    let higher = Tensor::randn(&[1, 8, 2, 2], 1.0, &mut r);
    let params = abf.params();
    let trainable: Vec<ParamId> = params.into_iter().filter(|&p| store.trainable_ids().any(|q| q == p)).collect();
    grad_error(&store, &[lower, higher], &trainable, 12, |s, v| {
        let out = abf.forward(s, v[0], Some(v[1]))?;
        weighted_sum(&mut s.graph, out.fused)
    })
}

/// Pyramid distance on (2,3,8,8) with levels [full, 4, 2, 1].
pub fn hcl_grad_error(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let store = ParamStore::new();
    let hcl = Hcl::from_pyramid(&[4, 2, 1])?;
    let a = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r);
    let b = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r);
    grad_error(&store, &[a, b], &[], 0, |s, v| hcl.forward(s, v[0], v[1]))
}

/// Student transform (2,3,4,4) → (2,5,8,8) with its parameters.
pub fn transform_grad_error(seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let t = StudentTransform::new(&mut store, "m", 3, 5, &mut r);
    let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
    let trainable: Vec<ParamId> = t.params().into_iter().filter(|&p| store.trainable_ids().any(|q| q == p)).collect();
    grad_error(&store, &[x], &trainable, 16, |s, v| {
        let y = t.forward(s, v[0], (8, 8))?;
        weighted_sum(&mut s.graph, y)
    })
}

pub fn tiny_arch(name: &str, channels: [usize; 4]) -> ArchSpec {
    ArchSpec {
        name: name.into(),
        in_channels: 3,
        stem_channels: 2,
        stage_channels: channels.to_vec(),
        blocks_per_stage: vec![1; 4],
        downsample: vec![1, 2, 2, 1],
        num_classes: 3,
        zero_init_residual: false,
    }
}

/// Full residual objective on tiny nets (8×8 input, batch 2): gradient with
/// respect to a sample of every student, transform and fusion parameter.
pub fn residual_grad_error(seed: u64, use_abf: bool, use_hcl: bool) -> Result<GradCheck> {
    let mut r = rng(seed);
    let mut tstore = ParamStore::new();
    let teacher = StageNet::new(tiny_arch("t", [3, 4, 4, 6]), &mut tstore, &mut r)?;
    let mut store = ParamStore::new();
    let student = StageNet::new(tiny_arch("s", [2, 3, 4, 4]), &mut store, &mut r)?;
    let ct = [3, 4, 4, 6];
    let cs = [2, 3, 4, 4];
    let head = Abf::new(&mut store, "f4", cs[3], 4, ct[3], false, &mut r);
    let fusers: Vec<Abf> = (1..4)
        .map(|j| Abf::new(&mut store, &format!("f{j}"), cs[j - 1], 4, ct[j - 1], use_abf, &mut r))
        .collect();
    let dist = if use_hcl {
        Distance::Hcl(Hcl::from_pyramid(&[2, 1])?)
    } else {
        Distance::Mse
    };
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut r);
    let tout = teacher.infer(&tstore, &x, Source::Teacher)?;
    let trainable: Vec<ParamId> = store.trainable_ids().collect();
    grad_error(&store, &[], &trainable, 3, |s, _| {
        let xv = s.input(x.clone());
        let sv = student.forward_with_stages(s, xv)?;
        let tv = StageVars::constants(&mut s.graph, &tout);
        Ok(mkd_review_residual_loss(s, &sv, &tv, &head, &fusers, &dist)?.total)
    })
}

/// Random stage features, spatial sizes halving from `top`.
pub fn random_stages(s: &mut Session<'_>, channels: &[usize], top: usize, batch: usize, seed: u64) -> StageVars {
    let mut r = rng(seed);
    let features = channels
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let hw = (top >> k).max(1);
            s.input(Tensor::randn(&[batch, c, hw, hw], 1.0, &mut r))
        })
        .collect();
    let logits = s.input(Tensor::randn(&[batch, 3], 1.0, &mut r));
    StageVars { features, logits }
}

/// Totals of the naive and reordered review losses on random features for
/// `n` stages, each pair with its own random transform.
pub fn naive_and_reordered(n: usize, seed: u64, hcl: bool) -> Result<(f64, f64)> {
    let mut r = rng(seed ^ 0x5eed);
    let cs: Vec<usize> = (0..n).map(|k| 2 + k).collect();
    let ct: Vec<usize> = (0..n).map(|k| 3 + (k * 2) % 5).collect();
    let mut store = ParamStore::new();
    let bank = TransformBank::build(&mut store, &review_pairs(n), &cs, &ct, &mut r)?;
    let dist = if hcl {
        Distance::Hcl(Hcl::from_pyramid(&[2, 1])?)
    } else {
        Distance::Mse
    };
    let mut s = Session::train(&store);
    let st = random_stages(&mut s, &cs, 16, 2, seed);
    let te = random_stages(&mut s, &ct, 16, 2, seed + 1_000_003);
    let naive = mkd_review_naive_loss(&mut s, &st, &te, &bank, &dist)?.total;
    let reordered = mkd_review_reordered_loss(&mut s, &st, &te, &bank, &dist)?.total;
    Ok((s.graph.scalar(naive), s.graph.scalar(reordered)))
}

/// Distillation losses of identical student and teacher features through
/// identity transforms: `[skd(i, i) for every i, mkd, skd_review(i) for
/// every i, naive review]`. Review pairs with `j < i` compare stage `i`
/// resized to stage `j`, which only vanishes when every stage holds the
/// same feature, so all stages share one tensor.
pub fn self_distillation_losses(n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng(seed);
    let c = 3;
    let channels = vec![c; n];
    let mut store = ParamStore::new();
    let bank = TransformBank::identity(&mut store, &review_pairs(n), &channels)?;
    let mut s = Session::train(&store);
    let f = s.input(Tensor::randn(&[2, c, 4, 4], 1.0, &mut r));
    let logits = s.input(Tensor::randn(&[2, 3], 1.0, &mut r));
    let vars = StageVars {
        features: vec![f; n],
        logits,
    };
    let d = Distance::Mse;
    let mut out = Vec::new();
    for i in 1..=n {
        let t = skd_loss(&mut s, &vars, &vars, (i, i), &bank, &d)?.total;
        out.push(s.graph.scalar(t));
    }
    let t = mkd_loss(&mut s, &vars, &vars, &bank, &d)?.total;
    out.push(s.graph.scalar(t));
    for i in 1..=n {
        let t = skd_review_loss(&mut s, &vars, &vars, i, &bank, &d)?.total;
        out.push(s.graph.scalar(t));
    }
    let t = mkd_review_naive_loss(&mut s, &vars, &vars, &bank, &d)?.total;
    out.push(s.graph.scalar(t));
    Ok(out)
}

/// Pyramid distance between two tensors evaluated on a fresh graph.
pub fn hcl_value(hcl: &Hcl, a: &Tensor, b: &Tensor) -> Result<f64> {
    let store = ParamStore::new();
    let mut s = Session::eval(&store);
    let (x, y) = (s.input(a.clone()), s.input(b.clone()));
    let v = hcl.forward(&mut s, x, y)?;
    Ok(s.graph.scalar(v))
}

/// Scalar-loop mean squared difference.
pub fn mse_oracle(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// A pyramid holding only the full resolution.
pub fn full_only() -> Hcl {
    Hcl::new(vec![PoolLevel::Full], vec![1.0]).expect("single level is valid")
}

/// Distance-term counts `(naive pairs, residual terms)` for `n` stages.
pub fn term_counts(n: usize, seed: u64) -> Result<(usize, usize)> {
    let mut r = rng(seed);
    let cs: Vec<usize> = (0..n).map(|k| 2 + k).collect();
    let ct: Vec<usize> = (0..n).map(|k| 3 + k).collect();
    let mut store = ParamStore::new();
    let bank = TransformBank::build(&mut store, &review_pairs(n), &cs, &ct, &mut r)?;
    let head = Abf::new(&mut store, "head", cs[n - 1], 4, ct[n - 1], false, &mut r);
    let fusers: Vec<Abf> = (1..n)
        .map(|j| Abf::new(&mut store, &format!("f{j}"), cs[j - 1], 4, ct[j - 1], true, &mut r))
        .collect();
    let mut s = Session::train(&store);
    let st = random_stages(&mut s, &cs, 16, 2, seed);
    let te = random_stages(&mut s, &ct, 16, 2, seed + 1);
    let naive = mkd_review_naive_loss(&mut s, &st, &te, &bank, &Distance::Mse)?;
    let residual = mkd_review_residual_loss(&mut s, &st, &te, &head, &fusers, &Distance::Mse)?;
    let teacher_stages: Vec<usize> = residual.terms.iter().map(|t| t.teacher_stage).collect();
    assert_eq!(teacher_stages, (1..=n).rev().collect::<Vec<_>>());
    Ok((naive.terms.len(), residual.terms.len()))
}
