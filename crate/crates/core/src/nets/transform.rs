use std::collections::BTreeMap;

use rand::Rng;
use reviewkd_tensor::{ParamId, ParamStore, Var};

use super::layers::{BatchNorm2d, Conv2d, Session};
use crate::error::{Error, Result};

/// Maps a student feature onto the shape of a teacher feature:
/// 1×1 convolution (plus batch norm) for channels, nearest resampling for
/// the spatial size. Teacher features are never transformed.
#[derive(Clone, Debug)]
pub struct StudentTransform {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

impl StudentTransform {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_channels, out_channels, 1, 1, 0, false, rng),
            norm: Some(BatchNorm2d::new(store, &format!("{name}.bn"), out_channels)),
        }
    }

    /// Identity weights and no normalization: output equals input whenever
    /// the target shape already matches.
    pub fn identity(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            conv: Conv2d::identity(store, &format!("{name}.conv"), channels, 1),
            norm: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    /// Transforms `feature` to `(N, out_channels, target_h, target_w)`.
    pub fn forward(&self, s: &mut Session<'_>, feature: Var, target: (usize, usize)) -> Result<Var> {
        let (_, c, h, w) = s.graph.value(feature).dims4()?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "transform expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(Error::Shape(format!("target spatial size {th}x{tw} below 1x1")));
        }
        let mut y = self.conv.forward(s, feature)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(s, y)?;
        }
        if (h, w) != (th, tw) {
            y = s.graph.resize_nearest(y, th, tw)?;
        }
        Ok(y)
    }

    /// Transforms `feature` to exactly the shape of `target`.
    pub fn forward_like(&self, s: &mut Session<'_>, feature: Var, target: Var) -> Result<Var> {
        let (tn, tc, th, tw) = s.graph.value(target).dims4()?;
        let n = s.graph.value(feature).dims4()?.0;
        if tn != n || tc != self.out_channels() {
            return Err(Error::Shape(format!(
                "transform output (N={n}, C={}) cannot match target {:?}",
                self.out_channels(),
                s.graph.shape(target)
            )));
        }
        self.forward(s, feature, (th, tw))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.conv.params();
        if let Some(bn) = &self.norm {
            v.extend(bn.params());
        }
        v
    }
}

/// Student transforms keyed by `(student_stage, teacher_stage)`.
#[derive(Clone, Debug, Default)]
pub struct TransformBank {
    transforms: BTreeMap<(usize, usize), StudentTransform>,
}

impl TransformBank {
    /// One learned transform per pair, mapping student channels of stage `i`
    /// to teacher channels of stage `j`.
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        pairs: &[(usize, usize)],
        student_channels: &[usize],
        teacher_channels: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut transforms = BTreeMap::new();
        for &(i, j) in pairs {
            let cs = *student_channels
                .get(i.wrapping_sub(1))
                .ok_or(Error::StageOutOfRange {
                    stage: i,
                    stages: student_channels.len(),
                })?;
            let ct = *teacher_channels
                .get(j.wrapping_sub(1))
                .ok_or(Error::StageOutOfRange {
                    stage: j,
                    stages: teacher_channels.len(),
                })?;
            transforms.insert(
                (i, j),
                StudentTransform::new(store, &format!("transform.s{i}t{j}"), cs, ct, rng),
            );
        }
        Ok(Self { transforms })
    }

    /// Identity transforms for every pair; requires equal channel counts.
    pub fn identity(store: &mut ParamStore, pairs: &[(usize, usize)], channels: &[usize]) -> Result<Self> {
        let mut transforms = BTreeMap::new();
        for &(i, j) in pairs {
            let (ci, cj) = (channels[i - 1], channels[j - 1]);
            if ci != cj {
                return Err(Error::Shape(format!(
                    "identity transform s{i}->t{j} needs equal channels, got {ci} vs {cj}"
                )));
            }
            transforms.insert(
                (i, j),
                StudentTransform::identity(store, &format!("transform.s{i}t{j}"), ci),
            );
        }
        Ok(Self { transforms })
    }

    pub fn insert(&mut self, student: usize, teacher: usize, t: StudentTransform) {
        self.transforms.insert((student, teacher), t);
    }

    pub fn get(&self, student: usize, teacher: usize) -> Result<&StudentTransform> {
        self.transforms
            .get(&(student, teacher))
            .ok_or(Error::MissingTransform { student, teacher })
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.transforms.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.transforms.values().flat_map(|t| t.params()).collect()
    }
}

/// All pairs `(i, j)` with `1 <= j <= i <= n`, student-stage major.
pub fn review_pairs(n: usize) -> Vec<(usize, usize)> {
    (1..=n).flat_map(|i| (1..=i).map(move |j| (i, j))).collect()
}

/// Same-stage pairs `(i, i)`.
pub fn same_stage_pairs(n: usize) -> Vec<(usize, usize)> {
    (1..=n).map(|i| (i, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use reviewkd_tensor::gradcheck::{numeric_gradient, relative_error};
    use reviewkd_tensor::Tensor;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn output_matches_target_shape() {
        let mut store = ParamStore::new();
        let t = StudentTransform::new(&mut store, "t", 16, 32, &mut rng());
        let mut s = Session::train(&store);
        let x = s.input(Tensor::randn(&[2, 16, 8, 8], 1.0, &mut rng()));
        let target = s.input(Tensor::zeros(&[2, 32, 16, 16]));
        let y = t.forward_like(&mut s, x, target).unwrap();
        assert_eq!(s.graph.shape(y), &[2, 32, 16, 16]);
    }

    #[test]
    fn identity_is_exact() {
        let mut store = ParamStore::new();
        let t = StudentTransform::identity(&mut store, "t", 5);
        let mut s = Session::train(&store);
        let xt = Tensor::randn(&[2, 5, 4, 4], 1.0, &mut rng());
        let x = s.input(xt.clone());
        let y = t.forward(&mut s, x, (4, 4)).unwrap();
        assert_eq!(s.value(y), &xt);
    }

    #[test]
    fn empty_target_rejected() {
        let mut store = ParamStore::new();
        let t = StudentTransform::identity(&mut store, "t", 2);
        let mut s = Session::train(&store);
        let x = s.input(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(t.forward(&mut s, x, (0, 2)).is_err());
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let mut store = ParamStore::new();
        let t = StudentTransform::new(&mut store, "t", 3, 4, &mut rng());
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng());
        let weights = Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng());
        let eval = |xt: &Tensor| -> Result<(f64, Option<Tensor>)> {
            let mut s = Session::train(&store);
            let xv = s.graph.leaf(xt.clone());
            let y = t.forward(&mut s, xv, (8, 8))?;
            let w = s.input(weights.clone());
            let m = s.graph.mul(y, w)?;
            let l = s.graph.sum_all(m);
            let g = s.graph.backward(l)?;
            Ok((s.graph.scalar(l), g.wrt(xv).cloned()))
        };
        let (_, analytic) = eval(&x).unwrap();
        let idx: Vec<usize> = (0..x.len()).collect();
        let numeric = numeric_gradient(&x, &idx, 1e-3, |p| Ok(eval(p).map(|r| r.0).unwrap())).unwrap();
        let err = relative_error(analytic.unwrap().data(), &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn review_pair_enumeration() {
        assert_eq!(review_pairs(2), vec![(1, 1), (2, 1), (2, 2)]);
        for n in 1..=5 {
            assert_eq!(review_pairs(n).len(), n * (n + 1) / 2);
        }
    }
}
