//! Attention-based fusion of adjacent student stages and the pyramid-pooled
//! hierarchical context distance.

use rand::Rng;
use reviewkd_tensor::{ParamId, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{BatchNorm2d, Conv2d, Session};

/// Merges a student feature with the already-fused deeper feature.
///
/// `reduce` projects the incoming feature to `mid` channels. When a deeper
/// fused feature is supplied it is resized (nearest) to the incoming spatial
/// size, both are concatenated, and a 1×1 convolution with sigmoid yields
/// two per-pixel gates `A1`, `A2`. The gated sum `A1⊙reduced + A2⊙higher`
/// is handed down the recursion; `out` (3×3) maps it to the teacher width.
/// Without `attention` the two are simply added.
#[derive(Clone, Debug)]
pub struct Abf {
    reduce: Conv2d,
    reduce_bn: Option<BatchNorm2d>,
    attention: Option<Conv2d>,
    out: Conv2d,
    out_bn: Option<BatchNorm2d>,
}

/// Outputs of one fusion step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AbfOutput {
    /// Compared against the teacher feature.
    pub fused: Var,
    /// Gated sum before `out`; becomes the deeper input of the next step.
    pub residual: Var,
    /// `(A1, A2)` when gating ran.
    pub gates: Option<(Var, Var)>,
}

impl Abf {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        mid_channels: usize,
        out_channels: usize,
        attention: bool,
        rng: &mut R,
    ) -> Self {
        let reduce = Conv2d::new(store, &format!("{name}.reduce"), in_channels, mid_channels, 1, 1, 0, false, rng);
        let reduce_bn = Some(BatchNorm2d::new(store, &format!("{name}.reduce_bn"), mid_channels));
        let attention = attention.then(|| {
            Conv2d::new(store, &format!("{name}.att"), 2 * mid_channels, 2, 1, 1, 0, true, rng)
        });
        let out = Conv2d::new(store, &format!("{name}.out"), mid_channels, out_channels, 3, 1, 1, false, rng);
        let out_bn = Some(BatchNorm2d::new(store, &format!("{name}.out_bn"), out_channels));
        Self {
            reduce,
            reduce_bn,
            attention,
            out,
            out_bn,
        }
    }

    /// Identity `reduce` and `out`, no normalization; with `attention` the
    /// gate convolution is randomly initialized.
    pub fn identity<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        attention: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            reduce: Conv2d::identity(store, &format!("{name}.reduce"), channels, 1),
            reduce_bn: None,
            attention: attention
                .then(|| Conv2d::new(store, &format!("{name}.att"), 2 * channels, 2, 1, 1, 0, true, rng)),
            out: Conv2d::identity(store, &format!("{name}.out"), channels, 3),
            out_bn: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.reduce.in_channels
    }

    pub fn mid_channels(&self) -> usize {
        self.reduce.out_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out.out_channels
    }

    pub fn attention_conv(&self) -> Option<&Conv2d> {
        self.attention.as_ref()
    }

    pub fn forward(&self, s: &mut Session<'_>, lower: Var, higher: Option<Var>) -> Result<AbfOutput> {
        let (_, _, h, w) = s.graph.value(lower).dims4()?;
        let mut reduced = self.reduce.forward(s, lower)?;
        if let Some(bn) = &self.reduce_bn {
            reduced = bn.forward(s, reduced)?;
        }
        let (residual, gates) = match higher {
            None => (reduced, None),
            Some(hi) => {
                let (_, hc, hh, hw) = s.graph.value(hi).dims4()?;
                if hc != self.mid_channels() {
                    return Err(Error::Shape(format!(
                        "fusion expects {} channels from the deeper input, got {hc}",
                        self.mid_channels()
                    )));
                }
                let up = if (hh, hw) == (h, w) {
                    hi
                } else {
                    s.graph.resize_nearest(hi, h, w)?
                };
                match &self.attention {
                    Some(att) => {
                        let cat = s.graph.concat_channels(&[reduced, up])?;
                        let logits = att.forward(s, cat)?;
                        let maps = s.graph.sigmoid(logits);
                        let a1 = s.graph.slice_channels(maps, 0, 1)?;
                        let a2 = s.graph.slice_channels(maps, 1, 1)?;
                        let lo = s.graph.gate(reduced, a1)?;
                        let hi = s.graph.gate(up, a2)?;
                        (s.graph.add(lo, hi)?, Some((a1, a2)))
                    }
                    None => (s.graph.add(reduced, up)?, None),
                }
            }
        };
        let mut fused = self.out.forward(s, residual)?;
        if let Some(bn) = &self.out_bn {
            fused = bn.forward(s, fused)?;
        }
        Ok(AbfOutput {
            fused,
            residual,
            gates,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.reduce.params();
        if let Some(bn) = &self.reduce_bn {
            v.extend(bn.params());
        }
        if let Some(a) = &self.attention {
            v.extend(a.params());
        }
        v.extend(self.out.params());
        if let Some(bn) = &self.out_bn {
            v.extend(bn.params());
        }
        v
    }
}

/// One pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolLevel {
    /// The unpooled feature.
    Full,
    /// Adaptive average pooling to `size × size` (clamped to the input).
    Size(usize),
}

/// Hierarchical context distance: weighted mean squared error between
/// adaptively average-pooled versions of two features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hcl {
    levels: Vec<PoolLevel>,
    weights: Vec<f64>,
}

impl Hcl {
    /// Levels must be strictly descending (`Full` first if present) and
    /// weights positive; weights are normalized to sum to one.
    pub fn new(levels: Vec<PoolLevel>, weights: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels.len() != weights.len() {
            return Err(Error::Config(format!(
                "{} pyramid levels with {} weights",
                levels.len(),
                weights.len()
            )));
        }
        let rank = |l: &PoolLevel| match l {
            PoolLevel::Full => usize::MAX,
            PoolLevel::Size(s) => *s,
        };
        if levels.iter().any(|l| rank(l) == 0) {
            return Err(Error::Config("pyramid levels must be >= 1".into()));
        }
        if levels.windows(2).any(|w| rank(&w[0]) <= rank(&w[1])) {
            return Err(Error::Config(format!("pyramid levels not descending: {levels:?}")));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("level weights must be positive: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        Ok(Self {
            levels,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn equal(levels: Vec<PoolLevel>) -> Result<Self> {
        let n = levels.len();
        Self::new(levels, vec![1.0; n])
    }

    /// The full-resolution level followed by `sizes`, equally weighted.
    pub fn from_pyramid(sizes: &[usize]) -> Result<Self> {
        let mut levels = vec![PoolLevel::Full];
        levels.extend(sizes.iter().map(|&s| PoolLevel::Size(s)));
        Self::equal(levels)
    }

    pub fn levels(&self) -> &[PoolLevel] {
        &self.levels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted sum of per-level mean squared errors.
    pub fn forward(&self, s: &mut Session<'_>, student: Var, teacher: Var) -> Result<Var> {
        if s.graph.shape(student) != s.graph.shape(teacher) {
            return Err(Error::Shape(format!(
                "hcl operands differ: {:?} vs {:?}",
                s.graph.shape(student),
                s.graph.shape(teacher)
            )));
        }
        let (_, _, h, w) = s.graph.value(student).dims4()?;
        let mut terms = Vec::with_capacity(self.levels.len());
        for (level, weight) in self.levels.iter().zip(&self.weights) {
            let (ph, pw) = match level {
                PoolLevel::Full => (h, w),
                PoolLevel::Size(l) => ((*l).min(h), (*l).min(w)),
            };
            let (a, b) = if (ph, pw) == (h, w) {
                (student, teacher)
            } else {
                (
                    s.graph.adaptive_avg_pool(student, ph, pw)?,
                    s.graph.adaptive_avg_pool(teacher, ph, pw)?,
                )
            };
            let mse = s.graph.mse(a, b)?;
            terms.push(s.graph.scale(mse, *weight));
        }
        Ok(s.graph.add_n(&terms)?)
    }
}
