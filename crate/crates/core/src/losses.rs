//! Feature distillation objectives.
//!
//! Every loss here takes student stage features as graph variables and
//! teacher stage features as constants on the same graph, so gradients only
//! ever reach the student and its auxiliary modules.

use std::collections::BTreeMap;

use rand::Rng;
use reviewkd_tensor::{Graph, ParamId, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Abf, Hcl};
use crate::nets::{review_pairs, same_stage_pairs, Session, StageVars, TransformBank};
use crate::types::{DistillConfig, Mechanism};

/// Distance used between a (transformed) student feature and a teacher
/// feature.
#[derive(Clone, Debug, PartialEq)]
pub enum Distance {
    Mse,
    Hcl(Hcl),
}

impl Distance {
    pub fn from_config(config: &DistillConfig) -> Result<Self> {
        if config.use_hcl {
            Ok(Distance::Hcl(Hcl::from_pyramid(&config.pyramid_levels)?))
        } else {
            Ok(Distance::Mse)
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, student: Var, teacher: Var) -> Result<Var> {
        match self {
            Distance::Mse => distance(&mut s.graph, student, teacher),
            Distance::Hcl(h) => h.forward(s, student, teacher),
        }
    }
}

/// Mean squared difference over all elements.
pub fn distance(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "distance operands differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(g.mse(a, b)?)
}

/// One distance term of a distillation loss: student stages `lo..=hi`
/// (a single stage unless fused) supervised by one teacher stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermVar {
    pub student_stages: (usize, usize),
    pub teacher_stage: usize,
    pub var: Var,
}

/// Distance terms plus their sum, still on the graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistillTerms {
    pub terms: Vec<TermVar>,
    pub total: Var,
}

impl DistillTerms {
    fn summed(g: &mut Graph, terms: Vec<TermVar>) -> Result<Self> {
        let vars: Vec<Var> = terms.iter().map(|t| t.var).collect();
        let total = g.add_n(&vars)?;
        Ok(Self { terms, total })
    }

    pub fn values(&self, g: &Graph) -> Vec<LossTerm> {
        self.terms
            .iter()
            .map(|t| LossTerm {
                student_stages: t.student_stages,
                teacher_stage: t.teacher_stage,
                value: g.scalar(t.var),
            })
            .collect()
    }
}

/// Evaluated distance term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub student_stages: (usize, usize),
    pub teacher_stage: usize,
    pub value: f64,
}

/// Evaluated objective: `total = ce_weight · ce + distill_weight · distill`.
///
/// For feature mechanisms `ce_weight` is 1 and `distill_weight` is λ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub distill: f64,
    pub ce_weight: f64,
    pub distill_weight: f64,
    pub terms: Vec<LossTerm>,
}

impl LossBreakdown {
    /// Combines a cross-entropy value with distance terms under weight λ.
    pub fn combine(ce: f64, terms: Vec<LossTerm>, lambda: f64) -> Self {
        let distill = terms.iter().map(|t| t.value).sum();
        Self::with_distill(ce, distill, terms, lambda)
    }

    pub fn with_distill(ce: f64, distill: f64, terms: Vec<LossTerm>, lambda: f64) -> Self {
        Self {
            total: ce + lambda * distill,
            ce,
            distill,
            ce_weight: 1.0,
            distill_weight: lambda,
            terms,
        }
    }

    /// Term values keyed by `(first student stage, teacher stage)`.
    pub fn per_pair(&self) -> BTreeMap<(usize, usize), f64> {
        let mut m = BTreeMap::new();
        for t in &self.terms {
            *m.entry((t.student_stages.0, t.teacher_stage)).or_insert(0.0) += t.value;
        }
        m
    }

    /// Term values summed per teacher stage.
    pub fn per_teacher_stage(&self) -> BTreeMap<usize, f64> {
        let mut m = BTreeMap::new();
        for t in &self.terms {
            *m.entry(t.teacher_stage).or_insert(0.0) += t.value;
        }
        m
    }
}

fn check_stage_counts(student: &StageVars, teacher: &StageVars) -> Result<usize> {
    if student.stages() != teacher.stages() {
        return Err(Error::StageCount {
            student: student.stages(),
            teacher: teacher.stages(),
        });
    }
    Ok(student.stages())
}

/// Distance between student stage `i`, transformed to the shape of teacher
/// stage `j`, and teacher stage `j`.
pub fn pair_loss(
    s: &mut Session<'_>,
    student: &StageVars,
    teacher: &StageVars,
    (i, j): (usize, usize),
    transforms: &TransformBank,
    dist: &Distance,
) -> Result<TermVar> {
    let fs = student.feature(i)?;
    let ft = teacher.feature(j)?;
    let mapped = transforms.get(i, j)?.forward_like(s, fs, ft)?;
    let var = dist.forward(s, mapped, ft)?;
    Ok(TermVar {
        student_stages: (i, i),
        teacher_stage: j,
        var,
    })
}

fn pairs_loss(
    s: &mut Session<'_>,
    student: &StageVars,
    teacher: &StageVars,
    pairs: &[(usize, usize)],
    transforms: &TransformBank,
    dist: &Distance,
) -> Result<DistillTerms> {
    let terms = pairs
        .iter()
        .map(|&p| pair_loss(s, student, teacher, p, transforms, dist))
        .collect::<Result<Vec<_>>>()?;
    DistillTerms::summed(&mut s.graph, terms)
}

/// Single-pair supervision. Same-stage `(i, i)` is the classic form; other
/// pairs are used by the cross-stage grid.
pub fn skd_loss(
    s: &mut Session<'_>,
    student: &StageVars,
    teacher: &StageVars,
    pair: (usize, usize),
    transforms: &TransformBank,
    dist: &Distance,
) -> Result<DistillTerms> {
    pairs_loss(s, student, teacher, &[pair], transforms, dist)
}

/// Same-stage supervision summed over every stage.
pub fn mkd_loss(
    s: &mut Session<'_>,
    student: &StageVars,
    teacher: &StageVars,
    transforms: &TransformBank,
    dist: &Distance,
) -> Result<DistillTerms> {
    let n = check_stage_counts(student, teacher)?;
    pairs_loss(s, student, teacher, &same_stage_pairs(n), transforms, dist)
}

/// Student stage `i` supervised by teacher stages `1..=i`.
pub fn skd_review_loss(
    s: &mut Session<'_>,
    student: &StageVars,
    teacher: &StageVars,
    i: usize,
    transforms: &TransformBank,
    dist: &Distance,
) -> Result<DistillTerms> {
    let n = check_stage_counts(student, teacher)?;
    if i == 0 || i > n {
        return Err(Error::StageOutOfRange { stage: i, stages: n });
    }
    let pairs: Vec<_> = (1..=i).map(|j| (i, j)).collect();
    pairs_loss(s, student, teacher, &pairs, transforms, dist)
}

/// Every pair `j <= i`, summed student-stage major.
pub fn mkd_review_naive_loss(
    s: &mut Session<'_>,
    student: &StageVars,
    teacher: &StageVars,
    transforms: &TransformBank,
    dist: &Distance,
) -> Result<DistillTerms> {
    let n = check_stage_counts(student, teacher)?;
    pairs_loss(s, student, teacher, &review_pairs(n), transforms, dist)
}

/// The same pairs as [`mkd_review_naive_loss`], grouped and summed teacher
/// stage first.
pub fn mkd_review_reordered_loss(
    s: &mut Session<'_>,
    student: &StageVars,
    teacher: &StageVars,
    transforms: &TransformBank,
    dist: &Distance,
) -> Result<DistillTerms> {
    let n = check_stage_counts(student, teacher)?;
    let mut terms = Vec::with_capacity(n * (n + 1) / 2);
    let mut groups = Vec::with_capacity(n);
    for j in 1..=n {
        let group: Vec<TermVar> = (j..=n)
            .map(|i| pair_loss(s, student, teacher, (i, j), transforms, dist))
            .collect::<Result<_>>()?;
        let vars: Vec<Var> = group.iter().map(|t| t.var).collect();
        groups.push(s.graph.add_n(&vars)?);
        terms.extend(group);
    }
    let total = s.graph.add_n(&groups)?;
    Ok(DistillTerms { terms, total })
}

/// Residual recursion with top-down fusion.
///
/// `head` maps student stage `n` to teacher stage `n`; `fusers[j - 1]`
/// merges student stage `j` with the fused result of stages `j+1..=n`. One
/// distance term per teacher stage, emitted from stage `n` down to 1.
pub fn mkd_review_residual_loss(
    s: &mut Session<'_>,
    student: &StageVars,
    teacher: &StageVars,
    head: &Abf,
    fusers: &[Abf],
    dist: &Distance,
) -> Result<DistillTerms> {
    let n = check_stage_counts(student, teacher)?;
    if fusers.len() + 1 != n {
        return Err(Error::FuserCount {
            expected: n - 1,
            got: fusers.len(),
        });
    }
    let mut terms = Vec::with_capacity(n);
    let mut emit = |s: &mut Session<'_>, fused: Var, j: usize| -> Result<()> {
        let ft = teacher.feature(j)?;
        if s.graph.shape(fused) != s.graph.shape(ft) {
            return Err(Error::Shape(format!(
                "fused stage {j} output {:?} does not match teacher {:?}",
                s.graph.shape(fused),
                s.graph.shape(ft)
            )));
        }
        let var = dist.forward(s, fused, ft)?;
        terms.push(TermVar {
            student_stages: (j, n),
            teacher_stage: j,
            var,
        });
        Ok(())
    };
    let top = head.forward(s, student.feature(n)?, None)?;
    emit(s, top.fused, n)?;
    let mut residual = top.residual;
    for j in (1..n).rev() {
        let step = fusers[j - 1].forward(s, student.feature(j)?, Some(residual))?;
        emit(s, step.fused, j)?;
        residual = step.residual;
    }
    DistillTerms::summed(&mut s.graph, terms)
}

/// Temperature-scaled soft-target divergence `T² · KL(p_t ‖ p_s)`.
pub fn kd_logit_loss(g: &mut Graph, student_logits: Var, teacher_logits: Var, temperature: f64) -> Result<Var> {
    Ok(g.soft_kl(student_logits, teacher_logits, temperature)?)
}

/// Training objective on the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub total: Var,
    pub ce: Var,
    pub distill: Option<DistillTerms>,
    pub ce_weight: f64,
    pub distill_weight: f64,
}

impl Objective {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let (distill, terms) = match &self.distill {
            Some(d) => (g.scalar(d.total), d.values(g)),
            None => (0.0, Vec::new()),
        };
        LossBreakdown {
            total: g.scalar(self.total),
            ce: g.scalar(self.ce),
            distill,
            ce_weight: self.ce_weight,
            distill_weight: self.distill_weight,
            terms,
        }
    }
}

/// Cross-entropy plus λ times the distillation terms.
pub fn total_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    distill: Option<DistillTerms>,
    lambda: f64,
) -> Result<Objective> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    weighted_objective(g, logits, labels, distill, 1.0, lambda)
}

fn weighted_objective(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    distill: Option<DistillTerms>,
    ce_weight: f64,
    distill_weight: f64,
) -> Result<Objective> {
    let ce = g.cross_entropy(logits, labels)?;
    let total = match &distill {
        Some(d) if distill_weight != 0.0 => {
            let a = if ce_weight == 1.0 { ce } else { g.scale(ce, ce_weight) };
            let b = g.scale(d.total, distill_weight);
            g.add(a, b)?
        }
        _ if ce_weight == 1.0 => ce,
        _ => g.scale(ce, ce_weight),
    };
    Ok(Objective {
        total,
        ce,
        distill,
        ce_weight,
        distill_weight,
    })
}

/// Top-down fusion modules of the residual form.
#[derive(Clone, Debug)]
pub struct FusionChain {
    pub head: Abf,
    pub fusers: Vec<Abf>,
}

/// `(channels, height, width)` of each stage.
pub type StageShapes = [(usize, usize, usize)];

/// A configured distillation objective together with its auxiliary modules.
#[derive(Clone, Debug)]
pub struct Distiller {
    config: DistillConfig,
    transforms: TransformBank,
    fusion: Option<FusionChain>,
    distance: Distance,
}

impl Distiller {
    /// Registers the transforms or fusers `config` needs in `store`.
    pub fn new<R: Rng + ?Sized>(
        config: &DistillConfig,
        student: &StageShapes,
        teacher: &StageShapes,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if student.len() != teacher.len() {
            return Err(Error::StageCount {
                student: student.len(),
                teacher: teacher.len(),
            });
        }
        let n = student.len();
        let cs: Vec<usize> = student.iter().map(|s| s.0).collect();
        let ct: Vec<usize> = teacher.iter().map(|s| s.0).collect();
        let pairs = match config.mechanism {
            Mechanism::Skd => vec![checked_pair(config, n)?],
            Mechanism::SkdReview => {
                let (i, _) = checked_pair(config, n)?;
                (1..=i).map(|j| (i, j)).collect()
            }
            Mechanism::Mkd => same_stage_pairs(n),
            Mechanism::MkdReviewNaive => review_pairs(n),
            _ => Vec::new(),
        };
        let transforms = TransformBank::build(store, &pairs, &cs, &ct, rng)?;
        let fusion = if config.mechanism == Mechanism::MkdReviewResidual {
            let mid = config
                .fusion_channels
                .unwrap_or_else(|| ct.iter().copied().min().unwrap_or(1));
            let head = Abf::new(store, &format!("fusion.s{n}"), cs[n - 1], mid, ct[n - 1], false, rng);
            let fusers = (1..n)
                .map(|j| Abf::new(store, &format!("fusion.s{j}"), cs[j - 1], mid, ct[j - 1], config.use_abf, rng))
                .collect();
            Some(FusionChain { head, fusers })
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            transforms,
            fusion,
            distance: Distance::from_config(config)?,
        })
    }

    /// Assembles a distiller from prebuilt modules.
    pub fn from_parts(
        config: &DistillConfig,
        transforms: TransformBank,
        fusion: Option<FusionChain>,
        distance: Distance,
    ) -> Self {
        Self {
            config: config.clone(),
            transforms,
            fusion,
            distance,
        }
    }

    pub fn config(&self) -> &DistillConfig {
        &self.config
    }

    pub fn mechanism(&self) -> Mechanism {
        self.config.mechanism
    }

    /// Whether the objective needs teacher stage features or logits at all.
    pub fn uses_teacher(&self) -> bool {
        self.config.mechanism != Mechanism::None
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.transforms.params();
        if let Some(f) = &self.fusion {
            v.extend(f.head.params());
            for u in &f.fusers {
                v.extend(u.params());
            }
        }
        v
    }

    /// Feature distillation terms; `None` for plain and logit mechanisms.
    pub fn distill_terms(
        &self,
        s: &mut Session<'_>,
        student: &StageVars,
        teacher: &StageVars,
    ) -> Result<Option<DistillTerms>> {
        let (t, d) = (&self.transforms, &self.distance);
        let terms = match self.config.mechanism {
            Mechanism::None | Mechanism::LogitKd => return Ok(None),
            Mechanism::Skd => skd_loss(s, student, teacher, checked_pair(&self.config, student.stages())?, t, d)?,
            Mechanism::Mkd => mkd_loss(s, student, teacher, t, d)?,
            Mechanism::SkdReview => {
                let (i, _) = checked_pair(&self.config, student.stages())?;
                skd_review_loss(s, student, teacher, i, t, d)?
            }
            Mechanism::MkdReviewNaive => mkd_review_naive_loss(s, student, teacher, t, d)?,
            Mechanism::MkdReviewResidual => {
                let f = self.fusion.as_ref().ok_or_else(|| {
                    Error::Config("residual mechanism built without fusion modules".into())
                })?;
                mkd_review_residual_loss(s, student, teacher, &f.head, &f.fusers, d)?
            }
        };
        Ok(Some(terms))
    }

    /// Full training objective for one batch. `teacher` may be `None` only
    /// for the plain mechanism.
    pub fn objective(
        &self,
        s: &mut Session<'_>,
        student: &StageVars,
        teacher: Option<&StageVars>,
        labels: &[usize],
    ) -> Result<Objective> {
        let c = &self.config;
        match (c.mechanism, teacher) {
            (Mechanism::None, _) => total_loss(&mut s.graph, student.logits, labels, None, 0.0),
            (_, None) => Err(Error::Config(format!("mechanism {} needs teacher outputs", c.mechanism))),
            (Mechanism::LogitKd, Some(te)) => {
                let kd = kd_logit_loss(&mut s.graph, student.logits, te.logits, c.kd_temperature)?;
                let terms = DistillTerms {
                    terms: Vec::new(),
                    total: kd,
                };
                weighted_objective(&mut s.graph, student.logits, labels, Some(terms), 1.0 - c.kd_weight, c.kd_weight)
            }
            (_, Some(te)) => {
                let terms = self.distill_terms(s, student, te)?;
                total_loss(&mut s.graph, student.logits, labels, terms, c.lambda_weight)
            }
        }
    }
}

fn checked_pair(config: &DistillConfig, n: usize) -> Result<(usize, usize)> {
    let (i, j) = config
        .stage_pair
        .ok_or_else(|| Error::Config(format!("stage_pair required for mechanism {}", config.mechanism)))?;
    for k in [i, j] {
        if k == 0 || k > n {
            return Err(Error::StageOutOfRange { stage: k, stages: n });
        }
    }
    Ok((i, j))
}
