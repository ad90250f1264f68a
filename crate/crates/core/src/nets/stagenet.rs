use rand::Rng;
use reviewkd_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, Linear, Session};
use crate::error::{Error, Result};
use crate::types::{FeatureMap, Source, StageOutputs};

/// Shape of a stage-partitioned residual network.
///
/// Stage 1 owns the stem convolution. Every stage's first block applies the
/// stage's downsampling stride, so a stage ends right before the next
/// downsampling layer and the last stage ends before global pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub downsample: Vec<usize>,
    pub num_classes: usize,
    /// Zero the last normalization scale of every residual branch so each
    /// block starts as an identity map (up to the shortcut projection).
    #[serde(default)]
    pub zero_init_residual: bool,
}

impl ArchSpec {
    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages();
        if n == 0 {
            return Err(Error::Config(format!("{}: no stages", self.name)));
        }
        if self.blocks_per_stage.len() != n || self.downsample.len() != n {
            return Err(Error::Config(format!(
                "{}: stage lists disagree in length",
                self.name
            )));
        }
        if self.blocks_per_stage.contains(&0)
            || self.downsample.contains(&0)
            || self.stage_channels.contains(&0)
            || self.stem_channels == 0
            || self.in_channels == 0
            || self.num_classes == 0
        {
            return Err(Error::Config(format!("{}: zero-sized component", self.name)));
        }
        Ok(())
    }

    /// Product of all downsampling factors.
    pub fn total_stride(&self) -> usize {
        self.downsample.iter().product()
    }

    /// `(C, H, W)` of every stage for an `h × w` input.
    pub fn stage_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        let mut f = 1;
        self.stage_channels
            .iter()
            .zip(&self.downsample)
            .map(|(&c, &d)| {
                f *= d;
                (c, h / f, w / f)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false, rng);
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), cout);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng);
        let gamma = if zero_init { 0.0 } else { 1.0 };
        let bn2 = BatchNorm2d::with_gamma(store, &format!("{name}.bn2"), cout, gamma);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(store, &format!("{name}.down"), cin, cout, 1, stride, 0, false, rng),
                BatchNorm2d::new(store, &format!("{name}.down_bn"), cout),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = self.conv2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let p = conv.forward(s, x)?;
                bn.forward(s, p)?
            }
            None => x,
        };
        let sum = s.graph.add(h, skip)?;
        Ok(s.graph.relu(sum))
    }

    fn params(&self) -> Vec<ParamId> {
        let mut v = self.conv1.params();
        v.extend(self.bn1.params());
        v.extend(self.conv2.params());
        v.extend(self.bn2.params());
        if let Some((c, b)) = &self.shortcut {
            v.extend(c.params());
            v.extend(b.params());
        }
        v
    }
}

/// Graph handles of one forward pass: per-stage features and logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageVars {
    pub features: Vec<Var>,
    pub logits: Var,
}

impl StageVars {
    pub fn stages(&self) -> usize {
        self.features.len()
    }

    /// Feature handle of 1-based stage `k`.
    pub fn feature(&self, k: usize) -> Result<Var> {
        if k == 0 || k > self.features.len() {
            return Err(Error::StageOutOfRange {
                stage: k,
                stages: self.features.len(),
            });
        }
        Ok(self.features[k - 1])
    }

    /// Copies the recorded values out of the graph.
    pub fn to_outputs(&self, graph: &Graph, source: Source) -> Result<StageOutputs> {
        let features = self
            .features
            .iter()
            .enumerate()
            .map(|(k, v)| FeatureMap::new(graph.value(*v).clone(), k + 1, source))
            .collect::<Result<Vec<_>>>()?;
        StageOutputs::new(features, graph.value(self.logits).clone())
    }

    /// Places precomputed outputs on a graph as constants.
    pub fn constants(graph: &mut Graph, outputs: &StageOutputs) -> Self {
        Self {
            features: outputs
                .features()
                .iter()
                .map(|f| graph.input(f.data().clone()))
                .collect(),
            logits: graph.input(outputs.logits().clone()),
        }
    }
}

/// A residual CNN partitioned into stages that expose their outputs.
#[derive(Clone, Debug)]
pub struct StageNet {
    spec: ArchSpec,
    stem: (Conv2d, BatchNorm2d),
    stages: Vec<Vec<BasicBlock>>,
    head: Linear,
}

impl StageNet {
    /// Registers all parameters in `store` and initializes them from `rng`.
    pub fn new<R: Rng + ?Sized>(spec: ArchSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let p = &spec.name;
        let stem = (
            Conv2d::new(store, &format!("{p}.stem"), spec.in_channels, spec.stem_channels, 3, 1, 1, false, rng),
            BatchNorm2d::new(store, &format!("{p}.stem_bn"), spec.stem_channels),
        );
        let mut cin = spec.stem_channels;
        let mut stages = Vec::with_capacity(spec.stages());
        for (k, ((&cout, &blocks), &down)) in spec
            .stage_channels
            .iter()
            .zip(&spec.blocks_per_stage)
            .zip(&spec.downsample)
            .enumerate()
        {
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if b == 0 { down } else { 1 };
                stage.push(BasicBlock::new(
                    store,
                    &format!("{p}.stage{}.block{b}", k + 1),
                    cin,
                    cout,
                    stride,
                    spec.zero_init_residual,
                    rng,
                ));
                cin = cout;
            }
            stages.push(stage);
        }
        let head = Linear::new(store, &format!("{p}.fc"), cin, spec.num_classes, rng);
        Ok(Self {
            spec,
            stem,
            stages,
            head,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn stages(&self) -> usize {
        self.spec.stages()
    }

    pub fn channels(&self) -> &[usize] {
        &self.spec.stage_channels
    }

    /// Every parameter and buffer id, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.stem.0.params();
        v.extend(self.stem.1.params());
        for stage in &self.stages {
            for block in stage {
                v.extend(block.params());
            }
        }
        v.extend(self.head.params());
        v
    }

    /// Scalar count of trainable parameters.
    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        store.count_scalars(&self.param_ids())
    }

    /// Runs stages `1..=n` and the classifier, returning every stage output.
    pub fn forward_with_stages(&self, s: &mut Session<'_>, x: Var) -> Result<StageVars> {
        let shape = s.graph.shape(x).to_vec();
        let [_, c, h, w] = shape[..] else {
            return Err(Error::Shape(format!("expected NCHW input, got {shape:?}")));
        };
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "{} expects {} input channels, got {c}",
                self.spec.name, self.spec.in_channels
            )));
        }
        let stride = self.spec.total_stride();
        if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by total downsampling {stride}"
            )));
        }
        let mut hcur = self.stem.0.forward(s, x)?;
        hcur = self.stem.1.forward(s, hcur)?;
        hcur = s.graph.relu(hcur);
        let mut features = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                hcur = block.forward(s, hcur)?;
            }
            features.push(hcur);
        }
        let pooled = s.graph.adaptive_avg_pool(hcur, 1, 1)?;
        let flat = s.graph.flatten(pooled)?;
        let logits = self.head.forward(s, flat)?;
        Ok(StageVars { features, logits })
    }

    /// Inference-mode forward returning owned outputs.
    pub fn infer(&self, store: &ParamStore, images: &Tensor, source: Source) -> Result<StageOutputs> {
        let mut s = Session::eval(store);
        let x = s.input(images.clone());
        let vars = self.forward_with_stages(&mut s, x)?;
        vars.to_outputs(&s.graph, source)
    }
}
