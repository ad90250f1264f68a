//! Parameterized layers and the forward-pass session that threads them
//! through a [`Graph`].

use rand::Rng;
use reviewkd_tensor::{BatchStats, Graph, NormStats, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Gradients on, batch statistics for normalization.
    Train,
    /// No gradients, running statistics for normalization.
    Eval,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// One forward pass over modules whose parameters live in `store`.
///
/// The store is borrowed immutably: running-statistics updates are queued
/// and applied afterwards with [`apply_norm_updates`].
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    mode: Mode,
    norm_updates: Vec<NormUpdate>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        let graph = match mode {
            Mode::Train => Graph::new(),
            Mode::Eval => Graph::inference(),
        };
        Self {
            graph,
            store,
            mode,
            norm_updates: Vec::new(),
        }
    }

    pub fn train(store: &'s ParamStore) -> Self {
        Self::new(store, Mode::Train)
    }

    pub fn eval(store: &'s ParamStore) -> Self {
        Self::new(store, Mode::Eval)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn norm_updates(&self) -> &[NormUpdate] {
        &self.norm_updates
    }

    pub fn into_parts(self) -> (Graph, Vec<NormUpdate>) {
        (self.graph, self.norm_updates)
    }
}

/// Folds queued batch statistics into the running buffers
/// (`running = (1 - m) running + m batch`, unbiased variance).
pub fn apply_norm_updates(store: &mut ParamStore, updates: &[NormUpdate]) {
    for u in updates {
        let count = u.stats.count as f64;
        let correction = if u.stats.count > 1 { count / (count - 1.0) } else { 1.0 };
        let m = u.momentum;
        for (r, b) in store.value_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store.value_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

/// Square-kernel convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-out) initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_out = (out_channels * kernel * kernel) as f64;
        let w = Tensor::randn(
            &[out_channels, in_channels, kernel, kernel],
            (2.0 / fan_out).sqrt(),
            rng,
        );
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// A `channels -> channels` convolution that copies its input: a one at
    /// the kernel centre of each diagonal filter.
    pub fn identity(store: &mut ParamStore, name: &str, channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "identity kernel must be odd");
        let mut w = Tensor::zeros(&[channels, channels, kernel, kernel]);
        let centre = kernel / 2;
        for c in 0..channels {
            w.data_mut()[((c * channels + c) * kernel + centre) * kernel + centre] = 1.0;
        }
        let weight = store.add(format!("{name}.weight"), w);
        Self {
            weight,
            bias: None,
            in_channels: channels,
            out_channels: channels,
            kernel,
            stride: 1,
            pad: centre,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        Ok(s.graph.conv2d(x, w, b, self.stride, self.pad)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

/// Batch normalization over the channel axis.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self::with_gamma(store, name, channels, 1.0)
    }

    /// Starts with `gamma = value`; zero turns a residual branch off.
    pub fn with_gamma(store: &mut ParamStore, name: &str, channels: usize, value: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], value)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm(x, gamma, beta, NormStats::Batch, self.eps)?;
                if let Some(stats) = stats {
                    s.norm_updates.push(NormUpdate {
                        mean: self.running_mean,
                        var: self.running_var,
                        momentum: self.momentum,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = s.store;
                let stats = NormStats::Running {
                    mean: store.value(self.running_mean).data(),
                    var: store.value(self.running_var).data(),
                };
                Ok(s.graph.batch_norm(x, gamma, beta, stats, self.eps)?.0)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// Fully connected layer, `y = x Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in_features)` initialization.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::uniform(&[out_features, in_features], -bound, bound, rng),
            ),
            bias: store.add(
                format!("{name}.bias"),
                Tensor::uniform(&[out_features], -bound, bound, rng),
            ),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        Ok(s.graph.linear(x, w, Some(b))?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}
