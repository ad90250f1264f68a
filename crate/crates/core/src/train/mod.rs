//! Optimization loop, evaluation and checkpoints.

mod checkpoint;
mod sgd;

pub use checkpoint::Checkpoint;
pub use sgd::Sgd;

use std::path::PathBuf;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reviewkd_tensor::{ParamId, ParamStore, Tensor, TraceEntry};

use crate::data::{Dataset, LabeledBatch};
use crate::error::{Error, Result};
use crate::losses::Distiller;
use crate::nets::{apply_norm_updates, ArchSpec, Session, StageNet, StageVars};
use crate::types::{
    config_hash, validate_config, DistillConfig, EpochRecord, Mechanism, RunRecord, Source, TrainSchedule,
};

/// Learning rate in effect during `epoch` (0-based): the base rate, decayed
/// by the factor once at `decay_start_epoch` and again every `decay_every`
/// epochs after that.
pub fn lr_at_epoch(schedule: &TrainSchedule, epoch: usize) -> Result<f64> {
    if epoch >= schedule.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.epochs
        )));
    }
    let milestones = if epoch < schedule.decay_start_epoch {
        0
    } else {
        (epoch - schedule.decay_start_epoch) / schedule.decay_every + 1
    };
    Ok(schedule.base_lr * schedule.lr_decay_factor.powi(milestones as i32))
}

/// Pretrained, frozen supervision network.
#[derive(Clone, Copy)]
pub struct Teacher<'a> {
    pub net: &'a StageNet,
    pub store: &'a ParamStore,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub eval_batch_size: usize,
    /// Where to write the best checkpoint, if anywhere.
    pub checkpoint: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            eval_batch_size: 256,
            checkpoint: None,
            progress: false,
        }
    }
}

/// Result of a training run: the record, the final weights (student plus
/// auxiliary modules) and the best student checkpoint.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub net: StageNet,
    pub store: ParamStore,
    pub distiller: Distiller,
    pub best: Checkpoint,
}

/// Top-1 accuracy in percent over `data`, in inference mode.
pub fn evaluate(net: &StageNet, store: &ParamStore, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data(format!("{}: cannot evaluate on an empty dataset", data.name())));
    }
    let mut correct = 0usize;
    for batch in data.batches(batch_size, None) {
        let out = net.infer(store, &batch.images, Source::Student)?;
        correct += argmax_rows(out.logits())?
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, k) = logits.dims2()?;
    Ok((0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            // first maximum wins, so ties resolve deterministically
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect())
}

/// Operations executed by an inference-mode forward pass.
pub fn inference_trace(net: &StageNet, store: &ParamStore, images: &Tensor) -> Result<Vec<TraceEntry>> {
    let mut s = Session::eval(store);
    let x = s.input(images.clone());
    net.forward_with_stages(&mut s, x)?;
    Ok(s.graph.trace())
}

/// Teacher outputs for every training record, computed once when the
/// training images are not augmented.
struct TeacherCache {
    features: Vec<Tensor>,
    logits: Tensor,
}

impl TeacherCache {
    fn build(teacher: Teacher<'_>, data: &Dataset, batch_size: usize) -> Result<Self> {
        let mut features: Vec<Vec<f64>> = vec![Vec::new(); teacher.net.stages()];
        let mut shapes = vec![Vec::new(); teacher.net.stages()];
        let mut logits = Vec::new();
        for batch in data.batches(batch_size, None) {
            let out = teacher.net.infer(teacher.store, &batch.images, Source::Teacher)?;
            for (k, f) in out.features().iter().enumerate() {
                shapes[k] = f.data().shape().to_vec();
                features[k].extend_from_slice(f.data().data());
            }
            logits.extend_from_slice(out.logits().data());
        }
        let n = data.len();
        let features = features
            .into_iter()
            .zip(shapes)
            .map(|(v, mut shape)| {
                shape[0] = n;
                Tensor::new(&shape, v)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let logits = Tensor::new(&[n, data.classes()], logits)?;
        Ok(Self { features, logits })
    }

    fn constants(&self, s: &mut Session<'_>, indices: &[usize]) -> Result<StageVars> {
        let features = self
            .features
            .iter()
            .map(|f| Ok(s.input(f.gather_batch(indices)?)))
            .collect::<Result<Vec<_>>>()?;
        let logits = s.input(self.logits.gather_batch(indices)?);
        Ok(StageVars { features, logits })
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Plain cross-entropy training of `spec` from the seed's initialization.
pub fn train_plain(
    spec: &ArchSpec,
    schedule: &TrainSchedule,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    train_distill(spec, None, &DistillConfig::plain(seed), schedule, train, test, options)
}

/// Trains a fresh student under `config`, reading supervision from the
/// frozen `teacher`.
///
/// Student weights, auxiliary modules and data order use independent random
/// streams derived from `config.seed`, so a run with λ = 0 reproduces plain
/// training exactly.
pub fn train_distill(
    spec: &ArchSpec,
    teacher: Option<Teacher<'_>>,
    config: &DistillConfig,
    schedule: &TrainSchedule,
    train: &Dataset,
    test: &Dataset,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let config = validate_config(config.clone())?;
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Data(format!("{}: no training records", train.name())));
    }
    let teacher = match (config.mechanism, teacher) {
        (Mechanism::None, _) => None,
        (_, Some(t)) => Some(t),
        (m, None) => return Err(Error::Config(format!("mechanism {m} needs a teacher"))),
    };
    let (_, h, w) = train.image_shape();
    let mut store = ParamStore::new();
    let net = StageNet::new(spec.clone(), &mut store, &mut stream(config.seed, 0))?;
    let student_shapes = spec.stage_shapes(h, w);
    let teacher_shapes = match teacher {
        Some(t) => t.net.spec().stage_shapes(h, w),
        None => student_shapes.clone(),
    };
    let distiller = Distiller::new(&config, &student_shapes, &teacher_shapes, &mut store, &mut stream(config.seed, 1))?;
    let trainable: Vec<ParamId> = store.trainable_ids().collect();
    let hash = config_hash(&config, schedule);
    let cache = match teacher {
        Some(t) if train.augmentation().is_none() => Some(TeacherCache::build(t, train, options.eval_batch_size)?),
        _ => None,
    };

    let mut order_rng = stream(config.seed, 2);
    let mut sgd = Sgd::new(schedule.momentum, schedule.weight_decay);
    let mut per_epoch = Vec::with_capacity(schedule.epochs);
    let initial = if schedule.epochs == 0 {
        evaluate(&net, &store, test, options.eval_batch_size)?
    } else {
        f64::NEG_INFINITY
    };
    let mut best = Checkpoint::capture(&net, &store, &hash, None, initial);

    for epoch in 0..schedule.epochs {
        let lr = lr_at_epoch(schedule, epoch)?;
        let epoch_seed = order_rng.next_u64();
        let (mut ce_sum, mut distill_sum) = (0.0, 0.0);
        for batch in train.batches(schedule.batch_size, Some(epoch_seed)) {
            let (ce, distill) = step(
                &net,
                &mut store,
                &distiller,
                teacher,
                cache.as_ref(),
                &batch,
                &mut sgd,
                &trainable,
                lr,
                epoch,
            )?;
            ce_sum += ce * batch.len() as f64;
            distill_sum += distill * batch.len() as f64;
        }
        let n = train.len() as f64;
        let accuracy = evaluate(&net, &store, test, options.eval_batch_size)?;
        let record = EpochRecord {
            epoch,
            train_ce_loss: ce_sum / n,
            distill_loss: distill_sum / n,
            eval_accuracy: accuracy,
        };
        if options.progress {
            eprintln!(
                "epoch {:>3}  lr {:.0e}  ce {:.4}  distill {:.4}  acc {:.2}",
                epoch, lr, record.train_ce_loss, record.distill_loss, accuracy
            );
        }
        per_epoch.push(record);
        if accuracy > best.accuracy {
            best = Checkpoint::capture(&net, &store, &hash, Some(epoch), accuracy);
        }
    }

    if let Some(path) = &options.checkpoint {
        best.save(path)?;
    }
    let final_accuracy = per_epoch.last().map_or(initial, |r| r.eval_accuracy);
    let record = RunRecord {
        config,
        schedule: schedule.clone(),
        student_arch: spec.name.clone(),
        teacher_arch: teacher.map(|t| t.net.name().to_string()),
        teacher_fingerprint: teacher.map(|t| t.store.fingerprint()),
        final_accuracy,
        best_accuracy: best.accuracy,
        per_epoch,
        wall_time_s: started.elapsed().as_secs_f64(),
        config_hash: hash,
    };
    Ok(TrainOutcome {
        record,
        net,
        store,
        distiller,
        best,
    })
}

/// One optimizer step; returns the batch's cross-entropy and distillation
/// values.
#[allow(clippy::too_many_arguments)]
fn step(
    net: &StageNet,
    store: &mut ParamStore,
    distiller: &Distiller,
    teacher: Option<Teacher<'_>>,
    cache: Option<&TeacherCache>,
    batch: &LabeledBatch,
    sgd: &mut Sgd,
    trainable: &[ParamId],
    lr: f64,
    epoch: usize,
) -> Result<(f64, f64)> {
    let (grads, updates, ce, distill) = {
        let mut s = Session::train(store);
        let x = s.input(batch.images.clone());
        let student = net.forward_with_stages(&mut s, x)?;
        let teacher_vars = match (cache, teacher) {
            (Some(c), _) => Some(c.constants(&mut s, &batch.indices)?),
            (None, Some(t)) => {
                let out = t.net.infer(t.store, &batch.images, Source::Teacher)?;
                Some(StageVars::constants(&mut s.graph, &out))
            }
            (None, None) => None,
        };
        let objective = distiller.objective(&mut s, &student, teacher_vars.as_ref(), &batch.labels)?;
        let b = objective.breakdown(&s.graph);
        if !b.total.is_finite() {
            return Err(Error::Divergence {
                what: "training loss",
                value: b.total,
                epoch,
            });
        }
        let grads = s.graph.backward(objective.total)?;
        let (_, updates) = s.into_parts();
        (grads, updates, b.ce, b.distill)
    };
    sgd.step(store, &grads, trainable, lr);
    apply_norm_updates(store, &updates);
    Ok((ce, distill))
}
