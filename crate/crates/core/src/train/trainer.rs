use std::fmt;

use rand::seq::SliceRandom;

use super::metrics::{ConfusionMatrix, Metrics};
use super::optim::{AdamW, AdamWConfig};
use super::schedule::Schedule;
use crate::data::batch::make_batch;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::head::segmentation_loss;
use crate::model::Model;
use crate::{seeded_rng, SeededRng};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub crop: (usize, usize),
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub min_lr_ratio: f64,
    /// Evaluate every this many iterations (0: only at the end).
    pub eval_interval: usize,
    /// Log the loss every this many iterations (0: only at the end).
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 1000,
            batch_size: 4,
            crop: (32, 32),
            seed: 0,
            lr: 1e-4,
            weight_decay: 0.01,
            warmup_iters: 100,
            min_lr_ratio: 0.0,
            eval_interval: 0,
            log_interval: 10,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.lr,
            total_iters: self.iters,
            warmup_iters: self.warmup_iters,
            min_lr_ratio: self.min_lr_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Config("train.crop must be positive".into()));
        }
        self.schedule().validate()?;
        AdamWConfig { weight_decay: self.weight_decay, ..Default::default() }.validate()
    }
}

/// One metric-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    /// Mean loss since the previous record; `None` before any step.
    pub loss: Option<f64>,
    pub metrics: Option<Metrics>,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={} lr={:.6e}", self.iter, self.lr)?;
        match self.loss {
            Some(l) => write!(f, " loss={l:.6}")?,
            None => write!(f, " loss=nan")?,
        }
        if let Some(m) = &self.metrics {
            write!(f, " {m}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<LogRecord>,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
    pub final_metrics: Metrics,
}

/// Number of trailing steps averaged by [`TrainReport::final_loss`].
pub const FINAL_LOSS_WINDOW: usize = 10;

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean loss of the last few steps; single batches are noisy.
    pub fn final_loss(&self) -> Option<f64> {
        let tail = &self.losses[self.losses.len().saturating_sub(FINAL_LOSS_WINDOW)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Runs `cfg.iters` AdamW steps on the trainable parameters of `model`.
/// Dropout is active everywhere, frozen backbone included. `eval` (usually
/// the training set) is scored at every `eval_interval` and at the end.
/// Each record is passed to `on_record` as soon as it exists.
pub fn train(
    model: &mut Model,
    data: &[Sample],
    eval: &[Sample],
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() && cfg.iters > 0 {
        return Err(Error::Contract("training needs at least one sample".into()));
    }
    let ignore = model.config.ignore_index;
    let num_classes = model.config.head.num_classes;
    for s in data.iter().chain(eval) {
        s.validate_labels(num_classes, ignore)?;
    }
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(
        AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() },
        &model.store,
    )?;
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut records = Vec::new();
    let mut losses = Vec::with_capacity(cfg.iters);
    let (mut window_sum, mut window_n) = (0.0, 0usize);

    for iter in 0..cfg.iters {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (images, labels) = make_batch(data, &batch, cfg.crop, ignore)?;
        let lr = schedule.lr(iter)?;

        let mut fw = Forward::new(&model.store, true, &mut rng);
        let x = fw.graph.constant(images);
        let logits = model.forward(&mut fw, x)?;
        let loss_var = segmentation_loss(&mut fw, logits, &labels, ignore)?;
        let loss = fw.graph.value(loss_var).item();
        if !loss.is_finite() {
            let culprit = fw
                .graph
                .first_invalid()
                .map_or("unknown".to_string(), |(node, op)| format!("node {node} ({op})"));
            return Err(Error::Numerical(format!(
                "loss became {loss} at iteration {iter}; first NaN tensor: {culprit}"
            )));
        }
        fw.graph.backward(loss_var)?;
        let grads = fw.binding().grads(&fw.graph);
        drop(fw);
        opt.step(&mut model.store, &grads, lr)?;

        losses.push(loss);
        window_sum += loss;
        window_n += 1;

        let done = iter + 1;
        let log_now = cfg.log_interval > 0 && done % cfg.log_interval == 0;
        let eval_now = cfg.eval_interval > 0 && done % cfg.eval_interval == 0 && done < cfg.iters;
        if (log_now || eval_now) && done < cfg.iters {
            let metrics = if eval_now { Some(evaluate(model, eval)?) } else { None };
            let rec = LogRecord { iter: done, lr, loss: Some(window_sum / window_n as f64), metrics };
            (window_sum, window_n) = (0.0, 0);
            on_record(&rec);
            records.push(rec);
        }
    }

    let final_metrics = evaluate(model, eval)?;
    let rec = LogRecord {
        iter: cfg.iters,
        lr: schedule.lr(cfg.iters)?,
        loss: (window_n > 0).then(|| window_sum / window_n as f64),
        metrics: Some(final_metrics.clone()),
    };
    on_record(&rec);
    records.push(rec);
    Ok(TrainReport { records, losses, final_metrics })
}

/// Whole-image inference (dropout off) over `data`, one confusion matrix
/// at label resolution.
pub fn evaluate(model: &Model, data: &[Sample]) -> Result<Metrics> {
    Ok(confusion(model, data)?.metrics())
}

pub fn confusion(model: &Model, data: &[Sample]) -> Result<ConfusionMatrix> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let mut cm = ConfusionMatrix::new(model.config.head.num_classes);
    // Inference draws no random numbers; the generator only satisfies the API.
    let mut rng: SeededRng = seeded_rng(0);
    for s in data {
        let pred = model.predict(&s.image, &mut rng)?;
        cm.accumulate(&pred, &s.mask, model.config.ignore_index)?;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::params::CountFilter;
    use crate::train::Checkpoint;

    fn setup(num_images: usize) -> (Model, Vec<Sample>, TrainConfig) {
        let cfg = RunConfig::toy();
        let model = cfg.build_model().unwrap();
        let spec = SynthSpec { num_images, height: 16, width: 16, ..cfg.synth_spec() };
        let data = generate_synthetic(&spec, &mut seeded_rng(1)).unwrap();
        let tc = TrainConfig { crop: (16, 16), batch_size: 2, log_interval: 5, ..cfg.train_config().unwrap() };
        (model, data, tc)
    }

    #[test]
    fn zero_iterations_leave_parameters_and_evaluate_once() {
        let (mut model, data, tc) = setup(4);
        let before = Checkpoint::trainable(&model.store, "").to_bytes();
        let mut seen = Vec::new();
        let report = train(&mut model, &data, &data, &TrainConfig { iters: 0, ..tc }, |r| seen.push(r.clone())).unwrap();
        assert_eq!(Checkpoint::trainable(&model.store, "").to_bytes(), before);
        assert_eq!(seen.len(), 1);
        assert!(seen[0].metrics.is_some() && seen[0].loss.is_none());
        assert!(report.losses.is_empty() && report.final_loss().is_none());
    }

    #[test]
    fn short_run_moves_only_trainable_tensors() {
        let (mut model, data, tc) = setup(4);
        let init = model.store.clone();
        let fp = model.fingerprint();
        let report = train(&mut model, &data, &data, &TrainConfig { iters: 12, ..tc }, |_| {}).unwrap();
        assert_eq!(model.fingerprint(), fp);
        assert_eq!(report.losses.len(), 12);
        let mut moved = 0;
        for (name, p) in model.store.iter() {
            let same = init.tensor(name).unwrap() == p.tensor();
            if !p.trainable {
                assert!(same, "{name}");
            } else if !same {
                moved += 1;
            }
        }
        assert!(moved > 0);
        // log_interval 5 over 12 iterations: records at 5, 10 and the final one.
        let iters: Vec<usize> = report.records.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![5, 10, 12]);
        assert!(model.count_params(CountFilter::Trainable) < model.count_params(CountFilter::All));
    }

    #[test]
    fn runs_are_reproducible() {
        let run = || {
            let (mut model, data, tc) = setup(3);
            let mut log = String::new();
            train(&mut model, &data, &data, &TrainConfig { iters: 8, eval_interval: 4, ..tc }, |r| {
                log.push_str(&format!("{r}\n"))
            })
            .unwrap();
            (log, Checkpoint::trainable(&model.store, "cfg").to_bytes())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn nan_input_aborts_with_diagnostic() {
        let (mut model, mut data, tc) = setup(2);
        for s in &mut data {
            s.image.data_mut()[0] = f64::NAN;
        }
        let err = train(&mut model, &data, &data, &TrainConfig { iters: 3, ..tc }, |_| {}).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Numerical(_)), "{msg}");
        assert!(msg.contains("first NaN tensor: node"), "{msg}");
    }

    #[test]
    fn bad_labels_and_empty_sets_are_rejected() {
        let (mut model, mut data, tc) = setup(2);
        assert!(matches!(evaluate(&model, &[]), Err(Error::Contract(_))));
        data[1].mask[5] = 9;
        let err = train(&mut model, &data, &data, &TrainConfig { iters: 1, ..tc }, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn log_line_format() {
        let rec = LogRecord { iter: 3, lr: 2.5e-4, loss: Some(0.5), metrics: None };
        assert_eq!(rec.to_string(), "iter=3 lr=2.500000e-4 loss=0.500000");
    }
}
