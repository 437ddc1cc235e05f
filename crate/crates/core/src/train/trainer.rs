//! Sequential training driver: per-sample tapes, gradient accumulation over
//! a batch, one Adam step per batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LoadedSample, Split};
use crate::error::{Error, Result};
use crate::matrix::Scalar;
use crate::model::{AttentionRecord, MtpConfig, MtpModel, Params, Pass, Task};
use crate::ops::Mode;
use crate::tape::Tape;
use crate::train::adam::{adam_step, AdamConfig, AdamState};
use crate::train::loss::{loss, loss_node};
use crate::train::metrics::{lenient_metrics, LenientMetrics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Samples whose gradients are averaged into one optimizer step.
    pub batch_size: usize,
    /// Stop once this many consecutive epochs fail to improve the eval loss
    /// and one more does too. `None` runs every epoch.
    pub patience: Option<usize>,
    /// Seeds shuffling and dropout. Parameter initialization uses the model
    /// seed.
    pub seed: u64,
    pub eval_split: Split,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 100,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 8,
            patience: None,
            seed: 0,
            eval_split: Split::Test,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.adam().validate()
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_split: Split,
    pub eval_loss: f64,
    pub eval: LenientMetrics,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest eval loss.
    pub best: MtpModel<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Eval-mode predictions for a list of samples.
pub fn predict_all<T: Scalar>(model: &MtpModel<T>, samples: &[LoadedSample<T>]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| model.predict(&s.input()).map(|p| p.value))
        .collect()
}

/// Mean loss of eval-mode predictions.
pub fn mean_loss(preds: &[f64], samples: &[LoadedSample<impl Scalar>], task: Task) -> Result<f64> {
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += loss(*p, s.label, task)?;
    }
    Ok(total / preds.len() as f64)
}

fn labels<T>(samples: &[LoadedSample<T>]) -> Vec<f64> {
    samples.iter().map(|s| s.label).collect()
}

/// Forward and backward for one sample; gradients are added into `acc`.
fn accumulate(
    model: &MtpModel<f32>,
    sample: &LoadedSample<f32>,
    rng: &mut ChaCha8Rng,
    acc: &mut Params<f32>,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let mut pass = Pass::new(Mode::Train, rng);
    let mut record = AttentionRecord::new();
    let (_, out) = model.forward(&tape, &bound, &sample.input(), &mut pass, &mut record)?;
    let l = loss_node(out, sample.label, model.config.task)?;
    let value = l.value().get(0, 0) as f64;
    let grads = tape.backward(l)?;
    let mut vars = Vec::new();
    bound.visit("", &mut |_, v| vars.push(*v));
    let mut k = 0;
    acc.visit_mut("", &mut |_, g| {
        g.add_assign(&grads.wrt(vars[k]));
        k += 1;
    });
    Ok(value)
}

/// Trains a fresh model on the dataset's train split, evaluating on
/// `train.eval_split` after every epoch. `on_epoch` sees each log record as
/// soon as it is produced.
pub fn train(
    dataset: &Dataset,
    model_config: &MtpConfig,
    train: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    train.validate()?;
    if dataset.task() != model_config.task {
        return Err(Error::Config(format!(
            "task mismatch: model is {} but dataset is {}",
            model_config.task,
            dataset.task()
        )));
    }
    let train_set = dataset.load_split::<f32>(Split::Train)?;
    if train_set.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let eval_set = dataset.load_split::<f32>(train.eval_split)?;
    if eval_set.is_empty() {
        return Err(Error::Data(format!("{} split is empty", train.eval_split)));
    }
    let eval_labels = labels(&eval_set);

    let mut model = MtpModel::<f32>::new(model_config.clone(), dataset.dims())?;
    let adam = train.adam();
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = Vec::with_capacity(train.epochs);
    let mut best = (f64::INFINITY, model.clone(), 0);
    let mut stale = 0usize;
    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(train.batch_size) {
            let mut acc = model.params.zeros_like();
            for &i in batch {
                epoch_loss += accumulate(&model, &train_set[i], &mut rng, &mut acc)?;
            }
            let scale = 1.0 / batch.len() as f32;
            let grads: Vec<_> = acc
                .blocks_mut()
                .into_iter()
                .map(|g| {
                    g.scale_in_place(scale);
                    &*g
                })
                .collect();
            let mut params = model.params.blocks_mut();
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Data(format!("training diverged at epoch {epoch}")));
        }

        let preds = predict_all(&model, &eval_set)?;
        let eval_loss = mean_loss(&preds, &eval_set, model_config.task)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            eval_split: train.eval_split,
            eval_loss,
            eval: lenient_metrics(&preds, &eval_labels, model_config.task),
        };
        on_epoch(&record)?;
        history.push(record);

        if eval_loss < best.0 {
            best = (eval_loss, model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if train.patience.is_some_and(|p| stale > p) {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best: best.1,
        best_epoch: best.2,
        history,
    })
}
