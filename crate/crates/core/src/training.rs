//! Fine-tuning loop over the trainable head and plugin of a [`Model`].

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, PluginConfig, Trainable};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax_stable, Rng, Vector};
use crate::tensors::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub few_shot_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Evaluate on the held-out set every this many steps (0 = only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 1000,
            few_shot_steps: 1000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the customary learning rate for the plugin kind:
    /// 1e-3 for memory layers and head-only training, 1e-4 for adapters.
    pub fn for_plugin(plugin: &PluginConfig) -> Self {
        let learning_rate = match plugin {
            PluginConfig::Adapter(_) | PluginConfig::AdapterX2(_) => 1e-4,
            PluginConfig::None | PluginConfig::Spartan(_) => 1e-3,
        };
        TrainConfig {
            learning_rate,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Config("need 0 <= beta < 1 and epsilon > 0".into()));
        }
        Ok(())
    }
}

/// `−log softmax(logits)[label]` and its gradient `softmax(logits) − onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vector)> {
    if label >= logits.len() {
        return Err(Error::Parameter(format!("label {label} out of range for {} logits", logits.len())));
    }
    let mut grad = softmax_stable(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

/// First and second moment estimates for every trainable scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    shapes: Vec<(String, Vec<usize>)>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &Trainable) -> Self {
        let n = params.num_scalars();
        OptimizerState {
            shapes: params.shapes(""),
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected adaptive-moment update. Weight decay, when non-zero,
/// is decoupled from the gradient.
pub fn adam_step(state: &mut OptimizerState, params: &mut Trainable, grads: &Trainable, cfg: &TrainConfig) -> Result<()> {
    if params.shapes("") != state.shapes || grads.shapes("") != state.shapes {
        return Err(Error::shape(
            "adam_step",
            format!("{} tensors", state.shapes.len()),
            "parameters or gradients with another structure",
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let g = grads.flatten();
    let (m, v) = (&mut state.m, &mut state.v);
    let mut i = 0;
    params.visit_mut("", &mut |_, _, data| {
        for p in data.iter_mut() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            *p -= cfg.learning_rate * (update + cfg.weight_decay * *p);
            i += 1;
        }
    });
    Ok(())
}

/// A tokenized training instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub label: usize,
}

pub fn encode_examples(model: &Model, examples: &[Example]) -> Result<Vec<Encoded>> {
    let labels = model.config().num_labels;
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            if ex.label >= labels {
                return Err(Error::Parameter(format!(
                    "example {i} has label {} but the model has {labels} labels",
                    ex.label
                )));
            }
            Ok(Encoded {
                ids: model.tokenize(&ex.text),
                label: ex.label,
            })
        })
        .collect()
}

/// Mean cross-entropy over `batch` and its gradient with respect to the
/// trainable parameters. Items run in parallel; the reduction is sequential
/// in batch order, so the result does not depend on the thread count.
pub fn batch_gradient(model: &Model, batch: &[&Encoded]) -> Result<(f64, Trainable)> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let per_item: Vec<(f64, Trainable)> = batch
        .par_iter()
        .map(|item| {
            let cache = model.encode_traced(&item.ids)?;
            let logits = model.classify(&model.pool(&cache.output))?;
            let (loss, d_logits) = cross_entropy(&logits, item.label)?;
            let mut grads = model.trainable.zeros_like();
            model.backward(&cache, &d_logits, &mut grads)?;
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_item.into_iter();
    let (mut loss, mut total) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        total.add_scaled(1.0, &g);
    }
    total.visit_mut("", &mut |_, _, data| data.iter_mut().for_each(|x| *x *= scale));
    Ok((loss * scale, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["step", "loss", "eval_accuracy"]).map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            let acc = r.eval_accuracy.map(|a| a.to_string()).unwrap_or_default();
            w.write_record([r.step.to_string(), r.loss.to_string(), acc])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(format!("{other:?}")),
        },
    }
}

/// Trains `model.trainable` for `cfg.steps` steps on `train`. Batches walk
/// through a fresh shuffle of the data each epoch. When `eval` is given,
/// held-out accuracy is recorded every `cfg.eval_every` steps and after the
/// last step.
pub fn train(model: &mut Model, train: &[Example], eval: Option<&[Example]>, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let data = encode_examples(model, train)?;
    let eval_data = eval.map(|e| encode_examples(model, e)).transpose()?;
    let mut rng = Rng::seed_from_u64(cfg.seed).fork(2);
    let mut state = OptimizerState::new(&model.trainable);
    let mut history = TrainHistory::default();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_gradient(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Numerical {
                step,
                message: format!("loss is {loss}"),
            });
        }
        adam_step(&mut state, &mut model.trainable, &grads, cfg)?;
        let eval_accuracy = match &eval_data {
            Some(e) if step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0) => {
                Some(accuracy(model, e)?)
            }
            _ => None,
        };
        history.records.push(StepRecord {
            step,
            loss,
            eval_accuracy,
        });
    }
    Ok(history)
}

/// Fraction of examples whose highest logit (lowest label on ties) is the
/// gold label.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<f64> {
    accuracy(model, &encode_examples(model, examples)?)
}

pub fn accuracy(model: &Model, data: &[Encoded]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Parameter("cannot evaluate on an empty dataset".into()));
    }
    let correct: Vec<bool> = data
        .par_iter()
        .map(|e| Ok(argmax(&model.logits(&e.ids)?) == e.label))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / data.len() as f64)
}

/// Trailing moving average with the given window; entry `i` averages
/// `values[i + 1 − window ..= i]`, so the output is `window − 1` shorter.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, ModelConfig, Pooling};
    use crate::data::{generate_topic_dataset, SyntheticTopicTask};
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::memory::SpartanConfig;

    fn small_model(plugin: PluginConfig) -> Model {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                d: 16,
                layers: 2,
                heads: 2,
                ffn_dim: 32,
                vocab_hash_buckets: 256,
                max_seq_len: 16,
                pooling: Pooling::FirstToken,
            },
            plugin,
            num_labels: 4,
        };
        Model::new(cfg, 9).unwrap()
    }

    fn spartan16() -> PluginConfig {
        PluginConfig::Spartan(SpartanConfig {
            d: 16,
            num_parents: 6,
            children_per_parent: 2,
            top_k: 2,
        })
    }

    fn task_data(n: usize, seed: u64) -> Vec<Example> {
        generate_topic_dataset(&SyntheticTopicTask::new(4, n, 0.05), &mut Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, g) = cross_entropy(&[0.0; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((g.sum()).abs() < 1e-15);
        let (l, _) = cross_entropy(&[0.0, 800.0], 1).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = cross_entropy(&[0.0, 800.0], 0).unwrap();
        assert!((l - 800.0).abs() < 1e-9);
        assert!(cross_entropy(&[0.0; 3], 3).is_err());

        let z = [0.3, -1.2, 2.0, 0.7];
        let (_, g) = cross_entropy(&z, 1).unwrap();
        let fd = central_difference(&z, 1e-5, |zz| cross_entropy(zz, 1).unwrap().0);
        for (a, n) in g.iter().zip(&fd) {
            assert!((a - n).abs() <= 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn adam_single_step_closed_form() {
        let mut m = small_model(PluginConfig::None);
        let cfg = TrainConfig::default();
        let before = m.trainable.clone();
        let mut grads = m.trainable.zeros_like();
        grads.head.bias[0] = 0.25;
        grads.head.bias[1] = -4.0;
        let mut state = OptimizerState::new(&m.trainable);
        adam_step(&mut state, &mut m.trainable, &grads, &cfg).unwrap();
        // m̂ = g and v̂ = g² after one step.
        for (i, g) in [(0, 0.25f64), (1, -4.0)] {
            let want = before.head.bias[i] - cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((m.trainable.head.bias[i] - want).abs() < 1e-18);
        }
        assert_eq!(m.trainable.head.weight, before.head.weight);
    }

    #[test]
    fn adam_zero_grads_leave_params() {
        let mut m = small_model(spartan16());
        let before = m.trainable.clone();
        let grads = m.trainable.zeros_like();
        let mut state = OptimizerState::new(&m.trainable);
        for _ in 0..3 {
            adam_step(&mut state, &mut m.trainable, &grads, &TrainConfig::default()).unwrap();
        }
        assert_eq!(m.trainable, before);
        let other = small_model(PluginConfig::None).trainable;
        assert!(adam_step(&mut state, &mut m.trainable, &other, &TrainConfig::default()).is_err());
    }

    #[test]
    fn batch_gradient_matches_fd() {
        let mut m = small_model(spartan16());
        let mut rng = Rng::seed_from_u64(4);
        m.trainable.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|x| *x += 0.3 * rng.normal()));
        let data = encode_examples(&m, &task_data(1, 2)[..3]).unwrap();
        let batch: Vec<&Encoded> = data.iter().collect();
        let (_, g) = batch_gradient(&m, &batch).unwrap();
        let theta = m.trainable.flatten();
        let fd = central_difference(&theta, 1e-5, |th| {
            let mut q = m.clone();
            let mut off = 0;
            q.trainable.visit_mut("", &mut |_, _, d| {
                d.copy_from_slice(&th[off..off + d.len()]);
                off += d.len();
            });
            batch_gradient(&q, &batch).unwrap().0
        });
        assert!(max_relative_error(&g.flatten(), &fd) <= 1e-6);
    }

    #[test]
    fn zero_steps_and_zero_lr_change_nothing() {
        let data = task_data(8, 1);
        let mut m = small_model(spartan16());
        let before = m.clone();
        let h = train(&mut m, &data, None, &TrainConfig { steps: 0, ..TrainConfig::default() }).unwrap();
        assert!(h.records.is_empty());
        assert_eq!(m, before);
        let h = train(
            &mut m,
            &data,
            None,
            &TrainConfig {
                steps: 5,
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(h.records.len(), 5);
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_deterministic_and_freezes_backbone() {
        let data = task_data(8, 1);
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut a = small_model(spartan16());
        let frozen = a.backbone.checksum();
        let ha = train(&mut a, &data, Some(&data), &cfg).unwrap();
        let mut b = small_model(spartan16());
        let hb = train(&mut b, &data, Some(&data), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(a.backbone.checksum(), frozen);
        assert_ne!(a.trainable, small_model(spartan16()).trainable);
        assert!(ha.records.last().unwrap().eval_accuracy.is_some());
    }

    #[test]
    fn rejects_bad_labels_and_empty_data() {
        let mut m = small_model(PluginConfig::None);
        let bad = vec![Example {
            text: "x".into(),
            label: 4,
        }];
        assert!(train(&mut m, &bad, None, &TrainConfig::default()).is_err());
        assert!(train(&mut m, &[], None, &TrainConfig::default()).is_err());
        assert!(evaluate(&m, &[]).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let data = task_data(25, 3);
        // Zero head: every logit ties, label 0 predicted.
        let m = small_model(PluginConfig::None);
        assert_eq!(evaluate(&m, &data).unwrap(), 0.25);
    }

    #[test]
    fn metrics_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let h = TrainHistory {
            records: vec![
                StepRecord {
                    step: 1,
                    loss: 1.5,
                    eval_accuracy: None,
                },
                StepRecord {
                    step: 2,
                    loss: 1.25,
                    eval_accuracy: Some(0.5),
                },
            ],
        };
        h.write_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "step,loss,eval_accuracy\n1,1.5,\n2,1.25,0.5\n");
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }
}
