//! ε-prediction training: base model on the shapes set, DreamBooth-style
//! fine-tuning on the subject, optional prior-preservation term.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, TrainMode};
use super::dataset::{class_caption, subject_caption, Sample};
use super::model::{ModelConfig, Params, ToyModel};
use super::vocab::Vocabulary;
use crate::attention::AttentionConfig;
use crate::autograd::Graph;
use crate::diffusion::{forward_process, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{gaussian, Rng, Tensor};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("no parameter {name}")))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub caption_dropout: f64,
    pub dataset_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 2e-3,
            caption_dropout: 0.1,
            dataset_size: 256,
            grad_clip: 1.0,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ppl_weight: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 4,
            lr: 1e-3,
            ppl_weight: 0.0,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Per-step batch losses plus running-loss summaries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub initial_running_loss: f64,
    pub final_running_loss: f64,
}

impl TrainReport {
    const WINDOW: usize = 50;

    fn from_losses(losses: Vec<f64>) -> Self {
        let w = Self::WINDOW.min(losses.len()).max(1);
        let mean = |s: &[f64]| {
            if s.is_empty() {
                0.0
            } else {
                s.iter().sum::<f64>() / s.len() as f64
            }
        };
        let initial_running_loss = mean(&losses[..w.min(losses.len())]);
        let final_running_loss = mean(&losses[losses.len().saturating_sub(w)..]);
        Self {
            losses,
            initial_running_loss,
            final_running_loss,
        }
    }
}

/// One weighted term of a training batch.
struct Item<'a> {
    latent: &'a Tensor,
    tokens: Vec<usize>,
    weight: f64,
}

/// Loss and gradients of `Σ weight · mse(ε̂, ε)` for one batch.
fn batch_gradients(
    model: &ToyModel,
    items: &[Item<'_>],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let pv = model.place(&mut g, true);
    let attn = AttentionConfig::baseline();
    let mut total = None;
    for item in items {
        let t = 1 + rng.below(sched.steps());
        let eps = gaussian(rng, item.latent.shape());
        let z_t = forward_process(item.latent, t, &eps, sched)?;
        let z = g.constant(z_t);
        let cond = model.encode_tokens_graph(&mut g, &pv, &item.tokens)?;
        let out = model.forward_graph(&mut g, &pv, z, t, cond, None, &attn, None)?;
        let l = g.mse(out, &eps)?;
        let l = g.scale(l, item.weight);
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty training batch".into()))?;
    let loss = g.value(total).data()[0];
    let mut grads = g.backward(total)?;
    let mut out = BTreeMap::new();
    for (name, &v) in pv.iter() {
        if let Some(gr) = grads.take(v) {
            out.insert(name.clone(), gr);
        }
    }
    Ok((loss, out))
}

fn clip(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() && loss < 1e6 {
        Ok(())
    } else {
        Err(Error::Training { step, loss })
    }
}

/// Trains fresh weights on `samples` for `cfg.steps` Adam steps.
pub fn train_base(
    samples: &[Sample],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Checkpoint, TrainReport)> {
    if samples.is_empty() && cfg.steps > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let sched = NoiseSchedule::default();
    let mut model = ToyModel::new(cfg.model.clone(), vocab.clone(), &mut rng.child(0))?;
    let tokens: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| model.tokenize(&s.caption))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let w = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let mut srng = rng.child(1 + step as u64);
        let items: Vec<Item<'_>> = (0..cfg.batch_size)
            .map(|_| {
                let i = srng.below(samples.len());
                let drop = srng.bernoulli(cfg.caption_dropout);
                Item {
                    latent: &samples[i].latent,
                    tokens: if drop { vec![vocab.null_id()] } else { tokens[i].clone() },
                    weight: w,
                }
            })
            .collect();
        let (loss, mut grads) = batch_gradients(&model, &items, &sched, &mut srng)?;
        check_loss(step, loss)?;
        clip(&mut grads, cfg.grad_clip);
        adam.update(&mut model.params, &grads)?;
        losses.push(loss);
    }
    let report = TrainReport::from_losses(losses);
    let meta = CheckpointMeta {
        mode: TrainMode::Base,
        steps: cfg.steps,
        ppl_weight: 0.0,
        seed: rng.seed(),
        initial_running_loss: report.initial_running_loss,
        final_running_loss: report.final_running_loss,
    };
    Ok((Checkpoint { model, meta }, report))
}

/// Fine-tunes every weight of `base` on `subject` captioned
/// `a photo of a <identifier> <class>`. With `ppl_weight > 0` each step adds
/// `ppl_weight · mse` on `class_prior` captioned `a photo of a <class>`.
pub fn finetune_dreambooth(
    base: &Checkpoint,
    subject: &[Sample],
    class_prior: &[Sample],
    identifier: &str,
    cfg: &FinetuneConfig,
    rng: &mut Rng,
) -> Result<(Checkpoint, TrainReport)> {
    let vocab = &base.model.vocab;
    vocab.check_identifier(identifier)?;
    if !(cfg.ppl_weight >= 0.0) || !cfg.ppl_weight.is_finite() {
        return Err(Error::Config(format!(
            "ppl weight {} must be a nonnegative real",
            cfg.ppl_weight
        )));
    }
    if subject.is_empty() {
        return Err(Error::Config("no subject images".into()));
    }
    if cfg.ppl_weight > 0.0 && class_prior.is_empty() {
        return Err(Error::Config("prior preservation needs class images".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let sched = NoiseSchedule::default();
    let mut model = base.model.clone();
    let subj_tokens = model.tokenize(&subject_caption(identifier))?;
    let prior_tokens = model.tokenize(&class_caption())?;
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let w = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let mut srng = rng.child(step as u64);
        let mut items: Vec<Item<'_>> = (0..cfg.batch_size)
            .map(|_| Item {
                latent: &subject[srng.below(subject.len())].latent,
                tokens: subj_tokens.clone(),
                weight: w,
            })
            .collect();
        if cfg.ppl_weight > 0.0 {
            for _ in 0..cfg.batch_size {
                items.push(Item {
                    latent: &class_prior[srng.below(class_prior.len())].latent,
                    tokens: prior_tokens.clone(),
                    weight: cfg.ppl_weight * w,
                });
            }
        }
        let (loss, mut grads) = batch_gradients(&model, &items, &sched, &mut srng)?;
        check_loss(step, loss)?;
        clip(&mut grads, cfg.grad_clip);
        adam.update(&mut model.params, &grads)?;
        losses.push(loss);
    }
    let report = TrainReport::from_losses(losses);
    let meta = CheckpointMeta {
        mode: if cfg.ppl_weight > 0.0 {
            TrainMode::DreamboothPpl
        } else {
            TrainMode::Dreambooth
        },
        steps: base.meta.steps + cfg.steps,
        ppl_weight: cfg.ppl_weight,
        seed: rng.seed(),
        initial_running_loss: report.initial_running_loss,
        final_running_loss: report.final_running_loss,
    };
    Ok((Checkpoint { model, meta }, report))
}
