//! Joint caption/dependency training and checkpointing.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{decoder, encode, Ablation, Model};
use crate::params::{Bound, DEPENDENCY_PREFIX};
use crate::scene::{CaptionSample, FeatureGrid, Renderer, Sample, Vocabulary};
use crate::tensor::{Adam, AdamConfig, Graph, Var};

pub struct Losses {
    /// `L_cap + λ·L_dep`.
    pub total: Var,
    pub cap: Var,
    /// Absent when `λ = 0`: the dependency path is not built at all.
    pub dep: Option<Var>,
}

/// Masked mean negative log-likelihoods of both heads and their weighted
/// sum. With `λ = 0` the total is the caption loss node itself.
pub fn joint_loss(
    g: &mut Graph,
    word_logits: Var,
    dep_logits: Option<Var>,
    word_targets: &[Option<usize>],
    dep_targets: &[Option<usize>],
    lambda: f64,
) -> Result<Losses> {
    if lambda < 0.0 {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    if word_targets.len() != dep_targets.len() {
        return Err(Error::shape(format!(
            "{} word targets vs {} dependency targets",
            word_targets.len(),
            dep_targets.len()
        )));
    }
    let cap = g.cross_entropy_mean(word_logits, word_targets)?;
    if lambda == 0.0 {
        return Ok(Losses {
            total: cap,
            cap,
            dep: None,
        });
    }
    let dep_logits = dep_logits.ok_or_else(|| Error::invalid("dependency logits required for lambda > 0"))?;
    let dep = g.cross_entropy_mean(dep_logits, dep_targets)?;
    let weighted = g.scale(dep, lambda);
    let total = g.add(cap, weighted)?;
    Ok(Losses {
        total,
        cap,
        dep: Some(dep),
    })
}

/// Teacher forcing split: inputs `tokens[..m−1]`, targets `tokens[1..]`
/// and `dep_tags[1..]`.
pub fn teacher_forcing(caption: &CaptionSample) -> Result<(&[usize], Vec<Option<usize>>, Vec<Option<usize>>)> {
    let m = caption.tokens.len();
    if m < 2 || caption.dep_tags.len() != m {
        return Err(Error::invalid("caption needs at least two aligned tokens"));
    }
    Ok((
        &caption.tokens[..m - 1],
        caption.tokens[1..].iter().map(|&t| Some(t)).collect(),
        caption.dep_tags[1..].iter().map(|&t| Some(t)).collect(),
    ))
}

/// Full forward pass of one sample up to the joint loss.
pub fn sample_loss(
    g: &mut Graph,
    p: &Bound,
    model: &Model,
    ablation: Ablation,
    lambda: f64,
    before: Var,
    after: Var,
    caption: &CaptionSample,
) -> Result<Losses> {
    let (inputs, word_t, dep_t) = teacher_forcing(caption)?;
    let enc = encode(g, p, &model.spec, ablation, before, after)?;
    let out = decoder::decoder_forward(g, p, &model.spec, inputs, enc.visual, lambda > 0.0)?;
    joint_loss(g, out.word_logits, out.dep_logits, &word_t, &dep_t, lambda)
}

/// A rendered training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub before: FeatureGrid,
    pub after: FeatureGrid,
    pub caption: CaptionSample,
}

pub fn render_examples(samples: &[Sample], renderer: &Renderer) -> Vec<Example> {
    samples
        .iter()
        .map(|s| {
            let (before, after) = renderer.render_pair(&s.pair);
            Example {
                before,
                after,
                caption: s.caption.clone(),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub cap: f64,
    pub dep: f64,
}

/// Accumulates the mean batch gradient into `model.params` and returns the
/// mean losses. The caller applies the update.
pub fn accumulate_batch(model: &mut Model, batch: &[&Example], ablation: Ablation, lambda: f64) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut mean = StepLosses::default();
    for ex in batch {
        let mut g = Graph::new();
        let p = if lambda > 0.0 {
            model.params.bind(&mut g)
        } else {
            model
                .params
                .bind_filtered(&mut g, |n| !n.starts_with(DEPENDENCY_PREFIX))
        };
        let b = model.grid_var(&mut g, &ex.before)?;
        let a = model.grid_var(&mut g, &ex.after)?;
        let l = sample_loss(&mut g, &p, model, ablation, lambda, b, a, &ex.caption)?;
        let total = g.scalar(l.total);
        if !total.is_finite() {
            let at = g.first_non_finite().unwrap_or_else(|| "loss".to_string());
            return Err(Error::NonFinite(format!("non-finite loss; first at {at}")));
        }
        g.backward(l.total)?;
        model.params.accumulate_grads(&g, &p, scale)?;
        mean.total += scale * total;
        mean.cap += scale * g.scalar(l.cap);
        mean.dep += scale * l.dep.map(|d| g.scalar(d)).unwrap_or(0.0);
    }
    Ok(mean)
}

/// One optimisation step: forward/backward over the batch, optional
/// clipping, Adam update, gradients cleared.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &[&Example], config: &RunConfig) -> Result<StepLosses> {
    model.params.zero_grad();
    let losses = accumulate_batch(model, batch, config.train.ablation(), config.train.effective_lambda())?;
    if config.train.clip_grad {
        let norm = model.params.grad_norm();
        if norm > config.train.grad_clip {
            model.params.scale_grads(config.train.grad_clip / norm);
        }
    }
    adam.step(model.params.tensors_mut())?;
    model.params.zero_grad();
    Ok(losses)
}

pub fn adam_for(config: &RunConfig) -> Adam {
    Adam::new(AdamConfig {
        lr: config.train.lr,
        ..Default::default()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub cap_loss: f64,
    pub dep_loss: f64,
}

/// Seeded-shuffle minibatch training from a fresh model. `on_epoch` sees
/// every epoch's mean losses and the model after it.
pub fn train_loop(
    examples: &[Example],
    config: &RunConfig,
    vocab: &Vocabulary,
    mut on_epoch: impl FnMut(&EpochStats, &Model) -> Result<()>,
) -> Result<Model> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    config.validate()?;
    let mut model = Model::new(config.model_spec(vocab)?)?;
    let mut adam = adam_for(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=config.train.epochs {
        order.shuffle(&mut rng);
        let mut sums = StepLosses::default();
        for chunk in order.chunks(config.train.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let l = train_step(&mut model, &mut adam, &batch, config)?;
            let w = batch.len() as f64;
            sums.total += w * l.total;
            sums.cap += w * l.cap;
            sums.dep += w * l.dep;
        }
        let n = examples.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: sums.total / n,
            cap_loss: sums.cap / n,
            dep_loss: sums.dep / n,
        };
        on_epoch(&stats, &model)?;
    }
    Ok(model)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: RunConfig,
    vocabulary: Vocabulary,
    params: Vec<NamedTensor>,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub model: Model,
}

pub fn save_checkpoint(path: &Path, config: &RunConfig, vocab: &Vocabulary, model: &Model) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        vocabulary: vocab.clone(),
        params: model
            .params
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            })
            .collect(),
    };
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

/// Rebuilds the model from the echoed config and overwrites every
/// parameter with the stored values; names and shapes must match exactly.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file: CheckpointFile = serde_json::from_slice(&fs::read(path)?)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    file.config.validate()?;
    let mut model = Model::new(file.config.model_spec(&file.vocabulary)?)?;
    if file.params.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}",
            file.params.len(),
            model.params.len()
        )));
    }
    for nt in file.params {
        let t = model
            .params
            .get(&nt.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", nt.name)))?;
        if t.shape() != nt.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                nt.name,
                nt.shape,
                t.shape()
            )));
        }
        model.params.set(&nt.name, &nt.values)?;
    }
    Ok(Checkpoint {
        config: file.config,
        vocab: file.vocabulary,
        model,
    })
}
