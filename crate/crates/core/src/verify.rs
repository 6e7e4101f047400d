//! Finite-difference verification of every model component at toy sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{contrast, decoder, nfa, Model, ModelConfig, ModelSpec};
use crate::params::{check_param_gradients, Bound};
use crate::scene::{CaptionSample, ChangeKind, Vocabulary, BOS, EOS};
use crate::tensor::{GradCheckReport, Graph, Var};
use crate::train::sample_loss;

pub const TOY_CHANNELS: usize = 8;
pub const TOY_GRID: usize = 3;
pub const TOY_TOKENS: usize = 4;

/// `C = 8`, `D = 8`, `3×3` grid, 2 heads.
pub fn toy_spec(vocab: &Vocabulary) -> Result<ModelSpec> {
    let config = ModelConfig {
        d_model: 8,
        word_dim: 6,
        heads: 2,
        ffn_dim: 12,
        max_len: 16,
        ..Default::default()
    };
    ModelSpec::new(
        config,
        TOY_CHANNELS,
        TOY_GRID,
        TOY_GRID,
        vocab.size(),
        vocab.tagset_size(),
    )
}

pub struct ModuleCheck {
    pub module: &'static str,
    pub report: GradCheckReport,
}

fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_const(g: &mut Graph, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Var> {
    g.constant(vec![rows, cols], random_values(rng, rows * cols))
}

/// `Σ R ⊙ x` for a fixed random `R`, so every output entry matters.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let n = shape.iter().product();
    let r = g.constant(shape, random_values(&mut rng, n))?;
    let y = g.mul(x, r)?;
    Ok(g.sum(y))
}

/// A toy model with every parameter (biases and norm gains included)
/// moved off its initial value.
pub fn toy_model(vocab: &Vocabulary, seed: u64) -> Result<Model> {
    let mut model = Model::new(toy_spec(vocab)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.tensors_mut() {
        for v in t.values_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    Ok(model)
}

/// Checks NFA, CFD, localizer, decoder and the full joint loss.
pub fn grad_check_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<ModuleCheck>> {
    let vocab = Vocabulary::grammar();
    let model = toy_model(&vocab, seed)?;
    let spec = model.spec.clone();
    let store = &model.params;
    let (n, d, c) = (spec.cells(), spec.d(), spec.channels);
    let inputs = |g: &mut Graph, salt: u64, cols: usize, count: usize| -> Result<Vec<Var>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
        (0..count).map(|_| random_const(g, &mut rng, n, cols)).collect()
    };
    let mut out = Vec::new();

    let report = check_param_gradients(
        store,
        |p| p.starts_with("nfa."),
        h,
        tol,
        |g, p: &Bound| {
            let x = inputs(g, 1, c, 1)?[0];
            let (_, y) = nfa::nfa_forward(g, p, &spec, x)?;
            probe(g, y, seed + 11)
        },
    )?;
    out.push(ModuleCheck { module: "nfa", report });

    let report = check_param_gradients(
        store,
        |p| p.starts_with("cfd."),
        h,
        tol,
        |g, p: &Bound| {
            let x = inputs(g, 2, d, 2)?;
            let dist = contrast::cfd_forward(g, p, &spec, x[0], x[1], true)?;
            let a = probe(g, dist.fused, seed + 12)?;
            let b = probe(g, dist.change_bef, seed + 13)?;
            g.add(a, b)
        },
    )?;
    out.push(ModuleCheck { module: "cfd", report });

    let report = check_param_gradients(
        store,
        |p| p.starts_with("loc."),
        h,
        tol,
        |g, p: &Bound| {
            let x = inputs(g, 3, d, 3)?;
            let s = contrast::localize(g, p, &spec, x[0], x[1], x[2])?;
            let v = decoder::build_visual_sequence(g, &s)?;
            let a = probe(g, v, seed + 14)?;
            let b = probe(g, s.gamma_aft, seed + 15)?;
            g.add(a, b)
        },
    )?;
    out.push(ModuleCheck {
        module: "localizer",
        report,
    });

    let tokens: Vec<usize> = (0..TOY_TOKENS).map(|i| (i * 7 + 1) % spec.vocab_size).collect();
    let report = check_param_gradients(
        store,
        |p| p.starts_with("dec.") || p.starts_with("head."),
        h,
        tol,
        |g, p: &Bound| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
            let v = random_const(g, &mut rng, 3, d)?;
            let o = decoder::decoder_forward(g, p, &spec, &tokens, v, true)?;
            let a = probe(g, o.word_logits, seed + 16)?;
            let b = probe(g, o.dep_logits.expect("requested"), seed + 17)?;
            g.add(a, b)
        },
    )?;
    out.push(ModuleCheck {
        module: "decoder",
        report,
    });

    let caption = joint_loss_caption(&vocab)?;
    let report = check_param_gradients(
        store,
        |_| true,
        h,
        tol,
        |g, p: &Bound| {
            let x = inputs(g, 5, c, 2)?;
            let l = sample_loss(g, p, &model, Default::default(), 0.5, x[0], x[1], &caption)?;
            Ok(l.total)
        },
    )?;
    out.push(ModuleCheck {
        module: "joint_loss",
        report,
    });
    Ok(out)
}

fn joint_loss_caption(vocab: &Vocabulary) -> Result<CaptionSample> {
    let words = ["the", "small", "red", "cube", "moved"];
    let mut tokens = vec![BOS];
    tokens.extend(vocab.encode(&words)?);
    tokens.push(EOS);
    let tags = ["<pad>", "det", "amod", "amod", "nsubj", "root", "punct"];
    let dep_tags = tags.iter().map(|t| vocab.tag_id(t).expect("grammar tag")).collect();
    Ok(CaptionSample {
        tokens,
        dep_tags,
        change: ChangeKind::Move,
        footprint: vec![],
    })
}
