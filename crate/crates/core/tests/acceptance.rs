//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `NCT_ACCEPTANCE=1,2,7` restricts the run to the
//! listed criteria.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nct_core::config::RunConfig;
use nct_core::eval::{evaluate, lambda_sweep, sweep_table, EvalReport, DEFAULT_LAMBDAS};
use nct_core::metrics::bleu4;
use nct_core::model::contrast::{change_features, distill_common, similarity_matrix};
use nct_core::model::decoder::decoder_forward;
use nct_core::model::nfa::{aggregate, nfa_forward, project_grid};
use nct_core::model::{encode, Ablation, Model, ModelConfig, ModelSpec, Padding};
use nct_core::scene::{generate_dataset, FeatureGrid, Renderer, Sample, Vocabulary};
use nct_core::tensor::Graph;
use nct_core::train::{
    adam_for, joint_loss, load_checkpoint, render_examples, save_checkpoint, teacher_forcing, train_loop, train_step,
    Example,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OVERFIT_SAMPLES: u64 = 64;
const OVERFIT_EPOCHS: usize = 200;
const OVERFIT_LR: f64 = 1e-3;

const TRAIN_SAMPLES: u64 = 2000;
const HELD_OUT: u64 = 500;
const GENERAL_EPOCHS: usize = 50;
const GENERAL_LR: f64 = 1e-3;

/// Shared by the ablation and λ-sweep experiments.
const STUDY_SAMPLES: u64 = 1000;
const STUDY_EPOCHS: usize = 30;
const STUDY_LR: f64 = 1e-3;
const STUDY_SEEDS: [u64; 3] = [1, 2, 3];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn desk_config(lr: f64, epochs: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.train.lr = lr;
    c.train.epochs = epochs;
    c
}

fn data(c: &RunConfig, ids: std::ops::Range<u64>) -> Vec<Sample> {
    generate_dataset(&c.scene, &Vocabulary::grammar(), ids).expect("scene generation")
}

fn train_eval(c: &RunConfig, train: &[Sample], held_out: &[Sample]) -> (Model, EvalReport, Duration) {
    let vocab = Vocabulary::grammar();
    let start = Instant::now();
    let examples = render_examples(train, &Renderer::new(&c.scene));
    let model = train_loop(&examples, c, &vocab, |_, _| Ok(())).expect("training");
    let (report, _) = evaluate(&model, c, &vocab, held_out).expect("evaluation");
    (model, report, start.elapsed())
}

fn largest_jitter_bleu(r: &EvalReport) -> (u32, f64) {
    let b = r
        .by_jitter
        .iter()
        .filter(|b| b.metrics.count > 0)
        .next_back()
        .expect("non-empty bucket");
    (b.hi, b.metrics.bleu4)
}

// 1 ------------------------------------------------------------------------

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let suite = nct_core::verify::grad_check_suite(1, 1e-5, 1e-4).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let parts: Vec<String> = suite
        .iter()
        .map(|m| format!("{}={:.1e}", m.module, m.report.max_rel_err()))
        .collect();
    let ok = suite.iter().all(|m| m.report.passed()) && elapsed < Duration::from_secs(60);
    check(
        ok,
        format!("max rel err {} (tol 1e-4) in {elapsed:.1?}", parts.join(" ")),
    )
}

// 2 ------------------------------------------------------------------------

fn rows_sum_to_one(values: &[f64], width: usize) -> f64 {
    values
        .chunks(width)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn zero_param(model: &mut Model, name: &str) {
    let n = model.params.get(name).expect("parameter").numel();
    model.params.set(name, &vec![0.0; n]).expect("set");
}

fn invariants() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut fail = |what: &str, ok: bool| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    let config = RunConfig::default();
    let vocab = Vocabulary::grammar();
    let spec = config.model_spec(&vocab).expect("spec");
    let model = Model::new(spec.clone()).expect("model");
    let sample = &data(&config, 0..1)[0];
    let (before, after) = Renderer::new(&config.scene).render_pair(&sample.pair);

    // attention and similarity rows
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let b = model.grid_var(&mut g, &before).unwrap();
    let a = model.grid_var(&mut g, &after).unwrap();
    let xb = project_grid(&mut g, &p, &spec, b).unwrap();
    let nfa_att = aggregate(&mut g, &p, &spec, 0, xb).unwrap().attention;
    let enc = encode(&mut g, &p, &spec, Ablation::default(), b, a).unwrap();
    let (inputs, _, _) = teacher_forcing(&sample.caption).unwrap();
    let out = decoder_forward(&mut g, &p, &spec, inputs, enc.visual, true).unwrap();
    let dist = enc.distilled.as_ref().unwrap();
    let mut worst = rows_sum_to_one(g.value(nfa_att), spec.config.neighborhood.pow(2));
    for s in [dist.sim_bef, dist.sim_aft].into_iter().flatten() {
        worst = worst.max(rows_sum_to_one(g.value(s), spec.cells()));
        fail("B entries non-negative", g.value(s).iter().all(|&v| v >= 0.0));
    }
    for att in out.self_attention.iter().chain(&out.cross_attention) {
        for w in &att.weights {
            let width = *g.shape(*w).last().unwrap();
            worst = worst.max(rows_sum_to_one(g.value(*w), width));
        }
    }
    fail("row sums within 1e-6", worst <= 1e-6);

    // NFA residual identity with a zero output map
    let mut zeroed = model.clone();
    zero_param(&mut zeroed, "nfa.0.t.w");
    zero_param(&mut zeroed, "nfa.0.t.b");
    let mut g = Graph::new();
    let p = zeroed.params.bind(&mut g);
    let x = zeroed.grid_var(&mut g, &before).unwrap();
    let (projected, aggregated) = nfa_forward(&mut g, &p, &spec, x).unwrap();
    fail("NFA residual identity", g.value(projected) == g.value(aggregated));

    // cyclic shift equivariance on a 5x5 grid without position tables
    let eq_spec = ModelSpec::new(
        ModelConfig {
            d_model: 8,
            heads: 2,
            padding: Padding::Cyclic,
            ..Default::default()
        },
        6,
        5,
        5,
        vocab.size(),
        vocab.tagset_size(),
    )
    .unwrap();
    let mut eq_model = Model::new(eq_spec.clone()).unwrap();
    zero_param(&mut eq_model, "nfa.pos_row");
    zero_param(&mut eq_model, "nfa.pos_col");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = FeatureGrid::new(6, 5, 5, random_values(&mut rng, 150)).unwrap();
    let run = |grid: &FeatureGrid| {
        let mut g = Graph::new();
        let p = eq_model.params.bind(&mut g);
        let x = eq_model.grid_var(&mut g, grid).unwrap();
        let (_, y) = nfa_forward(&mut g, &p, &eq_spec, x).unwrap();
        FeatureGrid::new(8, 5, 5, g.value(y).to_vec()).unwrap()
    };
    let base = run(&grid);
    let mut shift_err: f64 = 0.0;
    for dr in 0..5 {
        for dc in 0..5 {
            let lhs = run(&grid.roll(dr, dc));
            for (u, v) in lhs.data().iter().zip(base.roll(dr, dc).data()) {
                shift_err = shift_err.max((u - v).abs());
            }
        }
    }
    fail("cyclic shift equivariance", shift_err <= 1e-10);

    // identical constant grids leave no change features
    let mut g = Graph::new();
    let row = [0.75, -1.5, 0.125, 2.0];
    let cb = g.constant(vec![16, 4], row.repeat(16)).unwrap();
    let ca = g.constant(vec![16, 4], row.repeat(16)).unwrap();
    let mut exact = true;
    for (own, other) in [(cb, ca), (ca, cb)] {
        let s = similarity_matrix(&mut g, own, other, 1.0).unwrap();
        let u = distill_common(&mut g, s, other).unwrap();
        let c = change_features(&mut g, own, u).unwrap();
        exact &= g.value(c).iter().all(|&v| v == 0.0);
    }
    fail("constant identical input gives zero change", exact);

    // causality of the decoder
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let visual = random_values(&mut rng, 3 * spec.d());
    let logits = |tokens: &[usize]| {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let v = g.constant(vec![3, spec.d()], visual.clone()).unwrap();
        let o = decoder_forward(&mut g, &p, &spec, tokens, v, true).unwrap();
        (g.value(o.word_logits).to_vec(), g.value(o.dep_logits.unwrap()).to_vec())
    };
    let seq: Vec<usize> = sample.caption.tokens[..sample.caption.tokens.len() - 1].to_vec();
    let (w0, d0) = logits(&seq);
    let (u, n) = (spec.vocab_size, spec.tagset_size);
    let mut causal = true;
    for t in 0..seq.len() - 1 {
        let mut alt = seq.clone();
        for tok in alt.iter_mut().skip(t + 1) {
            *tok = (*tok + 3) % u;
        }
        let (w1, d1) = logits(&alt);
        causal &= w0[..(t + 1) * u] == w1[..(t + 1) * u] && d0[..(t + 1) * n] == d1[..(t + 1) * n];
    }
    fail("decoder causality", causal);

    // joint loss composition
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let v = g.constant(vec![3, spec.d()], visual.clone()).unwrap();
    let (inputs, wt, dt) = teacher_forcing(&sample.caption).unwrap();
    let o = decoder_forward(&mut g, &p, &spec, inputs, v, true).unwrap();
    let mut composed = true;
    for lambda in DEFAULT_LAMBDAS {
        let l = joint_loss(&mut g, o.word_logits, o.dep_logits, &wt, &dt, lambda).unwrap();
        let cap = g.scalar(l.cap);
        let expected = match l.dep {
            Some(d) => cap + lambda * g.scalar(d),
            None => cap,
        };
        composed &= g.scalar(l.total).to_bits() == expected.to_bits();
    }
    fail("joint loss composition", composed);

    // checkpoint roundtrip
    let mut trained = model.clone();
    let examples: Vec<Example> = render_examples(&data(&config, 0..4), &Renderer::new(&config.scene));
    let batch: Vec<&Example> = examples.iter().collect();
    let mut adam = adam_for(&config);
    train_step(&mut trained, &mut adam, &batch, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    save_checkpoint(&path, &config, &vocab, &trained).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let held = data(&config, 100..110);
    let (r0, _) = evaluate(&trained, &config, &vocab, &held).unwrap();
    let (r1, _) = evaluate(&loaded.model, &loaded.config, &loaded.vocab, &held).unwrap();
    fail(
        "checkpoint roundtrip",
        loaded.model.params == trained.params && loaded.config == config && r0 == r1,
    );

    let elapsed = start.elapsed();
    fail("runtime under 2 min", elapsed < Duration::from_secs(120));
    let detail = format!("row-sum err {worst:.1e}, shift err {shift_err:.1e}, {elapsed:.1?}");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failed: {}", failures.join(", ")))
    }
}

// 3 ------------------------------------------------------------------------

fn overfit() -> Outcome {
    let config = desk_config(OVERFIT_LR, OVERFIT_EPOCHS);
    let vocab = Vocabulary::grammar();
    let samples = data(&config, 0..OVERFIT_SAMPLES);
    let examples = render_examples(&samples, &Renderer::new(&config.scene));
    let start = Instant::now();
    let mut first_pass = None;
    let mut last = None;
    train_loop(&examples, &config, &vocab, |s, model| {
        if s.epoch % 20 == 0 {
            let (r, _) = evaluate(model, &config, &vocab, &samples)?;
            let m = &r.overall;
            if first_pass.is_none() && m.token_accuracy >= 0.95 && m.bleu4 >= 0.90 {
                first_pass = Some(s.epoch);
            }
            last = Some((s.epoch, m.token_accuracy, m.bleu4));
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (epoch, tok, bleu) = last.expect("evaluated");
    let detail = format!(
        "{OVERFIT_SAMPLES} samples, epoch {epoch}: token acc {tok:.4}, BLEU-4 {bleu:.4}; thresholds first met at epoch {}; {elapsed:.0?}",
        first_pass.map_or("never".to_string(), |e| e.to_string())
    );
    check(
        tok >= 0.95 && bleu >= 0.90 && elapsed < Duration::from_secs(600),
        detail,
    )
}

// 4 ------------------------------------------------------------------------

fn generalization() -> Outcome {
    let config = desk_config(GENERAL_LR, GENERAL_EPOCHS);
    let train = data(&config, 0..TRAIN_SAMPLES);
    let held = data(&config, TRAIN_SAMPLES..TRAIN_SAMPLES + HELD_OUT);
    let (_, r, elapsed) = train_eval(&config, &train, &held);
    let m = &r.overall;
    eprint!("{r}");
    let detail = format!(
        "{TRAIN_SAMPLES} train / {HELD_OUT} held out, {GENERAL_EPOCHS} epochs: BLEU-4 {:.4}, change type {:.4}, pointing {:.4} (n={}); {elapsed:.0?}",
        m.bleu4, m.change_type_accuracy, m.pointing_accuracy, m.pointing_count
    );
    check(
        m.bleu4 >= 0.60 && m.change_type_accuracy >= 0.80 && m.pointing_accuracy >= 0.70,
        detail,
    )
}

// 5 and 6 ------------------------------------------------------------------

struct Study {
    config: RunConfig,
    train: Vec<Sample>,
    held: Vec<Sample>,
}

impl Study {
    fn new() -> Self {
        let config = desk_config(STUDY_LR, STUDY_EPOCHS);
        let train = data(&config, 0..STUDY_SAMPLES);
        let held = data(&config, TRAIN_SAMPLES..TRAIN_SAMPLES + HELD_OUT);
        Study { config, train, held }
    }

    fn seeded(&self, seed: u64) -> RunConfig {
        let mut c = self.config.clone();
        c.model.init_seed = seed;
        c.train.seed = seed;
        c
    }
}

fn ablation_direction(study: &Study) -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in STUDY_SEEDS {
        let full = study.seeded(seed);
        let mut base = full.clone();
        base.train.diff_sub = true;
        let (_, rf, _) = train_eval(&full, &study.train, &study.held);
        let (_, rb, _) = train_eval(&base, &study.train, &study.held);
        let (bucket, jf) = largest_jitter_bleu(&rf);
        let (_, jb) = largest_jitter_bleu(&rb);
        let win = rf.overall.bleu4 >= rb.overall.bleu4 && jf > jb;
        wins += usize::from(win);
        rows.push(format!(
            "seed {seed}: overall {:.4} vs {:.4}, jitter={bucket} {jf:.4} vs {jb:.4}{}",
            rf.overall.bleu4,
            rb.overall.bleu4,
            if win { "" } else { " (miss)" }
        ));
    }
    check(
        wins * 2 > STUDY_SEEDS.len(),
        format!(
            "full vs diff-sub BLEU-4, {wins}/{} seeds hold; {}",
            STUDY_SEEDS.len(),
            rows.join("; ")
        ),
    )
}

fn lambda_shape(study: &Study) -> Outcome {
    let vocab = Vocabulary::grammar();
    let points = lambda_sweep(
        &study.train,
        &study.held,
        &DEFAULT_LAMBDAS,
        &study.config,
        &vocab,
        |_| {},
    )
    .map_err(|e| e.to_string())?;
    eprint!("{}", sweep_table(&points));
    let zero = &points[0].report.overall;
    let bleus: Vec<f64> = points.iter().map(|p| p.report.overall.bleu4).collect();
    let non_constant = bleus.iter().any(|&b| b != bleus[0]);
    let good: Vec<f64> = points[1..]
        .iter()
        .filter(|p| {
            let m = &p.report.overall;
            m.dep_accuracy >= zero.dep_accuracy && m.bleu4 >= zero.bleu4 - 0.05
        })
        .map(|p| p.lambda)
        .collect();
    let curve: Vec<String> = points
        .iter()
        .map(|p| {
            format!(
                "{}:{:.3}/{:.3}",
                p.lambda, p.report.overall.bleu4, p.report.overall.dep_accuracy
            )
        })
        .collect();
    check(
        non_constant && !good.is_empty(),
        format!("λ:BLEU-4/dep acc {}; qualifying λ {good:?}", curve.join(" ")),
    )
}

// 7 ------------------------------------------------------------------------

fn bleu_oracle() -> Outcome {
    fn split(s: &str) -> Vec<&str> {
        s.split(' ').collect()
    }
    let corpus = vec![
        split("the red cube moved"),
        split("a small sphere was added to the scene"),
    ];
    let same = bleu4(&corpus, &corpus).map_err(|e| e.to_string())?;
    let disjoint = bleu4(&[split("w x y z")], &[split("a b c d")]).map_err(|e| e.to_string())?;
    let partial = bleu4(&[split("a b c d e")], &[split("a b c d f")]).map_err(|e| e.to_string())?;
    let expected = 0.2f64.powf(0.25);
    check(
        same == 1.0 && disjoint == 0.0 && (partial - expected).abs() < 1e-4,
        format!("identical {same}, disjoint {disjoint}, partial {partial:.6} (hand count {expected:.6})"),
    )
}

fn main() -> ExitCode {
    let selected: Option<Vec<u32>> = std::env::var("NCT_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: u32| selected.as_ref().is_none_or(|s| s.contains(&i));
    let study = (wanted(5) || wanted(6)).then(Study::new);

    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "gradient integrity", Box::new(gradient_integrity)),
        (2, "exact invariants", Box::new(invariants)),
        (3, "overfit", Box::new(overfit)),
        (4, "generalization", Box::new(generalization)),
        (
            5,
            "ablation direction",
            Box::new(|| ablation_direction(study.as_ref().unwrap())),
        ),
        (
            6,
            "lambda sweep shape",
            Box::new(|| lambda_shape(study.as_ref().unwrap())),
        ),
        (7, "BLEU-4 oracle", Box::new(bleu_oracle)),
    ];
    let mut failed = 0;
    for (i, name, run) in &criteria {
        if !wanted(*i) {
            println!("SKIP {i} {name}");
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS {i} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {i} {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
