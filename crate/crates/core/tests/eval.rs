use std::collections::HashMap;

use nct_core::config::RunConfig;
use nct_core::eval::{
    default_buckets, evaluate, jitter_breakdown, lambda_sweep, parse_change_kind, report_from_results, summarize,
    sweep_table, SampleResult,
};
use nct_core::metrics::pointing_accuracy;
use nct_core::model::Model;
use nct_core::scene::{generate_dataset, ChangeKind, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn untrained() -> (RunConfig, Vocabulary, Model) {
    let c = RunConfig::default();
    let vocab = Vocabulary::grammar();
    let model = Model::new(c.model_spec(&vocab).unwrap()).unwrap();
    (c, vocab, model)
}

fn in_unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

#[test]
fn change_kind_from_verb() {
    let w = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
    assert_eq!(parse_change_kind(&w("the small cube moved")), Some(ChangeKind::Move));
    assert_eq!(parse_change_kind(&w("no change was made")), Some(ChangeKind::None));
    assert_eq!(parse_change_kind(&w("a cube was added")), Some(ChangeKind::Add));
    assert_eq!(parse_change_kind(&w("the cube above the red sphere")), None);
}

#[test]
fn untrained_model_is_near_chance() {
    let (c, vocab, model) = untrained();
    let data = generate_dataset(&c.scene, &vocab, 0..500).unwrap();
    let (report, results) = evaluate(&model, &c, &vocab, &data).unwrap();
    let m = &report.overall;
    for x in [
        m.bleu4,
        m.token_accuracy,
        m.dep_accuracy,
        m.free_dep_accuracy,
        m.change_type_accuracy,
        m.pointing_accuracy,
    ] {
        assert!(in_unit(x));
    }
    // an input-blind predictor can do no better than the most frequent target
    let mut freq: HashMap<usize, usize> = HashMap::new();
    for s in &data {
        for &t in &s.caption.tokens[1..] {
            *freq.entry(t).or_default() += 1;
        }
    }
    let total: usize = freq.values().sum();
    let majority = *freq.values().max().unwrap() as f64 / total as f64;
    assert!(
        m.token_accuracy <= majority + 0.02,
        "{} vs majority {majority}",
        m.token_accuracy
    );
    assert_eq!(results.len(), 500);
    assert_eq!(report.by_jitter.iter().map(|b| b.metrics.count).sum::<usize>(), 500);
    assert_eq!(report.by_change.values().map(|b| b.count).sum::<usize>(), 500);
}

#[test]
fn perfect_candidates_score_one() {
    let (c, vocab, model) = untrained();
    let data = generate_dataset(&c.scene, &vocab, 0..20).unwrap();
    let (_, mut results) = evaluate(&model, &c, &vocab, &data).unwrap();
    for r in results.iter_mut() {
        r.candidate = r.reference.clone();
    }
    let refs: Vec<&SampleResult> = results.iter().collect();
    assert_eq!(summarize(&refs).unwrap().bleu4, 1.0);
}

#[test]
fn single_bucket_equals_overall() {
    let (c, vocab, model) = untrained();
    let data = generate_dataset(&c.scene, &vocab, 0..30).unwrap();
    let (report, results) = evaluate(&model, &c, &vocab, &data).unwrap();
    let all = jitter_breakdown(&results, &[0..=u32::MAX]).unwrap();
    assert_eq!(all.len(), 1);
    assert_eq!(all[0].metrics, report.overall);
    let again = report_from_results(&results, &default_buckets(1)).unwrap();
    assert_eq!(again, report);
}

#[test]
fn random_maps_point_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut maps = Vec::new();
    let mut prints = Vec::new();
    for _ in 0..20_000 {
        let gamma: Vec<f64> = (0..49).map(|_| rng.random::<f64>()).collect();
        let (r, c) = (rng.random_range(0..6), rng.random_range(0..6));
        maps.push(gamma);
        prints.push(vec![(r, c), (r + 1, c), (r, c + 1), (r + 1, c + 1)]);
    }
    let pairs: Vec<(&[f64], &[(usize, usize)])> = maps
        .iter()
        .zip(&prints)
        .map(|(g, f)| (g.as_slice(), f.as_slice()))
        .collect();
    let acc = pointing_accuracy(&pairs, 7);
    assert!((acc - 4.0 / 49.0).abs() < 0.01, "{acc}");
}

#[test]
fn degenerate_sweep_has_one_row() {
    let mut c = RunConfig::default();
    c.model.d_model = 16;
    c.model.word_dim = 8;
    c.model.heads = 2;
    c.train.epochs = 1;
    c.train.batch_size = 4;
    let vocab = Vocabulary::grammar();
    let train = generate_dataset(&c.scene, &vocab, 0..8).unwrap();
    let val = generate_dataset(&c.scene, &vocab, 8..12).unwrap();
    let points = lambda_sweep(&train, &val, &[0.01], &c, &vocab, |_| {}).unwrap();
    assert_eq!(points.len(), 1);
    assert_eq!(points[0].lambda, 0.01);
    let table = sweep_table(&points);
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("0.01\t"));
    assert!(lambda_sweep(&train, &val, &[-1.0], &c, &vocab, |_| {}).is_err());
}
