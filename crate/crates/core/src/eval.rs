//! Evaluation harness: greedy captions, teacher-forced accuracies,
//! localization, and breakdowns by change type and jitter magnitude.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{bleu4, pointing_hit};
use crate::model::{argmax, decoder, Ablation, Model};
use crate::scene::{ChangeKind, Renderer, Sample, Vocabulary};
use crate::tensor::Graph;
use crate::train::{render_examples, teacher_forcing, train_loop};

/// The λ values swept by default.
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0, 0.005, 0.01, 0.02, 0.1, 1.0];

/// Per-sample evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: u64,
    pub change: ChangeKind,
    pub jitter: u32,
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
    pub predicted_tags: Vec<String>,
    pub token_hits: usize,
    pub dep_hits: usize,
    /// Teacher-forced target positions (shared by both heads).
    pub positions: usize,
    /// Free-running tag matches against the reference, position by position.
    pub free_dep_hits: usize,
    pub change_hit: bool,
    /// `None` for samples without a change.
    pub pointing: Option<bool>,
    pub gamma_bef: Vec<f64>,
    pub gamma_aft: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub bleu4: f64,
    pub token_accuracy: f64,
    pub dep_accuracy: f64,
    pub free_dep_accuracy: f64,
    pub change_type_accuracy: f64,
    pub pointing_accuracy: f64,
    /// Samples that entered `pointing_accuracy`.
    pub pointing_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterBucket {
    pub lo: u32,
    pub hi: u32,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Metrics,
    pub by_change: BTreeMap<String, Metrics>,
    pub by_jitter: Vec<JitterBucket>,
}

/// Change type named by the verb of a generated caption.
pub fn parse_change_kind<S: AsRef<str>>(words: &[S]) -> Option<ChangeKind> {
    words.iter().rev().find_map(|w| match w.as_ref() {
        "changed" => Some(ChangeKind::Color),
        "became" => Some(ChangeKind::Texture),
        "added" => Some(ChangeKind::Add),
        "removed" => Some(ChangeKind::Drop),
        "moved" => Some(ChangeKind::Move),
        "made" => Some(ChangeKind::None),
        _ => None,
    })
}

pub fn evaluate_sample(
    model: &Model,
    ablation: Ablation,
    renderer: &Renderer,
    vocab: &Vocabulary,
    sample: &Sample,
) -> Result<SampleResult> {
    let (before, after) = renderer.render_pair(&sample.pair);
    let enc = model.encode(ablation, &before, &after)?;
    let caption = &sample.caption;

    let (inputs, word_t, dep_t) = teacher_forcing(caption)?;
    let mut g = Graph::new();
    let p = model
        .params
        .bind_filtered(&mut g, |n| n.starts_with("dec.") || n.starts_with("head."));
    let v = g.leaf(&enc.visual);
    let out = decoder::decoder_forward(&mut g, &p, &model.spec, inputs, v, true)?;
    let (u, n) = (model.spec.vocab_size, model.spec.tagset_size);
    let words = g.value(out.word_logits);
    let deps = g.value(out.dep_logits.expect("dependency head requested"));
    let mut token_hits = 0;
    let mut dep_hits = 0;
    for (t, (wt, dt)) in word_t.iter().zip(&dep_t).enumerate() {
        token_hits += usize::from(Some(argmax(&words[t * u..(t + 1) * u])) == *wt);
        dep_hits += usize::from(Some(argmax(&deps[t * n..(t + 1) * n])) == *dt);
    }

    let decoded = model.greedy_decode(&enc.visual, model.spec.config.max_len)?;
    let candidate: Vec<String> = vocab.decode(&decoded.tokens).into_iter().map(String::from).collect();
    let reference: Vec<String> = vocab.decode(&caption.tokens).into_iter().map(String::from).collect();
    let ref_tags = &caption.dep_tags[1..caption.dep_tags.len() - 1];
    let free_dep_hits = decoded.tags.iter().zip(ref_tags).filter(|(a, b)| a == b).count();

    let pointing = match caption.change {
        ChangeKind::None => None,
        ChangeKind::Drop => Some(pointing_hit(&enc.gamma_bef, &caption.footprint, model.spec.width)),
        _ => Some(pointing_hit(&enc.gamma_aft, &caption.footprint, model.spec.width)),
    };
    Ok(SampleResult {
        id: sample.id,
        change: caption.change,
        jitter: sample.pair.jitter.magnitude(),
        change_hit: parse_change_kind(&candidate) == Some(caption.change),
        predicted_tags: decoded.tags.iter().map(|&t| vocab.tag(t).to_string()).collect(),
        candidate,
        reference,
        token_hits,
        dep_hits,
        positions: word_t.len(),
        free_dep_hits,
        pointing,
        gamma_bef: enc.gamma_bef,
        gamma_aft: enc.gamma_aft,
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn summarize(results: &[&SampleResult]) -> Result<Metrics> {
    if results.is_empty() {
        return Err(Error::invalid("cannot summarize zero samples"));
    }
    let cands: Vec<&Vec<String>> = results.iter().map(|r| &r.candidate).collect();
    let refs: Vec<&Vec<String>> = results.iter().map(|r| &r.reference).collect();
    let cands: Vec<Vec<&str>> = cands.iter().map(|c| c.iter().map(String::as_str).collect()).collect();
    let refs: Vec<Vec<&str>> = refs.iter().map(|c| c.iter().map(String::as_str).collect()).collect();
    let positions: usize = results.iter().map(|r| r.positions).sum();
    let ref_words: usize = results.iter().map(|r| r.reference.len()).sum();
    let pointed: Vec<bool> = results.iter().filter_map(|r| r.pointing).collect();
    Ok(Metrics {
        count: results.len(),
        bleu4: bleu4(&cands, &refs)?,
        token_accuracy: ratio(results.iter().map(|r| r.token_hits).sum(), positions),
        dep_accuracy: ratio(results.iter().map(|r| r.dep_hits).sum(), positions),
        free_dep_accuracy: ratio(results.iter().map(|r| r.free_dep_hits).sum(), ref_words),
        change_type_accuracy: ratio(results.iter().filter(|r| r.change_hit).count(), results.len()),
        pointing_accuracy: ratio(pointed.iter().filter(|&&h| h).count(), pointed.len()),
        pointing_count: pointed.len(),
    })
}

/// Metrics per jitter-magnitude bucket; empty buckets are omitted.
pub fn jitter_breakdown(results: &[SampleResult], buckets: &[RangeInclusive<u32>]) -> Result<Vec<JitterBucket>> {
    let mut out = Vec::new();
    for b in buckets {
        let members: Vec<&SampleResult> = results.iter().filter(|r| b.contains(&r.jitter)).collect();
        if !members.is_empty() {
            out.push(JitterBucket {
                lo: *b.start(),
                hi: *b.end(),
                metrics: summarize(&members)?,
            });
        }
    }
    Ok(out)
}

/// One bucket per possible L1 jitter magnitude.
pub fn default_buckets(jitter_max: u32) -> Vec<RangeInclusive<u32>> {
    (0..=2 * jitter_max).map(|m| m..=m).collect()
}

pub fn report_from_results(results: &[SampleResult], buckets: &[RangeInclusive<u32>]) -> Result<EvalReport> {
    let all: Vec<&SampleResult> = results.iter().collect();
    let mut by_change = BTreeMap::new();
    for kind in ChangeKind::ALL {
        let members: Vec<&SampleResult> = results.iter().filter(|r| r.change == kind).collect();
        if !members.is_empty() {
            by_change.insert(kind.name().to_string(), summarize(&members)?);
        }
    }
    Ok(EvalReport {
        overall: summarize(&all)?,
        by_change,
        by_jitter: jitter_breakdown(results, buckets)?,
    })
}

/// Evaluates every sample and aggregates the report.
pub fn evaluate(
    model: &Model,
    config: &RunConfig,
    vocab: &Vocabulary,
    samples: &[Sample],
) -> Result<(EvalReport, Vec<SampleResult>)> {
    let renderer = Renderer::new(&config.scene);
    let ablation = config.train.ablation();
    let results = samples
        .iter()
        .map(|s| evaluate_sample(model, ablation, &renderer, vocab, s))
        .collect::<Result<Vec<_>>>()?;
    let report = report_from_results(&results, &default_buckets(config.scene.jitter_max as u32))?;
    Ok((report, results))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub report: EvalReport,
}

/// Trains one model per λ from the same initialisation and shuffling seed
/// and evaluates each on `val`.
pub fn lambda_sweep(
    train: &[Sample],
    val: &[Sample],
    lambdas: &[f64],
    config: &RunConfig,
    vocab: &Vocabulary,
    mut on_point: impl FnMut(&SweepPoint),
) -> Result<Vec<SweepPoint>> {
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::invalid(format!("train.lambda: sweep value {l} must be >= 0")));
    }
    let renderer = Renderer::new(&config.scene);
    let examples = render_examples(train, &renderer);
    let mut points = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = config.clone();
        cfg.train.lambda = lambda;
        cfg.train.use_syntax = true;
        let model = train_loop(&examples, &cfg, vocab, |_, _| Ok(()))?;
        let (report, _) = evaluate(&model, &cfg, vocab, val)?;
        let point = SweepPoint { lambda, report };
        on_point(&point);
        points.push(point);
    }
    Ok(points)
}

/// Tab-separated curve, one row per λ.
pub fn sweep_table(points: &[SweepPoint]) -> String {
    let mut s = String::from(
        "lambda\tbleu4\ttoken_accuracy\tdep_accuracy\tfree_dep_accuracy\tchange_type_accuracy\tpointing_accuracy\n",
    );
    for p in points {
        let m = &p.report.overall;
        s.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            p.lambda,
            m.bleu4,
            m.token_accuracy,
            m.dep_accuracy,
            m.free_dep_accuracy,
            m.change_type_accuracy,
            m.pointing_accuracy
        ));
    }
    s
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={:<5} bleu4={:.4} tok={:.4} dep={:.4} dep_free={:.4} change={:.4} point={:.4} (n={})",
            self.count,
            self.bleu4,
            self.token_accuracy,
            self.dep_accuracy,
            self.free_dep_accuracy,
            self.change_type_accuracy,
            self.pointing_accuracy,
            self.pointing_count
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "overall   {}", self.overall)?;
        for (k, m) in &self.by_change {
            writeln!(f, "{k:<9} {m}")?;
        }
        for b in &self.by_jitter {
            let label = if b.lo == b.hi {
                format!("jitter={}", b.lo)
            } else {
                format!("jitter={}-{}", b.lo, b.hi)
            };
            writeln!(f, "{label:<9} {}", b.metrics)?;
        }
        Ok(())
    }
}

/// Plain-text heat map: `height` rows of `width` space-separated values.
pub fn heat_map_text(values: &[f64], width: usize) -> String {
    values
        .chunks(width)
        .map(|row| row.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}
