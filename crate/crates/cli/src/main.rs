mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nct_core::config::RunConfig;
use nct_core::eval::{evaluate, heat_map_text, lambda_sweep, sweep_table, DEFAULT_LAMBDAS};
use nct_core::scene::{
    generate_dataset, load_dataset, realize_caption, save_dataset, Renderer, Sample, ScenePair, Vocabulary,
};
use nct_core::train::{load_checkpoint, render_examples, save_checkpoint, train_loop};
use nct_core::verify::grad_check_suite;

use settings::{echo, parse_config, split_overrides, Override};

const OVERRIDE_HELP: &str = "\
Configuration overrides (any position):
  --scene-<key> V   --model-<key> V   --train-<key> V
  --lambda V        (train.lambda)
  --seed V          (train.seed)
Keys mirror the config file; dashes in <key> stand for underscores.";

#[derive(Parser)]
#[command(name = "nct", about = "Change captioning on synthetic scene pairs", after_help = OVERRIDE_HELP)]
struct Cli {
    /// TOML file with [scene], [model] and [train] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and validation splits as JSON lines.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, then write its checkpoint and validation report.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON-lines dataset to evaluate instead of the configured split.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Directory for per-sample localization maps.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Caption one scene pair.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample id regenerated from the scene seed.
        #[arg(long, conflicts_with = "pair", required_unless_present = "pair")]
        id: Option<u64>,
        /// JSON file holding a scene pair or a dataset sample.
        #[arg(long)]
        pair: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every module at toy sizes.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train one model per λ and print the validation curve.
    SweepLambda {
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Directory written by gen-data; generated on the fly when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

struct Splits {
    train: Vec<Sample>,
    val: Vec<Sample>,
}

fn configured_splits(config: &RunConfig, vocab: &Vocabulary) -> Result<Splits> {
    let n = config.train.train_samples;
    Ok(Splits {
        train: generate_dataset(&config.scene, vocab, 0..n)?,
        val: validation_split(config, vocab)?,
    })
}

fn validation_split(config: &RunConfig, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let n = config.train.train_samples;
    Ok(generate_dataset(&config.scene, vocab, n..n + config.train.val_samples)?)
}

fn load_splits(args: &DataArgs, config: &RunConfig, vocab: &Vocabulary) -> Result<Splits> {
    match &args.data {
        None => configured_splits(config, vocab),
        Some(dir) => {
            let load = |name: &str| {
                let path = dir.join(name);
                load_dataset(&path).with_context(|| format!("loading {}", path.display()))
            };
            Ok(Splits {
                train: load("train.jsonl")?,
                val: load("val.jsonl")?,
            })
        }
    }
}

fn announce(config: &RunConfig) -> Result<()> {
    eprintln!("# effective config\n{}", echo(config)?);
    Ok(())
}

fn write_config(dir: &Path, config: &RunConfig) -> Result<()> {
    fs::write(dir.join("config.toml"), echo(config)?)?;
    Ok(())
}

fn gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    let vocab = Vocabulary::grammar();
    fs::create_dir_all(out)?;
    let splits = configured_splits(config, &vocab)?;
    save_dataset(&splits.train, &out.join("train.jsonl"))?;
    save_dataset(&splits.val, &out.join("val.jsonl"))?;
    write_config(out, config)?;
    println!(
        "wrote {} training and {} validation samples to {}",
        splits.train.len(),
        splits.val.len(),
        out.display()
    );
    Ok(())
}

fn train(config: &RunConfig, out: &Path, data: &DataArgs) -> Result<()> {
    let vocab = Vocabulary::grammar();
    let splits = load_splits(data, config, &vocab)?;
    fs::create_dir_all(out)?;
    write_config(out, config)?;
    let examples = render_examples(&splits.train, &Renderer::new(&config.scene));
    let start = Instant::now();
    let every = config.train.checkpoint_every;
    let model = train_loop(&examples, config, &vocab, |s, model| {
        eprintln!(
            "epoch {:>3} loss {:.4} cap {:.4} dep {:.4} ({:.0?})",
            s.epoch,
            s.loss,
            s.cap_loss,
            s.dep_loss,
            start.elapsed()
        );
        if every > 0 && s.epoch % every == 0 {
            save_checkpoint(
                &out.join(format!("checkpoint_epoch{}.json", s.epoch)),
                config,
                &vocab,
                model,
            )?;
        }
        Ok(())
    })?;
    save_checkpoint(&out.join("checkpoint.json"), config, &vocab, &model)?;
    let (report, _) = evaluate(&model, config, &vocab, &splits.val)?;
    fs::write(out.join("report.txt"), report.to_string())?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{report}");
    Ok(())
}

fn checkpoint_config(path: &Path, file: Option<&Path>, overrides: &[Override]) -> Result<nct_core::train::Checkpoint> {
    let mut ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let config = parse_config(&ck.config, file, overrides)?;
    if config.model != ck.config.model || config.scene.channels != ck.config.scene.channels {
        bail!(
            "model.*: overrides conflict with the architecture stored in {}",
            path.display()
        );
    }
    if (config.scene.grid_h, config.scene.grid_w) != (ck.config.scene.grid_h, ck.config.scene.grid_w) {
        bail!("scene.grid_h/grid_w: overrides conflict with the checkpoint grid");
    }
    ck.config = config;
    Ok(ck)
}

fn eval(
    cli_config: Option<&Path>,
    overrides: &[Override],
    checkpoint: &Path,
    samples: Option<&Path>,
    heatmaps: Option<&Path>,
    json: Option<&Path>,
) -> Result<()> {
    let ck = checkpoint_config(checkpoint, cli_config, overrides)?;
    announce(&ck.config)?;
    let data = match samples {
        Some(p) => load_dataset(p).with_context(|| format!("loading {}", p.display()))?,
        None => validation_split(&ck.config, &ck.vocab)?,
    };
    let (report, results) = evaluate(&ck.model, &ck.config, &ck.vocab, &data)?;
    if let Some(dir) = heatmaps {
        fs::create_dir_all(dir)?;
        let w = ck.config.scene.grid_w;
        for r in &results {
            fs::write(dir.join(format!("{}_bef.txt", r.id)), heat_map_text(&r.gamma_bef, w))?;
            fs::write(dir.join(format!("{}_aft.txt", r.id)), heat_map_text(&r.gamma_aft, w))?;
        }
    }
    if let Some(p) = json {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    print!("{report}");
    Ok(())
}

fn read_pair(path: &Path) -> Result<ScenePair> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(sample) = serde_json::from_str::<Sample>(&text) {
        return Ok(sample.pair);
    }
    serde_json::from_str(&text).with_context(|| format!("{} holds neither a scene pair nor a sample", path.display()))
}

fn caption(
    cli_config: Option<&Path>,
    overrides: &[Override],
    checkpoint: &Path,
    id: Option<u64>,
    pair: Option<&Path>,
) -> Result<()> {
    let ck = checkpoint_config(checkpoint, cli_config, overrides)?;
    announce(&ck.config)?;
    let pair = match (id, pair) {
        (Some(id), _) => {
            generate_dataset(&ck.config.scene, &ck.vocab, id..id + 1)?
                .remove(0)
                .pair
        }
        (None, Some(p)) => read_pair(p)?,
        (None, None) => bail!("caption needs --id or --pair"),
    };
    let reference = realize_caption(&pair, &ck.vocab, &ck.config.scene)?;
    eprintln!("reference: {}", ck.vocab.decode(&reference.tokens).join(" "));
    let (before, after) = Renderer::new(&ck.config.scene).render_pair(&pair);
    let enc = ck.model.encode(ck.config.train.ablation(), &before, &after)?;
    let out = ck.model.greedy_decode(&enc.visual, ck.model.spec.config.max_len)?;
    let words: Vec<&str> = out.tokens.iter().map(|&t| ck.vocab.token(t)).collect();
    let tags: Vec<&str> = out.tags.iter().map(|&t| ck.vocab.tag(t)).collect();
    println!("{}", words.join(" "));
    println!("{}", tags.join(" "));
    Ok(())
}

fn grad_check(config: &RunConfig, step: f64, tol: f64) -> Result<bool> {
    let start = Instant::now();
    let suite = grad_check_suite(config.train.seed, step, tol)?;
    let mut ok = true;
    for m in &suite {
        let pass = m.report.passed();
        ok &= pass;
        println!(
            "{:<10} params={:<4} max_rel_err={:.3e} {}",
            m.module,
            m.report.entries.len(),
            m.report.max_rel_err(),
            if pass { "ok" } else { "FAIL" }
        );
        if !pass {
            eprint!("{}", m.report);
        }
    }
    let worst = suite.iter().map(|m| m.report.max_rel_err()).fold(0.0, f64::max);
    println!("max_rel_err={worst:.3e} tol={tol:.0e} elapsed={:.2?}", start.elapsed());
    Ok(ok)
}

fn sweep(config: &RunConfig, lambdas: Option<&[f64]>, out: Option<&Path>, data: &DataArgs) -> Result<()> {
    let vocab = Vocabulary::grammar();
    let splits = load_splits(data, config, &vocab)?;
    let lambdas = lambdas.unwrap_or(&DEFAULT_LAMBDAS);
    let points = lambda_sweep(&splits.train, &splits.val, lambdas, config, &vocab, |p| {
        eprintln!("lambda {} {}", p.lambda, p.report.overall);
    })?;
    let table = sweep_table(&points);
    if let Some(p) = out {
        fs::write(p, &table)?;
    }
    print!("{table}");
    Ok(())
}

fn run() -> Result<bool> {
    let (overrides, rest) = split_overrides(std::env::args().collect())?;
    let cli = Cli::parse_from(rest);
    let file = cli.config.as_deref();
    let fresh = || -> Result<RunConfig> {
        let c = parse_config(&RunConfig::default(), file, &overrides)?;
        announce(&c)?;
        Ok(c)
    };
    match &cli.command {
        Command::GenData { out } => gen_data(&fresh()?, out)?,
        Command::Train { out, data } => train(&fresh()?, out, data)?,
        Command::Eval {
            checkpoint,
            samples,
            heatmaps,
            json,
        } => eval(
            file,
            &overrides,
            checkpoint,
            samples.as_deref(),
            heatmaps.as_deref(),
            json.as_deref(),
        )?,
        Command::Caption { checkpoint, id, pair } => caption(file, &overrides, checkpoint, *id, pair.as_deref())?,
        Command::GradCheck { step, tol } => return grad_check(&fresh()?, *step, *tol),
        Command::SweepLambda { lambdas, out, data } => sweep(&fresh()?, lambdas.as_deref(), out.as_deref(), data)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
