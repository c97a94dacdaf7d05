//! `h2rat` command line: gen | train | eval | infer | viz.
//!
//! Settings come from an optional `--config` key=value file, overridden
//! by flags, overriding built-in defaults. Every effective setting is
//! echoed to the run log. Exit codes: 0 success, 1 I/O, 2 usage,
//! 3 format/parse, 4 numeric failure.

mod settings;

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use h2rat::eval::{self, EvalOptions};
use h2rat::numerics::{RngStream, Tensor};
use h2rat::scenarios::{self, Scenario, ABNORMALITIES, ACTION_NAMES};
use h2rat::textenc::{normalize_words, UNK};
use h2rat::training::{self, ModelSelection, TrainConfig};
use h2rat::vision::{apply_edge_filter, zone_of_region, EdgeFilterSpec, RegionGrid};

use settings::{CliError, Settings};

#[derive(Parser)]
#[command(name = "h2rat", version, about = "Attention transfer pipeline: corpus generation, training, evaluation, inference, heatmaps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Selection {
    Best,
    Final,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario corpus
    Gen {
        /// Key=value settings file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Total sample count (split evenly into train/test)
        #[arg(long)]
        n: Option<usize>,
        /// Corpus output path
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        #[arg(long)]
        feat_dim: Option<usize>,
        /// Region feature noise level
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Train a model on a corpus and write a checkpoint
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus file produced by `gen`
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Checkpoint output path
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        eval_every: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        /// Embedding / hidden dimension
        #[arg(long)]
        m: Option<usize>,
        /// Attention layer width
        #[arg(long)]
        k: Option<usize>,
        /// Stacked attention depth (1 or 2)
        #[arg(long)]
        layer_count: Option<usize>,
        /// Which epoch's weights the checkpoint keeps
        #[arg(long, value_enum)]
        selection: Option<Selection>,
    },
    /// Evaluate a checkpoint on a corpus test split
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory for report, metrics, P-R rows, dumps
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reference confidence threshold for the summary
        #[arg(long)]
        threshold: Option<f64>,
        /// Zero rim attention mass before agreement metrics and dumps
        #[arg(long, value_enum)]
        edge_filter: Option<Switch>,
        /// Render predicted/baseline heatmap pairs for this many samples
        #[arg(long)]
        heatmaps: Option<usize>,
    },
    /// Run one reminder + feature grid through a checkpoint
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reminder text, e.g. "stop, the pose is wrong"
        #[arg(long)]
        reminder: Option<String>,
        /// Region feature file
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Render heatmaps from an attention dump written by `eval`
    Viz {
        #[arg(long)]
        config: Option<PathBuf>,
        /// attention_dump.csv from an `eval` run
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Output directory for PGM files
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { config, n, out, seed, rows, cols, feat_dim, sigma } => {
            cmd_gen(config, n, out, seed, rows, cols, feat_dim, sigma)
        }
        Command::Train {
            config, corpus, out, seed, epochs, batch_size, learning_rate,
            eval_every, patience, m, k, layer_count, selection,
        } => cmd_train(
            config, corpus, out, seed, epochs, batch_size, learning_rate,
            eval_every, patience, m, k, layer_count, selection,
        ),
        Command::Eval { config, checkpoint, corpus, out, threshold, edge_filter, heatmaps } => {
            cmd_eval(config, checkpoint, corpus, out, threshold, edge_filter, heatmaps)
        }
        Command::Infer { config, checkpoint, reminder, features } => {
            cmd_infer(config, checkpoint, reminder, features)
        }
        Command::Viz { config, dump, out } => cmd_viz(config, dump, out),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    config: Option<PathBuf>,
    n: Option<usize>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    rows: Option<usize>,
    cols: Option<usize>,
    feat_dim: Option<usize>,
    sigma: Option<f64>,
) -> Result<(), CliError> {
    let mut s = Settings::load(config.as_deref())?;
    let n = s.required("n", n)?;
    let out: PathBuf = s.required("out", out)?;
    let seed = s.get("seed", seed, 1u64)?;
    let rows = s.get("rows", rows, 4usize)?;
    let cols = s.get("cols", cols, 4usize)?;
    let feat_dim = s.get("feat_dim", feat_dim, 16usize)?;
    let sigma = s.get("sigma", sigma, 0.3f64)?;
    s.finish()?;
    if n < 2 {
        return Err(CliError::Usage("n must be at least 2".into()));
    }

    let def = scenarios::CorpusDefinition::with_geometry(seed, rows, cols, feat_dim, sigma);
    let mut rng = RngStream::new(seed);
    let corpus = scenarios::generate_corpus(&def, n, &mut rng)?;
    scenarios::save_corpus(&corpus, &out)?;

    println!("corpus written: {}", out.display());
    println!("seed {seed}, sigma {sigma}, grid {rows}x{cols}, feat_dim {feat_dim}");
    for (name, split) in [("train", &corpus.train), ("test", &corpus.test)] {
        let counts = class_counts(split);
        println!(
            "{name}: {} samples, class counts {:?}",
            split.len(),
            counts
        );
    }
    Ok(())
}

fn class_counts(split: &[Scenario]) -> Vec<usize> {
    let mut counts = vec![0usize; ABNORMALITIES.len()];
    for s in split {
        counts[s.spec.abnormality.class_id()] += 1;
    }
    counts
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<PathBuf>,
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    eval_every: Option<usize>,
    patience: Option<usize>,
    m: Option<usize>,
    k: Option<usize>,
    layer_count: Option<usize>,
    selection: Option<Selection>,
) -> Result<(), CliError> {
    let defaults = TrainConfig::default();
    let mut s = Settings::load(config.as_deref())?;
    let corpus_path: PathBuf = s.required("corpus", corpus)?;
    let out: PathBuf = s.required("out", out)?;
    let selection_word = s.get(
        "selection",
        selection.map(|v| match v {
            Selection::Best => "best".to_string(),
            Selection::Final => "final".to_string(),
        }),
        "best".to_string(),
    )?;
    let cfg = TrainConfig {
        seed: s.get("seed", seed, defaults.seed)?,
        epochs: s.get("epochs", epochs, defaults.epochs)?,
        batch_size: s.get("batch_size", batch_size, defaults.batch_size)?,
        learning_rate: s.get("learning_rate", learning_rate, defaults.learning_rate)?,
        eval_every: s.get("eval_every", eval_every, defaults.eval_every)?,
        patience: s.get("patience", patience, defaults.patience)?,
        m: s.get("m", m, defaults.m)?,
        k: s.get("k", k, defaults.k)?,
        layer_count: s.get("layer_count", layer_count, defaults.layer_count)?,
        selection: match selection_word.as_str() {
            "best" => ModelSelection::BestValidation,
            "final" => ModelSelection::Final,
            other => {
                return Err(CliError::Usage(format!(
                    "selection must be best or final, got {other}"
                )))
            }
        },
        ..defaults
    };
    s.finish()?;

    let corpus = scenarios::load_corpus(&corpus_path)?;
    let ckpt = training::train_with_log(&corpus, &cfg, |log| match log.val_accuracy {
        Some(acc) => println!("epoch {}, train_loss {:.6}, val_acc {:.4}", log.epoch, log.train_loss, acc),
        None => println!("epoch {}, train_loss {:.6}, val_acc -", log.epoch, log.train_loss),
    })?;
    training::save_checkpoint(&ckpt, &out)?;
    println!(
        "checkpoint written: {} (best epoch {}, best val_acc {:.4})",
        out.display(),
        ckpt.metadata.best_epoch,
        ckpt.metadata.best_val_accuracy
    );
    Ok(())
}

fn cmd_eval(
    config: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    threshold: Option<f64>,
    edge_filter: Option<Switch>,
    heatmaps: Option<usize>,
) -> Result<(), CliError> {
    let mut s = Settings::load(config.as_deref())?;
    let ckpt_path: PathBuf = s.required("checkpoint", checkpoint)?;
    let corpus_path: PathBuf = s.required("corpus", corpus)?;
    let out: PathBuf = s.required("out", out)?;
    let threshold = s.get("threshold", threshold, 0.5f64)?;
    let edge_word = s.get(
        "edge_filter",
        edge_filter.map(|v| if v == Switch::On { "on".to_string() } else { "off".to_string() }),
        "on".to_string(),
    )?;
    let heatmaps = s.get("heatmaps", heatmaps, 0usize)?;
    s.finish()?;
    let edge = match edge_word.as_str() {
        "on" => true,
        "off" => false,
        other => {
            return Err(CliError::Usage(format!(
                "edge_filter must be on or off, got {other}"
            )))
        }
    };
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage("threshold must be in [0, 1]".into()));
    }

    let ckpt = training::load_checkpoint(&ckpt_path)?;
    let corpus = scenarios::load_corpus(&corpus_path)?;
    let opts = EvalOptions {
        edge_filter: edge,
        reference_threshold: threshold,
        ..EvalOptions::default()
    };
    let ev = eval::evaluate(&ckpt, &corpus.test, &opts)?;

    std::fs::create_dir_all(&out).map_err(h2rat::Error::from)?;
    let report = eval::render_report(&ev);
    std::fs::write(out.join("report.txt"), &report).map_err(h2rat::Error::from)?;
    std::fs::write(out.join("metrics.txt"), eval::render_metrics_kv(&ev))
        .map_err(h2rat::Error::from)?;
    std::fs::write(out.join("pr.csv"), eval::render_pr_csv(&ev)).map_err(h2rat::Error::from)?;
    let rows = ckpt.params.dims.grid_rows;
    let cols = ckpt.params.dims.grid_cols;
    std::fs::write(out.join("attention_dump.csv"), render_dump(&ev, rows, cols))
        .map_err(h2rat::Error::from)?;
    for (i, p) in ev.predictions.iter().take(heatmaps).enumerate() {
        eval::render_heatmap(&p.attention, rows, cols, &out.join(format!("sample{i}_predicted.pgm")))?;
        eval::render_heatmap(&p.baseline, rows, cols, &out.join(format!("sample{i}_baseline.pgm")))?;
    }
    print!("{report}");
    println!("wrote report.txt, metrics.txt, pr.csv, attention_dump.csv to {}", out.display());
    Ok(())
}

/// One line per (sample, kind): `sample,kind,rows,cols,v0,...`. The
/// `viz` subcommand renders heatmaps back from this file.
fn render_dump(ev: &eval::Evaluation, rows: usize, cols: usize) -> String {
    let mut out = String::from("sample,kind,rows,cols,values\n");
    for (i, p) in ev.predictions.iter().enumerate() {
        for (kind, t) in [("predicted", &p.attention), ("baseline", &p.baseline)] {
            let _ = write!(out, "{i},{kind},{rows},{cols}");
            for v in t.as_slice() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

fn cmd_infer(
    config: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    reminder: Option<String>,
    features: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut s = Settings::load(config.as_deref())?;
    let ckpt_path: PathBuf = s.required("checkpoint", checkpoint)?;
    let text: String = s.required("reminder", reminder)?;
    let feat_path: PathBuf = s.required("features", features)?;
    s.finish()?;

    let ckpt = training::load_checkpoint(&ckpt_path)?;
    let grid = RegionGrid::load(&feat_path)?;
    let dims = &ckpt.params.dims;
    if grid.rows != dims.grid_rows || grid.cols != dims.grid_cols || grid.feature_dim() != dims.feat_dim {
        return Err(h2rat::Error::DimensionMismatch {
            op: "infer feature grid",
            lhs: format!("checkpoint {}x{} grid, feat_dim {}", dims.grid_rows, dims.grid_cols, dims.feat_dim),
            rhs: format!("file {}x{} grid, feat_dim {}", grid.rows, grid.cols, grid.feature_dim()),
        }
        .into());
    }

    let words = normalize_words(&text);
    if !words.is_empty() && words.iter().all(|w| ckpt.vocabulary.index_of(w) == UNK) {
        eprintln!("warning: no reminder word is in the model vocabulary; proceeding with unknown tokens");
    }
    let tokens = h2rat::textenc::tokenize(&text, &ckpt.vocabulary)?;
    let out = h2rat::model::infer(&ckpt.params, &tokens, &grid)?;

    let class_name = scenarios::Abnormality::from_class_id(out.predicted_class)
        .map(|a| a.to_string())
        .unwrap_or_else(|| "unknown".to_string());
    println!("class: {} ({})", class_name, out.predicted_class);
    println!("confidence: {:.4}", out.confidence);

    let filtered = apply_edge_filter(&out.p2, grid.rows, grid.cols, &EdgeFilterSpec::default())?;
    let mut ranked: Vec<usize> = (0..filtered.rows()).collect();
    ranked.sort_by(|&a, &b| filtered.get(b, 0).partial_cmp(&filtered.get(a, 0)).unwrap());
    println!("attention top-3:");
    for &r in ranked.iter().take(3) {
        println!("  row {}, col {}, mass {:.4}", r / grid.cols, r % grid.cols, filtered.get(r, 0));
    }

    let zone = zone_of_region(grid.rows, grid.cols, filtered.argmax());
    match ckpt.correction_table.best_action(out.predicted_class, zone) {
        Ok(action) => {
            let name = ACTION_NAMES.get(action as usize).copied().unwrap_or("unnamed");
            println!("correction: action {action} ({name})");
        }
        Err(h2rat::Error::NoCorrection { .. }) => println!("correction: no correction known"),
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn cmd_viz(
    config: Option<PathBuf>,
    dump: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut s = Settings::load(config.as_deref())?;
    let dump_path: PathBuf = s.required("dump", dump)?;
    let out: PathBuf = s.required("out", out)?;
    s.finish()?;

    let text = std::fs::read_to_string(&dump_path).map_err(h2rat::Error::from)?;
    std::fs::create_dir_all(&out).map_err(h2rat::Error::from)?;
    let mut rendered = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let (sample, kind, rows, cols, values) = parse_dump_line(line, lineno + 1)?;
        let attn = Tensor::new(values.len(), 1, values)?;
        eval::render_heatmap(&attn, rows, cols, &out.join(format!("sample{sample}_{kind}.pgm")))?;
        rendered += 1;
    }
    if rendered == 0 {
        return Err(CliError::Format("dump contains no attention rows".into()));
    }
    println!("rendered {rendered} heatmaps to {}", out.display());
    Ok(())
}

fn parse_dump_line(line: &str, lineno: usize) -> Result<(usize, String, usize, usize, Vec<f64>), CliError> {
    let bad = |what: &str| CliError::Format(format!("dump line {lineno}: {what}"));
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() < 5 {
        return Err(bad("expected sample,kind,rows,cols,values"));
    }
    let sample: usize = fields[0].parse().map_err(|_| bad("bad sample index"))?;
    let kind = fields[1];
    if kind != "predicted" && kind != "baseline" {
        return Err(bad("kind must be predicted or baseline"));
    }
    let rows: usize = fields[2].parse().map_err(|_| bad("bad row count"))?;
    let cols: usize = fields[3].parse().map_err(|_| bad("bad col count"))?;
    let values: Vec<f64> = fields[4..]
        .iter()
        .map(|f| f.parse::<f64>().map_err(|_| bad("bad attention value")))
        .collect::<Result<_, _>>()?;
    if values.len() != rows * cols {
        return Err(bad("value count does not match grid geometry"));
    }
    Ok((sample, kind.to_string(), rows, cols, values))
}
