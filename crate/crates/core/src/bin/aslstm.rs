use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aslstm::bench::{benchmark_speed, depth_histogram, run_ablation, standard_variants, Variant};
use aslstm::checkpoint;
use aslstm::data::{ingest, Format};
use aslstm::experiment::{run_experiment, RunConfig};
use aslstm::model::{DepthOverride, Model};
use aslstm::train::{evaluate, Examples};
use aslstm::{Error, Result};
use aslstm_tensor::Scalar;
use clap::{Args, Parser, Subcommand};

/// Depth-adaptive S-LSTM text classification.
#[derive(Parser)]
#[command(name = "aslstm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Labelled text file.
    #[arg(long)]
    data: PathBuf,
    /// tsv, csv, jsonl or trec; inferred from the extension by default.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a dataset and print its statistics.
    IngestCheck(DataArgs),
    /// Train and evaluate as described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config entry, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a labelled file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
    },
    /// Measure evaluation throughput of a checkpoint.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Force every word to this depth.
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Export executed depths per word and a histogram.
    Depths {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Write `{"token", "depth"}` records here (JSON lines).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
    },
    /// Run the ablation variants over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        /// Restrict to variants whose name contains one of these words.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Write the table as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_data(d: &DataArgs) -> Result<aslstm::data::Dataset> {
    let format = match &d.format {
        Some(f) => f.parse()?,
        None => Format::from_path(&d.data)?,
    };
    ingest(&d.data, format)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

fn with_model<T>(
    path: &Path,
    f32_fn: impl FnOnce(Model<f32>) -> Result<T>,
    f64_fn: impl FnOnce(Model<f64>) -> Result<T>,
) -> Result<T> {
    match checkpoint::stored_precision(path)?.as_str() {
        "f64" => f64_fn(checkpoint::load(path)?),
        _ => f32_fn(checkpoint::load(path)?),
    }
}

fn eval_cmd<F: Scalar>(model: Model<F>, data: &DataArgs, batch: usize) -> Result<()> {
    let ds = read_data(data)?;
    let ex = Examples::from_dataset(&ds, &model.labels)?;
    let m = evaluate(&model, &ex, batch, 0)?;
    println!(
        "{}",
        serde_json::json!({
            "accuracy": m.accuracy,
            "mean_depth": m.mean_depth,
            "word_transitions": m.word_transitions,
            "global_transitions": m.global_transitions,
            "samples": ex.len(),
        })
    );
    eprintln!(
        "{:<22}{:.4}\n{:<22}{:.3}",
        "accuracy", m.accuracy, "mean executed depth", m.mean_depth
    );
    Ok(())
}

fn bench_cmd<F: Scalar>(
    model: Model<F>,
    data: &DataArgs,
    batch: usize,
    warmup: usize,
    repeats: usize,
    depth: Option<usize>,
) -> Result<()> {
    let ds = read_data(data)?;
    let r = benchmark_speed(
        &model,
        &ds.token_lists(),
        batch,
        warmup,
        repeats,
        depth.map(DepthOverride::Uniform),
    )?;
    println!("{}", json(&r));
    eprintln!(
        "{:<22}{:.1} ± {:.1}\n{:<22}{}\n{:<22}{:.3}",
        "samples/sec",
        r.samples_per_sec,
        r.stddev,
        "word transitions",
        r.counts.word,
        "mean executed depth",
        r.mean_depth
    );
    Ok(())
}

fn depths_cmd<F: Scalar>(
    model: Model<F>,
    data: &DataArgs,
    out: Option<&Path>,
    batch: usize,
) -> Result<()> {
    let ds = read_data(data)?;
    let h = depth_histogram(&model, &ds.token_lists(), batch, 0)?;
    match out {
        Some(p) => std::fs::write(p, h.json_lines())
            .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?,
        None => print!("{}", h.json_lines()),
    }
    eprint!("{}", h.bar_chart(40));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::IngestCheck(d) => {
            let ds = read_data(&d)?;
            let tokens: usize = ds.records.iter().map(|r| r.tokens.len()).sum();
            println!(
                "{}",
                serde_json::json!({
                    "records": ds.len(),
                    "labels": ds.labels,
                    "mean_tokens": tokens as f64 / ds.len() as f64,
                })
            );
            eprintln!(
                "{:<10}{}\n{:<10}{}\n{:<10}{:.2}",
                "records",
                ds.len(),
                "labels",
                ds.labels.join(" "),
                "tokens",
                tokens as f64 / ds.len() as f64
            );
            Ok(())
        }
        Command::Train {
            config,
            set,
            report,
            checkpoint,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_overrides(&set)?;
            if report.is_some() {
                cfg.data.report_path = report;
            }
            if checkpoint.is_some() {
                cfg.data.checkpoint_path = checkpoint;
            }
            let r = run_experiment(&cfg, |e| println!("{}", json(e)))?;
            eprint!("{}", r.summary());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            batch_size,
        } => with_model(
            &checkpoint,
            |m| eval_cmd(m, &data, batch_size),
            |m| eval_cmd(m, &data, batch_size),
        ),
        Command::Bench {
            checkpoint,
            data,
            batch_size,
            warmup,
            repeats,
            depth,
        } => with_model(
            &checkpoint,
            |m| bench_cmd(m, &data, batch_size, warmup, repeats, depth),
            |m| bench_cmd(m, &data, batch_size, warmup, repeats, depth),
        ),
        Command::Depths {
            checkpoint,
            data,
            out,
            batch_size,
        } => with_model(
            &checkpoint,
            |m| depths_cmd(m, &data, out.as_deref(), batch_size),
            |m| depths_cmd(m, &data, out.as_deref(), batch_size),
        ),
        Command::Ablate {
            config,
            set,
            seeds,
            only,
            out,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_overrides(&set)?;
            let variants: Vec<Variant> = standard_variants()
                .into_iter()
                .filter(|v| only.is_empty() || only.iter().any(|o| v.name.contains(o.as_str())))
                .collect();
            let table = run_ablation(&cfg, &variants, &seeds)?;
            for row in &table.rows {
                println!("{}", json(row));
            }
            if let Some(p) = out {
                std::fs::write(&p, json(&table))
                    .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            }
            eprint!("{}", table.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
