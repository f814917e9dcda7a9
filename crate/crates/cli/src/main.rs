use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use msgan::checkpoint::load_ladder;
use msgan::config::TrainConfig;
use msgan::imageio::{load_image, save_image};
use msgan::metrics::{default_extractor, evaluate_table, Metric, NssModel};
use msgan::trainer::{recompute_reports, train_all};
use msgan::{tasks, Error, Result};

#[derive(Parser)]
#[command(name = "msgan", version, about = "Single-image multi-scale GAN with adaptive FGM/PGD critic training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Train a scale ladder on one image.
    Train {
        #[arg(long)]
        image: PathBuf,
        /// JSON config with dotted keys; unset keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. `--set attack.mode=fgm`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Draw random samples.
    Sample {
        #[command(flatten)]
        ckpt: Ckpt,
        /// Output directory for `sample_<i>.png`.
        #[arg(long)]
        out: PathBuf,
        /// Coarsest scale that receives fresh noise (default: the coarsest).
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Inject a painting at a coarse scale.
    Paint(Inject),
    /// Inject a content image into a ladder trained on a style image.
    Style(Inject),
    /// Super-resolve an image with the finest generator.
    Sr {
        #[command(flatten)]
        ckpt: Ckpt,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        s: f64,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score result images against references with matching file names.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "rmse,sifid,niqe")]
        metrics: Vec<String>,
        /// Natural-scene model for NIQE (default: the bundled one).
        #[arg(long)]
        nss: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Recompute the final bound report of every scale from a checkpoint.
    Bounds {
        #[command(flatten)]
        ckpt: Ckpt,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Args)]
struct Ckpt {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct Inject {
    #[command(flatten)]
    ckpt: Ckpt,
    #[arg(long)]
    input: PathBuf,
    /// Output file, or a directory when `--sweep` is given.
    #[arg(long)]
    out: PathBuf,
    /// Injection scale, 1 to the coarsest.
    #[arg(long, required_unless_present = "sweep")]
    scale: Option<usize>,
    /// Write one output per injection scale.
    #[arg(long, conflicts_with = "scale")]
    sweep: bool,
    /// Fresh noise at the finer scales; without it they use the
    /// reconstruction noise.
    #[arg(long)]
    seed: Option<u64>,
}

fn train_config(config: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        cfg.set_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn inject(args: &Inject) -> Result<()> {
    let (_, ladder) = load_ladder(&args.ckpt.ckpt)?;
    let input = load_image(&args.input)?;
    if args.sweep {
        for (i, img) in tasks::paint_sweep(&ladder, &input, args.seed)?.iter().enumerate() {
            save_image(img, &args.out.join(format!("scale_{}.png", i + 1)))?;
        }
        return Ok(());
    }
    let scale = args.scale.expect("clap requires --scale without --sweep");
    save_image(&tasks::paint_to_image(&ladder, &input, scale, args.seed)?, &args.out)
}

/// Flatten nested JSON objects into dotted columns.
fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn json_rows_to_csv(rows: &[Value]) -> String {
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let mut cells = Vec::new();
        flatten("", r, &mut cells);
        if i == 0 {
            out.push_str(&cells.iter().map(|c| c.0.as_str()).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out.push_str(&cells.iter().map(|c| c.1.as_str()).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            image,
            config,
            out,
            overrides,
            quiet,
        } => {
            let cfg = train_config(config.as_deref(), &overrides)?;
            let img = load_image(&image)?;
            let result = train_all(&img, &cfg, &out, &mut |r| {
                if !quiet {
                    eprintln!(
                        "scale {} iter {:>5}  d {:+.5}  gp {:.5}  g {:+.5}  rec {:.5}  attack {}",
                        r.scale,
                        r.iter,
                        r.d_loss,
                        r.gp,
                        r.g_adv,
                        r.rec,
                        r.attack.map_or("none", |k| k.as_str())
                    );
                }
            })?;
            if !quiet {
                eprintln!(
                    "trained {} scale(s); checkpoint in {}",
                    result.trained.len(),
                    out.display()
                );
            }
        }
        Command::Sample {
            ckpt,
            out,
            scale,
            count,
            seed,
        } => {
            let (_, ladder) = load_ladder(&ckpt.ckpt)?;
            let start = scale.unwrap_or(ladder.coarsest());
            for (i, img) in tasks::sample(&ladder, start, count, seed)?.iter().enumerate() {
                save_image(img, &out.join(format!("sample_{i}.png")))?;
            }
        }
        Command::Paint(args) | Command::Style(args) => inject(&args)?,
        Command::Sr {
            ckpt,
            input,
            out,
            s,
            k,
            seed,
        } => {
            let (_, ladder) = load_ladder(&ckpt.ckpt)?;
            let img = load_image(&input)?;
            save_image(&tasks::super_resolve(&ladder, &img, s, k, seed)?, &out)?;
        }
        Command::Eval {
            results,
            reference,
            metrics,
            nss,
            format,
        } => {
            let set: BTreeSet<Metric> = metrics.iter().map(|m| Metric::parse(m)).collect::<Result<_>>()?;
            let model = match nss {
                Some(p) => NssModel::load(&p)?,
                None => NssModel::builtin().clone(),
            };
            let extractor = default_extractor()?;
            let report = evaluate_table(&results, &reference, &set, extractor.as_ref(), &model)?;
            match format {
                Format::Csv => print!("{}", report.to_csv()),
                Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Bounds { ckpt, format } => {
            let reports = recompute_reports(&ckpt.ckpt)?;
            let rows: Vec<Value> = reports.iter().map(serde_json::to_value).collect::<std::result::Result<_, _>>()?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
                Format::Csv => print!("{}", json_rows_to_csv(&rows)),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
