use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualform::config::{Mode, RunConfig};
use dualform::pipeline::{
    attribute_run, estimate_trace_bytes, read_image_file, report_run, table1, train_run, verify_run, AttributeInput,
    Attribution, TrainOptions,
};
use dualform::recorder::Dtype;
use dualform::{Error, Result};

/// Train small networks while recording every linear layer's key/value
/// trace, then check and explore the attention (dual) form of the weights.
#[derive(Parser, Debug)]
#[command(name = "dualform", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run per seed, recording traces and a checkpoint.
    Train(TrainArgs),
    /// Compare primal and dual outputs on held-out probes.
    Verify {
        run_dir: PathBuf,
        /// Number of held-out probe inputs.
        #[arg(long, default_value_t = 100)]
        probes: usize,
        /// Seed of the probe selection.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attribute one input to the training examples it attends to.
    Attribute(AttributeArgs),
    /// Target/output agreement of per-class attention across seed runs.
    Table1 {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long, default_value = "table1")]
        out: PathBuf,
        /// Weight every slot's score by the norm of its value.
        #[arg(long)]
        weight_by_value_norm: bool,
    },
    /// Add run-level analyses and write a checksummed manifest.
    Report { run_dir: PathBuf },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// key = value configuration file.
    #[arg(long, required_unless_present = "mode")]
    config: Option<PathBuf>,
    /// Start from the built-in defaults of a mode instead of a file.
    #[arg(long, conflicts_with = "config")]
    mode: Option<Mode>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Parent directory of the run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train only this seed (overrides the configured list).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dtype: Option<Dtype>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Allow word-level runs whose traces need tens of gigabytes.
    #[arg(long)]
    allow_large_trace: bool,
}

#[derive(Args, Debug)]
struct AttributeArgs {
    run_dir: PathBuf,
    /// Image file: 784 raw bytes, or 784 numbers in [0, 1].
    #[arg(long, group = "input")]
    image: Option<PathBuf>,
    /// A test example as TASK:INDEX (task 0 = MNIST, 1 = Fashion-MNIST).
    #[arg(long, group = "input")]
    sample: Option<String>,
    /// Text prompt for language-model runs.
    #[arg(long, group = "input")]
    prompt: Option<String>,
    /// Slots kept per class (images) or contexts reported (text).
    #[arg(long, default_value_t = 500)]
    topk: usize,
    #[arg(long)]
    weight_by_value_norm: bool,
    /// Output directory; defaults to `<run_dir>/attribution`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&args.config, args.mode) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(mode)) => RunConfig::defaults(mode),
        (None, None) => return Err(Error::Config("give --config or --mode".into())),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(d) = &args.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(d) = args.dtype {
        cfg.dtype = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_sample(s: &str) -> Result<AttributeInput> {
    let bad = || Error::Config(format!("--sample expects TASK:INDEX, got {s:?}"));
    let (t, i) = s.split_once(':').ok_or_else(bad)?;
    Ok(AttributeInput::TestSample {
        task: t.parse().map_err(|_| bad())?,
        index: i.parse().map_err(|_| bad())?,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            println!(
                "estimated trace size per seed: {} bytes ({:.2} GB)",
                estimate_trace_bytes(&cfg),
                estimate_trace_bytes(&cfg) as f64 / 1e9
            );
            let opts = TrainOptions {
                allow_large_trace: args.allow_large_trace,
            };
            for &seed in &cfg.seeds {
                let summary = train_run(&cfg, seed, opts, &mut |line| eprintln!("{line}"))?;
                print!("{}: {} slots", summary.run_dir.display(), summary.slots);
                for (k, v) in &summary.metrics {
                    print!(", {k} {v:.4}");
                }
                println!();
            }
        }
        Command::Verify { run_dir, probes, seed } => {
            let outcome = verify_run(&run_dir, probes, seed);
            // The report is written before tolerances are checked, so show it either way.
            if let Ok(text) = std::fs::read_to_string(run_dir.join(dualform::pipeline::DUALITY_FILE)) {
                print!("{text}");
            }
            outcome?;
            println!("dual form verified");
        }
        Command::Attribute(args) => {
            let input = match (&args.image, &args.sample, &args.prompt) {
                (Some(p), _, _) => AttributeInput::Image {
                    pixels: read_image_file(p)?,
                    label: None,
                },
                (_, Some(s), _) => parse_sample(s)?,
                (_, _, Some(text)) => AttributeInput::Prompt(text.clone()),
                _ => return Err(Error::Config("give one of --image, --sample or --prompt".into())),
            };
            let out = args.out.unwrap_or_else(|| args.run_dir.join("attribution"));
            match attribute_run(&args.run_dir, &input, args.topk, args.weight_by_value_norm, &out)? {
                Attribution::Image(a) => {
                    println!("prediction {} (label {:?})", a.prediction, a.label);
                    for (layer, (task, class)) in a.argmax.iter().enumerate() {
                        println!("layer {layer}: strongest attention to task {task} class {class}");
                    }
                }
                Attribution::Text(hits) => {
                    for (i, h) in hits.iter().enumerate() {
                        println!("#{} @{} {:.4e}  {}", i + 1, h.position, h.score, h.window.replace('\n', " "));
                    }
                }
            }
            println!("wrote {}", out.display());
        }
        Command::Table1 {
            run_dirs,
            out,
            weight_by_value_norm,
        } => {
            let table = table1(&run_dirs, weight_by_value_norm, &out)?;
            print!("{}", table.to_text());
        }
        Command::Report { run_dir } => {
            let entries = report_run(&run_dir)?;
            println!("{} files listed in {}", entries.len(), run_dir.join("manifest.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
