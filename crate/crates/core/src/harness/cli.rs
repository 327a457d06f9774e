//! Command-line front end. Exit codes: 0 success, 1 usage error (including an
//! unreadable or invalid config file), 2 runtime failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{synth_generate, write_csv, SynthKind, SynthParams};
use crate::error::Error;
use crate::graphspec::{
    build_fsca_class_spec, build_fsca_forecast_spec, build_vca_spec, compute_edge_weights, fine_edge_weights,
    format_coarse_edges, format_fine_edges, format_matrix, normalize_adjacency,
};
use crate::harness::ablation::{run_ablation, AblationPlan, PlanVariant};
use crate::harness::checkpoint::atomic_write;
use crate::harness::config::RunConfig;
use crate::harness::train::{build_dataset, load_model, run_training, test_report, RunOptions};
use crate::numerics::Tensor;
use crate::tsembed::SequenceLayout;

#[derive(Parser, Debug)]
#[command(name = "ctxalign", version, about = "Dual-scale context alignment for time-series forecasting and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and evaluate it on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "ctxalign-run")]
        out_dir: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Echo per-epoch log lines to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate saved weights on the test split of the configured data, which
    /// may differ from the training data (zero-shot transfer).
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train each ablation variant for each seed and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated: full, no_dsca, random_adjacency, no_coarse,
        /// layer_sweep, insertion_sweep, parts_sweep.
        #[arg(long, value_delimiter = ',', default_value = "full,random_adjacency,no_coarse")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the graphs built for a layout.
    GraphDump {
        #[arg(long, value_enum)]
        mode: GraphMode,
        /// Patches per part (fsca), e.g. `4,4`.
        #[arg(long, value_delimiter = ',')]
        parts: Vec<usize>,
        /// Patches per series (vca, fsca-class).
        #[arg(long)]
        patches: Option<usize>,
        /// Demonstration examples (fsca-class).
        #[arg(long, default_value_t = 1)]
        examples: usize,
        #[arg(long)]
        prompt_len: usize,
        /// Keep only edges into the first and out of the last prompt token.
        #[arg(long)]
        pruned: bool,
        /// Draw node embeddings at random instead of using identical ones.
        #[arg(long)]
        random_embeddings: bool,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write each section to its own file here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate a synthetic series as CSV.
    Synth {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        length: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GraphMode {
    Vca,
    Fsca,
    FscaClass,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn load_config(path: &Path, seed: Option<u64>) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn write_out(out: &mut dyn Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::Runtime(Error::io("<stdout>", e)))
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = if code == 0 {
                write!(stdout, "{e}")
            } else {
                write!(stderr, "{e}")
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Train {
            config,
            seed,
            out_dir,
            resume,
            verbose,
        } => {
            let cfg = load_config(&config, seed)?;
            let opts = RunOptions {
                out_dir: Some(out_dir.clone()),
                resume,
                epoch_limit: None,
                verbose,
            };
            let run = run_training(&cfg, &opts)?;
            write_out(
                stdout,
                &format!(
                    "trained {} epochs (best {}, lr0 {:e}); report written to {}\n",
                    run.report.epochs_run,
                    run.report.best_epoch,
                    run.report.lr0,
                    out_dir.join("report.json").display()
                ),
            )
        }
        Command::Eval {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let model = load_model(&cfg, &checkpoint)?;
            let data = build_dataset(&cfg)?;
            let (report, _) = test_report(&model, &data, &cfg)?;
            let json = report.to_json()?;
            match out {
                Some(p) => atomic_write(&p, json.as_bytes())?,
                None => write_out(stdout, &format!("{json}\n"))?,
            }
            Ok(())
        }
        Command::Ablate {
            config,
            variants,
            seeds,
            out,
        } => {
            let cfg = load_config(&config, None)?;
            let variants = variants
                .iter()
                .map(|v| v.parse::<PlanVariant>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let plan = AblationPlan {
                variants,
                seeds,
                ..AblationPlan::default()
            };
            let report = run_ablation(&plan, &cfg, |name, o| {
                let _ = match (&o.test_metric, &o.error) {
                    (Some(m), _) => writeln!(stderr, "{name} seed {}: {m:.6}", o.seed),
                    (None, Some(e)) => writeln!(stderr, "{name} seed {}: failed: {e}", o.seed),
                    _ => Ok(()),
                };
            })?;
            let json = report.to_json()?;
            match out {
                Some(p) => atomic_write(&p, json.as_bytes())?,
                None => write_out(stdout, &format!("{json}\n"))?,
            }
            Ok(())
        }
        Command::GraphDump {
            mode,
            parts,
            patches,
            examples,
            prompt_len,
            pruned,
            random_embeddings,
            width,
            seed,
            out_dir,
        } => graph_dump(
            mode,
            &parts,
            patches,
            examples,
            prompt_len,
            pruned,
            random_embeddings,
            width,
            seed,
            out_dir.as_deref(),
            stdout,
        ),
        Command::Synth {
            kind,
            seed,
            length,
            channels,
            noise,
            out,
        } => {
            let kind: SynthKind = kind.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            let params = SynthParams {
                channels,
                noise,
                ..SynthParams::default()
            };
            let series = synth_generate(kind, length, seed, &params)?;
            let mut buf = Vec::new();
            write_csv(&series, &mut buf)?;
            match out {
                Some(p) => atomic_write(&p, &buf)?,
                None => stdout
                    .write_all(&buf)
                    .map_err(|e| Failure::Runtime(Error::io("<stdout>", e)))?,
            }
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn graph_dump(
    mode: GraphMode,
    parts: &[usize],
    patches: Option<usize>,
    examples: usize,
    prompt_len: usize,
    pruned: bool,
    random_embeddings: bool,
    width: usize,
    seed: u64,
    out_dir: Option<&Path>,
    stdout: &mut dyn Write,
) -> CliResult {
    let usage = |e: Error| Failure::Usage(e.to_string());
    let (layout, spec) = match mode {
        GraphMode::Vca => {
            let n = patches
                .or_else(|| (!parts.is_empty()).then(|| parts.iter().sum()))
                .ok_or_else(|| Failure::Usage("vca needs --patches".into()))?;
            let layout = SequenceLayout::vca(n, prompt_len).map_err(usage)?;
            let spec = build_vca_spec(&layout).map_err(usage)?;
            (layout, spec)
        }
        GraphMode::Fsca => {
            if parts.is_empty() {
                return Err(Failure::Usage("fsca needs --parts".into()));
            }
            let layout = SequenceLayout::few_shot_forecast(parts, parts.iter().sum(), prompt_len).map_err(usage)?;
            let spec = build_fsca_forecast_spec(&layout, pruned).map_err(usage)?;
            (layout, spec)
        }
        GraphMode::FscaClass => {
            let n = patches.ok_or_else(|| Failure::Usage("fsca-class needs --patches".into()))?;
            let layout = SequenceLayout::few_shot_class(examples, n, prompt_len).map_err(usage)?;
            let spec = build_fsca_class_spec(&layout).map_err(usage)?;
            (layout, spec)
        }
    };
    if width == 0 {
        return Err(Failure::Usage("--width must be >= 1".into()));
    }
    let l = layout.total_len();
    let nodes = if random_embeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[l, width], 1.0, &mut rng)
    } else {
        Tensor::filled(&[l, width], 1.0)
    };
    let weights = fine_edge_weights(&spec, &nodes);
    let (fine_adj, coarse_adj) = compute_edge_weights(&spec, &nodes)?;
    let sections = [
        ("fine_edges", spec.fine_edges().len(), format_fine_edges(&spec, &weights)),
        ("coarse_edges", spec.coarse_edges().len(), format_coarse_edges(&spec)),
        ("fine_adjacency", l, format_matrix(&normalize_adjacency(&fine_adj)?)),
        ("coarse_adjacency", spec.coarse_nodes(), format_matrix(&normalize_adjacency(&coarse_adj)?)),
        ("gamma", spec.coarse_nodes(), format_matrix(spec.gamma())),
    ];
    let mut text = format!(
        "# layout {} fine_nodes {} coarse_nodes {}\n",
        layout.mode_name(),
        l,
        spec.coarse_nodes()
    );
    for (name, count, body) in &sections {
        text.push_str(&format!("# {name} {count}\n{body}"));
        if !body.ends_with('\n') {
            text.push('\n');
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))?;
            atomic_write(&dir.join(format!("{name}.txt")), body.as_bytes())?;
        }
    }
    write_out(stdout, &text)
}
