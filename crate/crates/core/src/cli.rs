//! Command-line surface.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, CommandFactory, Parser, Subcommand};

use crate::analysis::{
    self, avg_attention_distance, cka_layer_matrix, gate_statistics, write_grid, ActivationDump, Stream,
};
use crate::check::{gradcheck_model, GradcheckOptions};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, Pooling};
use crate::data::{generate_corpus, load_corpus, save_corpus};
use crate::error::{Error, Result};
use crate::eval::eval_itm;
use crate::params::ParamStore;
use crate::tensor::Stencil;
use crate::train::train_loop;

pub const CONFIG_ENV: &str = "VLBRIDGE_CONFIG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "vlbridge",
    version,
    about = "Gated-bridge vision-language pre-training at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file (flat `key = value` lines); defaults to the toy preset.
    #[arg(long, env = CONFIG_ENV, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random draw; overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a single configuration key, e.g. `--set topology=last-only`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic image-caption corpus directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of records; defaults to `corpus_size`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pre-train on a corpus, writing metrics, gate telemetry, and checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Corpus directory.
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        /// Run directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Continue from a checkpoint; its stored configuration is used.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Image-text matching accuracy and recall@1 on a held-out corpus.
    EvalItm {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Held-out corpus directory.
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        /// Also write the JSON result here.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Balanced evaluation items; defaults to `eval_size`.
        #[arg(long)]
        items: Option<usize>,
        /// Captions ranked against 8 candidate images.
        #[arg(long, default_value_t = 100)]
        recall_queries: usize,
    },
    /// Record per-layer activations, attention maps, and gates.
    DumpActivations {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Layer-by-layer linear CKA grid from an activation dump.
    #[command(group(ArgGroup::new("which").required(true).args(["self_stream", "pair"])))]
    Cka {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in", value_name = "DUMP")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// One stream against itself: text, visual, fusion-text, fusion-visual.
        #[arg(long = "self", value_name = "STREAM")]
        self_stream: Option<String>,
        /// Two streams, rows then columns.
        #[arg(long, num_args = 2, value_names = ["ROWS", "COLS"])]
        pair: Option<Vec<String>>,
        /// Per-example reduction: first or mean.
        #[arg(long, default_value = "first")]
        pooling: String,
    },
    /// Averaged self-attention distance per layer and head.
    AttnDistance {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in", value_name = "DUMP")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value = "text")]
        stream: String,
    },
    /// Gate mean/min/max/histogram per bridge over an activation dump.
    GateStats {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in", value_name = "DUMP")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Compare the joint-loss gradient with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 50)]
        coords: usize,
        #[arg(long, default_value_t = 2e-3)]
        eps: f64,
        /// Use the two-point stencil instead of the fourth-order one.
        #[arg(long)]
        two_point: bool,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let mut config = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::toy(),
    };
    apply_overrides(&mut config, c)?;
    Ok(config)
}

fn apply_overrides(config: &mut Config, c: &Common) -> Result<()> {
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        config.model.seed = s;
    }
    config.validate()
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str, force: bool) -> Result<()> {
    refuse_existing(path, force)?;
    fs::write(path, text)?;
    Ok(())
}

fn pooling(s: &str) -> Result<Pooling> {
    s.parse()
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData { common, out, count } => {
            let config = load_config(&common)?;
            let n = count.unwrap_or(config.train.corpus_size);
            let corpus = generate_corpus(n, &config.model, config.model.seed)?;
            save_corpus(&corpus, &out, common.force)?;
            println!("wrote {n} records to {}", out.display());
        }
        Command::Pretrain {
            common,
            input,
            out,
            resume,
        } => {
            let (config, ck) = match resume {
                Some(p) => {
                    let ck = Checkpoint::load(&p)?;
                    (ck.config.clone(), Some(ck))
                }
                None => (load_config(&common)?, None),
            };
            let corpus = load_corpus(&input, config.model.max_text_len)?;
            let run = train_loop(config, &corpus, &out, ck, common.force)?;
            if let Some(last) = run.records.last() {
                println!(
                    "step {} loss {:.6} mlm {:.6} itm {:.6}",
                    last.step, last.loss, last.mlm, last.itm
                );
            }
            println!("final checkpoint {}", run.final_checkpoint.display());
        }
        Command::EvalItm {
            common,
            checkpoint,
            input,
            out,
            items,
            recall_queries,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut config = ck.config.clone();
            apply_overrides(&mut config, &common)?;
            if let Some(o) = &out {
                refuse_existing(o, common.force)?;
            }
            let corpus = load_corpus(&input, config.model.max_text_len)?;
            let n = items.unwrap_or(config.train.eval_size);
            let r = eval_itm(&ck.params, &config.model, &corpus, config.model.seed, n, recall_queries)?;
            let json = serde_json::to_string(&r)?;
            println!("{json}");
            if let Some(o) = out {
                write_text(&o, &format!("{json}\n"), common.force)?;
            }
        }
        Command::DumpActivations {
            common,
            checkpoint,
            input,
            out,
            count,
        } => {
            refuse_existing(&out, common.force)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let corpus = load_corpus(&input, ck.config.model.max_text_len)?;
            let label = format!("{} (step {})", checkpoint.display(), ck.step);
            let dump = analysis::dump_activations(&ck.params, &ck.config.model, &corpus, count, &label)?;
            dump.save(&out, common.force)?;
            println!("dumped {count} examples to {}", out.display());
        }
        Command::Cka {
            common,
            input,
            out,
            self_stream,
            pair,
            pooling: pool,
        } => {
            refuse_existing(&out, common.force)?;
            let dump = ActivationDump::load(&input)?;
            let pool = pooling(&pool)?;
            let grid = match (self_stream, pair) {
                (Some(s), _) => {
                    let f = dump.layer_features(s.parse::<Stream>()?, pool)?;
                    cka_layer_matrix(&f, &f)?
                }
                (None, Some(p)) => {
                    let a = dump.layer_features(p[0].parse::<Stream>()?, pool)?;
                    let b = dump.layer_features(p[1].parse::<Stream>()?, pool)?;
                    cka_layer_matrix(&a, &b)?
                }
                (None, None) => unreachable!("clap requires one selector"),
            };
            write_grid(&out, &grid, common.force)?;
            println!(
                "wrote {}x{} grid to {}",
                grid.len(),
                grid.first().map_or(0, Vec::len),
                out.display()
            );
        }
        Command::AttnDistance {
            common,
            input,
            out,
            stream,
        } => {
            refuse_existing(&out, common.force)?;
            let dump = ActivationDump::load(&input)?;
            let stream: Stream = stream.parse()?;
            let (q, k) = dump.positions(stream);
            let mut grid: Vec<Vec<f64>> = Vec::new();
            for e in 0..dump.len() {
                for (l, probs) in dump.self_attention(e, stream)?.iter().enumerate() {
                    let d = avg_attention_distance(probs, &q, &k)?;
                    if grid.len() <= l {
                        grid.push(vec![0.0; d.len()]);
                    }
                    for (acc, v) in grid[l].iter_mut().zip(d) {
                        *acc += v / dump.len() as f64;
                    }
                }
            }
            write_grid(&out, &grid, common.force)?;
            println!("wrote {} layers of per-head distances to {}", grid.len(), out.display());
        }
        Command::GateStats { common, input, out } => {
            refuse_existing(&out, common.force)?;
            let dump = ActivationDump::load(&input)?;
            let stats = gate_statistics(dump.examples.iter().map(|e| &e.fusion));
            let mut text = String::new();
            for s in &stats {
                text.push_str(&serde_json::to_string(s)?);
                text.push('\n');
            }
            write_text(&out, &text, common.force)?;
            println!("wrote {} gate summaries to {}", stats.len(), out.display());
        }
        Command::Gradcheck {
            common,
            coords,
            eps,
            two_point,
            tolerance,
        } => {
            let config = load_config(&common)?;
            let params = ParamStore::init(&config.model, config.model.seed);
            let opts = GradcheckOptions {
                coords,
                eps,
                stencil: if two_point {
                    Stencil::TwoPoint
                } else {
                    Stencil::FourPoint
                },
                ..GradcheckOptions::default()
            };
            let entries = gradcheck_model(&config, &params, opts)?;
            let mut worst: f64 = 0.0;
            for e in &entries {
                println!(
                    "{:<48} {:>4} coords  max rel err {:.3e}",
                    e.name, e.checked, e.max_rel_error
                );
                worst = worst.max(e.max_rel_error);
            }
            let pass = worst < tolerance;
            println!(
                "{} tensors, worst {:.3e} vs tolerance {:.1e}: {}",
                entries.len(),
                worst,
                tolerance,
                if pass { "PASS" } else { "FAIL" }
            );
            if !pass {
                return Ok(EXIT_RUNTIME);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Valid subcommands, or the valid flags of the subcommand named in `args`.
fn valid_set(args: &[OsString]) -> String {
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_string()).collect();
    let chosen = args
        .iter()
        .skip(1)
        .filter_map(|a| a.to_str())
        .find(|a| names.iter().any(|n| n == a));
    match chosen.and_then(|n| cmd.find_subcommand_mut(n)) {
        Some(sub) => {
            let flags: Vec<String> = sub
                .get_arguments()
                .filter_map(|a| a.get_long().map(|l| format!("--{l}")))
                .collect();
            format!("valid flags for {}: {}", sub.get_name(), flags.join(", "))
        }
        None => format!("valid subcommands: {}", names.join(", ")),
    }
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return EXIT_OK;
            }
            eprintln!("\n{}", valid_set(&args));
            return EXIT_USAGE;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
