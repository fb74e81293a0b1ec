//! Command-line surface: pretrain the frozen model, train/evaluate any PEFT
//! method, run comparison and ablation protocols, gradient-check the stack
//! and export attention maps.
//!
//! Exit codes: 0 success, 1 I/O, 2 usage, 3 numeric abort, 4 verification
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sktune::cli::{self, AttnArgs, CompareArgs, DataSource, ParamsArgs, PretrainArgs, TrainArgs};
use sktune::error::Error;
use sktune::model::ModelConfig;

#[derive(Parser)]
#[command(name = "sktune", version, about = "Semantic-knowledge prompt/prefix tuning on a frozen desk-scale transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelShape {
    /// Model width.
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    /// Transformer block count.
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Attention head count.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Feed-forward width.
    #[arg(long, default_value_t = 64)]
    dffn: usize,
    /// Vocabulary budget.
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    /// Longest supported sequence.
    #[arg(long, default_value_t = 64)]
    max_seq: usize,
}

impl ModelShape {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.layers,
            n_heads: self.heads,
            d_ffn: self.dffn,
            max_seq: self.max_seq,
            ln_eps: 1e-5,
            seed: 42,
        }
    }
}

#[derive(Args, Clone)]
struct DataFlags {
    /// JSONL dataset path.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Generate N synthetic examples instead of reading a file.
    #[arg(long)]
    synthetic: Option<usize>,
}

impl DataFlags {
    fn source(&self) -> Result<DataSource, Error> {
        match (&self.data, self.synthetic) {
            (Some(path), None) => Ok(DataSource::Jsonl(path.clone())),
            (None, Some(n)) => Ok(DataSource::Synthetic(n)),
            _ => Err(Error::Usage("pass exactly one of --data PATH or --synthetic N".to_string())),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the frozen model on the bundled synthetic language.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[command(flatten)]
        shape: ModelShape,
    },
    /// Train one PEFT method and emit adapter.json, run.csv, summary.json.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        task: String,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_virtual: usize,
        #[arg(long, default_value_t = 4)]
        bottleneck: usize,
        #[arg(long, default_value_t = 1)]
        adapter_layers: usize,
    },
    /// Train several methods over a seed set; emit compare.csv and the
    /// median-aggregated summary.json.
    Compare {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: String,
        /// Comma-separated method list.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long)]
        prompt: Option<String>,
        /// Sweep the six bundled prompt texts for the SK methods.
        #[arg(long, default_value_t = false)]
        prompt_ablation: bool,
        /// Comma-separated adapter depths to sweep for sk-prompt.
        #[arg(long, value_delimiter = ',')]
        adapter_layers: Vec<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_virtual: usize,
        #[arg(long, default_value_t = 4)]
        bottleneck: usize,
    },
    /// Finite-difference check of every primitive and both SK losses.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
    },
    /// Export one (layer, head) attention map for a prompt/input pair.
    Attn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        input: String,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print trainable-parameter accounting for a method.
    Params {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "seqcls")]
        task: String,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 20)]
        n_virtual: usize,
        #[arg(long, default_value_t = 4)]
        bottleneck: usize,
        #[arg(long, default_value_t = 1)]
        adapter_layers: usize,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) => 1,
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn run() -> Result<u8, Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain { out, seed, steps, lr, shape } => {
            let args = PretrainArgs {
                out,
                seed,
                steps,
                lr,
                config: shape.config(),
                ..PretrainArgs::default()
            };
            let held_out = cli::cmd_pretrain(&args)?;
            println!("wrote {} (held-out lm loss {:.4})", args.out.display(), held_out);
            Ok(0)
        }
        Command::Train {
            model,
            method,
            task,
            data,
            prompt,
            lr,
            epochs,
            batch,
            seed,
            threshold,
            out,
            n_virtual,
            bottleneck,
            adapter_layers,
        } => {
            let args = TrainArgs {
                model,
                method,
                task,
                source: data.source()?,
                prompt,
                lr,
                epochs,
                batch,
                seed,
                threshold,
                out,
                n_virtual,
                bottleneck,
                adapter_layers,
            };
            let run = cli::cmd_train(&args)?;
            println!(
                "{:<12} {:>10} {:>12} {:>10} {:>10}",
                "method", "params", "params-%", "acc-%", "f1-%"
            );
            println!("{}", cli::format_table_row(&run));
            println!("({} steps in {:.2}s)", run.losses.len(), run.wall_seconds);
            Ok(0)
        }
        Command::Compare {
            model,
            task,
            methods,
            data,
            prompt,
            prompt_ablation,
            adapter_layers,
            lr,
            epochs,
            batch,
            seeds,
            threshold,
            out,
            n_virtual,
            bottleneck,
        } => {
            if methods.is_empty() {
                return Err(Error::Usage("--methods must list at least one method".to_string()));
            }
            let args = CompareArgs {
                model,
                task,
                methods,
                source: data.source()?,
                prompt,
                prompt_ablation,
                adapter_layers,
                lr,
                epochs,
                batch,
                seeds,
                threshold,
                out: out.clone(),
                n_virtual,
                bottleneck,
            };
            let rows = cli::cmd_compare(&args)?;
            println!("wrote {} rows to {}", rows.len(), out.join("compare.csv").display());
            Ok(0)
        }
        Command::Gradcheck { eps } => {
            let report = cli::cmd_gradcheck(eps)?;
            for entry in &report.entries {
                println!("{:<16} max rel err {:.3e}", entry.name, entry.max_rel_err);
            }
            if report.passed(1e-4) {
                println!("gradcheck passed (worst {:.3e} < 1e-4)", report.worst());
                Ok(0)
            } else {
                let worst = report
                    .entries
                    .iter()
                    .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
                    .expect("non-empty report");
                eprintln!("gradcheck FAILED at {} ({:.3e})", worst.name, worst.max_rel_err);
                Ok(4)
            }
        }
        Command::Attn { model, prompt, input, layer, head, out } => {
            let args = AttnArgs { model, prompt, input, layer, head, out: out.clone() };
            cli::cmd_attn(&args)?;
            println!("wrote {}", out.join("attn.csv").display());
            Ok(0)
        }
        Command::Params { model, method, task, prompt, n_virtual, bottleneck, adapter_layers } => {
            let args = ParamsArgs { model, method, task, prompt, n_virtual, bottleneck, adapter_layers };
            let (count, pct, breakdown) = cli::cmd_params(&args)?;
            for (name, len) in &breakdown {
                println!("{:<20} {:>8}", name, len);
            }
            println!("{:<20} {:>8}  ({:.5}%)", "total", count, pct);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(exit_code_for(&err))
        }
    }
}
