//! Command implementations behind the `sktune` binary. Each command is a
//! plain function over typed arguments so tests drive them directly; every
//! artifact a command emits is byte-deterministic under a fixed seed.

use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::data::{self, Example, TaskKind, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{self, RunSummary};
use crate::model::{pretrain, FrozenModel, ModelConfig};
use crate::peft::{MethodSpec, PeftMethod};
use crate::train::{self, Hyperparams, TrainRun};
use crate::verify;

/// Best-performing bundled prompt text; used where a prompt is optional.
pub const DEFAULT_PROMPT: &str = "Classify the positive or negative sentiment of the text:";

/// The six bundled prompt/prefix texts for the prompt-effect ablation.
pub fn ablation_prompts() -> Vec<&'static str> {
    include_str!("../data/prompt_ablation.txt")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .collect()
}

/// Seed resolution: explicit flag, then SKTUNE_SEED, then 42.
pub fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| std::env::var("SKTUNE_SEED").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(42)
}

/// A frozen model plus the vocabulary it was pretrained with.
pub struct ModelBundle {
    pub model: FrozenModel,
    pub vocab: Vocab,
}

pub fn save_model_bundle(path: &Path, model: &FrozenModel, vocab: &Vocab) -> Result<()> {
    let vocab_json = serde_json::to_string(vocab.tokens()).expect("vocab serializes");
    let text = checkpoint::write_doc(
        &[("config", model.config_json()), ("vocab", vocab_json)],
        &model.params_data(),
    );
    checkpoint::write_file(path, &text)
}

pub fn load_model_bundle(path: &Path) -> Result<ModelBundle> {
    let doc = checkpoint::read_file(path)?;
    let model = FrozenModel::from_doc(&doc)?;
    let tokens: Vec<String> = serde_json::from_value(
        doc.meta
            .get("vocab")
            .cloned()
            .ok_or_else(|| Error::Usage("checkpoint has no vocab".into()))?,
    )
    .map_err(|e| Error::Usage(format!("bad vocab in checkpoint: {}", e)))?;
    Ok(ModelBundle { model, vocab: Vocab::from_tokens(tokens) })
}

#[derive(Debug, Clone)]
pub struct PretrainArgs {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub steps: usize,
    pub lr: f64,
    pub config: ModelConfig,
    pub corpus_seqs: usize,
    pub corpus_len: usize,
}

impl Default for PretrainArgs {
    fn default() -> Self {
        PretrainArgs {
            out: PathBuf::from("model.json"),
            seed: None,
            steps: 500,
            lr: 1e-3,
            config: ModelConfig::reference(),
            corpus_seqs: 80,
            corpus_len: 24,
        }
    }
}

/// Pretrain on the seeded synthetic language and write the model checkpoint.
/// Returns the held-out LM loss (printed by the binary).
pub fn cmd_pretrain(args: &PretrainArgs) -> Result<f64> {
    let mut config = args.config.clone();
    config.seed = resolve_seed(args.seed);
    let vocab = Vocab::desk();
    if vocab.size() > config.vocab_size {
        return Err(Error::Usage(format!(
            "vocab needs {} entries but the model allows {}",
            vocab.size(),
            config.vocab_size
        )));
    }
    let corpus =
        data::synthetic_lm_corpus(config.vocab_size, args.corpus_seqs, args.corpus_len, config.seed);
    let model = pretrain(&config, &corpus, args.steps, args.lr)?;
    let held_out = &corpus[corpus.len() - (corpus.len() / 10).max(1)..];
    let loss = model.lm_loss(held_out)?;
    save_model_bundle(&args.out, &model, &vocab)?;
    Ok(loss)
}

#[derive(Debug, Clone)]
pub enum DataSource {
    Jsonl(PathBuf),
    Synthetic(usize),
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub model: PathBuf,
    pub method: String,
    pub task: String,
    pub source: DataSource,
    pub prompt: Option<String>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: usize,
    pub seed: Option<u64>,
    pub threshold: f64,
    pub out: PathBuf,
    pub n_virtual: usize,
    pub bottleneck: usize,
    pub adapter_layers: usize,
}

impl TrainArgs {
    pub fn new(model: PathBuf, method: &str, task: &str, source: DataSource, out: PathBuf) -> Self {
        TrainArgs {
            model,
            method: method.to_string(),
            task: task.to_string(),
            source,
            prompt: None,
            lr: None,
            epochs: None,
            batch: 16,
            seed: None,
            threshold: 0.2,
            out,
            n_virtual: 20,
            bottleneck: 4,
            adapter_layers: 1,
        }
    }
}

/// Fixed seeds for dataset generation and splitting, shared by every run so
/// methods are compared on identical data.
const DATA_SEED: u64 = 777;
const SPLIT_SEED: u64 = 778;

fn load_dataset(
    source: &DataSource,
    task: TaskKind,
    vocab: &Vocab,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let all = match source {
        DataSource::Jsonl(path) => data::load_jsonl(path, task, vocab)?,
        DataSource::Synthetic(n) => data::gen_synthetic(task, *n, DATA_SEED, vocab),
    };
    if all.is_empty() {
        return Err(Error::Empty);
    }
    let (train_set, _val, test) = data::split(&all, (0.7, 0.1, 0.2), SPLIT_SEED)?;
    if test.is_empty() {
        Ok((all.clone(), all))
    } else {
        Ok((train_set, test))
    }
}

fn spec_from_args(args: &TrainArgs) -> Result<MethodSpec> {
    let mut spec = MethodSpec::parse(&args.method)?;
    spec.n_virtual = args.n_virtual;
    spec.bottleneck = args.bottleneck;
    spec.adapter_layers = args.adapter_layers;
    Ok(spec)
}

fn prompt_ids_for(spec: &MethodSpec, prompt: &Option<String>, vocab: &Vocab) -> Result<Vec<usize>> {
    if spec.needs_prompt() {
        match prompt {
            Some(text) => Ok(vocab.tokenize(text)),
            None => Err(Error::Usage(format!(
                "method {} requires --prompt TEXT",
                spec.label()
            ))),
        }
    } else {
        if prompt.is_some() {
            return Err(Error::Usage(format!(
                "--prompt is only meaningful for sk-prompt/sk-prefix, not {}",
                spec.label()
            )));
        }
        Ok(Vec::new())
    }
}

/// Train one method; writes `adapter.json`, `run.csv` and `summary.json`
/// under the output directory and returns the run for printing.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainRun> {
    let bundle = load_model_bundle(&args.model)?;
    let task = TaskKind::parse(&args.task)?;
    let spec = spec_from_args(args)?;
    let prompt_ids = prompt_ids_for(&spec, &args.prompt, &bundle.vocab)?;
    let (train_set, eval_set) = load_dataset(&args.source, task, &bundle.vocab)?;
    let seed = resolve_seed(args.seed);
    let method = PeftMethod::build(&bundle.model, &spec, task, &prompt_ids, seed)?;
    let hp = Hyperparams {
        lr: args.lr.unwrap_or_else(|| train::default_lr(task)),
        epochs: args.epochs.unwrap_or_else(|| train::default_epochs(task)),
        batch_size: args.batch,
        seed,
        loss_threshold: args.threshold,
        ..Hyperparams::default()
    };
    let run = train::train(&bundle.model, &method, &train_set, Some(&eval_set), &hp)?;
    std::fs::create_dir_all(&args.out)?;
    checkpoint::write_file(&args.out.join("adapter.json"), &method.adapter_json())?;
    metrics::emit_run_csv(&run, &args.out.join("run.csv"))?;
    Ok(run)
}

/// One row of the comparison table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CompareRow {
    pub method: String,
    pub seed: u64,
    pub convergence_step: Option<usize>,
    pub accuracy: f64,
    pub f1: f64,
    pub params_pct: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CompareAggregate {
    pub method: String,
    pub median_convergence_step: Option<usize>,
    pub median_accuracy: f64,
    pub median_f1: f64,
    pub params_pct: f64,
    pub trainable_count: usize,
}

#[derive(Debug, Clone)]
pub struct CompareArgs {
    pub model: PathBuf,
    pub task: String,
    pub methods: Vec<String>,
    pub source: DataSource,
    pub prompt: Option<String>,
    pub prompt_ablation: bool,
    pub adapter_layers: Vec<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: usize,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub out: PathBuf,
    pub n_virtual: usize,
    pub bottleneck: usize,
}

impl CompareArgs {
    pub fn new(model: PathBuf, task: &str, methods: &[&str], source: DataSource, out: PathBuf) -> Self {
        CompareArgs {
            model,
            task: task.to_string(),
            methods: methods.iter().map(|m| m.to_string()).collect(),
            source,
            prompt: None,
            prompt_ablation: false,
            adapter_layers: Vec::new(),
            lr: None,
            epochs: None,
            batch: 16,
            seeds: vec![0, 1],
            threshold: 0.2,
            out: out.clone(),
            n_virtual: 20,
            bottleneck: 4,
        }
    }
}

/// Lower-middle median; `None` sorts as never-converged.
fn median_steps(mut values: Vec<Option<usize>>) -> Option<usize> {
    values.sort_by_key(|v| v.unwrap_or(usize::MAX));
    values[(values.len() - 1) / 2]
}

fn median_f64(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    values[(values.len() - 1) / 2]
}

/// Train each method over the seed set on a shared dataset; emit
/// `compare.csv` plus a median-aggregated `summary.json`.
pub fn cmd_compare(args: &CompareArgs) -> Result<Vec<CompareRow>> {
    let bundle = load_model_bundle(&args.model)?;
    let task = TaskKind::parse(&args.task)?;
    let (train_set, eval_set) = load_dataset(&args.source, task, &bundle.vocab)?;
    if args.seeds.is_empty() {
        return Err(Error::Usage("--seeds must list at least one seed".to_string()));
    }

    // Expand the method list: plain methods, per-prompt-text variants, or
    // per-adapter-depth variants.
    let mut variants: Vec<(String, MethodSpec, Vec<usize>)> = Vec::new();
    for name in &args.methods {
        let mut spec = MethodSpec::parse(name)?;
        spec.n_virtual = args.n_virtual;
        spec.bottleneck = args.bottleneck;
        if args.prompt_ablation && spec.needs_prompt() {
            for (i, text) in ablation_prompts().iter().enumerate() {
                let ids = bundle.vocab.tokenize(text);
                variants.push((format!("{}@p{}", spec.label(), i), spec.clone(), ids));
            }
            continue;
        }
        let prompt_text = args.prompt.clone().unwrap_or_else(|| DEFAULT_PROMPT.to_string());
        let ids = if spec.needs_prompt() { bundle.vocab.tokenize(&prompt_text) } else { Vec::new() };
        if !args.adapter_layers.is_empty() && spec.label() == "sk-prompt" {
            for &k in &args.adapter_layers {
                let mut depth_spec = spec.clone();
                depth_spec.adapter_layers = k;
                variants.push((format!("{}@L{}", spec.label(), k), depth_spec, ids.clone()));
            }
            continue;
        }
        variants.push((spec.label(), spec, ids));
    }

    let mut rows: Vec<CompareRow> = Vec::new();
    let mut aggregates: Vec<CompareAggregate> = Vec::new();
    for (label, spec, prompt_ids) in &variants {
        let mut runs: Vec<TrainRun> = Vec::new();
        for &seed in &args.seeds {
            let method = PeftMethod::build(&bundle.model, spec, task, prompt_ids, seed)?;
            let hp = Hyperparams {
                lr: args.lr.unwrap_or_else(|| train::default_lr(task)),
                epochs: args.epochs.unwrap_or_else(|| train::default_epochs(task)),
                batch_size: args.batch,
                seed,
                loss_threshold: args.threshold,
                ..Hyperparams::default()
            };
            let run = train::train(&bundle.model, &method, &train_set, Some(&eval_set), &hp)?;
            rows.push(CompareRow {
                method: label.clone(),
                seed,
                convergence_step: run.convergence_step,
                accuracy: run.metrics.accuracy,
                f1: run.metrics.f1,
                params_pct: run.trainable_pct,
            });
            runs.push(run);
        }
        aggregates.push(CompareAggregate {
            method: label.clone(),
            median_convergence_step: median_steps(runs.iter().map(|r| r.convergence_step).collect()),
            median_accuracy: median_f64(runs.iter().map(|r| r.metrics.accuracy).collect()),
            median_f1: median_f64(runs.iter().map(|r| r.metrics.f1).collect()),
            params_pct: runs[0].trainable_pct,
            trainable_count: runs[0].trainable_count,
        });
    }

    std::fs::create_dir_all(&args.out)?;
    let mut csv = String::from("method,seed,convergence_step,accuracy,f1,params_pct\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.method,
            row.seed,
            row.convergence_step.map(|s| s.to_string()).unwrap_or_default(),
            checkpoint::format_f64(row.accuracy),
            checkpoint::format_f64(row.f1),
            checkpoint::format_f64(row.params_pct),
        ));
    }
    std::fs::write(args.out.join("compare.csv"), csv.as_bytes())?;
    let summary = serde_json::to_string_pretty(&aggregates).expect("aggregate serializes");
    std::fs::write(args.out.join("summary.json"), summary.as_bytes())?;
    Ok(rows)
}

/// Gradient verification over all primitives and both end-to-end losses.
pub fn cmd_gradcheck(eps: f64) -> Result<verify::GradCheckReport> {
    if !(1e-5..=1e-2).contains(&eps) {
        eprintln!(
            "warning: eps {} outside [1e-5, 1e-2]; central differences may be unreliable",
            eps
        );
    }
    verify::run_gradcheck(eps)
}

#[derive(Debug, Clone)]
pub struct AttnArgs {
    pub model: PathBuf,
    pub prompt: String,
    pub input: String,
    pub layer: usize,
    pub head: usize,
    pub out: PathBuf,
}

/// Run an sk-prompt forward with attention capture and export the labeled
/// map of one (layer, head) as `attn.csv`.
pub fn cmd_attn(args: &AttnArgs) -> Result<()> {
    let bundle = load_model_bundle(&args.model)?;
    let prompt_ids = bundle.vocab.tokenize(&args.prompt);
    let input_ids = bundle.vocab.tokenize(&args.input);
    if prompt_ids.is_empty() || input_ids.is_empty() {
        return Err(Error::Usage("--prompt and --input must be non-empty".to_string()));
    }
    let spec = MethodSpec::parse("sk-prompt")?;
    let method = PeftMethod::build(&bundle.model, &spec, TaskKind::Sequence, &prompt_ids, 42)?;
    let tape = crate::tensor::Tape::new();
    let (_, attn) = method.forward_captured(&bundle.model, &tape, &input_ids, true)?;
    let attn = attn.expect("capture requested");
    let labels: Vec<String> = prompt_ids
        .iter()
        .chain(&input_ids)
        .map(|&id| bundle.vocab.token(id).to_string())
        .collect();
    std::fs::create_dir_all(&args.out)?;
    metrics::emit_attention_csv(&attn, args.layer, args.head, &labels, &labels, &args.out.join("attn.csv"))
}

#[derive(Debug, Clone)]
pub struct ParamsArgs {
    pub model: PathBuf,
    pub method: String,
    pub task: String,
    pub prompt: Option<String>,
    pub n_virtual: usize,
    pub bottleneck: usize,
    pub adapter_layers: usize,
}

/// Parameter accounting: total count, percentage and per-tensor breakdown.
pub fn cmd_params(args: &ParamsArgs) -> Result<(usize, f64, Vec<(String, usize)>)> {
    let bundle = load_model_bundle(&args.model)?;
    let task = TaskKind::parse(&args.task)?;
    let mut spec = MethodSpec::parse(&args.method)?;
    spec.n_virtual = args.n_virtual;
    spec.bottleneck = args.bottleneck;
    spec.adapter_layers = args.adapter_layers;
    let prompt_ids = if spec.needs_prompt() {
        let text = args.prompt.clone().unwrap_or_else(|| DEFAULT_PROMPT.to_string());
        bundle.vocab.tokenize(&text)
    } else {
        Vec::new()
    };
    let method = PeftMethod::build(&bundle.model, &spec, task, &prompt_ids, 42)?;
    let breakdown: Vec<(String, usize)> =
        method.trainable().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    Ok((method.trainable_count(), method.params_percentage(&bundle.model), breakdown))
}

/// Console row matching the result tables' column order.
pub fn format_table_row(run: &TrainRun) -> String {
    format!(
        "{:<12} {:>10} {:>12.5} {:>10.2} {:>10.2}",
        run.method,
        run.trainable_count,
        run.trainable_pct,
        run.metrics.accuracy * 100.0,
        run.metrics.f1 * 100.0,
    )
}

/// JSON summary text for a single run (same schema the run CSV sibling uses).
pub fn summary_json(run: &TrainRun) -> String {
    serde_json::to_string_pretty(&RunSummary::of(run)).expect("summary serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pretrained(dir: &Path) -> PathBuf {
        let path = dir.join("model.json");
        let args = PretrainArgs {
            out: path.clone(),
            seed: Some(5),
            steps: 40,
            corpus_seqs: 30,
            corpus_len: 16,
            config: ModelConfig { d_model: 16, n_heads: 2, n_layers: 1, d_ffn: 32, ..ModelConfig::reference() },
            ..PretrainArgs::default()
        };
        cmd_pretrain(&args).unwrap();
        path
    }

    #[test]
    fn pretrain_writes_identical_files_for_identical_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let a = pretrained(dir.path());
        let first = std::fs::read(&a).unwrap();
        let b = pretrained(dir.path());
        let second = std::fs::read(&b).unwrap();
        assert_eq!(first, second);
        let bundle = load_model_bundle(&a).unwrap();
        assert_eq!(bundle.vocab.size(), Vocab::desk().size());
    }

    #[test]
    fn pretrain_zero_steps_writes_seeded_init() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.json");
        let mut config = ModelConfig { d_model: 16, n_heads: 2, n_layers: 1, d_ffn: 32, ..ModelConfig::reference() };
        let args = PretrainArgs { out: path.clone(), seed: Some(5), steps: 0, config: config.clone(), ..PretrainArgs::default() };
        cmd_pretrain(&args).unwrap();
        config.seed = 5;
        let bundle = load_model_bundle(&path).unwrap();
        assert_eq!(bundle.model.theta_json(), FrozenModel::init(&config).unwrap().theta_json());
    }

    #[test]
    fn train_smoke_run_emits_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let model = pretrained(dir.path());
        let out = dir.path().join("run");
        let mut args = TrainArgs::new(model, "sk-prompt", "seqcls", DataSource::Synthetic(48), out.clone());
        args.prompt = Some(DEFAULT_PROMPT.to_string());
        args.epochs = Some(1);
        args.batch = 8;
        args.seed = Some(3);
        let run = cmd_train(&args).unwrap();
        assert!(!run.losses.is_empty());
        assert!(out.join("adapter.json").exists());
        assert!(out.join("run.csv").exists());
        assert!(out.join("summary.json").exists());
        let row = format_table_row(&run);
        assert!(row.contains("sk-prompt"));
    }

    #[test]
    fn train_requires_prompt_for_sk_methods() {
        let dir = tempfile::tempdir().unwrap();
        let model = pretrained(dir.path());
        let args = TrainArgs::new(model, "sk-prompt", "seqcls", DataSource::Synthetic(16), dir.path().join("x"));
        assert!(matches!(cmd_train(&args).unwrap_err(), Error::Usage(_)));
    }

    #[test]
    fn train_rejects_prompt_for_non_sk_methods() {
        let dir = tempfile::tempdir().unwrap();
        let model = pretrained(dir.path());
        let mut args = TrainArgs::new(model, "lora2", "seqcls", DataSource::Synthetic(16), dir.path().join("x"));
        args.prompt = Some("whatever".to_string());
        assert!(matches!(cmd_train(&args).unwrap_err(), Error::Usage(_)));
    }

    #[test]
    fn rerun_with_same_seed_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = pretrained(dir.path());
        let emit = |out: PathBuf| {
            let mut args =
                TrainArgs::new(model.clone(), "prompt", "seqcls", DataSource::Synthetic(32), out.clone());
            args.epochs = Some(1);
            args.batch = 8;
            args.seed = Some(9);
            let run = cmd_train(&args).unwrap();
            std::fs::write(out.join("row.txt"), format_table_row(&run)).unwrap();
            (
                std::fs::read(out.join("run.csv")).unwrap(),
                std::fs::read(out.join("summary.json")).unwrap(),
                std::fs::read(out.join("adapter.json")).unwrap(),
            )
        };
        let a = emit(dir.path().join("a"));
        let b = emit(dir.path().join("b"));
        assert_eq!(a, b);
    }

    #[test]
    fn compare_emits_rows_and_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let model = pretrained(dir.path());
        let out = dir.path().join("cmp");
        let mut args = CompareArgs::new(model, "seqcls", &["sk-prompt", "prompt"], DataSource::Synthetic(32), out.clone());
        args.epochs = Some(1);
        args.batch = 8;
        args.seeds = vec![0, 1];
        let rows = cmd_compare(&args).unwrap();
        assert_eq!(rows.len(), 4);
        let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("method,seed,convergence_step,accuracy,f1,params_pct\n"));
        let agg: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(agg.as_array().unwrap().len(), 2);
    }

    #[test]
    fn compare_adapter_depth_counts_grow() {
        let dir = tempfile::tempdir().unwrap();
        let model = pretrained(dir.path());
        let out = dir.path().join("depth");
        let mut args = CompareArgs::new(model, "seqcls", &["sk-prompt"], DataSource::Synthetic(24), out.clone());
        args.epochs = Some(1);
        args.batch = 8;
        args.seeds = vec![0];
        args.adapter_layers = vec![1, 3, 5];
        cmd_compare(&args).unwrap();
        let agg: Vec<CompareAggregate> = serde_json::from_str(
            &std::fs::read_to_string(out.join("summary.json")).unwrap(),
        )
        .map_err(|e| Error::Usage(e.to_string()))
        .unwrap();
        let counts: Vec<usize> = agg.iter().map(|a| a.trainable_count).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{:?}", counts);
    }

    #[test]
    fn attn_export_covers_fig_scenario() {
        let dir = tempfile::tempdir().unwrap();
        let model = pretrained(dir.path());
        let out = dir.path().join("attn");
        let args = AttnArgs {
            model,
            prompt: "Classify the positive or negative sentiment of the text".to_string(),
            input: "i love this movie".to_string(),
            layer: 0,
            head: 0,
            out: out.clone(),
        };
        cmd_attn(&args).unwrap();
        let text = std::fs::read_to_string(out.join("attn.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let header: Vec<&str> = lines[0].split(',').collect();
        assert!(header.contains(&"positive"));
        let love_row = lines.iter().find(|l| l.starts_with("love,")).expect("love row");
        let pos_col = header.iter().position(|&h| h == "positive").unwrap();
        let value: f64 = love_row.split(',').nth(pos_col).unwrap().parse().unwrap();
        assert!(value.is_finite() && value > 0.0);

        let bad = AttnArgs { layer: 99, ..args };
        assert!(matches!(cmd_attn(&bad).unwrap_err(), Error::IndexOutOfRange(_)));
    }

    #[test]
    fn params_breakdown_sums_to_count() {
        let dir = tempfile::tempdir().unwrap();
        let model = pretrained(dir.path());
        let args = ParamsArgs {
            model,
            method: "sk-prefix".to_string(),
            task: "seqcls".to_string(),
            prompt: None,
            n_virtual: 20,
            bottleneck: 4,
            adapter_layers: 1,
        };
        let (count, pct, breakdown) = cmd_params(&args).unwrap();
        assert_eq!(count, breakdown.iter().map(|(_, n)| n).sum::<usize>());
        assert!(pct > 0.0 && pct < 100.0);
    }
}
