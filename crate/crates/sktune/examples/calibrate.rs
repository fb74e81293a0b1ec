// Build-time calibration runs for the measured acceptance thresholds.

use std::time::Instant;

use sktune::data::{self, TaskKind, Vocab};
use sktune::model::{pretrain, ModelConfig};
use sktune::peft::{MethodSpec, PeftMethod};
use sktune::train::{self, Hyperparams};

fn main() {
    let t0 = Instant::now();
    let vocab = Vocab::desk();
    let cfg = ModelConfig::reference();
    let corpus = data::synthetic_lm_corpus(cfg.vocab_size, 80, 24, 42);
    let model = pretrain(&cfg, &corpus, 500, 1e-3).unwrap();
    println!("pretrain {:.2}s", t0.elapsed().as_secs_f64());
    let prompt = vocab.tokenize("Classify the positive or negative sentiment of the text:");

    let all = data::gen_synthetic(TaskKind::Sequence, 1000, 777, &vocab);
    let (train_set, _val, test) = data::split(&all, (0.7, 0.1, 0.2), 778).unwrap();

    for lr in [1e-3, 3e-3, 1e-2] {
        for name in ["sk-prompt", "prompt", "prefix", "ptuning"] {
            let t = Instant::now();
            let spec = MethodSpec::parse(name).unwrap();
            let ids = if spec.needs_prompt() { prompt.clone() } else { Vec::new() };
            let method = PeftMethod::build(&model, &spec, TaskKind::Sequence, &ids, 1).unwrap();
            let hp = Hyperparams { lr, epochs: 12, batch_size: 4, seed: 1, loss_threshold: 0.2, ..Hyperparams::default() };
            let run = train::train(&model, &method, &train_set, Some(&test), &hp).unwrap();
            let milestones: Vec<f64> = [175, 350, 700, 1400, 2099]
                .iter()
                .filter_map(|&i| run.losses.get(i as usize).copied())
                .collect();
            println!(
                "lr {:<6} {:<9} conv {:?} acc {:.3} milestones {:?} ({:.1}s)",
                lr, name, run.convergence_step, run.metrics.accuracy,
                milestones.iter().map(|l| (l * 100.0).round() / 100.0).collect::<Vec<_>>(),
                t.elapsed().as_secs_f64()
            );
        }
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
