//! The PEFT method zoo.
//!
//! Every method exposes the same surface: `forward(model, input) -> logits`
//! over a frozen transformer, plus an exact enumeration of its trainable
//! parameters. The two semantic-knowledge methods run real prompt text
//! through the frozen model itself (the prompt is encoded by the embedding
//! layer alone for prompt tuning, and by all layers for prefix tuning); the
//! baselines train free virtual vectors instead.

use std::collections::BTreeMap;

use crate::checkpoint::{self, ParamData};
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::model::{ForwardOpts, FrozenModel, KvPrefix, LayerKv, ModelConfig};
use crate::rng;
use crate::tensor::{add, add_bias, concat, gelu, matmul, narrow, reshape, scale, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    FullFt,
    PromptVirtual,
    PrefixVirtual,
    PTuning,
    LoRA,
    SkPrefix,
    SkPrompt,
}

/// Method selection plus its options, as given on the command line.
#[derive(Debug, Clone)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// LoRA rank.
    pub rank: usize,
    /// Virtual token count for the baseline methods.
    pub n_virtual: usize,
    /// Bottleneck width of the residual prompt adapter.
    pub bottleneck: usize,
    /// Number of stacked prompt adapter blocks.
    pub adapter_layers: usize,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> MethodSpec {
        MethodSpec { kind, rank: 2, n_virtual: 20, bottleneck: 4, adapter_layers: 1 }
    }

    pub fn parse(name: &str) -> Result<MethodSpec> {
        let kind = match name {
            "full" => MethodKind::FullFt,
            "prompt" => MethodKind::PromptVirtual,
            "prefix" => MethodKind::PrefixVirtual,
            "ptuning" => MethodKind::PTuning,
            "lora2" => return Ok(MethodSpec { rank: 2, ..MethodSpec::new(MethodKind::LoRA) }),
            "lora4" => return Ok(MethodSpec { rank: 4, ..MethodSpec::new(MethodKind::LoRA) }),
            "sk-prompt" => MethodKind::SkPrompt,
            "sk-prefix" => MethodKind::SkPrefix,
            other => return Err(Error::Usage(format!("unknown method {:?}", other))),
        };
        Ok(MethodSpec::new(kind))
    }

    pub fn label(&self) -> String {
        match self.kind {
            MethodKind::FullFt => "full".to_string(),
            MethodKind::PromptVirtual => "prompt".to_string(),
            MethodKind::PrefixVirtual => "prefix".to_string(),
            MethodKind::PTuning => "ptuning".to_string(),
            MethodKind::LoRA => format!("lora{}", self.rank),
            MethodKind::SkPrefix => "sk-prefix".to_string(),
            MethodKind::SkPrompt => "sk-prompt".to_string(),
        }
    }

    pub fn needs_prompt(&self) -> bool {
        matches!(self.kind, MethodKind::SkPrefix | MethodKind::SkPrompt)
    }
}

/// Trainable linear map from hidden states to class logits; trainable in
/// every method including the baselines.
pub struct TaskHead {
    pub w: Tensor,
    pub b: Tensor,
    pub classes: usize,
}

/// Bottleneck-residual adapter refining prompt embeddings. Zero-initialized
/// output projection makes it the identity map at initialization.
struct AdapterBlock {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Per-layer linear key/value heads over the frozen prompt hidden states.
/// Value heads are zero-initialized so all prefix values are exactly zero at
/// step 0.
struct PrefixHeads {
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
}

struct LoraPair {
    a: Tensor,
    b: Tensor,
}

enum Variant {
    FullFt {
        theta: BTreeMap<String, Tensor>,
    },
    PromptVirtual {
        emb: Tensor,
    },
    PrefixVirtual {
        seeds: Tensor,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    PTuning {
        seeds: Tensor,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    LoRA {
        rank: usize,
        // (wq pair, wv pair) per layer
        layers: Vec<(LoraPair, LoraPair)>,
    },
    SkPrefix {
        prompt_ids: Vec<usize>,
        heads: Vec<PrefixHeads>,
        /// Cached per-layer hidden states of the prompt under the frozen
        /// model, each [l, d]; constants with respect to training.
        layer_states: Vec<Tensor>,
    },
    SkPrompt {
        prompt_ids: Vec<usize>,
        adapters: Vec<AdapterBlock>,
    },
}

/// A configured PEFT method: tag, task, trainable parameter store and head.
pub struct PeftMethod {
    pub spec: MethodSpec,
    pub task: TaskKind,
    pub head: TaskHead,
    variant: Variant,
}

impl std::fmt::Debug for PeftMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeftMethod")
            .field("method", &self.label())
            .field("task", &self.task)
            .finish()
    }
}

fn normal_tensor(r: &mut rand_chacha::ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let t = Tensor::param(rng::normal_vec(r, shape.iter().product(), std), shape).expect("shape");
    t
}

fn zero_param(shape: &[usize]) -> Tensor {
    let t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    t
}

impl PeftMethod {
    /// Build a method over `model` with seeded initialization. SK methods
    /// need non-empty `prompt_ids`; the other methods ignore them.
    pub fn build(
        model: &FrozenModel,
        spec: &MethodSpec,
        task: TaskKind,
        prompt_ids: &[usize],
        seed: u64,
    ) -> Result<PeftMethod> {
        let cfg = &model.config;
        let d = cfg.d_model;
        let classes = task.class_count();
        let mut r = rng::seeded(seed);
        let head = TaskHead {
            w: normal_tensor(&mut r, &[d, classes], 0.02),
            b: zero_param(&[classes]),
            classes,
        };
        let variant = match spec.kind {
            MethodKind::FullFt => Variant::FullFt { theta: model.clone_params_trainable() },
            MethodKind::PromptVirtual => Variant::PromptVirtual {
                emb: normal_tensor(&mut r, &[spec.n_virtual, d], 0.02),
            },
            MethodKind::PrefixVirtual => Variant::PrefixVirtual {
                seeds: normal_tensor(&mut r, &[spec.n_virtual, d], 0.02),
                w1: normal_tensor(&mut r, &[d, cfg.d_ffn], 0.02),
                b1: zero_param(&[cfg.d_ffn]),
                w2: normal_tensor(&mut r, &[cfg.d_ffn, 2 * cfg.n_layers * d], 0.02),
                b2: zero_param(&[2 * cfg.n_layers * d]),
            },
            MethodKind::PTuning => Variant::PTuning {
                seeds: normal_tensor(&mut r, &[spec.n_virtual, d], 0.02),
                w1: normal_tensor(&mut r, &[d, cfg.d_ffn], 0.02),
                b1: zero_param(&[cfg.d_ffn]),
                w2: normal_tensor(&mut r, &[cfg.d_ffn, d], 0.02),
                b2: zero_param(&[d]),
            },
            MethodKind::LoRA => {
                if spec.rank == 0 || spec.rank > d {
                    return Err(Error::BadRank { rank: spec.rank, max: d });
                }
                let layers = (0..cfg.n_layers)
                    .map(|_| {
                        let q = LoraPair {
                            a: normal_tensor(&mut r, &[d, spec.rank], 0.02),
                            b: zero_param(&[spec.rank, d]),
                        };
                        let v = LoraPair {
                            a: normal_tensor(&mut r, &[d, spec.rank], 0.02),
                            b: zero_param(&[spec.rank, d]),
                        };
                        (q, v)
                    })
                    .collect();
                Variant::LoRA { rank: spec.rank, layers }
            }
            MethodKind::SkPrefix => {
                if prompt_ids.is_empty() {
                    return Err(Error::IllegalPrefixLength);
                }
                let stacked = model.extract_layer_states(prompt_ids)?;
                let l = prompt_ids.len();
                let tape = Tape::new();
                let layer_states = (0..cfg.n_layers)
                    .map(|j| {
                        let slice = narrow(&tape, &stacked, 0, j, 1)?;
                        reshape(&tape, &slice, &[l, d])
                    })
                    .collect::<Result<Vec<_>>>()?;
                let heads = (0..cfg.n_layers)
                    .map(|_| PrefixHeads {
                        wk: normal_tensor(&mut r, &[d, d], 0.02),
                        bk: zero_param(&[d]),
                        wv: zero_param(&[d, d]),
                        bv: zero_param(&[d]),
                    })
                    .collect();
                Variant::SkPrefix { prompt_ids: prompt_ids.to_vec(), heads, layer_states }
            }
            MethodKind::SkPrompt => {
                if prompt_ids.is_empty() {
                    return Err(Error::Usage(
                        "sk-prompt needs non-empty prompt text".to_string(),
                    ));
                }
                let adapters = (0..spec.adapter_layers.max(1))
                    .map(|_| AdapterBlock {
                        w1: normal_tensor(&mut r, &[d, spec.bottleneck], 0.02),
                        b1: zero_param(&[spec.bottleneck]),
                        w2: zero_param(&[spec.bottleneck, d]),
                        b2: zero_param(&[d]),
                    })
                    .collect();
                Variant::SkPrompt { prompt_ids: prompt_ids.to_vec(), adapters }
            }
        };
        Ok(PeftMethod { spec: spec.clone(), task, head, variant })
    }

    pub fn label(&self) -> String {
        self.spec.label()
    }

    /// Class logits for one input: `[1, C]` for sequence/entailment, `[n, C]`
    /// for token tasks.
    pub fn forward(&self, model: &FrozenModel, tape: &Tape, input_ids: &[usize]) -> Result<Tensor> {
        Ok(self.forward_captured(model, tape, input_ids, false)?.0)
    }

    /// Forward with optional attention capture.
    pub fn forward_captured(
        &self,
        model: &FrozenModel,
        tape: &Tape,
        input_ids: &[usize],
        capture_attention: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        if input_ids.is_empty() {
            return Err(Error::SequenceEmpty);
        }
        let n = input_ids.len();
        let (emb, prefix, overrides, offset) = match &self.variant {
            Variant::FullFt { theta } => {
                let emb = model.embed_with(tape, input_ids, Some(theta))?;
                (emb, None, Some(theta.clone()), 0)
            }
            Variant::PromptVirtual { emb: virtual_emb } => {
                let e_x = model.embed(tape, input_ids)?;
                let joined = concat(tape, virtual_emb, &e_x, 0)?;
                (joined, None, None, virtual_emb.shape()[0])
            }
            Variant::PTuning { seeds, w1, b1, w2, b2 } => {
                let h = gelu(tape, &add_bias(tape, &matmul(tape, seeds, w1)?, b1)?);
                let virt = add_bias(tape, &matmul(tape, &h, w2)?, b2)?;
                let e_x = model.embed(tape, input_ids)?;
                let joined = concat(tape, &virt, &e_x, 0)?;
                (joined, None, None, seeds.shape()[0])
            }
            Variant::PrefixVirtual { .. } => {
                let prefix = self.reparam_prefix(model, tape)?;
                let emb = model.embed(tape, input_ids)?;
                (emb, Some(prefix), None, 0)
            }
            Variant::SkPrefix { .. } => {
                let prefix = self.semantic_prefix(model, tape)?;
                let emb = model.embed(tape, input_ids)?;
                (emb, Some(prefix), None, 0)
            }
            Variant::SkPrompt { prompt_ids, adapters } => {
                // The prompt passes through the embedding layer only; the
                // forward pass over the prompt alone stops there.
                let e_p = model.embed(tape, prompt_ids)?;
                let mut refined = e_p;
                for block in adapters {
                    let h = gelu(tape, &add_bias(tape, &matmul(tape, &refined, &block.w1)?, &block.b1)?);
                    let delta = add_bias(tape, &matmul(tape, &h, &block.w2)?, &block.b2)?;
                    refined = add(tape, &refined, &delta)?;
                }
                let e_x = model.embed(tape, input_ids)?;
                let joined = concat(tape, &refined, &e_x, 0)?;
                (joined, None, None, prompt_ids.len())
            }
            Variant::LoRA { rank, layers } => {
                let mut ov = BTreeMap::new();
                let alpha_over_r = 1.0; // alpha = rank
                let _ = rank;
                for (j, (q, v)) in layers.iter().enumerate() {
                    let dq = scale(tape, &matmul(tape, &q.a, &q.b)?, alpha_over_r);
                    let dv = scale(tape, &matmul(tape, &v.a, &v.b)?, alpha_over_r);
                    ov.insert(
                        format!("layer{}.wq", j),
                        add(tape, model.param(&format!("layer{}.wq", j)), &dq)?,
                    );
                    ov.insert(
                        format!("layer{}.wv", j),
                        add(tape, model.param(&format!("layer{}.wv", j)), &dv)?,
                    );
                }
                let emb = model.embed(tape, input_ids)?;
                (emb, None, Some(ov), 0)
            }
        };
        let out = model.forward_inner(
            tape,
            &emb,
            ForwardOpts {
                prefix: prefix.as_ref(),
                overrides: overrides.as_ref(),
                capture_attention,
                collect_block_inputs: false,
            },
        )?;
        let logits = self.apply_head(tape, &out.hidden, offset, n)?;
        Ok((logits, out.attn))
    }

    fn apply_head(&self, tape: &Tape, hidden: &Tensor, offset: usize, n: usize) -> Result<Tensor> {
        let rows = match self.task {
            // Last real input position carries the sequence decision.
            TaskKind::Sequence | TaskKind::Entailment => narrow(tape, hidden, 0, offset + n - 1, 1)?,
            // Token tasks read every real input position; prompt and prefix
            // positions never receive labels.
            TaskKind::Token => narrow(tape, hidden, 0, offset, n)?,
        };
        add_bias(tape, &matmul(tape, &rows, &self.head.w)?, &self.head.b)
    }

    /// Per-layer K/V prefix from the trainable heads over the cached prompt
    /// states.
    fn semantic_prefix(&self, model: &FrozenModel, tape: &Tape) -> Result<KvPrefix> {
        let Variant::SkPrefix { heads, layer_states, .. } = &self.variant else {
            unreachable!("semantic_prefix on non-sk-prefix method")
        };
        let mut layers = Vec::with_capacity(model.config.n_layers);
        for (state, head) in layer_states.iter().zip(heads) {
            layers.push(LayerKv {
                keys: add_bias(tape, &matmul(tape, state, &head.wk)?, &head.bk)?,
                values: add_bias(tape, &matmul(tape, state, &head.wv)?, &head.bv)?,
            });
        }
        Ok(KvPrefix { layers })
    }

    /// Two-layer reparameterization of virtual seeds into per-layer K/V.
    fn reparam_prefix(&self, model: &FrozenModel, tape: &Tape) -> Result<KvPrefix> {
        let Variant::PrefixVirtual { seeds, w1, b1, w2, b2 } = &self.variant else {
            unreachable!("reparam_prefix on non-prefix method")
        };
        let d = model.config.d_model;
        let h = gelu(tape, &add_bias(tape, &matmul(tape, seeds, w1)?, b1)?);
        let flat = add_bias(tape, &matmul(tape, &h, w2)?, b2)?;
        let mut layers = Vec::with_capacity(model.config.n_layers);
        for j in 0..model.config.n_layers {
            layers.push(LayerKv {
                keys: narrow(tape, &flat, 1, j * 2 * d, d)?,
                values: narrow(tape, &flat, 1, j * 2 * d + d, d)?,
            });
        }
        Ok(KvPrefix { layers })
    }

    /// The exact trainable set, as stable (name, tensor) pairs.
    pub fn trainable(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        match &self.variant {
            Variant::FullFt { theta } => {
                for (name, t) in theta {
                    out.push((format!("theta.{}", name), t.clone()));
                }
            }
            Variant::PromptVirtual { emb } => out.push(("virtual_emb".into(), emb.clone())),
            Variant::PrefixVirtual { seeds, w1, b1, w2, b2 } => {
                out.push(("seeds".into(), seeds.clone()));
                out.push(("reparam.w1".into(), w1.clone()));
                out.push(("reparam.b1".into(), b1.clone()));
                out.push(("reparam.w2".into(), w2.clone()));
                out.push(("reparam.b2".into(), b2.clone()));
            }
            Variant::PTuning { seeds, w1, b1, w2, b2 } => {
                out.push(("seeds".into(), seeds.clone()));
                out.push(("encoder.w1".into(), w1.clone()));
                out.push(("encoder.b1".into(), b1.clone()));
                out.push(("encoder.w2".into(), w2.clone()));
                out.push(("encoder.b2".into(), b2.clone()));
            }
            Variant::LoRA { layers, .. } => {
                for (j, (q, v)) in layers.iter().enumerate() {
                    out.push((format!("layer{}.lora_q.a", j), q.a.clone()));
                    out.push((format!("layer{}.lora_q.b", j), q.b.clone()));
                    out.push((format!("layer{}.lora_v.a", j), v.a.clone()));
                    out.push((format!("layer{}.lora_v.b", j), v.b.clone()));
                }
            }
            Variant::SkPrefix { heads, .. } => {
                for (j, h) in heads.iter().enumerate() {
                    out.push((format!("layer{}.wk", j), h.wk.clone()));
                    out.push((format!("layer{}.bk", j), h.bk.clone()));
                    out.push((format!("layer{}.wv", j), h.wv.clone()));
                    out.push((format!("layer{}.bv", j), h.bv.clone()));
                }
            }
            Variant::SkPrompt { adapters, .. } => {
                for (k, a) in adapters.iter().enumerate() {
                    out.push((format!("adapter{}.w1", k), a.w1.clone()));
                    out.push((format!("adapter{}.b1", k), a.b1.clone()));
                    out.push((format!("adapter{}.w2", k), a.w2.clone()));
                    out.push((format!("adapter{}.b2", k), a.b2.clone()));
                }
            }
        }
        out.push(("head.w".into(), self.head.w.clone()));
        out.push(("head.b".into(), self.head.b.clone()));
        out
    }

    /// Runtime enumeration of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    /// Trainable share of all parameters, in percent. Full fine-tuning is
    /// 100.000 by definition.
    pub fn params_percentage(&self, model: &FrozenModel) -> f64 {
        if matches!(self.variant, Variant::FullFt { .. }) {
            return 100.0;
        }
        let count = self.trainable_count() as f64;
        100.0 * count / (model.theta_count() as f64 + count)
    }

    pub fn prompt_ids(&self) -> Option<&[usize]> {
        match &self.variant {
            Variant::SkPrefix { prompt_ids, .. } | Variant::SkPrompt { prompt_ids, .. } => {
                Some(prompt_ids)
            }
            _ => None,
        }
    }

    /// Serialize the trainable set as an SKT1 adapter checkpoint.
    pub fn adapter_json(&self) -> String {
        let params: BTreeMap<String, ParamData> = self
            .trainable()
            .into_iter()
            .map(|(name, t)| (name, ParamData { shape: t.shape(), data: t.to_vec() }))
            .collect();
        let method = serde_json::to_string(&self.label()).expect("label");
        checkpoint::write_doc(&[("method", method)], &params)
    }

    /// Restore trainable values from a parsed adapter checkpoint.
    pub fn load_adapter(&mut self, doc: &checkpoint::Doc) -> Result<()> {
        for (name, tensor) in self.trainable() {
            let p = doc
                .params
                .get(&name)
                .ok_or_else(|| Error::Usage(format!("adapter checkpoint missing {}", name)))?;
            if p.shape != tensor.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "adapter param {}: {:?} vs {:?}",
                    name,
                    p.shape,
                    tensor.shape()
                )));
            }
            tensor.apply_data(|d| d.copy_from_slice(&p.data));
        }
        Ok(())
    }
}

/// Closed-form trainable count for a method configuration; must equal the
/// runtime enumeration exactly.
pub fn symbolic_count(spec: &MethodSpec, config: &ModelConfig, task: TaskKind, theta: usize) -> usize {
    let d = config.d_model;
    let m = config.n_layers;
    let f = config.d_ffn;
    let c = task.class_count();
    let head = d * c + c;
    match spec.kind {
        MethodKind::FullFt => theta + head,
        MethodKind::PromptVirtual => spec.n_virtual * d + head,
        MethodKind::PrefixVirtual => {
            spec.n_virtual * d + d * f + f + f * (2 * m * d) + 2 * m * d + head
        }
        MethodKind::PTuning => spec.n_virtual * d + d * f + f + f * d + d + head,
        MethodKind::LoRA => 2 * m * 2 * d * spec.rank + head,
        MethodKind::SkPrefix => 2 * m * (d * d + d) + head,
        MethodKind::SkPrompt => {
            spec.adapter_layers.max(1) * ((d * spec.bottleneck + spec.bottleneck) + (spec.bottleneck * d + d)) + head
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;
    use crate::model::pretrain;
    use crate::tensor::cross_entropy;
    use crate::{data, model};

    fn test_model() -> FrozenModel {
        let cfg = ModelConfig { max_seq: 48, ..ModelConfig::reference() };
        let corpus = data::synthetic_lm_corpus(cfg.vocab_size, 20, 16, 3);
        pretrain(&cfg, &corpus, 60, 1e-3).unwrap()
    }

    fn head_on_concat_oracle(
        model: &FrozenModel,
        head: &TaskHead,
        prompt_ids: &[usize],
        input_ids: &[usize],
    ) -> Vec<f64> {
        // Independent route: concatenate at the id level, run the plain
        // frozen forward, apply the same head to the last position.
        let tape = Tape::new();
        let mut ids = prompt_ids.to_vec();
        ids.extend_from_slice(input_ids);
        let emb = model.embed(&tape, &ids).unwrap();
        let (hidden, _) = model.forward(&tape, &emb, None, false).unwrap();
        let row = narrow(&tape, &hidden, 0, ids.len() - 1, 1).unwrap();
        add_bias(&tape, &matmul(&tape, &row, &head.w).unwrap(), &head.b)
            .unwrap()
            .to_vec()
    }

    #[test]
    fn sk_prompt_zero_init_matches_zero_shot_concat() {
        let model = test_model();
        let vocab = Vocab::desk();
        let prompt = vocab.tokenize("classify the positive or negative sentiment of the text:");
        let input = vocab.tokenize("i love this movie");
        let method = PeftMethod::build(
            &model,
            &MethodSpec::new(MethodKind::SkPrompt),
            TaskKind::Sequence,
            &prompt,
            7,
        )
        .unwrap();
        let tape = Tape::new();
        let logits = method.forward(&model, &tape, &input).unwrap();
        let oracle = head_on_concat_oracle(&model, &method.head, &prompt, &input);
        for (a, b) in logits.to_vec().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn sk_prompt_rejects_empty_input() {
        let model = test_model();
        let method = PeftMethod::build(
            &model,
            &MethodSpec::new(MethodKind::SkPrompt),
            TaskKind::Sequence,
            &[5, 6],
            7,
        )
        .unwrap();
        let tape = Tape::new();
        assert!(matches!(
            method.forward(&model, &tape, &[]).unwrap_err(),
            Error::SequenceEmpty
        ));
    }

    #[test]
    fn frozen_theta_gets_no_gradient() {
        let model = test_model();
        for kind in [
            MethodKind::SkPrompt,
            MethodKind::SkPrefix,
            MethodKind::PromptVirtual,
            MethodKind::PrefixVirtual,
            MethodKind::PTuning,
            MethodKind::LoRA,
        ] {
            let method =
                PeftMethod::build(&model, &MethodSpec::new(kind), TaskKind::Sequence, &[4, 5, 6], 3)
                    .unwrap();
            let tape = Tape::new();
            let logits = method.forward(&model, &tape, &[7, 8]).unwrap();
            let loss = cross_entropy(&tape, &logits, &[1]).unwrap();
            tape.backward(&loss).unwrap();
            for name in model.param_names() {
                assert!(model.param(name).grad().is_none(), "{:?} leaked into {}", kind, name);
                assert!(!model.param(name).requires_grad());
            }
            // and the method's own parameters do learn
            let got_grad = method.trainable().iter().any(|(_, t)| t.grad().is_some());
            assert!(got_grad, "{:?} produced no trainable gradients", kind);
        }
    }

    #[test]
    fn sk_prefix_rejects_empty_prompt() {
        let model = test_model();
        assert!(matches!(
            PeftMethod::build(&model, &MethodSpec::new(MethodKind::SkPrefix), TaskKind::Sequence, &[], 3)
                .unwrap_err(),
            Error::IllegalPrefixLength
        ));
    }

    #[test]
    fn sk_prefix_values_are_zero_at_init() {
        let model = test_model();
        let method =
            PeftMethod::build(&model, &MethodSpec::new(MethodKind::SkPrefix), TaskKind::Sequence, &[4, 5, 6, 7], 3)
                .unwrap();
        let tape = Tape::new();
        let prefix = method.semantic_prefix(&model, &tape).unwrap();
        assert_eq!(prefix.len(), 4);
        for kv in &prefix.layers {
            assert!(kv.values.to_vec().iter().all(|&v| v == 0.0));
            assert!(kv.keys.to_vec().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn reparam_prefix_shape_contract() {
        let model = test_model();
        let method = PeftMethod::build(
            &model,
            &MethodSpec::new(MethodKind::PrefixVirtual),
            TaskKind::Sequence,
            &[],
            3,
        )
        .unwrap();
        let tape = Tape::new();
        let prefix = method.reparam_prefix(&model, &tape).unwrap();
        assert_eq!(prefix.layers.len(), model.config.n_layers);
        for kv in &prefix.layers {
            assert_eq!(kv.keys.shape(), vec![20, 32]);
            assert_eq!(kv.values.shape(), vec![20, 32]);
        }
    }

    #[test]
    fn lora_init_matches_base_model() {
        let model = test_model();
        let lora = PeftMethod::build(&model, &MethodSpec::parse("lora2").unwrap(), TaskKind::Sequence, &[], 11)
            .unwrap();
        let tape = Tape::new();
        let logits = lora.forward(&model, &tape, &[4, 9, 2]).unwrap();
        // base route with the same head
        let emb = model.embed(&tape, &[4, 9, 2]).unwrap();
        let (hidden, _) = model.forward(&tape, &emb, None, false).unwrap();
        let row = narrow(&tape, &hidden, 0, 2, 1).unwrap();
        let base = add_bias(&tape, &matmul(&tape, &row, &lora.head.w).unwrap(), &lora.head.b).unwrap();
        for (a, b) in logits.to_vec().iter().zip(base.to_vec()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn lora_rank_validation() {
        let model = test_model();
        let mut spec = MethodSpec::new(MethodKind::LoRA);
        spec.rank = 0;
        assert!(matches!(
            PeftMethod::build(&model, &spec, TaskKind::Sequence, &[], 3).unwrap_err(),
            Error::BadRank { .. }
        ));
        spec.rank = 33;
        assert!(matches!(
            PeftMethod::build(&model, &spec, TaskKind::Sequence, &[], 3).unwrap_err(),
            Error::BadRank { rank: 33, max: 32 }
        ));
    }

    #[test]
    fn full_ft_matches_frozen_forward_at_step_zero() {
        let model = test_model();
        let full = PeftMethod::build(&model, &MethodSpec::new(MethodKind::FullFt), TaskKind::Sequence, &[], 13)
            .unwrap();
        let tape = Tape::new();
        let logits = full.forward(&model, &tape, &[4, 9, 2]).unwrap();
        let emb = model.embed(&tape, &[4, 9, 2]).unwrap();
        let (hidden, _) = model.forward(&tape, &emb, None, false).unwrap();
        let row = narrow(&tape, &hidden, 0, 2, 1).unwrap();
        let base = add_bias(&tape, &matmul(&tape, &row, &full.head.w).unwrap(), &full.head.b).unwrap();
        assert_eq!(logits.to_vec(), base.to_vec());
    }

    #[test]
    fn reference_config_counts() {
        let model = test_model();
        let cases: Vec<(MethodSpec, usize)> = vec![
            (MethodSpec::new(MethodKind::SkPrompt), 358),
            (MethodSpec::new(MethodKind::SkPrefix), 4290),
            (MethodSpec::new(MethodKind::PromptVirtual), 706),
            (MethodSpec::parse("lora2").unwrap(), 578),
            (MethodSpec::parse("lora4").unwrap(), 1090),
        ];
        for (spec, expect) in cases {
            let prompt: Vec<usize> = (4..12).collect(); // l = 8
            let m = PeftMethod::build(&model, &spec, TaskKind::Sequence, &prompt, 3).unwrap();
            assert_eq!(m.trainable_count(), expect, "{}", spec.label());
            assert_eq!(
                symbolic_count(&spec, &model.config, TaskKind::Sequence, model.theta_count()),
                expect,
                "symbolic {}",
                spec.label()
            );
        }
        let full = PeftMethod::build(&model, &MethodSpec::new(MethodKind::FullFt), TaskKind::Sequence, &[], 3)
            .unwrap();
        assert_eq!(full.trainable_count(), model.theta_count() + 66);
        assert_eq!(full.params_percentage(&model), 100.0);
    }

    #[test]
    fn virtual_prompt_degenerate_and_seeding() {
        let model = test_model();
        let mut spec = MethodSpec::new(MethodKind::PromptVirtual);
        spec.n_virtual = 0;
        let degenerate = PeftMethod::build(&model, &spec, TaskKind::Sequence, &[], 3).unwrap();
        let tape = Tape::new();
        let logits = degenerate.forward(&model, &tape, &[4, 9, 2]).unwrap();
        let emb = model.embed(&tape, &[4, 9, 2]).unwrap();
        let (hidden, _) = model.forward(&tape, &emb, None, false).unwrap();
        let row = narrow(&tape, &hidden, 0, 2, 1).unwrap();
        let base =
            add_bias(&tape, &matmul(&tape, &row, &degenerate.head.w).unwrap(), &degenerate.head.b)
                .unwrap();
        assert_eq!(logits.to_vec(), base.to_vec());

        let spec = MethodSpec::new(MethodKind::PromptVirtual);
        let a = PeftMethod::build(&model, &spec, TaskKind::Sequence, &[], 3).unwrap();
        let b = PeftMethod::build(&model, &spec, TaskKind::Sequence, &[], 3).unwrap();
        let c = PeftMethod::build(&model, &spec, TaskKind::Sequence, &[], 4).unwrap();
        let ta = Tape::new();
        let la = a.forward(&model, &ta, &[4, 9]).unwrap();
        let lb = b.forward(&model, &ta, &[4, 9]).unwrap();
        let lc = c.forward(&model, &ta, &[4, 9]).unwrap();
        assert_eq!(la.to_vec(), lb.to_vec());
        assert_ne!(la.to_vec(), lc.to_vec());
    }

    #[test]
    fn forward_is_pure() {
        let model = test_model();
        let vocab = Vocab::desk();
        let prompt = vocab.tokenize("classify the sentiment of the following text");
        for name in ["full", "prompt", "prefix", "ptuning", "lora2", "sk-prompt", "sk-prefix"] {
            let spec = MethodSpec::parse(name).unwrap();
            let m = PeftMethod::build(&model, &spec, TaskKind::Sequence, &prompt, 5).unwrap();
            let t1 = Tape::new();
            let a = m.forward(&model, &t1, &[4, 9, 2]).unwrap();
            let t2 = Tape::new();
            let b = m.forward(&model, &t2, &[4, 9, 2]).unwrap();
            assert_eq!(a.to_vec(), b.to_vec(), "{}", name);
        }
    }

    #[test]
    fn permuting_prompt_ids_changes_logits() {
        let model = test_model();
        let vocab = Vocab::desk();
        let prompt = vocab.tokenize("classify the positive or negative sentiment of the text:");
        let mut reversed = prompt.clone();
        reversed.reverse();
        assert_ne!(prompt, reversed);
        let spec = MethodSpec::new(MethodKind::SkPrompt);
        let a = PeftMethod::build(&model, &spec, TaskKind::Sequence, &prompt, 5).unwrap();
        let b = PeftMethod::build(&model, &spec, TaskKind::Sequence, &reversed, 5).unwrap();
        let tape = Tape::new();
        let la = a.forward(&model, &tape, &[4, 9, 2]).unwrap();
        let lb = b.forward(&model, &tape, &[4, 9, 2]).unwrap();
        assert_ne!(la.to_vec(), lb.to_vec());
    }

    #[test]
    fn token_task_logits_cover_real_positions_only() {
        let model = test_model();
        let vocab = Vocab::desk();
        let prompt = vocab.tokenize("focus on the emotional cues present in the text:");
        let m = PeftMethod::build(
            &model,
            &MethodSpec::new(MethodKind::SkPrompt),
            TaskKind::Token,
            &prompt,
            5,
        )
        .unwrap();
        let tape = Tape::new();
        let logits = m.forward(&model, &tape, &[4, 9, 2, 11]).unwrap();
        assert_eq!(logits.shape(), vec![4, 3]);
    }

    #[test]
    fn adapter_checkpoint_round_trip() {
        let model = test_model();
        let vocab = Vocab::desk();
        let prompt = vocab.tokenize("classify the sentiment of the following text");
        let mut m = PeftMethod::build(
            &model,
            &MethodSpec::new(MethodKind::SkPrompt),
            TaskKind::Sequence,
            &prompt,
            5,
        )
        .unwrap();
        let json = m.adapter_json();
        let doc = checkpoint::read_doc(&json).unwrap();
        assert_eq!(doc.meta.get("method").unwrap().as_str(), Some("sk-prompt"));
        m.load_adapter(&doc).unwrap();
        assert_eq!(m.adapter_json(), json);
    }

    #[test]
    fn count_sweep_symbolic_equals_enumeration() {
        let mut sweep = Vec::new();
        for (layers, heads) in [(1usize, 2usize), (2, 4)] {
            for d in [16usize, 32] {
                let cfg = ModelConfig {
                    vocab_size: 32,
                    d_model: d,
                    n_layers: layers,
                    n_heads: heads,
                    d_ffn: 2 * d,
                    max_seq: 32,
                    ln_eps: 1e-5,
                    seed: 1,
                };
                sweep.push(cfg);
            }
        }
        for cfg in sweep {
            let m = model::FrozenModel::init(&cfg).unwrap();
            for name in ["full", "prompt", "prefix", "ptuning", "lora2", "lora4", "sk-prompt", "sk-prefix"] {
                let spec = MethodSpec::parse(name).unwrap();
                for task in [TaskKind::Sequence, TaskKind::Token] {
                    let built = PeftMethod::build(&m, &spec, task, &[3, 4, 5], 2).unwrap();
                    assert_eq!(
                        built.trainable_count(),
                        symbolic_count(&spec, &cfg, task, m.theta_count()),
                        "{} on {:?}",
                        name,
                        cfg
                    );
                }
            }
        }
    }
}
