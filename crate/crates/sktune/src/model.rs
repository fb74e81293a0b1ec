//! The frozen pretrained decoder transformer.
//!
//! Decoder-only causal architecture with pre-layer-norm blocks, learned
//! absolute positional embeddings and a weight-tied LM head. Per-layer
//! key/value prefixes can be injected into attention: every real position may
//! attend to all prefix slots, the causal mask applies among real positions
//! only, and prefix slots receive no positional embedding and produce no
//! output rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ParamData};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{
    add, add_bias, concat, cross_entropy, gather_rows, gelu, layer_norm, matmul, narrow, softmax,
    scale, transpose, Tape, Tensor,
};
use crate::train::AdamW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq: usize,
    pub ln_eps: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// The desk-scale reference configuration used throughout the test suite.
    pub fn reference() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 64,
            max_seq: 64,
            ln_eps: 1e-5,
            seed: 42,
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 16,
            max_seq: 48,
            ln_eps: 1e-5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Per-layer key/value prefix; `len() == 0` denotes the empty prefix.
#[derive(Clone)]
pub struct KvPrefix {
    pub layers: Vec<LayerKv>,
}

#[derive(Clone)]
pub struct LayerKv {
    pub keys: Tensor,
    pub values: Tensor,
}

impl KvPrefix {
    pub fn empty(n_layers: usize, d_model: usize) -> KvPrefix {
        KvPrefix {
            layers: (0..n_layers)
                .map(|_| LayerKv {
                    keys: Tensor::zeros(&[0, d_model]),
                    values: Tensor::zeros(&[0, d_model]),
                })
                .collect(),
        }
    }

    /// Shared prefix length l.
    pub fn len(&self) -> usize {
        self.layers.first().map(|kv| kv.keys.shape()[0]).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) struct ForwardOpts<'a> {
    pub prefix: Option<&'a KvPrefix>,
    pub overrides: Option<&'a BTreeMap<String, Tensor>>,
    pub capture_attention: bool,
    pub collect_block_inputs: bool,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        ForwardOpts {
            prefix: None,
            overrides: None,
            capture_attention: false,
            collect_block_inputs: false,
        }
    }
}

pub(crate) struct ForwardResult {
    pub hidden: Tensor,
    /// Row-normalized attention maps, shape [n_layers, n_heads, n, l+n].
    pub attn: Option<Tensor>,
    pub block_inputs: Vec<Tensor>,
}

/// The pretrained decoder transformer with parameters held frozen during
/// parameter-efficient tuning.
pub struct FrozenModel {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    frozen: bool,
}

impl std::fmt::Debug for FrozenModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenModel")
            .field("config", &self.config)
            .field("frozen", &self.frozen)
            .finish()
    }
}

fn layer_param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let f = config.d_ffn;
    let mut names = vec![
        ("token_emb".to_string(), vec![config.vocab_size, d]),
        ("pos_emb".to_string(), vec![config.max_seq, d]),
        ("final_ln_gamma".to_string(), vec![d]),
        ("final_ln_beta".to_string(), vec![d]),
    ];
    for j in 0..config.n_layers {
        for (suffix, shape) in [
            ("wq", vec![d, d]),
            ("wk", vec![d, d]),
            ("wv", vec![d, d]),
            ("wo", vec![d, d]),
            ("ln1_gamma", vec![d]),
            ("ln1_beta", vec![d]),
            ("ffn_w1", vec![d, f]),
            ("ffn_b1", vec![f]),
            ("ffn_w2", vec![f, d]),
            ("ffn_b2", vec![d]),
            ("ln2_gamma", vec![d]),
            ("ln2_beta", vec![d]),
        ] {
            names.push((format!("layer{}.{}", j, suffix), shape));
        }
    }
    names
}

impl FrozenModel {
    /// Seeded random initialization: weights and embeddings N(0, 0.02^2),
    /// norm gains 1, biases 0.
    pub fn init(config: &ModelConfig) -> Result<FrozenModel> {
        config.validate()?;
        let mut r = rng::seeded(config.seed);
        let mut params = BTreeMap::new();
        for (name, shape) in layer_param_shapes(config) {
            let n = shape.iter().product();
            let data = if name.ends_with("gamma") {
                vec![1.0; n]
            } else if name.ends_with("beta") || name.ends_with("b1") || name.ends_with("b2") {
                vec![0.0; n]
            } else {
                rng::normal_vec(&mut r, n, 0.02)
            };
            params.insert(name, Tensor::from_vec(data, &shape)?);
        }
        Ok(FrozenModel { config: config.clone(), params, frozen: true })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total number of frozen scalars.
    pub fn theta_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Bit-exact copy of every parameter, marked trainable. Used by full
    /// fine-tuning, which owns a private copy of the weights.
    pub fn clone_params_trainable(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, t)| {
                let copy = t.detached();
                copy.set_requires_grad(true);
                (name.clone(), copy)
            })
            .collect()
    }

    fn lookup<'a>(&'a self, overrides: Option<&'a BTreeMap<String, Tensor>>, name: &str) -> &'a Tensor {
        if let Some(map) = overrides {
            if let Some(t) = map.get(name) {
                return t;
            }
        }
        &self.params[name]
    }

    /// Token embeddings only; positions are added inside `forward` after any
    /// concatenation, so embedding-level concat commutes with id-level concat.
    pub fn embed(&self, tape: &Tape, ids: &[usize]) -> Result<Tensor> {
        self.embed_with(tape, ids, None)
    }

    pub(crate) fn embed_with(
        &self,
        tape: &Tape,
        ids: &[usize],
        overrides: Option<&BTreeMap<String, Tensor>>,
    ) -> Result<Tensor> {
        gather_rows(tape, self.lookup(overrides, "token_emb"), ids)
    }

    /// Run the blocks over `emb` (shape [n, d]) with an optional key/value
    /// prefix. Returns final-layer-norm hidden states; attention maps are
    /// captured row-normalized when requested.
    pub fn forward(
        &self,
        tape: &Tape,
        emb: &Tensor,
        prefix: Option<&KvPrefix>,
        capture_attention: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let out = self.forward_inner(
            tape,
            emb,
            ForwardOpts { prefix, capture_attention, ..ForwardOpts::default() },
        )?;
        Ok((out.hidden, out.attn))
    }

    pub(crate) fn forward_inner(
        &self,
        tape: &Tape,
        emb: &Tensor,
        opts: ForwardOpts<'_>,
    ) -> Result<ForwardResult> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let n = emb.shape()[0];
        if n == 0 {
            return Err(Error::SequenceEmpty);
        }
        if n > cfg.max_seq {
            return Err(Error::SequenceTooLong { len: n, max: cfg.max_seq });
        }
        let empty = KvPrefix::empty(cfg.n_layers, d);
        let prefix = opts.prefix.unwrap_or(&empty);
        if prefix.layers.len() != cfg.n_layers {
            return Err(Error::PrefixLayerMismatch {
                got: prefix.layers.len(),
                want: cfg.n_layers,
            });
        }
        let l = prefix.len();
        for kv in &prefix.layers {
            if kv.keys.shape() != [l, d] || kv.values.shape() != [l, d] {
                return Err(Error::ShapeMismatch(format!(
                    "prefix entries must all be [{}, {}]",
                    l, d
                )));
            }
        }

        let dh = d / cfg.n_heads;
        let mask = causal_mask(n, l);
        let mut attn_maps = if opts.capture_attention {
            Some(Vec::with_capacity(cfg.n_layers * cfg.n_heads * n * (l + n)))
        } else {
            None
        };
        let mut block_inputs = Vec::new();

        let pos = narrow(tape, self.lookup(opts.overrides, "pos_emb"), 0, 0, n)?;
        let mut x = add(tape, emb, &pos)?;

        for j in 0..cfg.n_layers {
            if opts.collect_block_inputs {
                block_inputs.push(x.detached());
            }
            let name = |s: &str| format!("layer{}.{}", j, s);
            let ln1 = layer_norm(
                tape,
                &x,
                self.lookup(opts.overrides, &name("ln1_gamma")),
                self.lookup(opts.overrides, &name("ln1_beta")),
                cfg.ln_eps,
            )?;
            let q = matmul(tape, &ln1, self.lookup(opts.overrides, &name("wq")))?;
            let k = matmul(tape, &ln1, self.lookup(opts.overrides, &name("wk")))?;
            let v = matmul(tape, &ln1, self.lookup(opts.overrides, &name("wv")))?;
            let kv = &prefix.layers[j];
            let k_full = concat(tape, &kv.keys, &k, 0)?;
            let v_full = concat(tape, &kv.values, &v, 0)?;

            let mut ctx: Option<Tensor> = None;
            for h in 0..cfg.n_heads {
                let qh = narrow(tape, &q, 1, h * dh, dh)?;
                let kh = narrow(tape, &k_full, 1, h * dh, dh)?;
                let vh = narrow(tape, &v_full, 1, h * dh, dh)?;
                let scores = matmul(tape, &qh, &transpose(tape, &kh)?)?;
                let scaled = scale(tape, &scores, 1.0 / (dh as f64).sqrt());
                let masked = add(tape, &scaled, &mask)?;
                let probs = softmax(tape, &masked, 1)?;
                if let Some(maps) = attn_maps.as_mut() {
                    maps.extend_from_slice(&probs.data());
                }
                let head_ctx = matmul(tape, &probs, &vh)?;
                ctx = Some(match ctx {
                    Some(acc) => concat(tape, &acc, &head_ctx, 1)?,
                    None => head_ctx,
                });
            }
            let ctx = ctx.expect("n_heads >= 1");
            let proj = matmul(tape, &ctx, self.lookup(opts.overrides, &name("wo")))?;
            x = add(tape, &x, &proj)?;

            let ln2 = layer_norm(
                tape,
                &x,
                self.lookup(opts.overrides, &name("ln2_gamma")),
                self.lookup(opts.overrides, &name("ln2_beta")),
                cfg.ln_eps,
            )?;
            let h1 = add_bias(
                tape,
                &matmul(tape, &ln2, self.lookup(opts.overrides, &name("ffn_w1")))?,
                self.lookup(opts.overrides, &name("ffn_b1")),
            )?;
            let h1 = gelu(tape, &h1);
            let h2 = add_bias(
                tape,
                &matmul(tape, &h1, self.lookup(opts.overrides, &name("ffn_w2")))?,
                self.lookup(opts.overrides, &name("ffn_b2")),
            )?;
            x = add(tape, &x, &h2)?;
        }

        let hidden = layer_norm(
            tape,
            &x,
            self.lookup(opts.overrides, "final_ln_gamma"),
            self.lookup(opts.overrides, "final_ln_beta"),
            cfg.ln_eps,
        )?;
        let attn = match attn_maps {
            Some(maps) => Some(Tensor::from_vec(
                maps,
                &[cfg.n_layers, cfg.n_heads, n, l + n],
            )?),
            None => None,
        };
        Ok(ForwardResult { hidden, attn, block_inputs })
    }

    /// Hidden state at the input of each block when the frozen model runs on
    /// the prompt alone, stacked as [n_layers, l, d]. No gradient flows into
    /// the frozen parameters.
    pub fn extract_layer_states(&self, prompt_ids: &[usize]) -> Result<Tensor> {
        if prompt_ids.is_empty() {
            return Err(Error::SequenceEmpty);
        }
        let tape = Tape::new();
        let emb = self.embed(&tape, prompt_ids)?;
        let out = self.forward_inner(
            &tape,
            &emb,
            ForwardOpts { collect_block_inputs: true, ..ForwardOpts::default() },
        )?;
        let l = prompt_ids.len();
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(self.config.n_layers * l * d);
        for state in &out.block_inputs {
            data.extend_from_slice(&state.data());
        }
        Tensor::from_vec(data, &[self.config.n_layers, l, d])
    }

    /// Next-token logits for an LM input via the weight-tied embedding.
    pub(crate) fn lm_logits(
        &self,
        tape: &Tape,
        ids: &[usize],
        overrides: Option<&BTreeMap<String, Tensor>>,
    ) -> Result<Tensor> {
        let emb = self.embed_with(tape, ids, overrides)?;
        let out = self.forward_inner(tape, &emb, ForwardOpts { overrides, ..ForwardOpts::default() })?;
        let head = transpose(tape, self.lookup(overrides, "token_emb"))?;
        matmul(tape, &out.hidden, &head)
    }

    /// Mean next-token cross-entropy over whole sequences.
    pub fn lm_loss(&self, seqs: &[Vec<usize>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in seqs {
            if seq.len() < 2 {
                continue;
            }
            let tape = Tape::new();
            let logits = self.lm_logits(&tape, &seq[..seq.len() - 1], None)?;
            let loss = cross_entropy(&tape, &logits, &seq[1..])?;
            total += loss.item();
            count += 1;
        }
        if count == 0 {
            return Err(Error::Empty);
        }
        Ok(total / count as f64)
    }

    /// Serialize the frozen parameters alone (byte-deterministic).
    pub fn theta_json(&self) -> String {
        checkpoint::write_doc(&[], &self.params_data())
    }

    pub fn params_data(&self) -> BTreeMap<String, ParamData> {
        self.params
            .iter()
            .map(|(name, t)| {
                (name.clone(), ParamData { shape: t.shape(), data: t.to_vec() })
            })
            .collect()
    }

    pub fn config_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    /// Rebuild from a parsed checkpoint document carrying a `config` field.
    pub fn from_doc(doc: &checkpoint::Doc) -> Result<FrozenModel> {
        let config: ModelConfig = serde_json::from_value(
            doc.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Usage("checkpoint has no model config".into()))?,
        )
        .map_err(|e| Error::Usage(format!("bad model config in checkpoint: {}", e)))?;
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in layer_param_shapes(&config) {
            let p = doc
                .params
                .get(&name)
                .ok_or_else(|| Error::Usage(format!("checkpoint missing parameter {}", name)))?;
            if p.shape != shape {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint param {}: {:?} vs expected {:?}",
                    name, p.shape, shape
                )));
            }
            params.insert(name, Tensor::from_vec(p.data.clone(), &shape)?);
        }
        Ok(FrozenModel { config, params, frozen: true })
    }
}

/// Additive attention mask [n, l+n]: every real position sees all l prefix
/// slots, and position i sees real positions 0..=i.
fn causal_mask(n: usize, l: usize) -> Tensor {
    let cols = l + n;
    let mut data = vec![0.0; n * cols];
    for i in 0..n {
        for j in 0..n {
            if j > i {
                data[i * cols + l + j] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::from_vec(data, &[n, cols]).expect("mask shape")
}

/// Train a randomly initialized model as a tiny causal LM on `corpus`,
/// holding out the final tenth of the sequences, then freeze it. `steps = 0`
/// returns the seeded random initialization unchanged.
pub fn pretrain(
    config: &ModelConfig,
    corpus: &[Vec<usize>],
    steps: usize,
    lr: f64,
) -> Result<FrozenModel> {
    for seq in corpus {
        for &id in seq {
            if id >= config.vocab_size {
                return Err(Error::TokenOutOfRange { id, vocab: config.vocab_size });
            }
        }
    }
    let mut model = FrozenModel::init(config)?;
    if steps == 0 || corpus.is_empty() {
        return Ok(model);
    }
    model.frozen = false;
    for t in model.params.values() {
        t.set_requires_grad(true);
    }
    let train_len = if corpus.len() >= 2 {
        corpus.len() - (corpus.len() / 10).max(1)
    } else {
        corpus.len()
    };
    let train = &corpus[..train_len];
    let named: Vec<(String, Tensor)> =
        model.params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
    let mut opt = AdamW::new(lr, 0.0);
    for step in 0..steps {
        let seq = &train[step % train.len()];
        if seq.len() < 2 {
            continue;
        }
        let tape = Tape::new();
        let logits = model.lm_logits(&tape, &seq[..seq.len() - 1], None)?;
        let loss = cross_entropy(&tape, &logits, &seq[1..])?;
        if !loss.item().is_finite() {
            return Err(Error::NonFinite { step });
        }
        tape.backward(&loss)?;
        opt.step(&named)?;
        for (_, t) in &named {
            t.zero_grad();
        }
    }
    for t in model.params.values() {
        t.set_requires_grad(false);
        t.zero_grad();
    }
    model.frozen = true;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;

    fn small_config() -> ModelConfig {
        ModelConfig { vocab_size: 16, d_model: 8, n_layers: 2, n_heads: 2, d_ffn: 16, max_seq: 16, ln_eps: 1e-5, seed: 9 }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_config();
        let a = FrozenModel::init(&cfg).unwrap();
        let b = FrozenModel::init(&cfg).unwrap();
        assert_eq!(a.theta_json(), b.theta_json());
    }

    #[test]
    fn embed_commutes_with_id_concat() {
        let model = FrozenModel::init(&small_config()).unwrap();
        let tape = Tape::new();
        let empty = model.embed(&tape, &[]).unwrap();
        assert_eq!(empty.shape(), vec![0, 8]);

        let a = model.embed(&tape, &[1, 2]).unwrap();
        let b = model.embed(&tape, &[5]).unwrap();
        let ab = model.embed(&tape, &[1, 2, 5]).unwrap();
        let cat = concat(&tape, &a, &b, 0).unwrap();
        assert_eq!(ab.to_vec(), cat.to_vec());

        let row = model.embed(&tape, &[3]).unwrap();
        let table = model.param("token_emb").to_vec();
        assert_eq!(row.to_vec(), table[3 * 8..4 * 8].to_vec());
    }

    #[test]
    fn empty_prefix_is_identity() {
        let model = FrozenModel::init(&small_config()).unwrap();
        let tape = Tape::new();
        let emb = model.embed(&tape, &[1, 4, 2, 7]).unwrap();
        let (h_none, _) = model.forward(&tape, &emb, None, false).unwrap();
        let empty = KvPrefix::empty(2, 8);
        let (h_zero, _) = model.forward(&tape, &emb, Some(&empty), false).unwrap();
        assert_eq!(h_none.to_vec(), h_zero.to_vec());
    }

    #[test]
    fn captured_attention_rows_sum_to_one() {
        let model = FrozenModel::init(&small_config()).unwrap();
        let tape = Tape::new();
        let mut r = rng::seeded(3);
        let prefix = KvPrefix {
            layers: (0..2)
                .map(|_| LayerKv {
                    keys: Tensor::from_vec(rng::normal_vec(&mut r, 3 * 8, 0.5), &[3, 8]).unwrap(),
                    values: Tensor::from_vec(rng::normal_vec(&mut r, 3 * 8, 0.5), &[3, 8]).unwrap(),
                })
                .collect(),
        };
        let emb = model.embed(&tape, &[1, 4, 2, 7, 3]).unwrap();
        let (_, attn) = model.forward(&tape, &emb, Some(&prefix), true).unwrap();
        let attn = attn.unwrap();
        assert_eq!(attn.shape(), vec![2, 2, 5, 8]);
        let data = attn.to_vec();
        for row in data.chunks(8) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_valued_prefix_still_perturbs_output() {
        // Attention mass leaks onto the zero value vectors.
        let model = FrozenModel::init(&small_config()).unwrap();
        let tape = Tape::new();
        let mut r = rng::seeded(8);
        let prefix = KvPrefix {
            layers: (0..2)
                .map(|_| LayerKv {
                    keys: Tensor::from_vec(rng::normal_vec(&mut r, 2 * 8, 1.0), &[2, 8]).unwrap(),
                    values: Tensor::zeros(&[2, 8]),
                })
                .collect(),
        };
        let emb = model.embed(&tape, &[1, 4, 2]).unwrap();
        let (base, _) = model.forward(&tape, &emb, None, false).unwrap();
        let (with, _) = model.forward(&tape, &emb, Some(&prefix), false).unwrap();
        assert_ne!(base.to_vec(), with.to_vec());
    }

    #[test]
    fn prefix_layer_mismatch_is_rejected() {
        let model = FrozenModel::init(&small_config()).unwrap();
        let tape = Tape::new();
        let emb = model.embed(&tape, &[1]).unwrap();
        let bad = KvPrefix::empty(3, 8);
        assert!(matches!(
            model.forward(&tape, &emb, Some(&bad), false).unwrap_err(),
            Error::PrefixLayerMismatch { got: 3, want: 2 }
        ));
    }

    #[test]
    fn sequence_too_long_is_rejected() {
        let model = FrozenModel::init(&small_config()).unwrap();
        let tape = Tape::new();
        let ids: Vec<usize> = (0..17).map(|i| i % 16).collect();
        let emb = model.embed(&tape, &ids).unwrap();
        assert!(matches!(
            model.forward(&tape, &emb, None, false).unwrap_err(),
            Error::SequenceTooLong { len: 17, max: 16 }
        ));
    }

    #[test]
    fn layer_states_shape_and_first_block_input() {
        let mut cfg = small_config();
        cfg.n_layers = 1;
        let model = FrozenModel::init(&cfg).unwrap();
        let states = model.extract_layer_states(&[2, 5, 7]).unwrap();
        assert_eq!(states.shape(), vec![1, 3, 8]);

        let tape = Tape::new();
        let emb = model.embed(&tape, &[2, 5, 7]).unwrap();
        let pos = narrow(&tape, model.param("pos_emb"), 0, 0, 3).unwrap();
        let expect = add(&tape, &emb, &pos).unwrap();
        assert_eq!(states.to_vec(), expect.to_vec());

        let again = model.extract_layer_states(&[2, 5, 7]).unwrap();
        assert_eq!(states.to_vec(), again.to_vec());
    }

    #[test]
    fn causality_sweep() {
        let model = FrozenModel::init(&small_config()).unwrap();
        let ids = [1usize, 4, 2, 7, 3, 5];
        let tape = Tape::new();
        let base_emb = model.embed(&tape, &ids).unwrap();
        let (base, _) = model.forward(&tape, &base_emb, None, false).unwrap();
        let base = base.to_vec();
        for t in 0..ids.len() {
            let perturbed = {
                let mut data = base_emb.to_vec();
                data[t * 8] += 0.25;
                Tensor::from_vec(data, &[ids.len(), 8]).unwrap()
            };
            let (out, _) = model.forward(&tape, &perturbed, None, false).unwrap();
            let out = out.to_vec();
            for i in 0..ids.len() {
                let row_equal = out[i * 8..(i + 1) * 8] == base[i * 8..(i + 1) * 8];
                if i < t {
                    assert!(row_equal, "token {} leaked into earlier row {}", t, i);
                }
                if i == t {
                    assert!(!row_equal, "perturbing token {} left its own row unchanged", t);
                }
            }
        }
    }

    #[test]
    fn pretrain_beats_uniform_baseline() {
        let cfg = ModelConfig { vocab_size: 64, max_seq: 32, ..small_config() };
        let corpus = data::synthetic_lm_corpus(64, 60, 24, 7);
        let model = pretrain(&cfg, &corpus, 500, 3e-3).unwrap();
        assert!(model.is_frozen());
        let held_out = &corpus[corpus.len() - 6..];
        let loss = model.lm_loss(held_out).unwrap();
        assert!(loss < (64f64).ln(), "held-out loss {} not below uniform {}", loss, (64f64).ln());
    }

    #[test]
    fn pretrain_zero_steps_is_seeded_init() {
        let cfg = small_config();
        let corpus = data::synthetic_lm_corpus(16, 8, 12, 3);
        let model = pretrain(&cfg, &corpus, 0, 1e-3).unwrap();
        assert_eq!(model.theta_json(), FrozenModel::init(&cfg).unwrap().theta_json());
    }

    #[test]
    fn pretrain_is_deterministic() {
        let cfg = small_config();
        let corpus = data::synthetic_lm_corpus(16, 12, 12, 3);
        let a = pretrain(&cfg, &corpus, 40, 1e-3).unwrap();
        let b = pretrain(&cfg, &corpus, 40, 1e-3).unwrap();
        assert_eq!(a.theta_json(), b.theta_json());
    }

    #[test]
    fn pretrain_rejects_out_of_vocab_tokens() {
        let cfg = small_config();
        assert!(matches!(
            pretrain(&cfg, &[vec![1, 99]], 1, 1e-3).unwrap_err(),
            Error::TokenOutOfRange { id: 99, vocab: 16 }
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_theta() {
        let model = FrozenModel::init(&small_config()).unwrap();
        let text = checkpoint::write_doc(
            &[("config", model.config_json())],
            &model.params_data(),
        );
        let doc = checkpoint::read_doc(&text).unwrap();
        let back = FrozenModel::from_doc(&doc).unwrap();
        assert_eq!(model.theta_json(), back.theta_json());
        assert_eq!(model.config, back.config);
    }
}
