//! Finite-difference verification of every tensor primitive and of both
//! semantic-knowledge losses end-to-end on a tiny model.

use rand::Rng as _;

use crate::data::TaskKind;
use crate::error::Result;
use crate::model::{FrozenModel, ModelConfig};
use crate::peft::{MethodKind, MethodSpec, PeftMethod};
use crate::rng;
use crate::tensor::{
    add, add_bias, concat, cross_entropy, gather_rows, gelu, grad_check, layer_norm, matmul, mean,
    narrow, reshape, scale, softmax, sum, transpose, Tape, Tensor,
};

pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

pub struct GradCheckReport {
    pub eps: f64,
    pub entries: Vec<CheckEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst() < tolerance
    }
}

fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..n).map(|_| r.gen_range(-3.0..3.0)).collect()
}

fn fixed(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::from_vec(rand_vec(seed, shape.iter().product()), shape).expect("shape")
}

/// Check every primitive op and both end-to-end semantic-knowledge losses
/// against central finite differences. Each op appears exactly once.
pub fn run_gradcheck(eps: f64) -> Result<GradCheckReport> {
    let mut entries = Vec::new();
    let mut check = |name: &str,
                     x: Tensor,
                     f: &dyn Fn(&Tape, &Tensor) -> Result<Tensor>|
     -> Result<()> {
        let err = grad_check(f, &x, eps)?;
        entries.push(CheckEntry { name: name.to_string(), max_rel_err: err });
        Ok(())
    };

    let x23 = || Tensor::param(rand_vec(101, 6), &[2, 3]).expect("param");
    check("add", x23(), &|t, x| {
        let other = fixed(1, &[2, 3]);
        Ok(sum(t, &add(t, x, &other)?))
    })?;
    check("add_bias", x23(), &|t, x| {
        let bias = fixed(2, &[3]);
        Ok(mean(t, &add_bias(t, x, &bias)?))
    })?;
    check("scale", x23(), &|t, x| Ok(sum(t, &scale(t, x, 0.37))))?;
    check("matmul", x23(), &|t, x| {
        let w = fixed(3, &[3, 2]);
        Ok(sum(t, &gelu(t, &matmul(t, x, &w)?)))
    })?;
    check("transpose", x23(), &|t, x| {
        let w = fixed(4, &[2, 2]);
        Ok(sum(t, &matmul(t, &transpose(t, x)?, &w)?))
    })?;
    check("concat", x23(), &|t, x| {
        let other = fixed(5, &[1, 3]);
        let joined = concat(t, x, &other, 0)?;
        Ok(sum(t, &gelu(t, &joined)))
    })?;
    check("narrow", x23(), &|t, x| {
        let sliced = narrow(t, x, 1, 1, 2)?;
        Ok(sum(t, &gelu(t, &sliced)))
    })?;
    check("reshape", x23(), &|t, x| {
        let y = reshape(t, x, &[3, 2])?;
        let w = fixed(6, &[2, 1]);
        Ok(sum(t, &matmul(t, &y, &w)?))
    })?;
    check("softmax", x23(), &|t, x| {
        let y = softmax(t, x, 1)?;
        let w = fixed(7, &[3, 1]);
        Ok(sum(t, &matmul(t, &y, &w)?))
    })?;
    check("layer_norm", x23(), &|t, x| {
        let gamma = fixed(8, &[3]);
        let beta = fixed(9, &[3]);
        let y = layer_norm(t, x, &gamma, &beta, 1e-5)?;
        Ok(sum(t, &gelu(t, &y)))
    })?;
    check("gelu", x23(), &|t, x| Ok(sum(t, &gelu(t, x))))?;
    check("embedding", Tensor::param(rand_vec(102, 12), &[4, 3]).expect("param"), &|t, x| {
        let rows = gather_rows(t, x, &[0, 2, 2])?;
        Ok(sum(t, &gelu(t, &rows)))
    })?;
    check("sum", x23(), &|t, x| Ok(sum(t, x)))?;
    check("mean", x23(), &|t, x| Ok(mean(t, x)))?;
    check("cross_entropy", x23(), &|t, x| cross_entropy(t, x, &[1, 0]))?;

    // End-to-end losses on a d=8, m=2, heads=2 model: check the gradient of
    // every trainable tensor of each method.
    let model = FrozenModel::init(&ModelConfig::tiny(77))?;
    let prompt = [3usize, 4, 5, 6];
    let input = [7usize, 8, 9];
    for (name, kind) in [
        ("sk_prompt_loss", MethodKind::SkPrompt),
        ("sk_prefix_loss", MethodKind::SkPrefix),
    ] {
        let method = PeftMethod::build(&model, &MethodSpec::new(kind), TaskKind::Sequence, &prompt, 55)?;
        let mut worst = 0.0_f64;
        for (_, tensor) in method.trainable() {
            let err = grad_check(
                |tape, _| {
                    let logits = method.forward(&model, tape, &input)?;
                    cross_entropy(tape, &logits, &[1])
                },
                &tensor,
                eps,
            )?;
            worst = worst.max(err);
        }
        for (_, tensor) in method.trainable() {
            tensor.zero_grad();
        }
        entries.push(CheckEntry { name: name.to_string(), max_rel_err: worst });
    }

    Ok(GradCheckReport { eps, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_gradcheck_passes() {
        let report = run_gradcheck(1e-3).unwrap();
        assert!(report.passed(1e-4), "worst {}", report.worst());
        // every op reported exactly once
        let mut names: Vec<&str> = report.entries.iter().map(|e| e.name.as_str()).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
        assert!(names.contains(&"sk_prompt_loss"));
        assert!(names.contains(&"sk_prefix_loss"));
    }
}
