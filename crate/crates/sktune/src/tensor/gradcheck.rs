//! Central finite-difference verification of the reverse-mode gradients.

use super::{Tape, Tensor};
use crate::error::Result;

/// Compare the tape gradient of `f` at `x` against central finite differences
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
///
/// Returns `max_i |g_ad[i] - g_fd[i]| / max(1, |g_fd[i]|)`. `f` must be
/// deterministic; `eps` should sit in `[1e-5, 1e-2]`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    x.set_requires_grad(true);
    x.zero_grad();
    let tape = Tape::new();
    let loss = f(&tape, x)?;
    tape.backward(&loss)?;
    let g_ad = x.grad().unwrap_or_else(|| vec![0.0; x.len()]);
    x.zero_grad();

    let n = x.len();
    let mut max_rel = 0.0_f64;
    for i in 0..n {
        let orig = x.data()[i];
        let eval = |v: f64| -> Result<f64> {
            x.apply_data(|d| d[i] = v);
            let t = Tape::new();
            let out = f(&t, x);
            x.apply_data(|d| d[i] = orig);
            Ok(out?.item())
        };
        let plus = eval(orig + eps)?;
        let minus = eval(orig - eps)?;
        let g_fd = (plus - minus) / (2.0 * eps);
        let rel = (g_ad[i] - g_fd).abs() / g_fd.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
