//! Forward op constructors. Each records one tape node when any input is
//! trainable.

use super::{numel, Rule, Tape, Tensor};
use crate::error::{Error, Result};

/// Interpret a 2D or 3D shape as (batch, rows, cols); 2D is batch 1.
pub(crate) fn batch_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => unreachable!("matmul operands are rank 2 or 3"),
    }
}

/// Elementwise sum of two same-shape tensors.
pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "add {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let out = Tensor::from_vec(data, &a.shape())?;
    tape.record(Rule::Add, &[a, b], &out);
    Ok(out)
}

/// `a[.., d] + bias[d]`, broadcast over every leading row.
pub fn add_bias(tape: &Tape, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let shape = a.shape();
    let d = bias.len();
    if bias.ndim() != 1 || shape.last() != Some(&d) {
        return Err(Error::ShapeMismatch(format!(
            "add_bias {:?} vs {:?}",
            shape,
            bias.shape()
        )));
    }
    let bd = bias.to_vec();
    let data: Vec<f64> = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + bd[i % d])
        .collect();
    let out = Tensor::from_vec(data, &shape)?;
    tape.record(Rule::AddBias, &[a, bias], &out);
    Ok(out)
}

/// Multiply every element by a constant.
pub fn scale(tape: &Tape, a: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|v| c * v).collect();
    let out = Tensor::from_vec(data, &a.shape()).expect("scale shape");
    tape.record(Rule::Scale(c), &[a], &out);
    out
}

/// Matrix product over rank-2 or rank-3 operands. Leading batch dimensions
/// must match or be 1 (broadcast); inner dimensions must agree.
pub fn matmul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let a_shape = a.shape();
    let b_shape = b.shape();
    if !(2..=3).contains(&a_shape.len()) || !(2..=3).contains(&b_shape.len()) {
        return Err(Error::ShapeMismatch(format!(
            "matmul needs rank 2 or 3 operands, got {:?} and {:?}",
            a_shape, b_shape
        )));
    }
    let (ba, m, k) = batch_dims(&a_shape);
    let (bb, k2, p) = batch_dims(&b_shape);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims differ: {:?} vs {:?}",
            a_shape, b_shape
        )));
    }
    if ba != bb && ba != 1 && bb != 1 {
        return Err(Error::ShapeMismatch(format!(
            "matmul batch dims {} vs {} not broadcastable",
            ba, bb
        )));
    }
    let bo = ba.max(bb);
    let ad = a.data();
    let bd = b.data();
    let mut data = vec![0.0; bo * m * p];
    for batch in 0..bo {
        let ao = if ba == 1 { 0 } else { batch * m * k };
        let boff = if bb == 1 { 0 } else { batch * k * p };
        let out_off = batch * m * p;
        for i in 0..m {
            for q in 0..k {
                let av = ad[ao + i * k + q];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[boff + q * p..boff + (q + 1) * p];
                let orow = &mut data[out_off + i * p..out_off + (i + 1) * p];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    drop(ad);
    drop(bd);
    let out_shape: Vec<usize> = if a_shape.len() == 2 && b_shape.len() == 2 {
        vec![m, p]
    } else {
        vec![bo, m, p]
    };
    let out = Tensor::from_vec(data, &out_shape)?;
    tape.record(Rule::Matmul, &[a, b], &out);
    Ok(out)
}

/// 2D transpose.
pub fn transpose(tape: &Tape, a: &Tensor) -> Result<Tensor> {
    let shape = a.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!("transpose needs rank 2, got {:?}", shape)));
    }
    let (r, c) = (shape[0], shape[1]);
    let ad = a.data();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = ad[i * c + j];
        }
    }
    drop(ad);
    let out = Tensor::from_vec(data, &[c, r])?;
    tape.record(Rule::Transpose, &[a], &out);
    Ok(out)
}

/// Append `b` after `a` along `axis`; backward splits the incoming gradient.
pub fn concat(tape: &Tape, a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    let a_shape = a.shape();
    let b_shape = b.shape();
    if a_shape.len() != b_shape.len() || axis >= a_shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "concat axis {} of {:?} and {:?}",
            axis, a_shape, b_shape
        )));
    }
    for (i, (x, y)) in a_shape.iter().zip(&b_shape).enumerate() {
        if i != axis && x != y {
            return Err(Error::ShapeMismatch(format!(
                "concat non-axis dims differ: {:?} vs {:?}",
                a_shape, b_shape
            )));
        }
    }
    let inner: usize = a_shape[axis + 1..].iter().product();
    let outer = numel(&a_shape[..axis]);
    let a_block = a_shape[axis] * inner;
    let b_block = b_shape[axis] * inner;
    let ad = a.data();
    let bd = b.data();
    let mut data = vec![0.0; ad.len() + bd.len()];
    for o in 0..outer {
        let base = o * (a_block + b_block);
        data[base..base + a_block].copy_from_slice(&ad[o * a_block..(o + 1) * a_block]);
        data[base + a_block..base + a_block + b_block]
            .copy_from_slice(&bd[o * b_block..(o + 1) * b_block]);
    }
    drop(ad);
    drop(bd);
    let mut out_shape = a_shape.clone();
    out_shape[axis] += b_shape[axis];
    let out = Tensor::from_vec(data, &out_shape)?;
    tape.record(Rule::Concat { axis }, &[a, b], &out);
    Ok(out)
}

/// Contiguous slice of length `len` starting at `start` along `axis`.
pub fn narrow(tape: &Tape, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let shape = a.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::ShapeMismatch(format!(
            "narrow axis {} range {}..{} of {:?}",
            axis,
            start,
            start + len,
            shape
        )));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer = numel(&shape[..axis]);
    let a_block = shape[axis] * inner;
    let o_block = len * inner;
    let ad = a.data();
    let mut data = vec![0.0; outer * o_block];
    for o in 0..outer {
        let src = o * a_block + start * inner;
        data[o * o_block..(o + 1) * o_block].copy_from_slice(&ad[src..src + o_block]);
    }
    drop(ad);
    let mut out_shape = shape.clone();
    out_shape[axis] = len;
    let out = Tensor::from_vec(data, &out_shape)?;
    tape.record(Rule::Narrow { axis, start }, &[a], &out);
    Ok(out)
}

/// Reinterpret the data under a new shape with the same element count.
pub fn reshape(tape: &Tape, a: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    if numel(new_shape) != a.len() {
        return Err(Error::ShapeMismatch(format!(
            "reshape {:?} -> {:?}",
            a.shape(),
            new_shape
        )));
    }
    let out = Tensor::from_vec(a.to_vec(), new_shape)?;
    tape.record(Rule::Reshape, &[a], &out);
    Ok(out)
}

/// Softmax along `axis`, computed with max-subtraction for stability.
pub fn softmax(tape: &Tape, a: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = a.shape();
    if axis >= shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "softmax axis {} of {:?}",
            axis, shape
        )));
    }
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer = numel(&shape[..axis]);
    let ad = a.data();
    let mut data = vec![0.0; ad.len()];
    for o in 0..outer {
        for j in 0..inner {
            let base = o * axis_len * inner + j;
            let mut max = f64::NEG_INFINITY;
            for k in 0..axis_len {
                max = max.max(ad[base + k * inner]);
            }
            let mut denom = 0.0;
            for k in 0..axis_len {
                let e = (ad[base + k * inner] - max).exp();
                data[base + k * inner] = e;
                denom += e;
            }
            for k in 0..axis_len {
                data[base + k * inner] /= denom;
            }
        }
    }
    drop(ad);
    let out = Tensor::from_vec(data, &shape)?;
    tape.record(Rule::Softmax { axis }, &[a], &out);
    Ok(out)
}

/// Per-row zero-mean unit-variance normalization of the trailing dim, then an
/// affine map by `gamma` and `beta`.
pub fn layer_norm(tape: &Tape, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let shape = x.shape();
    let d = *shape.last().ok_or_else(|| Error::ShapeMismatch("layer_norm on rank-0".into()))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::ShapeMismatch(format!(
            "layer_norm dims: x {:?}, gamma {:?}, beta {:?}",
            shape,
            gamma.shape(),
            beta.shape()
        )));
    }
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let rows = xd.len() / d;
    let mut data = vec![0.0; xd.len()];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let std = (var + eps).sqrt();
        for j in 0..d {
            data[r * d + j] = gd[j] * (row[j] - mean) / std + bd[j];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    let out = Tensor::from_vec(data, &shape)?;
    tape.record(Rule::LayerNorm { eps }, &[x, gamma, beta], &out);
    Ok(out)
}

/// GELU with the tanh approximation.
pub fn gelu(tape: &Tape, a: &Tensor) -> Tensor {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let data: Vec<f64> = a
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (k * (v + 0.044715 * v * v * v)).tanh()))
        .collect();
    let out = Tensor::from_vec(data, &a.shape()).expect("gelu shape");
    tape.record(Rule::Gelu, &[a], &out);
    out
}

/// Row gather from an embedding table `[vocab, d]`; backward scatters into the
/// gathered rows.
pub fn gather_rows(tape: &Tape, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let shape = table.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!("gather table rank {:?}", shape)));
    }
    let (vocab, d) = (shape[0], shape[1]);
    let td = table.data();
    let mut data = vec![0.0; ids.len() * d];
    for (row, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        data[row * d..(row + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
    }
    drop(td);
    let out = Tensor::from_vec(data, &[ids.len(), d])?;
    tape.record(Rule::Gather { ids: ids.to_vec() }, &[table], &out);
    Ok(out)
}

/// Sum of all elements, as a one-element tensor.
pub fn sum(tape: &Tape, a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().sum();
    let out = Tensor::scalar(s);
    tape.record(Rule::Sum, &[a], &out);
    out
}

/// Mean of all elements, as a one-element tensor.
pub fn mean(tape: &Tape, a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().sum();
    let out = Tensor::scalar(s / a.len() as f64);
    tape.record(Rule::Mean, &[a], &out);
    out
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(tape: &Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "cross_entropy logits {:?} vs {} labels",
            shape,
            labels.len()
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    if b == 0 {
        return Err(Error::Empty);
    }
    let ld = logits.data();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        let row = &ld[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row {
            denom += (v - max).exp();
        }
        loss += max + denom.ln() - row[y];
    }
    drop(ld);
    let out = Tensor::scalar(loss / b as f64);
    tape.record(Rule::CrossEntropy { labels: labels.to_vec() }, &[logits], &out);
    Ok(out)
}
