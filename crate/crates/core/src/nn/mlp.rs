//! Two-layer classifier `[in, hidden, out]`: linear → ReLU → dropout →
//! linear → softmax. Used for expert heads and fusion towers.

use super::encoder::two_slots;
use super::init::{glorot, ParamRng};
use super::layers::{affine_rows, affine_rows_backward, softmax, DropoutStream};
use super::loss::softmax_cross_entropy_grad;
use super::params::{Gradients, ParamSet};
use super::tensor::Tensor;
use crate::error::{check_len, Error, Result};

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;

const SITE_HIDDEN: u64 = 11;

/// Gain applied to the output layer at init so fresh classifiers start
/// near the uniform distribution.
const OUTPUT_INIT_GAIN: f64 = 0.1;

pub fn init_mlp(
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    rng: &mut ParamRng,
) -> Result<ParamSet> {
    if in_dim == 0 || hidden == 0 || out_dim == 0 {
        return Err(Error::Config("classifier dimensions must be positive".into()));
    }
    let mut p = ParamSet::new();
    p.push("fc1.w", glorot(rng, hidden, in_dim, 1.0))?;
    p.push("fc1.b", Tensor::zeros(&[hidden]))?;
    p.push("fc2.w", glorot(rng, out_dim, hidden, OUTPUT_INIT_GAIN))?;
    p.push("fc2.b", Tensor::zeros(&[out_dim]))?;
    Ok(p)
}

/// `(in, hidden, out)` of a classifier parameter set.
pub fn mlp_dims(params: &ParamSet) -> Result<(usize, usize, usize)> {
    let bad = || Error::Config("classifier parameter layout mismatch".into());
    if params.len() != 4 {
        return Err(bad());
    }
    let (hidden, in_dim) = match params.tensor(W1).shape() {
        [h, i] => (*h, *i),
        _ => return Err(bad()),
    };
    let out_dim = match params.tensor(W2).shape() {
        [o, h] if *h == hidden => *o,
        _ => return Err(bad()),
    };
    if params.tensor(B1).len() != hidden || params.tensor(B2).len() != out_dim {
        return Err(bad());
    }
    Ok((in_dim, hidden, out_dim))
}

#[derive(Debug, Clone)]
pub struct MlpTrace {
    input: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    mask: Option<Vec<f64>>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl MlpTrace {
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }
}

pub fn mlp_forward(
    params: &ParamSet,
    input: &[f64],
    train_mode: bool,
    dropout: f64,
    stream: DropoutStream,
) -> Result<MlpTrace> {
    let (in_dim, hidden, out_dim) = mlp_dims(params)?;
    check_len(in_dim, input.len(), "classifier input")?;
    let pre = affine_rows(input, 1, in_dim, params.data(W1), params.data(B1), hidden);
    let mut h: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
    let mask = (train_mode && dropout > 0.0).then(|| stream.mask(SITE_HIDDEN, hidden, dropout));
    if let Some(m) = &mask {
        h.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
    }
    let logits = affine_rows(&h, 1, hidden, params.data(W2), params.data(B2), out_dim);
    let probs = softmax(&logits);
    Ok(MlpTrace {
        input: input.to_vec(),
        pre,
        hidden: h,
        mask,
        logits,
        probs,
    })
}

/// Backward from a logit gradient. Returns the input gradient when
/// `need_input_grad` is set, otherwise an empty vector.
pub fn mlp_backward(
    params: &ParamSet,
    trace: &MlpTrace,
    d_logits: &[f64],
    grads: &mut Gradients,
    need_input_grad: bool,
) -> Result<Vec<f64>> {
    let (in_dim, hidden, out_dim) = mlp_dims(params)?;
    if !grads.matches(params) || trace.input.len() != in_dim || trace.hidden.len() != hidden {
        return Err(Error::IncompleteTrace(
            "trace was not produced by these classifier parameters".into(),
        ));
    }
    check_len(out_dim, d_logits.len(), "classifier logit gradient")?;
    let (dw, db) = two_slots(grads, W2, B2);
    let mut d_h = affine_rows_backward(&trace.hidden, 1, hidden, params.data(W2), d_logits, out_dim, dw, db, true);
    if let Some(m) = &trace.mask {
        d_h.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
    }
    d_h.iter_mut()
        .zip(&trace.pre)
        .for_each(|(d, &p)| if p <= 0.0 { *d = 0.0 });
    let (dw, db) = two_slots(grads, W1, B1);
    Ok(affine_rows_backward(
        &trace.input,
        1,
        in_dim,
        params.data(W1),
        &d_h,
        hidden,
        dw,
        db,
        need_input_grad,
    ))
}

/// Backward of `weight * cross_entropy(probs, label)`.
pub fn mlp_backward_ce(
    params: &ParamSet,
    trace: &MlpTrace,
    label: usize,
    weight: f64,
    grads: &mut Gradients,
    need_input_grad: bool,
) -> Result<Vec<f64>> {
    if label >= trace.probs.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: trace.probs.len(),
        });
    }
    let d_logits = softmax_cross_entropy_grad(&trace.probs, label, weight);
    mlp_backward(params, trace, &d_logits, grads, need_input_grad)
}
