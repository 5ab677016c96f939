//! Single-layer transformer encoder over a flat feature vector.
//!
//! The flat input is viewed as `tokens × width` (row-major), sinusoidal
//! positional encodings are added, and one post-norm encoder block is
//! applied: multi-head self-attention, residual + layer norm, a ReLU
//! feed-forward block, residual + layer norm. The output is flattened back
//! to the input length.

use serde::{Deserialize, Serialize};

use super::init::{glorot, ParamRng};
use super::layers::{
    affine_rows, affine_rows_backward, dot, layer_norm_rows, layer_norm_rows_backward,
    softmax_backward, softmax_in_place, DropoutStream,
};
use super::params::{Gradients, ParamSet};
use super::tensor::Tensor;
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    /// 912 = 24 tokens × 38 features, two heads of width 19, ×4 feed-forward.
    fn default() -> Self {
        EncoderConfig {
            tokens: 24,
            width: 38,
            heads: 2,
            ff_dim: 152,
            dropout: 0.2,
        }
    }
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.tokens * self.width
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.width == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

const WQ: usize = 0;
const BQ: usize = 1;
const WK: usize = 2;
const BK: usize = 3;
const WV: usize = 4;
const BV: usize = 5;
const WO: usize = 6;
const BO: usize = 7;
const LN1_G: usize = 8;
const LN1_B: usize = 9;
const FF1_W: usize = 10;
const FF1_B: usize = 11;
const FF2_W: usize = 12;
const FF2_B: usize = 13;
const LN2_G: usize = 14;
const LN2_B: usize = 15;

const SITE_ATTN: u64 = 1;
const SITE_FF: u64 = 2;

fn layout(cfg: &EncoderConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (w, f) = (cfg.width, cfg.ff_dim);
    vec![
        ("attn.wq", vec![w, w]),
        ("attn.bq", vec![w]),
        ("attn.wk", vec![w, w]),
        ("attn.bk", vec![w]),
        ("attn.wv", vec![w, w]),
        ("attn.bv", vec![w]),
        ("attn.wo", vec![w, w]),
        ("attn.bo", vec![w]),
        ("ln1.gamma", vec![w]),
        ("ln1.beta", vec![w]),
        ("ff1.w", vec![f, w]),
        ("ff1.b", vec![f]),
        ("ff2.w", vec![w, f]),
        ("ff2.b", vec![w]),
        ("ln2.gamma", vec![w]),
        ("ln2.beta", vec![w]),
    ]
}

/// Freshly initialized encoder parameters.
pub fn init_encoder(cfg: &EncoderConfig, rng: &mut ParamRng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    for (name, shape) in layout(cfg) {
        let t = match shape.as_slice() {
            [o, i] => glorot(rng, *o, *i, 1.0),
            _ if name.ends_with("gamma") => Tensor::filled(&shape, 1.0),
            _ => Tensor::zeros(&shape),
        };
        p.push(name, t)?;
    }
    Ok(p)
}

/// Checks that `params` has the names and shapes this config expects.
pub fn check_encoder_params(cfg: &EncoderConfig, params: &ParamSet) -> Result<()> {
    let expected = layout(cfg);
    let ok = params.len() == expected.len()
        && expected
            .iter()
            .enumerate()
            .all(|(i, (n, s))| params.name(i) == *n && params.tensor(i).shape() == s.as_slice());
    if ok {
        Ok(())
    } else {
        Err(Error::Config("encoder parameter layout mismatch".into()))
    }
}

/// Sinusoidal positional encoding, `tokens × width`.
pub fn positional_encoding(tokens: usize, width: usize) -> Vec<f64> {
    let mut pe = vec![0.0; tokens * width];
    for t in 0..tokens {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / width as f64);
            pe[t * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    cfg: EncoderConfig,
    h0: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × tokens × tokens
    attn: Vec<f64>,
    o: Vec<f64>,
    mask_attn: Option<Vec<f64>>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    n1: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
    mask_ff: Option<Vec<f64>>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    output: Vec<f64>,
}

impl EncoderTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Attention probabilities of one head, `tokens × tokens`.
    pub fn attention(&self, head: usize) -> &[f64] {
        let tt = self.cfg.tokens * self.cfg.tokens;
        &self.attn[head * tt..(head + 1) * tt]
    }
}

/// Forward pass. Dropout is active only when `train_mode` is set.
pub fn encoder_forward(
    cfg: &EncoderConfig,
    params: &ParamSet,
    input: &[f64],
    train_mode: bool,
    stream: DropoutStream,
) -> Result<Vec<f64>> {
    Ok(encoder_forward_traced(cfg, params, input, train_mode, stream)?.output)
}

pub fn encoder_forward_traced(
    cfg: &EncoderConfig,
    params: &ParamSet,
    input: &[f64],
    train_mode: bool,
    stream: DropoutStream,
) -> Result<EncoderTrace> {
    check_len(cfg.input_dim(), input.len(), "encoder input")?;
    check_encoder_params(cfg, params)?;
    let (t, w, f) = (cfg.tokens, cfg.width, cfg.ff_dim);
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let pe = positional_encoding(t, w);
    let h0: Vec<f64> = input.iter().zip(&pe).map(|(x, p)| x + p).collect();

    let q = affine_rows(&h0, t, w, params.data(WQ), params.data(BQ), w);
    let k = affine_rows(&h0, t, w, params.data(WK), params.data(BK), w);
    let v = affine_rows(&h0, t, w, params.data(WV), params.data(BV), w);

    let mut attn = vec![0.0; cfg.heads * t * t];
    let mut o = vec![0.0; t * w];
    for h in 0..cfg.heads {
        let off = h * hd;
        let a = &mut attn[h * t * t..(h + 1) * t * t];
        for i in 0..t {
            let row = &mut a[i * t..(i + 1) * t];
            let qi = &q[i * w + off..i * w + off + hd];
            for (j, s) in row.iter_mut().enumerate() {
                *s = scale * dot(qi, &k[j * w + off..j * w + off + hd]);
            }
            softmax_in_place(row);
            let oi = &mut o[i * w + off..i * w + off + hd];
            for (j, &p) in row.iter().enumerate() {
                for (od, vd) in oi.iter_mut().zip(&v[j * w + off..j * w + off + hd]) {
                    *od += p * vd;
                }
            }
        }
    }

    let mut z = affine_rows(&o, t, w, params.data(WO), params.data(BO), w);
    let mask_attn = (train_mode && cfg.dropout > 0.0).then(|| stream.mask(SITE_ATTN, t * w, cfg.dropout));
    if let Some(m) = &mask_attn {
        z.iter_mut().zip(m).for_each(|(zi, mi)| *zi *= mi);
    }
    let r1: Vec<f64> = h0.iter().zip(&z).map(|(a, b)| a + b).collect();
    let (n1, xhat1, rstd1) = layer_norm_rows(&r1, t, w, params.data(LN1_G), params.data(LN1_B));

    let f1 = affine_rows(&n1, t, w, params.data(FF1_W), params.data(FF1_B), f);
    let g: Vec<f64> = f1.iter().map(|&x| x.max(0.0)).collect();
    let mut f2 = affine_rows(&g, t, f, params.data(FF2_W), params.data(FF2_B), w);
    let mask_ff = (train_mode && cfg.dropout > 0.0).then(|| stream.mask(SITE_FF, t * w, cfg.dropout));
    if let Some(m) = &mask_ff {
        f2.iter_mut().zip(m).for_each(|(x, mi)| *x *= mi);
    }
    let r2: Vec<f64> = n1.iter().zip(&f2).map(|(a, b)| a + b).collect();
    let (output, xhat2, rstd2) = layer_norm_rows(&r2, t, w, params.data(LN2_G), params.data(LN2_B));

    Ok(EncoderTrace {
        cfg: *cfg,
        h0,
        q,
        k,
        v,
        attn,
        o,
        mask_attn,
        xhat1,
        rstd1,
        n1,
        f1,
        g,
        mask_ff,
        xhat2,
        rstd2,
        output,
    })
}

/// Reverse pass. Accumulates parameter gradients into `grads` (skipping
/// absent entries) and returns the gradient w.r.t. the input.
pub fn encoder_backward(
    params: &ParamSet,
    trace: &EncoderTrace,
    d_output: &[f64],
    grads: &mut Gradients,
) -> Result<Vec<f64>> {
    let cfg = &trace.cfg;
    if check_encoder_params(cfg, params).is_err() || !grads.matches(params) {
        return Err(Error::IncompleteTrace(
            "trace was not produced by these encoder parameters".into(),
        ));
    }
    check_len(cfg.input_dim(), d_output.len(), "encoder output gradient")?;
    let (t, w, f) = (cfg.tokens, cfg.width, cfg.ff_dim);
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    // LN2
    let (dg2, db2) = two_slots(grads, LN2_G, LN2_B);
    let d_r2 = layer_norm_rows_backward(
        &trace.xhat2,
        &trace.rstd2,
        t,
        w,
        params.data(LN2_G),
        d_output,
        dg2,
        db2,
    );

    // feed-forward branch
    let mut d_f2 = d_r2.clone();
    if let Some(m) = &trace.mask_ff {
        d_f2.iter_mut().zip(m).for_each(|(d, mi)| *d *= mi);
    }
    let (dw, db) = two_slots(grads, FF2_W, FF2_B);
    let mut d_g = affine_rows_backward(&trace.g, t, f, params.data(FF2_W), &d_f2, w, dw, db, true);
    d_g.iter_mut()
        .zip(&trace.f1)
        .for_each(|(d, &x)| if x <= 0.0 { *d = 0.0 });
    let (dw, db) = two_slots(grads, FF1_W, FF1_B);
    let d_n1_ff = affine_rows_backward(&trace.n1, t, w, params.data(FF1_W), &d_g, f, dw, db, true);
    let d_n1: Vec<f64> = d_r2.iter().zip(&d_n1_ff).map(|(a, b)| a + b).collect();

    // LN1
    let (dg1, db1) = two_slots(grads, LN1_G, LN1_B);
    let d_r1 = layer_norm_rows_backward(
        &trace.xhat1,
        &trace.rstd1,
        t,
        w,
        params.data(LN1_G),
        &d_n1,
        dg1,
        db1,
    );

    // attention branch
    let mut d_z = d_r1.clone();
    if let Some(m) = &trace.mask_attn {
        d_z.iter_mut().zip(m).for_each(|(d, mi)| *d *= mi);
    }
    let (dw, db) = two_slots(grads, WO, BO);
    let d_o = affine_rows_backward(&trace.o, t, w, params.data(WO), &d_z, w, dw, db, true);

    let mut d_q = vec![0.0; t * w];
    let mut d_k = vec![0.0; t * w];
    let mut d_v = vec![0.0; t * w];
    let mut d_a = vec![0.0; t];
    for h in 0..cfg.heads {
        let off = h * hd;
        let a = &trace.attn[h * t * t..(h + 1) * t * t];
        for i in 0..t {
            let d_oi = &d_o[i * w + off..i * w + off + hd];
            let ai = &a[i * t..(i + 1) * t];
            for j in 0..t {
                d_a[j] = dot(d_oi, &trace.v[j * w + off..j * w + off + hd]);
                let p = ai[j];
                for (dv, go) in d_v[j * w + off..j * w + off + hd].iter_mut().zip(d_oi) {
                    *dv += p * go;
                }
            }
            let d_s = softmax_backward(ai, &d_a);
            for j in 0..t {
                let g = d_s[j] * scale;
                if g == 0.0 {
                    continue;
                }
                for d in 0..hd {
                    d_q[i * w + off + d] += g * trace.k[j * w + off + d];
                    d_k[j * w + off + d] += g * trace.q[i * w + off + d];
                }
            }
        }
    }

    let mut d_h0 = d_r1;
    for (wslot, bslot, d_proj) in [(WQ, BQ, &d_q), (WK, BK, &d_k), (WV, BV, &d_v)] {
        let (dw, db) = two_slots(grads, wslot, bslot);
        let dx = affine_rows_backward(&trace.h0, t, w, params.data(wslot), d_proj, w, dw, db, true);
        d_h0.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
    }
    Ok(d_h0)
}

pub(crate) fn two_slots(
    grads: &mut Gradients,
    a: usize,
    b: usize,
) -> (Option<&mut [f64]>, Option<&mut [f64]>) {
    grads.pair_mut(a, b)
}
