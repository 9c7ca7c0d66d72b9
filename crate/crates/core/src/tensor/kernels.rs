use super::Tensor;
use crate::error::{Error, Result};
use crate::quant::{Granularity, QuantizedTensor};

pub const LAYERNORM_EPS: f64 = 1e-5;

fn ensure_finite(t: Tensor, op: &str) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(format!(
            "{op} produced a non-finite value"
        )))
    }
}

/// `a[M×K] · b[K×N]`, accumulating each dot product in increasing `k` order.
pub fn matmul_fp(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::Dimension(format!(
            "matmul inner axes disagree: {m}x{k} · {kb}x{n}"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        for (kk, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            let av = av as f64;
            for (slot, &bv) in acc.iter_mut().zip(&bd[kk * n..(kk + 1) * n]) {
                *slot += av * bv as f64;
            }
        }
        for (o, &s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    ensure_finite(Tensor::from_parts(vec![m, n], out), "matmul_fp")
}

/// Integer GEMM over quantized operands.
///
/// Activations may be per-tensor or per-row (axis 0); weights per-tensor or
/// per-column (axis 1). Codes are multiplied into a 32-bit accumulator, zero
/// points are removed by expanding
/// `Σ(qa−za)(qw−zw) = Σqa·qw − zw·Σqa − za·Σqw + K·za·zw`, and the two scales
/// are applied once at the end. For scales produced by
/// [`crate::quant::compute_minmax_params`] the result is bit-identical to
/// `matmul_fp(dequantize(aq), dequantize(wq))`.
pub fn matmul_int(aq: &QuantizedTensor, wq: &QuantizedTensor) -> Result<Tensor> {
    let (m, k) = dims2(aq.shape())?;
    let (kb, n) = dims2(wq.shape())?;
    if k != kb {
        return Err(Error::Dimension(format!(
            "matmul_int inner axes disagree: {m}x{k} · {kb}x{n}"
        )));
    }
    let ap = aq.params();
    let wp = wq.params();
    if let Granularity::PerChannel { axis } = ap.granularity() {
        if axis != 0 {
            return Err(Error::Dimension(format!(
                "activation codes must be per-tensor or per-row, got per-channel axis {axis}"
            )));
        }
    }
    if let Granularity::PerChannel { axis } = wp.granularity() {
        if axis != 1 {
            return Err(Error::Dimension(format!(
                "weight codes must be per-tensor or per-column, got per-channel axis {axis}"
            )));
        }
    }
    check_accumulator(k, ap.bits(), wp.bits())?;

    let (ac, wc) = (aq.codes(), wq.codes());
    let mut col_sums = vec![0i64; n];
    for kk in 0..k {
        for (s, &c) in col_sums.iter_mut().zip(&wc[kk * n..(kk + 1) * n]) {
            *s += c as i64;
        }
    }

    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0i32; n];
    for i in 0..m {
        acc.fill(0);
        let arow = &ac[i * k..(i + 1) * k];
        let mut row_sum = 0i64;
        for (kk, &a) in arow.iter().enumerate() {
            let a = a as i32;
            row_sum += a as i64;
            for (slot, &w) in acc.iter_mut().zip(&wc[kk * n..(kk + 1) * n]) {
                *slot += a * w as i32;
            }
        }
        let za = ap.zero_point(i.min(ap.channels() - 1)) as i64;
        let sa = ap.scale(i.min(ap.channels() - 1)) as f64;
        for j in 0..n {
            let ch = j.min(wp.channels() - 1);
            let zw = wp.zero_point(ch) as i64;
            let sw = wp.scale(ch) as f64;
            let total = acc[j] as i64 - zw * row_sum - za * col_sums[j] + k as i64 * za * zw;
            out[i * n + j] = (sa * sw * total as f64) as f32;
        }
    }
    ensure_finite(Tensor::from_parts(vec![m, n], out), "matmul_int")
}

/// Rejects products whose code sum could overflow the 32-bit accumulator.
pub(crate) fn check_accumulator(k: usize, a_bits: u8, w_bits: u8) -> Result<()> {
    let worst = k as u128 * ((1u128 << a_bits) - 1) * ((1u128 << w_bits) - 1);
    if worst > i32::MAX as u128 {
        return Err(Error::config(
            "accumulator",
            format!(
                "K={k} with {a_bits}-bit activations and {w_bits}-bit weights can overflow a 32-bit accumulator"
            ),
        ));
    }
    Ok(())
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!(
            "expected a matrix, got shape {s:?}"
        ))),
    }
}

/// Numerically stabilised row softmax, computed in `f64`.
fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.last_dim();
    let mut buf = vec![0.0f64; n];
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        for (b, &v) in buf.iter_mut().zip(x.row(i)) {
            *b = v as f64;
        }
        softmax_in_place(&mut buf);
        out.extend(buf.iter().map(|&v| v as f32));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Single-head scaled dot-product attention `softmax(q·kᵀ/√d)·v`.
///
/// Returns the output together with the multiply-accumulate count.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, u64)> {
    let (nq, d) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, dv) = v.dims2()?;
    if d != dk || nk != nv {
        return Err(Error::Dimension(format!(
            "attention shapes q {nq}x{d}, k {nk}x{dk}, v {nv}x{dv} are inconsistent"
        )));
    }
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0f32; nq * dv];
    let mut weights = vec![0.0f64; nk];
    let mut acc = vec![0.0f64; dv];
    for i in 0..nq {
        let qrow = &qd[i * d..(i + 1) * d];
        for (j, w) in weights.iter_mut().enumerate() {
            let krow = &kd[j * d..(j + 1) * d];
            let dot: f64 = qrow
                .iter()
                .zip(krow)
                .fold(0.0, |s, (&a, &b)| s + a as f64 * b as f64);
            *w = dot * inv_sqrt_d;
        }
        softmax_in_place(&mut weights);
        acc.fill(0.0);
        for (j, &w) in weights.iter().enumerate() {
            for (slot, &vv) in acc.iter_mut().zip(&vd[j * dv..(j + 1) * dv]) {
                *slot += w * vv as f64;
            }
        }
        for (o, &s) in out[i * dv..(i + 1) * dv].iter_mut().zip(&acc) {
            *o = s as f32;
        }
    }
    let macs = (nq * nk * d + nq * nk * dv) as u64;
    Ok((
        ensure_finite(Tensor::from_parts(vec![nq, dv], out), "attention")?,
        macs,
    ))
}

/// Layer normalisation over the last axis followed by the affine `gamma`, `beta`.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    if gamma.len() != n || beta.len() != n {
        return Err(Error::Dimension(format!(
            "layernorm affine lengths {} / {} do not match last axis {n}",
            gamma.len(),
            beta.len()
        )));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / n as f64;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        out.extend(
            row.iter()
                .enumerate()
                .map(|(j, &v)| ((v as f64 - mean) * inv * g[j] as f64 + b[j] as f64) as f32),
        );
    }
    ensure_finite(Tensor::from_parts(x.shape().to_vec(), out), "layernorm")
}
