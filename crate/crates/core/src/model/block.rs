use super::hooks::{LayerHooks, LinearKind, LinearSite};
use crate::error::{Error, Result};
use crate::tensor::{attention, layernorm, Tensor};

/// Rows of the per-block modulation table.
pub(crate) const SHIFT_SELF: usize = 0;
pub(crate) const SCALE_SELF: usize = 1;
pub(crate) const GATE_SELF: usize = 2;
pub(crate) const SHIFT_FFN: usize = 3;
pub(crate) const SCALE_FFN: usize = 4;
pub(crate) const GATE_FFN: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Parameters of one transformer block.
///
/// Projection matrices are stored input-major (`[in × out]`) so a projection
/// is `x·W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm_self: LayerNormWeights,
    pub self_qkv: Tensor,
    pub self_out: Tensor,
    pub norm_cross: LayerNormWeights,
    pub cross_q: Tensor,
    pub cross_kv: Tensor,
    pub cross_out: Tensor,
    pub norm_ffn: LayerNormWeights,
    pub ffn_up: Tensor,
    pub ffn_down: Tensor,
    /// `[6 × d]` shift/scale/gate rows for the attention and FFN branches.
    pub modulation: Tensor,
    /// `[6 × d]` per-channel response of each modulation row to the timestep embedding.
    pub modulation_time: Tensor,
}

impl BlockWeights {
    pub fn linear(&self, kind: LinearKind) -> &Tensor {
        match kind {
            LinearKind::SelfQkv => &self.self_qkv,
            LinearKind::SelfOut => &self.self_out,
            LinearKind::CrossQ => &self.cross_q,
            LinearKind::CrossKv => &self.cross_kv,
            LinearKind::CrossOut => &self.cross_out,
            LinearKind::FfnUp => &self.ffn_up,
            LinearKind::FfnDown => &self.ffn_down,
        }
    }

    /// Every tensor in serialization order.
    pub fn tensors(&self) -> [&Tensor; 15] {
        [
            &self.norm_self.gamma,
            &self.norm_self.beta,
            &self.self_qkv,
            &self.self_out,
            &self.norm_cross.gamma,
            &self.norm_cross.beta,
            &self.cross_q,
            &self.cross_kv,
            &self.cross_out,
            &self.norm_ffn.gamma,
            &self.norm_ffn.beta,
            &self.ffn_up,
            &self.ffn_down,
            &self.modulation,
            &self.modulation_time,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 15] {
        [
            &mut self.norm_self.gamma,
            &mut self.norm_self.beta,
            &mut self.self_qkv,
            &mut self.self_out,
            &mut self.norm_cross.gamma,
            &mut self.norm_cross.beta,
            &mut self.cross_q,
            &mut self.cross_kv,
            &mut self.cross_out,
            &mut self.norm_ffn.gamma,
            &mut self.norm_ffn.beta,
            &mut self.ffn_up,
            &mut self.ffn_down,
            &mut self.modulation,
            &mut self.modulation_time,
        ]
    }

    fn model_dim(&self) -> usize {
        self.self_out.last_dim()
    }
}

/// `modulation + modulation_time ⊙ t_emb`, one `d`-vector per row.
fn modulation_rows(w: &BlockWeights, t_emb: &Tensor) -> Result<Vec<Vec<f32>>> {
    let d = w.model_dim();
    if t_emb.len() != d {
        return Err(Error::Dimension(format!(
            "timestep embedding has {} values, model dim is {d}",
            t_emb.len()
        )));
    }
    let (base, time, e) = (w.modulation.data(), w.modulation_time.data(), t_emb.data());
    Ok((0..6)
        .map(|r| {
            (0..d)
                .map(|c| base[r * d + c] + time[r * d + c] * e[c])
                .collect()
        })
        .collect())
}

/// `h ⊙ (1 + scale) + shift` on every row.
fn modulate(mut h: Tensor, shift: &[f32], scale: &[f32]) -> Tensor {
    let d = shift.len();
    for row in h.data_mut().chunks_mut(d) {
        for ((v, s), sc) in row.iter_mut().zip(shift).zip(scale) {
            *v = *v * (1.0 + sc) + s;
        }
    }
    h
}

/// `x + gate ⊙ branch` on every row.
fn gated_residual(x: &Tensor, branch: &Tensor, gate: Option<&[f32]>) -> Result<Tensor> {
    if x.shape() != branch.shape() {
        return Err(Error::Dimension(format!(
            "residual shapes {:?} and {:?} differ",
            x.shape(),
            branch.shape()
        )));
    }
    let d = x.last_dim();
    let mut out = x.clone();
    for (i, (o, &b)) in out.data_mut().iter_mut().zip(branch.data()).enumerate() {
        *o += match gate {
            Some(g) => g[i % d] * b,
            None => b,
        };
    }
    Ok(out)
}

/// Copies columns `[start, start + width)` of a matrix.
fn columns(x: &Tensor, start: usize, width: usize) -> Tensor {
    let n = x.last_dim();
    let data = x
        .data()
        .chunks(n)
        .flat_map(|row| row[start..start + width].iter().copied())
        .collect();
    Tensor::from_parts(vec![x.rows(), width], data)
}

/// Multi-head attention over packed projections: head `h` reads columns
/// `[q_off + h·dh, …)` of `q_src` and likewise for keys and values.
#[allow(clippy::too_many_arguments)]
fn multi_head(
    q_src: &Tensor,
    q_off: usize,
    kv_src: &Tensor,
    k_off: usize,
    v_off: usize,
    heads: usize,
    d: usize,
) -> Result<(Tensor, u64)> {
    let dh = d / heads;
    let rows = q_src.rows();
    let mut out = vec![0.0f32; rows * d];
    let mut macs = 0;
    for h in 0..heads {
        let q = columns(q_src, q_off + h * dh, dh);
        let k = columns(kv_src, k_off + h * dh, dh);
        let v = columns(kv_src, v_off + h * dh, dh);
        let (o, m) = attention(&q, &k, &v)?;
        macs += m;
        for (i, orow) in o.data().chunks(dh).enumerate() {
            out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(orow);
        }
    }
    Ok((Tensor::from_parts(vec![rows, d], out), macs))
}

fn gelu(v: f32) -> f32 {
    let x = v as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn project(
    hooks: &mut dyn LayerHooks,
    layer: usize,
    kind: LinearKind,
    x: &Tensor,
    w: &BlockWeights,
    macs: &mut u64,
) -> Result<Tensor> {
    let weight = w.linear(kind);
    *macs += (x.rows() * x.last_dim() * weight.last_dim()) as u64;
    hooks.linear(LinearSite { layer, kind }, x, weight)
}

/// One transformer block on a `[tokens × d]` hidden state.
///
/// `x + gate·SelfAttn(mod(LN(x)))`, then `+ CrossAttn(LN(·), cond)`, then
/// `+ gate·FFN(mod(LN(·)))`. Residual additions stay in full precision.
/// Returns the output and the multiply-accumulates executed.
pub fn block_forward(
    x: &Tensor,
    cond: &Tensor,
    t_emb: &Tensor,
    weights: &BlockWeights,
    heads: usize,
    layer: usize,
    hooks: &mut dyn LayerHooks,
) -> Result<(Tensor, u64)> {
    let (_, d) = x.dims2()?;
    if d != weights.model_dim() {
        return Err(Error::Dimension(format!(
            "hidden width {d} does not match block width {}",
            weights.model_dim()
        )));
    }
    if d % heads != 0 {
        return Err(Error::Dimension(format!(
            "{d} channels do not split into {heads} heads"
        )));
    }
    let m = modulation_rows(weights, t_emb)?;
    let mut macs = 0u64;

    let h = layernorm(x, &weights.norm_self.gamma, &weights.norm_self.beta)?;
    let h = modulate(h, &m[SHIFT_SELF], &m[SCALE_SELF]);
    let qkv = project(hooks, layer, LinearKind::SelfQkv, &h, weights, &mut macs)?;
    let (attn, am) = multi_head(&qkv, 0, &qkv, d, 2 * d, heads, d)?;
    macs += am;
    let o = project(hooks, layer, LinearKind::SelfOut, &attn, weights, &mut macs)?;
    let x1 = gated_residual(x, &o, Some(&m[GATE_SELF]))?;

    let h = layernorm(&x1, &weights.norm_cross.gamma, &weights.norm_cross.beta)?;
    let q = project(hooks, layer, LinearKind::CrossQ, &h, weights, &mut macs)?;
    let kv = project(hooks, layer, LinearKind::CrossKv, cond, weights, &mut macs)?;
    let (attn, am) = multi_head(&q, 0, &kv, 0, d, heads, d)?;
    macs += am;
    let o = project(
        hooks,
        layer,
        LinearKind::CrossOut,
        &attn,
        weights,
        &mut macs,
    )?;
    let x2 = gated_residual(&x1, &o, None)?;

    let h = layernorm(&x2, &weights.norm_ffn.gamma, &weights.norm_ffn.beta)?;
    let h = modulate(h, &m[SHIFT_FFN], &m[SCALE_FFN]);
    let u = project(hooks, layer, LinearKind::FfnUp, &h, weights, &mut macs)?.map(gelu);
    let o = project(hooks, layer, LinearKind::FfnDown, &u, weights, &mut macs)?;
    let x3 = gated_residual(&x2, &o, Some(&m[GATE_FFN]))?;

    if !x3.all_finite() {
        return Err(Error::NonFinite(format!("block {layer} output")));
    }
    Ok((x3, macs))
}
