//! Encoder-only masked Transformer mapping a trajectory plus diffusivity to
//! a predicted trajectory of the same shape.
//!
//! Two forward routes exist on purpose: `forward_reference` is plain ndarray
//! arithmetic used for inference and as a check target, while `forward_tape`
//! builds the same computation on the autodiff tape for training. Tests pin
//! the two routes together to 1e-12.

use crate::encodings::{default_pe_scale, MaskKind, MaskMatrix, PositionalEncoding};
use crate::error::{Error, Result};
use crate::tape::{masked_softmax_array, NodeId, Tape};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub ny: usize,
    pub nx: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub mlp_dim: usize,
    pub start_predicting_from: usize,
    pub mask_kind: MaskKind,
    pub activation: Activation,
    pub pe_scale: Option<f64>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ny < 3 || self.nx < 3 {
            return Err(Error::Config("grid must be at least 3x3".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of 4 (spatial features use half of it, split into sin/cos pairs)",
                self.embed_dim
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_encoder_layers == 0 {
            return Err(Error::Config("need at least one encoder layer".into()));
        }
        if self.start_predicting_from < 1 || self.start_predicting_from > self.seq_len {
            return Err(Error::Config(format!(
                "start_predicting_from {} outside 1..={}",
                self.start_predicting_from, self.seq_len
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        Ok(())
    }

    /// Per-node spatial feature width.
    pub fn spatial_features(&self) -> usize {
        self.embed_dim / 2
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mask(&self) -> Result<MaskMatrix> {
        match self.mask_kind {
            MaskKind::Block => crate::encodings::block_mask(self.seq_len, self.start_predicting_from),
            MaskKind::Causal => {
                crate::encodings::causal_mask(self.seq_len, self.start_predicting_from)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// [in, out]
    pub w: ArrayD<f64>,
    /// [out]
    pub b: ArrayD<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ArrayD<f64>,
    pub bias: ArrayD<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNormParams,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub spatial_proj: Linear,
    pub alpha_embed: Linear,
    pub layers: Vec<EncoderLayerParams>,
    pub final_ln: LayerNormParams,
    pub output_proj: Linear,
}

impl ModelParams {
    /// Canonical (name, tensor) order. Checkpointing, the optimizer, staging
    /// onto the tape, and the gradient check all share this order.
    pub fn tensors(&self) -> Vec<(String, &ArrayD<f64>)> {
        let mut out: Vec<(String, &ArrayD<f64>)> = vec![
            ("spatial_proj.w".into(), &self.spatial_proj.w),
            ("spatial_proj.b".into(), &self.spatial_proj.b),
            ("alpha_embed.w".into(), &self.alpha_embed.w),
            ("alpha_embed.b".into(), &self.alpha_embed.b),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, lin) in [
                ("wq", &layer.wq),
                ("wk", &layer.wk),
                ("wv", &layer.wv),
                ("wo", &layer.wo),
            ] {
                out.push((format!("layers.{i}.{name}.w"), &lin.w));
                out.push((format!("layers.{i}.{name}.b"), &lin.b));
            }
            out.push((format!("layers.{i}.ln1.gain"), &layer.ln1.gain));
            out.push((format!("layers.{i}.ln1.bias"), &layer.ln1.bias));
            out.push((format!("layers.{i}.ff1.w"), &layer.ff1.w));
            out.push((format!("layers.{i}.ff1.b"), &layer.ff1.b));
            out.push((format!("layers.{i}.ff2.w"), &layer.ff2.w));
            out.push((format!("layers.{i}.ff2.b"), &layer.ff2.b));
            out.push((format!("layers.{i}.ln2.gain"), &layer.ln2.gain));
            out.push((format!("layers.{i}.ln2.bias"), &layer.ln2.bias));
        }
        out.push(("final_ln.gain".into(), &self.final_ln.gain));
        out.push(("final_ln.bias".into(), &self.final_ln.bias));
        out.push(("output_proj.w".into(), &self.output_proj.w));
        out.push(("output_proj.b".into(), &self.output_proj.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut ArrayD<f64>)> {
        let mut out: Vec<(String, &mut ArrayD<f64>)> = vec![
            ("spatial_proj.w".into(), &mut self.spatial_proj.w),
            ("spatial_proj.b".into(), &mut self.spatial_proj.b),
            ("alpha_embed.w".into(), &mut self.alpha_embed.w),
            ("alpha_embed.b".into(), &mut self.alpha_embed.b),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, lin) in [
                ("wq", &mut layer.wq),
                ("wk", &mut layer.wk),
                ("wv", &mut layer.wv),
                ("wo", &mut layer.wo),
            ] {
                out.push((format!("layers.{i}.{name}.w"), &mut lin.w));
                out.push((format!("layers.{i}.{name}.b"), &mut lin.b));
            }
            out.push((format!("layers.{i}.ln1.gain"), &mut layer.ln1.gain));
            out.push((format!("layers.{i}.ln1.bias"), &mut layer.ln1.bias));
            out.push((format!("layers.{i}.ff1.w"), &mut layer.ff1.w));
            out.push((format!("layers.{i}.ff1.b"), &mut layer.ff1.b));
            out.push((format!("layers.{i}.ff2.w"), &mut layer.ff2.w));
            out.push((format!("layers.{i}.ff2.b"), &mut layer.ff2.b));
            out.push((format!("layers.{i}.ln2.gain"), &mut layer.ln2.gain));
            out.push((format!("layers.{i}.ln2.bias"), &mut layer.ln2.bias));
        }
        out.push(("final_ln.gain".into(), &mut self.final_ln.gain));
        out.push(("final_ln.bias".into(), &mut self.final_ln.bias));
        out.push(("output_proj.w".into(), &mut self.output_proj.w));
        out.push(("output_proj.b".into(), &mut self.output_proj.b));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn xavier_linear(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Linear {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| {
        rng.gen_range(-bound..bound)
    });
    Linear {
        w,
        b: ArrayD::zeros(IxDyn(&[fan_out])),
    }
}

fn unit_layernorm(dim: usize) -> LayerNormParams {
    LayerNormParams {
        gain: ArrayD::from_elem(IxDyn(&[dim]), 1.0),
        bias: ArrayD::zeros(IxDyn(&[dim])),
    }
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_e = config.embed_dim;
    let spatial_in = config.ny * config.nx * config.spatial_features();
    let spatial_proj = xavier_linear(spatial_in, d_e, &mut rng);
    let alpha_embed = xavier_linear(1, d_e, &mut rng);
    let layers = (0..config.num_encoder_layers)
        .map(|_| EncoderLayerParams {
            wq: xavier_linear(d_e, d_e, &mut rng),
            wk: xavier_linear(d_e, d_e, &mut rng),
            wv: xavier_linear(d_e, d_e, &mut rng),
            wo: xavier_linear(d_e, d_e, &mut rng),
            ln1: unit_layernorm(d_e),
            ff1: xavier_linear(d_e, config.mlp_dim, &mut rng),
            ff2: xavier_linear(config.mlp_dim, d_e, &mut rng),
            ln2: unit_layernorm(d_e),
        })
        .collect();
    Ok(ModelParams {
        spatial_proj,
        alpha_embed,
        layers,
        final_ln: unit_layernorm(d_e),
        output_proj: xavier_linear(d_e, config.ny * config.nx, &mut rng),
    })
}

// ---------- reference (pure ndarray) route ----------

/// `x` has shape [..., in]; returns [..., out].
pub fn linear_ref(x: &ArrayD<f64>, lin: &Linear) -> ArrayD<f64> {
    let n = x.ndim();
    let fan_in = lin.w.shape()[0];
    let fan_out = lin.w.shape()[1];
    assert_eq!(x.shape()[n - 1], fan_in, "linear input width");
    let rows: usize = x.len() / fan_in;
    let x2 = x.to_shape((rows, fan_in)).unwrap().to_owned();
    let w2 = lin.w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut y = x2.dot(&w2);
    let b = lin.b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    y += &b;
    let mut shape = x.shape().to_vec();
    shape[n - 1] = fan_out;
    y.into_shape_with_order(IxDyn(&shape)).unwrap()
}

pub fn layernorm_ref(x: &ArrayD<f64>, ln: &LayerNormParams, eps: f64) -> ArrayD<f64> {
    let n = x.ndim();
    let axis = Axis(n - 1);
    let mean = x.mean_axis(axis).unwrap().insert_axis(axis);
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).mean_axis(axis).unwrap().insert_axis(axis);
    let xhat = &centered / &var.mapv(|v| (v + eps).sqrt());
    &xhat * &ln.gain + &ln.bias
}

pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn activate_ref(x: &ArrayD<f64>, activation: Activation) -> ArrayD<f64> {
    match activation {
        Activation::Gelu => x.mapv(gelu_scalar),
        Activation::Relu => x.mapv(|v| v.max(0.0)),
    }
}

/// S_ij = (Q_i . K_j) / sqrt(d').
pub fn attention_scores(q: &Array2<f64>, k: &Array2<f64>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::Domain(format!(
            "attention head widths differ: {} vs {}",
            q.ncols(),
            k.ncols()
        )));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    Ok(q.dot(&k.t()) * scale)
}

/// Row-wise softmax of (scores + mask); masked entries come out exactly 0.
pub fn masked_softmax(scores: &Array2<f64>, mask: &Array2<f64>) -> Result<Array2<f64>> {
    if scores.dim() != mask.dim() {
        return Err(Error::Domain("softmax mask shape mismatch".into()));
    }
    for i in 0..mask.nrows() {
        if (0..mask.ncols()).all(|j| mask[[i, j]] == f64::NEG_INFINITY) {
            return Err(Error::Domain(format!("softmax row {i} fully masked")));
        }
    }
    let out = masked_softmax_array(&scores.clone().into_dyn(), mask);
    Ok(out.into_dimensionality::<ndarray::Ix2>().unwrap())
}

/// A_i = sum_j S_ij V_j, with the convention that a weight of exactly 0.0
/// contributes nothing at all — value rows behind masked-out weights never
/// enter the sum, so garbage (even NaN) in hidden positions cannot leak.
pub fn attention_output(s: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>> {
    if s.ncols() != v.nrows() {
        return Err(Error::Domain(format!(
            "attention weights {}x{} incompatible with values {}x{}",
            s.nrows(),
            s.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    let mut a = Array2::<f64>::zeros((s.nrows(), v.ncols()));
    for i in 0..s.nrows() {
        let mut row = a.row_mut(i);
        for j in 0..s.ncols() {
            let w = s[[i, j]];
            if w != 0.0 {
                row.scaled_add(w, &v.row(j));
            }
        }
    }
    Ok(a)
}

/// Single-position-axis multi-head attention: [N, d_e] -> [N, d_e].
pub fn multi_head_attention(
    x: &Array2<f64>,
    layer: &EncoderLayerParams,
    mask: &Array2<f64>,
    num_heads: usize,
) -> Result<Array2<f64>> {
    let d_e = x.ncols();
    if num_heads == 0 || d_e % num_heads != 0 {
        return Err(Error::Config(format!(
            "embed_dim {d_e} not divisible by num_heads {num_heads}"
        )));
    }
    let dh = d_e / num_heads;
    let n = x.nrows();
    let q = linear_ref(&x.clone().into_dyn(), &layer.wq)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let k = linear_ref(&x.clone().into_dyn(), &layer.wk)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let v = linear_ref(&x.clone().into_dyn(), &layer.wv)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let mut concat = Array2::<f64>::zeros((n, d_e));
    for h in 0..num_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., cols.clone()]).to_owned();
        let kh = k.slice(ndarray::s![.., cols.clone()]).to_owned();
        let vh = v.slice(ndarray::s![.., cols.clone()]).to_owned();
        let s = masked_softmax(&attention_scores(&qh, &kh)?, mask)?;
        let a = attention_output(&s, &vh)?;
        concat.slice_mut(ndarray::s![.., cols]).assign(&a);
    }
    Ok(linear_ref(&concat.into_dyn(), &layer.wo)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap())
}

/// Post-norm encoder layer: LN(x + MHA(x)) then LN(x1 + FFN(x1)).
pub fn encoder_layer(
    x: &Array2<f64>,
    layer: &EncoderLayerParams,
    mask: &Array2<f64>,
    num_heads: usize,
    activation: Activation,
) -> Result<Array2<f64>> {
    let mha = multi_head_attention(x, layer, mask, num_heads)?;
    let x1 = layernorm_ref(&(x + &mha).into_dyn(), &layer.ln1, LAYER_NORM_EPS);
    let hidden = activate_ref(&linear_ref(&x1, &layer.ff1), activation);
    let ffn = linear_ref(&hidden, &layer.ff2);
    let out = layernorm_ref(&(&x1 + &ffn), &layer.ln2, LAYER_NORM_EPS);
    Ok(out.into_dimensionality::<ndarray::Ix2>().unwrap())
}

fn pe_table(length: usize, dims: usize, scale: Option<f64>) -> Result<PositionalEncoding> {
    crate::encodings::sinusoidal_pe(length, dims, scale.unwrap_or_else(|| default_pe_scale(dims)))
}

/// Spatial positional sum PEy[y,:] + PEx[x,:], shape [ny, nx, d_s].
fn spatial_pe_sum(config: &ModelConfig) -> Result<ArrayD<f64>> {
    let d_s = config.spatial_features();
    let scale = config.pe_scale;
    let pe_y = pe_table(config.ny, d_s, scale)?;
    let pe_x = pe_table(config.nx, d_s, scale)?;
    let mut out = ArrayD::zeros(IxDyn(&[config.ny, config.nx, d_s]));
    for y in 0..config.ny {
        for x in 0..config.nx {
            for k in 0..d_s {
                out[[y, x, k]] = pe_y.table[[y, k]] + pe_x.table[[x, k]];
            }
        }
    }
    Ok(out)
}

fn check_forward_shapes(config: &ModelConfig, src: &ArrayD<f64>, alpha: &Array1<f64>) -> Result<usize> {
    config.validate()?;
    let expect = [alpha.len(), config.seq_len, config.ny, config.nx];
    if src.shape() != expect {
        return Err(Error::Domain(format!(
            "source shape {:?} does not match config/batch {:?}",
            src.shape(),
            expect
        )));
    }
    Ok(alpha.len())
}

/// Pure-ndarray forward: src [B,T,ny,nx], alpha [B] -> [B,T,ny,nx].
pub fn forward_reference(
    params: &ModelParams,
    config: &ModelConfig,
    src: &ArrayD<f64>,
    alpha: &Array1<f64>,
    mask: &MaskMatrix,
) -> Result<ArrayD<f64>> {
    let b = check_forward_shapes(config, src, alpha)?;
    let (t, ny, nx) = (config.seq_len, config.ny, config.nx);
    let d_s = config.spatial_features();
    let d_e = config.embed_dim;

    // (1) expand scalars with spatial PEs
    let pe_sp = spatial_pe_sum(config)?;
    let src5 = src
        .to_shape(IxDyn(&[b, t, ny, nx, 1]))
        .unwrap()
        .to_owned();
    let expanded = &src5 + &pe_sp; // broadcast over [b,t] and d_s
    // (2) flatten + spatial projection
    let flat = expanded
        .to_shape(IxDyn(&[b, t, ny * nx * d_s]))
        .unwrap()
        .to_owned();
    let mut latent = linear_ref(&flat, &params.spatial_proj);
    // (3) temporal PE
    let pe_t = pe_table(t, d_e, config.pe_scale)?;
    latent = latent + &pe_t.table.clone().into_dyn();
    // (4) diffusivity embedding, broadcast across T
    let w_alpha = params
        .alpha_embed
        .w
        .to_shape(IxDyn(&[d_e]))
        .unwrap()
        .to_owned();
    for bi in 0..b {
        let embed = &w_alpha * alpha[bi] + &params.alpha_embed.b;
        let mut slab = latent.index_axis_mut(Axis(0), bi);
        slab += &embed;
    }
    // (5) encoder stack, (6) final layer-norm, (7) output projection
    let mut out = ArrayD::zeros(IxDyn(&[b, t, ny, nx]));
    for bi in 0..b {
        let mut x = latent
            .index_axis(Axis(0), bi)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for layer in &params.layers {
            x = encoder_layer(&x, layer, &mask.entries, config.num_heads, config.activation)?;
        }
        let normed = layernorm_ref(&x.into_dyn(), &params.final_ln, LAYER_NORM_EPS);
        let proj = linear_ref(&normed, &params.output_proj);
        let frames = proj.to_shape(IxDyn(&[t, ny, nx])).unwrap();
        out.index_axis_mut(Axis(0), bi).assign(&frames);
    }
    Ok(out)
}

// ---------- tape (training) route ----------

/// Parameter leaves staged on a tape, in `ModelParams::tensors()` order.
pub struct StagedParams {
    pub ids: Vec<NodeId>,
}

pub fn stage_params(tape: &mut Tape, params: &ModelParams) -> StagedParams {
    let ids = params
        .tensors()
        .into_iter()
        .map(|(_, t)| tape.leaf(t.clone()))
        .collect();
    StagedParams { ids }
}

struct Cursor<'a> {
    ids: &'a [NodeId],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> NodeId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }
    fn linear(&mut self) -> (NodeId, NodeId) {
        (self.next(), self.next())
    }
}

fn linear_tape(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let shape = tape.value(x).shape().to_vec();
    let fan_in = *shape.last().unwrap();
    let fan_out = tape.value(w).shape()[1];
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let x2 = tape.reshape(x, &[rows, fan_in]);
    let y2 = tape.matmul(x2, w);
    let yb = tape.add(y2, b);
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = fan_out;
    tape.reshape(yb, &out_shape)
}

fn activate_tape(tape: &mut Tape, x: NodeId, activation: Activation) -> NodeId {
    match activation {
        Activation::Gelu => tape.gelu(x),
        Activation::Relu => tape.relu(x),
    }
}

/// Tape forward producing the prediction node [B,T,ny,nx].
pub fn forward_tape(
    tape: &mut Tape,
    staged: &StagedParams,
    config: &ModelConfig,
    src: &ArrayD<f64>,
    alpha: &Array1<f64>,
    mask: &MaskMatrix,
) -> Result<NodeId> {
    let b = check_forward_shapes(config, src, alpha)?;
    let (t, ny, nx) = (config.seq_len, config.ny, config.nx);
    let d_s = config.spatial_features();
    let d_e = config.embed_dim;
    let h = config.num_heads;
    let dh = config.head_dim();
    let mut cursor = Cursor { ids: &staged.ids, pos: 0 };

    let src_id = tape.leaf(src.clone());
    let src5 = tape.reshape(src_id, &[b, t, ny, nx, 1]);
    let pe_sp = tape.leaf(spatial_pe_sum(config)?);
    let expanded = tape.add(src5, pe_sp);
    let flat = tape.reshape(expanded, &[b, t, ny * nx * d_s]);
    let (w_sp, b_sp) = cursor.linear();
    let projected = linear_tape(tape, flat, w_sp, b_sp);

    let pe_t = pe_table(t, d_e, config.pe_scale)?;
    let pe_t_id = tape.leaf(pe_t.table.into_dyn());
    let with_time = tape.add(projected, pe_t_id);

    let (w_a, b_a) = cursor.linear();
    let alpha_id = tape.leaf(
        alpha
            .clone()
            .into_dyn()
            .to_shape(IxDyn(&[b, 1, 1]))
            .unwrap()
            .to_owned(),
    );
    let w_a_flat = tape.reshape(w_a, &[d_e]);
    let alpha_scaled = tape.mul(alpha_id, w_a_flat); // [B,1,d_e]
    let alpha_embed = tape.add(alpha_scaled, b_a);
    let mut x = tape.add(with_time, alpha_embed); // [B,T,d_e]

    for _ in 0..config.num_encoder_layers {
        let (wq, bq) = cursor.linear();
        let (wk, bk) = cursor.linear();
        let (wv, bv) = cursor.linear();
        let (wo, bo) = cursor.linear();
        let ln1_gain = cursor.next();
        let ln1_bias = cursor.next();
        let (w1, b1) = cursor.linear();
        let (w2, b2) = cursor.linear();
        let ln2_gain = cursor.next();
        let ln2_bias = cursor.next();

        let split_heads = |tape: &mut Tape, v: NodeId| {
            let r = tape.reshape(v, &[b, t, h, dh]);
            tape.permute(r, &[0, 2, 1, 3]) // [B,h,T,dh]
        };
        let q = linear_tape(tape, x, wq, bq);
        let k = linear_tape(tape, x, wk, bk);
        let v = linear_tape(tape, x, wv, bv);
        let qh = split_heads(tape, q);
        let kh = split_heads(tape, k);
        let vh = split_heads(tape, v);
        let kt = tape.permute(kh, &[0, 1, 3, 2]);
        let raw = tape.matmul(qh, kt);
        let scores = tape.scale(raw, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax_masked(scores, mask.entries.clone());
        let heads = tape.matmul(weights, vh); // [B,h,T,dh]
        let merged = tape.permute(heads, &[0, 2, 1, 3]);
        let concat = tape.reshape(merged, &[b, t, d_e]);
        let mha = linear_tape(tape, concat, wo, bo);
        let res1 = tape.add(x, mha);
        let x1 = tape.layernorm(res1, ln1_gain, ln1_bias, LAYER_NORM_EPS);

        let hidden_pre = linear_tape(tape, x1, w1, b1);
        let hidden = activate_tape(tape, hidden_pre, config.activation);
        let ffn = linear_tape(tape, hidden, w2, b2);
        let res2 = tape.add(x1, ffn);
        x = tape.layernorm(res2, ln2_gain, ln2_bias, LAYER_NORM_EPS);
    }

    let fin_gain = cursor.next();
    let fin_bias = cursor.next();
    let normed = tape.layernorm(x, fin_gain, fin_bias, LAYER_NORM_EPS);
    let (w_out, b_out) = cursor.linear();
    let proj = linear_tape(tape, normed, w_out, b_out);
    debug_assert_eq!(cursor.pos, staged.ids.len());
    Ok(tape.reshape(proj, &[b, t, ny, nx]))
}
