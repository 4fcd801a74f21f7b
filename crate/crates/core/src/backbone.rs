//! The single-stream transformer: per-head gated self-attention blocks in a
//! pre-norm residual layout, modality-routed parameter banks in the first
//! and last `n_boundary` layers, shared banks in the middle, and per-modality
//! input/output projections.
//!
//! The forward pass is a function of the packed sequence and the parameters
//! alone. There is no noise-level input anywhere: the model must infer how
//! corrupted its latents are from the latents themselves, so two calls with
//! identical inputs are bitwise identical.

use crate::error::{CoreError, Result};
use crate::sequence::{
    rope_table, Affine, ModalityTag, RopeTable, TokenSequence,
};
use crate::tensor::{matmul, rms_norm, softmax_rows, Tensor, RMS_EPS};
use crate::rng::Stream;
use crate::tape::rotate_pairs_raw;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_boundary: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub patch: (usize, usize, usize),
    /// Rotation pairs granted to the (τ, y, x) axes; sums to `d_head/2`.
    pub axis_split: (usize, usize, usize),
    pub video_channels: usize,
    pub audio_channels: usize,
}

impl ModelConfig {
    /// Desk-scale default: an 8-layer sandwich with 2 routed layers at each
    /// end, mirroring the production 40/4 ratio.
    pub fn toy() -> Self {
        Self {
            n_layers: 8,
            n_boundary: 2,
            n_heads: 4,
            d_model: 128,
            d_head: 32,
            d_ff: 384,
            vocab: 16,
            patch: (1, 2, 2),
            axis_split: (8, 4, 4),
            video_channels: 8,
            audio_channels: 4,
        }
    }

    /// Smaller variant for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            n_layers: 4,
            n_boundary: 1,
            n_heads: 4,
            d_model: 32,
            d_head: 8,
            d_ff: 64,
            vocab: 16,
            patch: (1, 2, 2),
            axis_split: (2, 1, 1),
            video_channels: 4,
            audio_channels: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(CoreError::Config("n_layers must be >= 1".into()));
        }
        if 2 * self.n_boundary >= self.n_layers {
            return Err(CoreError::Config(format!(
                "need 2*n_boundary < n_layers, got boundary {} with {} layers",
                self.n_boundary, self.n_layers
            )));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(CoreError::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(CoreError::Config(format!(
                "d_head {} must be even",
                self.d_head
            )));
        }
        let (st, sy, sx) = self.axis_split;
        if st + sy + sx != self.d_head / 2 {
            return Err(CoreError::Config(format!(
                "axis_split {:?} must sum to d_head/2 = {}",
                self.axis_split,
                self.d_head / 2
            )));
        }
        if self.d_ff == 0 || self.vocab == 0 {
            return Err(CoreError::Config("d_ff and vocab must be >= 1".into()));
        }
        if self.patch.0 == 0 || self.patch.1 == 0 || self.patch.2 == 0 {
            return Err(CoreError::Config("patch extents must be >= 1".into()));
        }
        if self.video_channels == 0 || self.audio_channels == 0 {
            return Err(CoreError::Config("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn middle_layers(&self) -> usize {
        self.n_layers - 2 * self.n_boundary
    }

    pub fn is_boundary(&self, layer: usize) -> bool {
        layer < self.n_boundary || layer >= self.n_layers - self.n_boundary
    }

    /// Width of a flattened video patch row.
    pub fn video_patch_dim(&self) -> usize {
        self.patch.0 * self.patch.1 * self.patch.2 * self.video_channels
    }
}

/// One attention+MLP parameter bank (no gates; those are per layer).
#[derive(Debug, Clone, PartialEq)]
pub struct BankParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_gate: Tensor,
    pub w_val: Tensor,
    pub w_down: Tensor,
    pub norm_attn: Tensor,
    pub norm_mlp: Tensor,
}

impl BankParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        Self {
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            w_o: Tensor::zeros(&[d, d]),
            w_gate: Tensor::zeros(&[d, f]),
            w_val: Tensor::zeros(&[d, f]),
            w_down: Tensor::zeros(&[f, d]),
            norm_attn: Tensor::full(&[d], 1.0),
            norm_mlp: Tensor::full(&[d], 1.0),
        }
    }

    fn init(cfg: &ModelConfig, stream: &mut Stream) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        // residual-feeding projections shrink with depth to keep the stream
        // near unit scale at initialization
        let residual_scale = 1.0 / (2.0 * cfg.n_layers as f32).sqrt();
        Self {
            w_q: normal(&[d, d], 0.02, stream),
            w_k: normal(&[d, d], 0.02, stream),
            w_v: normal(&[d, d], 0.02, stream),
            w_o: normal(&[d, d], 0.02 * residual_scale, stream),
            w_gate: normal(&[d, f], 0.02, stream),
            w_val: normal(&[d, f], 0.02, stream),
            w_down: normal(&[f, d], 0.02 * residual_scale, stream),
            norm_attn: Tensor::full(&[d], 1.0),
            norm_mlp: Tensor::full(&[d], 1.0),
        }
    }

    pub const FIELD_NAMES: [&'static str; 9] = [
        "w_q", "w_k", "w_v", "w_o", "w_gate", "w_val", "w_down", "norm_attn", "norm_mlp",
    ];

    pub fn fields(&self) -> [&Tensor; 9] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.w_gate,
            &self.w_val,
            &self.w_down,
            &self.norm_attn,
            &self.norm_mlp,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_gate,
            &mut self.w_val,
            &mut self.w_down,
            &mut self.norm_attn,
            &mut self.norm_mlp,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.fields().iter().map(|t| t.len()).sum()
    }
}

/// A standalone block: one bank plus its per-head gate scalars (shape `[1, H]`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub bank: BankParams,
    pub gates: Tensor,
}

/// Per-modality banks of one routed (boundary) layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedBank {
    banks: Vec<(ModalityTag, BankParams)>,
}

impl RoutedBank {
    pub fn new(banks: Vec<(ModalityTag, BankParams)>) -> Self {
        Self { banks }
    }

    pub fn bank_for(&self, tag: ModalityTag) -> Result<&BankParams> {
        self.banks
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, b)| b)
            .ok_or_else(|| CoreError::Routing(tag.name().to_string()))
    }

    pub fn entries(&self) -> &[(ModalityTag, BankParams)] {
        &self.banks
    }

    pub fn entries_mut(&mut self) -> &mut [(ModalityTag, BankParams)] {
        &mut self.banks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Shared { bank: BankParams, gates: Tensor },
    Routed { banks: RoutedBank, gates: Tensor },
}

impl LayerParams {
    pub fn gates(&self) -> &Tensor {
        match self {
            LayerParams::Shared { gates, .. } | LayerParams::Routed { gates, .. } => gates,
        }
    }
}

/// Per-modality input/output projections, the text embedding table, and the
/// final pre-projection norm gains.
#[derive(Debug, Clone, PartialEq)]
pub struct IoParams {
    pub text_embed: Tensor,
    pub video_in: Affine,
    pub audio_in: Affine,
    pub video_out_norm: Tensor,
    pub video_out: Affine,
    pub audio_out_norm: Tensor,
    pub audio_out: Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub io: IoParams,
    pub layers: Vec<LayerParams>,
}

fn normal(shape: &[usize], std: f32, stream: &mut Stream) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(stream.next_normal() * std);
    }
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Gate scalars start at 2.0: σ(2) ≈ 0.88, so fresh blocks behave close to
/// an ungated transformer while leaving the gate trainable in both
/// directions.
pub const GATE_INIT: f32 = 2.0;

impl ModelParams {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut stream = Stream::new(seed);
        let d = cfg.d_model;
        let io = IoParams {
            text_embed: normal(&[cfg.vocab, d], 0.02, &mut stream),
            video_in: Affine::new(
                normal(&[cfg.video_patch_dim(), d], 0.02, &mut stream),
                Tensor::zeros(&[d]),
            ),
            audio_in: Affine::new(
                normal(&[cfg.audio_channels, d], 0.02, &mut stream),
                Tensor::zeros(&[d]),
            ),
            video_out_norm: Tensor::full(&[d], 1.0),
            video_out: Affine::new(
                normal(&[d, cfg.video_patch_dim()], 0.02, &mut stream),
                Tensor::zeros(&[cfg.video_patch_dim()]),
            ),
            audio_out_norm: Tensor::full(&[d], 1.0),
            audio_out: Affine::new(
                normal(&[d, cfg.audio_channels], 0.02, &mut stream),
                Tensor::zeros(&[cfg.audio_channels]),
            ),
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let gates = Tensor::full(&[1, cfg.n_heads], GATE_INIT);
            if cfg.is_boundary(l) {
                let banks = ModalityTag::ALL
                    .iter()
                    .map(|&tag| (tag, BankParams::init(&cfg, &mut stream)))
                    .collect();
                layers.push(LayerParams::Routed {
                    banks: RoutedBank::new(banks),
                    gates,
                });
            } else {
                layers.push(LayerParams::Shared {
                    bank: BankParams::init(&cfg, &mut stream),
                    gates,
                });
            }
        }
        Ok(Self { cfg, io, layers })
    }

    /// All parameter arrays in a stable order with stable names; the single
    /// source of truth for checkpoints, the optimizer, and gradient
    /// extraction.
    pub fn arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        let io = &self.io;
        out.push(("io.text_embed".into(), &io.text_embed));
        out.push(("io.video_in.weight".into(), &io.video_in.weight));
        out.push(("io.video_in.bias".into(), &io.video_in.bias));
        out.push(("io.audio_in.weight".into(), &io.audio_in.weight));
        out.push(("io.audio_in.bias".into(), &io.audio_in.bias));
        out.push(("io.video_out_norm".into(), &io.video_out_norm));
        out.push(("io.video_out.weight".into(), &io.video_out.weight));
        out.push(("io.video_out.bias".into(), &io.video_out.bias));
        out.push(("io.audio_out_norm".into(), &io.audio_out_norm));
        out.push(("io.audio_out.weight".into(), &io.audio_out.weight));
        out.push(("io.audio_out.bias".into(), &io.audio_out.bias));
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::Shared { bank, gates } => {
                    out.push((format!("layer{l}.gates"), gates));
                    for (name, t) in BankParams::FIELD_NAMES.iter().zip(bank.fields()) {
                        out.push((format!("layer{l}.shared.{name}"), t));
                    }
                }
                LayerParams::Routed { banks, gates } => {
                    out.push((format!("layer{l}.gates"), gates));
                    for (tag, bank) in banks.entries() {
                        for (name, t) in BankParams::FIELD_NAMES.iter().zip(bank.fields()) {
                            out.push((format!("layer{l}.{}.{name}", tag.name()), t));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        let io = &mut self.io;
        out.push(("io.text_embed".into(), &mut io.text_embed));
        out.push(("io.video_in.weight".into(), &mut io.video_in.weight));
        out.push(("io.video_in.bias".into(), &mut io.video_in.bias));
        out.push(("io.audio_in.weight".into(), &mut io.audio_in.weight));
        out.push(("io.audio_in.bias".into(), &mut io.audio_in.bias));
        out.push(("io.video_out_norm".into(), &mut io.video_out_norm));
        out.push(("io.video_out.weight".into(), &mut io.video_out.weight));
        out.push(("io.video_out.bias".into(), &mut io.video_out.bias));
        out.push(("io.audio_out_norm".into(), &mut io.audio_out_norm));
        out.push(("io.audio_out.weight".into(), &mut io.audio_out.weight));
        out.push(("io.audio_out.bias".into(), &mut io.audio_out.bias));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                LayerParams::Shared { bank, gates } => {
                    out.push((format!("layer{l}.gates"), gates));
                    for (name, t) in BankParams::FIELD_NAMES.iter().zip(bank.fields_mut()) {
                        out.push((format!("layer{l}.shared.{name}"), t));
                    }
                }
                LayerParams::Routed { banks, gates } => {
                    out.push((format!("layer{l}.gates"), gates));
                    for (tag, bank) in banks.entries_mut() {
                        for (name, t) in BankParams::FIELD_NAMES.iter().zip(bank.fields_mut()) {
                            out.push((format!("layer{l}.{}.{name}", tag.name()), t));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Parameter counts by category, plus layer-structure counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCensus {
    pub boundary_layers: usize,
    pub shared_middle_layers: usize,
    pub boundary_modality_specific: usize,
    pub shared_middle: usize,
    pub io_projections: usize,
    pub gates: usize,
}

impl ParamCensus {
    pub fn total(&self) -> usize {
        self.boundary_modality_specific + self.shared_middle + self.io_projections + self.gates
    }
}

/// Walk the typed parameter structure and count by category. Middle layers
/// hold exactly one bank each — nothing tag-dependent can hide there.
pub fn param_census(params: &ModelParams) -> ParamCensus {
    let io = &params.io;
    let io_projections = io.text_embed.len()
        + io.video_in.weight.len()
        + io.video_in.bias.len()
        + io.audio_in.weight.len()
        + io.audio_in.bias.len()
        + io.video_out_norm.len()
        + io.video_out.weight.len()
        + io.video_out.bias.len()
        + io.audio_out_norm.len()
        + io.audio_out.weight.len()
        + io.audio_out.bias.len();
    let mut census = ParamCensus {
        boundary_layers: 0,
        shared_middle_layers: 0,
        boundary_modality_specific: 0,
        shared_middle: 0,
        io_projections,
        gates: 0,
    };
    for layer in &params.layers {
        match layer {
            LayerParams::Shared { bank, gates } => {
                census.shared_middle_layers += 1;
                census.shared_middle += bank.param_count();
                census.gates += gates.len();
            }
            LayerParams::Routed { banks, gates } => {
                census.boundary_layers += 1;
                for (_, bank) in banks.entries() {
                    census.boundary_modality_specific += bank.param_count();
                }
                census.gates += gates.len();
            }
        }
    }
    census
}

/// Which layers get the local video-window mask. The bias itself is built by
/// the super-resolution stage against a concrete sequence layout and carried
/// here so the forward pass stays layout-agnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerAttn {
    Global,
    Local,
}

#[derive(Debug, Clone)]
pub struct AttnPlan {
    pub layers: Vec<LayerAttn>,
    pub local_bias: Option<Tensor>,
}

impl AttnPlan {
    pub fn global(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerAttn::Global; n_layers],
            local_bias: None,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn has_local(&self) -> bool {
        self.layers.contains(&LayerAttn::Local)
    }

    fn bias_for(&self, layer: usize, n: usize) -> Result<Option<&Tensor>> {
        match self.layers[layer] {
            LayerAttn::Global => Ok(None),
            LayerAttn::Local => {
                let bias = self.local_bias.as_ref().ok_or_else(|| {
                    CoreError::Config("attention plan marks a layer local but carries no bias".into())
                })?;
                if bias.shape() != [n, n] {
                    return Err(CoreError::Config(format!(
                        "local bias shape {:?} does not match sequence length {n}",
                        bias.shape()
                    )));
                }
                Ok(Some(bias))
            }
        }
    }
}

fn slice_cols(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(n * len);
    for i in 0..n {
        data.extend_from_slice(&x.data()[i * d + start..i * d + start + len]);
    }
    Tensor::from_vec(&[n, len], data).expect("column slice shape")
}

fn write_cols(dst: &mut Tensor, start: usize, src: &Tensor) {
    let (n, d) = (dst.rows(), dst.cols());
    let w = src.cols();
    for i in 0..n {
        dst.data_mut()[i * d + start..i * d + start + w]
            .copy_from_slice(&src.data()[i * w..(i + 1) * w]);
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Multi-head self-attention with rotary positions and per-head output
/// gating: head output `o_h` is scaled by `σ(g_h)` before the heads are
/// concatenated and projected.
pub fn gated_attention(
    x: &Tensor,
    rope: &RopeTable,
    bias: Option<&Tensor>,
    p: &BlockParams,
) -> Result<Tensor> {
    attention_with(x, x, rope, bias, &p.bank, &p.gates)
}

/// Attention where q comes from `x_q` rows and k/v from `x_kv` rows — the
/// two differ only for routed layers, where per-tag projections have already
/// been applied. Both carry the full sequence here.
fn attention_with(
    q_src: &Tensor,
    kv_src: &Tensor,
    rope: &RopeTable,
    bias: Option<&Tensor>,
    bank: &BankParams,
    gates: &Tensor,
) -> Result<Tensor> {
    let h = gates.len();
    let d_model = q_src.cols();
    let d_head = d_model / h;
    let q = rotate_pairs_raw(&matmul(q_src, &bank.w_q)?, &rope.cos, &rope.sin, h, false);
    let k = rotate_pairs_raw(&matmul(kv_src, &bank.w_k)?, &rope.cos, &rope.sin, h, false);
    let v = matmul(kv_src, &bank.w_v)?;
    let n = q.rows();
    let mut mixed = Tensor::zeros(&[n, d_model]);
    let scale = 1.0 / (d_head as f32).sqrt();
    for head in 0..h {
        let qh = slice_cols(&q, head * d_head, d_head);
        let kh = slice_cols(&k, head * d_head, d_head);
        let vh = slice_cols(&v, head * d_head, d_head);
        let logits = matmul(&qh, &kh.transpose())?.scale(scale);
        let probs = softmax_rows(&logits, bias)?;
        let oh = matmul(&probs, &vh)?.scale(sigmoid(gates.data()[head]));
        write_cols(&mut mixed, head * d_head, &oh);
    }
    matmul(&mixed, &bank.w_o)
}

fn mlp(x: &Tensor, bank: &BankParams) -> Result<Tensor> {
    let gate = matmul(x, &bank.w_gate)?.map(|v| v / (1.0 + (-v).exp()));
    let val = matmul(x, &bank.w_val)?;
    matmul(&gate.mul(&val), &bank.w_down)
}

/// One pre-norm residual block: `x + attn(norm(x))`, then `+ mlp(norm(·))`.
pub fn block_forward(
    x: &Tensor,
    rope: &RopeTable,
    bias: Option<&Tensor>,
    p: &BlockParams,
) -> Result<Tensor> {
    shared_block(x, rope, bias, &p.bank, &p.gates)
}

fn shared_block(
    x: &Tensor,
    rope: &RopeTable,
    bias: Option<&Tensor>,
    bank: &BankParams,
    gates: &Tensor,
) -> Result<Tensor> {
    let normed = rms_norm(x, &bank.norm_attn, RMS_EPS)?;
    let h = x.add(&attention_with(&normed, &normed, rope, bias, bank, gates)?);
    let normed2 = rms_norm(&h, &bank.norm_mlp, RMS_EPS)?;
    Ok(h.add(&mlp(&normed2, bank)?))
}

/// Apply `f(rows, bank)` per modality block and reassemble in packing order.
fn per_tag<F>(seq: &TokenSequence, x: &Tensor, banks: &RoutedBank, f: F) -> Result<Tensor>
where
    F: Fn(&Tensor, &BankParams) -> Result<Tensor>,
{
    let d_in = x.cols();
    let mut parts: Vec<Tensor> = Vec::new();
    let mut width = None;
    for tag in ModalityTag::ALL {
        let range = seq.block_range(tag);
        if range.is_empty() {
            continue;
        }
        let rows = Tensor::from_vec(
            &[range.len(), d_in],
            x.data()[range.start * d_in..range.end * d_in].to_vec(),
        )
        .expect("block rows");
        let out = f(&rows, banks.bank_for(tag)?)?;
        width.get_or_insert(out.cols());
        parts.push(out);
    }
    let w = width.unwrap_or(d_in);
    let n: usize = parts.iter().map(|p| p.rows()).sum();
    let mut data = Vec::with_capacity(n * w);
    for p in &parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[n, w], data)
}

/// A boundary-layer block: every per-token projection and norm gain is
/// selected by the token's modality tag, while attention itself runs jointly
/// over the whole sequence (one softmax across all tokens). Gate scalars are
/// shared across modalities within the layer.
pub fn routed_block_forward(
    seq: &TokenSequence,
    banks: &RoutedBank,
    gates: &Tensor,
    rope: &RopeTable,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let x = seq.feats();
    let h = gates.len();
    let d_model = x.cols();
    let d_head = d_model / h;

    let normed = per_tag(seq, x, banks, |rows, bank| {
        rms_norm(rows, &bank.norm_attn, RMS_EPS)
    })?;
    let q = rotate_pairs_raw(
        &per_tag(seq, &normed, banks, |rows, bank| matmul(rows, &bank.w_q))?,
        &rope.cos,
        &rope.sin,
        h,
        false,
    );
    let k = rotate_pairs_raw(
        &per_tag(seq, &normed, banks, |rows, bank| matmul(rows, &bank.w_k))?,
        &rope.cos,
        &rope.sin,
        h,
        false,
    );
    let v = per_tag(seq, &normed, banks, |rows, bank| matmul(rows, &bank.w_v))?;

    let n = x.rows();
    let mut mixed = Tensor::zeros(&[n, d_model]);
    let scale = 1.0 / (d_head as f32).sqrt();
    for head in 0..h {
        let qh = slice_cols(&q, head * d_head, d_head);
        let kh = slice_cols(&k, head * d_head, d_head);
        let vh = slice_cols(&v, head * d_head, d_head);
        let logits = matmul(&qh, &kh.transpose())?.scale(scale);
        let probs = softmax_rows(&logits, bias)?;
        let oh = matmul(&probs, &vh)?.scale(sigmoid(gates.data()[head]));
        write_cols(&mut mixed, head * d_head, &oh);
    }
    let attn = per_tag(seq, &mixed, banks, |rows, bank| matmul(rows, &bank.w_o))?;

    let h1 = x.add(&attn);
    let normed2 = per_tag(seq, &h1, banks, |rows, bank| {
        rms_norm(rows, &bank.norm_mlp, RMS_EPS)
    })?;
    let mlp_out = per_tag(seq, &normed2, banks, |rows, bank| mlp(rows, bank))?;
    Ok(h1.add(&mlp_out))
}

/// Velocity predictions for the denoised modalities, in latent widths:
/// video rows are flattened-patch velocities, audio rows are per-frame
/// channel velocities.
#[derive(Debug, Clone)]
pub struct VelocityTokens {
    pub video: Tensor,
    pub video_pos: Vec<[i64; 3]>,
    pub audio: Tensor,
}

/// Run the full sandwich: `n_boundary` routed layers, shared middle layers,
/// `n_boundary` routed layers, then per-modality final norm and output
/// projection. The signature is the whole story: (sequence, parameters,
/// attention plan) — nothing else reaches the model.
pub fn model_forward(
    seq: &TokenSequence,
    params: &ModelParams,
    plan: &AttnPlan,
) -> Result<VelocityTokens> {
    let cfg = &params.cfg;
    if plan.len() != cfg.n_layers {
        return Err(CoreError::Config(format!(
            "attention plan covers {} layers, model has {}",
            plan.len(),
            cfg.n_layers
        )));
    }
    let rope = rope_table(seq, cfg.d_head, cfg.axis_split)?;
    let n = seq.len();
    let mut x = seq.feats().clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let bias = plan.bias_for(l, n)?;
        x = match layer {
            LayerParams::Shared { bank, gates } => shared_block(&x, &rope, bias, bank, gates)?,
            LayerParams::Routed { banks, gates } => {
                routed_block_forward(&seq.with_feats(x), banks, gates, &rope, bias)?
            }
        };
    }

    let d = cfg.d_model;
    let video_range = seq.block_range(ModalityTag::Video);
    let audio_range = seq.block_range(ModalityTag::Audio);
    let video_rows = Tensor::from_vec(
        &[video_range.len(), d],
        x.data()[video_range.start * d..video_range.end * d].to_vec(),
    )?;
    let audio_rows = Tensor::from_vec(
        &[audio_range.len(), d],
        x.data()[audio_range.start * d..audio_range.end * d].to_vec(),
    )?;
    let video = params
        .io
        .video_out
        .apply(&rms_norm(&video_rows, &params.io.video_out_norm, RMS_EPS)?)?;
    let audio = params
        .io
        .audio_out
        .apply(&rms_norm(&audio_rows, &params.io.audio_out_norm, RMS_EPS)?)?;
    Ok(VelocityTokens {
        video,
        video_pos: seq.pos()[video_range].to_vec(),
        audio,
    })
}
