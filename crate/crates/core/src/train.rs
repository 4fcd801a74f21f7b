//! Training: the transformer forward re-expressed on the gradient tape, the
//! flow-matching loss, and an Adam optimizer whose moment buffers follow the
//! model's canonical array order.
//!
//! The tape forward mirrors the plain forward op for op — both call the same
//! tensor kernels — so the loss it reports agrees with the plain
//! [`compute_flow_loss`] and finite differences of the plain loss validate
//! the tape's gradients.

use crate::backbone::{LayerParams, ModelParams};
use crate::error::{CoreError, Result};
use crate::sampler::{pack_model_input, FlowBatch};
use crate::sequence::{patch_matrix, rope_table, ModalityTag, TokenSequence};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, RMS_EPS};

/// Default learning rate for toy training runs.
pub const TOY_LR: f32 = 1e-3;

// ---------------------------------------------------------------------------
// Parameters lifted onto the tape
// ---------------------------------------------------------------------------

struct VarBank {
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    w_gate: Var,
    w_val: Var,
    w_down: Var,
    norm_attn: Var,
    norm_mlp: Var,
}

enum VarLayerKind {
    Shared(VarBank),
    Routed(Vec<(ModalityTag, VarBank)>),
}

struct VarLayer {
    gates: Var,
    kind: VarLayerKind,
}

struct VarIo {
    text_embed: Var,
    video_in_w: Var,
    video_in_b: Var,
    audio_in_w: Var,
    audio_in_b: Var,
    video_out_norm: Var,
    video_out_w: Var,
    video_out_b: Var,
    audio_out_norm: Var,
    audio_out_w: Var,
    audio_out_b: Var,
}

/// Every parameter array as a tape leaf, in the exact order of
/// [`ModelParams::arrays`] so gradients can be read back positionally.
pub struct VarParams {
    io: VarIo,
    layers: Vec<VarLayer>,
    pub leaves: Vec<Var>,
}

fn lift_bank(it: &mut impl Iterator<Item = Var>) -> VarBank {
    let mut next = || it.next().expect("bank leaf order");
    VarBank {
        w_q: next(),
        w_k: next(),
        w_v: next(),
        w_o: next(),
        w_gate: next(),
        w_val: next(),
        w_down: next(),
        norm_attn: next(),
        norm_mlp: next(),
    }
}

/// Copy every parameter array onto the tape as a leaf.
pub fn lift_params(tape: &mut Tape, params: &ModelParams) -> VarParams {
    let leaves: Vec<Var> = params
        .arrays()
        .iter()
        .map(|(_, t)| tape.leaf((*t).clone()))
        .collect();
    let mut it = leaves.iter().copied();
    let mut next = || it.next().expect("io leaf order");
    let io = VarIo {
        text_embed: next(),
        video_in_w: next(),
        video_in_b: next(),
        audio_in_w: next(),
        audio_in_b: next(),
        video_out_norm: next(),
        video_out_w: next(),
        video_out_b: next(),
        audio_out_norm: next(),
        audio_out_w: next(),
        audio_out_b: next(),
    };
    // field order within VarIo doesn't matter; draw order above must match
    // ModelParams::arrays exactly
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        match layer {
            LayerParams::Shared { .. } => {
                let gates = it.next().expect("gate leaf");
                let bank = lift_bank(&mut it);
                layers.push(VarLayer {
                    gates,
                    kind: VarLayerKind::Shared(bank),
                });
            }
            LayerParams::Routed { banks, .. } => {
                let gates = it.next().expect("gate leaf");
                let routed = banks
                    .entries()
                    .iter()
                    .map(|(tag, _)| (*tag, lift_bank(&mut it)))
                    .collect();
                layers.push(VarLayer {
                    gates,
                    kind: VarLayerKind::Routed(routed),
                });
            }
        }
    }
    assert!(it.next().is_none(), "leaf count mismatch");
    VarParams { io, layers, leaves }
}

// ---------------------------------------------------------------------------
// Forward pass on the tape
// ---------------------------------------------------------------------------

fn var_bank_for(banks: &[(ModalityTag, VarBank)], tag: ModalityTag) -> Result<&VarBank> {
    banks
        .iter()
        .find(|(t, _)| *t == tag)
        .map(|(_, b)| b)
        .ok_or_else(|| CoreError::Routing(tag.name().to_string()))
}

struct TapeCtx<'a> {
    layout: &'a TokenSequence,
    rope_cos: Tensor,
    rope_sin: Tensor,
    n_heads: usize,
    d_head: usize,
}

fn tape_attention_core(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    gates: Var,
    ctx: &TapeCtx,
) -> Result<Var> {
    let q = tape.rotate_pairs(q, ctx.rope_cos.clone(), ctx.rope_sin.clone(), ctx.n_heads);
    let k = tape.rotate_pairs(k, ctx.rope_cos.clone(), ctx.rope_sin.clone(), ctx.n_heads);
    let dh = ctx.d_head;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut heads = Vec::with_capacity(ctx.n_heads);
    for h in 0..ctx.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let raw = tape.matmul(qh, kt)?;
        let logits = tape.scale(raw, scale);
        let probs = tape.softmax(logits, None)?;
        let oh = tape.matmul(probs, vh)?;
        let gate_h = tape.slice_cols(gates, h, 1);
        let sig = tape.sigmoid(gate_h);
        heads.push(tape.scale_by_scalar(oh, sig));
    }
    Ok(tape.concat_cols(&heads))
}

fn tape_mlp(tape: &mut Tape, x: Var, bank: &VarBank) -> Result<Var> {
    let gate_pre = tape.matmul(x, bank.w_gate)?;
    let gate = tape.silu(gate_pre);
    let val = tape.matmul(x, bank.w_val)?;
    let m = tape.mul(gate, val);
    tape.matmul(m, bank.w_down)
}

fn tape_shared_block(
    tape: &mut Tape,
    x: Var,
    bank: &VarBank,
    gates: Var,
    ctx: &TapeCtx,
) -> Result<Var> {
    let normed = tape.rms_norm(x, bank.norm_attn, RMS_EPS)?;
    let q = tape.matmul(normed, bank.w_q)?;
    let k = tape.matmul(normed, bank.w_k)?;
    let v = tape.matmul(normed, bank.w_v)?;
    let mixed = tape_attention_core(tape, q, k, v, gates, ctx)?;
    let attn = tape.matmul(mixed, bank.w_o)?;
    let h1 = tape.add(x, attn);
    let normed2 = tape.rms_norm(h1, bank.norm_mlp, RMS_EPS)?;
    let out = tape_mlp(tape, normed2, bank)?;
    Ok(tape.add(h1, out))
}

/// Apply a per-tag transform to each modality's rows and reassemble in
/// packing order.
fn tape_per_tag<F>(
    tape: &mut Tape,
    x: Var,
    banks: &[(ModalityTag, VarBank)],
    ctx: &TapeCtx,
    mut f: F,
) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, &VarBank) -> Result<Var>,
{
    let mut parts = Vec::new();
    for tag in ModalityTag::ALL {
        let range = ctx.layout.block_range(tag);
        if range.is_empty() {
            continue;
        }
        let rows = tape.slice_rows(x, range.start, range.len());
        parts.push(f(tape, rows, var_bank_for(banks, tag)?)?);
    }
    Ok(tape.concat_rows(&parts))
}

fn tape_routed_block(
    tape: &mut Tape,
    x: Var,
    banks: &[(ModalityTag, VarBank)],
    gates: Var,
    ctx: &TapeCtx,
) -> Result<Var> {
    let normed = tape_per_tag(tape, x, banks, ctx, |t, rows, b| {
        t.rms_norm(rows, b.norm_attn, RMS_EPS)
    })?;
    let q = tape_per_tag(tape, normed, banks, ctx, |t, rows, b| t.matmul(rows, b.w_q))?;
    let k = tape_per_tag(tape, normed, banks, ctx, |t, rows, b| t.matmul(rows, b.w_k))?;
    let v = tape_per_tag(tape, normed, banks, ctx, |t, rows, b| t.matmul(rows, b.w_v))?;
    let mixed = tape_attention_core(tape, q, k, v, gates, ctx)?;
    let attn = tape_per_tag(tape, mixed, banks, ctx, |t, rows, b| t.matmul(rows, b.w_o))?;
    let h1 = tape.add(x, attn);
    let normed2 = tape_per_tag(tape, h1, banks, ctx, |t, rows, b| {
        t.rms_norm(rows, b.norm_mlp, RMS_EPS)
    })?;
    let out = tape_per_tag(tape, normed2, banks, ctx, |t, rows, b| tape_mlp(t, rows, b))?;
    Ok(tape.add(h1, out))
}

fn one_hot(ids: &[usize], vocab: usize) -> Tensor {
    let mut t = Tensor::zeros(&[ids.len(), vocab]);
    for (i, &id) in ids.iter().enumerate() {
        t.data_mut()[i * vocab + id] = 1.0;
    }
    t
}

/// One sample's flow-matching loss on the tape:
/// `0.5·mean((v̂_video − v*_video)²) + 0.5·mean((v̂_audio − v*_audio)²)`.
pub fn flow_loss_on_tape(
    tape: &mut Tape,
    vp: &VarParams,
    params: &ModelParams,
    sample: &FlowBatch,
) -> Result<Var> {
    let cfg = &params.cfg;
    // the plain packing gives us the layout (tags, coords, ranges) and the
    // rotation table; features are rebuilt on the tape below
    let layout = pack_model_input(params, &sample.video_xt, &sample.audio_xt, &sample.cond)?;
    let rope = rope_table(&layout, cfg.d_head, cfg.axis_split)?;
    let ctx = TapeCtx {
        layout: &layout,
        rope_cos: rope.cos,
        rope_sin: rope.sin,
        n_heads: cfg.n_heads,
        d_head: cfg.d_head,
    };

    // input projections, on the tape
    let onehot = tape.leaf(one_hot(&sample.cond.text_ids, cfg.vocab));
    let text_rows = tape.matmul(onehot, vp.io.text_embed)?;
    let mut parts = vec![text_rows];
    if let Some(image) = &sample.cond.ref_image {
        let (raw, _) = patch_matrix(image, cfg.patch)?;
        let raw = tape.leaf(raw);
        let projected = tape.matmul(raw, vp.io.video_in_w)?;
        parts.push(tape.add_row(projected, vp.io.video_in_b));
    }
    let (video_raw, _) = patch_matrix(&sample.video_xt, cfg.patch)?;
    let video_leaf = tape.leaf(video_raw);
    let video_proj = tape.matmul(video_leaf, vp.io.video_in_w)?;
    parts.push(tape.add_row(video_proj, vp.io.video_in_b));
    let audio_leaf = tape.leaf(sample.audio_xt.frames().clone());
    let audio_proj = tape.matmul(audio_leaf, vp.io.audio_in_w)?;
    parts.push(tape.add_row(audio_proj, vp.io.audio_in_b));
    let mut x = tape.concat_rows(&parts);

    for layer in &vp.layers {
        x = match &layer.kind {
            VarLayerKind::Shared(bank) => tape_shared_block(tape, x, bank, layer.gates, &ctx)?,
            VarLayerKind::Routed(banks) => tape_routed_block(tape, x, banks, layer.gates, &ctx)?,
        };
    }

    // per-modality heads and targets
    let video_range = layout.block_range(ModalityTag::Video);
    let audio_range = layout.block_range(ModalityTag::Audio);
    let video_rows = tape.slice_rows(x, video_range.start, video_range.len());
    let video_normed = tape.rms_norm(video_rows, vp.io.video_out_norm, RMS_EPS)?;
    let video_proj = tape.matmul(video_normed, vp.io.video_out_w)?;
    let video_pred = tape.add_row(video_proj, vp.io.video_out_b);
    let audio_rows = tape.slice_rows(x, audio_range.start, audio_range.len());
    let audio_normed = tape.rms_norm(audio_rows, vp.io.audio_out_norm, RMS_EPS)?;
    let audio_proj = tape.matmul(audio_normed, vp.io.audio_out_w)?;
    let audio_pred = tape.add_row(audio_proj, vp.io.audio_out_b);

    let (video_target, _) = patch_matrix(&sample.video_v, cfg.patch)?;
    let video_loss = tape.mean_sq_diff(video_pred, video_target);
    let audio_loss = tape.mean_sq_diff(audio_pred, sample.audio_v.frames().clone());
    Ok(tape.weighted_sum_scalars(&[(video_loss, 0.5), (audio_loss, 0.5)]))
}

// ---------------------------------------------------------------------------
// Plain (tape-free) twin of the loss, used for finite differences
// ---------------------------------------------------------------------------

/// Flow-matching loss of one sample via the plain forward pass, accumulated
/// in f64 so finite differences of it are as clean as f32 forwards allow.
pub fn compute_flow_loss(params: &ModelParams, sample: &FlowBatch) -> Result<f64> {
    let seq = pack_model_input(params, &sample.video_xt, &sample.audio_xt, &sample.cond)?;
    let plan = crate::backbone::AttnPlan::global(params.cfg.n_layers);
    let out = crate::backbone::model_forward(&seq, params, &plan)?;
    let (video_target, _) = patch_matrix(&sample.video_v, params.cfg.patch)?;
    let mse = |pred: &Tensor, target: &Tensor| -> f64 {
        let sum: f64 = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| ((p - t) as f64).powi(2))
            .sum();
        sum / pred.len().max(1) as f64
    };
    Ok(0.5 * mse(&out.video, &video_target) + 0.5 * mse(&out.audio, sample.audio_v.frames()))
}

/// Mean plain loss over a batch.
pub fn compute_batch_flow_loss(params: &ModelParams, batch: &[FlowBatch]) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::Config("empty training batch".into()));
    }
    let mut sum = 0.0f64;
    for sample in batch {
        sum += compute_flow_loss(params, sample)?;
    }
    Ok(sum / batch.len() as f64)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Moment buffers are allocated per parameter array, in array order.
    pub fn new(params: &ModelParams, lr: f32) -> Self {
        let shapes: Vec<&[usize]> = params.arrays().iter().map(|(_, t)| t.shape()).collect();
        Self::for_shapes(&shapes, lr)
    }

    /// Optimizer over an explicit array list (the model path above is the
    /// common case; the toy pixel codec trains four bare tensors).
    pub fn for_shapes(shapes: &[&[usize]], lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update from per-array gradients (in array order; `None` leaves
    /// that array untouched).
    pub fn apply(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>]) -> Result<()> {
        let mut arrays: Vec<&mut Tensor> =
            params.arrays_mut().into_iter().map(|(_, t)| t).collect();
        self.apply_to(&mut arrays, grads)
    }

    pub fn apply_to(&mut self, arrays: &mut [&mut Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if arrays.len() != grads.len() || arrays.len() != self.m.len() {
            return Err(CoreError::Config(format!(
                "optimizer state holds {} arrays, model has {}, gradients {}",
                self.m.len(),
                arrays.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let param = &mut *arrays[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..g.len() {
                let gj = g.data()[j];
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                param.data_mut()[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

/// One optimizer step on a batch: lift the parameters, accumulate the mean
/// flow loss across samples on one tape, backpropagate, and apply Adam.
/// Returns the batch loss.
pub fn training_step(
    params: &mut ModelParams,
    batch: &[FlowBatch],
    opt: &mut Adam,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(CoreError::Config("empty training batch".into()));
    }
    // a poisoned parameter set means an earlier step diverged; report that
    // rather than whatever shape of error NaN activations first trip
    for (_, t) in params.arrays() {
        if !t.is_finite() {
            return Err(CoreError::Divergence {
                stage: "training".into(),
                step: opt.step_count(),
            });
        }
    }
    let mut tape = Tape::new();
    let vp = lift_params(&mut tape, params);
    let w = 1.0 / batch.len() as f32;
    let mut terms = Vec::with_capacity(batch.len());
    for sample in batch {
        let loss = flow_loss_on_tape(&mut tape, &vp, params, sample)?;
        terms.push((loss, w));
    }
    let total = tape.weighted_sum_scalars(&terms);
    let loss_value = tape.val(total).data()[0];
    if !loss_value.is_finite() {
        return Err(CoreError::Divergence {
            stage: "training".into(),
            step: opt.step_count(),
        });
    }
    let mut grads = tape.backward(total);
    let collected: Vec<Option<Tensor>> = vp.leaves.iter().map(|&v| grads.take(v)).collect();
    opt.apply(params, &collected)?;
    Ok(loss_value)
}
