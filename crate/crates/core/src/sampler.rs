//! Straight-path flow sampling: latents travel the segment from pure noise
//! at t = 0 to data at t = 1, the model predicts the constant velocity of
//! that segment, and generation integrates it with fixed-step Euler. Optional
//! classifier-free guidance runs a second, unconditional evaluation per step
//! and extrapolates between the two predictions.

use std::cell::Cell;

use crate::backbone::{model_forward, AttnPlan, ModelParams};
use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, gaussian_noise, Stream};
use crate::sequence::{
    embed_audio, embed_text, grid_from_patch_matrix, pack_sequence, patchify_video,
    ref_image_block, AudioLatent, ModalityBlock, ModalityTag, TokenSequence,
};
use crate::tensor::{LatentGrid, Tensor};

/// What the generation is conditioned on. An empty id list (and no reference
/// image) is the unconditional branch used for guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub text_ids: Vec<usize>,
    pub ref_image: Option<LatentGrid>,
}

impl Conditioning {
    pub fn text(ids: Vec<usize>) -> Self {
        Self {
            text_ids: ids,
            ref_image: None,
        }
    }

    pub fn unconditional() -> Self {
        Self {
            text_ids: Vec::new(),
            ref_image: None,
        }
    }

    pub fn is_unconditional(&self) -> bool {
        self.text_ids.is_empty() && self.ref_image.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Euler steps over the unit interval.
    pub n_steps: usize,
    /// Guidance scale; `None` disables the unconditional pass entirely.
    pub guidance: Option<f32>,
    /// Probability of dropping the conditioning when building training pairs.
    pub cond_drop_prob: f32,
}

impl SamplerConfig {
    /// Base-model preset: many steps, strong guidance.
    pub fn base() -> Self {
        Self {
            n_steps: 50,
            guidance: Some(5.0),
            cond_drop_prob: 0.1,
        }
    }

    /// Few-step preset for a distilled model: 8 evaluations, no guidance.
    pub fn distilled() -> Self {
        Self {
            n_steps: 8,
            guidance: None,
            cond_drop_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(CoreError::Config("n_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(CoreError::Config(format!(
                "cond_drop_prob {} outside [0, 1]",
                self.cond_drop_prob
            )));
        }
        Ok(())
    }
}

/// Anything that maps noisy latents (plus conditioning) to a velocity
/// prediction. The real transformer implements it; tests swap in closed-form
/// stubs; wrappers count calls or record inputs.
pub trait VelocityModel {
    fn velocity(
        &self,
        video: &LatentGrid,
        audio: &AudioLatent,
        cond: &Conditioning,
    ) -> Result<(LatentGrid, AudioLatent)>;
}

/// Build the packed token sequence the transformer consumes for one
/// denoising evaluation.
pub fn pack_model_input(
    params: &ModelParams,
    video: &LatentGrid,
    audio: &AudioLatent,
    cond: &Conditioning,
) -> Result<TokenSequence> {
    let cfg = &params.cfg;
    let io = &params.io;
    let text = embed_text(&cond.text_ids, &io.text_embed)?;
    let ref_block = match &cond.ref_image {
        Some(image) => ref_image_block(image, cfg.patch, &io.video_in)?,
        None => ModalityBlock::empty(ModalityTag::RefImage, cfg.d_model),
    };
    let video_block = patchify_video(video, cfg.patch, &io.video_in)?;
    let audio_block = embed_audio(audio, &io.audio_in)?;
    pack_sequence(&text, &ref_block, &video_block, &audio_block)
}

/// The transformer as a velocity model: pack, run the sandwich, scatter the
/// video output back onto the latent grid.
pub struct BackboneModel<'a> {
    pub params: &'a ModelParams,
    pub plan: AttnPlan,
}

impl<'a> BackboneModel<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let plan = AttnPlan::global(params.cfg.n_layers);
        Self { params, plan }
    }

    pub fn with_plan(params: &'a ModelParams, plan: AttnPlan) -> Self {
        Self { params, plan }
    }
}

impl VelocityModel for BackboneModel<'_> {
    fn velocity(
        &self,
        video: &LatentGrid,
        audio: &AudioLatent,
        cond: &Conditioning,
    ) -> Result<(LatentGrid, AudioLatent)> {
        let seq = pack_model_input(self.params, video, audio, cond)?;
        let out = model_forward(&seq, self.params, &self.plan)?;
        let v_video = grid_from_patch_matrix(
            &out.video,
            &out.video_pos,
            self.params.cfg.patch,
            video.dims(),
        )?;
        let v_audio = AudioLatent::new(out.audio)?;
        Ok((v_video, v_audio))
    }
}

/// Counts evaluations of the wrapped model.
pub struct CountingModel<'a> {
    inner: &'a dyn VelocityModel,
    calls: Cell<usize>,
}

impl<'a> CountingModel<'a> {
    pub fn new(inner: &'a dyn VelocityModel) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl VelocityModel for CountingModel<'_> {
    fn velocity(
        &self,
        video: &LatentGrid,
        audio: &AudioLatent,
        cond: &Conditioning,
    ) -> Result<(LatentGrid, AudioLatent)> {
        self.calls.set(self.calls.get() + 1);
        self.inner.velocity(video, audio, cond)
    }
}

/// Fixed velocity field, independent of position and conditioning. Euler
/// over [0, 1] must then land exactly on `start + velocity`.
pub struct ConstantVelocity {
    pub video: LatentGrid,
    pub audio: AudioLatent,
}

impl VelocityModel for ConstantVelocity {
    fn velocity(
        &self,
        _video: &LatentGrid,
        _audio: &AudioLatent,
        _cond: &Conditioning,
    ) -> Result<(LatentGrid, AudioLatent)> {
        Ok((
            self.video.clone(),
            AudioLatent::new(self.audio.frames().clone())?,
        ))
    }
}

/// The straight interpolation path and its target velocity:
/// `x_t = (1−t)·x_noise + t·x_data`, `v* = x_data − x_noise`.
pub fn flow_interpolate(x_data: &Tensor, x_noise: &Tensor, t: f32) -> Result<(Tensor, Tensor)> {
    if x_data.shape() != x_noise.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "flow_interpolate",
            lhs: x_data.shape().to_vec(),
            rhs: x_noise.shape().to_vec(),
        });
    }
    let x_t = x_noise.scale(1.0 - t).add(&x_data.scale(t));
    let v_star = x_data.sub(x_noise);
    Ok((x_t, v_star))
}

/// Guided velocity: `v_uncond + s·(v_cond − v_uncond)`. `s = 0` is the
/// unconditional prediction, `s = 1` the conditional one.
pub fn cfg_combine(v_cond: &Tensor, v_uncond: &Tensor, s: f32) -> Result<Tensor> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "cfg_combine",
            lhs: v_cond.shape().to_vec(),
            rhs: v_uncond.shape().to_vec(),
        });
    }
    Ok(v_uncond.add(&v_cond.sub(v_uncond).scale(s)))
}

fn guided_velocity(
    model: &dyn VelocityModel,
    video: &LatentGrid,
    audio: &AudioLatent,
    cond: &Conditioning,
    guidance: Option<f32>,
) -> Result<(LatentGrid, AudioLatent)> {
    let (vc_video, vc_audio) = model.velocity(video, audio, cond)?;
    let Some(s) = guidance else {
        return Ok((vc_video, vc_audio));
    };
    let uncond = Conditioning::unconditional();
    let (vu_video, vu_audio) = model.velocity(video, audio, &uncond)?;
    let dims = vc_video.dims();
    let video = LatentGrid::new(
        dims.0,
        dims.1,
        dims.2,
        dims.3,
        cfg_combine(vc_video.tensor(), vu_video.tensor(), s)?,
    )?;
    let audio = AudioLatent::new(cfg_combine(vc_audio.frames(), vu_audio.frames(), s)?)?;
    Ok((video, audio))
}

fn step_in_place(x: &mut [f32], v: &[f32], dt: f32) {
    for (xi, &vi) in x.iter_mut().zip(v) {
        *xi += dt * vi;
    }
}

/// Integrate the velocity field from t = 0 to t = 1 on a uniform grid of
/// `n_steps` Euler steps, starting from the given noise latents. With
/// guidance enabled each step costs two model evaluations.
pub fn euler_sample(
    model: &dyn VelocityModel,
    cond: &Conditioning,
    init_video: LatentGrid,
    init_audio: AudioLatent,
    sampler: &SamplerConfig,
) -> Result<(LatentGrid, AudioLatent)> {
    sampler.validate()?;
    let n = sampler.n_steps;
    let dt = 1.0 / n as f32;
    let mut video = init_video;
    let mut audio = init_audio;
    for step in 0..n {
        let (v_video, v_audio) = guided_velocity(model, &video, &audio, cond, sampler.guidance)?;
        if v_video.dims() != video.dims() {
            return Err(CoreError::ShapeMismatch {
                op: "euler step",
                lhs: video.tensor().shape().to_vec(),
                rhs: v_video.tensor().shape().to_vec(),
            });
        }
        step_in_place(video.data_mut(), v_video.data(), dt);
        let (a, va) = (audio.frames_mut(), v_audio.frames());
        if a.shape() != va.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "euler step",
                lhs: a.shape().to_vec(),
                rhs: va.shape().to_vec(),
            });
        }
        step_in_place(a.data_mut(), va.data(), dt);
        if !video.tensor().is_finite() || !audio.frames().is_finite() {
            return Err(CoreError::Divergence { stage: "base".into(), step });
        }
    }
    Ok((video, audio))
}

/// Draw the starting noise for a generation deterministically from a seed.
pub fn init_noise(
    dims: (usize, usize, usize, usize),
    audio_frames: usize,
    audio_channels: usize,
    seed: u64,
) -> Result<(LatentGrid, AudioLatent)> {
    let (t, h, w, c) = dims;
    let video = LatentGrid::new(
        t,
        h,
        w,
        c,
        gaussian_noise(&[t, h, w, c], derive_seed(seed, 1)),
    )?;
    let audio = AudioLatent::new(gaussian_noise(
        &[audio_frames, audio_channels],
        derive_seed(seed, 2),
    ))?;
    Ok((video, audio))
}

/// One supervised flow pair: noisy latents at a shared `t`, the straight-path
/// target velocities, and the (possibly dropped) conditioning. `t` is kept
/// for diagnostics only — the model never sees it.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub video_xt: LatentGrid,
    pub audio_xt: AudioLatent,
    pub video_v: LatentGrid,
    pub audio_v: AudioLatent,
    pub cond: Conditioning,
    pub t: f32,
}

/// Corrupt one clip into a training pair: a single t is shared by both
/// modalities while their noises are drawn independently, and with
/// probability `cond_drop_prob` the conditioning is replaced by the
/// unconditional branch so guidance has something to extrapolate from.
pub fn make_training_batch(
    data_video: &LatentGrid,
    data_audio: &AudioLatent,
    cond: &Conditioning,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<FlowBatch> {
    let mut stream = Stream::new(derive_seed(seed, 3));
    let t = stream.next_uniform() as f32;
    let dims = data_video.dims();
    let video_noise = gaussian_noise(
        &[dims.0, dims.1, dims.2, dims.3],
        derive_seed(seed, 4),
    );
    let audio_noise = gaussian_noise(
        &[data_audio.n_frames(), data_audio.channels()],
        derive_seed(seed, 5),
    );
    let (video_xt, video_v) = flow_interpolate(data_video.tensor(), &video_noise, t)?;
    let (audio_xt, audio_v) = flow_interpolate(data_audio.frames(), &audio_noise, t)?;
    let dropped = stream.next_uniform() < sampler.cond_drop_prob as f64;
    let cond = if dropped {
        Conditioning::unconditional()
    } else {
        cond.clone()
    };
    Ok(FlowBatch {
        video_xt: LatentGrid::new(dims.0, dims.1, dims.2, dims.3, video_xt)?,
        audio_xt: AudioLatent::new(audio_xt)?,
        video_v: LatentGrid::new(dims.0, dims.1, dims.2, dims.3, video_v)?,
        audio_v: AudioLatent::new(audio_v)?,
        cond,
        t,
    })
}
