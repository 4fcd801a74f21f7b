//! Latent-space super-resolution: trilinearly upsample the base video
//! latent, blend fresh noise back in, and refine with a handful of Euler
//! steps under a dedicated checkpoint. The base audio rides along in a
//! noised, frozen form — it shapes the video through attention but is never
//! updated itself — and most layers may restrict video-to-video attention to
//! a local 3D window.

use crate::backbone::{AttnPlan, LayerAttn, ModelConfig, ModelParams};
use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, gaussian_noise};
use crate::sampler::{flow_interpolate, BackboneModel, Conditioning, VelocityModel};
use crate::sequence::{AudioLatent, ModalityTag, TokenSequence};
use crate::tensor::{trilinear_resample, LatentGrid, Tensor};

/// Noise-stream tags inside [`sr_prepare`], exposed so oracle tests can
/// reproduce the exact draws.
pub const SR_VIDEO_NOISE_TAG: u64 = 10;
pub const SR_AUDIO_NOISE_TAG: u64 = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct SRConfig {
    /// Per-axis upsample factors (τ, y, x); scaled extents must be integral.
    pub scale: (f64, f64, f64),
    /// Where on the noise→data segment refinement starts; strictly in (0,1).
    pub renoise_t: f32,
    /// Euler steps from `renoise_t` to 1.
    pub n_steps: usize,
    /// Local-attention window in token-grid units; `None` keeps every layer
    /// global regardless of the layer set.
    pub window: Option<(usize, usize, usize)>,
    /// Layers that use the window; `None` means all middle (shared) layers.
    pub local_layers: Option<Vec<usize>>,
}

impl Default for SRConfig {
    /// Desk-scale defaults: double spatial resolution, keep the frame rate.
    fn default() -> Self {
        Self {
            scale: (1.0, 2.0, 2.0),
            renoise_t: 0.5,
            n_steps: 5,
            window: Some((2, 4, 4)),
            local_layers: None,
        }
    }
}

impl SRConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.renoise_t > 0.0 && self.renoise_t < 1.0) {
            return Err(CoreError::Config(format!(
                "renoise_t must lie strictly inside (0,1), got {}",
                self.renoise_t
            )));
        }
        if self.n_steps == 0 {
            return Err(CoreError::Config("sr n_steps must be >= 1".into()));
        }
        let (st, sh, sw) = self.scale;
        if !(st > 0.0 && sh > 0.0 && sw > 0.0) {
            return Err(CoreError::Config(format!(
                "scale factors must be positive, got {:?}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Target extents after scaling, rejecting fractional results.
    pub fn scaled_dims(&self, dims: (usize, usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let target = |extent: usize, factor: f64, axis: &str| -> Result<usize> {
            let exact = extent as f64 * factor;
            let rounded = exact.round();
            if (exact - rounded).abs() > 1e-9 || rounded < 1.0 {
                return Err(CoreError::Config(format!(
                    "scale {factor} takes {axis} extent {extent} to non-integral {exact}"
                )));
            }
            Ok(rounded as usize)
        };
        Ok((
            target(dims.0, self.scale.0, "time")?,
            target(dims.1, self.scale.1, "height")?,
            target(dims.2, self.scale.2, "width")?,
        ))
    }
}

/// Everything the refinement loop needs. `a_aux` is deliberately private:
/// it is set once at construction and only ever read back.
#[derive(Debug, Clone)]
pub struct SRState {
    pub x_video: LatentGrid,
    a_aux: AudioLatent,
    pub t_cur: f32,
    pub cond: Conditioning,
}

impl SRState {
    pub fn a_aux(&self) -> &AudioLatent {
        &self.a_aux
    }
}

/// Upsample the base video latent, then move both modalities to flow time
/// `renoise_t` by blending with fresh noise: the upsampled latent (and the
/// base audio) play the data endpoint, exactly as in training interpolation.
pub fn sr_prepare(
    video_base: &LatentGrid,
    audio_base: &AudioLatent,
    cond: &Conditioning,
    cfg: &SRConfig,
    seed: u64,
) -> Result<SRState> {
    cfg.validate()?;
    let (t2, h2, w2) = cfg.scaled_dims(video_base.dims())?;
    let c = video_base.dims().3;
    let up = trilinear_resample(video_base, (t2, h2, w2))?;
    let video_noise = gaussian_noise(&[t2, h2, w2, c], derive_seed(seed, SR_VIDEO_NOISE_TAG));
    let (x_video, _) = flow_interpolate(up.tensor(), &video_noise, cfg.renoise_t)?;
    let audio_noise = gaussian_noise(
        &[audio_base.n_frames(), audio_base.channels()],
        derive_seed(seed, SR_AUDIO_NOISE_TAG),
    );
    let (a_aux, _) = flow_interpolate(audio_base.frames(), &audio_noise, cfg.renoise_t)?;
    Ok(SRState {
        x_video: LatentGrid::new(t2, h2, w2, c, x_video)?,
        a_aux: AudioLatent::new(a_aux)?,
        t_cur: cfg.renoise_t,
        cond: cond.clone(),
    })
}

/// Additive attention bias for a packed sequence: video-video pairs outside
/// the window (componentwise |Δcoord| > window) get −∞; every pair that
/// involves a non-video token stays open, so text, reference, and audio keep
/// global reach in both directions.
pub fn local_attention_bias(seq: &TokenSequence, window: (usize, usize, usize)) -> Tensor {
    let n = seq.len();
    let range = seq.block_range(ModalityTag::Video);
    let (wt, wy, wx) = (window.0 as i64, window.1 as i64, window.2 as i64);
    let mut bias = Tensor::zeros(&[n, n]);
    for i in range.clone() {
        let pi = seq.pos()[i];
        for j in range.clone() {
            let pj = seq.pos()[j];
            let open = (pi[0] - pj[0]).abs() <= wt
                && (pi[1] - pj[1]).abs() <= wy
                && (pi[2] - pj[2]).abs() <= wx;
            if !open {
                bias.data_mut()[i * n + j] = f32::NEG_INFINITY;
            }
        }
    }
    bias
}

/// Which layers run local attention. The bias itself is materialized later,
/// against the concrete sequence the refinement packs.
pub fn sr_attention_plan(cfg: &SRConfig, model_cfg: &ModelConfig) -> Result<AttnPlan> {
    let l = model_cfg.n_layers;
    let mut plan = AttnPlan::global(l);
    let Some(_) = cfg.window else {
        return Ok(plan);
    };
    match &cfg.local_layers {
        Some(layers) => {
            for &idx in layers {
                if idx >= l {
                    return Err(CoreError::Config(format!(
                        "local layer index {idx} out of range for {l} layers"
                    )));
                }
                plan.layers[idx] = LayerAttn::Local;
            }
        }
        None => {
            // default: all middle (shared) layers local, boundary layers global
            for idx in model_cfg.n_boundary..l - model_cfg.n_boundary {
                plan.layers[idx] = LayerAttn::Local;
            }
        }
    }
    Ok(plan)
}

/// Refinement loop against any velocity model: `n_steps` uniform Euler steps
/// from `t_cur` to 1, integrating only the video latent. The frozen `a_aux`
/// is handed to the model anew every step.
pub fn sr_refine_with(
    state: &SRState,
    model: &dyn VelocityModel,
    cfg: &SRConfig,
) -> Result<LatentGrid> {
    cfg.validate()?;
    let n = cfg.n_steps;
    let dt = (1.0 - state.t_cur) / n as f32;
    let mut video = state.x_video.clone();
    for step in 0..n {
        let (v_video, _v_audio) = model.velocity(&video, &state.a_aux, &state.cond)?;
        if v_video.dims() != video.dims() {
            return Err(CoreError::ShapeMismatch {
                op: "sr step",
                lhs: video.tensor().shape().to_vec(),
                rhs: v_video.tensor().shape().to_vec(),
            });
        }
        for (xi, &vi) in video.data_mut().iter_mut().zip(v_video.data()) {
            *xi += dt * vi;
        }
        if !video.tensor().is_finite() {
            return Err(CoreError::Divergence {
                stage: "sr".into(),
                step,
            });
        }
    }
    Ok(video)
}

/// The backbone wired for refinement: layer plan built, local bias (if any)
/// materialized against the packed layout at the refined resolution.
pub fn sr_model<'a>(
    state: &SRState,
    sr_params: &'a ModelParams,
    cfg: &SRConfig,
) -> Result<BackboneModel<'a>> {
    let mut plan = sr_attention_plan(cfg, &sr_params.cfg)?;
    if plan.has_local() {
        let layout = crate::sampler::pack_model_input(
            sr_params,
            &state.x_video,
            &state.a_aux,
            &state.cond,
        )?;
        let window = cfg.window.expect("local layers require a window");
        plan.local_bias = Some(local_attention_bias(&layout, window));
    }
    Ok(BackboneModel::with_plan(sr_params, plan))
}

/// Refinement under the dedicated checkpoint.
pub fn sr_refine(state: &SRState, sr_params: &ModelParams, cfg: &SRConfig) -> Result<LatentGrid> {
    sr_refine_with(state, &sr_model(state, sr_params, cfg)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_noise;
    use crate::sampler::ConstantVelocity;
    use crate::sequence::{pack_sequence, ModalityBlock};
    use std::cell::RefCell;

    fn random_grid(t: usize, h: usize, w: usize, c: usize, seed: u64) -> LatentGrid {
        LatentGrid::new(t, h, w, c, gaussian_noise(&[t, h, w, c], seed)).unwrap()
    }

    fn random_audio(frames: usize, ch: usize, seed: u64) -> AudioLatent {
        AudioLatent::new(gaussian_noise(&[frames, ch], seed)).unwrap()
    }

    fn sr_cfg(scale: (f64, f64, f64), renoise_t: f32) -> SRConfig {
        SRConfig {
            scale,
            renoise_t,
            ..SRConfig::default()
        }
    }

    #[test]
    fn prepare_at_unit_scale_is_the_interpolation_formula() {
        let base = random_grid(2, 2, 2, 3, 90);
        let audio = random_audio(3, 2, 91);
        let cfg = sr_cfg((1.0, 1.0, 1.0), 0.5);
        let seed = 92;
        let state = sr_prepare(&base, &audio, &Conditioning::unconditional(), &cfg, seed).unwrap();
        // hand oracle: x = 0.5·base + 0.5·noise with the documented stream
        let noise = gaussian_noise(&[2, 2, 2, 3], derive_seed(seed, SR_VIDEO_NOISE_TAG));
        for i in 0..base.data().len() {
            let want = 0.5 * base.data()[i] + 0.5 * noise.data()[i];
            assert!(
                (state.x_video.data()[i] - want).abs() < 1e-7,
                "elem {i}: {} vs {want}",
                state.x_video.data()[i]
            );
        }
        let a_noise = gaussian_noise(&[3, 2], derive_seed(seed, SR_AUDIO_NOISE_TAG));
        for i in 0..audio.frames().len() {
            let want = 0.5 * audio.frames().data()[i] + 0.5 * a_noise.data()[i];
            assert!((state.a_aux().frames().data()[i] - want).abs() < 1e-7);
        }
        assert_eq!(state.t_cur, 0.5);
    }

    #[test]
    fn renoise_near_one_recovers_the_upsampled_latent() {
        let base = random_grid(2, 3, 3, 2, 93);
        let audio = random_audio(2, 2, 94);
        // largest f32 renoise level strictly below 1
        let rt = 1.0 - 1e-6;
        let cfg = sr_cfg((1.0, 2.0, 2.0), rt);
        let state = sr_prepare(&base, &audio, &Conditioning::unconditional(), &cfg, 95).unwrap();
        let up = trilinear_resample(&base, (2, 6, 6)).unwrap();
        let noise_scale = gaussian_noise(&[2, 6, 6, 2], derive_seed(95, SR_VIDEO_NOISE_TAG))
            .max_abs();
        let mut worst = 0.0f32;
        for (got, want) in state.x_video.data().iter().zip(up.data()) {
            worst = worst.max((got - want).abs());
        }
        // residual noise share is (1 - rt); allow f32 rounding on top
        let tol = 2e-6 * (noise_scale + up.tensor().max_abs() + 1.0);
        assert!(worst < tol, "max deviation {worst} vs tolerance {tol}");
    }

    #[test]
    fn fractional_target_extent_is_a_config_error() {
        let base = random_grid(3, 2, 2, 1, 96);
        let audio = random_audio(2, 1, 97);
        let cfg = sr_cfg((1.5, 1.0, 1.0), 0.5);
        let err = sr_prepare(&base, &audio, &Conditioning::unconditional(), &cfg, 98).unwrap_err();
        assert!(matches!(err, CoreError::Config(ref m) if m.contains("non-integral")), "{err}");
        // 2 * 1.5 = 3 is fine
        let base = random_grid(2, 2, 2, 1, 99);
        assert!(sr_prepare(&base, &audio, &Conditioning::unconditional(), &cfg, 98).is_ok());
    }

    #[test]
    fn prepare_is_deterministic_in_seed() {
        let base = random_grid(2, 2, 2, 2, 100);
        let audio = random_audio(2, 2, 101);
        let cfg = SRConfig::default();
        let a = sr_prepare(&base, &audio, &Conditioning::unconditional(), &cfg, 5).unwrap();
        let b = sr_prepare(&base, &audio, &Conditioning::unconditional(), &cfg, 5).unwrap();
        assert_eq!(a.x_video.data(), b.x_video.data());
        assert_eq!(a.a_aux().frames().data(), b.a_aux().frames().data());
        let c = sr_prepare(&base, &audio, &Conditioning::unconditional(), &cfg, 6).unwrap();
        assert_ne!(a.x_video.data(), c.x_video.data());
    }

    #[test]
    fn invalid_renoise_values_are_rejected() {
        for bad in [0.0f32, 1.0, -0.5, 1.5] {
            let cfg = sr_cfg((1.0, 1.0, 1.0), bad);
            assert!(cfg.validate().is_err(), "renoise_t {bad} accepted");
        }
    }

    /// Records the audio frames handed to every evaluation.
    struct AudioRecorder {
        inner: ConstantVelocity,
        seen: RefCell<Vec<Vec<f32>>>,
    }

    impl VelocityModel for AudioRecorder {
        fn velocity(
            &self,
            video: &LatentGrid,
            audio: &AudioLatent,
            cond: &Conditioning,
        ) -> Result<(LatentGrid, AudioLatent)> {
            self.seen.borrow_mut().push(audio.frames().data().to_vec());
            self.inner.velocity(video, audio, cond)
        }
    }

    #[test]
    fn audio_is_frozen_and_repacked_identically_every_step() {
        let base = random_grid(2, 2, 2, 2, 102);
        let audio = random_audio(3, 2, 103);
        let cfg = sr_cfg((1.0, 1.0, 1.0), 0.5);
        let state = sr_prepare(&base, &audio, &Conditioning::unconditional(), &cfg, 104).unwrap();
        let before = state.a_aux().frames().data().to_vec();
        let recorder = AudioRecorder {
            inner: ConstantVelocity {
                video: random_grid(2, 2, 2, 2, 105),
                audio: random_audio(3, 2, 106),
            },
            seen: RefCell::new(Vec::new()),
        };
        sr_refine_with(&state, &recorder, &cfg).unwrap();
        let seen = recorder.seen.borrow();
        assert_eq!(seen.len(), cfg.n_steps);
        for step_audio in seen.iter() {
            assert_eq!(step_audio.as_slice(), before.as_slice(), "audio drifted");
        }
        assert_eq!(state.a_aux().frames().data(), before.as_slice());
    }

    #[test]
    fn constant_stub_refines_to_prepared_plus_remaining_time() {
        let base = random_grid(2, 2, 2, 2, 107);
        let audio = random_audio(2, 2, 108);
        let rt = 0.25f32;
        let cfg = sr_cfg((1.0, 1.0, 1.0), rt);
        let state = sr_prepare(&base, &audio, &Conditioning::unconditional(), &cfg, 109).unwrap();
        let c_field = random_grid(2, 2, 2, 2, 110);
        let stub = ConstantVelocity {
            video: c_field.clone(),
            audio: random_audio(2, 2, 111),
        };
        let refined = sr_refine_with(&state, &stub, &cfg).unwrap();
        for i in 0..refined.data().len() {
            let want = state.x_video.data()[i] + (1.0 - rt) * c_field.data()[i];
            assert!(
                (refined.data()[i] - want).abs() < 1e-6,
                "elem {i}: {} vs {want}",
                refined.data()[i]
            );
        }
    }

    #[test]
    fn refinement_costs_exactly_n_steps_evaluations() {
        let base = random_grid(2, 2, 2, 2, 112);
        let audio = random_audio(2, 2, 113);
        let cfg = SRConfig {
            scale: (1.0, 1.0, 1.0),
            ..SRConfig::default()
        };
        assert_eq!(cfg.n_steps, 5);
        let state = sr_prepare(&base, &audio, &Conditioning::unconditional(), &cfg, 114).unwrap();
        let stub = ConstantVelocity {
            video: random_grid(2, 2, 2, 2, 115),
            audio: random_audio(2, 2, 116),
        };
        let counter = crate::sampler::CountingModel::new(&stub);
        sr_refine_with(&state, &counter, &cfg).unwrap();
        assert_eq!(counter.calls(), 5);
    }

    fn video_seq(coords: Vec<[i64; 3]>, d: usize) -> TokenSequence {
        let n = coords.len();
        let video = ModalityBlock::new(ModalityTag::Video, gaussian_noise(&[n, d], 1), coords);
        pack_sequence(
            &ModalityBlock::empty(ModalityTag::Text, d),
            &ModalityBlock::empty(ModalityTag::RefImage, d),
            &video,
            &ModalityBlock::empty(ModalityTag::Audio, d),
        )
        .unwrap()
    }

    fn mixed_seq_with_grid(grid_coords: Vec<[i64; 3]>, d: usize) -> TokenSequence {
        let text = ModalityBlock::new(
            ModalityTag::Text,
            gaussian_noise(&[2, d], 2),
            vec![[0, 0, 0], [1, 0, 0]],
        );
        let n = grid_coords.len();
        let video = ModalityBlock::new(ModalityTag::Video, gaussian_noise(&[n, d], 3), grid_coords);
        let audio = ModalityBlock::new(
            ModalityTag::Audio,
            gaussian_noise(&[2, d], 4),
            vec![[0, 0, 0], [1, 0, 0]],
        );
        pack_sequence(
            &text,
            &ModalityBlock::empty(ModalityTag::RefImage, d),
            &video,
            &audio,
        )
        .unwrap()
    }

    fn grid_coords(t: usize, h: usize, w: usize) -> Vec<[i64; 3]> {
        let mut coords = Vec::new();
        for ti in 0..t {
            for yi in 0..h {
                for xi in 0..w {
                    coords.push([ti as i64, yi as i64, xi as i64]);
                }
            }
        }
        coords
    }

    #[test]
    fn window_covering_the_grid_gives_an_all_zero_mask() {
        let seq = mixed_seq_with_grid(grid_coords(2, 2, 2), 4);
        let bias = local_attention_bias(&seq, (2, 2, 2));
        assert!(bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_window_leaves_only_self_attention_among_video() {
        let seq = mixed_seq_with_grid(grid_coords(2, 1, 2), 4);
        let bias = local_attention_bias(&seq, (0, 0, 0));
        let range = seq.block_range(ModalityTag::Video);
        let n = seq.len();
        for i in 0..n {
            for j in 0..n {
                let v = bias.data()[i * n + j];
                let both_video = range.contains(&i) && range.contains(&j);
                if both_video && i != j {
                    assert_eq!(v, f32::NEG_INFINITY, "pair ({i},{j}) should be closed");
                } else {
                    assert_eq!(v, 0.0, "pair ({i},{j}) should be open");
                }
            }
        }
    }

    #[test]
    fn window_mask_matches_brute_force_coordinate_oracle() {
        let coords = grid_coords(3, 3, 1);
        let seq = video_seq(coords.clone(), 4);
        let window = (1usize, 1usize, 0usize);
        let bias = local_attention_bias(&seq, window);
        let n = coords.len();
        for i in 0..n {
            for j in 0..n {
                let dt = (coords[i][0] - coords[j][0]).abs();
                let dy = (coords[i][1] - coords[j][1]).abs();
                let dx = (coords[i][2] - coords[j][2]).abs();
                let open = dt <= 1 && dy <= 1 && dx <= 0;
                let got = bias.data()[i * n + j];
                assert_eq!(
                    got == 0.0,
                    open,
                    "pair {:?} vs {:?}: bias {got}",
                    coords[i],
                    coords[j]
                );
            }
        }
    }

    #[test]
    fn mask_is_symmetric_over_video_tokens() {
        let seq = mixed_seq_with_grid(grid_coords(3, 2, 2), 4);
        let bias = local_attention_bias(&seq, (1, 0, 1));
        let n = seq.len();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(bias.data()[i * n + j], bias.data()[j * n + i]);
            }
        }
    }

    #[test]
    fn default_plan_marks_exactly_the_middle_layers_local() {
        let model_cfg = ModelConfig::toy();
        let plan = sr_attention_plan(&SRConfig::default(), &model_cfg).unwrap();
        assert_eq!(plan.len(), model_cfg.n_layers);
        for (l, choice) in plan.layers.iter().enumerate() {
            let middle = l >= model_cfg.n_boundary && l < model_cfg.n_layers - model_cfg.n_boundary;
            assert_eq!(*choice == LayerAttn::Local, middle, "layer {l}");
        }
    }

    #[test]
    fn empty_layer_set_and_no_window_both_mean_all_global() {
        let model_cfg = ModelConfig::toy();
        let cfg = SRConfig {
            local_layers: Some(vec![]),
            ..SRConfig::default()
        };
        let plan = sr_attention_plan(&cfg, &model_cfg).unwrap();
        assert!(!plan.has_local());
        let cfg = SRConfig {
            window: None,
            ..SRConfig::default()
        };
        let plan = sr_attention_plan(&cfg, &model_cfg).unwrap();
        assert!(!plan.has_local());
    }

    #[test]
    fn out_of_range_layer_index_is_a_config_error() {
        let model_cfg = ModelConfig::toy();
        let cfg = SRConfig {
            local_layers: Some(vec![0, model_cfg.n_layers]),
            ..SRConfig::default()
        };
        assert!(matches!(
            sr_attention_plan(&cfg, &model_cfg).unwrap_err(),
            CoreError::Config(_)
        ));
    }

    #[test]
    fn wide_window_refinement_equals_all_global_run() {
        let model_cfg = ModelConfig::tiny();
        let params = ModelParams::init(model_cfg, 117).unwrap();
        let base = random_grid(2, 4, 4, params.cfg.video_channels, 118);
        let audio = random_audio(2, params.cfg.audio_channels, 119);
        let cond = Conditioning::text(vec![1, 2]);
        let mk = |window| SRConfig {
            scale: (1.0, 1.0, 1.0),
            renoise_t: 0.5,
            n_steps: 3,
            window,
            local_layers: None,
        };
        // window at least the token-grid extents (2 x 2 x 2 after (1,2,2) patches)
        let local_cfg = mk(Some((2, 2, 2)));
        let global_cfg = mk(None);
        let state = sr_prepare(&base, &audio, &cond, &local_cfg, 120).unwrap();
        let local = sr_refine(&state, &params, &local_cfg).unwrap();
        let global = sr_refine(&state, &params, &global_cfg).unwrap();
        let mut worst = 0.0f32;
        for (a, b) in local.data().iter().zip(global.data()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 1e-5, "wide-window run deviates by {worst}");
    }

    #[test]
    fn tight_window_actually_changes_the_output() {
        let model_cfg = ModelConfig::tiny();
        let params = ModelParams::init(model_cfg, 121).unwrap();
        let base = random_grid(2, 4, 4, params.cfg.video_channels, 122);
        let audio = random_audio(2, params.cfg.audio_channels, 123);
        let cond = Conditioning::unconditional();
        let mk = |window| SRConfig {
            scale: (1.0, 1.0, 1.0),
            renoise_t: 0.5,
            n_steps: 2,
            window,
            local_layers: None,
        };
        let tight = mk(Some((0, 0, 0)));
        let state = sr_prepare(&base, &audio, &cond, &tight, 124).unwrap();
        let local = sr_refine(&state, &params, &tight).unwrap();
        let global = sr_refine(&state, &params, &mk(None)).unwrap();
        let mut worst = 0.0f32;
        for (a, b) in local.data().iter().zip(global.data()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst > 1e-6, "local window had no effect ({worst})");
    }
}
