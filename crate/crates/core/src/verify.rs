//! Built-in verification battery behind the `check` command. Each item
//! exercises one structural contract end to end — autodiff against finite
//! differences, local attention degenerating to global, trilinear linear
//! precision, the parameter census, and the frozen SR audio — and reports
//! pass/fail with a one-line detail.

use std::cell::RefCell;

use crate::backbone::{param_census, ModelConfig, ModelParams};
use crate::error::Result;
use crate::sampler::{Conditioning, SamplerConfig, VelocityModel};
use crate::sequence::AudioLatent;
use crate::superres::{sr_prepare, sr_refine, sr_refine_with, sr_model, SRConfig};
use crate::tape::Tape;
use crate::tensor::{trilinear_resample, LatentGrid, Tensor};
use crate::train::{compute_flow_loss, flow_loss_on_tape, lift_params};

#[derive(Debug, Clone)]
pub struct CheckItem {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Run every check. The census inspects the supplied configuration; the
/// numeric items run on a small fixed model so the battery stays fast.
pub fn run_checks(model_cfg: &ModelConfig, seed: u64) -> Vec<CheckItem> {
    vec![
        item("gradient-check", gradient_check(seed)),
        item("local-global-window", local_global_check(seed)),
        item("trilinear-oracle", trilinear_check()),
        item("param-census", census_check(model_cfg)),
        item("frozen-sr-audio", frozen_audio_check(seed)),
    ]
}

pub fn all_passed(items: &[CheckItem]) -> bool {
    items.iter().all(|i| i.passed)
}

fn item(name: &'static str, res: Result<(bool, String)>) -> CheckItem {
    match res {
        Ok((passed, detail)) => CheckItem {
            name,
            passed,
            detail,
        },
        Err(e) => CheckItem {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn small_inputs(cfg: &ModelConfig, seed: u64) -> (LatentGrid, AudioLatent, Conditioning) {
    let video = LatentGrid::new(
        2,
        2,
        2,
        cfg.video_channels,
        crate::rng::gaussian_noise(&[2, 2, 2, cfg.video_channels], seed),
    )
    .expect("video shape");
    let audio = AudioLatent::new(crate::rng::gaussian_noise(&[2, cfg.audio_channels], seed + 1))
        .expect("audio shape");
    (video, audio, Conditioning::text(vec![1, 2]))
}

/// Tape gradients against central finite differences on a strided subset of
/// parameters. Each probe takes the best agreement across several step
/// sizes: tiny steps drown in f32 forward rounding, large ones in curvature,
/// but a genuinely wrong gradient fails at every step size.
fn gradient_check(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(cfg.clone(), seed)?;
    let (video, audio, cond) = small_inputs(&cfg, seed + 10);
    let sample = crate::sampler::make_training_batch(
        &video,
        &audio,
        &cond,
        &SamplerConfig::base(),
        seed + 20,
    )?;
    let mut tape = Tape::new();
    let vp = lift_params(&mut tape, &params);
    let loss = flow_loss_on_tape(&mut tape, &vp, &params, &sample)?;
    let grads = tape.backward(loss);

    let mut worst = 0.0f64;
    let mut probed = 0usize;
    for (ai, leaf) in vp.leaves.iter().enumerate() {
        let zero;
        let analytic = match grads.get(*leaf) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(tape.val(*leaf).shape());
                &zero
            }
        };
        let len = analytic.len();
        let idxs = if len > 1 { vec![0, len / 2] } else { vec![0] };
        for j in idxs {
            let a = analytic.data()[j] as f64;
            let mut best = f64::MAX;
            for h in [1e-3f32, 3e-3, 1e-2] {
                let fd = fd_probe(&params, &sample, ai, j, h)?;
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                best = best.min(rel);
            }
            worst = worst.max(best);
            probed += 1;
        }
    }
    Ok((
        worst < 1e-2,
        format!("{probed} params probed, worst rel err {worst:.2e}"),
    ))
}

fn fd_probe(
    params: &ModelParams,
    sample: &crate::sampler::FlowBatch,
    array_idx: usize,
    elem: usize,
    h: f32,
) -> Result<f64> {
    let mut plus = params.clone();
    plus.arrays_mut()[array_idx].1.data_mut()[elem] += h;
    let mut minus = params.clone();
    minus.arrays_mut()[array_idx].1.data_mut()[elem] -= h;
    let lp = compute_flow_loss(&plus, sample)?;
    let lm = compute_flow_loss(&minus, sample)?;
    Ok((lp - lm) / (2.0 * h as f64))
}

/// A local window at least as large as the token grid must reproduce the
/// all-global refinement exactly (up to accumulation order).
fn local_global_check(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(cfg.clone(), seed + 30)?;
    let video = LatentGrid::new(
        2,
        4,
        4,
        cfg.video_channels,
        crate::rng::gaussian_noise(&[2, 4, 4, cfg.video_channels], seed + 31),
    )?;
    let audio = AudioLatent::new(crate::rng::gaussian_noise(&[2, cfg.audio_channels], seed + 32))?;
    let cond = Conditioning::text(vec![1]);
    let mk = |window| SRConfig {
        scale: (1.0, 1.0, 1.0),
        renoise_t: 0.5,
        n_steps: 2,
        window,
        local_layers: None,
    };
    // token grid is 2x2x2 under a (1,2,2) patch
    let local_cfg = mk(Some((2, 2, 2)));
    let state = sr_prepare(&video, &audio, &cond, &local_cfg, seed + 33)?;
    let local = sr_refine(&state, &params, &local_cfg)?;
    let global = sr_refine(&state, &params, &mk(None))?;
    let mut diff = 0.0f32;
    for (a, b) in local.data().iter().zip(global.data()) {
        diff = diff.max((a - b).abs());
    }
    Ok((diff < 1e-5, format!("max |local - global| = {diff:.2e}")))
}

/// Trilinear interpolation reproduces any per-channel affine function of the
/// grid coordinates exactly, at every target size.
fn trilinear_check() -> Result<(bool, String)> {
    let (t, h, w, c) = (2usize, 3, 4, 2);
    let affine = |ti: f64, yi: f64, xi: f64, ci: usize| {
        0.3 * ti + 0.5 * yi - 0.2 * xi + 0.7 * ci as f64 + 0.11
    };
    let mut data = Vec::with_capacity(t * h * w * c);
    for ti in 0..t {
        for yi in 0..h {
            for xi in 0..w {
                for ci in 0..c {
                    data.push(affine(ti as f64, yi as f64, xi as f64, ci) as f32);
                }
            }
        }
    }
    let src = LatentGrid::new(t, h, w, c, Tensor::from_vec(&[t, h, w, c], data)?)?;
    let (t2, h2, w2) = (3usize, 5, 7);
    let up = trilinear_resample(&src, (t2, h2, w2))?;
    let ratio = |dst: usize, nd: usize, ns: usize| {
        if nd == 1 {
            0.0
        } else {
            dst as f64 * (ns - 1) as f64 / (nd - 1) as f64
        }
    };
    let mut worst = 0.0f32;
    for ti in 0..t2 {
        for yi in 0..h2 {
            for xi in 0..w2 {
                for ci in 0..c {
                    let want = affine(
                        ratio(ti, t2, t),
                        ratio(yi, h2, h),
                        ratio(xi, w2, w),
                        ci,
                    ) as f32;
                    let got = up.data()[((ti * h2 + yi) * w2 + xi) * c + ci];
                    worst = worst.max((got - want).abs());
                }
            }
        }
    }
    Ok((worst < 1e-5, format!("max affine-field error {worst:.2e}")))
}

/// The sandwich structure: boundary layer count, shared-middle count, and
/// the census total agreeing with a raw walk over every array.
fn census_check(cfg: &ModelConfig) -> Result<(bool, String)> {
    let params = ModelParams::init(cfg.clone(), 1)?;
    let census = param_census(&params);
    let arrays_total: usize = params.arrays().iter().map(|(_, t)| t.len()).sum();
    let l = cfg.n_layers;
    let b = cfg.n_boundary;
    let ok = census.boundary_layers == 2 * b
        && census.shared_middle_layers == l - 2 * b
        && census.total() == arrays_total;
    Ok((
        ok,
        format!(
            "{l} layers: {} boundary, {} shared-middle; {} params",
            census.boundary_layers,
            census.shared_middle_layers,
            census.total()
        ),
    ))
}

struct AudioProbe<'a> {
    inner: &'a dyn VelocityModel,
    seen: RefCell<Vec<Vec<f32>>>,
}

impl VelocityModel for AudioProbe<'_> {
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

/// Every refinement step must hand the model the same audio bytes the
/// preparation produced.
fn frozen_audio_check(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(cfg.clone(), seed + 40)?;
    let (video, audio, cond) = small_inputs(&cfg, seed + 41);
    let sr_cfg = SRConfig {
        scale: (1.0, 1.0, 1.0),
        renoise_t: 0.5,
        n_steps: 3,
        window: None,
        local_layers: None,
    };
    let state = sr_prepare(&video, &audio, &cond, &sr_cfg, seed + 42)?;
    let model = sr_model(&state, &params, &sr_cfg)?;
    let probe = AudioProbe {
        inner: &model,
        seen: RefCell::new(Vec::new()),
    };
    sr_refine_with(&state, &probe, &sr_cfg)?;
    let seen = probe.seen.borrow();
    let frozen = seen.len() == sr_cfg.n_steps
        && seen
            .iter()
            .all(|s| s.as_slice() == state.a_aux().frames().data());
    Ok((
        frozen,
        format!("audio bitwise-identical across {} evaluations", seen.len()),
    ))
}
