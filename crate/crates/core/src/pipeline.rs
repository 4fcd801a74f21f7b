//! Staged generation: distilled base sampling, optional latent
//! super-resolution, and a learned linear pixel decode, with per-stage
//! wall-clock timing and a text report table. The base stage never depends
//! on the output resolution — only the refinement stage sees the upsampled
//! grid.

use std::time::Instant;

use crate::backbone::ModelParams;
use crate::error::{CoreError, Result};
use crate::sampler::{
    euler_sample, init_noise, BackboneModel, Conditioning, CountingModel, SamplerConfig,
};
use crate::sequence::{grid_from_patch_matrix, patch_matrix, Affine, AudioLatent};
use crate::superres::{sr_model, sr_prepare, sr_refine_with, SRConfig};
use crate::tensor::LatentGrid;
use crate::toyset::PIXEL_FACTORS;

/// Wall-clock and cost breakdown for one generation run. Stage seconds are
/// measured around the stage bodies alone; checkpoint loading never counts.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    /// Output pixel height, e.g. "64p".
    pub resolution: String,
    pub base_s: f64,
    /// Absent exactly when the SR stage was skipped.
    pub sr_s: Option<f64>,
    pub decode_s: f64,
    pub total_s: f64,
    pub base_steps: usize,
    pub sr_steps: Option<usize>,
    pub base_evals: usize,
    pub sr_evals: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub sampler: SamplerConfig,
    /// `None` skips the refinement stage entirely.
    pub sr: Option<SRConfig>,
    /// Base video latent extents (time, height, width); channels come from
    /// the model.
    pub latent_frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub audio_frames: usize,
    pub seed: u64,
}

impl PipelineConfig {
    /// Distilled base pass over the toy task's latent geometry, no SR.
    pub fn toy(seed: u64) -> Self {
        Self {
            sampler: SamplerConfig::distilled(),
            sr: None,
            latent_frames: 4,
            latent_height: 4,
            latent_width: 4,
            audio_frames: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if let Some(sr) = &self.sr {
            sr.validate()?;
        }
        if self.latent_frames == 0
            || self.latent_height == 0
            || self.latent_width == 0
            || self.audio_frames == 0
        {
            return Err(CoreError::Config(
                "latent extents and audio frames must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Loaded weights for the stages; the SR checkpoint is its own model.
pub struct PipelineModels<'a> {
    pub base: &'a ModelParams,
    pub sr: Option<&'a ModelParams>,
    pub decoder: &'a Affine,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub pixels: LatentGrid,
    pub audio: AudioLatent,
    /// Final video latent (refined when SR ran).
    pub video_latent: LatentGrid,
    /// What the base stage produced, before any refinement.
    pub base_latent: LatentGrid,
    pub report: StageReport,
}

/// Run base → (SR) → decode. Stage seconds come from a monotonic clock;
/// numeric outputs depend only on the seed, prompt, and weights.
pub fn run_pipeline(
    models: &PipelineModels,
    cfg: &PipelineConfig,
    prompt: &[usize],
    ref_image: Option<&LatentGrid>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    if cfg.sr.is_some() && models.sr.is_none() {
        return Err(CoreError::Config(
            "SR stage enabled but no SR weights supplied".into(),
        ));
    }
    let mut cond = Conditioning::text(prompt.to_vec());
    cond.ref_image = ref_image.cloned();
    let dims = (
        cfg.latent_frames,
        cfg.latent_height,
        cfg.latent_width,
        models.base.cfg.video_channels,
    );
    let (noise_video, noise_audio) = init_noise(
        dims,
        cfg.audio_frames,
        models.base.cfg.audio_channels,
        cfg.seed,
    )?;

    let t_start = Instant::now();
    let base_model = BackboneModel::new(models.base);
    let counter = CountingModel::new(&base_model);
    let t0 = Instant::now();
    let (base_latent, audio) = euler_sample(&counter, &cond, noise_video, noise_audio, &cfg.sampler)?;
    let base_s = t0.elapsed().as_secs_f64();
    let base_evals = counter.calls();

    let (video_latent, sr_s, sr_evals) = match &cfg.sr {
        Some(sr_cfg) => {
            let sr_params = models.sr.expect("checked above");
            let t1 = Instant::now();
            let state = sr_prepare(&base_latent, &audio, &cond, sr_cfg, cfg.seed)?;
            let model = sr_model(&state, sr_params, sr_cfg)?;
            let sr_counter = CountingModel::new(&model);
            let refined = sr_refine_with(&state, &sr_counter, sr_cfg)?;
            (refined, Some(t1.elapsed().as_secs_f64()), Some(sr_counter.calls()))
        }
        None => (base_latent.clone(), None, None),
    };

    let t2 = Instant::now();
    let pixels = decode_latent(&video_latent, models.decoder)?;
    let decode_s = t2.elapsed().as_secs_f64();
    let total_s = t_start.elapsed().as_secs_f64();

    let report = StageReport {
        resolution: format!("{}p", pixels.dims().1),
        base_s,
        sr_s,
        decode_s,
        total_s,
        base_steps: cfg.sampler.n_steps,
        sr_steps: cfg.sr.as_ref().map(|c| c.n_steps),
        base_evals,
        sr_evals,
    };
    Ok(PipelineOutput {
        pixels,
        audio,
        video_latent,
        base_latent,
        report,
    })
}

/// Learned linear unpatchify: every latent cell becomes a pixel block of
/// `PIXEL_FACTORS` extent with 3 channels, clamped to [0,1] for display.
pub fn decode_latent(video: &LatentGrid, dec: &Affine) -> Result<LatentGrid> {
    let (t, h, w, _) = video.dims();
    let (cells, coords) = patch_matrix(video, (1, 1, 1))?;
    let blocks = dec.apply(&cells)?;
    let (pt, ph, pw) = PIXEL_FACTORS;
    let dims = (t * pt, h * ph, w * pw, 3);
    let grid = grid_from_patch_matrix(&blocks, &coords, PIXEL_FACTORS, dims)?;
    let clamped = grid.into_tensor().map(|v| v.clamp(0.0, 1.0));
    LatentGrid::new(dims.0, dims.1, dims.2, 3, clamped)
}

/// Render run reports as the five-column table, one row per run, followed by
/// one step/evaluation summary line per row. Seconds are shown with one
/// decimal; a skipped SR stage renders "--"; the Total column is the sum of
/// the rounded stage columns that are present.
pub fn format_report(reports: &[StageReport]) -> String {
    let mut out = String::new();
    out.push_str("Resolution |  Base |    SR | Decode | Total\n");
    for r in reports {
        let base = round1(r.base_s);
        let sr = r.sr_s.map(round1);
        let decode = round1(r.decode_s);
        let total = base + sr.unwrap_or(0.0) + decode;
        out.push_str(&format!(
            "{:>10} | {:>5} | {:>5} | {:>6} | {:>5}\n",
            r.resolution,
            format!("{base:.1}"),
            sr.map_or("--".to_string(), |s| format!("{s:.1}")),
            format!("{decode:.1}"),
            format!("{total:.1}"),
        ));
    }
    for r in reports {
        let (sr_steps, sr_evals) = match (r.sr_steps, r.sr_evals) {
            (Some(s), Some(e)) => (s.to_string(), e.to_string()),
            _ => ("--".to_string(), "--".to_string()),
        };
        out.push_str(&format!(
            "{}: base {} steps / {} evals; sr {} steps / {} evals\n",
            r.resolution, r.base_steps, r.base_evals, sr_steps, sr_evals,
        ));
    }
    out
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Debug)]
pub struct BenchResult {
    /// Per-stage medians over the kept runs; counts from the first run.
    pub aggregated: StageReport,
    pub runs: Vec<StageReport>,
}

/// Repeat one pipeline run and aggregate stage times as medians. With more
/// than one run requested, an extra leading run is executed and discarded as
/// warm-up.
pub fn bench(
    models: &PipelineModels,
    cfg: &PipelineConfig,
    prompt: &[usize],
    n_runs: usize,
) -> Result<BenchResult> {
    if n_runs == 0 {
        return Err(CoreError::Config("bench needs at least one run".into()));
    }
    if n_runs > 1 {
        run_pipeline(models, cfg, prompt, None)?;
    }
    let mut runs = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        runs.push(run_pipeline(models, cfg, prompt, None)?.report);
    }
    let base_s = median(runs.iter().map(|r| r.base_s));
    let sr_s = runs[0]
        .sr_s
        .map(|_| median(runs.iter().map(|r| r.sr_s.expect("uniform sr presence"))));
    let decode_s = median(runs.iter().map(|r| r.decode_s));
    let aggregated = StageReport {
        resolution: runs[0].resolution.clone(),
        base_s,
        sr_s,
        decode_s,
        total_s: base_s + sr_s.unwrap_or(0.0) + decode_s,
        base_steps: runs[0].base_steps,
        sr_steps: runs[0].sr_steps,
        base_evals: runs[0].base_evals,
        sr_evals: runs[0].sr_evals,
    };
    Ok(BenchResult { aggregated, runs })
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::rng::gaussian_noise;
    use crate::tensor::Tensor;
    use crate::toyset::{
        codec_mse_bound, default_codec, encode_clip, toy_clips, PixelCodec, LATENT_CHANNELS,
    };
    use std::sync::OnceLock;

    fn shared_codec() -> &'static PixelCodec {
        static CODEC: OnceLock<PixelCodec> = OnceLock::new();
        CODEC.get_or_init(|| default_codec(1).expect("codec training"))
    }

    fn toy_models(codec: &PixelCodec) -> (ModelParams, ModelParams) {
        let base = ModelParams::init(ModelConfig::toy(), 21).unwrap();
        let sr = ModelParams::init(ModelConfig::toy(), 22).unwrap();
        let _ = codec;
        (base, sr)
    }

    fn zero_decoder(bias: f32) -> Affine {
        let d = crate::toyset::block_dim();
        Affine::new(
            Tensor::zeros(&[LATENT_CHANNELS, d]),
            Tensor::full(&[d], bias),
        )
    }

    #[test]
    fn zero_decoder_gives_clamp_floor_and_bias_gives_gray() {
        let latent = LatentGrid::new(2, 1, 3, LATENT_CHANNELS, gaussian_noise(&[2, 1, 3, 8], 30))
            .unwrap();
        let black = decode_latent(&latent, &zero_decoder(0.0)).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
        let gray = decode_latent(&latent, &zero_decoder(0.5)).unwrap();
        assert!(gray.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decoded_shape_follows_the_pixel_factors() {
        let latent = LatentGrid::new(2, 1, 3, LATENT_CHANNELS, gaussian_noise(&[2, 1, 3, 8], 31))
            .unwrap();
        let px = decode_latent(&latent, &zero_decoder(0.5)).unwrap();
        assert_eq!(px.dims(), (8, 8, 24, 3));
    }

    #[test]
    fn decode_clamps_into_the_unit_interval() {
        let d = crate::toyset::block_dim();
        let dec = Affine::new(
            gaussian_noise(&[LATENT_CHANNELS, d], 32).scale(5.0),
            Tensor::zeros(&[d]),
        );
        let latent = LatentGrid::new(1, 2, 2, LATENT_CHANNELS, gaussian_noise(&[1, 2, 2, 8], 33))
            .unwrap();
        let px = decode_latent(&latent, &dec).unwrap();
        assert!(px.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(px.data().contains(&0.0) && px.data().contains(&1.0));
    }

    #[test]
    fn codec_round_trip_through_decode_stays_below_the_bound() {
        let codec = shared_codec();
        let clip = &toy_clips()[5];
        let latent = encode_clip(codec, &clip.pixels).unwrap();
        let recon = decode_latent(&latent, &codec.dec).unwrap();
        let mut sum = 0.0f64;
        for (a, b) in recon.data().iter().zip(clip.pixels.data()) {
            sum += ((a - b) as f64).powi(2);
        }
        let mse = sum / recon.data().len() as f64;
        assert!(mse < codec_mse_bound(), "decode round trip mse {mse}");
    }

    #[test]
    fn report_is_additive_and_sr_column_tracks_the_stage() {
        let codec = shared_codec();
        let (base, sr) = toy_models(codec);
        let models = PipelineModels {
            base: &base,
            sr: Some(&sr),
            decoder: &codec.dec,
        };
        let off = run_pipeline(&models, &PipelineConfig::toy(3), &[0, 4, 6], None).unwrap();
        assert!(off.report.sr_s.is_none());
        assert!(off.report.sr_evals.is_none());
        let sum = off.report.base_s + off.report.decode_s;
        assert!((off.report.total_s - sum).abs() < 2e-3);

        let cfg_sr = PipelineConfig {
            sr: Some(SRConfig::default()),
            ..PipelineConfig::toy(3)
        };
        let on = run_pipeline(&models, &cfg_sr, &[0, 4, 6], None).unwrap();
        let sr_s = on.report.sr_s.expect("sr ran");
        let sum = on.report.base_s + sr_s + on.report.decode_s;
        assert!((on.report.total_s - sum).abs() < 2e-3);
        assert_eq!(on.pixels.dims(), (16, 64, 64, 3));
        assert_eq!(on.report.resolution, "64p");
    }

    #[test]
    fn distilled_run_reports_eight_base_and_five_sr_evaluations() {
        let codec = shared_codec();
        let (base, sr) = toy_models(codec);
        let models = PipelineModels {
            base: &base,
            sr: Some(&sr),
            decoder: &codec.dec,
        };
        let cfg = PipelineConfig {
            sr: Some(SRConfig::default()),
            ..PipelineConfig::toy(4)
        };
        let out = run_pipeline(&models, &cfg, &[1, 5, 7], None).unwrap();
        assert_eq!(out.report.base_steps, 8);
        assert_eq!(out.report.base_evals, 8);
        assert_eq!(out.report.sr_steps, Some(5));
        assert_eq!(out.report.sr_evals, Some(5));
    }

    #[test]
    fn same_seed_reproduces_every_numeric_output() {
        let codec = shared_codec();
        let (base, sr) = toy_models(codec);
        let models = PipelineModels {
            base: &base,
            sr: Some(&sr),
            decoder: &codec.dec,
        };
        let cfg = PipelineConfig {
            sr: Some(SRConfig::default()),
            ..PipelineConfig::toy(9)
        };
        let a = run_pipeline(&models, &cfg, &[2, 4, 8], None).unwrap();
        let b = run_pipeline(&models, &cfg, &[2, 4, 8], None).unwrap();
        assert_eq!(a.pixels.data(), b.pixels.data());
        assert_eq!(a.audio.frames().data(), b.audio.frames().data());
        assert_eq!(a.video_latent.data(), b.video_latent.data());
        let c = run_pipeline(&models, &cfg, &[2, 4, 8], Some(&a.base_latent)).unwrap();
        assert_ne!(a.pixels.data(), c.pixels.data(), "ref image should matter");
    }

    #[test]
    fn base_stage_ignores_the_sr_setting() {
        let codec = shared_codec();
        let (base, sr) = toy_models(codec);
        let models = PipelineModels {
            base: &base,
            sr: Some(&sr),
            decoder: &codec.dec,
        };
        let mk = |scale: Option<(f64, f64, f64)>| PipelineConfig {
            sr: scale.map(|s| SRConfig {
                scale: s,
                ..SRConfig::default()
            }),
            ..PipelineConfig::toy(11)
        };
        let off = run_pipeline(&models, &mk(None), &[3, 5, 6], None).unwrap();
        let two = run_pipeline(&models, &mk(Some((1.0, 2.0, 2.0))), &[3, 5, 6], None).unwrap();
        let four = run_pipeline(&models, &mk(Some((1.0, 4.0, 4.0))), &[3, 5, 6], None).unwrap();
        assert_eq!(off.base_latent.data(), two.base_latent.data());
        assert_eq!(off.base_latent.data(), four.base_latent.data());
        assert_eq!(off.base_latent.dims(), four.base_latent.dims());
        assert_eq!(off.report.base_evals, two.report.base_evals);
        assert_eq!(off.report.base_evals, four.report.base_evals);
        assert_eq!(two.pixels.dims(), (16, 64, 64, 3));
        assert_eq!(four.pixels.dims(), (16, 128, 128, 3));
    }

    #[test]
    fn report_table_renders_the_three_row_snapshot() {
        let row = |resolution: &str, base_s: f64, sr: Option<(f64, usize, usize)>| StageReport {
            resolution: resolution.into(),
            base_s,
            sr_s: sr.map(|(s, _, _)| s),
            decode_s: 0.44,
            total_s: base_s + sr.map_or(0.0, |(s, _, _)| s) + 0.44,
            base_steps: 8,
            sr_steps: sr.map(|(_, s, _)| s),
            base_evals: 8,
            sr_evals: sr.map(|(_, _, e)| e),
        };
        let reports = [
            row("32p", 1.63, None),
            row("64p", 1.61, Some((0.97, 5, 5))),
            row("128p", 1.58, Some((3.24, 5, 5))),
        ];
        let got = format_report(&reports);
        let want = "\
Resolution |  Base |    SR | Decode | Total
       32p |   1.6 |    -- |    0.4 |   2.0
       64p |   1.6 |   1.0 |    0.4 |   3.0
      128p |   1.6 |   3.2 |    0.4 |   5.2
32p: base 8 steps / 8 evals; sr -- steps / -- evals
64p: base 8 steps / 8 evals; sr 5 steps / 5 evals
128p: base 8 steps / 8 evals; sr 5 steps / 5 evals
";
        assert_eq!(got, want);
    }

    #[test]
    fn bench_medians_sit_inside_the_per_run_envelope() {
        let codec = shared_codec();
        let (base, _) = toy_models(codec);
        let models = PipelineModels {
            base: &base,
            sr: None,
            decoder: &codec.dec,
        };
        let res = bench(&models, &PipelineConfig::toy(13), &[0, 4, 6], 3).unwrap();
        assert_eq!(res.runs.len(), 3);
        let min = res.runs.iter().map(|r| r.base_s).fold(f64::MAX, f64::min);
        let max = res.runs.iter().map(|r| r.base_s).fold(0.0, f64::max);
        assert!(res.aggregated.base_s >= min && res.aggregated.base_s <= max);
        assert_eq!(res.aggregated.base_evals, res.runs[0].base_evals);

        let single = bench(&models, &PipelineConfig::toy(13), &[0, 4, 6], 1).unwrap();
        assert_eq!(single.runs.len(), 1);
        assert_eq!(single.aggregated.base_s, single.runs[0].base_s);
        assert!(bench(&models, &PipelineConfig::toy(13), &[0], 0).is_err());
    }

    #[test]
    fn sr_enabled_without_sr_weights_is_a_config_error() {
        let codec = shared_codec();
        let (base, _) = toy_models(codec);
        let models = PipelineModels {
            base: &base,
            sr: None,
            decoder: &codec.dec,
        };
        let cfg = PipelineConfig {
            sr: Some(SRConfig::default()),
            ..PipelineConfig::toy(2)
        };
        assert!(matches!(
            run_pipeline(&models, &cfg, &[0], None).unwrap_err(),
            CoreError::Config(_)
        ));
    }
}
