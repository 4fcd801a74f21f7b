//! Flat text configuration: `key = value` lines with section prefixes
//! (`model.`, `sampler.`, `sr.`, `pipeline.`), `#` comments, and no silent
//! fallbacks — a misspelled or malformed key is an error naming its line.
//! Missing keys keep the toy defaults; the parsed result is validated
//! before it is returned.

use std::collections::HashSet;
use std::path::Path;

use crate::backbone::ModelConfig;
use crate::error::{CoreError, Result};
use crate::sampler::SamplerConfig;
use crate::superres::SRConfig;

/// Everything a command run needs from its config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub sr: SRConfig,
    /// SR stage switch; the `--sr` flag turns it on too.
    pub sr_enabled: bool,
    /// Base video latent extents (time, height, width).
    pub latent_frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub audio_frames: usize,
    /// Runs aggregated by the bench command.
    pub bench_runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            sampler: SamplerConfig::base(),
            sr: SRConfig::default(),
            sr_enabled: false,
            latent_frames: 4,
            latent_height: 4,
            latent_width: 4,
            audio_frames: 4,
            bench_runs: 5,
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(lineno, format!("expected `key = value`, got {line:?}")));
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(err(lineno, "empty key or value".into()));
        }
        if !seen.insert(key.to_string()) {
            return Err(err(lineno, format!("duplicate key {key}")));
        }
        apply(&mut cfg, key, value, lineno)?;
    }
    cfg.model.validate()?;
    cfg.sampler.validate()?;
    cfg.sr.validate()?;
    if cfg.latent_frames == 0
        || cfg.latent_height == 0
        || cfg.latent_width == 0
        || cfg.audio_frames == 0
        || cfg.bench_runs == 0
    {
        return Err(CoreError::Config(
            "pipeline extents and bench runs must be >= 1".into(),
        ));
    }
    Ok(cfg)
}

fn err(line: usize, msg: String) -> CoreError {
    CoreError::ConfigParse { line, msg }
}

fn apply(cfg: &mut RunConfig, key: &str, value: &str, line: usize) -> Result<()> {
    let num = |v: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| err(line, format!("{key}: {v:?} is not a whole number")))
    };
    let float = |v: &str| -> Result<f32> {
        v.parse()
            .map_err(|_| err(line, format!("{key}: {v:?} is not a number")))
    };
    let flag = |v: &str| -> Result<bool> {
        match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(err(line, format!("{key}: {v:?} is not true/false"))),
        }
    };
    let triple = |v: &str| -> Result<(usize, usize, usize)> {
        let parts: Vec<usize> = v
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(line, format!("{key}: {v:?} is not a number triple")))?;
        match parts.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            _ => Err(err(line, format!("{key}: need three components"))),
        }
    };
    let ftriple = |v: &str| -> Result<(f64, f64, f64)> {
        let parts: Vec<f64> = v
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(line, format!("{key}: {v:?} is not a number triple")))?;
        match parts.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            _ => Err(err(line, format!("{key}: need three components"))),
        }
    };
    match key {
        "model.n_layers" => cfg.model.n_layers = num(value)?,
        "model.n_boundary" => cfg.model.n_boundary = num(value)?,
        "model.n_heads" => cfg.model.n_heads = num(value)?,
        "model.d_model" => cfg.model.d_model = num(value)?,
        "model.d_head" => cfg.model.d_head = num(value)?,
        "model.d_ff" => cfg.model.d_ff = num(value)?,
        "model.vocab" => cfg.model.vocab = num(value)?,
        "model.patch" => cfg.model.patch = triple(value)?,
        "model.axis_split" => cfg.model.axis_split = triple(value)?,
        "model.video_channels" => cfg.model.video_channels = num(value)?,
        "model.audio_channels" => cfg.model.audio_channels = num(value)?,
        "sampler.steps" => cfg.sampler.n_steps = num(value)?,
        "sampler.guidance" => {
            cfg.sampler.guidance = match value {
                "none" => None,
                v => Some(float(v)?),
            }
        }
        "sampler.cond_drop_prob" => cfg.sampler.cond_drop_prob = float(value)?,
        "sr.enabled" => cfg.sr_enabled = flag(value)?,
        "sr.scale" => cfg.sr.scale = ftriple(value)?,
        "sr.renoise_t" => cfg.sr.renoise_t = float(value)?,
        "sr.steps" => cfg.sr.n_steps = num(value)?,
        "sr.window" => {
            cfg.sr.window = match value {
                "global" => None,
                v => Some(triple(v)?),
            }
        }
        "sr.layers" => {
            cfg.sr.local_layers = match value {
                "default" => None,
                "none" => Some(Vec::new()),
                v => Some(
                    v.split(',')
                        .map(|p| p.trim().parse())
                        .collect::<std::result::Result<Vec<usize>, _>>()
                        .map_err(|_| {
                            err(line, format!("{key}: {v:?} is not a layer list"))
                        })?,
                ),
            }
        }
        "pipeline.latent_frames" => cfg.latent_frames = num(value)?,
        "pipeline.latent_height" => cfg.latent_height = num(value)?,
        "pipeline.latent_width" => cfg.latent_width = num(value)?,
        "pipeline.audio_frames" => cfg.audio_frames = num(value)?,
        "pipeline.bench_runs" => cfg.bench_runs = num(value)?,
        _ => return Err(err(line, format!("unknown key {key}"))),
    }
    Ok(())
}
