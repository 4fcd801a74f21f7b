//! One checkpoint container for base, SR, and decoder weights: a textual
//! header (format version, role, model configuration, named-array index)
//! followed by the raw little-endian f32 arrays, concatenated in index
//! order. Round trips are bitwise; all validation happens against the
//! header before any floats are touched.

use std::collections::HashMap;
use std::path::Path;

use crate::backbone::{ModelConfig, ModelParams};
use crate::error::{CoreError, Result};
use crate::sequence::Affine;
use crate::tensor::Tensor;
use crate::toyset::PixelCodec;

pub const CHECKPOINT_MAGIC: &str = "duet-checkpoint v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointRole {
    Base,
    Sr,
    Decoder,
}

impl CheckpointRole {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Sr => "sr",
            Self::Decoder => "decoder",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "sr" => Ok(Self::Sr),
            "decoder" => Ok(Self::Decoder),
            other => Err(CoreError::CheckpointFormat(format!(
                "unknown role {other:?}"
            ))),
        }
    }
}

/// Parsed container: what the file stores, independent of what it is for.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub role: CheckpointRole,
    pub cfg: ModelConfig,
    pub arrays: Vec<(String, Tensor)>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    header.push_str(&format!("role = {}\n", ckpt.role.as_str()));
    let c = &ckpt.cfg;
    header.push_str(&format!("model.n_layers = {}\n", c.n_layers));
    header.push_str(&format!("model.n_boundary = {}\n", c.n_boundary));
    header.push_str(&format!("model.n_heads = {}\n", c.n_heads));
    header.push_str(&format!("model.d_model = {}\n", c.d_model));
    header.push_str(&format!("model.d_head = {}\n", c.d_head));
    header.push_str(&format!("model.d_ff = {}\n", c.d_ff));
    header.push_str(&format!("model.vocab = {}\n", c.vocab));
    header.push_str(&format!("model.patch = {},{},{}\n", c.patch.0, c.patch.1, c.patch.2));
    header.push_str(&format!(
        "model.axis_split = {},{},{}\n",
        c.axis_split.0, c.axis_split.1, c.axis_split.2
    ));
    header.push_str(&format!("model.video_channels = {}\n", c.video_channels));
    header.push_str(&format!("model.audio_channels = {}\n", c.audio_channels));
    let mut offset = 0usize;
    for (name, tensor) in &ckpt.arrays {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "array {name} f32 {} @{offset}\n",
            dims.join("x")
        ));
        offset += tensor.len() * 4;
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    bytes.reserve(offset);
    for (_, tensor) in &ckpt.arrays {
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let marker = b"\nend\n";
    let end = find(&bytes, marker).ok_or_else(|| {
        CoreError::CheckpointFormat("no end-of-header marker".into())
    })?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| CoreError::CheckpointFormat("header is not UTF-8".into()))?;
    let body = &bytes[end + marker.len()..];

    let mut lines = header.lines();
    let magic = lines.next().unwrap_or("");
    if magic != CHECKPOINT_MAGIC {
        return Err(CoreError::CheckpointVersion {
            found: magic.to_string(),
            expected: CHECKPOINT_MAGIC.to_string(),
        });
    }
    let mut role = None;
    let mut fields: HashMap<&str, &str> = HashMap::new();
    let mut index: Vec<(String, Vec<usize>, usize)> = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("array ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let [name, dtype, shape, at] = parts.as_slice() else {
                return Err(CoreError::CheckpointFormat(format!(
                    "malformed array line {line:?}"
                )));
            };
            if *dtype != "f32" {
                return Err(CoreError::CheckpointFormat(format!(
                    "unsupported dtype {dtype} for {name}"
                )));
            }
            let dims = shape
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| {
                    CoreError::CheckpointFormat(format!("bad shape {shape:?} for {name}"))
                })?;
            let offset = at
                .strip_prefix('@')
                .and_then(|o| o.parse::<usize>().ok())
                .ok_or_else(|| {
                    CoreError::CheckpointFormat(format!("bad offset {at:?} for {name}"))
                })?;
            index.push((name.to_string(), dims, offset));
        } else if let Some((key, value)) = line.split_once(" = ") {
            if key == "role" {
                role = Some(CheckpointRole::parse(value)?);
            } else {
                fields.insert(key, value);
            }
        } else if !line.trim().is_empty() {
            return Err(CoreError::CheckpointFormat(format!(
                "unrecognized header line {line:?}"
            )));
        }
    }
    let role =
        role.ok_or_else(|| CoreError::CheckpointFormat("missing role line".into()))?;
    let cfg = config_from_fields(&fields)?;

    let mut expected_offset = 0usize;
    for (name, dims, offset) in &index {
        if *offset != expected_offset {
            return Err(CoreError::CheckpointFormat(format!(
                "array {name} at offset {offset}, expected {expected_offset}"
            )));
        }
        expected_offset += dims.iter().product::<usize>() * 4;
    }
    if body.len() < expected_offset {
        return Err(CoreError::CheckpointTruncated {
            needed: expected_offset,
            got: body.len(),
        });
    }
    if body.len() > expected_offset {
        return Err(CoreError::CheckpointFormat(format!(
            "{} trailing bytes after the last array",
            body.len() - expected_offset
        )));
    }
    let mut arrays = Vec::with_capacity(index.len());
    for (name, dims, offset) in index {
        let len: usize = dims.iter().product();
        let data: Vec<f32> = body[offset..offset + len * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        arrays.push((name, Tensor::from_vec(&dims, data)?));
    }
    Ok(Checkpoint { role, cfg, arrays })
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn config_from_fields(fields: &HashMap<&str, &str>) -> Result<ModelConfig> {
    let get = |key: &str| -> Result<&str> {
        fields.get(key).copied().ok_or_else(|| {
            CoreError::CheckpointFormat(format!("missing header field {key}"))
        })
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?.parse().map_err(|_| {
            CoreError::CheckpointFormat(format!("field {key} is not a number"))
        })
    };
    let triple = |key: &str| -> Result<(usize, usize, usize)> {
        let raw = get(key)?;
        let parts: Vec<usize> = raw
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                CoreError::CheckpointFormat(format!("field {key} is not a triple"))
            })?;
        match parts.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            _ => Err(CoreError::CheckpointFormat(format!(
                "field {key} needs three components"
            ))),
        }
    };
    Ok(ModelConfig {
        n_layers: num("model.n_layers")?,
        n_boundary: num("model.n_boundary")?,
        n_heads: num("model.n_heads")?,
        d_model: num("model.d_model")?,
        d_head: num("model.d_head")?,
        d_ff: num("model.d_ff")?,
        vocab: num("model.vocab")?,
        patch: triple("model.patch")?,
        axis_split: triple("model.axis_split")?,
        video_channels: num("model.video_channels")?,
        audio_channels: num("model.audio_channels")?,
    })
}

// ---------------------------------------------------------------------------
// Model and codec wrappers
// ---------------------------------------------------------------------------

/// Write a backbone checkpoint; `role` says which stage it drives.
pub fn save_model(path: &Path, role: CheckpointRole, params: &ModelParams) -> Result<()> {
    if role == CheckpointRole::Decoder {
        return Err(CoreError::Config(
            "decoder checkpoints hold a pixel codec, not model weights".into(),
        ));
    }
    let arrays = params
        .arrays()
        .into_iter()
        .map(|(name, t)| (name, t.clone()))
        .collect();
    save_checkpoint(
        path,
        &Checkpoint {
            role,
            cfg: params.cfg.clone(),
            arrays,
        },
    )
}

/// Read a backbone checkpoint back. With `expected` given, the header's
/// configuration must match it exactly before any array is accepted.
pub fn load_model(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(CheckpointRole, ModelParams)> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.role == CheckpointRole::Decoder {
        return Err(CoreError::CheckpointFormat(
            "decoder checkpoint where model weights were expected".into(),
        ));
    }
    if let Some(want) = expected {
        if ckpt.cfg != *want {
            return Err(CoreError::CheckpointFormat(
                "checkpoint was built for a different model configuration".into(),
            ));
        }
    }
    let mut stored: HashMap<String, Tensor> = ckpt.arrays.into_iter().collect();
    let mut params = ModelParams::init(ckpt.cfg, 0)?;
    for (name, slot) in params.arrays_mut() {
        let tensor = stored.remove(&name).ok_or_else(|| {
            CoreError::CheckpointFormat(format!("missing array {name}"))
        })?;
        if tensor.shape() != slot.shape() {
            return Err(CoreError::CheckpointShape {
                name,
                expected: slot.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
    }
    if let Some(name) = stored.into_keys().next() {
        return Err(CoreError::CheckpointFormat(format!(
            "unexpected extra array {name}"
        )));
    }
    Ok((ckpt.role, params))
}

const CODEC_ARRAYS: [&str; 4] = ["enc.weight", "enc.bias", "dec.weight", "dec.bias"];

/// Write the pixel codec under the decoder role; `cfg` records which model
/// family it pairs with.
pub fn save_codec(path: &Path, cfg: &ModelConfig, codec: &PixelCodec) -> Result<()> {
    let arrays = vec![
        (CODEC_ARRAYS[0].to_string(), codec.enc.weight.clone()),
        (CODEC_ARRAYS[1].to_string(), codec.enc.bias.clone()),
        (CODEC_ARRAYS[2].to_string(), codec.dec.weight.clone()),
        (CODEC_ARRAYS[3].to_string(), codec.dec.bias.clone()),
    ];
    save_checkpoint(
        path,
        &Checkpoint {
            role: CheckpointRole::Decoder,
            cfg: cfg.clone(),
            arrays,
        },
    )
}

pub fn load_codec(path: &Path) -> Result<PixelCodec> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.role != CheckpointRole::Decoder {
        return Err(CoreError::CheckpointFormat(format!(
            "{} checkpoint where a decoder was expected",
            ckpt.role.as_str()
        )));
    }
    let mut stored: HashMap<String, Tensor> = ckpt.arrays.into_iter().collect();
    let mut take = |name: &str| -> Result<Tensor> {
        stored.remove(name).ok_or_else(|| {
            CoreError::CheckpointFormat(format!("missing array {name}"))
        })
    };
    let enc_w = take(CODEC_ARRAYS[0])?;
    let enc_b = take(CODEC_ARRAYS[1])?;
    let dec_w = take(CODEC_ARRAYS[2])?;
    let dec_b = take(CODEC_ARRAYS[3])?;
    let check = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
        if t.shape() != shape {
            return Err(CoreError::CheckpointShape {
                name: name.into(),
                expected: shape.to_vec(),
                got: t.shape().to_vec(),
            });
        }
        Ok(())
    };
    let (d, k) = (enc_w.shape()[0], enc_w.shape()[1]);
    check(CODEC_ARRAYS[1], &enc_b, &[k])?;
    check(CODEC_ARRAYS[2], &dec_w, &[k, d])?;
    check(CODEC_ARRAYS[3], &dec_b, &[d])?;
    Ok(PixelCodec {
        enc: Affine::new(enc_w, enc_b),
        dec: Affine::new(dec_w, dec_b),
    })
}
