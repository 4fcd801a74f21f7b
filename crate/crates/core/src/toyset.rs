//! Built-in synthetic task: a single colored square slides toroidally across
//! a dark frame while a four-channel "audio" envelope tracks its motion, and
//! a small learned linear codec maps 4x8x8x3 pixel blocks to and from the
//! 8-channel latent cells the flow model trains on. Everything is generated
//! procedurally, so runs are reproducible with no data files.

use crate::error::Result;
use crate::rng::{derive_seed, gaussian_noise, Stream};
use crate::sequence::{grid_from_patch_matrix, patch_matrix, Affine, AudioLatent};
use crate::tape::Tape;
use crate::tensor::{LatentGrid, Tensor};
use crate::train::Adam;

pub const CLIP_FRAMES: usize = 16;
pub const CLIP_HEIGHT: usize = 32;
pub const CLIP_WIDTH: usize = 32;
/// Pixels per latent cell along (time, height, width).
pub const PIXEL_FACTORS: (usize, usize, usize) = (4, 8, 8);
/// Latent channels the codec produces; matches the toy model's video width.
pub const LATENT_CHANNELS: usize = 8;
pub const BACKGROUND: f32 = 0.1;
pub const TOY_CODEC_STEPS: usize = 400;
pub const CODEC_LR: f32 = 3e-3;

const BLOCK_SIDE: usize = 8;
const BLOCK_START: i64 = 12;
/// (dy, dx) per frame at unit speed: right, left, down, up.
const DIRECTIONS: [(i64, i64); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];
const SPEEDS: [i64; 2] = [1, 2];
const COLORS: [[f32; 3]; 3] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.9, 0.2],
    [0.2, 0.2, 0.9],
];

/// Token ids describing a clip: direction in 0..4, speed flag at 4..6,
/// color at 6..9. All fit the toy vocabulary.
pub fn clip_text_ids(dir: usize, speed: usize, color: usize) -> Vec<usize> {
    vec![dir, 4 + speed, 6 + color]
}

#[derive(Debug, Clone)]
pub struct ToyClip {
    /// Pixel video in [0,1], shaped [frames, height, width, 3].
    pub pixels: LatentGrid,
    /// Envelope frames [sin phase, cos phase, speed, color code], one per
    /// latent time step.
    pub audio: AudioLatent,
    pub text_ids: Vec<usize>,
    pub dir: usize,
    pub speed: usize,
    pub color: usize,
}

/// The full task: every direction x speed x color combination, one clip each.
pub fn toy_clips() -> Vec<ToyClip> {
    let mut clips = Vec::with_capacity(DIRECTIONS.len() * SPEEDS.len() * COLORS.len());
    for dir in 0..DIRECTIONS.len() {
        for speed in 0..SPEEDS.len() {
            for color in 0..COLORS.len() {
                clips.push(ToyClip {
                    pixels: render_clip(dir, speed, color),
                    audio: envelope(speed, color),
                    text_ids: clip_text_ids(dir, speed, color),
                    dir,
                    speed,
                    color,
                });
            }
        }
    }
    clips
}

fn render_clip(dir: usize, speed: usize, color: usize) -> LatentGrid {
    let (dy, dx) = DIRECTIONS[dir];
    let v = SPEEDS[speed];
    let rgb = COLORS[color];
    let mut grid = LatentGrid::zeros(CLIP_FRAMES, CLIP_HEIGHT, CLIP_WIDTH, 3);
    for f in 0..CLIP_FRAMES {
        let top = (BLOCK_START + dy * v * f as i64).rem_euclid(CLIP_HEIGHT as i64) as usize;
        let left = (BLOCK_START + dx * v * f as i64).rem_euclid(CLIP_WIDTH as i64) as usize;
        for y in 0..CLIP_HEIGHT {
            for x in 0..CLIP_WIDTH {
                let inside_y = (y + CLIP_HEIGHT - top) % CLIP_HEIGHT < BLOCK_SIDE;
                let inside_x = (x + CLIP_WIDTH - left) % CLIP_WIDTH < BLOCK_SIDE;
                let px = if inside_y && inside_x {
                    rgb
                } else {
                    [BACKGROUND; 3]
                };
                for (c, &val) in px.iter().enumerate() {
                    grid.set(f, y, x, c, val);
                }
            }
        }
    }
    grid
}

/// One envelope frame per latent time step: the phase advances with the
/// distance the block has traveled, so the oscillation frequency encodes
/// speed, and the last channel encodes color.
fn envelope(speed: usize, color: usize) -> AudioLatent {
    let v = SPEEDS[speed] as f32;
    let frames = CLIP_FRAMES / PIXEL_FACTORS.0;
    let mut data = Vec::with_capacity(frames * 4);
    for k in 0..frames {
        let travel = v * (k * PIXEL_FACTORS.0) as f32;
        let phase = std::f32::consts::TAU * travel / CLIP_WIDTH as f32;
        data.extend_from_slice(&[
            phase.sin(),
            phase.cos(),
            v / SPEEDS[SPEEDS.len() - 1] as f32,
            (color as f32 - 1.0) * 0.8,
        ]);
    }
    AudioLatent::new(Tensor::from_vec(&[frames, 4], data).expect("envelope shape"))
        .expect("envelope frames")
}

// ---------------------------------------------------------------------------
// Linear pixel codec
// ---------------------------------------------------------------------------

/// Learned linear maps between flattened pixel blocks and latent cells. The
/// encoder folds in per-channel normalization of the training latents, so
/// encoded datasets come out roughly unit-scale per channel.
#[derive(Debug, Clone)]
pub struct PixelCodec {
    pub enc: Affine,
    pub dec: Affine,
}

/// Flattened size of one pixel block.
pub fn block_dim() -> usize {
    PIXEL_FACTORS.0 * PIXEL_FACTORS.1 * PIXEL_FACTORS.2 * 3
}

/// All clips' pixel blocks stacked into one [n_blocks, block_dim] matrix.
pub fn pixel_blocks(clips: &[ToyClip]) -> Result<Tensor> {
    let d = block_dim();
    let mut data = Vec::new();
    let mut rows = 0;
    for clip in clips {
        let (blocks, _) = patch_matrix(&clip.pixels, PIXEL_FACTORS)?;
        rows += blocks.shape()[0];
        data.extend_from_slice(blocks.data());
    }
    Tensor::from_vec(&[rows, d], data)
}

/// Train the codec as a linear autoencoder on the clips' pixel blocks, then
/// fold latent normalization into the weights.
pub fn train_codec(clips: &[ToyClip], steps: usize, seed: u64) -> Result<PixelCodec> {
    let blocks = pixel_blocks(clips)?;
    let n = blocks.shape()[0];
    let d = block_dim();
    let k = LATENT_CHANNELS;
    let mut enc_w = gaussian_noise(&[d, k], derive_seed(seed, 1)).scale(0.05);
    let mut enc_b = Tensor::zeros(&[k]);
    let mut dec_w = gaussian_noise(&[k, d], derive_seed(seed, 2)).scale(0.05);
    let mut dec_b = Tensor::zeros(&[d]);
    let mut opt = Adam::for_shapes(&[&[d, k], &[k], &[k, d], &[d]], CODEC_LR);
    let batch = 256.min(n);
    let mut order = Stream::new(derive_seed(seed, 3));
    for _ in 0..steps {
        let start = (order.next_uniform() * n as f64) as usize % n;
        let x = row_chunk(&blocks, start, batch);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let ew = tape.leaf(enc_w.clone());
        let eb = tape.leaf(enc_b.clone());
        let dw = tape.leaf(dec_w.clone());
        let db = tape.leaf(dec_b.clone());
        let zw = tape.matmul(xv, ew)?;
        let z = tape.add_row(zw, eb);
        let rw = tape.matmul(z, dw)?;
        let recon = tape.add_row(rw, db);
        let loss = tape.mean_sq_diff(recon, x);
        let grads = tape.backward(loss);
        let gs: Vec<Option<Tensor>> = [ew, eb, dw, db]
            .into_iter()
            .map(|v| grads.get(v).cloned())
            .collect();
        opt.apply_to(
            &mut [&mut enc_w, &mut enc_b, &mut dec_w, &mut dec_b],
            &gs,
        )?;
    }
    let mut codec = PixelCodec {
        enc: Affine::new(enc_w, enc_b),
        dec: Affine::new(dec_w, dec_b),
    };
    let stats = latent_channel_stats(&codec, &blocks)?;
    fold_normalization(&mut codec, &stats);
    Ok(codec)
}

/// Codec trained with the default budget.
pub fn default_codec(seed: u64) -> Result<PixelCodec> {
    train_codec(&toy_clips(), TOY_CODEC_STEPS, seed)
}

/// Contiguous row window starting at `start`, wrapping past the end.
fn row_chunk(x: &Tensor, start: usize, rows: usize) -> Tensor {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let mut data = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let src = (start + r) % n;
        data.extend_from_slice(&x.data()[src * d..(src + 1) * d]);
    }
    Tensor::from_vec(&[rows, d], data).expect("chunk shape")
}

/// Per-channel (mean, std) of the encoded training blocks, f64-accumulated.
fn latent_channel_stats(codec: &PixelCodec, blocks: &Tensor) -> Result<Vec<(f32, f32)>> {
    let z = codec.enc.apply(blocks)?;
    let n = z.shape()[0];
    let k = z.shape()[1];
    let mut stats = Vec::with_capacity(k);
    for c in 0..k {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for r in 0..n {
            let v = z.data()[r * k + c] as f64;
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        stats.push((mean as f32, (var.sqrt() as f32).max(1e-6)));
    }
    Ok(stats)
}

/// Rewrite the codec so encoding additionally applies (z - mean) / std per
/// channel and decoding undoes it first. The round trip is unchanged; the
/// latent distribution becomes unit-scale.
fn fold_normalization(codec: &mut PixelCodec, stats: &[(f32, f32)]) {
    let k = stats.len();
    let d = codec.dec.weight.shape()[1];
    for c in 0..k {
        let (mean, std) = stats[c];
        for i in 0..codec.enc.weight.shape()[0] {
            codec.enc.weight.data_mut()[i * k + c] /= std;
        }
        codec.enc.bias.data_mut()[c] = (codec.enc.bias.data()[c] - mean) / std;
        for j in 0..d {
            let w = codec.dec.weight.data()[c * d + j];
            codec.dec.weight.data_mut()[c * d + j] = std * w;
            codec.dec.bias.data_mut()[j] += mean * w;
        }
    }
}

/// Encode one pixel clip into its latent grid.
pub fn encode_clip(codec: &PixelCodec, pixels: &LatentGrid) -> Result<LatentGrid> {
    let (t, h, w, _) = pixels.dims();
    let (blocks, coords) = patch_matrix(pixels, PIXEL_FACTORS)?;
    let z = codec.enc.apply(&blocks)?;
    let dims = (
        t / PIXEL_FACTORS.0,
        h / PIXEL_FACTORS.1,
        w / PIXEL_FACTORS.2,
        LATENT_CHANNELS,
    );
    grid_from_patch_matrix(&z, &coords, (1, 1, 1), dims)
}

/// Mean squared pixel error of encode-decode over the clips, without the
/// final display clamp.
pub fn reconstruction_mse(codec: &PixelCodec, clips: &[ToyClip]) -> Result<f64> {
    let blocks = pixel_blocks(clips)?;
    let recon = codec.dec.apply(&codec.enc.apply(&blocks)?)?;
    let mut sum = 0.0f64;
    for (a, b) in recon.data().iter().zip(blocks.data()) {
        let d = (a - b) as f64;
        sum += d * d;
    }
    Ok(sum / blocks.len() as f64)
}

/// One training example in latent space.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub video: LatentGrid,
    pub audio: AudioLatent,
    pub text_ids: Vec<usize>,
}

/// Every clip encoded with the codec, paired with its envelope and caption.
pub fn toy_latent_dataset(codec: &PixelCodec) -> Result<Vec<ToySample>> {
    toy_clips()
        .into_iter()
        .map(|clip| {
            Ok(ToySample {
                video: encode_clip(codec, &clip.pixels)?,
                audio: clip.audio,
                text_ids: clip.text_ids,
            })
        })
        .collect()
}

/// Upper bound the trained codec must meet on its own training blocks.
pub fn codec_mse_bound() -> f64 {
    CODEC_MSE_BOUND
}

const CODEC_MSE_BOUND: f64 = 0.01;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use std::sync::OnceLock;

    fn shared_codec() -> &'static PixelCodec {
        static CODEC: OnceLock<PixelCodec> = OnceLock::new();
        CODEC.get_or_init(|| default_codec(1).expect("codec training"))
    }

    #[test]
    fn task_enumerates_every_combination_once() {
        let clips = toy_clips();
        assert_eq!(clips.len(), 24);
        let mut seen = std::collections::HashSet::new();
        for clip in &clips {
            assert_eq!(clip.pixels.dims(), (CLIP_FRAMES, CLIP_HEIGHT, CLIP_WIDTH, 3));
            assert_eq!(clip.audio.n_frames(), 4);
            assert_eq!(clip.audio.channels(), 4);
            assert_eq!(clip.text_ids.len(), 3);
            let vocab = ModelConfig::toy().vocab;
            assert!(clip.text_ids.iter().all(|&id| id < vocab));
            assert!(seen.insert(clip.text_ids.clone()), "duplicate caption");
        }
    }

    #[test]
    fn clips_are_reproducible() {
        let a = toy_clips();
        let b = toy_clips();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels.data(), y.pixels.data());
            assert_eq!(x.audio.frames().data(), y.audio.frames().data());
        }
    }

    #[test]
    fn every_frame_holds_one_full_block() {
        for clip in toy_clips() {
            let rgb = COLORS[clip.color];
            for f in 0..CLIP_FRAMES {
                let mut block_px = 0;
                for y in 0..CLIP_HEIGHT {
                    for x in 0..CLIP_WIDTH {
                        let px: Vec<f32> = (0..3)
                            .map(|c| clip.pixels.tensor().data()
                                [((f * CLIP_HEIGHT + y) * CLIP_WIDTH + x) * 3 + c])
                            .collect();
                        if px != [BACKGROUND; 3] {
                            assert_eq!(px.as_slice(), rgb, "stray color at {f},{y},{x}");
                            block_px += 1;
                        }
                    }
                }
                assert_eq!(block_px, BLOCK_SIDE * BLOCK_SIDE, "frame {f}");
            }
        }
    }

    #[test]
    fn consecutive_frames_are_toroidal_shifts() {
        for clip in toy_clips() {
            let (dy, dx) = DIRECTIONS[clip.dir];
            let v = SPEEDS[clip.speed];
            let data = clip.pixels.tensor().data();
            let at = |f: usize, y: usize, x: usize, c: usize| {
                data[((f * CLIP_HEIGHT + y) * CLIP_WIDTH + x) * 3 + c]
            };
            for f in 0..CLIP_FRAMES - 1 {
                for y in 0..CLIP_HEIGHT {
                    for x in 0..CLIP_WIDTH {
                        let sy = (y as i64 - dy * v).rem_euclid(CLIP_HEIGHT as i64) as usize;
                        let sx = (x as i64 - dx * v).rem_euclid(CLIP_WIDTH as i64) as usize;
                        for c in 0..3 {
                            assert_eq!(
                                at(f + 1, y, x, c),
                                at(f, sy, sx, c),
                                "clip {:?} frame {f} at {y},{x}",
                                clip.text_ids
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn envelope_phase_advances_with_speed() {
        // consecutive sin/cos pairs are rotations by pi*v/4, so their dot
        // product is cos(pi/4) at speed 1 and cos(pi/2) at speed 2
        for clip in toy_clips() {
            let frames = clip.audio.frames();
            let expect = match clip.speed {
                0 => (std::f32::consts::FRAC_PI_4).cos(),
                _ => 0.0,
            };
            for k in 0..clip.audio.n_frames() - 1 {
                let a = frames.row(k);
                let b = frames.row(k + 1);
                assert!((a[0] * a[0] + a[1] * a[1] - 1.0).abs() < 1e-5);
                let dot = a[0] * b[0] + a[1] * b[1];
                assert!(
                    (dot - expect).abs() < 1e-5,
                    "speed {}: dot {dot} vs {expect}",
                    clip.speed
                );
            }
            let speed_ch = frames.row(0)[2];
            assert_eq!(speed_ch, SPEEDS[clip.speed] as f32 / 2.0);
        }
    }

    #[test]
    fn codec_reconstructs_training_blocks() {
        let codec = shared_codec();
        let mse = reconstruction_mse(codec, &toy_clips()).unwrap();
        assert!(
            mse < codec_mse_bound(),
            "reconstruction mse {mse} above bound {}",
            codec_mse_bound()
        );
    }

    #[test]
    fn encoded_dataset_is_channelwise_normalized() {
        let codec = shared_codec();
        let blocks = pixel_blocks(&toy_clips()).unwrap();
        let stats = latent_channel_stats(codec, &blocks).unwrap();
        for (c, (mean, std)) in stats.iter().enumerate() {
            assert!(mean.abs() < 1e-3, "channel {c} mean {mean}");
            assert!((std - 1.0).abs() < 1e-3, "channel {c} std {std}");
        }
    }

    #[test]
    fn normalization_fold_preserves_the_round_trip() {
        let d = 6;
        let k = 3;
        let mut codec = PixelCodec {
            enc: Affine::new(
                gaussian_noise(&[d, k], 7),
                gaussian_noise(&[k], 8),
            ),
            dec: Affine::new(
                gaussian_noise(&[k, d], 9),
                gaussian_noise(&[d], 10),
            ),
        };
        let x = gaussian_noise(&[5, d], 11);
        let before = codec.dec.apply(&codec.enc.apply(&x).unwrap()).unwrap();
        fold_normalization(&mut codec, &[(0.3, 2.0), (-1.0, 0.5), (0.0, 1.7)]);
        let after = codec.dec.apply(&codec.enc.apply(&x).unwrap()).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn latent_dataset_has_model_ready_shapes() {
        let codec = shared_codec();
        let data = toy_latent_dataset(codec).unwrap();
        assert_eq!(data.len(), 24);
        for sample in &data {
            assert_eq!(sample.video.dims(), (4, 4, 4, LATENT_CHANNELS));
            assert_eq!(sample.audio.n_frames(), 4);
            assert_eq!(sample.audio.channels(), 4);
        }
        // encoding is deterministic
        let again = toy_latent_dataset(codec).unwrap();
        assert_eq!(data[0].video.data(), again[0].video.data());
    }

    #[test]
    fn different_clips_get_different_latents() {
        let codec = shared_codec();
        let data = toy_latent_dataset(codec).unwrap();
        let mut worst = f32::MAX;
        for i in 0..data.len() {
            for j in i + 1..data.len() {
                let mut diff = 0.0f32;
                for (a, b) in data[i].video.data().iter().zip(data[j].video.data()) {
                    diff = diff.max((a - b).abs());
                }
                worst = worst.min(diff);
            }
        }
        assert!(worst > 1e-3, "closest latent pair differs by only {worst}");
    }
}
