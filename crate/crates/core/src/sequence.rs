//! Unified token sequence: video patchification, audio-frame and text
//! embedding, reference-image insertion, modality tagging, and multi-axis
//! rotary position tables.
//!
//! All modalities are carried in one packed sequence with a fixed block
//! order — Text | RefImage | Video | Audio — and per-token coordinate
//! triples `(τ, y, x)`. Video tokens use their patch-grid indices; text and
//! audio tokens index along τ only; reference-image tokens sit at τ = −1 so
//! they are positionally distinct from every video frame.

use crate::error::{CoreError, Result};
use crate::tensor::{matmul, LatentGrid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModalityTag {
    Text,
    RefImage,
    Video,
    Audio,
}

impl ModalityTag {
    /// Fixed packing order.
    pub const ALL: [ModalityTag; 4] = [
        ModalityTag::Text,
        ModalityTag::RefImage,
        ModalityTag::Video,
        ModalityTag::Audio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModalityTag::Text => "text",
            ModalityTag::RefImage => "ref_image",
            ModalityTag::Video => "video",
            ModalityTag::Audio => "audio",
        }
    }
}

/// Audio latent: one row of channels per latent frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioLatent {
    frames: Tensor,
}

impl AudioLatent {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 || frames.shape()[0] == 0 {
            return Err(CoreError::Config(format!(
                "audio latent must be [frames >= 1, channels], got {:?}",
                frames.shape()
            )));
        }
        Ok(Self { frames })
    }

    pub fn zeros(n_frames: usize, channels: usize) -> Self {
        Self {
            frames: Tensor::zeros(&[n_frames.max(1), channels]),
        }
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut Tensor {
        &mut self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn channels(&self) -> usize {
        self.frames.cols()
    }
}

/// One modality's tokens before packing: features plus `(τ, y, x)` coords.
#[derive(Debug, Clone)]
pub struct ModalityBlock {
    pub tag: ModalityTag,
    pub feats: Tensor,
    pub pos: Vec<[i64; 3]>,
}

impl ModalityBlock {
    pub fn new(tag: ModalityTag, feats: Tensor, pos: Vec<[i64; 3]>) -> Self {
        assert_eq!(feats.rows(), pos.len(), "token/coordinate count mismatch");
        Self { tag, feats, pos }
    }

    pub fn empty(tag: ModalityTag, d_model: usize) -> Self {
        Self {
            tag,
            feats: Tensor::zeros(&[0, d_model]),
            pos: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }
}

/// The packed multimodal sequence. Built by [`pack_sequence`], which
/// guarantees the contiguous-block invariant and the fixed block order.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    feats: Tensor,
    tags: Vec<ModalityTag>,
    pos: Vec<[i64; 3]>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.feats.cols()
    }

    pub fn feats(&self) -> &Tensor {
        &self.feats
    }

    pub fn tags(&self) -> &[ModalityTag] {
        &self.tags
    }

    pub fn pos(&self) -> &[[i64; 3]] {
        &self.pos
    }

    /// Replace the features (layout — tags and coords — unchanged).
    pub fn with_feats(&self, feats: Tensor) -> Self {
        assert_eq!(feats.rows(), self.len(), "feature row count mismatch");
        Self {
            feats,
            tags: self.tags.clone(),
            pos: self.pos.clone(),
        }
    }

    /// Contiguous index range of a modality's block (empty if absent).
    pub fn block_range(&self, tag: ModalityTag) -> std::ops::Range<usize> {
        let start = self.tags.iter().position(|&t| t == tag);
        match start {
            None => 0..0,
            Some(s) => {
                let e = s + self.tags[s..].iter().take_while(|&&t| t == tag).count();
                s..e
            }
        }
    }
}

/// Affine map `x · W + b` applied row-wise; the modality input/output
/// projections are instances of this.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    pub fn new(weight: Tensor, bias: Tensor) -> Self {
        assert_eq!(weight.cols(), bias.len(), "bias width mismatch");
        Self { weight, bias }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Tensor::eye(d),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight)?;
        let (n, d) = (y.rows(), y.cols());
        for i in 0..n {
            for j in 0..d {
                y.data_mut()[i * d + j] += self.bias.data()[j];
            }
        }
        Ok(y)
    }
}

fn check_divisible(extent: usize, patch: usize, axis: &'static str) -> Result<()> {
    if patch == 0 || extent % patch != 0 {
        return Err(CoreError::Patching {
            axis,
            extent,
            patch,
        });
    }
    Ok(())
}

/// Cut a latent grid into non-overlapping `(p_t, p_h, p_w)` patches.
///
/// Returns one flattened row per patch — patch cells in row-major
/// `(dt, dy, dx, channel)` order — plus the patch-grid coordinate of each
/// row, enumerated in row-major `(τ, y, x)` order. Pure layout; no
/// projection is applied.
pub fn patch_matrix(
    latent: &LatentGrid,
    patch: (usize, usize, usize),
) -> Result<(Tensor, Vec<[i64; 3]>)> {
    let (t, h, w, c) = latent.dims();
    let (pt, ph, pw) = patch;
    check_divisible(t, pt, "time")?;
    check_divisible(h, ph, "height")?;
    check_divisible(w, pw, "width")?;
    let (gt, gh, gw) = (t / pt, h / ph, w / pw);
    let row_len = pt * ph * pw * c;
    let mut data = Vec::with_capacity(gt * gh * gw * row_len);
    let mut coords = Vec::with_capacity(gt * gh * gw);
    for bt in 0..gt {
        for by in 0..gh {
            for bx in 0..gw {
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            for ch in 0..c {
                                data.push(latent.get(bt * pt + dt, by * ph + dy, bx * pw + dx, ch));
                            }
                        }
                    }
                }
                coords.push([bt as i64, by as i64, bx as i64]);
            }
        }
    }
    let rows = Tensor::from_vec(&[gt * gh * gw, row_len], data)?;
    Ok((rows, coords))
}

/// Inverse of [`patch_matrix`]: scatter patch rows back onto a grid of the
/// given `(t, h, w, c)` dims. Every patch coordinate must be covered exactly
/// once.
pub fn grid_from_patch_matrix(
    rows: &Tensor,
    coords: &[[i64; 3]],
    patch: (usize, usize, usize),
    dims: (usize, usize, usize, usize),
) -> Result<LatentGrid> {
    let (t, h, w, c) = dims;
    let (pt, ph, pw) = patch;
    check_divisible(t, pt, "time")?;
    check_divisible(h, ph, "height")?;
    check_divisible(w, pw, "width")?;
    let (gt, gh, gw) = (t / pt, h / ph, w / pw);
    let row_len = pt * ph * pw * c;
    if rows.rows() != coords.len() || rows.cols() != row_len {
        return Err(CoreError::ShapeMismatch {
            op: "unpatchify",
            lhs: rows.shape().to_vec(),
            rhs: vec![coords.len(), row_len],
        });
    }
    let mut grid = LatentGrid::zeros(t, h, w, c);
    let mut seen = vec![false; gt * gh * gw];
    for (i, &[bt, by, bx]) in coords.iter().enumerate() {
        if bt < 0 || by < 0 || bx < 0 {
            return Err(CoreError::Coverage(format!(
                "negative patch coordinate ({bt},{by},{bx})"
            )));
        }
        let (bt, by, bx) = (bt as usize, by as usize, bx as usize);
        if bt >= gt || by >= gh || bx >= gw {
            return Err(CoreError::Coverage(format!(
                "patch coordinate ({bt},{by},{bx}) outside {gt}x{gh}x{gw} grid"
            )));
        }
        let slot = (bt * gh + by) * gw + bx;
        if seen[slot] {
            return Err(CoreError::Coverage(format!(
                "duplicate patch coordinate ({bt},{by},{bx})"
            )));
        }
        seen[slot] = true;
        let row = rows.row(i);
        let mut k = 0;
        for dt in 0..pt {
            for dy in 0..ph {
                for dx in 0..pw {
                    for ch in 0..c {
                        grid.set(bt * pt + dt, by * ph + dy, bx * pw + dx, ch, row[k]);
                        k += 1;
                    }
                }
            }
        }
    }
    if let Some(slot) = seen.iter().position(|&s| !s) {
        let bt = slot / (gh * gw);
        let by = (slot / gw) % gh;
        let bx = slot % gw;
        return Err(CoreError::Coverage(format!(
            "missing patch coordinate ({bt},{by},{bx})"
        )));
    }
    Ok(grid)
}

/// Patchify a video latent and project each flattened patch to model width.
pub fn patchify_video(
    latent: &LatentGrid,
    patch: (usize, usize, usize),
    proj: &Affine,
) -> Result<ModalityBlock> {
    let (rows, coords) = patch_matrix(latent, patch)?;
    let feats = proj.apply(&rows)?;
    Ok(ModalityBlock::new(ModalityTag::Video, feats, coords))
}

/// Inverse of [`patchify_video`]: project tokens back to patch width and
/// reassemble the latent grid.
pub fn unpatchify_video(
    tokens: &Tensor,
    coords: &[[i64; 3]],
    patch: (usize, usize, usize),
    dims: (usize, usize, usize, usize),
    proj_out: &Affine,
) -> Result<LatentGrid> {
    let rows = proj_out.apply(tokens)?;
    grid_from_patch_matrix(&rows, coords, patch, dims)
}

/// Encode a reference image (a 1-frame latent) as video-patch tokens pinned
/// at τ = −1 so they never collide with a video frame position.
pub fn ref_image_block(
    latent: &LatentGrid,
    patch: (usize, usize, usize),
    proj: &Affine,
) -> Result<ModalityBlock> {
    let block = patchify_video(latent, patch, proj)?;
    let pos = block.pos.iter().map(|_| [-1i64, 0, 0]).collect();
    Ok(ModalityBlock::new(ModalityTag::RefImage, block.feats, pos))
}

/// Embedding-table lookup; an empty id list is the unconditional branch.
pub fn embed_text(ids: &[usize], table: &Tensor) -> Result<ModalityBlock> {
    let (vocab, d) = (table.rows(), table.cols());
    let mut data = Vec::with_capacity(ids.len() * d);
    let mut pos = Vec::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(CoreError::Vocabulary { id, vocab });
        }
        data.extend_from_slice(table.row(id));
        pos.push([i as i64, 0, 0]);
    }
    let feats = Tensor::from_vec(&[ids.len(), d], data)?;
    Ok(ModalityBlock::new(ModalityTag::Text, feats, pos))
}

/// One token per audio latent frame, at coords `(τ, 0, 0)`.
pub fn embed_audio(a: &AudioLatent, proj: &Affine) -> Result<ModalityBlock> {
    let feats = proj.apply(a.frames())?;
    let pos = (0..a.n_frames()).map(|i| [i as i64, 0, 0]).collect();
    Ok(ModalityBlock::new(ModalityTag::Audio, feats, pos))
}

/// Concatenate the four modality blocks in the fixed order
/// Text | RefImage | Video | Audio. Any block may be empty.
pub fn pack_sequence(
    text: &ModalityBlock,
    ref_image: &ModalityBlock,
    video: &ModalityBlock,
    audio: &ModalityBlock,
) -> Result<TokenSequence> {
    let blocks = [text, ref_image, video, audio];
    for (block, expected) in blocks.iter().zip(ModalityTag::ALL) {
        assert_eq!(block.tag, expected, "blocks must be passed in packing order");
    }
    let d_model = text.feats.cols();
    let n: usize = blocks.iter().map(|b| b.len()).sum();
    let mut data = Vec::with_capacity(n * d_model);
    let mut tags = Vec::with_capacity(n);
    let mut pos = Vec::with_capacity(n);
    for block in blocks {
        if block.feats.cols() != d_model {
            return Err(CoreError::Packing {
                block: block.tag.name(),
                expected: d_model,
                found: block.feats.cols(),
            });
        }
        data.extend_from_slice(block.feats.data());
        tags.extend(std::iter::repeat(block.tag).take(block.len()));
        pos.extend_from_slice(&block.pos);
    }
    Ok(TokenSequence {
        feats: Tensor::from_vec(&[n, d_model], data)?,
        tags,
        pos,
    })
}

/// Extract one modality's sub-block (features + coords), order preserved.
pub fn unpack_modality(seq: &TokenSequence, tag: ModalityTag) -> (Tensor, Vec<[i64; 3]>) {
    let range = seq.block_range(tag);
    let d = seq.d_model();
    let feats = Tensor::from_vec(
        &[range.len(), d],
        seq.feats.data()[range.start * d..range.end * d].to_vec(),
    )
    .expect("block slice shape");
    (feats, seq.pos[range.clone()].to_vec())
}

/// Per-token rotation table for rotary positions: `cos`/`sin` of shape
/// `[n, d_head/2]`, shared across heads.
///
/// The head's rotation pairs are partitioned among the three coordinate
/// axes by `axis_split` (τ pairs first, then y, then x). Within an axis
/// with `n_a` pairs, pair `j` rotates by `pos_axis / 10000^(j/n_a)`. Tokens
/// whose y and x coords are zero (text, audio, reference image) therefore
/// receive non-identity rotations only on the τ pairs.
#[derive(Debug, Clone)]
pub struct RopeTable {
    pub cos: Tensor,
    pub sin: Tensor,
}

pub fn rope_table(
    seq: &TokenSequence,
    d_head: usize,
    axis_split: (usize, usize, usize),
) -> Result<RopeTable> {
    if d_head % 2 != 0 {
        return Err(CoreError::Config(format!("d_head {d_head} must be even")));
    }
    let pairs = d_head / 2;
    let (st, sy, sx) = axis_split;
    if st + sy + sx != pairs {
        return Err(CoreError::Config(format!(
            "axis_split {axis_split:?} must sum to d_head/2 = {pairs}"
        )));
    }
    let n = seq.len();
    let mut cos = Tensor::zeros(&[n, pairs]);
    let mut sin = Tensor::zeros(&[n, pairs]);
    for i in 0..n {
        let p = seq.pos[i];
        let mut col = 0;
        for (axis, &n_axis) in [st, sy, sx].iter().enumerate() {
            for j in 0..n_axis {
                let freq = 10000f64.powf(-(j as f64) / n_axis as f64);
                let theta = p[axis] as f64 * freq;
                cos.data_mut()[i * pairs + col] = theta.cos() as f32;
                sin.data_mut()[i * pairs + col] = theta.sin() as f32;
                col += 1;
            }
        }
    }
    Ok(RopeTable { cos, sin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_noise;
    use crate::tape::rotate_pairs_raw;

    fn random_grid(t: usize, h: usize, w: usize, c: usize, seed: u64) -> LatentGrid {
        LatentGrid::new(t, h, w, c, gaussian_noise(&[t, h, w, c], seed)).unwrap()
    }

    #[test]
    fn patchify_unit_patch_is_cell_enumeration() {
        let g = random_grid(2, 2, 2, 3, 1);
        let block = patchify_video(&g, (1, 1, 1), &Affine::identity(3)).unwrap();
        assert_eq!(block.len(), 8);
        // row-major coordinate order, token i = latent cell i
        let mut i = 0;
        for t in 0..2i64 {
            for y in 0..2i64 {
                for x in 0..2i64 {
                    assert_eq!(block.pos[i], [t, y, x]);
                    for ch in 0..3 {
                        assert_eq!(
                            block.feats.at2(i, ch),
                            g.get(t as usize, y as usize, x as usize, ch)
                        );
                    }
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn patchify_full_extent_patch_is_one_token() {
        let g = random_grid(2, 2, 2, 3, 2);
        let block = patchify_video(&g, (2, 2, 2), &Affine::identity(24)).unwrap();
        assert_eq!(block.len(), 1);
        assert_eq!(block.pos[0], [0, 0, 0]);
        assert_eq!(block.feats.data(), g.data());
    }

    #[test]
    fn patchify_reports_non_divisible_axis() {
        let g = random_grid(3, 2, 2, 1, 3);
        let err = patch_matrix(&g, (2, 1, 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("time"), "{msg}");
        let err = patch_matrix(&g, (1, 2, 3)).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn unpatchify_round_trips_bitwise() {
        let g = random_grid(2, 4, 4, 3, 4);
        for patch in [(1, 1, 1), (1, 2, 2), (2, 4, 4), (2, 2, 1)] {
            let d = patch.0 * patch.1 * patch.2 * 3;
            let id = Affine::identity(d);
            let block = patchify_video(&g, patch, &id).unwrap();
            let back =
                unpatchify_video(&block.feats, &block.pos, patch, (2, 4, 4, 3), &id).unwrap();
            assert_eq!(back.data(), g.data(), "patch {patch:?}");
        }
    }

    #[test]
    fn unpatchify_ignores_token_order_when_coords_are_kept() {
        let g = random_grid(2, 2, 2, 2, 5);
        let (rows, coords) = patch_matrix(&g, (1, 1, 1)).unwrap();
        // reverse both rows and coords
        let n = rows.rows();
        let d = rows.cols();
        let mut rev = Vec::with_capacity(n * d);
        for i in (0..n).rev() {
            rev.extend_from_slice(rows.row(i));
        }
        let rev_rows = Tensor::from_vec(&[n, d], rev).unwrap();
        let rev_coords: Vec<_> = coords.iter().rev().copied().collect();
        let back = grid_from_patch_matrix(&rev_rows, &rev_coords, (1, 1, 1), (2, 2, 2, 2)).unwrap();
        assert_eq!(back.data(), g.data());
    }

    #[test]
    fn unpatchify_rejects_duplicate_and_missing_coords() {
        let g = random_grid(2, 2, 2, 1, 6);
        let (rows, mut coords) = patch_matrix(&g, (1, 1, 1)).unwrap();
        coords[1] = coords[0]; // duplicate (and a hole where [1] was)
        let err = grid_from_patch_matrix(&rows, &coords, (1, 1, 1), (2, 2, 2, 1)).unwrap_err();
        assert!(matches!(err, CoreError::Coverage(_)), "{err}");
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn embed_text_rows_and_errors() {
        let table = gaussian_noise(&[8, 4], 7);
        let empty = embed_text(&[], &table).unwrap();
        assert_eq!(empty.len(), 0);
        assert_eq!(empty.feats.shape(), [0, 4]);

        let one = embed_text(&[5], &table).unwrap();
        assert_eq!(one.feats.row(0), table.row(5));
        assert_eq!(one.pos, vec![[0, 0, 0]]);

        let rep = embed_text(&[3, 3], &table).unwrap();
        assert_eq!(rep.feats.row(0), rep.feats.row(1));

        let err = embed_text(&[8], &table).unwrap_err();
        assert!(matches!(err, CoreError::Vocabulary { id: 8, vocab: 8 }));
    }

    #[test]
    fn embed_audio_enumerates_frames() {
        let a = AudioLatent::new(gaussian_noise(&[7, 3], 8)).unwrap();
        let block = embed_audio(&a, &Affine::identity(3)).unwrap();
        assert_eq!(block.len(), 7);
        assert_eq!(block.feats.data(), a.frames().data());
        for (i, p) in block.pos.iter().enumerate() {
            assert_eq!(*p, [i as i64, 0, 0]);
        }

        let single = AudioLatent::new(gaussian_noise(&[1, 3], 9)).unwrap();
        assert_eq!(embed_audio(&single, &Affine::identity(3)).unwrap().len(), 1);
    }

    #[test]
    fn pack_counts_and_contiguity() {
        let d = 6;
        let text = ModalityBlock::new(
            ModalityTag::Text,
            gaussian_noise(&[2, d], 10),
            vec![[0, 0, 0], [1, 0, 0]],
        );
        let refi = ModalityBlock::new(
            ModalityTag::RefImage,
            gaussian_noise(&[1, d], 11),
            vec![[-1, 0, 0]],
        );
        let video = ModalityBlock::new(
            ModalityTag::Video,
            gaussian_noise(&[8, d], 12),
            (0..8).map(|i| [i / 4, (i / 2) % 2, i % 2]).collect(),
        );
        let audio = ModalityBlock::new(
            ModalityTag::Audio,
            gaussian_noise(&[4, d], 13),
            (0..4).map(|i| [i, 0, 0]).collect(),
        );
        let seq = pack_sequence(&text, &refi, &video, &audio).unwrap();
        assert_eq!(seq.len(), 15);
        assert_eq!(seq.block_range(ModalityTag::Text), 0..2);
        assert_eq!(seq.block_range(ModalityTag::RefImage), 2..3);
        assert_eq!(seq.block_range(ModalityTag::Video), 3..11);
        assert_eq!(seq.block_range(ModalityTag::Audio), 11..15);
        // contiguous runs in fixed order
        let mut last = None;
        let mut switches = 0;
        for &t in seq.tags() {
            if last != Some(t) {
                switches += 1;
                last = Some(t);
            }
        }
        assert_eq!(switches, 4);

        // empty text = unconditional layout; other blocks unchanged
        let uncond = pack_sequence(
            &ModalityBlock::empty(ModalityTag::Text, d),
            &refi,
            &video,
            &audio,
        )
        .unwrap();
        assert_eq!(uncond.len(), 13);
        let (v_feats, v_pos) = unpack_modality(&uncond, ModalityTag::Video);
        assert_eq!(v_feats.data(), video.feats.data());
        assert_eq!(v_pos, video.pos);
    }

    #[test]
    fn pack_single_video_token() {
        let d = 4;
        let video = ModalityBlock::new(
            ModalityTag::Video,
            gaussian_noise(&[1, d], 14),
            vec![[0, 0, 0]],
        );
        let seq = pack_sequence(
            &ModalityBlock::empty(ModalityTag::Text, d),
            &ModalityBlock::empty(ModalityTag::RefImage, d),
            &video,
            &ModalityBlock::empty(ModalityTag::Audio, d),
        )
        .unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.tags(), &[ModalityTag::Video]);
    }

    #[test]
    fn pack_rejects_width_mismatch() {
        let text = ModalityBlock::empty(ModalityTag::Text, 4);
        let refi = ModalityBlock::empty(ModalityTag::RefImage, 4);
        let video = ModalityBlock::new(
            ModalityTag::Video,
            gaussian_noise(&[2, 6], 15),
            vec![[0, 0, 0], [0, 0, 1]],
        );
        let audio = ModalityBlock::empty(ModalityTag::Audio, 4);
        let err = pack_sequence(&text, &refi, &video, &audio).unwrap_err();
        assert!(matches!(
            err,
            CoreError::Packing {
                block: "video",
                expected: 4,
                found: 6
            }
        ));
    }

    #[test]
    fn unpack_is_inverse_of_pack() {
        let d = 5;
        let video = ModalityBlock::new(
            ModalityTag::Video,
            gaussian_noise(&[3, d], 16),
            vec![[0, 0, 0], [0, 0, 1], [0, 1, 0]],
        );
        let audio = ModalityBlock::new(
            ModalityTag::Audio,
            gaussian_noise(&[2, d], 17),
            vec![[0, 0, 0], [1, 0, 0]],
        );
        let text = ModalityBlock::new(ModalityTag::Text, gaussian_noise(&[1, d], 18), vec![[0, 0, 0]]);
        let refi = ModalityBlock::empty(ModalityTag::RefImage, d);
        let seq = pack_sequence(&text, &refi, &video, &audio).unwrap();

        let (vf, vp) = unpack_modality(&seq, ModalityTag::Video);
        assert_eq!(vf.data(), video.feats.data());
        assert_eq!(vp, video.pos);
        let (rf, rp) = unpack_modality(&seq, ModalityTag::RefImage);
        assert_eq!(rf.rows(), 0);
        assert!(rp.is_empty());

        // unpack all four and re-pack: identical sequence
        let rebuilt = pack_sequence(
            &ModalityBlock::new(
                ModalityTag::Text,
                unpack_modality(&seq, ModalityTag::Text).0,
                unpack_modality(&seq, ModalityTag::Text).1,
            ),
            &ModalityBlock::empty(ModalityTag::RefImage, d),
            &ModalityBlock::new(ModalityTag::Video, vf, vp),
            &ModalityBlock::new(
                ModalityTag::Audio,
                unpack_modality(&seq, ModalityTag::Audio).0,
                unpack_modality(&seq, ModalityTag::Audio).1,
            ),
        )
        .unwrap();
        assert_eq!(rebuilt.feats().data(), seq.feats().data());
        assert_eq!(rebuilt.tags(), seq.tags());
        assert_eq!(rebuilt.pos(), seq.pos());
    }

    fn seq_with_pos(pos: Vec<[i64; 3]>, d: usize) -> TokenSequence {
        let video = ModalityBlock::new(
            ModalityTag::Video,
            Tensor::zeros(&[pos.len(), d]),
            pos,
        );
        pack_sequence(
            &ModalityBlock::empty(ModalityTag::Text, d),
            &ModalityBlock::empty(ModalityTag::RefImage, d),
            &video,
            &ModalityBlock::empty(ModalityTag::Audio, d),
        )
        .unwrap()
    }

    #[test]
    fn rope_origin_is_identity_and_equal_coords_share_rows() {
        let seq = seq_with_pos(vec![[0, 0, 0], [2, 1, 3], [2, 1, 3]], 8);
        let table = rope_table(&seq, 8, (2, 1, 1)).unwrap();
        for j in 0..4 {
            assert_eq!(table.cos.at2(0, j), 1.0);
            assert_eq!(table.sin.at2(0, j), 0.0);
        }
        assert_eq!(table.cos.row(1), table.cos.row(2));
        assert_eq!(table.sin.row(1), table.sin.row(2));
    }

    #[test]
    fn rope_rejects_bad_axis_split() {
        let seq = seq_with_pos(vec![[0, 0, 0]], 8);
        let err = rope_table(&seq, 8, (2, 1, 2)).unwrap_err();
        assert!(matches!(err, CoreError::Config(_)));
        let err = rope_table(&seq, 7, (2, 1, 1)).unwrap_err();
        assert!(matches!(err, CoreError::Config(_)));
    }

    #[test]
    fn rope_rotations_preserve_norm() {
        let seq = seq_with_pos(
            vec![[0, 0, 0], [3, 2, 1], [-1, 0, 0], [7, 7, 7]],
            8,
        );
        let table = rope_table(&seq, 8, (2, 1, 1)).unwrap();
        let x = gaussian_noise(&[4, 8], 19);
        let y = rotate_pairs_raw(&x, &table.cos, &table.sin, 1, false);
        for i in 0..4 {
            let nx: f32 = x.row(i).iter().map(|v| v * v).sum();
            let ny: f32 = y.row(i).iter().map(|v| v * v).sum();
            assert!((nx - ny).abs() <= 1e-5 * nx.max(1.0));
        }
    }

    #[test]
    fn rope_logits_depend_only_on_coordinate_differences() {
        let d_head = 8;
        let q = gaussian_noise(&[1, d_head], 20);
        let k = gaussian_noise(&[1, d_head], 21);
        let logit = |p_q: [i64; 3], p_k: [i64; 3], q: &Tensor, k: &Tensor| -> f64 {
            let seq = seq_with_pos(vec![p_q, p_k], d_head);
            let table = rope_table(&seq, d_head, (2, 1, 1)).unwrap();
            let both = Tensor::from_vec(
                &[2, d_head],
                q.data().iter().chain(k.data()).copied().collect(),
            )
            .unwrap();
            let rot = rotate_pairs_raw(&both, &table.cos, &table.sin, 1, false);
            (0..d_head)
                .map(|j| rot.at2(0, j) as f64 * rot.at2(1, j) as f64)
                .sum()
        };
        // same (Δτ, Δy, Δx), shifted absolute positions, all axes at once
        let a = logit([1, 2, 0], [3, 1, 2], &q, &k);
        let b = logit([4, 5, 3], [6, 4, 5], &q, &k);
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        // τ-only shift (text-style tokens)
        let c = logit([0, 0, 0], [5, 0, 0], &q, &k);
        let d = logit([10, 0, 0], [15, 0, 0], &q, &k);
        assert!((c - d).abs() < 1e-4, "{c} vs {d}");
    }
}
