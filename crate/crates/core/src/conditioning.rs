//! Condition assembly: LR channel concatenation, visual-reference token
//! concatenation with separated rotary index ranges, toy text encoding and
//! micro conditions.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{bilinear_resize, Codec, LatentVideo, VideoTensor};
use crate::degrade::Task;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::numerics::Tensor;

/// Text sequence length after truncation/padding.
pub const TEXT_TOKENS: usize = 32;
/// Probability that a training prompt is replaced by the null prompt.
pub const TEXT_DROPOUT: f64 = 0.1;
const TEXT_VOCAB: usize = 2048;
const NULL_ROW: usize = 0;
const PAD_ROW: usize = 1;

/// Frame-index allocation: noisy tokens own `[0, f)`, each visual reference
/// owns its own disjoint range after that.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RopePlan {
    frames: usize,
    ref_ranges: Vec<Range<usize>>,
}

impl RopePlan {
    /// Validates an explicit allocation.
    pub fn from_ranges(frames: usize, ref_ranges: Vec<Range<usize>>) -> Result<Self> {
        if frames == 0 {
            return Err(contract_err!("rope plan needs at least one noisy frame"));
        }
        for (i, r) in ref_ranges.iter().enumerate() {
            if r.is_empty() {
                return Err(contract_err!("reference {i} has an empty range"));
            }
            if r.start < frames {
                return Err(contract_err!("reference {i} range {r:?} overlaps noisy [0, {frames})"));
            }
            for (j, other) in ref_ranges.iter().enumerate().skip(i + 1) {
                if r.start < other.end && other.start < r.end {
                    return Err(contract_err!("reference ranges {i} {r:?} and {j} {other:?} overlap"));
                }
            }
        }
        Ok(Self { frames, ref_ranges })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn noisy_range(&self) -> Range<usize> {
        0..self.frames
    }

    pub fn ref_ranges(&self) -> &[Range<usize>] {
        &self.ref_ranges
    }
}

/// Contiguous allocation: reference `i` starts at `f + Σ_{j<i} k_j`.
pub fn build_rope_plan(frames: usize, ref_lengths: &[usize]) -> Result<RopePlan> {
    if frames == 0 {
        return Err(contract_err!("rope plan needs at least one noisy frame"));
    }
    let mut next = frames;
    let mut ranges = Vec::with_capacity(ref_lengths.len());
    for (i, &k) in ref_lengths.iter().enumerate() {
        if k == 0 {
            return Err(contract_err!("reference {i} has zero length"));
        }
        ranges.push(next..next + k);
        next += k;
    }
    RopePlan::from_ranges(frames, ranges)
}

/// Stacks `lr` after `noisy` on the channel axis.
pub fn channel_concat(noisy: &LatentVideo, lr: &LatentVideo) -> Result<LatentVideo> {
    if noisy.frames() != lr.frames() || noisy.height() != lr.height() || noisy.width() != lr.width() {
        return Err(shape_err!(
            "channel concat of {:?} and {:?}; was the LR latent upsampled?",
            noisy.dims(),
            lr.dims()
        ));
    }
    let (a, b) = (noisy.frame_len(), lr.frame_len());
    let mut data = Vec::with_capacity(noisy.data().len() + lr.data().len());
    for f in 0..noisy.frames() {
        data.extend_from_slice(&noisy.data()[f * a..(f + 1) * a]);
        data.extend_from_slice(&lr.data()[f * b..(f + 1) * b]);
    }
    LatentVideo::new(noisy.frames(), noisy.channels() + lr.channels(), noisy.height(), noisy.width(), data)
}

/// Channels `[start, start + count)` of every frame.
pub fn channel_slice(x: &LatentVideo, start: usize, count: usize) -> Result<LatentVideo> {
    if count == 0 || start + count > x.channels() {
        return Err(shape_err!("channels [{start}, {}) of {}", start + count, x.channels()));
    }
    let plane = x.height() * x.width();
    let mut data = Vec::with_capacity(x.frames() * count * plane);
    for f in 0..x.frames() {
        let frame = x.frame_data(f);
        data.extend_from_slice(&frame[start * plane..(start + count) * plane]);
    }
    LatentVideo::new(x.frames(), count, x.height(), x.width(), data)
}

/// Token-major view of a latent: `[frames·h·w, channels]`, tokens ordered
/// frame, row, column.
pub fn tokens_of(x: &LatentVideo) -> Tensor<f32> {
    let [f, c, h, w] = x.dims();
    let plane = h * w;
    let mut data = Vec::with_capacity(f * c * plane);
    for fr in 0..f {
        let frame = x.frame_data(fr);
        for p in 0..plane {
            for ch in 0..c {
                data.push(frame[ch * plane + p]);
            }
        }
    }
    Tensor::new(&[f * plane, c], data).expect("token dims")
}

/// Inverse of [`tokens_of`].
pub fn latent_of_tokens(tokens: &Tensor<f32>, frames: usize, height: usize, width: usize) -> Result<LatentVideo> {
    let plane = height * width;
    let c = match tokens.dims() {
        [n, c] if *n == frames * plane => *c,
        d => return Err(shape_err!("{d:?} tokens for {frames}x{height}x{width}")),
    };
    let src = tokens.data();
    let mut data = vec![0f32; frames * c * plane];
    for fr in 0..frames {
        for p in 0..plane {
            for ch in 0..c {
                data[(fr * c + ch) * plane + p] = src[(fr * plane + p) * c + ch];
            }
        }
    }
    LatentVideo::new(frames, c, height, width, data)
}

/// What a span of the unified sequence holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Noisy,
    /// LR latent entering as tokens (full token-concat ablation only).
    LowRes,
    IdImage(usize),
    RefVideo,
}

/// A labelled span of the unified sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    /// First token index.
    pub start: usize,
    /// Token count.
    pub len: usize,
    /// Rotary frame indices of the span's frames.
    pub frame_indices: Range<usize>,
}

/// Span bookkeeping for a unified sequence of per-frame token grids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    grid: (usize, usize),
    plan: RopePlan,
    segments: Vec<Segment>,
}

impl SequenceLayout {
    /// `refs` lists each reference span's kind and frame count in plan order.
    pub fn new(grid: (usize, usize), plan: RopePlan, refs: &[(SegmentKind, usize)]) -> Result<Self> {
        if refs.len() != plan.ref_ranges().len() {
            return Err(contract_err!("{} references for a plan with {} ranges", refs.len(), plan.ref_ranges().len()));
        }
        let per_frame = grid.0 * grid.1;
        let mut segments = vec![Segment {
            kind: SegmentKind::Noisy,
            start: 0,
            len: plan.frames() * per_frame,
            frame_indices: plan.noisy_range(),
        }];
        let mut next = plan.frames() * per_frame;
        for ((kind, frames), range) in refs.iter().zip(plan.ref_ranges()) {
            if range.len() != *frames {
                return Err(contract_err!("{kind:?} has {frames} frames but plan range {range:?}"));
            }
            segments.push(Segment { kind: *kind, start: next, len: frames * per_frame, frame_indices: range.clone() });
            next += frames * per_frame;
        }
        Ok(Self { grid, plan, segments })
    }

    pub fn plan(&self) -> &RopePlan {
        &self.plan
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn noisy_len(&self) -> usize {
        self.segments[0].len
    }

    /// Number of per-frame grids in the whole sequence.
    pub fn total_frames(&self) -> usize {
        self.len() / self.tokens_per_frame()
    }

    /// `(frame, row, col)` rotary position of every token.
    pub fn positions(&self) -> Vec<[usize; 3]> {
        self.positions_with_offset(0)
    }

    /// Positions with `delta` added to every frame index.
    pub fn positions_with_offset(&self, delta: usize) -> Vec<[usize; 3]> {
        let (h, w) = self.grid;
        let mut out = Vec::with_capacity(self.len());
        for seg in &self.segments {
            for fi in seg.frame_indices.clone() {
                for r in 0..h {
                    for c in 0..w {
                        out.push([fi + delta, r, c]);
                    }
                }
            }
        }
        out
    }
}

/// Conditions for one generation: text, visual references, LR latent and
/// micro conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// `[TEXT_TOKENS, text_dim]`; may be the null-prompt embedding.
    pub text: Tensor<f32>,
    /// Null-prompt embedding used by the text-free guidance branch.
    pub null_text: Tensor<f32>,
    /// Single-frame latents.
    pub id_images: Vec<LatentVideo>,
    pub ref_video: Option<LatentVideo>,
    /// Upsampled LR latent, pixel-aligned with the target latent.
    pub lr_latent: Option<LatentVideo>,
    pub noise_aug_step: u32,
    pub fps: f32,
    pub aspect: f32,
}

impl ConditionBundle {
    pub fn text_only(text: Tensor<f32>, null_text: Tensor<f32>) -> Self {
        Self {
            text,
            null_text,
            id_images: Vec::new(),
            ref_video: None,
            lr_latent: None,
            noise_aug_step: 0,
            fps: 8.0,
            aspect: 1.0,
        }
    }

    pub fn has_references(&self) -> bool {
        !self.id_images.is_empty() || self.ref_video.is_some()
    }

    /// Frame counts of the visual references in sequence order.
    pub fn reference_lengths(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.id_images.iter().map(|i| i.frames()).collect();
        out.extend(self.ref_video.as_ref().map(|v| v.frames()));
        out
    }

    /// Visual references in sequence order with their span kinds.
    pub fn references(&self) -> Vec<(SegmentKind, &LatentVideo)> {
        let mut out: Vec<_> =
            self.id_images.iter().enumerate().map(|(i, img)| (SegmentKind::IdImage(i), img)).collect();
        out.extend(self.ref_video.as_ref().map(|v| (SegmentKind::RefVideo, v)));
        out
    }

    /// The text-free branch: prompt replaced by the null embedding.
    pub fn without_text(&self) -> Self {
        Self { text: self.null_text.clone(), ..self.clone() }
    }

    /// The reference-free branch: no reference spans at all.
    pub fn without_references(&self) -> Self {
        Self { id_images: Vec::new(), ref_video: None, ..self.clone() }
    }

    /// Checks the structural invariants against a target latent grid.
    pub fn validate(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        for (i, img) in self.id_images.iter().enumerate() {
            if img.frames() != 1 {
                return Err(contract_err!("id image {i} has {} frames", img.frames()));
            }
            if img.height() != height || img.width() != width {
                return Err(shape_err!("id image {i} grid {}x{} vs {height}x{width}", img.height(), img.width()));
            }
        }
        if let Some(v) = &self.ref_video {
            if v.height() != height || v.width() != width {
                return Err(shape_err!("reference video grid {}x{} vs {height}x{width}", v.height(), v.width()));
            }
        }
        if let Some(lr) = &self.lr_latent {
            if lr.frames() != frames || lr.height() != height || lr.width() != width {
                return Err(shape_err!("lr latent {:?} vs target {frames}x{height}x{width}", lr.dims()));
            }
        }
        Ok(())
    }
}

/// Unified sequence of raw latent tokens with span labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor<f32>,
    pub layout: SequenceLayout,
}

/// Concatenates noisy tokens with the bundle's references (id images in list
/// order, then the reference video) under `plan`.
pub fn assemble_sequence(noisy: &LatentVideo, bundle: &ConditionBundle, plan: &RopePlan) -> Result<TokenSequence> {
    if plan.frames() != noisy.frames() {
        return Err(contract_err!("plan for {} frames, noisy has {}", plan.frames(), noisy.frames()));
    }
    let refs = bundle.references();
    let kinds: Vec<(SegmentKind, usize)> = refs.iter().map(|(k, v)| (*k, v.frames())).collect();
    let layout = SequenceLayout::new((noisy.height(), noisy.width()), plan.clone(), &kinds)?;
    let noisy_tokens = tokens_of(noisy);
    let width = noisy_tokens.dims()[1];
    let mut data = noisy_tokens.into_data();
    for (kind, v) in &refs {
        if v.channels() != width || v.height() != noisy.height() || v.width() != noisy.width() {
            return Err(shape_err!("{kind:?} latent {:?} does not tokenize like {:?}", v.dims(), noisy.dims()));
        }
        data.extend(tokens_of(v).into_data());
    }
    let tokens = Tensor::new(&[layout.len(), width], data)?;
    Ok(TokenSequence { tokens, layout })
}

/// Drops every reference token, keeping the noisy span.
pub fn truncate(seq: &TokenSequence) -> Result<Tensor<f32>> {
    let width = seq.tokens.dims()[1];
    let n = seq.layout.noisy_len();
    Tensor::new(&[n, width], seq.tokens.data()[..n * width].to_vec())
}

/// Deterministic toy text embedder: whitespace tokens hashed into a seeded
/// table. Row 0 is the null prompt, row 1 is padding.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    seed: u64,
    dim: usize,
    table: Vec<f32>,
}

impl TextEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..TEXT_VOCAB * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { seed, dim, table }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, r: usize) -> &[f32] {
        &self.table[r * self.dim..(r + 1) * self.dim]
    }

    /// The null-prompt embedding.
    pub fn null(&self) -> Tensor<f32> {
        self.from_rows(&[NULL_ROW; TEXT_TOKENS])
    }

    fn from_rows(&self, rows: &[usize]) -> Tensor<f32> {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Tensor::new(&[TEXT_TOKENS, self.dim], data).expect("text dims")
    }

    /// Encodes `prompt`; `dropout` (or an empty prompt) yields the null
    /// embedding.
    pub fn encode(&self, prompt: &str, dropout: bool) -> Tensor<f32> {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        if dropout || words.is_empty() {
            return self.null();
        }
        let mut rows: Vec<usize> = words.iter().take(TEXT_TOKENS).map(|w| 2 + (fnv1a(w.as_bytes()) as usize) % (TEXT_VOCAB - 2)).collect();
        rows.resize(TEXT_TOKENS, PAD_ROW);
        self.from_rows(&rows)
    }
}

/// One Bernoulli draw of the null-prompt dropout.
pub fn draw_text_dropout<R: Rng>(rng: &mut R) -> bool {
    rng.random_bool(TEXT_DROPOUT)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Resizes a pixel ID image to the target frame size and encodes it.
pub fn encode_id_image(codec: &Codec, image: &VideoTensor, height: usize, width: usize) -> Result<LatentVideo> {
    if image.frames() != 1 {
        return Err(contract_err!("id image must have one frame, got {}", image.frames()));
    }
    codec.encode(&bilinear_resize(image, height, width)?)
}

/// Which injection path the model uses for each condition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// LR by channel concatenation, visual references by token concatenation.
    #[default]
    Unified,
    /// Everything stacked on channels.
    FullChannelConcat,
    /// Everything, including the LR latent, as tokens.
    FullTokenConcat,
}

/// Generation request read from a JSON file; relative paths resolve against
/// the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub task: Task,
    pub prompt: String,
    #[serde(default)]
    pub lr_video: Option<PathBuf>,
    #[serde(default)]
    pub id_images: Vec<PathBuf>,
    #[serde(default)]
    pub ref_video: Option<PathBuf>,
}

impl TaskRequest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        let mut req: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        req.lr_video.iter_mut().for_each(fix);
        req.id_images.iter_mut().for_each(fix);
        req.ref_video.iter_mut().for_each(fix);
        Ok(req)
    }

    /// Checks that the references the task needs are present.
    pub fn validate(&self) -> Result<()> {
        match self.task {
            Task::MultiId if self.id_images.is_empty() => Err(contract_err!("multi_id request without id images")),
            Task::Edit if self.ref_video.is_none() => Err(contract_err!("edit request without a reference video")),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn latent(frames: usize, seed: f32) -> LatentVideo {
        LatentVideo::from_fn(frames, 48, 2, 2, |f, c, y, x| (seed + f as f32 * 0.3 + c as f32 * 0.01 + y as f32 - x as f32).sin())
    }

    #[test]
    fn rope_plan_examples() {
        let p = build_rope_plan(21, &[1, 1]).unwrap();
        assert_eq!(p.noisy_range(), 0..21);
        assert_eq!(p.ref_ranges(), &[21..22, 22..23]);

        let p = build_rope_plan(21, &[]).unwrap();
        assert!(p.ref_ranges().is_empty());

        let p = build_rope_plan(21, &[21]).unwrap();
        assert_eq!(p.ref_ranges(), &[21..42]);

        assert!(build_rope_plan(21, &[1, 0]).is_err());
        assert!(build_rope_plan(0, &[1]).is_err());
    }

    #[test]
    fn explicit_plans_are_validated() {
        assert!(RopePlan::from_ranges(4, vec![3..5]).is_err());
        assert!(RopePlan::from_ranges(4, vec![4..6, 5..7]).is_err());
        assert!(RopePlan::from_ranges(4, vec![5..6, 4..5]).is_ok());
    }

    #[test]
    fn channel_concat_examples() {
        let a = LatentVideo::full(21, 48, 4, 4, 1.0);
        let b = LatentVideo::full(21, 48, 4, 4, 2.0);
        let c = channel_concat(&a, &b).unwrap();
        assert_eq!(c.dims(), [21, 96, 4, 4]);
        assert_eq!(channel_slice(&c, 0, 48).unwrap(), a);
        assert_eq!(channel_slice(&c, 48, 48).unwrap(), b);

        let narrow = LatentVideo::zeros(21, 48, 4, 3);
        assert!(matches!(channel_concat(&a, &narrow), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn assemble_counts_tokens() {
        let enc = TextEncoder::new(1, 8);
        let mut b = ConditionBundle::text_only(enc.encode("a cat", false), enc.null());
        let noisy = latent(4, 0.0);
        let plan = build_rope_plan(4, &[]).unwrap();
        let seq = assemble_sequence(&noisy, &b, &plan).unwrap();
        assert_eq!(seq.layout.segments().len(), 1);
        assert_eq!(seq.tokens, tokens_of(&noisy));

        b.id_images = vec![latent(1, 1.0), latent(1, 2.0)];
        let plan = build_rope_plan(4, &b.reference_lengths()).unwrap();
        let seq = assemble_sequence(&noisy, &b, &plan).unwrap();
        assert_eq!(seq.tokens.dims()[0], 24);
        assert_eq!(truncate(&seq).unwrap(), tokens_of(&noisy));
    }

    #[test]
    fn assemble_rejects_plan_mismatch() {
        let enc = TextEncoder::new(1, 8);
        let mut b = ConditionBundle::text_only(enc.null(), enc.null());
        b.ref_video = Some(latent(3, 0.5));
        let plan = build_rope_plan(4, &[2]).unwrap();
        assert!(assemble_sequence(&latent(4, 0.0), &b, &plan).is_err());
    }

    #[test]
    fn text_encoder_is_deterministic_with_null_fallback() {
        let enc = TextEncoder::new(7, 16);
        assert_eq!(enc.encode("red circle moving left", false), enc.encode("red circle moving left", false));
        assert_ne!(enc.encode("red circle", false), enc.encode("blue circle", false));
        assert_eq!(enc.encode("", false), enc.null());
        assert_eq!(enc.encode("   ", false), enc.null());
        assert_eq!(enc.encode("anything", true), enc.null());
        assert_eq!(enc.encode("x", false).dims(), &[TEXT_TOKENS, 16]);
    }

    #[test]
    fn text_dropout_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hits = (0..10_000).filter(|_| draw_text_dropout(&mut rng)).count();
        let rate = hits as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&rate), "{rate}");
    }

    #[test]
    fn tokens_round_trip() {
        let x = latent(3, 0.2);
        let back = latent_of_tokens(&tokens_of(&x), 3, 2, 2).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn task_request_resolves_paths_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("req.json");
        std::fs::write(&path, r#"{"task": "edit", "prompt": "a red circle", "ref_video": "ref.umvt"}"#).unwrap();
        let req = TaskRequest::load(&path).unwrap();
        assert_eq!(req.ref_video.as_deref(), Some(dir.path().join("ref.umvt").as_path()));
        assert!(req.validate().is_ok());
        let multi = TaskRequest { task: Task::MultiId, ref_video: None, ..req };
        assert!(matches!(multi.validate(), Err(Error::Contract(_))));
        assert!(matches!(TaskRequest::load(&dir.path().join("absent.json")), Err(Error::Missing(_))));
    }

    proptest! {
        #[test]
        fn plans_are_disjoint(frames in 1usize..40, lens in proptest::collection::vec(1usize..30, 0..6)) {
            let p = build_rope_plan(frames, &lens).unwrap();
            prop_assert_eq!(p.noisy_range(), 0..frames);
            for (i, r) in p.ref_ranges().iter().enumerate() {
                prop_assert!(r.start >= frames);
                prop_assert_eq!(r.len(), lens[i]);
                for other in &p.ref_ranges()[i + 1..] {
                    prop_assert!(r.end <= other.start || other.end <= r.start);
                }
            }
        }

        #[test]
        fn assemble_truncate_identity(frames in 1usize..4, ids in 0usize..3, with_ref in any::<bool>(), seed in 0.0f32..10.0) {
            let enc = TextEncoder::new(1, 8);
            let mut b = ConditionBundle::text_only(enc.null(), enc.null());
            b.id_images = (0..ids).map(|i| latent(1, seed + i as f32)).collect();
            if with_ref { b.ref_video = Some(latent(frames, seed * 2.0)); }
            let noisy = latent(frames, seed);
            let plan = build_rope_plan(frames, &b.reference_lengths()).unwrap();
            let seq = assemble_sequence(&noisy, &b, &plan).unwrap();
            prop_assert_eq!(truncate(&seq).unwrap(), tokens_of(&noisy));
        }
    }
}
