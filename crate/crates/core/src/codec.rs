//! Pixel and latent video containers, the invertible toy latent codec, and
//! the decode → bilinear → encode upsampler.
//!
//! The codec is space-to-depth with patch `p` followed by a fixed orthonormal
//! channel mix, so `decode(encode(x)) == x` up to rounding. There is no
//! temporal compression: latent frame `i` is pixel frame `i`.

use std::fs;
use std::marker::PhantomData;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{umvt, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pixel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Latent;

/// A `[frames, channels, height, width]` f32 volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<K> {
    tensor: Tensor<f32>,
    kind: PhantomData<K>,
}

/// Pixel-space video, values in `[0, 1]`.
pub type VideoTensor = Volume<Pixel>;
/// Latent-space video produced by [`Codec::encode`].
pub type LatentVideo = Volume<Latent>;

impl<K> Volume<K> {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_tensor(Tensor::new(&[frames, channels, height, width], data)?)
    }

    pub fn from_tensor(tensor: Tensor<f32>) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(shape_err!("video volume needs rank 4, got {:?}", tensor.dims()));
        }
        Ok(Self { tensor, kind: PhantomData })
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self::full(frames, channels, height, width, 0.0)
    }

    pub fn full(frames: usize, channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { tensor: Tensor::full(&[frames, channels, height, width], value), kind: PhantomData }
    }

    pub fn from_fn(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let tensor = Tensor::from_fn(&[frames, channels, height, width], |i| {
            let x = i % width;
            let y = (i / width) % height;
            let c = (i / (width * height)) % channels;
            let fr = i / (width * height * channels);
            f(fr, c, y, x)
        });
        Self { tensor, kind: PhantomData }
    }

    pub fn frames(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[3]
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames(), self.channels(), self.height(), self.width()]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    pub fn data(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.tensor.data_mut()
    }

    fn offset(&self, f: usize, c: usize, y: usize, x: usize) -> usize {
        ((f * self.channels() + c) * self.height() + y) * self.width() + x
    }

    pub fn at(&self, f: usize, c: usize, y: usize, x: usize) -> f32 {
        self.tensor.data()[self.offset(f, c, y, x)]
    }

    pub fn set(&mut self, f: usize, c: usize, y: usize, x: usize, v: f32) {
        let o = self.offset(f, c, y, x);
        self.tensor.data_mut()[o] = v;
    }

    /// Number of values in one frame.
    pub fn frame_len(&self) -> usize {
        self.channels() * self.height() * self.width()
    }

    pub fn frame_data(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.tensor.data()[f * n..(f + 1) * n]
    }

    /// Frames `[start, start + count)`.
    pub fn frame_range(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.frames() {
            return Err(shape_err!("frames [{start}, {}) of {}", start + count, self.frames()));
        }
        let n = self.frame_len();
        let data = self.tensor.data()[start * n..(start + count) * n].to_vec();
        Self::new(count, self.channels(), self.height(), self.width(), data)
    }

    /// Frames picked by index, in the given order.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        let n = self.frame_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.frames() {
                return Err(shape_err!("frame {i} of {}", self.frames()));
            }
            data.extend_from_slice(self.frame_data(i));
        }
        Self::new(indices.len(), self.channels(), self.height(), self.width(), data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { tensor: self.tensor.map(f), kind: PhantomData }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        Ok(Self { tensor: self.tensor.zip_map(&other.tensor, f)?, kind: PhantomData })
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.tensor.max_abs_diff(&other.tensor)
    }
}

/// Boolean per-pixel mask, `[frames, height, width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    frames: usize,
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(frames: usize, height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != frames * height * width {
            return Err(shape_err!("mask {frames}x{height}x{width} with {} bits", bits.len()));
        }
        Ok(Self { frames, height, width, bits })
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: bool) -> Self {
        Self { frames, height, width, bits: vec![value; frames * height * width] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, f: usize, y: usize, x: usize) -> bool {
        self.bits[(f * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, f: usize, y: usize, x: usize, v: bool) {
        self.bits[(f * self.height + y) * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn inverted(&self) -> Self {
        Self { bits: self.bits.iter().map(|b| !b).collect(), ..self.clone() }
    }

    pub fn frame_range(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.frames {
            return Err(shape_err!("mask frames [{start}, {}) of {}", start + count, self.frames));
        }
        let n = self.height * self.width;
        Mask::new(count, self.height, self.width, self.bits[start * n..(start + count) * n].to_vec())
    }

    /// As a `[frames, 1, height, width]` tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[self.frames, 1, self.height, self.width], data).expect("mask dims")
    }

    /// Nonzero entries are set; accepts `[f, h, w]` or `[f, 1, h, w]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (f, h, w) = match t.dims() {
            [f, h, w] | [f, 1, h, w] => (*f, *h, *w),
            d => return Err(shape_err!("mask tensor dims {d:?}")),
        };
        Mask::new(f, h, w, t.data().iter().map(|&v| v != 0.0).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub patch_size: usize,
    pub mixing_matrix_seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { patch_size: 4, mixing_matrix_seed: 0x5eed_c0de }
    }
}

/// Invertible toy autoencoder.
#[derive(Clone, Debug)]
pub struct Codec {
    cfg: CodecConfig,
    /// Row-major `C×C` orthonormal matrix, `C = 3·p²`.
    mix: Vec<f64>,
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        if cfg.patch_size == 0 {
            return Err(Error::Config("patch_size must be at least 1".into()));
        }
        let c = 3 * cfg.patch_size * cfg.patch_size;
        let mix = orthonormal_matrix(c, cfg.mixing_matrix_seed);
        Ok(Self { cfg, mix })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn patch(&self) -> usize {
        self.cfg.patch_size
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.cfg.patch_size * self.cfg.patch_size
    }

    /// Row-major mixing matrix.
    pub fn mixing_matrix(&self) -> &[f64] {
        &self.mix
    }

    pub fn encode(&self, x: &VideoTensor) -> Result<LatentVideo> {
        let p = self.patch();
        let c = self.latent_channels();
        if x.channels() != 3 {
            return Err(shape_err!("encode expects 3 channels, got {}", x.channels()));
        }
        if x.height() % p != 0 || x.width() % p != 0 {
            return Err(shape_err!("{}x{} not divisible by patch {p}", x.height(), x.width()));
        }
        let (lh, lw) = (x.height() / p, x.width() / p);
        let mut out = LatentVideo::zeros(x.frames(), c, lh, lw);
        let mut v = vec![0f64; c];
        for f in 0..x.frames() {
            for i in 0..lh {
                for j in 0..lw {
                    for ch in 0..3 {
                        for dy in 0..p {
                            for dx in 0..p {
                                v[(ch * p + dy) * p + dx] = x.at(f, ch, i * p + dy, j * p + dx) as f64;
                            }
                        }
                    }
                    for r in 0..c {
                        let row = &self.mix[r * c..(r + 1) * c];
                        let z: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                        out.set(f, r, i, j, z as f32);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Exact inverse of [`Codec::encode`] without clamping.
    pub fn decode_raw(&self, z: &LatentVideo) -> Result<VideoTensor> {
        let p = self.patch();
        let c = self.latent_channels();
        if z.channels() != c {
            return Err(shape_err!("decode expects {c} channels, got {}", z.channels()));
        }
        let (lh, lw) = (z.height(), z.width());
        let mut out = VideoTensor::zeros(z.frames(), 3, lh * p, lw * p);
        let mut v = vec![0f64; c];
        for f in 0..z.frames() {
            for i in 0..lh {
                for j in 0..lw {
                    v.iter_mut().for_each(|x| *x = 0.0);
                    for r in 0..c {
                        let zr = z.at(f, r, i, j) as f64;
                        let row = &self.mix[r * c..(r + 1) * c];
                        v.iter_mut().zip(row).for_each(|(acc, q)| *acc += q * zr);
                    }
                    for ch in 0..3 {
                        for dy in 0..p {
                            for dx in 0..p {
                                out.set(f, ch, i * p + dy, j * p + dx, v[(ch * p + dy) * p + dx] as f32);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Decodes and clamps to `[0, 1]` for pixel emission.
    pub fn decode(&self, z: &LatentVideo) -> Result<VideoTensor> {
        Ok(self.decode_raw(z)?.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Decode → bilinear upscale by `scale` → encode.
    pub fn upsample_latent(&self, z: &LatentVideo, scale: usize) -> Result<LatentVideo> {
        if scale == 0 {
            return Err(Error::Config("upsample scale must be at least 1".into()));
        }
        let pixels = self.decode(z)?;
        let up = bilinear_resize(&pixels, pixels.height() * scale, pixels.width() * scale)?;
        self.encode(&up)
    }
}

/// Seeded Gaussian matrix orthonormalized by modified Gram–Schmidt (two
/// passes). Returned row-major; rows are orthonormal.
fn orthonormal_matrix(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> =
        (0..n).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    for i in 0..n {
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(i);
                tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        rows[i].iter_mut().for_each(|a| *a /= norm);
    }
    rows.concat()
}

/// Per-frame, per-channel bilinear resampling with half-pixel centers
/// (align-corners = false) and edge clamping.
pub fn bilinear_resize<K>(x: &Volume<K>, target_h: usize, target_w: usize) -> Result<Volume<K>> {
    if target_h == 0 || target_w == 0 {
        return Err(shape_err!("resize target {target_h}x{target_w}"));
    }
    let (h, w) = (x.height(), x.width());
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                let frac = (src - i0 as f64).clamp(0.0, 1.0) as f32;
                (i0, i1, frac)
            })
            .collect()
    };
    let ys = taps(target_h, h);
    let xs = taps(target_w, w);
    let mut out = Volume::<K>::zeros(x.frames(), x.channels(), target_h, target_w);
    for f in 0..x.frames() {
        for c in 0..x.channels() {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = x.at(f, c, y0, x0) * (1.0 - fx) + x.at(f, c, y0, x1) * fx;
                    let bot = x.at(f, c, y1, x0) * (1.0 - fx) + x.at(f, c, y1, x1) * fx;
                    out.set(f, c, oy, ox, top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Ok(out)
}

/// Sidecar descriptor written next to each serialized video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoDescriptor {
    pub frames: usize,
    pub fps: f32,
    pub colorspace: String,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Writes `path` (UMVT) and a `.json` sidecar descriptor.
pub fn save_video(path: impl AsRef<Path>, video: &VideoTensor, fps: f32) -> Result<()> {
    let path = path.as_ref();
    umvt::save(path, video.tensor())?;
    let desc = VideoDescriptor { frames: video.frames(), fps, colorspace: "linear-rgb".into() };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&desc)? + "\n")?;
    Ok(())
}

/// Reads a UMVT video and its sidecar when present.
pub fn load_video(path: impl AsRef<Path>) -> Result<(VideoTensor, Option<VideoDescriptor>)> {
    let path = path.as_ref();
    let video = VideoTensor::from_tensor(umvt::load(path)?)?;
    let side = sidecar_path(path);
    let desc = match fs::read_to_string(&side) {
        Ok(s) => Some(serde_json::from_str(&s)?),
        Err(_) => None,
    };
    Ok((video, desc))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn codec() -> Codec {
        Codec::new(CodecConfig::default()).unwrap()
    }

    fn random_video(frames: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoTensor::from_fn(frames, 3, h, w, |_, _, _, _| rng.random::<f32>())
    }

    #[test]
    fn mixing_matrix_is_orthonormal() {
        let c = codec();
        let n = c.latent_channels();
        let q = c.mixing_matrix();
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| q[k * n + i] * q[k * n + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-6, "QtQ[{i},{j}] = {dot}");
            }
        }
    }

    #[test]
    fn encode_shapes_and_zero() {
        let c = codec();
        let z = c.encode(&VideoTensor::zeros(2, 3, 8, 8)).unwrap();
        assert_eq!(z.dims(), [2, 48, 2, 2]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let x = c.decode(&LatentVideo::zeros(2, 48, 2, 2)).unwrap();
        assert_eq!(x.dims(), [2, 3, 8, 8]);
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_indivisible_and_decode_rejects_channels() {
        let c = codec();
        assert!(matches!(c.encode(&VideoTensor::zeros(1, 3, 6, 8)), Err(Error::Shape(_))));
        assert!(matches!(c.decode(&LatentVideo::zeros(1, 12, 2, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn round_trip_random_video() {
        let c = codec();
        let x = random_video(3, 16, 8, 4);
        let back = c.decode(&c.encode(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-5);
    }

    #[test]
    fn bilinear_examples() {
        let x = VideoTensor::full(1, 3, 3, 5, 0.7);
        let y = bilinear_resize(&x, 7, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));

        // half-pixel centers with edge clamping: [0, 1] → [0, 0.25, 0.75, 1]
        let row = VideoTensor::new(1, 1, 1, 2, vec![0.0, 1.0]).unwrap();
        let up = bilinear_resize(&row, 1, 4).unwrap();
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn bilinear_round_trip_of_smooth_gradient() {
        let x = VideoTensor::from_fn(1, 3, 16, 16, |_, c, y, x| {
            (0.2 + 0.03 * x as f32 + 0.02 * y as f32 + 0.05 * c as f32).min(1.0)
        });
        let up = bilinear_resize(&x, 32, 32).unwrap();
        let down = bilinear_resize(&up, 16, 16).unwrap();
        assert!(down.max_abs_diff(&x) < 0.05);
    }

    #[test]
    fn upsample_latent_contracts() {
        let c = codec();
        let x = random_video(2, 8, 8, 9);
        let z = c.encode(&x).unwrap();
        let same = c.upsample_latent(&z, 1).unwrap();
        assert!(same.max_abs_diff(&z) <= 1e-5);

        let up = c.upsample_latent(&z, 2).unwrap();
        assert_eq!(up.dims(), [2, 48, 4, 4]);

        let flat = VideoTensor::from_fn(2, 3, 8, 8, |_, ch, _, _| [0.2, 0.5, 0.9][ch]);
        let up = c.decode(&c.upsample_latent(&c.encode(&flat).unwrap(), 2).unwrap()).unwrap();
        assert_eq!(up.dims(), [2, 3, 16, 16]);
        for f in 0..2 {
            for ch in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        assert!((up.at(f, ch, y, x) - [0.2, 0.5, 0.9][ch]).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn video_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.umvt");
        let x = random_video(2, 4, 4, 1);
        save_video(&path, &x, 8.0).unwrap();
        let (back, desc) = load_video(&path).unwrap();
        assert_eq!(back, x);
        assert_eq!(desc.unwrap().frames, 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_identity(seed in any::<u64>(), frames in 1usize..3, hb in 1usize..4, wb in 1usize..4) {
            let c = codec();
            let x = random_video(frames, hb * 4, wb * 4, seed);
            let back = c.decode(&c.encode(&x).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&x) <= 1e-5);
        }

        #[test]
        fn encode_is_linear(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let c = codec();
            let x = random_video(1, 8, 8, seed);
            let y = random_video(1, 8, 8, seed ^ 0xff);
            let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
            let lhs = c.encode(&mix).unwrap();
            let rhs = c.encode(&x).unwrap().zip_map(&c.encode(&y).unwrap(), |p, q| a * p + b * q).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-5);
        }
    }
}
