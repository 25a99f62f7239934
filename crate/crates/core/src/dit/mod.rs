//! Diffusion transformer predicting flow velocity over a unified sequence of
//! noisy and reference tokens.

mod params;

use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use params::{Init, Linear, ParamId, ParamStore};

use crate::codec::LatentVideo;
use crate::conditioning::{
    build_rope_plan, channel_concat, latent_of_tokens, tokens_of, ConditionBundle, InjectionMode, RopePlan,
    SegmentKind, SequenceLayout,
};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::numerics::{grad_check_coords, umvt, GradReport, Real, RopeTable, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub text_dim: usize,
    pub rope_base: f64,
    pub injection_mode: InjectionMode,
    /// Whether the model consumes an LR latent (false for the base
    /// text-to-video stage of a cascade).
    pub lr_conditioning: bool,
    /// Reference slots stacked on channels in `full_channel_concat` mode.
    pub ref_slots: usize,
    /// Width of each sinusoidal scalar embedding.
    pub freq_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 48,
            model_dim: 96,
            heads: 4,
            blocks: 4,
            ffn_mult: 4,
            text_dim: 64,
            rope_base: 10_000.0,
            injection_mode: InjectionMode::Unified,
            lr_conditioning: true,
            ref_slots: 3,
            freq_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads)));
        }
        if self.head_dim() % 6 != 0 {
            return Err(Error::Config(format!("head_dim {} must be divisible by 6", self.head_dim())));
        }
        if self.blocks == 0 || self.latent_channels == 0 || self.ffn_mult == 0 || self.text_dim == 0 {
            return Err(Error::Config("blocks, channels, ffn_mult and text_dim must be positive".into()));
        }
        if self.freq_dim == 0 || self.freq_dim % 2 != 0 {
            return Err(Error::Config(format!("freq_dim {} must be even and positive", self.freq_dim)));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config(format!("rope_base {} must exceed 1", self.rope_base)));
        }
        Ok(())
    }

    /// Channel width of the main patch embedding input.
    fn main_in_channels(&self) -> usize {
        let lr = usize::from(self.lr_conditioning);
        match self.injection_mode {
            InjectionMode::Unified => self.latent_channels * (1 + lr),
            InjectionMode::FullTokenConcat => self.latent_channels,
            InjectionMode::FullChannelConcat => self.latent_channels * (1 + lr + self.ref_slots),
        }
    }
}

/// Scalar conditions fed through the modulation path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModulationInput {
    pub diffusion_t: f64,
    pub noise_aug_step: u32,
    pub fps: f32,
    pub aspect: f32,
}

impl ModulationInput {
    pub fn new(diffusion_t: f64, noise_aug_step: u32, fps: f32, aspect: f32) -> Result<Self> {
        let m = Self { diffusion_t, noise_aug_step, fps, aspect };
        m.validate()?;
        Ok(m)
    }

    /// Diffusion time `t` with the bundle's micro conditions.
    pub fn from_bundle(diffusion_t: f64, bundle: &ConditionBundle) -> Result<Self> {
        Self::new(diffusion_t, bundle.noise_aug_step, bundle.fps, bundle.aspect)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.diffusion_t) {
            return Err(contract_err!("diffusion_t {} outside [0, 1]", self.diffusion_t));
        }
        if self.noise_aug_step > 1000 {
            return Err(contract_err!("noise_aug_step {} outside [0, 1000]", self.noise_aug_step));
        }
        if !self.fps.is_finite() || !self.aspect.is_finite() {
            return Err(Error::NonFinite("fps/aspect micro condition".into()));
        }
        Ok(())
    }
}

/// Rotates per-head vectors `[tokens, ..., head_dim]` by three-axis rotary
/// embeddings at `positions`.
pub fn rope_apply<T: Real>(x: &Tensor<T>, positions: &[[usize; 3]], base: f64) -> Result<Tensor<T>> {
    let head_dim = *x.dims().last().ok_or_else(|| shape_err!("rope_apply on a scalar"))?;
    RopeTable::new(positions, head_dim, base)?.apply(x)
}

/// Per-call knobs of a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Explicit frame-index allocation; contiguous when absent.
    pub plan: Option<RopePlan>,
    /// Constant added to every token's rotary frame index.
    pub frame_offset: usize,
}

/// Sinusoidal features `[cos(x f_j), sin(x f_j)]` with geometric frequencies.
fn sinusoid(x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs = (0..half).map(|j| (-(10_000f64).ln() * j as f64 / half as f64).exp());
    let (cos, sin): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((x * f).cos(), (x * f).sin())).unzip();
    cos.into_iter().chain(sin).collect()
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut rand_chacha::ChaCha8Rng, name: &str, d: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, Init::Xavier),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, Init::Xavier),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, Init::Xavier),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d, Init::Xavier),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    modulation: Linear,
    spatial: Attention,
    cross: Attention,
    full: Attention,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug)]
struct Architecture {
    t_mlp1: Linear,
    t_mlp2: Linear,
    micro: Linear,
    in_proj: Linear,
    id_proj: Linear,
    video_ref_proj: Linear,
    lr_proj: Linear,
    text_proj: Linear,
    blocks: Vec<Block>,
    final_mod: Linear,
    out_proj: Linear,
}

/// Main-input tokens plus reference tokens for one forward pass.
struct Prepared<T> {
    main: Tensor<T>,
    refs: Vec<(SegmentKind, Tensor<T>)>,
    layout: SequenceLayout,
}

/// The velocity network with its parameters.
#[derive(Clone, Debug)]
pub struct Dit<T: Real = f32> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    arch: Architecture,
}

impl<T: Real> Dit<T> {
    /// Fresh model with closed gates: every block starts as the identity.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_gate_init(cfg, seed, Init::Zero)
    }

    /// Fresh model whose modulation heads use `gates` (closed gates make
    /// gradients vanish past the output layer, so checks use open ones).
    pub fn with_gate_init(cfg: ModelConfig, seed: u64, gates: Init) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = params::rng_for(seed);
        let d = cfg.model_dim;
        let c = cfg.latent_channels;
        let fd = cfg.freq_dim;
        let s = &mut store;
        let r = &mut rng;
        let t_mlp1 = Linear::new(s, r, "t_embed.0", fd, d, Init::Xavier);
        let t_mlp2 = Linear::new(s, r, "t_embed.1", d, d, Init::Xavier);
        let micro = Linear::new(s, r, "micro_embed", 3 * fd, d, Init::Xavier);
        let in_proj = Linear::new(s, r, "in_proj", cfg.main_in_channels(), d, Init::Xavier);
        let id_proj = Linear::new(s, r, "id_proj", c, d, Init::Xavier);
        let video_ref_proj = Linear::new(s, r, "video_ref_proj", c, d, Init::Xavier);
        let lr_proj = Linear::new(s, r, "lr_proj", c, d, Init::Xavier);
        let text_proj = Linear::new(s, r, "text_proj", cfg.text_dim, d, Init::Xavier);
        let blocks = (0..cfg.blocks)
            .map(|b| Block {
                modulation: Linear::new(s, r, &format!("blocks.{b}.modulation"), d, 12 * d, gates),
                spatial: Attention::new(s, r, &format!("blocks.{b}.spatial"), d),
                cross: Attention::new(s, r, &format!("blocks.{b}.cross"), d),
                full: Attention::new(s, r, &format!("blocks.{b}.full"), d),
                ffn_in: Linear::new(s, r, &format!("blocks.{b}.ffn.0"), d, cfg.ffn_mult * d, Init::Xavier),
                ffn_out: Linear::new(s, r, &format!("blocks.{b}.ffn.1"), cfg.ffn_mult * d, d, Init::Xavier),
            })
            .collect();
        let final_mod = Linear::new(s, r, "final.modulation", d, 2 * d, gates);
        let out_proj = Linear::new(s, r, "final.out", d, c, Init::Small);
        let arch = Architecture {
            t_mlp1,
            t_mlp2,
            micro,
            in_proj,
            id_proj,
            video_ref_proj,
            lr_proj,
            text_proj,
            blocks,
            final_mod,
            out_proj,
        };
        Ok(Self { cfg, params: store, arch })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Dit<U> {
        Dit { cfg: self.cfg.clone(), params: self.params.cast(), arch: self.arch.clone() }
    }

    /// Unified-sequence layout the model would build for these inputs.
    pub fn sequence_layout(
        &self,
        noisy: &LatentVideo,
        bundle: &ConditionBundle,
        opts: &ForwardOptions,
    ) -> Result<SequenceLayout> {
        Ok(self.prepare(noisy, bundle, opts)?.layout)
    }

    fn check_latent(&self, what: &str, v: &LatentVideo) -> Result<()> {
        if v.channels() != self.cfg.latent_channels {
            return Err(shape_err!("{what} has {} channels, model expects {}", v.channels(), self.cfg.latent_channels));
        }
        Ok(())
    }

    fn prepare(&self, noisy: &LatentVideo, bundle: &ConditionBundle, opts: &ForwardOptions) -> Result<Prepared<T>> {
        let (f, h, w) = (noisy.frames(), noisy.height(), noisy.width());
        self.check_latent("noisy latent", noisy)?;
        bundle.validate(f, h, w)?;
        if bundle.text.dims() != [crate::conditioning::TEXT_TOKENS, self.cfg.text_dim] {
            return Err(shape_err!("text embedding {:?}, expected [{}, {}]", bundle.text.dims(), crate::conditioning::TEXT_TOKENS, self.cfg.text_dim));
        }
        let lr = if self.cfg.lr_conditioning {
            let lr = bundle.lr_latent.as_ref().ok_or_else(|| contract_err!("model is LR-conditioned but bundle has no LR latent"))?;
            self.check_latent("lr latent", lr)?;
            Some(lr)
        } else {
            None
        };
        let mut refs: Vec<(SegmentKind, &LatentVideo)> = bundle.references();
        for (kind, v) in &refs {
            self.check_latent(&format!("{kind:?}"), v)?;
        }

        let main = match self.cfg.injection_mode {
            InjectionMode::Unified => match lr {
                Some(lr) => channel_concat(noisy, lr)?,
                None => noisy.clone(),
            },
            InjectionMode::FullTokenConcat => {
                if let Some(lr) = lr {
                    refs.insert(0, (SegmentKind::LowRes, lr));
                }
                noisy.clone()
            }
            InjectionMode::FullChannelConcat => {
                if refs.len() > self.cfg.ref_slots {
                    return Err(contract_err!("{} references exceed {} channel slots", refs.len(), self.cfg.ref_slots));
                }
                let mut stacked = match lr {
                    Some(lr) => channel_concat(noisy, lr)?,
                    None => noisy.clone(),
                };
                for slot in 0..self.cfg.ref_slots {
                    let plane = match refs.get(slot) {
                        Some((_, v)) => tile_frames(v, f)?,
                        None => LatentVideo::zeros(f, self.cfg.latent_channels, h, w),
                    };
                    stacked = channel_concat(&stacked, &plane)?;
                }
                refs.clear();
                stacked
            }
        };

        let lens: Vec<usize> = refs.iter().map(|(_, v)| v.frames()).collect();
        let plan = match &opts.plan {
            Some(p) => p.clone(),
            None => build_rope_plan(f, &lens)?,
        };
        if plan.frames() != f {
            return Err(contract_err!("plan for {} frames, noisy latent has {f}", plan.frames()));
        }
        let kinds: Vec<(SegmentKind, usize)> = refs.iter().map(|(k, v)| (*k, v.frames())).collect();
        let layout = SequenceLayout::new((h, w), plan, &kinds)?;
        Ok(Prepared {
            main: tokens_of(&main).cast(),
            refs: refs.iter().map(|(k, v)| (*k, tokens_of(v).cast())).collect(),
            layout,
        })
    }

    /// Records the forward pass on `tape` with bound parameters `p`; returns
    /// velocity tokens `[noisy_tokens, latent_channels]` and the layout.
    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &[Var<'t, T>],
        noisy: &LatentVideo,
        bundle: &ConditionBundle,
        m: &ModulationInput,
        opts: &ForwardOptions,
    ) -> Result<(Var<'t, T>, SequenceLayout)> {
        if p.len() != self.params.len() {
            return Err(contract_err!("{} bound parameters for a model with {}", p.len(), self.params.len()));
        }
        m.validate()?;
        let prep = self.prepare(noisy, bundle, opts)?;
        let a = &self.arch;

        let cond = self.conditioning_vector(tape, p, m)?;
        let text = a.text_proj.forward(tape.constant(bundle.text.cast()), p)?;

        let mut parts = vec![a.in_proj.forward(tape.constant(prep.main), p)?];
        for (kind, tokens) in prep.refs {
            let proj = match kind {
                SegmentKind::IdImage(_) => &a.id_proj,
                SegmentKind::RefVideo => &a.video_ref_proj,
                SegmentKind::LowRes => &a.lr_proj,
                SegmentKind::Noisy => return Err(contract_err!("noisy span listed as a reference")),
            };
            parts.push(proj.forward(tape.constant(tokens), p)?);
        }
        let mut x = if parts.len() == 1 { parts[0] } else { Var::concat(&parts)? };

        let positions = prep.layout.positions_with_offset(opts.frame_offset);
        let rope = Rc::new(RopeTable::new(&positions, self.cfg.head_dim(), self.cfg.rope_base)?);
        for block in &a.blocks {
            x = self.block_tape(block, p, x, text, cond, &prep.layout, &rope)?;
        }

        let d = self.cfg.model_dim;
        let fm = a.final_mod.forward(cond, p)?.reshape(&[2, d])?;
        let shift = fm.slice_rows(0, 1)?.reshape(&[d])?;
        let scale = fm.slice_rows(1, 1)?.reshape(&[d])?;
        let x = modulate(x, shift, scale)?;
        let x = x.slice_rows(0, prep.layout.noisy_len())?;
        Ok((a.out_proj.forward(x, p)?, prep.layout))
    }

    /// `silu(t_embed + micro_embed)`, shape `[1, model_dim]`.
    fn conditioning_vector<'t>(&self, tape: &'t Tape<T>, p: &[Var<'t, T>], m: &ModulationInput) -> Result<Var<'t, T>> {
        let fd = self.cfg.freq_dim;
        let to_var = |v: Vec<f64>| -> Result<Var<'t, T>> {
            let n = v.len();
            Ok(tape.constant(Tensor::new(&[1, n], v.into_iter().map(T::of).collect())?))
        };
        let a = &self.arch;
        let t = a.t_mlp1.forward(to_var(sinusoid(m.diffusion_t * 1000.0, fd))?, p)?.silu()?;
        let t = a.t_mlp2.forward(t, p)?;
        let mut micro = sinusoid(m.noise_aug_step as f64, fd);
        micro.extend(sinusoid(m.fps as f64, fd));
        micro.extend(sinusoid(m.aspect as f64 * 100.0, fd));
        let micro = a.micro.forward(to_var(micro)?, p)?;
        t.add(micro)?.silu()
    }

    #[allow(clippy::too_many_arguments)]
    fn block_tape<'t>(
        &self,
        block: &Block,
        p: &[Var<'t, T>],
        x: Var<'t, T>,
        text: Var<'t, T>,
        cond: Var<'t, T>,
        layout: &SequenceLayout,
        rope: &Rc<RopeTable<T>>,
    ) -> Result<Var<'t, T>> {
        let d = self.cfg.model_dim;
        let mods = block.modulation.forward(cond, p)?.reshape(&[12, d])?;
        let row = |i: usize| -> Result<Var<'t, T>> { mods.slice_rows(i, 1)?.reshape(&[d]) };
        let frames = layout.total_frames();

        // spatial self-attention inside each frame grid
        let h = modulate(x, row(0)?, row(1)?)?;
        let a = self.attention(&block.spatial, p, h, h, frames, Some(rope))?;
        let x = x.add(a.mul_row(row(2)?)?)?;
        // cross-attention to text only
        let h = modulate(x, row(3)?, row(4)?)?;
        let a = self.attention(&block.cross, p, h, text, 1, None)?;
        let x = x.add(a.mul_row(row(5)?)?)?;
        // 3D self-attention over the whole unified sequence
        let h = modulate(x, row(6)?, row(7)?)?;
        let a = self.attention(&block.full, p, h, h, 1, Some(rope))?;
        let x = x.add(a.mul_row(row(8)?)?)?;
        // feed-forward
        let h = modulate(x, row(9)?, row(10)?)?;
        let a = block.ffn_out.forward(block.ffn_in.forward(h, p)?.gelu()?, p)?;
        x.add(a.mul_row(row(11)?)?)
    }

    /// Multi-head attention of `xq` over `xkv`, both split into `groups`
    /// equal independent chunks of rows.
    fn attention<'t>(
        &self,
        att: &Attention,
        p: &[Var<'t, T>],
        xq: Var<'t, T>,
        xkv: Var<'t, T>,
        groups: usize,
        rope: Option<&Rc<RopeTable<T>>>,
    ) -> Result<Var<'t, T>> {
        let (d, heads, hd) = (self.cfg.model_dim, self.cfg.heads, self.cfg.head_dim());
        let (lq, lk) = (xq.dims()[0], xkv.dims()[0]);
        if lq % groups != 0 || lk % groups != 0 {
            return Err(shape_err!("{lq}/{lk} tokens do not split into {groups} groups"));
        }
        let mut q = att.q.forward(xq, p)?;
        let mut k = att.k.forward(xkv, p)?;
        let v = att.v.forward(xkv, p)?;
        if let Some(table) = rope {
            q = q.reshape(&[lq, heads, hd])?.rope(table)?.reshape(&[lq, d])?;
            k = k.reshape(&[lk, heads, hd])?.rope(table)?.reshape(&[lk, d])?;
        }
        let split = |t: Var<'t, T>, len: usize| -> Result<Var<'t, T>> {
            let per = len / groups;
            t.reshape(&[groups, per, heads, hd])?.permute(&[0, 2, 1, 3])?.reshape(&[groups * heads, per, hd])
        };
        let (q, k, v) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
        let scores = q.bmm(k, true)?.scale(T::of(1.0 / (hd as f64).sqrt()))?.softmax(2)?;
        let o = scores
            .bmm(v, false)?
            .reshape(&[groups, heads, lq / groups, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[lq, d])?;
        att.o.forward(o, p)
    }

    /// Velocity prediction with the default (contiguous) plan.
    pub fn forward(&self, noisy: &LatentVideo, bundle: &ConditionBundle, m: &ModulationInput) -> Result<LatentVideo> {
        self.forward_with(noisy, bundle, m, &ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        noisy: &LatentVideo,
        bundle: &ConditionBundle,
        m: &ModulationInput,
        opts: &ForwardOptions,
    ) -> Result<LatentVideo> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let (out, _) = self.forward_tape(&tape, &p, noisy, bundle, m, opts)?;
        let tokens: Tensor<f32> = out.value().cast();
        latent_of_tokens(&tokens, noisy.frames(), noisy.height(), noisy.width())
    }

    /// Runs block `index` alone on model-width tokens `[layout.len(), model_dim]`.
    pub fn block_forward(
        &self,
        index: usize,
        tokens: &Tensor<T>,
        layout: &SequenceLayout,
        text: &Tensor<f32>,
        m: &ModulationInput,
    ) -> Result<Tensor<T>> {
        let block = self.arch.blocks.get(index).ok_or_else(|| contract_err!("no block {index}"))?;
        if tokens.dims() != [layout.len(), self.cfg.model_dim] {
            return Err(shape_err!("block input {:?} vs layout of {} tokens", tokens.dims(), layout.len()));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let cond = self.conditioning_vector(&tape, &p, m)?;
        let text = self.arch.text_proj.forward(tape.constant(text.cast()), &p)?;
        let rope = Rc::new(RopeTable::new(&layout.positions(), self.cfg.head_dim(), self.cfg.rope_base)?);
        let out = self.block_tape(block, &p, tape.constant(tokens.clone()), text, cond, layout, &rope)?;
        let value = out.value().clone();
        Ok(value)
    }
}

fn modulate<'t, T: Real>(x: Var<'t, T>, shift: Var<'t, T>, scale: Var<'t, T>) -> Result<Var<'t, T>> {
    x.layer_norm(T::of(LN_EPS))?.mul_row(scale.add_scalar(T::one())?)?.add_row(shift)
}

/// Repeats `v`'s frames cyclically to `frames` (single-frame references
/// broadcast over time).
fn tile_frames(v: &LatentVideo, frames: usize) -> Result<LatentVideo> {
    let idx: Vec<usize> = (0..frames).map(|i| i % v.frames()).collect();
    v.select_frames(&idx)
}

/// Anything that predicts a velocity field for the sampler.
pub trait VelocityModel {
    fn velocity(&self, z: &LatentVideo, bundle: &ConditionBundle, t: f64) -> Result<LatentVideo>;
}

impl<T: Real> VelocityModel for Dit<T> {
    fn velocity(&self, z: &LatentVideo, bundle: &ConditionBundle, t: f64) -> Result<LatentVideo> {
        self.forward(z, bundle, &ModulationInput::from_bundle(t, bundle)?)
    }
}

/// Compares parameter gradients of the token MSE against central differences
/// at `per_tensor` random coordinates of every parameter tensor.
#[allow(clippy::too_many_arguments)]
pub fn check_model_gradients(
    model: &Dit<f64>,
    noisy: &LatentVideo,
    bundle: &ConditionBundle,
    m: &ModulationInput,
    target: &LatentVideo,
    per_tensor: usize,
    seed: u64,
    h: f64,
) -> Result<GradReport> {
    let target: Tensor<f64> = tokens_of(target).cast();
    let mut rng = params::rng_for(seed);
    let mut coords = Vec::new();
    let mut offset = 0;
    for t in model.params().tensors() {
        if per_tensor >= t.numel() {
            coords.extend(offset..offset + t.numel());
        } else {
            coords.extend((0..per_tensor).map(|_| offset + rng.random_range(0..t.numel())));
        }
        offset += t.numel();
    }
    grad_check_coords(
        |tape, flat| {
            let p = model.params().bind_flat(flat)?;
            let (pred, _) = model.forward_tape(tape, &p, noisy, bundle, m, &ForwardOptions::default())?;
            pred.sub(tape.constant(target.clone()))?.square()?.mean()
        },
        &model.params().flatten(),
        h,
        &coords,
    )
}

/// Where a parameter lives inside `params.umvt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub dims: Vec<usize>,
}

/// Sidecar describing a saved model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub const PARAMS_FILE: &str = "params.umvt";
pub const MODEL_MANIFEST_FILE: &str = "model.json";

/// Concatenates UMVT records; returns each record's byte offset.
pub fn write_archive(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<Vec<TensorEntry>> {
    let mut bytes = Vec::new();
    let mut index = Vec::with_capacity(entries.len());
    for (name, t) in entries {
        index.push(TensorEntry { name: name.clone(), offset: bytes.len() as u64, dims: t.dims().to_vec() });
        umvt::write_tensor(&mut bytes, t)?;
    }
    fs::write(path, bytes)?;
    Ok(index)
}

/// Reads the records listed in `index` from an archive written by
/// [`write_archive`].
pub fn read_archive(path: &Path, index: &[TensorEntry]) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    index
        .iter()
        .map(|e| {
            let start = usize::try_from(e.offset).map_err(|_| Error::Format("offset overflow".into()))?;
            let slice = bytes.get(start..).ok_or_else(|| Error::Format(format!("{}: offset past end", e.name)))?;
            let t = umvt::from_bytes(slice)?;
            if t.dims() != e.dims.as_slice() {
                return Err(Error::Format(format!("{}: dims {:?} vs manifest {:?}", e.name, t.dims(), e.dims)));
            }
            Ok((e.name.clone(), t))
        })
        .collect()
}

impl Dit<f32> {
    /// Writes `params.umvt` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let entries: Vec<(String, Tensor<f32>)> =
            self.params.names().iter().cloned().zip(self.params.tensors().iter().cloned()).collect();
        let tensors = write_archive(&dir.join(PARAMS_FILE), &entries)?;
        let manifest = ModelManifest { config: self.cfg.clone(), tensors };
        fs::write(dir.join(MODEL_MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a model saved by [`Dit::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        let manifest: ModelManifest = serde_json::from_str(&text)?;
        let mut model = Self::new(manifest.config.clone(), 0)?;
        let mut loaded = read_archive(&dir.join(PARAMS_FILE), &manifest.tensors)?;
        model.params.load_named(|name| {
            loaded.iter().position(|(n, _)| n == name).map(|i| loaded.swap_remove(i).1)
        })?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
