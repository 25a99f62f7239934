//! Flow-ODE integration with a pseudo linear multistep rule, independent
//! text/reference guidance and the reference guidance threshold.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentVideo;
use crate::conditioning::ConditionBundle;
use crate::dit::VelocityModel;
use crate::error::{shape_err, Error, Result};
use crate::flowmatch::gaussian_latent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub shift: f64,
    pub s_txt: f64,
    pub s_ref: f64,
    pub n_ref: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, shift: 1.0, s_txt: 3.0, s_ref: 1.0, n_ref: 15, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if self.n_ref > self.steps {
            return Err(Error::Config(format!("n_ref {} exceeds steps {}", self.n_ref, self.steps)));
        }
        if !(self.shift > 0.0 && self.shift.is_finite()) {
            return Err(Error::Config(format!("shift {} must be positive", self.shift)));
        }
        if !self.s_txt.is_finite() || !self.s_ref.is_finite() {
            return Err(Error::Config("guidance scales must be finite".into()));
        }
        Ok(())
    }
}

/// `N + 1` times from 1 down to 0 after the shift remap.
pub fn shift_timesteps(steps: usize, shift: f64) -> Result<Vec<f64>> {
    if steps == 0 || !(shift > 0.0 && shift.is_finite()) {
        return Err(Error::Config(format!("invalid schedule: {steps} steps, shift {shift}")));
    }
    Ok((0..=steps)
        .map(|j| {
            if j == 0 {
                return 1.0;
            }
            if j == steps {
                return 0.0;
            }
            let u = 1.0 - j as f64 / steps as f64;
            shift * u / (1.0 + (shift - 1.0) * u)
        })
        .collect())
}

/// `full + s_txt (full - no_txt) + s_ref (full - no_ref)`.
pub fn cfg_combine(
    full: &LatentVideo,
    no_txt: &LatentVideo,
    no_ref: &LatentVideo,
    s_txt: f64,
    s_ref: f64,
) -> Result<LatentVideo> {
    if !full.same_shape(no_txt) || !full.same_shape(no_ref) {
        return Err(shape_err!("guidance branches {:?}/{:?}/{:?}", full.dims(), no_txt.dims(), no_ref.dims()));
    }
    let (st, sr) = (s_txt as f32, s_ref as f32);
    let data = full
        .data()
        .iter()
        .zip(no_txt.data())
        .zip(no_ref.data())
        .map(|((&f, &nt), &nr)| f + st * (f - nt) + sr * (f - nr))
        .collect();
    let [fr, c, h, w] = full.dims();
    LatentVideo::new(fr, c, h, w, data)
}

/// Reference scale at step `n`: `s_ref` for the first `n_ref` steps, then 0.
pub fn rgt_scale(n: usize, n_ref: usize, s_ref: f64) -> f64 {
    if n < n_ref { s_ref } else { 0.0 }
}

/// One guided velocity evaluation; branches with a zero scale are skipped.
pub fn guided_velocity<M: VelocityModel + ?Sized>(
    model: &M,
    z: &LatentVideo,
    bundle: &ConditionBundle,
    t: f64,
    n: usize,
    cfg: &SamplerConfig,
) -> Result<LatentVideo> {
    let full = model.velocity(z, bundle, t)?;
    let no_txt = if cfg.s_txt != 0.0 { Some(model.velocity(z, &bundle.without_text(), t)?) } else { None };
    let s_ref = rgt_scale(n, cfg.n_ref, cfg.s_ref);
    let no_ref = if s_ref != 0.0 && bundle.has_references() {
        Some(model.velocity(z, &bundle.without_references(), t)?)
    } else {
        None
    };
    if no_txt.is_none() && no_ref.is_none() {
        return Ok(full);
    }
    cfg_combine(&full, no_txt.as_ref().unwrap_or(&full), no_ref.as_ref().unwrap_or(&full), cfg.s_txt, s_ref)
}

/// Integrates `dz/dt = -v` along `grid` (descending) from `z`. Step `j`
/// uses guidance index `first_step + j`.
///
/// The first step is Heun (one extra evaluation at the next time), then
/// Adams-Bashforth of order 2, 3 and finally 4 on the stored history.
pub fn pndm_integrate<M: VelocityModel + ?Sized>(
    model: &M,
    bundle: &ConditionBundle,
    z: &LatentVideo,
    grid: &[f64],
    first_step: usize,
    cfg: &SamplerConfig,
) -> Result<LatentVideo> {
    let [f, c, h, w] = z.dims();
    let mut state: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
    let to_latent = |s: &[f64]| LatentVideo::new(f, c, h, w, s.iter().map(|&v| v as f32).collect());
    let eval = |s: &[f64], t: f64, n: usize| -> Result<Vec<f64>> {
        let v = guided_velocity(model, &to_latent(s)?, bundle, t, n, cfg)?;
        if !v.same_shape(z) {
            return Err(shape_err!("model returned {:?} for latent {:?}", v.dims(), z.dims()));
        }
        Ok(v.data().iter().map(|&x| x as f64).collect())
    };

    let mut history: VecDeque<Vec<f64>> = VecDeque::with_capacity(3);
    for (j, pair) in grid.windows(2).enumerate() {
        let (t0, t1) = (pair[0], pair[1]);
        let dt = t0 - t1;
        let n = first_step + j;
        let v = eval(&state, t0, n)?;
        let vbar: Vec<f64> = match history.len() {
            0 => {
                let predicted: Vec<f64> = state.iter().zip(&v).map(|(s, v)| s + dt * v).collect();
                let v1 = eval(&predicted, t1, n)?;
                v.iter().zip(&v1).map(|(a, b)| 0.5 * (a + b)).collect()
            }
            1 => v.iter().zip(&history[0]).map(|(a, b)| (3.0 * a - b) / 2.0).collect(),
            2 => (0..v.len()).map(|i| (23.0 * v[i] - 16.0 * history[0][i] + 5.0 * history[1][i]) / 12.0).collect(),
            _ => (0..v.len())
                .map(|i| (55.0 * v[i] - 59.0 * history[0][i] + 37.0 * history[1][i] - 9.0 * history[2][i]) / 24.0)
                .collect(),
        };
        for (s, d) in state.iter_mut().zip(&vbar) {
            *s += dt * d;
        }
        history.push_front(v);
        history.truncate(3);
    }
    to_latent(&state)
}

/// Samples a latent of `dims` from seeded noise at `t = 1`.
pub fn pndm_sample<M: VelocityModel + ?Sized>(
    model: &M,
    bundle: &ConditionBundle,
    dims: [usize; 4],
    cfg: &SamplerConfig,
) -> Result<LatentVideo> {
    cfg.validate()?;
    let grid = shift_timesteps(cfg.steps, cfg.shift)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z = gaussian_latent(&mut rng, dims);
    pndm_integrate(model, bundle, &z, &grid, 0, cfg)
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use proptest::prelude::*;

    use super::*;
    use crate::numerics::Tensor;

    /// Velocity depending only on time, with per-branch call counts.
    struct Oracle<F: Fn(f64) -> f32> {
        field: F,
        calls: Cell<[usize; 3]>,
    }

    impl<F: Fn(f64) -> f32> Oracle<F> {
        fn new(field: F) -> Self {
            Self { field, calls: Cell::new([0; 3]) }
        }
    }

    impl<F: Fn(f64) -> f32> VelocityModel for Oracle<F> {
        fn velocity(&self, z: &LatentVideo, bundle: &ConditionBundle, t: f64) -> Result<LatentVideo> {
            let mut c = self.calls.get();
            let branch = if bundle.text == bundle.null_text {
                1
            } else if !bundle.has_references() {
                2
            } else {
                0
            };
            c[branch] += 1;
            self.calls.set(c);
            Ok(z.map(|_| (self.field)(t)))
        }
    }

    fn ref_bundle() -> ConditionBundle {
        let mut b = ConditionBundle::text_only(Tensor::full(&[32, 4], 1.0), Tensor::zeros(&[32, 4]));
        b.ref_video = Some(LatentVideo::zeros(1, 2, 2, 2));
        b
    }

    #[test]
    fn schedule_examples() {
        let g = shift_timesteps(4, 1.0).unwrap();
        assert_eq!(g, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        let g = shift_timesteps(2, 3.0).unwrap();
        assert_eq!(g, vec![1.0, 0.75, 0.0]);
        assert!(shift_timesteps(0, 1.0).is_err());
        assert!(shift_timesteps(3, 0.0).is_err());
    }

    #[test]
    fn cfg_hand_example() {
        let v = |x| LatentVideo::full(1, 1, 1, 1, x);
        assert_eq!(cfg_combine(&v(2.0), &v(1.0), &v(1.5), 3.0, 1.0).unwrap().data(), &[5.5]);
        assert_eq!(cfg_combine(&v(2.0), &v(1.0), &v(1.5), 0.0, 0.0).unwrap().data(), &[2.0]);
        assert!(cfg_combine(&v(2.0), &LatentVideo::zeros(1, 1, 1, 2), &v(1.5), 0.0, 0.0).is_err());
    }

    #[test]
    fn rgt_branches() {
        assert_eq!(rgt_scale(0, 15, 1.0), 1.0);
        assert_eq!(rgt_scale(14, 15, 1.0), 1.0);
        assert_eq!(rgt_scale(15, 15, 1.0), 0.0);
        assert_eq!(rgt_scale(50, 15, 1.0), 0.0);
        assert!((0..60).all(|n| rgt_scale(n, 0, 2.0) == 0.0));
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        for steps in [1, 4, 50] {
            let model = Oracle::new(|_| 0.7);
            let cfg = SamplerConfig { steps, seed: 3, n_ref: steps.min(15), ..SamplerConfig::default() };
            let out = pndm_sample(&model, &ref_bundle(), [1, 2, 2, 2], &cfg).unwrap();
            let init = gaussian_latent(&mut ChaCha8Rng::seed_from_u64(3), [1, 2, 2, 2]);
            let expect = init.map(|v| v + 0.7);
            assert!(out.max_abs_diff(&expect) <= 1e-5, "{steps}: {}", out.max_abs_diff(&expect));
        }
    }

    #[test]
    fn linear_field_matches_fine_euler() {
        let field = |t: f64| (0.3 - 1.7 * t) as f32;
        let model = Oracle::new(field);
        let cfg = SamplerConfig { s_txt: 0.0, s_ref: 0.0, seed: 1, ..SamplerConfig::default() };
        let out = pndm_sample(&model, &ref_bundle(), [1, 1, 1, 1], &cfg).unwrap();
        let z0 = gaussian_latent(&mut ChaCha8Rng::seed_from_u64(1), [1, 1, 1, 1]).data()[0] as f64;
        let n = 1_000_000;
        let mut z = z0;
        for k in 0..n {
            z += field(1.0 - k as f64 / n as f64) as f64 / n as f64;
        }
        assert!((out.data()[0] as f64 - z).abs() < 1e-4, "{} vs {z}", out.data()[0]);
    }

    #[test]
    fn zero_reference_scale_skips_reference_branch() {
        let model = Oracle::new(|_| 0.1);
        let cfg = SamplerConfig { steps: 10, s_ref: 0.0, n_ref: 10, ..SamplerConfig::default() };
        pndm_sample(&model, &ref_bundle(), [1, 2, 2, 2], &cfg).unwrap();
        // 11 evaluations: one per step plus the Heun corrector
        assert_eq!(model.calls.get(), [11, 11, 0]);

        let model = Oracle::new(|_| 0.1);
        let cfg = SamplerConfig { steps: 10, n_ref: 4, ..SamplerConfig::default() };
        pndm_sample(&model, &ref_bundle(), [1, 2, 2, 2], &cfg).unwrap();
        assert_eq!(model.calls.get(), [11, 11, 5]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let model = Oracle::new(|t| t as f32);
        let cfg = SamplerConfig { steps: 7, seed: 9, n_ref: 3, ..SamplerConfig::default() };
        let a = pndm_sample(&model, &ref_bundle(), [2, 2, 2, 2], &cfg).unwrap();
        let b = pndm_sample(&model, &ref_bundle(), [2, 2, 2, 2], &cfg).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        assert!(SamplerConfig { steps: 0, ..SamplerConfig::default() }.validate().is_err());
        assert!(SamplerConfig { n_ref: 51, ..SamplerConfig::default() }.validate().is_err());
        assert!(SamplerConfig { shift: -1.0, ..SamplerConfig::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_strictly_decreasing(steps in 1usize..200, shift in 0.05f64..20.0) {
            let g = shift_timesteps(steps, shift).unwrap();
            prop_assert_eq!(g.len(), steps + 1);
            prop_assert_eq!(g[0], 1.0);
            prop_assert_eq!(g[steps], 0.0);
            prop_assert!(g.windows(2).all(|w| w[0] > w[1]));
        }

        #[test]
        fn rgt_is_non_increasing(n_ref in 0usize..60, s in 0.0f64..5.0) {
            prop_assert!((0..70).all(|n| rgt_scale(n + 1, n_ref, s) <= rgt_scale(n, n_ref, s)));
        }
    }
}
