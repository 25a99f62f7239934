//! Flow-matching objective and LR noise augmentation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::LatentVideo;
use crate::error::{contract_err, shape_err, Result};

/// Range of the training-time noise augmentation step, inclusive.
pub const NOISE_AUG_RANGE: (u32, u32) = (200, 600);

/// One interpolated training point and its regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub z_t: LatentVideo,
    pub v_target: LatentVideo,
    pub t: f64,
    pub eps: LatentVideo,
}

/// `z_t = (1-t) z_hr + t eps`, `v = z_hr - eps`.
pub fn make_training_pair(z_hr: &LatentVideo, eps: &LatentVideo, t: f64) -> Result<TrainingPair> {
    if !(0.0..=1.0).contains(&t) {
        return Err(contract_err!("t = {t} outside [0, 1]"));
    }
    if !z_hr.same_shape(eps) {
        return Err(shape_err!("z_hr {:?} vs eps {:?}", z_hr.dims(), eps.dims()));
    }
    let tf = t as f32;
    let z_t = z_hr.zip_map(eps, |z, e| (1.0 - tf) * z + tf * e)?;
    let v_target = z_hr.zip_map(eps, |z, e| z - e)?;
    Ok(TrainingPair { z_t, v_target, t, eps: eps.clone() })
}

/// Mean squared difference over all elements.
pub fn mse_loss(pred: &LatentVideo, target: &LatentVideo) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(shape_err!("pred {:?} vs target {:?}", pred.dims(), target.dims()));
    }
    let n = pred.data().len().max(1);
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (*p as f64 - *t as f64).powi(2)).sum();
    Ok(sum / n as f64)
}

/// Mixes the LR latent toward noise at level `u / 1000`.
pub fn noise_augment(lr: &LatentVideo, u: u32, eps: &LatentVideo) -> Result<LatentVideo> {
    if u > 1000 {
        return Err(contract_err!("noise augmentation step {u} outside [0, 1000]"));
    }
    if !lr.same_shape(eps) {
        return Err(shape_err!("lr {:?} vs eps {:?}", lr.dims(), eps.dims()));
    }
    if u == 0 {
        return Ok(lr.clone());
    }
    let a = u as f32 / 1000.0;
    lr.zip_map(eps, |l, e| (1.0 - a) * l + a * e)
}

/// Uniform training time on `(0, 1)`.
pub fn sample_t<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let t: f64 = rng.random();
        if t > 0.0 {
            return t;
        }
    }
}

/// Uniform augmentation step in [`NOISE_AUG_RANGE`].
pub fn sample_noise_step<R: Rng>(rng: &mut R) -> u32 {
    rng.random_range(NOISE_AUG_RANGE.0..=NOISE_AUG_RANGE.1)
}

/// Standard normal latent of the given dims.
pub fn gaussian_latent<R: Rng>(rng: &mut R, dims: [usize; 4]) -> LatentVideo {
    let [f, c, h, w] = dims;
    LatentVideo::from_fn(f, c, h, w, |_, _, _, _| StandardNormal.sample(rng))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn constant(v: f32) -> LatentVideo {
        LatentVideo::full(2, 3, 2, 2, v)
    }

    #[test]
    fn interpolation_examples() {
        let z = constant(0.4);
        let e = constant(-0.2);
        assert_eq!(make_training_pair(&z, &e, 0.0).unwrap().z_t, z);
        assert_eq!(make_training_pair(&z, &e, 1.0).unwrap().z_t, e);
        let p = make_training_pair(&z, &e, 0.25).unwrap();
        assert!(p.z_t.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
        assert!(p.v_target.data().iter().all(|v| (v - 0.6).abs() < 1e-6));
        assert!(make_training_pair(&z, &e, 1.1).is_err());
        assert!(make_training_pair(&z, &LatentVideo::zeros(1, 3, 2, 2), 0.5).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = constant(0.5);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert!((mse_loss(&b, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!(mse_loss(&a, &LatentVideo::zeros(1, 1, 1, 1)).is_err());
    }

    #[test]
    fn noise_augment_examples() {
        let lr = constant(1.0);
        let eps = constant(0.0);
        assert_eq!(noise_augment(&lr, 0, &eps).unwrap(), lr);
        assert_eq!(noise_augment(&lr, 1000, &constant(0.7)).unwrap(), constant(0.7));
        let mixed = noise_augment(&lr, 600, &eps).unwrap();
        assert!(mixed.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
        assert!(noise_augment(&lr, 1001, &eps).is_err());
    }

    #[test]
    fn sampled_steps_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<u32> = (0..10_000).map(|_| sample_noise_step(&mut rng)).collect();
        assert!(draws.iter().all(|u| (200..=600).contains(u)));
        assert_eq!(*draws.iter().min().unwrap(), 200);
        assert_eq!(*draws.iter().max().unwrap(), 600);
        assert!((0..1000).all(|_| {
            let t = sample_t(&mut rng);
            t > 0.0 && t < 1.0
        }));
    }

    proptest! {
        #[test]
        fn pair_reconstructs_and_target_ignores_t(t in 0.0f64..=1.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = gaussian_latent(&mut rng, [1, 4, 2, 2]);
            let e = gaussian_latent(&mut rng, [1, 4, 2, 2]);
            let p = make_training_pair(&z, &e, t).unwrap();
            for i in 0..z.data().len() {
                let expect = (1.0 - t) * z.data()[i] as f64 + t * e.data()[i] as f64;
                prop_assert!((p.z_t.data()[i] as f64 - expect).abs() < 1e-6);
            }
            prop_assert_eq!(p.v_target, make_training_pair(&z, &e, 0.5).unwrap().v_target);
        }

        #[test]
        fn pair_is_affine(t in 0.0f64..=1.0, seed in any::<u64>(), a in -2.0f32..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (z1, z2) = (gaussian_latent(&mut rng, [1, 2, 2, 2]), gaussian_latent(&mut rng, [1, 2, 2, 2]));
            let e = gaussian_latent(&mut rng, [1, 2, 2, 2]);
            let mix = z1.zip_map(&z2, |x, y| a * x + (1.0 - a) * y).unwrap();
            let lhs = make_training_pair(&mix, &e, t).unwrap().z_t;
            let p1 = make_training_pair(&z1, &e, t).unwrap().z_t;
            let p2 = make_training_pair(&z2, &e, t).unwrap().z_t;
            let rhs = p1.zip_map(&p2, |x, y| a * x + (1.0 - a) * y).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
        }
    }
}
