use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::real::Real;
use crate::tensor::Tensor;

pub(crate) fn normal<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

/// Normal draws resampled until they fall within two standard deviations.
pub fn truncated_normal<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::lit(z * std);
        }
    })
}

/// `U(−1/√fan_in, 1/√fan_in)`.
pub fn uniform_fan_in<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / num_traits::Float::sqrt(fan_in as f64);
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = truncated_normal(&mut rng, &[10_000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.data().iter().sum::<f64>() / 10_000.0;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10_000.0;
        // Truncation at 2σ shrinks the standard deviation to about 0.88σ.
        assert!((var.sqrt() - 0.0176).abs() < 0.001, "{}", var.sqrt());
    }

    #[test]
    fn fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f32> = uniform_fan_in(&mut rng, &[100, 50], 100);
        assert!(t.data().iter().all(|v| v.abs() <= 0.1));
    }
}
