use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};

/// Inverted-dropout scale factors: 0 with probability `rate`, else 1/(1−rate).
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn dropout_apply<R: Rng + ?Sized>(x: &[f64], rate: f64, mode: Mode, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.to_vec());
    }
    let mask = dropout_mask(x.len(), rate, rng);
    Ok(x.iter().zip(mask).map(|(v, m)| v * m).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::SplitMix64;

    #[test]
    fn identity_cases() {
        let mut rng = SplitMix64::seed_from_u64(1);
        let x = [1.0, -2.0, 3.5];
        assert_eq!(dropout_apply(&x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
        assert_eq!(dropout_apply(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert!(matches!(dropout_apply(&x, 1.0, Mode::Train, &mut rng), Err(Error::Domain(_))));
        assert!(dropout_apply(&x, -0.1, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn expectation_is_preserved() {
        let mut rng = SplitMix64::seed_from_u64(99);
        let x = vec![1.0; 1000];
        let mut sums = vec![0.0; 1000];
        let trials = 1000;
        for _ in 0..trials {
            let y = dropout_apply(&x, 0.5, Mode::Train, &mut rng).unwrap();
            assert!(y.iter().all(|v| *v == 0.0 || *v == 2.0));
            for (s, v) in sums.iter_mut().zip(&y) {
                *s += v;
            }
        }
        for s in sums {
            let mean = s / trials as f64;
            assert!((0.9..=1.1).contains(&mean), "{mean}");
        }
    }
}
