use crate::error::{Error, Result};
use crate::numerics::{matvec_acc, matvec_t_acc, outer_acc, sigmoid};

/// y = σ(W·x + b) ∘ x. Returns (y, σ(W·x + b)).
pub fn gate_forward(x: &[f64], w: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let f = x.len();
    let mut a = b.to_vec();
    matvec_acc(w, f, f, x, &mut a);
    let s: Vec<f64> = a.iter().map(|v| sigmoid(*v)).collect();
    let y = s.iter().zip(x).map(|(s, x)| s * x).collect();
    (y, s)
}

/// Accumulates ∂L/∂W, ∂L/∂b and returns ∂L/∂x.
pub fn gate_backward(x: &[f64], w: &[f64], s: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let f = x.len();
    let da: Vec<f64> = (0..f).map(|i| dy[i] * x[i] * s[i] * (1.0 - s[i])).collect();
    outer_acc(dw, &da, x);
    for (g, d) in db.iter_mut().zip(&da) {
        *g += d;
    }
    let mut dx: Vec<f64> = dy.iter().zip(s).map(|(d, s)| d * s).collect();
    matvec_t_acc(w, f, f, &da, &mut dx);
    dx
}

pub fn context_gate(x: &[f64], w: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let f = x.len();
    if w.len() != f * f {
        return Err(Error::dim("context gate weights", f * f, w.len()));
    }
    if b.len() != f {
        return Err(Error::dim("context gate bias", f, b.len()));
    }
    Ok(gate_forward(x, w, b).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let x = [1.0, -4.0, 0.25];
        assert_eq!(context_gate(&x, &[0.0; 9], &[0.0; 3]).unwrap(), [0.5, -2.0, 0.125]);
        let w: Vec<f64> = (0..9).map(|i| i as f64 - 4.0).collect();
        assert_eq!(context_gate(&[0.0; 3], &w, &[1.0, 2.0, 3.0]).unwrap(), [0.0; 3]);
        let y = context_gate(&x, &[0.0; 9], &[50.0; 3]).unwrap();
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-15 * b.abs() + 1e-20);
        }
        assert!(matches!(context_gate(&x, &[0.0; 8], &[0.0; 3]), Err(Error::Dimension { .. })));
    }

    proptest! {
        #[test]
        fn never_increases_magnitude_or_flips_sign(
            x in prop::collection::vec(-100.0f64..100.0, 4),
            w in prop::collection::vec(-10.0f64..10.0, 16),
            b in prop::collection::vec(-10.0f64..10.0, 4),
        ) {
            let y = context_gate(&x, &w, &b).unwrap();
            for (yi, xi) in y.iter().zip(&x) {
                prop_assert!(yi.abs() <= xi.abs());
                prop_assert!(*yi == 0.0 || yi.signum() == xi.signum());
            }
        }
    }
}
