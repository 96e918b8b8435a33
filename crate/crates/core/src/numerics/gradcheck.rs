use super::params::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the analytic gradients stored in `params` against central
/// differences of `loss`, returning the maximum relative error
/// |g_fd − g_an| / max(1e−8, |g_fd| + |g_an|) over all trainable entries.
pub fn grad_check<F>(loss: F, params: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    grad_check_report(loss, params, eps).map(|r| r.max_relative_error)
}

pub fn grad_check_report<F>(loss: F, params: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    let base = loss(params)?;
    let again = loss(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "loss closure is not deterministic ({base} then {again}); disable dropout before checking"
        )));
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let p = params.get(id);
        if !p.trainable {
            continue;
        }
        for i in 0..p.len() {
            let orig = p.values[i];
            work.values_mut(id)[i] = orig + eps;
            let up = loss(&work)?;
            work.values_mut(id)[i] = orig - eps;
            let down = loss(&work)?;
            work.values_mut(id)[i] = orig;

            let fd = (up - down) / (2.0 * eps);
            let an = p.grad[i];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
            if !rel.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient comparison at {}[{i}]",
                    params.name(id)
                )));
            }
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn sum_of_squares() {
        let mut s = ParamStore::new();
        s.insert("p", &[4], vec![0.3, -1.2, 2.5, 0.01]).unwrap();
        let id = s.id("p").unwrap();
        let g: Vec<f64> = s.values(id).iter().map(|v| 2.0 * v).collect();
        s.get_mut(id).grad.copy_from_slice(&g);
        let err = grad_check(|ps| Ok(ps.values(id).iter().map(|v| v * v).sum()), &s, DEFAULT_EPS).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_loss_gives_zero() {
        let mut s = ParamStore::new();
        s.insert("p", &[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(grad_check(|_| Ok(4.2), &s, DEFAULT_EPS).unwrap(), 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut s = ParamStore::new();
        s.insert("p", &[1], vec![1.0]).unwrap();
        let id = s.id("p").unwrap();
        s.get_mut(id).grad[0] = 3.0;
        let r = grad_check_report(|ps| Ok(ps.values(id)[0].powi(2)), &s, DEFAULT_EPS).unwrap();
        assert!(r.max_relative_error > 0.1);
        assert_eq!(r.worst, Some(("p".to_string(), 0)));
    }

    #[test]
    fn nondeterministic_closure_is_rejected() {
        let mut s = ParamStore::new();
        s.insert("p", &[1], vec![1.0]).unwrap();
        let calls = Cell::new(0u32);
        let r = grad_check(
            |_| {
                calls.set(calls.get() + 1);
                Ok(calls.get() as f64)
            },
            &s,
            DEFAULT_EPS,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
        assert!(matches!(grad_check(|_| Ok(0.0), &s, 0.0), Err(Error::Domain(_))));
    }
}
