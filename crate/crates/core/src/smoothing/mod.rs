//! Low-pass post-smoothing of prediction tracks.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Direct-form IIR filter coefficients with `a[0] == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IirCoefficients {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub order: usize,
    pub wn: f64,
    /// z-plane poles; every zero sits at z = −1.
    pub poles: Vec<Complex64>,
}

impl IirCoefficients {
    /// Frequency response at normalized angular frequency `omega` ∈ [0, π],
    /// evaluated in factored form to avoid cancellation near DC.
    pub fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        self.poles
            .iter()
            .fold(Complex64::new(self.b[0], 0.0), |acc, p| acc * (1.0 + z1) / (1.0 - p * z1))
    }

    pub fn magnitude(&self, omega: f64) -> f64 {
        self.response(omega).norm()
    }

    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }

    /// Edge padding length used by [`filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * (self.order + 1)
    }

    /// CSV rows `b,...` and `a,...`.
    pub fn to_csv(&self) -> String {
        let row = |tag: &str, v: &[f64]| {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            format!("{tag},{}\n", vals.join(","))
        };
        row("b", &self.b) + &row("a", &self.a)
    }
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (k, v) in c.iter().enumerate() {
            next[k] += v;
            next[k + 1] -= v * r;
        }
        c = next;
    }
    c
}

fn binomial_row(n: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for _ in 0..n {
        let mut next = vec![1.0; row.len() + 1];
        for k in 1..row.len() {
            next[k] = row[k - 1] + row[k];
        }
        row = next;
    }
    row
}

/// Digital Butterworth low-pass of order `n` with cutoff `wn` as a
/// fraction of Nyquist, via the prewarped bilinear transform.
pub fn butter_design(order: usize, wn: f64) -> Result<IirCoefficients> {
    if order == 0 {
        return Err(Error::Domain("filter order must be at least 1".into()));
    }
    if !(wn > 0.0 && wn < 1.0) {
        return Err(Error::Domain(format!("cutoff {wn} outside (0, 1)")));
    }
    let n = order as f64;
    let warped = (std::f64::consts::PI * wn / 2.0).tan();
    let poles: Vec<Complex64> = (1..=order)
        .map(|k| {
            let s = Complex64::from_polar(1.0, std::f64::consts::PI * (2.0 * k as f64 + n - 1.0) / (2.0 * n)) * warped;
            (1.0 + s) / (1.0 - s)
        })
        .collect();
    let a: Vec<f64> = poly_from_roots(&poles).iter().map(|c| c.re).collect();
    let binom = binomial_row(order);
    // Unit DC gain: b(1) = a(1) = Π(1 − p), taken from the factors.
    let gain = poles.iter().map(|p| 1.0 - p).product::<Complex64>().re / 2f64.powi(order as i32);
    let b = binom.iter().map(|v| v * gain).collect();
    Ok(IirCoefficients { b, a, order, wn, poles })
}

/// Transposed direct-form II filter. Returns the output and final state.
pub fn lfilter(b: &[f64], a: &[f64], x: &[f64], zi: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let n = b.len().max(a.len());
    let coef = |c: &[f64], i: usize| c.get(i).copied().unwrap_or(0.0) / a[0];
    let mut z = match zi {
        Some(z) => z.to_vec(),
        None => vec![0.0; n - 1],
    };
    let mut y = Vec::with_capacity(x.len());
    for &xn in x {
        let yn = coef(b, 0) * xn + z.first().copied().unwrap_or(0.0);
        for i in 0..n - 1 {
            let next = if i + 1 < n - 1 { z[i + 1] } else { 0.0 };
            z[i] = coef(b, i + 1) * xn + next - coef(a, i + 1) * yn;
        }
        y.push(yn);
    }
    (y, z)
}

/// Initial state giving the step response's steady state for unit input.
pub fn lfilter_zi(b: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    let n = b.len().max(a.len());
    if n < 2 {
        return Ok(Vec::new());
    }
    let coef = |c: &[f64], i: usize| c.get(i).copied().unwrap_or(0.0) / a[0];
    let m = n - 1;
    // I − Aᵀ, with A the companion matrix of the denominator.
    let mut lhs = DMatrix::<f64>::identity(m, m);
    for i in 0..m {
        lhs[(i, 0)] += coef(a, i + 1);
        if i + 1 < m {
            lhs[(i, i + 1)] -= 1.0;
        }
    }
    let rhs = DVector::from_iterator(m, (0..m).map(|i| coef(b, i + 1) - coef(a, i + 1) * coef(b, 0)));
    lhs.lu()
        .solve(&rhs)
        .map(|v| v.iter().copied().collect())
        .ok_or_else(|| Error::Numeric("singular steady-state system".into()))
}

fn odd_extend(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    out.extend_from_slice(x);
    out.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    out
}

/// Filtered track, plus a warning when the short-track fallback was used.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub values: Vec<f64>,
    pub warning: Option<String>,
}

fn forward_backward(c: &IirCoefficients, zi: &[f64], ext: &[f64]) -> Vec<f64> {
    let scaled = |x0: f64| -> Vec<f64> { zi.iter().map(|z| z * x0).collect() };
    let (mut y, _) = lfilter(&c.b, &c.a, ext, Some(&scaled(ext[0])));
    y.reverse();
    let (mut y, _) = lfilter(&c.b, &c.a, &y, Some(&scaled(y[0])));
    y.reverse();
    y
}

fn uniform_fallback(x: &[f64]) -> Filtered {
    let n = x.len();
    let mut window = n.min(5);
    if window.is_multiple_of(2) {
        window -= 1;
    }
    let values = weighted_moving_average(x, &vec![1.0; window]).expect("uniform window within track");
    let warning = format!("track of {n} samples is too short for zero-phase filtering; used a {window}-point moving average");
    log::warn!("{warning}");
    Filtered {
        values,
        warning: Some(warning),
    }
}

/// Zero-phase filtering with odd-reflection padding of `3·(order+1)`
/// samples and steady-state initial conditions. The forward-backward and
/// backward-forward passes are averaged so that reversing the input
/// reverses the output exactly.
pub fn filtfilt(c: &IirCoefficients, x: &[f64]) -> Result<Filtered> {
    if x.is_empty() {
        return Ok(Filtered {
            values: Vec::new(),
            warning: None,
        });
    }
    let pad = c.pad_len();
    if x.len() <= pad {
        return Ok(uniform_fallback(x));
    }
    let zi = lfilter_zi(&c.b, &c.a)?;
    let ext = odd_extend(x, pad);
    let fb = forward_backward(c, &zi, &ext);
    let mut rev = ext.clone();
    rev.reverse();
    let bf = forward_backward(c, &zi, &rev);
    let n = ext.len();
    let values = (pad..n - pad).map(|i| 0.5 * (fb[i] + bf[n - 1 - i])).collect();
    Ok(Filtered { values, warning: None })
}

/// Single forward pass, initialized at the steady state of the first sample.
pub fn causal_filter(c: &IirCoefficients, x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let zi: Vec<f64> = lfilter_zi(&c.b, &c.a)?.iter().map(|z| z * x[0]).collect();
    Ok(lfilter(&c.b, &c.a, x, Some(&zi)).0)
}

/// Centered weighted moving average. Windows are truncated at the edges and
/// the remaining weights renormalized.
pub fn weighted_moving_average(x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if w.is_empty() || w.len().is_multiple_of(2) {
        return Err(Error::Domain(format!("window length {} must be odd", w.len())));
    }
    if let Some(bad) = w.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("moving-average weight {bad} is not positive")));
    }
    if w.len() > x.len() {
        return Err(Error::Domain(format!(
            "window length {} exceeds track length {}",
            w.len(),
            x.len()
        )));
    }
    let half = w.len() / 2;
    let n = x.len() as isize;
    Ok((0..n)
        .map(|t| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, wk) in w.iter().enumerate() {
                let i = t + k as isize - half as isize;
                if (0..n).contains(&i) {
                    acc += wk * x[i as usize];
                    norm += wk;
                }
            }
            acc / norm
        })
        .collect())
}

/// Post-smoothing choice for prediction tracks.
#[derive(Debug, Clone, PartialEq)]
pub enum SmootherSpec {
    Butterworth { order: usize, wn: f64 },
    MovingAverage(Vec<f64>),
    None,
}

impl Default for SmootherSpec {
    fn default() -> Self {
        SmootherSpec::Butterworth { order: 2, wn: 0.05 }
    }
}

impl SmootherSpec {
    /// Normalizes moving-average weights and checks parameters.
    pub fn validated(self) -> Result<Self> {
        match self {
            SmootherSpec::Butterworth { order, wn } => {
                butter_design(order, wn)?;
                Ok(self)
            }
            SmootherSpec::MovingAverage(w) => {
                if w.is_empty() || w.len().is_multiple_of(2) {
                    return Err(Error::Domain(format!("window length {} must be odd", w.len())));
                }
                if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(Error::Domain("moving-average weights must be positive".into()));
                }
                let s: f64 = w.iter().sum();
                Ok(SmootherSpec::MovingAverage(w.iter().map(|v| v / s).collect()))
            }
            SmootherSpec::None => Ok(self),
        }
    }

    /// Smooths one track. `causal` selects a single forward pass for
    /// Butterworth filters; moving averages are always centered.
    pub fn apply(&self, x: &[f64], causal: bool) -> Result<Filtered> {
        match self {
            SmootherSpec::Butterworth { order, wn } => {
                let c = butter_design(*order, *wn)?;
                if causal {
                    Ok(Filtered {
                        values: causal_filter(&c, x)?,
                        warning: None,
                    })
                } else {
                    filtfilt(&c, x)
                }
            }
            SmootherSpec::MovingAverage(w) => {
                if w.len() > x.len() {
                    return Ok(uniform_fallback(x));
                }
                Ok(Filtered {
                    values: weighted_moving_average(x, w)?,
                    warning: None,
                })
            }
            SmootherSpec::None => Ok(Filtered {
                values: x.to_vec(),
                warning: None,
            }),
        }
    }
}

impl fmt::Display for SmootherSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SmootherSpec::Butterworth { .. } => f.write_str("butterworth"),
            SmootherSpec::MovingAverage(_) => f.write_str("moving_average"),
            SmootherSpec::None => f.write_str("none"),
        }
    }
}

/// Parses the smoother kind name; parameters come from separate settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmootherKind {
    Butterworth,
    MovingAverage,
    None,
}

impl FromStr for SmootherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "butterworth" => Ok(SmootherKind::Butterworth),
            "moving_average" => Ok(SmootherKind::MovingAverage),
            "none" => Ok(SmootherKind::None),
            other => Err(Error::Config(format!(
                "unknown smoother {other:?} (expected butterworth, moving_average or none)"
            ))),
        }
    }
}
