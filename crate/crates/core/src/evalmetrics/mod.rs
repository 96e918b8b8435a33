//! Scoring of prediction tracks against annotations.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::dataio::{EmotionTrack, TrackSet};
use crate::error::{Error, Result};

/// Mean squared error.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!("length mismatch: {} predictions, {} targets", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Data("mse of empty series".into()));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Pearson correlation, which does not exist when a series is constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correlation {
    Defined(f64),
    Undefined,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Defined(v) => Some(v),
            Correlation::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Correlation::Defined(_))
    }
}

impl fmt::Display for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correlation::Defined(v) => write!(f, "{v}"),
            Correlation::Undefined => f.write_str("undefined"),
        }
    }
}

pub fn pearson(pred: &[f64], truth: &[f64]) -> Result<Correlation> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!("length mismatch: {} predictions, {} targets", pred.len(), truth.len())));
    }
    if pred.len() < 2 {
        return Err(Error::Data(format!("correlation needs at least 2 points, got {}", pred.len())));
    }
    // The centered sums of a constant series can round to a tiny nonzero.
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(pred) || constant(truth) {
        return Ok(Correlation::Undefined);
    }
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = truth.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pred.iter().zip(truth) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation::Undefined);
    }
    Ok(Correlation::Defined((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Metrics per movie, then an unweighted mean over movies.
    #[default]
    MacroPerMovie,
    /// All annotated seconds scored as one series.
    Pooled,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::MacroPerMovie => "macro_per_movie",
            Aggregation::Pooled => "pooled",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro_per_movie" => Ok(Aggregation::MacroPerMovie),
            "pooled" => Ok(Aggregation::Pooled),
            other => Err(Error::Config(format!(
                "unknown aggregation {other:?} (expected macro_per_movie or pooled)"
            ))),
        }
    }
}

/// Valence and arousal scores of one movie.
#[derive(Debug, Clone, PartialEq)]
pub struct MovieMetrics {
    pub movie_id: String,
    pub seconds: usize,
    pub mse: [f64; 2],
    pub pcc: [Correlation; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub aggregation: Aggregation,
    /// Indexed valence, arousal.
    pub mse: [f64; 2],
    pub pcc: [Correlation; 2],
    pub per_movie: Vec<MovieMetrics>,
    /// Movies left out of the macro PCC mean, per dimension.
    pub undefined_pcc: [usize; 2],
}

const DIMS: [&str; 2] = ["valence", "arousal"];

impl EvalReport {
    pub fn valence_mse(&self) -> f64 {
        self.mse[0]
    }

    pub fn valence_pcc(&self) -> Correlation {
        self.pcc[0]
    }

    pub fn arousal_mse(&self) -> f64 {
        self.mse[1]
    }

    pub fn arousal_pcc(&self) -> Correlation {
        self.pcc[1]
    }

    /// `metric,aggregation,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,aggregation,value\n");
        for (d, name) in DIMS.iter().enumerate() {
            let _ = writeln!(out, "{name}_mse,{},{}", self.aggregation, self.mse[d]);
            let _ = writeln!(out, "{name}_pcc,{},{}", self.aggregation, self.pcc[d]);
        }
        for (d, name) in DIMS.iter().enumerate() {
            let _ = writeln!(out, "{name}_pcc_undefined_movies,{},{}", self.aggregation, self.undefined_pcc[d]);
        }
        out
    }

    /// Per-movie breakdown as CSV.
    pub fn per_movie_csv(&self) -> String {
        let mut out = String::from("movie_id,seconds,valence_mse,valence_pcc,arousal_mse,arousal_pcc\n");
        for m in &self.per_movie {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                m.movie_id, m.seconds, m.mse[0], m.pcc[0], m.mse[1], m.pcc[1]
            );
        }
        out
    }

    /// Two header lines and one value row, seven characters per column.
    pub fn table(&self) -> String {
        let cell = |c: Correlation| match c {
            Correlation::Defined(v) => format!("{v:>7.4}"),
            Correlation::Undefined => format!("{:>7}", "n/a"),
        };
        let values = [
            format!("{:>7.4}", self.mse[0]),
            cell(self.pcc[0]),
            format!("{:>7.4}", self.mse[1]),
            cell(self.pcc[1]),
        ];
        format!(
            "Valence Valence Arousal Arousal\n    MSE     PCC     MSE     PCC\n{}\n",
            values.join(" ")
        )
    }

    /// Table plus the aggregation mode and excluded-movie counts.
    pub fn render(&self) -> String {
        let mut out = format!("aggregation: {}\n", self.aggregation);
        out.push_str(&self.table());
        if self.undefined_pcc != [0, 0] {
            let _ = writeln!(
                out,
                "movies without a defined PCC: valence {}, arousal {}",
                self.undefined_pcc[0], self.undefined_pcc[1]
            );
        }
        out
    }
}

fn coverage_gaps(preds: &TrackSet, annos: &TrackSet) -> Vec<String> {
    let mut gaps = Vec::new();
    for (id, anno) in annos {
        match preds.get(id) {
            None => gaps.push(format!("{id} (all {} seconds)", anno.len())),
            Some(p) if p.len() < anno.len() => gaps.push(format!("{id} t={}..{}", p.len(), anno.len() - 1)),
            Some(_) => {}
        }
    }
    gaps
}

fn movie_metrics(pred: &EmotionTrack, anno: &EmotionTrack) -> Result<MovieMetrics> {
    let n = anno.len();
    let mut mse_v = [0.0; 2];
    let mut pcc_v = [Correlation::Undefined; 2];
    for d in 0..2 {
        let (p, t) = (&pred.dims()[d][..n], anno.dims()[d]);
        mse_v[d] = mse(p, t)?;
        if n >= 2 {
            pcc_v[d] = pearson(p, t)?;
        }
    }
    Ok(MovieMetrics {
        movie_id: anno.movie_id.clone(),
        seconds: n,
        mse: mse_v,
        pcc: pcc_v,
    })
}

/// Scores every annotated second. Predictions beyond the annotated range
/// or for unannotated movies are ignored; missing ones are an error.
pub fn evaluate_run(preds: &TrackSet, annos: &TrackSet, aggregation: Aggregation) -> Result<EvalReport> {
    let gaps = coverage_gaps(preds, annos);
    if !gaps.is_empty() {
        return Err(Error::Coverage(gaps.join(", ")));
    }
    let annos: Vec<&EmotionTrack> = annos.values().filter(|a| !a.is_empty()).collect();
    if annos.is_empty() {
        return Err(Error::Data("no annotated seconds to evaluate".into()));
    }
    let per_movie = annos
        .iter()
        .map(|a| movie_metrics(&preds[&a.movie_id], a))
        .collect::<Result<Vec<_>>>()?;
    let mut undefined = [0; 2];
    for m in &per_movie {
        for d in 0..2 {
            if !m.pcc[d].is_defined() {
                undefined[d] += 1;
            }
        }
    }
    let (mse_v, pcc_v) = match aggregation {
        Aggregation::MacroPerMovie => {
            let k = per_movie.len() as f64;
            let mut mse_v = [0.0; 2];
            let mut pcc_v = [Correlation::Undefined; 2];
            for d in 0..2 {
                mse_v[d] = per_movie.iter().map(|m| m.mse[d]).sum::<f64>() / k;
                let defined: Vec<f64> = per_movie.iter().filter_map(|m| m.pcc[d].value()).collect();
                if !defined.is_empty() {
                    pcc_v[d] = Correlation::Defined(defined.iter().sum::<f64>() / defined.len() as f64);
                }
            }
            (mse_v, pcc_v)
        }
        Aggregation::Pooled => {
            let mut mse_v = [0.0; 2];
            let mut pcc_v = [Correlation::Undefined; 2];
            for d in 0..2 {
                let mut p = Vec::new();
                let mut t = Vec::new();
                for a in &annos {
                    p.extend_from_slice(&preds[&a.movie_id].dims()[d][..a.len()]);
                    t.extend_from_slice(a.dims()[d]);
                }
                mse_v[d] = mse(&p, &t)?;
                if p.len() >= 2 {
                    pcc_v[d] = pearson(&p, &t)?;
                }
            }
            (mse_v, pcc_v)
        }
    };
    Ok(EvalReport {
        aggregation,
        mse: mse_v,
        pcc: pcc_v,
        per_movie,
        undefined_pcc: undefined,
    })
}

/// Pointwise mean of K aligned runs.
pub fn ensemble_average(runs: &[TrackSet]) -> Result<TrackSet> {
    let first = runs.first().ok_or_else(|| Error::Data("ensemble needs at least one run".into()))?;
    for (k, run) in runs.iter().enumerate().skip(1) {
        let aligned = run.len() == first.len()
            && run
                .iter()
                .zip(first)
                .all(|((id, t), (id0, t0))| id == id0 && t.len() == t0.len());
        if !aligned {
            return Err(Error::Data(format!("run {k} does not cover the same movies and seconds as run 0")));
        }
    }
    let k = runs.len() as f64;
    Ok(first
        .keys()
        .map(|id| {
            let n = first[id].len();
            let mut out = EmotionTrack::new(id.clone());
            for t in 0..n {
                let v = runs.iter().map(|r| r[id].valence[t]).sum::<f64>() / k;
                let a = runs.iter().map(|r| r[id].arousal[t]).sum::<f64>() / k;
                out.push(v, a);
            }
            (id.clone(), out)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn track(id: &str, v: &[f64], a: &[f64]) -> EmotionTrack {
        EmotionTrack {
            movie_id: id.into(),
            valence: v.to_vec(),
            arousal: a.to_vec(),
        }
    }

    fn set(tracks: Vec<EmotionTrack>) -> TrackSet {
        tracks.into_iter().map(|t| (t.movie_id.clone(), t)).collect()
    }

    fn random_set<R: Rng>(rng: &mut R, movies: usize, len: usize) -> TrackSet {
        set((0..movies)
            .map(|m| {
                let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
                track(&format!("m{m}"), &v, &a)
            })
            .collect())
    }

    #[test]
    fn mse_examples() {
        let t = [0.1, -0.4, 0.9];
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        let shifted: Vec<f64> = t.iter().map(|v| v + 0.3).collect();
        assert!((mse(&shifted, &t).unwrap() - 0.09).abs() < 1e-12);
        assert!(matches!(mse(&t, &t[..2]), Err(Error::Data(_))));
    }

    #[test]
    fn pearson_examples() {
        let t = [0.1, -0.4, 0.9, 0.3];
        assert_eq!(pearson(&t, &t).unwrap(), Correlation::Defined(1.0));
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert_eq!(pearson(&neg, &t).unwrap(), Correlation::Defined(-1.0));
        assert_eq!(pearson(&[0.2; 4], &t).unwrap(), Correlation::Undefined);
        assert_eq!(pearson(&t, &[0.2; 4]).unwrap(), Correlation::Undefined);
        let ramp: Vec<f64> = (0..20).map(f64::from).collect();
        assert_eq!(pearson(&[0.3; 20], &ramp).unwrap(), Correlation::Undefined);
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(Error::Data(_))));
    }

    #[test]
    fn perfect_predictions() {
        let annos = set(vec![track("a", &[0.1, 0.5, -0.2], &[0.0, 0.3, 0.9]), track("b", &[0.4, -0.4], &[1.0, 0.0])]);
        for mode in [Aggregation::MacroPerMovie, Aggregation::Pooled] {
            let r = evaluate_run(&annos, &annos, mode).unwrap();
            assert_eq!(r.mse, [0.0, 0.0]);
            for c in r.pcc {
                assert!((c.value().unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_movie_hand_aggregation() {
        let annos = set(vec![track("a", &[0.0, 1.0, 2.0], &[1.0, 1.0, 0.0]), track("b", &[1.0, 0.0], &[0.5, 0.5])]);
        let preds = set(vec![track("a", &[0.0, 1.0, 1.0], &[0.0, 1.0, 0.0]), track("b", &[0.0, 0.0], &[0.5, 1.0])]);
        let r = evaluate_run(&preds, &annos, Aggregation::MacroPerMovie).unwrap();
        // Movie a: valence errors 0,0,1 → 1/3; movie b: 1,0 → 1/2.
        assert!((r.valence_mse() - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-12);
        // Arousal: a → 1/3, b → 1/8.
        assert!((r.arousal_mse() - (1.0 / 3.0 + 0.125) / 2.0).abs() < 1e-12);
        // Valence PCC: a = 0.8660254..., b undefined (constant prediction).
        assert!((r.valence_pcc().value().unwrap() - 0.75f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.undefined_pcc, [1, 1]);
        // Arousal PCC: a = 0.5, b undefined (constant annotation).
        assert!((r.arousal_pcc().value().unwrap() - 0.5).abs() < 1e-12);

        let pooled = evaluate_run(&preds, &annos, Aggregation::Pooled).unwrap();
        assert!((pooled.valence_mse() - 2.0 / 5.0).abs() < 1e-12);
        assert!((pooled.arousal_mse() - 1.25 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn missing_predictions_are_listed() {
        let annos = set(vec![track("a", &[0.0, 1.0, 2.0], &[1.0, 1.0, 0.0]), track("b", &[1.0, 0.0], &[0.5, 0.5])]);
        let preds = set(vec![track("a", &[0.0], &[0.0])]);
        match evaluate_run(&preds, &annos, Aggregation::MacroPerMovie) {
            Err(Error::Coverage(msg)) => {
                assert!(msg.contains("a t=1..2") && msg.contains("b (all 2 seconds)"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn table_layout() {
        let r = EvalReport {
            aggregation: Aggregation::MacroPerMovie,
            mse: [0.0837, 0.1334],
            pcc: [Correlation::Defined(0.1786), Correlation::Defined(0.3358)],
            per_movie: vec![],
            undefined_pcc: [0, 0],
        };
        let table = r.table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "Valence Valence Arousal Arousal");
        assert_eq!(lines[1], "    MSE     PCC     MSE     PCC");
        assert!(lines[2].contains("0.0837  0.1786  0.1334  0.3358"));
        let csv = r.to_csv();
        let metrics: Vec<&str> = csv.lines().skip(1).take(4).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(metrics, ["valence_mse", "valence_pcc", "arousal_mse", "arousal_pcc"]);
        let undefined = EvalReport {
            pcc: [Correlation::Undefined, Correlation::Defined(0.5)],
            ..r
        };
        assert!(undefined.table().lines().nth(2).unwrap().contains("    n/a"));
        assert!(undefined.to_csv().contains("valence_pcc,macro_per_movie,undefined"));
    }

    #[test]
    fn ensemble_examples() {
        let mut rng = SplitMix64::seed_from_u64(1);
        let run = random_set(&mut rng, 3, 20);
        assert_eq!(ensemble_average(&[run.clone(), run.clone(), run.clone()]).unwrap(), run);
        let truth = random_set(&mut rng, 2, 30);
        let shift = |d: f64| -> TrackSet {
            truth
                .iter()
                .map(|(id, t)| {
                    let v = t.valence.iter().map(|x| x + d).collect::<Vec<_>>();
                    let a = t.arousal.iter().map(|x| x - d).collect::<Vec<_>>();
                    (id.clone(), track(id, &v, &a))
                })
                .collect()
        };
        let ens = ensemble_average(&[shift(0.25), shift(-0.25)]).unwrap();
        let r = evaluate_run(&ens, &truth, Aggregation::Pooled).unwrap();
        assert_eq!(r.mse, [0.0, 0.0]);
        let short = random_set(&mut rng, 3, 19);
        assert!(matches!(ensemble_average(&[run.clone(), short]), Err(Error::Data(_))));
        assert!(ensemble_average(&[]).is_err());
    }

    #[test]
    fn ensemble_never_worse_than_mean_member() {
        let mut rng = SplitMix64::seed_from_u64(2);
        for _ in 0..100 {
            let truth = random_set(&mut rng, 2, 25);
            let runs: Vec<TrackSet> = (0..5).map(|_| random_set(&mut rng, 2, 25)).collect();
            let ens = ensemble_average(&runs).unwrap();
            for mode in [Aggregation::MacroPerMovie, Aggregation::Pooled] {
                let e = evaluate_run(&ens, &truth, mode).unwrap();
                for d in 0..2 {
                    let mean: f64 =
                        runs.iter().map(|r| evaluate_run(r, &truth, mode).unwrap().mse[d]).sum::<f64>() / 5.0;
                    assert!(e.mse[d] <= mean);
                }
            }
        }
    }

    fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed in any::<u64>(), n in 2usize..200) {
            let mut rng = SplitMix64::seed_from_u64(seed);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let direct: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
            prop_assert!((mse(&x, &y).unwrap() - direct).abs() < 1e-12);
            prop_assert!((pearson(&x, &y).unwrap().value().unwrap() - brute_pearson(&x, &y)).abs() < 1e-12);
        }

        #[test]
        fn affine_invariance(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0, c in -5.0f64..5.0) {
            let mut rng = SplitMix64::seed_from_u64(seed);
            let x: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = pearson(&x, &y).unwrap().value().unwrap();
            let up: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let down: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
            prop_assert!((pearson(&up, &y).unwrap().value().unwrap() - r).abs() < 1e-12);
            prop_assert!((pearson(&down, &y).unwrap().value().unwrap() + r).abs() < 1e-12);
            let xc: Vec<f64> = x.iter().map(|v| v + c).collect();
            let yc: Vec<f64> = y.iter().map(|v| v + c).collect();
            prop_assert!((mse(&xc, &yc).unwrap() - mse(&x, &y).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn pooled_matches_weighted_sums(seed in any::<u64>(), lens in proptest::collection::vec(1usize..30, 1..5)) {
            let mut rng = SplitMix64::seed_from_u64(seed);
            let mk = |rng: &mut SplitMix64| -> TrackSet {
                set(lens.iter().enumerate().map(|(m, &l)| {
                    let v: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let a: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
                    track(&format!("m{m}"), &v, &a)
                }).collect())
            };
            let (preds, annos) = (mk(&mut rng), mk(&mut rng));
            let r = evaluate_run(&preds, &annos, Aggregation::Pooled).unwrap();
            let total: usize = lens.iter().sum();
            for d in 0..2 {
                let sse: f64 = annos.iter().map(|(id, a)| {
                    a.dims()[d].iter().zip(preds[id].dims()[d]).map(|(t, p)| (p - t).powi(2)).sum::<f64>()
                }).sum();
                prop_assert!((r.mse[d] - sse / total as f64).abs() < 1e-12);
            }
        }
    }
}
