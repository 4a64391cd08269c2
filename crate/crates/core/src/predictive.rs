//! Two-part predictive: `f(y | x, w) = f(z | x) · E(δ = 1 | w)` on the
//! positive branch with point mass `1 - E(δ = 1 | w)` at zero, cutoff
//! classification, and the small-area plug-in estimator.

use std::collections::BTreeMap;

use crate::diagnostics::Band;
use crate::error::DataError;
use crate::part1::{expected_delta, Part1Draw};
use crate::part2::{conditional_density_grid, conditional_mean, DensityGrid, Part2Draw};
use crate::scalar::Real;

/// Predictive summary for one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSurface<T: Real> {
    pub id: String,
    pub x: Vec<T>,
    pub w: Vec<T>,
    pub z_grid: Vec<T>,
    pub density_mean: Vec<T>,
    pub density_lo: Vec<T>,
    pub density_hi: Vec<T>,
    /// Posterior mean of `E(δ = 1 | w)`.
    pub p_positive: T,
    /// Its 95% band.
    pub p_band: Band<T>,
    /// `P(y = 0 | w) = 1 - p_positive`.
    pub p_zero: T,
    /// Posterior mean of `E(z | x)`.
    pub conditional_mean: T,
    /// `p_positive · E(z | x)`.
    pub point_prediction: T,
    /// `p_positive` times the 95% band of `E(z | x)`.
    pub point_lo: T,
    pub point_hi: T,
    /// Part-2 draws whose gate underflowed at `x`.
    pub underflows: usize,
}

impl<T: Real> PredictiveSurface<T> {
    /// Product of the occurrence probability with the part-2 summaries.
    /// Bands carry only the part-2 variability.
    pub fn from_parts(
        id: String,
        x: Vec<T>,
        w: Vec<T>,
        p_band: Band<T>,
        grid: &DensityGrid<T>,
        conditional_mean: Band<T>,
    ) -> Self {
        let p = p_band.mean;
        Self {
            id,
            x,
            w,
            z_grid: grid.z.clone(),
            density_mean: grid.bands.iter().map(|b| b.mean * p).collect(),
            density_lo: grid.bands.iter().map(|b| b.lo * p).collect(),
            density_hi: grid.bands.iter().map(|b| b.hi * p).collect(),
            p_positive: p,
            p_band,
            p_zero: T::one() - p,
            conditional_mean: conditional_mean.mean,
            point_prediction: p * conditional_mean.mean,
            point_lo: p * conditional_mean.lo,
            point_hi: p * conditional_mean.hi,
            underflows: grid.underflows,
        }
    }
}

/// Predictive surface of a unit with covariates `(x, w)` on `z_grid`.
pub fn combine<T: Real>(
    part1: &[Part1Draw<T>],
    part2: &[Part2Draw<T>],
    id: &str,
    x: &[T],
    w: &[T],
    z_grid: &[T],
    log_z: bool,
) -> Result<PredictiveSurface<T>, DataError> {
    if part1.is_empty() || part2.is_empty() {
        return Err(DataError::Invalid("both parts need posterior draws".into()));
    }
    let p_band = expected_delta(part1, w)?;
    let grid = conditional_density_grid(part2, x, z_grid, log_z)?;
    let cm = conditional_mean(part2, x, log_z).unwrap_or(Band {
        mean: T::zero(),
        lo: T::zero(),
        hi: T::zero(),
    });
    Ok(PredictiveSurface::from_parts(id.to_string(), x.to_vec(), w.to_vec(), p_band, &grid, cm))
}

/// Confusion proportions of a cutoff classification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionSummary<T: Real> {
    pub zero_correct: T,
    pub zero_wrong: T,
    pub positive_correct: T,
    pub positive_wrong: T,
    pub accuracy: T,
    pub cutoff: T,
    pub n: usize,
}

/// Classify each unit as positive iff `p > cutoff` and tabulate against
/// the observed indicators. `zero_wrong` counts true zeros predicted
/// positive; `positive_wrong` true positives predicted zero.
pub fn classify<T: Real>(p_positive: &[T], truth: &[bool], cutoff: T) -> Result<ConfusionSummary<T>, DataError> {
    if p_positive.len() != truth.len() {
        return Err(DataError::Invalid(format!(
            "{} probabilities but {} observed indicators",
            p_positive.len(),
            truth.len()
        )));
    }
    if !(cutoff > T::zero() && cutoff < T::one()) {
        return Err(DataError::Invalid(format!("cutoff {cutoff} outside (0, 1)")));
    }
    if truth.is_empty() {
        return Err(DataError::Empty);
    }
    let mut c = [0usize; 4];
    for (&p, &t) in p_positive.iter().zip(truth) {
        let pred = p > cutoff;
        c[match (t, pred) {
            (false, false) => 0,
            (false, true) => 1,
            (true, true) => 2,
            (true, false) => 3,
        }] += 1;
    }
    let n = T::count(truth.len());
    Ok(ConfusionSummary {
        zero_correct: T::count(c[0]) / n,
        zero_wrong: T::count(c[1]) / n,
        positive_correct: T::count(c[2]) / n,
        positive_wrong: T::count(c[3]) / n,
        accuracy: T::count(c[0] + c[2]) / n,
        cutoff,
        n: truth.len(),
    })
}

/// A unit's contribution to the plug-in estimator: exactly one of an
/// observed response (sampled unit) or a point prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaUnit<T: Real> {
    pub id: String,
    pub area: String,
    pub observed: Option<T>,
    pub predicted: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaEstimate<T: Real> {
    pub area: String,
    pub units: usize,
    pub sampled: usize,
    pub total: T,
    pub mean: T,
}

/// Per-area totals `Σ observed + Σ predicted` and means, sorted by area.
pub fn area_plugin<T: Real>(units: &[AreaUnit<T>]) -> Result<Vec<AreaEstimate<T>>, DataError> {
    let mut acc: BTreeMap<&str, (usize, usize, T)> = BTreeMap::new();
    for u in units {
        let v = match (u.observed, u.predicted) {
            (Some(y), None) => y,
            (None, Some(p)) => p,
            (Some(_), Some(_)) => {
                return Err(DataError::Invalid(format!("unit '{}' is both observed and predicted", u.id)))
            }
            (None, None) => {
                return Err(DataError::Invalid(format!("unit '{}' is neither observed nor predicted", u.id)))
            }
        };
        let e = acc.entry(&u.area).or_insert((0, 0, T::zero()));
        e.0 += 1;
        if u.observed.is_some() {
            e.1 += 1;
        }
        e.2 += v;
    }
    Ok(acc
        .into_iter()
        .map(|(area, (units, sampled, total))| AreaEstimate {
            area: area.to_string(),
            units,
            sampled,
            total,
            mean: total / T::count(units),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Mat, Vector};
    use crate::part2::Atom;
    use proptest::prelude::*;

    fn p1(beta: f64) -> Vec<Part1Draw<f64>> {
        vec![Part1Draw::new(Vector::from_vec(vec![beta]), 1.0, vec![(0.0, 4)]); 3]
    }

    fn p2() -> Vec<Part2Draw<f64>> {
        let atoms = vec![
            Atom {
                mu: Vector::from_vec(vec![10.0, 0.0]),
                sigma: Mat::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]),
            },
            Atom {
                mu: Vector::from_vec(vec![4.0, 2.0]),
                sigma: Mat::from_row_slice(2, 2, &[2.0, -0.3, -0.3, 0.5]),
            },
        ];
        vec![Part2Draw::new(vec![0.6, 0.4], atoms, 1.0, 2, Vector::zeros(2), 1.0, Mat::identity(2, 2)).unwrap(); 3]
    }

    #[test]
    fn certain_zero_gives_zero_surface() {
        let grid: Vec<f64> = (0..50).map(|i| i as f64 * 0.4).collect();
        let s = combine(&p1(1.0), &p2(), "u", &[0.3], &[-1e6], &grid, false).unwrap();
        assert_eq!(s.p_positive, 0.0);
        assert!(s.density_mean.iter().all(|&d| d == 0.0));
        assert_eq!(s.point_prediction, 0.0);
        assert_eq!(s.p_zero, 1.0);
    }

    #[test]
    fn certain_positive_reproduces_part2_exactly() {
        let grid: Vec<f64> = (0..50).map(|i| i as f64 * 0.4).collect();
        let s = combine(&p1(1.0), &p2(), "u", &[0.3], &[1e6], &grid, false).unwrap();
        let g = conditional_density_grid(&p2(), &[0.3], &grid, false).unwrap();
        assert_eq!(s.p_positive, 1.0);
        for (a, b) in s.density_mean.iter().zip(&g.bands) {
            assert_eq!(a.to_bits(), b.mean.to_bits());
        }
    }

    #[test]
    fn classify_conventions() {
        let c = classify(&[0.0, 1.0, 1.0, 0.0], &[false, true, true, false], 0.5).unwrap();
        assert_eq!(c.accuracy, 1.0);
        let c = classify(&[0.5f64, 0.5, 0.5], &[false, true, true], 0.5).unwrap();
        assert_eq!(c.positive_correct, 0.0);
        assert!((c.zero_correct - 1.0 / 3.0).abs() < 1e-15);
        assert!(classify(&[0.1], &[true, false], 0.5).is_err());
    }

    #[test]
    fn area_examples() {
        let u = |id: &str, area: &str, o: Option<f64>, p: Option<f64>| AreaUnit {
            id: id.into(),
            area: area.into(),
            observed: o,
            predicted: p,
        };
        let est = area_plugin(&[
            u("1", "a", Some(10.0), None),
            u("2", "a", Some(20.0), None),
            u("3", "a", None, Some(5.0)),
            u("4", "b", None, Some(0.0)),
        ])
        .unwrap();
        assert_eq!(est[0].total, 35.0);
        assert_eq!(est[0].mean, 35.0 / 3.0);
        assert_eq!(est[1].total, 0.0);
        assert!(area_plugin(&[u("1", "a", Some(1.0), Some(2.0))]).is_err());
        assert!(area_plugin(&[u("1", "a", None, None)]).is_err());
    }

    proptest! {
        #[test]
        fn classify_invariant_under_monotone_maps(ps in proptest::collection::vec(0.0f64..1.0, 1..50),
                                                  cutoff in 0.05f64..0.95) {
            let truth: Vec<bool> = ps.iter().enumerate().map(|(i, _)| i % 3 == 0).collect();
            let a = classify(&ps, &truth, cutoff).unwrap();
            let f = |p: f64| p.powi(3);
            let mapped: Vec<f64> = ps.iter().map(|&p| f(p)).collect();
            let b = classify(&mapped, &truth, f(cutoff)).unwrap();
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert_eq!(a.zero_wrong, b.zero_wrong);
            let s = a.zero_correct + a.zero_wrong + a.positive_correct + a.positive_wrong;
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
