//! Convergence checks and posterior summaries.

use std::collections::BTreeMap;

use crate::error::Error;
use crate::scalar::Real;

/// PSRF threshold used for the pass/fail flag in reports.
pub const PSRF_THRESHOLD: f64 = 1.1;

/// Minimum draws per chain accepted by [`gelman_rubin`].
pub const MIN_TRACE_LEN: usize = 10;

/// Thinned post-burn-in values of one scalar parameter, `chains × draws`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMatrix<T: Real> {
    pub name: String,
    chains: Vec<Vec<T>>,
}

impl<T: Real> TraceMatrix<T> {
    pub fn new(name: impl Into<String>, chains: Vec<Vec<T>>) -> Result<Self, Error> {
        let name = name.into();
        let len = chains.first().map_or(0, Vec::len);
        if chains.iter().any(|c| c.len() != len) {
            return Err(Error::Diagnostics(format!("{name}: chains have different lengths")));
        }
        if len < MIN_TRACE_LEN {
            return Err(Error::Diagnostics(format!(
                "{name}: need at least {MIN_TRACE_LEN} draws per chain, got {len}"
            )));
        }
        Ok(Self { name, chains })
    }

    pub fn chains(&self) -> &[Vec<T>] {
        &self.chains
    }

    pub fn pooled(&self) -> Vec<T> {
        self.chains.iter().flatten().copied().collect()
    }
}

fn mean<T: Real>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |a, &b| a + b) / T::count(xs.len())
}

fn sample_variance<T: Real>(xs: &[T]) -> T {
    let m = mean(xs);
    xs.iter().fold(T::zero(), |a, &b| a + (b - m) * (b - m)) / T::count(xs.len() - 1)
}

/// Potential scale reduction factor
/// `sqrt(((N-1)/N · W + B/N) / W)` with `W` the mean within-chain variance
/// and `B` `N` times the variance of the chain means.
pub fn gelman_rubin<T: Real>(trace: &TraceMatrix<T>) -> Result<T, Error> {
    let j = trace.chains.len();
    if j < 2 {
        return Err(Error::Diagnostics(format!(
            "{}: Gelman-Rubin needs at least 2 chains (got {j}); rerun with chains >= 2",
            trace.name
        )));
    }
    let n = T::count(trace.chains[0].len());
    let means: Vec<T> = trace.chains.iter().map(|c| mean(c)).collect();
    let w = mean(&trace.chains.iter().map(|c| sample_variance(c)).collect::<Vec<_>>());
    let b = n * sample_variance(&means);
    if w == T::zero() {
        return Ok(if b > T::zero() { T::inf() } else { T::one() });
    }
    Ok((((n - T::one()) / n * w + b / n) / w).sqrt())
}

/// Percentile by linear interpolation of order statistics (position
/// `(N-1)p` in the sorted sample).
pub fn quantile_linear<T: Real>(sorted: &[T], p: f64) -> T {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = T::lit(h - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile as an order statistic (smallest value with empirical CDF `>= p`),
/// used for integer-valued parameters.
pub fn quantile_order_stat<T: Real>(sorted: &[T], p: f64) -> T {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let n = sorted.len();
    let rank = ((n as f64 * p).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn sorted_copy<T: Real>(xs: &[T]) -> Vec<T> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
    v
}

/// Posterior mean with a central 95% interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band<T: Real> {
    pub mean: T,
    pub lo: T,
    pub hi: T,
}

impl<T: Real> Band<T> {
    pub fn from_draws(xs: &[T]) -> Self {
        let s = sorted_copy(xs);
        Self {
            mean: mean(xs),
            lo: quantile_linear(&s, 0.025),
            hi: quantile_linear(&s, 0.975),
        }
    }

    fn from_counts(xs: &[T]) -> Self {
        let s = sorted_copy(xs);
        Self {
            mean: mean(xs),
            lo: quantile_order_stat(&s, 0.025),
            hi: quantile_order_stat(&s, 0.975),
        }
    }

    pub fn scale(self, by: T) -> Self {
        Self {
            mean: self.mean * by,
            lo: self.lo * by,
            hi: self.hi * by,
        }
    }

    pub fn width(&self) -> T {
        self.hi - self.lo
    }

    pub fn contains(&self, x: T) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// The monitored parameter inventory: occurrence coefficients, `alpha1`,
/// part-1 cluster count, `m1` entries, `k0`, `Psi1` diagonal then
/// off-diagonal entries, `alpha2`, part-2 cluster count.
pub fn parameter_inventory(r: usize, var_names: &[String]) -> Vec<String> {
    let mut out: Vec<String> = (0..r).map(|i| format!("beta1_{i}")).collect();
    out.push("alpha1".into());
    out.push("clusters_part1".into());
    for v in var_names {
        out.push(format!("m1_{v}"));
    }
    out.push("k0".into());
    for v in var_names {
        out.push(format!("psi1_{v}"));
    }
    for i in 0..var_names.len() {
        for j in i + 1..var_names.len() {
            out.push(format!("psi1_{}_{}", var_names[i], var_names[j]));
        }
    }
    out.push("alpha2".into());
    out.push("clusters_part2".into());
    out
}

/// Names of `Psi1` entries in inventory order, with their `(row, col)`.
pub fn psi1_entries(var_names: &[String]) -> Vec<(String, usize, usize)> {
    let mut out: Vec<_> = var_names
        .iter()
        .enumerate()
        .map(|(i, v)| (format!("psi1_{v}"), i, i))
        .collect();
    for i in 0..var_names.len() {
        for j in i + 1..var_names.len() {
            out.push((format!("psi1_{}_{}", var_names[i], var_names[j]), i, j));
        }
    }
    out
}

/// Default joint variable names `z, x1, ..., xp`.
pub fn default_var_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|i| if i == 0 { "z".to_string() } else { format!("x{i}") })
        .collect()
}

fn is_count_parameter(name: &str) -> bool {
    name.starts_with("clusters_")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow<T: Real> {
    pub name: String,
    pub band: Band<T>,
}

/// One row (mean, 2.5%, 97.5%) per monitored parameter, in the order given.
/// Cluster counts use order-statistic percentiles, everything else linear
/// interpolation.
pub fn posterior_table<T: Real>(
    draws: &BTreeMap<String, Vec<T>>,
    monitored: &[String],
) -> Result<Vec<TableRow<T>>, Error> {
    monitored
        .iter()
        .map(|name| {
            let xs = draws
                .get(name)
                .ok_or_else(|| Error::Diagnostics(format!("unknown parameter '{name}'")))?;
            if xs.is_empty() {
                return Err(Error::Diagnostics(format!("no draws for '{name}'")));
            }
            let band = if is_count_parameter(name) {
                Band::from_counts(xs)
            } else {
                Band::from_draws(xs)
            };
            Ok(TableRow {
                name: name.clone(),
                band,
            })
        })
        .collect()
}

/// `parameter  mean  95% CI` rows, tab separated.
pub fn format_table<T: Real>(rows: &[TableRow<T>]) -> String {
    let mut out = String::from("parameter\tmean\tci_lo\tci_hi\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.name, r.band.mean, r.band.lo, r.band.hi));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsrfRow<T: Real> {
    pub name: String,
    pub psrf: T,
    pub pass: bool,
}

/// PSRF for every monitored trace, flagged against [`PSRF_THRESHOLD`].
pub fn psrf_report<T: Real>(traces: &[TraceMatrix<T>]) -> Result<Vec<PsrfRow<T>>, Error> {
    traces
        .iter()
        .map(|t| {
            let psrf = gelman_rubin(t)?;
            Ok(PsrfRow {
                name: t.name.clone(),
                psrf,
                pass: psrf < T::lit(PSRF_THRESHOLD),
            })
        })
        .collect()
}

pub fn format_psrf<T: Real>(rows: &[PsrfRow<T>]) -> String {
    let mut out = String::from("parameter\tpsrf\tstatus\n");
    for r in rows {
        let status = if r.pass { "pass" } else { "FAIL" };
        out.push_str(&format!("{}\t{}\t{}\n", r.name, r.psrf, status));
    }
    out
}
