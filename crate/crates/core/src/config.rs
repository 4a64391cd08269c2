//! Hyperparameters, MCMC schedule and the flat key/value config format.
//!
//! A configuration is built once per run: defaults are derived from the
//! positive-response subsample, user overrides are applied on top, and the
//! result is validated and echoed verbatim into the run directory.
//!
//! Text format: one `key = value` per line, `#` starts a comment. Vectors are
//! whitespace separated; matrices list rows separated by `;`. Reals are
//! written in shortest round-trip form so re-reading an echo is bit exact.

use std::fmt::Write as _;

use crate::error::{ConfigErrors, Violation};
use crate::linalg::{is_spd, spd_inverse, Mat, SpdFactor, Vector};
use crate::scalar::Real;

pub const DEFAULT_TRUNCATION: usize = 50;
pub const DEFAULT_MH_STEP_SCALE: f64 = 0.1;

/// Occurrence-part hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Part1Hyper<T: Real> {
    /// Gamma shape for the DP precision.
    pub a1_0: T,
    /// Gamma rate for the DP precision.
    pub b1_0: T,
    pub beta1_0: Vector<T>,
    pub s_beta1_0: Mat<T>,
    /// Random-walk proposal scale, in units of the prior covariance factor.
    pub mh_step_scale: T,
    /// Tune the proposal scale during burn-in towards 20-40% acceptance.
    pub mh_adapt: bool,
    pub beta_update: BetaUpdate,
}

/// Target of the `β` random-walk step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaUpdate {
    /// Condition on the latent thresholds; proposals breaking sign
    /// consistency are rejected.
    Conditional,
    /// Condition on the cluster partition only, integrating the shared
    /// threshold values out, then redraw them.
    Collapsed,
}

impl BetaUpdate {
    fn as_str(self) -> &'static str {
        match self {
            BetaUpdate::Conditional => "conditional",
            BetaUpdate::Collapsed => "collapsed",
        }
    }
}

/// Which reading of the `S2 = Psi2^-1 = S/2` default is used for `Psi2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Psi2Rule {
    /// `Psi2 = (S/2)^-1`.
    Inverse,
    /// `Psi2 = S/2`.
    Direct,
}

impl Psi2Rule {
    fn as_str(self) -> &'static str {
        match self {
            Psi2Rule::Inverse => "inverse",
            Psi2Rule::Direct => "direct",
        }
    }
}

/// Intensity-part hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Part2Hyper<T: Real> {
    pub a2_0: T,
    pub b2_0: T,
    /// Inverse-Wishart degrees of freedom of the atoms' covariances.
    pub nu1: T,
    /// Degrees of freedom of the prior on `Psi1`.
    pub nu2: T,
    pub m2: Vector<T>,
    pub s2: Mat<T>,
    pub tau1: T,
    pub tau2: T,
    pub psi2: Mat<T>,
    pub psi2_rule: Psi2Rule,
    pub truncation: usize,
    /// Model `ln z` instead of `z`.
    pub log_z: bool,
}

impl<T: Real> Part2Hyper<T> {
    /// Joint dimension `k = p + 1`.
    pub fn dim(&self) -> usize {
        self.m2.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McmcSchedule {
    pub burn_in: usize,
    pub keep: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
}

impl McmcSchedule {
    /// Total iterations per chain.
    pub fn iterations(&self) -> usize {
        self.burn_in + self.keep * self.thin
    }

    /// Whether iteration `it` (0-based) is stored.
    pub fn is_stored(&self, it: usize) -> bool {
        it >= self.burn_in && (it + 1 - self.burn_in) % self.thin == 0
    }
}

impl Default for McmcSchedule {
    /// Desk-scale schedule.
    fn default() -> Self {
        Self {
            burn_in: 5000,
            keep: 1000,
            thin: 5,
            chains: 2,
            seed: 1,
        }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config<T: Real> {
    pub part1: Part1Hyper<T>,
    pub part2: Part2Hyper<T>,
    pub schedule: McmcSchedule,
    /// Extra scalar traces monitored on top of the fixed parameter inventory.
    pub monitor_extra: Vec<String>,
}

/// Column means and sample covariance of `(z, x)` over positive-response
/// units, plus the occurrence design width.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary<T: Real> {
    pub names: Vec<String>,
    pub mean: Vector<T>,
    pub cov: Mat<T>,
    /// Number of occurrence covariates, intercept included.
    pub r: usize,
}

impl<T: Real> DatasetSummary<T> {
    /// Summarize rows `(z_j, x_j)`; `names` labels the `k` columns.
    pub fn from_rows(rows: &[Vec<T>], names: Vec<String>, r: usize) -> Result<Self, ConfigErrors> {
        let k = names.len();
        if rows.len() < 2 {
            return Err(ConfigErrors::single(
                "dataset",
                format!("need at least 2 positive-response units, got {}", rows.len()),
            ));
        }
        let n = T::count(rows.len());
        let mut mean = Vector::zeros(k);
        for row in rows {
            for (c, &v) in row.iter().enumerate() {
                mean[c] += v;
            }
        }
        mean /= n;
        let mut cov = Mat::zeros(k, k);
        for row in rows {
            for a in 0..k {
                for b in 0..k {
                    cov[(a, b)] += (row[a] - mean[a]) * (row[b] - mean[b]);
                }
            }
        }
        cov /= n - T::one();
        Ok(Self { names, mean, cov, r })
    }
}

/// Columns making the sample covariance singular: the first column whose
/// leading block stops being positive definite, reported with its
/// predecessors when it is a linear combination of them.
fn singular_columns<T: Real>(summary: &DatasetSummary<T>) -> Option<String> {
    let k = summary.cov.nrows();
    for j in 0..k {
        if summary.cov[(j, j)] <= T::zero() || !summary.cov[(j, j)].finite() {
            return Some(format!("column '{}' has zero variance", summary.names[j]));
        }
        let block = summary.cov.view((0, 0), (j + 1, j + 1)).into_owned();
        let tol = T::lit(1e-12);
        let ok = SpdFactor::strict(&block)
            .map(|f| {
                let l = f.lower();
                let d = l[(j, j)] * l[(j, j)];
                d > tol * summary.cov[(j, j)]
            })
            .unwrap_or(false);
        if !ok {
            let deps: Vec<_> = summary.names[..=j].iter().map(|s| format!("'{s}'")).collect();
            return Some(format!("columns {} are linearly dependent", deps.join(", ")));
        }
    }
    None
}

/// Defaults: `a1_0=2, b1_0=1, beta1_0=0, S_beta1_0=diag(10000)`,
/// `a2_0=10, b2_0=1, nu1=nu2=4, tau1=6.01, tau2=3.01`, `m2` = column means,
/// `S2 = S/2` and `Psi2` derived from `S/2` according to `rule`.
pub fn default_config<T: Real>(summary: &DatasetSummary<T>, rule: Psi2Rule) -> Result<Config<T>, ConfigErrors> {
    if let Some(msg) = singular_columns(summary) {
        return Err(ConfigErrors::single("sample covariance", msg));
    }
    let r = summary.r;
    let half_s = &summary.cov * T::lit(0.5);
    let psi2 = match rule {
        Psi2Rule::Inverse => spd_inverse(&half_s, "S/2")
            .map_err(|e| ConfigErrors::single("sample covariance", e.to_string()))?,
        Psi2Rule::Direct => half_s.clone(),
    };
    Ok(Config {
        part1: Part1Hyper {
            a1_0: T::lit(2.0),
            b1_0: T::one(),
            beta1_0: Vector::zeros(r),
            s_beta1_0: Mat::identity(r, r) * T::lit(10000.0),
            mh_step_scale: T::lit(DEFAULT_MH_STEP_SCALE),
            mh_adapt: true,
            beta_update: BetaUpdate::Collapsed,
        },
        part2: Part2Hyper {
            a2_0: T::lit(10.0),
            b2_0: T::one(),
            nu1: T::lit(4.0),
            nu2: T::lit(4.0),
            m2: summary.mean.clone(),
            s2: half_s,
            tau1: T::lit(6.01),
            tau2: T::lit(3.01),
            psi2,
            psi2_rule: rule,
            truncation: DEFAULT_TRUNCATION,
            log_z: false,
        },
        schedule: McmcSchedule::default(),
        monitor_extra: Vec::new(),
    })
}

/// Extra scalar traces that may be listed under `monitor_extra`.
pub const EXTRA_MONITORS: &[&str] = &["mh_acceptance", "mh_scale", "last_weight"];

/// Check every invariant; all violations are reported together.
pub fn validate<T: Real>(config: &Config<T>) -> Result<(), ConfigErrors> {
    let mut errs = Vec::new();
    let mut bad = |field: &str, message: String| {
        errs.push(Violation {
            field: field.to_string(),
            message,
        })
    };
    let positive = |x: T| x > T::zero() && x.finite();

    let p1 = &config.part1;
    let r = p1.beta1_0.len();
    if !positive(p1.a1_0) {
        bad("a1_0", format!("a1_0 must be > 0 (got {})", p1.a1_0));
    }
    if !positive(p1.b1_0) {
        bad("b1_0", format!("b1_0 must be > 0 (got {})", p1.b1_0));
    }
    if r == 0 {
        bad("beta1_0", "beta1_0 must have at least one entry".into());
    }
    if p1.s_beta1_0.nrows() != r || p1.s_beta1_0.ncols() != r {
        bad("S_beta1_0", format!("S_beta1_0 must be {r}x{r} to match beta1_0"));
    } else if !is_spd(&p1.s_beta1_0) {
        bad("S_beta1_0", "S_beta1_0 must be symmetric positive definite".into());
    }
    if !positive(p1.mh_step_scale) {
        bad("mh_step_scale", format!("mh_step_scale must be > 0 (got {})", p1.mh_step_scale));
    }

    let p2 = &config.part2;
    let k = p2.dim();
    if k < 2 {
        bad("m2", format!("m2 must have length k = p + 1 >= 2 (got {k})"));
    }
    if !positive(p2.a2_0) {
        bad("a2_0", format!("a2_0 must be > 0 (got {})", p2.a2_0));
    }
    if !positive(p2.b2_0) {
        bad("b2_0", format!("b2_0 must be > 0 (got {})", p2.b2_0));
    }
    let km1 = T::count(k) - T::one();
    for (name, nu) in [("nu1", p2.nu1), ("nu2", p2.nu2)] {
        if !(nu > km1) || !nu.finite() {
            bad(name, format!("{name} must exceed k−1 = {}", k as i64 - 1));
        }
    }
    for (name, m) in [("S2", &p2.s2), ("Psi2", &p2.psi2)] {
        if m.nrows() != k || m.ncols() != k {
            bad(name, format!("{name} must be {k}x{k}"));
        } else if !is_spd(m) {
            bad(name, format!("{name} must be symmetric positive definite"));
        }
    }
    if !positive(p2.tau1) {
        bad("tau1", format!("tau1 must be > 0 (got {})", p2.tau1));
    }
    if !positive(p2.tau2) {
        bad("tau2", format!("tau2 must be > 0 (got {})", p2.tau2));
    }
    if p2.truncation < 2 {
        bad("truncation_L", format!("truncation_L must be >= 2 (got {})", p2.truncation));
    }

    let s = &config.schedule;
    if s.keep == 0 {
        bad("keep", "keep must be >= 1".into());
    }
    if s.thin == 0 {
        bad("thin", "thin must be >= 1".into());
    }
    if s.chains == 0 {
        bad("chains", "chains must be >= 1".into());
    }
    for name in &config.monitor_extra {
        if !EXTRA_MONITORS.contains(&name.as_str()) {
            bad("monitor_extra", format!("unknown monitor '{name}' (known: {})", EXTRA_MONITORS.join(", ")));
        }
    }

    if errs.is_empty() {
        Ok(())
    } else {
        Err(ConfigErrors(errs))
    }
}

// ---------------------------------------------------------------------------
// text format

const KEYS: &[&str] = &[
    "a1_0",
    "b1_0",
    "beta1_0",
    "S_beta1_0",
    "mh_step_scale",
    "mh_adapt",
    "beta1_update",
    "a2_0",
    "b2_0",
    "nu1",
    "nu2",
    "m2",
    "S2",
    "tau1",
    "tau2",
    "Psi2",
    "psi2_rule",
    "truncation_L",
    "log_z",
    "burn_in",
    "keep",
    "thin",
    "chains",
    "seed",
    "monitor_extra",
];

fn fmt_vec<T: Real>(v: &Vector<T>) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn fmt_mat<T: Real>(m: &Mat<T>) -> String {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Serialize in the key/value format; parsing the result gives back a
/// bitwise-identical configuration.
pub fn to_text<T: Real>(config: &Config<T>) -> String {
    let p1 = &config.part1;
    let p2 = &config.part2;
    let s = &config.schedule;
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    line("a1_0", p1.a1_0.to_string());
    line("b1_0", p1.b1_0.to_string());
    line("beta1_0", fmt_vec(&p1.beta1_0));
    line("S_beta1_0", fmt_mat(&p1.s_beta1_0));
    line("mh_step_scale", p1.mh_step_scale.to_string());
    line("mh_adapt", p1.mh_adapt.to_string());
    line("beta1_update", p1.beta_update.as_str().to_string());
    line("a2_0", p2.a2_0.to_string());
    line("b2_0", p2.b2_0.to_string());
    line("nu1", p2.nu1.to_string());
    line("nu2", p2.nu2.to_string());
    line("m2", fmt_vec(&p2.m2));
    line("S2", fmt_mat(&p2.s2));
    line("tau1", p2.tau1.to_string());
    line("tau2", p2.tau2.to_string());
    line("Psi2", fmt_mat(&p2.psi2));
    line("psi2_rule", p2.psi2_rule.as_str().to_string());
    line("truncation_L", p2.truncation.to_string());
    line("log_z", p2.log_z.to_string());
    line("burn_in", s.burn_in.to_string());
    line("keep", s.keep.to_string());
    line("thin", s.thin.to_string());
    line("chains", s.chains.to_string());
    line("seed", s.seed.to_string());
    line("monitor_extra", config.monitor_extra.join(" "));
    out
}

/// Raw `key = value` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigErrors> {
    parse_pairs_with(text, KEYS)
}

/// `key = value` lines restricted to `keys`; `#` starts a comment.
pub fn parse_pairs_with(text: &str, keys: &[&str]) -> Result<Vec<(String, String)>, ConfigErrors> {
    let mut out = Vec::new();
    let mut errs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => {
                let k = k.trim();
                if !keys.contains(&k) {
                    errs.push(Violation {
                        field: k.to_string(),
                        message: format!("line {}: unknown key", lineno + 1),
                    });
                } else {
                    out.push((k.to_string(), v.trim().to_string()));
                }
            }
            None => errs.push(Violation {
                field: format!("line {}", lineno + 1),
                message: format!("expected 'key = value', got '{line}'"),
            }),
        }
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(ConfigErrors(errs))
    }
}

fn parse_real<T: Real>(key: &str, v: &str) -> Result<T, Violation> {
    v.parse::<T>().map_err(|_| Violation {
        field: key.to_string(),
        message: format!("'{v}' is not a number"),
    })
}

fn parse_vec<T: Real>(key: &str, v: &str) -> Result<Vector<T>, Violation> {
    let xs = v
        .split_whitespace()
        .map(|t| parse_real(key, t))
        .collect::<Result<Vec<T>, _>>()?;
    Ok(Vector::from_vec(xs))
}

fn parse_mat<T: Real>(key: &str, v: &str) -> Result<Mat<T>, Violation> {
    let rows = v
        .split(';')
        .map(|row| {
            row.split_whitespace()
                .map(|t| parse_real(key, t))
                .collect::<Result<Vec<T>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Violation {
            field: key.to_string(),
            message: format!("matrix must be square with rows separated by ';' (got {n} rows)"),
        });
    }
    Ok(Mat::from_fn(n, n, |i, j| rows[i][j]))
}

fn parse_int<U: std::str::FromStr>(key: &str, v: &str) -> Result<U, Violation> {
    v.parse::<U>().map_err(|_| Violation {
        field: key.to_string(),
        message: format!("'{v}' is not a nonnegative integer"),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, Violation> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Violation {
            field: key.to_string(),
            message: format!("'{v}' is not true/false"),
        }),
    }
}

fn set_field<T: Real>(config: &mut Config<T>, key: &str, v: &str) -> Result<(), Violation> {
    let p1 = &mut config.part1;
    let p2 = &mut config.part2;
    let s = &mut config.schedule;
    match key {
        "a1_0" => p1.a1_0 = parse_real(key, v)?,
        "b1_0" => p1.b1_0 = parse_real(key, v)?,
        "beta1_0" => p1.beta1_0 = parse_vec(key, v)?,
        "S_beta1_0" => p1.s_beta1_0 = parse_mat(key, v)?,
        "mh_step_scale" => p1.mh_step_scale = parse_real(key, v)?,
        "mh_adapt" => p1.mh_adapt = parse_bool(key, v)?,
        "beta1_update" => {
            p1.beta_update = match v {
                "conditional" => BetaUpdate::Conditional,
                "collapsed" => BetaUpdate::Collapsed,
                _ => {
                    return Err(Violation {
                        field: key.to_string(),
                        message: format!("'{v}' is not 'conditional' or 'collapsed'"),
                    })
                }
            }
        }
        "a2_0" => p2.a2_0 = parse_real(key, v)?,
        "b2_0" => p2.b2_0 = parse_real(key, v)?,
        "nu1" => p2.nu1 = parse_real(key, v)?,
        "nu2" => p2.nu2 = parse_real(key, v)?,
        "m2" => p2.m2 = parse_vec(key, v)?,
        "S2" => p2.s2 = parse_mat(key, v)?,
        "tau1" => p2.tau1 = parse_real(key, v)?,
        "tau2" => p2.tau2 = parse_real(key, v)?,
        "Psi2" => p2.psi2 = parse_mat(key, v)?,
        "psi2_rule" => {
            p2.psi2_rule = match v {
                "inverse" => Psi2Rule::Inverse,
                "direct" => Psi2Rule::Direct,
                _ => {
                    return Err(Violation {
                        field: key.to_string(),
                        message: format!("'{v}' is not 'inverse' or 'direct'"),
                    })
                }
            }
        }
        "truncation_L" => p2.truncation = parse_int(key, v)?,
        "log_z" => p2.log_z = parse_bool(key, v)?,
        "burn_in" => s.burn_in = parse_int(key, v)?,
        "keep" => s.keep = parse_int(key, v)?,
        "thin" => s.thin = parse_int(key, v)?,
        "chains" => s.chains = parse_int(key, v)?,
        "seed" => s.seed = parse_int(key, v)?,
        "monitor_extra" => config.monitor_extra = v.split_whitespace().map(str::to_string).collect(),
        _ => {
            return Err(Violation {
                field: key.to_string(),
                message: "unknown key".into(),
            })
        }
    }
    Ok(())
}

/// Apply `key = value` overrides on top of `config`.
pub fn apply_overrides<T: Real>(config: &mut Config<T>, pairs: &[(String, String)]) -> Result<(), ConfigErrors> {
    let errs: Vec<_> = pairs
        .iter()
        .filter_map(|(k, v)| set_field(config, k, v).err())
        .collect();
    if errs.is_empty() {
        Ok(())
    } else {
        Err(ConfigErrors(errs))
    }
}

/// The `psi2_rule` requested by a set of overrides, if any.
pub fn requested_psi2_rule(pairs: &[(String, String)]) -> Result<Option<Psi2Rule>, ConfigErrors> {
    match pairs.iter().rev().find(|(k, _)| k == "psi2_rule") {
        None => Ok(None),
        Some((_, v)) => match v.as_str() {
            "inverse" => Ok(Some(Psi2Rule::Inverse)),
            "direct" => Ok(Some(Psi2Rule::Direct)),
            _ => Err(ConfigErrors::single("psi2_rule", format!("'{v}' is not 'inverse' or 'direct'"))),
        },
    }
}

/// The `log_z` requested by a set of overrides, if any.
pub fn requested_log_z(pairs: &[(String, String)]) -> Result<Option<bool>, ConfigErrors> {
    match pairs.iter().rev().find(|(k, _)| k == "log_z") {
        None => Ok(None),
        Some((k, v)) => parse_bool(k, v).map(Some).map_err(|v| ConfigErrors(vec![v])),
    }
}

/// Whether `pairs` sets every key, so no dataset defaults are needed.
pub fn is_complete(pairs: &[(String, String)]) -> bool {
    KEYS.iter().all(|k| pairs.iter().any(|(p, _)| p == *k))
}

/// One validated configuration per value of `key`, all other settings
/// taken from `base`. Used for hyperparameter sensitivity runs.
pub fn sensitivity_sweep<T: Real>(base: &Config<T>, key: &str, values: &[&str]) -> Result<Vec<Config<T>>, ConfigErrors> {
    values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            apply_overrides(&mut c, &[(key.to_string(), v.to_string())])?;
            validate(&c)?;
            Ok(c)
        })
        .collect()
}

/// Parse a complete configuration (every key present).
pub fn from_text<T: Real>(text: &str) -> Result<Config<T>, ConfigErrors> {
    let pairs = parse_pairs(text)?;
    let missing: Vec<_> = KEYS
        .iter()
        .filter(|k| !pairs.iter().any(|(p, _)| p == *k))
        .map(|k| Violation {
            field: k.to_string(),
            message: "missing".into(),
        })
        .collect();
    if !missing.is_empty() {
        return Err(ConfigErrors(missing));
    }
    let mut config = Config {
        part1: Part1Hyper {
            a1_0: T::zero(),
            b1_0: T::zero(),
            beta1_0: Vector::zeros(0),
            s_beta1_0: Mat::zeros(0, 0),
            mh_step_scale: T::zero(),
            mh_adapt: false,
            beta_update: BetaUpdate::Collapsed,
        },
        part2: Part2Hyper {
            a2_0: T::zero(),
            b2_0: T::zero(),
            nu1: T::zero(),
            nu2: T::zero(),
            m2: Vector::zeros(0),
            s2: Mat::zeros(0, 0),
            tau1: T::zero(),
            tau2: T::zero(),
            psi2: Mat::zeros(0, 0),
            psi2_rule: Psi2Rule::Inverse,
            truncation: 0,
            log_z: false,
        },
        schedule: McmcSchedule {
            burn_in: 0,
            keep: 0,
            thin: 0,
            chains: 0,
            seed: 0,
        },
        monitor_extra: Vec::new(),
    };
    apply_overrides(&mut config, &pairs)?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn summary(cov: &[f64], k: usize) -> DatasetSummary<f64> {
        DatasetSummary {
            names: (0..k).map(|i| if i == 0 { "z".into() } else { format!("x{i}") }).collect(),
            mean: Vector::from_fn(k, |i, _| i as f64 + 1.5),
            cov: Mat::from_row_slice(k, k, cov),
            r: 3,
        }
    }

    #[test]
    fn paper_defaults() {
        let c = default_config(&summary(&[2.0, 0.0, 0.0, 2.0], 2), Psi2Rule::Inverse).unwrap();
        assert_eq!(c.part1.a1_0, 2.0);
        assert_eq!(c.part1.b1_0, 1.0);
        assert_eq!(c.part1.beta1_0, Vector::zeros(3));
        assert_eq!(c.part1.s_beta1_0, Mat::identity(3, 3) * 10000.0);
        assert_eq!(c.part2.a2_0, 10.0);
        assert_eq!(c.part2.b2_0, 1.0);
        assert_eq!((c.part2.nu1, c.part2.nu2), (4.0, 4.0));
        assert_eq!((c.part2.tau1, c.part2.tau2), (6.01, 3.01));
        assert_eq!(c.part2.truncation, 50);
        assert_eq!(c.part1.mh_step_scale, 0.1);
        // S = 2I -> S2 = I, Psi2 = I
        assert_eq!(c.part2.s2, Mat::identity(2, 2));
        assert_eq!(c.part2.psi2, Mat::identity(2, 2));
        assert_eq!(c.part2.m2, Vector::from_vec(vec![1.5, 2.5]));
        validate(&c).unwrap();
    }

    #[test]
    fn psi2_is_inverse_of_half_covariance() {
        let c = default_config(&summary(&[4.0, 1.0, 1.0, 1.0], 2), Psi2Rule::Inverse).unwrap();
        assert_eq!(c.part2.s2, Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 0.5]));
        let want = Mat::from_row_slice(2, 2, &[2.0 / 3.0, -2.0 / 3.0, -2.0 / 3.0, 8.0 / 3.0]);
        assert!((&c.part2.psi2 - want).amax() < 1e-14);

        let direct = default_config(&summary(&[4.0, 1.0, 1.0, 1.0], 2), Psi2Rule::Direct).unwrap();
        assert_eq!(direct.part2.psi2, direct.part2.s2);
    }

    #[test]
    fn singular_covariance_names_columns() {
        let err = default_config(&summary(&[1.0, 2.0, 2.0, 4.0], 2), Psi2Rule::Inverse).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("'z'") && msg.contains("'x1'"), "{msg}");
        let err = default_config(&summary(&[1.0, 0.0, 0.0, 0.0], 2), Psi2Rule::Inverse).unwrap_err();
        assert!(err.to_string().contains("'x1' has zero variance"));
    }

    #[test]
    fn from_rows_sample_covariance() {
        let rows = vec![vec![1.0, 0.0], vec![3.0, 2.0], vec![5.0, 1.0]];
        let s = DatasetSummary::from_rows(&rows, vec!["z".into(), "x1".into()], 2).unwrap();
        assert_eq!(s.mean, Vector::from_vec(vec![3.0, 1.0]));
        assert_eq!(s.cov, Mat::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 1.0]));
        assert!(DatasetSummary::<f64>::from_rows(&rows[..1], vec!["z".into(), "x1".into()], 2).is_err());
    }

    #[test]
    fn nu_violation_message() {
        let mut c = default_config(&summary(&[2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0], 3), Psi2Rule::Inverse).unwrap();
        c.part2.nu1 = 1.0;
        let err = validate(&c).unwrap_err();
        assert!(err.0.iter().any(|v| v.message == "nu1 must exceed k−1 = 2"), "{err}");
    }

    #[test]
    fn all_violations_reported_together() {
        let mut c = default_config(&summary(&[2.0, 0.0, 0.0, 2.0], 2), Psi2Rule::Inverse).unwrap();
        c.part1.a1_0 = -1.0;
        c.part2.s2 = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        c.part2.truncation = 1;
        c.schedule.thin = 0;
        let err = validate(&c).unwrap_err();
        for f in ["a1_0", "S2", "truncation_L", "thin"] {
            assert!(err.mentions(f), "missing {f}: {err}");
        }
        assert_eq!(err.0.len(), 4);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(parse_pairs("bogus = 1").is_err());
        assert!(parse_pairs("just text").is_err());
        let mut c = default_config(&summary(&[2.0, 0.0, 0.0, 2.0], 2), Psi2Rule::Inverse).unwrap();
        let pairs = parse_pairs("nu1 = abc\nS2 = 1 2; 3\n# comment\n").unwrap();
        let err = apply_overrides(&mut c, &pairs).unwrap_err();
        assert!(err.mentions("nu1") && err.mentions("S2"));
    }

    #[test]
    fn overrides_replace_defaults() {
        let mut c = default_config(&summary(&[2.0, 0.0, 0.0, 2.0], 2), Psi2Rule::Inverse).unwrap();
        let pairs = parse_pairs("truncation_L = 20  # fewer sticks\nburn_in = 7\nmonitor_extra = mh_acceptance").unwrap();
        apply_overrides(&mut c, &pairs).unwrap();
        assert_eq!(c.part2.truncation, 20);
        assert_eq!(c.schedule.burn_in, 7);
        assert_eq!(c.monitor_extra, vec!["mh_acceptance".to_string()]);
        assert_eq!(requested_psi2_rule(&parse_pairs("psi2_rule = direct").unwrap()).unwrap(), Some(Psi2Rule::Direct));
    }

    #[test]
    fn schedule_storage_pattern() {
        let s = McmcSchedule { burn_in: 3, keep: 2, thin: 2, chains: 1, seed: 0 };
        let stored: Vec<_> = (0..s.iterations()).filter(|&i| s.is_stored(i)).collect();
        assert_eq!(stored, vec![4, 6]);
        let s = McmcSchedule { burn_in: 0, keep: 1, thin: 1, chains: 1, seed: 0 };
        assert_eq!((0..s.iterations()).filter(|&i| s.is_stored(i)).count(), 1);
    }

    fn arb_cov() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, 6).prop_map(|a| {
            // A Aᵀ + I for a 2x3 A
            let a = Mat::from_row_slice(2, 3, &a);
            let m = &a * a.transpose() + Mat::identity(2, 2);
            m.iter().copied().collect()
        })
    }

    #[test]
    fn sweep_varies_one_key() {
        let base = default_config(&summary(&[2.0, 0.0, 0.0, 2.0], 2), Psi2Rule::Inverse).unwrap();
        let cs = sensitivity_sweep(&base, "a2_0", &["1", "5", "20"]).unwrap();
        assert_eq!(cs.iter().map(|c| c.part2.a2_0).collect::<Vec<_>>(), vec![1.0, 5.0, 20.0]);
        assert!(cs.iter().all(|c| c.part1 == base.part1));
        assert!(sensitivity_sweep(&base, "nu1", &["0.5"]).unwrap_err().mentions("nu1"));
    }

    #[test]
    fn completeness_and_log_z() {
        let base = default_config(&summary(&[2.0, 0.0, 0.0, 2.0], 2), Psi2Rule::Inverse).unwrap();
        let pairs = parse_pairs(&to_text(&base)).unwrap();
        assert!(is_complete(&pairs));
        assert!(!is_complete(&pairs[1..]));
        assert_eq!(requested_log_z(&[("log_z".into(), "true".into())]).unwrap(), Some(true));
        assert!(requested_log_z(&[("log_z".into(), "yes".into())]).is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip_is_bitwise(cov in arb_cov(), seed in any::<u64>(), scale in 1e-6f64..1e3) {
            let mut c = default_config(&summary(&cov, 2), Psi2Rule::Inverse).unwrap();
            c.schedule.seed = seed;
            c.part1.mh_step_scale = scale / 7.0;
            validate(&c).unwrap();
            let text = to_text(&c);
            let back: Config<f64> = from_text(&text).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(to_text(&back), text);
        }

        #[test]
        fn defaults_are_deterministic(cov in arb_cov()) {
            let s = summary(&cov, 2);
            prop_assert_eq!(default_config(&s, Psi2Rule::Inverse).unwrap(), default_config(&s, Psi2Rule::Inverse).unwrap());
        }
    }
}
