//! Run orchestration: fitting both parts over several chains, the run
//! directory, prediction from stored draws and convergence reports.
//!
//! A run directory holds
//!
//! | file | columns |
//! |---|---|
//! | `config.txt` | resolved configuration, `key = value` |
//! | `model.txt` | run metadata, `key = value` |
//! | `split.tsv` | `id, role` (`fit` or `predict`) |
//! | `fit_data.tsv` | the units the samplers saw |
//! | `trace.tsv` | `chain, iteration`, then one column per monitored scalar |
//! | `part1_draws.tsv` | `chain, draw, beta1_0.., alpha1` |
//! | `part1_clusters.tsv` | `chain, draw, value, size` |
//! | `part2_draws.tsv` | `chain, draw, alpha2, n_occupied, k0, m1_.., psi1_i_j..` |
//! | `part2_atoms.tsv` | `chain, draw, component, weight, mu_.., sigma_i_j..` |
//! | `table1.tsv`, `psrf.tsv` | posterior table and convergence report |
//!
//! Every tab-separated file starts with a `# seed=<s> config_sha256=<h>`
//! line. Matrices are flattened row-major. Reals are written in shortest
//! round-trip form, so reloaded draws equal the in-memory ones bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::config::{
    apply_overrides, default_config, from_text, is_complete, parse_pairs, parse_pairs_with, requested_log_z,
    requested_psi2_rule, to_text, validate, Config, Psi2Rule,
};
use crate::data::{write_dataset, SemicontinuousDataset};
use crate::diagnostics::{
    format_psrf, format_table, parameter_inventory, posterior_table, psi1_entries, psrf_report, PsrfRow,
    TableRow, TraceMatrix,
};
use crate::dist::RngStream;
use crate::error::{ConfigErrors, DataError, Error, SamplerError};
use crate::linalg::{Mat, Vector};
use crate::part1::{estimated_link, Part1Data, Part1Draw, Part1Model};
use crate::part2::{last_weight_mean, predictive_grid, Atom, Part2Data, Part2Draw, Part2Model, TRUNCATION_WARN};
use crate::predictive::{area_plugin, classify, combine, AreaEstimate, AreaUnit, ConfusionSummary, PredictiveSurface};
use crate::scalar::Real;

/// RNG stream reserved for the fit/predict split.
pub const SPLIT_STREAM: u64 = u64::MAX;

/// Fraction of units fitted under the held-out protocol.
pub const DEFAULT_SPLIT: f64 = 1.0 / 3.0;

/// Draws and monitored scalars of one chain.
#[derive(Debug, Clone)]
pub struct ChainOutput<T: Real> {
    pub part1: Vec<Part1Draw<T>>,
    pub part2: Vec<Part2Draw<T>>,
    /// Iteration (0-based) of each stored draw.
    pub iterations: Vec<usize>,
    /// One row per stored draw, columns as [`Posterior::names`].
    pub trace: Vec<Vec<T>>,
    /// Final proposal scale and post-burn-in acceptance rate of the `β` step.
    pub mh_scale: T,
    pub mh_acceptance: T,
    pub alloc_fallbacks: usize,
}

#[derive(Debug, Clone)]
pub struct Posterior<T: Real> {
    /// Trace columns: the parameter inventory followed by extra monitors.
    pub names: Vec<String>,
    pub inventory: Vec<String>,
    pub chains: Vec<ChainOutput<T>>,
    pub log_z: bool,
}

impl<T: Real> Posterior<T> {
    pub fn part1_draws(&self) -> Vec<Part1Draw<T>> {
        self.chains.iter().flat_map(|c| c.part1.iter().cloned()).collect()
    }

    pub fn part2_draws(&self) -> Vec<Part2Draw<T>> {
        self.chains.iter().flat_map(|c| c.part2.iter().cloned()).collect()
    }

    /// Per-chain values of a monitored scalar.
    pub fn column(&self, name: &str) -> Option<Vec<Vec<T>>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.chains.iter().map(|c| c.trace.iter().map(|row| row[j]).collect()).collect())
    }

    pub fn pooled(&self, name: &str) -> Option<Vec<T>> {
        self.column(name).map(|c| c.concat())
    }

    /// Posterior table over the parameter inventory.
    pub fn table(&self) -> Result<Vec<TableRow<T>>, Error> {
        let map: BTreeMap<String, Vec<T>> = self
            .inventory
            .iter()
            .filter_map(|n| self.pooled(n).map(|v| (n.clone(), v)))
            .collect();
        posterior_table(&map, &self.inventory)
    }

    /// Gelman-Rubin report over the parameter inventory.
    pub fn psrf(&self) -> Result<Vec<PsrfRow<T>>, Error> {
        let traces = self
            .inventory
            .iter()
            .map(|n| TraceMatrix::new(n.clone(), self.column(n).unwrap_or_default()))
            .collect::<Result<Vec<_>, _>>()?;
        psrf_report(&traces)
    }
}

/// Joint variable names `z, <x names>` used to label `m1` and `Psi1`.
pub fn var_names(x_names: &[String]) -> Vec<String> {
    std::iter::once("z".to_string()).chain(x_names.iter().cloned()).collect()
}

/// Trace columns for an `r`-coefficient occurrence part and the given
/// joint variables.
pub fn trace_names(r: usize, vars: &[String], extra: &[String]) -> Vec<String> {
    let mut names = parameter_inventory(r, vars);
    names.extend(extra.iter().cloned());
    names
}

fn check_dimensions<T: Real>(config: &Config<T>, r: usize, k: usize) -> Result<(), Error> {
    let mut errs = Vec::new();
    if config.part1.beta1_0.len() != r {
        errs.push(crate::error::Violation {
            field: "beta1_0".into(),
            message: format!("has length {} but the data have r = {r}", config.part1.beta1_0.len()),
        });
    }
    if config.part2.m2.len() != k {
        errs.push(crate::error::Violation {
            field: "m2".into(),
            message: format!("has length {} but the data have k = {k}", config.part2.m2.len()),
        });
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(ConfigErrors(errs).into())
    }
}

fn run_chain<T: Real>(
    config: &Config<T>,
    d1: &Part1Data<T>,
    d2: &Part2Data<T>,
    vars: &[String],
    names: &[String],
    chain: usize,
) -> Result<ChainOutput<T>, SamplerError> {
    let s = &config.schedule;
    let fail = |iteration: usize| move |source| SamplerError {
        chain,
        iteration,
        source,
    };
    let m1 = Part1Model::new(d1, &config.part1).map_err(fail(0))?;
    let m2 = Part2Model::new(d2, &config.part2).map_err(fail(0))?;
    let mut r1 = RngStream::new(s.seed, 2 * chain as u64);
    let mut r2 = RngStream::new(s.seed, 2 * chain as u64 + 1);
    let mut st1 = m1.init_state(&mut r1).map_err(fail(0))?;
    let mut st2 = m2.init_state(&mut r2).map_err(fail(0))?;
    let r = d1.r();
    let psi = psi1_entries(vars);
    let mut out = ChainOutput {
        part1: Vec::with_capacity(s.keep),
        part2: Vec::with_capacity(s.keep),
        iterations: Vec::with_capacity(s.keep),
        trace: Vec::with_capacity(s.keep),
        mh_scale: T::zero(),
        mh_acceptance: T::zero(),
        alloc_fallbacks: 0,
    };
    let total = s.iterations();
    let report = (total / 10).max(1);
    for it in 0..total {
        m1.sweep(&mut st1, &mut r1).map_err(fail(it))?;
        if it < s.burn_in {
            m1.tune(&mut st1, it);
        }
        m2.sweep(&mut st2, &mut r2).map_err(fail(it))?;
        if it + 1 == s.burn_in {
            st1.mh.reset_counts();
        }
        if (it + 1) % report == 0 {
            log::info!("chain {chain}: iteration {}/{total}", it + 1);
        }
        if !s.is_stored(it) {
            continue;
        }
        let d2 = st2.snapshot().map_err(fail(it))?;
        let mut row = Vec::with_capacity(names.len());
        row.extend(st1.beta.iter().copied());
        row.push(st1.alpha);
        row.push(T::count(st1.n_clusters()));
        row.extend(st2.m1.iter().copied());
        row.push(st2.k0);
        row.extend(psi.iter().map(|(_, i, j)| st2.psi1[(*i, *j)]));
        row.push(st2.alpha2);
        row.push(T::count(st2.n_occupied()));
        for name in &names[row.len()..] {
            row.push(match name.as_str() {
                "mh_acceptance" => st1.mh.rate(),
                "mh_scale" => st1.mh.scale,
                "last_weight" => *st2.weights.last().expect("truncation >= 2"),
                _ => T::zero(),
            });
        }
        debug_assert_eq!(row.len(), names.len());
        debug_assert_eq!(r, st1.beta.len());
        out.part1.push(st1.snapshot());
        out.part2.push(d2);
        out.iterations.push(it);
        out.trace.push(row);
    }
    out.mh_scale = st1.mh.scale;
    out.mh_acceptance = st1.mh.rate();
    out.alloc_fallbacks = st2.alloc_fallbacks;
    Ok(out)
}

/// Run every chain of both samplers on prepared data. Chains run on
/// separate threads with their own streams `(seed, 2c)` and `(seed, 2c + 1)`.
pub fn fit_parts<T: Real>(
    config: &Config<T>,
    d1: &Part1Data<T>,
    d2: &Part2Data<T>,
    x_names: &[String],
) -> Result<Posterior<T>, Error> {
    validate(config)?;
    check_dimensions(config, d1.r(), d2.k())?;
    if d2.log_z() != config.part2.log_z {
        return Err(DataError::Invalid("part-2 data and configuration disagree on log_z".into()).into());
    }
    let vars = var_names(x_names);
    if vars.len() != d2.k() {
        return Err(DataError::Invalid(format!("{} x names for p = {}", x_names.len(), d2.k() - 1)).into());
    }
    let names = trace_names(d1.r(), &vars, &config.monitor_extra);
    let results: Vec<Result<ChainOutput<T>, SamplerError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.schedule.chains)
            .map(|c| {
                let (vars, names) = (&vars, &names);
                scope.spawn(move || run_chain(config, d1, d2, vars, names, c))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    });
    let chains = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(Posterior {
        inventory: parameter_inventory(d1.r(), &vars),
        names,
        chains,
        log_z: config.part2.log_z,
    })
}

/// Fit both parts to a dataset with a response column.
pub fn fit<T: Real>(config: &Config<T>, data: &SemicontinuousDataset<T>) -> Result<Posterior<T>, Error> {
    let d1 = data.part1_data()?;
    let d2 = data.part2_data(config.part2.log_z)?;
    fit_parts(config, &d1, &d2, &data.x_names)
}

/// Which units the samplers see.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitRule {
    /// Every unit.
    All,
    /// The dataset's `in_sample` column.
    InSample,
    /// A seeded random subset of this fraction of the units.
    Fraction(f64),
}

/// Fit-set membership per unit.
pub fn split_units<T: Real>(data: &SemicontinuousDataset<T>, rule: SplitRule, seed: u64) -> Result<Vec<bool>, DataError> {
    let n = data.n();
    match rule {
        SplitRule::All => Ok(vec![true; n]),
        SplitRule::InSample => data
            .in_sample
            .clone()
            .ok_or_else(|| DataError::MissingColumn("in_sample".into())),
        SplitRule::Fraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(DataError::Invalid(format!("split fraction {f} outside (0, 1]")));
            }
            let k = ((f * n as f64).round() as usize).clamp(1, n);
            let mut rng = RngStream::new(seed, SPLIT_STREAM);
            let mut fit = vec![false; n];
            for i in rand::seq::index::sample(&mut rng, n, k) {
                fit[i] = true;
            }
            Ok(fit)
        }
    }
}

fn requested_seed(pairs: &[(String, String)]) -> Result<Option<u64>, Error> {
    match pairs.iter().rev().find(|(k, _)| k == "seed") {
        None => Ok(None),
        Some((_, v)) => v
            .parse()
            .map(Some)
            .map_err(|_| ConfigErrors::single("seed", format!("'{v}' is not a nonnegative integer")).into()),
    }
}

/// The configuration for fitting `fit_data`: a complete config text is
/// taken as is, otherwise dataset defaults with the given keys on top.
/// `seed` overrides the configured seed.
pub fn resolve_config<T: Real>(
    fit_data: &SemicontinuousDataset<T>,
    config_text: Option<&str>,
    seed: Option<u64>,
) -> Result<Config<T>, Error> {
    let pairs = match config_text {
        Some(t) => parse_pairs(t)?,
        None => Vec::new(),
    };
    let mut config = if is_complete(&pairs) {
        from_text(config_text.unwrap_or_default())?
    } else {
        let log_z = requested_log_z(&pairs)?.unwrap_or(false);
        let rule = requested_psi2_rule(&pairs)?.unwrap_or(Psi2Rule::Inverse);
        let mut c = default_config(&fit_data.summary(log_z)?, rule)?;
        c.part2.log_z = log_z;
        apply_overrides(&mut c, &pairs)?;
        c
    };
    if let Some(s) = seed {
        config.schedule.seed = s;
    }
    validate(&config)?;
    Ok(config)
}

#[derive(Debug, Clone)]
pub struct FitRequest<'a> {
    pub config_text: Option<&'a str>,
    pub seed: Option<u64>,
    pub split: SplitRule,
}

#[derive(Debug)]
pub struct FitReport<T: Real> {
    pub config: Config<T>,
    pub posterior: Posterior<T>,
    pub fit_units: usize,
    pub warnings: Vec<String>,
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

fn stamp(seed: u64, hash: &str) -> String {
    format!("# seed={seed} config_sha256={hash}\n")
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn join<T: std::fmt::Display>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join("\t")
}

fn flat<T: Real>(m: &Mat<T>) -> impl Iterator<Item = T> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

fn matrix_names(prefix: &str, k: usize) -> impl Iterator<Item = String> + '_ {
    (0..k).flat_map(move |i| (0..k).map(move |j| format!("{prefix}_{i}_{j}")))
}

const META_KEYS: &[&str] = &[
    "config_sha256",
    "seed",
    "w_names",
    "x_names",
    "units",
    "fit_units",
    "positive_units",
    "chains",
    "draws_per_chain",
];

/// Write a fitted run. Output is a function of its inputs only.
pub fn write_run<T: Real>(
    dir: &Path,
    config: &Config<T>,
    data: &SemicontinuousDataset<T>,
    fit_mask: &[bool],
    posterior: &Posterior<T>,
) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_text = to_text(config);
    let hash = sha256_hex(&config_text);
    let seed = config.schedule.seed;
    let head = stamp(seed, &hash);
    write_file(&dir.join("config.txt"), &config_text)?;

    let fit_idx: Vec<usize> = (0..data.n()).filter(|&i| fit_mask[i]).collect();
    let fit_data = data.subset(&fit_idx);
    let positives = fit_data.positive()?.len();
    let mut meta = String::new();
    let _ = writeln!(meta, "config_sha256 = {hash}");
    let _ = writeln!(meta, "seed = {seed}");
    let _ = writeln!(meta, "w_names = {}", data.w_names.join(" "));
    let _ = writeln!(meta, "x_names = {}", data.x_names.join(" "));
    let _ = writeln!(meta, "units = {}", data.n());
    let _ = writeln!(meta, "fit_units = {}", fit_idx.len());
    let _ = writeln!(meta, "positive_units = {positives}");
    let _ = writeln!(meta, "chains = {}", posterior.chains.len());
    let _ = writeln!(meta, "draws_per_chain = {}", config.schedule.keep);
    write_file(&dir.join("model.txt"), &meta)?;

    let mut split = head.clone() + "id\trole\n";
    for (id, &f) in data.ids.iter().zip(fit_mask) {
        let _ = writeln!(split, "{id}\t{}", if f { "fit" } else { "predict" });
    }
    write_file(&dir.join("split.tsv"), &split)?;

    let mut buf = head.clone().into_bytes();
    write_dataset(&mut buf, &fit_data).map_err(|e| Error::io(dir.join("fit_data.tsv"), e))?;
    fs::write(dir.join("fit_data.tsv"), buf).map_err(|e| Error::io(dir.join("fit_data.tsv"), e))?;

    let mut trace = head.clone() + "chain\titeration\t" + &join(&posterior.names) + "\n";
    let r = data.r();
    let k = data.p() + 1;
    let mut p1 = head.clone() + "chain\tdraw\t" + &join((0..r).map(|i| format!("beta1_{i}"))) + "\talpha1\n";
    let mut p1c = head.clone() + "chain\tdraw\tvalue\tsize\n";
    let mut p2 = head.clone()
        + "chain\tdraw\talpha2\tn_occupied\tk0\t"
        + &join((0..k).map(|i| format!("m1_{i}")))
        + "\t"
        + &join(matrix_names("psi1", k))
        + "\n";
    let mut p2a = head.clone()
        + "chain\tdraw\tcomponent\tweight\t"
        + &join((0..k).map(|i| format!("mu_{i}")))
        + "\t"
        + &join(matrix_names("sigma", k))
        + "\n";
    for (c, ch) in posterior.chains.iter().enumerate() {
        for (d, row) in ch.trace.iter().enumerate() {
            let _ = writeln!(trace, "{c}\t{}\t{}", ch.iterations[d], join(row));
        }
        for (d, dr) in ch.part1.iter().enumerate() {
            let _ = writeln!(p1, "{c}\t{d}\t{}\t{}", join(dr.beta.iter()), dr.alpha);
            for (v, n) in &dr.clusters {
                let _ = writeln!(p1c, "{c}\t{d}\t{v}\t{n}");
            }
        }
        for (d, dr) in ch.part2.iter().enumerate() {
            let _ = writeln!(
                p2,
                "{c}\t{d}\t{}\t{}\t{}\t{}\t{}",
                dr.alpha2,
                dr.n_occupied,
                dr.k0,
                join(dr.m1.iter()),
                join(flat(&dr.psi1))
            );
            for (l, (w, a)) in dr.weights.iter().zip(&dr.atoms).enumerate() {
                let _ = writeln!(p2a, "{c}\t{d}\t{l}\t{w}\t{}\t{}", join(a.mu.iter()), join(flat(&a.sigma)));
            }
        }
    }
    write_file(&dir.join("trace.tsv"), &trace)?;
    write_file(&dir.join("part1_draws.tsv"), &p1)?;
    write_file(&dir.join("part1_clusters.tsv"), &p1c)?;
    write_file(&dir.join("part2_draws.tsv"), &p2)?;
    write_file(&dir.join("part2_atoms.tsv"), &p2a)?;
    write_reports(dir, &head, posterior)
}

fn write_reports<T: Real>(dir: &Path, head: &str, posterior: &Posterior<T>) -> Result<(), Error> {
    let draws = posterior.chains.first().map_or(0, |c| c.trace.len());
    if draws > 0 {
        write_file(&dir.join("table1.tsv"), &(head.to_string() + &format_table(&posterior.table()?)))?;
    }
    if posterior.chains.len() >= 2 && draws >= crate::diagnostics::MIN_TRACE_LEN {
        write_file(&dir.join("psrf.tsv"), &(head.to_string() + &format_psrf(&posterior.psrf()?)))?;
    }
    Ok(())
}

/// Split, resolve the configuration on the fit units, run the samplers and
/// write the run directory.
pub fn run_fit<T: Real>(data: &SemicontinuousDataset<T>, req: &FitRequest<'_>, out: &Path) -> Result<FitReport<T>, Error> {
    let pairs = match req.config_text {
        Some(t) => parse_pairs(t)?,
        None => Vec::new(),
    };
    let seed = match req.seed {
        Some(s) => s,
        None => requested_seed(&pairs)?.unwrap_or(crate::config::McmcSchedule::default().seed),
    };
    let mask = split_units(data, req.split, seed)?;
    let fit_idx: Vec<usize> = (0..data.n()).filter(|&i| mask[i]).collect();
    if fit_idx.is_empty() {
        return Err(DataError::Invalid("the split leaves no units to fit".into()).into());
    }
    let fit_data = data.subset(&fit_idx);
    let config = resolve_config(&fit_data, req.config_text, Some(seed))?;
    log::info!("fitting {}", fit_data.summary_line());
    let posterior = fit(&config, &fit_data)?;
    let mut warnings = Vec::new();
    let last = last_weight_mean(&posterior.part2_draws());
    if last > T::lit(TRUNCATION_WARN) {
        warnings.push(format!(
            "mean weight of the last stick-breaking component is {last}; consider raising truncation_L"
        ));
    }
    let fallbacks: usize = posterior.chains.iter().map(|c| c.alloc_fallbacks).sum();
    if fallbacks > 0 {
        warnings.push(format!("{fallbacks} allocation draws fell back to the largest weight after underflow"));
    }
    if let Ok(rows) = posterior.psrf() {
        let bad: Vec<_> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
        if !bad.is_empty() {
            warnings.push(format!("PSRF >= 1.1 for {}", bad.join(", ")));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    write_run(out, &config, data, &mask, &posterior)?;
    Ok(FitReport {
        config,
        posterior,
        fit_units: fit_idx.len(),
        warnings,
    })
}

struct Tsv {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Tsv {
    fn read(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| DataError::Invalid(format!("{}: no header", path.display())))?
            .split('\t')
            .map(str::to_string)
            .collect::<Vec<_>>();
        let rows = lines
            .map(|l| l.split('\t').map(str::to_string).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        let t = Self {
            path: path.to_path_buf(),
            header,
            rows,
        };
        if let Some((i, _)) = t.rows.iter().enumerate().find(|(_, r)| r.len() != t.header.len()) {
            return Err(t.bad(i, "wrong number of fields"));
        }
        Ok(t)
    }

    fn bad(&self, row: usize, what: &str) -> Error {
        DataError::Invalid(format!("{}: data row {}: {what}", self.path.display(), row + 1)).into()
    }

    fn get<U: FromStr>(&self, row: usize, col: usize) -> Result<U, Error> {
        self.rows[row][col]
            .parse()
            .map_err(|_| self.bad(row, &format!("'{}' is not a number", self.rows[row][col])))
    }

    fn reals<T: Real>(&self, row: usize, cols: std::ops::Range<usize>) -> Result<Vec<T>, Error> {
        cols.map(|c| self.get(row, c)).collect()
    }
}

/// Metadata of a stored run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub config_sha256: String,
    pub seed: u64,
    pub w_names: Vec<String>,
    pub x_names: Vec<String>,
    pub fit_ids: BTreeSet<String>,
}

/// A run directory loaded back into memory.
#[derive(Debug, Clone)]
pub struct StoredRun<T: Real> {
    pub config: Config<T>,
    pub meta: RunMeta,
    pub posterior: Posterior<T>,
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_meta(dir: &Path) -> Result<RunMeta, Error> {
    let pairs = parse_pairs_with(&read_text(&dir.join("model.txt"))?, META_KEYS)?;
    let get = |k: &str| pairs.iter().find(|(p, _)| p == k).map(|(_, v)| v.clone()).unwrap_or_default();
    let split = Tsv::read(&dir.join("split.tsv"))?;
    let fit_ids = split
        .rows
        .iter()
        .filter(|r| r[1] == "fit")
        .map(|r| r[0].clone())
        .collect();
    Ok(RunMeta {
        config_sha256: get("config_sha256"),
        seed: get("seed")
            .parse()
            .map_err(|_| DataError::Invalid("model.txt: bad seed".into()))?,
        w_names: get("w_names").split_whitespace().map(str::to_string).collect(),
        x_names: get("x_names").split_whitespace().map(str::to_string).collect(),
        fit_ids,
    })
}

/// Load the configuration and monitored traces only.
pub fn load_traces<T: Real>(dir: &Path) -> Result<(Config<T>, RunMeta, Posterior<T>), Error> {
    let config: Config<T> = from_text(&read_text(&dir.join("config.txt"))?)?;
    let meta = load_meta(dir)?;
    let t = Tsv::read(&dir.join("trace.tsv"))?;
    let names: Vec<String> = t.header[2..].to_vec();
    let mut chains: Vec<ChainOutput<T>> = Vec::new();
    for i in 0..t.rows.len() {
        let c: usize = t.get(i, 0)?;
        while chains.len() <= c {
            chains.push(ChainOutput {
                part1: Vec::new(),
                part2: Vec::new(),
                iterations: Vec::new(),
                trace: Vec::new(),
                mh_scale: T::zero(),
                mh_acceptance: T::zero(),
                alloc_fallbacks: 0,
            });
        }
        chains[c].iterations.push(t.get(i, 1)?);
        chains[c].trace.push(t.reals(i, 2..t.header.len())?);
    }
    let vars = var_names(&meta.x_names);
    let posterior = Posterior {
        inventory: parameter_inventory(meta.w_names.len(), &vars),
        names,
        chains,
        log_z: config.part2.log_z,
    };
    Ok((config, meta, posterior))
}

/// Load a run directory including all stored draws.
pub fn load_run<T: Real>(dir: &Path) -> Result<StoredRun<T>, Error> {
    let (config, meta, mut posterior) = load_traces::<T>(dir)?;
    let r = meta.w_names.len();
    let k = meta.x_names.len() + 1;

    let mut clusters: BTreeMap<(usize, usize), Vec<(T, usize)>> = BTreeMap::new();
    let t = Tsv::read(&dir.join("part1_clusters.tsv"))?;
    for i in 0..t.rows.len() {
        clusters
            .entry((t.get(i, 0)?, t.get(i, 1)?))
            .or_default()
            .push((t.get(i, 2)?, t.get(i, 3)?));
    }
    let t = Tsv::read(&dir.join("part1_draws.tsv"))?;
    if t.header.len() != r + 3 {
        return Err(DataError::Invalid("part1_draws.tsv does not match the model".into()).into());
    }
    for i in 0..t.rows.len() {
        let (c, d): (usize, usize) = (t.get(i, 0)?, t.get(i, 1)?);
        let beta = Vector::from_vec(t.reals(i, 2..2 + r)?);
        let alpha = t.get(i, 2 + r)?;
        let cl = clusters.remove(&(c, d)).unwrap_or_default();
        let ch = posterior
            .chains
            .get_mut(c)
            .ok_or_else(|| t.bad(i, "chain not in trace"))?;
        ch.part1.push(Part1Draw::new(beta, alpha, cl));
    }

    let mut atoms: BTreeMap<(usize, usize), (Vec<T>, Vec<Atom<T>>)> = BTreeMap::new();
    let t = Tsv::read(&dir.join("part2_atoms.tsv"))?;
    if t.header.len() != 4 + k + k * k {
        return Err(DataError::Invalid("part2_atoms.tsv does not match the model".into()).into());
    }
    for i in 0..t.rows.len() {
        let e = atoms.entry((t.get(i, 0)?, t.get(i, 1)?)).or_default();
        e.0.push(t.get(i, 3)?);
        e.1.push(Atom {
            mu: Vector::from_vec(t.reals(i, 4..4 + k)?),
            sigma: Mat::from_row_slice(k, k, &t.reals(i, 4 + k..4 + k + k * k)?),
        });
    }
    let t = Tsv::read(&dir.join("part2_draws.tsv"))?;
    for i in 0..t.rows.len() {
        let (c, d): (usize, usize) = (t.get(i, 0)?, t.get(i, 1)?);
        let (weights, at) = atoms.remove(&(c, d)).ok_or_else(|| t.bad(i, "no atoms for this draw"))?;
        let draw = Part2Draw::new(
            weights,
            at,
            t.get(i, 2)?,
            t.get(i, 3)?,
            Vector::from_vec(t.reals(i, 5..5 + k)?),
            t.get(i, 4)?,
            Mat::from_row_slice(k, k, &t.reals(i, 5 + k..5 + k + k * k)?),
        )?;
        let ch = posterior
            .chains
            .get_mut(c)
            .ok_or_else(|| t.bad(i, "chain not in trace"))?;
        ch.part2.push(draw);
    }
    Ok(StoredRun {
        config,
        meta,
        posterior,
    })
}

/// Recompute `table1.tsv` and `psrf.tsv` from a run's traces.
pub fn run_diagnose<T: Real>(dir: &Path) -> Result<(Vec<TableRow<T>>, Vec<PsrfRow<T>>), Error> {
    let (config, meta, posterior) = load_traces::<T>(dir)?;
    let head = stamp(config.schedule.seed, &meta.config_sha256);
    let table = posterior.table()?;
    let psrf = posterior.psrf()?;
    write_file(&dir.join("table1.tsv"), &(head.clone() + &format_table(&table)))?;
    write_file(&dir.join("psrf.tsv"), &(head + &format_psrf(&psrf)))?;
    Ok((table, psrf))
}

/// Density grid for predictive surfaces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridSpec {
    /// Per-unit grid over the predictive mean ± `width` sds.
    Auto { width: f64, points: usize },
    /// Fixed grid shared by all units.
    Range { lo: f64, hi: f64, points: usize },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Auto {
            width: 4.0,
            points: 101,
        }
    }
}

impl FromStr for GridSpec {
    type Err = String;

    /// `auto`, `auto:<points>` or `<lo>:<hi>:<points>`.
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let count = |t: &str| match t.parse::<usize>() {
            Ok(n) if n >= 2 => Ok(n),
            _ => Err(format!("'{t}' is not a point count >= 2")),
        };
        let real = |t: &str| t.parse::<f64>().map_err(|_| format!("'{t}' is not a number"));
        match parts.as_slice() {
            ["auto"] => Ok(GridSpec::default()),
            ["auto", n] => Ok(GridSpec::Auto {
                width: 4.0,
                points: count(n)?,
            }),
            [lo, hi, n] => {
                let (lo, hi) = (real(lo)?, real(hi)?);
                if !(lo < hi) {
                    return Err(format!("grid needs lo < hi, got {lo}:{hi}"));
                }
                Ok(GridSpec::Range { lo, hi, points: count(n)? })
            }
            _ => Err(format!("'{s}' is not 'auto', 'auto:<points>' or '<lo>:<hi>:<points>'")),
        }
    }
}

impl GridSpec {
    fn grid<T: Real>(&self, draws: &[Part2Draw<T>], x: &[T], log_z: bool) -> Vec<T> {
        match *self {
            GridSpec::Auto { width, points } => predictive_grid(draws, x, log_z, T::lit(width), points),
            GridSpec::Range { lo, hi, points } => {
                let step = (hi - lo) / (points - 1) as f64;
                (0..points).map(|i| T::lit(lo + step * i as f64)).collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictRequest<T: Real> {
    pub grid: GridSpec,
    pub cutoff: T,
    pub reference_figure: bool,
}

#[derive(Debug, Clone)]
pub struct PredictReport<T: Real> {
    pub surfaces: Vec<PredictiveSurface<T>>,
    /// Whether each unit was in the fit set.
    pub fitted: Vec<bool>,
    pub confusion: Option<ConfusionSummary<T>>,
    pub areas: Option<Vec<AreaEstimate<T>>>,
    pub comparison_rows: usize,
}

fn check_covariates<T: Real>(data: &SemicontinuousDataset<T>, meta: &RunMeta) -> Result<(), DataError> {
    if data.w_names != meta.w_names || data.x_names != meta.x_names {
        return Err(DataError::Invalid(format!(
            "covariates (w: {}; x: {}) do not match the fitted model (w: {}; x: {})",
            data.w_names.join(" "),
            data.x_names.join(" "),
            meta.w_names.join(" "),
            meta.x_names.join(" ")
        )));
    }
    Ok(())
}

/// Predictive surfaces for every unit of `data` from a stored run, with
/// classification, comparison and area tables where the data allow.
pub fn run_predict<T: Real>(
    run_dir: &Path,
    data: &SemicontinuousDataset<T>,
    req: &PredictRequest<T>,
    out: &Path,
) -> Result<PredictReport<T>, Error> {
    let run = load_run::<T>(run_dir)?;
    check_covariates(data, &run.meta)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let head = stamp(run.config.schedule.seed, &run.meta.config_sha256);
    let p1 = run.posterior.part1_draws();
    let p2 = run.posterior.part2_draws();
    let log_z = run.config.part2.log_z;

    let surfaces = (0..data.n())
        .map(|i| {
            let x = data.x_row(i);
            let grid = req.grid.grid(&p2, &x, log_z);
            combine(&p1, &p2, &data.ids[i], &x, &data.w_row(i), &grid, log_z)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fitted: Vec<bool> = data.ids.iter().map(|id| run.meta.fit_ids.contains(id)).collect();

    let mut pred = head.clone()
        + "id\trole\tp_positive\tp_lo\tp_hi\tp_zero\tconditional_mean\tpoint_prediction\tpoint_lo\tpoint_hi\tunderflows\n";
    let mut surf = head.clone() + "id\tz\tdensity_mean\tdensity_lo\tdensity_hi\n";
    for (s, &f) in surfaces.iter().zip(&fitted) {
        let _ = writeln!(
            pred,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.id,
            if f { "fit" } else { "predict" },
            s.p_positive,
            s.p_band.lo,
            s.p_band.hi,
            s.p_zero,
            s.conditional_mean,
            s.point_prediction,
            s.point_lo,
            s.point_hi,
            s.underflows
        );
        for g in 0..s.z_grid.len() {
            let _ = writeln!(
                surf,
                "{}\t{}\t{}\t{}\t{}",
                s.id, s.z_grid[g], s.density_mean[g], s.density_lo[g], s.density_hi[g]
            );
        }
    }
    write_file(&out.join("predictions.tsv"), &pred)?;
    write_file(&out.join("surfaces.tsv"), &surf)?;

    let mut confusion = None;
    let mut comparison_rows = 0;
    let mut areas = None;
    if let Some(y) = &data.y {
        let held: Vec<usize> = (0..data.n()).filter(|&i| !fitted[i]).collect();
        let mut cmp = head.clone() + "id\ttrue_y\tpredicted_y\tp_positive\n";
        for &i in &held {
            let s = &surfaces[i];
            let _ = writeln!(cmp, "{}\t{}\t{}\t{}", s.id, y[i], s.point_prediction, s.p_positive);
        }
        comparison_rows = held.len();
        if !held.is_empty() {
            write_file(&out.join("comparison.tsv"), &cmp)?;
        }
        let eval: Vec<usize> = if held.is_empty() { (0..data.n()).collect() } else { held };
        let ps: Vec<T> = eval.iter().map(|&i| surfaces[i].p_positive).collect();
        let truth: Vec<bool> = eval.iter().map(|&i| y[i] > T::zero()).collect();
        let c = classify(&ps, &truth, req.cutoff)?;
        write_file(&out.join("classification.tsv"), &(head.clone() + &format_confusion(&c)))?;
        confusion = Some(c);
    }
    if let Some(area) = &data.area {
        let units: Vec<AreaUnit<T>> = (0..data.n())
            .map(|i| {
                let observed = match (&data.y, fitted[i]) {
                    (Some(y), true) => Some(y[i]),
                    _ => None,
                };
                AreaUnit {
                    id: data.ids[i].clone(),
                    area: area[i].clone(),
                    observed,
                    predicted: observed.is_none().then_some(surfaces[i].point_prediction),
                }
            })
            .collect();
        let est = area_plugin(&units)?;
        let mut t = head.clone() + "area\tunits\tsampled\ttotal\tmean\n";
        for e in &est {
            let _ = writeln!(t, "{}\t{}\t{}\t{}\t{}", e.area, e.units, e.sampled, e.total, e.mean);
        }
        write_file(&out.join("areas.tsv"), &t)?;
        areas = Some(est);
    }
    if req.reference_figure {
        write_reference_tables(out, &head, &run, data, &surfaces, &fitted)?;
    }
    Ok(PredictReport {
        surfaces,
        fitted,
        confusion,
        areas,
        comparison_rows,
    })
}

/// Proportions in the paper's order, one per line.
pub fn format_confusion<T: Real>(c: &ConfusionSummary<T>) -> String {
    let mut out = String::from("measure\tvalue\n");
    let _ = writeln!(out, "zero_correct\t{}", c.zero_correct);
    let _ = writeln!(out, "zero_wrong\t{}", c.zero_wrong);
    let _ = writeln!(out, "positive_correct\t{}", c.positive_correct);
    let _ = writeln!(out, "positive_wrong\t{}", c.positive_wrong);
    let _ = writeln!(out, "accuracy\t{}", c.accuracy);
    let _ = writeln!(out, "cutoff\t{}", c.cutoff);
    let _ = writeln!(out, "units\t{}", c.n);
    out
}

/// Histogram bin count for `m` positive values (Sturges).
fn sturges(m: usize) -> usize {
    ((m.max(1) as f64).log2().ceil() as usize + 1).max(1)
}

fn write_reference_tables<T: Real>(
    out: &Path,
    head: &str,
    run: &StoredRun<T>,
    data: &SemicontinuousDataset<T>,
    surfaces: &[PredictiveSurface<T>],
    fitted: &[bool],
) -> Result<(), Error> {
    if let Some(y) = &data.y {
        let pos: Vec<T> = y.iter().copied().filter(|&v| v > T::zero()).collect();
        let mut t = head.to_string() + "bin_lo\tbin_hi\tcount\n";
        let _ = writeln!(t, "0\t0\t{}", y.len() - pos.len());
        if !pos.is_empty() {
            let hi = pos.iter().copied().fold(T::zero(), T::max);
            let bins = sturges(pos.len());
            let width = hi / T::count(bins);
            let mut counts = vec![0usize; bins];
            for &v in &pos {
                let b = (v / width).floor().to_usize().unwrap_or(bins - 1).min(bins - 1);
                counts[b] += 1;
            }
            for (b, n) in counts.iter().enumerate() {
                let _ = writeln!(t, "{}\t{}\t{n}", width * T::count(b), width * T::count(b + 1));
            }
        }
        write_file(&out.join("fig1_histogram.tsv"), &t)?;
    }

    let p1 = run.posterior.part1_draws();
    let grid: Vec<T> = (0..=120).map(|i| T::lit(-6.0 + 0.1 * i as f64)).collect();
    let bands = estimated_link(&p1, &grid);
    let mut t = head.to_string() + "t\tlink_mean\tlink_lo\tlink_hi\tlogistic\n";
    for (g, b) in grid.iter().zip(&bands) {
        let _ = writeln!(t, "{g}\t{}\t{}\t{}\t{}", b.mean, b.lo, b.hi, crate::dist::logistic_cdf(*g));
    }
    write_file(&out.join("fig2_link.tsv"), &t)?;

    let held: Vec<usize> = {
        let h: Vec<usize> = (0..data.n()).filter(|&i| !fitted[i]).collect();
        if h.is_empty() {
            (0..data.n()).collect()
        } else {
            h
        }
    };
    let x1 = |i: usize| if data.p() > 0 { data.x[(i, 0)] } else { T::zero() };
    let mut by_x = held.clone();
    by_x.sort_by(|&a, &b| x1(a).partial_cmp(&x1(b)).expect("finite covariates").then(a.cmp(&b)));
    let mut picks: Vec<usize> = (0..4)
        .map(|q| by_x[(q * (by_x.len() - 1)) / 3])
        .collect();
    picks.dedup();
    let mut t = head.to_string() + "id\tx1\ttrue_y\tz\tdensity_mean\tdensity_lo\tdensity_hi\n";
    for &i in &picks {
        let s = &surfaces[i];
        let truth = data.y.as_ref().map_or("NA".to_string(), |y| y[i].to_string());
        for g in 0..s.z_grid.len() {
            let _ = writeln!(
                t,
                "{}\t{}\t{truth}\t{}\t{}\t{}\t{}",
                s.id,
                x1(i),
                s.z_grid[g],
                s.density_mean[g],
                s.density_lo[g],
                s.density_hi[g]
            );
        }
    }
    write_file(&out.join("fig3_densities.tsv"), &t)?;

    let mut order: Vec<usize> = (0..data.n()).collect();
    order.sort_by(|&a, &b| x1(a).partial_cmp(&x1(b)).expect("finite covariates").then(a.cmp(&b)));
    let mut t = head.to_string() + "id\tx1\trole\ty\tfitted\tfitted_lo\tfitted_hi\n";
    for &i in &order {
        let s = &surfaces[i];
        let y = data.y.as_ref().map_or("NA".to_string(), |y| y[i].to_string());
        let role = if fitted[i] { "observed" } else { "true" };
        let _ = writeln!(
            t,
            "{}\t{}\t{role}\t{y}\t{}\t{}\t{}",
            s.id,
            x1(i),
            s.point_prediction,
            s.point_lo,
            s.point_hi
        );
    }
    write_file(&out.join("fig4_fitted.tsv"), &t)?;
    Ok(())
}
