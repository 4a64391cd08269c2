//! Synthetic semicontinuous data with known truth.
//!
//! Occurrence: `P(δ = 1 | w) = F(w'β)` for a chosen link `F`, or a
//! constant. Intensity: a finite mixture of experts in which expert `l` is
//! picked with probability `weight_l`, `x ~ N(center_l, spread_l² I)` and
//! `z = intercept_l + slope_l'x + noise_l ε`, so the true `f(z | x)` is a
//! Gaussian-gated mixture of linear-Gaussian experts.

use std::fmt::Write as _;

use crate::data::{SemicontinuousDataset, INTERCEPT};
use crate::dist::{logistic_cdf, normal_log_density, RngStream};
use crate::error::ConfigErrors;
use crate::linalg::Mat;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Logistic,
    /// Two-component logistic mixture with a long right tail.
    SkewedMixture,
}

impl Link {
    pub fn cdf<T: Real>(self, t: T) -> T {
        match self {
            Link::Logistic => logistic_cdf(t),
            Link::SkewedMixture => {
                let a = logistic_cdf((t + T::lit(0.6)) / T::lit(0.6));
                let b = logistic_cdf((t - T::lit(1.5)) / T::lit(1.8));
                T::lit(0.65) * a + T::lit(0.35) * b
            }
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Link::Logistic => "logistic",
            Link::SkewedMixture => "skewed-mixture",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Occurrence<T: Real> {
    /// `F(w'β)` with `w = (1, w_1, ..., w_{r-1})`.
    Index { beta: Vec<T>, link: Link },
    Constant(T),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSpec<T: Real> {
    pub weight: T,
    pub center: Vec<T>,
    pub spread: T,
    pub intercept: T,
    pub slope: Vec<T>,
    pub noise: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec<T: Real> {
    pub n: usize,
    /// Occurrence covariates besides the intercept, each `N(0, 1)`.
    pub w_covariates: usize,
    pub occurrence: Occurrence<T>,
    pub experts: Vec<ExpertSpec<T>>,
    /// Areas assigned uniformly at random; 0 for none.
    pub areas: usize,
    pub seed: u64,
}

impl<T: Real> GeneratorSpec<T> {
    /// Logistic occurrence with `r = 3` and a two-expert intensity on one
    /// covariate.
    pub fn standard(n: usize, seed: u64) -> Self {
        let l = T::lit;
        Self {
            n,
            w_covariates: 2,
            occurrence: Occurrence::Index {
                beta: vec![l(-0.5), l(3.0), l(-3.0)],
                link: Link::Logistic,
            },
            experts: vec![
                ExpertSpec {
                    weight: l(0.5),
                    center: vec![l(-1.5)],
                    spread: l(0.7),
                    intercept: l(4.0),
                    slope: vec![l(1.0)],
                    noise: l(0.3),
                },
                ExpertSpec {
                    weight: l(0.5),
                    center: vec![l(1.5)],
                    spread: l(0.7),
                    intercept: l(8.0),
                    slope: vec![l(-0.5)],
                    noise: l(0.3),
                },
            ],
            areas: 0,
            seed,
        }
    }

    pub fn p(&self) -> usize {
        self.experts.first().map_or(0, |e| e.center.len())
    }

    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut errs = Vec::new();
        let mut bad = |f: &str, m: String| errs.push(crate::error::Violation { field: f.into(), message: m });
        if self.n == 0 {
            bad("n", "must be positive".into());
        }
        match &self.occurrence {
            Occurrence::Index { beta, .. } if beta.len() != self.w_covariates + 1 => {
                bad("beta", format!("needs {} entries (intercept first)", self.w_covariates + 1))
            }
            Occurrence::Constant(p) if !(*p >= T::zero() && *p <= T::one()) => {
                bad("occurrence", format!("probability {p} outside [0, 1]"))
            }
            _ => {}
        }
        if self.experts.is_empty() {
            bad("expert", "at least one expert is required".into());
        }
        let p = self.p();
        for (i, e) in self.experts.iter().enumerate() {
            if !(e.weight > T::zero()) {
                bad("expert", format!("expert {i}: weight must be positive"));
            }
            if e.center.len() != p || e.slope.len() != p {
                bad("expert", format!("expert {i}: center and slope need {p} entries"));
            }
            if !(e.spread > T::zero()) || e.noise < T::zero() {
                bad("expert", format!("expert {i}: spread must be positive and noise nonnegative"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errs))
        }
    }

    /// True `P(δ = 1 | w)`, `w` including the intercept.
    pub fn p_positive(&self, w: &[T]) -> T {
        match &self.occurrence {
            Occurrence::Constant(p) => *p,
            Occurrence::Index { beta, link } => {
                link.cdf(beta.iter().zip(w).fold(T::zero(), |a, (&b, &v)| a + b * v))
            }
        }
    }

    fn log_gates(&self, x: &[T]) -> Vec<T> {
        let lg: Vec<T> = self
            .experts
            .iter()
            .map(|e| {
                e.weight.ln()
                    + e.center
                        .iter()
                        .zip(x)
                        .fold(T::zero(), |a, (&c, &v)| a + normal_log_density(v, c, e.spread * e.spread))
            })
            .collect();
        let max = lg.iter().copied().fold(-T::inf(), |a, b| if b > a { b } else { a });
        let norm = max + lg.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln();
        lg.into_iter().map(|v| v - norm).collect()
    }

    fn expert_mean(e: &ExpertSpec<T>, x: &[T]) -> T {
        e.intercept + e.slope.iter().zip(x).fold(T::zero(), |a, (&b, &v)| a + b * v)
    }

    /// True `E(z | x)`.
    pub fn conditional_mean(&self, x: &[T]) -> T {
        self.log_gates(x)
            .into_iter()
            .zip(&self.experts)
            .fold(T::zero(), |a, (g, e)| a + g.exp() * Self::expert_mean(e, x))
    }

    /// True `f(z | x)` (noiseless experts contribute no density).
    pub fn conditional_density(&self, z: T, x: &[T]) -> T {
        self.log_gates(x)
            .into_iter()
            .zip(&self.experts)
            .filter(|(_, e)| e.noise > T::zero())
            .fold(T::zero(), |a, (g, e)| {
                a + (g + normal_log_density(z, Self::expert_mean(e, x), e.noise * e.noise)).exp()
            })
    }
}

/// Per-unit truth recorded next to a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth<T: Real> {
    pub ids: Vec<String>,
    pub p_positive: Vec<T>,
    pub conditional_mean: Vec<T>,
    pub expert: Vec<usize>,
}

/// Draw a dataset from `spec`. Expert draws with `z ≤ 0` are redrawn so
/// that every response is a genuine positive value.
pub fn simulate<T: Real>(spec: &GeneratorSpec<T>) -> Result<(SemicontinuousDataset<T>, Truth<T>), ConfigErrors> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed, 0);
    let n = spec.n;
    let r = spec.w_covariates + 1;
    let p = spec.p();
    let weights: Vec<T> = spec.experts.iter().map(|e| e.weight).collect();
    let mut w = Mat::zeros(n, r);
    let mut x = Mat::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    let mut truth = Truth {
        ids: Vec::with_capacity(n),
        p_positive: Vec::with_capacity(n),
        conditional_mean: Vec::with_capacity(n),
        expert: Vec::with_capacity(n),
    };
    let mut area = Vec::with_capacity(n);
    for i in 0..n {
        w[(i, 0)] = T::one();
        for j in 1..r {
            w[(i, j)] = T::standard_normal(&mut rng);
        }
        let wi: Vec<T> = w.row(i).iter().copied().collect();
        let pi = spec.p_positive(&wi);
        let positive = T::open01(&mut rng) < pi;
        let l = crate::dist::sample_categorical(&mut rng, &weights);
        let e = &spec.experts[l];
        for j in 0..p {
            x[(i, j)] = e.center[j] + e.spread * T::standard_normal(&mut rng);
        }
        let xi: Vec<T> = x.row(i).iter().copied().collect();
        let mut z = GeneratorSpec::expert_mean(e, &xi) + e.noise * T::standard_normal(&mut rng);
        let mut tries = 0;
        while !(z > T::zero()) && tries < 1000 {
            z = GeneratorSpec::expert_mean(e, &xi) + e.noise * T::standard_normal(&mut rng);
            tries += 1;
        }
        if !(z > T::zero()) {
            z = T::eps();
        }
        y.push(if positive { z } else { T::zero() });
        if spec.areas > 0 {
            let a = (T::open01(&mut rng) * T::count(spec.areas)).to_usize().unwrap_or(0).min(spec.areas - 1);
            area.push(format!("a{a}"));
        }
        truth.ids.push(format!("u{i}"));
        truth.p_positive.push(pi);
        truth.conditional_mean.push(spec.conditional_mean(&xi));
        truth.expert.push(l);
    }
    let mut w_names = vec![INTERCEPT.to_string()];
    w_names.extend((1..r).map(|j| format!("w{j}")));
    let data = SemicontinuousDataset {
        ids: truth.ids.clone(),
        y: Some(y),
        w,
        w_names,
        x,
        x_names: (1..=p).map(|j| format!("x{j}")).collect(),
        area: (spec.areas > 0).then_some(area),
        in_sample: None,
    };
    Ok((data, truth))
}

/// Truth table: `id, p_true, cond_mean_true, y_mean_true, expert`.
pub fn format_truth<T: Real>(truth: &Truth<T>) -> String {
    let mut out = String::from("id\tp_true\tcond_mean_true\ty_mean_true\texpert\n");
    for i in 0..truth.ids.len() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            truth.ids[i],
            truth.p_positive[i],
            truth.conditional_mean[i],
            truth.p_positive[i] * truth.conditional_mean[i],
            truth.expert[i]
        );
    }
    out
}

/// True conditional densities `x, z, density` at the given probe points.
pub fn format_true_densities<T: Real>(spec: &GeneratorSpec<T>, probes: &[Vec<T>], z_grid: &[T]) -> String {
    let mut out = String::from("x\tz\tdensity\n");
    for x in probes {
        let xs = x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        for &z in z_grid {
            let _ = writeln!(out, "{xs}\t{z}\t{}", spec.conditional_density(z, x));
        }
    }
    out
}

fn parse_list<T: Real>(s: &str) -> Result<Vec<T>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<T>().map_err(|_| format!("'{t}' is not a number")))
        .collect()
}

const GENERATOR_KEYS: &[&str] = &["n", "seed", "w_covariates", "areas", "beta", "link", "occurrence_p", "expert"];

/// Key/value generator description.
///
/// ```text
/// n = 800
/// seed = 3
/// w_covariates = 2
/// beta = -0.5 3 -3
/// link = logistic          # or skewed-mixture
/// occurrence_p = 0.39      # replaces beta/link
/// expert = 0.5; -1.5; 0.7; 4; 1; 0.3   # weight; center; spread; intercept; slope; noise
/// areas = 10
/// ```
pub fn parse_generator<T: Real>(text: &str) -> Result<GeneratorSpec<T>, ConfigErrors> {
    let pairs = crate::config::parse_pairs_with(text, GENERATOR_KEYS)?;
    let mut spec = GeneratorSpec::<T>::standard(800, 1);
    let mut experts = Vec::new();
    let mut beta = None;
    let mut link = Link::Logistic;
    let mut constant = None;
    let mut errs = Vec::new();
    for (k, v) in &pairs {
        let res: Result<(), String> = (|| {
            match k.as_str() {
                "n" => spec.n = v.parse().map_err(|_| format!("'{v}' is not a count"))?,
                "seed" => spec.seed = v.parse().map_err(|_| format!("'{v}' is not a seed"))?,
                "w_covariates" => spec.w_covariates = v.parse().map_err(|_| format!("'{v}' is not a count"))?,
                "areas" => spec.areas = v.parse().map_err(|_| format!("'{v}' is not a count"))?,
                "beta" => beta = Some(parse_list(v)?),
                "link" => {
                    link = match v.as_str() {
                        "logistic" => Link::Logistic,
                        "skewed-mixture" => Link::SkewedMixture,
                        _ => return Err(format!("unknown link '{v}'")),
                    }
                }
                "occurrence_p" => constant = Some(v.parse::<T>().map_err(|_| format!("'{v}' is not a number"))?),
                "expert" => {
                    let parts: Vec<&str> = v.split(';').collect();
                    if parts.len() != 6 {
                        return Err("expert needs: weight; center; spread; intercept; slope; noise".into());
                    }
                    let one = |s: &str| s.trim().parse::<T>().map_err(|_| format!("'{}' is not a number", s.trim()));
                    experts.push(ExpertSpec {
                        weight: one(parts[0])?,
                        center: parse_list(parts[1])?,
                        spread: one(parts[2])?,
                        intercept: one(parts[3])?,
                        slope: parse_list(parts[4])?,
                        noise: one(parts[5])?,
                    });
                }
                _ => return Err("unknown key".into()),
            }
            Ok(())
        })();
        if let Err(message) = res {
            errs.push(crate::error::Violation { field: k.clone(), message });
        }
    }
    if !errs.is_empty() {
        return Err(ConfigErrors(errs));
    }
    if let Some(p) = constant {
        spec.occurrence = Occurrence::Constant(p);
    } else if let Some(b) = beta {
        spec.occurrence = Occurrence::Index { beta: b, link };
    } else if let Occurrence::Index { link: l, .. } = &mut spec.occurrence {
        *l = link;
    }
    if !experts.is_empty() {
        spec.experts = experts;
    }
    spec.validate()?;
    Ok(spec)
}

/// Inverse of [`parse_generator`].
pub fn generator_to_text<T: Real>(spec: &GeneratorSpec<T>) -> String {
    let list = |v: &[T]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let mut out = String::new();
    let _ = writeln!(out, "n = {}", spec.n);
    let _ = writeln!(out, "seed = {}", spec.seed);
    let _ = writeln!(out, "w_covariates = {}", spec.w_covariates);
    match &spec.occurrence {
        Occurrence::Index { beta, link } => {
            let _ = writeln!(out, "beta = {}", list(beta));
            let _ = writeln!(out, "link = {}", link.as_str());
        }
        Occurrence::Constant(p) => {
            let _ = writeln!(out, "occurrence_p = {p}");
        }
    }
    for e in &spec.experts {
        let _ = writeln!(
            out,
            "expert = {}; {}; {}; {}; {}; {}",
            e.weight,
            list(&e.center),
            e.spread,
            e.intercept,
            list(&e.slope),
            e.noise
        );
    }
    let _ = writeln!(out, "areas = {}", spec.areas);
    out
}
