//! Intensity part: truncated blocked Gibbs sampler for a Dirichlet-process
//! mixture of `k`-variate Normals on `d = (z, x')'`, and the conditional
//! density `f(z | x)` it induces.
//!
//! Each atom `(μ, Σ)` partitioned as `(μ₁, μ₂)` and
//! `[[σ₁₁, Σ₁₂], [Σ₂₁, Σ₂₂]]` yields a linear-Gaussian expert
//! `z | x ~ N(β₀ + x'β₂, σ²)` with gate `ω_l(x) ∝ ω_l N_p(x | μ₂, Σ₂₂)`.

use rand::RngCore;
use rayon::prelude::*;

use crate::config::Part2Hyper;
use crate::diagnostics::Band;
use crate::dist::{
    mvnormal_log_density, normal_log_density, sample_beta, sample_categorical_log, sample_gamma,
    sample_wishart, stick_breaking, MvNormalParams, NiwParams,
};
use crate::error::{DataError, DistError};
use crate::linalg::{spd_inverse, Mat, SpdFactor, Vector};
use crate::scalar::Real;

/// Rows `(z_j, x_j')` of the positive-response units.
#[derive(Debug, Clone)]
pub struct Part2Data<T: Real> {
    d: Mat<T>,
    log_z: bool,
}

impl<T: Real> Part2Data<T> {
    /// Build from positive responses and their covariates. With `log_z` the
    /// first column holds `ln z`.
    pub fn new(z: &[T], x: &Mat<T>, log_z: bool) -> Result<Self, DataError> {
        let m = z.len();
        if x.nrows() != m {
            return Err(DataError::Invalid(format!("{} responses but {} covariate rows", m, x.nrows())));
        }
        if let Some(j) = z.iter().position(|&v| !(v > T::zero() && v.finite())) {
            return Err(DataError::Invalid(format!("intensity response {} at row {j} is not positive", z[j])));
        }
        let k = x.ncols() + 1;
        if m > 0 && m < k + 2 {
            return Err(DataError::Invalid(format!("{m} positive responses; at least k + 2 = {} are needed", k + 2)));
        }
        let d = Mat::from_fn(m, k, |i, j| {
            if j == 0 {
                if log_z {
                    z[i].ln()
                } else {
                    z[i]
                }
            } else {
                x[(i, j - 1)]
            }
        });
        Ok(Self { d, log_z })
    }

    /// No observations; the sampler then draws from the prior.
    pub fn empty(k: usize) -> Self {
        Self {
            d: Mat::zeros(0, k),
            log_z: false,
        }
    }

    pub fn m(&self) -> usize {
        self.d.nrows()
    }

    /// Joint dimension `k = p + 1`.
    pub fn k(&self) -> usize {
        self.d.ncols()
    }

    pub fn log_z(&self) -> bool {
        self.log_z
    }

    pub fn row(&self, j: usize) -> Vector<T> {
        self.d.row(j).transpose()
    }
}

/// Mixture component `Normal_k(μ, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom<T: Real> {
    pub mu: Vector<T>,
    pub sigma: Mat<T>,
}

/// Linear-Gaussian expert `z | x ~ N(beta0 + x'beta2, sigma2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert<T: Real> {
    pub beta0: T,
    pub beta2: Vector<T>,
    pub sigma2: T,
}

impl<T: Real> Expert<T> {
    pub fn mean(&self, x: &[T]) -> T {
        self.beta0 + self.beta2.iter().zip(x).fold(T::zero(), |a, (&b, &v)| a + b * v)
    }
}

/// Conditional of the first coordinate given the rest:
/// `β₂ = Σ₁₂Σ₂₂⁻¹`, `β₀ = μ₁ - β₂'μ₂`, `σ² = σ₁₁ - Σ₁₂Σ₂₂⁻¹Σ₂₁`.
pub fn conditional_expert<T: Real>(atom: &Atom<T>) -> Result<Expert<T>, DistError> {
    let k = atom.mu.len();
    let s11 = atom.sigma[(0, 0)];
    if k == 1 {
        return Ok(Expert {
            beta0: atom.mu[0],
            beta2: Vector::zeros(0),
            sigma2: s11,
        });
    }
    let p = k - 1;
    let s22 = atom.sigma.view((1, 1), (p, p)).into_owned();
    let s21: Vector<T> = atom.sigma.view((1, 0), (p, 1)).column(0).into_owned();
    let f = SpdFactor::new(&s22, "Sigma22")?;
    let beta2 = f.solve(&s21);
    let mu2 = atom.mu.rows(1, p);
    let beta0 = atom.mu[0] - beta2.dot(&mu2);
    let mut sigma2 = s11 - s21.dot(&beta2);
    let floor = s11 * T::eps();
    if !(sigma2 > floor) {
        sigma2 = floor;
    }
    Ok(Expert { beta0, beta2, sigma2 })
}

/// Blocked-Gibbs state.
#[derive(Debug, Clone)]
pub struct Part2State<T: Real> {
    pub atoms: Vec<Atom<T>>,
    factors: Vec<SpdFactor<T>>,
    /// Stick fractions `v_1..v_{L-1}`.
    pub sticks: Vec<T>,
    pub weights: Vec<T>,
    pub alloc: Vec<usize>,
    pub alpha2: T,
    pub m1: Vector<T>,
    pub k0: T,
    pub psi1: Mat<T>,
    /// Allocations that fell back to the arg-max component because every
    /// density underflowed.
    pub alloc_fallbacks: usize,
}

impl<T: Real> Part2State<T> {
    /// Members per component.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.atoms.len()];
        for &l in &self.alloc {
            c[l] += 1;
        }
        c
    }

    /// Components with at least one member.
    pub fn n_occupied(&self) -> usize {
        self.counts().iter().filter(|&&c| c > 0).count()
    }

    pub fn truncation(&self) -> usize {
        self.atoms.len()
    }

    pub fn snapshot(&self) -> Result<Part2Draw<T>, DistError> {
        Part2Draw::new(
            self.weights.clone(),
            self.atoms.clone(),
            self.alpha2,
            self.n_occupied(),
            self.m1.clone(),
            self.k0,
            self.psi1.clone(),
        )
    }
}

pub struct Part2Model<'a, T: Real> {
    data: &'a Part2Data<T>,
    hyper: &'a Part2Hyper<T>,
    s2_inv: Mat<T>,
    psi2_inv: Mat<T>,
}

impl<'a, T: Real> Part2Model<'a, T> {
    pub fn new(data: &'a Part2Data<T>, hyper: &'a Part2Hyper<T>) -> Result<Self, DistError> {
        if hyper.dim() != data.k() {
            return Err(DistError::Domain(format!(
                "hyperparameters are {}-dimensional but the data have k = {}",
                hyper.dim(),
                data.k()
            )));
        }
        if hyper.truncation < 2 {
            return Err(DistError::Domain("truncation must be at least 2".into()));
        }
        Ok(Self {
            data,
            hyper,
            s2_inv: spd_inverse(&hyper.s2, "S2")?,
            psi2_inv: spd_inverse(&hyper.psi2, "Psi2")?,
        })
    }

    fn niw(&self, state: &Part2State<T>) -> Result<NiwParams<T>, DistError> {
        NiwParams::new(state.m1.clone(), state.k0, self.hyper.nu1, state.psi1.clone())
    }

    /// Initial state: baseline at its prior means, `α² = a/b`, sticks and
    /// atoms from the prior, units spread at random over the first few
    /// components, then one atom update.
    pub fn init_state<R: RngCore + ?Sized>(&self, rng: &mut R) -> Result<Part2State<T>, DistError> {
        let h = self.hyper;
        let l = h.truncation;
        let alpha2 = h.a2_0 / h.b2_0;
        let mut sticks = Vec::with_capacity(l - 1);
        for _ in 0..l - 1 {
            sticks.push(clamp_stick(sample_beta(rng, T::one(), alpha2)?));
        }
        let weights = stick_breaking(&sticks)?;
        let start = l.min(10);
        let alloc = (0..self.data.m())
            .map(|_| (T::open01(rng) * T::count(start)).to_usize().unwrap_or(0).min(start - 1))
            .collect();
        let mut state = Part2State {
            atoms: Vec::with_capacity(l),
            factors: Vec::with_capacity(l),
            sticks,
            weights,
            alloc,
            alpha2,
            m1: h.m2.clone(),
            k0: h.tau1 / h.tau2,
            psi1: &h.psi2 * h.nu2,
            alloc_fallbacks: 0,
        };
        let prior = self.niw(&state)?;
        for c in 0..l {
            let (mu, sigma) = prior.sample(rng)?;
            state.factors.push(atom_factor(&sigma, c)?);
            state.atoms.push(Atom { mu, sigma });
        }
        self.update_atoms(&mut state, rng)?;
        Ok(state)
    }

    /// `ln ω_l + ln N_k(d_j | μ_l, Σ_l)` for every component.
    pub fn allocation_log_weights(&self, state: &Part2State<T>, j: usize, out: &mut Vec<T>) {
        let d = self.data.row(j);
        out.clear();
        for (c, atom) in state.atoms.iter().enumerate() {
            let w = state.weights[c];
            out.push(if w > T::zero() {
                w.ln() + mvnormal_log_density(&d, &atom.mu, &state.factors[c])
            } else {
                -T::inf()
            });
        }
    }

    /// Redraw every label from its categorical conditional.
    pub fn update_allocations<R: RngCore + ?Sized>(&self, state: &mut Part2State<T>, rng: &mut R) {
        let mut logw = Vec::with_capacity(state.atoms.len());
        let mut scratch = Vec::with_capacity(state.atoms.len());
        for j in 0..self.data.m() {
            self.allocation_log_weights(state, j, &mut logw);
            let (l, fallback) = sample_categorical_log(rng, &logw, &mut scratch);
            if fallback {
                state.alloc_fallbacks += 1;
            }
            state.alloc[j] = l;
        }
    }

    /// NIW posterior of component `c` given its current members.
    pub fn atom_posterior(&self, state: &Part2State<T>, c: usize) -> Result<NiwParams<T>, DistError> {
        let k = self.data.k();
        let members: Vec<usize> = (0..self.data.m()).filter(|&j| state.alloc[j] == c).collect();
        let prior = self.niw(state)?;
        if members.is_empty() {
            return Ok(prior);
        }
        let n = T::count(members.len());
        let mut mean = Vector::zeros(k);
        for &j in &members {
            mean += self.data.row(j);
        }
        mean /= n;
        let mut scatter = Mat::zeros(k, k);
        for &j in &members {
            let dev = self.data.row(j) - &mean;
            scatter += &dev * dev.transpose();
        }
        Ok(prior.posterior(members.len(), &mean, &scatter))
    }

    /// Conjugate NIW draw for every component; empty ones from the prior.
    pub fn update_atoms<R: RngCore + ?Sized>(&self, state: &mut Part2State<T>, rng: &mut R) -> Result<(), DistError> {
        let k = self.data.k();
        let l = state.atoms.len();
        let mut n = vec![0usize; l];
        let mut sums = vec![Vector::zeros(k); l];
        for j in 0..self.data.m() {
            let c = state.alloc[j];
            n[c] += 1;
            sums[c] += self.data.row(j);
        }
        let means: Vec<Vector<T>> = sums
            .into_iter()
            .zip(&n)
            .map(|(s, &c)| if c > 0 { s / T::count(c) } else { s })
            .collect();
        let mut scatters = vec![Mat::zeros(k, k); l];
        for j in 0..self.data.m() {
            let c = state.alloc[j];
            let dev = self.data.row(j) - &means[c];
            scatters[c] += &dev * dev.transpose();
        }
        let prior = self.niw(state)?;
        for c in 0..l {
            let post = prior.posterior(n[c], &means[c], &scatters[c]);
            let (mu, sigma) = post.sample(rng).map_err(|e| component_error(e, c))?;
            state.factors[c] = atom_factor(&sigma, c)?;
            state.atoms[c] = Atom { mu, sigma };
        }
        Ok(())
    }

    /// Log density of `ln α²` given the allocations, sticks integrated out.
    fn alpha2_collapsed_log_density(&self, counts: &[usize], u: T) -> T {
        let h = self.hyper;
        let alpha = u.exp();
        let mut lp = h.a2_0 * u - h.b2_0 * alpha;
        let mut tail: usize = counts.iter().sum();
        for &n in &counts[..counts.len() - 1] {
            tail -= n;
            lp += u;
            let base = alpha + T::count(tail);
            for i in 0..=n {
                lp -= (base + T::count(i)).ln();
            }
        }
        lp
    }

    /// Slice-sampling update of `α²` from its distribution given the
    /// allocations alone, with the sticks marginalised.
    pub fn update_alpha2_collapsed<R: RngCore + ?Sized>(&self, state: &mut Part2State<T>, rng: &mut R) {
        let counts = state.counts();
        let f = |u: T| self.alpha2_collapsed_log_density(&counts, u);
        let u0 = state.alpha2.ln();
        let level = f(u0) + T::open01(rng).ln();
        let width = T::one();
        let mut lo = u0 - width * T::open01(rng);
        let mut hi = lo + width;
        for _ in 0..50 {
            if f(lo) <= level {
                break;
            }
            lo -= width;
        }
        for _ in 0..50 {
            if f(hi) <= level {
                break;
            }
            hi += width;
        }
        for _ in 0..200 {
            let u = lo + (hi - lo) * T::open01(rng);
            if f(u) > level {
                state.alpha2 = u.exp();
                return;
            }
            if u < u0 {
                lo = u;
            } else {
                hi = u;
            }
        }
    }

    /// `v_l ~ Beta(1 + n_l, α² + Σ_{q>l} n_q)`, weights by stick breaking,
    /// then `α² ~ Gamma(a + L - 1, b - Σ ln(1 - v_l))`.
    pub fn update_sticks_and_alpha2<R: RngCore + ?Sized>(&self, state: &mut Part2State<T>, rng: &mut R) -> Result<(), DistError> {
        let counts = state.counts();
        let l = counts.len();
        let mut tail: usize = counts.iter().sum();
        let mut log_rest = T::zero();
        for c in 0..l - 1 {
            tail -= counts[c];
            let v = clamp_stick(sample_beta(
                rng,
                T::one() + T::count(counts[c]),
                state.alpha2 + T::count(tail),
            )?);
            state.sticks[c] = v;
            log_rest += (-v).ln_1p();
        }
        state.weights = stick_breaking(&state.sticks)?;
        state.alpha2 = sample_gamma(rng, self.hyper.a2_0 + T::count(l - 1), self.hyper.b2_0 - log_rest)?;
        Ok(())
    }

    /// Baseline `(m1, k0, Psi1)` given the occupied atoms, followed by a
    /// fresh prior draw for every empty component.
    pub fn update_baseline<R: RngCore + ?Sized>(&self, state: &mut Part2State<T>, rng: &mut R) -> Result<(), DistError> {
        let h = self.hyper;
        let k = self.data.k();
        let counts = state.counts();
        let occupied: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
        let mut prec_sum = Mat::zeros(k, k);
        let mut weighted = Vector::zeros(k);
        let mut inverses = Vec::with_capacity(occupied.len());
        for &c in &occupied {
            let inv = state.factors[c].inverse();
            weighted += &inv * &state.atoms[c].mu;
            prec_sum += &inv;
            inverses.push(inv);
        }

        let precision = &self.s2_inv + &prec_sum * state.k0;
        let cov = spd_inverse(&precision, "m1 conditional precision")?;
        let mean = &cov * (&self.s2_inv * &h.m2 + weighted * state.k0);
        state.m1 = MvNormalParams::new(mean, cov)?.sample(rng);

        let mut quad = T::zero();
        for (&c, inv) in occupied.iter().zip(&inverses) {
            let dev = &state.atoms[c].mu - &state.m1;
            quad += dev.dot(&(inv * &dev));
        }
        let d = T::count(occupied.len());
        let half = T::lit(0.5);
        state.k0 = sample_gamma(rng, (h.tau1 + d * T::count(k)) * half, (h.tau2 + quad) * half)?;

        let scale = spd_inverse(&(&self.psi2_inv + &prec_sum), "Psi1 conditional scale")?;
        state.psi1 = sample_wishart(rng, h.nu2 + d * h.nu1, &scale)?;

        let prior = self.niw(state)?;
        for c in 0..counts.len() {
            if counts[c] == 0 {
                let (mu, sigma) = prior.sample(rng).map_err(|e| component_error(e, c))?;
                state.factors[c] = atom_factor(&sigma, c)?;
                state.atoms[c] = Atom { mu, sigma };
            }
        }
        Ok(())
    }

    /// Full sweep: labels, atoms, sticks and precision, baseline.
    pub fn sweep<R: RngCore + ?Sized>(&self, state: &mut Part2State<T>, rng: &mut R) -> Result<(), DistError> {
        self.update_allocations(state, rng);
        self.update_atoms(state, rng)?;
        self.update_alpha2_collapsed(state, rng);
        self.update_sticks_and_alpha2(state, rng)?;
        self.update_baseline(state, rng)?;
        Ok(())
    }
}

fn clamp_stick<T: Real>(v: T) -> T {
    let hi = T::one() - T::lit(1e-12).max(T::eps());
    let lo = T::eps() * T::eps();
    v.max(lo).min(hi)
}

fn atom_factor<T: Real>(sigma: &Mat<T>, c: usize) -> Result<SpdFactor<T>, DistError> {
    Ok(SpdFactor::new(sigma, &format!("Sigma of component {c}"))?)
}

fn component_error(e: DistError, c: usize) -> DistError {
    match e {
        DistError::Linalg(inner) => DistError::Domain(format!("component {c}: {inner}")),
        other => other,
    }
}

/// A stored posterior draw of the intensity part, with the experts and
/// covariate-marginal factors precomputed.
#[derive(Debug, Clone)]
pub struct Part2Draw<T: Real> {
    pub weights: Vec<T>,
    pub atoms: Vec<Atom<T>>,
    pub alpha2: T,
    pub n_occupied: usize,
    pub m1: Vector<T>,
    pub k0: T,
    pub psi1: Mat<T>,
    experts: Vec<Expert<T>>,
    marginals: Vec<Option<SpdFactor<T>>>,
}

impl<T: Real> Part2Draw<T> {
    pub fn new(
        weights: Vec<T>,
        atoms: Vec<Atom<T>>,
        alpha2: T,
        n_occupied: usize,
        m1: Vector<T>,
        k0: T,
        psi1: Mat<T>,
    ) -> Result<Self, DistError> {
        if weights.len() != atoms.len() || atoms.is_empty() {
            return Err(DistError::Domain("weights and atoms must be nonempty and of equal length".into()));
        }
        let mut experts = Vec::with_capacity(atoms.len());
        let mut marginals = Vec::with_capacity(atoms.len());
        for a in &atoms {
            experts.push(conditional_expert(a)?);
            let p = a.mu.len() - 1;
            marginals.push(if p == 0 {
                None
            } else {
                Some(SpdFactor::new(&a.sigma.view((1, 1), (p, p)).into_owned(), "Sigma22")?)
            });
        }
        Ok(Self {
            weights,
            atoms,
            alpha2,
            n_occupied,
            m1,
            k0,
            psi1,
            experts,
            marginals,
        })
    }

    pub fn experts(&self) -> &[Expert<T>] {
        &self.experts
    }

    pub fn p(&self) -> usize {
        self.atoms[0].mu.len() - 1
    }

    /// Covariate-dependent gate `ln ω_l(x)`, or `None` when every
    /// component's covariate density underflows at `x`.
    pub fn log_gates(&self, x: &[T]) -> Option<Vec<T>> {
        let p = self.p();
        let xv = Vector::from_column_slice(x);
        let mut lg: Vec<T> = self
            .atoms
            .iter()
            .zip(&self.weights)
            .zip(&self.marginals)
            .map(|((a, &w), f)| {
                if !(w > T::zero()) {
                    return -T::inf();
                }
                match f {
                    None => w.ln(),
                    Some(f) => w.ln() + mvnormal_log_density(&xv, &a.mu.rows(1, p).into_owned(), f),
                }
            })
            .collect();
        let max = lg.iter().copied().fold(-T::inf(), |a, b| if b > a { b } else { a });
        if !max.finite() {
            return None;
        }
        let total = lg.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let norm = max + total.ln();
        for v in &mut lg {
            *v -= norm;
        }
        Some(lg)
    }

    /// The mixture of experts `f(· | x)`; `None` on gate underflow.
    pub fn conditional(&self, x: &[T], log_z: bool) -> Option<ConditionalMixture<T>> {
        assert_eq!(x.len(), self.p(), "covariate dimension");
        let gates = self.log_gates(x)?;
        let mut log_w = Vec::new();
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for (e, g) in self.experts.iter().zip(gates) {
            if g > -T::inf() {
                log_w.push(g);
                means.push(e.mean(x));
                vars.push(e.sigma2);
            }
        }
        Some(ConditionalMixture { log_w, means, vars, log_z })
    }
}

/// Finite Normal mixture on the modelled scale; on the `ln z` scale it is
/// reported as the induced density of `z`.
#[derive(Debug, Clone)]
pub struct ConditionalMixture<T: Real> {
    pub log_w: Vec<T>,
    pub means: Vec<T>,
    pub vars: Vec<T>,
    pub log_z: bool,
}

impl<T: Real> ConditionalMixture<T> {
    pub fn log_density(&self, z: T) -> T {
        let (u, jac) = if self.log_z {
            if !(z > T::zero()) {
                return -T::inf();
            }
            (z.ln(), -z.ln())
        } else {
            (z, T::zero())
        };
        let terms: Vec<T> = self
            .log_w
            .iter()
            .zip(&self.means)
            .zip(&self.vars)
            .map(|((&w, &m), &v)| w + normal_log_density(u, m, v))
            .collect();
        let max = terms.iter().copied().fold(-T::inf(), |a, b| if b > a { b } else { a });
        if !max.finite() {
            return -T::inf();
        }
        max + terms.iter().fold(T::zero(), |a, &t| a + (t - max).exp()).ln() + jac
    }

    pub fn density(&self, z: T) -> T {
        self.log_density(z).exp()
    }

    /// `E(z | x)`.
    pub fn mean(&self) -> T {
        self.moment(1)
    }

    /// `E(z² | x)`.
    pub fn second_moment(&self) -> T {
        self.moment(2)
    }

    pub fn sd(&self) -> T {
        let m = self.mean();
        let v = self.second_moment() - m * m;
        v.max(T::zero()).sqrt()
    }

    fn moment(&self, order: u8) -> T {
        let mut acc = T::zero();
        for ((&w, &m), &v) in self.log_w.iter().zip(&self.means).zip(&self.vars) {
            let term = match (self.log_z, order) {
                (false, 1) => m,
                (false, _) => v + m * m,
                (true, 1) => (m + v * T::lit(0.5)).exp(),
                (true, _) => (T::lit(2.0) * (m + v)).exp(),
            };
            acc += w.exp() * term;
        }
        acc
    }
}

/// Posterior summaries of `f(z | x)` on a grid.
#[derive(Debug, Clone)]
pub struct DensityGrid<T: Real> {
    pub z: Vec<T>,
    pub bands: Vec<Band<T>>,
    /// Draws whose gate underflowed at `x`; they contribute zero density.
    pub underflows: usize,
}

impl<T: Real> DensityGrid<T> {
    /// Trapezoid integral of the posterior mean curve.
    pub fn integral(&self) -> T {
        let means: Vec<T> = self.bands.iter().map(|b| b.mean).collect();
        trapezoid(&self.z, &means)
    }
}

pub fn trapezoid<T: Real>(x: &[T], y: &[T]) -> T {
    x.windows(2)
        .zip(y.windows(2))
        .fold(T::zero(), |a, (xs, ys)| a + (xs[1] - xs[0]) * (ys[0] + ys[1]) * T::lit(0.5))
}

/// Per-draw conditional density on `z_grid` (draws × grid), evaluated in
/// parallel over draws.
pub fn density_matrix<T: Real>(draws: &[Part2Draw<T>], x: &[T], z_grid: &[T], log_z: bool) -> (Vec<Vec<T>>, usize) {
    let rows: Vec<Option<Vec<T>>> = draws
        .par_iter()
        .map(|d| d.conditional(x, log_z).map(|mix| z_grid.iter().map(|&z| mix.density(z)).collect()))
        .collect();
    let underflows = rows.iter().filter(|r| r.is_none()).count();
    let rows = rows
        .into_iter()
        .map(|r| r.unwrap_or_else(|| vec![T::zero(); z_grid.len()]))
        .collect();
    (rows, underflows)
}

/// Posterior mean and central 95% band of `f(z | x)` at each grid point.
pub fn conditional_density_grid<T: Real>(
    draws: &[Part2Draw<T>],
    x: &[T],
    z_grid: &[T],
    log_z: bool,
) -> Result<DensityGrid<T>, DataError> {
    if z_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(DataError::Invalid("z grid must be strictly increasing".into()));
    }
    if draws.is_empty() {
        return Err(DataError::Invalid("no posterior draws".into()));
    }
    if let Some(d) = draws.first() {
        if d.p() != x.len() {
            return Err(DataError::Invalid(format!("x has length {} but the model has p = {}", x.len(), d.p())));
        }
    }
    let (rows, underflows) = density_matrix(draws, x, z_grid, log_z);
    let bands = (0..z_grid.len())
        .map(|g| {
            let col: Vec<T> = rows.iter().map(|r| r[g]).collect();
            Band::from_draws(&col)
        })
        .collect();
    Ok(DensityGrid {
        z: z_grid.to_vec(),
        bands,
        underflows,
    })
}

/// Posterior mean and sd of `z | x` under the posterior predictive
/// (mixture over draws).
pub fn predictive_moments<T: Real>(draws: &[Part2Draw<T>], x: &[T], log_z: bool) -> Option<(T, T)> {
    let mut m1 = T::zero();
    let mut m2 = T::zero();
    let mut n = 0usize;
    for d in draws {
        if let Some(mix) = d.conditional(x, log_z) {
            m1 += mix.mean();
            m2 += mix.second_moment();
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    let nf = T::count(n);
    let mean = m1 / nf;
    let var = (m2 / nf - mean * mean).max(T::zero());
    Some((mean, var.sqrt()))
}

/// Evenly spaced grid over the predictive mean ± `width` sds, clipped at
/// zero on the log scale.
pub fn predictive_grid<T: Real>(draws: &[Part2Draw<T>], x: &[T], log_z: bool, width: T, points: usize) -> Vec<T> {
    let Some((mean, sd)) = predictive_moments(draws, x, log_z) else {
        return Vec::new();
    };
    let mut lo = mean - width * sd;
    let hi = mean + width * sd;
    if log_z && !(lo > T::zero()) {
        lo = hi * T::lit(1e-6);
    }
    let points = points.max(2);
    let step = (hi - lo) / T::count(points - 1);
    (0..points).map(|i| lo + step * T::count(i)).collect()
}

/// Posterior mean and band of `E(z | x)`.
pub fn conditional_mean<T: Real>(draws: &[Part2Draw<T>], x: &[T], log_z: bool) -> Option<Band<T>> {
    let vals: Vec<T> = draws.iter().filter_map(|d| d.conditional(x, log_z).map(|m| m.mean())).collect();
    if vals.is_empty() {
        None
    } else {
        Some(Band::from_draws(&vals))
    }
}

/// Posterior mean weight of the last component; values above
/// [`TRUNCATION_WARN`] suggest raising the truncation level.
pub fn last_weight_mean<T: Real>(draws: &[Part2Draw<T>]) -> T {
    if draws.is_empty() {
        return T::zero();
    }
    let s = draws.iter().fold(T::zero(), |a, d| a + *d.weights.last().expect("nonempty"));
    s / T::count(draws.len())
}

pub const TRUNCATION_WARN: f64 = 1e-3;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Psi2Rule;
    use crate::dist::RngStream;
    use proptest::prelude::*;

    fn hyper(k: usize, l: usize) -> Part2Hyper<f64> {
        Part2Hyper {
            a2_0: 10.0,
            b2_0: 1.0,
            nu1: 4.0,
            nu2: 4.0,
            m2: Vector::zeros(k),
            s2: Mat::identity(k, k),
            tau1: 6.01,
            tau2: 3.01,
            psi2: Mat::identity(k, k),
            psi2_rule: Psi2Rule::Inverse,
            truncation: l,
            log_z: false,
        }
    }

    fn state_with(atoms: Vec<Atom<f64>>, weights: Vec<f64>, m: usize) -> Part2State<f64> {
        let k = atoms[0].mu.len();
        let factors = atoms.iter().map(|a| SpdFactor::new(&a.sigma, "t").unwrap()).collect();
        Part2State {
            factors,
            sticks: vec![0.5; atoms.len() - 1],
            atoms,
            weights,
            alloc: vec![0; m],
            alpha2: 1.0,
            m1: Vector::zeros(k),
            k0: 1.0,
            psi1: Mat::identity(k, k),
            alloc_fallbacks: 0,
        }
    }

    fn atom(mu: &[f64], sigma: &[f64]) -> Atom<f64> {
        let k = mu.len();
        Atom {
            mu: Vector::from_column_slice(mu),
            sigma: Mat::from_row_slice(k, k, sigma),
        }
    }

    fn data(rows: &[[f64; 2]]) -> Part2Data<f64> {
        let z: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let x = Mat::from_fn(rows.len(), 1, |i, _| rows[i][1]);
        Part2Data::new(&z, &x, false).unwrap()
    }

    #[test]
    fn data_checks() {
        let x = Mat::from_element(3, 1, 1.0);
        assert!(Part2Data::new(&[1.0, -1.0, 2.0], &x, false).is_err());
        assert!(Part2Data::new(&[1.0, 1.0, 2.0], &x, false).is_err()); // m < k + 2
        let d = Part2Data::new(&[1.0, 2.0, 3.0, 4.0], &Mat::from_element(4, 1, 0.5), true).unwrap();
        assert_eq!(d.row(1)[0], 2.0f64.ln());
    }

    #[test]
    fn single_component_labels_everything_zero() {
        let d = data(&[[1.0, 0.0], [2.0, 1.0], [3.0, -1.0], [4.0, 2.0], [0.5, 0.3]]);
        let h = hyper(2, 2);
        let model = Part2Model::new(&d, &h).unwrap();
        let mut s = state_with(vec![atom(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])], vec![1.0], 5);
        let mut rng = RngStream::new(1, 0);
        s.alloc = vec![0; 5];
        model.update_allocations(&mut s, &mut rng);
        assert!(s.alloc.iter().all(|&l| l == 0));
    }

    #[test]
    fn separated_atoms_pick_the_near_one() {
        let d = data(&[[10.0, 10.0], [10.1, 9.9], [9.9, 10.0], [10.0, 10.2]]);
        let h = hyper(2, 2);
        let model = Part2Model::new(&d, &h).unwrap();
        let s = state_with(
            vec![atom(&[-10.0, -10.0], &[1.0, 0.0, 0.0, 1.0]), atom(&[10.0, 10.0], &[1.0, 0.0, 0.0, 1.0])],
            vec![0.5, 0.5],
            4,
        );
        let mut lw = Vec::new();
        model.allocation_log_weights(&s, 0, &mut lw);
        let p_far = 1.0 / (1.0 + (lw[1] - lw[0]).exp());
        assert!(p_far < 1e-8);
    }

    #[test]
    fn reflection_symmetric_point_is_a_coin_flip() {
        let d = data(&[[1.0, 0.0], [1.0, 0.1], [2.0, 0.0], [0.5, 1.0]]);
        let h = hyper(2, 2);
        let model = Part2Model::new(&d, &h).unwrap();
        let s = state_with(
            vec![atom(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]), atom(&[2.0, 0.0], &[1.0, 0.0, 0.0, 1.0])],
            vec![0.5, 0.5],
            4,
        );
        let mut lw = Vec::new();
        model.allocation_log_weights(&s, 0, &mut lw);
        let p0 = 1.0 / (1.0 + (lw[1] - lw[0]).exp());
        assert!((p0 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_component_posterior_is_the_prior() {
        let d = data(&[[1.0, 0.0], [2.0, 0.1], [2.0, 0.0], [0.5, 1.0]]);
        let h = hyper(2, 3);
        let model = Part2Model::new(&d, &h).unwrap();
        let mut s = state_with(
            vec![atom(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]); 3],
            vec![0.4, 0.3, 0.3],
            4,
        );
        s.k0 = 0.7;
        let post = model.atom_posterior(&s, 2).unwrap();
        assert_eq!(post.kappa, 0.7);
        assert_eq!(post.nu, 4.0);
        let busy = model.atom_posterior(&s, 0).unwrap();
        assert_eq!(busy.kappa, 4.7);
        assert_eq!(busy.nu, 8.0);
    }

    #[test]
    fn dominant_prior_pulls_posterior_location_to_m1() {
        let d = data(&[[5.0, 5.0], [1.0, 0.0], [2.0, 0.0], [3.0, 1.0]]);
        let h = hyper(2, 2);
        let model = Part2Model::new(&d, &h).unwrap();
        let mut s = state_with(vec![atom(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]); 2], vec![0.5, 0.5], 4);
        s.alloc = vec![0, 1, 1, 1];
        s.k0 = 1e12;
        s.m1 = Vector::from_vec(vec![-1.0, 2.0]);
        let post = model.atom_posterior(&s, 0).unwrap();
        assert!((post.m[0] + 1.0).abs() < 1e-10 && (post.m[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn stick_conditional_means() {
        // counts (2, 1, 0), alpha = 1: v1 ~ Beta(3, 2), v2 ~ Beta(2, 1)
        let d = data(&[[1.0, 0.0], [2.0, 0.1], [2.0, 0.0], [0.5, 1.0]]);
        let h = hyper(2, 3);
        let model = Part2Model::new(&d, &h).unwrap();
        let mut s = state_with(vec![atom(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]); 3], vec![0.4, 0.3, 0.3], 3);
        s.alloc = vec![0, 0, 1];
        let mut rng = RngStream::new(4, 0);
        let (mut a, mut b) = (0.0, 0.0);
        let reps = 10_000;
        for _ in 0..reps {
            s.alpha2 = 1.0;
            model.update_sticks_and_alpha2(&mut s, &mut rng).unwrap();
            a += s.sticks[0];
            b += s.sticks[1];
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((a / reps as f64 - 0.6).abs() < 0.02);
        assert!((b / reps as f64 - 2.0 / 3.0).abs() < 0.02);
    }

    #[test]
    fn k0_conditional_mean() {
        // k = 1, Σ = 1, μ - m1 = 2: Gamma((6.01 + 1)/2, (3.01 + 4)/2) = Gamma(3.505, 3.505)
        let z: Vec<f64> = vec![1.0, 2.0, 3.0];
        let dd = Part2Data::new(&z, &Mat::zeros(3, 0), false).unwrap();
        let mut h = hyper(1, 2);
        h.s2 = Mat::from_element(1, 1, 1e-30);
        let model = Part2Model::new(&dd, &h).unwrap();
        let mut s = state_with(vec![atom(&[2.0], &[1.0]), atom(&[0.0], &[1.0])], vec![0.5, 0.5], 3);
        let mut rng = RngStream::new(9, 0);
        let mut acc = 0.0;
        let reps = 10_000;
        for _ in 0..reps {
            s.atoms[0] = atom(&[2.0], &[1.0]);
            s.factors[0] = SpdFactor::new(&s.atoms[0].sigma, "t").unwrap();
            s.alloc = vec![0; 3];
            model.update_baseline(&mut s, &mut rng).unwrap();
            assert!(s.m1[0].abs() < 1e-10);
            acc += s.k0;
        }
        assert!((acc / reps as f64 - 1.0).abs() < 0.03, "{}", acc / reps as f64);
    }

    #[test]
    fn expert_examples() {
        let e = conditional_expert(&atom(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!((e.beta0, e.beta2[0], e.sigma2), (0.0, 0.0, 1.0));
        let e = conditional_expert(&atom(&[1.0, 2.0], &[2.0, 1.0, 1.0, 1.0])).unwrap();
        assert!((e.beta2[0] - 1.0).abs() < 1e-15);
        assert!((e.beta0 + 1.0).abs() < 1e-15);
        assert!((e.sigma2 - 1.0).abs() < 1e-15);
        for rho in [-0.9, -0.3, 0.0, 0.5, 0.99] {
            let e = conditional_expert(&atom(&[0.0, 0.0], &[1.0, rho, rho, 1.0])).unwrap();
            assert!((e.beta2[0] - rho).abs() < 1e-14);
            assert!((e.sigma2 - (1.0 - rho * rho)).abs() < 1e-14);
        }
    }

    fn draw(atoms: Vec<Atom<f64>>, weights: Vec<f64>) -> Part2Draw<f64> {
        let k = atoms[0].mu.len();
        Part2Draw::new(weights, atoms, 1.0, 1, Vector::zeros(k), 1.0, Mat::identity(k, k)).unwrap()
    }

    #[test]
    fn one_expert_is_its_own_conditional() {
        let a = atom(&[1.0, 2.0], &[2.0, 1.0, 1.0, 1.0]);
        let d = draw(vec![a], vec![1.0]);
        let mix = d.conditional(&[0.5], false).unwrap();
        for z in [-2.0, 0.0, 0.7, 3.0] {
            let want = normal_log_density(z, -1.0f64 + 0.5, 1.0).exp();
            assert!((mix.density(z) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_atoms_make_gates_constant() {
        let a = atom(&[1.0, 2.0], &[2.0, 1.0, 1.0, 1.0]);
        let d = draw(vec![a.clone(), a.clone(), a], vec![0.2, 0.5, 0.3]);
        for x in [-3.0, 0.0, 5.0] {
            let g = d.log_gates(&[x]).unwrap();
            for (gi, w) in g.iter().zip([0.2f64, 0.5, 0.3]) {
                assert!((gi.exp() - w).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn two_expert_gate_by_hand() {
        let d = draw(
            vec![atom(&[0.0, -2.0], &[1.0, 0.3, 0.3, 1.0]), atom(&[3.0, 2.0], &[1.0, -0.2, -0.2, 1.0])],
            vec![0.5, 0.5],
        );
        let g = d.log_gates(&[-2.0]).unwrap();
        let phi = |u: f64| (-0.5 * u * u).exp();
        let want = phi(0.0) / (phi(0.0) + phi(4.0));
        assert!((g[0].exp() - want).abs() < 1e-12);
        assert!((want - 0.99966).abs() < 1e-5);
    }

    #[test]
    fn gate_underflow_is_reported() {
        let d = draw(vec![atom(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1e-4])], vec![1.0]);
        assert!(d.conditional(&[1e200], false).is_none());
    }

    #[test]
    fn log_scale_density_integrates_and_has_lognormal_mean() {
        let d = draw(vec![atom(&[1.0, 0.0], &[0.25, 0.0, 0.0, 1.0])], vec![1.0]);
        let mix = d.conditional(&[0.0], true).unwrap();
        assert!((mix.mean() - (1.0f64 + 0.125).exp()).abs() < 1e-12);
        let grid: Vec<f64> = (1..40_000).map(|i| i as f64 * 0.001).collect();
        let dens: Vec<f64> = grid.iter().map(|&z| mix.density(z)).collect();
        assert!((trapezoid(&grid, &dens) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn grid_rejects_unsorted_and_handles_empty() {
        let d = draw(vec![atom(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])], vec![1.0]);
        assert!(conditional_density_grid(&[d.clone()], &[0.0], &[1.0, 0.0], false).is_err());
        let g = conditional_density_grid(&[d], &[0.0], &[], false).unwrap();
        assert!(g.bands.is_empty());
    }

    #[test]
    fn collapsed_alpha2_agrees_with_stick_gibbs() {
        let mut rng = RngStream::new(33, 0);
        let rows: Vec<[f64; 2]> = (0..24).map(|i| [1.0 + i as f64, 0.5 * i as f64]).collect();
        let d = data(&rows);
        let h = hyper(2, 12);
        let model = Part2Model::new(&d, &h).unwrap();
        let mut base = model.init_state(&mut rng).unwrap();
        base.alloc = (0..24).map(|j| [0, 0, 1, 4][j % 4]).collect();
        let draws = 40_000;
        let (mut a, mut b) = (base.clone(), base);
        let (mut sa, mut sb) = (0.0, 0.0);
        for _ in 0..draws {
            model.update_alpha2_collapsed(&mut a, &mut rng);
            model.update_sticks_and_alpha2(&mut b, &mut rng).unwrap();
            sa += a.alpha2;
            sb += b.alpha2;
        }
        let (ma, mb) = (sa / draws as f64, sb / draws as f64);
        assert!((ma - mb).abs() < 0.05 * mb, "{ma} vs {mb}");
    }

    #[test]
    fn sweeps_keep_state_valid() {
        let mut rng = RngStream::new(21, 0);
        let rows: Vec<[f64; 2]> = (0..60)
            .map(|i| {
                let x = f64::standard_normal(&mut rng);
                let z = if i % 2 == 0 { 5.0 + x } else { 10.0 - x } + 0.3 * f64::standard_normal(&mut rng);
                [z, x]
            })
            .collect();
        let d = data(&rows);
        let h = hyper(2, 8);
        let model = Part2Model::new(&d, &h).unwrap();
        let mut s = model.init_state(&mut rng).unwrap();
        for _ in 0..100 {
            model.sweep(&mut s, &mut rng).unwrap();
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.weights.iter().all(|&w| w >= 0.0));
            assert!(s.alloc.iter().all(|&l| l < 8));
            assert!(s.atoms.iter().all(|a| crate::linalg::is_spd(&a.sigma)));
            assert!(s.alpha2 > 0.0 && s.k0 > 0.0);
        }
    }

    proptest! {
        #[test]
        fn gates_sum_to_one(ws in proptest::collection::vec(0.01f64..1.0, 1..6),
                            mus in proptest::collection::vec(-3.0f64..3.0, 6),
                            x in -5.0f64..5.0) {
            let total: f64 = ws.iter().sum();
            let weights: Vec<f64> = ws.iter().map(|w| w / total).collect();
            let atoms = weights.iter().enumerate()
                .map(|(i, _)| atom(&[0.0, mus[i]], &[1.0, 0.2, 0.2, 0.5 + i as f64 * 0.1]))
                .collect();
            let d = draw(atoms, weights);
            let g = d.log_gates(&[x]).unwrap();
            let s: f64 = g.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
        }
    }
}
