//! Occurrence part: binary regression `δ_i = I(V_i <= w_i'β)` with the latent
//! thresholds drawn from a Dirichlet process centred on the standard
//! logistic.
//!
//! The DP is integrated out (Pólya urn): each `V_i` either joins the value of
//! an existing cluster or takes a fresh baseline draw. `β` is updated by a
//! random-walk Metropolis–Hastings step conditional on `V`, and the
//! precision by the two-step Gamma-mixture augmentation.

use rand::RngCore;

use crate::config::{BetaUpdate, Part1Hyper};
use crate::diagnostics::Band;
use crate::dist::{
    logistic_cdf, logistic_log_cdf, sample_beta, sample_categorical, sample_gamma, standard_normal_vector,
    truncated_logistic_sample,
};
use crate::error::{DataError, DistError};
use crate::linalg::{is_full_rank_gram, Mat, SpdFactor, Vector};
use crate::scalar::Real;

/// Occurrence indicators and design matrix (intercept column included).
#[derive(Debug, Clone)]
pub struct Part1Data<T: Real> {
    delta: Vec<bool>,
    w: Mat<T>,
}

impl<T: Real> Part1Data<T> {
    /// `w` is `n × r`. Full column rank is required whenever `n > 0`.
    pub fn new(delta: Vec<bool>, w: Mat<T>) -> Result<Self, DataError> {
        if delta.len() != w.nrows() {
            return Err(DataError::Invalid(format!(
                "{} indicators but {} design rows",
                delta.len(),
                w.nrows()
            )));
        }
        if w.ncols() == 0 {
            return Err(DataError::Invalid("occurrence design has no columns".into()));
        }
        if w.iter().any(|v| !v.finite()) {
            return Err(DataError::Invalid("occurrence design has non-finite entries".into()));
        }
        if w.nrows() > 0 && !is_full_rank_gram(&(w.transpose() * &w)) {
            return Err(DataError::Invalid(
                "occurrence design does not have full column rank".into(),
            ));
        }
        Ok(Self { delta, w })
    }

    /// No observations, `r` covariates: the sampler then explores the prior.
    pub fn empty(r: usize) -> Self {
        Self {
            delta: Vec::new(),
            w: Mat::zeros(0, r),
        }
    }

    pub fn n(&self) -> usize {
        self.delta.len()
    }

    pub fn r(&self) -> usize {
        self.w.ncols()
    }

    pub fn delta(&self) -> &[bool] {
        &self.delta
    }

    pub fn design(&self) -> &Mat<T> {
        &self.w
    }

    fn index(&self, beta: &Vector<T>) -> Vec<T> {
        (&self.w * beta).iter().copied().collect()
    }
}

/// Interval of `V` consistent with the indicator: `(-∞, η]` for `δ = 1`,
/// `(η, ∞)` for `δ = 0`.
#[inline]
fn consistent<T: Real>(delta: bool, v: T, eta: T) -> bool {
    if delta {
        v <= eta
    } else {
        v > eta
    }
}

/// Burn-in iterations between proposal adjustments.
pub const ADAPT_WINDOW: usize = 50;
/// Burn-in draws of `β` needed before the proposal shape is re-estimated.
const SHAPE_MIN_DRAWS: usize = 250;

/// Running Metropolis–Hastings bookkeeping and the tunable proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct MhTracker<T: Real> {
    pub scale: T,
    pub accepted: usize,
    pub proposed: usize,
    window_accepted: usize,
    window_proposed: usize,
    /// Lower factor of the learned proposal covariance; the prior factor is
    /// used until one is available.
    shape: Option<Mat<T>>,
    sum: Vector<T>,
    outer: Mat<T>,
    seen: usize,
}

impl<T: Real> MhTracker<T> {
    fn new(scale: T, r: usize) -> Self {
        Self {
            scale,
            accepted: 0,
            proposed: 0,
            window_accepted: 0,
            window_proposed: 0,
            shape: None,
            sum: Vector::zeros(r),
            outer: Mat::zeros(r, r),
            seen: 0,
        }
    }

    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.window_proposed += 1;
        if accepted {
            self.accepted += 1;
            self.window_accepted += 1;
        }
    }

    pub fn rate(&self) -> T {
        if self.proposed == 0 {
            T::zero()
        } else {
            T::count(self.accepted) / T::count(self.proposed)
        }
    }

    pub fn has_learned_shape(&self) -> bool {
        self.shape.is_some()
    }

    /// Accumulate a burn-in draw for the proposal-shape estimate.
    pub fn observe(&mut self, beta: &Vector<T>) {
        self.sum += beta;
        self.outer += beta * beta.transpose();
        self.seen += 1;
    }

    /// Rescale towards a 20-40% acceptance window using the proposals since
    /// the last call, and once enough draws are collected replace the
    /// proposal shape by their empirical covariance.
    pub fn adapt(&mut self) {
        if self.seen >= SHAPE_MIN_DRAWS {
            let n = T::count(self.seen);
            let mean = &self.sum / n;
            let cov = &self.outer / n - &mean * mean.transpose();
            if let Some(f) = SpdFactor::strict(&cov) {
                if self.shape.is_none() {
                    self.scale = T::lit(2.38) / T::count(self.sum.len()).sqrt();
                    self.window_accepted = 0;
                    self.window_proposed = 0;
                }
                self.shape = Some(f.lower());
            }
            self.sum.fill(T::zero());
            self.outer.fill(T::zero());
            self.seen = 0;
        }
        if self.window_proposed == 0 {
            return;
        }
        let rate = self.window_accepted as f64 / self.window_proposed as f64;
        if rate < 0.2 {
            self.scale *= T::lit(0.6 + rate);
        } else if rate > 0.4 {
            self.scale *= T::lit(1.0 + (rate - 0.4) * 1.5);
        }
        self.window_accepted = 0;
        self.window_proposed = 0;
    }

    pub fn reset_counts(&mut self) {
        self.accepted = 0;
        self.proposed = 0;
        self.window_accepted = 0;
        self.window_proposed = 0;
    }
}

/// Sampler state for the occurrence part.
#[derive(Debug, Clone)]
pub struct Part1State<T: Real> {
    pub beta: Vector<T>,
    /// Latent thresholds, one per unit.
    pub v: Vec<T>,
    pub alpha: T,
    /// Cluster slot per unit.
    labels: Vec<usize>,
    /// Shared latent value per cluster slot.
    values: Vec<T>,
    /// Members per slot; zero marks a free slot.
    counts: Vec<usize>,
    free: Vec<usize>,
    /// Cached linear index `w_i'β`.
    eta: Vec<T>,
    pub mh: MhTracker<T>,
}

impl<T: Real> Part1State<T> {
    pub fn n_clusters(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Occupied clusters as `(value, size)`, sorted by value.
    pub fn clusters(&self) -> Vec<(T, usize)> {
        let mut out: Vec<_> = self
            .values
            .iter()
            .zip(&self.counts)
            .filter(|(_, &c)| c > 0)
            .map(|(&v, &c)| (v, c))
            .collect();
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite latent values"));
        out
    }

    /// Whether `δ_i = I(V_i <= w_i'β)` holds for every unit.
    pub fn sign_consistent(&self, data: &Part1Data<T>) -> bool {
        let eta = data.index(&self.beta);
        data.delta
            .iter()
            .zip(&self.v)
            .zip(&eta)
            .all(|((&d, &v), &e)| consistent(d, v, e))
    }

    /// Cluster bookkeeping: members agree with their cluster value and the
    /// number of occupied clusters equals the number of distinct values.
    pub fn bookkeeping_consistent(&self) -> bool {
        let members_ok = self
            .labels
            .iter()
            .zip(&self.v)
            .all(|(&l, &v)| self.counts[l] > 0 && self.values[l] == v);
        let mut distinct = self.v.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        distinct.dedup();
        let total: usize = self.counts.iter().sum();
        members_ok && distinct.len() == self.n_clusters() && total == self.v.len()
    }

    pub fn snapshot(&self) -> Part1Draw<T> {
        Part1Draw::new(self.beta.clone(), self.alpha, self.clusters())
    }

    fn new_cluster(&mut self, value: T) -> usize {
        if let Some(slot) = self.free.pop() {
            self.values[slot] = value;
            self.counts[slot] = 1;
            slot
        } else {
            self.values.push(value);
            self.counts.push(1);
            self.values.len() - 1
        }
    }

    fn leave(&mut self, i: usize) {
        let slot = self.labels[i];
        self.counts[slot] -= 1;
        if self.counts[slot] == 0 {
            self.free.push(slot);
        }
    }
}

/// Occurrence-part model: data, hyperparameters and the cached prior factor.
#[derive(Debug, Clone)]
pub struct Part1Model<'a, T: Real> {
    pub data: &'a Part1Data<T>,
    pub hyper: &'a Part1Hyper<T>,
    prior: SpdFactor<T>,
}

/// One stored posterior draw of the occurrence part.
#[derive(Debug, Clone, PartialEq)]
pub struct Part1Draw<T: Real> {
    pub beta: Vector<T>,
    pub alpha: T,
    /// Distinct latent values with multiplicities, sorted by value.
    pub clusters: Vec<(T, usize)>,
    n: usize,
    cumulative: Vec<usize>,
}

impl<T: Real> Part1Draw<T> {
    pub fn new(beta: Vector<T>, alpha: T, mut clusters: Vec<(T, usize)>) -> Self {
        clusters.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite latent values"));
        let mut cumulative = Vec::with_capacity(clusters.len());
        let mut acc = 0;
        for &(_, c) in &clusters {
            acc += c;
            cumulative.push(acc);
        }
        Self {
            beta,
            alpha,
            clusters,
            n: acc,
            cumulative,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Posterior-predictive distribution function of the link at `t`:
    /// `(α F(t) + #{V <= t}) / (α + n)`.
    pub fn link(&self, t: T) -> T {
        let below = self.clusters.partition_point(|&(v, _)| v <= t);
        let mass = if below == 0 { 0 } else { self.cumulative[below - 1] };
        (self.alpha * logistic_cdf(t) + T::count(mass)) / (self.alpha + T::count(self.n))
    }

    /// `P(δ = 1 | w)` under this draw.
    pub fn p_positive(&self, w: &[T]) -> T {
        let t = w.iter().zip(self.beta.iter()).fold(T::zero(), |a, (&x, &b)| a + x * b);
        self.link(t)
    }
}

impl<'a, T: Real> Part1Model<'a, T> {
    pub fn new(data: &'a Part1Data<T>, hyper: &'a Part1Hyper<T>) -> Result<Self, DistError> {
        if hyper.beta1_0.len() != data.r() {
            return Err(DistError::Domain(format!(
                "beta1_0 has length {} but the design has {} columns",
                hyper.beta1_0.len(),
                data.r()
            )));
        }
        let prior = SpdFactor::new(&hyper.s_beta1_0, "S_beta1_0")?;
        Ok(Self { data, hyper, prior })
    }

    /// Initial state: `β` at the logistic maximum-likelihood fit (prior mean
    /// under separation), `V` from the truncated baseline, `α = a/b`, every
    /// unit in its own cluster.
    pub fn init_state<R: RngCore + ?Sized>(&self, rng: &mut R) -> Result<Part1State<T>, DistError> {
        let beta = if self.data.n() == 0 {
            self.hyper.beta1_0.clone()
        } else {
            match logistic_mle(self.data) {
                Some(b) => b,
                None => {
                    log::warn!("logistic MLE failed (separation?); starting beta1 at its prior mean");
                    self.hyper.beta1_0.clone()
                }
            }
        };
        let eta = self.data.index(&beta);
        let n = self.data.n();
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            let (lo, hi) = interval(self.data.delta[i], eta[i]);
            v.push(truncated_logistic_sample(rng, lo, hi)?);
        }
        let labels = (0..n).collect();
        let values = v.clone();
        Ok(Part1State {
            beta,
            v,
            alpha: self.hyper.a1_0 / self.hyper.b1_0,
            labels,
            values,
            counts: vec![1; n],
            free: Vec::new(),
            eta,
            mh: MhTracker::new(self.hyper.mh_step_scale, self.data.r()),
        })
    }

    /// Weights of the two branches of the urn conditional for unit `i`
    /// (with `i` already removed from its cluster): `α · G0(interval)` for a
    /// fresh draw, then the size of every occupied cluster slot whose value
    /// is consistent (zero otherwise).
    pub fn latent_weights(&self, state: &Part1State<T>, i: usize, out: &mut Vec<T>) {
        let d = self.data.delta[i];
        let eta = state.eta[i];
        let mass = if d { logistic_cdf(eta) } else { logistic_cdf(-eta) };
        out.clear();
        out.push(state.alpha * mass);
        for (slot, &c) in state.counts.iter().enumerate() {
            let w = if c > 0 && consistent(d, state.values[slot], eta) {
                T::count(c)
            } else {
                T::zero()
            };
            out.push(w);
        }
    }

    /// Resample every `V_i` from its urn conditional, then redraw each
    /// cluster's shared value from the baseline restricted to the interval
    /// consistent with all of its members.
    pub fn update_latent_v<R: RngCore + ?Sized>(&self, state: &mut Part1State<T>, rng: &mut R) -> Result<(), DistError> {
        let mut weights = Vec::new();
        for i in 0..self.data.n() {
            state.leave(i);
            self.latent_weights(state, i, &mut weights);
            let others = weights[1..].iter().fold(T::zero(), |a, &b| a + b);
            // no consistent cluster: the baseline branch is certain
            let choice = if others == T::zero() {
                0
            } else if !(weights[0] > T::zero()) {
                1 + sample_categorical(rng, &weights[1..])
            } else {
                sample_categorical(rng, &weights)
            };
            if choice == 0 {
                let (lo, hi) = interval(self.data.delta[i], state.eta[i]);
                let value = truncated_logistic_sample(rng, lo, hi)?;
                state.labels[i] = state.new_cluster(value);
            } else {
                let slot = choice - 1;
                state.counts[slot] += 1;
                state.labels[i] = slot;
            }
            state.v[i] = state.values[state.labels[i]];
        }
        self.relocate_clusters(state, rng)
    }

    fn relocate_clusters<R: RngCore + ?Sized>(&self, state: &mut Part1State<T>, rng: &mut R) -> Result<(), DistError> {
        let slots = state.values.len();
        let mut lo = vec![-T::inf(); slots];
        let mut hi = vec![T::inf(); slots];
        for i in 0..self.data.n() {
            let s = state.labels[i];
            let e = state.eta[i];
            if self.data.delta[i] {
                if e < hi[s] {
                    hi[s] = e;
                }
            } else if e > lo[s] {
                lo[s] = e;
            }
        }
        for s in 0..slots {
            if state.counts[s] == 0 {
                continue;
            }
            // the current value lies in (lo, hi], so the interval is never empty
            let value = if lo[s] < hi[s] {
                truncated_logistic_sample(rng, lo[s], hi[s])?
            } else {
                state.values[s]
            };
            state.values[s] = value;
        }
        for i in 0..self.data.n() {
            state.v[i] = state.values[state.labels[i]];
        }
        Ok(())
    }

    fn propose<R: RngCore + ?Sized>(&self, state: &Part1State<T>, rng: &mut R) -> Vector<T> {
        let z = standard_normal_vector(rng, self.data.r());
        let step = match &state.mh.shape {
            Some(l) => l * z,
            None => self.prior.mul_lower(&z),
        };
        &state.beta + step * state.mh.scale
    }

    fn log_prior(&self, beta: &Vector<T>) -> T {
        -T::lit(0.5) * self.prior.quad_form(&(beta - &self.hyper.beta1_0))
    }

    /// One random-walk Metropolis–Hastings step on `β` given `V`; proposals
    /// that break sign consistency for any unit are rejected.
    pub fn update_beta1<R: RngCore + ?Sized>(&self, state: &mut Part1State<T>, rng: &mut R) -> bool {
        let proposal = self.propose(state, rng);
        let eta = self.data.index(&proposal);
        let feasible = self
            .data
            .delta
            .iter()
            .zip(&state.v)
            .zip(&eta)
            .all(|((&d, &v), &e)| consistent(d, v, e));
        let accept = feasible && {
            let log_ratio = self.log_prior(&proposal) - self.log_prior(&state.beta);
            log_ratio >= T::zero() || T::open01(rng).ln() < log_ratio
        };
        state.mh.record(accept);
        if accept {
            state.beta = proposal;
            state.eta = eta;
        }
        accept
    }

    /// Log-likelihood of `β` given the partition only, with each cluster's
    /// shared value integrated against the baseline:
    /// `Σ_c ln[F(min η over positive members) - F(max η over zero members)]`.
    /// `-∞` when some cluster's interval is empty.
    pub fn partition_log_likelihood(&self, state: &Part1State<T>, eta: &[T], lo: &mut Vec<T>, hi: &mut Vec<T>) -> T {
        let slots = state.values.len();
        lo.clear();
        lo.resize(slots, -T::inf());
        hi.clear();
        hi.resize(slots, T::inf());
        for (i, &e) in eta.iter().enumerate() {
            let s = state.labels[i];
            if self.data.delta[i] {
                if e < hi[s] {
                    hi[s] = e;
                }
            } else if e > lo[s] {
                lo[s] = e;
            }
        }
        let mut total = T::zero();
        for s in 0..slots {
            if state.counts[s] == 0 {
                continue;
            }
            if !(lo[s] < hi[s]) {
                return -T::inf();
            }
            total += log_interval_mass(lo[s], hi[s]);
        }
        total
    }

    /// Random-walk Metropolis–Hastings on `β` targeting its conditional given
    /// the cluster partition (cluster values integrated out), followed by a
    /// fresh draw of every cluster value given the accepted `β`.
    pub fn update_beta1_collapsed<R: RngCore + ?Sized>(&self, state: &mut Part1State<T>, rng: &mut R) -> Result<bool, DistError> {
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        let current = self.partition_log_likelihood(state, &state.eta, &mut lo, &mut hi);
        let proposal = self.propose(state, rng);
        let eta = self.data.index(&proposal);
        let proposed = self.partition_log_likelihood(state, &eta, &mut lo, &mut hi);
        let accept = proposed > -T::inf() && {
            let log_ratio = proposed - current + self.log_prior(&proposal) - self.log_prior(&state.beta);
            log_ratio >= T::zero() || T::open01(rng).ln() < log_ratio
        };
        state.mh.record(accept);
        if accept {
            state.beta = proposal;
            state.eta = eta;
        }
        self.relocate_clusters(state, rng)?;
        Ok(accept)
    }

    /// Burn-in tuning after sweep `iteration` (0-based): feeds the current
    /// `β` to the proposal-shape estimate and adapts every
    /// [`ADAPT_WINDOW`] sweeps. No-op when adaptation is disabled.
    pub fn tune(&self, state: &mut Part1State<T>, iteration: usize) {
        if !self.hyper.mh_adapt {
            return;
        }
        state.mh.observe(&state.beta);
        if (iteration + 1) % ADAPT_WINDOW == 0 {
            state.mh.adapt();
        }
    }

    /// Precision update: `η ~ Beta(α + 1, n)`, then `α` from the two-Gamma
    /// mixture with shapes `a + d` and `a + d - 1` and rate `b - ln η`.
    /// With no data the prior is returned.
    pub fn update_alpha1<R: RngCore + ?Sized>(&self, state: &mut Part1State<T>, rng: &mut R) -> Result<(), DistError> {
        state.alpha = escobar_west(
            rng,
            state.alpha,
            state.n_clusters(),
            self.data.n(),
            self.hyper.a1_0,
            self.hyper.b1_0,
        )?;
        Ok(())
    }

    /// Full sweep: latent thresholds, coefficients, precision.
    pub fn sweep<R: RngCore + ?Sized>(&self, state: &mut Part1State<T>, rng: &mut R) -> Result<(), DistError> {
        self.update_latent_v(state, rng)?;
        match self.hyper.beta_update {
            BetaUpdate::Conditional => {
                self.update_beta1(state, rng);
            }
            BetaUpdate::Collapsed => {
                self.update_beta1_collapsed(state, rng)?;
            }
        }
        self.update_alpha1(state, rng)?;
        debug_assert!(state.sign_consistent(self.data));
        debug_assert!(state.bookkeeping_consistent());
        Ok(())
    }
}

/// The precision update shared by both DPs' urn representations.
pub fn escobar_west<T: Real, R: RngCore + ?Sized>(
    rng: &mut R,
    alpha: T,
    d: usize,
    n: usize,
    a: T,
    b: T,
) -> Result<T, DistError> {
    if n == 0 || d == 0 {
        return sample_gamma(rng, a, b);
    }
    let eta = sample_beta(rng, alpha + T::one(), T::count(n))?;
    let rate = b - eta.ln();
    let shape_hi = a + T::count(d);
    let odds = (shape_hi - T::one()) / (T::count(n) * rate);
    let p_hi = odds / (T::one() + odds);
    let shape = if T::open01(rng) < p_hi { shape_hi } else { shape_hi - T::one() };
    sample_gamma(rng, shape, rate)
}

/// `ln[F(hi) - F(lo)]` for the standard logistic, evaluated on the side of
/// zero where the difference keeps its precision.
fn log_interval_mass<T: Real>(lo: T, hi: T) -> T {
    if lo > T::zero() {
        return log_interval_mass(-hi, -lo);
    }
    let lb = logistic_log_cdf(hi);
    if lo == -T::inf() {
        return lb;
    }
    let la = logistic_log_cdf(lo);
    lb + (-(la - lb).exp()).ln_1p()
}

fn interval<T: Real>(delta: bool, eta: T) -> (T, T) {
    if delta {
        (-T::inf(), eta)
    } else {
        (eta, T::inf())
    }
}

/// Newton–Raphson logistic regression, at most 50 iterations. `None` when it
/// fails to converge or the coefficients diverge (separation).
pub fn logistic_mle<T: Real>(data: &Part1Data<T>) -> Option<Vector<T>> {
    let w = &data.w;
    let (n, r) = (w.nrows(), w.ncols());
    let mut beta = Vector::zeros(r);
    for _ in 0..50 {
        let eta = w * &beta;
        let mut grad = Vector::zeros(r);
        let mut info = Mat::zeros(r, r);
        for i in 0..n {
            let p = logistic_cdf(eta[i]);
            let y = if data.delta[i] { T::one() } else { T::zero() };
            let row = w.row(i).transpose();
            grad += &row * (y - p);
            info += &row * row.transpose() * (p * (T::one() - p));
        }
        let step = SpdFactor::strict(&info)?.solve(&grad);
        beta += &step;
        if beta.iter().any(|b| !b.finite() || b.abs() > T::lit(1e3)) {
            return None;
        }
        if step.amax() < T::lit(1e-10) * (T::one() + beta.amax()) {
            return Some(beta);
        }
    }
    None
}

/// Posterior mean and 95% band of the link at each grid point.
pub fn estimated_link<T: Real>(draws: &[Part1Draw<T>], grid: &[T]) -> Vec<Band<T>> {
    let mut vals = Vec::with_capacity(draws.len());
    grid.iter()
        .map(|&t| {
            vals.clear();
            vals.extend(draws.iter().map(|d| d.link(t)));
            Band::from_draws(&vals)
        })
        .collect()
}

/// Posterior mean and 95% band of `P(δ = 1 | w)`.
pub fn expected_delta<T: Real>(draws: &[Part1Draw<T>], w: &[T]) -> Result<Band<T>, DataError> {
    let r = draws.first().map_or(w.len(), |d| d.beta.len());
    if w.len() != r {
        return Err(DataError::Invalid(format!(
            "covariate vector has length {} but the model has {r} coefficients",
            w.len()
        )));
    }
    if draws.is_empty() {
        return Err(DataError::Invalid("no posterior draws".into()));
    }
    let vals: Vec<T> = draws.iter().map(|d| d.p_positive(w)).collect();
    Ok(Band::from_draws(&vals))
}
