//! Seedable sampling and density primitives used by both samplers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DistError;
use crate::linalg::{Mat, SpdFactor, Vector};
use crate::scalar::Real;

/// Per-chain random stream.
///
/// Built on the ChaCha counter-based generator: the master seed fixes the
/// key and `stream_id` selects one of 2^64 non-overlapping streams, so every
/// chain gets its own independent sequence from a single seed.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    #[inline]
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn domain(msg: impl Into<String>) -> DistError {
    DistError::Domain(msg.into())
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Standard logistic distribution function `1 / (1 + e^{-v})`.
#[inline]
pub fn logistic_cdf<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// `ln F(v)` for the standard logistic; finite far into the lower tail.
#[inline]
pub fn logistic_log_cdf<T: Real>(v: T) -> T {
    if v == -T::inf() {
        return -T::inf();
    }
    if v == T::inf() {
        return T::zero();
    }
    -softplus(-v)
}

#[inline]
pub fn logistic_log_pdf<T: Real>(v: T) -> T {
    -v - (softplus(-v) + softplus(-v))
}

#[inline]
pub fn logistic_quantile<T: Real>(u: T) -> T {
    (u / (T::one() - u)).ln()
}

/// Stick-breaking weights from `L-1` Beta fractions.
///
/// The last weight absorbs the remaining stick, so the output always lies on
/// the `L`-simplex.
pub fn stick_breaking<T: Real>(v: &[T]) -> Result<Vec<T>, DistError> {
    if let Some(bad) = v.iter().find(|&&x| !(x > T::zero() && x < T::one())) {
        return Err(domain(format!("stick fraction {bad} outside (0, 1)")));
    }
    let mut out = Vec::with_capacity(v.len() + 1);
    let mut remaining = T::one();
    for &x in v {
        out.push(x * remaining);
        remaining *= T::one() - x;
    }
    out.push(remaining);
    Ok(out)
}

/// Gamma draw with shape/rate parameterization.
pub fn sample_gamma<T: Real, R: RngCore + ?Sized>(
    rng: &mut R,
    shape: T,
    rate: T,
) -> Result<T, DistError> {
    if !(shape > T::zero() && shape.finite()) || !(rate > T::zero() && rate.finite()) {
        return Err(domain(format!("gamma(shape={shape}, rate={rate})")));
    }
    Ok(T::gamma(rng, shape, T::one() / rate))
}

pub fn sample_beta<T: Real, R: RngCore + ?Sized>(rng: &mut R, a: T, b: T) -> Result<T, DistError> {
    if !(a > T::zero() && a.finite()) || !(b > T::zero() && b.finite()) {
        return Err(domain(format!("beta({a}, {b})")));
    }
    Ok(T::beta(rng, a, b))
}

pub fn sample_chi_squared<T: Real, R: RngCore + ?Sized>(rng: &mut R, df: T) -> Result<T, DistError> {
    sample_gamma(rng, df * T::lit(0.5), T::lit(0.5))
}

pub fn standard_normal_vector<T: Real, R: RngCore + ?Sized>(rng: &mut R, k: usize) -> Vector<T> {
    Vector::from_fn(k, |_, _| T::standard_normal(rng))
}

/// Log-density of a univariate Normal.
#[inline]
pub fn normal_log_density<T: Real>(x: T, mean: T, var: T) -> T {
    let d = x - mean;
    -T::lit(0.5) * ((T::two_pi()).ln() + var.ln() + d * d / var)
}

/// Log-density of `Normal_k(mean, M)` given the factor of `M`.
pub fn mvnormal_log_density<T: Real>(x: &Vector<T>, mean: &Vector<T>, cov: &SpdFactor<T>) -> T {
    let k = T::count(x.len());
    let q = cov.quad_form(&(x - mean));
    -T::lit(0.5) * (k * T::two_pi().ln() + cov.log_det() + q)
}

/// Multivariate Normal with its covariance factor cached.
#[derive(Debug, Clone)]
pub struct MvNormalParams<T: Real> {
    mean: Vector<T>,
    covariance: Mat<T>,
    factor: SpdFactor<T>,
}

impl<T: Real> MvNormalParams<T> {
    pub fn new(mean: Vector<T>, covariance: Mat<T>) -> Result<Self, DistError> {
        if covariance.nrows() != mean.len() {
            return Err(domain(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let factor = SpdFactor::new(&covariance, "multivariate normal covariance")?;
        Ok(Self {
            mean,
            covariance,
            factor,
        })
    }

    pub fn mean(&self) -> &Vector<T> {
        &self.mean
    }

    pub fn covariance(&self) -> &Mat<T> {
        &self.covariance
    }

    pub fn factor(&self) -> &SpdFactor<T> {
        &self.factor
    }

    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vector<T> {
        let z = standard_normal_vector(rng, self.mean.len());
        &self.mean + self.factor.mul_lower(&z)
    }

    pub fn log_density(&self, x: &Vector<T>) -> T {
        mvnormal_log_density(x, &self.mean, &self.factor)
    }
}

pub fn sample_mvnormal<T: Real, R: RngCore + ?Sized>(rng: &mut R, params: &MvNormalParams<T>) -> Vector<T> {
    params.sample(rng)
}

fn check_dof<T: Real>(nu: T, k: usize) -> Result<(), DistError> {
    if !(nu > T::count(k) - T::one()) || !nu.finite() {
        return Err(domain(format!("degrees of freedom {nu} must exceed k-1 = {}", k as i64 - 1)));
    }
    Ok(())
}

/// Wishart draw by the Bartlett decomposition: `(L A)(L A)ᵀ` with `L` the
/// factor of `scale`, `A` lower triangular with `A_ii² ~ χ²(nu - i)` and
/// standard normal entries below the diagonal.
pub fn sample_wishart<T: Real, R: RngCore + ?Sized>(
    rng: &mut R,
    nu: T,
    scale: &Mat<T>,
) -> Result<Mat<T>, DistError> {
    let k = scale.nrows();
    check_dof(nu, k)?;
    let factor = SpdFactor::new(scale, "Wishart scale")?;
    Ok(bartlett(rng, nu, &factor))
}

fn bartlett<T: Real, R: RngCore + ?Sized>(rng: &mut R, nu: T, factor: &SpdFactor<T>) -> Mat<T> {
    let k = factor.dim();
    let mut a = Mat::zeros(k, k);
    for i in 0..k {
        let df = nu - T::count(i);
        a[(i, i)] = sample_chi_squared(rng, df).expect("df checked positive").sqrt();
        for j in 0..i {
            a[(i, j)] = T::standard_normal(rng);
        }
    }
    let la = factor.lower() * a;
    crate::linalg::symmetrize(&(&la * la.transpose()))
}

/// Inverse-Wishart draw with mean `psi / (nu - k - 1)`: a Wishart draw on
/// `psi⁻¹`, inverted.
pub fn sample_inverse_wishart<T: Real, R: RngCore + ?Sized>(
    rng: &mut R,
    nu: T,
    psi: &Mat<T>,
) -> Result<Mat<T>, DistError> {
    let k = psi.nrows();
    check_dof(nu, k)?;
    let psi_inv = SpdFactor::new(psi, "inverse-Wishart scale")?.inverse();
    let scale_factor = SpdFactor::new(&psi_inv, "inverse-Wishart scale inverse")?;
    let w = bartlett(rng, nu, &scale_factor);
    Ok(SpdFactor::new(&w, "Wishart draw")?.inverse())
}

/// Draw from the standard logistic restricted to `(lower, upper)`; either
/// bound may be infinite.
///
/// Inverse-CDF sampling carried out in log space on whichever side of zero
/// keeps the distribution function away from 1, so that intervals deep in
/// either tail are still sampled accurately. The result is clamped strictly
/// inside the interval when rounding would land it on a bound.
pub fn truncated_logistic_sample<T: Real, R: RngCore + ?Sized>(
    rng: &mut R,
    lower: T,
    upper: T,
) -> Result<T, DistError> {
    if !(lower < upper) {
        return Err(domain(format!("truncation interval ({lower}, {upper}) is empty")));
    }
    if lower > T::zero() {
        // mirror into the lower half, where F has full relative precision
        let v = lower_side_sample(rng, -upper, -lower);
        return Ok(-v);
    }
    Ok(lower_side_sample(rng, lower, upper))
}

fn lower_side_sample<T: Real, R: RngCore + ?Sized>(rng: &mut R, lower: T, upper: T) -> T {
    let la = logistic_log_cdf(lower);
    let lb = logistic_log_cdf(upper);
    let u = T::open01(rng);
    let ratio = (la - lb).exp();
    let log_p = lb + (u + (T::one() - u) * ratio).ln();
    // logit from log-probability
    let mut v = log_p - (-log_p.exp()).ln_1p();
    if !(v > lower) {
        v = if lower.finite() { lower.next_up() } else { v };
    }
    if !(v < upper) && upper.finite() {
        let below = -((-upper).next_up());
        v = if below > lower { below } else { upper };
    }
    v
}

/// Index drawn with probabilities proportional to `exp(log_weights)`.
///
/// Returns the index and whether the degenerate fallback was taken (every
/// weight zero or non-finite, in which case the arg-max is returned).
pub fn sample_categorical_log<T: Real, R: RngCore + ?Sized>(
    rng: &mut R,
    log_weights: &[T],
    scratch: &mut Vec<T>,
) -> (usize, bool) {
    let mut best = 0;
    let mut max = -T::inf();
    for (i, &w) in log_weights.iter().enumerate() {
        if w > max {
            max = w;
            best = i;
        }
    }
    if !max.finite() {
        return (best, true);
    }
    scratch.clear();
    let mut total = T::zero();
    for &w in log_weights {
        let p = (w - max).exp();
        total += p;
        scratch.push(p);
    }
    let target = T::open01(rng) * total;
    let mut acc = T::zero();
    for (i, &p) in scratch.iter().enumerate() {
        acc += p;
        if target < acc {
            return (i, false);
        }
    }
    // rounding in the running sum: last positive-mass entry
    let last = scratch.iter().rposition(|&p| p > T::zero()).unwrap_or(best);
    (last, false)
}

/// Index drawn with probabilities proportional to nonnegative `weights`.
pub fn sample_categorical<T: Real, R: RngCore + ?Sized>(rng: &mut R, weights: &[T]) -> usize {
    let total = weights.iter().fold(T::zero(), |a, &b| a + b);
    let target = T::open01(rng) * total;
    let mut acc = T::zero();
    for (i, &p) in weights.iter().enumerate() {
        acc += p;
        if target < acc {
            return i;
        }
    }
    weights.iter().rposition(|&p| p > T::zero()).unwrap_or(0)
}

/// Normal–Inverse-Wishart parameters: `Σ ~ IW(nu, psi)`, `μ | Σ ~ N(m, Σ / kappa)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwParams<T: Real> {
    pub m: Vector<T>,
    pub kappa: T,
    pub nu: T,
    pub psi: Mat<T>,
}

impl<T: Real> NiwParams<T> {
    pub fn new(m: Vector<T>, kappa: T, nu: T, psi: Mat<T>) -> Result<Self, DistError> {
        let k = m.len();
        if !(kappa > T::zero() && kappa.finite()) {
            return Err(domain(format!("kappa = {kappa} must be positive")));
        }
        check_dof(nu, k)?;
        if psi.nrows() != k || psi.ncols() != k {
            return Err(domain(format!("psi must be {k}x{k}")));
        }
        if !crate::linalg::is_spd(&psi) {
            return Err(domain("psi is not symmetric positive definite"));
        }
        Ok(Self { m, kappa, nu, psi })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Conjugate update from `n` observations with sample mean `mean` and
    /// scatter `Σ (d - mean)(d - mean)ᵀ`. With `n = 0` returns `self`.
    pub fn posterior(&self, n: usize, mean: &Vector<T>, scatter: &Mat<T>) -> Self {
        if n == 0 {
            return self.clone();
        }
        let nf = T::count(n);
        let kappa = self.kappa + nf;
        let m = (&self.m * self.kappa + mean * nf) / kappa;
        let dev = mean - &self.m;
        let shrink = self.kappa * nf / kappa;
        let psi = &self.psi + scatter + (&dev * dev.transpose()) * shrink;
        Self {
            m,
            kappa,
            nu: self.nu + nf,
            psi: crate::linalg::symmetrize(&psi),
        }
    }

    /// Joint draw `(μ, Σ)`.
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> Result<(Vector<T>, Mat<T>), DistError> {
        let sigma = sample_inverse_wishart(rng, self.nu, &self.psi)?;
        let cov = &sigma / self.kappa;
        let factor = SpdFactor::new(&cov, "atom mean covariance")?;
        let z = standard_normal_vector(rng, self.dim());
        let mu = &self.m + factor.mul_lower(&z);
        Ok((mu, sigma))
    }
}
