//! Variance-preserving noise schedules, v-parameterization and DDIM sampling.
//!
//! Schedules store `α_t` (the square root of the cumulative signal fraction)
//! and `σ_t = √(1 − α_t²)` for `t = 0..=T`. A trained denoiser is replaced
//! by oracles that return the exact posterior mean for known data
//! distributions, which lets the sampler be checked against closed forms.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_SAMPLE_STEPS: usize = 50;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffusionError {
    #[error("schedule needs at least one step")]
    NoSteps,
    #[error("timestep {t} outside 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("DDIM step needs s < t, got t = {t}, s = {s}")]
    InvalidOrdering { t: usize, s: usize },
    #[error("eta {0} outside [0, 1]")]
    EtaOutOfRange(f64),
    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(&'static str),
    #[error("{steps} sampling steps exceed the {max} schedule steps")]
    TooManySteps { steps: usize, max: usize },
    #[error("mixture has no components")]
    EmptyMixture,
    #[error("invalid mixture: {0}")]
    InvalidMixture(&'static str),
    #[error("unknown schedule {0:?} (expected linear-beta or cosine)")]
    UnknownSchedule(String),
}

pub type Result<T, E = DiffusionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Betas linear from 1e-4 to 0.02, stretched to keep that shape for any T.
    LinearBeta,
    /// Squared-cosine cumulative signal with offset 0.008.
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-beta" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(DiffusionError::UnknownSchedule(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// From cumulative signal fractions `ᾱ_1..ᾱ_T`; `ᾱ_0 = 1` is prepended.
    fn from_alpha_bars(alpha_bars: impl IntoIterator<Item = f64>) -> Self {
        let mut alphas = vec![1.0];
        let mut sigmas = vec![0.0];
        for ab in alpha_bars {
            alphas.push(ab.sqrt());
            sigmas.push((1.0 - ab).sqrt());
        }
        Self { alphas, sigmas }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn snr(&self, t: usize) -> f64 {
        (self.alphas[t] / self.sigmas[t]).powi(2)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            Err(DiffusionError::TimestepOutOfRange { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    /// Checks `α² + σ² = 1`, monotonicity and the clean endpoint.
    pub fn validate(&self) -> Result<()> {
        if self.alphas.len() != self.sigmas.len() || self.alphas.len() < 2 {
            return Err(DiffusionError::DegenerateSchedule(
                "need matching arrays of length T + 1 ≥ 2",
            ));
        }
        if self.alphas[0] != 1.0 || self.sigmas[0] != 0.0 {
            return Err(DiffusionError::DegenerateSchedule("α_0 must be 1 and σ_0 must be 0"));
        }
        for (a, s) in self.alphas.iter().zip(&self.sigmas) {
            if !(0.0..=1.0).contains(a) || !(0.0..=1.0).contains(s) || (a * a + s * s - 1.0).abs() > 1e-9 {
                return Err(DiffusionError::DegenerateSchedule("α² + σ² ≠ 1"));
            }
        }
        if self.alphas.windows(2).any(|w| w[1] > w[0]) {
            return Err(DiffusionError::DegenerateSchedule("α increases"));
        }
        Ok(())
    }
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(DiffusionError::NoSteps);
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => {
            let stretch = DEFAULT_TRAIN_STEPS as f64 / steps as f64;
            let (lo, hi) = (1e-4 * stretch, 0.02 * stretch);
            (0..steps)
                .map(|i| {
                    let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                    (lo + (hi - lo) * f).min(MAX_BETA)
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * PI / 2.0)
                    .cos()
                    .powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(MAX_BETA))
                .collect()
        }
    };
    let mut ab = 1.0;
    Ok(NoiseSchedule::from_alpha_bars(betas.into_iter().map(|b| {
        ab *= 1.0 - b;
        ab
    })))
}

/// Affinely maps `α` so that `α_T = 0` while `α_0 = 1`, then recomputes σ.
pub fn rescale_zero_terminal_snr(schedule: &NoiseSchedule) -> Result<NoiseSchedule> {
    schedule.validate()?;
    let t = schedule.steps();
    let (a0, at) = (schedule.alphas[0], schedule.alphas[t]);
    if !(at < a0) {
        return Err(DiffusionError::DegenerateSchedule("α_T equals α_0; nothing to rescale"));
    }
    let mut alphas: Vec<f64> = schedule.alphas.iter().map(|a| (a - at) / (a0 - at)).collect();
    alphas[0] = 1.0;
    alphas[t] = 0.0;
    let mut sigmas: Vec<f64> = alphas.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
    sigmas[0] = 0.0;
    sigmas[t] = 1.0;
    Ok(NoiseSchedule { alphas, sigmas })
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(DiffusionError::LengthMismatch(a.len(), b.len()))
    }
}

/// `x_t = α_t·x0 + σ_t·ε`.
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    same_len(x0, eps)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// `v = α_t·ε − σ_t·x0`.
pub fn v_from(x0: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    same_len(x0, eps)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * e - s * x).collect())
}

/// `x0 = α_t·x_t − σ_t·v`.
pub fn x0_from_v(x_t: &[f64], v: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    same_len(x_t, v)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(x_t.iter().zip(v).map(|(x, v)| a * x - s * v).collect())
}

/// `ε = σ_t·x_t + α_t·v`.
pub fn eps_from_v(x_t: &[f64], v: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    same_len(x_t, v)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(x_t.iter().zip(v).map(|(x, v)| s * x + a * v).collect())
}

/// The v that maps `x_t` to the clean estimate `x0_hat`; zero when `σ_t = 0`.
fn v_for_x0(x_t: &[f64], x0_hat: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; x_t.len()];
    }
    x_t.iter().zip(x0_hat).map(|(x, x0)| (alpha * x - x0) / sigma).collect()
}

/// DDIM noise scale `τ` between `t` and `s` at `η = 1`.
pub fn ddim_tau(schedule: &NoiseSchedule, t: usize, s: usize) -> f64 {
    let (at, st) = (schedule.alpha(t), schedule.sigma(t));
    let (as_, ss) = (schedule.alpha(s), schedule.sigma(s));
    if st == 0.0 || as_ == 0.0 {
        return 0.0;
    }
    ((ss * ss) / (st * st) * (1.0 - (at * at) / (as_ * as_)))
        .max(0.0)
        .sqrt()
}

/// One DDIM update from `t` to `s < t`; `η = 0` is deterministic.
pub fn ddim_step(
    x_t: &[f64],
    v_hat: &[f64],
    t: usize,
    s: usize,
    eta: f64,
    schedule: &NoiseSchedule,
    noise: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if s >= t {
        return Err(DiffusionError::InvalidOrdering { t, s });
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(DiffusionError::EtaOutOfRange(eta));
    }
    same_len(x_t, noise)?;
    let x0 = x0_from_v(x_t, v_hat, t, schedule)?;
    let eps = eps_from_v(x_t, v_hat, t, schedule)?;
    let tau = eta * ddim_tau(schedule, t, s);
    let (as_, ss) = (schedule.alpha(s), schedule.sigma(s));
    let dir = (ss * ss - tau * tau).max(0.0).sqrt();
    Ok((0..x_t.len())
        .map(|i| as_ * x0[i] + dir * eps[i] + tau * noise[i])
        .collect())
}

/// A stand-in for the learned denoiser: maps `(x_t, t)` to a v-prediction.
pub trait DenoiserOracle {
    fn predict_v(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64>;
}

/// Data concentrated at a single point: the posterior mean is that point.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaOracle {
    pub target: Vec<f64>,
}

impl DenoiserOracle for DeltaOracle {
    fn predict_v(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
        v_for_x0(x_t, &self.target, schedule.alpha(t), schedule.sigma(t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Gaussian-mixture data distribution with its exact posterior-mean denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
    /// Eigendecomposition `C = Q diag(λ) Qᵀ` of each covariance, so that
    /// `α²C + σ²I` is diagonal in the same basis for every noise level.
    eigen: Vec<(DMatrix<f64>, DVector<f64>)>,
    dim: usize,
}

impl GaussianMixture {
    /// Weights must be positive and sum to 1 (±1e-9); covariances symmetric
    /// positive semi-definite.
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components.first().ok_or(DiffusionError::EmptyMixture)?;
        let dim = first.mean.len();
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 || components.iter().any(|c| !(c.weight > 0.0)) {
            return Err(DiffusionError::InvalidMixture("weights must be positive and sum to 1"));
        }
        let mut eigen = Vec::with_capacity(components.len());
        for c in &components {
            if c.mean.len() != dim || c.covariance.shape() != (dim, dim) {
                return Err(DiffusionError::InvalidMixture("component dimensions differ"));
            }
            if (&c.covariance - c.covariance.transpose()).amax() > 1e-12 {
                return Err(DiffusionError::InvalidMixture("covariance is not symmetric"));
            }
            let scale = c.covariance.amax().max(1.0);
            let eig = c.covariance.clone().symmetric_eigen();
            if eig.eigenvalues.min() < -1e-12 * scale {
                return Err(DiffusionError::InvalidMixture(
                    "covariance is not positive semi-definite",
                ));
            }
            eigen.push((eig.eigenvectors, eig.eigenvalues.map(|l| l.max(0.0))));
        }
        Ok(Self { components, eigen, dim })
    }

    /// `N(mean, variance·I)`.
    pub fn isotropic(mean: &[f64], variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(vec![MixtureComponent {
            weight: 1.0,
            mean: DVector::from_column_slice(mean),
            covariance: DMatrix::identity(d, d) * variance,
        }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// `E[x0 | x_t]` for noise level `(α, σ)` with `σ > 0`.
    ///
    /// Per component, `x_t ~ N(α m, α²C + σ²I)` and the posterior mean is
    /// `m + α C (α²C + σ²I)⁻¹ (x_t − α m)`; components are weighted by their
    /// responsibilities, computed in the log domain.
    pub fn posterior_mean(&self, x_t: &DVector<f64>, alpha: f64, sigma: f64) -> DVector<f64> {
        let mut log_resp = Vec::with_capacity(self.components.len());
        let mut means = Vec::with_capacity(self.components.len());
        for (c, (q, lambda)) in self.components.iter().zip(&self.eigen) {
            let r = q.tr_mul(&(x_t - &c.mean * alpha));
            let var = lambda.map(|l| alpha * alpha * l + sigma * sigma);
            let solved = r.component_div(&var);
            let log_det: f64 = var.iter().map(|v| v.ln()).sum();
            log_resp.push(c.weight.ln() - 0.5 * log_det - 0.5 * r.dot(&solved));
            means.push(&c.mean + q * lambda.component_mul(&solved) * alpha);
        }
        let max = log_resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_resp.iter().map(|l| (l - max).exp()).collect();
        let norm: f64 = weights.iter().sum();
        means
            .iter()
            .zip(&weights)
            .fold(DVector::zeros(self.dim), |acc, (m, w)| acc + m * (w / norm))
    }
}

/// Posterior-mean v-prediction for mixture data. Zero at `σ_t = 0`.
pub fn gm_posterior_v(x_t: &[f64], t: usize, mixture: &GaussianMixture, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if x_t.len() != mixture.dim {
        return Err(DiffusionError::LengthMismatch(x_t.len(), mixture.dim));
    }
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    if s == 0.0 {
        return Ok(vec![0.0; x_t.len()]);
    }
    let x0 = mixture.posterior_mean(&DVector::from_column_slice(x_t), a, s);
    Ok(v_for_x0(x_t, x0.as_slice(), a, s))
}

impl DenoiserOracle for GaussianMixture {
    fn predict_v(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
        gm_posterior_v(x_t, t, self, schedule).expect("dimension checked by the sampler")
    }
}

/// `num_steps + 1` timesteps from `T` down to 0, uniformly strided.
pub fn sampling_timesteps(total: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps < 1 {
        return Err(DiffusionError::NoSteps);
    }
    if num_steps > total {
        return Err(DiffusionError::TooManySteps {
            steps: num_steps,
            max: total,
        });
    }
    Ok((0..=num_steps)
        .map(|i| ((total * (num_steps - i)) as f64 / num_steps as f64).round() as usize)
        .collect())
}

/// DDIM sampling from unit Gaussian noise. Returns the final sample and the
/// state after every step (starting with the initial noise).
pub fn sample_trajectory(
    denoiser: &dyn DenoiserOracle,
    schedule: &NoiseSchedule,
    num_steps: usize,
    eta: f64,
    seed: u64,
    dim: usize,
) -> Result<Vec<Vec<f64>>> {
    schedule.validate()?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(DiffusionError::EtaOutOfRange(eta));
    }
    let ts = sampling_timesteps(schedule.steps(), num_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(rng)).collect() };
    let mut x = draw(&mut rng);
    let mut trajectory = vec![x.clone()];
    for w in ts.windows(2) {
        let (t, s) = (w[0], w[1]);
        let v = denoiser.predict_v(&x, t, schedule);
        same_len(&x, &v)?;
        let noise = if eta > 0.0 { draw(&mut rng) } else { vec![0.0; dim] };
        x = ddim_step(&x, &v, t, s, eta, schedule, &noise)?;
        trajectory.push(x.clone());
    }
    Ok(trajectory)
}

pub fn sample(
    denoiser: &dyn DenoiserOracle,
    schedule: &NoiseSchedule,
    num_steps: usize,
    eta: f64,
    seed: u64,
    dim: usize,
) -> Result<Vec<f64>> {
    let mut traj = sample_trajectory(denoiser, schedule, num_steps, eta, seed, dim)?;
    Ok(traj.pop().expect("trajectory holds at least the initial noise"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn zero_snr(kind: ScheduleKind) -> NoiseSchedule {
        rescale_zero_terminal_snr(&make_schedule(kind, 1000).unwrap()).unwrap()
    }

    #[test]
    fn schedules_are_variance_preserving() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            for steps in [1, 2, 10, 1000] {
                let s = make_schedule(kind, steps).unwrap();
                assert_eq!(s.steps(), steps);
                s.validate().unwrap();
                assert_eq!((s.alpha(0), s.sigma(0)), (1.0, 0.0));
            }
        }
        let cos = make_schedule(ScheduleKind::Cosine, 1000).unwrap();
        assert!(cos.alphas.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(make_schedule(ScheduleKind::Cosine, 0), Err(DiffusionError::NoSteps));
        assert!("sqrt".parse::<ScheduleKind>().is_err());
        assert_eq!("linear-beta".parse::<ScheduleKind>().unwrap(), ScheduleKind::LinearBeta);
    }

    #[test]
    fn linear_beta_matches_closed_product() {
        let s = make_schedule(ScheduleKind::LinearBeta, 1000).unwrap();
        let mut ab = 1.0;
        for t in 1..=1000 {
            ab *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0);
            assert!((s.alpha(t) - ab.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_terminal_snr_rescale() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            let s = zero_snr(kind);
            let t = s.steps();
            assert_eq!((s.alpha(t), s.sigma(t)), (0.0, 1.0));
            assert_eq!((s.alpha(0), s.sigma(0)), (1.0, 0.0));
            assert_eq!(s.snr(t), 0.0);
            s.validate().unwrap();
            let snr: Vec<f64> = (1..=t).map(|i| s.snr(i)).collect();
            assert!(snr.windows(2).all(|w| w[1] < w[0]));
        }
        let flat = NoiseSchedule {
            alphas: vec![1.0, 1.0],
            sigmas: vec![0.0, 0.0],
        };
        assert!(matches!(
            rescale_zero_terminal_snr(&flat),
            Err(DiffusionError::DegenerateSchedule(_))
        ));
    }

    #[test]
    fn forward_process_endpoints() {
        let s = zero_snr(ScheduleKind::Cosine);
        let x0 = [0.3, -1.2, 2.0];
        let eps = [0.5, 0.1, -0.7];
        assert_eq!(forward_diffuse(&x0, 0, &eps, &s).unwrap(), x0);
        assert_eq!(forward_diffuse(&x0, 1000, &eps, &s).unwrap(), eps);
        assert!(matches!(
            forward_diffuse(&x0, 1001, &eps, &s),
            Err(DiffusionError::TimestepOutOfRange { t: 1001, max: 1000 })
        ));
        assert!(forward_diffuse(&x0, 3, &eps[..2], &s).is_err());
    }

    #[test]
    fn forward_process_monte_carlo_mean() {
        let s = make_schedule(ScheduleKind::Cosine, 1000).unwrap();
        let (t, x0, n) = (400, 1.7, 100_000);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            sum += forward_diffuse(&[x0], t, &[e], &s).unwrap()[0];
        }
        let mean = sum / n as f64;
        assert!((mean - s.alpha(t) * x0).abs() < 3.0 * s.sigma(t) / (n as f64).sqrt());
    }

    #[test]
    fn v_algebra_fixtures() {
        let s = zero_snr(ScheduleKind::LinearBeta);
        let (x0, eps) = ([0.4, -0.9], [1.1, 0.2]);
        assert_eq!(v_from(&x0, &eps, 0, &s).unwrap(), eps);
        assert_eq!(x0_from_v(&eps, &[7.0, 8.0], 0, &s).unwrap(), eps);
        assert_eq!(v_from(&x0, &eps, 1000, &s).unwrap(), vec![-0.4, 0.9]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let half = NoiseSchedule {
            alphas: vec![1.0, h],
            sigmas: vec![0.0, h],
        };
        let xt = forward_diffuse(&[1.0], 1, &[0.0], &half).unwrap();
        let v = v_from(&[1.0], &[0.0], 1, &half).unwrap();
        assert!((xt[0] - h).abs() < 1e-15 && (v[0] + h).abs() < 1e-15);
        assert!((x0_from_v(&xt, &v, 1, &half).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn v_round_trip(
            t in 0usize..=1000,
            x0 in prop::collection::vec(-5.0f64..5.0, 4),
            eps in prop::collection::vec(-5.0f64..5.0, 4),
            cosine in any::<bool>(),
        ) {
            let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::LinearBeta };
            for s in [make_schedule(kind, 1000).unwrap(), zero_snr(kind)] {
                let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
                let v = v_from(&x0, &eps, t, &s).unwrap();
                let x0r = x0_from_v(&xt, &v, t, &s).unwrap();
                let er = eps_from_v(&xt, &v, t, &s).unwrap();
                for i in 0..4 {
                    prop_assert!((x0r[i] - x0[i]).abs() < 1e-9);
                    prop_assert!((er[i] - eps[i]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn ddim_single_step_on_delta_data() {
        let s = zero_snr(ScheduleKind::Cosine);
        let oracle = DeltaOracle {
            target: vec![0.25, -1.5, 3.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in [1, 17, 500, 1000] {
            let xt: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v = oracle.predict_v(&xt, t, &s);
            let x = ddim_step(&xt, &v, t, 0, 0.0, &s, &[0.0; 3]).unwrap();
            for (a, b) in x.iter().zip(&oracle.target) {
                assert!((a - b).abs() < 1e-9, "t = {t}: {a} vs {b}");
            }
        }
        let v = [0.0; 3];
        assert_eq!(
            ddim_step(&v, &v, 5, 5, 0.0, &s, &v),
            Err(DiffusionError::InvalidOrdering { t: 5, s: 5 })
        );
        assert_eq!(
            ddim_step(&v, &v, 5, 1, 1.5, &s, &v),
            Err(DiffusionError::EtaOutOfRange(1.5))
        );
    }

    #[test]
    fn delta_recovery_for_any_step_count() {
        let s = zero_snr(ScheduleKind::LinearBeta);
        let oracle = DeltaOracle {
            target: vec![0.7, -0.2, 1.9, -3.3],
        };
        for (steps, eta) in [(50, 0.0), (1, 0.0), (7, 0.5), (1000, 0.0), (50, 1.0)] {
            let x = sample(&oracle, &s, steps, eta, 42, 4).unwrap();
            for (a, b) in x.iter().zip(&oracle.target) {
                assert!((a - b).abs() < 1e-6, "{steps} steps: {a} vs {b}");
            }
        }
        assert!(matches!(
            sample(&oracle, &s, 1001, 0.0, 0, 4),
            Err(DiffusionError::TooManySteps { .. })
        ));
        assert_eq!(sample(&oracle, &s, 0, 0.0, 0, 4), Err(DiffusionError::NoSteps));
    }

    #[test]
    fn sampling_is_deterministic_in_seed() {
        let s = zero_snr(ScheduleKind::Cosine);
        let gm = GaussianMixture::isotropic(&[1.0, 2.0], 0.3).unwrap();
        let a = sample(&gm, &s, 20, 1.0, 5, 2).unwrap();
        let b = sample(&gm, &s, 20, 1.0, 5, 2).unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, sample(&gm, &s, 20, 1.0, 6, 2).unwrap());
    }

    #[test]
    fn timesteps_are_uniform_and_strict() {
        assert_eq!(sampling_timesteps(1000, 4).unwrap(), vec![1000, 750, 500, 250, 0]);
        let ts = sampling_timesteps(1000, 50).unwrap();
        assert_eq!((ts[0], *ts.last().unwrap(), ts.len()), (1000, 0, 51));
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 20));
        let ts = sampling_timesteps(10, 7).unwrap();
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn mixture_posterior_special_cases() {
        let s = zero_snr(ScheduleKind::Cosine);
        let delta = GaussianMixture::new(vec![MixtureComponent {
            weight: 1.0,
            mean: DVector::from_vec(vec![0.5, -0.5]),
            covariance: DMatrix::zeros(2, 2),
        }])
        .unwrap();
        for t in [1, 300, 999, 1000] {
            let xt = [0.9, 2.0];
            let v = gm_posterior_v(&xt, t, &delta, &s).unwrap();
            let x0 = x0_from_v(&xt, &v, t, &s).unwrap();
            assert!((x0[0] - 0.5).abs() < 1e-9 && (x0[1] + 0.5).abs() < 1e-9);
        }
        let m = DVector::from_vec(vec![1.0, 2.0]);
        let pair = GaussianMixture::new(vec![
            MixtureComponent {
                weight: 0.5,
                mean: m.clone(),
                covariance: DMatrix::zeros(2, 2),
            },
            MixtureComponent {
                weight: 0.5,
                mean: -m,
                covariance: DMatrix::zeros(2, 2),
            },
        ])
        .unwrap();
        for t in [10, 500, 1000] {
            let v = gm_posterior_v(&[0.0, 0.0], t, &pair, &s).unwrap();
            let x0 = x0_from_v(&[0.0, 0.0], &v, t, &s).unwrap();
            assert!(x0.iter().all(|x| x.abs() < 1e-12));
        }
        assert_eq!(gm_posterior_v(&[1.0, 1.0], 0, &pair, &s).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn mixture_validation() {
        assert_eq!(GaussianMixture::new(vec![]), Err(DiffusionError::EmptyMixture));
        let comp = |w: f64, c: f64| MixtureComponent {
            weight: w,
            mean: DVector::from_vec(vec![0.0]),
            covariance: DMatrix::from_element(1, 1, c),
        };
        assert!(GaussianMixture::new(vec![comp(0.5, 1.0), comp(0.4, 1.0)]).is_err());
        assert!(GaussianMixture::new(vec![comp(1.0, -1.0)]).is_err());
        let asym = MixtureComponent {
            weight: 1.0,
            mean: DVector::zeros(2),
            covariance: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
        };
        assert!(GaussianMixture::new(vec![asym]).is_err());
    }

    /// Posterior mean of 1-D mixture data by brute-force quadrature.
    fn quadrature_posterior(comps: &[(f64, f64, f64)], xt: f64, a: f64, s: f64) -> f64 {
        let density = |x: f64| -> f64 {
            comps
                .iter()
                .map(|&(w, m, v)| w * (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt())
                .sum::<f64>()
                * (-(xt - a * x).powi(2) / (2.0 * s * s)).exp()
        };
        // Composite Simpson over a range covering every component.
        let (lo, hi, n) = (-15.0, 15.0, 200_000);
        let h = (hi - lo) / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let c = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let p = density(x);
            num += c * x * p;
            den += c * p;
        }
        num / den
    }

    #[test]
    fn mixture_posterior_matches_quadrature() {
        let comps = [(0.3, -1.5, 0.2), (0.7, 2.0, 0.6)];
        let gm = GaussianMixture::new(
            comps
                .iter()
                .map(|&(w, m, v)| MixtureComponent {
                    weight: w,
                    mean: DVector::from_vec(vec![m]),
                    covariance: DMatrix::from_element(1, 1, v),
                })
                .collect(),
        )
        .unwrap();
        let s = zero_snr(ScheduleKind::Cosine);
        for t in [50, 250, 500, 750, 950, 1000] {
            for xt in [-2.0, -0.3, 0.0, 0.8, 2.5] {
                let v = gm_posterior_v(&[xt], t, &gm, &s).unwrap();
                let x0 = x0_from_v(&[xt], &v, t, &s).unwrap()[0];
                let expected = quadrature_posterior(&comps, xt, s.alpha(t), s.sigma(t));
                assert!((x0 - expected).abs() < 1e-6, "t = {t}, x_t = {xt}: {x0} vs {expected}");
            }
        }
    }

    fn sample_moments(gm: &GaussianMixture, s: &NoiseSchedule, steps: usize, n: u64) -> Vec<(f64, f64)> {
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|i| sample(gm, s, steps, 1.0, i, gm.dim()).unwrap())
            .collect();
        (0..gm.dim())
            .map(|d| {
                let m = samples.iter().map(|x| x[d]).sum::<f64>() / n as f64;
                let v = samples.iter().map(|x| (x[d] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn stochastic_sampling_matches_gaussian_moments() {
        let s = zero_snr(ScheduleKind::Cosine);
        let (mean, var) = ([2.0, -1.0], 0.5);
        let gm = GaussianMixture::isotropic(&mean, var).unwrap();
        for (d, (m, v)) in sample_moments(&gm, &s, 1000, 10_000).into_iter().enumerate() {
            assert!((m - mean[d]).abs() < 0.05 * mean[d].abs(), "mean {m}");
            assert!((v - var).abs() < 0.05 * var, "variance {v}");
        }
    }

    /// Output variance of the sampler on 1-D Gaussian data, propagated in
    /// closed form: every step is linear in the current state.
    fn predicted_output_variance(s: &NoiseSchedule, steps: usize, eta: f64, c: f64) -> f64 {
        let ts = sampling_timesteps(s.steps(), steps).unwrap();
        let mut var = 1.0;
        for w in ts.windows(2) {
            let (t, u) = (w[0], w[1]);
            let (a, sg) = (s.alpha(t), s.sigma(t));
            let marginal = a * a * c + sg * sg;
            let x0_gain = a * c / marginal;
            let eps_gain = (1.0 - a * x0_gain) / sg;
            let tau = eta * ddim_tau(s, t, u);
            let dir = (s.sigma(u).powi(2) - tau * tau).max(0.0).sqrt();
            let gain = s.alpha(u) * x0_gain + dir * eps_gain;
            var = gain * gain * var + tau * tau;
        }
        var
    }

    #[test]
    fn few_step_variance_deficit_is_the_discretization_one() {
        // With a posterior-mean denoiser each finite step loses a little
        // variance; at 50 stochastic steps the loss is about 10 %.
        let s = zero_snr(ScheduleKind::Cosine);
        let gm = GaussianMixture::isotropic(&[0.0], 0.5).unwrap();
        let predicted = predicted_output_variance(&s, 50, 1.0, 0.5);
        assert!(predicted < 0.46 && predicted > 0.44, "{predicted}");
        let (_, v) = sample_moments(&gm, &s, 50, 10_000)[0];
        // Four standard errors of a variance estimate from 1e4 draws.
        assert!(
            (v - predicted).abs() < 4.0 * predicted * (2.0f64 / 1e4).sqrt(),
            "{v} vs {predicted}"
        );
        assert!((predicted_output_variance(&s, 1000, 1.0, 0.5) - 0.5).abs() < 0.01);
    }
}
