//! Formal privacy machinery.
//!
//! The client-side budget `(ε, δ)` is split by sequential composition into a
//! pure share `ε₁ = rε` for private subspace selection and `(ε₂, δ)` with
//! `ε₂ = (1−r)ε` for prototype release. Gaussian multipliers come from exact
//! Rényi accounting: per round a Gaussian release with unit-sensitivity
//! multiplier `σ` has RDP `α/(2σ²)`, `T` rounds compose linearly, and the
//! conversion `ε = ε(α) + ln(1/δ)/(α−1)` is minimised over `α` in closed form.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::scoring::PartitionMask;

/// Relative slack allowed when checking the harmonic calibration condition.
pub const HARMONIC_TOL: f64 = 1e-12;

/// Per-client privacy contract.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub rounds: usize,
    pub split_ratio: f64,
}

impl PrivacySpec {
    pub fn new(epsilon: f64, delta: f64, rounds: usize, split_ratio: f64) -> Result<Self> {
        let spec = Self {
            epsilon,
            delta,
            rounds,
            split_ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be positive"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::invalid(format!(
                "split ratio must lie in (0,1), got {}",
                self.split_ratio
            )));
        }
        Ok(())
    }

    /// `(ε₁, ε₂)`.
    pub fn split(&self) -> Result<(f64, f64)> {
        split_budget(self)
    }

    /// Multiplier for the isotropic baseline, which spends the whole budget.
    pub fn sigma_iso(&self) -> Result<f64> {
        calibrate_gaussian_sigma(self.epsilon, self.delta, self.rounds)
    }

    /// Multiplier of the reference isotropic mechanism calibrated to `(ε₂, δ)`.
    pub fn sigma_ref(&self) -> Result<f64> {
        let (_, eps2) = self.split()?;
        calibrate_gaussian_sigma(eps2, self.delta, self.rounds)
    }
}

pub fn split_budget(spec: &PrivacySpec) -> Result<(f64, f64)> {
    spec.validate()?;
    let eps1 = spec.split_ratio * spec.epsilon;
    // ε₂ derived by subtraction so that ε₁ + ε₂ reproduces ε bit-for-bit
    // whenever the subtraction is exact.
    let eps2 = spec.epsilon - eps1;
    Ok((eps1, eps2))
}

/// RDP of `rounds` composed Gaussian releases with multiplier `sigma`.
pub fn gaussian_rdp(alpha: f64, sigma: f64, rounds: usize) -> f64 {
    rounds as f64 * alpha / (2.0 * sigma * sigma)
}

/// RDP at order `alpha` converted to an `(ε, δ)` guarantee.
pub fn rdp_to_dp(rdp_epsilon: f64, alpha: f64, delta: f64) -> f64 {
    rdp_epsilon + (1.0 / delta).ln() / (alpha - 1.0)
}

/// Best `ε` reachable by the Gaussian RDP curve, `T/(2σ²) + √(2T ln(1/δ))/σ`.
pub fn gaussian_epsilon(sigma: f64, delta: f64, rounds: usize) -> f64 {
    let t = rounds as f64;
    let l = (1.0 / delta).ln();
    t / (2.0 * sigma * sigma) + (2.0 * t * l).sqrt() / sigma
}

/// Order that attains [`gaussian_epsilon`].
pub fn optimal_alpha(sigma: f64, delta: f64, rounds: usize) -> f64 {
    1.0 + (2.0 * sigma * sigma * (1.0 / delta).ln() / rounds as f64).sqrt()
}

/// Smallest multiplier whose `T`-fold composition meets `(eps, delta)`.
///
/// With `u = 1/σ` the optimal-order bound is the quadratic
/// `(T/2)u² + √(2T ln(1/δ))·u − ε = 0`; its positive root gives `σ`.
pub fn calibrate_gaussian_sigma(eps: f64, delta: f64, rounds: usize) -> Result<f64> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("epsilon must be positive, got {eps}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0,1), got {delta}")));
    }
    if rounds == 0 {
        return Err(Error::invalid("rounds must be positive"));
    }
    let a = rounds as f64 / 2.0;
    let b = (2.0 * rounds as f64 * (1.0 / delta).ln()).sqrt();
    let disc = b * b + 4.0 * a * eps;
    // Stable form of (−b + √disc) / 2a.
    let u = 2.0 * eps / (b + disc.sqrt());
    if !(u > 0.0) || !u.is_finite() {
        return Err(Error::Internal(format!(
            "no positive root for eps={eps}, delta={delta}, T={rounds}"
        )));
    }
    Ok(1.0 / u)
}

/// Adds independent `N(0, std_j²)` noise to each coordinate.
pub fn gaussian_mechanism(value: &[f64], noise_std: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
    if value.len() != noise_std.len() {
        return Err(Error::invalid(format!(
            "value has {} coordinates but {} noise scales were given",
            value.len(),
            noise_std.len()
        )));
    }
    if let Some(s) = noise_std.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!("noise std must be finite and non-negative, got {s}")));
    }
    Ok(value
        .iter()
        .zip(noise_std)
        .map(|(&v, &s)| if s == 0.0 { v } else { v + s * rng.gaussian() })
        .collect())
}

/// Oneshot Laplace Top-k: perturb every score once with `Lap(lambda)` and
/// return the indices of the `k` largest noisy values, ascending.
///
/// Ties are broken toward the lower index.
pub fn laplace_topk(scores: &[f64], k: usize, lambda: f64, rng: &mut RngStream) -> Result<Vec<usize>> {
    let d = scores.len();
    if k == 0 || k > d {
        return Err(Error::invalid(format!("top-k needs 1 <= k <= d, got k={k}, d={d}")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("laplace scale must be finite and >= 0, got {lambda}")));
    }
    let noisy: Vec<f64> = scores.iter().map(|&s| s + rng.laplace(lambda)).collect();
    Ok(top_k_indices(&noisy, k))
}

/// Indices of the `k` largest values, lowest index first among equals,
/// returned in ascending index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut top: Vec<usize> = idx.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

/// `λ = 2·d_A·H·T / ε₁`: per-round scale making `T` partitions `(ε₁, 0)`-LDP.
pub fn calibrate_laplace_scale(d_a: usize, score_cap: f64, rounds: usize, eps1: f64) -> Result<f64> {
    if !(eps1 > 0.0) {
        return Err(Error::invalid(format!("eps1 must be positive, got {eps1}")));
    }
    if d_a == 0 || rounds == 0 || !(score_cap > 0.0) {
        return Err(Error::invalid("d_A, H and T must all be positive"));
    }
    Ok(2.0 * d_a as f64 * score_cap * rounds as f64 / eps1)
}

/// Groupwise noise allocation for the anisotropic release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupNoiseParams {
    pub sigma_ref: f64,
    pub w_a: f64,
    pub w_b: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
    /// Full-vector sensitivity `Δ`.
    pub delta_iso: f64,
    pub delta_a: f64,
    pub delta_b: f64,
}

impl GroupNoiseParams {
    /// Per-coordinate noise std on the discriminative group.
    pub fn std_a(&self) -> f64 {
        self.sigma_a * self.delta_a
    }

    /// Per-coordinate noise std on the remaining group.
    pub fn std_b(&self) -> f64 {
        self.sigma_b * self.delta_b
    }

    /// Same multipliers re-expressed for another sensitivity `Δ`.
    pub fn with_sensitivity(&self, delta_iso: f64) -> Self {
        let ka = if self.delta_iso > 0.0 { self.delta_a / self.delta_iso } else { 0.0 };
        let kb = if self.delta_iso > 0.0 { self.delta_b / self.delta_iso } else { 0.0 };
        Self {
            delta_iso,
            delta_a: delta_iso * ka,
            delta_b: delta_iso * kb,
            ..*self
        }
    }

    /// `1/σ_A² + 1/σ_B²`.
    pub fn harmonic_lhs(&self) -> f64 {
        1.0 / (self.sigma_a * self.sigma_a) + 1.0 / (self.sigma_b * self.sigma_b)
    }

    /// Whether `1/σ_A² + 1/σ_B² ≤ 1/σ_ref²` up to [`HARMONIC_TOL`] relative slack.
    pub fn satisfies_harmonic(&self) -> bool {
        let rhs = 1.0 / (self.sigma_ref * self.sigma_ref);
        self.harmonic_lhs() <= rhs * (1.0 + HARMONIC_TOL)
    }
}

/// Canonical allocation: `κ_A = √(d_A/d)`, `κ_B = √(d_B/d)`,
/// `w_A = κ_B/(κ_A+κ_B)`, `σ_{A,B} = σ_ref/√w_{A,B}`, `Δ_{A,B} = Δκ_{A,B}`.
pub fn group_noise_params(mask: &PartitionMask, sigma_ref: f64, delta_iso: f64) -> Result<GroupNoiseParams> {
    if mask.d_a() == 0 || mask.d_b() == 0 {
        return Err(Error::invalid(format!(
            "degenerate partition d_A={}, d_B={}",
            mask.d_a(),
            mask.d_b()
        )));
    }
    if !(sigma_ref > 0.0) || !sigma_ref.is_finite() {
        return Err(Error::invalid(format!("sigma_ref must be positive, got {sigma_ref}")));
    }
    if !(delta_iso >= 0.0) {
        return Err(Error::invalid(format!("sensitivity must be non-negative, got {delta_iso}")));
    }
    if mask.rho() > 0.5 {
        warn!(
            "partition ratio {} exceeds 0.5: the selected subspace receives more noise than the isotropic reference",
            mask.rho()
        );
    }
    let ka = mask.kappa_a();
    let kb = mask.kappa_b();
    let w_a = kb / (ka + kb);
    let w_b = 1.0 - w_a;
    Ok(GroupNoiseParams {
        sigma_ref,
        w_a,
        w_b,
        sigma_a: sigma_ref / w_a.sqrt(),
        sigma_b: sigma_ref / w_b.sqrt(),
        delta_iso,
        delta_a: delta_iso * ka,
        delta_b: delta_iso * kb,
    })
}

/// Worst-case per-round RDP of the groupwise release never exceeds the
/// reference: `(α/2)(1/σ_A² + 1/σ_B²) ≤ α/(2σ_ref²)` for every `α` in the grid.
pub fn rdp_dominance_check(params: &GroupNoiseParams, alpha_grid: &[f64]) -> bool {
    alpha_grid.iter().all(|&alpha| {
        if !(alpha > 1.0) {
            return false;
        }
        let vpp = alpha / 2.0 * params.harmonic_lhs();
        let reference = alpha / (2.0 * params.sigma_ref * params.sigma_ref);
        vpp <= reference * (1.0 + HARMONIC_TOL)
    })
}

/// Rényi divergence `D_α(N(μ, Σ) ‖ N(μ', Σ))` for diagonal `Σ`:
/// `(α/2)·Σ_j (μ_j − μ'_j)² / Σ_jj`.
pub fn gaussian_rdp_diag(alpha: f64, mean_diff: &[f64], variances: &[f64]) -> f64 {
    alpha / 2.0
        * mean_diff
            .iter()
            .zip(variances)
            .map(|(&v, &s)| v * v / s)
            .sum::<f64>()
}

/// Ledger of what a client has spent so far.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub pure_epsilon_spent: f64,
    pub gaussian_rounds: usize,
    pub sigma_release: Option<f64>,
}

impl BudgetLedger {
    pub fn record_partition(&mut self, per_round_eps: f64) {
        self.pure_epsilon_spent += per_round_eps;
    }

    pub fn record_release(&mut self, sigma: f64) {
        self.gaussian_rounds += 1;
        self.sigma_release = Some(sigma);
    }

    /// Total `ε` at the given `δ` under sequential composition.
    pub fn total_epsilon(&self, delta: f64) -> f64 {
        let gauss = match self.sigma_release {
            Some(s) if self.gaussian_rounds > 0 => gaussian_epsilon(s, delta, self.gaussian_rounds),
            _ => 0.0,
        };
        self.pure_epsilon_spent + gauss
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mask(d: usize, rho: f64) -> PartitionMask {
        let d_a = PartitionMask::d_a_for(d, rho);
        PartitionMask::new(d, rho, (0..d_a).collect()).unwrap()
    }

    #[test]
    fn split_examples() {
        let s = PrivacySpec::new(1.0, 1e-5, 20, 0.1).unwrap();
        let (a, b) = split_budget(&s).unwrap();
        assert_relative_eq!(a, 0.1, epsilon = 1e-15);
        assert_relative_eq!(b, 0.9, epsilon = 1e-15);
        assert_eq!(a + b, 1.0);
        let (a, b) = PrivacySpec::new(2.0, 1e-5, 1, 0.5).unwrap().split().unwrap();
        assert_eq!((a, b), (1.0, 1.0));
        let (a, b) = PrivacySpec::new(0.5, 1e-5, 1, 0.2).unwrap().split().unwrap();
        assert_relative_eq!(a, 0.1, epsilon = 1e-15);
        assert_relative_eq!(b, 0.4, epsilon = 1e-15);
        assert!(PrivacySpec::new(1.0, 1e-5, 1, 1.0).is_err());
        assert!(PrivacySpec::new(1.0, 1e-5, 1, 0.0).is_err());
    }

    /// Independent root of the quadratic written in the textbook form.
    fn quadratic_oracle(eps: f64, delta: f64, t: usize) -> f64 {
        let a = t as f64 / 2.0;
        let b = (2.0 * t as f64 * (1.0 / delta).ln()).sqrt();
        let u = (-b + (b * b + 4.0 * a * eps).sqrt()) / (2.0 * a);
        1.0 / u
    }

    #[test]
    fn calibration_examples() {
        let s1 = calibrate_gaussian_sigma(1.0, 1e-5, 1).unwrap();
        assert_relative_eq!(s1, quadratic_oracle(1.0, 1e-5, 1), max_relative = 1e-12);
        assert!((s1 - 4.900).abs() < 5e-3, "{s1}");
        let s20 = calibrate_gaussian_sigma(1.0, 1e-5, 20).unwrap();
        assert!((s20 - 21.92).abs() < 5e-3, "{s20}");
        let s20b = calibrate_gaussian_sigma(2.0, 1e-5, 20).unwrap();
        assert_relative_eq!(s20b, quadratic_oracle(2.0, 1e-5, 20), max_relative = 1e-12);
        assert!((s20b - 11.177).abs() < 5e-3, "{s20b}");
        assert!(s20b < s20);
    }

    #[test]
    fn calibration_meets_target_exactly() {
        for &(eps, delta, t) in &[(0.3, 1e-6, 5), (1.0, 1e-5, 20), (8.0, 1e-3, 100)] {
            let s = calibrate_gaussian_sigma(eps, delta, t).unwrap();
            assert_relative_eq!(gaussian_epsilon(s, delta, t), eps, max_relative = 1e-12);
            // Numeric minimisation over α agrees with the closed form.
            let numeric = (1..200_000)
                .map(|i| 1.0 + i as f64 * 1e-3)
                .map(|a| rdp_to_dp(gaussian_rdp(a, s, t), a, delta))
                .fold(f64::INFINITY, f64::min);
            assert!(numeric >= eps * (1.0 - 1e-9));
            assert!((numeric - eps) / eps < 1e-5, "{numeric} vs {eps}");
        }
    }

    #[test]
    fn calibration_rejects_bad_input() {
        assert!(calibrate_gaussian_sigma(0.0, 1e-5, 1).is_err());
        assert!(calibrate_gaussian_sigma(1.0, 1.0, 1).is_err());
        assert!(calibrate_gaussian_sigma(1.0, 1e-5, 0).is_err());
    }

    #[test]
    fn gaussian_mechanism_identity_and_errors() {
        let mut rng = RngStream::new(0, 0);
        let v = vec![1.0, -2.0, 3.5];
        assert_eq!(gaussian_mechanism(&v, &[0.0; 3], &mut rng).unwrap(), v);
        assert!(gaussian_mechanism(&v, &[1.0, -1.0, 0.0], &mut rng).is_err());
        assert!(gaussian_mechanism(&v, &[1.0], &mut rng).is_err());
    }

    #[test]
    fn gaussian_mechanism_moments() {
        let mut rng = RngStream::new(5, 9);
        let n = 100_000;
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for _ in 0..n {
            let out = gaussian_mechanism(&[0.0, 0.0], &[1.0, 2.0], &mut rng).unwrap();
            for j in 0..2 {
                sums[j] += out[j];
                sq[j] += out[j] * out[j];
            }
        }
        let target = [1.0, 2.0];
        for j in 0..2 {
            let m = sums[j] / n as f64;
            let sd = (sq[j] / n as f64 - m * m).sqrt();
            assert!(m.abs() < 0.02 * target[j], "mean {m}");
            assert!((sd / target[j] - 1.0).abs() < 0.01, "std {sd}");
        }
    }

    #[test]
    fn topk_noiseless_examples() {
        let mut rng = RngStream::new(0, 0);
        assert_eq!(laplace_topk(&[0.1, 0.05, 0.09], 1, 0.0, &mut rng).unwrap(), vec![0]);
        assert_eq!(laplace_topk(&[0.3, 0.1, 0.2], 3, 0.0, &mut rng).unwrap(), vec![0, 1, 2]);
        assert_eq!(laplace_topk(&[0.5, 0.5, 0.5], 2, 0.0, &mut rng).unwrap(), vec![0, 1]);
        assert!(laplace_topk(&[0.1], 2, 0.0, &mut rng).is_err());
        assert!(laplace_topk(&[0.1], 0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn laplace_scale_examples() {
        assert_relative_eq!(calibrate_laplace_scale(20, 0.1, 20, 0.1).unwrap(), 800.0, max_relative = 1e-12);
        assert_eq!(calibrate_laplace_scale(1, 1.0, 1, 2.0).unwrap(), 1.0);
        assert_relative_eq!(calibrate_laplace_scale(103, 0.1, 20, 0.1).unwrap(), 4120.0, max_relative = 1e-12);
        assert!(calibrate_laplace_scale(1, 1.0, 1, 0.0).is_err());
    }

    #[test]
    fn group_params_examples() {
        let p = group_noise_params(&mask(100, 0.2), 3.0, 0.4).unwrap();
        assert_relative_eq!(p.w_a, 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p.sigma_a, 3.0 * 1.5f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(p.delta_a, 0.4 * 0.2f64.sqrt(), max_relative = 1e-14);
        assert!((p.delta_a - 0.17889).abs() < 1e-5);
        let ratio = p.std_a() / (p.sigma_ref * p.delta_iso);
        assert!((ratio - 0.5477).abs() < 1e-4);

        let p = group_noise_params(&mask(10, 0.5), 2.0, 1.0).unwrap();
        assert_relative_eq!(p.w_a, 0.5, epsilon = 1e-15);
        assert_relative_eq!(p.sigma_a, p.sigma_b, epsilon = 1e-15);
        assert_relative_eq!(p.sigma_a, 2.0 * 2f64.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(
            p.delta_a * p.delta_a + p.delta_b * p.delta_b,
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn rdp_dominance_examples() {
        let grid = [1.1, 2.0, 10.0, 100.0];
        let p = group_noise_params(&mask(100, 0.2), 3.0, 0.4).unwrap();
        assert!(rdp_dominance_check(&p, &grid));
        let bad = GroupNoiseParams {
            sigma_a: 1.5,
            sigma_b: 1e9,
            ..p
        };
        assert!(!rdp_dominance_check(&bad, &grid));
        let sym = GroupNoiseParams {
            sigma_a: 3.0 * 2f64.sqrt(),
            sigma_b: 3.0 * 2f64.sqrt(),
            ..p
        };
        assert!(rdp_dominance_check(&sym, &grid));
    }

    #[test]
    fn diagonal_rdp_matches_group_bound() {
        let p = group_noise_params(&mask(10, 0.3), 2.0, 1.0).unwrap();
        // Worst-case difference saturates both groups' sensitivities.
        let mut diff = vec![0.0; 10];
        diff[0] = p.delta_a;
        diff[5] = p.delta_b;
        let mut var = vec![p.std_b().powi(2); 10];
        for v in var.iter_mut().take(3) {
            *v = p.std_a().powi(2);
        }
        let d = gaussian_rdp_diag(3.0, &diff, &var);
        assert_relative_eq!(d, 1.5 * p.harmonic_lhs(), max_relative = 1e-12);
    }

    #[test]
    fn ledger_composes_to_budget() {
        let spec = PrivacySpec::new(1.0, 1e-5, 20, 0.1).unwrap();
        let (eps1, _) = spec.split().unwrap();
        let sigma = spec.sigma_ref().unwrap();
        let mut ledger = BudgetLedger::default();
        for _ in 0..20 {
            ledger.record_partition(eps1 / 20.0);
            ledger.record_release(sigma);
        }
        assert_relative_eq!(ledger.total_epsilon(1e-5), 1.0, max_relative = 1e-9);
    }
}
