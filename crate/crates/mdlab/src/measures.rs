//! Gaussian-smoothed measures with exact mixture densities, Monte Carlo
//! divergence estimators, and the smoothing-rate experiment.
//!
//! A [`SmoothedMixture`] is a finite mixture of isotropic Gaussians with a
//! shared variance `t`: either an empirical support convolved with noise, or
//! a fine quadrature net standing in for a continuous surface measure. Both
//! sides of every divergence are represented this way, so all densities are
//! exact and only the outer expectation is Monte Carlo.
//!
//! Everything is computed through max-shifted log-sum-exp; densities are
//! never materialized in linear space.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::geometry::{Manifold, ManifoldKind, SurfaceDensity};
use crate::vecmath::{self as vm, linear_fit, median, RunningStats};

/// Terms this far below the max are dropped from log-sum-exp accumulations;
/// exp(-45) ~ 3e-20 is below f64 resolution relative to the leading term.
const LSE_CUT: f64 = 45.0;

#[derive(Debug, Clone, PartialEq)]
pub enum MeasuresError {
    /// Quadrature net too coarse for the requested smoothing level.
    ResolutionTooCoarse { spacing: f64, required: f64 },
}

impl std::fmt::Display for MeasuresError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MeasuresError::ResolutionTooCoarse { spacing, required } => write!(
                f,
                "net spacing {spacing:.3e} exceeds required {required:.3e}"
            ),
        }
    }
}

impl std::error::Error for MeasuresError {}

/// A mixture of isotropic Gaussians N(a_i, t I) with weights w_i.
#[derive(Debug, Clone)]
pub struct SmoothedMixture {
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    cum_weights: Vec<f64>,
    t: f64,
    dim: usize,
}

impl SmoothedMixture {
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>, t: f64) -> Self {
        assert!(!atoms.is_empty(), "mixture needs at least one atom");
        assert_eq!(atoms.len(), weights.len());
        assert!(t > 0.0, "variance must be positive");
        let dim = atoms[0].len();
        assert!(atoms.iter().all(|a| a.len() == dim));
        let total: f64 = weights.iter().sum();
        assert!(
            (total - 1.0).abs() <= 1e-12 * weights.len() as f64,
            "weights must sum to 1, got {total}"
        );
        assert!(weights.iter().all(|w| *w > 0.0), "weights must be positive");
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        let mut cum = 0.0;
        let cum_weights = weights
            .iter()
            .map(|w| {
                cum += w;
                cum
            })
            .collect();
        Self { atoms, weights, log_weights, cum_weights, t, dim }
    }

    /// Equal-weight mixture over the given points.
    pub fn from_points(points: &[Vec<f64>], t: f64) -> Self {
        let n = points.len();
        Self::new(points.to_vec(), vec![1.0 / n as f64; n], t)
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn log_terms_max(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let inv2t = 0.5 / self.t;
        let mut terms = Vec::with_capacity(self.atoms.len());
        let mut max = f64::NEG_INFINITY;
        for (a, lw) in self.atoms.iter().zip(&self.log_weights) {
            let v = lw - vm::dist_sq(x, a) * inv2t;
            if v > max {
                max = v;
            }
            terms.push(v);
        }
        (terms, max)
    }

    /// log of the mixture density at `x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        let (terms, max) = self.log_terms_max(x);
        let mut sum = 0.0;
        for v in &terms {
            let d = v - max;
            if d > -LSE_CUT {
                sum += d.exp();
            }
        }
        let norm = -0.5 * self.dim as f64 * (std::f64::consts::TAU * self.t).ln();
        norm + max + sum.ln()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// Score (gradient of the log density): the softmax-weighted average of
    /// the conditional scores -(x - a_i)/t.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        gaussian_mixture_score(&self.atoms, &self.log_weights, self.t, x)
    }

    /// Draw one sample: pick an atom by weight, add sqrt(t) * N(0, I).
    pub fn sample(&self, rng: &mut StdRng) -> Vec<f64> {
        let u: f64 = rng.random_range(0.0f64..1.0);
        let idx = match self
            .cum_weights
            .binary_search_by(|c| c.partial_cmp(&u).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.min(self.atoms.len() - 1),
        };
        let sd = self.t.sqrt();
        self.atoms[idx]
            .iter()
            .map(|a| a + sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Score of the Gaussian mixture with atoms `atoms`, log weights
/// `log_weights` and variance `t`, evaluated at `x`. Shared by
/// [`SmoothedMixture::score`] and the time-indexed oracle score field.
pub fn gaussian_mixture_score(
    atoms: &[Vec<f64>],
    log_weights: &[f64],
    t: f64,
    x: &[f64],
) -> Vec<f64> {
    gaussian_mixture_score_scaled(atoms, log_weights, t, 1.0, x)
}

/// Score of `sum_i w_i N(scale * a_i, var I)` at `x`; the scaled form
/// serves the VP oracle where atoms shrink by alpha(t).
pub fn gaussian_mixture_score_scaled(
    atoms: &[Vec<f64>],
    log_weights: &[f64],
    var: f64,
    scale: f64,
    x: &[f64],
) -> Vec<f64> {
    let dim = x.len();
    let inv2t = 0.5 / var;
    let sq = |a: &Vec<f64>| -> f64 {
        a.iter().zip(x).map(|(ai, xi)| (xi - scale * ai) * (xi - scale * ai)).sum()
    };
    let mut max = f64::NEG_INFINITY;
    let mut terms = Vec::with_capacity(atoms.len());
    for (a, lw) in atoms.iter().zip(log_weights) {
        let v = lw - sq(a) * inv2t;
        if v > max {
            max = v;
        }
        terms.push(v);
    }
    let mut z = 0.0;
    let mut s = vec![0.0; dim];
    for (a, v) in atoms.iter().zip(&terms) {
        let d = v - max;
        if d > -LSE_CUT {
            let r = d.exp();
            z += r;
            for (si, (xi, ai)) in s.iter_mut().zip(x.iter().zip(a)) {
                *si += r * (scale * ai - xi);
            }
        }
    }
    let c = 1.0 / (z * var);
    for si in s.iter_mut() {
        *si *= c;
    }
    s
}

/// A Monte Carlo divergence estimate with its standard error.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DivergenceEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_mc: usize,
}

fn mc_expectation(
    n_mc: usize,
    rng: &mut StdRng,
    sampler: &SmoothedMixture,
    f: impl Fn(&[f64]) -> f64,
) -> DivergenceEstimate {
    let mut st = RunningStats::new();
    for _ in 0..n_mc {
        let x = sampler.sample(rng);
        st.push(f(&x));
    }
    DivergenceEstimate { value: st.mean(), std_error: st.std_error(), n_mc }
}

/// KL(p || q) estimated as the mean of log p(X) - log q(X), X ~ p.
pub fn kl_estimate(
    p: &SmoothedMixture,
    q: &SmoothedMixture,
    n_mc: usize,
    rng: &mut StdRng,
) -> DivergenceEstimate {
    mc_expectation(n_mc, rng, p, |x| p.log_density(x) - q.log_density(x))
}

/// chi-square(p || q) = int (p - q)^2 / q, estimated from samples of q as
/// E_q[(p/q - 1)^2]. Dominates KL(p || q).
pub fn chi2_upper_estimate(
    p: &SmoothedMixture,
    q: &SmoothedMixture,
    n_mc: usize,
    rng: &mut StdRng,
) -> DivergenceEstimate {
    mc_expectation(n_mc, rng, q, |x| {
        let r = (p.log_density(x) - q.log_density(x)).exp();
        (r - 1.0) * (r - 1.0)
    })
}

/// Squared Hellinger distance H^2(p, q) = 2 - 2 E_p[sqrt(q/p)], in [0, 2].
pub fn hellinger_sq_estimate(
    p: &SmoothedMixture,
    q: &SmoothedMixture,
    n_mc: usize,
    rng: &mut StdRng,
) -> DivergenceEstimate {
    mc_expectation(n_mc, rng, p, |x| {
        2.0 - 2.0 * (0.5 * (q.log_density(x) - p.log_density(x))).exp()
    })
}

/// Quadrature net on the manifold with density-proportional weights,
/// convolved at level `t`: a proxy for the smoothed population measure.
///
/// Fails with `ResolutionTooCoarse` when the net spacing exceeds sqrt(t)/10.
pub fn population_smoothed(
    m: &Manifold,
    density: &SurfaceDensity,
    t: f64,
    resolution: usize,
) -> Result<SmoothedMixture, MeasuresError> {
    assert!(t > 0.0 && resolution >= 1);
    let nodes = m.geodesic_net(resolution, 0x6e65745f6e6f64);
    let weights: Vec<f64> = match (m.kind(), density) {
        (_, SurfaceDensity::Uniform) => vec![1.0 / nodes.len() as f64; nodes.len()],
        (ManifoldKind::Circle { .. }, SurfaceDensity::VonMises { kappa, mean_angle }) => {
            let raw: Vec<f64> = nodes
                .iter()
                .map(|p| crate::geometry::von_mises_density(p[1].atan2(p[0]), *kappa, *mean_angle))
                .collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / z).collect()
        }
        (ManifoldKind::SpecialOrthogonal { .. }, SurfaceDensity::ProjectedNormal { .. }) => {
            // No closed-form density: the net is itself an i.i.d. draw from
            // the law, so uniform weights give a Monte Carlo quadrature net.
            let mut rng = StdRng::seed_from_u64(0x706e5f6e6574);
            let draws = m.sample_surface(density, &mut rng, resolution);
            return check_spacing(&draws, t).map(|_| SmoothedMixture::from_points(&draws, t));
        }
        (kind, dens) => panic!("no quadrature net for {dens:?} on {kind:?}"),
    };
    check_spacing(&nodes, t)?;
    Ok(SmoothedMixture::new(nodes, weights, t))
}

/// Covering-radius estimate (max nearest-neighbor distance) vs sqrt(t)/10.
fn check_spacing(nodes: &[Vec<f64>], t: f64) -> Result<(), MeasuresError> {
    if nodes.len() < 2 {
        return Ok(());
    }
    let required = t.sqrt() / 10.0;
    let step = (nodes.len() / 256).max(1);
    let mut worst = 0.0f64;
    for i in (0..nodes.len()).step_by(step) {
        let mut nn = f64::INFINITY;
        for (j, other) in nodes.iter().enumerate() {
            if i != j {
                nn = nn.min(vm::dist_sq(&nodes[i], other));
            }
        }
        worst = worst.max(nn.sqrt());
    }
    if worst > required {
        Err(MeasuresError::ResolutionTooCoarse { spacing: worst, required })
    } else {
        Ok(())
    }
}

/// One row of the smoothing-rate table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RateRow {
    pub n: usize,
    pub seed: u64,
    pub kl: f64,
    pub se: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RateExperiment {
    pub rows: Vec<RateRow>,
    pub medians: Vec<(usize, f64)>,
    pub slope: f64,
    pub slope_ci_half_width: f64,
}

/// KL between the smoothed population proxy and smoothed empirical measures
/// over a grid of sample sizes; the fitted log-log slope tracks the 1/N
/// smoothing rate. Medians over seeds are used because small-N KL estimates
/// have a heavy right tail.
pub fn smoothing_rate_experiment(
    m: &Manifold,
    density: &SurfaceDensity,
    t0: f64,
    n_grid: &[usize],
    seeds: &[u64],
    n_mc: usize,
    resolution: usize,
) -> Result<RateExperiment, MeasuresError> {
    let pop = population_smoothed(m, density, t0, resolution)?;
    let mut rows = Vec::with_capacity(n_grid.len() * seeds.len());
    for &n in n_grid {
        for &seed in seeds {
            let mut data_rng =
                StdRng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let pts = m.sample_surface(density, &mut data_rng, n);
            let emp = SmoothedMixture::from_points(&pts, t0);
            let mut mc_rng = StdRng::seed_from_u64(seed.wrapping_add(0xabcdef) ^ (n as u64));
            let est = kl_estimate(&pop, &emp, n_mc, &mut mc_rng);
            rows.push(RateRow { n, seed, kl: est.value, se: est.std_error });
        }
    }
    let mut medians = Vec::new();
    for &n in n_grid {
        let kls: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.kl).collect();
        medians.push((n, median(&kls)));
    }
    let xs: Vec<f64> = medians.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = medians.iter().map(|(_, k)| k.max(1e-300).ln()).collect();
    let (slope, intercept) = linear_fit(&xs, &ys);
    // Residual-based standard error of the slope, doubled for a rough CI.
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let dof = (xs.len() as f64 - 2.0).max(1.0);
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (slope * x + intercept)).powi(2))
        .sum();
    let slope_se = if sxx > 0.0 { (sse / dof / sxx).sqrt() } else { 0.0 };
    Ok(RateExperiment { rows, medians, slope, slope_ci_half_width: 2.0 * slope_se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    fn single_atom(x: Vec<f64>, t: f64) -> SmoothedMixture {
        SmoothedMixture::new(vec![x], vec![1.0], t)
    }

    #[test]
    fn gaussian_peak_density() {
        let p = single_atom(vec![0.0], 1.0);
        let want = 1.0 / (TAU).sqrt();
        assert!((p.density(&[0.0]) - want).abs() < 1e-12);
    }

    #[test]
    fn two_atom_density_hand_value() {
        let p = SmoothedMixture::new(vec![vec![-1.0], vec![1.0]], vec![0.5, 0.5], 1.0);
        // 0.5 * 2 * N(0; 1, 1) = phi(1) = 0.2419707...
        let want = (-0.5_f64).exp() / TAU.sqrt();
        assert!((p.density(&[0.0]) - want).abs() < 1e-10);
        assert!((p.density(&[0.3]) - p.density(&[-0.3])).abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one_on_grid() {
        // 2D midpoint grid over a box that captures the mass.
        let p = SmoothedMixture::new(
            vec![vec![0.3, -0.2], vec![-0.5, 0.4], vec![0.0, 0.0]],
            vec![0.25, 0.35, 0.4],
            0.15,
        );
        let lo = -4.0;
        let hi = 4.0;
        let n = 220;
        let h = (hi - lo) / n as f64;
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                mass += p.density(&x) * h * h;
            }
        }
        assert!((mass - 1.0).abs() < 0.01, "grid mass {mass}");
    }

    #[test]
    fn score_single_atom_and_symmetry() {
        let t = 0.7;
        let p = single_atom(vec![0.5, -0.25], t);
        let x = [1.5, 0.75];
        let s = p.score(&x);
        assert!((s[0] - (0.5 - 1.5) / t).abs() < 1e-12);
        assert!((s[1] - (-0.25 - 0.75) / t).abs() < 1e-12);

        let q = SmoothedMixture::new(vec![vec![-1.0], vec![1.0]], vec![0.5, 0.5], 1.0);
        assert!(q.score(&[0.0])[0].abs() < 1e-14);
    }

    #[test]
    fn score_matches_finite_difference_gradient() {
        let mut r = rng(42);
        let atoms: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let w = vec![0.1, 0.2, 0.3, 0.25, 0.15];
        let p = SmoothedMixture::new(atoms, w, 0.3);
        let h = 1e-6;
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| 1.5 * r.sample::<f64, _>(StandardNormal)).collect();
            let s = p.score(&x);
            for d in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[d] += h;
                xm[d] -= h;
                let fd = (p.log_density(&xp) - p.log_density(&xm)) / (2.0 * h);
                let denom = s[d].abs().max(fd.abs()).max(1e-8);
                assert!(
                    (s[d] - fd).abs() / denom < 1e-5,
                    "score {} vs fd {}",
                    s[d],
                    fd
                );
            }
        }
    }

    #[test]
    fn kl_zero_for_identical() {
        let p = SmoothedMixture::new(vec![vec![0.0], vec![2.0]], vec![0.5, 0.5], 0.5);
        let est = kl_estimate(&p, &p, 2000, &mut rng(3));
        assert!(est.value.abs() < 1e-12);
    }

    #[test]
    fn kl_gaussian_shift_closed_form() {
        let t = 0.8;
        let mu = 0.6;
        let p = single_atom(vec![0.0], t);
        let q = single_atom(vec![mu], t);
        let est = kl_estimate(&p, &q, 40000, &mut rng(4));
        let want = mu * mu / (2.0 * t);
        assert!(
            (est.value - want).abs() <= 3.0 * est.std_error,
            "kl {} want {} se {}",
            est.value,
            want,
            est.std_error
        );
    }

    #[test]
    fn chi2_gaussian_shift_closed_form() {
        let t = 1.0;
        let mu = 0.1;
        let p = single_atom(vec![0.0], t);
        let q = single_atom(vec![mu], t);
        let est = chi2_upper_estimate(&p, &q, 60000, &mut rng(5));
        let want = (mu * mu / t).exp() - 1.0;
        assert!(
            (est.value - want).abs() <= 3.0 * est.std_error.max(1e-6),
            "chi2 {} want {}",
            est.value,
            want
        );
    }

    #[test]
    fn hellinger_range_and_disjoint_limit() {
        let p = single_atom(vec![0.0], 1e-4);
        let q = single_atom(vec![10.0], 1e-4);
        let est = hellinger_sq_estimate(&p, &q, 2000, &mut rng(6));
        assert!((est.value - 2.0).abs() < 1e-6);
        let same = hellinger_sq_estimate(&p, &p, 2000, &mut rng(7));
        assert!(same.value.abs() < 1e-12);
    }

    #[test]
    fn population_net_uniform_circle() {
        let m = Manifold::circle(1.0, 3);
        let p = population_smoothed(&m, &SurfaceDensity::Uniform, 0.5, 512).unwrap();
        assert_eq!(p.atoms().len(), 512);
        assert!(p.weights().iter().all(|w| (w - 1.0 / 512.0).abs() < 1e-15));
        // density at a far point vs direct 1D quadrature of the circle
        // convolution integral
        let x = [1.7, 0.4, -0.3];
        let t = 0.5;
        let n = 20000;
        let mut total = 0.0;
        for i in 0..n {
            let th = TAU * i as f64 / n as f64;
            let y = [th.cos(), th.sin(), 0.0];
            total += (-vm::dist_sq(&x, &y) / (2.0 * t)).exp();
        }
        let want = total / n as f64 * (TAU * t).powf(-1.5);
        let got = p.density(&x);
        assert!((got - want).abs() / want < 0.005, "got {got} want {want}");
    }

    #[test]
    fn von_mises_net_weights_proportional_to_density() {
        let m = Manifold::circle(1.0, 2);
        let d = SurfaceDensity::VonMises { kappa: 2.0, mean_angle: 0.5 };
        let p = population_smoothed(&m, &d, 0.5, 256).unwrap();
        let sum: f64 = p.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // weight at the mean angle exceeds the antipodal weight by e^{2 kappa}
        let at = |th: f64| {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (i, a) in p.atoms().iter().enumerate() {
                let d = (a[1].atan2(a[0]) - th).abs();
                if d < bd {
                    bd = d;
                    best = i;
                }
            }
            p.weights()[best]
        };
        let ratio = at(0.5) / at(0.5 + std::f64::consts::PI);
        assert!((ratio.ln() - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn resolution_check_fires() {
        let m = Manifold::circle(1.0, 2);
        let err = population_smoothed(&m, &SurfaceDensity::Uniform, 1e-6, 64);
        assert!(matches!(err, Err(MeasuresError::ResolutionTooCoarse { .. })));
    }

    #[test]
    fn single_point_rate_degenerate_case() {
        let m = Manifold::circle(1.0, 2);
        let mut r = rng(8);
        let pts = m.sample_surface(&SurfaceDensity::Uniform, &mut r, 1);
        let emp = SmoothedMixture::from_points(&pts, 0.5);
        let est = kl_estimate(&emp, &emp, 500, &mut rng(9));
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn rate_experiment_smoke_and_monotone_in_t() {
        let m = Manifold::circle(1.0, 3);
        let d = SurfaceDensity::Uniform;
        let exp1 =
            smoothing_rate_experiment(&m, &d, 0.5, &[32, 128], &[1, 2, 3], 4000, 256).unwrap();
        assert!(exp1.slope < 0.0, "slope {}", exp1.slope);
        // doubling t shrinks the median KL at fixed N
        let exp2 =
            smoothing_rate_experiment(&m, &d, 1.0, &[32, 128], &[1, 2, 3], 4000, 256).unwrap();
        assert!(exp2.medians[0].1 < exp1.medians[0].1);
    }
}
