//! Evaluation metrics: Hausdorff distance, denoiser/projection error,
//! tangential drift, thickened-ball coverage with its analytic lower bound,
//! and the nearest-neighbor memorization fraction.

use rand::rngs::StdRng;

use crate::geometry::{vm_gamma_half, GeomError, Manifold, SurfaceDensity};
use crate::sampler::{pf_ode_run, OdeMethod, SamplerError};
use crate::score::{denoiser, ScoreField};
use crate::vecmath::{self as vm, median};

#[derive(Debug, Clone, PartialEq)]
pub enum DiagnosticsError {
    EmptyCloud,
    TrainTooSmall,
    BallTooLarge,
}

impl std::fmt::Display for DiagnosticsError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DiagnosticsError::EmptyCloud => write!(f, "point cloud is empty"),
            DiagnosticsError::TrainTooSmall => write!(f, "training set needs at least 2 points"),
            DiagnosticsError::BallTooLarge => write!(f, "delta exceeds half the injectivity radius"),
        }
    }
}

impl std::error::Error for DiagnosticsError {}

/// Directed Hausdorff distance sup_{a in A} dist(a, B).
pub fn directed_hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    if a.is_empty() || b.is_empty() {
        return Err(DiagnosticsError::EmptyCloud);
    }
    let mut worst = 0.0f64;
    for p in a {
        let mut nn = f64::INFINITY;
        for q in b {
            let d = vm::dist_sq(p, q);
            if d < nn {
                nn = d;
            }
        }
        worst = worst.max(nn);
    }
    Ok(worst.sqrt())
}

/// Symmetric Hausdorff distance (exact double loop).
pub fn hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ProjectionErrorReport {
    pub max: f64,
    pub median: f64,
    pub q90: f64,
    pub n_probe: usize,
    pub t: f64,
}

/// Sup and quantiles over tube probes of |denoiser(x, t) - proj(x)|.
pub fn projection_error(
    field: &ScoreField,
    m: &Manifold,
    t: f64,
    n_probe: usize,
    tube_radius: f64,
    rng: &mut StdRng,
) -> ProjectionErrorReport {
    let mut vals = Vec::with_capacity(n_probe);
    while vals.len() < n_probe {
        let x = m.sample_tube_point(tube_radius, rng);
        let y = match m.project(&x) {
            Ok(y) => y,
            Err(_) => continue,
        };
        let d = denoiser(field, &x, t);
        vals.push(vm::dist(&d, &y));
    }
    let mut sorted = vals.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    ProjectionErrorReport {
        max: *sorted.last().expect("nonempty"),
        median: median(&sorted),
        q90: sorted[(0.9 * (sorted.len() - 1) as f64).round() as usize],
        n_probe,
        t,
    }
}

/// Geodesic displacement of the projection under the terminal flow map:
/// d_M(proj(x), proj(Phi(x))).
pub fn tangential_drift(
    m: &Manifold,
    field: &ScoreField,
    t0: f64,
    tau: f64,
    n_ode_steps: usize,
    method: OdeMethod,
    x: &[f64],
) -> Result<f64, DriftError> {
    let y0 = m.project(x).map_err(DriftError::Geom)?;
    let z = pf_ode_run(field, x, t0, tau, n_ode_steps, method).map_err(DriftError::Sampler)?;
    let y1 = m.project(&z).map_err(DriftError::Geom)?;
    m.geodesic_distance(&y0, &y1).map_err(DriftError::Geom)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriftError {
    Geom(GeomError),
    Sampler(SamplerError),
}

impl std::fmt::Display for DriftError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DriftError::Geom(e) => write!(f, "{e}"),
            DriftError::Sampler(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DriftError {}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CenterMass {
    pub mass_mu: f64,
    pub mass_data: f64,
}

/// Thickened-ball coverage of a sample cloud against the data measure.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CoverageReport {
    pub delta: f64,
    pub alpha: f64,
    pub n_centers: usize,
    pub per_center: Vec<CenterMass>,
    /// min over centers (with mass_data above the floor) of mass_mu / mass_data.
    pub c_hat: f64,
    pub c_min_analytic: f64,
}

const MASS_DATA_FLOOR: f64 = 1e-6;

/// Coverage report: centers form a deterministic geodesic net; a sample x
/// belongs to the ball at y iff dist(x, M) <= alpha and
/// d_M(proj(x), y) <= delta. `mass_data` is the analytic ball-volume ratio
/// for the uniform density and Monte Carlo otherwise.
pub fn coverage_report(
    samples: &[Vec<f64>],
    m: &Manifold,
    density: &SurfaceDensity,
    delta: f64,
    alpha: f64,
    n_centers: usize,
    rng: &mut StdRng,
) -> Result<CoverageReport, DiagnosticsError> {
    if delta > m.injectivity_radius() / 2.0 {
        return Err(DiagnosticsError::BallTooLarge);
    }
    let centers = m.geodesic_net(n_centers, 0xc0ffee);
    // classify samples once: projection + manifold distance
    let mut proj_ok: Vec<Option<Vec<f64>>> = Vec::with_capacity(samples.len());
    for x in samples {
        if m.dist_to_manifold(x) <= alpha {
            proj_ok.push(m.project(x).ok());
        } else {
            proj_ok.push(None);
        }
    }
    let mass_data_uniform = match density {
        SurfaceDensity::Uniform => {
            Some(m.geodesic_ball_volume(delta).map_err(|_| DiagnosticsError::BallTooLarge)?
                / m.surface_volume())
        }
        _ => None,
    };
    // MC draws for non-uniform data mass
    let mc_draws = if mass_data_uniform.is_none() {
        m.sample_surface(density, rng, 20_000)
    } else {
        Vec::new()
    };
    let mut per_center = Vec::with_capacity(centers.len());
    let mut c_hat = f64::INFINITY;
    for y in &centers {
        let mut count = 0usize;
        for p in proj_ok.iter().flatten() {
            if m.geodesic_distance(p, y).unwrap_or(f64::INFINITY) <= delta {
                count += 1;
            }
        }
        let mass_mu = count as f64 / samples.len().max(1) as f64;
        let mass_data = match mass_data_uniform {
            Some(v) => v,
            None => {
                let hits = mc_draws
                    .iter()
                    .filter(|p| m.geodesic_distance(p, y).unwrap_or(f64::INFINITY) <= delta)
                    .count();
                hits as f64 / mc_draws.len() as f64
            }
        };
        if mass_data >= MASS_DATA_FLOOR {
            c_hat = c_hat.min(mass_mu / mass_data);
        }
        per_center.push(CenterMass { mass_mu, mass_data });
    }
    if !c_hat.is_finite() {
        c_hat = 0.0;
    }
    Ok(CoverageReport {
        delta,
        alpha,
        n_centers: centers.len(),
        per_center,
        c_hat,
        c_min_analytic: f64::NAN,
    })
}

/// Explicit lower bound for the Gaussian ball probability
/// P(|G_m| <= tau), G_m ~ N(0, t0 I_m): density lower bound on the ball
/// times the ball volume.
pub fn gaussian_ball_lower_bound(m: usize, t0: f64, tau: f64) -> f64 {
    assert!(m >= 1 && t0 > 0.0 && tau > 0.0);
    let omega_m = std::f64::consts::PI.powf(m as f64 / 2.0) / vm_gamma_half(m as u32 + 2);
    (std::f64::consts::TAU * t0).powf(-(m as f64) / 2.0)
        * (-tau * tau / (2.0 * t0)).exp()
        * omega_m
        * tau.powi(m as i32)
}

/// The analytic coverage constant: density ratio, ball-volume comparability,
/// the 1/(2^k 3^k) scale factor, and the two explicit Gaussian factors.
#[allow(clippy::too_many_arguments)]
pub fn cmin_lower_bound(
    p_min: f64,
    p_max: f64,
    k: usize,
    ambient_dim: usize,
    t0: f64,
    rho: f64,
    c_vol: f64,
    big_c_vol: f64,
    a: f64,
) -> f64 {
    assert!(p_min > 0.0 && p_max >= p_min);
    assert!(c_vol > 0.0 && big_c_vol >= c_vol);
    assert!(ambient_dim > k);
    (p_min / p_max)
        * (c_vol / big_c_vol)
        * (1.0 / (2f64.powi(k as i32) * 3f64.powi(k as i32)))
        * gaussian_ball_lower_bound(k, t0, a)
        * gaussian_ball_lower_bound(ambient_dim - k, t0, rho / 2.0)
}

/// The tangential half-width `a` entering the coverage constant:
/// min(rho/2, (delta_tilde/2) / (2 L_rho)) with the projection Lipschitz
/// constant L_rho = zeta / (zeta - rho).
pub fn coverage_a_parameter(delta_tilde: f64, rho: f64, zeta_min: f64) -> f64 {
    assert!(rho < zeta_min);
    let l_rho = zeta_min / (zeta_min - rho);
    (rho / 2.0).min(0.5 * delta_tilde / (2.0 * l_rho))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MemorizationReport {
    pub fraction_memorized: f64,
    pub ratios: Vec<f64>,
    pub threshold: f64,
}

/// Nearest/second-nearest squared-distance ratio per generated sample
/// against the (deduplicated) training set; ratios below 0.5 count as
/// memorized.
pub fn memorization_fraction(
    generated: &[Vec<f64>],
    train: &[Vec<f64>],
) -> Result<MemorizationReport, DiagnosticsError> {
    // dedup exact duplicates first so the second-nearest distance is sound
    let mut uniq: Vec<&Vec<f64>> = Vec::with_capacity(train.len());
    for p in train {
        if uniq.iter().all(|q| vm::dist_sq(q, p) > 1e-24) {
            uniq.push(p);
        }
    }
    if uniq.len() < 2 {
        return Err(DiagnosticsError::TrainTooSmall);
    }
    if generated.is_empty() {
        return Err(DiagnosticsError::EmptyCloud);
    }
    let mut ratios = Vec::with_capacity(generated.len());
    for g in generated {
        let mut d1 = f64::INFINITY;
        let mut d2 = f64::INFINITY;
        for t in &uniq {
            let d = vm::dist_sq(g, t);
            if d < d1 {
                d2 = d1;
                d1 = d;
            } else if d < d2 {
                d2 = d;
            }
        }
        ratios.push(if d2 > 0.0 { d1 / d2 } else { 1.0 });
    }
    let memorized = ratios.iter().filter(|r| **r < 0.5).count();
    Ok(MemorizationReport {
        fraction_memorized: memorized as f64 / ratios.len() as f64,
        ratios,
        threshold: 0.5,
    })
}

/// Total variation between two 1-D sample sets on a shared equal-width
/// binning of their joint range.
pub fn histogram_tv(a: &[f64], b: &[f64], bins: usize) -> f64 {
    assert!(!a.is_empty() && !b.is_empty() && bins >= 1);
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    let w = (hi - lo).max(1e-300);
    let mut ca = vec![0.0; bins];
    let mut cb = vec![0.0; bins];
    for &x in a {
        let i = (((x - lo) / w) * bins as f64).min(bins as f64 - 1.0) as usize;
        ca[i] += 1.0 / a.len() as f64;
    }
    for &x in b {
        let i = (((x - lo) / w) * bins as f64).min(bins as f64 - 1.0) as usize;
        cb[i] += 1.0 / b.len() as f64;
    }
    0.5 * ca.iter().zip(&cb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Empirical covering radius of a point set on a manifold: the max over a
/// fine reference net of the distance to the nearest set point (ambient
/// metric, adequate at desk scales).
pub fn empirical_covering_radius(m: &Manifold, points: &[Vec<f64>]) -> f64 {
    let refnet = m.geodesic_net(4096, 0x636f766572);
    directed_hausdorff(&refnet, points).expect("nonempty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    #[test]
    fn hausdorff_basics() {
        let a = vec![vec![0.0]];
        let b = vec![vec![1.0]];
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &b).unwrap(), 1.0);
        assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff(&b, &a).unwrap());
        assert!(hausdorff(&[], &b).is_err());
    }

    #[test]
    fn hausdorff_net_against_dense_circle() {
        let m = Manifold::circle(1.0, 2);
        let coarse = m.geodesic_net(64, 0);
        let dense = m.geodesic_net(8192, 0);
        let d = hausdorff(&coarse, &dense).unwrap();
        let spacing = std::f64::consts::TAU / 64.0;
        assert!(d <= spacing / 2.0 + 1e-3, "hausdorff {d} vs half spacing");
    }

    #[test]
    fn projection_error_of_exact_field_is_tiny() {
        let m = Manifold::circle(1.0, 3);
        let f = ScoreField::exact_projection(m.clone());
        let rep = projection_error(&f, &m, 0.05, 500, 0.25, &mut rng(1));
        assert!(rep.max <= 1e-9, "max {}", rep.max);
    }

    #[test]
    fn drift_of_exact_field_is_integrator_level() {
        let m = Manifold::circle(1.0, 2);
        let f = ScoreField::exact_projection(m.clone());
        let mut r = rng(2);
        for _ in 0..20 {
            let x = m.sample_tube_point(0.25, &mut r);
            let d = tangential_drift(&m, &f, 0.25, 1e-3, 256, OdeMethod::Heun, &x).unwrap();
            assert!(d <= 1e-9, "drift {d}");
        }
    }

    #[test]
    fn coverage_of_dense_uniform_cloud_is_near_one() {
        let m = Manifold::circle(1.0, 2);
        let mut r = rng(3);
        let samples = m.sample_surface(&SurfaceDensity::Uniform, &mut r, 20_000);
        let rep = coverage_report(
            &samples,
            &m,
            &SurfaceDensity::Uniform,
            0.1,
            0.05,
            64,
            &mut r,
        )
        .unwrap();
        assert!((rep.c_hat - 1.0).abs() < 0.2, "c_hat {}", rep.c_hat);
    }

    #[test]
    fn sparse_empirical_cloud_misses_fine_balls() {
        let m = Manifold::circle(1.0, 2);
        let mut r = rng(4);
        let atoms = m.sample_surface(&SurfaceDensity::Uniform, &mut r, 200);
        let cover_radius = empirical_covering_radius(&m, &atoms);
        let delta = 0.25 * cover_radius;
        let n_centers = (2.0 * m.surface_volume() / delta).ceil() as usize;
        let rep = coverage_report(
            &atoms,
            &m,
            &SurfaceDensity::Uniform,
            delta,
            0.01,
            n_centers,
            &mut r,
        )
        .unwrap();
        assert_eq!(rep.c_hat, 0.0, "a quarter of the covering radius must miss");
    }

    #[test]
    fn gaussian_ball_bound_values() {
        // m = 1, t0 = 1, tau = 1: 2 (2 pi)^{-1/2} e^{-1/2} = 0.48394...
        let b = gaussian_ball_lower_bound(1, 1.0, 1.0);
        let want = 2.0 / (std::f64::consts::TAU).sqrt() * (-0.5f64).exp();
        assert!((b - want).abs() < 1e-12);
        // and it sits below the exact probability P(|G| <= 1) ~ 0.6827
        assert!(b < 0.6827);
    }

    #[test]
    fn cmin_formula_structure() {
        // k = 1, equal densities and volumes: (1/6) * gaussian factors
        let g1 = gaussian_ball_lower_bound(1, 0.25, 0.001);
        let g2 = gaussian_ball_lower_bound(1, 0.25, 0.25);
        let c = cmin_lower_bound(1.0, 1.0, 1, 2, 0.25, 0.5, 1.0, 1.0, 0.001);
        assert!((c - g1 * g2 / 6.0).abs() < 1e-15);
        // monotone increasing in p_min / p_max
        let lo = cmin_lower_bound(0.5, 1.0, 1, 2, 0.25, 0.5, 1.0, 1.0, 0.001);
        assert!(lo < c);
    }

    #[test]
    fn memorization_basics() {
        let train = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        // exact copies: ratio 0, fraction 1
        let rep = memorization_fraction(&train, &train).unwrap();
        assert_eq!(rep.fraction_memorized, 1.0);
        // far novel point: not memorized
        let rep = memorization_fraction(&[vec![5.0, 5.0]], &train).unwrap();
        assert_eq!(rep.fraction_memorized, 0.0);
        // duplicates are removed before the second-nearest computation
        let dup = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]];
        let rep = memorization_fraction(&[vec![0.0, 0.0]], &dup).unwrap();
        assert_eq!(rep.ratios[0], 0.0);
        assert!(matches!(
            memorization_fraction(&[vec![0.0]], &[vec![0.0]]),
            Err(DiagnosticsError::TrainTooSmall)
        ));
    }

    #[test]
    fn memorization_two_antipodal_atoms_matches_arc_integral() {
        // Uniform samples on the circle vs two antipodal training atoms:
        // ratio < 1/2 iff tan^2(theta/2) < 1/2 with theta the angle to the
        // nearer atom; the arc fraction is 2 atan(1/sqrt 2) / pi.
        let m = Manifold::circle(1.0, 2);
        let mut r = rng(5);
        let gen = m.sample_surface(&SurfaceDensity::Uniform, &mut r, 40_000);
        let train = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let rep = memorization_fraction(&gen, &train).unwrap();
        // quadrature oracle over the angle
        let n = 200_000;
        let mut hits = 0usize;
        for i in 0..n {
            let th = std::f64::consts::TAU * (i as f64 + 0.5) / n as f64;
            let d1 = 2.0 * (1.0 - th.cos());
            let d2 = 2.0 * (1.0 + th.cos());
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            if lo / hi < 0.5 {
                hits += 1;
            }
        }
        let oracle = hits as f64 / n as f64;
        assert!(
            (rep.fraction_memorized - oracle).abs() < 0.02,
            "fraction {} oracle {}",
            rep.fraction_memorized,
            oracle
        );
    }

    #[test]
    fn tv_of_identical_samples_is_zero() {
        let a = vec![0.0, 0.5, 1.0, 0.25];
        assert_eq!(histogram_tv(&a, &a, 10), 0.0);
        let b = vec![10.0, 10.5, 11.0, 10.25];
        assert!(histogram_tv(&a, &b, 10) > 0.9);
    }
}
