//! Time-indexed score fields and the denoising-score-matching machinery.
//!
//! A [`ScoreField`] unifies the four kinds of score used across the lab:
//!
//! - `Oracle` — the exact score of an atom set convolved with `N(0, t I)`;
//! - `Projection` — `-(x - proj(x))/t` from an exact manifold projection or
//!   `-grad eta(x)/t` from a distance potential, zero outside its domain;
//! - `Learned` — a trained network with its noise schedule;
//! - `Perturbed` — a base field plus `e(x)/t` with a sup-norm bound on `e`.
//!
//! All pairwise comparisons (excess risk, minimality) run on shared noise:
//! the DSM batch is drawn once and every field is evaluated on the same
//! pairs, which turns differences of large noisy quantities into small
//! concentrated ones.

use std::sync::Arc;

use rand::rngs::StdRng;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::Manifold;
use crate::measures::gaussian_mixture_score;
use crate::nn::ScoreNet;
use crate::potential::PotentialFn;
use crate::sampler::NoiseSchedule;
use crate::vecmath::{self as vm, RunningStats};

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreError {
    /// Alignment is undefined when either vector is (near) zero.
    DegenerateVector,
    /// No data point inside the localization ball.
    EmptyNeighborhood,
}

impl std::fmt::Display for ScoreError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreError::DegenerateVector => write!(f, "vector norm below 1e-12"),
            ScoreError::EmptyNeighborhood => write!(f, "no datum inside the localization ball"),
        }
    }
}

impl std::error::Error for ScoreError {}

/// Union of balls around anchor points: the support domain of a
/// projection-class field.
#[derive(Debug, Clone)]
pub struct DomainU {
    pub anchors: Vec<Vec<f64>>,
    pub radius: f64,
}

impl DomainU {
    pub fn new(anchors: Vec<Vec<f64>>, radius: f64) -> Self {
        assert!(!anchors.is_empty() && radius > 0.0);
        Self { anchors, radius }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let r2 = self.radius * self.radius;
        self.anchors.iter().any(|a| vm::dist_sq(x, a) <= r2)
    }

    /// Uniform samples of the domain boundary with their outward normals
    /// (sphere points of the covering balls filtered to the boundary).
    pub fn sample_boundary(&self, n: usize, rng: &mut StdRng) -> Vec<(Vec<f64>, Vec<f64>)> {
        let dim = self.anchors[0].len();
        let mut out = Vec::with_capacity(n);
        let mut guard = 0usize;
        while out.len() < n && guard < 200 * n {
            guard += 1;
            let a = &self.anchors[rng.random_range(0..self.anchors.len())];
            let mut u: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            vm::normalize(&mut u, 1e-300);
            let mut x = a.clone();
            vm::axpy(&mut x, self.radius, &u);
            let inside_other = self
                .anchors
                .iter()
                .any(|b| !std::ptr::eq(a, b) && vm::dist(&x, b) < self.radius - 1e-12);
            if !inside_other {
                out.push((x, u));
            }
        }
        out
    }
}

/// How a projection-class field obtains its potential gradient.
#[derive(Clone)]
pub enum ProjectionSource {
    /// Exact nearest-point projection of a synthetic manifold.
    Exact(Manifold),
    /// A distance potential (network or analytic).
    Potential(Arc<dyn PotentialFn + Send + Sync>),
}

impl std::fmt::Debug for ProjectionSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProjectionSource::Exact(m) => write!(f, "Exact({:?})", m.kind()),
            ProjectionSource::Potential(_) => write!(f, "Potential(..)"),
        }
    }
}

/// The perturbation profile: a bounded field `e(x)` entering the score as
/// `e(x)/t`.
#[derive(Debug, Clone)]
pub enum ErrorKind {
    /// `e = eps * u` for a fixed unit direction `u`.
    ConstantDirection,
    /// `e = eps * tau(proj(x))`, the unit tangent field at the projection
    /// (smooth on the circle).
    Tangential,
    /// A smooth random section of the normal bundle evaluated at proj(x):
    /// the perturbed field stays projection-like, so its zero set is a graph
    /// over the base manifold.
    RandomSmooth,
}

#[derive(Debug, Clone)]
pub struct ErrorField {
    pub kind: ErrorKind,
    pub epsilon: f64,
    manifold: Option<Manifold>,
    direction: Vec<f64>,
    /// Random trig-polynomial coefficients per normal-frame vector:
    /// (amplitude, wavevector, phase) triples.
    waves: Vec<Vec<(f64, Vec<f64>, f64)>>,
    norm_scale: f64,
}

impl ErrorField {
    /// Evaluates e(x); requires x in the projection tube for the
    /// manifold-based kinds.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            ErrorKind::ConstantDirection => vm::scale(&self.direction, self.epsilon),
            ErrorKind::Tangential => {
                let m = self.manifold.as_ref().expect("tangential error needs a manifold");
                match m.project(x) {
                    Ok(y) => {
                        let tb = m.tangent_basis(&y).expect("projection is on-manifold");
                        vm::scale(&tb[0], self.epsilon)
                    }
                    Err(_) => vec![0.0; x.len()],
                }
            }
            ErrorKind::RandomSmooth => {
                let m = self.manifold.as_ref().expect("random-smooth error needs a manifold");
                match m.project(x) {
                    Ok(y) => {
                        let frame = m.normal_frame(&y).expect("projection is on-manifold");
                        let mut e = vec![0.0; x.len()];
                        for (waves, n) in self.waves.iter().zip(&frame) {
                            let g = eval_waves(waves, &y);
                            vm::axpy(&mut e, g * self.norm_scale, n);
                        }
                        e
                    }
                    Err(_) => vec![0.0; x.len()],
                }
            }
        }
    }
}

fn eval_waves(waves: &[(f64, Vec<f64>, f64)], y: &[f64]) -> f64 {
    waves
        .iter()
        .map(|(a, k, phi)| a * (vm::dot(k, y) + phi).sin())
        .sum()
}

#[derive(Debug, Clone)]
pub enum ScoreField {
    /// Exact score of `sum_i w_i N(a_i, t I)` as a function of t.
    Oracle { atoms: Vec<Vec<f64>>, log_weights: Vec<f64> },
    /// Exact VP-marginal score: `sum_i w_i N(alpha(t) a_i, sigma^2(t) I)`.
    OracleVp { atoms: Vec<Vec<f64>>, log_weights: Vec<f64>, schedule: NoiseSchedule },
    /// `-(x - proj(x))/t` or `-grad eta(x)/t` on its domain, zero outside.
    Projection { source: ProjectionSource, domain: Option<DomainU> },
    /// A trained score network with its noise schedule.
    Learned { net: Arc<ScoreNet>, schedule: NoiseSchedule },
    /// Base field plus `e(x)/t`, with `sup |e| = epsilon`.
    Perturbed { base: Box<ScoreField>, error: ErrorField },
}

impl ScoreField {
    pub fn oracle_mixture(atoms: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> Self {
        let n = atoms.len();
        assert!(n > 0);
        let w = weights.unwrap_or_else(|| vec![1.0 / n as f64; n]);
        assert_eq!(w.len(), n);
        let log_weights = w.iter().map(|v| v.ln()).collect();
        ScoreField::Oracle { atoms, log_weights }
    }

    pub fn oracle_mixture_vp(
        atoms: Vec<Vec<f64>>,
        weights: Option<Vec<f64>>,
        schedule: NoiseSchedule,
    ) -> Self {
        let n = atoms.len();
        assert!(n > 0);
        let w = weights.unwrap_or_else(|| vec![1.0 / n as f64; n]);
        let log_weights = w.iter().map(|v| v.ln()).collect();
        ScoreField::OracleVp { atoms, log_weights, schedule }
    }

    pub fn exact_projection(m: Manifold) -> Self {
        ScoreField::Projection { source: ProjectionSource::Exact(m), domain: None }
    }

    pub fn potential_projection(
        eta: Arc<dyn PotentialFn + Send + Sync>,
        domain: Option<DomainU>,
    ) -> Self {
        ScoreField::Projection { source: ProjectionSource::Potential(eta), domain }
    }

    pub fn learned(net: Arc<ScoreNet>, schedule: NoiseSchedule) -> Self {
        ScoreField::Learned { net, schedule }
    }

    /// s(x, t).
    pub fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        assert!(t > 0.0, "score fields are defined for t > 0");
        match self {
            ScoreField::Oracle { atoms, log_weights } => {
                gaussian_mixture_score(atoms, log_weights, t, x)
            }
            ScoreField::OracleVp { atoms, log_weights, schedule } => {
                crate::measures::gaussian_mixture_score_scaled(
                    atoms,
                    log_weights,
                    schedule.sigma(t).powi(2),
                    schedule.alpha(t),
                    x,
                )
            }
            ScoreField::Projection { source, domain } => {
                if let Some(dom) = domain {
                    if !dom.contains(x) {
                        return vec![0.0; x.len()];
                    }
                }
                match source {
                    ProjectionSource::Exact(m) => match m.project(x) {
                        Ok(y) => {
                            let mut s = vm::sub(&y, x);
                            for v in s.iter_mut() {
                                *v /= t;
                            }
                            s
                        }
                        Err(_) => vec![0.0; x.len()],
                    },
                    ProjectionSource::Potential(eta) => {
                        let g = eta.grad(x);
                        g.iter().map(|v| -v / t).collect()
                    }
                }
            }
            ScoreField::Learned { net, schedule } => net.score_one(x, t, schedule),
            ScoreField::Perturbed { base, error } => {
                let mut s = base.eval(x, t);
                let e = error.eval(x);
                vm::axpy(&mut s, 1.0 / t, &e);
                s
            }
        }
    }
}

/// `-(x - x0)/t`, the conditional score of `N(x0, t I)`.
pub fn conditional_score(x: &[f64], x0: &[f64], t: f64) -> Vec<f64> {
    assert!(t > 0.0);
    x.iter().zip(x0).map(|(xi, ai)| -(xi - ai) / t).collect()
}

/// Weighted discrete dataset.
#[derive(Debug, Clone)]
pub struct WeightedPoints {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    cum: Vec<f64>,
}

impl WeightedPoints {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Self {
        assert_eq!(points.len(), weights.len());
        assert!(!points.is_empty());
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0);
        let mut cum = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        for w in &weights {
            acc += w;
            cum.push(acc);
        }
        Self { points, weights, cum }
    }

    pub fn equal(points: Vec<Vec<f64>>) -> Self {
        let n = points.len();
        Self::new(points, vec![1.0; n])
    }

    fn draw_index(&self, rng: &mut StdRng) -> usize {
        let u: f64 = rng.random_range(0.0f64..1.0);
        match self.cum.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => i,
            Err(i) => i.min(self.points.len() - 1),
        }
    }

    /// Restriction to the closed ball B(x_ref, h), weights renormalized.
    pub fn restrict(&self, x_ref: &[f64], h: f64) -> Result<WeightedPoints, ScoreError> {
        let mut pts = Vec::new();
        let mut ws = Vec::new();
        for (p, w) in self.points.iter().zip(&self.weights) {
            if vm::dist(p, x_ref) <= h {
                pts.push(p.clone());
                ws.push(*w);
            }
        }
        if pts.is_empty() {
            return Err(ScoreError::EmptyNeighborhood);
        }
        Ok(WeightedPoints::new(pts, ws))
    }
}

/// A Monte Carlo DSM estimate at a fixed noise level.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DsmEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_mc: usize,
    pub t: f64,
}

/// Pre-drawn (x0, x) pairs with x ~ N(x0, t I): the common-random-number
/// batch used to compare fields.
#[derive(Debug, Clone)]
pub struct DsmBatch {
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
    pub t: f64,
}

impl DsmBatch {
    pub fn draw(data: &WeightedPoints, t: f64, n_mc: usize, rng: &mut StdRng) -> Self {
        assert!(t > 0.0 && n_mc > 0);
        let sd = t.sqrt();
        let pairs = (0..n_mc)
            .map(|_| {
                let x0 = data.points[data.draw_index(rng)].clone();
                let x: Vec<f64> =
                    x0.iter().map(|v| v + sd * rng.sample::<f64, _>(StandardNormal)).collect();
                (x0, x)
            })
            .collect();
        Self { pairs, t }
    }

    /// DSM objective of `field` on this batch.
    pub fn dsm(&self, field: &ScoreField) -> DsmEstimate {
        let mut st = RunningStats::new();
        for (x0, x) in &self.pairs {
            let s = field.eval(x, self.t);
            let resid: f64 = s
                .iter()
                .zip(x.iter().zip(x0))
                .map(|(si, (xi, ai))| {
                    let r = si + (xi - ai) / self.t;
                    r * r
                })
                .sum();
            st.push(resid);
        }
        DsmEstimate { value: st.mean(), std_error: st.std_error(), n_mc: self.pairs.len(), t: self.t }
    }

    /// Paired difference DSM(a) - DSM(b) with shared noise.
    pub fn dsm_diff(&self, a: &ScoreField, b: &ScoreField) -> DsmEstimate {
        let mut st = RunningStats::new();
        for (x0, x) in &self.pairs {
            let sa = a.eval(x, self.t);
            let sb = b.eval(x, self.t);
            let mut da = 0.0;
            let mut db = 0.0;
            for i in 0..x.len() {
                let cond = (x[i] - x0[i]) / self.t;
                da += (sa[i] + cond) * (sa[i] + cond);
                db += (sb[i] + cond) * (sb[i] + cond);
            }
            st.push(da - db);
        }
        DsmEstimate { value: st.mean(), std_error: st.std_error(), n_mc: self.pairs.len(), t: self.t }
    }
}

/// Monte Carlo estimate of the DSM objective
/// E_{x0 ~ data} E_{x ~ N(x0, tI)} |s(x,t) + (x - x0)/t|^2.
pub fn dsm(
    field: &ScoreField,
    data: &WeightedPoints,
    t: f64,
    n_mc: usize,
    rng: &mut StdRng,
) -> DsmEstimate {
    DsmBatch::draw(data, t, n_mc, rng).dsm(field)
}

/// Local DSM: the same objective with the data restricted to B(x_ref, h).
pub fn ldsm(
    field: &ScoreField,
    x_ref: &[f64],
    h: f64,
    data: &WeightedPoints,
    t: f64,
    n_mc: usize,
    rng: &mut StdRng,
) -> Result<DsmEstimate, ScoreError> {
    let local = data.restrict(x_ref, h)?;
    Ok(dsm(field, &local, t, n_mc, rng))
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ExcessRiskCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub rel_gap: f64,
    pub lhs_se: f64,
}

/// Verifies the excess-risk identity DSM(s) - DSM(s*) = E_{mu_t} |s - s*|^2
/// with common random numbers on both sides. `s_star` must be the exact
/// score of the smoothed data law for the identity to hold.
pub fn excess_risk_check(
    s: &ScoreField,
    s_star: &ScoreField,
    data: &WeightedPoints,
    t: f64,
    n_mc: usize,
    rng: &mut StdRng,
) -> ExcessRiskCheck {
    let batch = DsmBatch::draw(data, t, n_mc, rng);
    let diff = batch.dsm_diff(s, s_star);
    let mut rhs_st = RunningStats::new();
    for (_, x) in &batch.pairs {
        let sa = s.eval(x, t);
        let sb = s_star.eval(x, t);
        rhs_st.push(vm::dist_sq(&sa, &sb));
    }
    let lhs = diff.value;
    let rhs = rhs_st.mean();
    let gap = lhs - rhs;
    let denom = rhs.abs().max(1e-12);
    ExcessRiskCheck { lhs, rhs, gap, rel_gap: gap.abs() / denom, lhs_se: diff.std_error }
}

/// Denoiser map x + t s(x, t); approximates nearest-point projection for
/// small-noise projection-like scores.
pub fn denoiser(field: &ScoreField, x: &[f64], t: f64) -> Vec<f64> {
    let s = field.eval(x, t);
    let mut y = x.to_vec();
    vm::axpy(&mut y, t, &s);
    y
}

/// Cosine between the projection direction proj(x) - x and the score.
pub fn alignment(field: &ScoreField, m: &Manifold, x: &[f64], t: f64) -> Result<f64, ScoreError> {
    let y = m.project(x).map_err(|_| ScoreError::DegenerateVector)?;
    let v = vm::sub(&y, x);
    let s = field.eval(x, t);
    let nv = vm::norm(&v);
    let ns = vm::norm(&s);
    if nv < 1e-12 || ns < 1e-12 {
        return Err(ScoreError::DegenerateVector);
    }
    Ok(vm::dot(&v, &s) / (nv * ns))
}

/// Builds a perturbed field `base + e(x)/t` with `sup_x |e(x)| = epsilon`.
///
/// The tangential and random-smooth kinds evaluate their profile at proj(x),
/// so the sup over any tube equals the sup over the manifold; the
/// random-smooth profile is normalized against a dense on-manifold probe.
pub fn make_perturbed(
    base: ScoreField,
    epsilon: f64,
    kind: ErrorKind,
    manifold: Option<&Manifold>,
    rng: &mut StdRng,
) -> ScoreField {
    assert!(epsilon >= 0.0);
    let dim = manifold.map(|m| m.ambient_dim());
    let error = match kind {
        ErrorKind::ConstantDirection => {
            let dim = dim.unwrap_or_else(|| match &base {
                ScoreField::Oracle { atoms, .. } => atoms[0].len(),
                _ => panic!("constant-direction error needs a dimension source"),
            });
            let mut u: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            vm::normalize(&mut u, 1e-300);
            ErrorField {
                kind,
                epsilon,
                manifold: manifold.cloned(),
                direction: u,
                waves: Vec::new(),
                norm_scale: 1.0,
            }
        }
        ErrorKind::Tangential => ErrorField {
            kind,
            epsilon,
            manifold: Some(manifold.expect("tangential error needs a manifold").clone()),
            direction: Vec::new(),
            waves: Vec::new(),
            norm_scale: 1.0,
        },
        ErrorKind::RandomSmooth => {
            let m = manifold.expect("random-smooth error needs a manifold");
            let dim = m.ambient_dim();
            let n_normal = dim - m.intrinsic_dim();
            let waves: Vec<Vec<(f64, Vec<f64>, f64)>> = (0..n_normal)
                .map(|_| {
                    (0..3)
                        .map(|_| {
                            let a: f64 = rng.sample(StandardNormal);
                            let k: Vec<f64> = (0..dim)
                                .map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal))
                                .collect();
                            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                            (a, k, phi)
                        })
                        .collect()
                })
                .collect();
            // Normalize the profile sup over a dense on-manifold probe.
            let probe = m.geodesic_net(2048, 0x70726f6265);
            let mut sup = 0.0f64;
            for y in &probe {
                let g2: f64 = waves.iter().map(|w| eval_waves(w, y).powi(2)).sum();
                sup = sup.max(g2.sqrt());
            }
            let norm_scale = if sup > 0.0 { epsilon / sup } else { 0.0 };
            ErrorField {
                kind,
                epsilon,
                manifold: Some(m.clone()),
                direction: Vec::new(),
                waves,
                norm_scale,
            }
        }
    };
    ScoreField::Perturbed { base: Box::new(base), error }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SurfaceDensity;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    #[test]
    fn conditional_score_values() {
        assert!(vm::norm(&conditional_score(&[1.0, 2.0], &[1.0, 2.0], 0.5)) == 0.0);
        let s = conditional_score(&[1.0, 0.0], &[0.0, 0.0], 1.0);
        assert!(vm::dist(&s, &[-1.0, 0.0]) < 1e-15);
        let s2 = conditional_score(&[1.0, 0.0], &[0.0, 0.0], 0.5);
        assert!(vm::dist(&s2, &[-2.0, 0.0]) < 1e-15);
    }

    #[test]
    fn dsm_of_matching_single_atom_is_zero() {
        let atom = vec![0.3, -0.7];
        let field = ScoreField::oracle_mixture(vec![atom.clone()], None);
        let data = WeightedPoints::equal(vec![atom]);
        let est = dsm(&field, &data, 0.4, 4000, &mut rng(1));
        assert!(est.value.abs() <= 3.0 * est.std_error.max(1e-14));
    }

    #[test]
    fn dsm_of_zero_field_is_d_over_t() {
        #[derive(Debug)]
        struct ZeroEta;
        impl PotentialFn for ZeroEta {
            fn eval(&self, _x: &[f64]) -> f64 {
                0.0
            }
            fn grad(&self, x: &[f64]) -> Vec<f64> {
                vec![0.0; x.len()]
            }
        }
        let field = ScoreField::potential_projection(Arc::new(ZeroEta), None);
        let data = WeightedPoints::equal(vec![vec![0.0, 0.0, 0.0], vec![1.0, 1.0, -1.0]]);
        let t = 0.5;
        let est = dsm(&field, &data, t, 20000, &mut rng(2));
        let want = 3.0 / t;
        assert!(
            (est.value - want).abs() <= 3.0 * est.std_error,
            "dsm {} want {}",
            est.value,
            want
        );
    }

    #[test]
    fn oracle_beats_perturbed_candidates_with_shared_noise() {
        let m = Manifold::circle(1.0, 2);
        let mut r = rng(3);
        let pts = m.sample_surface(&SurfaceDensity::Uniform, &mut r, 6);
        let data = WeightedPoints::equal(pts.clone());
        let oracle = ScoreField::oracle_mixture(pts, None);
        let batch = DsmBatch::draw(&data, 0.3, 8000, &mut r);
        for eps in [0.1, 0.3, 1.0] {
            let cand = make_perturbed(
                oracle.clone(),
                eps,
                ErrorKind::ConstantDirection,
                Some(&m),
                &mut r,
            );
            let diff = batch.dsm_diff(&cand, &oracle);
            assert!(
                diff.value >= 3.0 * diff.std_error,
                "candidate eps {eps} not separated: {} se {}",
                diff.value,
                diff.std_error
            );
        }
    }

    #[test]
    fn ldsm_wide_bandwidth_recovers_dsm_and_empty_errors() {
        let data = WeightedPoints::equal(vec![vec![0.0, 0.0], vec![2.0, 0.0]]);
        let field = ScoreField::oracle_mixture(data.points.clone(), None);
        let a = dsm(&field, &data, 0.5, 6000, &mut rng(4));
        let b = ldsm(&field, &[0.5, 0.0], 1e9, &data, 0.5, 6000, &mut rng(4)).unwrap();
        assert!((a.value - b.value).abs() < 1e-12, "same rng stream, same batch");
        let err = ldsm(&field, &[10.0, 0.0], 0.5, &data, 0.5, 100, &mut rng(5));
        assert_eq!(err.unwrap_err(), ScoreError::EmptyNeighborhood);
    }

    #[test]
    fn excess_risk_identity_for_constant_offset() {
        let mut r = rng(6);
        let m = Manifold::circle(1.0, 3);
        let pts = m.sample_surface(&SurfaceDensity::Uniform, &mut r, 8);
        let data = WeightedPoints::equal(pts.clone());
        let s_star = ScoreField::oracle_mixture(pts, None);
        let t = 1.0;
        let same = excess_risk_check(&s_star, &s_star, &data, t, 2000, &mut r);
        assert!(same.lhs.abs() < 1e-12 && same.rhs.abs() < 1e-12);

        let shifted = make_perturbed(
            s_star.clone(),
            1.0,
            ErrorKind::ConstantDirection,
            Some(&m),
            &mut r,
        );
        let chk = excess_risk_check(&shifted, &s_star, &data, t, 100_000, &mut r);
        // rhs is exactly |c|^2 = (eps/t)^2 here
        assert!((chk.rhs - 1.0).abs() < 1e-12);
        assert!(chk.rel_gap <= 0.02, "rel gap {}", chk.rel_gap);
    }

    #[test]
    fn denoiser_is_projection_for_exact_field() {
        let m = Manifold::circle(1.0, 3);
        let field = ScoreField::exact_projection(m.clone());
        let mut r = rng(7);
        for _ in 0..50 {
            let x = m.sample_tube_point(0.6, &mut r);
            let d = denoiser(&field, &x, 0.123);
            let y = m.project(&x).unwrap();
            assert!(vm::dist(&d, &y) < 1e-12);
            let dd = denoiser(&field, &d, 0.123);
            assert!(vm::dist(&dd, &d) < 1e-9, "denoiser not idempotent");
        }
    }

    #[test]
    fn denoiser_of_single_atom_oracle_is_the_atom() {
        let atom = vec![0.4, -0.9, 2.0];
        let field = ScoreField::oracle_mixture(vec![atom.clone()], None);
        let d = denoiser(&field, &[5.0, 5.0, 5.0], 0.7);
        assert!(vm::dist(&d, &atom) < 1e-12);
    }

    #[test]
    fn alignment_signs_and_degeneracy() {
        let m = Manifold::circle(1.0, 2);
        let exact = ScoreField::exact_projection(m.clone());
        let x = [1.5, 0.0];
        assert!((alignment(&exact, &m, &x, 0.2).unwrap() - 1.0).abs() < 1e-12);

        // anti-aligned: +(x - proj)/t
        #[derive(Debug)]
        struct NegEta(Manifold);
        impl PotentialFn for NegEta {
            fn eval(&self, x: &[f64]) -> f64 {
                -self.0.eta_star(x)
            }
            fn grad(&self, x: &[f64]) -> Vec<f64> {
                let y = self.0.project(x).unwrap();
                vm::sub(&y, x)
            }
        }
        let anti = ScoreField::potential_projection(Arc::new(NegEta(m.clone())), None);
        assert!((alignment(&anti, &m, &x, 0.2).unwrap() + 1.0).abs() < 1e-12);

        let on = [1.0, 0.0];
        assert_eq!(
            alignment(&exact, &m, &on, 0.2).unwrap_err(),
            ScoreError::DegenerateVector
        );
    }

    #[test]
    fn perturbed_sup_norm_and_tangential_orthogonality() {
        let m = Manifold::circle(1.0, 3);
        let base = ScoreField::exact_projection(m.clone());
        let mut r = rng(8);
        let eps = 0.037;

        let cd = make_perturbed(base.clone(), eps, ErrorKind::ConstantDirection, Some(&m), &mut r);
        let tg = make_perturbed(base.clone(), eps, ErrorKind::Tangential, Some(&m), &mut r);
        let rs = make_perturbed(base.clone(), eps, ErrorKind::RandomSmooth, Some(&m), &mut r);
        let zero = make_perturbed(base.clone(), 0.0, ErrorKind::ConstantDirection, Some(&m), &mut r);

        let t = 0.21;
        let mut sup_cd = 0.0f64;
        let mut sup_rs = 0.0f64;
        for _ in 0..10_000 {
            let x = m.sample_tube_point(0.5, &mut r);
            let b = base.eval(&x, t);
            let e_cd: Vec<f64> =
                cd.eval(&x, t).iter().zip(&b).map(|(a, c)| (a - c) * t).collect();
            sup_cd = sup_cd.max(vm::norm(&e_cd));
            let e_rs: Vec<f64> =
                rs.eval(&x, t).iter().zip(&b).map(|(a, c)| (a - c) * t).collect();
            sup_rs = sup_rs.max(vm::norm(&e_rs));

            let e_tg: Vec<f64> =
                tg.eval(&x, t).iter().zip(&b).map(|(a, c)| (a - c) * t).collect();
            let y = m.project(&x).unwrap();
            let fiber = vm::sub(&x, &y);
            assert!(vm::dot(&e_tg, &fiber).abs() < 1e-9, "tangential error not orthogonal");

            let z = zero.eval(&x, t);
            assert!(vm::dist(&z, &b) < 1e-15, "epsilon 0 must be identical");
        }
        assert!((sup_cd - eps).abs() < 1e-12, "constant-direction sup {sup_cd}");
        assert!(sup_rs <= eps + 1e-12 && sup_rs > 0.5 * eps, "random-smooth sup {sup_rs}");
    }

    #[test]
    fn perturbed_denoiser_stays_within_epsilon_of_projection() {
        let m = Manifold::circle(1.0, 2);
        let base = ScoreField::exact_projection(m.clone());
        let mut r = rng(9);
        let eps = 0.01;
        let f = make_perturbed(base, eps, ErrorKind::ConstantDirection, Some(&m), &mut r);
        for _ in 0..200 {
            let x = m.sample_tube_point(0.5, &mut r);
            let d = denoiser(&f, &x, 0.05);
            let y = m.project(&x).unwrap();
            assert!(vm::dist(&d, &y) <= eps + 1e-12);
        }
    }

    #[test]
    fn projection_field_vanishes_outside_domain() {
        let m = Manifold::circle(1.0, 2);
        let anchors = vec![vec![1.0, 0.0]];
        let dom = DomainU::new(anchors, 0.5);
        let field = ScoreField::Projection {
            source: ProjectionSource::Exact(m),
            domain: Some(dom),
        };
        let far = [-1.2, 0.0];
        assert!(vm::norm(&field.eval(&far, 0.3)) == 0.0);
        let near = [1.1, 0.0];
        assert!(vm::norm(&field.eval(&near, 0.3)) > 0.0);
    }
}
