//! Distance potentials and the eikonal-constrained function class.
//!
//! A potential `eta` models half the squared distance to a manifold; the
//! class-membership checks verify the six defining constraints (eikonal
//! residual, boundary non-escape, anchoring, Hessian rank, kernel/tangent
//! angle, sampled smoothness constants). Zero sets are extracted by the
//! denoiser fixed-point iteration `x <- x + t s(x, t)`, which coincides with
//! the probability-flow ODE limit for exact scores.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::geometry::{Manifold, ManifoldKind};
use crate::nn::{AdamWFlat, PotentialNet};
use crate::score::{DomainU, ScoreField};
use crate::vecmath::{self as vm, RunningStats};

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialError {
    OutsideDomain,
    TooFewNeighbors { found: usize, need: usize },
    RankDeficient { rank: usize, need: usize },
    EmptyNeighborhood,
}

impl std::fmt::Display for PotentialError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PotentialError::OutsideDomain => write!(f, "point is outside the potential domain"),
            PotentialError::TooFewNeighbors { found, need } => {
                write!(f, "only {found} neighbors, need at least {need}")
            }
            PotentialError::RankDeficient { rank, need } => {
                write!(f, "neighborhood covariance rank {rank} < {need}")
            }
            PotentialError::EmptyNeighborhood => write!(f, "no datum in the localization ball"),
        }
    }
}

impl std::error::Error for PotentialError {}

/// A scalar potential with gradient (and Hessian) access.
pub trait PotentialFn: std::fmt::Debug {
    fn eval(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64]) -> Vec<f64>;

    /// Hessian; the default is a symmetrized central difference of `grad`.
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        let h = 1e-5;
        let mut m = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let gp = self.grad(&xp);
            let gm = self.grad(&xm);
            for i in 0..d {
                m[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        // symmetrize
        let mt = m.transpose();
        (m + mt) * 0.5
    }

    fn input_dim(&self) -> usize {
        0
    }
}

/// The exact half-squared-distance potential of a synthetic manifold.
#[derive(Debug, Clone)]
pub struct ExactEta {
    pub manifold: Manifold,
}

impl ExactEta {
    pub fn new(manifold: Manifold) -> Self {
        Self { manifold }
    }
}

impl PotentialFn for ExactEta {
    fn eval(&self, x: &[f64]) -> f64 {
        self.manifold.eta_star(x)
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        // grad of half squared distance is x - proj(x); the per-factor radial
        // form below agrees on the tube and extends smoothly elsewhere.
        match *self.manifold.kind() {
            ManifoldKind::Circle { radius } => factor_grad(x, &[(0, 2, radius)]),
            ManifoldKind::Sphere { k, radius } => factor_grad(x, &[(0, k + 1, radius)]),
            ManifoldKind::CliffordTorus { r1, r2 } => factor_grad(x, &[(0, 2, r1), (2, 2, r2)]),
            ManifoldKind::SpecialOrthogonal { .. } => {
                let y = self.manifold.project(x).expect("full-rank input");
                vm::sub(x, &y)
            }
        }
    }

    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        match *self.manifold.kind() {
            ManifoldKind::Circle { radius } => factor_hessian(x, &[(0, 2, radius)]),
            ManifoldKind::Sphere { k, radius } => factor_hessian(x, &[(0, k + 1, radius)]),
            ManifoldKind::CliffordTorus { r1, r2 } => factor_hessian(x, &[(0, 2, r1), (2, 2, r2)]),
            ManifoldKind::SpecialOrthogonal { .. } => fd_hessian_of(self, x),
        }
    }

    fn input_dim(&self) -> usize {
        self.manifold.ambient_dim()
    }
}

fn fd_hessian_of(p: &dyn PotentialFn, x: &[f64]) -> DMatrix<f64> {
    let d = x.len();
    let h = 1e-5;
    let mut m = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let gp = p.grad(&xp);
        let gm = p.grad(&xm);
        for i in 0..d {
            m[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    let mt = m.transpose();
    (m + mt) * 0.5
}

/// Gradient of sum of factor terms (|v| - r)^2 / 2 plus identity padding.
fn factor_grad(x: &[f64], factors: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut g = x.to_vec();
    for &(off, len, r) in factors {
        let n = vm::norm(&x[off..off + len]).max(1e-300);
        let c = 1.0 - r / n;
        for i in off..off + len {
            g[i] = c * x[i];
        }
    }
    g
}

fn factor_hessian(x: &[f64], factors: &[(usize, usize, f64)]) -> DMatrix<f64> {
    let d = x.len();
    let mut m = DMatrix::identity(d, d);
    for &(off, len, r) in factors {
        let n = vm::norm(&x[off..off + len]).max(1e-300);
        for i in 0..len {
            for j in 0..len {
                let u_i = x[off + i] / n;
                let u_j = x[off + j] / n;
                let eye = if i == j { 1.0 } else { 0.0 };
                m[(off + i, off + j)] = (1.0 - r / n) * eye + (r / n) * u_i * u_j;
            }
        }
    }
    m
}

/// A trained scalar network as a potential.
#[derive(Debug, Clone)]
pub struct NetEta {
    pub net: PotentialNet,
}

impl PotentialFn for NetEta {
    fn eval(&self, x: &[f64]) -> f64 {
        self.net.eta(x)
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.net.grad_eta(x)
    }

    fn input_dim(&self) -> usize {
        self.net.input_dim
    }
}

/// Eikonal residual |grad eta|^2 - 2 eta at `x`, which vanishes for exact
/// half-squared-distance potentials.
pub fn eikonal_residual(
    eta: &dyn PotentialFn,
    x: &[f64],
    domain: Option<&DomainU>,
) -> Result<f64, PotentialError> {
    if let Some(dom) = domain {
        if !dom.contains(x) {
            return Err(PotentialError::OutsideDomain);
        }
    }
    let g = eta.grad(x);
    Ok(vm::dot(&g, &g) - 2.0 * eta.eval(x))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ConstraintCheck {
    pub pass: bool,
    pub worst: f64,
}

/// Per-constraint verdicts for membership in the distance-potential class.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MembershipReport {
    /// sup |grad eta|^2 - 2 eta over domain samples.
    pub eikonal: ConstraintCheck,
    /// min over boundary samples and outward normals of <grad eta, n>;
    /// passes when strictly positive (the margin delta is reported, not
    /// thresholded).
    pub non_escape: ConstraintCheck,
    /// max |eta(y_i)| over anchors.
    pub anchoring: ConstraintCheck,
    /// number of anchors whose Hessian rank differs from D - k.
    pub rank: ConstraintCheck,
    /// max principal angle between span(W_i) and the numerical Hessian
    /// kernel, threshold 0.1 pi.
    pub angle: ConstraintCheck,
    /// sampled sup of |grad^j eta|_op for j = 1, 2, 3; pass when below the
    /// caps if caps are provided, reported otherwise.
    pub smoothness: SmoothnessCheck,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SmoothnessCheck {
    pub pass: bool,
    pub sup_norms: [f64; 3],
}

impl MembershipReport {
    pub fn passed_all(&self) -> bool {
        self.eikonal.pass
            && self.non_escape.pass
            && self.anchoring.pass
            && self.rank.pass
            && self.angle.pass
            && self.smoothness.pass
    }
}

pub struct MembershipConfig {
    pub zeta_min: f64,
    pub intrinsic_dim: usize,
    pub eikonal_tol: f64,
    pub anchor_tol: f64,
    /// Optional caps (L_1, L_2, L_3); without them the smoothness check is
    /// report-only and passes.
    pub smoothness_caps: Option<[f64; 3]>,
    pub sample_budget: usize,
}

impl MembershipConfig {
    pub fn new(zeta_min: f64, intrinsic_dim: usize) -> Self {
        Self {
            zeta_min,
            intrinsic_dim,
            eikonal_tol: 1e-8,
            anchor_tol: 1e-8,
            smoothness_caps: None,
            sample_budget: 2000,
        }
    }
}

/// Evaluates all six constraint families on anchors plus sampled domain and
/// boundary points. Failures are report entries, not errors.
pub fn check_membership(
    eta: &dyn PotentialFn,
    anchors: &[Vec<f64>],
    tangents: &[Vec<Vec<f64>>],
    cfg: &MembershipConfig,
    rng: &mut StdRng,
) -> MembershipReport {
    assert_eq!(anchors.len(), tangents.len());
    let dim = anchors[0].len();
    let domain = DomainU::new(anchors.to_vec(), cfg.zeta_min / 2.0);

    // (Eikonal) on domain samples
    let mut eik_worst = 0.0f64;
    for _ in 0..cfg.sample_budget {
        let a = &domain.anchors[rng.random_range(0..domain.anchors.len())];
        let mut u: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        vm::normalize(&mut u, 1e-300);
        let r: f64 = rng.random_range(0.0f64..1.0).powf(1.0 / dim as f64) * domain.radius;
        let mut x = a.clone();
        vm::axpy(&mut x, r, &u);
        let res = eikonal_residual(eta, &x, None).expect("no domain filter");
        eik_worst = eik_worst.max(res.abs());
    }

    // (Non-escape) on boundary samples
    let boundary = domain.sample_boundary(cfg.sample_budget / 4, rng);
    let mut min_inner = f64::INFINITY;
    for (x, n) in &boundary {
        let g = eta.grad(x);
        min_inner = min_inner.min(vm::dot(&g, n));
    }

    // (Anchoring)
    let mut anchor_worst = 0.0f64;
    for y in anchors {
        anchor_worst = anchor_worst.max(eta.eval(y).abs());
    }

    // (Rank) and (Angle) from the Hessian spectrum at anchors
    let codim = dim - cfg.intrinsic_dim;
    let mut rank_defects = 0usize;
    let mut angle_worst = 0.0f64;
    for (y, w) in anchors.iter().zip(tangents) {
        let hess = eta.hessian(y);
        let eig = hess.symmetric_eigen();
        let mut idx: Vec<usize> = (0..dim).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[a].abs().total_cmp(&eig.eigenvalues[b].abs()));
        let max_abs = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        let thresh = (0.1 * max_abs).max(1e-12);
        let kernel: Vec<usize> =
            idx.iter().copied().filter(|&i| eig.eigenvalues[i].abs() < thresh).collect();
        let rank = dim - kernel.len();
        if rank != codim {
            rank_defects += 1;
            continue;
        }
        // principal angles between span(W) and the numerical kernel
        let kmat = DMatrix::from_fn(dim, kernel.len(), |r, c| eig.eigenvectors[(r, kernel[c])]);
        let wmat = DMatrix::from_fn(dim, w.len(), |r, c| w[c][r]);
        let cross = wmat.transpose() * kmat;
        let svd = cross.svd(false, false);
        let sigma_min =
            svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min).clamp(-1.0, 1.0);
        angle_worst = angle_worst.max(sigma_min.acos());
    }

    // (Smoothness): sampled operator norms of grad^j for j = 1..3
    let mut sup = [0.0f64; 3];
    let smooth_budget = (cfg.sample_budget / 8).max(32);
    for _ in 0..smooth_budget {
        let a = &domain.anchors[rng.random_range(0..domain.anchors.len())];
        let mut u: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        vm::normalize(&mut u, 1e-300);
        let r: f64 = rng.random_range(0.0f64..1.0) * domain.radius;
        let mut x = a.clone();
        vm::axpy(&mut x, r, &u);
        sup[0] = sup[0].max(vm::norm(&eta.grad(&x)));
        let hess = eta.hessian(&x);
        let eig = hess.symmetric_eigen();
        sup[1] = sup[1].max(eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0f64, f64::max));
        // directional third derivative along a random unit direction
        let h = 1e-4;
        let mut xp = x.clone();
        let mut xm = x.clone();
        vm::axpy(&mut xp, h, &u);
        vm::axpy(&mut xm, -h, &u);
        let q = |p: &[f64]| {
            let hm = eta.hessian(p);
            let mut acc = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    acc += u[i] * hm[(i, j)] * u[j];
                }
            }
            acc
        };
        sup[2] = sup[2].max(((q(&xp) - q(&xm)) / (2.0 * h)).abs());
    }
    let smooth_pass = match cfg.smoothness_caps {
        Some(caps) => sup.iter().zip(&caps).all(|(s, c)| s <= c),
        None => true,
    };

    MembershipReport {
        eikonal: ConstraintCheck { pass: eik_worst <= cfg.eikonal_tol, worst: eik_worst },
        non_escape: ConstraintCheck { pass: min_inner > 0.0, worst: min_inner },
        anchoring: ConstraintCheck { pass: anchor_worst <= cfg.anchor_tol, worst: anchor_worst },
        rank: ConstraintCheck { pass: rank_defects == 0, worst: rank_defects as f64 },
        angle: ConstraintCheck { pass: angle_worst <= 0.1 * std::f64::consts::PI, worst: angle_worst },
        smoothness: SmoothnessCheck { pass: smooth_pass, sup_norms: sup },
    }
}

/// Top-k eigenvectors of the centered covariance of the neighbors of
/// `x_ref` within radius `h`: a local-PCA tangent estimate.
pub fn local_pca_tangent(
    points: &[Vec<f64>],
    x_ref: &[f64],
    h: f64,
    k: usize,
) -> Result<Vec<Vec<f64>>, PotentialError> {
    let dim = x_ref.len();
    let neigh: Vec<&Vec<f64>> =
        points.iter().filter(|p| vm::dist(p, x_ref) <= h).collect();
    if neigh.len() < k + 1 {
        return Err(PotentialError::TooFewNeighbors { found: neigh.len(), need: k + 1 });
    }
    let mut mean = vec![0.0; dim];
    for p in &neigh {
        vm::axpy(&mut mean, 1.0 / neigh.len() as f64, p);
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for p in &neigh {
        let c = vm::sub(p, &mean);
        for i in 0..dim {
            for j in 0..dim {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    cov /= neigh.len() as f64;
    let eig = cov.symmetric_eigen();
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lead = eig.eigenvalues[idx[0]].max(0.0);
    if eig.eigenvalues[idx[k - 1]] <= 1e-12 * lead.max(1e-300) {
        let rank = idx
            .iter()
            .filter(|&&i| eig.eigenvalues[i] > 1e-12 * lead.max(1e-300))
            .count();
        return Err(PotentialError::RankDeficient { rank, need: k });
    }
    Ok((0..k)
        .map(|c| (0..dim).map(|r| eig.eigenvectors[(r, idx[c])]).collect())
        .collect())
}

/// Zero-set extraction by the denoiser fixed-point iteration.
#[derive(Debug, Clone)]
pub struct ZeroSetResult {
    /// Converged, residual-filtered, deduplicated points.
    pub points: Vec<Vec<f64>>,
    /// Seeds that hit max_iter without the step dropping below tol.
    pub non_converged: usize,
}

/// Iterates `x <- x + t s(x, t)` until the step norm drops below `tol` (or
/// `max_iter`); keeps converged points with residual `|s| t < 10 tol` and
/// deduplicates at radius `tol`.
pub fn extract_zero_set(
    field: &ScoreField,
    t: f64,
    seeds: &[Vec<f64>],
    tol: f64,
    max_iter: usize,
) -> ZeroSetResult {
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut non_converged = 0usize;
    for seed in seeds {
        let mut x = seed.clone();
        let mut converged = false;
        for _ in 0..max_iter {
            let s = field.eval(&x, t);
            let mut step = 0.0;
            for (xi, si) in x.iter_mut().zip(&s) {
                let d = t * si;
                step += d * d;
                *xi += d;
            }
            if step.sqrt() < tol {
                converged = true;
                break;
            }
        }
        if !converged {
            non_converged += 1;
            continue;
        }
        let resid = t * vm::norm(&field.eval(&x, t));
        if resid >= 10.0 * tol {
            non_converged += 1;
            continue;
        }
        if points.iter().all(|p| vm::dist_sq(p, &x) >= tol * tol) {
            points.push(x);
        }
    }
    ZeroSetResult { points, non_converged }
}

/// Principal-manifold-estimation loss: expected squared distance from
/// truncated-Gaussian-perturbed local data to the candidate cloud.
///
/// `x0` is drawn from the data restricted to B(x_ref, h), `z` from
/// `N(0, t I)` truncated to |z| <= h (rejection sampling), and the summand
/// is the squared nearest-neighbor distance from x0 + z to `m_hat`.
pub fn pme_loss(
    m_hat: &[Vec<f64>],
    data: &[Vec<f64>],
    x_ref: &[f64],
    h: f64,
    t: f64,
    n_mc: usize,
    rng: &mut StdRng,
) -> Result<(f64, f64), PotentialError> {
    assert!(!m_hat.is_empty());
    let local: Vec<&Vec<f64>> = data.iter().filter(|p| vm::dist(p, x_ref) <= h).collect();
    if local.is_empty() {
        return Err(PotentialError::EmptyNeighborhood);
    }
    let dim = x_ref.len();
    let sd = t.sqrt();
    let mut st = RunningStats::new();
    for _ in 0..n_mc {
        let x0 = local[rng.random_range(0..local.len())];
        // truncated Gaussian by rejection
        let z: Vec<f64> = loop {
            let z: Vec<f64> =
                (0..dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
            if vm::norm(&z) <= h {
                break z;
            }
        };
        let x = vm::add(x0, &z);
        let d2 = m_hat.iter().map(|p| vm::dist_sq(p, &x)).fold(f64::INFINITY, f64::min);
        st.push(d2);
    }
    Ok((st.mean(), st.std_error()))
}

/// Configuration for the eikonal-penalized potential training mode.
#[derive(Debug, Clone)]
pub struct PotentialTrainConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_eikonal: f64,
    pub lambda_anchor: f64,
    pub t: f64,
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for PotentialTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 800,
            batch: 64,
            lr: 3e-3,
            weight_decay: 1e-6,
            lambda_eikonal: 1.0,
            lambda_anchor: 10.0,
            t: 0.01,
            fd_step: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PotentialTrainStats {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_eikonal_penalty: f64,
}

/// Best-effort training of a network potential on noisy data: a
/// t^2-weighted local-DSM term |grad eta(x) - (x - x0)|^2 plus eikonal and
/// anchoring penalties. Input gradients of `eta` inside the loss come from a
/// central-difference stencil, so the parameter gradient of the discretized
/// objective is exact.
pub fn train_potential_score(
    data: &[Vec<f64>],
    anchors: &[Vec<f64>],
    cfg: &PotentialTrainConfig,
) -> (ScoreField, PotentialTrainStats) {
    let dim = data[0].len();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut net = PotentialNet::new(dim, cfg.hidden, &mut rng);
    let mut opt = AdamWFlat::new(&net.params(), cfg.lr, cfg.weight_decay);
    let sd = cfg.t.sqrt();
    let h = cfg.fd_step;
    let stencil = 2 * dim + 1; // center + two per coordinate
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut final_eik = f64::NAN;
    for step in 0..cfg.steps {
        // assemble stencil points for the batch plus the anchors
        let mut xs = Vec::with_capacity(cfg.batch * stencil + anchors.len());
        let mut targets = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let x0 = &data[rng.random_range(0..data.len())];
            let x: Vec<f64> =
                x0.iter().map(|v| v + sd * rng.sample::<f64, _>(StandardNormal)).collect();
            targets.push(vm::sub(&x, x0));
            xs.push(x.clone());
            for d in 0..dim {
                let mut xp = x.clone();
                xp[d] += h;
                xs.push(xp);
                let mut xm = x.clone();
                xm[d] -= h;
                xs.push(xm);
            }
        }
        for a in anchors {
            xs.push(a.clone());
        }
        let n_rows = xs.len();
        let flat: Vec<f64> = xs.iter().flatten().copied().collect();
        let xmat = ndarray::Array2::from_shape_vec((n_rows, dim), flat).expect("shape");
        let (raws, cache) = net.forward_batch(&xmat);
        let etas: Vec<f64> = raws.iter().map(|r| 0.5 * r * r).collect();
        let mut deta = vec![0.0; n_rows];
        let mut loss = 0.0;
        let inv_b = 1.0 / cfg.batch as f64;
        let mut eik_acc = 0.0;
        for bi in 0..cfg.batch {
            let base = bi * stencil;
            let target = &targets[bi];
            let mut grad_eta = vec![0.0; dim];
            for d in 0..dim {
                grad_eta[d] = (etas[base + 1 + 2 * d] - etas[base + 2 + 2 * d]) / (2.0 * h);
            }
            // local DSM (t^2-weighted)
            for d in 0..dim {
                let r = grad_eta[d] - target[d];
                loss += inv_b * r * r;
                deta[base + 1 + 2 * d] += inv_b * 2.0 * r / (2.0 * h);
                deta[base + 2 + 2 * d] -= inv_b * 2.0 * r / (2.0 * h);
            }
            // eikonal penalty at the center
            let res = vm::dot(&grad_eta, &grad_eta) - 2.0 * etas[base];
            eik_acc += inv_b * res * res;
            loss += cfg.lambda_eikonal * inv_b * res * res;
            let c = cfg.lambda_eikonal * inv_b * 2.0 * res;
            deta[base] += c * (-2.0);
            for d in 0..dim {
                deta[base + 1 + 2 * d] += c * 2.0 * grad_eta[d] / (2.0 * h);
                deta[base + 2 + 2 * d] -= c * 2.0 * grad_eta[d] / (2.0 * h);
            }
        }
        let anchor_base = cfg.batch * stencil;
        let inv_a = 1.0 / anchors.len().max(1) as f64;
        for (ai, _) in anchors.iter().enumerate() {
            let e = etas[anchor_base + ai];
            loss += cfg.lambda_anchor * inv_a * e * e;
            deta[anchor_base + ai] += cfg.lambda_anchor * inv_a * 2.0 * e;
        }
        // d eta / d raw = raw
        let draw: Vec<f64> = deta.iter().zip(&raws).map(|(d, r)| d * r).collect();
        let grads = net.backward_batch(&cache, &draw);
        opt.apply(net.params_mut(), grads.t);
        if step == 0 {
            initial_loss = loss;
        }
        final_loss = loss;
        final_eik = eik_acc;
    }
    let domain = DomainU::new(anchors.to_vec(), 0.5);
    let stats = PotentialTrainStats {
        initial_loss,
        final_loss,
        final_eikonal_penalty: final_eik,
    };
    (ScoreField::potential_projection(Arc::new(NetEta { net }), Some(domain)), stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SurfaceDensity;

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    #[test]
    fn eikonal_residual_vanishes_for_exact_potential() {
        let m = Manifold::circle(1.0, 3);
        let eta = ExactEta::new(m.clone());
        let mut r = rng(1);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let x = m.sample_tube_point(0.8, &mut r);
            worst = worst.max(eikonal_residual(&eta, &x, None).unwrap().abs());
        }
        assert!(worst <= 1e-8, "worst residual {worst}");
    }

    #[test]
    fn degenerate_and_quadratic_potentials() {
        #[derive(Debug)]
        struct Zero;
        impl PotentialFn for Zero {
            fn eval(&self, _: &[f64]) -> f64 {
                0.0
            }
            fn grad(&self, x: &[f64]) -> Vec<f64> {
                vec![0.0; x.len()]
            }
        }
        // eta == 0 solves the eikonal equation everywhere...
        assert_eq!(eikonal_residual(&Zero, &[0.3, 0.4], None).unwrap(), 0.0);
        // ...but fails the rank check (Hessian rank 0 != D - k).
        let m = Manifold::circle(1.0, 2);
        let mut r = rng(2);
        let anchors = m.sample_surface(&SurfaceDensity::Uniform, &mut r, 8);
        let tangents: Vec<_> = anchors.iter().map(|y| m.tangent_basis(y).unwrap()).collect();
        let cfg = MembershipConfig::new(1.0, 1);
        let rep = check_membership(&Zero, &anchors, &tangents, &cfg, &mut r);
        assert!(rep.eikonal.pass);
        assert!(!rep.rank.pass);

        // eta = |x|^2/2: zero residual, anchoring fails off the origin.
        #[derive(Debug)]
        struct Quad;
        impl PotentialFn for Quad {
            fn eval(&self, x: &[f64]) -> f64 {
                0.5 * vm::dot(x, x)
            }
            fn grad(&self, x: &[f64]) -> Vec<f64> {
                x.to_vec()
            }
        }
        assert!(eikonal_residual(&Quad, &[0.7, -0.2], None).unwrap().abs() < 1e-15);
        let rep = check_membership(&Quad, &anchors, &tangents, &cfg, &mut r);
        assert!(rep.eikonal.pass);
        assert!(!rep.anchoring.pass);
    }

    #[test]
    fn exact_potential_is_class_member_on_builtins() {
        for (m, k) in [
            (Manifold::circle(1.0, 3), 1),
            (Manifold::sphere(2, 1.0, 4), 2),
            (Manifold::clifford_torus(1.0, 0.8, 5), 2),
        ] {
            let eta = ExactEta::new(m.clone());
            let mut r = rng(3);
            let anchors = m.sample_surface(&SurfaceDensity::Uniform, &mut r, 24);
            let tangents: Vec<_> =
                anchors.iter().map(|y| m.tangent_basis(y).unwrap()).collect();
            let cfg = MembershipConfig::new(m.reach().value(), k);
            let rep = check_membership(&eta, &anchors, &tangents, &cfg, &mut r);
            assert!(rep.passed_all(), "{:?}: {rep:?}", m.kind());
            assert!(rep.non_escape.worst > 0.0);
        }
    }

    #[test]
    fn rotated_tangents_fail_the_angle_check() {
        let m = Manifold::circle(1.0, 2);
        let eta = ExactEta::new(m.clone());
        let mut r = rng(4);
        let anchors = m.sample_surface(&SurfaceDensity::Uniform, &mut r, 8);
        let theta = 0.3 * std::f64::consts::PI;
        let tangents: Vec<Vec<Vec<f64>>> = anchors
            .iter()
            .map(|y| {
                let t = m.tangent_basis(y).unwrap();
                let n = vec![y[0], y[1]]; // unit radial
                // rotate the tangent toward the normal by 0.3 pi
                vec![vec![
                    theta.cos() * t[0][0] + theta.sin() * n[0],
                    theta.cos() * t[0][1] + theta.sin() * n[1],
                ]]
            })
            .collect();
        let cfg = MembershipConfig::new(1.0, 1);
        let rep = check_membership(&eta, &anchors, &tangents, &cfg, &mut r);
        assert!(!rep.angle.pass, "angle worst {}", rep.angle.worst);
    }

    #[test]
    fn hessian_spectrum_at_anchors() {
        for (m, k) in [(Manifold::circle(1.0, 3), 1), (Manifold::sphere(2, 1.0, 4), 2)] {
            let eta = ExactEta::new(m.clone());
            let mut r = rng(5);
            let dim = m.ambient_dim();
            for y in m.sample_surface(&SurfaceDensity::Uniform, &mut r, 20) {
                let hess = eta.hessian(&y);
                let mut eig: Vec<f64> = hess.symmetric_eigen().eigenvalues.iter().copied().collect();
                eig.sort_by(|a, b| a.total_cmp(b));
                for v in &eig[0..k] {
                    assert!(v.abs() < 1e-5, "tangent eigenvalue {v}");
                }
                for v in &eig[k..dim] {
                    assert!((v - 1.0).abs() < 1e-5, "normal eigenvalue {v}");
                }
            }
        }
    }

    #[test]
    fn sqrt_two_eta_is_distance_on_inner_domain() {
        for m in [
            Manifold::circle(1.0, 3),
            Manifold::sphere(2, 1.0, 4),
            Manifold::clifford_torus(1.0, 0.7, 4),
        ] {
            let eta = ExactEta::new(m.clone());
            let mut r = rng(6);
            for _ in 0..2000 {
                let x = m.sample_tube_point(m.reach().value() / 4.0, &mut r);
                let d = (2.0 * eta.eval(&x)).sqrt();
                assert!((d - m.dist_to_manifold(&x)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn local_pca_recovers_tangents() {
        let m = Manifold::circle(1.0, 2);
        let mut r = rng(7);
        // 50 exact circle points near (1, 0)
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let th: f64 = r.random_range(-0.2..0.2);
                vec![th.cos(), th.sin()]
            })
            .collect();
        let basis = local_pca_tangent(&pts, &[1.0, 0.0], 0.2, 1).unwrap();
        let truth = m.tangent_basis(&[1.0, 0.0]).unwrap();
        let cosang = vm::dot(&basis[0], &truth[0]).abs();
        assert!(cosang.acos() <= 0.05 * std::f64::consts::PI, "angle {}", cosang.acos());
    }

    #[test]
    fn local_pca_exact_on_affine_plane() {
        let mut r = rng(8);
        // 2D affine plane in R^5 spanned by e1, e3 with an offset
        let pts: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                let a: f64 = r.random_range(-1.0..1.0);
                let b: f64 = r.random_range(-1.0..1.0);
                vec![a, 0.5, b, -0.25, 0.75]
            })
            .collect();
        let basis = local_pca_tangent(&pts, &[0.0, 0.5, 0.0, -0.25, 0.75], 3.0, 2).unwrap();
        for v in &basis {
            assert!(v[1].abs() < 1e-8 && v[3].abs() < 1e-8 && v[4].abs() < 1e-8);
        }
    }

    #[test]
    fn local_pca_degenerate_neighborhoods() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        assert!(matches!(
            local_pca_tangent(&pts, &[0.0, 0.0], 2.0, 2),
            Err(PotentialError::TooFewNeighbors { .. })
        ));
        let collinear = vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![1.0, 0.0]];
        assert!(matches!(
            local_pca_tangent(&collinear, &[0.5, 0.0], 2.0, 2),
            Err(PotentialError::RankDeficient { .. })
        ));
    }

    #[test]
    fn zero_set_extraction_exact_field() {
        let m = Manifold::circle(1.0, 2);
        let field = ScoreField::exact_projection(m.clone());
        let mut r = rng(9);
        let seeds: Vec<Vec<f64>> = (0..100).map(|_| m.sample_tube_point(0.5, &mut r)).collect();
        let out = extract_zero_set(&field, 0.1, &seeds, 1e-9, 50);
        assert_eq!(out.non_converged, 0);
        assert_eq!(out.points.len(), 100);
        for p in &out.points {
            assert!(m.dist_to_manifold(p) <= 1e-8);
        }
    }

    #[test]
    fn zero_field_never_converges() {
        #[derive(Debug)]
        struct Zero(usize);
        impl PotentialFn for Zero {
            fn eval(&self, _: &[f64]) -> f64 {
                0.0
            }
            fn grad(&self, x: &[f64]) -> Vec<f64> {
                vec![0.0; x.len()]
            }
            fn input_dim(&self) -> usize {
                self.0
            }
        }
        // A zero score never moves the seeds: the step norm is 0 < tol at the
        // first iteration, so they "converge" in place but carry zero
        // residual; the interesting degenerate case is the *absence of
        // drift*: extracted points equal the seeds exactly.
        let field = ScoreField::potential_projection(std::sync::Arc::new(Zero(2)), None);
        let seeds = vec![vec![0.5, 0.5], vec![-0.25, 1.0]];
        let out = extract_zero_set(&field, 0.1, &seeds, 1e-9, 10);
        assert_eq!(out.points.len(), 2);
        assert_eq!(out.points[0], seeds[0]);
        assert_eq!(out.points[1], seeds[1]);
    }

    #[test]
    fn pme_loss_scales() {
        let m = Manifold::circle(1.0, 2);
        let net: Vec<Vec<f64>> = m.geodesic_net(4096, 0);
        let mut r = rng(10);
        let data = m.sample_surface(&SurfaceDensity::Uniform, &mut r, 50);
        let x_ref = data[0].clone();
        let t = 1e-4;
        let (val, _) = pme_loss(&net, &data, &x_ref, 0.5, t, 4000, &mut r).unwrap();
        assert!(val / t <= 2.0 + 0.2, "pme/t = {}", val / t); // D = 2
        // candidate cloud equal to the data atoms, tiny t: loss -> 0
        let (val2, _) = pme_loss(&data, &data, &x_ref, 0.5, 1e-8, 2000, &mut r).unwrap();
        assert!(val2 < 1e-6);
        // cloud offset by c in the normal direction: loss ~ c^2 + O(t)
        let c = 0.1;
        let offset: Vec<Vec<f64>> =
            net.iter().map(|p| vec![p[0] * (1.0 + c), p[1] * (1.0 + c)]).collect();
        let (val3, _) = pme_loss(&offset, &data, &x_ref, 0.5, 1e-6, 4000, &mut r).unwrap();
        assert!((val3 - c * c).abs() < 0.1 * c * c, "offset pme {val3}");
        // empty neighborhood
        assert!(matches!(
            pme_loss(&net, &data, &[50.0, 0.0], 0.1, t, 10, &mut r),
            Err(PotentialError::EmptyNeighborhood)
        ));
    }
}
