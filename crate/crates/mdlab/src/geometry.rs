//! Synthetic manifold zoo with exact projections and intrinsic geometry.
//!
//! Every manifold here is compact, connected, boundaryless and embedded in
//! `R^D`. The built-ins are a circle (any ambient dimension), a k-sphere,
//! the Clifford torus in `R^4` (padded), and the rotation group SO(d)
//! embedded by flattening d x d matrices row-major. For the first three the
//! reach is known in closed form; for SO(d) a safe numeric lower bound is
//! probed once and cached.
//!
//! Conventions:
//! - points are flat `Vec<f64>` of length `ambient_dim`;
//! - SO(d) volumes are reported under the *normalized* Haar measure, so
//!   `surface_volume` is 1 and geodesic-ball volumes are Haar probabilities;
//! - `project` fails only where the nearest point is genuinely ambiguous
//!   (medial axis within numeric tolerance), not merely far away.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::vecmath::{self as vm, dot, norm};

/// Points closer than this to a medial set are rejected by `project`.
const MEDIAL_TOL: f64 = 1e-10;

/// Points within this distance of the manifold are silently re-projected by
/// operations that require on-manifold arguments.
pub const ON_MANIFOLD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum GeomError {
    /// The nearest point is not unique (query is on/near the medial axis).
    OutsideTube,
    /// Rank-deficient input where a full-rank matrix is required.
    SingularInput,
    /// Argument should lie on the manifold but is too far from it.
    NotOnManifold { dist: f64 },
    /// Geodesic ball radius exceeds the injectivity radius.
    BallTooLarge,
}

impl std::fmt::Display for GeomError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GeomError::OutsideTube => write!(f, "nearest-point projection is ambiguous"),
            GeomError::SingularInput => write!(f, "rank-deficient matrix input"),
            GeomError::NotOnManifold { dist } => {
                write!(f, "point is {dist:.3e} away from the manifold")
            }
            GeomError::BallTooLarge => write!(f, "ball radius exceeds injectivity radius"),
        }
    }
}

impl std::error::Error for GeomError {}

#[derive(Debug, Clone, PartialEq)]
pub enum ManifoldKind {
    /// Circle of given radius in the (x0, x1) plane, padded with zeros.
    Circle { radius: f64 },
    /// k-sphere of given radius in coordinates 0..=k, padded with zeros.
    Sphere { k: usize, radius: f64 },
    /// Product of two circles in coordinates (0,1) and (2,3), padded.
    CliffordTorus { r1: f64, r2: f64 },
    /// SO(d) as row-major flattened d x d matrices, D = d^2.
    SpecialOrthogonal { d: usize },
}

/// Reach of the manifold: exact where known, a probed lower bound for SO(d).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reach {
    Exact(f64),
    Numeric(f64),
}

impl Reach {
    pub fn value(&self) -> f64 {
        match self {
            Reach::Exact(r) | Reach::Numeric(r) => *r,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, Reach::Exact(_))
    }
}

#[derive(Debug, Clone)]
pub struct Manifold {
    kind: ManifoldKind,
    intrinsic_dim: usize,
    ambient_dim: usize,
    reach: OnceLock<Reach>,
}

/// Surface densities w.r.t. the Riemannian volume measure.
#[derive(Debug, Clone, PartialEq)]
pub enum SurfaceDensity {
    /// Uniform (Haar for SO(d)).
    Uniform,
    /// Von Mises on the circle: p(theta) proportional to exp(kappa cos(theta - mean)).
    VonMises { kappa: f64, mean_angle: f64 },
    /// X = I + sigma * G projected onto SO(d) via SVD.
    ProjectedNormal { sigma: f64 },
}

impl Manifold {
    pub fn circle(radius: f64, ambient_dim: usize) -> Self {
        assert!(radius > 0.0 && ambient_dim >= 2);
        Self {
            kind: ManifoldKind::Circle { radius },
            intrinsic_dim: 1,
            ambient_dim,
            reach: reach_cell(Reach::Exact(radius)),
        }
    }

    pub fn sphere(k: usize, radius: f64, ambient_dim: usize) -> Self {
        assert!(k >= 1 && radius > 0.0 && ambient_dim >= k + 1);
        Self {
            kind: ManifoldKind::Sphere { k, radius },
            intrinsic_dim: k,
            ambient_dim,
            reach: reach_cell(Reach::Exact(radius)),
        }
    }

    pub fn clifford_torus(r1: f64, r2: f64, ambient_dim: usize) -> Self {
        assert!(r1 > 0.0 && r2 > 0.0 && ambient_dim >= 4);
        Self {
            kind: ManifoldKind::CliffordTorus { r1, r2 },
            intrinsic_dim: 2,
            ambient_dim,
            reach: reach_cell(Reach::Exact(r1.min(r2))),
        }
    }

    pub fn special_orthogonal(d: usize) -> Self {
        assert!(d >= 2);
        Self {
            kind: ManifoldKind::SpecialOrthogonal { d },
            intrinsic_dim: d * (d - 1) / 2,
            ambient_dim: d * d,
            reach: OnceLock::new(),
        }
    }

    pub fn kind(&self) -> &ManifoldKind {
        &self.kind
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    /// Reach; for SO(d) a probed lower bound, computed once on first use.
    pub fn reach(&self) -> Reach {
        *self.reach.get_or_init(|| match self.kind {
            ManifoldKind::SpecialOrthogonal { d } => Reach::Numeric(probe_so_reach(d)),
            _ => unreachable!("exact reach is seeded at construction"),
        })
    }

    pub fn injectivity_radius(&self) -> f64 {
        match self.kind {
            ManifoldKind::Circle { radius } => std::f64::consts::PI * radius,
            ManifoldKind::Sphere { radius, .. } => std::f64::consts::PI * radius,
            ManifoldKind::CliffordTorus { r1, r2 } => std::f64::consts::PI * r1.min(r2),
            ManifoldKind::SpecialOrthogonal { .. } => std::f64::consts::SQRT_2 * std::f64::consts::PI,
        }
    }

    /// Total Riemannian volume (1 for SO(d): normalized Haar).
    pub fn surface_volume(&self) -> f64 {
        match self.kind {
            ManifoldKind::Circle { radius } => 2.0 * std::f64::consts::PI * radius,
            ManifoldKind::Sphere { k, radius } => unit_sphere_area(k) * radius.powi(k as i32),
            ManifoldKind::CliffordTorus { r1, r2 } => {
                4.0 * std::f64::consts::PI * std::f64::consts::PI * r1 * r2
            }
            ManifoldKind::SpecialOrthogonal { .. } => 1.0,
        }
    }

    /// Nearest point on the manifold.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, GeomError> {
        assert_eq!(x.len(), self.ambient_dim);
        match self.kind {
            ManifoldKind::Circle { radius } => {
                let mut y = vec![0.0; self.ambient_dim];
                project_factor(x, 0, 2, radius, &mut y)?;
                Ok(y)
            }
            ManifoldKind::Sphere { k, radius } => {
                let mut y = vec![0.0; self.ambient_dim];
                project_factor(x, 0, k + 1, radius, &mut y)?;
                Ok(y)
            }
            ManifoldKind::CliffordTorus { r1, r2 } => {
                let mut y = vec![0.0; self.ambient_dim];
                project_factor(x, 0, 2, r1, &mut y)?;
                project_factor(x, 2, 2, r2, &mut y)?;
                Ok(y)
            }
            ManifoldKind::SpecialOrthogonal { d } => nearest_rotation(x, d),
        }
    }

    /// Euclidean distance to the manifold (defined everywhere).
    pub fn dist_to_manifold(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.ambient_dim);
        match self.kind {
            ManifoldKind::Circle { radius } => {
                let mut d2 = (norm(&x[0..2]) - radius).powi(2);
                d2 += x[2..].iter().map(|v| v * v).sum::<f64>();
                d2.sqrt()
            }
            ManifoldKind::Sphere { k, radius } => {
                let mut d2 = (norm(&x[0..k + 1]) - radius).powi(2);
                d2 += x[k + 1..].iter().map(|v| v * v).sum::<f64>();
                d2.sqrt()
            }
            ManifoldKind::CliffordTorus { r1, r2 } => {
                let mut d2 = (norm(&x[0..2]) - r1).powi(2);
                d2 += (norm(&x[2..4]) - r2).powi(2);
                d2 += x[4..].iter().map(|v| v * v).sum::<f64>();
                d2.sqrt()
            }
            ManifoldKind::SpecialOrthogonal { d } => {
                let m = DMatrix::from_row_slice(d, d, x);
                let svd = m.svd(false, false);
                let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
                sv.sort_by(|a, b| b.total_cmp(a));
                let det = DMatrix::from_row_slice(d, d, x).determinant();
                let mut d2 = 0.0;
                for (i, s) in sv.iter().enumerate() {
                    let target = if det < 0.0 && i == d - 1 { -1.0 } else { 1.0 };
                    d2 += (s - target) * (s - target);
                }
                d2.sqrt()
            }
        }
    }

    /// Half squared distance to the manifold.
    pub fn eta_star(&self, x: &[f64]) -> f64 {
        let d = self.dist_to_manifold(x);
        0.5 * d * d
    }

    /// Geodesic (intrinsic) distance between two on-manifold points.
    pub fn geodesic_distance(&self, y1: &[f64], y2: &[f64]) -> Result<f64, GeomError> {
        let y1 = self.require_on_manifold(y1)?;
        let y2 = self.require_on_manifold(y2)?;
        Ok(match self.kind {
            ManifoldKind::Circle { radius } => radius * plane_angle(&y1[0..2], &y2[0..2]),
            ManifoldKind::Sphere { k, radius } => {
                let c = dot(&y1[0..k + 1], &y2[0..k + 1]) / (radius * radius);
                radius * c.clamp(-1.0, 1.0).acos()
            }
            ManifoldKind::CliffordTorus { r1, r2 } => {
                let a = r1 * plane_angle(&y1[0..2], &y2[0..2]);
                let b = r2 * plane_angle(&y1[2..4], &y2[2..4]);
                (a * a + b * b).sqrt()
            }
            ManifoldKind::SpecialOrthogonal { d } => {
                let r1 = DMatrix::from_row_slice(d, d, &y1);
                let r2 = DMatrix::from_row_slice(d, d, &y2);
                let rel = r1.transpose() * r2;
                // |Log R|_F^2 equals the sum of squared eigenvalue arguments.
                let eig = rel.complex_eigenvalues();
                eig.iter().map(|l| l.arg().powi(2)).sum::<f64>().sqrt()
            }
        })
    }

    /// Orthonormal basis of the tangent space at `y`, as `k` column vectors.
    pub fn tangent_basis(&self, y: &[f64]) -> Result<Vec<Vec<f64>>, GeomError> {
        let y = self.require_on_manifold(y)?;
        let dim = self.ambient_dim;
        Ok(match self.kind {
            ManifoldKind::Circle { radius } => {
                let mut t = vec![0.0; dim];
                t[0] = -y[1] / radius;
                t[1] = y[0] / radius;
                vec![t]
            }
            ManifoldKind::Sphere { k, radius } => {
                // Complete the unit radial vector to a basis of the (k+1)-subspace.
                let unit: Vec<f64> = y[0..k + 1].iter().map(|v| v / radius).collect();
                let basis = complete_orthonormal(&unit);
                basis
                    .into_iter()
                    .map(|b| {
                        let mut t = vec![0.0; dim];
                        t[0..k + 1].copy_from_slice(&b);
                        t
                    })
                    .collect()
            }
            ManifoldKind::CliffordTorus { r1, r2 } => {
                let mut t1 = vec![0.0; dim];
                t1[0] = -y[1] / r1;
                t1[1] = y[0] / r1;
                let mut t2 = vec![0.0; dim];
                t2[2] = -y[3] / r2;
                t2[3] = y[2] / r2;
                vec![t1, t2]
            }
            ManifoldKind::SpecialOrthogonal { d } => {
                let r = DMatrix::from_row_slice(d, d, &y);
                let mut cols = Vec::with_capacity(d * (d - 1) / 2);
                for i in 0..d {
                    for j in (i + 1)..d {
                        let mut a = DMatrix::zeros(d, d);
                        a[(i, j)] = 1.0 / std::f64::consts::SQRT_2;
                        a[(j, i)] = -1.0 / std::f64::consts::SQRT_2;
                        let t = &r * a;
                        cols.push(t.transpose().as_slice().to_vec()); // row-major flatten
                    }
                }
                cols
            }
        })
    }

    /// Orthonormal frame of the normal space at `y` (varies smoothly with `y`
    /// for every built-in), as `D - k` column vectors.
    pub fn normal_frame(&self, y: &[f64]) -> Result<Vec<Vec<f64>>, GeomError> {
        let y = self.require_on_manifold(y)?;
        let dim = self.ambient_dim;
        Ok(match self.kind {
            ManifoldKind::Circle { radius } => {
                let mut frame = Vec::with_capacity(dim - 1);
                let mut rad = vec![0.0; dim];
                rad[0] = y[0] / radius;
                rad[1] = y[1] / radius;
                frame.push(rad);
                for i in 2..dim {
                    let mut e = vec![0.0; dim];
                    e[i] = 1.0;
                    frame.push(e);
                }
                frame
            }
            ManifoldKind::Sphere { k, radius } => {
                let mut frame = Vec::with_capacity(dim - k);
                let mut rad = vec![0.0; dim];
                for i in 0..=k {
                    rad[i] = y[i] / radius;
                }
                frame.push(rad);
                for i in k + 1..dim {
                    let mut e = vec![0.0; dim];
                    e[i] = 1.0;
                    frame.push(e);
                }
                frame
            }
            ManifoldKind::CliffordTorus { r1, r2 } => {
                let mut frame = Vec::with_capacity(dim - 2);
                let mut rad1 = vec![0.0; dim];
                rad1[0] = y[0] / r1;
                rad1[1] = y[1] / r1;
                frame.push(rad1);
                let mut rad2 = vec![0.0; dim];
                rad2[2] = y[2] / r2;
                rad2[3] = y[3] / r2;
                frame.push(rad2);
                for i in 4..dim {
                    let mut e = vec![0.0; dim];
                    e[i] = 1.0;
                    frame.push(e);
                }
                frame
            }
            ManifoldKind::SpecialOrthogonal { d } => {
                // Normal space at R is R * Sym(d).
                let r = DMatrix::from_row_slice(d, d, &y);
                let mut frame = Vec::with_capacity(d * (d + 1) / 2);
                for i in 0..d {
                    for j in i..d {
                        let mut s = DMatrix::zeros(d, d);
                        if i == j {
                            s[(i, i)] = 1.0;
                        } else {
                            s[(i, j)] = 1.0 / std::f64::consts::SQRT_2;
                            s[(j, i)] = 1.0 / std::f64::consts::SQRT_2;
                        }
                        let t = &r * s;
                        frame.push(t.transpose().as_slice().to_vec());
                    }
                }
                frame
            }
        })
    }

    /// i.i.d. draws from the given surface density.
    pub fn sample_surface(
        &self,
        density: &SurfaceDensity,
        rng: &mut StdRng,
        n: usize,
    ) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(density, rng)).collect()
    }

    fn sample_one(&self, density: &SurfaceDensity, rng: &mut StdRng) -> Vec<f64> {
        match (&self.kind, density) {
            (ManifoldKind::Circle { radius }, SurfaceDensity::Uniform) => {
                let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                self.circle_point(*radius, th)
            }
            (ManifoldKind::Circle { radius }, SurfaceDensity::VonMises { kappa, mean_angle }) => {
                let th = sample_von_mises(*kappa, *mean_angle, rng);
                self.circle_point(*radius, th)
            }
            (ManifoldKind::Sphere { k, radius }, SurfaceDensity::Uniform) => {
                let mut v = vec![0.0; self.ambient_dim];
                loop {
                    let mut s = 0.0_f64;
                    for vi in v[0..k + 1].iter_mut() {
                        *vi = rng.sample(StandardNormal);
                        s += *vi * *vi;
                    }
                    if s > 1e-24 {
                        let inv = radius / s.sqrt();
                        for vi in v[0..k + 1].iter_mut() {
                            *vi *= inv;
                        }
                        return v;
                    }
                }
            }
            (ManifoldKind::CliffordTorus { r1, r2 }, SurfaceDensity::Uniform) => {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let b: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let mut v = vec![0.0; self.ambient_dim];
                v[0] = r1 * a.cos();
                v[1] = r1 * a.sin();
                v[2] = r2 * b.cos();
                v[3] = r2 * b.sin();
                v
            }
            (ManifoldKind::SpecialOrthogonal { d }, SurfaceDensity::Uniform) => {
                haar_rotation(*d, rng)
            }
            (ManifoldKind::SpecialOrthogonal { d }, SurfaceDensity::ProjectedNormal { sigma }) => {
                let dd = *d;
                loop {
                    let mut x = vec![0.0; dd * dd];
                    for (idx, xi) in x.iter_mut().enumerate() {
                        let g: f64 = rng.sample(StandardNormal);
                        let diag = idx / dd == idx % dd;
                        *xi = if diag { 1.0 } else { 0.0 } + sigma * g;
                    }
                    if let Ok(r) = nearest_rotation(&x, dd) {
                        return r;
                    }
                }
            }
            (kind, density) => {
                panic!("density {density:?} is not supported on manifold {kind:?}")
            }
        }
    }

    fn circle_point(&self, radius: f64, theta: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.ambient_dim];
        v[0] = radius * theta.cos();
        v[1] = radius * theta.sin();
        v
    }

    /// Riemannian volume of a geodesic ball of radius `delta` (center
    /// independent for every built-in). SO(d) uses a seeded Monte Carlo
    /// estimate of the normalized Haar mass.
    pub fn geodesic_ball_volume(&self, delta: f64) -> Result<f64, GeomError> {
        if delta <= 0.0 {
            return Ok(0.0);
        }
        if delta > self.injectivity_radius() + 1e-12 {
            return Err(GeomError::BallTooLarge);
        }
        Ok(match self.kind {
            ManifoldKind::Circle { .. } => 2.0 * delta,
            ManifoldKind::Sphere { k, radius } => {
                if k == 2 {
                    2.0 * std::f64::consts::PI * radius * radius * (1.0 - (delta / radius).cos())
                } else {
                    // area(S^{k-1}) r^k * int_0^{delta/r} sin^{k-1}(u) du
                    let f = |u: f64| u.sin().powi(k as i32 - 1);
                    unit_sphere_area(k - 1) * radius.powi(k as i32) * simpson(f, 0.0, delta / radius, 512)
                }
            }
            ManifoldKind::CliffordTorus { r1, r2 } => {
                // Flat metric: quadrature of the indicator of a disc in
                // arc-length coordinates (exactly pi delta^2 away from wraps).
                let n = 400;
                let h1 = 2.0 * delta / n as f64;
                let mut area = 0.0;
                for i in 0..n {
                    let a = -delta + (i as f64 + 0.5) * h1;
                    let half = (delta * delta - a * a).max(0.0).sqrt();
                    area += h1 * 2.0 * half;
                }
                let _ = (r1, r2);
                area
            }
            ManifoldKind::SpecialOrthogonal { d } => {
                let mut rng = StdRng::seed_from_u64(0x9e3779b97f4a7c15);
                let ident = identity_flat(d);
                let n = 20000;
                let mut hits = 0usize;
                for _ in 0..n {
                    let r = haar_rotation(d, &mut rng);
                    if self.geodesic_distance(&ident, &r).expect("on-manifold") <= delta {
                        hits += 1;
                    }
                }
                hits as f64 / n as f64
            }
        })
    }

    /// Deterministic net of `n` roughly equi-spread on-manifold points
    /// (exact angle grids where available, seeded Haar for SO(d)).
    pub fn geodesic_net(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        assert!(n >= 1);
        match self.kind {
            ManifoldKind::Circle { radius } => (0..n)
                .map(|i| self.circle_point(radius, std::f64::consts::TAU * i as f64 / n as f64))
                .collect(),
            ManifoldKind::Sphere { k, radius } if k == 2 => fibonacci_sphere(n, radius, self.ambient_dim),
            ManifoldKind::Sphere { .. } => {
                let mut rng = StdRng::seed_from_u64(seed);
                self.sample_surface(&SurfaceDensity::Uniform, &mut rng, n)
            }
            ManifoldKind::CliffordTorus { r1, r2 } => {
                let m = (n as f64).sqrt().ceil() as usize;
                let mut pts = Vec::with_capacity(m * m);
                for i in 0..m {
                    for j in 0..m {
                        if pts.len() == n {
                            break;
                        }
                        let a = std::f64::consts::TAU * i as f64 / m as f64;
                        let b = std::f64::consts::TAU * j as f64 / m as f64;
                        let mut v = vec![0.0; self.ambient_dim];
                        v[0] = r1 * a.cos();
                        v[1] = r1 * a.sin();
                        v[2] = r2 * b.cos();
                        v[3] = r2 * b.sin();
                        pts.push(v);
                    }
                }
                pts
            }
            ManifoldKind::SpecialOrthogonal { .. } => {
                let mut rng = StdRng::seed_from_u64(seed);
                self.sample_surface(&SurfaceDensity::Uniform, &mut rng, n)
            }
        }
    }

    /// Random point in the tube of the given radius: a surface point plus an
    /// ambient offset of norm < `tube_radius`.
    pub fn sample_tube_point(&self, tube_radius: f64, rng: &mut StdRng) -> Vec<f64> {
        let y = self.sample_one(&SurfaceDensity::Uniform, rng);
        let dim = self.ambient_dim;
        let mut u: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        vm::normalize(&mut u, 1e-300);
        let r: f64 = rng.random_range(0.0f64..1.0).powf(1.0 / dim as f64) * tube_radius;
        let mut x = y;
        vm::axpy(&mut x, r, &u);
        x
    }

    /// Re-projects arguments within `ON_MANIFOLD_TOL` of the manifold,
    /// errors farther away.
    pub fn require_on_manifold(&self, y: &[f64]) -> Result<Vec<f64>, GeomError> {
        let d = self.dist_to_manifold(y);
        if d > ON_MANIFOLD_TOL {
            return Err(GeomError::NotOnManifold { dist: d });
        }
        if d == 0.0 {
            return Ok(y.to_vec());
        }
        self.project(y)
    }
}

fn reach_cell(r: Reach) -> OnceLock<Reach> {
    let cell = OnceLock::new();
    cell.set(r).expect("fresh cell");
    cell
}

/// Radial projection of the coordinates `[off, off+len)` onto the sphere of
/// radius `r` inside that subspace; passes through the medial check.
fn project_factor(
    x: &[f64],
    off: usize,
    len: usize,
    r: f64,
    out: &mut [f64],
) -> Result<(), GeomError> {
    let n = norm(&x[off..off + len]);
    if n < MEDIAL_TOL {
        return Err(GeomError::OutsideTube);
    }
    for i in 0..len {
        out[off + i] = r * x[off + i] / n;
    }
    Ok(())
}

/// Angle in [0, pi] between two nonzero 2-vectors.
fn plane_angle(a: &[f64], b: &[f64]) -> f64 {
    let cross = a[0] * b[1] - a[1] * b[0];
    let d = a[0] * b[0] + a[1] * b[1];
    cross.atan2(d).abs()
}

/// Nearest rotation to a flattened d x d matrix via SVD with determinant
/// correction (flip the last singular direction when det < 0).
pub fn nearest_rotation(x: &[f64], d: usize) -> Result<Vec<f64>, GeomError> {
    let m = DMatrix::from_row_slice(d, d, x);
    let svd = m.svd(true, true);
    let u = svd.u.as_ref().ok_or(GeomError::SingularInput)?;
    let vt = svd.v_t.as_ref().ok_or(GeomError::SingularInput)?;
    let max_sv = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let min_sv = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max_sv > 0.0) || min_sv <= 1e-12 * max_sv.max(1.0) {
        return Err(GeomError::SingularInput);
    }
    let det_uv = (u * vt).determinant();
    // Multiply the column of U matching the smallest singular value by
    // sign(det) so the product lands in SO(d).
    let mut u = u.clone();
    if det_uv < 0.0 {
        let mut idx_min = 0;
        let mut smallest = f64::INFINITY;
        for (i, s) in svd.singular_values.iter().enumerate() {
            if *s < smallest {
                smallest = *s;
                idx_min = i;
            }
        }
        for r in 0..d {
            u[(r, idx_min)] = -u[(r, idx_min)];
        }
    }
    let rot = u * vt;
    Ok(rot.transpose().as_slice().to_vec()) // row-major flatten
}

/// Haar-distributed rotation via QR of a Gaussian matrix with the usual sign
/// fix, then a determinant fix into SO(d).
pub fn haar_rotation(d: usize, rng: &mut StdRng) -> Vec<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    if q.determinant() < 0.0 {
        for i in 0..d {
            q[(i, 0)] = -q[(i, 0)];
        }
    }
    q.transpose().as_slice().to_vec()
}

pub fn identity_flat(d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    v
}

/// Best-Fisher rejection sampler for the von Mises distribution.
fn sample_von_mises(kappa: f64, mean: f64, rng: &mut StdRng) -> f64 {
    if kappa < 1e-9 {
        return rng.random_range(0.0..std::f64::consts::TAU);
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random_range(0.0f64..1.0);
        let u2: f64 = rng.random_range(0.0f64..1.0);
        let z = (std::f64::consts::PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random_range(0.0f64..1.0);
            let sign = if u3 > 0.5 { 1.0 } else { -1.0 };
            let th = mean + sign * f.clamp(-1.0, 1.0).acos();
            return th.rem_euclid(std::f64::consts::TAU);
        }
    }
}

/// Unnormalized von Mises density on angles.
pub fn von_mises_density(theta: f64, kappa: f64, mean: f64) -> f64 {
    (kappa * (theta - mean).cos()).exp()
}

/// Modified Bessel I0 by power series (adequate for kappa <= ~30).
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / ((k * k) as f64);
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    sum
}

impl SurfaceDensity {
    /// Lower/upper bounds of the density w.r.t. the volume measure of `m`
    /// (normalized Haar mass for SO(d)). Analytic for Uniform and VonMises;
    /// a crude k-NN Monte Carlo estimate for ProjectedNormal, adequate for
    /// the ratio p_min / p_max.
    pub fn bounds(&self, m: &Manifold, rng: &mut StdRng) -> (f64, f64) {
        match self {
            SurfaceDensity::Uniform => {
                let p = 1.0 / m.surface_volume();
                (p, p)
            }
            SurfaceDensity::VonMises { kappa, .. } => {
                let radius = match m.kind() {
                    ManifoldKind::Circle { radius } => *radius,
                    _ => panic!("VonMises bounds need a circle"),
                };
                let z = std::f64::consts::TAU * radius * bessel_i0(*kappa);
                (((-kappa).exp()) / z, (kappa.exp()) / z)
            }
            SurfaceDensity::ProjectedNormal { .. } => {
                let n = 400;
                let k = (n as f64).sqrt().round() as usize;
                let pts = m.sample_surface(self, rng, n);
                let dim = m.intrinsic_dim() as f64;
                let mut lo = f64::INFINITY;
                let mut hi = 0.0f64;
                for i in 0..n {
                    let mut ds: Vec<f64> = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| vm::dist(&pts[i], &pts[j]))
                        .collect();
                    ds.sort_by(|a, b| a.total_cmp(b));
                    let rk = ds[k - 1];
                    // density (up to a shared constant) ~ k / (n * rk^dim)
                    let p = k as f64 / (n as f64 * rk.powf(dim));
                    lo = lo.min(p);
                    hi = hi.max(p);
                }
                (lo, hi)
            }
        }
    }
}

/// Given a unit vector, returns an orthonormal basis of its orthogonal
/// complement (deterministic Householder construction).
pub fn complete_orthonormal(unit: &[f64]) -> Vec<Vec<f64>> {
    let n = unit.len();
    // Householder vector mapping e0 to `unit`: columns 1..n of the
    // reflection matrix span the complement.
    let mut v = unit.to_vec();
    let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign;
    let vn2 = dot(&v, &v);
    let mut basis = Vec::with_capacity(n - 1);
    for j in 1..n {
        let mut col = vec![0.0; n];
        col[j] = 1.0;
        let c = 2.0 * v[j] / vn2;
        for i in 0..n {
            col[i] -= c * v[i];
        }
        // The reflection maps e_j to +-(orthonormal complement vector).
        for x in col.iter_mut() {
            *x *= -sign;
        }
        basis.push(col);
    }
    basis
}

/// Area of the unit k-sphere S^k in R^{k+1}.
pub fn unit_sphere_area(k: usize) -> f64 {
    2.0 * std::f64::consts::PI.powf((k as f64 + 1.0) / 2.0) / vm_gamma_half(k as u32 + 1)
}

/// Gamma((two_x)/2) for positive half-integers.
pub fn vm_gamma_half(two_x: u32) -> f64 {
    assert!(two_x >= 1);
    let mut val = if two_x % 2 == 0 { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut x = if two_x % 2 == 0 { 1.0 } else { 0.5 };
    while 2.0 * x + 1e-9 < two_x as f64 {
        val *= x;
        x += 1.0;
    }
    val
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Fibonacci net on the 2-sphere of given radius, padded to `dim`.
fn fibonacci_sphere(n: usize, radius: f64, dim: usize) -> Vec<Vec<f64>> {
    let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = std::f64::consts::TAU * (i as f64 / golden).fract();
            let mut v = vec![0.0; dim];
            v[0] = radius * r * phi.cos();
            v[1] = radius * r * phi.sin();
            v[2] = radius * z;
            v
        })
        .collect()
}

/// Probes a safe lower bound for the reach of SO(d): walk outward from Haar
/// points along random and structured normal directions until the projection
/// either fails or jumps, then keep a safety margin.
fn probe_so_reach(d: usize) -> f64 {
    let mut rng = StdRng::seed_from_u64(0x5eed_50_0d + d as u64);
    let dd = d * d;
    let mut min_break = f64::INFINITY;
    let n_probes = 48;
    for probe in 0..n_probes {
        let r = haar_rotation(d, &mut rng);
        let u: Vec<f64> = if probe % 4 == 0 {
            // Structured: shrink the last two singular values toward zero,
            // the closest ambiguity class.
            let rm = DMatrix::from_row_slice(d, d, &r);
            let mut s = DMatrix::zeros(d, d);
            s[(d - 1, d - 1)] = -1.0 / std::f64::consts::SQRT_2;
            s[(d - 2, d - 2)] = -1.0 / std::f64::consts::SQRT_2;
            (rm * s).transpose().as_slice().to_vec()
        } else {
            let mut u: Vec<f64> = (0..dd).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            vm::normalize(&mut u, 1e-300);
            u
        };
        let mut prev = r.clone();
        let mut broke_at = f64::INFINITY;
        let mut s = 0.05;
        while s <= 2.5 {
            let mut x = r.clone();
            vm::axpy(&mut x, s, &u);
            match nearest_rotation(&x, d) {
                Err(_) => {
                    broke_at = s;
                    break;
                }
                Ok(p) => {
                    if vm::dist(&p, &prev) > 1.0 {
                        broke_at = s;
                        break;
                    }
                    prev = p;
                }
            }
            s += 0.05;
        }
        min_break = min_break.min(broke_at);
    }
    if !min_break.is_finite() {
        min_break = 2.5;
    }
    0.9 * min_break
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI, SQRT_2, TAU};

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    #[test]
    fn circle_projection_radial() {
        let m = Manifold::circle(1.0, 2);
        let y = m.project(&[2.0, 0.0]).unwrap();
        assert!(vm::dist(&y, &[1.0, 0.0]) < 1e-12);
    }

    #[test]
    fn circle_center_axis_is_medial() {
        let m = Manifold::circle(1.0, 3);
        assert_eq!(m.project(&[0.0, 0.0, 0.5]), Err(GeomError::OutsideTube));
    }

    #[test]
    fn so3_projection_of_scaled_identity() {
        let m = Manifold::special_orthogonal(3);
        let x: Vec<f64> = identity_flat(3).iter().map(|v| 1.1 * v).collect();
        let y = m.project(&x).unwrap();
        assert!(vm::dist(&y, &identity_flat(3)) < 1e-12);
    }

    #[test]
    fn distances_match_hand_values() {
        let c = Manifold::circle(1.0, 2);
        assert!((c.dist_to_manifold(&[2.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!((c.eta_star(&[2.0, 0.0]) - 0.5).abs() < 1e-12);

        let s = Manifold::sphere(2, 1.0, 3);
        assert!((s.dist_to_manifold(&[0.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);

        // 2 * rotation(theta) is at Frobenius distance sqrt(2) from SO(2).
        let so2 = Manifold::special_orthogonal(2);
        let th = 0.7_f64;
        let x = vec![
            2.0 * th.cos(),
            -2.0 * th.sin(),
            2.0 * th.sin(),
            2.0 * th.cos(),
        ];
        assert!((so2.dist_to_manifold(&x) - SQRT_2).abs() < 1e-10);
    }

    #[test]
    fn geodesics_match_hand_values() {
        let c = Manifold::circle(2.0, 2);
        let a = [2.0, 0.0];
        let b = [-2.0, 0.0];
        assert!((c.geodesic_distance(&a, &b).unwrap() - 2.0 * PI).abs() < 1e-12);

        let s = Manifold::sphere(2, 1.0, 3);
        let d = s
            .geodesic_distance(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0])
            .unwrap();
        assert!((d - FRAC_PI_2).abs() < 1e-12);

        // SO(3): identity vs rotation by theta about z is at sqrt(2) theta.
        let so3 = Manifold::special_orthogonal(3);
        let th = 0.9_f64;
        let r = vec![th.cos(), -th.sin(), 0.0, th.sin(), th.cos(), 0.0, 0.0, 0.0, 1.0];
        let d = so3.geodesic_distance(&identity_flat(3), &r).unwrap();
        assert!((d - SQRT_2 * th).abs() < 1e-9, "got {d}");
    }

    #[test]
    fn geodesic_is_a_metric_on_samples() {
        for m in [
            Manifold::circle(1.0, 3),
            Manifold::sphere(2, 1.0, 4),
            Manifold::clifford_torus(1.0, 0.7, 4),
            Manifold::special_orthogonal(3),
        ] {
            let mut r = rng(7);
            let pts = m.sample_surface(&SurfaceDensity::Uniform, &mut r, 12);
            for a in &pts {
                assert!(m.geodesic_distance(a, a).unwrap() < 1e-9);
                for b in &pts {
                    let dab = m.geodesic_distance(a, b).unwrap();
                    let dba = m.geodesic_distance(b, a).unwrap();
                    assert!((dab - dba).abs() < 1e-9);
                    for c in &pts {
                        let dac = m.geodesic_distance(a, c).unwrap();
                        let dcb = m.geodesic_distance(c, b).unwrap();
                        assert!(dab <= dac + dcb + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn tangent_bases_are_orthonormal_and_normal_to_fiber() {
        for m in [
            Manifold::circle(1.0, 3),
            Manifold::sphere(2, 1.5, 5),
            Manifold::clifford_torus(1.0, 0.8, 5),
            Manifold::special_orthogonal(3),
        ] {
            let mut r = rng(11);
            let tube = 0.3 * m.reach().value();
            for _ in 0..20 {
                let x = m.sample_tube_point(tube, &mut r);
                let y = m.project(&x).unwrap();
                let basis = m.tangent_basis(&y).unwrap();
                assert_eq!(basis.len(), m.intrinsic_dim());
                for (i, bi) in basis.iter().enumerate() {
                    assert!((norm(bi) - 1.0).abs() < 1e-9);
                    for bj in basis.iter().skip(i + 1) {
                        assert!(dot(bi, bj).abs() < 1e-9);
                    }
                    let fiber = vm::sub(&x, &y);
                    assert!(dot(bi, &fiber).abs() < 1e-8, "tangent not normal to fiber");
                }
            }
        }
    }

    #[test]
    fn circle_tangent_example() {
        let m = Manifold::circle(1.0, 2);
        let t = m.tangent_basis(&[1.0, 0.0]).unwrap();
        assert!(vm::dist(&t[0], &[0.0, 1.0]) < 1e-12);
    }

    #[test]
    fn sphere_tangent_at_pole_spans_e1_e2() {
        let m = Manifold::sphere(2, 1.0, 3);
        let t = m.tangent_basis(&[0.0, 0.0, 1.0]).unwrap();
        for b in &t {
            assert!(b[2].abs() < 1e-12);
        }
    }

    #[test]
    fn so2_tangent_at_identity_is_skew_generator() {
        let m = Manifold::special_orthogonal(2);
        let t = m.tangent_basis(&identity_flat(2)).unwrap();
        // Normalized flattened skew generator: (0, -1, 1, 0)/sqrt(2).
        let want = [0.0, -1.0 / SQRT_2, 1.0 / SQRT_2, 0.0];
        let d1 = vm::dist(&t[0], &want);
        let neg: Vec<f64> = want.iter().map(|v| -v).collect();
        let d2 = vm::dist(&t[0], &neg);
        assert!(d1.min(d2) < 1e-12);
    }

    #[test]
    fn haar_samples_are_rotations() {
        let m = Manifold::special_orthogonal(3);
        let mut r = rng(3);
        for p in m.sample_surface(&SurfaceDensity::Uniform, &mut r, 100) {
            let rm = DMatrix::from_row_slice(3, 3, &p);
            let err = (rm.transpose() * &rm - DMatrix::identity(3, 3)).norm();
            assert!(err < 1e-10);
            assert!((rm.determinant() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_circle_samples_have_unit_norm() {
        let m = Manifold::circle(1.0, 2);
        let mut r = rng(5);
        for p in m.sample_surface(&SurfaceDensity::Uniform, &mut r, 4) {
            assert!((norm(&p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn von_mises_histogram_matches_density() {
        // Chi-square goodness of fit on 36 bins; critical value for df = 35
        // at the 0.01 level is 57.342 (chi-square table).
        let m = Manifold::circle(1.0, 2);
        let kappa = 2.0;
        let mut r = rng(12);
        let n = 20000;
        let pts = m.sample_surface(
            &SurfaceDensity::VonMises { kappa, mean_angle: 1.0 },
            &mut r,
            n,
        );
        let bins = 36;
        let mut counts = vec![0.0; bins];
        for p in &pts {
            let th = p[1].atan2(p[0]).rem_euclid(TAU);
            counts[(th / TAU * bins as f64) as usize % bins] += 1.0;
        }
        let mut expected = vec![0.0; bins];
        for (b, e) in expected.iter_mut().enumerate() {
            // midpoint rule on each bin
            let mids = 16;
            let mut mass = 0.0;
            for j in 0..mids {
                let th = TAU * (b as f64 + (j as f64 + 0.5) / mids as f64) / bins as f64;
                mass += von_mises_density(th, kappa, 1.0);
            }
            *e = mass;
        }
        let z: f64 = expected.iter().sum();
        for e in expected.iter_mut() {
            *e *= n as f64 / z;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&expected)
            .map(|(c, e)| (c - e) * (c - e) / e)
            .sum();
        assert!(chi2 < 57.342, "chi-square {chi2} too large");
    }

    #[test]
    fn ball_volumes() {
        let c = Manifold::circle(1.0, 2);
        assert!((c.geodesic_ball_volume(0.1).unwrap() - 0.2).abs() < 1e-12);

        let s = Manifold::sphere(2, 1.0, 3);
        assert!((s.geodesic_ball_volume(PI).unwrap() - 4.0 * PI).abs() < 1e-10);

        // Torus: quadrature vs the flat-disc oracle pi delta^2.
        let t = Manifold::clifford_torus(1.0, 1.0, 4);
        let v = t.geodesic_ball_volume(0.3).unwrap();
        let flat = PI * 0.3 * 0.3;
        assert!((v - flat).abs() / flat < 0.02, "got {v} want {flat}");

        assert_eq!(c.geodesic_ball_volume(10.0), Err(GeomError::BallTooLarge));
    }

    #[test]
    fn sphere_general_k_ball_matches_closed_form_k2() {
        let s = Manifold::sphere(3, 1.0, 5);
        // Sanity: monotone in delta, and for tiny delta ~ volume of flat ball.
        let v1 = s.geodesic_ball_volume(0.05).unwrap();
        let v2 = s.geodesic_ball_volume(0.1).unwrap();
        assert!(v2 > v1);
        let flat = unit_sphere_area(2) / 3.0 * 0.05_f64.powi(3); // (4/3) pi r^3
        assert!((v1 - flat).abs() / flat < 0.01);
    }

    #[test]
    fn projection_idempotent_and_pythagoras() {
        for m in [
            Manifold::circle(1.0, 3),
            Manifold::sphere(2, 1.0, 4),
            Manifold::clifford_torus(1.0, 0.6, 5),
            Manifold::special_orthogonal(3),
        ] {
            let mut r = rng(23);
            let tube = 0.8 * m.reach().value();
            let mut surf_rng = rng(29);
            let witnesses = m.sample_surface(&SurfaceDensity::Uniform, &mut surf_rng, 50);
            for _ in 0..200 {
                let x = m.sample_tube_point(tube, &mut r);
                let y = m.project(&x).unwrap();
                let y2 = m.project(&y).unwrap();
                assert!(vm::dist(&y, &y2) <= 1e-9, "projection not idempotent");
                let d = m.dist_to_manifold(&x);
                assert!((vm::dist(&x, &y) - d).abs() < 1e-9);
                for w in &witnesses {
                    assert!(vm::dist(&x, w) >= d - 1e-9, "nearer witness than projection");
                }
            }
        }
    }

    #[test]
    fn so_reach_probe_is_positive_and_not_wild() {
        let m = Manifold::special_orthogonal(3);
        let r = m.reach();
        assert!(!r.is_exact());
        let v = r.value();
        // The ambiguity classes sit at Frobenius distance sqrt(2); the probe
        // must stay below that with its safety margin, and well above zero.
        assert!(v > 0.5 && v <= SQRT_2, "probed reach {v}");
    }

    #[test]
    fn von_mises_density_bounds() {
        let m = Manifold::circle(2.0, 2);
        let d = SurfaceDensity::VonMises { kappa: 2.0, mean_angle: 0.0 };
        let mut r = rng(1);
        let (lo, hi) = d.bounds(&m, &mut r);
        assert!(lo > 0.0 && lo < hi);
        // integral of the density over the circle is 1
        let mut acc = 0.0;
        let n = 4000;
        for i in 0..n {
            let th = TAU * i as f64 / n as f64;
            acc += von_mises_density(th, 2.0, 0.0) / (TAU * 2.0 * bessel_i0(2.0)) * (TAU * 2.0 / n as f64);
        }
        assert!((acc - 1.0).abs() < 1e-6);
    }

    #[test]
    fn not_on_manifold_detection() {
        let m = Manifold::circle(1.0, 2);
        assert!(m.geodesic_distance(&[1.5, 0.0], &[1.0, 0.0]).is_err());
        // within tolerance: silently re-projected
        let y = [1.0 + 1e-10, 0.0];
        assert!(m.geodesic_distance(&y, &[1.0, 0.0]).unwrap() < 1e-9);
    }
}
