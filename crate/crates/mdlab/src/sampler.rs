//! Noise schedules and sampling dynamics: reverse-time SDE (Euler-Maruyama),
//! probability-flow ODE (Heun or RK4 on a log-time grid), the hybrid
//! SDE-then-ODE sampler, and annealed Langevin dynamics.
//!
//! The ODE grid is uniform in log t: the drift scales like 1/t, so log
//! spacing equidistributes local error and handles terminal times as small
//! as t0 * eps^3 without step-count blowup.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::geometry::Manifold;
use crate::score::ScoreField;
use crate::vecmath::{self as vm};

#[derive(Debug, Clone, PartialEq)]
pub enum SamplerError {
    NonFiniteState { at_t: f64 },
    OutOfRange { t: f64, lo: f64, hi: f64 },
}

impl std::fmt::Display for SamplerError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplerError::NonFiniteState { at_t } => {
                write!(f, "non-finite state at t = {at_t:.4e}")
            }
            SamplerError::OutOfRange { t, lo, hi } => {
                write!(f, "t = {t} outside schedule range [{lo}, {hi}]")
            }
        }
    }
}

impl std::error::Error for SamplerError {}

/// VE or linear-beta VP noise schedule.
///
/// VE: alpha = 1, sigma = sqrt(t); Var(t) := sigma^2 = t and alpha_bar := 1
/// (the VP relation Var = 1 - alpha_bar is VP-specific).
/// VP: beta(t) = beta_min + (beta_max - beta_min) t on [t_min, 1],
/// alpha_bar(t) = exp(-int_0^t beta), alpha = sqrt(alpha_bar),
/// sigma = sqrt(1 - alpha_bar).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum NoiseSchedule {
    Ve { t_min: f64, t_max: f64 },
    Vp { beta_min: f64, beta_max: f64, t_min: f64 },
}

impl NoiseSchedule {
    pub fn ve(t_min: f64, t_max: f64) -> Self {
        assert!(0.0 < t_min && t_min < t_max);
        NoiseSchedule::Ve { t_min, t_max }
    }

    pub fn vp(beta_min: f64, beta_max: f64, t_min: f64) -> Self {
        assert!(0.0 < beta_min && beta_min <= beta_max);
        assert!(0.0 < t_min && t_min < 1.0);
        NoiseSchedule::Vp { beta_min, beta_max, t_min }
    }

    pub fn t_range(&self) -> (f64, f64) {
        match self {
            NoiseSchedule::Ve { t_min, t_max } => (*t_min, *t_max),
            NoiseSchedule::Vp { t_min, .. } => (*t_min, 1.0),
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Ve { .. } => panic!("beta is a VP quantity"),
            NoiseSchedule::Vp { beta_min, beta_max, .. } => beta_min + (beta_max - beta_min) * t,
        }
    }

    pub fn alpha_bar(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Ve { .. } => 1.0,
            NoiseSchedule::Vp { beta_min, beta_max, .. } => {
                (-(beta_min * t + 0.5 * (beta_max - beta_min) * t * t)).exp()
            }
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Ve { .. } => 1.0,
            NoiseSchedule::Vp { .. } => self.alpha_bar(t).sqrt(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Ve { .. } => t.sqrt(),
            NoiseSchedule::Vp { .. } => (1.0 - self.alpha_bar(t)).sqrt(),
        }
    }

    /// DSM loss weight: sigma^2 for VE, 1 - alpha_bar for VP (identical
    /// formulas in the VP case).
    pub fn var(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Ve { .. } => t,
            NoiseSchedule::Vp { .. } => 1.0 - self.alpha_bar(t),
        }
    }

    pub fn log_snr(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Ve { .. } => -t.ln(),
            NoiseSchedule::Vp { .. } => {
                let ab = self.alpha_bar(t);
                (ab / (1.0 - ab)).ln()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ScheduleEval {
    pub alpha: f64,
    pub sigma: f64,
    pub alpha_bar: f64,
    pub var: f64,
    pub log_snr: f64,
}

/// All schedule quantities at `t`, with a range check.
pub fn schedule_eval(schedule: &NoiseSchedule, t: f64) -> Result<ScheduleEval, SamplerError> {
    let (lo, hi) = schedule.t_range();
    if !(t >= lo && t <= hi) {
        return Err(SamplerError::OutOfRange { t, lo, hi });
    }
    Ok(ScheduleEval {
        alpha: schedule.alpha(t),
        sigma: schedule.sigma(t),
        alpha_bar: schedule.alpha_bar(t),
        var: schedule.var(t),
        log_snr: schedule.log_snr(t),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OdeMethod {
    Heun,
    Rk4,
}

/// Hybrid-sampler configuration: T > t0 > tau > 0.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub t_terminal: f64,
    pub tau: f64,
    pub n_sde_steps: usize,
    pub n_ode_steps: usize,
    pub method: OdeMethod,
}

impl SamplerConfig {
    pub fn ve(t_big: f64, t_terminal: f64, tau: f64) -> Self {
        assert!(t_big > t_terminal && t_terminal > tau && tau > 0.0);
        Self {
            schedule: NoiseSchedule::ve(tau, t_big),
            t_terminal,
            tau,
            n_sde_steps: 512,
            n_ode_steps: 512,
            method: OdeMethod::Heun,
        }
    }
}

fn check_finite(x: &[f64], t: f64) -> Result<(), SamplerError> {
    if vm::all_finite(x) {
        Ok(())
    } else {
        Err(SamplerError::NonFiniteState { at_t: t })
    }
}

/// Euler-Maruyama on the VE reverse-time SDE dX = -s dt + dW-bar, integrated
/// from `t_hi` down to `t_lo` on a uniform grid.
pub fn reverse_sde_run(
    field: &ScoreField,
    x_start: &[f64],
    t_hi: f64,
    t_lo: f64,
    n_steps: usize,
    rng: &mut StdRng,
) -> Result<Vec<f64>, SamplerError> {
    assert!(t_hi > t_lo && t_lo > 0.0 && n_steps >= 1);
    let h = (t_hi - t_lo) / n_steps as f64;
    let mut x = x_start.to_vec();
    let mut t = t_hi;
    for _ in 0..n_steps {
        let s = field.eval(&x, t);
        let sqh = h.sqrt();
        for (xi, si) in x.iter_mut().zip(&s) {
            let xi_new = *xi + h * si + sqh * rng.sample::<f64, _>(StandardNormal);
            *xi = xi_new;
        }
        t -= h;
        check_finite(&x, t)?;
    }
    Ok(x)
}

/// VP reverse-time SDE step law: dX = [beta/2 X + beta s] dt-down + sqrt(beta) dW.
fn reverse_sde_run_vp(
    field: &ScoreField,
    schedule: &NoiseSchedule,
    x_start: &[f64],
    t_hi: f64,
    t_lo: f64,
    n_steps: usize,
    rng: &mut StdRng,
) -> Result<Vec<f64>, SamplerError> {
    let h = (t_hi - t_lo) / n_steps as f64;
    let mut x = x_start.to_vec();
    let mut t = t_hi;
    for _ in 0..n_steps {
        let beta = schedule.beta(t);
        let s = field.eval(&x, t);
        let noise_sd = (beta * h).sqrt();
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += h * (0.5 * beta * *xi + beta * si) + noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
        t -= h;
        check_finite(&x, t)?;
    }
    Ok(x)
}

/// Probability-flow ODE dX = -(1/2) s dt integrated from `t_hi` down to
/// `t_lo` on a grid uniform in log t. This is the flow map used as the
/// projection surrogate.
pub fn pf_ode_run(
    field: &ScoreField,
    x_start: &[f64],
    t_hi: f64,
    t_lo: f64,
    n_steps: usize,
    method: OdeMethod,
) -> Result<Vec<f64>, SamplerError> {
    // dx/ds = -(t/2) s(x, t) with s = ln t
    pf_ode_generic(x_start, t_hi, t_lo, n_steps, method, |x, t| {
        let mut d = field.eval(x, t);
        for v in d.iter_mut() {
            *v *= -0.5 * t;
        }
        d
    })
}

/// VP probability-flow ODE dX = -(beta/2)(X + s) dt on the log-time grid.
fn pf_ode_run_vp(
    field: &ScoreField,
    schedule: &NoiseSchedule,
    x_start: &[f64],
    t_hi: f64,
    t_lo: f64,
    n_steps: usize,
    method: OdeMethod,
) -> Result<Vec<f64>, SamplerError> {
    pf_ode_generic(x_start, t_hi, t_lo, n_steps, method, |x, t| {
        let beta = schedule.beta(t);
        let s = field.eval(x, t);
        x.iter()
            .zip(&s)
            .map(|(xi, si)| -0.5 * beta * (xi + si) * t)
            .collect()
    })
}

/// Integrates dx/ds = g(x, e^s) from ln t_hi down to ln t_lo.
fn pf_ode_generic(
    x_start: &[f64],
    t_hi: f64,
    t_lo: f64,
    n_steps: usize,
    method: OdeMethod,
    g: impl Fn(&[f64], f64) -> Vec<f64>,
) -> Result<Vec<f64>, SamplerError> {
    assert!(t_hi > t_lo && t_lo > 0.0 && n_steps >= 1);
    let s_hi = t_hi.ln();
    let s_lo = t_lo.ln();
    let h = (s_lo - s_hi) / n_steps as f64; // negative
    let mut x = x_start.to_vec();
    for i in 0..n_steps {
        let s0 = s_hi + h * i as f64;
        let s1 = s0 + h;
        match method {
            OdeMethod::Heun => {
                let k1 = g(&x, s0.exp());
                let mut xe = x.clone();
                vm::axpy(&mut xe, h, &k1);
                let k2 = g(&xe, s1.exp());
                for (xi, (a, b)) in x.iter_mut().zip(k1.iter().zip(&k2)) {
                    *xi += 0.5 * h * (a + b);
                }
            }
            OdeMethod::Rk4 => {
                let sm = 0.5 * (s0 + s1);
                let k1 = g(&x, s0.exp());
                let mut x2 = x.clone();
                vm::axpy(&mut x2, 0.5 * h, &k1);
                let k2 = g(&x2, sm.exp());
                let mut x3 = x.clone();
                vm::axpy(&mut x3, 0.5 * h, &k2);
                let k3 = g(&x3, sm.exp());
                let mut x4 = x.clone();
                vm::axpy(&mut x4, h, &k3);
                let k4 = g(&x4, s1.exp());
                for (i, xi) in x.iter_mut().enumerate() {
                    *xi += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        check_finite(&x, s1.exp())?;
    }
    Ok(x)
}

/// Full hybrid sampler: prior draw at T, reverse SDE T -> t0, then the
/// probability-flow ODE t0 -> tau. VE fields start from N(0, T I); VP fields
/// from N(0, I).
pub fn hybrid_sample(
    field: &ScoreField,
    n: usize,
    cfg: &SamplerConfig,
    rng: &mut StdRng,
) -> Result<Vec<Vec<f64>>, SamplerError> {
    (0..n).map(|_| hybrid_sample_one(field, cfg, rng)).collect()
}

fn hybrid_sample_one(
    field: &ScoreField,
    cfg: &SamplerConfig,
    rng: &mut StdRng,
) -> Result<Vec<f64>, SamplerError> {
    let dim = field_dim(field);
    match cfg.schedule {
        NoiseSchedule::Ve { t_max, .. } => {
            let sd = t_max.sqrt();
            let x_t: Vec<f64> =
                (0..dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
            let x0 = reverse_sde_run(field, &x_t, t_max, cfg.t_terminal, cfg.n_sde_steps, rng)?;
            pf_ode_run(field, &x0, cfg.t_terminal, cfg.tau, cfg.n_ode_steps, cfg.method)
        }
        NoiseSchedule::Vp { .. } => {
            let x_t: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let x0 = reverse_sde_run_vp(
                field,
                &cfg.schedule,
                &x_t,
                cfg.schedule.t_range().1,
                cfg.t_terminal,
                cfg.n_sde_steps,
                rng,
            )?;
            pf_ode_run_vp(
                field,
                &cfg.schedule,
                &x0,
                cfg.t_terminal,
                cfg.tau,
                cfg.n_ode_steps,
                cfg.method,
            )
        }
    }
}

/// Parallel hybrid sampling with one independent seeded stream per chain;
/// deterministic given `master_seed` regardless of thread schedule.
pub fn hybrid_sample_batch(
    field: &ScoreField,
    n: usize,
    cfg: &SamplerConfig,
    master_seed: u64,
) -> Result<Vec<Vec<f64>>, SamplerError> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = StdRng::seed_from_u64(
                master_seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1),
            );
            hybrid_sample_one(field, cfg, &mut rng)
        })
        .collect()
}

fn field_dim(field: &ScoreField) -> usize {
    match field {
        ScoreField::Oracle { atoms, .. } | ScoreField::OracleVp { atoms, .. } => atoms[0].len(),
        ScoreField::Projection { source, .. } => match source {
            crate::score::ProjectionSource::Exact(m) => m.ambient_dim(),
            crate::score::ProjectionSource::Potential(p) => p.input_dim(),
        },
        ScoreField::Learned { net, .. } => net.cfg.input_dim,
        ScoreField::Perturbed { base, .. } => field_dim(base),
    }
}

/// Annealed Langevin dynamics: `levels` noise levels linearly spaced from
/// `t_hi` down to `t_lo`, `steps_per_level` updates
/// `x <- x + eta s + sqrt(2 eta) xi` with `eta = step_scale * t`.
/// Outputs are optionally projected onto a manifold for evaluation.
#[allow(clippy::too_many_arguments)]
pub fn annealed_langevin(
    field: &ScoreField,
    n: usize,
    levels: usize,
    steps_per_level: usize,
    t_hi: f64,
    t_lo: f64,
    step_scale: f64,
    rng: &mut StdRng,
    project_to: Option<&Manifold>,
) -> Result<Vec<Vec<f64>>, SamplerError> {
    assert!(levels >= 1 && t_hi >= t_lo && t_lo > 0.0);
    let dim = field_dim(field);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for li in 0..levels {
            let t = if levels == 1 {
                t_lo
            } else {
                t_hi + (t_lo - t_hi) * li as f64 / (levels - 1) as f64
            };
            let eta = step_scale * t;
            let noise_sd = (2.0 * eta).sqrt();
            for _ in 0..steps_per_level {
                let s = field.eval(&x, t);
                for (xi, si) in x.iter_mut().zip(&s) {
                    *xi += eta * si + noise_sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
            check_finite(&x, t)?;
        }
        if let Some(m) = project_to {
            if let Ok(p) = m.project(&x) {
                x = p;
            }
        }
        out.push(x);
    }
    Ok(out)
}

/// Parallel annealed Langevin with per-chain streams.
#[allow(clippy::too_many_arguments)]
pub fn annealed_langevin_batch(
    field: &ScoreField,
    n: usize,
    levels: usize,
    steps_per_level: usize,
    t_hi: f64,
    t_lo: f64,
    step_scale: f64,
    master_seed: u64,
    project_to: Option<&Manifold>,
) -> Result<Vec<Vec<f64>>, SamplerError> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = StdRng::seed_from_u64(
                master_seed ^ (i as u64).wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(7),
            );
            annealed_langevin(field, 1, levels, steps_per_level, t_hi, t_lo, step_scale, &mut rng, project_to)
                .map(|mut v| v.pop().expect("one chain"))
        })
        .collect()
}
