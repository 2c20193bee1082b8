//! Preset training runs: score-network training on sampled manifold data
//! with periodic metric rows (loss, alignment, manifold error, memorization)
//! and on-disk artifacts (trace CSV, checkpoint, summary JSON, frozen
//! config).

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::diagnostics::memorization_fraction;
use crate::geometry::Manifold;
use crate::nn::{AdamW, NetConfig, ScoreNet};
use crate::sampler::{annealed_langevin_batch, NoiseSchedule};
use crate::score::{alignment, ScoreField};

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub alignment: f64,
    pub manifold_error: f64,
    pub memorization: f64,
    pub eikonal_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize)]
pub struct MetricTrace {
    pub rows: Vec<TraceRow>,
}

impl MetricTrace {
    pub fn push(&mut self, row: TraceRow) {
        if let Some(last) = self.rows.last() {
            assert!(row.step > last.step, "trace steps must strictly increase");
        }
        assert!(
            row.loss.is_finite()
                && row.alignment.is_finite()
                && row.manifold_error.is_finite()
                && row.memorization.is_finite(),
            "non-finite metric at step {}",
            row.step
        );
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,alignment,manifold_error,memorization,eikonal_residual\n");
        for r in &self.rows {
            let eik = r.eikonal_residual.map(|v| format!("{v}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.loss, r.alignment, r.manifold_error, r.memorization, eik
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Option<Self> {
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 5 {
                return None;
            }
            rows.push(TraceRow {
                step: f[0].parse().ok()?,
                loss: f[1].parse().ok()?,
                alignment: f[2].parse().ok()?,
                manifold_error: f[3].parse().ok()?,
                memorization: f[4].parse().ok()?,
                eikonal_residual: f.get(5).and_then(|s| s.parse().ok()),
            });
        }
        Some(MetricTrace { rows })
    }

    /// (first step where alignment exceeds 0.9 of its final value,
    ///  first step where memorization exceeds 0.5 of its final value).
    pub fn trend_crossings(&self) -> (Option<u64>, Option<u64>) {
        let last = match self.rows.last() {
            Some(r) => r,
            None => return (None, None),
        };
        let a_thresh = 0.9 * last.alignment;
        let m_thresh = 0.5 * last.memorization;
        let a = self.rows.iter().find(|r| r.alignment >= a_thresh).map(|r| r.step);
        let m = if last.memorization > 0.0 {
            self.rows.iter().find(|r| r.memorization >= m_thresh && r.memorization > 0.0).map(|r| r.step)
        } else {
            None
        };
        (a, m)
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RunSummary {
    pub preset: String,
    pub scale: f64,
    pub seed: u64,
    pub steps: usize,
    pub hidden: usize,
    pub n_train: usize,
    pub final_loss: f64,
    pub final_alignment: f64,
    pub final_manifold_error: f64,
    pub final_memorization: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub trace: MetricTrace,
}

fn sub_seed(master: u64, tag: u64) -> u64 {
    master ^ tag.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x632be59bd9b4e019)
}

/// Trains a score network per the (scaled) preset and records the metric
/// trace. When `out_dir` is given, writes `trace.csv`, `summary.json`,
/// `net.ckpt` and a frozen `config.txt`.
pub fn run_preset(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunResult, String> {
    let started = std::time::Instant::now();
    let scaled = cfg.scaled().map_err(|e| e.to_string())?;
    let p = scaled.base;
    let m = cfg.manifold.build();
    let density = cfg.data.to_density();
    let dim = m.ambient_dim();

    let mut data_rng = StdRng::seed_from_u64(sub_seed(cfg.seed, 1));
    let train_set = m.sample_surface(&density, &mut data_rng, scaled.n_train);

    let schedule = NoiseSchedule::vp(cfg.beta_min, p.beta_max, p.t_min);
    let mut net_rng = StdRng::seed_from_u64(sub_seed(cfg.seed, 2));
    let mut net = ScoreNet::new(NetConfig::new(dim, scaled.hidden, p.layers), &schedule, &mut net_rng);
    let mut opt = AdamW::new(&net, p.lr, p.weight_decay);

    // fixed probe points in the tube for the alignment metric
    let mut probe_rng = StdRng::seed_from_u64(sub_seed(cfg.seed, 3));
    let tube = 0.25 * m.reach().value();
    let probes: Vec<Vec<f64>> = (0..64).map(|_| m.sample_tube_point(tube, &mut probe_rng)).collect();
    let t_probe = 0.1;

    let mut batch_rng = StdRng::seed_from_u64(sub_seed(cfg.seed, 4));
    let mut trace = MetricTrace::default();
    let mut last_loss = f64::NAN;

    let eval = |net: &ScoreNet, step: u64, loss: f64, points: usize, trace: &mut MetricTrace| {
        let field = ScoreField::learned(Arc::new(net.clone()), schedule);
        let mut align_acc = 0.0;
        let mut align_n = 0usize;
        for x in &probes {
            if let Ok(a) = alignment(&field, &m, x, t_probe) {
                align_acc += a;
                align_n += 1;
            }
        }
        let samples = annealed_langevin_batch(
            &field,
            points,
            16,
            60,
            1.0,
            p.t_min,
            0.05,
            sub_seed(cfg.seed, 1000 + step),
            None,
        )
        .map_err(|e| e.to_string())?;
        let manifold_error =
            samples.iter().map(|x| m.dist_to_manifold(x)).sum::<f64>() / samples.len() as f64;
        let projected: Vec<Vec<f64>> = samples
            .iter()
            .map(|x| m.project(x).unwrap_or_else(|_| x.clone()))
            .collect();
        let memo = memorization_fraction(&projected, &train_set)
            .map(|r| r.fraction_memorized)
            .unwrap_or(0.0);
        trace.push(TraceRow {
            step,
            loss,
            alignment: if align_n > 0 { align_acc / align_n as f64 } else { 0.0 },
            manifold_error,
            memorization: memo,
            eikonal_residual: None,
        });
        Ok::<(), String>(())
    };

    // initial row (step 0, loss of the first batch without an update)
    {
        let (x0, eps, ts) = draw_batch(&train_set, cfg.batch, &schedule, &mut batch_rng.clone());
        let (loss0, _) = net.dsm_loss_and_grad(&x0, &eps, &ts, &schedule);
        eval(&net, 0, loss0, cfg.eval_points, &mut trace)?;
    }

    for step in 1..=scaled.steps {
        let (x0, eps, ts) = draw_batch(&train_set, cfg.batch, &schedule, &mut batch_rng);
        let (loss, grads) = net.dsm_loss_and_grad(&x0, &eps, &ts, &schedule);
        assert!(loss.is_finite(), "non-finite loss at step {step}");
        opt.apply(&mut net, grads);
        last_loss = loss;
        let is_last = step == scaled.steps;
        if step % cfg.eval_interval.max(1) == 0 && !is_last {
            eval(&net, step as u64, loss, cfg.eval_points, &mut trace)?;
        } else if is_last {
            eval(&net, step as u64, loss, cfg.final_eval_points, &mut trace)?;
        }
    }

    let last = trace.rows.last().expect("at least the initial row");
    let summary = RunSummary {
        preset: cfg.preset.clone(),
        scale: cfg.scale,
        seed: cfg.seed,
        steps: scaled.steps,
        hidden: scaled.hidden,
        n_train: scaled.n_train,
        final_loss: if last_loss.is_finite() { last_loss } else { last.loss },
        final_alignment: last.alignment,
        final_manifold_error: last.manifold_error,
        final_memorization: last.memorization,
        wall_seconds: started.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        std::fs::write(dir.join("trace.csv"), trace.to_csv()).map_err(|e| e.to_string())?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        std::fs::write(dir.join("config.txt"), cfg.serialize()).map_err(|e| e.to_string())?;
        net.save_checkpoint(&dir.join("net.ckpt"), scaled.steps as u64, &schedule)
            .map_err(|e| e.to_string())?;
    }

    Ok(RunResult { summary, trace })
}

fn draw_batch(
    train: &[Vec<f64>],
    batch: usize,
    schedule: &NoiseSchedule,
    rng: &mut StdRng,
) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let dim = train[0].len();
    let (t_lo, t_hi) = schedule.t_range();
    let mut x0 = Array2::zeros((batch, dim));
    let mut eps = Array2::zeros((batch, dim));
    let mut ts = Vec::with_capacity(batch);
    for i in 0..batch {
        let p = &train[rng.random_range(0..train.len())];
        for j in 0..dim {
            x0[(i, j)] = p[j];
            eps[(i, j)] = rng.sample(StandardNormal);
        }
        ts.push(rng.random_range(t_lo..t_hi));
    }
    (x0, eps, ts)
}

/// Mean distance of annealed samples to the manifold plus memorization, for
/// a trained checkpoint on disk.
pub fn eval_checkpoint(
    ckpt: &Path,
    m: &Manifold,
    train: &[Vec<f64>],
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64), String> {
    let (net, _, schedule) = ScoreNet::load_checkpoint(ckpt).map_err(|e| e.to_string())?;
    let (t_lo, _) = schedule.t_range();
    let field = ScoreField::learned(Arc::new(net), schedule);
    let samples =
        annealed_langevin_batch(&field, n_samples, 16, 60, 1.0, t_lo, 0.05, seed, None)
            .map_err(|e| e.to_string())?;
    let merr = samples.iter().map(|x| m.dist_to_manifold(x)).sum::<f64>() / samples.len() as f64;
    let projected: Vec<Vec<f64>> =
        samples.iter().map(|x| m.project(x).unwrap_or_else(|_| x.clone())).collect();
    let memo = memorization_fraction(&projected, train)
        .map(|r| r.fraction_memorized)
        .map_err(|e| e.to_string())?;
    Ok((merr, memo))
}
