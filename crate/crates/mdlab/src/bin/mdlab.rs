//! Experiment runner: preset training, verification suites, sampling from
//! checkpoints, coverage and KL-rate reports, and SVG trace plots.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::rngs::StdRng;
use rand::SeedableRng;

use mdlab::config::{DataDist, ManifoldSpec, RunConfig};
use mdlab::diagnostics::{coverage_report, empirical_covering_radius, projection_error};
use mdlab::geometry::SurfaceDensity;
use mdlab::measures::smoothing_rate_experiment;
use mdlab::nn::ScoreNet;
use mdlab::plot::emit_plots;
use mdlab::sampler::annealed_langevin_batch;
use mdlab::score::ScoreField;
use mdlab::suites::run_suite;
use mdlab::train::{run_preset, MetricTrace};

#[derive(Parser)]
#[command(name = "mdlab", about = "score-diffusion laboratory on synthetic manifolds")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a preset configuration and write run artifacts.
    RunPreset {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 0.25)]
        scale: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "runs/preset")]
        out: PathBuf,
        /// Manifold tag, e.g. so:3, circle:1:3, sphere:2:1:4, torus:1:0.8:4.
        #[arg(long)]
        manifold: Option<String>,
        /// Data tag: uniform, vonmises:<kappa>:<mean>, projnormal:<sigma>.
        #[arg(long)]
        data: Option<String>,
        /// Optional key = value config file; flags override file values.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a verification suite (or `all`) and write a JSON report.
    TheoremSuite {
        suite: String,
        #[arg(long, default_value = "runs/suites")]
        out: PathBuf,
    },
    /// Sample from a trained checkpoint via annealed Langevin dynamics.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "runs/samples")]
        out: PathBuf,
    },
    /// Coverage report for the empirical-oracle hybrid sampler on a circle.
    Coverage {
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 10_000)]
        n_samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "runs/coverage")]
        out: PathBuf,
    },
    /// The KL smoothing-rate experiment (CSV + summary JSON).
    KlRate {
        #[arg(long, default_value_t = 0.5)]
        t0: f64,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 20_000)]
        n_mc: usize,
        #[arg(long, default_value = "runs/kl_rate")]
        out: PathBuf,
    },
    /// Render SVG panels from a trace.csv.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "runs/plots")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(all_passed) => {
            if all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.cmd {
        Cmd::RunPreset { preset, scale, seed, out, manifold, data, config } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
                    RunConfig::parse(&text).map_err(|e| e.to_string())?
                }
                None => RunConfig::for_preset(&preset, scale, seed).map_err(|e| e.to_string())?,
            };
            cfg.preset = preset;
            cfg.scale = scale;
            cfg.seed = seed;
            if let Some(tag) = manifold {
                cfg.manifold = ManifoldSpec::parse(&tag).map_err(|e| e.to_string())?;
            }
            if let Some(tag) = data {
                cfg.data = DataDist::parse(&tag).map_err(|e| e.to_string())?;
            }
            let result = run_preset(&cfg, Some(&out))?;
            println!(
                "{}: steps={} final loss={:.4} alignment={:.3} manifold_error={:.4} memorization={:.3}",
                cfg.preset,
                result.summary.steps,
                result.summary.final_loss,
                result.summary.final_alignment,
                result.summary.final_manifold_error,
                result.summary.final_memorization,
            );
            let plots = emit_plots(&result.trace).map_err(|e| e.to_string())?;
            for (name, svg) in plots {
                std::fs::write(out.join(&name), svg).map_err(|e| e.to_string())?;
            }
            println!("artifacts written to {}", out.display());
            Ok(true)
        }
        Cmd::TheoremSuite { suite, out } => {
            let reports = run_suite(&suite)?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let mut all = true;
            for r in &reports {
                println!("{}", r.line());
                all &= r.pass;
            }
            let path = out.join(format!("report_{suite}.json"));
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&reports).map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            println!("report written to {}", path.display());
            Ok(all)
        }
        Cmd::Sample { checkpoint, n, seed, out } => {
            let (net, step, schedule) =
                ScoreNet::load_checkpoint(&checkpoint).map_err(|e| e.to_string())?;
            let (t_lo, _) = schedule.t_range();
            let field = ScoreField::learned(Arc::new(net), schedule);
            let samples = annealed_langevin_batch(&field, n, 16, 60, 1.0, t_lo, 0.05, seed, None)
                .map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let mut csv = String::new();
            for s in &samples {
                let row: Vec<String> = s.iter().map(|v| format!("{v}")).collect();
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            std::fs::write(out.join("cloud.csv"), csv).map_err(|e| e.to_string())?;
            let sidecar = serde_json::json!({
                "checkpoint": checkpoint.display().to_string(),
                "checkpoint_step": step,
                "n": n,
                "seed": seed,
                "sampler": {"kind": "annealed_langevin", "levels": 16, "steps_per_level": 60, "step_scale": 0.05},
            });
            std::fs::write(
                out.join("cloud.json"),
                serde_json::to_string_pretty(&sidecar).map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            println!("{n} samples written to {}", out.display());
            Ok(true)
        }
        Cmd::Coverage { n_train, n_samples, seed, out } => {
            use mdlab::geometry::Manifold;
            use mdlab::sampler::{hybrid_sample_batch, NoiseSchedule, OdeMethod, SamplerConfig};
            let m = Manifold::circle(1.0, 2);
            let mut rng = StdRng::seed_from_u64(seed);
            let atoms = m.sample_surface(&SurfaceDensity::Uniform, &mut rng, n_train);
            let delta = 0.25 * empirical_covering_radius(&m, &atoms);
            let tau = (3.0 * delta).powi(2);
            let field = ScoreField::oracle_mixture(atoms.clone(), None);
            let alpha =
                4.0 * projection_error(&field, &m, tau, 2000, 0.25, &mut rng).median;
            let cfg = SamplerConfig {
                schedule: NoiseSchedule::ve(tau, 4.0),
                t_terminal: 0.25,
                tau,
                n_sde_steps: 384,
                n_ode_steps: 384,
                method: OdeMethod::Heun,
            };
            let samples = hybrid_sample_batch(&field, n_samples, &cfg, seed).map_err(|e| e.to_string())?;
            let n_centers = (4.0 * std::f64::consts::PI / delta).ceil() as usize;
            let rep = coverage_report(
                &samples,
                &m,
                &SurfaceDensity::Uniform,
                delta,
                alpha,
                n_centers,
                &mut rng,
            )
            .map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            std::fs::write(
                out.join("coverage.json"),
                serde_json::to_string_pretty(&rep).map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            let mut csv = String::from("center,mass_mu,mass_data\n");
            for (i, c) in rep.per_center.iter().enumerate() {
                csv.push_str(&format!("{i},{},{}\n", c.mass_mu, c.mass_data));
            }
            std::fs::write(out.join("per_center.csv"), csv).map_err(|e| e.to_string())?;
            println!("c_hat = {:.4} over {} centers", rep.c_hat, rep.n_centers);
            Ok(true)
        }
        Cmd::KlRate { t0, seeds, n_mc, out } => {
            use mdlab::geometry::Manifold;
            let m = Manifold::circle(1.0, 3);
            let seed_list: Vec<u64> = (1..=seeds).collect();
            let exp = smoothing_rate_experiment(
                &m,
                &SurfaceDensity::Uniform,
                t0,
                &[32, 64, 128, 256, 512, 1024],
                &seed_list,
                n_mc,
                512,
            )
            .map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let mut csv = String::from("N,seed,kl,se\n");
            for r in &exp.rows {
                csv.push_str(&format!("{},{},{},{}\n", r.n, r.seed, r.kl, r.se));
            }
            std::fs::write(out.join("kl_rate.csv"), csv).map_err(|e| e.to_string())?;
            std::fs::write(
                out.join("summary.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "slope": exp.slope,
                    "ci_half_width": exp.slope_ci_half_width,
                    "medians": exp.medians,
                }))
                .map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            println!("slope = {:.3} +/- {:.3}", exp.slope, exp.slope_ci_half_width);
            Ok(true)
        }
        Cmd::Plot { trace, out } => {
            let text = std::fs::read_to_string(&trace).map_err(|e| e.to_string())?;
            let parsed = MetricTrace::from_csv(&text).ok_or("malformed trace CSV")?;
            let plots = emit_plots(&parsed).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            for (name, svg) in plots {
                std::fs::write(out.join(&name), svg).map_err(|e| e.to_string())?;
            }
            println!("plots written to {}", out.display());
            Ok(true)
        }
    }
}
