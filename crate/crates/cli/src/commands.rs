use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use ising_hs::hs_grid::{build_grid, estimate_all_cells, EstimateConfig, GridEstimate, GridOverrides};
use ising_hs::model::SYMMETRY_TOL;
use ising_hs::models::{ModelParams, ModelRecipe};
use ising_hs::oracle::{brute_force_distribution, brute_force_log_partition};
use ising_hs::spectral::{decompose, SpectralSplit};
use ising_hs::tempering::{sample_with_estimate, SampleConfig, SamplerReport};
use ising_hs::tilt::{fixed_point_residual, TiltConfig, TiltProblem};
use ising_hs::{DiscreteDistribution, IsingError, IsingModel, Result, SeedTree};

use crate::args::{CompareArgs, EstimateArgs, GenModelArgs, Kind, PipelineArgs, SampleArgs};

const ORACLE_MAX_N: usize = 25;

/// `estimate` output; `--cells` reads it back.
#[derive(Serialize, Deserialize)]
pub struct EstimateReport {
    pub model_hash: String,
    pub n: usize,
    pub wall_time: f64,
    #[serde(flatten)]
    pub estimate: GridEstimate,
}

#[derive(Serialize)]
struct SampleLine<'a> {
    sigma: &'a [i8],
    trials: u64,
    steps: u64,
}

#[derive(Serialize)]
struct SampleSummary {
    samples: usize,
    trials: u64,
    acceptance_rate: f64,
    top_level_rate: f64,
    steps_per_trial: u64,
    steps_total: u64,
    trial_budget: u64,
    max_log_accept: f64,
    wall_time: f64,
}

#[derive(Serialize)]
struct CompareReport {
    model_hash: String,
    n: usize,
    kind: Option<String>,
    expected_hard: bool,
    log_z_oracle: f64,
    log_z_hat: f64,
    delta_log_z: f64,
    tv: Option<f64>,
    num_samples: usize,
    tilt_residual: Option<f64>,
    tol_log_z: f64,
    tol_tv: f64,
    tol_residual: f64,
    pass_log_z: bool,
    pass_tv: bool,
    pass_residual: bool,
    pass: bool,
    wall_time: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IsingError + '_ {
    move |source| IsingError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => std::fs::write(p, text).map_err(io_err(p)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .map_err(io_err(Path::new("<stdout>")))
        }
    }
}

fn unit_interval(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(IsingError::InvalidInput(format!("--{name} must lie in (0,1), got {x}")))
    }
}

fn split_c(c: Option<f64>) -> Option<f64> {
    c.filter(|c| c.is_finite())
}

fn grid_overrides(p: &PipelineArgs) -> GridOverrides {
    GridOverrides {
        l: p.grid_l,
        eta: p.grid_eta,
        cell_budget: p.cell_budget,
        force: p.force,
    }
}

fn estimate_config(p: &PipelineArgs, eps: f64) -> EstimateConfig {
    let mut cfg = EstimateConfig::new(eps, p.delta);
    cfg.samples = p.samples;
    cfg.trials = p.trials;
    cfg.glauber_steps = p.glauber_steps;
    cfg.tilt = TiltConfig {
        iterations: p.tilt_iterations,
        ..TiltConfig::default()
    };
    cfg
}

fn run_estimate(
    model: &IsingModel,
    split: &SpectralSplit,
    p: &PipelineArgs,
    eps: f64,
    seed: u64,
) -> Result<GridEstimate> {
    let grid = build_grid(split, eps, &grid_overrides(p))?;
    estimate_all_cells(model, split, &grid, &estimate_config(p, eps), seed)
}

pub fn gen_model(a: &GenModelArgs) -> Result<bool> {
    let recipe = match (&a.recipe, a.kind) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str::<ModelRecipe>(&text).map_err(|e| IsingError::Parse {
                path: path.display().to_string(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?
        }
        (None, Some(kind)) => ModelRecipe {
            params: params_from_flags(kind, a)?,
            seed: a.seed,
        },
        (None, None) => return Err(IsingError::InvalidInput("need --kind or --recipe".into())),
    };
    let model = recipe.build()?;
    let mut text = model.to_json_string();
    text.push('\n');
    emit(a.output.as_deref(), &text)?;
    Ok(true)
}

fn need<T: Copy>(v: Option<T>, flag: &str, kind: &str) -> Result<T> {
    v.ok_or_else(|| IsingError::InvalidInput(format!("--kind {kind} needs --{flag}")))
}

fn params_from_flags(kind: Kind, a: &GenModelArgs) -> Result<ModelParams> {
    Ok(match kind {
        Kind::CurieWeiss => ModelParams::CurieWeiss {
            n: need(a.n, "n", "curie-weiss")?,
            beta: need(a.beta, "beta", "curie-weiss")?,
        },
        Kind::Hopfield => ModelParams::Hopfield {
            beta: need(a.beta, "beta", "hopfield")?,
            patterns: None,
            n: Some(need(a.n, "n", "hopfield")?),
            m: Some(need(a.m, "m", "hopfield")?),
            field: None,
        },
        Kind::SkFerro => ModelParams::SkFerro {
            n: need(a.n, "n", "sk-ferro")?,
            beta1: need(a.beta1, "beta1", "sk-ferro")?,
            beta2: need(a.beta2, "beta2", "sk-ferro")?,
        },
        Kind::Graph => ModelParams::Graph {
            beta: need(a.beta, "beta", "graph")?,
            sign: a.sign,
            adjacency: None,
            n: Some(need(a.n, "n", "graph")?),
            degree: Some(need(a.degree, "degree", "graph")?),
            field: None,
        },
        Kind::Posterior => ModelParams::Posterior {
            lambda: need(a.lambda, "lambda", "posterior")?,
            mu: need(a.mu, "mu", "posterior")?,
            p: need(a.p, "p", "posterior")?,
            a: None,
            b: None,
            n: Some(need(a.n, "n", "posterior")?),
        },
        Kind::SubsetSum => {
            if a.a.is_empty() {
                return Err(IsingError::InvalidInput("--kind subset-sum needs --a".into()));
            }
            ModelParams::SubsetSum {
                a: a.a.clone(),
                beta: need(a.beta, "beta", "subset-sum")?,
                b: a.b,
            }
        }
    })
}

pub fn estimate(a: &EstimateArgs) -> Result<bool> {
    let p = &a.pipeline;
    unit_interval("eps", a.eps)?;
    unit_interval("delta", p.delta)?;
    let start = Instant::now();
    let model = IsingModel::load(&p.model)?;
    let split = decompose(model.j(), split_c(p.c), SYMMETRY_TOL)?;
    let estimate = run_estimate(&model, &split, p, a.eps, p.seed)?;
    let report = EstimateReport {
        model_hash: model.content_hash(),
        n: model.n(),
        wall_time: start.elapsed().as_secs_f64(),
        estimate,
    };
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| IsingError::Numeric(e.to_string()))?;
    text.push('\n');
    emit(p.output.as_deref(), &text)?;
    Ok(true)
}

fn load_cells(path: &Path, model: &IsingModel) -> Result<GridEstimate> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let report: EstimateReport = serde_json::from_str(&text).map_err(|e| IsingError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let hash = model.content_hash();
    if report.model_hash != hash {
        return Err(IsingError::Consistency(format!(
            "{} was computed for model {}, not {hash}",
            path.display(),
            report.model_hash
        )));
    }
    Ok(report.estimate)
}

fn sample_config(p: &PipelineArgs, eps: f64, num_samples: usize, steps: Option<u64>, budget: Option<u64>) -> SampleConfig {
    let mut cfg = SampleConfig::new(eps, p.delta, num_samples);
    cfg.c = split_c(p.c);
    cfg.steps = steps;
    cfg.trial_budget = budget;
    cfg.grid = grid_overrides(p);
    cfg
}

pub fn sample(a: &SampleArgs) -> Result<bool> {
    let p = &a.pipeline;
    unit_interval("eps", a.eps)?;
    unit_interval("delta", p.delta)?;
    let start = Instant::now();
    let model = IsingModel::load(&p.model)?;
    let precomputed = a.cells.as_deref().map(|c| load_cells(c, &model)).transpose()?;
    if a.num_samples == 0 {
        emit(p.output.as_deref(), "")?;
        return Ok(true);
    }
    let split = decompose(model.j(), split_c(p.c), SYMMETRY_TOL)?;
    let estimate = match precomputed {
        Some(e) => e,
        None => {
            let seed = SeedTree::new(p.seed).child("estimate", 0).seed();
            run_estimate(&model, &split, p, std::f64::consts::LN_2, seed)?
        }
    };
    let cfg = sample_config(p, a.eps, a.num_samples, a.steps, a.trial_budget);
    let report = sample_with_estimate(&model, &split, &estimate, &cfg, p.seed)?;
    let text = sample_lines(&report, start.elapsed().as_secs_f64())?;
    emit(p.output.as_deref(), &text)?;
    Ok(true)
}

fn sample_lines(report: &SamplerReport, wall_time: f64) -> Result<String> {
    let ser = |e: serde_json::Error| IsingError::Numeric(e.to_string());
    let mut text = String::new();
    for (sigma, &trials) in report.samples.iter().zip(&report.per_sample_trials) {
        let line = SampleLine {
            sigma: sigma.as_slice(),
            trials,
            steps: trials.saturating_mul(report.steps_per_trial),
        };
        text.push_str(&serde_json::to_string(&line).map_err(ser)?);
        text.push('\n');
    }
    let summary = SampleSummary {
        samples: report.samples.len(),
        trials: report.trials,
        acceptance_rate: report.acceptance_rate,
        top_level_rate: report.top_level_rate,
        steps_per_trial: report.steps_per_trial,
        steps_total: report.steps_total,
        trial_budget: report.trial_budget,
        max_log_accept: report.max_log_accept,
        wall_time,
    };
    text.push_str(&serde_json::to_string(&serde_json::json!({ "summary": summary })).map_err(ser)?);
    text.push('\n');
    Ok(text)
}

/// Largest fixed-point residual over the cells that carry a tilt, with `u`
/// recovered from the stored tilt `−J₋u`.
fn tilt_residual(model: &IsingModel, split: &SpectralSplit, est: &GridEstimate, eps: f64, delta: f64) -> Result<Option<f64>> {
    if !split.has_minus() {
        return Ok(None);
    }
    let mut worst: f64 = 0.0;
    for cell in est.per_cell.iter().filter(|c| !c.is_excluded()) {
        let base = split.spike_field(&cell.y_star) + model.h();
        let problem = TiltProblem::from_split(split, base, eps, delta)?;
        let tilt = DVector::from_column_slice(&cell.tilt);
        let u = problem
            .j_minus
            .clone()
            .lu()
            .solve(&(-tilt))
            .ok_or_else(|| IsingError::Numeric("regularized negative part is singular".into()))?;
        worst = worst.max(fixed_point_residual(&problem, &u)?);
    }
    Ok(Some(worst))
}

pub fn oracle_compare(a: &CompareArgs) -> Result<bool> {
    let p = &a.pipeline;
    unit_interval("eps", a.eps)?;
    unit_interval("tv-eps", a.tv_eps)?;
    unit_interval("delta", p.delta)?;
    let start = Instant::now();
    let model = IsingModel::load(&p.model)?;
    let n = model.n();
    if n > ORACLE_MAX_N {
        return Err(IsingError::Capacity {
            what: "oracle dimension n".into(),
            got: n as u64,
            limit: ORACLE_MAX_N as u64,
        });
    }
    let exact = brute_force_log_partition(&model)?;
    let split = decompose(model.j(), split_c(p.c), SYMMETRY_TOL)?;
    let est = run_estimate(&model, &split, p, a.eps, SeedTree::new(p.seed).child("estimate", 0).seed())?;
    let tv = if a.num_samples > 0 {
        let cfg = sample_config(p, a.tv_eps, a.num_samples, a.steps, a.trial_budget);
        let report = sample_with_estimate(&model, &split, &est, &cfg, p.seed)?;
        let emp = DiscreteDistribution::empirical(n, &report.samples)?;
        Some(emp.tv_distance(&brute_force_distribution(&model)?)?)
    } else {
        None
    };
    let residual = tilt_residual(&model, &split, &est, a.eps, p.delta)?;
    let tol_log_z = a.tol_log_z.unwrap_or(a.eps);
    let delta_log_z = est.log_z_hat - exact;
    let pass_log_z = delta_log_z.abs() <= tol_log_z;
    let pass_tv = tv.is_none_or(|t| t <= a.tol_tv);
    let pass_residual = residual.is_none_or(|r| r <= a.tol_residual);
    let meta = model.meta.as_ref();
    let report = CompareReport {
        model_hash: model.content_hash(),
        n,
        kind: meta.map(|m| m.kind.clone()),
        expected_hard: meta.is_some_and(|m| m.expected_hard),
        log_z_oracle: exact,
        log_z_hat: est.log_z_hat,
        delta_log_z,
        tv,
        num_samples: a.num_samples,
        tilt_residual: residual,
        tol_log_z,
        tol_tv: a.tol_tv,
        tol_residual: a.tol_residual,
        pass_log_z,
        pass_tv,
        pass_residual,
        pass: pass_log_z && pass_tv && pass_residual,
        wall_time: start.elapsed().as_secs_f64(),
    };
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| IsingError::Numeric(e.to_string()))?;
    text.push('\n');
    emit(p.output.as_deref(), &text)?;
    Ok(report.pass)
}
