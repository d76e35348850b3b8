//! Command-line interface: TOML-configured experiment runners over the
//! library. Exit codes: 0 success, 2 usage/configuration error, 3 numerical
//! failure.

use crate::coefficients::SdeModel;
use crate::error::{Error, Result};
use crate::fk_pde::{solve_fk, Grid1D, SolutionField, SolverOptions};
use crate::gallery;
use crate::identify::{
    self, distinguishability_test, DistinguishOptions, JointOptions, ReconstructionResult,
};
use crate::observable::Observable;
use crate::observe::{self, ObsKind, ObservationConfig, ObservationSet, Source};
use crate::sde_sim;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "sde-ident",
    version,
    about = "Simulation and coefficient identification for scalar diffusions"
)]
pub struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker thread count (default: all cores). Results are identical for
    /// any value.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Lists the built-in model gallery.
    Models {
        /// Prints full details and the serialized form of one model.
        #[arg(long)]
        show: Option<String>,
    },
    /// Monte Carlo moment estimation.
    Simulate,
    /// Solves the backward Kolmogorov equation.
    Solve,
    /// Materializes an observation set.
    Observe,
    /// Reconstructs coefficients from observations.
    Identify,
    /// Compares two models on an observation window.
    Distinguish,
}

// No `deny_unknown_fields` here: it cannot be combined with `flatten`, and
// unknown parameter names are rejected by the gallery builder instead.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: Option<String>,
    pub file: Option<String>,
    #[serde(flatten)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub t_max: f64,
    pub nt: usize,
}

fn default_f() -> String {
    "s".into()
}
fn default_n_paths() -> usize {
    100_000
}
fn default_dt_max() -> f64 {
    1e-3
}
fn default_seed() -> u64 {
    0
}
fn default_true() -> bool {
    true
}
fn default_output() -> String {
    "csv".into()
}
fn default_kind() -> String {
    "O_f".into()
}
fn default_source() -> String {
    "pde".into()
}
fn default_h_deriv() -> f64 {
    0.01
}
fn default_method() -> String {
    "drift".into()
}
fn default_n_nodes() -> usize {
    7
}
fn default_node_margin() -> f64 {
    0.1
}
fn default_reg_weight() -> f64 {
    1e-8
}
fn default_max_iters() -> usize {
    200
}
fn default_threshold() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub x0: f64,
    pub t_grid: Vec<f64>,
    #[serde(default = "default_f")]
    pub f: String,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSpec {
    #[serde(default = "default_f")]
    pub f: String,
    #[serde(default = "default_true")]
    pub monotone: bool,
    /// `csv`, `binary`, or `both`.
    #[serde(default = "default_output")]
    pub output: String,
}

impl Default for SolveSpec {
    fn default() -> Self {
        SolveSpec {
            f: default_f(),
            monotone: true,
            output: default_output(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserveSpec {
    /// `O_f`, `O_k`, `O_v`, or `O_prime`.
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default)]
    pub k: Option<u32>,
    #[serde(default)]
    pub x0: Option<f64>,
    pub epsilon: f64,
    pub omega: [f64; 2],
    pub n_t: usize,
    pub n_x: usize,
    #[serde(default = "default_f")]
    pub f: String,
    /// `pde` or `mc`.
    #[serde(default = "default_source")]
    pub source: String,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
    #[serde(default = "default_h_deriv")]
    pub h_deriv: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifySpec {
    /// `drift`, `diffusion`, `variance`, or `joint`.
    #[serde(default = "default_method")]
    pub method: String,
    pub epsilon: f64,
    pub omega: [f64; 2],
    pub n_t: usize,
    pub n_x: usize,
    #[serde(default = "default_source")]
    pub source: String,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_n_nodes")]
    pub n_nodes: usize,
    #[serde(default = "default_node_margin")]
    pub node_margin: f64,
    #[serde(default = "default_reg_weight")]
    pub reg_weight: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSpec {
    /// `drift` or `sigma_sq`.
    pub target: String,
    pub center: f64,
    pub half_width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistinguishSpec {
    #[serde(default = "default_f")]
    pub f: String,
    pub epsilon: f64,
    pub omega: [f64; 2],
    pub n_t: usize,
    pub n_x: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Built from `model` when `model_b` is absent.
    #[serde(default)]
    pub perturb: Option<PerturbSpec>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub model_b: Option<ModelSpec>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub simulate: Option<SimulateSpec>,
    #[serde(default)]
    pub solve: Option<SolveSpec>,
    #[serde(default)]
    pub observe: Option<ObserveSpec>,
    #[serde(default)]
    pub identify: Option<IdentifySpec>,
    #[serde(default)]
    pub distinguish: Option<DistinguishSpec>,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let path = path.ok_or_else(|| Error::Usage("this command needs --config".into()))?;
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("bad configuration: {e}")))
}

fn build_model(spec: Option<&ModelSpec>, section: &str) -> Result<SdeModel<f64>> {
    let spec = spec
        .ok_or_else(|| Error::Config(format!("configuration needs a [{section}] section")))?;
    match (&spec.name, &spec.file) {
        (Some(name), None) => gallery::build(name, &spec.params),
        (None, Some(file)) => {
            if !spec.params.is_empty() {
                return Err(Error::Config(format!(
                    "[{section}] cannot combine `file` with parameter overrides"
                )));
            }
            SdeModel::from_text(&fs::read_to_string(file)?)
        }
        _ => Err(Error::Config(format!(
            "[{section}] needs exactly one of `name` or `file`"
        ))),
    }
}

fn build_grid(spec: Option<&GridSpec>) -> Result<Grid1D<f64>> {
    let g = spec.ok_or_else(|| Error::Config("configuration needs a [grid] section".into()))?;
    Grid1D::new(g.x_min, g.x_max, g.nx, g.t_max, g.nt)
}

fn obs_kind(spec: &ObserveSpec) -> Result<ObsKind<f64>> {
    match spec.kind.as_str() {
        "O_f" => Ok(ObsKind::F),
        "O_k" => Ok(ObsKind::K(spec.k.ok_or_else(|| {
            Error::Config("kind O_k needs the `k` field".into())
        })?)),
        "O_v" => Ok(ObsKind::V),
        "O_prime" => Ok(ObsKind::Prime(spec.x0.ok_or_else(|| {
            Error::Config("kind O_prime needs the `x0` field".into())
        })?)),
        other => Err(Error::Config(format!("unknown observation kind '{other}'"))),
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(out: Option<&Path>) -> Result<Self> {
        let dir = out.unwrap_or_else(|| Path::new("out")).to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(Outputs {
            dir,
            files: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> Result<fs::File> {
        self.files.push(name.to_string());
        Ok(fs::File::create(self.dir.join(name))?)
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.files.push(name.to_string());
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }

    fn finish(mut self, command: &str, config: Option<&Config>) -> Result<()> {
        if let Some(config) = config {
            let resolved = toml::to_string_pretty(config)
                .map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))?;
            self.write_text("resolved_config.toml", &resolved)?;
        }
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut manifest = format!("command: {command}\nunix_time: {timestamp}\nfiles:\n");
        for f in &self.files {
            manifest.push_str(&format!("  - {f}\n"));
        }
        fs::write(self.dir.join("manifest.txt"), manifest)?;
        Ok(())
    }
}

fn run_models(show: Option<&str>) -> Result<()> {
    match show {
        None => {
            for e in gallery::ENTRIES {
                println!("{:<14} {}", e.name, e.summary);
            }
        }
        Some(name) => {
            let e = gallery::entry(name)
                .ok_or_else(|| Error::Usage(format!("unknown gallery model '{name}'")))?;
            println!("name: {}", e.name);
            println!("summary: {}", e.summary);
            println!("form: {}", e.form);
            println!("defaults:");
            for (p, v) in e.params {
                println!("  {p} = {v}");
            }
            let model: SdeModel<f64> = gallery::build(name, &BTreeMap::new())?;
            println!("serialized:");
            print!("{}", model.to_text());
            println!("fingerprint: {}", model.fingerprint());
        }
    }
    Ok(())
}

fn run_simulate(cli: &Cli, config: &Config) -> Result<()> {
    let spec = config
        .simulate
        .as_ref()
        .ok_or_else(|| Error::Config("configuration needs a [simulate] section".into()))?;
    let model = build_model(config.model.as_ref(), "model")?;
    let seed = cli.seed.unwrap_or(spec.seed);
    let estimates = if spec.f == "variance" {
        sde_sim::mc_variance(&model, spec.x0, &spec.t_grid, spec.n_paths, seed, spec.dt_max)?
    } else {
        let f = Observable::from_label(&spec.f)?;
        sde_sim::mc_moment(&model, spec.x0, &spec.t_grid, &f, spec.n_paths, seed, spec.dt_max)?
    };
    let mut outputs = Outputs::new(cli.out.as_deref())?;
    sde_sim::write_moment_csv(&estimates, outputs.create("moments.csv")?)?;
    let clamped = sde_sim::mc_clamp_count(
        &model,
        spec.x0,
        &spec.t_grid,
        spec.n_paths.min(1000),
        seed,
        spec.dt_max,
    )?;
    outputs.write_text(
        "simulate_report.txt",
        &format!(
            "model_fingerprint: {}\nn_paths: {}\nseed: {}\nclamped_paths_probe: {}\n",
            model.fingerprint(),
            spec.n_paths,
            seed,
            clamped
        ),
    )?;
    outputs.finish("simulate", Some(config))
}

fn run_solve(cli: &Cli, config: &Config) -> Result<()> {
    let spec = config.solve.clone().unwrap_or_default();
    let model = build_model(config.model.as_ref(), "model")?;
    let grid = build_grid(config.grid.as_ref())?;
    let f = Observable::from_label(&spec.f)?;
    let opts = SolverOptions {
        monotone: spec.monotone,
        ..SolverOptions::default()
    };
    let field = solve_fk(&model, &f, &grid, &opts)?;
    let mut outputs = Outputs::new(cli.out.as_deref())?;
    match spec.output.as_str() {
        "csv" => field.write_csv(outputs.create("field.csv")?)?,
        "binary" => field.write_binary(outputs.create("field.bin")?)?,
        "both" => {
            field.write_csv(outputs.create("field.csv")?)?;
            field.write_binary(outputs.create("field.bin")?)?;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown solve output '{other}' (csv, binary, both)"
            )))
        }
    }
    outputs.finish("solve", Some(config))
}

fn materialize(
    model: &SdeModel<f64>,
    grid_spec: Option<&GridSpec>,
    obs_config: &ObservationConfig<f64>,
    f: &Observable<f64>,
    source: &str,
    n_paths: usize,
    seed: u64,
    dt_max: f64,
    h_deriv: f64,
) -> Result<ObservationSet<f64>> {
    match source {
        "mc" => observe::extract(
            Source::MonteCarlo {
                model,
                n_paths,
                seed,
                dt_max,
                h_deriv,
            },
            obs_config,
            f,
        ),
        "pde" => {
            let grid = build_grid(grid_spec)?;
            if matches!(obs_config.kind, ObsKind::V) {
                let mean = solve_fk(model, &Observable::identity(), &grid, &SolverOptions::default())?;
                let second = solve_fk(model, &Observable::square(), &grid, &SolverOptions::default())?;
                observe::extract(
                    Source::VarianceFields {
                        mean: &mean,
                        second: &second,
                    },
                    obs_config,
                    f,
                )
            } else {
                let field = solve_fk(model, f, &grid, &SolverOptions::default())?;
                observe::extract(Source::Field(&field), obs_config, f)
            }
        }
        other => Err(Error::Config(format!(
            "unknown observation source '{other}' (pde, mc)"
        ))),
    }
}

fn run_observe(cli: &Cli, config: &Config) -> Result<()> {
    let spec = config
        .observe
        .as_ref()
        .ok_or_else(|| Error::Config("configuration needs an [observe] section".into()))?;
    let model = build_model(config.model.as_ref(), "model")?;
    let kind = obs_kind(spec)?;
    let f = match &kind {
        ObsKind::K(k) => Observable::Monomial(*k),
        _ => Observable::from_label(&spec.f)?,
    };
    let obs_config = ObservationConfig::new(
        spec.epsilon,
        (spec.omega[0], spec.omega[1]),
        spec.n_t,
        spec.n_x,
        kind,
    )?;
    let seed = cli.seed.unwrap_or(spec.seed);
    let set = materialize(
        &model,
        config.grid.as_ref(),
        &obs_config,
        &f,
        &spec.source,
        spec.n_paths,
        seed,
        spec.dt_max,
        spec.h_deriv,
    )?;
    let mut outputs = Outputs::new(cli.out.as_deref())?;
    observe::write_observation_csv(&set, outputs.create("observations.csv")?)?;
    outputs.finish("observe", Some(config))
}

fn identify_report(rec: &ReconstructionResult<f64>) -> String {
    let mut s = format!("method: {}\nn_nodes: {}\n", rec.method, rec.x_nodes.len());
    for (k, v) in &rec.diagnostics {
        s.push_str(&format!("{k}: {v}\n"));
    }
    let flagged = rec.row_flags.iter().filter(|f| !f.is_empty()).count();
    s.push_str(&format!("flagged_nodes: {flagged}\n"));
    s
}

fn run_identify(cli: &Cli, config: &Config) -> Result<()> {
    let spec = config
        .identify
        .as_ref()
        .ok_or_else(|| Error::Config("configuration needs an [identify] section".into()))?;
    let model = build_model(config.model.as_ref(), "model")?;
    let seed = cli.seed.unwrap_or(spec.seed);
    let omega = (spec.omega[0], spec.omega[1]);
    let lattice = |kind: ObsKind<f64>| {
        ObservationConfig::new(spec.epsilon, omega, spec.n_t, spec.n_x, kind)
    };
    let obs = |kind: ObsKind<f64>, f: &Observable<f64>, seed_offset: u64| -> Result<_> {
        materialize(
            &model,
            config.grid.as_ref(),
            &lattice(kind)?,
            f,
            &spec.source,
            spec.n_paths,
            seed.wrapping_add(seed_offset),
            spec.dt_max,
            default_h_deriv(),
        )
    };
    let rec = match spec.method.as_str() {
        "drift" => {
            let m1 = obs(ObsKind::K(1), &Observable::identity(), 0)?;
            identify::recover_drift_short_time(&m1)?
        }
        "diffusion" => {
            let m1 = obs(ObsKind::K(1), &Observable::identity(), 0)?;
            let m2 = obs(ObsKind::K(2), &Observable::square(), 1)?;
            identify::recover_diffusion_short_time(&m1, &m2)?
        }
        "variance" => {
            let v = obs(ObsKind::V, &Observable::identity(), 0)?;
            identify::recover_diffusion_variance_slope(&v)?
        }
        "joint" => {
            let m1 = obs(ObsKind::K(1), &Observable::identity(), 0)?;
            let m2 = obs(ObsKind::K(2), &Observable::square(), 1)?;
            let short = identify::recover_diffusion_short_time(&m1, &m2)?;
            let lo = omega.0 - spec.node_margin;
            let hi = omega.1 + spec.node_margin;
            let n = spec.n_nodes.max(2);
            let node_xs: Vec<f64> = (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect();
            // Start from the short-time profiles, extended constantly
            // beyond the window.
            let interp = |xs: &[f64], ys: &[f64], x: f64| -> f64 {
                if x <= xs[0] {
                    return ys[0];
                }
                if x >= xs[xs.len() - 1] {
                    return ys[ys.len() - 1];
                }
                let i = xs.partition_point(|&v| v <= x) - 1;
                let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
                ys[i] * (1.0 - w) + ys[i + 1] * w
            };
            let b0 = short.b_hat.as_ref().unwrap();
            let s0 = short.sigma_hat.as_ref().unwrap();
            let initial_b: Vec<f64> =
                node_xs.iter().map(|&x| interp(&short.x_nodes, b0, x)).collect();
            let initial_sigma: Vec<f64> =
                node_xs.iter().map(|&x| interp(&short.x_nodes, s0, x)).collect();
            let grid = build_grid(config.grid.as_ref())?;
            let work_interval = (grid.x_min, grid.x_max);
            let opts = JointOptions {
                node_xs,
                initial_b,
                initial_sigma,
                grid,
                work_interval,
                sigma_floor: model.sigma_floor,
                reg_weight: spec.reg_weight,
                max_iters: spec.max_iters,
            };
            identify::recover_joint_global(&m1, &m2, &opts)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown identify method '{other}' (drift, diffusion, variance, joint)"
            )))
        }
    };
    let mut outputs = Outputs::new(cli.out.as_deref())?;
    identify::write_reconstruction_csv(&rec, outputs.create("reconstruction.csv")?)?;
    outputs.write_text("identify_report.txt", &identify_report(&rec))?;
    outputs.finish("identify", Some(config))
}

fn run_distinguish(cli: &Cli, config: &Config) -> Result<()> {
    let spec = config
        .distinguish
        .as_ref()
        .ok_or_else(|| Error::Config("configuration needs a [distinguish] section".into()))?;
    let model_a = build_model(config.model.as_ref(), "model")?;
    let model_b = match (&config.model_b, &spec.perturb) {
        (Some(spec_b), None) => build_model(Some(spec_b), "model_b")?,
        (None, Some(p)) => match p.target.as_str() {
            "drift" => identify::perturb_drift(&model_a, p.center, p.half_width, p.height)?,
            "sigma_sq" => identify::perturb_sigma_sq(&model_a, p.center, p.half_width, p.height)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown perturbation target '{other}' (drift, sigma_sq)"
                )))
            }
        },
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "give either [model_b] or [distinguish].perturb, not both".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Config(
                "distinguish needs [model_b] or a [distinguish].perturb table".into(),
            ))
        }
    };
    let f = Observable::from_label(&spec.f)?;
    let kind = match &f {
        Observable::Monomial(k) => ObsKind::K(*k),
        _ => ObsKind::F,
    };
    let obs_config = ObservationConfig::new(
        spec.epsilon,
        (spec.omega[0], spec.omega[1]),
        spec.n_t,
        spec.n_x,
        kind,
    )?;
    let grid = build_grid(config.grid.as_ref())?;
    let opts = DistinguishOptions {
        grid,
        threshold: spec.threshold,
        solver: SolverOptions::default(),
    };
    let report = distinguishability_test(&model_a, &model_b, &f, &obs_config, &opts)?;
    let mut outputs = Outputs::new(cli.out.as_deref())?;
    outputs.write_text("distinguish_report.txt", &report.report_text())?;
    report.write_difference_csv(outputs.create("difference.csv")?)?;
    print!("{}", report.report_text());
    outputs.finish("distinguish", Some(config))
}

/// Runs the parsed command; the binary maps errors to exit codes.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // Ignore the error when a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Models { show } => run_models(show.as_deref()),
        Command::Simulate => run_simulate(cli, &load_config(cli.config.as_deref())?),
        Command::Solve => run_solve(cli, &load_config(cli.config.as_deref())?),
        Command::Observe => run_observe(cli, &load_config(cli.config.as_deref())?),
        Command::Identify => run_identify(cli, &load_config(cli.config.as_deref())?),
        Command::Distinguish => run_distinguish(cli, &load_config(cli.config.as_deref())?),
    }
}

/// Allows a `SolutionField` written by `solve` to be inspected from tests.
pub fn read_field(path: &Path) -> Result<SolutionField<f64>> {
    SolutionField::read_binary(fs::File::open(path)?)
}
