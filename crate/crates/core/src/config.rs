//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! problem = portfolio
//! problem.k2 = 1
//! tau = 1/6
//! grid.nodes = 51, 51
//! ```

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;
use crate::nag::{Method, SolverConfig};
use crate::problems::{CuckerSmaleParams, PortfolioParams, ProblemParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
    pub time_steps: usize,
}

/// Robustness sweep lattice over `(q_min, q_max)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSpec {
    pub q_min_lo: f64,
    pub q_min_hi: f64,
    pub q_max_lo: f64,
    pub q_max_hi: f64,
    pub steps: usize,
    /// Iterations of each fresh reference run.
    pub reference_iterations: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            q_min_lo: 0.5,
            q_min_hi: 1.5,
            q_max_lo: 1.5,
            q_max_hi: 2.5,
            steps: 11,
            reference_iterations: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub problem: ProblemParams,
    pub method: Method,
    pub grid: GridSpec,
    pub particles: usize,
    pub eval_particles: usize,
    pub tau: f64,
    pub iterations: usize,
    pub seed: u64,
    pub eval_seed: u64,
    pub output: PathBuf,
    pub dump_adjoint: bool,
    pub dump_trajectories: bool,
    pub kernel_subsample: Option<usize>,
    pub momentum_cap: Option<f64>,
    pub initial_policy: Option<PathBuf>,
    pub timings: bool,
    pub sweep: SweepSpec,
}

impl RunConfig {
    /// Paper-scale defaults for a problem.
    pub fn defaults(problem: ProblemParams) -> Self {
        let (lo, hi) = match &problem {
            ProblemParams::Portfolio(_) => (vec![-2.0, 0.0], vec![6.0, 4.0]),
            ProblemParams::Cs2d(_) => (vec![0.0, 0.0], vec![5.0, 4.0]),
        };
        Self {
            problem,
            method: Method::Fipde,
            grid: GridSpec {
                lo,
                hi,
                nodes: vec![51, 51],
                time_steps: 50,
            },
            particles: 10_000,
            eval_particles: 10_000,
            tau: 1.0 / 6.0,
            iterations: 20,
            seed: 1,
            eval_seed: 2,
            output: PathBuf::from("out"),
            dump_adjoint: false,
            dump_trajectories: false,
            kernel_subsample: None,
            momentum_cap: None,
            initial_policy: None,
            timings: true,
            sweep: SweepSpec::default(),
        }
    }

    pub fn horizon(&self) -> f64 {
        match &self.problem {
            ProblemParams::Portfolio(p) => p.horizon,
            ProblemParams::Cs2d(p) => p.horizon,
        }
    }

    pub fn space_time_grid(&self) -> Result<SpaceTimeGrid> {
        SpaceTimeGrid::new(
            self.horizon(),
            self.grid.time_steps,
            self.grid.lo.clone(),
            self.grid.hi.clone(),
            self.grid.nodes.clone(),
        )
    }

    /// Solver settings; the initial policy file is loaded here.
    pub fn solver_config(&self) -> Result<SolverConfig> {
        let grid = self.space_time_grid()?;
        let mut cfg = SolverConfig::new(grid.clone(), self.particles, self.tau, self.iterations, self.seed);
        cfg.eval_particles = self.eval_particles;
        cfg.eval_seed = self.eval_seed;
        cfg.method = self.method;
        cfg.momentum_cap = self.momentum_cap;
        cfg.kernel_subsample = self.kernel_subsample;
        cfg.timings = self.timings;
        cfg.keep_final_ensemble = self.dump_trajectories;
        if let Some(path) = &self.initial_policy {
            let f = crate::grid::GridField::read_csv_file(path)?;
            if f.grid().nodes() != grid.nodes() || f.grid().time_steps() != grid.time_steps() {
                return Err(Error::InvalidArgument(format!(
                    "initial policy {} does not match the configured grid",
                    path.display()
                )));
            }
            // re-home the values on the configured grid so coordinates agree bitwise
            let field = crate::grid::GridField::from_values(grid, f.components(), f.into_values())?;
            cfg.initial_policy = Some(crate::grid::PolicyField(field));
        }
        Ok(cfg)
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("problem", self.problem.name().into());
        match &self.problem {
            ProblemParams::Portfolio(p) => {
                for (k, v) in [
                    ("horizon", p.horizon),
                    ("s0", p.s0),
                    ("lambda", p.lambda),
                    ("sigma", p.sigma),
                    ("gamma", p.gamma),
                    ("k1", p.k1),
                    ("k2", p.k2),
                    ("q_min", p.q_min),
                    ("q_max", p.q_max),
                ] {
                    kv(&format!("problem.{k}"), num(v));
                }
            }
            ProblemParams::Cs2d(p) => {
                for (k, v) in [
                    ("horizon", p.horizon),
                    ("k", p.k),
                    ("sigma", p.sigma),
                    ("gamma1", p.gamma1),
                    ("gamma2", p.gamma2),
                    ("beta", p.beta),
                    ("init_std", p.init_std),
                ] {
                    kv(&format!("problem.{k}"), num(v));
                }
            }
        }
        kv("method", self.method.as_str().into());
        kv("grid.lo", list(&self.grid.lo));
        kv("grid.hi", list(&self.grid.hi));
        kv(
            "grid.nodes",
            self.grid.nodes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", "),
        );
        kv("grid.time_steps", self.grid.time_steps.to_string());
        kv("particles", self.particles.to_string());
        kv("eval_particles", self.eval_particles.to_string());
        kv("tau", num(self.tau));
        kv("iterations", self.iterations.to_string());
        kv("seed", self.seed.to_string());
        kv("eval_seed", self.eval_seed.to_string());
        kv("output", self.output.display().to_string());
        kv("dump_adjoint", self.dump_adjoint.to_string());
        kv("dump_trajectories", self.dump_trajectories.to_string());
        if let Some(k) = self.kernel_subsample {
            kv("kernel_subsample", k.to_string());
        }
        if let Some(c) = self.momentum_cap {
            kv("momentum_cap", num(c));
        }
        if let Some(p) = &self.initial_policy {
            kv("initial_policy", p.display().to_string());
        }
        kv("timings", self.timings.to_string());
        kv("sweep.q_min_lo", num(self.sweep.q_min_lo));
        kv("sweep.q_min_hi", num(self.sweep.q_min_hi));
        kv("sweep.q_max_lo", num(self.sweep.q_max_lo));
        kv("sweep.q_max_hi", num(self.sweep.q_max_hi));
        kv("sweep.steps", self.sweep.steps.to_string());
        kv("sweep.reference_iterations", self.sweep.reference_iterations.to_string());
        s
    }
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(", ")
}

const COMMON_KEYS: &[&str] = &[
    "problem",
    "method",
    "grid.lo",
    "grid.hi",
    "grid.nodes",
    "grid.time_steps",
    "particles",
    "eval_particles",
    "tau",
    "iterations",
    "seed",
    "eval_seed",
    "output",
    "dump_adjoint",
    "dump_trajectories",
    "kernel_subsample",
    "momentum_cap",
    "initial_policy",
    "timings",
    "sweep.q_min_lo",
    "sweep.q_min_hi",
    "sweep.q_max_lo",
    "sweep.q_max_hi",
    "sweep.steps",
    "sweep.reference_iterations",
];

const PORTFOLIO_KEYS: &[&str] = &[
    "problem.horizon",
    "problem.s0",
    "problem.lambda",
    "problem.sigma",
    "problem.gamma",
    "problem.k1",
    "problem.k2",
    "problem.q_min",
    "problem.q_max",
];

const CS2D_KEYS: &[&str] = &[
    "problem.horizon",
    "problem.k",
    "problem.sigma",
    "problem.gamma1",
    "problem.gamma2",
    "problem.beta",
    "problem.init_std",
];

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Config {
            line: self.line,
            message: format!("`{}`: {}", self.key, message.into()),
        }
    }

    fn float(&self) -> Result<f64> {
        parse_number(self.value).ok_or_else(|| self.err(format!("expected a number, got `{}`", self.value)))
    }

    fn positive(&self) -> Result<f64> {
        let v = self.float()?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(format!("must be positive, got {v}")))
        }
    }

    fn nonneg(&self) -> Result<f64> {
        let v = self.float()?;
        if v >= 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(format!("must be nonnegative, got {v}")))
        }
    }

    fn uint(&self) -> Result<u64> {
        self.value
            .parse::<u64>()
            .map_err(|_| self.err(format!("expected a nonnegative integer, got `{}`", self.value)))
    }

    fn count(&self) -> Result<usize> {
        let v = self.uint()?;
        if v == 0 {
            return Err(self.err("must be at least 1"));
        }
        Ok(v as usize)
    }

    fn boolean(&self) -> Result<bool> {
        match self.value {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(self.err(format!("expected true or false, got `{other}`"))),
        }
    }

    fn floats(&self) -> Result<Vec<f64>> {
        self.value
            .split(',')
            .map(|s| parse_number(s.trim()).ok_or_else(|| self.err(format!("expected a list of numbers, got `{}`", self.value))))
            .collect()
    }

    fn counts(&self) -> Result<Vec<usize>> {
        self.value
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| self.err(format!("expected a list of integers, got `{}`", self.value)))
            })
            .collect()
    }

    fn text(&self) -> &str {
        self.value.trim_matches('"')
    }
}

/// Parses `3`, `0.5`, `1e-3` or a fraction `1/6`.
fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once('/') {
        let (a, b) = (a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?);
        return (b != 0.0).then(|| a / b);
    }
    s.parse::<f64>().ok()
}

fn nearest(key: &str, known: &[&str]) -> String {
    known
        .iter()
        .min_by(|a, b| strsim::levenshtein(key, a).cmp(&strsim::levenshtein(key, b)))
        .map(|s| s.to_string())
        .unwrap_or_default()
}

/// Parses configuration text.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(Error::Config {
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if entries.iter().any(|e| e.key == key) {
            return Err(Error::Config {
                line: i + 1,
                message: format!("duplicate key `{key}`"),
            });
        }
        entries.push(Entry { line: i + 1, key, value });
    }
    let problem = match entries.iter().find(|e| e.key == "problem") {
        None => {
            return Err(Error::Config {
                line: 0,
                message: "missing required key `problem` (portfolio or cs2d)".into(),
            })
        }
        Some(e) => match e.text() {
            "portfolio" => ProblemParams::Portfolio(PortfolioParams::default()),
            "cs2d" => ProblemParams::Cs2d(CuckerSmaleParams::default()),
            other => return Err(e.err(format!("unknown problem `{other}` (expected portfolio or cs2d)"))),
        },
    };
    let problem_keys = match problem {
        ProblemParams::Portfolio(_) => PORTFOLIO_KEYS,
        ProblemParams::Cs2d(_) => CS2D_KEYS,
    };
    let mut cfg = RunConfig::defaults(problem);
    let mut eval_seed_set = false;
    for e in &entries {
        match e.key {
            "problem" => {}
            "method" => {
                cfg.method =
                    Method::parse(e.text()).ok_or_else(|| e.err(format!("unknown method `{}` (fipde, ipde, emreg)", e.value)))?
            }
            "grid.lo" => cfg.grid.lo = e.floats()?,
            "grid.hi" => cfg.grid.hi = e.floats()?,
            "grid.nodes" => cfg.grid.nodes = e.counts()?,
            "grid.time_steps" => cfg.grid.time_steps = e.count()?,
            "particles" => cfg.particles = e.count()?,
            "eval_particles" => cfg.eval_particles = e.count()?,
            "tau" => cfg.tau = e.positive()?,
            "iterations" => cfg.iterations = e.uint()? as usize,
            "seed" => cfg.seed = e.uint()?,
            "eval_seed" => {
                cfg.eval_seed = e.uint()?;
                eval_seed_set = true;
            }
            "output" => cfg.output = PathBuf::from(e.text()),
            "dump_adjoint" => cfg.dump_adjoint = e.boolean()?,
            "dump_trajectories" => cfg.dump_trajectories = e.boolean()?,
            "kernel_subsample" => cfg.kernel_subsample = Some(e.count()?),
            "momentum_cap" => cfg.momentum_cap = Some(e.nonneg()?),
            "initial_policy" => cfg.initial_policy = Some(PathBuf::from(e.text())),
            "timings" => cfg.timings = e.boolean()?,
            "sweep.q_min_lo" => cfg.sweep.q_min_lo = e.float()?,
            "sweep.q_min_hi" => cfg.sweep.q_min_hi = e.float()?,
            "sweep.q_max_lo" => cfg.sweep.q_max_lo = e.float()?,
            "sweep.q_max_hi" => cfg.sweep.q_max_hi = e.float()?,
            "sweep.steps" => cfg.sweep.steps = e.count()?,
            "sweep.reference_iterations" => cfg.sweep.reference_iterations = e.uint()? as usize,
            key if key.starts_with("problem.") && problem_keys.contains(&key) => set_problem_param(&mut cfg.problem, e)?,
            key => {
                let known: Vec<&str> = COMMON_KEYS.iter().chain(problem_keys).copied().collect();
                return Err(Error::UnknownKey {
                    key: key.to_string(),
                    suggestion: nearest(key, &known),
                });
            }
        }
    }
    if !eval_seed_set {
        cfg.eval_seed = cfg.seed.wrapping_add(1);
    }
    validate(&cfg, &entries)?;
    Ok(cfg)
}

fn set_problem_param(p: &mut ProblemParams, e: &Entry) -> Result<()> {
    let name = &e.key["problem.".len()..];
    match p {
        ProblemParams::Portfolio(q) => match name {
            "horizon" => q.horizon = e.positive()?,
            "s0" => q.s0 = e.float()?,
            "lambda" => q.lambda = e.float()?,
            "sigma" => q.sigma = e.nonneg()?,
            "gamma" => q.gamma = e.float()?,
            "k1" => q.k1 = e.positive()?,
            "k2" => q.k2 = e.nonneg()?,
            "q_min" => q.q_min = e.float()?,
            "q_max" => q.q_max = e.float()?,
            _ => unreachable!("key list covers portfolio parameters"),
        },
        ProblemParams::Cs2d(q) => match name {
            "horizon" => q.horizon = e.positive()?,
            "k" => q.k = e.float()?,
            "sigma" => q.sigma = e.nonneg()?,
            "gamma1" => q.gamma1 = e.positive()?,
            "gamma2" => q.gamma2 = e.nonneg()?,
            "beta" => q.beta = e.nonneg()?,
            "init_std" => q.init_std = e.nonneg()?,
            _ => unreachable!("key list covers cs2d parameters"),
        },
    }
    Ok(())
}

fn validate(cfg: &RunConfig, entries: &[Entry]) -> Result<()> {
    let line_of = |key: &str| entries.iter().find(|e| e.key == key).map_or(0, |e| e.line);
    let problem_check = match &cfg.problem {
        ProblemParams::Portfolio(p) => p.validate(),
        ProblemParams::Cs2d(p) => p.validate(),
    };
    if let Err(e) = problem_check {
        return Err(Error::Config {
            line: entries.iter().find(|e| e.key.starts_with("problem.")).map_or(0, |e| e.line),
            message: e.to_string(),
        });
    }
    if let Err(e) = cfg.space_time_grid() {
        return Err(Error::Config {
            line: line_of("grid.lo").max(line_of("grid.hi")).max(line_of("grid.nodes")),
            message: e.to_string(),
        });
    }
    if cfg.grid.lo.len() != 2 {
        return Err(Error::Config {
            line: line_of("grid.lo"),
            message: format!("grid must be two-dimensional, got {} dimensions", cfg.grid.lo.len()),
        });
    }
    let s = &cfg.sweep;
    if !(s.q_min_lo <= s.q_min_hi && s.q_max_lo <= s.q_max_hi) {
        return Err(Error::Config {
            line: line_of("sweep.q_min_lo"),
            message: "sweep ranges must satisfy lo <= hi".into(),
        });
    }
    Ok(())
}

/// Reads and parses a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
