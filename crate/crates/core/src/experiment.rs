//! Config-driven runs and their on-disk artifacts.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::PolicyField;
use crate::nag::{evaluate_policy, run, IterationRecord, Method, RunReport};
use crate::problems::ProblemParams;

#[derive(Serialize)]
struct ReportJson<'a> {
    method: &'a str,
    problem: &'a str,
    seed: u64,
    eval_seed: u64,
    records: &'a [IterationRecord],
    warnings: &'a [String],
    error: Option<String>,
    config: &'a RunConfig,
    config_text: String,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

/// Writes `report.csv`, `report.json`, the policy CSVs and optional dumps.
pub fn write_artifacts(cfg: &RunConfig, report: &RunReport, error: Option<&str>) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output;
    create_dir(dir)?;
    let mut written = Vec::new();
    let csv_path = dir.join("report.csv");
    report.write_csv(create_file(&csv_path)?)?;
    written.push(csv_path);

    let json = ReportJson {
        method: report.method.as_str(),
        problem: cfg.problem.name(),
        seed: report.seed,
        eval_seed: report.eval_seed,
        records: &report.records,
        warnings: &report.warnings,
        error: error.map(str::to_string),
        config: cfg,
        config_text: cfg.to_text(),
    };
    let json_path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);

    for (name, policy) in [("policy_phi.csv", &report.phi), ("policy_psi.csv", &report.psi)] {
        let p = dir.join(name);
        policy.field().write_csv_file(&p)?;
        written.push(p);
    }
    if cfg.dump_adjoint {
        if let Some(adj) = &report.last_adjoint {
            let p = dir.join("adjoint_u.csv");
            adj.u.write_csv_file(&p)?;
            written.push(p);
            if let Some(v) = &adj.v {
                let p = dir.join("adjoint_v.csv");
                v.write_csv_file(&p)?;
                written.push(p);
            }
        }
    }
    if cfg.dump_trajectories {
        if let Some(ens) = &report.final_ensemble {
            let p = dir.join("trajectories.csv");
            ens.write_csv(create_file(&p)?)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Runs the configured method and writes its artifacts. A failed run still
/// writes the partial report before the error is returned.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    let problem = cfg.problem.build()?;
    let solver = cfg.solver_config()?;
    match run(problem.as_ref(), &solver) {
        Ok(report) => {
            write_artifacts(cfg, &report, None)?;
            Ok(report)
        }
        Err(failure) => {
            write_artifacts(cfg, &failure.report, Some(&failure.error.to_string()))?;
            Err(failure.error)
        }
    }
}

/// Fraction of nodes with `|phi| <= threshold`, per time slice.
pub fn sparsity_report(policy: &PolicyField, threshold: f64) -> Vec<f64> {
    let k = policy.control_dim();
    let g = policy.grid();
    (0..=g.time_steps())
        .map(|j| {
            let s = policy.field().slice(j);
            let zeros = s.chunks_exact(k).filter(|a| a.iter().all(|v| v.abs() <= threshold)).count();
            zeros as f64 / g.node_count() as f64
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub q_min: f64,
    pub q_max: f64,
    /// Cost of the frozen policy under the perturbed initial law.
    pub j_pre: f64,
    /// Cost of a freshly trained policy under that law.
    pub j_ref: f64,
    pub abs_gap: f64,
    pub rel_gap: f64,
}

/// Evenly spaced lattice on `[lo, hi]` (a single point when `steps == 1`).
pub fn lattice(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps <= 1 {
        return vec![lo];
    }
    (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect()
}

/// Reference costs per perturbed law, memoized in memory and optionally on
/// disk (one small file per distinct reference configuration).
pub struct ReferenceCache {
    dir: Option<PathBuf>,
    memo: HashMap<u64, f64>,
}

impl ReferenceCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir, memo: HashMap::new() }
    }

    /// Final-iterate cost of a fresh FIPDE run of `cfg`.
    pub fn reference(&mut self, cfg: &RunConfig) -> Result<f64> {
        let text = cfg.to_text();
        let mut h = DefaultHasher::new();
        text.hash(&mut h);
        let key = h.finish();
        if let Some(v) = self.memo.get(&key) {
            return Ok(*v);
        }
        let file = self.dir.as_ref().map(|d| d.join(format!("ref_{key:016x}.txt")));
        if let Some(f) = &file {
            if let Ok(s) = std::fs::read_to_string(f) {
                if let Ok(v) = s.trim().parse::<f64>() {
                    self.memo.insert(key, v);
                    return Ok(v);
                }
            }
        }
        let problem = cfg.problem.build()?;
        let solver = cfg.solver_config()?;
        let report = run(problem.as_ref(), &solver).map_err(|f| f.error)?;
        let v = report.final_cost();
        if let (Some(dir), Some(f)) = (&self.dir, &file) {
            create_dir(dir)?;
            std::fs::write(f, format!("{v:?}\n")).map_err(|e| Error::io(f, e))?;
        }
        self.memo.insert(key, v);
        Ok(v)
    }
}

/// Reference run settings for the law `U(q_min, q_max)`.
pub fn reference_config(base: &RunConfig, q_min: f64, q_max: f64) -> RunConfig {
    let mut c = base.clone();
    if let ProblemParams::Portfolio(p) = &mut c.problem {
        p.q_min = q_min;
        p.q_max = q_max;
    }
    c.method = Method::Fipde;
    c.iterations = base.sweep.reference_iterations;
    c.initial_policy = None;
    c.dump_adjoint = false;
    c.dump_trajectories = false;
    c.timings = false;
    c
}

/// Evaluates one sweep cell; cells with `q_min >= q_max` are NaN.
pub fn sweep_cell(base: &RunConfig, policy: &PolicyField, q_min: f64, q_max: f64, cache: &mut ReferenceCache) -> Result<SweepCell> {
    if !(q_min < q_max) {
        return Ok(SweepCell {
            q_min,
            q_max,
            j_pre: f64::NAN,
            j_ref: f64::NAN,
            abs_gap: f64::NAN,
            rel_gap: f64::NAN,
        });
    }
    let rc = reference_config(base, q_min, q_max);
    let problem = rc.problem.build()?;
    let (pre, _) = evaluate_policy(problem.as_ref(), policy, base.eval_particles, base.eval_seed)?;
    let j_ref = cache.reference(&rc)?;
    let abs_gap = (pre.mean - j_ref).abs();
    Ok(SweepCell {
        q_min,
        q_max,
        j_pre: pre.mean,
        j_ref,
        abs_gap,
        rel_gap: abs_gap / j_ref.abs(),
    })
}

/// Evaluates `policy` on the `(q_min, q_max)` lattice of `base.sweep`.
pub fn robustness_sweep(base: &RunConfig, policy: &PolicyField, cache: &mut ReferenceCache) -> Result<Vec<SweepCell>> {
    if !matches!(base.problem, ProblemParams::Portfolio(_)) {
        return Err(Error::InvalidArgument("robustness sweeps perturb the portfolio inventory law".into()));
    }
    let s = &base.sweep;
    let mut cells = Vec::new();
    for &q_min in &lattice(s.q_min_lo, s.q_min_hi, s.steps) {
        for &q_max in &lattice(s.q_max_lo, s.q_max_hi, s.steps) {
            cells.push(sweep_cell(base, policy, q_min, q_max, cache)?);
        }
    }
    Ok(cells)
}

/// Writes `sweep.csv` (long format) and the gap matrices.
pub fn write_sweep(dir: &Path, cells: &[SweepCell], steps: usize) -> Result<()> {
    create_dir(dir)?;
    let f = |v: f64| crate::grid::fmt17(v);
    let path = dir.join("sweep.csv");
    let mut wr = csv::Writer::from_writer(create_file(&path)?);
    let cerr = |e: csv::Error| Error::Csv(e.to_string());
    wr.write_record(["q_min", "q_max", "J_pre", "J_ref", "abs_gap", "rel_gap"]).map_err(cerr)?;
    for c in cells {
        wr.write_record([f(c.q_min), f(c.q_max), f(c.j_pre), f(c.j_ref), f(c.abs_gap), f(c.rel_gap)])
            .map_err(cerr)?;
    }
    wr.flush().map_err(|e| Error::io(&path, e))?;
    for (name, pick) in [
        ("sweep_abs_gap.csv", (|c: &SweepCell| c.abs_gap) as fn(&SweepCell) -> f64),
        ("sweep_rel_gap.csv", |c: &SweepCell| c.rel_gap),
    ] {
        let path = dir.join(name);
        let mut wr = csv::Writer::from_writer(create_file(&path)?);
        let mut header = vec!["q_min\\q_max".to_string()];
        header.extend(cells.iter().take(steps).map(|c| f(c.q_max)));
        wr.write_record(&header).map_err(cerr)?;
        for row in cells.chunks(steps) {
            let mut r = vec![f(row[0].q_min)];
            r.extend(row.iter().map(|c| f(pick(c))));
            wr.write_record(&r).map_err(cerr)?;
        }
        wr.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridField, SpaceTimeGrid};

    #[test]
    fn sparsity_of_zero_policy() {
        let g = SpaceTimeGrid::new(1.0, 3, vec![0.0], vec![1.0], vec![4]).unwrap();
        let p = PolicyField::zeros(g.clone(), 1);
        assert!(sparsity_report(&p, 0.0).iter().all(|&f| f == 1.0));
        let q = PolicyField(GridField::from_fn(g, 1, |_, x, o| o[0] = x[0]));
        assert_eq!(sparsity_report(&q, 0.0)[0], 0.25);
    }

    #[test]
    fn lattice_points() {
        assert_eq!(lattice(0.5, 1.5, 3), vec![0.5, 1.0, 1.5]);
        assert_eq!(lattice(1.0, 2.0, 1), vec![1.0]);
    }
}
