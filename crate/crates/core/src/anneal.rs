//! Heuristic minimizers for [`BinaryPolynomial`]s behind one solver interface.
//!
//! The built-in solver is single-flip simulated annealing that works on
//! polynomials of any degree. Quadratic-only back ends (external programs, the
//! brute-force oracle) are reached through [`QuadraticSolver`]; they receive
//! the order-reduced polynomial and their answers are projected back onto the
//! original variables and re-scored.

use std::collections::BTreeMap;
use std::io::Write;
use std::process::{Command, Stdio};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binpoly::{BinaryPolynomial, CompiledPoly, Penalty, PolyError};
use crate::seed::stream_rng;

/// Environment variable holding a command line for the `external` solver.
pub const EXTERNAL_SOLVER_ENV: &str = "TRUCKLOOP_EXTERNAL_SOLVER";

#[derive(Debug, Error)]
pub enum AnnealError {
    #[error("size error: {0}")]
    Size(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("unknown solver `{0}`")]
    UnknownSolver(String),
    #[error("solver `{solver}` failed: {diagnostics}")]
    Transport { solver: String, diagnostics: String },
    #[error(transparent)]
    Poly(#[from] PolyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoolingKind {
    Geometric,
    Linear,
}

/// A strictly decreasing temperature sequence from `t_start` to `t_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoolingSchedule {
    kind: CoolingKind,
    t_start: f64,
    t_end: f64,
    num_steps: usize,
}

impl CoolingSchedule {
    pub fn new(
        kind: CoolingKind,
        t_start: f64,
        t_end: f64,
        num_steps: usize,
    ) -> Result<Self, AnnealError> {
        if !(t_end > 0.0 && t_end < t_start && t_start.is_finite()) {
            return Err(AnnealError::Parameter(format!(
                "cooling schedule needs 0 < t_end < t_start, got t_start={t_start}, t_end={t_end}"
            )));
        }
        if num_steps == 0 {
            return Err(AnnealError::Parameter(
                "cooling schedule needs at least one step".into(),
            ));
        }
        Ok(Self {
            kind,
            t_start,
            t_end,
            num_steps,
        })
    }

    pub fn kind(&self) -> CoolingKind {
        self.kind
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// Temperature at step `k` of `num_steps`.
    pub fn temperature(&self, k: usize) -> f64 {
        if self.num_steps == 1 {
            return self.t_start;
        }
        let frac = k as f64 / (self.num_steps - 1) as f64;
        match self.kind {
            CoolingKind::Geometric => self.t_start * (self.t_end / self.t_start).powf(frac),
            CoolingKind::Linear => self.t_start + (self.t_end - self.t_start) * frac,
        }
    }
}

/// Either an explicit schedule or one scaled to the polynomial at solve time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `t_start = max(1, max |coeff|)`, `t_end = 1e-3 * t_start`.
    Auto { kind: CoolingKind, num_steps: usize },
    Fixed(CoolingSchedule),
}

impl Schedule {
    pub fn resolve(&self, p: &BinaryPolynomial) -> Result<CoolingSchedule, AnnealError> {
        match *self {
            Schedule::Fixed(s) => Ok(s),
            Schedule::Auto { kind, num_steps } => {
                let t_start = p.max_abs_coefficient().max(1.0);
                CoolingSchedule::new(kind, t_start, 1e-3 * t_start, num_steps)
            }
        }
    }

    pub fn num_steps(&self) -> usize {
        match self {
            Schedule::Auto { num_steps, .. } => *num_steps,
            Schedule::Fixed(s) => s.num_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub schedule: Schedule,
    pub num_restarts: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::Auto {
                kind: CoolingKind::Geometric,
                num_steps: 10_000,
            },
            num_restarts: 20,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverResult {
    pub best_assignment: Vec<bool>,
    pub best_value: f64,
    pub samples_evaluated: u64,
}

struct Chain {
    best: Vec<bool>,
    best_value: f64,
    samples: u64,
}

fn run_chain(
    compiled: &CompiledPoly,
    schedule: &CoolingSchedule,
    seed: u64,
    restart: usize,
    mut trace: Option<&mut Vec<f64>>,
) -> Chain {
    let n = compiled.num_vars();
    let mut rng = stream_rng(seed, restart as u64);
    let mut bits: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
    let (mut counts, mut energy) = compiled.state(&bits);
    let mut best = bits.clone();
    let mut best_energy = energy;
    if let Some(t) = trace.as_deref_mut() {
        t.push(energy);
    }

    for k in 0..schedule.num_steps() {
        let temp = schedule.temperature(k);
        let v = rng.gen_range(0..n);
        let delta = compiled.flip_delta(v, &bits, &counts);
        let accept = delta <= 0.0 || rng.gen::<f64>() < (-delta / temp).exp();
        if accept {
            compiled.apply_flip(v, &mut bits, &mut counts);
            energy += delta;
            if energy < best_energy {
                best_energy = energy;
                best.copy_from_slice(&bits);
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(energy);
        }
    }
    Chain {
        best,
        best_value: best_energy,
        samples: schedule.num_steps() as u64 + 1,
    }
}

/// Independent single-flip annealing chains, one per restart, each seeded from
/// `(cfg.seed, restart)`. Chains run in parallel; the merged result is the
/// lowest exactly re-evaluated value, ties going to the lowest restart index.
pub fn simulated_anneal(
    p: &BinaryPolynomial,
    cfg: &SolverConfig,
) -> Result<SolverResult, AnnealError> {
    let (schedule, compiled) = prepare(p, cfg)?;
    let chains: Vec<Chain> = (0..cfg.num_restarts)
        .into_par_iter()
        .map(|r| run_chain(&compiled, &schedule, cfg.seed, r, None))
        .collect();
    Ok(merge(p, chains))
}

/// Like [`simulated_anneal`], also returning each chain's energy after every
/// step (initial state first). Runs serially.
pub fn simulated_anneal_traced(
    p: &BinaryPolynomial,
    cfg: &SolverConfig,
) -> Result<(SolverResult, Vec<Vec<f64>>), AnnealError> {
    let (schedule, compiled) = prepare(p, cfg)?;
    let mut traces = Vec::with_capacity(cfg.num_restarts);
    let mut chains = Vec::with_capacity(cfg.num_restarts);
    for r in 0..cfg.num_restarts {
        let mut t = Vec::with_capacity(schedule.num_steps() + 1);
        chains.push(run_chain(&compiled, &schedule, cfg.seed, r, Some(&mut t)));
        traces.push(t);
    }
    Ok((merge(p, chains), traces))
}

fn prepare(
    p: &BinaryPolynomial,
    cfg: &SolverConfig,
) -> Result<(CoolingSchedule, CompiledPoly), AnnealError> {
    if p.num_vars() == 0 {
        return Err(AnnealError::Size(
            "simulated annealing needs at least one variable".into(),
        ));
    }
    if cfg.num_restarts == 0 {
        return Err(AnnealError::Parameter("num_restarts must be positive".into()));
    }
    Ok((cfg.schedule.resolve(p)?, CompiledPoly::new(p)))
}

fn merge(p: &BinaryPolynomial, chains: Vec<Chain>) -> SolverResult {
    let samples = chains.iter().map(|c| c.samples).sum();
    let mut best: Option<(Vec<bool>, f64)> = None;
    for c in chains {
        debug_assert!(c.best_value.is_finite());
        let exact = p.evaluate_unchecked(&c.best);
        if best.as_ref().map_or(true, |(_, v)| exact < *v) {
            best = Some((c.best, exact));
        }
    }
    let (best_assignment, best_value) = best.expect("at least one restart");
    SolverResult {
        best_assignment,
        best_value,
        samples_evaluated: samples,
    }
}

/// Reply format of a quadratic back end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalSolution {
    pub assignment: Vec<u8>,
    pub value: f64,
}

/// A minimizer that only accepts polynomials of degree two or less.
pub trait QuadraticSolver: Send + Sync {
    fn solve_quadratic(
        &self,
        qubo: &BinaryPolynomial,
        cfg: &SolverConfig,
    ) -> Result<ExternalSolution, AnnealError>;
}

/// Exhaustive search; the test oracle.
#[derive(Debug, Clone, Copy, Default)]
pub struct BruteForceSolver;

impl QuadraticSolver for BruteForceSolver {
    fn solve_quadratic(
        &self,
        qubo: &BinaryPolynomial,
        _cfg: &SolverConfig,
    ) -> Result<ExternalSolution, AnnealError> {
        let (bits, value) = qubo
            .brute_force_minimize()
            .map_err(|e| AnnealError::Size(e.to_string()))?;
        Ok(ExternalSolution {
            assignment: bits.into_iter().map(u8::from).collect(),
            value,
        })
    }
}

/// Runs an external program: the quadratic polynomial JSON goes to its
/// stdin and an [`ExternalSolution`] JSON is read from its stdout.
#[derive(Debug, Clone)]
pub struct CommandSolver {
    program: String,
    args: Vec<String>,
}

impl CommandSolver {
    /// Splits a command line on whitespace; no shell quoting.
    pub fn from_command_line(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace().map(str::to_owned);
        let program = parts.next()?;
        Some(Self {
            program,
            args: parts.collect(),
        })
    }
}

impl QuadraticSolver for CommandSolver {
    fn solve_quadratic(
        &self,
        qubo: &BinaryPolynomial,
        _cfg: &SolverConfig,
    ) -> Result<ExternalSolution, AnnealError> {
        let transport = |diagnostics: String| AnnealError::Transport {
            solver: self.program.clone(),
            diagnostics,
        };
        let payload = serde_json::to_vec(qubo).map_err(|e| transport(e.to_string()))?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| transport(format!("spawn: {e}")))?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(&payload)
            .map_err(|e| transport(format!("write: {e}")))?;
        let out = child
            .wait_with_output()
            .map_err(|e| transport(format!("wait: {e}")))?;
        if !out.status.success() {
            return Err(transport(format!(
                "exit status {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        serde_json::from_slice(&out.stdout).map_err(|e| transport(format!("bad reply: {e}")))
    }
}

#[derive(Clone)]
enum Backend {
    Anneal,
    Quadratic(Arc<dyn QuadraticSolver>),
}

/// Solvers keyed by name. `sa` and `brute` are always present; `external`
/// appears when [`EXTERNAL_SOLVER_ENV`] is set.
#[derive(Clone)]
pub struct SolverRegistry {
    backends: BTreeMap<String, Backend>,
}

impl Default for SolverRegistry {
    fn default() -> Self {
        let mut backends = BTreeMap::new();
        backends.insert("sa".to_owned(), Backend::Anneal);
        backends.insert(
            "brute".to_owned(),
            Backend::Quadratic(Arc::new(BruteForceSolver)),
        );
        Self { backends }
    }
}

impl SolverRegistry {
    pub fn from_env() -> Self {
        let mut reg = Self::default();
        if let Some(cmd) = std::env::var(EXTERNAL_SOLVER_ENV)
            .ok()
            .and_then(|line| CommandSolver::from_command_line(&line))
        {
            reg.register("external", Arc::new(cmd));
        }
        reg
    }

    pub fn register(&mut self, name: &str, solver: Arc<dyn QuadraticSolver>) {
        self.backends
            .insert(name.to_owned(), Backend::Quadratic(solver));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.backends.contains_key(name)
    }

    /// Minimizes `p` with the named solver.
    pub fn solve(
        &self,
        p: &BinaryPolynomial,
        solver_name: &str,
        cfg: &SolverConfig,
    ) -> Result<SolverResult, AnnealError> {
        match self.backends.get(solver_name) {
            None => Err(AnnealError::UnknownSolver(solver_name.to_owned())),
            Some(Backend::Anneal) => simulated_anneal(p, cfg),
            Some(Backend::Quadratic(solver)) => {
                let reduction = p.reduce_to_quadratic(Penalty::Auto)?;
                let reply = solver.solve_quadratic(&reduction.qubo, cfg)?;
                if reply.assignment.len() != reduction.qubo.num_vars()
                    || reply.assignment.iter().any(|&b| b > 1)
                {
                    return Err(AnnealError::Transport {
                        solver: solver_name.to_owned(),
                        diagnostics: format!(
                            "expected {} bits in {{0,1}}, got {:?}",
                            reduction.qubo.num_vars(),
                            reply.assignment
                        ),
                    });
                }
                let full: Vec<bool> = reply.assignment.iter().map(|&b| b == 1).collect();
                let best_assignment = reduction.project(&full);
                let best_value = p.evaluate(&best_assignment)?;
                Ok(SolverResult {
                    best_assignment,
                    best_value,
                    samples_evaluated: 1,
                })
            }
        }
    }
}

/// [`SolverRegistry::solve`] on the environment-configured registry.
pub fn solve(
    p: &BinaryPolynomial,
    solver_name: &str,
    cfg: &SolverConfig,
) -> Result<SolverResult, AnnealError> {
    SolverRegistry::from_env().solve(p, solver_name, cfg)
}
