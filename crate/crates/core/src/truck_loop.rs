//! Truck-by-truck route assignment: build a PUBO on the remaining demand,
//! solve it, turn the answer into a route, and deduct what that route is
//! expected to carry.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anneal::{AnnealError, CoolingKind, Schedule, SolverConfig, SolverRegistry};
use crate::matrix::Matrix;
use crate::model::{DrivingWindow, NodeId, TimeMatrix, TRUCK_CAPACITY};
use crate::pubo_builder::{self, PuboError, PuboParams, Route};
use crate::seed::{derive_seed, stream_rng};

/// Consecutive trucks with zero estimated demand that end the loop early.
pub const ZERO_TRUCK_LIMIT: usize = 3;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("truck {truck}: {source}")]
    Solver {
        truck: usize,
        #[source]
        source: AnnealError,
    },
    #[error(transparent)]
    Pubo(#[from] PuboError),
    #[error("invalid loop configuration: {0}")]
    Config(String),
}

/// Settings for one run. The horizon `tau` lives in `params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub params: PuboParams,
    pub solver_name: String,
    pub solver_cfg: SolverConfig,
    pub demand_cutoff: f64,
    pub max_trucks: usize,
    pub window: DrivingWindow,
}

impl LoopConfig {
    /// Annealing profile: 15 steps per route.
    pub fn sa_profile(window: DrivingWindow) -> Self {
        Self {
            params: PuboParams::default(),
            solver_name: "sa".into(),
            solver_cfg: SolverConfig {
                schedule: Schedule::Auto {
                    kind: CoolingKind::Geometric,
                    num_steps: 100_000,
                },
                num_restarts: 8,
                seed: 0,
            },
            demand_cutoff: 0.0005,
            max_trucks: 200,
            window,
        }
    }

    /// Profile for an external quadratic solver: 5 steps per route.
    pub fn external_profile(window: DrivingWindow) -> Self {
        Self {
            params: PuboParams {
                tau: 5,
                ..PuboParams::default()
            },
            solver_name: "external".into(),
            ..Self::sa_profile(window)
        }
    }

    pub fn tau(&self) -> usize {
        self.params.tau
    }

    pub fn validate(&self) -> Result<(), LoopError> {
        self.params.validate()?;
        if !(self.demand_cutoff >= 0.0) {
            return Err(LoopError::Config(format!(
                "demand_cutoff = {} must be nonnegative",
                self.demand_cutoff
            )));
        }
        if self.max_trucks == 0 {
            return Err(LoopError::Config("max_trucks must be at least 1".into()));
        }
        DrivingWindow::new(self.window.t_max_s).map_err(|e| LoopError::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutePlan {
    pub routes: Vec<Route>,
    #[serde(rename = "estimated")]
    pub per_truck_estimated_demand: Vec<f64>,
    #[serde(rename = "residual")]
    pub residual_demand: Matrix,
}

impl RoutePlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// One row of the per-truck progress log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruckRecord {
    pub truck: usize,
    pub estimated: f64,
    pub residual_max: f64,
    pub residual_sum: f64,
}

/// Walks one abstract truck along `route`, loading greedily from a working
/// copy of `dbar`. Returns the entrywise reduction and its sum.
pub fn estimate_demand(dbar: &Matrix, route: &[NodeId], capacity: f64) -> (Matrix, f64) {
    let mut work = dbar.clone();
    let mut cargo: Vec<(NodeId, f64)> = Vec::new();
    for (p, &s) in route.iter().enumerate() {
        cargo.retain(|&(dest, _)| dest != s);
        let mut load: f64 = cargo.iter().map(|&(_, v)| v).sum();
        for &dest in &route[p + 1..] {
            let free = capacity - load;
            if free <= 0.0 {
                break;
            }
            if dest == s {
                continue;
            }
            let amount = free.min(work[(s, dest)]);
            if amount > 0.0 {
                work[(s, dest)] -= amount;
                load += amount;
                cargo.push((dest, amount));
            }
        }
    }
    let reduction = dbar.add_scaled(&work, -1.0);
    let total = reduction.sum();
    (reduction, total)
}

pub fn stop(dbar: &Matrix, trucks: usize, cfg: &LoopConfig) -> bool {
    trucks >= cfg.max_trucks || dbar.max() < cfg.demand_cutoff
}

/// Runs the loop with solvers from the environment.
pub fn run_truck_loop(dbar: &Matrix, time: &TimeMatrix, cfg: &LoopConfig) -> Result<RoutePlan, LoopError> {
    run_truck_loop_with(&SolverRegistry::from_env(), dbar, time, cfg, |_| {})
}

/// Runs the loop, reporting each truck to `observe` as it is assigned.
pub fn run_truck_loop_with(
    registry: &SolverRegistry,
    dbar: &Matrix,
    time: &TimeMatrix,
    cfg: &LoopConfig,
    mut observe: impl FnMut(&TruckRecord),
) -> Result<RoutePlan, LoopError> {
    cfg.validate()?;
    if dbar.n() != time.n() {
        return Err(PuboError::Shape(format!("demand is {0}x{0}, time is {1}x{1}", dbar.n(), time.n())).into());
    }
    let mut residual = dbar.clone();
    let mut routes = Vec::new();
    let mut estimated = Vec::new();
    let mut zero_run = 0;

    while !stop(&residual, routes.len(), cfg) {
        let m = routes.len();
        let (pubo, index) = pubo_builder::build_single_truck_pubo(&residual, time, &cfg.params)?;
        let solver_cfg = cfg.solver_cfg.with_seed(derive_seed(cfg.solver_cfg.seed, &format!("solve/{m}")));
        let result = registry
            .solve(&pubo, &cfg.solver_name, &solver_cfg)
            .map_err(|source| LoopError::Solver { truck: m, source })?;
        let mut rng = stream_rng(derive_seed(cfg.solver_cfg.seed, &format!("rectify/{m}")), 0);
        let raw = pubo_builder::rectify(&result.best_assignment, &pubo, &index, time, &mut rng);
        let route = pubo_builder::fit_to_window(&raw, time, &cfg.window);

        let (reduction, total) = estimate_demand(&residual, &route.nodes, TRUCK_CAPACITY);
        residual = residual.add_scaled(&reduction, -1.0).map(|v| v.max(0.0));
        let record = TruckRecord {
            truck: m,
            estimated: total,
            residual_max: residual.max(),
            residual_sum: residual.sum(),
        };
        log::debug!("truck {m}: estimated {total:.6}, residual max {:.6}", record.residual_max);
        observe(&record);
        routes.push(route);
        estimated.push(total);

        zero_run = if total > 0.0 { 0 } else { zero_run + 1 };
        if zero_run >= ZERO_TRUCK_LIMIT {
            log::warn!(
                "stopping after {} trucks: last {ZERO_TRUCK_LIMIT} routes carried no estimated demand (residual max {:.6})",
                routes.len(),
                record.residual_max
            );
            break;
        }
    }
    Ok(RoutePlan {
        routes,
        per_truck_estimated_demand: estimated,
        residual_demand: residual,
    })
}

/// CSV progress log: `truck,estimated,residual_max,residual_sum`.
pub fn write_truck_log<W: std::io::Write>(mut w: W, records: &[TruckRecord]) -> std::io::Result<()> {
    writeln!(w, "truck,estimated,residual_max,residual_sum")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.truck, r.estimated, r.residual_max, r.residual_sum)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dbar_with(n: usize, entries: &[((usize, usize), f64)]) -> Matrix {
        let mut m = Matrix::zeros(n);
        for &(ij, v) in entries {
            m[ij] = v;
        }
        m
    }

    fn uniform_time(n: usize, t: f64) -> TimeMatrix {
        TimeMatrix::from_rows(
            (0..n)
                .map(|i| (0..n).map(|j| if i == j { 0.0 } else { t }).collect())
                .collect(),
        )
        .unwrap()
    }

    fn quick_cfg(window: f64, tau: usize) -> LoopConfig {
        let mut cfg = LoopConfig::sa_profile(DrivingWindow::new(window).unwrap());
        cfg.params.tau = tau;
        cfg.solver_cfg.schedule = Schedule::Auto {
            kind: CoolingKind::Geometric,
            num_steps: 20_000,
        };
        cfg.solver_cfg.num_restarts = 4;
        cfg
    }

    #[test]
    fn estimate_examples() {
        let (r, total) = estimate_demand(&dbar_with(2, &[((0, 1), 0.4)]), &[0, 1], 1.0);
        assert_eq!(r[(0, 1)], 0.4);
        assert_eq!(total, 0.4);

        let (r, total) = estimate_demand(&dbar_with(2, &[((0, 1), 1.5)]), &[0, 1], 1.0);
        assert_eq!(r[(0, 1)], 1.0);
        assert_eq!(total, 1.0);
    }

    #[test]
    fn estimate_walks_the_greedy_rule() {
        let d = dbar_with(
            9,
            &[((4, 6), 0.6), ((4, 8), 0.7), ((6, 8), 0.5), ((6, 3), 0.5), ((8, 3), 0.2)],
        );
        let (r, total) = estimate_demand(&d, &[4, 6, 8, 3], 1.0);
        // At 4: 0.6 for 6, then 0.4 of the 0.7 for 8.
        assert_eq!(r[(4, 6)], 0.6);
        assert!((r[(4, 8)] - 0.4).abs() < 1e-15);
        // At 6: 0.6 unloaded, 0.4 still aboard, so 0.6 free: 0.5 for 8, 0.1 for 3.
        assert_eq!(r[(6, 8)], 0.5);
        assert!((r[(6, 3)] - 0.1).abs() < 1e-15);
        // At 8: 0.9 unloaded, 0.1 aboard: 0.2 for 3 fits.
        assert_eq!(r[(8, 3)], 0.2);
        assert!((total - 1.8).abs() < 1e-12);
    }

    #[test]
    fn stop_examples() {
        let cfg = quick_cfg(100.0, 3);
        assert!(stop(&dbar_with(2, &[((0, 1), 0.0004)]), 0, &cfg));
        assert!(stop(&dbar_with(2, &[((0, 1), 5.0)]), cfg.max_trucks, &cfg));
        assert!(!stop(&dbar_with(2, &[((0, 1), 0.1)]), 2, &cfg));
    }

    #[test]
    fn zero_demand_gives_empty_plan() {
        let plan = run_truck_loop(&Matrix::zeros(3), &uniform_time(3, 10.0), &quick_cfg(100.0, 4)).unwrap();
        assert!(plan.routes.is_empty());
        assert!(plan.per_truck_estimated_demand.is_empty());
    }

    #[test]
    fn single_entry_clears_with_one_truck() {
        let d = dbar_with(3, &[((0, 1), 0.3)]);
        let cfg = quick_cfg(1000.0, 4);
        let plan = run_truck_loop(&d, &uniform_time(3, 10.0), &cfg).unwrap();
        assert_eq!(plan.routes.len(), 1);
        assert!(plan.residual_demand.max() < cfg.demand_cutoff);
        assert!((plan.per_truck_estimated_demand[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn truck_budget_is_respected() {
        let d = dbar_with(3, &[((0, 1), 9.0), ((1, 2), 9.0)]);
        let mut cfg = quick_cfg(1000.0, 4);
        cfg.max_trucks = 2;
        let plan = run_truck_loop(&d, &uniform_time(3, 10.0), &cfg).unwrap();
        assert_eq!(plan.routes.len(), 2);
    }

    #[test]
    fn unknown_solver_carries_truck_index() {
        let d = dbar_with(3, &[((0, 1), 0.3)]);
        let mut cfg = quick_cfg(1000.0, 4);
        cfg.solver_name = "missing".into();
        let err = run_truck_loop(&d, &uniform_time(3, 10.0), &cfg).unwrap_err();
        assert!(matches!(err, LoopError::Solver { truck: 0, .. }));
        assert!(err.to_string().starts_with("truck 0"));
    }

    #[test]
    fn stalled_loop_stops_early() {
        // Demand exists but is unreachable within the window, so every route is a single node.
        let d = dbar_with(2, &[((0, 1), 0.5)]);
        let cfg = quick_cfg(5.0, 3);
        let plan = run_truck_loop(&d, &uniform_time(2, 10.0), &cfg).unwrap();
        assert_eq!(plan.routes.len(), ZERO_TRUCK_LIMIT);
        assert!(plan.per_truck_estimated_demand.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn plan_json_shape() {
        let plan = RoutePlan {
            routes: vec![Route { nodes: vec![0, 1], duration_s: 3.0 }],
            per_truck_estimated_demand: vec![0.5],
            residual_demand: Matrix::zeros(2),
        };
        let v: serde_json::Value = serde_json::from_str(&plan.to_json()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "routes": [{"nodes": [0, 1], "duration_s": 3.0}],
                "estimated": [0.5],
                "residual": [[0.0, 0.0], [0.0, 0.0]],
            })
        );
        assert_eq!(RoutePlan::from_json(&plan.to_json()).unwrap(), plan);
    }

    #[test]
    fn truck_log_csv() {
        let mut out = Vec::new();
        write_truck_log(
            &mut out,
            &[TruckRecord { truck: 0, estimated: 0.5, residual_max: 0.25, residual_sum: 1.0 }],
        )
        .unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "truck,estimated,residual_max,residual_sum\n0,0.5,0.25,1\n");
    }
}
