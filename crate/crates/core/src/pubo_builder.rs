//! The single-truck PUBO over time-indexed node variables, and the passes that
//! turn a solver assignment back into a drivable route.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binpoly::BinaryPolynomial;
use crate::matrix::Matrix;
use crate::model::{DrivingWindow, NodeId, TimeMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum PuboError {
    #[error("invalid PUBO parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Coefficients and horizon of the single-truck PUBO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PuboParams {
    pub a_local: f64,
    pub a_demand: f64,
    pub a_time: f64,
    pub a_nonredundant: f64,
    pub delta_max: usize,
    /// Pairs with `0 < D̄ <= threshold` receive the repeat penalty.
    pub redundancy_threshold: f64,
    pub tau: usize,
}

impl Default for PuboParams {
    fn default() -> Self {
        Self {
            a_local: 5000.0,
            a_demand: 320.0,
            a_time: 0.01,
            a_nonredundant: 1.0,
            delta_max: 3,
            redundancy_threshold: 1.0,
            tau: 15,
        }
    }
}

impl PuboParams {
    pub fn validate(&self) -> Result<(), PuboError> {
        let coeffs = [
            ("a_local", self.a_local),
            ("a_demand", self.a_demand),
            ("a_time", self.a_time),
            ("a_nonredundant", self.a_nonredundant),
        ];
        for (name, v) in coeffs {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PuboError::Parameter(format!("{name} = {v} must be positive")));
            }
        }
        if self.delta_max == 0 {
            return Err(PuboError::Parameter("delta_max must be at least 1".into()));
        }
        if !(self.redundancy_threshold >= 0.0) {
            return Err(PuboError::Parameter(format!(
                "redundancy_threshold = {} must be nonnegative",
                self.redundancy_threshold
            )));
        }
        if self.tau < 2 {
            return Err(PuboError::Parameter(format!("tau = {} must be at least 2", self.tau)));
        }
        Ok(())
    }
}

/// Bijection between `(node, step)` and variable `node * tau + step`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarIndex {
    n: usize,
    tau: usize,
    inverse: Vec<(NodeId, usize)>,
}

impl VarIndex {
    pub fn new(n: usize, tau: usize) -> Self {
        let inverse = (0..n).flat_map(|i| (0..tau).map(move |t| (i, t))).collect();
        Self { n, tau, inverse }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn num_vars(&self) -> usize {
        self.inverse.len()
    }

    pub fn var(&self, node: NodeId, step: usize) -> usize {
        debug_assert!(node < self.n && step < self.tau);
        node * self.tau + step
    }

    pub fn node_step(&self, var: usize) -> (NodeId, usize) {
        self.inverse[var]
    }

    /// The assignment visiting `nodes[t]` at step `t`.
    pub fn one_hot(&self, nodes: &[NodeId]) -> Vec<bool> {
        let mut bits = vec![false; self.num_vars()];
        for (t, &i) in nodes.iter().enumerate() {
            bits[self.var(i, t)] = true;
        }
        bits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub nodes: Vec<NodeId>,
    pub duration_s: f64,
}

impl Route {
    pub fn new(nodes: Vec<NodeId>, time: &TimeMatrix) -> Self {
        let duration_s = time.route_duration(&nodes);
        Self { nodes, duration_s }
    }
}

/// `Σ_t (1 − Σ_i x_it)²`, expanded.
pub fn locality_term(n: usize, tau: usize) -> BinaryPolynomial {
    let idx = VarIndex::new(n, tau);
    let mut p = BinaryPolynomial::constant(n * tau, tau as f64);
    for t in 0..tau {
        for i in 0..n {
            p.add_term(&[idx.var(i, t)], -1.0);
            for j in i + 1..n {
                p.add_term(&[idx.var(i, t), idx.var(j, t)], 2.0);
            }
        }
    }
    p
}

/// `−Σ_{ijt} Σ_{δ=1}^{min(δmax, τ−1−t)} D̄_ij x_it x_{j,t+δ}`.
pub fn demand_term(dbar: &Matrix, tau: usize, delta_max: usize) -> BinaryPolynomial {
    let n = dbar.n();
    let idx = VarIndex::new(n, tau);
    let mut p = BinaryPolynomial::new(n * tau);
    for ((i, j), d) in dbar.iter() {
        if d == 0.0 {
            continue;
        }
        for t in 0..tau {
            for delta in 1..=delta_max.min(tau - 1 - t) {
                p.add_term(&[idx.var(i, t), idx.var(j, t + delta)], -d);
            }
        }
    }
    p
}

/// `Σ_{ijt} T_ij x_it x_{j,t+1}`.
pub fn time_term(time: &TimeMatrix, tau: usize) -> BinaryPolynomial {
    let n = time.n();
    let idx = VarIndex::new(n, tau);
    let mut p = BinaryPolynomial::new(n * tau);
    for ((i, j), c) in time.as_matrix().iter() {
        if c == 0.0 {
            continue;
        }
        for t in 0..tau - 1 {
            p.add_term(&[idx.var(i, t), idx.var(j, t + 1)], c);
        }
    }
    p
}

/// Counts repeats of the hop `i → j` for every flagged pair.
pub fn redundancy_term(flags: &Matrix, tau: usize) -> BinaryPolynomial {
    let n = flags.n();
    let idx = VarIndex::new(n, tau);
    let mut p = BinaryPolynomial::new(n * tau);
    for ((i, j), f) in flags.iter() {
        if f == 0.0 {
            continue;
        }
        for delta in 2..=tau.saturating_sub(2) {
            for t in 0..=tau - 2 - delta {
                p.add_term(
                    &[
                        idx.var(i, t),
                        idx.var(j, t + 1),
                        idx.var(i, t + delta),
                        idx.var(j, t + 1 + delta),
                    ],
                    1.0,
                );
            }
        }
    }
    p
}

/// 1 where `0 < D̄_ij <= threshold`, else 0.
pub fn redundancy_flags(dbar: &Matrix, threshold: f64) -> Matrix {
    dbar.map(|d| if d > 0.0 && d <= threshold { 1.0 } else { 0.0 })
}

pub fn build_single_truck_pubo(
    dbar: &Matrix,
    time: &TimeMatrix,
    params: &PuboParams,
) -> Result<(BinaryPolynomial, VarIndex), PuboError> {
    params.validate()?;
    if dbar.n() != time.n() {
        return Err(PuboError::Shape(format!(
            "demand is {0}x{0} but time matrix is {1}x{1}",
            dbar.n(),
            time.n()
        )));
    }
    let (n, tau) = (dbar.n(), params.tau);
    let flags = redundancy_flags(dbar, params.redundancy_threshold);
    let mut p = BinaryPolynomial::new(n * tau);
    p.add_scaled_in_place(&locality_term(n, tau), params.a_local);
    p.add_scaled_in_place(&demand_term(dbar, tau, params.delta_max), params.a_demand);
    p.add_scaled_in_place(&time_term(time, tau), params.a_time);
    p.add_scaled_in_place(&redundancy_term(&flags, tau), params.a_nonredundant);
    Ok((p, VarIndex::new(n, tau)))
}

/// Decodes an assignment into exactly one node per step.
///
/// Empty steps get a uniformly random node. Steps with several active nodes
/// keep the candidate scoring lowest on the terms touching that step, with
/// earlier steps already rectified and later steps taken as given.
pub fn rectify(
    assignment: &[bool],
    pubo: &BinaryPolynomial,
    index: &VarIndex,
    time: &TimeMatrix,
    rng: &mut impl Rng,
) -> Route {
    assert_eq!(assignment.len(), index.num_vars(), "assignment length");
    let (n, tau) = (index.n(), index.tau());

    let mut by_step: Vec<Vec<(&[usize], f64)>> = vec![Vec::new(); tau];
    for (vars, c) in pubo.terms() {
        let mut steps: Vec<usize> = vars.iter().map(|&v| index.node_step(v).1).collect();
        steps.sort_unstable();
        steps.dedup();
        for s in steps {
            by_step[s].push((vars, c));
        }
    }

    let mut bits = assignment.to_vec();
    let mut nodes = Vec::with_capacity(tau);
    for (t, terms) in by_step.iter().enumerate() {
        let active: Vec<NodeId> = (0..n).filter(|&i| bits[index.var(i, t)]).collect();
        let choice = match active.len() {
            0 => rng.gen_range(0..n),
            1 => active[0],
            _ => {
                let mut best = (f64::INFINITY, active[0]);
                for &c in &active {
                    for i in 0..n {
                        bits[index.var(i, t)] = i == c;
                    }
                    let score: f64 = terms
                        .iter()
                        .filter(|(vars, _)| vars.iter().all(|&v| bits[v]))
                        .map(|(_, coeff)| coeff)
                        .sum();
                    if score < best.0 {
                        best = (score, c);
                    }
                }
                best.1
            }
        };
        for i in 0..n {
            bits[index.var(i, t)] = i == choice;
        }
        nodes.push(choice);
    }
    Route::new(nodes, time)
}

/// Trims a route that overruns the window, or extends one that fits by
/// cycling its own nodes until the next hop would overrun.
pub fn fit_to_window(route: &Route, time: &TimeMatrix, window: &DrivingWindow) -> Route {
    assert!(!route.nodes.is_empty(), "route must be nonempty");
    let t_max = window.t_max_s;
    let mut nodes = route.nodes.clone();
    let mut duration = time.route_duration(&nodes);

    if duration > t_max {
        while duration > t_max {
            nodes.pop();
            duration = time.route_duration(&nodes);
        }
        return Route {
            nodes,
            duration_s: duration,
        };
    }

    let orig = &route.nodes;
    let len = orig.len();
    let cycle: f64 = (0..len)
        .map(|k| time.get(orig[k], orig[(k + 1) % len]))
        .sum();
    if cycle == 0.0 {
        return Route::new(nodes, time);
    }
    let mut k = 0;
    loop {
        let cur = *nodes.last().unwrap();
        let next = orig[k % len];
        k += 1;
        if next == cur {
            continue;
        }
        let hop = time.get(cur, next);
        if duration + hop > t_max {
            break;
        }
        duration += hop;
        nodes.push(next);
    }
    Route::new(nodes, time)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(p: &BinaryPolynomial, bits: &[bool]) -> f64 {
        p.evaluate(bits).unwrap()
    }

    fn two_node_time(t01: f64, t10: f64) -> TimeMatrix {
        TimeMatrix::from_rows(vec![vec![0.0, t01], vec![t10, 0.0]]).unwrap()
    }

    fn dbar2(d01: f64) -> Matrix {
        Matrix::from_rows(vec![vec![0.0, d01], vec![0.0, 0.0]]).unwrap()
    }

    #[test]
    fn var_index_is_bijective() {
        let idx = VarIndex::new(4, 3);
        for v in 0..idx.num_vars() {
            let (i, t) = idx.node_step(v);
            assert_eq!(idx.var(i, t), v);
        }
        assert_eq!(idx.num_vars(), 12);
    }

    #[test]
    fn locality_examples() {
        let idx = VarIndex::new(3, 3);
        let p = locality_term(3, 3);
        assert_eq!(eval(&p, &idx.one_hot(&[0, 2, 1])), 0.0);
        assert_eq!(eval(&p, &vec![false; 9]), 3.0);
        let mut bits = idx.one_hot(&[0, 2, 1]);
        bits[idx.var(1, 1)] = true;
        assert_eq!(eval(&p, &bits), 1.0);
        assert!(p.degree() <= 2);
    }

    #[test]
    fn demand_examples() {
        assert!(demand_term(&Matrix::zeros(3), 4, 2).is_zero());

        let idx = VarIndex::new(2, 2);
        let p = demand_term(&dbar2(0.5), 2, 1);
        assert_eq!(eval(&p, &idx.one_hot(&[0, 1])), -0.5);

        let idx = VarIndex::new(2, 3);
        let p = demand_term(&dbar2(0.5), 3, 2);
        assert_eq!(eval(&p, &idx.one_hot(&[0, 0, 1])), -1.0);
    }

    #[test]
    fn time_examples() {
        let t = two_node_time(5.0, 7.0);
        let idx = VarIndex::new(2, 3);
        let p = time_term(&t, 3);
        assert_eq!(eval(&p, &idx.one_hot(&[1, 1, 1])), 0.0);
        assert_eq!(eval(&p, &idx.one_hot(&[0, 1, 0])), 12.0);
    }

    #[test]
    fn time_term_matches_route_duration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let rows = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { rng.gen_range(1.0..100.0) }).collect())
            .collect();
        let t = TimeMatrix::from_rows(rows).unwrap();
        let tau = 6;
        let p = time_term(&t, tau);
        let idx = VarIndex::new(n, tau);
        for _ in 0..100 {
            let nodes: Vec<usize> = (0..tau).map(|_| rng.gen_range(0..n)).collect();
            let expected = Route::new(nodes.clone(), &t).duration_s;
            let got = eval(&p, &idx.one_hot(&nodes));
            assert!((got - expected).abs() <= 1e-9 * expected.max(1.0));
        }
    }

    #[test]
    fn redundancy_examples() {
        assert!(redundancy_term(&Matrix::zeros(2), 5).is_zero());
        let flags = dbar2(1.0);

        let idx = VarIndex::new(2, 4);
        let p = redundancy_term(&flags, 4);
        assert_eq!(eval(&p, &idx.one_hot(&[0, 1, 0, 1])), 1.0);
        assert_eq!(p.degree(), 4);

        let idx = VarIndex::new(2, 5);
        let p = redundancy_term(&flags, 5);
        assert_eq!(eval(&p, &idx.one_hot(&[0, 1, 0, 1, 0])), 1.0);
    }

    #[test]
    fn flags_skip_zero_and_large_demand() {
        let d = Matrix::from_rows(vec![vec![0.0, 0.4, 3.0], vec![1.0, 0.0, 0.0], vec![0.0; 3]]).unwrap();
        let f = redundancy_flags(&d, 1.0);
        assert_eq!(f.to_rows(), vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0; 3]]);
    }

    #[test]
    fn variable_counts() {
        let t = TimeMatrix::new(Matrix::zeros(23)).unwrap();
        let d = Matrix::zeros(23);
        let (p, idx) = build_single_truck_pubo(&d, &t, &PuboParams::default()).unwrap();
        assert_eq!((p.num_vars(), idx.num_vars()), (345, 345));
        let params = PuboParams { tau: 5, ..PuboParams::default() };
        let (p, _) = build_single_truck_pubo(&d, &t, &params).unwrap();
        assert_eq!(p.num_vars(), 115);
    }

    #[test]
    fn no_demand_minimum_is_stationary() {
        let t = two_node_time(5.0, 7.0);
        let params = PuboParams { tau: 3, ..PuboParams::default() };
        let (p, idx) = build_single_truck_pubo(&Matrix::zeros(2), &t, &params).unwrap();
        let (_, best) = p.brute_force_minimize().unwrap();
        assert_eq!(best, 0.0);
        assert_eq!(eval(&p, &idx.one_hot(&[1, 1, 1])), 0.0);
    }

    #[test]
    fn invalid_params_rejected() {
        let t = two_node_time(1.0, 1.0);
        for bad in [
            PuboParams { tau: 1, ..PuboParams::default() },
            PuboParams { a_time: 0.0, ..PuboParams::default() },
            PuboParams { delta_max: 0, ..PuboParams::default() },
            PuboParams { redundancy_threshold: f64::NAN, ..PuboParams::default() },
        ] {
            assert!(build_single_truck_pubo(&Matrix::zeros(2), &t, &bad).is_err());
        }
        assert!(matches!(
            build_single_truck_pubo(&Matrix::zeros(3), &t, &PuboParams::default()),
            Err(PuboError::Shape(_))
        ));
    }

    #[test]
    fn rectify_keeps_local_assignments() {
        let t = two_node_time(5.0, 7.0);
        let params = PuboParams { tau: 4, ..PuboParams::default() };
        let (p, idx) = build_single_truck_pubo(&dbar2(0.3), &t, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = rectify(&idx.one_hot(&[0, 1, 1, 0]), &p, &idx, &t, &mut rng);
        assert_eq!(r.nodes, vec![0, 1, 1, 0]);
        assert_eq!(r.duration_s, 12.0);
    }

    #[test]
    fn rectify_fills_empty_steps_deterministically() {
        let t = two_node_time(5.0, 7.0);
        let params = PuboParams { tau: 6, ..PuboParams::default() };
        let (p, idx) = build_single_truck_pubo(&dbar2(0.3), &t, &params).unwrap();
        let zeros = vec![false; idx.num_vars()];
        let a = rectify(&zeros, &p, &idx, &t, &mut ChaCha8Rng::seed_from_u64(3));
        let b = rectify(&zeros, &p, &idx, &t, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.nodes.len(), 6);
    }

    #[test]
    fn rectify_picks_demand_serving_choice() {
        // Node 2 has a large shipment to node 1; at step 0 both 0 and 2 are on.
        let n = 3;
        let t = TimeMatrix::from_rows(vec![vec![0.0, 10.0, 10.0], vec![10.0, 0.0, 10.0], vec![10.0, 10.0, 0.0]]).unwrap();
        let mut d = Matrix::zeros(n);
        d[(2, 1)] = 2.0;
        d[(0, 1)] = 0.1;
        let params = PuboParams { tau: 3, ..PuboParams::default() };
        let (p, idx) = build_single_truck_pubo(&d, &t, &params).unwrap();
        let mut bits = idx.one_hot(&[0, 1, 1]);
        bits[idx.var(2, 0)] = true;

        let brute = [0usize, 2]
            .into_iter()
            .min_by(|&a, &b| {
                let va = eval(&p, &idx.one_hot(&[a, 1, 1]));
                let vb = eval(&p, &idx.one_hot(&[b, 1, 1]));
                va.total_cmp(&vb)
            })
            .unwrap();
        let r = rectify(&bits, &p, &idx, &t, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(r.nodes[0], brute);
        assert_eq!(r.nodes, vec![2, 1, 1]);
    }

    #[test]
    fn fit_examples() {
        let t = two_node_time(5.0, 5.0);
        let r = fit_to_window(&Route::new(vec![0, 1, 0], &t), &t, &DrivingWindow::new(7.0).unwrap());
        assert_eq!(r.nodes, vec![0, 1]);
        assert_eq!(r.duration_s, 5.0);

        let r = fit_to_window(&Route::new(vec![0, 1], &t), &t, &DrivingWindow::new(21.0).unwrap());
        assert_eq!(r.nodes, vec![0, 1, 0, 1, 0]);
        assert_eq!(r.duration_s, 20.0);

        let r = fit_to_window(&Route::new(vec![0, 1, 0], &t), &t, &DrivingWindow::new(10.0).unwrap());
        assert_eq!(r.nodes, vec![0, 1, 0]);

        let r = fit_to_window(&Route::new(vec![1], &t), &t, &DrivingWindow::new(1.0).unwrap());
        assert_eq!(r.nodes, vec![1]);
    }

    #[test]
    fn fit_extension_skips_self_hops() {
        let t = TimeMatrix::from_rows(vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let r = fit_to_window(&Route::new(vec![0, 0, 2], &t), &t, &DrivingWindow::new(4.0).unwrap());
        // 0 0 2 | 0 (0 skipped) 2 0 2
        assert_eq!(r.nodes, vec![0, 0, 2, 0, 2, 0]);
        assert_eq!(r.duration_s, 4.0);
    }

    #[test]
    fn route_json_shape() {
        let t = two_node_time(5.0, 5.0);
        let v = serde_json::to_value(Route::new(vec![0, 1], &t)).unwrap();
        assert_eq!(v, serde_json::json!({"nodes": [0, 1], "duration_s": 5.0}));
    }

    fn random_time(n: usize, rng: &mut ChaCha8Rng) -> TimeMatrix {
        let rows = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { rng.gen_range(0.0..50.0f64).round() }).collect())
            .collect();
        TimeMatrix::from_rows(rows).unwrap()
    }

    proptest! {
        #[test]
        fn fit_never_exceeds_window(seed in any::<u64>(), len in 1usize..12, t_max in 1.0f64..400.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_time(4, &mut rng);
            let nodes: Vec<usize> = (0..len).map(|_| rng.gen_range(0..4)).collect();
            let r = fit_to_window(&Route::new(nodes, &t), &t, &DrivingWindow::new(t_max).unwrap());
            prop_assert!(!r.nodes.is_empty());
            prop_assert!(r.duration_s <= t_max);
            prop_assert_eq!(r.duration_s, t.route_duration(&r.nodes));
        }

        #[test]
        fn rectify_is_one_hot(seed in any::<u64>(), density in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_time(4, &mut rng);
            let d = Matrix::from_rows((0..4).map(|i| (0..4).map(|j| if i != j && rng.gen_bool(0.4) { rng.gen_range(0.0..2.0) } else { 0.0 }).collect()).collect()).unwrap();
            let params = PuboParams { tau: 5, ..PuboParams::default() };
            let (p, idx) = build_single_truck_pubo(&d, &t, &params).unwrap();
            let bits: Vec<bool> = (0..idx.num_vars()).map(|_| rng.gen_bool(density)).collect();
            let r = rectify(&bits, &p, &idx, &t, &mut rng);
            prop_assert_eq!(r.nodes.len(), 5);
            prop_assert_eq!(eval(&locality_term(4, 5), &idx.one_hot(&r.nodes)), 0.0);
            for (step, &node) in r.nodes.iter().enumerate() {
                let active: Vec<usize> = (0..4).filter(|&i| bits[idx.var(i, step)]).collect();
                if !active.is_empty() {
                    prop_assert!(active.contains(&node));
                }
            }
        }
    }
}
