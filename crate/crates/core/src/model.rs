//! Problem data: nodes, driving times, boxes with required paths, and the
//! continuous demand tensors derived from them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

pub type NodeId = usize;

/// Capacity of every truck, in volume units.
pub const TRUCK_CAPACITY: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("unsupported path rank {0}; only rank 2 and rank 3 are handled")]
    UnsupportedRank(usize),
    #[error("invalid generator parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ModelError {
    ModelError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

/// Driving times in seconds. Zero diagonal, finite and nonnegative; not
/// necessarily symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct TimeMatrix(Matrix);

impl TimeMatrix {
    pub fn new(m: Matrix) -> Result<Self, ModelError> {
        for ((i, j), v) in m.iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid("time", format!("entry [{i}][{j}] = {v} is not a finite nonnegative time")));
            }
            if i == j && v != 0.0 {
                return Err(invalid("time", format!("diagonal entry [{i}][{i}] = {v} must be 0")));
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        Self::new(Matrix::from_rows(rows).map_err(|e| invalid("time", e))?)
    }

    /// Reads `n` rows of `n` comma-separated seconds, no header.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, ModelError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| ModelError::Parse(e.to_string()))?;
            let row = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| invalid("time", format!("row {i}: `{s}`: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn n(&self) -> usize {
        self.0.n()
    }

    pub fn get(&self, i: NodeId, j: NodeId) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    /// Total driving time along a node sequence.
    pub fn route_duration(&self, nodes: &[NodeId]) -> f64 {
        nodes.windows(2).map(|w| self.get(w[0], w[1])).fold(0.0, |acc, t| acc + t)
    }
}

impl TryFrom<Matrix> for TimeMatrix {
    type Error = ModelError;

    fn try_from(m: Matrix) -> Result<Self, Self::Error> {
        TimeMatrix::new(m)
    }
}

impl From<TimeMatrix> for Matrix {
    fn from(t: TimeMatrix) -> Self {
        t.0
    }
}

/// A physical box: a volume and the node path it must follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CargoBox {
    pub id: u64,
    pub volume: f64,
    pub path: Vec<NodeId>,
}

impl CargoBox {
    pub fn rank(&self) -> usize {
        self.path.len()
    }
}

/// All boxes sharing one required path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxGroup {
    pub path: Vec<NodeId>,
    pub total_volume: f64,
    pub box_ids: Vec<u64>,
}

/// Continuous off-board demand: `d2[i][j]` and `d3[i][j][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandTensors {
    n: usize,
    d2: Matrix,
    d3: Vec<f64>,
}

impl DemandTensors {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            d2: Matrix::zeros(n),
            d3: vec![0.0; n * n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d2(&self, i: NodeId, j: NodeId) -> f64 {
        self.d2[(i, j)]
    }

    pub fn d3(&self, i: NodeId, j: NodeId, k: NodeId) -> f64 {
        self.d3[(i * self.n + j) * self.n + k]
    }

    pub fn rank2(&self) -> &Matrix {
        &self.d2
    }

    pub fn add_rank2(&mut self, i: NodeId, j: NodeId, v: f64) {
        self.d2[(i, j)] += v;
    }

    pub fn add_rank3(&mut self, i: NodeId, j: NodeId, k: NodeId, v: f64) {
        let n = self.n;
        self.d3[(i * n + j) * n + k] += v;
    }

    /// Sum over both tensors.
    pub fn total(&self) -> f64 {
        self.d2.sum() + self.d3.iter().sum::<f64>()
    }

    /// `a * self + b * other`.
    pub fn linear_combination(&self, a: f64, other: &DemandTensors, b: f64) -> DemandTensors {
        assert_eq!(self.n, other.n);
        DemandTensors {
            n: self.n,
            d2: self.d2.map(|v| a * v).add_scaled(&other.d2, b),
            d3: self
                .d3
                .iter()
                .zip(&other.d3)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivingWindow {
    pub t_max_s: f64,
}

impl DrivingWindow {
    pub fn new(t_max_s: f64) -> Result<Self, ModelError> {
        if t_max_s > 0.0 && t_max_s.is_finite() {
            Ok(Self { t_max_s })
        } else {
            Err(invalid("window_s", format!("{t_max_s} must be positive")))
        }
    }
}

/// A complete routing problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceJson", into = "InstanceJson")]
pub struct ProblemInstance {
    pub n: usize,
    pub time: TimeMatrix,
    pub boxes: Vec<CargoBox>,
    pub window: DrivingWindow,
    pub truck_capacity: f64,
}

impl ProblemInstance {
    pub fn new(
        time: TimeMatrix,
        boxes: Vec<CargoBox>,
        window: DrivingWindow,
    ) -> Result<Self, ModelError> {
        let inst = Self {
            n: time.n(),
            time,
            boxes,
            window,
            truck_capacity: TRUCK_CAPACITY,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n == 0 {
            return Err(invalid("n", "must be at least 1"));
        }
        if self.time.n() != self.n {
            return Err(invalid("time", format!("is {0}x{0}, expected {1}x{1}", self.time.n(), self.n)));
        }
        if self.truck_capacity != TRUCK_CAPACITY {
            return Err(invalid("capacity", format!("{} must be 1.0", self.truck_capacity)));
        }
        DrivingWindow::new(self.window.t_max_s)?;
        let mut ids = BTreeSet::new();
        for (k, b) in self.boxes.iter().enumerate() {
            if !ids.insert(b.id) {
                return Err(invalid(format!("boxes[{k}].id"), format!("duplicate id {}", b.id)));
            }
            if !(b.volume > 0.0 && b.volume.is_finite()) {
                return Err(invalid(format!("boxes[{k}].volume"), format!("{} must be positive", b.volume)));
            }
            if !(2..=3).contains(&b.path.len()) {
                return Err(invalid(
                    format!("boxes[{k}].path"),
                    format!("rank {} unsupported; paths have 2 or 3 nodes", b.path.len()),
                ));
            }
            if let Some(&bad) = b.path.iter().find(|&&v| v >= self.n) {
                return Err(invalid(format!("boxes[{k}].path"), format!("node {bad} out of range for n={}", self.n)));
            }
            if b.path.windows(2).any(|w| w[0] == w[1]) {
                return Err(invalid(format!("boxes[{k}].path"), "consecutive nodes must differ"));
            }
        }
        Ok(())
    }

    pub fn total_volume(&self) -> f64 {
        self.boxes.iter().map(|b| b.volume).fold(0.0, |acc, v| acc + v)
    }

    pub fn demand_tensors(&self) -> Result<DemandTensors, ModelError> {
        box_soup(&group_boxes(&self.boxes), self.n)
    }

    /// Overall demand matrix of the box soup.
    pub fn overall_demand(&self) -> Result<Matrix, ModelError> {
        Ok(overall_demand(&self.demand_tensors()?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceJson {
    n: usize,
    time: Vec<Vec<f64>>,
    window_s: f64,
    capacity: f64,
    boxes: Vec<CargoBox>,
}

impl TryFrom<InstanceJson> for ProblemInstance {
    type Error = ModelError;

    fn try_from(j: InstanceJson) -> Result<Self, Self::Error> {
        let inst = ProblemInstance {
            n: j.n,
            time: TimeMatrix::from_rows(j.time)?,
            boxes: j.boxes,
            window: DrivingWindow { t_max_s: j.window_s },
            truck_capacity: j.capacity,
        };
        inst.validate()?;
        Ok(inst)
    }
}

impl From<ProblemInstance> for InstanceJson {
    fn from(p: ProblemInstance) -> Self {
        InstanceJson {
            n: p.n,
            time: p.time.0.to_rows(),
            window_s: p.window.t_max_s,
            capacity: p.truck_capacity,
            boxes: p.boxes,
        }
    }
}

/// One group per distinct path, ordered by path.
pub fn group_boxes(boxes: &[CargoBox]) -> Vec<BoxGroup> {
    let mut groups: BTreeMap<&[NodeId], BoxGroup> = BTreeMap::new();
    for b in boxes {
        let g = groups.entry(&b.path).or_insert_with(|| BoxGroup {
            path: b.path.clone(),
            total_volume: 0.0,
            box_ids: Vec::new(),
        });
        g.total_volume += b.volume;
        g.box_ids.push(b.id);
    }
    groups.into_values().collect()
}

/// Treats each group's volume as continuous demand along its path.
pub fn box_soup(groups: &[BoxGroup], n: usize) -> Result<DemandTensors, ModelError> {
    let mut d = DemandTensors::zeros(n);
    for g in groups {
        if let Some(&bad) = g.path.iter().find(|&&v| v >= n) {
            return Err(invalid("path", format!("node {bad} out of range for n={n}")));
        }
        match *g.path.as_slice() {
            [i, j] => d.add_rank2(i, j, g.total_volume),
            [i, j, k] => d.add_rank3(i, j, k, g.total_volume),
            _ => return Err(ModelError::UnsupportedRank(g.path.len())),
        }
    }
    Ok(d)
}

/// `D̄[i][j] = d2[i][j] + Σ_k (d3[i][j][k] + d3[k][i][j])`: every leg a unit of
/// demand will travel, collapsed to an origin/destination matrix.
pub fn overall_demand(d: &DemandTensors) -> Matrix {
    let n = d.n();
    let mut out = d.rank2().clone();
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += d.d3(i, j, k) + d.d3(k, i, j);
            }
            out[(i, j)] += s;
        }
    }
    out
}

/// Shape of a synthetic instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub boxes: usize,
    /// Number of distinct required paths.
    pub paths: usize,
    /// Share of distinct paths that have rank 3.
    pub rank3_fraction: f64,
    pub min_time_s: f64,
    pub max_time_s: f64,
    pub min_volume: f64,
    pub max_volume: f64,
    pub window_s: f64,
    pub symmetric: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 23,
            boxes: 10_000,
            paths: 115,
            rank3_fraction: 0.3,
            min_time_s: 300.0,
            max_time_s: 4.0 * 3600.0,
            min_volume: 0.001,
            max_volume: 0.05,
            window_s: 16.0 * 3600.0,
            symmetric: true,
        }
    }
}

impl GeneratorConfig {
    fn check(&self) -> Result<(usize, usize), ModelError> {
        let bad = |m: String| Err(ModelError::Parameter(m));
        if self.n < 2 {
            return bad(format!("n = {} must be at least 2", self.n));
        }
        if self.paths == 0 || self.boxes < self.paths {
            return bad(format!(
                "need 1 <= paths <= boxes, got paths={} boxes={}",
                self.paths, self.boxes
            ));
        }
        if !(0.0..=1.0).contains(&self.rank3_fraction) {
            return bad(format!("rank3_fraction {} outside [0, 1]", self.rank3_fraction));
        }
        if !(self.min_time_s > 0.0 && self.min_time_s <= self.max_time_s && self.max_time_s.is_finite()) {
            return bad(format!("time range [{}, {}] invalid", self.min_time_s, self.max_time_s));
        }
        if !(self.min_volume > 0.0 && self.min_volume <= self.max_volume && self.max_volume <= TRUCK_CAPACITY) {
            return bad(format!("volume range [{}, {}] invalid", self.min_volume, self.max_volume));
        }
        if !(self.window_s > 0.0 && self.window_s.is_finite()) {
            return bad(format!("window {} must be positive", self.window_s));
        }
        let n = self.n;
        let slots2 = n * (n - 1);
        let slots3 = n * (n - 1) * (n - 2);
        if self.paths > slots2 + slots3 {
            return bad(format!(
                "{} distinct paths requested but only {} fit on {n} nodes",
                self.paths,
                slots2 + slots3
            ));
        }
        let r3 = (self.rank3_fraction * self.paths as f64).round() as usize;
        let r2 = self.paths - r3;
        if r3 > slots3 || r2 > slots2 {
            return bad(format!(
                "{r2} rank-2 and {r3} rank-3 paths requested; {n} nodes allow {slots2} and {slots3}"
            ));
        }
        Ok((r2, r3))
    }
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Deterministic synthetic instance.
///
/// When the requested path count fits in the rank-2 slots, rank-3 paths are
/// laid over legs that other paths also use, so the overall demand matrix has
/// exactly `paths` nonzero entries.
pub fn generate_instance(cfg: &GeneratorConfig, seed: u64) -> Result<ProblemInstance, ModelError> {
    let (r2, r3) = cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n;

    let mut rows = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j || (cfg.symmetric && j < i) {
                continue;
            }
            let t = log_uniform(&mut rng, cfg.min_time_s, cfg.max_time_s).round();
            rows[i][j] = t;
            if cfg.symmetric {
                rows[j][i] = t;
            }
        }
    }
    let time = TimeMatrix::from_rows(rows)?;

    let mut paths = if cfg.paths <= n * (n - 1) {
        shared_leg_paths(n, cfg.paths, r2, r3, &mut rng)
    } else {
        independent_paths(n, r2, r3, &mut rng)
    };
    paths.shuffle(&mut rng);

    let weights: Vec<f64> = paths.iter().map(|_| log_uniform(&mut rng, 1.0, 20.0)).collect();
    let dist = rand::distributions::WeightedIndex::new(&weights).expect("positive weights");
    let mut assignment: Vec<usize> = (0..paths.len()).collect();
    assignment.extend((paths.len()..cfg.boxes).map(|_| rng.sample(&dist)));
    assignment.shuffle(&mut rng);

    let boxes = assignment
        .into_iter()
        .enumerate()
        .map(|(id, p)| CargoBox {
            id: id as u64,
            volume: log_uniform(&mut rng, cfg.min_volume, cfg.max_volume),
            path: paths[p].clone(),
        })
        .collect();
    ProblemInstance::new(time, boxes, DrivingWindow::new(cfg.window_s)?)
}

fn all_triples(n: usize) -> Vec<Vec<NodeId>> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if i != j && j != k && i != k {
                    out.push(vec![i, j, k]);
                }
            }
        }
    }
    out
}

fn all_pairs(n: usize) -> Vec<(NodeId, NodeId)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

fn shared_leg_paths(
    n: usize,
    total: usize,
    r2: usize,
    r3: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<NodeId>> {
    let mut triples = all_triples(n);
    triples.shuffle(rng);
    let mut legs: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
    let mut out: Vec<Vec<NodeId>> = Vec::with_capacity(total);
    for t in triples {
        if out.len() == r3 {
            break;
        }
        let new_legs = [(t[0], t[1]), (t[1], t[2])]
            .iter()
            .filter(|l| !legs.contains(l))
            .count();
        if legs.len() + new_legs <= total {
            legs.insert((t[0], t[1]));
            legs.insert((t[1], t[2]));
            out.push(t);
        }
    }

    let mut shared: Vec<_> = legs.iter().copied().collect();
    shared.shuffle(rng);
    let reuse = legs.len().saturating_sub(out.len()).min(r2);
    let mut fresh: Vec<_> = all_pairs(n).into_iter().filter(|p| !legs.contains(p)).collect();
    fresh.shuffle(rng);
    out.extend(shared.into_iter().take(reuse).map(|(i, j)| vec![i, j]));
    out.extend(fresh.into_iter().take(r2 - reuse).map(|(i, j)| vec![i, j]));

    // Tight leg budgets can leave too few paths; top up without sharing.
    if out.len() < total {
        let used: BTreeSet<Vec<NodeId>> = out.iter().cloned().collect();
        let have3 = out.iter().filter(|p| p.len() == 3).count();
        let mut extra3: Vec<_> = all_triples(n).into_iter().filter(|t| !used.contains(t)).collect();
        extra3.shuffle(rng);
        out.extend(extra3.into_iter().take(r3 - have3));
        let mut extra2: Vec<_> = all_pairs(n)
            .into_iter()
            .map(|(i, j)| vec![i, j])
            .filter(|p| !used.contains(p))
            .collect();
        extra2.shuffle(rng);
        let missing = total - out.len();
        out.extend(extra2.into_iter().take(missing));
    }
    out
}

fn independent_paths(n: usize, r2: usize, r3: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<NodeId>> {
    let mut pairs = all_pairs(n);
    pairs.shuffle(rng);
    let mut triples = all_triples(n);
    triples.shuffle(rng);
    pairs
        .into_iter()
        .take(r2)
        .map(|(i, j)| vec![i, j])
        .chain(triples.into_iter().take(r3))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cbox(id: u64, volume: f64, path: &[NodeId]) -> CargoBox {
        CargoBox {
            id,
            volume,
            path: path.to_vec(),
        }
    }

    fn small_instance() -> ProblemInstance {
        let time = TimeMatrix::from_rows(vec![
            vec![0.0, 5.0, 9.0],
            vec![5.0, 0.0, 4.0],
            vec![9.0, 4.0, 0.0],
        ])
        .unwrap();
        ProblemInstance::new(
            time,
            vec![cbox(0, 0.2, &[0, 1]), cbox(1, 0.3, &[0, 1]), cbox(2, 2.0, &[0, 1, 2])],
            DrivingWindow::new(100.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn grouping_merges_identical_paths() {
        let groups = group_boxes(&[cbox(0, 0.2, &[0, 1]), cbox(1, 0.3, &[0, 1])]);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].total_volume, 0.5);
        assert_eq!(groups[0].box_ids, vec![0, 1]);

        let groups = group_boxes(&[cbox(0, 0.2, &[0, 1]), cbox(1, 0.3, &[0, 1, 2])]);
        assert_eq!(groups.len(), 2);
    }

    #[test]
    fn soup_examples() {
        let g = group_boxes(&[cbox(0, 0.5, &[0, 1])]);
        let d = box_soup(&g, 3).unwrap();
        assert_eq!(d.d2(0, 1), 0.5);
        assert_eq!(d.total(), 0.5);

        let g = group_boxes(&[cbox(0, 2.0, &[0, 1, 2])]);
        let d = box_soup(&g, 3).unwrap();
        assert_eq!(d.d3(0, 1, 2), 2.0);
        assert_eq!(d.rank2().sum(), 0.0);
    }

    #[test]
    fn soup_rejects_rank_four() {
        let g = vec![BoxGroup {
            path: vec![0, 1, 2, 3],
            total_volume: 1.0,
            box_ids: vec![0],
        }];
        assert!(matches!(box_soup(&g, 4), Err(ModelError::UnsupportedRank(4))));
    }

    #[test]
    fn overall_demand_examples() {
        let mut d = DemandTensors::zeros(3);
        d.add_rank2(1, 0, 0.7);
        assert_eq!(overall_demand(&d), d.rank2().clone());

        let mut d = DemandTensors::zeros(3);
        d.add_rank3(0, 1, 2, 2.0);
        let m = overall_demand(&d);
        for ((i, j), v) in m.iter() {
            let expected = if (i, j) == (0, 1) || (i, j) == (1, 2) { 2.0 } else { 0.0 };
            assert_eq!(v, expected, "entry ({i}, {j})");
        }
    }

    #[test]
    fn default_generator_shape() {
        let cfg = GeneratorConfig {
            boxes: 2_000,
            ..GeneratorConfig::default()
        };
        let inst = generate_instance(&cfg, 0).unwrap();
        assert_eq!(inst.n, 23);
        assert_eq!(inst.window.t_max_s, 57_600.0);
        assert_eq!(inst.boxes.len(), 2_000);
        assert_eq!(group_boxes(&inst.boxes).len(), 115);
        let dbar = inst.overall_demand().unwrap();
        assert_eq!(dbar.count_nonzero(), 115);
        assert_eq!(dbar.n() * dbar.n(), 529);
        for ((i, j), t) in inst.time.as_matrix().iter() {
            if i == j {
                assert_eq!(t, 0.0);
            } else {
                assert!((300.0..=14_400.0).contains(&t));
                assert_eq!(t, inst.time.get(j, i));
            }
        }
        assert!(inst.boxes.iter().all(|b| (0.001..=0.05).contains(&b.volume)));
        let rank3 = group_boxes(&inst.boxes).iter().filter(|g| g.path.len() == 3).count();
        assert_eq!(rank3, 35);
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = GeneratorConfig {
            boxes: 500,
            ..GeneratorConfig::default()
        };
        assert_eq!(generate_instance(&cfg, 9).unwrap(), generate_instance(&cfg, 9).unwrap());
        assert_ne!(generate_instance(&cfg, 9).unwrap(), generate_instance(&cfg, 10).unwrap());
    }

    #[test]
    fn generator_asymmetric_toggle() {
        let cfg = GeneratorConfig {
            boxes: 200,
            symmetric: false,
            ..GeneratorConfig::default()
        };
        let inst = generate_instance(&cfg, 1).unwrap();
        let t = &inst.time;
        assert!((0..23).any(|i| (0..23).any(|j| t.get(i, j) != t.get(j, i))));
    }

    #[test]
    fn generator_rejects_infeasible() {
        let cfg = GeneratorConfig {
            n: 3,
            paths: 9999,
            boxes: 10_000,
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate_instance(&cfg, 0), Err(ModelError::Parameter(_))));
        let cfg = GeneratorConfig {
            n: 2,
            paths: 2,
            boxes: 10,
            rank3_fraction: 0.5,
            ..GeneratorConfig::default()
        };
        assert!(generate_instance(&cfg, 0).is_err());
        let cfg = GeneratorConfig {
            boxes: 10,
            ..GeneratorConfig::default()
        };
        assert!(generate_instance(&cfg, 0).is_err());
    }

    #[test]
    fn generator_beyond_rank2_slots() {
        // 4 nodes: 12 rank-2 slots, 24 rank-3 slots
        let cfg = GeneratorConfig {
            n: 4,
            paths: 30,
            boxes: 100,
            rank3_fraction: 0.7,
            ..GeneratorConfig::default()
        };
        let inst = generate_instance(&cfg, 3).unwrap();
        assert_eq!(group_boxes(&inst.boxes).len(), 30);
    }

    #[test]
    fn json_round_trip_and_errors() {
        let inst = small_instance();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("inst.json");
        inst.save(&p).unwrap();
        assert_eq!(ProblemInstance::load(&p).unwrap(), inst);

        let mut v: serde_json::Value = serde_json::from_str(&inst.to_json()).unwrap();
        v.as_object_mut().unwrap().remove("time");
        let err = ProblemInstance::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("time"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&inst.to_json()).unwrap();
        v["boxes"][1]["volume"] = serde_json::json!(-0.3);
        let err = ProblemInstance::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("boxes[1].volume"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&inst.to_json()).unwrap();
        v["capacity"] = serde_json::json!(2.0);
        assert!(ProblemInstance::from_json(&v.to_string()).is_err());

        let mut v: serde_json::Value = serde_json::from_str(&inst.to_json()).unwrap();
        v["time"][1][1] = serde_json::json!(3.0);
        assert!(ProblemInstance::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn time_matrix_from_csv() {
        let t = TimeMatrix::from_csv_reader("0, 12.5\n7,0\n".as_bytes()).unwrap();
        assert_eq!(t.get(0, 1), 12.5);
        assert_eq!(t.get(1, 0), 7.0);
        assert!(TimeMatrix::from_csv_reader("0,1\n1\n".as_bytes()).is_err());
        assert!(TimeMatrix::from_csv_reader("0,x\n1,0\n".as_bytes()).is_err());
        assert!(TimeMatrix::from_csv_reader("1,1\n1,0\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn grouping_partitions_and_soup_conserves_mass(seed in any::<u64>(), boxes in 1usize..200) {
            let cfg = GeneratorConfig {
                n: 6,
                boxes: boxes.max(10),
                paths: 10,
                ..GeneratorConfig::default()
            };
            let inst = generate_instance(&cfg, seed).unwrap();
            let groups = group_boxes(&inst.boxes);
            let mut seen = BTreeSet::new();
            for g in &groups {
                for id in &g.box_ids {
                    prop_assert!(seen.insert(*id));
                }
            }
            prop_assert_eq!(seen.len(), inst.boxes.len());
            let d = box_soup(&groups, inst.n).unwrap();
            let total = inst.total_volume();
            prop_assert!((d.total() - total).abs() <= 1e-9 * total);
        }

        #[test]
        fn generator_hits_requested_path_count(
            seed in any::<u64>(),
            n in 3usize..7,
            paths in 1usize..40,
            rank3_fraction in 0.0f64..=1.0,
        ) {
            let cfg = GeneratorConfig { n, boxes: 60, paths, rank3_fraction, ..GeneratorConfig::default() };
            if let Ok(inst) = generate_instance(&cfg, seed) {
                let groups = group_boxes(&inst.boxes);
                prop_assert_eq!(groups.len(), paths);
                let (_, r3) = cfg.check().unwrap();
                prop_assert_eq!(groups.iter().filter(|g| g.path.len() == 3).count(), r3);
            }
        }

        #[test]
        fn overall_demand_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let cfg = GeneratorConfig { n: 5, boxes: 40, paths: 12, rank3_fraction: 0.5, ..GeneratorConfig::default() };
            let d = generate_instance(&cfg, seed).unwrap().demand_tensors().unwrap();
            let e = generate_instance(&cfg, seed ^ 0xdead).unwrap().demand_tensors().unwrap();
            let lhs = overall_demand(&d.linear_combination(a, &e, b));
            let rhs = overall_demand(&d).map(|v| a * v).add_scaled(&overall_demand(&e), b);
            for ((_, x), (_, y)) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}
