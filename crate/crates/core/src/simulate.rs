//! Box-level simulation of a route set. Every box is tracked individually as
//! trucks drive their routes concurrently; capacity and the driving window
//! are enforced exactly.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashSet};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CargoBox, NodeId, ProblemInstance};
use crate::pubo_builder::Route;
use crate::seed::stream_rng;

/// Slack allowed on capacity comparisons.
pub const CAPACITY_TOLERANCE: f64 = 1e-12;

/// Default number of correction rounds.
pub const DEFAULT_ROUNDS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid routes: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxLocation {
    Node(NodeId),
    Truck(usize),
}

/// Where a box is and how far along its path it has come. `progress` is the
/// 1-based path position last reached, so the next stop is `path[progress]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxState {
    pub id: u64,
    pub location: BoxLocation,
    pub progress: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Arrive,
    Pickup,
    Dropoff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t_s: f64,
    pub truck: usize,
    pub event: EventKind,
    pub node: NodeId,
    #[serde(rename = "box")]
    pub box_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stop {
    pub node: NodeId,
    pub arrival_s: f64,
    pub unloaded: Vec<u64>,
    pub loaded: Vec<u64>,
    /// Volume aboard when leaving this stop.
    pub cargo_volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Itinerary {
    pub truck: usize,
    pub stops: Vec<Stop>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub satisfied_volume_fraction: f64,
    pub satisfied_box_fraction: f64,
    pub satisfied_volume: f64,
    pub total_volume: f64,
    pub truck_count: usize,
    pub total_drive_time_s: f64,
    pub per_truck_carried_volume: Vec<f64>,
    /// Distinct `(from, to)` hops actually driven, sorted.
    pub driven_edges: Vec<(NodeId, NodeId)>,
    pub violations: Vec<String>,
    pub event_log: Vec<Event>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Order in which eligible boxes at a node are considered for loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PickupOrder {
    #[default]
    AscendingId,
    Shuffled { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimOptions {
    pub pickup_order: PickupOrder,
    /// Cross-check box bookkeeping after every event.
    pub strict: bool,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub report: SimReport,
    pub itineraries: Vec<Itinerary>,
    pub boxes: Vec<BoxState>,
}

impl Simulation {
    /// Volume waiting at nodes at the end of the run, keyed by
    /// `(current node, next required node)`.
    pub fn unsatisfied_pairs(&self, instance: &ProblemInstance) -> BTreeMap<(NodeId, NodeId), f64> {
        let by_id: BTreeMap<u64, &CargoBox> = instance.boxes.iter().map(|b| (b.id, b)).collect();
        let mut out = BTreeMap::new();
        for s in &self.boxes {
            let b = by_id[&s.id];
            if let BoxLocation::Node(k) = s.location {
                if s.progress < b.rank() {
                    *out.entry((k, b.path[s.progress])).or_insert(0.0) += b.volume;
                }
            }
        }
        out
    }
}

pub fn run_full_simulation(instance: &ProblemInstance, routes: &[Route]) -> Result<SimReport, SimError> {
    Ok(simulate(instance, routes, &SimOptions::default())?.report)
}

pub fn validate_routes(instance: &ProblemInstance, routes: &[Route]) -> Result<(), SimError> {
    let bad: Vec<String> = routes
        .iter()
        .enumerate()
        .filter_map(|(m, r)| {
            if r.nodes.is_empty() {
                Some(format!("route {m} is empty"))
            } else {
                r.nodes
                    .iter()
                    .find(|&&v| v >= instance.n)
                    .map(|v| format!("route {m} visits node {v} (n = {})", instance.n))
            }
        })
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(SimError::Validation(bad.join("; ")))
    }
}

#[derive(PartialEq)]
struct Pending {
    t: f64,
    truck: usize,
    seq: u64,
    pos: usize,
}

impl Eq for Pending {}

impl Ord for Pending {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t
            .total_cmp(&self.t)
            .then(other.truck.cmp(&self.truck))
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Truck<'r> {
    nodes: &'r [NodeId],
    cargo: Vec<usize>,
    cargo_volume: f64,
}

struct Engine<'a> {
    inst: &'a ProblemInstance,
    order: Vec<&'a CargoBox>,
    states: Vec<BoxState>,
    inventory: Vec<BTreeMap<NodeId, BTreeSet<usize>>>,
    trucks: Vec<Truck<'a>>,
    events: Vec<Event>,
    itineraries: Vec<Itinerary>,
    violations: Vec<String>,
    shuffle: Option<ChaCha8Rng>,
    strict: bool,
    drive_time: f64,
}

impl<'a> Engine<'a> {
    fn new(inst: &'a ProblemInstance, routes: &'a [Route], opts: &SimOptions) -> Self {
        let mut order: Vec<&CargoBox> = inst.boxes.iter().collect();
        order.sort_by_key(|b| b.id);
        let mut inventory = vec![BTreeMap::<NodeId, BTreeSet<usize>>::new(); inst.n];
        let states = order
            .iter()
            .enumerate()
            .map(|(k, b)| {
                inventory[b.path[0]].entry(b.path[1]).or_default().insert(k);
                BoxState {
                    id: b.id,
                    location: BoxLocation::Node(b.path[0]),
                    progress: 1,
                }
            })
            .collect();
        Self {
            inst,
            order,
            states,
            inventory,
            trucks: routes
                .iter()
                .map(|r| Truck {
                    nodes: &r.nodes,
                    cargo: Vec::new(),
                    cargo_volume: 0.0,
                })
                .collect(),
            events: Vec::new(),
            itineraries: (0..routes.len())
                .map(|truck| Itinerary {
                    truck,
                    stops: Vec::new(),
                })
                .collect(),
            violations: Vec::new(),
            shuffle: match opts.pickup_order {
                PickupOrder::AscendingId => None,
                PickupOrder::Shuffled { seed } => Some(stream_rng(seed, 0)),
            },
            strict: opts.strict,
            drive_time: 0.0,
        }
    }

    fn log(&mut self, t_s: f64, truck: usize, event: EventKind, node: NodeId, box_id: Option<u64>) {
        self.events.push(Event {
            t_s,
            truck,
            event,
            node,
            box_id,
        });
    }

    fn run(mut self) -> Simulation {
        let t_max = self.inst.window.t_max_s;
        let mut heap = BinaryHeap::new();
        let mut seq = 0u64;
        for truck in 0..self.trucks.len() {
            heap.push(Pending {
                t: 0.0,
                truck,
                seq,
                pos: 0,
            });
            seq += 1;
        }
        while let Some(ev) = heap.pop() {
            if ev.t > t_max {
                self.violations.push(format!("truck {} arrives at {} s, after the window", ev.truck, ev.t));
            }
            self.arrive(ev.truck, ev.pos, ev.t);
            if self.strict {
                self.check_bookkeeping();
            }
            let nodes = self.trucks[ev.truck].nodes;
            if ev.pos + 1 < nodes.len() {
                let hop = self.inst.time.get(nodes[ev.pos], nodes[ev.pos + 1]);
                if ev.t + hop <= t_max {
                    self.drive_time += hop;
                    heap.push(Pending {
                        t: ev.t + hop,
                        truck: ev.truck,
                        seq,
                        pos: ev.pos + 1,
                    });
                    seq += 1;
                }
            }
        }
        self.finish()
    }

    fn arrive(&mut self, m: usize, pos: usize, t: f64) {
        let node = self.trucks[m].nodes[pos];
        self.log(t, m, EventKind::Arrive, node, None);

        let mut unloaded = Vec::new();
        let cargo = std::mem::take(&mut self.trucks[m].cargo);
        let mut kept = Vec::with_capacity(cargo.len());
        for k in cargo {
            let b = self.order[k];
            let s = &mut self.states[k];
            if b.path[s.progress] != node {
                kept.push(k);
                continue;
            }
            s.progress += 1;
            s.location = BoxLocation::Node(node);
            if s.progress < b.rank() {
                self.inventory[node].entry(b.path[s.progress]).or_default().insert(k);
            }
            unloaded.push(b.id);
            self.log(t, m, EventKind::Dropoff, node, Some(b.id));
        }
        self.trucks[m].cargo_volume = kept.iter().map(|&k| self.order[k].volume).fold(0.0, |acc, v| acc + v);
        self.trucks[m].cargo = kept;

        let loaded = self.pick_up(m, pos, t);
        let cargo_volume = self.trucks[m].cargo_volume;
        if cargo_volume > self.inst.truck_capacity + CAPACITY_TOLERANCE {
            self.violations.push(format!("truck {m} carries {cargo_volume} at {t} s"));
        }
        self.itineraries[m].stops.push(Stop {
            node,
            arrival_s: t,
            unloaded,
            loaded,
            cargo_volume,
        });
    }

    /// Loads eligible boxes at the truck's current stop, destinations in
    /// remaining-visit order, each destination once.
    fn pick_up(&mut self, m: usize, pos: usize, t: f64) -> Vec<u64> {
        let nodes = self.trucks[m].nodes;
        let node = nodes[pos];
        let mut seen = HashSet::new();
        let mut loaded = Vec::new();
        for &dest in &nodes[pos + 1..] {
            if dest == node || !seen.insert(dest) {
                continue;
            }
            let Some(waiting) = self.inventory[node].get(&dest) else {
                continue;
            };
            let mut candidates: Vec<usize> = waiting.iter().copied().collect();
            if let Some(rng) = self.shuffle.as_mut() {
                candidates.shuffle(rng);
            }
            for k in candidates {
                let b = self.order[k];
                let truck = &mut self.trucks[m];
                if truck.cargo_volume + b.volume > self.inst.truck_capacity + CAPACITY_TOLERANCE {
                    continue;
                }
                truck.cargo_volume += b.volume;
                truck.cargo.push(k);
                self.states[k].location = BoxLocation::Truck(m);
                self.inventory[node].get_mut(&dest).unwrap().remove(&k);
                loaded.push(b.id);
                self.log(t, m, EventKind::Pickup, node, Some(b.id));
            }
        }
        loaded
    }

    fn check_bookkeeping(&mut self) {
        let mut seen = vec![0u32; self.states.len()];
        for (node, by_next) in self.inventory.iter().enumerate() {
            for (&next, ks) in by_next {
                for &k in ks {
                    seen[k] += 1;
                    let (b, s) = (self.order[k], self.states[k]);
                    if s.location != BoxLocation::Node(node) || b.path.get(s.progress) != Some(&next) {
                        self.violations.push(format!("box {} misfiled at node {node}", b.id));
                    }
                }
            }
        }
        for (m, truck) in self.trucks.iter().enumerate() {
            for &k in &truck.cargo {
                seen[k] += 1;
                if self.states[k].location != BoxLocation::Truck(m) {
                    self.violations.push(format!("box {} aboard truck {m} but recorded elsewhere", self.order[k].id));
                }
            }
        }
        for (k, s) in self.states.iter().enumerate() {
            let b = self.order[k];
            if s.progress == b.rank() {
                seen[k] += 1;
            }
            if seen[k] != 1 {
                self.violations.push(format!("box {} appears in {} places", b.id, seen[k]));
            }
            if !(1..=b.rank()).contains(&s.progress) {
                self.violations.push(format!("box {} has progress {}", b.id, s.progress));
            }
            if let BoxLocation::Node(v) = s.location {
                if b.path[s.progress - 1] != v {
                    self.violations.push(format!("box {} at node {v}, off its path", b.id));
                }
            }
        }
    }

    fn finish(self) -> Simulation {
        let metrics = compute_metrics(&self.states, self.inst, &self.events, self.trucks.len());
        Simulation {
            report: SimReport {
                total_drive_time_s: self.drive_time,
                violations: self.violations,
                event_log: self.events,
                ..metrics
            },
            itineraries: self.itineraries,
            boxes: self.states,
        }
    }
}

/// Runs every route concurrently against the instance's boxes.
pub fn simulate(instance: &ProblemInstance, routes: &[Route], opts: &SimOptions) -> Result<Simulation, SimError> {
    validate_routes(instance, routes)?;
    Ok(Engine::new(instance, routes, opts).run())
}

/// Satisfaction metrics from final box states and the event log. Drive time
/// and violations are left empty.
pub fn compute_metrics(
    boxes: &[BoxState],
    instance: &ProblemInstance,
    events: &[Event],
    truck_count: usize,
) -> SimReport {
    let by_id: BTreeMap<u64, &CargoBox> = instance.boxes.iter().map(|b| (b.id, b)).collect();
    let total_volume = instance.total_volume();
    let mut satisfied_volume = 0.0;
    let mut satisfied_boxes = 0usize;
    for s in boxes {
        let b = by_id[&s.id];
        if s.progress == b.rank() && s.location == BoxLocation::Node(*b.path.last().unwrap()) {
            satisfied_volume += b.volume;
            satisfied_boxes += 1;
        }
    }
    let mut carried = vec![0.0; truck_count];
    let mut edges = BTreeSet::new();
    let mut last_stop: Vec<Option<NodeId>> = vec![None; truck_count];
    for e in events {
        match e.event {
            EventKind::Pickup => carried[e.truck] += by_id[&e.box_id.expect("pickup names a box")].volume,
            EventKind::Arrive => {
                if let Some(prev) = last_stop[e.truck] {
                    if prev != e.node {
                        edges.insert((prev, e.node));
                    }
                }
                last_stop[e.truck] = Some(e.node);
            }
            EventKind::Dropoff => {}
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { (a / b).clamp(0.0, 1.0) } else { 0.0 };
    SimReport {
        satisfied_volume_fraction: ratio(satisfied_volume, total_volume),
        satisfied_box_fraction: ratio(satisfied_boxes as f64, instance.boxes.len() as f64),
        satisfied_volume,
        total_volume,
        truck_count,
        total_drive_time_s: 0.0,
        per_truck_carried_volume: carried,
        driven_edges: edges.into_iter().collect(),
        violations: Vec::new(),
        event_log: Vec::new(),
    }
}

/// Index of the first stop from which the truck drove only empty, if it
/// drove at all after that point.
fn empty_tail_start(itinerary: &Itinerary) -> Option<usize> {
    let stops = &itinerary.stops;
    let mut k = stops.len();
    while k > 0 && stops[k - 1].cargo_volume == 0.0 {
        k -= 1;
    }
    (k + 1 < stops.len()).then_some(k)
}

/// `prefix` followed by a back-and-forth between `a` and `b`, entered at
/// whichever endpoint is nearer, for as long as the window allows.
fn shuttle_route(instance: &ProblemInstance, prefix: &[NodeId], a: NodeId, b: NodeId) -> Option<Route> {
    let time = &instance.time;
    let t_max = instance.window.t_max_s;
    let mut nodes = prefix.to_vec();
    let mut duration = time.route_duration(&nodes);
    let here = *nodes.last()?;
    let (first, second) = if time.get(here, b) < time.get(here, a) { (b, a) } else { (a, b) };
    let mut next = first;
    loop {
        let cur = *nodes.last().unwrap();
        if next != cur {
            let hop = time.get(cur, next);
            if duration + hop > t_max {
                break;
            }
            duration += hop;
            nodes.push(next);
        }
        next = if next == first { second } else { first };
        if nodes.len() > prefix.len() + 1 && time.get(first, second) + time.get(second, first) == 0.0 {
            break;
        }
    }
    (nodes.len() > prefix.len()).then(|| Route::new(nodes, time))
}

/// Repeatedly replaces empty route tails with a shuttle between the node pair
/// holding the most stranded volume, keeping each change only if the
/// satisfied volume fraction strictly rises. A pair whose shuttle was
/// rejected is not proposed again.
pub fn correct_routes(
    instance: &ProblemInstance,
    routes: &[Route],
    rounds: usize,
    opts: &SimOptions,
) -> Result<(Vec<Route>, Simulation), SimError> {
    let mut best_routes = routes.to_vec();
    let mut best = simulate(instance, &best_routes, opts)?;
    let mut rejected: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
    for round in 0..rounds {
        let pair = best
            .unsatisfied_pairs(instance)
            .into_iter()
            .filter(|(p, v)| *v > 0.0 && !rejected.contains(p))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some(((a, b), volume)) = pair else {
            break;
        };
        let mut candidate = best_routes.clone();
        let mut changed = false;
        for (m, it) in best.itineraries.iter().enumerate() {
            let Some(k) = empty_tail_start(it) else {
                continue;
            };
            if let Some(r) = shuttle_route(instance, &candidate[m].nodes[..=k], a, b) {
                if r.nodes != candidate[m].nodes {
                    candidate[m] = r;
                    changed = true;
                }
            }
        }
        if !changed {
            rejected.insert((a, b));
            continue;
        }
        let trial = simulate(instance, &candidate, opts)?;
        let before = best.report.satisfied_volume_fraction;
        let after = trial.report.satisfied_volume_fraction;
        log::debug!("correction round {round}: pair ({a}, {b}) stranded {volume:.4}, {before:.6} -> {after:.6}");
        if after > before {
            best_routes = candidate;
            best = trial;
        } else {
            rejected.insert((a, b));
        }
    }
    Ok((best_routes, best))
}

/// JSON-lines event log.
pub fn write_event_log<W: std::io::Write>(mut w: W, events: &[Event]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        writeln!(w)?;
    }
    Ok(())
}
