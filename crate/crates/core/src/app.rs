//! Stream-query applications as operator DAGs.
//!
//! Edges may start at the reserved vertex [`SENSORS`] (all sensor streams) and
//! end at the reserved vertex [`SINK`] (the terminal consumer, pinned to the
//! cloud).

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::SimTime;

pub const SENSORS: &str = "sensors";
pub const SINK: &str = "sink";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorKind {
    Map,
    Filter { selectivity: f64 },
    WindowAggregate { window_ms: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// One instance per gateway, fed only by that gateway's region.
    PerGateway,
    /// A single instance fed by every region.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub id: String,
    pub kind: OperatorKind,
    /// MI spent per input tuple.
    pub cpu_per_tuple: f64,
    /// Bytes per output tuple.
    pub out_tuple_size: u64,
    /// MIPS reserved on the hosting device.
    pub mips_demand: f64,
    pub scope: Scope,
}

impl OperatorSpec {
    /// Expected outputs per input for Map/Filter; `None` for windows.
    pub fn selectivity(&self) -> Option<f64> {
        match self.kind {
            OperatorKind::Map => Some(1.0),
            OperatorKind::Filter { selectivity } => Some(selectivity),
            OperatorKind::WindowAggregate { .. } => None,
        }
    }

    pub fn window_ms(&self) -> Option<f64> {
        match self.kind {
            OperatorKind::WindowAggregate { window_ms } => Some(window_ms),
            _ => None,
        }
    }

    fn check(&self) -> Result<(), String> {
        if !(self.cpu_per_tuple.is_finite() && self.cpu_per_tuple >= 0.0) {
            return Err("cpu_per_tuple must be >= 0".into());
        }
        if !(self.mips_demand.is_finite() && self.mips_demand > 0.0) {
            return Err("mips_demand must be > 0".into());
        }
        match self.kind {
            OperatorKind::Filter { selectivity } if !(0.0..=1.0).contains(&selectivity) => {
                Err("filter selectivity must lie in [0, 1]".into())
            }
            OperatorKind::WindowAggregate { window_ms } if !(window_ms.is_finite() && window_ms > 0.0) => {
                Err("window_ms must be > 0".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AppSpec {
    pub operators: Vec<OperatorSpec>,
    /// `(from, to)` pairs over operator ids plus [`SENSORS`] and [`SINK`].
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AppError {
    #[error("CyclicGraph: {}", .0.join(" -> "))]
    CyclicGraph(Vec<String>),
    #[error("UnreachableOperator: '{0}' has no path from any sensor")]
    UnreachableOperator(String),
    #[error("MissingSink: no edge reaches the sink")]
    MissingSink,
    #[error("operator '{0}' has no path to the sink")]
    DeadEnd(String),
    #[error("duplicate operator id '{0}'")]
    DuplicateOperator(String),
    #[error("'{0}' is a reserved vertex name")]
    ReservedName(String),
    #[error("edge {from} -> {to} references unknown operator '{missing}'")]
    UnknownOperator { from: String, to: String, missing: String },
    #[error("edge {0} -> {1} is not allowed")]
    InvalidEdge(String, String),
    #[error("operator '{id}': {reason}")]
    InvalidOperator { id: String, reason: String },
}

/// A validated DAG. Operators are stored in topological order, ties broken by id.
#[derive(Debug, Clone, Serialize)]
pub struct AppModel {
    operators: Vec<OperatorSpec>,
    successors: Vec<Vec<usize>>,
    predecessors: Vec<Vec<usize>>,
    entry: Vec<bool>,
    feeds_sink: Vec<bool>,
    sensors_to_sink: bool,
}

pub fn validate_dag(spec: &AppSpec) -> Result<AppModel, AppError> {
    let mut ids = BTreeMap::new();
    for (i, op) in spec.operators.iter().enumerate() {
        if op.id == SENSORS || op.id == SINK {
            return Err(AppError::ReservedName(op.id.clone()));
        }
        if ids.insert(op.id.as_str(), i).is_some() {
            return Err(AppError::DuplicateOperator(op.id.clone()));
        }
        op.check().map_err(|reason| AppError::InvalidOperator { id: op.id.clone(), reason })?;
    }
    let n = spec.operators.len();
    let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut entry = vec![false; n];
    let mut feeds_sink = vec![false; n];
    let mut sensors_to_sink = false;
    let lookup = |from: &str, to: &str, name: &str| {
        ids.get(name).copied().ok_or_else(|| AppError::UnknownOperator {
            from: from.into(),
            to: to.into(),
            missing: name.into(),
        })
    };
    for (from, to) in &spec.edges {
        match (from.as_str(), to.as_str()) {
            (SENSORS, SINK) => sensors_to_sink = true,
            (SENSORS, op) => entry[lookup(from, to, op)?] = true,
            (op, SINK) => feeds_sink[lookup(from, to, op)?] = true,
            (SINK, _) | (_, SENSORS) => return Err(AppError::InvalidEdge(from.clone(), to.clone())),
            (a, b) => {
                let (a, b) = (lookup(from, to, a)?, lookup(from, to, b)?);
                succ[a].insert(b);
            }
        }
    }

    if let Some(cycle) = find_cycle(&succ) {
        let mut names: Vec<String> = cycle.iter().map(|&i| spec.operators[i].id.clone()).collect();
        names.push(names[0].clone());
        return Err(AppError::CyclicGraph(names));
    }
    if !sensors_to_sink && !feeds_sink.iter().any(|&f| f) {
        return Err(AppError::MissingSink);
    }

    // reachability from sensors, in declaration order for stable errors
    let mut reached = entry.clone();
    let mut stack: Vec<usize> = (0..n).filter(|&i| entry[i]).collect();
    while let Some(i) = stack.pop() {
        for &j in &succ[i] {
            if !reached[j] {
                reached[j] = true;
                stack.push(j);
            }
        }
    }
    if let Some(i) = (0..n).find(|&i| !reached[i]) {
        return Err(AppError::UnreachableOperator(spec.operators[i].id.clone()));
    }
    let mut to_sink = feeds_sink.clone();
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..n {
            if !to_sink[i] && succ[i].iter().any(|&j| to_sink[j]) {
                to_sink[i] = true;
                changed = true;
            }
        }
    }
    if let Some(i) = (0..n).find(|&i| !to_sink[i]) {
        return Err(AppError::DeadEnd(spec.operators[i].id.clone()));
    }

    // Kahn's algorithm, smallest id first among ready operators.
    let mut indegree = vec![0usize; n];
    for s in &succ {
        for &j in s {
            indegree[j] += 1;
        }
    }
    let mut ready: BinaryHeap<Reverse<(&str, usize)>> =
        (0..n).filter(|&i| indegree[i] == 0).map(|i| Reverse((spec.operators[i].id.as_str(), i))).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((_, i))) = ready.pop() {
        order.push(i);
        for &j in &succ[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.push(Reverse((spec.operators[j].id.as_str(), j)));
            }
        }
    }
    debug_assert_eq!(order.len(), n);
    let mut position = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        position[i] = pos;
    }
    let successors: Vec<Vec<usize>> = order
        .iter()
        .map(|&i| succ[i].iter().map(|&j| position[j]).collect::<BTreeSet<_>>().into_iter().collect())
        .collect();
    let mut predecessors = vec![Vec::new(); n];
    for (i, s) in successors.iter().enumerate() {
        for &j in s {
            predecessors[j].push(i);
        }
    }

    Ok(AppModel {
        operators: order.iter().map(|&i| spec.operators[i].clone()).collect(),
        successors,
        predecessors,
        entry: order.iter().map(|&i| entry[i]).collect(),
        feeds_sink: order.iter().map(|&i| feeds_sink[i]).collect(),
        sensors_to_sink,
    })
}

fn find_cycle(succ: &[BTreeSet<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let n = succ.len();
    let mut mark = vec![Mark::New; n];
    for start in 0..n {
        if mark[start] != Mark::New {
            continue;
        }
        // iterative DFS keeping the active path
        let mut path: Vec<usize> = vec![start];
        let mut iters: Vec<std::collections::btree_set::Iter<'_, usize>> = vec![succ[start].iter()];
        mark[start] = Mark::Active;
        while let Some(it) = iters.last_mut() {
            match it.next() {
                Some(&j) => match mark[j] {
                    Mark::Active => {
                        let at = path.iter().position(|&p| p == j).expect("active node is on the path");
                        return Some(path[at..].to_vec());
                    }
                    Mark::New => {
                        mark[j] = Mark::Active;
                        path.push(j);
                        iters.push(succ[j].iter());
                    }
                    Mark::Done => {}
                },
                None => {
                    let done = path.pop().expect("path tracks iterators");
                    mark[done] = Mark::Done;
                    iters.pop();
                }
            }
        }
    }
    None
}

impl AppModel {
    /// Operators in topological order.
    pub fn operators(&self) -> &[OperatorSpec] {
        &self.operators
    }

    pub fn operator(&self, idx: usize) -> &OperatorSpec {
        &self.operators[idx]
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.operators.iter().position(|o| o.id == id)
    }

    pub fn successors(&self, idx: usize) -> &[usize] {
        &self.successors[idx]
    }

    pub fn predecessors(&self, idx: usize) -> &[usize] {
        &self.predecessors[idx]
    }

    /// Operators fed directly by sensors.
    pub fn is_entry(&self, idx: usize) -> bool {
        self.entry[idx]
    }

    pub fn entries(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.entry[i])
    }

    pub fn feeds_sink(&self, idx: usize) -> bool {
        self.feeds_sink[idx]
    }

    pub fn sensors_feed_sink(&self) -> bool {
        self.sensors_to_sink
    }
}

/// A unit of streamed data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuple {
    pub id: u64,
    /// MI needed by the consumer it is currently routed to.
    pub cpu_length: f64,
    /// Bytes.
    pub network_length: u64,
    /// Emission time of the sensor reading anchoring this tuple's lineage.
    pub origin_ts: SimTime,
    /// Producing operator index; `None` for sensor emissions.
    pub emitting_operator: Option<usize>,
    /// Index of the originating sensor.
    pub sensor: usize,
    /// Gateway position (in `Topology::gateways`) of the originating sensor.
    pub region: usize,
}

/// Runtime state of one placed operator instance.
#[derive(Debug, Clone)]
pub struct OperatorInstance {
    op: usize,
    kind: OperatorKind,
    out_tuple_size: u64,
    rng: Option<ChaCha8Rng>,
    window_count: u64,
    window_anchor: Option<Tuple>,
}

impl OperatorInstance {
    /// `rng` is only consulted by Filter operators.
    pub fn new(op: usize, spec: &OperatorSpec, rng: Option<ChaCha8Rng>) -> Self {
        OperatorInstance {
            op,
            kind: spec.kind,
            out_tuple_size: spec.out_tuple_size,
            rng,
            window_count: 0,
            window_anchor: None,
        }
    }

    pub fn operator(&self) -> usize {
        self.op
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    /// Inputs currently held in the open window.
    pub fn buffered(&self) -> u64 {
        self.window_count
    }

    fn derive(&self, from: &Tuple, id: u64) -> Tuple {
        Tuple {
            id,
            cpu_length: 0.0,
            network_length: self.out_tuple_size,
            origin_ts: from.origin_ts,
            emitting_operator: Some(self.op),
            sensor: from.sensor,
            region: from.region,
        }
    }

    /// Consumes one input. Windows buffer it and return nothing until
    /// [`OperatorInstance::close_window`].
    pub fn process_tuple(&mut self, t: &Tuple, _now: SimTime, next_id: &mut impl FnMut() -> u64) -> Vec<Tuple> {
        match self.kind {
            OperatorKind::Map => vec![self.derive(t, next_id())],
            OperatorKind::Filter { selectivity } => {
                let rng = self.rng.as_mut().expect("filter instances carry a random stream");
                if rng.random::<f64>() < selectivity {
                    vec![self.derive(t, next_id())]
                } else {
                    Vec::new()
                }
            }
            OperatorKind::WindowAggregate { .. } => {
                self.window_count += 1;
                let newer = match &self.window_anchor {
                    Some(anchor) => t.origin_ts > anchor.origin_ts,
                    None => true,
                };
                if newer {
                    self.window_anchor = Some(t.clone());
                }
                Vec::new()
            }
        }
    }

    /// Emits the aggregate for the window ending now, if it saw any input.
    /// The output carries the latest contributing `origin_ts`.
    pub fn close_window(&mut self, _now: SimTime, next_id: &mut impl FnMut() -> u64) -> Option<Tuple> {
        let anchor = self.window_anchor.take()?;
        self.window_count = 0;
        Some(self.derive(&anchor, next_id()))
    }
}

/// Expected output rate (tuples/s) for a given input rate (tuples/s).
pub fn expected_output_rate(op: &OperatorSpec, input_rate: f64) -> f64 {
    match op.kind {
        OperatorKind::Map => input_rate,
        OperatorKind::Filter { selectivity } => input_rate * selectivity,
        OperatorKind::WindowAggregate { window_ms } => {
            if input_rate > 0.0 {
                1000.0 / window_ms
            } else {
                0.0
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::kernel::RandomStreams;
    use proptest::prelude::*;

    fn tuple(id: u64, origin: f64) -> Tuple {
        Tuple {
            id,
            cpu_length: 1.0,
            network_length: 10,
            origin_ts: SimTime::from_ms(origin),
            emitting_operator: None,
            sensor: 0,
            region: 0,
        }
    }

    fn ids() -> impl FnMut() -> u64 {
        let mut n = 1000;
        move || {
            n += 1;
            n
        }
    }

    #[test]
    fn incident_query_validates_in_listed_order() {
        let app = validate_dag(&incident_query()).unwrap();
        let order: Vec<&str> = app.operators().iter().map(|o| o.id.as_str()).collect();
        assert_eq!(order, ["avg_speed", "congestion", "incident"]);
        assert!(app.is_entry(0) && !app.is_entry(1));
        assert!(app.feeds_sink(2));
        assert_eq!(app.successors(0), &[1]);
        assert_eq!(app.predecessors(2), &[1]);
    }

    #[test]
    fn topological_order_ignores_declaration_order() {
        let mut spec = incident_query();
        spec.operators.reverse();
        let app = validate_dag(&spec).unwrap();
        let order: Vec<&str> = app.operators().iter().map(|o| o.id.as_str()).collect();
        assert_eq!(order, ["avg_speed", "congestion", "incident"]);
    }

    #[test]
    fn self_edge_is_a_cycle() {
        let mut spec = incident_query();
        spec.edges.push(edge("congestion", "congestion"));
        assert_eq!(
            validate_dag(&spec).unwrap_err(),
            AppError::CyclicGraph(vec!["congestion".into(), "congestion".into()])
        );
    }

    #[test]
    fn longer_cycle_is_named() {
        let mut spec = incident_query();
        spec.edges.push(edge("incident", "avg_speed"));
        let err = validate_dag(&spec).unwrap_err();
        assert_eq!(err.to_string(), "CyclicGraph: avg_speed -> congestion -> incident -> avg_speed");
    }

    #[test]
    fn unreachable_operator() {
        let mut spec = incident_query();
        spec.operators.push(op("orphan", OperatorKind::Map, Scope::Global));
        spec.edges.push(edge("orphan", SINK));
        assert_eq!(validate_dag(&spec).unwrap_err(), AppError::UnreachableOperator("orphan".into()));
    }

    #[test]
    fn missing_sink() {
        let mut spec = incident_query();
        spec.edges.pop();
        assert_eq!(validate_dag(&spec).unwrap_err(), AppError::MissingSink);
    }

    #[test]
    fn dead_end_operator() {
        let mut spec = incident_query();
        spec.operators.push(op("leaf", OperatorKind::Map, Scope::Global));
        spec.edges.push(edge("congestion", "leaf"));
        assert_eq!(validate_dag(&spec).unwrap_err(), AppError::DeadEnd("leaf".into()));
    }

    #[test]
    fn bad_parameters_are_rejected() {
        let mut spec = incident_query();
        spec.operators[1].kind = OperatorKind::Filter { selectivity: 1.5 };
        assert!(matches!(validate_dag(&spec), Err(AppError::InvalidOperator { .. })));
        let mut spec = incident_query();
        spec.operators[0].kind = OperatorKind::WindowAggregate { window_ms: 0.0 };
        assert!(matches!(validate_dag(&spec), Err(AppError::InvalidOperator { .. })));
    }

    #[test]
    fn sensors_straight_to_sink_is_an_empty_app() {
        let app = validate_dag(&AppSpec { operators: vec![], edges: vec![edge(SENSORS, SINK)] }).unwrap();
        assert!(app.is_empty());
        assert!(app.sensors_feed_sink());
    }

    #[test]
    fn map_preserves_origin() {
        let spec = op("m", OperatorKind::Map, Scope::Global);
        let mut inst = OperatorInstance::new(0, &spec, None);
        let out = inst.process_tuple(&tuple(1, 10.0), SimTime::from_ms(20.0), &mut ids());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].origin_ts, SimTime::from_ms(10.0));
        assert_eq!(out[0].network_length, 100);
        assert_eq!(out[0].emitting_operator, Some(0));
        assert_ne!(out[0].id, 1);
    }

    #[test]
    fn zero_selectivity_filter_drops_everything() {
        let spec = op("f", OperatorKind::Filter { selectivity: 0.0 }, Scope::Global);
        let mut inst = OperatorInstance::new(0, &spec, Some(RandomStreams::new(1).stream("f")));
        for i in 0..100 {
            assert!(inst.process_tuple(&tuple(i, 0.0), SimTime::ZERO, &mut ids()).is_empty());
        }
    }

    #[test]
    fn window_emits_latest_origin_at_boundary() {
        let spec = op("w", OperatorKind::WindowAggregate { window_ms: 5000.0 }, Scope::Global);
        let mut inst = OperatorInstance::new(0, &spec, None);
        let mut next = ids();
        for (i, origin) in [100.0, 2300.0, 4900.0].into_iter().enumerate() {
            assert!(inst.process_tuple(&tuple(i as u64, origin), SimTime::from_ms(origin), &mut next).is_empty());
        }
        assert_eq!(inst.buffered(), 3);
        let out = inst.close_window(SimTime::from_ms(5000.0), &mut next).unwrap();
        assert_eq!(out.origin_ts, SimTime::from_ms(4900.0));
        assert_eq!(inst.buffered(), 0);
        assert!(inst.close_window(SimTime::from_ms(10_000.0), &mut next).is_none());
    }

    #[test]
    fn window_anchor_is_max_origin_not_last_arrival() {
        let spec = op("w", OperatorKind::WindowAggregate { window_ms: 1000.0 }, Scope::Global);
        let mut inst = OperatorInstance::new(0, &spec, None);
        let mut next = ids();
        inst.process_tuple(&tuple(1, 700.0), SimTime::from_ms(800.0), &mut next);
        inst.process_tuple(&tuple(2, 300.0), SimTime::from_ms(900.0), &mut next);
        let out = inst.close_window(SimTime::from_ms(1000.0), &mut next).unwrap();
        assert_eq!(out.origin_ts, SimTime::from_ms(700.0));
    }

    #[test]
    fn output_rates() {
        let filter = op("f", OperatorKind::Filter { selectivity: 0.5 }, Scope::Global);
        assert_eq!(expected_output_rate(&filter, 10.0), 5.0);
        let window = op("w", OperatorKind::WindowAggregate { window_ms: 5000.0 }, Scope::Global);
        assert_eq!(expected_output_rate(&window, 200.0), 0.2);
        assert_eq!(expected_output_rate(&window, 0.0), 0.0);
        assert_eq!(expected_output_rate(&op("m", OperatorKind::Map, Scope::Global), 7.0), 7.0);
    }

    #[test]
    fn filter_pass_count_stays_within_five_sigma() {
        for (seed, p) in [(1u64, 0.5), (2, 0.1), (3, 0.93)] {
            let spec = op("f", OperatorKind::Filter { selectivity: p }, Scope::Global);
            let mut inst = OperatorInstance::new(0, &spec, Some(RandomStreams::new(seed).stream("op/f")));
            let n = 20_000u64;
            let mut next = ids();
            let passed: usize =
                (0..n).map(|i| inst.process_tuple(&tuple(i, 0.0), SimTime::ZERO, &mut next).len()).sum();
            let mean = n as f64 * p;
            let sigma = (mean * (1.0 - p)).sqrt();
            assert!((passed as f64 - mean).abs() <= 5.0 * sigma, "p={p}: {passed} vs {mean}");
        }
    }

    proptest! {
        #[test]
        fn window_outputs_never_postdate_their_inputs(origins in proptest::collection::vec(0.0f64..1e5, 1..50)) {
            let spec = op("w", OperatorKind::WindowAggregate { window_ms: 1000.0 }, Scope::Global);
            let mut inst = OperatorInstance::new(0, &spec, None);
            let mut next = ids();
            for (i, o) in origins.iter().enumerate() {
                inst.process_tuple(&tuple(i as u64, *o), SimTime::from_ms(*o), &mut next);
            }
            let max = origins.iter().cloned().fold(0.0, f64::max);
            let out = inst.close_window(SimTime::from_ms(1e5), &mut next).unwrap();
            prop_assert_eq!(out.origin_ts.as_ms(), max);
            prop_assert!(out.origin_ts <= SimTime::from_ms(1e5));
        }
    }
}
