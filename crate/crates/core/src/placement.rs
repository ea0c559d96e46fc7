//! Operator-instance placement: cloud-only baseline and greedy edgeward.
//!
//! Capacity is accounted by reservation: each instance claims its operator's
//! `mips_demand` on the hosting device.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::app::{AppModel, Scope};
use crate::fixed;
use crate::topology::Topology;

/// One placed copy of an operator. `region` is a gateway position for
/// per-gateway operators and `None` for global ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceKey {
    pub op: usize,
    pub region: Option<usize>,
}

/// Every instance the app needs on this topology, in topological order with
/// per-gateway copies in gateway order.
pub fn expand_instances(app: &AppModel, topo: &Topology) -> Vec<InstanceKey> {
    let mut out = Vec::new();
    for (op, spec) in app.operators().iter().enumerate() {
        match spec.scope {
            Scope::PerGateway => out.extend((0..topo.gateways().len()).map(|r| InstanceKey { op, region: Some(r) })),
            Scope::Global => out.push(InstanceKey { op, region: None }),
        }
    }
    out
}

pub fn instance_name(app: &AppModel, topo: &Topology, key: InstanceKey) -> String {
    let op = &app.operator(key.op).id;
    match key.region {
        Some(r) => format!("{op}@{}", topo.device(topo.gateways()[r]).id),
        None => op.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub policy: String,
    pub instances: Vec<InstanceKey>,
    /// Device index per instance.
    pub assignments: Vec<usize>,
    pub sink_device: usize,
}

impl Placement {
    pub fn device_of(&self, key: InstanceKey) -> Option<usize> {
        self.instances.iter().position(|k| *k == key).map(|i| self.assignments[i])
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error(
        "InsufficientCapacity: '{device}' cannot host '{instance}' ({demand} MIPS requested, {available} MIPS free)"
    )]
    InsufficientCapacity { device: String, instance: String, demand: f64, available: f64 },
}

pub trait PlacementPolicy {
    fn name(&self) -> &'static str;
    fn place(&self, app: &AppModel, topo: &Topology) -> Result<Placement, PlacementError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CloudOnly;

#[derive(Debug, Clone, Copy, Default)]
pub struct Edgeward;

impl PlacementPolicy for CloudOnly {
    fn name(&self) -> &'static str {
        "cloud"
    }

    fn place(&self, app: &AppModel, topo: &Topology) -> Result<Placement, PlacementError> {
        place_cloud(app, topo)
    }
}

impl PlacementPolicy for Edgeward {
    fn name(&self) -> &'static str {
        "edgeward"
    }

    fn place(&self, app: &AppModel, topo: &Topology) -> Result<Placement, PlacementError> {
        place_edgeward(app, topo)
    }
}

/// Residual MIPS per device, claimed first-fit.
struct Ledger<'a> {
    app: &'a AppModel,
    topo: &'a Topology,
    residual: Vec<f64>,
}

impl<'a> Ledger<'a> {
    fn new(app: &'a AppModel, topo: &'a Topology) -> Self {
        Ledger { app, topo, residual: topo.devices().iter().map(|d| d.cpu_capacity).collect() }
    }

    /// Claims the first device on `path` with enough room.
    fn claim_first(&mut self, key: InstanceKey, path: &[usize]) -> Result<usize, PlacementError> {
        let demand = self.app.operator(key.op).mips_demand;
        for &d in path {
            if self.residual[d] >= demand {
                self.residual[d] -= demand;
                return Ok(d);
            }
        }
        let last = *path.last().expect("paths end at the cloud");
        Err(PlacementError::InsufficientCapacity {
            device: self.topo.device(last).id.clone(),
            instance: instance_name(self.app, self.topo, key),
            demand,
            available: self.residual[last],
        })
    }
}

pub fn place_cloud(app: &AppModel, topo: &Topology) -> Result<Placement, PlacementError> {
    let instances = expand_instances(app, topo);
    let cloud = topo.cloud();
    let mut ledger = Ledger::new(app, topo);
    let mut assignments = Vec::with_capacity(instances.len());
    for &key in &instances {
        assignments.push(ledger.claim_first(key, &[cloud])?);
    }
    Ok(Placement { policy: "cloud".into(), instances, assignments, sink_device: cloud })
}

/// Greedy leaf-up first-fit.
///
/// Gateways are visited in ascending id order. For each, the per-gateway
/// instances are taken in topological order; each walks its gateway's root
/// path, starting at the highest device already hosting one of its same-region
/// predecessors, and claims the first device with enough residual MIPS. Global
/// instances then start at the lowest common ancestor of every device hosting
/// a predecessor (or of the sensor gateways, for entry operators) and walk up.
pub fn place_edgeward(app: &AppModel, topo: &Topology) -> Result<Placement, PlacementError> {
    let instances = expand_instances(app, topo);
    let position: BTreeMap<InstanceKey, usize> = instances.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut assigned: Vec<Option<usize>> = vec![None; instances.len()];
    let mut ledger = Ledger::new(app, topo);
    let host_of = |assigned: &[Option<usize>], key: InstanceKey| position.get(&key).and_then(|&i| assigned[i]);

    for (region, &gateway) in topo.gateways().iter().enumerate() {
        let path = topo.root_path(gateway);
        for op in (0..app.len()).filter(|&op| app.operator(op).scope == Scope::PerGateway) {
            let key = InstanceKey { op, region: Some(region) };
            // highest predecessor host on this path, measured as an index into `path`
            let mut start = 0;
            for &pred in app.predecessors(op) {
                let pred_key = match app.operator(pred).scope {
                    Scope::PerGateway => InstanceKey { op: pred, region: Some(region) },
                    Scope::Global => InstanceKey { op: pred, region: None },
                };
                if let Some(host) = host_of(&assigned, pred_key) {
                    if let Some(at) = path.iter().position(|&d| d == host) {
                        start = start.max(at);
                    }
                }
            }
            let device = ledger.claim_first(key, &path[start..])?;
            assigned[position[&key]] = Some(device);
        }
    }

    let sensor_gateways: Vec<usize> = {
        let mut g: Vec<usize> = topo.sensors().iter().filter_map(|s| topo.index_of(&s.gateway_id).ok()).collect();
        if g.is_empty() {
            g = topo.gateways().to_vec();
        }
        g.sort_unstable();
        g.dedup();
        g
    };
    for op in (0..app.len()).filter(|&op| app.operator(op).scope == Scope::Global) {
        let key = InstanceKey { op, region: None };
        let mut hosts: Vec<usize> = Vec::new();
        if app.is_entry(op) {
            hosts.extend(&sensor_gateways);
        }
        for &pred in app.predecessors(op) {
            match app.operator(pred).scope {
                Scope::PerGateway => hosts.extend(
                    (0..topo.gateways().len())
                        .filter_map(|r| host_of(&assigned, InstanceKey { op: pred, region: Some(r) })),
                ),
                Scope::Global => hosts.extend(host_of(&assigned, InstanceKey { op: pred, region: None })),
            }
        }
        let anchor =
            hosts.iter().copied().reduce(|a, b| topo.lowest_common_ancestor(a, b)).unwrap_or_else(|| topo.cloud());
        let device = ledger.claim_first(key, &topo.root_path(anchor))?;
        assigned[position[&key]] = Some(device);
    }

    Ok(Placement {
        policy: "edgeward".into(),
        assignments: assigned.into_iter().map(|d| d.expect("every instance is visited")).collect(),
        instances,
        sink_device: topo.cloud(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Unassigned(String),
    UnexpectedInstance(String),
    UnknownDevice { instance: String, device: usize },
    CapacityExceeded { device: String, demand: f64, capacity: f64 },
    OffPath(String),
    SinkNotOnCloud(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Unassigned(i) => write!(f, "Unassigned: instance '{i}' has no device"),
            Violation::UnexpectedInstance(i) => write!(f, "UnexpectedInstance: '{i}' is not part of the app"),
            Violation::UnknownDevice { instance, device } => {
                write!(f, "UnknownDevice: instance '{instance}' assigned to device #{device}")
            }
            Violation::CapacityExceeded { device, demand, capacity } => {
                write!(f, "CapacityExceeded: '{device}' hosts {demand} MIPS but has {capacity}")
            }
            Violation::OffPath(i) => write!(f, "OffPath: instance '{i}' is not on its gateway's root path"),
            Violation::SinkNotOnCloud(d) => write!(f, "SinkNotOnCloud: sink placed on '{d}'"),
        }
    }
}

/// Empty iff every placement invariant holds.
pub fn validate_placement(p: &Placement, app: &AppModel, topo: &Topology) -> Vec<Violation> {
    let mut out = Vec::new();
    let expected = expand_instances(app, topo);
    for key in &expected {
        if !p.instances.contains(key) {
            out.push(Violation::Unassigned(instance_name(app, topo, *key)));
        }
    }
    let mut load = vec![0.0; topo.len()];
    for (key, &device) in p.instances.iter().zip(&p.assignments) {
        let known = key.op < app.len() && key.region.is_none_or(|r| r < topo.gateways().len());
        if !known || !expected.contains(key) {
            out.push(Violation::UnexpectedInstance(format!("{key:?}")));
            continue;
        }
        let name = instance_name(app, topo, *key);
        if device >= topo.len() {
            out.push(Violation::UnknownDevice { instance: name, device });
            continue;
        }
        load[device] += app.operator(key.op).mips_demand;
        if let Some(r) = key.region {
            if !topo.is_ancestor_or_self(device, topo.gateways()[r]) {
                out.push(Violation::OffPath(name));
            }
        }
    }
    for (d, &demand) in load.iter().enumerate() {
        let capacity = topo.device(d).cpu_capacity;
        // tolerate float residue from repeated subtraction
        if demand > capacity * (1.0 + 1e-12) {
            out.push(Violation::CapacityExceeded { device: topo.device(d).id.clone(), demand, capacity });
        }
    }
    if p.sink_device != topo.cloud() {
        let name =
            topo.devices().get(p.sink_device).map(|d| d.id.clone()).unwrap_or_else(|| format!("#{}", p.sink_device));
        out.push(Violation::SinkNotOnCloud(name));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceReport {
    pub instance: String,
    pub operator: String,
    pub device: String,
    pub level: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlacementReport {
    pub policy: String,
    pub sink: String,
    pub instances: Vec<InstanceReport>,
    #[serde(serialize_with = "fixed::map_f64_6")]
    pub residual_mips: BTreeMap<String, f64>,
}

impl PlacementReport {
    pub fn new(p: &Placement, app: &AppModel, topo: &Topology) -> Self {
        let mut residual: Vec<f64> = topo.devices().iter().map(|d| d.cpu_capacity).collect();
        let instances = p
            .instances
            .iter()
            .zip(&p.assignments)
            .map(|(key, &d)| {
                residual[d] -= app.operator(key.op).mips_demand;
                InstanceReport {
                    instance: instance_name(app, topo, *key),
                    operator: app.operator(key.op).id.clone(),
                    device: topo.device(d).id.clone(),
                    level: topo.device(d).level,
                }
            })
            .collect();
        PlacementReport {
            policy: p.policy.clone(),
            sink: topo.device(p.sink_device).id.clone(),
            instances,
            residual_mips: topo.devices().iter().zip(residual).map(|(d, r)| (d.id.clone(), r)).collect(),
        }
    }
}
