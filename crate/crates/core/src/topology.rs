//! Tree of fog devices: gateways at the leaves, the cloud at the root.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::SimTime;

/// Declarative description of one device, as read from a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: String,
    pub parent: Option<String>,
    /// MIPS.
    pub cpu_capacity: f64,
    /// Milliseconds; required for non-root devices.
    pub uplink_latency: Option<f64>,
    /// Bytes per millisecond; required for non-root devices.
    pub uplink_bandwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorAttachment {
    pub sensor_id: String,
    pub gateway_id: String,
    /// Sensor-to-gateway latency in milliseconds.
    pub latency: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub devices: Vec<DeviceSpec>,
    pub sensors: Vec<SensorAttachment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Uplink {
    pub latency: f64,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Device {
    pub id: String,
    /// 0 at the cloud, increasing toward the leaves.
    pub level: u32,
    pub cpu_capacity: f64,
    /// Absent for the root.
    pub uplink: Option<Uplink>,
    #[serde(skip)]
    parent: Option<usize>,
}

impl Device {
    pub fn parent_index(&self) -> Option<usize> {
        self.parent
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("topology declares no devices")]
    Empty,
    #[error("NotATree: {0}")]
    NotATree(String),
    #[error("DanglingParent: device '{device}' names unknown parent '{parent}'")]
    DanglingParent { device: String, parent: String },
    #[error("NonPositiveCapacity: device '{0}' must have cpu_capacity > 0")]
    NonPositiveCapacity(String),
    #[error("duplicate device id '{0}'")]
    DuplicateDevice(String),
    #[error("device '{device}' has an invalid uplink: {reason}")]
    InvalidUplink { device: String, reason: String },
    #[error("sensor '{sensor}' attaches to '{gateway}', which is not a gateway")]
    NotAGateway { sensor: String, gateway: String },
    #[error("sensor '{sensor}' attaches to unknown device '{gateway}'")]
    UnknownGateway { sensor: String, gateway: String },
    #[error("duplicate sensor id '{0}'")]
    DuplicateSensor(String),
    #[error("sensor '{0}' has a negative or non-finite latency")]
    InvalidSensorLatency(String),
    #[error("UnknownDevice: '{0}'")]
    UnknownDevice(String),
}

/// Validated, immutable device tree.
#[derive(Debug, Clone, Serialize)]
pub struct Topology {
    devices: Vec<Device>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    #[serde(skip)]
    children: Vec<Vec<usize>>,
    root: usize,
    /// Leaf devices, ascending by id.
    gateways: Vec<usize>,
    sensors: Vec<SensorAttachment>,
}

pub fn build_topology(spec: &TopologySpec) -> Result<Topology, TopologyError> {
    if spec.devices.is_empty() {
        return Err(TopologyError::Empty);
    }
    let mut index = BTreeMap::new();
    for (i, d) in spec.devices.iter().enumerate() {
        if index.insert(d.id.clone(), i).is_some() {
            return Err(TopologyError::DuplicateDevice(d.id.clone()));
        }
    }
    let mut parents = Vec::with_capacity(spec.devices.len());
    let mut roots = Vec::new();
    for (i, d) in spec.devices.iter().enumerate() {
        match &d.parent {
            None => {
                roots.push(i);
                parents.push(None);
            }
            Some(p) => {
                let pi = *index
                    .get(p)
                    .ok_or_else(|| TopologyError::DanglingParent { device: d.id.clone(), parent: p.clone() })?;
                if pi == i {
                    return Err(TopologyError::NotATree(format!("device '{}' is its own parent", d.id)));
                }
                parents.push(Some(pi));
            }
        }
    }
    let root = match roots.as_slice() {
        [r] => *r,
        [] => return Err(TopologyError::NotATree("no root device (every device has a parent)".into())),
        many => {
            let names: Vec<&str> = many.iter().map(|&i| spec.devices[i].id.as_str()).collect();
            return Err(TopologyError::NotATree(format!("multiple roots: {}", names.join(", "))));
        }
    };

    // Levels by walking to the root; a walk longer than n steps means a cycle.
    let n = spec.devices.len();
    let mut levels = vec![0u32; n];
    for (i, level) in levels.iter_mut().enumerate() {
        let mut cur = i;
        let mut steps = 0u32;
        while let Some(p) = parents[cur] {
            steps += 1;
            if steps as usize > n {
                return Err(TopologyError::NotATree(format!("cycle through device '{}'", spec.devices[i].id)));
            }
            cur = p;
        }
        *level = steps;
    }

    let mut devices = Vec::with_capacity(n);
    for (i, d) in spec.devices.iter().enumerate() {
        if !(d.cpu_capacity.is_finite() && d.cpu_capacity > 0.0) {
            return Err(TopologyError::NonPositiveCapacity(d.id.clone()));
        }
        let uplink = if i == root {
            None
        } else {
            let invalid =
                |reason: &str| TopologyError::InvalidUplink { device: d.id.clone(), reason: reason.to_string() };
            let latency = d.uplink_latency.ok_or_else(|| invalid("missing uplink latency"))?;
            let bandwidth = d.uplink_bandwidth.ok_or_else(|| invalid("missing uplink bandwidth"))?;
            if !(latency.is_finite() && latency >= 0.0) {
                return Err(invalid("latency must be >= 0"));
            }
            if !(bandwidth.is_finite() && bandwidth > 0.0) {
                return Err(invalid("bandwidth must be > 0"));
            }
            Some(Uplink { latency, bandwidth })
        };
        devices.push(Device {
            id: d.id.clone(),
            level: levels[i],
            cpu_capacity: d.cpu_capacity,
            uplink,
            parent: parents[i],
        });
    }

    let mut children = vec![Vec::new(); n];
    for (i, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(i);
        }
    }
    let mut gateways: Vec<usize> = (0..n).filter(|&i| children[i].is_empty()).collect();
    gateways.sort_by(|&a, &b| devices[a].id.cmp(&devices[b].id));

    let mut seen = BTreeSet::new();
    for s in &spec.sensors {
        if !seen.insert(s.sensor_id.as_str()) {
            return Err(TopologyError::DuplicateSensor(s.sensor_id.clone()));
        }
        let g = *index.get(&s.gateway_id).ok_or_else(|| TopologyError::UnknownGateway {
            sensor: s.sensor_id.clone(),
            gateway: s.gateway_id.clone(),
        })?;
        if !children[g].is_empty() {
            return Err(TopologyError::NotAGateway { sensor: s.sensor_id.clone(), gateway: s.gateway_id.clone() });
        }
        if !(s.latency.is_finite() && s.latency >= 0.0) {
            return Err(TopologyError::InvalidSensorLatency(s.sensor_id.clone()));
        }
    }

    Ok(Topology { devices, index, children, root, gateways, sensors: spec.sensors.clone() })
}

impl Topology {
    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn device(&self, idx: usize) -> &Device {
        &self.devices[idx]
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize, TopologyError> {
        self.index.get(id).copied().ok_or_else(|| TopologyError::UnknownDevice(id.to_string()))
    }

    pub fn cloud(&self) -> usize {
        self.root
    }

    pub fn cloud_id(&self) -> &str {
        &self.devices[self.root].id
    }

    /// Gateway device indices, ascending by id.
    pub fn gateways(&self) -> &[usize] {
        &self.gateways
    }

    /// Position of a gateway in [`Topology::gateways`].
    pub fn gateway_position(&self, device: usize) -> Option<usize> {
        self.gateways.iter().position(|&g| g == device)
    }

    pub fn children(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    pub fn sensors(&self) -> &[SensorAttachment] {
        &self.sensors
    }

    pub fn sensor(&self, sensor_id: &str) -> Option<&SensorAttachment> {
        self.sensors.iter().find(|s| s.sensor_id == sensor_id)
    }

    /// Devices from `idx` up to and including the root.
    pub fn root_path(&self, idx: usize) -> Vec<usize> {
        let mut path = vec![idx];
        let mut cur = idx;
        while let Some(p) = self.devices[cur].parent {
            path.push(p);
            cur = p;
        }
        path
    }

    pub fn is_ancestor_or_self(&self, ancestor: usize, of: usize) -> bool {
        let mut cur = of;
        loop {
            if cur == ancestor {
                return true;
            }
            match self.devices[cur].parent {
                Some(p) => cur = p,
                None => return false,
            }
        }
    }

    pub fn lowest_common_ancestor(&self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = (a, b);
        while self.devices[a].level > self.devices[b].level {
            a = self.devices[a].parent.expect("non-root has a parent");
        }
        while self.devices[b].level > self.devices[a].level {
            b = self.devices[b].parent.expect("non-root has a parent");
        }
        while a != b {
            a = self.devices[a].parent.expect("distinct nodes at equal depth are below the root");
            b = self.devices[b].parent.expect("distinct nodes at equal depth are below the root");
        }
        a
    }

    /// Unique tree path by index, both endpoints included.
    pub fn route_indices(&self, from: usize, to: usize) -> Vec<usize> {
        let lca = self.lowest_common_ancestor(from, to);
        let mut up = Vec::new();
        let mut cur = from;
        while cur != lca {
            up.push(cur);
            cur = self.devices[cur].parent.expect("below lca");
        }
        up.push(lca);
        let mut down = Vec::new();
        cur = to;
        while cur != lca {
            down.push(cur);
            cur = self.devices[cur].parent.expect("below lca");
        }
        up.extend(down.into_iter().rev());
        up
    }

    /// Next device after `from` on the way to `to`. `None` when they coincide.
    pub fn next_hop(&self, from: usize, to: usize) -> Option<usize> {
        if from == to {
            return None;
        }
        if self.is_ancestor_or_self(from, to) {
            // descend: the child of `from` on the path to `to`
            let mut cur = to;
            loop {
                let p = self.devices[cur].parent.expect("below from");
                if p == from {
                    return Some(cur);
                }
                cur = p;
            }
        }
        self.devices[from].parent
    }

    pub fn route(&self, from: &str, to: &str) -> Result<Vec<String>, TopologyError> {
        let a = self.index_of(from)?;
        let b = self.index_of(to)?;
        Ok(self.route_indices(a, b).into_iter().map(|i| self.devices[i].id.clone()).collect())
    }

    /// True when the link between `child` and its parent touches the cloud root.
    pub fn is_core_link(&self, child: usize) -> bool {
        self.devices[child].parent == Some(self.root)
    }
}

/// Propagation latency plus transmission time.
pub fn link_transfer_time(latency: f64, bandwidth: f64, size: f64) -> SimTime {
    debug_assert!(bandwidth > 0.0 && size >= 0.0);
    SimTime::from_ms(latency + size / bandwidth)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn dev(id: &str, parent: Option<&str>, cpu: f64) -> DeviceSpec {
        DeviceSpec {
            id: id.into(),
            parent: parent.map(Into::into),
            cpu_capacity: cpu,
            uplink_latency: parent.map(|_| 2.0),
            uplink_bandwidth: parent.map(|_| 1000.0),
        }
    }

    /// cloud, two intermediates, four gateways.
    pub fn three_level() -> TopologySpec {
        TopologySpec {
            devices: vec![
                dev("cloud", None, 10_000.0),
                dev("intermediate_1", Some("cloud"), 2000.0),
                dev("intermediate_2", Some("cloud"), 2000.0),
                dev("gateway_1", Some("intermediate_1"), 1000.0),
                dev("gateway_2", Some("intermediate_1"), 1000.0),
                dev("gateway_3", Some("intermediate_2"), 1000.0),
                dev("gateway_4", Some("intermediate_2"), 1000.0),
            ],
            sensors: vec![],
        }
    }
}
