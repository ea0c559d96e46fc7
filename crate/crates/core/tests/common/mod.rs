#![allow(dead_code)]

pub mod reference;

use std::path::PathBuf;

use fogsim::app::{AppSpec, OperatorKind, OperatorSpec, Scope, SENSORS, SINK};
use fogsim::kernel::SimTime;
use fogsim::placement::{place_cloud, Placement};
use fogsim::scenario::{Scenario, SimulationSettings};
use fogsim::topology::{DeviceSpec, SensorAttachment, TopologySpec};
use fogsim::workload::{SensorMode, SensorSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn reference_scenario_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/reference.toml")
}

pub fn reference_scenario() -> Scenario {
    Scenario::load(&reference_scenario_path()).expect("reference scenario loads")
}

pub fn device(id: &str, parent: Option<&str>, cpu: f64, latency: f64, bandwidth: f64) -> DeviceSpec {
    DeviceSpec {
        id: id.into(),
        parent: parent.map(Into::into),
        cpu_capacity: cpu,
        uplink_latency: parent.map(|_| latency),
        uplink_bandwidth: parent.map(|_| bandwidth),
    }
}

pub fn operator(id: &str, kind: OperatorKind, cpu: f64, out: u64, demand: f64, scope: Scope) -> OperatorSpec {
    OperatorSpec { id: id.into(), kind, cpu_per_tuple: cpu, out_tuple_size: out, mips_demand: demand, scope }
}

/// sensors -> ops[0] -> ... -> ops[n-1] -> sink
pub fn chain(ops: Vec<OperatorSpec>) -> AppSpec {
    let mut names: Vec<String> = vec![SENSORS.into()];
    names.extend(ops.iter().map(|o| o.id.clone()));
    names.push(SINK.into());
    let edges = names.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
    AppSpec { operators: ops, edges }
}

pub fn sensor(id: &str, gateway: &str, mode: SensorMode, size: u64) -> SensorSpec {
    SensorSpec { sensor_id: id.into(), gateway_id: gateway.into(), mode, tuple_cpu_length: None, tuple_size: size }
}

/// Builds a scenario; each sensor is attached with the paired latency.
pub fn build(
    devices: Vec<DeviceSpec>,
    sensors: Vec<(SensorSpec, f64)>,
    app: &AppSpec,
    horizon: f64,
    seed: u64,
) -> Scenario {
    let attachments = sensors
        .iter()
        .map(|(s, lat)| SensorAttachment {
            sensor_id: s.sensor_id.clone(),
            gateway_id: s.gateway_id.clone(),
            latency: *lat,
        })
        .collect();
    Scenario::new(
        &TopologySpec { devices, sensors: attachments },
        app,
        sensors.into_iter().map(|(s, _)| s).collect(),
        SimulationSettings { horizon: SimTime::from_ms(horizon), seed, warmup_fraction: 0.0 },
    )
    .expect("test scenario is valid")
}

/// A single-path scenario: devices form a chain from the cloud (index 0) down
/// to one gateway (last index); operators form a chain with explicit hosts.
#[derive(Debug, Clone)]
pub struct MiniCase {
    /// (cpu MIPS, uplink latency ms, uplink bandwidth B/ms); the cloud's uplink is ignored.
    pub devices: Vec<(f64, f64, f64)>,
    pub ops: Vec<MiniOp>,
    pub sensors: Vec<MiniSensor>,
    pub horizon: f64,
}

#[derive(Debug, Clone)]
pub struct MiniOp {
    pub cpu: f64,
    pub out_size: u64,
    /// `None` for a map.
    pub selectivity: Option<f64>,
    /// Device index in `MiniCase::devices`.
    pub host: usize,
}

#[derive(Debug, Clone)]
pub struct MiniSensor {
    pub latency: f64,
    pub size: u64,
    pub times: Vec<f64>,
}

pub fn dev_id(i: usize) -> String {
    if i == 0 {
        "cloud".into()
    } else {
        format!("d{i}")
    }
}

pub fn op_id(k: usize) -> String {
    format!("op{k}")
}

impl MiniCase {
    pub fn gateway(&self) -> usize {
        self.devices.len() - 1
    }

    pub fn scenario(&self) -> Scenario {
        let devices = self
            .devices
            .iter()
            .enumerate()
            .map(|(i, &(cpu, lat, bw))| {
                let parent = (i > 0).then(|| dev_id(i - 1));
                device(&dev_id(i), parent.as_deref(), cpu, lat, bw)
            })
            .collect();
        let ops = self
            .ops
            .iter()
            .enumerate()
            .map(|(k, o)| {
                let kind = match o.selectivity {
                    None => OperatorKind::Map,
                    Some(selectivity) => OperatorKind::Filter { selectivity },
                };
                operator(&op_id(k), kind, o.cpu, o.out_size, 1.0, Scope::PerGateway)
            })
            .collect();
        let gw = dev_id(self.gateway());
        let sensors = self
            .sensors
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mode = SensorMode::Trace { times: s.times.iter().map(|&t| SimTime::from_ms(t)).collect() };
                (sensor(&format!("s{i}"), &gw, mode, s.size), s.latency)
            })
            .collect();
        build(devices, sensors, &chain(ops), self.horizon, 11)
    }

    pub fn placement(&self, scenario: &Scenario) -> Placement {
        let mut p = place_cloud(&scenario.app, &scenario.topology).expect("cloud fits");
        for (k, o) in self.ops.iter().enumerate() {
            let inst = p.instances.iter().position(|key| key.op == scenario.app.index_of(&op_id(k)).unwrap()).unwrap();
            p.assignments[inst] = scenario.topology.index_of(&dev_id(o.host)).unwrap();
        }
        p
    }

    /// Closed-form sink delay of one reading from `sensor` through an idle
    /// system: sensor hop, each uplink climbed (latency plus size over
    /// bandwidth) and each service time.
    pub fn idle_delay(&self, sensor: usize) -> f64 {
        let s = &self.sensors[sensor];
        let mut total = s.latency;
        let mut at = self.gateway();
        let mut size = s.size as f64;
        let climb = |from: usize, to: usize, size: f64| -> f64 {
            (to + 1..=from).map(|d| self.devices[d].1 + size / self.devices[d].2).sum()
        };
        for op in &self.ops {
            total += climb(at, op.host, size);
            at = op.host;
            total += 1000.0 * op.cpu / self.devices[at].0;
            size = op.out_size as f64;
        }
        total + climb(at, 0, size)
    }

    /// Random case: up to `max_devices` devices, up to `max_ops` operators,
    /// hosts non-decreasing toward the cloud, at most `max_emissions` readings.
    pub fn random(
        rng: &mut ChaCha8Rng,
        max_devices: usize,
        max_ops: usize,
        max_emissions: usize,
        filters: bool,
    ) -> Self {
        let n_dev = rng.random_range(1..=max_devices);
        let devices = (0..n_dev)
            .map(|_| (rng.random_range(200.0..5000.0), rng.random_range(0.5..20.0), rng.random_range(10.0..2000.0)))
            .collect();
        let n_ops = rng.random_range(0..=max_ops);
        let mut ops = Vec::new();
        let mut host = n_dev - 1;
        for _ in 0..n_ops {
            host = rng.random_range(0..=host);
            let selectivity = match (filters, rng.random_range(0..5)) {
                (true, 0) => Some(0.0),
                (true, 1) => Some(1.0),
                _ => None,
            };
            ops.push(MiniOp {
                cpu: rng.random_range(1.0..100.0),
                out_size: rng.random_range(10..5000),
                selectivity,
                host,
            });
        }
        let n_sensors = rng.random_range(1..=2);
        let per_sensor = (max_emissions / n_sensors).max(1);
        let sensors = (0..n_sensors)
            .map(|_| {
                let n = rng.random_range(1..=per_sensor);
                let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2000.0)).collect();
                times.sort_by(f64::total_cmp);
                MiniSensor { latency: rng.random_range(0.1..5.0), size: rng.random_range(10..5000), times }
            })
            .collect();
        MiniCase { devices, ops, sensors, horizon: 100_000.0 }
    }
}

/// Random tree: device 0 is the cloud, every later device hangs below an
/// earlier one.
pub fn random_topology(rng: &mut ChaCha8Rng, max_devices: usize) -> Vec<DeviceSpec> {
    let n = rng.random_range(1..=max_devices);
    (0..n)
        .map(|i| {
            let parent = (i > 0).then(|| dev_id(rng.random_range(0..i)));
            device(
                &dev_id(i),
                parent.as_deref(),
                rng.random_range(100.0..5000.0),
                rng.random_range(0.1..20.0),
                rng.random_range(5.0..2000.0),
            )
        })
        .collect()
}

/// Random DAG: operator i is fed by the sensors or earlier operators, and
/// operators without successors feed the sink.
pub fn random_app(rng: &mut ChaCha8Rng, max_ops: usize, windows: bool) -> AppSpec {
    let n = rng.random_range(1..=max_ops);
    let mut ops = Vec::new();
    let mut edges: Vec<(String, String)> = Vec::new();
    for i in 0..n {
        let kind = match rng.random_range(0..if windows { 3 } else { 2 }) {
            0 => OperatorKind::Map,
            1 => OperatorKind::Filter { selectivity: rng.random_range(0.0..=1.0) },
            _ => OperatorKind::WindowAggregate { window_ms: rng.random_range(50.0..2000.0) },
        };
        let scope = if rng.random_bool(0.6) { Scope::PerGateway } else { Scope::Global };
        ops.push(operator(
            &op_id(i),
            kind,
            rng.random_range(0.5..50.0),
            rng.random_range(10..3000),
            rng.random_range(10.0..1000.0),
            scope,
        ));
        let fan_in = rng.random_range(1..=2.min(i + 1));
        let mut sources: Vec<String> = Vec::new();
        for _ in 0..fan_in {
            let s = rng.random_range(0..=i);
            let name = if s == i { SENSORS.to_string() } else { op_id(s) };
            if !sources.contains(&name) {
                sources.push(name);
            }
        }
        edges.extend(sources.into_iter().map(|s| (s, op_id(i))));
    }
    for i in 0..n {
        if !edges.iter().any(|(a, _)| *a == op_id(i)) || rng.random_bool(0.1) {
            edges.push((op_id(i), SINK.into()));
        }
    }
    AppSpec { operators: ops, edges }
}

/// Poisson or periodic sensors on random gateways of `devices`.
pub fn random_sensors(
    rng: &mut ChaCha8Rng,
    devices: &[DeviceSpec],
    max_sensors: usize,
    max_rate: f64,
) -> Vec<(SensorSpec, f64)> {
    let gateways: Vec<&str> = devices
        .iter()
        .filter(|d| !devices.iter().any(|c| c.parent.as_deref() == Some(d.id.as_str())))
        .map(|d| d.id.as_str())
        .collect();
    (0..rng.random_range(0..=max_sensors))
        .map(|i| {
            let gw = gateways[rng.random_range(0..gateways.len())];
            let rate = rng.random_range(0.5..max_rate);
            let phase = rng.random_range(0.0..100.0);
            let mode = if rng.random_bool(0.5) {
                SensorMode::Poisson { rate, phase }
            } else {
                SensorMode::Periodic { rate, phase }
            };
            (sensor(&format!("s{i}"), gw, mode, rng.random_range(10..3000)), rng.random_range(0.0..5.0))
        })
        .collect()
}
