//! Scenario assembly and the schema-versioned TOML scenario file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::Spanned;

use crate::app::{validate_dag, AppError, AppModel, AppSpec, OperatorKind, OperatorSpec, Scope};
use crate::kernel::SimTime;
use crate::topology::{build_topology, DeviceSpec, SensorAttachment, Topology, TopologyError, TopologySpec};
use crate::workload::{load_trace, trace_times, SensorMode, SensorSpec, TraceError, WorkloadError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulationSettings {
    pub horizon: SimTime,
    pub seed: u64,
    /// Fraction of the horizon whose sink deliveries are excluded from delay averages.
    pub warmup_fraction: f64,
}

impl SimulationSettings {
    pub fn warmup(&self) -> SimTime {
        SimTime::from_ms(self.horizon.as_ms() * self.warmup_fraction)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    App(#[from] AppError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("sensor '{0}' has a workload entry but no topology attachment")]
    UnattachedSensor(String),
    #[error("sensor '{0}' is attached in the topology but has no workload entry")]
    MissingWorkload(String),
    #[error("sensor '{sensor}' declares gateway '{declared}' but is attached to '{attached}'")]
    GatewayMismatch { sensor: String, declared: String, attached: String },
    #[error("invalid simulation settings: {0}")]
    InvalidSettings(String),
}

/// Everything needed to run: validated topology, app and workload.
#[derive(Debug, Clone, Serialize)]
pub struct Scenario {
    pub topology: Topology,
    pub app: AppModel,
    /// Sensor index order used by tuples and log records.
    pub sensors: Vec<SensorSpec>,
    pub settings: SimulationSettings,
}

impl Scenario {
    pub fn new(
        topology: &TopologySpec,
        app: &AppSpec,
        sensors: Vec<SensorSpec>,
        settings: SimulationSettings,
    ) -> Result<Scenario, ScenarioError> {
        if !(settings.horizon.as_ms().is_finite() && settings.horizon.as_ms() > 0.0) {
            return Err(ScenarioError::InvalidSettings("horizon_ms must be > 0".into()));
        }
        if !(0.0..1.0).contains(&settings.warmup_fraction) {
            return Err(ScenarioError::InvalidSettings("warmup_fraction must lie in [0, 1)".into()));
        }
        let topology = build_topology(topology)?;
        let app = validate_dag(app)?;
        for s in &sensors {
            s.validate()?;
            let attach =
                topology.sensor(&s.sensor_id).ok_or_else(|| ScenarioError::UnattachedSensor(s.sensor_id.clone()))?;
            if attach.gateway_id != s.gateway_id {
                return Err(ScenarioError::GatewayMismatch {
                    sensor: s.sensor_id.clone(),
                    declared: s.gateway_id.clone(),
                    attached: attach.gateway_id.clone(),
                });
            }
        }
        for a in topology.sensors() {
            if !sensors.iter().any(|s| s.sensor_id == a.sensor_id) {
                return Err(ScenarioError::MissingWorkload(a.sensor_id.clone()));
            }
        }
        Ok(Scenario { topology, app, sensors, settings })
    }

    pub fn with_seed(&self, seed: u64) -> Scenario {
        let mut sc = self.clone();
        sc.settings.seed = seed;
        sc
    }

    /// Hash of everything except the seed; paired runs must agree on it.
    pub fn fingerprint(&self) -> String {
        let body = serde_json::to_vec(&(
            &self.topology,
            &self.app,
            &self.sensors,
            self.settings.horizon,
            self.settings.warmup_fraction,
        ))
        .expect("scenario serializes");
        hex::encode(&Sha256::digest(&body)[..16])
    }

    pub fn load(path: &Path) -> Result<Scenario, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError { line: None, message: format!("cannot read {}: {e}", path.display()) })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Scenario::from_toml(&text, &base)
    }

    /// Parses a scenario document. Relative trace paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Scenario, ConfigError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| ConfigError {
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        Builder { text, raw: &raw, base_dir }.build()
    }
}

/// Config failure, anchored to a 1-based line when one can be identified.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    schema_version: Spanned<u32>,
    simulation: Spanned<RawSimulation>,
    topology: RawTopology,
    application: RawApplication,
    workload: RawWorkload,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    horizon_ms: f64,
    seed: u64,
    #[serde(default = "default_warmup")]
    warmup_fraction: f64,
}

fn default_warmup() -> f64 {
    0.1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTopology {
    devices: Vec<Spanned<RawDevice>>,
    #[serde(default)]
    sensors: Vec<Spanned<RawAttachment>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDevice {
    id: String,
    parent: Option<String>,
    cpu_mips: f64,
    uplink_latency_ms: Option<f64>,
    uplink_bandwidth_bytes_per_ms: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttachment {
    id: String,
    gateway: String,
    #[serde(default)]
    latency_ms: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawApplication {
    #[serde(default)]
    operators: Vec<Spanned<RawOperator>>,
    edges: Vec<Spanned<RawEdge>>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawKind {
    Map,
    Filter,
    WindowAggregate,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOperator {
    id: String,
    kind: RawKind,
    selectivity: Option<f64>,
    window_ms: Option<f64>,
    cpu_mi_per_tuple: f64,
    out_tuple_bytes: u64,
    mips_demand: f64,
    scope: Scope,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    from: String,
    to: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkload {
    trace_file: Option<Spanned<String>>,
    #[serde(default)]
    sensors: Vec<Spanned<RawSensor>>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawMode {
    Periodic,
    Poisson,
    Trace,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSensor {
    id: String,
    mode: RawMode,
    rate_per_s: Option<f64>,
    #[serde(default)]
    phase_ms: f64,
    tuple_bytes: u64,
    tuple_cpu_mi: Option<f64>,
}

struct Builder<'a> {
    text: &'a str,
    raw: &'a RawScenario,
    base_dir: &'a Path,
}

impl Builder<'_> {
    fn at<T>(&self, spanned: &Spanned<T>) -> Option<usize> {
        Some(line_of(self.text, spanned.span().start))
    }

    fn err<T>(&self, spanned: &Spanned<T>, message: impl Into<String>) -> ConfigError {
        ConfigError { line: self.at(spanned), message: message.into() }
    }

    fn device_line(&self, id: &str) -> Option<usize> {
        self.raw.topology.devices.iter().find(|d| d.get_ref().id == id).and_then(|d| self.at(d))
    }

    fn attachment_line(&self, id: &str) -> Option<usize> {
        self.raw.topology.sensors.iter().find(|s| s.get_ref().id == id).and_then(|s| self.at(s))
    }

    fn operator_line(&self, id: &str) -> Option<usize> {
        self.raw.application.operators.iter().find(|o| o.get_ref().id == id).and_then(|o| self.at(o))
    }

    fn edge_line(&self, from: &str, to: &str) -> Option<usize> {
        self.raw
            .application
            .edges
            .iter()
            .find(|e| e.get_ref().from == from && (to.is_empty() || e.get_ref().to == to))
            .and_then(|e| self.at(e))
    }

    fn sensor_line(&self, id: &str) -> Option<usize> {
        self.raw.workload.sensors.iter().find(|s| s.get_ref().id == id).and_then(|s| self.at(s))
    }

    fn build(&self) -> Result<Scenario, ConfigError> {
        let raw = self.raw;
        if *raw.schema_version.get_ref() != SCHEMA_VERSION {
            return Err(self.err(
                &raw.schema_version,
                format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", raw.schema_version.get_ref()),
            ));
        }
        let sim = raw.simulation.get_ref();
        let settings = SimulationSettings {
            horizon: if sim.horizon_ms > 0.0 && sim.horizon_ms.is_finite() {
                SimTime::from_ms(sim.horizon_ms)
            } else {
                return Err(self.err(&raw.simulation, "horizon_ms must be > 0"));
            },
            seed: sim.seed,
            warmup_fraction: sim.warmup_fraction,
        };

        let topology = TopologySpec {
            devices: raw
                .topology
                .devices
                .iter()
                .map(|d| {
                    let d = d.get_ref();
                    DeviceSpec {
                        id: d.id.clone(),
                        parent: d.parent.clone(),
                        cpu_capacity: d.cpu_mips,
                        uplink_latency: d.uplink_latency_ms,
                        uplink_bandwidth: d.uplink_bandwidth_bytes_per_ms,
                    }
                })
                .collect(),
            sensors: raw
                .topology
                .sensors
                .iter()
                .map(|s| {
                    let s = s.get_ref();
                    SensorAttachment { sensor_id: s.id.clone(), gateway_id: s.gateway.clone(), latency: s.latency_ms }
                })
                .collect(),
        };

        let mut operators = Vec::new();
        for o in &raw.application.operators {
            let r = o.get_ref();
            let kind = match (r.kind, r.selectivity, r.window_ms) {
                (RawKind::Map, None | Some(1.0), None) => OperatorKind::Map,
                (RawKind::Map, _, _) => {
                    return Err(self.err(o, format!("map operator '{}' takes no selectivity or window_ms", r.id)))
                }
                (RawKind::Filter, Some(selectivity), None) => OperatorKind::Filter { selectivity },
                (RawKind::Filter, _, _) => {
                    return Err(self.err(o, format!("filter operator '{}' needs selectivity and no window_ms", r.id)))
                }
                (RawKind::WindowAggregate, None, Some(window_ms)) => OperatorKind::WindowAggregate { window_ms },
                (RawKind::WindowAggregate, _, _) => {
                    return Err(self.err(o, format!("window operator '{}' needs window_ms and no selectivity", r.id)))
                }
            };
            operators.push(OperatorSpec {
                id: r.id.clone(),
                kind,
                cpu_per_tuple: r.cpu_mi_per_tuple,
                out_tuple_size: r.out_tuple_bytes,
                mips_demand: r.mips_demand,
                scope: r.scope,
            });
        }
        let app = AppSpec {
            operators,
            edges: raw.application.edges.iter().map(|e| (e.get_ref().from.clone(), e.get_ref().to.clone())).collect(),
        };

        let traces: BTreeMap<String, Vec<SimTime>> = match &raw.workload.trace_file {
            Some(file) => {
                let path: PathBuf = self.base_dir.join(file.get_ref());
                let known: Vec<&str> = raw.workload.sensors.iter().map(|s| s.get_ref().id.as_str()).collect();
                let records =
                    load_trace(&path, &known).map_err(|e| self.err(file, format!("{}: {e}", path.display())))?;
                trace_times(&records)
            }
            None => BTreeMap::new(),
        };

        let mut sensors = Vec::new();
        for s in &raw.workload.sensors {
            let r = s.get_ref();
            let gateway_id = topology
                .sensors
                .iter()
                .find(|a| a.sensor_id == r.id)
                .map(|a| a.gateway_id.clone())
                .ok_or_else(|| self.err(s, ScenarioError::UnattachedSensor(r.id.clone()).to_string()))?;
            let rate = || r.rate_per_s.ok_or_else(|| self.err(s, format!("sensor '{}' needs rate_per_s", r.id)));
            let mode = match r.mode {
                RawMode::Periodic => SensorMode::Periodic { rate: rate()?, phase: r.phase_ms },
                RawMode::Poisson => SensorMode::Poisson { rate: rate()?, phase: r.phase_ms },
                RawMode::Trace => {
                    if raw.workload.trace_file.is_none() {
                        return Err(
                            self.err(s, format!("sensor '{}' replays a trace but workload.trace_file is unset", r.id))
                        );
                    }
                    SensorMode::Trace { times: traces.get(&r.id).cloned().unwrap_or_default() }
                }
            };
            sensors.push(SensorSpec {
                sensor_id: r.id.clone(),
                gateway_id,
                mode,
                tuple_cpu_length: r.tuple_cpu_mi,
                tuple_size: r.tuple_bytes,
            });
        }

        Scenario::new(&topology, &app, sensors, settings)
            .map_err(|e| ConfigError { line: self.locate(&e), message: e.to_string() })
    }

    fn locate(&self, e: &ScenarioError) -> Option<usize> {
        match e {
            ScenarioError::Topology(t) => match t {
                TopologyError::Empty | TopologyError::NotATree(_) => {
                    self.raw.topology.devices.first().and_then(|d| self.at(d))
                }
                TopologyError::DanglingParent { device, .. }
                | TopologyError::InvalidUplink { device, .. }
                | TopologyError::NonPositiveCapacity(device)
                | TopologyError::DuplicateDevice(device)
                | TopologyError::UnknownDevice(device) => self.device_line(device),
                TopologyError::NotAGateway { sensor, .. }
                | TopologyError::UnknownGateway { sensor, .. }
                | TopologyError::InvalidSensorLatency(sensor)
                | TopologyError::DuplicateSensor(sensor) => self.attachment_line(sensor),
            },
            ScenarioError::App(a) => match a {
                AppError::CyclicGraph(cycle) => cycle.windows(2).next().and_then(|w| self.edge_line(&w[0], &w[1])),
                AppError::UnreachableOperator(op)
                | AppError::DeadEnd(op)
                | AppError::DuplicateOperator(op)
                | AppError::ReservedName(op)
                | AppError::InvalidOperator { id: op, .. } => self.operator_line(op),
                AppError::UnknownOperator { from, to, .. } | AppError::InvalidEdge(from, to) => {
                    self.edge_line(from, to)
                }
                AppError::MissingSink => self.raw.application.edges.last().and_then(|e| self.at(e)),
            },
            ScenarioError::Workload(WorkloadError::InvalidSensor { sensor, .. })
            | ScenarioError::UnattachedSensor(sensor)
            | ScenarioError::GatewayMismatch { sensor, .. } => self.sensor_line(sensor),
            ScenarioError::MissingWorkload(sensor) => self.attachment_line(sensor),
            ScenarioError::InvalidSettings(_) => self.at(&self.raw.simulation),
            ScenarioError::Trace(_) => self.raw.workload.trace_file.as_ref().and_then(|f| self.at(f)),
        }
    }
}
