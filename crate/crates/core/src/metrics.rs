//! End-to-end delay and core-network usage, computed by streaming over the run log.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::engine::{link_index, LogRecord, RecordKind, RunObserver, RunSummary};
use crate::fixed::{f64_6, format6, map_f64_6, opt_f64_6};
use crate::kernel::SimTime;
use crate::placement::{instance_name, Placement};
use crate::scenario::Scenario;
use crate::topology::Topology;

/// Sink delay of one delivery: clock time minus lineage origin.
pub fn tuple_delay(delivery: &LogRecord) -> f64 {
    (delivery.time - delivery.origin_ts).as_ms()
}

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    sum: f64,
    compensation: f64,
    count: u64,
}

impl Accumulator {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
        self.count += 1;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.total() / self.count as f64)
    }
}

fn touches_root(topo: &Topology, r: &LogRecord) -> bool {
    let root = topo.cloud() as u32;
    r.device == Some(root) || r.peer == Some(root)
}

/// Tuples and bytes whose transmission over a cloud-incident link completed.
pub fn core_network_usage(records: &[LogRecord], topo: &Topology) -> (u64, u64) {
    records
        .iter()
        .filter(|r| r.kind == RecordKind::TransferComplete && touches_root(topo, r))
        .fold((0, 0), |(n, b), r| (n + 1, b + r.bytes))
}

/// Aggregates a run while it executes; never holds the log.
#[derive(Debug, Clone)]
pub struct MetricsCollector {
    root: u32,
    warmup: SimTime,
    delays: Accumulator,
    /// Per whole second of simulated time, warm-up included.
    buckets: Vec<Accumulator>,
    cloud_tuples: u64,
    cloud_bytes: u64,
    source_tuples: u64,
    sink_deliveries: u64,
}

impl MetricsCollector {
    pub fn new(scenario: &Scenario) -> Self {
        let h = scenario.settings.horizon.as_ms();
        MetricsCollector {
            root: scenario.topology.cloud() as u32,
            warmup: scenario.settings.warmup(),
            delays: Accumulator::default(),
            buckets: vec![Accumulator::default(); (h / 1000.0).ceil() as usize + 1],
            cloud_tuples: 0,
            cloud_bytes: 0,
            source_tuples: 0,
            sink_deliveries: 0,
        }
    }

    pub fn delays(&self) -> &Accumulator {
        &self.delays
    }

    /// `second,deliveries,avg_delay_ms` rows, one per simulated second.
    pub fn write_delay_series<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["second", "deliveries", "avg_delay_ms"])?;
        for (s, b) in self.buckets.iter().enumerate() {
            let avg = b.mean().map(format6).unwrap_or_default();
            w.write_record([s.to_string(), b.count().to_string(), avg])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn report(&self, scenario: &Scenario, placement: &Placement, summary: &RunSummary) -> MetricsReport {
        let topo = &scenario.topology;
        let h = summary.horizon.as_ms();
        let frac = |busy: f64| (busy / h).clamp(0.0, 1.0);
        let device_utilization =
            topo.devices().iter().zip(&summary.device_busy_ms).map(|(d, &b)| (d.id.clone(), frac(b))).collect();
        let mut link_utilization = BTreeMap::new();
        for child in (0..topo.len()).filter(|&c| c != topo.cloud()) {
            let parent = topo.device(child).parent_index().expect("non-root");
            let (c, p) = (&topo.device(child).id, &topo.device(parent).id);
            link_utilization.insert(format!("{c}->{p}"), frac(summary.link_busy_ms[link_index(child, true)]));
            link_utilization.insert(format!("{p}->{c}"), frac(summary.link_busy_ms[link_index(child, false)]));
        }
        MetricsReport {
            policy: placement.policy.clone(),
            seed: scenario.settings.seed,
            horizon_ms: h,
            warmup_ms: self.warmup.as_ms(),
            scenario_hash: scenario.fingerprint(),
            avg_tuple_delay_ms: self.delays.mean().unwrap_or(0.0),
            delay_samples: self.delays.count(),
            cloud_tuples: self.cloud_tuples,
            cloud_bytes: self.cloud_bytes,
            source_tuples: self.source_tuples,
            sink_deliveries: self.sink_deliveries,
            device_utilization,
            link_utilization,
        }
    }
}

impl RunObserver for MetricsCollector {
    fn on_record(&mut self, r: &LogRecord) {
        match r.kind {
            RecordKind::Emit => self.source_tuples += 1,
            RecordKind::SinkDelivery => {
                self.sink_deliveries += 1;
                let d = tuple_delay(r);
                if r.time >= self.warmup {
                    self.delays.add(d);
                }
                let s = ((r.time.as_ms() / 1000.0) as usize).min(self.buckets.len() - 1);
                self.buckets[s].add(d);
            }
            RecordKind::TransferComplete if r.device == Some(self.root) || r.peer == Some(self.root) => {
                self.cloud_tuples += 1;
                self.cloud_bytes += r.bytes;
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub policy: String,
    pub seed: u64,
    #[serde(serialize_with = "f64_6")]
    pub horizon_ms: f64,
    #[serde(serialize_with = "f64_6")]
    pub warmup_ms: f64,
    pub scenario_hash: String,
    #[serde(serialize_with = "f64_6")]
    pub avg_tuple_delay_ms: f64,
    pub delay_samples: u64,
    pub cloud_tuples: u64,
    pub cloud_bytes: u64,
    pub source_tuples: u64,
    pub sink_deliveries: u64,
    #[serde(serialize_with = "map_f64_6")]
    pub device_utilization: BTreeMap<String, f64>,
    #[serde(serialize_with = "map_f64_6")]
    pub link_utilization: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "policy",
            "seed",
            "horizon_ms",
            "warmup_ms",
            "scenario_hash",
            "avg_tuple_delay_ms",
            "delay_samples",
            "cloud_tuples",
            "cloud_bytes",
            "source_tuples",
            "sink_deliveries",
        ]
        .map(String::from)
        .to_vec();
        h.extend(self.device_utilization.keys().map(|k| format!("util:{k}")));
        h.extend(self.link_utilization.keys().map(|k| format!("util:{k}")));
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![
            self.policy.clone(),
            self.seed.to_string(),
            format6(self.horizon_ms),
            format6(self.warmup_ms),
            self.scenario_hash.clone(),
            format6(self.avg_tuple_delay_ms),
            self.delay_samples.to_string(),
            self.cloud_tuples.to_string(),
            self.cloud_bytes.to_string(),
            self.source_tuples.to_string(),
            self.sink_deliveries.to_string(),
        ];
        r.extend(self.device_utilization.values().map(|&v| format6(v)));
        r.extend(self.link_utilization.values().map(|&v| format6(v)));
        r
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.csv_header()).expect("in-memory write");
        w.write_record(self.csv_row()).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    FogBetter,
    CloudBetter,
    Equal,
}

impl Direction {
    fn of(fog: f64, cloud: f64) -> Direction {
        match fog.partial_cmp(&cloud) {
            Some(std::cmp::Ordering::Less) => Direction::FogBetter,
            Some(std::cmp::Ordering::Greater) => Direction::CloudBetter,
            _ => Direction::Equal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub scenario_hash: String,
    pub seed: u64,
    /// fog / cloud; absent when the cloud value is zero and the fog one is not.
    #[serde(serialize_with = "opt_f64_6")]
    pub delay_ratio: Option<f64>,
    #[serde(serialize_with = "opt_f64_6")]
    pub cloud_tuple_ratio: Option<f64>,
    pub delay_direction: Direction,
    pub cloud_tuple_direction: Direction,
    pub fog: MetricsReport,
    pub cloud: MetricsReport,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompareError {
    #[error("MismatchedRuns: {0}")]
    MismatchedRuns(String),
}

fn ratio(fog: f64, cloud: f64) -> Option<f64> {
    if cloud != 0.0 {
        Some(fog / cloud)
    } else if fog == 0.0 {
        Some(1.0)
    } else {
        None
    }
}

pub fn compare(fog: &MetricsReport, cloud: &MetricsReport) -> Result<ComparisonReport, CompareError> {
    if fog.scenario_hash != cloud.scenario_hash {
        return Err(CompareError::MismatchedRuns(format!(
            "scenario hashes differ ({} vs {})",
            fog.scenario_hash, cloud.scenario_hash
        )));
    }
    if fog.seed != cloud.seed {
        return Err(CompareError::MismatchedRuns(format!("seeds differ ({} vs {})", fog.seed, cloud.seed)));
    }
    let (ft, ct) = (fog.cloud_tuples as f64, cloud.cloud_tuples as f64);
    Ok(ComparisonReport {
        scenario_hash: fog.scenario_hash.clone(),
        seed: fog.seed,
        delay_ratio: ratio(fog.avg_tuple_delay_ms, cloud.avg_tuple_delay_ms),
        cloud_tuple_ratio: ratio(ft, ct),
        delay_direction: Direction::of(fog.avg_tuple_delay_ms, cloud.avg_tuple_delay_ms),
        cloud_tuple_direction: Direction::of(ft, ct),
        fog: fog.clone(),
        cloud: cloud.clone(),
    })
}

/// Mean and sample standard deviation across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spread {
    #[serde(serialize_with = "f64_6")]
    pub mean: f64,
    #[serde(serialize_with = "f64_6")]
    pub stddev: f64,
}

impl Spread {
    fn of(xs: &[f64]) -> Option<Spread> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mut acc = Accumulator::default();
        xs.iter().for_each(|&x| acc.add(x));
        let mean = acc.total() / n;
        let mut sq = Accumulator::default();
        xs.iter().for_each(|&x| sq.add((x - mean) * (x - mean)));
        let stddev = if xs.len() > 1 { (sq.total() / (n - 1.0)).sqrt() } else { 0.0 };
        Some(Spread { mean, stddev })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub scenario_hash: String,
    pub seeds: Vec<u64>,
    pub delay_ratio: Option<Spread>,
    pub cloud_tuple_ratio: Option<Spread>,
    pub fog_better_delay: usize,
    pub fog_better_cloud_tuples: usize,
}

pub fn summarize(reports: &[ComparisonReport]) -> SweepSummary {
    let collect = |f: fn(&ComparisonReport) -> Option<f64>| reports.iter().filter_map(f).collect::<Vec<_>>();
    SweepSummary {
        scenario_hash: reports.first().map(|r| r.scenario_hash.clone()).unwrap_or_default(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        delay_ratio: Spread::of(&collect(|r| r.delay_ratio)),
        cloud_tuple_ratio: Spread::of(&collect(|r| r.cloud_tuple_ratio)),
        fog_better_delay: reports.iter().filter(|r| r.delay_direction == Direction::FogBetter).count(),
        fog_better_cloud_tuples: reports.iter().filter(|r| r.cloud_tuple_direction == Direction::FogBetter).count(),
    }
}

/// Streams every log record to CSV with names resolved. The first I/O error
/// is kept and later records are dropped.
pub struct TraceWriter<W: Write> {
    out: csv::Writer<W>,
    devices: Vec<String>,
    instances: Vec<String>,
    sensors: Vec<String>,
    error: Option<csv::Error>,
}

pub const TRACE_COLUMNS: [&str; 11] =
    ["time_ms", "seq", "event", "record", "device", "peer", "operator", "sensor", "tuple", "bytes", "origin_ms"];

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W, scenario: &Scenario, placement: &Placement) -> Self {
        let mut out = csv::Writer::from_writer(out);
        let error = out.write_record(TRACE_COLUMNS).err();
        TraceWriter {
            out,
            devices: scenario.topology.devices().iter().map(|d| d.id.clone()).collect(),
            instances: placement
                .instances
                .iter()
                .map(|&k| instance_name(&scenario.app, &scenario.topology, k))
                .collect(),
            sensors: scenario.sensors.iter().map(|s| s.sensor_id.clone()).collect(),
            error,
        }
    }

    pub fn finish(mut self) -> csv::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(())
    }
}

impl<W: Write> RunObserver for TraceWriter<W> {
    fn on_record(&mut self, r: &LogRecord) {
        if self.error.is_some() {
            return;
        }
        fn name(names: &[String], i: Option<u32>) -> &str {
            i.map_or("", |i| names[i as usize].as_str())
        }
        let row = [
            format6(r.time.as_ms()),
            r.seq.to_string(),
            r.event.as_str().to_string(),
            r.kind.as_str().to_string(),
            name(&self.devices, r.device).to_string(),
            name(&self.devices, r.peer).to_string(),
            name(&self.instances, r.instance).to_string(),
            name(&self.sensors, r.sensor).to_string(),
            r.tuple.to_string(),
            r.bytes.to_string(),
            format6(r.origin_ts.as_ms()),
        ];
        if let Err(e) = self.out.write_record(&row) {
            self.error = Some(e);
        }
    }
}
