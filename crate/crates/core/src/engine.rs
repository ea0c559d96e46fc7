//! Executes a placed application on the event kernel.
//!
//! Each device is one FIFO CPU server shared by every instance it hosts. Each
//! tree edge is two independent FIFO links (up and down): transmissions on a
//! directed link are serialized, and propagation latency is applied after the
//! transmission completes, so back-to-back tuples pipeline.

use std::collections::VecDeque;

use serde::Serialize;
use thiserror::Error;

use crate::app::{OperatorInstance, OperatorKind, Scope, Tuple};
use crate::kernel::{EventKind, Kernel, RandomStreams, SimTime};
use crate::placement::{instance_name, validate_placement, Placement, Violation};
use crate::scenario::Scenario;
use crate::topology::{Device, Topology};
use crate::workload::EmissionSchedule;

/// CPU time for `t` on `d`: `1000 * MI / MIPS` milliseconds.
pub fn service_time(t: &Tuple, d: &Device) -> SimTime {
    SimTime::from_ms(1000.0 * t.cpu_length / d.cpu_capacity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RecordKind {
    Emit,
    Arrival,
    ServiceStart,
    ServiceEnd,
    Filtered,
    WindowEmit,
    TransferStart,
    TransferComplete,
    SinkDelivery,
    SimEnd,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Emit => "Emit",
            RecordKind::Arrival => "Arrival",
            RecordKind::ServiceStart => "ServiceStart",
            RecordKind::ServiceEnd => "ServiceEnd",
            RecordKind::Filtered => "Filtered",
            RecordKind::WindowEmit => "WindowEmit",
            RecordKind::TransferStart => "TransferStart",
            RecordKind::TransferComplete => "TransferComplete",
            RecordKind::SinkDelivery => "SinkDelivery",
            RecordKind::SimEnd => "SimEnd",
        }
    }
}

/// One entry of the run log. `seq` is the kernel event being processed when
/// the record was produced. Indices refer to the scenario's topology, the
/// placement's instances and the scenario's sensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub time: SimTime,
    pub seq: u64,
    /// Kind of the kernel event being processed.
    pub event: EventKind,
    pub kind: RecordKind,
    pub device: Option<u32>,
    /// Far end of a link for transfer records.
    pub peer: Option<u32>,
    pub instance: Option<u32>,
    pub sensor: Option<u32>,
    pub tuple: u64,
    pub bytes: u64,
    pub origin_ts: SimTime,
}

pub trait RunObserver {
    fn on_record(&mut self, record: &LogRecord);
}

impl RunObserver for () {
    fn on_record(&mut self, _: &LogRecord) {}
}

impl RunObserver for Vec<LogRecord> {
    fn on_record(&mut self, record: &LogRecord) {
        self.push(*record);
    }
}

impl<A: RunObserver, B: RunObserver> RunObserver for (A, B) {
    fn on_record(&mut self, record: &LogRecord) {
        self.0.on_record(record);
        self.1.on_record(record);
    }
}

impl<T: RunObserver + ?Sized> RunObserver for &mut T {
    fn on_record(&mut self, record: &LogRecord) {
        (**self).on_record(record);
    }
}

/// Tuple fate bookkeeping.
///
/// `produced` must equal the sum of every terminal or pending fate:
/// delivered, transformed (consumed by a Map or a passing Filter), filtered,
/// absorbed by a window that has since closed, held in an open window, or in
/// flight at the horizon. `window_open` and `in_flight` are read from engine
/// state at the horizon, not from counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Conservation {
    pub produced: u64,
    pub source_tuples: u64,
    pub delivered: u64,
    pub transformed: u64,
    pub filtered: u64,
    pub window_closed: u64,
    pub window_open: u64,
    pub in_flight: u64,
}

impl Conservation {
    pub fn accounted(&self) -> u64 {
        self.delivered + self.transformed + self.filtered + self.window_closed + self.window_open + self.in_flight
    }

    pub fn holds(&self) -> bool {
        self.produced == self.accounted()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub horizon: SimTime,
    pub seed: u64,
    pub events_processed: u64,
    pub conservation: Conservation,
    /// Per device index.
    pub device_busy_ms: Vec<f64>,
    /// Per directed link index, see [`link_index`].
    pub link_busy_ms: Vec<f64>,
    /// Largest waiting-queue length seen in each quarter of the horizon.
    pub device_queue_peaks: Vec<[usize; 4]>,
    pub link_queue_peaks: Vec<[usize; 4]>,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    pub summary: RunSummary,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("placement is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidPlacement(Vec<Violation>),
    #[error("horizon must be > 0")]
    NonPositiveHorizon,
}

/// Directed link index: `2 * child` for child→parent, `2 * child + 1` for parent→child.
pub fn link_index(child: usize, upward: bool) -> usize {
    2 * child + usize::from(!upward)
}

/// Endpoints `(from, to)` of a directed link.
pub fn link_endpoints(topo: &Topology, link: usize) -> (usize, usize) {
    let child = link / 2;
    let parent = topo.device(child).parent_index().expect("links hang below non-root devices");
    if link.is_multiple_of(2) {
        (child, parent)
    } else {
        (parent, child)
    }
}

pub fn link_name(topo: &Topology, link: usize) -> String {
    let (a, b) = link_endpoints(topo, link);
    format!("{}->{}", topo.device(a).id, topo.device(b).id)
}

/// Runs the scenario and keeps the full log in memory.
pub fn simulate(scenario: &Scenario, placement: &Placement) -> Result<RunLog, EngineError> {
    let mut records = Vec::new();
    let summary = simulate_with(scenario, placement, &mut records)?;
    Ok(RunLog { records, summary })
}

/// Runs the scenario, streaming every log record to `observer`.
pub fn simulate_with<O: RunObserver>(
    scenario: &Scenario,
    placement: &Placement,
    observer: O,
) -> Result<RunSummary, EngineError> {
    let violations = validate_placement(placement, &scenario.app, &scenario.topology);
    if !violations.is_empty() {
        return Err(EngineError::InvalidPlacement(violations));
    }
    if scenario.settings.horizon <= SimTime::ZERO {
        return Err(EngineError::NonPositiveHorizon);
    }
    Ok(Engine::new(scenario, placement, observer).run())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Target {
    Instance(u32),
    Sink,
}

#[derive(Debug, Clone)]
struct Transit {
    tuple: Tuple,
    target: Target,
}

#[derive(Debug)]
enum Ev {
    Emit { sensor: u32 },
    Arrival { device: u32, transit: Transit },
    ProcessingComplete { device: u32 },
    TransferComplete { link: u32 },
    WindowClose { instance: u32, k: u64 },
    SimEnd,
}

impl Ev {
    fn kind(&self) -> EventKind {
        match self {
            Ev::Emit { .. } => EventKind::TupleEmit,
            Ev::Arrival { .. } => EventKind::TupleArrival,
            Ev::ProcessingComplete { .. } => EventKind::ProcessingComplete,
            Ev::TransferComplete { .. } => EventKind::TransferComplete,
            Ev::WindowClose { .. } => EventKind::WindowClose,
            Ev::SimEnd => EventKind::SimEnd,
        }
    }
}

#[derive(Default)]
struct Server {
    queue: VecDeque<Transit>,
    current: Option<Transit>,
    busy: bool,
    started: SimTime,
    busy_ms: f64,
    peaks: [usize; 4],
}

struct SensorRuntime {
    schedule: EmissionSchedule,
    gateway: usize,
    region: usize,
    latency: SimTime,
    size: u64,
    cpu_override: Option<f64>,
}

struct Engine<'a, O> {
    sc: &'a Scenario,
    topo: &'a Topology,
    observer: O,
    kernel: Kernel<Ev>,
    instances: Vec<OperatorInstance>,
    instance_device: Vec<usize>,
    /// op index -> instance index per region (one entry for global ops)
    routing: Vec<Vec<u32>>,
    sink_device: usize,
    cpus: Vec<Server>,
    links: Vec<Server>,
    sensors: Vec<SensorRuntime>,
    next_tuple: u64,
    seq: u64,
    event: EventKind,
    acct: Conservation,
    horizon: SimTime,
}

impl<'a, O: RunObserver> Engine<'a, O> {
    fn new(sc: &'a Scenario, placement: &'a Placement, observer: O) -> Self {
        let topo = &sc.topology;
        let app = &sc.app;
        let streams = RandomStreams::new(sc.settings.seed);
        let mut routing: Vec<Vec<u32>> = app
            .operators()
            .iter()
            .map(|op| match op.scope {
                Scope::PerGateway => vec![u32::MAX; topo.gateways().len()],
                Scope::Global => vec![u32::MAX],
            })
            .collect();
        let mut instances = Vec::with_capacity(placement.len());
        for (i, key) in placement.instances.iter().enumerate() {
            let spec = app.operator(key.op);
            let rng = matches!(spec.kind, OperatorKind::Filter { .. })
                .then(|| streams.stream(&format!("op/{}", instance_name(app, topo, *key))));
            instances.push(OperatorInstance::new(key.op, spec, rng));
            routing[key.op][key.region.unwrap_or(0)] = i as u32;
        }
        let sensors = sc
            .sensors
            .iter()
            .map(|s| {
                let attach = topo.sensor(&s.sensor_id).expect("scenario validated sensor attachments");
                let gateway = topo.index_of(&attach.gateway_id).expect("validated gateway");
                SensorRuntime {
                    schedule: EmissionSchedule::new(
                        s,
                        sc.settings.horizon,
                        streams.stream(&format!("sensor/{}", s.sensor_id)),
                    ),
                    gateway,
                    region: topo.gateway_position(gateway).expect("sensors attach to gateways"),
                    latency: SimTime::from_ms(attach.latency),
                    size: s.tuple_size,
                    cpu_override: s.tuple_cpu_length,
                }
            })
            .collect();
        Engine {
            sc,
            topo,
            observer,
            kernel: Kernel::new(),
            instances,
            instance_device: placement.assignments.clone(),
            routing,
            sink_device: placement.sink_device,
            cpus: (0..topo.len()).map(|_| Server::default()).collect(),
            links: (0..2 * topo.len()).map(|_| Server::default()).collect(),
            sensors,
            next_tuple: 0,
            seq: 0,
            event: EventKind::SimEnd,
            acct: Conservation::default(),
            horizon: sc.settings.horizon,
        }
    }

    fn log(&mut self, kind: RecordKind, device: Option<usize>, tuple: Option<&Tuple>) -> LogRecord {
        LogRecord {
            time: self.kernel.now(),
            seq: self.seq,
            event: self.event,
            kind,
            device: device.map(|d| d as u32),
            peer: None,
            instance: None,
            sensor: tuple.map(|t| t.sensor as u32),
            tuple: tuple.map_or(0, |t| t.id),
            bytes: tuple.map_or(0, |t| t.network_length),
            origin_ts: tuple.map_or(SimTime::ZERO, |t| t.origin_ts),
        }
    }

    fn emit_record(&mut self, rec: LogRecord) {
        self.observer.on_record(&rec);
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_tuple;
        self.next_tuple += 1;
        id
    }

    fn quarter(&self) -> usize {
        ((4.0 * self.kernel.now().as_ms() / self.horizon.as_ms()) as usize).min(3)
    }

    fn run(mut self) -> RunSummary {
        for (i, s) in self.sensors.iter_mut().enumerate() {
            if let Some(t) = s.schedule.next() {
                self.kernel.schedule(t, Ev::Emit { sensor: i as u32 }).expect("emissions are nonnegative");
            }
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if let Some(w) = self.sc.app.operator(inst.operator()).window_ms() {
                if w <= self.horizon.as_ms() {
                    self.kernel
                        .schedule(SimTime::from_ms(w), Ev::WindowClose { instance: i as u32, k: 1 })
                        .expect("future boundary");
                }
            }
        }
        while let Some(ev) = self.kernel.next_until(self.horizon) {
            self.seq = ev.seq;
            self.event = ev.payload.kind();
            self.handle(ev.payload);
        }
        let end = self.kernel.schedule(self.horizon, Ev::SimEnd).expect("horizon is not in the past");
        let ev = self.kernel.next_until(self.horizon).expect("SimEnd is due");
        debug_assert_eq!(ev.seq, end.0);
        self.seq = ev.seq;
        self.event = EventKind::SimEnd;
        self.handle(ev.payload);
        self.finish()
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Emit { sensor } => self.on_emit(sensor as usize),
            Ev::Arrival { device, transit } => self.arrive(device as usize, transit),
            Ev::ProcessingComplete { device } => self.on_processed(device as usize),
            Ev::TransferComplete { link } => self.on_transferred(link as usize),
            Ev::WindowClose { instance, k } => self.on_window_close(instance as usize, k),
            Ev::SimEnd => {
                let rec = self.log(RecordKind::SimEnd, None, None);
                self.emit_record(rec);
            }
        }
    }

    fn on_emit(&mut self, sensor: usize) {
        let now = self.kernel.now();
        let (gateway, region, latency, size) = {
            let s = &self.sensors[sensor];
            (s.gateway, s.region, s.latency, s.size)
        };
        let mut targets: Vec<Target> =
            self.sc.app.entries().map(|op| Target::Instance(self.instance_for(op, region))).collect();
        if self.sc.app.sensors_feed_sink() {
            targets.push(Target::Sink);
        }
        for target in targets {
            let mut tuple = Tuple {
                id: self.fresh_id(),
                cpu_length: 0.0,
                network_length: size,
                origin_ts: now,
                emitting_operator: None,
                sensor,
                region,
            };
            self.stamp(&mut tuple, target);
            self.acct.produced += 1;
            self.acct.source_tuples += 1;
            let mut rec = self.log(RecordKind::Emit, None, Some(&tuple));
            rec.device = Some(gateway as u32);
            self.emit_record(rec);
            self.kernel
                .schedule_in(latency, Ev::Arrival { device: gateway as u32, transit: Transit { tuple, target } });
        }
        if let Some(t) = self.sensors[sensor].schedule.next() {
            self.kernel.schedule(t, Ev::Emit { sensor: sensor as u32 }).expect("emissions are time-ordered");
        }
    }

    fn instance_for(&self, op: usize, region: usize) -> u32 {
        let slots = &self.routing[op];
        if slots.len() == 1 {
            slots[0]
        } else {
            slots[region]
        }
    }

    /// Sets the CPU work the tuple will cost its consumer.
    fn stamp(&self, tuple: &mut Tuple, target: Target) {
        tuple.cpu_length = match target {
            Target::Sink => 0.0,
            Target::Instance(i) => {
                let op = self.instances[i as usize].operator();
                match (tuple.emitting_operator, self.sensors.get(tuple.sensor).and_then(|s| s.cpu_override)) {
                    (None, Some(cpu)) => cpu,
                    _ => self.sc.app.operator(op).cpu_per_tuple,
                }
            }
        };
    }

    fn target_device(&self, target: Target) -> usize {
        match target {
            Target::Instance(i) => self.instance_device[i as usize],
            Target::Sink => self.sink_device,
        }
    }

    fn arrive(&mut self, device: usize, transit: Transit) {
        let mut rec = self.log(RecordKind::Arrival, Some(device), Some(&transit.tuple));
        if let Target::Instance(i) = transit.target {
            rec.instance = Some(i);
        }
        self.emit_record(rec);
        self.forward(device, transit);
    }

    /// Delivers locally or pushes the tuple onto the next link of its route.
    fn forward(&mut self, device: usize, transit: Transit) {
        let dest = self.target_device(transit.target);
        match self.topo.next_hop(device, dest) {
            None => match transit.target {
                Target::Sink => {
                    self.acct.delivered += 1;
                    let rec = self.log(RecordKind::SinkDelivery, Some(device), Some(&transit.tuple));
                    self.emit_record(rec);
                }
                Target::Instance(_) => self.enqueue_cpu(device, transit),
            },
            Some(next) => {
                let upward = self.topo.device(device).parent_index() == Some(next);
                let link = if upward { link_index(device, true) } else { link_index(next, false) };
                self.enqueue_link(link, transit);
            }
        }
    }

    fn enqueue_cpu(&mut self, device: usize, transit: Transit) {
        let q = self.quarter();
        let cpu = &mut self.cpus[device];
        cpu.queue.push_back(transit);
        if cpu.busy {
            cpu.peaks[q] = cpu.peaks[q].max(cpu.queue.len());
        } else {
            self.start_service(device);
        }
    }

    fn start_service(&mut self, device: usize) {
        let Some(job) = self.cpus[device].queue.pop_front() else {
            return;
        };
        let now = self.kernel.now();
        let duration = service_time(&job.tuple, self.topo.device(device));
        let mut rec = self.log(RecordKind::ServiceStart, Some(device), Some(&job.tuple));
        if let Target::Instance(i) = job.target {
            rec.instance = Some(i);
        }
        self.emit_record(rec);
        let cpu = &mut self.cpus[device];
        cpu.busy = true;
        cpu.started = now;
        cpu.current = Some(job);
        self.kernel.schedule_in(duration, Ev::ProcessingComplete { device: device as u32 });
    }

    fn on_processed(&mut self, device: usize) {
        let now = self.kernel.now();
        let job = self.cpus[device].current.take().expect("completion implies a job in service");
        self.cpus[device].busy_ms += (now - self.cpus[device].started).as_ms();
        let Target::Instance(inst) = job.target else { unreachable!("the sink consumes without CPU service") };
        let mut rec = self.log(RecordKind::ServiceEnd, Some(device), Some(&job.tuple));
        rec.instance = Some(inst);
        self.emit_record(rec);

        let mut next_id = self.next_tuple;
        let mut ids = || {
            let id = next_id;
            next_id += 1;
            id
        };
        let instance = &mut self.instances[inst as usize];
        let outputs = instance.process_tuple(&job.tuple, now, &mut ids);
        let kind = instance.kind();
        self.next_tuple = next_id;
        match kind {
            OperatorKind::WindowAggregate { .. } => {}
            OperatorKind::Map | OperatorKind::Filter { .. } if outputs.is_empty() => {
                self.acct.filtered += 1;
                let mut rec = self.log(RecordKind::Filtered, Some(device), Some(&job.tuple));
                rec.instance = Some(inst);
                self.emit_record(rec);
            }
            _ => self.acct.transformed += 1,
        }
        // device stays marked busy while outputs are routed, so co-located
        // consumers queue behind jobs that were already waiting
        for out in outputs {
            self.dispatch(inst as usize, device, out);
        }
        self.cpus[device].busy = false;
        if !self.cpus[device].queue.is_empty() {
            self.start_service(device);
        }
    }

    /// Sends an operator output to every downstream consumer.
    fn dispatch(&mut self, inst: usize, device: usize, out: Tuple) {
        let op = self.instances[inst].operator();
        let app = &self.sc.app;
        let mut targets: Vec<Target> =
            app.successors(op).iter().map(|&s| Target::Instance(self.instance_for(s, out.region))).collect();
        if app.feeds_sink(op) {
            targets.push(Target::Sink);
        }
        for (n, target) in targets.into_iter().enumerate() {
            let mut tuple = out.clone();
            if n > 0 {
                tuple.id = self.fresh_id();
            }
            self.stamp(&mut tuple, target);
            self.acct.produced += 1;
            self.forward(device, Transit { tuple, target });
        }
    }

    fn enqueue_link(&mut self, link: usize, transit: Transit) {
        let q = self.quarter();
        let l = &mut self.links[link];
        l.queue.push_back(transit);
        if l.busy {
            l.peaks[q] = l.peaks[q].max(l.queue.len());
        } else {
            self.start_transfer(link);
        }
    }

    fn start_transfer(&mut self, link: usize) {
        let Some(job) = self.links[link].queue.pop_front() else {
            return;
        };
        let (from, to) = link_endpoints(self.topo, link);
        let child = link / 2;
        let bandwidth = self.topo.device(child).uplink.expect("non-root uplink").bandwidth;
        let mut rec = self.log(RecordKind::TransferStart, Some(from), Some(&job.tuple));
        rec.peer = Some(to as u32);
        self.emit_record(rec);
        let now = self.kernel.now();
        let l = &mut self.links[link];
        l.busy = true;
        l.started = now;
        let tx = SimTime::from_ms(job.tuple.network_length as f64 / bandwidth);
        l.current = Some(job);
        self.kernel.schedule_in(tx, Ev::TransferComplete { link: link as u32 });
    }

    fn on_transferred(&mut self, link: usize) {
        let now = self.kernel.now();
        let (from, to) = link_endpoints(self.topo, link);
        let child = link / 2;
        let latency = self.topo.device(child).uplink.expect("non-root uplink").latency;
        let job = self.links[link].current.take().expect("completion implies a transmission");
        self.links[link].busy_ms += (now - self.links[link].started).as_ms();
        let mut rec = self.log(RecordKind::TransferComplete, Some(from), Some(&job.tuple));
        rec.peer = Some(to as u32);
        self.emit_record(rec);
        self.kernel.schedule_in(SimTime::from_ms(latency), Ev::Arrival { device: to as u32, transit: job });
        self.links[link].busy = false;
        if !self.links[link].queue.is_empty() {
            self.start_transfer(link);
        }
    }

    fn on_window_close(&mut self, inst: usize, k: u64) {
        let now = self.kernel.now();
        let device = self.instance_device[inst];
        let window = self.sc.app.operator(self.instances[inst].operator()).window_ms().expect("window operator");
        let absorbed = self.instances[inst].buffered();
        let mut next_id = self.next_tuple;
        let out = self.instances[inst].close_window(now, &mut || {
            let id = next_id;
            next_id += 1;
            id
        });
        self.next_tuple = next_id;
        if let Some(out) = out {
            self.acct.window_closed += absorbed;
            let mut rec = self.log(RecordKind::WindowEmit, Some(device), Some(&out));
            rec.instance = Some(inst as u32);
            self.emit_record(rec);
            self.dispatch(inst, device, out);
        }
        let next = SimTime::from_ms((k + 1) as f64 * window);
        if next <= self.horizon {
            self.kernel.schedule(next, Ev::WindowClose { instance: inst as u32, k: k + 1 }).expect("future boundary");
        }
    }

    fn finish(self) -> RunSummary {
        let horizon = self.horizon;
        let mut acct = self.acct;
        let pending_arrivals = self.kernel.pending_events().filter(|e| matches!(e.payload, Ev::Arrival { .. })).count();
        let held = |s: &Server| s.queue.len() + usize::from(s.current.is_some());
        acct.in_flight = (pending_arrivals
            + self.cpus.iter().map(held).sum::<usize>()
            + self.links.iter().map(held).sum::<usize>()) as u64;
        acct.window_open = self.instances.iter().map(|i| i.buffered()).sum();
        let busy = |s: &Server| s.busy_ms + if s.current.is_some() { (horizon - s.started).as_ms() } else { 0.0 };
        RunSummary {
            horizon,
            seed: self.sc.settings.seed,
            events_processed: self.kernel.stats().events_processed,
            conservation: acct,
            device_busy_ms: self.cpus.iter().map(busy).collect(),
            link_busy_ms: self.links.iter().map(busy).collect(),
            device_queue_peaks: self.cpus.iter().map(|s| s.peaks).collect(),
            link_queue_peaks: self.links.iter().map(|s| s.peaks).collect(),
        }
    }
}
