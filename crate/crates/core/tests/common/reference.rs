//! Straight-line reference executor for single-path [`MiniCase`]s.
//!
//! No event queue: each reading is expanded into its fixed sequence of
//! service and transmission steps, then the start/end time of every step is
//! found by iterating FIFO-by-arrival timing at each server to a fixed point.

use fogsim::engine::RunLog;
use fogsim::placement::Placement;
use fogsim::scenario::Scenario;

use super::{dev_id, op_id, MiniCase};

#[derive(Debug, Clone, PartialEq)]
pub struct Rec {
    pub time: f64,
    pub kind: &'static str,
    pub device: String,
    pub peer: String,
    pub op: String,
}

fn rec(time: f64, kind: &'static str, device: String, peer: String, op: String) -> Rec {
    Rec { time, kind, device, peer, op }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Server {
    Cpu(usize),
    /// Uplink of the given child device.
    Link(usize),
}

#[derive(Debug, Clone)]
struct Step {
    server: Server,
    duration: f64,
    /// Delay between the end of this step and readiness for the next one.
    after: f64,
    /// Operator the tuple is headed to; empty for the sink.
    target: String,
    filtered: bool,
}

#[derive(Debug, Clone)]
struct Job {
    emitted: f64,
    at_gateway: f64,
    steps: Vec<Step>,
    /// Reaches the sink after the last step (false when dropped by a filter).
    delivered: bool,
}

fn plan(case: &MiniCase, sensor: usize, emitted: f64) -> Job {
    let s = &case.sensors[sensor];
    let mut steps = Vec::new();
    let mut at = case.gateway();
    let mut size = s.size as f64;
    let mut delivered = true;
    let hosts = case.ops.iter().map(|o| Some(o.host)).chain([None]);
    for (k, host) in hosts.enumerate() {
        let dest = host.unwrap_or(0);
        let target = if host.is_some() { op_id(k) } else { String::new() };
        while at != dest {
            assert!(dest < at, "mini cases only flow toward the cloud");
            let (_, lat, bw) = case.devices[at];
            steps.push(Step {
                server: Server::Link(at),
                duration: size / bw,
                after: lat,
                target: target.clone(),
                filtered: false,
            });
            at -= 1;
        }
        if host.is_none() {
            break;
        }
        let op = &case.ops[k];
        let filtered = op.selectivity == Some(0.0);
        steps.push(Step {
            server: Server::Cpu(at),
            duration: 1000.0 * op.cpu / case.devices[at].0,
            after: 0.0,
            target,
            filtered,
        });
        if filtered {
            delivered = false;
            break;
        }
        size = op.out_size as f64;
    }
    Job { emitted, at_gateway: emitted + s.latency, steps, delivered }
}

/// Every record the engine is expected to log, in no particular order.
pub fn execute(case: &MiniCase) -> Vec<Rec> {
    let mut jobs = Vec::new();
    for (i, s) in case.sensors.iter().enumerate() {
        for &t in &s.times {
            jobs.push(plan(case, i, t));
        }
    }
    let mut arrival: Vec<Vec<f64>> = jobs.iter().map(|j| vec![j.at_gateway; j.steps.len()]).collect();
    let mut start = arrival.clone();
    let mut end = arrival.clone();
    let mut servers: Vec<Server> = Vec::new();
    for j in &jobs {
        for s in &j.steps {
            if !servers.contains(&s.server) {
                servers.push(s.server);
            }
        }
    }
    let mut settled = false;
    for _ in 0..10_000 {
        for &server in &servers {
            let mut visits: Vec<(f64, usize, usize)> = Vec::new();
            for (j, job) in jobs.iter().enumerate() {
                for (k, s) in job.steps.iter().enumerate() {
                    if s.server == server {
                        visits.push((arrival[j][k], j, k));
                    }
                }
            }
            visits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut free = f64::NEG_INFINITY;
            for (a, j, k) in visits {
                start[j][k] = a.max(free);
                end[j][k] = start[j][k] + jobs[j].steps[k].duration;
                free = end[j][k];
            }
        }
        let mut changed = false;
        for (j, job) in jobs.iter().enumerate() {
            for k in 1..job.steps.len() {
                let a = end[j][k - 1] + job.steps[k - 1].after;
                if a != arrival[j][k] {
                    arrival[j][k] = a;
                    changed = true;
                }
            }
        }
        if !changed {
            settled = true;
            break;
        }
    }
    assert!(settled, "reference timing did not converge");

    let gw = dev_id(case.gateway());
    let mut out = Vec::new();
    for (j, job) in jobs.iter().enumerate() {
        out.push(rec(job.emitted, "Emit", gw.clone(), String::new(), String::new()));
        let first = job.steps.first().map(|s| s.target.clone()).unwrap_or_default();
        out.push(rec(job.at_gateway, "Arrival", gw.clone(), String::new(), first));
        let mut ready = job.at_gateway;
        for (k, s) in job.steps.iter().enumerate() {
            let (t0, t1) = (start[j][k], end[j][k]);
            match s.server {
                Server::Cpu(d) => {
                    out.push(rec(t0, "ServiceStart", dev_id(d), String::new(), s.target.clone()));
                    out.push(rec(t1, "ServiceEnd", dev_id(d), String::new(), s.target.clone()));
                    if s.filtered {
                        out.push(rec(t1, "Filtered", dev_id(d), String::new(), s.target.clone()));
                    }
                }
                Server::Link(c) => {
                    out.push(rec(t0, "TransferStart", dev_id(c), dev_id(c - 1), String::new()));
                    out.push(rec(t1, "TransferComplete", dev_id(c), dev_id(c - 1), String::new()));
                    out.push(rec(t1 + s.after, "Arrival", dev_id(c - 1), String::new(), s.target.clone()));
                }
            }
            ready = t1 + s.after;
        }
        if job.delivered {
            out.push(rec(ready, "SinkDelivery", dev_id(0), String::new(), String::new()));
        }
    }
    out.push(rec(case.horizon, "SimEnd", String::new(), String::new(), String::new()));
    out
}

/// The engine log in reference form, with indices resolved to names.
pub fn from_log(log: &RunLog, scenario: &Scenario, placement: &Placement) -> Vec<Rec> {
    let name = |d: Option<u32>| d.map(|d| scenario.topology.device(d as usize).id.clone()).unwrap_or_default();
    log.records
        .iter()
        .map(|r| Rec {
            time: r.time.as_ms(),
            kind: r.kind.as_str(),
            device: name(r.device),
            peer: name(r.peer),
            op: r
                .instance
                .map(|i| scenario.app.operator(placement.instances[i as usize].op).id.clone())
                .unwrap_or_default(),
        })
        .collect()
}

/// Matches records one-to-one by (kind, device, peer, op), then timestamps
/// within `tol` relative.
pub fn compare(mut engine: Vec<Rec>, mut reference: Vec<Rec>, tol: f64) -> Result<(), String> {
    let key = |r: &Rec| (r.kind, r.device.clone(), r.peer.clone(), r.op.clone());
    let order = |a: &Rec, b: &Rec| key(a).cmp(&key(b)).then(a.time.total_cmp(&b.time));
    engine.sort_by(order);
    reference.sort_by(order);
    if engine.len() != reference.len() {
        return Err(format!("engine logged {} records, reference {}", engine.len(), reference.len()));
    }
    for (e, r) in engine.iter().zip(&reference) {
        if key(e) != key(r) || (e.time - r.time).abs() > tol * r.time.abs().max(1.0) {
            return Err(format!("engine {e:?} vs reference {r:?}"));
        }
    }
    Ok(())
}
