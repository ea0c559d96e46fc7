//! Sensor emission schedules: periodic, Poisson, and CSV trace replay.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::SimTime;

pub const TRACE_HEADER: [&str; 3] = ["time_ms", "sensor_id", "value"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SensorMode {
    /// Emits at `phase`, `phase + 1000/rate`, ...
    Periodic { rate: f64, phase: f64 },
    /// Exponential inter-arrivals with mean `1000/rate` ms, starting at `phase`.
    Poisson { rate: f64, phase: f64 },
    /// Replays recorded emission times.
    Trace { times: Vec<SimTime> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub sensor_id: String,
    pub gateway_id: String,
    pub mode: SensorMode,
    /// Overrides the entry operator's per-tuple cost for this sensor's readings.
    pub tuple_cpu_length: Option<f64>,
    /// Bytes.
    pub tuple_size: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("sensor '{sensor}': {reason}")]
    InvalidSensor { sensor: String, reason: String },
}

impl SensorSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |reason: &str| WorkloadError::InvalidSensor { sensor: self.sensor_id.clone(), reason: reason.into() };
        match &self.mode {
            SensorMode::Periodic { rate, phase } | SensorMode::Poisson { rate, phase } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(bad("rate must be > 0"));
                }
                if !(phase.is_finite() && *phase >= 0.0) {
                    return Err(bad("phase must be >= 0"));
                }
            }
            SensorMode::Trace { times } => {
                if times.windows(2).any(|w| w[1] < w[0]) {
                    return Err(bad("trace times must be nondecreasing"));
                }
            }
        }
        if let Some(cpu) = self.tuple_cpu_length {
            if !(cpu.is_finite() && cpu >= 0.0) {
                return Err(bad("tuple cpu length must be >= 0"));
            }
        }
        Ok(())
    }

    /// Mean emissions per second; `None` for traces.
    pub fn rate(&self) -> Option<f64> {
        match self.mode {
            SensorMode::Periodic { rate, .. } | SensorMode::Poisson { rate, .. } => Some(rate),
            SensorMode::Trace { .. } => None,
        }
    }
}

/// Lazily generated emission times in `[0, horizon)`.
pub enum EmissionSchedule {
    Periodic { phase: f64, period: f64, k: u64, horizon: f64 },
    Poisson { next: f64, exp: Exp<f64>, rng: Box<ChaCha8Rng>, horizon: f64 },
    Trace { times: Vec<SimTime>, pos: usize, horizon: f64 },
}

impl EmissionSchedule {
    /// `rng` is the sensor's own substream; only Poisson sensors draw from it.
    pub fn new(spec: &SensorSpec, horizon: SimTime, mut rng: ChaCha8Rng) -> Self {
        let horizon = horizon.as_ms();
        match &spec.mode {
            SensorMode::Periodic { rate, phase } => {
                EmissionSchedule::Periodic { phase: *phase, period: 1000.0 / rate, k: 0, horizon }
            }
            SensorMode::Poisson { rate, phase } => {
                let exp = Exp::new(rate / 1000.0).expect("validated positive rate");
                let next = phase + exp.sample(&mut rng);
                EmissionSchedule::Poisson { next, exp, rng: Box::new(rng), horizon }
            }
            SensorMode::Trace { times } => EmissionSchedule::Trace { times: times.clone(), pos: 0, horizon },
        }
    }
}

impl Iterator for EmissionSchedule {
    type Item = SimTime;

    fn next(&mut self) -> Option<SimTime> {
        match self {
            EmissionSchedule::Periodic { phase, period, k, horizon } => {
                // multiply rather than accumulate to avoid drift
                let t = *phase + *k as f64 * *period;
                if t >= *horizon {
                    return None;
                }
                *k += 1;
                Some(SimTime::from_ms(t))
            }
            EmissionSchedule::Poisson { next, exp, rng, horizon } => {
                let t = *next;
                if t >= *horizon {
                    return None;
                }
                *next = t + exp.sample(rng.as_mut());
                Some(SimTime::from_ms(t))
            }
            EmissionSchedule::Trace { times, pos, horizon } => {
                let t = *times.get(*pos)?;
                if t.as_ms() >= *horizon {
                    return None;
                }
                *pos += 1;
                Some(t)
            }
        }
    }
}

/// All emission times of one sensor before `horizon`.
pub fn emission_times(spec: &SensorSpec, horizon: SimTime, rng: ChaCha8Rng) -> Vec<SimTime> {
    EmissionSchedule::new(spec, horizon, rng).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_ms: SimTime,
    pub sensor_id: String,
    /// Carried through but not simulated.
    pub value: f64,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace header must be `time_ms,sensor_id,value`, found `{0}`")]
    BadHeader(String),
    #[error("ParseError at line {line}: {reason}")]
    ParseError { line: u64, reason: String },
    #[error("NonMonotoneTrace: sensor '{sensor}' goes back in time at line {line}")]
    NonMonotoneTrace { sensor: String, line: u64 },
    #[error("UnknownSensor: '{sensor}' at line {line}")]
    UnknownSensor { sensor: String, line: u64 },
}

pub fn load_trace(path: &Path, known_sensors: &[&str]) -> Result<Vec<TraceRecord>, TraceError> {
    parse_trace(File::open(path)?, known_sensors)
}

/// Parses a `time_ms,sensor_id,value` CSV. Records are returned in file order,
/// which is time-sorted per sensor.
pub fn parse_trace<R: Read>(reader: R, known_sensors: &[&str]) -> Result<Vec<TraceRecord>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| TraceError::ParseError { line: 1, reason: e.to_string() })?;
    if header.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(TraceError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut last: BTreeMap<String, SimTime> = BTreeMap::new();
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| TraceError::ParseError {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |reason: String| TraceError::ParseError { line, reason };
        if row.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", row.len())));
        }
        let time: f64 = row[0].parse().map_err(|_| parse_err(format!("time_ms '{}' is not a number", &row[0])))?;
        if !(time.is_finite() && time >= 0.0) {
            return Err(parse_err(format!("time_ms '{}' must be a finite value >= 0", &row[0])));
        }
        let sensor = row[1].to_string();
        let value: f64 = row[2].parse().map_err(|_| parse_err(format!("value '{}' is not a number", &row[2])))?;
        if !known_sensors.contains(&sensor.as_str()) {
            return Err(TraceError::UnknownSensor { sensor, line });
        }
        let time = SimTime::from_ms(time);
        if let Some(prev) = last.get(&sensor) {
            if time < *prev {
                return Err(TraceError::NonMonotoneTrace { sensor, line });
            }
        }
        last.insert(sensor.clone(), time);
        records.push(TraceRecord { time_ms: time, sensor_id: sensor, value });
    }
    Ok(records)
}

/// Groups trace records into per-sensor emission times.
pub fn trace_times(records: &[TraceRecord]) -> BTreeMap<String, Vec<SimTime>> {
    let mut out: BTreeMap<String, Vec<SimTime>> = BTreeMap::new();
    for r in records {
        out.entry(r.sensor_id.clone()).or_default().push(r.time_ms);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::RandomStreams;
    use proptest::prelude::*;

    fn sensor(mode: SensorMode) -> SensorSpec {
        SensorSpec { sensor_id: "s1".into(), gateway_id: "g1".into(), mode, tuple_cpu_length: None, tuple_size: 100 }
    }

    fn ms(v: &[SimTime]) -> Vec<f64> {
        v.iter().map(|t| t.as_ms()).collect()
    }

    #[test]
    fn periodic_two_per_second() {
        let s = sensor(SensorMode::Periodic { rate: 2.0, phase: 0.0 });
        let times = emission_times(&s, SimTime::from_ms(2000.0), RandomStreams::new(0).stream("s1"));
        assert_eq!(ms(&times), [0.0, 500.0, 1000.0, 1500.0]);
    }

    #[test]
    fn twelve_thousand_five_hundred_sensors_make_25k_per_second() {
        let s = sensor(SensorMode::Periodic { rate: 2.0, phase: 0.0 });
        let per_sensor = emission_times(&s, SimTime::from_ms(1000.0), RandomStreams::new(0).stream("s")).len();
        assert_eq!(per_sensor * 12_500, 25_000);
    }

    #[test]
    fn trace_replays_verbatim() {
        let times: Vec<SimTime> = (0..170).map(|i| SimTime::from_ms(i as f64 * 10_000.0 + 3.25)).collect();
        let s = sensor(SensorMode::Trace { times: times.clone() });
        let out = emission_times(&s, SimTime::from_ms(1e9), RandomStreams::new(0).stream("s1"));
        assert_eq!(out.len(), 170);
        assert_eq!(out, times);
    }

    #[test]
    fn poisson_count_within_five_sigma() {
        let rate = 5.0;
        let horizon_s = 2000.0;
        for seed in 0..5 {
            let s = sensor(SensorMode::Poisson { rate, phase: 0.0 });
            let n =
                emission_times(&s, SimTime::from_ms(horizon_s * 1000.0), RandomStreams::new(seed).stream("s1")).len();
            let mean = rate * horizon_s;
            assert!((n as f64 - mean).abs() <= 5.0 * mean.sqrt(), "seed {seed}: {n}");
        }
    }

    #[test]
    fn poisson_is_seed_deterministic() {
        let s = sensor(SensorMode::Poisson { rate: 3.0, phase: 10.0 });
        let h = SimTime::from_ms(10_000.0);
        let a = emission_times(&s, h, RandomStreams::new(9).stream("s1"));
        let b = emission_times(&s, h, RandomStreams::new(9).stream("s1"));
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert!(a[0].as_ms() >= 10.0);
    }

    #[test]
    fn invalid_rates_are_rejected() {
        assert!(sensor(SensorMode::Periodic { rate: 0.0, phase: 0.0 }).validate().is_err());
        assert!(sensor(SensorMode::Poisson { rate: -1.0, phase: 0.0 }).validate().is_err());
        assert!(sensor(SensorMode::Periodic { rate: 1.0, phase: -5.0 }).validate().is_err());
    }

    #[test]
    fn parses_well_formed_trace() {
        let csv = "time_ms,sensor_id,value\n0,s1,40.5\n100,s2,38\n250,s1,41\n";
        let recs = parse_trace(csv.as_bytes(), &["s1", "s2"]).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].time_ms, SimTime::from_ms(250.0));
        let grouped = trace_times(&recs);
        assert_eq!(grouped["s1"].len(), 2);
    }

    #[test]
    fn parse_error_reports_line_counting_header() {
        let csv = "time_ms,sensor_id,value\nabc,s1,40\n";
        match parse_trace(csv.as_bytes(), &["s1"]) {
            Err(TraceError::ParseError { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_monotone_trace_is_rejected() {
        let csv = "time_ms,sensor_id,value\n100,s1,40\n120,s2,40\n50,s1,40\n";
        match parse_trace(csv.as_bytes(), &["s1", "s2"]) {
            Err(TraceError::NonMonotoneTrace { sensor, line }) => {
                assert_eq!(sensor, "s1");
                assert_eq!(line, 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_sensor_and_bad_header() {
        let csv = "time_ms,sensor_id,value\n1,s9,40\n";
        assert!(matches!(parse_trace(csv.as_bytes(), &["s1"]), Err(TraceError::UnknownSensor { .. })));
        let csv = "t,sensor,v\n1,s1,40\n";
        assert!(matches!(parse_trace(csv.as_bytes(), &["s1"]), Err(TraceError::BadHeader(_))));
    }

    proptest! {
        #[test]
        fn periodic_count_matches_closed_form(rate in 0.05f64..50.0, phase in 0.0f64..5000.0, horizon in 1.0f64..200_000.0) {
            let s = sensor(SensorMode::Periodic { rate, phase });
            let n = emission_times(&s, SimTime::from_ms(horizon), RandomStreams::new(0).stream("s")).len();
            let x = (horizon - phase) / (1000.0 / rate);
            // half-open [phase, horizon): ceil(x) emissions, exact away from integer boundaries
            let expected = if phase < horizon { x.ceil() } else { 0.0 };
            if (x - x.round()).abs() > 1e-6 {
                prop_assert_eq!(n as f64, expected);
            } else {
                prop_assert!((n as f64 - expected).abs() <= 1.0);
            }
        }
    }
}
