//! Simulated device hardware: a clock, scripted temperature sensors and the
//! `env` primitives the corpus imports.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Deserialize;
use thiserror::Error;

use crate::module::TypeSig;
use crate::value::{Value, ValueKind};
use crate::vm::{HostFailure, PrimitiveTable};

/// Milliseconds since the device booted, virtual or measured.
#[derive(Debug, Clone)]
pub enum Clock {
    /// Advanced only by delays; never sleeps.
    Virtual(Arc<AtomicU64>),
    Real(Instant),
}

impl Clock {
    pub fn virtual_clock() -> Self {
        Clock::Virtual(Arc::new(AtomicU64::new(0)))
    }

    pub fn real() -> Self {
        Clock::Real(Instant::now())
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }

    pub fn now_ms(&self) -> f64 {
        match self {
            Clock::Virtual(t) => t.load(Ordering::SeqCst) as f64,
            Clock::Real(start) => start.elapsed().as_secs_f64() * 1000.0,
        }
    }

    pub fn delay(&self, ms: u64) {
        match self {
            Clock::Virtual(t) => {
                t.fetch_add(ms, Ordering::SeqCst);
            }
            Clock::Real(_) => std::thread::sleep(Duration::from_millis(ms)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub enum TempSource {
    #[serde(rename = "const")]
    Constant(f32),
    /// Cycled, one element per read.
    #[serde(rename = "seq")]
    Sequence(Vec<f32>),
}

impl Default for TempSource {
    fn default() -> Self {
        TempSource::Constant(21.5)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SensorSpec {
    /// `(from_ms, online)` switch points, sorted. Offline before the first.
    pub timeline: Vec<(u64, bool)>,
    #[serde(default)]
    pub temp: TempSource,
}

impl SensorSpec {
    pub fn online_at(&self, ms: f64) -> bool {
        self.timeline.iter().take_while(|(from, _)| (*from as f64) <= ms).last().is_some_and(|(_, on)| *on)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Virtual,
    Real,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
pub struct SensorScript {
    #[serde(default)]
    pub sensors: BTreeMap<String, SensorSpec>,
    #[serde(default)]
    pub clock: ClockMode,
    /// Source for `bmp_ctemp`, the on-board sensor.
    #[serde(default)]
    pub ambient: TempSource,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("sensor script: {0}")]
    Json(#[from] serde_json::Error),
    #[error("sensor script: {0}")]
    Invalid(String),
}

impl SensorScript {
    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        let s: SensorScript = serde_json::from_str(text)?;
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<(), ScriptError> {
        let empty = |t: &TempSource| matches!(t, TempSource::Sequence(v) if v.is_empty());
        if empty(&self.ambient) {
            return Err(ScriptError::Invalid("ambient sequence is empty".into()));
        }
        for (id, s) in &self.sensors {
            if id.parse::<i32>().is_err() {
                return Err(ScriptError::Invalid(format!("sensor id {id:?} is not an integer")));
            }
            if !s.timeline.windows(2).all(|w| w[0].0 <= w[1].0) {
                return Err(ScriptError::Invalid(format!("sensor {id} timeline is not sorted")));
            }
            if empty(&s.temp) {
                return Err(ScriptError::Invalid(format!("sensor {id} sequence is empty")));
            }
        }
        Ok(())
    }

    /// Both corpus sensors with a fixed connectivity and temperature.
    pub fn tma(online: bool, temp: f32) -> Self {
        let spec = SensorSpec { timeline: vec![(0, online)], temp: TempSource::Constant(temp) };
        SensorScript {
            sensors: [("3030".to_string(), spec.clone()), ("3031".to_string(), spec)].into_iter().collect(),
            clock: ClockMode::Virtual,
            ambient: TempSource::default(),
        }
    }
}

/// Call counts per primitive.
#[derive(Debug, Default)]
pub struct DeviceCounters {
    pub delays: AtomicU64,
    pub sends: AtomicU64,
    pub temp_reads: AtomicU64,
    pub connectivity_checks: AtomicU64,
}

pub type Sink = Arc<dyn Fn(f32) + Send + Sync>;

struct Reading {
    source: TempSource,
    cursor: AtomicUsize,
}

impl Reading {
    fn new(source: TempSource) -> Self {
        Reading { source, cursor: AtomicUsize::new(0) }
    }

    fn next(&self) -> f32 {
        match &self.source {
            TempSource::Constant(v) => *v,
            TempSource::Sequence(seq) => seq[self.cursor.fetch_add(1, Ordering::Relaxed) % seq.len()],
        }
    }
}

/// One simulated board. Clones share the clock, counters and sensor state.
#[derive(Clone)]
pub struct Device {
    pub clock: Clock,
    pub counters: Arc<DeviceCounters>,
    sensors: Arc<BTreeMap<i32, (SensorSpec, Reading)>>,
    ambient: Arc<Reading>,
    sink: Arc<Mutex<Option<Sink>>>,
}

impl Device {
    pub fn new(script: &SensorScript) -> Self {
        let clock = match script.clock {
            ClockMode::Virtual => Clock::virtual_clock(),
            ClockMode::Real => Clock::real(),
        };
        Self::with_clock(script, clock)
    }

    pub fn with_clock(script: &SensorScript, clock: Clock) -> Self {
        let sensors = script
            .sensors
            .iter()
            .map(|(id, s)| (id.parse::<i32>().expect("checked"), (s.clone(), Reading::new(s.temp.clone()))))
            .collect();
        Device {
            clock,
            counters: Arc::default(),
            sensors: Arc::new(sensors),
            ambient: Arc::new(Reading::new(script.ambient.clone())),
            sink: Arc::default(),
        }
    }

    /// Where `write_f32` delivers; values are dropped while unset.
    pub fn set_sink(&self, sink: Sink) {
        *self.sink.lock().unwrap() = Some(sink);
    }

    pub fn is_connected(&self, id: i32) -> bool {
        let now = self.clock.now_ms();
        self.sensors.get(&id).is_some_and(|(s, _)| s.online_at(now))
    }

    pub fn req_temp(&self, id: i32) -> Result<f32, HostFailure> {
        let now = self.clock.now_ms();
        match self.sensors.get(&id) {
            Some((s, r)) if s.online_at(now) => Ok(r.next()),
            Some(_) => Err(HostFailure::new(format!("sensor {id} offline"))),
            None => Err(HostFailure::new(format!("no sensor {id}"))),
        }
    }

    /// Time a reboot takes after a crash.
    pub fn reboot_delay(&self) {
        self.clock.delay(REBOOT_MS);
    }

    pub fn primitives(&self) -> PrimitiveTable {
        use ValueKind::{F32, I32};
        let mut t = PrimitiveTable::new();

        let d = self.clone();
        t.insert("env", "chip_delay", TypeSig::new(vec![I32], vec![]), move |args| {
            let ms = args[0].as_i32().unwrap_or(0).max(0) as u64;
            d.counters.delays.fetch_add(1, Ordering::SeqCst);
            d.clock.delay(ms);
            Ok(None)
        });

        let d = self.clone();
        t.insert("env", "bmp_ctemp", TypeSig::new(vec![], vec![F32]), move |_| {
            d.counters.temp_reads.fetch_add(1, Ordering::SeqCst);
            Ok(Some(Value::f32(d.ambient.next())))
        });

        let d = self.clone();
        t.insert("env", "write_f32", TypeSig::new(vec![F32], vec![]), move |args| {
            let v = args[0].as_f32().unwrap_or(f32::NAN);
            d.counters.sends.fetch_add(1, Ordering::SeqCst);
            if let Some(sink) = d.sink.lock().unwrap().as_ref() {
                sink(v);
            }
            Ok(None)
        });

        let d = self.clone();
        t.insert("env", "req_temp", TypeSig::new(vec![I32], vec![F32]), move |args| {
            d.counters.temp_reads.fetch_add(1, Ordering::SeqCst);
            d.req_temp(args[0].as_i32().unwrap_or(-1)).map(|v| Some(Value::f32(v)))
        });

        let d = self.clone();
        t.insert("env", "is_connected", TypeSig::new(vec![I32], vec![I32]), move |args| {
            d.counters.connectivity_checks.fetch_add(1, Ordering::SeqCst);
            Ok(Some(Value::I32(d.is_connected(args[0].as_i32().unwrap_or(-1)) as i32)))
        });
        t
    }
}

pub const REBOOT_MS: u64 = 1000;
