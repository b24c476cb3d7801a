//! Timestamp-sensor assurance network: local and reference clock sources
//! feed a fusion agent that fits the Wiener parameters; a prediction agent
//! turns each fit into a deviation model; the check-violation agent
//! schedules the next reference read before the deviation bound is likely
//! to be exceeded, while the budget lasts.

use std::io::{self, Write};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{
    corrected_elapsed, estimate, next_sync_deadline, AssuranceSpec, ClockError, ClockSamplePair, Deadline,
    DeviationModel, SampleWindow, WienerClock, WienerEstimate, WienerParams,
};
use crate::agent::{
    Agent, AgentId, AgentKind, Context, EdgeKind, Feedback, HandlerError, Network, NetworkTopology, Payload, Reading,
    Signal, Wake,
};

/// Accepted samples the window needs before the first estimate. Reads are
/// spaced by the warm-up gap until then. A fit over a single interval has
/// zero residual, so two intervals are needed for a usable variance.
pub const WARMUP_READS: u32 = 3;

pub const SYNC_CSV_HEADER: &str = "local_t,event,reference_T,slope_est,sigma2_est,deadline,budget";

/// Clock scenario parameters (the `clock` section of a scenario file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockConfig {
    /// Parameters of the simulated true clock.
    pub true_params: WienerParams,
    pub spec: AssuranceSpec,
    /// Simulated local-clock seconds.
    pub duration: f64,
    /// Sliding window capacity.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Local seconds per scheduler tick.
    #[serde(default = "default_tick_seconds")]
    pub tick_seconds: f64,
    /// Spacing of the warm-up reads, seconds.
    #[serde(default = "default_warmup_gap")]
    pub warmup_gap: f64,
}

fn default_window() -> usize {
    50
}

fn default_tick_seconds() -> f64 {
    0.1
}

fn default_warmup_gap() -> f64 {
    1.0
}

impl ClockConfig {
    pub fn validate(&self) -> Result<(), ClockError> {
        self.true_params.validate()?;
        self.spec.validate()?;
        let bad = |what: &str, v: f64| ClockError::InvalidParams(format!("{what} = {v}"));
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(bad("duration", self.duration));
        }
        if !(self.tick_seconds > 0.0 && self.tick_seconds.is_finite()) {
            return Err(bad("tick_seconds", self.tick_seconds));
        }
        if !(self.warmup_gap >= self.tick_seconds && self.warmup_gap.is_finite()) {
            return Err(bad("warmup_gap", self.warmup_gap));
        }
        if self.window < 2 {
            return Err(ClockError::CapacityTooSmall(self.window));
        }
        Ok(())
    }

    fn ticks(&self, seconds: f64) -> u64 {
        (seconds / self.tick_seconds + 1e-9).floor() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncEvent {
    /// Reference clock read.
    Read,
    /// New fit and deadline.
    Estimate,
    /// Deadline pending but no budget left.
    Alert,
}

impl SyncEvent {
    fn as_str(self) -> &'static str {
        match self {
            SyncEvent::Read => "read",
            SyncEvent::Estimate => "estimate",
            SyncEvent::Alert => "alert",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncRow {
    pub local_t: f64,
    pub event: SyncEvent,
    pub reference_t: Option<f64>,
    pub slope_est: Option<f64>,
    pub sigma2_est: Option<f64>,
    pub deadline: Option<Deadline>,
    pub budget: u64,
}

/// Ground truth at a reference read, for checking the monitor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadRecord {
    pub pair: ClockSamplePair,
    /// Corrected-clock deviation at this read under the estimate in force
    /// before it; `None` during warm-up.
    pub deviation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorOutcome {
    Completed,
    Alert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncTrace {
    pub rows: Vec<SyncRow>,
    pub reads: Vec<ReadRecord>,
    pub outcome: MonitorOutcome,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SyncTrace {
    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "{SYNC_CSV_HEADER}")?;
        for r in &self.rows {
            let deadline = match r.deadline {
                Some(Deadline::At(t)) => t.to_string(),
                Some(Deadline::Unbounded) => "inf".to_owned(),
                None => String::new(),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.local_t,
                r.event.as_str(),
                opt(r.reference_t),
                opt(r.slope_est),
                opt(r.sigma2_est),
                deadline,
                r.budget
            )?;
        }
        Ok(())
    }

    /// Local-time gaps between consecutive reads.
    pub fn read_gaps(&self) -> Vec<f64> {
        self.reads
            .windows(2)
            .map(|w| w[1].pair.local - w[0].pair.local)
            .collect()
    }
}

#[derive(Debug, Default)]
struct MonitorLog {
    rows: Vec<SyncRow>,
    reads: Vec<ReadRecord>,
    budget: u64,
    alerted: bool,
}

type SharedLog = Arc<Mutex<MonitorLog>>;

fn lock(log: &SharedLog) -> MutexGuard<'_, MonitorLog> {
    log.lock().expect("monitor log poisoned")
}

/// Local time of a scheduler tick. Dividing by the tick rate keeps decimal
/// tick lengths such as 0.1 s free of accumulated rounding.
fn tick_time(tick: u64, tick_seconds: f64) -> f64 {
    tick as f64 / (1.0 / tick_seconds)
}

fn wants_reading(wake: &Wake) -> bool {
    matches!(wake, Wake::Arrival(m) if m.payload.feedback().map(|f| f.signal) == Some(Signal::MoreData))
}

struct LocalClock {
    tick_seconds: f64,
}

impl Agent for LocalClock {
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError> {
        if wants_reading(wake) {
            let local = tick_time(ctx.tick(), self.tick_seconds);
            ctx.emit(Payload::SensorReading(Reading::Scalar(local)))?;
        }
        Ok(())
    }
}

struct ReferenceClock {
    clock: WienerClock,
    tick_seconds: f64,
}

impl Agent for ReferenceClock {
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError> {
        if wants_reading(wake) {
            let local = tick_time(ctx.tick(), self.tick_seconds);
            let reference = self.clock.advance_to(local, ctx.rng());
            ctx.emit(Payload::SensorReading(Reading::Scalar(reference)))?;
        }
        Ok(())
    }
}

struct ClockFusion {
    local_source: AgentId,
    window: SampleWindow,
    pending_local: Option<f64>,
    current: Option<WienerEstimate>,
    log: SharedLog,
}

impl Agent for ClockFusion {
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError> {
        let Wake::Arrival(m) = wake else { return Ok(()) };
        let Some(&Reading::Scalar(value)) = m.payload.reading() else {
            return Ok(());
        };
        if m.from == self.local_source {
            self.pending_local = Some(value);
            return Ok(());
        }
        let Some(local) = self.pending_local.take() else {
            ctx.note("reference reading without local reading");
            return Ok(());
        };
        let pair = ClockSamplePair {
            local,
            reference: value,
        };
        let deviation = self
            .current
            .map(|e| pair.reference - (e.origin.reference + corrected_elapsed(pair.local - e.origin.local, e.slope)));
        {
            let mut log = lock(&self.log);
            let budget = log.budget;
            log.reads.push(ReadRecord { pair, deviation });
            log.rows.push(SyncRow {
                local_t: local,
                event: SyncEvent::Read,
                reference_t: Some(value),
                slope_est: None,
                sigma2_est: None,
                deadline: None,
                budget,
            });
        }
        if let Err(e) = self.window.push(pair) {
            ctx.note(format!("dropped sample: {e}"));
            return Ok(());
        }
        if self.window.len() >= WARMUP_READS as usize {
            let est = estimate(&self.window)?;
            self.current = Some(est);
            ctx.emit(Payload::Estimate(est))?;
        }
        Ok(())
    }
}

struct DeviationPredictor;

impl Agent for DeviationPredictor {
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError> {
        if let Wake::Arrival(m) = wake {
            if let Payload::Estimate(e) = m.payload {
                ctx.emit(Payload::Deviation(DeviationModel {
                    origin: e.origin,
                    slope: e.slope,
                    variance_rate: e.sigma2,
                }))?;
            }
        }
        Ok(())
    }
}

struct SyncScheduler {
    config: ClockConfig,
    budget: u64,
    model: Option<DeviationModel>,
    pending: Option<Deadline>,
    next_read: Option<u64>,
    log: SharedLog,
}

impl SyncScheduler {
    fn exceedance(&self, local: f64) -> f64 {
        let Some(model) = self.model else { return 1.0 };
        let variance = (local - model.origin.local).max(0.0) * model.variance_rate;
        if variance <= 0.0 {
            return 0.0;
        }
        let z = self.config.spec.limit / variance.sqrt();
        2.0 * (1.0 - Normal::standard().cdf(z))
    }
}

impl Agent for SyncScheduler {
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError> {
        let ts = self.config.tick_seconds;
        match wake {
            Wake::Tick(tick) => {
                if self.next_read != Some(*tick) {
                    return Ok(());
                }
                self.next_read = None;
                let local = tick_time(*tick, ts);
                let cost = self.config.spec.sync_cost;
                if self.budget < cost {
                    let mut log = lock(&self.log);
                    log.alerted = true;
                    log.rows.push(SyncRow {
                        local_t: local,
                        event: SyncEvent::Alert,
                        reference_t: None,
                        slope_est: self.model.map(|m| m.slope),
                        sigma2_est: self.model.map(|m| m.variance_rate),
                        deadline: self.pending,
                        budget: self.budget,
                    });
                    drop(log);
                    ctx.note("budget exhausted with a read due");
                    ctx.halt();
                    return Ok(());
                }
                self.budget -= cost;
                lock(&self.log).budget = self.budget;
                let probability = self.exceedance(local);
                ctx.emit(Payload::Feedback(Feedback {
                    signal: Signal::MoreData,
                    probability,
                }))?;
                self.pending = None;
                // Fallback read, superseded by the deadline of a fresh
                // estimate. Covers warm-up and reads the window rejected.
                let next = tick + self.config.ticks(self.config.warmup_gap);
                self.next_read = Some(next);
                ctx.wake_at(next);
            }
            Wake::Arrival(m) => {
                let Payload::Deviation(model) = m.payload else {
                    return Ok(());
                };
                self.model = Some(model);
                let deadline = next_sync_deadline(&self.config.spec, model.variance_rate, model.origin.local)?;
                lock(&self.log).rows.push(SyncRow {
                    local_t: tick_time(ctx.tick(), ts),
                    event: SyncEvent::Estimate,
                    reference_t: None,
                    slope_est: Some(model.slope),
                    sigma2_est: Some(model.variance_rate),
                    deadline: Some(deadline),
                    budget: self.budget,
                });
                self.next_read = None;
                if let Deadline::At(t) = deadline {
                    if t <= self.config.duration {
                        let at = self.config.ticks(t).max(ctx.tick() + 1);
                        self.pending = Some(deadline);
                        self.next_read = Some(at);
                        ctx.wake_at(at);
                    }
                }
            }
            Wake::Request(_) => {}
        }
        Ok(())
    }
}

struct ClockNetwork {
    network: Network,
    log: SharedLog,
}

fn build(config: &ClockConfig) -> Result<ClockNetwork, ClockError> {
    config.validate()?;
    let log: SharedLog = Arc::new(Mutex::new(MonitorLog {
        budget: config.spec.budget,
        ..MonitorLog::default()
    }));
    let mut net = Network::new();
    let local = net.register(
        AgentKind::Source,
        "local-clock",
        LocalClock {
            tick_seconds: config.tick_seconds,
        },
    )?;
    let reference = net.register(
        AgentKind::Source,
        "reference-clock",
        ReferenceClock {
            clock: WienerClock::new(config.true_params)?,
            tick_seconds: config.tick_seconds,
        },
    )?;
    let fusion = net.register(
        AgentKind::Fusion,
        "fusion",
        ClockFusion {
            local_source: local,
            window: SampleWindow::new(config.window)?,
            pending_local: None,
            current: None,
            log: Arc::clone(&log),
        },
    )?;
    let predict = net.register(AgentKind::Prediction, "prediction", DeviationPredictor)?;
    let check = net.register(
        AgentKind::CheckViolation,
        "check-violation",
        SyncScheduler {
            config: config.clone(),
            budget: config.spec.budget,
            model: None,
            pending: None,
            next_read: Some(0),
            log: Arc::clone(&log),
        },
    )?;
    net.connect(local, fusion, EdgeKind::Tuple)?;
    net.connect(reference, fusion, EdgeKind::Tuple)?;
    net.connect(fusion, predict, EdgeKind::Tuple)?;
    net.connect(predict, check, EdgeKind::Tuple)?;
    net.connect(check, local, EdgeKind::Feedback)?;
    net.connect(check, reference, EdgeKind::Feedback)?;
    net.schedule(check, 0)?;
    // End-of-run timer: the stop predicate fires on it, so a monitor with no
    // read due before the end finishes instead of going quiescent.
    net.schedule(check, config.ticks(config.duration) + 1)?;
    net.seal()?;
    Ok(ClockNetwork { network: net, log })
}

/// Agent topology used by [`run_clock_monitor`].
pub fn clock_topology(config: &ClockConfig) -> Result<NetworkTopology, ClockError> {
    Ok(build(config)?.network.topology().clone())
}

/// Simulates the clock monitor for `config.duration` local seconds.
pub fn run_clock_monitor(config: &ClockConfig, seed: u64) -> Result<SyncTrace, ClockError> {
    let ClockNetwork { mut network, log } = build(config)?;
    let last_tick = config.ticks(config.duration);
    network.run_until(|s| s.halted || s.tick > last_tick, seed)?;
    let log = std::mem::take(&mut *lock(&log));
    Ok(SyncTrace {
        rows: log.rows,
        reads: log.reads,
        outcome: if log.alerted {
            MonitorOutcome::Alert
        } else {
            MonitorOutcome::Completed
        },
    })
}
