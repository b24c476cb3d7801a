//! The drone assurance network. Control moves the drone and sends the
//! belief and plan to prediction; the image-matcher fusion and its
//! check-violation agent decide whether to continue, change course, or ask
//! the GPS chain for more data.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::seq::IndexedRandom;
use rand::Rng;

use super::{
    build_nofly_mask, check_violation_policy, match_kernel, revise_plan, step_ground_truth, synthetic_match,
    DroneError, MissionState, WorldConfig,
};
use crate::agent::{
    Agent, AgentId, AgentKind, Context, EdgeKind, Feedback, HandlerError, Network, NetworkTopology, Payload, Reading,
    Signal, Wake,
};
use crate::grid::{
    forecast, fuse_gps, fuse_match, propagate, violation_probability, Cell, Displacement, GridDistribution, GridError,
    GridMask, MatchKernel, TrajectoryForecast,
};

pub const MISSION_CSV_HEADER: &str =
    "t,resources,agent,probability,signal,truth_x,truth_y,argmax_x,argmax_y,mean_x,mean_y";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CvAgent {
    Capsule,
    Gps,
}

impl CvAgent {
    pub fn label(self) -> &'static str {
        match self {
            CvAgent::Capsule => "CaPSuLe",
            CvAgent::Gps => "GPS",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "CaPSuLe" => Some(CvAgent::Capsule),
            "GPS" => Some(CvAgent::Gps),
            _ => None,
        }
    }
}

impl fmt::Display for CvAgent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One check-violation decision.
///
/// `resources` is what remains when the check runs, so a GPS row already
/// reflects the cost of its own read.
#[derive(Debug, Clone, PartialEq)]
pub struct MissionRow {
    pub t: u64,
    pub resources: u64,
    pub agent: CvAgent,
    pub probability: f64,
    pub signal: Signal,
    pub truth: (f64, f64),
    pub argmax: Cell,
    pub mean: (f64, f64),
}

/// Per-step accuracy bookkeeping of the image-matcher fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostic {
    pub t: u64,
    pub truth: (f64, f64),
    pub truth_clouded: bool,
    pub raw_argmax: Cell,
    pub fused_argmax: Cell,
}

/// Last belief and forecast evaluated at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: u64,
    pub belief: Arc<GridDistribution>,
    pub forecast: Arc<TrajectoryForecast>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbortInfo {
    pub t: u64,
    pub agent: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissionOutcome {
    /// Belief argmax within one tile of the target.
    Reached {
        t: u64,
    },
    /// Plan ran out before the target was reached.
    PlanExhausted {
        t: u64,
    },
    Aborted {
        t: u64,
    },
}

impl MissionOutcome {
    pub fn is_success(self) -> bool {
        matches!(self, MissionOutcome::Reached { .. })
    }
}

impl fmt::Display for MissionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MissionOutcome::Reached { t } => write!(f, "target reached at t={t}"),
            MissionOutcome::PlanExhausted { t } => write!(f, "plan exhausted at t={t}"),
            MissionOutcome::Aborted { t } => write!(f, "aborted at t={t}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MissionTrace {
    pub rows: Vec<MissionRow>,
    pub diagnostics: Vec<StepDiagnostic>,
    pub frames: Vec<Frame>,
    pub outcome: MissionOutcome,
    pub abort: Option<AbortInfo>,
    pub final_state: MissionState,
    /// Ground-truth positions after each step, starting with the start.
    pub path: Vec<(f64, f64)>,
    /// Steps whose true tile lay in the no-fly zone.
    pub nofly_steps: Vec<u64>,
}

impl MissionTrace {
    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "{MISSION_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.resources,
                r.agent,
                r.probability,
                r.signal,
                r.truth.0,
                r.truth.1,
                r.argmax.x,
                r.argmax.y,
                r.mean.0,
                r.mean.1
            )?;
        }
        if let Some(a) = &self.abort {
            let s = &self.final_state;
            writeln!(
                out,
                "{},{},{},,Abort,{},{},,,,",
                a.t, s.resources, a.agent, s.truth.0, s.truth.1
            )?;
        }
        Ok(())
    }

    /// Signals in row order.
    pub fn signals(&self) -> Vec<(CvAgent, Signal)> {
        self.rows.iter().map(|r| (r.agent, r.signal)).collect()
    }
}

/// Immutable per-mission data shared by the agents.
struct Scenario {
    config: WorldConfig,
    nofly: GridMask,
    clouds: GridMask,
    kernel: MatchKernel,
}

struct World {
    state: MissionState,
    belief: Arc<GridDistribution>,
    rows: Vec<MissionRow>,
    diagnostics: Vec<StepDiagnostic>,
    frames: BTreeMap<u64, Frame>,
    outcome: Option<MissionOutcome>,
    abort: Option<AbortInfo>,
    path: Vec<(f64, f64)>,
}

type Shared = Arc<Mutex<World>>;

fn lock(world: &Shared) -> MutexGuard<'_, World> {
    world.lock().expect("world state poisoned")
}

fn belief_and_plan(wake: &Wake) -> Option<(Arc<GridDistribution>, Arc<[Displacement]>)> {
    let Wake::Arrival(m) = wake else { return None };
    Some((m.payload.distribution()?.clone(), m.payload.plan()?.clone()))
}

fn state_payload(belief: Arc<GridDistribution>, plan: Arc<[Displacement]>) -> Payload {
    Payload::Tuple(vec![Payload::Distribution(belief), Payload::ControlPlan(plan)])
}

/// Records a vanished belief and stops the mission; other grid errors
/// propagate.
fn abort_on_vanish<T>(
    result: Result<T, GridError>,
    world: &Shared,
    ctx: &mut Context<'_>,
) -> Result<Option<T>, HandlerError> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(e @ GridError::VanishedBelief) => {
            let mut w = lock(world);
            let t = w.state.t;
            w.abort = Some(AbortInfo {
                t,
                agent: ctx.label().to_owned(),
                reason: e.to_string(),
            });
            w.outcome = Some(MissionOutcome::Aborted { t });
            drop(w);
            ctx.note(format!("abort: {e}"));
            ctx.halt();
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

struct Control {
    scenario: Arc<Scenario>,
    world: Shared,
}

impl Agent for Control {
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError> {
        let config = &self.scenario.config;
        let mut w = lock(&self.world);
        match wake {
            Wake::Tick(_) => {
                let t = w.state.t;
                if w.outcome.is_none() {
                    if w.belief.argmax_location().chebyshev(config.target) <= 1 {
                        w.outcome = Some(MissionOutcome::Reached { t });
                    } else if w.state.plan.is_empty() {
                        w.outcome = Some(MissionOutcome::PlanExhausted { t });
                    }
                }
                if w.outcome.is_some() {
                    w.state.finished = true;
                    ctx.halt();
                    return Ok(());
                }
                let executed: Arc<[Displacement]> = w.state.plan.clone().into();
                w.state = step_ground_truth(&w.state, config, ctx.rng())?;
                let truth = w.state.truth;
                w.path.push(truth);
                let belief = Arc::clone(&w.belief);
                drop(w);
                ctx.emit(state_payload(belief, executed))?;
            }
            Wake::Arrival(m) => {
                let (Some(belief), Some(feedback)) = (m.payload.distribution(), m.payload.feedback()) else {
                    return Ok(());
                };
                w.belief = Arc::clone(belief);
                if feedback.signal == Signal::Change && !w.state.plan.is_empty() {
                    let remaining = w.state.plan.len();
                    w.state.plan = revise_plan(
                        belief.mean_location(),
                        config.target,
                        &self.scenario.nofly,
                        config.nofly_margin,
                        remaining,
                    )?;
                    ctx.note(format!("replanned {remaining} steps"));
                }
            }
            Wake::Request(_) => {}
        }
        Ok(())
    }
}

struct Predict {
    scenario: Arc<Scenario>,
}

impl Agent for Predict {
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError> {
        let Some((belief, plan)) = belief_and_plan(wake) else {
            return Ok(());
        };
        let Some((&step, rest)) = plan.split_first() else {
            return Ok(());
        };
        let prior = propagate(&belief, step, self.scenario.config.diffusion)?;
        ctx.emit(state_payload(Arc::new(prior), rest.into()))?;
        Ok(())
    }
}

struct Camera {
    scenario: Arc<Scenario>,
    world: Shared,
}

impl Agent for Camera {
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError> {
        if let Wake::Request(_) = wake {
            let truth = lock(&self.world).state.truth_cell();
            let image = synthetic_match(truth, &self.scenario.clouds, ctx.rng())?;
            ctx.reply(Payload::Distribution(Arc::new(image)))?;
        }
        Ok(())
    }
}

struct CapsuleFusion {
    camera: AgentId,
    scenario: Arc<Scenario>,
    world: Shared,
}

impl Agent for CapsuleFusion {
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError> {
        let Some((prior, plan)) = belief_and_plan(wake) else {
            return Ok(());
        };
        let reply = ctx.pull(self.camera)?;
        let observation = reply.payload.distribution().ok_or("camera replied without an image")?;
        let fused = fuse_match(&prior, observation, &self.scenario.kernel);
        let Some(posterior) = abort_on_vanish(fused, &self.world, ctx)? else {
            return Ok(());
        };
        {
            let mut w = lock(&self.world);
            let truth = w.state.truth;
            let t = w.state.t;
            let truth_clouded = self.scenario.clouds.get(w.state.truth_cell());
            w.diagnostics.push(StepDiagnostic {
                t,
                truth,
                truth_clouded,
                raw_argmax: observation.argmax_location(),
                fused_argmax: posterior.argmax_location(),
            });
        }
        ctx.emit(state_payload(Arc::new(posterior), plan))?;
        Ok(())
    }
}

struct GpsSensor {
    scenario: Arc<Scenario>,
    world: Shared,
}

impl Agent for GpsSensor {
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError> {
        if !matches!(wake, Wake::Request(_)) {
            return Ok(());
        }
        let config = &self.scenario.config;
        let truth = {
            let mut w = lock(&self.world);
            w.state.resources = w
                .state
                .resources
                .checked_sub(config.gps_cost)
                .ok_or("GPS read without enough resources")?;
            w.state.truth_cell()
        };
        ctx.note(format!("debit {}", config.gps_cost));
        let shape = self.scenario.nofly.shape();
        let reading = if ctx.rng().random_bool(config.p_gps) {
            truth
        } else {
            let neighbors: Vec<Cell> = shape.neighbors(truth).collect();
            *neighbors.choose(ctx.rng()).unwrap_or(&truth)
        };
        ctx.reply(Payload::SensorReading(Reading::Location(reading)))?;
        Ok(())
    }
}

struct GpsFusion {
    gps: AgentId,
    scenario: Arc<Scenario>,
    world: Shared,
}

impl Agent for GpsFusion {
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError> {
        let Some((prior, plan)) = belief_and_plan(wake) else {
            return Ok(());
        };
        let reply = ctx.pull(self.gps)?;
        let Some(&Reading::Location(fix)) = reply.payload.reading() else {
            return Err("GPS replied without a location".into());
        };
        let fused = fuse_gps(&prior, fix, self.scenario.config.p_gps);
        let Some(posterior) = abort_on_vanish(fused, &self.world, ctx)? else {
            return Ok(());
        };
        ctx.emit(state_payload(Arc::new(posterior), plan))?;
        Ok(())
    }
}

struct CheckViolation {
    agent: CvAgent,
    scenario: Arc<Scenario>,
    world: Shared,
}

impl Agent for CheckViolation {
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError> {
        let Some((belief, plan)) = belief_and_plan(wake) else {
            return Ok(());
        };
        let config = &self.scenario.config;
        let h = config.horizon;
        let mut padded = plan.to_vec();
        if padded.len() < h {
            padded.resize(h, Displacement::ZERO);
        }
        let quiet = vec![Displacement::ZERO; h];
        let fc = forecast(&belief, &padded, &quiet, config.diffusion, h)?;
        let probability = violation_probability(&fc, &self.scenario.nofly)?;
        let signal = {
            let mut w = lock(&self.world);
            let resources = w.state.resources;
            let signal = check_violation_policy(probability, resources, config, self.agent == CvAgent::Gps);
            let t = w.state.t;
            let truth = w.state.truth;
            w.rows.push(MissionRow {
                t,
                resources,
                agent: self.agent,
                probability,
                signal,
                truth,
                argmax: belief.argmax_location(),
                mean: belief.mean_location(),
            });
            w.frames.insert(
                t,
                Frame {
                    t,
                    belief: Arc::clone(&belief),
                    forecast: Arc::new(fc),
                },
            );
            signal
        };
        let payload = match signal {
            Signal::MoreData => state_payload(belief, plan),
            _ => Payload::Tuple(vec![
                Payload::Distribution(belief),
                Payload::Feedback(Feedback { signal, probability }),
            ]),
        };
        ctx.emit(payload)?;
        Ok(())
    }
}

struct DroneNetwork {
    network: Network,
    world: Shared,
}

fn build(config: &WorldConfig) -> Result<DroneNetwork, DroneError> {
    config.validate()?;
    let nofly = build_nofly_mask(config)?;
    for (what, c) in [("start", config.start), ("target", config.target)] {
        if nofly.get(c) {
            return Err(DroneError::Config(format!("{what} {c} lies in the no-fly zone")));
        }
    }
    let clouds = config.cloud_mask()?;
    let kernel = match_kernel(&clouds)?;
    let scenario = Arc::new(Scenario {
        config: config.clone(),
        nofly,
        clouds,
        kernel,
    });
    let state = MissionState::initial(config);
    let world: Shared = Arc::new(Mutex::new(World {
        belief: Arc::new(GridDistribution::delta(config.width, config.height, config.start)?),
        path: vec![state.truth],
        state,
        rows: Vec::new(),
        diagnostics: Vec::new(),
        frames: BTreeMap::new(),
        outcome: None,
        abort: None,
    }));

    let sc = || Arc::clone(&scenario);
    let wd = || Arc::clone(&world);
    let mut net = Network::new();
    let control = net.register(
        AgentKind::Control,
        "control",
        Control {
            scenario: sc(),
            world: wd(),
        },
    )?;
    let predict = net.register(AgentKind::Prediction, "predict", Predict { scenario: sc() })?;
    let camera = net.register(
        AgentKind::Source,
        "camera",
        Camera {
            scenario: sc(),
            world: wd(),
        },
    )?;
    let capsule_fusion = net.register(
        AgentKind::Fusion,
        "capsule-fusion",
        CapsuleFusion {
            camera,
            scenario: sc(),
            world: wd(),
        },
    )?;
    let capsule_cv = net.register(
        AgentKind::CheckViolation,
        "capsule-cv",
        CheckViolation {
            agent: CvAgent::Capsule,
            scenario: sc(),
            world: wd(),
        },
    )?;
    let gps = net.register(
        AgentKind::Source,
        "gps",
        GpsSensor {
            scenario: sc(),
            world: wd(),
        },
    )?;
    let gps_fusion = net.register(
        AgentKind::Fusion,
        "gps-fusion",
        GpsFusion {
            gps,
            scenario: sc(),
            world: wd(),
        },
    )?;
    let gps_cv = net.register(
        AgentKind::CheckViolation,
        "gps-cv",
        CheckViolation {
            agent: CvAgent::Gps,
            scenario: sc(),
            world: wd(),
        },
    )?;
    net.connect(control, predict, EdgeKind::Tuple)?;
    net.connect(predict, capsule_fusion, EdgeKind::Tuple)?;
    net.connect(capsule_fusion, camera, EdgeKind::Data)?;
    net.connect(capsule_fusion, capsule_cv, EdgeKind::Tuple)?;
    net.connect(capsule_cv, control, EdgeKind::Feedback)?;
    net.connect(capsule_cv, gps_fusion, EdgeKind::Tuple)?;
    net.connect(gps_fusion, gps, EdgeKind::Data)?;
    net.connect(gps_fusion, gps_cv, EdgeKind::Tuple)?;
    net.connect(gps_cv, control, EdgeKind::Feedback)?;
    net.wake_on_ticks(control)?;
    net.seal()?;
    Ok(DroneNetwork { network: net, world })
}

/// Agent topology used by [`run_mission`].
pub fn drone_topology(config: &WorldConfig) -> Result<NetworkTopology, DroneError> {
    Ok(build(config)?.network.topology().clone())
}

/// Flies one seeded mission until the target is reached, the plan runs out,
/// or the belief vanishes.
pub fn run_mission(config: &WorldConfig, seed: u64) -> Result<MissionTrace, DroneError> {
    let DroneNetwork { mut network, world } = build(config)?;
    let max_ticks = 2 * config.initial_plan().len() as u64 + 8;
    network.run_until(|s| s.halted || s.tick > max_ticks, seed)?;
    let w = lock(&world);
    let nofly = build_nofly_mask(config)?;
    let nofly_steps = w
        .path
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let c = Cell::new(p.0.round() as usize, p.1.round() as usize);
            nofly.get(c)
        })
        .map(|(t, _)| t as u64)
        .collect();
    let outcome = w.outcome.unwrap_or(MissionOutcome::PlanExhausted { t: w.state.t });
    Ok(MissionTrace {
        rows: w.rows.clone(),
        diagnostics: w.diagnostics.clone(),
        frames: w.frames.values().cloned().collect(),
        outcome,
        abort: w.abort.clone(),
        final_state: w.state.clone(),
        path: w.path.clone(),
        nofly_steps,
    })
}
