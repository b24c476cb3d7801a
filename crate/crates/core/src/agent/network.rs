use std::any::Any;
use std::collections::{BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::message::{AgentId, AgentKind, EdgeKind, Message, Payload, Wake, WakeCause};

/// Generator threaded through every activation of a run.
pub type SimRng = ChaCha8Rng;

pub type HandlerError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network is sealed; topology can no longer change")]
    Sealed,
    #[error("network must be sealed before it runs")]
    NotSealed,
    #[error("an agent labelled {0:?} is already registered")]
    DuplicateAgent(String),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("self-loop on {0}")]
    SelfLoop(AgentId),
    #[error("check-violation agent {0:?} has no outgoing feedback or data edge")]
    MissingCheckOutput(String),
    #[error("no {kind:?} edge from {from} to {to}")]
    NoEdge { from: AgentId, to: AgentId, kind: EdgeKind },
    #[error("agent {agent:?} has no outgoing {kind:?} edge")]
    NoRoute { agent: String, kind: EdgeKind },
    #[error("check-violation agent {0:?} emitted more than one decision in one activation")]
    MultipleDecisions(String),
    #[error("agent {0:?} replied outside a data request")]
    NotARequest(String),
    #[error("source {0:?} returned nothing to a data request")]
    NoReply(String),
    #[error("agent {0:?} is already active; pull cycles are not allowed")]
    ReentrantPull(String),
    #[error("deadlock at tick {tick}: no pending wake for {quiescent:?}")]
    Deadlock { tick: u64, quiescent: Vec<String> },
    #[error("agent {agent:?} failed at tick {tick}: {source}")]
    Handler {
        agent: String,
        tick: u64,
        #[source]
        source: HandlerError,
    },
}

/// Behavior attached to a registered agent. Agents sleep until the runtime
/// wakes them with a clock tick, a message, or a data request.
pub trait Agent: Any + Send {
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError>;
}

/// Adapts a closure into an [`Agent`].
pub struct FnAgent<F>(pub F);

impl<F> Agent for FnAgent<F>
where
    F: FnMut(&Wake, &mut Context<'_>) -> Result<(), HandlerError> + Send + 'static,
{
    fn on_wake(&mut self, wake: &Wake, ctx: &mut Context<'_>) -> Result<(), HandlerError> {
        (self.0)(wake, ctx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentInfo {
    pub id: AgentId,
    pub kind: AgentKind,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub id: EdgeId,
    pub from: AgentId,
    pub to: AgentId,
    pub kind: EdgeKind,
}

/// Agents and directed, typed edges between them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NetworkTopology {
    agents: Vec<AgentInfo>,
    edges: Vec<Edge>,
}

impl NetworkTopology {
    pub fn agents(&self) -> &[AgentInfo] {
        &self.agents
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn info(&self, id: AgentId) -> Option<&AgentInfo> {
        self.agents.get(id.0)
    }

    pub fn label(&self, id: AgentId) -> &str {
        self.info(id).map_or("?", |a| a.label.as_str())
    }

    pub fn find(&self, label: &str) -> Option<AgentId> {
        self.agents.iter().find(|a| a.label == label).map(|a| a.id)
    }

    pub fn outgoing(&self, id: AgentId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.from == id)
    }

    fn has_edge(&self, from: AgentId, to: AgentId, kind: EdgeKind) -> bool {
        self.edges
            .iter()
            .any(|e| e.from == from && e.to == to && e.kind == kind)
    }

    /// Check-violation agents need a feedback or data edge to act on.
    pub fn validate(&self) -> Result<(), NetworkError> {
        for a in &self.agents {
            if a.kind == AgentKind::CheckViolation
                && !self
                    .outgoing(a.id)
                    .any(|e| matches!(e.kind, EdgeKind::Feedback | EdgeKind::Data))
            {
                return Err(NetworkError::MissingCheckOutput(a.label.clone()));
            }
        }
        Ok(())
    }

    /// True when every feedback edge ends at a control or source agent.
    pub fn feedback_targets_control_or_source(&self) -> bool {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Feedback)
            .all(|e| matches!(self.agents[e.to.0].kind, AgentKind::Control | AgentKind::Source))
    }
}

/// One delivered (or returned) message.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub to: AgentId,
    pub edge: EdgeKind,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    /// Position in scheduler order.
    pub step: usize,
    pub tick: u64,
    pub agent: AgentId,
    pub cause: WakeCause,
    pub emitted: Vec<Emission>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn activations_of(&self, agent: AgentId) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(move |e| e.agent == agent)
    }
}

/// Scheduler snapshot handed to the stop predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunState {
    pub tick: u64,
    pub activations: usize,
    pub halted: bool,
}

struct Core {
    topology: NetworkTopology,
    handlers: Vec<Option<Box<dyn Agent>>>,
    rng: SimRng,
    timers: BTreeSet<(u64, AgentId)>,
    queue: VecDeque<(AgentId, Wake)>,
    trace: Vec<TraceEntry>,
    halted: bool,
}

/// Handle an agent uses during one activation.
pub struct Context<'a> {
    core: &'a mut Core,
    me: AgentId,
    tick: u64,
    requester: Option<AgentId>,
    emitted: Vec<Emission>,
    notes: Vec<String>,
    reply: Option<Payload>,
    decisions: usize,
}

impl Context<'_> {
    pub fn id(&self) -> AgentId {
        self.me
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn kind(&self) -> AgentKind {
        self.core.topology.agents[self.me.0].kind
    }

    pub fn label(&self) -> &str {
        self.core.topology.label(self.me)
    }

    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.core.rng
    }

    /// Free-form annotation stored with this activation in the trace.
    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Asks the scheduler to stop once the stop predicate sees it.
    pub fn halt(&mut self) {
        self.core.halted = true;
    }

    /// Schedules a clock-tick wake for this agent, no earlier than the next tick.
    pub fn wake_at(&mut self, tick: u64) {
        let at = tick.max(self.tick + 1);
        self.core.timers.insert((at, self.me));
    }

    fn count_decision(&mut self) -> Result<(), NetworkError> {
        if self.kind() == AgentKind::CheckViolation {
            self.decisions += 1;
            if self.decisions > 1 {
                return Err(NetworkError::MultipleDecisions(self.label().to_owned()));
            }
        }
        Ok(())
    }

    fn message(&self, payload: Payload) -> Message {
        Message {
            from: self.me,
            sent_at: self.tick,
            payload,
        }
    }

    /// Pushes `payload` on every outgoing edge of the matching kind.
    /// Delivery happens on later scheduler steps, in target id order.
    pub fn emit(&mut self, payload: Payload) -> Result<(), NetworkError> {
        let kind = payload.edge_kind();
        let targets: BTreeSet<AgentId> = self
            .core
            .topology
            .outgoing(self.me)
            .filter(|e| e.kind == kind && kind != EdgeKind::Data)
            .map(|e| e.to)
            .collect();
        if targets.is_empty() {
            return Err(NetworkError::NoRoute {
                agent: self.label().to_owned(),
                kind,
            });
        }
        self.count_decision()?;
        let message = self.message(payload);
        for to in targets {
            self.emitted.push(Emission {
                to,
                edge: kind,
                message: message.clone(),
            });
        }
        Ok(())
    }

    /// Pushes `payload` to a single neighbor.
    pub fn emit_to(&mut self, to: AgentId, payload: Payload) -> Result<(), NetworkError> {
        let kind = payload.edge_kind();
        if kind == EdgeKind::Data || !self.core.topology.has_edge(self.me, to, kind) {
            return Err(NetworkError::NoEdge {
                from: self.me,
                to,
                kind,
            });
        }
        self.count_decision()?;
        let message = self.message(payload);
        self.emitted.push(Emission {
            to,
            edge: kind,
            message,
        });
        Ok(())
    }

    /// Answers the data request that woke this agent.
    pub fn reply(&mut self, payload: Payload) -> Result<(), NetworkError> {
        let Some(requester) = self.requester else {
            return Err(NetworkError::NotARequest(self.label().to_owned()));
        };
        let message = self.message(payload.clone());
        self.emitted.push(Emission {
            to: requester,
            edge: EdgeKind::Data,
            message,
        });
        self.reply = Some(payload);
        Ok(())
    }

    /// Synchronously wakes `source` with a data request and returns its reply.
    pub fn pull(&mut self, source: AgentId) -> Result<Message, NetworkError> {
        if !self.core.topology.has_edge(self.me, source, EdgeKind::Data) {
            return Err(NetworkError::NoEdge {
                from: self.me,
                to: source,
                kind: EdgeKind::Data,
            });
        }
        let tick = self.tick;
        let reply = activate(self.core, source, tick, Wake::Request(self.me))?;
        match reply {
            Some(payload) => Ok(Message {
                from: source,
                sent_at: tick,
                payload,
            }),
            None => Err(NetworkError::NoReply(self.core.topology.label(source).to_owned())),
        }
    }
}

fn activate(core: &mut Core, agent: AgentId, tick: u64, wake: Wake) -> Result<Option<Payload>, NetworkError> {
    let Some(mut handler) = core.handlers[agent.0].take() else {
        return Err(NetworkError::ReentrantPull(core.topology.label(agent).to_owned()));
    };
    let requester = match &wake {
        Wake::Request(from) => Some(*from),
        _ => None,
    };
    let mut ctx = Context {
        core,
        me: agent,
        tick,
        requester,
        emitted: Vec::new(),
        notes: Vec::new(),
        reply: None,
        decisions: 0,
    };
    let result = handler.on_wake(&wake, &mut ctx);
    let Context {
        core,
        emitted,
        notes,
        reply,
        ..
    } = ctx;
    core.handlers[agent.0] = Some(handler);
    if let Err(source) = result {
        return Err(NetworkError::Handler {
            agent: core.topology.label(agent).to_owned(),
            tick,
            source,
        });
    }
    for e in emitted.iter().filter(|e| e.edge != EdgeKind::Data) {
        core.queue.push_back((e.to, Wake::Arrival(e.message.clone())));
    }
    core.trace.push(TraceEntry {
        step: core.trace.len(),
        tick,
        agent,
        cause: wake.cause(),
        emitted,
        notes,
    });
    Ok(reply)
}

/// Deterministic, single-threaded agent network.
///
/// Agents are registered and wired while the network is open, then the
/// network is sealed and run. Each logical tick first wakes clocked agents
/// and agents with a timer due, in id order, then drains the FIFO message
/// queue that their emissions feed.
#[derive(Default)]
pub struct Network {
    topology: NetworkTopology,
    handlers: Vec<Option<Box<dyn Agent>>>,
    clocked: Vec<bool>,
    timers: BTreeSet<(u64, AgentId)>,
    sealed: bool,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topology
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn register(
        &mut self,
        kind: AgentKind,
        label: impl Into<String>,
        handler: impl Agent,
    ) -> Result<AgentId, NetworkError> {
        if self.sealed {
            return Err(NetworkError::Sealed);
        }
        let label = label.into();
        if self.topology.find(&label).is_some() {
            return Err(NetworkError::DuplicateAgent(label));
        }
        let id = AgentId(self.topology.agents.len());
        self.topology.agents.push(AgentInfo { id, kind, label });
        self.handlers.push(Some(Box::new(handler)));
        self.clocked.push(false);
        Ok(id)
    }

    fn check_known(&self, id: AgentId) -> Result<(), NetworkError> {
        if id.0 < self.topology.agents.len() {
            Ok(())
        } else {
            Err(NetworkError::UnknownAgent(id))
        }
    }

    pub fn connect(&mut self, from: AgentId, to: AgentId, kind: EdgeKind) -> Result<EdgeId, NetworkError> {
        if self.sealed {
            return Err(NetworkError::Sealed);
        }
        self.check_known(from)?;
        self.check_known(to)?;
        if from == to {
            return Err(NetworkError::SelfLoop(from));
        }
        let id = EdgeId(self.topology.edges.len());
        self.topology.edges.push(Edge { id, from, to, kind });
        Ok(id)
    }

    /// Wakes `id` on every tick.
    pub fn wake_on_ticks(&mut self, id: AgentId) -> Result<(), NetworkError> {
        self.check_known(id)?;
        self.clocked[id.0] = true;
        Ok(())
    }

    /// Wakes `id` once at `tick`.
    pub fn schedule(&mut self, id: AgentId, tick: u64) -> Result<(), NetworkError> {
        self.check_known(id)?;
        self.timers.insert((tick, id));
        Ok(())
    }

    pub fn seal(&mut self) -> Result<(), NetworkError> {
        self.topology.validate()?;
        self.sealed = true;
        Ok(())
    }

    /// Borrow a registered handler by concrete type.
    pub fn agent<T: Agent>(&self, id: AgentId) -> Option<&T> {
        let handler: &dyn Agent = self.handlers.get(id.0)?.as_deref()?;
        (handler as &dyn Any).downcast_ref()
    }

    /// Runs until `stop` returns true. All randomness comes from one
    /// generator seeded with `seed`.
    pub fn run_until(&mut self, mut stop: impl FnMut(&RunState) -> bool, seed: u64) -> Result<Trace, NetworkError> {
        if !self.sealed {
            return Err(NetworkError::NotSealed);
        }
        let mut core = Core {
            topology: self.topology.clone(),
            handlers: std::mem::take(&mut self.handlers),
            rng: SimRng::seed_from_u64(seed),
            timers: std::mem::take(&mut self.timers),
            queue: VecDeque::new(),
            trace: Vec::new(),
            halted: false,
        };
        let clocked: Vec<AgentId> = (0..self.clocked.len())
            .filter(|&i| self.clocked[i])
            .map(AgentId)
            .collect();
        let result = schedule_loop(&mut core, &clocked, &mut stop);
        self.handlers = core.handlers;
        self.timers = core.timers;
        result.map(|()| Trace { entries: core.trace })
    }
}

fn schedule_loop(
    core: &mut Core,
    clocked: &[AgentId],
    stop: &mut impl FnMut(&RunState) -> bool,
) -> Result<(), NetworkError> {
    let mut tick: Option<u64> = None;
    loop {
        let state = |core: &Core, tick: Option<u64>| RunState {
            tick: tick.unwrap_or(0),
            activations: core.trace.len(),
            halted: core.halted,
        };
        if stop(&state(core, tick)) {
            return Ok(());
        }
        let next_clock = (!clocked.is_empty()).then(|| tick.map_or(0, |t| t + 1));
        let next_timer = core.timers.first().map(|&(t, _)| t);
        let next = match (next_clock, next_timer) {
            (Some(c), Some(t)) => c.min(t),
            (Some(c), None) => c,
            (None, Some(t)) => t,
            (None, None) => {
                return Err(NetworkError::Deadlock {
                    tick: tick.unwrap_or(0),
                    quiescent: core.topology.agents.iter().map(|a| a.label.clone()).collect(),
                });
            }
        };
        tick = Some(next);

        let mut due: BTreeSet<AgentId> = BTreeSet::new();
        if next_clock == Some(next) {
            due.extend(clocked.iter().copied());
        }
        while let Some(&(t, id)) = core.timers.first() {
            if t != next {
                break;
            }
            core.timers.pop_first();
            due.insert(id);
        }
        for id in due {
            core.queue.push_back((id, Wake::Tick(next)));
        }

        while let Some((agent, wake)) = core.queue.pop_front() {
            if stop(&state(core, tick)) {
                core.queue.clear();
                return Ok(());
            }
            activate(core, agent, next, wake)?;
        }
    }
}
