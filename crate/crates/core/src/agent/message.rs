use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clock::{DeviationModel, WienerEstimate};
use crate::grid::{Cell, Displacement, GridDistribution, TrajectoryForecast};

/// Identifier of a registered agent; assigned densely from zero in
/// registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub(crate) usize);

impl AgentId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "agent#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentKind {
    Source,
    Fusion,
    Prediction,
    CheckViolation,
    Computation,
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    /// Stream of (distribution, control) tuples.
    Tuple,
    /// Stream of (distribution, feedback) tuples.
    Feedback,
    /// On-demand reads: the requester pulls from the target.
    Data,
}

/// Outcome of a violation check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Signal {
    Continue,
    MoreData,
    Change,
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Signal::Continue => "Continue",
            Signal::MoreData => "MoreData",
            Signal::Change => "Change",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub signal: Signal,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Reading {
    Scalar(f64),
    Location(Cell),
    ClockPair { local: f64, reference: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Distribution(Arc<GridDistribution>),
    Forecast(Arc<TrajectoryForecast>),
    ControlPlan(Arc<[Displacement]>),
    Feedback(Feedback),
    DataRequest(AgentId),
    SensorReading(Reading),
    Estimate(WienerEstimate),
    Deviation(DeviationModel),
    /// Several payloads travelling together, e.g. (distribution, control).
    Tuple(Vec<Payload>),
}

impl Payload {
    /// Edge kind this payload may travel on. Anything carrying feedback goes
    /// on feedback streams, data requests on data edges, everything else on
    /// tuple streams.
    pub fn edge_kind(&self) -> EdgeKind {
        match self {
            Payload::Feedback(_) => EdgeKind::Feedback,
            Payload::DataRequest(_) => EdgeKind::Data,
            Payload::Tuple(items) => {
                if items.iter().any(|p| p.edge_kind() == EdgeKind::Feedback) {
                    EdgeKind::Feedback
                } else {
                    EdgeKind::Tuple
                }
            }
            _ => EdgeKind::Tuple,
        }
    }

    /// Flattened view: the payload itself or the members of a tuple.
    pub fn parts(&self) -> &[Payload] {
        match self {
            Payload::Tuple(items) => items,
            other => std::slice::from_ref(other),
        }
    }

    pub fn distribution(&self) -> Option<&Arc<GridDistribution>> {
        self.parts().iter().find_map(|p| match p {
            Payload::Distribution(d) => Some(d),
            _ => None,
        })
    }

    pub fn plan(&self) -> Option<&Arc<[Displacement]>> {
        self.parts().iter().find_map(|p| match p {
            Payload::ControlPlan(plan) => Some(plan),
            _ => None,
        })
    }

    pub fn feedback(&self) -> Option<Feedback> {
        self.parts().iter().find_map(|p| match p {
            Payload::Feedback(f) => Some(*f),
            _ => None,
        })
    }

    pub fn reading(&self) -> Option<&Reading> {
        self.parts().iter().find_map(|p| match p {
            Payload::SensorReading(r) => Some(r),
            _ => None,
        })
    }
}

/// Immutable value delivered along an edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: AgentId,
    /// Logical tick at which the message was emitted.
    pub sent_at: u64,
    pub payload: Payload,
}

/// Why an agent was activated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WakeCause {
    ClockTick(u64),
    MessageArrival(AgentId),
    /// Synchronous pull by another agent over a data edge.
    DataRequest(AgentId),
}

/// What an agent sees when it is woken.
#[derive(Debug, Clone, PartialEq)]
pub enum Wake {
    Tick(u64),
    Arrival(Message),
    Request(AgentId),
}

impl Wake {
    pub fn cause(&self) -> WakeCause {
        match self {
            Wake::Tick(t) => WakeCause::ClockTick(*t),
            Wake::Arrival(m) => WakeCause::MessageArrival(m.from),
            Wake::Request(from) => WakeCause::DataRequest(*from),
        }
    }
}
