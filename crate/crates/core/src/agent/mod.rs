//! Event-driven runtime for assurance-monitor agent networks.
//!
//! Agents are typed (source, fusion, prediction, check-violation,
//! computation, control) and connected by typed streams. Pushed messages are
//! queued and delivered on later scheduler steps; pulls over data edges run
//! the source synchronously inside the caller's activation.

mod message;
mod network;

pub use message::{AgentId, AgentKind, EdgeKind, Feedback, Message, Payload, Reading, Signal, Wake, WakeCause};
pub use network::{
    Agent, AgentInfo, Context, Edge, EdgeId, Emission, FnAgent, HandlerError, Network, NetworkError, NetworkTopology,
    RunState, SimRng, Trace, TraceEntry,
};
