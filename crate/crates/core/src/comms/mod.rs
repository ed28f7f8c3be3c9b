//! Operator link: wire protocol, physical link models and sessions.

pub mod link;
pub mod protocol;
pub mod session;

pub use link::{link_available, LinkGeometry, LinkKind, LinkModel, LinkQuality, LinkSet};
pub use protocol::{decode, encode, Body, Command, CommandKind, Message, ProtocolError};
pub use session::{session_step, validate_command, Session, SessionConfig, StepReport};
