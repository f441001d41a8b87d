//! Live mode: a DQN-TAMER agent stepping on a wall-clock timer while a person
//! watches over a WebSocket and presses good/bad.

pub mod protocol;
pub mod server;
pub mod session;

pub use server::{router, serve, AppState, ServerConfig, SessionHandle};
pub use session::{Session, SessionConfig};
