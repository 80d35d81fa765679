//! Networking for out-of-things debugging: framed TCP links, the VM server
//! that hosts a monitor, the debugger client and the master node.

pub mod client;
pub mod master;
pub mod server;
pub mod transport;

pub use client::{ClientError, DebugClient, DeviceLink};
pub use master::{master_sink, MasterNode};
pub use server::{spawn as spawn_server, ServerConfig, ServerHandle};
pub use transport::{connect, listen, Endpoint, LinkConditions, StatsSnapshot, TransportError};
