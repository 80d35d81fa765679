pub mod hooks;
pub mod network;
pub mod proxy;
pub mod resume;
pub mod scaling;
pub mod tma;
