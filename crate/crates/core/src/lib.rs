pub mod bridge;
pub mod broker;
pub mod bus;
pub mod client;
pub mod codec;
pub mod harness;
pub mod net;
pub mod scanmodel;
pub mod tls;
pub mod trace;
