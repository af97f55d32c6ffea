pub mod clock;
pub mod events;
pub mod store;
pub mod registry;
pub mod identity;
pub mod authz;
pub mod threads;
pub mod runner;
pub mod orchestrator;
pub mod gateway;
pub mod platform;
pub mod configctl;
