//! Discrete-time simulator for containerized C-RAN deployments: BBU and RRH
//! pods orchestrated as stateful sets on a small cluster, discovering each
//! other through a watchable key-value registry.

pub mod autoscaler;
pub mod cluster;
pub mod orchestrator;
pub mod output;
pub mod pod;
pub mod ranmodel;
pub mod registry;
pub mod scenario;
pub mod service;
pub mod simkernel;
