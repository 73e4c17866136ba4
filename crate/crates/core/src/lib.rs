//! Core model of the vision compute service: jobs, storage, the data-graph
//! engine, and the vision functionality that runs on workers.

pub mod container;
pub mod graph;
pub mod job;
pub mod storage;
pub mod vision;
