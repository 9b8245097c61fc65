//! Capability-collaboration agent runtime.
//!
//! A request enters through [`reception`], is planned by [`planning`] from an
//! expert [`methodology`], and is executed step by step by the [`workflow`]
//! engine, which finds tools through the [`registry`] and reads long-term
//! configuration from the [`profile`] store. Tool providers register their
//! services through a [`broker`].

pub mod binding;
pub mod broker;
pub mod canon;
pub mod clock;
pub mod config;
pub mod events;
pub mod expr;
pub mod http;
pub mod kv;
pub mod methodology;
pub mod planning;
pub mod ports;
pub mod profile;
pub mod reasoner;
pub mod reception;
pub mod registry;
pub mod scenario;
pub mod services;
pub mod stack;
pub mod task;
pub mod text;
pub mod workflow;
