//! Core library for a decentralized collective of reinforcement learners
//! that exchange task embeddings over a small TCP protocol and selectively
//! retrieve, compose, and fine-tune binary-mask policies from peers.

pub mod analysis;
pub mod embedding;
pub mod env;
pub mod net;
pub mod ot;
pub mod ppo;
pub mod protocol;
pub mod rng;
pub mod runtime;
