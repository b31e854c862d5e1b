//! Discrete POMDP motion planning toolkit: grid-world model compilation,
//! FIB/PBVI offline bounds, anytime QV-tree search, A*/MDP baselines, and a
//! closed-loop Monte-Carlo simulator with batch statistics.

pub mod baselines;
pub mod cache;
pub mod config;
pub mod gridworld;
pub mod mapgen;
pub mod model;
pub mod qvts;
pub mod render;
pub mod sim;
pub mod solvers;

pub use gridworld::{GridMap, MotionNoise};
pub use model::{alpha_value, AlphaSet, AlphaVector, Belief, PomdpModel};
