pub mod env;
pub mod eval;
pub mod experiment;
pub mod integrators;
pub mod kinetics;
pub mod policy;
pub mod ppo;
pub mod reference;
pub mod splitting1d;
