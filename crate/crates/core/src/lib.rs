#![allow(clippy::needless_range_loop)]

pub mod dp;
pub mod eval;
pub mod fluid;
pub mod instance;
pub mod lp;
pub mod mdp;
pub mod sim;
