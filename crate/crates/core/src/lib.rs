//! Mixed-autonomy traffic laboratory: an IDM microsimulator with controlled
//! vehicles, kernel-weighted dynamic graphs, a small autodiff engine with
//! graph attention, shared-policy multi-agent PPO and an evaluation harness.
//!
//! The guide under `book/` walks through each part.

pub mod check;
pub mod config;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod scenario;
pub mod seeding;
pub mod sim;
pub mod tensor;
pub mod trainer;

// Every snippet in the guide runs as a doctest.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/adjacency.md")]
    mod adjacency {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
