//! Diffusions driven by left-invariant fields on stratified groups.
//!
//! The crate builds nilpotent groups from their structure constants, derives
//! the horizontal frame symbolically, simulates the associated Itô diffusion,
//! solves its Fokker–Planck equation on a grid, and compares laws with the
//! Fortet–Mourier distance. A Feynman–Kac estimator and a config-driven runner
//! sit on top.
//!
//! The guide in `book/` walks through each piece with runnable examples.

pub mod algebra;
pub mod drift;
pub mod feynman_kac;
pub mod fp;
pub mod frame;
pub mod grid;
pub mod measures;
pub mod poly;
pub mod runner;
pub mod sde;
pub mod stats;
pub mod transport;

/// Shortest round-trip-safe scientific form used in every artifact.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub struct $name;
        };
    }
    #[doc = include_str!("../../../README.md")]
    pub struct Readme;
    chapter!(Overview, "overview.md");
    chapter!(Groups, "groups.md");
    chapter!(Frames, "frames.md");
    chapter!(Diffusions, "diffusions.md");
    chapter!(FokkerPlanck, "fokker_planck.md");
    chapter!(Distances, "distances.md");
    chapter!(FeynmanKac, "feynman_kac.md");
    chapter!(Experiments, "experiments.md");
}
