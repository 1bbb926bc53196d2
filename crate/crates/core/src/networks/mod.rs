//! Refinement U-nets, the critic and the composed generators.

pub mod checkpoint;
pub mod critic;
pub mod dna;
pub mod layers;
pub mod unet;

pub use critic::{Critic, CriticCache, CriticConfig};
pub use dna::{
    config_for, critic_forward, g1_forward, g2_forward, param_breakdown, DnaConfig, DnaModel,
    DnaParams, GenCache, GenOutput, Generator,
};
pub use unet::{UNet, UNetCache, UNetConfig};
