//! Camera trajectory toolkit: SE(3) processing, motion tagging, captioning,
//! conditioned trajectory diffusion, a contrastive language-trajectory
//! embedding and generative evaluation metrics.

pub mod align;
pub mod caption;
pub mod clatr;
pub mod clean;
pub mod director;
pub mod tagging;
pub mod error;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod synth;

pub use error::{Error, Result};
