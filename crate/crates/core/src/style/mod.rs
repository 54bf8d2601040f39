//! Style preference: the level predictor and the attribute sentence.

pub mod atp;
pub mod text;

pub use atp::{AtpModel, AtpTrainConfig};
pub use text::{
    band_of, delta_to_term, parse_text, preference_delta, render_bands, render_text, PreferenceDelta,
    TextParseError, TERMS,
};
