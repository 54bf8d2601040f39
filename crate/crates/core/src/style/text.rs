//! Level shifts to descriptive terms, and the fixed attribute sentence.

use serde::Serialize;
use thiserror::Error;

use crate::attributes::{ATTRIBUTE_NAMES, NUM_ATTRIBUTES, NUM_LEVELS};

/// Descriptive terms per attribute, band 1 (strong increase) to band 5
/// (strong decrease).
pub const TERMS: [[&str; NUM_LEVELS]; NUM_ATTRIBUTES] = [
    ["very high", "high", "medium", "low", "very low"],
    ["intensely vibrant", "vibrant", "natural", "muted", "desaturated"],
    ["extreme", "high", "moderate", "low", "minimal"],
    ["dramatic", "dynamic", "balanced", "soft", "flat"],
    ["full-spectrum", "rich", "standard", "limited", "monochromatic"],
    ["very high", "high", "medium", "low", "very low"],
];

// Literal text around the six slots.
const SEGMENTS: [&str; NUM_ATTRIBUTES + 1] = [
    "Set the brightness to ",
    ", make the colors ",
    ", adjust color variation to be ",
    ", set the lighting to be ",
    ", use a ",
    " color palette, make the contrast ",
    ".",
];

#[derive(Debug, Error, PartialEq, Eq)]
#[error("attribute text does not match the template at slot {slot} ({attribute}): {remainder:?}")]
pub struct TextParseError {
    /// 1-based slot index.
    pub slot: usize,
    pub attribute: &'static str,
    pub remainder: String,
}

/// Band index 1..=5 of a level shift; intervals are half-open `[lo, hi)`.
pub fn band_of(delta: f64) -> u8 {
    if delta >= 1.5 {
        1
    } else if delta >= 0.5 {
        2
    } else if delta >= -0.5 {
        3
    } else if delta >= -1.5 {
        4
    } else {
        5
    }
}

pub fn delta_to_term(index: usize, delta: f64) -> &'static str {
    TERMS[index][usize::from(band_of(delta)) - 1]
}

pub fn render_bands(bands: &[u8; NUM_ATTRIBUTES]) -> String {
    let mut s = String::with_capacity(200);
    for (i, &b) in bands.iter().enumerate() {
        s.push_str(SEGMENTS[i]);
        s.push_str(TERMS[i][usize::from(b) - 1]);
    }
    s.push_str(SEGMENTS[NUM_ATTRIBUTES]);
    s
}

pub fn render_text(delta: &[f64; NUM_ATTRIBUTES]) -> String {
    render_bands(&delta.map(band_of))
}

/// Recovers the six band indices from a rendered sentence.
pub fn parse_text(text: &str) -> Result<[u8; NUM_ATTRIBUTES], TextParseError> {
    let fail = |slot: usize, rest: &str| TextParseError {
        slot: slot + 1,
        attribute: ATTRIBUTE_NAMES[slot.min(NUM_ATTRIBUTES - 1)],
        remainder: rest.chars().take(40).collect(),
    };
    let mut rest = text.strip_prefix(SEGMENTS[0]).ok_or_else(|| fail(0, text))?;
    let mut bands = [0u8; NUM_ATTRIBUTES];
    for slot in 0..NUM_ATTRIBUTES {
        let next = SEGMENTS[slot + 1];
        let hit = TERMS[slot]
            .iter()
            .enumerate()
            .find_map(|(b, term)| rest.strip_prefix(term)?.strip_prefix(next).map(|r| (b, r)));
        let (b, r) = hit.ok_or_else(|| fail(slot, rest))?;
        bands[slot] = b as u8 + 1;
        rest = r;
    }
    if !rest.is_empty() {
        return Err(fail(NUM_ATTRIBUTES, rest));
    }
    Ok(bands)
}

/// Desired level shifts with their terms and sentence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreferenceDelta {
    pub delta: [f64; NUM_ATTRIBUTES],
    pub terms: [&'static str; NUM_ATTRIBUTES],
    pub text: String,
}

impl PreferenceDelta {
    pub fn from_delta(delta: [f64; NUM_ATTRIBUTES]) -> Self {
        let terms = std::array::from_fn(|i| delta_to_term(i, delta[i]));
        Self {
            delta,
            terms,
            text: render_text(&delta),
        }
    }
}

pub fn preference_delta(s_y_hat: &[f64; NUM_ATTRIBUTES], s_x: &[f64; NUM_ATTRIBUTES]) -> PreferenceDelta {
    PreferenceDelta::from_delta(std::array::from_fn(|i| s_y_hat[i] - s_x[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const NEUTRAL: &str = "Set the brightness to medium, make the colors natural, adjust color variation to be moderate, set the lighting to be balanced, use a standard color palette, make the contrast medium.";

    #[test]
    fn neutral_sentence() {
        assert_eq!(render_text(&[0.0; 6]), NEUTRAL);
        assert_eq!(parse_text(NEUTRAL).unwrap(), [3; 6]);
    }

    #[test]
    fn strongest_terms() {
        let s = render_text(&[2.0; 6]);
        assert_eq!(
            s,
            "Set the brightness to very high, make the colors intensely vibrant, adjust color variation to be extreme, set the lighting to be dramatic, use a full-spectrum color palette, make the contrast very high."
        );
    }

    #[test]
    fn band_table() {
        assert_eq!(delta_to_term(1, -1.0), "muted");
        assert_eq!(delta_to_term(3, 1.5), "dramatic");
        assert_eq!(delta_to_term(5, 0.49), "medium");
        assert_eq!(delta_to_term(0, 4.0), "very high");
        assert_eq!(delta_to_term(0, 0.5), "high");
        assert_eq!(delta_to_term(0, -0.5), "medium");
        assert_eq!(delta_to_term(0, -1.5), "low");
        assert_eq!(delta_to_term(0, -1.51), "very low");
    }

    #[test]
    fn preference_from_prediction() {
        let p = preference_delta(&[5.0, 3.4, 3.0, 3.0, 3.0, 3.0], &[1.0, 3.0, 3.0, 3.0, 3.0, 3.0]);
        assert_eq!(p.delta[0], 4.0);
        assert_eq!(p.terms[0], "very high");
        assert!((p.delta[1] - 0.4).abs() < 1e-12);
        assert_eq!(p.terms[1], "natural");
        let same = preference_delta(&[2.0; 6], &[2.0; 6]);
        assert_eq!(same.delta, [0.0; 6]);
        assert_eq!(same.text, NEUTRAL);
    }

    #[test]
    fn vibrant_in_second_slot() {
        let text = NEUTRAL.replace("colors natural", "colors vibrant");
        assert_eq!(parse_text(&text).unwrap()[1], 2);
    }

    #[test]
    fn parse_errors_name_the_slot() {
        assert_eq!(parse_text("make it pop").unwrap_err().slot, 1);
        let bad = NEUTRAL.replace("lighting to be balanced", "lighting to be loud");
        let err = parse_text(&bad).unwrap_err();
        assert_eq!(err.slot, 4);
        assert_eq!(err.attribute, "brightness_std");
        let trailing = format!("{NEUTRAL} extra");
        assert_eq!(parse_text(&trailing).unwrap_err().slot, 7);
    }

    proptest! {
        #[test]
        fn render_parse_render_is_fixed(d in proptest::array::uniform6(-4.0f64..4.0)) {
            let text = render_text(&d);
            let bands = parse_text(&text).unwrap();
            prop_assert_eq!(bands, d.map(band_of));
            prop_assert_eq!(render_bands(&bands), text);
        }

        #[test]
        fn bands_are_monotone(a in -4.0f64..4.0, b in -4.0f64..4.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(band_of(lo) >= band_of(hi));
        }
    }
}
