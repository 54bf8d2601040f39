//! Six pooled style measurements and their 1–5 levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{luminance, rgb_to_hsv, Image};

pub const NUM_ATTRIBUTES: usize = 6;
pub const NUM_LEVELS: usize = 5;

/// Canonical attribute order.
pub const ATTRIBUTE_NAMES: [&str; NUM_ATTRIBUTES] = [
    "mean_brightness",
    "mean_saturation",
    "saturation_std",
    "brightness_std",
    "color_richness",
    "contrast",
];

/// Declared range and interior bin edges of one attribute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeBins {
    pub min: f64,
    pub max: f64,
    pub edges: [f64; NUM_LEVELS - 1],
}

const MEAN_BINS: AttributeBins = AttributeBins {
    min: 0.0,
    max: 1.0,
    edges: [0.2, 0.4, 0.6, 0.8],
};

const SPREAD_BINS: AttributeBins = AttributeBins {
    min: 0.0,
    max: 0.5,
    edges: [0.1, 0.2, 0.3, 0.4],
};

/// Binning table, one row per attribute in canonical order.
pub const ATTRIBUTE_BINS: [AttributeBins; NUM_ATTRIBUTES] = [
    MEAN_BINS,
    MEAN_BINS,
    SPREAD_BINS,
    SPREAD_BINS,
    SPREAD_BINS,
    SPREAD_BINS,
];

/// Raw measurements plus levels. Levels are integral after [`discretize`]
/// and may be fractional when they come from a predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub raw: [f64; NUM_ATTRIBUTES],
    pub levels: [f64; NUM_ATTRIBUTES],
}

impl AttributeVector {
    /// JSON object keyed by canonical attribute name.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (i, name) in ATTRIBUTE_NAMES.iter().enumerate() {
            map.insert(
                (*name).to_string(),
                serde_json::json!({ "raw": self.raw[i], "level": self.levels[i] }),
            );
        }
        serde_json::Value::Object(map)
    }
}

// Shifted by the first sample so constant inputs give exactly zero spread.
fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let values: Vec<f64> = values.collect();
    let n = values.len() as f64;
    let shift = values.first().copied().unwrap_or(0.0);
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Raw attributes in canonical order. Standard deviations are population
/// statistics; color richness is the Hasler–Süsstrunk colorfulness.
pub fn compute_raw_attributes(img: &Image) -> [f64; NUM_ATTRIBUTES] {
    let hsv = rgb_to_hsv(img);
    let s = hsv.pixels().map(|p| f64::from(p[1]));
    let v = hsv.pixels().map(|p| f64::from(p[2]));
    let (mean_s, std_s) = mean_std(s);
    let (mean_v, std_v) = mean_std(v);

    let rg = img.pixels().map(|p| f64::from(p[0]) - f64::from(p[1]));
    let yb = img
        .pixels()
        .map(|p| 0.5 * (f64::from(p[0]) + f64::from(p[1])) - f64::from(p[2]));
    let (mu_rg, sd_rg) = mean_std(rg);
    let (mu_yb, sd_yb) = mean_std(yb);
    let richness = (sd_rg * sd_rg + sd_yb * sd_yb).sqrt() + 0.3 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt();

    let luma = luminance(img);
    let (_, contrast) = mean_std(luma.iter().map(|&y| f64::from(y)));

    [mean_v, mean_s, std_s, std_v, richness, contrast]
}

/// Level of one value: `1 + #{edges <= value}` after clamping to range.
pub fn level_of(index: usize, value: f64) -> u8 {
    let bins = &ATTRIBUTE_BINS[index];
    let v = value.clamp(bins.min, bins.max);
    1 + bins.edges.iter().filter(|&&e| e <= v).count() as u8
}

pub fn discretize(raw: &[f64; NUM_ATTRIBUTES]) -> Result<[u8; NUM_ATTRIBUTES]> {
    let mut levels = [0u8; NUM_ATTRIBUTES];
    for (i, &v) in raw.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::NanAttribute(i));
        }
        levels[i] = level_of(i, v);
    }
    Ok(levels)
}

pub fn attribute_vector(img: &Image) -> AttributeVector {
    let raw = compute_raw_attributes(img);
    // Raw statistics of a finite image are finite.
    let levels = discretize(&raw).expect("finite attributes");
    AttributeVector {
        raw,
        levels: levels.map(f64::from),
    }
}

/// Integer levels of an image, as floats.
pub fn levels(img: &Image) -> [f64; NUM_ATTRIBUTES] {
    attribute_vector(img).levels
}
