//! The retouch request path shared by the CLI, the HTTP service, and the
//! C bindings.

use serde::Serialize;

use crate::attributes::{levels, NUM_ATTRIBUTES};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::RetouchModel;
use crate::style::{preference_delta, render_text, AtpModel};

/// Largest accepted magnitude of a manual level shift.
pub const MAX_DELTA: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    /// Predict the target levels with the attribute target predictor.
    Auto,
    /// Explicit per-attribute level shifts.
    Manual([f64; NUM_ATTRIBUTES]),
}

#[derive(Debug, Clone)]
pub struct Retouched {
    pub image: Image,
    pub text: String,
    pub delta: [f64; NUM_ATTRIBUTES],
    pub attributes_in: [f64; NUM_ATTRIBUTES],
    pub predicted_target: Option<[f64; NUM_ATTRIBUTES]>,
    /// `[N, H, W]` normalized weight maps.
    pub weights: Vec<f32>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StylePrediction {
    pub s_x: [f64; NUM_ATTRIBUTES],
    pub s_y_hat: [f64; NUM_ATTRIBUTES],
    pub delta: [f64; NUM_ATTRIBUTES],
    pub text: String,
}

pub fn check_delta(delta: &[f64; NUM_ATTRIBUTES]) -> Result<()> {
    for (i, d) in delta.iter().enumerate() {
        if !d.is_finite() || d.abs() > MAX_DELTA {
            return Err(Error::Config(format!(
                "delta[{i}] = {d} is outside [-{MAX_DELTA}, {MAX_DELTA}]"
            )));
        }
    }
    Ok(())
}

/// Parses six comma-separated numbers.
pub fn parse_delta(s: &str) -> Result<[f64; NUM_ATTRIBUTES]> {
    let values = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("delta: cannot parse {v:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let delta: [f64; NUM_ATTRIBUTES] = values
        .try_into()
        .map_err(|v: Vec<f64>| Error::Config(format!("delta: expected 6 values, got {}", v.len())))?;
    check_delta(&delta)?;
    Ok(delta)
}

pub fn predict_style(atp: &AtpModel, img: &Image) -> StylePrediction {
    let s_x = levels(img);
    let s_y_hat = atp.predict(&s_x);
    let p = preference_delta(&s_y_hat, &s_x);
    StylePrediction {
        s_x,
        s_y_hat,
        delta: p.delta,
        text: p.text,
    }
}

/// Runs the full pipeline. `atp` is needed only in auto mode.
pub fn retouch(model: &RetouchModel, atp: Option<&AtpModel>, img: &Image, mode: &Mode) -> Result<Retouched> {
    let attributes_in = levels(img);
    let (delta, predicted_target) = match mode {
        Mode::Manual(d) => {
            check_delta(d)?;
            (*d, None)
        }
        Mode::Auto => {
            let atp = atp.ok_or_else(|| Error::MissingArtifact("attribute predictor checkpoint (auto mode)".into()))?;
            let p = predict_style(atp, img);
            (p.delta, Some(p.s_y_hat))
        }
    };
    let text = render_text(&delta);
    let out = model.forward(img, &text)?;
    Ok(Retouched {
        image: out.image.clamped(),
        text,
        delta,
        attributes_in,
        predicted_target,
        weights: out.weights,
        n: model.config().n,
    })
}

/// Scales each pixel's weights to integers that sum to exactly 255, using
/// largest-remainder rounding. Returns one plane per map.
pub fn quantize_weights(weights: &[f32], n: usize) -> Vec<Vec<u8>> {
    assert!(n > 0 && weights.len() % n == 0);
    let hw = weights.len() / n;
    let mut planes = vec![vec![0u8; hw]; n];
    let mut parts: Vec<(f64, usize)> = Vec::with_capacity(n);
    for p in 0..hw {
        parts.clear();
        let total: f64 = (0..n).map(|j| f64::from(weights[j * hw + p]).max(0.0)).sum();
        let mut used = 0u32;
        for (j, plane) in planes.iter_mut().enumerate() {
            let share = if total > 0.0 {
                f64::from(weights[j * hw + p]).max(0.0) / total * 255.0
            } else {
                255.0 / n as f64
            };
            let base = share.floor();
            plane[p] = base as u8;
            used += base as u32;
            parts.push((share - base, j));
        }
        // Stable sort keeps ties in map order.
        parts.sort_by(|a, b| b.0.total_cmp(&a.0));
        for &(_, j) in parts.iter().take((255 - used) as usize) {
            planes[j][p] += 1;
        }
    }
    planes
}
