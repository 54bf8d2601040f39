use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and ablation switches of a [`super::RetouchModel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of curve sets.
    pub n: usize,
    /// Control points per curve.
    pub p: usize,
    /// Dense curve length.
    pub l: usize,
    /// Feature width; the last encoder width must equal it.
    pub d: usize,
    /// Side length the image encoder resizes to.
    pub encoder_size: usize,
    pub encoder_widths: [usize; 4],
    pub weight_widths: [usize; 3],
    pub use_weight_net: bool,
    pub use_text: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 5,
            p: 64,
            l: 256,
            d: 128,
            encoder_size: 64,
            encoder_widths: [16, 32, 64, 128],
            weight_widths: [8, 16, 16],
            use_weight_net: true,
            use_text: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n == 0 {
            return fail("n must be at least 1".into());
        }
        if self.p < 4 {
            return fail(format!("p must be at least 4, got {}", self.p));
        }
        if self.l < self.p {
            return fail(format!("l ({}) must be at least p ({})", self.l, self.p));
        }
        if self.d == 0 || self.encoder_widths[3] != self.d {
            return fail(format!(
                "last encoder width {} must equal d = {}",
                self.encoder_widths[3], self.d
            ));
        }
        if self.encoder_widths.contains(&0) || self.weight_widths.contains(&0) {
            return fail("layer widths must be positive".into());
        }
        if self.encoder_size < 16 {
            return fail(format!("encoder_size must be at least 16, got {}", self.encoder_size));
        }
        Ok(())
    }

    /// A miniature configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            n: 2,
            p: 6,
            l: 16,
            d: 6,
            encoder_size: 16,
            encoder_widths: [3, 4, 5, 6],
            weight_widths: [2, 3, 3],
            use_weight_net: true,
            use_text: true,
        }
    }
}
