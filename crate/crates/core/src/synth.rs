//! Deterministic synthetic multi-expert dataset.
//!
//! Base images are smooth cosine color fields with a few solid shapes.
//! Each expert is a parametric retouch; one of them picks its tone curve
//! from the local luminance around each pixel, so no single global curve
//! can reproduce it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, ImageError, Result};
use crate::image::{encode_png, hsv_to_rgb_pixel, load_image, luma, rgb_to_hsv_pixel, Image};

pub const GAMMA_RANGE: (f64, f64) = (0.3, 3.0);
pub const OFFSET_RANGE: (f64, f64) = (-0.3, 0.3);
pub const SATURATION_RANGE: (f64, f64) = (0.0, 3.0);
pub const MIN_BASE_SIZE: usize = 16;
const MANIFEST: &str = "manifest.json";

/// Per-pixel gamma chosen by the mean luminance of the surrounding
/// `(2 radius + 1)^2` window (cut at the borders).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentRule {
    pub radius: usize,
    pub threshold: f64,
    /// Gamma where the local luminance exceeds the threshold.
    pub gamma_above: f64,
    pub gamma_below: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStyle {
    pub name: String,
    pub gamma: [f64; 3],
    pub saturation: f64,
    pub offset: f64,
    pub rule: Option<ContentRule>,
}

impl ExpertStyle {
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.into(),
            gamma: [1.0; 3],
            saturation: 1.0,
            offset: 0.0,
            rule: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        let mut gammas = self.gamma.to_vec();
        if let Some(r) = &self.rule {
            gammas.extend([r.gamma_above, r.gamma_below]);
        }
        if !gammas.iter().all(|&g| in_range(g, GAMMA_RANGE)) {
            return Err(Error::Config(format!("expert {}: gamma outside {GAMMA_RANGE:?}", self.name)));
        }
        if !in_range(self.offset, OFFSET_RANGE) {
            return Err(Error::Config(format!("expert {}: offset outside {OFFSET_RANGE:?}", self.name)));
        }
        if !in_range(self.saturation, SATURATION_RANGE) {
            return Err(Error::Config(format!("expert {}: saturation outside {SATURATION_RANGE:?}", self.name)));
        }
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::Config(format!("expert name {:?} is not a plain identifier", self.name)));
        }
        Ok(())
    }
}

/// The three default experts: bright and warm, muted, and a
/// content-dependent one that lifts bright neighbourhoods and deepens dark
/// ones.
pub fn default_experts() -> Vec<ExpertStyle> {
    vec![
        ExpertStyle {
            name: "bright".into(),
            gamma: [0.7, 0.75, 0.85],
            saturation: 1.1,
            offset: 0.05,
            rule: None,
        },
        ExpertStyle {
            name: "muted".into(),
            gamma: [1.2, 1.15, 1.1],
            saturation: 0.6,
            offset: -0.03,
            rule: None,
        },
        ExpertStyle {
            name: "adaptive".into(),
            gamma: [1.0; 3],
            saturation: 1.2,
            offset: 0.0,
            rule: Some(ContentRule {
                radius: 4,
                threshold: 0.5,
                gamma_above: 0.6,
                gamma_below: 1.8,
            }),
        },
    ]
}

/// Local mean luminance with a box window cut at the borders.
pub fn local_luminance(img: &Image, radius: usize) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    // Summed-area table over luma.
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f64::from(luma(img.pixel(y, x)));
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
            out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

/// Applies an expert: content gamma, channel gamma, HSV saturation scale,
/// brightness offset, clamp.
pub fn apply_expert(img: &Image, style: &ExpertStyle) -> Image {
    let w = img.width();
    let mask = style.rule.as_ref().map(|r| (r, local_luminance(img, r.radius)));
    Image::from_fn(img.height(), w, |y, x| {
        let mut px = img.pixel(y, x).map(f64::from);
        if let Some((rule, lum)) = &mask {
            let g = if lum[y * w + x] > rule.threshold {
                rule.gamma_above
            } else {
                rule.gamma_below
            };
            px = px.map(|v| v.powf(g));
        }
        for c in 0..3 {
            px[c] = px[c].powf(style.gamma[c]);
        }
        if style.saturation != 1.0 {
            let mut hsv = rgb_to_hsv_pixel(px);
            hsv[1] = (hsv[1] * style.saturation).clamp(0.0, 1.0);
            px = hsv_to_rgb_pixel(hsv);
        }
        px.map(|v| (v + style.offset).clamp(0.0, 1.0) as f32)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Upper bound on cosine modes per image; zero gives flat fields.
    pub max_modes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub experts: Vec<ExpertStyle>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 64,
            size: 64,
            train: 48,
            val: 8,
            test: 8,
            max_modes: 6,
            min_shapes: 1,
            max_shapes: 3,
            experts: default_experts(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_BASE_SIZE {
            return Err(Error::Config(format!("image size must be at least {MIN_BASE_SIZE}, got {}", self.size)));
        }
        if self.train + self.val + self.test != self.count {
            return Err(Error::Config(format!(
                "split {}+{}+{} does not add up to {} images",
                self.train, self.val, self.test, self.count
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config("min_shapes exceeds max_shapes".into()));
        }
        if self.experts.is_empty() {
            return Err(Error::Empty("expert list"));
        }
        for e in &self.experts {
            e.validate()?;
        }
        Ok(())
    }
}

fn base_image(rng: &mut ChaCha8Rng, size: usize, max_modes: usize, shapes: (usize, usize)) -> Image {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let modes = if max_modes == 0 { 0 } else { rng.random_range(max_modes.min(2)..=max_modes) };
    let waves: Vec<([f64; 2], f64, [f64; 3])> = (0..modes)
        .map(|m| {
            // The first two modes run purely along x and purely along y, so
            // the field is genuinely two-dimensional.
            let mut f = [f64::from(rng.random_range(0u8..4)), f64::from(rng.random_range(0u8..4))];
            if m < 2 {
                f[1 - m] = 0.0;
                f[m] = f64::from(rng.random_range(1u8..4));
            } else if f == [0.0; 2] {
                f[0] = 1.0;
            }
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = std::array::from_fn(|_| {
                let a: f64 = rng.random_range(0.08..0.25);
                if rng.random_bool(0.5) { a } else { -a }
            });
            (f, phase, amp)
        })
        .collect();
    let n_shapes = if shapes.1 == 0 { 0 } else { rng.random_range(shapes.0..=shapes.1) };
    let s = size as f64;
    let blobs: Vec<(bool, [f64; 4], [f32; 3])> = (0..n_shapes)
        .map(|_| {
            let round = rng.random_bool(0.5);
            let geom = [
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(s * 0.08..s * 0.25),
                rng.random_range(s * 0.08..s * 0.25),
            ];
            let color = std::array::from_fn(|_| rng.random_range(0.0f32..1.0));
            (round, geom, color)
        })
        .collect();
    Image::from_fn(size, size, |y, x| {
        let (fy, fx) = (y as f64 / s, x as f64 / s);
        for (round, [cy, cx, ry, rx], color) in blobs.iter().rev() {
            let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
            let inside = if *round { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
            if inside {
                return *color;
            }
        }
        let mut px = base;
        for (f, phase, amp) in &waves {
            let v = (std::f64::consts::TAU * (f[0] * fx + f[1] * fy) + phase).cos();
            for c in 0..3 {
                px[c] += amp[c] * v;
            }
        }
        px.map(|v| v.clamp(0.0, 1.0) as f32)
    })
    .quantized()
}

/// `count` base images of `size` x `size`, snapped to the 8-bit grid.
pub fn generate_base(seed: u64, count: usize, size: usize) -> Result<Vec<Image>> {
    let cfg = SynthConfig {
        count,
        size,
        train: count,
        val: 0,
        test: 0,
        ..Default::default()
    };
    generate_base_with(seed, &cfg)
}

pub fn generate_base_with(seed: u64, cfg: &SynthConfig) -> Result<Vec<Image>> {
    if cfg.size < MIN_BASE_SIZE {
        return Err(Error::Config(format!("image size must be at least {MIN_BASE_SIZE}, got {}", cfg.size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..cfg.count)
        .map(|_| base_image(&mut rng, cfg.size, cfg.max_modes, (cfg.min_shapes, cfg.max_shapes)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub seed: u64,
    pub config: SynthConfig,
    pub inputs: Vec<Image>,
    /// `targets[image][expert]`.
    pub targets: Vec<Vec<Image>>,
    pub split: Split,
}

pub fn build_dataset(seed: u64, config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let inputs = generate_base_with(seed, config)?;
    let targets = inputs
        .iter()
        .map(|x| config.experts.iter().map(|e| apply_expert(x, e).quantized()).collect())
        .collect();
    let mut order: Vec<usize> = (0..config.count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5917);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let (train, rest) = order.split_at(config.train);
    let (val, test) = rest.split_at(config.val);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(SynthDataset {
        seed,
        config: config.clone(),
        inputs,
        targets,
        split: Split {
            train: sorted(train),
            val: sorted(val),
            test: sorted(test),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub split: Split,
    /// Input file names under `inputs/`; expert outputs reuse them under
    /// `expert_<name>/`.
    pub files: Vec<String>,
    /// SHA-256 over every PNG in manifest order.
    pub content_hash: String,
}

fn file_name(i: usize) -> String {
    format!("{i:04}.png")
}

fn unwritable(path: &Path, e: impl ToString) -> Error {
    ImageError::Unwritable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
    .into()
}

impl SynthDataset {
    pub fn expert_names(&self) -> Vec<&str> {
        self.config.experts.iter().map(|e| e.name.as_str()).collect()
    }

    fn encoded(&self) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        for (i, x) in self.inputs.iter().enumerate() {
            out.push((Path::new("inputs").join(file_name(i)), encode_png(x)));
        }
        for (e, expert) in self.config.experts.iter().enumerate() {
            for (i, ys) in self.targets.iter().enumerate() {
                out.push((Path::new(&format!("expert_{}", expert.name)).join(file_name(i)), encode_png(&ys[e])));
            }
        }
        out
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut hasher = Sha256::new();
        for (path, bytes) in self.encoded() {
            hasher.update(path.to_string_lossy().as_bytes());
            hasher.update(&bytes);
        }
        let digest = hasher.finalize();
        DatasetManifest {
            seed: self.seed,
            config: self.config.clone(),
            split: self.split.clone(),
            files: (0..self.inputs.len()).map(file_name).collect(),
            content_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
        }
    }

    /// Writes `inputs/`, one `expert_<name>/` tree per expert, and
    /// `manifest.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
        let dir = dir.as_ref();
        for (rel, bytes) in self.encoded() {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| unwritable(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| unwritable(&path, e))?;
        }
        let manifest = self.manifest();
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| unwritable(&path, e))?;
        Ok(manifest)
    }

    /// Reads a tree written by [`SynthDataset::write`].
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let bytes = fs::read(&path).map_err(|_| ImageError::NotFound(path.clone()))?;
        let m: DatasetManifest = serde_json::from_slice(&bytes)?;
        let inputs = m
            .files
            .iter()
            .map(|f| load_image(dir.join("inputs").join(f)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut by_expert = BTreeMap::new();
        for e in &m.config.experts {
            let imgs = m
                .files
                .iter()
                .map(|f| load_image(dir.join(format!("expert_{}", e.name)).join(f)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            by_expert.insert(e.name.clone(), imgs);
        }
        let targets = (0..inputs.len())
            .map(|i| m.config.experts.iter().map(|e| by_expert[&e.name][i].clone()).collect())
            .collect();
        Ok(Self {
            seed: m.seed,
            config: m.config,
            inputs,
            targets,
            split: m.split,
        })
    }
}
