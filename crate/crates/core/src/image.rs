//! Image container, color conversions and 8-bit PNG I/O.
//!
//! Pixels are stored interleaved (row-major, R,G,B per pixel) as `f32`
//! values nominally in `[0, 1]`. Intermediate results such as curve-mapped
//! candidates may leave that range; clamping happens only on export.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::ImageError;

/// H×W×3 floating raster, channel order R,G,B.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::Empty { height, width });
        }
        if data.len() != height * width * 3 {
            return Err(ImageError::BadBuffer {
                height,
                width,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Constant-color image.
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    /// Builds an image by evaluating `f(row, col)` for every pixel.
    ///
    /// Panics if either dimension is zero or `f` yields a non-finite value.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                assert!(px.iter().all(|v| v.is_finite()), "non-finite pixel");
                data.extend_from_slice(&px);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Decodes an interleaved 8-bit RGB buffer; every value becomes `byte / 255`.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() != height * width * 3 {
            return Err(ImageError::BadBuffer {
                height,
                width,
                got: bytes.len(),
            });
        }
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Applies `f` to every pixel.
    pub fn map_pixels(&self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for px in self.pixels() {
            data.extend_from_slice(&f(px));
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn clamped(&self) -> Self {
        self.map_pixels(|p| p.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Interleaved 8-bit encoding using round-half-up with clamping.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// Snaps every value onto the 8-bit grid.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f32::from(quantize(v)) / 255.0).collect(),
        }
    }

    /// Planar copy `[3][H][W]`.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.pixel_count();
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.pixels().enumerate() {
            out[i] = px[0];
            out[hw + i] = px[1];
            out[2 * hw + i] = px[2];
        }
        out
    }

    /// Inverse of [`Image::to_planar`].
    pub fn from_planar(height: usize, width: usize, planar: &[f32]) -> Result<Self, ImageError> {
        let hw = height * width;
        if planar.len() != 3 * hw {
            return Err(ImageError::BadBuffer {
                height,
                width,
                got: planar.len(),
            });
        }
        let mut data = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            data.extend_from_slice(&[planar[i], planar[hw + i], planar[2 * hw + i]]);
        }
        Self::new(height, width, data)
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.pixel(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.pixel(self.height - 1 - y, x))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width);
        Self::from_fn(height, width, |y, x| self.pixel(top + y, left + x))
    }
}

/// Round-half-up quantization of a unit value to a byte.
#[inline]
pub fn quantize(v: f32) -> u8 {
    let scaled = (f64::from(v) * 255.0 + 0.5).floor();
    scaled.clamp(0.0, 255.0) as u8
}

/// Mirror index for any integer offset, period `2(n-1)`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

// ---------------------------------------------------------------------------
// PNG I/O

pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ImageError::NotFound(path.to_path_buf()),
        _ => ImageError::Io(e),
    })?;
    decode_png_from(BufReader::new(file), path)
}

/// Decodes an in-memory PNG.
pub fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
    decode_png_from(Cursor::new(bytes), Path::new("<memory>"))
}

fn decode_png_from<R: std::io::BufRead + std::io::Seek>(
    reader: R,
    path: &Path,
) -> Result<Image, ImageError> {
    let truncated = |e: png::DecodingError| ImageError::Truncated {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let decoder = png::Decoder::new(reader);
    let mut reader = decoder.read_info().map_err(truncated)?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedBitDepth {
            path: path.to_path_buf(),
            depth: info.bit_depth as u8,
        });
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(ImageError::UnsupportedColorType {
                path: path.to_path_buf(),
                kind: format!("{other:?}"),
            })
        }
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader.output_buffer_size().ok_or_else(|| ImageError::Truncated {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(truncated)?;
    let bytes = &buf[..frame.buffer_size()];
    let rgb: Vec<u8> = if channels == 3 {
        bytes.to_vec()
    } else {
        bytes
            .chunks_exact(4)
            .flat_map(|c| [c[0], c[1], c[2]])
            .collect()
    };
    Image::from_rgb8(height, width, &rgb)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let unwritable = |reason: String| ImageError::Unwritable {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::create(path).map_err(|e| unwritable(e.to_string()))?;
    let mut w = BufWriter::new(file);
    write_png(&mut w, img.width, img.height, png::ColorType::Rgb, &img.to_rgb8())
        .map_err(|e| unwritable(e.to_string()))?;
    w.flush().map_err(|e| unwritable(e.to_string()))
}

/// Encodes an image as an 8-bit RGB PNG.
pub fn encode_png(img: &Image) -> Vec<u8> {
    let mut out = Vec::new();
    write_png(&mut out, img.width, img.height, png::ColorType::Rgb, &img.to_rgb8())
        .expect("in-memory PNG encoding cannot fail");
    out
}

/// Encodes a single-channel plane (values in `[0,1]`) as an 8-bit grayscale PNG.
pub fn encode_gray_png(height: usize, width: usize, plane: &[f32]) -> Vec<u8> {
    let bytes: Vec<u8> = plane.iter().map(|&v| quantize(v)).collect();
    encode_gray8_png(height, width, &bytes)
}

/// Encodes raw 8-bit grayscale samples.
pub fn encode_gray8_png(height: usize, width: usize, bytes: &[u8]) -> Vec<u8> {
    assert_eq!(bytes.len(), height * width);
    let mut out = Vec::new();
    write_png(&mut out, width, height, png::ColorType::Grayscale, bytes)
        .expect("in-memory PNG encoding cannot fail");
    out
}

/// Decodes an 8-bit grayscale PNG into raw bytes plus `(height, width)`.
pub fn decode_gray_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), ImageError> {
    let path = Path::new("<memory>");
    let truncated = |e: png::DecodingError| ImageError::Truncated {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut reader = png::Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(truncated)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedColorType {
            path: path.to_path_buf(),
            kind: format!("{:?}/{:?}", info.color_type, info.bit_depth),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(w * h)];
    let frame = reader.next_frame(&mut buf).map_err(truncated)?;
    buf.truncate(frame.buffer_size());
    Ok((h, w, buf))
}

fn write_png<W: Write>(
    w: W,
    width: usize,
    height: usize,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<(), png::EncodingError> {
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(bytes)?;
    writer.finish()
}

// ---------------------------------------------------------------------------
// Color spaces

/// HSV raster; H in `[0,1)`, S and V in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsvImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl HsvImage {
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }
}

/// CIE L*a*b* raster (D65 white, sRGB primaries).
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LabImage {
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }
}

/// Hexcone RGB→HSV. Gray pixels get `H = 0, S = 0`.
pub fn rgb_to_hsv_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let h = if h >= 1.0 { 0.0 } else { h };
    [h, s, max]
}

pub fn hsv_to_rgb_pixel(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv(img: &Image) -> HsvImage {
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.pixels() {
        let hsv = rgb_to_hsv_pixel(px.map(f64::from));
        data.extend(hsv.iter().map(|&v| v as f32));
    }
    HsvImage {
        height: img.height,
        width: img.width,
        data,
    }
}

pub fn hsv_to_rgb(hsv: &HsvImage) -> Image {
    let mut data = Vec::with_capacity(hsv.data.len());
    for px in hsv.pixels() {
        let rgb = hsv_to_rgb_pixel(px.map(f64::from));
        data.extend(rgb.iter().map(|&v| v as f32));
    }
    Image {
        height: hsv.height,
        width: hsv.width,
        data,
    }
}

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// sRGB electro-optical transfer function.
#[inline]
pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB-encoded pixel to CIE L*a*b*. The reference white is the image of
/// RGB white under the matrix, so `(1,1,1)` lands exactly on `(100,0,0)`.
pub fn srgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    let mut white = [0.0; 3];
    for (k, row) in SRGB_TO_XYZ.iter().enumerate() {
        xyz[k] = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        white[k] = row[0] + row[1] + row[2];
    }
    let fx = lab_f(xyz[0] / white[0]);
    let fy = lab_f(xyz[1] / white[1]);
    let fz = lab_f(xyz[2] / white[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn rgb_to_lab(img: &Image) -> LabImage {
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.pixels() {
        data.extend_from_slice(&srgb_to_lab_pixel(px.map(f64::from)));
    }
    LabImage {
        height: img.height,
        width: img.width,
        data,
    }
}

pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Per-pixel `0.299 R + 0.587 G + 0.114 B`, row-major H×W.
pub fn luminance(img: &Image) -> Vec<f32> {
    img.pixels().map(luma).collect()
}

#[inline]
pub fn luma(px: [f32; 3]) -> f32 {
    LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2]
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    if img.height == height && img.width == width {
        return img.clone();
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let sample = |src: f64, n: usize| -> (usize, usize, f32) {
        let s = src.max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    Image::from_fn(height, width, |y, x| {
        let (y0, y1, fy) = sample((y as f64 + 0.5) * sy - 0.5, img.height);
        let (x0, x1, fx) = sample((x as f64 + 0.5) * sx - 0.5, img.width);
        let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bot = c[k] + (d[k] - c[k]) * fx;
            out[k] = top + (bot - top) * fy;
        }
        out
    })
}

/// Reflect-pads an image on the bottom and right so both sides become
/// multiples of `multiple`.
pub fn reflect_pad_to_multiple(img: &Image, multiple: usize) -> Image {
    let h = img.height.div_ceil(multiple) * multiple;
    let w = img.width.div_ceil(multiple) * multiple;
    if h == img.height && w == img.width {
        return img.clone();
    }
    Image::from_fn(h, w, |y, x| {
        img.pixel(
            reflect_index(y as isize, img.height),
            reflect_index(x as isize, img.width),
        )
    })
}
