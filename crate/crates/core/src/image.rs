//! Image containers, region masks, seeded random streams and file I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};

/// `C x H x W` dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for Shape {
    fn default() -> Self {
        Shape::new(1, 32, 32)
    }
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A `C x H x W` float image stored channel-major. Values are nominally in
/// `[0, 1]`, but diffusion intermediates leave that range; only finiteness is
/// enforced.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    shape: Shape,
    data: Vec<f32>,
}

impl ImagePatch {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(param_err!("image dimensions must be positive, got {shape}"));
        }
        if data.len() != shape.len() {
            return Err(param_err!(
                "image {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value at index {i}")));
        }
        Ok(ImagePatch { shape, data })
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        assert!(!shape.is_empty(), "image dimensions must be positive");
        ImagePatch {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        assert!(!shape.is_empty(), "image dimensions must be positive");
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        ImagePatch { shape, data }
    }

    /// Draws every value i.i.d. standard normal.
    pub fn standard_normal(shape: Shape, rng: &mut SeededRng) -> Self {
        assert!(!shape.is_empty(), "image dimensions must be positive");
        let data = (0..shape.len()).map(|_| rng.normal() as f32).collect();
        ImagePatch { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.shape.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Validation("image contains non-finite values".into()))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImagePatch {
        ImagePatch {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; panics on shape mismatch.
    pub fn zip_map(&self, other: &ImagePatch, f: impl Fn(f32, f32) -> f32) -> ImagePatch {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        ImagePatch {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.len() as f64
    }

    /// Population variance over all values.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.len() as f64
    }

    /// Values as `f64`, channel-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub(crate) fn from_f64(shape: Shape, data: &[f64]) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        ImagePatch {
            shape,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Mirror-reflects an out-of-range index into `0..n` without repeating the
/// edge sample (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Binary `H x W` mask selecting one region of an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    #[default]
    HalfPlane,
    Rectangle,
}

impl RegionMask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        RegionMask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        RegionMask {
            height,
            width,
            data,
        }
    }

    pub fn random(kind: MaskKind, height: usize, width: usize, rng: &mut SeededRng) -> Result<Self> {
        match kind {
            MaskKind::HalfPlane => Self::random_half_plane(height, width, rng),
            MaskKind::Rectangle => Self::random_rectangle(height, width, rng),
        }
    }

    /// Indicator of a half-plane bounded by a line through a uniform interior
    /// point at a uniform angle. Draws that leave one side without any pixel
    /// centre are rejected and redrawn.
    pub fn random_half_plane(height: usize, width: usize, rng: &mut SeededRng) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(param_err!("mask needs at least 2x2 pixels, got {height}x{width}"));
        }
        loop {
            let theta = rng.uniform() * std::f64::consts::TAU;
            let px = rng.uniform() * width as f64;
            let py = rng.uniform() * height as f64;
            let (nx, ny) = (theta.cos(), theta.sin());
            let mask = Self::from_fn(height, width, |y, x| {
                (x as f64 + 0.5 - px) * nx + (y as f64 + 0.5 - py) * ny >= 0.0
            });
            if mask.is_proper() {
                return Ok(mask);
            }
        }
    }

    /// Indicator of an axis-aligned rectangle with uniformly drawn corners.
    pub fn random_rectangle(height: usize, width: usize, rng: &mut SeededRng) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(param_err!("mask needs at least 2x2 pixels, got {height}x{width}"));
        }
        loop {
            let (y0, y1) = ordered(rng.below(height + 1), rng.below(height + 1));
            let (x0, x1) = ordered(rng.below(width + 1), rng.below(width + 1));
            let mask = Self::from_fn(height, width, |y, x| y >= y0 && y < y1 && x >= x0 && x < x1);
            if mask.is_proper() {
                return Ok(mask);
            }
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Row-major `H x W` values.
    pub fn values(&self) -> &[bool] {
        &self.data
    }

    pub fn complement(&self) -> RegionMask {
        RegionMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    pub fn fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v).count() as f64 / self.data.len() as f64
    }

    fn is_proper(&self) -> bool {
        self.data.iter().any(|&v| v) && self.data.iter().any(|&v| !v)
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

pub const DEFAULT_SLICES: usize = 20;
pub const DEFAULT_DEPTH_START_UM: f64 = 22.0;
pub const DEFAULT_DEPTH_STEP_UM: f64 = 2.0;

/// Ordered stack of same-shaped slices at increasing depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    slices: Vec<ImagePatch>,
    depth_start_um: f64,
    depth_step_um: f64,
}

impl Volume {
    pub fn new(slices: Vec<ImagePatch>, depth_start_um: f64, depth_step_um: f64) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| param_err!("volume needs at least one slice"))?;
        if slices.iter().any(|s| s.shape() != first.shape()) {
            return Err(param_err!("all volume slices must share one shape"));
        }
        Ok(Volume {
            slices,
            depth_start_um,
            depth_step_um,
        })
    }

    /// A stack of `count` copies of `image` at the default depths.
    pub fn replicate(image: &ImagePatch, count: usize) -> Result<Self> {
        Self::new(vec![image.clone(); count], DEFAULT_DEPTH_START_UM, DEFAULT_DEPTH_STEP_UM)
    }

    pub fn slices(&self) -> &[ImagePatch] {
        &self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn depth_start_um(&self) -> f64 {
        self.depth_start_um
    }

    pub fn depth_step_um(&self) -> f64 {
        self.depth_step_um
    }

    pub fn depth_um(&self, z: usize) -> f64 {
        self.depth_start_um + self.depth_step_um * z as f64
    }
}

/// Deterministic random stream identified by `(seed, stream)`.
///
/// Backed by ChaCha8 with the stream id mapped onto ChaCha's stream counter,
/// so identical pairs yield identical draws on every platform. A stream must
/// not be shared between threads; derive one per work item instead.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream, a pure function of `(seed, stream, tag)` and
    /// unaffected by how much of this stream has been consumed.
    pub fn derive(&self, tag: u64) -> SeededRng {
        let child_seed = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x5EED)));
        SeededRng::new(child_seed, tag)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.inner.random_range(0..n)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        self.inner.random_range(lo..=hi)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub const PFT_MAGIC: &[u8; 4] = b"PFT1";

/// An n-dimensional float32 array as stored in a PFT file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(param_err!("tensor dims {dims:?} need {n} values, got {}", data.len()));
        }
        Ok(Tensor { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(PFT_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(Error::Format(format!("truncated PFT data while reading {what}")));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        if take(4, "magic")? != PFT_MAGIC {
            return Err(Error::Format("bad PFT magic".into()));
        }
        let read_u32 = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let ndim = read_u32(take(4, "ndim")?) as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Format(format!("unsupported PFT rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(take(4, "dims")?) as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("PFT dims overflow".into()))?;
        let raw = take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::Format("PFT dims overflow".into()))?,
            "data",
        )?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after PFT data", cursor.len())));
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Tensor { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl From<&ImagePatch> for Tensor {
    fn from(p: &ImagePatch) -> Self {
        let s = p.shape();
        Tensor {
            dims: vec![s.channels, s.height, s.width],
            data: p.data().to_vec(),
        }
    }
}

impl TryFrom<Tensor> for ImagePatch {
    type Error = Error;
    fn try_from(t: Tensor) -> Result<Self> {
        let shape = match t.dims.as_slice() {
            &[c, h, w] => Shape::new(c, h, w),
            &[h, w] => Shape::new(1, h, w),
            d => return Err(Error::Format(format!("expected a 2-d or 3-d image tensor, got dims {d:?}"))),
        };
        if shape.is_empty() {
            return Err(Error::Format(format!("image tensor has a zero dimension: {shape}")));
        }
        ImagePatch::new(shape, t.data)
    }
}

/// Writes `patch` as a rank-3 PFT file.
pub fn save_tensor(path: impl AsRef<Path>, patch: &ImagePatch) -> Result<()> {
    Tensor::from(patch).write(path)
}

/// Reads a PFT image; rank-2 files load as single-channel images.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<ImagePatch> {
    ImagePatch::try_from(Tensor::read(path)?)
}

/// PNG import: grayscale loads as one channel, anything with color as RGB.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImagePatch> {
    let img = ::image::open(path.as_ref()).map_err(|e| Error::Format(format!("png: {e}")))?;
    let color = img.color();
    if color.has_color() {
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let shape = Shape::new(3, h, w);
        Ok(ImagePatch::from_fn(shape, |c, y, x| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        }))
    } else {
        let gray = img.to_luma8();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        Ok(ImagePatch::from_fn(Shape::new(1, h, w), |_, y, x| {
            gray.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
        }))
    }
}

/// PNG export for visualization. One channel writes grayscale; two or three
/// channels write RGB (missing channels are zero). Values are clamped to
/// `[0, 1]`.
pub fn save_png(path: impl AsRef<Path>, patch: &ImagePatch) -> Result<()> {
    let (h, w) = (patch.height() as u32, patch.width() as u32);
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let res = match patch.channels() {
        1 => ::image::GrayImage::from_fn(w, h, |x, y| {
            ::image::Luma([q(patch.get(0, y as usize, x as usize))])
        })
        .save(path.as_ref()),
        2 | 3 => ::image::RgbImage::from_fn(w, h, |x, y| {
            let px = |c: usize| {
                if c < patch.channels() {
                    q(patch.get(c, y as usize, x as usize))
                } else {
                    0
                }
            };
            ::image::Rgb([px(0), px(1), px(2)])
        })
        .save(path.as_ref()),
        c => return Err(param_err!("png export supports 1 to 3 channels, got {c}")),
    };
    res.map_err(|e| Error::Format(format!("png: {e}")))
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Loads PNG or PFT by file extension.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImagePatch> {
    let path = path.as_ref();
    if is_png(path) {
        load_png(path)
    } else {
        load_tensor(path)
    }
}

/// Saves PNG or PFT by file extension.
pub fn save_image(path: impl AsRef<Path>, patch: &ImagePatch) -> Result<()> {
    let path = path.as_ref();
    if is_png(path) {
        save_png(path, patch)
    } else {
        save_tensor(path, patch)
    }
}
