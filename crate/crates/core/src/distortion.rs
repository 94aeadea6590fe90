//! The degradation function: white Gaussian noise, directional motion blur,
//! area downsampling and part-aware cutout, composed in that fixed order.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, CHANNELS};

#[derive(Debug, Error, PartialEq)]
pub enum DistortionError {
    #[error("noise sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("blur kernel size {0} outside 1..=64")]
    Eta(usize),
    #[error("blur angle {0} outside [0, 180)")]
    Angle(f64),
    #[error("downsample rate {0} outside (0, 1]")]
    Rate(f64),
    #[error("downsampling {height}x{width} by {rate} leaves an empty image")]
    Vanishes { height: usize, width: usize, rate: f64 },
    #[error("cutout ratio must be positive, got {0}")]
    Delta(f64),
    #[error("cutout mask of {0} pixels is smaller than one pixel")]
    MaskTooSmall(f64),
    #[error("cutout count must be at least 1")]
    Count,
    #[error("parts-anchored cutout needs at least one part location")]
    NoParts,
    #[error("invalid region: {0}")]
    Region(String),
    #[error("distortion spec selects no distortion")]
    EmptySpec,
    #[error("{name} = {value} outside configured range [{lo}, {hi}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistortionKind {
    Noise,
    Blur,
    Downsample,
    Cutout,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 4] = [
        DistortionKind::Noise,
        DistortionKind::Blur,
        DistortionKind::Downsample,
        DistortionKind::Cutout,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurParams {
    pub eta: usize,
    /// Degrees, counter-clockwise from the +x axis.
    pub angle: f64,
}

/// A parameter is `Some` exactly when its distortion is selected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub sigma: Option<f64>,
    pub blur: Option<BlurParams>,
    pub lambda_rate: Option<f64>,
    pub delta: Option<f64>,
}

impl DistortionSpec {
    pub fn kinds(&self) -> Vec<DistortionKind> {
        let mut out = Vec::new();
        if self.sigma.is_some() {
            out.push(DistortionKind::Noise);
        }
        if self.blur.is_some() {
            out.push(DistortionKind::Blur);
        }
        if self.lambda_rate.is_some() {
            out.push(DistortionKind::Downsample);
        }
        if self.delta.is_some() {
            out.push(DistortionKind::Cutout);
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.kinds().is_empty()
    }

    /// Checks every present parameter against `ranges`.
    pub fn validate(&self, ranges: &DistortionRanges) -> Result<(), DistortionError> {
        if self.is_empty() {
            return Err(DistortionError::EmptySpec);
        }
        let check = |name, value: f64, (lo, hi): (f64, f64)| {
            if value < lo || value > hi || value.is_nan() {
                Err(DistortionError::OutOfRange { name, value, lo, hi })
            } else {
                Ok(())
            }
        };
        if let Some(s) = self.sigma {
            check("sigma", s, ranges.sigma)?;
        }
        if let Some(b) = self.blur {
            check("eta", b.eta as f64, (ranges.eta.0 as f64, ranges.eta.1 as f64))?;
            if !(0.0..180.0).contains(&b.angle) {
                return Err(DistortionError::Angle(b.angle));
            }
        }
        if let Some(l) = self.lambda_rate {
            check("lambda", l, ranges.lambda_rate)?;
        }
        if let Some(d) = self.delta {
            check("delta", d, ranges.delta)?;
        }
        Ok(())
    }
}

/// Sampling ranges for each distortion strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistortionRanges {
    pub sigma: (f64, f64),
    pub eta: (usize, usize),
    pub lambda_rate: (f64, f64),
    pub delta: (f64, f64),
}

impl Default for DistortionRanges {
    fn default() -> Self {
        Self {
            sigma: (0.1, 0.2),
            eta: (5, 14),
            lambda_rate: (0.4, 0.7),
            delta: (0.02, 0.06),
        }
    }
}

impl DistortionRanges {
    pub fn validate(&self) -> Result<(), DistortionError> {
        let ordered = |name, lo: f64, hi: f64| {
            if lo <= hi {
                Ok(())
            } else {
                Err(DistortionError::OutOfRange { name, value: lo, lo, hi })
            }
        };
        ordered("sigma", self.sigma.0, self.sigma.1)?;
        ordered("eta", self.eta.0 as f64, self.eta.1 as f64)?;
        ordered("lambda", self.lambda_rate.0, self.lambda_rate.1)?;
        ordered("delta", self.delta.0, self.delta.1)?;
        if self.sigma.0 <= 0.0 {
            return Err(DistortionError::Sigma(self.sigma.0));
        }
        if self.eta.0 < 1 || self.eta.1 > MAX_ETA {
            return Err(DistortionError::Eta(if self.eta.0 < 1 { self.eta.0 } else { self.eta.1 }));
        }
        if self.lambda_rate.0 <= 0.0 || self.lambda_rate.1 > 1.0 {
            return Err(DistortionError::Rate(self.lambda_rate.0));
        }
        if self.delta.0 <= 0.0 {
            return Err(DistortionError::Delta(self.delta.0));
        }
        Ok(())
    }
}

const MAX_ETA: usize = 64;

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartPoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

/// Object bounding box plus optional named part locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub bbox: Rect,
    #[serde(default)]
    pub parts: Vec<PartPoint>,
}

impl RegionAnnotation {
    pub fn full_image(img: &Image) -> Self {
        Self {
            bbox: Rect {
                x: 0.0,
                y: 0.0,
                w: img.width() as f64,
                h: img.height() as f64,
            },
            parts: Vec::new(),
        }
    }

    pub fn validate(&self, img: &Image) -> Result<(), DistortionError> {
        let b = self.bbox;
        let eps = 1e-6;
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(DistortionError::Region(format!("bbox {b:?} has no area")));
        }
        if b.x < -eps
            || b.y < -eps
            || b.x + b.w > img.width() as f64 + eps
            || b.y + b.h > img.height() as f64 + eps
        {
            return Err(DistortionError::Region(format!(
                "bbox {b:?} exceeds {}x{} image",
                img.height(),
                img.width()
            )));
        }
        for p in &self.parts {
            if p.x < b.x - eps || p.x > b.x + b.w + eps || p.y < b.y - eps || p.y > b.y + b.h + eps {
                return Err(DistortionError::Region(format!("part {:?} lies outside bbox", p.name)));
            }
        }
        Ok(())
    }

    fn scaled(&self, sy: f64, sx: f64) -> Self {
        Self {
            bbox: Rect {
                x: self.bbox.x * sx,
                y: self.bbox.y * sy,
                w: self.bbox.w * sx,
                h: self.bbox.h * sy,
            },
            parts: self
                .parts
                .iter()
                .map(|p| PartPoint {
                    name: p.name.clone(),
                    x: p.x * sx,
                    y: p.y * sy,
                })
                .collect(),
        }
    }
}

/// Adds i.i.d. `N(0, sigma²)` noise to every channel and clamps to `[0, 1]`.
pub fn white_noise<R: Rng + ?Sized>(img: &Image, sigma: f64, rng: &mut R) -> Result<Image, DistortionError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DistortionError::Sigma(sigma));
    }
    let normal = Normal::new(0.0, sigma).map_err(|_| DistortionError::Sigma(sigma))?;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Square `size`x`size` convolution kernel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }
}

/// Directional Gaussian: `eta` taps along a line through the kernel centre
/// at `angle` degrees, tap weights `exp(-t²/2s²)` with `s = eta/3`,
/// bilinearly splatted onto the grid and normalized to unit sum.
pub fn motion_blur_kernel(eta: usize, angle: f64) -> Result<Kernel, DistortionError> {
    if eta == 0 || eta > MAX_ETA {
        return Err(DistortionError::Eta(eta));
    }
    if !(0.0..180.0).contains(&angle) {
        return Err(DistortionError::Angle(angle));
    }
    let size = eta;
    let centre = (eta as f64 - 1.0) / 2.0;
    let s = eta as f64 / 3.0;
    let (sin, cos) = angle.to_radians().sin_cos();
    let mut weights = vec![0.0; size * size];
    for j in 0..eta {
        let t = j as f64 - centre;
        let g = (-t * t / (2.0 * s * s)).exp();
        let px = (centre + t * cos).clamp(0.0, (size - 1) as f64);
        let py = (centre - t * sin).clamp(0.0, (size - 1) as f64);
        let (x0, y0) = (px.floor() as usize, py.floor() as usize);
        let (fx, fy) = (px - x0 as f64, py - y0 as f64);
        let x1 = (x0 + 1).min(size - 1);
        let y1 = (y0 + 1).min(size - 1);
        weights[y0 * size + x0] += g * (1.0 - fx) * (1.0 - fy);
        weights[y0 * size + x1] += g * fx * (1.0 - fy);
        weights[y1 * size + x0] += g * (1.0 - fx) * fy;
        weights[y1 * size + x1] += g * fx * fy;
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(Kernel { size, weights })
}

/// Convolves every channel with the same kernel, replicating edges.
pub fn convolve(img: &Image, kernel: &Kernel) -> Image {
    let offset = (kernel.size as isize - 1) / 2;
    let taps: Vec<(isize, isize, f64)> = (0..kernel.size)
        .flat_map(|r| (0..kernel.size).map(move |c| (r, c)))
        .filter_map(|(r, c)| {
            let w = kernel.at(r, c);
            (w != 0.0).then_some((r as isize - offset, c as isize - offset, w))
        })
        .collect();
    let mut out = Image::filled(img.height(), img.width(), 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let mut acc = [0.0; CHANNELS];
            for &(dy, dx, w) in &taps {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += w * img.get_clamped(y as isize + dy, x as isize + dx, c);
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out.set(y, x, c, a.clamp(0.0, 1.0));
            }
        }
    }
    out
}

pub fn motion_blur(img: &Image, eta: usize, angle: f64) -> Result<Image, DistortionError> {
    let kernel = motion_blur_kernel(eta, angle)?;
    Ok(convolve(img, &kernel))
}

/// Output size `(round(h·√λ), round(w·√λ))`.
pub fn downsampled_size(height: usize, width: usize, rate: f64) -> Result<(usize, usize), DistortionError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(DistortionError::Rate(rate));
    }
    let k = rate.sqrt();
    let oh = (height as f64 * k).round() as usize;
    let ow = (width as f64 * k).round() as usize;
    if oh == 0 || ow == 0 {
        return Err(DistortionError::Vanishes { height, width, rate });
    }
    Ok((oh, ow))
}

/// Bilinear downsampling to an area ratio of `rate`. The result is not
/// scaled back up.
pub fn downsample(img: &Image, rate: f64) -> Result<Image, DistortionError> {
    let (oh, ow) = downsampled_size(img.height(), img.width(), rate)?;
    Ok(img.resize(oh, ow))
}

/// How cutout chooses its mask anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CutoutMode {
    /// Random distinct annotated part locations.
    Parts { count: usize },
    /// Random distinct picks among centre/left/right/top/bottom of the bbox.
    Landmarks { count: usize },
}

impl CutoutMode {
    /// Three parts when part annotations exist, otherwise four bbox
    /// landmarks.
    pub fn for_region(region: &RegionAnnotation) -> Self {
        if region.parts.is_empty() {
            CutoutMode::Landmarks { count: 4 }
        } else {
            CutoutMode::Parts { count: 3 }
        }
    }
}

/// Zeroed rectangle, half-open pixel ranges after clipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl MaskRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Debug, Clone)]
pub struct CutoutResult {
    pub image: Image,
    pub masks: Vec<MaskRect>,
}

/// Zero masks shaped like the bbox (same aspect ratio) with area
/// `delta · bbox_area`, centred on randomly chosen anchors.
pub fn cutout<R: Rng + ?Sized>(
    img: &Image,
    region: &RegionAnnotation,
    delta: f64,
    mode: CutoutMode,
    rng: &mut R,
) -> Result<CutoutResult, DistortionError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(DistortionError::Delta(delta));
    }
    region.validate(img)?;
    let b = region.bbox;
    let mask_area = delta * b.w * b.h;
    if mask_area < 1.0 {
        return Err(DistortionError::MaskTooSmall(mask_area));
    }
    let k = delta.sqrt();
    let mw = (b.w * k).round().max(1.0);
    let mh = (b.h * k).round().max(1.0);

    let anchors: Vec<(f64, f64)> = match mode {
        CutoutMode::Parts { count } => {
            if count == 0 {
                return Err(DistortionError::Count);
            }
            if region.parts.is_empty() {
                return Err(DistortionError::NoParts);
            }
            let n = count.min(region.parts.len());
            index::sample(rng, region.parts.len(), n)
                .into_iter()
                .map(|i| (region.parts[i].x, region.parts[i].y))
                .collect()
        }
        CutoutMode::Landmarks { count } => {
            if count == 0 {
                return Err(DistortionError::Count);
            }
            let (cx, cy) = (b.x + b.w / 2.0, b.y + b.h / 2.0);
            let landmarks = [
                (cx, cy),
                (b.x + mw / 2.0, cy),
                (b.x + b.w - mw / 2.0, cy),
                (cx, b.y + mh / 2.0),
                (cx, b.y + b.h - mh / 2.0),
            ];
            let n = count.min(landmarks.len());
            index::sample(rng, landmarks.len(), n)
                .into_iter()
                .map(|i| landmarks[i])
                .collect()
        }
    };

    let clip = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
    let mut out = img.clone();
    let mut masks = Vec::with_capacity(anchors.len());
    for (ax, ay) in anchors {
        let rect = MaskRect {
            x0: clip(ax - mw / 2.0, img.width()),
            y0: clip(ay - mh / 2.0, img.height()),
            x1: clip(ax - mw / 2.0 + mw, img.width()),
            y1: clip(ay - mh / 2.0 + mh, img.height()),
        };
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                for c in 0..CHANNELS {
                    out.set(y, x, c, 0.0);
                }
            }
        }
        masks.push(rect);
    }
    Ok(CutoutResult { image: out, masks })
}

/// Applies the selected distortions in the order noise, blur, downsample,
/// cutout. Region coordinates follow the image through downsampling.
pub fn apply<R: Rng + ?Sized>(
    img: &Image,
    spec: &DistortionSpec,
    region: &RegionAnnotation,
    rng: &mut R,
) -> Result<Image, DistortionError> {
    if spec.is_empty() {
        return Err(DistortionError::EmptySpec);
    }
    region.validate(img)?;
    let mut cur = img.clone();
    let mut region = region.clone();
    if let Some(sigma) = spec.sigma {
        cur = white_noise(&cur, sigma, rng)?;
    }
    if let Some(b) = spec.blur {
        cur = motion_blur(&cur, b.eta, b.angle)?;
    }
    if let Some(rate) = spec.lambda_rate {
        let next = downsample(&cur, rate)?;
        let sy = next.height() as f64 / cur.height() as f64;
        let sx = next.width() as f64 / cur.width() as f64;
        region = region.scaled(sy, sx);
        cur = next;
    }
    if let Some(delta) = spec.delta {
        cur = cutout(&cur, &region, delta, CutoutMode::for_region(&region), rng)?.image;
    }
    Ok(cur)
}

/// Uniform non-empty subset of distortions, each strength uniform in its
/// range and the blur direction uniform in `[0, 180)`.
pub fn sample_spec<R: Rng + ?Sized>(ranges: &DistortionRanges, rng: &mut R) -> DistortionSpec {
    let mask: u8 = rng.random_range(1..16);
    let mut uniform = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let sigma = (mask & 1 != 0).then(|| uniform(ranges.sigma));
    let lambda_rate = (mask & 4 != 0).then(|| uniform(ranges.lambda_rate));
    let delta = (mask & 8 != 0).then(|| uniform(ranges.delta));
    let blur = (mask & 2 != 0).then(|| BlurParams {
        eta: rng.random_range(ranges.eta.0..=ranges.eta.1),
        angle: rng.random_range(0.0..180.0),
    });
    DistortionSpec {
        sigma,
        blur,
        lambda_rate,
        delta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| ((y * 31 + x * 17 + c * 7) % 97) as f64 / 96.0)
    }

    #[test]
    fn tiny_sigma_is_near_identity() {
        let img = gradient_image(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = white_noise(&img, 1e-12, &mut rng).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(white_noise(&img, 0.0, &mut rng), Err(DistortionError::Sigma(0.0)));
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let img = gradient_image(8, 8);
        let a = white_noise(&img, 0.15, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = white_noise(&img, 0.15, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kernel_is_normalized_and_nonnegative() {
        for eta in 5..=14 {
            for angle in [0.0, 17.0, 45.0, 90.0, 133.3, 179.9] {
                let k = motion_blur_kernel(eta, angle).unwrap();
                let sum: f64 = k.weights.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(k.weights.iter().all(|&w| w >= 0.0));
            }
        }
        assert_eq!(motion_blur_kernel(0, 0.0), Err(DistortionError::Eta(0)));
        assert_eq!(motion_blur_kernel(5, 180.0), Err(DistortionError::Angle(180.0)));
    }

    #[test]
    fn blur_keeps_constant_images() {
        let img = Image::filled(12, 10, 0.42);
        let out = motion_blur(&img, 9, 30.0).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn downsample_sizes() {
        assert_eq!(downsampled_size(448, 448, 0.44).unwrap(), (297, 297));
        assert!(matches!(downsample(&Image::filled(2, 2, 0.0), 0.01), Err(DistortionError::Vanishes { .. })));
        assert_eq!(downsampled_size(4, 4, 1.5), Err(DistortionError::Rate(1.5)));
        let c = downsample(&Image::filled(31, 17, 0.7), 0.55).unwrap();
        assert!(c.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn unit_rate_is_identity() {
        let img = gradient_image(9, 13);
        let out = downsample(&img, 1.0).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn region() -> RegionAnnotation {
        RegionAnnotation {
            bbox: Rect { x: 8.0, y: 6.0, w: 40.0, h: 30.0 },
            parts: ["beak", "crown", "tail", "wing", "breast"]
                .iter()
                .enumerate()
                .map(|(i, n)| PartPoint {
                    name: n.to_string(),
                    x: 10.0 + 8.0 * i as f64,
                    y: 8.0 + 5.0 * i as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn cutout_errors() {
        let img = Image::filled(48, 64, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut r = region();
        assert_eq!(
            cutout(&img, &r, 0.0, CutoutMode::Parts { count: 3 }, &mut rng).unwrap_err(),
            DistortionError::Delta(0.0)
        );
        assert!(matches!(
            cutout(&img, &r, 1e-4, CutoutMode::Parts { count: 3 }, &mut rng),
            Err(DistortionError::MaskTooSmall(_))
        ));
        r.parts.clear();
        assert_eq!(
            cutout(&img, &r, 0.04, CutoutMode::Parts { count: 3 }, &mut rng).unwrap_err(),
            DistortionError::NoParts
        );
        r.bbox.w = 100.0;
        assert!(matches!(
            cutout(&img, &r, 0.04, CutoutMode::Landmarks { count: 4 }, &mut rng),
            Err(DistortionError::Region(_))
        ));
    }

    #[test]
    fn minimal_mask_zeroes_at_most_count_pixels() {
        let img = Image::filled(48, 64, 1.0);
        let r = region();
        let delta = 1.0 / (40.0 * 30.0);
        let res = cutout(&img, &r, delta, CutoutMode::Parts { count: 3 }, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let zeroed = (0..48)
            .flat_map(|y| (0..64).map(move |x| (y, x)))
            .filter(|&(y, x)| res.image.get(y, x, 0) == 0.0)
            .count();
        assert!((1..=3).contains(&zeroed), "{zeroed}");
    }

    #[test]
    fn cutout_masks_are_seeded() {
        let img = Image::filled(48, 64, 1.0);
        let r = region();
        let run = |seed| {
            cutout(&img, &r, 0.04, CutoutMode::Parts { count: 3 }, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap()
                .masks
        };
        assert_eq!(run(3), run(3));
        // 40x30 bbox at delta 0.04 gives an 8x6 mask.
        for m in run(3) {
            assert!(m.x1 - m.x0 <= 8 && m.y1 - m.y0 <= 6);
        }
    }

    #[test]
    fn apply_single_kind_matches_direct_call() {
        let img = gradient_image(20, 24);
        let r = RegionAnnotation::full_image(&img);
        let spec = DistortionSpec { sigma: Some(0.12), ..Default::default() };
        let a = apply(&img, &spec, &r, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = white_noise(&img, 0.12, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let spec = DistortionSpec { lambda_rate: Some(0.5), ..Default::default() };
        assert_eq!(apply(&img, &spec, &r, &mut ChaCha8Rng::seed_from_u64(4)).unwrap(), downsample(&img, 0.5).unwrap());
        assert_eq!(
            apply(&img, &DistortionSpec::default(), &r, &mut ChaCha8Rng::seed_from_u64(4)),
            Err(DistortionError::EmptySpec)
        );
    }

    #[test]
    fn spec_validation_against_ranges() {
        let ranges = DistortionRanges::default();
        let ok = DistortionSpec {
            sigma: Some(0.15),
            blur: Some(BlurParams { eta: 5, angle: 10.0 }),
            lambda_rate: Some(0.49),
            delta: Some(0.03),
        };
        assert!(ok.validate(&ranges).is_ok());
        let bad = DistortionSpec { sigma: Some(0.3), ..Default::default() };
        assert!(matches!(bad.validate(&ranges), Err(DistortionError::OutOfRange { name: "sigma", .. })));
        let bad = DistortionSpec { blur: Some(BlurParams { eta: 15, angle: 0.0 }), ..Default::default() };
        assert!(bad.validate(&ranges).is_err());
    }

    #[test]
    fn collapsed_delta_range() {
        let ranges = DistortionRanges { delta: (0.035, 0.035), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            if let Some(d) = sample_spec(&ranges, &mut rng).delta {
                assert_eq!(d, 0.035);
            }
        }
    }
}
