//! Synthesis of corrupted inputs for the five degradation regimes.

use std::path::Path;

use rand::seq::index::sample_weighted;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Mask, WHITE};
use crate::rng::stream;

/// Smallest side of a cluttered donor block.
pub const MIN_CLUTTER_SIDE: usize = 16;

/// Relative floor added to edge magnitudes before feature sampling.
pub const EDGE_FLOOR: f32 = 0.01;

const STREAM_MASK: u64 = 1;
const STREAM_FILL: u64 = 2;
const STREAM_BLOCK: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    UniformPointsWhite,
    FeaturePointsWhite,
    UniformPointsColorNoise,
    CenterWhiteBlock,
    ClutterColorBlock,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        Self::UniformPointsWhite,
        Self::FeaturePointsWhite,
        Self::UniformPointsColorNoise,
        Self::CenterWhiteBlock,
        Self::ClutterColorBlock,
    ];

    pub fn is_point_regime(self) -> bool {
        matches!(self, Self::UniformPointsWhite | Self::FeaturePointsWhite | Self::UniformPointsColorNoise)
    }

    pub fn is_block_regime(self) -> bool {
        !self.is_point_regime()
    }

    pub fn needs_donor(self) -> bool {
        self == Self::ClutterColorBlock
    }

    /// Whether the corresponding point loss applies: white-filled regimes only.
    pub fn supports_point_loss(self) -> bool {
        matches!(self, Self::UniformPointsWhite | Self::FeaturePointsWhite | Self::CenterWhiteBlock)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::UniformPointsWhite => "uniform_points_white",
            Self::FeaturePointsWhite => "feature_points_white",
            Self::UniformPointsColorNoise => "uniform_points_color_noise",
            Self::CenterWhiteBlock => "center_white_block",
            Self::ClutterColorBlock => "clutter_color_block",
        }
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption kind `{s}`")))
    }
}

/// One degradation regime with its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn points(kind: CorruptionKind, keep_fraction: f64, seed: u64) -> Self {
        Self { kind, keep_fraction: Some(keep_fraction), block_size: None, seed }
    }

    pub fn block(kind: CorruptionKind, block_size: usize, seed: u64) -> Self {
        Self { kind, keep_fraction: None, block_size: Some(block_size), seed }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Keep fraction for point regimes, block size for block regimes.
    pub fn param(&self) -> f64 {
        match (self.keep_fraction, self.block_size) {
            (Some(k), _) => k,
            (None, Some(b)) => b as f64,
            (None, None) => f64::NAN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind;
        match (kind.is_point_regime(), self.keep_fraction, self.block_size) {
            (true, Some(k), None) => check_fraction(k),
            (true, _, _) => Err(Error::invalid(format!("{kind} needs keep_fraction and no block_size"))),
            (false, None, Some(b)) => {
                if b == 0 {
                    Err(Error::invalid("block_size must be positive"))
                } else if kind.needs_donor() && b < MIN_CLUTTER_SIDE {
                    Err(Error::invalid(format!("{kind} needs block_size >= {MIN_CLUTTER_SIDE}, got {b}")))
                } else {
                    Ok(())
                }
            }
            (false, _, _) => Err(Error::invalid(format!("{kind} needs block_size and no keep_fraction"))),
        }
    }
}

fn check_fraction(keep: f64) -> Result<()> {
    if keep > 0.0 && keep <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("keep_fraction must lie in (0, 1], got {keep}")))
    }
}

/// A corrupted source, its ground truth and the retention mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedSample {
    pub source: ImageTensor,
    pub real: ImageTensor,
    pub mask: Mask,
    pub spec: CorruptionSpec,
}

impl CorruptedSample {
    /// Write `<stem>_source.png`, `<stem>_real.png`, `<stem>_mask.png` and `<stem>_spec.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.source.save_png(&dir.join(format!("{stem}_source.png")))?;
        self.real.save_png(&dir.join(format!("{stem}_real.png")))?;
        self.mask.save_png(&dir.join(format!("{stem}_mask.png")))?;
        let spec_path = dir.join(format!("{stem}_spec.json"));
        let json = serde_json::to_string_pretty(&self.spec)?;
        std::fs::write(&spec_path, json + "\n").map_err(|e| Error::io(&spec_path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let spec_path = dir.join(format!("{stem}_spec.json"));
        let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        Ok(Self {
            source: crate::image::load_image(&dir.join(format!("{stem}_source.png")))?,
            real: crate::image::load_image(&dir.join(format!("{stem}_real.png")))?,
            mask: Mask::load_png(&dir.join(format!("{stem}_mask.png")))?,
            spec: serde_json::from_str(&text)?,
        })
    }
}

/// Keep each pixel iff an integer draw in [0, 99] is below `round(100 · keep_fraction)`.
pub fn make_uniform_mask(height: usize, width: usize, keep_fraction: f64, seed: u64) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("mask dimensions must be positive, got {height}x{width}")));
    }
    check_fraction(keep_fraction)?;
    let threshold = (100.0 * keep_fraction).round() as u32;
    let mut rng = stream(seed, STREAM_MASK);
    let bits = (0..height * width).map(|_| rng.random_range(0..100u32) < threshold).collect();
    Mask::new(height, width, bits)
}

/// Per-pixel gradient magnitude of an image's luma.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub magnitude: Vec<f32>,
}

impl EdgeMap {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.magnitude[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.magnitude.iter().copied().fold(0.0, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.magnitude.iter().map(|&v| v as f64).sum::<f64>() / self.magnitude.len() as f64
    }

    /// Mean magnitude over the kept pixels of `mask`; 0 for an empty mask.
    pub fn mean_over(&self, mask: &Mask) -> f64 {
        let (sum, n) = self
            .magnitude
            .iter()
            .zip(mask.bits())
            .filter(|(_, &b)| b)
            .fold((0.0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// 3×3 Sobel gradient magnitude of the BT.601 luma (in [0, 1]) with edge replication.
pub fn sobel_edge_map(image: &ImageTensor) -> EdgeMap {
    let (h, w) = image.dims();
    let luma = image.luma01();
    let at = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        luma[yy * w + xx]
    };
    let mut magnitude = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            magnitude.push((gx * gx + gy * gy).sqrt() as f32);
        }
    }
    EdgeMap { height: h, width: w, magnitude }
}

/// Number of pixels a feature mask keeps.
pub fn feature_point_count(height: usize, width: usize, keep_fraction: f64) -> usize {
    (keep_fraction * (height * width) as f64).round() as usize
}

/// Sample exactly `round(keep_fraction · H · W)` pixels without replacement,
/// with probability proportional to Sobel magnitude plus a floor of
/// [`EDGE_FLOOR`] × the maximum magnitude.
pub fn make_feature_mask(image: &ImageTensor, keep_fraction: f64, seed: u64) -> Result<Mask> {
    let (h, w) = image.dims();
    check_fraction(keep_fraction)?;
    let count = feature_point_count(h, w, keep_fraction);
    if count > h * w {
        return Err(Error::invalid(format!("cannot keep {count} of {} pixels", h * w)));
    }
    let edges = sobel_edge_map(image);
    let max = edges.max();
    let floor = if max > 0.0 { EDGE_FLOOR * max } else { 1.0 };
    let mut rng = stream(seed, STREAM_MASK);
    let picked = sample_weighted(&mut rng, h * w, |i| (edges.magnitude[i] + floor) as f64, count)
        .map_err(|e| Error::invalid(format!("feature sampling failed: {e}")))?;
    let mut bits = vec![false; h * w];
    for i in picked.iter() {
        bits[i] = true;
    }
    Mask::new(h, w, bits)
}

/// Apply `spec` to `real`. `donor` supplies block content for the cluttered regime.
pub fn corrupt(real: &ImageTensor, spec: &CorruptionSpec, donor: Option<&ImageTensor>) -> Result<CorruptedSample> {
    spec.validate()?;
    let (h, w) = real.dims();
    match (spec.kind.needs_donor(), donor.is_some()) {
        (true, false) => return Err(Error::invalid(format!("{} requires a donor image", spec.kind))),
        (false, true) => return Err(Error::invalid(format!("{} takes no donor image", spec.kind))),
        _ => {}
    }
    let mut source = real.clone();
    let mask = match spec.kind {
        CorruptionKind::UniformPointsWhite | CorruptionKind::UniformPointsColorNoise | CorruptionKind::FeaturePointsWhite => {
            let keep = spec.keep_fraction.expect("validated");
            let mask = if spec.kind == CorruptionKind::FeaturePointsWhite {
                make_feature_mask(real, keep, spec.seed)?
            } else {
                make_uniform_mask(h, w, keep, spec.seed)?
            };
            let mut fill_rng = stream(spec.seed, STREAM_FILL);
            for y in 0..h {
                for x in 0..w {
                    if mask.get(y, x) {
                        continue;
                    }
                    let fill = if spec.kind == CorruptionKind::UniformPointsColorNoise {
                        [0; 3].map(|_| fill_rng.random_range(-1.0f32..=1.0))
                    } else {
                        WHITE
                    };
                    source.set_pixel(y, x, fill);
                }
            }
            mask
        }
        CorruptionKind::CenterWhiteBlock => {
            let side = block_side(spec, h, w)?;
            let (top, left) = ((h - side) / 2, (w - side) / 2);
            let mut mask = Mask::filled(h, w, true);
            for y in top..top + side {
                for x in left..left + side {
                    source.set_pixel(y, x, WHITE);
                    mask.set(y, x, false);
                }
            }
            mask
        }
        CorruptionKind::ClutterColorBlock => {
            let max_side = block_side(spec, h, w)?;
            let donor = donor.expect("checked above");
            let mut rng = stream(spec.seed, STREAM_BLOCK);
            let side = rng.random_range(MIN_CLUTTER_SIDE..=max_side);
            if donor.height() < side || donor.width() < side {
                return Err(Error::invalid(format!(
                    "donor {}x{} smaller than block side {side}",
                    donor.height(),
                    donor.width()
                )));
            }
            let top = rng.random_range(0..=h - side);
            let left = rng.random_range(0..=w - side);
            let dtop = rng.random_range(0..=donor.height() - side);
            let dleft = rng.random_range(0..=donor.width() - side);
            let mut mask = Mask::filled(h, w, true);
            for y in 0..side {
                for x in 0..side {
                    source.set_pixel(top + y, left + x, donor.pixel(dtop + y, dleft + x));
                    mask.set(top + y, left + x, false);
                }
            }
            mask
        }
    };
    Ok(CorruptedSample { source, real: real.clone(), mask, spec: *spec })
}

fn block_side(spec: &CorruptionSpec, h: usize, w: usize) -> Result<usize> {
    let side = spec.block_size.expect("validated");
    if side > h.min(w) {
        return Err(Error::invalid(format!("block_size {side} exceeds image side {}", h.min(w))));
    }
    Ok(side)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(n: usize) -> ImageTensor {
        ImageTensor::from_fn(n, n, |y, x| {
            let v = (x + y) as f32 / (2 * n) as f32 * 2.0 - 1.0;
            [v, -v, 0.3]
        })
    }

    #[test]
    fn spec_validation() {
        use CorruptionKind::*;
        assert!(CorruptionSpec::points(UniformPointsWhite, 0.1, 0).validate().is_ok());
        assert!(CorruptionSpec::points(UniformPointsWhite, 0.0, 0).validate().is_err());
        assert!(CorruptionSpec::points(UniformPointsWhite, 1.5, 0).validate().is_err());
        assert!(CorruptionSpec::points(CenterWhiteBlock, 0.1, 0).validate().is_err());
        assert!(CorruptionSpec::block(UniformPointsColorNoise, 8, 0).validate().is_err());
        assert!(CorruptionSpec::block(ClutterColorBlock, 8, 0).validate().is_err());
        assert!(CorruptionSpec::block(ClutterColorBlock, 16, 0).validate().is_ok());
        let json = serde_json::to_string(&CorruptionSpec::points(FeaturePointsWhite, 0.05, 3)).unwrap();
        assert_eq!(json, r#"{"kind":"feature_points_white","keep_fraction":0.05,"seed":3}"#);
    }

    #[test]
    fn uniform_mask_full_retention_and_errors() {
        assert_eq!(make_uniform_mask(9, 7, 1.0, 3).unwrap().kept_count(), 63);
        assert!(make_uniform_mask(0, 7, 0.5, 3).is_err());
        assert!(make_uniform_mask(4, 4, 0.0, 3).is_err());
        assert!(make_uniform_mask(4, 4, 1.01, 3).is_err());
    }

    #[test]
    fn feature_mask_exact_count() {
        let img = gradient_image(20);
        for keep in [0.01, 0.05, 0.2, 0.5, 1.0] {
            let m = make_feature_mask(&img, keep, 9).unwrap();
            assert_eq!(m.kept_count(), feature_point_count(20, 20, keep));
        }
    }

    #[test]
    fn feature_mask_on_constant_image_still_samples() {
        let img = ImageTensor::filled(10, 10, [0.2, 0.2, 0.2]);
        assert_eq!(make_feature_mask(&img, 0.3, 1).unwrap().kept_count(), 30);
    }

    #[test]
    fn sobel_constant_is_zero_and_step_hits_adjacent_columns() {
        let flat = sobel_edge_map(&ImageTensor::filled(8, 8, [0.5, -0.2, 0.1]));
        assert!(flat.magnitude.iter().all(|&v| v == 0.0));

        // black for x < 4, white for x >= 4: only columns 3 and 4 respond,
        // each with |Gx| = (1 + 2 + 1) · 1.0 in luma units.
        let step = ImageTensor::from_fn(8, 8, |_, x| if x < 4 { [-1.0; 3] } else { [1.0; 3] });
        let e = sobel_edge_map(&step);
        for y in 0..8 {
            for x in 0..8 {
                let want = if x == 3 || x == 4 { 4.0 } else { 0.0 };
                assert!((e.at(y, x) - want).abs() < 1e-5, "({y},{x}) = {}", e.at(y, x));
            }
        }
    }

    #[test]
    fn center_block_geometry() {
        let img = gradient_image(256);
        let s = corrupt(&img, &CorruptionSpec::block(CorruptionKind::CenterWhiteBlock, 128, 0), None).unwrap();
        for y in 0..256 {
            for x in 0..256 {
                let inside = (64..192).contains(&y) && (64..192).contains(&x);
                assert_eq!(s.mask.get(y, x), !inside);
                if inside {
                    assert_eq!(s.source.pixel(y, x), WHITE);
                }
            }
        }
        let too_big = CorruptionSpec::block(CorruptionKind::CenterWhiteBlock, 257, 0);
        assert!(corrupt(&img, &too_big, None).is_err());
    }

    #[test]
    fn clutter_needs_donor_and_copies_it() {
        let img = gradient_image(64);
        let donor = ImageTensor::from_fn(80, 70, |y, x| [(y % 7) as f32 / 7.0, (x % 5) as f32 / 5.0, -0.5]);
        let spec = CorruptionSpec::block(CorruptionKind::ClutterColorBlock, 40, 11);
        assert!(corrupt(&img, &spec, None).is_err());
        let s = corrupt(&img, &spec, Some(&donor)).unwrap();
        let hidden = 64 * 64 - s.mask.kept_count();
        let side = (hidden as f64).sqrt() as usize;
        assert_eq!(side * side, hidden);
        assert!((MIN_CLUTTER_SIDE..=40).contains(&side));
        let white = CorruptionSpec::points(CorruptionKind::UniformPointsWhite, 0.5, 0);
        assert!(corrupt(&img, &white, Some(&donor)).is_err());
    }

    #[test]
    fn full_keep_leaves_source_untouched() {
        let img = gradient_image(16);
        for kind in [CorruptionKind::UniformPointsWhite, CorruptionKind::UniformPointsColorNoise, CorruptionKind::FeaturePointsWhite] {
            let s = corrupt(&img, &CorruptionSpec::points(kind, 1.0, 5), None).unwrap();
            assert_eq!(s.source, s.real);
        }
    }

    #[test]
    fn sample_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(12, 12, |y, x| [crate::image::normalize_byte((y * 20) as u8), crate::image::normalize_byte((x * 20) as u8), 1.0]);
        let s = corrupt(&img, &CorruptionSpec::points(CorruptionKind::UniformPointsWhite, 0.3, 2), None).unwrap();
        s.save(dir.path(), "a").unwrap();
        assert_eq!(CorruptedSample::load(dir.path(), "a").unwrap(), s);
    }
}
