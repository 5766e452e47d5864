//! Image folders, train/validation manifests and the per-epoch sample stream.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::imageops::{self, FilterType};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt, CorruptedSample, CorruptionSpec};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{mix, mix3, stream};

pub const DEFAULT_TARGET_SIZE: usize = 256;
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Streams smaller than this keep decoded images in memory.
pub const DEFAULT_CACHE_LIMIT: usize = 4096;

const STREAM_SPLIT: u64 = 10;
const STREAM_ORDER: u64 = 11;
const STREAM_PICK: u64 = 12;

/// Decode, center-crop to a square, resize bilinearly to `target_size` and
/// map bytes to [-1, 1].
pub fn load_and_normalize(path: &Path, target_size: usize) -> Result<ImageTensor> {
    if target_size == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let img = image::ImageReader::new(std::io::BufReader::new(file))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image { path: path.into(), source })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let square = imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let t = target_size as u32;
    let resized = if side == t { square } else { imageops::resize(&square, t, t, FilterType::Triangle) };
    Ok(ImageTensor::from_rgb8(&resized))
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_count: usize,
    pub val_count: usize,
}

/// Ordered entries: the first `train_count` are training images, the next
/// `val_count` validation images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<PathBuf>,
    pub target_size: usize,
    pub split: Split,
    pub seed: u64,
}

impl DatasetManifest {
    /// All of `paths`, in the given order, as training entries.
    pub fn training_only(paths: Vec<PathBuf>, target_size: usize) -> Self {
        let split = Split { train_count: paths.len(), val_count: 0 };
        Self { entries: paths, target_size, split, seed: 0 }
    }

    pub fn with_target_size(mut self, target_size: usize) -> Self {
        self.target_size = target_size;
        self
    }

    pub fn train(&self) -> &[PathBuf] {
        &self.entries[..self.split.train_count]
    }

    pub fn val(&self) -> &[PathBuf] {
        let start = self.split.train_count;
        &self.entries[start..start + self.split.val_count]
    }

    pub fn validate(&self) -> Result<()> {
        if self.split.train_count + self.split.val_count > self.entries.len() {
            return Err(Error::invalid(format!(
                "split {}+{} exceeds {} entries",
                self.split.train_count,
                self.split.val_count,
                self.entries.len()
            )));
        }
        if self.target_size == 0 {
            return Err(Error::invalid("target size must be positive"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Shuffle `paths` (after sorting, so input order is irrelevant) and take a
/// disjoint train/validation split.
pub fn split_manifest(paths: &[PathBuf], train_count: usize, val_count: usize, seed: u64) -> Result<DatasetManifest> {
    let needed = train_count + val_count;
    if needed > paths.len() {
        return Err(Error::invalid(format!("split needs {needed} images, only {} available", paths.len())));
    }
    let mut entries = paths.to_vec();
    entries.sort();
    entries.shuffle(&mut stream(seed, STREAM_SPLIT));
    entries.truncate(needed);
    Ok(DatasetManifest {
        entries,
        target_size: DEFAULT_TARGET_SIZE,
        split: Split { train_count, val_count },
        seed,
    })
}

/// Distribution over corruption specs. Each draw picks one template
/// uniformly and replaces its seed with one derived from the sample's
/// coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecSampler {
    pub templates: Vec<CorruptionSpec>,
    /// Reuse the same corruption of an entry in every epoch.
    #[serde(default)]
    pub frozen: bool,
}

impl SpecSampler {
    pub fn single(spec: CorruptionSpec) -> Self {
        Self { templates: vec![spec], frozen: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::invalid("corruption sampler has no templates"));
        }
        self.templates.iter().try_for_each(CorruptionSpec::validate)
    }

    pub fn needs_donor(&self) -> bool {
        self.templates.iter().any(|t| t.kind.needs_donor())
    }

    /// Every template supports the point loss.
    pub fn supports_point_loss(&self) -> bool {
        self.templates.iter().all(|t| t.kind.supports_point_loss())
    }

    pub fn draw(&self, epoch_seed: u64, epoch: u64, entry: usize) -> CorruptionSpec {
        let seed = if self.frozen { mix(epoch_seed, entry as u64) } else { mix3(epoch_seed, epoch, entry as u64) };
        let pick = if self.templates.len() == 1 { 0 } else { stream(seed, STREAM_PICK).random_range(0..self.templates.len()) };
        self.templates[pick].with_seed(seed)
    }
}

/// Deterministic source of training pairs: sample content depends only on
/// `(epoch_seed, epoch, entry)`.
pub struct SampleStream {
    manifest: DatasetManifest,
    sampler: SpecSampler,
    donors: Vec<PathBuf>,
    epoch_seed: u64,
    cache: Option<Vec<OnceLock<ImageTensor>>>,
    donor_cache: Option<Vec<OnceLock<ImageTensor>>>,
}

pub fn sample_stream(
    manifest: DatasetManifest,
    sampler: SpecSampler,
    donor_manifest: Option<&DatasetManifest>,
    epoch_seed: u64,
) -> Result<SampleStream> {
    manifest.validate()?;
    sampler.validate()?;
    if manifest.split.train_count == 0 {
        return Err(Error::invalid("manifest has no training entries"));
    }
    let donors = match (sampler.needs_donor(), donor_manifest) {
        (true, Some(d)) if !d.entries.is_empty() => d.entries.clone(),
        (true, _) => return Err(Error::invalid("cluttered-block corruption needs a non-empty donor manifest")),
        (false, Some(_)) => return Err(Error::invalid("a donor manifest is only used by cluttered-block corruption")),
        (false, None) => Vec::new(),
    };
    let cells = |n: usize| (n <= DEFAULT_CACHE_LIMIT).then(|| (0..n).map(|_| OnceLock::new()).collect());
    Ok(SampleStream {
        cache: cells(manifest.split.train_count),
        donor_cache: cells(donors.len()),
        manifest,
        sampler,
        donors,
        epoch_seed,
    })
}

fn cached(cells: Option<&Vec<OnceLock<ImageTensor>>>, i: usize, load: impl FnOnce() -> Result<ImageTensor>) -> Result<ImageTensor> {
    match cells {
        Some(c) => {
            if let Some(img) = c[i].get() {
                return Ok(img.clone());
            }
            let img = load()?;
            Ok(c[i].get_or_init(|| img).clone())
        }
        None => load(),
    }
}

impl SampleStream {
    pub fn len(&self) -> usize {
        self.manifest.split.train_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn sampler(&self) -> &SpecSampler {
        &self.sampler
    }

    pub fn set_cache(&mut self, enabled: bool) {
        let cells = |n: usize| enabled.then(|| (0..n).map(|_| OnceLock::new()).collect());
        self.cache = cells(self.len());
        self.donor_cache = cells(self.donors.len());
    }

    /// Normalized training image `entry`.
    pub fn image(&self, entry: usize) -> Result<ImageTensor> {
        let path = &self.manifest.train()[entry];
        cached(self.cache.as_ref(), entry, || load_and_normalize(path, self.manifest.target_size))
    }

    /// Entry visited at `position` of `epoch`.
    pub fn entry_at(&self, epoch: u64, position: usize) -> usize {
        self.order(epoch)[position]
    }

    fn order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream(mix(self.epoch_seed, epoch), STREAM_ORDER));
        order
    }

    /// Corruption of training entry `entry` in `epoch`.
    pub fn sample_entry(&self, epoch: u64, entry: usize) -> Result<CorruptedSample> {
        let real = self.image(entry)?;
        let spec = self.sampler.draw(self.epoch_seed, epoch, entry);
        let donor = if spec.kind.needs_donor() {
            let i = stream(spec.seed, STREAM_PICK).random_range(0..self.donors.len());
            let path = &self.donors[i];
            Some(cached(self.donor_cache.as_ref(), i, || load_and_normalize(path, self.manifest.target_size))?)
        } else {
            None
        };
        corrupt(&real, &spec, donor.as_ref())
    }

    pub fn sample(&self, epoch: u64, position: usize) -> Result<CorruptedSample> {
        self.sample_entry(epoch, self.entry_at(epoch, position))
    }

    /// All training entries of `epoch`, each exactly once, in shuffled order.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<CorruptedSample>> + '_ {
        self.order(epoch).into_iter().map(move |entry| self.sample_entry(epoch, entry))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::CorruptionKind;
    use image::{Rgb, RgbImage};

    fn write(dir: &Path, name: &str, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> PathBuf {
        let path = dir.join(name);
        RgbImage::from_fn(w, h, |x, y| Rgb(f(x, y))).save(&path).unwrap();
        path
    }

    #[test]
    fn resize_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "big.png", 512, 512, |x, _| [(x / 2) as u8, 0, 255]);
        let img = load_and_normalize(&p, 256).unwrap();
        assert_eq!(img.dims(), (256, 256));
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let black = write(dir.path(), "black.png", 40, 30, |_, _| [0; 3]);
        assert!(load_and_normalize(&black, 16).unwrap().data().iter().all(|&v| v == -1.0));
        let white = write(dir.path(), "white.png", 30, 40, |_, _| [255; 3]);
        assert!(load_and_normalize(&white, 16).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_square_is_center_cropped() {
        let dir = tempfile::tempdir().unwrap();
        // left and right thirds red, middle green
        let p = write(dir.path(), "wide.png", 90, 30, |x, _| if (30..60).contains(&x) { [0, 255, 0] } else { [255, 0, 0] });
        let img = load_and_normalize(&p, 30).unwrap();
        assert!(img.plane(0).iter().all(|&v| v == -1.0));
        assert!(img.plane(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unreadable_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.png");
        std::fs::write(&p, b"not a png").unwrap();
        let msg = load_and_normalize(&p, 8).unwrap_err().to_string();
        assert!(msg.contains("broken.png"), "{msg}");
        let missing = load_and_normalize(&dir.path().join("nope.jpg"), 8).unwrap_err().to_string();
        assert!(missing.contains("nope.jpg"));
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let paths: Vec<PathBuf> = (0..10).map(|i| PathBuf::from(format!("img{i}.png"))).collect();
        let a = split_manifest(&paths, 8, 2, 3).unwrap();
        let mut reversed = paths.clone();
        reversed.reverse();
        let b = split_manifest(&reversed, 8, 2, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train().len(), 8);
        assert_eq!(a.val().len(), 2);
        assert!(a.val().iter().all(|v| !a.train().contains(v)));
        assert!(split_manifest(&paths, 8, 3, 3).is_err());
    }

    #[test]
    fn stream_covers_epoch_and_repeats() {
        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<PathBuf> =
            (0..5).map(|i| write(dir.path(), &format!("{i}.png"), 16, 16, move |x, y| [(x * 9 + i) as u8, (y * 7) as u8, 40])).collect();
        let manifest = DatasetManifest::training_only(paths, 16);
        let sampler = SpecSampler::single(CorruptionSpec::points(CorruptionKind::UniformPointsWhite, 0.3, 0));
        let s = sample_stream(manifest.clone(), sampler.clone(), None, 9).unwrap();
        let first: Vec<CorruptedSample> = s.epoch(0).map(Result::unwrap).collect();
        assert_eq!(first.len(), 5);
        let mut reals: Vec<Vec<f32>> = first.iter().map(|c| c.real.data().to_vec()).collect();
        reals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        reals.dedup();
        assert_eq!(reals.len(), 5);
        let again = sample_stream(manifest.clone(), sampler.clone(), None, 9).unwrap();
        assert_eq!(first, again.epoch(0).map(Result::unwrap).collect::<Vec<_>>());
        let e = s.entry_at(0, 0);
        assert_ne!(s.sample_entry(0, e).unwrap().mask, s.sample_entry(1, e).unwrap().mask);
        let frozen = sample_stream(manifest, SpecSampler { frozen: true, ..sampler }, None, 9).unwrap();
        assert_eq!(frozen.sample_entry(0, e).unwrap(), frozen.sample_entry(1, e).unwrap());
    }

    #[test]
    fn donor_presence_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.png", 32, 32, |x, y| [x as u8 * 8, y as u8 * 8, 0]);
        let d = write(dir.path(), "d.png", 32, 32, |_, _| [10, 200, 30]);
        let manifest = DatasetManifest::training_only(vec![p], 32);
        let donors = DatasetManifest::training_only(vec![d], 32);
        let clutter = SpecSampler::single(CorruptionSpec::block(CorruptionKind::ClutterColorBlock, 16, 0));
        assert!(sample_stream(manifest.clone(), clutter.clone(), None, 0).is_err());
        let s = sample_stream(manifest.clone(), clutter, Some(&donors), 0).unwrap();
        let c = s.sample(0, 0).unwrap();
        let replaced = c.mask.bits().iter().filter(|b| !**b).count();
        assert!(replaced >= 16 * 16);
        let white = SpecSampler::single(CorruptionSpec::points(CorruptionKind::UniformPointsWhite, 1.0, 0));
        assert!(sample_stream(manifest.clone(), white.clone(), Some(&donors), 0).is_err());
        let s = sample_stream(manifest, white, None, 0).unwrap();
        let c = s.sample(0, 0).unwrap();
        assert_eq!(c.source, c.real);
    }
}
