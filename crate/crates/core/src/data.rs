//! Dataset container IO, stratified subsampling, seeded batching and the
//! synthetic two-blob dataset.
//!
//! A container is a directory holding:
//!
//! * `images.bin`: `"BKEI"`, u32 version, u32 count, u32 height, u32 width,
//!   then `count * height * width` u8 pixels, row-major. Pixel `p` reads as
//!   `p / 255`.
//! * `labels.bin`: `"BKEL"`, u32 version, u32 count, then one u8 per image.
//! * `classes.txt`: one class name per line, in label order.
//! * `split.json` (optional): `{seed, fraction, train: [...], test: [...]}`.
//!
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const IMAGES_MAGIC: &[u8; 4] = b"BKEI";
const LABELS_MAGIC: &[u8; 4] = b"BKEL";
const VERSION: u32 = 1;
pub const IMAGES_HEADER_BYTES: usize = 20;
pub const LABELS_HEADER_BYTES: usize = 12;

pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.bin";
pub const CLASSES_FILE: &str = "classes.txt";
pub const SPLIT_FILE: &str = "split.json";

/// Packed grayscale images with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    height: usize,
    width: usize,
    class_names: Vec<String>,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        class_names: Vec<String>,
        pixels: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Format("image dimensions must be positive".into()));
        }
        if pixels.len() != labels.len() * height * width {
            return Err(Error::Format(format!(
                "image count ({}) does not match label count ({})",
                pixels.len() / (height * width),
                labels.len()
            )));
        }
        if class_names.is_empty() {
            return Err(Error::Format("dataset needs at least one class".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                classes: class_names.len(),
            });
        }
        Ok(Dataset {
            height,
            width,
            class_names,
            pixels,
            labels,
        })
    }

    /// `self` followed by `other`; both must share dimensions and classes.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if (self.height, self.width) != (other.height, other.width)
            || self.class_names != other.class_names
        {
            return Err(Error::Format(
                "cannot concatenate datasets with different dimensions or classes".into(),
            ));
        }
        let mut pixels = self.pixels.clone();
        pixels.extend_from_slice(&other.pixels);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(self.height, self.width, self.class_names.clone(), pixels, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label(i)).collect()
    }

    fn image_values(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let n = self.height * self.width;
        self.pixels[i * n..(i + 1) * n]
            .iter()
            .map(|&p| f64::from(p) / 255.0)
    }

    /// Image `i` as `[1, H, W]` in `[0, 1]`.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.image_values(i).collect())
            .expect("container dimensions are positive")
    }

    /// Images at `indices` stacked as `[N, 1, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::Empty("batch has no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Config(format!(
                "image index {bad} out of range for {} images",
                self.len()
            )));
        }
        let data = indices.iter().flat_map(|&i| self.image_values(i)).collect();
        Tensor::new(vec![indices.len(), 1, self.height, self.width], data)
    }
}

pub fn encode_images(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::with_capacity(IMAGES_HEADER_BYTES + ds.pixels.len());
    buf.extend_from_slice(IMAGES_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [ds.len(), ds.height, ds.width] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&ds.pixels);
    buf
}

pub fn encode_labels(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::with_capacity(LABELS_HEADER_BYTES + ds.labels.len());
    buf.extend_from_slice(LABELS_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    buf.extend_from_slice(&ds.labels);
    buf
}

fn header_u32s<const K: usize>(bytes: &[u8], magic: &[u8; 4], what: &str) -> Result<[usize; K]> {
    let need = 4 + 4 * K;
    if bytes.len() < need {
        return Err(Error::Format(format!("{what} file is shorter than its header")));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "{what} file has bad magic (expected {})",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut out = [0usize; K];
    for (k, o) in out.iter_mut().enumerate() {
        let at = 4 + 4 * k;
        *o = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    }
    if out[0] as u32 != VERSION {
        return Err(Error::Format(format!("{what} file has unsupported version {}", out[0])));
    }
    Ok(out)
}

/// Parses images and labels, checking magic, version, dimensions and length.
pub fn decode_container(images: &[u8], labels: &[u8], class_names: Vec<String>) -> Result<Dataset> {
    let [_, count, height, width] = header_u32s::<4>(images, IMAGES_MAGIC, "images")?;
    let expected = IMAGES_HEADER_BYTES + count * height * width;
    if images.len() != expected {
        return Err(Error::PayloadLength {
            expected: expected as u64,
            found: images.len() as u64,
        });
    }
    let [_, label_count] = header_u32s::<2>(labels, LABELS_MAGIC, "labels")?;
    if label_count != count {
        return Err(Error::Format(format!(
            "image count ({count}) does not match label count ({label_count})"
        )));
    }
    if labels.len() != LABELS_HEADER_BYTES + label_count {
        return Err(Error::PayloadLength {
            expected: (LABELS_HEADER_BYTES + label_count) as u64,
            found: labels.len() as u64,
        });
    }
    Dataset::new(
        height,
        width,
        class_names,
        images[IMAGES_HEADER_BYTES..].to_vec(),
        labels[LABELS_HEADER_BYTES..].to_vec(),
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_container(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(IMAGES_FILE), &encode_images(ds))?;
    write_file(&dir.join(LABELS_FILE), &encode_labels(ds))?;
    let mut names = ds.class_names.join("\n");
    names.push('\n');
    write_file(&dir.join(CLASSES_FILE), names.as_bytes())
}

pub fn read_container(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let images = read_file(&dir.join(IMAGES_FILE))?;
    let labels = read_file(&dir.join(LABELS_FILE))?;
    let names = read_file(&dir.join(CLASSES_FILE))?;
    let names = String::from_utf8(names)
        .map_err(|_| Error::Format(format!("{CLASSES_FILE} is not UTF-8")))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    decode_container(&images, &labels, names)
}

/// Which images train and which evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub fraction: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        let mut seen = vec![0u8; dataset_len];
        for (set, tag) in [(&self.train, 1u8), (&self.test, 2u8)] {
            for &i in set.iter() {
                if i >= dataset_len {
                    return Err(Error::Format(format!(
                        "split index {i} out of range for {dataset_len} images"
                    )));
                }
                if seen[i] & tag != 0 {
                    return Err(Error::Format(format!("split index {i} listed twice")));
                }
                seen[i] |= tag;
            }
        }
        if let Some(i) = seen.iter().position(|&s| s == 3) {
            return Err(Error::Format(format!("image {i} is in both train and test")));
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_file(path, json.as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// `floor(x + 0.5)`: halves round up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Positions into `labels` forming a per-class random subset of size
/// `max(1, round_half_up(fraction * class_count))`, sorted ascending.
pub fn stratified_subsample(
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (pos, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or(Error::LabelOutOfRange {
                label: l,
                classes: num_classes,
            })?
            .push(pos);
    }
    let mut picked = Vec::new();
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            return Err(Error::Empty(format!("class {class} has no samples")));
        }
        let keep = round_half_up(fraction * members.len() as f64).clamp(1, members.len());
        let mut r = rng::stream(seed, "subsample", &[class as u64]);
        let (chosen, _) = members.partial_shuffle(&mut r, keep);
        picked.extend_from_slice(chosen);
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Seeded Fisher-Yates shuffle of `indices` for `epoch`, chunked into
/// batches. The last batch may be short.
pub fn batches(indices: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order = indices.to_vec();
    order.shuffle(&mut rng::stream(seed, "shuffle", &[epoch]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Shape of the synthetic two-class blob images. Lengths are fractions of
/// the image side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobParams {
    pub background: f64,
    /// Class 0 is centered at `(c, c)`, class 1 at `(1 - c, 1 - c)`.
    pub center: f64,
    pub jitter: f64,
    pub spread: f64,
    pub amplitude: (f64, f64),
    pub noise_sd: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        BlobParams {
            background: 0.0,
            center: 0.25,
            jitter: 1.0 / 16.0,
            spread: 0.2,
            amplitude: (0.8, 1.0),
            noise_sd: 0.05,
        }
    }
}

/// Two classes of noisy Gaussian blobs: class 0 sits in the upper-left
/// quadrant, class 1 in the lower-right. Samples alternate 0, 1, 0, 1, ...
pub fn synth_blobs(n_per_class: usize, side: usize, seed: u64) -> Result<Dataset> {
    synth_blobs_with(&BlobParams::default(), n_per_class, side, seed)
}

pub fn synth_blobs_with(bp: &BlobParams, n_per_class: usize, side: usize, seed: u64) -> Result<Dataset> {
    generate_blobs(bp, n_per_class, side, &mut rng::stream(seed, "synth", &[]))
}

/// Independent train and test sets drawn from the same distribution.
pub fn synth_train_test(train_per_class: usize, test_per_class: usize, side: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let bp = BlobParams::default();
    let train = synth_blobs_with(&bp, train_per_class, side, seed)?;
    let test = generate_blobs(&bp, test_per_class, side, &mut rng::stream(seed, "synth", &[1]))?;
    Ok((train, test))
}

fn generate_blobs(bp: &BlobParams, n_per_class: usize, side: usize, r: &mut rng::StreamRng) -> Result<Dataset> {
    if side < 8 {
        return Err(Error::Config(format!("synthetic side must be >= 8, got {side}")));
    }
    let noise = Normal::new(0.0, bp.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let s = side as f64;
    let spread = s * bp.spread;
    let jitter = s * bp.jitter;
    let mut pixels = Vec::with_capacity(2 * n_per_class * side * side);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let class = (i % 2) as u8;
        let base = if class == 0 { s * bp.center } else { s * (1.0 - bp.center) };
        let cy = base + r.random_range(-jitter..=jitter);
        let cx = base + r.random_range(-jitter..=jitter);
        let amp = r.random_range(bp.amplitude.0..=bp.amplitude.1);
        for y in 0..side {
            for x in 0..side {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let blob = amp * (-(dy * dy + dx * dx) / (2.0 * spread * spread)).exp();
                let v = (bp.background + blob + noise.sample(r)).clamp(0.0, 1.0);
                pixels.push((v * 255.0).round() as u8);
            }
        }
        labels.push(class);
    }
    Dataset::new(
        side,
        side,
        vec!["blob_upper_left".into(), "blob_lower_right".into()],
        pixels,
        labels,
    )
}
