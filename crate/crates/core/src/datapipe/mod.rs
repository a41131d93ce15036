//! Dataset ingestion, pixel normalization and the knowledge-base variance.
//!
//! A dataset source is either a directory with one sub-directory per class
//! or a tab-separated manifest (`path<TAB>label<TAB>split`, paths relative
//! to the manifest). Recorded paths are relative to the class-folder root or
//! the manifest's directory, so a manifest written into the root reloads the
//! same split. Splits are class-disjoint.

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coding::Method;
use crate::error::{invalid, Error, Result};
use crate::fingerprint::Fingerprinter;
use crate::network::checkpoint::write_atomic;
use crate::network::{Encoder, EncoderOutput};
use crate::tensor::{Scalar, Tensor};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// `x / 127.5 - 1`.
pub fn normalize_pixel<T: Scalar>(p: u8) -> T {
    T::of(p as f64 / 127.5 - 1.0)
}

/// `round(clamp(y, -1, 1) * 127.5 + 127.5)`.
pub fn denormalize_value<T: Scalar>(y: T) -> u8 {
    let y = y.f64();
    let y = if y.is_nan() { 0.0 } else { y.clamp(-1.0, 1.0) };
    (y * 127.5 + 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn normalize<T: Scalar>(pixels: &[u8]) -> Vec<T> {
    pixels.iter().map(|&p| normalize_pixel(p)).collect()
}

pub fn denormalize<T: Scalar>(values: &[T]) -> Vec<u8> {
    values.iter().map(|&v| denormalize_value(v)).collect()
}

/// 8-bit images in `[N, H, W, C]` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBatch {
    pixels: Vec<u8>,
    shape: [usize; 4],
}

impl ImageBatch {
    pub fn new(shape: [usize; 4], pixels: Vec<u8>) -> Result<Self> {
        if shape[0] == 0 {
            return Err(invalid("an image batch needs at least one image"));
        }
        if shape.iter().product::<usize>() != pixels.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch {shape:?} needs {} pixels, got {}",
                shape.iter().product::<usize>(),
                pixels.len()
            )));
        }
        Ok(ImageBatch { pixels, shape })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Pixels of image `i` in `[H, W, C]` order.
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.shape[1] * self.shape[2] * self.shape[3];
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Normalized values in `[N, C, H, W]` order.
    pub fn normalized<T: Scalar>(&self) -> Tensor<T> {
        let [n, h, w, c] = self.shape;
        let mut data = vec![T::zero(); self.pixels.len()];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data[((b * c + ch) * h + y) * w + x] =
                            normalize_pixel(self.pixels[((b * h + y) * w + x) * c + ch]);
                    }
                }
            }
        }
        Tensor::from_vec([n, c, h, w], data).expect("sizes agree")
    }

    /// Inverse of [`Self::normalized`] with rounding and clamping.
    pub fn from_normalized<T: Scalar>(t: &Tensor<T>) -> Self {
        let [n, c, h, w] = t.shape();
        let mut pixels = vec![0u8; t.len()];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        pixels[((b * h + y) * w + x) * c + ch] =
                            denormalize_value(t.data()[((b * c + ch) * h + y) * w + x]);
                    }
                }
            }
        }
        ImageBatch {
            pixels,
            shape: [n, h, w, c],
        }
    }
}

/// Equal-sized RGB images with class labels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ImageSet {
    size: usize,
    pixels: Vec<u8>,
    labels: Vec<String>,
    paths: Vec<PathBuf>,
}

impl ImageSet {
    pub fn new(size: usize) -> Self {
        ImageSet {
            size,
            ..Default::default()
        }
    }

    pub fn push(&mut self, pixels: &[u8], label: &str, path: PathBuf) -> Result<()> {
        if pixels.len() != self.image_len() {
            return Err(Error::ShapeMismatch(format!(
                "image {} has {} values, expected {}",
                path.display(),
                pixels.len(),
                self.image_len()
            )));
        }
        self.pixels.extend_from_slice(pixels);
        self.labels.push(label.to_string());
        self.paths.push(path);
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn image_len(&self) -> usize {
        self.size * self.size * 3
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    pub fn classes(&self) -> BTreeSet<&str> {
        self.labels.iter().map(String::as_str).collect()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.image_len()..(i + 1) * self.image_len()]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let mut px = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len() {
                return Err(invalid(format!("image index {i} out of {}", self.len())));
            }
            px.extend_from_slice(self.image(i));
        }
        ImageBatch::new([indices.len(), self.size, self.size, 3], px)
    }

    /// First `n` images (all when `n` exceeds the set).
    pub fn take(&self, n: usize) -> ImageSet {
        let n = n.min(self.len());
        ImageSet {
            size: self.size,
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            paths: self.paths[..n].to_vec(),
        }
    }

    fn hash_into(&self, h: &mut Fingerprinter) {
        h.update(&(self.size as u64).to_le_bytes());
        for i in 0..self.len() {
            h.update(self.paths[i].to_string_lossy().as_bytes());
            h.update(self.labels[i].as_bytes());
            h.update(self.image(i));
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Fingerprinter::new();
        self.hash_into(&mut h);
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BadFilePolicy {
    /// Abort on the first unreadable file or empty class.
    #[default]
    Fail,
    /// Log and skip it.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Fraction of classes held out for testing (directory sources).
    #[serde(default = "default_test_fraction")]
    pub test_class_fraction: f64,
    /// Explicit test classes; overrides the fraction.
    #[serde(default)]
    pub test_classes: Option<Vec<String>>,
    /// Cap per class, applied after sorting file names.
    #[serde(default)]
    pub max_images_per_class: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub on_bad_file: BadFilePolicy,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_class_fraction: default_test_fraction(),
            test_classes: None,
            max_images_per_class: None,
            seed: 0,
            on_bad_file: BadFilePolicy::Fail,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: ImageSet,
    pub test: ImageSet,
    pub fingerprint: String,
    pub skipped: Vec<(PathBuf, String)>,
}

impl DatasetSplit {
    /// Builds a split from two image sets, enforcing class disjointness.
    pub fn from_sets(train: ImageSet, test: ImageSet) -> Result<Self> {
        if train.size() != test.size() {
            return Err(Error::ShapeMismatch("train and test image sizes differ".into()));
        }
        let train_classes = train.classes();
        if let Some(c) = test.classes().into_iter().find(|c| train_classes.contains(c)) {
            return Err(Error::Dataset {
                path: PathBuf::new(),
                message: format!("class {c:?} appears in both train and test splits"),
            });
        }
        let mut h = Fingerprinter::new();
        h.update(b"train");
        train.hash_into(&mut h);
        h.update(b"test");
        test.hash_into(&mut h);
        Ok(DatasetSplit {
            train,
            test,
            fingerprint: h.finish(),
            skipped: Vec::new(),
        })
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut out = Vec::new();
        for (set, split) in [(&self.train, Split::Train), (&self.test, Split::Test)] {
            for (p, l) in set.paths().iter().zip(set.labels()) {
                out.push(ManifestEntry {
                    path: p.clone(),
                    label: l.clone(),
                    split,
                });
            }
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut s = String::from("# path\tlabel\tsplit\n");
        for e in self.manifest() {
            let split = match e.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let _ = writeln!(s, "{}\t{}\t{}", e.path.display(), e.label, split);
        }
        write_atomic(path, s.as_bytes())
    }
}

fn dataset_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Shorter-side resize (only when smaller than `crop`), then center crop.
pub fn crop_image(img: &RgbImage, crop: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let crop32 = crop as u32;
    let resized;
    let src = if w.min(h) < crop32 {
        let scale = crop as f64 / w.min(h) as f64;
        let nw = ((w as f64 * scale).round() as u32).max(crop32);
        let nh = ((h as f64 * scale).round() as u32).max(crop32);
        resized = image::imageops::resize(img, nw, nh, FilterType::Triangle);
        &resized
    } else {
        img
    };
    let (w, h) = src.dimensions();
    image::imageops::crop_imm(src, (w - crop32) / 2, (h - crop32) / 2, crop32, crop32).to_image()
}

fn read_image(path: &Path, crop: usize) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| dataset_err(path, format!("cannot decode image: {e}")))?;
    Ok(crop_image(&img.to_rgb8(), crop).into_raw())
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn list_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(path, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads and crops a dataset. `source` is a class-folder directory or a
/// manifest file; see the module docs.
pub fn load_dataset(source: &Path, spec: &SplitSpec, crop_size: usize) -> Result<DatasetSplit> {
    if crop_size == 0 {
        return Err(invalid("crop_size must be positive"));
    }
    let mut skipped = Vec::new();
    let base = if source.is_dir() {
        source
    } else {
        source.parent().unwrap_or(Path::new(""))
    };
    let entries = if source.is_dir() {
        entries_from_dir(source, spec, &mut skipped)?
    } else if source.is_file() {
        entries_from_manifest(source)?
    } else {
        return Err(dataset_err(source, "dataset source does not exist"));
    };

    let mut per_class: BTreeMap<(String, bool), usize> = BTreeMap::new();
    let mut train = ImageSet::new(crop_size);
    let mut test = ImageSet::new(crop_size);
    for e in entries {
        let is_test = e.split == Split::Test;
        if let Some(cap) = spec.max_images_per_class {
            let n = per_class.entry((e.label.clone(), is_test)).or_default();
            if *n >= cap {
                continue;
            }
            *n += 1;
        }
        let pixels = match read_image(&e.path, crop_size) {
            Ok(p) => p,
            Err(err) if spec.on_bad_file == BadFilePolicy::Skip => {
                log::warn!("skipping {}: {err}", e.path.display());
                skipped.push((e.path.clone(), err.to_string()));
                continue;
            }
            Err(err) => return Err(err),
        };
        let rel = e
            .path
            .strip_prefix(base)
            .unwrap_or(&e.path)
            .to_path_buf();
        let set = if is_test { &mut test } else { &mut train };
        set.push(&pixels, &e.label, rel)?;
    }
    if train.is_empty() || test.is_empty() {
        return Err(dataset_err(source, "both splits must contain at least one image"));
    }
    let mut split = DatasetSplit::from_sets(train, test)?;
    split.skipped = skipped;
    Ok(split)
}

fn entries_from_dir(
    root: &Path,
    spec: &SplitSpec,
    skipped: &mut Vec<(PathBuf, String)>,
) -> Result<Vec<ManifestEntry>> {
    let mut classes: Vec<(String, Vec<PathBuf>)> = Vec::new();
    for dir in list_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let files: Vec<PathBuf> = list_dir(&dir)?.into_iter().filter(|p| is_image(p)).collect();
        if files.is_empty() {
            match spec.on_bad_file {
                BadFilePolicy::Fail => return Err(dataset_err(&dir, "class contains no images")),
                BadFilePolicy::Skip => {
                    log::warn!("skipping empty class {}", dir.display());
                    skipped.push((dir.clone(), "class contains no images".into()));
                    continue;
                }
            }
        }
        classes.push((label, files));
    }
    if classes.len() < 2 {
        return Err(dataset_err(root, "a class-disjoint split needs at least two classes"));
    }
    let test_set: BTreeSet<String> = match &spec.test_classes {
        Some(list) => {
            let known: BTreeSet<&str> = classes.iter().map(|(l, _)| l.as_str()).collect();
            if let Some(c) = list.iter().find(|c| !known.contains(c.as_str())) {
                return Err(dataset_err(root, format!("unknown test class {c:?}")));
            }
            list.iter().cloned().collect()
        }
        None => {
            if !(spec.test_class_fraction > 0.0 && spec.test_class_fraction < 1.0) {
                return Err(invalid("test_class_fraction must lie in (0, 1)"));
            }
            let n = classes.len();
            let k = ((n as f64 * spec.test_class_fraction).round() as usize).clamp(1, n - 1);
            let mut names: Vec<String> = classes.iter().map(|(l, _)| l.clone()).collect();
            names.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            names.into_iter().take(k).collect()
        }
    };
    let mut out = Vec::new();
    for (label, files) in classes {
        let split = if test_set.contains(&label) {
            Split::Test
        } else {
            Split::Train
        };
        for path in files {
            out.push(ManifestEntry {
                path,
                label: label.clone(),
                split,
            });
        }
    }
    Ok(out)
}

fn entries_from_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [p, label, split] = fields[..] else {
            return Err(dataset_err(
                path,
                format!("line {}: expected path, label and split separated by tabs", i + 1),
            ));
        };
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(dataset_err(path, format!("line {}: unknown split {other:?}", i + 1)))
            }
        };
        out.push(ManifestEntry {
            path: base.join(p),
            label: label.to_string(),
            split,
        });
    }
    Ok(out)
}

/// Receiver-side variance statistics of the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub format_version: u32,
    pub shape: [usize; 3],
    pub per_element_variance: Vec<f64>,
    pub scalar_variance: f64,
    pub source_fingerprint: String,
    pub model_fingerprint: String,
}

pub const KNOWLEDGE_BASE_VERSION: u32 = 1;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl KnowledgeBase {
    /// Per-element mean of `variances` (each of length `k*h*w`).
    pub fn from_variances<'a, I>(
        shape: [usize; 3],
        variances: I,
        source_fingerprint: &str,
        model_fingerprint: &str,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let len = shape.iter().product();
        let mut acc = vec![CompensatedSum::default(); len];
        let mut count = 0usize;
        for v in variances {
            if v.len() != len {
                return Err(Error::ShapeMismatch(format!(
                    "variance map has {} elements, expected {len}",
                    v.len()
                )));
            }
            for (a, &x) in acc.iter_mut().zip(v) {
                a.add(x);
            }
            count += 1;
        }
        if count == 0 {
            return Err(invalid("knowledge base needs at least one image"));
        }
        let per_element: Vec<f64> = acc.iter().map(|a| a.value() / count as f64).collect();
        if let Some(v) = per_element.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(invalid(format!("knowledge-base variance must be positive, got {v}")));
        }
        let mut total = CompensatedSum::default();
        per_element.iter().for_each(|&v| total.add(v));
        Ok(KnowledgeBase {
            format_version: KNOWLEDGE_BASE_VERSION,
            shape,
            scalar_variance: total.value() / len as f64,
            per_element_variance: per_element,
            source_fingerprint: source_fingerprint.to_string(),
            model_fingerprint: model_fingerprint.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let kb: KnowledgeBase = serde_json::from_slice(&bytes)?;
        if kb.format_version != KNOWLEDGE_BASE_VERSION {
            return Err(Error::Config(format!(
                "knowledge base {} has format version {}, expected {KNOWLEDGE_BASE_VERSION}",
                path.display(),
                kb.format_version
            )));
        }
        if kb.per_element_variance.len() != kb.shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "knowledge base {} variance map does not match its shape",
                path.display()
            )));
        }
        Ok(kb)
    }
}

/// Averages the encoder's variance map over every training image.
pub fn build_knowledge_base<T: Scalar>(
    encoder: &Encoder<T>,
    train: &ImageSet,
    batch_size: usize,
    model_fingerprint: &str,
) -> Result<KnowledgeBase> {
    if !encoder.config().emit_variance {
        return Err(Error::UnsupportedMethod(format!(
            "a knowledge base needs a variance-emitting encoder; {} models have none",
            Method::Ae
        )));
    }
    if batch_size == 0 {
        return Err(invalid("batch_size must be positive"));
    }
    let shape = encoder.config().latent_shape();
    let mut maps: Vec<Vec<f64>> = Vec::with_capacity(train.len());
    let indices: Vec<usize> = (0..train.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let x = train.batch(chunk)?.normalized::<T>();
        let EncoderOutput::Stats(stats) = encoder.encode(x)? else {
            unreachable!("variance-emitting encoder returns statistics");
        };
        for b in 0..chunk.len() {
            maps.push(
                stats
                    .log_variance()
                    .sample(b)
                    .iter()
                    .map(|lv| lv.f64().exp())
                    .collect(),
            );
        }
    }
    KnowledgeBase::from_variances(
        shape,
        maps.iter().map(Vec::as_slice),
        &train.fingerprint(),
        model_fingerprint,
    )
}
