//! Dataset loading, subsetting and manifests.
//!
//! Loaders read the original binary containers from local disk:
//!
//! - IDX (MNIST, Fashion-MNIST): big-endian header, magic `0x00000803` for
//!   images (`count, rows, cols`) and `0x00000801` for labels (`count`),
//!   followed by one byte per pixel or label.
//! - CIFAR binary: fixed-size records of label byte(s) then 3072 pixel bytes
//!   as R, G and B planes of 32x32. CIFAR-10 records carry one label byte
//!   (3073 bytes); CIFAR-100 records carry coarse then fine label (3074 bytes)
//!   and the fine label is used.
//!
//! Loaders return a [`RawDataset`] that keeps pixels as bytes, so a full
//! CIFAR-10 training set stays at about 150 MB. [`Dataset`] is the normalized
//! form (pixels / 255, one-hot labels) fed to the network, usually built from
//! a small subset.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::negotiation::LabelMatrix;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "NEGOTIATE_DATA_DIR";

/// `$NEGOTIATE_DATA_DIR`, or `data/` at the workspace root.
pub fn default_data_dir() -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => Path::new(env!("CARGO_MANIFEST_DIR"))
            .ancestors()
            .nth(2)
            .expect("crate sits two levels below the workspace root")
            .join("data"),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Pixels and integer labels as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    name: String,
    sample_shape: [usize; 3],
    pixels: Vec<u8>,
    labels: Vec<usize>,
    classes: usize,
}

impl RawDataset {
    pub fn new(
        name: impl Into<String>,
        sample_shape: [usize; 3],
        pixels: Vec<u8>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::InvalidShape {
                shape: vec![labels.len(), sample_shape[0], sample_shape[1], sample_shape[2]],
                reason: format!("{} pixel bytes do not match", pixels.len()),
            });
        }
        if let Some(bad) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "sample {bad} has label {} but only {classes} classes exist",
                labels[bad]
            )));
        }
        Ok(RawDataset {
            name: name.into(),
            sample_shape,
            pixels,
            labels,
            classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let per: usize = self.sample_shape.iter().product();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<RawDataset> {
        let per: usize = self.sample_shape.iter().product();
        let mut pixels = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Subset(format!(
                    "index {i} out of range for {} samples",
                    self.len()
                )));
            }
            pixels.extend_from_slice(self.pixels(i));
            labels.push(self.labels[i]);
        }
        RawDataset::new(self.name.clone(), self.sample_shape, pixels, labels, self.classes)
    }

    /// Appends the samples of `other`, which must have the same layout.
    pub fn extend(&mut self, other: RawDataset) -> Result<()> {
        if other.sample_shape != self.sample_shape || other.classes != self.classes {
            return Err(Error::mismatch("extend", &self.sample_shape, &other.sample_shape));
        }
        self.pixels.extend(other.pixels);
        self.labels.extend(other.labels);
        Ok(())
    }

    /// Normalized form: pixels / 255 as `[N, C, H, W]`, one-hot labels.
    pub fn to_dataset<T: Scalar>(&self) -> Result<Dataset<T>> {
        let [c, h, w] = self.sample_shape;
        let scale = T::one() / T::lit(255.0);
        let data = self.pixels.iter().map(|&p| T::lit(f64::from(p)) * scale).collect();
        let inputs = Tensor::new(&[self.len(), c, h, w], data)?;
        Dataset::new(self.name.clone(), inputs, self.labels.clone(), self.classes)
    }
}

/// Network-ready samples: inputs in `[0, 1]` and one-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    name: String,
    inputs: Tensor<T>,
    labels: LabelMatrix<T>,
    class_indices: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        name: impl Into<String>,
        inputs: Tensor<T>,
        class_indices: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if inputs.rank() != 4 || inputs.shape()[0] != class_indices.len() {
            return Err(Error::InvalidShape {
                shape: inputs.shape().to_vec(),
                reason: format!("expected [{}, C, H, W]", class_indices.len()),
            });
        }
        if inputs.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::InvalidArgument("input values must lie in [0, 1]".into()));
        }
        let labels = LabelMatrix::one_hot(&class_indices, classes)?;
        Ok(Dataset {
            name: name.into(),
            inputs,
            labels,
            class_indices,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.class_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_indices.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.labels.classes()
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &LabelMatrix<T> {
        &self.labels
    }

    pub fn class_indices(&self) -> &[usize] {
        &self.class_indices
    }
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, header: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: header as u64,
            actual: bytes.len() as u64,
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.into(),
            expected: header as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}

fn check_payload(path: &Path, len: usize, expected: usize) -> Result<()> {
    let (expected, actual) = (expected as u64, len as u64);
    match actual.cmp(&expected) {
        std::cmp::Ordering::Less => Err(Error::Truncated {
            path: path.into(),
            expected,
            actual,
        }),
        std::cmp::Ordering::Greater => Err(Error::TrailingBytes {
            path: path.into(),
            expected,
            actual,
        }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

/// Parses an IDX image file into `(rows, cols, pixel bytes)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    idx_header(bytes, path, IDX_IMAGES_MAGIC, 16)?;
    let n = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    check_payload(path, bytes.len(), 16 + n * rows * cols)?;
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path, classes: usize) -> Result<Vec<usize>> {
    idx_header(bytes, path, IDX_LABELS_MAGIC, 8)?;
    let n = be_u32(bytes, 4) as usize;
    check_payload(path, bytes.len(), 8 + n)?;
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(record, &label)| {
            if usize::from(label) < classes {
                Ok(usize::from(label))
            } else {
                Err(Error::InvalidLabel {
                    path: path.into(),
                    record,
                    label,
                    classes,
                })
            }
        })
        .collect()
}

/// Loads a pair of IDX files (10 classes, one channel).
pub fn load_idx(name: &str, images: &Path, labels: &Path) -> Result<RawDataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images)?, images)?;
    let labels = parse_idx_labels(&read_file(labels)?, labels, 10)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    RawDataset::new(name, [1, rows, cols], pixels, labels, 10)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_size(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Parses one CIFAR binary file.
pub fn parse_cifar(bytes: &[u8], path: &Path, variant: CifarVariant) -> Result<(Vec<u8>, Vec<usize>)> {
    let record = variant.record_size();
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::RecordLength {
            path: path.into(),
            len: bytes.len() as u64,
            record,
        });
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    let label_at = variant.label_bytes() - 1;
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_at];
        if usize::from(label) >= variant.classes() {
            return Err(Error::InvalidLabel {
                path: path.into(),
                record: i,
                label,
                classes: variant.classes(),
            });
        }
        labels.push(usize::from(label));
        pixels.extend_from_slice(&rec[variant.label_bytes()..]);
    }
    Ok((pixels, labels))
}

/// Loads and concatenates CIFAR binary files in the given order.
pub fn load_cifar(name: &str, paths: &[PathBuf], variant: CifarVariant) -> Result<RawDataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let (p, l) = parse_cifar(&read_file(path)?, path, variant)?;
        pixels.extend(p);
        labels.extend(l);
    }
    RawDataset::new(name, [3, 32, 32], pixels, labels, variant.classes())
}

/// The four supported benchmark datasets and their standard file layout
/// under the data root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::Mnist,
        DatasetKind::FashionMnist,
        DatasetKind::Cifar10,
        DatasetKind::Cifar100,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            DatasetKind::Cifar100 => 100,
            _ => 10,
        }
    }

    /// Architecture used for this dataset by default.
    pub fn preset(self) -> crate::nn::Preset {
        use crate::nn::Preset;
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => Preset::Mnist,
            DatasetKind::Cifar10 => Preset::Cifar10,
            DatasetKind::Cifar100 => Preset::Cifar100,
        }
    }

    /// `(train, test)` file lists relative to the data root.
    pub fn files(self) -> (Vec<PathBuf>, Vec<PathBuf>) {
        let idx = |dir: &str, split: &str| {
            vec![
                Path::new(dir).join(format!("{split}-images-idx3-ubyte")),
                Path::new(dir).join(format!("{split}-labels-idx1-ubyte")),
            ]
        };
        match self {
            DatasetKind::Mnist => (idx("mnist", "train"), idx("mnist", "t10k")),
            DatasetKind::FashionMnist => (idx("fashion-mnist", "train"), idx("fashion-mnist", "t10k")),
            DatasetKind::Cifar10 => {
                let dir = Path::new("cifar-10-batches-bin");
                (
                    (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                    vec![dir.join("test_batch.bin")],
                )
            }
            DatasetKind::Cifar100 => {
                let dir = Path::new("cifar-100-binary");
                (vec![dir.join("train.bin")], vec![dir.join("test.bin")])
            }
        }
    }

    /// Files under `root` that do not exist.
    pub fn missing_files(self, root: &Path) -> Vec<PathBuf> {
        let (train, test) = self.files();
        train
            .into_iter()
            .chain(test)
            .map(|p| root.join(p))
            .filter(|p| !p.is_file())
            .collect()
    }

    /// Loads the `(train, test)` splits from `root`.
    pub fn load(self, root: &Path) -> Result<(RawDataset, RawDataset)> {
        let (train, test) = self.files();
        let abs = |v: Vec<PathBuf>| v.into_iter().map(|p| root.join(p)).collect::<Vec<_>>();
        let (train, test) = (abs(train), abs(test));
        let name = self.name();
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => Ok((
                load_idx(name, &train[0], &train[1])?,
                load_idx(name, &test[0], &test[1])?,
            )),
            DatasetKind::Cifar10 => Ok((
                load_cifar(name, &train, CifarVariant::Cifar10)?,
                load_cifar(name, &test, CifarVariant::Cifar10)?,
            )),
            DatasetKind::Cifar100 => Ok((
                load_cifar(name, &train, CifarVariant::Cifar100)?,
                load_cifar(name, &test, CifarVariant::Cifar100)?,
            )),
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown dataset {s:?}")))
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Sizes and seed of a low-data subset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    #[serde(default = "default_stratified")]
    pub stratified: bool,
}

fn default_stratified() -> bool {
    true
}

/// A drawn subset plus the source indices it came from.
#[derive(Clone, Debug)]
pub struct Subset {
    pub train: RawDataset,
    pub test: RawDataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl SubsetSpec {
    /// Draws train and test subsets. The two draws use separate random
    /// streams of the same seed, so neither depends on the other's size.
    pub fn apply(&self, train: &RawDataset, test: &RawDataset) -> Result<Subset> {
        let train_indices = self.draw(train, self.train, 0)?;
        let test_indices = self.draw(test, self.test, 1)?;
        Ok(Subset {
            train: train.select(&train_indices)?,
            test: test.select(&test_indices)?,
            train_indices,
            test_indices,
        })
    }

    fn draw(&self, ds: &RawDataset, count: usize, stream: u64) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        sample_indices(ds.labels(), ds.classes(), count, self.stratified, &mut rng)
    }
}

/// Sorted sample indices drawn without replacement.
///
/// Stratified draws take `count / classes` samples from every class; when
/// `count` does not divide evenly, the remaining samples go one each to
/// classes picked at random, so per-class counts differ by at most one.
pub fn sample_indices(
    labels: &[usize],
    classes: usize,
    count: usize,
    stratified: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if count == 0 || count > labels.len() {
        return Err(Error::Subset(format!(
            "cannot draw {count} samples from {}",
            labels.len()
        )));
    }
    let mut out = if stratified {
        let mut quota = vec![count / classes; classes];
        let mut order: Vec<usize> = (0..classes).collect();
        order.shuffle(rng);
        for &k in &order[..count % classes] {
            quota[k] += 1;
        }
        let mut out = Vec::with_capacity(count);
        for (class, &want) in quota.iter().enumerate() {
            let mut pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            if pool.len() < want {
                return Err(Error::Subset(format!(
                    "class {class} has {} samples, {want} requested",
                    pool.len()
                )));
            }
            pool.shuffle(rng);
            out.extend_from_slice(&pool[..want]);
        }
        out
    } else {
        rand::seq::index::sample(rng, labels.len(), count).into_vec()
    };
    out.sort_unstable();
    Ok(out)
}

/// Writes `position,source_index,label` rows for a drawn subset.
pub fn write_indices_csv(w: impl Write, indices: &[usize], labels: &[usize]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["position", "source_index", "label"])?;
    for (pos, (&idx, &label)) in indices.iter().zip(labels).enumerate() {
        out.write_record([pos.to_string(), idx.to_string(), label.to_string()])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Expected SHA-256 digests of dataset files, relative to the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FileStatus {
    Ok,
    Missing,
    Mismatch { actual: String },
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&read_file(path)?)?)
    }

    /// Checks every entry against files under `root`.
    pub fn verify(&self, root: &Path) -> Result<Vec<(PathBuf, FileStatus)>> {
        self.files
            .iter()
            .map(|entry| {
                let path = root.join(&entry.path);
                if !path.is_file() {
                    return Ok((path, FileStatus::Missing));
                }
                let actual = sha256_file(&path)?;
                let status = if actual.eq_ignore_ascii_case(&entry.sha256) {
                    FileStatus::Ok
                } else {
                    FileStatus::Mismatch { actual }
                };
                Ok((path, status))
            })
            .collect()
    }
}

/// Lowercase hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
