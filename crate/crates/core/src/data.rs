//! Dataset ingestion (MNIST IDX, CIFAR-10 binary), augmentation, subsets
//! and batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seed;
use crate::tensor::{Element, Tensor};

pub const DATA_DIR_ENV: &str = "HPFF_DATA_DIR";
pub const NUM_CLASSES: usize = 10;

const CIFAR_RECORD: usize = 3073;
const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
const MNIST_MEAN: f64 = 0.1307;
const MNIST_STD: f64 = 0.3081;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Mnist,
    Cifar10,
    /// Small generated set for smoke runs; not a benchmark.
    Synthetic,
}

impl DatasetId {
    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            DatasetId::Mnist => [1, 28, 28],
            DatasetId::Cifar10 => [3, 32, 32],
            DatasetId::Synthetic => [3, 16, 16],
        }
    }

    pub fn normalization(&self) -> Normalization {
        match self {
            DatasetId::Mnist => Normalization {
                mean: vec![MNIST_MEAN],
                std: vec![MNIST_STD],
            },
            DatasetId::Cifar10 => Normalization {
                mean: CIFAR_MEAN.to_vec(),
                std: CIFAR_STD.to_vec(),
            },
            DatasetId::Synthetic => Normalization {
                mean: vec![0.5; 3],
                std: vec![0.25; 3],
            },
        }
    }

    pub fn default_augment(&self) -> AugmentPolicy {
        match self {
            DatasetId::Cifar10 => AugmentPolicy {
                random_crop: 4,
                horizontal_flip: 0.5,
            },
            _ => AugmentPolicy::none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    images: Vec<u8>,
    labels: Vec<u8>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        split: Split,
        shape: [usize; 3],
        images: Vec<u8>,
        labels: Vec<u8>,
        normalization: Normalization,
    ) -> Result<Self> {
        let [c, h, w] = shape;
        ensure!(c * h * w > 0, "empty image shape {shape:?}");
        ensure!(
            images.len() == labels.len() * c * h * w,
            "{} pixel bytes for {} labels of shape {shape:?}",
            images.len(),
            labels.len()
        );
        ensure!(
            normalization.mean.len() == c && normalization.std.len() == c,
            "normalization has {} channels, images have {c}",
            normalization.mean.len()
        );
        ensure!(
            labels.iter().all(|&l| (l as usize) < NUM_CLASSES),
            "label out of range"
        );
        Ok(Self {
            split,
            channels: c,
            height: h,
            width: w,
            images,
            labels,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        self.labels.iter().for_each(|&l| c[l as usize] += 1);
        c
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        ensure!(
            indices.iter().all(|&i| i < self.len()),
            "subset index out of range"
        );
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Ok(Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            split: self.split,
            channels: self.channels,
            height: self.height,
            width: self.width,
            images: Vec::new(),
            labels: Vec::new(),
            normalization: self.normalization.clone(),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img = read(images_path)?;
    let lab = read(labels_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != 0x0803 {
        return Err(Error::format(images_path, format!("bad magic {magic:#010x}, expected 0x00000803")));
    }
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != 0x0801 {
        return Err(Error::format(labels_path, format!("bad magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::format(
            labels_path,
            format!("{n_labels} labels but {n} images in {}", images_path.display()),
        ));
    }
    let need = 16 + n * rows * cols;
    if img.len() != need {
        return Err(Error::format(
            images_path,
            format!("truncated or oversized: {} bytes, expected {need}", img.len()),
        ));
    }
    if lab.len() != 8 + n {
        return Err(Error::format(
            labels_path,
            format!("truncated or oversized: {} bytes, expected {}", lab.len(), 8 + n),
        ));
    }
    let labels = lab[8..].to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::format(labels_path, format!("label {bad} > 9")));
    }
    Dataset::new(
        split,
        [1, rows, cols],
        img[16..].to_vec(),
        labels,
        DatasetId::Mnist.normalization(),
    )
}

pub fn write_mnist_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    ensure!(ds.channels == 1, "IDX images are single-channel");
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [0x0803, ds.len() as u32, ds.height as u32, ds.width as u32] {
        img.extend_from_slice(&u32::to_be_bytes(v));
    }
    img.extend_from_slice(&ds.images);
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&0x0801u32.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend_from_slice(&ds.labels);
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

pub fn load_cifar10_bin(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    ensure!(!paths.is_empty(), "no CIFAR-10 batch files given");
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(Error::format(path, format!("record {r}: label {} > 9", rec[0])));
            }
            labels.push(rec[0]);
            images.extend_from_slice(&rec[1..]);
        }
    }
    Dataset::new(split, [3, 32, 32], images, labels, DatasetId::Cifar10.normalization())
}

pub fn write_cifar10_bin(ds: &Dataset, path: &Path) -> Result<()> {
    ensure!(ds.shape() == [3, 32, 32], "CIFAR-10 records are 3×32×32");
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i]);
        out.extend_from_slice(ds.image(i));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Class-dependent blobs on noise, deterministic in `seed`.
pub fn synthetic(split: Split, n: usize, seed: u64) -> Result<Dataset> {
    let [c, h, w] = DatasetId::Synthetic.input_shape();
    let label = match split {
        Split::Train => "synthetic-train",
        Split::Test => "synthetic-test",
    };
    let mut rng = seed::rng(seed, label);
    let mut images = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        let (cy, cx) = (2 + (class / 5) * 7, 1 + (class % 5) * 3);
        let (dy, dx) = (rng.gen_range(0..3), rng.gen_range(0..2));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let inside = (y >= cy + dy && y < cy + dy + 5) && (x >= cx + dx && x < cx + dx + 4);
                    let base = if inside { 150 + 30 * ((class + ch) % 3) as i32 } else { 60 };
                    let v = base + rng.gen_range(-40..=40);
                    images.push(v.clamp(0, 255) as u8);
                }
            }
        }
        labels.push(class as u8);
    }
    Dataset::new(split, [c, h, w], images, labels, DatasetId::Synthetic.normalization())
}

/// Dataset root: explicit setting, else the environment variable, else `./data`.
pub fn data_root(configured: Option<&Path>) -> PathBuf {
    configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn mnist_paths(root: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = root.join("mnist");
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn cifar_paths(root: &Path, split: Split) -> Vec<PathBuf> {
    let dir = root.join("cifar-10-batches-bin");
    match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

pub fn load(id: DatasetId, root: &Path, split: Split) -> Result<Dataset> {
    match id {
        DatasetId::Mnist => {
            let (i, l) = mnist_paths(root, split);
            load_mnist_idx(&i, &l, split)
        }
        DatasetId::Cifar10 => load_cifar10_bin(&cifar_paths(root, split), split),
        DatasetId::Synthetic => match split {
            Split::Train => synthetic(split, 600, 0),
            Split::Test => synthetic(split, 200, 0),
        },
    }
}

/// Class-stratified sample of `n` examples, returned in ascending index order.
/// Each class contributes in proportion to its share of the dataset; largest
/// remainders (ties to the lower class) absorb the rounding.
pub fn subset_indices(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    ensure!(n >= 1 && n <= ds.len(), "subset size {n} outside 1..={}", ds.len());
    let counts = ds.class_counts();
    let total = ds.len();
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * n / total).collect();
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(counts[c] * n % total), c));
    let mut missing = n - quota.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[c] < counts[c] {
            quota[c] += 1;
            missing -= 1;
        }
    }
    for c in 0..NUM_CLASSES {
        ensure!(quota[c] <= counts[c], "class {c} has {} examples, needs {}", counts[c], quota[c]);
    }
    let mut rng = seed::rng(seed, "subset");
    let mut picked = Vec::with_capacity(n);
    for c in 0..NUM_CLASSES {
        let mut members: Vec<usize> = (0..total).filter(|&i| ds.label(i) == c).collect();
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..quota[c]]);
    }
    picked.sort_unstable();
    Ok(picked)
}

pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    ds.select(&subset_indices(ds, n, seed)?)
}

pub fn write_index_list(path: &Path, indices: &[usize]) -> Result<()> {
    let text: String = indices.iter().map(|i| format!("{i}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_index_list(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| Error::format(path, format!("bad index line {l:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub random_crop: usize,
    pub horizontal_flip: f64,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            random_crop: 0,
            horizontal_flip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip) {
            return Err(Error::config(format!(
                "flip probability {} outside [0,1]",
                self.horizontal_flip
            )));
        }
        Ok(())
    }
}

/// Raw pixels of a batch before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBatch {
    pub shape: [usize; 3],
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
}

impl RawBatch {
    pub fn gather(ds: &Dataset, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * ds.image_len());
        for &i in indices {
            images.extend_from_slice(ds.image(i));
        }
        Self {
            shape: ds.shape(),
            images,
            labels: indices.iter().map(|&i| ds.label(i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per image: zero-pad by `random_crop` and crop back at a random offset,
/// then mirror horizontally with probability `horizontal_flip`.
pub fn augment(batch: &RawBatch, policy: &AugmentPolicy, rng: &mut impl Rng) -> RawBatch {
    let [c, h, w] = batch.shape;
    let p = policy.random_crop;
    let mut out = batch.clone();
    for (src, dst) in batch.images.chunks_exact(c * h * w).zip(out.images.chunks_exact_mut(c * h * w)) {
        let (dy, dx) = if p > 0 {
            (rng.gen_range(0..=2 * p), rng.gen_range(0..=2 * p))
        } else {
            (p, p)
        };
        let flip = policy.horizontal_flip > 0.0 && rng.gen_bool(policy.horizontal_flip);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = (y + dy) as isize - p as isize;
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = (xx + dx) as isize - p as isize;
                    let v = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0
                    };
                    dst[(ch * h + y) * w + x] = v;
                }
            }
        }
    }
    out
}

/// Normalized network input and class targets.
#[derive(Debug, Clone)]
pub struct Batch<T: Element> {
    pub inputs: Tensor<T>,
    pub targets: Vec<usize>,
}

impl<T: Element> Batch<T> {
    pub fn from_raw(raw: &RawBatch, norm: &Normalization) -> Result<Self> {
        let [c, h, w] = raw.shape;
        ensure!(!raw.is_empty(), "empty batch");
        ensure!(norm.mean.len() == c, "normalization/channel mismatch");
        let plane = h * w;
        let data = raw
            .images
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                T::lit((v as f64 / 255.0 - norm.mean[ch]) / norm.std[ch])
            })
            .collect();
        Ok(Self {
            inputs: Tensor::new(data, [raw.len(), c, h, w])?,
            targets: raw.labels.clone(),
        })
    }
}

/// Index lists of consecutive batches; shuffled when `rng` is given.
pub fn batch_indices(n: usize, batch_size: usize, rng: Option<&mut impl Rng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(r) = rng {
        order.shuffle(r);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
