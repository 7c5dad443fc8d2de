//! Datasets: IDX ingestion, deterministic splits, a synthetic blob
//! generator and a versioned binary cache.
//!
//! Pixels are stored as `f32` with value `byte / 255.0`; consumers widen
//! rows to `f64` when they build design matrices.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const MAX_CLASSES: u8 = 10;
pub const DATA_DIR_ENV: &str = "WEAKNESSLAB_DATA_DIR";

const CACHE_MAGIC: &[u8; 4] = b"WLDS";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    n_features: usize,
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, n_features: usize, images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::arg("dataset needs at least one feature"));
        }
        if images.len() != labels.len() * n_features {
            return Err(Error::arg(format!(
                "{} pixels for {} labels of width {n_features}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= MAX_CLASSES) {
            return Err(Error::arg(format!("label {l} out of range")));
        }
        if images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::arg("pixel outside [0, 1]"));
        }
        Ok(Self {
            name: name.into(),
            n_features,
            images,
            labels,
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

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.images[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Row-major `f64` design matrix and labels for the given rows.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut xs = Vec::with_capacity(indices.len() * self.n_features);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            xs.extend(self.row(i).iter().map(|&p| p as f64));
            ys.push(self.labels[i] as usize);
        }
        (xs, ys)
    }

    pub fn all(&self) -> (Vec<f64>, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.gather(&idx)
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + self.name.len() + self.labels.len() + 4 * self.images.len());
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.labels.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.n_features as u64).to_le_bytes());
        buf.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.name.as_bytes());
        buf.extend_from_slice(&self.labels);
        for p in &self.images {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Cache layout (little-endian): `"WLDS"`, u32 version, u64 rows,
    /// u64 features, u32 name length, name bytes, `rows` label bytes, then
    /// `rows * features` f32 pixels.
    pub fn load_cache(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file = path.display().to_string();
        let fmt = |field: &'static str, detail: String| Error::Format {
            file: file.clone(),
            field,
            detail,
        };
        let mut cur = Cursor::new(&bytes);
        let magic = cur.take(4).ok_or_else(|| fmt("magic", "truncated".into()))?;
        if magic != CACHE_MAGIC {
            return Err(fmt("magic", format!("{magic:?}")));
        }
        let version = cur.u32_le().ok_or_else(|| fmt("version", "truncated".into()))?;
        if version != CACHE_VERSION {
            return Err(fmt("version", format!("unsupported version {version}")));
        }
        let rows = cur.u64_le().ok_or_else(|| fmt("rows", "truncated".into()))? as usize;
        let feats = cur.u64_le().ok_or_else(|| fmt("features", "truncated".into()))? as usize;
        let name_len = cur.u32_le().ok_or_else(|| fmt("name", "truncated".into()))? as usize;
        let name = cur.take(name_len).ok_or_else(|| fmt("name", "truncated".into()))?;
        let name = String::from_utf8(name.to_vec()).map_err(|e| fmt("name", e.to_string()))?;
        let labels = cur.take(rows).ok_or_else(|| fmt("labels", "truncated".into()))?.to_vec();
        let pixel_bytes = rows
            .checked_mul(feats)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| fmt("pixels", "size overflow".into()))?;
        let raw = cur.take(pixel_bytes).ok_or_else(|| fmt("pixels", "truncated".into()))?;
        let images = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Dataset::new(name, feats, images, labels).map_err(|e| fmt("contents", e.to_string()))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32_le(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64_le(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize, file: &str, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            file: file.to_string(),
            field,
            detail: "file truncated inside header".into(),
        })
}

/// Decodes a pair of big-endian IDX files (images `0x00000803`, labels
/// `0x00000801`) and scales pixels by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    let img_name = images_path.display().to_string();
    let lab_name = labels_path.display().to_string();

    let magic = be_u32(&img, 0, &img_name, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            file: img_name,
            field: "magic",
            detail: format!("expected {IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let n = be_u32(&img, 4, &img_name, "count")? as usize;
    let rows = be_u32(&img, 8, &img_name, "rows")? as usize;
    let cols = be_u32(&img, 12, &img_name, "cols")? as usize;
    let features = rows * cols;
    if features == 0 {
        return Err(Error::Format {
            file: img_name,
            field: "rows",
            detail: "zero-sized images".into(),
        });
    }
    let body = &img[16..];
    if body.len() != n * features {
        return Err(Error::Format {
            file: img_name,
            field: "pixels",
            detail: format!("header promises {} bytes, file holds {}", n * features, body.len()),
        });
    }

    let magic = be_u32(&lab, 0, &lab_name, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            file: lab_name,
            field: "magic",
            detail: format!("expected {LABELS_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let n_labels = be_u32(&lab, 4, &lab_name, "count")? as usize;
    if n_labels != n {
        return Err(Error::Format {
            file: lab_name,
            field: "count",
            detail: format!("{n_labels} labels for {n} images"),
        });
    }
    let labels = &lab[8..];
    if labels.len() != n {
        return Err(Error::Format {
            file: lab_name,
            field: "labels",
            detail: format!("header promises {n} bytes, file holds {}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= MAX_CLASSES) {
        return Err(Error::Format {
            file: lab_name,
            field: "labels",
            detail: format!("label {bad} out of range"),
        });
    }

    let images = body.iter().map(|&b| b as f32 / 255.0).collect();
    let name = images_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, features, images, labels.to_vec())
}

/// Official train and test partitions of one dataset.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataBundle {
    pub fn name(&self) -> &str {
        self.train.name()
    }

    /// Loads `<dir>/{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
    pub fn load_dir(dir: &Path, name: &str) -> Result<Self> {
        let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
        let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
        Ok(Self {
            train: Dataset { name: name.to_string(), ..train },
            test: Dataset { name: name.to_string(), ..test },
        })
    }
}

/// Resolves `<root>/<dataset>`, where root is the override, else
/// `$WEAKNESSLAB_DATA_DIR`, else `./data`.
pub fn data_dir(override_dir: Option<&Path>, dataset: &str) -> PathBuf {
    let root = override_dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    root.join(dataset)
}

/// Where the unseen probe points come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    /// Training-pool examples not chosen for training.
    #[default]
    TrainLeftover,
    /// The official test set; probes are then removed from `test_indices`.
    TestSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    /// Indices into the training partition.
    pub train_indices: Vec<usize>,
    /// Indices into the partition named by `probe_source`.
    pub probe_indices: Vec<usize>,
    /// Indices into the test partition.
    pub test_indices: Vec<usize>,
    pub probe_source: ProbeSource,
    pub seed: u64,
}

impl Split {
    pub fn probe_dataset<'a>(&self, bundle: &'a DataBundle) -> &'a Dataset {
        match self.probe_source {
            ProbeSource::TrainLeftover => &bundle.train,
            ProbeSource::TestSet => &bundle.test,
        }
    }
}

/// Shuffles the training partition with `seed`, takes the first `n_train`
/// as training points and the next `n_probe` as probes. Depends only on the
/// partition sizes, the requested sizes and the seed.
pub fn make_split(bundle: &DataBundle, n_train: usize, n_probe: usize, seed: u64) -> Result<Split> {
    make_split_with(bundle, n_train, n_probe, ProbeSource::TrainLeftover, seed)
}

pub fn make_split_with(
    bundle: &DataBundle,
    n_train: usize,
    n_probe: usize,
    source: ProbeSource,
    seed: u64,
) -> Result<Split> {
    let mut rng = rng::stream_rng(seed, Stream::Split);
    let mut pool: Vec<usize> = (0..bundle.train.len()).collect();
    pool.shuffle(&mut rng);
    let mut test_indices: Vec<usize> = (0..bundle.test.len()).collect();
    let (train_indices, probe_indices) = match source {
        ProbeSource::TrainLeftover => {
            if n_train + n_probe > pool.len() {
                return Err(Error::arg(format!(
                    "{n_train} train + {n_probe} probe points requested from {} examples",
                    pool.len()
                )));
            }
            (pool[..n_train].to_vec(), pool[n_train..n_train + n_probe].to_vec())
        }
        ProbeSource::TestSet => {
            if n_train > pool.len() || n_probe > test_indices.len() {
                return Err(Error::arg(format!(
                    "{n_train} train / {n_probe} probe points requested from {} / {} examples",
                    pool.len(),
                    test_indices.len()
                )));
            }
            let mut shuffled = test_indices.clone();
            shuffled.shuffle(&mut rng);
            let probes = shuffled[..n_probe].to_vec();
            let mut taken = vec![false; test_indices.len()];
            for &p in &probes {
                taken[p] = true;
            }
            test_indices.retain(|&i| !taken[i]);
            (pool[..n_train].to_vec(), probes)
        }
    };
    Ok(Split {
        train_indices,
        probe_indices,
        test_indices,
        probe_source: source,
        seed,
    })
}

/// `k` Gaussian blobs of width 0.05 in `[0,1]^d`, point `i` drawn from blob
/// `i % k`. Blob centres lie in `[0.15, 0.85]^d` and are rejection-sampled to
/// sit at least 6 widths apart (falling back to the best of 1000 draws when
/// the box is too crowded). Coordinates are clipped to `[0, 1]`.
pub fn synthetic_gaussian(n: usize, d: usize, k: usize, seed: u64) -> Result<Dataset> {
    const WIDTH: f64 = 0.05;
    if n == 0 || d == 0 || k == 0 {
        return Err(Error::arg("synthetic dataset needs positive n, d and k"));
    }
    if k > MAX_CLASSES as usize {
        return Err(Error::arg(format!("at most {MAX_CLASSES} classes")));
    }
    let mut rng = rng::stream_rng(seed, Stream::Synthetic);
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(k);
    while centres.len() < k {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..1000 {
            let c: Vec<f64> = (0..d).map(|_| rng.gen_range(0.15..0.85)).collect();
            let gap = centres
                .iter()
                .map(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            if gap >= 6.0 * WIDTH {
                best = Some((gap, c));
                break;
            }
            if best.as_ref().map_or(true, |(g, _)| gap > *g) {
                best = Some((gap, c));
            }
        }
        centres.push(best.expect("at least one draw").1);
    }
    let normal = rand_distr_normal();
    let mut images = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let blob = i % k;
        for &c in &centres[blob] {
            let z: f64 = normal(&mut rng);
            images.push((c + WIDTH * z).clamp(0.0, 1.0) as f32);
        }
        labels.push(blob as u8);
    }
    Dataset::new(format!("synthetic-{n}x{d}-k{k}-s{seed}"), d, images, labels)
}

// Box–Muller; keeps the dependency list to `rand`.
fn rand_distr_normal() -> impl Fn(&mut rng::Rng) -> f64 {
    |rng: &mut rng::Rng| {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Writes a dataset as an IDX image/label pair (pixels re-quantised to
/// bytes). Used by tests and the synthetic fixtures.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path, rows: u32, cols: u32) -> Result<()> {
    if (rows * cols) as usize != ds.n_features {
        return Err(Error::arg("rows * cols must equal the feature count"));
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&rows.to_be_bytes());
    img.extend_from_slice(&cols.to_be_bytes());
    img.extend(ds.images.iter().map(|&p| (p * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend_from_slice(&ds.labels);
    fs::File::create(images_path)
        .and_then(|mut f| f.write_all(&img))
        .map_err(|e| Error::io(images_path, e))?;
    fs::File::create(labels_path)
        .and_then(|mut f| f.write_all(&lab))
        .map_err(|e| Error::io(labels_path, e))
}
