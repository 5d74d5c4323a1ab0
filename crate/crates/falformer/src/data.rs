//! Bag ingestion and generation: the FALB binary format, a plain-text bag
//! format for hand-written fixtures, manifest-driven datasets, and a seeded
//! synthetic multiple-instance generator that stands in for slide-level
//! embedding bags.
//!
//! Embeddings are stored as little-endian f32 and widened to f64 on load;
//! compute precision is owned by the numerics module.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const BAG_MAGIC: [u8; 4] = *b"FALB";
pub const BAG_VERSION: u8 = 1;

/// One bag of patch embeddings with its label.
#[derive(Debug, Clone)]
pub struct FeatureBag {
    pub id: String,
    /// N x d_f token matrix.
    pub tokens: Matrix,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(tag: &str) -> Option<Split> {
        match tag {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Manifest-driven dataset of bags, split into train/val/test.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<FeatureBag>,
    pub val: Vec<FeatureBag>,
    pub test: Vec<FeatureBag>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[FeatureBag] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn d_f(&self) -> Option<usize> {
        self.train
            .first()
            .or(self.val.first())
            .or(self.test.first())
            .map(|b| b.tokens.cols())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes a bag into the FALB byte layout.
pub fn bag_to_bytes(bag: &FeatureBag) -> Vec<u8> {
    let n = bag.tokens.rows() as u32;
    let d_f = bag.tokens.cols() as u32;
    let id_bytes = bag.id.as_bytes();
    let mut out = Vec::with_capacity(18 + id_bytes.len() + bag.tokens.data().len() * 4);
    out.extend_from_slice(&BAG_MAGIC);
    out.push(BAG_VERSION);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d_f.to_le_bytes());
    out.extend_from_slice(&(id_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(id_bytes);
    out.push(bag.label as u8);
    for &v in bag.tokens.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Writes a bag in the FALB binary format.
pub fn save_bag(bag: &FeatureBag, path: &Path) -> Result<()> {
    fs::write(path, bag_to_bytes(bag)).map_err(|e| io_err(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.display().to_string(),
                context,
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, context: &'static str) -> Result<u32> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse_bag_binary(bytes: &[u8], path: &Path) -> Result<FeatureBag> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != BAG_MAGIC {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: BAG_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.take(1, "version")?[0];
    if version != BAG_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.display().to_string(),
            found: version,
        });
    }
    let n = r.u32("token count")? as u64;
    let d_f = r.u32("feature dim")? as u64;
    if n == 0 || d_f == 0 || n * d_f * 4 > (bytes.len() as u64) {
        return Err(Error::ShapeOverflow {
            path: path.display().to_string(),
            rows: n,
            cols: d_f,
        });
    }
    let id_len = r.u32("id length")? as usize;
    let id_bytes = r.take(id_len, "id")?;
    let id = std::str::from_utf8(id_bytes)
        .map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "bag id is not valid UTF-8".into(),
        })?
        .to_string();
    let label = r.take(1, "label")?[0] as usize;
    let count = (n * d_f) as usize;
    let payload = r.take(count * 4, "feature payload")?;
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: format!("{} trailing bytes after payload", bytes.len() - r.pos),
        });
    }
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: "non-finite feature value in payload".into(),
            });
        }
        data.push(v as f64);
    }
    Ok(FeatureBag {
        id,
        tokens: Matrix::from_vec(n as usize, d_f as usize, data)?,
        label,
    })
}

fn parse_bag_text(text: &str, path: &Path) -> Result<FeatureBag> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut id = None;
    let mut label = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(v) = line.strip_prefix("id=") {
            id = Some(v.trim().to_string());
        } else if let Some(v) = line.strip_prefix("label=") {
            label = Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|e| perr(i + 1, format!("bad label: {e}")))?,
            );
        } else {
            let row: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| perr(i + 1, format!("bad feature value: {e}")))?;
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(perr(
                        i + 1,
                        format!("row has {} values, expected {}", row.len(), first.len()),
                    ));
                }
            }
            rows.push(row);
        }
    }
    let id = id.ok_or_else(|| perr(0, "missing id= line".into()))?;
    let label = label.ok_or_else(|| perr(0, "missing label= line".into()))?;
    if rows.is_empty() {
        return Err(perr(0, "no token rows".into()));
    }
    let d_f = rows[0].len();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    let n = data.len() / d_f;
    Ok(FeatureBag {
        id,
        tokens: Matrix::from_vec(n, d_f, data)?,
        label,
    })
}

/// Loads a bag, dispatching on the FALB magic; files without it are parsed
/// as the plain-text fixture format.
pub fn load_bag(path: &Path) -> Result<FeatureBag> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() >= 4 && bytes[0..4] == BAG_MAGIC {
        parse_bag_binary(&bytes, path)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "file is neither FALB binary nor UTF-8 text".into(),
        })?;
        parse_bag_text(&text, path)
    }
}

/// Loads a manifest: one `path<TAB>label<TAB>split` record per line, paths
/// relative to the manifest's directory, `#` comments allowed.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut dataset = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        n_classes: 2,
    };
    let mut seen_ids = std::collections::HashSet::new();
    let mut max_label = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!(
                    "expected 3 tab-separated fields (path, label, split), got {}",
                    parts.len()
                ),
            });
        }
        let label: usize = parts[1].trim().parse().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("bad label: {e}"),
        })?;
        let split = Split::parse(parts[2].trim()).ok_or_else(|| Error::UnknownSplit {
            path: path.display().to_string(),
            line: i + 1,
            tag: parts[2].trim().to_string(),
        })?;
        let bag = load_bag(&base.join(parts[0].trim()))?;
        if bag.label != label {
            return Err(Error::LabelMismatch {
                id: bag.id,
                manifest: label,
                bag: bag.label,
            });
        }
        if !seen_ids.insert(bag.id.clone()) {
            return Err(Error::DuplicateId { id: bag.id });
        }
        max_label = max_label.max(label);
        match split {
            Split::Train => dataset.train.push(bag),
            Split::Val => dataset.val.push(bag),
            Split::Test => dataset.test.push(bag),
        }
    }
    if dataset.train.is_empty() && dataset.val.is_empty() && dataset.test.is_empty() {
        return Err(Error::EmptyInput("manifest lists no bags"));
    }
    dataset.n_classes = (max_label + 1).max(2);
    Ok(dataset)
}

/// Writes all bags under `dir/bags/` and a manifest at `dir/manifest.tsv`;
/// returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| io_err(&bag_dir, e))?;
    let mut manifest = String::new();
    for (split, bags) in [
        (Split::Train, &dataset.train),
        (Split::Val, &dataset.val),
        (Split::Test, &dataset.test),
    ] {
        for bag in bags.iter() {
            let rel = format!("bags/{}.falb", bag.id);
            save_bag(bag, &dir.join(&rel))?;
            manifest.push_str(&format!("{rel}\t{}\t{}\n", bag.label, split.as_str()));
        }
    }
    let manifest_path = dir.join("manifest.tsv");
    fs::write(&manifest_path, manifest).map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Parameters of the synthetic multiple-instance task.
///
/// Negative bags draw every token from the non-signal Gaussian clusters;
/// positive bags additionally draw `ceil(signal_fraction * N)` tokens from
/// the signal cluster, so the multiple-instance assumption (a positive bag
/// holds at least one signal instance) is true by construction.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Bags per split: train, val, test.
    pub bags: [usize; 3],
    pub d_f: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub n_clusters: usize,
    pub signal_cluster: usize,
    /// Fraction of a positive bag's tokens drawn from the signal cluster,
    /// in (0, 1].
    pub signal_fraction: f64,
    /// Distance scale between cluster centers; 0 collapses all clusters.
    pub separation: f64,
    pub noise_sigma: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.signal_fraction <= 0.0 || self.signal_fraction > 1.0 {
            return Err(Error::InvalidArg("signal fraction must be in (0, 1]".into()));
        }
        if self.separation < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::InvalidArg("separation and sigma must be >= 0".into()));
        }
        if self.n_clusters < 2 || self.signal_cluster >= self.n_clusters {
            return Err(Error::InvalidArg(
                "need >= 2 clusters and a valid signal cluster index".into(),
            ));
        }
        if self.tokens_min == 0 || self.tokens_max < self.tokens_min || self.d_f == 0 {
            return Err(Error::InvalidArg("bad token range or feature dim".into()));
        }
        Ok(())
    }
}

/// Cluster centers for a spec/seed pair: seeded unit directions scaled by the
/// separation. Exposed so tests can run nearest-centroid oracles.
pub fn synth_centers(spec: &SynthSpec, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    Matrix::from_fn(spec.n_clusters, spec.d_f, |_, _| normal.sample(&mut rng))
        .into_unit_rows()
        .scale(spec.separation)
}

trait UnitRows {
    fn into_unit_rows(self) -> Matrix;
}

impl UnitRows for Matrix {
    fn into_unit_rows(mut self) -> Matrix {
        for i in 0..self.rows() {
            let norm = self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in self.row_mut(i) {
                    *v /= norm;
                }
            }
        }
        self
    }
}

/// Deterministic synthetic dataset; labels alternate so each split is
/// balanced to within one bag.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let centers = synth_centers(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut dataset = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        n_classes: 2,
    };
    let non_signal: Vec<usize> = (0..spec.n_clusters)
        .filter(|&c| c != spec.signal_cluster)
        .collect();
    for (split, count) in [
        (Split::Train, spec.bags[0]),
        (Split::Val, spec.bags[1]),
        (Split::Test, spec.bags[2]),
    ] {
        for i in 0..count {
            let label = i % 2;
            let n = rng.random_range(spec.tokens_min..=spec.tokens_max);
            let n_signal = if label == 1 {
                (spec.signal_fraction * n as f64).ceil() as usize
            } else {
                0
            };
            let mut clusters: Vec<usize> = Vec::with_capacity(n);
            for _ in 0..n_signal {
                clusters.push(spec.signal_cluster);
            }
            for _ in n_signal..n {
                clusters.push(non_signal[rng.random_range(0..non_signal.len())]);
            }
            for j in (1..clusters.len()).rev() {
                let k = rng.random_range(0..=j);
                clusters.swap(j, k);
            }
            let mut data = Vec::with_capacity(n * spec.d_f);
            for &c in &clusters {
                for d in 0..spec.d_f {
                    data.push(centers.get(c, d) + spec.noise_sigma * normal.sample(&mut rng));
                }
            }
            let bag = FeatureBag {
                id: format!("{}-{i:04}", split.as_str()),
                tokens: Matrix::from_vec(n, spec.d_f, data)?,
                label,
            };
            match split {
                Split::Train => dataset.train.push(bag),
                Split::Val => dataset.val.push(bag),
                Split::Test => dataset.test.push(bag),
            }
        }
    }
    Ok(dataset)
}
