//! Labelled datasets, subtasks and deterministic splits.

mod idx;

pub use idx::{encode_idx_images, encode_idx_labels};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::Matrix;
use crate::subspace::SubtaskSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Matrix,
    /// Dense ids in `0..class_names.len()`.
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Hex SHA-256 of the source bytes.
    pub source_digest: String,
    /// `original_class_ids[new_id]` is the class id in the source dataset.
    pub original_class_ids: Vec<usize>,
    /// Row index in the source dataset for every row.
    pub source_rows: Vec<usize>,
    /// `(height, width)` when rows are flattened images.
    pub image_shape: Option<(usize, usize)>,
}

impl LabeledDataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, source_digest: String) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput("dataset has no rows".into()));
        }
        let num_classes = labels.iter().max().unwrap() + 1;
        let mut present = vec![false; num_classes];
        labels.iter().for_each(|&l| present[l] = true);
        if let Some(missing) = present.iter().position(|p| !p) {
            return Err(Error::Format {
                context: "labels".into(),
                message: format!("label ids must be dense, class {missing} never occurs"),
            });
        }
        let n = labels.len();
        Ok(Self {
            inputs,
            labels,
            class_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
            source_digest,
            original_class_ids: (0..num_classes).collect(),
            source_rows: (0..n).collect(),
            image_shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }

    /// Rows at `indices`, keeping class tables.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            source_digest: self.source_digest.clone(),
            original_class_ids: self.original_class_ids.clone(),
            source_rows: indices.iter().map(|&i| self.source_rows[i]).collect(),
            image_shape: self.image_shape,
        }
    }

    pub fn select_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "format")]
pub enum DatasetSource {
    /// Header row, numeric feature columns, integer label in the last column.
    CsvLabeled { path: PathBuf },
    /// IDX image file (`0x00000803`) and IDX label file (`0x00000801`).
    IdxPair { images: PathBuf, labels: PathBuf },
}

pub fn load_dataset(source: &DatasetSource) -> Result<LabeledDataset> {
    match source {
        DatasetSource::CsvLabeled { path } => load_csv(path),
        DatasetSource::IdxPair { images, labels } => load_idx_pair(images, labels),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn hex_digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    parse_csv(&bytes, &path.display().to_string())
}

pub fn parse_csv(bytes: &[u8], context: &str) -> Result<LabeledDataset> {
    let malformed = |line: u64, message: String| Error::Malformed {
        context: context.to_string(),
        offset: line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| malformed(1, format!("unreadable header: {e}")))?
        .clone();
    if headers.len() < 2 {
        return Err(malformed(
            1,
            "header needs at least one feature column and a label column".into(),
        ));
    }
    let d = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| malformed(line, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(malformed(
                line,
                format!("ragged row: {} fields, header has {}", record.len(), headers.len()),
            ));
        }
        for field in record.iter().take(d) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| malformed(line, format!("non-numeric feature '{field}'")))?;
            if !v.is_finite() {
                return Err(malformed(line, format!("non-finite feature '{field}'")));
            }
            data.push(v);
        }
        let raw = record[d].trim();
        let label: i64 = raw
            .parse()
            .map_err(|_| malformed(line, format!("label '{raw}' is not an integer")))?;
        if label < 0 {
            return Err(malformed(line, format!("label {label} out of range")));
        }
        labels.push(label as usize);
    }
    let n = labels.len();
    let inputs = Matrix::from_vec(n, d, data)?;
    LabeledDataset::new(inputs, labels, hex_digest(&[bytes]))
}

pub fn load_idx_pair(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let img_bytes = read_file(images)?;
    let lbl_bytes = read_file(labels)?;
    let (n, h, w, pixels) = idx::decode_images(&img_bytes, &images.display().to_string())?;
    let lbl = idx::decode_labels(&lbl_bytes, &labels.display().to_string())?;
    if lbl.len() != n {
        return Err(Error::Format {
            context: labels.display().to_string(),
            message: format!("{} labels for {n} images", lbl.len()),
        });
    }
    let inputs = Matrix::from_vec(n, h * w, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let mut ds = LabeledDataset::new(
        inputs,
        lbl.iter().map(|&l| l as usize).collect(),
        hex_digest(&[&img_bytes, &lbl_bytes]),
    )?;
    ds.image_shape = Some((h, w));
    Ok(ds)
}

/// Reads a subtask definition (`name`, `class_ids`, optional `class_names`).
pub fn load_subtask(path: impl AsRef<Path>) -> Result<SubtaskSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format {
        context: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Keeps the subtask's rows and relabels them `0..K` in subtask order.
pub fn apply_subtask(dataset: &LabeledDataset, subtask: &SubtaskSpec) -> Result<LabeledDataset> {
    subtask.validate(dataset.num_classes())?;
    let mut new_id = vec![None; dataset.num_classes()];
    for (i, &c) in subtask.class_ids.iter().enumerate() {
        new_id[c] = Some(i);
    }
    let rows: Vec<usize> = (0..dataset.len())
        .filter(|&i| new_id[dataset.labels[i]].is_some())
        .collect();
    let mut out = dataset.subset(&rows);
    out.labels = rows
        .iter()
        .map(|&i| new_id[dataset.labels[i]].unwrap())
        .collect();
    out.original_class_ids = subtask
        .class_ids
        .iter()
        .map(|&c| dataset.original_class_ids[c])
        .collect();
    out.class_names = match &subtask.class_names {
        Some(names) => names.clone(),
        None => subtask
            .class_ids
            .iter()
            .map(|&c| dataset.class_names[c].clone())
            .collect(),
    };
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Every training index, stratified-interleaved so any prefix is stratified.
    pub train_pool: Vec<usize>,
    /// Prefix of `train_pool` selected by `training_fraction`.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub training_fraction: f64,
    pub seed: u64,
}

impl SplitPlan {
    /// Same plan with another training fraction; val and test are untouched.
    pub fn with_fraction(&self, training_fraction: f64) -> Result<SplitPlan> {
        check_fraction(training_fraction)?;
        let mut p = self.clone();
        p.training_fraction = training_fraction;
        p.train = prefix(&self.train_pool, training_fraction);
        Ok(p)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::Parameter(format!(
            "training fraction must lie in (0, 1], got {f}"
        )));
    }
    Ok(())
}

fn prefix(pool: &[usize], fraction: f64) -> Vec<usize> {
    let n = ((pool.len() as f64) * fraction).round() as usize;
    pool[..n.clamp(1.min(pool.len()), pool.len())].to_vec()
}

/// Seeded stratified train/val/test split.
///
/// Each class is shuffled with a stream derived from the seed and its original
/// class id, so the split of one class does not depend on which other classes
/// are present. The training indices are interleaved across classes, which
/// makes every prefix (and hence every training fraction) stratified and the
/// smaller fractions nested inside the larger ones.
pub fn make_split(
    dataset: &LabeledDataset,
    fractions: [f64; 3],
    training_fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    check_fraction(training_fraction)?;
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Parameter(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    if fractions[0] == 0.0 {
        return Err(Error::Parameter("training fraction of the split is zero".into()));
    }
    let strata = fractions.iter().filter(|&&f| f > 0.0).count();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut train_keyed: Vec<(f64, usize, usize)> = Vec::new();
    let (mut val, mut test) = (Vec::new(), Vec::new());
    for (class, mut members) in by_class.into_iter().enumerate() {
        let original = dataset.original_class_ids[class];
        if members.len() < strata {
            return Err(Error::Stratification(format!(
                "class {original} has {} samples, {strata} strata need one each",
                members.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (original as u64).wrapping_add(1),
        );
        members.shuffle(&mut rng);
        let n = members.len();
        let mut n_train = ((n as f64) * fractions[0]).round() as usize;
        let mut n_val = ((n as f64) * fractions[1]).round() as usize;
        n_train = n_train.clamp(1, n);
        if fractions[1] > 0.0 {
            n_val = n_val.max(1);
        }
        if fractions[2] > 0.0 && n_train + n_val >= n {
            // leave one for test
            if n_val > 1 {
                n_val -= 1;
            } else {
                n_train -= 1;
            }
        }
        n_val = n_val.min(n - n_train);
        for (pos, &idx) in members[..n_train].iter().enumerate() {
            train_keyed.push(((pos as f64 + 0.5) / n_train as f64, original, idx));
        }
        val.extend_from_slice(&members[n_train..n_train + n_val]);
        test.extend_from_slice(&members[n_train + n_val..]);
    }
    train_keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let train_pool: Vec<usize> = train_keyed.into_iter().map(|(_, _, i)| i).collect();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        train: prefix(&train_pool, training_fraction),
        train_pool,
        val,
        test,
        training_fraction,
        seed,
    })
}
