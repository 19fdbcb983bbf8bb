//! Deterministic task-sequence generation and dataset files.
//!
//! Synthetic Gaussian-prototype tasks keep runs fast and reproducible:
//! class prototypes live in `[0,1]^dims`, samples add seeded Gaussian
//! noise, and permuted variants scramble the feature order per task. All
//! generated values are quantized to f32 so dataset files (which store 32-bit
//! floats) round-trip bit-exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::Batch;
use crate::rng::Rng;

/// One task's data: disjoint train/test splits, its label arity, a canonical
/// identity, and a provenance tag recording generator and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub class_count: usize,
    pub train: Batch,
    pub test: Batch,
    pub provenance: String,
}

/// A flat labeled pool, the unit stored in dataset files and consumed by the
/// class-split generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

/// A task order: a permutation of 0..T.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskOrder {
    perm: Vec<usize>,
}

impl TaskOrder {
    pub fn identity(t: usize) -> Self {
        TaskOrder {
            perm: (0..t).collect(),
        }
    }

    pub fn seeded(t: usize, seed: u64) -> Self {
        let mut rng = Rng::derive(seed, 0x006f_7264_6572);
        TaskOrder {
            perm: rng.permutation(t),
        }
    }

    pub fn explicit(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::InvalidInput(format!(
                    "not a permutation of 0..{}: {:?}",
                    perm.len(),
                    perm
                )));
            }
            seen[p] = true;
        }
        Ok(TaskOrder { perm })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Reorder a canonical task list into this order.
    pub fn apply(&self, tasks: &[TaskDataset]) -> Result<Vec<TaskDataset>> {
        if tasks.len() != self.perm.len() {
            return Err(Error::InvalidInput(format!(
                "order covers {} tasks, got {}",
                self.perm.len(),
                tasks.len()
            )));
        }
        Ok(self.perm.iter().map(|&p| tasks[p].clone()).collect())
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Synthetic Gaussian-prototype task. Prototypes are uniform in
/// `[0,1]^dims`; samples are prototype + noise·N(0,1), clamped to `[0,1]`.
/// Train and test
/// draw `samples_per_class` rows per class each. With noise 0 every sample
/// equals its prototype.
pub fn gen_synthetic(
    classes: usize,
    dims: usize,
    samples_per_class: usize,
    noise: f64,
    seed: u64,
) -> TaskDataset {
    assert!(classes >= 1 && dims >= 1 && samples_per_class >= 1);
    let mut rng = Rng::derive(seed, 0x0073_796e_7468);
    let prototypes = Matrix::from_fn(classes, dims, |_, _| rng.uniform(0.0, 1.0));
    let draw = |rng: &mut Rng| -> (Matrix, Vec<usize>) {
        let n = classes * samples_per_class;
        let mut data = Vec::with_capacity(n * dims);
        let mut labels = Vec::with_capacity(n);
        for c in 0..classes {
            for _ in 0..samples_per_class {
                for d in 0..dims {
                    let v = prototypes.get(c, d) + noise * rng.normal();
                    data.push(quantize(v.clamp(0.0, 1.0)));
                }
                labels.push(c);
            }
        }
        (Matrix::from_vec(n, dims, data), labels)
    };
    let (train_x, train_y) = draw(&mut rng);
    let (test_x, test_y) = draw(&mut rng);
    TaskDataset {
        task_id: 0,
        class_count: classes,
        train: Batch::new(train_x, train_y),
        test: Batch::new(test_x, test_y),
        provenance: format!("synthetic(classes={classes},dims={dims},n={samples_per_class},noise={noise},seed={seed})"),
    }
}

/// Permuted-feature task sequence: task 0 is the base unchanged, tasks
/// 1..T-1 apply a seeded feature permutation to every input row. Labels are
/// untouched.
pub fn gen_permuted(base: &TaskDataset, t: usize, seed: u64) -> Vec<TaskDataset> {
    assert!(t >= 1);
    let dims = base.train.inputs.cols();
    let mut rng = Rng::derive(seed, 0x7065_726d);
    let mut out = Vec::with_capacity(t);
    let mut first = base.clone();
    first.task_id = 0;
    out.push(first);
    for task in 1..t {
        let perm = rng.permutation(dims);
        let apply = |b: &Batch| -> Batch {
            let inputs = Matrix::from_fn(b.inputs.rows(), dims, |r, c| b.inputs.get(r, perm[c]));
            Batch::new(inputs, b.labels.clone())
        };
        out.push(TaskDataset {
            task_id: task,
            class_count: base.class_count,
            train: apply(&base.train),
            test: apply(&base.test),
            provenance: format!("permuted(seed={seed},task={task},base={})", base.provenance),
        });
    }
    out
}

/// Partition a labeled pool into class-disjoint tasks of `classes_per_task`
/// classes each, relabeled to [0, classes_per_task). Group g covers original
/// classes [g·cpt, (g+1)·cpt) and the group sequence follows `order`. Within
/// each task every fifth sample goes to the test split.
pub fn gen_split(
    pool: &LabeledDataset,
    classes_per_task: usize,
    order: &TaskOrder,
) -> Result<Vec<TaskDataset>> {
    if classes_per_task == 0 || !pool.class_count.is_multiple_of(classes_per_task) {
        return Err(Error::InvalidInput(format!(
            "{} classes cannot split into groups of {classes_per_task}",
            pool.class_count
        )));
    }
    let groups = pool.class_count / classes_per_task;
    if order.len() != groups {
        return Err(Error::InvalidInput(format!(
            "order covers {} groups, split produces {groups}",
            order.len()
        )));
    }
    let dims = pool.inputs.cols();
    let mut out = Vec::with_capacity(groups);
    for &g in order.as_slice() {
        let lo = g * classes_per_task;
        let hi = lo + classes_per_task;
        let mut train_rows = Vec::new();
        let mut train_labels = Vec::new();
        let mut test_rows = Vec::new();
        let mut test_labels = Vec::new();
        let mut count = 0usize;
        for (row, &label) in pool.labels.iter().enumerate() {
            if label < lo || label >= hi {
                continue;
            }
            let rowdata: Vec<f64> = (0..dims).map(|c| pool.inputs.get(row, c)).collect();
            if count % 5 == 4 {
                test_rows.extend(rowdata);
                test_labels.push(label - lo);
            } else {
                train_rows.extend(rowdata);
                train_labels.push(label - lo);
            }
            count += 1;
        }
        out.push(TaskDataset {
            task_id: g,
            class_count: classes_per_task,
            train: Batch::new(
                Matrix::from_vec(train_labels.len(), dims, train_rows),
                train_labels,
            ),
            test: Batch::new(
                Matrix::from_vec(test_labels.len(), dims, test_rows),
                test_labels,
            ),
            provenance: format!("split(group={g},classes={lo}..{hi})"),
        });
    }
    Ok(out)
}

const DATASET_MAGIC: &[u8] = b"HDSET1\n";

/// Write a labeled pool: magic, ASCII header, blank line, then per record
/// `dims` little-endian f32 features and one little-endian u32 label.
pub fn save_dataset(path: &Path, d: &LabeledDataset) -> Result<()> {
    let n = d.labels.len();
    let dims = d.inputs.cols();
    let mut bytes = Vec::with_capacity(64 + n * (4 * dims + 4));
    bytes.extend_from_slice(DATASET_MAGIC);
    bytes.extend_from_slice(format!("count={n}\n").as_bytes());
    bytes.extend_from_slice(format!("dims={dims}\n").as_bytes());
    bytes.extend_from_slice(format!("classes={}\n", d.class_count).as_bytes());
    bytes.push(b'\n');
    for row in 0..n {
        for c in 0..dims {
            bytes.extend_from_slice(&(d.inputs.get(row, c) as f32).to_le_bytes());
        }
        bytes.extend_from_slice(&(d.labels[row] as u32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Load a dataset file. Files starting with the binary magic parse as the
/// native format; anything else is treated as CSV with one `label, f0, f1,
/// …` row per sample.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(DATASET_MAGIC) {
        parse_binary(&bytes[DATASET_MAGIC.len()..])
    } else {
        parse_csv(&bytes)
    }
}

fn parse_binary(rest: &[u8]) -> Result<LabeledDataset> {
    let header_end = find_blank_line(rest)
        .ok_or_else(|| Error::Dataset("malformed header: missing blank line".into()))?;
    let header = std::str::from_utf8(&rest[..header_end])
        .map_err(|_| Error::Dataset("malformed header: not ASCII".into()))?;
    let (mut count, mut dims, mut classes) = (None, None, None);
    for line in header.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Dataset(format!("malformed header line: {line:?}")))?;
        let parsed: usize = value
            .trim()
            .parse()
            .map_err(|_| Error::Dataset(format!("malformed header value: {line:?}")))?;
        match key.trim() {
            "count" => count = Some(parsed),
            "dims" => dims = Some(parsed),
            "classes" => classes = Some(parsed),
            other => return Err(Error::Dataset(format!("unknown header key {other:?}"))),
        }
    }
    let (count, dims, classes) = match (count, dims, classes) {
        (Some(n), Some(d), Some(c)) => (n, d, c),
        _ => {
            return Err(Error::Dataset(
                "malformed header: count, dims and classes required".into(),
            ))
        }
    };
    let payload = &rest[header_end + 1..];
    let record = 4 * dims + 4;
    if payload.len() != count * record {
        return Err(Error::Dataset(format!(
            "truncated payload: expected {} bytes, found {}",
            count * record,
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(count * dims);
    let mut labels = Vec::with_capacity(count);
    for row in 0..count {
        let base = row * record;
        for c in 0..dims {
            let off = base + 4 * c;
            let v = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
            data.push(v as f64);
        }
        let off = base + 4 * dims;
        let label = u32::from_le_bytes(payload[off..off + 4].try_into().unwrap()) as usize;
        if label >= classes {
            return Err(Error::Dataset(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        labels.push(label);
    }
    Ok(LabeledDataset {
        inputs: Matrix::from_vec(count, dims, data),
        labels,
        class_count: classes,
    })
}

fn find_blank_line(bytes: &[u8]) -> Option<usize> {
    // Header ends at the first "\n\n"; returns the index of the second '\n'.
    bytes.windows(2).position(|w| w == b"\n\n").map(|p| p + 1)
}

fn parse_csv(bytes: &[u8]) -> Result<LabeledDataset> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Dataset("csv is not utf-8".into()))?;
    let mut dims: Option<usize> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label: usize = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|_| Error::Dataset(format!("csv line {}: bad label", lineno + 1)))?;
        let row: Vec<f64> = fields
            .map(|f| {
                f.parse::<f32>().map(|v| v as f64).map_err(|_| {
                    Error::Dataset(format!("csv line {}: bad float {f:?}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        match dims {
            None => dims = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::Dataset(format!(
                    "csv line {}: expected {d} features, found {}",
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        data.extend(row);
        labels.push(label);
    }
    let dims = dims.ok_or_else(|| Error::Dataset("csv has no rows".into()))?;
    if dims == 0 {
        return Err(Error::Dataset("csv rows need at least one feature".into()));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(LabeledDataset {
        inputs: Matrix::from_vec(labels.len(), dims, data),
        labels,
        class_count: classes,
    })
}

/// Split a pool into train/test with the same every-fifth-row rule the class
/// splitter uses, keeping all classes.
pub fn pool_to_task(pool: &LabeledDataset, task_id: usize, provenance: String) -> TaskDataset {
    let dims = pool.inputs.cols();
    let mut train_rows = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_rows = Vec::new();
    let mut test_labels = Vec::new();
    for (row, &label) in pool.labels.iter().enumerate() {
        let rowdata: Vec<f64> = (0..dims).map(|c| pool.inputs.get(row, c)).collect();
        if row % 5 == 4 {
            test_rows.extend(rowdata);
            test_labels.push(label);
        } else {
            train_rows.extend(rowdata);
            train_labels.push(label);
        }
    }
    TaskDataset {
        task_id,
        class_count: pool.class_count,
        train: Batch::new(
            Matrix::from_vec(train_labels.len(), dims, train_rows),
            train_labels,
        ),
        test: Batch::new(
            Matrix::from_vec(test_labels.len(), dims, test_rows),
            test_labels,
        ),
        provenance,
    }
}
