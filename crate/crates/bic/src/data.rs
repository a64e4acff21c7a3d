//! Dataset ingestion (IDX files and synthetic Gaussian blobs), label
//! remapping, and the incremental class schedule.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{BicError, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// One sample: features scaled to `[0, 1]`, a class label, and a stable
/// unique id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
    pub id: u64,
}

/// Train/test corpus with contiguous labels `0..num_classes`. The remap
/// table records the original label for each contiguous index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub label_remap: Vec<usize>,
}

impl Dataset {
    /// Remaps raw labels to contiguous indices and checks feature widths
    /// and id disjointness.
    pub fn from_parts(train: Vec<LabeledSample>, test: Vec<LabeledSample>) -> Result<Self> {
        if train.is_empty() {
            return Err(BicError::Data("training partition is empty".into()));
        }
        let feature_dim = train[0].features.len();
        let mut labels: Vec<usize> = train.iter().chain(&test).map(|s| s.label).collect();
        labels.sort_unstable();
        labels.dedup();
        let remap = labels;
        let index_of = |raw: usize| remap.binary_search(&raw).expect("label seen above");

        let mut remapped_train = train;
        let mut remapped_test = test;
        for s in remapped_train.iter_mut().chain(remapped_test.iter_mut()) {
            if s.features.len() != feature_dim {
                return Err(BicError::Data(format!(
                    "sample {} has {} features, expected {}",
                    s.id,
                    s.features.len(),
                    feature_dim
                )));
            }
            s.label = index_of(s.label);
        }
        let mut ids: Vec<u64> = remapped_train.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        for s in &remapped_test {
            if ids.binary_search(&s.id).is_ok() {
                return Err(BicError::Data(format!(
                    "sample id {} appears in both train and test partitions",
                    s.id
                )));
            }
        }
        Ok(Dataset {
            num_classes: remap.len(),
            feature_dim,
            label_remap: remap,
            train: remapped_train,
            test: remapped_test,
        })
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| BicError::io(path.display().to_string(), e))
}

/// Parses a big-endian IDX image/label file pair into samples with pixel
/// bytes scaled by 1/255. Ids are assigned from `id_base` upward.
pub fn load_idx(images_path: &Path, labels_path: &Path, id_base: u64) -> Result<Vec<LabeledSample>> {
    let format_err = |path: &Path, detail: String| BicError::Format {
        path: path.display().to_string(),
        detail,
    };

    let mut img = open(images_path)?;
    let magic = img
        .read_u32::<BigEndian>()
        .map_err(|e| BicError::io(images_path.display().to_string(), e))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            images_path,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = img.read_u32::<BigEndian>().map_err(|e| BicError::io(images_path.display().to_string(), e))? as usize;
    let rows = img.read_u32::<BigEndian>().map_err(|e| BicError::io(images_path.display().to_string(), e))? as usize;
    let cols = img.read_u32::<BigEndian>().map_err(|e| BicError::io(images_path.display().to_string(), e))? as usize;
    let pixel_count = rows * cols;
    let mut pixels = vec![0u8; count * pixel_count];
    img.read_exact(&mut pixels)
        .map_err(|_| format_err(images_path, format!("truncated pixel payload, expected {count}x{pixel_count} bytes")))?;

    let mut lbl = open(labels_path)?;
    let magic = lbl
        .read_u32::<BigEndian>()
        .map_err(|e| BicError::io(labels_path.display().to_string(), e))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            labels_path,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let label_count = lbl.read_u32::<BigEndian>().map_err(|e| BicError::io(labels_path.display().to_string(), e))? as usize;
    if label_count != count {
        return Err(format_err(
            labels_path,
            format!("label count {label_count} does not match image count {count}"),
        ));
    }
    let mut labels = vec![0u8; count];
    lbl.read_exact(&mut labels)
        .map_err(|_| format_err(labels_path, format!("truncated label payload, expected {count} bytes")))?;

    Ok(pixels
        .chunks_exact(pixel_count.max(1))
        .take(count)
        .zip(&labels)
        .enumerate()
        .map(|(i, (px, &label))| LabeledSample {
            features: px.iter().map(|&b| b as f64 / 255.0).collect(),
            label: label as usize,
            id: id_base + i as u64,
        })
        .collect())
}

/// Writes samples as an IDX image/label file pair, quantizing features to
/// bytes. Feature length must be expressible as `rows x cols`; a flat
/// `dim x 1` layout is used.
pub fn write_idx(samples: &[LabeledSample], images_path: &Path, labels_path: &Path) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut img = BufWriter::new(
        File::create(images_path).map_err(|e| BicError::io(images_path.display().to_string(), e))?,
    );
    let io_err = |p: &Path| {
        let p = p.display().to_string();
        move |e: std::io::Error| BicError::io(p, e)
    };
    img.write_u32::<BigEndian>(IDX_IMAGES_MAGIC).map_err(io_err(images_path))?;
    img.write_u32::<BigEndian>(samples.len() as u32).map_err(io_err(images_path))?;
    img.write_u32::<BigEndian>(dim as u32).map_err(io_err(images_path))?;
    img.write_u32::<BigEndian>(1).map_err(io_err(images_path))?;
    for s in samples {
        let bytes: Vec<u8> = s
            .features
            .iter()
            .map(|&f| (f.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        img.write_all(&bytes).map_err(io_err(images_path))?;
    }
    img.flush().map_err(io_err(images_path))?;

    let mut lbl = BufWriter::new(
        File::create(labels_path).map_err(|e| BicError::io(labels_path.display().to_string(), e))?,
    );
    lbl.write_u32::<BigEndian>(IDX_LABELS_MAGIC).map_err(io_err(labels_path))?;
    lbl.write_u32::<BigEndian>(samples.len() as u32).map_err(io_err(labels_path))?;
    for s in samples {
        lbl.write_all(&[s.label as u8]).map_err(io_err(labels_path))?;
    }
    lbl.flush().map_err(io_err(labels_path))
}

fn blob_centers(num_classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(0.2..0.8)).collect())
        .collect()
}

fn blob_samples(
    centers: &[Vec<f64>],
    per_class: usize,
    spread: f64,
    rng: &mut ChaCha8Rng,
    id_base: u64,
) -> Vec<LabeledSample> {
    let noise = Normal::new(0.0, spread).expect("spread validated by caller");
    let mut out = Vec::with_capacity(centers.len() * per_class);
    let mut id = id_base;
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let features = center
                .iter()
                .map(|&c| (c + noise.sample(rng)).clamp(0.0, 1.0))
                .collect();
            out.push(LabeledSample {
                features,
                label,
                id,
            });
            id += 1;
        }
    }
    out
}

/// Synthetic isotropic Gaussian clusters, one per class, with centers
/// derived deterministically from the seed.
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if num_classes < 2 {
        return Err(BicError::Argument("blobs need at least two classes".into()));
    }
    if spread <= 0.0 {
        return Err(BicError::Argument("blob spread must be positive".into()));
    }
    let centers = blob_centers(num_classes, dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(blob_samples(&centers, per_class, spread, &mut rng, 0))
}

/// Blob dataset with train and test partitions drawn around the same
/// centers from independent noise streams.
pub fn make_blob_dataset(
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(BicError::Argument("blobs need at least two classes".into()));
    }
    if spread <= 0.0 {
        return Err(BicError::Argument("blob spread must be positive".into()));
    }
    let centers = blob_centers(num_classes, dim, seed);
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    let train = blob_samples(&centers, per_class_train, spread, &mut train_rng, 0);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5555_5555_5555_5555);
    let test = blob_samples(
        &centers,
        per_class_test,
        spread,
        &mut test_rng,
        train.len() as u64,
    );
    Dataset::from_parts(train, test)
}

/// The class order and per-step increment sizes of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSchedule {
    /// Permutation of `0..num_classes` (contiguous dataset indices).
    pub order: Vec<usize>,
    pub increment_sizes: Vec<usize>,
}

impl ClassSchedule {
    pub fn new(order: Vec<usize>, increment_sizes: Vec<usize>) -> Result<Self> {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &c)| i != c) {
            return Err(BicError::Config(
                "class order must be a permutation of 0..num_classes".into(),
            ));
        }
        if increment_sizes.iter().sum::<usize>() != order.len()
            || increment_sizes.iter().any(|&s| s == 0)
        {
            return Err(BicError::Config(format!(
                "increment sizes {increment_sizes:?} must be positive and sum to {}",
                order.len()
            )));
        }
        Ok(ClassSchedule {
            order,
            increment_sizes,
        })
    }

    /// Seed-derived random permutation with uniform increment sizes.
    pub fn random(num_classes: usize, num_steps: usize, seed: u64) -> Result<Self> {
        if num_steps == 0 || num_classes % num_steps != 0 {
            return Err(BicError::Config(format!(
                "{num_classes} classes cannot be split into {num_steps} equal steps"
            )));
        }
        let mut order: Vec<usize> = (0..num_classes).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xc2b2_ae35));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        ClassSchedule::new(order, vec![num_classes / num_steps; num_steps])
    }
}

/// One increment's data: the new classes, their training samples, and the
/// cumulative test set over everything seen so far.
#[derive(Debug, Clone)]
pub struct IncrementTask {
    pub step: usize,
    pub new_classes: Vec<usize>,
    pub train_new: Vec<LabeledSample>,
    pub test_seen: Vec<LabeledSample>,
}

/// Splits a dataset along the schedule. Step `t` carries the new classes'
/// training data and a test set covering all classes through step `t`.
pub fn schedule(dataset: &Dataset, sched: &ClassSchedule) -> Result<Vec<IncrementTask>> {
    if sched.order.len() != dataset.num_classes {
        return Err(BicError::Config(format!(
            "schedule covers {} classes, dataset has {}",
            sched.order.len(),
            dataset.num_classes
        )));
    }
    let mut tasks = Vec::with_capacity(sched.increment_sizes.len());
    let mut cursor = 0;
    let mut seen: Vec<usize> = Vec::new();
    for (step, &m) in sched.increment_sizes.iter().enumerate() {
        let new_classes: Vec<usize> = sched.order[cursor..cursor + m].to_vec();
        cursor += m;
        seen.extend(&new_classes);
        let train_new = dataset
            .train
            .iter()
            .filter(|s| new_classes.contains(&s.label))
            .cloned()
            .collect();
        let test_seen = dataset
            .test
            .iter()
            .filter(|s| seen.contains(&s.label))
            .cloned()
            .collect();
        tasks.push(IncrementTask {
            step,
            new_classes,
            train_new,
            test_seen,
        });
    }
    Ok(tasks)
}
