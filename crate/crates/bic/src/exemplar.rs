//! Fixed-budget exemplar memory for old classes, herding/random selection,
//! and the balanced train/validation split used by stage 2.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{BicError, Result};

/// How exemplars are chosen from a class's samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Herding,
    Random,
}

/// Emitted when a selection asked for more samples than a class has.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionShortfall {
    pub requested: usize,
    pub available: usize,
}

/// Uniform sample without replacement, order randomized, deterministic
/// given the seed. Asking for more than is available returns everything
/// plus a shortfall record.
pub fn select_random(
    samples: &[LabeledSample],
    count: usize,
    seed: u64,
) -> (Vec<LabeledSample>, Option<SelectionShortfall>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    for i in (1..indices.len()).rev() {
        indices.swap(i, rng.gen_range(0..=i));
    }
    let shortfall = (count > samples.len()).then(|| SelectionShortfall {
        requested: count,
        available: samples.len(),
    });
    let taken = count.min(samples.len());
    (
        indices[..taken].iter().map(|&i| samples[i].clone()).collect(),
        shortfall,
    )
}

/// Greedy mean-matching (herding) order over a class's feature vectors:
/// each pick minimizes the distance between the class feature mean and the
/// mean of the chosen set. Truncating the result to any prefix length
/// equals selecting that many directly.
pub fn select_herding(features: &[Vec<f64>], count: usize) -> Result<Vec<usize>> {
    if features.is_empty() {
        return Err(BicError::Data("herding over an empty feature set".into()));
    }
    let dim = features[0].len();
    let n = features.len();
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut chosen = Vec::with_capacity(count.min(n));
    let mut taken = vec![false; n];
    let mut running_sum = vec![0.0; dim];
    while chosen.len() < count.min(n) {
        let k = (chosen.len() + 1) as f64;
        let mut best: Option<(f64, usize)> = None;
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = mean
                .iter()
                .zip(running_sum.iter().zip(f))
                .map(|(m, (s, v))| {
                    let d = m - (s + v) / k;
                    d * d
                })
                .sum();
            // Ties break towards the lowest index.
            if best.map_or(true, |(bd, _)| dist < bd) {
                best = Some((dist, i));
            }
        }
        let (_, pick) = best.expect("unchosen candidates remain");
        taken[pick] = true;
        for (s, v) in running_sum.iter_mut().zip(&features[pick]) {
            *s += v;
        }
        chosen.push(pick);
    }
    Ok(chosen)
}

/// Fixed-total-budget store of old-class exemplars. Each class keeps its
/// samples in selection order so truncation preserves the best prefix.
#[derive(Debug, Clone)]
pub struct ExemplarStore {
    budget: usize,
    per_class: BTreeMap<usize, Vec<LabeledSample>>,
}

impl ExemplarStore {
    pub fn new(budget: usize) -> Self {
        ExemplarStore {
            budget,
            per_class: BTreeMap::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_class.keys().copied()
    }

    pub fn samples_of(&self, class: usize) -> Option<&[LabeledSample]> {
        self.per_class.get(&class).map(Vec::as_slice)
    }

    pub fn total_stored(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn per_class_counts(&self) -> BTreeMap<usize, usize> {
        self.per_class.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    /// Inserts a class's exemplars in selection order. Call
    /// [`ExemplarStore::rebalance`] afterwards to restore the budget.
    pub fn insert_class(&mut self, class: usize, ordered: Vec<LabeledSample>) -> Result<()> {
        if self.per_class.contains_key(&class) {
            return Err(BicError::Data(format!("class {class} already stored")));
        }
        self.per_class.insert(class, ordered);
        Ok(())
    }

    /// Re-distributes the budget over `classes_now_known` classes:
    /// `floor(budget / classes)` each, remainder to the lowest class ids,
    /// truncating every list to its quota in stored order.
    pub fn rebalance(&mut self, classes_now_known: usize) -> Result<()> {
        if classes_now_known == 0 {
            return Err(BicError::Argument("rebalance needs at least one class".into()));
        }
        let quota = self.budget / classes_now_known;
        if quota == 0 {
            return Err(BicError::Data(format!(
                "budget {} cannot hold {} classes",
                self.budget, classes_now_known
            )));
        }
        let remainder = self.budget % classes_now_known;
        for (rank, (_, samples)) in self.per_class.iter_mut().enumerate() {
            let limit = quota + usize::from(rank < remainder);
            samples.truncate(limit);
        }
        Ok(())
    }

    /// Writes the manifest: for each class, its id and the stored sample
    /// ids in selection order.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| BicError::io(path.display().to_string(), e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_u32::<BigEndian>(self.per_class.len() as u32).map_err(io)?;
        for (&class, samples) in &self.per_class {
            w.write_u32::<BigEndian>(class as u32).map_err(io)?;
            w.write_u32::<BigEndian>(samples.len() as u32).map_err(io)?;
            for s in samples {
                w.write_u64::<BigEndian>(s.id).map_err(io)?;
            }
        }
        Ok(())
    }

    /// Reads a manifest back as `(class, ordered sample ids)` pairs.
    pub fn read_manifest(path: &Path) -> Result<Vec<(usize, Vec<u64>)>> {
        let io = |e: std::io::Error| BicError::io(path.display().to_string(), e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let classes = r.read_u32::<BigEndian>().map_err(io)? as usize;
        let mut out = Vec::with_capacity(classes);
        for _ in 0..classes {
            let class = r.read_u32::<BigEndian>().map_err(io)? as usize;
            let count = r.read_u32::<BigEndian>().map_err(io)? as usize;
            let mut ids = Vec::with_capacity(count);
            for _ in 0..count {
                ids.push(r.read_u64::<BigEndian>().map_err(io)?);
            }
            out.push((class, ids));
        }
        Ok(out)
    }
}

/// Per-class train/validation split of old exemplars and new-class data.
/// Validation sets are balanced: every class contributes the same number
/// of validation samples.
#[derive(Debug, Clone, Default)]
pub struct SplitSets {
    pub train_old: Vec<LabeledSample>,
    pub val_old: Vec<LabeledSample>,
    pub train_new: Vec<LabeledSample>,
    pub val_new: Vec<LabeledSample>,
    /// Common per-class validation size.
    pub val_per_class: usize,
}

/// Splits the stored old-class exemplars and the incoming new-class
/// samples at `ratio = (train_parts, val_parts)`. The per-class validation
/// count is `max(1, round(count * val_fraction))` for the smallest old
/// class, applied uniformly so validation stays balanced; new-class
/// validation is downsampled to match. Deterministic given the seed.
pub fn split_train_val(
    store: &ExemplarStore,
    new_class_samples: &BTreeMap<usize, Vec<LabeledSample>>,
    ratio: (usize, usize),
    seed: u64,
) -> Result<SplitSets> {
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(BicError::Argument(format!(
            "split ratio {}:{} must have positive parts",
            ratio.0, ratio.1
        )));
    }
    if new_class_samples.is_empty() || new_class_samples.values().any(Vec::is_empty) {
        return Err(BicError::Data("every new class needs samples to split".into()));
    }
    if let Some((&class, _)) = store.per_class.iter().find(|(_, v)| v.is_empty()) {
        return Err(BicError::Data(format!("old class {class} has no exemplars")));
    }
    let val_fraction = ratio.1 as f64 / (ratio.0 + ratio.1) as f64;
    let per_class_val = |count: usize| ((count as f64 * val_fraction).round() as usize).max(1);

    let smallest_old = store.per_class.values().map(Vec::len).min();
    let smallest_new = new_class_samples.values().map(Vec::len).min().unwrap();
    let mut v = match smallest_old {
        Some(c) => per_class_val(c),
        None => per_class_val(smallest_new),
    };
    // Every class must keep at least one training sample.
    v = v
        .min(smallest_new.saturating_sub(1).max(1))
        .min(smallest_old.map_or(usize::MAX, |c| c.saturating_sub(1).max(1)));

    let split_class = |class: usize,
                           samples: &[LabeledSample],
                           train: &mut Vec<LabeledSample>,
                           val: &mut Vec<LabeledSample>| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9e37_79b9));
        let mut indices: Vec<usize> = (0..samples.len()).collect();
        for i in (1..indices.len()).rev() {
            indices.swap(i, rng.gen_range(0..=i));
        }
        let take = v.min(samples.len().saturating_sub(1)).max(1.min(samples.len()));
        for &i in &indices[..take] {
            val.push(samples[i].clone());
        }
        let mut in_val = vec![false; samples.len()];
        for &i in &indices[..take] {
            in_val[i] = true;
        }
        for (i, s) in samples.iter().enumerate() {
            if !in_val[i] {
                train.push(s.clone());
            }
        }
    };

    let mut sets = SplitSets {
        val_per_class: v,
        ..SplitSets::default()
    };
    for (&class, samples) in &store.per_class {
        let (mut t, mut vl) = (Vec::new(), Vec::new());
        split_class(class, samples, &mut t, &mut vl);
        sets.train_old.append(&mut t);
        sets.val_old.append(&mut vl);
    }
    for (&class, samples) in new_class_samples {
        let (mut t, mut vl) = (Vec::new(), Vec::new());
        split_class(class, samples, &mut t, &mut vl);
        sets.train_new.append(&mut t);
        sets.val_new.append(&mut vl);
    }
    Ok(sets)
}
