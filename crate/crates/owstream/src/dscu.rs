//! Per-class bounded FIFO data storage, the classifier-update conditions,
//! and assembly of the retraining set.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::metric::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredInstance {
    pub features: Vec<f64>,
    /// Global insertion sequence; "oldest" means lowest value.
    pub seq: u64,
}

/// One bounded FIFO buffer per class, capacity `S_D` each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataStorage {
    capacity: usize,
    buffers: BTreeMap<Label, VecDeque<StoredInstance>>,
    next_seq: u64,
}

impl DataStorage {
    pub fn new(capacity: usize) -> DataStorage {
        DataStorage {
            capacity,
            buffers: BTreeMap::new(),
            next_seq: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends an instance, creating the class buffer on first sight and
    /// evicting the oldest entry when the buffer is full.
    pub fn store(&mut self, features: Vec<f64>, label: Label) {
        let buf = self.buffers.entry(label).or_default();
        if buf.len() == self.capacity {
            buf.pop_front();
        }
        buf.push_back(StoredInstance {
            features,
            seq: self.next_seq,
        });
        self.next_seq += 1;
    }

    pub fn count(&self, label: Label) -> usize {
        self.buffers.get(&label).map_or(0, |b| b.len())
    }

    pub fn classes(&self) -> impl Iterator<Item = Label> + '_ {
        self.buffers.keys().copied()
    }

    pub fn class_instances(&self, label: Label) -> impl Iterator<Item = &StoredInstance> {
        self.buffers.get(&label).into_iter().flatten()
    }

    /// Class-grouped feature snapshot for the given labels, in the order
    /// given (used for threshold computation).
    pub fn class_data(&self, labels: &[Label]) -> Vec<(Label, Vec<Vec<f64>>)> {
        labels
            .iter()
            .map(|&l| {
                (
                    l,
                    self.class_instances(l)
                        .map(|s| s.features.clone())
                        .collect(),
                )
            })
            .collect()
    }

    /// The retraining set: every class holding strictly more than
    /// `s_update` instances, all of its buffer. Fewer than two qualifying
    /// classes aborts the update.
    pub fn build_training_set(&self, s_update: usize) -> Result<Vec<(Vec<f64>, Label)>> {
        let qualifying: Vec<Label> = self
            .buffers
            .iter()
            .filter(|(_, b)| b.len() > s_update)
            .map(|(l, _)| *l)
            .collect();
        if qualifying.len() < 2 {
            return Err(Error::Training(format!(
                "classifier update aborted: only {} classes exceed S_update = {}",
                qualifying.len(),
                s_update
            )));
        }
        let mut out = Vec::new();
        for l in qualifying {
            for s in self.class_instances(l) {
                out.push((s.features.clone(), l));
            }
        }
        Ok(out)
    }
}

/// Novel labels seen by DetectNovel since the last classifier update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PendingNovelSet {
    labels: BTreeSet<Label>,
}

impl PendingNovelSet {
    pub fn insert(&mut self, label: Label) {
        self.labels.insert(label);
    }

    pub fn clear(&mut self) {
        self.labels.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Label> + '_ {
        self.labels.iter().copied()
    }
}

/// True iff some pending novel class holds strictly more than `s_update`
/// instances in storage.
pub fn update_condition(
    pending: &PendingNovelSet,
    storage: &DataStorage,
    s_update: usize,
) -> bool {
    pending.iter().any(|l| storage.count(l) > s_update)
}
