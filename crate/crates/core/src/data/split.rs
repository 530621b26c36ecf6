//! Chronological, per-angle and day-window partitions.
//!
//! Every split works on anything that knows its (lot, angle) stream and day
//! index, so the same code partitions manifest records and extracted
//! patches.

use std::collections::{BTreeMap, BTreeSet};

use super::crop::Patch;
use super::manifest::{DatasetManifest, ImageRecord};
use crate::error::{Error, Result};

pub trait DayStream {
    fn lot_id(&self) -> &str;
    fn angle_id(&self) -> &str;
    fn day_index(&self) -> usize;
}

impl DayStream for ImageRecord {
    fn lot_id(&self) -> &str {
        &self.lot_id
    }
    fn angle_id(&self) -> &str {
        &self.angle_id
    }
    fn day_index(&self) -> usize {
        self.day_index
    }
}

impl DayStream for Patch {
    fn lot_id(&self) -> &str {
        &self.lot_id
    }
    fn angle_id(&self) -> &str {
        &self.angle_id
    }
    fn day_index(&self) -> usize {
        self.day_index
    }
}

impl<T: DayStream> DayStream for &T {
    fn lot_id(&self) -> &str {
        (*self).lot_id()
    }
    fn angle_id(&self) -> &str {
        (*self).angle_id()
    }
    fn day_index(&self) -> usize {
        (*self).day_index()
    }
}

/// Two disjoint parts whose union is the input, order preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub warnings: Vec<String>,
}

/// Number of leading days that go to training: ⌈fraction·days⌉.
pub fn train_day_count(days: usize, fraction: f64) -> usize {
    // The tolerance absorbs representation error such as 0.7·10 = 7.000…1.
    ((fraction * days as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Per (lot, angle) stream, the first ⌈fraction·D⌉ distinct days train and
/// the remaining days validate.
pub fn partition_chronological<T: DayStream + Clone>(items: &[T], fraction: f64) -> Result<Split<T>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("train fraction must lie in (0, 1), got {fraction}")));
    }
    let mut days: BTreeMap<(&str, &str), BTreeSet<usize>> = BTreeMap::new();
    for it in items {
        days.entry((it.lot_id(), it.angle_id())).or_default().insert(it.day_index());
    }
    let mut cutoff: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (key, set) in &days {
        let sorted: Vec<usize> = set.iter().copied().collect();
        let n_train = train_day_count(sorted.len(), fraction);
        if n_train >= sorted.len() {
            warnings.push(format!(
                "lot {} angle {}: {} day(s), validation split is empty",
                key.0,
                key.1,
                sorted.len()
            ));
            cutoff.insert(*key, usize::MAX);
        } else {
            cutoff.insert(*key, sorted[n_train]);
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for it in items {
        if it.day_index() < cutoff[&(it.lot_id(), it.angle_id())] {
            train.push(it.clone());
        } else {
            val.push(it.clone());
        }
    }
    Ok(Split { train, val, warnings })
}

/// Everything outside `angle` trains; `angle` validates.
pub fn leave_one_angle_out<T: DayStream + Clone>(items: &[T], angles: &[String], angle: &str) -> Result<Split<T>> {
    if angles.len() < 2 {
        return Err(Error::Split(format!(
            "cannot leave one out: only {} angle(s)",
            angles.len()
        )));
    }
    if !angles.iter().any(|a| a == angle) {
        return Err(Error::Split(format!("unknown angle {angle:?}")));
    }
    let (val, train): (Vec<T>, Vec<T>) = items.iter().cloned().partition(|it| it.angle_id() == angle);
    Ok(Split {
        train,
        val,
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DayWindow {
    /// Days `0..n`.
    FirstN,
    /// Days `n..`.
    AfterN,
}

pub fn take_days<T: DayStream + Clone>(items: &[T], mode: DayWindow, n: usize) -> Vec<T> {
    items
        .iter()
        .filter(|it| match mode {
            DayWindow::FirstN => it.day_index() < n,
            DayWindow::AfterN => it.day_index() >= n,
        })
        .cloned()
        .collect()
}

impl DatasetManifest {
    pub fn partition_chronological(&self, fraction: f64) -> Result<(DatasetManifest, DatasetManifest, Vec<String>)> {
        let s = partition_chronological(&self.records, fraction)?;
        Ok((self.with_records(s.train), self.with_records(s.val), s.warnings))
    }

    pub fn leave_one_angle_out(&self, angle: &str) -> Result<(DatasetManifest, DatasetManifest)> {
        let s = leave_one_angle_out(&self.records, &self.angles, angle)?;
        Ok((self.with_records(s.train), self.with_records(s.val)))
    }

    pub fn take_days(&self, mode: DayWindow, n: usize) -> DatasetManifest {
        self.with_records(take_days(&self.records, mode, n))
    }
}
