//! Teacher ensemble: a chronological-split member plus one member per held-out
//! camera angle, combined by averaging posteriors, and the confidence filter
//! that turns its predictions into pseudo-labels.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{leave_one_angle_out, partition_chronological, Label, Patch};
use crate::error::{Error, Result};
use crate::model::{classify_patches, examples, with_true_labels, Classifier, Model};
use crate::nn::train::argmax_label;
use crate::nn::{fit, AdamHyper, ArchDescriptor, Checkpoint, TrainOptions};

/// Training fraction for the chronological member and the student.
pub const TRAIN_FRACTION: f64 = 0.7;

/// Trains one network from scratch with best-on-validation selection.
pub fn train_member(
    train: &[Patch],
    val: &[Patch],
    arch: &ArchDescriptor,
    hyper: &AdamHyper,
    epochs: usize,
    seed: u64,
) -> Result<Checkpoint> {
    let train_ex = examples(&with_true_labels(train))?;
    let val_ex = examples(&with_true_labels(val))?;
    let start = Checkpoint::initial(arch, seed)?;
    let opts = TrainOptions {
        epochs,
        ..TrainOptions::new(hyper.clone(), seed)
    };
    fit(&start, &train_ex, &val_ex, &opts)
}

/// Ordered members whose posteriors are averaged.
pub struct Ensemble {
    members: Vec<Model>,
    pub warnings: Vec<String>,
}

const ENSEMBLE_INDEX: &str = "ensemble.json";

#[derive(Serialize, Deserialize)]
struct EnsembleIndex {
    members: Vec<String>,
    warnings: Vec<String>,
}

impl Ensemble {
    pub fn new(members: Vec<Checkpoint>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Empty("ensemble has no members".into()))?;
        let input = first.arch.input();
        for (i, m) in members.iter().enumerate() {
            m.arch.validate_classifier()?;
            if m.arch.input() != input {
                return Err(Error::Shape(format!(
                    "ensemble member {i} takes {:?}, member 0 takes {:?}",
                    m.arch.input(),
                    input
                )));
            }
        }
        Ok(Ensemble {
            members: members.into_iter().map(Model::new).collect::<Result<_>>()?,
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> impl Iterator<Item = &Checkpoint> {
        self.members.iter().map(Model::checkpoint)
    }

    /// Sets a provenance tag on every member.
    pub fn tag(&mut self, key: &str, value: &str) {
        self.members.iter_mut().for_each(|m| m.tag(key, value));
    }

    /// Writes `member_NN.ckpt` files and an index into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        for (i, m) in self.members().enumerate() {
            let name = format!("member_{i:02}.ckpt");
            m.save(&dir.join(&name))?;
            names.push(name);
        }
        let index = EnsembleIndex {
            members: names,
            warnings: self.warnings.clone(),
        };
        let path = dir.join(ENSEMBLE_INDEX);
        fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(ENSEMBLE_INDEX);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: EnsembleIndex = serde_json::from_str(&text)?;
        let members = index
            .members
            .iter()
            .map(|n| Checkpoint::load(&dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        let mut ens = Ensemble::new(members)?;
        ens.warnings = index.warnings;
        Ok(ens)
    }

    pub fn index_path(dir: &Path) -> PathBuf {
        dir.join(ENSEMBLE_INDEX)
    }
}

impl Classifier for Ensemble {
    fn input_len(&self) -> usize {
        self.members[0].input_len()
    }

    fn posteriors(&self, inputs: &[&[f32]]) -> Result<Vec<[f32; 2]>> {
        let mut sum = vec![[0.0f64; 2]; inputs.len()];
        for m in &self.members {
            for (acc, p) in sum.iter_mut().zip(m.posteriors(inputs)?) {
                acc[0] += f64::from(p[0]);
                acc[1] += f64::from(p[1]);
            }
        }
        let k = self.members.len() as f64;
        Ok(sum.into_iter().map(|s| [(s[0] / k) as f32, (s[1] / k) as f32]).collect())
    }
}

/// Averaged posteriors for `patches`.
pub fn ensemble_predict(ensemble: &Ensemble, patches: &[Patch]) -> Result<Vec<[f32; 2]>> {
    classify_patches(ensemble, patches)
}

/// Trains `[t0, t1..tk]`: t0 on the chronological split of every angle, ti on
/// all angles except `angles[i-1]`, validated on that angle. Member `i` uses
/// seed `seed ^ i`.
pub fn build_ensemble(
    source: &[Patch],
    angles: &[String],
    arch: &ArchDescriptor,
    hyper: &AdamHyper,
    epochs: usize,
    seed: u64,
) -> Result<Ensemble> {
    let mut warnings = Vec::new();
    let split = partition_chronological(source, TRAIN_FRACTION)?;
    warnings.extend(split.warnings.iter().cloned());
    log::info!("teacher member 0: {} train / {} val", split.train.len(), split.val.len());
    let mut members = vec![train_member(&split.train, &split.val, arch, hyper, epochs, seed)?];
    if angles.len() < 2 {
        warnings.push(format!(
            "source has {} camera angle(s); ensemble holds the chronological member only",
            angles.len()
        ));
    } else {
        for (i, angle) in angles.iter().enumerate() {
            let s = leave_one_angle_out(source, angles, angle)?;
            log::info!("teacher member {} (hold out {angle}): {} train / {} val", i + 1, s.train.len(), s.val.len());
            members.push(train_member(&s.train, &s.val, arch, hyper, epochs, seed ^ (i as u64 + 1))?);
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut ens = Ensemble::new(members)?;
    ens.warnings = warnings;
    Ok(ens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    #[serde(rename = "image")]
    pub image_path: String,
    #[serde(rename = "spot")]
    pub spot_id: String,
    pub label: Label,
    pub posterior: f32,
    #[serde(rename = "day")]
    pub day_index: usize,
    #[serde(rename = "angle")]
    pub angle_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub candidates: usize,
    pub used: usize,
    /// `None` when some candidate has no ground truth.
    pub wrong: Option<usize>,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: Vec<PseudoLabel>,
    pub stats: PseudoStats,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.5..1.0).contains(&tau) {
        return Err(Error::Invalid(format!("threshold must lie in [0.5, 1), got {tau}")));
    }
    Ok(())
}

/// Keeps patches whose larger posterior is strictly above `tau`.
pub fn filter_pseudo_labels(patches: &[Patch], posteriors: &[[f32; 2]], tau: f64) -> Result<PseudoLabelSet> {
    check_tau(tau)?;
    if patches.len() != posteriors.len() {
        return Err(Error::Shape(format!(
            "{} patches but {} posterior rows",
            patches.len(),
            posteriors.len()
        )));
    }
    let truth_known = patches.iter().all(|p| p.true_label.is_known());
    let mut labels = Vec::new();
    let mut wrong = 0;
    for (p, post) in patches.iter().zip(posteriors) {
        let conf = post[0].max(post[1]);
        if f64::from(conf) <= tau {
            continue;
        }
        let label = Label::from_class_index(argmax_label(*post));
        if truth_known && label != p.true_label {
            wrong += 1;
        }
        labels.push(PseudoLabel {
            image_path: p.image_path.clone(),
            spot_id: p.spot_id.clone(),
            label,
            posterior: conf,
            day_index: p.day_index,
            angle_id: p.angle_id.clone(),
        });
    }
    let stats = PseudoStats {
        candidates: patches.len(),
        used: labels.len(),
        wrong: truth_known.then_some(wrong),
        tau,
    };
    Ok(PseudoLabelSet { labels, stats })
}

/// Pseudo-labels `target` (normally the first n days of a stream).
pub fn pseudo_label(ensemble: &Ensemble, target: &[Patch], tau: f64) -> Result<PseudoLabelSet> {
    check_tau(tau)?;
    if target.is_empty() {
        return filter_pseudo_labels(&[], &[], tau);
    }
    let post = ensemble_predict(ensemble, target)?;
    filter_pseudo_labels(target, &post, tau)
}

impl PseudoLabelSet {
    /// Writes the labels as JSON lines and the stats to `stats_path`.
    pub fn write(&self, labels_path: &Path, stats_path: &Path) -> Result<()> {
        let mut f = fs::File::create(labels_path).map_err(|e| Error::io(labels_path, e))?;
        let mut buf = String::new();
        for l in &self.labels {
            buf.push_str(&serde_json::to_string(l)?);
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(|e| Error::io(labels_path, e))?;
        fs::write(stats_path, serde_json::to_string_pretty(&self.stats)? + "\n").map_err(|e| Error::io(stats_path, e))
    }

    pub fn read(labels_path: &Path, stats_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(labels_path).map_err(|e| Error::io(labels_path, e))?;
        let labels = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Manifest {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let stats_text = fs::read_to_string(stats_path).map_err(|e| Error::io(stats_path, e))?;
        Ok(PseudoLabelSet {
            labels,
            stats: serde_json::from_str(&stats_text)?,
        })
    }

    /// Label counts per day, for diagnostics.
    pub fn day_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for l in &self.labels {
            *h.entry(l.day_index).or_default() += 1;
        }
        h
    }
}
