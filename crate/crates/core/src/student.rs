//! Lightweight student: pretraining on the source domain and per-angle
//! fine-tuning on the first n days of a target stream.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{partition_chronological, Label, Patch};
use crate::error::{Error, Result};
use crate::model::examples;
use crate::nn::{fit, AdamHyper, ArchDescriptor, Checkpoint, TrainOptions};
use crate::teacher::{train_member, PseudoLabelSet, TRAIN_FRACTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    AllLayers,
    LastConvAndDense,
}

impl FreezePolicy {
    /// Per-tensor trainable mask; `None` means everything trains.
    pub fn trainable_mask(self, arch: &ArchDescriptor) -> Result<Option<Vec<bool>>> {
        match self {
            FreezePolicy::AllLayers => Ok(None),
            FreezePolicy::LastConvAndDense => {
                let mut mask = vec![false; arch.param_shapes().len()];
                for i in arch.last_conv_and_dense_params()? {
                    mask[i] = true;
                }
                Ok(Some(mask))
            }
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezePolicy::AllLayers => "all_layers",
            FreezePolicy::LastConvAndDense => "last_conv_and_dense",
        })
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_layers" => Ok(FreezePolicy::AllLayers),
            "last_conv_and_dense" => Ok(FreezePolicy::LastConvAndDense),
            _ => Err(Error::Invalid(format!(
                "unknown freeze policy {s:?} (expected all_layers or last_conv_and_dense)"
            ))),
        }
    }
}

/// Train and validation day ranges for `n` labelled days: the last
/// ⌈n/4⌉ days validate.
pub fn split_days(n: usize) -> Result<(Range<usize>, Range<usize>)> {
    if n < 2 {
        return Err(Error::Split(format!(
            "n = {n}: validation split would consume all training days"
        )));
    }
    let l = n.div_ceil(4);
    Ok((0..n - l, n - l..n))
}

/// One fine-tuning input and the label it is trained towards.
pub type LabeledPatch<'a> = (&'a Patch, Label);

#[derive(Debug, Clone)]
pub struct FinetuneSplit<'a> {
    pub n: usize,
    pub train_days: Range<usize>,
    pub val_days: Range<usize>,
    pub train: Vec<LabeledPatch<'a>>,
    pub val: Vec<LabeledPatch<'a>>,
}

impl FinetuneSplit<'_> {
    pub fn l(&self) -> usize {
        self.val_days.len()
    }
}

fn day_histogram(items: &[LabeledPatch<'_>]) -> String {
    let mut h = BTreeMap::new();
    for (p, _) in items {
        *h.entry(p.day_index).or_insert(0usize) += 1;
    }
    if h.is_empty() {
        return "no labels".into();
    }
    h.iter().map(|(d, c)| format!("day {d}: {c}")).collect::<Vec<_>>().join(", ")
}

/// Splits labelled items from days `[0, n)` by day into train and validation.
pub fn make_finetune_split<'a>(items: &[LabeledPatch<'a>], n: usize) -> Result<FinetuneSplit<'a>> {
    let (train_days, val_days) = split_days(n)?;
    if let Some((p, _)) = items.iter().find(|(p, _)| p.day_index >= n) {
        return Err(Error::Split(format!(
            "label for {} {} is from day {}, outside the first {n} days",
            p.image_path, p.spot_id, p.day_index
        )));
    }
    let (val, train): (Vec<_>, Vec<_>) = items.iter().copied().partition(|(p, _)| val_days.contains(&p.day_index));
    if train.is_empty() || val.is_empty() {
        return Err(Error::Split(format!(
            "fine-tune {} set is empty for n = {n} (train days {train_days:?}, val days {val_days:?}; {})",
            if train.is_empty() { "training" } else { "validation" },
            day_histogram(items)
        )));
    }
    Ok(FinetuneSplit {
        n,
        train_days,
        val_days,
        train,
        val,
    })
}

/// Where fine-tuning labels come from.
pub trait LabelSource {
    fn name(&self) -> &'static str;
    /// Labels for `patches`, which are all from the fine-tuning window.
    fn labels<'a>(&self, patches: &'a [Patch]) -> Result<Vec<LabeledPatch<'a>>>;
}

/// Teacher pseudo-labels, joined to patches by (image, spot).
pub struct PseudoLabels<'s>(pub &'s PseudoLabelSet);

impl LabelSource for PseudoLabels<'_> {
    fn name(&self) -> &'static str {
        "pseudo"
    }

    fn labels<'a>(&self, patches: &'a [Patch]) -> Result<Vec<LabeledPatch<'a>>> {
        let by_key: HashMap<(&str, &str), Label> = self
            .0
            .labels
            .iter()
            .map(|l| ((l.image_path.as_str(), l.spot_id.as_str()), l.label))
            .collect();
        Ok(patches
            .iter()
            .filter_map(|p| by_key.get(&p.key()).map(|&l| (p, l)))
            .collect())
    }
}

/// Ground-truth labels; the oracle ceiling.
pub struct TrueLabels;

impl LabelSource for TrueLabels {
    fn name(&self) -> &'static str {
        "true"
    }

    fn labels<'a>(&self, patches: &'a [Patch]) -> Result<Vec<LabeledPatch<'a>>> {
        if let Some(p) = patches.iter().find(|p| !p.true_label.is_known()) {
            return Err(Error::Invalid(format!(
                "true-label fine-tuning needs ground truth; {} {} is unknown",
                p.image_path, p.spot_id
            )));
        }
        Ok(patches.iter().map(|p| (p, p.true_label)).collect())
    }
}

/// Trains the student on the same chronological split as the first teacher
/// member.
pub fn pretrain_student(
    source: &[Patch],
    arch: &ArchDescriptor,
    hyper: &AdamHyper,
    epochs: usize,
    seed: u64,
) -> Result<Checkpoint> {
    let split = partition_chronological(source, TRAIN_FRACTION)?;
    let mut ck = train_member(&split.train, &split.val, arch, hyper, epochs, seed)?;
    ck.meta.tags.insert("stage".into(), "pretrain".into());
    Ok(ck)
}

/// Provenance recorded in a fine-tuned checkpoint.
#[derive(Debug, Clone, Default)]
pub struct FinetuneTags {
    pub source_domain: String,
    pub target_angle: String,
    pub label_source: String,
    pub tau: Option<f64>,
}

/// Continues training `pretrained` on the split with a fresh Adam state,
/// updating only the tensors the freeze policy allows.
pub fn finetune(
    pretrained: &Checkpoint,
    split: &FinetuneSplit<'_>,
    hyper: &AdamHyper,
    epochs: usize,
    freeze: FreezePolicy,
    seed: u64,
    tags: &FinetuneTags,
) -> Result<Checkpoint> {
    let train = examples(&split.train)?;
    let val = examples(&split.val)?;
    let opts = TrainOptions {
        epochs,
        trainable: freeze.trainable_mask(&pretrained.arch)?,
        ..TrainOptions::new(hyper.clone(), seed)
    };
    let mut ck = fit(pretrained, &train, &val, &opts)?;
    let t = &mut ck.meta.tags;
    t.insert("stage".into(), "finetune".into());
    t.insert("source".into(), tags.source_domain.clone());
    t.insert("angle".into(), tags.target_angle.clone());
    t.insert("labels".into(), tags.label_source.clone());
    t.insert("n".into(), split.n.to_string());
    if let Some(tau) = tags.tau {
        t.insert("tau".into(), tau.to_string());
    }
    t.insert("freeze".into(), freeze.to_string());
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn patch(day: usize, spot: usize, label: Label) -> Patch {
        Patch {
            pixels: Tensor::zeros(&[1, 1, 1]),
            image_path: format!("d{day}.png"),
            spot_id: format!("s{spot}"),
            lot_id: "L".into(),
            angle_id: "A1".into(),
            day_index: day,
            true_label: label,
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_days(7).unwrap(), (0..5, 5..7));
        assert_eq!(split_days(8).unwrap(), (0..6, 6..8));
        assert_eq!(split_days(14).unwrap(), (0..10, 10..14));
        assert_eq!(split_days(2).unwrap(), (0..1, 1..2));
        let e = split_days(1).unwrap_err().to_string();
        assert!(e.contains("validation split would consume all training days"), "{e}");
    }

    #[test]
    fn split_arithmetic_exhaustive() {
        for n in 2..=100 {
            let (t, v) = split_days(n).unwrap();
            assert_eq!(t.start, 0);
            assert_eq!(t.end, v.start);
            assert_eq!(v.end, n);
            assert_eq!(v.len(), n.div_ceil(4));
            assert!(!t.is_empty());
        }
    }

    #[test]
    fn make_split_partitions_by_day() {
        let patches: Vec<Patch> = (0..7).flat_map(|d| (0..3).map(move |s| patch(d, s, Label::Empty))).collect();
        let items = TrueLabels.labels(&patches).unwrap();
        let s = make_finetune_split(&items, 7).unwrap();
        assert_eq!(s.l(), 2);
        assert_eq!(s.train.len(), 15);
        assert_eq!(s.val.len(), 6);
        assert!(s.val.iter().all(|(p, _)| p.day_index >= 5));
    }

    #[test]
    fn empty_side_reports_histogram() {
        let patches: Vec<Patch> = (0..5).map(|d| patch(d, 0, Label::Empty)).collect();
        let items = TrueLabels.labels(&patches).unwrap();
        let e = make_finetune_split(&items, 7).unwrap_err().to_string();
        assert!(e.contains("validation set is empty") && e.contains("day 4: 1"), "{e}");
        assert!(make_finetune_split(&items, 3).is_err(), "day 4 lies outside n = 3");
    }

    #[test]
    fn pseudo_source_joins_by_key() {
        use crate::teacher::filter_pseudo_labels;
        let patches: Vec<Patch> = (0..4).map(|d| patch(d, 0, Label::Empty)).collect();
        let post = [[0.95, 0.05], [0.6, 0.4], [0.02, 0.98], [0.5, 0.5]];
        let set = filter_pseudo_labels(&patches, &post, 0.9).unwrap();
        let items = PseudoLabels(&set).labels(&patches).unwrap();
        let got: Vec<(usize, Label)> = items.iter().map(|(p, l)| (p.day_index, *l)).collect();
        assert_eq!(got, vec![(0, Label::Occupied), (2, Label::Empty)]);
    }

    #[test]
    fn true_source_rejects_unknown() {
        let patches = vec![patch(0, 0, Label::Unknown)];
        assert!(TrueLabels.labels(&patches).is_err());
    }

    #[test]
    fn freeze_policy_parse_and_mask() {
        use crate::nn::{InputShape, LayerSpec};
        assert_eq!("all_layers".parse::<FreezePolicy>().unwrap(), FreezePolicy::AllLayers);
        assert!("some".parse::<FreezePolicy>().is_err());
        let mlp = ArchDescriptor::new(
            InputShape::new(2, 2, 1),
            vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }],
        )
        .unwrap();
        assert!(FreezePolicy::LastConvAndDense.trainable_mask(&mlp).is_err());
        assert_eq!(FreezePolicy::AllLayers.trainable_mask(&mlp).unwrap(), None);
    }
}
