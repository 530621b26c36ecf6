//! Cross-domain experiments: teacher vs. student before and after
//! fine-tuning, the day-count and threshold sweeps, and their reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{extract_patches, DatasetManifest, Patch, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::model::{classify_patches, Classifier, Model};
use crate::nn::train::{argmax_label, DEFAULT_EPOCHS};
use crate::nn::{AdamHyper, ArchDescriptor, ArchRegistry, Checkpoint};
use crate::seed::derive_seed;
use crate::student::{
    finetune, make_finetune_split, pretrain_student, FinetuneTags, FreezePolicy, LabelSource, PseudoLabels, TrueLabels,
};
use crate::teacher::{build_ensemble, ensemble_predict, filter_pseudo_labels, Ensemble, PseudoLabelSet, PseudoStats};

const STUDENT_SEED_TAG: u64 = 0x5354;
const FINETUNE_SEED_TAG: u64 = 0x4654;

/// Confusion counts indexed `[truth][prediction]`, class 0 = occupied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[usize; 2]; 2],
}

impl Confusion {
    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for t in 0..2 {
            for p in 0..2 {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        self.counts[0][0] + self.counts[1][1]
    }

    pub fn accuracy(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| self.correct() as f64 / t as f64)
    }
}

/// Scores posterior rows against the patches' ground truth.
pub fn confusion(patches: &[Patch], posteriors: &[[f32; 2]]) -> Result<Confusion> {
    if patches.len() != posteriors.len() {
        return Err(Error::Shape(format!(
            "{} patches but {} posterior rows",
            patches.len(),
            posteriors.len()
        )));
    }
    let mut c = Confusion::default();
    for (p, post) in patches.iter().zip(posteriors) {
        let truth = p.true_label.class_index().ok_or_else(|| {
            Error::Invalid(format!("test spot {} in {} has no ground truth", p.spot_id, p.image_path))
        })?;
        c.add(truth, argmax_label(*post));
    }
    Ok(c)
}

/// Like [`confusion`] but skips patches without ground truth.
pub fn confusion_known(patches: &[Patch], posteriors: &[[f32; 2]]) -> Result<Confusion> {
    if patches.len() != posteriors.len() {
        return Err(Error::Shape(format!(
            "{} patches but {} posterior rows",
            patches.len(),
            posteriors.len()
        )));
    }
    let mut c = Confusion::default();
    for (p, post) in patches.iter().zip(posteriors) {
        if let Some(truth) = p.true_label.class_index() {
            c.add(truth, argmax_label(*post));
        }
    }
    Ok(c)
}

pub fn accuracy(model: &dyn Classifier, patches: &[Patch]) -> Result<(f64, Confusion)> {
    if patches.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    let c = confusion(patches, &classify_patches(model, patches)?)?;
    Ok((c.accuracy().expect("non-empty"), c))
}

/// Sample-weighted mean of per-dataset accuracies.
pub fn weighted_average(parts: &[(f64, usize)]) -> Result<f64> {
    if parts.is_empty() {
        return Err(Error::Empty("no datasets to average".into()));
    }
    if let Some((_, n)) = parts.iter().find(|(_, n)| *n == 0) {
        return Err(Error::Invalid(format!("dataset with {n} samples")));
    }
    let total: usize = parts.iter().map(|(_, n)| n).sum();
    Ok(parts.iter().map(|(a, n)| a * *n as f64).sum::<f64>() / total as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant or the lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// A domain's patches ordered by (angle, day, capture order), so that each
/// angle's first-n-days window and test tail are contiguous ranges.
pub struct Domain {
    pub name: String,
    pub angles: Vec<String>,
    pub patches: Vec<Patch>,
    angle_ranges: Vec<Range<usize>>,
}

impl Domain {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        Domain::from_patches(&manifest.name, &manifest.angles, extract_patches(manifest, PATCH_SIZE)?)
    }

    pub fn from_patches(name: &str, angles: &[String], mut patches: Vec<Patch>) -> Result<Self> {
        let pos = |a: &str| angles.iter().position(|x| x == a);
        if let Some(p) = patches.iter().find(|p| pos(&p.angle_id).is_none()) {
            return Err(Error::Invalid(format!("patch angle {} is not listed in the domain", p.angle_id)));
        }
        patches.sort_by_key(|p| (pos(&p.angle_id), p.day_index));
        let angle_ranges = angles
            .iter()
            .map(|a| {
                let lo = patches.partition_point(|p| pos(&p.angle_id) < pos(a));
                let hi = patches.partition_point(|p| pos(&p.angle_id) <= pos(a));
                lo..hi
            })
            .collect();
        Ok(Domain {
            name: name.into(),
            angles: angles.to_vec(),
            patches,
            angle_ranges,
        })
    }

    /// Patches of angle `a` from days `[0, n)`.
    pub fn window(&self, a: usize, n: usize) -> Range<usize> {
        let r = self.angle_ranges[a].clone();
        let cut = r.start + self.patches[r.clone()].partition_point(|p| p.day_index < n);
        r.start..cut
    }

    /// Patches of angle `a` from day `exclude` onward.
    pub fn test_range(&self, a: usize, exclude: usize) -> Range<usize> {
        let r = self.angle_ranges[a].clone();
        self.window(a, exclude).end..r.end
    }

    /// Days per angle stream, the minimum over angles.
    pub fn min_days(&self) -> usize {
        self.angle_ranges
            .iter()
            .map(|r| self.patches[r.clone()].last().map_or(0, |p| p.day_index + 1))
            .min()
            .unwrap_or(0)
    }

    pub fn has_ground_truth(&self) -> bool {
        self.patches.iter().all(|p| p.true_label.is_known())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_days: usize,
    pub tau: f64,
    pub seeds: Vec<u64>,
    pub teacher_arch: String,
    pub student_arch: String,
    pub hyper: AdamHyper,
    pub epochs: usize,
    /// Target days never scored; defaults to `n_days`.
    pub exclude_days_for_test: Option<usize>,
    pub freeze: FreezePolicy,
    pub sweep_days: Vec<usize>,
    pub sweep_exclude_days: usize,
    pub sweep_taus: Vec<f64>,
    pub true_label_oracle: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_days: 7,
            tau: 0.9,
            seeds: vec![1, 2, 3, 4, 5],
            teacher_arch: "teacher-member".into(),
            student_arch: "student".into(),
            hyper: AdamHyper::default(),
            epochs: DEFAULT_EPOCHS,
            exclude_days_for_test: None,
            freeze: FreezePolicy::AllLayers,
            sweep_days: (6..=14).collect(),
            sweep_exclude_days: 14,
            sweep_taus: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            true_label_oracle: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_days < 2 {
            return Err(Error::Invalid(format!("n_days must be at least 2, got {}", self.n_days)));
        }
        for &t in std::iter::once(&self.tau).chain(&self.sweep_taus) {
            if !(0.5..1.0).contains(&t) {
                return Err(Error::Invalid(format!("threshold must lie in [0.5, 1), got {t}")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Invalid("seeds must not be empty".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be at least 1".into()));
        }
        if self.exclude() < self.n_days {
            return Err(Error::Invalid(format!(
                "exclude_days_for_test ({}) must cover the {} fine-tuning days",
                self.exclude(),
                self.n_days
            )));
        }
        self.hyper.validate()
    }

    pub fn exclude(&self) -> usize {
        self.exclude_days_for_test.unwrap_or(self.n_days)
    }

    pub fn archs(&self) -> Result<(ArchDescriptor, ArchDescriptor)> {
        let reg = ArchRegistry::builtin();
        Ok((reg.resolve(&self.teacher_arch)?, reg.resolve(&self.student_arch)?))
    }
}

/// Which labels a fine-tuning run trains on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelChoice {
    Pseudo { tau: f64 },
    True,
}

/// Everything about one (direction, seed) that does not depend on n or τ:
/// the trained ensemble, the pretrained student and both models'
/// posteriors on every target patch.
pub struct PreparedRun {
    pub seed: u64,
    pub ensemble: Ensemble,
    pub student: Checkpoint,
    pub teacher_post: Vec<[f32; 2]>,
    pub raw_post: Vec<[f32; 2]>,
}

pub fn student_seed(seed: u64) -> u64 {
    derive_seed(seed, &[STUDENT_SEED_TAG])
}

pub fn finetune_seed(seed: u64, angle_index: usize) -> u64 {
    derive_seed(seed, &[FINETUNE_SEED_TAG, angle_index as u64])
}

impl PreparedRun {
    pub fn train(source: &Domain, target: &Domain, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let (t_arch, s_arch) = cfg.archs()?;
        log::info!("{}→{} seed {seed}: training teacher ensemble", source.name, target.name);
        let ensemble = build_ensemble(&source.patches, &source.angles, &t_arch, &cfg.hyper, cfg.epochs, seed)
            .map_err(|e| e.in_stage("build_ensemble", seed))?;
        log::info!("{}→{} seed {seed}: pretraining student", source.name, target.name);
        let student = pretrain_student(&source.patches, &s_arch, &cfg.hyper, cfg.epochs, student_seed(seed))
            .map_err(|e| e.in_stage("pretrain_student", seed))?;
        PreparedRun::from_parts(seed, ensemble, student, target)
    }

    pub fn from_parts(seed: u64, ensemble: Ensemble, student: Checkpoint, target: &Domain) -> Result<Self> {
        let teacher_post = ensemble_predict(&ensemble, &target.patches).map_err(|e| e.in_stage("ensemble_predict", seed))?;
        let raw_post =
            classify_patches(&Model::new(student.clone())?, &target.patches).map_err(|e| e.in_stage("student_predict", seed))?;
        Ok(PreparedRun {
            seed,
            ensemble,
            student,
            teacher_post,
            raw_post,
        })
    }

    /// Teacher pseudo-labels over the first `n` days of every angle.
    pub fn pseudo_set(&self, target: &Domain, n: usize, tau: f64) -> Result<PseudoLabelSet> {
        window_pseudo_labels(target, &self.teacher_post, n, tau)
    }
}

/// Filters teacher posteriors (one per target patch) over the first `n` days
/// of every angle and pools the per-angle sets.
pub fn window_pseudo_labels(target: &Domain, teacher_post: &[[f32; 2]], n: usize, tau: f64) -> Result<PseudoLabelSet> {
    if teacher_post.len() != target.patches.len() {
        return Err(Error::Shape(format!(
            "{} posteriors for {} target patches",
            teacher_post.len(),
            target.patches.len()
        )));
    }
    let mut labels = Vec::new();
    let mut stats = PseudoStats {
        candidates: 0,
        used: 0,
        wrong: Some(0),
        tau,
    };
    for a in 0..target.angles.len() {
        let w = target.window(a, n);
        let s = filter_pseudo_labels(&target.patches[w.clone()], &teacher_post[w], tau)?;
        stats.candidates += s.stats.candidates;
        stats.used += s.stats.used;
        stats.wrong = stats.wrong.zip(s.stats.wrong).map(|(x, y)| x + y);
        labels.extend(s.labels);
    }
    Ok(PseudoLabelSet { labels, stats })
}

#[derive(Debug, Clone)]
pub struct FinetuneSettings<'a> {
    pub hyper: &'a AdamHyper,
    pub epochs: usize,
    pub freeze: FreezePolicy,
    pub seed: u64,
    pub source_domain: &'a str,
    pub tau: Option<f64>,
}

/// One fine-tuned student per target angle, each trained only on labels
/// from its own angle's first `n` days.
pub fn finetune_students(
    pretrained: &Checkpoint,
    target: &Domain,
    n: usize,
    labels: &dyn LabelSource,
    settings: &FinetuneSettings<'_>,
) -> Result<Vec<(String, Checkpoint)>> {
    let mut out = Vec::with_capacity(target.angles.len());
    for (a, angle) in target.angles.iter().enumerate() {
        let window = &target.patches[target.window(a, n)];
        let items = labels.labels(window)?;
        let split = make_finetune_split(&items, n)
            .map_err(|e| Error::Split(format!("angle {angle}: {e}")))?;
        let tags = FinetuneTags {
            source_domain: settings.source_domain.into(),
            target_angle: angle.clone(),
            label_source: labels.name().into(),
            tau: settings.tau,
        };
        log::debug!("fine-tuning {angle}: {} train / {} val", split.train.len(), split.val.len());
        let ck = finetune(
            pretrained,
            &split,
            settings.hyper,
            settings.epochs,
            settings.freeze,
            finetune_seed(settings.seed, a),
            &tags,
        )?;
        out.push((angle.clone(), ck));
    }
    Ok(out)
}

/// Per-angle confusion of each angle's own student on its test tail.
pub fn evaluate_students(target: &Domain, students: &[(String, Checkpoint)], exclude: usize) -> Result<Vec<Confusion>> {
    target
        .angles
        .iter()
        .enumerate()
        .map(|(a, angle)| {
            let (_, ck) = students
                .iter()
                .find(|(s, _)| s == angle)
                .ok_or_else(|| Error::Invalid(format!("no fine-tuned student for angle {angle}")))?;
            let test = &target.patches[target.test_range(a, exclude)];
            confusion_known(test, &classify_patches(&Model::new(ck.clone())?, test)?)
        })
        .collect()
}

/// Per-angle confusion of fixed posteriors over each angle's test tail.
pub fn evaluate_posteriors(target: &Domain, post: &[[f32; 2]], exclude: usize) -> Result<Vec<Confusion>> {
    (0..target.angles.len())
        .map(|a| {
            let r = target.test_range(a, exclude);
            confusion_known(&target.patches[r.clone()], &post[r])
        })
        .collect()
}

/// One measured accuracy: one seed, pooled (`angle` = None) or one angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub condition: String,
    pub direction: String,
    pub n: usize,
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub angle: Option<String>,
    pub seed: u64,
    pub correct: usize,
    pub total: usize,
    pub used: Option<usize>,
    pub wrong: Option<usize>,
}

impl SeedRow {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Mean ± population stdev over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub condition: String,
    pub direction: String,
    pub n: usize,
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub angle: Option<String>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub used: Option<f64>,
    pub wrong: Option<f64>,
    pub test_samples: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub config: ExperimentConfig,
    pub notes: Vec<String>,
    /// Free-form origin details such as a config digest.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
    pub rows: Vec<Row>,
    pub per_angle: Vec<Row>,
    pub per_seed: Vec<SeedRow>,
}

type GroupKey = (String, String, usize, Option<u64>, Option<String>);

fn group_key(r: &SeedRow) -> GroupKey {
    (
        r.condition.clone(),
        r.direction.clone(),
        r.n,
        r.tau.map(f64::to_bits),
        r.angle.clone(),
    )
}

/// Groups seed rows (in first-seen order) and reduces each group in seed order.
pub fn aggregate(seed_rows: &[SeedRow]) -> Vec<Row> {
    let mut order: Vec<GroupKey> = Vec::new();
    let mut groups: BTreeMap<GroupKey, Vec<&SeedRow>> = BTreeMap::new();
    for r in seed_rows {
        let k = group_key(r);
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let g = &groups[&k];
            let accs: Vec<f64> = g.iter().map(|r| r.accuracy()).collect();
            let (acc_mean, acc_std) = mean_std(&accs);
            let avg = |f: fn(&SeedRow) -> Option<usize>| -> Option<f64> {
                let vals: Option<Vec<usize>> = g.iter().map(|r| f(r)).collect();
                vals.map(|v| v.iter().sum::<usize>() as f64 / v.len() as f64)
            };
            Row {
                condition: g[0].condition.clone(),
                direction: g[0].direction.clone(),
                n: g[0].n,
                tau: g[0].tau,
                angle: g[0].angle.clone(),
                acc_mean,
                acc_std,
                used: avg(|r| r.used),
                wrong: avg(|r| r.wrong),
                test_samples: g[0].total,
                seeds: g.len(),
            }
        })
        .collect()
}

fn standard_notes() -> Vec<String> {
    vec![
        "acc_std is the population standard deviation over seeds".into(),
        "every seed retrains the whole pipeline: teacher ensemble, student pretraining and fine-tuning".into(),
        "teacher members are trained from scratch on the source domain".into(),
        "one student per target angle; pooled accuracy counts all test spots of all angles".into(),
    ]
}

impl Report {
    pub fn new(kind: &str, config: &ExperimentConfig, mut notes: Vec<String>, per_seed: Vec<SeedRow>) -> Self {
        let mut all = standard_notes();
        all.append(&mut notes);
        let (pooled, angles): (Vec<SeedRow>, Vec<SeedRow>) = per_seed.iter().cloned().partition(|r| r.angle.is_none());
        Report {
            kind: kind.into(),
            config: config.clone(),
            notes: all,
            provenance: BTreeMap::new(),
            rows: aggregate(&pooled),
            per_angle: aggregate(&angles),
            per_seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn row(&self, condition: &str, direction: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.condition == condition && r.direction == direction)
    }

    /// Fixed-width table of the pooled rows.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.kind);
        let _ = writeln!(
            s,
            "{:<12} {:<10} {:>3} {:>5} {:>16} {:>10} {:>8} {:>6}",
            "condition", "direction", "n", "tau", "accuracy (%)", "used", "wrong", "test"
        );
        for r in &self.rows {
            let tau = r.tau.map_or("-".into(), |t| format!("{t:.2}"));
            let opt = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.1}"));
            let _ = writeln!(
                s,
                "{:<12} {:<10} {:>3} {:>5} {:>8.2} ± {:<5.2} {:>10} {:>8} {:>6}",
                r.condition,
                r.direction,
                r.n,
                tau,
                100.0 * r.acc_mean,
                100.0 * r.acc_std,
                opt(r.used),
                opt(r.wrong),
                r.test_samples
            );
        }
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        s
    }

    /// Merges per-direction reports and adds a sample-weighted row per
    /// (condition, n, τ) present in every direction.
    pub fn combine(kind: &str, reports: &[Report]) -> Result<Report> {
        let first = reports.first().ok_or_else(|| Error::Empty("no reports to combine".into()))?;
        let mut per_seed: Vec<SeedRow> = reports.iter().flat_map(|r| r.per_seed.iter().cloned()).collect();
        let mut weighted = Vec::new();
        if reports.len() > 1 {
            let pooled: Vec<&SeedRow> = first.per_seed.iter().filter(|r| r.angle.is_none()).collect();
            for (i, base) in pooled.iter().enumerate() {
                let mut sum = (*base).clone();
                let mut complete = true;
                for other in &reports[1..] {
                    let matching: Vec<&SeedRow> = other
                        .per_seed
                        .iter()
                        .filter(|r| {
                            r.angle.is_none() && r.condition == base.condition && r.n == base.n && r.tau == base.tau
                        })
                        .collect();
                    // Pair seeds by their position within the group.
                    let pos = pooled[..i]
                        .iter()
                        .filter(|r| r.condition == base.condition && r.n == base.n && r.tau == base.tau)
                        .count();
                    match matching.get(pos) {
                        Some(r) => {
                            sum.correct += r.correct;
                            sum.total += r.total;
                            sum.used = sum.used.zip(r.used).map(|(a, b)| a + b);
                            sum.wrong = sum.wrong.zip(r.wrong).map(|(a, b)| a + b);
                        }
                        None => complete = false,
                    }
                }
                if complete {
                    // Σcorrect/Σtotal is the sample-weighted mean of the
                    // per-direction accuracies.
                    sum.direction = "weighted".into();
                    weighted.push(sum);
                }
            }
        }
        per_seed.extend(weighted);
        let mut notes: Vec<String> = first.notes.iter().skip(standard_notes().len()).cloned().collect();
        for r in &reports[1..] {
            for n in r.notes.iter().skip(standard_notes().len()) {
                if !notes.contains(n) {
                    notes.push(n.clone());
                }
            }
        }
        Ok(Report::new(kind, &first.config, notes, per_seed))
    }
}

/// One source→target direction with prepared runs cached per seed.
pub struct Experiment<'d> {
    pub source: &'d Domain,
    pub target: &'d Domain,
    pub cfg: ExperimentConfig,
    runs: BTreeMap<u64, PreparedRun>,
}

impl<'d> Experiment<'d> {
    pub fn new(source: &'d Domain, target: &'d Domain, cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.archs()?;
        if source.name == target.name {
            return Err(Error::Invalid(format!("source and target are both {}", source.name)));
        }
        Ok(Experiment {
            source,
            target,
            cfg,
            runs: BTreeMap::new(),
        })
    }

    pub fn direction(&self) -> String {
        format!("{}→{}", self.source.name, self.target.name)
    }

    pub fn insert_prepared(&mut self, run: PreparedRun) {
        self.runs.insert(run.seed, run);
    }

    pub fn prepared(&mut self, seed: u64) -> Result<&PreparedRun> {
        if !self.runs.contains_key(&seed) {
            let run = PreparedRun::train(self.source, self.target, &self.cfg, seed)?;
            self.runs.insert(seed, run);
        }
        Ok(&self.runs[&seed])
    }

    fn rows_from(
        &self,
        condition: &str,
        seed: u64,
        n: usize,
        tau: Option<f64>,
        per_angle: &[Confusion],
        stats: Option<(usize, Option<usize>)>,
    ) -> Vec<SeedRow> {
        let mut pooled = Confusion::default();
        per_angle.iter().for_each(|c| pooled.merge(c));
        let row = |angle: Option<String>, c: &Confusion| SeedRow {
            condition: condition.into(),
            direction: self.direction(),
            n,
            tau,
            angle,
            seed,
            correct: c.correct(),
            total: c.total(),
            used: stats.map(|s| s.0),
            wrong: stats.and_then(|s| s.1),
        };
        let mut out = vec![row(None, &pooled)];
        for (angle, c) in self.target.angles.iter().zip(per_angle) {
            out.push(SeedRow {
                used: None,
                wrong: None,
                ..row(Some(angle.clone()), c)
            });
        }
        out
    }

    pub fn teacher_rows(&mut self, seed: u64, exclude: usize) -> Result<Vec<SeedRow>> {
        self.prepared(seed)?;
        let c = evaluate_posteriors(self.target, &self.runs[&seed].teacher_post, exclude)?;
        Ok(self.rows_from("teacher", seed, self.cfg.n_days, None, &c, None))
    }

    pub fn raw_rows(&mut self, seed: u64, exclude: usize) -> Result<Vec<SeedRow>> {
        self.prepared(seed)?;
        let c = evaluate_posteriors(self.target, &self.runs[&seed].raw_post, exclude)?;
        Ok(self.rows_from("student_raw", seed, self.cfg.n_days, None, &c, None))
    }

    /// Fine-tunes one student per angle on the first `n` days and scores
    /// each on its angle's days from `exclude` onward.
    pub fn finetuned_rows(&mut self, seed: u64, n: usize, labels: LabelChoice, exclude: usize) -> Result<Vec<SeedRow>> {
        if exclude < n {
            return Err(Error::Invalid(format!("test days start at {exclude}, inside the first {n} days")));
        }
        self.prepared(seed)?;
        let run = &self.runs[&seed];
        let settings = FinetuneSettings {
            hyper: &self.cfg.hyper,
            epochs: self.cfg.epochs,
            freeze: self.cfg.freeze,
            seed,
            source_domain: &self.source.name,
            tau: match labels {
                LabelChoice::Pseudo { tau } => Some(tau),
                LabelChoice::True => None,
            },
        };
        let (students, stats) = match labels {
            LabelChoice::Pseudo { tau } => {
                let set = run.pseudo_set(self.target, n, tau)?;
                let s = finetune_students(&run.student, self.target, n, &PseudoLabels(&set), &settings);
                (s, (set.stats.used, set.stats.wrong))
            }
            LabelChoice::True => {
                let used = (0..self.target.angles.len()).map(|a| self.target.window(a, n).len()).sum();
                let s = finetune_students(&run.student, self.target, n, &TrueLabels, &settings);
                (s, (used, Some(0)))
            }
        };
        let students = students.map_err(|e| e.in_stage("finetune", seed))?;
        self.student_rows(seed, n, labels, &students, stats, exclude)
    }

    /// Scores already fine-tuned per-angle students; `stats` is the
    /// (used, wrong) count of the labels they were trained on.
    pub fn student_rows(
        &self,
        seed: u64,
        n: usize,
        labels: LabelChoice,
        students: &[(String, Checkpoint)],
        stats: (usize, Option<usize>),
        exclude: usize,
    ) -> Result<Vec<SeedRow>> {
        let (condition, tau) = match labels {
            LabelChoice::Pseudo { tau } => ("student_ft", Some(tau)),
            LabelChoice::True => ("oracle", None),
        };
        let c = evaluate_students(self.target, students, exclude)?;
        Ok(self.rows_from(condition, seed, n, tau, &c, Some(stats)))
    }

    /// Teacher, un-tuned student and fine-tuned student at the configured
    /// n and τ.
    pub fn main_report(&mut self) -> Result<Report> {
        let (n, tau, exclude) = (self.cfg.n_days, self.cfg.tau, self.cfg.exclude());
        let mut rows = Vec::new();
        for seed in self.cfg.seeds.clone() {
            rows.extend(self.teacher_rows(seed, exclude)?);
            rows.extend(self.raw_rows(seed, exclude)?);
            rows.extend(self.finetuned_rows(seed, n, LabelChoice::Pseudo { tau }, exclude)?);
        }
        Ok(Report::new("main", &self.cfg, self.notes(), rows))
    }

    /// Fine-tuned accuracy for each n, all scored on the same test days.
    pub fn sweep_days(&mut self) -> Result<Report> {
        let exclude = self.cfg.sweep_exclude_days;
        let days = self.target.min_days();
        if days <= exclude {
            return Err(Error::Invalid(format!(
                "day sweep needs at least {} target days per angle (test days start at {exclude}); {} has {days}",
                exclude + 1,
                self.target.name
            )));
        }
        if let Some(&n) = self.cfg.sweep_days.iter().find(|&&n| n < 2 || n > exclude) {
            return Err(Error::Invalid(format!("sweep n = {n} outside [2, {exclude}]")));
        }
        let mut rows = Vec::new();
        for seed in self.cfg.seeds.clone() {
            for n in self.cfg.sweep_days.clone() {
                rows.extend(self.finetuned_rows(seed, n, LabelChoice::Pseudo { tau: self.cfg.tau }, exclude)?);
            }
        }
        Ok(Report::new("sweep-days", &self.cfg, self.notes(), rows))
    }

    /// Fine-tuned accuracy for each τ, plus the true-label ceiling when the
    /// target has ground truth.
    pub fn sweep_threshold(&mut self) -> Result<Report> {
        let (n, exclude) = (self.cfg.n_days, self.cfg.exclude());
        let oracle = self.cfg.true_label_oracle && self.target.has_ground_truth();
        let mut notes = self.notes();
        if self.cfg.true_label_oracle && !oracle {
            notes.push("target lacks ground truth: wrong counts unavailable and no oracle row".into());
        }
        let mut rows = Vec::new();
        for seed in self.cfg.seeds.clone() {
            for tau in self.cfg.sweep_taus.clone() {
                rows.extend(self.finetuned_rows(seed, n, LabelChoice::Pseudo { tau }, exclude)?);
            }
            if oracle {
                rows.extend(self.finetuned_rows(seed, n, LabelChoice::True, exclude)?);
            }
        }
        Ok(Report::new("sweep-threshold", &self.cfg, notes, rows))
    }

    pub fn notes(&self) -> Vec<String> {
        let mut notes = Vec::new();
        for run in self.runs.values() {
            for w in &run.ensemble.warnings {
                let w = format!("{}: {w}", self.direction());
                if !notes.contains(&w) {
                    notes.push(w);
                }
            }
        }
        notes
    }
}

/// Count of spots per label in a patch list, for diagnostics.
pub fn label_counts(patches: &[Patch]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for p in patches {
        *m.entry(p.true_label.to_string()).or_default() += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use crate::nn::Tensor;

    fn patch(angle: &str, day: usize, label: Label) -> Patch {
        Patch {
            pixels: Tensor::zeros(&[1, 1, 1]),
            image_path: format!("{angle}/{day}.png"),
            spot_id: "s".into(),
            lot_id: "L".into(),
            angle_id: angle.into(),
            day_index: day,
            true_label: label,
        }
    }

    #[test]
    fn weighted_average_examples() {
        let w = weighted_average(&[(0.952, 1_000_000), (0.964, 120_000)]).unwrap();
        assert!((w - 0.9533).abs() < 5e-5, "{w}");
        assert!((weighted_average(&[(0.8, 10), (0.6, 10)]).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(weighted_average(&[(0.42, 7)]).unwrap(), 0.42);
        assert!(weighted_average(&[]).is_err());
        assert!(weighted_average(&[(0.5, 0)]).is_err());
    }

    #[test]
    fn confusion_counts() {
        let p = vec![
            patch("A1", 0, Label::Occupied),
            patch("A1", 0, Label::Occupied),
            patch("A1", 0, Label::Empty),
            patch("A1", 0, Label::Empty),
            patch("A1", 0, Label::Empty),
        ];
        let post = [[0.9, 0.1], [0.2, 0.8], [0.1, 0.9], [0.7, 0.3], [0.5, 0.5]];
        let c = confusion(&p, &post).unwrap();
        assert_eq!(c.counts, [[1, 1], [1, 2]]);
        assert_eq!(c.accuracy(), Some(0.6));
        let balanced = [p[0].clone(), p[1].clone(), p[2].clone(), p[3].clone()];
        let majority = confusion(&balanced, &[[0.0, 1.0]; 4]).unwrap();
        assert_eq!(majority.accuracy(), Some(0.5));
        assert!(confusion(&[patch("A1", 0, Label::Unknown)], &[[1.0, 0.0]]).is_err());
    }

    #[test]
    fn stdev_is_population() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[0.7, 0.7]).1, 0.0);
    }

    #[test]
    fn spearman_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0]), Some(1.0));
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&x, &[1.0, 1.0, 1.0, 1.0]), None);
        let r = spearman(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn domain_ranges() {
        let angles = vec!["A1".to_string(), "A2".to_string()];
        let mut ps = Vec::new();
        for d in (0..4).rev() {
            ps.push(patch("A2", d, Label::Empty));
            ps.push(patch("A1", d, Label::Occupied));
        }
        let dom = Domain::from_patches("X", &angles, ps).unwrap();
        assert_eq!(dom.window(0, 2), 0..2);
        assert_eq!(dom.test_range(0, 2), 2..4);
        assert_eq!(dom.window(1, 3), 4..7);
        assert_eq!(dom.test_range(1, 3), 7..8);
        assert!(dom.patches[dom.window(1, 3)].iter().all(|p| p.angle_id == "A2" && p.day_index < 3));
        assert_eq!(dom.min_days(), 4);
        assert!(Domain::from_patches("X", &angles[..1], dom.patches.clone()).is_err());
    }

    #[test]
    fn aggregate_and_combine() {
        let mk = |dir: &str, seed, correct, total| SeedRow {
            condition: "teacher".into(),
            direction: dir.into(),
            n: 7,
            tau: None,
            angle: None,
            seed,
            correct,
            total,
            used: None,
            wrong: None,
        };
        let cfg = ExperimentConfig::default();
        let a = Report::new("main", &cfg, vec![], vec![mk("A→B", 1, 80, 100), mk("A→B", 1, 80, 100)]);
        assert_eq!(a.rows.len(), 1);
        assert_eq!(a.rows[0].acc_std, 0.0);
        let b = Report::new("main", &cfg, vec![], vec![mk("B→A", 1, 300, 300), mk("B→A", 1, 300, 300)]);
        let c = Report::combine("main", &[a, b]).unwrap();
        let w = c.row("teacher", "weighted").unwrap();
        let expect = weighted_average(&[(0.8, 100), (1.0, 300)]).unwrap();
        assert!((w.acc_mean - expect).abs() < 1e-12);
        assert_eq!(w.test_samples, 400);
        assert_eq!(c.rows.len(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = |f: fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.n_days = 1));
        assert!(bad(|c| c.tau = 1.0));
        assert!(bad(|c| c.seeds.clear()));
        assert!(bad(|c| c.exclude_days_for_test = Some(3)));
        assert!(bad(|c| c.sweep_taus = vec![0.3]));
    }
}
