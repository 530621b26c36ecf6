//! One function per subcommand. Each stage reads the artifacts of the
//! previous one from the run directory and fails naming the missing path.

use std::fs;
use std::path::{Path, PathBuf};

use pkdistill_core::cost::{bandwidth_estimate, bandwidth_summary, latency_probe};
use pkdistill_core::data::{parse_manifest, SynthSpec};
use pkdistill_core::eval::{
    finetune_students, student_seed, window_pseudo_labels, Domain, Experiment, FinetuneSettings,
    LabelChoice, PreparedRun, Report,
};
use pkdistill_core::model::Model;
use pkdistill_core::nn::gradcheck::grad_check_sampled;
use pkdistill_core::nn::{ArchRegistry, Checkpoint};
use pkdistill_core::student::{pretrain_student, PseudoLabels};
use pkdistill_core::teacher::{build_ensemble, ensemble_predict, Ensemble, PseudoLabelSet, PseudoStats};
use serde_json::json;

use crate::config::{digest_of, Resolved};
use crate::failure::{Failure, OrPipeline};

const LOCK_FILE: &str = ".pkdistill.lock";
const SYNTH_STAMP: &str = ".synth-digest";
const GRADCHECK_LIMIT: f64 = 1e-4;

/// Exclusive claim on a directory, released on drop.
pub struct DirLock(PathBuf);

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).or_pipeline(&format!("create {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write as _;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::Pipeline(format!(
                "{} is locked by another run ({}); delete the lock file if no run is active",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Failure::Pipeline(format!("lock {}: {e}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn banner(seeds: &[u64], digest: &str) {
    let s: Vec<String> = seeds.iter().map(u64::to_string).collect();
    println!("seed={} digest={digest}", s.join(","));
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).or_pipeline(&format!("create {}", dir.display()))?;
    }
    fs::write(path, text).or_pipeline(&format!("write {}", path.display()))
}

fn load_domain(path: &Path) -> Result<Domain, Failure> {
    let parsed = parse_manifest(path).or_pipeline(&format!("manifest {}", path.display()))?;
    if parsed.warnings > 0 {
        log::warn!("{}: {} streams had date gaps and were renumbered", path.display(), parsed.warnings);
    }
    Domain::from_manifest(&parsed.manifest).or_pipeline(&format!("patches of {}", path.display()))
}

/// Name of a domain without decoding its images.
fn domain_name(path: &Path) -> Result<(String, Vec<String>), Failure> {
    let m = parse_manifest(path).or_pipeline(&format!("manifest {}", path.display()))?.manifest;
    Ok((m.name, m.angles))
}

struct Layout<'r>(&'r Resolved);

impl Layout<'_> {
    fn ensemble(&self, seed: u64) -> PathBuf {
        self.0.seed_dir(seed).join("ensemble")
    }
    fn pretrained(&self, seed: u64) -> PathBuf {
        self.0.seed_dir(seed).join("student").join("pretrained.ckpt")
    }
    fn finetuned(&self, seed: u64, angle: &str) -> PathBuf {
        self.0.seed_dir(seed).join("student").join(format!("ft-{angle}.ckpt"))
    }
    fn pseudo(&self, seed: u64) -> (PathBuf, PathBuf) {
        let d = self.0.seed_dir(seed).join("pseudo");
        (d.join("labels.jsonl"), d.join("stats.json"))
    }
    fn report(&self, kind: &str, ext: &str) -> PathBuf {
        self.0.run_dir().join("reports").join(format!("{kind}.{ext}"))
    }

    fn require_ensemble(&self, seed: u64) -> Result<(), Failure> {
        let index = Ensemble::index_path(&self.ensemble(seed));
        if !index.is_file() {
            return Err(Failure::Pipeline(format!(
                "missing teacher ensemble {}; run `pkdistill train-teacher` with this config first",
                index.display()
            )));
        }
        Ok(())
    }

    fn load_ensemble(&self, seed: u64) -> Result<Ensemble, Failure> {
        self.require_ensemble(seed)?;
        let dir = self.ensemble(seed);
        Ensemble::load(&dir).or_pipeline(&format!("ensemble {}", dir.display()))
    }

    fn load_checkpoint(&self, path: &Path, producer: &str) -> Result<Checkpoint, Failure> {
        if !path.is_file() {
            return Err(Failure::Pipeline(format!(
                "missing {}; run `pkdistill {producer}` with this config first",
                path.display()
            )));
        }
        Checkpoint::load(path).or_pipeline(&format!("checkpoint {}", path.display()))
    }

    fn load_pseudo(&self, seed: u64) -> Result<PseudoLabelSet, Failure> {
        let (labels, stats) = self.pseudo(seed);
        for p in [&labels, &stats] {
            if !p.is_file() {
                return Err(Failure::Pipeline(format!(
                    "missing pseudo-labels {}; run `pkdistill pseudo-label` with this config first",
                    p.display()
                )));
            }
        }
        PseudoLabelSet::read(&labels, &stats).or_pipeline(&format!("pseudo-labels {}", labels.display()))
    }

    /// Records the resolved config beside its artifacts.
    fn write_config(&self) -> Result<(), Failure> {
        let doc = json!({"digest": self.0.digest, "config": self.0.config});
        write_file(
            &self.0.run_dir().join("config.json"),
            &(serde_json::to_string_pretty(&doc).or_pipeline("config")? + "\n"),
        )
    }

    fn provenance(&self, seed: u64) -> [(&'static str, String); 2] {
        [("config_digest", self.0.digest.clone()), ("run_seed", seed.to_string())]
    }
}

pub fn synth(r: &Resolved, spec: Option<&Path>, preset: Option<&str>, out: Option<&Path>) -> Result<(), Failure> {
    let seed = r.config.seed.unwrap_or(1);
    let mut jobs: Vec<(SynthSpec, PathBuf)> = Vec::new();
    let spec_from_file = |p: &Path| -> Result<SynthSpec, Failure> {
        let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("cannot read spec {}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("spec {}: {e}", p.display())))
    };
    match (spec, preset) {
        (Some(_), Some(_)) => return Err(Failure::Config("give either --spec or --preset, not both".into())),
        (Some(_), None) | (None, Some(_)) => {
            let s = match (spec, preset) {
                (Some(p), _) => spec_from_file(p)?,
                (_, Some("a")) => SynthSpec::domain_a(seed),
                (_, Some("b")) => SynthSpec::domain_b(seed),
                (_, Some(other)) => return Err(Failure::Config(format!("unknown preset {other:?}; known: a, b"))),
                (None, None) => unreachable!("matched above"),
            };
            let out = match out {
                Some(o) => o.to_path_buf(),
                None => r.workdir.join("synth").join(digest_of(&s)?),
            };
            jobs.push((s, out));
        }
        (None, None) => {
            for (key, spec, manifest) in [
                ("source", &r.config.synth.source, &r.config.source),
                ("target", &r.config.synth.target, &r.config.target),
            ] {
                let spec = spec.clone().ok_or_else(|| {
                    Failure::Config(format!("no --spec given and config has no synth.{key}; set one of them"))
                })?;
                let manifest = manifest
                    .clone()
                    .ok_or_else(|| Failure::Config(format!("config synth.{key} needs `{key}` for its output path")))?;
                if manifest.file_name().and_then(|n| n.to_str()) != Some("manifest.jsonl") {
                    return Err(Failure::Config(format!(
                        "`{key}` must end in manifest.jsonl to be generated, got {}",
                        manifest.display()
                    )));
                }
                jobs.push((spec, manifest.parent().map(Path::to_path_buf).unwrap_or_default()));
            }
        }
    }
    for (spec, out) in jobs {
        spec.validate().map_err(|e| Failure::Config(e.to_string()))?;
        let digest = digest_of(&spec)?;
        banner(&[spec.seed], &digest);
        let stamp = out.join(SYNTH_STAMP);
        let current = fs::read_to_string(&stamp).ok();
        if current.as_deref().map(str::trim) == Some(digest.as_str()) && out.join("manifest.jsonl").is_file() {
            println!("up-to-date {}", out.display());
            continue;
        }
        let _lock = DirLock::acquire(&out)?;
        let m = pkdistill_core::data::synth_generate(&spec, &out)?;
        write_file(&stamp, &format!("{digest}\n"))?;
        println!(
            "wrote {} images, {} spots to {}",
            m.records.len(),
            m.spot_count(),
            out.join("manifest.jsonl").display()
        );
    }
    Ok(())
}

pub fn train_teacher(r: &Resolved) -> Result<(), Failure> {
    banner(r.seeds(), &r.digest);
    let source_path = r.require("source", &r.config.source)?;
    let cfg = &r.config.experiment;
    let (t_arch, _) = cfg.archs().map_err(|e| Failure::Config(e.to_string()))?;
    let _lock = DirLock::acquire(&r.workdir)?;
    let layout = Layout(r);
    layout.write_config()?;
    let mut source = None;
    for &seed in r.seeds() {
        let dir = layout.ensemble(seed);
        if Ensemble::index_path(&dir).is_file() {
            println!("up-to-date {}", dir.display());
            continue;
        }
        if source.is_none() {
            source = Some(load_domain(&source_path)?);
        }
        let src = source.as_ref().expect("loaded above");
        let mut ens = build_ensemble(&src.patches, &src.angles, &t_arch, &cfg.hyper, cfg.epochs, seed)
            .map_err(|e| e.in_stage("build_ensemble", seed))?;
        for (k, v) in layout.provenance(seed) {
            ens.tag(k, &v);
        }
        ens.save(&dir)?;
        for w in &ens.warnings {
            log::warn!("{w}");
        }
        let vals: Vec<String> = ens.members().map(|m| format!("{:.4}", m.meta.val_accuracy)).collect();
        println!("seed {seed}: {} members (val {}) -> {}", ens.len(), vals.join(" "), dir.display());
    }
    Ok(())
}

pub fn pseudo_label(r: &Resolved) -> Result<(), Failure> {
    banner(r.seeds(), &r.digest);
    let target_path = r.require("target", &r.config.target)?;
    let cfg = &r.config.experiment;
    let _lock = DirLock::acquire(&r.workdir)?;
    let layout = Layout(r);
    let ensembles = r
        .seeds()
        .iter()
        .map(|&s| layout.load_ensemble(s))
        .collect::<Result<Vec<_>, _>>()?;
    let target = load_domain(&target_path)?;
    for (&seed, ens) in r.seeds().iter().zip(&ensembles) {
        let post = ensemble_predict(ens, &target.patches).map_err(|e| e.in_stage("ensemble_predict", seed))?;
        let set = window_pseudo_labels(&target, &post, cfg.n_days, cfg.tau)?;
        let (labels, stats) = layout.pseudo(seed);
        fs::create_dir_all(labels.parent().expect("has parent")).or_pipeline("create pseudo dir")?;
        set.write(&labels, &stats)?;
        let mut doc = serde_json::to_value(set.stats).or_pipeline("stats")?;
        for (k, v) in layout.provenance(seed) {
            doc[k] = v.into();
        }
        write_file(&stats, &(serde_json::to_string_pretty(&doc).or_pipeline("stats")? + "\n"))?;
        let s = set.stats;
        println!(
            "seed {seed}: {} of {} crops kept at tau {} (wrong {}) -> {}",
            s.used,
            s.candidates,
            s.tau,
            s.wrong.map_or("unknown".into(), |w| w.to_string()),
            labels.display()
        );
    }
    Ok(())
}

pub fn finetune(r: &Resolved) -> Result<(), Failure> {
    banner(r.seeds(), &r.digest);
    let source_path = r.require("source", &r.config.source)?;
    let target_path = r.require("target", &r.config.target)?;
    let cfg = &r.config.experiment;
    let (_, s_arch) = cfg.archs().map_err(|e| Failure::Config(e.to_string()))?;
    let _lock = DirLock::acquire(&r.workdir)?;
    let layout = Layout(r);
    let sets = r
        .seeds()
        .iter()
        .map(|&s| layout.load_pseudo(s))
        .collect::<Result<Vec<_>, _>>()?;
    let (source_name, _) = domain_name(&source_path)?;
    let target = load_domain(&target_path)?;
    let mut source = None;
    for (&seed, set) in r.seeds().iter().zip(&sets) {
        let path = layout.pretrained(seed);
        let pretrained = if path.is_file() {
            Checkpoint::load(&path)?
        } else {
            if source.is_none() {
                source = Some(load_domain(&source_path)?);
            }
            let src = source.as_ref().expect("loaded above");
            let mut ck = pretrain_student(&src.patches, &s_arch, &cfg.hyper, cfg.epochs, student_seed(seed))
                .map_err(|e| e.in_stage("pretrain_student", seed))?;
            for (k, v) in layout.provenance(seed) {
                ck.meta.tags.insert(k.into(), v);
            }
            fs::create_dir_all(path.parent().expect("has parent")).or_pipeline("create student dir")?;
            ck.save(&path)?;
            println!("seed {seed}: pretrained student -> {}", path.display());
            ck
        };
        let settings = FinetuneSettings {
            hyper: &cfg.hyper,
            epochs: cfg.epochs,
            freeze: cfg.freeze,
            seed,
            source_domain: &source_name,
            tau: Some(set.stats.tau),
        };
        let students = finetune_students(&pretrained, &target, cfg.n_days, &PseudoLabels(set), &settings)
            .map_err(|e| e.in_stage("finetune", seed))?;
        for (angle, mut ck) in students {
            for (k, v) in layout.provenance(seed) {
                ck.meta.tags.insert(k.into(), v);
            }
            let p = layout.finetuned(seed, &angle);
            ck.save(&p)?;
            println!(
                "seed {seed}: {angle} epoch {} val {:.4} -> {}",
                ck.meta.epoch,
                ck.meta.val_accuracy,
                p.display()
            );
        }
    }
    Ok(())
}

fn finish_report(r: &Resolved, layout: &Layout<'_>, mut report: Report) -> Result<(), Failure> {
    report.provenance.insert("config_digest".into(), r.digest.clone());
    let seeds: Vec<String> = r.seeds().iter().map(u64::to_string).collect();
    report.provenance.insert("seeds".into(), seeds.join(","));
    let json_path = layout.report(&report.kind, "json");
    write_file(&json_path, &(report.to_json()? + "\n"))?;
    let text = report.to_text();
    write_file(&layout.report(&report.kind, "txt"), &text)?;
    print!("{text}");
    println!("report -> {}", json_path.display());
    Ok(())
}

pub fn evaluate(r: &Resolved) -> Result<(), Failure> {
    banner(r.seeds(), &r.digest);
    let source_path = r.require("source", &r.config.source)?;
    let target_path = r.require("target", &r.config.target)?;
    let cfg = r.config.experiment.clone();
    let _lock = DirLock::acquire(&r.workdir)?;
    let layout = Layout(r);
    // Check every artifact before decoding any image.
    for &seed in r.seeds() {
        layout.require_ensemble(seed)?;
    }
    let (source_name, source_angles) = domain_name(&source_path)?;
    let (_, target_angles) = domain_name(&target_path)?;
    let mut parts = Vec::new();
    for &seed in r.seeds() {
        let ens = layout.load_ensemble(seed)?;
        let student = layout.load_checkpoint(&layout.pretrained(seed), "finetune")?;
        let students = target_angles
            .iter()
            .map(|a| Ok((a.clone(), layout.load_checkpoint(&layout.finetuned(seed, a), "finetune")?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        let (_, stats_path) = layout.pseudo(seed);
        let stats: PseudoStats = serde_json::from_str(
            &fs::read_to_string(&stats_path).or_pipeline(&format!("read {}", stats_path.display()))?,
        )
        .or_pipeline(&format!("parse {}", stats_path.display()))?;
        parts.push((seed, ens, student, students, stats));
    }
    let source = Domain::from_patches(&source_name, &source_angles, Vec::new())?;
    let target = load_domain(&target_path)?;
    let exclude = cfg.exclude();
    let (n, tau) = (cfg.n_days, cfg.tau);
    let mut exp = Experiment::new(&source, &target, cfg)?;
    let mut rows = Vec::new();
    for (seed, ens, student, students, stats) in parts {
        exp.insert_prepared(PreparedRun::from_parts(seed, ens, student, &target)?);
        rows.extend(exp.teacher_rows(seed, exclude)?);
        rows.extend(exp.raw_rows(seed, exclude)?);
        rows.extend(exp.student_rows(
            seed,
            n,
            LabelChoice::Pseudo { tau },
            &students,
            (stats.used, stats.wrong),
            exclude,
        )?);
    }
    let report = Report::new("main", &r.config.experiment, exp.notes(), rows);
    finish_report(r, &layout, report)
}

pub fn sweep(r: &Resolved, kind: &str) -> Result<(), Failure> {
    banner(r.seeds(), &r.digest);
    let source_path = r.require("source", &r.config.source)?;
    let target_path = r.require("target", &r.config.target)?;
    let _lock = DirLock::acquire(&r.workdir)?;
    let layout = Layout(r);
    let mut parts = Vec::new();
    for &seed in r.seeds() {
        let ens = layout.load_ensemble(seed)?;
        let student = layout.load_checkpoint(&layout.pretrained(seed), "finetune")?;
        parts.push((seed, ens, student));
    }
    let (source_name, source_angles) = domain_name(&source_path)?;
    let source = Domain::from_patches(&source_name, &source_angles, Vec::new())?;
    let target = load_domain(&target_path)?;
    let mut exp = Experiment::new(&source, &target, r.config.experiment.clone())?;
    for (seed, ens, student) in parts {
        exp.insert_prepared(PreparedRun::from_parts(seed, ens, student, &target)?);
    }
    let report = match kind {
        "sweep-days" => exp.sweep_days()?,
        _ => exp.sweep_threshold()?,
    };
    finish_report(r, &layout, report)
}

pub fn cost(r: &Resolved, manifest: Option<&Path>, checkpoint: Option<&Path>) -> Result<(), Failure> {
    banner(r.seeds(), &r.digest);
    let scenario = &r.config.cost.bandwidth;
    let manifest = manifest.map(Path::to_path_buf).or_else(|| r.config.target.clone());
    let latency = match manifest.filter(|p| p.is_file()) {
        Some(path) => {
            let m = parse_manifest(&path)?.manifest;
            let record = m
                .records
                .first()
                .ok_or_else(|| Failure::Pipeline(format!("{} has no images", path.display())))?;
            let ck = match checkpoint {
                Some(p) => Checkpoint::load(p).or_pipeline(&format!("checkpoint {}", p.display()))?,
                None => {
                    let (_, arch) = r.config.experiment.archs().map_err(|e| Failure::Config(e.to_string()))?;
                    Checkpoint::initial(&arch, r.seeds()[0])?
                }
            };
            let quads: Vec<_> = record.spots.iter().map(|s| s.quad).collect();
            let rep = latency_probe(
                &Model::new(ck)?,
                &m.image_abs_path(record),
                &quads,
                r.config.cost.repeats,
                r.config.cost.warmup,
            )?;
            Some(rep)
        }
        None => {
            log::warn!("no target manifest; skipping the latency probe");
            None
        }
    };
    let doc = json!({
        "bandwidth": {"scenario": scenario, "gb_per_hour": bandwidth_estimate(scenario)},
        "latency": latency,
    });
    println!("{}", serde_json::to_string_pretty(&doc).or_pipeline("cost report")?);
    println!("{}", bandwidth_summary(scenario));
    Ok(())
}

pub fn gradcheck(r: &Resolved, arch: &str, eps: f64, samples: usize) -> Result<(), Failure> {
    banner(r.seeds(), &r.digest);
    let a = ArchRegistry::builtin()
        .resolve(arch)
        .map_err(|e| Failure::Config(e.to_string()))?;
    let rep = grad_check_sampled(&a, r.seeds()[0], eps, samples)?;
    println!("{}", serde_json::to_string_pretty(&rep).or_pipeline("gradcheck report")?);
    if !(rep.max_rel_error < GRADCHECK_LIMIT) {
        return Err(Failure::Pipeline(format!(
            "gradient check failed: max relative error {:.3e} >= {GRADCHECK_LIMIT:e}",
            rep.max_rel_error
        )));
    }
    Ok(())
}
