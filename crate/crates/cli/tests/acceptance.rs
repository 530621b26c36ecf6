//! Desk-scale acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Criteria 4 to 7 share one set of trained
//! teachers and students per (direction, seed).

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use pkdistill_core::cost::{bandwidth_estimate, BandwidthScenario};
use pkdistill_core::data::{
    leave_one_angle_out, partition_chronological, synth_generate, DayStream, SynthSpec,
};
use pkdistill_core::eval::{spearman, Domain, Experiment, ExperimentConfig, LabelChoice, Report};
use pkdistill_core::nn::gradcheck::grad_check;
use pkdistill_core::nn::{ArchDescriptor, ArchRegistry, Checkpoint, InputShape, LayerSpec};
use pkdistill_core::student::split_days;
use pkdistill_core::teacher::filter_pseudo_labels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad())
    }
}

fn c1_gradients() -> Outcome {
    let input = InputShape::new(8, 8, 3);
    let conv = LayerSpec::Conv2d {
        out_channels: 4,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let strided = LayerSpec::Conv2d {
        out_channels: 3,
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    let head = [LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }];
    let per_layer = [
        ("conv", vec![conv]),
        ("strided conv", vec![strided]),
        ("relu", vec![conv, LayerSpec::Relu]),
        ("maxpool", vec![conv, LayerSpec::MaxPool2x2]),
        (
            "dense",
            vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 6 }, LayerSpec::Relu],
        ),
    ];
    let mut worst = 0.0f64;
    let mut names = Vec::new();
    for (name, mut layers) in per_layer {
        layers.extend(head);
        let arch = ArchDescriptor::new(input, layers).map_err(|e| e.to_string())?;
        let r = grad_check(&arch, 7, 1e-4).map_err(|e| e.to_string())?;
        if !(r.max_rel_error < 1e-4) {
            return Err(format!("{name}: max relative error {:.3e}", r.max_rel_error));
        }
        worst = worst.max(r.max_rel_error);
        names.push(name);
    }
    let student = ArchRegistry::builtin().resolve("student").map_err(|e| e.to_string())?;
    let r = grad_check(&student, 7, 1e-4).map_err(|e| e.to_string())?;
    check(
        r.max_rel_error < 1e-4,
        format!(
            "max rel error {:.2e} on {}; full student {:.2e} over {} probes ({} kink skips)",
            worst,
            names.join(", "),
            r.max_rel_error,
            r.checked,
            r.skipped
        ),
        || format!("student: max relative error {:.3e}", r.max_rel_error),
    )
}

fn c2_architecture() -> Outcome {
    let student = ArchRegistry::builtin().resolve("student").map_err(|e| e.to_string())?;
    let count = student.param_count();
    if count != 143_938 {
        return Err(format!("student has {count} parameters"));
    }
    let ck = Checkpoint::initial(&student, 3).map_err(|e| e.to_string())?;
    let back = Checkpoint::from_bytes(&ck.to_bytes().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let exact = back.params.iter().zip(&ck.params).all(|(a, b)| {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    check(
        exact && back.arch == ck.arch,
        format!("student has {count} parameters; checkpoint round-trip is bit-exact"),
        || "checkpoint round-trip changed values".into(),
    )
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Item {
    lot: String,
    angle: String,
    day: usize,
    id: usize,
}

impl DayStream for Item {
    fn lot_id(&self) -> &str {
        &self.lot
    }
    fn angle_id(&self) -> &str {
        &self.angle
    }
    fn day_index(&self) -> usize {
        self.day
    }
}

fn c3_splits() -> Outcome {
    for n in 2..=100 {
        let (train, val) = split_days(n).map_err(|e| e.to_string())?;
        let l = n.div_ceil(4);
        if val != (n - l..n) || train != (0..n - l) || train.is_empty() {
            return Err(format!("n = {n}: train {train:?} val {val:?}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for m in 0..200 {
        let lots = rng.gen_range(1..=2);
        let n_angles = rng.gen_range(2..=4);
        let angles: Vec<String> = (0..n_angles).map(|a| format!("A{a}")).collect();
        let mut items = Vec::new();
        for lot in 0..lots {
            for a in &angles {
                // Sparse day indices exercise streams with gaps.
                let days: BTreeSet<usize> = (0..rng.gen_range(1..12)).map(|_| rng.gen_range(0..30)).collect();
                for &d in &days {
                    for _ in 0..rng.gen_range(1..4) {
                        let id = items.len();
                        items.push(Item {
                            lot: format!("L{lot}"),
                            angle: a.clone(),
                            day: d,
                            id,
                        });
                    }
                }
            }
        }
        let all: BTreeSet<&Item> = items.iter().collect();
        let s = partition_chronological(&items, 0.7).map_err(|e| e.to_string())?;
        let (tr, va): (BTreeSet<&Item>, BTreeSet<&Item>) = (s.train.iter().collect(), s.val.iter().collect());
        if !tr.is_disjoint(&va) || tr.union(&va).count() != all.len() || s.train.len() + s.val.len() != items.len() {
            return Err(format!("manifest {m}: chronological split is not a disjoint union"));
        }
        for t in &s.train {
            if s.val.iter().any(|v| v.lot == t.lot && v.angle == t.angle && v.day <= t.day) {
                return Err(format!("manifest {m}: validation day precedes a training day"));
            }
        }
        for a in &angles {
            let s = leave_one_angle_out(&items, &angles, a).map_err(|e| e.to_string())?;
            let ok = s.val.iter().all(|v| &v.angle == a)
                && s.train.iter().all(|t| &t.angle != a)
                && s.train.len() + s.val.len() == items.len();
            if !ok {
                return Err(format!("manifest {m}: leave-one-angle-out for {a} is wrong"));
            }
        }
    }
    Ok("split_days exact for n in 2..=100; chronological and leave-one-angle-out laws hold on 200 random manifests".into())
}

fn c4_threshold(exp: &mut Experiment<'_>, target: &Domain, seed: u64) -> Outcome {
    let run = exp.prepared(seed).map_err(|e| e.to_string())?;
    let n = target.min_days();
    let mut prev: Option<(BTreeSet<(String, String)>, usize, usize)> = None;
    let mut table = Vec::new();
    for tau in [0.5, 0.6, 0.7, 0.8, 0.9] {
        let mut keys = BTreeSet::new();
        let (mut used, mut wrong) = (0, 0);
        for a in 0..target.angles.len() {
            let w = target.window(a, n);
            let s = filter_pseudo_labels(&target.patches[w.clone()], &run.teacher_post[w], tau)
                .map_err(|e| e.to_string())?;
            used += s.stats.used;
            wrong += s.stats.wrong.ok_or("synthetic target lacks ground truth")?;
            keys.extend(s.labels.into_iter().map(|l| (l.image_path, l.spot_id)));
        }
        if let Some((pk, pu, pw)) = &prev {
            if !keys.is_subset(pk) || used > *pu || wrong > *pw {
                return Err(format!("tau {tau}: used {used} (prev {pu}), wrong {wrong} (prev {pw}), subset {}", keys.is_subset(pk)));
            }
        }
        table.push(format!("{tau}:{used}/{wrong}"));
        prev = Some((keys, used, wrong));
    }
    Ok(format!("used/wrong over tau on {n} target days: {}", table.join(" ")))
}

fn mean_row(report: &Report, condition: &str) -> Result<f64, String> {
    let rows: Vec<_> = report.rows.iter().filter(|r| r.condition == condition).collect();
    match rows.as_slice() {
        [r] => Ok(100.0 * r.acc_mean),
        _ => Err(format!("{} rows for {condition}", rows.len())),
    }
}

fn c5_direction(reports: &[Report]) -> Outcome {
    let mut gains = Vec::new();
    for r in reports {
        let raw = mean_row(r, "student_raw")?;
        let ft = mean_row(r, "student_ft")?;
        gains.push((r.rows[0].direction.clone(), raw, ft, ft - raw));
    }
    let text: Vec<String> = gains
        .iter()
        .map(|(d, raw, ft, g)| format!("{d}: {raw:.2} -> {ft:.2} ({g:+.2})"))
        .collect();
    let best = gains.iter().map(|g| g.3).fold(f64::MIN, f64::max);
    let worst = gains.iter().map(|g| g.3).fold(f64::MAX, f64::min);
    check(best >= 2.0 && worst >= -1.0, text.join("; "), || text.join("; "))
}

fn c6_oracle(exps: &mut [Experiment<'_>], reports: &[Report]) -> Outcome {
    let mut text = Vec::new();
    let mut ok = true;
    for (exp, main) in exps.iter_mut().zip(reports) {
        let cfg = main.config.clone();
        let mut rows = Vec::new();
        for &seed in &cfg.seeds {
            rows.extend(
                exp.finetuned_rows(seed, cfg.n_days, LabelChoice::True, cfg.exclude())
                    .map_err(|e| e.to_string())?,
            );
        }
        let oracle = Report::new("oracle", &cfg, Vec::new(), rows);
        let o = mean_row(&oracle, "oracle")?;
        let p = mean_row(main, "student_ft")?;
        ok &= o >= p && o - p <= 3.0;
        text.push(format!("{}: true {o:.2} vs pseudo {p:.2} (gap {:.2})", exp.direction(), o - p));
    }
    check(ok, text.join("; "), || text.join("; "))
}

fn c7_days(exps: &mut [Experiment<'_>]) -> Outcome {
    let mut reports = Vec::new();
    for exp in exps.iter_mut() {
        reports.push(exp.sweep_days().map_err(|e| e.to_string())?);
    }
    let combined = Report::combine("sweep-days", &reports).map_err(|e| e.to_string())?;
    let rows: Vec<_> = combined.rows.iter().filter(|r| r.direction == "weighted").collect();
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let acc: Vec<f64> = rows.iter().map(|r| 100.0 * r.acc_mean).collect();
    let rho = spearman(&ns, &acc).unwrap_or(0.0);
    let curve: Vec<String> = rows.iter().map(|r| format!("{}:{:.2}", r.n, 100.0 * r.acc_mean)).collect();
    let text = format!("Spearman {rho:.3} over weighted n-curve {}", curve.join(" "));
    check(rho >= 0.0, text.clone(), || text)
}

fn c8_bandwidth() -> Outcome {
    let base = BandwidthScenario::hd720_fleet();
    let gb = bandwidth_estimate(&base);
    if (gb - 35.0).abs() / 35.0 > 1e-3 {
        return Err(format!("{gb} GB/h"));
    }
    for k in [2u64, 10] {
        let b = bandwidth_estimate(&base);
        let cams = bandwidth_estimate(&BandwidthScenario { n_cameras: base.n_cameras * k, ..base.clone() });
        let bytes = bandwidth_estimate(&BandwidthScenario {
            avg_image_bytes: base.avg_image_bytes * k,
            ..base.clone()
        });
        let slow = bandwidth_estimate(&BandwidthScenario {
            interval_seconds: base.interval_seconds * k as f64,
            ..base.clone()
        });
        if cams != b * k as f64 || bytes != b * k as f64 || slow * k as f64 != b {
            return Err(format!("not linear at factor {k}"));
        }
    }
    Ok(format!("{gb:.4} GB/h; exactly linear at factors 2 and 10"))
}

fn cli(root: &Path, args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_pkdistill"))
        .args(args)
        .current_dir(root)
        .env_remove("PKDISTILL_WORKDIR")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn recipe(root: &Path) -> Result<(Vec<u8>, String), String> {
    let small = |s: SynthSpec| SynthSpec {
        n_days: 10,
        n_angles: 2,
        images_per_day: 2,
        ..s
    };
    let config = serde_json::json!({
        "source": "data/A/manifest.jsonl",
        "target": "data/B/manifest.jsonl",
        "workdir": "work",
        "seed": 7,
        "experiment": {
            "teacher_arch": "compact-teacher",
            "student_arch": "compact-student",
            "epochs": 6
        },
        "synth": {
            "source": small(SynthSpec::domain_a(101)),
            "target": small(SynthSpec::domain_b(202))
        }
    });
    std::fs::write(root.join("run.json"), config.to_string()).map_err(|e| e.to_string())?;
    let mut digest = String::new();
    for cmd in ["synth", "train-teacher", "pseudo-label", "finetune", "evaluate"] {
        let out = cli(root, &[cmd, "--config", "run.json"])?;
        digest = out.lines().next().unwrap_or_default().to_string();
    }
    let d = digest.rsplit('=').next().unwrap_or_default();
    let report = root.join("work/runs").join(d).join("reports/main.json");
    let bytes = std::fs::read(&report).map_err(|e| format!("{}: {e}", report.display()))?;
    Ok((bytes, digest))
}

fn c9_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ra, da) = recipe(a.path())?;
    let (rb, db) = recipe(b.path())?;
    check(
        ra == rb && da == db,
        format!("two full CLI runs ({da}) wrote identical {}-byte reports", ra.len()),
        || format!("reports differ ({da} vs {db}, {} vs {} bytes)", ra.len(), rb.len()),
    )
}

fn main() {
    let mut passed = Vec::new();
    let mut run = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match &outcome {
            Ok(msg) => println!("PASS criterion {id} ({name}, {secs:.0}s): {msg}"),
            Err(msg) => println!("FAIL criterion {id} ({name}, {secs:.0}s): {msg}"),
        }
        passed.push(outcome.is_ok());
    };

    run(1, "gradient fidelity", &mut c1_gradients);
    run(2, "architecture arithmetic", &mut c2_architecture);
    run(3, "split laws", &mut c3_splits);
    run(8, "bandwidth model", &mut c8_bandwidth);

    let data = tempfile::tempdir().expect("temp dir");
    let a = synth_generate(&SynthSpec::domain_a(101), &data.path().join("A")).expect("domain A");
    let b = synth_generate(&SynthSpec::domain_b(202), &data.path().join("B")).expect("domain B");
    let a = Domain::from_manifest(&a).expect("patches A");
    let b = Domain::from_manifest(&b).expect("patches B");
    let cfg = ExperimentConfig {
        teacher_arch: "compact-teacher".into(),
        student_arch: "compact-student".into(),
        ..ExperimentConfig::default()
    };
    let mut exps = vec![
        Experiment::new(&a, &b, cfg.clone()).expect("A→B"),
        Experiment::new(&b, &a, cfg.clone()).expect("B→A"),
    ];

    let mut mains = Vec::new();
    run(5, "distillation direction", &mut || {
        for exp in exps.iter_mut() {
            mains.push(exp.main_report().map_err(|e| e.to_string())?);
        }
        c5_direction(&mains)
    });
    run(4, "threshold monotonicity", &mut || c4_threshold(&mut exps[0], &b, cfg.seeds[0]));
    run(6, "oracle ceiling", &mut || c6_oracle(&mut exps, &mains));
    run(7, "day-sweep trend", &mut || c7_days(&mut exps));
    run(9, "end-to-end determinism", &mut c9_determinism);

    let failed = passed.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", passed.len() - failed, passed.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
