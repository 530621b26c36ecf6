//! Deployment cost models: centralised upload bandwidth and on-device
//! per-spot latency.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::crop::{load_rgb, rectify_crop};
use crate::data::{Quad, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::model::{Classifier, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthScenario {
    pub n_cameras: u64,
    pub interval_seconds: f64,
    pub avg_image_bytes: u64,
    pub resolution: String,
}

impl BandwidthScenario {
    /// 1,000 cameras uploading a 1280×720 JPEG every 30 s. The image size is
    /// 35e9 / (1000 · 120) bytes, the value that yields 35 GB/h.
    pub fn hd720_fleet() -> Self {
        BandwidthScenario {
            n_cameras: 1000,
            interval_seconds: 30.0,
            avg_image_bytes: 291_667,
            resolution: "1280x720".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cameras == 0 || self.avg_image_bytes == 0 || !(self.interval_seconds > 0.0) {
            return Err(Error::Invalid(format!(
                "bandwidth scenario needs positive cameras, interval and image size: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Decimal gigabytes (1e9 bytes) uploaded per hour.
pub fn bandwidth_estimate(s: &BandwidthScenario) -> f64 {
    s.n_cameras as f64 * (3600.0 / s.interval_seconds) * s.avg_image_bytes as f64 / 1e9
}

pub fn bandwidth_summary(s: &BandwidthScenario) -> String {
    format!(
        "{} cams @ {}s × {:.0}KB ≈ {:.1} GB/h",
        s.n_cameras,
        s.interval_seconds,
        s.avg_image_bytes as f64 / 1000.0,
        bandwidth_estimate(s)
    )
}

/// Seconds over the measured repeats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl Timing {
    /// Nearest-rank percentiles.
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Some(Timing {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: rank(0.5),
            p95: rank(0.95),
        })
    }
}

/// Reference per-spot time reported for a Raspberry Pi 5; informational.
pub const REFERENCE_SECONDS_PER_SPOT: f64 = 0.01;

pub const MIN_REPEATS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub spots: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub load: Timing,
    pub crop: Timing,
    pub classify: Timing,
    pub total: Timing,
    /// `None` without spots.
    pub per_spot: Option<Timing>,
    /// Spots refreshable within a one-second budget at the mean per-spot time.
    pub spots_per_second_budget: Option<f64>,
    pub reference_seconds_per_spot: f64,
}

/// Times load → crop every spot → classify every spot, sequentially, after
/// `warmup` unmeasured iterations.
pub fn latency_probe(
    model: &Model,
    image_path: &Path,
    quads: &[Quad],
    repeats: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if repeats < MIN_REPEATS {
        return Err(Error::Invalid(format!("latency probe needs at least {MIN_REPEATS} repeats, got {repeats}")));
    }
    let input = model.checkpoint().arch.input();
    if input.height != input.width || input.channels != 3 {
        return Err(Error::Shape(format!("model input {input:?} is not a square RGB patch")));
    }
    let size = if input.height == 0 { PATCH_SIZE } else { input.height };
    let mut samples = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for i in 0..warmup + repeats {
        let t0 = Instant::now();
        let img = load_rgb(image_path)?;
        let t1 = Instant::now();
        let patches = quads
            .iter()
            .map(|q| rectify_crop(&img, q, size))
            .collect::<Result<Vec<_>>>()?;
        let t2 = Instant::now();
        if !patches.is_empty() {
            let inputs: Vec<&[f32]> = patches.iter().map(|p| p.data()).collect();
            std::hint::black_box(model.posteriors(&inputs)?);
        }
        let t3 = Instant::now();
        if i >= warmup {
            samples[0].push((t1 - t0).as_secs_f64());
            samples[1].push((t2 - t1).as_secs_f64());
            samples[2].push((t3 - t2).as_secs_f64());
            samples[3].push((t3 - t0).as_secs_f64());
        }
    }
    let timing = |s: &[f64]| Timing::from_samples(s).expect("repeats > 0");
    let per_spot = (!quads.is_empty()).then(|| {
        let per: Vec<f64> = samples[3].iter().map(|t| t / quads.len() as f64).collect();
        timing(&per)
    });
    Ok(LatencyReport {
        spots: quads.len(),
        repeats,
        warmup,
        load: timing(&samples[0]),
        crop: timing(&samples[1]),
        classify: timing(&samples[2]),
        total: timing(&samples[3]),
        per_spot,
        spots_per_second_budget: per_spot.map(|p| 1.0 / p.mean),
        reference_seconds_per_spot: REFERENCE_SECONDS_PER_SPOT,
    })
}
