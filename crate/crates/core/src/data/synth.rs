//! Synthetic parking-lot image streams with exact labels.
//!
//! Each domain is a set of fixed cameras ("angles") looking at two rows of
//! stalls. Empty stalls are textured pavement with lane lines; occupied
//! stalls add a shaded vehicle body with windows. Domains differ in
//! pavement tone, vehicle palette, line colour, noise, occluders and camera
//! geometry, which gives a model trained on one domain a measurable accuracy
//! drop on another.

use std::path::Path;

use chrono::{Duration, NaiveDate};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::crop::Homography;
use super::manifest::{DatasetManifest, ImageRecord, Label, Quad, SpotAnnotation};
use crate::error::{Error, Result};
use crate::seed::derive_seed as mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthStyle {
    /// Mean vehicle hue in degrees.
    pub base_hue: f64,
    /// Spread of vehicle hues around `base_hue`, degrees.
    pub hue_spread: f64,
    /// Mean vehicle saturation in [0, 1].
    pub saturation: f64,
    /// Range of vehicle brightness (HSV value).
    pub vehicle_value: [f64; 2],
    /// Global contrast multiplier around mid-grey.
    pub contrast: f64,
    /// Per-pixel noise amplitude.
    pub noise: f64,
    /// Probability that a stall is partly covered by an occluder.
    pub occlusion_prob: f64,
    /// Amplitude of the day-to-day brightness change.
    pub illumination_drift: f64,
    /// Pavement grey level.
    pub pavement: f64,
    pub line_color: [f64; 3],
    /// Maximum in-plane camera rotation per angle, degrees.
    pub tilt_deg: f64,
    /// Maximum foreshortening of the far row, as a fraction.
    pub perspective: f64,
    /// Probability that an occupied stall holds a motorcycle-sized vehicle.
    pub small_vehicle_prob: f64,
    /// Probability that an empty stall carries a dark stain or shadow.
    pub clutter_prob: f64,
}

impl Default for SynthStyle {
    fn default() -> Self {
        SynthStyle {
            base_hue: 0.0,
            hue_spread: 180.0,
            saturation: 0.6,
            vehicle_value: [0.35, 0.95],
            contrast: 1.0,
            noise: 0.03,
            occlusion_prob: 0.0,
            illumination_drift: 0.1,
            pavement: 0.45,
            line_color: [0.95, 0.95, 0.95],
            tilt_deg: 8.0,
            perspective: 0.15,
            small_vehicle_prob: 0.0,
            clutter_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub domain_name: String,
    pub n_days: usize,
    pub n_angles: usize,
    pub images_per_day: usize,
    pub spots_per_image: usize,
    #[serde(default)]
    pub style: SynthStyle,
    pub occupancy_rate: f64,
    pub seed: u64,
    /// Seconds between consecutive captures of one camera.
    #[serde(default = "default_interval")]
    pub interval_seconds: u32,
}

fn default_interval() -> u32 {
    300
}

const FIRST_CAPTURE: u32 = 7 * 3600;
const STALL_W: f64 = 26.0;
const STALL_H: f64 = 38.0;
const AISLE: f64 = 10.0;
const MARGIN: f64 = 8.0;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_days", self.n_days),
            ("n_angles", self.n_angles),
            ("images_per_day", self.images_per_day),
            ("spots_per_image", self.spots_per_image),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Invalid(format!("synth {name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.occupancy_rate) {
            return Err(Error::Invalid(format!(
                "occupancy_rate must lie in [0, 1], got {}",
                self.occupancy_rate
            )));
        }
        let last = FIRST_CAPTURE as u64 + self.interval_seconds as u64 * (self.images_per_day as u64 - 1);
        if last >= 86_400 {
            return Err(Error::Invalid(format!(
                "{} images every {} s do not fit in one day",
                self.images_per_day, self.interval_seconds
            )));
        }
        Ok(())
    }

    /// Saturated vehicles of every hue on light pavement with white lines,
    /// frequent occluders, sensor noise and strong day-to-day lighting swings.
    /// A few motorcycles and stains keep both kinds of hard case in view.
    pub fn domain_a(seed: u64) -> Self {
        SynthSpec {
            domain_name: "A".into(),
            n_days: 20,
            n_angles: 3,
            images_per_day: 4,
            spots_per_image: 10,
            style: SynthStyle {
                contrast: 0.8,
                noise: 0.07,
                occlusion_prob: 0.3,
                illumination_drift: 0.3,
                small_vehicle_prob: 0.15,
                clutter_prob: 0.25,
                ..SynthStyle::default()
            },
            occupancy_rate: 0.5,
            seed,
            interval_seconds: 300,
        }
    }

    /// Darker pavement, paler vehicles, yellow lines, steeper camera tilt
    /// and perspective, and sparse half-hourly captures over wider frames.
    /// Motorcycles and stains are far more common than in domain A, which is
    /// what a source-trained student gets wrong.
    pub fn domain_b(seed: u64) -> Self {
        SynthSpec {
            domain_name: "B".into(),
            n_days: 20,
            n_angles: 3,
            images_per_day: 4,
            spots_per_image: 20,
            style: SynthStyle {
                base_hue: 210.0,
                hue_spread: 180.0,
                saturation: 0.4,
                contrast: 1.0,
                noise: 0.04,
                occlusion_prob: 0.15,
                illumination_drift: 0.15,
                pavement: 0.36,
                line_color: [0.9, 0.8, 0.2],
                tilt_deg: 18.0,
                perspective: 0.25,
                small_vehicle_prob: 0.35,
                clutter_prob: 0.4,
                ..SynthStyle::default()
            },
            occupancy_rate: 0.5,
            seed,
            interval_seconds: 1800,
        }
    }

    pub fn angle_ids(&self) -> Vec<String> {
        (1..=self.n_angles).map(|i| format!("A{i}")).collect()
    }
}

/// Camera geometry of one angle: image size and stall quads.
#[derive(Debug, Clone)]
struct CameraLayout {
    width: u32,
    height: u32,
    quads: Vec<Quad>,
}

fn layout(spec: &SynthSpec, angle: usize) -> CameraLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, &[1, angle as u64]));
    let rows = if spec.spots_per_image > 1 { 2 } else { 1 };
    let cols = spec.spots_per_image.div_ceil(rows);
    let (w0, h0) = (cols as f64 * STALL_W, rows as f64 * STALL_H + (rows - 1) as f64 * AISLE);
    let tilt = if spec.style.tilt_deg > 0.0 {
        rng.gen_range(-spec.style.tilt_deg..=spec.style.tilt_deg).to_radians()
    } else {
        0.0
    };
    let persp = if spec.style.perspective > 0.0 {
        rng.gen_range(0.0..=spec.style.perspective)
    } else {
        0.0
    };
    let (cx, cy) = (w0 / 2.0, h0 / 2.0);
    let warp = |x: f64, y: f64| -> [f64; 2] {
        // Far (top) edge shrinks towards the centre line, then rotate.
        let shrink = 1.0 - persp * (1.0 - y / h0);
        let xs = cx + (x - cx) * shrink;
        let (dx, dy) = (xs - cx, y - cy);
        [cx + dx * tilt.cos() - dy * tilt.sin(), cy + dx * tilt.sin() + dy * tilt.cos()]
    };
    let mut quads = Vec::with_capacity(spec.spots_per_image);
    for s in 0..spec.spots_per_image {
        let (r, c) = (s / cols, s % cols);
        let x0 = c as f64 * STALL_W;
        let y0 = r as f64 * (STALL_H + AISLE);
        let (x1, y1) = (x0 + STALL_W, y0 + STALL_H);
        quads.push([warp(x0, y0), warp(x1, y0), warp(x1, y1), warp(x0, y1)]);
    }
    let min_x = quads.iter().flatten().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let min_y = quads.iter().flatten().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_x = quads.iter().flatten().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let max_y = quads.iter().flatten().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    for q in &mut quads {
        for p in q.iter_mut() {
            // Whole-pixel shift keeps coordinates tidy in the manifest.
            p[0] = ((p[0] - min_x + MARGIN) * 100.0).round() / 100.0;
            p[1] = ((p[1] - min_y + MARGIN) * 100.0).round() / 100.0;
        }
    }
    CameraLayout {
        width: (max_x - min_x + 2.0 * MARGIN).ceil() as u32,
        height: (max_y - min_y + 2.0 * MARGIN).ceil() as u32,
        quads,
    }
}

fn image_rel_path(angle: &str, day: usize, idx: usize) -> String {
    format!("images/{angle}/d{day:03}_i{idx:03}.png")
}

/// The records `synth_generate` writes, without rendering any pixels.
pub fn plan(spec: &SynthSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let start = NaiveDate::from_ymd_opt(2017, 1, 1).expect("valid date");
    let mut records = Vec::with_capacity(spec.n_angles * spec.n_days * spec.images_per_day);
    for (a, angle) in spec.angle_ids().iter().enumerate() {
        let cam = layout(spec, a);
        for day in 0..spec.n_days {
            for idx in 0..spec.images_per_day {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, &[2, a as u64, day as u64, idx as u64]));
                let spots = cam
                    .quads
                    .iter()
                    .enumerate()
                    .map(|(s, q)| SpotAnnotation {
                        spot_id: format!("s{s:02}"),
                        quad: *q,
                        label: if rng.gen_bool(spec.occupancy_rate) {
                            Label::Occupied
                        } else {
                            Label::Empty
                        },
                    })
                    .collect();
                records.push(ImageRecord {
                    image_path: image_rel_path(angle, day, idx),
                    lot_id: spec.domain_name.clone(),
                    angle_id: angle.clone(),
                    date: start + Duration::days(day as i64),
                    day_index: day,
                    capture_time: FIRST_CAPTURE + idx as u32 * spec.interval_seconds,
                    spots,
                });
            }
        }
    }
    Ok(DatasetManifest::from_records(&spec.domain_name, Path::new(""), records))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Appearance of one vehicle in stall-local coordinates (u across, v along).
struct Vehicle {
    color: [f64; 3],
    u0: f64,
    u1: f64,
    v0: f64,
    v1: f64,
    /// Windscreen at the low-v end when true.
    nose_up: bool,
    /// Motorcycle: no windows.
    small: bool,
}

struct Occluder {
    cu: f64,
    cv: f64,
    ru: f64,
    rv: f64,
    color: [f64; 3],
    alpha: f64,
}

/// Signed distance-like test for a rounded rectangle in normalised units.
fn in_rounded_rect(u: f64, v: f64, u0: f64, u1: f64, v0: f64, v1: f64, r: f64) -> Option<f64> {
    if u < u0 || u > u1 || v < v0 || v > v1 {
        return None;
    }
    let du = (u0 + r - u).max(u - (u1 - r)).max(0.0);
    let dv = (v0 + r * 0.7 - v).max(v - (v1 - r * 0.7)).max(0.0);
    if du * du + (dv / 0.7) * (dv / 0.7) > r * r {
        return None;
    }
    // Distance to the nearest edge, for shading.
    Some((u - u0).min(u1 - u).min((v - v0) * 0.7).min((v1 - v) * 0.7))
}

fn shade_stall(
    base: [f64; 3],
    u: f64,
    v: f64,
    style: &SynthStyle,
    vehicle: Option<&Vehicle>,
    overlays: &[Occluder],
) -> [f64; 3] {
    let mut px = base;
    // Lane lines on both long sides and the far end.
    if u < 0.06 || u > 0.94 || v < 0.04 {
        px = style.line_color;
    }
    if let Some(car) = vehicle {
        // Soft shadow under the body.
        if in_rounded_rect(u, v, car.u0 - 0.03, car.u1 + 0.05, car.v0 - 0.02, car.v1 + 0.04, 0.18).is_some() {
            px = px.map(|c| c * 0.7);
        }
        if let Some(edge) = in_rounded_rect(u, v, car.u0, car.u1, car.v0, car.v1, 0.16) {
            let len = car.v1 - car.v0;
            let t = (v - car.v0) / len;
            let t = if car.nose_up { t } else { 1.0 - t };
            let glass = [0.12, 0.14, 0.18];
            let inner = !car.small && u > car.u0 + 0.08 && u < car.u1 - 0.08;
            px = if inner && (0.2..0.34).contains(&t) {
                glass
            } else if inner && (0.74..0.84).contains(&t) {
                glass.map(|c| c * 1.3)
            } else {
                let rim = (edge / 0.12).min(1.0);
                let roof = if (0.34..0.74).contains(&t) && inner { 1.12 } else { 1.0 };
                car.color.map(|c| (c * (0.6 + 0.4 * rim) * roof).min(1.0))
            };
        }
    }
    for o in overlays {
        let d = ((u - o.cu) / o.ru).powi(2) + ((v - o.cv) / o.rv).powi(2);
        if d < 1.0 {
            for ch in 0..3 {
                px[ch] = px[ch] * (1.0 - o.alpha) + o.color[ch] * o.alpha;
            }
        }
    }
    px
}

/// Renders one image of the stream.
pub fn render(spec: &SynthSpec, record: &ImageRecord) -> Result<RgbImage> {
    let a = spec
        .angle_ids()
        .iter()
        .position(|x| *x == record.angle_id)
        .ok_or_else(|| Error::Invalid(format!("angle {} not in spec", record.angle_id)))?;
    let cam = layout(spec, a);
    let style = &spec.style;
    let idx = ((record.capture_time - FIRST_CAPTURE) / spec.interval_seconds.max(1)) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, &[3, a as u64, record.day_index as u64, idx]));

    let day_rng_seed = mix(spec.seed, &[4, record.day_index as u64]);
    let day_phase = (day_rng_seed % 10_000) as f64 / 10_000.0;
    let hours_from_noon = (f64::from(record.capture_time) / 3600.0 - 12.0).abs();
    let illum = (1.0 + style.illumination_drift * (2.0 * day_phase - 1.0))
        * (1.0 - 0.012 * hours_from_noon);

    let (w, h) = (cam.width as usize, cam.height as usize);
    let (f1, f2) = (rng.gen_range(0.05..0.15), rng.gen_range(0.05..0.15));
    let (p1, p2) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
    let mut canvas: Vec<[f64; 3]> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let g = style.pavement + 0.03 * (x * f1 + p1).sin() * (y * f2 + p2).sin();
            [g, g, g * 1.02]
        })
        .collect();

    for (quad, spot) in cam.quads.iter().zip(&record.spots) {
        let vehicle = (spot.label == Label::Occupied).then(|| {
            let hue = style.base_hue + rng.gen_range(-1.0..=1.0) * style.hue_spread;
            let sat = (style.saturation + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0);
            let [lo, hi] = style.vehicle_value;
            let val = lo + (hi - lo) * rng.gen::<f64>();
            let (du, dv) = (rng.gen_range(-0.04..0.04), rng.gen_range(-0.05..0.05));
            let small = rng.gen_bool(style.small_vehicle_prob);
            let (hw, hl) = if small { (0.14, 0.22) } else { (0.35, 0.4) };
            Vehicle {
                color: hsv_to_rgb(hue, sat, val),
                u0: 0.5 - hw + du,
                u1: 0.5 + hw + du,
                v0: 0.5 - hl + dv,
                v1: 0.5 + hl + dv,
                nose_up: rng.gen_bool(0.5),
                small,
            }
        });
        let mut overlays = Vec::new();
        if vehicle.is_none() && rng.gen_bool(style.clutter_prob) {
            let g = style.pavement * rng.gen_range(0.3..0.6);
            overlays.push(Occluder {
                cu: rng.gen_range(0.3..0.7),
                cv: rng.gen_range(0.3..0.7),
                ru: rng.gen_range(0.15..0.35),
                rv: rng.gen_range(0.15..0.4),
                color: [g, g, g],
                alpha: rng.gen_range(0.5..0.9),
            });
        }
        if rng.gen_bool(style.occlusion_prob) {
            overlays.push(Occluder {
                cu: rng.gen_range(0.0..1.0),
                cv: rng.gen_range(0.0..1.0),
                ru: rng.gen_range(0.2..0.45),
                rv: rng.gen_range(0.15..0.35),
                color: [0.1, rng.gen_range(0.15..0.3), 0.1],
                alpha: rng.gen_range(0.4..0.8),
            });
        }
        let hmg = Homography::square_to_quad(quad)?;
        let inv = hmg
            .inverse()
            .ok_or_else(|| Error::DegenerateQuad(format!("{quad:?}")))?;
        let xs = quad.iter().map(|p| p[0]);
        let ys = quad.iter().map(|p| p[1]);
        let x_lo = xs.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let x_hi = (xs.fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(w);
        let y_lo = ys.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let y_hi = (ys.fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (u, v) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
                if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                    continue;
                }
                let i = y * w + x;
                canvas[i] = shade_stall(canvas[i], u, v, style, vehicle.as_ref(), &overlays);
            }
        }
    }

    let mut img = RgbImage::new(cam.width, cam.height);
    for (i, px) in canvas.iter().enumerate() {
        let n = style.noise * (rng.gen::<f64>() + rng.gen::<f64>() - 1.0) * 1.7;
        let out = px.map(|c| {
            let lit = c * illum + n;
            let v = 0.5 + (lit - 0.5) * style.contrast;
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        });
        img.put_pixel((i % w) as u32, (i / w) as u32, Rgb(out));
    }
    Ok(img)
}

/// Renders every image of the stream under `out_dir` and writes
/// `out_dir/manifest.jsonl`. Output is a pure function of `spec`.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let planned = plan(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for angle in &planned.angles {
        let dir = out_dir.join("images").join(angle);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for r in &planned.records {
        let img = render(spec, r)?;
        let path = out_dir.join(&r.image_path);
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        ..planned
    };
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
