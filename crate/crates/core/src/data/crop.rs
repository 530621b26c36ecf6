//! Perspective rectification of annotated spots into fixed-size patches.

use std::path::Path;

use image::RgbImage;

use super::manifest::{DatasetManifest, Label, Quad};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Side of the square patch fed to the student.
pub const PATCH_SIZE: usize = 32;

/// Signed shoelace area, positive for clockwise corners in image
/// coordinates (y pointing down).
pub fn signed_area(q: &Quad) -> f64 {
    let mut s = 0.0;
    for i in 0..4 {
        let [x0, y0] = q[i];
        let [x1, y1] = q[(i + 1) % 4];
        s += x0 * y1 - x1 * y0;
    }
    s / 2.0
}

pub fn quad_area(q: &Quad) -> f64 {
    signed_area(q).abs()
}

/// Projective map from the unit square onto a quad: (0,0), (1,0), (1,1),
/// (0,1) go to the four corners in order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [f64; 9],
}

impl Homography {
    pub fn square_to_quad(q: &Quad) -> Result<Self> {
        if quad_area(q) < 1e-9 {
            return Err(Error::DegenerateQuad(format!("{q:?} has zero area")));
        }
        // Convexity keeps the denominator positive over the whole square.
        let mut sign = 0.0f64;
        for i in 0..4 {
            let [ax, ay] = q[i];
            let [bx, by] = q[(i + 1) % 4];
            let [cx, cy] = q[(i + 2) % 4];
            let cross = (bx - ax) * (cy - by) - (by - ay) * (cx - bx);
            if cross.abs() < 1e-12 || (sign != 0.0 && cross.signum() != sign) {
                return Err(Error::DegenerateQuad(format!("{q:?} is not strictly convex")));
            }
            sign = cross.signum();
        }
        let [[x0, y0], [x1, y1], [x2, y2], [x3, y3]] = *q;
        let (dx1, dx2, dx3) = (x1 - x2, x3 - x2, x0 - x1 + x2 - x3);
        let (dy1, dy2, dy3) = (y1 - y2, y3 - y2, y0 - y1 + y2 - y3);
        let (g, h) = if dx3.abs() < 1e-12 && dy3.abs() < 1e-12 {
            (0.0, 0.0)
        } else {
            let det = dx1 * dy2 - dx2 * dy1;
            ((dx3 * dy2 - dx2 * dy3) / det, (dx1 * dy3 - dx3 * dy1) / det)
        };
        Ok(Homography {
            m: [
                x1 - x0 + g * x1,
                x3 - x0 + h * x3,
                x0,
                y1 - y0 + g * y1,
                y3 - y0 + h * y3,
                y0,
                g,
                h,
                1.0,
            ],
        })
    }

    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let m = &self.m;
        let w = m[6] * u + m[7] * v + m[8];
        ((m[0] * u + m[1] * v + m[2]) / w, (m[3] * u + m[4] * v + m[5]) / w)
    }

    pub fn inverse(&self) -> Option<Homography> {
        let m = &self.m;
        let a = m[4] * m[8] - m[5] * m[7];
        let b = m[5] * m[6] - m[3] * m[8];
        let c = m[3] * m[7] - m[4] * m[6];
        let det = m[0] * a + m[1] * b + m[2] * c;
        if det.abs() < 1e-15 {
            return None;
        }
        let inv = [
            a,
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            b,
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            c,
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        Some(Homography {
            m: inv.map(|v| v / det),
        })
    }
}

/// Bilinear sample at continuous index coordinates, clamped to the border.
fn bilinear(img: &RgbImage, x: f64, y: f64) -> [f32; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let xf = x.floor();
    let yf = y.floor();
    let (tx, ty) = ((x - xf) as f32, (y - yf) as f32);
    let cx = |v: i64| v.clamp(0, w - 1) as u32;
    let cy = |v: i64| v.clamp(0, h - 1) as u32;
    let (x0, y0) = (xf as i64, yf as i64);
    let p = |xx: i64, yy: i64| img.get_pixel(cx(xx), cy(yy)).0;
    let (a, b, c, d) = (p(x0, y0), p(x0 + 1, y0), p(x0, y0 + 1), p(x0 + 1, y0 + 1));
    let mut out = [0.0f32; 3];
    for ch in 0..3 {
        let top = f32::from(a[ch]) * (1.0 - tx) + f32::from(b[ch]) * tx;
        let bot = f32::from(c[ch]) * (1.0 - tx) + f32::from(d[ch]) * tx;
        out[ch] = ((top * (1.0 - ty) + bot * ty) / 255.0).clamp(0.0, 1.0);
    }
    out
}

/// Maps the quad onto an `out_size`×`out_size` patch (corner 0 → top-left,
/// then clockwise) with bilinear sampling. Returns `3×out_size×out_size`
/// channel-major values in [0, 1].
pub fn rectify_crop(img: &RgbImage, quad: &Quad, out_size: usize) -> Result<Tensor<f32>> {
    if out_size == 0 {
        return Err(Error::Invalid("patch size must be positive".into()));
    }
    let hmg = Homography::square_to_quad(quad)?;
    let plane = out_size * out_size;
    let mut data = vec![0.0f32; 3 * plane];
    let s = out_size as f64;
    for row in 0..out_size {
        for col in 0..out_size {
            // Pixel centres on both sides: output (col + ½, row + ½) maps to
            // a continuous image point whose index-space position is −½.
            let (x, y) = hmg.apply((col as f64 + 0.5) / s, (row as f64 + 0.5) / s);
            let px = bilinear(img, x - 0.5, y - 0.5);
            for ch in 0..3 {
                data[ch * plane + row * out_size + col] = px[ch];
            }
        }
    }
    Tensor::from_vec(&[3, out_size, out_size], data)
}

/// A rectified spot plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Tensor<f32>,
    pub image_path: String,
    pub spot_id: String,
    pub lot_id: String,
    pub angle_id: String,
    pub day_index: usize,
    pub true_label: Label,
}

impl Patch {
    pub fn key(&self) -> (&str, &str) {
        (&self.image_path, &self.spot_id)
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Crops every annotated spot of every record, in manifest order.
pub fn extract_patches(manifest: &DatasetManifest, out_size: usize) -> Result<Vec<Patch>> {
    let mut out = Vec::with_capacity(manifest.spot_count());
    for r in &manifest.records {
        let img = load_rgb(&manifest.image_abs_path(r))?;
        for s in &r.spots {
            let pixels = rectify_crop(&img, &s.quad, out_size)
                .map_err(|e| Error::Invalid(format!("{} spot {}: {e}", r.image_path, s.spot_id)))?;
            out.push(Patch {
                pixels,
                image_path: r.image_path.clone(),
                spot_id: s.spot_id.clone(),
                lot_id: r.lot_id.clone(),
                angle_id: r.angle_id.clone(),
                day_index: r.day_index,
                true_label: s.label,
            });
        }
    }
    Ok(out)
}
