#![allow(dead_code)]

use pkdistill_core::data::{Label, Patch, PATCH_SIZE};
use pkdistill_core::nn::{ArchDescriptor, Checkpoint, InputShape, LayerSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Patch whose pixels are bright for occupied and dark for empty, plus noise.
pub fn patch(rng: &mut ChaCha8Rng, angle: &str, day: usize, spot: usize, label: Label) -> Patch {
    let centre = if label == Label::Occupied { 0.7 } else { 0.3 };
    let data = (0..3 * PATCH_SIZE * PATCH_SIZE)
        .map(|_| centre + rng.gen_range(-0.2f32..0.2))
        .collect();
    Patch {
        pixels: Tensor::from_vec(&[3, PATCH_SIZE, PATCH_SIZE], data).unwrap(),
        image_path: format!("{angle}/d{day:03}.png"),
        spot_id: format!("s{spot}"),
        lot_id: "L".into(),
        angle_id: angle.into(),
        day_index: day,
        true_label: label,
    }
}

/// `days` days per angle, `per_day` alternating-label patches per day.
pub fn stream(seed: u64, angles: &[&str], days: usize, per_day: usize) -> Vec<Patch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for a in angles {
        for d in 0..days {
            for s in 0..per_day {
                let label = if s % 2 == 0 { Label::Occupied } else { Label::Empty };
                out.push(patch(&mut rng, a, d, s, label));
            }
        }
    }
    out
}

/// One strided conv and a dense head: cheap enough to train many times.
pub fn tiny_arch() -> ArchDescriptor {
    ArchDescriptor::new(
        InputShape::new(PATCH_SIZE, PATCH_SIZE, 3),
        vec![
            LayerSpec::Conv2d {
                out_channels: 2,
                kernel: 3,
                stride: 4,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 2 },
        ],
    )
    .unwrap()
}

/// Dense-only classifier whose posterior is softmax(bias) for every input.
pub fn constant_member(bias: [f32; 2]) -> Checkpoint {
    let arch = ArchDescriptor::new(
        InputShape::new(PATCH_SIZE, PATCH_SIZE, 3),
        vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }],
    )
    .unwrap();
    let mut ck = Checkpoint::initial(&arch, 0).unwrap();
    ck.params[0].data_mut().fill(0.0);
    ck.params[1].data_mut().copy_from_slice(&bias);
    ck
}
