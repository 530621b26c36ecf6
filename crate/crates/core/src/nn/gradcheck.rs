use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::arch::ArchDescriptor;
use super::network::Network;
use super::ops::softmax_cross_entropy;
use super::tensor::Tensor;
use crate::error::Result;

/// Default number of parameters probed per check.
pub const DEFAULT_SAMPLES: usize = 400;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes dropped because ±eps crossed a ReLU kink or a pooling tie.
    pub skipped: usize,
    /// `(tensor index, element index)` of the worst probe.
    pub worst: Option<(usize, usize)>,
    pub param_count: usize,
}

/// Compares backprop gradients with central differences, in `f64`, on one
/// random patch with a random label.
pub fn grad_check(arch: &ArchDescriptor, seed: u64, eps: f64) -> Result<GradCheckReport> {
    grad_check_sampled(arch, seed, eps, DEFAULT_SAMPLES)
}

pub fn grad_check_sampled(arch: &ArchDescriptor, seed: u64, eps: f64, max_samples: usize) -> Result<GradCheckReport> {
    let net = Network::<f64>::new(arch)?;
    let mut params = net.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    // Small non-zero biases so that bias gradients are exercised away from
    // the all-zero starting point.
    for t in params.iter_mut().skip(1).step_by(2) {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
    }
    let [c, h, w] = arch.input().chw();
    let input = Tensor::from_vec(&[1, c, h, w], (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let label = rng.gen_range(0..2usize);

    let (_, grads) = net.loss_and_grads(&params, &input, &[label])?;
    let base_pattern = net.activation_pattern(&params, &input)?;

    let total: usize = params.iter().map(Tensor::len).sum();
    let mut probes = Vec::new();
    for (ti, t) in params.iter().enumerate() {
        let n = t.len();
        let quota = if total <= max_samples {
            n
        } else {
            ((max_samples * n).div_ceil(total)).max(n.min(8)).min(n)
        };
        for ei in sample(&mut rng, n, quota).into_iter() {
            probes.push((ti, ei));
        }
    }
    probes.sort_unstable();

    let eval = |p: &[Tensor<f64>]| -> Result<(f64, Vec<u32>)> {
        let logits = net.forward(p, &input)?;
        let loss = softmax_cross_entropy(logits.data(), label)?.loss;
        Ok((loss, net.activation_pattern(p, &input)?))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
        param_count: total,
    };
    for (ti, ei) in probes {
        let orig = params[ti].data()[ei];
        params[ti].data_mut()[ei] = orig + eps;
        let (plus, pat_plus) = eval(&params)?;
        params[ti].data_mut()[ei] = orig - eps;
        let (minus, pat_minus) = eval(&params)?;
        params[ti].data_mut()[ei] = orig;
        if pat_plus != base_pattern || pat_minus != base_pattern {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[ti].data()[ei];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((ti, ei));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::{ArchRegistry, InputShape, LayerSpec};

    #[test]
    fn linear_net_is_exact() {
        let arch = ArchDescriptor::new(
            InputShape::new(4, 4, 3),
            vec![LayerSpec::Flatten, LayerSpec::Dense { out_features: 2 }],
        )
        .unwrap();
        let r = grad_check(&arch, 1, 1e-4).unwrap();
        assert_eq!(r.checked, 98);
        assert_eq!(r.skipped, 0);
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn same_seed_same_report() {
        let arch = ArchRegistry::builtin().resolve("compact-student").unwrap();
        let a = grad_check_sampled(&arch, 5, 1e-4, 60).unwrap();
        let b = grad_check_sampled(&arch, 5, 1e-4, 60).unwrap();
        assert_eq!(a, b);
        assert!(a.max_rel_error < 1e-4, "{a:?}");
    }
}
