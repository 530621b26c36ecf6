//! Mini-batch Adam training with best-on-validation selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamHyper, AdamState};
use super::checkpoint::Checkpoint;
use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epoch count used for every training phase.
pub const DEFAULT_EPOCHS: usize = 20;

const EVAL_BATCH: usize = 256;

/// One labelled input: channel-major pixels and a class index
/// (0 = occupied, 1 = empty).
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub pixels: &'a [f32],
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub hyper: AdamHyper,
    pub epochs: usize,
    pub seed: u64,
    /// Per parameter tensor; `None` trains everything.
    pub trainable: Option<Vec<bool>>,
}

impl TrainOptions {
    pub fn new(hyper: AdamHyper, seed: u64) -> Self {
        TrainOptions {
            hyper,
            epochs: DEFAULT_EPOCHS,
            seed,
            trainable: None,
        }
    }
}

/// Class index from a posterior pair; an exact tie resolves to empty.
pub fn argmax_label(p: [f32; 2]) -> usize {
    if p[0] > p[1] {
        0
    } else {
        1
    }
}

fn gather(examples: &[Example<'_>], idx: &[usize], sample_len: usize, chw: [usize; 3]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut data = Vec::with_capacity(idx.len() * sample_len);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let ex = &examples[i];
        if ex.pixels.len() != sample_len {
            return Err(Error::Shape(format!(
                "example {i} has {} values, network expects {sample_len}",
                ex.pixels.len()
            )));
        }
        if ex.label > 1 {
            return Err(Error::Invalid(format!("example {i} has label {}", ex.label)));
        }
        data.extend_from_slice(ex.pixels);
        labels.push(ex.label);
    }
    let t = Tensor::from_vec(&[idx.len(), chw[0], chw[1], chw[2]], data)?;
    Ok((t, labels))
}

/// Posterior rows for a list of flat inputs, evaluated in fixed-size chunks.
pub fn predict(net: &Network<f32>, params: &[Tensor<f32>], inputs: &[&[f32]]) -> Result<Vec<[f32; 2]>> {
    let chw = net.arch().input().chw();
    let sample_len: usize = chw.iter().product();
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * sample_len);
        for (i, x) in chunk.iter().enumerate() {
            if x.len() != sample_len {
                return Err(Error::Shape(format!(
                    "input {i} has {} values, network expects {sample_len}",
                    x.len()
                )));
            }
            data.extend_from_slice(x);
        }
        let batch = Tensor::from_vec(&[chunk.len(), chw[0], chw[1], chw[2]], data)?;
        let post = net.posteriors(params, &batch)?;
        out.extend(post.data().chunks(2).map(|r| [r[0], r[1]]));
    }
    Ok(out)
}

fn accuracy(net: &Network<f32>, params: &[Tensor<f32>], examples: &[Example<'_>]) -> Result<f64> {
    let inputs: Vec<&[f32]> = examples.iter().map(|e| e.pixels).collect();
    let post = predict(net, params, &inputs)?;
    let correct = post
        .iter()
        .zip(examples)
        .filter(|(p, e)| argmax_label(**p) == e.label)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

/// Trains from `start` for `opts.epochs` epochs with a fresh Adam state and
/// returns the parameters of the epoch with the best validation accuracy
/// (earliest epoch on ties).
pub fn fit(start: &Checkpoint, train: &[Example<'_>], val: &[Example<'_>], opts: &TrainOptions) -> Result<Checkpoint> {
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    if opts.epochs == 0 {
        return Err(Error::Hyper("epochs must be at least 1".into()));
    }
    opts.hyper.validate()?;
    let net = Network::<f32>::new(&start.arch)?;
    net.check_params(&start.params)?;
    let chw = start.arch.input().chw();
    let sample_len: usize = chw.iter().product();
    let mask = opts.trainable.as_deref();

    let mut params = start.params.clone();
    let mut adam = AdamState::new(net.param_shapes());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best: Option<(usize, f64, Vec<Tensor<f32>>, AdamState<f32>)> = None;
    let mut val_history = Vec::with_capacity(opts.epochs);
    let mut loss_history = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for idx in order.chunks(opts.hyper.batch_size) {
            let (batch, labels) = gather(train, idx, sample_len, chw)?;
            let (loss, grads) = net.loss_and_grads(&params, &batch, &labels)?;
            loss_sum += f64::from(loss) * idx.len() as f64;
            adam_step(&mut params, &grads, &mut adam, &opts.hyper, mask)?;
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Invalid(format!("non-finite parameters after epoch {epoch}")));
        }
        loss_history.push(loss_sum / train.len() as f64);
        let acc = accuracy(&net, &params, val)?;
        val_history.push(acc);
        if best.as_ref().map_or(true, |(_, b, _, _)| acc > *b) {
            best = Some((epoch, acc, params.clone(), adam.clone()));
        }
        log::debug!("epoch {epoch}: loss {:.5} val {:.4}", loss_history[epoch - 1], acc);
    }
    let (epoch, acc, params, adam) = best.expect("at least one epoch");
    let mut meta = start.meta.clone();
    meta.seed = opts.seed;
    meta.epoch = epoch;
    meta.val_accuracy = acc;
    meta.epoch_val_accuracies = val_history;
    meta.epoch_train_losses = loss_history;
    let mut ck = Checkpoint::new(start.arch.clone(), params, meta)?;
    ck.adam = Some(adam);
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::{ArchDescriptor, InputShape, LayerSpec};
    use rand::Rng;

    /// Two clusters in a 2×2×1 input: class 0 bright, class 1 dark.
    fn toy(seed: u64, n: usize) -> Vec<(Vec<f32>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let centre = if label == 0 { 0.8 } else { 0.2 };
                let px = (0..4).map(|_| centre + rng.gen_range(-0.1..0.1)).collect();
                (px, label)
            })
            .collect()
    }

    fn examples(data: &[(Vec<f32>, usize)]) -> Vec<Example<'_>> {
        data.iter().map(|(p, l)| Example { pixels: p, label: *l }).collect()
    }

    fn tiny_arch() -> ArchDescriptor {
        ArchDescriptor::new(
            InputShape::new(2, 2, 1),
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { out_features: 2 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn separable_toy_converges() {
        let (tr, va) = (toy(1, 512), toy(2, 128));
        let start = Checkpoint::initial(&tiny_arch(), 3).unwrap();
        let mut opts = TrainOptions::new(AdamHyper { learning_rate: 0.01, ..Default::default() }, 4);
        opts.epochs = 20;
        let ck = fit(&start, &examples(&tr), &examples(&va), &opts).unwrap();
        assert!(ck.meta.val_accuracy >= 0.99, "{:?}", ck.meta);
        assert!(*ck.meta.epoch_train_losses.last().unwrap() < 0.05, "{:?}", ck.meta.epoch_train_losses);
        let max = ck.meta.epoch_val_accuracies.iter().cloned().fold(0.0, f64::max);
        assert_eq!(ck.meta.val_accuracy, max);
        assert_eq!(ck.meta.epoch_val_accuracies[ck.meta.epoch - 1], max);
        assert!(ck.meta.epoch_val_accuracies[..ck.meta.epoch - 1].iter().all(|&a| a < max));
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (tr, va) = (toy(5, 200), toy(6, 50));
        let start = Checkpoint::initial(&tiny_arch(), 3).unwrap();
        let mut opts = TrainOptions::new(AdamHyper::default(), 9);
        opts.epochs = 3;
        let a = fit(&start, &examples(&tr), &examples(&va), &opts).unwrap();
        let b = fit(&start, &examples(&tr), &examples(&va), &opts).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn nothing_trainable_means_no_change() {
        let (tr, va) = (toy(5, 100), toy(6, 20));
        let start = Checkpoint::initial(&tiny_arch(), 3).unwrap();
        let mut opts = TrainOptions::new(AdamHyper::default(), 9);
        opts.epochs = 2;
        opts.trainable = Some(vec![false; 4]);
        let ck = fit(&start, &examples(&tr), &examples(&va), &opts).unwrap();
        assert_eq!(ck.params, start.params);
    }

    #[test]
    fn empty_sets_fail() {
        let tr = toy(1, 10);
        let start = Checkpoint::initial(&tiny_arch(), 3).unwrap();
        let opts = TrainOptions::new(AdamHyper::default(), 1);
        assert!(fit(&start, &[], &examples(&tr), &opts).is_err());
        assert!(fit(&start, &examples(&tr), &[], &opts).is_err());
    }

    #[test]
    fn tie_resolves_to_empty() {
        assert_eq!(argmax_label([0.5, 0.5]), 1);
        assert_eq!(argmax_label([0.51, 0.49]), 0);
    }
}
