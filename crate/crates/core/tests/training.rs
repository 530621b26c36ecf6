mod common;

use common::stream;
use pkdistill_core::data::Label;
use pkdistill_core::nn::{AdamHyper, ArchRegistry, Checkpoint};
use pkdistill_core::student::{finetune, make_finetune_split, FinetuneTags, FreezePolicy, LabeledPatch};
use pkdistill_core::teacher::train_member;

fn pretrained() -> Checkpoint {
    let arch = ArchRegistry::builtin().resolve("compact-student").unwrap();
    let src = stream(11, &["A1"], 4, 8);
    let (train, val) = src.split_at(24);
    train_member(train, val, &arch, &AdamHyper::default(), 2, 5).unwrap()
}

fn tuned(base: &Checkpoint, freeze: FreezePolicy) -> Checkpoint {
    // Labels inverted relative to pretraining so every tensor gets a real gradient.
    let target = stream(12, &["B1"], 8, 6);
    let items: Vec<LabeledPatch> = target
        .iter()
        .map(|p| {
            let flipped = if p.true_label == Label::Occupied { Label::Empty } else { Label::Occupied };
            (p, flipped)
        })
        .collect();
    let split = make_finetune_split(&items, 8).unwrap();
    finetune(base, &split, &AdamHyper::default(), 3, freeze, 9, &FinetuneTags::default()).unwrap()
}

#[test]
fn frozen_tensors_stay_bit_identical() {
    let base = pretrained();
    let ck = tuned(&base, FreezePolicy::LastConvAndDense);
    let trainable = base.arch.last_conv_and_dense_params().unwrap();
    assert_eq!(trainable, vec![4, 5, 6, 7]);
    for (i, (a, b)) in base.params.iter().zip(&ck.params).enumerate() {
        if trainable.contains(&i) {
            assert_ne!(a.data(), b.data(), "tensor {i} should train");
        } else {
            assert_eq!(a.data(), b.data(), "tensor {i} should be frozen");
        }
    }
    assert_eq!(ck.meta.tags["freeze"], "last_conv_and_dense");
}

#[test]
fn all_layers_policy_moves_every_tensor() {
    let base = pretrained();
    let ck = tuned(&base, FreezePolicy::AllLayers);
    for (i, (a, b)) in base.params.iter().zip(&ck.params).enumerate() {
        assert_ne!(a.data(), b.data(), "tensor {i}");
    }
}

#[test]
fn selected_epoch_is_first_best_in_history() {
    for ck in [pretrained(), tuned(&pretrained(), FreezePolicy::AllLayers)] {
        let h = &ck.meta.epoch_val_accuracies;
        let best = h.iter().cloned().fold(f64::MIN, f64::max);
        let first = h.iter().position(|&v| v == best).unwrap() + 1;
        assert_eq!(ck.meta.epoch, first, "history {h:?}");
        assert_eq!(ck.meta.val_accuracy, best);
        assert_eq!(h.len(), ck.meta.epoch_train_losses.len());
    }
}

#[test]
fn training_is_deterministic() {
    let a = pretrained();
    let b = pretrained();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
}
