mod common;

use common::{constant_member, stream, tiny_arch};
use pkdistill_core::data::leave_one_angle_out;
use pkdistill_core::model::{classify_patches, Model};
use pkdistill_core::nn::{AdamHyper, Checkpoint};
use pkdistill_core::teacher::{build_ensemble, ensemble_predict, Ensemble};

fn random_members(k: u64) -> Vec<Checkpoint> {
    (0..k).map(|s| Checkpoint::initial(&tiny_arch(), 100 + s).unwrap()).collect()
}

#[test]
fn identical_members_equal_one_member() {
    let patches = stream(1, &["A1"], 2, 6);
    let m = Checkpoint::initial(&tiny_arch(), 7).unwrap();
    let single = classify_patches(&Model::new(m.clone()).unwrap(), &patches).unwrap();
    let ens = Ensemble::new(vec![m.clone(), m.clone(), m]).unwrap();
    assert_eq!(ensemble_predict(&ens, &patches).unwrap(), single);
}

#[test]
fn opposite_certain_members_average_to_half() {
    let patches = stream(2, &["A1"], 1, 4);
    let ens = Ensemble::new(vec![constant_member([100.0, -100.0]), constant_member([-100.0, 100.0])]).unwrap();
    for p in ensemble_predict(&ens, &patches).unwrap() {
        assert_eq!(p, [0.5, 0.5]);
    }
}

#[test]
fn posterior_is_hand_computed_member_mean() {
    let patches = stream(3, &["A1", "A2"], 2, 5);
    let members = random_members(3);
    let each: Vec<Vec<[f32; 2]>> = members
        .iter()
        .map(|m| classify_patches(&Model::new(m.clone()).unwrap(), &patches).unwrap())
        .collect();
    let got = ensemble_predict(&Ensemble::new(members).unwrap(), &patches).unwrap();
    for (i, g) in got.iter().enumerate() {
        for c in 0..2 {
            let mean = each.iter().map(|e| f64::from(e[i][c])).sum::<f64>() / 3.0;
            assert!((f64::from(g[c]) - mean).abs() < 1e-6, "patch {i} class {c}: {} vs {mean}", g[c]);
        }
        assert!((g[0] + g[1] - 1.0).abs() < 1e-5);
    }
}

#[test]
fn member_order_does_not_matter() {
    let patches = stream(4, &["A1"], 3, 4);
    let members = random_members(4);
    let fwd = ensemble_predict(&Ensemble::new(members.clone()).unwrap(), &patches).unwrap();
    let rev = ensemble_predict(&Ensemble::new(members.into_iter().rev().collect()).unwrap(), &patches).unwrap();
    for (a, b) in fwd.iter().zip(&rev) {
        assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6, "{a:?} vs {b:?}");
    }
}

#[test]
fn mismatched_member_inputs_are_rejected() {
    let other = pkdistill_core::nn::ArchDescriptor::new(
        pkdistill_core::nn::InputShape::new(16, 16, 3),
        vec![
            pkdistill_core::nn::LayerSpec::Flatten,
            pkdistill_core::nn::LayerSpec::Dense { out_features: 2 },
        ],
    )
    .unwrap();
    let a = Checkpoint::initial(&tiny_arch(), 1).unwrap();
    let b = Checkpoint::initial(&other, 1).unwrap();
    assert!(Ensemble::new(vec![a, b]).is_err());
    assert!(Ensemble::new(Vec::new()).is_err());
}

#[test]
fn saved_ensemble_predicts_identically() {
    let patches = stream(5, &["A1"], 2, 4);
    let mut ens = Ensemble::new(random_members(3)).unwrap();
    ens.warnings.push("note".into());
    let dir = tempfile::tempdir().unwrap();
    ens.save(dir.path()).unwrap();
    let back = Ensemble::load(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.warnings, ens.warnings);
    assert_eq!(ensemble_predict(&back, &patches).unwrap(), ensemble_predict(&ens, &patches).unwrap());
}

#[test]
fn leave_one_angle_out_is_disjoint_for_two_angles() {
    let angles = ["A1".to_string(), "A2".to_string()];
    let items = stream(6, &["A1", "A2"], 3, 4);
    for held in &angles {
        let s = leave_one_angle_out(&items, &angles, held).unwrap();
        assert!(s.train.iter().all(|p| &p.angle_id != held));
        assert!(s.val.iter().all(|p| &p.angle_id == held));
        assert_eq!(s.train.len() + s.val.len(), items.len());
    }
}

#[test]
fn nine_angles_give_ten_members() {
    let names: Vec<String> = (1..=9).map(|i| format!("A{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let source = stream(7, &refs, 4, 2);
    let hyper = AdamHyper {
        batch_size: 16,
        ..AdamHyper::default()
    };
    let ens = build_ensemble(&source, &names, &tiny_arch(), &hyper, 1, 3).unwrap();
    assert_eq!(ens.len(), 10);
    assert!(ens.warnings.is_empty());
    let one = build_ensemble(&stream(8, &["A1"], 4, 2), &names[..1], &tiny_arch(), &hyper, 1, 3).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one.warnings.len(), 1);
}
