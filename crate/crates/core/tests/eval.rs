mod common;

use std::collections::BTreeSet;

use common::*;
use uattr::attribution::{ScoreRow, ScoreTable};
use uattr::container::Checkpoint;
use uattr::data::{generate, Dataset};
use uattr::diffusion::DiffusionConfig;
use uattr::error::Error;
use uattr::eval::{group_queries, sample_queries, Counterfactual, Encoder, Query, QueryOrigin};
use uattr::train::{train, TrainConfig};

struct Setup {
    ds: Dataset,
    dcfg: DiffusionConfig,
    tcfg: TrainConfig,
    base: Checkpoint,
    encoder: Encoder,
}

fn setup(n: usize, epochs: usize) -> Setup {
    let ds = generate(&small_spec(n)).unwrap();
    let dcfg = DiffusionConfig::default();
    let tcfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let base = train(&ds, &tcfg, &dcfg).unwrap().checkpoint;
    let encoder = Encoder::init(dcfg.image_shape, dcfg.num_classes, 0);
    Setup {
        ds,
        dcfg,
        tcfg,
        base,
        encoder,
    }
}

impl Setup {
    fn cf(&self) -> Counterfactual<'_> {
        Counterfactual::new(&self.ds, &self.base, &self.tcfg, &self.dcfg, &self.encoder).unwrap()
    }

    fn queries(&self, count: usize) -> Vec<Query> {
        sample_queries(&self.base.params, count, 5, &self.dcfg).unwrap()
    }
}

#[test]
fn removing_nothing_changes_nothing() {
    let s = setup(120, 3);
    let cf = s.cf();
    let st = cf.random_table(0, 1).unwrap();
    for r in cf.eval_leave_k(&st, 0, &s.queries(3)).unwrap() {
        assert_eq!(r.delta_loss, 0.0);
        assert_eq!(r.delta_gen_mse, 0.0);
        assert!(r.delta_gen_feat.abs() < 1e-12);
        assert_eq!(r.retrained_checkpoint, r.base_checkpoint);
    }
}

#[test]
fn one_model_reference_equals_direct_leave_k() {
    let s = setup(120, 3);
    let cf = s.cf();
    let qs = s.queries(2);
    let (curve, reports) = cf.random_reference(&[0, 5], 1, &qs, 9).unwrap();
    let direct = cf.eval_leave_k(&cf.random_table(0, 9).unwrap(), 5, &qs).unwrap();
    let at5: Vec<_> = reports.iter().filter(|r| r.k == 5).cloned().collect();
    assert_eq!(at5, direct);
    let p = curve.point(5).unwrap();
    let mean = direct.iter().map(|r| r.delta_loss).sum::<f64>() / direct.len() as f64;
    assert!((p.mean_delta_loss - mean).abs() < 1e-15);
    assert_eq!(curve.point(0).unwrap().mean_delta_loss, 0.0);
}

#[test]
fn cached_retrains_are_reused() {
    let s = setup(120, 3);
    let dir = tempfile::tempdir().unwrap();
    let removed: BTreeSet<u64> = [3, 17, 40].into_iter().collect();
    let (a, key) = s.cf().with_cache(dir.path()).retrained(&removed).unwrap();
    let path = dir.path().join(format!("{key}.bin"));
    let bytes = std::fs::read(&path).unwrap();
    let (b, key2) = s.cf().with_cache(dir.path()).retrained(&removed).unwrap();
    assert_eq!((a, key), (b, key2));
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    // a checkpoint under the wrong key is rejected
    let other: BTreeSet<u64> = [4].into_iter().collect();
    let wrong = dir.path().join(format!("{}.bin", s.cf().job(&other).unwrap().key));
    std::fs::copy(&path, &wrong).unwrap();
    assert!(matches!(
        s.cf().with_cache(dir.path()).retrained(&other),
        Err(Error::ProvenanceConflict(_))
    ));
}

#[test]
fn mismatched_train_config_is_a_conflict() {
    let s = setup(120, 2);
    let other = TrainConfig { seed: 7, ..s.tcfg.clone() };
    assert!(matches!(
        Counterfactual::new(&s.ds, &s.base, &other, &s.dcfg, &s.encoder),
        Err(Error::ProvenanceConflict(_))
    ));
}

#[test]
fn queries_without_eps_seed_are_rejected() {
    let s = setup(120, 2);
    let mut qs = s.queries(1);
    qs[0].eps_seed = None;
    let st = s.cf().random_table(0, 0).unwrap();
    assert!(matches!(s.cf().eval_leave_k(&st, 0, &qs), Err(Error::MissingEpsSeed(_))));
}

#[test]
fn removing_the_planted_group_beats_random_removal() {
    let s = setup(400, 40);
    let cf = s.cf();
    let qs = group_queries(&s.ds, &s.base.params, 50, 0, &s.dcfg).unwrap();
    let mut wins = 0;
    for q in &qs {
        let QueryOrigin::Refine { group_id: Some(g), .. } = q.origin else {
            panic!("group query without group")
        };
        let members = s.ds.group_members(g);
        let rows = s
            .ds
            .ids()
            .map(|id| ScoreRow::new(id, members.contains(&id) as u8 as f64, None))
            .collect();
        let oracle = ScoreTable::new("oracle", q.id(), q.example.content_hash(), rows, serde_json::Value::Null).unwrap();
        let planted = cf.eval_leave_k(&oracle, members.len(), std::slice::from_ref(q)).unwrap()[0].delta_loss;
        let random = cf
            .eval_leave_k(&cf.random_table(0, g).unwrap(), members.len(), std::slice::from_ref(q))
            .unwrap()[0]
            .delta_loss;
        println!("group {g}: planted {planted:.5} random {random:.5}");
        wins += (planted > random) as usize;
    }
    assert_eq!(wins, qs.len());
}
