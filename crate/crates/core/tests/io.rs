mod common;

use common::*;
use prefixsub_core::data::SyntheticKind;
use prefixsub_core::eval::{centroid_metric, predict_baked, MetricKind};
use prefixsub_core::io::*;
use prefixsub_core::model::*;
use prefixsub_core::subspace::PrefixModel;
use prefixsub_core::Error;

fn base() -> (BaseModel<f32>, Vec<TokenSequence>) {
    let (vocab, seqs) = synthetic(SyntheticKind::PairOverlap, 20, 1);
    (BaseModel::<f32>::new(tiny_config(TaskHead::Regression), vocab, 3).unwrap(), seqs)
}

#[test]
fn base_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (b, _) = base();
    let path = dir.path().join("base.ckpt");
    save_base(&path, &b).unwrap();
    let back = load_base(&path).unwrap();
    assert_eq!(back.config, b.config);
    assert_eq!(back.vocab.tokens(), b.vocab.tokens());
    for ((_, p), (_, q)) in b.store.iter().zip(back.store.iter()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.values, q.values);
    }
}

#[test]
fn simplex_and_baked_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (b, seqs) = base();
    let cfg = ModelConfig {
        task_head: TaskHead::Classification { classes: 2 },
        ..b.config.clone()
    };
    let m = PrefixModel::new(&b.store, &cfg, 3, 2, 5).unwrap();
    let sp = dir.path().join("simplex.ckpt");
    save_simplex(&sp, &m, &b.vocab).unwrap();
    let (loaded, vocab) = load_model(&sp).unwrap();
    assert_eq!(vocab.tokens(), b.vocab.tokens());
    let LoadedModel::Simplex(back) = loaded else { panic!("expected a simplex") };
    assert_eq!(back.simplex_snapshot(), m.simplex_snapshot());
    assert!(base_is_frozen(&back.store));
    assert_eq!(
        centroid_metric(&back, &seqs, MetricKind::Accuracy).unwrap(),
        centroid_metric(&m, &seqs, MetricKind::Accuracy).unwrap()
    );

    let bp = dir.path().join("baked.ckpt");
    let baked = m.centroid().unwrap();
    save_baked(&bp, &cfg, &m.store, &baked, &b.vocab).unwrap();
    let (loaded, _) = load_model(&bp).unwrap();
    assert_eq!(loaded.config(), &cfg);
    let LoadedModel::Baked(ck) = loaded else { panic!("expected a baked model") };
    assert_eq!(ck.baked, baked);
    assert!(ck.store.iter().all(|(_, p)| p.name.starts_with("base.")));
    assert_eq!(
        predict_baked(&ck.encoder, &ck.store, &ck.baked, &seqs).unwrap(),
        predict_baked(&m.encoder, &m.store, &baked, &seqs).unwrap()
    );
}

#[test]
fn wrong_kinds_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (b, _) = base();
    let path = dir.path().join("base.ckpt");
    save_base(&path, &b).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Input(_))));
    let cfg = ModelConfig {
        task_head: TaskHead::Classification { classes: 2 },
        ..b.config.clone()
    };
    let m = PrefixModel::new(&b.store, &cfg, 2, 2, 5).unwrap();
    let sp = dir.path().join("simplex.ckpt");
    save_simplex(&sp, &m, &b.vocab).unwrap();
    assert!(matches!(load_base(&sp), Err(Error::Input(_))));
}
