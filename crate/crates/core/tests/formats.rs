// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;

use polysae::interactions::interaction_strength;
use polysae::io::{
    load_checkpoint, read_corpus_f32, read_labels, save_checkpoint, write_corpus, write_labels,
    Checkpoint, CorpusF32, Labels, BLOB_FILE, MANIFEST_FILE,
};
use polysae::linalg::{randn_matrix, Rng};
use polysae::train::{train, OptimizerState};
use polysae::{ModelConfig, PolySaeParams, Ranks, TrainConfig};

fn checkpoint(with_optimizer: bool) -> Checkpoint {
    let model = ModelConfig::new(5, 11, 3, Ranks { r1: 5, r2: 3, r3: 2 }).with_seed(4);
    let params = PolySaeParams::init(&model, &mut Rng::new(4)).unwrap();
    let optimizer = with_optimizer.then(|| {
        let mut o = OptimizerState::new(&params);
        o.m.enc.as_mut_slice()[3] = 0.25;
        o.v.lambda3 = 1e-300;
        o.step = 17;
        o
    });
    Checkpoint {
        model,
        train: Some(TrainConfig::default()),
        step: 17,
        params,
        optimizer,
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    for opt in [false, true] {
        let dir = tempfile::tempdir().unwrap();
        let c = checkpoint(opt);
        save_checkpoint(dir.path(), &c).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        for ((_, a), (_, b)) in c.params.tensors().iter().zip(back.params.tensors().iter()) {
            let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back, c);
    }
}

#[test]
fn saving_twice_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_checkpoint(a.path(), &checkpoint(true)).unwrap();
    save_checkpoint(b.path(), &checkpoint(true)).unwrap();
    for f in [MANIFEST_FILE, BLOB_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn edited_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &checkpoint(false)).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap();

    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["tensors"][0]["shape"] = serde_json::json!([5, 12]);
    fs::write(&path, json.to_string()).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err().to_string();
    assert!(err.contains("shape"), "{err}");

    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["version"] = serde_json::json!(99);
    fs::write(&path, json.to_string()).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err().to_string();
    assert!(err.contains("version 99"), "{err}");

    fs::write(&path, &text).unwrap();
    let blob = dir.path().join(BLOB_FILE);
    let mut bytes = fs::read(&blob).unwrap();
    bytes.truncate(bytes.len() - 8);
    fs::write(&blob, bytes).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

#[test]
fn frozen_linear_checkpoint_has_no_interactions() {
    let model = ModelConfig::new(5, 11, 3, Ranks { r1: 5, r2: 3, r3: 2 });
    let mut params = PolySaeParams::init(&model, &mut Rng::new(0)).unwrap();
    params.lambda2 = 0.0;
    params.lambda3 = 0.0;
    let tc = TrainConfig {
        batch_size: 16,
        total_tokens: 160,
        freeze_lambdas: true,
        ..TrainConfig::default()
    };
    let corpus = randn_matrix(&mut Rng::new(1), 64, 5);
    let out = train(params, &model, &tc, &corpus).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(
        dir.path(),
        &Checkpoint {
            model,
            train: Some(tc),
            step: 10,
            params: out.params,
            optimizer: Some(out.state),
        },
    )
    .unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    for i in 0..11 {
        for j in 0..11 {
            assert_eq!(interaction_strength(&back.params, i, j).unwrap(), 0.0);
        }
    }
}

#[test]
fn corpus_and_labels_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = randn_matrix(&mut Rng::new(2), 10, 4);
    let path = dir.path().join("acts.bin");
    write_corpus(&path, &m).unwrap();
    let back = read_corpus_f32(&path).unwrap();
    assert_eq!(back, CorpusF32::from_matrix(&m));
    assert_eq!(fs::metadata(&path).unwrap().len(), 24 + 10 * 4 * 4);

    let labels: Labels = [("feat_0_active".to_string(), vec![0, 1, 1, 0, 0, 0, 1, 0, 1, 1])].into();
    let lp = dir.path().join("labels.json");
    write_labels(&lp, &labels).unwrap();
    assert_eq!(read_labels(&lp, 10).unwrap(), labels);
    assert!(read_labels(&lp, 11).is_err());
}
