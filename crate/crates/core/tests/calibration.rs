//! Loss weights of a fresh default model on the default corpus, frozen from
//! the first calibrated desk run.

use invtrans_core::datagen::{generate_split, read_frames, write_frames, CorpusSpec, Split};
use invtrans_core::training::{initial_calibration, initial_model, TrainConfig};
use invtrans_core::DimSpec;

const FROZEN_WEIGHTS: [f64; 6] = [
    1.0,
    361.4464965752883,
    0.9880262780416446,
    1.3554690318084148,
    5565.094307892148,
    148.00104774665417,
];

#[test]
fn default_calibration_matches_fixture() {
    // Training reads frames back from disk, so go through the f32 file.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.frm");
    write_frames(&path, &generate_split(&CorpusSpec::default(), Split::Train, 1).unwrap()).unwrap();
    let train = read_frames(&path).unwrap();
    assert_eq!(train.n_frames(), 60_000);
    let cfg = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };
    let model = initial_model(&cfg, DimSpec::default()).unwrap();
    let cal = initial_calibration(&cfg, &model, &train).unwrap();
    assert!(cal.flagged.is_empty());
    for (got, want) in cal.weights.as_array().iter().zip(FROZEN_WEIGHTS) {
        assert!((got - want).abs() <= 1e-12 * want, "{:?}", cal.weights.as_array());
    }
}
