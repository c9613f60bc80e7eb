use tagvlp::checkpoint::Checkpoint;
use tagvlp::config::TrainConfig;
use tagvlp::data::{synth_fixture, SynthOptions};
use tagvlp::lexicon::TagLexicon;
use tagvlp::trainer::Trainer;
use tagvlp::Error;

fn trained() -> Checkpoint {
    let lexicon = TagLexicon::from_counts(["cat", "dog", "tree", "car"].iter().map(|n| (*n, 4u64)), vec![], 4).unwrap();
    let opts = SynthOptions { image_size: 16, cell_size: 8, ..Default::default() };
    let records = synth_fixture(1, 4, &lexicon, 0.0, &opts).unwrap();
    let mut config = TrainConfig::default();
    config
        .apply_text(
            "image_size=16\npatch_size=8\nwidth=16\ndepth=1\nheads=2\nproj_dim=8\ndecoder_dim=16\nffn_dim=32\n\
             batch_size=2\nmax_steps=3\naugment=identity",
            "test",
        )
        .unwrap();
    let mut t = Trainer::new(&records, &lexicon, &config).unwrap();
    t.run().unwrap();
    t.checkpoint()
}

#[test]
fn file_round_trip_is_exact() {
    let ckpt = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.step, 3);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
    back.model().unwrap();
}

#[test]
fn class_count_mismatch_is_reported() {
    let mut ckpt = trained();
    ckpt.lexicon = TagLexicon::from_counts([("cat", 1u64), ("dog", 1)], vec![], 2).unwrap();
    let err = ckpt.model().unwrap_err();
    assert!(matches!(err, Error::CheckpointMismatch(_)), "{err}");
    assert!(err.to_string().contains("4 classes"));
}

#[test]
fn corrupt_files_are_rejected() {
    let bytes = trained().to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]), Err(Error::CheckpointMismatch(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let mut tensor = trained();
    tensor.params[0].1 = tagvlp::graph::Mat::zeros((1, 1));
    assert!(matches!(tensor.model(), Err(Error::CheckpointMismatch(_))));
}
