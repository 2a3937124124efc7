use brivl_core::checkpoint::{generator_checkpoint, restore_generator, restore_trainer, trainer_checkpoint, Checkpoint};
use brivl_core::contrastive::{Trainer, TrainingSet};
use brivl_core::datagen::{read_dataset, write_dataset, PairDataset};
use brivl_core::imagination::ToyGenerator;
use brivl_core::{Error, FormatFault, LossMode, RunConfig};

fn small_config(mode: LossMode) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.trainer.batch_size = 4;
    cfg.trainer.queue_size = 8;
    cfg.trainer.loss_mode = mode;
    cfg.trainer.epochs = 2;
    cfg
}

fn fault(e: Error) -> FormatFault {
    match e {
        Error::Format { fault, .. } => fault,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn save_load_then_step_matches_uninterrupted_step_bit_for_bit() {
    for mode in [LossMode::Queue, LossMode::InBatch] {
        let cfg = small_config(mode);
        let ds = PairDataset::generate(11, 24, 4, cfg.encoder.image_size);
        let mut trainer = Trainer::new(&cfg.encoder, &cfg.trainer).unwrap();
        let data = TrainingSet::train_split(&ds, &trainer.towers.vocab, cfg.encoder.max_text_len).unwrap();
        // Past the queue warm-up, so optimizer moments and queues are populated.
        for _ in 0..4 {
            trainer.step(&data).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        trainer_checkpoint(&cfg, &trainer).save(&path).unwrap();
        let (cfg_back, mut resumed) = restore_trainer(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(cfg_back, cfg);

        let a = trainer.step(&data).unwrap();
        let b = resumed.step(&data).unwrap();
        assert_eq!(a.log_line(), b.log_line());
        assert_eq!(
            trainer_checkpoint(&cfg, &trainer).encode(),
            trainer_checkpoint(&cfg, &resumed).encode(),
            "{mode} state diverged after one step"
        );
    }
}

#[test]
fn generator_round_trip_is_exact() {
    let mut cfg = RunConfig::default();
    cfg.generator.train_steps = 3;
    cfg.generator.batch_size = 4;
    let ds = PairDataset::generate(2, 8, 0, 32);
    let images: Vec<Vec<f32>> = ds.records.iter().map(|r| r.image_chw(32)).collect();
    let mut g = ToyGenerator::new(&cfg.generator, 32).unwrap();
    g.train(&images).unwrap();
    let ck = generator_checkpoint(&cfg, &g);
    let (_, back) = restore_generator(&Checkpoint::decode(&ck.encode()).unwrap()).unwrap();
    assert_eq!(back.params().fingerprint(), g.params().fingerprint());
}

#[test]
fn dataset_file_round_trip_is_lossless() {
    let ds = PairDataset::generate(4, 30, 10, 32);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.bin");
    write_dataset(&ds, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);
}

#[test]
fn corrupted_checkpoints_map_to_format_faults() {
    let cfg = small_config(LossMode::Queue);
    let trainer = Trainer::new(&cfg.encoder, &cfg.trainer).unwrap();
    let bytes = trainer_checkpoint(&cfg, &trainer).encode();

    let mut magic = bytes.clone();
    magic[3] ^= 0xff;
    assert_eq!(fault(Checkpoint::decode(&magic).unwrap_err()), FormatFault::BadMagic);
    let mut version = bytes.clone();
    version[9] = version[9].wrapping_add(1);
    assert_eq!(fault(Checkpoint::decode(&version).unwrap_err()), FormatFault::Version);
    for cut in [0, 8, 15, bytes.len() / 2, bytes.len() - 1] {
        let e = Checkpoint::decode(&bytes[..cut]).unwrap_err();
        assert!(matches!(fault(e), FormatFault::Truncated | FormatFault::BadMagic), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x01;
    let e = Checkpoint::decode(&flipped).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert_eq!(fault(e), FormatFault::Checksum);
}

#[test]
fn mismatched_architecture_is_a_data_error() {
    let cfg = small_config(LossMode::Queue);
    let trainer = Trainer::new(&cfg.encoder, &cfg.trainer).unwrap();
    let mut ck = trainer_checkpoint(&cfg, &trainer);
    let mut other = cfg.clone();
    other.encoder.embed_dim = 32;
    ck.config = other.to_text();
    let e = restore_trainer(&ck).unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
}

mod random_bytes {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn arbitrary_input_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = Checkpoint::decode(&bytes);
        }

        #[test]
        fn single_bit_flips_are_detected(pos in 0usize..4096, bit in 0u8..8) {
            let ck = Checkpoint {
                config: "seed = 1\n".into(),
                meta: vec![("step".into(), 3)],
                blobs: vec![("w".into(), brivl_tensor::Tensor::new(&[4, 8], (0..32).map(|i| i as f32 * 0.25).collect()).unwrap())],
            };
            let mut bytes = ck.encode();
            let pos = pos % bytes.len();
            bytes[pos] ^= 1 << bit;
            prop_assert!(Checkpoint::decode(&bytes).is_err());
        }
    }
}
