use guess_core::data::{generate_synthetic, LabeledDataset, SyntheticDatasetSpec};
use guess_core::losses::BlockMode;
use guess_core::metrics::MetricsWriter;
use guess_core::nets::Architecture;
use guess_core::numerics::Tensor;
use guess_core::training::{
    config_hash, load_checkpoint, save_checkpoint, train_ensemble, GuessBlock, Objective, TrainConfig, TrainOptions,
    CHECKPOINT_FILE,
};
use guess_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        ae_pretrain_epochs: 3,
        batch_size: 16,
        warmup_epochs: 1,
        warmup_lr: 1e-3,
        ae_warmup_epochs: 1,
        ae_warmup_lr: 1e-3,
        architecture: Architecture {
            input_dim: 6,
            encoder_hidden: vec![10],
            representation_dim: 8,
            embedding_dim: 5,
        },
        ..TrainConfig::default()
    }
}

fn tiny_data() -> LabeledDataset {
    let spec = SyntheticDatasetSpec {
        num_classes: 3,
        samples_per_class: 20,
        input_dim: 6,
        nuisance_dim: 2,
        separation: 2.0,
        ..SyntheticDatasetSpec::default()
    };
    generate_synthetic(&spec).unwrap().train
}

fn random_views(rows: usize, cols: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    (draw(), draw())
}

fn owned(params: Vec<&Tensor>) -> Vec<Tensor> {
    params.into_iter().cloned().collect()
}

fn max_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

#[test]
fn zero_alpha_beta_step_is_a_barlow_twins_step() {
    let guess = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        ..tiny_config()
    };
    let bt = TrainConfig {
        objective: Objective::BarlowTwins { lambda: 1.0 },
        ..guess.clone()
    };
    let mut a = GuessBlock::init(&guess, 0).unwrap();
    let mut b = GuessBlock::init(&bt, 0).unwrap();
    assert_eq!(owned(a.network_parameters()), owned(b.network_parameters()));
    for step in 0..3 {
        let (va, vb) = random_views(12, 6, step);
        let oa = a.train_step(&va, &vb, &guess).unwrap();
        let ob = b.train_step(&va, &vb, &bt).unwrap();

        // Hand-computed ‖C − I‖²_F on the returned correlation.
        let c = &oa.correlation;
        let mut expected = 0.0;
        for i in 0..c.rows() {
            for j in 0..c.cols() {
                let t = if i == j { 1.0 } else { 0.0 };
                expected += (c.get(i, j) - t).powi(2);
            }
        }
        assert!((oa.breakdown.total - expected).abs() < 1e-12);
        assert!((oa.breakdown.total - ob.breakdown.total).abs() < 1e-12);
        assert!(max_diff(&owned(a.network_parameters()), &owned(b.network_parameters())) < 1e-12);
    }
}

#[test]
fn zero_alpha_leaves_autoencoders_untouched() {
    let config = TrainConfig {
        alpha: 0.0,
        ..tiny_config()
    };
    for mode in [BlockMode::Ensemble, BlockMode::Efficient] {
        let config = TrainConfig { mode, ..config.clone() };
        let mut block = GuessBlock::init(&config, 0).unwrap();
        let before = owned(block.autoencoder_parameters());
        let net_before = owned(block.network_parameters());
        for step in 0..5 {
            let (va, vb) = random_views(10, 6, step);
            block.train_step(&va, &vb, &config).unwrap();
        }
        assert_eq!(owned(block.autoencoder_parameters()), before);
        assert_ne!(owned(block.network_parameters()), net_before);
    }
}

#[test]
fn positive_alpha_trains_autoencoders() {
    let config = tiny_config();
    let mut block = GuessBlock::init(&config, 0).unwrap();
    let before = owned(block.autoencoder_parameters());
    let (va, vb) = random_views(10, 6, 0);
    block.train_step(&va, &vb, &config).unwrap();
    assert_ne!(owned(block.autoencoder_parameters()), before);
}

#[test]
fn shared_views_flag_does_not_change_step_formulas() {
    let plain = tiny_config();
    let shared = TrainConfig {
        shared_views: true,
        ..plain.clone()
    };
    let mut a = GuessBlock::init(&plain, 0).unwrap();
    let mut b = GuessBlock::init(&shared, 0).unwrap();
    let (va, vb) = random_views(12, 6, 9);
    let oa = a.train_step(&va, &vb, &plain).unwrap();
    let ob = b.train_step(&va, &vb, &shared).unwrap();
    assert_eq!(oa, ob);
    assert_eq!(owned(a.network_parameters()), owned(b.network_parameters()));
}

#[test]
fn step_rejects_bad_views() {
    let config = tiny_config();
    let mut block = GuessBlock::init(&config, 0).unwrap();
    let (va, _) = random_views(1, 6, 0);
    assert!(matches!(block.train_step(&va, &va, &config), Err(Error::TooFewRows { .. })));
    let (va, _) = random_views(4, 5, 0);
    assert!(block.train_step(&va, &va, &config).is_err());
    let (va, _) = random_views(4, 6, 0);
    let (vb, _) = random_views(5, 6, 0);
    assert!(block.train_step(&va, &vb, &config).is_err());
}

#[test]
fn identical_views_drive_the_diagonal_to_one() {
    let config = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        warmup_epochs: 0,
        main_lr: 1e-2,
        ..tiny_config()
    };
    let mut block = GuessBlock::init(&config, 0).unwrap();
    let (v, _) = random_views(32, 6, 1);
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        last = block.train_step(&v, &v, &config).unwrap().breakdown.diag_term;
    }
    assert!(last < 1e-3, "diag term {last}");
}

#[test]
fn pretraining_zero_epochs_keeps_initial_autoencoders() {
    let config = TrainConfig {
        ae_pretrain_epochs: 0,
        ..tiny_config()
    };
    let opts = TrainOptions {
        stop_after: Some(0),
        ..TrainOptions::default()
    };
    let run = train_ensemble(&config, &tiny_data(), opts).unwrap();
    let fresh = GuessBlock::init(&config, 0).unwrap();
    assert_eq!(owned(run.blocks()[0].autoencoder_parameters()), owned(fresh.autoencoder_parameters()));
}

#[test]
fn disabled_pretraining_is_skipped() {
    let config = TrainConfig {
        ae_pretrain_enabled: false,
        ..tiny_config()
    };
    let opts = TrainOptions {
        stop_after: Some(0),
        ..TrainOptions::default()
    };
    let run = train_ensemble(&config, &tiny_data(), opts).unwrap();
    assert!(run.state.pretrain_history.iter().all(Vec::is_empty));
    let fresh = GuessBlock::init(&config, 0).unwrap();
    assert_eq!(owned(run.blocks()[0].autoencoder_parameters()), owned(fresh.autoencoder_parameters()));
}

#[test]
fn pretraining_reduces_reconstruction_loss() {
    let config = TrainConfig {
        ae_pretrain_epochs: 60,
        ..tiny_config()
    };
    let opts = TrainOptions {
        stop_after: Some(0),
        ..TrainOptions::default()
    };
    let run = train_ensemble(&config, &tiny_data(), opts).unwrap();
    for history in &run.state.pretrain_history {
        assert_eq!(history.len(), 60);
        assert!(history[59] < 0.5 * history[0], "{history:?}");
    }
    let fresh = GuessBlock::init(&config, 0).unwrap();
    assert_eq!(owned(run.blocks()[0].network_parameters()), owned(fresh.network_parameters()));
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let hash = config_hash(&config).unwrap();
    let mut bytes = Vec::new();
    for name in ["a.ndjson", "b.ndjson"] {
        let path = dir.path().join(name);
        let mut writer = MetricsWriter::create(&path, "run", &hash).unwrap();
        let opts = TrainOptions {
            config_hash: hash.clone(),
            metrics: Some(&mut writer),
            ..TrainOptions::default()
        };
        train_ensemble(&config, &tiny_data(), opts).unwrap();
        drop(writer);
        bytes.push(std::fs::read(&path).unwrap());
    }
    assert!(!bytes[0].is_empty());
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn blocks_do_not_depend_on_ensemble_size() {
    let one = tiny_config();
    let three = TrainConfig { blocks: 3, ..one.clone() };
    let data = tiny_data();
    let r1 = train_ensemble(&one, &data, TrainOptions::default()).unwrap();
    let r3 = train_ensemble(&three, &data, TrainOptions::default()).unwrap();
    let b0 = &r3.blocks()[0];
    assert_eq!(owned(r1.blocks()[0].network_parameters()), owned(b0.network_parameters()));
    assert_eq!(owned(r1.blocks()[0].autoencoder_parameters()), owned(b0.autoencoder_parameters()));
    assert_ne!(owned(r3.blocks()[1].network_parameters()), owned(b0.network_parameters()));
    assert_ne!(owned(r3.blocks()[2].network_parameters()), owned(r3.blocks()[1].network_parameters()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data();
    for (mode, objective) in [
        (BlockMode::Ensemble, Objective::Guess),
        (BlockMode::Efficient, Objective::Guess),
        (
            BlockMode::Ensemble,
            Objective::RegularizedBt {
                lambda: 0.01,
                reference: guess_core::training::ReferenceSource::Autoencoders,
            },
        ),
    ] {
        let config = TrainConfig {
            mode,
            objective,
            blocks: 2,
            checkpoint_every: 1,
            ..tiny_config()
        };
        let hash = config_hash(&config).unwrap();
        let full = train_ensemble(
            &config,
            &data,
            TrainOptions {
                config_hash: hash.clone(),
                ..TrainOptions::default()
            },
        )
        .unwrap();

        train_ensemble(
            &config,
            &data,
            TrainOptions {
                config_hash: hash.clone(),
                checkpoint_dir: Some(dir.path().to_path_buf()),
                stop_after: Some(2),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let state = load_checkpoint(&dir.path().join(CHECKPOINT_FILE), &config, &hash).unwrap();
        assert_eq!(state.next_epoch, 2);
        let resumed = train_ensemble(
            &config,
            &data,
            TrainOptions {
                config_hash: hash.clone(),
                resume: Some(state),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.history(), full.history());
        for (a, b) in resumed.blocks().iter().zip(full.blocks()) {
            assert_eq!(owned(a.network_parameters()), owned(b.network_parameters()));
            assert_eq!(owned(a.autoencoder_parameters()), owned(b.autoencoder_parameters()));
            assert_eq!(owned(a.buffers()), owned(b.buffers()));
        }
    }
}

#[test]
fn checkpoint_refuses_other_configs_and_empty_paths() {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    let hash = config_hash(&config).unwrap();
    let run = train_ensemble(
        &config,
        &tiny_data(),
        TrainOptions {
            config_hash: hash.clone(),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&run.state, &path).unwrap();

    let altered = TrainConfig { beta: 0.02, ..config.clone() };
    let other = config_hash(&altered).unwrap();
    assert_ne!(hash, other);
    assert!(matches!(load_checkpoint(&path, &altered, &other), Err(Error::ConfigHashMismatch { .. })));
    assert!(save_checkpoint(&run.state, std::path::Path::new("")).is_err());

    // Resuming with a mismatched hash is also refused.
    let state = load_checkpoint(&path, &config, &hash).unwrap();
    let err = train_ensemble(
        &altered,
        &tiny_data(),
        TrainOptions {
            config_hash: other,
            resume: Some(state),
            ..TrainOptions::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::ConfigHashMismatch { .. }));
}

#[test]
fn correlation_dumps_are_written_per_block_and_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        epochs: 2,
        blocks: 2,
        ..tiny_config()
    };
    train_ensemble(
        &config,
        &tiny_data(),
        TrainOptions {
            dump_correlations: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["block0_epoch0000.csv", "block0_epoch0001.csv", "block1_epoch0000.csv", "block1_epoch0001.csv"]);
    let text = std::fs::read_to_string(dir.path().join("block0_epoch0000.csv")).unwrap();
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn dataset_must_match_architecture() {
    let config = TrainConfig {
        architecture: Architecture {
            input_dim: 7,
            ..tiny_config().architecture
        },
        ..tiny_config()
    };
    assert!(matches!(
        train_ensemble(&config, &tiny_data(), TrainOptions::default()),
        Err(Error::Config(_))
    ));
}
