use std::path::Path;

use flavars::autograd::Graph;
use flavars::datapipe::synth::{generate_synthetic, SynthConfig};
use flavars::datapipe::{build_vocab, generate_splits, Dataset, SplitSpec};
use flavars::objectives::LossWeights;
use flavars::rng::seeded;
use flavars::training::checkpoint::{load_checkpoint, save_checkpoint};
use flavars::training::{
    compute_losses, fit, fit_codebook, load_samples, prepare_batch, resolve_model_config, FitOptions, FlavarsModel,
    ModelConfig, TrainConfig, TrainSample, Trainer, CHECKPOINT_DIR, LOG_FILE,
};
use flavars::Error;

fn small_model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.vision.image_size = 16;
    m.vision.patch_size = 4;
    m.vision.width = 16;
    m.vision.heads = 2;
    m.vision.proj_dim = 8;
    m.text.width = 16;
    m.text.heads = 2;
    m.text.proj_dim = 8;
    m.fusion.width = 16;
    m.fusion.heads = 2;
    m.location.hidden_width = 16;
    m.location.proj_dim = 8;
    m.codebook_size = 8;
    m
}

fn small_train(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        steps,
        warmup_steps: 2,
        codebook_samples: 256,
        ..TrainConfig::default()
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    dataset: Dataset,
    split: SplitSpec,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let dataset = generate_synthetic(&dir.path().join("d"), &SynthConfig { samples: 48, image_size: 16, seed: 5 }).unwrap();
    let ids: Vec<String> = dataset.records.iter().map(|r| r.id.clone()).collect();
    let split = generate_splits(&ids, 0, [0.7, 0.1, 0.2]).unwrap();
    Fixture { _dir: dir, dataset, split }
}

/// A trainer plus one batch of samples from the fixture's train split.
fn trainer_and_batch(f: &Fixture, config: TrainConfig) -> (Trainer, Vec<TrainSample>) {
    let records = f.dataset.select(&f.split.train).unwrap();
    let captions: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
    let vocab = build_vocab(&captions, 1000).unwrap();
    let cfg = resolve_model_config(&small_model(), &vocab).unwrap();
    let samples = load_samples(&f.dataset, &records[..config.batch_size], &vocab, cfg.text.max_len).unwrap();
    let mut model = FlavarsModel::new(&cfg, config.seed).unwrap();
    model.codebook = Some(fit_codebook(&samples, &cfg, 256, 0).unwrap());
    (Trainer::new(model, config).unwrap(), samples)
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let f = fixture();
    let (mut t, batch) = trainer_and_batch(&f, small_train(5));
    let before = t.model.store.clone();
    t.train_step_with_lr(&batch, 0.0).unwrap();
    for (a, b) in before.entries().iter().zip(t.model.store.entries()) {
        assert_eq!(a.value.data(), b.value.data(), "{} moved", a.name);
    }
}

#[test]
fn fresh_trainers_agree() {
    let f = fixture();
    let (mut a, batch) = trainer_and_batch(&f, small_train(5));
    let (mut b, _) = trainer_and_batch(&f, small_train(5));
    assert_eq!(a.train_step(&batch).unwrap(), b.train_step(&batch).unwrap());
    assert_eq!(a.train_step(&batch).unwrap(), b.train_step(&batch).unwrap());
    assert_eq!(a.model.store.checksum(), b.model.store.checksum());
}

#[test]
fn repeated_steps_fit_one_batch() {
    let f = fixture();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        ..small_train(50)
    };
    let (mut t, batch) = trainer_and_batch(&f, cfg);
    let first = t.train_step_with_lr(&batch, 1e-3).unwrap().total;
    let mut last = first;
    for _ in 1..50 {
        last = t.train_step_with_lr(&batch, 1e-3).unwrap().total;
    }
    assert!(last < first, "step 50 total {last} vs step 1 {first}");
}

#[test]
fn text_only_objective_leaves_vision_without_gradient() {
    let f = fixture();
    let (t, batch) = trainer_and_batch(&f, small_train(5));
    let model = &t.model;
    let prepared = prepare_batch::<f32>(&batch, &model.config, &Default::default(), 0.5, model.codebook.as_ref(), &mut seeded(1)).unwrap();
    let mut g = Graph::new(&model.store);
    let vars = compute_losses(&mut g, &model.modules, &model.config, &prepared, &LossWeights::only("mlm").unwrap()).unwrap();
    let grads = g.backward(vars.total);
    let mut vision_params = 0;
    let mut text_moved = false;
    for id in model.store.ids() {
        let name = &model.store.entry(id).name;
        let grad = grads.get_or_zeros(id, &model.store);
        if name.starts_with("vision.") {
            vision_params += 1;
            assert!(grad.data().iter().all(|&v| v == 0.0), "{name} received gradient");
        }
        if name.starts_with("text.") && grad.data().iter().any(|&v| v != 0.0) {
            text_moved = true;
        }
    }
    assert!(vision_params > 0 && text_moved);
}

fn opts(out: &Path) -> FitOptions {
    FitOptions {
        out_dir: out.to_path_buf(),
        resume: None,
        force: false,
    }
}

#[test]
fn single_step_run_writes_one_line_and_one_checkpoint() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    fit(&small_model(), &small_train(1), &f.dataset, &f.split, &opts(out.path())).unwrap();
    let log = std::fs::read_to_string(out.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1);
    let checkpoints: Vec<_> = std::fs::read_dir(out.path().join(CHECKPOINT_DIR))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .collect();
    assert_eq!(checkpoints.len(), 1);
    // A second run into the same directory needs force.
    let again = fit(&small_model(), &small_train(1), &f.dataset, &f.split, &opts(out.path()));
    assert!(matches!(again, Err(Error::Config(_))));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let f = fixture();
    let full_dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 10,
        ..small_train(20)
    };
    let full = fit(&small_model(), &cfg, &f.dataset, &f.split, &opts(full_dir.path())).unwrap();
    let resumed = fit(
        &small_model(),
        &cfg,
        &f.dataset,
        &f.split,
        &FitOptions {
            out_dir: full_dir.path().to_path_buf(),
            resume: Some(full_dir.path().join(CHECKPOINT_DIR).join("step-000010")),
            force: false,
        },
    )
    .unwrap();
    assert_eq!(resumed.trainer.model.store.checksum(), full.trainer.model.store.checksum());
    assert_eq!(resumed.history, full.history);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let f = fixture();
    let (mut t, batch) = trainer_and_batch(&f, small_train(5));
    t.train_step(&batch).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    let records = f.dataset.select(&f.split.train).unwrap();
    let captions: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
    let vocab = build_vocab(&captions, 1000).unwrap();
    save_checkpoint(&ck, &t, &vocab).unwrap();

    let loaded = load_checkpoint(&ck, Some(&t.model.config), false).unwrap();
    assert_eq!(loaded.step, 1);
    let images: Vec<_> = batch.iter().map(|s| s.image.clone()).collect();
    assert_eq!(loaded.model.encode_images(&images).unwrap(), t.model.encode_images(&images).unwrap());
    assert_eq!(loaded.vocab, vocab);

    let mut other = t.model.config.clone();
    other.vision.patch_size = 8;
    assert!(matches!(load_checkpoint(&ck, Some(&other), false), Err(Error::Fingerprint { .. })));
    assert!(load_checkpoint(&ck, Some(&other), true).is_ok());

    let blob = ck.join("tensors.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&ck, None, false), Err(Error::Checksum { .. })));
}
