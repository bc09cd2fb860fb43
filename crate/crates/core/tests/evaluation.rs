use flavars::datapipe::synth::{generate_synthetic, SynthConfig};
use flavars::datapipe::{build_vocab, generate_splits, SplitSpec};
use flavars::encoders::ImageArray;
use flavars::evaluation::{
    compute_miou, embed_images, evaluate_split, expand_prompt, knn_classify, train_seg_probe, zero_shot_classify,
    EmbeddingIndex, EvalConfig, KnnConfig, Protocol, SegProbeConfig,
};
use flavars::rng::seeded;
use flavars::training::{resolve_model_config, FlavarsModel, ModelConfig};
use flavars::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

fn small_config(vocab_size: usize) -> ModelConfig {
    let mut m = ModelConfig::default();
    m.vision.image_size = 16;
    m.vision.patch_size = 4;
    m.vision.width = 16;
    m.vision.heads = 2;
    m.text.vocab_size = vocab_size;
    m.text.width = 16;
    m.text.heads = 2;
    m.fusion.width = 16;
    m.fusion.heads = 2;
    m
}

fn model(vocab_size: usize) -> FlavarsModel {
    FlavarsModel::new(&small_config(vocab_size), 8).unwrap()
}

fn images(n: usize, seed: u64) -> Vec<ImageArray<f32>> {
    let mut r = seeded(seed);
    (0..n)
        .map(|_| ImageArray::new(16, 16, 3, (0..768).map(|_| r.random::<f32>()).collect()).unwrap())
        .collect()
}

#[test]
fn image_embeddings_are_unit_rows_in_input_order() {
    let m = model(10);
    let imgs = images(5, 1);
    let a = embed_images(&m, &imgs).unwrap();
    assert_eq!(a.shape(), (5, m.config.vision.proj_dim));
    for i in 0..5 {
        let n: f64 = a.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    assert_eq!(a, embed_images(&m, &imgs).unwrap());
    let reversed: Vec<_> = imgs.iter().rev().cloned().collect();
    let b = embed_images(&m, &reversed).unwrap();
    for i in 0..5 {
        assert_eq!(a.row(i), b.row(4 - i));
    }
}

#[test]
fn knn_exact_match_and_hand_example() {
    let pts = [[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0], [6.0, 5.0], [5.0, 6.0]];
    let m = Tensor::from_rows(&pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap();
    let ids = (0..6).map(|i| format!("p{i}")).collect();
    let idx = EmbeddingIndex::new(m, vec![0, 0, 0, 1, 1, 1], ids).unwrap();
    assert_eq!(knn_classify(&idx, &[0.2, 0.2], &KnnConfig { k: 5 }).unwrap(), 0);
    for (i, p) in pts.iter().enumerate() {
        assert_eq!(knn_classify(&idx, p, &KnnConfig { k: 1 }).unwrap(), idx.labels[i]);
    }
    assert!(knn_classify(&idx, &[0.0, 0.0], &KnnConfig { k: 7 }).is_err());
}

#[test]
fn zero_shot_rules() {
    let classes = vec![vec![1.0f32, 0.0], vec![0.0, 1.0]];
    assert_eq!(zero_shot_classify(&[1.0, 0.0], &classes).unwrap(), 0);
    assert_eq!(zero_shot_classify(&[0.0, 10.0], &classes).unwrap(), 1);
    let h = std::f32::consts::FRAC_1_SQRT_2;
    assert_eq!(zero_shot_classify(&[h, h], &classes).unwrap(), 0);
    // One-hot class per image: perfect accuracy.
    let one_hot: Vec<Vec<f32>> = (0..4).map(|c| (0..4).map(|k| if k == c { 1.0 } else { 0.0 }).collect()).collect();
    for (c, img) in one_hot.iter().enumerate() {
        assert_eq!(zero_shot_classify(img, &one_hot).unwrap(), c);
    }
}

#[test]
fn prompt_template() {
    assert_eq!(expand_prompt("forest").unwrap(), "a satellite photo of forest.");
    assert_eq!(expand_prompt("Golf Course").unwrap(), "a satellite photo of golf course.");
    assert!(expand_prompt("").is_err());
}

#[test]
fn miou_perfect_and_hand_counted() {
    let t = vec![vec![1, 1, 0, 0]];
    assert_eq!(compute_miou(&t, &t, 2).unwrap().miou, 1.0);
    let pred = vec![vec![1, 0, 1, 0]];
    let m = compute_miou(&pred, &t, 2).unwrap();
    assert!((m.miou - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn constant_labels_are_learned_and_encoder_is_frozen() {
    let m = model(10);
    let imgs = images(6, 3);
    let labels = vec![vec![1usize; 256]; 6];
    let before = m.store.checksum();
    let cfg = SegProbeConfig {
        steps: 60,
        batch_size: 3,
        ..SegProbeConfig::default()
    };
    let probe = train_seg_probe(&m, &imgs, &labels, 2, &cfg).unwrap();
    assert_eq!(m.store.checksum(), before);
    let preds = probe.predict(&m, &imgs).unwrap();
    assert!(preds.iter().flatten().all(|&c| c == 1));
}

fn eval_fixture() -> (tempfile::TempDir, flavars::datapipe::Dataset, SplitSpec, FlavarsModel, flavars::datapipe::Vocabulary) {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&dir.path().join("d"), &SynthConfig { samples: 24, image_size: 16, seed: 1 }).unwrap();
    let ids: Vec<String> = ds.records.iter().map(|r| r.id.clone()).collect();
    let split = generate_splits(&ids, 2, [0.5, 0.25, 0.25]).unwrap();
    let captions: Vec<&str> = ds.records.iter().map(|r| r.caption.as_str()).collect();
    let vocab = build_vocab(&captions, 1000).unwrap();
    let cfg = resolve_model_config(&small_config(0), &vocab).unwrap();
    let m = FlavarsModel::new(&cfg, 3).unwrap();
    (dir, ds, split, m, vocab)
}

#[test]
fn reports_are_repeatable_and_flag_the_probe() {
    let (_dir, ds, split, m, vocab) = eval_fixture();
    let mut cfg = EvalConfig::default();
    cfg.seg.steps = 10;
    for p in [Protocol::Knn, Protocol::Zeroshot, Protocol::Seg] {
        let a = evaluate_split(p, &m, &vocab, &ds, &split, &cfg).unwrap();
        let b = evaluate_split(p, &m, &vocab, &ds, &split, &cfg).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert!((0.0..=1.0).contains(&a.value));
        assert_eq!(a.deviation.is_some(), p == Protocol::Seg);
    }
}

#[test]
fn knn_on_identical_train_and_test_is_perfect() {
    let (_dir, ds, _, m, vocab) = eval_fixture();
    let one = vec![ds.records[0].id.clone()];
    let split = SplitSpec {
        seed: 0,
        fractions: [0.5, 0.0, 0.5],
        train: one.clone(),
        val: vec![],
        test: one,
    };
    let cfg = EvalConfig {
        knn: KnnConfig { k: 1 },
        ..EvalConfig::default()
    };
    let r = evaluate_split(Protocol::Knn, &m, &vocab, &ds, &split, &cfg).unwrap();
    assert_eq!(r.value, 1.0);
}

proptest! {
    #[test]
    fn knn_with_k_equal_n_is_the_majority(labels in proptest::collection::vec(0usize..3, 1..30), seed in any::<u64>()) {
        let mut r = seeded(seed);
        let n = labels.len();
        let rows: Vec<Vec<f32>> = (0..n).map(|_| vec![r.random::<f32>(), r.random::<f32>()]).collect();
        let idx = EmbeddingIndex::new(Tensor::from_rows(&rows).unwrap(), labels.clone(), (0..n).map(|i| format!("{i:03}")).collect()).unwrap();
        let got = knn_classify(&idx, &[0.5, 0.5], &KnnConfig { k: n }).unwrap();
        let count = |c: usize| labels.iter().filter(|&&l| l == c).count();
        prop_assert!((0..3).all(|c| count(got) >= count(c)));
    }

    #[test]
    fn miou_is_bounded_and_pixel_order_free(pixels in proptest::collection::vec((0usize..3, 0usize..3), 1..80), shift in 0usize..80) {
        let (p, t): (Vec<usize>, Vec<usize>) = pixels.iter().copied().unzip();
        let m = compute_miou(std::slice::from_ref(&p), std::slice::from_ref(&t), 3).unwrap().miou;
        prop_assert!((0.0..=1.0).contains(&m));
        let k = shift % p.len();
        let (mut p2, mut t2) = (p.clone(), t.clone());
        p2.rotate_left(k);
        t2.rotate_left(k);
        prop_assert!((compute_miou(&[p2], &[t2], 3).unwrap().miou - m).abs() < 1e-12);
    }
}
