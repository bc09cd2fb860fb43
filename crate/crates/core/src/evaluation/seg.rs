//! Frozen-encoder segmentation probe and mean intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::datapipe::Dataset;
use crate::encoders::ImageArray;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::par;
use crate::rng;
use crate::tensor::Tensor;
use crate::training::{AdamW, AdamWConfig, FlavarsModel};

/// Recorded in every segmentation report.
pub const PROBE_DEVIATION: &str =
    "linear per-patch probe with bilinear upsampling over frozen final-layer tokens, in place of a UperNet decoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SegProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

/// `(size² × grid²)` bilinear interpolation from patch centres to pixels
/// (half-pixel centres, edges clamped).
pub fn bilinear_matrix(grid: usize, size: usize) -> Tensor<f32> {
    let axis = |i: usize| -> [(usize, f64); 2] {
        let s = ((i as f64 + 0.5) * grid as f64 / size as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(grid - 1);
        let w = s - lo as f64;
        [(lo, 1.0 - w), (hi, w)]
    };
    let mut u = Tensor::zeros(size * size, grid * grid);
    for y in 0..size {
        for x in 0..size {
            let row = u.row_mut(y * size + x);
            for (gy, wy) in axis(y) {
                for (gx, wx) in axis(x) {
                    row[gy * grid + gx] += (wy * wx) as f32;
                }
            }
        }
    }
    u
}

/// Per-patch linear classifier on frozen token states.
#[derive(Clone, Debug)]
pub struct SegProbe {
    pub store: ParamStore<f32>,
    pub head: Linear,
    pub num_classes: usize,
}

/// Final-layer patch tokens (class token dropped), stacked `(B · P) × width`.
pub fn patch_features(model: &FlavarsModel, images: &[ImageArray<f32>]) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    for chunk in images.chunks(64) {
        for e in model.modules.vision.encode(&model.store, chunk)? {
            let t = &e.token_states;
            parts.push(t.slice_rows(1, t.rows() - 1));
        }
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Tensor::vstack(&refs)
}

fn check_maps(images: &[ImageArray<f32>], labels: &[Vec<usize>], num_classes: usize) -> Result<()> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::Shape(format!("{} images with {} label maps", images.len(), labels.len())));
    }
    for (i, (img, l)) in images.iter().zip(labels).enumerate() {
        if l.len() != img.height * img.width {
            return Err(Error::Shape(format!(
                "label map {i} has {} pixels, image is {}x{}",
                l.len(),
                img.height,
                img.width
            )));
        }
        if let Some(&bad) = l.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} in map {i} is outside [0, {num_classes})")));
        }
    }
    Ok(())
}

/// Trains the probe by pixel cross-entropy; the encoder is only read.
pub fn train_seg_probe(
    model: &FlavarsModel,
    images: &[ImageArray<f32>],
    labels: &[Vec<usize>],
    num_classes: usize,
    config: &SegProbeConfig,
) -> Result<SegProbe> {
    check_maps(images, labels, num_classes)?;
    let vc = &model.config.vision;
    let p = vc.num_patches();
    let features = patch_features(model, images)?;
    let u = bilinear_matrix(vc.grid(), vc.image_size);
    let mut r = rng::derived(config.seed, "seg-probe", 0);
    let mut store = ParamStore::new();
    let head = Linear::new(&mut store, "probe", vc.width, num_classes, true, &mut r);
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    let n = images.len();
    let b = config.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    for step in 0..config.steps {
        let start = (step * b) % n;
        if start < b {
            use rand::seq::SliceRandom;
            order.shuffle(&mut r);
        }
        let pick: Vec<usize> = (0..b).map(|k| order[(start + k) % n]).collect();
        let rows: Vec<usize> = pick.iter().flat_map(|&i| i * p..(i + 1) * p).collect();
        let targets: Vec<usize> = pick.iter().flat_map(|&i| labels[i].iter().copied()).collect();
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.constant(features.clone());
            let x = g.gather_rows(x, &rows)?;
            let logits = head.forward(&mut g, x);
            let pixels = g.block_left_mul(u.clone(), logits);
            let loss = g.cross_entropy(pixels, &targets)?;
            g.backward(loss)
        };
        opt.step(&mut store, &grads, config.learning_rate, 0.0);
    }
    Ok(SegProbe {
        store,
        head,
        num_classes,
    })
}

impl SegProbe {
    /// Per-pixel argmax (ties to the lowest class), one row-major map per image.
    pub fn predict(&self, model: &FlavarsModel, images: &[ImageArray<f32>]) -> Result<Vec<Vec<usize>>> {
        let vc = &model.config.vision;
        let u = bilinear_matrix(vc.grid(), vc.image_size);
        let features = patch_features(model, images)?;
        let mut g = Graph::frozen(&self.store);
        let x = g.constant(features);
        let logits = self.head.forward(&mut g, x);
        let pixels = g.block_left_mul(u, logits);
        let out = g.value(pixels);
        let hw = vc.image_size * vc.image_size;
        Ok(par::map_range(images.len(), |i| {
            (0..hw)
                .map(|k| {
                    let row = out.row(i * hw + k);
                    let mut best = 0;
                    for c in 1..row.len() {
                        if row[c] > row[best] {
                            best = c;
                        }
                    }
                    best
                })
                .collect()
        }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouResult {
    pub miou: f64,
    /// `None` for classes absent from both predictions and targets.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[target][pred]` pixel counts over the whole set.
    pub confusion: Vec<Vec<u64>>,
}

/// Dataset-level IoU per class from accumulated confusion counts; the mean
/// covers classes present in targets or predictions.
pub fn compute_miou(preds: &[Vec<usize>], targets: &[Vec<usize>], num_classes: usize) -> Result<MiouResult> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        if p.len() != t.len() {
            return Err(Error::Shape(format!("map {i}: {} predicted vs {} target pixels", p.len(), t.len())));
        }
        for (&a, &b) in p.iter().zip(t) {
            if a >= num_classes || b >= num_classes {
                return Err(Error::InvalidArgument(format!("map {i} holds a label outside [0, {num_classes})")));
            }
            confusion[b][a] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let inter = confusion[c][c];
        let target_c: u64 = confusion[c].iter().sum();
        let pred_c: u64 = confusion.iter().map(|row| row[c]).sum();
        let union = target_c + pred_c - inter;
        per_class.push((union > 0).then(|| inter as f64 / union as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument("no pixels to score".into()));
    }
    Ok(MiouResult {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        confusion,
    })
}

/// Images and label maps of the records named by `ids`.
pub fn load_seg_split(dataset: &Dataset, ids: &[String]) -> Result<(Vec<ImageArray<f32>>, Vec<Vec<usize>>)> {
    let records = dataset.select(ids)?;
    let loaded: Vec<Result<(ImageArray<f32>, Vec<usize>)>> =
        par::map_slice(&records, |r| Ok((dataset.load_image(r)?, dataset.load_mask(r)?)));
    let mut images = Vec::with_capacity(records.len());
    let mut maps = Vec::with_capacity(records.len());
    for item in loaded {
        let (i, m) = item?;
        images.push(i);
        maps.push(m);
    }
    Ok((images, maps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_hand_counted() {
        // Target class 1 = top row, prediction class 1 = left column.
        let r = compute_miou(&[vec![1, 0, 1, 0]], &[vec![1, 1, 0, 0]], 2).unwrap();
        assert!((r.per_class[0].unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.miou - 1.0 / 3.0).abs() < 1e-12);
        let same = compute_miou(&[vec![0, 2, 2]], &[vec![0, 2, 2]], 4).unwrap();
        assert_eq!(same.miou, 1.0);
        assert_eq!(same.per_class[1], None);
        assert!(compute_miou(&[vec![0]], &[vec![0, 1]], 2).is_err());
        assert!(compute_miou(&[vec![3]], &[vec![0]], 2).is_err());
    }

    #[test]
    fn bilinear_rows_are_convex() {
        let u = bilinear_matrix(4, 32);
        for r in 0..u.rows() {
            let s: f32 = u.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(u.row(r).iter().all(|&w| w >= 0.0));
        }
        // A pixel at a patch centre copies that patch.
        assert_eq!(u.get(3 * 32 + 3, 0), 1.0);
    }
}
