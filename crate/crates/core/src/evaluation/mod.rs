//! Downstream protocols over frozen encoders: KNN and zero-shot classification,
//! and a segmentation probe scored by mIoU.

pub mod seg;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::{tokenize, write_atomic, Dataset, SplitSpec, Vocabulary};
use crate::encoders::{GeoCoordinate, ImageArray};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;
use crate::training::FlavarsModel;

pub use seg::{compute_miou, train_seg_probe, SegProbe, SegProbeConfig};

/// Images embedded per encoder call.
const EMBED_CHUNK: usize = 64;

/// Pooled embeddings with their labels and record ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub matrix: Tensor<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl EmbeddingIndex {
    pub fn new(matrix: Tensor<f32>, labels: Vec<usize>, ids: Vec<String>) -> Result<Self> {
        if matrix.rows() != labels.len() || matrix.rows() != ids.len() {
            return Err(Error::Shape(format!(
                "{} embeddings, {} labels, {} ids",
                matrix.rows(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Self { matrix, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Row `i` is the pooled embedding of `images[i]`.
pub fn embed_images(model: &FlavarsModel, images: &[ImageArray<f32>]) -> Result<Tensor<f32>> {
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        rows.extend(model.encode_images(chunk)?);
    }
    if rows.is_empty() {
        return Ok(Tensor::zeros(0, model.config.vision.proj_dim));
    }
    Tensor::from_rows(&rows)
}

/// Embeds the records named by `ids`, labelling each by its index in `classes`.
pub fn embed_dataset(model: &FlavarsModel, dataset: &Dataset, ids: &[String], classes: &[String]) -> Result<EmbeddingIndex> {
    let records = dataset.select(ids)?;
    let labels = records
        .iter()
        .map(|r| label_index(r.label.as_deref(), classes, &r.id))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<Result<ImageArray<f32>>> = par::map_slice(&records, |r| dataset.load_image(r));
    let images = images.into_iter().collect::<Result<Vec<_>>>()?;
    EmbeddingIndex::new(embed_images(model, &images)?, labels, ids.to_vec())
}

fn label_index(label: Option<&str>, classes: &[String], id: &str) -> Result<usize> {
    let label = label.ok_or_else(|| Error::Dataset(format!("record {id} has no label")))?;
    classes
        .iter()
        .position(|c| c == label)
        .ok_or_else(|| Error::Dataset(format!("record {id} has unknown label {label:?}")))
}

/// Sorted class names appearing as labels in the dataset.
pub fn dataset_classes(dataset: &Dataset) -> Result<Vec<String>> {
    let mut set = std::collections::BTreeSet::new();
    for r in &dataset.records {
        set.insert(r.label.clone().ok_or_else(|| Error::Dataset(format!("record {} has no label", r.id)))?);
    }
    Ok(set.into_iter().collect())
}

/// KNN accuracy of location embeddings: `train` coordinates form the index and
/// each `test` coordinate is classified against it.
pub fn location_probe_accuracy(
    model: &FlavarsModel,
    train: &[(GeoCoordinate, usize)],
    test: &[(GeoCoordinate, usize)],
    config: &KnnConfig,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("location probe with no test points".into()));
    }
    let embed = |points: &[(GeoCoordinate, usize)]| -> Result<Tensor<f32>> {
        let coords: Vec<GeoCoordinate> = points.iter().map(|p| p.0).collect();
        Tensor::from_rows(&model.encode_locations(&coords))
    };
    let ids = (0..train.len()).map(|i| format!("{i:08}")).collect();
    let index = EmbeddingIndex::new(embed(train)?, train.iter().map(|p| p.1).collect(), ids)?;
    let queries = embed(test)?;
    let mut correct = 0usize;
    for (i, p) in test.iter().enumerate() {
        if knn_classify(&index, queries.row(i), config)? == p.1 {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Majority vote among the `k` nearest rows by Euclidean distance. Distance ties
/// go to the smaller id; vote ties go to the tied class owning the nearest neighbour.
pub fn knn_classify(index: &EmbeddingIndex, query: &[f32], config: &KnnConfig) -> Result<usize> {
    let n = index.len();
    if config.k == 0 || config.k > n {
        return Err(Error::InvalidArgument(format!("k = {} with {n} indexed rows", config.k)));
    }
    if query.len() != index.matrix.cols() {
        return Err(Error::Shape(format!(
            "query of dim {} against an index of dim {}",
            query.len(),
            index.matrix.cols()
        )));
    }
    let mut order: Vec<(f64, usize)> = (0..n).map(|i| (squared_distance(index.matrix.row(i), query), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| index.ids[a.1].cmp(&index.ids[b.1])));
    let neighbours = &order[..config.k];
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for &(_, i) in neighbours {
        *votes.entry(index.labels[i]).or_default() += 1;
    }
    let best = votes.values().copied().max().unwrap_or(0);
    neighbours
        .iter()
        .map(|&(_, i)| index.labels[i])
        .find(|l| votes[l] == best)
        .ok_or_else(|| Error::InvalidArgument("no neighbours".into()))
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Class with the highest cosine similarity; ties go to the lowest index.
pub fn zero_shot_classify(image: &[f32], classes: &[Vec<f32>]) -> Result<usize> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("zero-shot needs at least one class".into()));
    }
    let ni = norm(image);
    if ni == 0.0 || !ni.is_finite() {
        return Err(Error::InvalidArgument("image embedding has zero or non-finite norm".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (c, e) in classes.iter().enumerate() {
        if e.len() != image.len() {
            return Err(Error::Shape(format!("class {c} embedding has dim {}, image {}", e.len(), image.len())));
        }
        let nc = norm(e);
        if nc == 0.0 || !nc.is_finite() {
            return Err(Error::InvalidArgument(format!("class {c} embedding has zero or non-finite norm")));
        }
        let dot: f64 = image.iter().zip(e).map(|(&a, &b)| a as f64 * b as f64).sum();
        let cos = dot / (ni * nc);
        if cos > best.1 {
            best = (c, cos);
        }
    }
    Ok(best.0)
}

/// `"a satellite photo of {class}."` with the class name lowercased.
pub fn expand_prompt(class: &str) -> Result<String> {
    let c = class.trim();
    if c.is_empty() {
        return Err(Error::InvalidArgument("empty class name".into()));
    }
    Ok(format!("a satellite photo of {}.", c.to_lowercase()))
}

/// Text embeddings of the expanded prompt of every class.
pub fn class_text_embeddings(model: &FlavarsModel, vocab: &Vocabulary, classes: &[String]) -> Result<Vec<Vec<f32>>> {
    let tokens = classes
        .iter()
        .map(|c| tokenize(&expand_prompt(c)?, vocab, model.config.text.max_len))
        .collect::<Result<Vec<_>>>()?;
    model.encode_texts(&tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: String,
    pub metric: String,
    pub value: f64,
    pub per_class: BTreeMap<String, f64>,
    pub split_fingerprint: String,
    pub config_fingerprint: String,
    /// Departure from the reference protocol, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<String>,
}

impl MetricReport {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = serde_json::to_vec_pretty(self)?;
        b.push(b'\n');
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    /// One row: protocol, metric, overall value (in percent), then per-class values.
    pub fn table_row(&self) -> String {
        let mut s = format!("| {:<8} | {:<8} | {:>6.2} |", self.protocol, self.metric, 100.0 * self.value);
        for (c, v) in &self.per_class {
            s.push_str(&format!(" {c}: {:.2} |", 100.0 * v));
        }
        s
    }
}

/// Overall accuracy plus per-class recall.
pub fn accuracy_report(predictions: &[usize], labels: &[usize], classes: &[String]) -> (f64, BTreeMap<String, f64>) {
    let mut hit = vec![0usize; classes.len()];
    let mut total = vec![0usize; classes.len()];
    for (&p, &l) in predictions.iter().zip(labels) {
        total[l] += 1;
        hit[l] += (p == l) as usize;
    }
    let per_class = classes
        .iter()
        .enumerate()
        .filter(|&(c, _)| total[c] > 0)
        .map(|(c, name)| (name.clone(), hit[c] as f64 / total[c] as f64))
        .collect();
    let n: usize = total.iter().sum();
    let overall = if n == 0 { 0.0 } else { hit.iter().sum::<usize>() as f64 / n as f64 };
    (overall, per_class)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Knn,
    Zeroshot,
    Seg,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Knn => "knn",
            Protocol::Zeroshot => "zeroshot",
            Protocol::Seg => "seg",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(Protocol::Knn),
            "zeroshot" => Ok(Protocol::Zeroshot),
            "seg" => Ok(Protocol::Seg),
            other => Err(Error::InvalidArgument(format!("unknown protocol {other}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub knn: KnnConfig,
    #[serde(default)]
    pub seg: SegProbeConfig,
}

/// Fits on the train ids and scores the test ids of `split`.
pub fn evaluate_split(
    protocol: Protocol,
    model: &FlavarsModel,
    vocab: &Vocabulary,
    dataset: &Dataset,
    split: &SplitSpec,
    config: &EvalConfig,
) -> Result<MetricReport> {
    let split_fingerprint = split.fingerprint()?;
    let config_fingerprint = model.config.fingerprint();
    let report = |metric: &str, value: f64, per_class, deviation: Option<String>| MetricReport {
        protocol: protocol.name().into(),
        metric: metric.into(),
        value,
        per_class,
        split_fingerprint: split_fingerprint.clone(),
        config_fingerprint: config_fingerprint.clone(),
        deviation,
    };
    match protocol {
        Protocol::Knn => {
            let classes = dataset_classes(dataset)?;
            let train = embed_dataset(model, dataset, &split.train, &classes)?;
            let test = embed_dataset(model, dataset, &split.test, &classes)?;
            let preds = par::map_range(test.len(), |i| knn_classify(&train, test.matrix.row(i), &config.knn));
            let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
            let (acc, per_class) = accuracy_report(&preds, &test.labels, &classes);
            Ok(report("accuracy", acc, per_class, None))
        }
        Protocol::Zeroshot => {
            let classes = dataset_classes(dataset)?;
            let test = embed_dataset(model, dataset, &split.test, &classes)?;
            let text = class_text_embeddings(model, vocab, &classes)?;
            let preds = (0..test.len())
                .map(|i| zero_shot_classify(test.matrix.row(i), &text))
                .collect::<Result<Vec<_>>>()?;
            let (acc, per_class) = accuracy_report(&preds, &test.labels, &classes);
            Ok(report("accuracy", acc, per_class, None))
        }
        Protocol::Seg => {
            let num_classes = dataset.manifest.mask_classes.len().max(2);
            let train = seg::load_seg_split(dataset, &split.train)?;
            let test = seg::load_seg_split(dataset, &split.test)?;
            let probe = train_seg_probe(model, &train.0, &train.1, num_classes, &config.seg)?;
            let preds = probe.predict(model, &test.0)?;
            let names: Vec<String> = (0..num_classes)
                .map(|c| dataset.manifest.mask_classes.get(c).cloned().unwrap_or_else(|| format!("class{c}")))
                .collect();
            let m = compute_miou(&preds, &test.1, num_classes)?;
            let per_class = m
                .per_class
                .iter()
                .enumerate()
                .filter_map(|(c, v)| v.map(|v| (names[c].clone(), v)))
                .collect();
            Ok(report("miou", m.miou, per_class, Some(seg::PROBE_DEVIATION.into())))
        }
    }
}
