//! Pretraining losses and their weighted combination.
//!
//! Graph-building functions (`*_loss`) are used by training; the `*_value`
//! helpers evaluate the same code path on plain tensors.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::params::ParamStore;
use crate::par;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_mim: f64,
    pub w_mlm: f64,
    pub w_itm: f64,
    pub w_contrastive_it: f64,
    pub w_contrastive_il: f64,
    /// Optional text-location alignment term; off unless set.
    #[serde(default)]
    pub w_contrastive_tl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_mim: 1.0,
            w_mlm: 1.0,
            w_itm: 1.0,
            w_contrastive_it: 1.0,
            w_contrastive_il: 1.0,
            w_contrastive_tl: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be a finite value >= 0")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("w_mim", self.w_mim),
            ("w_mlm", self.w_mlm),
            ("w_itm", self.w_itm),
            ("w_contrastive_it", self.w_contrastive_it),
            ("w_contrastive_il", self.w_contrastive_il),
            ("w_contrastive_tl", self.w_contrastive_tl),
        ]
    }

    /// Only the given component weighted 1, everything else 0.
    pub fn only(component: &str) -> Result<Self> {
        let mut w = Self {
            w_mim: 0.0,
            w_mlm: 0.0,
            w_itm: 0.0,
            w_contrastive_it: 0.0,
            w_contrastive_il: 0.0,
            w_contrastive_tl: 0.0,
        };
        match component {
            "mim" => w.w_mim = 1.0,
            "mlm" => w.w_mlm = 1.0,
            "itm" => w.w_itm = 1.0,
            "contrastive_it" => w.w_contrastive_it = 1.0,
            "contrastive_il" => w.w_contrastive_il = 1.0,
            "contrastive_tl" => w.w_contrastive_tl = 1.0,
            other => return Err(Error::InvalidArgument(format!("unknown loss component {other}"))),
        }
        Ok(w)
    }
}

/// Learnable temperature shared by the contrastive losses: `τ = clamp(exp(log_tau))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureConfig {
    pub init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self {
            init: 0.07,
            tau_min: 0.01,
            tau_max: 1.0,
        }
    }
}

impl TemperatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= self.init && self.init <= self.tau_max) {
            return Err(Error::Config(format!(
                "temperature needs 0 < tau_min <= init <= tau_max, got {} / {} / {}",
                self.tau_min, self.init, self.tau_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mim: f64,
    pub mlm: f64,
    pub itm: f64,
    pub contrastive_it: f64,
    pub contrastive_il: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrastive_tl: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("mim", self.mim),
            ("mlm", self.mlm),
            ("itm", self.itm),
            ("contrastive_it", self.contrastive_it),
            ("contrastive_il", self.contrastive_il),
        ]
    }
}

/// `Σ wᵢ · componentᵢ`; a non-finite component is reported by name.
pub fn total_loss(breakdown: &LossBreakdown, weights: &LossWeights) -> Result<f64> {
    let tl = breakdown.contrastive_tl.unwrap_or(0.0);
    let parts = [
        ("mim", breakdown.mim, weights.w_mim),
        ("mlm", breakdown.mlm, weights.w_mlm),
        ("itm", breakdown.itm, weights.w_itm),
        ("contrastive_it", breakdown.contrastive_it, weights.w_contrastive_it),
        ("contrastive_il", breakdown.contrastive_il, weights.w_contrastive_il),
        ("contrastive_tl", tl, weights.w_contrastive_tl),
    ];
    let mut total = 0.0;
    for (name, v, w) in parts {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: name.into(),
            });
        }
        total += w * v;
    }
    Ok(total)
}

/// Symmetric InfoNCE between matched rows of `a` and `b` (both unit rows).
pub fn contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    b: Var,
    log_tau: Var,
    temperature: &TemperatureConfig,
) -> Result<Var> {
    let (n, d) = g.shape(a);
    if g.shape(b) != (n, d) {
        return Err(Error::Shape(format!(
            "contrastive inputs {:?} vs {:?}",
            (n, d),
            g.shape(b)
        )));
    }
    if n < 2 {
        return Err(Error::InvalidBatch(format!(
            "contrastive loss needs at least 2 pairs, got {n}"
        )));
    }
    if !g.value(a).all_finite() || !g.value(b).all_finite() {
        return Err(Error::InvalidArgument("non-finite contrastive input".into()));
    }
    let logits = g.matmul_nt(a, b);
    let scaled = g.inv_temperature(logits, log_tau, temperature.tau_min, temperature.tau_max);
    let targets: Vec<usize> = (0..n).collect();
    let a_to_b = g.cross_entropy(scaled, &targets)?;
    let transposed = g.transpose(scaled);
    let b_to_a = g.cross_entropy(transposed, &targets)?;
    Ok(g.weighted_sum(&[(a_to_b, 0.5), (b_to_a, 0.5)]))
}

/// [`contrastive_loss`] on plain tensors at a fixed temperature.
pub fn contrastive_loss_value(a: &Tensor<f64>, b: &Tensor<f64>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let store = ParamStore::new();
    let mut g = Graph::frozen(&store);
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let lt = g.constant(Tensor::scalar(tau.ln()));
    let cfg = TemperatureConfig {
        init: tau,
        tau_min: f64::MIN_POSITIVE,
        tau_max: f64::MAX,
    };
    let l = contrastive_loss(&mut g, av, bv, lt, &cfg)?;
    Ok(g.value(l).item())
}

fn masked_cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    plan: &MaskPlan,
    what: &str,
) -> Result<Var> {
    let rows = g.shape(logits).0;
    if rows != plan.len() || targets.len() != plan.len() {
        return Err(Error::Shape(format!(
            "{what}: {rows} logit rows and {} targets for {} masked positions",
            targets.len(),
            plan.len()
        )));
    }
    g.cross_entropy(logits, targets)
}

/// Mean cross-entropy over masked patches; rows of `code_logits` follow `plan`.
pub fn mim_loss<T: Scalar>(g: &mut Graph<T>, code_logits: Var, target_codes: &[usize], plan: &MaskPlan) -> Result<Var> {
    masked_cross_entropy(g, code_logits, target_codes, plan, "mim")
}

/// Mean cross-entropy over masked tokens; rows of `token_logits` follow `plan`.
pub fn mlm_loss<T: Scalar>(g: &mut Graph<T>, token_logits: Var, target_ids: &[usize], plan: &MaskPlan) -> Result<Var> {
    masked_cross_entropy(g, token_logits, target_ids, plan, "mlm")
}

/// Two-class cross-entropy; label 1 means matched, 0 mismatched.
pub fn itm_loss<T: Scalar>(g: &mut Graph<T>, match_logits: Var, labels: &[bool]) -> Result<Var> {
    let (n, c) = g.shape(match_logits);
    if n == 0 {
        return Err(Error::InvalidBatch("image-text matching needs a non-empty batch".into()));
    }
    if c != 2 || labels.len() != n {
        return Err(Error::Shape(format!(
            "itm logits {:?} with {} labels",
            (n, c),
            labels.len()
        )));
    }
    let targets: Vec<usize> = labels.iter().map(|&m| m as usize).collect();
    g.cross_entropy(match_logits, &targets)
}

fn eval_scalar(build: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::frozen(&store);
    let v = build(&mut g)?;
    Ok(g.value(v).item())
}

pub fn mim_loss_value(code_logits: &Tensor<f64>, target_codes: &[usize], plan: &MaskPlan) -> Result<f64> {
    eval_scalar(|g| {
        let l = g.constant(code_logits.clone());
        mim_loss(g, l, target_codes, plan)
    })
}

pub fn mlm_loss_value(token_logits: &Tensor<f64>, target_ids: &[usize], plan: &MaskPlan) -> Result<f64> {
    eval_scalar(|g| {
        let l = g.constant(token_logits.clone());
        mlm_loss(g, l, target_ids, plan)
    })
}

pub fn itm_loss_value(match_logits: &Tensor<f64>, labels: &[bool]) -> Result<f64> {
    eval_scalar(|g| {
        let l = g.constant(match_logits.clone());
        itm_loss(g, l, labels)
    })
}

/// k-means centroids over raw patch pixels; discrete targets for masked image modelling.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchCodebook {
    centroids: Tensor<f32>,
}

pub const KMEANS_MAX_ITERS: usize = 50;

impl PatchCodebook {
    pub fn from_centroids(centroids: Tensor<f32>) -> Result<Self> {
        if centroids.rows() == 0 || !centroids.all_finite() {
            return Err(Error::InvalidArgument("codebook needs at least one finite centroid".into()));
        }
        Ok(Self { centroids })
    }

    pub fn centroids(&self) -> &Tensor<f32> {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.centroids.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn nearest(point: &[f32], centroids: &Tensor<f32>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ initialisation then Lloyd iterations (at most [`KMEANS_MAX_ITERS`]).
/// Empty clusters keep their previous centroid.
pub fn fit_patch_codebook(patches: &Tensor<f32>, k: usize, rng: &mut Rng) -> Result<PatchCodebook> {
    let m = patches.rows();
    if k == 0 || m < k {
        return Err(Error::InvalidArgument(format!(
            "cannot fit {k} codes from {m} patches"
        )));
    }
    let dim = patches.cols();
    let mut centroids = Tensor::<f32>::zeros(k, dim);
    let first = rng.random_range(0..m);
    centroids.row_mut(0).copy_from_slice(patches.row(first));
    let mut d2: Vec<f64> = par::map_range(m, |i| sq_dist(patches.row(i), centroids.row(0)));
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..m)
        };
        centroids.row_mut(c).copy_from_slice(patches.row(pick));
        let row = centroids.row(c).to_vec();
        let updated: Vec<f64> = par::map_range(m, |i| d2[i].min(sq_dist(patches.row(i), &row)));
        d2 = updated;
    }
    let mut assign = vec![usize::MAX; m];
    for _ in 0..KMEANS_MAX_ITERS {
        let next: Vec<usize> = par::map_range(m, |i| nearest(patches.row(i), &centroids).0);
        if next == assign {
            break;
        }
        assign = next;
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(patches.row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (o, &s) in centroids.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *o = (s * inv) as f32;
            }
        }
    }
    PatchCodebook::from_centroids(centroids)
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn quantize_patch(patch: &[f32], codebook: &PatchCodebook) -> Result<usize> {
    if patch.len() != codebook.dim() {
        return Err(Error::Shape(format!(
            "patch of dim {} against codebook of dim {}",
            patch.len(),
            codebook.dim()
        )));
    }
    Ok(nearest(patch, &codebook.centroids).0)
}
