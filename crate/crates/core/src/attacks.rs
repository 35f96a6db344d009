//! Empirical privacy attacks run by an honest-but-curious server against the
//! uploaded prototypes: distance-based membership inference and feature-space
//! hijacking (input reconstruction toward a target prototype).

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::localtrain::{hard_clip_vjp, AdamW, ClientModel, TrainConfig};
use crate::numerics::{cosine_similarity, mean, ranks, sq_dist, std_pop, Matrix, RngStream};
use crate::prototypes::{hard_clip, PrototypeSet};

/// Samples per class and side used by membership inference.
pub const MIA_CAP_PER_CLASS: usize = 800;

/// Differentiable map from inputs to the released feature space.
pub trait Encoder {
    fn input_dim(&self) -> usize;
    fn encode(&self, x: &[f64]) -> Vec<f64>;
    /// Gradient of `⟨encode(x), v⟩` with respect to `x`.
    fn vjp(&self, x: &[f64], v: &[f64]) -> Vec<f64>;
}

/// `W x + b`; used as a white-box test encoder.
#[derive(Debug, Clone)]
pub struct LinearEncoder {
    pub weight: Matrix<f64>,
    pub bias: Vec<f64>,
}

impl Encoder for LinearEncoder {
    fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.weight.matvec(x).iter().zip(&self.bias).map(|(a, b)| a + b).collect()
    }

    fn vjp(&self, _x: &[f64], v: &[f64]) -> Vec<f64> {
        self.weight.matvec_t(v)
    }
}

/// A client's encoder followed by hard clipping at `R`. The attacker does not
/// know the private partition, so groupwise clipping is not modelled.
pub struct VictimEncoder<'a> {
    pub model: &'a ClientModel,
    pub cfg: &'a TrainConfig,
}

impl Encoder for VictimEncoder<'_> {
    fn input_dim(&self) -> usize {
        self.model.shape().input_dim
    }

    fn encode(&self, x: &[f64]) -> Vec<f64> {
        let f = self.model.feature_hidden(&self.model.hidden(x), self.cfg);
        hard_clip(&f, self.cfg.radius)
    }

    fn vjp(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let f = self.model.feature_hidden(&self.model.hidden(x), self.cfg);
        let g = hard_clip_vjp(&f, self.cfg.radius, v);
        self.model.feature_input_vjp(x, self.cfg, &g)
    }
}

// ---------------------------------------------------------------------------
// Membership inference
// ---------------------------------------------------------------------------

/// `−‖φ(x) − p̃‖²` per row.
pub fn mia_scores(features: &Matrix<f64>, proto: &[f64]) -> Result<Vec<f64>> {
    if features.cols() != proto.len() {
        return Err(Error::invalid(format!(
            "features have dimension {} but prototype has {}",
            features.cols(),
            proto.len()
        )));
    }
    Ok(features.iter_rows().map(|r| -sq_dist(r, proto)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiaMetrics {
    pub roc_auc: f64,
    pub tpr_at_1pct_fpr: f64,
    pub advantage: f64,
    pub f1: f64,
}

/// `(fpr, tpr)` points for thresholds at every distinct score, from the
/// strictest (nothing flagged) to the loosest (everything flagged).
pub fn roc_curve(members: &[f64], nonmembers: &[f64]) -> Vec<(f64, f64)> {
    sweep(members, nonmembers)
        .into_iter()
        .map(|(tp, fp)| (fp as f64 / nonmembers.len() as f64, tp as f64 / members.len() as f64))
        .collect()
}

/// Cumulative `(true positives, false positives)` when flagging every score
/// `≥ t`, for `t` running down the distinct scores.
fn sweep(members: &[f64], nonmembers: &[f64]) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![(0, 0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

/// Trapezoid area under a ROC curve.
pub fn trapezoid_auc(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Rank-statistic AUC; F1-maximizing threshold for advantage and F1.
pub fn mia_metrics(members: &[f64], nonmembers: &[f64]) -> Result<MiaMetrics> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::invalid("membership inference needs members and non-members"));
    }
    if members.iter().chain(nonmembers).any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite membership score"));
    }
    let (nm, nn) = (members.len() as f64, nonmembers.len() as f64);
    let joint: Vec<f64> = members.iter().chain(nonmembers).copied().collect();
    let r = ranks(&joint);
    let rank_sum: f64 = r[..members.len()].iter().sum();
    let roc_auc = (rank_sum - nm * (nm + 1.0) / 2.0) / (nm * nn);

    let points = sweep(members, nonmembers);
    let mut tpr_at_1pct_fpr = 0.0;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &(tp, fp) in &points {
        let tpr = tp as f64 / nm;
        let fpr = fp as f64 / nn;
        if fpr <= 0.01 {
            tpr_at_1pct_fpr = f64::max(tpr_at_1pct_fpr, tpr);
        }
        if tp + fp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let f1 = if tp == 0 { 0.0 } else { 2.0 * precision * tpr / (precision + tpr) };
        if f1 > best.0 {
            best = (f1, tpr - fpr);
        }
    }
    Ok(MiaMetrics {
        roc_auc,
        tpr_at_1pct_fpr,
        advantage: best.1,
        f1: best.0,
    })
}

/// Per-class attack against each class's released prototype, pooled over
/// classes. Member and non-member sets are balanced per class and capped.
pub fn mia_evaluate(
    encoder: &dyn Encoder,
    released: &PrototypeSet,
    members: &FeatureMatrix,
    nonmembers: &FeatureMatrix,
    cap: usize,
) -> Result<MiaMetrics> {
    let mem = members.indices_by_class();
    let non = nonmembers.indices_by_class();
    let (mut ms, mut ns) = (Vec::new(), Vec::new());
    for class in released.classes() {
        let (Some(mi), Some(ni)) = (mem.get(&class), non.get(&class)) else {
            continue;
        };
        let k = mi.len().min(ni.len()).min(cap);
        for (idx, src, out) in [(mi, members, &mut ms), (ni, nonmembers, &mut ns)] {
            for &i in &idx[..k] {
                let f = encoder.encode(src.row(i));
                let p = released
                    .nearest_in_class(class, &f)
                    .expect("class taken from the released set");
                out.push(-sq_dist(&f, &p.vector));
            }
        }
    }
    mia_metrics(&ms, &ns)
}

// ---------------------------------------------------------------------------
// Feature-space hijacking
// ---------------------------------------------------------------------------

/// `Σ |x_{i+1} − x_i|`.
pub fn total_variation(x: &[f64]) -> f64 {
    x.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

fn total_variation_grad(x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len().saturating_sub(1) {
        let s = (x[i + 1] - x[i]).signum() * f64::from(x[i + 1] != x[i]);
        g[i + 1] += s;
        g[i] -= s;
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FshConfig {
    pub tv_weight: f64,
    pub max_steps: usize,
    pub lr: f64,
    pub patience: usize,
    pub tolerance: f64,
    pub batch: usize,
    pub max_classes: usize,
}

impl Default for FshConfig {
    fn default() -> Self {
        Self {
            tv_weight: 1e-3,
            max_steps: 2000,
            lr: 0.01,
            patience: 300,
            tolerance: 1e-6,
            batch: 16,
            max_classes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FshResult {
    pub inputs: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    /// Batch-mean objective at the end.
    pub final_loss: f64,
    pub steps: usize,
}

/// Minimize `‖φ(x) − p*‖² + λ_TV TV(x)` over `x = (tanh w + 1)/2` for a batch
/// of random starts, with Adam and early stopping on the batch-mean loss.
pub fn fsh_attack(target: &[f64], encoder: &dyn Encoder, cfg: &FshConfig, rng: &mut RngStream) -> Result<FshResult> {
    if cfg.batch == 0 || cfg.max_steps == 0 {
        return Err(Error::invalid("attack needs a positive batch and step count"));
    }
    let p = encoder.input_dim();
    let b = cfg.batch;
    let mut w: Vec<f64> = (0..b * p).map(|_| rng.gaussian()).collect();
    let mut opt = AdamW::new(w.len());
    let objective = |w: &[f64], grad: Option<&mut Vec<f64>>| -> f64 {
        let mut total = 0.0;
        let mut gbuf = grad;
        for k in 0..b {
            let wk = &w[k * p..(k + 1) * p];
            let x: Vec<f64> = wk.iter().map(|v| (v.tanh() + 1.0) / 2.0).collect();
            let f = encoder.encode(&x);
            let diff: Vec<f64> = f.iter().zip(target).map(|(a, t)| a - t).collect();
            total += diff.iter().map(|d| d * d).sum::<f64>() + cfg.tv_weight * total_variation(&x);
            if let Some(g) = gbuf.as_deref_mut() {
                let two: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
                let gx = encoder.vjp(&x, &two);
                let gtv = total_variation_grad(&x);
                for i in 0..p {
                    let t = wk[i].tanh();
                    g[k * p + i] = (gx[i] + cfg.tv_weight * gtv[i]) * (1.0 - t * t) / 2.0 / b as f64;
                }
            }
        }
        total / b as f64
    };
    let mut grad = vec![0.0; w.len()];
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut steps = 0;
    let mut loss = f64::NAN;
    while steps < cfg.max_steps {
        loss = objective(&w, Some(&mut grad));
        if !loss.is_finite() {
            return Err(Error::runtime(format!("reconstruction diverged at step {steps}")));
        }
        if best - loss > cfg.tolerance {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
        opt.step(&mut w, &grad, cfg.lr, 0.0, 0.9, 0.999, 1e-8)?;
        steps += 1;
    }
    if steps == cfg.max_steps {
        loss = objective(&w, None);
    }
    let inputs: Vec<Vec<f64>> = w
        .chunks(p)
        .map(|wk| wk.iter().map(|v| (v.tanh() + 1.0) / 2.0).collect())
        .collect();
    let features = inputs.iter().map(|x| encoder.encode(x)).collect();
    Ok(FshResult {
        inputs,
        features,
        final_loss: loss,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FshMetrics {
    /// Mean cosine between reconstructed features and the clean prototype of
    /// the attacked class.
    pub cosine_similarity: f64,
    /// Mean cosine to the (possibly noisy) prototype that was targeted.
    pub cosine_to_target: f64,
    pub cffd: f64,
    pub top1_hit_pct: f64,
}

/// Reconstructed features for one attacked class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReconstruction {
    pub class: usize,
    pub target: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

fn diag_moments(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mu = vec![0.0; d];
    for r in rows {
        for (m, v) in mu.iter_mut().zip(*r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    if rows.len() >= 2 {
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(*r).zip(&mu) {
                *s += (v - m) * (v - m) / (n - 1.0);
            }
        }
    } else {
        warn!("single sample: covariance taken as zero");
    }
    (mu, var)
}

/// Fréchet distance between diagonal Gaussian fits:
/// `‖μ₁−μ₂‖² + Σ_j (√s₁ⱼ − √s₂ⱼ)²`.
pub fn cffd(a: &[&[f64]], b: &[&[f64]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Fréchet distance needs non-empty sets"));
    }
    if a[0].len() != b[0].len() {
        return Err(Error::invalid("Fréchet distance over different dimensions"));
    }
    let (m1, v1) = diag_moments(a);
    let (m2, v2) = diag_moments(b);
    let trace: f64 = v1.iter().zip(&v2).map(|(x, y)| x + y - 2.0 * (x * y).sqrt()).sum();
    Ok(sq_dist(&m1, &m2) + trace.max(0.0))
}

/// Cosine, cFFD and Top-1 hit rate against the clean class features.
pub fn fsh_metrics(recs: &[ClassReconstruction], clean: &FeatureMatrix) -> Result<FshMetrics> {
    if recs.is_empty() || recs.iter().any(|r| r.features.is_empty()) {
        return Err(Error::invalid("no reconstructions to score"));
    }
    let by_class = clean.indices_by_class();
    let protos: BTreeMap<usize, Vec<f64>> = by_class
        .iter()
        .map(|(&c, idx)| (c, clean.features.select_rows(idx).column_means()))
        .collect();
    let (mut cos, mut cos_t, mut hits, mut n) = (0.0, 0.0, 0usize, 0usize);
    let mut fds = Vec::with_capacity(recs.len());
    for r in recs {
        let Some(p) = protos.get(&r.class) else {
            return Err(Error::invalid(format!("class {} has no clean features", r.class)));
        };
        for f in &r.features {
            cos += cosine_similarity(f, p);
            cos_t += cosine_similarity(f, &r.target);
            let nearest = protos
                .iter()
                .min_by(|a, b| sq_dist(f, a.1).partial_cmp(&sq_dist(f, b.1)).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(&c, _)| c);
            hits += usize::from(nearest == Some(r.class));
            n += 1;
        }
        let real: Vec<&[f64]> = by_class[&r.class].iter().map(|&i| clean.row(i)).collect();
        let rec: Vec<&[f64]> = r.features.iter().map(|v| v.as_slice()).collect();
        fds.push(cffd(&rec, &real)?);
    }
    Ok(FshMetrics {
        cosine_similarity: cos / n as f64,
        cosine_to_target: cos_t / n as f64,
        cffd: mean(&fds),
        top1_hit_pct: 100.0 * hits as f64 / n as f64,
    })
}

/// Attack up to `cfg.max_classes` released classes (first prototype each).
pub fn fsh_evaluate(
    encoder: &dyn Encoder,
    released: &PrototypeSet,
    clean: &FeatureMatrix,
    cfg: &FshConfig,
    rng: &mut RngStream,
) -> Result<FshMetrics> {
    let mut recs = Vec::new();
    for class in released.classes().into_iter().take(cfg.max_classes) {
        let target = released.first_for_class(class).expect("class from released set").vector.clone();
        let res = fsh_attack(&target, encoder, cfg, rng)?;
        recs.push(ClassReconstruction {
            class,
            target,
            features: res.features,
        });
    }
    fsh_metrics(&recs, clean)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Attack results against one client's upload in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub round: usize,
    pub client: usize,
    pub mia: Option<MiaMetrics>,
    pub fsh: Option<FshMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        (!xs.is_empty()).then(|| Self {
            mean: mean(xs),
            std: std_pop(xs),
            n: xs.len(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub records: Vec<AttackRecord>,
}

pub const ATTACK_METRICS: [&str; 8] = [
    "mia_roc_auc",
    "mia_tpr_at_1pct_fpr",
    "mia_advantage",
    "mia_f1",
    "fsh_cosine_similarity",
    "fsh_cosine_to_target",
    "fsh_cffd",
    "fsh_top1_hit_pct",
];

impl AttackReport {
    pub fn push(&mut self, r: AttackRecord) {
        self.records.push(r);
    }

    fn values(&self, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match metric {
                "mia_roc_auc" => r.mia.map(|m| m.roc_auc),
                "mia_tpr_at_1pct_fpr" => r.mia.map(|m| m.tpr_at_1pct_fpr),
                "mia_advantage" => r.mia.map(|m| m.advantage),
                "mia_f1" => r.mia.map(|m| m.f1),
                "fsh_cosine_similarity" => r.fsh.map(|m| m.cosine_similarity),
                "fsh_cosine_to_target" => r.fsh.map(|m| m.cosine_to_target),
                "fsh_cffd" => r.fsh.map(|m| m.cffd),
                "fsh_top1_hit_pct" => r.fsh.map(|m| m.top1_hit_pct),
                _ => None,
            })
            .collect()
    }

    /// Mean ± std over all (round, client) records, metrics without data omitted.
    pub fn aggregate(&self) -> BTreeMap<String, MeanStd> {
        ATTACK_METRICS
            .iter()
            .filter_map(|&m| MeanStd::of(&self.values(m)).map(|s| (m.to_string(), s)))
            .collect()
    }

    pub const CSV_HEADER: &'static str = "mechanism,epsilon,metric,mean,std";

    /// One row per metric: `mechanism,epsilon,metric,mean,std`.
    pub fn csv_rows(&self, mechanism: &str, epsilon: f64) -> Vec<String> {
        self.aggregate()
            .into_iter()
            .map(|(m, s)| format!("{mechanism},{epsilon:?},{m},{:?},{:?}", s.mean, s.std))
            .collect()
    }
}
