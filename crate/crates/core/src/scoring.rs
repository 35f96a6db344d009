//! Dimension-wise discriminability scores and the private partition of the
//! feature space into a discriminative group `I_A` and the remainder `I_B`.
//!
//! The score of coordinate `j` is a one-way ANOVA F-ratio,
//! `S_j = [V_ter_j/(C−1)] / [V_tra_j/(n−C) + ζ]`, where `V_tra` sums
//! within-class squared deviations and `V_ter` sums class-size weighted
//! squared deviations of class means from the client mean. Scores are clipped
//! to `[0, H]` and a oneshot Laplace Top-k picks `d_A = ⌈ρd⌉` coordinates.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream, Scalar};
use crate::privacy::{calibrate_laplace_scale, laplace_topk};

/// Default `ζ` in the score denominator.
pub const DEFAULT_ZETA: f64 = 1e-6;
/// Default histogram resolution for the mutual-information diagnostic.
pub const DEFAULT_MI_BINS: usize = 16;

/// Per-class, per-coordinate moments of a client's embeddings.
#[derive(Debug, Clone)]
pub struct VarianceStats {
    /// Labels of the classes present, ascending.
    pub classes: Vec<usize>,
    pub counts: Vec<usize>,
    /// `C × d` class means.
    pub class_means: Matrix<f64>,
    /// `C × d` unbiased class variances (zero for singleton classes).
    pub class_vars: Matrix<f64>,
    pub client_mean: Vec<f64>,
    pub n: usize,
}

impl VarianceStats {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.client_mean.len()
    }

    /// `V_tra_j = Σ_c (n_c − 1) s²_{c,j}`.
    pub fn v_intra(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                self.counts
                    .iter()
                    .enumerate()
                    .map(|(c, &nc)| (nc as f64 - 1.0) * self.class_vars.get(c, j))
                    .sum()
            })
            .collect()
    }

    /// `V_ter_j = Σ_c n_c (μ_{c,j} − μ_j)²`.
    pub fn v_inter(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                self.counts
                    .iter()
                    .enumerate()
                    .map(|(c, &nc)| {
                        let diff = self.class_means.get(c, j) - self.client_mean[j];
                        nc as f64 * diff * diff
                    })
                    .sum()
            })
            .collect()
    }
}

pub fn variance_stats(features: &FeatureMatrix) -> Result<VarianceStats> {
    let n = features.len();
    let d = features.dim();
    let classes = features.present_classes();
    let c = classes.len();
    if n <= c {
        return Err(Error::invalid(format!(
            "variance statistics need more samples than classes (n={n}, C={c})"
        )));
    }
    let groups = features.indices_by_class();
    let mut counts = Vec::with_capacity(c);
    let mut means = Matrix::zeros(c, d);
    let mut vars = Matrix::zeros(c, d);
    for (ci, &label) in classes.iter().enumerate() {
        let idx = &groups[&label];
        let nc = idx.len();
        counts.push(nc);
        for j in 0..d {
            let mu = idx.iter().map(|&i| features.features.get(i, j)).sum::<f64>() / nc as f64;
            means.set(ci, j, mu);
            if nc > 1 {
                let ss: f64 = idx
                    .iter()
                    .map(|&i| {
                        let e = features.features.get(i, j) - mu;
                        e * e
                    })
                    .sum();
                vars.set(ci, j, ss / (nc as f64 - 1.0));
            }
        }
    }
    let client_mean = features.features.column_means();
    Ok(VarianceStats {
        classes,
        counts,
        class_means: means,
        class_vars: vars,
        client_mean,
        n,
    })
}

pub fn anova_scores(stats: &VarianceStats, zeta: f64) -> Result<Vec<f64>> {
    let c = stats.n_classes();
    if c < 2 {
        return Err(Error::invalid(format!("scores need at least two classes, got {c}")));
    }
    if stats.n <= c {
        return Err(Error::invalid("scores need n > C"));
    }
    if !(zeta > 0.0) {
        return Err(Error::invalid(format!("zeta must be positive, got {zeta}")));
    }
    let between_df = (c - 1) as f64;
    let within_df = (stats.n - c) as f64;
    Ok(stats
        .v_inter()
        .into_iter()
        .zip(stats.v_intra())
        .map(|(ter, tra)| (ter / between_df) / (tra / within_df + zeta))
        .collect())
}

/// `clip(S_j, 0, H)`.
pub fn clip_scores<T: Scalar>(scores: &[T], cap: T) -> Vec<T> {
    scores.iter().map(|&s| s.max(T::zero()).min(cap)).collect()
}

/// Ordered split of `{0..d−1}` into the selected group `I_A` and the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionMask {
    d: usize,
    rho: f64,
    selected: Vec<usize>,
    rest: Vec<usize>,
    #[serde(skip)]
    membership: Vec<bool>,
}

impl PartitionMask {
    /// `⌈ρd⌉`, guarded against representation error in `ρd`.
    pub fn d_a_for(d: usize, rho: f64) -> usize {
        let raw = rho * d as f64;
        let rounded = raw.round();
        let k = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
        (k as usize).min(d)
    }

    pub fn new(d: usize, rho: f64, mut selected: Vec<usize>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("partition over zero dimensions"));
        }
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::invalid(format!("rho must lie in (0,1), got {rho}")));
        }
        let d_a = Self::d_a_for(d, rho);
        selected.sort_unstable();
        selected.dedup();
        if selected.len() != d_a {
            return Err(Error::invalid(format!(
                "selected set has {} indices, expected ceil(rho*d) = {d_a}",
                selected.len()
            )));
        }
        if selected.iter().any(|&i| i >= d) {
            return Err(Error::invalid("selected index out of range"));
        }
        let mut membership = vec![false; d];
        for &i in &selected {
            membership[i] = true;
        }
        let rest = (0..d).filter(|&i| !membership[i]).collect();
        Ok(Self {
            d,
            rho,
            selected,
            rest,
            membership,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn rest(&self) -> &[usize] {
        &self.rest
    }

    pub fn d_a(&self) -> usize {
        self.selected.len()
    }

    pub fn d_b(&self) -> usize {
        self.rest.len()
    }

    pub fn kappa_a(&self) -> f64 {
        (self.d_a() as f64 / self.d as f64).sqrt()
    }

    pub fn kappa_b(&self) -> f64 {
        (self.d_b() as f64 / self.d as f64).sqrt()
    }

    pub fn is_selected(&self, j: usize) -> bool {
        if self.membership.len() == self.d {
            self.membership[j]
        } else {
            self.selected.binary_search(&j).is_ok()
        }
    }

    /// `(z_A, z_B)`.
    pub fn split<T: Scalar>(&self, z: &[T]) -> (Vec<T>, Vec<T>) {
        (
            self.selected.iter().map(|&i| z[i]).collect(),
            self.rest.iter().map(|&i| z[i]).collect(),
        )
    }

    /// Inverse of [`split`](Self::split).
    pub fn merge<T: Scalar>(&self, a: &[T], b: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.d];
        for (&i, &v) in self.selected.iter().zip(a) {
            out[i] = v;
        }
        for (&i, &v) in self.rest.iter().zip(b) {
            out[i] = v;
        }
        out
    }
}

/// Score → clip → oneshot Laplace Top-⌈ρd⌉ with `λ = 2d_A·H·T/ε₁`.
///
/// `eps1 = ∞` gives the noiseless selection.
pub fn private_partition(
    features: &FeatureMatrix,
    rho: f64,
    score_cap: f64,
    eps1: f64,
    rounds: usize,
    rng: &mut RngStream,
) -> Result<PartitionMask> {
    if rho > 0.5 {
        warn!("rho = {rho} > 0.5: selected subspace will be noisier than the isotropic reference");
    }
    let d = features.dim();
    let d_a = PartitionMask::d_a_for(d, rho);
    let lambda = calibrate_laplace_scale(d_a, score_cap, rounds, eps1)?;
    let stats = variance_stats(features)?;
    let scores = anova_scores(&stats, DEFAULT_ZETA)?;
    partition_scores(&scores, rho, score_cap, lambda, rng)
}

/// Clip raw scores and select with an explicit Laplace scale.
pub fn partition_scores(
    scores: &[f64],
    rho: f64,
    score_cap: f64,
    lambda: f64,
    rng: &mut RngStream,
) -> Result<PartitionMask> {
    let d = scores.len();
    let d_a = PartitionMask::d_a_for(d, rho);
    let clipped = clip_scores(scores, score_cap);
    let selected = laplace_topk(&clipped, d_a, lambda, rng)?;
    PartitionMask::new(d, rho, selected)
}

/// Plug-in mutual information (nats) between an equal-width histogram of
/// `column` and the labels.
pub fn mutual_information(column: &[f64], labels: &[usize], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::invalid("mutual information needs at least two bins"));
    }
    if column.len() != labels.len() {
        return Err(Error::invalid("feature column and labels differ in length"));
    }
    let n = column.len();
    if n == 0 {
        return Ok(0.0);
    }
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(0.0);
    }
    let n_labels = labels.iter().copied().max().unwrap_or(0) + 1;
    let width = (hi - lo) / bins as f64;
    let mut joint = vec![0usize; bins * n_labels];
    for (&x, &y) in column.iter().zip(labels) {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        joint[b * n_labels + y] += 1;
    }
    let mut p_bin = vec![0usize; bins];
    let mut p_lab = vec![0usize; n_labels];
    for b in 0..bins {
        for y in 0..n_labels {
            let c = joint[b * n_labels + y];
            p_bin[b] += c;
            p_lab[y] += c;
        }
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for b in 0..bins {
        for y in 0..n_labels {
            let c = joint[b * n_labels + y];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / nf;
            let px = p_bin[b] as f64 / nf;
            let py = p_lab[y] as f64 / nf;
            mi += pxy * (pxy / (px * py)).ln();
        }
    }
    Ok(mi.max(0.0))
}

/// One row of the score / MI diagnostic dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreDiagnostic {
    pub coord: usize,
    pub score: f64,
    pub mutual_information: f64,
    pub selected: bool,
}

pub fn score_diagnostics(
    features: &FeatureMatrix,
    mask: Option<&PartitionMask>,
    bins: usize,
) -> Result<Vec<ScoreDiagnostic>> {
    let stats = variance_stats(features)?;
    let scores = anova_scores(&stats, DEFAULT_ZETA)?;
    scores
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            Ok(ScoreDiagnostic {
                coord: j,
                score: s,
                mutual_information: mutual_information(&features.features.column(j), &features.labels, bins)?,
                selected: mask.is_some_and(|m| m.is_selected(j)),
            })
        })
        .collect()
}

pub fn diagnostics_csv(rows: &[ScoreDiagnostic]) -> String {
    let mut out = String::from("coord,score,mutual_information,selected\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{}\n",
            r.coord, r.score, r.mutual_information, r.selected as u8
        ));
    }
    out
}
