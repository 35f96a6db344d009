//! Synthetic federated data.
//!
//! Domain skew: every client sees the same class geometry (shared base means)
//! pushed through its own orthogonal rotation, translation and noise level.
//! Label skew: a shared pool is split across clients with class proportions
//! drawn from a Dirichlet distribution, one draw per class over clients.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, sq_dist, Matrix, RngStream};

/// Labelled embeddings or inputs, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub features: Matrix<f64>,
    pub labels: Vec<usize>,
}

impl FeatureMatrix {
    pub fn new(features: Matrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn present_classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            out.entry(y).or_default().push(i);
        }
        out
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows of one class as a matrix.
    pub fn class_rows(&self, label: usize) -> Matrix<f64> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == label).collect();
        self.features.select_rows(&idx)
    }

    /// Same labels, features replaced row by row.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = self.features.iter_rows().map(&mut f).collect();
        let features = if rows.is_empty() {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_rows(&rows)?
        };
        Self::new(features, self.labels.clone())
    }

    /// `label,x0,x1,...` with a header row; floats round-trip exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for j in 0..self.dim() {
            let _ = write!(out, ",x{j}");
        }
        out.push('\n');
        for (i, &y) in self.labels.iter().enumerate() {
            let _ = write!(out, "{y}");
            for v in self.row(i) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::invalid("empty csv"))?;
        let d = header.split(',').count().saturating_sub(1);
        let mut labels = Vec::new();
        let mut data = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let y = fields
                .next()
                .and_then(|s| s.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::invalid(format!("bad label on data line {}", ln + 1)))?;
            let row: Vec<f64> = fields
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid(format!("bad value on data line {}: {e}", ln + 1)))?;
            if row.len() != d {
                return Err(Error::invalid(format!("data line {} has {} values, expected {d}", ln + 1, row.len())));
            }
            labels.push(y);
            data.extend(row);
        }
        Self::new(Matrix::new(labels.len(), d, data)?, labels)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Train and held-out data of one client.
#[derive(Debug, Clone)]
pub struct ClientSplit {
    pub train: FeatureMatrix,
    pub test: FeatureMatrix,
}

/// Random orthogonal matrix via Gram–Schmidt on a Gaussian draw.
pub fn random_orthogonal(n: usize, rng: &mut RngStream) -> Matrix<f64> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        for _ in 0..2 {
            for u in &q {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(vi, &ui)| *vi -= p * ui);
            }
        }
        let nv = norm2(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nv);
            q.push(v);
        }
    }
    Matrix::from_rows(&q).expect("square orthogonal matrix")
}

/// Generative description of one client's domain.
#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub n_classes: usize,
    pub input_dim: usize,
    /// Shared `C × input_dim` class means before the domain transform.
    pub base_means: Matrix<f64>,
    /// Orthogonal `input_dim × input_dim` rotation.
    pub rotation: Matrix<f64>,
    pub shift: Vec<f64>,
    /// Within-class isotropic standard deviation in this domain.
    pub noise_scale: f64,
    /// Data offset so inputs sit around the middle of `[0, 1]`.
    pub center: f64,
    /// Global scale applied after the transform.
    pub input_scale: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl DomainSpec {
    /// Smallest pairwise distance between base means.
    pub fn min_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for a in 0..self.n_classes {
            for b in a + 1..self.n_classes {
                m = m.min(sq_dist(self.base_means.row(a), self.base_means.row(b)).sqrt());
            }
        }
        m
    }

    fn sample(&self, label: usize, rng: &mut RngStream) -> Vec<f64> {
        let raw: Vec<f64> = self
            .base_means
            .row(label)
            .iter()
            .map(|&m| m + self.noise_scale * rng.gaussian())
            .collect();
        self.rotation
            .matvec(&raw)
            .into_iter()
            .zip(&self.shift)
            .map(|(v, &s)| self.center + self.input_scale * (v + s))
            .collect()
    }

    fn draw(&self, per_class: usize, rng: &mut RngStream) -> Result<FeatureMatrix> {
        let mut rows = Vec::with_capacity(per_class * self.n_classes);
        let mut labels = Vec::with_capacity(per_class * self.n_classes);
        for _ in 0..per_class {
            for c in 0..self.n_classes {
                rows.push(self.sample(c, rng));
                labels.push(c);
            }
        }
        FeatureMatrix::new(Matrix::from_rows(&rows)?, labels)
    }
}

/// Knobs for a family of domain-skewed clients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSkewConfig {
    pub n_clients: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    /// Dimension of the subspace holding the class means.
    pub signal_dim: usize,
    /// Pairwise separation target for the base means.
    pub margin: f64,
    pub within_std: f64,
    /// Spread of per-domain noise levels around `within_std` (multiplicative).
    pub noise_spread: f64,
    pub shift_std: f64,
    /// Rotate each domain; `false` gives IID clients.
    pub rotate: bool,
    pub input_scale: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DomainSkewConfig {
    fn default() -> Self {
        Self {
            n_clients: 4,
            n_classes: 10,
            input_dim: 64,
            signal_dim: 8,
            margin: 3.0,
            within_std: 1.0,
            noise_spread: 0.3,
            shift_std: 0.5,
            rotate: true,
            input_scale: 0.05,
            train_per_class: 60,
            test_per_class: 60,
        }
    }
}

impl DomainSkewConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid("domain skew needs at least two classes"));
        }
        if self.n_clients == 0 || self.input_dim == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("clients, input_dim and per-class sizes must be positive"));
        }
        if self.signal_dim == 0 || self.signal_dim > self.input_dim {
            return Err(Error::invalid("signal_dim must lie in 1..=input_dim"));
        }
        Ok(())
    }

    /// Draws the shared class geometry and one transform per client.
    pub fn domains(&self, rng: &mut RngStream) -> Result<Vec<DomainSpec>> {
        self.validate()?;
        let d = self.input_dim;
        let c = self.n_classes;
        // Class means: random points in a `signal_dim` subspace, rescaled so
        // the median pairwise distance equals the margin.
        let basis = random_orthogonal(d, rng);
        let mut base: Matrix<f64> = Matrix::zeros(c, d);
        for k in 0..c {
            let coeffs: Vec<f64> = (0..self.signal_dim).map(|_| rng.gaussian()).collect();
            for (s, &a) in coeffs.iter().enumerate() {
                for j in 0..d {
                    let v = base.get(k, j) + a * basis.get(s, j);
                    base.set(k, j, v);
                }
            }
        }
        let mut dists = Vec::new();
        for a in 0..c {
            for b in a + 1..c {
                dists.push(sq_dist(base.row(a), base.row(b)).sqrt());
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = dists[dists.len() / 2].max(1e-12);
        let factor = self.margin / median;
        base.as_mut_slice().iter_mut().for_each(|v| *v *= factor);

        let mut out = Vec::with_capacity(self.n_clients);
        for m in 0..self.n_clients {
            let rotation = if self.rotate {
                random_orthogonal(d, rng)
            } else {
                let mut id = Matrix::zeros(d, d);
                (0..d).for_each(|i| id.set(i, i, 1.0));
                id
            };
            let shift: Vec<f64> = if self.rotate {
                (0..d).map(|_| self.shift_std * rng.gaussian()).collect()
            } else {
                vec![0.0; d]
            };
            let spread = if self.rotate && self.n_clients > 1 {
                1.0 + self.noise_spread * (2.0 * m as f64 / (self.n_clients - 1) as f64 - 1.0)
            } else {
                1.0
            };
            let spec = DomainSpec {
                n_classes: c,
                input_dim: d,
                base_means: base.clone(),
                rotation,
                shift,
                noise_scale: self.within_std * spread,
                center: 0.5,
                input_scale: self.input_scale,
                train_per_class: self.train_per_class,
                test_per_class: self.test_per_class,
            };
            if spec.min_margin() < 2.0 * spec.noise_scale {
                warn!(
                    "domain {m}: minimum class margin {:.3} is below twice the noise scale {:.3}",
                    spec.min_margin(),
                    spec.noise_scale
                );
            }
            out.push(spec);
        }
        Ok(out)
    }
}

/// One train/test split per domain.
pub fn gen_domain_skew(specs: &[DomainSpec], rng: &mut RngStream) -> Result<Vec<ClientSplit>> {
    if specs.iter().any(|s| s.n_classes < 2) {
        return Err(Error::invalid("domain skew needs at least two classes"));
    }
    specs
        .iter()
        .enumerate()
        .map(|(m, spec)| {
            let mut r = rng.fork(m as u64);
            Ok(ClientSplit {
                train: spec.draw(spec.train_per_class, &mut r)?,
                test: spec.draw(spec.test_per_class, &mut r)?,
            })
        })
        .collect()
}

fn dirichlet(alpha: f64, k: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(format!("gamma({alpha}): {e}")))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Integer counts summing to `n` that follow `props` (largest remainder).
fn apportion(props: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

const LABEL_SKEW_MAX_REDRAWS: usize = 1000;

/// Dirichlet label-skew partition of `pool` over `n_clients`.
///
/// Returns disjoint index lists covering the whole pool. Draws are repeated
/// until every client holds at least one sample.
pub fn gen_label_skew(
    pool: &FeatureMatrix,
    n_clients: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<Vec<Vec<usize>>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("dirichlet concentration must be positive, got {alpha}")));
    }
    if n_clients == 0 {
        return Err(Error::invalid("label skew needs at least one client"));
    }
    if pool.len() < n_clients {
        return Err(Error::invalid(format!(
            "pool of {} samples cannot cover {n_clients} clients",
            pool.len()
        )));
    }
    let by_class = pool.indices_by_class();
    for _ in 0..LABEL_SKEW_MAX_REDRAWS {
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for idx in by_class.values() {
            let mut idx = idx.clone();
            rng.shuffle(&mut idx);
            let props = dirichlet(alpha, n_clients, rng)?;
            let counts = apportion(&props, idx.len());
            let mut start = 0;
            for (m, &cnt) in counts.iter().enumerate() {
                parts[m].extend_from_slice(&idx[start..start + cnt]);
                start += cnt;
            }
        }
        if parts.iter().all(|p| !p.is_empty()) {
            parts.iter_mut().for_each(|p| p.sort_unstable());
            return Ok(parts);
        }
    }
    Err(Error::invalid(format!(
        "could not give every one of {n_clients} clients a sample after {LABEL_SKEW_MAX_REDRAWS} draws"
    )))
}

/// Stratified split; each class keeps at least one training sample.
pub fn split_train_test(fm: &FeatureMatrix, test_fraction: f64, rng: &mut RngStream) -> Result<ClientSplit> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid("test fraction must lie in [0,1)"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for idx in fm.indices_by_class().values() {
        let mut idx = idx.clone();
        rng.shuffle(&mut idx);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).min(idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(ClientSplit {
        train: fm.subset(&train),
        test: fm.subset(&test),
    })
}
