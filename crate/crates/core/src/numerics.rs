//! Small numeric kernel shared by every other module.
//!
//! Dense row-major matrices, vector helpers, seeded random streams,
//! temperature softmax, clamped KL divergence, k-means with k-means++
//! seeding, and a central-difference gradient used as a test oracle.
//!
//! Everything that does not touch privacy calibration is generic over
//! [`Scalar`], so the same code runs in `f32` for quick experiments and in
//! `f64` for the simulator proper.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type accepted by the generic kernels.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; used for literals inside generic code.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lower bound applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry at {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    /// Gaussian entries with the given standard deviation.
    pub fn random_normal(rows: usize, cols: usize, std: T, rng: &mut RngStream) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::lit(rng.gaussian()) * std)
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// `self · x` for a column vector `x` of length `cols`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|row| dot(row, x)).collect()
    }

    /// `selfᵀ · y` for a vector `y` of length `rows`.
    pub fn matvec_t(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (row, &yi) in self.iter_rows().zip(y) {
            axpy(yi, row, &mut out);
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul shape mismatch {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a != T::zero() {
                    axpy(a, other.row(k), dst);
                }
            }
        }
        Ok(out)
    }

    /// Column means.
    pub fn column_means(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for row in self.iter_rows() {
            add_assign(&mut out, row);
        }
        if self.rows > 0 {
            let n = T::lit(self.rows as f64);
            out.iter_mut().for_each(|v| *v /= n);
        }
        out
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// `y += a·x`
#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn add_assign<T: Scalar>(y: &mut [T], x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub fn scaled<T: Scalar>(x: &[T], a: T) -> Vec<T> {
    x.iter().map(|&v| v * a).collect()
}

pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    let na = norm2(a);
    let nb = norm2(b);
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    dot(a, b) / (na * nb)
}

pub fn mean<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    xs.iter().copied().sum::<T>() / T::lit(xs.len() as f64)
}

/// Population standard deviation.
pub fn std_pop<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let m = mean(xs);
    let var = xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::lit(xs.len() as f64);
    var.sqrt()
}

/// Average ranks (1-based), ties share the mean rank.
pub fn ranks<T: Scalar>(xs: &[T]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da.sqrt() * db.sqrt())
}

pub fn spearman<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

/// Deterministic random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha20 with the stream id mapped onto the cipher's stream
/// word, so different ids never overlap and draws do not depend on thread
/// scheduling.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
            spare_normal: None,
        }
    }

    /// Stream for a purpose-tagged path such as `[client, round, PURPOSE]`.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        Self::new(seed, stream_id(path))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fresh independent stream for a sub-purpose of this one.
    pub fn fork(&self, tag: u64) -> Self {
        Self::new(self.seed, stream_id(&[self.stream_id, tag]))
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            // 53 random mantissa bits.
            let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Standard normal draw (Box–Muller, second variate cached).
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform_open();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Zero-mean Laplace draw with scale `b` (inverse CDF).
    pub fn laplace(&mut self, b: f64) -> f64 {
        if b == 0.0 {
            return 0.0;
        }
        let u = self.uniform_open() - 0.5;
        -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Hashes a path of identifiers into a single stream id.
pub fn stream_id(path: &[u64]) -> u64 {
    path.iter()
        .fold(0x5EED_0F_57EA4u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

// ---------------------------------------------------------------------------
// Softmax / KL
// ---------------------------------------------------------------------------

/// Temperature-scaled softmax computed with max subtraction.
pub fn softmax<T: Scalar>(logits: &[T], temperature: T) -> Result<Vec<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    if logits.is_empty() {
        return Ok(Vec::new());
    }
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, v| m.max(v));
    let mut out: Vec<T> = logits
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let z: T = out.iter().copied().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

/// `KL(p ‖ q) = Σ p_i ln(p_i / q_i)` with both sides clamped to
/// `[PROB_FLOOR, 1]` inside the log and `0·ln 0 = 0`.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "kl length mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let floor = T::lit(PROB_FLOOR);
    let one = T::one();
    let mut acc = T::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= T::zero() {
            continue;
        }
        let pc = pi.max(floor).min(one);
        let qc = qi.max(floor).min(one);
        acc += pi * (pc / qc).ln();
    }
    Ok(acc.max(T::zero()))
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct KMeansResult<T> {
    pub centroids: Matrix<T>,
    pub assignment: Vec<usize>,
    /// Objective after each assignment step.
    pub objective_trace: Vec<T>,
}

impl<T: Scalar> KMeansResult<T> {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.rows()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

fn nearest<T: Scalar>(point: &[T], centroids: &Matrix<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp_init<T: Scalar>(points: &Matrix<T>, k: usize, rng: &mut RngStream) -> Matrix<T> {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| sq_dist(p, points.row(first)).to_f64_lossy())
        .collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform_open() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc >= target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        centroids.row_mut(j).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            let d = sq_dist(p, centroids.row(j)).to_f64_lossy();
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Empty clusters are re-seeded with the point farthest from its current
/// centroid. Stops early once assignments stop changing.
pub fn kmeans<T: Scalar>(
    points: &Matrix<T>,
    k: usize,
    iters: usize,
    rng: &mut RngStream,
) -> Result<KMeansResult<T>> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("kmeans needs 1 <= k <= n, got k={k}, n={n}")));
    }
    if iters == 0 {
        return Err(Error::invalid("kmeans needs at least one iteration"));
    }
    let d = points.cols();
    let mut centroids = kmeans_pp_init(points, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut trace = Vec::new();

    for _ in 0..iters {
        let mut changed = false;
        let mut objective = T::zero();
        for (i, p) in points.iter_rows().enumerate() {
            let (j, dist) = nearest(p, &centroids);
            objective += dist;
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
        }
        trace.push(objective);

        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter_rows().enumerate() {
            add_assign(sums.row_mut(assignment[i]), p);
            counts[assignment[i]] += 1;
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Farthest point from its own centroid moves to the empty cluster.
                let (far, _) = points
                    .iter_rows()
                    .enumerate()
                    .filter(|(i, _)| counts[assignment[*i]] > 1)
                    .map(|(i, p)| (i, sq_dist(p, centroids.row(assignment[i]))))
                    .fold((usize::MAX, T::neg_infinity()), |best, cur| {
                        if cur.1 > best.1 {
                            cur
                        } else {
                            best
                        }
                    });
                if far == usize::MAX {
                    continue;
                }
                let old = assignment[far];
                let row = points.row(far).to_vec();
                for (s, &v) in sums.row_mut(old).iter_mut().zip(&row) {
                    *s -= v;
                }
                counts[old] -= 1;
                sums.row_mut(j).copy_from_slice(&row);
                counts[j] = 1;
                assignment[far] = j;
                changed = true;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = T::one() / T::lit(counts[j] as f64);
                let src: Vec<T> = sums.row(j).iter().map(|&v| v * inv).collect();
                centroids.row_mut(j).copy_from_slice(&src);
            }
        }
        if !changed {
            break;
        }
    }
    let final_obj: T = points
        .iter_rows()
        .enumerate()
        .map(|(i, p)| sq_dist(p, centroids.row(assignment[i])))
        .sum();
    trace.push(final_obj);

    Ok(KMeansResult {
        centroids,
        assignment,
        objective_trace: trace,
    })
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient `(f(x+h e_i) − f(x−h e_i)) / 2h`.
pub fn finite_diff_grad<T, F>(f: F, x: &[T], h: T) -> Vec<T>
where
    T: Scalar,
    F: Fn(&[T]) -> T,
{
    let mut probe = x.to_vec();
    let two_h = h + h;
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / two_h
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0], 4.0).unwrap();
        for v in p {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert_relative_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
        let p = softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_relative_eq!(p[0], 1.0, epsilon = 1e-15);
        assert!(p[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(softmax(&[0.0, f64::INFINITY], 1.0).is_err());
        assert!(softmax(&[0.0, 1.0], 0.0).is_err());
        assert!(softmax(&[0.0, 1.0], -2.0).is_err());
    }

    #[test]
    fn softmax_works_in_f32() {
        let p = softmax(&[1.0f32, 2.0, 3.0], 1.0).unwrap();
        let total: f32 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_relative_eq!(
            kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
        let clamped = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        // Both terms count: 0.5·ln(0.5/1) + 0.5·ln(0.5/1e-12).
        let expected = 0.5 * 0.5f64.ln() + 0.5 * (0.5f64 / 1e-12).ln();
        assert_relative_eq!(clamped, expected, epsilon = 1e-9);
        assert!((clamped - 13.122).abs() < 1e-3);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kmeans_k1_is_mean() {
        let pts = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 4.0], vec![4.0, 2.0]]).unwrap();
        let mut rng = RngStream::new(1, 0);
        let res = kmeans(&pts, 1, 10, &mut rng).unwrap();
        assert_relative_eq!(res.centroids.get(0, 0), 2.0, epsilon = 1e-12);
        assert_relative_eq!(res.centroids.get(0, 1), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn kmeans_two_pairs_matches_brute_force() {
        let pts = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 10.0],
            vec![10.0, 11.0],
        ])
        .unwrap();
        // Brute force over all 2-colourings with both clusters non-empty.
        let mut best = (f64::INFINITY, Vec::new());
        for mask in 1u32..15 {
            let groups: Vec<Vec<usize>> = (0..2)
                .map(|g| (0..4).filter(|&i| ((mask >> i) & 1) as usize == g).collect())
                .collect();
            let mut obj = 0.0;
            let mut cents = Vec::new();
            for g in &groups {
                let m = pts.select_rows(g).column_means();
                obj += g.iter().map(|&i| sq_dist(pts.row(i), &m)).sum::<f64>();
                cents.push(m);
            }
            if obj < best.0 {
                best = (obj, cents);
            }
        }
        for seed in 0..10 {
            let mut rng = RngStream::new(seed, 3);
            let res = kmeans(&pts, 2, 50, &mut rng).unwrap();
            let mut got: Vec<Vec<f64>> = res.centroids.iter_rows().map(<[f64]>::to_vec).collect();
            got.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
            let mut want = best.1.clone();
            want.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
            assert_eq!(got, want);
        }
    }

    #[test]
    fn kmeans_k_equals_n() {
        let pts = Matrix::from_rows(&[vec![1.0], vec![5.0], vec![9.0]]).unwrap();
        let mut rng = RngStream::new(4, 4);
        let res = kmeans(&pts, 3, 10, &mut rng).unwrap();
        let mut c = res.centroids.column(0);
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(c, vec![1.0, 5.0, 9.0]);
        assert!(kmeans(&pts, 4, 10, &mut rng).is_err());
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, 11);
            let pts: Matrix<f64> = Matrix::random_normal(60, 3, 1.0, &mut rng);
            let res = kmeans(&pts, 5, 30, &mut rng).unwrap();
            for w in res.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "objective went up: {:?}", res.objective_trace);
            }
        }
    }

    #[test]
    fn kmeans_duplicates_do_not_leave_empty_clusters() {
        let pts = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![2.0]]).unwrap();
        let mut rng = RngStream::new(0, 0);
        let res = kmeans(&pts, 3, 10, &mut rng).unwrap();
        assert!(res.cluster_sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x: &[f64]| dot(x, x), &[1.0, 2.0], 1e-5);
        assert_relative_eq!(g[0], 2.0, epsilon = 1e-8);
        assert_relative_eq!(g[1], 4.0, epsilon = 1e-8);
        let g = finite_diff_grad(|_: &[f64]| 3.0, &[1.0, 2.0, 3.0], 1e-5);
        assert!(g.iter().all(|&v| v == 0.0));
        let g = finite_diff_grad(|x: &[f64]| x.iter().sum(), &[-4.0, 0.5], 1e-5);
        for v in g {
            assert_relative_eq!(v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn rng_streams_reproducible_and_distinct() {
        let mut a = RngStream::new(7, 1);
        let mut b = RngStream::new(7, 1);
        let mut c = RngStream::new(7, 2);
        let xa: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..64).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let mut a = RngStream::new(99, stream_id(&[0, 0]));
        let mut b = RngStream::new(99, stream_id(&[0, 1]));
        let n = 20_000;
        let xa: Vec<f64> = (0..n).map(|_| a.gaussian()).collect();
        let xb: Vec<f64> = (0..n).map(|_| b.gaussian()).collect();
        let r = pearson(&xa, &xb);
        // 4 standard errors of a null correlation.
        assert!(r.abs() < 4.0 / (n as f64).sqrt(), "r = {r}");
    }

    #[test]
    fn matrix_rejects_bad_shapes() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        let a = Matrix::new(2, 3, vec![1.0; 6]).unwrap();
        assert!(a.matmul(&a).is_err());
        let p = a.matmul(&a.transpose()).unwrap();
        assert_eq!(p.as_slice(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn ranks_handle_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
