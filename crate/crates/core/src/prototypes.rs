//! Clipping, prototype construction and the two privatized releases.
//!
//! The isotropic release hard-clips every embedding to radius `R`, averages
//! (or clusters) per class and adds `N(0, (σ_iso Δ)² I)` with `Δ = 2R/n`.
//! The groupwise release clips `z_A` to `Rκ_A` and `z_B` to `Rκ_B`
//! separately and adds noise with std `σ_A Δ_A` on `I_A` and `σ_B Δ_B` on
//! `I_B`.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::numerics::{kmeans, norm2, Matrix, RngStream, Scalar};
use crate::privacy::{gaussian_mechanism, GroupNoiseParams};
use crate::scoring::PartitionMask;

/// Lloyd iterations used for multi-prototype classes.
pub const KMEANS_ITERS: usize = 50;

/// `z · min(1, R/‖z‖₂)`.
pub fn hard_clip<T: Scalar>(z: &[T], radius: T) -> Vec<T> {
    let n = norm2(z);
    if n <= radius || n == T::zero() {
        return z.to_vec();
    }
    let s = radius / n;
    z.iter().map(|&v| v * s).collect()
}

/// Independent clipping of both groups to `R_A = Rκ_A` and `R_B = Rκ_B`.
pub fn groupwise_clip<T: Scalar>(z: &[T], mask: &PartitionMask, radius: T) -> Result<Vec<T>> {
    if z.len() != mask.dim() {
        return Err(Error::invalid(format!(
            "vector has {} coordinates but partition covers {}",
            z.len(),
            mask.dim()
        )));
    }
    let (a, b) = mask.split(z);
    let ra = radius * T::lit(mask.kappa_a());
    let rb = radius * T::lit(mask.kappa_b());
    Ok(mask.merge(&hard_clip(&a, ra), &hard_clip(&b, rb)))
}

/// How a client privatizes its prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    /// Hard clipping, no noise.
    None,
    /// Hard clipping and isotropic Gaussian noise.
    Igpp,
    /// Private partition, groupwise clipping and anisotropic noise.
    Vpp,
}

impl Mechanism {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::Igpp => "igpp",
            Mechanism::Vpp => "vpp",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Mechanism::None),
            "igpp" => Ok(Mechanism::Igpp),
            "vpp" => Ok(Mechanism::Vpp),
            other => Err(Error::invalid(format!("unknown mechanism `{other}`"))),
        }
    }
}

/// Release parameters resolved for one round.
#[derive(Debug, Clone)]
pub enum ReleaseConfig {
    None { radius: f64 },
    Igpp { radius: f64, sigma_iso: f64 },
    Vpp { radius: f64, mask: PartitionMask, params: GroupNoiseParams },
}

impl ReleaseConfig {
    pub fn radius(&self) -> f64 {
        match self {
            ReleaseConfig::None { radius }
            | ReleaseConfig::Igpp { radius, .. }
            | ReleaseConfig::Vpp { radius, .. } => *radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius() > 0.0) {
            return Err(Error::invalid("clipping radius must be positive"));
        }
        Ok(())
    }

    /// Clip one embedding the way this release expects.
    pub fn clip(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            ReleaseConfig::None { radius } | ReleaseConfig::Igpp { radius, .. } => Ok(hard_clip(z, *radius)),
            ReleaseConfig::Vpp { radius, mask, .. } => groupwise_clip(z, mask, *radius),
        }
    }

    pub fn privatize(&self, protos: &PrototypeSet, rng: &mut RngStream) -> Result<PrototypeSet> {
        match self {
            ReleaseConfig::None { .. } => Ok(protos.clone()),
            ReleaseConfig::Igpp { radius, sigma_iso } => release_igpp(protos, *radius, *sigma_iso, rng),
            ReleaseConfig::Vpp { radius, mask, params } => release_vpp(protos, mask, params, *radius, rng),
        }
    }
}

/// One released vector with the number of clipped samples behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class: usize,
    pub cluster: usize,
    pub support: usize,
    pub vector: Vec<f64>,
}

/// All prototypes a client uploads in one round (or the server's global set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub client_id: usize,
    pub round: usize,
    /// Sorted by `(class, cluster)`.
    pub prototypes: Vec<Prototype>,
}

impl PrototypeSet {
    pub fn new(client_id: usize, round: usize, mut prototypes: Vec<Prototype>) -> Result<Self> {
        if let Some(p) = prototypes.iter().find(|p| p.vector.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("non-finite prototype for class {}", p.class)));
        }
        if prototypes.iter().any(|p| p.support == 0) {
            return Err(Error::invalid("prototype with zero support"));
        }
        prototypes.sort_by_key(|p| (p.class, p.cluster));
        Ok(Self {
            client_id,
            round,
            prototypes,
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, |p| p.vector.len())
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.prototypes.iter().map(|p| p.class).collect();
        c.dedup();
        c
    }

    pub fn for_class(&self, class: usize) -> impl Iterator<Item = &Prototype> {
        self.prototypes.iter().filter(move |p| p.class == class)
    }

    /// First prototype of the class, if any.
    pub fn first_for_class(&self, class: usize) -> Option<&Prototype> {
        self.for_class(class).next()
    }

    /// Nearest prototype of `class` to `z`.
    pub fn nearest_in_class(&self, class: usize, z: &[f64]) -> Option<&Prototype> {
        self.for_class(class).min_by(|a, b| {
            crate::numerics::sq_dist(&a.vector, z)
                .partial_cmp(&crate::numerics::sq_dist(&b.vector, z))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    }

    /// Flat wire encoding: one line per prototype,
    /// `client_id,round,class,cluster,support,v0,...,v{d-1}`.
    pub fn encode_wire(&self) -> String {
        let mut out = String::new();
        for p in &self.prototypes {
            let _ = write!(out, "{},{},{},{},{}", self.client_id, self.round, p.class, p.cluster, p.support);
            for v in &p.vector {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    /// Inverse of [`encode_wire`](Self::encode_wire); all lines must share
    /// one `(client_id, round)`.
    pub fn decode_wire(text: &str) -> Result<Self> {
        let mut header: Option<(usize, usize)> = None;
        let mut prototypes = Vec::new();
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 6 {
                return Err(Error::invalid(format!("wire line {} too short", ln + 1)));
            }
            let int = |i: usize| {
                fields[i]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| Error::invalid(format!("wire line {} field {i}: {e}", ln + 1)))
            };
            let (client, round) = (int(0)?, int(1)?);
            match header {
                None => header = Some((client, round)),
                Some(h) if h != (client, round) => {
                    return Err(Error::invalid("wire message mixes clients or rounds"));
                }
                _ => {}
            }
            let vector = fields[5..]
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::invalid(format!("wire line {}: {e}", ln + 1)))?;
            prototypes.push(Prototype {
                class: int(2)?,
                cluster: int(3)?,
                support: int(4)?,
                vector,
            });
        }
        let (client_id, round) = header.unwrap_or((0, 0));
        Self::new(client_id, round, prototypes)
    }
}

/// Per-class means (`k_per_class = 1`) or k-means centroids of clipped
/// embeddings. Classes with fewer than `k` samples fall back to their mean.
pub fn compute_prototypes(
    clipped: &FeatureMatrix,
    k_per_class: usize,
    client_id: usize,
    round: usize,
    rng: &mut RngStream,
) -> Result<PrototypeSet> {
    if k_per_class == 0 {
        return Err(Error::invalid("k_per_class must be positive"));
    }
    let mut out = Vec::new();
    for (class, idx) in clipped.indices_by_class() {
        let rows = clipped.features.select_rows(&idx);
        let k = if idx.len() < k_per_class {
            warn!(
                "class {class} has {} samples, fewer than k = {k_per_class}; using its mean",
                idx.len()
            );
            1
        } else {
            k_per_class
        };
        if k == 1 {
            out.push(Prototype {
                class,
                cluster: 0,
                support: idx.len(),
                vector: rows.column_means(),
            });
            continue;
        }
        let res = kmeans(&rows, k, KMEANS_ITERS, rng)?;
        for (cluster, (centroid, size)) in res.centroids.iter_rows().zip(res.cluster_sizes()).enumerate() {
            if size == 0 {
                continue;
            }
            if size == 1 {
                warn!("class {class} cluster {cluster} has support 1; released with sensitivity 2R");
            }
            out.push(Prototype {
                class,
                cluster,
                support: size,
                vector: centroid.to_vec(),
            });
        }
    }
    PrototypeSet::new(client_id, round, out)
}

/// `Δ = 2R / support`.
pub fn sensitivity(radius: f64, support: usize) -> Result<f64> {
    if support == 0 {
        return Err(Error::invalid("sensitivity of an empty prototype is undefined"));
    }
    Ok(2.0 * radius / support as f64)
}

/// Per-coordinate noise std of the isotropic release for one prototype.
pub fn igpp_noise_std(radius: f64, sigma_iso: f64, support: usize, dim: usize) -> Result<Vec<f64>> {
    Ok(vec![sigma_iso * sensitivity(radius, support)?; dim])
}

/// Per-coordinate noise std of the groupwise release for one prototype.
pub fn vpp_noise_std(mask: &PartitionMask, params: &GroupNoiseParams, radius: f64, support: usize) -> Result<Vec<f64>> {
    let delta = sensitivity(radius, support)?;
    if params.delta_iso > 0.0 {
        let ka = params.delta_a / params.delta_iso;
        let kb = params.delta_b / params.delta_iso;
        if (ka - mask.kappa_a()).abs() > 1e-9 || (kb - mask.kappa_b()).abs() > 1e-9 {
            return Err(Error::invalid("noise parameters were built for a different partition"));
        }
    }
    let std_a = params.sigma_a * delta * mask.kappa_a();
    let std_b = params.sigma_b * delta * mask.kappa_b();
    Ok((0..mask.dim())
        .map(|j| if mask.is_selected(j) { std_a } else { std_b })
        .collect())
}

pub fn release_igpp(protos: &PrototypeSet, radius: f64, sigma_iso: f64, rng: &mut RngStream) -> Result<PrototypeSet> {
    let mut out = protos.clone();
    for p in &mut out.prototypes {
        let std = igpp_noise_std(radius, sigma_iso, p.support, p.vector.len())?;
        p.vector = gaussian_mechanism(&p.vector, &std, rng)?;
    }
    Ok(out)
}

pub fn release_vpp(
    protos: &PrototypeSet,
    mask: &PartitionMask,
    params: &GroupNoiseParams,
    radius: f64,
    rng: &mut RngStream,
) -> Result<PrototypeSet> {
    let mut out = protos.clone();
    for p in &mut out.prototypes {
        if p.vector.len() != mask.dim() {
            return Err(Error::invalid(format!(
                "prototype dimension {} does not match partition dimension {}",
                p.vector.len(),
                mask.dim()
            )));
        }
        let std = vpp_noise_std(mask, params, radius, p.support)?;
        p.vector = gaussian_mechanism(&p.vector, &std, rng)?;
    }
    Ok(out)
}

/// Clip every row with `clip`, keeping labels.
pub fn clip_features(features: &FeatureMatrix, release: &ReleaseConfig) -> Result<FeatureMatrix> {
    let mut rows = Vec::with_capacity(features.len());
    for r in features.features.iter_rows() {
        rows.push(release.clip(r)?);
    }
    FeatureMatrix::new(Matrix::from_rows(&rows)?, features.labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::group_noise_params;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_group_mask() -> PartitionMask {
        PartitionMask::new(2, 0.5, vec![0]).unwrap()
    }

    #[test]
    fn hard_clip_examples() {
        assert_eq!(hard_clip(&[3.0, 4.0], 10.0), vec![3.0, 4.0]);
        let c = hard_clip(&[3.0, 4.0], 2.5);
        assert_relative_eq!(c[0], 1.5, epsilon = 1e-15);
        assert_relative_eq!(c[1], 2.0, epsilon = 1e-15);
        assert_eq!(hard_clip(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
        assert_eq!(hard_clip(&[3.0f32, 4.0], 5.0), vec![3.0, 4.0]);
    }

    #[test]
    fn groupwise_clip_examples() {
        let m = two_group_mask();
        let c = groupwise_clip(&[3.0, 4.0], &m, 2f64.sqrt()).unwrap();
        assert_relative_eq!(c[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(c[1], 1.0, epsilon = 1e-12);
        assert_eq!(groupwise_clip(&[0.5, -0.5], &m, 2f64.sqrt()).unwrap(), vec![0.5, -0.5]);
        assert!(groupwise_clip(&[1.0, 2.0, 3.0], &m, 1.0).is_err());

        // Whole vector exactly on the R-sphere, but all mass in group A.
        let z = [2f64.sqrt(), 0.0];
        assert_eq!(hard_clip(&z, 2f64.sqrt()), z.to_vec());
        let g = groupwise_clip(&z, &m, 2f64.sqrt()).unwrap();
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-12);
        assert!(g[0] < z[0]);
    }

    #[test]
    fn prototype_examples() {
        let fm = FeatureMatrix::new(Matrix::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap(), vec![0, 0]).unwrap();
        let mut rng = RngStream::new(0, 0);
        let p = compute_prototypes(&fm, 1, 0, 0, &mut rng).unwrap();
        assert_eq!(p.prototypes[0].vector, vec![2.0, 2.0]);
        assert_eq!(p.prototypes[0].support, 2);

        let p = compute_prototypes(&fm, 2, 0, 0, &mut rng).unwrap();
        let mut vs: Vec<Vec<f64>> = p.prototypes.iter().map(|q| q.vector.clone()).collect();
        vs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(vs, vec![vec![1.0, 1.0], vec![3.0, 3.0]]);

        let fm = FeatureMatrix::new(
            Matrix::from_rows(&[vec![0.0], vec![1.0], vec![10.0], vec![11.0], vec![5.0]]).unwrap(),
            vec![0, 0, 0, 0, 1],
        )
        .unwrap();
        let p = compute_prototypes(&fm, 2, 0, 0, &mut rng).unwrap();
        let class0: Vec<(f64, usize)> = p.for_class(0).map(|q| (q.vector[0], q.support)).collect();
        let mut class0 = class0;
        class0.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert_eq!(class0, vec![(0.5, 2), (10.5, 2)]);
        // Class 1 has one sample: falls back to its mean.
        assert_eq!(p.for_class(1).count(), 1);
    }

    #[test]
    fn sensitivity_examples() {
        assert_relative_eq!(sensitivity(10.0, 50).unwrap(), 0.4, epsilon = 1e-15);
        assert_eq!(sensitivity(3.0, 1).unwrap(), 6.0);
        assert_relative_eq!(sensitivity(5.0, 100).unwrap(), 0.1, epsilon = 1e-15);
        assert!(sensitivity(5.0, 0).is_err());
    }

    #[test]
    fn igpp_noise_levels() {
        let std = igpp_noise_std(10.0, 4.9, 50, 3).unwrap();
        assert!(std.iter().all(|&s| (s - 1.96).abs() < 1e-12));
        let a = igpp_noise_std(1.0, 2.0, 10, 1).unwrap()[0];
        let b = igpp_noise_std(1.0, 2.0, 100, 1).unwrap()[0];
        assert_relative_eq!(a / b, 10.0, epsilon = 1e-12);
        let protos = PrototypeSet::new(0, 0, vec![Prototype { class: 0, cluster: 0, support: 3, vector: vec![1.0, 2.0] }]).unwrap();
        let mut rng = RngStream::new(0, 0);
        assert_eq!(release_igpp(&protos, 1.0, 0.0, &mut rng).unwrap(), protos);
    }

    #[test]
    fn vpp_noise_levels_follow_allocation() {
        let d = 100;
        let mask = PartitionMask::new(d, 0.2, (0..20).collect()).unwrap();
        let (radius, support, sigma_ref) = (10.0, 50, 3.0);
        let delta = sensitivity(radius, support).unwrap();
        let params = group_noise_params(&mask, sigma_ref, delta).unwrap();
        let std = vpp_noise_std(&mask, &params, radius, support).unwrap();
        // Direct chain: w_A = 2/3, σ_A = σ_ref√1.5, Δ_A = Δ√0.2, σ_B = σ_ref√3, Δ_B = Δ√0.8.
        let want_a = sigma_ref * 1.5f64.sqrt() * delta * 0.2f64.sqrt();
        let want_b = sigma_ref * 3f64.sqrt() * delta * 0.8f64.sqrt();
        assert_relative_eq!(std[0], want_a, max_relative = 1e-12);
        assert_relative_eq!(std[50], want_b, max_relative = 1e-12);
        assert_relative_eq!(std[0] / (sigma_ref * delta), 0.3f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(std[50] / (sigma_ref * delta), 2.4f64.sqrt(), max_relative = 1e-12);

        // Symmetric partition collapses to the isotropic level.
        let mask = PartitionMask::new(10, 0.5, (0..5).collect()).unwrap();
        let params = group_noise_params(&mask, sigma_ref, delta).unwrap();
        let std = vpp_noise_std(&mask, &params, radius, support).unwrap();
        let iso = igpp_noise_std(radius, sigma_ref, support, 10).unwrap();
        for (a, b) in std.iter().zip(&iso) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn vpp_rejects_mismatched_partition() {
        let m1 = PartitionMask::new(10, 0.2, vec![0, 1]).unwrap();
        let m2 = PartitionMask::new(10, 0.5, (0..5).collect()).unwrap();
        let params = group_noise_params(&m1, 1.0, 1.0).unwrap();
        assert!(vpp_noise_std(&m2, &params, 1.0, 2).is_err());
        let protos = PrototypeSet::new(0, 0, vec![Prototype { class: 0, cluster: 0, support: 2, vector: vec![0.0; 3] }]).unwrap();
        let mut rng = RngStream::new(0, 0);
        assert!(release_vpp(&protos, &m1, &params, 1.0, &mut rng).is_err());
    }

    #[test]
    fn wire_round_trip_and_errors() {
        let set = PrototypeSet::new(
            3,
            7,
            vec![
                Prototype { class: 1, cluster: 0, support: 4, vector: vec![0.1, -2.5] },
                Prototype { class: 0, cluster: 1, support: 9, vector: vec![1e-300, 3.0] },
            ],
        )
        .unwrap();
        let wire = set.encode_wire();
        assert!(wire.starts_with("3,7,0,1,9,"));
        assert_eq!(PrototypeSet::decode_wire(&wire).unwrap(), set);
        assert!(PrototypeSet::decode_wire("1,2,3\n").is_err());
        assert!(PrototypeSet::decode_wire("1,2,0,0,1,0.5\n2,2,0,0,1,0.5\n").is_err());
    }

    fn arb_vec() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-20.0f64..20.0, 6)
    }

    proptest! {
        #[test]
        fn clipping_idempotent_and_bounded(z in arb_vec(), r in 0.1f64..10.0, k in 1usize..=3) {
            let mask = PartitionMask::new(6, k as f64 / 6.0, (0..k).collect()).unwrap();
            let h = hard_clip(&z, r);
            prop_assert!(norm2(&h) <= r * (1.0 + 1e-12));
            let hh = hard_clip(&h, r);
            for (a, b) in h.iter().zip(&hh) { prop_assert!((a - b).abs() <= 1e-12 * r); }
            let g = groupwise_clip(&z, &mask, r).unwrap();
            prop_assert!(norm2(&g) <= r * (1.0 + 1e-12));
            let gg = groupwise_clip(&g, &mask, r).unwrap();
            for (a, b) in g.iter().zip(&gg) { prop_assert!((a - b).abs() <= 1e-12 * r); }
        }

        #[test]
        fn clipping_is_nonexpansive(z in arb_vec(), w in arb_vec(), r in 0.1f64..10.0) {
            let mask = PartitionMask::new(6, 0.5, vec![1, 3, 5]).unwrap();
            let d_in = crate::numerics::sq_dist(&z, &w).sqrt();
            let d_hard = crate::numerics::sq_dist(&hard_clip(&z, r), &hard_clip(&w, r)).sqrt();
            prop_assert!(d_hard <= d_in + 1e-9);
            let (za, zb) = mask.split(&z);
            let (wa, wb) = mask.split(&w);
            let (gza, gzb) = mask.split(&groupwise_clip(&z, &mask, r).unwrap());
            let (gwa, gwb) = mask.split(&groupwise_clip(&w, &mask, r).unwrap());
            prop_assert!(crate::numerics::sq_dist(&gza, &gwa).sqrt() <= crate::numerics::sq_dist(&za, &wa).sqrt() + 1e-9);
            prop_assert!(crate::numerics::sq_dist(&gzb, &gwb).sqrt() <= crate::numerics::sq_dist(&zb, &wb).sqrt() + 1e-9);
        }
    }
}
