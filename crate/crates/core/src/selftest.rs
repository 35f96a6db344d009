//! Fast built-in property checks, runnable from the command line.

use crate::attacks::{mia_metrics, roc_curve, trapezoid_auc};
use crate::localtrain::{loss_and_grad, ClientModel, ModelShape, TrainConfig};
use crate::numerics::{finite_diff_grad, norm2, RngStream};
use crate::privacy::{calibrate_gaussian_sigma, group_noise_params, rdp_dominance_check};
use crate::prototypes::{groupwise_clip, hard_clip, sensitivity, Prototype, PrototypeSet};
use crate::scoring::PartitionMask;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn quadratic_root(eps: f64, delta: f64, t: usize) -> f64 {
    let a = t as f64 / 2.0;
    let b = (2.0 * t as f64 * (1.0 / delta).ln()).sqrt();
    2.0 * a / (-b + (b * b + 4.0 * a * eps).sqrt())
}

fn calibration() -> Check {
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for &t in &[1usize, 5, 20, 100] {
        let mut prev = f64::INFINITY;
        for &eps in &[0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let s = calibrate_gaussian_sigma(eps, 1e-5, t).unwrap_or(f64::NAN);
            worst = worst.max((s - quadratic_root(eps, 1e-5, t)).abs() / s);
            monotone &= s < prev;
            prev = s;
        }
    }
    check("calibration", worst < 1e-10 && monotone, format!("max relative error {worst:.2e}, monotone {monotone}"))
}

fn harmonic(rng: &mut RngStream) -> Check {
    let mut worst: f64 = 0.0;
    let mut dominance = true;
    for _ in 0..200 {
        let d = 2 + rng.below(200);
        let rho = 0.01 + 0.49 * rng.uniform_open();
        let d_a = PartitionMask::d_a_for(d, rho);
        if d_a >= d {
            continue;
        }
        let mut idx: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut idx);
        let Ok(mask) = PartitionMask::new(d, rho, idx[..d_a].to_vec()) else {
            return check("harmonic", false, format!("mask construction failed at d={d}, rho={rho}"));
        };
        let sigma = 0.5 + 30.0 * rng.uniform_open();
        let Ok(p) = group_noise_params(&mask, sigma, 1.0) else {
            return check("harmonic", false, "noise parameters failed".into());
        };
        worst = worst.max((p.harmonic_lhs() - 1.0 / (sigma * sigma)).abs() * sigma * sigma);
        dominance &= rdp_dominance_check(&p, &[1.1, 2.0, 10.0, 100.0]);
    }
    check("harmonic", worst <= 1e-12 && dominance, format!("max scaled residual {worst:.2e}, dominance {dominance}"))
}

fn sensitivity_bound(rng: &mut RngStream) -> Check {
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..50 {
        let d = 2 + rng.below(7);
        let n = 1 + rng.below(6);
        let radius = 0.5 + 2.0 * rng.uniform_open();
        let rho = 0.5;
        let d_a = PartitionMask::d_a_for(d, rho).min(d - 1);
        let Ok(mask) = PartitionMask::new(d, d_a as f64 / d as f64, (0..d_a).collect()) else {
            continue;
        };
        let draw = |rng: &mut RngStream| -> Vec<f64> { (0..d).map(|_| 4.0 * rng.gaussian()).collect() };
        let base: Vec<Vec<f64>> = (0..n).map(|_| draw(rng)).collect();
        let swap = draw(rng);
        let bound = sensitivity(radius, n).unwrap_or(f64::NAN);
        for clip in 0..2 {
            let c = |z: &[f64]| if clip == 0 { hard_clip(z, radius) } else { groupwise_clip(z, &mask, radius).unwrap_or_default() };
            let mean = |rows: &[Vec<f64>]| -> Vec<f64> {
                let mut m = vec![0.0; d];
                for r in rows {
                    for (a, b) in m.iter_mut().zip(c(r)) {
                        *a += b / n as f64;
                    }
                }
                m
            };
            let m0 = mean(&base);
            for i in 0..n {
                let mut alt = base.clone();
                alt[i] = swap.clone();
                let diff: Vec<f64> = m0.iter().zip(mean(&alt)).map(|(a, b)| a - b).collect();
                worst_ratio = worst_ratio.max(norm2(&diff) / bound);
            }
        }
    }
    check("sensitivity", worst_ratio <= 1.0 + 1e-12, format!("max change / bound {worst_ratio:.6}"))
}

fn gradient(rng: &mut RngStream) -> Check {
    let mut worst: f64 = 0.0;
    for trial in 0..5u64 {
        let shape = ModelShape { input_dim: 5, hidden: 6, dim: 4, classes: 3 };
        let mut mrng = RngStream::new(trial, 99);
        let Ok(mut model) = ClientModel::new(shape, &mut mrng) else {
            return check("gradient", false, "model construction failed".into());
        };
        for w in model.teacher.weight.as_mut_slice() {
            *w += 0.3 * rng.gaussian();
        }
        let hidden: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.gaussian()).collect()).collect();
        let refs: Vec<&[f64]> = hidden.iter().map(|v| v.as_slice()).collect();
        let labels = vec![0, 1, 2, 1, 0];
        let protos = PrototypeSet::new(
            0,
            0,
            (0..3)
                .map(|c| Prototype { class: c, cluster: 0, support: 1, vector: (0..4).map(|_| 0.3 * rng.gaussian()).collect() })
                .collect(),
        )
        .expect("finite prototypes");
        let cfg = TrainConfig { radius: 1.0, lambda1: 0.5, ..TrainConfig::default() };
        let Ok((_, g)) = loss_and_grad(&model, &refs, &labels, Some(&protos), &cfg) else {
            return check("gradient", false, "loss evaluation failed".into());
        };
        let theta = model.params.to_flat();
        let fd = finite_diff_grad(
            |p: &[f64]| {
                let mut m = model.clone();
                m.params.set_flat(p).expect("same length");
                loss_and_grad(&m, &refs, &labels, Some(&protos), &cfg).map(|r| r.0.total).unwrap_or(f64::NAN)
            },
            &theta,
            1e-5,
        );
        let a = g.to_flat();
        let diff: Vec<f64> = a.iter().zip(&fd).map(|(x, y)| x - y).collect();
        worst = worst.max(norm2(&diff) / norm2(&a).max(norm2(&fd)));
    }
    check("gradient", worst <= 1e-4, format!("max relative error {worst:.2e}"))
}

fn auc(rng: &mut RngStream) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m: Vec<f64> = (0..1 + rng.below(30)).map(|_| (rng.gaussian() * 3.0).round()).collect();
        let n: Vec<f64> = (0..1 + rng.below(30)).map(|_| (rng.gaussian() * 3.0).round()).collect();
        let a = mia_metrics(&m, &n).map(|r| r.roc_auc).unwrap_or(f64::NAN);
        worst = worst.max((a - trapezoid_auc(&roc_curve(&m, &n))).abs());
    }
    check("auc", worst <= 1e-9, format!("rank vs trapezoid max gap {worst:.2e}"))
}

/// Run every check with a fixed seed.
pub fn run_all() -> Vec<Check> {
    let mut rng = RngStream::new(2024, 0);
    vec![
        calibration(),
        harmonic(&mut rng),
        sensitivity_bound(&mut rng),
        gradient(&mut rng),
        auc(&mut rng),
    ]
}
