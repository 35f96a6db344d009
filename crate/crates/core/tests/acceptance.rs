//! Acceptance suite. Runs as a plain binary so every check prints one
//! `PASS`/`FAIL` line; exits non-zero if any check fails.

use std::collections::BTreeMap;
use std::time::Instant;

use protodp::config::{Method, RunConfig};
use protodp::data::FeatureMatrix;
use protodp::experiment::{execute, write_run, Summary};
use protodp::localtrain::{loss_and_grad, ClientModel, ModelShape, TrainConfig};
use protodp::numerics::{finite_diff_grad, norm2, spearman};
use protodp::privacy::{
    calibrate_gaussian_sigma, calibrate_laplace_scale, group_noise_params, laplace_topk, rdp_dominance_check,
};
use protodp::prototypes::{clip_features, compute_prototypes, sensitivity, Prototype, PrototypeSet, ReleaseConfig};
use protodp::scoring::{private_partition, score_diagnostics, PartitionMask, DEFAULT_MI_BINS};
use protodp::{Matrix, RngStream};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn quadratic_sigma(eps: f64, delta: f64, t: usize) -> f64 {
    // eps = T u²/2 + √(2T ln(1/δ)) u with u = 1/σ.
    let a = t as f64 / 2.0;
    let b = (2.0 * t as f64 * (1.0 / delta).ln()).sqrt();
    let u = (-b + (b * b + 4.0 * a * eps).sqrt()) / (2.0 * a);
    1.0 / u
}

fn calibration() -> Outcome {
    let s1 = calibrate_gaussian_sigma(1.0, 1e-5, 1).unwrap();
    let s20 = calibrate_gaussian_sigma(1.0, 1e-5, 20).unwrap();
    let in_range = (4.85..=4.95).contains(&s1) && (21.8..=22.1).contains(&s20);
    let mut oracle_err: f64 = 0.0;
    let mut monotone = true;
    let eps_grid = [0.1, 0.5, 1.0, 2.0, 4.0, 8.0];
    let t_grid = [1usize, 2, 5, 10, 20, 50, 100];
    let delta_grid = [1e-7, 1e-5, 1e-3];
    for &delta in &delta_grid {
        for &t in &t_grid {
            for w in eps_grid.windows(2) {
                let lo = calibrate_gaussian_sigma(w[0], delta, t).unwrap();
                let hi = calibrate_gaussian_sigma(w[1], delta, t).unwrap();
                monotone &= hi < lo;
                oracle_err = oracle_err.max((lo - quadratic_sigma(w[0], delta, t)).abs() / lo);
            }
        }
        for &eps in &eps_grid {
            for w in t_grid.windows(2) {
                monotone &= calibrate_gaussian_sigma(eps, delta, w[1]).unwrap() > calibrate_gaussian_sigma(eps, delta, w[0]).unwrap();
            }
        }
    }
    for &eps in &eps_grid {
        for w in delta_grid.windows(2) {
            monotone &= calibrate_gaussian_sigma(eps, w[1], 20).unwrap() < calibrate_gaussian_sigma(eps, w[0], 20).unwrap();
        }
    }
    outcome(
        in_range && monotone && oracle_err < 1e-9,
        format!("sigma(1,1e-5,1)={s1:.4} sigma(1,1e-5,20)={s20:.4} oracle rel err {oracle_err:.1e} monotone={monotone}"),
    )
}

fn random_mask(rng: &mut RngStream, d: usize, rho: f64) -> PartitionMask {
    let mut idx: Vec<usize> = (0..d).collect();
    rng.shuffle(&mut idx);
    let d_a = PartitionMask::d_a_for(d, rho);
    PartitionMask::new(d, rho, idx[..d_a].to_vec()).unwrap()
}

fn harmonic() -> Outcome {
    let mut rng = RngStream::new(11, 0);
    let mut worst: f64 = 0.0;
    let mut dominance = true;
    for _ in 0..1000 {
        let d = 2 + rng.below(511);
        let rho = 0.5 * (1.0 - rng.uniform_open()).max(1e-3);
        let mask = random_mask(&mut rng, d, rho);
        let sigma_ref = 0.1 + 50.0 * rng.uniform_open();
        let p = group_noise_params(&mask, sigma_ref, 1.0).unwrap();
        let resid = (1.0 / (p.sigma_a * p.sigma_a) + 1.0 / (p.sigma_b * p.sigma_b) - 1.0 / (sigma_ref * sigma_ref)).abs();
        worst = worst.max(resid * sigma_ref * sigma_ref);
        dominance &= rdp_dominance_check(&p, &[1.1, 2.0, 10.0, 100.0]);
    }
    outcome(worst <= 1e-12 && dominance, format!("1000 masks, max residual·σ_ref² {worst:.2e}, dominance={dominance}"))
}

fn tradeoff() -> Outcome {
    let d = 1000;
    let mut all_ok = true;
    let mut ratio_02 = f64::NAN;
    let mut worst: f64 = 0.0;
    for i in 1..=10 {
        let rho = 0.05 * i as f64;
        let mask = PartitionMask::new(d, rho, (0..PartitionMask::d_a_for(d, rho)).collect()).unwrap();
        let p = group_noise_params(&mask, 3.0, 0.7).unwrap();
        let ratio = p.std_a() / (p.sigma_ref * p.delta_iso);
        worst = worst.max(ratio);
        all_ok &= ratio <= 1.0 + 1e-12;
        if i == 4 {
            ratio_02 = ratio;
        }
    }
    let mask = PartitionMask::new(d, 0.6, (0..600).collect()).unwrap();
    let p = group_noise_params(&mask, 3.0, 0.7).unwrap();
    let ratio_06 = p.std_a() / (p.sigma_ref * p.delta_iso);
    let target = 0.3f64.sqrt();
    let ok = all_ok && (ratio_02 - target).abs() <= 1e-9 && ratio_06 > 1.0;
    outcome(ok, format!("max ratio on rho ≤ 0.5 {worst:.4}, ratio(0.2)={ratio_02:.10} (√0.3={target:.10}), ratio(0.6)={ratio_06:.4}"))
}

fn laplace_dp() -> Outcome {
    let eps = 1.0;
    let lambda = calibrate_laplace_scale(1, 1.0, 1, eps).unwrap();
    let trials = 1_000_000usize;
    // Scores clipped to [0, H] with H = 1: every pair of cube vertices is adjacent.
    let vertices: Vec<[f64; 3]> = (0..8).map(|b| [(b & 1) as f64, ((b >> 1) & 1) as f64, ((b >> 2) & 1) as f64]).collect();
    let mut freq = Vec::new();
    for (vi, v) in vertices.iter().enumerate() {
        let mut rng = RngStream::new(4, vi as u64);
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            counts[laplace_topk(v, 1, lambda, &mut rng).unwrap()[0]] += 1;
        }
        freq.push(counts.map(|c| c as f64 / trials as f64));
    }
    let n = trials as f64;
    let mut worst_loss: f64 = 0.0;
    let mut worst_margin = f64::NEG_INFINITY;
    let mut se_at_worst = 0.0;
    for p in &freq {
        for q in &freq {
            for j in 0..3 {
                let loss = (p[j] / q[j]).ln();
                let se = ((1.0 - p[j]) / (n * p[j]) + (1.0 - q[j]) / (n * q[j])).sqrt();
                if loss - eps - 3.0 * se > worst_margin {
                    worst_margin = loss - eps - 3.0 * se;
                    se_at_worst = se;
                }
                worst_loss = worst_loss.max(loss);
            }
        }
    }
    outcome(
        worst_margin <= 0.0,
        format!("lambda={lambda}, max empirical loss {worst_loss:.4} vs eps {eps} (stderr {se_at_worst:.4})"),
    )
}

fn sensitivity_oracle() -> Outcome {
    let mut rng = RngStream::new(5, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = 2 + rng.below(7);
        let n = 1 + rng.below(6);
        let radius = 0.2 + 3.0 * rng.uniform_open();
        let rho = 0.5 * (1.0 - rng.uniform_open()).max(0.05);
        let mask = random_mask(&mut rng, d, rho);
        let params = group_noise_params(&mask, 1.0, 1.0).unwrap();
        let paths = [
            ReleaseConfig::None { radius },
            ReleaseConfig::Vpp { radius, mask, params },
        ];
        let draw = |rng: &mut RngStream| -> Vec<f64> {
            let s = 0.05 + 5.0 * rng.uniform_open();
            (0..d).map(|_| s * rng.gaussian()).collect()
        };
        let base: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng)).collect();
        let mut candidates: Vec<Vec<f64>> = (0..6).map(|_| draw(&mut rng)).collect();
        for b in &base {
            candidates.push(b.iter().map(|v| -10.0 * v).collect());
        }
        let bound = sensitivity(radius, n).unwrap();
        for release in &paths {
            let proto = |rows: &[Vec<f64>]| -> Vec<f64> {
                let fm = FeatureMatrix::new(Matrix::from_rows(rows).unwrap(), vec![0; rows.len()]).unwrap();
                let clipped = clip_features(&fm, release).unwrap();
                let mut krng = RngStream::new(0, 0);
                compute_prototypes(&clipped, 1, 0, 0, &mut krng).unwrap().prototypes[0].vector.clone()
            };
            let p0 = proto(&base);
            for i in 0..n {
                for c in &candidates {
                    let mut alt = base.clone();
                    alt[i] = c.clone();
                    let p1 = proto(&alt);
                    let diff: Vec<f64> = p0.iter().zip(&p1).map(|(a, b)| a - b).collect();
                    worst = worst.max(norm2(&diff) / bound);
                }
            }
        }
    }
    outcome(worst <= 1.0 + 1e-12, format!("200 instances, both clip paths, max ‖Δp‖/(2R/n) = {worst:.6}"))
}

fn gradient_exactness() -> Outcome {
    let mut rng = RngStream::new(6, 0);
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let shape = ModelShape {
            input_dim: 3 + rng.below(6),
            hidden: 3 + rng.below(6),
            dim: 2 + rng.below(5),
            classes: 2 + rng.below(4),
        };
        let mut mrng = RngStream::new(trial, 1);
        let mut model = ClientModel::new(shape, &mut mrng).unwrap();
        for w in model.teacher.weight.as_mut_slice() {
            *w += 0.5 * rng.gaussian();
        }
        for b in model.teacher.bias.iter_mut() {
            *b += 0.2 * rng.gaussian();
        }
        let cfg = TrainConfig {
            dcr: trial % 4 != 0,
            radius: 0.3 + 2.5 * rng.uniform_open(),
            gamma: 0.01 + 0.2 * rng.uniform_open(),
            tau: 1.0 + 7.0 * rng.uniform_open(),
            lambda1: 2.0 * rng.uniform_open(),
            lambda_proto: rng.uniform_open(),
            ..TrainConfig::default()
        };
        let batch = 1 + rng.below(6);
        let scale = 0.2 + 4.0 * rng.uniform_open();
        let hidden: Vec<Vec<f64>> = (0..batch).map(|_| (0..shape.hidden).map(|_| scale * rng.gaussian()).collect()).collect();
        let refs: Vec<&[f64]> = hidden.iter().map(|v| v.as_slice()).collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.below(shape.classes)).collect();
        // Leave one class without a global prototype in some trials.
        let skip = if trial % 3 == 0 { Some(rng.below(shape.classes)) } else { None };
        let protos: Vec<Prototype> = (0..shape.classes)
            .filter(|&c| Some(c) != skip)
            .map(|c| Prototype { class: c, cluster: 0, support: 5, vector: (0..shape.dim).map(|_| rng.gaussian()).collect() })
            .collect();
        let global = PrototypeSet::new(usize::MAX, 0, protos).unwrap();
        let (_, g) = loss_and_grad(&model, &refs, &labels, Some(&global), &cfg).unwrap();
        let analytic = g.to_flat();
        let theta = model.params.to_flat();
        let fd = finite_diff_grad(
            |p: &[f64]| {
                let mut m = model.clone();
                m.params.set_flat(p).unwrap();
                loss_and_grad(&m, &refs, &labels, Some(&global), &cfg).unwrap().0.total
            },
            &theta,
            1e-6,
        );
        let diff: Vec<f64> = analytic.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let denom = norm2(&analytic).max(norm2(&fd)).max(1e-12);
        worst = worst.max(norm2(&diff) / denom);
    }
    outcome(worst <= 1e-4, format!("100 configurations, max relative error {worst:.2e}"))
}

fn planted(seed: u64, n: usize, d: usize) -> FeatureMatrix {
    let mut rng = RngStream::new(seed, 70);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let mut x: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        x[0] += if y == 1 { 1.5 } else { -1.5 };
        rows.push(x);
        labels.push(y);
    }
    FeatureMatrix::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
}

fn signal_selection() -> Outcome {
    let (d, n, rho, eps1, rounds, cap) = (16, 2000, 0.25, 0.5, 1, 0.1);
    let mut hits = 0;
    for seed in 0..100u64 {
        let fm = planted(seed, n, d);
        let mut rng = RngStream::new(seed, 71);
        let mask = private_partition(&fm, rho, cap, eps1, rounds, &mut rng).unwrap();
        hits += usize::from(mask.is_selected(0));
    }
    // Independent estimate: coordinate 0 scores H, the rest score ~0, Laplace scale 2·d_A·H·T/ε₁.
    let d_a = PartitionMask::d_a_for(d, rho);
    let lambda = 2.0 * d_a as f64 * cap * rounds as f64 / eps1;
    let mut orng = RngStream::new(72, 0);
    let trials = 200_000;
    let mut ideal = 0usize;
    for _ in 0..trials {
        let top = cap + orng.laplace(lambda);
        let above = (1..d).filter(|_| orng.laplace(lambda) > top).count();
        ideal += usize::from(above < d_a);
    }
    outcome(
        hits >= 99,
        format!(
            "informative coordinate selected in {hits}/100 seeds (lambda={lambda}, idealised rate {:.3})",
            ideal as f64 / trials as f64
        ),
    )
}

fn score_vs_mi() -> Outcome {
    let (d, n, classes) = (16, 6000, 3);
    let mut rng = RngStream::new(8, 0);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        let centre = y as f64 - 1.0;
        rows.push((0..d).map(|j| 1.5 * j as f64 / (d - 1) as f64 * centre + rng.gaussian()).collect::<Vec<f64>>());
        labels.push(y);
    }
    let fm = FeatureMatrix::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
    let diag = score_diagnostics(&fm, None, DEFAULT_MI_BINS).unwrap();
    let s: Vec<f64> = diag.iter().map(|r| r.score).collect();
    let mi: Vec<f64> = diag.iter().map(|r| r.mutual_information).collect();
    let rho = spearman(&s, &mi);
    outcome(rho >= 0.7, format!("n={n}, d={d}, Spearman(S, MI) = {rho:.4}"))
}

type Bench = BTreeMap<&'static str, Vec<Summary>>;

fn benchmark() -> Bench {
    let mut base = RunConfig::default();
    base.attack.enabled = true;
    let mut out = Bench::new();
    for (name, method) in [("noldp", Method::Noldp), ("igpp", Method::Igpp), ("vpdr", Method::Vpdr)] {
        let runs = (0..5u64)
            .map(|seed| execute(&base.with_method(method, 1.0, seed)).unwrap().summary)
            .collect();
        out.insert(name, runs);
    }
    out
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn attack_mean(runs: &[Summary], key: &str) -> f64 {
    mean(runs.iter().map(|s| s.attack.as_ref().unwrap()[key].mean))
}

fn utility_ordering(bench: &Bench) -> Outcome {
    let acc = |m: &str| mean(bench[m].iter().map(|s| s.final_avg));
    let (noldp, igpp, vpdr) = (acc("noldp"), acc("igpp"), acc("vpdr"));
    let gaps: Vec<f64> = bench["vpdr"].iter().zip(&bench["igpp"]).map(|(v, i)| v.final_avg - i.final_avg).collect();
    let gap = mean(gaps.iter().copied());
    let sd = (gaps.iter().map(|g| (g - gap).powi(2)).sum::<f64>() / (gaps.len() - 1) as f64).sqrt();
    outcome(
        noldp >= vpdr && vpdr >= igpp,
        format!(
            "5 seeds: NoLDP {noldp:.2}, VPDR {vpdr:.2}, IGPP {igpp:.2}; VPDR-IGPP gap {gap:+.2} ± {:.2} (s.e.)",
            sd / (gaps.len() as f64).sqrt()
        ),
    )
}

fn attack_parity(bench: &Bench) -> Outcome {
    let auc = |m: &str| attack_mean(&bench[m], "mia_roc_auc");
    let cos = |m: &str| attack_mean(&bench[m], "fsh_cosine_similarity");
    let (a_n, a_i, a_v) = (auc("noldp"), auc("igpp"), auc("vpdr"));
    let (c_n, c_i, c_v) = (cos("noldp"), cos("igpp"), cos("vpdr"));
    let band = |a: f64| (0.45..=0.55).contains(&a);
    let ok = a_n > 0.55 && band(a_i) && band(a_v) && (a_v - a_i).abs() <= 0.03 && c_i <= 0.8 * c_n && c_v <= 0.8 * c_n;
    outcome(
        ok,
        format!("MIA AUC NoLDP {a_n:.4} IGPP {a_i:.4} VPDR {a_v:.4}; FSH cosine NoLDP {c_n:.4} IGPP {c_i:.4} VPDR {c_v:.4}"),
    )
}

fn norm_concentration() -> Outcome {
    let mut base = RunConfig::default().with_method(Method::Vpdr, 1.0, 0);
    base.attack.enabled = false;
    let dist = |lambda1: f64| {
        mean((0..5u64).map(|seed| {
            let mut c = base.clone();
            c.seed = seed;
            c.train.lambda1 = lambda1;
            (execute(&c).unwrap().summary.final_mean_pre_clip_norm - c.privacy.clip_radius).abs()
        }))
    };
    let (with_kd, without) = (dist(0.05), dist(0.0));
    outcome(with_kd <= without, format!("mean |‖z‖ - R| over 5 seeds: lambda1=0.05 {with_kd:.6}, lambda1=0 {without:.6}"))
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::default().with_method(Method::Vpdr, 1.0, 7);
    cfg.attack.enabled = true;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_run(&execute(&cfg).unwrap(), a.path()).unwrap();
    write_run(&execute(&cfg).unwrap(), b.path()).unwrap();
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    let same = read(&a, "summary.json") == read(&b, "summary.json");
    let same_metrics = read(&a, "metrics.csv") == read(&b, "metrics.csv");
    outcome(same && same_metrics, format!("summary.json identical={same}, metrics.csv identical={same_metrics}"))
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {name:<22} {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!o.passed);
    };
    report("calibration", &calibration);
    report("harmonic-condition", &harmonic);
    report("noise-tradeoff", &tradeoff);
    report("laplace-topk-dp", &laplace_dp);
    report("sensitivity-oracle", &sensitivity_oracle);
    report("gradient-exactness", &gradient_exactness);
    report("signal-selection", &signal_selection);
    report("score-vs-mi", &score_vs_mi);
    let start = Instant::now();
    let bench = benchmark();
    println!("     benchmark runs finished [{:.1}s]", start.elapsed().as_secs_f64());
    report("utility-ordering", &|| utility_ordering(&bench));
    report("attack-parity", &|| attack_parity(&bench));
    report("norm-concentration", &norm_concentration);
    report("determinism", &determinism);
    println!("{} of 12 acceptance checks failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
