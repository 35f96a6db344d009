//! Scenario execution, artifact layout and cross-run reports.
//!
//! A run directory holds `config.toml` (resolved snapshot), `metrics.csv`,
//! `losses.csv`, `uploads.log`, `attack.csv` (when attacks ran) and
//! `summary.json`. A sweep directory holds one run directory per
//! `(method, ε, seed)` plus the comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::attacks::{fsh_evaluate, mia_evaluate, AttackRecord, AttackReport, MeanStd, VictimEncoder};
use crate::config::{FshRounds, Method, RunConfig, Scenario, Skew};
use crate::data::{gen_domain_skew, gen_label_skew, split_train_test, ClientSplit, DomainSkewConfig};
use crate::error::{Error, Result};
use crate::federation::{RoundMetrics, Simulation, Upload, LOSSES_HEADER, METRICS_HEADER};
use crate::numerics::{mean, RngStream};
use crate::privacy::calibrate_laplace_scale;
use crate::prototypes::Mechanism;
use crate::scoring::PartitionMask;

/// Bumped whenever `summary.json` changes shape.
pub const SCHEMA_VERSION: u32 = 1;

const TAG_DATA: u64 = 10;
const TAG_ATTACK: u64 = 11;

/// Per-client train/test inputs for the configured benchmark.
pub fn build_splits(cfg: &RunConfig) -> Result<Vec<ClientSplit>> {
    let mut rng = RngStream::derive(cfg.seed, &[TAG_DATA]);
    let d = &cfg.data;
    match d.skew {
        Skew::Domain => {
            let domains = d.domain_config().domains(&mut rng)?;
            gen_domain_skew(&domains, &mut rng)
        }
        Skew::Label => {
            let pool_cfg = DomainSkewConfig {
                n_clients: 1,
                rotate: false,
                shift_std: 0.0,
                noise_spread: 0.0,
                train_per_class: d.train_per_class + d.test_per_class,
                ..d.domain_config()
            };
            let domain = pool_cfg.domains(&mut rng)?;
            let pool = gen_domain_skew(&domain, &mut rng)?.remove(0).train;
            let parts = gen_label_skew(&pool, d.clients, d.alpha, &mut rng)?;
            parts
                .iter()
                .map(|idx| split_train_test(&pool.subset(idx), d.test_fraction, &mut rng))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub sigma_iso: f64,
    pub sigma_ref: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub laplace_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub method: String,
    pub mechanism: Mechanism,
    pub dcr: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub rounds: usize,
    pub seed: u64,
    pub clients: usize,
    /// Final-round accuracy (percent) across clients.
    pub final_avg: f64,
    pub final_std: f64,
    pub per_client: Vec<f64>,
    pub avg_by_round: Vec<f64>,
    /// Mean `‖z‖` over clients' training data after the last round.
    pub final_mean_pre_clip_norm: f64,
    pub noise: NoiseSummary,
    pub attack: Option<BTreeMap<String, MeanStd>>,
}

/// Everything a run produces, before it is written out.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: RunConfig,
    pub summary: Summary,
    pub history: Vec<RoundMetrics>,
    pub uploads_log: String,
    pub attack: Option<AttackReport>,
}

fn attack_round(sim: &Simulation, uploads: &[Upload], cfg: &RunConfig, round: usize, last: bool) -> Result<Vec<AttackRecord>> {
    let fsh_now = match cfg.attack.fsh_rounds {
        FshRounds::Never => false,
        FshRounds::Last => last,
        FshRounds::All => true,
    };
    let train_cfg = &sim.cfg.train;
    let seed = cfg.seed;
    std::thread::scope(|s| {
        let handles: Vec<_> = sim
            .clients
            .iter()
            .zip(uploads)
            .map(|(c, up)| {
                s.spawn(move || -> Result<AttackRecord> {
                    let enc = VictimEncoder { model: &c.model, cfg: train_cfg };
                    let released = &up.message.payload;
                    let mia = mia_evaluate(&enc, released, &c.train_inputs, &c.test_inputs, cfg.attack.mia_cap)?;
                    let fsh = if fsh_now {
                        let clean = c.train_inputs.map_rows(|x| crate::attacks::Encoder::encode(&enc, x))?;
                        let mut rng = RngStream::derive(seed, &[TAG_ATTACK, c.id as u64, round as u64]);
                        Some(fsh_evaluate(&enc, released, &clean, &cfg.attack.fsh_config(), &mut rng)?)
                    } else {
                        None
                    };
                    Ok(AttackRecord {
                        round,
                        client: c.id,
                        mia: Some(mia),
                        fsh,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::runtime("attack thread panicked"))))
            .collect::<Result<Vec<_>>>()
    })
    .map_err(|e| Error::runtime(format!("round {round} attack: {e}")))
}

fn noise_summary(cfg: &RunConfig) -> Result<NoiseSummary> {
    let spec = cfg.privacy_spec();
    let (eps1, eps2) = spec.split()?;
    let d_a = PartitionMask::d_a_for(cfg.data.feature_dim, cfg.privacy.rho);
    Ok(NoiseSummary {
        sigma_iso: spec.sigma_iso()?,
        sigma_ref: spec.sigma_ref()?,
        eps1,
        eps2,
        laplace_scale: calibrate_laplace_scale(d_a, cfg.privacy.score_cap, cfg.privacy.rounds, eps1)?,
    })
}

/// Run one federation (and attacks when enabled) in memory.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let splits = build_splits(cfg)?;
    let mut sim = Simulation::new(cfg.federation_config(), splits, cfg.data.classes, cfg.seed)?;
    let mut uploads_log = String::new();
    let mut report = cfg.attack.enabled.then(AttackReport::default);
    let rounds = sim.n_rounds();
    for round in 0..rounds {
        let uploads = sim.upload_phase()?;
        for u in &uploads {
            uploads_log.push_str(&u.message.payload.encode_wire());
        }
        if let Some(rep) = report.as_mut() {
            for r in attack_round(&sim, &uploads, cfg, round, round + 1 == rounds)? {
                rep.push(r);
            }
        }
        let m = sim.finish_round(&uploads)?;
        info!("round {round}: avg {:.2} std {:.2}", m.eval.avg, m.eval.std);
    }
    let last = sim.history.last().ok_or_else(|| Error::Internal("no rounds ran".into()))?;
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        method: cfg.method_label(),
        mechanism: cfg.privacy.mechanism,
        dcr: cfg.train.dcr,
        epsilon: cfg.privacy.epsilon,
        delta: cfg.privacy.delta,
        rounds,
        seed: cfg.seed,
        clients: sim.clients.len(),
        final_avg: last.eval.avg,
        final_std: last.eval.std,
        per_client: last.eval.per_client.clone(),
        avg_by_round: sim.history.iter().map(|h| h.eval.avg).collect(),
        final_mean_pre_clip_norm: mean(&last.clients.iter().map(|c| c.mean_norm).collect::<Vec<_>>()),
        noise: noise_summary(cfg)?,
        attack: report.as_ref().map(|r| r.aggregate()),
    };
    Ok(RunOutput {
        config: cfg.clone(),
        summary,
        history: sim.history,
        uploads_log,
        attack: report,
    })
}

/// Write a run's artifacts into `dir`.
pub fn write_run(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), out.config.to_toml_string()?)?;
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut losses = String::from(LOSSES_HEADER);
    losses.push('\n');
    for h in &out.history {
        for r in h.csv_rows() {
            let _ = writeln!(metrics, "{r}");
        }
        for r in h.loss_rows() {
            let _ = writeln!(losses, "{r}");
        }
    }
    fs::write(dir.join("metrics.csv"), metrics)?;
    fs::write(dir.join("losses.csv"), losses)?;
    fs::write(dir.join("uploads.log"), &out.uploads_log)?;
    if let Some(rep) = &out.attack {
        let mut text = String::from(AttackReport::CSV_HEADER);
        text.push('\n');
        for r in rep.csv_rows(&out.summary.method, out.summary.epsilon) {
            let _ = writeln!(text, "{r}");
        }
        fs::write(dir.join("attack.csv"), text)?;
    }
    let mut json = serde_json::to_string_pretty(&out.summary)?;
    json.push('\n');
    fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

fn run_dir_name(method: Method, epsilon: f64, seed: u64) -> String {
    format!("{}_eps{epsilon}_seed{seed}", method.as_str())
}

/// Execute the configured scenario under `dir`; returns the run directories.
pub fn run(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    match cfg.scenario {
        Scenario::Train => {
            let out = execute(cfg)?;
            write_run(&out, dir)?;
            Ok(vec![dir.to_path_buf()])
        }
        Scenario::Sweep => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
            let mut dirs = Vec::new();
            for &method in &cfg.sweep.methods {
                for &eps in &cfg.sweep.epsilons {
                    for &seed in &cfg.sweep.seeds {
                        let sub = dir.join(run_dir_name(method, eps, seed));
                        let c = cfg.with_method(method, eps, seed);
                        info!("sweep: {}", sub.display());
                        let out = execute(&c).map_err(|e| Error::runtime(format!("{}: {e}", sub.display())))?;
                        write_run(&out, &sub)?;
                        dirs.push(sub);
                    }
                }
            }
            let rep = build_report(&load_summaries(&dirs)?)?;
            write_report(&rep, dir)?;
            Ok(dirs)
        }
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Read `summary.json` from each directory, or from its immediate
/// subdirectories when it has none. All must share [`SCHEMA_VERSION`].
pub fn load_summaries(dirs: &[PathBuf]) -> Result<Vec<Summary>> {
    let mut files = Vec::new();
    for d in dirs {
        let direct = d.join("summary.json");
        if direct.is_file() {
            files.push(direct);
            continue;
        }
        let mut subs: Vec<PathBuf> = fs::read_dir(d)
            .map_err(|e| Error::invalid(format!("cannot read {}: {e}", d.display())))?
            .filter_map(|e| e.ok().map(|e| e.path().join("summary.json")))
            .filter(|p| p.is_file())
            .collect();
        if subs.is_empty() {
            return Err(Error::invalid(format!("{} holds no summary.json", d.display())));
        }
        subs.sort();
        files.extend(subs);
    }
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let text = fs::read_to_string(&f)?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let version = v.get("schema_version").and_then(|x| x.as_u64());
        if version != Some(u64::from(SCHEMA_VERSION)) {
            return Err(Error::config(
                "schema_version",
                format!("{} has schema {:?}, expected {SCHEMA_VERSION}", f.display(), version),
            ));
        }
        out.push(serde_json::from_value(v)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub epsilon: f64,
    pub runs: usize,
    /// Mean and spread over runs of the final AVG accuracy.
    pub avg: MeanStd,
    /// Mean over runs of the across-client STD.
    pub std_mean: f64,
    pub attack: BTreeMap<String, MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedRow {
    pub epsilon: f64,
    pub method: String,
    pub baseline: String,
    pub pairs: usize,
    pub method_avg: f64,
    pub baseline_avg: f64,
    /// Mean over seeds of `method − baseline` AVG.
    pub delta: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub paired: Vec<PairedRow>,
    /// `(method, ε, seed, metric, value)`.
    pub long: Vec<(String, f64, u64, String, f64)>,
}

const PAIR_BASELINE: &str = "igpp";

pub fn build_report(summaries: &[Summary]) -> Result<Report> {
    if summaries.is_empty() {
        return Err(Error::invalid("nothing to report"));
    }
    let key = |s: &Summary| (s.method.clone(), s.epsilon.to_bits());
    let mut groups: BTreeMap<(String, u64), Vec<&Summary>> = BTreeMap::new();
    for s in summaries {
        groups.entry(key(s)).or_default().push(s);
    }
    let mut rows = Vec::new();
    for ((method, eps_bits), runs) in &groups {
        let avgs: Vec<f64> = runs.iter().map(|s| s.final_avg).collect();
        let mut metric_vals: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in runs {
            for (m, v) in s.attack.iter().flatten() {
                metric_vals.entry(m.clone()).or_default().push(v.mean);
            }
        }
        rows.push(ReportRow {
            method: method.clone(),
            epsilon: f64::from_bits(*eps_bits),
            runs: runs.len(),
            avg: MeanStd::of(&avgs).expect("non-empty group"),
            std_mean: mean(&runs.iter().map(|s| s.final_std).collect::<Vec<_>>()),
            attack: metric_vals.into_iter().filter_map(|(m, v)| MeanStd::of(&v).map(|s| (m, s))).collect(),
        });
    }

    let mut paired = Vec::new();
    let eps_set: BTreeSet<u64> = groups.keys().map(|k| k.1).collect();
    for eps in eps_set {
        let Some(base) = groups.get(&(PAIR_BASELINE.to_string(), eps)) else {
            continue;
        };
        let base_by_seed: BTreeMap<u64, f64> = base.iter().map(|s| (s.seed, s.final_avg)).collect();
        for ((method, e), runs) in &groups {
            if *e != eps || method == PAIR_BASELINE {
                continue;
            }
            let pairs: Vec<(f64, f64)> = runs
                .iter()
                .filter_map(|s| base_by_seed.get(&s.seed).map(|b| (s.final_avg, *b)))
                .collect();
            if pairs.is_empty() {
                continue;
            }
            let deltas: Vec<f64> = pairs.iter().map(|(m, b)| m - b).collect();
            paired.push(PairedRow {
                epsilon: f64::from_bits(eps),
                method: method.clone(),
                baseline: PAIR_BASELINE.to_string(),
                pairs: pairs.len(),
                method_avg: mean(&pairs.iter().map(|p| p.0).collect::<Vec<_>>()),
                baseline_avg: mean(&pairs.iter().map(|p| p.1).collect::<Vec<_>>()),
                delta: MeanStd::of(&deltas).expect("non-empty pairs"),
            });
        }
    }

    let mut long = Vec::new();
    for s in summaries {
        let mut push = |m: &str, v: f64| long.push((s.method.clone(), s.epsilon, s.seed, m.to_string(), v));
        push("avg", s.final_avg);
        push("std", s.final_std);
        push("final_mean_pre_clip_norm", s.final_mean_pre_clip_norm);
        for (m, v) in s.attack.iter().flatten() {
            push(m, v.mean);
        }
    }
    Ok(Report { rows, paired, long })
}

pub fn render_text(rep: &Report) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "{:<10} {:>7} {:>5} {:>16} {:>8}", "method", "epsilon", "runs", "AVG", "STD");
    for r in &rep.rows {
        let _ = writeln!(
            t,
            "{:<10} {:>7} {:>5} {:>8.2} ± {:<5.2} {:>8.2}",
            r.method, r.epsilon, r.runs, r.avg.mean, r.avg.std, r.std_mean
        );
    }
    if !rep.paired.is_empty() {
        let _ = writeln!(t, "\n{:<10} {:>7} {:>5} {:>9} {:>9} {:>16}", "method", "epsilon", "pairs", "AVG", "baseline", "delta");
        for p in &rep.paired {
            let _ = writeln!(
                t,
                "{:<10} {:>7} {:>5} {:>9.2} {:>9.2} {:>+8.2} ± {:<5.2}",
                p.method, p.epsilon, p.pairs, p.method_avg, p.baseline_avg, p.delta.mean, p.delta.std
            );
        }
    }
    if rep.rows.iter().any(|r| !r.attack.is_empty()) {
        let _ = writeln!(t, "\n{:<10} {:>7} {:<24} {:>20}", "method", "epsilon", "metric", "mean ± std");
        for r in &rep.rows {
            for (m, s) in &r.attack {
                let _ = writeln!(t, "{:<10} {:>7} {:<24} {:>10.4} ± {:<8.4}", r.method, r.epsilon, m, s.mean, s.std);
            }
        }
    }
    t
}

/// `comparison.csv`, `paired.csv` (when a baseline pair exists),
/// `attack_table.csv` (when any run has attacks), `long.csv` and
/// `comparison.txt`.
pub fn write_report(rep: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut c = String::from("method,epsilon,runs,avg_mean,avg_std,std_mean\n");
    for r in &rep.rows {
        let _ = writeln!(c, "{},{:?},{},{:?},{:?},{:?}", r.method, r.epsilon, r.runs, r.avg.mean, r.avg.std, r.std_mean);
    }
    fs::write(dir.join("comparison.csv"), c)?;
    if !rep.paired.is_empty() {
        let mut p = String::from("epsilon,method,baseline,pairs,method_avg,baseline_avg,delta_mean,delta_std\n");
        for r in &rep.paired {
            let _ = writeln!(
                p,
                "{:?},{},{},{},{:?},{:?},{:?},{:?}",
                r.epsilon, r.method, r.baseline, r.pairs, r.method_avg, r.baseline_avg, r.delta.mean, r.delta.std
            );
        }
        fs::write(dir.join("paired.csv"), p)?;
    }
    if rep.rows.iter().any(|r| !r.attack.is_empty()) {
        let mut a = String::from(AttackReport::CSV_HEADER);
        a.push('\n');
        for r in &rep.rows {
            for (m, s) in &r.attack {
                let _ = writeln!(a, "{},{:?},{m},{:?},{:?}", r.method, r.epsilon, s.mean, s.std);
            }
        }
        fs::write(dir.join("attack_table.csv"), a)?;
    }
    let mut l = String::from("method,epsilon,seed,metric,value\n");
    for (m, e, s, k, v) in &rep.long {
        let _ = writeln!(l, "{m},{e:?},{s},{k},{v:?}");
    }
    fs::write(dir.join("long.csv"), l)?;
    fs::write(dir.join("comparison.txt"), render_text(rep))?;
    Ok(())
}

/// Per-round MIA AUC averaged over clients, for building round-averaged
/// comparisons outside a full report.
pub fn round_mean_auc(rep: &AttackReport) -> Vec<f64> {
    let mut by_round: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &rep.records {
        if let Some(m) = r.mia {
            by_round.entry(r.round).or_default().push(m.roc_auc);
        }
    }
    by_round.values().map(|v| mean(v)).collect()
}

