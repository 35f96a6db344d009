//! Run configuration: a sectioned TOML file plus `section.key=value`
//! overrides. Every field has a default, unknown keys are rejected and
//! validation errors name the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DomainSkewConfig;
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::localtrain::TrainConfig;
use crate::privacy::PrivacySpec;
use crate::prototypes::Mechanism;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Skew {
    Domain,
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// One federation run (with attacks when `attack.enabled`).
    Train,
    /// Product of `sweep.methods × sweep.epsilons × sweep.seeds`.
    Sweep,
}

/// When feature-space hijacking runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FshRounds {
    Never,
    Last,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub skew: Skew,
    pub clients: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub signal_dim: usize,
    pub margin: f64,
    pub within_std: f64,
    pub noise_spread: f64,
    pub shift_std: f64,
    pub rotate: bool,
    pub input_scale: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Label skew only: Dirichlet concentration.
    pub alpha: f64,
    /// Label skew only: held-out fraction of each client's share.
    pub test_fraction: f64,
    /// Backbone output width.
    pub hidden_dim: usize,
    /// Embedding (prototype) dimension `d`.
    pub feature_dim: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            skew: Skew::Domain,
            clients: 4,
            classes: 10,
            input_dim: 64,
            signal_dim: 8,
            margin: 3.0,
            within_std: 1.0,
            noise_spread: 0.3,
            shift_std: 0.5,
            rotate: true,
            input_scale: 0.05,
            train_per_class: 20,
            test_per_class: 20,
            alpha: 0.5,
            test_fraction: 0.5,
            hidden_dim: 64,
            feature_dim: 16,
        }
    }
}

impl DataSection {
    pub fn domain_config(&self) -> DomainSkewConfig {
        DomainSkewConfig {
            n_clients: if self.skew == Skew::Domain { self.clients } else { 1 },
            n_classes: self.classes,
            input_dim: self.input_dim,
            signal_dim: self.signal_dim,
            margin: self.margin,
            within_std: self.within_std,
            noise_spread: self.noise_spread,
            shift_std: self.shift_std,
            rotate: self.rotate,
            input_scale: self.input_scale,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub delta: f64,
    pub rounds: usize,
    /// Share `r` of ε spent on the partition.
    pub split_ratio: f64,
    pub rho: f64,
    /// Score cap `H`.
    pub score_cap: f64,
    /// Clipping radius `R`.
    pub clip_radius: f64,
    pub k_local: usize,
    pub k_global: usize,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Vpp,
            epsilon: 1.0,
            delta: 1e-5,
            rounds: 20,
            split_ratio: 0.1,
            rho: 0.2,
            score_cap: 0.1,
            clip_radius: 1.0,
            k_local: 1,
            k_global: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Soft clipping plus distillation.
    pub dcr: bool,
    pub gamma: f64,
    pub beta: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda_proto: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dcr: t.dcr,
            gamma: t.gamma,
            beta: t.beta,
            tau: t.tau,
            lambda1: t.lambda1,
            lambda_proto: t.lambda_proto,
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub enabled: bool,
    pub mia_cap: usize,
    pub fsh_rounds: FshRounds,
    pub fsh_max_classes: usize,
    pub fsh_batch: usize,
    pub fsh_steps: usize,
    pub fsh_lr: f64,
    pub fsh_tv_weight: f64,
    pub fsh_patience: usize,
    pub fsh_tolerance: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            enabled: false,
            mia_cap: crate::attacks::MIA_CAP_PER_CLASS,
            fsh_rounds: FshRounds::Last,
            fsh_max_classes: 10,
            fsh_batch: 16,
            fsh_steps: 2000,
            fsh_lr: 0.01,
            fsh_tv_weight: 1e-3,
            fsh_patience: 300,
            fsh_tolerance: 1e-6,
        }
    }
}

impl AttackSection {
    pub fn fsh_config(&self) -> crate::attacks::FshConfig {
        crate::attacks::FshConfig {
            tv_weight: self.fsh_tv_weight,
            max_steps: self.fsh_steps,
            lr: self.fsh_lr,
            patience: self.fsh_patience,
            tolerance: self.fsh_tolerance,
            batch: self.fsh_batch,
            max_classes: self.fsh_max_classes,
        }
    }
}

/// A baseline name with its mechanism and training mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// No noise, no clipping regularization.
    #[serde(alias = "none")]
    Noldp,
    Igpp,
    /// Groupwise release without clipping regularization.
    Vpp,
    /// Groupwise release with clipping regularization.
    Vpdr,
}

impl Method {
    pub fn settings(self) -> (Mechanism, bool) {
        match self {
            Method::Noldp => (Mechanism::None, false),
            Method::Igpp => (Mechanism::Igpp, false),
            Method::Vpp => (Mechanism::Vpp, false),
            Method::Vpdr => (Mechanism::Vpp, true),
        }
    }

    /// Name of a (mechanism, dcr) pair; combinations outside the four named
    /// baselines get a composite label.
    pub fn label(mechanism: Mechanism, dcr: bool) -> String {
        match (mechanism, dcr) {
            (Mechanism::None, false) => "noldp".into(),
            (Mechanism::Igpp, false) => "igpp".into(),
            (Mechanism::Vpp, false) => "vpp".into(),
            (Mechanism::Vpp, true) => "vpdr".into(),
            (m, true) => format!("{}+dcr", m.as_str()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Noldp => "noldp",
            Method::Igpp => "igpp",
            Method::Vpp => "vpp",
            Method::Vpdr => "vpdr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub methods: Vec<Method>,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Noldp, Method::Igpp, Method::Vpdr],
            epsilons: vec![0.5, 1.0, 2.0],
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: Scenario,
    /// Artifact directory; relative paths resolve against the output root.
    pub output: PathBuf,
    pub data: DataSection,
    pub privacy: PrivacySection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario: Scenario::Train,
            output: PathBuf::from("run"),
            data: DataSection::default(),
            privacy: PrivacySection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

fn toml_err(e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    // Field names appear in backticks in serde messages.
    let key = msg.split('`').nth(1).unwrap_or("").to_string();
    Error::config(key, msg)
}

/// Parse an override value as a TOML literal; bare words become strings.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Parse `text`, apply `section.key=value` overrides, validate.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        let known = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Internal(e.to_string()))?;
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.clone(), "override must look like section.key=value"))?;
            let keys: Vec<&str> = path.trim().split('.').collect();
            let mut probe = &known;
            for (i, k) in keys.iter().enumerate() {
                match probe.get(*k) {
                    Some(toml::Value::Table(t)) if i + 1 < keys.len() => probe = t,
                    Some(v) if i + 1 == keys.len() && !v.is_table() => {}
                    _ => return Err(Error::config(path.trim(), "unknown configuration key")),
                }
            }
            let mut node = &mut table;
            for k in &keys[..keys.len() - 1] {
                node = node
                    .entry(k.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::config(path.trim(), "not a section"))?;
            }
            node.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(toml_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config serialization: {e}")))
    }

    pub fn privacy_spec(&self) -> PrivacySpec {
        PrivacySpec {
            epsilon: self.privacy.epsilon,
            delta: self.privacy.delta,
            rounds: self.privacy.rounds,
            split_ratio: self.privacy.split_ratio,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            dcr: t.dcr,
            radius: self.privacy.clip_radius,
            gamma: t.gamma,
            beta: t.beta,
            tau: t.tau,
            lambda1: t.lambda1,
            lambda_proto: t.lambda_proto,
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            ..TrainConfig::default()
        }
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            mechanism: self.privacy.mechanism,
            privacy: self.privacy_spec(),
            rho: self.privacy.rho,
            score_cap: self.privacy.score_cap,
            k_local: self.privacy.k_local,
            k_global: self.privacy.k_global,
            hidden: self.data.hidden_dim,
            dim: self.data.feature_dim,
            train: self.train_config(),
        }
    }

    pub fn method_label(&self) -> String {
        Method::label(self.privacy.mechanism, self.train.dcr)
    }

    /// Copy with a named baseline, ε and seed substituted.
    pub fn with_method(&self, method: Method, epsilon: f64, seed: u64) -> Self {
        let mut c = self.clone();
        let (mech, dcr) = method.settings();
        c.privacy.mechanism = mech;
        c.train.dcr = dcr;
        c.privacy.epsilon = epsilon;
        c.seed = seed;
        c.scenario = Scenario::Train;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let p = &self.privacy;
        let t = &self.train;
        let a = &self.attack;
        let req = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(key, msg)) };
        req(d.clients >= 1, "data.clients", "must be at least 1")?;
        req(d.classes >= 2, "data.classes", "must be at least 2")?;
        req(d.input_dim >= 1, "data.input_dim", "must be positive")?;
        req(d.signal_dim >= 1 && d.signal_dim <= d.input_dim, "data.signal_dim", "must lie in 1..=input_dim")?;
        req(d.margin > 0.0, "data.margin", "must be positive")?;
        req(d.within_std >= 0.0, "data.within_std", "must be non-negative")?;
        req(d.noise_spread >= 0.0 && d.noise_spread < 1.0, "data.noise_spread", "must lie in [0, 1)")?;
        req(d.shift_std >= 0.0, "data.shift_std", "must be non-negative")?;
        req(d.input_scale > 0.0, "data.input_scale", "must be positive")?;
        req(d.train_per_class >= 1, "data.train_per_class", "must be positive")?;
        req(d.test_per_class >= 1, "data.test_per_class", "must be positive")?;
        req(d.alpha > 0.0 && d.alpha.is_finite(), "data.alpha", "must be positive")?;
        req(d.test_fraction > 0.0 && d.test_fraction < 1.0, "data.test_fraction", "must lie in (0, 1)")?;
        req(d.hidden_dim >= 1, "data.hidden_dim", "must be positive")?;
        req(d.feature_dim >= 2, "data.feature_dim", "must be at least 2")?;

        req(p.epsilon > 0.0 && p.epsilon.is_finite(), "privacy.epsilon", "must be positive")?;
        req(p.delta > 0.0 && p.delta < 1.0, "privacy.delta", "must lie in (0, 1)")?;
        req(p.rounds >= 1, "privacy.rounds", "must be positive")?;
        req(p.split_ratio > 0.0 && p.split_ratio < 1.0, "privacy.split_ratio", "must lie in (0, 1)")?;
        req(p.rho > 0.0 && p.rho <= 0.5, "privacy.rho", "must lie in (0, 0.5]")?;
        req(
            crate::scoring::PartitionMask::d_a_for(d.feature_dim, p.rho) < d.feature_dim,
            "privacy.rho",
            "leaves the complementary group empty",
        )?;
        req(p.score_cap > 0.0, "privacy.score_cap", "must be positive")?;
        req(p.clip_radius > 0.0 && p.clip_radius.is_finite(), "privacy.clip_radius", "must be positive")?;
        req(p.k_local >= 1, "privacy.k_local", "must be positive")?;
        req(p.k_global >= 1, "privacy.k_global", "must be positive")?;

        req(t.gamma > 0.0 && t.gamma < 1.0, "train.gamma", "must lie in (0, 1)")?;
        req((0.0..1.0).contains(&t.beta), "train.beta", "must lie in [0, 1)")?;
        req(t.tau > 0.0, "train.tau", "must be positive")?;
        req(t.lambda1 >= 0.0, "train.lambda1", "must be non-negative")?;
        req(t.lambda_proto >= 0.0, "train.lambda_proto", "must be non-negative")?;
        req(t.lr > 0.0, "train.lr", "must be positive")?;
        req(t.weight_decay >= 0.0, "train.weight_decay", "must be non-negative")?;
        req(t.batch_size >= 1, "train.batch_size", "must be positive")?;

        req(a.mia_cap >= 1, "attack.mia_cap", "must be positive")?;
        req(a.fsh_batch >= 1, "attack.fsh_batch", "must be positive")?;
        req(a.fsh_steps >= 1, "attack.fsh_steps", "must be positive")?;
        req(a.fsh_lr > 0.0, "attack.fsh_lr", "must be positive")?;
        req(a.fsh_tv_weight >= 0.0, "attack.fsh_tv_weight", "must be non-negative")?;
        req(a.fsh_max_classes >= 1, "attack.fsh_max_classes", "must be positive")?;

        if self.scenario == Scenario::Sweep {
            let s = &self.sweep;
            req(!s.methods.is_empty(), "sweep.methods", "must not be empty")?;
            req(!s.epsilons.is_empty(), "sweep.epsilons", "must not be empty")?;
            req(s.epsilons.iter().all(|e| *e > 0.0 && e.is_finite()), "sweep.epsilons", "must be positive")?;
            req(!s.seeds.is_empty(), "sweep.seeds", "must not be empty")?;
        }
        Ok(())
    }
}
