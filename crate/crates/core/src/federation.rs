//! Round loop: clients upload privatized prototypes, the server aggregates
//! them into global prototypes, clients train locally against the broadcast.
//!
//! Everything runs in-process. Messages carry only [`PrototypeSet`]s and are
//! serialized with the flat wire encoding, which also serves as the upload log.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::data::{ClientSplit, FeatureMatrix};
use crate::error::{Error, Result};
use crate::localtrain::{mean_embedding_norm, train_epochs, AdamW, ClientModel, LossBreakdown, ModelShape, TrainConfig};
use crate::numerics::{kmeans, mean, std_pop, Matrix, RngStream};
use crate::privacy::{group_noise_params, PrivacySpec};
use crate::prototypes::{clip_features, compute_prototypes, Mechanism, Prototype, PrototypeSet, ReleaseConfig, KMEANS_ITERS};
use crate::scoring::{anova_scores, partition_scores, variance_stats, PartitionMask, DEFAULT_ZETA};
use crate::privacy::calibrate_laplace_scale;

/// `client_id` of server-generated prototype sets.
pub const SERVER_ID: usize = usize::MAX;

/// Scalar fields carried next to each prototype vector on the wire.
pub const WIRE_FIELDS_PER_PROTOTYPE: usize = 5;

// Stream tags.
const TAG_MODEL: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_RELEASE: u64 = 3;
const TAG_SERVER: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Upload,
    Download,
}

/// The only thing that crosses the simulated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub direction: Direction,
    pub round: usize,
    /// Sender for uploads; `None` for broadcasts.
    pub client_id: Option<usize>,
    pub payload: PrototypeSet,
}

impl RoundMessage {
    pub fn upload(payload: PrototypeSet) -> Self {
        Self {
            direction: Direction::Upload,
            round: payload.round,
            client_id: Some(payload.client_id),
            payload,
        }
    }

    pub fn download(payload: PrototypeSet) -> Self {
        Self {
            direction: Direction::Download,
            round: payload.round,
            client_id: None,
            payload,
        }
    }

    /// Serialize and parse back, as a network hop would.
    pub fn transmit(&self) -> Result<Self> {
        Ok(Self {
            payload: PrototypeSet::decode_wire(&self.payload.encode_wire())?,
            ..self.clone()
        })
    }

    /// Number of floats on the wire.
    pub fn volume(&self) -> usize {
        self.payload
            .prototypes
            .iter()
            .map(|p| p.vector.len() + WIRE_FIELDS_PER_PROTOTYPE)
            .sum()
    }
}

/// Support-weighted per-class means (`k_global = 1`) or per-class k-means
/// over the uploaded prototypes. A class with at most `k_global` uploaded
/// prototypes keeps them as they are.
pub fn generate_global(uploads: &[PrototypeSet], k_global: usize, round: usize, rng: &mut RngStream) -> Result<PrototypeSet> {
    if uploads.is_empty() {
        return Err(Error::invalid("no uploads to aggregate"));
    }
    if k_global == 0 {
        return Err(Error::invalid("k_global must be positive"));
    }
    let mut classes: Vec<usize> = uploads.iter().flat_map(|u| u.classes()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for class in classes {
        let members: Vec<&Prototype> = uploads.iter().flat_map(|u| u.for_class(class)).collect();
        let d = members[0].vector.len();
        if members.iter().any(|p| p.vector.len() != d) {
            return Err(Error::invalid(format!("class {class}: uploads disagree on dimension")));
        }
        if k_global == 1 {
            let total: usize = members.iter().map(|p| p.support).sum();
            let mut v = vec![0.0; d];
            for p in &members {
                let w = p.support as f64 / total as f64;
                for (a, b) in v.iter_mut().zip(&p.vector) {
                    *a += w * b;
                }
            }
            out.push(Prototype { class, cluster: 0, support: total, vector: v });
        } else if members.len() <= k_global {
            for (cluster, p) in members.iter().enumerate() {
                out.push(Prototype { class, cluster, support: p.support, vector: p.vector.clone() });
            }
        } else {
            let rows: Vec<Vec<f64>> = members.iter().map(|p| p.vector.clone()).collect();
            let res = kmeans(&Matrix::from_rows(&rows)?, k_global, KMEANS_ITERS, rng)?;
            for (cluster, centroid) in res.centroids.iter_rows().enumerate() {
                let support: usize = members
                    .iter()
                    .zip(&res.assignment)
                    .filter(|(_, &a)| a == cluster)
                    .map(|(p, _)| p.support)
                    .sum();
                if support > 0 {
                    out.push(Prototype { class, cluster, support, vector: centroid.to_vec() });
                }
            }
        }
    }
    PrototypeSet::new(SERVER_ID, round, out)
}

/// Per-client accuracy in percent with the mean and population std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_client: Vec<f64>,
    pub avg: f64,
    pub std: f64,
}

impl Evaluation {
    pub fn from_accuracies(per_client: Vec<f64>) -> Self {
        Self {
            avg: mean(&per_client),
            std: std_pop(&per_client),
            per_client,
        }
    }
}

/// Argmax accuracy of one model on backbone outputs.
pub fn accuracy(model: &ClientModel, hidden: &FeatureMatrix, cfg: &TrainConfig) -> Result<f64> {
    if hidden.is_empty() {
        return Err(Error::invalid("empty test split"));
    }
    let hits = hidden
        .features
        .iter_rows()
        .zip(&hidden.labels)
        .filter(|(h, &y)| model.predict_hidden(h, cfg) == y)
        .count();
    Ok(100.0 * hits as f64 / hidden.len() as f64)
}

pub fn evaluate(clients: &[Client], cfg: &TrainConfig) -> Result<Evaluation> {
    let acc = clients
        .iter()
        .map(|c| accuracy(&c.model, &c.test_hidden, cfg).map_err(|e| Error::invalid(format!("client {}: {e}", c.id))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_accuracies(acc))
}

/// Protocol settings shared by all clients.
#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub mechanism: Mechanism,
    pub privacy: PrivacySpec,
    pub rho: f64,
    /// Score cap `H`.
    pub score_cap: f64,
    pub k_local: usize,
    pub k_global: usize,
    pub hidden: usize,
    pub dim: usize,
    pub train: TrainConfig,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        self.privacy.validate()?;
        self.train.validate()?;
        if !(self.rho > 0.0 && self.rho <= 0.5) {
            return Err(Error::config("rho", "must lie in (0, 0.5]"));
        }
        if !(self.score_cap > 0.0) {
            return Err(Error::config("score_cap", "must be positive"));
        }
        if self.k_local == 0 || self.k_global == 0 {
            return Err(Error::config("k_local", "prototype counts must be positive"));
        }
        if self.hidden == 0 || self.dim == 0 {
            return Err(Error::config("dim", "model dimensions must be positive"));
        }
        Ok(())
    }
}

/// State private to one client.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    pub model: ClientModel,
    pub opt: AdamW,
    pub train_inputs: FeatureMatrix,
    pub test_inputs: FeatureMatrix,
    pub train_hidden: FeatureMatrix,
    pub test_hidden: FeatureMatrix,
}

/// What a client produced in the upload phase. Only `message` leaves the
/// client; the rest is kept for diagnostics and attack evaluation.
#[derive(Debug, Clone)]
pub struct Upload {
    pub message: RoundMessage,
    /// Prototypes before noise.
    pub clean: PrototypeSet,
    pub mask: Option<PartitionMask>,
}

/// Per-client row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundMetrics {
    pub round: usize,
    pub client: usize,
    pub accuracy: f64,
    /// Breakdown of the last local epoch.
    pub loss: LossBreakdown,
    /// Mean `‖z‖` over the training set after local training.
    pub mean_norm: f64,
    pub upload_volume: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub eval: Evaluation,
    pub clients: Vec<ClientRoundMetrics>,
    /// `(client, epoch, breakdown)` for every local epoch this round.
    pub epochs: Vec<(usize, usize, LossBreakdown)>,
}

pub const METRICS_HEADER: &str = "round,client,accuracy,total,ce,proximal,kd,mean_pre_clip_norm,logit_gap,mean_norm,upload_volume";
pub const LOSSES_HEADER: &str = "round,client,epoch,total,ce,proximal,kd,mean_pre_clip_norm,logit_gap";

impl RoundMetrics {
    pub fn csv_rows(&self) -> Vec<String> {
        self.clients
            .iter()
            .map(|c| {
                format!(
                    "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}",
                    c.round,
                    c.client,
                    c.accuracy,
                    c.loss.total,
                    c.loss.ce,
                    c.loss.proximal,
                    c.loss.kd,
                    c.loss.mean_pre_clip_norm,
                    c.loss.logit_gap,
                    c.mean_norm,
                    c.upload_volume
                )
            })
            .collect()
    }

    pub fn loss_rows(&self) -> Vec<String> {
        self.epochs
            .iter()
            .map(|(client, epoch, l)| {
                format!(
                    "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
                    self.round, client, epoch, l.total, l.ce, l.proximal, l.kd, l.mean_pre_clip_norm, l.logit_gap
                )
            })
            .collect()
    }
}

/// A whole federation: clients, server state and history.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub cfg: FederationConfig,
    pub clients: Vec<Client>,
    pub global: Option<PrototypeSet>,
    pub round: usize,
    pub history: Vec<RoundMetrics>,
    seed: u64,
}

impl Simulation {
    pub fn new(cfg: FederationConfig, splits: Vec<ClientSplit>, n_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if splits.is_empty() {
            return Err(Error::invalid("federation needs at least one client"));
        }
        let input_dim = splits[0].train.dim();
        let shape = ModelShape {
            input_dim,
            hidden: cfg.hidden,
            dim: cfg.dim,
            classes: n_classes,
        };
        let mut clients = Vec::with_capacity(splits.len());
        for (id, split) in splits.into_iter().enumerate() {
            if split.train.dim() != input_dim || split.test.dim() != input_dim {
                return Err(Error::invalid(format!("client {id}: input dimension differs")));
            }
            if split.train.is_empty() {
                return Err(Error::invalid(format!("client {id}: empty training split")));
            }
            if split.train.labels.iter().chain(&split.test.labels).any(|&y| y >= n_classes) {
                return Err(Error::invalid(format!("client {id}: label outside {n_classes} classes")));
            }
            let mut rng = RngStream::derive(seed, &[TAG_MODEL, id as u64]);
            let model = ClientModel::new(shape, &mut rng)?;
            let train_hidden = model.hidden_batch(&split.train)?;
            let test_hidden = model.hidden_batch(&split.test)?;
            clients.push(Client {
                id,
                opt: AdamW::new(model.params.n_params()),
                model,
                train_inputs: split.train,
                test_inputs: split.test,
                train_hidden,
                test_hidden,
            });
        }
        Ok(Self {
            cfg,
            clients,
            global: None,
            round: 0,
            history: Vec::new(),
            seed,
        })
    }

    pub fn n_rounds(&self) -> usize {
        self.cfg.privacy.rounds
    }

    fn release_config(&self, features: &FeatureMatrix, rng: &mut RngStream) -> Result<(ReleaseConfig, Option<PartitionMask>)> {
        let radius = self.cfg.train.radius;
        Ok(match self.cfg.mechanism {
            Mechanism::None => (ReleaseConfig::None { radius }, None),
            Mechanism::Igpp => (
                ReleaseConfig::Igpp {
                    radius,
                    sigma_iso: self.cfg.privacy.sigma_iso()?,
                },
                None,
            ),
            Mechanism::Vpp => {
                let (eps1, _) = self.cfg.privacy.split()?;
                let d = features.dim();
                let d_a = PartitionMask::d_a_for(d, self.cfg.rho);
                let lambda = calibrate_laplace_scale(d_a, self.cfg.score_cap, self.cfg.privacy.rounds, eps1)?;
                let scores = match variance_stats(features).and_then(|s| anova_scores(&s, DEFAULT_ZETA)) {
                    Ok(s) => s,
                    Err(e) => {
                        warn!("scores unavailable ({e}); selecting from constant scores");
                        vec![0.0; d]
                    }
                };
                let mask = partition_scores(&scores, self.cfg.rho, self.cfg.score_cap, lambda, rng)?;
                let params = group_noise_params(&mask, self.cfg.privacy.sigma_ref()?, 1.0)?;
                (
                    ReleaseConfig::Vpp {
                        radius,
                        mask: mask.clone(),
                        params,
                    },
                    Some(mask),
                )
            }
        })
    }

    /// Every client encodes, clips, summarizes and privatizes.
    pub fn upload_phase(&self) -> Result<Vec<Upload>> {
        let round = self.round;
        self.clients
            .iter()
            .map(|c| {
                let ctx = |e: Error| Error::runtime(format!("round {round}, client {}: {e}", c.id));
                let mut rng = RngStream::derive(self.seed, &[TAG_RELEASE, c.id as u64, round as u64]);
                let features = c.model.features(&c.train_hidden, &self.cfg.train).map_err(ctx)?;
                let (release, mask) = self.release_config(&features, &mut rng).map_err(ctx)?;
                let clipped = clip_features(&features, &release).map_err(ctx)?;
                let clean = compute_prototypes(&clipped, self.cfg.k_local, c.id, round, &mut rng).map_err(ctx)?;
                let noisy = release.privatize(&clean, &mut rng).map_err(ctx)?;
                Ok(Upload {
                    message: RoundMessage::upload(noisy),
                    clean,
                    mask,
                })
            })
            .collect()
    }

    /// Aggregate, broadcast, train locally and evaluate.
    pub fn finish_round(&mut self, uploads: &[Upload]) -> Result<RoundMetrics> {
        let round = self.round;
        let received = uploads
            .iter()
            .map(|u| u.message.transmit().map(|m| m.payload))
            .collect::<Result<Vec<_>>>()?;
        let mut server_rng = RngStream::derive(self.seed, &[TAG_SERVER, round as u64]);
        let global = generate_global(&received, self.cfg.k_global, round, &mut server_rng)?;
        let broadcast = RoundMessage::download(global).transmit()?.payload;
        debug!("round {round}: {} global prototypes", broadcast.len());

        let cfg = &self.cfg.train;
        let seed = self.seed;
        let results: Vec<Result<Vec<LossBreakdown>>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .clients
                .iter_mut()
                .map(|c| {
                    let g = &broadcast;
                    s.spawn(move || {
                        let mut rng = RngStream::derive(seed, &[TAG_TRAIN, c.id as u64, round as u64]);
                        train_epochs(&mut c.model, &c.train_hidden, Some(g), cfg, &mut c.opt, &mut rng)
                            .map_err(|e| Error::runtime(format!("round {round}, client {}: {e}", c.id)))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::runtime("client training thread panicked"))))
                .collect()
        });

        let eval = evaluate(&self.clients, cfg)?;
        let mut clients = Vec::with_capacity(self.clients.len());
        let mut epochs = Vec::new();
        for ((c, res), up) in self.clients.iter().zip(results).zip(uploads) {
            let rows = res?;
            for (e, l) in rows.iter().enumerate() {
                epochs.push((c.id, e, *l));
            }
            clients.push(ClientRoundMetrics {
                round,
                client: c.id,
                accuracy: eval.per_client[c.id],
                loss: rows.last().copied().unwrap_or_default(),
                mean_norm: mean_embedding_norm(&c.model, &c.train_hidden),
                upload_volume: up.message.volume(),
            });
        }
        let metrics = RoundMetrics { round, eval, clients, epochs };
        self.global = Some(broadcast);
        self.history.push(metrics.clone());
        self.round += 1;
        Ok(metrics)
    }

    pub fn run_round(&mut self) -> Result<(Vec<Upload>, RoundMetrics)> {
        let uploads = self.upload_phase()?;
        let metrics = self.finish_round(&uploads)?;
        Ok((uploads, metrics))
    }

    /// Runs the remaining rounds up to the configured `T`.
    pub fn run(&mut self) -> Result<&[RoundMetrics]> {
        while self.round < self.n_rounds() {
            self.run_round()?;
        }
        Ok(&self.history)
    }
}
