//! Client model and local objective.
//!
//! The encoder is a frozen orthogonal projection followed by a trainable
//! affine adapter; the head is an affine classifier with an EMA copy acting
//! as teacher. With clipping regularization enabled the student sees the
//! soft-clipped feature `ẑ = R z / (‖z‖ + γR)` while the teacher sees the raw
//! `z`, and the two are tied by a temperature-scaled KL term. All gradients
//! are written out by hand.

use serde::{Deserialize, Serialize};

use crate::data::{random_orthogonal, FeatureMatrix};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, Matrix, RngStream, Scalar};
use crate::prototypes::PrototypeSet;

/// Inputs are centred on this value before the backbone.
pub const INPUT_OFFSET: f64 = 0.5;

/// `ẑ = R z / (‖z‖₂ + γR)`.
pub fn soft_clip<T: Scalar>(z: &[T], radius: T, gamma: T) -> Vec<T> {
    let s = radius / (norm2(z) + gamma * radius);
    z.iter().map(|&v| v * s).collect()
}

/// Product of the (symmetric) soft-clip Jacobian with `v`:
/// `a v − R z (zᵀv) / (‖z‖ (‖z‖+γR)²)` with `a = R/(‖z‖+γR)`.
pub fn soft_clip_vjp(z: &[f64], radius: f64, gamma: f64, v: &[f64]) -> Vec<f64> {
    let n = norm2(z);
    let denom = n + gamma * radius;
    let a = radius / denom;
    if n == 0.0 {
        return v.iter().map(|&x| a * x).collect();
    }
    let c = radius * dot(z, v) / (n * denom * denom);
    z.iter().zip(v).map(|(&zi, &vi)| a * vi - c * zi).collect()
}

/// Product of the hard-clip Jacobian with `v` (identity inside the ball).
pub fn hard_clip_vjp(z: &[f64], radius: f64, v: &[f64]) -> Vec<f64> {
    let n = norm2(z);
    if n <= radius {
        return v.to_vec();
    }
    let s = radius / n;
    let c = dot(z, v) / (n * n);
    z.iter().zip(v).map(|(&zi, &vi)| s * (vi - c * zi)).collect()
}

/// `teacher ← β teacher + (1−β) student`, elementwise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], beta: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::invalid(format!(
            "EMA shape mismatch: teacher {} vs student {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid(format!("EMA momentum must lie in [0, 1), got {beta}")));
    }
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = beta * *t + (1.0 - beta) * s;
    }
    Ok(())
}

fn log_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / tau;
    let lse = logits.iter().map(|&l| (l / tau - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&l| l / tau - lse).collect()
}

/// `KL(softmax(t/τ) ‖ softmax(s/τ))` with its gradients with respect to the
/// teacher and the student logits.
pub fn kd_loss_grad(teacher: &[f64], student: &[f64], tau: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if teacher.len() != student.len() {
        return Err(Error::invalid(format!(
            "logit length mismatch: teacher {} vs student {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let lp = log_softmax(teacher, tau);
    let lq = log_softmax(student, tau);
    let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
    let l: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| a - b).collect();
    let kl = dot(&p, &l).max(0.0);
    let pl = dot(&p, &l);
    let g_t = p.iter().zip(&l).map(|(pi, li)| pi * (li - pl) / tau).collect();
    let g_s = q.iter().zip(&p).map(|(qi, pi)| (qi - pi) / tau).collect();
    Ok((kl, g_t, g_s))
}

pub fn kd_loss(teacher: &[f64], student: &[f64], tau: f64) -> Result<f64> {
    kd_loss_grad(teacher, student, tau).map(|r| r.0)
}

/// Cross-entropy of `softmax(logits)` at `label` and its logit gradient.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} outside {} logits", logits.len())));
    }
    let ls = log_softmax(logits, 1.0);
    let mut g: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
    g[label] -= 1.0;
    Ok((-ls[label], g))
}

/// Affine map `W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn random(out_dim: usize, in_dim: usize, std: f64, rng: &mut RngStream) -> Self {
        Self {
            weight: Matrix::random_normal(out_dim, in_dim, std, rng),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        y
    }

    pub fn n_params(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.as_slice());
        out.extend_from_slice(&self.bias);
    }

    fn read_flat(&mut self, flat: &[f64]) -> usize {
        let w = self.weight.as_slice().len();
        self.weight.as_mut_slice().copy_from_slice(&flat[..w]);
        let b = self.bias.len();
        self.bias.copy_from_slice(&flat[w..w + b]);
        w + b
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.out_dim(), self.in_dim()),
            bias: vec![0.0; self.out_dim()],
        }
    }

    /// Accumulate `g_out xᵀ` and `g_out`.
    fn accumulate(&mut self, g_out: &[f64], x: &[f64], scale: f64) {
        for (r, &g) in g_out.iter().enumerate() {
            let gs = g * scale;
            for (w, &xi) in self.weight.row_mut(r).iter_mut().zip(x) {
                *w += gs * xi;
            }
            self.bias[r] += gs;
        }
    }
}

/// Trainable parameters: adapter then classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub adapter: Linear,
    pub classifier: Linear,
}

impl Params {
    pub fn n_params(&self) -> usize {
        self.adapter.n_params() + self.classifier.n_params()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.adapter.write_flat(&mut out);
        self.classifier.write_flat(&mut out);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let used = self.adapter.read_flat(flat);
        self.classifier.read_flat(&flat[used..]);
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            adapter: self.adapter.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub dim: usize,
    pub classes: usize,
}

/// Frozen backbone, trainable adapter and classifier, EMA teacher head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientModel {
    backbone: Matrix<f64>,
    pub params: Params,
    pub teacher: Linear,
}

impl ClientModel {
    /// The backbone has orthonormal columns (`hidden ≥ input_dim`) or
    /// orthonormal rows scaled by `√(input_dim/hidden)`, so squared norms are
    /// preserved exactly or in expectation. Adapter and classifier entries
    /// are `N(0, 1/out_dim)` and `N(0, 1/dim)`.
    pub fn new(shape: ModelShape, rng: &mut RngStream) -> Result<Self> {
        let ModelShape {
            input_dim,
            hidden,
            dim,
            classes,
        } = shape;
        if input_dim == 0 || hidden == 0 || dim == 0 || classes < 2 {
            return Err(Error::invalid(format!("degenerate model shape {shape:?}")));
        }
        let n = input_dim.max(hidden);
        let q = random_orthogonal(n, rng);
        let scale = (input_dim as f64 / hidden as f64).max(1.0).sqrt();
        let mut backbone = Matrix::zeros(hidden, input_dim);
        for r in 0..hidden {
            for c in 0..input_dim {
                backbone.set(r, c, scale * q.get(r, c));
            }
        }
        let adapter = Linear::random(dim, hidden, (1.0 / dim as f64).sqrt(), rng);
        let classifier = Linear::random(classes, dim, (1.0 / dim as f64).sqrt(), rng);
        Ok(Self {
            backbone,
            teacher: classifier.clone(),
            params: Params { adapter, classifier },
        })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.backbone.cols(),
            hidden: self.backbone.rows(),
            dim: self.params.adapter.out_dim(),
            classes: self.params.classifier.out_dim(),
        }
    }

    pub fn backbone(&self) -> &Matrix<f64> {
        &self.backbone
    }

    /// Frozen part: `B (x − offset)`.
    pub fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let centred: Vec<f64> = x.iter().map(|v| v - INPUT_OFFSET).collect();
        self.backbone.matvec(&centred)
    }

    pub fn hidden_batch(&self, inputs: &FeatureMatrix) -> Result<FeatureMatrix> {
        inputs.map_rows(|x| self.hidden(x))
    }

    /// Pre-clip embedding `z`.
    pub fn embed_hidden(&self, h: &[f64]) -> Vec<f64> {
        self.params.adapter.forward(h)
    }

    /// Feature the classifier and the prototypes see.
    pub fn feature_hidden(&self, h: &[f64], cfg: &TrainConfig) -> Vec<f64> {
        let z = self.embed_hidden(h);
        if cfg.dcr {
            soft_clip(&z, cfg.radius, cfg.gamma)
        } else {
            z
        }
    }

    pub fn features(&self, hidden: &FeatureMatrix, cfg: &TrainConfig) -> Result<FeatureMatrix> {
        hidden.map_rows(|h| self.feature_hidden(h, cfg))
    }

    pub fn predict_hidden(&self, h: &[f64], cfg: &TrainConfig) -> usize {
        let logits = self.params.classifier.forward(&self.feature_hidden(h, cfg));
        argmax(&logits)
    }

    /// Gradient of `⟨feature(x), v⟩` with respect to the raw input `x`.
    pub fn feature_input_vjp(&self, x: &[f64], cfg: &TrainConfig, v: &[f64]) -> Vec<f64> {
        let g_z = if cfg.dcr {
            let z = self.embed_hidden(&self.hidden(x));
            soft_clip_vjp(&z, cfg.radius, cfg.gamma, v)
        } else {
            v.to_vec()
        };
        let g_h = self.params.adapter.weight.matvec_t(&g_z);
        self.backbone.matvec_t(&g_h)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Local objective and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Soft clipping and the distillation term are active.
    pub dcr: bool,
    /// Clipping radius `R`, shared with the release.
    pub radius: f64,
    pub gamma: f64,
    pub beta: f64,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda_proto: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dcr: true,
            radius: 1.0,
            gamma: 0.05,
            beta: 0.999,
            tau: 4.0,
            lambda1: 0.05,
            lambda_proto: 0.1,
            lr: 1e-3,
            weight_decay: 1e-5,
            epochs: 5,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Returns the offending field name with the message.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, msg))
            }
        };
        check(self.radius > 0.0 && self.radius.is_finite(), "radius", "must be positive")?;
        check(self.gamma > 0.0 && self.gamma < 1.0, "gamma", "must lie in (0, 1)")?;
        check((0.0..1.0).contains(&self.beta), "beta", "must lie in [0, 1)")?;
        check(self.tau > 0.0 && self.tau.is_finite(), "tau", "must be positive")?;
        check(self.lambda1 >= 0.0 && self.lambda1.is_finite(), "lambda1", "must be non-negative")?;
        check(self.lambda_proto >= 0.0 && self.lambda_proto.is_finite(), "lambda_proto", "must be non-negative")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check(self.weight_decay >= 0.0, "weight_decay", "must be non-negative")?;
        check(self.batch_size > 0, "batch_size", "must be positive")?;
        check((0.0..1.0).contains(&self.adam_beta1), "adam_beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.adam_beta2), "adam_beta2", "must lie in [0, 1)")?;
        check(self.adam_eps > 0.0, "adam_eps", "must be positive")?;
        Ok(())
    }
}

/// Batch-mean loss terms plus diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub proximal: f64,
    pub kd: f64,
    pub mean_pre_clip_norm: f64,
    /// Mean `‖teacher(z) − student(ẑ)‖₂`.
    pub logit_gap: f64,
}

/// `mean CE(classifier(ẑ), y) + λ_proto · mean ‖ẑ − p_g^y‖²`; samples whose
/// class has no global prototype skip the proximal term.
pub fn base_loss(
    features: &FeatureMatrix,
    classifier: &Linear,
    global: Option<&PrototypeSet>,
    lambda_proto: f64,
) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = 0.0;
    for (z, &y) in features.features.iter_rows().zip(&features.labels) {
        total += cross_entropy(&classifier.forward(z), y)?.0;
        if let Some(p) = global.and_then(|g| g.nearest_in_class(y, z)) {
            total += lambda_proto * crate::numerics::sq_dist(z, &p.vector);
        }
    }
    Ok(total / features.len() as f64)
}

/// Full objective `L_BASE + λ₁ L_KD` on a batch of backbone outputs, with the
/// gradient over the trainable parameters.
pub fn loss_and_grad(
    model: &ClientModel,
    hidden: &[&[f64]],
    labels: &[usize],
    global: Option<&PrototypeSet>,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Params)> {
    if hidden.is_empty() || hidden.len() != labels.len() {
        return Err(Error::invalid("batch must be non-empty with one label per row"));
    }
    let n = hidden.len() as f64;
    let inv_n = 1.0 / n;
    let mut grad = model.params.zeros_like();
    let mut out = LossBreakdown::default();
    let clf = &model.params.classifier;
    for (&h, &y) in hidden.iter().zip(labels) {
        let z = model.embed_hidden(h);
        let zn = norm2(&z);
        out.mean_pre_clip_norm += zn * inv_n;
        let zh = if cfg.dcr { soft_clip(&z, cfg.radius, cfg.gamma) } else { z.clone() };
        let s = clf.forward(&zh);
        let (ce, mut g_s) = cross_entropy(&s, y)?;
        out.ce += ce * inv_n;

        let mut g_zh = vec![0.0; zh.len()];
        if cfg.lambda_proto > 0.0 {
            if let Some(p) = global.and_then(|g| g.nearest_in_class(y, &zh)) {
                if p.vector.len() != zh.len() {
                    return Err(Error::invalid("global prototype dimension does not match features"));
                }
                let diff: Vec<f64> = zh.iter().zip(&p.vector).map(|(a, b)| a - b).collect();
                out.proximal += cfg.lambda_proto * dot(&diff, &diff) * inv_n;
                for (g, d) in g_zh.iter_mut().zip(&diff) {
                    *g += 2.0 * cfg.lambda_proto * d;
                }
            }
        }

        let mut g_z_teacher = None;
        if cfg.dcr {
            let t = model.teacher.forward(&z);
            let gap: f64 = t.iter().zip(&s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            out.logit_gap += gap * inv_n;
            if cfg.lambda1 > 0.0 {
                let (kd, g_t, g_sk) = kd_loss_grad(&t, &s, cfg.tau)?;
                out.kd += cfg.lambda1 * kd * inv_n;
                for (a, b) in g_s.iter_mut().zip(&g_sk) {
                    *a += cfg.lambda1 * b;
                }
                // The teacher head is frozen, but its input z is not.
                let g_t: Vec<f64> = g_t.iter().map(|v| cfg.lambda1 * v).collect();
                g_z_teacher = Some(model.teacher.weight.matvec_t(&g_t));
            }
        }

        grad.classifier.accumulate(&g_s, &zh, inv_n);
        let back = clf.weight.matvec_t(&g_s);
        for (g, b) in g_zh.iter_mut().zip(&back) {
            *g += b;
        }
        let mut g_z = if cfg.dcr {
            soft_clip_vjp(&z, cfg.radius, cfg.gamma, &g_zh)
        } else {
            g_zh
        };
        if let Some(gt) = g_z_teacher {
            for (a, b) in g_z.iter_mut().zip(&gt) {
                *a += b;
            }
        }
        grad.adapter.accumulate(&g_z, h, inv_n);
    }
    out.total = out.ce + out.proximal + out.kd;
    if !out.total.is_finite() {
        return Err(Error::runtime(format!(
            "non-finite loss (ce {}, proximal {}, kd {}, mean norm {})",
            out.ce, out.proximal, out.kd, out.mean_pre_clip_norm
        )));
    }
    Ok((out, grad))
}

/// First and second moment estimates for decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `θ ← θ − lr (m̂ / (√v̂ + eps) + wd θ)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, wd: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::invalid("optimizer state does not match parameter count"));
        }
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * (mh / (vh.sqrt() + eps) + wd * params[i]);
        }
        Ok(())
    }
}

/// One optimizer step on a batch, followed by the EMA teacher update.
pub fn train_step(
    model: &mut ClientModel,
    hidden: &[&[f64]],
    labels: &[usize],
    global: Option<&PrototypeSet>,
    cfg: &TrainConfig,
    opt: &mut AdamW,
) -> Result<LossBreakdown> {
    let (loss, grad) = loss_and_grad(model, hidden, labels, global, cfg)?;
    let mut flat = model.params.to_flat();
    opt.step(
        &mut flat,
        &grad.to_flat(),
        cfg.lr,
        cfg.weight_decay,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    )?;
    model.params.set_flat(&flat)?;
    if cfg.dcr {
        let mut t = Vec::with_capacity(model.teacher.n_params());
        model.teacher.write_flat(&mut t);
        let mut s = Vec::with_capacity(t.len());
        model.params.classifier.write_flat(&mut s);
        ema_update(&mut t, &s, cfg.beta)?;
        model.teacher.read_flat(&t);
    }
    Ok(loss)
}

/// `cfg.epochs` shuffled passes over `hidden`; returns one example-weighted
/// mean breakdown per epoch.
pub fn train_epochs(
    model: &mut ClientModel,
    hidden: &FeatureMatrix,
    global: Option<&PrototypeSet>,
    cfg: &TrainConfig,
    opt: &mut AdamW,
    rng: &mut RngStream,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    if hidden.is_empty() {
        return Err(Error::invalid("no training data"));
    }
    let mut order: Vec<usize> = (0..hidden.len()).collect();
    let mut rows = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut acc = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| hidden.row(i)).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| hidden.labels[i]).collect();
            let l = train_step(model, &xs, &ys, global, cfg, opt)?;
            let w = chunk.len() as f64 / hidden.len() as f64;
            acc.total += w * l.total;
            acc.ce += w * l.ce;
            acc.proximal += w * l.proximal;
            acc.kd += w * l.kd;
            acc.mean_pre_clip_norm += w * l.mean_pre_clip_norm;
            acc.logit_gap += w * l.logit_gap;
        }
        rows.push(acc);
    }
    Ok(rows)
}

/// Mean pre-clip norm `‖z‖` over a set of backbone outputs.
pub fn mean_embedding_norm(model: &ClientModel, hidden: &FeatureMatrix) -> f64 {
    let s: f64 = hidden.features.iter_rows().map(|h| norm2(&model.embed_hidden(h))).sum();
    s / hidden.len().max(1) as f64
}
