//! Centralized training with distributed-ready checkpoints.
//!
//! Training sees every agent's image and the ground-truth correspondences;
//! deployment (the swarm module) sees one image per agent and nothing else.
//! Besides the full exchange architecture, the harness trains the four
//! correspondence-free baselines and the three ablations of the exchange
//! stage, all sharing the same backbone shapes where possible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{self, BackboneConfig, TaskHead};
use crate::error::{Error, Result};
use crate::fuse::{exchange_and_fuse, to_correspondence_map, ExchangeOptions, FusedArtifacts, SmoothingMode};
use crate::metrics::{self, ClassScores, Confusion};
use crate::scenegen::{Dataset, SceneSample};
use crate::smooth;
use crate::tensor::{Graph, MomentumSgd, ParamSet, Var};

/// Training/evaluation method: the exchange architecture, its ablations,
/// and the correspondence-free baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Main,
    Inpainting,
    InputStack,
    FeatureStack,
    ViewPooling,
    NoSimLoss,
    NoSmoothing,
    OneHot,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Inpainting,
        Method::InputStack,
        Method::FeatureStack,
        Method::ViewPooling,
        Method::NoSimLoss,
        Method::NoSmoothing,
        Method::OneHot,
        Method::Main,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Main => "MAIN",
            Method::Inpainting => "Inpainting",
            Method::InputStack => "InputStack",
            Method::FeatureStack => "FeatureStack",
            Method::ViewPooling => "ViewPooling",
            Method::NoSimLoss => "NoSimLoss",
            Method::NoSmoothing => "NoSmoothing",
            Method::OneHot => "OneHot",
        }
    }

    /// Does the forward pass build similarity volumes?
    pub fn uses_similarity(&self) -> bool {
        matches!(self, Method::Main | Method::NoSimLoss | Method::NoSmoothing | Method::OneHot)
    }

    /// Is the correspondence loss attached? Off for the baselines and for
    /// the no-similarity-loss ablation.
    pub fn corr_loss(&self) -> bool {
        matches!(self, Method::Main | Method::NoSmoothing | Method::OneHot)
    }

    pub fn smoothing_mode(&self) -> Option<SmoothingMode> {
        match self {
            Method::Main | Method::NoSimLoss => Some(SmoothingMode::Learned),
            Method::NoSmoothing => Some(SmoothingMode::Bypass),
            Method::OneHot => Some(SmoothingMode::OneHotFirst),
            _ => None,
        }
    }

    fn has_smoothing_params(&self) -> bool {
        matches!(
            self.smoothing_mode(),
            Some(SmoothingMode::Learned) | Some(SmoothingMode::OneHotFirst)
        )
    }

    /// Encoder input planes: the input-stacking baseline widens the first
    /// conv to take all agents' images.
    pub fn encoder_in_channels(&self, n_agents: usize) -> usize {
        match self {
            Method::InputStack => 3 * n_agents,
            _ => 3,
        }
    }

    /// Decoder input channels at the feature resolution.
    pub fn decoder_in_features(&self, feature_dim: usize, n_agents: usize) -> usize {
        match self {
            Method::FeatureStack => feature_dim * n_agents,
            _ => feature_dim,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture-level configuration shared by training and deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Softmax temperature over negated distances.
    pub tau: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone: BackboneConfig::default(), tau: 1.0 }
    }
}

/// A method, its configuration, and its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub method: Method,
    pub config: ModelConfig,
    /// Number of agents the architecture was built for; only the stacking
    /// baselines actually specialize on it.
    pub n_agents: usize,
    pub params: ParamSet,
}

/// Build a freshly initialized model for a method.
pub fn init_model(method: Method, config: &ModelConfig, n_agents: usize, seed: u64) -> Result<Model> {
    config.backbone.validate()?;
    if config.tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {}", config.tau)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    backbone::init_encoder(&mut params, &config.backbone, method.encoder_in_channels(n_agents), &mut rng);
    backbone::init_decoder(
        &mut params,
        &config.backbone,
        method.decoder_in_features(config.backbone.feature_dim, n_agents),
        &mut rng,
    );
    if method.has_smoothing_params() {
        smooth::init_smoothing(&mut params, config.backbone.cells() + 1, &mut rng);
    }
    Ok(Model { method, config: config.clone(), n_agents, params })
}

/// Rebuild a model around checkpoint parameters, inferring widths from the
/// stored tensor shapes and taking geometry from the dataset.
pub fn model_from_checkpoint(
    method: Method,
    params: ParamSet,
    ds: &crate::scenegen::DatasetConfig,
    tau: f32,
) -> Result<Model> {
    let shape_of = |name: &str| -> Result<Vec<usize>> {
        params
            .get(name)
            .map(|t| t.shape().to_vec())
            .ok_or_else(|| Error::Config(format!("checkpoint missing tensor `{name}`")))
    };
    let mut encoder_widths = Vec::new();
    let mut i = 0;
    while params.contains(&format!("enc.b{i}.w")) {
        encoder_widths.push(shape_of(&format!("enc.b{i}.w"))?[0]);
        i += 1;
    }
    let mut decoder_widths = Vec::new();
    let mut i = 0;
    while params.contains(&format!("dec.b{i}.w")) {
        decoder_widths.push(shape_of(&format!("dec.b{i}.w"))?[0]);
        i += 1;
    }
    let feature_dim = shape_of("enc.proj.w")?[0];
    let out_channels = shape_of("dec.out.w")?[0];
    let task = if out_channels == ds.num_classes {
        TaskHead::Segmentation
    } else if out_channels == 3 {
        TaskHead::Reconstruction
    } else {
        return Err(Error::Config(format!(
            "decoder emits {out_channels} channels, dataset has {} classes",
            ds.num_classes
        )));
    };
    let backbone = BackboneConfig {
        height: ds.height,
        width: ds.width,
        stride: ds.stride,
        feature_dim,
        encoder_widths,
        decoder_widths,
        task,
        num_classes: ds.num_classes,
    };
    backbone.validate()?;
    if method.has_smoothing_params() && !params.contains("smooth.c1.w") {
        return Err(Error::Config(format!(
            "method {method} needs smoothing parameters absent from the checkpoint"
        )));
    }
    Ok(Model { method, config: ModelConfig { backbone, tau }, n_agents: ds.n_agents, params })
}

/// One forward pass worth of intermediate results.
pub struct ForwardArtifacts {
    /// Task logits of the primary agent, `[1, c_out, h, w]`.
    pub logits: Var,
    /// Exchange-stage products; absent for the baselines.
    pub fused: Option<FusedArtifacts>,
}

/// Run a method's forward pass on one sample (primary agent = 0).
pub fn forward_method(g: &mut Graph, model: &Model, sample: &SceneSample) -> Result<ForwardArtifacts> {
    let cfg = &model.config.backbone;
    let n = sample.n_agents();
    let (h, w) = (cfg.height, cfg.width);
    let encode_agent = |g: &mut Graph, idx: usize| -> Result<Var> {
        let img = backbone::image_input(g, &sample.images[idx], h, w)?;
        backbone::encode(g, &model.params, cfg, img)
    };

    match model.method {
        Method::Inpainting => {
            let f0 = encode_agent(g, 0)?;
            let logits = backbone::decode(g, &model.params, cfg, f0)?;
            Ok(ForwardArtifacts { logits, fused: None })
        }
        Method::InputStack => {
            let imgs: Vec<Var> = (0..n)
                .map(|i| backbone::image_input(g, &sample.images[i], h, w))
                .collect::<Result<_>>()?;
            let stacked = g.concat(&imgs, 1)?;
            let f = backbone::encode(g, &model.params, cfg, stacked)?;
            let logits = backbone::decode(g, &model.params, cfg, f)?;
            Ok(ForwardArtifacts { logits, fused: None })
        }
        Method::FeatureStack => {
            let feats: Vec<Var> = (0..n).map(|i| encode_agent(g, i)).collect::<Result<_>>()?;
            let stacked = g.concat(&feats, 1)?;
            let logits = backbone::decode(g, &model.params, cfg, stacked)?;
            Ok(ForwardArtifacts { logits, fused: None })
        }
        Method::ViewPooling => {
            let mut pooled = encode_agent(g, 0)?;
            for i in 1..n {
                let f = encode_agent(g, i)?;
                pooled = g.emax(pooled, f)?;
            }
            let logits = backbone::decode(g, &model.params, cfg, pooled)?;
            Ok(ForwardArtifacts { logits, fused: None })
        }
        Method::Main | Method::NoSimLoss | Method::NoSmoothing | Method::OneHot => {
            let f0 = encode_agent(g, 0)?;
            let own = backbone::squeeze_batch(g, f0)?;
            let mut aux = Vec::with_capacity(n.saturating_sub(1));
            for i in 1..n {
                let fi = encode_agent(g, i)?;
                aux.push((i, backbone::squeeze_batch(g, fi)?));
            }
            let opts = ExchangeOptions {
                tau: model.config.tau,
                mode: model.method.smoothing_mode().expect("similarity methods have a mode"),
            };
            let fused = exchange_and_fuse(g, &model.params, 0, own, &aux, opts)?;
            let fused4 = backbone::unsqueeze_batch(g, fused.fused)?;
            let logits = backbone::decode(g, &model.params, cfg, fused4)?;
            Ok(ForwardArtifacts { logits, fused: Some(fused) })
        }
    }
}

/// Loss weights and optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub w_seg: f32,
    pub w_corr: f32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams { epochs: 12, batch_size: 8, lr: 0.01, momentum: 0.9, w_seg: 1.0, w_corr: 1.0 }
    }
}

/// Scalar loss plus its logged components.
pub struct LossOutput {
    pub total: Var,
    pub artifacts: ForwardArtifacts,
    pub seg_value: f32,
    pub corr_value: Option<f32>,
}

/// Dual training loss: segmentation cross entropy over all pixels against
/// the clean labels, plus (for correspondence-supervised methods) the mean
/// over agent pairs of the fiber cross entropy on the normalized volume and
/// on the smoothed volume.
pub fn total_loss(
    g: &mut Graph,
    model: &Model,
    sample: &SceneSample,
    hyper: &Hyperparams,
) -> Result<LossOutput> {
    if model.config.backbone.task != TaskHead::Segmentation {
        return Err(Error::Config("training supports the segmentation head only".into()));
    }
    let artifacts = forward_method(g, model, sample)?;
    let cfg = &model.config.backbone;
    let classes = cfg.num_classes;
    let pixels = cfg.height * cfg.width;

    let flat = g.reshape(artifacts.logits, &[classes, pixels])?;
    let rows = g.permute(flat, &[1, 0])?;
    let labels: Vec<u32> = sample.labels[0].iter().map(|&c| c as u32).collect();
    let (seg, _) = g.cross_entropy(rows, &labels, false, None)?;
    let seg_value = g.value(seg).data()[0];
    let mut total = g.scale(seg, hyper.w_seg);

    let mut corr_value = None;
    if model.method.corr_loss() && sample.n_agents() > 1 {
        let fused = artifacts.fused.as_ref().expect("similarity methods produce artifacts");
        let mut corr_sum: Option<Var> = None;
        for pair in &fused.pairs {
            let gt: Vec<u32> = sample.gt_corr(pair.aux_agent).iter().map(|&c| c as u32).collect();
            let (raw_ce, _) = g.cross_entropy(pair.normalized.var, &gt, true, None)?;
            let mut term = raw_ce;
            if let Some(smoothed) = &pair.smoothed {
                let (smooth_ce, _) = g.cross_entropy(smoothed.var, &gt, true, None)?;
                term = g.add(term, smooth_ce)?;
            }
            corr_sum = Some(match corr_sum {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        if let Some(sum) = corr_sum {
            let mean = g.scale(sum, 1.0 / fused.pairs.len() as f32);
            corr_value = Some(g.value(mean).data()[0]);
            let weighted = g.scale(mean, hyper.w_corr);
            total = g.add(total, weighted)?;
        }
    }

    Ok(LossOutput { total, artifacts, seg_value, corr_value })
}

// ── Evaluation ────────────────────────────────────────────────────────────

/// Argmax class per pixel from `[1, c, h, w]` logits.
pub fn predict_labels(g: &Graph, logits: Var) -> Vec<u8> {
    g.argmax_along(logits, 1).into_iter().map(|c| c as u8).collect()
}

/// Aggregate evaluation of one model over a dataset.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub scores: ClassScores,
    /// Correspondence accuracy of the argmax on the normalized volume.
    pub corr_raw_accuracy: Option<f64>,
    /// Correspondence accuracy of the deployed (smoothed or bypassed) path.
    pub corr_accuracy: Option<f64>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn method_row(&self, method: Method) -> metrics::MethodRow {
        metrics::MethodRow {
            method: method.name().to_string(),
            mean_accuracy: self.scores.mean_accuracy,
            mean_iou: self.scores.mean_iou,
            class_iou: self.scores.iou.clone(),
        }
    }
}

struct SampleEval {
    confusion: Confusion,
    corr_raw: Option<(usize, usize)>,
    corr_final: Option<(usize, usize)>,
}

fn evaluate_sample(model: &Model, sample: &SceneSample, classes: usize) -> Result<SampleEval> {
    let mut g = Graph::new();
    let artifacts = forward_method(&mut g, model, sample)?;
    let pred = predict_labels(&g, artifacts.logits);
    let confusion = metrics::confusion(&pred, &sample.labels[0], &sample.degradation, classes)?;

    let mut corr_raw = None;
    let mut corr_final = None;
    if let Some(fused) = &artifacts.fused {
        if sample.n_agents() > 1 {
            let (mut raw_hits, mut final_hits, mut cells) = (0usize, 0usize, 0usize);
            for pair in &fused.pairs {
                let gt = sample.gt_corr(pair.aux_agent);
                let raw_map = to_correspondence_map(&g, &pair.normalized)?;
                let raw_labels = raw_map.channel_labels();
                let final_labels = pair.map.channel_labels();
                for (i, &t) in gt.iter().enumerate() {
                    cells += 1;
                    if raw_labels[i] == t {
                        raw_hits += 1;
                    }
                    if final_labels[i] == t {
                        final_hits += 1;
                    }
                }
            }
            corr_raw = Some((raw_hits, cells));
            corr_final = Some((final_hits, cells));
        }
    }
    Ok(SampleEval { confusion, corr_raw, corr_final })
}

/// Evaluate segmentation inside the occluded region plus correspondence
/// accuracy over the whole dataset. Parallel over samples with an ordered
/// final reduction.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<EvalReport> {
    let classes = ds.config.num_classes;
    let per_sample: Vec<SampleEval> = ds
        .samples
        .par_iter()
        .map(|s| evaluate_sample(model, s, classes))
        .collect::<Result<_>>()?;
    let mut confusion = Confusion::zeros(classes);
    let (mut raw_hits, mut final_hits, mut cells) = (0usize, 0usize, 0usize);
    let mut any_corr = false;
    for ev in &per_sample {
        confusion.merge(&ev.confusion);
        if let (Some((rh, c)), Some((fh, _))) = (ev.corr_raw, ev.corr_final) {
            any_corr = true;
            raw_hits += rh;
            final_hits += fh;
            cells += c;
        }
    }
    let scores = metrics::iou_per_class(&confusion);
    Ok(EvalReport {
        confusion,
        scores,
        corr_raw_accuracy: (any_corr && cells > 0).then(|| raw_hits as f64 / cells as f64),
        corr_accuracy: (any_corr && cells > 0).then(|| final_hits as f64 / cells as f64),
        n_samples: ds.samples.len(),
    })
}

// ── Fitting ───────────────────────────────────────────────────────────────

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub seg_loss: f64,
    pub corr_loss: Option<f64>,
    pub val_miou: f64,
    pub val_corr_acc: Option<f64>,
}

/// Comma-separated training log with header.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,seg_loss,corr_loss,val_miou,val_corr_acc\n");
    for row in log {
        out.push_str(&format!(
            "{},{:.6},{},{:.6},{}\n",
            row.epoch,
            row.seg_loss,
            row.corr_loss.map(|v| format!("{v:.6}")).unwrap_or_default(),
            row.val_miou,
            row.val_corr_acc.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ));
    }
    out
}

/// Result of a training run: the best-validation model and the full log.
pub struct FitResult {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub diverged: bool,
}

struct SampleGrads {
    grads: Vec<(String, Vec<f32>)>,
    seg: f32,
    corr: Option<f32>,
    finite: bool,
}

fn sample_step(model: &Model, sample: &SceneSample, hyper: &Hyperparams) -> Result<SampleGrads> {
    let mut g = Graph::new();
    let loss = total_loss(&mut g, model, sample, hyper)?;
    let total = g.value(loss.total).data()[0];
    if !total.is_finite() {
        return Ok(SampleGrads { grads: Vec::new(), seg: loss.seg_value, corr: loss.corr_value, finite: false });
    }
    g.backward(loss.total)?;
    let grads = g
        .param_grads()
        .map(|(name, grad)| (name.to_string(), grad.to_vec()))
        .collect();
    Ok(SampleGrads { grads, seg: loss.seg_value, corr: loss.corr_value, finite: true })
}

/// Seeded SGD with momentum over the training set; the returned model holds
/// the parameters of the best validation epoch (mean IoU inside the
/// occluded region). A non-finite loss aborts with the best model so far
/// and the `diverged` flag set.
pub fn fit(
    train: &Dataset,
    val: &Dataset,
    method: Method,
    config: &ModelConfig,
    hyper: &Hyperparams,
    seed: u64,
) -> Result<FitResult> {
    if train.samples.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if train.config != val.config {
        return Err(Error::Config(format!(
            "train/val config mismatch: {:?} vs {:?}",
            train.config, val.config
        )));
    }
    let bb = &config.backbone;
    if bb.height != train.config.height
        || bb.width != train.config.width
        || bb.stride != train.config.stride
        || bb.num_classes != train.config.num_classes
    {
        return Err(Error::Config(format!(
            "backbone geometry {:?} does not match dataset {:?}",
            (bb.height, bb.width, bb.stride, bb.num_classes),
            train.config
        )));
    }

    let mut model = init_model(method, config, train.config.n_agents, seed)?;
    let mut opt = MomentumSgd::new(hyper.lr, hyper.momentum);
    let mut log = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut diverged = false;

    'epochs: for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut seg_sum = 0.0f64;
        let mut corr_sum = 0.0f64;
        let mut corr_count = 0usize;
        let mut n_seen = 0usize;

        for batch in order.chunks(hyper.batch_size) {
            let results: Vec<SampleGrads> = batch
                .par_iter()
                .map(|&i| sample_step(&model, &train.samples[i], hyper))
                .collect::<Result<_>>()?;
            if results.iter().any(|r| !r.finite) {
                diverged = true;
                break 'epochs;
            }
            model.params.zero_grads();
            for r in &results {
                for (name, grad) in &r.grads {
                    model
                        .params
                        .entry_mut(name)
                        .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?
                        .accumulate_grad(grad);
                }
                seg_sum += r.seg as f64;
                if let Some(c) = r.corr {
                    corr_sum += c as f64;
                    corr_count += 1;
                }
                n_seen += 1;
            }
            model.params.scale_grads(1.0 / batch.len() as f32);
            opt.step(&mut model.params)?;
        }

        let report = evaluate(&model, val)?;
        let entry = EpochLog {
            epoch,
            seg_loss: seg_sum / n_seen.max(1) as f64,
            corr_loss: (corr_count > 0).then(|| corr_sum / corr_count as f64),
            val_miou: report.scores.mean_iou,
            val_corr_acc: report.corr_accuracy,
        };
        let improved = best.as_ref().map_or(true, |(b, _, _)| entry.val_miou > *b);
        if improved {
            best = Some((entry.val_miou, epoch, model.params.clone()));
        }
        log.push(entry);
    }

    let (best_epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, model.params.clone()),
    };
    model.params = params;
    Ok(FitResult { model, log, best_epoch, diverged })
}
