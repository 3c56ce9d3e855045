//! Experiment harness: configuration, training loops, evaluation, reports.
//!
//! One [`ExperimentConfig`] fully determines a run: the method, the sorting
//! operator and temperature, training and serving quotas, the data source,
//! optimizer settings and the seed. Runs are single-threaded and

//! deterministic — the same config and seed reproduce metrics byte for byte
//! (wall-clock time is reported on the side, never in the metrics).
//!
//! Methods:
//! - `lcron`: end-to-end survival loss + per-stage auxiliary losses fused
//!   with trainable uncertainty weights
//! - `lcron_fixed_weights`: same losses, fixed manual weights
//! - `e2e_only` / `single_only`: the two ablations
//! - `bce`: pointwise binary cross-entropy (retrieval trains on the full
//!   list, ranking only on the final-stage samples)
//! - `ranknet`: pairwise loss on the full-stage graded labels

use crate::cascade_eval::{bound_gap, cascade_filter, ndcg_at, recall_at, CascadeConfig};
use crate::diffsort::{hard_sort_desc, soft_permutation, OperatorKind};
use crate::error::{Error, Result};
use crate::losses::{
    loss_bce, loss_e2e, loss_fixed_fusion, loss_ranknet, loss_single, loss_uwl, topk_select_prob,
    FusionWeights, SurrogateConfig,
};
use crate::models::{adam_step, AdamHyper, AdamState, MlpParams, StageModel, TwoTowerParams};
use crate::numerics::{Vector, DEFAULT_EPSILON};
use crate::sampling::{generate_dataset, read_dataset, Dataset, ImpressionSample, SynthConfig};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

/// Training method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Lcron,
    LcronFixedWeights,
    Bce,
    Ranknet,
    E2eOnly,
    SingleOnly,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Lcron => "lcron",
            Method::LcronFixedWeights => "lcron_fixed_weights",
            Method::Bce => "bce",
            Method::Ranknet => "ranknet",
            Method::E2eOnly => "e2e_only",
            Method::SingleOnly => "single_only",
        }
    }

    pub fn all() -> [Method; 6] {
        [
            Method::Lcron,
            Method::LcronFixedWeights,
            Method::Bce,
            Method::Ranknet,
            Method::E2eOnly,
            Method::SingleOnly,
        ]
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    LastDay,
    Streaming,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_day" => Ok(EvalMode::LastDay),
            "streaming" => Ok(EvalMode::Streaming),
            other => Err(Error::Config(format!("unknown eval mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 256,
            epochs: 1,
        }
    }
}

/// Scorer widths; stage 0 is the two-tower, later stages are MLPs.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub tower_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub mlp_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tower_hidden: vec![32],
            embedding_dim: 16,
            mlp_hidden: vec![32],
        }
    }
}

#[derive(Debug, Clone)]
pub enum DataSource {
    Synth(SynthConfig),
    Path(PathBuf),
}

/// Everything one run needs.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub method: Method,
    pub operator: OperatorKind,
    pub temperature: f64,
    pub clamp_epsilon: f64,
    /// Top-q cuts the end-to-end loss trains against (defaults to K per
    /// stage, which trades physical meaning for gradient health).
    pub train_quotas: Vec<usize>,
    pub serving: CascadeConfig,
    pub ndcg_k: usize,
    pub data: DataSource,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub fixed_weight_e2e: f64,
    pub fixed_weights_single: Vec<f64>,
    pub seed: u64,
    pub eval_mode: EvalMode,
    pub streaming_incremental: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let k = synth.gt_count();
        Self {
            method: Method::Lcron,
            operator: OperatorKind::NeuralSort,
            temperature: 1.0,
            clamp_epsilon: DEFAULT_EPSILON,
            train_quotas: vec![k; synth.stages()],
            serving: CascadeConfig::new(vec![10, 5], k).expect("valid default"),
            ndcg_k: k,
            data: DataSource::Synth(synth),
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            fixed_weight_e2e: 1.0,
            fixed_weights_single: vec![2.0, 2.0],
            seed: 1,
            eval_mode: EvalMode::LastDay,
            streaming_incremental: false,
        }
    }
}

impl ExperimentConfig {
    fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            operator: self.operator,
            temperature: self.temperature,
            epsilon: self.clamp_epsilon,
        }
    }

    /// Config-file / CLI-override surface: `key = value` pairs.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value '{value}' for {what}"));
        match key {
            "method" => self.method = value.parse()?,
            "operator" => self.operator = value.parse()?,
            "tau" | "temperature" => {
                self.temperature = value.parse().map_err(|_| bad("tau"))?
            }
            "clamp_epsilon" => {
                self.clamp_epsilon = value.parse().map_err(|_| bad("clamp_epsilon"))?
            }
            "train_quotas" => self.train_quotas = parse_usize_list(value)?,
            "serving_quotas" => {
                let quotas = parse_usize_list(value)?;
                self.serving = CascadeConfig::new(quotas, self.serving.gt_size)?;
            }
            "gt_size" => {
                let k = value.parse().map_err(|_| bad("gt_size"))?;
                self.serving = CascadeConfig::new(self.serving.quotas.clone(), k)?;
            }
            "ndcg_k" => self.ndcg_k = value.parse().map_err(|_| bad("ndcg_k"))?,
            "eval_mode" => self.eval_mode = value.parse()?,
            "streaming_incremental" => {
                self.streaming_incremental = value.parse().map_err(|_| bad(key))?
            }
            "lr" => self.optimizer.lr = value.parse().map_err(|_| bad("lr"))?,
            "batch_size" => self.optimizer.batch_size = value.parse().map_err(|_| bad(key))?,
            "epochs" => self.optimizer.epochs = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "fixed_weight_e2e" => {
                self.fixed_weight_e2e = value.parse().map_err(|_| bad(key))?
            }
            "fixed_weights_single" => {
                self.fixed_weights_single = parse_f64_list(value)?;
            }
            "dataset" => self.data = DataSource::Path(PathBuf::from(value)),
            "tower_hidden" => self.model.tower_hidden = parse_usize_list(value)?,
            "embedding_dim" => {
                self.model.embedding_dim = value.parse().map_err(|_| bad(key))?
            }
            "mlp_hidden" => self.model.mlp_hidden = parse_usize_list(value)?,
            // synthetic-data keys apply only when the source is synthetic
            "days" | "impressions_per_day" | "users" | "pool" | "feature_dim"
            | "stage_counts" | "noise" | "interaction" | "min_margin" | "collapse_grades"
            | "data_seed" => {
                let synth = match &mut self.data {
                    DataSource::Synth(s) => s,
                    DataSource::Path(_) => {
                        return Err(Error::Config(format!(
                            "key '{key}' needs a synthetic data source, but 'dataset' is set"
                        )))
                    }
                };
                match key {
                    "days" => synth.n_days = value.parse().map_err(|_| bad(key))?,
                    "impressions_per_day" => {
                        synth.impressions_per_day = value.parse().map_err(|_| bad(key))?
                    }
                    "users" => synth.n_users = value.parse().map_err(|_| bad(key))?,
                    "pool" => synth.n_items = value.parse().map_err(|_| bad(key))?,
                    "feature_dim" => synth.feature_dim = value.parse().map_err(|_| bad(key))?,
                    "stage_counts" => synth.stage_counts = parse_usize_list(value)?,
                    "noise" => synth.noise_scales = parse_f64_list(value)?,
                    "interaction" => {
                        synth.interaction_strength = value.parse().map_err(|_| bad(key))?
                    }
                    "min_margin" => synth.min_margin = value.parse().map_err(|_| bad(key))?,
                    "collapse_grades" => {
                        synth.collapse_grades = value.parse().map_err(|_| bad(key))?
                    }
                    "data_seed" => synth.seed = value.parse().map_err(|_| bad(key))?,
                    _ => unreachable!(),
                }
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a `key = value` config file body (# starts a comment).
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Cross-field validation, run before any training.
    pub fn validate(&self, dataset: &Dataset) -> Result<usize> {
        let t = self.serving.stages();
        let n = dataset
            .impressions
            .first()
            .map(|s| s.items.len())
            .ok_or_else(|| Error::Config("dataset has no impressions".into()))?;
        if dataset.stage_names.len() != t + 2 {
            return Err(Error::Config(format!(
                "dataset has {} stage tags; a {t}-stage cascade needs {}",
                dataset.stage_names.len(),
                t + 2
            )));
        }
        if self.train_quotas.len() != t {
            return Err(Error::Config(format!(
                "{} train quotas for {t} stages",
                self.train_quotas.len()
            )));
        }
        if self.train_quotas.iter().any(|&q| q == 0 || q > n) {
            return Err(Error::Config(format!(
                "train quotas {:?} out of [1, {n}]",
                self.train_quotas
            )));
        }
        if self.serving.quotas[0] > n {
            return Err(Error::Config(format!(
                "serving quota {} exceeds the {n}-item impression list",
                self.serving.quotas[0]
            )));
        }
        if self.ndcg_k == 0 || self.ndcg_k > n {
            return Err(Error::Config(format!("ndcg_k out of [1, {n}]")));
        }
        if self.method == Method::LcronFixedWeights && self.fixed_weights_single.len() != t {
            return Err(Error::Config(format!(
                "{} fixed single weights for {t} stages",
                self.fixed_weights_single.len()
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        for s in &dataset.impressions {
            if s.items.len() != n {
                return Err(Error::Config(
                    "impressions disagree on item count".into(),
                ));
            }
        }
        Ok(n)
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synth(synth) => generate_dataset(synth),
            DataSource::Path(p) => read_dataset(p),
        }
    }
}

fn parse_usize_list(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad list entry '{v}'")))
        })
        .collect()
}

fn parse_f64_list(value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad list entry '{v}'")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training

/// Models (and fusion weights, when trainable) after a run.
pub struct TrainedStages {
    pub models: Vec<StageModel>,
    pub fusion: Option<FusionWeights>,
    pub mean_train_loss: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Fresh stage scorers for a T-stage cascade.
pub fn init_stage_models(cfg: &ExperimentConfig, feature_dim: usize) -> Vec<StageModel> {
    let t = cfg.serving.stages();
    let mut models = Vec::with_capacity(t);
    for stage in 0..t {
        let seed = splitmix64(cfg.seed ^ splitmix64(stage as u64 + 101));
        if stage == 0 {
            let mut dims = vec![feature_dim];
            dims.extend_from_slice(&cfg.model.tower_hidden);
            dims.push(cfg.model.embedding_dim);
            models.push(StageModel::TwoTower(TwoTowerParams::init(seed, &dims)));
        } else {
            let mut dims = vec![3 * feature_dim];
            dims.extend_from_slice(&cfg.model.mlp_hidden);
            dims.push(1);
            models.push(StageModel::Mlp(MlpParams::init(seed, &dims)));
        }
    }
    models
}

/// dL/d(scores) per stage for one impression under the configured method,
/// plus the scalar loss and optional fusion-parameter gradients.
fn impression_backward(
    cfg: &ExperimentConfig,
    fusion: Option<&FusionWeights>,
    stage_scores: &[Vector],
    sample: &ImpressionSample,
) -> Result<(f64, Vec<Vector>, Option<Vec<f64>>)> {
    let sur = cfg.surrogate();
    let gt = sample.gt_flags();
    let k = cfg.serving.gt_size;
    let t = stage_scores.len();
    match cfg.method {
        Method::Lcron | Method::LcronFixedWeights => {
            let e2e = loss_e2e(stage_scores, &cfg.train_quotas, &gt, &sur)?;
            let singles: Vec<_> = stage_scores
                .iter()
                .map(|s| loss_single(s, k, &gt, &sur))
                .collect::<Result<_>>()?;
            let fused = if cfg.method == Method::Lcron {
                loss_uwl(&e2e, &singles, fusion.expect("lcron trains fusion weights"))?
            } else {
                loss_fixed_fusion(&e2e, &singles, cfg.fixed_weight_e2e, &cfg.fixed_weights_single)?
            };
            Ok((fused.value, fused.grads_per_stage.clone(), fused.fusion_grads))
        }
        Method::E2eOnly => {
            let out = loss_e2e(stage_scores, &cfg.train_quotas, &gt, &sur)?;
            Ok((out.value, out.grads_per_stage, None))
        }
        Method::SingleOnly => {
            let mut grads = Vec::with_capacity(t);
            let mut value = 0.0;
            for s in stage_scores {
                let out = loss_single(s, k, &gt, &sur)?;
                value += out.value;
                grads.push(out.grads_per_stage[0].clone());
            }
            Ok((value, grads, None))
        }
        Method::Bce => {
            let n = gt.len();
            let mut grads = Vec::with_capacity(t);
            let mut value = 0.0;
            for (stage, scores) in stage_scores.iter().enumerate() {
                // classic setting: the first stage sees the full list, later
                // stages only their own candidates and the ground truth
                let keep: Vec<usize> = (0..n)
                    .filter(|&j| stage == 0 || sample.items[j].stage.level() >= stage + 1)
                    .collect();
                let sub_scores = Vector::from_fn(keep.len(), |i| scores[keep[i]]);
                let sub_gt = Vector::from_fn(keep.len(), |i| gt[keep[i]]);
                let out = loss_bce(&sub_scores, &sub_gt)?;
                value += out.value;
                let mut g = Vector::zeros(n);
                for (i, &j) in keep.iter().enumerate() {
                    g[j] = out.grads_per_stage[0][i];
                }
                grads.push(g);
            }
            Ok((value, grads, None))
        }
        Method::Ranknet => {
            let grades = sample.grades();
            let mut grads = Vec::with_capacity(t);
            let mut value = 0.0;
            for scores in stage_scores {
                let out = loss_ranknet(scores, &grades)?;
                value += out.value;
                grads.push(out.grads_per_stage[0].clone());
            }
            Ok((value, grads, None))
        }
    }
}

/// Trains fresh models on the given impressions.
pub fn train_on(
    cfg: &ExperimentConfig,
    impressions: &[&ImpressionSample],
) -> Result<TrainedStages> {
    let feature_dim = impressions
        .first()
        .map(|s| s.user_features.len())
        .ok_or_else(|| Error::Config("no training impressions".into()))?;
    let models = init_stage_models(cfg, feature_dim);
    let fusion = (cfg.method == Method::Lcron)
        .then(|| FusionWeights::unit(cfg.serving.stages()));
    let mut stages = TrainedStages {
        models,
        fusion,
        mean_train_loss: 0.0,
    };
    continue_training(cfg, &mut stages, impressions)?;
    Ok(stages)
}

/// Runs the configured number of epochs over `impressions`, updating
/// `stages` in place. Used for both fresh and incremental training.
pub fn continue_training(
    cfg: &ExperimentConfig,
    stages: &mut TrainedStages,
    impressions: &[&ImpressionSample],
) -> Result<()> {
    if impressions.is_empty() {
        return Err(Error::Config("no training impressions".into()));
    }
    let t = stages.models.len();
    let hyper = AdamHyper {
        lr: cfg.optimizer.lr,
        ..AdamHyper::default()
    };
    let mut opt_states: Vec<AdamState> = stages
        .models
        .iter()
        .map(|m| AdamState::new(m.num_params(), hyper))
        .collect();
    let mut fusion_opt = stages
        .fusion
        .as_ref()
        .map(|f| AdamState::new(1 + f.log_sigma_single.len(), hyper));

    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    for epoch in 0..cfg.optimizer.epochs {
        // deterministic shuffle per epoch
        let mut order: Vec<usize> = (0..impressions.len()).collect();
        let mut shuffle_state = splitmix64(cfg.seed ^ splitmix64(0xe90c + epoch as u64));
        for i in (1..order.len()).rev() {
            shuffle_state = splitmix64(shuffle_state);
            let j = (shuffle_state % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.optimizer.batch_size.max(1)) {
            let mut grad_acc: Vec<Vec<f64>> = stages
                .models
                .iter()
                .map(|m| vec![0.0; m.num_params()])
                .collect();
            let mut fusion_acc = stages
                .fusion
                .as_ref()
                .map(|f| vec![0.0; 1 + f.log_sigma_single.len()]);
            for &idx in batch {
                let sample = impressions[idx];
                let item_feats: Vec<Vector> =
                    sample.items.iter().map(|it| it.features.clone()).collect();
                let mut scores = Vec::with_capacity(t);
                let mut caches = Vec::with_capacity(t);
                for model in &stages.models {
                    let (s, c) = model.forward(&sample.user_features, &item_feats)?;
                    scores.push(s);
                    caches.push(c);
                }
                let (value, dscores, fusion_grads) =
                    impression_backward(cfg, stages.fusion.as_ref(), &scores, sample)?;
                loss_sum += value;
                loss_count += 1;
                for stage in 0..t {
                    let g = stages.models[stage].backward_flat(&caches[stage], &dscores[stage])?;
                    let acc = &mut grad_acc[stage];
                    for (a, gi) in acc.iter_mut().zip(g.iter()) {
                        *a += gi;
                    }
                }
                if let (Some(acc), Some(fg)) = (fusion_acc.as_mut(), fusion_grads) {
                    for (a, gi) in acc.iter_mut().zip(fg.iter()) {
                        *a += gi;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for stage in 0..t {
                let mut flat = stages.models[stage].flatten();
                let grads: Vec<f64> = grad_acc[stage].iter().map(|g| g * inv).collect();
                adam_step(&mut flat, &grads, &mut opt_states[stage]);
                stages.models[stage].write_back(&flat);
            }
            if let (Some(fusion), Some(acc), Some(opt)) = (
                stages.fusion.as_mut(),
                fusion_acc.as_ref(),
                fusion_opt.as_mut(),
            ) {
                let mut flat = Vec::with_capacity(1 + fusion.log_sigma_single.len());
                flat.push(fusion.log_sigma_e2e);
                flat.extend_from_slice(&fusion.log_sigma_single);
                let grads: Vec<f64> = acc.iter().map(|g| g * inv).collect();
                adam_step(&mut flat, &grads, opt);
                fusion.log_sigma_e2e = flat[0];
                fusion.log_sigma_single.copy_from_slice(&flat[1..]);
            }
        }
    }
    stages.mean_train_loss = loss_sum / loss_count.max(1) as f64;
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation

/// Metrics of one evaluation day.
#[derive(Debug, Clone, PartialEq)]
pub struct DayMetrics {
    pub day: usize,
    pub train_days: usize,
    pub joint_recall: f64,
    pub stage_recall: Vec<f64>,
    pub stage_ndcg: Vec<f64>,
    pub mean_train_loss: f64,
}

/// Full result of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub operator: String,
    pub temperature: f64,
    pub seed: u64,
    pub days: Vec<DayMetrics>,
    /// Informational only; excluded from the canonical CSV so reruns stay
    /// byte-identical.
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    /// Mean joint recall over the evaluated days.
    pub fn aggregate_joint_recall(&self) -> f64 {
        self.days.iter().map(|d| d.joint_recall).sum::<f64>() / self.days.len().max(1) as f64
    }

    /// Canonical, reproducible CSV.
    pub fn to_csv(&self) -> String {
        let stages = self.days.first().map(|d| d.stage_recall.len()).unwrap_or(0);
        let mut out = String::new();
        out.push_str("method,operator,tau,seed,day,train_days,joint_recall");
        for i in 0..stages {
            out.push_str(&format!(",stage{}_recall", i + 1));
        }
        for i in 0..stages {
            out.push_str(&format!(",stage{}_ndcg", i + 1));
        }
        out.push_str(",mean_train_loss\n");
        for d in &self.days {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                self.method, self.operator, self.temperature, self.seed, d.day, d.train_days,
                d.joint_recall
            ));
            for v in &d.stage_recall {
                out.push_str(&format!(",{v}"));
            }
            for v in &d.stage_ndcg {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", d.mean_train_loss));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "method={} operator={} tau={} seed={} ({:.2}s)\n",
            self.method, self.operator, self.temperature, self.seed, self.wall_clock_secs
        );
        for d in &self.days {
            out.push_str(&format!(
                "  day {:>3} (trained on {:>3}): joint recall {:.4}",
                d.day, d.train_days, d.joint_recall
            ));
            for (i, (r, n)) in d.stage_recall.iter().zip(d.stage_ndcg.iter()).enumerate() {
                out.push_str(&format!("  s{}[recall {:.4} ndcg {:.4}]", i + 1, r, n));
            }
            out.push_str(&format!("  loss {:.4}\n", d.mean_train_loss));
        }
        out
    }
}

/// Evaluates trained stages on a set of impressions.
pub fn evaluate(
    models: &[StageModel],
    impressions: &[&ImpressionSample],
    serving: &CascadeConfig,
    ndcg_k: usize,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if impressions.is_empty() {
        return Err(Error::Config("no evaluation impressions".into()));
    }
    let t = models.len();
    let mut joint_sum = 0.0;
    let mut stage_recall_sum = vec![0.0; t];
    let mut stage_ndcg_sum = vec![0.0; t];
    for sample in impressions {
        let item_feats: Vec<Vector> =
            sample.items.iter().map(|it| it.features.clone()).collect();
        let mut scores = Vec::with_capacity(t);
        for model in models {
            let (s, _) = model.forward(&sample.user_features, &item_feats)?;
            scores.push(s);
        }
        let gt = sample.gt_indices();
        let selected = cascade_filter(&scores, serving)?;
        joint_sum += recall_at(&selected, &gt)?;
        let grades = sample.grades();
        for stage in 0..t {
            let order = hard_sort_desc(&scores[stage]).order;
            let top_m: Vec<usize> = order[..serving.quotas[stage].min(order.len())].to_vec();
            stage_recall_sum[stage] += recall_at(&top_m, &gt)?;
            stage_ndcg_sum[stage] += ndcg_at(&scores[stage], &grades, ndcg_k)?;
        }
    }
    let inv = 1.0 / impressions.len() as f64;
    Ok((
        joint_sum * inv,
        stage_recall_sum.iter().map(|v| v * inv).collect(),
        stage_ndcg_sum.iter().map(|v| v * inv).collect(),
    ))
}

// ---------------------------------------------------------------------------
// Entry points

/// Trains and evaluates per the config. Last-day mode trains once on all
/// days but the last and evaluates on the last; streaming mode evaluates
/// every day t on models trained from days 0..t.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    if cfg.eval_mode == EvalMode::LastDay {
        return run_last_day_with_models(cfg).map(|(report, _)| report);
    }
    let started = std::time::Instant::now();
    let dataset = cfg.load_data()?;
    cfg.validate(&dataset)?;
    let num_days = dataset.num_days();
    let mut days = Vec::new();
    match cfg.eval_mode {
        EvalMode::LastDay => unreachable!(),
        EvalMode::Streaming => {
            if num_days < 2 {
                return Err(Error::Config("streaming evaluation needs >= 2 days".into()));
            }
            let mut carried: Option<TrainedStages> = None;
            for t in 1..num_days {
                let stages = if cfg.streaming_incremental {
                    let new_day = dataset.day(t - 1);
                    let mut stages = match carried.take() {
                        Some(s) => s,
                        None => {
                            let first = dataset.day(0);
                            train_on(cfg, &first)?
                        }
                    };
                    if t > 1 {
                        continue_training(cfg, &mut stages, &new_day)?;
                    }
                    stages
                } else {
                    let train_set = dataset.days_before(t);
                    train_on(cfg, &train_set)?
                };
                let test = dataset.day(t);
                let (joint, recalls, ndcgs) =
                    evaluate(&stages.models, &test, &cfg.serving, cfg.ndcg_k)?;
                days.push(DayMetrics {
                    day: t,
                    train_days: t,
                    joint_recall: joint,
                    stage_recall: recalls,
                    stage_ndcg: ndcgs,
                    mean_train_loss: stages.mean_train_loss,
                });
                carried = Some(stages);
            }
        }
    }
    Ok(MetricsReport {
        method: cfg.method.name().to_string(),
        operator: cfg.operator.name().to_string(),
        temperature: cfg.temperature,
        seed: cfg.seed,
        days,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Streaming evaluation regardless of the config's eval mode.
pub fn streaming_eval(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let mut cfg = cfg.clone();
    cfg.eval_mode = EvalMode::Streaming;
    run_experiment(&cfg)
}

/// Last-day run that also hands back the trained stages, for callers that
/// want to checkpoint them.
pub fn run_last_day_with_models(
    cfg: &ExperimentConfig,
) -> Result<(MetricsReport, TrainedStages)> {
    let started = std::time::Instant::now();
    let dataset = cfg.load_data()?;
    cfg.validate(&dataset)?;
    let num_days = dataset.num_days();
    if num_days < 2 {
        return Err(Error::Config("last-day evaluation needs >= 2 days".into()));
    }
    let train_set = dataset.days_before(num_days - 1);
    let stages = train_on(cfg, &train_set)?;
    let test = dataset.day(num_days - 1);
    let (joint, recalls, ndcgs) = evaluate(&stages.models, &test, &cfg.serving, cfg.ndcg_k)?;
    let report = MetricsReport {
        method: cfg.method.name().to_string(),
        operator: cfg.operator.name().to_string(),
        temperature: cfg.temperature,
        seed: cfg.seed,
        days: vec![DayMetrics {
            day: num_days - 1,
            train_days: num_days - 1,
            joint_recall: joint,
            stage_recall: recalls,
            stage_ndcg: ndcgs,
            mean_train_loss: stages.mean_train_loss,
        }],
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((report, stages))
}

/// One experiment per temperature, reusing the config otherwise.
pub fn sweep_tau(cfg: &ExperimentConfig, taus: &[f64]) -> Result<Vec<(f64, MetricsReport)>> {
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut c = cfg.clone();
        c.temperature = tau;
        rows.push((tau, run_experiment(&c)?));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Bound-gap diagnostics

/// Mean gap statistics over a set of impressions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapSummary {
    pub mean_delta: f64,
    pub mean_delta_prime: f64,
    pub max_delta_prime: f64,
    /// Impressions skipped because the stages had no overlapping mass.
    pub degenerate: usize,
    pub impressions: usize,
}

/// Bound-gap summaries before and after training.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub before: GapSummary,
    pub after: GapSummary,
}

/// Per-item survival bound gaps of a two-stage cascade over impressions,
/// using the training quotas. Requires N ≤ 12 for the enumeration.
pub fn gap_summary(
    cfg: &ExperimentConfig,
    models: &[StageModel],
    impressions: &[&ImpressionSample],
) -> Result<GapSummary> {
    if models.len() != 2 {
        return Err(Error::invalid(
            "bound-gap diagnostics cover two-stage cascades",
        ));
    }
    let sur = cfg.surrogate();
    let (q1, q2) = (cfg.train_quotas[0], cfg.train_quotas[1]);
    let mut delta_sum = 0.0;
    let mut dp_sum = 0.0;
    let mut dp_max = 0.0f64;
    let mut used = 0usize;
    let mut degenerate = 0usize;
    for sample in impressions {
        let item_feats: Vec<Vector> =
            sample.items.iter().map(|it| it.features.clone()).collect();
        let (s1, _) = models[0].forward(&sample.user_features, &item_feats)?;
        let (s2, _) = models[1].forward(&sample.user_features, &item_feats)?;
        let p1 = topk_select_prob(&soft_permutation(sur.operator, &s1, sur.temperature)?, q1)?;
        let p2 = topk_select_prob(&soft_permutation(sur.operator, &s2, sur.temperature)?, q2)?;
        match bound_gap(&p1.probs, &p2.probs, q1, q2) {
            Ok(report) => {
                delta_sum += report.mean_delta();
                dp_sum += report.mean_delta_prime();
                dp_max = dp_max.max(report.delta_prime.iter().fold(0.0f64, |m, &v| m.max(v)));
                used += 1;
            }
            Err(Error::Numerical(_)) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::numerical("every impression was degenerate"));
    }
    Ok(GapSummary {
        mean_delta: delta_sum / used as f64,
        mean_delta_prime: dp_sum / used as f64,
        max_delta_prime: dp_max,
        degenerate,
        impressions: used,
    })
}

/// Measures the survival bound gap on held-out impressions before and after
/// training, demonstrating how training tightens the analytic gap estimate.
pub fn diagnostics_run(cfg: &ExperimentConfig, max_impressions: usize) -> Result<DiagnosticsReport> {
    let dataset = cfg.load_data()?;
    let n = cfg.validate(&dataset)?;
    if n > crate::cascade_eval::MAX_ENUMERATION_N {
        return Err(Error::Config(format!(
            "diagnostics need N <= {} per impression, got {n}",
            crate::cascade_eval::MAX_ENUMERATION_N
        )));
    }
    let num_days = dataset.num_days();
    if num_days < 2 {
        return Err(Error::Config("diagnostics need >= 2 days".into()));
    }
    let probe_all = dataset.day(num_days - 1);
    let probe: Vec<&ImpressionSample> =
        probe_all.iter().take(max_impressions).copied().collect();
    let feature_dim = dataset.feature_dim;
    let init_models = init_stage_models(cfg, feature_dim);
    let before = gap_summary(cfg, &init_models, &probe)?;
    let train_set = dataset.days_before(num_days - 1);
    let stages = train_on(cfg, &train_set)?;
    let after = gap_summary(cfg, &stages.models, &probe)?;
    Ok(DiagnosticsReport { before, after })
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &str = "cascade-checkpoint v1";

/// Writes all stages (and fusion weights) as named tensors under per-stage
/// namespaces, so each deployed stage can load only its own parameters.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    models: &[StageModel],
    fusion: Option<&FusionWeights>,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    for (i, model) in models.iter().enumerate() {
        for (name, shape, values) in model.named_tensors() {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("stage{i}/{name} {}\n", dims.join(" ")));
            let vals: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
    }
    if let Some(f) = fusion {
        out.push_str(&format!("fusion/log_sigma {}\n", 1 + f.log_sigma_single.len()));
        let mut vals = vec![format!("{}", f.log_sigma_e2e)];
        vals.extend(f.log_sigma_single.iter().map(|v| format!("{v}")));
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parses a checkpoint into (name → values) with shapes.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == CHECKPOINT_MAGIC => {}
        _ => return Err(Error::Parse {
            line: 1,
            message: format!("expected '{CHECKPOINT_MAGIC}' header"),
        }),
    }
    let mut tensors = BTreeMap::new();
    loop {
        let Some((i, header)) = lines.next() else { break };
        if header.trim().is_empty() {
            continue;
        }
        let mut parts = header.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "missing tensor name".into(),
            })?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("bad shape entry '{p}'"),
                })
            })
            .collect::<Result<_>>()?;
        let (j, values_line) = lines.next().ok_or_else(|| Error::Parse {
            line: i + 2,
            message: format!("tensor '{name}' missing its value line"),
        })?;
        let values: Vec<f64> = values_line
            .split_whitespace()
            .map(|p| {
                p.parse().map_err(|_| Error::Parse {
                    line: j + 1,
                    message: format!("bad value '{p}'"),
                })
            })
            .collect::<Result<_>>()?;
        let expect: usize = shape.iter().product();
        if values.len() != expect {
            return Err(Error::Parse {
                line: j + 1,
                message: format!(
                    "tensor '{name}' declares {expect} values but carries {}",
                    values.len()
                ),
            });
        }
        tensors.insert(name, (shape, values));
    }
    Ok(tensors)
}

/// Loads one stage's parameters from a joint checkpoint; tensors belonging
/// to other stages are ignored.
pub fn load_stage(
    tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    stage: usize,
    model: &mut StageModel,
) -> Result<()> {
    let prefix = format!("stage{stage}/");
    let mut flat = Vec::with_capacity(model.num_params());
    for (name, shape, _) in model.named_tensors() {
        let key = format!("{prefix}{name}");
        let (found_shape, values) = tensors
            .get(&key)
            .ok_or_else(|| Error::Config(format!("checkpoint missing tensor '{key}'")))?;
        if *found_shape != shape {
            return Err(Error::Config(format!(
                "tensor '{key}' has shape {found_shape:?}, expected {shape:?}"
            )));
        }
        flat.extend_from_slice(values);
    }
    model.write_back(&flat);
    Ok(())
}

// ---------------------------------------------------------------------------
// Statistics

/// Welch's two-sample t-test; returns (t statistic, two-sided p value).
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("t-test needs >= 2 samples per side"));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64], m: f64| {
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
    };
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (var(a, ma), var(b, mb));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 <= 0.0 {
        // identical constant samples: no evidence of a difference
        return Ok(if ma == mb { (0.0, 1.0) } else { (f64::INFINITY, 0.0) });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::numerical(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, p))
}
