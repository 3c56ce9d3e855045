//! Surrogate losses for cascade ranking, with hand-written gradients.
//!
//! The survival family turns each stage's scores into a soft permutation,
//! reads off per-item top-q inclusion probabilities, multiplies them across
//! stages, and pushes the product through a clamped cross-entropy against
//! the ground-truth flags:
//!
//! ```text
//! p_i        = (sum of first q_i rows of P̂_i)  ⊘  stopgrad(column sums of P̂_i)
//! joint      = p_1 ⊙ p_2 ⊙ ... ⊙ p_T
//! L_e2e      = -Σ_j [ y_j ln(joint_j) + (1 - y_j) ln(1 - joint_j) ]
//! L_single_i = same cross-entropy on stage i alone at cut K
//! ```
//!
//! The top-q normalizer is a constant in the backward pass (stop-gradient),
//! so every gradient here is the exact derivative of the loss *with the
//! normalizers held fixed*; the `*_value_frozen` functions expose that same
//! function of the scores for finite-difference verification.
//!
//! Losses sum over items within one impression. Batch aggregation (a mean
//! over impressions) is the harness's job.

use crate::diffsort::{
    hard_sort_desc, pullback_precomputed, soft_permutation, OperatorKind, SoftPermutation,
};
use crate::error::{Error, Result};
use crate::numerics::{
    clamped_log, clamped_log_grad, logistic, softplus, Matrix, Vector, DEFAULT_EPSILON,
};

/// Per-item probability of surviving a stage's top-q cut.
#[derive(Debug, Clone)]
pub struct TopKProbability {
    pub probs: Vector,
    pub quota: usize,
}

/// Operator, temperature and clamp shared by the survival losses.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateConfig {
    pub operator: OperatorKind,
    pub temperature: f64,
    pub epsilon: f64,
}

impl SurrogateConfig {
    pub fn new(operator: OperatorKind, temperature: f64) -> Self {
        Self {
            operator,
            temperature,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self::new(OperatorKind::NeuralSort, 1.0)
    }
}

/// A loss value with its gradients.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    /// One dL/d(scores) vector per stage the loss touches.
    pub grads_per_stage: Vec<Vector>,
    /// Gradients for trainable fusion parameters, when the loss has any.
    pub fusion_grads: Option<Vec<f64>>,
}

impl LossOutput {
    fn new(value: f64, grads_per_stage: Vec<Vector>) -> Self {
        debug_assert!(value.is_finite());
        debug_assert!(grads_per_stage.iter().all(Vector::is_finite));
        Self {
            value,
            grads_per_stage,
            fusion_grads: None,
        }
    }
}

/// Trainable uncertainty weights, stored as log σ so that the effective
/// weights exp(log σ) stay positive without constraints.
#[derive(Debug, Clone)]
pub struct FusionWeights {
    pub log_sigma_e2e: f64,
    pub log_sigma_single: Vec<f64>,
}

impl FusionWeights {
    /// All weights start at σ = 1.
    pub fn unit(num_stages: usize) -> Self {
        Self {
            log_sigma_e2e: 0.0,
            log_sigma_single: vec![0.0; num_stages],
        }
    }

    pub fn sigma_e2e(&self) -> f64 {
        self.log_sigma_e2e.exp()
    }

    pub fn sigma_single(&self, stage: usize) -> f64 {
        self.log_sigma_single[stage].exp()
    }
}

/// Relaxed top-q selection mass: the sum of the first `q` rows of P̂
/// (no normalization). Because P̂ is row-stochastic this vector always
/// sums to exactly `q`, though individual entries may exceed 1.
pub fn topk_mass(perm: &SoftPermutation, q: usize) -> Result<Vector> {
    let n = perm.n();
    if q == 0 || q > n {
        return Err(Error::invalid(format!("quota {q} out of range [1, {n}]")));
    }
    let mut mass = Vector::zeros(n);
    for r in 0..q {
        let row = perm.matrix.row(r);
        for j in 0..n {
            mass[j] += row[j];
        }
    }
    Ok(mass)
}

/// Per-item soft probability of being selected into the top `q`.
///
/// The top-q row mass is divided elementwise by the column sums of P̂,
/// which keeps every entry inside [0, 1]. The divisor is a constant in the
/// backward pass.
pub fn topk_select_prob(perm: &SoftPermutation, q: usize) -> Result<TopKProbability> {
    let mass = topk_mass(perm, q)?;
    let denom = perm.matrix.col_sums();
    let n = perm.n();
    let mut probs = Vector::zeros(n);
    for j in 0..n {
        if denom[j] <= 0.0 {
            return Err(Error::numerical(format!(
                "column {j} of the soft permutation sums to {}; cannot normalize",
                denom[j]
            )));
        }
        probs[j] = mass[j] / denom[j];
        debug_assert!((-1e-9..=1.0 + 1e-9).contains(&probs[j]));
    }
    Ok(TopKProbability { probs, quota: q })
}

/// Elementwise product of per-stage survival probabilities.
pub fn joint_survival(stage_probs: &[TopKProbability]) -> Result<Vector> {
    let first = stage_probs
        .first()
        .ok_or_else(|| Error::invalid("need at least one stage"))?;
    let n = first.probs.len();
    let mut joint = first.probs.clone();
    for stage in &stage_probs[1..] {
        if stage.probs.len() != n {
            return Err(Error::invalid(format!(
                "stage probability lengths differ: {} vs {n}",
                stage.probs.len()
            )));
        }
        for j in 0..n {
            joint[j] *= stage.probs[j];
        }
    }
    Ok(joint)
}

fn validate_scores(scores: &Vector, n: usize, what: &str) -> Result<()> {
    if scores.len() != n {
        return Err(Error::invalid(format!(
            "{what} has length {} but expected {n}",
            scores.len()
        )));
    }
    if !scores.is_finite() {
        return Err(Error::invalid(format!("{what} contains non-finite entries")));
    }
    Ok(())
}

fn validate_binary(gt_flags: &Vector) -> Result<()> {
    if gt_flags.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid("gt_flags must be 0/1"));
    }
    Ok(())
}

/// One stage's forward pass through the soft top-q machinery.
struct StageForward {
    perm: SoftPermutation,
    denom: Vector,
    probs: Vector,
}

fn stage_forward(
    cfg: &SurrogateConfig,
    scores: &Vector,
    quota: usize,
    frozen_denom: Option<&Vector>,
) -> Result<StageForward> {
    let perm = soft_permutation(cfg.operator, scores, cfg.temperature)?;
    let mass = topk_mass(&perm, quota)?;
    let denom = match frozen_denom {
        Some(d) => d.clone(),
        None => perm.matrix.col_sums(),
    };
    let n = scores.len();
    let mut probs = Vector::zeros(n);
    for j in 0..n {
        if denom[j] <= 0.0 {
            return Err(Error::numerical(format!("column {j} sum is {}", denom[j])));
        }
        probs[j] = mass[j] / denom[j];
    }
    Ok(StageForward { perm, denom, probs })
}

/// Cross-entropy of a survival vector against binary flags, clamped.
fn survival_cross_entropy(p: &Vector, gt_flags: &Vector, epsilon: f64) -> f64 {
    let mut value = 0.0;
    for j in 0..p.len() {
        let y = gt_flags[j];
        value -= y * clamped_log(p[j], epsilon) + (1.0 - y) * clamped_log(1.0 - p[j], epsilon);
    }
    value
}

/// dL/dp for the clamped cross-entropy.
fn survival_cross_entropy_grad(p: &Vector, gt_flags: &Vector, epsilon: f64) -> Vector {
    Vector::from_fn(p.len(), |j| {
        let y = gt_flags[j];
        -y * clamped_log_grad(p[j], epsilon) + (1.0 - y) * clamped_log_grad(1.0 - p[j], epsilon)
    })
}

/// Pushes dL/d(stage probs) back through the top-q mass into the scores.
fn stage_grad(stage: &StageForward, scores: &Vector, quota: usize, dprobs: &Vector) -> Result<Vector> {
    let n = scores.len();
    // dL/d(mass_j) = dL/d(prob_j) / denom_j, denom held constant.
    // The mass is the sum of the first `quota` rows, so the upstream matrix
    // repeats that row gradient over the first `quota` rows.
    let mut upstream = Matrix::zeros(n, n);
    for r in 0..quota {
        let row = upstream.row_mut(r);
        for j in 0..n {
            row[j] = dprobs[j] / stage.denom[j];
        }
    }
    pullback_precomputed(&stage.perm, scores, &upstream)
}

/// End-to-end survival loss across all stages.
///
/// `train_quotas[i]` is the top-q cut stage i contributes to the joint
/// survival product. Gradients flow to every stage's scores.
pub fn loss_e2e(
    stage_scores: &[Vector],
    train_quotas: &[usize],
    gt_flags: &Vector,
    cfg: &SurrogateConfig,
) -> Result<LossOutput> {
    let t = stage_scores.len();
    if t == 0 {
        return Err(Error::invalid("need at least one stage"));
    }
    if train_quotas.len() != t {
        return Err(Error::invalid(format!(
            "got {} quotas for {t} stages",
            train_quotas.len()
        )));
    }
    let n = gt_flags.len();
    validate_binary(gt_flags)?;
    for (i, s) in stage_scores.iter().enumerate() {
        validate_scores(s, n, &format!("stage {i} scores"))?;
    }

    let mut stages = Vec::with_capacity(t);
    for i in 0..t {
        stages.push(stage_forward(cfg, &stage_scores[i], train_quotas[i], None)?);
    }

    let mut joint = Vector::from_fn(n, |_| 1.0);
    for st in &stages {
        for j in 0..n {
            joint[j] *= st.probs[j];
        }
    }
    let value = survival_cross_entropy(&joint, gt_flags, cfg.epsilon);
    let djoint = survival_cross_entropy_grad(&joint, gt_flags, cfg.epsilon);

    let mut grads = Vec::with_capacity(t);
    for i in 0..t {
        // Leave-one-out product across the other stages.
        let mut dprobs = djoint.clone();
        for (k, st) in stages.iter().enumerate() {
            if k != i {
                for j in 0..n {
                    dprobs[j] *= st.probs[j];
                }
            }
        }
        grads.push(stage_grad(&stages[i], &stage_scores[i], train_quotas[i], &dprobs)?);
    }
    Ok(LossOutput::new(value, grads))
}

/// Single-stage auxiliary loss: the same survival cross-entropy at cut `k`,
/// forcing one stage to separate ground truth from the whole candidate list.
pub fn loss_single(
    scores: &Vector,
    k: usize,
    gt_flags: &Vector,
    cfg: &SurrogateConfig,
) -> Result<LossOutput> {
    let n = gt_flags.len();
    validate_binary(gt_flags)?;
    validate_scores(scores, n, "scores")?;
    let stage = stage_forward(cfg, scores, k, None)?;
    let value = survival_cross_entropy(&stage.probs, gt_flags, cfg.epsilon);
    let dprobs = survival_cross_entropy_grad(&stage.probs, gt_flags, cfg.epsilon);
    let grad = stage_grad(&stage, scores, k, &dprobs)?;
    Ok(LossOutput::new(value, vec![grad]))
}

/// [`loss_e2e`]'s value as a function of the scores with the top-q
/// normalizers pinned to `denoms` (one vector per stage). Evaluating this at
/// perturbed scores is the correct finite-difference counterpart of the
/// stop-gradient backward pass.
pub fn loss_e2e_value_frozen(
    stage_scores: &[Vector],
    train_quotas: &[usize],
    gt_flags: &Vector,
    cfg: &SurrogateConfig,
    denoms: &[Vector],
) -> Result<f64> {
    let n = gt_flags.len();
    let mut joint = Vector::from_fn(n, |_| 1.0);
    for i in 0..stage_scores.len() {
        let st = stage_forward(cfg, &stage_scores[i], train_quotas[i], Some(&denoms[i]))?;
        for j in 0..n {
            joint[j] *= st.probs[j];
        }
    }
    Ok(survival_cross_entropy(&joint, gt_flags, cfg.epsilon))
}

/// [`loss_single`]'s value with a pinned normalizer; see
/// [`loss_e2e_value_frozen`].
pub fn loss_single_value_frozen(
    scores: &Vector,
    k: usize,
    gt_flags: &Vector,
    cfg: &SurrogateConfig,
    denom: &Vector,
) -> Result<f64> {
    let st = stage_forward(cfg, scores, k, Some(denom))?;
    Ok(survival_cross_entropy(&st.probs, gt_flags, cfg.epsilon))
}

/// Column sums of the soft permutation at `scores` — the stop-gradient
/// normalizer the survival losses divide by.
pub fn stage_denominator(cfg: &SurrogateConfig, scores: &Vector) -> Result<Vector> {
    let perm = soft_permutation(cfg.operator, scores, cfg.temperature)?;
    Ok(perm.matrix.col_sums())
}

const LN_2: f64 = std::f64::consts::LN_2;

/// Uncertainty-weighted fusion of the end-to-end loss with the per-stage
/// auxiliary losses:
///
/// ```text
/// L = L_e2e / (2 α²) + Σ_i L_single_i / (2 σ_i²) + log2(α Π_i σ_i)
/// ```
///
/// with α = exp(log σ_e2e), σ_i = exp(log σ_i). Score gradients are the
/// inputs' gradients scaled by their 1/(2σ²) factors; fusion gradients are
/// with respect to the log σ parameters.
pub fn loss_uwl(e2e: &LossOutput, singles: &[LossOutput], w: &FusionWeights) -> Result<LossOutput> {
    if singles.is_empty() {
        return Err(Error::invalid("need at least one single-stage loss"));
    }
    if singles.len() != w.log_sigma_single.len() {
        return Err(Error::invalid(format!(
            "{} single losses but {} fusion weights",
            singles.len(),
            w.log_sigma_single.len()
        )));
    }
    if e2e.grads_per_stage.len() != singles.len() {
        return Err(Error::invalid(format!(
            "e2e covers {} stages but {} single losses given",
            e2e.grads_per_stage.len(),
            singles.len()
        )));
    }
    let alpha = w.sigma_e2e();
    let mut value = e2e.value / (2.0 * alpha * alpha) + w.log_sigma_e2e / LN_2;
    let mut grads = Vec::with_capacity(singles.len());
    let mut fusion = Vec::with_capacity(1 + singles.len());
    fusion.push(-e2e.value / (alpha * alpha) + 1.0 / LN_2);
    for (i, single) in singles.iter().enumerate() {
        let sigma = w.sigma_single(i);
        value += single.value / (2.0 * sigma * sigma) + w.log_sigma_single[i] / LN_2;
        let mut g = e2e.grads_per_stage[i].scale(1.0 / (2.0 * alpha * alpha));
        g = g.add(&single.grads_per_stage[0].scale(1.0 / (2.0 * sigma * sigma)));
        grads.push(g);
        fusion.push(-single.value / (sigma * sigma) + 1.0 / LN_2);
    }
    let mut out = LossOutput::new(value, grads);
    out.fusion_grads = Some(fusion);
    Ok(out)
}

/// Fixed-weight fusion: `w_e2e * L_e2e + Σ_i w_single[i] * L_single_i`.
/// No trainable fusion parameters.
pub fn loss_fixed_fusion(
    e2e: &LossOutput,
    singles: &[LossOutput],
    w_e2e: f64,
    w_single: &[f64],
) -> Result<LossOutput> {
    if singles.len() != w_single.len() || e2e.grads_per_stage.len() != singles.len() {
        return Err(Error::invalid("fixed fusion weight/stage count mismatch"));
    }
    let mut value = w_e2e * e2e.value;
    let mut grads = Vec::with_capacity(singles.len());
    for (i, single) in singles.iter().enumerate() {
        value += w_single[i] * single.value;
        let g = e2e.grads_per_stage[i]
            .scale(w_e2e)
            .add(&single.grads_per_stage[0].scale(w_single[i]));
        grads.push(g);
    }
    Ok(LossOutput::new(value, grads))
}

/// Pointwise binary cross-entropy on logits, averaged over items.
pub fn loss_bce(scores: &Vector, gt_flags: &Vector) -> Result<LossOutput> {
    let n = gt_flags.len();
    validate_binary(gt_flags)?;
    validate_scores(scores, n, "scores")?;
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Vector::zeros(n);
    for j in 0..n {
        let s = scores[j];
        let y = gt_flags[j];
        // -[y ln σ(s) + (1-y) ln(1-σ(s))] = softplus(-s)·y + softplus(s)·(1-y)
        value += inv * (y * softplus(-s) + (1.0 - y) * softplus(s));
        grad[j] = inv * (logistic(s) - y);
    }
    Ok(LossOutput::new(value, vec![grad]))
}

/// Pairwise RankNet loss over all ordered pairs with strictly greater grade,
/// averaged over pairs. Equal grades contribute nothing; with no valid pairs
/// the loss is 0 with zero gradient.
pub fn loss_ranknet(scores: &Vector, grades: &[i64]) -> Result<LossOutput> {
    let n = grades.len();
    validate_scores(scores, n, "scores")?;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if grades[i] > grades[j] {
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Ok(LossOutput::new(0.0, vec![Vector::zeros(n)]));
    }
    let inv = 1.0 / pairs as f64;
    let mut value = 0.0;
    let mut grad = Vector::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if grades[i] > grades[j] {
                let d = scores[i] - scores[j];
                value += inv * softplus(-d);
                let g = inv * logistic(-d);
                grad[i] -= g;
                grad[j] += g;
            }
        }
    }
    Ok(LossOutput::new(value, vec![grad]))
}

/// Binary top-q indicator from a hard sort, as a probability vector.
pub fn hard_topk_indicator(scores: &Vector, q: usize) -> Vector {
    let order = hard_sort_desc(scores).order;
    let mut out = Vector::zeros(scores.len());
    for &item in order.iter().take(q) {
        out[item] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffsort::neural_sort;
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_of(v: &[f64]) -> Vector {
        Vector::new(v.to_vec()).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vector {
        Vector::from_fn(n, |_| rng.random_range(lo..hi))
    }

    fn random_flags(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        // at least one positive and one negative
        loop {
            let f = Vector::from_fn(n, |_| if rng.random_bool(0.35) { 1.0 } else { 0.0 });
            let s = f.sum();
            if s > 0.0 && s < n as f64 {
                return f;
            }
        }
    }

    #[test]
    fn topk_on_hard_permutation_is_indicator() {
        // tiny temperature makes the matrix effectively hard
        let perm = neural_sort(&vec_of(&[3.0, 1.0, 2.0]), 1e-4).unwrap();
        let p = topk_select_prob(&perm, 2).unwrap();
        assert!((p.probs[0] - 1.0).abs() < 1e-9);
        assert!(p.probs[1].abs() < 1e-9);
        assert!((p.probs[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn topk_full_quota_is_all_ones() {
        let perm = neural_sort(&vec_of(&[0.3, -1.0, 0.9, 0.0]), 2.0).unwrap();
        let p = topk_select_prob(&perm, 4).unwrap();
        for j in 0..4 {
            assert_eq!(p.probs[j], 1.0);
        }
    }

    #[test]
    fn topk_two_item_hand_value() {
        // columns of the 2x2 neural-sort matrix each sum to 1
        let perm = neural_sort(&vec_of(&[2.0, 1.0]), 1.0).unwrap();
        let p = topk_select_prob(&perm, 1).unwrap();
        assert!((p.probs[0] - 0.7311).abs() < 1e-4);
        assert!((p.probs[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn topk_rejects_bad_quota() {
        let perm = neural_sort(&vec_of(&[1.0, 2.0]), 1.0).unwrap();
        assert!(topk_select_prob(&perm, 0).is_err());
        assert!(topk_select_prob(&perm, 3).is_err());
    }

    #[test]
    fn topk_mass_always_sums_to_quota() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &tau in &[1e-4, 0.5, 1.0, 10.0, 100.0] {
            for kind in [OperatorKind::NeuralSort, OperatorKind::SoftSort] {
                let n = rng.random_range(2..12);
                let s = random_vec(&mut rng, n, -3.0, 3.0);
                let perm = soft_permutation(kind, &s, tau).unwrap();
                for q in 1..=n {
                    let mass = topk_mass(&perm, q).unwrap();
                    assert!(
                        (mass.sum() - q as f64).abs() <= 1e-9,
                        "mass sum {} != {q}",
                        mass.sum()
                    );
                }
            }
        }
    }

    #[test]
    fn joint_survival_examples() {
        let a = TopKProbability {
            probs: vec_of(&[1.0, 0.0, 1.0]),
            quota: 2,
        };
        let b = TopKProbability {
            probs: vec_of(&[1.0, 1.0, 0.0]),
            quota: 2,
        };
        // single stage: identity
        let only = joint_survival(std::slice::from_ref(&a)).unwrap();
        assert_eq!(only.as_slice(), &[1.0, 0.0, 1.0]);
        // binary case equals set intersection
        let both = joint_survival(&[a.clone(), b]).unwrap();
        assert_eq!(both.as_slice(), &[1.0, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = TopKProbability {
            probs: random_vec(&mut rng, 4, 0.0, 1.0),
            quota: 2,
        };
        let q = TopKProbability {
            probs: random_vec(&mut rng, 4, 0.0, 1.0),
            quota: 2,
        };
        let joint = joint_survival(&[p.clone(), q.clone()]).unwrap();
        for j in 0..4 {
            assert!(joint[j] <= p.probs[j].min(q.probs[j]) + 1e-15);
        }
    }

    #[test]
    fn joint_survival_rejects_length_mismatch() {
        let a = TopKProbability {
            probs: vec_of(&[1.0, 0.0]),
            quota: 1,
        };
        let b = TopKProbability {
            probs: vec_of(&[1.0, 0.0, 0.0]),
            quota: 1,
        };
        assert!(joint_survival(&[a, b]).is_err());
    }

    #[test]
    fn e2e_saturates_to_zero_on_perfect_ranking() {
        // ground truth strictly highest in both stages, quotas = K
        let scores = vec_of(&[5.0, 4.5, 1.0, 0.5, -1.0, -2.0]);
        let gt = vec_of(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let cfg = SurrogateConfig::new(OperatorKind::NeuralSort, 1e-4);
        let out = loss_e2e(&[scores.clone(), scores], &[2, 2], &gt, &cfg).unwrap();
        assert!(out.value <= 1e-3, "value = {}", out.value);
    }

    #[test]
    fn e2e_rejects_nan_scores() {
        let mut s = vec_of(&[1.0, 2.0]);
        s[0] = f64::NAN;
        let gt = vec_of(&[1.0, 0.0]);
        let cfg = SurrogateConfig::default();
        assert!(loss_e2e(&[s], &[1], &gt, &cfg).is_err());
    }

    #[test]
    fn e2e_accepts_all_zero_and_all_one_flags() {
        let s = vec_of(&[1.0, 0.0, -1.0]);
        let cfg = SurrogateConfig::default();
        for flags in [vec_of(&[0.0, 0.0, 0.0]), vec_of(&[1.0, 1.0, 1.0])] {
            let out = loss_e2e(&[s.clone(), s.clone()], &[2, 2], &flags, &cfg).unwrap();
            assert!(out.value.is_finite());
        }
    }

    /// Finite-difference check of loss_e2e across all stages at once.
    /// The fd oracle evaluates the loss with the top-q normalizers frozen at
    /// the base point, matching the stop-gradient backward pass.
    fn fd_check_e2e(
        stage_scores: &[Vector],
        quotas: &[usize],
        gt: &Vector,
        cfg: &SurrogateConfig,
    ) -> f64 {
        let t = stage_scores.len();
        let n = gt.len();
        let denoms: Vec<Vector> = stage_scores
            .iter()
            .map(|s| stage_denominator(cfg, s).unwrap())
            .collect();
        let unflatten = move |x: &Vector| -> Vec<Vector> {
            (0..t).map(|i| Vector::from_fn(n, |j| x[i * n + j])).collect()
        };
        let flat = Vector::from_fn(t * n, |i| stage_scores[i / n][i % n]);
        let f = |x: &Vector| {
            loss_e2e_value_frozen(&unflatten(x), quotas, gt, cfg, &denoms).unwrap()
        };
        let g = |x: &Vector| {
            let out = loss_e2e(&unflatten(x), quotas, gt, cfg).unwrap();
            Vector::from_fn(t * n, |i| out.grads_per_stage[i / n][i % n])
        };
        grad_check(f, g, &flat, 1e-6).unwrap()
    }

    #[test]
    fn e2e_gradients_match_finite_differences_two_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &tau in &[0.5, 1.0, 10.0] {
            let cfg = SurrogateConfig::new(OperatorKind::NeuralSort, tau);
            let s1 = random_vec(&mut rng, 8, -2.0, 2.0);
            let s2 = random_vec(&mut rng, 8, -2.0, 2.0);
            let gt = random_flags(&mut rng, 8);
            let err = fd_check_e2e(&[s1, s2], &[3, 2], &gt, &cfg);
            assert!(err <= 1e-4, "tau = {tau}: err = {err}");
        }
    }

    #[test]
    fn e2e_gradients_match_finite_differences_three_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cfg = SurrogateConfig::new(OperatorKind::NeuralSort, 1.0);
        let stages: Vec<Vector> = (0..3).map(|_| random_vec(&mut rng, 8, -2.0, 2.0)).collect();
        let gt = random_flags(&mut rng, 8);
        let err = fd_check_e2e(&stages, &[5, 3, 2], &gt, &cfg);
        assert!(err <= 1e-4, "err = {err}");
    }

    #[test]
    fn single_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for kind in [OperatorKind::NeuralSort, OperatorKind::SoftSort] {
            let cfg = SurrogateConfig::new(kind, 1.0);
            let s = random_vec(&mut rng, 8, -2.0, 2.0);
            let gt = random_flags(&mut rng, 8);
            let denom = stage_denominator(&cfg, &s).unwrap();
            let f = |x: &Vector| loss_single_value_frozen(x, 3, &gt, &cfg, &denom).unwrap();
            let g = |x: &Vector| loss_single(x, 3, &gt, &cfg).unwrap().grads_per_stage[0].clone();
            let err = grad_check(f, g, &s, 1e-6).unwrap();
            assert!(err <= 1e-4, "{}: err = {err}", kind.name());
        }
    }

    #[test]
    fn uwl_unit_weights_closed_form() {
        let e2e = LossOutput::new(2.0, vec![vec_of(&[1.0, 0.0]), vec_of(&[0.0, 1.0])]);
        let s1 = LossOutput::new(1.0, vec![vec_of(&[0.5, 0.5])]);
        let s2 = LossOutput::new(3.0, vec![vec_of(&[0.1, -0.1])]);
        let w = FusionWeights::unit(2);
        let out = loss_uwl(&e2e, &[s1, s2], &w).unwrap();
        assert!((out.value - (1.0 + 0.5 + 1.5)).abs() < 1e-12);
    }

    #[test]
    fn uwl_doubling_alpha_quarters_e2e_term_plus_one() {
        let e2e = LossOutput::new(4.0, vec![vec_of(&[0.0]), vec_of(&[0.0])]);
        let s = LossOutput::new(0.0, vec![vec_of(&[0.0])]);
        let singles = [s.clone(), s];
        let w1 = FusionWeights::unit(2);
        let mut w2 = FusionWeights::unit(2);
        w2.log_sigma_e2e = 2.0f64.ln();
        let v1 = loss_uwl(&e2e, &singles, &w1).unwrap().value;
        let v2 = loss_uwl(&e2e, &singles, &w2).unwrap().value;
        // e2e term falls from 2.0 to 0.5, regularizer adds log2(2) = 1
        assert!((v1 - 2.0).abs() < 1e-12);
        assert!((v2 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn uwl_fusion_gradients_match_finite_differences() {
        let e2e = LossOutput::new(1.3, vec![vec_of(&[0.0]), vec_of(&[0.0])]);
        let s1 = LossOutput::new(0.7, vec![vec_of(&[0.0])]);
        let s2 = LossOutput::new(2.1, vec![vec_of(&[0.0])]);
        let singles = [s1, s2];
        let point = Vector::new(vec![0.2, -0.4, 0.1]).unwrap();
        let f = |x: &Vector| {
            let w = FusionWeights {
                log_sigma_e2e: x[0],
                log_sigma_single: vec![x[1], x[2]],
            };
            loss_uwl(&e2e, &singles, &w).unwrap().value
        };
        let g = |x: &Vector| {
            let w = FusionWeights {
                log_sigma_e2e: x[0],
                log_sigma_single: vec![x[1], x[2]],
            };
            Vector::new(loss_uwl(&e2e, &singles, &w).unwrap().fusion_grads.unwrap()).unwrap()
        };
        let err = grad_check(f, g, &point, 1e-6).unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn uwl_stationary_point_matches_numerical_minimizer() {
        // per-term stationarity: d/dt [L e^{-2t}/2 + t/ln2] = 0  =>  sigma^2 = L ln 2
        for &l in &[0.4, 1.0, 2.7] {
            let analytic = 0.5 * (l * LN_2).ln();
            let f = |t: f64| l * (-2.0 * t).exp() / 2.0 + t / LN_2;
            // ternary search on a bracket
            let (mut lo, mut hi) = (-10.0f64, 10.0f64);
            for _ in 0..200 {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                if f(m1) < f(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let numeric = 0.5 * (lo + hi);
            assert!(
                (numeric - analytic).abs() <= 1e-6,
                "L = {l}: numeric {numeric} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn bce_hand_values() {
        let out = loss_bce(&vec_of(&[0.0]), &vec_of(&[1.0])).unwrap();
        assert!((out.value - LN_2).abs() < 1e-12);
        let out = loss_bce(&vec_of(&[20.0]), &vec_of(&[1.0])).unwrap();
        assert!(out.value < 1e-8);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_vec(&mut rng, 8, -3.0, 3.0);
        let y = random_flags(&mut rng, 8);
        let yc = y.clone();
        let f = move |x: &Vector| loss_bce(x, &yc).unwrap().value;
        let g = |x: &Vector| loss_bce(x, &y).unwrap().grads_per_stage[0].clone();
        let err = grad_check(f, g, &s, 1e-6).unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn ranknet_hand_values() {
        let out = loss_ranknet(&vec_of(&[1.0, 0.0]), &[2, 1]).unwrap();
        assert!((out.value - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((out.value - 0.3133).abs() < 1e-4);
        // all grades equal -> empty pair set
        let out = loss_ranknet(&vec_of(&[1.0, 0.0, 2.0]), &[3, 3, 3]).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grads_per_stage[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ranknet_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_vec(&mut rng, 8, -2.0, 2.0);
        let grades: Vec<i64> = (0..8).map(|_| rng.random_range(0..3)).collect();
        let gr = grades.clone();
        let f = move |x: &Vector| loss_ranknet(x, &gr).unwrap().value;
        let g = |x: &Vector| loss_ranknet(x, &grades).unwrap().grads_per_stage[0].clone();
        let err = grad_check(f, g, &s, 1e-6).unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn single_saturates_high_when_ground_truth_ranked_last() {
        // K ground-truth items strictly lowest: every log term pins at the clamp
        let scores = vec_of(&[-5.0, -4.0, 1.0, 2.0, 3.0, 4.0]);
        let gt = vec_of(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let cfg = SurrogateConfig::new(OperatorKind::NeuralSort, 1e-4);
        let out = loss_single(&scores, 2, &gt, &cfg).unwrap();
        let ceiling = 2.0 * 2.0 * cfg.epsilon.ln().abs();
        assert!(out.value >= 0.9 * ceiling, "value = {}", out.value);
    }

    #[test]
    fn single_saturates_to_zero_on_perfect_ranking() {
        let scores = vec_of(&[5.0, 4.0, 1.0, 0.0]);
        let gt = vec_of(&[1.0, 1.0, 0.0, 0.0]);
        let cfg = SurrogateConfig::new(OperatorKind::NeuralSort, 1e-4);
        let out = loss_single(&scores, 2, &gt, &cfg).unwrap();
        assert!(out.value <= 1e-3);
    }

    #[test]
    fn e2e_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 7;
        let s1 = random_vec(&mut rng, n, -2.0, 2.0);
        let s2 = random_vec(&mut rng, n, -2.0, 2.0);
        let gt = random_flags(&mut rng, n);
        let cfg = SurrogateConfig::new(OperatorKind::NeuralSort, 1.0);
        let base = loss_e2e(&[s1.clone(), s2.clone()], &[3, 2], &gt, &cfg).unwrap();
        // rotate everything by 2
        let rot = |v: &Vector| Vector::from_fn(n, |i| v[(i + 2) % n]);
        let out = loss_e2e(&[rot(&s1), rot(&s2)], &[3, 2], &rot(&gt), &cfg).unwrap();
        assert!((base.value - out.value).abs() <= 1e-9);
        for stage in 0..2 {
            for j in 0..n {
                let a = base.grads_per_stage[stage][(j + 2) % n];
                let b = out.grads_per_stage[stage][j];
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn e2e_pushes_up_a_ground_truth_item_another_stage_likes() {
        // stage 1 ranks the ground-truth item last, stage 2 ranks it first;
        // the end-to-end loss should still push stage 1's score for it up
        // (negative gradient = ascent under gradient descent).
        let s1 = vec_of(&[-2.0, 1.0, 2.0, 3.0, 4.0]);
        let s2 = vec_of(&[4.0, 1.0, 0.5, 0.0, -1.0]);
        let gt = vec_of(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        let cfg = SurrogateConfig::new(OperatorKind::NeuralSort, 1.0);
        let out = loss_e2e(&[s1, s2], &[2, 2], &gt, &cfg).unwrap();
        assert!(
            out.grads_per_stage[0][0] < 0.0,
            "stage-1 gradient for the item was {}",
            out.grads_per_stage[0][0]
        );
    }

    proptest! {
        #[test]
        fn topk_probs_monotone_in_quota(seed in any::<u64>(), n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Vector::from_fn(n, |_| rng.random_range(-3.0..3.0));
            for kind in [OperatorKind::NeuralSort, OperatorKind::SoftSort] {
                let perm = soft_permutation(kind, &s, 1.0).unwrap();
                let mut prev = topk_select_prob(&perm, 1).unwrap().probs;
                for q in 2..=n {
                    let cur = topk_select_prob(&perm, q).unwrap().probs;
                    for j in 0..n {
                        prop_assert!(cur[j] + 1e-12 >= prev[j]);
                    }
                    prev = cur;
                }
            }
        }

        #[test]
        fn topk_cold_limit_is_binary_indicator(seed in any::<u64>(), n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Vector::from_fn(n, |_| rng.random_range(-3.0..3.0));
            let q = rng.random_range(1..=n);
            let indicator = hard_topk_indicator(&s, q);
            for kind in [OperatorKind::NeuralSort, OperatorKind::SoftSort] {
                let perm = soft_permutation(kind, &s, 1e-4).unwrap();
                let p = topk_select_prob(&perm, q).unwrap();
                prop_assert!(p.probs.max_abs_diff(&indicator) <= 1e-3);
            }
        }
    }
}
