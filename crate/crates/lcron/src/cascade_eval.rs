//! Hard cascade filtering, ranking metrics, and the survival-bound oracles.
//!
//! [`exact_survival`] enumerates every size-q1 retrieval outcome to compute
//! the exact per-item survival expectation of a two-stage funnel:
//!
//! ```text
//! P_pi        weight of subset pi, proportional to the product of the
//!             included stage-1 probabilities
//! survival_j  = E_pi [ p2_j · pi_j · (Σ p2) / <pi, p2> ]
//! ```
//!
//! [`bound_gap`] compares that expectation against the product bound
//! p1 ⊙ p2 that the end-to-end loss optimizes, and against the analytic
//! gap estimate Δ′ = p2 ⊙ (q2 / <p1, p2> − 1).
//!
//! Δ ≥ 0 and Δ ≤ Δ′ are exact when p1 is a binary top-q1 indicator and
//! Σ p2 ≤ q2; for generic soft p1 the subset distribution's inclusion
//! probabilities deviate from p1 itself and both comparisons can fail, so
//! this module reports the gaps instead of asserting them. The enumeration
//! is guarded to N ≤ 12 (at most C(12,6) = 924 subsets).

use crate::diffsort::hard_sort_desc;
use crate::error::{Error, Result};
use crate::numerics::Vector;

/// Maximum candidate count the subset enumeration accepts.
pub const MAX_ENUMERATION_N: usize = 12;

/// Serving-funnel shape: per-stage quotas and the ground-truth size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CascadeConfig {
    /// Strictly decreasing per-stage output sizes q_1 > q_2 > ... > q_T.
    pub quotas: Vec<usize>,
    /// Ground-truth set size K < q_T.
    pub gt_size: usize,
}

impl CascadeConfig {
    pub fn new(quotas: Vec<usize>, gt_size: usize) -> Result<Self> {
        if quotas.is_empty() {
            return Err(Error::invalid("cascade needs at least one stage"));
        }
        if quotas.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid(format!(
                "quotas must strictly decrease, got {quotas:?}"
            )));
        }
        let last = *quotas.last().unwrap();
        if gt_size == 0 || gt_size >= last {
            return Err(Error::invalid(format!(
                "gt_size must satisfy 0 < K < q_T, got K={gt_size}, q_T={last}"
            )));
        }
        Ok(Self { quotas, gt_size })
    }

    pub fn stages(&self) -> usize {
        self.quotas.len()
    }
}

/// Sequentially filters candidates through the funnel: stage i sorts its
/// input set by its own scores and keeps the top q_i. Returns the surviving
/// indices (size q_T) in the final stage's rank order.
pub fn cascade_filter(stage_scores: &[Vector], cfg: &CascadeConfig) -> Result<Vec<usize>> {
    if stage_scores.len() != cfg.stages() {
        return Err(Error::invalid(format!(
            "{} score vectors for {} stages",
            stage_scores.len(),
            cfg.stages()
        )));
    }
    let n = stage_scores[0].len();
    let mut survivors: Vec<usize> = (0..n).collect();
    for (scores, &quota) in stage_scores.iter().zip(cfg.quotas.iter()) {
        if scores.len() != n {
            return Err(Error::invalid("stage score lengths differ"));
        }
        if quota > survivors.len() {
            return Err(Error::invalid(format!(
                "quota {quota} exceeds the {} remaining candidates",
                survivors.len()
            )));
        }
        // survivors enter each stage in ascending index order, so the stable
        // sort breaks score ties toward the lower original index
        survivors.sort_unstable();
        survivors.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
        survivors.truncate(quota);
    }
    Ok(survivors)
}

/// |selected ∩ gt| / |gt|.
pub fn recall_at(selected: &[usize], gt: &[usize]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::invalid("ground-truth set must be non-empty"));
    }
    let hits = gt.iter().filter(|g| selected.contains(g)).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// NDCG@k with exponential gain 2^grade − 1 and 1/log2(rank+1) discount.
/// Ranks come from descending score order (ties toward the lower index);
/// the ideal ordering sorts grades descending. All-zero grades define 0.
pub fn ndcg_at(scores: &Vector, grades: &[i64], k: usize) -> Result<f64> {
    let n = scores.len();
    if grades.len() != n {
        return Err(Error::invalid("scores and grades lengths differ"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} out of range [1, {n}]")));
    }
    if grades.iter().all(|&g| g <= 0) {
        return Ok(0.0);
    }
    let gain = |g: i64| -> f64 {
        if g <= 0 {
            0.0
        } else {
            2f64.powi(g as i32) - 1.0
        }
    };
    let dcg = |ordered_grades: &[i64]| -> f64 {
        ordered_grades
            .iter()
            .take(k)
            .enumerate()
            .map(|(rank, &g)| gain(g) / ((rank + 2) as f64).log2())
            .sum()
    };
    let model_order = hard_sort_desc(scores).order;
    let model_grades: Vec<i64> = model_order.iter().map(|&i| grades[i]).collect();
    let mut ideal_grades = grades.to_vec();
    ideal_grades.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal_grades);
    Ok(dcg(&model_grades) / idcg)
}

fn check_survival_inputs(p1: &Vector, p2: &Vector, q1: usize) -> Result<usize> {
    let n = p1.len();
    if p2.len() != n {
        return Err(Error::invalid("p1 and p2 lengths differ"));
    }
    if n > MAX_ENUMERATION_N {
        return Err(Error::invalid(format!(
            "enumeration refuses N = {n} > {MAX_ENUMERATION_N}"
        )));
    }
    if q1 == 0 || q1 > n {
        return Err(Error::invalid(format!("q1 = {q1} out of range [1, {n}]")));
    }
    for (v, name) in [(p1, "p1"), (p2, "p2")] {
        if v.iter().any(|&x| !(0.0..=1.0 + 1e-9).contains(&x)) {
            return Err(Error::invalid(format!("{name} entries must lie in [0, 1]")));
        }
    }
    Ok(n)
}

/// Visits every size-q subset of 0..n in lexicographic order.
fn for_each_subset(n: usize, q: usize, mut visit: impl FnMut(&[usize])) {
    debug_assert!(q >= 1 && q <= n);
    let mut idx: Vec<usize> = (0..q).collect();
    loop {
        visit(&idx);
        let mut i = q;
        while i > 0 && idx[i - 1] == i - 1 + n - q {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..q {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Exact per-item survival expectation of the two-stage funnel by full
/// enumeration of retrieval outcomes.
///
/// Subsets with zero stage-2 overlap contribute nothing (their renormalized
/// survivor mass is empty). Errors if every subset has zero weight.
pub fn exact_survival(p1: &Vector, p2: &Vector, q1: usize) -> Result<Vector> {
    let n = check_survival_inputs(p1, p2, q1)?;
    let total_p2 = p2.sum();
    let mut weight_sum = 0.0;
    let mut acc = Vector::zeros(n);
    for_each_subset(n, q1, |subset| {
        let mut w = 1.0;
        for &i in subset {
            w *= p1[i];
        }
        if w == 0.0 {
            return;
        }
        weight_sum += w;
        let overlap: f64 = subset.iter().map(|&i| p2[i]).sum();
        if overlap <= 0.0 {
            return;
        }
        let scale = w * total_p2 / overlap;
        for &i in subset {
            acc[i] += scale * p2[i];
        }
    });
    if weight_sum <= 0.0 {
        return Err(Error::numerical(
            "every size-q1 subset has zero probability under p1",
        ));
    }
    Ok(acc.scale(1.0 / weight_sum))
}

/// Inclusion probabilities E[pi] of the subset distribution driven by p1.
/// The survival bound treats these as equal to p1 itself; this lets callers
/// measure how far off that is.
pub fn subset_inclusion_probs(p1: &Vector, q1: usize) -> Result<Vector> {
    let n = p1.len();
    if n > MAX_ENUMERATION_N {
        return Err(Error::invalid(format!(
            "enumeration refuses N = {n} > {MAX_ENUMERATION_N}"
        )));
    }
    if q1 == 0 || q1 > n {
        return Err(Error::invalid(format!("q1 = {q1} out of range [1, {n}]")));
    }
    let mut weight_sum = 0.0;
    let mut acc = Vector::zeros(n);
    for_each_subset(n, q1, |subset| {
        let mut w = 1.0;
        for &i in subset {
            w *= p1[i];
        }
        if w == 0.0 {
            return;
        }
        weight_sum += w;
        for &i in subset {
            acc[i] += w;
        }
    });
    if weight_sum <= 0.0 {
        return Err(Error::numerical("all subsets have zero probability"));
    }
    Ok(acc.scale(1.0 / weight_sum))
}

/// Exact survival vs. the product bound, with the analytic gap estimate.
#[derive(Debug, Clone)]
pub struct GapReport {
    /// Enumerated per-item survival expectation.
    pub exact_survival: Vector,
    /// p1 ⊙ p2, the quantity the end-to-end loss drives up.
    pub product_bound: Vector,
    /// exact − bound.
    pub delta: Vector,
    /// p2 ⊙ (q2 / <p1, p2> − 1).
    pub delta_prime: Vector,
    /// Whether p1 is (within 1e-6) the binary indicator of p2's top q1 —
    /// the configuration that minimizes Δ′.
    pub eq_condition_holds: bool,
}

impl GapReport {
    pub fn mean_delta(&self) -> f64 {
        self.delta.sum() / self.delta.len() as f64
    }

    pub fn mean_delta_prime(&self) -> f64 {
        self.delta_prime.sum() / self.delta_prime.len() as f64
    }

    /// Largest entrywise violation of exact ≥ product bound (0 if none).
    pub fn max_bound_violation(&self) -> f64 {
        self.delta.iter().fold(0.0f64, |m, &d| m.max(-d))
    }

    /// Largest entrywise excess of Δ over Δ′ (0 if none).
    pub fn max_gap_excess(&self) -> f64 {
        (0..self.delta.len())
            .map(|j| self.delta[j] - self.delta_prime[j])
            .fold(0.0f64, f64::max)
    }
}

/// Computes the full gap report for one (p1, p2) pair.
pub fn bound_gap(p1: &Vector, p2: &Vector, q1: usize, q2: usize) -> Result<GapReport> {
    let n = check_survival_inputs(p1, p2, q1)?;
    if q2 == 0 || q2 > n {
        return Err(Error::invalid(format!("q2 = {q2} out of range [1, {n}]")));
    }
    let inner = p1.dot(p2);
    if inner <= 0.0 {
        return Err(Error::numerical(
            "<p1, p2> = 0: stages have no overlapping mass",
        ));
    }
    let exact = exact_survival(p1, p2, q1)?;
    let product_bound = p1.hadamard(p2);
    let delta = Vector::from_fn(n, |j| exact[j] - product_bound[j]);
    let factor = q2 as f64 / inner - 1.0;
    let delta_prime = p2.scale(factor);

    let binary = p1.iter().all(|&x| x <= 1e-6 || x >= 1.0 - 1e-6);
    let top_q1_of_p2: Vec<usize> = hard_sort_desc(p2).order[..q1].to_vec();
    let eq_condition_holds = binary
        && (0..n).all(|j| {
            let should_be_one = top_q1_of_p2.contains(&j);
            (p1[j] >= 1.0 - 1e-6) == should_be_one
        });

    Ok(GapReport {
        exact_survival: exact,
        product_bound,
        delta,
        delta_prime,
        eq_condition_holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffsort::{soft_permutation, OperatorKind};
    use crate::losses::topk_select_prob;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_of(v: &[f64]) -> Vector {
        Vector::new(v.to_vec()).unwrap()
    }

    /// Random vector on the capped simplex: entries in (0, 1], sum = target.
    fn capped_simplex(rng: &mut ChaCha8Rng, n: usize, target: f64) -> Vector {
        assert!(target <= n as f64);
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        for _ in 0..64 {
            let free: Vec<usize> = (0..n).filter(|&i| v[i] < 1.0).collect();
            let fixed_sum: f64 = (0..n).filter(|&i| v[i] >= 1.0).map(|i| v[i]).sum();
            let free_sum: f64 = free.iter().map(|&i| v[i]).sum();
            let want = target - fixed_sum;
            if free_sum <= 0.0 {
                break;
            }
            let scale = want / free_sum;
            let mut clipped = false;
            for &i in &free {
                v[i] *= scale;
                if v[i] > 1.0 {
                    v[i] = 1.0;
                    clipped = true;
                }
            }
            if !clipped {
                break;
            }
        }
        let v = Vector::new(v).unwrap();
        assert!((v.sum() - target).abs() < 1e-9, "sum = {}", v.sum());
        v
    }

    /// Binary indicator with exactly q ones at random positions.
    fn random_indicator(rng: &mut ChaCha8Rng, n: usize, q: usize) -> Vector {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let mut v = Vector::zeros(n);
        for &i in idx.iter().take(q) {
            v[i] = 1.0;
        }
        v
    }

    #[test]
    fn cascade_filter_two_stage_hand_trace() {
        // stage 1 keeps {0,1,2}; stage-2 scores there are [1,9,1],
        // top-2 with index tie-break -> {1, 0}
        let s1 = vec_of(&[5.0, 4.0, 3.0, 2.0]);
        let s2 = vec_of(&[1.0, 9.0, 1.0, 9.0]);
        let cfg = CascadeConfig::new(vec![3, 2], 1).unwrap();
        let out = cascade_filter(&[s1, s2], &cfg).unwrap();
        assert_eq!(out, vec![1, 0]);
    }

    #[test]
    fn cascade_filter_identity_and_single_stage() {
        let s = vec_of(&[0.5, 0.1, 0.9]);
        let cfg = CascadeConfig::new(vec![3], 1).unwrap();
        let out = cascade_filter(std::slice::from_ref(&s), &cfg).unwrap();
        assert_eq!(out, vec![2, 0, 1]);

        let cfg = CascadeConfig::new(vec![2], 1).unwrap();
        assert_eq!(cascade_filter(&[s], &cfg).unwrap(), vec![2, 0]);
    }

    #[test]
    fn cascade_filter_rejects_infeasible_quota() {
        let s = vec_of(&[1.0, 2.0]);
        let cfg = CascadeConfig::new(vec![3], 1).unwrap();
        assert!(cascade_filter(&[s], &cfg).is_err());
    }

    #[test]
    fn cascade_config_validation() {
        assert!(CascadeConfig::new(vec![3, 3], 1).is_err());
        assert!(CascadeConfig::new(vec![3, 2], 2).is_err());
        assert!(CascadeConfig::new(vec![], 1).is_err());
        assert!(CascadeConfig::new(vec![10, 5], 3).is_ok());
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at(&[1, 2, 3], &[2, 3]).unwrap(), 1.0);
        assert_eq!(recall_at(&[1, 2], &[5, 6]).unwrap(), 0.0);
        let selected: Vec<usize> = (0..10).collect();
        let gt: Vec<usize> = (7..17).collect();
        assert!((recall_at(&selected, &gt).unwrap() - 0.3).abs() < 1e-12);
        assert!(recall_at(&[1], &[]).is_err());
    }

    #[test]
    fn ndcg_examples() {
        // perfect order
        let v = ndcg_at(&vec_of(&[3.0, 2.0, 1.0]), &[3, 2, 1], 3).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        // single relevant item ranked first
        let v = ndcg_at(&vec_of(&[2.0, 1.0, 0.0]), &[1, 0, 0], 2).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        // swapped pair: DCG = 1/log2(3), IDCG = 1
        let v = ndcg_at(&vec_of(&[0.0, 1.0]), &[1, 0], 2).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-9);
        assert!((v - 0.6309).abs() < 1e-4);
        // all grades zero
        assert_eq!(ndcg_at(&vec_of(&[1.0, 0.0]), &[0, 0], 2).unwrap(), 0.0);
    }

    #[test]
    fn exact_survival_degenerate_binary_p1() {
        // single feasible subset {0, 2}
        let p1 = vec_of(&[1.0, 0.0, 1.0, 0.0]);
        let p2 = vec_of(&[0.8, 0.9, 0.4, 0.3]);
        let out = exact_survival(&p1, &p2, 2).unwrap();
        let total = 0.8 + 0.9 + 0.4 + 0.3;
        let overlap = 0.8 + 0.4;
        assert!((out[0] - 0.8 * total / overlap).abs() < 1e-12);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - 0.4 * total / overlap).abs() < 1e-12);
        assert_eq!(out[3], 0.0);
    }

    #[test]
    fn exact_survival_guards() {
        let p = Vector::zeros(13);
        assert!(exact_survival(&p, &p, 3).is_err());
        let p1 = vec_of(&[0.0, 0.0, 0.5]);
        let p2 = vec_of(&[0.5, 0.5, 0.5]);
        // every 2-subset needs two nonzero p1 entries
        assert!(exact_survival(&p1, &p2, 2).is_err());
    }

    #[test]
    fn bound_holds_for_binary_p1_instances() {
        // with binary p1 and sum(p2) <= q2 the chain
        //   exact >= p1 ⊙ p2  and  delta <= delta_prime
        // is exact; 100 random such instances
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let n = rng.random_range(4..=10);
            let q1 = rng.random_range(2..n);
            let q2 = rng.random_range(1..=q1);
            let p1 = random_indicator(&mut rng, n, q1);
            let p2 = capped_simplex(&mut rng, n, q2 as f64);
            let report = bound_gap(&p1, &p2, q1, q2).unwrap();
            assert!(report.max_bound_violation() <= 1e-9);
            assert!(report.max_gap_excess() <= 1e-9);
        }
    }

    #[test]
    fn exact_survival_exceeds_product_with_inclusion_probs() {
        // the unconditional half of the bound chain, exact >= p2 ⊙ E[pi],
        // holds for any p1, soft or not
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let n = rng.random_range(4..=9);
            let q1 = rng.random_range(2..n);
            let s1 = Vector::from_fn(n, |_| rng.random_range(-2.0..2.0));
            let s2 = Vector::from_fn(n, |_| rng.random_range(-2.0..2.0));
            let perm1 = soft_permutation(OperatorKind::NeuralSort, &s1, 1.0).unwrap();
            let perm2 = soft_permutation(OperatorKind::NeuralSort, &s2, 1.0).unwrap();
            let p1 = topk_select_prob(&perm1, q1).unwrap().probs;
            let p2 = topk_select_prob(&perm2, 2).unwrap().probs;
            let exact = exact_survival(&p1, &p2, q1).unwrap();
            let incl = subset_inclusion_probs(&p1, q1).unwrap();
            for j in 0..n {
                assert!(exact[j] + 1e-12 >= p2[j] * incl[j]);
            }
        }
    }

    #[test]
    fn gap_equality_case() {
        // p1 = indicator of p2's top-q1, p2 binary with q2 ones inside that
        // support: delta = 0 and delta_prime = 0
        let p1 = vec_of(&[1.0, 1.0, 1.0, 0.0, 0.0]);
        let p2 = vec_of(&[1.0, 0.0, 1.0, 0.0, 0.0]);
        let report = bound_gap(&p1, &p2, 3, 2).unwrap();
        assert!(report.eq_condition_holds);
        for j in 0..5 {
            assert!(report.delta[j].abs() < 1e-12);
            assert!(report.delta_prime[j].abs() < 1e-12);
        }
    }

    #[test]
    fn bound_gap_rejects_disjoint_stages() {
        let p1 = vec_of(&[1.0, 1.0, 0.0, 0.0]);
        let p2 = vec_of(&[0.0, 0.0, 1.0, 1.0]);
        assert!(bound_gap(&p1, &p2, 2, 2).is_err());
    }

    #[test]
    fn delta_prime_shrinks_as_rank_agreement_grows() {
        // moving p1 toward p2's ordering raises <p1,p2> and therefore
        // weakly lowers mean delta_prime
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let trials = 100;
        let mut improved = 0;
        for _ in 0..trials {
            let n = 8;
            let q2 = 3;
            let p2 = capped_simplex(&mut rng, n, q2 as f64);
            let mut p1: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
            let before = {
                let p1v = Vector::new(p1.clone()).unwrap();
                bound_gap(&p1v, &p2, 4, q2).unwrap().mean_delta_prime()
            };
            // sort p1's values into p2's rank order
            let target_order = hard_sort_desc(&p2).order;
            let mut vals = p1.clone();
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            for (rank, &item) in target_order.iter().enumerate() {
                p1[item] = vals[rank];
            }
            let after = {
                let p1v = Vector::new(p1).unwrap();
                bound_gap(&p1v, &p2, 4, q2).unwrap().mean_delta_prime()
            };
            if after <= before + 1e-12 {
                improved += 1;
            }
        }
        assert_eq!(improved, trials, "sorting toward p2 should never hurt");
    }

    /// Literal re-implementation of sequential funnel filtering, used as an
    /// independent oracle for cascade_filter + recall_at.
    fn brute_force_recall(stage_scores: &[Vector], cfg: &CascadeConfig, gt: &[usize]) -> f64 {
        let mut pool: Vec<usize> = (0..stage_scores[0].len()).collect();
        for (s, &q) in stage_scores.iter().zip(cfg.quotas.iter()) {
            pool.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
            pool.truncate(q);
            pool.sort_unstable();
        }
        gt.iter().filter(|g| pool.contains(g)).count() as f64 / gt.len() as f64
    }

    #[test]
    fn filter_recall_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..200 {
            let n = rng.random_range(4..=10);
            let q1 = rng.random_range(3..=n);
            let q2 = rng.random_range(2..q1);
            let k = rng.random_range(1..q2);
            let cfg = CascadeConfig::new(vec![q1, q2], k).unwrap();
            let s1 = Vector::from_fn(n, |_| rng.random_range(-2.0..2.0));
            let s2 = Vector::from_fn(n, |_| rng.random_range(-2.0..2.0));
            let mut gt: Vec<usize> = Vec::new();
            while gt.len() < k {
                let c = rng.random_range(0..n);
                if !gt.contains(&c) {
                    gt.push(c);
                }
            }
            let selected = cascade_filter(&[s1.clone(), s2.clone()], &cfg).unwrap();
            let fast = recall_at(&selected, &gt).unwrap();
            let slow = brute_force_recall(&[s1, s2], &cfg, &gt);
            assert_eq!(fast, slow);
        }
    }
}
