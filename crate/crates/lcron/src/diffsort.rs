//! Differentiable relaxations of descending hard sort.
//!
//! Both operators produce an N×N row-stochastic soft permutation matrix
//! P̂ whose row i concentrates on the item holding descending rank i as the
//! temperature goes to 0. Only operators of this shape can feed the top-k
//! survival losses; relaxations that skip the permutation matrix (optimal
//! transport, projection-based sorters) are out of scope.
//!
//! NeuralSort row logits (1-indexed row i, n items):
//!
//! ```text
//! z_ij = ((n + 1 - 2i) * s_j - sum_k |s_j - s_k|) / tau
//! ```
//!
//! SoftSort row logits, with v = sort_desc(s):
//!
//! ```text
//! z_ij = -|v_i - s_j| / tau
//! ```
//!
//! Each row then passes through a stabilized softmax. [`pullback`] is the
//! hand-written reverse-mode map for either operator; the |·| terms use the
//! symmetric subgradient sign(x) with sign(0) = 0, so ties stay finite.

use crate::error::{Error, Result};
use crate::numerics::{softmax_into, Matrix, Vector};
use serde::{Deserialize, Serialize};

/// Which relaxation produced a soft permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    NeuralSort,
    SoftSort,
}

impl OperatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::NeuralSort => "neural_sort",
            OperatorKind::SoftSort => "soft_sort",
        }
    }
}

impl std::str::FromStr for OperatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neural_sort" | "neuralsort" => Ok(OperatorKind::NeuralSort),
            "soft_sort" | "softsort" => Ok(OperatorKind::SoftSort),
            other => Err(Error::invalid(format!(
                "unknown sorting operator '{other}' (expected neural_sort or soft_sort)"
            ))),
        }
    }
}

/// Row-stochastic relaxation of the descending-sort permutation matrix.
#[derive(Debug, Clone)]
pub struct SoftPermutation {
    pub matrix: Matrix,
    pub temperature: f64,
    pub operator: OperatorKind,
}

impl SoftPermutation {
    pub fn n(&self) -> usize {
        self.matrix.rows()
    }
}

/// Exact descending sort order; `order[i]` is the index of the i-th
/// largest score. Ties break toward the lower original index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardPermutation {
    pub order: Vec<usize>,
}

/// Stable descending sort of scores.
pub fn hard_sort_desc(scores: &Vector) -> HardPermutation {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort on descending score; equal scores keep index order.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    HardPermutation { order }
}

fn check_inputs(scores: &Vector, temperature: f64) -> Result<()> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !scores.is_finite() {
        return Err(Error::invalid("scores contain non-finite entries"));
    }
    Ok(())
}

/// NeuralSort relaxation of descending sort.
pub fn neural_sort(scores: &Vector, temperature: f64) -> Result<SoftPermutation> {
    check_inputs(scores, temperature)?;
    let n = scores.len();
    // dist[j] = sum_k |s_j - s_k|
    let mut dist = vec![0.0; n];
    for j in 0..n {
        let mut d = 0.0;
        for k in 0..n {
            d += (scores[j] - scores[k]).abs();
        }
        dist[j] = d;
    }
    let mut matrix = Matrix::zeros(n, n);
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let coeff = (n as f64) + 1.0 - 2.0 * (i as f64 + 1.0);
        for j in 0..n {
            logits[j] = (coeff * scores[j] - dist[j]) / temperature;
        }
        softmax_into(&logits, matrix.row_mut(i));
    }
    Ok(SoftPermutation {
        matrix,
        temperature,
        operator: OperatorKind::NeuralSort,
    })
}

/// SoftSort relaxation of descending sort.
pub fn soft_sort(scores: &Vector, temperature: f64) -> Result<SoftPermutation> {
    check_inputs(scores, temperature)?;
    let n = scores.len();
    let order = hard_sort_desc(scores).order;
    let mut matrix = Matrix::zeros(n, n);
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let v_i = scores[order[i]];
        for j in 0..n {
            logits[j] = -(v_i - scores[j]).abs() / temperature;
        }
        softmax_into(&logits, matrix.row_mut(i));
    }
    Ok(SoftPermutation {
        matrix,
        temperature,
        operator: OperatorKind::SoftSort,
    })
}

/// Dispatch on operator kind.
pub fn soft_permutation(
    kind: OperatorKind,
    scores: &Vector,
    temperature: f64,
) -> Result<SoftPermutation> {
    match kind {
        OperatorKind::NeuralSort => neural_sort(scores, temperature),
        OperatorKind::SoftSort => soft_sort(scores, temperature),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Reverse-mode map of either operator.
///
/// Given `upstream[i][j] = dL/dP̂[i][j]`, returns `dL/ds` for the scalar
/// L = Σ_ij upstream[i][j] · P̂[i][j]. The soft permutation is recomputed
/// internally at `scores`/`temperature`.
pub fn pullback(
    kind: OperatorKind,
    scores: &Vector,
    temperature: f64,
    upstream: &Matrix,
) -> Result<Vector> {
    let perm = soft_permutation(kind, scores, temperature)?;
    pullback_precomputed(&perm, scores, upstream)
}

/// [`pullback`] against an already-computed soft permutation of `scores`.
pub fn pullback_precomputed(
    perm: &SoftPermutation,
    scores: &Vector,
    upstream: &Matrix,
) -> Result<Vector> {
    let n = scores.len();
    let kind = perm.operator;
    let temperature = perm.temperature;
    if upstream.rows() != n || upstream.cols() != n {
        return Err(Error::invalid(format!(
            "upstream must be {n}x{n}, got {}x{}",
            upstream.rows(),
            upstream.cols()
        )));
    }
    if perm.n() != n {
        return Err(Error::invalid("soft permutation does not match scores"));
    }
    // Softmax backward per row: G_ij = P_ij * (U_ij - <U_i, P_i>), where G
    // is the gradient with respect to the pre-softmax logits.
    let mut logit_grad = Matrix::zeros(n, n);
    for i in 0..n {
        let p = perm.matrix.row(i);
        let u = upstream.row(i);
        let inner: f64 = (0..n).map(|j| u[j] * p[j]).sum();
        let g = logit_grad.row_mut(i);
        for j in 0..n {
            g[j] = p[j] * (u[j] - inner);
        }
    }
    let mut grad = Vector::zeros(n);
    match kind {
        OperatorKind::NeuralSort => {
            // z_ij = (c_i * s_j - dist_j) / tau with c_i = n + 1 - 2(i+1),
            // dist_j = sum_k |s_j - s_k|. Direct term plus the pairwise
            // distance term, folded over column sums g_j = sum_i G_ij.
            let mut col = vec![0.0; n];
            for i in 0..n {
                let g = logit_grad.row(i);
                for j in 0..n {
                    col[j] += g[j];
                }
            }
            for m in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    let coeff = (n as f64) + 1.0 - 2.0 * (i as f64 + 1.0);
                    acc += coeff * logit_grad.get(i, m);
                }
                for j in 0..n {
                    if j != m {
                        acc -= (col[m] + col[j]) * sign(scores[m] - scores[j]);
                    }
                }
                grad[m] = acc / temperature;
            }
        }
        OperatorKind::SoftSort => {
            // z_ij = -|v_i - s_j| / tau with v_i = s[order[i]]. Each score
            // appears once as a column (candidate) and once as a pivot row.
            let order = hard_sort_desc(scores).order;
            let mut rank_of = vec![0usize; n];
            for (i, &item) in order.iter().enumerate() {
                rank_of[item] = i;
            }
            for m in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += logit_grad.get(i, m) * sign(scores[order[i]] - scores[m]);
                }
                let r = rank_of[m];
                for j in 0..n {
                    acc -= logit_grad.get(r, j) * sign(scores[m] - scores[j]);
                }
                grad[m] = acc / temperature;
            }
        }
    }
    Ok(grad)
}
