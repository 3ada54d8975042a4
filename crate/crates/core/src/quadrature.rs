//! Integration rules for the standard normal random coefficients `β̃ ~ N(0, I_G)`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BlpError, Result};

/// Largest tensor rule we are willing to build.
pub const MAX_RULE_NODES: usize = 1_000_000;
/// Beyond this many nodes per dimension the outer Hermite weights underflow.
pub const MAX_NODES_PER_DIM: usize = 200;
/// Seed of the default Monte-Carlo rule used when `G > 3`.
pub const DEFAULT_MC_SEED: u64 = 20_190_601;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureKind {
    GaussHermiteProduct,
    MonteCarlo,
}

/// Nodes (M×G) and positive weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub kind: QuadratureKind,
    pub seed: Option<u64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.nodes.ncols()
    }

    /// Weighted sum of `f` over the nodes.
    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        let g = self.dimension();
        let mut node = vec![0.0; g];
        let mut acc = 0.0;
        for (m, w) in self.weights.iter().enumerate() {
            for (d, slot) in node.iter_mut().enumerate() {
                *slot = self.nodes[(m, d)];
            }
            acc += w * f(&node);
        }
        acc
    }
}

/// Serializable description of a rule, used by configs and the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuadratureSpec {
    /// Gauss-Hermite with 11 nodes per dimension for `G ≤ 3`, else 5000 Monte-Carlo draws.
    Default,
    Gh { nodes: usize },
    Mc { draws: usize, seed: u64 },
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self::Default
    }
}

impl QuadratureSpec {
    pub fn build(&self, groups: usize) -> Result<QuadratureRule> {
        match *self {
            Self::Default => Ok(default_rule(groups)),
            Self::Gh { nodes } => gauss_hermite_rule(groups, nodes),
            Self::Mc { draws, seed } => monte_carlo_rule(groups, draws, seed),
        }
    }
}

pub fn default_rule(groups: usize) -> QuadratureRule {
    if groups <= 3 {
        gauss_hermite_rule(groups, 11).expect("11^3 nodes is within the guard")
    } else {
        monte_carlo_rule(groups, 5000, DEFAULT_MC_SEED).expect("positive draw count")
    }
}

/// One-dimensional probabilists' Gauss-Hermite rule against the N(0,1) density.
///
/// Nodes come from the Golub-Welsch eigenproblem, then get one Newton polish on
/// the orthonormal recurrence; weights use the Christoffel formula.
pub fn hermite_1d(points: usize) -> (Vec<f64>, Vec<f64>) {
    if points == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let jacobi = DMatrix::from_fn(points, points, |i, j| {
        if i + 1 == j {
            (j as f64).sqrt()
        } else if j + 1 == i {
            (i as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));

    // Symmetrize exactly so odd moments vanish to rounding.
    for i in 0..points / 2 {
        let r = 0.5 * (nodes[points - 1 - i] - nodes[i]);
        nodes[i] = -r;
        nodes[points - 1 - i] = r;
    }
    if points % 2 == 1 {
        nodes[points / 2] = 0.0;
    }

    let mut weights = Vec::with_capacity(points);
    for x in nodes.iter_mut() {
        for _ in 0..2 {
            let (p_n, p_prev, _) = orthonormal_hermite(points, *x);
            let deriv = (points as f64).sqrt() * p_prev;
            if deriv != 0.0 {
                *x -= p_n / deriv;
            }
        }
        let (_, _, sum_sq) = orthonormal_hermite(points, *x);
        weights.push(1.0 / sum_sq);
    }
    for i in 0..points / 2 {
        let r = 0.5 * (nodes[points - 1 - i] - nodes[i]);
        nodes[i] = -r;
        nodes[points - 1 - i] = r;
        let w = 0.5 * (weights[i] + weights[points - 1 - i]);
        weights[i] = w;
        weights[points - 1 - i] = w;
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    (nodes, weights)
}

/// Returns `(p_n(x), p_{n-1}(x), Σ_{k<n} p_k(x)^2)` for orthonormal Hermite polynomials.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sum_sq = 0.0;
    for k in 0..n {
        sum_sq += cur * cur;
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev, sum_sq)
}

/// Tensor-product Gauss-Hermite rule with `nodes_per_dim^groups` nodes.
pub fn gauss_hermite_rule(groups: usize, nodes_per_dim: usize) -> Result<QuadratureRule> {
    if groups == 0 || nodes_per_dim == 0 {
        return Err(BlpError::Config(
            "Gauss-Hermite rule needs G ≥ 1 and at least one node per dimension".into(),
        ));
    }
    if nodes_per_dim > MAX_NODES_PER_DIM {
        return Err(BlpError::Config(format!(
            "{nodes_per_dim} nodes per dimension exceeds {MAX_NODES_PER_DIM}"
        )));
    }
    let total = (nodes_per_dim as u128).checked_pow(groups as u32).unwrap_or(u128::MAX);
    if total > MAX_RULE_NODES as u128 {
        return Err(BlpError::RuleTooLarge {
            nodes: total,
            limit: MAX_RULE_NODES,
        });
    }
    let total = total as usize;
    let (x1, w1) = hermite_1d(nodes_per_dim);
    let mut nodes = DMatrix::zeros(total, groups);
    let mut weights = vec![1.0; total];
    for m in 0..total {
        let mut rest = m;
        for d in 0..groups {
            let idx = rest % nodes_per_dim;
            rest /= nodes_per_dim;
            nodes[(m, d)] = x1[idx];
            weights[m] *= w1[idx];
        }
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        kind: QuadratureKind::GaussHermiteProduct,
        seed: None,
    })
}

/// `draws` iid standard normal rows from ChaCha20 seeded with `seed`, uniform weights.
pub fn monte_carlo_rule(groups: usize, draws: usize, seed: u64) -> Result<QuadratureRule> {
    if groups == 0 || draws == 0 {
        return Err(BlpError::Config(
            "Monte-Carlo rule needs G ≥ 1 and at least one draw".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut nodes = DMatrix::zeros(draws, groups);
    for m in 0..draws {
        for d in 0..groups {
            nodes[(m, d)] = StandardNormal.sample(&mut rng);
        }
    }
    Ok(QuadratureRule {
        nodes,
        weights: vec![1.0 / draws as f64; draws],
        kind: QuadratureKind::MonteCarlo,
        seed: Some(seed),
    })
}
