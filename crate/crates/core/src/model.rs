//! Model dimensions, parameters, market data and the group-index map.
//!
//! Utility of product `j` is `x_j'β + ξ_j + Σ_g (x_{j,g}'γ_g) β̃_g + ε_j`, where the
//! attributes are partitioned into `G` groups and each group shares one standard
//! normal taste shock `β̃_g`. The outside good has utility zero.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{BlpError, Result};

/// Dimensions of a balanced panel plus the attribute-to-group partition.
///
/// `partition[l]` is the zero-based group of attribute `l`. The JSON form uses
/// one-based groups, see [`ModelConfigFile`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelConfigFile", into = "ModelConfigFile")]
pub struct ModelConfig {
    n_markets: usize,
    products: usize,
    attributes: usize,
    groups: usize,
    instruments: usize,
    partition: Vec<usize>,
}

/// On-disk layout: `{n, J, L, G, K, partition: [g(1), ..., g(L)]}` with `g ∈ 1..=G`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfigFile {
    pub n: usize,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "G")]
    pub g: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub partition: Vec<usize>,
}

impl TryFrom<ModelConfigFile> for ModelConfig {
    type Error = BlpError;

    fn try_from(file: ModelConfigFile) -> Result<Self> {
        if file.partition.iter().any(|&g| g == 0) {
            return Err(BlpError::Config(
                "partition entries are one-based group labels".into(),
            ));
        }
        let partition = file.partition.iter().map(|g| g - 1).collect();
        ModelConfig::new(file.n, file.j, file.l, file.g, file.k, partition)
    }
}

impl From<ModelConfig> for ModelConfigFile {
    fn from(cfg: ModelConfig) -> Self {
        Self {
            n: cfg.n_markets,
            j: cfg.products,
            l: cfg.attributes,
            g: cfg.groups,
            k: cfg.instruments,
            partition: cfg.partition.iter().map(|g| g + 1).collect(),
        }
    }
}

impl ModelConfig {
    pub fn new(
        n_markets: usize,
        products: usize,
        attributes: usize,
        groups: usize,
        instruments: usize,
        partition: Vec<usize>,
    ) -> Result<Self> {
        for (name, value) in [
            ("n", n_markets),
            ("J", products),
            ("L", attributes),
            ("G", groups),
            ("K", instruments),
        ] {
            if value == 0 {
                return Err(BlpError::Config(format!("{name} must be positive")));
            }
        }
        if groups > attributes {
            return Err(BlpError::Config(format!(
                "G = {groups} exceeds L = {attributes}"
            )));
        }
        if partition.len() != attributes {
            return Err(BlpError::dimension("partition", attributes, partition.len()));
        }
        let mut sizes = vec![0usize; groups];
        for (l, &g) in partition.iter().enumerate() {
            if g >= groups {
                return Err(BlpError::Config(format!(
                    "attribute {} mapped to group {} but G = {groups}",
                    l + 1,
                    g + 1
                )));
            }
            sizes[g] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&c| c == 0) {
            return Err(BlpError::Config(format!("group {} has no attributes", empty + 1)));
        }
        Ok(Self {
            n_markets,
            products,
            attributes,
            groups,
            instruments,
            partition,
        })
    }

    /// Contiguous partition: attributes are split into `groups` blocks of near-equal size.
    pub fn contiguous(
        n_markets: usize,
        products: usize,
        attributes: usize,
        groups: usize,
        instruments: usize,
    ) -> Result<Self> {
        if groups == 0 || groups > attributes {
            return Err(BlpError::Config(format!(
                "cannot split L = {attributes} attributes into G = {groups} groups"
            )));
        }
        let partition = (0..attributes).map(|l| l * groups / attributes).collect();
        Self::new(n_markets, products, attributes, groups, instruments, partition)
    }

    pub fn n_markets(&self) -> usize {
        self.n_markets
    }

    pub fn products(&self) -> usize {
        self.products
    }

    pub fn attributes(&self) -> usize {
        self.attributes
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn instruments(&self) -> usize {
        self.instruments
    }

    pub fn partition(&self) -> &[usize] {
        &self.partition
    }

    /// Group of attribute `l` (zero-based).
    pub fn group_of(&self, l: usize) -> usize {
        self.partition[l]
    }

    /// Number of moment conditions `J·K`.
    pub fn moments(&self) -> usize {
        self.products * self.instruments
    }

    /// Number of structural parameters `2L`.
    pub fn parameters(&self) -> usize {
        2 * self.attributes
    }

    /// Same model with a different market count.
    pub fn with_markets(&self, n_markets: usize) -> Result<Self> {
        Self::new(
            n_markets,
            self.products,
            self.attributes,
            self.groups,
            self.instruments,
            self.partition.clone(),
        )
    }
}

/// Parameter pair `(β, γ)`, stacked as `(β_1..β_L, γ_1..γ_L)` for solvers.
///
/// `γ_g` and `-γ_g` produce identical shares; no sign normalization is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    #[serde(with = "crate::serde_util::dvector")]
    pub beta: DVector<f64>,
    #[serde(with = "crate::serde_util::dvector")]
    pub gamma: DVector<f64>,
}

impl Theta {
    pub fn new(beta: DVector<f64>, gamma: DVector<f64>) -> Result<Self> {
        if beta.len() != gamma.len() {
            return Err(BlpError::dimension("gamma", beta.len(), gamma.len()));
        }
        Ok(Self { beta, gamma })
    }

    pub fn zeros(attributes: usize) -> Self {
        Self {
            beta: DVector::zeros(attributes),
            gamma: DVector::zeros(attributes),
        }
    }

    pub fn attributes(&self) -> usize {
        self.beta.len()
    }

    pub fn stacked(&self) -> DVector<f64> {
        let l = self.beta.len();
        DVector::from_fn(2 * l, |i, _| {
            if i < l {
                self.beta[i]
            } else {
                self.gamma[i - l]
            }
        })
    }

    pub fn from_stacked(stacked: &DVector<f64>) -> Result<Self> {
        if stacked.len() % 2 != 0 {
            return Err(BlpError::Config(format!(
                "stacked parameter vector has odd length {}",
                stacked.len()
            )));
        }
        let l = stacked.len() / 2;
        Ok(Self {
            beta: stacked.rows(0, l).into_owned(),
            gamma: stacked.rows(l, l).into_owned(),
        })
    }

    pub fn l1_norm(&self) -> f64 {
        self.beta.lp_norm(1) + self.gamma.lp_norm(1)
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.beta.len() != config.attributes() {
            return Err(BlpError::dimension("beta", config.attributes(), self.beta.len()));
        }
        if self.gamma.len() != config.attributes() {
            return Err(BlpError::dimension("gamma", config.attributes(), self.gamma.len()));
        }
        Ok(())
    }
}

/// One market: attributes `X` (J×L), observed shares `S`, instrument transforms `H` (J×K).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketData {
    pub x: DMatrix<f64>,
    pub shares: DVector<f64>,
    pub instruments: DMatrix<f64>,
    /// Structural error used to generate the data, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi_true: Option<DVector<f64>>,
}

impl MarketData {
    pub fn new(x: DMatrix<f64>, shares: DVector<f64>, instruments: DMatrix<f64>) -> Self {
        Self {
            x,
            shares,
            instruments,
            xi_true: None,
        }
    }

    pub fn products(&self) -> usize {
        self.x.nrows()
    }

    pub fn outside_share(&self) -> f64 {
        1.0 - self.shares.sum()
    }

    pub(crate) fn check(&self, config: &ModelConfig) -> Result<()> {
        let j = config.products();
        if self.x.nrows() != j {
            return Err(BlpError::dimension("X rows", j, self.x.nrows()));
        }
        if self.x.ncols() != config.attributes() {
            return Err(BlpError::dimension("X columns", config.attributes(), self.x.ncols()));
        }
        if self.shares.len() != j {
            return Err(BlpError::dimension("shares", j, self.shares.len()));
        }
        if self.instruments.nrows() != j {
            return Err(BlpError::dimension("H rows", j, self.instruments.nrows()));
        }
        if self.instruments.ncols() != config.instruments() {
            return Err(BlpError::dimension(
                "H columns",
                config.instruments(),
                self.instruments.ncols(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: ModelConfig,
    pub markets: Vec<MarketData>,
}

impl Dataset {
    pub fn new(config: ModelConfig, markets: Vec<MarketData>) -> Result<Self> {
        if markets.len() != config.n_markets() {
            return Err(BlpError::dimension("markets", config.n_markets(), markets.len()));
        }
        for market in &markets {
            market.check(&config)?;
        }
        Ok(Self { config, markets })
    }

    pub fn n_markets(&self) -> usize {
        self.markets.len()
    }

    /// First `n` markets as a new dataset.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let n = n.min(self.markets.len());
        Self::new(self.config.with_markets(n)?, self.markets[..n].to_vec())
    }
}

/// Rule broken by a market in [`validate_dataset`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationRule {
    ShareOutOfRange,
    SharesSumAtLeastOne,
    NonFiniteAttribute,
    NonFiniteInstrument,
    NonFiniteShare,
    Shape(String),
}

impl fmt::Display for ViolationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShareOutOfRange => write!(f, "share not in (0,1)"),
            Self::SharesSumAtLeastOne => write!(f, "shares sum ≥ 1"),
            Self::NonFiniteAttribute => write!(f, "non-finite attribute"),
            Self::NonFiniteInstrument => write!(f, "non-finite instrument"),
            Self::NonFiniteShare => write!(f, "non-finite share"),
            Self::Shape(msg) => write!(f, "shape: {msg}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub market: usize,
    pub product: Option<usize>,
    pub rule: ViolationRule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.product {
            Some(j) => write!(f, "market {}, product {}: {}", self.market, j, self.rule),
            None => write!(f, "market {}: {}", self.market, self.rule),
        }
    }
}

/// Lists every broken data invariant. Empty iff the dataset is well formed.
pub fn validate_dataset(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, market) in dataset.markets.iter().enumerate() {
        if let Err(e) = market.check(&dataset.config) {
            out.push(Violation {
                market: i,
                product: None,
                rule: ViolationRule::Shape(e.to_string()),
            });
            continue;
        }
        let mut all_finite = true;
        for (j, &s) in market.shares.iter().enumerate() {
            if !s.is_finite() {
                all_finite = false;
                out.push(Violation {
                    market: i,
                    product: Some(j),
                    rule: ViolationRule::NonFiniteShare,
                });
            } else if s <= 0.0 || s >= 1.0 {
                out.push(Violation {
                    market: i,
                    product: Some(j),
                    rule: ViolationRule::ShareOutOfRange,
                });
            }
        }
        if all_finite && market.shares.sum() >= 1.0 {
            out.push(Violation {
                market: i,
                product: None,
                rule: ViolationRule::SharesSumAtLeastOne,
            });
        }
        for j in 0..market.x.nrows() {
            if market.x.row(j).iter().any(|v| !v.is_finite()) {
                out.push(Violation {
                    market: i,
                    product: Some(j),
                    rule: ViolationRule::NonFiniteAttribute,
                });
            }
            if market.instruments.row(j).iter().any(|v| !v.is_finite()) {
                out.push(Violation {
                    market: i,
                    product: Some(j),
                    rule: ViolationRule::NonFiniteInstrument,
                });
            }
        }
    }
    out
}

/// Group indices for one market: column 0 is `X β`, column `g` is `X_{·,g} γ_g`.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexMatrix {
    pub nu: DMatrix<f64>,
}

impl IndexMatrix {
    /// Heterogeneity columns `1..=G` only (J×G).
    pub fn group_columns(&self) -> DMatrix<f64> {
        self.nu.columns(1, self.nu.ncols() - 1).into_owned()
    }
}

pub fn compute_indices(
    market: &MarketData,
    theta: &Theta,
    config: &ModelConfig,
) -> Result<IndexMatrix> {
    market.check(config)?;
    theta.check(config)?;
    let j_count = config.products();
    let mut nu = DMatrix::zeros(j_count, config.groups() + 1);
    for j in 0..j_count {
        let mut mean = 0.0;
        for l in 0..config.attributes() {
            let x = market.x[(j, l)];
            mean += x * theta.beta[l];
            nu[(j, config.group_of(l) + 1)] += x * theta.gamma[l];
        }
        nu[(j, 0)] = mean;
    }
    Ok(IndexMatrix { nu })
}

/// `ν_{jg}` for `g ≥ 1` only, without the mean index. Used in the share hot loops.
pub(crate) fn group_indices(market: &MarketData, gamma: &DVector<f64>, config: &ModelConfig) -> DMatrix<f64> {
    let mut nu = DMatrix::zeros(market.products(), config.groups());
    for j in 0..market.products() {
        for l in 0..config.attributes() {
            nu[(j, config.group_of(l))] += market.x[(j, l)] * gamma[l];
        }
    }
    nu
}
