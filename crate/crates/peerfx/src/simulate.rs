//! Data generation for the Monte Carlo designs.
//!
//! Outcomes are produced in closed form from the reduced form of the model:
//! with `Ü_r = ε̈_r` and `ū_r = α_r + ε̄_r`,
//!
//! ```text
//! ȳ_r = (z̄_r β + ū_r)/(1−λ)
//! Ÿ_r = ((m−1)/(m−1+λ))·(Z̈_r β + ε̈_r)
//! y   = Ÿ + ȳ·ι
//! ```
//!
//! Randomness is pinned to ChaCha8 with one independent stream per group, so
//! changing the group count never perturbs the draws of earlier groups, and
//! design-side draws (sizes, categories, covariates) run on streams separate
//! from the error draws so the design can be frozen across replications.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{Delta, Theta};
use crate::model::{build_dataset, ColumnNames, Dataset, IngestOptions, Record};

/// Group size distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeDist {
    /// Discrete uniform on `lo..=hi`.
    Uniform { lo: usize, hi: usize },
    /// Every group has the same size.
    Fixed { m: usize },
}

/// How groups are assigned to categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CategoryRule {
    /// Seeded shuffle of the group indices followed by round-robin
    /// assignment, so categories end up equally represented.
    RandomEqualSplit,
    /// Category 1 when `m_r >= threshold`, category 2 otherwise.
    BySize { threshold: usize },
}

/// Whether the own covariate and the peer covariate coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XMode {
    X1EqX2,
    X1NeqX2,
}

/// Error component distribution; all are standardized to mean 0, variance 1
/// before scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    Normal,
    SkewNormal,
    StudentT6,
}

/// A complete Monte Carlo design.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Design {
    pub groups: usize,
    pub size: SizeDist,
    #[serde(default = "default_categories")]
    pub categories: usize,
    #[serde(default = "default_category_rule")]
    pub category_rule: CategoryRule,
    pub x_mode: XMode,
    #[serde(default = "default_error_dist")]
    pub error_dist: ErrorDist,
    /// One idiosyncratic variance per category.
    pub sigma_eps2: Vec<f64>,
    pub sigma_alpha2: f64,
    pub lambda: f64,
    /// `(β₁ intercept, β₂ own x₁, β₃ peer-mean x₂, β₄ group x₃)`.
    pub beta: [f64; 4],
    /// Hold sizes, categories and covariates fixed across replications.
    #[serde(default)]
    pub freeze_design: bool,
}

fn default_categories() -> usize {
    1
}
fn default_category_rule() -> CategoryRule {
    CategoryRule::RandomEqualSplit
}
fn default_error_dist() -> ErrorDist {
    ErrorDist::Normal
}

impl Design {
    /// The homoscedastic Gaussian baseline: sizes uniform on 2..=6,
    /// independent covariates, true values λ=0.5, σ_α²=0.25, σ_ε²=1, β=1.
    pub fn baseline(groups: usize) -> Self {
        Self {
            groups,
            size: SizeDist::Uniform { lo: 2, hi: 6 },
            categories: 1,
            category_rule: CategoryRule::RandomEqualSplit,
            x_mode: XMode::X1NeqX2,
            error_dist: ErrorDist::Normal,
            sigma_eps2: vec![1.0],
            sigma_alpha2: 0.25,
            lambda: 0.5,
            beta: [1.0, 1.0, 1.0, 1.0],
            freeze_design: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::Design("need at least one group".into()));
        }
        match self.size {
            SizeDist::Uniform { lo, hi } => {
                if lo < 2 || hi < lo {
                    return Err(Error::Design(format!(
                        "uniform size bounds must satisfy 2 <= lo <= hi, got [{lo}, {hi}]"
                    )));
                }
            }
            SizeDist::Fixed { m } => {
                if m < 2 {
                    return Err(Error::Design(format!("fixed size must be >= 2, got {m}")));
                }
            }
        }
        if self.categories == 0 {
            return Err(Error::Design("need at least one category".into()));
        }
        if self.groups < self.categories {
            return Err(Error::Design(format!(
                "{} groups cannot cover {} categories",
                self.groups, self.categories
            )));
        }
        if matches!(self.category_rule, CategoryRule::BySize { .. }) && self.categories != 2 {
            return Err(Error::Design(
                "by_size category assignment requires exactly 2 categories".into(),
            ));
        }
        if self.sigma_eps2.len() != self.categories {
            return Err(Error::Design(format!(
                "sigma_eps2 has {} entries for {} categories",
                self.sigma_eps2.len(),
                self.categories
            )));
        }
        if self.sigma_eps2.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Design("sigma_eps2 entries must be positive".into()));
        }
        if self.sigma_alpha2 < 0.0 || !self.sigma_alpha2.is_finite() {
            return Err(Error::Design("sigma_alpha2 must be >= 0".into()));
        }
        if self.lambda.abs() >= 1.0 {
            return Err(Error::Design("lambda must lie in (-1, 1)".into()));
        }
        Ok(())
    }

    /// The generating parameter vector in estimation order.
    pub fn delta_true(&self) -> Delta {
        Delta::new(
            Theta::new(self.lambda, self.sigma_alpha2, self.sigma_eps2.clone()),
            nalgebra::DVector::from_column_slice(&self.beta),
        )
    }
}

/// SplitMix64 step, used to derive independent 64-bit seeds.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the `k`-th child seed of `master`.
pub fn derive_seed(master: u64, k: u64) -> u64 {
    splitmix64(master ^ splitmix64(k.wrapping_add(1)))
}

/// Per-group substream: stream 0 is reserved for whole-sample draws.
fn group_rng(seed: u64, group_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group_index as u64 + 1);
    rng
}

fn sample_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// One standardized skew-normal draw (shape 0.9/√(1−0.81)): generated as
/// `δ|Z₁| + √(1−δ²)Z₂` with `δ = 0.9`, then centered by `δ√(2/π)` and scaled
/// by `√(1 − 2δ²/π)`.
pub fn skew_normal_draw<R: Rng>(rng: &mut R) -> f64 {
    const DELTA: f64 = 0.9;
    let z1: f64 = standard_normal(rng);
    let z2: f64 = standard_normal(rng);
    let x = DELTA * z1.abs() + (1.0 - DELTA * DELTA).sqrt() * z2;
    let mean = DELTA * (2.0 / std::f64::consts::PI).sqrt();
    let var = 1.0 - 2.0 * DELTA * DELTA / std::f64::consts::PI;
    (x - mean) / var.sqrt()
}

/// One standardized Student-t(6) draw: `Z/√(V/6)` with `V` a sum of six
/// squared normals, scaled by `√(4/6)` so the variance is exactly 1.
pub fn student_t6_draw<R: Rng>(rng: &mut R) -> f64 {
    let z: f64 = standard_normal(rng);
    let mut v = 0.0;
    for _ in 0..6 {
        let w: f64 = standard_normal(rng);
        v += w * w;
    }
    let t = z / (v / 6.0).sqrt();
    t / (6.0f64 / 4.0).sqrt()
}

/// `n` standardized skew-normal draws.
pub fn draw_skew_normal<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| skew_normal_draw(rng)).collect()
}

/// `n` standardized Student-t(6) draws.
pub fn draw_student_t6<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| student_t6_draw(rng)).collect()
}

fn error_draw<R: Rng>(dist: ErrorDist, rng: &mut R) -> f64 {
    match dist {
        ErrorDist::Normal => standard_normal(rng),
        ErrorDist::SkewNormal => skew_normal_draw(rng),
        ErrorDist::StudentT6 => student_t6_draw(rng),
    }
}

/// The raw generated records of one replication, before any grouping.
#[derive(Debug, Clone)]
pub struct SimulatedSample {
    pub records: Vec<Record>,
    pub names: ColumnNames,
    pub truth: Delta,
    pub j_categories: usize,
}

impl SimulatedSample {
    pub fn to_dataset(&self) -> Result<Dataset> {
        let opts = IngestOptions {
            j_categories: Some(self.j_categories),
            ..Default::default()
        };
        build_dataset(&self.records, &self.names, &opts)
    }
}

/// Generate one sample with separate seeds for the design side (sizes,
/// categories, covariates) and the error side (α, ε).
pub fn gen_sample_split(
    design: &Design,
    design_seed: u64,
    error_seed: u64,
) -> Result<SimulatedSample> {
    design.validate()?;
    let r_groups = design.groups;

    // Each group's design stream is consumed in a fixed order: size first,
    // then covariates. The streams are held across the two passes so the
    // category rule can see all sizes before covariates are drawn.
    let mut design_rngs: Vec<ChaCha8Rng> =
        (0..r_groups).map(|r| group_rng(design_seed, r)).collect();
    let sizes: Vec<usize> = design_rngs
        .iter_mut()
        .map(|rng| match design.size {
            SizeDist::Fixed { m } => m,
            SizeDist::Uniform { lo, hi } => rng.gen_range(lo..=hi),
        })
        .collect();

    let categories: Vec<usize> = match design.category_rule {
        CategoryRule::BySize { threshold } => sizes
            .iter()
            .map(|&m| if m >= threshold { 1 } else { 2 })
            .collect(),
        CategoryRule::RandomEqualSplit => {
            let mut order: Vec<usize> = (0..r_groups).collect();
            // Fisher-Yates with the reserved whole-sample stream
            let mut rng = sample_rng(design_seed);
            for i in (1..r_groups).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut cats = vec![0usize; r_groups];
            for (pos, &g) in order.iter().enumerate() {
                cats[g] = pos % design.categories + 1;
            }
            cats
        }
    };

    let sigma_alpha = design.sigma_alpha2.sqrt();
    let mut records = Vec::new();
    let names = ColumnNames {
        x1: vec!["x1_1".into()],
        x2: vec!["x2_1".into()],
        x3: vec!["x3_1".into()],
    };
    let [b1, b2, b3, b4] = design.beta;

    for (r, rng_x) in design_rngs.iter_mut().enumerate() {
        let m = sizes[r];
        let mf = m as f64;
        let cat = categories[r];
        let sigma_eps = design.sigma_eps2[cat - 1].sqrt();

        let x1: Vec<f64> = (0..m).map(|_| standard_normal(rng_x)).collect();
        let x2: Vec<f64> = match design.x_mode {
            XMode::X1EqX2 => x1.clone(),
            XMode::X1NeqX2 => (0..m).map(|_| standard_normal(rng_x)).collect(),
        };
        let x3: f64 = standard_normal(rng_x);

        let mut rng_e = group_rng(error_seed, r);
        let alpha = sigma_alpha * error_draw(design.error_dist, &mut rng_e);
        let eps: Vec<f64> = (0..m)
            .map(|_| sigma_eps * error_draw(design.error_dist, &mut rng_e))
            .collect();

        // z rows: (1, x1_i, lom(x2)_i, x3); within/between pieces of Zβ
        let x2_sum: f64 = x2.iter().sum();
        let lom: Vec<f64> = x2.iter().map(|&v| (x2_sum - v) / (mf - 1.0)).collect();
        let zb: Vec<f64> = (0..m)
            .map(|i| b1 + b2 * x1[i] + b3 * lom[i] + b4 * x3)
            .collect();
        let zb_bar = zb.iter().sum::<f64>() / mf;
        let eps_bar = eps.iter().sum::<f64>() / mf;
        let u_bar = alpha + eps_bar;

        let y_bar = (zb_bar + u_bar) / (1.0 - design.lambda);
        let shrink = (mf - 1.0) / (mf - 1.0 + design.lambda);
        let y: Vec<f64> = (0..m)
            .map(|i| {
                let within = (zb[i] - zb_bar) + (eps[i] - eps_bar);
                shrink * within + y_bar
            })
            .collect();

        let gid = format!("g{r:06}");
        for i in 0..m {
            records.push(Record {
                group: gid.clone(),
                category: cat,
                y: y[i],
                x1: vec![x1[i]],
                x2: vec![x2[i]],
                x3: vec![x3],
            });
        }
    }

    Ok(SimulatedSample {
        records,
        names,
        truth: design.delta_true(),
        j_categories: design.categories,
    })
}

/// Generate a dataset from a design and a single seed.
pub fn gen_dataset(design: &Design, seed: u64) -> Result<(Dataset, Delta)> {
    let sample = gen_sample_split(design, derive_seed(seed, 1), derive_seed(seed, 2))?;
    let d = sample.to_dataset()?;
    Ok((d, sample.truth))
}
