//! Market instances, random generators, and instance file I/O.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// Name of the pinned RNG algorithm, recorded in generated-instance metadata
/// so traces stay reproducible across builds.
pub const RNG_ALGORITHM: &str = "chacha8";

#[derive(Debug, thiserror::Error)]
pub enum MarketError {
    #[error("non-positive entry in {place}: value {value} at index {index}")]
    NonPositiveEntry {
        place: &'static str,
        value: f64,
        index: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty market: n and m must both be at least 1")]
    EmptyMarket,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// A chores market: `n` agents, `m` chores, strictly positive disutilities
/// `d` (row-major, agent-major) and strictly positive budgets `b`.
///
/// Instances are immutable after validation and safe to share across
/// concurrent solver runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketInstance {
    n: usize,
    m: usize,
    d: Vec<f64>,
    b: Vec<f64>,
    /// log(d), cached; the objective only ever sees disutilities through
    /// their logs.
    log_d: Vec<f64>,
    /// Sum of budgets, cached; every solver needs it.
    budget_total: f64,
    /// Generator provenance, if the instance was generated.
    pub meta: Option<GeneratorMeta>,
}

impl MarketInstance {
    /// Validates a candidate instance: consistent dimensions and strict
    /// positivity of every disutility and budget.
    pub fn new(d: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self, MarketError> {
        let n = d.len();
        if n == 0 || b.len() != n {
            if n == 0 {
                return Err(MarketError::EmptyMarket);
            }
            return Err(MarketError::DimensionMismatch(format!(
                "d has {} rows but B has {} entries",
                n,
                b.len()
            )));
        }
        let m = d[0].len();
        if m == 0 {
            return Err(MarketError::EmptyMarket);
        }
        let mut flat = Vec::with_capacity(n * m);
        for (i, row) in d.iter().enumerate() {
            if row.len() != m {
                return Err(MarketError::DimensionMismatch(format!(
                    "d row {} has {} entries, expected {}",
                    i,
                    row.len(),
                    m
                )));
            }
            flat.extend_from_slice(row);
        }
        Self::from_flat(n, m, flat, b)
    }

    /// As [`MarketInstance::new`] but takes `d` already flattened row-major.
    pub fn from_flat(n: usize, m: usize, d: Vec<f64>, b: Vec<f64>) -> Result<Self, MarketError> {
        if n == 0 || m == 0 {
            return Err(MarketError::EmptyMarket);
        }
        if d.len() != n * m {
            return Err(MarketError::DimensionMismatch(format!(
                "d has {} entries, expected {}x{}",
                d.len(),
                n,
                m
            )));
        }
        if b.len() != n {
            return Err(MarketError::DimensionMismatch(format!(
                "B has {} entries, expected {}",
                b.len(),
                n
            )));
        }
        for (k, &v) in d.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(MarketError::NonPositiveEntry {
                    place: "d",
                    value: v,
                    index: k,
                });
            }
        }
        for (i, &v) in b.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(MarketError::NonPositiveEntry {
                    place: "B",
                    value: v,
                    index: i,
                });
            }
        }
        let budget_total = b.iter().sum();
        let log_d = d.iter().map(|&v| v.ln()).collect();
        Ok(Self {
            n,
            m,
            d,
            b,
            log_d,
            budget_total,
            meta: None,
        })
    }

    pub fn agents(&self) -> usize {
        self.n
    }

    pub fn chores(&self) -> usize {
        self.m
    }

    /// Disutility row of agent `i`.
    pub fn disutility_row(&self, i: usize) -> &[f64] {
        &self.d[i * self.m..(i + 1) * self.m]
    }

    pub fn disutility(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.m + j]
    }

    pub fn disutilities_flat(&self) -> &[f64] {
        &self.d
    }

    pub fn log_disutility_row(&self, i: usize) -> &[f64] {
        &self.log_d[i * self.m..(i + 1) * self.m]
    }

    pub fn log_disutilities_flat(&self) -> &[f64] {
        &self.log_d
    }

    pub fn budgets(&self) -> &[f64] {
        &self.b
    }

    pub fn budget_total(&self) -> f64 {
        self.budget_total
    }

    /// (min, max) over all disutility entries.
    pub fn disutility_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.d {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Distributions for i.i.d. disutility and budget entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// Uniform on the half-open interval (0, 1].
    Uniform01,
    /// exp(Z) for a standard normal Z.
    LogStdNormal,
    /// Exponential with scale parameter 1.
    Exponential1,
    /// Uniform integers in {1, ..., 1000}.
    Integer1to1000,
}

impl Distribution {
    pub fn name(self) -> &'static str {
        match self {
            Distribution::Uniform01 => "uniform",
            Distribution::LogStdNormal => "lognormal",
            Distribution::Exponential1 => "exponential",
            Distribution::Integer1to1000 => "integer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(Distribution::Uniform01),
            "lognormal" | "log-normal" => Some(Distribution::LogStdNormal),
            "exponential" => Some(Distribution::Exponential1),
            "integer" => Some(Distribution::Integer1to1000),
            _ => None,
        }
    }

    fn sample<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            // 1 - U maps [0,1) to (0,1], rejecting exact zeros.
            Distribution::Uniform01 => 1.0 - rng.random::<f64>(),
            Distribution::LogStdNormal => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                z.exp()
            }
            Distribution::Exponential1 => loop {
                let e: f64 = rng.sample(rand_distr::Exp1);
                if e > 0.0 {
                    break e;
                }
            },
            Distribution::Integer1to1000 => rng.random_range(1..=1000u32) as f64,
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Configuration for [`generate_instance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub distribution: Distribution,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    /// Cap on max/min of the disutility matrix and of the budget vector,
    /// applied by element-wise truncation. Must be >= 1.
    pub condition_cap: f64,
}

impl GeneratorConfig {
    pub fn new(distribution: Distribution, n: usize, m: usize, seed: u64) -> Self {
        Self {
            distribution,
            n,
            m,
            seed,
            condition_cap: 100.0,
        }
    }
}

/// Provenance block stored in instance files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub distribution: Distribution,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub condition_cap: f64,
    pub rng: String,
    /// True when raw draws were integral before truncation.
    pub integral_raw: bool,
}

/// Clamps the lower tail of a positive array so max/min <= cap, leaving the
/// maximum unchanged: every entry becomes `max(entry, max(values)/cap)`.
pub fn truncate_condition_number(values: &[f64], cap: f64) -> Result<Vec<f64>, MarketError> {
    assert!(cap >= 1.0, "condition cap must be at least 1");
    let mut hi = f64::NEG_INFINITY;
    for (k, &v) in values.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(MarketError::NonPositiveEntry {
                place: "values",
                value: v,
                index: k,
            });
        }
        hi = hi.max(v);
    }
    let floor = hi / cap;
    Ok(values.iter().map(|&v| v.max(floor)).collect())
}

/// Draws an instance with i.i.d. entries from `cfg.distribution`, then caps
/// the condition number of both `d` and `B`. Deterministic given the seed:
/// the `n x m` disutility matrix is filled row-major first, budgets after.
pub fn generate_instance(cfg: &GeneratorConfig) -> Result<MarketInstance, MarketError> {
    if cfg.n == 0 || cfg.m == 0 {
        return Err(MarketError::EmptyMarket);
    }
    assert!(cfg.condition_cap >= 1.0, "condition cap must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut d = Vec::with_capacity(cfg.n * cfg.m);
    for _ in 0..cfg.n * cfg.m {
        d.push(cfg.distribution.sample(&mut rng));
    }
    let mut b = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        b.push(cfg.distribution.sample(&mut rng));
    }
    let d = truncate_condition_number(&d, cfg.condition_cap)?;
    let b = truncate_condition_number(&b, cfg.condition_cap)?;
    let mut inst = MarketInstance::from_flat(cfg.n, cfg.m, d, b)?;
    inst.meta = Some(GeneratorMeta {
        distribution: cfg.distribution,
        n: cfg.n,
        m: cfg.m,
        seed: cfg.seed,
        condition_cap: cfg.condition_cap,
        rng: RNG_ALGORITHM.to_string(),
        integral_raw: cfg.distribution == Distribution::Integer1to1000,
    });
    Ok(inst)
}

#[derive(Deserialize)]
struct InstanceFile {
    n: usize,
    m: usize,
    d: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<f64>,
    #[serde(default)]
    meta: Option<GeneratorMeta>,
}

/// Serializes an instance to the JSON schema
/// `{ "n", "m", "d": [[..]], "B": [..], "meta": {..} }`.
///
/// Floats are written with 17 significant digits, enough to round-trip any
/// f64 exactly.
pub fn instance_to_json(inst: &MarketInstance) -> String {
    fn push_float(out: &mut String, v: f64) {
        out.push_str(&format!("{:.16e}", v));
    }
    let mut out = String::with_capacity(32 * inst.n * inst.m);
    out.push_str(&format!("{{\n  \"n\": {},\n  \"m\": {},\n", inst.n, inst.m));
    out.push_str("  \"d\": [\n");
    for i in 0..inst.n {
        out.push_str("    [");
        for j in 0..inst.m {
            if j > 0 {
                out.push_str(", ");
            }
            push_float(&mut out, inst.disutility(i, j));
        }
        out.push(']');
        out.push_str(if i + 1 < inst.n { ",\n" } else { "\n" });
    }
    out.push_str("  ],\n  \"B\": [");
    for (i, &v) in inst.b.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        push_float(&mut out, v);
    }
    out.push(']');
    if let Some(meta) = &inst.meta {
        out.push_str(",\n  \"meta\": ");
        out.push_str(&serde_json::to_string(meta).expect("meta serializes"));
    }
    out.push_str("\n}\n");
    out
}

pub fn save_instance(inst: &MarketInstance, path: &Path) -> Result<(), MarketError> {
    std::fs::write(path, instance_to_json(inst))?;
    Ok(())
}

pub fn instance_from_json(text: &str) -> Result<MarketInstance, MarketError> {
    let file: InstanceFile =
        serde_json::from_str(text).map_err(|e| MarketError::Parse(e.to_string()))?;
    let mut inst = MarketInstance::new(file.d, file.b)?;
    if inst.agents() != file.n || inst.chores() != file.m {
        return Err(MarketError::DimensionMismatch(format!(
            "header says {}x{}, data is {}x{}",
            file.n,
            file.m,
            inst.agents(),
            inst.chores()
        )));
    }
    inst.meta = file.meta;
    Ok(inst)
}

pub fn load_instance(path: &Path) -> Result<MarketInstance, MarketError> {
    let text = std::fs::read_to_string(path)?;
    instance_from_json(&text)
}
