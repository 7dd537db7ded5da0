//! Run configuration: one TOML file drives every subcommand.
//!
//! Unknown keys are rejected and every error names the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::constants::ConstantMode;
use crate::error::{Error, Result};
use crate::grid::{DomainSpec, Rect};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "Lx")]
    pub lx: f64,
    #[serde(rename = "Ly")]
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
    /// `[x0, x1, y0, y1]`.
    pub omega: [f64; 4],
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_mode")]
    pub mode: ConstantMode,
    #[serde(default = "default_eps_zero")]
    pub eps_zero: f64,
    /// Seed of every random initial state.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Basis cache file; defaults to `<output>/basis.nsstab`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub practical: Option<PracticalConstants>,
    #[serde(default)]
    pub c0_estimate: C0Settings,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub nullcontrol: NullControlSection,
    #[serde(default)]
    pub stabilize: StabilizeSection,
    #[serde(default)]
    pub cost_curve: CostCurveSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn default_dt() -> f64 {
    2f64.powi(-16)
}
fn default_mode() -> ConstantMode {
    ConstantMode::CertifiedFromFit
}
fn default_eps_zero() -> f64 {
    1e-6
}
fn default_seed() -> u64 {
    7
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PracticalConstants {
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    /// Trilinear constant; estimated from the basis when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct C0Settings {
    pub samples: usize,
    pub seed: u64,
}

impl Default for C0Settings {
    fn default() -> Self {
        Self { samples: 1000, seed: 42 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackKind {
    None,
    Linear,
    LinearCutoff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub feedback: FeedbackKind,
    /// Feedback level; defaults to `τ_{lambda_index}` (1-based).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub lambda_index: usize,
    /// Initial norm as a multiple of the basin radius `r_λ` (or `r_λ²` with
    /// cutoff); with no feedback, a multiple of 1.
    pub y0_scale: f64,
    pub t_end: f64,
    pub sample_stride: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            feedback: FeedbackKind::Linear,
            lambda: None,
            lambda_index: 4,
            y0_scale: 0.5,
            t_end: 0.0625,
            sample_stride: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NullControlSection {
    pub n0: u32,
    pub n_max: usize,
    pub cutoff: bool,
    /// Defaults to the admissible basin radius of the active mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y0_norm: Option<f64>,
    pub enforce_bounds: bool,
}

impl Default for NullControlSection {
    fn default() -> Self {
        Self { n0: 1, n_max: 8, cutoff: false, y0_norm: None, enforce_bounds: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilizeSection {
    pub n0: u32,
    pub n_max: usize,
    /// Start times as fractions of `T`.
    pub s_offsets: Vec<f64>,
    pub periods: usize,
    /// Multiples of `r_{λ_0}`.
    pub eta_grid: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y0_norm: Option<f64>,
}

impl Default for StabilizeSection {
    fn default() -> Self {
        Self {
            n0: 1,
            n_max: 8,
            s_offsets: vec![0.0, 1.0 / 3.0, 0.9],
            periods: 2,
            eta_grid: vec![1e-4, 1e-3, 1e-2],
            y0_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostCurveSection {
    pub n0: Vec<u32>,
    /// Steps per horizon, so `dt = T / steps` for each `T`.
    pub steps: u64,
}

impl Default for CostCurveSection {
    fn default() -> Self {
        Self { n0: vec![1, 2, 3], steps: 1 << 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Subcommand whose trajectory is summarized.
    pub source: String,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { source: "simulate".into() }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), reason: reason.into() }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(bad(key, format!("must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| bad("<document>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().to_string();
            // missing and unknown fields are reported one level up; name them
            let key = match field_in_message(&msg) {
                Some(f) if path == "." => f,
                Some(f) if !path.ends_with(&f) => format!("{path}.{f}"),
                _ => path,
            };
            bad(&key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn emit(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| bad("<document>", e.to_string()))
    }

    pub fn domain(&self) -> DomainSpec {
        DomainSpec {
            lx: self.lx,
            ly: self.ly,
            nx: self.nx,
            ny: self.ny,
            omega: Rect::from_array(self.omega),
        }
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.output.join("basis.nsstab"))
    }

    pub fn validate(&self) -> Result<()> {
        positive("Lx", self.lx)?;
        positive("Ly", self.ly)?;
        if self.nx < 3 {
            return Err(bad("nx", format!("need at least 3, got {}", self.nx)));
        }
        if self.ny < 3 {
            return Err(bad("ny", format!("need at least 3, got {}", self.ny)));
        }
        self.domain().validate().map_err(|e| bad("omega", e.to_string()))?;
        if self.m < 3 || self.m > self.nx * self.ny {
            return Err(bad("M", format!("must lie in 3..={}, got {}", self.nx * self.ny, self.m)));
        }
        positive("dt", self.dt)?;
        if !(self.eps_zero > 0.0 && self.eps_zero < 1.0) {
            return Err(bad("eps_zero", format!("must lie in (0, 1), got {}", self.eps_zero)));
        }
        match (&self.practical, self.mode) {
            (None, ConstantMode::Practical) => {
                return Err(bad("practical", "required when mode = \"practical\""));
            }
            (Some(p), _) => {
                positive("practical.C1", p.c1)?;
                positive("practical.C2", p.c2)?;
                positive("practical.Q", p.q)?;
                if let Some(c0) = p.c0 {
                    positive("practical.c0", c0)?;
                }
                if p.c2 < 3.0 * p.c1 {
                    return Err(bad("practical.C2", format!("must be >= 3 C1 = {}", 3.0 * p.c1)));
                }
            }
            _ => {}
        }
        if self.c0_estimate.samples < 100 {
            return Err(bad("c0_estimate.samples", "need at least 100"));
        }
        let s = &self.simulate;
        if let Some(l) = s.lambda {
            positive("simulate.lambda", l)?;
        } else if s.lambda_index == 0 || s.lambda_index >= self.m {
            return Err(bad("simulate.lambda_index", format!("must lie in 1..{}", self.m)));
        }
        if !(s.y0_scale >= 0.0 && s.y0_scale.is_finite()) {
            return Err(bad("simulate.y0_scale", "must be nonnegative"));
        }
        positive("simulate.t_end", s.t_end)?;
        if s.sample_stride == 0 {
            return Err(bad("simulate.sample_stride", "must be positive"));
        }
        if let Some(y) = self.nullcontrol.y0_norm {
            if !(y >= 0.0 && y.is_finite()) {
                return Err(bad("nullcontrol.y0_norm", "must be nonnegative"));
            }
        }
        let st = &self.stabilize;
        if st.s_offsets.is_empty() || st.s_offsets.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(bad("stabilize.s_offsets", "need fractions of T in [0, 1)"));
        }
        if st.periods < 2 {
            return Err(bad("stabilize.periods", "need at least 2"));
        }
        if st.eta_grid.is_empty() || st.eta_grid.windows(2).any(|w| w[1] <= w[0]) || st.eta_grid[0] <= 0.0 {
            return Err(bad("stabilize.eta_grid", "must be positive and strictly ascending"));
        }
        if let Some(y) = st.y0_norm {
            positive("stabilize.y0_norm", y)?;
        }
        if self.cost_curve.n0.is_empty() {
            return Err(bad("cost_curve.n0", "must not be empty"));
        }
        if self.cost_curve.steps == 0 {
            return Err(bad("cost_curve.steps", "must be positive"));
        }
        Ok(())
    }
}

fn field_in_message(msg: &str) -> Option<String> {
    for prefix in ["missing field `", "unknown field `"] {
        if let Some(rest) = msg.strip_prefix(prefix) {
            return rest.split('`').next().map(str::to_string);
        }
    }
    None
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::parse_str(&text)
}
