//! Run configuration: a single JSON document, overridable from the command line.
//!
//! ```json
//! {
//!   "engine": { "kind": "figlut_i", "mu": 4, "k": 32 },
//!   "weights": { "source": "generated", "rows": 256, "cols": 256 },
//!   "activations": { "source": "file", "path": "x.fglt" },
//!   "quant": { "method": "rtn", "q": 4 },
//!   "seed": 7,
//!   "sweep": {
//!     "engines": ["fpe", "figlut_i"],
//!     "q": [2, 3, 4],
//!     "layers": [{ "name": "qkv", "rows": 256, "cols": 256, "q": 3 }],
//!     "batch": 32
//!   }
//! }
//! ```
//!
//! Unknown keys are rejected at every level.

use std::fs;
use std::path::{Path, PathBuf};

use figlut_core::engines::{EngineConfig, EngineKind};
use figlut_core::numerics::{Dist, FpFormat};
use figlut_core::perf::CostModel;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub weights: Option<MatrixSource>,
    #[serde(default)]
    pub activations: Option<MatrixSource>,
    #[serde(default)]
    pub quant: QuantSpec,
    /// Cost model JSON; the bundled sample model when absent.
    #[serde(default)]
    pub cost_model: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn default_dist() -> Dist {
    Dist::Normal {
        mean: 0.0,
        std: 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum MatrixSource {
    File {
        path: PathBuf,
    },
    Generated {
        rows: usize,
        cols: usize,
        /// Element format; fp32 for weights and the engine's activation format otherwise.
        #[serde(default)]
        format: Option<FpFormat>,
        #[serde(default = "default_dist")]
        dist: Dist,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMethod {
    #[default]
    Rtn,
    Alternating,
}

impl std::str::FromStr for QuantMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rtn" => Ok(QuantMethod::Rtn),
            "alternating" => Ok(QuantMethod::Alternating),
            _ => Err(format!(
                "unknown quantization method `{s}` (expected rtn or alternating)"
            )),
        }
    }
}

fn default_q() -> u32 {
    4
}
fn default_iters() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    #[serde(default)]
    pub method: QuantMethod,
    #[serde(default = "default_q")]
    pub q: u32,
    #[serde(default = "default_iters")]
    pub iters: usize,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            method: QuantMethod::Rtn,
            q: default_q(),
            iters: default_iters(),
        }
    }
}

/// One weight matrix of a (possibly mixed-precision) model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Fixed bit-width for this layer; otherwise it follows the swept `q`.
    #[serde(default)]
    pub q: Option<u32>,
}

fn default_batch() -> usize {
    8
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub engines: Vec<EngineKind>,
    /// Defaults to `[quant.q]`.
    #[serde(default)]
    pub q: Option<Vec<u32>>,
    /// Defaults to `[engine.mu]`.
    #[serde(default)]
    pub mu: Option<Vec<u32>>,
    /// Defaults to `[engine.k]`.
    #[serde(default)]
    pub k: Option<Vec<u32>>,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Run every point functionally and report its error against the fp64 reference.
    #[serde(default = "yes")]
    pub error_check: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            engines: Vec::new(),
            q: None,
            mu: None,
            k: None,
            layers: Vec::new(),
            batch: default_batch(),
            error_check: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::validation(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::at(path, e))?;
        Self::from_json(&text)
            .map_err(|e| CliError::validation(format!("{}: {}", path.display(), e.message)))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        match &self.cost_model {
            None => Ok(CostModel::sample()),
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::at(path, e))?;
                CostModel::from_json(&text)
                    .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
            }
        }
    }
}
