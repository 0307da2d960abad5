use std::path::PathBuf;

use figlut_core::bcq::{
    self, quantize_bcq_alternating, quantize_rtn, uniform_to_bcq, AlternatingOptions,
};
use figlut_core::numerics::{FpFormat, Matrix, Rng};
use serde::Serialize;

use super::{dense_from_source, emit, load_dense, to_json};
use crate::config::{MatrixSource, QuantMethod};
use crate::error::{CliError, Result};
use crate::{Common, QuantizeArgs};

#[derive(Debug, Serialize)]
pub struct QuantizeReport {
    pub method: QuantMethod,
    pub q: u32,
    pub rows: usize,
    pub cols: usize,
    pub max_error: f64,
    pub mean_error: f64,
    /// `Σ (w − ŵ)²` over the whole matrix.
    pub squared_error: f64,
    pub row_max_error: Vec<f64>,
    pub row_mean_error: Vec<f64>,
    /// Total squared error after each refinement round (alternating only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_history: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

pub fn run(common: &Common, args: &QuantizeArgs) -> Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(m) = args.method {
        cfg.quant.method = m;
    }
    if let Some(it) = args.iters {
        cfg.quant.iters = it;
    }
    let (w, default_out) = match (&args.input, &cfg.weights) {
        (Some(path), _) => (load_dense(path)?, Some(path.with_extension("fgbq"))),
        (None, Some(src)) => {
            let mut rng = Rng::new(cfg.seed).fork(0);
            let out = match src {
                MatrixSource::File { path } => Some(path.with_extension("fgbq")),
                MatrixSource::Generated { .. } => None,
            };
            (dense_from_source(src, &mut rng, FpFormat::Fp32)?, out)
        }
        (None, None) => {
            return Err(CliError::validation(
                "no input matrix: pass --input or set `weights` in the config",
            ))
        }
    };

    let (bq, approx, history) = match cfg.quant.method {
        QuantMethod::Rtn => {
            let u = quantize_rtn(&w, cfg.quant.q)?;
            (uniform_to_bcq(&u), u.dequantize(), None)
        }
        QuantMethod::Alternating => {
            let fit = quantize_bcq_alternating(
                &w,
                AlternatingOptions::new(cfg.quant.q, cfg.quant.iters),
            )?;
            let h = fit.error_history();
            let approx = bcq::dequantize(&fit.bcq);
            (fit.bcq, approx, Some(h))
        }
    };
    let mut report = error_report(&w, &approx);
    report.method = cfg.quant.method;
    report.q = cfg.quant.q;
    report.error_history = history;

    report.output = cfg.out.clone().or(default_out);
    if let Some(path) = &report.output {
        bcq::save_bcq(&bq, path).map_err(|e| CliError::at(path, e))?;
    }
    emit(to_json(&report) + "\n")
}

/// Element-wise absolute error statistics of `approx` against `w`.
pub fn error_report(w: &Matrix, approx: &Matrix) -> QuantizeReport {
    let (rows, cols) = (w.rows(), w.cols());
    let mut row_max_error = Vec::with_capacity(rows);
    let mut row_mean_error = Vec::with_capacity(rows);
    let mut squared_error = 0.0;
    for r in 0..rows {
        let diffs = w
            .row(r)
            .iter()
            .zip(approx.row(r))
            .map(|(a, b)| (a - b).abs());
        let (mut max, mut sum) = (0.0f64, 0.0);
        for d in diffs {
            max = max.max(d);
            sum += d;
            squared_error += d * d;
        }
        row_max_error.push(max);
        row_mean_error.push(sum / cols as f64);
    }
    QuantizeReport {
        method: QuantMethod::Rtn,
        q: 0,
        rows,
        cols,
        max_error: row_max_error.iter().copied().fold(0.0, f64::max),
        mean_error: row_mean_error.iter().sum::<f64>() / rows as f64,
        squared_error,
        row_max_error,
        row_mean_error,
        error_history: None,
        output: None,
    }
}
