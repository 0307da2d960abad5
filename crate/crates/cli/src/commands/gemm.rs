use std::fs;
use std::path::Path;

use figlut_core::bcq::{
    self, quantize_bcq_alternating, quantize_rtn, AlternatingOptions, FGBQ_MAGIC,
};
use figlut_core::engines::{relative_error, run_dataflow, EngineKind, Weights};
use figlut_core::numerics::{self, gen_matrix, Dist, FpFormat, Matrix, Rng, FGLT_MAGIC};
use figlut_core::perf::{metrics, EventTrace, Metrics};
use serde::Serialize;

use super::{dense_from_source, emit, to_json, write_file};
use crate::config::{MatrixSource, QuantMethod, QuantSpec, RunConfig};
use crate::error::{CliError, Result};
use crate::{Common, GemmArgs};

const DEFAULT_M: usize = 64;
const DEFAULT_N: usize = 64;
const DEFAULT_BATCH: usize = 8;

#[derive(Debug, Serialize)]
pub struct GemmReport {
    pub engine: EngineKind,
    pub m: usize,
    pub n: usize,
    pub batch: usize,
    pub q: usize,
    /// Against the fp64 reference engine on the same quantized weights.
    pub relative_error: f64,
    pub trace: EventTrace,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
}

pub fn run(common: &Common, args: &GemmArgs) -> Result<()> {
    let cfg = common.resolve()?;
    cfg.engine.validate()?;
    let cost_model = cfg.cost_model()?;
    if args.batch == Some(0) {
        return Err(CliError::validation("--batch must be at least 1"));
    }
    let root = Rng::new(cfg.seed);

    let weights = match (&args.weights, &cfg.weights) {
        (Some(path), _) => weights_from_file(path, &cfg.quant)?,
        (None, Some(MatrixSource::File { path })) => weights_from_file(path, &cfg.quant)?,
        (None, Some(src)) => quantize(
            &dense_from_source(src, &mut root.fork(0), FpFormat::Fp32)?,
            &cfg.quant,
        )?,
        (None, None) => {
            let shape = (args.m.unwrap_or(DEFAULT_M), args.n.unwrap_or(DEFAULT_N));
            let w = gen_matrix(
                &mut root.fork(0),
                shape.0,
                shape.1,
                FpFormat::Fp32,
                normal(),
            )?;
            quantize(&w, &cfg.quant)?
        }
    };
    let weights = adapt_weights(weights, cfg.engine.kind)?;

    let x = match (&args.activations, &cfg.activations) {
        (Some(path), _) => super::load_dense(path)?,
        (None, Some(src)) => dense_from_source(src, &mut root.fork(1), cfg.engine.act_format)?,
        (None, None) => {
            let batch = args.batch.unwrap_or(DEFAULT_BATCH);
            gen_matrix(
                &mut root.fork(1),
                weights.cols(),
                batch,
                cfg.engine.act_format,
                normal(),
            )?
        }
    };

    let result = run_dataflow(&cfg.engine, &weights, &x)?;
    let reference = run_dataflow(&cfg.engine.with_kind(EngineKind::Reference), &weights, &x)?;
    let dims = weights.dims(x.cols());
    let report = GemmReport {
        engine: cfg.engine.kind,
        m: dims.m,
        n: dims.n,
        batch: dims.batch,
        q: dims.q,
        relative_error: relative_error(&result.y, &reference.y),
        metrics: match cfg.engine.kind {
            EngineKind::Reference => None,
            _ => Some(metrics(&result.trace, &cfg.engine, &cost_model, dims)?),
        },
        trace: result.trace,
    };

    if let Some(dir) = &cfg.out {
        write_outputs(dir, &cfg, &result.y, &report)?;
    }
    emit(to_json(&report) + "\n")
}

fn normal() -> Dist {
    Dist::Normal {
        mean: 0.0,
        std: 1.0,
    }
}

pub fn quantize(w: &Matrix, spec: &QuantSpec) -> Result<Weights> {
    Ok(match spec.method {
        QuantMethod::Rtn => Weights::Uniform(quantize_rtn(w, spec.q)?),
        QuantMethod::Alternating => Weights::Bcq(
            quantize_bcq_alternating(w, AlternatingOptions::new(spec.q, spec.iters))?.bcq,
        ),
    })
}

/// Reads an FGBQ file as-is, or an FGLT file quantized with `spec`.
fn weights_from_file(path: &Path, spec: &QuantSpec) -> Result<Weights> {
    let bytes = fs::read(path).map_err(|e| CliError::at(path, e))?;
    if bytes.starts_with(FGBQ_MAGIC) {
        Ok(Weights::Bcq(
            bcq::decode_bcq(&bytes).map_err(|e| CliError::at(path, e))?,
        ))
    } else if bytes.starts_with(FGLT_MAGIC) {
        quantize(
            &numerics::decode_matrix(&bytes).map_err(|e| CliError::at(path, e))?,
            spec,
        )
    } else {
        Err(CliError::io(format!(
            "{}: neither an FGBQ nor an FGLT file",
            path.display()
        )))
    }
}

/// The uniform-only engine accepts BCQ weights whose scales form a power-of-two ladder.
fn adapt_weights(weights: Weights, kind: EngineKind) -> Result<Weights> {
    match weights {
        Weights::Bcq(b) if !kind.accepts_bcq() => {
            b.to_uniform().map(Weights::Uniform).ok_or_else(|| {
                CliError::validation(format!(
                    "engine {kind} needs uniform weights; these BCQ scales are not a 2^i ladder"
                ))
            })
        }
        w => Ok(w),
    }
}

fn write_outputs(dir: &Path, cfg: &RunConfig, y: &Matrix, report: &GemmReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::at(dir, e))?;
    write_file(&dir.join("y.fglt"), numerics::encode_matrix(y))?;
    write_file(&dir.join("trace.json"), report.trace.to_json())?;
    write_file(&dir.join("engine.json"), to_json(&cfg.engine))?;
    Ok(())
}
