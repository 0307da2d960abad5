pub mod gemm;
pub mod quantize;
pub mod report;
pub mod sweep;
pub mod verify;

use std::io::{ErrorKind, Write};
use std::path::Path;

use figlut_core::numerics::{self, gen_matrix, FpFormat, Matrix, Rng};

use crate::config::MatrixSource;
use crate::error::{CliError, Result};

/// Loads or generates a dense matrix; generated elements default to `format`.
pub(crate) fn dense_from_source(
    src: &MatrixSource,
    rng: &mut Rng,
    format: FpFormat,
) -> Result<Matrix> {
    match src {
        MatrixSource::File { path } => load_dense(path),
        MatrixSource::Generated {
            rows,
            cols,
            format: f,
            dist,
        } => Ok(gen_matrix(rng, *rows, *cols, f.unwrap_or(format), *dist)?),
    }
}

pub(crate) fn load_dense(path: &Path) -> Result<Matrix> {
    numerics::load_matrix(path).map_err(|e| CliError::at(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::at(path, e))
}

pub(crate) fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
pub(crate) fn emit(bytes: impl AsRef<[u8]>) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(bytes.as_ref()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}
