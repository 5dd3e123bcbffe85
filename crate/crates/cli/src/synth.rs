use nmsparse::tensor::synth_outlier_matrix;

use crate::{Failure, SynthArgs};

pub fn run(a: SynthArgs) -> Result<(), Failure> {
    let w = synth_outlier_matrix(a.rows, a.cols, a.outliers, a.scale, a.seed)?;
    std::fs::write(&a.output, w.to_dwt_bytes(a.dtype.into()))
        .map_err(|e| Failure::input(format!("{}: {e}", a.output.display())))?;
    log::info!("wrote {}x{} matrix to {}", a.rows, a.cols, a.output.display());
    Ok(())
}
