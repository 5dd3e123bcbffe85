use nmsparse::codec::decode;
use nmsparse::pipeline::{metadata_bits_report, relative_output_error};
use nmsparse::{CalibrationSet, SparseEncodedTensor, StorageReport, WeightMatrix};
use serde::Serialize;

use crate::{read_file, EvalArgs, Failure};

#[derive(Serialize)]
struct EvalReport {
    relative_output_error: f64,
    residual_fraction: f64,
    salient_fraction: f64,
    correction_factor: f64,
    file_bytes: usize,
    storage: StorageReport,
}

pub fn run(a: EvalArgs) -> Result<(), Failure> {
    let encoded = SparseEncodedTensor::from_bytes(&read_file(&a.encoded)?)?;
    let (dense, _) = WeightMatrix::from_dwt_bytes(&read_file(&a.dense)?)?;
    let (calib, _) = CalibrationSet::from_dwt_bytes(&read_file(&a.calib)?)?;
    let layer = decode(&encoded)?;
    if (layer.rows(), layer.cols()) != (dense.rows(), dense.cols()) {
        return Err(Failure::input(format!(
            "encoded layer is {}x{}, dense weights are {}x{}",
            layer.rows(),
            layer.cols(),
            dense.rows(),
            dense.cols()
        )));
    }
    let err = relative_output_error(&dense, &layer, &calib)?;
    let storage = metadata_bits_report(&layer, a.index_bits)?;
    let elements = storage.elements.max(1) as f64;
    let report = EvalReport {
        relative_output_error: err,
        residual_fraction: storage.residual_values as f64 / elements,
        salient_fraction: storage.salient_values as f64 / elements,
        correction_factor: layer.correction_factor,
        file_bytes: encoded.byte_len(),
        storage,
    };

    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        return Ok(());
    }
    let s = &report.storage;
    println!("relative output error  {:.6e}", report.relative_output_error);
    println!("residual {}  kept fraction {:.4}", s.residual_pattern, report.residual_fraction);
    match s.salient_pattern {
        Some(p) => println!("salient {p}  fraction {:.4}", report.salient_fraction),
        None => println!("salient none"),
    }
    println!("correction factor      {}", report.correction_factor);
    println!(
        "metadata bits/element  residual {:.4}  salient {:.4} (unstructured {:.4})",
        s.residual_metadata_bits_per_element,
        s.salient_structured_bits_per_element,
        s.salient_unstructured_bits_per_element
    );
    println!("file bytes             {}", report.file_bytes);
    Ok(())
}
