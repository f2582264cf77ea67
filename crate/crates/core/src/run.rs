//! Orchestration shared by the command line and the acceptance checks.

use std::fmt::Write as _;
use std::io::Write;

use crate::config::RunConfig;
use crate::decoder::Variant;
use crate::eval::{self, BenchReport, Dataset, EvalError};
use crate::image::Image;
use crate::model::Model;
use crate::train::{self, TrainError, TrainReport};

/// Train a fresh single-precision model; the parameter init shares the training seed.
pub fn train_model(run: &RunConfig, images: &[(String, Image)], log: &mut dyn Write) -> Result<(Model<f32>, TrainReport), TrainError> {
    run.validate().map_err(|e| TrainError::Data {
        file: "<config>".into(),
        msg: e.to_string(),
    })?;
    let mut model = Model::<f32>::new(run.model(), run.train.seed).map_err(|msg| TrainError::Data {
        file: "<config>".into(),
        msg,
    })?;
    let report = train::train(&mut model, images, &run.train, log)?;
    Ok((model, report))
}

pub fn evaluate_model(model: &Model<f32>, method: &str, val: &Dataset, run: &RunConfig) -> Result<BenchReport, EvalError> {
    eval::eval_model(model, method, val, &run.eval.scales, run.eval.tile)
}

/// Same run with the decoder swapped for `variant`.
pub fn variant_of(run: &RunConfig, variant: Variant) -> RunConfig {
    let mut r = run.clone();
    r.decoder.variant = variant;
    r
}

/// One line per scale: `scale  full  variant  delta`.
pub fn paired_table(full: &BenchReport, variant: &BenchReport, variant_name: &str) -> String {
    let mut s = format!("dataset\tscale\tfull_psnr_db\t{variant_name}_psnr_db\tdelta_db\n");
    for row in &full.rows {
        let other = variant
            .rows
            .iter()
            .find(|r| r.dataset == row.dataset && r.scale == row.scale)
            .map_or(f64::NAN, |r| r.psnr_db);
        let _ = writeln!(
            s,
            "{}\t{}\t{:.4}\t{:.4}\t{:+.4}",
            row.dataset,
            row.scale,
            row.psnr_db,
            other,
            row.psnr_db - other
        );
    }
    s
}
