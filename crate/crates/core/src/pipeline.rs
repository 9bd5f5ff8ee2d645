//! Whole-dataset inference and scoring shared by the CLI and training.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::{base_dir, AnnotationLine};
use crate::dataset::Dataset;
use crate::decode::{DecodeConfig, Engine};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalItem, EvalReport};
use crate::image::Image;
use crate::model::Weights;
use crate::seqcodec::Prediction;

/// Filtered predictions for every sample, in dataset order.
pub fn infer_dataset(weights: &Weights<f32>, data: &Dataset, cfg: &DecodeConfig) -> Result<Vec<Vec<Prediction>>> {
    let engine = Engine::new(weights);
    data.samples.iter().map(|s| Ok(engine.decode_image(&s.image, cfg)?.predictions)).collect()
}

pub fn score_predictions(data: &Dataset, preds: &[Vec<Prediction>], cfg: &EvalConfig) -> Result<EvalReport> {
    let items: Vec<EvalItem<'_>> = data
        .samples
        .iter()
        .zip(preds)
        .map(|(s, p)| (s.name.as_str(), p.as_slice(), s.instances.as_slice()))
        .collect();
    evaluate(&items, cfg)
}

pub fn evaluate_weights(
    weights: &Weights<f32>,
    data: &Dataset,
    decode: &DecodeConfig,
    eval: &EvalConfig,
) -> Result<(EvalReport, Vec<Vec<Prediction>>)> {
    let preds = infer_dataset(weights, data, decode)?;
    Ok((score_predictions(data, &preds, eval)?, preds))
}

/// One image's predictions, as written by inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    pub image: String,
    pub predictions: Vec<Prediction>,
}

pub fn write_predictions(path: &Path, lines: &[PredictionLine]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        let s = serde_json::to_string(l).expect("predictions serialize");
        writeln!(w, "{}", s).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Decode every image of an annotation file. Images are fitted onto the
/// model canvas and points mapped back to the image's own coordinates.
pub fn infer_annotations(
    weights: &Weights<f32>,
    annotations: &Path,
    lines: &[AnnotationLine],
    cfg: &DecodeConfig,
) -> Result<Vec<PredictionLine>> {
    let engine = Engine::new(weights);
    let base = base_dir(annotations);
    let side = weights.config.image_side;
    lines
        .iter()
        .map(|l| {
            let (image, scale) = Image::load_gray(&l.image_path(&base))?.fit_square(side);
            let mut predictions = engine.decode_image(&image, cfg)?.predictions;
            for p in &mut predictions {
                if let Some(pt) = &mut p.point {
                    *pt = [pt[0] / scale, pt[1] / scale];
                }
            }
            Ok(PredictionLine { image: l.image.clone(), predictions })
        })
        .collect()
}

/// Score prediction lines against annotations, pairing them by image name.
/// Images without a prediction line count as empty predictions.
pub fn score_lines(gt: &[AnnotationLine], preds: &[PredictionLine], cfg: &EvalConfig) -> Result<EvalReport> {
    let mut by_name: HashMap<&str, &[Prediction]> = HashMap::new();
    for p in preds {
        if by_name.insert(&p.image, &p.predictions).is_some() {
            return Err(Error::invalid(format!("duplicate predictions for image `{}`", p.image)));
        }
    }
    for p in preds {
        if !gt.iter().any(|g| g.image == p.image) {
            return Err(Error::invalid(format!("predictions for unknown image `{}`", p.image)));
        }
    }
    let items: Vec<EvalItem<'_>> = gt
        .iter()
        .map(|g| (g.image.as_str(), by_name.get(g.image.as_str()).copied().unwrap_or(&[]), g.instances.as_slice()))
        .collect();
    evaluate(&items, cfg)
}
