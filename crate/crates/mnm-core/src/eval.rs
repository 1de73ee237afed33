//! Inference + report assembly: run a trained model over a dataset, collect
//! per-image detections and image/breast/exam scores, and evaluate them with
//! the metrics protocol.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::metrics::{
    average_precision, froc, iou_threshold_grid, recall_at_fp, roc_auc, Detection, EvalReport,
    FrocPoint, ImageRecord,
};
use crate::model::{exam_score, image_to_tensor, ComponentFlags, MnmModel, ModelError};
use crate::numerics::{bind_frozen, Graph};
use crate::synthdata::{BreastSample, Category, Dataset, FindingLabel, View};

/// Model outputs over a whole dataset, before any metric is applied.
pub struct InferenceOutput {
    pub detections: Vec<Detection>,
    /// (breast_id, exam_id, score, malignant label) per breast.
    pub breast_scores: Vec<(String, u32, f64, bool)>,
}

/// Forward every breast (dropout 0) and collect scored boxes from the final
/// cascade stage plus pooled classification scores.
pub fn run_inference(
    model: &MnmModel,
    flags: &ComponentFlags,
    dataset: &Dataset,
) -> Result<InferenceOutput, ModelError> {
    let mut detections = Vec::new();
    let mut breast_scores = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0); // never consumed at dropout 0
    for sample in &dataset.breasts {
        let mut g = Graph::new();
        let bound = bind_frozen(&mut g, &model.store);
        let fwd = model.forward(
            &mut g,
            &bound,
            image_to_tensor(sample.image_cc.height, sample.image_cc.width, &sample.image_cc.pixels),
            image_to_tensor(sample.image_mlo.height, sample.image_mlo.width, &sample.image_mlo.pixels),
            flags,
            0.0,
            &mut rng,
        )?;
        for view in [View::Cc, View::Mlo] {
            let vf = fwd.view(view);
            let last = vf.stages.last().expect("cascade has stages");
            let mal = g.values(last.malignancy);
            let image_id = sample.image_id(view);
            for (k, bbox) in last.boxes.iter().enumerate() {
                detections.push(Detection {
                    image_id: image_id.clone(),
                    bbox: *bbox,
                    score: crate::numerics::stable_sigmoid(mal[k]),
                });
            }
        }
        breast_scores.push((
            sample.breast_id.clone(),
            sample.exam_id,
            g.scalar(fwd.breast_score),
            sample.label(),
        ));
    }
    Ok(InferenceOutput {
        detections,
        breast_scores,
    })
}

fn image_record(sample: &BreastSample, view: View) -> ImageRecord {
    let mut rec = ImageRecord {
        image_id: sample.image_id(view),
        ..Default::default()
    };
    for f in &sample.findings {
        let b = BreastSample::finding_box(f, view);
        match f.label {
            FindingLabel::Malignant => rec.malignant.push(b),
            FindingLabel::Benign => rec.benign.push(b),
        }
    }
    rec
}

/// Ground-truth records for the AP_mb universe: annotated malignant and
/// benign images only.
pub fn mb_images(dataset: &Dataset) -> Vec<ImageRecord> {
    dataset
        .breasts
        .iter()
        .filter(|b| b.annotated && b.category != Category::Negative)
        .flat_map(|b| [image_record(b, View::Cc), image_record(b, View::Mlo)])
        .collect()
}

/// Ground-truth records for every image in the dataset.
pub fn all_images(dataset: &Dataset) -> Vec<ImageRecord> {
    dataset
        .breasts
        .iter()
        .flat_map(|b| [image_record(b, View::Cc), image_record(b, View::Mlo)])
        .collect()
}

/// Assemble the full report. `include_negatives` selects the evaluation
/// universe: the whole dataset, or only annotated malignant+benign images.
/// AP_mb is always computed on the latter; delta is their difference.
pub fn build_report(
    dataset: &Dataset,
    inference: &InferenceOutput,
    include_negatives: bool,
    benign_hits_are_fp: bool,
) -> EvalReport {
    let mb = mb_images(dataset);
    let universe = if include_negatives {
        all_images(dataset)
    } else {
        mb.clone()
    };
    let grid = iou_threshold_grid();
    let ap_mb = average_precision(&inference.detections, &mb, &grid, benign_hits_are_fp);
    let ap_all = average_precision(&inference.detections, &universe, &grid, benign_hits_are_fp);
    let delta = match (ap_all, ap_mb) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    let curve = froc(&inference.detections, &universe, benign_hits_are_fp);

    let breast_labels: Vec<bool> = inference.breast_scores.iter().map(|&(_, _, _, l)| l).collect();
    let breast_values: Vec<f64> = inference.breast_scores.iter().map(|&(_, _, s, _)| s).collect();
    let breast_auc = roc_auc(&breast_values, &breast_labels).ok();

    let mut exams: std::collections::BTreeMap<u32, (Vec<f64>, bool)> = Default::default();
    for (_, exam, score, label) in &inference.breast_scores {
        let entry = exams.entry(*exam).or_default();
        entry.0.push(*score);
        entry.1 |= label;
    }
    let exam_values: Vec<f64> = exams.values().map(|(s, _)| exam_score(s)).collect();
    let exam_labels: Vec<bool> = exams.values().map(|&(_, l)| l).collect();
    let exam_auc = roc_auc(&exam_values, &exam_labels).ok();

    EvalReport {
        ap_mb,
        ap_all,
        delta,
        recall_at_0_1: recall_at_fp(&curve, 0.1),
        recall_at_0_25: recall_at_fp(&curve, 0.25),
        recall_at_0_5: recall_at_fp(&curve, 0.5),
        froc: curve
            .iter()
            .map(|&(fp_per_image, recall)| FrocPoint {
                fp_per_image,
                recall,
            })
            .collect(),
        breast_auc,
        exam_auc,
    }
}
