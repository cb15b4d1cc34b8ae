//! Running a trained encoder over a corpus and scoring it.
//!
//! Zero-shot attribute scores are `cos(g, e_c)` between the CLS embedding and
//! each attribute phrase embedding. Region-wise scores pair every region
//! embedding with every attribute phrase; the label is whether a finding in
//! that region mentions the attribute.

use rayon::prelude::*;

use crate::corpus::{AttributeVocabulary, GroupMap, RegionVocabulary, Study};
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_groups, attribute_rows, iou_thresholds, localization_map, regionwise_eval, MetricReport, MetricRow,
    PolicyHeader, RegionSamples, Rounding, Scope, ThresholdPolicy,
};
use crate::tensor::{dot, Mat};
use crate::textembed::TextEmbedder;
use crate::trainer::{disease_embeddings, predicted_boxes};

/// Encoder outputs kept for scoring.
pub struct StudyPrediction {
    pub cls: Vec<f64>,
    pub regions: Mat,
    pub box_preds: Mat,
}

pub fn predict(params: &EncoderParams, corpus: &[Study]) -> Result<Vec<StudyPrediction>> {
    corpus
        .par_iter()
        .map(|s| {
            let out = encoder::forward(params, &s.grid)?;
            Ok(StudyPrediction {
                cls: out.cls_embedding,
                regions: out.region_embeddings,
                box_preds: out.box_preds,
            })
        })
        .collect()
}

/// `N x C` cosine scores between CLS embeddings and attribute phrases.
pub fn zero_shot_scores(predictions: &[StudyPrediction], vocab: &AttributeVocabulary, text_dim: usize) -> Vec<Vec<f64>> {
    let disease = disease_embeddings(vocab, &TextEmbedder::new(text_dim));
    predictions
        .iter()
        .map(|p| (0..disease.rows).map(|c| dot(&p.cls, disease.row(c))).collect())
        .collect()
}

/// Localization score over every valid region of the corpus, pooled.
pub fn corpus_localization_map(predictions: &[StudyPrediction], corpus: &[Study]) -> Result<Option<f64>> {
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for (p, s) in predictions.iter().zip(corpus) {
        pred.extend(predicted_boxes(&p.box_preds));
        target.extend(s.regions.iter().cloned());
    }
    localization_map(&pred, &target, &iou_thresholds())
}

/// Region-wise samples: for each region, one `(score, label)` per
/// `(study, attribute)` pair.
pub fn region_samples(
    predictions: &[StudyPrediction],
    corpus: &[Study],
    attributes: &AttributeVocabulary,
    regions: &RegionVocabulary,
    text_dim: usize,
) -> Result<Vec<RegionSamples>> {
    let disease = disease_embeddings(attributes, &TextEmbedder::new(text_dim));
    let mut out = vec![RegionSamples::default(); regions.len()];
    for (p, s) in predictions.iter().zip(corpus) {
        if p.regions.rows != regions.len() || s.findings.len() != regions.len() {
            return Err(Error::Shape(format!(
                "study {} has {} region embeddings for {} regions",
                s.study_id,
                p.regions.rows,
                regions.len()
            )));
        }
        for (r, samples) in out.iter_mut().enumerate() {
            let mut present = vec![0u8; attributes.len()];
            for f in &s.findings[r] {
                for a in attributes.match_text(f) {
                    present[a] = 1;
                }
            }
            for (a, &y) in present.iter().enumerate() {
                samples.scores.push(dot(p.regions.row(r), disease.row(a)));
                samples.labels.push(y);
            }
        }
    }
    Ok(out)
}

/// Macro mean AUC (as a fraction) over rows with a defined AUC.
pub fn mean_auc(rows: &[MetricRow]) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.scope == Scope::Attribute)
        .filter_map(|r| r.auc)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64 / 100.0)
}

pub struct EvalOptions<'a> {
    pub policy: ThresholdPolicy,
    pub rounding: Rounding,
    pub groups: Option<&'a GroupMap>,
    pub regions: Option<&'a RegionVocabulary>,
}

/// Attribute rows, optional group and region rows, and the localization score.
pub fn evaluate(
    params: &EncoderParams,
    corpus: &[Study],
    attributes: &AttributeVocabulary,
    options: &EvalOptions<'_>,
) -> Result<MetricReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let preds = predict(params, corpus)?;
    let text_dim = params.config.text_dim;
    let scores = zero_shot_scores(&preds, attributes, text_dim);
    let labels: Vec<Vec<u8>> = corpus.iter().map(|s| s.labels.clone()).collect();
    let mut rows = attribute_rows(&scores, &labels, attributes, options.policy)?;
    if let Some(groups) = options.groups {
        let grouped = aggregate_groups(&rows, groups, attributes)?;
        rows.extend(grouped);
    }
    if let Some(regions) = options.regions {
        let samples = region_samples(&preds, corpus, attributes, regions, text_dim)?;
        rows.extend(regionwise_eval(&samples, regions, options.policy)?);
    }
    Ok(MetricReport {
        policy: PolicyHeader::new(options.policy, options.rounding),
        rows,
        detection_map: corpus_localization_map(&preds, corpus)?,
    })
}
