//! Staged training of the encoder.
//!
//! Epochs are split into three stages that mask the loss weights:
//! stage 1 keeps only the detection term, stage 2 adds the global term and
//! stage 3 uses all three. Every epoch shuffles the corpus with a seeded
//! stream, redraws each study's fine labels from `(seed, epoch, study_id)`
//! and takes one AdamW step per batch.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Progress, TrainState};
use crate::corpus::{AttributeVocabulary, BBox, Study};
use crate::encoder::{self, EncoderConfig, EncoderOutput, EncoderParams, OutputGrads};
use crate::error::{Error, Result};
use crate::geometry::{center_to_corners, corners_grad_to_center, detection_loss_with, BoxSet, DetectionLossConfig};
use crate::labelgen::{build_fine_labels, study_seed, LabelGenConfig};
use crate::losses::{fine_loss_batch, fine_target_from, global_loss, FineStudy, FineTarget, LossWeights, NegativePool};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;
use crate::tensor::Mat;
use crate::textembed::TextEmbedder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Epochs per stage `(e1, e2, e3)`.
    pub stage_epochs: [usize; 3],
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub encoder: EncoderConfig,
    pub detection: DetectionLossConfig,
    pub labelgen: LabelGenConfig,
    pub negative_pool: NegativePool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage_epochs: [10, 10, 20],
            batch_size: 16,
            lr_start: 1e-3,
            lr_end: 1e-4,
            schedule: LrSchedule::Linear,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            encoder: EncoderConfig::default(),
            detection: DetectionLossConfig::default(),
            labelgen: LabelGenConfig::default(),
            negative_pool: NegativePool::PerStudy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs() == 0 {
            return Err(Error::Config("stage schedule is empty: all stage epoch counts are 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start.is_finite() && self.lr_end.is_finite()) {
            return Err(Error::Config("learning-rate bounds must be positive".into()));
        }
        if self.lr_end > self.lr_start {
            return Err(Error::Config("lr_end must not exceed lr_start".into()));
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        self.encoder.validate()?;
        self.labelgen.validate()?;
        if !(self.detection.alpha >= 0.0 && self.detection.alpha.is_finite()) {
            return Err(Error::Config("detection alpha must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stage_epochs.iter().sum()
    }

    /// Stage (1, 2 or 3) of a zero-based epoch.
    pub fn stage_of(&self, epoch: usize) -> u8 {
        let [e1, e2, _] = self.stage_epochs;
        if epoch < e1 {
            1
        } else if epoch < e1 + e2 {
            2
        } else {
            3
        }
    }

    pub fn stage_weights(&self, stage: u8) -> LossWeights {
        let w = self.weights;
        match stage {
            1 => LossWeights {
                anat: w.anat,
                fine: 0.0,
                global: 0.0,
            },
            2 => LossWeights { fine: 0.0, ..w },
            _ => w,
        }
    }

    /// Learning rate for a zero-based epoch; constant within the epoch.
    pub fn lr(&self, epoch: usize) -> f64 {
        let total = self.total_epochs();
        if total <= 1 {
            return self.lr_start;
        }
        let t = epoch.min(total - 1) as f64 / (total - 1) as f64;
        match self.schedule {
            LrSchedule::Linear => self.lr_start + (self.lr_end - self.lr_start) * t,
            LrSchedule::Cosine => {
                self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Loss components of one batch (unweighted) and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub anat: f64,
    pub fine: f64,
    pub global: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub anat: f64,
    pub fine: f64,
    pub global: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    /// Path of the final checkpoint once one has been written.
    pub checkpoint: Option<String>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Record {
                line: 0,
                field: "train_log".into(),
                message: e.to_string(),
            })?;
        }
        w.flush().map_err(|e| Error::io("<train log>", e))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

/// Everything about one study that a batch step needs.
struct StudyPass {
    output: EncoderOutput,
    anat: Option<(f64, Mat)>,
    sentences: Mat,
    target: FineTarget,
}

/// Per-batch loss values and the parameter gradient of the weighted total.
pub struct BatchGradients {
    pub values: LossValues,
    pub grad: EncoderParams,
}

/// Disease-name embeddings, one row per attribute.
pub fn disease_embeddings(vocab: &AttributeVocabulary, embedder: &TextEmbedder) -> Mat {
    let rows: Vec<Vec<f64>> = (0..vocab.len()).map(|a| embedder.embed_vector(vocab.phrase(a))).collect();
    Mat::from_rows(&rows)
}

/// Predicted center-size boxes as corner boxes.
pub fn predicted_boxes(box_preds: &Mat) -> Vec<BBox> {
    (0..box_preds.rows)
        .map(|k| {
            let c = center_to_corners(box_preds.row(k).try_into().expect("4 box coordinates"));
            BBox::from_corners(c[0], c[1], c[2], c[3])
        })
        .collect()
}

pub struct Trainer<'a> {
    config: TrainConfig,
    corpus: &'a [Study],
    attributes: &'a AttributeVocabulary,
    embedder: TextEmbedder,
    disease: Mat,
    state: TrainState,
    log: TrainLog,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, corpus: &'a [Study], attributes: &'a AttributeVocabulary) -> Result<Self> {
        let params = encoder::init_params(&config.encoder)?;
        let optimizer = AdamW::new(config.optimizer, &params);
        let state = TrainState {
            params,
            optimizer,
            progress: Progress { epochs_done: 0, step: 0 },
        };
        Self::resume(config, corpus, attributes, state)
    }

    pub fn resume(
        config: TrainConfig,
        corpus: &'a [Study],
        attributes: &'a AttributeVocabulary,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if state.params.config != config.encoder {
            return Err(Error::Config("resumed parameters were built with a different encoder config".into()));
        }
        let c = &config.encoder;
        for s in corpus {
            if s.regions.len() != c.num_queries || s.findings.len() != c.num_queries {
                return Err(Error::Shape(format!(
                    "study {} has {} regions, encoder has {} queries",
                    s.study_id,
                    s.regions.len(),
                    c.num_queries
                )));
            }
            if s.labels.len() != attributes.len() {
                return Err(Error::Shape(format!(
                    "study {} has {} labels for {} attributes",
                    s.study_id,
                    s.labels.len(),
                    attributes.len()
                )));
            }
            if s.grid.size != c.grid_size || s.grid.channels != c.channels {
                return Err(Error::Shape(format!("study {} grid does not match the encoder", s.study_id)));
            }
        }
        let embedder = TextEmbedder::new(c.text_dim);
        let disease = disease_embeddings(attributes, &embedder);
        Ok(Self {
            config,
            corpus,
            attributes,
            embedder,
            disease,
            state,
            log: TrainLog::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &EncoderParams {
        &self.state.params
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn epochs_done(&self) -> usize {
        self.state.progress.epochs_done
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.config.total_epochs()
    }

    pub fn into_parts(self) -> (TrainState, TrainLog) {
        (self.state, self.log)
    }

    /// Study order for an epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        order.shuffle(&mut rng::stream(self.config.seed, "trainer/shuffle", &[epoch as u64]));
        order
    }

    fn study_pass(&self, params: &EncoderParams, study: &Study, epoch: usize) -> Result<StudyPass> {
        let output = encoder::forward(params, &study.grid)?;
        let target_boxes = BoxSet::from_optional(&study.regions);
        let anat = if target_boxes.num_valid() > 0 {
            let pred = BoxSet::new(predicted_boxes(&output.box_preds), target_boxes.valid.clone())?;
            let det = detection_loss_with(&pred, &target_boxes, &self.config.detection)?;
            let mut d_center = Mat::zeros(output.box_preds.rows, 4);
            for (k, g) in det.grad.iter().enumerate() {
                d_center.row_mut(k).copy_from_slice(&corners_grad_to_center(*g));
            }
            Some((det.value, d_center))
        } else {
            None
        };
        let lg = self
            .config
            .labelgen
            .with_seed(study_seed(self.config.seed, epoch as u64, &study.study_id));
        let labels = build_fine_labels(&study.findings, self.attributes, &lg)?;
        let rows: Vec<Vec<f64>> = labels
            .sentences
            .iter()
            .map(|s| {
                if s.is_empty() {
                    vec![0.0; self.embedder.dim]
                } else {
                    self.embedder.embed_vector(s)
                }
            })
            .collect();
        Ok(StudyPass {
            output,
            anat,
            sentences: Mat::from_rows(&rows),
            target: fine_target_from(&labels.label_matrix),
        })
    }

    /// Loss values and gradient of `w`-weighted loss over `batch` (indices
    /// into the corpus) at `params`, with fine labels drawn for `epoch`.
    pub fn batch_gradients(
        &self,
        params: &EncoderParams,
        batch: &[usize],
        epoch: usize,
        w: &LossWeights,
    ) -> Result<BatchGradients> {
        let passes: Vec<StudyPass> = batch
            .par_iter()
            .map(|&i| self.study_pass(params, &self.corpus[i], epoch))
            .collect::<Result<_>>()?;
        let tau = self.config.encoder.temperature;

        let with_boxes = passes.iter().filter(|p| p.anat.is_some()).count();
        let anat_value = if with_boxes > 0 {
            passes.iter().filter_map(|p| p.anat.as_ref()).map(|(v, _)| v).sum::<f64>() / with_boxes as f64
        } else {
            0.0
        };

        let fine_inputs: Vec<FineStudy<'_>> = passes
            .iter()
            .map(|p| FineStudy {
                regions: &p.output.region_embeddings,
                sentences: &p.sentences,
                target: &p.target,
            })
            .collect();
        let fine = fine_loss_batch(&fine_inputs, tau, self.config.negative_pool)?;

        let scale = params.logit_scale_value();
        let cls: Vec<Vec<f64>> = passes.iter().map(|p| p.output.cls_embedding.clone()).collect();
        let labels: Vec<Vec<u8>> = batch.iter().map(|&i| self.corpus[i].labels.clone()).collect();
        let global = global_loss(&cls, &self.disease, &labels, scale)?;

        let values = LossValues {
            anat: anat_value,
            fine: fine.value,
            global: global.value,
            total: w.anat * anat_value + w.fine * fine.value + w.global * global.value,
        };

        let c = &self.config.encoder;
        let output_grads: Vec<OutputGrads> = passes
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mut g = OutputGrads::zeros(c);
                if w.anat != 0.0 {
                    if let Some((_, d)) = &p.anat {
                        let s = w.anat / with_boxes as f64;
                        for (o, v) in g.box_preds.data.iter_mut().zip(&d.data) {
                            *o += s * v;
                        }
                    }
                }
                if w.fine != 0.0 {
                    for (o, v) in g.region_embeddings.data.iter_mut().zip(&fine.per_study[k].d_regions.data) {
                        *o += w.fine * v;
                    }
                }
                if w.global != 0.0 {
                    for (o, v) in g.cls_embedding.iter_mut().zip(&global.d_cls[k]) {
                        *o += w.global * v;
                    }
                }
                g
            })
            .collect();

        let grads: Vec<EncoderParams> = passes
            .par_iter()
            .zip(output_grads.par_iter())
            .map(|(p, g)| encoder::backward(params, &p.output, g))
            .collect::<Result<_>>()?;
        let mut total = params.zeros_like();
        for g in &grads {
            total.add_scaled(g, 1.0);
        }
        if w.global != 0.0 {
            total.logit_scale.data[0] += w.global * global.d_scale * scale;
        }
        Ok(BatchGradients { values, grad: total })
    }

    /// Runs one epoch (the next one not yet done).
    pub fn run_epoch(&mut self) -> Result<()> {
        if self.is_finished() {
            return Ok(());
        }
        let epoch = self.state.progress.epochs_done;
        let stage = self.config.stage_of(epoch);
        let w = self.config.stage_weights(stage);
        let lr = self.config.lr(epoch);
        let order = self.epoch_order(epoch);
        for batch in order.chunks(self.config.batch_size) {
            let step = self.state.progress.step;
            let bg = self.batch_gradients(&self.state.params, batch, epoch, &w)?;
            let v = bg.values;
            for (component, value) in [("anat", v.anat), ("fine", v.fine), ("global", v.global), ("total", v.total)] {
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        stage,
                        epoch,
                        step,
                        component: component.into(),
                        value,
                    });
                }
            }
            if !bg.grad.all_finite() {
                return Err(Error::Diverged {
                    stage,
                    epoch,
                    step,
                    component: "gradient".into(),
                    value: f64::NAN,
                });
            }
            self.state.optimizer.step(&mut self.state.params, &bg.grad, lr);
            self.state.progress.step += 1;
            self.log.records.push(StepRecord {
                stage,
                epoch,
                step,
                anat: v.anat,
                fine: v.fine,
                global: v.global,
                total: v.total,
                lr,
            });
        }
        log::info!(
            "epoch {epoch} (stage {stage}) done, last total loss {:.6}",
            self.log.records.last().map(|r| r.total).unwrap_or(f64::NAN)
        );
        self.state.progress.epochs_done += 1;
        Ok(())
    }

    /// Runs epochs until `epochs_done == until` (capped at the schedule end).
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        while self.epochs_done() < until.min(self.config.total_epochs()) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.total_epochs())
    }
}

/// Trains from scratch through the whole schedule.
pub fn train(config: &TrainConfig, corpus: &[Study], attributes: &AttributeVocabulary) -> Result<(EncoderParams, TrainLog)> {
    let mut t = Trainer::new(config.clone(), corpus, attributes)?;
    t.run()?;
    let (state, log) = t.into_parts();
    Ok((state.params, log))
}
