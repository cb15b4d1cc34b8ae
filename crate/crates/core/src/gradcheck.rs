//! Central finite-difference checks of every analytic gradient.
//!
//! Each check draws random instances, picks random coordinates and compares
//! the analytic partial derivative `a` with `(f(x + h) - f(x - h)) / 2h`
//! using `|a - n| / max(|a|, |n|, floor)`.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttributeVocabulary, BBox, Grid, Study};
use crate::encoder::{self, init_params, EncoderConfig, EncoderParams, OutputGrads};
use crate::error::Result;
use crate::geometry::{detection_loss, BoxSet};
use crate::losses::{fine_loss, fine_target_from, global_loss, LossWeights};
use crate::rng;
use crate::tensor::{l2_normalize, Mat};
use crate::trainer::{TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckConfig {
    pub seed: u64,
    pub probes: usize,
    pub step: f64,
    /// Step used for the box-geometry check.
    pub geometry_step: f64,
    pub tolerance: f64,
    /// Denominator floor so that two vanishing derivatives compare equal.
    pub floor: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            probes: 200,
            step: 1e-5,
            geometry_step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: CheckConfig,
    pub results: Vec<CheckResult>,
    pub passed: bool,
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Tally {
    name: String,
    cfg: CheckConfig,
    probes: usize,
    worst: (f64, f64, f64),
}

impl Tally {
    fn new(name: &str, cfg: CheckConfig) -> Self {
        Self {
            name: name.into(),
            cfg,
            probes: 0,
            worst: (0.0, 0.0, 0.0),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.probes += 1;
        let e = if analytic.is_finite() && numeric.is_finite() {
            rel_error(analytic, numeric, self.cfg.floor)
        } else {
            f64::INFINITY
        };
        if e > self.worst.0 || e.is_nan() {
            self.worst = (e, analytic, numeric);
        }
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            passed: self.worst.0 <= self.cfg.tolerance,
            name: self.name,
            probes: self.probes,
            max_rel_error: self.worst.0,
            worst_analytic: self.worst.1,
            worst_numeric: self.worst.2,
        }
    }
}

fn central(x: &mut [f64], i: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

fn gaussian_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

fn random_box(r: &mut ChaCha8Rng) -> BBox {
    let x1 = r.random_range(0.0..0.6);
    let y1 = r.random_range(0.0..0.6);
    let x2 = x1 + r.random_range(0.05..0.4);
    let y2 = y1 + r.random_range(0.05..0.4);
    BBox::from_corners(x1, y1, x2, y2)
}

/// Detection loss w.r.t. predicted corners, one fresh instance per probe.
pub fn check_detection(cfg: &CheckConfig) -> Result<CheckResult> {
    let mut tally = Tally::new("detection", *cfg);
    let mut r = rng::stream(cfg.seed, "gradcheck/detection", &[]);
    let m = 6;
    while tally.probes < cfg.probes {
        let pred: Vec<BBox> = (0..m).map(|_| random_box(&mut r)).collect();
        let target: Vec<BBox> = (0..m).map(|_| random_box(&mut r)).collect();
        let mut valid: Vec<bool> = (0..m).map(|_| r.random_bool(0.7)).collect();
        valid[0] = true;
        let target = BoxSet::new(target, valid.clone())?;
        let alpha = 5.0;
        let loss = detection_loss(&BoxSet::new(pred.clone(), valid.clone())?, &target, alpha)?;
        let mut x: Vec<f64> = pred.iter().flat_map(|b| b.to_array()).collect();
        let i = r.random_range(0..x.len());
        let mut f = |x: &[f64]| {
            let boxes = x
                .chunks(4)
                .map(|c| BBox::from_corners(c[0], c[1], c[2], c[3]))
                .collect();
            detection_loss(&BoxSet::new(boxes, valid.clone()).unwrap(), &target, alpha)
                .unwrap()
                .value
        };
        let numeric = central(&mut x, i, cfg.geometry_step, &mut f);
        tally.record(loss.grad[i / 4][i % 4], numeric);
    }
    Ok(tally.finish())
}

fn random_symmetric_labels(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec<u8>> {
    let mut l = vec![vec![0u8; n]; n];
    for i in 0..n {
        l[i][i] = r.random_bool(0.6) as u8;
        for j in (i + 1)..n {
            let v = r.random_bool(0.15) as u8;
            l[i][j] = v;
            l[j][i] = v;
        }
    }
    l[0][0] = 1;
    l
}

fn unit_rows(r: &mut ChaCha8Rng, n: usize, d: usize) -> Mat {
    let mut m = Mat::from_vec(n, d, gaussian_vec(r, n * d));
    for i in 0..n {
        l2_normalize(m.row_mut(i));
    }
    m
}

/// Fine loss w.r.t. region and sentence embeddings (`n = 6`, `d = 8`).
pub fn check_fine(cfg: &CheckConfig) -> Result<CheckResult> {
    let mut tally = Tally::new("fine", *cfg);
    let mut r = rng::stream(cfg.seed, "gradcheck/fine", &[]);
    let (n, d, tau) = (6, 8, 0.5);
    while tally.probes < cfg.probes {
        let o = unit_rows(&mut r, n, d);
        let mut p = unit_rows(&mut r, n, d);
        // An empty slot: zero sentence vector.
        p.row_mut(n - 1).iter_mut().for_each(|v| *v = 0.0);
        let target = fine_target_from(&random_symmetric_labels(&mut r, n));
        let loss = fine_loss(&o, &p, &target, tau)?;
        let mut x: Vec<f64> = o.data.iter().chain(&p.data).copied().collect();
        let analytic: Vec<f64> = loss.d_regions.data.iter().chain(&loss.d_sentences.data).copied().collect();
        let i = r.random_range(0..x.len());
        let mut f = |x: &[f64]| {
            let o = Mat::from_vec(n, d, x[..n * d].to_vec());
            let p = Mat::from_vec(n, d, x[n * d..].to_vec());
            fine_loss(&o, &p, &target, tau).unwrap().value
        };
        let numeric = central(&mut x, i, cfg.step, &mut f);
        tally.record(analytic[i], numeric);
    }
    Ok(tally.finish())
}

/// Global loss w.r.t. CLS embeddings, disease embeddings and the scale
/// (`C = 20`, `d = 16`, three studies).
pub fn check_global(cfg: &CheckConfig) -> Result<CheckResult> {
    let mut tally = Tally::new("global", *cfg);
    let mut r = rng::stream(cfg.seed, "gradcheck/global", &[]);
    let (b, c, d) = (3, 20, 16);
    while tally.probes < cfg.probes {
        let cls: Vec<Vec<f64>> = (0..b).map(|_| unit_rows(&mut r, 1, d).data).collect();
        let disease = unit_rows(&mut r, c, d);
        let labels: Vec<Vec<u8>> = (0..b).map(|_| (0..c).map(|_| r.random_bool(0.3) as u8).collect()).collect();
        let scale = r.random_range(1.0..15.0);
        let loss = global_loss(&cls, &disease, &labels, scale)?;
        let mut x: Vec<f64> = cls.iter().flatten().chain(&disease.data).copied().collect();
        x.push(scale);
        let mut analytic: Vec<f64> = loss.d_cls.iter().flatten().chain(&loss.d_disease.data).copied().collect();
        analytic.push(loss.d_scale);
        let i = r.random_range(0..x.len());
        let mut f = |x: &[f64]| {
            let cls: Vec<Vec<f64>> = x[..b * d].chunks(d).map(|c| c.to_vec()).collect();
            let disease = Mat::from_vec(c, d, x[b * d..b * d + c * d].to_vec());
            global_loss(&cls, &disease, &labels, x[x.len() - 1]).unwrap().value
        };
        let numeric = central(&mut x, i, cfg.step, &mut f);
        tally.record(analytic[i], numeric);
    }
    Ok(tally.finish())
}

/// The small encoder used by the encoder and full-pipeline checks.
pub fn small_encoder_config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        grid_size: 2,
        channels: 3,
        width: 8,
        blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        num_queries: 3,
        text_dim: 8,
        temperature: 0.5,
        init_std: 0.3,
        seed,
    }
}

fn perturbed_params(cfg: &EncoderConfig, r: &mut ChaCha8Rng) -> Result<EncoderParams> {
    // Larger random values than the training init so every path carries
    // non-negligible gradient.
    let mut p = init_params(cfg)?;
    let mut flat = p.flatten();
    for v in flat.iter_mut() {
        *v += 0.1 * gaussian_vec(r, 1)[0];
    }
    p.assign_flat(&flat);
    Ok(p)
}

fn random_grid(r: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Grid {
    let mut g = Grid::zeros(cfg.grid_size, cfg.channels);
    g.data = gaussian_vec(r, g.data.len());
    g
}

/// Encoder backward against a random linear functional of all three heads.
pub fn check_encoder(cfg: &CheckConfig) -> Result<CheckResult> {
    let mut tally = Tally::new("encoder", *cfg);
    let mut r = rng::stream(cfg.seed, "gradcheck/encoder", &[]);
    let ec = small_encoder_config(cfg.seed);
    while tally.probes < cfg.probes {
        let params = perturbed_params(&ec, &mut r)?;
        let grid = random_grid(&mut r, &ec);
        let mut weights = OutputGrads::zeros(&ec);
        weights.box_preds.data = gaussian_vec(&mut r, weights.box_preds.data.len());
        weights.region_embeddings.data = gaussian_vec(&mut r, weights.region_embeddings.data.len());
        weights.cls_embedding = gaussian_vec(&mut r, ec.text_dim);
        let functional = |p: &EncoderParams| -> f64 {
            let out = encoder::forward(p, &grid).unwrap();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            dot(&out.box_preds.data, &weights.box_preds.data)
                + dot(&out.region_embeddings.data, &weights.region_embeddings.data)
                + dot(&out.cls_embedding, &weights.cls_embedding)
        };
        let grad = encoder::backward_from_grid(&params, &grid, &weights)?.flatten();
        let mut x = params.flatten();
        let mut scratch = params.clone();
        // Several probes per instance keep the check fast.
        for _ in 0..10 {
            let i = pick_nonconstant(&mut r, &params);
            let mut f = |x: &[f64]| {
                scratch.assign_flat(x);
                functional(&scratch)
            };
            let numeric = central(&mut x, i, cfg.step, &mut f);
            tally.record(grad[i], numeric);
        }
    }
    Ok(tally.finish())
}

/// A random flat index, skipping `logit_scale` (not an encoder output path).
fn pick_nonconstant(r: &mut ChaCha8Rng, params: &EncoderParams) -> usize {
    let n = params.num_params();
    loop {
        let i = (r.next_u64() % n as u64) as usize;
        if i != n - 1 {
            return i;
        }
    }
}

fn tiny_corpus(r: &mut ChaCha8Rng, ec: &EncoderConfig, vocab: &AttributeVocabulary) -> Vec<Study> {
    (0..2)
        .map(|s| {
            let regions = (0..ec.num_queries)
                .map(|k| (k != 1 || s == 0).then(|| random_box(r)))
                .collect();
            let mut findings = vec![Vec::new(); ec.num_queries];
            findings[0].push(format!("there is {}", vocab.phrase(s % vocab.len())));
            findings[2].push(format!("mild {}", vocab.phrase((s + 1) % vocab.len())));
            let mut labels = vec![0u8; vocab.len()];
            labels[s % vocab.len()] = 1;
            labels[(s + 1) % vocab.len()] = 1;
            Study {
                study_id: format!("gradcheck-{s}"),
                grid: random_grid(r, ec),
                regions,
                findings,
                labels,
            }
        })
        .collect()
}

/// The weighted total loss through the whole pipeline, w.r.t. every
/// parameter including the logit scale.
pub fn check_total(cfg: &CheckConfig) -> Result<CheckResult> {
    let mut tally = Tally::new("total", *cfg);
    let mut r = rng::stream(cfg.seed, "gradcheck/total", &[]);
    let ec = small_encoder_config(cfg.seed);
    let vocab = AttributeVocabulary::new(
        ["Lung Opacity", "Pleural Effusion", "Cardiomegaly"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    )?;
    let tc = TrainConfig {
        seed: cfg.seed,
        encoder: ec.clone(),
        stage_epochs: [0, 0, 1],
        ..TrainConfig::default()
    };
    while tally.probes < cfg.probes {
        let corpus = tiny_corpus(&mut r, &ec, &vocab);
        let trainer = Trainer::new(tc.clone(), &corpus, &vocab)?;
        let params = perturbed_params(&ec, &mut r)?;
        let w = LossWeights::new(r.random_range(0.5..2.0), r.random_range(0.5..2.0), r.random_range(0.5..2.0))?;
        let batch = [0, 1];
        let grad = trainer.batch_gradients(&params, &batch, 0, &w)?.grad.flatten();
        let mut x = params.flatten();
        let mut scratch = params.clone();
        for _ in 0..10 {
            let i = (r.next_u64() % x.len() as u64) as usize;
            let mut f = |x: &[f64]| {
                scratch.assign_flat(x);
                trainer.batch_gradients(&scratch, &batch, 0, &w).unwrap().values.total
            };
            let numeric = central(&mut x, i, cfg.step, &mut f);
            tally.record(grad[i], numeric);
        }
    }
    Ok(tally.finish())
}

pub fn run_suite(cfg: &CheckConfig) -> Result<GradcheckReport> {
    let results = vec![
        check_detection(cfg)?,
        check_fine(cfg)?,
        check_global(cfg)?,
        check_total(cfg)?,
        check_encoder(cfg)?,
    ];
    let passed = results.iter().all(|r| r.passed);
    Ok(GradcheckReport {
        config: *cfg,
        results,
        passed,
    })
}
