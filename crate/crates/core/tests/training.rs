use anatomy_align::checkpoint::{params_from_bytes, params_to_bytes, state_from_bytes, state_to_bytes};
use anatomy_align::corpus::{AttributeVocabulary, Study};
use anatomy_align::encoder::{self, EncoderConfig, OutputGrads};
use anatomy_align::gradcheck::{run_suite, CheckConfig};
use anatomy_align::losses::LossWeights;
use anatomy_align::optim::AdamW;
use anatomy_align::textembed::TextEmbedder;
use anatomy_align::synth::{generate, SynthConfig};
use anatomy_align::trainer::{train, TrainConfig, Trainer};

fn corpus(n: usize, seed: u64) -> Vec<Study> {
    generate(&SynthConfig {
        num_studies: n,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn config(stages: [usize; 3]) -> TrainConfig {
    TrainConfig {
        stage_epochs: stages,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn encoder_shape_contract() {
    let c = EncoderConfig {
        grid_size: 4,
        ..EncoderConfig::default()
    };
    assert_eq!(c.seq_len(), 1 + 16 + 29);
    let p = encoder::init_params(&c).unwrap();
    let grid = anatomy_align::corpus::Grid::zeros(4, c.channels);
    let out = encoder::forward(&p, &grid).unwrap();
    assert_eq!((out.box_preds.rows, out.box_preds.cols), (29, 4));
    assert_eq!((out.region_embeddings.rows, out.region_embeddings.cols), (29, c.text_dim));
    let again = encoder::forward(&p, &grid).unwrap();
    assert_eq!(out.box_preds, again.box_preds);
    let g = encoder::backward(&p, &out, &OutputGrads::zeros(&c)).unwrap();
    assert_eq!(g.norm_sq(), 0.0);
}

#[test]
fn init_checksums_follow_the_seed() {
    let c = EncoderConfig::default();
    let a = encoder::init_params(&c).unwrap().checksum();
    assert_eq!(a, encoder::init_params(&c).unwrap().checksum());
    let other = EncoderConfig { seed: 1, ..c };
    assert_ne!(a, encoder::init_params(&other).unwrap().checksum());
}

#[test]
fn checkpoint_roundtrip_and_truncation() {
    let p = encoder::init_params(&EncoderConfig::default()).unwrap();
    let bytes = params_to_bytes(&p);
    assert_eq!(params_from_bytes(&bytes).unwrap().checksum(), p.checksum());
    assert!(params_from_bytes(&bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn training_is_bit_reproducible() {
    let studies = corpus(24, 1);
    let vocab = AttributeVocabulary::default();
    let cfg = config([1, 1, 1]);
    let (p1, l1) = train(&cfg, &studies, &vocab).unwrap();
    let (p2, l2) = train(&cfg, &studies, &vocab).unwrap();
    assert_eq!(p1.checksum(), p2.checksum());
    assert_eq!(l1.to_csv().unwrap(), l2.to_csv().unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let studies = corpus(24, 2);
    let vocab = AttributeVocabulary::default();
    let cfg = config([1, 1, 1]);
    let (full, full_log) = train(&cfg, &studies, &vocab).unwrap();

    let mut first = Trainer::new(cfg.clone(), &studies, &vocab).unwrap();
    first.run_until(2).unwrap();
    let (state, head) = first.into_parts();
    let state = state_from_bytes(&state_to_bytes(&state)).unwrap();
    let mut second = Trainer::resume(cfg, &studies, &vocab, state).unwrap();
    second.run().unwrap();
    assert!(second.is_finished());
    assert_eq!(second.params().checksum(), full.checksum());
    let mut records = head.records.clone();
    records.extend(second.log().records.iter().cloned());
    assert_eq!(records, full_log.records);
}

#[test]
fn global_only_weights_zero_the_other_paths() {
    let studies = corpus(8, 3);
    let vocab = AttributeVocabulary::default();
    let cfg = config([1, 0, 0]);
    let t = Trainer::new(cfg, &studies, &vocab).unwrap();
    let batch: Vec<usize> = (0..8).collect();
    let only_anat = t
        .batch_gradients(t.params(), &batch, 0, &LossWeights::new(1.0, 0.0, 0.0).unwrap())
        .unwrap();
    assert_eq!(only_anat.grad.logit_scale.data[0], 0.0);
    assert_eq!(only_anat.grad.cls_proj.weight.norm_sq(), 0.0);
    assert_eq!(only_anat.grad.fusion.weight.norm_sq(), 0.0);
    let only_global = t
        .batch_gradients(t.params(), &batch, 0, &LossWeights::new(0.0, 0.0, 1.0).unwrap())
        .unwrap();
    assert_eq!(only_global.values.total, only_global.values.global);
    assert_eq!(only_global.grad.box_out.weight.norm_sq(), 0.0);
    assert_eq!(only_global.grad.region_proj.weight.norm_sq(), 0.0);
}

#[test]
fn stage_one_reduces_detection_loss() {
    let studies = corpus(256, 4);
    let vocab = AttributeVocabulary::default();
    let (_, log) = train(&config([10, 0, 0]), &studies, &vocab).unwrap();
    let mean = |epoch: usize| {
        let v: Vec<f64> = log.records.iter().filter(|r| r.epoch == epoch).map(|r| r.anat).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(log.records.iter().all(|r| r.stage == 1));
    assert!(mean(9) < mean(0), "{} vs {}", mean(9), mean(0));
}

#[test]
fn gradient_suite_passes() {
    let report = run_suite(&CheckConfig::default()).unwrap();
    for r in &report.results {
        assert!(r.passed, "{}: {}", r.name, r.max_rel_error);
        assert!(r.probes >= 200);
    }
}

#[test]
fn one_step_matches_manual_composition() {
    let studies = corpus(8, 5);
    let vocab = AttributeVocabulary::default();
    let cfg = config([0, 0, 1]);
    let mut t = Trainer::new(cfg.clone(), &studies, &vocab).unwrap();
    let start = t.params().clone();
    let batch = t.epoch_order(0);

    let mut grad = start.zeros_like();
    for w in [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)] {
        let part = t
            .batch_gradients(&start, &batch, 0, &LossWeights::new(w.0, w.1, w.2).unwrap())
            .unwrap();
        grad.add_scaled(&part.grad, 1.0);
    }
    let joint = t.batch_gradients(&start, &batch, 0, &LossWeights::default()).unwrap();
    let (a, b) = (grad.flatten(), joint.grad.flatten());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
    }

    let mut manual = start.clone();
    AdamW::new(cfg.optimizer, &start).step(&mut manual, &grad, cfg.lr(0));
    t.run_epoch().unwrap();
    assert_eq!(t.log().records.len(), 1);
    for (x, y) in manual.flatten().iter().zip(t.params().flatten()) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn text_embeddings_are_untouched_by_training() {
    let vocab = AttributeVocabulary::default();
    let probe = ["pleural effusion", "no consolidation", "there is mild lung opacity"];
    let embed = |s: &str| TextEmbedder::new(64).embed_vector(s);
    let before: Vec<Vec<f64>> = probe.iter().map(|s| embed(s)).collect();
    let studies = corpus(8, 6);
    train(&config([1, 0, 1]), &studies, &vocab).unwrap();
    let after: Vec<Vec<f64>> = probe.iter().map(|s| embed(s)).collect();
    assert_eq!(before, after);
}
