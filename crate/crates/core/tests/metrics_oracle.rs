use std::fs::File;
use std::path::PathBuf;

use anatomy_align::corpus::{load_group_map, AttributeVocabulary, BBox, RegionVocabulary};
use anatomy_align::metrics::{
    aggregate_groups, auc, auc_brute_force, bmac, f1, iou_thresholds, localization_map, read_attribute_table,
    regionwise_eval, round1, RegionSamples, Rounding, Scope, ThresholdPolicy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), Some(1.0));
    assert_eq!(auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), Some(0.5));
    assert_eq!(auc(&[0.5, 0.6], &[1, 1]).unwrap(), None);
}

#[test]
fn auc_matches_brute_force_on_random_tied_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(1..=6);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        assert_eq!(auc(&scores, &labels).unwrap(), auc_brute_force(&scores, &labels).unwrap());
    }
}

#[test]
fn bmac_and_f1_hand_values() {
    let s = [0.9, 0.8, 0.4, 0.1];
    let fixed = ThresholdPolicy::Fixed(0.5);
    assert_eq!(bmac(&s, &[1, 1, 0, 0], fixed).unwrap(), Some(1.0));
    assert_eq!(bmac(&s, &[1, 0, 1, 0], fixed).unwrap(), Some(0.5));
    assert_eq!(bmac(&s, &[1, 1, 0, 0], ThresholdPolicy::Youden).unwrap(), Some(1.0));
    assert_eq!(bmac(&[0.3; 4], &[1, 0, 1, 0], ThresholdPolicy::Youden).unwrap(), Some(0.5));
    // TP=2, FP=1, FN=1
    let v = f1(&[0.9, 0.8, 0.7, 0.1, 0.2], &[1, 1, 0, 1, 0], 0.5).unwrap();
    assert!((v - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(f1(&[0.1, 0.2], &[1, 0], 0.5).unwrap(), 0.0);
}

#[test]
fn localization_examples() {
    let t = BBox::new(0.0, 0.0, 1.0, 0.6).unwrap();
    let p = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let m = localization_map(&[p], &[Some(t)], &iou_thresholds()).unwrap().unwrap();
    assert!((m - 0.3).abs() < 1e-12);
    assert_eq!(localization_map(&[t], &[Some(t)], &iou_thresholds()).unwrap(), Some(1.0));
    let far = BBox::new(0.0, 0.7, 1.0, 1.0).unwrap();
    assert_eq!(localization_map(&[far], &[Some(t)], &iou_thresholds()).unwrap(), Some(0.0));
    assert_eq!(localization_map(&[far], &[None], &iou_thresholds()).unwrap(), None);
}

#[test]
fn grouped_table_reproduction() {
    let vocab = AttributeVocabulary::default();
    let groups = load_group_map(&fixture("groups.json"), &vocab).unwrap();
    let table = read_attribute_table(File::open(fixture("full_table.csv")).unwrap()).unwrap();
    let mut expected = csv::Reader::from_path(fixture("grouped_results.csv")).unwrap();
    let expected: Vec<csv::StringRecord> = expected.records().map(Result::unwrap).collect();
    let mut checked = 0;
    for model in table.models() {
        let rows = aggregate_groups(&table.rows_for(&model), &groups, &vocab).unwrap();
        let model = model.unwrap();
        for row in rows.iter().filter(|r| r.scope == Scope::Group) {
            let want = expected
                .iter()
                .find(|r| r[0] == *model && r[1] == *row.name)
                .unwrap_or_else(|| panic!("missing {model}/{}", row.name));
            for (k, got) in [row.bmac, row.auc, row.f1].into_iter().enumerate() {
                let w: f64 = want[2 + k].parse().unwrap();
                assert!((round1(got.unwrap(), Rounding::HalfEven) - w).abs() <= 0.05 + 1e-9);
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 7 * 3 * 8);
}

#[test]
fn singleton_group_equals_its_attribute() {
    let vocab = AttributeVocabulary::default();
    let groups = load_group_map(&fixture("groups.json"), &vocab).unwrap();
    let table = read_attribute_table(File::open(fixture("full_table.csv")).unwrap()).unwrap();
    let clip = table.rows_for(&Some("CLIP".into()));
    let rows = aggregate_groups(&clip, &groups, &vocab).unwrap();
    let g = rows.iter().find(|r| r.name == "Inflation & airway mechanics").unwrap();
    let a = clip.iter().find(|r| r.name == "Hyperaeration").unwrap();
    assert_eq!((g.bmac, g.auc, g.f1), (a.bmac, a.auc, a.f1));
}

#[test]
fn regionwise_oracle_and_anti_oracle() {
    let regions = RegionVocabulary::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<Vec<u8>> = (0..regions.len())
        .map(|_| (0..200).map(|i| if i < 2 { i as u8 } else { rng.random_range(0..2) }).collect())
        .collect();
    let oracle: Vec<RegionSamples> = labels
        .iter()
        .map(|l| RegionSamples {
            scores: l.iter().map(|&y| y as f64).collect(),
            labels: l.clone(),
        })
        .collect();
    let rows = regionwise_eval(&oracle, &regions, ThresholdPolicy::Youden).unwrap();
    assert_eq!(rows.len(), regions.len() + 1);
    assert_eq!(rows.last().unwrap().scope, Scope::AverageByRegion);
    for r in &rows {
        assert_eq!(r.auc, Some(100.0));
        assert_eq!(r.bmac, Some(100.0));
    }
    let anti: Vec<RegionSamples> = labels
        .iter()
        .map(|l| RegionSamples {
            scores: l.iter().map(|&y| 1.0 - y as f64).collect(),
            labels: l.clone(),
        })
        .collect();
    let rows = regionwise_eval(&anti, &regions, ThresholdPolicy::Youden).unwrap();
    assert!(rows.iter().all(|r| r.auc == Some(0.0)));
}

#[test]
fn regionwise_random_scores_are_near_chance() {
    let regions = RegionVocabulary::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<RegionSamples> = (0..regions.len())
        .map(|_| RegionSamples {
            scores: (0..1000).map(|_| rng.random()).collect(),
            labels: (0..1000).map(|_| rng.random_range(0..2)).collect(),
        })
        .collect();
    for r in regionwise_eval(&samples, &regions, ThresholdPolicy::Youden).unwrap() {
        assert!((r.auc.unwrap() - 50.0).abs() <= 5.0, "{}: {:?}", r.name, r.auc);
    }
}
