use anatomy_align::corpus::AttributeVocabulary;
use anatomy_align::labelgen::{
    build_fine_labels, negate, split_subsentences, DuplicatePolicy, LabelGenConfig, PerturbMode, SlotKind,
};
use proptest::prelude::*;

#[test]
fn split_examples() {
    assert!(split_subsentences("").is_empty());
    assert_eq!(
        split_subsentences("low lung volumes. no consolidation"),
        ["low lung volumes", "no consolidation"]
    );
    assert_eq!(
        split_subsentences("opacity in base, likely atelectasis; no effusion"),
        ["opacity in base", "likely atelectasis", "no effusion"]
    );
}

#[test]
fn negate_examples() {
    assert_eq!(negate("consolidation").unwrap(), "no consolidation");
    assert_eq!(negate("no pleural effusion").unwrap(), "pleural effusion");
    let s = "enlarged cardiac silhouette";
    assert_eq!(negate(&negate(s).unwrap()).unwrap(), s);
    assert!(negate("  ").is_err());
}

#[test]
fn all_empty_findings() {
    let vocab = AttributeVocabulary::default();
    let out = build_fine_labels(&vec![Vec::new(); 5], &vocab, &LabelGenConfig::default()).unwrap();
    assert!(out.sentences.iter().all(String::is_empty));
    assert!(out.label_matrix.iter().flatten().all(|&x| x == 0));
}

#[test]
fn single_unperturbed_positive() {
    let vocab = AttributeVocabulary::default();
    let findings = vec![vec!["pleural effusion".to_string()]];
    let config = LabelGenConfig {
        perturb_probability: 0.0,
        ..LabelGenConfig::default()
    };
    let out = build_fine_labels(&findings, &vocab, &config).unwrap();
    assert_eq!(out.sentences, ["pleural effusion"]);
    assert_eq!(out.label_matrix, [[1]]);
}

#[test]
fn literal_duplicates_link_positive_slots() {
    let vocab = AttributeVocabulary::default();
    let findings = vec![vec!["atelectasis".to_string()], vec!["atelectasis".to_string()], vec![]];
    let base = LabelGenConfig {
        perturb_probability: 0.0,
        ..LabelGenConfig::default()
    };
    let mut seen_negated_fill = false;
    for seed in 0..64 {
        let out = build_fine_labels(&findings, &vocab, &base.with_seed(seed)).unwrap();
        assert_eq!(out.label_matrix[0][1], 1);
        assert_eq!(out.label_matrix[1][0], 1);
        assert_eq!(out.label_matrix[2][2], 0);
        if out.sentences[2] == "no atelectasis" {
            seen_negated_fill = true;
            assert_eq!(out.label_matrix[0][2], 0);
            assert_eq!(out.label_matrix[2][0], 0);
            assert_eq!(out.label_matrix[1][2], 0);
        }
    }
    assert!(seen_negated_fill);
}

#[test]
fn conservative_policy_never_links_negatives() {
    let vocab = AttributeVocabulary::default();
    let findings = vec![vec!["atelectasis".to_string()], vec![], vec![]];
    let config = LabelGenConfig {
        perturb_probability: 0.0,
        duplicate_policy: DuplicatePolicy::Conservative,
        ..LabelGenConfig::default()
    };
    for seed in 0..64 {
        let out = build_fine_labels(&findings, &vocab, &config.with_seed(seed)).unwrap();
        assert_eq!(out.label_matrix[1][2], 0);
        assert_eq!(out.label_matrix[0][1] + out.label_matrix[0][2], 0);
    }
}

#[test]
fn exact_subset_mode_perturbs_the_rounded_count() {
    let vocab = AttributeVocabulary::default();
    let findings: Vec<Vec<String>> = (0..10).map(|i| vec![format!("finding number {i}")]).collect();
    let config = LabelGenConfig {
        perturb_mode: PerturbMode::ExactSubset,
        ..LabelGenConfig::default()
    };
    for seed in 0..32 {
        let out = build_fine_labels(&findings, &vocab, &config.with_seed(seed)).unwrap();
        let perturbed = out
            .kinds
            .iter()
            .filter(|k| matches!(k, SlotKind::Negated | SlotKind::Rephrased))
            .count();
        assert_eq!(perturbed, 2);
    }
}

const PHRASES: [&str; 8] = [
    "atelectasis",
    "pleural effusion",
    "no consolidation",
    "mild pulmonary edema/hazy opacity",
    "lung opacity, likely atelectasis",
    "there is enlarged cardiac silhouette",
    "without pneumothorax",
    "low lung volumes. scoliosis",
];

fn arb_findings() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(
        prop::collection::vec(prop::sample::select(&PHRASES[..]).prop_map(str::to_string), 0..3),
        1..12,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn invariants(findings in arb_findings(), seed in any::<u64>(), conservative in any::<bool>()) {
        let vocab = AttributeVocabulary::default();
        let config = LabelGenConfig {
            seed,
            duplicate_policy: if conservative { DuplicatePolicy::Conservative } else { DuplicatePolicy::Literal },
            ..LabelGenConfig::default()
        };
        let out = build_fine_labels(&findings, &vocab, &config).unwrap();
        prop_assert!(out.is_symmetric());
        for i in 0..out.len() {
            if out.sentences[i].is_empty() {
                prop_assert!(out.label_matrix[i].iter().all(|&x| x == 0));
            }
            match out.kinds[i] {
                SlotKind::Negated | SlotKind::FilledPositive | SlotKind::FilledNegated => {
                    prop_assert_eq!(out.label_matrix[i][i], 0)
                }
                SlotKind::Positive | SlotKind::Rephrased => prop_assert_eq!(out.label_matrix[i][i], 1),
                SlotKind::Empty => {}
            }
        }
        prop_assert_eq!(&build_fine_labels(&findings, &vocab, &config).unwrap(), &out);
    }
}
