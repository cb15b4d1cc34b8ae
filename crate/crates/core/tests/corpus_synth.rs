use anatomy_align::corpus::{
    corpus_stats, corpus_to_string, parse_corpus, AttributeVocabulary, GroupMap, RegionVocabulary, DEFAULT_GROUPS,
};
use anatomy_align::synth::{generate, SynthConfig};
use anatomy_align::Error;

fn vocabs() -> (AttributeVocabulary, RegionVocabulary) {
    (AttributeVocabulary::default(), RegionVocabulary::default())
}

fn record(box_: &str) -> String {
    let zeros = ["0.0"; 2 * 2 * 3].join(",");
    format!(
        r#"{{"study_id":"s1","grid":{{"size":2,"channels":3,"data":[{zeros}]}},"regions":[{{"name":"Right lung","box":{box_}}}],"findings":{{"Right lung":["atelectasis"]}},"labels":{{"Atelectasis":1}}}}"#
    )
}

#[test]
fn empty_text_gives_no_studies() {
    let (a, r) = vocabs();
    assert!(parse_corpus("", &a, &r).unwrap().is_empty());
}

#[test]
fn one_record_roundtrips() {
    let (a, r) = vocabs();
    let studies = parse_corpus(&record("[0.1,0.2,0.5,0.6]"), &a, &r).unwrap();
    assert_eq!(studies.len(), 1);
    let right = r.index_of("Right lung").unwrap();
    assert_eq!(studies[0].regions[right].unwrap().to_array(), [0.1, 0.2, 0.5, 0.6]);
    let again = parse_corpus(&corpus_to_string(&studies, &a, &r), &a, &r).unwrap();
    assert_eq!(again, studies);
}

#[test]
fn degenerate_box_is_rejected() {
    let (a, r) = vocabs();
    let err = parse_corpus(&record("[0.3,0.2,0.3,0.6]"), &a, &r).unwrap_err();
    assert!(err.to_string().contains("degenerate box"), "{err}");
}

#[test]
fn default_groups_have_expected_sizes() {
    let a = AttributeVocabulary::default();
    let g = GroupMap::default_for(&a).unwrap();
    let sizes: Vec<usize> = g.groups().iter().map(|g| g.members.len()).collect();
    assert_eq!(sizes, [5, 3, 3, 1, 1, 5, 2]);
    assert_eq!(DEFAULT_GROUPS.len(), 7);
}

#[test]
fn group_map_errors() {
    let a = AttributeVocabulary::default();
    let base = GroupMap::default_for(&a).unwrap().groups().to_vec();

    let mut missing = base.clone();
    for g in &mut missing {
        g.members.retain(|m| m != "Scoliosis");
    }
    let err = GroupMap::new(missing, &a).unwrap_err();
    assert!(matches!(err, Error::UncoveredAttribute(_)));
    assert!(err.to_string().contains("uncovered attribute"), "{err}");

    let mut twice = base;
    twice[1].members.push("Atelectasis".into());
    let err = GroupMap::new(twice, &a).unwrap_err();
    assert!(err.to_string().contains("duplicate membership"), "{err}");
}

#[test]
fn synth_is_deterministic() {
    let (a, r) = vocabs();
    let config = SynthConfig {
        num_studies: 20,
        seed: 7,
        ..SynthConfig::default()
    };
    let one = corpus_to_string(&generate(&config).unwrap(), &a, &r);
    let two = corpus_to_string(&generate(&config).unwrap(), &a, &r);
    assert_eq!(one, two);
}

#[test]
fn zero_prevalence_gives_empty_studies() {
    let config = SynthConfig {
        num_studies: 50,
        ..SynthConfig::default()
    }
    .with_uniform_prevalence(0.0);
    for s in generate(&config).unwrap() {
        assert!(s.findings.iter().all(Vec::is_empty));
        assert!(s.labels.iter().all(|&y| y == 0));
    }
}

#[test]
fn observed_prevalence_matches_configuration() {
    let (a, r) = vocabs();
    let mut config = SynthConfig {
        num_studies: 1000,
        seed: 3,
        ..SynthConfig::default()
    }
    .with_uniform_prevalence(0.0);
    config.attributes[0].prevalence = 0.3;
    let studies = generate(&config).unwrap();
    let stats = corpus_stats(&studies, &a, &r).unwrap();
    let rate = stats.attribute_positives[0] as f64 / 1000.0;
    assert!((rate - 0.3).abs() <= 0.05, "{rate}");
    assert!(stats.attribute_positives[1..].iter().all(|&c| c == 0));
}

#[test]
fn stats_count_single_positive() {
    let (a, r) = vocabs();
    let studies = parse_corpus(&record("[0.1,0.2,0.5,0.6]"), &a, &r).unwrap();
    let stats = corpus_stats(&studies, &a, &r).unwrap();
    let at = a.index_of("Atelectasis").unwrap();
    for (i, &c) in stats.attribute_positives.iter().enumerate() {
        assert_eq!(c, (i == at) as usize);
    }
}
