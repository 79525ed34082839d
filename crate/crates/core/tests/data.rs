use proptest::prelude::*;
use tpr_core::data::{
    detokenize, gen_heuristic_probes, gen_structured_tasks, load_tsv, tokenize, validate_probe, write_tsv,
    HeuristicClass, ProbeSpec, Rule, StructuredConfig, Vocab,
};

#[test]
fn structured_corpus_survives_write_and_load() {
    let cfg = StructuredConfig {
        source_train: 50,
        source_dev: 10,
        target_train: 30,
        target_dev: 10,
        ..StructuredConfig::default()
    };
    let tasks = gen_structured_tasks(3, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, corpus) in [("src", &tasks.source.train), ("tgt", &tasks.target.dev)] {
        let path = dir.path().join(format!("{name}.tsv"));
        write_tsv(corpus, &path).unwrap();
        let loaded = load_tsv(&path, &corpus.schema(64)).unwrap();
        assert_eq!(loaded.truncated, 0);
        assert_eq!(&loaded.corpus, corpus);
    }
}

#[test]
fn probe_corpus_survives_write_and_load() {
    let probes = gen_heuristic_probes(&ProbeSpec::default(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("probes.tsv");
    write_tsv(&probes, &path).unwrap();
    let loaded = load_tsv(&path, &probes.schema(64)).unwrap();
    assert_eq!(loaded.corpus, probes);
}

#[test]
fn every_probe_passes_its_validator() {
    for seed in 0..5 {
        let spec = ProbeSpec {
            lexical_overlap: 200,
            subsequence: 200,
            constituent: 200,
            ..ProbeSpec::default()
        };
        let probes = gen_heuristic_probes(&spec, seed).unwrap();
        for class in HeuristicClass::ALL {
            let of_class: Vec<_> = probes.pairs.iter().filter(|p| p.heuristic == Some(class)).collect();
            assert_eq!(of_class.len(), 200);
            let entailed = of_class.iter().filter(|p| p.label == 0).count();
            assert_eq!(entailed, 100);
            assert!(of_class.iter().all(|p| validate_probe(p).unwrap()), "{class}");
        }
    }
}

#[test]
fn generators_are_pure() {
    let cfg = StructuredConfig {
        rule: Rule::Rotate,
        source_train: 40,
        target_train: 40,
        ..StructuredConfig::default()
    };
    assert_eq!(gen_structured_tasks(9, &cfg).unwrap(), gen_structured_tasks(9, &cfg).unwrap());
    assert_ne!(
        gen_structured_tasks(9, &cfg).unwrap().source.train,
        gen_structured_tasks(10, &cfg).unwrap().source.train
    );
    let spec = ProbeSpec::default();
    assert_eq!(gen_heuristic_probes(&spec, 1).unwrap(), gen_heuristic_probes(&spec, 1).unwrap());
}

proptest! {
    #[test]
    fn detokenize_inverts_tokenize(words in prop::collection::vec("[A-Za-z]{1,6}", 0..12)) {
        let mut vocab = Vocab::new();
        for w in &words {
            vocab.add(w);
        }
        let text = words.join(" ");
        prop_assert_eq!(detokenize(&tokenize(&text, &vocab), &vocab), text.to_lowercase());
    }

    #[test]
    fn vocab_is_a_bijection(words in prop::collection::vec("[a-z]{1,5}", 0..30)) {
        let mut vocab = Vocab::new();
        for w in &words {
            vocab.add(w);
        }
        for id in 0..vocab.len() {
            let tok = vocab.token(id).unwrap();
            prop_assert_eq!(vocab.id(tok), Some(id));
        }
        prop_assert_eq!(Vocab::parse(&vocab.as_text()).unwrap(), vocab);
    }
}
