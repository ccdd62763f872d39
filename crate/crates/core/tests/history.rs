use hvslu::codec::BagOfConcepts;
use hvslu::corpus::{generate_corpus, Corpus, CorpusConfig, Split};
use hvslu::history::{
    corpus_vocab, encode_turn_dims, select_freq_concepts, BagExample, Extractor, ExtractorConfig, ExtractorKind,
    HistoryError, PromptAutoencoder, PromptBagPredictor, PromptVocab, HVECTOR_DIM,
};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn names(s: &str) -> Vec<String> {
    words(s)
}

fn small_config(epochs: usize) -> ExtractorConfig {
    ExtractorConfig {
        epochs,
        batch_size: 1,
        ..ExtractorConfig::default()
    }
}

#[test]
fn turn_encoding_examples() {
    assert_eq!(encode_turn_dims(0, 20, 2).unwrap(), vec![0.0, 1.0]);
    assert_eq!(encode_turn_dims(10, 20, 2).unwrap(), vec![0.5, 0.0]);
    assert_eq!(encode_turn_dims(25, 20, 2).unwrap(), vec![1.0, 0.0]);
    assert!(matches!(encode_turn_dims(3, 0, 2), Err(HistoryError::ZeroMaxTurns)));
}

#[test]
fn frequent_concept_selection() {
    let inv = names("a b c d e");
    assert_eq!(select_freq_concepts(&[9, 7, 5, 3, 1], &inv, 4).unwrap(), names("a b c d"));
    // Ties resolve by inventory order.
    assert_eq!(select_freq_concepts(&[1, 4, 4, 4, 0], &inv, 2).unwrap(), names("b c"));
    assert_eq!(select_freq_concepts(&[0, 0, 0, 0, 0], &inv, 5).unwrap(), inv);
    assert!(matches!(
        select_freq_concepts(&[0; 5], &inv, 6),
        Err(HistoryError::TooManyConcepts { k: 6, inventory: 5 })
    ));
}

#[test]
fn vocab_maps_unknown_words() {
    let p = [words("which hotel"), words("and which room")];
    let v = PromptVocab::build(p.iter().map(Vec::as_slice));
    assert_eq!(v.content_words(), 4);
    assert_eq!(v.ids(&words("which sauna")), vec![v.id("which"), 0]);
}

#[test]
fn parameter_counts_match_closed_form() {
    let cfg = ExtractorConfig::default();
    let v = PromptVocab::build([words("a b c").as_slice()]);
    let bag = PromptBagPredictor::<f64>::new(ExtractorKind::SupervisedAll, v.clone(), names("x y z"), cfg.clone());
    assert_eq!(bag.params.count(), PromptBagPredictor::<f64>::param_count(&cfg, v.len(), 3));
    let ae = PromptAutoencoder::<f64>::new(v.clone(), cfg.clone());
    assert_eq!(ae.params.count(), PromptAutoencoder::<f64>::param_count(&cfg, v.len()));
    println!("bag predictor params: {}", bag.params.count());
    println!("autoencoder params: {}", ae.params.count());
}

#[test]
fn memorizes_single_pair() {
    let prompt = words("which hotel and which room");
    let v = PromptVocab::build([prompt.as_slice()]);
    let mut m = PromptBagPredictor::<f64>::new(ExtractorKind::SupervisedAll, v.clone(), names("hotel room pay"), small_config(40));
    let ex = BagExample {
        prompt: v.ids(&prompt),
        turn: 2,
        target: BagOfConcepts {
            bits: vec![true, false, true],
        },
    };
    let train = vec![ex; 4];
    let log = m.train(&train, &[]).unwrap();
    assert_eq!(m.subset_accuracy(&train).unwrap(), 1.0);
    assert!(log.last().unwrap().train_loss < log[0].train_loss);
}

#[test]
fn autoencoder_memorizes_short_prompt() {
    let prompt = words("which hotel please");
    let v = PromptVocab::build([prompt.as_slice()]);
    let mut m = PromptAutoencoder::<f64>::new(v.clone(), small_config(60));
    let ids = vec![v.ids(&prompt); 2];
    m.train(&ids, &[]).unwrap();
    assert_eq!(m.reconstruction_accuracy(&ids).unwrap(), 1.0);
}

#[test]
fn untrained_extractor_refuses() {
    let v = PromptVocab::build([words("a").as_slice()]);
    let m = PromptAutoencoder::<f64>::new(v, ExtractorConfig::default());
    assert!(matches!(m.extract(&words("a"), 0), Err(HistoryError::Untrained)));
}

fn tiny_corpus() -> Corpus {
    let mut cfg = CorpusConfig::default();
    cfg.generator.n_dialogs = 20;
    generate_corpus(&cfg).unwrap()
}

fn trained_bag(corpus: &Corpus, epochs: usize) -> PromptBagPredictor<f64> {
    let cfg = ExtractorConfig {
        epochs,
        ..ExtractorConfig::default()
    };
    let mut m = PromptBagPredictor::new(ExtractorKind::SupervisedAll, corpus_vocab(corpus), corpus.inventory(), cfg);
    let train = m.examples(corpus, Split::Train).unwrap();
    m.train(&train, &[]).unwrap();
    m
}

#[test]
fn extraction_is_deterministic_and_content_sensitive() {
    let corpus = tiny_corpus();
    let m = trained_bag(&corpus, 5);
    let a = words("which hotel");
    let b = words("which payment");
    let ha = m.extract(&a, 3).unwrap();
    assert_eq!(ha.dim(), HVECTOR_DIM);
    assert_eq!(ha, m.extract(&a, 3).unwrap());
    assert_ne!(ha.content(), m.extract(&b, 3).unwrap().content());
    assert_eq!(ha.content(), m.extract(&a, 7).unwrap().content());
    assert_ne!(ha.turn(), m.extract(&a, 7).unwrap().turn());
}

#[test]
fn checkpoint_round_trip_preserves_extraction() {
    let corpus = tiny_corpus();
    let m = Extractor::Bag(trained_bag(&corpus, 2));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hvec.ckpt");
    m.save(&path).unwrap();
    let back = Extractor::<f64>::load(&path).unwrap();
    assert_eq!(back.kind(), ExtractorKind::SupervisedAll);
    let p = words("which hotel and which room");
    assert_eq!(m.extract(&p, 4).unwrap(), back.extract(&p, 4).unwrap());
    assert_eq!(back.to_checkpoint().to_bytes(), m.to_checkpoint().to_bytes());
}

#[test]
fn autoencoder_checkpoint_round_trip() {
    let corpus = tiny_corpus();
    let vocab = corpus_vocab(&corpus);
    let mut ae = PromptAutoencoder::<f64>::new(vocab.clone(), small_config(1));
    let prompts: Vec<Vec<usize>> = corpus.split(Split::Train).map(|r| vocab.ids(&r.system_prompt)).collect();
    ae.train(&prompts[..4], &[]).unwrap();
    let m = Extractor::Autoencoder(ae);
    let back = Extractor::<f64>::from_checkpoint(&m.to_checkpoint()).unwrap();
    assert_eq!(back.kind(), ExtractorKind::Unsupervised);
    let p = words("which hotel");
    assert_eq!(m.extract(&p, 0).unwrap(), back.extract(&p, 0).unwrap());
}

#[test]
fn training_loss_mostly_decreases() {
    let corpus = tiny_corpus();
    let cfg = ExtractorConfig {
        epochs: 10,
        ..ExtractorConfig::default()
    };
    let mut m = PromptBagPredictor::<f64>::new(ExtractorKind::SupervisedAll, corpus_vocab(&corpus), corpus.inventory(), cfg);
    let train = m.examples(&corpus, Split::Train).unwrap();
    let log = m.train(&train, &[]).unwrap();
    let increases = log.windows(2).filter(|w| w[1].train_loss > w[0].train_loss).count();
    assert!(increases <= 1, "{log:?}");
}
