use std::path::PathBuf;

use hvslu::codec::{decode_symbols, encode_transcript};
use hvslu::corpus::{
    generate_corpus, load_corpus, power_spectrogram, save_corpus, spectrogram, train_marginals, Corpus,
    CorpusConfig, CorpusError, FeatureSynth, FeatureSynthConfig, GeneratorConfig, Split, Window,
};

fn default_corpus() -> Corpus {
    generate_corpus(&CorpusConfig::default()).unwrap()
}

#[test]
fn default_vocabulary_sizes() {
    let g = GeneratorConfig::default();
    assert_eq!(g.system_vocabulary().len(), 30);
    assert_eq!(g.user_vocabulary().len(), 40);
    assert_eq!(g.inventory().len(), 12);
}

#[test]
fn generation_is_deterministic() {
    let a = default_corpus().to_jsonl();
    let b = default_corpus().to_jsonl();
    assert_eq!(a, b);
    let mut cfg = CorpusConfig::default();
    cfg.generator.seed = 2;
    assert_ne!(generate_corpus(&cfg).unwrap().to_jsonl(), a);
}

#[test]
fn splits_by_dialog() {
    let c = default_corpus();
    let mut split_of = std::collections::HashMap::new();
    for r in &c.records {
        assert_eq!(*split_of.entry(r.dialog_id).or_insert(r.split), r.split);
        assert!(r.turn_index < c.config.generator.max_turns);
        assert!((1..=3).contains(&r.prompted.len()));
    }
    let count = |s| split_of.values().filter(|&&v| v == s).count();
    assert_eq!((count(Split::Train), count(Split::Dev), count(Split::Test)), (140, 20, 40));
}

#[test]
fn turn_indices_are_consecutive() {
    let c = default_corpus();
    for w in c.records.windows(2) {
        if w[0].dialog_id == w[1].dialog_id {
            assert_eq!(w[1].turn_index, w[0].turn_index + 1);
        } else {
            assert_eq!(w[1].turn_index, 0);
        }
    }
}

#[test]
fn full_correlation_always_answers_single_prompt() {
    let mut cfg = CorpusConfig::default();
    cfg.generator.rho = 1.0;
    cfg.generator.max_prompt_concepts = 1;
    cfg.generator.n_dialogs = 60;
    let c = generate_corpus(&cfg).unwrap();
    for r in &c.records {
        assert_eq!(r.prompted.len(), 1);
        assert!(r.user_transcript.tags().contains(&r.prompted[0]));
    }
}

#[test]
fn prompt_answer_correlation_gap() {
    let c = default_corpus();
    let (mut hit_p, mut n_p, mut hit_u, mut n_u) = (0usize, 0usize, 0usize, 0usize);
    for r in c.split(Split::Train) {
        let tags = r.user_transcript.tags();
        for tag in c.inventory() {
            let said = tags.contains(&tag);
            if r.prompted.contains(&tag) {
                n_p += 1;
                hit_p += usize::from(said);
            } else {
                n_u += 1;
                hit_u += usize::from(said);
            }
        }
    }
    let gap = hit_p as f64 / n_p as f64 - hit_u as f64 / n_u as f64;
    assert!(gap >= 0.4, "gap {gap}");
}

#[test]
fn independent_when_uncorrelated() {
    let mut cfg = CorpusConfig::default();
    cfg.generator.rho = 0.0;
    assert_eq!(cfg.generator.inclusion_probability(true), cfg.generator.inclusion_probability(false));
}

#[test]
fn concept_marginals_floor() {
    let c = default_corpus();
    for m in train_marginals(&c.config.generator, &c.records) {
        assert!(m >= 0.01, "{m}");
    }
}

#[test]
fn codec_round_trip_on_every_utterance() {
    let c = default_corpus();
    let alphabet = c.alphabet().unwrap();
    for r in &c.records {
        let t = &r.user_transcript;
        let d = decode_symbols(&alphabet, &encode_transcript(&alphabet, t).unwrap());
        assert_eq!(d.text, t.plain_text());
        assert_eq!(d.concepts, t.concept_pairs());
    }
}

#[test]
fn file_round_trip() {
    let c = default_corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    save_corpus(&c, &path).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), c);
}

#[test]
fn corrupted_line_is_reported() {
    let mut cfg = CorpusConfig::default();
    cfg.generator.n_dialogs = 5;
    let text = generate_corpus(&cfg).unwrap().to_jsonl();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[3] = lines[3].replace("\"split\"", "\"spilt\"");
    let err = Corpus::from_jsonl(&lines.join("\n")).unwrap_err();
    assert!(matches!(err, CorpusError::Malformed { line: 4, .. }), "{err}");
    assert!(err.to_string().starts_with("line 4:"));

    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    rec["user_transcript"] = "<hotel> ritz".into();
    lines[2] = rec.to_string();
    let err = Corpus::from_jsonl(&lines.join("\n")).unwrap_err();
    assert!(matches!(err, CorpusError::Malformed { line: 3, .. }), "{err}");
}

#[test]
fn tampered_config_fails_hash_check() {
    let mut cfg = CorpusConfig::default();
    cfg.generator.n_dialogs = 5;
    let text = generate_corpus(&cfg).unwrap().to_jsonl();
    let tampered = text.replacen("\"rho\":0.8", "\"rho\":0.7", 1);
    assert!(matches!(Corpus::from_jsonl(&tampered), Err(CorpusError::HashMismatch { .. })));
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_corpus.jsonl")
}

fn golden_config() -> CorpusConfig {
    let mut cfg = CorpusConfig::default();
    cfg.generator.n_dialogs = 12;
    cfg.generator.seed = 2024;
    cfg
}

/// Regenerates the committed golden corpus and compares byte-for-byte.
/// Set `HVSLU_BLESS=1` to rewrite the fixture.
#[test]
fn golden_corpus_fixture() {
    let fresh = generate_corpus(&golden_config()).unwrap();
    if std::env::var_os("HVSLU_BLESS").is_some() {
        save_corpus(&fresh, &fixture_path()).unwrap();
    }
    let stored = std::fs::read_to_string(fixture_path()).expect("committed fixture");
    assert_eq!(fresh.to_jsonl(), stored);
    assert_eq!(Corpus::from_jsonl(&stored).unwrap(), fresh);
}

fn synth(cfg: FeatureSynthConfig) -> FeatureSynth {
    FeatureSynth::new(&cfg, &GeneratorConfig::default().grapheme_chars()).unwrap()
}

#[test]
fn noiseless_features_tile_prototypes() {
    let s = synth(FeatureSynthConfig {
        noise_sigma: 0.0,
        min_frames: 3,
        max_frames: 3,
        ..Default::default()
    });
    let f = s.synthesize::<f64>("ab c", 99).unwrap();
    assert_eq!(f.shape(), &[16, 12]);
    for (j, ch) in "ab c".chars().flat_map(|c| [c, c, c]).enumerate() {
        let proto = s.prototype(ch).unwrap();
        for i in 0..16 {
            assert_eq!(f.at2(i, j), proto[i]);
        }
    }
}

#[test]
fn features_are_deterministic_and_seed_dependent() {
    let s = synth(FeatureSynthConfig::default());
    let a = s.synthesize::<f64>("hello world", 5).unwrap();
    assert_eq!(a, s.synthesize::<f64>("hello world", 5).unwrap());
    assert_ne!(a, s.synthesize::<f64>("hello world", 6).unwrap());
    let t = a.shape()[1];
    assert!((22..=44).contains(&t));
    assert!(matches!(s.synthesize::<f64>("caf\u{e9}", 1), Err(CorpusError::UnknownChar('\u{e9}'))));
}

#[test]
fn prototypes_are_separated() {
    let s = synth(FeatureSynthConfig::default());
    let chars: Vec<char> = " abcdefghijklmnopqrstuvwxyz".chars().collect();
    for (i, &a) in chars.iter().enumerate() {
        for &b in &chars[i + 1..] {
            let (p, q) = (s.prototype(a).unwrap(), s.prototype(b).unwrap());
            let d = p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(d >= 0.5, "{a:?} {b:?} {d}");
        }
    }
    // Same seed and symbols in a fresh synthesizer give the same bank.
    assert_eq!(s.prototype('q'), synth(FeatureSynthConfig::default()).prototype('q'));
}

#[test]
fn spectrogram_framing() {
    let rate = 8000;
    for n in [160, 161, 240, 1000, 8000] {
        let s = power_spectrogram(&vec![0.1; n], rate, Window::Hamming).unwrap();
        assert_eq!(s.shape(), &[81, (n - 160) / 80 + 1]);
    }
    assert!(matches!(
        spectrogram(&[0.0; 100], rate, Window::Hamming),
        Err(CorpusError::ShortWaveform { samples: 100, window: 160 })
    ));
}

#[test]
fn silent_waveform_normalizes_to_zero() {
    let s = spectrogram(&vec![0.0; 800], 8000, Window::Hamming).unwrap();
    assert!(s.values().iter().all(|&v| v == 0.0));
}

#[test]
fn sinusoid_energy_lands_in_its_bin() {
    let (rate, n, k) = (8000u32, 160usize, 12usize);
    let freq = k as f64 * rate as f64 / n as f64;
    let wave: Vec<f64> = (0..1600)
        .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
        .collect();
    let rect = power_spectrogram(&wave, rate, Window::Rectangular).unwrap();
    let frames = rect.shape()[1];
    for t in 0..frames {
        let col: Vec<f64> = (0..81).map(|b| rect.at2(b, t)).collect();
        // A full-cycle sine of amplitude 1 puts (N/2)^2 in bin k.
        assert!((col[k] - (n as f64 / 2.0).powi(2)).abs() < 1e-6);
        let leak: f64 = col.iter().enumerate().filter(|&(b, _)| b != k).map(|(_, v)| v).sum();
        assert!(leak < 1e-12 * col[k]);
    }
    let ham = power_spectrogram(&wave, rate, Window::Hamming).unwrap();
    for t in 0..frames {
        let col: Vec<f64> = (0..81).map(|b| ham.at2(b, t)).collect();
        let best = (0..81).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert_eq!(best, k);
    }
}
