use hvslu::autodiff::{out_dim, Tape, Tensor};
use hvslu::codec::OutputAlphabet;
use hvslu::corpus::{generate_corpus, Corpus, CorpusConfig, Split};
use hvslu::ctc::{ctc_loss_var, required_frames};
use hvslu::history::{
    corpus_vocab, Extractor, ExtractorConfig, ExtractorKind, HVector, PromptBagPredictor, HVECTOR_DIM,
};
use hvslu::layers::{BatchNormMode, CellKind};
use hvslu::slu::{
    evaluate_split, prepare_split, start_model, train_model, transfer_swap_softmax, HInput, HSource, ModelConfig,
    Phase, Preset, SignalToConceptModel, SluError, TrainConfig, Utterance,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn alphabet(n_graphemes: usize) -> OutputAlphabet {
    let g: Vec<char> = ('a'..='z').take(n_graphemes).collect();
    OutputAlphabet::asr(&g).unwrap()
}

fn random_features(rng: &mut ChaCha8Rng, freq: usize, time: usize) -> Tensor<f64> {
    Tensor::new(vec![freq, time], (0..freq * time).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_h(rng: &mut ChaCha8Rng) -> HVector {
    HVector::new((0..98).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![0.2, 0.0]).unwrap()
}

/// Layer-by-layer parameter sum, written out independently of the model.
fn desk_param_oracle(alpha: usize, injection: bool) -> usize {
    let conv = 4 * 5 * 5 + 4;
    let feat = 4 * 8 + if injection { 100 } else { 0 };
    let lstm = |i: usize, h: usize| 4 * h * i + 4 * h * h + 4 * h;
    let rnn = 2 * lstm(feat, 48) + 2 * lstm(96, 48);
    conv + rnn + 96 * alpha + alpha
}

#[test]
fn desk_parameter_count_matches_oracle() {
    let g: Vec<char> = ('a'..='z').collect();
    let a = OutputAlphabet::slu(&g, &["hotel".to_string()]).unwrap();
    assert_eq!(a.len(), 30);
    let off = SignalToConceptModel::<f64>::assemble(Preset::Desk, a.clone(), false);
    assert_eq!(off.param_count(), desk_param_oracle(30, false));
    assert_eq!(off.param_count(), off.config().param_count(30));
    let on = SignalToConceptModel::<f64>::assemble(Preset::Desk, a, true);
    assert_eq!(on.param_count(), desk_param_oracle(30, true));
    // Per direction, the first layer gains hvec_dim input rows of 4H.
    assert_eq!(on.param_count() - off.param_count(), 2 * 100 * 4 * 48);
    println!("desk params: {} (injection off), {} (on)", off.param_count(), on.param_count());
}

#[test]
fn paper_preset_shapes() {
    let cfg = ModelConfig::paper();
    assert_eq!((cfg.layers, cfg.hidden, cfg.cell, cfg.batch_norm), (5, 800, CellKind::Lstm, true));
    let g = cfg.convs[0].geometry;
    let t1 = out_dim(100, g.kernel.1, g.stride.1, g.padding.1).unwrap();
    let t2 = out_dim(t1, g.kernel.1, g.stride.1, g.padding.1).unwrap();
    assert_eq!((t1, t2), (50, 25));
    assert_eq!(cfg.conv_output(100).unwrap().2, 25);
    println!("paper preset params: {}", cfg.param_count(alphabet(26).len()));
}

#[test]
fn paper_preset_runs_forward() {
    let mut cfg = ModelConfig::paper();
    cfg.hidden = 8;
    cfg.layers = 3;
    let m = SignalToConceptModel::<f64>::new(cfg.clone(), alphabet(5));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_features(&mut rng, cfg.feature_dim, 12);
    let lp = m.log_probs(&x, HInput::Vector(&HVector::zero(100))).unwrap();
    assert_eq!(lp.shape(), &[3, 7]);
}

#[test]
fn log_prob_rows_normalize_and_lengths_follow_strides() {
    let m = SignalToConceptModel::<f64>::assemble(Preset::Desk, alphabet(6), true);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = random_h(&mut rng);
    for t in [1, 2, 7, 14, 33] {
        let lp = m.log_probs(&random_features(&mut rng, 16, t), HInput::Vector(&h)).unwrap();
        let a = m.alphabet.len();
        assert_eq!(lp.shape(), &[(t + 4 - 5) / 2 + 1, a]);
        for row in lp.values().chunks(a) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn injection_errors() {
    let m = SignalToConceptModel::<f64>::assemble(Preset::Desk, alphabet(4), true);
    let x = Tensor::zeros(&[16, 10]);
    assert!(matches!(
        m.log_probs(&x, HInput::Vector(&HVector::zero(50))),
        Err(SluError::HDimMismatch { expected: 100, got: 50 })
    ));
    assert!(matches!(m.log_probs(&x, HInput::Off), Err(SluError::InjectionMismatch(..))));
    assert!(matches!(m.log_probs(&Tensor::zeros(&[15, 10]), HInput::Off), Err(SluError::FeatureDim { .. })));
    let off = SignalToConceptModel::<f64>::assemble(Preset::Desk, alphabet(4), false);
    assert!(matches!(off.log_probs(&x, HInput::Vector(&HVector::zero(100))), Err(SluError::InjectionMismatch(..))));
}

#[test]
fn zeroed_h_columns_equal_injection_off() {
    let a = alphabet(8);
    let mut on = SignalToConceptModel::<f64>::assemble(Preset::Desk, a.clone(), true);
    let mut off = SignalToConceptModel::<f64>::assemble(Preset::Desk, a, false);
    let feat = on.config().conv_features();
    let h4 = 4 * on.config().hidden;
    // Surgery: zero the h rows of the first layer, copy everything else.
    for id in on.rnn_input_weights() {
        let w = on.params.get_mut(id).values_mut();
        w[feat * h4..].iter_mut().for_each(|v| *v = 0.0);
    }
    for (name, t) in on.params.iter() {
        let id = off.params.find(name).unwrap();
        let dst = off.params.get_mut(id).values_mut();
        let n = dst.len();
        dst.copy_from_slice(&t.values()[..n]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in [3, 11, 20] {
        let x = random_features(&mut rng, 16, t);
        let h = random_h(&mut rng);
        let a = on.log_probs(&x, HInput::Vector(&h)).unwrap();
        let b = off.log_probs(&x, HInput::Off).unwrap();
        let bits = |t: &Tensor<f64>| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

fn tiny_corpus() -> Corpus {
    let mut cfg = CorpusConfig::default();
    cfg.generator.n_dialogs = 10;
    generate_corpus(&cfg).unwrap()
}

fn trained_bag(corpus: &Corpus) -> PromptBagPredictor<f64> {
    let cfg = ExtractorConfig {
        epochs: 2,
        ..ExtractorConfig::default()
    };
    let mut m = PromptBagPredictor::new(ExtractorKind::SupervisedAll, corpus_vocab(corpus), corpus.inventory(), cfg);
    let ex = m.examples(corpus, Split::Train).unwrap();
    m.train(&ex, &[]).unwrap();
    m
}

fn feasible_with_concepts(utts: Vec<Utterance<f64>>, cfg: &ModelConfig) -> Utterance<f64> {
    utts.into_iter()
        .find(|u| {
            !u.reference.concepts().is_empty()
                && cfg.conv_output(u.frames()).unwrap().2 >= required_frames(&u.labels) + 2
        })
        .expect("a feasible utterance")
}

#[test]
fn joint_flag_controls_extractor_gradient() {
    let corpus = tiny_corpus();
    let bag = trained_bag(&corpus);
    let alpha = corpus.alphabet().unwrap();
    let mut model = SignalToConceptModel::<f64>::new(ModelConfig::desk(), alpha.clone());
    let u = feasible_with_concepts(prepare_split(&corpus, Split::Train, &alpha).unwrap(), model.config());
    let ext = Extractor::Bag(bag);
    let proj = ext.params().find("proj.weight").unwrap();

    let loss_and_grad = |model: &mut SignalToConceptModel<f64>, ext: &Extractor<f64>, joint: bool| {
        let mut tape = Tape::new();
        let bd = model.params.bind(&mut tape).unwrap();
        let eb = ext.params().bind(&mut tape).unwrap();
        let hv = ext.hvector_var(&mut tape, &eb, &u.prompt, u.turn).unwrap();
        let constant = ext.extract(&u.prompt, u.turn).unwrap();
        let h = if joint { HInput::Var(hv) } else { HInput::Vector(&constant) };
        let lp = model.forward(&mut tape, &bd, &u.features, h, BatchNormMode::Train).unwrap();
        let loss = ctc_loss_var(&mut tape, lp, &u.labels, 0).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(eb.vars()[proj.index()]).map(<[f64]>::to_vec);
        (tape.value(loss)[0], g)
    };
    let (l_const, g_const) = loss_and_grad(&mut model, &ext, false);
    assert!(g_const.is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    let (l_joint, g_joint) = loss_and_grad(&mut model, &ext, true);
    assert_eq!(l_const, l_joint);
    let g = g_joint.unwrap();
    // Central differences on a few extractor weights.
    let eps = 1e-6;
    for k in [0, 17, 500] {
        let mut e = ext.clone();
        let mut fd = [0.0; 2];
        for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
            e.params_mut().get_mut(proj).values_mut()[k] = ext.params().get(proj).values()[k] + sign * eps;
            fd[s] = loss_and_grad(&mut model, &e, true).0;
        }
        let num = (fd[0] - fd[1]) / (2.0 * eps);
        assert!((num - g[k]).abs() <= 1e-5 * num.abs().max(1e-3), "{num} vs {}", g[k]);
    }
}

#[test]
fn training_updates_extractor_only_when_joint() {
    let corpus = tiny_corpus();
    let alpha = corpus.alphabet().unwrap();
    let train = prepare_split(&corpus, Split::Train, &alpha).unwrap();
    let dev = prepare_split(&corpus, Split::Dev, &alpha).unwrap();
    let ext = Extractor::Bag(trained_bag(&corpus));
    let mut cfg = TrainConfig::new(Phase::Direct, 1);
    cfg.epochs = 1;
    for joint in [false, true] {
        let mut h = HSource::Extractor {
            extractor: ext.clone(),
            joint,
        };
        let mut m = SignalToConceptModel::new(ModelConfig::desk(), alpha.clone());
        train_model(&mut m, &train[..8], &dev, &mut h, &cfg).unwrap();
        let HSource::Extractor { extractor, .. } = h else { unreachable!() };
        let same = extractor.to_checkpoint().to_bytes() == ext.to_checkpoint().to_bytes();
        assert_eq!(same, !joint);
    }
}

#[test]
fn memorizes_one_utterance() {
    let corpus = tiny_corpus();
    let alpha = corpus.alphabet().unwrap();
    let cfg = ModelConfig::desk();
    let u = feasible_with_concepts(prepare_split(&corpus, Split::Train, &alpha).unwrap(), &cfg);
    let mut m = SignalToConceptModel::new(cfg, alpha);
    let mut tc = TrainConfig::new(Phase::Direct, 1);
    tc.epochs = 200;
    // Pilot (seed 1): loss drops below 0.1 at epoch 92 with this rate.
    tc.optim.learning_rate = 1e-2;
    let one = vec![u.clone()];
    let report = train_model(&mut m, &one, &one, &mut HSource::Zero, &tc).unwrap();
    let hit = report.log.iter().find(|e| e.train_loss.is_some_and(|l| l < 0.1));
    assert!(hit.is_some(), "final loss {:?}", report.last());
    println!("loss < 0.1 at epoch {}", hit.unwrap().epoch);
    let d = m.decode(&u.features, HInput::Vector(&HVector::zero(HVECTOR_DIM))).unwrap();
    assert_eq!(d.text, u.reference.plain_text());
    assert_eq!(d.concepts, u.reference.concept_pairs());
}

#[test]
fn untrained_model_decodes() {
    let corpus = tiny_corpus();
    let alpha = corpus.alphabet().unwrap();
    let m = SignalToConceptModel::<f64>::new(ModelConfig::desk(), alpha.clone());
    for u in prepare_split(&corpus, Split::Dev, &alpha).unwrap() {
        let h = HVector::zero(HVECTOR_DIM);
        assert_eq!(m.decode(&u.features, HInput::Vector(&h)).unwrap(), m.decode(&u.features, HInput::Vector(&h)).unwrap());
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cfg = ModelConfig::desk();
    cfg.batch_norm = true;
    cfg.seed = 11;
    let corpus = tiny_corpus();
    let m = SignalToConceptModel::<f64>::new(cfg, corpus.alphabet().unwrap());
    let c = m.to_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    c.save(&path).unwrap();
    let back = SignalToConceptModel::<f64>::from_checkpoint(&hvslu::checkpoint::Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back.to_checkpoint().to_bytes(), c.to_bytes());
    let x = random_features(&mut rng, 16, 19);
    let h = random_h(&mut rng);
    let a = m.log_probs(&x, HInput::Vector(&h)).unwrap();
    let b = back.log_probs(&x, HInput::Vector(&h)).unwrap();
    assert!(a.values().iter().zip(b.values()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn training_is_deterministic() {
    let corpus = tiny_corpus();
    let alpha = corpus.alphabet().unwrap();
    let train = prepare_split::<f64>(&corpus, Split::Train, &alpha).unwrap();
    let dev = prepare_split(&corpus, Split::Dev, &alpha).unwrap();
    let mut tc = TrainConfig::new(Phase::Direct, 4);
    tc.epochs = 2;
    let run = || {
        let mut m = SignalToConceptModel::new(ModelConfig::desk(), alpha.clone());
        let r = train_model(&mut m, &train, &dev, &mut HSource::Zero, &tc).unwrap();
        (r, m.to_checkpoint().to_bytes())
    };
    assert_eq!(run(), run());
}

fn tagged(c: &mut hvslu::checkpoint::Checkpoint, phase: Phase) -> hvslu::checkpoint::Checkpoint {
    c.set("phase", phase);
    c.clone()
}

#[test]
fn finetune_from_zero_pretrain_is_continuous() {
    let corpus = tiny_corpus();
    let alpha = corpus.alphabet().unwrap();
    let train = prepare_split(&corpus, Split::Train, &alpha).unwrap();
    let dev = prepare_split(&corpus, Split::Dev, &alpha).unwrap();
    let cfg = ModelConfig::desk();
    let mut pre = start_model::<f64>(Phase::PretrainZero, &cfg, &alpha, None).unwrap();
    let mut tc = TrainConfig::new(Phase::PretrainZero, 1);
    tc.epochs = 2;
    let r1 = train_model(&mut pre, &train, &dev, &mut HSource::Zero, &tc).unwrap();
    let ckpt = tagged(&mut pre.to_checkpoint(), Phase::PretrainZero);
    let mut fine = start_model::<f64>(Phase::Finetune, &cfg, &alpha, Some(&ckpt)).unwrap();
    tc.phase = Phase::Finetune;
    tc.epochs = 1;
    let r2 = train_model(&mut fine, &train, &dev, &mut HSource::Zero, &tc).unwrap();
    assert_eq!(r2.log[0].dev_loss.to_bits(), r1.last().dev_loss.to_bits());
}

#[test]
fn phase_sources_are_validated() {
    let corpus = tiny_corpus();
    let alpha = corpus.alphabet().unwrap();
    let cfg = ModelConfig::desk();
    assert!(start_model::<f64>(Phase::Finetune, &cfg, &alpha, None).is_err());
    let asr = start_model::<f64>(Phase::TransferAsr, &cfg, &alpha, None).unwrap();
    assert_eq!(asr.alphabet, alpha.to_asr());
    let asr_ckpt = tagged(&mut asr.to_checkpoint(), Phase::TransferAsr);
    assert!(start_model::<f64>(Phase::Finetune, &cfg, &alpha, Some(&asr_ckpt)).is_err());
    assert!(start_model::<f64>(Phase::Direct, &cfg, &alpha, Some(&asr_ckpt)).is_err());
    let mut other = cfg.clone();
    other.hidden = 16;
    assert!(start_model::<f64>(Phase::TransferSf, &other, &alpha, Some(&asr_ckpt)).is_err());
    assert!(start_model::<f64>(Phase::TransferSf, &cfg, &alpha, Some(&asr_ckpt)).is_ok());
    let train = prepare_split(&corpus, Split::Train, &alpha).unwrap();
    let mut h = HSource::Extractor {
        extractor: Extractor::Bag(trained_bag(&corpus)),
        joint: false,
    };
    let mut m = asr.clone();
    let err = train_model(&mut m, &train, &train, &mut h, &TrainConfig::new(Phase::TransferAsr, 1));
    assert!(matches!(err, Err(SluError::Schedule(_))));
}

#[test]
fn transfer_swap_copies_shared_parameters() {
    let corpus = tiny_corpus();
    let sf = corpus.alphabet().unwrap();
    let asr = SignalToConceptModel::<f64>::new(ModelConfig::desk(), sf.to_asr());
    let m = transfer_swap_softmax(&asr, sf.clone(), 3).unwrap();
    let (ow, ob) = m.output_layer();
    for (name, t) in asr.params.iter() {
        let id = m.params.find(name).unwrap();
        let bytes = |v: &[f64]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
        if id == ow {
            let (a_old, a_new) = (asr.alphabet.len(), sf.len());
            for r in 0..t.shape()[0] {
                assert_eq!(
                    bytes(&m.params.get(id).values()[r * a_new..r * a_new + a_old]),
                    bytes(&t.values()[r * a_old..(r + 1) * a_old])
                );
            }
        } else if id == ob {
            assert_eq!(bytes(&m.params.get(id).values()[..asr.alphabet.len()]), bytes(t.values()));
        } else {
            assert_eq!(bytes(m.params.get(id).values()), bytes(t.values()));
        }
    }
    assert!(matches!(transfer_swap_softmax(&asr, alphabet(3), 1), Err(SluError::NotPrefix { .. })));
}

#[test]
fn evaluation_reports_concept_rates() {
    let corpus = tiny_corpus();
    let alpha = corpus.alphabet().unwrap();
    let dev = prepare_split(&corpus, Split::Dev, &alpha).unwrap();
    let m = SignalToConceptModel::<f64>::new(ModelConfig::desk(), alpha);
    let ev = evaluate_split(&m, &dev, &HSource::Zero).unwrap();
    assert_eq!(ev.hypotheses.len(), dev.len());
    assert!(ev.cver >= ev.cer);
}
