//! Tokenizer rules, LSTM recurrence against a hand oracle, and matching pretraining.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdgan_core::nn::ParamStore;
use sdgan_core::synth::{build_dataset, caption_words};
use sdgan_core::text::{
    pretrain_matching, similarity_gap, ImageEncoder, MatchingConfig, MatchingItem, TextEncoder, TextEncoderConfig, Vocabulary, PAD, UNK,
};
use sdgan_core::Error;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn small_encoder(seed: u64, vocab: usize) -> (ParamStore, TextEncoder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = TextEncoderConfig {
        vocab_size: vocab,
        embed_dim: 6,
        hidden: 4,
    };
    let enc = TextEncoder::new(&mut store, cfg, &mut rng).unwrap();
    (store, enc)
}

#[test]
fn tokenize_rules() {
    let v = Vocabulary::from_words(["a red circle"]);
    let ids = v.tokenize("A red circle.").unwrap();
    assert_eq!(ids, vec![v.get("a").unwrap(), v.get("red").unwrap(), v.get("circle").unwrap()]);
    assert_eq!(v.tokenize(""), Err(Error::EmptyText));
    assert_eq!(v.tokenize("?!"), Err(Error::EmptyText));
    let twice = v.tokenize("RED red").unwrap();
    assert_eq!(twice[0], twice[1]);
    assert_eq!(v.tokenize("a green circle").unwrap()[1], UNK);
    assert_eq!(v.unknown_words("a green circle"), vec!["green".to_string()]);
    assert_eq!(v.get("<pad>"), Some(PAD));
}

#[test]
fn single_token_column_equals_sentence() {
    let (store, enc) = small_encoder(0, 5);
    let out = enc.encode(&store, &[3]).unwrap();
    assert_eq!(out.word_feats.shape(), &[8, 1]);
    assert_eq!(out.word_feats.data(), out.sentence_feat.data());
}

#[test]
fn recurrence_matches_hand_computed_steps() {
    let (mut store, enc) = small_encoder(1, 4);
    // zero embeddings and weights leave only the gate biases in play
    for id in [enc.embedding, enc.forward.w_input, enc.forward.w_hidden, enc.backward.w_input, enc.backward.w_hidden] {
        store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }
    let h = 4;
    let (bi, bf, bg, bo) = (0.3f32, -0.2f32, 0.7f32, 1.1f32);
    let bias: Vec<f32> = [bi, bf, bg, bo].iter().flat_map(|&b| std::iter::repeat(b).take(h)).collect();
    store.get_mut(enc.forward.bias).data = bias.clone();
    store.get_mut(enc.backward.bias).data = bias;
    let (bi, bf, bg, bo) = (bi as f64, bf as f64, bg as f64, bo as f64);
    let c1 = sigmoid(bi) * bg.tanh();
    let h1 = sigmoid(bo) * c1.tanh();
    let c2 = sigmoid(bf) * c1 + sigmoid(bi) * bg.tanh();
    let h2 = sigmoid(bo) * c2.tanh();

    let out = enc.encode(&store, &[2, 3]).unwrap();
    let w = out.word_feats.data();
    for k in 0..h {
        // forward half: step 1 then step 2; backward half mirrored
        assert!((w[k * 2] - h1).abs() < 1e-7);
        assert!((w[k * 2 + 1] - h2).abs() < 1e-7);
        assert!((w[(h + k) * 2] - h2).abs() < 1e-7);
        assert!((w[(h + k) * 2 + 1] - h1).abs() < 1e-7);
        assert!((out.sentence_feat.data()[k] - h2).abs() < 1e-7);
        assert!((out.sentence_feat.data()[h + k] - h2).abs() < 1e-7);
    }
}

#[test]
fn encoding_is_deterministic_and_order_sensitive() {
    let (store, enc) = small_encoder(2, 10);
    let a = enc.encode(&store, &[2, 5, 7]).unwrap();
    assert_eq!(a, enc.encode(&store, &[2, 5, 7]).unwrap());
    let r = enc.encode(&store, &[7, 5, 2]).unwrap();
    assert_ne!(a.sentence_feat, r.sentence_feat);
    assert_eq!(a.word_feats.shape(), &[8, 3]);
}

#[test]
fn padding_contributes_no_columns() {
    let (store, enc) = small_encoder(3, 10);
    let padded = enc.encode(&store, &[4, PAD, 6, PAD]).unwrap();
    let clean = enc.encode(&store, &[4, 6]).unwrap();
    assert_eq!(padded, clean);
    assert_eq!(padded.word_feats.shape()[1], 2);
}

#[test]
fn encoder_input_errors() {
    let (store, enc) = small_encoder(4, 10);
    assert!(matches!(enc.encode(&store, &[3, 10]), Err(Error::TokenOutOfRange { index: 10, size: 10 })));
    assert_eq!(enc.encode(&store, &[PAD]), Err(Error::EmptyText));
    assert!(enc.encode(&store, &[3; 33]).is_err());
    assert!(enc.encode(&store, &[3; 32]).is_ok());
}

fn matching_items(scenes: &[sdgan_core::synth::Scene], vocab: &Vocabulary) -> Vec<MatchingItem> {
    scenes
        .iter()
        .flat_map(|s| {
            let img = sdgan_core::synth::render(&s.spec, 32).unwrap();
            s.captions.iter().map(move |c| MatchingItem {
                image: img.clone(),
                tokens: vocab.tokenize(c).unwrap(),
                group: s.id,
            })
        })
        .collect()
}

#[test]
fn matching_pretraining_separates_held_out_pairs() {
    let ds = build_dataset(128, 11, 5).unwrap();
    let vocab = Vocabulary::from_words(caption_words());
    let train = matching_items(&ds.train, &vocab);
    let test = matching_items(&ds.test[..16], &vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let cfg = TextEncoderConfig {
        vocab_size: vocab.len(),
        embed_dim: 32,
        hidden: 32,
    };
    let text = TextEncoder::new(&mut store, cfg, &mut rng).unwrap();
    let image = ImageEncoder::new(&mut store, 32, cfg.feature_dim(), &mut rng).unwrap();

    let (m0, x0) = similarity_gap(&store, &text, &image, &test).unwrap();
    assert!((m0 - x0).abs() < 0.2, "untrained gap {m0} vs {x0}");

    let mcfg = MatchingConfig {
        steps: 150,
        batch_size: 16,
        ..MatchingConfig::default()
    };
    let losses = pretrain_matching(&mut store, &text, &image, &train, mcfg, &mut rng).unwrap();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
    let (m1, x1) = similarity_gap(&store, &text, &image, &test).unwrap();
    assert!(m1 - x1 >= 0.2, "held-out gap {m1} vs {x1}");
}

#[test]
fn matching_rejects_tiny_corpus() {
    let ds = build_dataset(64, 1, 2).unwrap();
    let vocab = Vocabulary::from_words(caption_words());
    let items = matching_items(&ds.train[..4], &vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let cfg = TextEncoderConfig {
        vocab_size: vocab.len(),
        embed_dim: 4,
        hidden: 4,
    };
    let text = TextEncoder::new(&mut store, cfg, &mut rng).unwrap();
    let image = ImageEncoder::new(&mut store, 32, 8, &mut rng).unwrap();
    let r = pretrain_matching(&mut store, &text, &image, &items, MatchingConfig::default(), &mut rng);
    assert!(matches!(r, Err(Error::DatasetTooSmall(_))));
}
