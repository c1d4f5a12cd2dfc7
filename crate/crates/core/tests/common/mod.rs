#![allow(dead_code)]

use retlab::datagen::{generate_corpus, Corpus, CorpusSpec};
use retlab::encoder::EncoderConfig;
use retlab::modality::TaskType;

pub fn small_spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        n_concepts: 40,
        text_vocab: 64,
        image_vocab: 64,
        text_len: 4,
        image_len: 6,
        distractors: 1,
        test_fraction: 0.25,
        seed,
        ..CorpusSpec::default()
    }
}

pub fn small_corpus(seed: u64) -> Corpus {
    generate_corpus(&small_spec(seed)).unwrap()
}

pub fn text_corpus(seed: u64) -> Corpus {
    let spec = CorpusSpec {
        tasks: vec![TaskType::TextToText],
        ..small_spec(seed)
    };
    generate_corpus(&spec).unwrap()
}

pub fn small_model(corpus: &Corpus, layers: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: corpus.spec.vocab_size(),
        d_model: 8,
        n_heads: 2,
        n_layers: layers,
        max_seq: 16,
        k: layers,
    }
}
