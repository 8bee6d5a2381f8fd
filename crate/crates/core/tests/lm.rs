use coopgen::corpus::{lm_stream, parse_documents, split_corpus, CorpusMode, SplitSizes, Tokenizer, Vocabulary};
use coopgen::desk::generate_desk_corpus;
use coopgen::lm::{train_lm, unigram_perplexity, LanguageModel, LmConfig, LmTrainConfig};

fn config(hidden: usize) -> LmConfig {
    LmConfig {
        embedding_dim: 16,
        hidden_size: hidden,
        num_layers: 2,
        cluster_fractions: vec![0.3, 0.3],
    }
}

#[test]
fn memorizes_a_repeated_sentence() {
    let text = "the quick brown fox jumps over the lazy dog .";
    let vocab = Vocabulary::from_tokens(text.split(' '), 50).unwrap();
    let stream = vocab.encode(&text.split(' ').cycle().take(2000).collect::<Vec<_>>());
    let mut lm = LanguageModel::new(vocab.len(), config(32), 1).unwrap();
    let tc = LmTrainConfig {
        epochs: 15,
        dropout: 0.0,
        bptt: 20,
        batch_size: 4,
        learning_rate: 5.0,
        validation_interval: 1000,
        ..LmTrainConfig::default()
    };
    train_lm(&mut lm, &stream, None, &tc).unwrap();
    let ppl = lm.stream_perplexity(&stream[..400]).unwrap();
    assert!(ppl < 1.05, "perplexity {ppl}");
}

#[test]
fn beats_unigram_on_templated_reviews() {
    let docs = parse_documents(&generate_desk_corpus(150, 9), CorpusMode::Review);
    let split = split_corpus(
        &docs,
        CorpusMode::Review,
        SplitSizes { held_out_fraction: 0.2, test: 10, valid: 10, mixture: 0 },
        4,
    );
    let tok = Tokenizer::default();
    let words: Vec<String> = split.lm_documents.iter().flat_map(|d| tok.tokenize(&d.text)).collect();
    let vocab = Vocabulary::from_tokens(words.iter().map(String::as_str), 500).unwrap();
    let train = lm_stream(&split.lm_documents, &vocab);
    let held: Vec<_> = split.test.iter().chain(&split.valid).flat_map(|e| vocab.encode(&e.continuation)).collect();
    let mut lm = LanguageModel::new(vocab.len(), config(32), 2).unwrap();
    let tc = LmTrainConfig {
        epochs: 6,
        batch_size: 8,
        bptt: 20,
        validation_interval: 1000,
        ..LmTrainConfig::default()
    };
    train_lm(&mut lm, &train, None, &tc).unwrap();
    let ppl = lm.stream_perplexity(&held).unwrap();
    let unigram = unigram_perplexity(&train, &held[1..], vocab.len());
    assert!(ppl < 0.5 * unigram, "lm {ppl} vs unigram {unigram}");
}
