mod common;

use std::fs;

use bti::tokenizer::{reconstruct_word, split_words, tokenize, TokenizerOptions, Vocabulary};
use bti::BtiError;
use common::*;
use proptest::prelude::*;

#[test]
fn fixture_vocab_file() {
    let v = vocab();
    assert_eq!(v.len(), 1000);
    assert_eq!(v.token(v.pad_id()), Some("[PAD]"));
    assert_eq!(v.token(v.cls_id()), Some("[CLS]"));
    assert_eq!(v.id("##ing").map(|id| v.token(id)), Some(Some("##ing")));
}

#[test]
fn vocab_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.txt");
    fs::write(&path, "[PAD]\n[UNK]\n[CLS]\nhello\n").unwrap();
    assert!(matches!(Vocabulary::load(&path), Err(BtiError::Vocabulary(_))));
    fs::write(&path, "[PAD]\n[UNK]\n[CLS]\n[SEP]\nhi\nhi\n").unwrap();
    assert!(matches!(Vocabulary::load(&path), Err(BtiError::Vocabulary(_))));
    fs::write(&path, "[PAD]\r\n[UNK]\r\n[CLS]\r\n[SEP]\r\nhi\r\n").unwrap();
    assert_eq!(Vocabulary::load(&path).unwrap().id("hi"), Some(4));
}

#[test]
fn subword_and_unknown_words() {
    let v = vocab();
    let tp = tokenize("Sleeves, Pockets & weddings!", &v, 32, TokenizerOptions::default()).unwrap();
    assert_eq!(tp.words, ["sleeves", ",", "pockets", "&", "weddings", "!"]);
    assert_eq!(tp.tokens, ["sleeve", "##s", ",", "pocket", "##s", "&", "wedding", "##s", "!"]);
    let tp = tokenize("zzz€ dress", &v, 32, TokenizerOptions::default()).unwrap();
    assert_eq!(tp.unk_words, [true, false]);
    assert_eq!(reconstruct_word(&tp, 0), "zzz€");
}

#[test]
fn truncation_drops_whole_words() {
    let v = vocab();
    // "sleeves" needs two tokens and only one slot remains
    let tp = tokenize("red dress sleeves", &v, 5, TokenizerOptions::default()).unwrap();
    assert_eq!(tp.words, ["red", "dress"]);
    assert_eq!(tp.len(), 5);
    assert!(matches!(
        tokenize("sleeves", &v, 3, TokenizerOptions::default()),
        Err(BtiError::NothingFits { max_len: 3 })
    ));
}

proptest! {
    #[test]
    fn spans_tile_the_content(seed in 0u64..1000, n in 1usize..30, max_len in 4usize..40) {
        let v = vocab();
        let text = random_paragraph(&mut rng(seed), &v, n) + " sleeves playing";
        let tp = tokenize(&text, &v, max_len, TokenizerOptions::default()).unwrap();
        let mut next = 1;
        for &(s, e) in &tp.word_spans {
            prop_assert_eq!(s, next);
            prop_assert!(e > s);
            next = e;
        }
        prop_assert_eq!(next, tp.q() + 1);
        prop_assert!(tp.q() + 2 <= max_len);
        let words = split_words(&text, TokenizerOptions::default());
        prop_assert_eq!(&words[..tp.word_count()], &tp.words[..]);
        for k in 0..tp.word_count() {
            prop_assert_eq!(reconstruct_word(&tp, k), tp.words[k].clone());
        }
    }
}
