//! Corpus loading (character- and word-level text, JSON-lines piano rolls)
//! and truncated-subsequence iteration with hidden-state carry flags.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Frame;

/// Number of piano keys, MIDI 21 through 108.
pub const PIANO_KEYS: usize = 88;
pub const UNKNOWN_WORD: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextLevel {
    Char,
    Word,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    level: TextLevel,
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    unknown: Option<usize>,
}

impl Vocabulary {
    /// Indices are assigned in order of first occurrence. Word vocabularies
    /// get an unknown-word entry (appended unless the text already has one).
    pub fn build(text: &str, level: TextLevel) -> Result<Self> {
        let mut vocab = Vocabulary {
            level,
            symbols: Vec::new(),
            index: HashMap::new(),
            unknown: None,
        };
        for tok in tokens(text, level) {
            if !vocab.index.contains_key(tok) {
                vocab.index.insert(tok.to_string(), vocab.symbols.len());
                vocab.symbols.push(tok.to_string());
            }
        }
        if vocab.symbols.is_empty() {
            return Err(Error::config("empty corpus"));
        }
        if level == TextLevel::Word {
            let unk = match vocab.index.get(UNKNOWN_WORD) {
                Some(&i) => i,
                None => {
                    vocab.index.insert(UNKNOWN_WORD.to_string(), vocab.symbols.len());
                    vocab.symbols.push(UNKNOWN_WORD.to_string());
                    vocab.symbols.len() - 1
                }
            };
            vocab.unknown = Some(unk);
        }
        Ok(vocab)
    }

    /// Rebuilds a vocabulary from its symbol list (checkpoint loading).
    pub fn from_symbols(level: TextLevel, symbols: Vec<String>, unknown: Option<usize>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        if unknown.is_some_and(|u| u >= symbols.len()) {
            return Err(Error::config("unknown-word index out of range"));
        }
        Ok(Vocabulary {
            level,
            symbols,
            index,
            unknown,
        })
    }

    pub fn level(&self) -> TextLevel {
        self.level
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn unknown_index(&self) -> Option<usize> {
        self.unknown
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, i: usize) -> Option<&str> {
        self.symbols.get(i).map(String::as_str)
    }

    /// Unknown words map to the unknown index; an unknown character is an
    /// error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        tokens(text, self.level)
            .map(|tok| {
                self.index
                    .get(tok)
                    .copied()
                    .or(self.unknown)
                    .ok_or_else(|| Error::config(format!("symbol {tok:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> String {
        let parts = indices.iter().map(|&i| self.symbols.get(i).map_or("?", String::as_str));
        match self.level {
            TextLevel::Char => parts.collect(),
            TextLevel::Word => parts.collect::<Vec<_>>().join(" "),
        }
    }
}

fn tokens(text: &str, level: TextLevel) -> Box<dyn Iterator<Item = &str> + '_> {
    match level {
        TextLevel::Char => Box::new(text.char_indices().map(move |(i, c)| &text[i..i + c.len_utf8()])),
        TextLevel::Word => Box::new(text.split_whitespace()),
    }
}

pub type SymbolSequence = Vec<usize>;

pub fn symbol_frames(seq: &[usize]) -> Vec<Frame> {
    seq.iter().map(|&s| Frame::Symbol(s)).collect()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Single file: the vocabulary comes from this text.
pub fn load_text(path: &Path, level: TextLevel) -> Result<(SymbolSequence, Vocabulary)> {
    let text = read(path)?;
    let vocab = Vocabulary::build(&text, level)?;
    let seq = vocab.encode(&text)?;
    Ok((seq, vocab))
}

#[derive(Clone, Debug)]
pub struct TextCorpus {
    pub vocab: Vocabulary,
    pub train: SymbolSequence,
    pub valid: SymbolSequence,
    pub test: SymbolSequence,
}

impl TextCorpus {
    /// Builds the vocabulary from `train` only.
    pub fn from_texts(train: &str, valid: &str, test: &str, level: TextLevel) -> Result<Self> {
        let vocab = Vocabulary::build(train, level)?;
        Ok(TextCorpus {
            train: vocab.encode(train)?,
            valid: vocab.encode(valid)?,
            test: vocab.encode(test)?,
            vocab,
        })
    }
}

pub fn load_text_splits(train: &Path, valid: &Path, test: Option<&Path>, level: TextLevel) -> Result<TextCorpus> {
    let train_text = read(train)?;
    let valid_text = read(valid)?;
    let test_text = test.map(read).transpose()?.unwrap_or_default();
    TextCorpus::from_texts(&train_text, &valid_text, &test_text, level)
}

/// A song as a sequence of 88-key frames, each stored by its active keys
/// (ascending, no duplicates).
#[derive(Clone, Debug, PartialEq)]
pub struct PianoRollSequence {
    frames: Vec<Vec<usize>>,
}

impl PianoRollSequence {
    pub fn new(frames: Vec<Vec<usize>>) -> Result<Self> {
        let mut out = Vec::with_capacity(frames.len());
        for mut f in frames {
            if let Some(&k) = f.iter().find(|&&k| k >= PIANO_KEYS) {
                return Err(Error::config(format!("pitch index {k} outside 0..{PIANO_KEYS}")));
            }
            f.sort_unstable();
            f.dedup();
            out.push(f);
        }
        Ok(PianoRollSequence { frames: out })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn active(&self, t: usize) -> &[usize] {
        &self.frames[t]
    }

    /// Binary 88-dim vector of frame `t`.
    pub fn dense(&self, t: usize) -> Vec<f64> {
        let mut v = vec![0.0; PIANO_KEYS];
        self.frames[t].iter().for_each(|&k| v[k] = 1.0);
        v
    }

    pub fn to_frames(&self) -> Vec<Frame> {
        self.frames.iter().map(|f| Frame::MultiHot(f.clone())).collect()
    }
}

/// JSON lines: one song per line, each an array of frames, each frame an
/// array of active pitch indices in `0..88`. Blank lines are skipped.
pub fn parse_pianoroll(text: &str, path: &Path) -> Result<Vec<PianoRollSequence>> {
    let mut songs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let raw: Vec<Vec<i64>> = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if raw.len() < 2 {
            return Err(err(format!(
                "song has {} frame(s); at least 2 are needed for a prediction step",
                raw.len()
            )));
        }
        let mut frames = Vec::with_capacity(raw.len());
        for f in raw {
            let mut keys = Vec::with_capacity(f.len());
            for k in f {
                if !(0..PIANO_KEYS as i64).contains(&k) {
                    return Err(err(format!("pitch index {k} outside 0..{PIANO_KEYS}")));
                }
                keys.push(k as usize);
            }
            frames.push(keys);
        }
        songs.push(PianoRollSequence::new(frames).map_err(|e| err(e.to_string()))?);
    }
    Ok(songs)
}

pub fn load_pianoroll(path: &Path) -> Result<Vec<PianoRollSequence>> {
    parse_pianoroll(&read(path)?, path)
}

/// One training or evaluation chunk. `targets[i]` is the frame after
/// `inputs[i]` in the underlying sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubseqChunk<'a> {
    pub sequence: usize,
    pub inputs: &'a [Frame],
    pub targets: &'a [Frame],
    /// False at the start of a sequence: the hidden state must be reset.
    pub carry_state: bool,
}

impl SubseqChunk<'_> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Cuts each sequence into consecutive chunks of at most `max_len`
/// prediction steps.
pub struct Subsequences<'a> {
    seqs: &'a [Vec<Frame>],
    max_len: usize,
    seq: usize,
    pos: usize,
}

impl<'a> Iterator for Subsequences<'a> {
    type Item = SubseqChunk<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let frames = self.seqs.get(self.seq)?;
            let steps = frames.len().saturating_sub(1);
            if self.pos < steps {
                let end = (self.pos + self.max_len).min(steps);
                let chunk = SubseqChunk {
                    sequence: self.seq,
                    inputs: &frames[self.pos..end],
                    targets: &frames[self.pos + 1..end + 1],
                    carry_state: self.pos > 0,
                };
                self.pos = end;
                return Some(chunk);
            }
            self.seq += 1;
            self.pos = 0;
        }
    }
}

pub fn iter_subsequences(seqs: &[Vec<Frame>], max_len: usize) -> Subsequences<'_> {
    assert!(max_len >= 1, "subsequence length must be at least 1");
    Subsequences {
        seqs,
        max_len,
        seq: 0,
        pos: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn char_vocab_by_first_occurrence() {
        let v = Vocabulary::build("abab", TextLevel::Char).unwrap();
        assert_eq!(v.size(), 2);
        assert_eq!(v.encode("abab").unwrap(), vec![0, 1, 0, 1]);
        assert!(v.encode("abc").is_err());
    }

    #[test]
    fn word_vocab_with_unknown() {
        let v = Vocabulary::build("the cat the", TextLevel::Word).unwrap();
        assert_eq!(v.index_of("the"), Some(0));
        assert_eq!(v.index_of("cat"), Some(1));
        assert_eq!(v.size(), 3);
        assert_eq!(v.encode("the cat the").unwrap(), vec![0, 1, 0]);
        assert_eq!(v.encode("the dog").unwrap(), vec![0, 2]);
        assert_eq!(v.decode(&[0, 1]), "the cat");
    }

    #[test]
    fn word_vocab_reuses_existing_unknown_token() {
        let v = Vocabulary::build("a <unk> b", TextLevel::Word).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(v.unknown_index(), Some(1));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(Vocabulary::build("", TextLevel::Char), Err(Error::Config(_))));
        assert!(matches!(Vocabulary::build("  \n", TextLevel::Word), Err(Error::Config(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_text(Path::new("/nonexistent/corpus.txt"), TextLevel::Char).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/corpus.txt"));
    }

    #[test]
    fn pianoroll_expansion() {
        let songs = parse_pianoroll("[[60],[60,64]]\n", Path::new("x.jsonl")).unwrap();
        assert_eq!(songs.len(), 1);
        assert_eq!(songs[0].len(), 2);
        let f0 = songs[0].dense(0);
        assert_eq!(f0.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(f0[60], 1.0);
    }

    #[test]
    fn pianoroll_errors_carry_line_numbers() {
        let err = parse_pianoroll("[[1],[2]]\n[]\n", Path::new("s.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_pianoroll("[[1],[88]]\n", Path::new("s.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = parse_pianoroll("\n[[1],[2]\n", Path::new("s.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn chunking_arithmetic() {
        let song: Vec<Frame> = (0..5).map(Frame::Symbol).collect();
        let seqs = vec![song];
        let chunks: Vec<_> = iter_subsequences(&seqs, 2).collect();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].len(), 2);
        assert_eq!(chunks[1].len(), 2);
        assert!(!chunks[0].carry_state);
        assert!(chunks[1].carry_state);
        assert_eq!(chunks[1].inputs, &[Frame::Symbol(2), Frame::Symbol(3)]);
        assert_eq!(chunks[1].targets, &[Frame::Symbol(3), Frame::Symbol(4)]);
    }

    #[test]
    fn each_song_starts_fresh() {
        let seqs = vec![symbol_frames(&[0, 1, 2, 3]), symbol_frames(&[1]), symbol_frames(&[3, 2, 1])];
        let chunks: Vec<_> = iter_subsequences(&seqs, 2).collect();
        let starts: Vec<(usize, bool)> = chunks.iter().map(|c| (c.sequence, c.carry_state)).collect();
        assert_eq!(starts, vec![(0, false), (0, true), (2, false)]);
    }

    proptest! {
        #[test]
        fn text_round_trip(s in "[a-z ]{1,60}") {
            let v = Vocabulary::build(&s, TextLevel::Char).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&s).unwrap()), s);
        }

        #[test]
        fn pianoroll_round_trip(song in prop::collection::vec(prop::collection::btree_set(0usize..88, 0..6), 2..12)) {
            let arrays: Vec<Vec<usize>> = song.iter().map(|s| s.iter().copied().collect()).collect();
            let line = serde_json::to_string(&arrays).unwrap();
            let parsed = parse_pianoroll(&line, Path::new("p")).unwrap();
            let back: Vec<Vec<usize>> = (0..parsed[0].len())
                .map(|t| parsed[0].dense(t).iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(i, _)| i).collect())
                .collect();
            prop_assert_eq!(back, arrays);
        }

        #[test]
        fn chunks_cover_every_step(lens in prop::collection::vec(0usize..30, 1..6), max_len in 1usize..9) {
            let seqs: Vec<Vec<Frame>> = lens.iter().map(|&n| (0..n).map(Frame::Symbol).collect()).collect();
            let chunks: Vec<_> = iter_subsequences(&seqs, max_len).collect();
            let total: usize = chunks.iter().map(SubseqChunk::len).sum();
            let want: usize = lens.iter().map(|n| n.saturating_sub(1)).sum();
            prop_assert_eq!(total, want);
            prop_assert!(chunks.iter().all(|c| c.len() <= max_len && !c.is_empty()));
            let fresh: Vec<usize> = chunks.iter().filter(|c| !c.carry_state).map(|c| c.sequence).collect();
            let songs: Vec<usize> = lens.iter().enumerate().filter(|(_, &n)| n >= 2).map(|(i, _)| i).collect();
            prop_assert_eq!(fresh, songs);
        }
    }
}
