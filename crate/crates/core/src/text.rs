//! Text pipeline: vocabulary construction, WordPiece-style tokenization,
//! dialog-history assembly with special tokens and segment/position ids,
//! and stochastic token masking.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{NodeId, Tape, TensorError};

/// Continuation prefix carried by sub-word pieces.
pub const CONTINUATION: &str = "##";

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Label value at positions that were not masked.
pub const NO_LABEL: u32 = u32::MAX;

/// Segment ids: caption and history questions share 0, history answers 1,
/// the current question 2, answer tokens 3.
pub const SEG_CONTEXT: u8 = 0;
pub const SEG_HISTORY_ANSWER: u8 = 1;
pub const SEG_QUESTION: u8 = 2;
pub const SEG_ANSWER: u8 = 3;
pub const NUM_SEGMENTS: usize = 4;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocab budget {got} cannot hold {needed} reserved and character tokens")]
    VocabBudgetTooSmall { needed: usize, got: usize },
    #[error("current question has {words} words, exceeding the {max}-word budget")]
    QuestionTooLong { words: usize, max: usize },
    #[error("vocabulary file malformed: {0}")]
    MalformedVocabFile(String),
}

/// Token inventory with dense ids. Reserved tokens occupy ids `0..5`.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds from an ordered token list. The list must start with the
    /// reserved tokens and contain no duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TextError> {
        if tokens.len() < RESERVED.len() {
            return Err(TextError::MalformedVocabFile("missing reserved tokens".into()));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens[i] != *want {
                return Err(TextError::MalformedVocabFile(format!(
                    "expected {want} at id {i}, found {}",
                    tokens[i]
                )));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(TextError::MalformedVocabFile(format!("duplicate token {t}")));
            }
        }
        Ok(Vocab { token_to_id, id_to_token: tokens })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < RESERVED.len()
    }

    /// One token per line, line number = id, reserved tokens first.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<Self, TextError> {
        Self::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }
}

/// Lowercases ASCII and splits into word units: whitespace separates,
/// each ASCII punctuation character becomes its own unit.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

/// Frequency-ranked whole words plus character pieces, so every input is
/// representable with `[UNK]` as the final fallback. Deterministic for a
/// given corpus.
pub fn build_vocab(corpus: &[String], max_size: usize) -> Result<Vocab, TextError> {
    if corpus.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut freq: HashMap<String, u64> = HashMap::new();
    let mut chars: Vec<char> = Vec::new();
    for line in corpus {
        for word in split_words(line) {
            for ch in word.chars() {
                if !chars.contains(&ch) {
                    chars.push(ch);
                }
            }
            *freq.entry(word).or_insert(0) += 1;
        }
    }
    chars.sort_unstable();

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    for &ch in &chars {
        tokens.push(ch.to_string());
        tokens.push(format!("{CONTINUATION}{ch}"));
    }
    if tokens.len() > max_size {
        return Err(TextError::VocabBudgetTooSmall { needed: tokens.len(), got: max_size });
    }

    let mut ranked: Vec<(String, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    for (word, _) in ranked {
        if tokens.len() >= max_size {
            break;
        }
        if word.chars().count() > 1 && !tokens.contains(&word) {
            tokens.push(word);
        }
    }
    Vocab::from_tokens(tokens)
}

/// Greedy longest-match-first WordPiece decomposition of one word unit.
/// Returns `[UNK]` when any residue cannot be matched.
fn wordpiece(word: &str, vocab: &Vocab) -> Vec<u32> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let sub: String = chars[start..end].iter().collect();
            let candidate =
                if start == 0 { sub } else { format!("{CONTINUATION}{sub}") };
            if let Some(id) = vocab.id_of(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => {
                pieces.push(id);
                start = end;
            }
            None => return vec![UNK],
        }
    }
    pieces
}

/// Tokenizes arbitrary text into vocabulary ids. Total: every string maps
/// to some id sequence.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    split_words(text).iter().flat_map(|w| wordpiece(w, vocab)).collect()
}

/// Joins token ids back into surface text, merging continuation pieces.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    let mut out = String::new();
    for &id in ids {
        if Vocab::is_special(id) {
            continue;
        }
        let tok = vocab.token_of(id);
        if let Some(rest) = tok.strip_prefix(CONTINUATION) {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
    }
    out
}

/// Encoder input: ids, segment ids, positions, and attention mask, all of
/// equal length, starting with `[CLS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub positions: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, id: u32, segment: u8) {
        self.ids.push(id);
        self.segments.push(segment);
        self.positions.push(self.positions.len());
        self.attention_mask.push(true);
    }

    fn new() -> Self {
        TokenSequence {
            ids: Vec::new(),
            segments: Vec::new(),
            positions: Vec::new(),
            attention_mask: Vec::new(),
        }
    }
}

/// Lays out `[CLS] C [SEP] (Q A [SEP]) x kept-turns Q_t [SEP]`.
///
/// At most `max_turns` most-recent history turns are kept, and whole turns
/// are dropped oldest-first until caption + history + question fit in
/// `max_words` whitespace words. The caption is tail-trimmed as a last
/// resort; the current question is never cut.
pub fn assemble_dialog_input(
    caption: &str,
    history: &[(String, String)],
    question: &str,
    max_turns: usize,
    max_words: usize,
    vocab: &Vocab,
) -> Result<TokenSequence, TextError> {
    let count = |s: &str| s.split_whitespace().count();
    let q_words = count(question);
    if q_words > max_words {
        return Err(TextError::QuestionTooLong { words: q_words, max: max_words });
    }

    let recent: Vec<&(String, String)> =
        history.iter().rev().take(max_turns).rev().collect();
    let mut kept = recent.as_slice();
    let mut caption_words: Vec<&str> = caption.split_whitespace().collect();
    loop {
        let turn_words: usize =
            kept.iter().map(|(q, a)| count(q) + count(a)).sum();
        let total = caption_words.len() + turn_words + q_words;
        if total <= max_words {
            break;
        }
        if !kept.is_empty() {
            kept = &kept[1..];
        } else {
            caption_words.truncate(max_words - q_words);
            break;
        }
    }

    let mut seq = TokenSequence::new();
    seq.push(CLS, SEG_CONTEXT);
    for id in tokenize(&caption_words.join(" "), vocab) {
        seq.push(id, SEG_CONTEXT);
    }
    seq.push(SEP, SEG_CONTEXT);
    for (q, a) in kept {
        for id in tokenize(q, vocab) {
            seq.push(id, SEG_CONTEXT);
        }
        for id in tokenize(a, vocab) {
            seq.push(id, SEG_HISTORY_ANSWER);
        }
        seq.push(SEP, SEG_HISTORY_ANSWER);
    }
    for id in tokenize(question, vocab) {
        seq.push(id, SEG_QUESTION);
    }
    seq.push(SEP, SEG_QUESTION);
    Ok(seq)
}

/// A candidate answer as its own encoder input: `[CLS] answer [SEP]` with
/// answer segment ids.
pub fn answer_sequence(answer: &str, vocab: &Vocab) -> TokenSequence {
    let mut seq = TokenSequence::new();
    seq.push(CLS, SEG_ANSWER);
    for id in tokenize(answer, vocab) {
        seq.push(id, SEG_ANSWER);
    }
    seq.push(SEP, SEG_ANSWER);
    seq
}

/// Result of stochastic masking: ids with `[MASK]` substituted, original
/// ids as labels at masked positions (`NO_LABEL` elsewhere).
#[derive(Debug, Clone)]
pub struct MaskingOutcome {
    pub masked_ids: Vec<u32>,
    pub labels: Vec<u32>,
    pub mask_positions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskingStyle {
    /// Selected tokens are always replaced by `[MASK]`.
    PureReplace,
    /// BERT-style 80% mask / 10% random token / 10% keep.
    Bert801010,
}

/// Masks each non-special token independently with probability `rate`.
pub fn apply_masking<R: Rng>(seq: &TokenSequence, rate: f64, rng: &mut R) -> MaskingOutcome {
    apply_masking_with_style(seq, rate, MaskingStyle::PureReplace, rng)
}

pub fn apply_masking_with_style<R: Rng>(
    seq: &TokenSequence,
    rate: f64,
    style: MaskingStyle,
    rng: &mut R,
) -> MaskingOutcome {
    assert!(rate > 0.0 && rate < 1.0, "masking rate must lie in (0, 1)");
    let mut masked_ids = seq.ids.clone();
    let mut labels = vec![NO_LABEL; seq.ids.len()];
    let mut mask_positions = Vec::new();
    let vocab_size_hint = seq.ids.iter().copied().max().unwrap_or(0) + 1;
    for (i, &id) in seq.ids.iter().enumerate() {
        if Vocab::is_special(id) {
            continue;
        }
        if rng.gen::<f64>() >= rate {
            continue;
        }
        labels[i] = id;
        mask_positions.push(i);
        match style {
            MaskingStyle::PureReplace => masked_ids[i] = MASK,
            MaskingStyle::Bert801010 => {
                let roll: f64 = rng.gen();
                if roll < 0.8 {
                    masked_ids[i] = MASK;
                } else if roll < 0.9 {
                    masked_ids[i] =
                        rng.gen_range(RESERVED.len() as u32..vocab_size_hint.max(RESERVED.len() as u32 + 1));
                }
            }
        }
    }
    MaskingOutcome { masked_ids, labels, mask_positions }
}

/// Sum of token, segment, and position embedding lookups: `[len, d]`.
pub fn embed_input(
    tape: &mut Tape,
    ids: &[u32],
    segments: &[u8],
    positions: &[usize],
    token_table: NodeId,
    segment_table: NodeId,
    position_table: NodeId,
) -> Result<NodeId, TensorError> {
    let id_idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let seg_idx: Vec<usize> = segments.iter().map(|&s| s as usize).collect();
    let tok = tape.gather_rows(token_table, &id_idx)?;
    let seg = tape.gather_rows(segment_table, &seg_idx)?;
    let pos = tape.gather_rows(position_table, positions)?;
    let sum = tape.add(tok, seg)?;
    tape.add(sum, pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_vocab() -> Vocab {
        build_vocab(
            &[
                "the cat sat on the mat".into(),
                "a cat ran".into(),
                "unable cables".into(),
                "question answer 1 2 3 4 5".into(),
            ],
            256,
        )
        .unwrap()
    }

    #[test]
    fn build_vocab_contains_words_and_reserved() {
        let v = build_vocab(&["a a b".into()], 64).unwrap();
        for tok in RESERVED {
            assert!(v.id_of(tok).is_some());
        }
        assert!(v.id_of("a").is_some());
        assert!(v.id_of("b").is_some());
    }

    #[test]
    fn build_vocab_is_deterministic() {
        let corpus = vec!["z y x w v".to_string(), "w v z".to_string()];
        let a = build_vocab(&corpus, 128).unwrap();
        let b = build_vocab(&corpus, 128).unwrap();
        assert_eq!(a.to_lines(), b.to_lines());
    }

    #[test]
    fn build_vocab_budget_and_empty_errors() {
        assert!(matches!(build_vocab(&[], 100), Err(TextError::EmptyCorpus)));
        assert!(matches!(
            build_vocab(&["abcdefgh".into()], 8),
            Err(TextError::VocabBudgetTooSmall { .. })
        ));
    }

    #[test]
    fn wordpiece_greedy_longest_match() {
        let v = Vocab::from_tokens(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(["un", "##able", "able", "u", "##n"].map(String::from))
                .collect(),
        )
        .unwrap();
        let ids = tokenize("unable", &v);
        assert_eq!(
            ids,
            vec![v.id_of("un").unwrap(), v.id_of("##able").unwrap()],
            "greedy longest-match-first"
        );
    }

    #[test]
    fn whole_word_is_single_id() {
        let v = toy_vocab();
        assert_eq!(tokenize("cat", &v), vec![v.id_of("cat").unwrap()]);
    }

    #[test]
    fn tokenize_round_trips_in_vocab_words() {
        let v = toy_vocab();
        let text = "the cat sat on the mat";
        assert_eq!(detokenize(&tokenize(text, &v), &v), text);
    }

    #[test]
    fn unknown_residue_maps_to_unk() {
        let v = toy_vocab();
        let ids = tokenize("日本語", &v);
        assert_eq!(ids, vec![UNK]);
    }

    #[test]
    fn tokenization_is_total_on_unicode() {
        let v = toy_vocab();
        for text in ["", "  ", "héllo wörld", "a\u{644}b", "!!!", "cat\u{0}dog"] {
            let ids = tokenize(text, &v);
            assert!(ids.iter().all(|&id| (id as usize) < v.len()));
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = toy_vocab();
        let lines = v.to_lines();
        let v2 = Vocab::from_lines(&lines).unwrap();
        assert_eq!(lines, v2.to_lines());
        assert!(Vocab::from_lines("[PAD]\n[UNK]\n").is_err());
    }

    fn hist(n: usize) -> Vec<(String, String)> {
        (1..=n).map(|i| (format!("question {i}"), format!("answer {i}"))).collect()
    }

    #[test]
    fn assemble_keeps_three_most_recent_turns() {
        let v = toy_vocab();
        let seq =
            assemble_dialog_input("a cat", &hist(5), "the mat", 3, 100, &v).unwrap();
        let text = detokenize(&seq.ids, &v);
        assert!(text.contains("question 3") && text.contains("question 5"));
        assert!(!text.contains("question 1") && !text.contains("question 2"));
    }

    #[test]
    fn assemble_empty_history_layout() {
        let v = toy_vocab();
        let seq = assemble_dialog_input("the cat", &[], "sat", 3, 100, &v).unwrap();
        assert_eq!(seq.ids[0], CLS);
        let seps: Vec<usize> =
            seq.ids.iter().enumerate().filter(|(_, &id)| id == SEP).map(|(i, _)| i).collect();
        assert_eq!(seps.len(), 2, "caption SEP and question SEP only");
        assert_eq!(*seq.ids.last().unwrap(), SEP);
        assert_eq!(seq.positions, (0..seq.len()).collect::<Vec<_>>());
    }

    #[test]
    fn assemble_word_budget_drops_oldest_first() {
        let v = toy_vocab();
        // caption 2 + question 1 + turns of 4 words each; budget 11 fits two turns.
        let seq = assemble_dialog_input("a cat", &hist(5), "sat", 3, 11, &v).unwrap();
        let text = detokenize(&seq.ids, &v);
        assert!(text.contains("question 5") && text.contains("question 4"));
        assert!(!text.contains("question 3"));
    }

    #[test]
    fn assemble_question_too_long() {
        let v = toy_vocab();
        let long_q = vec!["word"; 20].join(" ");
        assert!(matches!(
            assemble_dialog_input("cap", &[], &long_q, 3, 8, &v),
            Err(TextError::QuestionTooLong { .. })
        ));
    }

    #[test]
    fn assemble_segments_follow_scheme() {
        let v = toy_vocab();
        let seq = assemble_dialog_input("a cat", &hist(1), "sat", 3, 100, &v).unwrap();
        assert_eq!(seq.segments[0], SEG_CONTEXT);
        assert!(seq.segments.contains(&SEG_HISTORY_ANSWER));
        assert_eq!(*seq.segments.last().unwrap(), SEG_QUESTION);
        assert_eq!(seq.ids.len(), seq.segments.len());
        assert_eq!(seq.ids.len(), seq.positions.len());
        assert_eq!(seq.ids.len(), seq.attention_mask.len());
    }

    #[test]
    fn masking_rate_is_statistical() {
        let v = toy_vocab();
        let mut seq = TokenSequence::new();
        seq.push(CLS, 0);
        for _ in 0..100_000 {
            seq.push(v.id_of("cat").unwrap(), 0);
        }
        seq.push(SEP, 0);
        for (rate, tag) in [(0.15, 0u64), (0.10, 1u64)] {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + tag);
            let outcome = apply_masking(&seq, rate, &mut rng);
            let observed = outcome.mask_positions.len() as f64 / 100_000.0;
            assert!((observed - rate).abs() <= 0.01, "rate {rate}, observed {observed}");
        }
    }

    #[test]
    fn masking_never_touches_special_tokens() {
        let v = toy_vocab();
        let seq = assemble_dialog_input("the cat sat", &hist(2), "the mat", 3, 100, &v).unwrap();
        for s in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let outcome = apply_masking(&seq, 0.5, &mut rng);
            assert_eq!(outcome.masked_ids.len(), seq.ids.len());
            for &p in &outcome.mask_positions {
                assert!(!Vocab::is_special(seq.ids[p]));
                assert_eq!(outcome.labels[p], seq.ids[p]);
                assert_eq!(outcome.masked_ids[p], MASK);
            }
            for i in 0..seq.len() {
                if !outcome.mask_positions.contains(&i) {
                    assert_eq!(outcome.labels[i], NO_LABEL);
                    assert_eq!(outcome.masked_ids[i], seq.ids[i]);
                }
            }
        }
    }

    #[test]
    fn embed_input_sums_three_tables() {
        let mut tape = Tape::new();
        let d = 4;
        let tok = Tensor::new((0..5 * d).map(|i| i as f64).collect(), vec![5, d]);
        let seg = Tensor::new((0..2 * d).map(|i| (i as f64) * 0.1).collect(), vec![2, d]);
        let pos = Tensor::new((0..3 * d).map(|i| (i as f64) * 0.01).collect(), vec![3, d]);
        let (t, s, p) = (tape.leaf(&tok), tape.leaf(&seg), tape.leaf(&pos));
        let out = embed_input(&mut tape, &[2, 0], &[0, 1], &[0, 1], t, s, p).unwrap();
        assert_eq!(tape.shape(out), &[2, d]);
        let expect0: Vec<f64> = (0..d).map(|j| (2 * d + j) as f64 + 0.1 * j as f64 + 0.01 * j as f64).collect();
        for j in 0..d {
            assert!((tape.value(out)[j] - expect0[j]).abs() < 1e-12);
        }
        // zero tables => zero embedding
        let mut tape2 = Tape::new();
        let z = Tensor::zeros(vec![5, d]);
        let (t2, s2, p2) = (tape2.leaf(&z), tape2.leaf(&z), tape2.leaf(&z));
        let out2 = embed_input(&mut tape2, &[1, 4], &[0, 3], &[0, 1], t2, s2, p2).unwrap();
        assert!(tape2.value(out2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embed_segment_delta_is_table_delta() {
        let mut tape = Tape::new();
        let d = 3;
        let tok = Tensor::new(vec![0.5; 6 * d], vec![6, d]);
        let seg = Tensor::new((0..4 * d).map(|i| i as f64).collect(), vec![4, d]);
        let pos = Tensor::new(vec![0.25; 4 * d], vec![4, d]);
        let (t, s, p) = (tape.leaf(&tok), tape.leaf(&seg), tape.leaf(&pos));
        let a = embed_input(&mut tape, &[5], &[1], &[0], t, s, p).unwrap();
        let b = embed_input(&mut tape, &[5], &[2], &[0], t, s, p).unwrap();
        for j in 0..d {
            let delta = tape.value(b)[j] - tape.value(a)[j];
            let table_delta = (2 * d + j) as f64 - (d + j) as f64;
            assert!((delta - table_delta).abs() < 1e-12);
        }
    }
}
