use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TokenId;

/// Ids below this are reserved; id 0 is end-of-sequence and padding.
pub const RESERVED: u32 = 4;
/// Smallest vocabulary: reserved ids plus one id per byte.
pub const MIN_VOCAB: usize = RESERVED as usize + 256;

const HEADER: &str = "repinv-bpe 1";

/// Byte-level BPE tokenizer.
///
/// Text is pre-split into pieces that start at a space or at a change of
/// character class, so merges never cross word boundaries. Pieces
/// concatenate back to the input, which makes decoding lossless.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(TokenId, TokenId)>,
    /// Occurrences of each merged pair at the time it was chosen.
    merge_counts: Vec<u64>,
    ranks: HashMap<(TokenId, TokenId), usize>,
    vocab: Vec<Vec<u8>>,
}

#[derive(PartialEq, Eq, Clone, Copy)]
enum Class {
    Word,
    Space,
    Other,
}

fn class(c: char) -> Class {
    if c.is_alphanumeric() {
        Class::Word
    } else if c.is_whitespace() {
        Class::Space
    } else {
        Class::Other
    }
}

/// Splits text into merge domains.
pub fn pre_split(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut prev: Option<(char, Class)> = None;
    // a single leading space attaches to the following run
    let mut lead_space = false;
    for (i, c) in text.char_indices() {
        let cl = class(c);
        let boundary = match prev {
            None => false,
            Some((p, pc)) => {
                if c == ' ' {
                    true
                } else if lead_space && p == ' ' && i - start == 1 {
                    cl == Class::Space
                } else {
                    cl != pc
                }
            }
        };
        if boundary {
            pieces.push(&text[start..i]);
            start = i;
        }
        if boundary || prev.is_none() {
            lead_space = c == ' ';
        }
        prev = Some((c, cl));
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

fn byte_id(b: u8) -> TokenId {
    RESERVED + b as TokenId
}

fn apply_merge(word: &mut Vec<TokenId>, pair: (TokenId, TokenId), new: TokenId) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(new);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

impl Tokenizer {
    /// Learns `vocab_size - 260` merges. Stops early, with a warning, when
    /// no pair occurs at least twice.
    pub fn train<'a>(corpus: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<Self> {
        if vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary size {vocab_size} < {MIN_VOCAB}"
            )));
        }
        let mut freqs: BTreeMap<&[u8], u64> = BTreeMap::new();
        for text in corpus {
            for p in pre_split(text) {
                *freqs.entry(p.as_bytes()).or_insert(0) += 1;
            }
        }
        if freqs.is_empty() {
            return Err(Error::Ingest("empty corpus".into()));
        }
        let mut words: Vec<(Vec<TokenId>, u64)> = freqs
            .into_iter()
            .map(|(w, f)| (w.iter().map(|&b| byte_id(b)).collect(), f))
            .collect();
        let mut tok = Self::from_merges(Vec::new(), Vec::new())?;
        for new in MIN_VOCAB..vocab_size {
            let mut counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
            for (w, f) in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0], p[1])).or_insert(0) += f;
                }
            }
            // highest count, then lowest pair
            let Some((&pair, &count)) = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            else {
                log::warn!("corpus exhausted after {} merges", tok.merges.len());
                break;
            };
            if count < 2 {
                log::warn!("no repeated pair left after {} merges", tok.merges.len());
                break;
            }
            for (w, _) in &mut words {
                apply_merge(w, pair, new as TokenId);
            }
            tok.push_merge(pair, count);
        }
        Ok(tok)
    }

    fn from_merges(merges: Vec<(TokenId, TokenId)>, counts: Vec<u64>) -> Result<Self> {
        let mut tok = Tokenizer {
            merges: Vec::new(),
            merge_counts: Vec::new(),
            ranks: HashMap::new(),
            vocab: (0..RESERVED)
                .map(|_| Vec::new())
                .chain((0..=255u8).map(|b| vec![b]))
                .collect(),
        };
        for (pair, c) in merges.into_iter().zip(counts) {
            let n = tok.vocab.len() as TokenId;
            if pair.0 < RESERVED || pair.1 < RESERVED || pair.0 >= n || pair.1 >= n {
                return Err(Error::Parse(format!(
                    "merge {pair:?} references an unknown id"
                )));
            }
            tok.push_merge(pair, c);
        }
        Ok(tok)
    }

    fn push_merge(&mut self, pair: (TokenId, TokenId), count: u64) {
        let mut bytes = self.vocab[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.vocab[pair.1 as usize]);
        self.ranks.insert(pair, self.merges.len());
        self.merges.push(pair);
        self.merge_counts.push(count);
        self.vocab.push(bytes);
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn merge_counts(&self) -> &[u64] {
        &self.merge_counts
    }

    /// Bytes of one token; empty for reserved ids.
    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(Vec::as_slice)
    }

    fn encode_piece(&self, piece: &[u8], out: &mut Vec<TokenId>) {
        let mut word: Vec<TokenId> = piece.iter().map(|&b| byte_id(b)).collect();
        loop {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            apply_merge(&mut word, pair, MIN_VOCAB as TokenId + rank as TokenId);
        }
        out.extend(word);
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut cache: HashMap<&str, Vec<TokenId>> = HashMap::new();
        let mut out = Vec::with_capacity(text.len() / 3);
        for p in pre_split(text) {
            let ids = cache.entry(p).or_insert_with(|| {
                let mut v = Vec::new();
                self.encode_piece(p.as_bytes(), &mut v);
                v
            });
            out.extend_from_slice(ids);
        }
        out
    }

    /// Raw bytes; reserved and out-of-range ids contribute nothing.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter()
            .filter_map(|&i| self.vocab.get(i as usize))
            .flatten()
            .copied()
            .collect()
    }

    /// Lossy for byte sequences that are not valid UTF-8, which generated
    /// output can produce.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    /// Plain text: header, merges as `left right count`, then the
    /// vocabulary as `id hex-bytes`.
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\nmerges {}\n", self.merges.len());
        for ((a, b), c) in self.merges.iter().zip(&self.merge_counts) {
            let _ = writeln!(s, "{a} {b} {c}");
        }
        let _ = writeln!(s, "vocab {}", self.vocab.len());
        for (i, bytes) in self.vocab.iter().enumerate() {
            let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
            let _ = writeln!(s, "{i} {hex}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Parse(format!("tokenizer file: {what}"));
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("missing header"));
        }
        let count = |line: Option<&str>, key: &str| -> Result<usize> {
            line.and_then(|l| l.strip_prefix(key))
                .and_then(|n| n.trim().parse().ok())
                .ok_or_else(|| bad(&format!("expected `{key} N`")))
        };
        let n_merges = count(lines.next(), "merges ")?;
        let mut merges = Vec::with_capacity(n_merges);
        let mut counts = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = lines.next().ok_or_else(|| bad("truncated merge list"))?;
            let f: Vec<u64> = line
                .split_whitespace()
                .map(|x| {
                    x.parse()
                        .map_err(|_| bad(&format!("bad merge line `{line}`")))
                })
                .collect::<Result<_>>()?;
            let [a, b, c] = f[..] else {
                return Err(bad(&format!("bad merge line `{line}`")));
            };
            merges.push((a as TokenId, b as TokenId));
            counts.push(c);
        }
        let tok = Self::from_merges(merges, counts)?;
        let n_vocab = count(lines.next(), "vocab ")?;
        if n_vocab != tok.vocab.len() {
            return Err(bad(&format!(
                "vocab lists {n_vocab} ids, merges imply {}",
                tok.vocab.len()
            )));
        }
        for (i, expect) in tok.vocab.iter().enumerate() {
            let line = lines.next().ok_or_else(|| bad("truncated vocabulary"))?;
            let (id, hex) = line.split_once(' ').unwrap_or((line, ""));
            let bytes: Option<Vec<u8>> = (0..hex.len())
                .step_by(2)
                .map(|j| {
                    hex.get(j..j + 2)
                        .and_then(|h| u8::from_str_radix(h, 16).ok())
                })
                .collect();
            if id.parse() != Ok(i) || bytes.as_ref() != Some(expect) {
                return Err(bad(&format!("vocabulary entry {i} disagrees with merges")));
            }
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "the cat sat on the mat. the cat ate the rat!\n  Then, 1999 cats.";

    #[test]
    fn pre_split_is_a_cover() {
        let p = pre_split(TEXT);
        assert_eq!(p.concat(), TEXT);
        assert_eq!(&p[..4], ["the", " cat", " sat", " on"]);
        assert!(p.contains(&"."));
        assert!(p.contains(&" 1999"));
        assert_eq!(pre_split(""), Vec::<&str>::new());
    }

    #[test]
    fn round_trip_and_compression() {
        let tok = Tokenizer::train([TEXT], 300).unwrap();
        assert!(tok.vocab_size() > MIN_VOCAB);
        let ids = tok.encode(TEXT);
        assert!(ids.len() < TEXT.len());
        assert_eq!(tok.decode(&ids), TEXT);
        assert!(ids
            .iter()
            .all(|&i| i >= RESERVED && (i as usize) < tok.vocab_size()));
        let odd = "naïve façade \u{1F600}\t\r\n";
        assert_eq!(tok.decode(&tok.encode(odd)), odd);
    }

    #[test]
    fn minimal_vocabulary_is_byte_level() {
        let tok = Tokenizer::train([TEXT], MIN_VOCAB).unwrap();
        assert_eq!(tok.vocab_size(), MIN_VOCAB);
        assert_eq!(tok.encode("ab"), vec![RESERVED + 97, RESERVED + 98]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            Tokenizer::train([TEXT], 100),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Tokenizer::train(Vec::<&str>::new(), 300),
            Err(Error::Ingest(_))
        ));
        assert!(matches!(Tokenizer::from_text("nope"), Err(Error::Parse(_))));
    }

    #[test]
    fn text_file_round_trip() {
        let tok = Tokenizer::train([TEXT], 290).unwrap();
        let back = Tokenizer::from_text(&tok.to_text()).unwrap();
        assert_eq!(back, tok);
        let corrupted = tok.to_text().replace("\n4 00\n", "\n4 01\n");
        assert!(Tokenizer::from_text(&corrupted).is_err());
    }

    /// Replays the merges over the raw pieces as byte strings and recounts
    /// each pair's adjacent occurrences just before it is merged.
    #[test]
    fn merge_counts_match_a_recount_and_never_increase() {
        let corpus = [TEXT, "the theme of the thesis", "aaaa aaaa bbb"];
        let tok = Tokenizer::train(corpus, 330).unwrap();
        let mut pieces: Vec<Vec<Vec<u8>>> = corpus
            .iter()
            .flat_map(|t| pre_split(t))
            .map(|p| p.bytes().map(|b| vec![b]).collect())
            .collect();
        for (i, &(a, b)) in tok.merges().iter().enumerate() {
            let (l, r) = (
                tok.token_bytes(a).unwrap().to_vec(),
                tok.token_bytes(b).unwrap().to_vec(),
            );
            let mut count = 0;
            for piece in &mut pieces {
                count += piece.windows(2).filter(|w| w[0] == l && w[1] == r).count() as u64;
                let mut out: Vec<Vec<u8>> = Vec::new();
                let mut j = 0;
                while j < piece.len() {
                    if j + 1 < piece.len() && piece[j] == l && piece[j + 1] == r {
                        out.push([l.as_slice(), r.as_slice()].concat());
                        j += 2;
                    } else {
                        out.push(piece[j].clone());
                        j += 1;
                    }
                }
                *piece = out;
            }
            assert_eq!(tok.merge_counts()[i], count, "merge {i}");
        }
        assert!(
            tok.merge_counts().windows(2).all(|w| w[0] >= w[1]),
            "{:?}",
            tok.merge_counts()
        );
    }

    proptest::proptest! {
        #[test]
        fn any_string_round_trips(s in "\\PC{0,40}", extra in "[a-z ]{0,30}") {
            let tok = Tokenizer::train([TEXT, extra.as_str()], 300).unwrap();
            proptest::prop_assert_eq!(tok.decode(&tok.encode(&s)), s);
        }
    }

    #[test]
    fn deterministic() {
        let a = Tokenizer::train([TEXT, "more text here"], 320).unwrap();
        let b = Tokenizer::train([TEXT, "more text here"], 320).unwrap();
        assert_eq!(a, b);
    }
}
