//! Shared subword vocabulary pooled over every language's corpus.
//!
//! Spaces become the word marker `▁` before training and encoding, so a
//! sentence `a b` is the character stream `a▁b` and words are split in front of
//! each marker. Pieces never span a word boundary. Decoding maps the marker
//! back to a space, which makes encode/decode lossless for any text drawn from
//! the training alphabet.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: usize = 4;
pub const RESERVED_PIECES: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const WORD_MARKER: char = '\u{2581}';

const VOCAB_MAGIC: &str = "wpv1";

/// Piece inventory with reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    ids: HashMap<String, u32>,
    max_piece_chars: usize,
}

/// An encoded sentence. The language tag is carried along for reporting and
/// never reaches a model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub language_tag: Option<String>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq {
            ids,
            language_tag: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One language's training text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub locale: String,
    pub sentences: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered piece list whose first entries are
    /// the reserved pieces.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < RESERVED || pieces[..RESERVED].iter().zip(RESERVED_PIECES).any(|(p, r)| p != r) {
            return Err(Error::Config(format!(
                "vocabulary must start with the reserved pieces {RESERVED_PIECES:?}"
            )));
        }
        let mut ids = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::Config(format!("piece {i} is empty")));
            }
            if ids.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate piece {p:?}")));
            }
        }
        let max_piece_chars = pieces[RESERVED..].iter().map(|p| p.chars().count()).max().unwrap_or(0);
        Ok(Vocab {
            pieces,
            ids,
            max_piece_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    /// Looks up a non-reserved piece.
    pub fn id(&self, piece: &str) -> Option<u32> {
        self.ids.get(piece).copied().filter(|&id| id as usize >= RESERVED)
    }

    /// Greedy longest-match-first segmentation. Characters with no piece map
    /// to UNK. BOS/EOS are not added.
    pub fn encode(&self, text: &str) -> TokenSeq {
        let marked = mark_spaces(text);
        let bounds: Vec<usize> = marked
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(marked.len()))
            .collect();
        let nchars = bounds.len() - 1;
        let mut ids = Vec::new();
        let mut pos = 0;
        while pos < nchars {
            let longest = self.max_piece_chars.min(nchars - pos);
            let found = (1..=longest)
                .rev()
                .find_map(|len| self.id(&marked[bounds[pos]..bounds[pos + len]]).map(|id| (id, len)));
            match found {
                Some((id, len)) => {
                    ids.push(id);
                    pos += len;
                }
                None => {
                    ids.push(UNK);
                    pos += 1;
                }
            }
        }
        TokenSeq::new(ids)
    }

    /// Concatenates pieces and turns word markers back into spaces. PAD, BOS
    /// and EOS render as nothing; UNK renders as `<unk>`.
    pub fn decode_text(&self, seq: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in seq {
            let piece = self
                .piece(id)
                .ok_or_else(|| Error::Argument(format!("token id {id} outside vocabulary of {}", self.len())))?;
            match id {
                PAD | BOS | EOS => {}
                _ => out.push_str(piece),
            }
        }
        Ok(out.replace(WORD_MARKER, " "))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{VOCAB_MAGIC} {}\n", self.len());
        for p in &self.pieces {
            let _ = writeln!(out, "{p}");
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            kind: "vocab",
            path: path.to_path_buf(),
            detail,
        };
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        let size: usize = header
            .strip_prefix(VOCAB_MAGIC)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| bad(format!("bad header {header:?}")))?;
        let pieces: Vec<String> = lines.take(size).map(str::to_owned).collect();
        if pieces.len() != size {
            return Err(bad(format!("header declares {size} pieces, found {}", pieces.len())));
        }
        Vocab::from_pieces(pieces).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Vocab::parse(&text, path)
    }
}

fn mark_spaces(text: &str) -> String {
    text.replace(' ', &WORD_MARKER.to_string())
}

/// Splits marked text in front of every word marker.
fn split_words(marked: &str) -> impl Iterator<Item = &str> {
    let mut starts: Vec<usize> = marked
        .char_indices()
        .filter(|&(i, c)| c == WORD_MARKER && i > 0)
        .map(|(i, _)| i)
        .collect();
    starts.insert(0, 0);
    starts.push(marked.len());
    let words: Vec<&str> = starts
        .windows(2)
        .map(|w| &marked[w[0]..w[1]])
        .filter(|w| !w.is_empty())
        .collect();
    words.into_iter()
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Highest count first, then the lexicographically smallest pair.
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Learns a pooled subword vocabulary by repeatedly merging the most frequent
/// adjacent piece pair across all corpora, concatenated in the given order.
///
/// Stops early if no pair is left to merge, so the result can be smaller than
/// `vocab_size` on a tiny corpus.
pub fn train_wordpiece(corpora: &[Corpus], vocab_size: usize) -> Result<Vocab> {
    if corpora.iter().all(|c| c.sentences.iter().all(|s| s.is_empty())) {
        return Err(Error::Argument("no nonempty training sentence".into()));
    }

    let mut word_index: HashMap<String, usize> = HashMap::new();
    let mut word_counts: Vec<(String, i64)> = Vec::new();
    for sentence in corpora.iter().flat_map(|c| &c.sentences) {
        let marked = mark_spaces(sentence);
        for w in split_words(&marked) {
            match word_index.get(w) {
                Some(&i) => word_counts[i].1 += 1,
                None => {
                    word_index.insert(w.to_owned(), word_counts.len());
                    word_counts.push((w.to_owned(), 1));
                }
            }
        }
    }

    let alphabet: BTreeSet<char> = word_counts.iter().flat_map(|(w, _)| w.chars()).collect();
    if vocab_size < RESERVED + alphabet.len() {
        return Err(Error::Config(format!(
            "vocab size {vocab_size} cannot hold {RESERVED} reserved pieces and an alphabet of {}",
            alphabet.len()
        )));
    }

    let mut pieces: Vec<String> = RESERVED_PIECES.iter().map(|s| s.to_string()).collect();
    pieces.extend(alphabet.iter().map(|c| c.to_string()));
    let mut piece_ids: HashMap<String, u32> = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();

    let mut words: Vec<Vec<u32>> = word_counts
        .iter()
        .map(|(w, _)| w.chars().map(|c| piece_ids[&c.to_string()]).collect())
        .collect();
    let freqs: Vec<i64> = word_counts.iter().map(|(_, n)| *n).collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, syms) in words.iter().enumerate() {
        for p in syms.windows(2) {
            let key = (p[0], p[1]);
            *pair_counts.entry(key).or_default() += freqs[wi];
            pair_words.entry(key).or_default().insert(wi);
        }
    }

    let candidate = |pair: (u32, u32), count: i64, pieces: &[String]| Candidate {
        count,
        left: pieces[pair.0 as usize].clone(),
        right: pieces[pair.1 as usize].clone(),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(&p, &c)| candidate(p, c, &pieces))
        .collect();

    let mut banned: HashSet<(u32, u32)> = HashSet::new();
    while pieces.len() < vocab_size {
        let Some(best) = heap.pop() else { break };
        let current = pair_counts.get(&best.pair).copied().unwrap_or(0);
        if current != best.count || current <= 0 || banned.contains(&best.pair) {
            continue;
        }
        let merged = format!("{}{}", best.left, best.right);
        if RESERVED_PIECES.contains(&merged.as_str()) {
            banned.insert(best.pair);
            continue;
        }
        let new_id = match piece_ids.get(&merged) {
            Some(&id) => id,
            None => {
                let id = pieces.len() as u32;
                piece_ids.insert(merged.clone(), id);
                pieces.push(merged);
                id
            }
        };

        let mut affected: Vec<usize> = pair_words
            .remove(&best.pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for wi in affected {
            let old = &words[wi];
            let f = freqs[wi];
            for p in old.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.get_mut(&key).expect("pair counted") -= f;
                touched.insert(key);
            }
            let mut next = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && (old[i], old[i + 1]) == best.pair {
                    next.push(new_id);
                    i += 2;
                } else {
                    next.push(old[i]);
                    i += 1;
                }
            }
            for p in next.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_default() += f;
                pair_words.entry(key).or_default().insert(wi);
                touched.insert(key);
            }
            words[wi] = next;
        }
        pair_counts.remove(&best.pair);
        touched.remove(&best.pair);
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for key in touched {
            match pair_counts.get(&key).copied() {
                Some(c) if c > 0 => heap.push(candidate(key, c, &pieces)),
                Some(_) => {
                    pair_counts.remove(&key);
                    pair_words.remove(&key);
                }
                None => {}
            }
        }
    }

    Vocab::from_pieces(pieces)
}

/// Reads a `locale<TAB>path` manifest; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let text = fs::read_to_string(path).at(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (locale, file) = line.split_once('\t').ok_or_else(|| Error::Format {
            kind: "manifest",
            path: path.to_path_buf(),
            detail: format!("line {} is not `locale<TAB>path`", n + 1),
        })?;
        let file = Path::new(file.trim());
        let resolved = if file.is_absolute() {
            file.to_path_buf()
        } else {
            base.join(file)
        };
        entries.push((locale.trim().to_owned(), resolved));
    }
    Ok(entries)
}

/// Loads every corpus named by a manifest, one sentence per line.
pub fn load_corpora(manifest: &Path) -> Result<Vec<Corpus>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|(locale, path)| {
            let text = fs::read_to_string(&path).at(&path)?;
            Ok(Corpus {
                locale,
                sentences: text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect(),
            })
        })
        .collect()
}
