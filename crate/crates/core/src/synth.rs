//! Synthetic multilingual data with rare entities and near-homophones.
//!
//! Every locale gets its own syllable inventory, a few command words, a set
//! of entity names, one near-homophone per entity and some filler words.
//! Text corpora put entities right after a command word and homophones only
//! among fillers, so an LM can tell them apart from context. Lattices give
//! the homophone a slight edge over the entity on the recognizer side.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::eval::Transcript;
use crate::fusion::{Lattice, LOG_FLOOR};
use crate::math::log_softmax_in_place;
use crate::tokenizer::{Corpus, Vocab, BOS, EOS, PAD};

const SCRIPTS: &[(&str, &str, &str)] = &[
    ("latn", "bcdfghklmnprstvz", "aeiou"),
    ("cyrl", "бвгдзклмнпрстфх", "аеиоуы"),
    ("grek", "βγδζκλμνπρστφχ", "αεηιου"),
    ("deva", "कखगजतदनपबमरलवसह", "ािीुेो"),
    ("arab", "بتجدرزسشفقكلمنه", "اوي"),
    ("hebr", "בגדזכלמנספקרשת", "ואי"),
    ("geor", "ბგდვზთკლმნპრსტ", "აეიოუ"),
    ("armn", "բգդզթժլխծկհձղմ", "աեիո"),
    ("thai", "กขคงจชซดตทนบปพมยรลวส", "ะาิีุู"),
    ("ltex", "bcčdđghklmnprsštvzž", "aáeéiíoóuú"),
    ("hira", "かきくけこさしすせそたちつてとなにぬねの", ""),
    ("hang", "가나다라마바사아자차카타파하고노도로모보소", ""),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub locales: usize,
    pub commands: usize,
    pub entities: usize,
    pub fillers: usize,
    pub train_sentences: usize,
    pub test_utterances: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            locales: 3,
            commands: 3,
            entities: 8,
            fillers: 12,
            train_sentences: 400,
            test_utterances: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Language {
    pub locale: String,
    pub commands: Vec<String>,
    pub entities: Vec<String>,
    /// `homophones[i]` is the near-spelling of `entities[i]`.
    pub homophones: Vec<String>,
    pub fillers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub languages: Vec<Language>,
}

/// Recognizer-side scores used to build a lattice row, before normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeParams {
    pub target_logit: f64,
    pub confusion_logit: f64,
    /// Logit of EOS at steps that are not the last.
    pub early_eos_logit: f64,
    /// Standard deviation of Gaussian noise added to every logit.
    pub noise: f64,
}

impl Default for LatticeParams {
    fn default() -> Self {
        LatticeParams {
            target_logit: 6.0,
            confusion_logit: 6.4,
            early_eos_logit: -4.0,
            noise: 0.3,
        }
    }
}

fn syllables(script: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let (_, consonants, vowels) = SCRIPTS[script];
    let mut all: Vec<String> = if vowels.is_empty() {
        consonants.chars().map(String::from).collect()
    } else {
        consonants
            .chars()
            .flat_map(|c| vowels.chars().map(move |v| format!("{c}{v}")))
            .collect()
    };
    all.shuffle(rng);
    let keep = (all.len() * 2 / 3).max(8).min(all.len());
    all.truncate(keep);
    all
}

fn fresh_word(
    sylls: &[String],
    len: std::ops::RangeInclusive<usize>,
    taken: &mut BTreeSet<String>,
    rng: &mut ChaCha8Rng,
) -> Result<String> {
    for _ in 0..10_000 {
        let n = rng.random_range(len.clone());
        let word: String = (0..n).map(|_| sylls.choose(rng).expect("syllables").as_str()).collect();
        if taken.insert(word.clone()) {
            return Ok(word);
        }
    }
    Err(Error::Config(
        "syllable inventory too small for the requested word count".into(),
    ))
}

/// Swaps one syllable of `word` for a new one to make a close spelling.
fn near_spelling(
    word_sylls: &[String],
    sylls: &[String],
    taken: &mut BTreeSet<String>,
    rng: &mut ChaCha8Rng,
) -> Result<String> {
    for _ in 0..10_000 {
        let mut parts = word_sylls.to_vec();
        let at = rng.random_range(0..parts.len());
        parts[at] = sylls.choose(rng).expect("syllables").clone();
        let word = parts.concat();
        if taken.insert(word.clone()) {
            return Ok(word);
        }
    }
    Err(Error::Config("could not find a free near-spelling".into()))
}

impl SynthWorld {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        if cfg.locales == 0 || cfg.commands == 0 || cfg.entities == 0 || cfg.fillers == 0 {
            return Err(Error::Config(
                "synthetic world needs at least one of each word kind".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut languages = Vec::with_capacity(cfg.locales);
        for i in 0..cfg.locales {
            let script = i % SCRIPTS.len();
            let sylls = syllables(script, &mut rng);
            let mut taken = BTreeSet::new();
            let mut words = |n: usize, len: std::ops::RangeInclusive<usize>, rng: &mut ChaCha8Rng| {
                (0..n)
                    .map(|_| fresh_word(&sylls, len.clone(), &mut taken, rng))
                    .collect::<Result<Vec<_>>>()
            };
            let commands = words(cfg.commands, 1..=2, &mut rng)?;
            let fillers = words(cfg.fillers, 1..=2, &mut rng)?;
            let mut entities = Vec::with_capacity(cfg.entities);
            let mut homophones = Vec::with_capacity(cfg.entities);
            for _ in 0..cfg.entities {
                let n = rng.random_range(2..=3);
                let parts: Vec<String> = (0..n)
                    .map(|_| sylls.choose(&mut rng).expect("syllables").clone())
                    .collect();
                let entity = parts.concat();
                if !taken.insert(entity.clone()) {
                    continue;
                }
                homophones.push(near_spelling(&parts, &sylls, &mut taken, &mut rng)?);
                entities.push(entity);
            }
            languages.push(Language {
                locale: format!("{}-{i:02}", SCRIPTS[script].0),
                commands,
                entities,
                homophones,
                fillers,
            });
        }
        Ok(SynthWorld { languages })
    }

    /// Entity-rich text: three in four sentences are `command entity
    /// [fillers]`, the rest use a homophone among fillers.
    pub fn text_corpora(&self, sentences: usize, seed: u64) -> Vec<Corpus> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.languages
            .iter()
            .map(|lang| Corpus {
                locale: lang.locale.clone(),
                sentences: (0..sentences)
                    .map(|_| {
                        if rng.random_bool(0.75) {
                            entity_sentence(lang, &mut rng)
                        } else {
                            homophone_sentence(lang, &mut rng)
                        }
                    })
                    .collect(),
            })
            .collect()
    }

    /// Test references, every one containing an entity.
    pub fn test_set(&self, per_locale: usize, seed: u64) -> Vec<Transcript> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.languages
            .iter()
            .flat_map(|lang| {
                (0..per_locale)
                    .map(|n| Transcript {
                        utt_id: format!("{}-{n:04}", lang.locale),
                        locale: lang.locale.clone(),
                        text: entity_sentence(lang, &mut rng),
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// `(locale, entity, homophone)` triples.
    pub fn confusions(&self) -> Vec<(String, String, String)> {
        self.languages
            .iter()
            .flat_map(|l| {
                l.entities
                    .iter()
                    .zip(&l.homophones)
                    .map(|(e, h)| (l.locale.clone(), e.clone(), h.clone()))
            })
            .collect()
    }
}

fn fillers(lang: &Language, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..n)
        .map(|_| lang.fillers.choose(rng).expect("fillers").clone())
        .collect()
}

fn entity_sentence(lang: &Language, rng: &mut ChaCha8Rng) -> String {
    let mut words = vec![
        lang.commands.choose(rng).expect("commands").clone(),
        lang.entities.choose(rng).expect("entities").clone(),
    ];
    let tail = rng.random_range(0..=2);
    words.extend(fillers(lang, tail, rng));
    words.join(" ")
}

fn homophone_sentence(lang: &Language, rng: &mut ChaCha8Rng) -> String {
    let head = rng.random_range(1..=3);
    let mut words = fillers(lang, head, rng);
    words.push(lang.homophones.choose(rng).expect("homophones").clone());
    let tail = rng.random_range(0..=1);
    words.extend(fillers(lang, tail, rng));
    words.join(" ")
}

/// Per-step reference tokens of `text`, each paired with the competing token
/// at that step when the word has a registered confusion of equal length.
pub fn utterance_steps(vocab: &Vocab, text: &str, confusions: &HashMap<String, String>) -> Vec<(u32, Option<u32>)> {
    let mut steps = Vec::new();
    for (i, word) in text.split(' ').enumerate() {
        let lead = if i == 0 { "" } else { " " };
        let ids = vocab.encode(&format!("{lead}{word}")).ids;
        let alt = confusions
            .get(word)
            .map(|h| vocab.encode(&format!("{lead}{h}")).ids)
            .filter(|alt| alt.len() == ids.len());
        for (k, &id) in ids.iter().enumerate() {
            let c = alt.as_ref().map(|a| a[k]).filter(|&c| c != id);
            steps.push((id, c));
        }
    }
    steps
}

/// One lattice row per reference token plus a final EOS row.
pub fn build_lattice(
    steps: &[(u32, Option<u32>)],
    vocab_size: usize,
    params: &LatticeParams,
    rng: &mut ChaCha8Rng,
) -> Result<Lattice> {
    if vocab_size <= EOS as usize {
        return Err(Error::Config(format!("vocabulary of {vocab_size} has no word tokens")));
    }
    let noise = Normal::new(0.0, params.noise.max(0.0)).map_err(|e| Error::Config(format!("lattice noise: {e}")))?;
    let mut rows = Vec::with_capacity(steps.len() + 1);
    for t in 0..=steps.len() {
        let mut row: Vec<f64> = (0..vocab_size).map(|_| noise.sample(rng)).collect();
        match steps.get(t) {
            Some(&(target, confusion)) => {
                row[EOS as usize] += params.early_eos_logit;
                row[target as usize] += params.target_logit;
                if let Some(c) = confusion {
                    row[c as usize] += params.confusion_logit;
                }
            }
            None => row[EOS as usize] += params.target_logit,
        }
        row[PAD as usize] = LOG_FLOOR;
        row[BOS as usize] = LOG_FLOOR;
        log_softmax_in_place(&mut row)?;
        rows.push(row.into_iter().map(|x| x.max(LOG_FLOOR)).collect());
    }
    Lattice::from_rows(rows)
}

/// Writes `corpora/<locale>.txt`, `manifest.tsv`, `refs.tsv` and
/// `confusions.tsv` under `dir`.
pub fn write_corpus_stage(world: &SynthWorld, cfg: &SynthConfig, dir: &Path) -> Result<()> {
    let corpus_dir = dir.join("corpora");
    fs::create_dir_all(&corpus_dir).at(&corpus_dir)?;
    let mut manifest = String::new();
    for corpus in world.text_corpora(cfg.train_sentences, cfg.seed.wrapping_add(1)) {
        let file = format!("{}.txt", corpus.locale);
        let path = corpus_dir.join(&file);
        fs::write(&path, corpus.sentences.join("\n") + "\n").at(&path)?;
        manifest.push_str(&format!("{}\tcorpora/{file}\n", corpus.locale));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).at(&path)?;

    let refs: String = world
        .test_set(cfg.test_utterances, cfg.seed.wrapping_add(2))
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.utt_id, t.locale, t.text))
        .collect();
    let path = dir.join("refs.tsv");
    fs::write(&path, refs).at(&path)?;

    let confusions: String = world
        .confusions()
        .iter()
        .map(|(l, e, h)| format!("{l}\t{e}\t{h}\n"))
        .collect();
    let path = dir.join("confusions.tsv");
    fs::write(&path, confusions).at(&path)
}

/// Reads `locale<TAB>entity<TAB>homophone` lines into an entity → homophone map.
pub fn read_confusions(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                [_, entity, homophone] => Ok((entity.to_string(), homophone.to_string())),
                _ => Err(Error::Format {
                    kind: "confusions",
                    path: path.to_path_buf(),
                    detail: format!("line {}: expected locale<TAB>entity<TAB>homophone", n + 1),
                }),
            }
        })
        .collect()
}

/// Builds one lattice per reference into `dir` and writes `dir/index.tsv`
/// with `utt_id<TAB>locale<TAB>file` lines.
pub fn write_lattice_stage(
    refs: &[Transcript],
    vocab: &Vocab,
    confusions: &HashMap<String, String>,
    params: &LatticeParams,
    seed: u64,
    dir: &Path,
) -> Result<Vec<(String, String, PathBuf)>> {
    fs::create_dir_all(dir).at(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut index = String::new();
    let mut entries = Vec::with_capacity(refs.len());
    for r in refs {
        let steps = utterance_steps(vocab, &r.text, confusions);
        let lattice = build_lattice(&steps, vocab.len(), params, &mut rng)?;
        let file = format!("{}.lat", r.utt_id);
        let path = dir.join(&file);
        lattice.save_binary(&path)?;
        index.push_str(&format!("{}\t{}\t{file}\n", r.utt_id, r.locale));
        entries.push((r.utt_id.clone(), r.locale.clone(), path));
    }
    let path = dir.join("index.tsv");
    fs::write(&path, index).at(&path)?;
    Ok(entries)
}

/// Reads a lattice `index.tsv`; file names resolve against its directory.
pub fn read_lattice_index(path: &Path) -> Result<Vec<(String, String, PathBuf)>> {
    let text = fs::read_to_string(path).at(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                [id, locale, file] => Ok((id.to_string(), locale.to_string(), base.join(file))),
                _ => Err(Error::Format {
                    kind: "lattice index",
                    path: path.to_path_buf(),
                    detail: format!("line {}: expected utt_id<TAB>locale<TAB>file", n + 1),
                }),
            }
        })
        .collect()
}
