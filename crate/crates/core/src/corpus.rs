//! Caption corpus preparation: class vocabulary, synonym mapping, the
//! whole-token noun filter, and the JSONL corpus format.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Splits on Unicode whitespace, strips leading/trailing ASCII punctuation
/// and lowercases. Tokens that are pure punctuation are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn fold_name(name: &str) -> String {
    tokenize(name).join(" ")
}

/// Ordered set of class names; order defines class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySet {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl CategorySet {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", names.len())));
        }
        let mut folded = Vec::with_capacity(names.len());
        let mut index = HashMap::with_capacity(names.len());
        for (i, raw) in names.iter().enumerate() {
            let name = fold_name(raw.as_ref());
            if name.is_empty() {
                return Err(Error::invalid(format!("class {i} has an empty name")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate class name {name:?}")));
            }
            folded.push(name);
        }
        Ok(Self { names: folded, index })
    }

    /// Reads one class name per line; blank lines are skipped.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let names: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Self::new(&names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(&fold_name(name)).copied()
    }
}

/// Surface word → class index. Class names map to themselves implicitly.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymMap {
    entries: BTreeMap<String, usize>,
}

impl SynonymMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, surface: &str, class: usize) {
        self.entries.insert(fold_name(surface), class);
    }

    pub fn get(&self, surface: &str) -> Option<usize> {
        self.entries.get(&fold_name(surface)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.entries.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads `surface<TAB>class_name` lines.
    pub fn from_file(path: impl AsRef<Path>, classes: &CategorySet) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut map = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (surface, class) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "expected `surface<TAB>class_name`".into(),
            })?;
            let idx = classes.index_of(class).ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("unknown class {:?}", class.trim()),
            })?;
            if fold_name(surface).is_empty() {
                return Err(Error::Parse { line: n + 1, message: "empty surface word".into() });
            }
            map.insert(surface, idx);
        }
        Ok(map)
    }
}

/// Whole-token matcher for class names and their synonyms.
///
/// A pattern matches a contiguous run of caption tokens. The final token of
/// a pattern also accepts an `s` or `es` suffix (`dogs`, `boxes`).
#[derive(Debug, Clone)]
pub struct NounFilter {
    patterns: Vec<(Vec<String>, usize)>,
    num_classes: usize,
}

pub fn build_noun_filter(classes: &CategorySet, synonyms: &SynonymMap) -> Result<NounFilter> {
    let c = classes.len();
    let mut by_surface: BTreeMap<String, usize> = BTreeMap::new();
    for (i, name) in classes.names().iter().enumerate() {
        by_surface.insert(name.clone(), i);
    }
    for (surface, idx) in synonyms.iter() {
        if idx >= c {
            return Err(Error::invalid(format!("synonym {surface:?} targets class {idx}, but only {c} classes exist")));
        }
        if surface.is_empty() {
            return Err(Error::invalid("empty synonym"));
        }
        if let Some(&existing) = by_surface.get(surface) {
            if existing != idx {
                return Err(Error::invalid(format!(
                    "synonym {surface:?} conflicts with class {:?}",
                    classes.name(existing)
                )));
            }
        }
        by_surface.insert(surface.to_string(), idx);
    }
    let patterns = by_surface
        .into_iter()
        .map(|(surface, idx)| (surface.split(' ').map(str::to_string).collect(), idx))
        .collect();
    Ok(NounFilter { patterns, num_classes: c })
}

fn token_matches(token: &str, word: &str, allow_plural: bool) -> bool {
    if token == word {
        return true;
    }
    allow_plural
        && token
            .strip_prefix(word)
            .is_some_and(|suffix| suffix == "s" || suffix == "es")
}

impl NounFilter {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Surface forms this filter recognizes (class names and synonyms).
    pub fn surfaces(&self) -> impl Iterator<Item = (String, usize)> + '_ {
        self.patterns.iter().map(|(toks, idx)| (toks.join(" "), *idx))
    }

    /// Sorted class indices whose patterns occur in `tokens`.
    pub fn match_tokens(&self, tokens: &[String]) -> Vec<usize> {
        let mut hit = vec![false; self.num_classes];
        for (pattern, idx) in &self.patterns {
            if hit[*idx] || pattern.len() > tokens.len() {
                continue;
            }
            let last = pattern.len() - 1;
            let found = tokens.windows(pattern.len()).any(|window| {
                window
                    .iter()
                    .zip(pattern)
                    .enumerate()
                    .all(|(k, (tok, word))| token_matches(tok, word, k == last))
            });
            if found {
                hit[*idx] = true;
            }
        }
        hit.iter().enumerate().filter_map(|(i, &h)| h.then_some(i)).collect()
    }
}

/// A caption accepted by the noun filter, with labels drawn from its text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub text: String,
    /// Ascending, unique class indices; never empty.
    pub labels: Vec<usize>,
}

impl CaptionRecord {
    pub fn multi_hot(&self, num_classes: usize) -> Vec<bool> {
        let mut v = vec![false; num_classes];
        for &l in &self.labels {
            v[l] = true;
        }
        v
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.labels.is_empty() {
            return Err("record has no labels".into());
        }
        if self.labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err("labels must be strictly ascending".into());
        }
        Ok(())
    }
}

/// Returns a record when at least one class (or synonym) occurs in the caption.
pub fn filter_caption(caption: &str, filter: &NounFilter) -> Option<CaptionRecord> {
    let labels = filter.match_tokens(&tokenize(caption));
    (!labels.is_empty()).then(|| CaptionRecord { text: caption.to_string(), labels })
}

/// Counts from a corpus preparation pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareStats {
    pub kept: usize,
    pub rejected: usize,
    /// Accepted captions mentioning each class, keyed by class name.
    pub class_frequency: BTreeMap<String, usize>,
}

/// Filters every caption, keeping accepted ones in input order.
pub fn prepare_corpus<S: AsRef<str>>(
    captions: &[S],
    classes: &CategorySet,
    filter: &NounFilter,
) -> (Vec<CaptionRecord>, PrepareStats) {
    let mut records = Vec::new();
    let mut freq = vec![0usize; classes.len()];
    for caption in captions {
        if let Some(rec) = filter_caption(caption.as_ref(), filter) {
            for &l in &rec.labels {
                freq[l] += 1;
            }
            records.push(rec);
        }
    }
    let stats = PrepareStats {
        kept: records.len(),
        rejected: captions.len() - records.len(),
        class_frequency: classes.names().iter().cloned().zip(freq).collect(),
    };
    (records, stats)
}

pub fn write_corpus(records: &[CaptionRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for rec in records {
        rec.validate().map_err(Error::InvalidArgument)?;
        serde_json::to_writer(&mut out, rec).map_err(|e| Error::invalid(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL corpus. Blank lines are ignored.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: n + 1, message: e.to_string() })?;
        rec.validate().map_err(|message| Error::Parse { line: n + 1, message })?;
        records.push(rec);
    }
    Ok(records)
}

const FILLER_SUBJECTS: &[&str] = &["a photo of", "a picture showing", "an image with", "a scene where we see", "a view of"];
const FILLER_PLACES: &[&str] = &[
    "on the street", "in a park", "near the water", "inside a room", "under a blue sky", "next to a fence",
    "at the beach", "in the city",
];

/// Generates template captions mentioning between 1 and `max_labels`
/// distinct classes each (for toy corpora and tests).
pub fn synthetic_captions<R: Rng + ?Sized>(
    classes: &CategorySet,
    count: usize,
    max_labels: usize,
    rng: &mut R,
) -> Vec<String> {
    let max_labels = max_labels.clamp(1, classes.len());
    let all: Vec<usize> = (0..classes.len()).collect();
    (0..count)
        .map(|_| {
            let k = rng.random_range(1..=max_labels);
            let chosen: Vec<usize> = all.choose_multiple(rng, k).copied().collect();
            let objects: Vec<String> = chosen.iter().map(|&i| format!("a {}", classes.name(i))).collect();
            let subject = FILLER_SUBJECTS.choose(rng).copied().unwrap_or("a photo of");
            let place = FILLER_PLACES.choose(rng).copied().unwrap_or("outside");
            format!("{subject} {} {place}.", objects.join(" and "))
        })
        .collect()
}
