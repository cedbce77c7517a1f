//! Dataset ingestion, synthetic task generation, vocabulary and splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream, SimRng};
use crate::util::apportion;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub text_a: String,
    pub text_b: Option<String>,
    pub gold_label: Option<usize>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    File,
    Synthetic,
}

/// An ordered collection of examples sharing one label space.
///
/// Datasets produced by loading or generation carry ids `0..len`. Subsets
/// produced by [`split`] keep the ids of their source, so ids are only
/// guaranteed to be strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub label_names: Vec<String>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, label_names: Vec<String>, provenance: Provenance) -> Result<Self> {
        let ds = Dataset { examples, label_names, provenance };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        validate_label_names(&self.label_names)?;
        for (i, ex) in self.examples.iter().enumerate() {
            if i > 0 && ex.id <= self.examples[i - 1].id {
                return Err(Error::Validation(format!("example ids not strictly increasing at id {}", ex.id)));
            }
            if ex.text_a.trim().is_empty() {
                return Err(Error::Validation(format!("example {} has empty text_a", ex.id)));
            }
            if let Some(l) = ex.gold_label {
                if l >= self.label_names.len() {
                    return Err(Error::Validation(format!("example {} has label {l} out of range", ex.id)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    /// Looks an example up by id.
    pub fn get(&self, id: usize) -> Option<&Example> {
        self.examples.binary_search_by_key(&id, |e| e.id).ok().map(|i| &self.examples[i])
    }

    pub fn ids(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.id).collect()
    }

    /// Per-class example counts (labeled examples only).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for ex in &self.examples {
            if let Some(l) = ex.gold_label {
                counts[l] += 1;
            }
        }
        counts
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            label_names: self.label_names.clone(),
            provenance: self.provenance,
            total: self.len(),
            per_class: self.class_counts(),
            unlabeled: self.examples.iter().filter(|e| e.gold_label.is_none()).count(),
        }
    }
}

fn validate_label_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::Validation("label_names must be non-empty".into()));
    }
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Validation(format!("duplicate label name {n:?}")));
        }
    }
    Ok(())
}

/// Summary written next to every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub label_names: Vec<String>,
    pub provenance: Provenance,
    pub total: usize,
    pub per_class: Vec<usize>,
    pub unlabeled: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRecord {
    text_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

/// Reads a JSONL dataset. Blank lines are skipped; ids follow line order.
pub fn load_jsonl(path: &Path, label_names: &[String]) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), label_names)
}

pub fn read_jsonl<R: BufRead>(reader: R, label_names: &[String]) -> Result<Dataset> {
    validate_label_names(label_names)?;
    let index: HashMap<&str, usize> = label_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut examples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if rec.text_a.trim().is_empty() {
            return Err(Error::Validation(format!("line {line_no}: text_a is empty")));
        }
        let gold_label = match rec.label {
            None => None,
            Some(l) => Some(
                *index
                    .get(l.as_str())
                    .ok_or_else(|| Error::Validation(format!("line {line_no}: unknown label {l:?}")))?,
            ),
        };
        examples.push(Example {
            id: examples.len(),
            text_a: rec.text_a,
            text_b: rec.text_b,
            gold_label,
            split: Split::Train,
        });
    }
    Dataset::new(examples, label_names.to_vec(), Provenance::File)
}

pub fn write_jsonl<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    for ex in &dataset.examples {
        let rec = JsonlRecord {
            text_a: ex.text_a.clone(),
            text_b: ex.text_b.clone(),
            label: ex.gold_label.map(|l| dataset.label_names[l].clone()),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(dataset, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

/// Parameters of the synthetic keyword-classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub examples_per_class: usize,
    pub keywords_per_class: usize,
    pub noise_word_count: usize,
    pub pair_mode: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 4,
            examples_per_class: 250,
            keywords_per_class: 8,
            noise_word_count: 40,
            pair_mode: false,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Validation(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        for (name, v) in [
            ("examples_per_class", self.examples_per_class),
            ("keywords_per_class", self.keywords_per_class),
            ("noise_word_count", self.noise_word_count),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Settings for the unlabeled pretraining text that accompanies a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub sentences: usize,
    /// Fraction of each class's keywords that ever co-occur with the class's
    /// label word. The rest must be learned from labeled or pseudo-labeled data.
    pub keyword_coverage: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { sentences: 4000, keyword_coverage: 0.5 }
    }
}

const DEFAULT_LABELS: [&str; 10] =
    ["world", "sports", "business", "tech", "health", "science", "music", "travel", "food", "money"];

/// Frequent words mixed into every synthetic text, so pattern literals such
/// as "it was" are in-distribution for the pretrained model.
const FUNCTION_WORDS: [&str; 10] = ["the", "a", "it", "was", "is", "this", "of", "and", "to", "."];

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Lexicon of the synthetic task, derived from the spec alone.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLexicon {
    pub label_names: Vec<String>,
    pub keywords: Vec<Vec<String>>,
    pub noise: Vec<String>,
}

impl SynthLexicon {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(spec.seed, &[stream::SYNTH, 0]);
        let mut used: HashSet<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
        let mut label_names = Vec::with_capacity(spec.num_classes);
        for c in 0..spec.num_classes {
            let name = match DEFAULT_LABELS.get(c) {
                Some(n) => n.to_string(),
                None => fresh_word(&mut rng, &mut used, 3),
            };
            used.insert(name.clone());
            label_names.push(name);
        }
        let keywords = (0..spec.num_classes)
            .map(|_| (0..spec.keywords_per_class).map(|_| fresh_word(&mut rng, &mut used, 3)).collect())
            .collect();
        let mut noise: Vec<String> = (0..spec.noise_word_count).map(|_| fresh_word(&mut rng, &mut used, 2)).collect();
        noise.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
        Ok(SynthLexicon { label_names, keywords, noise })
    }

    fn covered(&self, class: usize, coverage: f64) -> &[String] {
        let kws = &self.keywords[class];
        let n = ((kws.len() as f64 * coverage).ceil() as usize).clamp(1, kws.len());
        &kws[..n]
    }
}

fn fresh_word(rng: &mut SimRng, used: &mut HashSet<String>, syllables: usize) -> String {
    loop {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn pick_distinct<'a>(rng: &mut SimRng, pool: &'a [String], n: usize) -> Vec<&'a String> {
    pool.choose_multiple(rng, n.min(pool.len())).collect()
}

fn noise_words<'a>(rng: &mut SimRng, lex: &'a SynthLexicon, lo: usize, hi: usize) -> Vec<&'a String> {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| &lex.noise[rng.gen_range(0..lex.noise.len())]).collect()
}

/// Generates the labeled synthetic task: every text carries one to three of
/// its class's keywords among noise words. Classes are exactly balanced.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    let lex = SynthLexicon::new(spec)?;
    let mut rng = rng_for(spec.seed, &[stream::SYNTH, 1]);
    let mut rows: Vec<(String, Option<String>, usize)> = Vec::new();
    for class in 0..spec.num_classes {
        for _ in 0..spec.examples_per_class {
            let k = match rng.gen_range(0..10) {
                0..=3 => 1,
                4..=7 => 2,
                _ => 3,
            };
            let mut words = pick_distinct(&mut rng, &lex.keywords[class], k);
            words.extend(noise_words(&mut rng, &lex, 3, 6));
            words.shuffle(&mut rng);
            let text_a = join(&words);
            let text_b = if spec.pair_mode {
                let mut b = pick_distinct(&mut rng, &lex.keywords[class], 1);
                b.extend(noise_words(&mut rng, &lex, 2, 4));
                b.shuffle(&mut rng);
                Some(join(&b))
            } else {
                None
            };
            rows.push((text_a, text_b, class));
        }
    }
    rows.shuffle(&mut rng);
    let examples = rows
        .into_iter()
        .enumerate()
        .map(|(id, (text_a, text_b, class))| Example { id, text_a, text_b, gold_label: Some(class), split: Split::Train })
        .collect();
    Dataset::new(examples, lex.label_names, Provenance::Synthetic)
}

/// Unlabeled "public" text for MLM pretraining: each sentence puts a class's
/// label word next to some of that class's covered keywords.
pub fn synth_corpus(spec: &SynthSpec, corpus: &CorpusSpec) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&corpus.keyword_coverage) {
        return Err(Error::Validation("keyword_coverage must lie in [0, 1]".into()));
    }
    let lex = SynthLexicon::new(spec)?;
    let mut rng = rng_for(spec.seed, &[stream::CORPUS]);
    let mut examples = Vec::with_capacity(corpus.sentences);
    for id in 0..corpus.sentences {
        let class = rng.gen_range(0..spec.num_classes);
        let covered = lex.covered(class, corpus.keyword_coverage);
        let k = rng.gen_range(1..=3);
        let mut words = pick_distinct(&mut rng, covered, k);
        words.push(&lex.label_names[class]);
        words.extend(noise_words(&mut rng, &lex, 2, 5));
        words.shuffle(&mut rng);
        examples.push(Example { id, text_a: join(&words), text_b: None, gold_label: None, split: Split::Train });
    }
    Dataset::new(examples, lex.label_names, Provenance::Synthetic)
}

fn join(words: &[&String]) -> String {
    words.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// Tokenization and vocabulary
// ---------------------------------------------------------------------------

/// Lowercased whitespace tokenization with every punctuation character split
/// into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_lowercase().collect());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub const MASK_ID: TokenId = 0;
pub const PAD_ID: TokenId = 1;
pub const UNK_ID: TokenId = 2;
pub const CLS_ID: TokenId = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[MASK]", "[PAD]", "[UNK]", "[CLS]"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn with_specials() -> Self {
        let mut v = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for s in SPECIAL_TOKENS {
            v.push(s);
        }
        v
    }

    fn push(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..4].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::Validation("vocabulary must start with the four special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    /// Token ids of `text`; out-of-vocabulary words map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK_ID)).collect()
    }

    /// Resolves a verbalizer word to its single, non-special token id.
    pub fn single_token(&self, word: &str) -> Result<TokenId> {
        let pieces = tokenize(word);
        if pieces.len() != 1 {
            return Err(Error::Validation(format!("verbalizer must be single token: {word:?}")));
        }
        match self.id(&pieces[0]) {
            Some(id) if !Self::is_special(id) => Ok(id),
            _ => Err(Error::Validation(format!("verbalizer token {word:?} not in vocabulary"))),
        }
    }

    /// Adds every token of `text` that is not yet known.
    pub fn extend_with_text(&mut self, text: &str) {
        for t in tokenize(text) {
            self.push(&t);
        }
    }
}

/// Builds a vocabulary: specials, then corpus tokens by first occurrence,
/// then verbalizer tokens.
pub fn build_vocab(dataset: &Dataset, verbalizer_tokens: &[String]) -> Result<Vocab> {
    build_vocab_multi(&[dataset], verbalizer_tokens)
}

/// Same as [`build_vocab`] over several corpora, scanned in order.
pub fn build_vocab_multi(datasets: &[&Dataset], verbalizer_tokens: &[String]) -> Result<Vocab> {
    if datasets.iter().all(|d| d.is_empty()) {
        return Err(Error::Validation("cannot build a vocabulary from an empty dataset".into()));
    }
    let mut pieces = Vec::with_capacity(verbalizer_tokens.len());
    for v in verbalizer_tokens {
        let t = tokenize(v);
        if t.len() != 1 {
            return Err(Error::Validation(format!("verbalizer must be single token: {v:?}")));
        }
        pieces.push(t.into_iter().next().unwrap());
    }
    let mut vocab = Vocab::with_specials();
    for ds in datasets {
        for ex in &ds.examples {
            vocab.extend_with_text(&ex.text_a);
            if let Some(b) = &ex.text_b {
                vocab.extend_with_text(b);
            }
        }
    }
    for p in &pieces {
        vocab.push(p);
    }
    Ok(vocab)
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub validation: Dataset,
}

/// Stratified, seeded train/test/validation split.
///
/// Split sizes are apportioned over the classes (unlabeled examples form one
/// extra stratum) by largest remainder, so totals are exact and every
/// per-class count is within one of its proportional share.
pub fn split(dataset: &Dataset, test_fraction: f64, validation_fraction: f64, seed: u64) -> Result<Splits> {
    for f in [test_fraction, validation_fraction] {
        if !(f >= 0.0 && f.is_finite()) {
            return Err(Error::Validation(format!("split fractions must be >= 0, got {f}")));
        }
    }
    if test_fraction + validation_fraction >= 1.0 {
        return Err(Error::Validation("split fractions must sum to < 1".into()));
    }
    // strata: one per class, then unlabeled
    let k = dataset.num_classes();
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); k + 1];
    for (i, ex) in dataset.examples.iter().enumerate() {
        strata[ex.gold_label.unwrap_or(k)].push(i);
    }
    let sizes: Vec<f64> = strata.iter().map(|s| s.len() as f64).collect();
    let n = dataset.len() as f64;
    let test_quota = apportion(&sizes, (test_fraction * n).round() as usize);
    let val_quota = apportion(&sizes, (validation_fraction * n).round() as usize);
    let needed = 1 + usize::from(test_fraction > 0.0) + usize::from(validation_fraction > 0.0);

    let mut rng = rng_for(seed, &[stream::SPLIT]);
    let mut assign = vec![Split::Train; dataset.len()];
    for (s, members) in strata.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if needed > 1 && members.len() < needed {
            let what = if s < k { format!("class {:?}", dataset.label_names[s]) } else { "unlabeled stratum".into() };
            return Err(Error::Validation(format!(
                "{what} has {} examples, fewer than the {needed} needed for the requested splits",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let t = test_quota[s].min(members.len());
        let v = val_quota[s].min(members.len() - t);
        for &i in &members[..t] {
            assign[i] = Split::Test;
        }
        for &i in &members[t..t + v] {
            assign[i] = Split::Validation;
        }
    }
    let part = |which: Split| Dataset {
        examples: dataset
            .examples
            .iter()
            .zip(&assign)
            .filter(|(_, &s)| s == which)
            .map(|(e, &s)| Example { split: s, ..e.clone() })
            .collect(),
        label_names: dataset.label_names.clone(),
        provenance: dataset.provenance,
    };
    Ok(Splits { train: part(Split::Train), test: part(Split::Test), validation: part(Split::Validation) })
}

/// Per-class counts, keyed by label name; convenient for manifests.
pub fn class_histogram(dataset: &Dataset) -> BTreeMap<String, usize> {
    dataset.label_names.iter().cloned().zip(dataset.class_counts()).collect()
}
