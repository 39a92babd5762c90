//! Word-level tokenization over a closed toy vocabulary, plus the template
//! bank that generates deterministic per-category sentence corpora.

use crate::error::{Error, Result};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub const BEGIN: usize = 0;
pub const END: usize = 1;
pub const PAD: usize = 2;
pub const NUM_SPECIALS: usize = 3;

pub const DEFAULT_CONTEXT_LEN: usize = 16;

/// Base-category shape words; these are the subjects residuals attach to.
pub const CATEGORIES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "magenta", "cyan"];
pub const TEXTURES: [&str; 3] = ["solid", "striped", "dotted"];

const WORDS: &[&str] = &[
    // categories
    "circle", "square", "triangle", "cross",
    // colors
    "red", "green", "blue", "yellow", "magenta", "cyan",
    // textures
    "solid", "striped", "dotted",
    // backgrounds
    "night", "dusk", "slate",
    // function words
    "a", "an", "the", "photo", "of", "on", "and", "with", "at", "in", "is",
    "near", "beside", "above", "below", "next", "to", "there", "it",
    // scene fillers
    "beach", "grass", "snow", "field", "table", "wall", "sky", "water",
    "garden", "road",
    // adjectives
    "big", "small", "tiny", "large", "bright", "dark", "lone", "single",
    "pretty", "plain", "nice", "simple",
    // spatial words
    "left", "right", "center", "corner", "middle", "side",
    // nouns
    "scene", "image", "picture", "view", "background", "drawing", "shape",
    "figure", "object", "thing",
    // verbs
    "sits", "rests", "appears", "stands", "floats", "lies", "shown", "seen",
    "placed", "drawn",
];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    context_len: usize,
}

impl Vocabulary {
    /// The built-in closed vocabulary with the default context length.
    pub fn toy() -> Self {
        Self::from_words(WORDS, DEFAULT_CONTEXT_LEN)
    }

    pub fn from_words(words: &[&str], context_len: usize) -> Self {
        let mut tokens = vec!["<begin>".to_string(), "<end>".to_string(), "<pad>".to_string()];
        let mut index = HashMap::new();
        for w in words {
            if index.contains_key(*w) {
                continue;
            }
            index.insert(w.to_string(), tokens.len());
            tokens.push(w.to_string());
        }
        Vocabulary { tokens, index, context_len }
    }

    pub fn with_context_len(mut self, context_len: usize) -> Self {
        self.context_len = context_len;
        self
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// `[begin] + word ids + [end]`, padded to the context length.
    pub fn tokenize(&self, text: &str) -> Result<TokenizedPrompt> {
        let mut ids = vec![BEGIN];
        for word in text.split_whitespace() {
            let id = self
                .id(word)
                .ok_or_else(|| Error::UnknownWord(word.to_string()))?;
            ids.push(id);
        }
        ids.push(END);
        if ids.len() > self.context_len {
            return Err(Error::PromptTooLong { needed: ids.len(), limit: self.context_len });
        }
        let length = ids.len();
        ids.resize(self.context_len, PAD);
        Ok(TokenizedPrompt { text: text.to_string(), ids, length })
    }

    /// Inverse of [`Vocabulary::tokenize`] for well-formed prompts.
    pub fn detokenize(&self, p: &TokenizedPrompt) -> String {
        p.ids[1..p.length - 1]
            .iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// All token slots holding `subject_word`. Empty when the word is
    /// absent (or out of vocabulary).
    pub fn subject_positions(&self, p: &TokenizedPrompt, subject_word: &str) -> Vec<usize> {
        match self.id(subject_word) {
            Some(id) => p
                .ids
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == id)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub text: String,
    pub ids: Vec<usize>,
    /// Token count including begin and end, excluding padding.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Word(String),
    Category,
    Filler(String),
}

#[derive(Debug, Clone)]
pub struct Template {
    parts: Vec<Part>,
}

#[derive(Debug, Clone)]
pub struct TemplateBank {
    pub templates: Vec<Template>,
    pub fillers: IndexMap<String, Vec<String>>,
}

impl TemplateBank {
    /// The bank shipped with the crate (see `data/templates.txt`).
    pub fn default_bank() -> Self {
        Self::parse(include_str!("../data/templates.txt")).expect("built-in bank parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fillers: IndexMap<String, Vec<String>> = IndexMap::new();
        let mut raw_templates = Vec::new();
        let mut section = "";
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line == "[fillers]" || line == "[templates]" {
                section = if line == "[fillers]" { "fillers" } else { "templates" };
                continue;
            }
            match section {
                "fillers" => {
                    let (name, words) = line.split_once('=').ok_or_else(|| {
                        Error::Validation(format!("bad filler line: {line:?}"))
                    })?;
                    fillers.insert(
                        name.trim().to_string(),
                        words.split_whitespace().map(str::to_string).collect(),
                    );
                }
                "templates" => raw_templates.push(line.to_string()),
                _ => {
                    return Err(Error::Validation(format!(
                        "line outside any section: {line:?}"
                    )))
                }
            }
        }
        let mut templates = Vec::new();
        for raw in raw_templates {
            let mut parts = Vec::new();
            let mut category_slots = 0;
            for tok in raw.split_whitespace() {
                if tok == "{}" {
                    parts.push(Part::Category);
                    category_slots += 1;
                } else if let Some(name) = tok.strip_prefix('{').and_then(|t| t.strip_suffix('}'))
                {
                    if !fillers.contains_key(name) {
                        return Err(Error::Validation(format!(
                            "template {raw:?} references unknown filler {name:?}"
                        )));
                    }
                    parts.push(Part::Filler(name.to_string()));
                } else {
                    parts.push(Part::Word(tok.to_string()));
                }
            }
            if category_slots != 1 {
                return Err(Error::Validation(format!(
                    "template {raw:?} must contain exactly one {{}} slot, has {category_slots}"
                )));
            }
            templates.push(Template { parts });
        }
        Ok(TemplateBank { templates, fillers })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every distinct sentence the bank can produce for `category`,
    /// in deterministic enumeration order.
    pub fn enumerate(&self, category: &str) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for t in &self.templates {
            let slots: Vec<&Vec<String>> = t
                .parts
                .iter()
                .filter_map(|p| match p {
                    Part::Filler(name) => Some(&self.fillers[name]),
                    _ => None,
                })
                .collect();
            let mut odometer = vec![0usize; slots.len()];
            loop {
                let mut words = Vec::new();
                let mut slot_i = 0;
                for p in &t.parts {
                    match p {
                        Part::Word(w) => words.push(w.as_str()),
                        Part::Category => words.push(category),
                        Part::Filler(_) => {
                            words.push(slots[slot_i][odometer[slot_i]].as_str());
                            slot_i += 1;
                        }
                    }
                }
                let sentence = words.join(" ");
                if seen.insert(sentence.clone()) {
                    out.push(sentence);
                }
                // advance odometer
                let mut k = slots.len();
                loop {
                    if k == 0 {
                        break;
                    }
                    k -= 1;
                    odometer[k] += 1;
                    if odometer[k] < slots[k].len() {
                        break;
                    }
                    odometer[k] = 0;
                    if k == 0 {
                        k = usize::MAX;
                        break;
                    }
                }
                if slots.is_empty() || k == usize::MAX {
                    break;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCorpus {
    pub base_category: String,
    pub sentences: Vec<TokenizedPrompt>,
    /// For each sentence, the index set of the base-category token.
    pub subject_positions: Vec<Vec<usize>>,
}

impl PromptCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Draws `count` sentences containing `base_category` from the template
/// product. Distinct while the product allows it; with `allow_repeats`
/// the remainder is topped up by seeded resampling, otherwise the product
/// running out is an error.
pub fn generate_corpus(
    base_category: &str,
    count: usize,
    bank: &TemplateBank,
    vocab: &Vocabulary,
    seed: u64,
    allow_repeats: bool,
) -> Result<PromptCorpus> {
    if count == 0 {
        return Err(Error::Validation("corpus count must be >= 1".into()));
    }
    if !vocab.contains(base_category) {
        return Err(Error::UnknownWord(base_category.to_string()));
    }
    let mut pool = bank.enumerate(base_category);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut chosen: Vec<String> = Vec::with_capacity(count);
    if count <= pool.len() {
        chosen.extend(pool.into_iter().take(count));
    } else if allow_repeats {
        let n = pool.len();
        chosen.extend(pool.iter().cloned());
        while chosen.len() < count {
            let i = rng.random_range(0..n);
            chosen.push(pool[i].clone());
        }
    } else {
        return Err(Error::CorpusCapacity { available: pool.len(), requested: count });
    }
    let mut sentences = Vec::with_capacity(count);
    let mut positions = Vec::with_capacity(count);
    for s in &chosen {
        let p = vocab.tokenize(s)?;
        let pos = vocab.subject_positions(&p, base_category);
        debug_assert!(!pos.is_empty());
        sentences.push(p);
        positions.push(pos);
    }
    Ok(PromptCorpus {
        base_category: base_category.to_string(),
        sentences,
        subject_positions: positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_basic() {
        let v = Vocabulary::toy();
        let p = v.tokenize("a photo of circle").unwrap();
        assert_eq!(p.length, 6);
        assert_eq!(p.ids.len(), DEFAULT_CONTEXT_LEN);
        assert_eq!(p.ids[0], BEGIN);
        assert_eq!(p.ids[1], v.id("a").unwrap());
        assert_eq!(p.ids[2], v.id("photo").unwrap());
        assert_eq!(p.ids[3], v.id("of").unwrap());
        assert_eq!(p.ids[4], v.id("circle").unwrap());
        assert_eq!(p.ids[5], END);
        assert!(p.ids[6..].iter().all(|&t| t == PAD));
    }

    #[test]
    fn tokenize_empty() {
        let v = Vocabulary::toy();
        let p = v.tokenize("").unwrap();
        assert_eq!(p.length, 2);
        assert_eq!(p.ids[0], BEGIN);
        assert_eq!(p.ids[1], END);
        assert!(p.ids[2..].iter().all(|&t| t == PAD));
    }

    #[test]
    fn tokenize_unknown_word() {
        let v = Vocabulary::toy();
        match v.tokenize("a zorp") {
            Err(Error::UnknownWord(w)) => assert_eq!(w, "zorp"),
            other => panic!("expected UnknownWord, got {other:?}"),
        }
    }

    #[test]
    fn tokenize_too_long() {
        let v = Vocabulary::toy();
        let long = vec!["a"; DEFAULT_CONTEXT_LEN].join(" ");
        assert!(matches!(v.tokenize(&long), Err(Error::PromptTooLong { .. })));
    }

    #[test]
    fn subject_positions_examples() {
        let v = Vocabulary::toy();
        let p = v.tokenize("a photo of circle").unwrap();
        assert_eq!(v.subject_positions(&p, "circle"), vec![4]);
        let p = v.tokenize("a circle and a circle").unwrap();
        assert_eq!(v.subject_positions(&p, "circle"), vec![2, 5]);
        let p = v.tokenize("a photo of square").unwrap();
        assert!(v.subject_positions(&p, "circle").is_empty());
    }

    #[test]
    fn subject_positions_never_hit_specials() {
        let v = Vocabulary::toy();
        for s in ["a photo of circle", "circle", "a circle and a circle"] {
            let p = v.tokenize(s).unwrap();
            for pos in v.subject_positions(&p, "circle") {
                assert!(pos >= 1 && pos <= p.length - 2);
            }
        }
    }

    #[test]
    fn vocab_round_trips() {
        let v = Vocabulary::toy();
        for id in NUM_SPECIALS..v.size() {
            let w = v.token(id).to_string();
            assert_eq!(v.id(&w), Some(id));
        }
    }

    #[test]
    fn default_bank_sentences_round_trip_and_fit() {
        let v = Vocabulary::toy();
        let bank = TemplateBank::default_bank();
        assert!(bank.templates.len() >= 20, "bank has {} templates", bank.templates.len());
        for cat in CATEGORIES {
            let all = bank.enumerate(cat);
            assert!(all.len() >= 1000, "product for {cat} is only {}", all.len());
            for s in &all {
                let p = v.tokenize(s).unwrap_or_else(|e| panic!("{s:?}: {e}"));
                assert_eq!(v.detokenize(&p), *s);
                assert!(!v.subject_positions(&p, cat).is_empty());
            }
        }
    }

    fn tiny_bank() -> TemplateBank {
        TemplateBank::parse(
            "[fillers]\nbg = beach grass\n[templates]\na {} on the {bg}\na photo of {}\n",
        )
        .unwrap()
    }

    #[test]
    fn corpus_tops_up_with_repeats() {
        let v = Vocabulary::toy();
        let c = generate_corpus("circle", 4, &tiny_bank(), &v, 7, true).unwrap();
        assert_eq!(c.len(), 4);
        for (s, pos) in c.sentences.iter().zip(&c.subject_positions) {
            assert!(s.text.contains("circle"));
            assert!(!pos.is_empty());
        }
        // distinct while possible: the 3-sentence product appears in full
        let texts: std::collections::HashSet<_> =
            c.sentences.iter().map(|s| s.text.clone()).collect();
        assert_eq!(texts.len(), 3);
    }

    #[test]
    fn corpus_singleton() {
        let v = Vocabulary::toy();
        let bank = TemplateBank::parse("[templates]\na photo of {}\n").unwrap();
        let c = generate_corpus("circle", 1, &bank, &v, 0, true).unwrap();
        assert_eq!(c.sentences[0].text, "a photo of circle");
    }

    #[test]
    fn corpus_capacity_error_without_repeats() {
        let v = Vocabulary::toy();
        match generate_corpus("circle", 4, &tiny_bank(), &v, 7, false) {
            Err(Error::CorpusCapacity { available, requested }) => {
                assert_eq!(available, 3);
                assert_eq!(requested, 4);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let v = Vocabulary::toy();
        let bank = TemplateBank::default_bank();
        let a = generate_corpus("square", 50, &bank, &v, 123, true).unwrap();
        let b = generate_corpus("square", 50, &bank, &v, 123, true).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus("square", 50, &bank, &v, 124, true).unwrap();
        assert_ne!(a, c);
    }
}
