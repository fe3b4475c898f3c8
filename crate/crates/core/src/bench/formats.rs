use serde::{Deserialize, Serialize};

use super::{finish, unique_examples, Example, SkillDataset, FORMAT_TAG};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Casing {
    Lower,
    Upper,
    Title,
}

impl Casing {
    const ALL: [Casing; 3] = [Casing::Lower, Casing::Upper, Casing::Title];

    fn apply(self, word: &str) -> String {
        match self {
            Casing::Lower => word.to_lowercase(),
            Casing::Upper => word.to_uppercase(),
            Casing::Title => {
                let mut c = word.chars();
                c.next().map_or_else(String::new, |f| f.to_uppercase().chain(c).collect())
            }
        }
    }
}

const SEPARATORS: [&str; 5] = [": ", ":", " - ", " :: ", "="];
const SPACES: [&str; 4] = ["\n", " ", " | ", "; "];

pub const FORMAT_GRAMMAR_SIZE: usize = 3 * SEPARATORS.len() * SPACES.len();

/// A point in the prompt-format grammar: descriptor casing, separator
/// between descriptor and content, and the space between fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFormat {
    pub casing: Casing,
    pub separator: String,
    pub space: String,
}

impl PromptFormat {
    /// The `id`-th format of the grammar (casing-major).
    pub fn from_id(id: usize) -> Option<Self> {
        if id >= FORMAT_GRAMMAR_SIZE {
            return None;
        }
        let casing = Casing::ALL[id / (SEPARATORS.len() * SPACES.len())];
        let rest = id % (SEPARATORS.len() * SPACES.len());
        Some(Self { casing, separator: SEPARATORS[rest / SPACES.len()].into(), space: SPACES[rest % SPACES.len()].into() })
    }

    pub fn id(&self) -> Option<usize> {
        (0..FORMAT_GRAMMAR_SIZE).find(|&i| PromptFormat::from_id(i).as_ref() == Some(self))
    }

    fn prefix(&self) -> String {
        format!("{}{}", self.casing.apply("sentence"), self.separator)
    }

    fn suffix(&self) -> String {
        format!("{}{}{}", self.space, self.casing.apply("answer"), self.separator.trim_end())
    }

    pub fn render(&self, sentence: &str) -> String {
        format!("{}{sentence}{}", self.prefix(), self.suffix())
    }

    /// Inverse of [`PromptFormat::render`].
    pub fn parse<'a>(&self, prompt: &'a str) -> Option<&'a str> {
        prompt.strip_prefix(&self.prefix())?.strip_suffix(&self.suffix())
    }
}

/// `k` distinct formats drawn from the grammar, in draw order.
pub fn sample_formats(k: usize, seed: u64) -> Result<Vec<PromptFormat>> {
    if k > FORMAT_GRAMMAR_SIZE {
        return Err(Error::contract(format!("grammar has only {FORMAT_GRAMMAR_SIZE} formats")));
    }
    let mut ids: Vec<usize> = (0..FORMAT_GRAMMAR_SIZE).collect();
    Rng::seed(seed).shuffle(&mut ids);
    Ok(ids[..k].iter().map(|&i| PromptFormat::from_id(i).expect("in range")).collect())
}

const WORDS: &[&str] = &[
    "the", "fox", "from", "oslo", "red", "cat", "sat", "on", "mat", "dog", "ran", "to", "park", "big", "old", "tree", "moon",
    "sun", "cold", "wind", "blue", "sky", "rain", "fell", "hill", "town", "road", "book", "lamp", "door", "fish", "swam", "pond",
    "bird", "sang", "song", "king", "queen", "gold", "ship", "sea", "rock", "salt", "milk", "corn", "farm", "cow", "pig", "hen",
    "egg", "box", "top", "pen", "ink", "map", "cup", "tea", "hot", "wet", "dry",
];

pub(crate) fn count_words_with_o(sentence: &str) -> usize {
    sentence.split(' ').filter(|w| w.contains('o')).count()
}

/// Sentences paired with the number of their words containing `o`,
/// rendered once per format.
pub fn gen_format_tasks(formats: &[PromptFormat], n: usize, seed: u64) -> Result<Vec<SkillDataset>> {
    if formats.is_empty() {
        return Err(Error::contract("gen_format_tasks needs at least one format"));
    }
    let sentences = unique_examples(n, seed, |rng| {
        let len = 3 + rng.below(6);
        let words: Vec<&str> = (0..len).map(|_| *rng.choose(WORDS)).collect();
        let sentence = words.join(" ");
        let count = count_words_with_o(&sentence);
        Example { prompt: sentence, answer: count.to_string(), reference: Some(count as i64) }
    })?;
    formats
        .iter()
        .map(|f| {
            let id = f.id().ok_or_else(|| Error::contract(format!("format {f:?} is outside the grammar")))?;
            let examples = sentences
                .iter()
                .map(|e| Example { prompt: f.render(&e.prompt), answer: e.answer.clone(), reference: e.reference })
                .collect();
            finish(FORMAT_TAG, Some(id), seed, examples)
        })
        .collect()
}

pub(crate) fn verify_format(e: &Example, format_id: Option<usize>) -> bool {
    let Some(format) = format_id.and_then(PromptFormat::from_id) else {
        return false;
    };
    let Some(sentence) = format.parse(&e.prompt) else {
        return false;
    };
    let independent = sentence.split_whitespace().filter(|w| w.chars().any(|c| c == 'o')).count();
    e.answer == independent.to_string() && e.reference == Some(independent as i64)
}
