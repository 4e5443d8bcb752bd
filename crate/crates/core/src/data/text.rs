//! Word tokenizer, fixed vocabulary and hand-related token tagging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Gerunds caught by lookup; the suffix rule covers the rest.
const VBG_LEXICON: &[&str] = &[
    "holding", "taking", "using", "grabbing", "gripping", "waving", "pointing", "touching",
    "raising", "lifting", "carrying", "pressing", "typing", "writing", "clapping", "catching",
    "throwing", "pinching", "reaching", "showing", "tying", "doing", "being", "going", "lying",
    "dying", "seeing", "eyeing",
];

/// Words ending in "-ing" that are not verbs.
const NON_VERB_ING: &[&str] = &[
    "thing", "something", "anything", "nothing", "everything", "ring", "earring", "king",
    "wing", "spring", "string", "sling", "ceiling", "morning", "evening", "building",
    "clothing", "pudding", "wedding", "sibling", "duckling", "herring", "awning", "during",
    "lightning", "icing", "railing",
];

const MIN_SUFFIX_LEN: usize = 6;

/// Vocabulary words after the two special tokens.
const WORDS: &[&str] = &[
    "a", "an", "the", "of", "with", "and", "in", "on", "at", "for", "to", "from", "into", "up",
    "over", "next", "is", "his", "her", "their", "its", "one", "two", "both", "pair", "person",
    "man", "woman", "child", "boy", "girl", "kid", "someone", "people", "chef", "hand", "hands",
    "left", "right", "palm", "finger", "fingers", "thumb", "open", "closed", "close", "photo",
    "dark", "background", "black", "white", "red", "wooden", "heavy", "old", "object",
    "holding", "taking", "using", "grabbing", "gripping", "waving", "pointing", "touching",
    "raising", "lifting", "carrying", "pressing", "typing", "writing", "clapping", "reaching",
    "showing", "catching", "throwing", "pinching", "phone", "cup", "pen", "ball", "apple",
    "book", "key", "remote", "bottle", "brush", "mug", "camera", "laptop", "keyboard",
    "screen", "table", "box", "bag", "glass", "water", "milk", "coffee", "letter", "notes",
    "map", "piano", "sky", "car", "dog", "cat", "sofa", "couch", "flowers", "garden", "sun",
    "sea", "river", "ring", "something", "nothing", "everything", "morning", "evening",
    "string", "ceiling", "building", "wedding", "clothing", "spring", "handful", "handshake",
    "gloves", "shoes", "chopsticks", "vegetables", "cherries", "fruit", "bowl", "lights",
    "cake", "store", "window", "church", "television", "news", "place", "here", "see",
    "full", "drawn", "between", "sleeping", "cutting", "playing", "drinking", "reading",
    "eating", "pouring", "shaking", "tying", "toward", "towards", "front", "view", "gesture",
    "fist", "shown", "against", "plain", "raised", "stretched", "out", "spread", "wide",
];

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn is_gerund(token: &str) -> bool {
    if VBG_LEXICON.contains(&token) {
        return true;
    }
    token.len() >= MIN_SUFFIX_LEN
        && token.ends_with("ing")
        && token.chars().all(|c| c.is_ascii_alphabetic())
        && !NON_VERB_ING.contains(&token)
}

/// Positions of hand-related tokens: gerund verbs, or any token containing
/// "hand". Tokens are expected lowercased.
pub fn tag_hand_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let t = t.as_ref();
            is_gerund(t) || t.contains("hand")
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPrompt {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub hand_token_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut words = vec![PAD, UNK];
        for w in WORDS {
            if !words.contains(w) {
                words.push(w);
            }
        }
        Self { words }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.words.iter().position(|w| *w == word).unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word)
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    /// Tokenize, truncate to `max_tokens`, map to ids and tag.
    pub fn encode(&self, prompt: &str, max_tokens: usize) -> Result<TokenizedPrompt> {
        let mut tokens = tokenize(prompt);
        if tokens.is_empty() {
            return Err(Error::validation("prompt contains no tokens"));
        }
        tokens.truncate(max_tokens);
        let ids = tokens.iter().map(|t| self.id(t)).collect();
        let hand_token_indices = tag_hand_tokens(&tokens);
        Ok(TokenizedPrompt {
            tokens,
            ids,
            hand_token_indices,
        })
    }
}

/// The shipped 50-prompt tagging corpus as `(prompt, expected positions)`.
pub fn tagger_corpus() -> Vec<(String, Vec<usize>)> {
    include_str!("../../data/tagger_corpus.tsv")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|line| {
            let (labels, prompt) = line.split_once('\t').expect("corpus line has a tab");
            let idx = labels
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().expect("corpus label is an index"))
                .collect();
            (prompt.to_string(), idx)
        })
        .collect()
}
