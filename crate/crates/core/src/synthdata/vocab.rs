use std::collections::BTreeMap;

use super::report;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const UNK_ID: usize = 2;

const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

/// Bijective token/id map. Ids 0..3 are reserved for padding, class and unknown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocab {
    /// Reserved ids followed by `words` in the given order (duplicates dropped).
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            ids: BTreeMap::new(),
        };
        for w in RESERVED.iter().map(|s| s.to_string()).chain(words.into_iter().map(|s| s.as_ref().to_lowercase())) {
            if !v.ids.contains_key(&w) {
                v.ids.insert(w.clone(), v.tokens.len());
                v.tokens.push(w);
            }
        }
        v
    }

    /// Vocabulary covering every word the report grammar can produce, sorted.
    pub fn report_grammar() -> Self {
        Vocab::new(report::grammar_words())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lowercase whitespace tokens, class id first, truncated and padded to `max_len`.
    pub fn tokenize(&self, sentences: &[String], max_len: usize) -> Vec<usize> {
        let mut ids = vec![CLS_ID];
        for s in sentences {
            for w in s.split_whitespace() {
                ids.push(self.id(&w.to_lowercase()));
            }
        }
        ids.truncate(max_len.max(1));
        ids.resize(max_len.max(1), PAD_ID);
        ids
    }

    /// Tokens for every non-reserved id, in order.
    pub fn detokenize(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i >= RESERVED.len())
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }
}
