//! Shared text handling: pre-tokenization, answer normalization, stopwords
//! and the light suffix stemmer used by schema linking.

/// A pre-token with its byte offsets in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    /// Lowercased surface form.
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl Word {
    pub fn is_punct(&self) -> bool {
        self.text.chars().all(|c| !c.is_alphanumeric())
    }
}

fn is_split_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Splits on whitespace; every punctuation character becomes its own token.
/// Output is lowercased.
pub fn pre_tokenize(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut current_start: Option<usize> = None;
    let flush = |words: &mut Vec<Word>, start: usize, end: usize| {
        words.push(Word {
            text: text[start..end].to_lowercase(),
            start,
            end,
        });
    };
    for (idx, c) in text.char_indices() {
        if c.is_whitespace() || is_split_punct(c) {
            if let Some(s) = current_start.take() {
                flush(&mut words, s, idx);
            }
            if is_split_punct(c) {
                flush(&mut words, idx, idx + c.len_utf8());
            }
        } else if current_start.is_none() {
            current_start = Some(idx);
        }
    }
    if let Some(s) = current_start {
        flush(&mut words, s, text.len());
    }
    words
}

/// Lowercased tokens, punctuation kept as single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    pre_tokenize(text).into_iter().map(|w| w.text).collect()
}

pub fn is_article(token: &str) -> bool {
    matches!(token, "a" | "an" | "the")
}

/// Normalized answer tokens: lowercase, punctuation dropped, articles
/// removed. The same normalizer backs EM/F1 and answer occurrence checks.
pub fn normalized_tokens(text: &str) -> Vec<String> {
    pre_tokenize(text)
        .into_iter()
        .filter(|w| !w.is_punct() && !is_article(&w.text))
        .map(|w| w.text)
        .collect()
}

pub fn normalize_answer(text: &str) -> String {
    normalized_tokens(text).join(" ")
}

/// Positions (in `haystack`) where `needle` occurs as a contiguous run.
pub fn find_subsequence<T: PartialEq>(haystack: &[T], needle: &[T]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    haystack
        .windows(needle.len())
        .enumerate()
        .filter(|(_, w)| *w == needle)
        .map(|(i, _)| i)
        .collect()
}

const STOPWORDS: &[&str] = &[
    // articles
    "a", "an", "the",
    // prepositions
    "of", "in", "on", "at", "by", "for", "with", "from", "to", "into", "onto", "about", "as",
    "over", "under", "after", "before", "between", "during", "through", "against", "within",
    "without", "per", "via", "than",
    // auxiliaries and copulas
    "is", "are", "was", "were", "be", "been", "being", "am", "do", "does", "did", "has",
    "have", "had", "will", "would", "can", "could", "shall", "should", "may", "might", "must",
    // question words, pronouns, conjunctions
    "what", "which", "who", "whom", "whose", "when", "where", "why", "how", "that", "this",
    "these", "those", "it", "its", "and", "or", "but", "not", "s",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

/// Surface form plus `-s` / `-es` strippings that leave at least three
/// characters.
pub fn stem_variants(token: &str) -> Vec<String> {
    let mut out = vec![token.to_string()];
    for suffix in ["es", "s"] {
        if let Some(stripped) = token.strip_suffix(suffix) {
            if stripped.chars().count() >= 3 {
                out.push(stripped.to_string());
            }
        }
    }
    out
}

/// Lowercased, stopword-free alphanumeric tokens.
pub fn content_tokens(text: &str) -> Vec<String> {
    pre_tokenize(text)
        .into_iter()
        .filter(|w| !w.is_punct() && !is_stopword(&w.text))
        .map(|w| w.text)
        .collect()
}

const ORDINALS: &[&str] = &[
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth",
    "tenth", "eleventh", "twelfth", "thirteenth", "fourteenth", "fifteenth", "sixteenth",
    "seventeenth", "eighteenth", "nineteenth", "twentieth",
];

/// Maps "second" → "2" and "2nd" → "2"; other tokens pass through.
pub fn ordinal_to_digit(token: &str) -> String {
    if let Some(pos) = ORDINALS.iter().position(|o| *o == token) {
        return (pos + 1).to_string();
    }
    for suffix in ["st", "nd", "rd", "th"] {
        if let Some(num) = token.strip_suffix(suffix) {
            if !num.is_empty() && num.chars().all(|c| c.is_ascii_digit()) {
                return num.to_string();
            }
        }
    }
    token.to_string()
}

/// Value-linking normal form: lowercase, ordinals mapped to digits,
/// punctuation removed.
pub fn value_tokens(text: &str) -> Vec<String> {
    pre_tokenize(text)
        .into_iter()
        .filter(|w| !w.is_punct())
        .map(|w| ordinal_to_digit(&w.text))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pre_tokenize_splits_punctuation() {
        let words = tokenize("Team(s) by season");
        assert_eq!(words, vec!["team", "(", "s", ")", "by", "season"]);
        let w = pre_tokenize("Hi, there");
        assert_eq!((w[1].start, w[1].end), (2, 3));
        assert_eq!(&"Hi, there"[w[2].start..w[2].end], "there");
    }

    #[test]
    fn normalizer_strips_articles_and_punct() {
        assert_eq!(normalize_answer("The  Walter Payton, Jr."), "walter payton jr");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("A"), "");
    }

    #[test]
    fn ordinals() {
        assert_eq!(ordinal_to_digit("second"), "2");
        assert_eq!(ordinal_to_digit("twentieth"), "20");
        assert_eq!(ordinal_to_digit("22nd"), "22");
        assert_eq!(ordinal_to_digit("nd"), "nd");
        assert_eq!(value_tokens("the second most!"), vec!["the", "2", "most"]);
    }

    #[test]
    fn stems() {
        assert!(stem_variants("yards").contains(&"yard".to_string()));
        assert!(stem_variants("athletes").contains(&"athlete".to_string()));
        assert_eq!(stem_variants("is"), vec!["is"]);
    }

    #[test]
    fn subsequence() {
        let h = ["a", "b", "a", "b"];
        assert_eq!(find_subsequence(&h, &["a", "b"]), vec![0, 2]);
        assert!(find_subsequence(&h, &[]).is_empty());
    }
}
