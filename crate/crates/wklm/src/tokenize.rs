//! Whitespace + punctuation tokenizer with character offsets.
//!
//! A token is either a maximal run of alphanumeric characters or a single
//! non-whitespace, non-alphanumeric character. Offsets are in characters
//! (not bytes) so they line up with the anchor offsets in document files.

/// A surface token together with its half-open character span in the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Tokenize `text`, keeping character offsets for each token.
pub fn tokenize_with_offsets(text: &str) -> Vec<OffsetToken> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut word_start = 0usize;

    for (pos, ch) in text.chars().enumerate() {
        if ch.is_alphanumeric() {
            if word.is_empty() {
                word_start = pos;
            }
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(OffsetToken {
                    text: std::mem::take(&mut word),
                    start: word_start,
                    end: pos,
                });
            }
            if !ch.is_whitespace() {
                tokens.push(OffsetToken {
                    text: ch.to_string(),
                    start: pos,
                    end: pos + 1,
                });
            }
        }
    }
    if !word.is_empty() {
        let end = text.chars().count();
        tokens.push(OffsetToken {
            text: word,
            start: word_start,
            end,
        });
    }
    tokens
}

/// Tokenize `text`, discarding offsets.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text).into_iter().map(|t| t.text).collect()
}
