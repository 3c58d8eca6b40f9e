/// Longest word sequence kept; `[CLS]` is prepended downstream.
pub const MAX_WORD_TOKENS: usize = 50;

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '-' || c == '\''
}

/// Lowercases, splits on whitespace and emits every other punctuation
/// character as its own token. Hyphens and apostrophes stay inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if is_word_char(c) {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out.truncate(MAX_WORD_TOKENS);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(tokenize("Black hair."), vec!["black", "hair", "."]);
        assert_eq!(tokenize("a T-shirt, jeans"), vec!["a", "t-shirt", ",", "jeans"]);
    }

    #[test]
    fn empty_text() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \n\t").is_empty());
    }

    #[test]
    fn truncates_to_fifty() {
        let text = (0..60).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let toks = tokenize(&text);
        assert_eq!(toks.len(), 50);
        assert_eq!(toks[0], "w0");
        assert_eq!(toks[49], "w49");
    }

    proptest! {
        #[test]
        fn retokenizing_is_idempotent(text in "[a-zA-Z .,!?'-]{0,80}") {
            let once = tokenize(&text);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }
}
