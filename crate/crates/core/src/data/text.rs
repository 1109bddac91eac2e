use crate::error::{Error, Result};

/// Characters split off the start and end of whitespace-separated words.
const DETACHED: &[char] = &['.', ',', '!', '?', ';', ':', '"', '(', ')'];

/// Maps typographic punctuation onto its ASCII form.
pub fn normalize_punctuation(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for ch in raw.chars() {
        match ch {
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{00AB}' | '\u{00BB}' => out.push('"'),
            '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' => out.push('\''),
            '\u{2013}' | '\u{2014}' => out.push('-'),
            '\u{2026}' => out.push_str("..."),
            c if c.is_whitespace() => out.push(' '),
            c => out.push(c),
        }
    }
    out
}

/// Lowercases, normalizes punctuation and tokenizes one line.
///
/// Leading and trailing `. , ! ? ; : " ( )` become their own tokens; hyphens
/// and apostrophes stay inside words.
pub fn preprocess_line(raw: &str) -> Result<Vec<String>> {
    let norm = normalize_punctuation(&raw.to_lowercase());
    let mut tokens = Vec::new();
    for word in norm.split_whitespace() {
        let rest = word.trim_start_matches(DETACHED);
        let core = rest.trim_end_matches(DETACHED);
        tokens.extend(word[..word.len() - rest.len()].chars().map(String::from));
        if !core.is_empty() {
            tokens.push(core.to_string());
        }
        tokens.extend(rest[core.len()..].chars().map(String::from));
    }
    if tokens.is_empty() {
        return Err(Error::EmptySegment);
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        preprocess_line(s).unwrap()
    }

    #[test]
    fn comma_and_period_detach() {
        assert_eq!(toks("A man, smiling."), ["a", "man", ",", "smiling", "."]);
    }

    #[test]
    fn plain_word() {
        assert_eq!(toks("abc"), ["abc"]);
    }

    #[test]
    fn curly_quotes_become_straight() {
        assert_eq!(toks("\u{201C}Hello\u{201D}"), ["\"", "hello", "\""]);
    }

    #[test]
    fn hyphen_and_apostrophe_stay_inside() {
        assert_eq!(toks("A well-known dog's (toy)!"), ["a", "well-known", "dog's", "(", "toy", ")", "!"]);
    }

    #[test]
    fn dashes_and_ellipsis() {
        assert_eq!(toks("wait\u{2026} now \u{2013} go"), ["wait", ".", ".", ".", "now", "-", "go"]);
    }

    #[test]
    fn inner_punctuation_kept() {
        assert_eq!(toks("3.5 km"), ["3.5", "km"]);
    }

    #[test]
    fn lone_punctuation_is_a_token() {
        assert_eq!(toks(" . "), ["."]);
    }

    #[test]
    fn whitespace_only_is_empty_segment() {
        assert!(matches!(preprocess_line("  \t "), Err(Error::EmptySegment)));
        assert!(matches!(preprocess_line(""), Err(Error::EmptySegment)));
    }
}
