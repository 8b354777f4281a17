//! Small text helpers shared by matching code.

use alloc::string::String;
use alloc::vec::Vec;

/// Lowercases and collapses runs of whitespace to a single space.
pub fn fold(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        for c in word.chars() {
            out.extend(c.to_lowercase());
        }
    }
    out
}

/// Case-insensitive, whitespace-normalised equality.
pub fn eq_folded(a: &str, b: &str) -> bool {
    fold(a) == fold(b)
}

/// Case-insensitive substring test after whitespace normalisation.
pub fn contains_folded(haystack: &str, needle: &str) -> bool {
    fold(haystack).contains(fold(needle).as_str())
}

/// Splits text into lowercase alphanumeric tokens.
pub fn tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| {
            let mut w = String::with_capacity(t.len());
            for c in t.chars() {
                w.extend(c.to_lowercase());
            }
            w
        })
        .collect()
}

/// Trims, drops empties and removes case-insensitive duplicates, keeping the
/// first spelling seen.
pub fn dedup_names<I, S>(names: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut seen: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for name in names {
        let trimmed = name.as_ref().trim();
        if trimmed.is_empty() {
            continue;
        }
        let key = fold(trimmed);
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        out.push(String::from(trimmed));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn fold_collapses_whitespace() {
        assert_eq!(fold("  Gastric   Cancer \n"), "gastric cancer");
    }

    #[test]
    fn dedup_keeps_first_spelling() {
        assert_eq!(
            dedup_names(vec![" Keytruda", "keytruda", "", "Opdivo "]),
            vec!["Keytruda", "Opdivo"]
        );
    }

    #[test]
    fn tokens_split_on_punctuation() {
        assert_eq!(tokens("stomach/gastric cancer"), vec!["stomach", "gastric", "cancer"]);
    }
}
