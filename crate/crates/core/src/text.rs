//! Tokenization and answer normalization shared by the metrics, the
//! learner's featurizer and the report.

/// Lowercases, removes punctuation and splits on whitespace.
///
/// BLEU, ROUGE-L and keyword extraction all consume this token stream, so
/// the same text always yields the same tokens everywhere.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .to_lowercase();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Canonical form used for exact-match comparison.
///
/// Trims, lowercases, collapses whitespace, drops a trailing period and
/// rewrites integers without leading zeros or thousands separators.
pub fn normalize_answer(text: &str) -> String {
    let mut s = text.trim().to_lowercase();
    while s.ends_with('.') {
        s.pop();
    }
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .split(' ')
        .map(canonical_integer)
        .collect::<Vec<_>>()
        .join(" ")
}

fn canonical_integer(word: &str) -> String {
    let (neg, body) = match word.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, word),
    };
    let digits: String = body.chars().filter(|c| *c != ',').collect();
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
        return word.to_owned();
    }
    // a comma must sit between digit groups, never at the edges
    if body.starts_with(',') || body.ends_with(',') {
        return word.to_owned();
    }
    let trimmed = digits.trim_start_matches('0');
    let value = if trimmed.is_empty() { "0" } else { trimmed };
    if neg && value != "0" {
        format!("-{value}")
    } else {
        value.to_owned()
    }
}

/// Extracts the first number that appears in `text`.
///
/// Accepts an optional leading minus, thousands separators and a decimal
/// part. Returns `None` when no digit is present.
pub fn extract_number(text: &str) -> Option<f64> {
    let chars: Vec<char> = text.chars().collect();
    let start = chars.iter().position(|c| c.is_ascii_digit())?;
    let neg = start > 0 && chars[start - 1] == '-';
    let mut buf = String::new();
    let mut seen_dot = false;
    let mut i = start;
    while i < chars.len() {
        let c = chars[i];
        let next_is_digit = chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if c.is_ascii_digit() {
            buf.push(c);
        } else if c == ',' && next_is_digit && !seen_dot {
            // thousands separator
        } else if c == '.' && next_is_digit && !seen_dot {
            seen_dot = true;
            buf.push(c);
        } else {
            break;
        }
        i += 1;
    }
    let value: f64 = buf.parse().ok()?;
    Some(if neg { -value } else { value })
}
