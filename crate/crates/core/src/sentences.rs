//! Rule-based sentence splitting with character offsets.
//!
//! A boundary is placed after `.`, `!` or `?` (plus any closing quotes or
//! brackets) when whitespace follows and the next word does not start in
//! lowercase. Periods after common abbreviations, single-letter initials and
//! dotted tokens such as `e.g.` never end a sentence. A blank line always
//! does.

const ABBREVIATIONS: &[&str] = &[
    "al", "approx", "ca", "cf", "dr", "eq", "eqs", "fig", "figs", "mr", "mrs", "ms", "no", "nos",
    "prof", "ref", "refs", "resp", "sp", "spp", "st", "subsp", "var", "vol", "vs",
];

/// Sentence spans as `(start, end)` character offsets, trimmed of
/// surrounding whitespace, ordered and non-overlapping.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut bounds = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < n {
        let c = chars[i];
        if c == '\n' {
            let mut j = i;
            let mut newlines = 0;
            while j < n && chars[j].is_whitespace() {
                if chars[j] == '\n' {
                    newlines += 1;
                }
                j += 1;
            }
            if newlines >= 2 {
                push_trimmed(&chars, start, i, &mut bounds);
                start = j;
                i = j;
                continue;
            }
        }
        if matches!(c, '.' | '!' | '?') {
            let mut end = i + 1;
            while end < n && matches!(chars[end], '.' | '!' | '?' | '"' | '\'' | ')' | ']' | '”' | '’') {
                end += 1;
            }
            if end == n {
                break;
            }
            if chars[end].is_whitespace() && is_boundary(&chars, i, end) {
                push_trimmed(&chars, start, end, &mut bounds);
                start = end;
            }
            i = end;
            continue;
        }
        i += 1;
    }
    push_trimmed(&chars, start, n, &mut bounds);
    bounds
}

fn is_boundary(chars: &[char], punct: usize, after: usize) -> bool {
    let next = chars[after..].iter().find(|c| !c.is_whitespace());
    match next {
        None => return true,
        Some(c) if c.is_lowercase() => return false,
        _ => {}
    }
    if chars[punct] != '.' {
        return true;
    }
    let mut tok_start = punct;
    while tok_start > 0 && !chars[tok_start - 1].is_whitespace() {
        tok_start -= 1;
    }
    let token: String = chars[tok_start..punct]
        .iter()
        .skip_while(|c| !c.is_alphanumeric())
        .collect();
    if token.is_empty() {
        return true;
    }
    let lower = token.to_lowercase();
    if token.contains('.') || ABBREVIATIONS.contains(&lower.as_str()) {
        return false;
    }
    // single-letter initials like "J." (but not digits such as "3.")
    !(token.chars().count() == 1 && token.chars().all(char::is_alphabetic))
}

fn push_trimmed(chars: &[char], mut start: usize, mut end: usize, out: &mut Vec<(usize, usize)>) {
    while start < end && chars[start].is_whitespace() {
        start += 1;
    }
    while end > start && chars[end - 1].is_whitespace() {
        end -= 1;
    }
    if start < end {
        out.push((start, end));
    }
}

/// Merges sentences so that no span crosses a boundary; spans are also
/// widened to cover spans that fall into inter-sentence whitespace.
pub fn merge_around_spans(
    mut sentences: Vec<(usize, usize)>,
    spans: &[(usize, usize)],
) -> Vec<(usize, usize)> {
    for &(ms, me) in spans {
        let first = sentences.iter().position(|&(_, e)| e > ms);
        let last = sentences.iter().rposition(|&(s, _)| s < me);
        match (first, last) {
            (Some(f), Some(l)) if f <= l => {
                let merged = (sentences[f].0.min(ms), sentences[l].1.max(me));
                sentences.splice(f..=l, [merged]);
            }
            _ => {
                // the span sits entirely between two sentences (or there are none)
                let pos = sentences.iter().position(|&(s, _)| s >= me).unwrap_or(sentences.len());
                sentences.insert(pos, (ms, me));
            }
        }
    }
    sentences
}
