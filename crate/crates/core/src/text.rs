//! Character classes and text measures shared by the pipeline stages.

/// Han ideographs, kana and Hangul syllables.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x30000..=0x3134F
        | 0x3040..=0x309F
        | 0x30A0..=0x30FF
        | 0xAC00..=0xD7AF)
}

/// Latin letters (ASCII plus Latin-1 supplement and Latin Extended-A/B).
pub fn is_latin_letter(c: char) -> bool {
    c.is_ascii_alphabetic() || (('\u{00C0}'..='\u{024F}').contains(&c) && c.is_alphabetic())
}

pub fn is_latin_or_digit(c: char) -> bool {
    is_latin_letter(c) || c.is_ascii_digit()
}

/// ASCII, general and CJK/full-width punctuation.
pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x00A1..=0x00BF
            | 0x2010..=0x2027
            | 0x2030..=0x205E
            | 0x3000..=0x303F
            | 0xFE30..=0xFE4F
            | 0xFF01..=0xFF0F
            | 0xFF1A..=0xFF20
            | 0xFF3B..=0xFF40
            | 0xFF5B..=0xFF65)
}

/// Approximate token count: whitespace-delimited tokens that contain a Latin
/// letter or digit count one each, and every CJK codepoint counts one.
pub fn approx_token_count(text: &str) -> usize {
    text.split_whitespace()
        .map(|token| {
            let latin = usize::from(token.chars().any(is_latin_or_digit));
            latin + token.chars().filter(|&c| is_cjk(c)).count()
        })
        .sum()
}

/// Byte span of one counting unit inside a text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct UnitSpan {
    pub start: usize,
    pub end: usize,
}

/// Splits text into indivisible counting units: each CJK codepoint, and each
/// maximal non-CJK, non-space run that contains a Latin letter or digit.
///
/// Runs without letters or digits (bare punctuation) are not units; they stay
/// attached to whatever window covers them. For text where no whitespace
/// token mixes several Latin runs with CJK, the unit count equals
/// [`approx_token_count`]; otherwise it is an upper bound.
pub(crate) fn unit_spans(text: &str) -> Vec<UnitSpan> {
    let mut spans = Vec::new();
    let mut run: Option<(usize, bool)> = None;
    let close = |run: &mut Option<(usize, bool)>, end: usize, spans: &mut Vec<UnitSpan>| {
        if let Some((start, counted)) = run.take() {
            if counted {
                spans.push(UnitSpan { start, end });
            }
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            close(&mut run, i, &mut spans);
        } else if is_cjk(c) {
            close(&mut run, i, &mut spans);
            spans.push(UnitSpan { start: i, end: i + c.len_utf8() });
        } else {
            let counted = is_latin_or_digit(c);
            match run.as_mut() {
                Some((_, seen)) => *seen |= counted,
                None => run = Some((i, counted)),
            }
        }
    }
    close(&mut run, text.len(), &mut spans);
    spans
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_the_rule() {
        assert_eq!(approx_token_count("Hello world"), 2);
        assert_eq!(approx_token_count("核聚变"), 3);
        // 2 Latin tokens + 3 CJK codepoints
        assert_eq!(approx_token_count("EAST 核聚变 device"), 5);
        assert_eq!(approx_token_count(""), 0);
        assert_eq!(approx_token_count(" -- ; "), 0);
        assert_eq!(approx_token_count("Q=10 at 150M°C"), 3);
    }

    #[test]
    fn mixed_token_counts_latin_once() {
        assert_eq!(approx_token_count("在EAST装置"), 4);
        assert_eq!(unit_spans("在EAST装置").len(), 4);
        // two Latin runs inside one token: rule counts 1 + 3, units count 5
        assert_eq!(approx_token_count("在EAST和ITER中"), 4);
        assert_eq!(unit_spans("在EAST和ITER中").len(), 5);
    }

    #[test]
    fn unit_spans_skip_bare_punctuation() {
        let text = "a , b。核";
        let spans: Vec<&str> = unit_spans(text).iter().map(|s| &text[s.start..s.end]).collect();
        assert_eq!(spans, vec!["a", "b。", "核"]);
    }
}
