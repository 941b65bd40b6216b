//! Rule-based filtering: tag format, length bounds, keyword sanity.

use super::{FilterVerdict, Stage};

/// Token-count bounds, inclusive, measured by whitespace splitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleLimits {
    pub reasoning_min: usize,
    pub reasoning_max: usize,
    pub answer_min: usize,
    pub answer_max: usize,
}

impl Default for RuleLimits {
    fn default() -> Self {
        Self {
            reasoning_min: 16,
            reasoning_max: 256,
            answer_min: 2,
            answer_max: 64,
        }
    }
}

/// Ground truth the keyword stage compares against.
#[derive(Debug, Clone, Copy)]
pub struct RuleContext<'a> {
    pub instruction: &'a str,
    pub target_text: &'a str,
    /// Caption of the reference item for edit tasks; `None` otherwise.
    pub source_caption: Option<&'a str>,
}

/// A raw tagged generation as it arrives at the filter; no well-formedness
/// is assumed.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGeneration {
    pub sample_id: u64,
    pub raw_text: String,
}

/// Content extracted from a well-formed generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedGeneration {
    pub reasoning: String,
    pub answer: String,
}

const META_TOKENS: [&str; 2] = ["assistant:", "system:"];

/// The fixed 30-word stopword list used by the keyword check.
pub const STOPWORDS: [&str; 30] = [
    "a", "an", "the", "of", "to", "in", "on", "at", "for", "with", "and", "or", "but", "is",
    "are", "was", "were", "be", "been", "it", "this", "that", "these", "those", "then", "as",
    "by", "from", "so", "not",
];

/// Lowercase, strip punctuation, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let cleaned: String = lowered
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn content_words(text: &str) -> Vec<String> {
    normalize(text)
        .split_whitespace()
        .filter(|w| !STOPWORDS.contains(w))
        .map(str::to_string)
        .collect()
}

/// Exactly one `<reasoning>..</reasoning>` followed by exactly one
/// `<answer>..</answer>`, nothing but whitespace outside, and no leaked meta
/// tokens. Returns the extracted contents or a failure reason.
fn parse_tags(raw: &str) -> Result<ParsedGeneration, String> {
    let lower = raw.to_lowercase();
    for meta in META_TOKENS {
        if lower.contains(meta) {
            return Err(format!("meta token leakage: '{meta}'"));
        }
    }
    let occurrences = |needle: &str| -> Vec<usize> {
        let mut at = Vec::new();
        let mut start = 0;
        while let Some(pos) = raw[start..].find(needle) {
            at.push(start + pos);
            start += pos + needle.len();
        }
        at
    };
    let ro = occurrences("<reasoning>");
    let rc = occurrences("</reasoning>");
    let ao = occurrences("<answer>");
    let ac = occurrences("</answer>");
    for (tag, found) in [
        ("<reasoning>", &ro),
        ("</reasoning>", &rc),
        ("<answer>", &ao),
        ("</answer>", &ac),
    ] {
        match found.len() {
            0 => return Err(format!("missing tag {tag}")),
            1 => {}
            n => return Err(format!("tag {tag} appears {n} times")),
        }
    }
    let (ro, rc, ao, ac) = (ro[0], rc[0], ao[0], ac[0]);
    if !(ro < rc && rc < ao && ao < ac) {
        return Err("tags out of order".into());
    }
    let outside_ok = raw[..ro].trim().is_empty()
        && raw[rc + "</reasoning>".len()..ao].trim().is_empty()
        && raw[ac + "</answer>".len()..].trim().is_empty();
    if !outside_ok {
        return Err("content outside the tag pair".into());
    }
    Ok(ParsedGeneration {
        reasoning: raw[ro + "<reasoning>".len()..rc].trim().to_string(),
        answer: raw[ao + "<answer>".len()..ac].trim().to_string(),
    })
}

fn verdict(id: u64, stage: Stage, pass: bool, reason: impl Into<String>) -> FilterVerdict {
    FilterVerdict {
        sample_id: id,
        stage,
        pass,
        confidence: None,
        reason: reason.into(),
    }
}

/// Run FORMAT -> LENGTH -> KEYWORD, short-circuiting at the first failure.
/// Returns the verdict trail and, when everything passed, the parsed
/// contents.
pub fn rule_filter(
    gen: &RawGeneration,
    limits: &RuleLimits,
    ctx: &RuleContext<'_>,
) -> (Vec<FilterVerdict>, Option<ParsedGeneration>) {
    let id = gen.sample_id;
    let mut trail = Vec::new();

    let parsed = match parse_tags(&gen.raw_text) {
        Ok(p) => {
            trail.push(verdict(id, Stage::Format, true, "well-formed tags"));
            p
        }
        Err(why) => {
            trail.push(verdict(id, Stage::Format, false, why));
            return (trail, None);
        }
    };

    let r_len = parsed.reasoning.split_whitespace().count();
    let a_len = parsed.answer.split_whitespace().count();
    if r_len < limits.reasoning_min || r_len > limits.reasoning_max {
        trail.push(verdict(
            id,
            Stage::Length,
            false,
            format!(
                "reasoning length {r_len} outside [{}, {}]",
                limits.reasoning_min, limits.reasoning_max
            ),
        ));
        return (trail, None);
    }
    if a_len < limits.answer_min || a_len > limits.answer_max {
        trail.push(verdict(
            id,
            Stage::Length,
            false,
            format!(
                "answer length {a_len} outside [{}, {}]",
                limits.answer_min, limits.answer_max
            ),
        ));
        return (trail, None);
    }
    trail.push(verdict(id, Stage::Length, true, "lengths in range"));

    if let Some(source) = ctx.source_caption {
        if normalize(&parsed.answer) == normalize(source) {
            trail.push(verdict(
                id,
                Stage::Keyword,
                false,
                "answer equals the source caption; modification not applied",
            ));
            return (trail, None);
        }
    }
    let answer_words = content_words(&parsed.answer);
    let mut reference = content_words(ctx.instruction);
    reference.extend(content_words(ctx.target_text));
    let overlap = answer_words.iter().any(|w| reference.contains(w));
    if !overlap {
        trail.push(verdict(
            id,
            Stage::Keyword,
            false,
            "no salient keyword shared with the instruction or target",
        ));
        return (trail, None);
    }
    trail.push(verdict(id, Stage::Keyword, true, "keyword overlap present"));
    (trail, Some(parsed))
}

/// Wrap trace and answer into the tagged transport format the filters expect.
pub fn render_raw(sample_id: u64, trace: &str, answer: &str) -> RawGeneration {
    RawGeneration {
        sample_id,
        raw_text: format!("<reasoning>{trace}</reasoning><answer>{answer}</answer>"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> RuleContext<'static> {
        RuleContext {
            instruction: "change color to blue",
            target_text: "a blue circle small",
            source_caption: Some("a red circle small"),
        }
    }

    fn well_formed() -> RawGeneration {
        render_raw(
            1,
            "src red circle small ; op color blue ; keep shape size ; tgt blue circle small",
            "a blue circle small",
        )
    }

    #[test]
    fn well_formed_generation_passes_all_rules() {
        let (trail, parsed) = rule_filter(&well_formed(), &RuleLimits::default(), &ctx());
        assert!(trail.iter().all(|v| v.pass), "{trail:?}");
        assert_eq!(trail.len(), 3);
        let parsed = parsed.unwrap();
        assert!(parsed.reasoning.starts_with("src"));
        assert_eq!(parsed.answer, "a blue circle small");
    }

    #[test]
    fn missing_closing_tag_fails_format() {
        let gen = RawGeneration {
            sample_id: 2,
            raw_text: "<reasoning>stuff</reasoning><answer>blue circle".into(),
        };
        let (trail, parsed) = rule_filter(&gen, &RuleLimits::default(), &ctx());
        assert!(parsed.is_none());
        assert_eq!(trail.len(), 1);
        assert_eq!(trail[0].stage, Stage::Format);
        assert!(!trail[0].pass);
    }

    #[test]
    fn overlong_reasoning_fails_length() {
        let long = vec!["word"; 300].join(" ");
        let gen = render_raw(3, &long, "a blue circle small");
        let (trail, _) = rule_filter(&gen, &RuleLimits::default(), &ctx());
        let last = trail.last().unwrap();
        assert_eq!(last.stage, Stage::Length);
        assert!(!last.pass);
        assert!(last.reason.contains("300"));
    }

    #[test]
    fn noop_edit_answer_fails_keyword_stage() {
        let trace = vec!["filler"; 20].join(" ");
        let gen = render_raw(4, &trace, "A Red Circle, Small.");
        let (trail, _) = rule_filter(&gen, &RuleLimits::default(), &ctx());
        let last = trail.last().unwrap();
        assert_eq!(last.stage, Stage::Keyword);
        assert!(!last.pass);
        assert!(last.reason.contains("source caption"));
    }

    #[test]
    fn normalization_strips_case_and_punctuation() {
        assert_eq!(normalize("Blue Circle."), "blue circle");
        assert_eq!(normalize("  A   red,  STAR!! "), "a red star");
    }
}
