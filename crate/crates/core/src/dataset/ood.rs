//! Out-of-distribution clinical-note sentences.

use std::collections::HashSet;
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::dataset::{build_pairs, InversionPair, SourceTag, Tokenizer};
use crate::error::Result;
use crate::judge::{Judge, JudgeMode};
use crate::model::LmParams;
use crate::tensor::Real;

pub const MAX_WORDS: usize = 12;
/// Clinical sentences are truncated to this many tokens before pairing.
pub const MAX_TOKENS: usize = 16;

const TEMPLATE: &str = include_str!("../../prompts/clinical.txt");

/// The generation prompt; `count = 100` gives the canonical wording.
pub fn clinical_prompt(count: usize) -> String {
    TEMPLATE.replace("{count}", &count.to_string())
}

fn strip_marker(line: &str) -> &str {
    let l = line.trim();
    let digits = l.bytes().take_while(u8::is_ascii_digit).count();
    let l = if digits > 0 && l[digits..].starts_with(['.', ')']) {
        &l[digits + 1..]
    } else {
        l
    };
    let l = l.trim_start_matches(['-', '*', '•']).trim();
    let quoted = ['"', '“', '”', '\''];
    l.trim_start_matches(quoted).trim_end_matches(quoted).trim()
}

/// One sentence per line; list markers and quotes are stripped, lines over
/// the word limit and duplicates are dropped, and at most `count` are kept.
pub fn parse_sentences(response: &str, count: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in response.lines() {
        let s = strip_marker(line);
        if s.is_empty() {
            continue;
        }
        let words = s.split_whitespace().count();
        if words > MAX_WORDS {
            log::debug!("dropping {words}-word line `{s}`");
            continue;
        }
        if seen.insert(s.to_string()) {
            out.push(s.to_string());
        }
        if out.len() == count {
            break;
        }
    }
    out
}

const NAMES: [&str; 20] = [
    "John D.",
    "Mary T",
    "Pt R.K.",
    "Anna",
    "Mr. B",
    "Ms. L",
    "Carlos M.",
    "J.S.",
    "Ruth",
    "Omar",
    "Elderly female",
    "Elderly male",
    "Pt",
    "Ella W.",
    "Sam P.",
    "Mrs. H",
    "Tom",
    "Lin Q.",
    "Pt A",
    "Nadia",
];
const CONDITIONS: [&str; 20] = [
    "CHF",
    "COPD exacerbation",
    "pneumonia",
    "sepsis",
    "DKA",
    "UTI",
    "afib",
    "CKD stage 3",
    "asthma",
    "cellulitis",
    "pancreatitis",
    "GI bleed",
    "stroke",
    "MI",
    "HTN",
    "anemia",
    "DVT",
    "appendicitis",
    "hypothyroidism",
    "migraine",
];
const SYMPTOMS: [&str; 20] = [
    "chest pain",
    "SOB",
    "fever",
    "dizziness",
    "nausea",
    "cough",
    "fatigue",
    "abd pain",
    "headache",
    "confusion",
    "palpitations",
    "leg swelling",
    "hypotension",
    "rash",
    "vomiting",
    "syncope",
    "back pain",
    "dysuria",
    "weakness",
    "wheezing",
];

/// Deterministic 100-sentence stand-in for a generated set.
pub fn stub_sentences() -> Vec<String> {
    (0..100)
        .map(|i| {
            let name = NAMES[(i * 7) % 20];
            let cond = CONDITIONS[(i * 3 + 1) % 20];
            let sym = SYMPTOMS[(i * 11 + 5) % 20];
            let age = 21 + (i * 13) % 70;
            let (mm, dd, yy) = (1 + i % 12, 1 + (i * 5) % 28, 2 + i % 17);
            match i % 5 {
                0 => format!("{name}, {age}, admitted {mm:02}/{dd:02}/{yy:02} for {sym}."),
                1 => format!("{name}, {age}, c/o {sym}; hx of {cond}."),
                2 => format!("Admitted {mm:02}-{dd:02}-20{yy:02}, {sym}, suspected {cond}."),
                3 => format!(
                    "{name}, DOB 19{:02}-{mm:02}-{dd:02}. {cond}. Stable overnight.",
                    30 + age % 60
                ),
                _ => format!("{age}yo with {cond}, {sym} on exertion."),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodSet {
    pub sentences: Vec<String>,
    pub raw_response: String,
}

/// Requests `count` sentences (stub mode: the built-in set). The raw
/// response is written to `raw_out` when given.
pub fn generate_ood_set(judge: &Judge, count: usize, raw_out: Option<&Path>) -> Result<OodSet> {
    let raw_response = match judge.config().mode {
        JudgeMode::Stub => stub_sentences().join("\n"),
        JudgeMode::Live => judge.chat(&clinical_prompt(count))?,
    };
    if let Some(p) = raw_out {
        write_atomic(p, raw_response.as_bytes())?;
    }
    let sentences = parse_sentences(&raw_response, count);
    if sentences.len() < count {
        log::warn!("requested {count} sentences, parsed {}", sentences.len());
    }
    Ok(OodSet {
        sentences,
        raw_response,
    })
}

/// Tokenizes, truncates to [`MAX_TOKENS`], and captures representations.
pub fn ood_pairs<T: Real>(
    target: &LmParams<T>,
    tok: &Tokenizer,
    sentences: &[String],
    layer: usize,
    bos: bool,
) -> Result<Vec<InversionPair<T>>> {
    let chunks: Vec<_> = sentences
        .iter()
        .map(|s| {
            let mut t = tok.encode(s);
            t.truncate(MAX_TOKENS);
            t
        })
        .filter(|t| !t.is_empty())
        .collect();
    build_pairs(target, &chunks, layer, SourceTag::Ood, bos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::JudgeConfig;

    #[test]
    fn canonical_prompt() {
        let p = clinical_prompt(100);
        assert!(p.starts_with("Generate 100 short sentences about fictional patients"));
        assert!(p.contains("- Each sentence ≤ 12 words\n"));
        assert!(p.ends_with("Output Exactly 100 unique sentences.\n"));
    }

    #[test]
    fn stub_fixture() {
        let s = stub_sentences();
        assert_eq!(s.len(), 100);
        assert_eq!(s.iter().collect::<HashSet<_>>().len(), 100);
        assert!(s.iter().all(|x| x.split_whitespace().count() <= MAX_WORDS));
        let judge = Judge::new(JudgeConfig::default()).unwrap();
        let set = generate_ood_set(&judge, 100, None).unwrap();
        assert_eq!(set.sentences, s);
    }

    #[test]
    fn parsing() {
        let raw = "Here you go:\n1. \"Pt c/o dizziness and nausea; hx of diabetes.\"\n2) Elderly male, HTN.\n\
                   - one two three four five six seven eight nine ten eleven twelve thirteen\n\
                   * Elderly male, HTN.\n";
        let s = parse_sentences(raw, 100);
        assert_eq!(
            s,
            [
                "Here you go:",
                "Pt c/o dizziness and nausea; hx of diabetes.",
                "Elderly male, HTN."
            ]
        );
        assert_eq!(parse_sentences(raw, 1).len(), 1);
    }
}
