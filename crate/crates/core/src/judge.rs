//! LLM-as-a-judge scoring of structure, entity, and topic preservation.
//!
//! Live mode posts OpenAI-compatible chat-completion requests. Stub mode
//! is offline and deterministic: every dimension scores
//! `round(5 · clipped word overlap)`. Stub scores exist so the pipeline
//! runs without a network and are not comparable to real judge scores.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Structure,
    Entity,
    Topic,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Structure, Dimension::Entity, Dimension::Topic];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Structure => "structure",
            Dimension::Entity => "entity",
            Dimension::Topic => "topic",
        }
    }

    fn template(self) -> &'static str {
        match self {
            Dimension::Structure => include_str!("../prompts/structure.txt"),
            Dimension::Entity => include_str!("../prompts/entity.txt"),
            Dimension::Topic => include_str!("../prompts/topic.txt"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeMode {
    Live,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub credential_env: String,
    pub timeout_secs: f64,
    pub max_retries: usize,
    /// First retry delay; doubles on every further attempt.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub mode: JudgeMode,
    /// JSON Lines transcript of every request and response.
    pub transcript: Option<PathBuf>,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4.1-mini".into(),
            credential_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
            mode: JudgeMode::Stub,
            transcript: None,
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 {
            return Err(Error::Config(
                "judge max_in_flight must be at least 1".into(),
            ));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(Error::Config("judge timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResult {
    pub dimension: Dimension,
    pub raw_score: u8,
    pub normalized: f64,
    pub raw_response: String,
}

/// Instantiates the rubric for `dimension`. Substitution is a single pass
/// over the template, so placeholder text inside `gt` or `gen` stays
/// literal.
pub fn render_prompt(dimension: Dimension, gt: &str, gen: &str) -> String {
    let template = dimension.template();
    let mut out = String::with_capacity(template.len() + gt.len() + gen.len());
    let mut rest = template;
    while let Some(i) = rest.find('{') {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        if let Some(t) = tail.strip_prefix("{gt}") {
            out.push_str(gt);
            rest = t;
        } else if let Some(t) = tail.strip_prefix("{gen}") {
            out.push_str(gen);
            rest = t;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

fn answer_pattern(dimension: Dimension) -> &'static Regex {
    static PATTERNS: OnceLock<HashMap<Dimension, Regex>> = OnceLock::new();
    let map = PATTERNS.get_or_init(|| {
        Dimension::ALL
            .iter()
            .map(|&d| {
                let re = format!(
                    r"(?i)^[\s*`]*\[ans\]\s*{}\s*:\s*(\d+)\s*/\s*5[\s*`.]*$",
                    d.as_str()
                );
                (d, Regex::new(&re).expect("valid pattern"))
            })
            .collect()
    });
    &map[&dimension]
}

/// Score on the last line shaped like `[ANS] <dimension>: <n>/5`.
pub fn parse_score(response: &str, dimension: Dimension) -> Result<u8> {
    let re = answer_pattern(dimension);
    let caps = response
        .lines()
        .rev()
        .find_map(|l| re.captures(l))
        .ok_or_else(|| {
            Error::Parse(format!(
                "no `[ANS] {}: n/5` line in response",
                dimension.as_str()
            ))
        })?;
    match caps[1].parse::<u8>() {
        Ok(s) if s <= 5 => Ok(s),
        _ => Err(Error::Parse(format!(
            "{} score {} outside 0..=5",
            dimension.as_str(),
            &caps[1]
        ))),
    }
}

/// Clipped overlap of lower-cased words divided by the longer length.
pub fn overlap_ratio(gt: &str, gen: &str) -> f64 {
    let words = |s: &str| {
        s.split_whitespace()
            .map(str::to_lowercase)
            .collect::<Vec<_>>()
    };
    let (a, b) = (words(gt), words(gen));
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 1.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &a {
        *counts.entry(w).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for w in &b {
        if let Some(c) = counts.get_mut(w.as_str()).filter(|c| **c > 0) {
            *c -= 1;
            overlap += 1;
        }
    }
    overlap as f64 / denom as f64
}

#[derive(Serialize)]
struct TranscriptLine<'a> {
    kind: &'a str,
    attempt: usize,
    prompt: &'a str,
    response: Option<&'a str>,
    error: Option<&'a str>,
}

pub struct Judge {
    cfg: JudgeConfig,
    client: Option<reqwest::blocking::Client>,
    credential: Option<String>,
    transcript: Option<Mutex<File>>,
    requests_sent: AtomicUsize,
}

impl Judge {
    pub fn new(cfg: JudgeConfig) -> Result<Self> {
        cfg.validate()?;
        let (client, credential) = match cfg.mode {
            JudgeMode::Stub => (None, None),
            JudgeMode::Live => {
                let client = reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs_f64(cfg.timeout_secs))
                    .build()
                    .map_err(|e| Error::Transport(e.to_string()))?;
                let cred = std::env::var(&cfg.credential_env)
                    .ok()
                    .filter(|s| !s.is_empty());
                if cred.is_none() {
                    log::warn!(
                        "`{}` is unset; sending judge requests without credentials",
                        cfg.credential_env
                    );
                }
                (Some(client), cred)
            }
        };
        let transcript = match &cfg.transcript {
            Some(p) => Some(Mutex::new(open_append(p)?)),
            None => None,
        };
        Ok(Judge {
            cfg,
            client,
            credential,
            transcript,
            requests_sent: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &JudgeConfig {
        &self.cfg
    }

    /// Number of HTTP requests issued so far.
    pub fn requests_sent(&self) -> usize {
        self.requests_sent.load(Ordering::Relaxed)
    }

    fn redact(&self, s: &str) -> String {
        match &self.credential {
            Some(c) => s.replace(c.as_str(), "[REDACTED]"),
            None => s.to_string(),
        }
    }

    fn log_line(
        &self,
        kind: &str,
        attempt: usize,
        prompt: &str,
        response: Option<&str>,
        error: Option<&str>,
    ) {
        let Some(file) = &self.transcript else { return };
        let response = response.map(|r| self.redact(r));
        let error = error.map(|e| self.redact(e));
        let line = TranscriptLine {
            kind,
            attempt,
            prompt,
            response: response.as_deref(),
            error: error.as_deref(),
        };
        let mut f = file.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = serde_json::to_writer(&mut *f, &line)
            .map_err(std::io::Error::from)
            .and_then(|_| f.write_all(b"\n"))
        {
            log::warn!("could not write judge transcript: {e}");
        }
    }

    fn send_once(&self, prompt: &str) -> Result<String> {
        let client = self.client.as_ref().expect("live mode has a client");
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": 0,
        });
        let mut req = client.post(&self.cfg.endpoint).json(&body);
        if let Some(c) = &self.credential {
            req = req.bearer_auth(c);
        }
        self.requests_sent.fetch_add(1, Ordering::Relaxed);
        let resp = req
            .send()
            .map_err(|e| Error::Transport(self.redact(&e.to_string())))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Error::Transport(self.redact(&e.to_string())))?;
        if !status.is_success() {
            return Err(Error::Transport(format!(
                "HTTP {status}: {}",
                self.redact(&text)
            )));
        }
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Transport(format!("malformed response body: {e}")))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Transport("response lacks choices[0].message.content".into()))
    }

    /// Sends `prompt`, retrying with exponential backoff until `accept`
    /// returns a value.
    fn with_retries<R>(
        &self,
        kind: &str,
        prompt: &str,
        accept: impl Fn(&str) -> Result<R>,
    ) -> Result<(R, String)> {
        let attempts = self.cfg.max_retries + 1;
        let mut cause = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self
                    .cfg
                    .backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.send_once(prompt) {
                Ok(text) => {
                    let text = self.redact(&text);
                    match accept(&text) {
                        Ok(r) => {
                            self.log_line(kind, attempt, prompt, Some(&text), None);
                            return Ok((r, text));
                        }
                        Err(e) => {
                            cause = e.to_string();
                            self.log_line(kind, attempt, prompt, Some(&text), Some(&cause));
                        }
                    }
                }
                Err(e) => {
                    cause = e.to_string();
                    self.log_line(kind, attempt, prompt, None, Some(&cause));
                }
            }
            log::debug!("{kind} attempt {} failed: {cause}", attempt + 1);
        }
        Err(Error::JudgeUnavailable { attempts, cause })
    }

    /// Free-form chat completion; only meaningful in live mode.
    pub fn chat(&self, prompt: &str) -> Result<String> {
        if self.cfg.mode == JudgeMode::Stub {
            return Err(Error::Config("chat requests need a live judge".into()));
        }
        self.with_retries("chat", prompt, |_| Ok(()))
            .map(|(_, text)| text)
    }

    pub fn request_score(&self, dimension: Dimension, gt: &str, gen: &str) -> Result<JudgeResult> {
        let prompt = render_prompt(dimension, gt, gen);
        let (raw_score, raw_response) = match self.cfg.mode {
            JudgeMode::Stub => {
                let s = (5.0 * overlap_ratio(gt, gen)).round() as u8;
                let text = format!("[ANS] {}: {s}/5", dimension.as_str());
                self.log_line(dimension.as_str(), 0, &prompt, Some(&text), None);
                (parse_score(&text, dimension)?, text)
            }
            JudgeMode::Live => {
                self.with_retries(dimension.as_str(), &prompt, |t| parse_score(t, dimension))?
            }
        };
        Ok(JudgeResult {
            dimension,
            raw_score,
            normalized: raw_score as f64 / 5.0,
            raw_response,
        })
    }

    /// All three dimensions for every pair, with at most `max_in_flight`
    /// requests outstanding. Results come back in submission order.
    pub fn score_all(&self, pairs: &[(String, String)]) -> Vec<Result<[JudgeResult; 3]>> {
        let jobs: Vec<(usize, Dimension)> = (0..pairs.len())
            .flat_map(|i| Dimension::ALL.into_iter().map(move |d| (i, d)))
            .collect();
        let slots: Vec<Mutex<Option<Result<JudgeResult>>>> =
            jobs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = match self.cfg.mode {
            JudgeMode::Stub => 1,
            JudgeMode::Live => self.cfg.max_in_flight.min(jobs.len()).max(1),
        };
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let j = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&(i, d)) = jobs.get(j) else { break };
                    let r = self.request_score(d, &pairs[i].0, &pairs[i].1);
                    *slots[j].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
                });
            }
        });
        let mut results = slots.into_iter().map(|m| {
            m.into_inner()
                .unwrap_or_else(|p| p.into_inner())
                .expect("every job ran")
        });
        (0..pairs.len())
            .map(|_| {
                let (a, b, c) = (
                    results.next().unwrap(),
                    results.next().unwrap(),
                    results.next().unwrap(),
                );
                Ok([a?, b?, c?])
            })
            .collect()
    }
}

fn open_append(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes_once() {
        let p = render_prompt(Dimension::Structure, "A cat sat.", "A dog sat.");
        assert!(
            p.starts_with("You are given two sentences:\n[GT]: A cat sat.\n[GEN]: A dog sat.\n")
        );
        assert!(p.contains("Evaluate Structural Frame Similarity."));
        assert!(p.ends_with("Answer: [ANS] structure: [score]/5\n"));
        let tricky = render_prompt(Dimension::Topic, "x {gen} [GEN]", "{gt}");
        assert!(tricky.contains("[GT]: x {gen} [GEN]\n[GEN]: {gt}\n"));
        assert_eq!(
            tricky,
            render_prompt(Dimension::Topic, "x {gen} [GEN]", "{gt}")
        );
    }

    #[test]
    fn parse_formats() {
        assert_eq!(
            parse_score("[ANS] topic: 5/5", Dimension::Topic).unwrap(),
            5
        );
        assert_eq!(
            parse_score("...reasoning...\n[ANS] entity: 3/5", Dimension::Entity).unwrap(),
            3
        );
        assert_eq!(
            parse_score("  [ans] STRUCTURE : 4 / 5  ", Dimension::Structure).unwrap(),
            4
        );
        assert_eq!(
            parse_score("**[ANS] topic: 2/5**", Dimension::Topic).unwrap(),
            2
        );
        assert_eq!(
            parse_score(
                "[ANS] entity: 1/5\nrevised\n[ANS] entity: 2/5",
                Dimension::Entity
            )
            .unwrap(),
            2
        );
        assert!(matches!(
            parse_score("[ANS] entity: 7/5", Dimension::Entity),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            parse_score("[ANS] topic: 3/5", Dimension::Entity),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            parse_score("no answer", Dimension::Topic),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn stub_rules() {
        let j = Judge::new(JudgeConfig::default()).unwrap();
        for d in Dimension::ALL {
            let same = j.request_score(d, "the cat sat", "the cat sat").unwrap();
            assert_eq!((same.raw_score, same.normalized), (5, 1.0));
            let none = j.request_score(d, "the cat sat", "a dog ran").unwrap();
            assert_eq!(none.raw_score, 0);
        }
        let half = j
            .request_score(Dimension::Entity, "a b c d", "a b x y")
            .unwrap();
        assert_eq!(half.raw_score, 3); // round(2.5) away from zero
        assert_eq!(j.requests_sent(), 0);
        assert!(j.chat("hi").is_err());
    }

    #[test]
    fn score_all_keeps_order() {
        let j = Judge::new(JudgeConfig::default()).unwrap();
        let pairs = vec![
            ("a b".to_string(), "a b".to_string()),
            ("a b".to_string(), "c d".to_string()),
        ];
        let r = j.score_all(&pairs);
        assert_eq!(r[0].as_ref().unwrap()[0].raw_score, 5);
        assert_eq!(r[1].as_ref().unwrap()[2].raw_score, 0);
        assert_eq!(r[1].as_ref().unwrap()[1].dimension, Dimension::Entity);
    }
}
