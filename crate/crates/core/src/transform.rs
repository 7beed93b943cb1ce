//! Condition A (stripped context) and Condition B (trajectory context)
//! prompt rendering, plus context-length accounting.

use std::fmt;
use std::io::Write;
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callparse::render_call;
use crate::corpus::{Role, ScoredExample, Turn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    /// Prior request/response lines removed.
    #[serde(rename = "A")]
    Stripped,
    /// Full action-observation trace kept.
    #[serde(rename = "B")]
    Trajectory,
}

impl Condition {
    pub const ALL: [Condition; 2] = [Condition::Stripped, Condition::Trajectory];

    pub fn tag(self) -> &'static str {
        match self {
            Condition::Stripped => "A",
            Condition::Trajectory => "B",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" | "stripped" => Ok(Condition::Stripped),
            "B" | "b" | "trajectory" => Ok(Condition::Trajectory),
            other => Err(format!("unknown condition {other:?} (expected A or B)")),
        }
    }
}

/// Line prefixes used when rendering turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub user_prefix: String,
    pub assistant_prefix: String,
    pub api_request_prefix: String,
    pub api_response_prefix: String,
    pub cue: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            user_prefix: "User: ".into(),
            assistant_prefix: "Assistant: ".into(),
            api_request_prefix: "API-Request: ".into(),
            api_response_prefix: "API-Response: ".into(),
            cue: "API-Request:".into(),
        }
    }
}

impl PromptTemplate {
    fn prefix(&self, role: Role) -> &str {
        match role {
            Role::User => &self.user_prefix,
            Role::AssistantText => &self.assistant_prefix,
            Role::ApiRequest => &self.api_request_prefix,
            Role::ApiResponse => &self.api_response_prefix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub example_id: String,
    pub condition: Condition,
    pub text: String,
    /// Canonical rendering of the expected call.
    pub target: String,
    pub block_id: usize,
    pub char_len: usize,
    pub ws_token_len: usize,
    pub ext_token_len: Option<usize>,
}

pub fn strip_trajectory(context: &[Turn]) -> Vec<Turn> {
    context
        .iter()
        .filter(|t| !t.role.is_trace())
        .cloned()
        .collect()
}

fn push_line(out: &mut String, prefix: &str, body: &str) {
    out.push_str(prefix);
    // One turn per line, so embedded newlines are flattened.
    for (i, piece) in body.split(['\n', '\r']).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(piece);
    }
    out.push('\n');
}

pub fn render_prompt(
    example: &ScoredExample,
    condition: Condition,
    template: &PromptTemplate,
) -> RenderedPrompt {
    let mut text = String::new();
    for turn in &example.context {
        if condition == Condition::Stripped && turn.role.is_trace() {
            continue;
        }
        let body = match (&turn.call, &turn.response_payload) {
            (Some(call), _) => render_call(call),
            (None, Some(payload)) => payload.clone(),
            (None, None) => turn.text.clone(),
        };
        push_line(&mut text, template.prefix(turn.role), &body);
    }
    text.push_str(&template.cue);
    RenderedPrompt {
        example_id: example.id.clone(),
        condition,
        target: render_call(&example.expected),
        block_id: example.block_id,
        char_len: text.chars().count(),
        ws_token_len: text.split_whitespace().count(),
        ext_token_len: None,
        text,
    }
}

/// Training/eval pair export line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub example_id: String,
    pub condition: Condition,
    pub prompt: String,
    pub target: String,
}

impl From<&RenderedPrompt> for PromptRecord {
    fn from(p: &RenderedPrompt) -> Self {
        PromptRecord {
            example_id: p.example_id.clone(),
            condition: p.condition,
            prompt: p.text.clone(),
            target: p.target.clone(),
        }
    }
}

pub fn write_prompts_jsonl(prompts: &[RenderedPrompt], mut out: impl Write) -> std::io::Result<()> {
    for p in prompts {
        serde_json::to_writer(&mut out, &PromptRecord::from(p))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("tokenizer command {command:?} failed: {message}")]
    Tokenizer { command: String, message: String },
}

/// External token counter: a program that reads text on stdin and prints a
/// single integer count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalTokenizer {
    pub program: String,
    pub args: Vec<String>,
    pub workers: usize,
}

impl ExternalTokenizer {
    pub fn new(command_line: &str, workers: usize) -> Option<Self> {
        let mut parts = command_line.split_whitespace().map(str::to_string);
        let program = parts.next()?;
        Some(ExternalTokenizer {
            program,
            args: parts.collect(),
            workers: workers.max(1),
        })
    }

    fn describe(&self) -> String {
        std::iter::once(self.program.as_str())
            .chain(self.args.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn count(&self, text: &str) -> Result<usize, StatsError> {
        let err = |message: String| StatsError::Tokenizer {
            command: self.describe(),
            message,
        };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| err(e.to_string()))?;
        {
            let mut stdin = child.stdin.take().expect("stdin is piped");
            stdin
                .write_all(text.as_bytes())
                .map_err(|e| err(e.to_string()))?;
        }
        let output = child.wait_with_output().map_err(|e| err(e.to_string()))?;
        if !output.status.success() {
            return Err(err(format!("exit status {}", output.status)));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        stdout.trim().parse().map_err(|_| {
            err(format!(
                "expected an integer count, got {:?}",
                stdout.trim()
            ))
        })
    }

    /// Fills `ext_token_len` for every prompt using at most `workers` processes.
    pub fn annotate(&self, prompts: &mut [RenderedPrompt]) -> Result<(), StatsError> {
        let next = AtomicUsize::new(0);
        let results: Vec<Result<Vec<(usize, usize)>, StatsError>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..self.workers.min(prompts.len().max(1)))
                .map(|_| {
                    let next = &next;
                    let prompts = &*prompts;
                    s.spawn(move || {
                        let mut done = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= prompts.len() {
                                return Ok(done);
                            }
                            done.push((i, self.count(&prompts[i].text)?));
                        }
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("tokenizer worker panicked"))
                .collect()
        });
        for batch in results {
            for (i, n) in batch? {
                prompts[i].ext_token_len = Some(n);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LengthTotals {
    pub prompts: usize,
    pub chars: usize,
    pub ws_tokens: usize,
    /// Present only when every prompt carries an external count.
    pub ext_tokens: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContextStats {
    #[serde(rename = "A")]
    pub stripped: LengthTotals,
    #[serde(rename = "B")]
    pub trajectory: LengthTotals,
}

impl ContextStats {
    pub fn get(&self, condition: Condition) -> &LengthTotals {
        match condition {
            Condition::Stripped => &self.stripped,
            Condition::Trajectory => &self.trajectory,
        }
    }

    /// B/A ratio of whitespace tokens, if A is nonzero.
    pub fn ws_ratio(&self) -> Option<f64> {
        (self.stripped.ws_tokens > 0)
            .then(|| self.trajectory.ws_tokens as f64 / self.stripped.ws_tokens as f64)
    }
}

pub fn context_stats(prompts: &[RenderedPrompt]) -> ContextStats {
    let mut stats = ContextStats::default();
    let mut ext_complete = [true, true];
    for p in prompts {
        let (totals, complete) = match p.condition {
            Condition::Stripped => (&mut stats.stripped, &mut ext_complete[0]),
            Condition::Trajectory => (&mut stats.trajectory, &mut ext_complete[1]),
        };
        totals.prompts += 1;
        totals.chars += p.char_len;
        totals.ws_tokens += p.ws_token_len;
        match p.ext_token_len {
            Some(n) => *totals.ext_tokens.get_or_insert(0) += n,
            None => *complete = false,
        }
    }
    if !ext_complete[0] {
        stats.stripped.ext_tokens = None;
    }
    if !ext_complete[1] {
        stats.trajectory.ext_tokens = None;
    }
    stats
}
