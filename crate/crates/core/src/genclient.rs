//! Completions from an OpenAI-compatible chat endpoint or from recorded
//! files, with a content-addressed on-disk cache.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transform::{Condition, RenderedPrompt};

pub const API_KEY_ENV: &str = "TOOLSTREAM_API_KEY";

#[derive(Debug, Error)]
pub enum GenError {
    #[error("transport error talking to {url}: {message}")]
    Transport { url: String, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    Response(String),
    #[error("cache {path}: {message}")]
    Cache { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    Import {
        path: String,
        line: usize,
        message: String,
    },
    #[error("stale completion for {example_id} ({condition}): prompt hash mismatch")]
    Stale {
        example_id: String,
        condition: Condition,
    },
}

/// Greedy decoding settings; temperature is always zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    /// `{stage}` is replaced by the stage index.
    pub model_id: String,
    pub max_new_tokens: u32,
    pub stop_sequences: Vec<String>,
    pub timeout_secs: u64,
    pub max_parallel: usize,
    pub retries: u32,
    pub retry_delay_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_id: "stage-{stage}".into(),
            max_new_tokens: 128,
            stop_sequences: vec!["\n".into()],
            timeout_secs: 60,
            max_parallel: 4,
            retries: 2,
            retry_delay_ms: 500,
        }
    }
}

impl EndpointConfig {
    pub const TEMPERATURE: f64 = 0.0;

    pub fn model_for(&self, stage: usize) -> String {
        self.model_id.replace("{stage}", &stage.to_string())
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionSource {
    Http,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub example_id: String,
    pub condition: Condition,
    pub stage: usize,
    pub prompt_hash: String,
    pub text: String,
    #[serde(default = "imported", skip_serializing)]
    pub source: CompletionSource,
}

fn imported() -> CompletionSource {
    CompletionSource::Imported
}

pub fn prompt_hash(prompt_text: &str) -> String {
    let digest = Sha256::digest(prompt_text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_completions_jsonl(
    records: &[CompletionRecord],
    mut out: impl Write,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Completion cache: one JSON file per (stage, condition, prompt hash).
#[derive(Debug)]
pub struct CompletionCache {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl CompletionCache {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        CompletionCache {
            root: root.into(),
            write_lock: Mutex::new(()),
        }
    }

    fn path(&self, stage: usize, condition: Condition, hash: &str) -> PathBuf {
        self.root
            .join(format!("stage-{stage}"))
            .join(condition.tag())
            .join(format!("{hash}.json"))
    }

    pub fn get(&self, stage: usize, condition: Condition, hash: &str) -> Option<CompletionRecord> {
        let text = fs::read_to_string(self.path(stage, condition, hash)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put(&self, record: &CompletionRecord) -> Result<(), GenError> {
        let path = self.path(record.stage, record.condition, &record.prompt_hash);
        let err = |e: std::io::Error| GenError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let _guard = self.write_lock.lock().expect("cache lock poisoned");
        fs::create_dir_all(path.parent().expect("cache path has a parent")).map_err(err)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(record).expect("record serializes")).map_err(err)?;
        fs::rename(&tmp, &path).map_err(err)?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct Generator {
    cfg: EndpointConfig,
    agent: ureq::Agent,
    cache: Option<CompletionCache>,
    api_key: Option<String>,
    requests: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl Generator {
    pub fn new(cfg: EndpointConfig, cache: Option<CompletionCache>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build();
        Generator {
            cfg,
            agent,
            cache,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            requests: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// HTTP requests issued so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    pub fn generate(
        &self,
        prompt: &RenderedPrompt,
        stage: usize,
    ) -> Result<CompletionRecord, GenError> {
        let hash = prompt_hash(&prompt.text);
        if let Some(cache) = &self.cache {
            if let Some(mut hit) = cache.get(stage, prompt.condition, &hash) {
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
                hit.example_id = prompt.example_id.clone();
                hit.source = CompletionSource::Http;
                return Ok(hit);
            }
        }
        let text = self.request_with_retries(&prompt.text, stage)?;
        let record = CompletionRecord {
            example_id: prompt.example_id.clone(),
            condition: prompt.condition,
            stage,
            prompt_hash: hash,
            text,
            source: CompletionSource::Http,
        };
        if let Some(cache) = &self.cache {
            cache.put(&record)?;
        }
        Ok(record)
    }

    fn request_with_retries(&self, prompt: &str, stage: usize) -> Result<String, GenError> {
        let mut attempt = 0;
        loop {
            match self.request_once(prompt, stage) {
                Ok(text) => return Ok(text),
                Err(e) if attempt < self.cfg.retries && is_retryable(&e) => {
                    let delay = self.cfg.retry_delay_ms.saturating_mul(1 << attempt.min(10));
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn request_once(&self, prompt: &str, stage: usize) -> Result<String, GenError> {
        let url = self.cfg.url();
        let body = json!({
            "model": self.cfg.model_for(stage),
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
            "max_tokens": self.cfg.max_new_tokens,
            "stop": self.cfg.stop_sequences,
        });
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        self.requests.fetch_add(1, Ordering::SeqCst);
        let resp = match req.send_json(body) {
            Ok(resp) => resp,
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                return Err(GenError::Endpoint {
                    status,
                    body: body.chars().take(200).collect(),
                });
            }
            Err(ureq::Error::Transport(t)) => {
                return Err(GenError::Transport {
                    url,
                    message: t.to_string(),
                })
            }
        };
        let value: serde_json::Value = resp
            .into_json()
            .map_err(|e| GenError::Response(e.to_string()))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| GenError::Response("missing choices[0].message.content".into()))
    }

    /// Completes every prompt with at most `max_parallel` requests in flight.
    /// Output slot `i` always belongs to input prompt `i`.
    pub fn batch_generate(&self, prompts: &[RenderedPrompt], stage: usize) -> BatchOutcome {
        let slots: Vec<Mutex<Option<Result<CompletionRecord, GenError>>>> =
            prompts.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.cfg.max_parallel.max(1).min(prompts.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= prompts.len() {
                        break;
                    }
                    let result = self.generate(&prompts[i], stage);
                    *slots[i].lock().expect("slot lock poisoned") = Some(result);
                });
            }
        });
        let mut outcome = BatchOutcome::default();
        for (i, slot) in slots.into_iter().enumerate() {
            match slot.into_inner().expect("slot lock poisoned") {
                Some(Ok(rec)) => outcome.records.push(Some(rec)),
                Some(Err(error)) => {
                    outcome.records.push(None);
                    outcome.failures.push(BatchFailure {
                        index: i,
                        example_id: prompts[i].example_id.clone(),
                        error,
                    });
                }
                None => unreachable!("every slot is filled before the scope ends"),
            }
        }
        outcome
    }
}

fn is_retryable(e: &GenError) -> bool {
    match e {
        GenError::Transport { .. } => true,
        GenError::Endpoint { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

#[derive(Debug)]
pub struct BatchFailure {
    pub index: usize,
    pub example_id: String,
    pub error: GenError,
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    /// One slot per input prompt; `None` where the item failed.
    pub records: Vec<Option<CompletionRecord>>,
    pub failures: Vec<BatchFailure>,
}

impl BatchOutcome {
    pub fn completed(&self) -> impl Iterator<Item = &CompletionRecord> {
        self.records.iter().flatten()
    }
}

/// Expected prompt hashes keyed by (example id, condition).
pub type PromptIndex = HashMap<(String, Condition), String>;

pub fn index_prompts(prompts: &[RenderedPrompt]) -> PromptIndex {
    prompts
        .iter()
        .map(|p| ((p.example_id.clone(), p.condition), prompt_hash(&p.text)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaleWarning {
    pub example_id: String,
    pub condition: Condition,
    pub stage: usize,
}

#[derive(Debug, Default)]
pub struct Imported {
    pub records: Vec<CompletionRecord>,
    pub stale: Vec<StaleWarning>,
}

/// Loads recorded completions. With `prompts`, every record whose hash does
/// not match the current rendering is reported as stale, or rejected when
/// `strict` is set.
pub fn import_completions(
    path: &Path,
    prompts: Option<&PromptIndex>,
    strict: bool,
) -> Result<Imported, GenError> {
    let file = fs::File::open(path).map_err(|e| GenError::Import {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut out = Imported::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let err = |message: String| GenError::Import {
            path: path.display().to_string(),
            line: idx + 1,
            message,
        };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: CompletionRecord =
            serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.source = CompletionSource::Imported;
        if let Some(index) = prompts {
            let key = (rec.example_id.clone(), rec.condition);
            if index.get(&key) != Some(&rec.prompt_hash) {
                if strict {
                    return Err(GenError::Stale {
                        example_id: rec.example_id,
                        condition: rec.condition,
                    });
                }
                out.stale.push(StaleWarning {
                    example_id: rec.example_id.clone(),
                    condition: rec.condition,
                    stage: rec.stage,
                });
            }
        }
        out.records.push(rec);
    }
    Ok(out)
}

pub fn default_cache_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("cache")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(id: &str, text: &str) -> RenderedPrompt {
        RenderedPrompt {
            example_id: id.into(),
            condition: Condition::Trajectory,
            text: text.into(),
            target: "[Ping()]".into(),
            block_id: 1,
            char_len: text.len(),
            ws_token_len: text.split_whitespace().count(),
            ext_token_len: None,
        }
    }

    #[test]
    fn hash_is_sha256_hex() {
        assert_eq!(
            prompt_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn model_id_substitutes_stage() {
        let cfg = EndpointConfig::default();
        assert_eq!(cfg.model_for(3), "stage-3");
        assert_eq!(cfg.url(), "http://127.0.0.1:8000/v1/chat/completions");
    }

    #[test]
    fn unreachable_endpoint_is_transport_error_without_cache_entry() {
        let dir = tempfile::tempdir().unwrap();
        // Port 9 on loopback refuses connections.
        let cfg = EndpointConfig {
            base_url: "http://127.0.0.1:9/v1".into(),
            retries: 1,
            retry_delay_ms: 1,
            timeout_secs: 2,
            ..EndpointConfig::default()
        };
        let g = Generator::new(cfg, Some(CompletionCache::open(dir.path())));
        let p = prompt("e#1", "User: hi\nAPI-Request:");
        let err = g.generate(&p, 1).unwrap_err();
        assert!(matches!(err, GenError::Transport { .. }), "{err}");
        assert_eq!(g.requests_sent(), 2);
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = CompletionCache::open(dir.path());
        let rec = CompletionRecord {
            example_id: "e#1".into(),
            condition: Condition::Stripped,
            stage: 2,
            prompt_hash: prompt_hash("x"),
            text: "[Ping()]".into(),
            source: CompletionSource::Http,
        };
        cache.put(&rec).unwrap();
        let back = cache.get(2, Condition::Stripped, &rec.prompt_hash).unwrap();
        assert_eq!(back.text, "[Ping()]");
        assert!(cache
            .get(3, Condition::Stripped, &rec.prompt_hash)
            .is_none());
    }

    #[test]
    fn import_empty_and_stale() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(import_completions(&empty, None, false)
            .unwrap()
            .records
            .is_empty());

        let p = prompt("e#1", "User: hi\nAPI-Request:");
        let index = index_prompts(std::slice::from_ref(&p));
        let path = dir.path().join("c.jsonl");
        fs::write(
            &path,
            r#"{"example_id":"e#1","condition":"B","stage":4,"prompt_hash":"deadbeef","text":"[Ping()]"}"#,
        )
        .unwrap();
        let loose = import_completions(&path, Some(&index), false).unwrap();
        assert_eq!(loose.records.len(), 1);
        assert_eq!(loose.records[0].source, CompletionSource::Imported);
        assert_eq!(loose.stale.len(), 1);
        match import_completions(&path, Some(&index), true) {
            Err(GenError::Stale { example_id, .. }) => assert_eq!(example_id, "e#1"),
            other => panic!("expected stale error, got {other:?}"),
        }
    }
}
