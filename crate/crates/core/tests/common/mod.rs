#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use toolstream::callparse::ApiCall;
use toolstream::corpus::{Episode, Turn};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/final_stage")
}

/// Reply produced by a mock handler: HTTP status and JSON body.
pub type Reply = (u16, String);

pub fn chat_reply(content: &str) -> Reply {
    let body = serde_json::json!({
        "id": "mock",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    });
    (200, body.to_string())
}

#[derive(Default)]
pub struct MockStats {
    pub requests: AtomicUsize,
    pub in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
}

/// Minimal HTTP/1.1 server answering each POST with `handler(body, n)`,
/// where `n` is the 0-based arrival index. Every response closes the
/// connection.
pub struct MockEndpoint {
    pub base_url: String,
    pub stats: Arc<MockStats>,
}

impl MockEndpoint {
    pub fn start<F>(delay: Duration, handler: F) -> Self
    where
        F: Fn(&Value, usize) -> Reply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let stats = Arc::new(MockStats::default());
        let handler = Arc::new(handler);
        let st = Arc::clone(&stats);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let st = Arc::clone(&st);
                let handler = Arc::clone(&handler);
                std::thread::spawn(move || serve(stream, delay, &*handler, &st));
            }
        });
        MockEndpoint {
            base_url: format!("http://{addr}/v1"),
            stats,
        }
    }

    pub fn requests(&self) -> usize {
        self.stats.requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.stats.max_in_flight.load(Ordering::SeqCst)
    }
}

fn serve<F>(stream: TcpStream, delay: Duration, handler: &F, st: &MockStats)
where
    F: Fn(&Value, usize) -> Reply,
{
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let n = st.requests.fetch_add(1, Ordering::SeqCst);
    let now = st.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    st.max_in_flight.fetch_max(now, Ordering::SeqCst);
    std::thread::sleep(delay);
    let value: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let (status, reply) = handler(&value, n);
    st.in_flight.fetch_sub(1, Ordering::SeqCst);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    );
    let _ = stream.flush();
}

pub fn prompt_of(body: &Value) -> &str {
    body.pointer("/messages/0/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
}

pub fn stage_of(body: &Value) -> usize {
    body["model"]
        .as_str()
        .and_then(|m| m.strip_prefix("stage-"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

/// Deterministic stand-in model: from stage 1 on it repeats the most recent
/// call visible in the prompt, and stage 0 never calls anything.
pub fn echo_last_call(body: &Value) -> String {
    if stage_of(body) == 0 {
        return "I cannot help with that.".into();
    }
    prompt_of(body)
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("API-Request: "))
        .map(str::to_string)
        .unwrap_or_else(|| "Let me think about it.".into())
}

const APIS: &[&str] = &[
    "GetWeather",
    "AddAlarm",
    "QueryStock",
    "SendEmail",
    "BookHotel",
    "Translate",
    "Wiki",
    "AddMeeting",
    "QueryBalance",
    "SymptomSearch",
    "PlayMusic",
    "Calculator",
];

/// Episodes of `user, (request, response, assistant, user)*, request`, so
/// every scored example after the first call carries at least one
/// request/response pair of context.
pub fn trace_heavy_corpus(episodes: usize, calls_per_episode: usize, seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes)
        .map(|e| {
            let mut turns = vec![Turn::user(format!("Episode {e}: please help me."))];
            for c in 0..calls_per_episode {
                let name = APIS[rng.gen_range(0..APIS.len())];
                let call = ApiCall::new(
                    name,
                    [
                        ("arg", format!("value {}", rng.gen_range(0..50))),
                        ("when", format!("2023-0{}-1{}", rng.gen_range(1..10), c)),
                    ],
                )
                .unwrap();
                turns.push(Turn::request(call));
                turns.push(Turn::response(format!("{{'result': 'ok {e}-{c}'}}")));
                turns.push(Turn::assistant(format!("Step {c} is done.")));
                turns.push(Turn::user("Next, please."));
            }
            turns.pop();
            Episode::new(format!("ep{e:04}"), turns)
        })
        .collect()
}

pub fn write_corpus(episodes: &[Episode], path: &std::path::Path) {
    let mut f = std::fs::File::create(path).unwrap();
    for ep in episodes {
        serde_json::to_writer(&mut f, &toolstream::corpus::RawEpisode::from(ep)).unwrap();
        f.write_all(b"\n").unwrap();
    }
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub mod oracle;
