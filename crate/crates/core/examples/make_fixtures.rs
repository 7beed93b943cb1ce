//! Regenerates `fixtures/final_stage/`: a 440-example corpus split into four
//! disjoint-API blocks of 126/104/103/107 scored examples, plus recorded
//! final-stage (stage 4) completions for both conditions.
//!
//! Completions are built to land in prescribed per-block error categories;
//! the counts below fix the target per-block accuracies and the
//! final-stage category totals. Scoring them is left to the harness.
//!
//!     cargo run -p toolstream --example make_fixtures

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use toolstream::callparse::{render_call, ApiCall};
use toolstream::corpus::{
    extract_examples, BlocksFile, DomainBlock, Episode, RawEpisode, ScoredExample, Turn,
};
use toolstream::genclient::{
    prompt_hash, write_completions_jsonl, CompletionRecord, CompletionSource,
};
use toolstream::scorer::ErrorCategory;
use toolstream::transform::{render_prompt, Condition, PromptTemplate};

const STAGE: usize = 4;
const BLOCK_SIZES: [usize; 4] = [126, 104, 103, 107];

/// Per block: exact, some params, wrong params, wrong API, malformed.
const COUNTS_A: [[usize; 5]; 4] = [
    [45, 20, 16, 31, 14],
    [45, 14, 6, 27, 12],
    [33, 19, 10, 29, 12],
    [49, 21, 15, 15, 7],
];
const COUNTS_B: [[usize; 5]; 4] = [
    [73, 12, 8, 3, 30],
    [64, 16, 6, 3, 15],
    [46, 17, 6, 3, 31],
    [68, 9, 2, 3, 25],
];

/// API name and its parameter keys, grouped by block.
const APIS: [&[(&str, &[&str])]; 4] = [
    &[
        ("AddAlarm", &["time"]),
        ("DeleteAlarm", &["time"]),
        ("ModifyAlarm", &["from_time", "to_time"]),
        ("QueryAlarm", &["date"]),
        ("AddReminder", &["content", "time"]),
        ("DeleteReminder", &["content"]),
        ("QueryReminder", &["date"]),
        ("GetToday", &["format"]),
    ],
    &[
        ("AddMeeting", &["meeting_topic", "start_time", "location"]),
        ("DeleteMeeting", &["meeting_topic", "start_time"]),
        (
            "ModifyMeeting",
            &["meeting_topic", "start_time", "location"],
        ),
        ("QueryMeeting", &["user_name"]),
        ("AddAgenda", &["content", "time", "location"]),
        ("DeleteAgenda", &["content", "time"]),
        ("QueryAgenda", &["time"]),
        ("SendEmail", &["receiver", "subject", "content"]),
    ],
    &[
        ("QueryHealthData", &["user_id", "start_time", "end_time"]),
        ("RecordHealthData", &["user_id", "time", "health_data"]),
        ("SymptomSearch", &["symptom"]),
        ("EmergencyKnowledge", &["symptom"]),
        (
            "AppointmentRegistration",
            &["patient_name", "date", "doctor_name"],
        ),
        ("QueryRegistration", &["patient_name", "date"]),
        ("CancelRegistration", &["appointment_id"]),
        (
            "ModifyRegistration",
            &["appointment_id", "new_appointment_date"],
        ),
    ],
    &[
        ("QueryStock", &["stock_code", "date"]),
        ("QueryBalance", &["token"]),
        ("OpenBankAccount", &["account", "password", "name"]),
        ("GetUserToken", &["username", "password"]),
        ("BookHotel", &["hotel_name", "check_in_time", "room_count"]),
        ("Translate", &["src", "tgt_lang"]),
        ("Wiki", &["keyword"]),
        ("Calculator", &["formula"]),
    ],
];

const WORDS: &[&str] = &[
    "Paris",
    "2023-03-15",
    "08:30",
    "team sync",
    "Beijing",
    "John",
    "fever",
    "10:00",
    "Hilton",
    "AAPL",
    "weekly report",
    "Room 301",
    "headache",
    "Alice",
    "2023-04-01",
    "1+2*3",
    "Shanghai",
    "cough",
    "xyz123",
    "Bob",
];

fn pick<'a>(rng: &mut ChaCha8Rng, from: &[&'a str]) -> &'a str {
    from[rng.gen_range(0..from.len())]
}

fn make_call(rng: &mut ChaCha8Rng, name: &str, keys: &[&str]) -> ApiCall {
    let params: Vec<(String, String)> = keys
        .iter()
        .map(|k| (k.to_string(), pick(rng, WORDS).to_string()))
        .collect();
    ApiCall::new(name, params).unwrap()
}

fn episode(rng: &mut ChaCha8Rng, id: String, block: usize, calls: usize) -> Episode {
    let apis = APIS[block];
    let mut turns = vec![Turn::user(format!("Hi, I need help with request {id}."))];
    for i in 0..calls {
        let (name, keys) = apis[rng.gen_range(0..apis.len())];
        if i > 0 {
            turns.push(Turn::user("Thanks. One more thing, please."));
        }
        turns.push(Turn::request(make_call(rng, name, keys)));
        turns.push(Turn::response(format!(
            "{{'api_name': '{name}', 'result': '{}', 'exception': None}}",
            pick(rng, WORDS)
        )));
        turns.push(Turn::assistant("Done. Anything else?"));
    }
    Episode::new(id, turns)
}

fn wrong_value(v: &str) -> String {
    format!("{v} (unconfirmed)")
}

fn completion(
    rng: &mut ChaCha8Rng,
    cat: ErrorCategory,
    expected: &ApiCall,
    block: usize,
    i: usize,
) -> String {
    let name = expected.name();
    let params = expected.params();
    match cat {
        ErrorCategory::ExactFullCall => match i % 4 {
            0 => render_call(expected),
            1 => format!("API-Request: {}", render_call(expected)),
            2 => {
                let inner: Vec<String> =
                    params.iter().map(|(k, v)| format!("{k}=\"{v}\"")).collect();
                format!("[{name}({})]", inner.join(", "))
            }
            _ => {
                let rev: Vec<(String, String)> = params.iter().rev().cloned().collect();
                render_call(&ApiCall::new(name, rev).unwrap())
            }
        },
        ErrorCategory::CorrectApiSomeParams => {
            let mut p = params.to_vec();
            if p.len() >= 2 {
                let last = p.len() - 1;
                p[last].1 = wrong_value(&p[last].1);
            } else {
                p.push(("extra".into(), "yes".into()));
            }
            render_call(&ApiCall::new(name, p).unwrap())
        }
        ErrorCategory::CorrectApiWrongParams => {
            let p: Vec<(String, String)> = if i.is_multiple_of(2) {
                params
                    .iter()
                    .map(|(k, v)| (k.clone(), wrong_value(v)))
                    .collect()
            } else {
                vec![("query".into(), "unknown".into())]
            };
            render_call(&ApiCall::new(name, p).unwrap())
        }
        ErrorCategory::WrongApi => {
            let others: Vec<&str> = APIS[block]
                .iter()
                .map(|(n, _)| *n)
                .filter(|n| *n != name)
                .collect();
            let other = pick(rng, &others);
            render_call(&ApiCall::new(other, params.to_vec()).unwrap())
        }
        ErrorCategory::MalformedNoCall => {
            let first = params
                .first()
                .map(|(k, v)| format!("{k}='{v}'"))
                .unwrap_or_default();
            match i % 5 {
                0 => "I'm not sure which API to call here.".to_string(),
                1 => format!("[{name}({first}"),
                2 => format!("API-Request: {name}({first})"),
                3 => format!("[{name} {first}]"),
                _ => String::new(),
            }
        }
    }
}

fn categories(counts: &[usize; 5], rng: &mut ChaCha8Rng) -> Vec<ErrorCategory> {
    let mut v: Vec<ErrorCategory> = ErrorCategory::ALL
        .iter()
        .zip(counts)
        .flat_map(|(c, &n)| std::iter::repeat_n(*c, n))
        .collect();
    v.shuffle(rng);
    v
}

fn main() {
    let out = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/final_stage");
    fs::create_dir_all(&out).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20240415);

    let mut episodes = Vec::new();
    let mut blocks = Vec::new();
    for (b, &size) in BLOCK_SIZES.iter().enumerate() {
        let mut examples: Vec<ScoredExample> = Vec::new();
        let mut k = 0;
        while examples.len() < size {
            let calls = if size - examples.len() >= 2 && k % 3 != 2 {
                2
            } else {
                1
            };
            let ep = episode(&mut rng, format!("d{}-{k:03}", b + 1), b, calls);
            examples.extend(extract_examples(&ep).into_iter().map(|e| ScoredExample {
                block_id: b + 1,
                ..e
            }));
            episodes.push(ep);
            k += 1;
        }
        blocks.push(DomainBlock {
            block_id: b + 1,
            api_names: examples
                .iter()
                .map(|e| e.expected.name().to_string())
                .collect(),
            examples,
        });
    }

    let mut corpus = fs::File::create(out.join("corpus.jsonl")).unwrap();
    for ep in &episodes {
        serde_json::to_writer(&mut corpus, &RawEpisode::from(ep)).unwrap();
        corpus.write_all(b"\n").unwrap();
    }
    fs::write(
        out.join("blocks.json"),
        BlocksFile::from_blocks(&blocks).to_json(),
    )
    .unwrap();

    let template = PromptTemplate::default();
    for (condition, counts, seed) in [
        (Condition::Stripped, &COUNTS_A, 1u64),
        (Condition::Trajectory, &COUNTS_B, 2u64),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for (b, block) in blocks.iter().enumerate() {
            let cats = categories(&counts[b], &mut rng);
            assert_eq!(cats.len(), block.examples.len());
            for (i, (ex, cat)) in block.examples.iter().zip(cats).enumerate() {
                let prompt = render_prompt(ex, condition, &template);
                records.push(CompletionRecord {
                    example_id: ex.id.clone(),
                    condition,
                    stage: STAGE,
                    prompt_hash: prompt_hash(&prompt.text),
                    text: completion(&mut rng, cat, &ex.expected, b, i),
                    source: CompletionSource::Imported,
                });
            }
        }
        let path = out.join(format!("completions_{}.jsonl", condition.tag()));
        write_completions_jsonl(&records, fs::File::create(&path).unwrap()).unwrap();
        eprintln!("wrote {} ({} records)", path.display(), records.len());
    }
}
