//! Per-completion scoring, the five-way error taxonomy and block aggregation.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callparse::{normalize_params, parse_first_call, ApiCall};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricFlags {
    pub parsed: bool,
    pub name_ok: bool,
    pub name_any_ok: bool,
    pub exact_ok: bool,
}

impl MetricFlags {
    /// `exact ⇒ name_any ⇒ name ⇒ parsed`
    pub fn chain_holds(&self) -> bool {
        (!self.exact_ok || self.name_any_ok)
            && (!self.name_any_ok || self.name_ok)
            && (!self.name_ok || self.parsed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    ExactFullCall,
    CorrectApiSomeParams,
    CorrectApiWrongParams,
    WrongApi,
    MalformedNoCall,
}

impl ErrorCategory {
    /// Table order.
    pub const ALL: [ErrorCategory; 5] = [
        ErrorCategory::ExactFullCall,
        ErrorCategory::CorrectApiSomeParams,
        ErrorCategory::CorrectApiWrongParams,
        ErrorCategory::WrongApi,
        ErrorCategory::MalformedNoCall,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ErrorCategory::ExactFullCall => "exact_full_call",
            ErrorCategory::CorrectApiSomeParams => "correct_api_some_params",
            ErrorCategory::CorrectApiWrongParams => "correct_api_wrong_params",
            ErrorCategory::WrongApi => "wrong_api",
            ErrorCategory::MalformedNoCall => "malformed_no_call",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ErrorCategory::ExactFullCall => "Exact full call",
            ErrorCategory::CorrectApiSomeParams => "Correct API, some params",
            ErrorCategory::CorrectApiWrongParams => "Correct API, wrong params",
            ErrorCategory::WrongApi => "Wrong API",
            ErrorCategory::MalformedNoCall => "Malformed or no call",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Flags for one completion plus the call it parsed to, if any.
pub fn score_completion(completion: &str, expected: &ApiCall) -> (MetricFlags, Option<ApiCall>) {
    let predicted = match parse_first_call(completion) {
        Ok(p) => p.call,
        Err(_) => return (MetricFlags::default(), None),
    };
    let name_ok = predicted.name() == expected.name();
    let mut flags = MetricFlags {
        parsed: true,
        name_ok,
        ..MetricFlags::default()
    };
    if name_ok {
        if let (Ok(want), Ok(got)) = (normalize_params(expected), normalize_params(&predicted)) {
            flags.exact_ok = want == got;
            flags.name_any_ok = if want.is_empty() {
                got.is_empty()
            } else {
                want.iter().any(|(k, v)| got.get(k) == Some(v))
            };
        }
    }
    (flags, Some(predicted))
}

pub fn score_example(completion: &str, expected: &ApiCall) -> MetricFlags {
    score_completion(completion, expected).0
}

/// Maps flags to their error category; the five categories partition all
/// flag states that satisfy the chain invariant.
pub fn classify_error(flags: &MetricFlags) -> ErrorCategory {
    if !flags.parsed {
        ErrorCategory::MalformedNoCall
    } else if !flags.name_ok {
        ErrorCategory::WrongApi
    } else if flags.exact_ok {
        ErrorCategory::ExactFullCall
    } else if flags.name_any_ok {
        ErrorCategory::CorrectApiSomeParams
    } else {
        ErrorCategory::CorrectApiWrongParams
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub example_id: String,
    pub stage: usize,
    #[serde(rename = "block")]
    pub block_id: usize,
    pub flags: MetricFlags,
    pub category: ErrorCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
}

impl ScoreRecord {
    pub fn score(
        example_id: impl Into<String>,
        stage: usize,
        block_id: usize,
        completion: &str,
        expected: &ApiCall,
    ) -> Self {
        let (flags, predicted) = score_completion(completion, expected);
        ScoreRecord {
            example_id: example_id.into(),
            stage,
            block_id,
            category: classify_error(&flags),
            flags,
            predicted: predicted.map(|c| c.to_string()),
        }
    }
}

pub fn write_scores_jsonl(records: &[ScoreRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryCounts([usize; 5]);

impl CategoryCounts {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a ScoreRecord>) -> Self {
        let mut c = CategoryCounts::default();
        for r in records {
            c.0[r.category.index()] += 1;
        }
        c
    }

    pub fn get(&self, cat: ErrorCategory) -> usize {
        self.0[cat.index()]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn as_array(&self) -> [usize; 5] {
        self.0
    }
}

/// CSV with one row per category in table order and one count column per
/// labelled count set.
pub fn write_category_csv(
    columns: &[(String, CategoryCounts)],
    out: impl Write,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["category".to_string()];
    header.extend(columns.iter().map(|(label, _)| label.clone()));
    w.write_record(&header)?;
    for cat in ErrorCategory::ALL {
        let mut row = vec![cat.label().to_string()];
        row.extend(columns.iter().map(|(_, c)| c.get(cat).to_string()));
        w.write_record(&row)?;
    }
    let mut total = vec!["Total".to_string()];
    total.extend(columns.iter().map(|(_, c)| c.total().to_string()));
    w.write_record(&total)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AggregateError {
    #[error("cannot aggregate an empty record set")]
    Empty,
    #[error("records mix (stage, block) keys: {0:?} and {1:?}")]
    MixedKeys((usize, usize), (usize, usize)),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockScore {
    pub stage: usize,
    pub block_id: usize,
    pub n: usize,
    pub n_exact: usize,
    pub n_name: usize,
    pub n_name_any: usize,
    pub n_malformed: usize,
    pub acc_exact: f64,
    pub acc_name: f64,
    pub acc_name_any: f64,
    pub rate_malformed: f64,
}

impl BlockScore {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Exact => self.acc_exact,
            Metric::Name => self.acc_name,
            Metric::NameAny => self.acc_name_any,
            Metric::Malformed => self.rate_malformed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Exact,
    Name,
    NameAny,
    Malformed,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Exact,
        Metric::Name,
        Metric::NameAny,
        Metric::Malformed,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Metric::Exact => "exact",
            Metric::Name => "name",
            Metric::NameAny => "name_any",
            Metric::Malformed => "malformed",
        }
    }
}

pub fn aggregate_block(records: &[ScoreRecord]) -> Result<BlockScore, AggregateError> {
    let first = records.first().ok_or(AggregateError::Empty)?;
    let key = (first.stage, first.block_id);
    let mut s = BlockScore {
        stage: key.0,
        block_id: key.1,
        n: records.len(),
        n_exact: 0,
        n_name: 0,
        n_name_any: 0,
        n_malformed: 0,
        acc_exact: 0.0,
        acc_name: 0.0,
        acc_name_any: 0.0,
        rate_malformed: 0.0,
    };
    for r in records {
        if (r.stage, r.block_id) != key {
            return Err(AggregateError::MixedKeys(key, (r.stage, r.block_id)));
        }
        s.n_exact += r.flags.exact_ok as usize;
        s.n_name += r.flags.name_ok as usize;
        s.n_name_any += r.flags.name_any_ok as usize;
        s.n_malformed += !r.flags.parsed as usize;
    }
    let n = s.n as f64;
    s.acc_exact = s.n_exact as f64 / n;
    s.acc_name = s.n_name as f64 / n;
    s.acc_name_any = s.n_name_any as f64 / n;
    s.rate_malformed = s.n_malformed as f64 / n;
    Ok(s)
}

/// Groups records by (stage, block) and aggregates each group, sorted by key.
pub fn aggregate_all(records: &[ScoreRecord]) -> Vec<BlockScore> {
    let mut groups: std::collections::BTreeMap<(usize, usize), Vec<ScoreRecord>> =
        Default::default();
    for r in records {
        groups
            .entry((r.stage, r.block_id))
            .or_default()
            .push(r.clone());
    }
    groups
        .values()
        .map(|g| aggregate_block(g).expect("groups are nonempty and single-keyed"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub exact: f64,
    pub name: f64,
    pub name_any: f64,
    pub malformed: f64,
}

impl MetricMeans {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Exact => self.exact,
            Metric::Name => self.name,
            Metric::NameAny => self.name_any,
            Metric::Malformed => self.malformed,
        }
    }
}

/// Unweighted mean over blocks.
pub fn aggregate_macro(blocks: &[BlockScore]) -> Result<MetricMeans, AggregateError> {
    if blocks.is_empty() {
        return Err(AggregateError::Empty);
    }
    let k = blocks.len() as f64;
    let mean = |m: Metric| blocks.iter().map(|b| b.metric(m)).sum::<f64>() / k;
    Ok(MetricMeans {
        exact: mean(Metric::Exact),
        name: mean(Metric::Name),
        name_any: mean(Metric::NameAny),
        malformed: mean(Metric::Malformed),
    })
}

/// Pooled count ratios over all blocks.
pub fn aggregate_micro(blocks: &[BlockScore]) -> Result<MetricMeans, AggregateError> {
    let n: usize = blocks.iter().map(|b| b.n).sum();
    if n == 0 {
        return Err(AggregateError::Empty);
    }
    let pooled =
        |f: fn(&BlockScore) -> usize| blocks.iter().map(f).sum::<usize>() as f64 / n as f64;
    Ok(MetricMeans {
        exact: pooled(|b| b.n_exact),
        name: pooled(|b| b.n_name),
        name_any: pooled(|b| b.n_name_any),
        malformed: pooled(|b| b.n_malformed),
    })
}

/// Percentage with one decimal, rounding half up.
pub fn format_pct(fraction: f64) -> String {
    // The epsilon absorbs binary error on exact .x5 ties such as 0.5725.
    let tenths = (fraction * 1000.0 + 0.5 + 1e-9).floor();
    format!("{:.1}", tenths / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(name: &str, params: &[(&str, &str)]) -> ApiCall {
        ApiCall::new(name, params.iter().copied()).unwrap()
    }

    #[test]
    fn identity_all_true() {
        let f = score_example(
            "[GetWeather(city='Paris')]",
            &call("GetWeather", &[("city", "Paris")]),
        );
        assert_eq!(
            f,
            MetricFlags {
                parsed: true,
                name_ok: true,
                name_any_ok: true,
                exact_ok: true
            }
        );
        assert_eq!(classify_error(&f), ErrorCategory::ExactFullCall);
    }

    #[test]
    fn wrong_value() {
        let f = score_example(
            "[GetWeather(city='Lyon')]",
            &call("GetWeather", &[("city", "Paris")]),
        );
        assert!(f.parsed && f.name_ok && !f.name_any_ok && !f.exact_ok);
        assert_eq!(classify_error(&f), ErrorCategory::CorrectApiWrongParams);
    }

    #[test]
    fn no_call() {
        let f = score_example(
            "I will check the weather.",
            &call("GetWeather", &[("city", "Paris")]),
        );
        assert_eq!(f, MetricFlags::default());
        assert_eq!(classify_error(&f), ErrorCategory::MalformedNoCall);
    }

    #[test]
    fn wrong_name() {
        let f = score_example(
            "[QueryWeather(city='Paris')]",
            &call("GetWeather", &[("city", "Paris")]),
        );
        assert!(f.parsed && !f.name_ok);
        assert_eq!(classify_error(&f), ErrorCategory::WrongApi);
    }

    #[test]
    fn partial_and_extra_params() {
        let want = call("AddAlarm", &[("time", "07:30"), ("label", "wake")]);
        let f = score_example("[AddAlarm(time='07:30', label='sleep')]", &want);
        assert_eq!(classify_error(&f), ErrorCategory::CorrectApiSomeParams);
        let f = score_example("[AddAlarm(time='07:30', label='wake', x='1')]", &want);
        assert!(f.name_any_ok && !f.exact_ok);
        let f = score_example("[AddAlarm(label = \"wake\" , time=07:30)]", &want);
        assert!(f.exact_ok);
    }

    #[test]
    fn empty_expected_rules() {
        let ping = call("Ping", &[]);
        let f = score_example("[Ping(x='1')]", &ping);
        assert_eq!(classify_error(&f), ErrorCategory::CorrectApiWrongParams);
        let f = score_example("[Ping()]", &ping);
        assert_eq!(classify_error(&f), ErrorCategory::ExactFullCall);
        assert!(f.name_any_ok);
    }

    #[test]
    fn values_are_case_sensitive() {
        let f = score_example("[F(city='paris')]", &call("F", &[("city", "Paris")]));
        assert!(!f.exact_ok);
        let f = score_example("[f(city='Paris')]", &call("F", &[("city", "Paris")]));
        assert!(!f.name_ok);
    }

    fn record(stage: usize, block: usize, completion: &str) -> ScoreRecord {
        ScoreRecord::score("x", stage, block, completion, &call("F", &[("a", "1")]))
    }

    #[test]
    fn block_of_126_with_45_exact() {
        let records: Vec<_> = (0..126)
            .map(|i| record(4, 1, if i < 45 { "[F(a='1')]" } else { "nope" }))
            .collect();
        let s = aggregate_block(&records).unwrap();
        assert_eq!(s.n, 126);
        assert_eq!(format_pct(s.acc_exact), "35.7");
        assert!((s.acc_exact - 45.0 / 126.0).abs() < 1e-15);
    }

    #[test]
    fn all_exact_block() {
        let records: Vec<_> = (0..5).map(|_| record(1, 2, "[F(a='1')]")).collect();
        let s = aggregate_block(&records).unwrap();
        assert_eq!(
            (s.acc_exact, s.acc_name, s.acc_name_any, s.rate_malformed),
            (1.0, 1.0, 1.0, 0.0)
        );
    }

    #[test]
    fn aggregate_errors() {
        assert_eq!(aggregate_block(&[]), Err(AggregateError::Empty));
        assert!(matches!(
            aggregate_block(&[record(1, 1, ""), record(1, 2, "")]),
            Err(AggregateError::MixedKeys(..))
        ));
        assert!(aggregate_macro(&[]).is_err());
    }

    fn block_with(acc_exact: f64, acc_name: f64) -> BlockScore {
        BlockScore {
            stage: 4,
            block_id: 1,
            n: 100,
            n_exact: 0,
            n_name: 0,
            n_name_any: 0,
            n_malformed: 0,
            acc_exact,
            acc_name,
            acc_name_any: acc_exact,
            rate_malformed: 0.0,
        }
    }

    #[test]
    fn macro_means_of_printed_rows() {
        let b: Vec<_> = [0.579, 0.615, 0.447, 0.636]
            .iter()
            .map(|&x| block_with(x, 0.0))
            .collect();
        assert_eq!(format_pct(aggregate_macro(&b).unwrap().exact), "56.9");
        let a: Vec<_> = [0.643, 0.625, 0.602, 0.794]
            .iter()
            .map(|&x| block_with(0.0, x))
            .collect();
        assert_eq!(format_pct(aggregate_macro(&a).unwrap().name), "66.6");
        let one = [block_with(0.25, 0.5)];
        assert_eq!(aggregate_macro(&one).unwrap().exact, 0.25);
    }

    #[test]
    fn pct_rounds_half_up() {
        assert_eq!(format_pct(0.5725), "57.3");
        assert_eq!(format_pct(0.39204), "39.2");
        assert_eq!(format_pct(0.0), "0.0");
        assert_eq!(format_pct(1.0), "100.0");
    }

    #[test]
    fn category_csv_layout() {
        let records = vec![record(4, 1, "[F(a='1')]"), record(4, 1, "??")];
        let counts = CategoryCounts::from_records(&records);
        let mut buf = Vec::new();
        write_category_csv(&[("A".into(), counts)], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "category,A\nExact full call,1\n\"Correct API, some params\",0\n\
             \"Correct API, wrong params\",0\nWrong API,0\nMalformed or no call,1\nTotal,2\n"
        );
    }
}
