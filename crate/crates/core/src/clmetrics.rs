//! Stage × block accuracy matrices and the continual-learning summary
//! statistics computed from them.
//!
//! `R[i][j]` is the accuracy on block `j` after training through stage `i`,
//! both 1-based in the formulas below and 0-based in storage.
//!
//! * AA:         mean of the final row
//! * BWT:        mean over `j < T` of `R[T][j] - R[j][j]`
//! * FWT:        mean over `j > 1` of `R[j-1][j] - b[j]`
//! * forgetting: mean over `j < T` of `max_{j <= i < T} R[i][j] - R[T][j]`
//! * AULC:       mean over stages `i` of the mean of `R[i][1..=i]`

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scorer::{BlockScore, Metric};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("matrix must be square and nonempty, got {rows} rows with lengths {lens:?}")]
    NotSquare { rows: usize, lens: Vec<usize> },
    #[error("entry R[{stage}][{block}] = {value} is outside [0, 1]")]
    OutOfRange {
        stage: usize,
        block: usize,
        value: f64,
    },
    #[error("baseline has {got} entries for a {want}-block matrix")]
    BaselineLength { want: usize, got: usize },
    #[error("baseline entry {block} = {value} is outside [0, 1]")]
    BaselineRange { block: usize, value: f64 },
    #[error("need at least 2 stages, got {0}")]
    TooFewStages(usize),
    #[error("stage {0} is missing from the matrix")]
    MissingStage(usize),
    #[error("matrix csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    rows: Vec<Vec<f64>>,
    pub metric: Option<Metric>,
}

fn check_unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl EvalMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let t = rows.len();
        if t == 0 || rows.iter().any(|r| r.len() != t) {
            return Err(MetricsError::NotSquare {
                rows: t,
                lens: rows.iter().map(Vec::len).collect(),
            });
        }
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !check_unit(v) {
                    return Err(MetricsError::OutOfRange {
                        stage: i + 1,
                        block: j + 1,
                        value: v,
                    });
                }
            }
        }
        Ok(EvalMatrix { rows, metric: None })
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = Some(metric);
        self
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    /// 1-based accessor.
    pub fn at(&self, stage: usize, block: usize) -> f64 {
        self.rows[stage - 1][block - 1]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineVector(Vec<f64>);

impl BaselineVector {
    pub fn new(values: Vec<f64>) -> Result<Self, MetricsError> {
        if let Some((j, &v)) = values.iter().enumerate().find(|(_, v)| !check_unit(**v)) {
            return Err(MetricsError::BaselineRange {
                block: j + 1,
                value: v,
            });
        }
        Ok(BaselineVector(values))
    }

    pub fn zeros(t: usize) -> Self {
        BaselineVector(vec![0.0; t])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

pub fn average_accuracy(r: &EvalMatrix) -> f64 {
    let last = r.rows.last().expect("nonempty by construction");
    last.iter().sum::<f64>() / last.len() as f64
}

fn need_two(r: &EvalMatrix) -> Result<usize, MetricsError> {
    match r.size() {
        t if t >= 2 => Ok(t),
        t => Err(MetricsError::TooFewStages(t)),
    }
}

pub fn bwt(r: &EvalMatrix) -> Result<f64, MetricsError> {
    let t = need_two(r)?;
    let sum: f64 = (0..t - 1).map(|j| r.rows[t - 1][j] - r.rows[j][j]).sum();
    Ok(sum / (t - 1) as f64)
}

pub fn fwt(r: &EvalMatrix, b: &BaselineVector) -> Result<f64, MetricsError> {
    let t = need_two(r)?;
    if b.0.len() != t {
        return Err(MetricsError::BaselineLength {
            want: t,
            got: b.0.len(),
        });
    }
    let sum: f64 = (1..t).map(|j| r.rows[j - 1][j] - b.0[j]).sum();
    Ok(sum / (t - 1) as f64)
}

pub fn avg_forgetting(r: &EvalMatrix) -> Result<f64, MetricsError> {
    let t = need_two(r)?;
    let sum: f64 = (0..t - 1)
        .map(|j| {
            let peak = (j..t - 1)
                .map(|i| r.rows[i][j])
                .fold(f64::NEG_INFINITY, f64::max);
            peak - r.rows[t - 1][j]
        })
        .sum();
    Ok(sum / (t - 1) as f64)
}

/// Stage-averaged accuracy over the blocks seen so far.
pub fn aulc(r: &EvalMatrix) -> f64 {
    let t = r.size();
    let sum: f64 = (0..t)
        .map(|i| r.rows[i][..=i].iter().sum::<f64>() / (i + 1) as f64)
        .sum();
    sum / t as f64
}

/// Non-default AULC variant averaging every block at every stage.
pub fn aulc_all_blocks(r: &EvalMatrix) -> f64 {
    let t = r.size();
    r.rows.iter().flatten().sum::<f64>() / (t * t) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClSummary {
    pub final_aa: f64,
    pub bwt: f64,
    /// Absent when no stage-0 baseline was evaluated.
    pub fwt: Option<f64>,
    pub avg_forgetting: f64,
    pub aulc: f64,
}

pub fn summarize(r: &EvalMatrix, b: Option<&BaselineVector>) -> Result<ClSummary, MetricsError> {
    need_two(r)?;
    Ok(ClSummary {
        final_aa: average_accuracy(r),
        bwt: bwt(r)?,
        fwt: b.map(|b| fwt(r, b)).transpose()?,
        avg_forgetting: avg_forgetting(r)?,
        aulc: aulc(r),
    })
}

/// Accuracy rows keyed by stage; stage 0 is the untrained baseline.
///
/// Unlike [`EvalMatrix`] this may be partial, e.g. a final-stage-only run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageGrid {
    pub blocks: usize,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl StageGrid {
    pub fn from_scores(scores: &[BlockScore], metric: Metric, blocks: usize) -> Self {
        let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for s in scores {
            let row = rows
                .entry(s.stage)
                .or_insert_with(|| vec![f64::NAN; blocks]);
            if (1..=blocks).contains(&s.block_id) {
                row[s.block_id - 1] = s.metric(metric);
            }
        }
        StageGrid { blocks, rows }
    }

    pub fn baseline(&self) -> Option<Result<BaselineVector, MetricsError>> {
        self.rows.get(&0).map(|r| BaselineVector::new(r.clone()))
    }

    /// Square matrix over stages 1..=T, if every stage is present.
    pub fn to_matrix(&self) -> Result<EvalMatrix, MetricsError> {
        let rows = (1..=self.blocks)
            .map(|s| {
                self.rows
                    .get(&s)
                    .cloned()
                    .ok_or(MetricsError::MissingStage(s))
            })
            .collect::<Result<Vec<_>, _>>()?;
        EvalMatrix::new(rows)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), MetricsError> {
        let csv_err = |e: csv::Error| MetricsError::Csv(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["stage".to_string()];
        header.extend((1..=self.blocks).map(|j| format!("block_{j}")));
        w.write_record(&header).map_err(csv_err)?;
        for (stage, row) in &self.rows {
            let mut rec = vec![stage.to_string()];
            rec.extend(row.iter().map(|v| {
                if v.is_nan() {
                    String::new()
                } else {
                    v.to_string()
                }
            }));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| MetricsError::Csv(e.to_string()))
    }

    pub fn read_csv(input: impl Read) -> Result<Self, MetricsError> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr
            .headers()
            .map_err(|e| MetricsError::Csv(e.to_string()))?
            .clone();
        if header.get(0) != Some("stage") {
            return Err(MetricsError::Csv("first column must be `stage`".into()));
        }
        let blocks = header.len() - 1;
        for (j, name) in header.iter().skip(1).enumerate() {
            if name != format!("block_{}", j + 1) {
                return Err(MetricsError::Csv(format!(
                    "column {} should be block_{}, found {name:?}",
                    j + 2,
                    j + 1
                )));
            }
        }
        let mut rows = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| MetricsError::Csv(e.to_string()))?;
            let parse = |s: &str| -> Result<f64, MetricsError> {
                if s.trim().is_empty() {
                    return Ok(f64::NAN);
                }
                s.trim()
                    .parse()
                    .map_err(|_| MetricsError::Csv(format!("not a number: {s:?}")))
            };
            let stage: usize = rec
                .get(0)
                .unwrap_or_default()
                .trim()
                .parse()
                .map_err(|_| MetricsError::Csv(format!("bad stage in {rec:?}")))?;
            let row = rec
                .iter()
                .skip(1)
                .map(parse)
                .collect::<Result<Vec<_>, _>>()?;
            if rows.insert(stage, row).is_some() {
                return Err(MetricsError::Csv(format!("stage {stage} listed twice")));
            }
        }
        Ok(StageGrid { blocks, rows })
    }
}
