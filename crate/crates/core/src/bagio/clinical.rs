//! Clinical tables and prediction files (CSV, UTF-8, '.' decimal).
//!
//! Clinical schema: `slide_id,cohort,centre,til_score_pct[,til_score_pct_2][,os_months,os_event][,<covariates>]`.
//! Only `slide_id` and `til_score_pct` are mandatory. Any column not named
//! above is a covariate; numeric cells become reals, other non-empty cells
//! are kept verbatim as categories.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateValue {
    Real(f64),
    Category(String),
    Missing,
}

impl CovariateValue {
    fn parse(cell: &str) -> Self {
        let cell = cell.trim();
        if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
            CovariateValue::Missing
        } else if let Ok(v) = cell.parse::<f64>() {
            CovariateValue::Real(v)
        } else {
            CovariateValue::Category(cell.to_string())
        }
    }

    fn render(&self) -> String {
        match self {
            CovariateValue::Real(v) => v.to_string(),
            CovariateValue::Category(s) => s.clone(),
            CovariateValue::Missing => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub slide_id: String,
    pub cohort: String,
    pub centre: String,
    /// Pathologist score in percent; the mean when two scores are given.
    pub til_score_pct: f64,
    pub covariates: BTreeMap<String, CovariateValue>,
    pub os_months: Option<f64>,
    pub os_event: Option<bool>,
}

impl SlideRecord {
    pub fn label_fraction(&self) -> f64 {
        self.til_score_pct / 100.0
    }
}

const RESERVED: [&str; 7] =
    ["slide_id", "cohort", "centre", "til_score_pct", "til_score_pct_2", "os_months", "os_event"];

fn parse_score(cell: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| Error::invalid(format!("row {row}: `{column}` is not a number: {cell:?}")))?;
    if !(0.0..=100.0).contains(&v) {
        return Err(Error::OutOfRange(format!("row {row}: `{column}` = {v} outside [0, 100]")));
    }
    Ok(Some(v))
}

pub fn load_clinical<R: Read>(source: R) -> Result<Vec<SlideRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let slide_col = col("slide_id").ok_or_else(|| Error::MissingColumn("slide_id".into()))?;
    let score_col = col("til_score_pct").ok_or_else(|| Error::MissingColumn("til_score_pct".into()))?;
    let score2_col = col("til_score_pct_2");
    let cohort_col = col("cohort");
    let centre_col = col("centre");
    let months_col = col("os_months");
    let event_col = col("os_event");
    let covariate_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !RESERVED.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let cell = |c: Option<usize>| c.and_then(|c| row.get(c)).unwrap_or("").to_string();
        let slide_id = cell(Some(slide_col));
        if slide_id.is_empty() {
            return Err(Error::invalid(format!("row {line}: empty slide_id")));
        }
        let first = parse_score(&cell(Some(score_col)), line, "til_score_pct")?;
        let second = match score2_col {
            Some(c) => parse_score(&cell(Some(c)), line, "til_score_pct_2")?,
            None => None,
        };
        let til_score_pct = match (first, second) {
            (Some(a), Some(b)) => (a + b) / 2.0,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => {
                return Err(Error::invalid(format!("row {line}: no pathologist score")));
            }
        };

        let months = cell(months_col);
        let event = cell(event_col);
        let (os_months, os_event) = match (months.is_empty(), event.is_empty()) {
            (true, true) => (None, None),
            (false, false) => {
                let m: f64 = months
                    .parse()
                    .map_err(|_| Error::invalid(format!("row {line}: bad os_months {months:?}")))?;
                if !(m >= 0.0) {
                    return Err(Error::OutOfRange(format!("row {line}: os_months = {m}")));
                }
                let e = match event.as_str() {
                    "1" | "true" | "TRUE" => true,
                    "0" | "false" | "FALSE" => false,
                    other => return Err(Error::invalid(format!("row {line}: bad os_event {other:?}"))),
                };
                (Some(m), Some(e))
            }
            _ => {
                return Err(Error::invalid(format!(
                    "row {line}: os_months and os_event must be given together"
                )));
            }
        };

        let covariates = covariate_cols
            .iter()
            .map(|(c, name)| (name.clone(), CovariateValue::parse(row.get(*c).unwrap_or(""))))
            .collect();
        out.push(SlideRecord {
            slide_id,
            cohort: cell(cohort_col),
            centre: cell(centre_col),
            til_score_pct,
            covariates,
            os_months,
            os_event,
        });
    }
    Ok(out)
}

pub fn write_clinical<W: Write>(records: &[SlideRecord], sink: W) -> Result<()> {
    let has_os = records.iter().any(|r| r.os_months.is_some());
    let covariates: BTreeSet<&String> = records.iter().flat_map(|r| r.covariates.keys()).collect();
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["slide_id", "cohort", "centre", "til_score_pct"];
    if has_os {
        header.extend(["os_months", "os_event"]);
    }
    header.extend(covariates.iter().map(|s| s.as_str()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.slide_id.clone(), r.cohort.clone(), r.centre.clone(), r.til_score_pct.to_string()];
        if has_os {
            row.push(r.os_months.map(|m| m.to_string()).unwrap_or_default());
            row.push(r.os_event.map(|e| (e as u8).to_string()).unwrap_or_default());
        }
        for name in &covariates {
            row.push(r.covariates.get(*name).map(CovariateValue::render).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub slide_id: String,
    /// Model score as a fraction in `[0, 1]`.
    pub ectil_score: f64,
}

pub fn write_predictions<W: Write>(predictions: &[Prediction], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for p in predictions {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions<R: Read>(source: R) -> Result<Vec<Prediction>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    for name in ["slide_id", "ectil_score"] {
        if !headers.iter().any(|h| h == name) {
            return Err(Error::MissingColumn(name.into()));
        }
    }
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let p: Prediction = row?;
        if !(0.0..=1.0).contains(&p.ectil_score) {
            return Err(Error::OutOfRange(format!("{}: score {}", p.slide_id, p.ectil_score)));
        }
        out.push(p);
    }
    Ok(out)
}
