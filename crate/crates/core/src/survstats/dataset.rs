use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bagio::{CovariateValue, SlideRecord};
use crate::error::{Error, Result};

/// How one clinical variable enters the design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSpec {
    /// One column, `value * scale`.
    Numeric { name: String, scale: f64 },
    /// One indicator column per non-reference level. Without an explicit
    /// reference the first level in sorted order is used.
    Factor { name: String, reference: Option<String> },
}

impl CovariateSpec {
    pub fn name(&self) -> &str {
        match self {
            CovariateSpec::Numeric { name, .. } | CovariateSpec::Factor { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignColumn {
    pub variable: String,
    /// Level for factor indicators.
    pub level: Option<String>,
    pub reference: Option<String>,
}

impl DesignColumn {
    pub fn numeric(variable: impl Into<String>) -> Self {
        Self { variable: variable.into(), level: None, reference: None }
    }

    pub fn label(&self) -> String {
        match &self.level {
            Some(l) => format!("{}={l}", self.variable),
            None => self.variable.clone(),
        }
    }
}

/// Subjects with follow-up time, event flag and a design row each.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    pub ids: Vec<String>,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub columns: Vec<DesignColumn>,
    /// Row-major `n x p`.
    pub x: Vec<f64>,
}

impl SurvivalDataset {
    pub fn new(time: Vec<f64>, event: Vec<bool>, columns: Vec<DesignColumn>, x: Vec<f64>) -> Result<Self> {
        let ids = (0..time.len()).map(|i| i.to_string()).collect();
        let d = Self { ids, time, event, columns, x };
        d.validate()?;
        Ok(d)
    }

    /// Single-covariate dataset.
    pub fn univariate(time: Vec<f64>, event: Vec<bool>, name: &str, x: Vec<f64>) -> Result<Self> {
        Self::new(time, event, vec![DesignColumn::numeric(name)], x)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.time.len();
        if self.event.len() != n || self.ids.len() != n || self.x.len() != n * self.columns.len() {
            return Err(Error::invalid("survival dataset arrays disagree in length"));
        }
        if let Some(t) = self.time.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(Error::OutOfRange(format!("survival time {t} is not positive")));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design matrix".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.columns.len()
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().filter(|&&e| e).count()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.columns.len();
        &self.x[i * p..(i + 1) * p]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.row(i)[j]).collect()
    }

    /// Dataset restricted to the given columns.
    pub fn select(&self, cols: &[usize]) -> Self {
        let mut x = Vec::with_capacity(self.len() * cols.len());
        for i in 0..self.len() {
            x.extend(cols.iter().map(|&j| self.row(i)[j]));
        }
        Self {
            ids: self.ids.clone(),
            time: self.time.clone(),
            event: self.event.clone(),
            columns: cols.iter().map(|&j| self.columns[j].clone()).collect(),
            x,
        }
    }

    /// Complete-case design from clinical records. Records lacking survival
    /// fields or any requested covariate are left out; the number dropped is
    /// returned alongside.
    pub fn from_records(records: &[SlideRecord], specs: &[CovariateSpec]) -> Result<(Self, usize)> {
        let usable: Vec<&SlideRecord> = records
            .iter()
            .filter(|r| r.os_months.is_some() && r.os_event.is_some())
            .filter(|r| {
                specs.iter().all(|s| {
                    matches!(r.covariates.get(s.name()), Some(v) if *v != CovariateValue::Missing)
                })
            })
            .collect();
        let dropped = records.len() - usable.len();

        let mut columns = Vec::new();
        let mut encoders: Vec<Box<dyn Fn(&SlideRecord) -> Result<Vec<f64>>>> = Vec::new();
        for spec in specs {
            match spec {
                CovariateSpec::Numeric { name, scale } => {
                    columns.push(DesignColumn::numeric(name.clone()));
                    let (name, scale) = (name.clone(), *scale);
                    encoders.push(Box::new(move |r| match &r.covariates[&name] {
                        CovariateValue::Real(v) => Ok(vec![v * scale]),
                        other => Err(Error::invalid(format!("{}: `{name}` is not numeric: {other:?}", r.slide_id))),
                    }));
                }
                CovariateSpec::Factor { name, reference } => {
                    let levels: BTreeSet<String> = usable.iter().map(|r| level_of(&r.covariates[name])).collect();
                    let reference = match reference {
                        Some(l) if levels.contains(l) => l.clone(),
                        Some(l) => return Err(Error::invalid(format!("reference level {l:?} of `{name}` not present"))),
                        None => levels.iter().next().cloned().ok_or_else(|| Error::invalid(format!("`{name}` has no levels")))?,
                    };
                    let others: Vec<String> = levels.into_iter().filter(|l| *l != reference).collect();
                    for l in &others {
                        columns.push(DesignColumn {
                            variable: name.clone(),
                            level: Some(l.clone()),
                            reference: Some(reference.clone()),
                        });
                    }
                    let name = name.clone();
                    encoders.push(Box::new(move |r| {
                        let lvl = level_of(&r.covariates[&name]);
                        Ok(others.iter().map(|l| f64::from(*l == lvl)).collect())
                    }));
                }
            }
        }

        let mut x = Vec::new();
        for r in &usable {
            for enc in &encoders {
                x.extend(enc(r)?);
            }
        }
        let data = Self {
            ids: usable.iter().map(|r| r.slide_id.clone()).collect(),
            time: usable.iter().map(|r| r.os_months.unwrap()).collect(),
            event: usable.iter().map(|r| r.os_event.unwrap()).collect(),
            columns,
            x,
        };
        data.validate()?;
        Ok((data, dropped))
    }
}

fn level_of(v: &CovariateValue) -> String {
    match v {
        CovariateValue::Real(x) => x.to_string(),
        CovariateValue::Category(s) => s.clone(),
        CovariateValue::Missing => String::new(),
    }
}

/// Inserts `values` as a numeric covariate named `name` on the matching records.
pub fn attach_covariate(records: &mut [SlideRecord], name: &str, values: &BTreeMap<String, f64>) {
    for r in records {
        let v = values.get(&r.slide_id).map_or(CovariateValue::Missing, |&v| CovariateValue::Real(v));
        r.covariates.insert(name.to_string(), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, months: Option<f64>, grade: &str, age: Option<f64>) -> SlideRecord {
        let mut covariates = BTreeMap::new();
        covariates.insert("grade".into(), CovariateValue::Category(grade.into()));
        covariates.insert("age".into(), age.map_or(CovariateValue::Missing, CovariateValue::Real));
        SlideRecord {
            slide_id: id.into(),
            cohort: String::new(),
            centre: String::new(),
            til_score_pct: 20.0,
            covariates,
            os_months: months,
            os_event: months.map(|_| true),
        }
    }

    #[test]
    fn factor_and_numeric_columns() {
        let recs = vec![
            rec("a", Some(3.0), "G3", Some(40.0)),
            rec("b", Some(5.0), "G1/2", Some(50.0)),
            rec("c", None, "G3", Some(60.0)),
            rec("d", Some(7.0), "G3", None),
            rec("e", Some(9.0), "G1/2", Some(70.0)),
        ];
        let specs = vec![
            CovariateSpec::Numeric { name: "age".into(), scale: 0.1 },
            CovariateSpec::Factor { name: "grade".into(), reference: Some("G1/2".into()) },
        ];
        let (d, dropped) = SurvivalDataset::from_records(&recs, &specs).unwrap();
        assert_eq!(dropped, 2);
        assert_eq!(d.ids, vec!["a", "b", "e"]);
        assert_eq!(d.columns[1].label(), "grade=G3");
        assert_eq!(d.x, vec![4.0, 1.0, 5.0, 0.0, 7.0, 0.0]);
        let bad = vec![CovariateSpec::Factor { name: "grade".into(), reference: Some("G9".into()) }];
        assert!(SurvivalDataset::from_records(&recs, &bad).is_err());
    }

    #[test]
    fn non_positive_times_rejected() {
        assert!(SurvivalDataset::univariate(vec![0.0, 1.0], vec![true, false], "x", vec![1.0, 2.0]).is_err());
    }
}
