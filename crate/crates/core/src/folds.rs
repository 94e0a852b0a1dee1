//! Grouped fold plans, champion selection and ensembles.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bagio::{FeatureBag, SlideRecord};
use crate::concord::pearson;
use crate::error::{Error, Result};
use crate::milnet::{predict, read_checkpoint_file, write_checkpoint_file, HyperParams, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Centre,
    Cohort,
}

impl GroupKey {
    pub fn of(self, record: &SlideRecord) -> &str {
        match self {
            GroupKey::Centre => &record.centre,
            GroupKey::Cohort => &record.cohort,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldScheme {
    /// k folds of whole groups; fold `i` is the test fold, fold `i+1 mod k`
    /// validates and the rest train.
    KFold,
    /// One fold per cohort; fold `i` validates, the rest train, no test fold.
    LeaveOneCohortOut,
}

/// Slide indices playing each role for one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldRoles {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub group_key: GroupKey,
    pub scheme: FoldScheme,
    /// `(slide_id, fold)` in record order.
    pub assignment: Vec<(String, usize)>,
}

impl FoldPlan {
    pub fn fold_of(&self, slide_id: &str) -> Option<usize> {
        self.assignment.iter().find(|(s, _)| s == slide_id).map(|&(_, f)| f)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &(_, f) in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }

    /// Positions (in plan order) of the slides of `fold`.
    pub fn members(&self, fold: usize) -> Vec<usize> {
        self.assignment.iter().enumerate().filter(|(_, (_, f))| *f == fold).map(|(i, _)| i).collect()
    }

    pub fn roles(&self, fold: usize) -> Result<FoldRoles> {
        if fold >= self.k {
            return Err(Error::OutOfRange(format!("fold {fold} of {}", self.k)));
        }
        let (val_fold, test_fold) = match self.scheme {
            FoldScheme::KFold => ((fold + 1) % self.k, Some(fold)),
            FoldScheme::LeaveOneCohortOut => (fold, None),
        };
        let mut roles = FoldRoles { train: Vec::new(), val: Vec::new(), test: Vec::new() };
        for (i, &(_, f)) in self.assignment.iter().enumerate() {
            if f == val_fold {
                roles.val.push(i);
            } else if Some(f) == test_fold {
                roles.test.push(i);
            } else {
                roles.train.push(i);
            }
        }
        Ok(roles)
    }

    /// True when every group of `records` sits in a single fold.
    pub fn is_group_pure(&self, records: &[SlideRecord]) -> bool {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        records.iter().all(|r| match self.fold_of(&r.slide_id) {
            Some(f) => *seen.entry(self.group_key.of(r)).or_insert(f) == f,
            None => false,
        })
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["slide_id", "fold"])?;
        for (s, f) in &self.assignment {
            w.write_record([s.as_str(), &f.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// The CSV carries only the assignment; scheme and key come from the caller.
    pub fn read_csv<R: Read>(source: R, group_key: GroupKey, scheme: FoldScheme) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            slide_id: String,
            fold: usize,
        }
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let mut assignment = Vec::new();
        for row in reader.deserialize() {
            let row: Row = row?;
            assignment.push((row.slide_id, row.fold));
        }
        let k = assignment.iter().map(|&(_, f)| f + 1).max().unwrap_or(0);
        if k == 0 {
            return Err(Error::invalid("empty fold plan"));
        }
        Ok(Self { k, group_key, scheme, assignment })
    }
}

fn groups<'a>(records: &'a [SlideRecord], key: GroupKey) -> Result<BTreeMap<&'a str, Vec<usize>>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut ids = std::collections::BTreeSet::new();
    for (i, r) in records.iter().enumerate() {
        if !ids.insert(r.slide_id.as_str()) {
            return Err(Error::invalid(format!("duplicate slide id {}", r.slide_id)));
        }
        groups.entry(key.of(r)).or_default().push(i);
    }
    Ok(groups)
}

/// Whole groups go, largest first, onto the currently smallest fold (lowest
/// index on ties). The seed shuffles the groups before the stable size sort,
/// so it only decides the order among equally sized groups.
pub fn split_by_group(records: &[SlideRecord], key: GroupKey, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    let groups = groups(records, key)?;
    if groups.len() < k {
        return Err(Error::invalid(format!("{} groups cannot fill {k} folds", groups.len())));
    }
    let mut order: Vec<&Vec<usize>> = groups.values().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|g| std::cmp::Reverse(g.len()));

    let mut fold = vec![usize::MAX; records.len()];
    let mut sizes = vec![0usize; k];
    for members in order {
        let target = (0..k).min_by_key(|&f| (sizes[f], f)).unwrap();
        sizes[target] += members.len();
        for &i in members {
            fold[i] = target;
        }
    }
    let assignment = records.iter().zip(fold).map(|(r, f)| (r.slide_id.clone(), f)).collect();
    Ok(FoldPlan { k, group_key: key, scheme: FoldScheme::KFold, assignment })
}

/// One fold per cohort, cohorts numbered in sorted name order.
pub fn leave_one_cohort_out(records: &[SlideRecord]) -> Result<FoldPlan> {
    let groups = groups(records, GroupKey::Cohort)?;
    if groups.len() < 2 {
        return Err(Error::invalid("leave-one-cohort-out needs at least 2 cohorts"));
    }
    let index: BTreeMap<&str, usize> = groups.keys().enumerate().map(|(i, &c)| (c, i)).collect();
    let assignment = records.iter().map(|r| (r.slide_id.clone(), index[r.cohort.as_str()])).collect();
    Ok(FoldPlan { k: groups.len(), group_key: GroupKey::Cohort, scheme: FoldScheme::LeaveOneCohortOut, assignment })
}

/// A trained candidate for one fold with its validation readout.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub params: ModelParams,
    /// Epoch at which the parameters were taken.
    pub epoch: usize,
    pub val_predictions: Vec<f64>,
    pub val_labels: Vec<f64>,
}

/// Index of the candidate with the highest validation Pearson; ties go to
/// the earliest epoch, then to the earliest candidate.
pub fn select_champion(candidates: &[Candidate]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let r = pearson(&c.val_predictions, &c.val_labels)?;
        let better = match best {
            None => true,
            Some((j, rb)) => r > rb || (r == rb && c.epoch < candidates[j].epoch),
        };
        if better {
            best = Some((i, r));
        }
    }
    Ok(best.unwrap().0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    hyper: HyperParams,
    members: Vec<String>,
}

pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub hyper: HyperParams,
    pub members: Vec<ModelParams>,
}

impl Ensemble {
    pub fn new(hyper: HyperParams, members: Vec<ModelParams>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("empty ensemble"));
        }
        let shape = crate::milnet::ModelShape::from_hyper(&hyper);
        if members.iter().any(|m| m.shape != shape) {
            return Err(Error::invalid("ensemble members have different shapes"));
        }
        Ok(Self { hyper, members })
    }

    /// Mean of the member predictions, accumulated as a running mean so
    /// identical members reproduce the single-model value exactly.
    pub fn predict(&self, bag: &FeatureBag) -> Result<f64> {
        let mut mean = 0.0;
        for (k, m) in self.members.iter().enumerate() {
            mean += (predict(m, bag)? - mean) / (k + 1) as f64;
        }
        Ok(mean)
    }

    /// Writes `member_<i>.ectm` files plus a JSON manifest into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let name = format!("member_{i}.ectm");
            write_checkpoint_file(m, &self.hyper, dir.join(&name))?;
            names.push(name);
        }
        let manifest = Manifest { hyper: self.hyper.clone(), members: names };
        fs::write(dir.join(ENSEMBLE_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(ENSEMBLE_MANIFEST))?)?;
        let mut members = Vec::new();
        for name in &manifest.members {
            let (params, hyper) = read_checkpoint_file(dir.join(name))?;
            if crate::milnet::ModelShape::from_hyper(&hyper) != crate::milnet::ModelShape::from_hyper(&manifest.hyper) {
                return Err(Error::invalid(format!("{name} does not match the manifest shape")));
            }
            members.push(params);
        }
        Self::new(manifest.hyper, members)
    }
}

/// Mean of member predictions for one bag.
pub fn ensemble_predict(ensemble: &Ensemble, bag: &FeatureBag) -> Result<f64> {
    ensemble.predict(bag)
}
