use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Serialize;

use tilscore_core::bagio::{
    load_clinical, read_bag_file, read_predictions, write_bag_file, write_clinical, write_predictions, BagDir,
    BagSource, LazyCohort, Prediction, BAG_EXTENSION,
};
use tilscore_core::concord::{calibration, evaluate_at};
use tilscore_core::folds::{leave_one_cohort_out, select_champion, split_by_group, Candidate, Ensemble};
use tilscore_core::foreground::{compute_foreground, filter_tiles, grid_tiles};
use tilscore_core::milnet::{forward, read_checkpoint_file, train, write_checkpoint_file, Mode, TrainHistory};
use tilscore_core::survstats::{
    attach_covariate, cox_fit, cutoff_groups, harrell_c, km_curve, logrank, median_split, minmax_normalize,
    schoenfeld_test, CoxFit, CovariateSpec, KmCurve, SurvivalDataset,
};
use tilscore_core::{pnm, Error, GroupKey, RasterSlide, SlideRecord};

use crate::config::{write_echo, Cli, Command, FileConfig, Group, PlanKind, Split};

/// Covariate name under which the model score enters the Cox models.
pub const SCORE_COVARIATE: &str = "ectil_score";
/// Months at which the survival summary is read off.
pub const SUMMARY_MONTHS: f64 = 36.0;

pub fn exit_code(err: &anyhow::Error) -> u8 {
    let non_convergence = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::NonConvergence(_))));
    if non_convergence {
        3
    } else {
        2
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut config = FileConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.synth.seed = seed;
    }
    let seed = cli.seed.unwrap_or(config.synth.seed);
    let out = match &cli.command {
        Command::Tile { out, .. }
        | Command::Synth { out }
        | Command::Train { out, .. }
        | Command::Predict { out, .. }
        | Command::Evaluate { out, .. }
        | Command::Survival { out, .. }
        | Command::Heatmap { out, .. } => out,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Tile { image, mpp, out } => tile(image, *mpp, out, &config)?,
        Command::Synth { out } => synth(out, &config)?,
        Command::Train { bags, clinical, plan, k, group, restarts, folds, max_epochs, out } => {
            let opts = TrainOpts {
                plan: *plan,
                k: *k,
                group: *group,
                restarts: *restarts,
                folds: folds.clone(),
                max_epochs: *max_epochs,
            };
            train_cmd(bags, clinical, &opts, out, &mut config, seed)?
        }
        Command::Predict { checkpoints, bags, out } => predict_cmd(checkpoints, bags, out)?,
        Command::Evaluate { predictions, clinical, cutoffs, out } => evaluate_cmd(predictions, clinical, cutoffs, out)?,
        Command::Survival {
            predictions,
            clinical,
            train_predictions,
            split,
            cutoffs,
            numeric,
            factor,
            no_score,
            out,
        } => {
            let mut specs = config.covariates.clone();
            specs.extend(parse_specs(numeric, factor)?);
            let opts = SurvivalOpts {
                train_predictions: train_predictions.as_deref(),
                split: *split,
                cutoffs,
                specs,
                with_score: !no_score,
            };
            survival_cmd(predictions, clinical, &opts, out)?
        }
        Command::Heatmap { checkpoint, bag, out } => heatmap(checkpoint, bag, out)?,
    }
    write_echo(out, cli, seed, &config)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn read_clinical(path: &Path) -> anyhow::Result<Vec<SlideRecord>> {
    load_clinical(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn read_preds(path: &Path) -> anyhow::Result<Vec<Prediction>> {
    read_predictions(open(path)?).with_context(|| format!("reading {}", path.display()))
}

#[derive(Serialize)]
struct TileSummary {
    slide_id: String,
    width_px: usize,
    height_px: usize,
    mpp: f64,
    mask_width: usize,
    mask_height: usize,
    foreground_fraction: f64,
    cols: usize,
    rows: usize,
    n_tiles: usize,
    n_kept: usize,
}

fn tile(image: &Path, mpp: f64, out: &Path, config: &FileConfig) -> anyhow::Result<()> {
    let slide_id = image.file_stem().and_then(|s| s.to_str()).unwrap_or("slide").to_string();
    let slide = RasterSlide::read_ppm(slide_id, open(image)?, Some(mpp))?;
    let mask = compute_foreground(&slide, &config.fesi)?;
    let grid = grid_tiles(slide.width_px, slide.height_px, slide.mpp, config.fesi.tile_size_px, config.fesi.target_mpp)?;
    let grid = filter_tiles(&grid, &mask)?;

    let mut sink = create(&out.join("mask.pgm"))?;
    mask.write_pgm(&mut sink)?;
    sink.flush()?;
    let mut sink = create(&out.join("tiles.tsv"))?;
    grid.write_manifest(&mut sink)?;
    sink.flush()?;

    let summary = TileSummary {
        slide_id: slide.slide_id.clone(),
        width_px: slide.width_px,
        height_px: slide.height_px,
        mpp: slide.mpp,
        mask_width: mask.width,
        mask_height: mask.height,
        foreground_fraction: mask.count() as f64 / mask.bits.len() as f64,
        cols: grid.cols,
        rows: grid.rows,
        n_tiles: grid.tiles.len(),
        n_kept: grid.kept_count(),
    };
    write_json(&out.join("summary.json"), &summary)
}

fn synth(out: &Path, config: &FileConfig) -> anyhow::Result<()> {
    let cohort = LazyCohort::new(config.synth.clone())?;
    let bag_dir = out.join("bags");
    fs::create_dir_all(&bag_dir)?;
    (0..cohort.len()).into_par_iter().try_for_each(|i| -> anyhow::Result<()> {
        let bag = cohort.bag(i)?;
        write_bag_file(&bag, bag_dir.join(format!("{}.{BAG_EXTENSION}", bag.slide_id)))?;
        Ok(())
    })?;
    let mut sink = create(&out.join("clinical.csv"))?;
    write_clinical(cohort.records(), &mut sink)?;
    sink.flush()?;
    Ok(())
}

struct TrainOpts {
    plan: PlanKind,
    k: usize,
    group: Group,
    restarts: usize,
    folds: Option<Vec<usize>>,
    max_epochs: Option<usize>,
}

/// Seed of one training run, mixed from the run seed, fold and restart.
fn restart_seed(seed: u64, fold: usize, restart: usize) -> u64 {
    let mut z = seed
        ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (restart as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Serialize)]
struct RestartRecord {
    restart: usize,
    seed: u64,
    history: TrainHistory,
}

#[derive(Serialize)]
struct FoldHistory {
    fold: usize,
    champion: usize,
    restarts: Vec<RestartRecord>,
}

#[derive(Serialize)]
struct FoldSummary {
    fold: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    champion_restart: usize,
    best_epoch: usize,
    val_pearson: Option<f64>,
    val_explained_variance: Option<f64>,
}

#[derive(Serialize)]
struct TrainSummary {
    plan: PlanKind,
    k: usize,
    group: Group,
    folds: Vec<FoldSummary>,
}

fn train_cmd(
    bags: &Path,
    clinical: &Path,
    opts: &TrainOpts,
    out: &Path,
    config: &mut FileConfig,
    seed: u64,
) -> anyhow::Result<()> {
    if opts.restarts == 0 {
        bail!(Error::InvalidInput("--restarts must be at least 1".into()));
    }
    if let Some(e) = opts.max_epochs {
        config.hyper.max_epochs = e;
        config.hyper.validate()?;
    }
    let hyper = config.hyper.clone();
    let records = read_clinical(clinical)?;
    let ids: Vec<String> = records.iter().map(|r| r.slide_id.clone()).collect();
    let source = BagDir::open(bags, &ids)?;
    let labels: Vec<f64> = records.iter().map(SlideRecord::label_fraction).collect();

    let key = match opts.group {
        Group::Centre => GroupKey::Centre,
        Group::Cohort => GroupKey::Cohort,
    };
    let plan = match opts.plan {
        PlanKind::Kfold => split_by_group(&records, key, opts.k, seed)?,
        PlanKind::Loco => leave_one_cohort_out(&records)?,
    };
    let mut sink = create(&out.join("plan.csv"))?;
    plan.write_csv(&mut sink)?;
    sink.flush()?;

    let folds: Vec<usize> = match &opts.folds {
        Some(f) => f.clone(),
        None => (0..plan.k).collect(),
    };
    if let Some(&f) = folds.iter().find(|&&f| f >= plan.k) {
        bail!(Error::OutOfRange(format!("fold {f} of {}", plan.k)));
    }

    let mut champions = Vec::new();
    let mut summaries = Vec::new();
    let mut held_out: Vec<Prediction> = Vec::new();
    for &fold in &folds {
        let roles = plan.roles(fold)?;
        let mut candidates = Vec::new();
        let mut restarts = Vec::new();
        for r in 0..opts.restarts {
            let run_seed = restart_seed(seed, fold, r);
            let outcome = train(&source, &labels, &roles.train, &roles.val, &hyper, run_seed)
                .with_context(|| format!("training fold {fold} restart {r}"))?;
            candidates.push(Candidate {
                params: outcome.params,
                epoch: outcome.history.best_epoch,
                val_predictions: outcome.val_predictions,
                val_labels: roles.val.iter().map(|&i| labels[i]).collect(),
            });
            restarts.push(RestartRecord { restart: r, seed: run_seed, history: outcome.history });
        }
        let champion = select_champion(&candidates)?;
        let best = candidates.swap_remove(champion);
        let best_record = restarts[champion].history.best().cloned();

        let fold_dir = out.join(format!("fold_{fold}"));
        fs::create_dir_all(&fold_dir)?;
        write_checkpoint_file(&best.params, &hyper, fold_dir.join("model.ectm"))?;
        write_json(&fold_dir.join("history.json"), &FoldHistory { fold, champion, restarts })?;

        let scored = if roles.test.is_empty() { &roles.val } else { &roles.test };
        let mut preds: Vec<Prediction> = scored
            .par_iter()
            .map(|&i| -> anyhow::Result<Prediction> {
                let bag = source.bag(i)?;
                let score = tilscore_core::milnet::predict(&best.params, &bag)?;
                Ok(Prediction { slide_id: ids[i].clone(), ectil_score: score })
            })
            .collect::<anyhow::Result<_>>()?;
        preds.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
        let mut sink = create(&fold_dir.join("predictions.csv"))?;
        write_predictions(&preds, &mut sink)?;
        sink.flush()?;
        held_out.extend(preds);

        summaries.push(FoldSummary {
            fold,
            n_train: roles.train.len(),
            n_val: roles.val.len(),
            n_test: roles.test.len(),
            champion_restart: champion,
            best_epoch: best.epoch,
            val_pearson: best_record.as_ref().and_then(|e| e.val_pearson),
            val_explained_variance: best_record.as_ref().map(|e| e.val_explained_variance),
        });
        champions.push(best.params);
    }

    held_out.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let mut sink = create(&out.join("held_out_predictions.csv"))?;
    write_predictions(&held_out, &mut sink)?;
    sink.flush()?;
    Ensemble::new(hyper, champions)?.save(out.join("ensemble"))?;
    let summary = TrainSummary { plan: opts.plan, k: plan.k, group: opts.group, folds: summaries };
    write_json(&out.join("summary.json"), &summary)
}

/// Loads checkpoint files and ensemble directories into one ensemble.
fn load_members(paths: &[std::path::PathBuf]) -> anyhow::Result<Ensemble> {
    let mut hyper = None;
    let mut members = Vec::new();
    for path in paths {
        let (h, m) = if path.is_dir() {
            let e = Ensemble::load(path).with_context(|| format!("loading ensemble {}", path.display()))?;
            (e.hyper, e.members)
        } else {
            let (p, h) = read_checkpoint_file(path).with_context(|| format!("loading {}", path.display()))?;
            (h, vec![p])
        };
        hyper.get_or_insert(h);
        members.extend(m);
    }
    let hyper = hyper.ok_or_else(|| Error::InvalidInput("no checkpoints given".into()))?;
    Ok(Ensemble::new(hyper, members)?)
}

fn predict_cmd(checkpoints: &[std::path::PathBuf], bags: &Path, out: &Path) -> anyhow::Result<()> {
    let ensemble = load_members(checkpoints)?;
    let source = BagDir::scan(bags)?;
    if source.is_empty() {
        bail!(Error::InvalidInput(format!("no .{BAG_EXTENSION} files in {}", bags.display())));
    }
    let preds: Vec<Prediction> = (0..source.len())
        .into_par_iter()
        .map(|i| -> anyhow::Result<Prediction> {
            let bag = source.bag(i)?;
            let score = ensemble.predict(&bag).with_context(|| format!("scoring {}", bag.slide_id))?;
            Ok(Prediction { slide_id: source.ids()[i].clone(), ectil_score: score })
        })
        .collect::<anyhow::Result<_>>()?;
    let mut sink = create(&out.join("predictions.csv"))?;
    write_predictions(&preds, &mut sink)?;
    sink.flush()?;
    Ok(())
}

/// Predictions and clinical records matched on slide id, in prediction order.
fn join<'a>(preds: &[Prediction], records: &'a [SlideRecord]) -> anyhow::Result<Vec<(f64, &'a SlideRecord)>> {
    let by_id: BTreeMap<&str, &SlideRecord> = records.iter().map(|r| (r.slide_id.as_str(), r)).collect();
    preds
        .iter()
        .map(|p| match by_id.get(p.slide_id.as_str()) {
            Some(r) => Ok((p.ectil_score, *r)),
            None => bail!(Error::InvalidInput(format!("slide {} has no clinical record", p.slide_id))),
        })
        .collect()
}

fn evaluate_cmd(predictions: &Path, clinical: &Path, cutoffs: &[f64], out: &Path) -> anyhow::Result<()> {
    let preds = read_preds(predictions)?;
    let records = read_clinical(clinical)?;
    let joined = join(&preds, &records)?;
    let scores: Vec<f64> = joined.iter().map(|(s, _)| *s).collect();
    let labels: Vec<f64> = joined.iter().map(|(_, r)| r.til_score_pct).collect();
    let report = evaluate_at(&scores, &labels, cutoffs)?;
    write_json(&out.join("metrics.json"), &report)?;
    let curve = calibration(&scores, &labels)?;
    let mut sink = create(&out.join("calibration.csv"))?;
    curve.write_csv(&mut sink)?;
    sink.flush()?;
    write_json(&out.join("calibration.json"), &curve)
}

fn parse_specs(numeric: &[String], factor: &[String]) -> anyhow::Result<Vec<CovariateSpec>> {
    let mut specs = Vec::new();
    for n in numeric {
        let (name, scale) = match n.split_once('=') {
            Some((name, s)) => {
                let scale: f64 = s
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad scale in --numeric {n:?}")))?;
                (name, scale)
            }
            None => (n.as_str(), 1.0),
        };
        specs.push(CovariateSpec::Numeric { name: name.into(), scale });
    }
    for f in factor {
        let (name, reference) = match f.split_once('=') {
            Some((name, r)) => (name, Some(r.to_string())),
            None => (f.as_str(), None),
        };
        specs.push(CovariateSpec::Factor { name: name.into(), reference });
    }
    Ok(specs)
}

struct SurvivalOpts<'a> {
    train_predictions: Option<&'a Path>,
    split: Split,
    cutoffs: &'a [f64],
    specs: Vec<CovariateSpec>,
    with_score: bool,
}

#[derive(Serialize)]
struct TableRow {
    model: String,
    variable: String,
    level: Option<String>,
    reference: Option<String>,
    hr: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    p: Option<f64>,
    concordance: Option<f64>,
}

#[derive(Serialize)]
struct TermReport {
    variable: String,
    level: Option<String>,
    reference: Option<String>,
    beta: f64,
    se: f64,
    hr: f64,
    ci_low: f64,
    ci_high: f64,
    z: f64,
    p: f64,
}

#[derive(Serialize)]
struct ModelReport {
    model: String,
    n: usize,
    n_events: usize,
    terms: Vec<TermReport>,
    concordance: Option<f64>,
    loglik: f64,
    loglik_null: f64,
    lr_chi2: f64,
    lr_p: f64,
    iterations: usize,
    ph_test: Option<tilscore_core::survstats::PhTest>,
}

#[derive(Serialize)]
struct GroupReport {
    group: usize,
    label: String,
    n: usize,
    n_events: usize,
    survival_36m: f64,
}

#[derive(Serialize)]
struct SplitReport {
    score: String,
    split: Split,
    threshold: Option<f64>,
    groups: Vec<GroupReport>,
    /// Log-rank test, absent when fewer than two groups are populated.
    logrank: Option<tilscore_core::survstats::LogRank>,
    /// Univariable Cox fit on group indicators against the lowest group.
    cox: Option<ModelReport>,
}

#[derive(Serialize)]
struct Normalization {
    source: String,
    min: f64,
    max: f64,
    scale: f64,
}

#[derive(Serialize)]
struct SurvivalReport {
    n: usize,
    n_events: usize,
    n_dropped: usize,
    normalization: Option<Normalization>,
    multivariable: Option<ModelReport>,
    univariable: Vec<ModelReport>,
    km: Vec<SplitReport>,
}

fn model_report(model: &str, fit: &CoxFit, data: &SurvivalDataset) -> ModelReport {
    let terms = fit
        .terms
        .iter()
        .zip(&data.columns)
        .map(|(t, c)| TermReport {
            variable: c.variable.clone(),
            level: c.level.clone(),
            reference: c.reference.clone(),
            beta: t.beta,
            se: t.se,
            hr: t.hr,
            ci_low: t.ci_low,
            ci_high: t.ci_high,
            z: t.z,
            p: t.p,
        })
        .collect();
    ModelReport {
        model: model.into(),
        n: fit.n,
        n_events: fit.n_events,
        terms,
        concordance: fit.concordance,
        loglik: fit.loglik,
        loglik_null: fit.loglik_null,
        lr_chi2: fit.lr_chi2,
        lr_p: fit.lr_p,
        iterations: fit.iterations,
        ph_test: schoenfeld_test(fit, data).ok(),
    }
}

fn table_rows(report: &ModelReport) -> Vec<TableRow> {
    let mut rows: Vec<TableRow> = report
        .terms
        .iter()
        .map(|t| TableRow {
            model: report.model.clone(),
            variable: t.variable.clone(),
            level: t.level.clone(),
            reference: t.reference.clone(),
            hr: Some(t.hr),
            ci_low: Some(t.ci_low),
            ci_high: Some(t.ci_high),
            p: Some(t.p),
            concordance: None,
        })
        .collect();
    rows.push(concordance_row(&report.model, report.concordance));
    rows
}

fn concordance_row(model: &str, c: Option<f64>) -> TableRow {
    TableRow {
        model: model.into(),
        variable: "concordance".into(),
        level: None,
        reference: None,
        hr: None,
        ci_low: None,
        ci_high: None,
        p: None,
        concordance: c,
    }
}

fn group_labels(split: Split, cutoffs: &[f64], n_groups: usize) -> Vec<String> {
    match split {
        Split::Median => vec!["low".into(), "high".into()],
        Split::Cutoffs => (0..n_groups)
            .map(|g| match (g.checked_sub(1).map(|i| cutoffs[i]), cutoffs.get(g)) {
                (None, Some(hi)) => format!("<{hi}"),
                (Some(lo), Some(hi)) => format!("{lo}-{hi}"),
                (Some(lo), None) => format!(">={lo}"),
                (None, None) => "all".into(),
            })
            .collect(),
    }
}

fn split_report(
    name: &str,
    scores_pct: &[f64],
    data: &SurvivalDataset,
    split: Split,
    cutoffs: &[f64],
    out: &Path,
) -> anyhow::Result<SplitReport> {
    let (groups, threshold) = match split {
        Split::Median => (median_split(scores_pct)?, Some(tilscore_core::survstats::median(scores_pct)?)),
        Split::Cutoffs => (cutoff_groups(scores_pct, cutoffs)?, None),
    };
    let labels = group_labels(split, cutoffs, cutoffs.len() + 1);
    let curves: Vec<KmCurve> = km_curve(&data.time, &data.event, &groups)?;

    let mut w = csv::Writer::from_writer(create(&out.join(format!("km_{name}.csv")))?);
    w.write_record(["group", "t", "S", "at_risk"])?;
    for c in &curves {
        w.write_record([labels[c.group].as_str(), "0", "1", &c.n.to_string()])?;
        for s in &c.steps {
            w.write_record([labels[c.group].as_str(), &s.time.to_string(), &s.survival.to_string(), &s.at_risk.to_string()])?;
        }
    }
    w.flush()?;

    let present: Vec<usize> = curves.iter().map(|c| c.group).collect();
    let lr = if present.len() >= 2 { Some(logrank(&data.time, &data.event, &groups)?) } else { None };
    let cox = if present.len() >= 2 {
        let x: Vec<f64> = groups
            .iter()
            .flat_map(|&g| present[1..].iter().map(move |&p| f64::from(g == p)))
            .collect();
        let columns = present[1..]
            .iter()
            .map(|&p| tilscore_core::survstats::DesignColumn {
                variable: format!("{name}_group"),
                level: Some(labels[p].clone()),
                reference: Some(labels[present[0]].clone()),
            })
            .collect();
        let mut d = SurvivalDataset::new(data.time.clone(), data.event.clone(), columns, x)?;
        d.ids = data.ids.clone();
        let fit = cox_fit(&d)?;
        Some(model_report(&format!("{name}_groups"), &fit, &d))
    } else {
        None
    };

    let reports = curves
        .iter()
        .map(|c| GroupReport {
            group: c.group,
            label: labels[c.group].clone(),
            n: c.n,
            n_events: c.steps.iter().map(|s| s.n_event).sum(),
            survival_36m: c.survival_at(SUMMARY_MONTHS),
        })
        .collect();
    Ok(SplitReport {
        score: name.into(),
        split,
        threshold,
        groups: reports,
        logrank: lr,
        cox,
    })
}

fn survival_cmd(predictions: &Path, clinical: &Path, opts: &SurvivalOpts<'_>, out: &Path) -> anyhow::Result<()> {
    let preds = read_preds(predictions)?;
    let records = read_clinical(clinical)?;
    join(&preds, &records)?;

    let range_source = match opts.train_predictions {
        Some(p) => read_preds(p)?,
        None => preds.clone(),
    };
    let lo = range_source.iter().map(|p| p.ectil_score).fold(f64::INFINITY, f64::min);
    let hi = range_source.iter().map(|p| p.ectil_score).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = preds.iter().map(|p| p.ectil_score).collect();
    let normalized = minmax_normalize(&raw, lo, hi)?;
    let score_map: BTreeMap<String, f64> =
        preds.iter().zip(&normalized).map(|(p, &s)| (p.slide_id.clone(), 10.0 * s)).collect();
    let raw_map: BTreeMap<&str, f64> = preds.iter().map(|p| (p.slide_id.as_str(), p.ectil_score)).collect();

    let mut scored: Vec<SlideRecord> =
        records.into_iter().filter(|r| score_map.contains_key(&r.slide_id)).collect();
    attach_covariate(&mut scored, SCORE_COVARIATE, &score_map);

    let mut specs = Vec::new();
    if opts.with_score {
        specs.push(CovariateSpec::Numeric { name: SCORE_COVARIATE.into(), scale: 1.0 });
    }
    specs.extend(opts.specs.iter().cloned());
    let (data, dropped) = SurvivalDataset::from_records(&scored, &specs)?;
    if data.is_empty() {
        bail!(Error::InvalidInput("no subject has complete survival data".into()));
    }
    if data.n_events() == 0 {
        bail!(Error::InvalidInput("no events among the scored subjects".into()));
    }

    let mut rows = Vec::new();
    let multivariable = if data.n_covariates() == 0 {
        let c = harrell_c(&data.time, &data.event, &vec![0.0; data.len()]).ok();
        rows.push(concordance_row("null", c));
        None
    } else {
        let fit = cox_fit(&data).context("multivariable Cox model")?;
        let report = model_report("multivariable", &fit, &data);
        rows.extend(table_rows(&report));
        Some(report)
    };

    let mut univariable = Vec::new();
    if specs.len() > 1 {
        for spec in &specs {
            let cols: Vec<usize> =
                (0..data.n_covariates()).filter(|&j| data.columns[j].variable == spec.name()).collect();
            let sub = data.select(&cols);
            let fit = cox_fit(&sub).with_context(|| format!("univariable Cox model for `{}`", spec.name()))?;
            let report = model_report(&format!("univariable:{}", spec.name()), &fit, &sub);
            rows.extend(table_rows(&report));
            univariable.push(report);
        }
    }

    let by_id: BTreeMap<&str, &SlideRecord> = scored.iter().map(|r| (r.slide_id.as_str(), r)).collect();
    let model_pct: Vec<f64> = data.ids.iter().map(|id| 100.0 * raw_map[id.as_str()]).collect();
    let path_pct: Vec<f64> = data.ids.iter().map(|id| by_id[id.as_str()].til_score_pct).collect();
    let km = vec![
        split_report("model", &model_pct, &data, opts.split, opts.cutoffs, out)?,
        split_report("pathologist", &path_pct, &data, opts.split, opts.cutoffs, out)?,
    ];

    let mut w = csv::Writer::from_writer(create(&out.join("table.csv"))?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let report = SurvivalReport {
        n: data.len(),
        n_events: data.n_events(),
        n_dropped: dropped,
        normalization: opts.with_score.then(|| Normalization {
            source: if opts.train_predictions.is_some() { "train_predictions" } else { "predictions" }.into(),
            min: lo,
            max: hi,
            scale: 10.0,
        }),
        multivariable,
        univariable,
        km,
    };
    write_json(&out.join("report.json"), &report)
}

#[derive(Serialize)]
struct HeatmapTile {
    x: u32,
    y: u32,
    col: usize,
    row: usize,
    attention: f64,
    score: f64,
}

#[derive(Serialize)]
struct Geometry {
    slide_id: String,
    width: usize,
    height: usize,
    tile_size_px: u32,
    n_tiles: usize,
    prediction: f64,
    max_attention: f64,
    tiles: Vec<HeatmapTile>,
}

fn quantize(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

fn heatmap(checkpoint: &Path, bag_path: &Path, out: &Path) -> anyhow::Result<()> {
    let (params, _) = read_checkpoint_file(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let bag = read_bag_file(bag_path).with_context(|| format!("reading {}", bag_path.display()))?;
    if bag.dim != params.shape.input_dim {
        bail!(Error::DimMismatch { expected: params.shape.input_dim, found: bag.dim });
    }
    let trace = forward(&params, &bag, Mode::Eval)?;
    let px = bag.tile_size_px as f64;
    let cells: Vec<(usize, usize)> = bag
        .tile_xy
        .iter()
        .map(|&(x, y)| ((x as f64 / px).round() as usize, (y as f64 / px).round() as usize))
        .collect();
    let width = cells.iter().map(|c| c.0).max().unwrap_or(0) + 1;
    let height = cells.iter().map(|c| c.1).max().unwrap_or(0) + 1;
    let max_a = trace.attention.iter().copied().fold(0.0, f64::max);

    let mut attention = vec![0u8; width * height];
    let mut score = vec![0u8; width * height];
    let mut taken = vec![false; width * height];
    let mut tiles = Vec::with_capacity(bag.n_tiles());
    for (k, &(col, row)) in cells.iter().enumerate() {
        let at = row * width + col;
        if std::mem::replace(&mut taken[at], true) {
            bail!(Error::GeometryMismatch(format!("tiles share heatmap cell ({col}, {row})")));
        }
        attention[at] = quantize(trace.attention[k] / max_a);
        score[at] = quantize(trace.tile_scores[k]);
        tiles.push(HeatmapTile {
            x: bag.tile_xy[k].0,
            y: bag.tile_xy[k].1,
            col,
            row,
            attention: trace.attention[k],
            score: trace.tile_scores[k],
        });
    }
    let mut sink = create(&out.join("attention.pgm"))?;
    pnm::write_pgm(&mut sink, width, height, &attention)?;
    sink.flush()?;
    let mut sink = create(&out.join("score.pgm"))?;
    pnm::write_pgm(&mut sink, width, height, &score)?;
    sink.flush()?;
    let geometry = Geometry {
        slide_id: bag.slide_id.clone(),
        width,
        height,
        tile_size_px: bag.tile_size_px,
        n_tiles: bag.n_tiles(),
        prediction: trace.prediction,
        max_attention: max_a,
        tiles,
    };
    write_json(&out.join("geometry.json"), &geometry)
}
