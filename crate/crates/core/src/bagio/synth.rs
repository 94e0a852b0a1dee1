//! Synthetic cohorts with a known scoring oracle.
//!
//! Every tile carries a latent lymphocyte density `d` in `[0, 1]`. Its
//! feature vector is a fixed random linear embedding of `(d, z)` where `z`
//! is per-tile Gaussian nuisance, and the slide label is `100 * mean(d)`.
//! The label is therefore exactly decodable from the features.
//!
//! Each slide draws from its own ChaCha stream, so any bag can be
//! regenerated on its own; [`LazyCohort`] uses that to avoid holding a
//! multi-gigabyte cohort in memory.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BagSource, FeatureBag, SlideRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityDistribution {
    /// Every tile has the same density.
    Constant { value: f64 },
    /// Slide mean `m ~ Beta(slide_alpha, slide_beta)`, tile density
    /// `d ~ Beta(m * concentration, (1 - m) * concentration)`.
    Beta { slide_alpha: f64, slide_beta: f64, concentration: f64 },
}

/// Exponential survival with hazard `baseline_hazard * exp(log_hr_per_10pct * til / 10)`
/// and independent exponential censoring, truncated at `follow_up_months`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSynth {
    pub baseline_hazard: f64,
    pub log_hr_per_10pct: f64,
    pub censor_hazard: f64,
    pub follow_up_months: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub tiles_min: usize,
    pub tiles_max: usize,
    pub dim: usize,
    pub seed: u64,
    pub noise_dim: usize,
    pub density: DensityDistribution,
    pub n_centres: usize,
    pub n_cohorts: usize,
    pub mpp: f32,
    pub tile_size_px: u32,
    pub survival: Option<SurvivalSynth>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_slides: 100,
            tiles_min: 500,
            tiles_max: 2000,
            dim: 2048,
            seed: 0,
            noise_dim: 8,
            density: DensityDistribution::Beta { slide_alpha: 1.2, slide_beta: 2.5, concentration: 6.0 },
            n_centres: 10,
            n_cohorts: 5,
            mpp: 0.5,
            tile_size_px: 512,
            survival: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_slides == 0 {
            return Err(Error::invalid("synthetic cohort must have at least one slide"));
        }
        if self.tiles_min == 0 || self.tiles_max < self.tiles_min {
            return Err(Error::invalid("need 1 <= tiles_min <= tiles_max"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("dim must be positive"));
        }
        if self.n_centres == 0 || self.n_cohorts == 0 {
            return Err(Error::invalid("need at least one centre and one cohort"));
        }
        if !(self.mpp > 0.0) || self.tile_size_px == 0 {
            return Err(Error::invalid("mpp and tile size must be positive"));
        }
        match self.density {
            DensityDistribution::Constant { value } if !(0.0..=1.0).contains(&value) => {
                return Err(Error::invalid("constant density must lie in [0, 1]"));
            }
            DensityDistribution::Beta { slide_alpha, slide_beta, concentration }
                if !(slide_alpha > 0.0 && slide_beta > 0.0 && concentration > 0.0) =>
            {
                return Err(Error::invalid("beta parameters must be positive"));
            }
            _ => {}
        }
        if let Some(s) = &self.survival {
            if !(s.baseline_hazard > 0.0 && s.censor_hazard >= 0.0 && s.follow_up_months > 0.0) {
                return Err(Error::invalid("invalid survival parameters"));
            }
        }
        Ok(())
    }

    fn slide_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        rng
    }

    fn survival_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((1u64 << 63) | index as u64);
        rng
    }

    /// `dim x (1 + noise_dim)` embedding, row-major, drawn from stream 0.
    fn embedding(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        (0..self.dim * (1 + self.noise_dim)).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn densities(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = rng.random_range(self.tiles_min..=self.tiles_max);
        match self.density {
            DensityDistribution::Constant { value } => vec![value; n],
            DensityDistribution::Beta { slide_alpha, slide_beta, concentration } => {
                let slide = Beta::new(slide_alpha, slide_beta).expect("validated beta");
                let m: f64 = slide.sample(rng).clamp(1e-3, 1.0 - 1e-3);
                let tile = Beta::new(m * concentration, (1.0 - m) * concentration).expect("positive");
                (0..n).map(|_| tile.sample(rng)).collect()
            }
        }
    }

    fn record(&self, index: usize, densities: &[f64]) -> SlideRecord {
        let mean = densities.iter().sum::<f64>() / densities.len() as f64;
        let til = mean * 100.0;
        let centre = index % self.n_centres;
        let (os_months, os_event) = match &self.survival {
            Some(s) => {
                let mut rng = self.survival_rng(index);
                let hazard = s.baseline_hazard * (s.log_hr_per_10pct * til / 10.0).exp();
                let t: f64 = Exp::new(hazard).expect("positive hazard").sample(&mut rng);
                let c: f64 = if s.censor_hazard > 0.0 {
                    Exp::new(s.censor_hazard).expect("positive").sample(&mut rng)
                } else {
                    f64::INFINITY
                };
                let c = c.min(s.follow_up_months);
                if t <= c { (Some(t), Some(true)) } else { (Some(c), Some(false)) }
            }
            None => (None, None),
        };
        SlideRecord {
            slide_id: slide_id(index),
            cohort: format!("cohort_{}", centre % self.n_cohorts),
            centre: format!("centre_{centre:02}"),
            til_score_pct: til,
            covariates: BTreeMap::new(),
            os_months,
            os_event,
        }
    }

    fn bag(&self, index: usize, embedding: &[f64]) -> (FeatureBag, Vec<f64>) {
        let mut rng = self.slide_rng(index);
        let densities = self.densities(&mut rng);
        let n = densities.len();
        let width = 1 + self.noise_dim;
        let mut latent = vec![0.0f64; width];
        let mut features = Vec::with_capacity(n * self.dim);
        for &d in &densities {
            latent[0] = d;
            for z in latent[1..].iter_mut() {
                *z = rng.sample(StandardNormal);
            }
            for row in embedding.chunks_exact(width) {
                let v: f64 = row.iter().zip(&latent).map(|(e, l)| e * l).sum();
                features.push(v as f32);
            }
        }
        let cols = (n as f64).sqrt().ceil() as usize;
        let tile_xy = (0..n)
            .map(|k| ((k % cols) as u32 * self.tile_size_px, (k / cols) as u32 * self.tile_size_px))
            .collect();
        let bag = FeatureBag {
            slide_id: slide_id(index),
            dim: self.dim,
            tile_xy,
            features,
            mpp: self.mpp,
            tile_size_px: self.tile_size_px,
        };
        (bag, densities)
    }
}

fn slide_id(index: usize) -> String {
    format!("slide_{index:05}")
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub bags: Vec<FeatureBag>,
    pub records: Vec<SlideRecord>,
    /// Latent tile densities, aligned with `bags`.
    pub densities: Vec<Vec<f64>>,
}

pub fn synth_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let embedding = cfg.embedding();
    let mut out = SynthCohort { bags: Vec::new(), records: Vec::new(), densities: Vec::new() };
    for i in 0..cfg.n_slides {
        let (bag, d) = cfg.bag(i, &embedding);
        out.records.push(cfg.record(i, &d));
        out.bags.push(bag);
        out.densities.push(d);
    }
    Ok(out)
}

/// A synthetic cohort whose bags are rebuilt on every access. Records are
/// computed up front; they only need the density draws.
#[derive(Debug, Clone)]
pub struct LazyCohort {
    cfg: SynthConfig,
    embedding: Vec<f64>,
    records: Vec<SlideRecord>,
}

impl LazyCohort {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let records = (0..cfg.n_slides)
            .map(|i| {
                let d = cfg.densities(&mut cfg.slide_rng(i));
                cfg.record(i, &d)
            })
            .collect();
        let embedding = cfg.embedding();
        Ok(Self { cfg, embedding, records })
    }

    pub fn records(&self) -> &[SlideRecord] {
        &self.records
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// A view over a subset of slides, in the given order.
    pub fn subset<'a>(&'a self, indices: &'a [usize]) -> CohortSubset<'a> {
        CohortSubset { cohort: self, indices }
    }
}

impl BagSource for LazyCohort {
    fn len(&self) -> usize {
        self.cfg.n_slides
    }

    fn bag(&self, index: usize) -> Result<Cow<'_, FeatureBag>> {
        Ok(Cow::Owned(self.cfg.bag(index, &self.embedding).0))
    }
}

pub struct CohortSubset<'a> {
    cohort: &'a LazyCohort,
    indices: &'a [usize],
}

impl BagSource for CohortSubset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn bag(&self, index: usize) -> Result<Cow<'_, FeatureBag>> {
        self.cohort.bag(self.indices[index])
    }
}
