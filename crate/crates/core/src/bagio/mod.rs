//! Feature bags, clinical records and synthetic cohorts.

mod clinical;
mod dir;
mod format;
mod synth;

use std::borrow::Cow;

pub use clinical::{
    load_clinical, read_predictions, write_clinical, write_predictions, CovariateValue, Prediction,
    SlideRecord,
};
pub use dir::{BagDir, BAG_EXTENSION};
pub use format::{read_bag, read_bag_file, read_bag_with_dim, write_bag, write_bag_file, BAG_MAGIC, BAG_VERSION};
pub use synth::{synth_cohort, DensityDistribution, LazyCohort, SurvivalSynth, SynthCohort, SynthConfig};

use crate::error::{Error, Result};

/// One slide: tile coordinates plus an `n_tiles x dim` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub slide_id: String,
    pub dim: usize,
    /// Top-left corners of the tiles in source pixels.
    pub tile_xy: Vec<(u32, u32)>,
    /// Row-major, one row per tile.
    pub features: Vec<f32>,
    pub mpp: f32,
    /// Tile edge length in source pixels.
    pub tile_size_px: u32,
}

impl FeatureBag {
    pub fn new(
        slide_id: impl Into<String>,
        dim: usize,
        tile_xy: Vec<(u32, u32)>,
        features: Vec<f32>,
        mpp: f32,
        tile_size_px: u32,
    ) -> Result<Self> {
        let bag = Self { slide_id: slide_id.into(), dim, tile_xy, features, mpp, tile_size_px };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_xy.is_empty() {
            return Err(Error::invalid(format!("bag {} has no tiles", self.slide_id)));
        }
        if self.dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if self.features.len() != self.tile_xy.len() * self.dim {
            return Err(Error::DimMismatch {
                expected: self.tile_xy.len() * self.dim,
                found: self.features.len(),
            });
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "bag {} tile {} feature {}",
                self.slide_id,
                i / self.dim,
                i % self.dim
            )));
        }
        Ok(())
    }

    pub fn n_tiles(&self) -> usize {
        self.tile_xy.len()
    }

    pub fn tile(&self, k: usize) -> &[f32] {
        &self.features[k * self.dim..(k + 1) * self.dim]
    }
}

/// Indexed access to bags. Implemented by in-memory slices and by cohorts
/// that regenerate bags on demand.
pub trait BagSource: Sync {
    fn len(&self) -> usize;

    fn bag(&self, index: usize) -> Result<Cow<'_, FeatureBag>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl BagSource for [FeatureBag] {
    fn len(&self) -> usize {
        <[FeatureBag]>::len(self)
    }

    fn bag(&self, index: usize) -> Result<Cow<'_, FeatureBag>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

impl BagSource for Vec<FeatureBag> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn bag(&self, index: usize) -> Result<Cow<'_, FeatureBag>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}
