//! Computational stromal TIL scoring from whole-slide images.
//!
//! Modules:
//!
//! - [`foreground`]: tissue masking of flat raster slides and the 512 px tile grid
//! - [`bagio`]: feature bags, their binary format, clinical tables and synthetic cohorts
//! - [`milnet`]: the gated attention-MIL regressor with analytic gradients and ADAM training
//! - [`folds`]: grouped fold plans, champion selection and ensembles
//! - [`concord`]: concordance and calibration metrics
//! - [`survstats`]: Cox regression, Harrell's C, Schoenfeld diagnostics, Kaplan-Meier, log-rank
//!
//! Raster IO for the binary PNM family lives in [`pnm`].

pub mod bagio;
pub mod concord;
pub mod error;
pub mod folds;
pub mod foreground;
pub mod milnet;
pub mod pnm;
pub mod survstats;

pub use bagio::{FeatureBag, SlideRecord, SynthConfig};
pub use concord::{CalibrationCurve, MetricsReport};
pub use error::{Error, Result};
pub use folds::{Ensemble, FoldPlan, GroupKey};
pub use foreground::{FesiParams, ForegroundMask, RasterSlide, TileGrid};
pub use milnet::{ForwardTrace, Gradients, HyperParams, ModelParams};
pub use survstats::{CoxFit, KmCurve, SurvivalDataset};
