//! Tissue foreground masking and the fixed-size tile grid.
//!
//! The mask follows the structure-information recipe: tissue is where the
//! image has local texture, background is flat. Luminance is box-downsampled,
//! smoothed, passed through an absolute Laplacian, smoothed again over a wide
//! window and thresholded; morphology and hole filling clean up the result.
//! Every constant lives in [`FesiParams`].

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm;

/// A flat RGB raster with a declared physical resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterSlide {
    pub slide_id: String,
    pub width_px: usize,
    pub height_px: usize,
    /// Microns per pixel.
    pub mpp: f64,
    /// Row-major RGB bytes.
    pub pixels: Vec<u8>,
}

impl RasterSlide {
    pub fn new(
        slide_id: impl Into<String>,
        width_px: usize,
        height_px: usize,
        mpp: f64,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        if width_px == 0 || height_px == 0 {
            return Err(Error::invalid("slide has zero extent"));
        }
        if !(mpp > 0.0 && mpp.is_finite()) {
            return Err(Error::invalid(format!("mpp must be positive, got {mpp}")));
        }
        if pixels.len() != width_px * height_px * 3 {
            return Err(Error::invalid(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                width_px * height_px * 3
            )));
        }
        Ok(Self { slide_id: slide_id.into(), width_px, height_px, mpp, pixels })
    }

    /// Reads a P6 raster. `mpp` overrides any `# mpp` header comment; one of
    /// the two must be present.
    pub fn read_ppm<R: BufRead>(
        slide_id: impl Into<String>,
        source: R,
        mpp: Option<f64>,
    ) -> Result<Self> {
        let img = pnm::read_pnm(source)?;
        if img.channels != 3 {
            return Err(Error::invalid("slide raster must be P6 (RGB)"));
        }
        let mpp = mpp
            .or(img.mpp)
            .ok_or_else(|| Error::invalid("no mpp given and none declared in the image header"))?;
        Self::new(slide_id, img.width, img.height, mpp, img.data)
    }

    pub fn write_ppm<W: Write>(&self, sink: W) -> Result<()> {
        pnm::write_ppm(sink, self.width_px, self.height_px, &self.pixels, Some(self.mpp))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FesiParams {
    /// Box-downsampling factor from slide pixels to mask pixels.
    pub downsample: usize,
    /// Gaussian pre-smoothing before the Laplacian, in mask pixels.
    pub blur_sigma: f64,
    /// Gaussian smoothing of the structure map, in mask pixels.
    pub structure_sigma: f64,
    /// Foreground where structure exceeds `threshold_ratio` times the
    /// reference level: the median of the structure values above the global
    /// mean of the map.
    pub threshold_ratio: f64,
    /// Absolute structure level below which a pixel is never foreground.
    pub noise_floor: f64,
    /// Half-width of the square structuring element (1 => 3x3).
    pub morph_radius: usize,
    pub fill_holes: bool,
    /// Tile geometry; a slide smaller than one tile span is rejected.
    pub tile_size_px: usize,
    pub target_mpp: f64,
}

impl Default for FesiParams {
    fn default() -> Self {
        Self {
            downsample: 8,
            blur_sigma: 2.0,
            structure_sigma: 8.0,
            threshold_ratio: 0.6,
            noise_floor: 1e-6,
            morph_radius: 1,
            fill_holes: true,
            tile_size_px: 512,
            target_mpp: 0.5,
        }
    }
}

/// Binary mask at reduced resolution; `scale` is mask pixels per slide pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    pub source_width: usize,
    pub source_height: usize,
    pub bits: Vec<bool>,
}

impl ForegroundMask {
    /// A mask of the given fill value matching a slide extent at `downsample`.
    pub fn filled(source_width: usize, source_height: usize, downsample: usize, value: bool) -> Self {
        let width = source_width.div_ceil(downsample);
        let height = source_height.div_ceil(downsample);
        Self {
            width,
            height,
            scale: 1.0 / downsample as f64,
            source_width,
            source_height,
            bits: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Intersection over union with another mask of the same shape.
    pub fn iou(&self, other: &ForegroundMask) -> Option<f64> {
        if self.bits.len() != other.bits.len() {
            return None;
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        (union > 0).then(|| inter as f64 / union as f64)
    }

    /// P5 raster with foreground = 255.
    pub fn write_pgm<W: Write>(&self, sink: W) -> Result<()> {
        let grey: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        pnm::write_pgm(sink, self.width, self.height, &grey)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub width_px: usize,
    pub height_px: usize,
    pub tile_size_px: usize,
    pub target_mpp: f64,
    /// Source-to-target resampling factor, `mpp / target_mpp`.
    pub rescale: f64,
    /// Tile edge in source pixels, `tile_size_px / rescale`.
    pub span_px: f64,
    pub cols: usize,
    pub rows: usize,
    /// Top-left corners in source pixels, row-major.
    pub tiles: Vec<(u32, u32)>,
    pub kept: Vec<bool>,
}

impl TileGrid {
    /// Source-pixel footprint `[x0, x1) x [y0, y1)` of tile `index`.
    pub fn footprint(&self, index: usize) -> (usize, usize, usize, usize) {
        let col = index % self.cols;
        let row = index / self.cols;
        let edge = |i: usize| (i as f64 * self.span_px + 1e-9).floor() as usize;
        (edge(col), edge(col + 1), edge(row), edge(row + 1))
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn kept_tiles(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.tiles.iter().zip(&self.kept).filter(|(_, &k)| k).map(|(&t, _)| t)
    }

    /// Text manifest: `tile_size` and `rescale` header lines, then one
    /// `x<TAB>y<TAB>kept` row per tile.
    pub fn write_manifest<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "tile_size\t{}", self.tile_size_px)?;
        writeln!(sink, "rescale\t{}", self.rescale)?;
        for (&(x, y), &kept) in self.tiles.iter().zip(&self.kept) {
            writeln!(sink, "{x}\t{y}\t{}", kept as u8)?;
        }
        Ok(())
    }
}

/// Parsed tile manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct TileManifest {
    pub tile_size_px: usize,
    pub rescale: f64,
    pub tiles: Vec<(u32, u32, bool)>,
}

pub fn read_manifest<R: BufRead>(source: R) -> Result<TileManifest> {
    let mut lines = source.lines();
    let mut header = |key: &str| -> Result<String> {
        let line = lines.next().ok_or(Error::Truncated("manifest header"))??;
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::invalid(format!("bad manifest header line {line:?}")))?;
        if k != key {
            return Err(Error::invalid(format!("expected header `{key}`, found `{k}`")));
        }
        Ok(v.to_string())
    };
    let tile_size_px = header("tile_size")?
        .parse()
        .map_err(|_| Error::invalid("bad tile_size"))?;
    let rescale = header("rescale")?.parse().map_err(|_| Error::invalid("bad rescale"))?;
    let mut tiles = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| s.parse::<u32>().map_err(|_| Error::invalid(format!("bad row {line:?}")));
        if fields.len() != 3 {
            return Err(Error::invalid(format!("bad row {line:?}")));
        }
        tiles.push((parse(fields[0])?, parse(fields[1])?, parse(fields[2])? != 0));
    }
    Ok(TileManifest { tile_size_px, rescale, tiles })
}

/// Non-overlapping grid of whole tiles. Partial edge tiles are dropped; an
/// image smaller than one tile yields an empty grid.
pub fn grid_tiles(
    width_px: usize,
    height_px: usize,
    mpp: f64,
    tile_size_px: usize,
    target_mpp: f64,
) -> Result<TileGrid> {
    if !(mpp > 0.0) || !(target_mpp > 0.0) {
        return Err(Error::invalid("mpp and target_mpp must be positive"));
    }
    if tile_size_px == 0 {
        return Err(Error::invalid("tile size must be positive"));
    }
    let rescale = mpp / target_mpp;
    let count = |extent: usize| (extent as f64 * rescale / tile_size_px as f64 + 1e-9).floor() as usize;
    let (cols, rows) = (count(width_px), count(height_px));
    let span_px = tile_size_px as f64 / rescale;
    let edge = |i: usize| (i as f64 * span_px + 1e-9).floor() as u32;
    let tiles: Vec<(u32, u32)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (edge(c), edge(r))))
        .collect();
    let kept = vec![true; tiles.len()];
    Ok(TileGrid {
        width_px,
        height_px,
        tile_size_px,
        target_mpp,
        rescale,
        span_px,
        cols,
        rows,
        tiles,
        kept,
    })
}

/// Keeps a tile iff its footprint contains at least one foreground pixel.
pub fn filter_tiles(grid: &TileGrid, mask: &ForegroundMask) -> Result<TileGrid> {
    if mask.source_width != grid.width_px || mask.source_height != grid.height_px {
        return Err(Error::GeometryMismatch(format!(
            "mask covers {}x{} source pixels, grid {}x{}",
            mask.source_width, mask.source_height, grid.width_px, grid.height_px
        )));
    }
    if mask.width != (mask.source_width as f64 * mask.scale).ceil() as usize
        || mask.height != (mask.source_height as f64 * mask.scale).ceil() as usize
        || mask.bits.len() != mask.width * mask.height
    {
        return Err(Error::GeometryMismatch("mask shape does not match its scale".into()));
    }
    let mut out = grid.clone();
    for (i, kept) in out.kept.iter_mut().enumerate() {
        let (x0, x1, y0, y1) = grid.footprint(i);
        let mx0 = (x0 as f64 * mask.scale).floor() as usize;
        let my0 = (y0 as f64 * mask.scale).floor() as usize;
        let mx1 = ((x1 as f64 * mask.scale).ceil() as usize).min(mask.width);
        let my1 = ((y1 as f64 * mask.scale).ceil() as usize).min(mask.height);
        *kept = (my0..my1).any(|y| (mx0..mx1).any(|x| mask.get(x, y)));
    }
    Ok(out)
}

pub fn compute_foreground(slide: &RasterSlide, params: &FesiParams) -> Result<ForegroundMask> {
    if params.downsample == 0 {
        return Err(Error::invalid("downsample must be positive"));
    }
    let span = params.tile_size_px as f64 * params.target_mpp / slide.mpp;
    if (slide.width_px as f64) < span || (slide.height_px as f64) < span {
        return Err(Error::DegenerateImage(format!(
            "{}x{} px is smaller than one {:.0} px tile span",
            slide.width_px, slide.height_px, span
        )));
    }

    let ds = params.downsample;
    let mut mask = ForegroundMask::filled(slide.width_px, slide.height_px, ds, false);
    let (w, h) = (mask.width, mask.height);

    let lum = downsample_luminance(slide, ds, w, h);
    let smooth = gaussian_blur(&lum, w, h, params.blur_sigma);
    let structure = abs_laplacian(&smooth, w, h);
    let structure = gaussian_blur(&structure, w, h, params.structure_sigma);

    let reference = reference_level(&structure);
    let threshold = (params.threshold_ratio * reference).max(params.noise_floor);
    let mut bits: Vec<bool> = structure.iter().map(|&v| v > threshold).collect();

    let r = params.morph_radius;
    if r > 0 {
        bits = dilate(&bits, w, h, r);
        bits = erode(&bits, w, h, r);
        bits = erode(&bits, w, h, r);
        bits = dilate(&bits, w, h, r);
    }
    if params.fill_holes {
        fill_holes(&mut bits, w, h);
    }
    mask.bits = bits;
    Ok(mask)
}

fn downsample_luminance(slide: &RasterSlide, ds: usize, w: usize, h: usize) -> Vec<f64> {
    let mut sum = vec![0.0f64; w * h];
    let mut count = vec![0u32; w * h];
    for y in 0..slide.height_px {
        let row = &slide.pixels[y * slide.width_px * 3..(y + 1) * slide.width_px * 3];
        let my = y / ds;
        for (x, px) in row.chunks_exact(3).enumerate() {
            let lum = (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64) / 255.0;
            let idx = my * w + x / ds;
            sum[idx] += lum;
            count[idx] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(0.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

// Separable blur with clamped borders.
fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + clamp(x as isize + i as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[clamp(y as isize + i as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn abs_laplacian(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        src[y * w + x]
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let lap = at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y);
            out[y as usize * w + x as usize] = lap.abs();
        }
    }
    out
}

// Median of the values above the global mean; 0 for a constant map.
fn reference_level(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut upper: Vec<f64> = values.iter().copied().filter(|&v| v > mean).collect();
    if upper.is_empty() {
        return 0.0;
    }
    upper.sort_by(f64::total_cmp);
    upper[upper.len() / 2]
}

// Out-of-image neighbours are ignored, so a full mask stays full.
fn morph(src: &[bool], w: usize, h: usize, r: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut hit = !dilate;
            'scan: for yy in y0..=y1 {
                for xx in x0..=x1 {
                    let v = src[yy * w + xx];
                    if dilate && v {
                        hit = true;
                        break 'scan;
                    }
                    if !dilate && !v {
                        hit = false;
                        break 'scan;
                    }
                }
            }
            out[y * w + x] = hit;
        }
    }
    out
}

fn dilate(src: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    morph(src, w, h, r, true)
}

fn erode(src: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    morph(src, w, h, r, false)
}

// Background not 4-connected to the image border becomes foreground.
fn fill_holes(bits: &mut [bool], w: usize, h: usize) {
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    let seed = |x: usize, y: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<(usize, usize)>| {
        let i = y * w + x;
        if !bits[i] && !outside[i] {
            outside[i] = true;
            queue.push_back((x, y));
        }
    };
    for x in 0..w {
        seed(x, 0, &mut outside, &mut queue);
        seed(x, h - 1, &mut outside, &mut queue);
    }
    for y in 0..h {
        seed(0, y, &mut outside, &mut queue);
        seed(w - 1, y, &mut outside, &mut queue);
    }
    while let Some((x, y)) = queue.pop_front() {
        if x > 0 {
            seed(x - 1, y, &mut outside, &mut queue);
        }
        if x + 1 < w {
            seed(x + 1, y, &mut outside, &mut queue);
        }
        if y > 0 {
            seed(x, y - 1, &mut outside, &mut queue);
        }
        if y + 1 < h {
            seed(x, y + 1, &mut outside, &mut queue);
        }
    }
    for (b, o) in bits.iter_mut().zip(&outside) {
        if !*b && !*o {
            *b = true;
        }
    }
}

/// Synthetic slides with known tissue layout, used by tests and the CLI demo.
pub mod synth {
    use super::*;

    pub fn uniform(size: usize, mpp: f64, rgb: [u8; 3]) -> RasterSlide {
        let pixels = rgb.iter().copied().cycle().take(size * size * 3).collect();
        RasterSlide::new("uniform", size, size, mpp, pixels).expect("valid synthetic slide")
    }

    /// Per-pixel grey noise everywhere.
    pub fn noise(size: usize, mpp: f64, seed: u64) -> RasterSlide {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            let v: u8 = rng.random();
            pixels.extend_from_slice(&[v, v, v]);
        }
        RasterSlide::new("noise", size, size, mpp, pixels).expect("valid synthetic slide")
    }

    /// Mid-grey slide with one disc of per-pixel noise.
    pub fn noise_disc(
        size: usize,
        mpp: f64,
        center: (f64, f64),
        radius: f64,
        seed: u64,
    ) -> RasterSlide {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - center.0, y as f64 + 0.5 - center.1);
                let v = if dx * dx + dy * dy <= radius * radius { rng.random::<u8>() } else { 128 };
                pixels.extend_from_slice(&[v, v, v]);
            }
        }
        RasterSlide::new("disc", size, size, mpp, pixels).expect("valid synthetic slide")
    }

    /// Ground-truth disc mask sampled at mask-pixel centres.
    pub fn disc_mask(size: usize, downsample: usize, center: (f64, f64), radius: f64) -> ForegroundMask {
        let mut mask = ForegroundMask::filled(size, size, downsample, false);
        let ds = downsample as f64;
        for y in 0..mask.height {
            for x in 0..mask.width {
                let (dx, dy) = ((x as f64 + 0.5) * ds - center.0, (y as f64 + 0.5) * ds - center.1);
                mask.set(x, y, dx * dx + dy * dy <= radius * radius);
            }
        }
        mask
    }
}
