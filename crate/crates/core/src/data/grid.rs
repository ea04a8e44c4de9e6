//! Synthetic grid world: each cell gets an i.i.d. color and the report
//! names the colors in row-major order, so the joint distribution is
//! exactly enumerable and a pair is consistent iff the report parses back
//! to the image grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest joint support [`enumerate_joint`] will list.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridWorldConfig {
    pub grid_size: usize,
    pub n_colors: usize,
    pub color_probs: Vec<f64>,
    /// Render cells to gray patches and tokenize through a fitted codebook.
    pub pixel_mode: bool,
    pub patch_size: usize,
    /// Half-width of the uniform per-pixel intensity jitter.
    pub jitter: f64,
    /// Codebook entries in pixel mode.
    pub codebook_size: usize,
    pub codebook_fit_samples: usize,
    pub codebook_max_iters: usize,
    pub codebook_seed: u64,
}

impl Default for GridWorldConfig {
    fn default() -> Self {
        Self {
            grid_size: 2,
            n_colors: 3,
            color_probs: vec![0.5, 0.3, 0.2],
            pixel_mode: false,
            patch_size: 4,
            jitter: 0.05,
            codebook_size: 3,
            codebook_fit_samples: 500,
            codebook_max_iters: 50,
            codebook_seed: 0,
        }
    }
}

impl GridWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_size == 0 || self.n_colors == 0 {
            return bad("grid_size and n_colors must be positive".into());
        }
        if self.color_probs.len() != self.n_colors {
            return bad(format!(
                "color_probs has {} entries for {} colors",
                self.color_probs.len(),
                self.n_colors
            ));
        }
        if self.color_probs.iter().any(|&p| !(p > 0.0)) {
            return bad("color_probs entries must be positive".into());
        }
        let sum: f64 = self.color_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return bad(format!("color_probs sums to {sum}, not 1"));
        }
        if self.pixel_mode {
            if self.patch_size == 0 {
                return bad("patch_size must be positive".into());
            }
            if self.codebook_size < self.n_colors {
                return bad("codebook_size must be at least n_colors".into());
            }
            if !(self.jitter >= 0.0) {
                return bad("jitter must be non-negative".into());
            }
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// Report length: one color token per cell.
    pub fn len_report(&self) -> usize {
        self.n_cells()
    }

    /// Noiseless gray level of a color, evenly spaced in `(0, 1)`.
    pub fn color_intensity(&self, color: u32) -> f64 {
        (color as f64 + 0.5) / self.n_colors as f64
    }

    pub fn support_size(&self) -> u128 {
        (self.n_colors as u128).saturating_pow(self.n_cells() as u32)
    }
}

/// Row-major `G x G` grid of color ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid {
    size: usize,
    cells: Vec<u32>,
}

impl Grid {
    pub fn new(size: usize, cells: Vec<u32>) -> Result<Self> {
        if cells.len() != size * size {
            return Err(Error::LengthMismatch {
                expected: size * size,
                got: cells.len(),
            });
        }
        Ok(Self { size, cells })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.cells[row * self.size + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub grid: Grid,
    /// `(G*P) x (G*P)` gray image in pixel mode.
    pub pixels: Option<Vec<f64>>,
    pub report: Vec<u32>,
}

/// Canonical row-major report: color `c` renders as token `c`.
pub fn render_report(grid: &Grid, config: &GridWorldConfig) -> Result<Vec<u32>> {
    if grid.size() != config.grid_size {
        return Err(Error::LengthMismatch {
            expected: config.grid_size,
            got: grid.size(),
        });
    }
    check_colors(grid.cells(), config)?;
    Ok(grid.cells().to_vec())
}

pub fn parse_report(tokens: &[u32], config: &GridWorldConfig) -> Result<Grid> {
    if tokens.len() != config.n_cells() {
        return Err(Error::LengthMismatch {
            expected: config.n_cells(),
            got: tokens.len(),
        });
    }
    check_colors(tokens, config)?;
    Grid::new(config.grid_size, tokens.to_vec())
}

fn check_colors(ids: &[u32], config: &GridWorldConfig) -> Result<()> {
    match ids
        .iter()
        .enumerate()
        .find(|(_, &c)| c as usize >= config.n_colors)
    {
        Some((p, &c)) => Err(Error::IdOutOfRange {
            position: p,
            id: c,
            lo: 0,
            hi: config.n_colors as u32,
        }),
        None => Ok(()),
    }
}

fn sample_color<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return c as u32;
        }
    }
    probs.len() as u32 - 1
}

pub fn sample_grid<R: Rng + ?Sized>(config: &GridWorldConfig, rng: &mut R) -> Grid {
    let cells = (0..config.n_cells())
        .map(|_| sample_color(&config.color_probs, rng))
        .collect();
    Grid {
        size: config.grid_size,
        cells,
    }
}

/// Renders a grid to a `(G*P) x (G*P)` gray image: each cell is a `P x P`
/// patch at its color's intensity plus uniform jitter.
pub fn render_pixels<R: Rng + ?Sized>(
    grid: &Grid,
    config: &GridWorldConfig,
    rng: &mut R,
) -> Vec<f64> {
    let p = config.patch_size;
    let side = grid.size() * p;
    let mut img = vec![0.0; side * side];
    for r in 0..grid.size() {
        for c in 0..grid.size() {
            let base = config.color_intensity(grid.get(r, c));
            for y in 0..p {
                for x in 0..p {
                    let noise = if config.jitter > 0.0 {
                        rng.random_range(-config.jitter..config.jitter)
                    } else {
                        0.0
                    };
                    img[(r * p + y) * side + c * p + x] = base + noise;
                }
            }
        }
    }
    img
}

pub fn sample_pair<R: Rng + ?Sized>(config: &GridWorldConfig, rng: &mut R) -> PairedSample {
    let grid = sample_grid(config, rng);
    let pixels = config.pixel_mode.then(|| render_pixels(&grid, config, rng));
    let report = grid.cells().to_vec();
    PairedSample {
        grid,
        pixels,
        report,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointOutcome {
    pub grid: Grid,
    pub report: Vec<u32>,
    pub prob: f64,
}

/// Every grid with its probability `prod color_probs[cell]`, in
/// lexicographic order of the row-major cells.
pub fn enumerate_joint(config: &GridWorldConfig) -> Result<Vec<JointOutcome>> {
    config.validate()?;
    let size = config.support_size();
    if size > ENUMERATION_LIMIT {
        return Err(Error::SupportTooLarge {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    let n = config.n_cells();
    let c = config.n_colors as u32;
    let mut cells = vec![0u32; n];
    let mut out = Vec::with_capacity(size as usize);
    loop {
        let prob = cells
            .iter()
            .map(|&k| config.color_probs[k as usize])
            .product();
        out.push(JointOutcome {
            grid: Grid {
                size: config.grid_size,
                cells: cells.clone(),
            },
            report: cells.clone(),
            prob,
        });
        // odometer increment, last cell fastest
        let mut i = n;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            cells[i] += 1;
            if cells[i] < c {
                break;
            }
            cells[i] = 0;
        }
    }
}
