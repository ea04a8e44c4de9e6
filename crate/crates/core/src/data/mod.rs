//! Paired image/report data: the grid world, the patch codebook, token-file
//! IO and an exact-posterior denoiser built from the enumerable joint.

mod codebook;
mod grid;
mod io;
mod oracle;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use codebook::{decode_image, encode_image, extract_patches, fit_codebook, Codebook, FitTrace};
pub use grid::{
    enumerate_joint, parse_report, render_pixels, render_report, sample_grid, sample_pair, Grid,
    GridWorldConfig, JointOutcome, PairedSample, ENUMERATION_LIMIT,
};
pub use io::{read_token_records, write_token_records};
pub use oracle::ExactPosterior;

use crate::error::{Error, Result};
use crate::vocab::{pack, unpack, JointVocabulary, SequenceLayout, TokenSequence};

/// Turns grid-world samples into joint token sequences, through the
/// codebook in pixel mode or directly from cell colors otherwise.
#[derive(Debug, Clone)]
pub struct DataSource {
    world: GridWorldConfig,
    vocab: JointVocabulary,
    layout: SequenceLayout,
    codebook: Option<Codebook>,
}

impl DataSource {
    /// Validates the world against the vocabulary and layout. In pixel mode
    /// the codebook is fitted deterministically from `codebook_seed`.
    pub fn new(
        world: &GridWorldConfig,
        vocab: JointVocabulary,
        layout: SequenceLayout,
    ) -> Result<Self> {
        world.validate()?;
        let n = world.n_cells();
        let k_img = if world.pixel_mode {
            world.codebook_size
        } else {
            world.n_colors
        };
        if vocab.k_text() as usize != world.n_colors || vocab.k_img() as usize != k_img {
            return Err(Error::Config(format!(
                "vocabulary ({}, {}) does not match the world ({}, {k_img})",
                vocab.k_text(),
                vocab.k_img(),
                world.n_colors
            )));
        }
        if layout.len_report() != n || layout.len_image() != n {
            return Err(Error::Config(format!(
                "layout ({}, {}) does not match a {n}-cell world",
                layout.len_report(),
                layout.len_image()
            )));
        }
        let codebook = if world.pixel_mode {
            let mut rng = ChaCha8Rng::seed_from_u64(world.codebook_seed);
            let mut patches = Vec::new();
            for _ in 0..world.codebook_fit_samples {
                let s = sample_pair(world, &mut rng);
                let px = s.pixels.expect("pixel mode renders pixels");
                patches.extend(extract_patches(&px, world.grid_size, world.patch_size)?);
            }
            let dim = world.patch_size * world.patch_size;
            let (book, _) = fit_codebook(
                &patches,
                dim,
                world.codebook_size,
                world.codebook_max_iters,
                &mut rng,
            )?;
            Some(book)
        } else {
            None
        };
        Ok(Self {
            world: world.clone(),
            vocab,
            layout,
            codebook,
        })
    }

    pub fn world(&self) -> &GridWorldConfig {
        &self.world
    }

    pub fn vocab(&self) -> &JointVocabulary {
        &self.vocab
    }

    pub fn layout(&self) -> SequenceLayout {
        self.layout
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    /// Image-region codebook ids of a sample.
    pub fn image_tokens(&self, sample: &PairedSample) -> Result<Vec<u32>> {
        match (&self.codebook, &sample.pixels) {
            (Some(book), Some(px)) => {
                encode_image(px, self.world.grid_size, self.world.patch_size, book)
            }
            (Some(_), None) => Err(Error::Config("pixel-mode sample without pixels".into())),
            (None, _) => Ok(sample.grid.cells().to_vec()),
        }
    }

    /// Codebook id a noiseless cell of `color` encodes to.
    pub fn color_token(&self, color: u32) -> Result<u32> {
        match &self.codebook {
            Some(book) => {
                let patch = vec![self.world.color_intensity(color); book.dim()];
                book.nearest(&patch)
            }
            None => Ok(color),
        }
    }

    /// Maps image codebook ids back to a color grid.
    pub fn grid_from_image_tokens(&self, ids: &[u32]) -> Result<Grid> {
        let cells = match &self.codebook {
            Some(book) => ids
                .iter()
                .map(|&id| {
                    if id as usize >= book.k() {
                        return Err(Error::IdOutOfRange {
                            position: 0,
                            id,
                            lo: 0,
                            hi: book.k() as u32,
                        });
                    }
                    let c = book.centroid(id as usize);
                    let mean = c.iter().sum::<f64>() / c.len() as f64;
                    Ok(self.nearest_color(mean))
                })
                .collect::<Result<Vec<_>>>()?,
            None => ids.to_vec(),
        };
        Grid::new(self.world.grid_size, cells)
    }

    fn nearest_color(&self, intensity: f64) -> u32 {
        (0..self.world.n_colors as u32)
            .min_by(|&a, &b| {
                (self.world.color_intensity(a) - intensity)
                    .abs()
                    .total_cmp(&(self.world.color_intensity(b) - intensity).abs())
            })
            .expect("at least one color")
    }

    /// Splits a decoded joint sequence into a report/grid pair.
    pub fn pair_from_sequence(&self, seq: &TokenSequence) -> Result<PairedSample> {
        let (report, image) = unpack(seq, &self.vocab)?;
        let grid = self.grid_from_image_tokens(&image)?;
        Ok(PairedSample {
            grid,
            pixels: None,
            report,
        })
    }

    pub fn sequence_of(&self, sample: &PairedSample) -> Result<TokenSequence> {
        let image = self.image_tokens(sample)?;
        pack(&sample.report, &image, &self.vocab, self.layout)
    }

    pub fn sample_sequence<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> Result<(PairedSample, TokenSequence)> {
        let sample = sample_pair(&self.world, rng);
        let seq = self.sequence_of(&sample)?;
        Ok((sample, seq))
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<TokenSequence>> {
        (0..n)
            .map(|_| self.sample_sequence(rng).map(|(_, s)| s))
            .collect()
    }

    /// Exact distribution over packed joint sequences, keyed by token ids.
    pub fn exact_distribution(&self) -> Result<HashMap<Vec<u32>, f64>> {
        let mut out = HashMap::new();
        for o in enumerate_joint(&self.world)? {
            let image = o
                .grid
                .cells()
                .iter()
                .map(|&c| self.color_token(c))
                .collect::<Result<Vec<_>>>()?;
            let seq = pack(&o.report, &image, &self.vocab, self.layout)?;
            *out.entry(seq.into_ids()).or_insert(0.0) += o.prob;
        }
        Ok(out)
    }
}
