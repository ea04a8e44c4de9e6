//! k-means patch quantizer standing in for a learned VQ image tokenizer.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    /// `k x dim`, row-major.
    centroids: Vec<f64>,
    fitted: bool,
}

/// Per-iteration mean squared quantization error of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub errors: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    /// Codebook with the given centroids, marked as fitted.
    pub fn from_centroids(dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::Config(format!(
                "centroid buffer of {} values does not split into dim {dim}",
                centroids.len()
            )));
        }
        Ok(Self {
            dim,
            centroids,
            fitted: true,
        })
    }

    pub fn unfitted(k: usize, dim: usize) -> Self {
        Self {
            dim,
            centroids: vec![0.0; k * dim],
            fitted: false,
        }
    }

    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn centroid(&self, id: usize) -> &[f64] {
        &self.centroids[id * self.dim..(id + 1) * self.dim]
    }

    /// Nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, patch: &[f64]) -> Result<u32> {
        if !self.fitted {
            return Err(Error::UnfittedCodebook);
        }
        if patch.len() != self.dim {
            return Err(Error::LengthMismatch {
                expected: self.dim,
                got: patch.len(),
            });
        }
        Ok(self.nearest_unchecked(patch).0 as u32)
    }

    fn nearest_unchecked(&self, patch: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.k() {
            let d = sq_dist(patch, self.centroid(k));
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }
}

/// Fits `k` centroids to the rows of `patches` (`n x dim`): k-means++
/// seeding, then Lloyd iterations until the centroids stop moving or
/// `max_iters` is reached. An empty cluster is re-seeded at the point
/// farthest from its current centroid.
pub fn fit_codebook<R: Rng + ?Sized>(
    patches: &[f64],
    dim: usize,
    k: usize,
    max_iters: usize,
    rng: &mut R,
) -> Result<(Codebook, FitTrace)> {
    if dim == 0 || k == 0 || !patches.len().is_multiple_of(dim) {
        return Err(Error::Config("bad patch buffer or codebook size".into()));
    }
    let n = patches.len() / dim;
    let row = |i: usize| &patches[i * dim..(i + 1) * dim];
    let distinct: HashSet<Vec<u64>> = (0..n)
        .map(|i| row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(Error::TooFewPatches {
            needed: k,
            found: distinct.len(),
        });
    }

    // k-means++ seeding.
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let pick = WeightedIndex::new(&d2)
            .map_err(|e| Error::Config(format!("k-means++ seeding failed: {e}")))?
            .sample(rng);
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &centroids[start..start + dim]));
        }
    }
    let mut book = Codebook {
        dim,
        centroids,
        fitted: true,
    };

    let mut assign = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut errors = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        iterations += 1;
        for i in 0..n {
            let (a, d) = book.nearest_unchecked(row(i));
            assign[i] = a;
            dists[i] = d;
        }
        errors.push(dists.iter().sum::<f64>() / (n * dim) as f64);

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, &v) in sums[assign[i] * dim..(assign[i] + 1) * dim]
                .iter_mut()
                .zip(row(i))
            {
                *s += v;
            }
        }
        let mut next = book.centroids.clone();
        for c in 0..k {
            let dst = &mut next[c * dim..(c + 1) * dim];
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("non-empty patch set");
                dst.copy_from_slice(row(far));
                dists[far] = 0.0;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (o, &s) in dst.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *o = s * inv;
                }
            }
        }
        let moved = next != book.centroids;
        book.centroids = next;
        if !moved {
            break;
        }
    }
    Ok((book, FitTrace { errors, iterations }))
}

/// Splits a `(G*P) x (G*P)` image into row-major `P x P` patches.
pub fn extract_patches(pixels: &[f64], grid_size: usize, patch_size: usize) -> Result<Vec<f64>> {
    let side = grid_size * patch_size;
    if pixels.len() != side * side {
        return Err(Error::LengthMismatch {
            expected: side * side,
            got: pixels.len(),
        });
    }
    let mut out = Vec::with_capacity(pixels.len());
    for r in 0..grid_size {
        for c in 0..grid_size {
            for y in 0..patch_size {
                let start = (r * patch_size + y) * side + c * patch_size;
                out.extend_from_slice(&pixels[start..start + patch_size]);
            }
        }
    }
    Ok(out)
}

/// Nearest-centroid token per patch.
pub fn encode_image(
    pixels: &[f64],
    grid_size: usize,
    patch_size: usize,
    codebook: &Codebook,
) -> Result<Vec<u32>> {
    if !codebook.is_fitted() {
        return Err(Error::UnfittedCodebook);
    }
    let patches = extract_patches(pixels, grid_size, patch_size)?;
    patches
        .chunks_exact(patch_size * patch_size)
        .map(|p| codebook.nearest(p))
        .collect()
}

/// Centroid lookup, reassembled into a `(G*P) x (G*P)` image.
pub fn decode_image(
    ids: &[u32],
    grid_size: usize,
    patch_size: usize,
    codebook: &Codebook,
) -> Result<Vec<f64>> {
    if !codebook.is_fitted() {
        return Err(Error::UnfittedCodebook);
    }
    if ids.len() != grid_size * grid_size {
        return Err(Error::LengthMismatch {
            expected: grid_size * grid_size,
            got: ids.len(),
        });
    }
    if patch_size * patch_size != codebook.dim() {
        return Err(Error::LengthMismatch {
            expected: codebook.dim(),
            got: patch_size * patch_size,
        });
    }
    let side = grid_size * patch_size;
    let mut img = vec![0.0; side * side];
    for (cell, &id) in ids.iter().enumerate() {
        if id as usize >= codebook.k() {
            return Err(Error::IdOutOfRange {
                position: cell,
                id,
                lo: 0,
                hi: codebook.k() as u32,
            });
        }
        let (r, c) = (cell / grid_size, cell % grid_size);
        let centroid = codebook.centroid(id as usize);
        for y in 0..patch_size {
            let start = (r * patch_size + y) * side + c * patch_size;
            img[start..start + patch_size]
                .copy_from_slice(&centroid[y * patch_size..(y + 1) * patch_size]);
        }
    }
    Ok(img)
}
