use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::sampler::Denoiser;
use crate::vocab::{JointVocabulary, TokenSequence};

/// Denoiser that returns the true posterior `p(x_0[p] | visible tokens)`
/// of an enumerable distribution, as log-probabilities. Independent of `t`.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    support: Vec<(Vec<u32>, f64)>,
    vocab: JointVocabulary,
}

impl ExactPosterior {
    pub fn new(distribution: &HashMap<Vec<u32>, f64>, vocab: JointVocabulary) -> Result<Self> {
        if distribution.is_empty() {
            return Err(Error::Empty("distribution"));
        }
        let mut support: Vec<(Vec<u32>, f64)> = distribution
            .iter()
            .map(|(k, &p)| (k.clone(), p))
            .collect();
        support.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self { support, vocab })
    }
}

impl Denoiser for ExactPosterior {
    fn width(&self) -> usize {
        self.vocab.vocab_out()
    }

    fn logits(&self, x_t: &TokenSequence, _t: f64) -> Result<Vec<f64>> {
        let width = self.width();
        let mask = self.vocab.mask_id();
        let ids = x_t.ids();
        let mut mass = vec![0.0; ids.len() * width];
        let mut total = 0.0;
        for (seq, p) in &self.support {
            if seq.len() != ids.len() {
                return Err(Error::LengthMismatch {
                    expected: seq.len(),
                    got: ids.len(),
                });
            }
            let consistent = seq
                .iter()
                .zip(ids)
                .all(|(&a, &b)| b == mask || a == b);
            if !consistent {
                continue;
            }
            total += p;
            for (pos, &tok) in seq.iter().enumerate() {
                mass[pos * width + tok as usize] += p;
            }
        }
        if total <= 0.0 {
            // canvas outside the support: no information
            return Ok(vec![0.0; ids.len() * width]);
        }
        Ok(mass.into_iter().map(|m| (m / total).ln()).collect())
    }
}
