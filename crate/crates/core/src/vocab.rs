//! Shared token space for both modalities and the fixed report-then-image
//! sequence layout.
//!
//! Report symbols occupy `[0, k_text)`, image codebook symbols are offset into
//! `[k_text, k_total)`, and the single absorbing mask token is `k_total`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointVocabulary {
    k_text: u32,
    k_img: u32,
}

impl JointVocabulary {
    pub fn new(k_text: u32, k_img: u32) -> Result<Self> {
        if k_text.checked_add(k_img).is_none_or(|k| k == 0 || k == u32::MAX) {
            return Err(Error::Config(format!(
                "vocabulary needs at least one real token (k_text = {k_text}, k_img = {k_img})"
            )));
        }
        Ok(Self { k_text, k_img })
    }

    pub fn k_text(&self) -> u32 {
        self.k_text
    }

    pub fn k_img(&self) -> u32 {
        self.k_img
    }

    /// Number of real (non-mask) symbols.
    pub fn k_total(&self) -> u32 {
        self.k_text + self.k_img
    }

    pub fn mask_id(&self) -> u32 {
        self.k_total()
    }

    /// Width of the denoiser output: every real symbol plus the mask column.
    pub fn vocab_out(&self) -> usize {
        self.k_total() as usize + 1
    }

    /// Global id range `[lo, hi)` valid for a modality.
    pub fn range(&self, modality: Modality) -> (u32, u32) {
        match modality {
            Modality::Report => (0, self.k_text),
            Modality::Image => (self.k_text, self.k_total()),
        }
    }

    pub fn image_to_global(&self, codebook_id: u32) -> u32 {
        codebook_id + self.k_text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Report,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceLayout {
    len_report: usize,
    len_image: usize,
}

impl SequenceLayout {
    pub fn new(len_report: usize, len_image: usize) -> Result<Self> {
        if len_report + len_image == 0 {
            return Err(Error::Config("sequence layout must be non-empty".into()));
        }
        Ok(Self {
            len_report,
            len_image,
        })
    }

    pub fn len_report(&self) -> usize {
        self.len_report
    }

    pub fn len_image(&self) -> usize {
        self.len_image
    }

    pub fn len_total(&self) -> usize {
        self.len_report + self.len_image
    }

    pub fn modality_of(&self, position: usize) -> Modality {
        if position < self.len_report {
            Modality::Report
        } else {
            Modality::Image
        }
    }

    /// Indicator vector of the positions that belong to `which`.
    pub fn modality_positions(&self, which: Modality) -> Vec<bool> {
        (0..self.len_total())
            .map(|p| self.modality_of(p) == which)
            .collect()
    }
}

/// A joint report+image token sequence, clean (`x_0`) or corrupted (`x_t`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
    layout: SequenceLayout,
}

impl TokenSequence {
    /// Builds a sequence after checking ids against the per-position ranges.
    /// The mask token is accepted anywhere.
    pub fn new(ids: Vec<u32>, vocab: &JointVocabulary, layout: SequenceLayout) -> Result<Self> {
        if ids.len() != layout.len_total() {
            return Err(Error::LengthMismatch {
                expected: layout.len_total(),
                got: ids.len(),
            });
        }
        for (p, &id) in ids.iter().enumerate() {
            if id == vocab.mask_id() {
                continue;
            }
            let (lo, hi) = vocab.range(layout.modality_of(p));
            if id < lo || id >= hi {
                return Err(Error::IdOutOfRange {
                    position: p,
                    id,
                    lo,
                    hi,
                });
            }
        }
        Ok(Self { ids, layout })
    }

    /// All-mask canvas.
    pub fn masked(vocab: &JointVocabulary, layout: SequenceLayout) -> Self {
        Self {
            ids: vec![vocab.mask_id(); layout.len_total()],
            layout,
        }
    }

    pub(crate) fn from_parts_unchecked(ids: Vec<u32>, layout: SequenceLayout) -> Self {
        debug_assert_eq!(ids.len(), layout.len_total());
        Self { ids, layout }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub(crate) fn ids_mut(&mut self) -> &mut [u32] {
        &mut self.ids
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.ids
    }

    pub fn layout(&self) -> SequenceLayout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn count_masked(&self, vocab: &JointVocabulary) -> usize {
        self.ids.iter().filter(|&&id| id == vocab.mask_id()).count()
    }

    pub fn first_mask(&self, vocab: &JointVocabulary) -> Option<usize> {
        self.ids.iter().position(|&id| id == vocab.mask_id())
    }
}

/// Concatenates report ids and offset image ids into one clean sequence.
pub fn pack(
    report_ids: &[u32],
    image_ids: &[u32],
    vocab: &JointVocabulary,
    layout: SequenceLayout,
) -> Result<TokenSequence> {
    if report_ids.len() != layout.len_report() {
        return Err(Error::LengthMismatch {
            expected: layout.len_report(),
            got: report_ids.len(),
        });
    }
    if image_ids.len() != layout.len_image() {
        return Err(Error::LengthMismatch {
            expected: layout.len_image(),
            got: image_ids.len(),
        });
    }
    let mut ids = Vec::with_capacity(layout.len_total());
    for (p, &r) in report_ids.iter().enumerate() {
        if r >= vocab.k_text() {
            return Err(Error::IdOutOfRange {
                position: p,
                id: r,
                lo: 0,
                hi: vocab.k_text(),
            });
        }
        ids.push(r);
    }
    for (q, &i) in image_ids.iter().enumerate() {
        if i >= vocab.k_img() {
            return Err(Error::IdOutOfRange {
                position: layout.len_report() + q,
                id: i,
                lo: 0,
                hi: vocab.k_img(),
            });
        }
        ids.push(vocab.image_to_global(i));
    }
    Ok(TokenSequence { ids, layout })
}

/// Inverse of [`pack`]. Rejects masked sequences and ids that sit in the
/// wrong modality's range.
pub fn unpack(seq: &TokenSequence, vocab: &JointVocabulary) -> Result<(Vec<u32>, Vec<u32>)> {
    let layout = seq.layout();
    let mut report = Vec::with_capacity(layout.len_report());
    let mut image = Vec::with_capacity(layout.len_image());
    for (p, &id) in seq.ids().iter().enumerate() {
        if id == vocab.mask_id() {
            return Err(Error::MaskPresent(p));
        }
        let modality = layout.modality_of(p);
        let (lo, hi) = vocab.range(modality);
        if id < lo || id >= hi {
            return Err(Error::IdOutOfRange {
                position: p,
                id,
                lo,
                hi,
            });
        }
        match modality {
            Modality::Report => report.push(id),
            Modality::Image => image.push(id - vocab.k_text()),
        }
    }
    Ok((report, image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v10() -> JointVocabulary {
        JointVocabulary::new(10, 4).unwrap()
    }

    #[test]
    fn image_ids_are_offset_by_k_text() {
        let vocab = v10();
        assert_eq!(vocab.image_to_global(3), 13);
        assert_eq!(vocab.mask_id(), 14);
        assert_eq!(vocab.vocab_out(), 15);
    }

    #[test]
    fn pack_concatenates_report_then_image() {
        let vocab = v10();
        let layout = SequenceLayout::new(2, 1).unwrap();
        let seq = pack(&[2, 5], &[0], &vocab, layout).unwrap();
        assert_eq!(seq.ids(), &[2, 5, 10]);
        assert_eq!(unpack(&seq, &vocab).unwrap(), (vec![2, 5], vec![0]));
    }

    #[test]
    fn zero_sequences_unpack_to_zeros() {
        let vocab = v10();
        let layout = SequenceLayout::new(3, 2).unwrap();
        let seq = pack(&[0; 3], &[0; 2], &vocab, layout).unwrap();
        assert_eq!(unpack(&seq, &vocab).unwrap(), (vec![0; 3], vec![0; 2]));
    }

    #[test]
    fn pack_rejects_bad_lengths_and_ids() {
        let vocab = v10();
        let layout = SequenceLayout::new(2, 1).unwrap();
        assert!(matches!(
            pack(&[1], &[0], &vocab, layout),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            pack(&[1, 10], &[0], &vocab, layout),
            Err(Error::IdOutOfRange { position: 1, .. })
        ));
        assert!(matches!(
            pack(&[1, 1], &[4], &vocab, layout),
            Err(Error::IdOutOfRange { position: 2, .. })
        ));
    }

    #[test]
    fn unpack_rejects_mask_and_cross_modality_ids() {
        let vocab = v10();
        let layout = SequenceLayout::new(2, 1).unwrap();
        let masked = TokenSequence::from_parts_unchecked(vec![2, 14, 10], layout);
        assert!(matches!(unpack(&masked, &vocab), Err(Error::MaskPresent(1))));
        // image id in a report slot
        let leaked = TokenSequence::from_parts_unchecked(vec![11, 2, 10], layout);
        assert!(matches!(
            unpack(&leaked, &vocab),
            Err(Error::IdOutOfRange { position: 0, .. })
        ));
        // report id in an image slot
        let leaked = TokenSequence::from_parts_unchecked(vec![1, 2, 3], layout);
        assert!(matches!(
            unpack(&leaked, &vocab),
            Err(Error::IdOutOfRange { position: 2, .. })
        ));
    }

    #[test]
    fn random_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let k_text = rng.random_range(1..20);
            let k_img = rng.random_range(1..20);
            let vocab = JointVocabulary::new(k_text, k_img).unwrap();
            let layout =
                SequenceLayout::new(rng.random_range(0..10), rng.random_range(1..10)).unwrap();
            let r: Vec<u32> = (0..layout.len_report())
                .map(|_| rng.random_range(0..k_text))
                .collect();
            let i: Vec<u32> = (0..layout.len_image())
                .map(|_| rng.random_range(0..k_img))
                .collect();
            let seq = pack(&r, &i, &vocab, layout).unwrap();
            assert_eq!(seq.count_masked(&vocab), 0);
            assert_eq!(unpack(&seq, &vocab).unwrap(), (r, i));
        }
    }

    #[test]
    fn modality_positions_examples() {
        let layout = SequenceLayout::new(2, 3).unwrap();
        assert_eq!(
            layout.modality_positions(Modality::Report),
            vec![true, true, false, false, false]
        );
        assert_eq!(
            layout.modality_positions(Modality::Image),
            vec![false, false, true, true, true]
        );
    }

    #[test]
    fn modality_positions_partition_every_layout_up_to_32() {
        for total in 1..=32 {
            for len_report in 0..=total {
                let layout = SequenceLayout::new(len_report, total - len_report).unwrap();
                let r = layout.modality_positions(Modality::Report);
                let i = layout.modality_positions(Modality::Image);
                assert_eq!(r.len(), total);
                let pop = r.iter().filter(|&&b| b).count() + i.iter().filter(|&&b| b).count();
                assert_eq!(pop, total);
                assert!(r.iter().zip(&i).all(|(a, b)| a ^ b));
            }
        }
    }
}
