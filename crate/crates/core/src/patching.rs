//! Patch partition and linear patch embedding.

use crate::error::{Error, Result};
use crate::synthdoc::{check_divisible, ImageTensor, LabeledImage};
use crate::tensor::ops::{linear, FlopCounter};
use crate::tensor::{Matrix, Rng};

/// Per-token content probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    values: Vec<f64>,
    binarized: bool,
}

impl ProbabilityMap {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("probability {bad} outside [0,1]")));
        }
        Ok(Self {
            values,
            binarized: false,
        })
    }

    pub fn ones(n: usize) -> Self {
        Self {
            values: vec![1.0; n],
            binarized: true,
        }
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        Self {
            values: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
            binarized: true,
        }
    }

    /// Wraps values already known to lie in `{0, 1}`.
    pub(crate) fn binary_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|&v| v == 0.0 || v == 1.0));
        Self {
            values,
            binarized: true,
        }
    }

    pub(crate) fn with_flag(values: Vec<f64>, binarized: bool) -> Self {
        Self { values, binarized }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_binarized(&self) -> bool {
        self.binarized
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Tokens with probability exactly 1.
    pub fn active_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    /// `true` where the probability is non-zero.
    pub fn nonzero_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v > 0.0).collect()
    }
}

/// Spatial grid of token vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub tokens: Matrix,
    pub probs: ProbabilityMap,
    pub stage: usize,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, tokens: Matrix) -> Result<Self> {
        if tokens.rows() != rows * cols {
            return Err(Error::Length {
                op: "TokenGrid",
                expected: rows * cols,
                actual: tokens.rows(),
            });
        }
        Ok(Self {
            rows,
            cols,
            tokens,
            probs: ProbabilityMap::ones(rows * cols),
            stage: 0,
        })
    }

    pub fn with_probs(mut self, probs: ProbabilityMap) -> Result<Self> {
        if probs.len() != self.len() {
            return Err(Error::Length {
                op: "TokenGrid probs",
                expected: self.len(),
                actual: probs.len(),
            });
        }
        self.probs = probs;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    #[inline]
    pub fn index(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.cols, i % self.cols)
    }
}

/// Linear patch embedding: flattened `patch×patch×C` pixels to `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub patch: usize,
    pub channels: usize,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl PatchEmbed {
    pub fn new(patch: usize, channels: usize, dim: usize, rng: &mut Rng) -> Self {
        let fan_in = patch * patch * channels;
        let weight = Matrix::init_weight(fan_in, dim, rng);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let bias = (0..dim).map(|_| rng.uniform(-bound, bound)).collect();
        Self {
            patch,
            channels,
            weight,
            bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn embed(&self, img: &ImageTensor, fc: &mut FlopCounter) -> Result<TokenGrid> {
        if img.channels != self.channels {
            return Err(Error::Length {
                op: "patch embed channels",
                expected: self.channels,
                actual: img.channels,
            });
        }
        let (patches, g) = flatten_patches(img, self.patch)?;
        let tokens = linear(&patches, &self.weight, &self.bias, fc)?;
        TokenGrid::new(g, g, tokens)
    }
}

/// One row per patch, row-major over the grid; pixels within a patch are
/// flattened row-major with channels innermost.
pub fn flatten_patches(img: &ImageTensor, patch: usize) -> Result<(Matrix, usize)> {
    if img.height != img.width {
        return Err(Error::Config(format!(
            "image must be square, got {}x{}",
            img.height, img.width
        )));
    }
    check_divisible(img.width, patch)?;
    let g = img.width / patch;
    let per = patch * patch * img.channels;
    let mut data = Vec::with_capacity(g * g * per);
    for py in 0..g {
        for px in 0..g {
            for y in py * patch..(py + 1) * patch {
                let start = (y * img.width + px * patch) * img.channels;
                data.extend_from_slice(&img.data[start..start + patch * img.channels]);
            }
        }
    }
    Ok((Matrix::from_vec(g * g, per, data)?, g))
}

/// Initial visual tokens: patch partition followed by the linear embedding.
pub fn partition(img: &ImageTensor, embed: &PatchEmbed, fc: &mut FlopCounter) -> Result<TokenGrid> {
    embed.embed(img, fc)
}

/// Ground-truth probabilities: 1 for content patches, 0 elsewhere.
pub fn labels_to_probs(img: &LabeledImage, patch: usize) -> Result<ProbabilityMap> {
    Ok(ProbabilityMap::from_mask(&img.patch_labels(patch)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdoc::{generate, LayoutSpec};
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn token_counts() {
        let mut rng = Rng::new(0);
        let emb = PatchEmbed::new(16, 1, 8, &mut rng);
        let img = ImageTensor::filled(1536, 1536, 1, 0.5);
        let grid = partition(&img, &emb, &mut FlopCounter::disabled()).unwrap();
        assert_eq!(grid.len(), 9216);

        let emb = PatchEmbed::new(4, 1, 8, &mut rng);
        let grid = partition(
            &ImageTensor::filled(256, 256, 1, 0.5),
            &emb,
            &mut FlopCounter::disabled(),
        )
        .unwrap();
        assert_eq!((grid.rows, grid.cols, grid.len()), (64, 64, 4096));
    }

    #[test]
    fn zero_image_zero_bias() {
        let mut rng = Rng::new(1);
        let mut emb = PatchEmbed::new(4, 1, 6, &mut rng);
        emb.bias.iter_mut().for_each(|b| *b = 0.0);
        let grid = partition(
            &ImageTensor::filled(16, 16, 1, 0.0),
            &emb,
            &mut FlopCounter::disabled(),
        )
        .unwrap();
        assert!(grid.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_rejected() {
        let emb = PatchEmbed::new(5, 1, 4, &mut Rng::new(0));
        let err = partition(
            &ImageTensor::filled(16, 16, 1, 0.0),
            &emb,
            &mut FlopCounter::disabled(),
        );
        assert!(matches!(
            err,
            Err(Error::Indivisible { side: 16, patch: 5 })
        ));
    }

    #[test]
    fn patch_pixels_land_in_their_token() {
        let mut img = ImageTensor::filled(8, 8, 1, 0.0);
        img.data[5 * 8 + 6] = 1.0; // y=5, x=6 -> patch (1,1), offset (1,2)
        let (m, g) = flatten_patches(&img, 4).unwrap();
        assert_eq!(g, 2);
        assert_eq!(m.get(3, 4 + 2), 1.0);
        assert_eq!(m.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn labels_to_probs_cases() {
        let blank = LayoutSpec {
            image_size: 32,
            regions: vec![],
            background_value: 0.96,
            target_content_fraction: 0.0,
            seed: 0,
        };
        let p = labels_to_probs(&generate(&blank).unwrap(), 4).unwrap();
        assert!(p.is_binarized() && p.values().iter().all(|&v| v == 0.0));

        let doc = generate(&LayoutSpec::plan(128, 0.4, 3).unwrap()).unwrap();
        let p = labels_to_probs(&doc, 4).unwrap();
        let labels = doc.patch_labels(4).unwrap();
        for (v, l) in p.values().iter().zip(labels) {
            assert_eq!(*v == 1.0, l);
        }
    }

    #[test]
    fn index_round_trip() {
        let grid = TokenGrid::new(3, 5, Matrix::zeros(15, 2)).unwrap();
        for i in 0..15 {
            let (r, c) = grid.coords(i);
            assert_eq!(grid.index(r, c), i);
        }
    }

    proptest! {
        #[test]
        fn partition_is_linear(a in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let mut emb = PatchEmbed::new(4, 1, 5, &mut rng);
            emb.bias.iter_mut().for_each(|b| *b = 0.0);
            let img = ImageTensor {
                height: 8, width: 8, channels: 1,
                data: (0..64).map(|_| rng.next_f64()).collect(),
            };
            let fc = &mut FlopCounter::disabled();
            let lhs = partition(&img.scaled(a), &emb, fc).unwrap();
            let rhs = partition(&img, &emb, fc).unwrap().tokens.scale(a);
            prop_assert!(lhs.tokens.max_abs_diff(&rhs) < 1e-12);
        }
    }
}
