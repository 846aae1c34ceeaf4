//! Synthetic document pages with exactly known content regions.
//!
//! Pages are laid out as a single flowing column of blocks (text paragraphs,
//! tables, charts) on a light background, so most of the blank area sits in
//! contiguous bands above and below the content, as on real scanned pages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instruction_filter::InstructionSpec;
use crate::tensor::{derive_seed, Rng};

pub const NOISE_AMPLITUDE: f64 = 0.02;
pub const DEFAULT_BACKGROUND: f64 = 0.96;
/// Allowed gap between realized and requested content fraction.
pub const FRACTION_TOLERANCE: f64 = 0.05;
/// Margin, in pixels, added around an instruction's referent region.
pub const RELEVANCE_MARGIN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    TextLine,
    Table,
    ChartBlock,
}

impl RegionKind {
    pub fn id(self) -> u32 {
        match self {
            RegionKind::TextLine => 0,
            RegionKind::Table => 1,
            RegionKind::ChartBlock => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentRegion {
    pub kind: RegionKind,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub texture_seed: u64,
}

impl ContentRegion {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    fn validate(&self, size: usize) -> Result<()> {
        if self.w < 4 || self.h < 4 {
            return Err(Error::Config(format!("region {self:?} smaller than 4 px")));
        }
        if self.kind == RegionKind::TextLine && self.w < 2 * self.h {
            return Err(Error::Config(format!(
                "text line {self:?} is not elongated"
            )));
        }
        if self.x + self.w > size || self.y + self.h > size {
            return Err(Error::Config(format!(
                "region {self:?} exceeds {size}px page"
            )));
        }
        Ok(())
    }

    fn overlaps(&self, other: &ContentRegion) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub image_size: usize,
    pub regions: Vec<ContentRegion>,
    pub background_value: f64,
    pub target_content_fraction: f64,
    pub seed: u64,
}

/// Single-channel `H×W×C` raster, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn filled(height: usize, width: usize, channels: usize, v: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![v; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Scales every pixel by `a`; used by the linearity checks.
    pub fn scaled(&self, a: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * a).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub content_mask: Vec<bool>,
    pub regions: Vec<ContentRegion>,
}

impl LabeledImage {
    pub fn side(&self) -> usize {
        self.image.width
    }

    pub fn content_fraction(&self) -> f64 {
        self.content_mask.iter().filter(|&&m| m).count() as f64 / self.content_mask.len() as f64
    }

    /// Per-patch labels, row-major: true iff any content pixel falls in the patch.
    pub fn patch_labels(&self, patch: usize) -> Result<Vec<bool>> {
        let side = self.side();
        check_divisible(side, patch)?;
        let g = side / patch;
        let mut labels = vec![false; g * g];
        for y in 0..side {
            let row = &self.content_mask[y * side..(y + 1) * side];
            for (x, _) in row.iter().enumerate().filter(|(_, &m)| m) {
                labels[(y / patch) * g + x / patch] = true;
            }
        }
        Ok(labels)
    }

    pub fn patch_label_fraction(&self, patch: usize) -> Result<f64> {
        let l = self.patch_labels(patch)?;
        Ok(l.iter().filter(|&&b| b).count() as f64 / l.len() as f64)
    }
}

pub(crate) fn check_divisible(side: usize, patch: usize) -> Result<()> {
    if patch == 0 || side % patch != 0 {
        return Err(Error::Indivisible { side, patch });
    }
    Ok(())
}

impl LayoutSpec {
    /// Lays out blocks top to bottom until the content area reaches
    /// `target * size²`, then places the column at a random vertical offset.
    pub fn plan(size: usize, target: f64, seed: u64) -> Result<LayoutSpec> {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::Config(format!(
                "content fraction {target} outside [0,1]"
            )));
        }
        if size < 32 {
            return Err(Error::Config(format!("page size {size} below 32 px")));
        }
        let mut rng = Rng::new(seed);
        let scale = size as f64 / 256.0;
        let px = |v: usize| even(((v as f64) * scale).round() as usize).max(2);

        let margin_l = px(rng.range_inclusive(2, 6) * 2);
        let margin_r = px(rng.range_inclusive(2, 6) * 2);
        let col_w = size.saturating_sub(margin_l + margin_r);
        let target_area = (target * (size * size) as f64).round() as usize;

        let mut regions: Vec<ContentRegion> = Vec::new();
        let mut area = 0usize;
        let mut cursor = 0usize;
        let mut overflow = false;

        'blocks: while area < target_area {
            let remaining = target_area - area;
            let roll = rng.next_f64();
            let gap = px(rng.range_inclusive(2, 4) * 2);
            if roll < 0.6 {
                let line_h = px(rng.range_inclusive(4, 6) * 2).max(4);
                let lines = rng.range_inclusive(2, 6);
                for li in 0..lines {
                    let remaining = target_area - area;
                    let mut w = if li + 1 == lines {
                        even(col_w * rng.range_inclusive(50, 100) / 100)
                    } else {
                        col_w
                    };
                    if w * line_h > remaining {
                        w = even(remaining.div_ceil(line_h));
                    }
                    w = w.max(2 * line_h).min(col_w);
                    if cursor + line_h > size {
                        overflow = true;
                        break 'blocks;
                    }
                    regions.push(ContentRegion {
                        kind: RegionKind::TextLine,
                        x: margin_l,
                        y: cursor,
                        w,
                        h: line_h,
                        texture_seed: rng.next_u64(),
                    });
                    area += w * line_h;
                    cursor += line_h;
                    if area >= target_area {
                        break 'blocks;
                    }
                }
            } else {
                let kind = if roll < 0.8 {
                    RegionKind::Table
                } else {
                    RegionKind::ChartBlock
                };
                let w = even(col_w * rng.range_inclusive(60, 100) / 100).max(8);
                let mut h = px(rng.range_inclusive(12, 28) * 2).max(4);
                if w * h > remaining {
                    h = even(remaining.div_ceil(w)).max(4);
                }
                if cursor + h > size {
                    overflow = true;
                    break;
                }
                regions.push(ContentRegion {
                    kind,
                    x: margin_l,
                    y: cursor,
                    w,
                    h,
                    texture_seed: rng.next_u64(),
                });
                area += w * h;
                cursor += h;
            }
            cursor += gap;
        }

        let achieved = area as f64 / (size * size) as f64;
        if overflow || (achieved - target).abs() > FRACTION_TOLERANCE {
            return Err(Error::InfeasibleLayout { target, achieved });
        }

        let flow_h = regions.iter().map(|r| r.y + r.h).max().unwrap_or(0);
        let top = even(rng.range_inclusive(0, size - flow_h)).min(size - flow_h);
        for r in &mut regions {
            r.y += top;
        }
        Ok(LayoutSpec {
            image_size: size,
            regions,
            background_value: DEFAULT_BACKGROUND,
            target_content_fraction: target,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.background_value) {
            return Err(Error::Config("background value outside [0,1]".into()));
        }
        for (i, r) in self.regions.iter().enumerate() {
            r.validate(self.image_size)?;
            if self.regions[..i].iter().any(|o| o.overlaps(r)) {
                return Err(Error::Config(format!(
                    "region {i} overlaps an earlier region"
                )));
            }
        }
        Ok(())
    }
}

fn even(v: usize) -> usize {
    v & !1
}

/// Renders a page. Deterministic in `spec`.
pub fn generate(spec: &LayoutSpec) -> Result<LabeledImage> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = Rng::new(derive_seed(spec.seed, 0xB6));
    let mut data: Vec<f64> = (0..size * size)
        .map(|_| {
            (spec.background_value + rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE)).clamp(0.0, 1.0)
        })
        .collect();
    let mut mask = vec![false; size * size];

    for region in &spec.regions {
        let tex = Texture::new(region);
        for dy in 0..region.h {
            for dx in 0..region.w {
                let i = (region.y + dy) * size + region.x + dx;
                data[i] = tex.pixel(dx, dy);
                mask[i] = true;
            }
        }
    }

    let img = LabeledImage {
        image: ImageTensor {
            height: size,
            width: size,
            channels: 1,
            data,
        },
        content_mask: mask,
        regions: spec.regions.clone(),
    };
    let achieved = img.content_fraction();
    if (achieved - spec.target_content_fraction).abs() > FRACTION_TOLERANCE {
        return Err(Error::InfeasibleLayout {
            target: spec.target_content_fraction,
            achieved,
        });
    }
    Ok(img)
}

/// Per-region pattern. Every textured pixel is at most 0.78, well below the
/// background band.
struct Texture<'a> {
    region: &'a ContentRegion,
    cuts: Vec<usize>,
    heights: Vec<f64>,
}

const INK: f64 = 0.12;

impl<'a> Texture<'a> {
    fn new(region: &'a ContentRegion) -> Self {
        let mut rng = Rng::new(region.texture_seed);
        let mut cuts = Vec::new();
        let mut heights = Vec::new();
        match region.kind {
            RegionKind::TextLine => {
                // Word boundaries along x.
                let mut x = 0;
                while x < region.w {
                    x += rng.range_inclusive(6, 20);
                    cuts.push(x);
                    x += rng.range_inclusive(3, 5);
                    cuts.push(x);
                }
            }
            RegionKind::Table => {
                cuts.push(rng.range_inclusive(10, 20));
                cuts.push(rng.range_inclusive(6, 10));
            }
            RegionKind::ChartBlock => {
                let bars = rng.range_inclusive(3, 8);
                cuts.push(bars);
                heights = (0..bars).map(|_| rng.uniform(0.2, 0.95)).collect();
            }
        }
        Self {
            region,
            cuts,
            heights,
        }
    }

    fn pixel(&self, dx: usize, dy: usize) -> f64 {
        let r = self.region;
        match r.kind {
            RegionKind::TextLine => {
                let base = 0.62;
                let in_word = self.cuts.iter().filter(|&&c| c <= dx).count() % 2 == 0;
                let band = dy * 5 >= r.h && dy * 5 < r.h * 4;
                if in_word && band && dx % 3 != 2 {
                    INK
                } else {
                    base
                }
            }
            RegionKind::Table => {
                let (cw, ch) = (self.cuts[0], self.cuts[1]);
                let edge = dx == 0 || dy == 0 || dx + 1 == r.w || dy + 1 == r.h;
                if edge || dx % cw == 0 || dy % ch == 0 {
                    INK
                } else {
                    0.78
                }
            }
            RegionKind::ChartBlock => {
                let bars = self.cuts[0];
                let slot = (dx * bars / r.w).min(bars - 1);
                let slot_x = dx * bars % r.w;
                let in_bar = slot_x * 4 >= r.w && slot_x * 4 < r.w * 3;
                let top = ((1.0 - self.heights[slot]) * r.h as f64) as usize;
                if in_bar && dy >= top {
                    0.25
                } else {
                    0.70
                }
            }
        }
    }
}

/// A generated corpus together with the layouts that produced it.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub specs: Vec<LayoutSpec>,
    pub docs: Vec<LabeledImage>,
}

impl Corpus {
    pub fn mean_content_fraction(&self) -> f64 {
        mean(self.docs.iter().map(|d| d.content_fraction()))
    }

    pub fn mean_patch_label_fraction(&self, patch: usize) -> Result<f64> {
        let fr = self
            .docs
            .iter()
            .map(|d| d.patch_label_fraction(patch))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(fr.into_iter()))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `n` documents; document `i` is planned from `derive_seed(seed, i)`.
pub fn make_corpus(n: usize, fraction: f64, size: usize, seed: u64) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let mut specs = Vec::with_capacity(n);
    let mut docs = Vec::with_capacity(n);
    for i in 0..n {
        let spec = LayoutSpec::plan(size, fraction, derive_seed(seed, i as u64))?;
        docs.push(generate(&spec)?);
        specs.push(spec);
    }
    Ok(Corpus { specs, docs })
}

/// The region an instruction refers to, with its patch-level relevance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionTarget {
    pub instruction: InstructionSpec,
    pub region: usize,
    /// Row-major over the patch grid.
    pub relevance: Vec<bool>,
    pub grid: usize,
}

/// Quantization levels for bounding-box coordinates in instruction ids.
pub const BBOX_LEVELS: usize = 16;

/// Picks one region as the referent of a synthetic instruction.
pub fn instruction_target(
    img: &LabeledImage,
    patch: usize,
    seed: u64,
) -> Result<InstructionTarget> {
    if img.regions.is_empty() {
        return Err(Error::EmptyDocument);
    }
    let mut rng = Rng::new(seed);
    let idx = rng.below(img.regions.len() as u64) as usize;
    instruction_for_region(img, idx, patch)
}

/// Instruction targeting region `idx`.
pub fn instruction_for_region(
    img: &LabeledImage,
    idx: usize,
    patch: usize,
) -> Result<InstructionTarget> {
    let side = img.side();
    check_divisible(side, patch)?;
    let r = img
        .regions
        .get(idx)
        .ok_or_else(|| Error::Config(format!("region index {idx} out of range")))?;
    let g = side / patch;

    let x0 = r.x.saturating_sub(RELEVANCE_MARGIN);
    let y0 = r.y.saturating_sub(RELEVANCE_MARGIN);
    let x1 = (r.x + r.w + RELEVANCE_MARGIN).min(side); // exclusive
    let y1 = (r.y + r.h + RELEVANCE_MARGIN).min(side);
    let mut relevance = vec![false; g * g];
    for py in y0 / patch..y1.div_ceil(patch) {
        for px in x0 / patch..x1.div_ceil(patch) {
            relevance[py * g + px] = true;
        }
    }

    let q = |v: usize| ((v * BBOX_LEVELS) / side).min(BBOX_LEVELS - 1) as u32;
    let token_ids = vec![
        1 + r.kind.id(),
        16 + q(r.x),
        32 + q(r.y),
        48 + q(r.x + r.w - 1),
        64 + q(r.y + r.h - 1),
    ];
    Ok(InstructionTarget {
        instruction: InstructionSpec::new(token_ids)?,
        region: idx,
        relevance,
        grid: g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank_spec(size: usize) -> LayoutSpec {
        LayoutSpec {
            image_size: size,
            regions: vec![],
            background_value: DEFAULT_BACKGROUND,
            target_content_fraction: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn empty_document() {
        let img = generate(&blank_spec(64)).unwrap();
        assert!(img.content_mask.iter().all(|&m| !m));
        assert!(img.patch_labels(4).unwrap().iter().all(|&l| !l));
        assert!(img
            .image
            .data
            .iter()
            .all(|&v| (v - DEFAULT_BACKGROUND).abs() <= NOISE_AMPLITUDE + 1e-12));
    }

    #[test]
    fn saturated_document() {
        let mut spec = blank_spec(64);
        spec.target_content_fraction = 1.0;
        spec.regions.push(ContentRegion {
            kind: RegionKind::ChartBlock,
            x: 0,
            y: 0,
            w: 64,
            h: 64,
            texture_seed: 3,
        });
        let img = generate(&spec).unwrap();
        assert!(img.patch_labels(4).unwrap().iter().all(|&l| l));
    }

    #[test]
    fn half_content_patch_fraction() {
        let spec = LayoutSpec::plan(256, 0.5, 17).unwrap();
        let img = generate(&spec).unwrap();
        let f = img.patch_label_fraction(4).unwrap();
        assert!((0.45..=0.60).contains(&f), "{f}");
        assert!((img.content_fraction() - 0.5).abs() <= FRACTION_TOLERANCE);
    }

    #[test]
    fn labels_match_pixel_scan() {
        let img = generate(&LayoutSpec::plan(128, 0.4, 5).unwrap()).unwrap();
        let labels = img.patch_labels(4).unwrap();
        let g = 32;
        for py in 0..g {
            for px in 0..g {
                let mut any = false;
                for y in py * 4..py * 4 + 4 {
                    for x in px * 4..px * 4 + 4 {
                        any |= img.content_mask[y * 128 + x];
                    }
                }
                assert_eq!(labels[py * g + px], any);
            }
        }
    }

    #[test]
    fn content_pixels_darker_than_background() {
        let img = generate(&LayoutSpec::plan(128, 0.5, 8).unwrap()).unwrap();
        for (v, m) in img.image.data.iter().zip(&img.content_mask) {
            if *m {
                assert!(*v <= 0.78 + 1e-12);
            } else {
                assert!(*v >= DEFAULT_BACKGROUND - NOISE_AMPLITUDE - 1e-12);
            }
        }
    }

    #[test]
    fn regions_respect_constraints() {
        for seed in 0..20 {
            let spec = LayoutSpec::plan(256, 0.5, seed).unwrap();
            spec.validate().unwrap();
        }
    }

    #[test]
    fn infeasible_fraction_rejected() {
        match LayoutSpec::plan(256, 0.99, 1) {
            Err(Error::InfeasibleLayout { achieved, .. }) => assert!(achieved < 0.99),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn corpus_singleton_and_determinism() {
        let c = make_corpus(1, 0.5, 128, 77).unwrap();
        let direct = generate(&LayoutSpec::plan(128, 0.5, derive_seed(77, 0)).unwrap()).unwrap();
        assert_eq!(c.docs[0], direct);
        let a = make_corpus(3, 0.3, 128, 5).unwrap();
        let b = make_corpus(3, 0.3, 128, 5).unwrap();
        assert_eq!(a.docs, b.docs);
    }

    #[test]
    fn corpus_mean_fraction() {
        let c = make_corpus(32, 0.5, 256, 2024).unwrap();
        let f = c.mean_patch_label_fraction(4).unwrap();
        assert!((0.45..=0.60).contains(&f), "{f}");
    }

    #[test]
    fn single_region_relevance_is_dilated_labels() {
        let mut spec = blank_spec(64);
        spec.target_content_fraction = 0.04;
        spec.regions.push(ContentRegion {
            kind: RegionKind::TextLine,
            x: 20,
            y: 30,
            w: 20,
            h: 8,
            texture_seed: 1,
        });
        let img = generate(&spec).unwrap();
        let t = instruction_target(&img, 4, 99).unwrap();
        assert_eq!(t.region, 0);
        // Dilate the content mask by the margin, then take patch labels.
        let mut dilated = vec![false; 64 * 64];
        for y in 0..64usize {
            for x in 0..64usize {
                if img.content_mask[y * 64 + x] {
                    for yy in y.saturating_sub(8)..(y + 9).min(64) {
                        for xx in x.saturating_sub(8)..(x + 9).min(64) {
                            dilated[yy * 64 + xx] = true;
                        }
                    }
                }
            }
        }
        let d = LabeledImage {
            content_mask: dilated,
            ..img.clone()
        };
        assert_eq!(t.relevance, d.patch_labels(4).unwrap());
        assert_eq!(t.relevance.len(), t.grid * t.grid);
    }

    #[test]
    fn empty_document_has_no_instruction() {
        let img = generate(&blank_spec(32)).unwrap();
        assert!(matches!(
            instruction_target(&img, 4, 0),
            Err(Error::EmptyDocument)
        ));
    }

    #[test]
    fn every_region_gets_picked() {
        let spec = LayoutSpec::plan(256, 0.5, 4).unwrap();
        let img = generate(&spec).unwrap();
        assert!(img.regions.len() >= 10, "{}", img.regions.len());
        let mut img10 = img.clone();
        img10.regions.truncate(10);
        let mut seen = [false; 10];
        for s in 0..100 {
            seen[instruction_target(&img10, 4, s).unwrap().region] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
