//! Hierarchical windowed-attention encoder with content-gated computation.
//!
//! Every block computes `h' = p·F(h) + (1−p)·h` per token, where `F` is a
//! pre-norm window-attention + FFN block. With binarized `p` this either
//! replaces a token by the block output or passes it through untouched, so a
//! window whose tokens all have `p = 0` can skip attention entirely without
//! changing any output. Between stages, 2×2 neighbourhoods merge into one
//! token of twice the width whose probability is the max of its children.

use serde::{Deserialize, Serialize};

use crate::content_filter::{binarize, ThresholdSchedule};
use crate::error::{Error, Result};
use crate::patching::{PatchEmbed, ProbabilityMap, TokenGrid};
use crate::tensor::grad::{
    attention_backward, attention_cached, layernorm_backward, layernorm_cached, linear_backward,
    LayerNormCache,
};
use crate::tensor::mlp::Mlp2Cache;
use crate::tensor::ops::{
    add_assign, attention, attention_flops, layernorm, linear, linear_flops, FlopCounter,
    NORM_FLOPS_PER_ELEMENT,
};
use crate::tensor::{Matrix, Mlp2, Rng};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    /// Window side, in tokens.
    pub window: usize,
    pub merge_after: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub ffn_ratio: usize,
    pub stages: Vec<StageConfig>,
}

impl EncoderConfig {
    /// Depths 2/2/6/2, window 8, width 32 on 4×4 patches.
    pub fn desk() -> Self {
        Self::with_depths(&[2, 2, 6, 2], 8, 4, 32)
    }

    /// Depths 2/2/18/2 and window 10 on 4×4 patches. The width stays at the
    /// desk value so the profile runs on a CPU.
    pub fn paper_scale() -> Self {
        Self::with_depths(&[2, 2, 18, 2], 10, 4, 32)
    }

    pub fn with_depths(depths: &[usize], window: usize, patch: usize, embed_dim: usize) -> Self {
        let n = depths.len();
        Self {
            patch,
            channels: 1,
            embed_dim,
            ffn_ratio: 4,
            stages: depths
                .iter()
                .enumerate()
                .map(|(i, &depth)| StageConfig {
                    depth,
                    window,
                    merge_after: i + 1 < n,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.patch == 0 || self.embed_dim == 0 || self.channels == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config(
                "patch, width, channels and ffn ratio must be positive".into(),
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 || s.window == 0 {
                return Err(Error::Config(format!(
                    "stage {}: depth and window must be ≥ 1",
                    i + 1
                )));
            }
            if s.merge_after && i + 1 == self.stages.len() {
                return Err(Error::Config("the last stage cannot merge".into()));
            }
        }
        Ok(())
    }

    /// Token width at each stage; doubles after every merge.
    pub fn stage_dims(&self) -> Vec<usize> {
        let mut d = self.embed_dim;
        self.stages
            .iter()
            .map(|s| {
                let cur = d;
                if s.merge_after {
                    d *= 2;
                }
                cur
            })
            .collect()
    }

    /// Grid side at each stage for an image of side `image`.
    pub fn stage_grids(&self, image: usize) -> Result<Vec<usize>> {
        if image % self.patch != 0 {
            return Err(Error::Indivisible {
                side: image,
                patch: self.patch,
            });
        }
        let mut g = image / self.patch;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            out.push(g);
            if s.merge_after {
                if g % 2 != 0 {
                    return Err(Error::OddGrid { rows: g, cols: g });
                }
                g /= 2;
            }
        }
        Ok(out)
    }
}

/// How `p` enters the gated skip connection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    /// `p` binarized against the stage threshold: select or skip.
    #[default]
    Hard,
    /// Tokens below the threshold get `p = 0`; the rest keep their raw
    /// probability and blend block output with input.
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeOptions {
    pub gating: GatingMode,
    /// Skip windows (and per-token FFNs) whose gate is zero.
    pub bypass: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            gating: GatingMode::Hard,
            bypass: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub ffn: Mlp2,
}

fn init_bias(fan_in: usize, n: usize, rng: &mut Rng) -> Vec<f64> {
    let b = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.uniform(-b, b)).collect()
}

impl BlockWeights {
    pub fn new(dim: usize, ffn_ratio: usize, rng: &mut Rng) -> Self {
        Self {
            ln1_gamma: vec![1.0; dim],
            ln1_beta: vec![0.0; dim],
            wq: Matrix::init_weight(dim, dim, rng),
            bq: init_bias(dim, dim, rng),
            wk: Matrix::init_weight(dim, dim, rng),
            bk: init_bias(dim, dim, rng),
            wv: Matrix::init_weight(dim, dim, rng),
            bv: init_bias(dim, dim, rng),
            wo: Matrix::init_weight(dim, dim, rng),
            bo: init_bias(dim, dim, rng),
            ln2_gamma: vec![1.0; dim],
            ln2_beta: vec![0.0; dim],
            ffn: Mlp2::new(dim, dim * ffn_ratio, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    /// All parameters: LN1, q, k, v, o (weight then bias), LN2, FFN.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.ln1_gamma);
        out.extend_from_slice(&self.ln1_beta);
        for (w, b) in [
            (&self.wq, &self.bq),
            (&self.wk, &self.bk),
            (&self.wv, &self.bv),
            (&self.wo, &self.bo),
        ] {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.ln2_gamma);
        out.extend_from_slice(&self.ln2_beta);
        out.extend(self.ffn.flat_params());
        out
    }

    pub(crate) fn read_params(
        dim: usize,
        ffn_hidden: usize,
        r: &mut crate::weights::ValueReader<'_>,
    ) -> Result<Self> {
        let lin = |r: &mut crate::weights::ValueReader<'_>| -> Result<(Matrix, Vec<f64>)> {
            Ok((
                Matrix::from_vec(dim, dim, r.take(dim * dim)?)?,
                r.take(dim)?,
            ))
        };
        let ln1_gamma = r.take(dim)?;
        let ln1_beta = r.take(dim)?;
        let (wq, bq) = lin(r)?;
        let (wk, bk) = lin(r)?;
        let (wv, bv) = lin(r)?;
        let (wo, bo) = lin(r)?;
        let ln2_gamma = r.take(dim)?;
        let ln2_beta = r.take(dim)?;
        let mut ffn = Mlp2::zeros(dim, ffn_hidden, dim);
        ffn.set_flat_params(&r.take(ffn.param_count())?)?;
        Ok(Self {
            ln1_gamma,
            ln1_beta,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_gamma,
            ln2_beta,
            ffn,
        })
    }

    /// `x + Wo·Attn(LN1(x))` over the rows of `x` (one window).
    pub fn attention_sublayer(&self, x: &Matrix, fc: &mut FlopCounter) -> Result<Matrix> {
        let n = layernorm(x, &self.ln1_gamma, &self.ln1_beta, LN_EPS, fc)?;
        let q = linear(&n, &self.wq, &self.bq, fc)?;
        let k = linear(&n, &self.wk, &self.bk, fc)?;
        let v = linear(&n, &self.wv, &self.bv, fc)?;
        let a = attention(&q, &k, &v, fc)?;
        let mut out = linear(&a, &self.wo, &self.bo, fc)?;
        add_assign(&mut out, x, fc)?;
        Ok(out)
    }

    /// `y + FFN(LN2(y))`, row-wise.
    pub fn ffn_sublayer(&self, y: &Matrix, fc: &mut FlopCounter) -> Result<Matrix> {
        let n = layernorm(y, &self.ln2_gamma, &self.ln2_beta, LN_EPS, fc)?;
        let mut out = self.ffn.forward(&n, fc)?;
        add_assign(&mut out, y, fc)?;
        Ok(out)
    }
}

/// Activations of one block pass, kept for [`BlockWeights::backward`].
#[derive(Clone, Debug)]
pub struct BlockCache {
    ln1: LayerNormCache,
    n1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Matrix,
    a: Matrix,
    ln2: LayerNormCache,
    n2: Matrix,
    ffn: Mlp2Cache,
}

impl BlockWeights {
    /// Both sublayers over all rows of `x`, as one sequence.
    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, BlockCache)> {
        let fc = &mut FlopCounter::disabled();
        let (n1, ln1) = layernorm_cached(x, &self.ln1_gamma, &self.ln1_beta, LN_EPS);
        let q = linear(&n1, &self.wq, &self.bq, fc)?;
        let k = linear(&n1, &self.wk, &self.bk, fc)?;
        let v = linear(&n1, &self.wv, &self.bv, fc)?;
        let (a, probs) = attention_cached(&q, &k, &v)?;
        let mut y = linear(&a, &self.wo, &self.bo, fc)?;
        add_assign(&mut y, x, fc)?;
        let (n2, ln2) = layernorm_cached(&y, &self.ln2_gamma, &self.ln2_beta, LN_EPS);
        let ffn = self.ffn.forward_cached(&n2, fc)?;
        let mut z = ffn.out.clone();
        add_assign(&mut z, &y, fc)?;
        let cache = BlockCache {
            ln1,
            n1,
            q,
            k,
            v,
            probs,
            a,
            ln2,
            n2,
            ffn,
        };
        Ok((z, cache))
    }

    /// Input gradient and parameter gradients, the latter flattened in
    /// [`BlockWeights::flat_params`] order.
    pub fn backward(&self, c: &BlockCache, dz: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let g_ffn = self.ffn.backward(&c.n2, &c.ffn, dz)?;
        let (dy_ln, dg2, db2) = layernorm_backward(&c.ln2, &self.ln2_gamma, &g_ffn.input);
        let mut dy = dz.clone();
        add_assign(&mut dy, &dy_ln, &mut FlopCounter::disabled())?;

        let (da, dwo, dbo) = linear_backward(&c.a, &self.wo, &dy)?;
        let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.probs, &da)?;
        let (mut dn1, dwq, dbq) = linear_backward(&c.n1, &self.wq, &dq)?;
        let (dn1k, dwk, dbk) = linear_backward(&c.n1, &self.wk, &dk)?;
        let (dn1v, dwv, dbv) = linear_backward(&c.n1, &self.wv, &dv)?;
        let fc = &mut FlopCounter::disabled();
        add_assign(&mut dn1, &dn1k, fc)?;
        add_assign(&mut dn1, &dn1v, fc)?;
        let (dx_ln, dg1, db1) = layernorm_backward(&c.ln1, &self.ln1_gamma, &dn1);
        let mut dx = dy;
        add_assign(&mut dx, &dx_ln, fc)?;

        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend(dg1);
        flat.extend(db1);
        for (w, b) in [(dwq, dbq), (dwk, dbk), (dwv, dbv), (dwo, dbo)] {
            flat.extend_from_slice(w.data());
            flat.extend(b);
        }
        flat.extend(dg2);
        flat.extend(db2);
        flat.extend(g_ffn.flat());
        Ok((dx, flat))
    }

    pub fn param_count(&self) -> usize {
        let d = self.dim();
        4 * d + 4 * (d * d + d) + self.ffn.param_count()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Length {
                op: "block params",
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut r = crate::weights::ValueReader::new(flat);
        *self = Self::read_params(self.dim(), self.ffn.hidden_dim(), &mut r)?;
        r.finish()
    }
}

/// Exact cost of one window's attention sublayer on `n` tokens of width `d`.
pub fn window_attention_flops(n: usize, d: usize) -> u64 {
    NORM_FLOPS_PER_ELEMENT * (n * d) as u64
        + 4 * linear_flops(n, d, d)
        + attention_flops(n, n, d, d)
        + (n * d) as u64
}

/// Exact cost of the FFN sublayer for `n` tokens.
pub fn ffn_flops(n: usize, d: usize, hidden: usize) -> u64 {
    NORM_FLOPS_PER_ELEMENT * (n * d) as u64
        + linear_flops(n, d, hidden)
        + NORM_FLOPS_PER_ELEMENT * (n * hidden) as u64
        + linear_flops(n, hidden, d)
        + (n * d) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageWeights {
    pub blocks: Vec<BlockWeights>,
    /// `4d × 2d` reduction applied after concatenating a 2×2 neighbourhood.
    pub merge: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<StageWeights>,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let embed = PatchEmbed::new(config.patch, config.channels, config.embed_dim, &mut rng);
        let dims = config.stage_dims();
        let stages = config
            .stages
            .iter()
            .zip(&dims)
            .map(|(s, &d)| StageWeights {
                blocks: (0..s.depth)
                    .map(|_| BlockWeights::new(d, config.ffn_ratio, &mut rng))
                    .collect(),
                merge: s
                    .merge_after
                    .then(|| Matrix::init_weight(4 * d, 2 * d, &mut rng)),
            })
            .collect();
        Ok(Self {
            config,
            embed,
            stages,
        })
    }

    pub fn output_dim(&self) -> usize {
        let dims = self.config.stage_dims();
        let last = dims[dims.len() - 1];
        last
    }
}

/// Window geometry for one pass over a `rows × cols` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub rows: usize,
    pub cols: usize,
    pub window: usize,
    pub shift: usize,
    pub padded_rows: usize,
    pub padded_cols: usize,
}

impl WindowGeometry {
    /// A grid no larger than the window is handled as one unshifted window.
    pub fn new(rows: usize, cols: usize, window: usize, shifted: bool) -> Self {
        let window = window.min(rows.max(cols)).max(1);
        let padded_rows = rows.div_ceil(window) * window;
        let padded_cols = cols.div_ceil(window) * window;
        let shift = if shifted && rows > window && cols > window {
            window / 2
        } else {
            0
        };
        Self {
            rows,
            cols,
            window,
            shift,
            padded_rows,
            padded_cols,
        }
    }

    pub fn window_count(&self) -> usize {
        (self.padded_rows / self.window) * (self.padded_cols / self.window)
    }

    /// Grid index of each slot of window `w`, row-major within the window;
    /// `None` for padding. Shifted passes roll the padded grid by `-shift`
    /// before partitioning.
    pub fn window_slots(&self, w: usize) -> Vec<Option<usize>> {
        let per_row = self.padded_cols / self.window;
        let (wr, wc) = (w / per_row, w % per_row);
        let mut slots = Vec::with_capacity(self.window * self.window);
        for a in 0..self.window {
            for b in 0..self.window {
                let r = (wr * self.window + a + self.shift) % self.padded_rows;
                let c = (wc * self.window + b + self.shift) % self.padded_cols;
                slots.push((r < self.rows && c < self.cols).then(|| r * self.cols + c));
            }
        }
        slots
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WindowStats {
    pub total: usize,
    pub computed: usize,
    pub bypassed: usize,
    pub attention_flops: u64,
    pub ffn_flops: u64,
}

impl WindowStats {
    fn absorb(&mut self, o: &WindowStats) {
        self.total += o.total;
        self.computed += o.computed;
        self.bypassed += o.bypassed;
        self.attention_flops += o.attention_flops;
        self.ffn_flops += o.ffn_flops;
    }
}

/// Gated skip connection for one token.
#[inline]
pub fn gate(p: f64, block_out: f64, input: f64, mode: GatingMode) -> f64 {
    match mode {
        GatingMode::Hard => {
            if p == 1.0 {
                block_out
            } else {
                input
            }
        }
        GatingMode::Soft => p * block_out + (1.0 - p) * input,
    }
}

/// One gated block over all windows of the grid.
///
/// `gates` holds one value per token: binarized probabilities for hard
/// gating, thresholded raw probabilities for soft gating.
pub fn gated_block(
    tokens: &Matrix,
    geom: &WindowGeometry,
    gates: &[f64],
    block: &BlockWeights,
    opts: EncodeOptions,
) -> Result<(Matrix, WindowStats)> {
    let order: Vec<usize> = (0..geom.window_count()).collect();
    gated_block_ordered(tokens, geom, gates, block, opts, &order)
}

/// As [`gated_block`], visiting windows in `order`. Every window reads the
/// block input and writes disjoint outputs, so the result does not depend on
/// the order.
pub fn gated_block_ordered(
    tokens: &Matrix,
    geom: &WindowGeometry,
    gates: &[f64],
    block: &BlockWeights,
    opts: EncodeOptions,
    order: &[usize],
) -> Result<(Matrix, WindowStats)> {
    let n_tokens = geom.rows * geom.cols;
    if gates.len() != n_tokens || tokens.rows() != n_tokens {
        return Err(Error::Length {
            op: "gated_block",
            expected: n_tokens,
            actual: gates.len().min(tokens.rows()),
        });
    }
    let d = tokens.cols();
    let mut out = tokens.clone();
    let mut stats = WindowStats {
        total: geom.window_count(),
        ..WindowStats::default()
    };

    for &w in order {
        let slots = geom.window_slots(w);
        let gate_of = |s: &Option<usize>| s.map_or(0.0, |i| gates[i]);
        if opts.bypass && slots.iter().all(|s| gate_of(s) == 0.0) {
            stats.bypassed += 1;
            continue;
        }
        stats.computed += 1;

        let mut x = Matrix::zeros(slots.len(), d);
        for (k, s) in slots.iter().enumerate() {
            if let Some(i) = s {
                x.row_mut(k).copy_from_slice(tokens.row(*i));
            }
        }
        let mut afc = FlopCounter::new();
        let y = block.attention_sublayer(&x, &mut afc)?;
        stats.attention_flops += afc.total();

        // Rows whose block output is needed.
        let needed: Vec<usize> = (0..slots.len())
            .filter(|&k| !opts.bypass || gate_of(&slots[k]) != 0.0)
            .collect();
        let mut ffc = FlopCounter::new();
        let z = block.ffn_sublayer(&y.select_rows(&needed), &mut ffc)?;
        stats.ffn_flops += ffc.total();

        for (row, &k) in needed.iter().enumerate() {
            let Some(i) = slots[k] else { continue };
            let g = gates[i];
            let dst = out.row_mut(i);
            for ((o, &f), &h) in dst.iter_mut().zip(z.row(row)).zip(tokens.row(i)) {
                *o = gate(g, f, h, opts.gating);
            }
        }
    }
    Ok((out, stats))
}

/// Runs `depth` blocks over a grid, alternating regular and shifted windows.
pub fn window_pass(
    grid: &TokenGrid,
    gates: &[f64],
    blocks: &[BlockWeights],
    window: usize,
    opts: EncodeOptions,
) -> Result<(Matrix, WindowStats)> {
    let mut h = grid.tokens.clone();
    let mut stats = WindowStats::default();
    for (b, block) in blocks.iter().enumerate() {
        let geom = WindowGeometry::new(grid.rows, grid.cols, window, b % 2 == 1);
        let (next, s) = gated_block(&h, &geom, gates, block, opts)?;
        h = next;
        stats.absorb(&s);
    }
    Ok((h, stats))
}

/// 2×2 max-pooling of a row-major probability grid.
pub fn merge_probs(p: &ProbabilityMap, rows: usize, cols: usize) -> Result<ProbabilityMap> {
    if rows % 2 != 0 || cols % 2 != 0 {
        return Err(Error::OddGrid { rows, cols });
    }
    if p.len() != rows * cols {
        return Err(Error::Length {
            op: "merge_probs",
            expected: rows * cols,
            actual: p.len(),
        });
    }
    let v = p.values();
    let (hr, hc) = (rows / 2, cols / 2);
    let mut out = Vec::with_capacity(hr * hc);
    for r in 0..hr {
        for c in 0..hc {
            let i = 2 * r * cols + 2 * c;
            out.push(v[i].max(v[i + cols]).max(v[i + 1]).max(v[i + cols + 1]));
        }
    }
    Ok(ProbabilityMap::with_flag(out, p.is_binarized()))
}

/// Merges 2×2 neighbourhoods: children are concatenated in the order
/// (0,0), (1,0), (0,1), (1,1) and mapped by `weight` (`4d × 2d`). The merged
/// probability is the max of the children's.
pub fn merge_patches(
    grid: &TokenGrid,
    probs: &ProbabilityMap,
    weight: &Matrix,
    fc: &mut FlopCounter,
) -> Result<(TokenGrid, ProbabilityMap)> {
    let (rows, cols, d) = (grid.rows, grid.cols, grid.dim());
    if rows % 2 != 0 || cols % 2 != 0 {
        return Err(Error::OddGrid { rows, cols });
    }
    if weight.rows() != 4 * d {
        return Err(Error::Shape {
            op: "merge_patches",
            left: (grid.len(), 4 * d),
            right: weight.shape(),
        });
    }
    let (hr, hc) = (rows / 2, cols / 2);
    let mut cat = Matrix::zeros(hr * hc, 4 * d);
    for r in 0..hr {
        for c in 0..hc {
            let dst = cat.row_mut(r * hc + c);
            let kids = [
                (2 * r) * cols + 2 * c,
                (2 * r + 1) * cols + 2 * c,
                (2 * r) * cols + 2 * c + 1,
                (2 * r + 1) * cols + 2 * c + 1,
            ];
            for (k, &i) in kids.iter().enumerate() {
                dst[k * d..(k + 1) * d].copy_from_slice(grid.tokens.row(i));
            }
        }
    }
    let tokens = crate::tensor::ops::matmul(&cat, weight, fc)?;
    let merged_p = merge_probs(probs, rows, cols)?;
    let mut out = TokenGrid::new(hr, hc, tokens)?.with_probs(merged_p.clone())?;
    out.stage = grid.stage + 1;
    Ok((out, merged_p))
}

/// Per-stage bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub eps_c: f64,
    pub tokens: usize,
    /// Tokens whose gate is non-zero.
    pub active: usize,
    pub windows: WindowStats,
    pub merge_flops: u64,
    /// Raw probabilities at stage entry.
    pub entry_probs: ProbabilityMap,
    /// Gate values used inside the stage.
    pub gates: ProbabilityMap,
}

impl StageRecord {
    pub fn active_mask(&self) -> Vec<bool> {
        self.gates.nonzero_mask()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTrace {
    pub stages: Vec<StageRecord>,
}

impl StageTrace {
    pub fn attention_flops(&self) -> u64 {
        self.stages.iter().map(|s| s.windows.attention_flops).sum()
    }

    pub fn ffn_flops(&self) -> u64 {
        self.stages.iter().map(|s| s.windows.ffn_flops).sum()
    }

    pub fn merge_flops(&self) -> u64 {
        self.stages.iter().map(|s| s.merge_flops).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.attention_flops() + self.ffn_flops() + self.merge_flops()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// Final-stage grid, every position present.
    pub grid: TokenGrid,
    /// Row-major final-grid positions that survive the drop.
    pub kept: Vec<usize>,
    /// Rows of `grid.tokens` at `kept`.
    pub tokens: Matrix,
    pub trace: StageTrace,
}

impl EncoderModel {
    /// Patch embedding of an image into the stage-1 grid.
    pub fn embed_image(
        &self,
        img: &crate::synthdoc::ImageTensor,
        fc: &mut FlopCounter,
    ) -> Result<TokenGrid> {
        crate::patching::partition(img, &self.embed, fc)
    }

    /// Gated encoder. `p0` holds raw stage-1 probabilities; each stage
    /// binarizes its entry probabilities against its own threshold, and
    /// merges propagate raw probabilities by 2×2 max. Positions whose final
    /// gate is zero are dropped from the output sequence.
    pub fn encode(
        &self,
        input: &TokenGrid,
        p0: &ProbabilityMap,
        sched: &ThresholdSchedule,
        opts: EncodeOptions,
    ) -> Result<EncoderOutput> {
        if sched.eps_c.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "schedule has {} content thresholds for {} stages",
                sched.eps_c.len(),
                self.stages.len()
            )));
        }
        if p0.len() != input.len() {
            return Err(Error::Length {
                op: "encode probabilities",
                expected: input.len(),
                actual: p0.len(),
            });
        }
        let mut grid = input.clone();
        let mut raw = p0.clone();
        let mut trace = StageTrace::default();
        let mut last_gates = ProbabilityMap::ones(grid.len());

        for (s, (cfg, weights)) in self.config.stages.iter().zip(&self.stages).enumerate() {
            let eps = sched.eps_c[s];
            let gates = stage_gates(&raw, eps, opts.gating);
            let (tokens, windows) =
                window_pass(&grid, gates.values(), &weights.blocks, cfg.window, opts)?;
            grid.tokens = tokens;
            let mut record = StageRecord {
                stage: s + 1,
                rows: grid.rows,
                cols: grid.cols,
                dim: grid.dim(),
                eps_c: eps,
                tokens: grid.len(),
                active: gates.values().iter().filter(|&&g| g != 0.0).count(),
                windows,
                merge_flops: 0,
                entry_probs: raw.clone(),
                gates: gates.clone(),
            };
            grid.probs = gates.clone();
            if let Some(w) = &weights.merge {
                let mut mfc = FlopCounter::new();
                let (merged, merged_raw) = merge_patches(&grid, &raw, w, &mut mfc)?;
                record.merge_flops = mfc.total();
                grid = merged;
                raw = merged_raw;
            }
            last_gates = gates;
            trace.stages.push(record);
        }

        grid.probs = last_gates.clone();
        let kept: Vec<usize> = (0..grid.len())
            .filter(|&i| last_gates.values()[i] != 0.0)
            .collect();
        let tokens = grid.tokens.select_rows(&kept);
        Ok(EncoderOutput {
            grid,
            kept,
            tokens,
            trace,
        })
    }
}

impl EncoderModel {
    /// Plain encoder with no gating or bypass: every block updates every
    /// token. Windowing is done by explicitly rolling and padding the grid,
    /// independent of [`WindowGeometry`]. Returns the final grid tokens.
    pub fn forward_reference(&self, input: &TokenGrid) -> Result<Matrix> {
        let (mut rows, mut cols) = (input.rows, input.cols);
        let mut h = input.tokens.clone();
        let fc = &mut FlopCounter::disabled();
        for (cfg, weights) in self.config.stages.iter().zip(&self.stages) {
            for (b, block) in weights.blocks.iter().enumerate() {
                h = reference_block(&h, rows, cols, cfg.window, b % 2 == 1, block, fc)?;
            }
            if let Some(w) = &weights.merge {
                let grid = TokenGrid::new(rows, cols, h)?;
                let p = ProbabilityMap::ones(grid.len());
                let (merged, _) = merge_patches(&grid, &p, w, fc)?;
                h = merged.tokens;
                rows /= 2;
                cols /= 2;
            }
        }
        Ok(h)
    }
}

fn reference_block(
    h: &Matrix,
    rows: usize,
    cols: usize,
    window: usize,
    shifted: bool,
    block: &BlockWeights,
    fc: &mut FlopCounter,
) -> Result<Matrix> {
    let d = h.cols();
    let w = window.min(rows.max(cols));
    let (pr, pc) = (rows.div_ceil(w) * w, cols.div_ceil(w) * w);
    let s = if shifted && rows > w && cols > w {
        w / 2
    } else {
        0
    };
    // Padded grid, then rolled so that cell (r, c) holds original (r+s, c+s).
    let mut padded: Vec<Option<Vec<f64>>> = vec![None; pr * pc];
    for r in 0..rows {
        for c in 0..cols {
            padded[r * pc + c] = Some(h.row(r * cols + c).to_vec());
        }
    }
    let rolled: Vec<(usize, usize)> = (0..pr * pc)
        .map(|i| ((i / pc + s) % pr, (i % pc + s) % pc))
        .collect();
    let mut out = h.clone();
    for wr in 0..pr / w {
        for wc in 0..pc / w {
            let mut cells = Vec::with_capacity(w * w);
            for a in 0..w {
                for b in 0..w {
                    cells.push(rolled[(wr * w + a) * pc + wc * w + b]);
                }
            }
            let mut x = Matrix::zeros(cells.len(), d);
            for (k, &(r, c)) in cells.iter().enumerate() {
                if let Some(v) = &padded[r * pc + c] {
                    x.row_mut(k).copy_from_slice(v);
                }
            }
            let y = block.attention_sublayer(&x, fc)?;
            let z = block.ffn_sublayer(&y, fc)?;
            for (k, &(r, c)) in cells.iter().enumerate() {
                if r < rows && c < cols {
                    out.row_mut(r * cols + c).copy_from_slice(z.row(k));
                }
            }
        }
    }
    Ok(out)
}

/// Gate values for one stage.
pub fn stage_gates(raw: &ProbabilityMap, eps: f64, mode: GatingMode) -> ProbabilityMap {
    match mode {
        GatingMode::Hard => binarize(raw, eps),
        GatingMode::Soft => ProbabilityMap::with_flag(
            raw.values()
                .iter()
                .map(|&v| if v >= eps { v } else { 0.0 })
                .collect(),
            raw.is_binarized(),
        ),
    }
}

#[cfg(test)]
mod tests;
