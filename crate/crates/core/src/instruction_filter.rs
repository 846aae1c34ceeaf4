//! Instruction filtering: fuse visual tokens with the instruction through one
//! transformer layer, score every visual token for relevance, and keep those
//! scoring at least `eps_i`.

use serde::{Deserialize, Serialize};

use crate::encoder::BlockWeights;
use crate::error::{Error, Result};
use crate::tensor::mlp::{
    bce_with_logits, sample_weights, train_binary, Adam, ClassWeighting, TrainConfig,
};
use crate::tensor::ops::FlopCounter;
use crate::tensor::{Matrix, Mlp2, Rng};
use crate::weights::{ValueReader, WeightFile, WeightKind};

pub const VOCAB_SIZE: usize = 256;
pub const MAX_INSTRUCTION_LEN: usize = 32;

/// Instruction as a short sequence of toy-vocabulary token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSpec {
    token_ids: Vec<u32>,
}

impl InstructionSpec {
    pub fn new(token_ids: Vec<u32>) -> Result<Self> {
        if token_ids.is_empty() || token_ids.len() > MAX_INSTRUCTION_LEN {
            return Err(Error::Config(format!(
                "instruction length {} outside 1..={MAX_INSTRUCTION_LEN}",
                token_ids.len()
            )));
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Config(format!("token id {bad} outside vocabulary")));
        }
        Ok(Self { token_ids })
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IfmConfig {
    pub dim: usize,
    pub ffn_ratio: usize,
    pub classifier_hidden: usize,
    /// Add sinusoidal position codes to visual and instruction tokens.
    pub position_encoding: bool,
}

impl Default for IfmConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            ffn_ratio: 4,
            classifier_hidden: 128,
            position_encoding: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IfmModel {
    pub config: IfmConfig,
    /// `VOCAB_SIZE × dim` lookup table.
    pub embedding: Matrix,
    pub fusion: BlockWeights,
    /// `dim → hidden → 1`, sigmoid output.
    pub classifier: Mlp2,
    pub eps_i: f64,
}

/// Visual tokens entering the IFM together with where they sit on the
/// final encoder grid.
#[derive(Clone, Copy, Debug)]
pub struct VisualInput<'a> {
    pub tokens: &'a Matrix,
    /// Row-major positions on a `rows × cols` grid, one per token row.
    pub positions: &'a [usize],
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    /// Grid positions of kept tokens, strictly increasing.
    pub kept_indices: Vec<usize>,
    /// One score per input visual token.
    pub relevance_scores: Vec<f64>,
    /// Rows of the filtered matrix at the kept tokens.
    pub kept_tokens: Matrix,
}

/// Fourier features of a coordinate in [0, 1]: `sin(kπu), cos(kπu)` for
/// `k = 1..=n/2`, written into `out`.
fn fourier(u: f64, out: &mut [f64]) {
    for (k, pair) in out.chunks_mut(2).enumerate() {
        let a = std::f64::consts::PI * (k + 1) as f64 * u;
        pair[0] += a.sin();
        if pair.len() > 1 {
            pair[1] += a.cos();
        }
    }
}

impl IfmModel {
    /// Seeded model. The classifier's output layer starts at zero so an
    /// untrained model scores every token 0.5.
    pub fn new(config: IfmConfig, eps_i: f64, seed: u64) -> Result<Self> {
        if config.dim < 4 || config.ffn_ratio == 0 || config.classifier_hidden == 0 {
            return Err(Error::Config(format!("invalid IFM config {config:?}")));
        }
        check_eps(eps_i)?;
        let mut rng = Rng::new(seed);
        let embedding = Matrix::uniform(VOCAB_SIZE, config.dim, 1.0, &mut rng);
        let fusion = BlockWeights::new(config.dim, config.ffn_ratio, &mut rng);
        let mut classifier = Mlp2::new(config.dim, config.classifier_hidden, 1, &mut rng);
        classifier.w2 = Matrix::zeros(config.classifier_hidden, 1);
        classifier.b2 = vec![0.0];
        Ok(Self {
            config,
            embedding,
            fusion,
            classifier,
            eps_i,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Instruction vectors `I`: embedding lookup plus 1D position codes.
    pub fn embed_instruction(&self, spec: &InstructionSpec) -> Matrix {
        let d = self.dim();
        let mut out = Matrix::zeros(spec.len(), d);
        for (j, &t) in spec.token_ids().iter().enumerate() {
            let row = out.row_mut(j);
            row.copy_from_slice(self.embedding.row(t as usize));
            if self.config.position_encoding {
                fourier(j as f64 / MAX_INSTRUCTION_LEN as f64, row);
            }
        }
        out
    }

    /// Visual vectors `V` with 2D position codes (rows in the first half of
    /// the width, columns in the second).
    pub fn visual_vectors(&self, v: VisualInput<'_>) -> Result<Matrix> {
        let d = self.dim();
        if v.tokens.cols() != d {
            return Err(Error::Shape {
                op: "ifm visual tokens",
                left: v.tokens.shape(),
                right: (v.tokens.rows(), d),
            });
        }
        if v.positions.len() != v.tokens.rows() {
            return Err(Error::Length {
                op: "ifm positions",
                expected: v.tokens.rows(),
                actual: v.positions.len(),
            });
        }
        let mut out = v.tokens.clone();
        if self.config.position_encoding {
            for (k, &pos) in v.positions.iter().enumerate() {
                let (r, c) = (pos / v.cols, pos % v.cols);
                let row = out.row_mut(k);
                let (top, bottom) = row.split_at_mut(d / 2);
                fourier((r as f64 + 0.5) / v.rows as f64, top);
                fourier((c as f64 + 0.5) / v.cols as f64, bottom);
            }
        }
        Ok(out)
    }

    /// `[V', I'] = FFN(SA([V; I]))` with pre-norm residual sublayers, split
    /// back at `|V|`.
    pub fn fuse(&self, v: &Matrix, i: &Matrix, fc: &mut FlopCounter) -> Result<(Matrix, Matrix)> {
        if i.rows() == 0 {
            return Err(Error::Config("instruction must be non-empty".into()));
        }
        if v.cols() != self.dim() || i.cols() != self.dim() {
            return Err(Error::Shape {
                op: "fuse",
                left: v.shape(),
                right: i.shape(),
            });
        }
        let x = Matrix::vstack(v, i)?;
        let y = self.fusion.attention_sublayer(&x, fc)?;
        let z = self.fusion.ffn_sublayer(&y, fc)?;
        Ok(z.split_rows(v.rows()))
    }

    fn fuse_rows(&self, x: &Matrix, visual: usize) -> Result<(Matrix, Matrix)> {
        let fc = &mut FlopCounter::disabled();
        let y = self.fusion.attention_sublayer(x, fc)?;
        let z = self.fusion.ffn_sublayer(&y, fc)?;
        Ok(z.split_rows(visual))
    }

    /// Relevance probability per row of `v_prime`.
    pub fn scores(&self, v_prime: &Matrix, fc: &mut FlopCounter) -> Result<Vec<f64>> {
        if v_prime.rows() == 0 {
            return Ok(Vec::new());
        }
        self.classifier.predict_proba(v_prime, fc)
    }

    /// Keeps tokens scoring `≥ eps_i`. `positions` labels each row of
    /// `v_prime`; `tokens` supplies the rows copied into the result.
    pub fn filter(
        &self,
        v_prime: &Matrix,
        tokens: &Matrix,
        positions: &[usize],
        fc: &mut FlopCounter,
    ) -> Result<FilterResult> {
        if positions.len() != v_prime.rows() || tokens.rows() != v_prime.rows() {
            return Err(Error::Length {
                op: "filter",
                expected: v_prime.rows(),
                actual: positions.len().min(tokens.rows()),
            });
        }
        let scores = self.scores(v_prime, fc)?;
        let keep: Vec<usize> = (0..scores.len())
            .filter(|&k| scores[k] >= self.eps_i)
            .collect();
        Ok(FilterResult {
            kept_indices: keep.iter().map(|&k| positions[k]).collect(),
            relevance_scores: scores,
            kept_tokens: tokens.select_rows(&keep),
        })
    }

    /// Fused features for a visual set and instruction.
    pub fn features(
        &self,
        v: VisualInput<'_>,
        instruction: &InstructionSpec,
        fc: &mut FlopCounter,
    ) -> Result<Matrix> {
        let vv = self.visual_vectors(v)?;
        let ii = self.embed_instruction(instruction);
        Ok(self.fuse(&vv, &ii, fc)?.0)
    }

    /// Weight file layout: dims `[dim, ffn_ratio, classifier_hidden,
    /// position_encoding, vocab]`; values are the embedding table, the fusion
    /// block, then the classifier (w1, b1, w2, b2).
    pub fn to_weight_file(&self) -> WeightFile {
        let mut values = self.embedding.data().to_vec();
        values.extend(self.fusion.flat_params());
        values.extend(self.classifier.flat_params());
        WeightFile {
            kind: WeightKind::Ifm,
            dims: vec![
                self.config.dim as u32,
                self.config.ffn_ratio as u32,
                self.config.classifier_hidden as u32,
                self.config.position_encoding as u32,
                VOCAB_SIZE as u32,
            ],
            values,
        }
    }

    pub fn from_weight_file(f: &WeightFile, eps_i: f64) -> Result<Self> {
        f.expect_kind(WeightKind::Ifm)?;
        check_eps(eps_i)?;
        let [dim, ffn_ratio, hidden, pe, vocab] = f.dims[..] else {
            return Err(Error::WeightFormat(format!(
                "IFM header needs 5 dims, got {:?}",
                f.dims
            )));
        };
        if vocab as usize != VOCAB_SIZE || pe > 1 {
            return Err(Error::WeightFormat(format!(
                "unsupported IFM header {:?}",
                f.dims
            )));
        }
        let config = IfmConfig {
            dim: dim as usize,
            ffn_ratio: ffn_ratio as usize,
            classifier_hidden: hidden as usize,
            position_encoding: pe == 1,
        };
        let d = config.dim;
        let mut r = ValueReader::new(&f.values);
        let embedding = Matrix::from_vec(VOCAB_SIZE, d, r.take(VOCAB_SIZE * d)?)?;
        let fusion = BlockWeights::read_params(d, d * config.ffn_ratio, &mut r)?;
        let mut classifier = Mlp2::zeros(d, config.classifier_hidden, 1);
        classifier.set_flat_params(&r.take(classifier.param_count())?)?;
        r.finish()?;
        Ok(Self {
            config,
            embedding,
            fusion,
            classifier,
            eps_i,
        })
    }
}

fn check_eps(eps_i: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eps_i) {
        return Err(Error::Config(format!("eps_i {eps_i} outside [0,1]")));
    }
    Ok(())
}

/// One training example: encoder output (after projection) for one document
/// paired with an instruction and per-token relevance labels.
#[derive(Clone, Debug, PartialEq)]
pub struct IfmSample {
    pub tokens: Matrix,
    pub positions: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    pub instruction: InstructionSpec,
    pub labels: Vec<bool>,
}

impl IfmSample {
    pub fn visual(&self) -> VisualInput<'_> {
        VisualInput {
            tokens: &self.tokens,
            positions: &self.positions,
            rows: self.rows,
            cols: self.cols,
        }
    }
}

/// Relevance of each cell of a `g/factor` grid: any relevant fine cell.
pub fn pool_relevance(mask: &[bool], g: usize, factor: usize) -> Result<Vec<bool>> {
    if mask.len() != g * g || factor == 0 || g % factor != 0 {
        return Err(Error::Config(format!(
            "cannot pool a {}-cell mask on a {g}-grid by {factor}",
            mask.len()
        )));
    }
    let h = g / factor;
    let mut out = vec![false; h * h];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out[(i / g / factor) * h + (i % g) / factor] = true;
        }
    }
    Ok(out)
}

/// Stacked fused features and labels for a sample set.
pub fn ifm_training_set(model: &IfmModel, samples: &[IfmSample]) -> Result<(Matrix, Vec<f64>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        if s.labels.len() != s.tokens.rows() {
            return Err(Error::Length {
                op: "ifm labels",
                expected: s.tokens.rows(),
                actual: s.labels.len(),
            });
        }
        if s.tokens.rows() == 0 {
            continue;
        }
        let f = model.features(s.visual(), &s.instruction, &mut FlopCounter::disabled())?;
        rows.extend_from_slice(f.data());
        labels.extend(s.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    if labels.is_empty() {
        return Err(Error::Config(
            "IFM training set has no visual tokens".into(),
        ));
    }
    Ok((Matrix::from_vec(labels.len(), model.dim(), rows)?, labels))
}

/// Which IFM weights receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum IfmTrainScope {
    /// Classifier only, on fixed fused features.
    ClassifierOnly,
    /// Fusion layer and classifier together. The embedding table stays fixed.
    #[default]
    EndToEnd,
}

/// Trains the IFM and returns it with the loss curve (initial loss first).
///
/// With [`IfmTrainScope::EndToEnd`], `cfg.batch_size` counts samples rather
/// than tokens.
pub fn train_ifm(
    model: &IfmModel,
    samples: &[IfmSample],
    cfg: &TrainConfig,
    scope: IfmTrainScope,
) -> Result<(IfmModel, Vec<f64>)> {
    match scope {
        IfmTrainScope::ClassifierOnly => {
            let (features, labels) = ifm_training_set(model, samples)?;
            let mut trained = model.clone();
            let curve = train_binary(&mut trained.classifier, &features, &labels, cfg)?;
            Ok((trained, curve))
        }
        IfmTrainScope::EndToEnd => train_end_to_end(model, samples, cfg),
    }
}

/// One sample ready for the fusion layer: `[V; I]` with position codes.
struct Prepared {
    x: Matrix,
    visual: usize,
    labels: Vec<f64>,
    weights: Vec<f64>,
}

fn prepare(
    model: &IfmModel,
    samples: &[IfmSample],
    weighting: ClassWeighting,
) -> Result<Vec<Prepared>> {
    let mut out = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        if s.labels.len() != s.tokens.rows() {
            return Err(Error::Length {
                op: "ifm labels",
                expected: s.tokens.rows(),
                actual: s.labels.len(),
            });
        }
        if s.tokens.rows() == 0 {
            continue;
        }
        let v = model.visual_vectors(s.visual())?;
        let i = model.embed_instruction(&s.instruction);
        let y: Vec<f64> = s
            .labels
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        labels.extend_from_slice(&y);
        out.push(Prepared {
            x: Matrix::vstack(&v, &i)?,
            visual: v.rows(),
            labels: y,
            weights: Vec::new(),
        });
    }
    if out.is_empty() {
        return Err(Error::Config(
            "IFM training set has no visual tokens".into(),
        ));
    }
    let mut w = sample_weights(&labels, weighting).into_iter();
    for p in &mut out {
        p.weights = w.by_ref().take(p.labels.len()).collect();
    }
    Ok(out)
}

impl IfmModel {
    /// Fusion then classifier parameters.
    pub fn trainable_params(&self) -> Vec<f64> {
        let mut p = self.fusion.flat_params();
        p.extend(self.classifier.flat_params());
        p
    }

    pub fn set_trainable_params(&mut self, flat: &[f64]) -> Result<()> {
        let nf = self.fusion.param_count();
        if flat.len() != nf + self.classifier.param_count() {
            return Err(Error::Length {
                op: "ifm params",
                expected: nf + self.classifier.param_count(),
                actual: flat.len(),
            });
        }
        self.fusion.set_flat_params(&flat[..nf])?;
        self.classifier.set_flat_params(&flat[nf..])
    }
}

/// Weighted BCE over the batch, normalised by its total weight, and the
/// gradient with respect to [`IfmModel::trainable_params`].
fn batch_gradients(m: &IfmModel, batch: &[&Prepared]) -> Result<(f64, Vec<f64>)> {
    let total: f64 = batch.iter().flat_map(|p| p.weights.iter()).sum();
    let nf = m.fusion.param_count();
    let mut grads = vec![0.0; nf + m.classifier.param_count()];
    let mut loss = 0.0;
    for p in batch {
        let (z, cache) = m.fusion.forward_cached(&p.x)?;
        let (vp, _) = z.split_rows(p.visual);
        let cc = m
            .classifier
            .forward_cached(&vp, &mut FlopCounter::disabled())?;
        let (l, dz) = bce_with_logits(cc.out.data(), &p.labels, &p.weights)?;
        let share: f64 = p.weights.iter().sum::<f64>() / total;
        loss += l * share;
        let d_logits = Matrix::from_vec(p.visual, 1, dz.iter().map(|g| g * share).collect())?;
        let gc = m.classifier.backward(&vp, &cc, &d_logits)?;
        let mut dzall = Matrix::zeros(z.rows(), z.cols());
        dzall.data_mut()[..gc.input.data().len()].copy_from_slice(gc.input.data());
        let (_, gf) = m.fusion.backward(&cache, &dzall)?;
        for (acc, g) in grads.iter_mut().zip(gf.iter().chain(gc.flat().iter())) {
            *acc += g;
        }
    }
    Ok((loss, grads))
}

/// Full-set loss and gradient over fusion and classifier parameters.
pub fn ifm_loss_gradients(
    model: &IfmModel,
    samples: &[IfmSample],
    weighting: ClassWeighting,
) -> Result<(f64, Vec<f64>)> {
    let prepared = prepare(model, samples, weighting)?;
    batch_gradients(model, &prepared.iter().collect::<Vec<_>>())
}

/// Full-set loss only.
pub fn ifm_loss(model: &IfmModel, samples: &[IfmSample], weighting: ClassWeighting) -> Result<f64> {
    let prepared = prepare(model, samples, weighting)?;
    full_loss(model, &prepared)
}

fn full_loss(m: &IfmModel, prepared: &[Prepared]) -> Result<f64> {
    let total: f64 = prepared.iter().flat_map(|p| p.weights.iter()).sum();
    let mut loss = 0.0;
    for p in prepared {
        let (vp, _) = m.fuse_rows(&p.x, p.visual)?;
        let logits = m.classifier.forward(&vp, &mut FlopCounter::disabled())?;
        let (l, _) = bce_with_logits(logits.data(), &p.labels, &p.weights)?;
        loss += l * p.weights.iter().sum::<f64>() / total;
    }
    Ok(loss)
}

fn train_end_to_end(
    model: &IfmModel,
    samples: &[IfmSample],
    cfg: &TrainConfig,
) -> Result<(IfmModel, Vec<f64>)> {
    let prepared = prepare(model, samples, cfg.weighting)?;
    let mut m = model.clone();
    let mut params = m.trainable_params();
    let mut adam = Adam::new(cfg.lr, params.len());
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let check = |loss: f64, epoch: usize| -> Result<f64> {
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("IFM loss = {loss}"),
            })
        }
    };
    let mut curve = vec![check(full_loss(&m, &prepared)?, 0)?];
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (loss, grads) = batch_gradients(&m, &batch)?;
            check(loss, epoch)?;
            adam.step_flat(&mut params, &grads);
            m.set_trainable_params(&params)?;
        }
        curve.push(check(full_loss(&m, &prepared)?, epoch)?);
    }
    Ok((m, curve))
}

/// Fraction of relevant tokens scoring at least the model's `eps_i`.
pub fn ifm_recall(model: &IfmModel, samples: &[IfmSample]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        if s.tokens.rows() == 0 {
            continue;
        }
        let f = model.features(s.visual(), &s.instruction, &mut FlopCounter::disabled())?;
        let scores = model.scores(&f, &mut FlopCounter::disabled())?;
        for (&p, &l) in scores.iter().zip(&s.labels) {
            if l {
                total += 1;
                hit += (p >= model.eps_i) as usize;
            }
        }
    }
    Ok(if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    })
}

#[cfg(test)]
mod tests;
