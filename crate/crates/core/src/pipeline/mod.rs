//! End-to-end pipeline: detector → gated encoder → projector → instruction
//! filter → decoder cost stub, with per-op FLOP accounting.

mod config;
mod corpus_io;
mod render;
mod report;
mod sweep;

use std::time::Instant;

pub use config::{
    CorpusSection, DetectorSection, DetectorVariant, EncoderSection, IfmSection, PipelineConfig,
    Profile, SEED_ENV,
};
pub use corpus_io::{read_corpus, write_corpus, CorpusManifest, ManifestEntry, MANIFEST_FILE};
pub use render::{render_masks, MaskFiles};
pub use report::{
    ConfigEcho, CorpusStats, DocumentReport, Fixed9, FlopBreakdown, Geometry, MaskReport, Masks,
    RunReport, StageReport, Timings, Totals,
};
pub use sweep::{sweep, SweepResult, SweepRow};

use crate::content_filter::{train_detector, DetectorInput, DetectorModel};
use crate::encoder::{EncodeOptions, EncoderModel};
use crate::error::{Error, Result};
use crate::instruction_filter::{
    pool_relevance, train_ifm, FilterResult, IfmModel, IfmSample, IfmTrainScope, InstructionSpec,
    VisualInput,
};
use crate::synthdoc::{
    instruction_for_region, instruction_target, make_corpus, Corpus, LabeledImage,
};
use crate::tensor::mlp::TrainConfig;
use crate::tensor::ops::FlopCounter;
use crate::tensor::{derive_seed, Matrix, Mlp2, Rng};
use crate::weights::WeightFile;

pub const SCHEMA_VERSION: u32 = 1;

/// Decoder cost per (query, key) token pair: four `d×d` projections'
/// worth of multiply-adds at width 4096 over 32 layers, a stand-in for the
/// prefill cost of a 7B-class decoder. Total cost is this times `L²`.
pub const DECODER_PAIR_FLOPS: u64 = 4 * 4096 * 32;

/// Instruction used for documents without any content region.
pub const EMPTY_INSTRUCTION: u32 = 0;

pub fn decoder_flops(sequence_length: usize) -> u64 {
    DECODER_PAIR_FLOPS * (sequence_length as u64).pow(2)
}

/// Detector training used by the CLI and the benchmarks.
pub fn detector_training() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    }
}

/// End-to-end IFM training used by the CLI and the benchmarks. Batches
/// count samples.
pub fn ifm_training() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        lr: 1e-3,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

/// Seed streams derived from the model seed.
const ENCODER_STREAM: u64 = 1;
const PROJECTOR_STREAM: u64 = 2;
const IFM_STREAM: u64 = 3;
const DETECTOR_STREAM: u64 = 4;
/// Derived from the data seed.
const INSTRUCTION_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub encoder: EncoderModel,
    pub projector: Mlp2,
    pub detector: DetectorModel,
    pub ifm: IfmModel,
    ifm_trained: bool,
}

/// Everything produced for one document.
#[derive(Clone, Debug)]
pub struct DocumentRun {
    pub report: DocumentReport,
    /// Projected visual tokens handed to the decoder, one per kept position.
    pub tokens: Matrix,
    pub filter: FilterResult,
    pub timings: Timings,
}

impl Pipeline {
    /// Builds seeded models and loads whatever weights the config names.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let detector = match config.detector.variant {
            DetectorVariant::Oracle => DetectorModel::oracle(config.encoder_config().patch),
            DetectorVariant::Mlp => {
                let path = config.detector.weights.as_ref().ok_or_else(|| {
                    Error::Config("detector.variant = \"mlp\" needs detector.weights (train one with train-detector)".into())
                })?;
                DetectorModel::from_weight_file(&WeightFile::read(path)?)?
            }
        };
        let ifm = match &config.ifm.weights {
            Some(path) => Some(IfmModel::from_weight_file(
                &WeightFile::read(path)?,
                config.thresholds.eps_i,
            )?),
            None => None,
        };
        Self::with_models(config, detector, ifm)
    }

    /// As [`Pipeline::new`] with models supplied directly; weight paths in
    /// the config are ignored. Without an IFM a seeded untrained one scores
    /// every token 0.5. The detector variant in the config follows `detector`.
    pub fn with_models(
        mut config: PipelineConfig,
        detector: DetectorModel,
        ifm: Option<IfmModel>,
    ) -> Result<Self> {
        config.validate()?;
        config.detector.variant = match detector {
            DetectorModel::Oracle { .. } => DetectorVariant::Oracle,
            _ => DetectorVariant::Mlp,
        };
        let enc_cfg = config.encoder_config();
        if detector.patch() != enc_cfg.patch {
            return Err(Error::Config(format!(
                "detector patch {} differs from encoder patch {}",
                detector.patch(),
                enc_cfg.patch
            )));
        }
        let encoder = EncoderModel::new(enc_cfg, derive_seed(config.model_seed, ENCODER_STREAM))?;
        let mut rng = Rng::new(derive_seed(config.model_seed, PROJECTOR_STREAM));
        let d = config.projector_dim;
        let projector = Mlp2::new(encoder.output_dim(), d, d, &mut rng);
        let ifm_trained = ifm.is_some();
        let mut ifm = match ifm {
            Some(m) => m,
            None => IfmModel::new(
                config.ifm_config(),
                config.thresholds.eps_i,
                derive_seed(config.model_seed, IFM_STREAM),
            )?,
        };
        if ifm.dim() != d {
            return Err(Error::Config(format!(
                "IFM width {} differs from projector_dim {d}",
                ifm.dim()
            )));
        }
        ifm.eps_i = config.thresholds.eps_i;
        Ok(Self {
            config,
            encoder,
            projector,
            detector,
            ifm,
            ifm_trained,
        })
    }

    /// Same models under a different threshold schedule.
    pub fn with_thresholds(&self, eps_c: Vec<f64>, eps_i: f64) -> Result<Self> {
        let mut next = self.clone();
        next.config.thresholds.eps_c = eps_c;
        next.config.thresholds.eps_i = eps_i;
        next.config.validate()?;
        next.ifm.eps_i = eps_i;
        Ok(next)
    }

    pub fn options(&self) -> EncodeOptions {
        EncodeOptions {
            gating: self.config.gating,
            bypass: self.config.bypass,
        }
    }

    /// The configured synthetic corpus.
    pub fn corpus(&self) -> Result<Corpus> {
        make_corpus(
            self.config.corpus.documents,
            self.config.corpus.content_fraction,
            self.config.image_side(),
            self.config.seed,
        )
    }

    /// The instruction paired with document `index`.
    pub fn instruction_for(&self, doc: &LabeledImage, index: usize) -> Result<InstructionSpec> {
        if doc.regions.is_empty() {
            return InstructionSpec::new(vec![EMPTY_INSTRUCTION]);
        }
        let seed = derive_seed(self.config.seed, INSTRUCTION_STREAM + index as u64);
        Ok(instruction_target(doc, self.encoder.config.patch, seed)?.instruction)
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let enc = &self.encoder.config;
        let side = self.config.image_side();
        let grids = enc.stage_grids(side)?;
        let positions: Vec<usize> = grids.iter().map(|g| g * g).collect();
        Ok(Geometry {
            image_size: side,
            patch: enc.patch,
            initial_tokens: positions[0],
            final_positions: *positions.last().expect("at least one stage"),
            stage_grids: grids,
            stage_positions: positions,
            stage_dims: enc.stage_dims(),
        })
    }

    /// Detect, encode and project one document. Returns the encoder output
    /// and the projected kept tokens.
    fn encode_document(
        &self,
        doc: &LabeledImage,
        flops: &mut FlopBreakdown,
        timings: &mut Timings,
    ) -> Result<(crate::encoder::EncoderOutput, Matrix)> {
        let t = Instant::now();
        let mut fc = FlopCounter::new();
        let p0 = self.detector.detect(DetectorInput::Labeled(doc), &mut fc)?;
        flops.detector = fc.total();
        timings.detect_ms = ms(t);

        let t = Instant::now();
        let mut fc = FlopCounter::new();
        let grid = self.encoder.embed_image(&doc.image, &mut fc)?;
        flops.embed = fc.total();
        let out = self
            .encoder
            .encode(&grid, &p0, &self.config.thresholds, self.options())?;
        flops.attention = out.trace.attention_flops();
        flops.ffn = out.trace.ffn_flops();
        flops.merge = out.trace.merge_flops();
        timings.encode_ms = ms(t);

        let t = Instant::now();
        let mut fc = FlopCounter::new();
        let v = if out.kept.is_empty() {
            Matrix::zeros(0, self.config.projector_dim)
        } else {
            self.projector.forward(&out.tokens, &mut fc)?
        };
        flops.projector = fc.total();
        timings.project_ms = ms(t);
        Ok((out, v))
    }

    /// IFM over projected tokens at final-grid `positions`. The kept rows of
    /// `v` (not the fused features) go on to the decoder.
    fn instruction_filter(
        &self,
        v: &Matrix,
        positions: &[usize],
        rows: usize,
        cols: usize,
        instruction: &InstructionSpec,
        fc: &mut FlopCounter,
    ) -> Result<FilterResult> {
        if positions.is_empty() {
            return Ok(FilterResult {
                kept_indices: Vec::new(),
                relevance_scores: Vec::new(),
                kept_tokens: Matrix::zeros(0, v.cols()),
            });
        }
        let visual = VisualInput {
            tokens: v,
            positions,
            rows,
            cols,
        };
        let fused = self.ifm.features(visual, instruction, fc)?;
        self.ifm.filter(&fused, v, positions, fc)
    }

    pub fn run_document(
        &self,
        index: usize,
        doc: &LabeledImage,
        instruction: &InstructionSpec,
    ) -> Result<DocumentRun> {
        let start = Instant::now();
        let mut flops = FlopBreakdown::default();
        let mut timings = Timings::default();
        let (out, v) = self.encode_document(doc, &mut flops, &mut timings)?;

        let t = Instant::now();
        let mut fc = FlopCounter::new();
        let (rows, cols) = (out.grid.rows, out.grid.cols);
        let filter = self.instruction_filter(&v, &out.kept, rows, cols, instruction, &mut fc)?;
        flops.ifm = fc.total();
        timings.ifm_ms = ms(t);

        let kept_final = filter.kept_indices.len();
        let sequence_length = kept_final + instruction.len();
        flops.decoder = decoder_flops(sequence_length);
        flops.close();

        let labels = doc.patch_labels(self.encoder.config.patch)?;
        let g1 = out.trace.stages[0].rows;
        let factor = g1 / rows;
        let final_kept = out.grid.probs.nonzero_mask();
        let (mut blank_dropped, mut content_dropped) = (0, 0);
        for (i, &content) in labels.iter().enumerate() {
            let cell = (i / g1 / factor) * cols + (i % g1) / factor;
            if !final_kept[cell] {
                if content {
                    content_dropped += 1;
                } else {
                    blank_dropped += 1;
                }
            }
        }
        let content_positions = labels.iter().filter(|&&l| l).count();

        let stages: Vec<StageReport> = out
            .trace
            .stages
            .iter()
            .map(|s| StageReport {
                stage: s.stage,
                rows: s.rows,
                cols: s.cols,
                dim: s.dim,
                eps_c: Fixed9(s.eps_c),
                positions: s.tokens,
                active: s.active,
                windows_total: s.windows.total,
                windows_computed: s.windows.computed,
                windows_bypassed: s.windows.bypassed,
                attention_flops: s.windows.attention_flops,
                ffn_flops: s.windows.ffn_flops,
                merge_flops: s.merge_flops,
            })
            .collect();
        let snap = |k: usize| {
            let s = &out.trace.stages[k.min(out.trace.stages.len() - 1)];
            MaskReport::new(s.rows, s.cols, &s.active_mask())
        };
        let mut ifm_mask = vec![false; rows * cols];
        for &i in &filter.kept_indices {
            ifm_mask[i] = true;
        }
        let masks = Masks {
            post_stage2: snap(1),
            post_stage4: MaskReport::new(rows, cols, &final_kept),
            post_ifm: MaskReport::new(rows, cols, &ifm_mask),
        };

        timings.total_ms = ms(start);
        let report = DocumentReport {
            index,
            content_fraction: Fixed9(doc.content_fraction()),
            instruction: instruction.token_ids().to_vec(),
            initial_tokens: labels.len(),
            content_positions,
            blank_positions: labels.len() - content_positions,
            blank_dropped,
            content_dropped,
            encoder_kept: out.kept.len(),
            kept_final,
            sequence_length,
            context_fit: sequence_length <= self.config.context_budget,
            stages,
            flops,
            masks,
        };
        Ok(DocumentRun {
            report,
            tokens: filter.kept_tokens.clone(),
            filter,
            timings,
        })
    }

    /// Runs every document of `corpus`. Returns the report and, separately,
    /// wall-clock timings summed over documents.
    pub fn run(&self, corpus: &Corpus) -> Result<(RunReport, Timings)> {
        let geometry = self.geometry()?;
        let mut documents = Vec::with_capacity(corpus.docs.len());
        let mut timings = Timings::default();
        for (i, doc) in corpus.docs.iter().enumerate() {
            if doc.side() != geometry.image_size {
                return Err(Error::Config(format!(
                    "document {i} is {}px, config expects {}px",
                    doc.side(),
                    geometry.image_size
                )));
            }
            let instruction = self.instruction_for(doc, i)?;
            let run = self.run_document(i, doc, &instruction)?;
            timings.detect_ms += run.timings.detect_ms;
            timings.encode_ms += run.timings.encode_ms;
            timings.project_ms += run.timings.project_ms;
            timings.ifm_ms += run.timings.ifm_ms;
            timings.total_ms += run.timings.total_ms;
            documents.push(run.report);
        }

        let mut flops = FlopBreakdown::default();
        let sum = |f: fn(&DocumentReport) -> usize| documents.iter().map(f).sum::<usize>();
        for d in &documents {
            flops.add(&d.flops);
        }
        let blank_positions = sum(|d| d.blank_positions);
        let blank_dropped = sum(|d| d.blank_dropped);
        let totals = Totals {
            documents: documents.len(),
            initial_tokens: sum(|d| d.initial_tokens),
            blank_positions,
            blank_dropped,
            blank_dropped_fraction: Fixed9(if blank_positions == 0 {
                0.0
            } else {
                blank_dropped as f64 / blank_positions as f64
            }),
            content_dropped: sum(|d| d.content_dropped),
            encoder_kept: sum(|d| d.encoder_kept),
            kept_final: sum(|d| d.kept_final),
            all_fit_context: documents.iter().all(|d| d.context_fit),
            flops,
        };
        let n = corpus.docs.len().max(1) as f64;
        let mean_blank = documents
            .iter()
            .map(|d| d.blank_positions as f64 / d.initial_tokens as f64)
            .sum::<f64>()
            / n;
        let report = RunReport {
            schema_version: SCHEMA_VERSION,
            config: self.echo(),
            corpus: CorpusStats {
                documents: corpus.docs.len(),
                target_content_fraction: Fixed9(
                    corpus
                        .specs
                        .first()
                        .map_or(0.0, |s| s.target_content_fraction),
                ),
                mean_content_fraction: Fixed9(corpus.mean_content_fraction()),
                mean_blank_fraction: Fixed9(mean_blank),
            },
            geometry,
            documents,
            totals,
        };
        Ok((report, timings))
    }

    fn echo(&self) -> ConfigEcho {
        let c = &self.config;
        let enc = &self.encoder.config;
        ConfigEcho {
            profile: c.profile.name().into(),
            seed: c.seed,
            model_seed: c.model_seed,
            image_size: c.image_side(),
            patch: enc.patch,
            embed_dim: enc.embed_dim,
            window: enc.stages[0].window,
            depths: enc.stages.iter().map(|s| s.depth).collect(),
            eps_c: c.thresholds.eps_c.iter().copied().map(Fixed9).collect(),
            eps_i: Fixed9(c.thresholds.eps_i),
            gating: match c.gating {
                crate::encoder::GatingMode::Hard => "hard".into(),
                crate::encoder::GatingMode::Soft => "soft".into(),
            },
            bypass: c.bypass,
            detector: self.detector.variant_name().into(),
            ifm_trained: self.ifm_trained,
            projector_dim: c.projector_dim,
            context_budget: c.context_budget,
            decoder_pair_flops: DECODER_PAIR_FLOPS,
        }
    }

    /// Output tokens and relevance scores of the never-gated path: plain
    /// encoder, projector on every final position, IFM keeping scores
    /// `≥ eps_i`.
    pub fn reference_tokens(
        &self,
        doc: &LabeledImage,
        instruction: &InstructionSpec,
    ) -> Result<FilterResult> {
        let fc = &mut FlopCounter::disabled();
        let grid = self.encoder.embed_image(&doc.image, fc)?;
        let h = self.encoder.forward_reference(&grid)?;
        let v = self.projector.forward(&h, fc)?;
        let side = self
            .geometry()?
            .stage_grids
            .last()
            .copied()
            .expect("stages");
        let positions: Vec<usize> = (0..v.rows()).collect();
        self.instruction_filter(&v, &positions, side, side, instruction, fc)
    }

    /// IFM training samples: one per (document, region) pair, over the
    /// tokens this pipeline's encoder keeps. Labels mark final-grid cells
    /// touched by the region's relevance mask.
    pub fn ifm_samples(&self, docs: &[LabeledImage]) -> Result<Vec<IfmSample>> {
        let patch = self.encoder.config.patch;
        let mut samples = Vec::new();
        for doc in docs {
            let (out, v) =
                self.encode_document(doc, &mut FlopBreakdown::default(), &mut Timings::default())?;
            if out.kept.is_empty() {
                continue;
            }
            let (rows, cols) = (out.grid.rows, out.grid.cols);
            let g = doc.side() / patch;
            for r in 0..doc.regions.len() {
                let target = instruction_for_region(doc, r, patch)?;
                let pooled = pool_relevance(&target.relevance, g, g / rows)?;
                samples.push(IfmSample {
                    tokens: v.clone(),
                    positions: out.kept.clone(),
                    rows,
                    cols,
                    instruction: target.instruction,
                    labels: out.kept.iter().map(|&i| pooled[i]).collect(),
                });
            }
        }
        Ok(samples)
    }

    /// Trains the IFM on `docs` and installs it.
    pub fn train_ifm(
        &mut self,
        docs: &[LabeledImage],
        cfg: &TrainConfig,
        scope: IfmTrainScope,
    ) -> Result<Vec<f64>> {
        let samples = self.ifm_samples(docs)?;
        let (trained, curve) = train_ifm(&self.ifm, &samples, cfg, scope)?;
        self.ifm = trained;
        self.ifm_trained = true;
        Ok(curve)
    }
}

/// A fresh MLP detector shaped by `section`, trained on `docs`.
pub fn train_mlp_detector(
    section: &DetectorSection,
    patch: usize,
    model_seed: u64,
    docs: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<(DetectorModel, Vec<f64>)> {
    let channels = docs.first().map_or(1, |d| d.image.channels);
    let init = DetectorModel::mlp(
        patch,
        channels,
        section.embed_dim,
        section.hidden,
        derive_seed(model_seed, DETECTOR_STREAM),
    );
    train_detector(&init, docs, cfg)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests;
