//! Serialized run report. Counts and FLOPs are integers; every float is
//! written with exactly nine decimals so identical runs give identical bytes.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A float serialized as a fixed nine-decimal JSON number.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct Fixed9(pub f64);

impl Fixed9 {
    pub fn text(self) -> String {
        let s = format!("{:.9}", self.0);
        // "-0.000000000" and "0.000000000" must not differ.
        if s.trim_start_matches('-')
            .bytes()
            .all(|b| b == b'0' || b == b'.')
        {
            s.trim_start_matches('-').to_string()
        } else {
            s
        }
    }
}

impl From<f64> for Fixed9 {
    fn from(v: f64) -> Self {
        Fixed9(v)
    }
}

impl Serialize for Fixed9 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom(format!(
                "non-finite value {}",
                self.0
            )));
        }
        let raw = serde_json::value::RawValue::from_string(self.text())
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Fixed9 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        f64::deserialize(d).map(Fixed9)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub profile: String,
    pub seed: u64,
    pub model_seed: u64,
    pub image_size: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub window: usize,
    pub depths: Vec<usize>,
    pub eps_c: Vec<Fixed9>,
    pub eps_i: Fixed9,
    pub gating: String,
    pub bypass: bool,
    pub detector: String,
    pub ifm_trained: bool,
    pub projector_dim: usize,
    pub context_budget: usize,
    pub decoder_pair_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub target_content_fraction: Fixed9,
    pub mean_content_fraction: Fixed9,
    /// Mean fraction of stage-1 positions without content.
    pub mean_blank_fraction: Fixed9,
}

/// Closed-form token geometry implied by the configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub image_size: usize,
    pub patch: usize,
    pub stage_grids: Vec<usize>,
    pub stage_positions: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub initial_tokens: usize,
    pub final_positions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub eps_c: Fixed9,
    pub positions: usize,
    pub active: usize,
    pub windows_total: usize,
    pub windows_computed: usize,
    pub windows_bypassed: usize,
    pub attention_flops: u64,
    pub ffn_flops: u64,
    pub merge_flops: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub detector: u64,
    pub embed: u64,
    pub attention: u64,
    pub ffn: u64,
    pub merge: u64,
    /// embed + attention + ffn + merge
    pub encoder: u64,
    pub projector: u64,
    pub ifm: u64,
    pub decoder: u64,
    pub total: u64,
}

impl FlopBreakdown {
    pub fn close(&mut self) {
        self.encoder = self.embed + self.attention + self.ffn + self.merge;
        self.total = self.detector + self.encoder + self.projector + self.ifm + self.decoder;
    }

    pub fn add(&mut self, o: &FlopBreakdown) {
        self.detector += o.detector;
        self.embed += o.embed;
        self.attention += o.attention;
        self.ffn += o.ffn;
        self.merge += o.merge;
        self.projector += o.projector;
        self.ifm += o.ifm;
        self.decoder += o.decoder;
        self.close();
    }
}

/// A keep mask on one grid, row-major, `1` = kept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskReport {
    pub rows: usize,
    pub cols: usize,
    pub bits: String,
}

impl MaskReport {
    pub fn new(rows: usize, cols: usize, kept: &[bool]) -> Self {
        Self {
            rows,
            cols,
            bits: kept.iter().map(|&k| if k { '1' } else { '0' }).collect(),
        }
    }

    pub fn kept(&self) -> Vec<bool> {
        self.bits.bytes().map(|b| b == b'1').collect()
    }

    pub fn count(&self) -> usize {
        self.bits.bytes().filter(|&b| b == b'1').count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Masks {
    pub post_stage2: MaskReport,
    pub post_stage4: MaskReport,
    pub post_ifm: MaskReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentReport {
    pub index: usize,
    pub content_fraction: Fixed9,
    pub instruction: Vec<u32>,
    pub initial_tokens: usize,
    pub content_positions: usize,
    pub blank_positions: usize,
    /// Blank stage-1 positions whose final-stage cell was dropped.
    pub blank_dropped: usize,
    pub content_dropped: usize,
    pub encoder_kept: usize,
    pub kept_final: usize,
    pub sequence_length: usize,
    pub context_fit: bool,
    pub stages: Vec<StageReport>,
    pub flops: FlopBreakdown,
    pub masks: Masks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub documents: usize,
    pub initial_tokens: usize,
    pub blank_positions: usize,
    pub blank_dropped: usize,
    pub blank_dropped_fraction: Fixed9,
    pub content_dropped: usize,
    pub encoder_kept: usize,
    pub kept_final: usize,
    pub all_fit_context: bool,
    pub flops: FlopBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: ConfigEcho,
    pub corpus: CorpusStats,
    pub geometry: Geometry,
    pub documents: Vec<DocumentReport>,
    pub totals: Totals,
}

impl RunReport {
    pub fn to_json(&self) -> crate::Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One CSV row per document.
    pub fn to_csv(&self) -> crate::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for d in &self.documents {
            w.serialize(DocumentRow {
                index: d.index,
                content_fraction: d.content_fraction.text(),
                initial_tokens: d.initial_tokens,
                blank_positions: d.blank_positions,
                blank_dropped: d.blank_dropped,
                encoder_kept: d.encoder_kept,
                kept_final: d.kept_final,
                sequence_length: d.sequence_length,
                context_fit: d.context_fit,
                encoder_flops: d.flops.encoder,
                projector_flops: d.flops.projector,
                ifm_flops: d.flops.ifm,
                decoder_flops: d.flops.decoder,
                total_flops: d.flops.total,
            })
            .map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| crate::Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Recomputes derived fields and reports every inconsistency found.
    pub fn check_consistency(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let g = &self.geometry;
        if g.initial_tokens != (g.image_size / g.patch).pow(2) {
            problems.push("initial token count does not match image/patch".into());
        }
        for w in g.stage_positions.windows(2) {
            if w[1] * 4 != w[0] {
                problems.push(format!("merge does not divide positions by 4: {w:?}"));
            }
        }
        let mut sum = FlopBreakdown::default();
        for d in &self.documents {
            let tag = format!("document {}", d.index);
            if d.initial_tokens != g.initial_tokens
                || d.stages.first().map(|s| s.positions) != Some(g.initial_tokens)
            {
                problems.push(format!("{tag}: stage-1 count differs from geometry"));
            }
            if !(d.kept_final <= d.encoder_kept && d.encoder_kept <= g.final_positions) {
                problems.push(format!("{tag}: kept counts not nested"));
            }
            if d.sequence_length != d.kept_final + d.instruction.len() {
                problems.push(format!("{tag}: sequence length"));
            }
            if d.context_fit != (d.sequence_length <= self.config.context_budget) {
                problems.push(format!("{tag}: context_fit flag"));
            }
            let att: u64 = d.stages.iter().map(|s| s.attention_flops).sum();
            let ffn: u64 = d.stages.iter().map(|s| s.ffn_flops).sum();
            let merge: u64 = d.stages.iter().map(|s| s.merge_flops).sum();
            if (att, ffn, merge) != (d.flops.attention, d.flops.ffn, d.flops.merge) {
                problems.push(format!("{tag}: per-stage FLOPs do not sum"));
            }
            let mut f = d.flops;
            f.close();
            if f != d.flops {
                problems.push(format!("{tag}: FLOP totals do not close"));
            }
            if d.flops.decoder != self.config.decoder_pair_flops * (d.sequence_length as u64).pow(2)
            {
                problems.push(format!("{tag}: decoder cost"));
            }
            if d.masks.post_stage4.count() != d.encoder_kept
                || d.masks.post_ifm.count() != d.kept_final
            {
                problems.push(format!("{tag}: masks disagree with counts"));
            }
            sum.add(&d.flops);
        }
        if sum != self.totals.flops {
            problems.push("document FLOPs do not sum to totals".into());
        }
        problems
    }
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Config(format!("csv: {e}"))
}

#[derive(Serialize)]
struct DocumentRow {
    index: usize,
    content_fraction: String,
    initial_tokens: usize,
    blank_positions: usize,
    blank_dropped: usize,
    encoder_kept: usize,
    kept_final: usize,
    sequence_length: usize,
    context_fit: bool,
    encoder_flops: u64,
    projector_flops: u64,
    ifm_flops: u64,
    decoder_flops: u64,
    total_flops: u64,
}

/// Wall-clock milliseconds per phase; kept out of [`RunReport`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub detect_ms: f64,
    pub encode_ms: f64,
    pub project_ms: f64,
    pub ifm_ms: f64,
    pub total_ms: f64,
}
