//! Threshold sweeps over uniform content thresholds and the IFM threshold.

use serde::Serialize;

use super::{Fixed9, Pipeline, RunReport};
use crate::error::Result;
use crate::synthdoc::Corpus;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub eps_c: f64,
    pub eps_i: f64,
    pub encoder_flops: u64,
    pub projector_flops: u64,
    pub ifm_flops: u64,
    pub decoder_flops: u64,
    pub total_flops: u64,
    pub encoder_kept: usize,
    pub kept_final: usize,
    pub blank_dropped_fraction: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<RunReport>,
    /// Settings whose run failed, with the error text.
    pub failures: Vec<((f64, f64), String)>,
    /// Pairs along one threshold axis where compute or kept counts grew.
    pub violations: Vec<String>,
}

impl SweepResult {
    pub fn summary_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row {
            eps_c: String,
            eps_i: String,
            encoder_flops: u64,
            projector_flops: u64,
            ifm_flops: u64,
            decoder_flops: u64,
            total_flops: u64,
            encoder_kept: usize,
            kept_final: usize,
            blank_dropped_fraction: String,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(Row {
                eps_c: Fixed9(r.eps_c).text(),
                eps_i: Fixed9(r.eps_i).text(),
                encoder_flops: r.encoder_flops,
                projector_flops: r.projector_flops,
                ifm_flops: r.ifm_flops,
                decoder_flops: r.decoder_flops,
                total_flops: r.total_flops,
                encoder_kept: r.encoder_kept,
                kept_final: r.kept_final,
                blank_dropped_fraction: Fixed9(r.blank_dropped_fraction).text(),
            })
            .map_err(|e| crate::Error::Config(format!("csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| crate::Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Runs `pipeline` on `corpus` once per `(eps_c, eps_i)` setting, `eps_c`
/// applied at every stage. A failing setting is recorded and the sweep
/// continues.
pub fn sweep(pipeline: &Pipeline, corpus: &Corpus, settings: &[(f64, f64)]) -> Result<SweepResult> {
    let stages = pipeline.encoder.config.stages.len();
    let mut out = SweepResult::default();
    for &(eps_c, eps_i) in settings {
        let run = pipeline
            .with_thresholds(vec![eps_c; stages], eps_i)
            .and_then(|p| p.run(corpus));
        match run {
            Ok((report, _)) => {
                let f = report.totals.flops;
                out.rows.push(SweepRow {
                    eps_c,
                    eps_i,
                    encoder_flops: f.encoder,
                    projector_flops: f.projector,
                    ifm_flops: f.ifm,
                    decoder_flops: f.decoder,
                    total_flops: f.total,
                    encoder_kept: report.totals.encoder_kept,
                    kept_final: report.totals.kept_final,
                    blank_dropped_fraction: report.totals.blank_dropped_fraction.0,
                });
                out.reports.push(report);
            }
            Err(e) => out.failures.push(((eps_c, eps_i), e.to_string())),
        }
    }
    out.violations = monotonicity_violations(&out.rows);
    Ok(out)
}

/// Along each axis (the other coordinate fixed), FLOPs and kept counts must
/// not increase as the threshold rises.
pub fn monotonicity_violations(rows: &[SweepRow]) -> Vec<String> {
    let mut v = Vec::new();
    for a in rows {
        for b in rows {
            let same_i = a.eps_i == b.eps_i && a.eps_c < b.eps_c;
            let same_c = a.eps_c == b.eps_c && a.eps_i < b.eps_i;
            if !(same_i || same_c) {
                continue;
            }
            let checks = [
                ("total_flops", a.total_flops, b.total_flops),
                ("encoder_kept", a.encoder_kept as u64, b.encoder_kept as u64),
                ("kept_final", a.kept_final as u64, b.kept_final as u64),
            ];
            for (name, lo, hi) in checks {
                if hi > lo {
                    v.push(format!(
                        "{name} rises from {lo} at ({}, {}) to {hi} at ({}, {})",
                        a.eps_c, a.eps_i, b.eps_c, b.eps_i
                    ));
                }
            }
        }
    }
    v
}
