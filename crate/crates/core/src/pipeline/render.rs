//! Mask images: one PBM per pruning point per document, white = kept.

use std::path::{Path, PathBuf};

use super::RunReport;
use crate::error::Result;
use crate::pnm::{pbm_bytes, write_file};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskFiles {
    pub document: usize,
    pub post_stage2: PathBuf,
    pub post_stage4: PathBuf,
    pub post_ifm: PathBuf,
}

/// Writes `doc<i>_stage2.pbm`, `doc<i>_stage4.pbm` and `doc<i>_ifm.pbm` into
/// `dir`. A file that cannot be written is reported with its path.
pub fn render_masks(report: &RunReport, dir: &Path) -> Result<Vec<MaskFiles>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::file(dir, e))?;
    let mut out = Vec::with_capacity(report.documents.len());
    for d in &report.documents {
        let path = |tag: &str| dir.join(format!("doc{:03}_{tag}.pbm", d.index));
        let files = MaskFiles {
            document: d.index,
            post_stage2: path("stage2"),
            post_stage4: path("stage4"),
            post_ifm: path("ifm"),
        };
        for (mask, p) in [
            (&d.masks.post_stage2, &files.post_stage2),
            (&d.masks.post_stage4, &files.post_stage4),
            (&d.masks.post_ifm, &files.post_ifm),
        ] {
            write_file(p, &pbm_bytes(mask.rows, mask.cols, &mask.kept())?)?;
        }
        out.push(files);
    }
    Ok(out)
}
