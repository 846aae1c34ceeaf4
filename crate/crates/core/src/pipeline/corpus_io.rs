//! On-disk corpus: a JSON manifest of page layouts plus a PGM preview per
//! page. Pages are regenerated from their layouts, so the previews are for
//! viewing only.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SCHEMA_VERSION;
use crate::error::{Error, Result};
use crate::pnm::{pgm_bytes, write_file};
use crate::synthdoc::{generate, Corpus, LayoutSpec};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub layout: LayoutSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub content_fraction: f64,
    pub image_size: usize,
    pub documents: Vec<ManifestEntry>,
}

/// Writes the manifest and `doc<i>.pgm` previews into `dir`.
pub fn write_corpus(
    corpus: &Corpus,
    seed: u64,
    content_fraction: f64,
    dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut documents = Vec::with_capacity(corpus.docs.len());
    for (i, (doc, spec)) in corpus.docs.iter().zip(&corpus.specs).enumerate() {
        let image = format!("doc{i:03}.pgm");
        write_file(&dir.join(&image), &pgm_bytes(&doc.image))?;
        documents.push(ManifestEntry {
            image,
            layout: spec.clone(),
        });
    }
    let manifest = CorpusManifest {
        schema_version: SCHEMA_VERSION,
        seed,
        content_fraction,
        image_size: corpus.docs.first().map_or(0, |d| d.side()),
        documents,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok(path)
}

/// Reads a manifest written by [`write_corpus`] and regenerates its pages.
pub fn read_corpus(dir: &Path) -> Result<(CorpusManifest, Corpus)> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{}: schema version {} (expected {SCHEMA_VERSION})",
            path.display(),
            manifest.schema_version
        )));
    }
    if manifest.documents.is_empty() {
        return Err(Error::Config(format!("{}: no documents", path.display())));
    }
    let specs: Vec<LayoutSpec> = manifest
        .documents
        .iter()
        .map(|d| d.layout.clone())
        .collect();
    let docs = specs.iter().map(generate).collect::<Result<Vec<_>>>()?;
    Ok((manifest, Corpus { specs, docs }))
}
