//! Content detector, threshold binarization and detector training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{flatten_patches, labels_to_probs, PatchEmbed, ProbabilityMap};
use crate::synthdoc::{ImageTensor, LabeledImage};
use crate::tensor::mlp::{train_binary, TrainConfig};
use crate::tensor::ops::{linear, FlopCounter};
use crate::tensor::{Matrix, Mlp2, Rng};
use crate::weights::{ValueReader, WeightFile, WeightKind};

/// Per-stage content thresholds plus the instruction threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSchedule {
    pub eps_c: Vec<f64>,
    pub eps_i: f64,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self {
            eps_c: vec![0.25, 0.25, 0.5, 0.5],
            eps_i: 0.5,
        }
    }
}

impl ThresholdSchedule {
    pub fn zero(stages: usize) -> Self {
        Self {
            eps_c: vec![0.0; stages],
            eps_i: 0.0,
        }
    }

    /// Same content threshold at every stage.
    pub fn uniform(stages: usize, eps_c: f64, eps_i: f64) -> Self {
        Self {
            eps_c: vec![eps_c; stages],
            eps_i,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.eps_c.iter().all(|&e| in_unit(e)) || !in_unit(self.eps_i) {
            return Err(Error::Config(format!(
                "thresholds must lie in [0,1]: {self:?}"
            )));
        }
        if self.eps_c.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "content thresholds must be non-decreasing across stages: {:?}",
                self.eps_c
            )));
        }
        Ok(())
    }
}

/// `p_i ← 1` if `p_i ≥ eps`, else 0. The boundary value is kept.
pub fn binarize(p: &ProbabilityMap, eps: f64) -> ProbabilityMap {
    if p.is_binarized() && eps > 0.0 {
        // Binary maps are fixed points for any eps in (0, 1].
        return p.clone();
    }
    ProbabilityMap::binary_unchecked(
        p.values()
            .iter()
            .map(|&v| if v >= eps { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// What the detector looks at: a bare raster, or one with ground truth.
#[derive(Clone, Copy, Debug)]
pub enum DetectorInput<'a> {
    Image(&'a ImageTensor),
    Labeled(&'a LabeledImage),
}

impl<'a> DetectorInput<'a> {
    fn image(&self) -> &'a ImageTensor {
        match self {
            DetectorInput::Image(i) => i,
            DetectorInput::Labeled(l) => &l.image,
        }
    }
}

/// MLP variant: a detector-private patch embedding (frozen at its seeded
/// init) followed by a trainable two-layer classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDetector {
    pub embed: PatchEmbed,
    pub classifier: Mlp2,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DetectorModel {
    /// Returns the ground-truth patch labels.
    Oracle {
        patch: usize,
    },
    Mlp(MlpDetector),
}

impl DetectorModel {
    pub fn oracle(patch: usize) -> Self {
        DetectorModel::Oracle { patch }
    }

    pub fn mlp(patch: usize, channels: usize, embed_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let embed = PatchEmbed::new(patch, channels, embed_dim, &mut rng);
        let classifier = Mlp2::new(embed_dim, hidden, 1, &mut rng);
        DetectorModel::Mlp(MlpDetector { embed, classifier })
    }

    pub fn patch(&self) -> usize {
        match self {
            DetectorModel::Oracle { patch } => *patch,
            DetectorModel::Mlp(m) => m.embed.patch,
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            DetectorModel::Oracle { .. } => "oracle",
            DetectorModel::Mlp(_) => "mlp",
        }
    }

    /// One raw content probability per patch token, row-major.
    pub fn detect(&self, input: DetectorInput<'_>, fc: &mut FlopCounter) -> Result<ProbabilityMap> {
        match self {
            DetectorModel::Oracle { patch } => match input {
                DetectorInput::Labeled(doc) => labels_to_probs(doc, *patch),
                DetectorInput::Image(_) => Err(Error::MissingLabels),
            },
            DetectorModel::Mlp(m) => {
                let feats = m.features(input.image(), fc)?;
                ProbabilityMap::new(m.classifier.predict_proba(&feats, fc)?)
            }
        }
    }

    pub fn to_weight_file(&self) -> Result<WeightFile> {
        let DetectorModel::Mlp(m) = self else {
            return Err(Error::Config("the oracle detector has no weights".into()));
        };
        let mut values = Vec::new();
        values.extend_from_slice(m.embed.weight.data());
        values.extend_from_slice(&m.embed.bias);
        values.extend(m.classifier.flat_params());
        Ok(WeightFile {
            kind: WeightKind::Detector,
            dims: [
                m.embed.patch,
                m.embed.channels,
                m.embed.dim(),
                m.classifier.hidden_dim(),
            ]
            .iter()
            .map(|&d| d as u32)
            .collect(),
            values,
        })
    }

    /// Weight order: embed weight (fan_in × dim, row-major), embed bias,
    /// then classifier w1, b1, w2, b2. Dims: `[patch, channels, dim, hidden]`.
    pub fn from_weight_file(f: &WeightFile) -> Result<Self> {
        f.expect_kind(WeightKind::Detector)?;
        let [patch, channels, dim, hidden] = <[u32; 4]>::try_from(f.dims.as_slice())
            .map_err(|_| Error::WeightFormat(format!("detector expects 4 dims, got {:?}", f.dims)))?
            .map(|d| d as usize);
        let fan_in = patch * patch * channels;
        let mut r = ValueReader::new(&f.values);
        let embed = PatchEmbed {
            patch,
            channels,
            weight: Matrix::from_vec(fan_in, dim, r.take(fan_in * dim)?)?,
            bias: r.take(dim)?,
        };
        let mut classifier = Mlp2::zeros(dim, hidden, 1);
        classifier.set_flat_params(&r.take(classifier.param_count())?)?;
        r.finish()?;
        Ok(DetectorModel::Mlp(MlpDetector { embed, classifier }))
    }
}

impl MlpDetector {
    pub fn features(&self, img: &ImageTensor, fc: &mut FlopCounter) -> Result<Matrix> {
        let (patches, _) = flatten_patches(img, self.embed.patch)?;
        linear(&patches, &self.embed.weight, &self.embed.bias, fc)
    }
}

/// Trains the MLP detector's classifier on patch labels. Returns the trained
/// model and the loss curve (initial loss first).
pub fn train_detector(
    model: &DetectorModel,
    corpus: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<(DetectorModel, Vec<f64>)> {
    let DetectorModel::Mlp(m) = model else {
        return Err(Error::Config("only the mlp detector can be trained".into()));
    };
    if corpus.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let mut feats: Option<Matrix> = None;
    let mut labels = Vec::new();
    for doc in corpus {
        let f = m.features(&doc.image, &mut FlopCounter::disabled())?;
        labels.extend(
            doc.patch_labels(m.embed.patch)?
                .into_iter()
                .map(|b| if b { 1.0 } else { 0.0 }),
        );
        feats = Some(match feats {
            None => f,
            Some(acc) => Matrix::vstack(&acc, &f)?,
        });
    }
    let feats = feats.expect("non-empty corpus");
    let mut trained = m.clone();
    let curve = train_binary(&mut trained.classifier, &feats, &labels, cfg)?;
    Ok((DetectorModel::Mlp(trained), curve))
}

/// Fraction of content patches whose detector probability reaches `eps`.
pub fn detector_recall(model: &DetectorModel, docs: &[LabeledImage], eps: f64) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for doc in docs {
        let p = model.detect(
            DetectorInput::Image(&doc.image),
            &mut FlopCounter::disabled(),
        )?;
        for (v, l) in p.values().iter().zip(doc.patch_labels(model.patch())?) {
            if l {
                total += 1;
                hit += (*v >= eps) as usize;
            }
        }
    }
    Ok(if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    })
}
