//! Inference, average precision, score fusion and the modality-gap diagnostic.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::io::dim_u32;
use crate::encoders::FeatureSet;
use crate::error::{Error, Result};
use crate::model::{self, ClassEmbeddings, HyperParams, PrototypeMatrix};
use crate::numerics;
use crate::scalar::Scalar;
use crate::training::Checkpoint;
use crate::wire::ByteReader;

pub const DEFAULT_FUSION_WEIGHT: f64 = 0.5;
pub const SCORE_MAGIC: &[u8; 4] = b"T2IS";
pub const SCORE_VERSION: u16 = 1;

/// Final class scores of one sample and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Scores samples against a checkpoint. Class embeddings are encoded once.
#[derive(Debug, Clone)]
pub struct Scorer<T> {
    embeddings: ClassEmbeddings<T>,
    prototypes: PrototypeMatrix<T>,
    hyper: HyperParams,
    fusion_weight: T,
}

impl<T: Scalar> Scorer<T> {
    /// `fusion_weight` multiplies the global score `s`; the rest goes to `s̃'`.
    pub fn new(ckpt: &Checkpoint<T>, fusion_weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fusion_weight) {
            return Err(Error::invalid(format!("fusion weight {fusion_weight} outside [0, 1]")));
        }
        Ok(Self {
            embeddings: ckpt.class_embeddings()?,
            prototypes: ckpt.prototype_matrix(),
            hyper: ckpt.hyper,
            fusion_weight: T::lit(fusion_weight),
        })
    }

    pub fn embeddings(&self) -> &ClassEmbeddings<T> {
        &self.embeddings
    }

    pub fn bundle(&self, features: &FeatureSet<T>) -> Result<model::SimilarityBundle<T>> {
        model::forward_branch(features, &self.embeddings, &self.prototypes, &self.hyper)
    }

    pub fn score(&self, features: &FeatureSet<T>) -> Result<Vec<T>> {
        let b = self.bundle(features)?;
        let w = self.fusion_weight;
        Ok(b.s.iter().zip(&b.s_combined).map(|(&g, &l)| w * g + (T::one() - w) * l).collect())
    }

    pub fn score_all(&self, samples: &[FeatureSet<T>]) -> Result<Vec<ScoreRecord>> {
        samples
            .iter()
            .map(|f| {
                let scores = self.score(f)?.into_iter().map(|x| x.to_f64_lossy()).collect();
                Ok(ScoreRecord { scores, labels: f.labels.clone() })
            })
            .collect()
    }
}

/// `0.5·s + 0.5·s̃'` for one sample.
pub fn infer<T: Scalar>(features: &FeatureSet<T>, ckpt: &Checkpoint<T>) -> Result<Vec<T>> {
    Scorer::new(ckpt, DEFAULT_FUSION_WEIGHT)?.score(features)
}

/// All-points average precision of one class. `None` without positives.
///
/// Samples are ranked by descending score; ties keep ascending index order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::shape(labels.len(), scores.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("score {i} is not finite")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / positives as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub name: String,
    pub ap: f64,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub per_class: Vec<ClassAp>,
    /// Classes without positives; they do not enter the mean.
    pub excluded: Vec<String>,
    pub samples: usize,
    pub ap_variant: String,
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn mean_average_precision(records: &[ScoreRecord], class_names: &[String]) -> Result<EvalReport> {
    let c = class_names.len();
    for (i, r) in records.iter().enumerate() {
        if r.scores.len() != c || r.labels.len() != c {
            return Err(Error::Consistency(format!(
                "record {i} has {} scores / {} labels for {c} classes",
                r.scores.len(),
                r.labels.len()
            )));
        }
    }
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for (k, name) in class_names.iter().enumerate() {
        let scores: Vec<f64> = records.iter().map(|r| r.scores[k]).collect();
        let labels: Vec<bool> = records.iter().map(|r| r.labels[k]).collect();
        match average_precision(&scores, &labels)? {
            Some(ap) => per_class.push(ClassAp {
                name: name.clone(),
                ap,
                positives: labels.iter().filter(|&&l| l).count(),
            }),
            None => excluded.push(name.clone()),
        }
    }
    if per_class.is_empty() {
        return Err(Error::DegenerateInput("no class has a positive sample".into()));
    }
    let map = per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport { map, per_class, excluded, samples: records.len(), ap_variant: "all-points".into() })
}

/// Scores every sample and computes mAP over the checkpoint's classes.
pub fn evaluate<T: Scalar>(samples: &[FeatureSet<T>], ckpt: &Checkpoint<T>, fusion_weight: f64) -> Result<EvalReport> {
    let records = Scorer::new(ckpt, fusion_weight)?.score_all(samples)?;
    mean_average_precision(&records, &ckpt.classes)
}

/// Maps to `[0, 1]`; a constant vector maps to zeros.
pub fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| (x - lo) / (hi - lo)).collect()
}

/// `w·norm(a) + (1 − w)·norm(b)` with per-vector min-max normalisation.
pub fn fuse_scores(a: &[f64], b: &[f64], w: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("fusion weight {w} outside [0, 1]")));
    }
    let (na, nb) = (min_max_normalize(a), min_max_normalize(b));
    Ok(na.iter().zip(&nb).map(|(&x, &y)| w * x + (1.0 - w) * y).collect())
}

/// Mean best cosine between a sample and the global embeddings of its true classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityGapReport {
    /// `max_{i∈Y} cos(f^g, G_i)`, averaged over samples.
    pub raw: f64,
    /// `max_{i∈Y} cos(ℋ_i, G_i)` with `ℋ` the attended features, averaged.
    pub attended: f64,
    pub samples: usize,
}

/// Samples without positives are skipped.
pub fn modality_gap_report<T: Scalar>(samples: &[FeatureSet<T>], ckpt: &Checkpoint<T>) -> Result<ModalityGapReport> {
    let scorer = Scorer::new(ckpt, DEFAULT_FUSION_WEIGHT)?;
    let g = &scorer.embeddings().global;
    let (mut raw, mut attended, mut counted) = (0.0, 0.0, 0usize);
    for f in samples {
        let truth = f.label_indices();
        if truth.is_empty() {
            continue;
        }
        let bundle = scorer.bundle(f)?;
        let f_hat = numerics::l2_normalize(&f.global)?;
        let mut best_raw = f64::NEG_INFINITY;
        let mut best_att = f64::NEG_INFINITY;
        for &i in &truth {
            let g_hat = numerics::l2_normalize(g.row(i))?;
            best_raw = best_raw.max(numerics::dot(&f_hat, &g_hat).to_f64_lossy());
            let h_hat = numerics::l2_normalize(bundle.attended.row(i))?;
            best_att = best_att.max(numerics::dot(&h_hat, &g_hat).to_f64_lossy());
        }
        raw += best_raw;
        attended += best_att;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::DegenerateInput("no sample has a positive label".into()));
    }
    Ok(ModalityGapReport { raw: raw / counted as f64, attended: attended / counted as f64, samples: counted })
}

/// Raw scores next to their labels:
///
/// ```text
/// "T2IS" | u16 version=1 | u32 n_samples | u32 C
/// per sample: C × u8 label (0/1) | C × f64 score
/// ```
pub fn write_score_file(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<()> {
    let c = records.first().map_or(0, |r| r.scores.len());
    if let Some(i) = records.iter().position(|r| r.scores.len() != c || r.labels.len() != c) {
        return Err(Error::Consistency(format!("record {i} does not have {c} scores and labels")));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(SCORE_MAGIC)?;
    out.write_all(&SCORE_VERSION.to_le_bytes())?;
    out.write_all(&dim_u32(records.len())?.to_le_bytes())?;
    out.write_all(&dim_u32(c)?.to_le_bytes())?;
    for r in records {
        out.write_all(&r.labels.iter().map(|&l| u8::from(l)).collect::<Vec<_>>())?;
        for s in &r.scores {
            out.write_all(&s.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_score_file(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    r.expect_magic(SCORE_MAGIC)?;
    r.expect_version(SCORE_VERSION)?;
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let mut records = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let mut labels = Vec::with_capacity(c);
        for _ in 0..c {
            let at = r.offset();
            match r.u8()? {
                0 => labels.push(false),
                1 => labels.push(true),
                other => return Err(Error::Format { offset: at, message: format!("label byte {other} is not 0/1") }),
            }
        }
        records.push(ScoreRecord { scores: r.f64s(c)?, labels });
    }
    r.expect_end()?;
    Ok(records)
}
