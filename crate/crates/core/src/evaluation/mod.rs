//! Scoring candidate transformations against landmarks or the posterior.

mod maps;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::stats::spearman;
pub use maps::{
    blend_alpha, blended_map, colormap, entropy_map, error_heat_map, mahalanobis_score,
    BlendedImage,
};

use crate::annotation::Annotation;
use crate::error::{check_dim, Error, Result};
use crate::field::TransformField;
use crate::gp::GpSession;
use crate::kernels::distance;

/// Summary norm over per-target error magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PNorm {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "inf")]
    Inf,
}

impl fmt::Display for PNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PNorm::One => "1",
            PNorm::Two => "2",
            PNorm::Inf => "inf",
        })
    }
}

impl FromStr for PNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(PNorm::One),
            "2" => Ok(PNorm::Two),
            "inf" | "max" => Ok(PNorm::Inf),
            other => Err(Error::Validation(format!("unknown norm {other:?} (expected 1, 2 or inf)"))),
        }
    }
}

/// `((1/n) Σ e_i^p)^{1/p}`, or `max e_i` for `p = ∞`.
pub fn p_norm_of_errors(errors: &[f64], p: PNorm) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InsufficientData("no target locations to score".into()));
    }
    let n = errors.len() as f64;
    Ok(match p {
        PNorm::One => errors.iter().sum::<f64>() / n,
        PNorm::Two => (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        PNorm::Inf => errors.iter().copied().fold(0.0, f64::max),
    })
}

/// All three summaries of one error set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub s1: f64,
    pub s2: f64,
    pub sinf: f64,
}

impl ScoreSet {
    pub fn from_errors(errors: &[f64]) -> Result<Self> {
        Ok(Self {
            s1: p_norm_of_errors(errors, PNorm::One)?,
            s2: p_norm_of_errors(errors, PNorm::Two)?,
            sinf: p_norm_of_errors(errors, PNorm::Inf)?,
        })
    }

    pub fn get(&self, p: PNorm) -> f64 {
        match p {
            PNorm::One => self.s1,
            PNorm::Two => self.s2,
            PNorm::Inf => self.sinf,
        }
    }
}

/// Distances `‖φ̂(x) − ref(x)‖` over `targets`.
pub fn target_errors<R>(phi_hat: &TransformField, reference: R, targets: &[Vec<f64>]) -> Result<Vec<f64>>
where
    R: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    targets
        .par_iter()
        .map(|x| {
            check_dim(phi_hat.dimension(), x.len())?;
            let est = phi_hat.eval(x)?;
            let truth = reference(x)?;
            Ok(distance(&est, &truth))
        })
        .collect()
}

/// Error of `φ̂` against an arbitrary reference mapping on `targets`.
pub fn p_norm_error<R>(phi_hat: &TransformField, reference: R, targets: &[Vec<f64>], p: PNorm) -> Result<f64>
where
    R: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    p_norm_of_errors(&target_errors(phi_hat, reference, targets)?, p)
}

/// Distances `‖φ̂(x_l) − y_l‖` over the annotations.
pub fn landmark_errors(phi_hat: &TransformField, annotations: &[Annotation]) -> Result<Vec<f64>> {
    annotations
        .iter()
        .map(|a| {
            check_dim(phi_hat.dimension(), a.dimension())?;
            Ok(distance(&phi_hat.eval(&a.x)?, &a.y))
        })
        .collect()
}

/// Classical landmark score, treating each `y_l` as exact.
pub fn landmark_score(phi_hat: &TransformField, annotations: &[Annotation], p: PNorm) -> Result<f64> {
    if annotations.is_empty() {
        return Err(Error::InsufficientData("no annotations to score against".into()));
    }
    p_norm_of_errors(&landmark_errors(phi_hat, annotations)?, p)
}

pub fn landmark_scores(phi_hat: &TransformField, annotations: &[Annotation]) -> Result<ScoreSet> {
    if annotations.is_empty() {
        return Err(Error::InsufficientData("no annotations to score against".into()));
    }
    ScoreSet::from_errors(&landmark_errors(phi_hat, annotations)?)
}

/// Score against the posterior mean `μ_{|A}` on `targets`.
pub fn proposed_score(phi_hat: &TransformField, session: &GpSession, targets: &[Vec<f64>], p: PNorm) -> Result<f64> {
    p_norm_error(phi_hat, |x| session.posterior_mean(x), targets, p)
}

pub fn proposed_scores(phi_hat: &TransformField, session: &GpSession, targets: &[Vec<f64>]) -> Result<ScoreSet> {
    ScoreSet::from_errors(&target_errors(phi_hat, |x| session.posterior_mean(x), targets)?)
}

/// `E‖φ(T) − φ̂(T)‖² = Σ‖μ_{|A} − φ̂‖² + Σ tr k_{|A}(x, x)` under the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Decomposition {
    pub expected_sq: f64,
    pub mean_term: f64,
    pub trace_term: f64,
}

pub fn expected_l2_decomposition(
    phi_hat: &TransformField,
    session: &GpSession,
    targets: &[Vec<f64>],
) -> Result<L2Decomposition> {
    let parts: Vec<(f64, f64)> = targets
        .par_iter()
        .map(|x| {
            let post = session.posterior_at(x)?;
            let est = phi_hat.eval(x)?;
            let sq = distance(&est, &post.mean).powi(2);
            Ok((sq, post.cov.trace()))
        })
        .collect::<Result<_>>()?;
    let mean_term: f64 = parts.iter().map(|p| p.0).sum();
    let trace_term: f64 = parts.iter().map(|p| p.1).sum();
    Ok(L2Decomposition {
        expected_sq: mean_term + trace_term,
        mean_term,
        trace_term,
    })
}

/// 1-based ranks, smallest value first; ties keep input order.
pub fn ranks_ascending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    Landmark,
    Proposed,
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMethod::Landmark => "landmark",
            ScoreMethod::Proposed => "proposed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub candidate_id: String,
    pub s1: f64,
    pub s2: f64,
    pub sinf: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub method: ScoreMethod,
    pub rank_by: PNorm,
    pub rows: Vec<ScoreRow>,
}

impl ScoreReport {
    pub fn new(method: ScoreMethod, ids: Vec<String>, scores: &[ScoreSet], rank_by: PNorm) -> Result<Self> {
        check_dim(ids.len(), scores.len())?;
        let key: Vec<f64> = scores.iter().map(|s| s.get(rank_by)).collect();
        let ranks = ranks_ascending(&key);
        let rows = ids
            .into_iter()
            .zip(scores)
            .zip(ranks)
            .map(|((candidate_id, s), rank)| ScoreRow {
                candidate_id,
                s1: s.s1,
                s2: s.s2,
                sinf: s.sinf,
                rank,
            })
            .collect();
        Ok(Self { method, rank_by, rows })
    }

    /// CSV with columns `candidate_id,s1,s2,sinf,rank`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["candidate_id", "s1", "s2", "sinf", "rank"])?;
        for r in &self.rows {
            out.write_record([
                r.candidate_id.clone(),
                r.s1.to_string(),
                r.s2.to_string(),
                r.sinf.to_string(),
                r.rank.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
