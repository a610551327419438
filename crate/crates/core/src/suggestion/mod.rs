//! Choosing the next location to annotate.
//!
//! The entropy strategy scores each candidate `x` by the entropy it would
//! remove from the targets if annotated perfectly:
//!
//! * `x ∈ T`: `ΔH(x) = H(φ(x) | A)`
//! * `x ∉ T`: `ΔH(x) = H(φ(x) | A) − H(φ(x) | φ_T, A)`
//!
//! so that `H(φ_{T∖x} | A, φ(x)) = H(φ_T | A) − ΔH(x)`.

mod harris;
mod protocol;

use std::borrow::Cow;
use std::collections::HashSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use harris::{detect_candidates, HarrisOptions};
pub use protocol::{
    run_protocol, write_trace_csv, AnnotatorResult, ProtocolOptions, ProtocolOutcome, Strategy,
    TraceRow,
};

use crate::error::{check_dim, Error, Result};
use crate::gp::{GpSession, HALF_LN_2PI_E};
use crate::kernels::distance;

fn bit_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

fn check_distinct(points: &[Vec<f64>], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(points.len());
    for p in points {
        if !seen.insert(bit_key(p)) {
            return Err(Error::Validation(format!("duplicate {what} point {p:?}")));
        }
    }
    Ok(())
}

fn check_dims(points: &[Vec<f64>]) -> Result<()> {
    if let Some(first) = points.first() {
        if !(2..=3).contains(&first.len()) {
            return Err(Error::Validation(format!("points must be 2-D or 3-D, got {}", first.len())));
        }
        for p in points {
            check_dim(first.len(), p.len())?;
        }
    }
    Ok(())
}

/// Locations where registration accuracy matters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTargetSet")]
pub struct TargetSet {
    pub points: Vec<Vec<f64>>,
    pub label: String,
    #[serde(skip)]
    keys: HashSet<Vec<u64>>,
}

#[derive(Deserialize)]
struct RawTargetSet {
    points: Vec<Vec<f64>>,
    #[serde(default)]
    label: String,
}

impl TryFrom<RawTargetSet> for TargetSet {
    type Error = Error;

    fn try_from(raw: RawTargetSet) -> Result<Self> {
        TargetSet::new(raw.points, raw.label)
    }
}

impl TargetSet {
    pub fn new(points: Vec<Vec<f64>>, label: impl Into<String>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InsufficientData("target set must not be empty".into()));
        }
        check_dims(&points)?;
        check_distinct(&points, "target")?;
        let keys = points.iter().map(|p| bit_key(p)).collect();
        Ok(Self {
            points,
            label: label.into(),
            keys,
        })
    }

    /// Exact coordinate membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.keys.contains(&bit_key(x))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Locations eligible for annotation, each consumed at most once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub points: Vec<Vec<f64>>,
    pub annotated_mask: Vec<bool>,
}

impl CandidateSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        check_dims(&points)?;
        check_distinct(&points, "candidate")?;
        let annotated_mask = vec![false; points.len()];
        Ok(Self { points, annotated_mask })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_consumed(&self, index: usize) -> bool {
        self.annotated_mask[index]
    }

    pub fn consume(&mut self, index: usize) -> Result<()> {
        if index >= self.points.len() {
            return Err(Error::Validation(format!("candidate index {index} out of range")));
        }
        if self.annotated_mask[index] {
            return Err(Error::Validation(format!("candidate {index} already consumed")));
        }
        self.annotated_mask[index] = true;
        Ok(())
    }

    pub fn available(&self) -> Vec<usize> {
        (0..self.points.len()).filter(|&i| !self.annotated_mask[i]).collect()
    }

    pub fn remaining(&self) -> usize {
        self.annotated_mask.iter().filter(|c| !**c).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuggestionScore {
    pub index: usize,
    pub delta_h: f64,
}

/// A chosen candidate. `delta_h` is set by the entropy strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub index: usize,
    pub point: Vec<f64>,
    pub delta_h: Option<f64>,
}

/// Returns `session` itself when its target cache already covers `targets`,
/// otherwise a copy with the cache built.
fn with_target_cache<'a>(session: &'a GpSession, targets: &TargetSet) -> Result<Cow<'a, GpSession>> {
    if session.attached_targets() == Some(targets.points.as_slice()) {
        return Ok(Cow::Borrowed(session));
    }
    let mut owned = session.clone();
    owned.attach_targets(&targets.points)?;
    Ok(Cow::Owned(owned))
}

fn delta_h_prepared(session: &GpSession, x: &[f64], targets: &TargetSet) -> Result<f64> {
    let own = session.log_det_conditional(x)?;
    let value = if targets.contains(x) {
        session.dimension() as f64 * HALF_LN_2PI_E + own
    } else {
        own - session.log_det_conditional_on_targets(x)?
    };
    if !value.is_finite() {
        return Err(Error::Degenerate(format!("non-finite entropy score at {x:?}")));
    }
    Ok(value)
}

/// Entropy reduction on `targets` from a perfect annotation at `x`.
pub fn delta_h(session: &GpSession, x: &[f64], targets: &TargetSet) -> Result<f64> {
    check_dim(session.dimension(), x.len())?;
    if targets.contains(x) {
        return delta_h_prepared(session, x, targets);
    }
    let prepared = with_target_cache(session, targets)?;
    delta_h_prepared(&prepared, x, targets)
}

/// ΔH for every unconsumed candidate, in candidate order.
pub fn score_candidates(
    session: &GpSession,
    candidates: &CandidateSet,
    targets: &TargetSet,
) -> Result<Vec<SuggestionScore>> {
    let available = candidates.available();
    let needs_cache = available.iter().any(|&i| !targets.contains(&candidates.points[i]));
    let prepared = if needs_cache {
        with_target_cache(session, targets)?
    } else {
        Cow::Borrowed(session)
    };
    available
        .par_iter()
        .map(|&i| {
            Ok(SuggestionScore {
                index: i,
                delta_h: delta_h_prepared(&prepared, &candidates.points[i], targets)?,
            })
        })
        .collect()
}

/// Index of the largest score; ties go to the lowest index.
fn argmax(scores: &[SuggestionScore]) -> Option<SuggestionScore> {
    scores.iter().copied().fold(None, |best, s| match best {
        Some(b) if b.delta_h > s.delta_h || (b.delta_h == s.delta_h && b.index < s.index) => Some(b),
        _ => Some(s),
    })
}

/// Greedy entropy query: the unconsumed candidate with the largest ΔH.
pub fn suggest_next_entropy(
    session: &GpSession,
    candidates: &CandidateSet,
    targets: &TargetSet,
) -> Result<Suggestion> {
    let scores = score_candidates(session, candidates, targets)?;
    let best = argmax(&scores).ok_or(Error::EmptyPool)?;
    Ok(Suggestion {
        index: best.index,
        point: candidates.points[best.index].clone(),
        delta_h: Some(best.delta_h),
    })
}

fn uniform_pick(candidates: &CandidateSet, seed: u64) -> Result<Suggestion> {
    let available = candidates.available();
    if available.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = available[rng.random_range(0..available.len())];
    Ok(Suggestion {
        index,
        point: candidates.points[index].clone(),
        delta_h: None,
    })
}

/// Farthest-point query: the candidate maximizing the distance to the
/// nearest annotated location, or a seeded uniform pick when none exist.
pub fn suggest_next_heuristic(
    annotated: &[Vec<f64>],
    candidates: &CandidateSet,
    seed: u64,
) -> Result<Suggestion> {
    if annotated.is_empty() {
        return uniform_pick(candidates, seed);
    }
    let mut best: Option<(usize, f64)> = None;
    for i in candidates.available() {
        let p = &candidates.points[i];
        let nearest = annotated
            .iter()
            .map(|a| distance(a, p))
            .fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(_, b)| nearest > b) {
            best = Some((i, nearest));
        }
    }
    let (index, _) = best.ok_or(Error::EmptyPool)?;
    Ok(Suggestion {
        index,
        point: candidates.points[index].clone(),
        delta_h: None,
    })
}

/// Seeded uniform query over unconsumed candidates.
pub fn suggest_next_random(candidates: &CandidateSet, seed: u64) -> Result<Suggestion> {
    uniform_pick(candidates, seed)
}

/// Seed for the `iteration`-th query of a protocol started with `seed`.
pub fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::Annotation;
    use crate::kernels::{BasisKind, KernelSpec};
    use approx::assert_relative_eq;

    fn spec() -> KernelSpec {
        KernelSpec::ladder(BasisKind::Wendland1, 10.0, 3, vec![4.0, 2.0, 1.0], 2).unwrap()
    }

    #[test]
    fn prior_delta_h_in_target() {
        let sigma2 = 3.0;
        let s = GpSession::new(KernelSpec::new(BasisKind::Gaussian, vec![10.0], vec![sigma2], 2).unwrap());
        let t = TargetSet::new(vec![vec![0.0, 0.0]], "t").unwrap();
        let dh = delta_h(&s, &[0.0, 0.0], &t).unwrap();
        let expected = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + sigma2.ln();
        assert_relative_eq!(dh, expected, epsilon = 1e-12);
    }

    #[test]
    fn far_from_annotations_keeps_prior_score() {
        let mut s = GpSession::new(spec());
        let t = TargetSet::new(vec![vec![100.0, 100.0], vec![0.0, 0.0]], "t").unwrap();
        let before = delta_h(&s, &[100.0, 100.0], &t).unwrap();
        s.add_annotation(Annotation::isotropic(vec![0.0, 1.0], vec![0.0, 1.0], 1.0).unwrap()).unwrap();
        assert_eq!(delta_h(&s, &[100.0, 100.0], &t).unwrap(), before);
    }

    #[test]
    fn sets_reject_duplicates_and_empty_targets() {
        assert!(TargetSet::new(vec![], "").is_err());
        assert!(TargetSet::new(vec![vec![1.0, 1.0], vec![1.0, 1.0]], "").is_err());
        assert!(CandidateSet::new(vec![vec![1.0, 1.0], vec![1.0, 1.0]]).is_err());
    }

    #[test]
    fn single_candidate_is_returned() {
        let s = GpSession::new(spec());
        let mut c = CandidateSet::new(vec![vec![1.0, 1.0], vec![5.0, 5.0]]).unwrap();
        c.consume(0).unwrap();
        let t = TargetSet::new(vec![vec![3.0, 3.0]], "").unwrap();
        assert_eq!(suggest_next_entropy(&s, &c, &t).unwrap().index, 1);
        assert_eq!(suggest_next_heuristic(&[], &c, 3).unwrap().index, 1);
        assert_eq!(suggest_next_random(&c, 3).unwrap().index, 1);
        c.consume(1).unwrap();
        assert!(matches!(suggest_next_entropy(&s, &c, &t), Err(Error::EmptyPool)));
        assert!(matches!(suggest_next_random(&c, 0), Err(Error::EmptyPool)));
    }

    #[test]
    fn symmetric_tie_goes_to_lowest_index() {
        let mut s = GpSession::new(spec());
        s.add_annotation(Annotation::isotropic(vec![20.0, 20.0], vec![20.0, 20.0], 1.0).unwrap()).unwrap();
        let pts = vec![vec![26.0, 20.0], vec![14.0, 20.0]];
        let c = CandidateSet::new(pts.clone()).unwrap();
        let t = TargetSet::new(pts, "").unwrap();
        let scores = score_candidates(&s, &c, &t).unwrap();
        assert_eq!(scores[0].delta_h, scores[1].delta_h);
        assert_eq!(suggest_next_entropy(&s, &c, &t).unwrap().index, 0);
    }

    #[test]
    fn heuristic_geometry() {
        let c = CandidateSet::new(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![10.0, 0.0]]).unwrap();
        assert_eq!(suggest_next_heuristic(&[vec![0.0, 0.0]], &c, 0).unwrap().index, 2);
        let square = CandidateSet::new(vec![
            vec![0.0, 0.0],
            vec![10.0, 0.0],
            vec![0.0, 10.0],
            vec![10.0, 10.0],
        ])
        .unwrap();
        assert_eq!(suggest_next_heuristic(&[vec![0.5, 0.5]], &square, 0).unwrap().index, 3);
        let a = suggest_next_heuristic(&[], &square, 42).unwrap();
        assert_eq!(a, suggest_next_heuristic(&[], &square, 42).unwrap());
    }

    #[test]
    fn random_pick_is_uniform() {
        let k = 8;
        let c = CandidateSet::new((0..k).map(|i| vec![i as f64, 0.0]).collect()).unwrap();
        let draws = 10_000;
        let mut counts = vec![0usize; k];
        for i in 0..draws {
            counts[suggest_next_random(&c, iteration_seed(7, i)).unwrap().index] += 1;
        }
        let p = 1.0 / k as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for n in counts {
            assert!((n as f64 - mean).abs() <= 3.0 * sd, "count {n} vs {mean}");
        }
    }

    #[test]
    fn outside_target_uses_joint_cache() {
        let mut s = GpSession::new(spec());
        s.add_annotation(Annotation::isotropic(vec![5.0, 5.0], vec![6.0, 5.0], 1.0).unwrap()).unwrap();
        let t = TargetSet::new(vec![vec![10.0, 10.0], vec![14.0, 8.0]], "").unwrap();
        let x = [12.0, 9.0];
        let direct = delta_h(&s, &x, &t).unwrap();
        let mut cached = s.clone();
        cached.attach_targets(&t.points).unwrap();
        assert_relative_eq!(delta_h(&cached, &x, &t).unwrap(), direct, epsilon = 1e-12);
        assert!(direct > 0.0);
    }
}
