//! The suggest → annotate → update loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    iteration_seed, suggest_next_entropy, suggest_next_heuristic, suggest_next_random,
    CandidateSet, Suggestion, TargetSet,
};
use crate::annotation::Annotation;
use crate::error::{Error, Result};
use crate::gp::GpSession;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Entropy,
    Heuristic,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Entropy, Strategy::Heuristic, Strategy::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Entropy => "entropy",
            Strategy::Heuristic => "heuristic",
            Strategy::Random => "random",
        }
    }

    /// Chooses the query for step `iteration` (0-based) of a protocol.
    pub fn suggest(
        self,
        session: &GpSession,
        candidates: &CandidateSet,
        targets: &TargetSet,
        seed: u64,
        iteration: usize,
    ) -> Result<Suggestion> {
        match self {
            Strategy::Entropy => suggest_next_entropy(session, candidates, targets),
            Strategy::Heuristic => suggest_next_heuristic(
                session.annotated_points(),
                candidates,
                iteration_seed(seed, iteration),
            ),
            Strategy::Random => suggest_next_random(candidates, iteration_seed(seed, iteration)),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "entropy" => Ok(Strategy::Entropy),
            "heuristic" => Ok(Strategy::Heuristic),
            "random" => Ok(Strategy::Random),
            other => Err(Error::Validation(format!(
                "unknown strategy {other:?} (expected entropy, heuristic or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOptions {
    pub strategy: Strategy,
    pub budget: usize,
    pub seed: u64,
    /// Stop early once the best ΔH drops below this value (entropy only).
    pub delta_h_floor: Option<f64>,
}

impl ProtocolOptions {
    pub fn new(strategy: Strategy, budget: usize, seed: u64) -> Self {
        Self {
            strategy,
            budget,
            seed,
            delta_h_floor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Number of annotations after this step, starting at 1.
    pub iteration: usize,
    pub strategy: Strategy,
    pub candidate: usize,
    pub point: Vec<f64>,
    pub delta_h: Option<f64>,
    pub wall_ms: f64,
    /// Value returned by the caller's per-iteration hook, if any.
    pub metric: Option<f64>,
}

#[derive(Debug)]
pub struct ProtocolOutcome {
    pub session: GpSession,
    pub candidates: CandidateSet,
    pub trace: Vec<TraceRow>,
    /// Set when the annotator or an update failed; `trace` is partial.
    pub aborted: Option<Error>,
    pub stopped_by_floor: bool,
}

/// Callback answering a query with `(y, Σ)`.
pub type AnnotatorResult = std::result::Result<(Vec<f64>, DMatrix<f64>), String>;

/// Runs up to `options.budget` rounds of suggestion and annotation.
///
/// `hook` is evaluated on the session after every update and its value
/// stored in the trace.
pub fn run_protocol<F>(
    mut session: GpSession,
    mut candidates: CandidateSet,
    targets: &TargetSet,
    options: &ProtocolOptions,
    mut annotator: F,
    mut hook: Option<&mut dyn FnMut(&GpSession) -> f64>,
) -> Result<ProtocolOutcome>
where
    F: FnMut(&Suggestion) -> AnnotatorResult,
{
    if options.budget > candidates.remaining() {
        return Err(Error::Validation(format!(
            "budget {} exceeds the {} unconsumed candidates",
            options.budget,
            candidates.remaining()
        )));
    }
    let needs_cache = options.strategy == Strategy::Entropy
        && candidates.points.iter().any(|p| !targets.contains(p));
    if needs_cache && session.attached_targets() != Some(targets.points.as_slice()) {
        session.attach_targets(&targets.points)?;
    }

    let mut trace = Vec::with_capacity(options.budget);
    let mut aborted = None;
    let mut stopped_by_floor = false;
    for step in 0..options.budget {
        let start = Instant::now();
        let suggestion = options
            .strategy
            .suggest(&session, &candidates, targets, options.seed, step)?;
        if let (Some(floor), Some(dh)) = (options.delta_h_floor, suggestion.delta_h) {
            if dh < floor {
                stopped_by_floor = true;
                break;
            }
        }
        let (y, sigma) = match annotator(&suggestion) {
            Ok(v) => v,
            Err(msg) => {
                aborted = Some(Error::Callback(msg));
                break;
            }
        };
        let update = Annotation::new(suggestion.point.clone(), y, sigma)
            .and_then(|a| session.add_annotation(a));
        if let Err(e) = update {
            aborted = Some(e);
            break;
        }
        candidates.consume(suggestion.index)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let metric = hook.as_mut().map(|h| h(&session));
        trace.push(TraceRow {
            iteration: step + 1,
            strategy: options.strategy,
            candidate: suggestion.index,
            point: suggestion.point,
            delta_h: suggestion.delta_h,
            wall_ms,
            metric,
        });
    }
    Ok(ProtocolOutcome {
        session,
        candidates,
        trace,
        aborted,
        stopped_by_floor,
    })
}

/// Trace CSV: `iteration,strategy,x0..,delta_h,wall_ms`.
pub fn write_trace_csv<W: Write>(writer: W, trace: &[TraceRow], dimension: usize) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["iteration".to_string(), "strategy".to_string()];
    header.extend((0..dimension).map(|i| format!("x{i}")));
    header.push("delta_h".into());
    header.push("wall_ms".into());
    out.write_record(&header)?;
    for row in trace {
        let mut rec = vec![row.iteration.to_string(), row.strategy.to_string()];
        rec.extend(row.point.iter().map(f64::to_string));
        rec.push(row.delta_h.map_or_else(String::new, |v| v.to_string()));
        rec.push(format!("{:.3}", row.wall_ms));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{BasisKind, KernelSpec};

    fn setup() -> (GpSession, CandidateSet, TargetSet) {
        let spec = KernelSpec::ladder(BasisKind::Wendland1, 10.0, 3, vec![4.0, 2.0, 1.0], 2).unwrap();
        let pts: Vec<Vec<f64>> = (0..5)
            .flat_map(|i| (0..4).map(move |j| vec![7.0 * i as f64 + 1.0, 9.0 * j as f64 + 2.0]))
            .collect();
        let targets = TargetSet::new(pts.clone(), "grid").unwrap();
        (GpSession::new(spec), CandidateSet::new(pts).unwrap(), targets)
    }

    fn fixed(offset: f64) -> impl FnMut(&Suggestion) -> AnnotatorResult {
        move |s: &Suggestion| Ok((s.point.iter().map(|v| v + offset).collect(), DMatrix::identity(2, 2)))
    }

    #[test]
    fn zero_budget_is_a_no_op() {
        let (s, c, t) = setup();
        let out = run_protocol(s, c, &t, &ProtocolOptions::new(Strategy::Entropy, 0, 1), fixed(0.0), None).unwrap();
        assert!(out.trace.is_empty());
        assert!(out.session.is_empty());
    }

    #[test]
    fn full_budget_consumes_every_candidate_once() {
        for strategy in Strategy::ALL {
            let (s, c, t) = setup();
            let n = c.len();
            let out = run_protocol(s, c, &t, &ProtocolOptions::new(strategy, n, 3), fixed(1.0), None).unwrap();
            assert_eq!(out.trace.len(), n);
            let mut seen: Vec<usize> = out.trace.iter().map(|r| r.candidate).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            assert!(out.candidates.annotated_mask.iter().all(|m| *m));
        }
    }

    #[test]
    fn entropy_sequence_ignores_y_values() {
        let (s, c, t) = setup();
        let a = run_protocol(s.clone(), c.clone(), &t, &ProtocolOptions::new(Strategy::Entropy, 8, 0), fixed(0.0), None).unwrap();
        let b = run_protocol(s, c, &t, &ProtocolOptions::new(Strategy::Entropy, 8, 0), fixed(37.5), None).unwrap();
        let seq = |o: &ProtocolOutcome| o.trace.iter().map(|r| (r.candidate, r.delta_h.unwrap().to_bits())).collect::<Vec<_>>();
        assert_eq!(seq(&a), seq(&b));
    }

    #[test]
    fn callback_failure_keeps_partial_trace() {
        let (s, c, t) = setup();
        let mut calls = 0;
        let annotator = |sg: &Suggestion| {
            calls += 1;
            if calls == 3 {
                Err("annotator gave up".to_string())
            } else {
                Ok((sg.point.clone(), DMatrix::identity(2, 2)))
            }
        };
        let out = run_protocol(s, c, &t, &ProtocolOptions::new(Strategy::Random, 5, 9), annotator, None).unwrap();
        assert_eq!(out.trace.len(), 2);
        assert_eq!(out.session.len(), 2);
        assert!(matches!(out.aborted, Some(Error::Callback(_))));
    }

    #[test]
    fn budget_beyond_pool_is_rejected() {
        let (s, c, t) = setup();
        let n = c.len();
        assert!(run_protocol(s, c, &t, &ProtocolOptions::new(Strategy::Random, n + 1, 0), fixed(0.0), None).is_err());
    }

    #[test]
    fn delta_h_floor_stops_early() {
        let (s, c, t) = setup();
        let mut opts = ProtocolOptions::new(Strategy::Entropy, 20, 0);
        opts.delta_h_floor = Some(f64::INFINITY);
        let out = run_protocol(s, c, &t, &opts, fixed(0.0), None).unwrap();
        assert!(out.stopped_by_floor);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn trace_csv_layout() {
        let (s, c, t) = setup();
        let mut hook = |sess: &GpSession| sess.len() as f64;
        let out = run_protocol(s, c, &t, &ProtocolOptions::new(Strategy::Entropy, 2, 0), fixed(0.0), Some(&mut hook)).unwrap();
        assert_eq!(out.trace[1].metric, Some(2.0));
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &out.trace, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iteration,strategy,x0,x1,delta_h,wall_ms");
        assert!(lines.next().unwrap().starts_with("1,entropy,"));
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("Entropy".parse::<Strategy>().unwrap(), Strategy::Entropy);
        assert!("greedy".parse::<Strategy>().is_err());
        assert_eq!(serde_json::to_string(&Strategy::Heuristic).unwrap(), "\"heuristic\"");
    }
}
