//! Interactive annotation sessions: one GP posterior, a candidate pool and
//! a target set, advanced one suggestion at a time.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use regmark_core::annotation::{covariance_from_ellipse, ellipse_from_covariance, DEFAULT_ALPHA};
use regmark_core::suggestion::{detect_candidates, HarrisOptions};
use regmark_core::suggestion::TraceRow;
use regmark_core::{
    Annotation, BasisKind, CandidateSet, Ellipse, GpSession, GridGeometry, KernelSpec, ScalarField,
    Strategy, Suggestion, TargetSet,
};

use crate::error::ServiceError;
use crate::images::{load_image, resolve};

pub const DEFAULT_ENTROPY_POINTS: usize = 256;
pub const DEFAULT_TARGET_STEP: usize = 32;

/// Kernel bundle: explicit `scales`, or a ladder from `rho1` with one scale per weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub basis: BasisKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl KernelConfig {
    pub fn from_spec(spec: &KernelSpec) -> Self {
        Self {
            basis: spec.basis(),
            rho1: None,
            scales: Some(spec.scales().to_vec()),
            weights: spec.weights().to_vec(),
        }
    }

    /// Unit weights on the ladder from 10 px covering `extent`.
    pub fn default_for(extent: f64) -> Self {
        let count = KernelSpec::scale_count_for_extent(10.0, extent);
        Self {
            basis: BasisKind::Wendland1,
            rho1: Some(10.0),
            scales: None,
            weights: vec![1.0; count],
        }
    }

    pub fn build(&self, d: usize) -> regmark_core::Result<KernelSpec> {
        match &self.scales {
            Some(scales) => KernelSpec::new(self.basis, scales.clone(), self.weights.clone(), d),
            None => KernelSpec::ladder(
                self.basis,
                self.rho1.unwrap_or(10.0),
                self.weights.len(),
                self.weights.clone(),
                d,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CandidateSource {
    /// Corners of the fixed image.
    Harris {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min_spacing: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_count: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        relative_threshold: Option<f64>,
    },
    Points { points: Vec<Vec<f64>> },
    /// Grid nodes every `step` pixels.
    Lattice { step: usize },
}

impl Default for CandidateSource {
    fn default() -> Self {
        CandidateSource::Harris {
            sigma: None,
            min_spacing: None,
            max_count: None,
            relative_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSource {
    /// The candidate locations themselves.
    Candidates,
    Points { points: Vec<Vec<f64>> },
    Lattice { step: usize },
}

impl Default for TargetSource {
    fn default() -> Self {
        TargetSource::Lattice {
            step: DEFAULT_TARGET_STEP,
        }
    }
}

/// Body of `POST /sessions`. Unset fields take the service defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moving_image: Option<String>,
    /// Domain size in pixels when no fixed image is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Maximum number of annotations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default)]
    pub candidates: CandidateSource,
    #[serde(default)]
    pub targets: TargetSource,
    /// Size of the target subsample used for the entropy summary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_points: Option<usize>,
    /// Default confidence level of ellipse payloads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// Service-wide defaults applied to creation requests.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionDefaults {
    pub kernel: Option<KernelSpec>,
    pub strategy: Strategy,
    pub seed: u64,
    pub budget: Option<usize>,
    pub alpha: f64,
}

impl Default for SessionDefaults {
    fn default() -> Self {
        Self {
            kernel: None,
            strategy: Strategy::Entropy,
            seed: 0,
            budget: None,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// Confidence ellipse of an annotation. 2-D payloads may give `angle`
/// (radians, first axis from +x toward +y) instead of `axes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsePayload {
    pub radii: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axes: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// Body of `POST /sessions/{id}/annotations`: the annotated moving-image
/// point for the current suggestion and exactly one of `ellipse` or `sigma`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRequest {
    pub y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ellipse: Option<EllipsePayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    /// Candidate index the client is answering; must match the pending suggestion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<usize>,
    /// Number of annotations the client has seen; must match the session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_count: Option<usize>,
}

/// Body of `POST /sessions/{id}/skip`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipRequest {
    #[serde(default)]
    pub candidate: Option<usize>,
    #[serde(default)]
    pub expected_count: Option<usize>,
}

/// State changes after creation, in log order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Annotate {
        candidate: usize,
        y: Vec<f64>,
        /// Covariance as submitted, before the session's noise floor.
        sigma: Vec<Vec<f64>>,
        wall_ms: f64,
    },
    Skip { candidate: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionView {
    pub session: String,
    pub strategy: Strategy,
    /// Suggestions resolved so far (annotated or skipped).
    pub iteration: usize,
    pub count: usize,
    pub remaining: usize,
    pub done: bool,
    pub candidate: Option<usize>,
    pub point: Option<Vec<f64>>,
    pub delta_h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseView {
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
    pub alpha: f64,
}

impl From<Ellipse> for EllipseView {
    fn from(e: Ellipse) -> Self {
        let angle = (e.center.len() == 2).then(|| e.axes[0][1].atan2(e.axes[0][0]));
        Self {
            center: e.center,
            radii: e.radii,
            axes: e.axes,
            angle,
            alpha: e.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    /// Joint entropy (nats) over the summary points.
    pub joint: f64,
    pub previous: f64,
    pub change: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub count: usize,
    pub candidate: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Covariance stored by the session (after the noise floor).
    pub sigma: Vec<Vec<f64>>,
    /// `sigma` drawn back as an ellipse around `y`.
    pub ellipse: EllipseView,
    pub entropy: EntropySummary,
    pub next: SuggestionView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub dimension: usize,
    pub shape: Vec<usize>,
    pub fixed_image: Option<String>,
    pub moving_image: Option<String>,
    pub strategy: Strategy,
    pub seed: u64,
    pub budget: Option<usize>,
    pub alpha: f64,
    pub kernel: KernelSpec,
    pub count: usize,
    pub skipped: Vec<usize>,
    pub candidates: Vec<Vec<f64>>,
    pub targets: usize,
    pub entropy: f64,
    pub entropy_points: usize,
    pub next: SuggestionView,
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>, ServiceError> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(ServiceError::invalid(
            "dimension_mismatch",
            format!("sigma must be a {d}x{d} matrix"),
        ));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn lattice(geometry: &GridGeometry, step: usize) -> Result<Vec<Vec<f64>>, ServiceError> {
    if step == 0 {
        return Err(ServiceError::invalid("invalid_parameter", "lattice step must be positive"));
    }
    Ok(geometry.strided(step).node_points())
}

fn image_field(data_dir: &Path, name: &str) -> Result<ScalarField, ServiceError> {
    let path = resolve(data_dir, name).map_err(|e| ServiceError::invalid("invalid_image", e.to_string()))?;
    load_image(&path).map_err(|e| ServiceError::invalid("invalid_image", format!("{e:#}")))
}

/// One interactive session.
#[derive(Debug)]
pub struct SessionRecord {
    pub id: String,
    /// Creation request with every default resolved.
    pub request: CreateSession,
    pub fixed: GridGeometry,
    pub moving: GridGeometry,
    pub gp: GpSession,
    pub candidates: CandidateSet,
    pub targets: TargetSet,
    pub trace: Vec<TraceRow>,
    pub skipped: Vec<usize>,
    pub entropy: f64,
    summary_points: Vec<Vec<f64>>,
    next: Option<Suggestion>,
    issued: Instant,
}

impl SessionRecord {
    /// Fills unset fields of `request` from `defaults` and the domain.
    pub fn resolve_request(
        mut request: CreateSession,
        defaults: &SessionDefaults,
        data_dir: &Path,
    ) -> Result<CreateSession, ServiceError> {
        if request.shape.is_none() {
            let name = request.fixed_image.as_ref().ok_or_else(|| {
                ServiceError::invalid("missing_domain", "give a fixed_image or a shape")
            })?;
            request.shape = Some(image_field(data_dir, name)?.geometry.shape);
        }
        let shape = request.shape.clone().unwrap_or_default();
        if request.kernel.is_none() {
            request.kernel = Some(match &defaults.kernel {
                Some(spec) => KernelConfig::from_spec(spec),
                None => {
                    let extent = shape.iter().map(|&n| n.saturating_sub(1) as f64).fold(1.0, f64::max);
                    KernelConfig::default_for(extent)
                }
            });
        }
        request.strategy.get_or_insert(defaults.strategy);
        request.seed.get_or_insert(defaults.seed);
        if request.budget.is_none() {
            request.budget = defaults.budget;
        }
        request.entropy_points.get_or_insert(DEFAULT_ENTROPY_POINTS);
        request.alpha.get_or_insert(defaults.alpha);
        Ok(request)
    }

    /// Builds a session from a resolved request.
    pub fn create(id: String, request: CreateSession, data_dir: &Path) -> Result<Self, ServiceError> {
        let shape = request
            .shape
            .clone()
            .ok_or_else(|| ServiceError::invalid("missing_domain", "give a fixed_image or a shape"))?;
        let fixed_image = match &request.fixed_image {
            Some(name) => Some(image_field(data_dir, name)?),
            None => None,
        };
        let fixed = match &fixed_image {
            Some(img) if img.geometry.shape != shape => {
                return Err(ServiceError::invalid(
                    "dimension_mismatch",
                    format!("fixed image has shape {:?}, request says {shape:?}", img.geometry.shape),
                ))
            }
            Some(img) => img.geometry.clone(),
            None => GridGeometry::pixels(shape).map_err(ServiceError::from_input)?,
        };
        let moving = match &request.moving_image {
            Some(name) => image_field(data_dir, name)?.geometry,
            None => fixed.clone(),
        };
        if moving.dimension() != fixed.dimension() {
            return Err(ServiceError::invalid(
                "dimension_mismatch",
                "fixed and moving images differ in dimension",
            ));
        }
        let d = fixed.dimension();

        let alpha = request.alpha.unwrap_or(DEFAULT_ALPHA);
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ServiceError::invalid("invalid_parameter", "alpha must lie in (0, 1)"));
        }
        let kernel = request
            .kernel
            .as_ref()
            .ok_or_else(|| ServiceError::invalid("invalid_kernel", "no kernel given"))?
            .build(d)
            .map_err(|e| ServiceError::invalid("invalid_kernel", e.to_string()))?;

        let candidates = match &request.candidates {
            CandidateSource::Harris {
                sigma,
                min_spacing,
                max_count,
                relative_threshold,
            } => {
                let image = fixed_image.as_ref().ok_or_else(|| {
                    ServiceError::invalid("invalid_candidates", "corner candidates need a fixed_image")
                })?;
                let base = HarrisOptions::default();
                let options = HarrisOptions {
                    sigma: sigma.unwrap_or(base.sigma),
                    min_spacing: min_spacing.unwrap_or(base.min_spacing),
                    max_count: max_count.unwrap_or(base.max_count),
                    relative_threshold: relative_threshold.unwrap_or(base.relative_threshold),
                    ..base
                };
                detect_candidates(image, &options)
                    .map_err(|e| ServiceError::invalid("invalid_candidates", e.to_string()))?
            }
            CandidateSource::Points { points } => {
                CandidateSet::new(points.clone()).map_err(|e| ServiceError::invalid("invalid_candidates", e.to_string()))?
            }
            CandidateSource::Lattice { step } => CandidateSet::new(lattice(&fixed, *step)?)
                .map_err(|e| ServiceError::invalid("invalid_candidates", e.to_string()))?,
        };
        if candidates.is_empty() {
            return Err(ServiceError::invalid("invalid_candidates", "the candidate pool is empty"));
        }
        if let Some(p) = candidates.points.iter().find(|p| !fixed.contains(p)) {
            return Err(ServiceError::invalid(
                "outside_domain",
                format!("candidate {p:?} lies outside the fixed image"),
            ));
        }

        let target_points = match &request.targets {
            TargetSource::Candidates => candidates.points.clone(),
            TargetSource::Points { points } => points.clone(),
            TargetSource::Lattice { step } => lattice(&fixed, *step)?,
        };
        let targets =
            TargetSet::new(target_points, "session").map_err(|e| ServiceError::invalid("invalid_targets", e.to_string()))?;
        if let Some(p) = targets.points.iter().find(|p| !fixed.contains(p)) {
            return Err(ServiceError::invalid(
                "outside_domain",
                format!("target {p:?} lies outside the fixed image"),
            ));
        }

        let seed = request.seed.unwrap_or(0);
        let m = request.entropy_points.unwrap_or(DEFAULT_ENTROPY_POINTS).max(1);
        let summary_points = if targets.len() <= m {
            targets.points.clone()
        } else {
            let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), targets.len(), m).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| targets.points[i].clone()).collect()
        };

        let mut gp = GpSession::new(kernel);
        let strategy = request.strategy.unwrap_or(Strategy::Entropy);
        if strategy == Strategy::Entropy && candidates.points.iter().any(|p| !targets.contains(p)) {
            gp.attach_targets(&targets.points).map_err(|e| ServiceError::internal(e.to_string()))?;
        }
        let entropy = gp
            .joint_entropy(&summary_points)
            .map_err(|e| ServiceError::internal(e.to_string()))?;

        let mut record = Self {
            id,
            request,
            fixed,
            moving,
            gp,
            candidates,
            targets,
            trace: Vec::new(),
            skipped: Vec::new(),
            entropy,
            summary_points,
            next: None,
            issued: Instant::now(),
        };
        record.refresh_suggestion()?;
        Ok(record)
    }

    pub fn strategy(&self) -> Strategy {
        self.request.strategy.unwrap_or(Strategy::Entropy)
    }

    pub fn seed(&self) -> u64 {
        self.request.seed.unwrap_or(0)
    }

    pub fn alpha(&self) -> f64 {
        self.request.alpha.unwrap_or(DEFAULT_ALPHA)
    }

    pub fn count(&self) -> usize {
        self.gp.len()
    }

    /// Suggestions resolved so far; the step index of the next one.
    pub fn step(&self) -> usize {
        self.trace.len() + self.skipped.len()
    }

    pub fn summary_points(&self) -> &[Vec<f64>] {
        &self.summary_points
    }

    pub fn pending(&self) -> Option<&Suggestion> {
        self.next.as_ref()
    }

    fn refresh_suggestion(&mut self) -> Result<(), ServiceError> {
        let exhausted = self.request.budget.is_some_and(|b| self.count() >= b) || self.candidates.remaining() == 0;
        self.next = if exhausted {
            None
        } else {
            Some(
                self.strategy()
                    .suggest(&self.gp, &self.candidates, &self.targets, self.seed(), self.step())
                    .map_err(|e| ServiceError::internal(format!("suggestion failed: {e}")))?,
            )
        };
        self.issued = Instant::now();
        Ok(())
    }

    pub fn suggestion_view(&self) -> SuggestionView {
        SuggestionView {
            session: self.id.clone(),
            strategy: self.strategy(),
            iteration: self.step(),
            count: self.count(),
            remaining: self.candidates.remaining(),
            done: self.next.is_none(),
            candidate: self.next.as_ref().map(|s| s.index),
            point: self.next.as_ref().map(|s| s.point.clone()),
            delta_h: self.next.as_ref().and_then(|s| s.delta_h),
        }
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            id: self.id.clone(),
            dimension: self.fixed.dimension(),
            shape: self.fixed.shape.clone(),
            fixed_image: self.request.fixed_image.clone(),
            moving_image: self.request.moving_image.clone(),
            strategy: self.strategy(),
            seed: self.seed(),
            budget: self.request.budget,
            alpha: self.alpha(),
            kernel: self.gp.spec().clone(),
            count: self.count(),
            skipped: self.skipped.clone(),
            candidates: self.candidates.points.clone(),
            targets: self.targets.len(),
            entropy: self.entropy,
            entropy_points: self.summary_points.len(),
            next: self.suggestion_view(),
        }
    }

    /// The pending suggestion, after checking the client's view of the session.
    fn check_pending(&self, candidate: Option<usize>, expected_count: Option<usize>) -> Result<Suggestion, ServiceError> {
        if let Some(n) = expected_count {
            if n != self.count() {
                return Err(ServiceError::conflict(
                    "stale_state",
                    format!("client expected {n} annotations, session has {}", self.count()),
                ));
            }
        }
        let next = self.next.clone().ok_or_else(|| {
            ServiceError::conflict("session_complete", "no suggestion is pending: budget or candidates exhausted")
        })?;
        if let Some(c) = candidate {
            if c != next.index {
                return Err(ServiceError::conflict(
                    "stale_suggestion",
                    format!("candidate {c} is not the pending suggestion {}", next.index),
                ));
            }
        }
        Ok(next)
    }

    /// Covariance of an annotation payload, before any flooring.
    fn payload_covariance(&self, req: &AnnotationRequest) -> Result<DMatrix<f64>, ServiceError> {
        let d = self.fixed.dimension();
        match (&req.ellipse, &req.sigma) {
            (Some(_), Some(_)) => Err(ServiceError::invalid(
                "ambiguous_uncertainty",
                "give either an ellipse or sigma, not both",
            )),
            (None, None) => Err(ServiceError::invalid("missing_uncertainty", "give an ellipse or sigma")),
            (None, Some(rows)) => matrix_from_rows(rows, d),
            (Some(e), None) => {
                let alpha = e.alpha.unwrap_or(self.alpha());
                let axes = match (&e.axes, e.angle) {
                    (Some(_), Some(_)) => {
                        return Err(ServiceError::invalid("invalid_ellipse", "give either axes or angle, not both"))
                    }
                    (Some(axes), None) => axes.clone(),
                    (None, angle) if d == 2 => {
                        let (s, c) = angle.unwrap_or(0.0).sin_cos();
                        vec![vec![c, s], vec![-s, c]]
                    }
                    (None, Some(_)) => {
                        return Err(ServiceError::invalid("invalid_ellipse", "angle only applies to 2-D ellipses"))
                    }
                    (None, None) => (0..d)
                        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                        .collect(),
                };
                let ellipse = Ellipse {
                    center: req.y.clone(),
                    axes,
                    radii: e.radii.clone(),
                    alpha,
                };
                covariance_from_ellipse(&ellipse).map_err(|e| ServiceError::invalid("invalid_ellipse", e.to_string()))
            }
        }
    }

    /// Answers the pending suggestion. Returns the event to log.
    pub fn annotate(&mut self, req: &AnnotationRequest) -> Result<(SessionEvent, AnnotationResponse), ServiceError> {
        let next = self.check_pending(req.candidate, req.expected_count)?;
        let d = self.fixed.dimension();
        if req.y.len() != d {
            return Err(ServiceError::invalid(
                "dimension_mismatch",
                format!("y has {} coordinates, expected {d}", req.y.len()),
            ));
        }
        if !self.moving.contains(&req.y) {
            return Err(ServiceError::invalid(
                "outside_domain",
                format!("y = {:?} lies outside the moving image", req.y),
            ));
        }
        let sigma = self.payload_covariance(req)?;
        let wall_ms = self.issued.elapsed().as_secs_f64() * 1e3;
        let event = SessionEvent::Annotate {
            candidate: next.index,
            y: req.y.clone(),
            sigma: matrix_rows(&sigma),
            wall_ms,
        };
        let previous = self.entropy;
        self.apply(&event)?;
        let stored = &self.gp.annotations()[self.count() - 1];
        let ellipse = ellipse_from_covariance(&stored.sigma, &stored.y, self.alpha())
            .map_err(|e| ServiceError::internal(e.to_string()))?;
        let response = AnnotationResponse {
            count: self.count(),
            candidate: next.index,
            x: stored.x.clone(),
            y: stored.y.clone(),
            sigma: matrix_rows(&stored.sigma),
            ellipse: ellipse.into(),
            entropy: EntropySummary {
                joint: self.entropy,
                previous,
                change: self.entropy - previous,
                points: self.summary_points.len(),
            },
            next: self.suggestion_view(),
        };
        Ok((event, response))
    }

    /// Passes on the pending suggestion without annotating it.
    pub fn skip(&mut self, req: &SkipRequest) -> Result<(SessionEvent, SuggestionView), ServiceError> {
        let next = self.check_pending(req.candidate, req.expected_count)?;
        let event = SessionEvent::Skip { candidate: next.index };
        self.apply(&event)?;
        Ok((event, self.suggestion_view()))
    }

    /// Applies a logged event; also used to replay a session log.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<(), ServiceError> {
        let next = self
            .next
            .clone()
            .ok_or_else(|| ServiceError::conflict("session_complete", "no suggestion is pending"))?;
        match event {
            SessionEvent::Annotate {
                candidate,
                y,
                sigma,
                wall_ms,
            } => {
                if *candidate != next.index {
                    return Err(ServiceError::conflict("stale_suggestion", "event does not answer the pending suggestion"));
                }
                let sigma = matrix_from_rows(sigma, self.fixed.dimension())?;
                let annotation = Annotation::new(next.point.clone(), y.clone(), sigma).map_err(ServiceError::from_input)?;
                if let Err(e) = self.gp.add_annotation(annotation) {
                    self.rebuild_posterior()?;
                    return Err(ServiceError::from_input(e));
                }
                self.candidates
                    .consume(next.index)
                    .map_err(|e| ServiceError::internal(e.to_string()))?;
                self.entropy = self
                    .gp
                    .joint_entropy(&self.summary_points)
                    .map_err(|e| ServiceError::internal(e.to_string()))?;
                self.trace.push(TraceRow {
                    iteration: self.trace.len() + 1,
                    strategy: self.strategy(),
                    candidate: next.index,
                    point: next.point,
                    delta_h: next.delta_h,
                    wall_ms: *wall_ms,
                    metric: Some(self.entropy),
                });
            }
            SessionEvent::Skip { candidate } => {
                if *candidate != next.index {
                    return Err(ServiceError::conflict("stale_suggestion", "event does not skip the pending suggestion"));
                }
                self.candidates
                    .consume(next.index)
                    .map_err(|e| ServiceError::internal(e.to_string()))?;
                self.skipped.push(next.index);
            }
        }
        self.refresh_suggestion()
    }

    /// Rebuilds the posterior from the stored annotations after a failed update.
    fn rebuild_posterior(&mut self) -> Result<(), ServiceError> {
        let mut gp = GpSession::new(self.gp.spec().clone())
            .with_mean(self.gp.mean_function().clone())
            .with_noise_floor(self.gp.noise_floor());
        if let Some(t) = self.gp.attached_targets() {
            gp.attach_targets(t).map_err(|e| ServiceError::internal(e.to_string()))?;
        }
        for a in self.gp.annotations() {
            gp.add_annotation(a.clone()).map_err(|e| ServiceError::internal(e.to_string()))?;
        }
        self.gp = gp;
        Ok(())
    }
}
