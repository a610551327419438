//! Seeded strategy comparisons and ranking experiments on synthetic truths.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use regmark_core::evaluation::{landmark_scores, proposed_scores, spearman, ScoreSet};
use regmark_core::kernels::{fit_hyperparameters, GppOptions};
use regmark_core::stats::{median, quantile};
use regmark_core::suggestion::{run_protocol, ProtocolOptions};
use regmark_core::{
    Annotation, BasisKind, CandidateSet, Error, GpSession, GridGeometry, KernelSpec, Result,
    Strategy, TargetSet, TransformField,
};

use crate::annotator::{simulate_annotator_seeded, AnnotatorProfile};
use crate::synth::{sample_deformation, sample_velocity, DeformationParams};

const STREAM_TRUTH: u64 = 1;
const STREAM_POINTS: u64 = 2;
const STREAM_QUADRANT: u64 = 3;
const STREAM_ANSWERS: u64 = 4;
const STREAM_RANKING: u64 = 5;
const STREAM_TRAINING: u64 = 6;
const STREAM_STRATEGY: u64 = 16;

/// Independent 64-bit seed for stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Every candidate and held-out point.
    #[default]
    Full,
    /// A regular lattice inside one randomly chosen quadrant.
    Quadrant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetConfig {
    pub mode: TargetMode,
    /// Lattice points per axis in quadrant mode.
    pub lattice: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            mode: TargetMode::Full,
            lattice: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub basis: BasisKind,
    pub rho1: f64,
    /// Ladder length; derived from the smallest extent when absent.
    pub scales: Option<usize>,
    /// Initial (or, without `learn`, final) weights. All ones when absent.
    pub weights: Option<Vec<f64>>,
    /// Fit the weights once per benchmark on a separate training deformation.
    pub learn: bool,
    pub training_points: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            basis: BasisKind::Wendland1,
            rho1: 10.0,
            scales: None,
            weights: None,
            learn: true,
            training_points: 100,
        }
    }
}

/// Where true and proposed ranking scores are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankingDomain {
    /// Every `stride`-th grid node of the image, minus the placement margin.
    #[default]
    Image,
    /// The run's target set.
    Targets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankingConfig {
    /// Number of graded candidate transformations, the first being `φ` itself.
    pub candidates: usize,
    /// True `s₂` of the worst candidate, in pixels.
    pub max_error: f64,
    pub budget: usize,
    pub strategy: Strategy,
    pub domain: RankingDomain,
    pub stride: usize,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self {
            candidates: 20,
            max_error: 4.0,
            budget: 25,
            strategy: Strategy::Entropy,
            domain: RankingDomain::Image,
            stride: 4,
        }
    }
}

impl RankingConfig {
    pub fn scoring_points(&self, setup: &RunSetup) -> Vec<Vec<f64>> {
        match self.domain {
            RankingDomain::Image => {
                let g = &setup.truth.geometry;
                let m = placement_margin(&setup.truth);
                let extent = g.extent();
                g.strided(self.stride)
                    .node_points()
                    .into_iter()
                    .filter(|p| (0..p.len()).all(|a| p[a] >= g.origin[a] + m && p[a] <= g.origin[a] + extent[a] - m))
                    .collect()
            }
            RankingDomain::Targets => setup.targets.points.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub runs: usize,
    pub shape: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub budget: usize,
    /// Annotable locations per run.
    pub candidates: usize,
    /// Held-out evaluation locations; as many as candidates when absent.
    pub heldout: Option<usize>,
    pub annotator: AnnotatorProfile,
    pub target: TargetConfig,
    pub deformation: DeformationParams,
    pub kernel: KernelConfig,
    pub ranking: Option<RankingConfig>,
    /// Write each run's ground truth next to the tables.
    pub save_ground_truth: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            runs: 50,
            shape: vec![128, 128],
            strategies: Strategy::ALL.to_vec(),
            budget: 30,
            candidates: 60,
            heldout: None,
            annotator: AnnotatorProfile::FixedIsotropic { sigma: 1.0 },
            target: TargetConfig::default(),
            deformation: DeformationParams::default(),
            kernel: KernelConfig::default(),
            ranking: None,
            save_ground_truth: false,
        }
    }
}

impl BenchmarkConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if !(2..=3).contains(&self.shape.len()) || self.shape.iter().any(|&n| n < 8) {
            return fail(format!("shape must be 2-D or 3-D with at least 8 nodes per axis, got {:?}", self.shape));
        }
        if self.runs == 0 {
            return fail("runs must be at least 1".into());
        }
        if self.strategies.is_empty() {
            return fail("at least one strategy is required".into());
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return fail(format!("strategy {s} listed twice"));
            }
        }
        if self.candidates == 0 || self.heldout == Some(0) {
            return fail("candidate and held-out counts must be positive".into());
        }
        if self.budget > self.candidates {
            return fail(format!("budget {} exceeds {} candidates", self.budget, self.candidates));
        }
        if self.target.mode == TargetMode::Quadrant && self.target.lattice == 0 {
            return fail("quadrant lattice must be at least 1".into());
        }
        if !(self.kernel.rho1.is_finite() && self.kernel.rho1 > 0.0) {
            return fail("kernel rho1 must be positive".into());
        }
        if self.kernel.scales == Some(0) {
            return fail("kernel needs at least one scale".into());
        }
        if self.kernel.learn && self.kernel.training_points < 2 {
            return fail("weight learning needs at least 2 training points".into());
        }
        if let Some(r) = &self.ranking {
            if r.candidates < 2 || r.budget == 0 || r.budget > self.candidates {
                return fail("ranking needs ≥ 2 transformations and 1 ≤ budget ≤ candidates".into());
            }
            if r.stride == 0 {
                return fail("ranking stride must be at least 1".into());
            }
            if !(r.max_error.is_finite() && r.max_error > 0.0) {
                return fail("ranking max_error must be positive".into());
            }
        }
        self.annotator.validate()?;
        let geometry = self.geometry()?;
        self.initial_kernel(&geometry)?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::pixels(self.shape.clone())
    }

    pub fn heldout_count(&self) -> usize {
        self.heldout.unwrap_or(self.candidates)
    }

    fn initial_kernel(&self, geometry: &GridGeometry) -> Result<KernelSpec> {
        let extent = geometry.extent().into_iter().fold(f64::INFINITY, f64::min);
        let count = self
            .kernel
            .scales
            .unwrap_or_else(|| KernelSpec::scale_count_for_extent(self.kernel.rho1, extent));
        let weights = self.kernel.weights.clone().unwrap_or_else(|| vec![1.0; count]);
        KernelSpec::ladder(self.kernel.basis, self.kernel.rho1, count, weights, geometry.dimension())
    }
}

/// One value of the long results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run: usize,
    pub strategy: String,
    pub iteration: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub count: usize,
}

impl Spread {
    /// `None` when no finite values remain.
    pub fn of(values: &[f64]) -> Option<Self> {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        Some(Self {
            median: median(&finite)?,
            p10: quantile(&finite, 0.1)?,
            p90: quantile(&finite, 0.9)?,
            count: finite.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub budget: usize,
    pub kernel: KernelSpec,
    /// `strategy → metric → spread` at the final budget.
    pub final_values: BTreeMap<String, BTreeMap<String, Spread>>,
    /// `strategy → metric → median per iteration` from 0 to the budget.
    pub median_curves: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    /// `"a-b" → metric → spread` of per-run differences at the final budget.
    pub paired_differences: BTreeMap<String, BTreeMap<String, Spread>>,
    /// Ranking metrics, keyed by metric name.
    pub ranking: BTreeMap<String, Spread>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub config: BenchmarkConfig,
    pub kernel: KernelSpec,
    pub rows: Vec<MetricRow>,
    pub summary: Summary,
}

impl BenchmarkResult {
    /// Long-format table `run,strategy,iteration,metric,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }

    /// Writes `results.csv` and `summary.json` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("results.csv"))?)?;
        std::fs::write(dir.join("summary.json"), self.summary_json()?)?;
        Ok(())
    }
}

/// Everything drawn for one run before any strategy executes.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub run_seed: u64,
    pub truth: TransformField,
    pub candidates: Vec<Vec<f64>>,
    pub heldout: Vec<Vec<f64>>,
    pub targets: TargetSet,
}

fn placement_margin(truth: &TransformField) -> f64 {
    let extent = truth.geometry.extent().into_iter().fold(f64::INFINITY, f64::min);
    (2.0 * truth.max_norm()).min(0.25 * extent)
}

fn random_points(geometry: &GridGeometry, margin: f64, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let extent = geometry.extent();
    (0..count)
        .map(|_| {
            (0..geometry.dimension())
                .map(|a| geometry.origin[a] + margin + rng.random::<f64>() * (extent[a] - 2.0 * margin))
                .collect()
        })
        .collect()
}

fn quadrant_lattice(geometry: &GridGeometry, margin: f64, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = geometry.dimension();
    let extent = geometry.extent();
    let corner: Vec<bool> = (0..d).map(|_| rng.random::<bool>()).collect();
    let bounds: Vec<(f64, f64)> = (0..d)
        .map(|a| {
            let lo = geometry.origin[a] + margin;
            let hi = geometry.origin[a] + extent[a] - margin;
            let mid = 0.5 * (lo + hi);
            if corner[a] {
                (mid, hi)
            } else {
                (lo, mid)
            }
        })
        .collect();
    let total = k.pow(d as u32);
    (0..total)
        .map(|flat| {
            let mut rest = flat;
            (0..d)
                .map(|a| {
                    let i = rest % k;
                    rest /= k;
                    let (lo, hi) = bounds[a];
                    // cell centres, so no point sits on the quadrant edge
                    lo + (i as f64 + 0.5) * (hi - lo) / k as f64
                })
                .collect()
        })
        .collect()
}

impl RunSetup {
    pub fn draw(config: &BenchmarkConfig, run_index: usize) -> Result<Self> {
        let geometry = config.geometry()?;
        let run_seed = config.seed.wrapping_add(run_index as u64);
        let truth = sample_deformation(&geometry, &config.deformation, derive_seed(run_seed, STREAM_TRUTH))?;
        let margin = placement_margin(&truth);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, STREAM_POINTS));
        let n = config.candidates;
        let mut points = random_points(&geometry, margin, n + config.heldout_count(), &mut rng);
        let heldout = points.split_off(n);
        let candidates = points;
        let targets = match config.target.mode {
            TargetMode::Full => {
                let mut all = candidates.clone();
                all.extend(heldout.iter().cloned());
                TargetSet::new(all, "full")?
            }
            TargetMode::Quadrant => {
                let mut qrng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, STREAM_QUADRANT));
                TargetSet::new(quadrant_lattice(&geometry, margin, config.target.lattice, &mut qrng), "quadrant")?
            }
        };
        Ok(Self {
            run_seed,
            truth,
            candidates,
            heldout,
            targets,
        })
    }

    /// The simulated answer for candidate `index`, identical across strategies.
    pub fn answer(&self, profile: &AnnotatorProfile, index: usize) -> Result<Annotation> {
        let seed = derive_seed(derive_seed(self.run_seed, STREAM_ANSWERS), index as u64);
        simulate_annotator_seeded(profile, &self.candidates[index], &self.truth, seed)
    }

    pub fn rmse(&self, session: &GpSession, points: &[Vec<f64>]) -> Result<f64> {
        let mut acc = 0.0;
        for x in points {
            let mu = session.posterior_mean(x)?;
            let truth = self.truth.eval(x)?;
            acc += mu.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok((acc / points.len() as f64).sqrt())
    }
}

/// Kernel used by every run: the configured ladder, with weights fitted on a
/// training deformation independent of the runs when `kernel.learn` is set.
pub fn benchmark_kernel(config: &BenchmarkConfig) -> Result<KernelSpec> {
    let geometry = config.geometry()?;
    let spec0 = config.initial_kernel(&geometry)?;
    if !config.kernel.learn {
        return Ok(spec0);
    }
    let seed = derive_seed(config.seed, STREAM_TRAINING);
    let truth = sample_deformation(&geometry, &config.deformation, derive_seed(seed, STREAM_TRUTH))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_POINTS));
    let points = random_points(&geometry, placement_margin(&truth), config.kernel.training_points, &mut rng);
    let annotations = points
        .iter()
        .enumerate()
        .map(|(i, x)| simulate_annotator_seeded(&config.annotator, x, &truth, derive_seed(seed, 1000 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(fit_hyperparameters(&annotations, &spec0, &GppOptions::default())?.spec)
}

/// Raw per-run outcome before flattening into rows.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run: usize,
    /// `(strategy, metric, values at iterations 0..=budget)`.
    pub curves: Vec<(Strategy, &'static str, Vec<f64>)>,
    /// `(metric, value)` from the ranking experiment.
    pub ranking: Vec<(&'static str, f64)>,
}

fn strategy_seed(run_seed: u64, strategy: Strategy) -> u64 {
    let idx = Strategy::ALL.iter().position(|s| *s == strategy).unwrap_or(0) as u64;
    derive_seed(run_seed, STREAM_STRATEGY + idx)
}

/// Runs `strategy` for `budget` steps and returns the final session plus
/// `(rmse_heldout, rmse_target)` after every step, starting from the prior.
pub fn run_strategy(
    setup: &RunSetup,
    config: &BenchmarkConfig,
    kernel: &KernelSpec,
    strategy: Strategy,
    budget: usize,
) -> Result<(GpSession, Vec<f64>, Vec<f64>)> {
    let session = GpSession::new(kernel.clone());
    let candidates = CandidateSet::new(setup.candidates.clone())?;
    let mut heldout = vec![setup.rmse(&session, &setup.heldout)?];
    let mut target = vec![setup.rmse(&session, &setup.targets.points)?];
    let mut failure: Option<Error> = None;
    let mut hook = |s: &GpSession| -> f64 {
        match (setup.rmse(s, &setup.heldout), setup.rmse(s, &setup.targets.points)) {
            (Ok(h), Ok(t)) => {
                heldout.push(h);
                target.push(t);
                h
            }
            (Err(e), _) | (_, Err(e)) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let options = ProtocolOptions::new(strategy, budget, strategy_seed(setup.run_seed, strategy));
    let outcome = run_protocol(
        session,
        candidates,
        &setup.targets,
        &options,
        |s| {
            setup
                .answer(&config.annotator, s.index)
                .map(|a| (a.y, a.sigma))
                .map_err(|e| e.to_string())
        },
        Some(&mut hook),
    )?;
    if let Some(e) = outcome.aborted.or(failure) {
        return Err(e);
    }
    Ok((outcome.session, heldout, target))
}

/// `φ ∘ (id + c·w)` with `c ≥ 0` bisected so its true `s₂` on `targets`
/// equals `level`.
fn graded_candidate(
    truth: &TransformField,
    direction: &TransformField,
    targets: &[Vec<f64>],
    level: f64,
) -> Result<(TransformField, f64)> {
    let make = |c: f64| TransformField::compose(truth, &direction.scaled(c));
    let s2 = |phi: &TransformField| -> Result<f64> {
        Ok(true_scores(phi, truth, targets)?.s2)
    };
    let mut hi = 1.0;
    let mut field = make(hi);
    let mut value = s2(&field)?;
    let mut guard = 0;
    while value < level {
        hi *= 2.0;
        field = make(hi);
        value = s2(&field)?;
        guard += 1;
        if guard > 30 {
            return Err(Error::Degenerate("perturbation direction leaves the targets unchanged".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let f = make(mid);
        let v = s2(&f)?;
        if v < level {
            lo = mid;
        } else {
            hi = mid;
            field = f;
            value = v;
        }
        if (value - level).abs() <= 1e-9 * level {
            break;
        }
    }
    Ok((field, value))
}

pub fn true_scores(phi_hat: &TransformField, truth: &TransformField, targets: &[Vec<f64>]) -> Result<ScoreSet> {
    let errors = regmark_core::evaluation::target_errors(phi_hat, |x| truth.eval(x), targets)?;
    ScoreSet::from_errors(&errors)
}

/// Graded candidate transformations for one run; the first is `φ` itself and
/// true `s₂` is strictly increasing.
pub fn ranking_candidates(setup: &RunSetup, config: &BenchmarkConfig, ranking: &RankingConfig) -> Result<Vec<TransformField>> {
    let geometry = config.geometry()?;
    let base = derive_seed(setup.run_seed, STREAM_RANKING);
    let unit = DeformationParams {
        amplitude: Some(1.0),
        ..config.deformation.clone()
    };
    let points = ranking.scoring_points(setup);
    let mut out = vec![setup.truth.clone()];
    let mut previous = 0.0;
    for k in 1..ranking.candidates {
        let level = ranking.max_error * k as f64 / (ranking.candidates - 1) as f64;
        let direction = sample_velocity(&geometry, &unit, derive_seed(base, k as u64))?;
        let (field, s2) = graded_candidate(&setup.truth, &direction, &points, level)?;
        if s2 <= previous {
            return Err(Error::Degenerate(format!("candidate {k} breaks the s2 grading")));
        }
        previous = s2;
        out.push(field);
    }
    Ok(out)
}

fn ranking_metrics(
    setup: &RunSetup,
    config: &BenchmarkConfig,
    kernel: &KernelSpec,
    ranking: &RankingConfig,
) -> Result<Vec<(&'static str, f64)>> {
    let fields = ranking_candidates(setup, config, ranking)?;
    let (session, _, _) = run_strategy(setup, config, kernel, ranking.strategy, ranking.budget)?;
    let targets = &ranking.scoring_points(setup);
    let mut truth = Vec::with_capacity(fields.len());
    let mut landmark = Vec::with_capacity(fields.len());
    let mut proposed = Vec::with_capacity(fields.len());
    for f in &fields {
        truth.push(true_scores(f, &setup.truth, targets)?.s2);
        landmark.push(landmark_scores(f, session.annotations())?.s2);
        proposed.push(proposed_scores(f, &session, targets)?.s2);
    }
    let mae = |pred: &[f64]| pred.iter().zip(&truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64;
    Ok(vec![
        ("spearman_landmark", spearman(&landmark, &truth).unwrap_or(f64::NAN)),
        ("spearman_proposed", spearman(&proposed, &truth).unwrap_or(f64::NAN)),
        ("mae_s2_landmark", mae(&landmark)),
        ("mae_s2_proposed", mae(&proposed)),
    ])
}

pub fn run_single(config: &BenchmarkConfig, kernel: &KernelSpec, run_index: usize) -> Result<RunOutcome> {
    let setup = RunSetup::draw(config, run_index)?;
    let mut curves = Vec::new();
    for &strategy in &config.strategies {
        let (_, heldout, target) = run_strategy(&setup, config, kernel, strategy, config.budget)?;
        curves.push((strategy, "rmse_heldout", heldout));
        curves.push((strategy, "rmse_target", target));
    }
    let ranking = match &config.ranking {
        Some(r) => ranking_metrics(&setup, config, kernel, r)?,
        None => Vec::new(),
    };
    Ok(RunOutcome {
        run: run_index,
        curves,
        ranking,
    })
}

fn summarize(config: &BenchmarkConfig, kernel: &KernelSpec, outcomes: &[RunOutcome]) -> Summary {
    let mut final_values = BTreeMap::new();
    let mut median_curves = BTreeMap::new();
    let mut finals: BTreeMap<(Strategy, &str), Vec<f64>> = BTreeMap::new();
    for &strategy in &config.strategies {
        let mut per_metric = BTreeMap::new();
        let mut per_curve = BTreeMap::new();
        for metric in ["rmse_heldout", "rmse_target"] {
            let curves: Vec<&Vec<f64>> = outcomes
                .iter()
                .flat_map(|o| o.curves.iter())
                .filter(|(s, m, _)| *s == strategy && *m == metric)
                .map(|(_, _, v)| v)
                .collect();
            let last: Vec<f64> = curves.iter().map(|c| *c.last().unwrap_or(&f64::NAN)).collect();
            if let Some(s) = Spread::of(&last) {
                per_metric.insert(metric.to_string(), s);
            }
            let medians = (0..=config.budget)
                .map(|i| {
                    let col: Vec<f64> = curves.iter().filter_map(|c| c.get(i).copied()).collect();
                    Spread::of(&col).map_or(f64::NAN, |s| s.median)
                })
                .collect();
            per_curve.insert(metric.to_string(), medians);
            finals.insert((strategy, metric), last);
        }
        final_values.insert(strategy.to_string(), per_metric);
        median_curves.insert(strategy.to_string(), per_curve);
    }
    let mut paired_differences = BTreeMap::new();
    for (i, &a) in config.strategies.iter().enumerate() {
        for &b in &config.strategies[i + 1..] {
            let mut per_metric = BTreeMap::new();
            for metric in ["rmse_heldout", "rmse_target"] {
                let diffs: Vec<f64> = finals[&(a, metric)]
                    .iter()
                    .zip(&finals[&(b, metric)])
                    .map(|(x, y)| x - y)
                    .collect();
                if let Some(s) = Spread::of(&diffs) {
                    per_metric.insert(metric.to_string(), s);
                }
            }
            paired_differences.insert(format!("{a}-{b}"), per_metric);
        }
    }
    let mut ranking = BTreeMap::new();
    if let Some(first) = outcomes.first() {
        for (name, _) in &first.ranking {
            let values: Vec<f64> = outcomes
                .iter()
                .flat_map(|o| o.ranking.iter())
                .filter(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .collect();
            if let Some(s) = Spread::of(&values) {
                ranking.insert(name.to_string(), s);
            }
        }
    }
    Summary {
        runs: outcomes.len(),
        budget: config.budget,
        kernel: kernel.clone(),
        final_values,
        median_curves,
        paired_differences,
        ranking,
    }
}

fn flatten(config: &BenchmarkConfig, outcomes: &[RunOutcome]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for o in outcomes {
        for (strategy, metric, values) in &o.curves {
            for (iteration, v) in values.iter().enumerate() {
                rows.push(MetricRow {
                    run: o.run,
                    strategy: strategy.to_string(),
                    iteration,
                    metric: metric.to_string(),
                    value: *v,
                });
            }
        }
        if let Some(r) = &config.ranking {
            for (metric, v) in &o.ranking {
                rows.push(MetricRow {
                    run: o.run,
                    strategy: r.strategy.to_string(),
                    iteration: r.budget,
                    metric: metric.to_string(),
                    value: *v,
                });
            }
        }
    }
    rows
}

/// Runs every configured repetition in parallel and collects the tables.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkResult> {
    config.validate()?;
    let kernel = benchmark_kernel(config)?;
    let outcomes = (0..config.runs)
        .into_par_iter()
        .map(|run| run_single(config, &kernel, run))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(config, &kernel, &outcomes);
    Ok(BenchmarkResult {
        config: config.clone(),
        kernel,
        rows: flatten(config, &outcomes),
        summary,
    })
}

/// Writes the ground truth of every run as `run_<i>.json` / `run_<i>.raw`.
pub fn save_ground_truths(config: &BenchmarkConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    (0..config.runs).into_par_iter().try_for_each(|run| {
        let setup = RunSetup::draw(config, run)?;
        setup.truth.write_raw(&dir.join(format!("run_{run}")))
    })
}
