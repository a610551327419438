//! Scoring candidate transformations against annotations, with both the
//! landmark-based and the posterior-based scores.
//!
//! Output files `scores_landmark.csv` and `scores_proposed.csv` share the
//! columns `candidate_id,s1,s2,sinf,rank`; ranks are by `s2`, 1 = best.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use regmark_core::evaluation::{landmark_scores, proposed_scores, PNorm, ScoreMethod, ScoreReport};
use regmark_core::{Annotation, GpSession, KernelSpec, TransformField};

pub const LANDMARK_FILE: &str = "scores_landmark.csv";
pub const PROPOSED_FILE: &str = "scores_proposed.csv";

/// Every `<name>.json` with a sibling `<name>.raw` in `dir`, sorted by name.
pub fn load_transforms(dir: &Path) -> anyhow::Result<Vec<(String, TransformField)>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.with_extension("raw").is_file())
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no transforms (<name>.json + <name>.raw) in {}", dir.display());
    }
    names
        .into_iter()
        .map(|n| {
            let field = TransformField::read_raw(&dir.join(&n)).with_context(|| format!("reading transform {n}"))?;
            Ok((n, field))
        })
        .collect()
}

pub fn load_annotations(path: &Path) -> anyhow::Result<Vec<Annotation>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let annotations = if is_json {
        regmark_core::annotation::read_annotations_json(file)?
    } else {
        regmark_core::annotation::read_annotations_csv(file)?
    };
    if annotations.is_empty() {
        bail!("{} holds no annotations", path.display());
    }
    Ok(annotations)
}

/// Points listed as a JSON array of coordinate arrays.
pub fn load_points(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub landmark: ScoreReport,
    pub proposed: ScoreReport,
}

/// Scores every transform. Without explicit `targets` the proposed score
/// uses the nodes of the first transform's grid, every `stride` nodes.
pub fn evaluate(
    annotations: &[Annotation],
    transforms: &[(String, TransformField)],
    kernel: &KernelSpec,
    targets: Option<Vec<Vec<f64>>>,
    stride: usize,
) -> anyhow::Result<Evaluation> {
    let d = kernel.dimension();
    if let Some(a) = annotations.iter().find(|a| a.dimension() != d) {
        bail!("annotation at {:?} is {}-D but the kernel is {d}-D", a.x, a.dimension());
    }
    if let Some((name, t)) = transforms.iter().find(|(_, t)| t.dimension() != d) {
        bail!("transform {name} is {}-D but the kernel is {d}-D", t.dimension());
    }
    let targets = match targets {
        Some(t) => t,
        None => transforms[0].1.geometry.strided(stride.max(1)).node_points(),
    };
    if let Some(t) = targets.iter().find(|t| t.len() != d) {
        bail!("target {t:?} is not {d}-D");
    }
    let mut session = GpSession::new(kernel.clone());
    for a in annotations {
        session.add_annotation(a.clone())?;
    }
    let ids: Vec<String> = transforms.iter().map(|(n, _)| n.clone()).collect();
    let mut landmark = Vec::with_capacity(transforms.len());
    let mut proposed = Vec::with_capacity(transforms.len());
    for (name, t) in transforms {
        landmark.push(landmark_scores(t, session.annotations()).with_context(|| format!("landmark scores of {name}"))?);
        proposed.push(proposed_scores(t, &session, &targets).with_context(|| format!("proposed scores of {name}"))?);
    }
    Ok(Evaluation {
        landmark: ScoreReport::new(ScoreMethod::Landmark, ids.clone(), &landmark, PNorm::Two)?,
        proposed: ScoreReport::new(ScoreMethod::Proposed, ids, &proposed, PNorm::Two)?,
    })
}

/// Writes both reports into `out`; returns their paths.
pub fn write_reports(evaluation: &Evaluation, out: &Path) -> anyhow::Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let landmark = out.join(LANDMARK_FILE);
    let proposed = out.join(PROPOSED_FILE);
    evaluation.landmark.write_csv(fs::File::create(&landmark)?)?;
    evaluation.proposed.write_csv(fs::File::create(&proposed)?)?;
    Ok((landmark, proposed))
}
