//! Paired-corruption data curation.
//!
//! Four strategies manufacture (degraded, clean, reference) triples from
//! procedural scenes: sparse reconstruction, cycle reconstruction, cross
//! reference, and model underfitting. Corruption comes from fitting one of
//! the two scene representations under the strategy's handicap and
//! rendering it where exact ground truth is available.

use super::{generate_scene, rig_trajectories, GroundTruthScene, ProceduralSceneSpec};
use crate::geometry::{Camera, CameraRecord};
use crate::img::{Image, ImageError};
use crate::scene::{
    optimize_scene, Aabb, GaussianCloud, GaussianParticle, OptimizeConfig, RadianceFieldGrid,
    RenderConfig, SceneError, SceneRepresentation, TrainView,
};
use crate::seeds;
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("sparse reconstruction kept {0} frames; needs at least 3")]
    TooFewKeptFrames(usize),
    #[error("holdout stride must be >= 2, got {0}")]
    StrideTooSmall(usize),
    #[error("underfit fraction {0} outside [0, 1]")]
    FractionOutOfRange(f64),
    #[error("cross reference needs >= 2 rig trajectories, got {0}")]
    SingleTrajectory(usize),
    #[error("family ratios must be non-negative and sum to 1, got {0}")]
    BadRatios(f64),
    #[error("scene {0} appears in both train and val splits")]
    DuplicateSceneInSplits(String),
    #[error("duplicate scene id {0} in specs")]
    DuplicateSceneId(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest decode: {0}")]
    Manifest(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CurationError + '_ {
    move |source| CurationError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurationStrategy {
    SparseReconstruction,
    CycleReconstruction,
    CrossReference,
    ModelUnderfitting,
}

impl CurationStrategy {
    pub fn all() -> [CurationStrategy; 4] {
        [
            CurationStrategy::SparseReconstruction,
            CurationStrategy::CycleReconstruction,
            CurationStrategy::CrossReference,
            CurationStrategy::ModelUnderfitting,
        ]
    }

    pub fn dir_name(&self) -> &'static str {
        match self {
            CurationStrategy::SparseReconstruction => "sparse-reconstruction",
            CurationStrategy::CycleReconstruction => "cycle-reconstruction",
            CurationStrategy::CrossReference => "cross-reference",
            CurationStrategy::ModelUnderfitting => "model-underfitting",
        }
    }
}

/// Which representation family produced the corruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionFamily {
    Field,
    Gaussians,
}

/// The fixer's training atom.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub degraded: Image,
    pub clean: Image,
    pub references: Vec<(Camera, Image)>,
    pub camera: Camera,
    pub strategy: CurationStrategy,
    pub family: CorruptionFamily,
    pub scene_id: String,
    pub frame_idx: usize,
}

/// Fitting budget shared by every corruption fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub grid_resolution: usize,
    pub n_particles: usize,
    /// Full training budget in iterations (the underfitting strategy
    /// scales this down).
    pub full_iters: usize,
    pub lr_field: f64,
    pub lr_cloud: f64,
    pub rays_per_batch: usize,
    pub stride_divisor: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            grid_resolution: 24,
            n_particles: 180,
            full_iters: 360,
            lr_field: 1e-2,
            lr_cloud: 5e-3,
            rays_per_batch: 1024,
            stride_divisor: 192,
        }
    }
}

impl FitConfig {
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig { stride_divisor: self.stride_divisor, ..Default::default() }
    }
}

/// Fits one representation of `family` on the given views.
pub fn fit_representation(
    scene: &GroundTruthScene,
    views: Vec<TrainView>,
    family: CorruptionFamily,
    fit: &FitConfig,
    iters: usize,
    seed: u64,
) -> Result<SceneRepresentation, CurationError> {
    let bounds = scene.extent;
    let mut rep = match family {
        CorruptionFamily::Field => {
            let r = fit.grid_resolution;
            SceneRepresentation::Field(RadianceFieldGrid::fit_ready([r, r, r], bounds))
        }
        CorruptionFamily::Gaussians => {
            SceneRepresentation::Gaussians(init_cloud(scene, &views, bounds, fit, seed))
        }
    };
    let lr = match family {
        CorruptionFamily::Field => fit.lr_field,
        CorruptionFamily::Gaussians => fit.lr_cloud,
    };
    let cfg = OptimizeConfig {
        n_iters: iters,
        lr,
        rays_per_batch: Some(fit.rays_per_batch),
        seed: seeds::derive(seed, "fit"),
    };
    optimize_scene(&mut rep, &views, &cfg, &fit.render_config())?;
    Ok(rep)
}

/// Particle init: surface samples visible from the training cameras stand
/// in for a sparse SfM point cloud, with colors taken from the training
/// images themselves.
fn init_cloud(
    scene: &GroundTruthScene,
    views: &[TrainView],
    bounds: Aabb,
    fit: &FitConfig,
    seed: u64,
) -> GaussianCloud {
    let mut rng = seeds::rng(seed, "cloud-init");
    let mut particles = Vec::with_capacity(fit.n_particles);
    let mut guard = 0;
    while particles.len() < fit.n_particles && guard < fit.n_particles * 40 {
        guard += 1;
        let v = &views[rng.gen_range(0..views.len())];
        let x = rng.gen_range(0..v.camera.width());
        let y = rng.gen_range(0..v.camera.height());
        let Some(p) = scene.surface_point(&v.camera, x, y) else { continue };
        if p.x < bounds.min.x || p.x > bounds.max.x || p.z < bounds.min.z || p.z > bounds.max.z {
            continue;
        }
        let color = v.image.get(y as usize, x as usize);
        let jitter = Vector3::new(
            rng.gen_range(-0.03..0.03),
            rng.gen_range(-0.03..0.03),
            rng.gen_range(-0.03..0.03),
        );
        particles.push(GaussianParticle {
            position: p + jitter,
            rotation: nalgebra::UnitQuaternion::identity(),
            scale: Vector3::new(0.12, 0.12, 0.12),
            opacity: 0.5,
            color,
        });
    }
    // Fallback when cameras see mostly background.
    while particles.len() < fit.n_particles.min(8) {
        particles.push(GaussianParticle {
            position: bounds.center(),
            rotation: nalgebra::UnitQuaternion::identity(),
            scale: Vector3::new(0.3, 0.3, 0.3),
            opacity: 0.3,
            color: [0.5, 0.5, 0.5],
        });
    }
    GaussianCloud::from_particles(bounds, &particles)
}

/// Indices of the `n_refs` nearest candidate cameras to `target`, nearest
/// camera center first, ties broken by smaller rotation angle. `exclude`
/// marks the sample's own camera.
pub fn nearest_references(
    candidates: &[Camera],
    target: &Camera,
    exclude: Option<usize>,
    n_refs: usize,
) -> Vec<usize> {
    let mut scored: Vec<(usize, f64, f64)> = candidates
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, c)| {
            let dist = (c.center() - target.center()).norm();
            let angle = c.pose.rotation.angle_to(&target.pose.rotation);
            (i, dist, angle)
        })
        .collect();
    scored.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .expect("finite distances")
            .then(a.2.partial_cmp(&b.2).expect("finite angles"))
            .then(a.0.cmp(&b.0))
    });
    scored.into_iter().take(n_refs).map(|(i, _, _)| i).collect()
}

fn gt_views(scene: &GroundTruthScene, cameras: &[Camera]) -> Vec<TrainView> {
    cameras
        .iter()
        .map(|&camera| TrainView { camera, image: scene.render(&camera), weight: 1.0 })
        .collect()
}

/// Holds out every frame not on the stride grid, fits on the kept frames,
/// and pairs held-out renders with ground truth.
pub fn sparse_reconstruction_pairs(
    scene: &GroundTruthScene,
    scene_id: &str,
    trajectory: &[Camera],
    holdout_stride: usize,
    family: CorruptionFamily,
    fit: &FitConfig,
    n_refs: usize,
    seed: u64,
) -> Result<Vec<PairedSample>, CurationError> {
    if holdout_stride < 2 {
        return Err(CurationError::StrideTooSmall(holdout_stride));
    }
    let kept_idx: Vec<usize> = (0..trajectory.len()).step_by(holdout_stride).collect();
    if kept_idx.len() < 3 {
        return Err(CurationError::TooFewKeptFrames(kept_idx.len()));
    }
    let kept_cams: Vec<Camera> = kept_idx.iter().map(|&i| trajectory[i]).collect();
    let views = gt_views(scene, &kept_cams);
    let rep = fit_representation(scene, views.clone(), family, fit, fit.full_iters, seed)?;
    let rcfg = fit.render_config();

    let mut out = Vec::new();
    for (i, &camera) in trajectory.iter().enumerate() {
        if i % holdout_stride == 0 {
            continue;
        }
        let degraded = rep.render(&camera, &rcfg).rgb;
        let clean = scene.render(&camera);
        let refs = nearest_references(&kept_cams, &camera, None, n_refs)
            .into_iter()
            .map(|j| (kept_cams[j], views[j].image.clone()))
            .collect();
        out.push(PairedSample {
            degraded,
            clean,
            references: refs,
            camera,
            strategy: CurationStrategy::SparseReconstruction,
            family,
            scene_id: scene_id.to_string(),
            frame_idx: i,
        });
    }
    Ok(out)
}

/// Fits model A on the path, re-renders from a laterally shifted path,
/// fits model B on those renders, and pairs B's renders on the original
/// path with ground truth. Shifts outside the empirically useful 1-6 m
/// band yield a warning, not an error.
pub fn cycle_reconstruction_pairs(
    scene: &GroundTruthScene,
    scene_id: &str,
    trajectory: &[Camera],
    shift_m: f64,
    family: CorruptionFamily,
    fit: &FitConfig,
    n_refs: usize,
    seed: u64,
) -> Result<(Vec<PairedSample>, Vec<String>), CurationError> {
    let mut warnings = Vec::new();
    if !(1.0..=6.0).contains(&shift_m) {
        warnings.push(format!(
            "cycle shift {shift_m} m outside the empirical 1-6 m range"
        ));
    }
    let views_a = gt_views(scene, trajectory);
    let model_a =
        fit_representation(scene, views_a.clone(), family, fit, fit.full_iters, seed)?;
    let rcfg = fit.render_config();

    // Shift each camera along its horizontal right axis.
    let shifted: Vec<Camera> = trajectory
        .iter()
        .map(|c| {
            let right = c.pose.rotation * Vector3::new(1.0, 0.0, 0.0);
            let mut lateral = Vector3::new(right.x, 0.0, right.z);
            if lateral.norm() < 1e-9 {
                lateral = Vector3::new(1.0, 0.0, 0.0);
            } else {
                lateral = lateral.normalize();
            }
            Camera::new(
                c.intrinsics,
                crate::geometry::Pose::new(c.pose.rotation, c.pose.translation + shift_m * lateral),
            )
        })
        .collect();
    let views_b: Vec<TrainView> = shifted
        .iter()
        .map(|&camera| TrainView { camera, image: model_a.render(&camera, &rcfg).rgb, weight: 1.0 })
        .collect();
    let model_b = fit_representation(
        scene,
        views_b,
        family,
        fit,
        fit.full_iters,
        seeds::derive(seed, "cycle-b"),
    )?;

    let mut out = Vec::new();
    for (i, &camera) in trajectory.iter().enumerate() {
        let degraded = model_b.render(&camera, &rcfg).rgb;
        let clean = scene.render(&camera);
        let refs = nearest_references(trajectory, &camera, Some(i), n_refs)
            .into_iter()
            .map(|j| (trajectory[j], views_a[j].image.clone()))
            .collect();
        out.push(PairedSample {
            degraded,
            clean,
            references: refs,
            camera,
            strategy: CurationStrategy::CycleReconstruction,
            family,
            scene_id: scene_id.to_string(),
            frame_idx: i,
        });
    }
    Ok((out, warnings))
}

/// Fits with a reduced iteration budget and pairs same-trajectory renders
/// with ground truth.
pub fn underfit_pairs(
    scene: &GroundTruthScene,
    scene_id: &str,
    trajectory: &[Camera],
    fraction: f64,
    family: CorruptionFamily,
    fit: &FitConfig,
    n_refs: usize,
    seed: u64,
) -> Result<Vec<PairedSample>, CurationError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CurationError::FractionOutOfRange(fraction));
    }
    let iters = ((fit.full_iters as f64) * fraction).round() as usize;
    let views = gt_views(scene, trajectory);
    let rep = fit_representation(scene, views.clone(), family, fit, iters, seed)?;
    let rcfg = fit.render_config();
    let mut out = Vec::new();
    for (i, &camera) in trajectory.iter().enumerate() {
        let degraded = rep.render(&camera, &rcfg).rgb;
        let clean = views[i].image.clone();
        let refs = nearest_references(trajectory, &camera, Some(i), n_refs)
            .into_iter()
            .map(|j| (trajectory[j], views[j].image.clone()))
            .collect();
        out.push(PairedSample {
            degraded,
            clean,
            references: refs,
            camera,
            strategy: CurationStrategy::ModelUnderfitting,
            family,
            scene_id: scene_id.to_string(),
            frame_idx: i,
        });
    }
    Ok(out)
}

/// Fits on the center rig camera only and pairs held-out side-camera
/// renders with ground truth; references come from the center trajectory,
/// temporally nearest frame first.
pub fn cross_reference_pairs(
    scene: &GroundTruthScene,
    scene_id: &str,
    rig: &[Vec<Camera>],
    family: CorruptionFamily,
    fit: &FitConfig,
    n_refs: usize,
    seed: u64,
) -> Result<Vec<PairedSample>, CurationError> {
    if rig.len() < 2 {
        return Err(CurationError::SingleTrajectory(rig.len()));
    }
    let center = &rig[0];
    let center_views = gt_views(scene, center);
    let rep = fit_representation(scene, center_views.clone(), family, fit, fit.full_iters, seed)?;
    let rcfg = fit.render_config();
    let mut out = Vec::new();
    for side in &rig[1..] {
        for (frame, &camera) in side.iter().enumerate() {
            let degraded = rep.render(&camera, &rcfg).rgb;
            let clean = scene.render(&camera);
            // Temporally nearest center frames: same index, then neighbors.
            let mut order: Vec<usize> = (0..center.len()).collect();
            order.sort_by_key(|&j| (j as i64 - frame as i64).unsigned_abs());
            let refs: Vec<(Camera, Image)> = order
                .into_iter()
                .take(n_refs)
                .map(|j| (center[j], center_views[j].image.clone()))
                .collect();
            out.push(PairedSample {
                degraded,
                clean,
                references: refs,
                camera,
                strategy: CurationStrategy::CrossReference,
                family,
                scene_id: scene_id.to_string(),
                frame_idx: out.len(),
            });
        }
    }
    Ok(out)
}

/// Dataset-level configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub holdout_stride: usize,
    pub cycle_shift_m: f64,
    pub underfit_fraction: f64,
    pub rig_separation_deg: f64,
    /// Reference views conditioning each sample (V_ref).
    pub n_references: usize,
    /// Fraction of samples corrupted by the voxel-field family; the rest
    /// use the Gaussian family.
    pub family_ratio_field: f64,
    pub pair_budget: usize,
    pub val_fraction: f64,
    pub fit: FitConfig,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            holdout_stride: 2,
            cycle_shift_m: 2.0,
            underfit_fraction: 0.4,
            rig_separation_deg: 40.0,
            n_references: 1,
            family_ratio_field: 0.5,
            pair_budget: 2000,
            val_fraction: 0.25,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleRecord {
    pub scene_id: String,
    pub strategy: CurationStrategy,
    pub family: CorruptionFamily,
    pub split: String,
    pub frame_idx: usize,
    pub rel_dir: String,
    pub n_references: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub root_seed: u64,
    pub n_references: usize,
    pub train_scenes: Vec<String>,
    pub val_scenes: Vec<String>,
    pub strategy_counts: BTreeMap<String, usize>,
    pub family_counts: BTreeMap<String, usize>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), CurationError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CurationError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        for s in &m.train_scenes {
            if m.val_scenes.contains(s) {
                return Err(CurationError::DuplicateSceneInSplits(s.clone()));
            }
        }
        Ok(m)
    }

    pub fn records_for_split(&self, split: &str) -> Vec<&SampleRecord> {
        self.samples.iter().filter(|r| r.split == split).collect()
    }
}

/// Writes one sample under its directory: degraded.png, clean.png,
/// ref_i.png, cameras.json.
fn write_sample(dir: &Path, sample: &PairedSample) -> Result<(), CurationError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut degraded = sample.degraded.clone();
    degraded.quantize();
    degraded.save_png(&dir.join("degraded.png"))?;
    let mut clean = sample.clean.clone();
    clean.quantize();
    clean.save_png(&dir.join("clean.png"))?;
    for (i, (_, img)) in sample.references.iter().enumerate() {
        let mut r = img.clone();
        r.quantize();
        r.save_png(&dir.join(format!("ref_{i}.png")))?;
    }
    let cams = serde_json::json!({
        "camera": CameraRecord::from(&sample.camera),
        "references": sample.references.iter().map(|(c, _)| CameraRecord::from(c)).collect::<Vec<_>>(),
    });
    let path = dir.join("cameras.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cams)?).map_err(io_err(&path))?;
    Ok(())
}

/// Reads a sample back from disk.
pub fn load_sample(root: &Path, record: &SampleRecord) -> Result<PairedSample, CurationError> {
    let dir = root.join(&record.rel_dir);
    let degraded = Image::load_png(&dir.join("degraded.png"))?;
    let clean = Image::load_png(&dir.join("clean.png"))?;
    let path = dir.join("cameras.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let cams: serde_json::Value = serde_json::from_str(&text)?;
    let camera_rec: CameraRecord = serde_json::from_value(cams["camera"].clone())?;
    let ref_recs: Vec<CameraRecord> = serde_json::from_value(cams["references"].clone())?;
    let mut references = Vec::with_capacity(ref_recs.len());
    for (i, rec) in ref_recs.iter().enumerate() {
        let img = Image::load_png(&dir.join(format!("ref_{i}.png")))?;
        references.push((Camera::from(rec), img));
    }
    Ok(PairedSample {
        degraded,
        clean,
        references,
        camera: Camera::from(&camera_rec),
        strategy: record.strategy,
        family: record.family,
        scene_id: record.scene_id.clone(),
        frame_idx: record.frame_idx,
    })
}

/// Expected sample count of one (scene, strategy) job, without fitting.
fn job_sample_count(
    spec: &ProceduralSceneSpec,
    strategy: CurationStrategy,
    cfg: &CurationConfig,
) -> usize {
    let n = spec.n_frames;
    match strategy {
        CurationStrategy::SparseReconstruction => n - n.div_ceil(cfg.holdout_stride),
        CurationStrategy::CycleReconstruction => n,
        CurationStrategy::ModelUnderfitting => n,
        CurationStrategy::CrossReference => 2 * n,
    }
}

/// Builds the dataset on disk and returns (manifest, warnings).
///
/// Samples interleave the two corruption families per the configured ratio
/// (largest-remainder assignment, so global family counts track the ratio
/// within one sample). Splits are by scene, never by frame.
pub fn build_dataset(
    specs: &[ProceduralSceneSpec],
    strategies: &[CurationStrategy],
    cfg: &CurationConfig,
    root: &Path,
    root_seed: u64,
) -> Result<(DatasetManifest, Vec<String>), CurationError> {
    let ratio = cfg.family_ratio_field;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CurationError::BadRatios(ratio));
    }
    std::fs::create_dir_all(root).map_err(io_err(root))?;

    // Scene ids and split assignment (by scene).
    let scene_ids: Vec<String> =
        (0..specs.len()).map(|i| format!("scene-{i:03}")).collect();
    {
        let mut seen = std::collections::BTreeSet::new();
        for id in &scene_ids {
            if !seen.insert(id.clone()) {
                return Err(CurationError::DuplicateSceneId(id.clone()));
            }
        }
    }
    let n_val = ((specs.len() as f64) * cfg.val_fraction).ceil() as usize;
    let n_val = n_val.clamp(usize::from(specs.len() > 1), specs.len().saturating_sub(1).max(1));
    let mut order: Vec<usize> = (0..specs.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = seeds::rng(root_seed, "curation/split");
        order.shuffle(&mut rng);
    }
    let val_set: std::collections::BTreeSet<usize> = order.into_iter().take(n_val).collect();

    let mut manifest = DatasetManifest {
        schema_version: 1,
        root_seed,
        n_references: cfg.n_references,
        train_scenes: Vec::new(),
        val_scenes: Vec::new(),
        strategy_counts: BTreeMap::new(),
        family_counts: BTreeMap::new(),
        samples: Vec::new(),
    };
    for (i, id) in scene_ids.iter().enumerate() {
        if val_set.contains(&i) {
            manifest.val_scenes.push(id.clone());
        } else {
            manifest.train_scenes.push(id.clone());
        }
    }

    let mut warnings = Vec::new();
    // Largest-remainder family assignment over the global sample stream.
    let mut assigned_field = 0usize;
    let mut assigned_total = 0usize;
    let mut next_family = |ratio: f64| -> CorruptionFamily {
        assigned_total += 1;
        let want_field = (ratio * assigned_total as f64).floor() as usize;
        if assigned_field < want_field {
            assigned_field += 1;
            CorruptionFamily::Field
        } else {
            CorruptionFamily::Gaussians
        }
    };

    'outer: for (si, spec) in specs.iter().enumerate() {
        let scene_id = &scene_ids[si];
        let split = if val_set.contains(&si) { "val" } else { "train" };
        let (scene, reference, _target) = generate_scene(spec);
        for &strategy in strategies {
            if manifest.samples.len() >= cfg.pair_budget {
                break 'outer;
            }
            let k = job_sample_count(spec, strategy, cfg);
            let families: Vec<CorruptionFamily> =
                (0..k).map(|_| next_family(ratio)).collect();
            let job_seed = seeds::derive(root_seed, &format!("curation/{scene_id}/{strategy:?}"));
            // One fit per family actually present in this job.
            let mut per_family: BTreeMap<CorruptionFamily, Vec<PairedSample>> = BTreeMap::new();
            for family in [CorruptionFamily::Field, CorruptionFamily::Gaussians] {
                if !families.contains(&family) {
                    continue;
                }
                let samples = match strategy {
                    CurationStrategy::SparseReconstruction => sparse_reconstruction_pairs(
                        &scene,
                        scene_id,
                        &reference,
                        cfg.holdout_stride,
                        family,
                        &cfg.fit,
                        cfg.n_references,
                        seeds::derive(job_seed, "sparse"),
                    )?,
                    CurationStrategy::CycleReconstruction => {
                        let (samples, mut warn) = cycle_reconstruction_pairs(
                            &scene,
                            scene_id,
                            &reference,
                            cfg.cycle_shift_m,
                            family,
                            &cfg.fit,
                            cfg.n_references,
                            seeds::derive(job_seed, "cycle"),
                        )?;
                        warnings.append(&mut warn);
                        samples
                    }
                    CurationStrategy::ModelUnderfitting => underfit_pairs(
                        &scene,
                        scene_id,
                        &reference,
                        cfg.underfit_fraction,
                        family,
                        &cfg.fit,
                        cfg.n_references,
                        seeds::derive(job_seed, "underfit"),
                    )?,
                    CurationStrategy::CrossReference => {
                        let rig = rig_trajectories(&reference, cfg.rig_separation_deg);
                        cross_reference_pairs(
                            &scene,
                            scene_id,
                            &rig,
                            family,
                            &cfg.fit,
                            cfg.n_references,
                            seeds::derive(job_seed, "cross"),
                        )?
                    }
                };
                per_family.insert(family, samples);
            }

            for (idx, family) in families.iter().enumerate() {
                if manifest.samples.len() >= cfg.pair_budget {
                    break;
                }
                let Some(samples) = per_family.get(family) else { continue };
                let sample = &samples[idx];
                let rel_dir =
                    format!("{scene_id}/{}/{idx:03}", strategy.dir_name());
                write_sample(&root.join(&rel_dir), sample)?;
                *manifest
                    .strategy_counts
                    .entry(strategy.dir_name().to_string())
                    .or_insert(0) += 1;
                *manifest
                    .family_counts
                    .entry(format!("{family:?}").to_lowercase())
                    .or_insert(0) += 1;
                manifest.samples.push(SampleRecord {
                    scene_id: scene_id.clone(),
                    strategy,
                    family: *family,
                    split: split.to_string(),
                    frame_idx: sample.frame_idx,
                    rel_dir,
                    n_references: sample.references.len(),
                });
            }
        }
    }
    manifest.save(&root.join("manifest.json"))?;
    Ok((manifest, warnings))
}
