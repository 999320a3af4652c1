//! Procedural ground truth: a Gaussian scene in a box, camera segments on a
//! ring around it, dense intensity sequences and the simulated spike streams.
//!
//! Dataset layout on disk:
//!
//! ```text
//! scene.json            intrinsics, poses, perturbed poses, GT primitives, constants
//! view_%03d.spk         spike stream of each view
//! gt/view_%03d.tsr      [M, H, W] sharp frames at the sampled timestamps
//! blur/view_%03d.tsr    [H, W] mean of the exposure frames
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::formats::{read_tensor, round_to_f32, write_tensor};
use crate::image::Image;
use crate::se3::{perturb_pose, se3_exp, Mat3, Pose, TrajectorySegment, Twist, Vec3};
use crate::spike::{
    read_spk, simulate_spikes, tfp, write_spk, ExposureLayout, InitialCharge, IntensitySequence,
    SpikeSimConfig, SpikeStream,
};
use crate::splat::{rasterize, Camera, GaussianSet, Intrinsics};

/// Perturbation levels stored with every dataset, in percent.
pub const PERTURB_LEVELS: [u32; 4] = [0, 10, 20, 30];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub gaussians: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    /// Side length of the cube centred at the origin.
    pub box_size: f64,
    /// Scale bounds as fractions of the box side.
    pub scale_range: (f64, f64),
    pub opacity_range: (f64, f64),
    pub color_range: (f64, f64),
    pub camera_distance: f64,
    pub camera_height: f64,
    pub focal: f64,
    /// Camera translation over the exposure, in scene units.
    pub motion_translation: f64,
    /// Camera rotation over the exposure, in radians.
    pub motion_rotation: f64,
    pub threshold: f64,
    pub layout: ExposureLayout,
    pub intensity_band: (f64, f64),
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gaussians: 64,
            views: 8,
            width: 32,
            height: 32,
            box_size: 1.0,
            scale_range: (0.04, 0.15),
            opacity_range: (0.5, 0.95),
            color_range: (0.2, 0.95),
            camera_distance: 2.5,
            camera_height: 0.8,
            focal: 40.0,
            motion_translation: 0.25,
            motion_rotation: 0.04,
            threshold: 1.0,
            layout: ExposureLayout::default(),
            intensity_band: (0.1, 0.7),
            max_attempts: 100,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.gaussians == 0 || self.views == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene needs primitives, views and pixels"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("scale range must be positive and ordered"));
        }
        let (lo, hi) = self.opacity_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::invalid("opacity range must lie inside (0, 1)"));
        }
        let (lo, hi) = self.color_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::invalid("colour range must lie inside (0, 1)"));
        }
        if !(self.box_size > 0.0 && self.focal > 0.0) {
            return Err(Error::invalid("box size and focal length must be positive"));
        }
        if self.camera_distance <= self.box_size {
            return Err(Error::invalid("cameras must sit outside the scene box"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::invalid("spike threshold must be positive"));
        }
        if self.max_attempts == 0 {
            return Err(Error::invalid("max_attempts must be positive"));
        }
        Ok(())
    }

    pub fn box_bounds(&self) -> (Vec3, Vec3) {
        let h = self.box_size / 2.0;
        (Vec3::repeat(-h), Vec3::repeat(h))
    }

    pub fn scene_diag(&self) -> f64 {
        self.box_size * 3f64.sqrt()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::centered(self.focal, self.width, self.height)
    }
}

/// Ground-truth and perturbed camera-to-world endpoints of one exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSpec {
    pub start: Pose,
    pub end: Pose,
    pub perturbed: BTreeMap<u32, (Pose, Pose)>,
}

impl ViewSpec {
    pub fn segment(&self, layout: &ExposureLayout) -> Result<TrajectorySegment> {
        TrajectorySegment::new(self.start, self.end, layout.duration())
    }

    pub fn perturbed_segment(&self, level: u32, layout: &ExposureLayout) -> Result<TrajectorySegment> {
        let (s, e) = self
            .perturbed
            .get(&level)
            .ok_or_else(|| Error::invalid(format!("dataset has no perturbation level {level}")))?;
        TrajectorySegment::new(*s, *e, layout.duration())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub gaussians: GaussianSet,
    pub intrinsics: Intrinsics,
    pub box_lo: Vec3,
    pub box_hi: Vec3,
    pub threshold: f64,
    pub layout: ExposureLayout,
    pub views: Vec<ViewSpec>,
}

impl SceneSpec {
    pub fn scene_diag(&self) -> f64 {
        (self.box_hi - self.box_lo).norm()
    }
}

/// Camera-to-world pose looking from `eye` at `target`; image `y` points away from `up`.
pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Pose> {
    let z = (target - eye)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::invalid("eye and target coincide"))?;
    let x = z
        .cross(&up)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::invalid("viewing direction is parallel to up"))?;
    let y = z.cross(&x);
    Pose::new(Mat3::from_columns(&[x, y, z]), eye)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn random_unit_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q = [0; 4].map(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            return q.map(|v| v / n);
        }
    }
}

fn sample_gaussians(cfg: &SceneConfig, rng: &mut impl Rng) -> GaussianSet {
    let (lo, hi) = cfg.box_bounds();
    let (smin, smax) = (cfg.scale_range.0 * cfg.box_size, cfg.scale_range.1 * cfg.box_size);
    let mut g = GaussianSet::empty();
    for _ in 0..cfg.gaussians {
        let pos = Vec3::from_fn(|a, _| rng.gen_range(lo[a]..=hi[a]));
        let log_scale = Vec3::from_fn(|_, _| rng.gen_range(smin.ln()..=smax.ln()));
        let rot = random_unit_quaternion(rng);
        let opacity = rng.gen_range(cfg.opacity_range.0..=cfg.opacity_range.1);
        let color = rng.gen_range(cfg.color_range.0..=cfg.color_range.1);
        g.push(pos, log_scale, rot, logit(opacity), logit(color));
    }
    g
}

fn view_rng(seed: u64, view: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + stream * 4096 + view as u64);
    rng
}

fn sample_view(cfg: &SceneConfig, v: usize) -> Result<(Pose, Pose)> {
    let mut rng = view_rng(cfg.seed, v, 0);
    let phase = rng.gen_range(-0.2..0.2);
    let angle = std::f64::consts::TAU * v as f64 / cfg.views as f64 + phase;
    let height = cfg.camera_height * rng.gen_range(0.7..1.3);
    let eye = Vec3::new(
        cfg.camera_distance * angle.cos(),
        cfg.camera_distance * angle.sin(),
        height,
    );
    let center = look_at(eye, Vec3::zeros(), Vec3::z())?;
    // Motion in the camera frame: mostly sideways translation plus a small turn.
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let v_cam = Vec3::new(dir.cos(), dir.sin(), rng.gen_range(-0.3..0.3)).normalize() * cfg.motion_translation;
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let w_cam = axis.try_normalize(1e-9).unwrap_or_else(Vec3::x) * cfg.motion_rotation;
    let half = Twist::new(w_cam / 2.0, v_cam / 2.0);
    let start = center.compose(&se3_exp(&half.scaled(-1.0)));
    let end = center.compose(&se3_exp(&half));
    Ok((start, end))
}

/// Camera-to-world pose of stream frame `k`; frames before and after the
/// exposure extrapolate the constant-velocity motion.
pub fn frame_pose(seg: &TrajectorySegment, layout: &ExposureLayout, k: usize) -> Result<Pose> {
    let s = (k as f64 - layout.margin() as f64) / layout.duration();
    seg.pose_at_fraction(s)
}

fn in_frustum(g: &GaussianSet, cam: &Camera) -> bool {
    let i = &cam.intrinsics;
    (0..g.len()).all(|n| {
        let p = cam.world_to_camera.transform_point(&g.position(n));
        if p.z <= 0.1 {
            return false;
        }
        let u = i.fx * p.x / p.z + i.cx;
        let v = i.fy * p.y / p.z + i.cy;
        (0.0..i.width as f64).contains(&u) && (0.0..i.height as f64).contains(&v)
    })
}

/// Samples a scene, re-drawing primitives until every view keeps all of them
/// in frame and renders with a mean intensity inside the configured band.
pub fn gen_scene(cfg: &SceneConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let intr = cfg.intrinsics();
    let layout = cfg.layout;
    let (box_lo, box_hi) = cfg.box_bounds();
    let endpoints = (0..cfg.views)
        .map(|v| sample_view(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let segments = endpoints
        .iter()
        .map(|(s, e)| TrajectorySegment::new(*s, *e, layout.duration()))
        .collect::<Result<Vec<_>>>()?;
    let checked = [0, layout.total_frames / 2, layout.total_frames - 1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut accepted = None;
    let mut last_mean = f64::NAN;
    'attempt: for _ in 0..cfg.max_attempts {
        let g = sample_gaussians(cfg, &mut rng);
        for seg in &segments {
            for &k in &checked {
                let cam = Camera::from_camera_to_world(intr, &frame_pose(seg, &layout, k)?)?;
                if !in_frustum(&g, &cam) {
                    continue 'attempt;
                }
                last_mean = rasterize(&g, &cam)?.image.mean();
                if !(cfg.intensity_band.0..=cfg.intensity_band.1).contains(&last_mean) {
                    continue 'attempt;
                }
            }
        }
        accepted = Some(g);
        break;
    }
    let gaussians = accepted.ok_or_else(|| {
        Error::range(format!(
            "no scene satisfied the frustum and intensity constraints in {} attempts (last mean {last_mean:.3})",
            cfg.max_attempts
        ))
    })?;
    let diag = cfg.scene_diag();
    let views = endpoints
        .into_iter()
        .enumerate()
        .map(|(v, (start, end))| {
            let mut perturbed = BTreeMap::new();
            for level in PERTURB_LEVELS {
                let mut rng = view_rng(cfg.seed, v, 1 + level as u64);
                let frac = level as f64 / 100.0;
                let s = perturb_pose(&start, frac, diag, &mut rng)?;
                let e = perturb_pose(&end, frac, diag, &mut rng)?;
                perturbed.insert(level, (s, e));
            }
            Ok(ViewSpec { start, end, perturbed })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSpec {
        seed: cfg.seed,
        gaussians,
        intrinsics: intr,
        box_lo,
        box_hi,
        threshold: cfg.threshold,
        layout,
        views,
    })
}

/// Dense noiseless intensity of every stream frame of one view.
pub fn render_gt_sequence(spec: &SceneSpec, view: usize) -> Result<IntensitySequence> {
    let v = spec
        .views
        .get(view)
        .ok_or_else(|| Error::range(format!("view {view} of {}", spec.views.len())))?;
    let seg = v.segment(&spec.layout)?;
    let frames = (0..spec.layout.total_frames)
        .into_par_iter()
        .map(|k| {
            let cam = Camera::from_camera_to_world(spec.intrinsics, &frame_pose(&seg, &spec.layout, k)?)?;
            Ok(rasterize(&spec.gaussians, &cam)?.image)
        })
        .collect::<Result<Vec<_>>>()?;
    IntensitySequence::from_images(&frames)
}

/// Mean of the exposure frames of a dense sequence.
pub fn exposure_mean(seq: &IntensitySequence, layout: &ExposureLayout) -> Result<Image> {
    let m = layout.margin();
    seq.mean_over(m..=m + layout.exposure_frames - 1)
}

pub fn spike_config(spec: &SceneSpec, view: usize) -> SpikeSimConfig {
    SpikeSimConfig {
        threshold: spec.threshold,
        initial: InitialCharge::Random {
            seed: spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ view as u64,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewData {
    pub spikes: SpikeStream,
    /// Sharp frames at the sampled timestamps.
    pub gt_frames: Vec<Image>,
    /// Mean of the exposure frames.
    pub blur_reference: Image,
}

impl ViewData {
    /// Long-exposure TFP of the stored spikes over the exposure window.
    pub fn long_tfp(&self, spec: &SceneSpec) -> Result<Image> {
        let m = spec.layout.margin();
        tfp(&self.spikes, m..=m + spec.layout.exposure_frames - 1, spec.threshold)
    }
}

/// A scene with its per-view observations. Stored images carry `f32`
/// precision so that a disk roundtrip is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub views: Vec<ViewData>,
}

impl Dataset {
    pub fn generate(spec: SceneSpec) -> Result<Self> {
        let views = (0..spec.views.len())
            .map(|v| {
                let seq = render_gt_sequence(&spec, v)?;
                let spikes = simulate_spikes(&seq, &spike_config(&spec, v))?;
                let gt_frames = spec
                    .layout
                    .sample_frames()
                    .into_iter()
                    .map(|k| {
                        let img = Image::new(seq.height(), seq.width(), seq.frame(k).to_vec())?;
                        Ok(round_to_f32(&img))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let blur_reference = round_to_f32(&exposure_mean(&seq, &spec.layout)?);
                Ok(ViewData {
                    spikes,
                    gt_frames,
                    blur_reference,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, views })
    }

    pub fn height(&self) -> usize {
        self.spec.intrinsics.height
    }

    pub fn width(&self) -> usize {
        self.spec.intrinsics.width
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("gt"))?;
        fs::create_dir_all(dir.join("blur"))?;
        let json = serde_json::to_string_pretty(&SceneFile::from_spec(&self.spec))?;
        fs::write(dir.join("scene.json"), json)?;
        for (v, data) in self.views.iter().enumerate() {
            write_spk(dir.join(format!("view_{v:03}.spk")), &data.spikes)?;
            write_tensor(
                dir.join(format!("gt/view_{v:03}.tsr")),
                &Tensor::from_images(&data.gt_frames)?.reshape(&[
                    data.gt_frames.len(),
                    self.height(),
                    self.width(),
                ])?,
            )?;
            write_tensor(
                dir.join(format!("blur/view_{v:03}.tsr")),
                &Tensor::from_image(&data.blur_reference).reshape(&[self.height(), self.width()])?,
            )?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let file: SceneFile = serde_json::from_str(&fs::read_to_string(dir.join("scene.json"))?)?;
        let spec = file.into_spec()?;
        let (h, w) = (spec.intrinsics.height, spec.intrinsics.width);
        let views = (0..spec.views.len())
            .map(|v| {
                let spikes = read_spk(dir.join(format!("view_{v:03}.spk")))?;
                if spikes.frames() != spec.layout.total_frames || spikes.height() != h || spikes.width() != w {
                    return Err(Error::shape(format!("view {v} spike stream does not match scene.json")));
                }
                let gt = read_tensor(dir.join(format!("gt/view_{v:03}.tsr")))?;
                if gt.shape() != [spec.layout.samples, h, w] {
                    return Err(Error::shape(format!("view {v} GT frames have shape {:?}", gt.shape())));
                }
                let gt_frames = gt
                    .data()
                    .chunks(h * w)
                    .map(|c| Image::new(h, w, c.to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                let blur = read_tensor(dir.join(format!("blur/view_{v:03}.tsr")))?;
                if blur.shape() != [h, w] {
                    return Err(Error::shape(format!("view {v} blur reference has shape {:?}", blur.shape())));
                }
                Ok(ViewData {
                    spikes,
                    gt_frames,
                    blur_reference: Image::new(h, w, blur.into_data())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, views })
    }
}

pub fn build_dataset(spec: SceneSpec, out_dir: impl AsRef<Path>) -> Result<Dataset> {
    let ds = Dataset::generate(spec)?;
    ds.write(out_dir)?;
    Ok(ds)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosePair {
    start_pose: Vec<f64>,
    end_pose: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewFile {
    start_pose: Vec<f64>,
    end_pose: Vec<f64>,
    perturbed: BTreeMap<String, PosePair>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussiansFile {
    positions: Vec<f64>,
    log_scales: Vec<f64>,
    rotations: Vec<f64>,
    opacity_logits: Vec<f64>,
    color_logits: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstantsFile {
    #[serde(rename = "K")]
    total_frames: usize,
    exposure: usize,
    short: usize,
    #[serde(rename = "C")]
    threshold: f64,
    #[serde(rename = "M")]
    samples: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    seed: u64,
    box_min: [f64; 3],
    box_max: [f64; 3],
    intrinsics: IntrinsicsFile,
    views: Vec<ViewFile>,
    gaussians: GaussiansFile,
    constants: ConstantsFile,
}

impl SceneFile {
    fn from_spec(s: &SceneSpec) -> Self {
        let i = &s.intrinsics;
        Self {
            seed: s.seed,
            box_min: s.box_lo.into(),
            box_max: s.box_hi.into(),
            intrinsics: IntrinsicsFile {
                fx: i.fx,
                fy: i.fy,
                cx: i.cx,
                cy: i.cy,
                width: i.width,
                height: i.height,
            },
            views: s
                .views
                .iter()
                .map(|v| ViewFile {
                    start_pose: v.start.to_row_major().to_vec(),
                    end_pose: v.end.to_row_major().to_vec(),
                    perturbed: v
                        .perturbed
                        .iter()
                        .map(|(l, (a, b))| {
                            (
                                l.to_string(),
                                PosePair {
                                    start_pose: a.to_row_major().to_vec(),
                                    end_pose: b.to_row_major().to_vec(),
                                },
                            )
                        })
                        .collect(),
                })
                .collect(),
            gaussians: GaussiansFile {
                positions: s.gaussians.positions.clone(),
                log_scales: s.gaussians.log_scales.clone(),
                rotations: s.gaussians.rotations.clone(),
                opacity_logits: s.gaussians.opacity_logits.clone(),
                color_logits: s.gaussians.color_logits.clone(),
            },
            constants: ConstantsFile {
                total_frames: s.layout.total_frames,
                exposure: s.layout.exposure_frames,
                short: s.layout.short_frames,
                threshold: s.threshold,
                samples: s.layout.samples,
            },
        }
    }

    fn into_spec(self) -> Result<SceneSpec> {
        let i = self.intrinsics;
        let intrinsics = Intrinsics {
            fx: i.fx,
            fy: i.fy,
            cx: i.cx,
            cy: i.cy,
            width: i.width,
            height: i.height,
        };
        intrinsics.validate()?;
        let layout = ExposureLayout {
            total_frames: self.constants.total_frames,
            exposure_frames: self.constants.exposure,
            short_frames: self.constants.short,
            samples: self.constants.samples,
        };
        layout.validate()?;
        let views = self
            .views
            .into_iter()
            .map(|v| {
                let perturbed = v
                    .perturbed
                    .into_iter()
                    .map(|(l, p)| {
                        let level = l
                            .parse::<u32>()
                            .map_err(|_| Error::format(format!("bad perturbation level {l:?}")))?;
                        Ok((level, (Pose::from_row_major(&p.start_pose)?, Pose::from_row_major(&p.end_pose)?)))
                    })
                    .collect::<Result<BTreeMap<_, _>>>()?;
                Ok(ViewSpec {
                    start: Pose::from_row_major(&v.start_pose)?,
                    end: Pose::from_row_major(&v.end_pose)?,
                    perturbed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let g = self.gaussians;
        let gaussians = GaussianSet {
            positions: g.positions,
            log_scales: g.log_scales,
            rotations: g.rotations,
            opacity_logits: g.opacity_logits,
            color_logits: g.color_logits,
        };
        gaussians.validate()?;
        Ok(SceneSpec {
            seed: self.seed,
            gaussians,
            intrinsics,
            box_lo: self.box_min.into(),
            box_hi: self.box_max.into(),
            threshold: self.constants.threshold,
            layout,
            views,
        })
    }
}
