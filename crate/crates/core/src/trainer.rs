//! Joint optimisation of the Gaussian scene, per-view trajectories and the
//! reconstruction network.
//!
//! Each step takes one view (round robin) and records the active losses on a
//! single tape. The splatting renders enter the tape as leaves; their
//! gradients are pushed through [`rasterize_backward`] into the primitives and,
//! via the interpolation Jacobians, into the two endpoint twists of the view.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::formats::{write_pgm, Checkpoint};
use crate::image::Image;
use crate::losses::{
    gs_loss, joint_loss, multi_reblur_loss, reblur_targets, resolve_schedule, total_loss, GroupNorms,
    LossConfig, LossReport, LossTerms, ResolvedInterval,
};
use crate::recon::{recon_forward, recon_sequence, ReconInputs, ReconNetConfig, ReconNetParams};
use crate::scene::Dataset;
use crate::se3::{se3_exp, Pose, TrajectorySegment, Twist, Vec6};
use crate::spike::tfp;
use crate::splat::{
    camera_to_world_gradient, rasterize, rasterize_backward, segment_gradients, Camera, GaussianSet,
    SplatGradients,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Joint,
    GsOnly,
    RecOnly,
    JointSingleReblur,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::GsOnly,
        TrainMode::RecOnly,
        TrainMode::JointSingleReblur,
        TrainMode::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::GsOnly => "gs-only",
            TrainMode::RecOnly => "rec-only",
            TrainMode::JointSingleReblur => "joint-single-reblur",
        }
    }

    /// Ablation table identifier.
    pub fn ablation_id(self) -> &'static str {
        match self {
            TrainMode::GsOnly => "I",
            TrainMode::RecOnly => "III",
            TrainMode::JointSingleReblur => "IV",
            TrainMode::Joint => "V",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "joint" => Ok(TrainMode::Joint),
            "gs-only" => Ok(TrainMode::GsOnly),
            "rec-only" => Ok(TrainMode::RecOnly),
            "joint-single-reblur" => Ok(TrainMode::JointSingleReblur),
            _ => Err(Error::invalid(format!("unknown training mode {s:?}"))),
        }
    }

    pub fn trains_scene(self) -> bool {
        self != TrainMode::RecOnly
    }

    pub fn trains_network(self) -> bool {
        self != TrainMode::GsOnly
    }

    fn selection(self) -> Selection {
        match self {
            TrainMode::Joint => Selection { rec: Some(Schedule::Multi), gs: true, joint: true },
            TrainMode::GsOnly => Selection { rec: None, gs: true, joint: false },
            TrainMode::RecOnly => Selection { rec: Some(Schedule::Multi), gs: false, joint: false },
            TrainMode::JointSingleReblur => Selection { rec: Some(Schedule::Single), gs: true, joint: true },
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: u64,
    pub seed: u64,
    /// Perturbation level (percent) of the starting poses.
    pub pose_level: u32,
    pub gaussians: usize,
    /// Gaussian learning rate; positions use it times the scene diagonal.
    pub lr_gaussians: f64,
    pub lr_twists: f64,
    pub lr_network: f64,
    pub network: ReconNetConfig,
    pub loss: LossConfig,
    pub preview_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Joint,
            iterations: 2000,
            seed: 0,
            pose_level: 0,
            gaussians: 64,
            lr_gaussians: 1e-2,
            lr_twists: 1e-3,
            lr_network: 1e-3,
            network: ReconNetConfig::default(),
            loss: LossConfig::default(),
            preview_every: 250,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be positive"));
        }
        if self.gaussians == 0 {
            return Err(Error::invalid("at least one Gaussian is required"));
        }
        for (name, lr) in [
            ("lr_gaussians", self.lr_gaussians),
            ("lr_twists", self.lr_twists),
            ("lr_network", self.lr_network),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Schedule {
    Multi,
    Single,
}

/// Which loss terms a step records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Selection {
    rec: Option<Schedule>,
    gs: bool,
    joint: bool,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub view: usize,
    pub report: LossReport,
}

pub const LOG_HEADER: &str =
    "step,view,l_rec,l_gs,l_joint,flipped,l_total,grad_gaussians,grad_poses,grad_network";
const LOG_COLUMNS: usize = 10;

impl LogRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        let flipped = match r.flipped {
            None => "",
            Some(true) => "1",
            Some(false) => "0",
        };
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step,
            self.view,
            r.rec,
            r.gs,
            r.joint,
            flipped,
            r.total,
            r.grad_norms.gaussians,
            r.grad_norms.poses,
            r.grad_norms.network
        )
    }

    fn to_values(self) -> [f64; LOG_COLUMNS] {
        let r = self.report;
        [
            self.step as f64,
            self.view as f64,
            r.rec,
            r.gs,
            r.joint,
            match r.flipped {
                None => -1.0,
                Some(f) => f as u8 as f64,
            },
            r.total,
            r.grad_norms.gaussians,
            r.grad_norms.poses,
            r.grad_norms.network,
        ]
    }

    fn from_values(v: &[f64]) -> Self {
        Self {
            step: v[0] as u64,
            view: v[1] as usize,
            report: LossReport {
                rec: v[2],
                gs: v[3],
                joint: v[4],
                flipped: (v[5] >= 0.0).then_some(v[5] == 1.0),
                total: v[6],
                grad_norms: GroupNorms {
                    gaussians: v[7],
                    poses: v[8],
                    network: v[9],
                },
            },
        }
    }
}

const GAUSSIAN_FIELDS: [&str; 5] = ["positions", "log_scales", "rotations", "opacity_logits", "color_logits"];

fn gaussian_fields(g: &GaussianSet) -> [&Vec<f64>; 5] {
    [&g.positions, &g.log_scales, &g.rotations, &g.opacity_logits, &g.color_logits]
}

fn gaussian_fields_mut(g: &mut GaussianSet) -> [&mut Vec<f64>; 5] {
    [
        &mut g.positions,
        &mut g.log_scales,
        &mut g.rotations,
        &mut g.opacity_logits,
        &mut g.color_logits,
    ]
}

fn gradient_fields(g: &SplatGradients) -> [&Vec<f64>; 5] {
    [&g.positions, &g.log_scales, &g.rotations, &g.opacity_logits, &g.color_logits]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    /// One state per Gaussian field, in `GAUSSIAN_FIELDS` order.
    pub gaussians: Vec<AdamState>,
    /// Per view: start twist then end twist (12 entries).
    pub poses: Vec<AdamState>,
    pub network: AdamState,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub config: TrainConfig,
    pub gaussians: GaussianSet,
    pub segments: Vec<TrajectorySegment>,
    pub network: ReconNetParams,
    pub optimizers: Optimizers,
    pub step: u64,
    pub log: Vec<LogRow>,
}

fn network_config(config: &TrainConfig, dataset: &Dataset) -> ReconNetConfig {
    ReconNetConfig {
        short_frames: dataset.spec.layout.short_frames,
        long_channels: dataset.spec.layout.total_frames / crate::spike::VOXEL_GROUP,
        ..config.network
    }
}

impl RunState {
    /// Fresh state: Gaussians sampled in the scene box, network initialised
    /// from the seed, trajectories at the configured perturbation level.
    pub fn init(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = &dataset.spec;
        let mut config = config.clone();
        config.network = network_config(&config, dataset);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gaussians = GaussianSet::init_in_box(config.gaussians, spec.box_lo, spec.box_hi, &mut rng);
        let network = ReconNetParams::init(config.network, config.seed.wrapping_add(1));
        let segments = spec
            .views
            .iter()
            .map(|v| v.perturbed_segment(config.pose_level, &spec.layout))
            .collect::<Result<Vec<_>>>()?;
        let adam = AdamConfig::default();
        let optimizers = Optimizers {
            gaussians: gaussian_fields(&gaussians)
                .iter()
                .map(|f| AdamState::new(f.len(), adam))
                .collect(),
            poses: segments.iter().map(|_| AdamState::new(12, adam)).collect(),
            network: AdamState::new(network.parameter_count(), adam),
        };
        Ok(Self {
            config,
            gaussians,
            segments,
            network,
            optimizers,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "format": "spikesplat-run",
            "step": self.step,
            "views": self.segments.len(),
            "config": self.config,
        });
        let mut c = Checkpoint {
            metadata: serde_json::to_string(&meta)?,
            tensors: Vec::new(),
        };
        let n = self.gaussians.len();
        let widths = [3, 3, 4, 1, 1];
        for ((name, field), w) in GAUSSIAN_FIELDS.iter().zip(gaussian_fields(&self.gaussians)).zip(widths) {
            let shape: Vec<usize> = if w == 1 { vec![n] } else { vec![n, w] };
            c.push(format!("gaussians.{name}"), Tensor::new(&shape, field.clone())?);
        }
        for (v, seg) in self.segments.iter().enumerate() {
            c.push(format!("poses.{v:03}.start"), Tensor::new(&[4, 4], seg.start.to_row_major().to_vec())?);
            c.push(format!("poses.{v:03}.end"), Tensor::new(&[4, 4], seg.end.to_row_major().to_vec())?);
        }
        for (name, t) in self.network.named() {
            c.push(format!("network.{name}"), t.clone());
        }
        let mut adam = |prefix: String, s: &AdamState| -> Result<()> {
            c.push(format!("{prefix}.m"), Tensor::new(&[s.len()], s.first_moment().to_vec())?);
            c.push(format!("{prefix}.v"), Tensor::new(&[s.len()], s.second_moment().to_vec())?);
            c.push(format!("{prefix}.step"), Tensor::scalar(s.step_count() as f64));
            Ok(())
        };
        for (name, s) in GAUSSIAN_FIELDS.iter().zip(&self.optimizers.gaussians) {
            adam(format!("adam.gaussians.{name}"), s)?;
        }
        for (v, s) in self.optimizers.poses.iter().enumerate() {
            adam(format!("adam.poses.{v:03}"), s)?;
        }
        adam("adam.network".to_string(), &self.optimizers.network)?;
        let rows: Vec<f64> = self.log.iter().flat_map(|r| r.to_values()).collect();
        c.push("log", Tensor::new(&[self.log.len(), LOG_COLUMNS], rows)?);
        Ok(c)
    }

    /// Rebuilds a state, checking it against the dataset it will train on.
    pub fn from_checkpoint(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            format: String,
            step: u64,
            views: usize,
            config: TrainConfig,
        }
        let meta: Meta = serde_json::from_str(&ckpt.metadata)?;
        if meta.format != "spikesplat-run" {
            return Err(Error::format(format!("unexpected checkpoint kind {:?}", meta.format)));
        }
        if meta.views != dataset.spec.views.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} views, dataset has {}",
                meta.views,
                dataset.spec.views.len()
            )));
        }
        let config = meta.config;
        let n = config.gaussians;
        let mut gaussians = GaussianSet::empty();
        let widths = [3, 3, 4, 1, 1];
        for ((name, field), w) in GAUSSIAN_FIELDS.iter().zip(gaussian_fields_mut(&mut gaussians)).zip(widths) {
            let t = ckpt.get(&format!("gaussians.{name}"))?;
            if t.len() != n * w {
                return Err(Error::shape(format!(
                    "checkpoint field {name} holds {} values, config expects {} Gaussians",
                    t.len(),
                    n
                )));
            }
            *field = t.data().to_vec();
        }
        gaussians.validate()?;
        let duration = dataset.spec.layout.duration();
        let segments = (0..meta.views)
            .map(|v| {
                let start = Pose::from_row_major(ckpt.get(&format!("poses.{v:03}.start"))?.data())?;
                let end = Pose::from_row_major(ckpt.get(&format!("poses.{v:03}.end"))?.data())?;
                TrajectorySegment::new(start, end, duration)
            })
            .collect::<Result<Vec<_>>>()?;
        if config.network != network_config(&config, dataset) {
            return Err(Error::invalid("checkpoint network does not fit the dataset layout"));
        }
        let network = ReconNetParams::from_named(config.network, ckpt.with_prefix("network."))?;
        let cfg = AdamConfig::default();
        let adam = |prefix: String, len: usize| -> Result<AdamState> {
            let m = ckpt.get(&format!("{prefix}.m"))?.data().to_vec();
            let v = ckpt.get(&format!("{prefix}.v"))?.data().to_vec();
            let step = ckpt.get(&format!("{prefix}.step"))?.data()[0] as u64;
            if m.len() != len {
                return Err(Error::shape(format!("{prefix} has {} moments, expected {len}", m.len())));
            }
            AdamState::from_parts(cfg, m, v, step)
        };
        let optimizers = Optimizers {
            gaussians: GAUSSIAN_FIELDS
                .iter()
                .zip(gaussian_fields(&gaussians))
                .map(|(name, f)| adam(format!("adam.gaussians.{name}"), f.len()))
                .collect::<Result<Vec<_>>>()?,
            poses: (0..meta.views)
                .map(|v| adam(format!("adam.poses.{v:03}"), 12))
                .collect::<Result<Vec<_>>>()?,
            network: adam("adam.network".to_string(), network.parameter_count())?,
        };
        let log_t = ckpt.get("log")?;
        if log_t.len() % LOG_COLUMNS != 0 {
            return Err(Error::shape("log tensor has a partial row"));
        }
        let log = log_t.data().chunks(LOG_COLUMNS).map(LogRow::from_values).collect();
        config.validate()?;
        Ok(Self {
            config,
            gaussians,
            segments,
            network,
            optimizers,
            step: meta.step,
            log,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>, dataset: &Dataset) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?, dataset)
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.log {
            let _ = writeln!(s, "{}", r.csv());
        }
        s
    }
}

/// Per-view inputs and targets that stay fixed during training.
struct ViewTargets {
    inputs: ReconInputs,
    long_exposure: Tensor,
    multi: Vec<Tensor>,
    single: Vec<Tensor>,
}

/// Dataset-derived constants shared by all steps.
pub struct TrainContext<'a> {
    dataset: &'a Dataset,
    multi: Vec<ResolvedInterval>,
    single: Vec<ResolvedInterval>,
    single_cfg: LossConfig,
    views: Vec<ViewTargets>,
    times: Vec<f64>,
}

impl<'a> TrainContext<'a> {
    pub fn new(dataset: &'a Dataset, config: &TrainConfig) -> Result<Self> {
        let layout = &dataset.spec.layout;
        let c = dataset.spec.threshold;
        let multi = resolve_schedule(&config.loss.schedule, layout)?;
        let single_cfg = config.loss.single_reblur(layout);
        let single = resolve_schedule(&single_cfg.schedule, layout)?;
        let m = layout.margin();
        let views = dataset
            .views
            .iter()
            .map(|v| {
                let stack = |imgs: Vec<Image>| imgs.iter().map(Tensor::from_image).collect::<Vec<_>>();
                Ok(ViewTargets {
                    inputs: ReconInputs::for_layout(&v.spikes, layout)?,
                    long_exposure: Tensor::from_image(&tfp(&v.spikes, m..=m + layout.exposure_frames - 1, c)?),
                    multi: stack(reblur_targets(&v.spikes, &multi, c)?),
                    single: stack(reblur_targets(&v.spikes, &single, c)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dataset,
            multi,
            single,
            single_cfg,
            views,
            times: layout.sample_times(),
        })
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    /// Recon-Net inputs of a view.
    pub fn inputs(&self, view: usize) -> &ReconInputs {
        &self.views[view].inputs
    }
}

/// Gradients of one step, grouped like the optimisers.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    pub gaussians: SplatGradients,
    /// Start twist then end twist of the stepped view.
    pub pose: [f64; 12],
    pub network: Vec<f64>,
}

impl StepGradients {
    fn norms(&self) -> GroupNorms {
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let g: f64 = gradient_fields(&self.gaussians)
            .iter()
            .map(|f| f.iter().map(|x| x * x).sum::<f64>())
            .sum();
        GroupNorms {
            gaussians: g.sqrt(),
            poses: n(&self.pose),
            network: n(&self.network),
        }
    }

    /// Whether each group `(gaussians, poses, network)` received any non-zero entry.
    pub fn presence(&self) -> [bool; 3] {
        let nz = |v: &[f64]| v.iter().any(|&x| x != 0.0);
        [
            gradient_fields(&self.gaussians).iter().any(|f| nz(f)),
            nz(&self.pose),
            nz(&self.network),
        ]
    }
}

fn view_cameras(state: &RunState, ctx: &TrainContext, view: usize) -> Result<Vec<Camera>> {
    let seg = &state.segments[view];
    ctx.times
        .iter()
        .map(|&t| Camera::from_camera_to_world(ctx.dataset.spec.intrinsics, &seg.interpolate(t)?))
        .collect()
}

/// Records the selected losses for `view`, runs the backward pass and chains
/// the render gradients into the scene and trajectory. With `build_all`
/// both branches are recorded even when no selected loss needs them.
fn compute_step(
    state: &RunState,
    ctx: &TrainContext,
    view: usize,
    sel: Selection,
    build_all: bool,
) -> Result<(LossReport, StepGradients)> {
    let cfg = &state.config;
    let targets = &ctx.views[view];
    let need_splat = build_all || sel.gs || sel.joint;
    let need_net = build_all || sel.rec.is_some() || sel.joint;
    let mut tape = Tape::new();

    let mut cams = Vec::new();
    let mut renders: Option<Var> = None;
    if need_splat {
        cams = view_cameras(state, ctx, view)?;
        let images = cams
            .par_iter()
            .map(|cam| rasterize(&state.gaussians, cam).map(|r| r.image))
            .collect::<Result<Vec<_>>>()?;
        renders = Some(tape.parameter(Tensor::from_images(&images)?)?);
    }
    let mut net_vars = Vec::new();
    let mut recon: Option<Var> = None;
    if need_net {
        net_vars = state.network.register(&mut tape, true)?;
        recon = Some(recon_forward(&state.network, &net_vars, &targets.inputs, &mut tape)?);
    }

    let mut terms = LossTerms::default();
    if let Some(schedule) = sel.rec {
        let (intervals, imgs, loss_cfg) = match schedule {
            Schedule::Multi => (&ctx.multi, &targets.multi, &cfg.loss),
            Schedule::Single => (&ctx.single, &targets.single, &ctx.single_cfg),
        };
        let tvars = imgs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let rec = recon.expect("network branch recorded");
        terms.rec = Some(multi_reblur_loss(&mut tape, rec, intervals, &tvars, loss_cfg)?);
    }
    if sel.gs {
        let long = tape.constant(targets.long_exposure.clone())?;
        terms.gs = Some(gs_loss(&mut tape, renders.expect("splat branch recorded"), long, &cfg.loss)?);
    }
    if sel.joint {
        terms.joint = Some(joint_loss(
            &mut tape,
            renders.expect("splat branch recorded"),
            recon.expect("network branch recorded"),
        )?);
    }
    let (total, mut report) = total_loss(&mut tape, &terms)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("total loss {}", report.total)));
    }
    let mut grads = tape.backward(total)?;

    let n = state.gaussians.len();
    let mut out = StepGradients {
        gaussians: SplatGradients::zeros(n),
        pose: [0.0; 12],
        network: Vec::with_capacity(state.network.parameter_count()),
    };
    if let Some(r) = renders {
        let g = grads.take(r).expect("parameter leaves always receive a gradient");
        let seg = &state.segments[view];
        let per_frame = cams
            .par_iter()
            .enumerate()
            .map(|(m, cam)| {
                let upstream = g.plane(m, 0)?;
                let sg = rasterize_backward(&state.gaussians, cam, &upstream)?;
                let gp = camera_to_world_gradient(&cam.world_to_camera, &sg.camera);
                let (ga, gb) = segment_gradients(seg, ctx.times[m], &gp)?;
                Ok((sg, ga, gb))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut ga_sum, mut gb_sum) = (Vec6::zeros(), Vec6::zeros());
        for (sg, ga, gb) in &per_frame {
            out.gaussians.accumulate(sg);
            ga_sum += ga;
            gb_sum += gb;
        }
        out.gaussians.camera = Vec6::zeros();
        out.pose[..6].copy_from_slice(ga_sum.as_slice());
        out.pose[6..].copy_from_slice(gb_sum.as_slice());
    }
    if need_net {
        for v in &net_vars {
            let g = grads.take(*v).expect("parameter leaves always receive a gradient");
            out.network.extend_from_slice(g.data());
        }
    } else {
        out.network.resize(state.network.parameter_count(), 0.0);
    }
    report.grad_norms = out.norms();
    Ok((report, out))
}

fn apply_update(state: &mut RunState, view: usize, grads: &StepGradients, diag: f64) -> Result<()> {
    let mode = state.config.mode;
    let cfg = state.config.clone();
    if mode.trains_scene() {
        let lrs = [cfg.lr_gaussians * diag, cfg.lr_gaussians, cfg.lr_gaussians, cfg.lr_gaussians, cfg.lr_gaussians];
        for (((field, g), opt), lr) in gaussian_fields_mut(&mut state.gaussians)
            .into_iter()
            .zip(gradient_fields(&grads.gaussians))
            .zip(&mut state.optimizers.gaussians)
            .zip(lrs)
        {
            opt.step(field, g, lr)?;
        }
        state.gaussians.normalize_rotations();
        // The optimised twists perturb the world-to-camera endpoints, so steps
        // are taken in each camera's own frame.
        let seg = &mut state.segments[view];
        let g = |i: usize, p: &Pose| -> Vec6 { -(p.adjoint().transpose() * Vec6::from_column_slice(&grads.pose[i..i + 6])) };
        let mut cam_grad = [0.0; 12];
        cam_grad[..6].copy_from_slice(g(0, &seg.start).as_slice());
        cam_grad[6..].copy_from_slice(g(6, &seg.end).as_slice());
        let delta = state.optimizers.poses[view].update(&cam_grad, cfg.lr_twists)?;
        let d = |i: usize| Twist::from_vector(&-Vec6::from_column_slice(&delta[i..i + 6]));
        seg.start = seg.start.compose(&se3_exp(&d(0))).orthonormalized();
        seg.end = seg.end.compose(&se3_exp(&d(6))).orthonormalized();
    }
    if mode.trains_network() {
        let delta = state.optimizers.network.update(&grads.network, cfg.lr_network)?;
        let mut off = 0;
        for t in state.network.tensors_mut() {
            for (x, d) in t.data_mut().iter_mut().zip(&delta[off..]) {
                *x += d;
            }
            off += t.len();
        }
    }
    Ok(())
}

fn state_is_finite(state: &RunState) -> bool {
    gaussian_fields(&state.gaussians)
        .iter()
        .all(|f| f.iter().all(|v| v.is_finite()))
        && state.network.all_finite()
        && state
            .segments
            .iter()
            .all(|s| s.start.validate().is_ok() && s.end.validate().is_ok())
}

/// Where a run writes its log, checkpoints and previews.
#[derive(Debug, Clone, Copy)]
pub struct RunOutput<'p> {
    pub dir: &'p Path,
}

impl RunOutput<'_> {
    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(self.dir.join("checkpoints"))?;
        fs::create_dir_all(self.dir.join("previews"))?;
        Ok(())
    }

    pub fn checkpoint_path(&self, step: u64) -> std::path::PathBuf {
        self.dir.join(format!("checkpoints/step_{step:06}.ckpt"))
    }
}

/// Drives a [`RunState`] over a dataset.
pub struct Trainer<'a> {
    pub state: RunState,
    ctx: TrainContext<'a>,
    diag: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: &TrainConfig) -> Result<Self> {
        Self::from_state(dataset, RunState::init(dataset, config)?)
    }

    pub fn from_state(dataset: &'a Dataset, state: RunState) -> Result<Self> {
        if state.segments.len() != dataset.views.len() {
            return Err(Error::invalid("run state and dataset disagree on the number of views"));
        }
        let ctx = TrainContext::new(dataset, &state.config)?;
        Ok(Self {
            state,
            ctx,
            diag: dataset.spec.scene_diag(),
        })
    }

    pub fn context(&self) -> &TrainContext<'a> {
        &self.ctx
    }

    pub fn next_view(&self) -> usize {
        (self.state.step % self.state.segments.len() as u64) as usize
    }

    /// One optimisation step on the next view in round-robin order.
    pub fn step(&mut self) -> Result<LogRow> {
        let view = self.next_view();
        let step = self.state.step;
        let sel = self.state.config.mode.selection();
        let (report, grads) = compute_step(&self.state, &self.ctx, view, sel, false)
            .map_err(|e| divergence(e, step, view))?;
        let mut next = self.state.clone();
        apply_update(&mut next, view, &grads, self.diag)?;
        if !state_is_finite(&next) {
            return Err(Error::NonFinite(format!(
                "step {step} view {view}: parameters became non-finite (loss {:.6e})",
                report.total
            )));
        }
        next.step += 1;
        let row = LogRow {
            step: next.step,
            view,
            report,
        };
        next.log.push(row);
        self.state = next;
        Ok(row)
    }

    /// Steps until `config.iterations`, writing artefacts when `out` is given.
    /// On divergence the last good state is saved as `checkpoints/diverged.ckpt`.
    pub fn run(&mut self, out: Option<RunOutput<'_>>) -> Result<()> {
        if let Some(o) = out {
            o.prepare()?;
            if self.state.step == 0 {
                self.state.save(o.checkpoint_path(0))?;
            }
        }
        while self.state.step < self.state.config.iterations {
            if let Err(e) = self.step() {
                if let Some(o) = out {
                    let _ = self.state.save(o.dir.join("checkpoints/diverged.ckpt"));
                    let _ = fs::write(o.dir.join("log.csv"), self.state.log_csv());
                }
                return Err(e);
            }
            let s = self.state.step;
            if let Some(o) = out {
                let cfg = &self.state.config;
                if cfg.preview_every > 0 && s % cfg.preview_every == 0 {
                    self.write_previews(o, s)?;
                }
                if (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) || s == cfg.iterations {
                    self.state.save(o.checkpoint_path(s))?;
                }
            }
        }
        if let Some(o) = out {
            fs::write(o.dir.join("log.csv"), self.state.log_csv())?;
        }
        Ok(())
    }

    fn write_previews(&self, out: RunOutput<'_>, step: u64) -> Result<()> {
        let layout = &self.ctx.dataset.spec.layout;
        let mid = layout.samples / 2;
        let seg = &self.state.segments[0];
        let cam = Camera::from_camera_to_world(
            self.ctx.dataset.spec.intrinsics,
            &seg.interpolate(layout.sample_times()[mid])?,
        )?;
        let gs = rasterize(&self.state.gaussians, &cam)?.image;
        write_pgm(out.dir.join(format!("previews/step_{step:06}_gs.pgm")), &gs)?;
        let rec = recon_sequence(&self.state.network, &self.ctx.inputs(0).select(&[mid])?)?;
        write_pgm(out.dir.join(format!("previews/step_{step:06}_rec.pgm")), &rec[0])?;
        Ok(())
    }
}

fn divergence(e: Error, step: u64, view: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("step {step} view {view}: {msg}")),
        other => other,
    }
}

/// Trains from scratch to `config.iterations`.
pub fn train(dataset: &Dataset, config: &TrainConfig, out: Option<RunOutput<'_>>) -> Result<RunState> {
    let mut t = Trainer::new(dataset, config)?;
    t.run(out)?;
    Ok(t.state)
}

/// Loss rows and parameter-group columns `(gaussians, poses, network)`.
pub const AUDIT_LOSSES: [&str; 3] = ["rec", "gs", "joint"];

/// Gradient presence of each loss on each parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingMatrix(pub [[bool; 3]; 3]);

impl RoutingMatrix {
    /// Rec-only drives the network, the splatting loss drives scene and
    /// poses, the joint term drives all three.
    pub const EXPECTED: RoutingMatrix = RoutingMatrix([
        [false, false, true],
        [true, true, false],
        [true, true, true],
    ]);

    pub fn render(&self) -> String {
        let mut s = String::from("loss   gaussians poses network\n");
        for (name, row) in AUDIT_LOSSES.iter().zip(self.0) {
            let c = |b: bool| if b { "x" } else { "0" };
            let _ = writeln!(s, "{name:<6} {:>9} {:>5} {:>7}", c(row[0]), c(row[1]), c(row[2]));
        }
        s
    }
}

/// Backpropagates each loss on its own with both branches recorded and
/// reports which groups receive non-zero gradient. Errors on any deviation
/// from [`RoutingMatrix::EXPECTED`].
pub fn grad_routing_audit(state: &RunState, dataset: &Dataset, view: usize) -> Result<RoutingMatrix> {
    if view >= state.segments.len() {
        return Err(Error::range(format!("view {view} of {}", state.segments.len())));
    }
    let ctx = TrainContext::new(dataset, &state.config)?;
    let selections = [
        Selection { rec: Some(Schedule::Multi), gs: false, joint: false },
        Selection { rec: None, gs: true, joint: false },
        Selection { rec: None, gs: false, joint: true },
    ];
    let mut m = [[false; 3]; 3];
    for (row, sel) in m.iter_mut().zip(selections) {
        let (_, grads) = compute_step(state, &ctx, view, sel, true)?;
        *row = grads.presence();
    }
    let matrix = RoutingMatrix(m);
    if matrix != RoutingMatrix::EXPECTED {
        return Err(Error::invalid(format!(
            "gradient routing violated:\n{}",
            matrix.render()
        )));
    }
    Ok(matrix)
}

/// Splatting renders of every view at its sampled timestamps along `segments`.
pub fn render_views(gaussians: &GaussianSet, segments: &[TrajectorySegment], dataset: &Dataset) -> Result<Vec<Vec<Image>>> {
    let times = dataset.spec.layout.sample_times();
    segments
        .iter()
        .map(|seg| {
            times
                .par_iter()
                .map(|&t| {
                    let cam = Camera::from_camera_to_world(dataset.spec.intrinsics, &seg.interpolate(t)?)?;
                    Ok(rasterize(gaussians, &cam)?.image)
                })
                .collect()
        })
        .collect()
}

/// Recon-Net outputs of every view at its sampled timestamps.
pub fn reconstruct_views(network: &ReconNetParams, dataset: &Dataset) -> Result<Vec<Vec<Image>>> {
    dataset
        .views
        .iter()
        .map(|v| recon_sequence(network, &ReconInputs::for_layout(&v.spikes, &dataset.spec.layout)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_scene, SceneConfig};

    pub(crate) fn tiny_dataset() -> Dataset {
        let cfg = SceneConfig {
            views: 2,
            width: 16,
            height: 16,
            focal: 20.0,
            gaussians: 16,
            ..SceneConfig::default()
        };
        Dataset::generate(gen_scene(&cfg).unwrap()).unwrap()
    }

    fn tiny_config(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            iterations: 4,
            gaussians: 12,
            network: ReconNetConfig {
                width: 4,
                blocks: 1,
                ..ReconNetConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pose_gradient_matches_finite_differences_of_the_step_loss() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config(TrainMode::GsOnly);
        cfg.gaussians = 16;
        cfg.pose_level = 10;
        let mut state = RunState::init(&ds, &cfg).unwrap();
        state.gaussians = ds.spec.gaussians.clone();
        let ctx = TrainContext::new(&ds, &cfg).unwrap();
        let sel = Selection { rec: None, gs: true, joint: false };
        let (_, g) = compute_step(&state, &ctx, 0, sel, false).unwrap();
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for k in 0..12 {
            let bump = |sign: f64| {
                let mut s = state.clone();
                let mut d = Vec6::zeros();
                d[k % 6] = sign * eps;
                let e = se3_exp(&Twist::from_vector(&d));
                let seg = &mut s.segments[0];
                if k < 6 {
                    seg.start = e.compose(&seg.start);
                } else {
                    seg.end = e.compose(&seg.end);
                }
                compute_step(&s, &ctx, 0, sel, false).unwrap().0.total
            };
            let fd = (bump(1.0) - bump(-1.0)) / (2.0 * eps);
            worst = worst.max((g.pose[k] - fd).abs() / fd.abs().max(1e-6));
        }
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in TrainMode::ALL {
            assert_eq!(TrainMode::parse(m.name()).unwrap(), m);
        }
        assert_eq!(TrainMode::parse("gs_only").unwrap(), TrainMode::GsOnly);
        assert!(TrainMode::parse("both").is_err());
    }

    #[test]
    fn gs_only_leaves_the_network_untouched() {
        let ds = tiny_dataset();
        let st = train(&ds, &tiny_config(TrainMode::GsOnly), None).unwrap();
        let init = RunState::init(&ds, &tiny_config(TrainMode::GsOnly)).unwrap();
        assert_eq!(st.network, init.network);
        assert_ne!(st.gaussians, init.gaussians);
        assert_eq!(st.log.len(), 4);
    }

    #[test]
    fn rec_only_leaves_scene_and_poses_untouched() {
        let ds = tiny_dataset();
        let st = train(&ds, &tiny_config(TrainMode::RecOnly), None).unwrap();
        let init = RunState::init(&ds, &tiny_config(TrainMode::RecOnly)).unwrap();
        assert_eq!(st.gaussians, init.gaussians);
        assert_eq!(st.segments, init.segments);
        assert_ne!(st.network, init.network);
    }

    #[test]
    fn routing_matrix_matches() {
        let ds = tiny_dataset();
        let st = RunState::init(&ds, &tiny_config(TrainMode::Joint)).unwrap();
        assert_eq!(grad_routing_audit(&st, &ds, 1).unwrap(), RoutingMatrix::EXPECTED);
    }

    #[test]
    fn checkpoint_roundtrip_and_resume_are_exact() {
        let ds = tiny_dataset();
        let cfg = tiny_config(TrainMode::Joint);
        let full = train(&ds, &cfg, None).unwrap();

        let mut half = Trainer::new(&ds, &cfg).unwrap();
        half.step().unwrap();
        half.step().unwrap();
        let bytes = half.state.to_checkpoint().unwrap().to_bytes();
        let restored = RunState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), &ds).unwrap();
        assert_eq!(restored, half.state);
        let mut resumed = Trainer::from_state(&ds, restored).unwrap();
        resumed.run(None).unwrap();
        assert_eq!(
            resumed.state.to_checkpoint().unwrap().to_bytes(),
            full.to_checkpoint().unwrap().to_bytes()
        );
    }

    #[test]
    fn step_zero_checkpoint_is_the_initial_state() {
        let ds = tiny_dataset();
        let cfg = tiny_config(TrainMode::Joint);
        let init = RunState::init(&ds, &cfg).unwrap();
        let back = RunState::from_checkpoint(&init.to_checkpoint().unwrap(), &ds).unwrap();
        assert_eq!(back, init);
        assert_eq!(back.step, 0);
    }

    #[test]
    fn wrong_gaussian_count_is_rejected() {
        let ds = tiny_dataset();
        let init = RunState::init(&ds, &tiny_config(TrainMode::Joint)).unwrap();
        let mut c = init.to_checkpoint().unwrap();
        c.metadata = c.metadata.replace("\"gaussians\":12", "\"gaussians\":13");
        assert!(RunState::from_checkpoint(&c, &ds).is_err());
    }

    #[test]
    fn log_rows_survive_the_checkpoint() {
        let row = LogRow {
            step: 7,
            view: 1,
            report: LossReport {
                rec: 0.1,
                gs: 0.2,
                joint: 0.3,
                flipped: Some(true),
                total: 0.6,
                grad_norms: GroupNorms { gaussians: 1.0, poses: 2.0, network: 3.0 },
            },
        };
        assert_eq!(LogRow::from_values(&row.to_values()), row);
        let none = LogRow { report: LossReport { flipped: None, ..row.report }, ..row };
        assert_eq!(LogRow::from_values(&none.to_values()), none);
        assert_eq!(row.csv().split(',').count(), LOG_HEADER.split(',').count());
    }
}
