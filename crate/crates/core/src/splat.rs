//! Differentiable grayscale Gaussian splatting.
//!
//! Forward: every primitive is projected with the affine (EWA) approximation,
//! primitives are sorted by camera depth (ties by index) and composited front
//! to back per pixel. Backward recomputes the forward per pixel and walks the
//! contribution list in reverse, then chains the 2D gradients back to the 3D
//! parameters and to a left-perturbation twist of the world-to-camera pose.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::se3::{Mat3, Pose, TrajectorySegment, Vec3, Vec6};

pub const NEAR_PLANE: f64 = 0.01;
/// Added to both diagonal entries of every projected covariance (pixels^2).
pub const COV2D_FLOOR: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Squared Mahalanobis radius of the 3-sigma ellipse.
pub const CUTOFF_SQ: f64 = 9.0;
pub const TILE: usize = 16;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Structure-of-arrays storage for `N` primitives. Quaternions are `(w, x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub color_logits: Vec<f64>,
}

impl GaussianSet {
    pub fn empty() -> Self {
        Self {
            positions: vec![],
            log_scales: vec![],
            rotations: vec![],
            opacity_logits: vec![],
            color_logits: vec![],
        }
    }

    /// Optimisation start: positions uniform in the box, isotropic scale
    /// `diag / 50`, opacity logit -2, colour logit 0.
    pub fn init_in_box(n: usize, lo: Vec3, hi: Vec3, rng: &mut impl Rng) -> Self {
        let diag = (hi - lo).norm();
        let mut g = Self::empty();
        for _ in 0..n {
            for a in 0..3 {
                g.positions.push(rng.gen_range(lo[a]..=hi[a]));
            }
            g.log_scales.extend([(diag / 50.0).ln(); 3]);
            g.rotations.extend([1.0, 0.0, 0.0, 0.0]);
            g.opacity_logits.push(-2.0);
            g.color_logits.push(0.0);
        }
        g
    }

    pub fn push(&mut self, position: Vec3, log_scale: Vec3, rotation: [f64; 4], opacity_logit: f64, color_logit: f64) {
        self.positions.extend(position.iter());
        self.log_scales.extend(log_scale.iter());
        self.rotations.extend(rotation);
        self.opacity_logits.push(opacity_logit);
        self.color_logits.push(color_logit);
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn position(&self, i: usize) -> Vec3 {
        Vec3::from_column_slice(&self.positions[3 * i..3 * i + 3])
    }

    pub fn log_scale(&self, i: usize) -> Vec3 {
        Vec3::from_column_slice(&self.log_scales[3 * i..3 * i + 3])
    }

    pub fn rotation(&self, i: usize) -> [f64; 4] {
        let r = &self.rotations[4 * i..4 * i + 4];
        [r[0], r[1], r[2], r[3]]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn color(&self, i: usize) -> f64 {
        sigmoid(self.color_logits[i])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.positions.len() != 3 * n
            || self.log_scales.len() != 3 * n
            || self.rotations.len() != 4 * n
            || self.color_logits.len() != n
        {
            return Err(Error::shape("gaussian field lengths disagree"));
        }
        let all = [
            &self.positions,
            &self.log_scales,
            &self.rotations,
            &self.opacity_logits,
            &self.color_logits,
        ];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        for i in 0..n {
            if self.rotation(i).iter().map(|x| x * x).sum::<f64>() < 1e-24 {
                return Err(Error::invalid(format!("primitive {i} has a zero quaternion")));
            }
        }
        Ok(())
    }

    /// Rescales every quaternion to unit length.
    pub fn normalize_rotations(&mut self) {
        for q in self.rotations.chunks_exact_mut(4) {
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|x| *x /= n);
            }
        }
    }
}

pub fn quat_to_rotation(q: [f64; 4]) -> Mat3 {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient w.r.t. a raw (not necessarily unit) quaternion given the
/// gradient w.r.t. the rotation matrix built from its normalisation.
fn quat_backward(q: [f64; 4], g: &Mat3) -> [f64; 4] {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gu = [gw, gx, gy, gz];
    let u = [w, x, y, z];
    let dot: f64 = gu.iter().zip(&u).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|k| (gu[k] - dot * u[k]) / n)
}

/// `R S S^T R^T` with `S = diag(exp(log_scale))`.
pub fn build_covariance(log_scale: &Vec3, q: [f64; 4]) -> Mat3 {
    let r = quat_to_rotation(q);
    let s2 = Mat3::from_diagonal(&log_scale.map(|l| (2.0 * l).exp()));
    r * s2 * r.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels with the principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be non-zero"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub world_to_camera: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, world_to_camera: Pose) -> Result<Self> {
        intrinsics.validate()?;
        Ok(Self {
            intrinsics,
            world_to_camera,
        })
    }

    /// Camera placed by its camera-to-world pose.
    pub fn from_camera_to_world(intrinsics: Intrinsics, c2w: &Pose) -> Result<Self> {
        Self::new(intrinsics, c2w.inverse())
    }
}

/// Screen-space footprint of one primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean: Vector2<f64>,
    /// `J W Sigma W^T J^T` plus the diagonal floor.
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

fn perspective_jacobian(pc: &Vec3, k: &Intrinsics) -> Matrix2x3<f64> {
    let (x, y, z) = (pc.x, pc.y, pc.z);
    Matrix2x3::new(k.fx / z, 0.0, -k.fx * x / (z * z), 0.0, k.fy / z, -k.fy * y / (z * z))
}

/// Projects one primitive; `None` when it lies at or in front of the near plane.
pub fn project_gaussian(position: &Vec3, cov3: &Mat3, cam: &Camera) -> Option<Projection> {
    let w = &cam.world_to_camera;
    let pc = w.transform_point(position);
    if pc.z <= NEAR_PLANE {
        return None;
    }
    let k = &cam.intrinsics;
    let j = perspective_jacobian(&pc, k);
    let cov_c = w.rotation * cov3 * w.rotation.transpose();
    let cov = j * cov_c * j.transpose() + Matrix2::identity() * COV2D_FLOOR;
    Some(Projection {
        mean: Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy),
        cov,
        depth: pc.z,
    })
}

/// Everything the compositor and the backward pass need for one visible primitive.
#[derive(Debug, Clone)]
struct Splat {
    index: usize,
    depth: f64,
    u: f64,
    v: f64,
    /// Inverse 2D covariance `[[a, b], [b, c]]`.
    conic: [f64; 3],
    opacity: f64,
    color: f64,
    bbox: [f64; 4],
    // Forward intermediates for the chain rule.
    pc: Vec3,
    jac: Matrix2x3<f64>,
    cov_c: Mat3,
    rot: Mat3,
    scale2: Vec3,
}

fn prepare(g: &GaussianSet, cam: &Camera) -> Vec<Splat> {
    let w = &cam.world_to_camera;
    let k = &cam.intrinsics;
    let mut out = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let pc = w.transform_point(&g.position(i));
        if pc.z <= NEAR_PLANE {
            continue;
        }
        let rot = quat_to_rotation(g.rotation(i));
        let scale2 = g.log_scale(i).map(|l| (2.0 * l).exp());
        let cov_w = rot * Mat3::from_diagonal(&scale2) * rot.transpose();
        let cov_c = w.rotation * cov_w * w.rotation.transpose();
        let jac = perspective_jacobian(&pc, k);
        let cov = jac * cov_c * jac.transpose() + Matrix2::identity() * COV2D_FLOOR;
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        if !(det > 0.0) || !det.is_finite() {
            continue;
        }
        let sym = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
        let conic = [cov[(1, 1)] / det, -sym / det, cov[(0, 0)] / det];
        let u = k.fx * pc.x / pc.z + k.cx;
        let v = k.fy * pc.y / pc.z + k.cy;
        // Axis-aligned extent of the 3-sigma ellipse.
        let rx = (CUTOFF_SQ * cov[(0, 0)]).sqrt();
        let ry = (CUTOFF_SQ * cov[(1, 1)]).sqrt();
        out.push(Splat {
            index: i,
            depth: pc.z,
            u,
            v,
            conic,
            opacity: g.opacity(i),
            color: g.color(i),
            bbox: [u - rx, u + rx, v - ry, v + ry],
            pc,
            jac,
            cov_c,
            rot,
            scale2,
        });
    }
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    out
}

/// Per-pixel evaluation of one splat: `(alpha, gaussian weight, dx, dy, clamped)`.
#[inline]
fn evaluate(s: &Splat, px: f64, py: f64) -> Option<(f64, f64, f64, f64, bool)> {
    let dx = px - s.u;
    let dy = py - s.v;
    let [a, b, c] = s.conic;
    let maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if maha > CUTOFF_SQ {
        return None;
    }
    let weight = (-0.5 * maha).exp();
    let raw = s.opacity * weight;
    let clamped = raw > ALPHA_MAX;
    let alpha = if clamped { ALPHA_MAX } else { raw };
    if alpha < ALPHA_MIN {
        return None;
    }
    Some((alpha, weight, dx, dy, clamped))
}

/// Which splats each pixel considers.
enum Candidates {
    All(usize),
    Tiled { tiles_x: usize, lists: Vec<Vec<u32>> },
}

impl Candidates {
    fn build(splats: &[Splat], k: &Intrinsics, tiled: bool) -> Self {
        if !tiled {
            return Candidates::All(splats.len());
        }
        let tiles_x = k.width.div_ceil(TILE);
        let tiles_y = k.height.div_ceil(TILE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (si, s) in splats.iter().enumerate() {
            for ty in 0..tiles_y {
                // Pixel centres in this tile span [y0 + 0.5, y1 - 0.5].
                let y0 = (ty * TILE) as f64 + 0.5;
                let y1 = ((ty + 1) * TILE).min(k.height) as f64 - 0.5;
                if s.bbox[3] < y0 - 1e-9 || s.bbox[2] > y1 + 1e-9 {
                    continue;
                }
                for tx in 0..tiles_x {
                    let x0 = (tx * TILE) as f64 + 0.5;
                    let x1 = ((tx + 1) * TILE).min(k.width) as f64 - 0.5;
                    if s.bbox[1] < x0 - 1e-9 || s.bbox[0] > x1 + 1e-9 {
                        continue;
                    }
                    lists[ty * tiles_x + tx].push(si as u32);
                }
            }
        }
        Candidates::Tiled { tiles_x, lists }
    }

    fn for_pixel(&self, x: usize, y: usize) -> CandidateIter<'_> {
        match self {
            Candidates::All(n) => CandidateIter::Range(0..*n),
            Candidates::Tiled { tiles_x, lists } => {
                CandidateIter::List(lists[(y / TILE) * tiles_x + x / TILE].iter())
            }
        }
    }
}

enum CandidateIter<'a> {
    Range(std::ops::Range<usize>),
    List(std::slice::Iter<'a, u32>),
}

impl Iterator for CandidateIter<'_> {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        match self {
            CandidateIter::Range(r) => r.next(),
            CandidateIter::List(it) => it.next().map(|&i| i as usize),
        }
    }
}

/// Rendered intensity together with the transmittance left after compositing.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub image: Image,
    pub transmittance: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RasterOptions {
    /// Bin primitives into 16x16 tiles; the result is bit-identical to the per-pixel path.
    pub tiled: bool,
}

pub fn rasterize(g: &GaussianSet, cam: &Camera) -> Result<RenderedImage> {
    rasterize_with(g, cam, RasterOptions::default())
}

pub fn rasterize_with(g: &GaussianSet, cam: &Camera, opts: RasterOptions) -> Result<RenderedImage> {
    g.validate()?;
    cam.intrinsics.validate()?;
    let k = cam.intrinsics;
    let splats = prepare(g, cam);
    let cands = Candidates::build(&splats, &k, opts.tiled);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..k.height)
        .into_par_iter()
        .map(|y| {
            let mut color = vec![0.0; k.width];
            let mut trans = vec![1.0; k.width];
            for x in 0..k.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut t = 1.0;
                let mut c = 0.0;
                for si in cands.for_pixel(x, y) {
                    let s = &splats[si];
                    let Some((alpha, ..)) = evaluate(s, px, py) else { continue };
                    let next = t * (1.0 - alpha);
                    if next < TRANSMITTANCE_MIN {
                        break;
                    }
                    c += t * alpha * s.color;
                    t = next;
                }
                color[x] = c;
                trans[x] = t;
            }
            (color, trans)
        })
        .collect();
    let mut image = Vec::with_capacity(k.width * k.height);
    let mut transmittance = Vec::with_capacity(k.width * k.height);
    for (c, t) in rows {
        image.extend(c);
        transmittance.extend(t);
    }
    Ok(RenderedImage {
        image: Image::new(k.height, k.width, image)?,
        transmittance: Image::new(k.height, k.width, transmittance)?,
    })
}

/// Gradients of a scalar loss w.r.t. every Gaussian field and the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGradients {
    pub positions: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub color_logits: Vec<f64>,
    /// Left-perturbation twist `(omega, v)` of the world-to-camera pose.
    pub camera: Vec6,
}

impl SplatGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![0.0; 3 * n],
            log_scales: vec![0.0; 3 * n],
            rotations: vec![0.0; 4 * n],
            opacity_logits: vec![0.0; n],
            color_logits: vec![0.0; n],
            camera: Vec6::zeros(),
        }
    }

    /// `self += other`, including the camera term.
    pub fn accumulate(&mut self, other: &SplatGradients) {
        let pairs = [
            (&mut self.positions, &other.positions),
            (&mut self.log_scales, &other.log_scales),
            (&mut self.rotations, &other.rotations),
            (&mut self.opacity_logits, &other.opacity_logits),
            (&mut self.color_logits, &other.color_logits),
        ];
        for (a, b) in pairs {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.camera += other.camera;
    }
}

/// Screen-space gradient slots per sorted splat:
/// `[u, v, conic_a, conic_b, conic_c, opacity, color]`.
type Grad2d = [f64; 7];

pub fn rasterize_backward(g: &GaussianSet, cam: &Camera, upstream: &Image) -> Result<SplatGradients> {
    g.validate()?;
    cam.intrinsics.validate()?;
    let k = cam.intrinsics;
    if upstream.height() != k.height || upstream.width() != k.width {
        return Err(Error::shape(format!(
            "upstream {}x{} does not match camera {}x{}",
            upstream.height(),
            upstream.width(),
            k.height,
            k.width
        )));
    }
    let splats = prepare(g, cam);
    let cands = Candidates::build(&splats, &k, true);
    let ns = splats.len();

    let row_partials: Vec<Vec<Grad2d>> = (0..k.height)
        .into_par_iter()
        .map(|y| {
            let mut acc = vec![[0.0; 7]; ns];
            let mut contrib: Vec<(usize, f64, f64, f64, f64, bool, f64)> = Vec::new();
            for x in 0..k.width {
                let up = upstream.get(y, x);
                if up == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                contrib.clear();
                let mut t = 1.0;
                for si in cands.for_pixel(x, y) {
                    let s = &splats[si];
                    let Some((alpha, weight, dx, dy, clamped)) = evaluate(s, px, py) else { continue };
                    let next = t * (1.0 - alpha);
                    if next < TRANSMITTANCE_MIN {
                        break;
                    }
                    contrib.push((si, alpha, weight, dx, dy, clamped, t));
                    t = next;
                }
                // C = sum_i T_i a_i c_i; suffix holds sum_{j>i} T_j a_j c_j.
                let mut suffix = 0.0;
                for &(si, alpha, weight, dx, dy, clamped, t_i) in contrib.iter().rev() {
                    let s = &splats[si];
                    let slot = &mut acc[si];
                    slot[6] += up * t_i * alpha;
                    let d_alpha = up * (t_i * s.color - suffix / (1.0 - alpha));
                    suffix += t_i * alpha * s.color;
                    if clamped {
                        continue;
                    }
                    slot[5] += d_alpha * weight;
                    // alpha = o * exp(-maha / 2)
                    let d_maha = -0.5 * alpha * d_alpha;
                    let [a, b, c] = s.conic;
                    slot[0] += d_maha * -2.0 * (a * dx + b * dy);
                    slot[1] += d_maha * -2.0 * (b * dx + c * dy);
                    slot[2] += d_maha * dx * dx;
                    slot[3] += d_maha * 2.0 * dx * dy;
                    slot[4] += d_maha * dy * dy;
                }
            }
            acc
        })
        .collect();

    let mut g2d = vec![[0.0; 7]; ns];
    for row in &row_partials {
        for (a, r) in g2d.iter_mut().zip(row) {
            for q in 0..7 {
                a[q] += r[q];
            }
        }
    }

    let mut out = SplatGradients::zeros(g.len());
    let w = &cam.world_to_camera;
    let (fx, fy) = (k.fx, k.fy);
    for (s, gs) in splats.iter().zip(&g2d) {
        let i = s.index;
        let [gu, gv, ga, gb, gc, g_op, g_col] = *gs;
        out.opacity_logits[i] = g_op * s.opacity * (1.0 - s.opacity);
        out.color_logits[i] = g_col * s.color * (1.0 - s.color);

        // Conic -> 2D covariance: d(M^-1) = -M^-1 dS M^-1.
        let m = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
        let g_m = Matrix2::new(ga, 0.5 * gb, 0.5 * gb, gc);
        let g_cov2 = -(m * g_m * m);

        // Sigma' = J Sigma_c J^T.
        let g_cov_c: Mat3 = s.jac.transpose() * g_cov2 * s.jac;
        let g_jac: Matrix2x3<f64> = 2.0 * g_cov2 * s.jac * s.cov_c;

        // Camera-space mean from the projected mean and from J.
        let (x, y, z) = (s.pc.x, s.pc.y, s.pc.z);
        let (z2, z3) = (z * z, z * z * z);
        let mut g_pc = Vec3::new(gu * fx / z, gv * fy / z, -gu * fx * x / z2 - gv * fy * y / z2);
        g_pc.x += g_jac[(0, 2)] * (-fx / z2);
        g_pc.y += g_jac[(1, 2)] * (-fy / z2);
        g_pc.z += g_jac[(0, 0)] * (-fx / z2)
            + g_jac[(0, 2)] * (2.0 * fx * x / z3)
            + g_jac[(1, 1)] * (-fy / z2)
            + g_jac[(1, 2)] * (2.0 * fy * y / z3);

        let g_pos = w.rotation.transpose() * g_pc;
        out.positions[3 * i..3 * i + 3].copy_from_slice(g_pos.as_slice());

        // Sigma_c = R_w Sigma R_w^T.
        let g_cov_w = w.rotation.transpose() * g_cov_c * w.rotation;
        // Sigma = R S^2 R^T.
        let s2 = Mat3::from_diagonal(&s.scale2);
        let g_rot = 2.0 * g_cov_w * s.rot * s2;
        let inner = s.rot.transpose() * g_cov_w * s.rot;
        for a in 0..3 {
            out.log_scales[3 * i + a] = 2.0 * s.scale2[a] * inner[(a, a)];
        }
        let gq = quat_backward(g.rotation(i), &g_rot);
        out.rotations[4 * i..4 * i + 4].copy_from_slice(&gq);

        // Camera twist: p_c -> p_c + omega x p_c + v and Sigma_c -> Sigma_c + [w]Sigma_c - Sigma_c[w].
        let kk = g_cov_c * s.cov_c - s.cov_c * g_cov_c;
        let g_omega = s.pc.cross(&g_pc)
            + Vec3::new(kk[(2, 1)] - kk[(1, 2)], kk[(0, 2)] - kk[(2, 0)], kk[(1, 0)] - kk[(0, 1)]);
        out.camera += Vec6::new(g_omega.x, g_omega.y, g_omega.z, g_pc.x, g_pc.y, g_pc.z);
    }
    Ok(out)
}

/// Converts a world-to-camera twist gradient into the gradient w.r.t. a left
/// perturbation of the camera-to-world pose `W^-1`.
pub fn camera_to_world_gradient(world_to_camera: &Pose, g_w2c: &Vec6) -> Vec6 {
    -(world_to_camera.adjoint().transpose() * g_w2c)
}

/// Chains a camera-to-world twist gradient at tick `t` back to the segment's
/// start and end poses.
pub fn segment_gradients(seg: &TrajectorySegment, t: f64, g_pose: &Vec6) -> Result<(Vec6, Vec6)> {
    let (ja, jb) = seg.interpolation_jacobians(t)?;
    Ok((ja.transpose() * g_pose, jb.transpose() * g_pose))
}

/// Exposure timestamps `t_m = m * T / (M - 1)`, `m = 0..M`; a single sample sits at `T / 2`.
pub fn sample_times(duration: f64, m: usize) -> Result<Vec<f64>> {
    match m {
        0 => Err(Error::invalid("at least one timestamp is required")),
        1 => Ok(vec![duration / 2.0]),
        _ => Ok((0..m)
            .map(|i| {
                if i == m - 1 {
                    duration
                } else {
                    i as f64 * duration / (m - 1) as f64
                }
            })
            .collect()),
    }
}

/// Renders `m` images along a camera-to-world trajectory segment.
pub fn render_sequence(
    g: &GaussianSet,
    seg: &TrajectorySegment,
    intrinsics: &Intrinsics,
    m: usize,
) -> Result<Vec<RenderedImage>> {
    sample_times(seg.duration, m)?
        .into_iter()
        .map(|t| {
            let cam = Camera::from_camera_to_world(*intrinsics, &seg.interpolate(t)?)?;
            rasterize(g, &cam)
        })
        .collect()
}

/// Pixelwise mean of a sequence of renders.
pub fn synth_blur(images: &[Image]) -> Result<Image> {
    Image::average(images)
}
