//! Image metrics, trained-run reports, pose-error reports and the scalar
//! degradation probe.
//!
//! Metrics are computed at the sampled timestamps of the training views.
//! Splatting outputs are rendered at the ground-truth trajectories.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::SsimConfig;
use crate::scene::Dataset;
use crate::se3::{pose_errors, Pose, PoseErrors, TrajectorySegment};
use crate::trainer::{reconstruct_views, render_views, RunState, TrainMode};

pub const PSNR_CAP_DB: f64 = 100.0;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)`, capped at 100 dB once the MSE drops below 1e-10.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Gaussian-window SSIM averaged over every fully covered window position,
/// evaluated window by window with the full 2-D weights.
pub fn ssim(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64> {
    check_pair(a, b)?;
    let k = cfg.window;
    if a.height() < k || a.width() < k {
        return Err(Error::shape(format!("image smaller than the {k}x{k} SSIM window")));
    }
    let taps = cfg.kernel();
    let (oh, ow) = (a.height() - k + 1, a.width() - k + 1);
    let mut total = 0.0;
    for y0 in 0..oh {
        for x0 in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                for dx in 0..k {
                    let w = taps[dy] * taps[dx];
                    let (p, q) = (a.get(y0 + dy, x0 + dx), b.get(y0 + dy, x0 + dx));
                    ma += w * p;
                    mb += w * q;
                    saa += w * p * p;
                    sbb += w * q * q;
                    sab += w * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + cfg.c1) * (2.0 * cov + cfg.c2))
                / ((ma * ma + mb * mb + cfg.c1) * (va + vb + cfg.c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Scalar degradation model `out = a * gt + n`, averaged over pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationProbe {
    /// Mean `|1 - a|`.
    pub gain_error: f64,
    /// Mean variance of the residual `out - a * gt`.
    pub noise_var: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn degradation_probe(outputs: &[Image], gts: &[Image]) -> Result<DegradationProbe> {
    if outputs.len() != gts.len() || outputs.is_empty() {
        return Err(Error::shape("degradation probe needs equally many outputs and GT images"));
    }
    let mut gain_err = 0.0;
    let mut noise = 0.0;
    for (o, g) in outputs.iter().zip(gts) {
        check_pair(o, g)?;
        let (mo, mg) = (mean(o.data()), mean(g.data()));
        let n = g.len() as f64;
        let var_g = g.data().iter().map(|x| (x - mg) * (x - mg)).sum::<f64>() / n;
        if var_g <= 1e-15 {
            return Err(Error::invalid("ground truth is constant; the gain is undefined"));
        }
        let cov = o
            .data()
            .iter()
            .zip(g.data())
            .map(|(x, y)| (x - mo) * (y - mg))
            .sum::<f64>()
            / n;
        let a = cov / var_g;
        let resid: Vec<f64> = o.data().iter().zip(g.data()).map(|(x, y)| x - a * y).collect();
        let mr = mean(&resid);
        noise += resid.iter().map(|r| (r - mr) * (r - mr)).sum::<f64>() / n;
        gain_err += (1.0 - a).abs();
    }
    let m = outputs.len() as f64;
    Ok(DegradationProbe {
        gain_error: gain_err / m,
        noise_var: noise / m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean PSNR and SSIM over paired sequences.
pub fn sequence_metrics(outputs: &[Image], gts: &[Image], cfg: &SsimConfig) -> Result<ImageMetrics> {
    if outputs.len() != gts.len() || outputs.is_empty() {
        return Err(Error::shape("metrics need equally many outputs and GT images"));
    }
    let pairs = outputs
        .par_iter()
        .zip(gts)
        .map(|(o, g)| Ok((psnr(o, g)?, ssim(o, g, cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    Ok(ImageMetrics {
        psnr: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        ssim: pairs.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRow {
    pub view: usize,
    pub gs: ImageMetrics,
    pub rec: ImageMetrics,
}

/// Metrics of one trained run on its dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: TrainMode,
    pub step: u64,
    pub rows: Vec<ViewRow>,
    pub mean_gs: ImageMetrics,
    pub mean_rec: ImageMetrics,
    pub probe_gs: DegradationProbe,
    pub probe_rec: DegradationProbe,
}

fn check_run(state: &RunState, dataset: &Dataset) -> Result<()> {
    if state.segments.len() != dataset.views.len() {
        return Err(Error::invalid(format!(
            "run has {} views but the dataset has {}",
            state.segments.len(),
            dataset.views.len()
        )));
    }
    Ok(())
}

fn gt_segments(dataset: &Dataset) -> Result<Vec<TrajectorySegment>> {
    dataset
        .spec
        .views
        .iter()
        .map(|v| v.segment(&dataset.spec.layout))
        .collect()
}

pub fn evaluate_run(state: &RunState, dataset: &Dataset) -> Result<EvalReport> {
    check_run(state, dataset)?;
    let cfg = &state.config.loss.ssim;
    let renders = render_views(&state.gaussians, &gt_segments(dataset)?, dataset)?;
    let recons = reconstruct_views(&state.network, dataset)?;
    let mut rows = Vec::new();
    for (v, data) in dataset.views.iter().enumerate() {
        rows.push(ViewRow {
            view: v,
            gs: sequence_metrics(&renders[v], &data.gt_frames, cfg)?,
            rec: sequence_metrics(&recons[v], &data.gt_frames, cfg)?,
        });
    }
    let n = rows.len() as f64;
    let avg = |f: &dyn Fn(&ViewRow) -> ImageMetrics| ImageMetrics {
        psnr: rows.iter().map(|r| f(r).psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| f(r).ssim).sum::<f64>() / n,
    };
    let gts: Vec<Image> = dataset.views.iter().flat_map(|d| d.gt_frames.clone()).collect();
    let flat = |s: Vec<Vec<Image>>| s.into_iter().flatten().collect::<Vec<_>>();
    Ok(EvalReport {
        mode: state.config.mode,
        step: state.step,
        mean_gs: avg(&|r| r.gs),
        mean_rec: avg(&|r| r.rec),
        probe_gs: degradation_probe(&flat(renders), &gts)?,
        probe_rec: degradation_probe(&flat(recons), &gts)?,
        rows,
    })
}

pub const REPORT_NOTE: &str =
    "# metrics at the sampled timestamps of the training views; splatting rendered at ground-truth poses";

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{REPORT_NOTE}\nview,gs_psnr,gs_ssim,gs_lpips,rec_psnr,rec_ssim,rec_lpips\n");
        let mut line = |label: String, gs: ImageMetrics, rec: ImageMetrics| {
            let _ = writeln!(
                s,
                "{label},{:.6},{:.6},,{:.6},{:.6},",
                gs.psnr, gs.ssim, rec.psnr, rec.ssim
            );
        };
        for r in &self.rows {
            line(r.view.to_string(), r.gs, r.rec);
        }
        line("mean".into(), self.mean_gs, self.mean_rec);
        let _ = writeln!(
            s,
            "# probe,gain_error,noise_var\n# gs,{:.6e},{:.6e}\n# rec,{:.6e},{:.6e}",
            self.probe_gs.gain_error, self.probe_gs.noise_var, self.probe_rec.gain_error, self.probe_rec.noise_var
        );
        s
    }

    pub fn text(&self) -> String {
        let mut s = format!("{REPORT_NOTE}\nmode {} after {} steps\n", self.mode, self.step);
        let _ = writeln!(s, "{:>6} | {:>8} {:>6} | {:>8} {:>6}", "view", "GS PSNR", "SSIM", "Rec PSNR", "SSIM");
        let mut line = |label: String, gs: ImageMetrics, rec: ImageMetrics| {
            let _ = writeln!(
                s,
                "{label:>6} | {:>8.3} {:>6.4} | {:>8.3} {:>6.4}",
                gs.psnr, gs.ssim, rec.psnr, rec.ssim
            );
        };
        for r in &self.rows {
            line(r.view.to_string(), r.gs, r.rec);
        }
        line("mean".into(), self.mean_gs, self.mean_rec);
        let _ = writeln!(
            s,
            "degradation probe: gs gain_error {:.4} noise_var {:.3e}; rec gain_error {:.4} noise_var {:.3e}",
            self.probe_gs.gain_error, self.probe_gs.noise_var, self.probe_rec.gain_error, self.probe_rec.noise_var
        );
        s
    }
}

/// One ablation row; branches a mode does not train are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: TrainMode,
    pub gs: Option<ImageMetrics>,
    pub rec: Option<ImageMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub fn ablation_report(runs: &[(TrainMode, &RunState)], dataset: &Dataset) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &(mode, state) in runs {
        if state.config.mode != mode {
            return Err(Error::invalid(format!("run labelled {mode} was trained as {}", state.config.mode)));
        }
        let r = evaluate_run(state, dataset)?;
        rows.push(AblationRow {
            mode,
            gs: mode.trains_scene().then_some(r.mean_gs),
            rec: mode.trains_network().then_some(r.mean_rec),
        });
    }
    Ok(AblationReport { rows })
}

impl AblationReport {
    pub fn row(&self, mode: TrainMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn csv(&self) -> String {
        let mut s = format!("{REPORT_NOTE}\nid,mode,gs_psnr,gs_ssim,gs_lpips,rec_psnr,rec_ssim,rec_lpips\n");
        let cell = |m: Option<ImageMetrics>| match m {
            Some(m) => format!("{:.6},{:.6},", m.psnr, m.ssim),
            None => ",,".to_string(),
        };
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.mode.ablation_id(), r.mode, cell(r.gs), cell(r.rec));
        }
        s
    }

    pub fn text(&self) -> String {
        let mut s = format!("{REPORT_NOTE}\n");
        let _ = writeln!(
            s,
            "{:>4} {:<20} | {:>8} {:>6} | {:>8} {:>6}",
            "ID", "mode", "GS PSNR", "SSIM", "Rec PSNR", "SSIM"
        );
        let cell = |m: Option<ImageMetrics>| match m {
            Some(m) => format!("{:>8.3} {:>6.4}", m.psnr, m.ssim),
            None => format!("{:>8} {:>6}", "-", "-"),
        };
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>4} {:<20} | {} | {}",
                r.mode.ablation_id(),
                r.mode.name(),
                cell(r.gs),
                cell(r.rec)
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseReport {
    pub level: u32,
    pub initial: PoseErrors,
    pub optimized: PoseErrors,
    /// Percent reduction; `None` when the initial error is zero.
    pub translation_reduction: Option<f64>,
    pub rotation_reduction: Option<f64>,
}

fn endpoints(segments: &[TrajectorySegment]) -> Vec<Pose> {
    segments.iter().flat_map(|s| [s.start, s.end]).collect()
}

pub fn pose_report(state: &RunState, dataset: &Dataset, level: u32) -> Result<PoseReport> {
    check_run(state, dataset)?;
    let layout = &dataset.spec.layout;
    let initial_segs = dataset
        .spec
        .views
        .iter()
        .map(|v| v.perturbed_segment(level, layout))
        .collect::<Result<Vec<_>>>()?;
    let reference = endpoints(&gt_segments(dataset)?);
    let initial = pose_errors(&endpoints(&initial_segs), &reference)?;
    let optimized = pose_errors(&endpoints(&state.segments), &reference)?;
    let reduction = |a: f64, b: f64| (a > 1e-12).then(|| 100.0 * (a - b) / a);
    Ok(PoseReport {
        level,
        initial,
        optimized,
        translation_reduction: reduction(initial.translation_mae, optimized.translation_mae),
        rotation_reduction: reduction(initial.rotation_rad, optimized.rotation_rad),
    })
}

impl PoseReport {
    pub fn text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |p| format!("{p:.1}%"));
        format!(
            "level {}%: translation MAE {:.5} -> {:.5} ({}), rotation {:.5} -> {:.5} rad ({})\n",
            self.level,
            self.initial.translation_mae,
            self.optimized.translation_mae,
            pct(self.translation_reduction),
            self.initial.rotation_rad,
            self.optimized.rotation_rad,
            pct(self.rotation_reduction)
        )
    }
}
