//! Photometric losses recorded on a [`Tape`].
//!
//! All image arguments are `[B, 1, H, W]` tape variables. Scalars returned
//! here can be summed freely; gradient routing follows tape reachability.

use serde::{Deserialize, Serialize};
use std::ops::RangeInclusive;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::spike::{tfp, ExposureLayout, SpikeStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimConfig {
    /// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let half = (self.window as f64 - 1.0) / 2.0;
        let taps: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / s).collect()
    }
}

/// One reblur sub-interval: an odd number of exposure frames centred on the
/// exposure midpoint and the number of reconstructions averaged over it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReblurInterval {
    pub frames: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_dssim: f64,
    pub ssim: SsimConfig,
    pub schedule: Vec<ReblurInterval>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_dssim: 0.2,
            ssim: SsimConfig::default(),
            schedule: vec![
                ReblurInterval { frames: 97, samples: 13 },
                ReblurInterval { frames: 65, samples: 9 },
                ReblurInterval { frames: 33, samples: 5 },
            ],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::range(format!("lambda {} outside [0, 1]", self.lambda_dssim)));
        }
        if self.schedule.is_empty() {
            return Err(Error::invalid("reblur schedule is empty"));
        }
        Ok(())
    }

    /// Only the full-exposure interval (single reblur).
    pub fn single_reblur(&self, layout: &ExposureLayout) -> Self {
        Self {
            schedule: vec![ReblurInterval {
                frames: layout.exposure_frames,
                samples: layout.samples,
            }],
            ..self.clone()
        }
    }
}

/// A schedule entry resolved against an exposure layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedInterval {
    /// Stream frames whose TFP is the reblur target.
    pub window: RangeInclusive<usize>,
    /// Indices into the layout's sampled timestamps.
    pub indices: Vec<usize>,
}

/// Maps every sub-interval onto the layout's timestamps. Each interval must
/// share the exposure midpoint, fit in the stream and have its samples land
/// exactly on layout timestamps.
pub fn resolve_schedule(schedule: &[ReblurInterval], layout: &ExposureLayout) -> Result<Vec<ResolvedInterval>> {
    layout.validate()?;
    let frames = layout.sample_frames();
    let mid = layout.margin() + (layout.exposure_frames - 1) / 2;
    schedule
        .iter()
        .map(|iv| {
            if iv.frames % 2 == 0 || iv.frames < 1 || iv.samples == 0 {
                return Err(Error::invalid(format!(
                    "sub-interval of {} frames / {} samples is not centred",
                    iv.frames, iv.samples
                )));
            }
            let half = (iv.frames - 1) / 2;
            if half > mid || mid + half >= layout.total_frames {
                return Err(Error::range(format!(
                    "sub-interval of {} frames leaves the stream",
                    iv.frames
                )));
            }
            let start = mid - half;
            let wanted: Vec<usize> = if iv.samples == 1 {
                vec![mid]
            } else {
                let span = iv.frames - 1;
                if span % (iv.samples - 1) != 0 {
                    return Err(Error::invalid(format!(
                        "{} samples do not land on whole frames of {} frames",
                        iv.samples, iv.frames
                    )));
                }
                (0..iv.samples)
                    .map(|m| start + m * span / (iv.samples - 1))
                    .collect()
            };
            let indices = wanted
                .iter()
                .map(|f| {
                    frames.iter().position(|g| g == f).ok_or_else(|| {
                        Error::invalid(format!(
                            "sub-interval timestamp at frame {f} is not a sampled timestamp"
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ResolvedInterval {
                window: start..=start + 2 * half,
                indices,
            })
        })
        .collect()
}

/// Long-exposure TFP targets, one per resolved interval.
pub fn reblur_targets(stream: &SpikeStream, intervals: &[ResolvedInterval], threshold: f64) -> Result<Vec<Image>> {
    intervals
        .iter()
        .map(|iv| tfp(stream, iv.window.clone(), threshold))
        .collect()
}

/// Mean SSIM over all fully covered windows, recorded on the tape.
pub fn ssim(tape: &mut Tape, a: Var, b: Var, cfg: &SsimConfig) -> Result<Var> {
    let k = cfg.kernel();
    let mu_a = tape.blur(a, &k)?;
    let mu_b = tape.blur(b, &k)?;
    let aa = tape.square(a)?;
    let bb = tape.square(b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.blur(aa, &k)?;
    let e_bb = tape.blur(bb, &k)?;
    let e_ab = tape.blur(ab, &k)?;
    let mu_a2 = tape.square(mu_a)?;
    let mu_b2 = tape.square(mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_a2)?;
    let var_b = tape.sub(e_bb, mu_b2)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let n1 = tape.scale(mu_ab, 2.0)?;
    let n1 = tape.add_scalar(n1, cfg.c1)?;
    let n2 = tape.scale(cov, 2.0)?;
    let n2 = tape.add_scalar(n2, cfg.c2)?;
    let d1 = tape.add(mu_a2, mu_b2)?;
    let d1 = tape.add_scalar(d1, cfg.c1)?;
    let d2 = tape.add(var_a, var_b)?;
    let d2 = tape.add_scalar(d2, cfg.c2)?;
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

/// `(1 - lambda) * mean|a - b| + lambda * (1 - SSIM(a, b)) / 2`.
pub fn l1_dssim(tape: &mut Tape, a: Var, b: Var, cfg: &LossConfig) -> Result<Var> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(format!(
            "l1_dssim on {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    let diff = tape.sub(a, b)?;
    let l1 = tape.abs(diff)?;
    let l1 = tape.mean(l1)?;
    let s = ssim(tape, a, b, &cfg.ssim)?;
    // (1 - s) / 2 = -0.5 s + 0.5
    let dssim = tape.scale(s, -0.5)?;
    let dssim = tape.add_scalar(dssim, 0.5)?;
    let l1 = tape.scale(l1, 1.0 - cfg.lambda_dssim)?;
    let dssim = tape.scale(dssim, cfg.lambda_dssim)?;
    tape.add(l1, dssim)
}

/// Average the frames into a synthetic blur and compare it with the long exposure.
pub fn reblur_loss(tape: &mut Tape, frames: Var, long_exposure: Var, cfg: &LossConfig) -> Result<Var> {
    if tape.value(frames).shape().first() == Some(&0) {
        return Err(Error::invalid("reblur over an empty sequence"));
    }
    let blur = tape.batch_mean(frames)?;
    l1_dssim(tape, blur, long_exposure, cfg)
}

/// Mean of reblur losses over nested centred sub-intervals.
///
/// `frames` holds reconstructions at every layout timestamp; each interval
/// averages its own subset against its own target.
pub fn multi_reblur_loss(
    tape: &mut Tape,
    frames: Var,
    intervals: &[ResolvedInterval],
    targets: &[Var],
    cfg: &LossConfig,
) -> Result<Var> {
    if intervals.is_empty() || intervals.len() != targets.len() {
        return Err(Error::invalid("one target per reblur interval is required"));
    }
    let mut total: Option<Var> = None;
    for (iv, &target) in intervals.iter().zip(targets) {
        let all = tape.value(frames).shape()[0];
        let sub = if iv.indices.len() == all && iv.indices.iter().enumerate().all(|(i, &j)| i == j) {
            frames
        } else {
            tape.gather_batch(frames, &iv.indices)?
        };
        let l = reblur_loss(tape, sub, target, cfg)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.expect("non-empty");
    tape.scale(total, 1.0 / intervals.len() as f64)
}

/// Splatting loss: the mean of the renders against the long exposure.
pub fn gs_loss(tape: &mut Tape, renders: Var, long_exposure: Var, cfg: &LossConfig) -> Result<Var> {
    reblur_loss(tape, renders, long_exposure, cfg)
}

/// Flip-and-minimum consistency between the splatting and reconstruction
/// sequences. Returns the loss and whether the time-reversed branch won;
/// ties keep the unflipped branch.
pub fn joint_loss(tape: &mut Tape, gs: Var, rec: Var) -> Result<(Var, bool)> {
    let (sg, sr) = (tape.value(gs).shape().to_vec(), tape.value(rec).shape().to_vec());
    if sg != sr || sg.len() != 4 {
        return Err(Error::shape(format!("joint loss on {sg:?} vs {sr:?}")));
    }
    let m = sg[0];
    let d = tape.sub(gs, rec)?;
    let d = tape.square(d)?;
    let direct = tape.mean(d)?;
    let rev: Vec<usize> = (0..m).rev().collect();
    let gs_rev = tape.gather_batch(gs, &rev)?;
    let dr = tape.sub(gs_rev, rec)?;
    let dr = tape.square(dr)?;
    let flipped = tape.mean(dr)?;
    if tape.scalar(flipped) < tape.scalar(direct) {
        Ok((flipped, true))
    } else {
        Ok((direct, false))
    }
}

/// Gradient norms per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupNorms {
    pub gaussians: f64,
    pub poses: f64,
    pub network: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub rec: f64,
    pub gs: f64,
    pub joint: f64,
    /// `Some(true)` when the joint term used the reversed branch.
    pub flipped: Option<bool>,
    pub total: f64,
    pub grad_norms: GroupNorms,
}

/// Handles of the loss components recorded for one step; absent terms are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub rec: Option<Var>,
    pub gs: Option<Var>,
    pub joint: Option<(Var, bool)>,
}

/// Unweighted sum of the present components plus the value report.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms) -> Result<(Var, LossReport)> {
    let parts: Vec<Var> = [terms.rec, terms.gs, terms.joint.map(|j| j.0)]
        .into_iter()
        .flatten()
        .collect();
    let total = match parts.as_slice() {
        [] => tape.constant(Tensor::scalar(0.0))?,
        [only] => *only,
        [first, rest @ ..] => {
            let mut acc = *first;
            for p in rest {
                acc = tape.add(acc, *p)?;
            }
            acc
        }
    };
    let value = |v: Option<Var>| v.map(|v| tape.scalar(v)).unwrap_or(0.0);
    let report = LossReport {
        rec: value(terms.rec),
        gs: value(terms.gs),
        joint: value(terms.joint.map(|j| j.0)),
        flipped: terms.joint.map(|j| j.1),
        total: tape.scalar(total),
        grad_norms: GroupNorms::default(),
    };
    Ok((total, report))
}
