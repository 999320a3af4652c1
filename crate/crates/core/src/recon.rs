//! Spike-to-image reconstruction network.
//!
//! Two branches look at the same pixels: a short window of binary frames
//! around the target time and a voxelised long stream. Their rectified
//! features are summed with a learned per-channel time embedding, refined by
//! residual blocks and mapped to intensity by a sigmoid head.

use serde::{Deserialize, Serialize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::spike::{extract_window, voxelize, ExposureLayout, SpikeStream};

/// Scale applied to the He-uniform head weights so a fresh network does not
/// saturate its sigmoid.
const HEAD_INIT_SCALE: f64 = 0.1;
/// Same idea for the second conv of every residual block, so blocks start
/// close to the identity.
const RESIDUAL_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconNetConfig {
    pub short_frames: usize,
    pub long_channels: usize,
    pub width: usize,
    pub blocks: usize,
}

impl Default for ReconNetConfig {
    fn default() -> Self {
        Self {
            short_frames: 41,
            long_channels: 34,
            width: 16,
            blocks: 3,
        }
    }
}

impl ReconNetConfig {
    /// Input sizes implied by an exposure layout.
    pub fn for_layout(layout: &ExposureLayout) -> Self {
        Self {
            short_frames: layout.short_frames,
            long_channels: layout.total_frames / crate::spike::VOXEL_GROUP,
            ..Self::default()
        }
    }

    /// Layer names and shapes in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.width;
        let mut m = vec![
            ("pre_short.weight".to_string(), vec![c, self.short_frames, 3, 3]),
            ("pre_short.bias".to_string(), vec![c]),
            ("pre_long.weight".to_string(), vec![c, self.long_channels, 3, 3]),
            ("pre_long.bias".to_string(), vec![c]),
            ("time_embed".to_string(), vec![c]),
        ];
        for b in 0..self.blocks {
            for conv in ["conv1", "conv2"] {
                m.push((format!("body.{b}.{conv}.weight"), vec![c, c, 3, 3]));
                m.push((format!("body.{b}.{conv}.bias"), vec![c]));
            }
        }
        m.push(("head.weight".to_string(), vec![1, c, 3, 3]));
        m.push(("head.bias".to_string(), vec![1]));
        m
    }
}

/// Network weights, stored in [`ReconNetConfig::manifest`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconNetParams {
    config: ReconNetConfig,
    tensors: Vec<Tensor>,
}

impl ReconNetParams {
    /// He-uniform weights, zero biases and zero time embedding.
    pub fn init(config: ReconNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .manifest()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".weight") {
                    let fan_in = shape[1] * 9;
                    let mut bound = (6.0 / fan_in as f64).sqrt();
                    if name.starts_with("head") {
                        bound *= HEAD_INIT_SCALE;
                    } else if name.ends_with("conv2.weight") {
                        bound *= RESIDUAL_INIT_SCALE;
                    }
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(&shape, data).expect("manifest shape")
                } else {
                    Tensor::zeros(&shape)
                }
            })
            .collect();
        Self { config, tensors }
    }

    pub fn zeros(config: ReconNetConfig) -> Self {
        let tensors = config
            .manifest()
            .into_iter()
            .map(|(_, s)| Tensor::zeros(&s))
            .collect();
        Self { config, tensors }
    }

    /// Rebuilds parameters from named tensors, checking them against the manifest.
    pub fn from_named(config: ReconNetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let manifest = config.manifest();
        if manifest.len() != named.len() {
            return Err(Error::format(format!(
                "expected {} network tensors, found {}",
                manifest.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, t)) in manifest.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(Error::format(format!(
                    "network tensor {name} {:?} does not match {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("network tensor {name}")));
            }
            tensors.push(t);
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ReconNetConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.config
            .manifest()
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.tensors)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Records every tensor on the tape, as parameters when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.parameter(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Network inputs for one view: a batch of short windows sharing one long
/// voxel stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconInputs {
    /// `[M, short_frames, H, W]` binary frames.
    pub short: Tensor,
    /// `[1, voxels, H, W]` normalised voxel counts.
    pub long: Tensor,
    /// `(t - t_s) / T` per batch entry.
    pub t_norm: Vec<f64>,
}

impl ReconInputs {
    /// Short windows centred on the given stream frames; the long branch sees
    /// the whole stream.
    pub fn from_stream(
        stream: &SpikeStream,
        centers: &[usize],
        t_norm: &[f64],
        short_frames: usize,
    ) -> Result<Self> {
        if centers.len() != t_norm.len() || centers.is_empty() {
            return Err(Error::invalid("need one normalised time per window centre"));
        }
        if let Some(t) = t_norm.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::range(format!("normalised time {t} outside [0, 1]")));
        }
        let (h, w) = (stream.height(), stream.width());
        let mut short = Vec::with_capacity(centers.len() * short_frames * h * w);
        for &c in centers {
            let win = extract_window(stream, c, short_frames)?;
            for k in 0..short_frames {
                short.extend(win.frame_image(k)?.into_data());
            }
        }
        let vox = voxelize(stream)?;
        Ok(Self {
            short: Tensor::new(&[centers.len(), short_frames, h, w], short)?,
            long: Tensor::new(&[1, vox.voxels(), h, w], vox.values().to_vec())?,
            t_norm: t_norm.to_vec(),
        })
    }

    /// Inputs for every sampled timestamp of a layout.
    pub fn for_layout(stream: &SpikeStream, layout: &ExposureLayout) -> Result<Self> {
        layout.validate()?;
        if stream.frames() != layout.total_frames {
            return Err(Error::shape(format!(
                "stream has {} frames, layout expects {}",
                stream.frames(),
                layout.total_frames
            )));
        }
        Self::from_stream(
            stream,
            &layout.sample_frames(),
            &layout.normalized_times(),
            layout.short_frames,
        )
    }

    pub fn batch(&self) -> usize {
        self.short.shape()[0]
    }

    /// Restricts the batch to a subset of timestamps.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let [b, c, h, w] = self.short.dims4();
        let stride = c * h * w;
        let mut short = Vec::with_capacity(indices.len() * stride);
        let mut t_norm = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= b {
                return Err(Error::range(format!("timestamp index {i} outside 0..{b}")));
            }
            short.extend_from_slice(&self.short.data()[i * stride..(i + 1) * stride]);
            t_norm.push(self.t_norm[i]);
        }
        Ok(Self {
            short: Tensor::new(&[indices.len(), c, h, w], short)?,
            long: self.long.clone(),
            t_norm,
        })
    }
}

fn conv_block(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let c = tape.conv3x3(x, w)?;
    tape.bias_add(c, b)
}

/// Records the forward pass; returns `[M, 1, H, W]` intensities in `(0, 1)`.
pub fn recon_forward(
    params: &ReconNetParams,
    vars: &[Var],
    inputs: &ReconInputs,
    tape: &mut Tape,
) -> Result<Var> {
    let cfg = params.config();
    if vars.len() != params.tensors().len() {
        return Err(Error::invalid("parameter handles do not match the network"));
    }
    let [m, sc, h, w] = inputs.short.dims4();
    let [_, lc, lh, lw] = inputs.long.dims4();
    if sc != cfg.short_frames || lc != cfg.long_channels || (lh, lw) != (h, w) {
        return Err(Error::shape(format!(
            "inputs {:?} / {:?} do not fit network ({} short, {} long channels)",
            inputs.short.shape(),
            inputs.long.shape(),
            cfg.short_frames,
            cfg.long_channels
        )));
    }
    if inputs.t_norm.len() != m {
        return Err(Error::shape("one normalised time per batch entry is required"));
    }
    let short = tape.constant(inputs.short.clone())?;
    let long = tape.constant(inputs.long.clone())?;

    let fs = conv_block(tape, short, vars[0], vars[1])?;
    let fs = tape.relu(fs)?;
    let fl = conv_block(tape, long, vars[2], vars[3])?;
    let fl = tape.relu(fl)?;
    let fl = tape.gather_batch(fl, &vec![0; m])?;
    let f = tape.add(fs, fl)?;
    let time = tape.outer(vars[4], &inputs.t_norm)?;
    let mut x = tape.bias_add(f, time)?;

    for b in 0..cfg.blocks {
        let base = 5 + 4 * b;
        let h1 = conv_block(tape, x, vars[base], vars[base + 1])?;
        let h1 = tape.relu(h1)?;
        let h2 = conv_block(tape, h1, vars[base + 2], vars[base + 3])?;
        x = tape.add(x, h2)?;
    }
    let head = 5 + 4 * cfg.blocks;
    let y = conv_block(tape, x, vars[head], vars[head + 1])?;
    tape.sigmoid(y)
}

/// Reconstructions for all timestamps of `inputs`, in batch order.
pub fn recon_sequence(params: &ReconNetParams, inputs: &ReconInputs) -> Result<Vec<crate::Image>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false)?;
    let out = recon_forward(params, &vars, inputs, &mut tape)?;
    let t = tape.value(out);
    (0..inputs.batch()).map(|b| t.plane(b, 0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::gradcheck::{check, random_tensor, GradCheckOptions};

    fn small() -> ReconNetConfig {
        ReconNetConfig {
            short_frames: 5,
            long_channels: 3,
            width: 4,
            blocks: 2,
        }
    }

    fn random_inputs(cfg: &ReconNetConfig, m: usize, hw: usize, seed: u64) -> ReconInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let short = random_tensor(&[m, cfg.short_frames, hw, hw], 0.0, 1.0, &mut rng);
        let short = Tensor::new(short.shape(), short.data().iter().map(|v| v.round()).collect()).unwrap();
        ReconInputs {
            short,
            long: random_tensor(&[1, cfg.long_channels, hw, hw], 0.0, 1.0, &mut rng),
            t_norm: (0..m).map(|i| i as f64 / m.max(2) as f64).collect(),
        }
    }

    #[test]
    fn zero_network_outputs_one_half() {
        let cfg = ReconNetConfig::default();
        let p = ReconNetParams::zeros(cfg);
        let out = recon_sequence(&p, &random_inputs(&cfg, 2, 6, 1)).unwrap();
        assert!(out.iter().all(|img| img.data().iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn init_is_seeded_and_unsaturated() {
        let cfg = ReconNetConfig::default();
        let a = ReconNetParams::init(cfg, 3);
        assert_eq!(a, ReconNetParams::init(cfg, 3));
        assert_ne!(a, ReconNetParams::init(cfg, 4));
        let out = recon_sequence(&a, &random_inputs(&cfg, 3, 16, 2)).unwrap();
        for img in out {
            assert!(img.data().iter().all(|&v| v > 0.25 && v < 0.75));
        }
    }

    #[test]
    fn output_stays_in_open_unit_interval() {
        let cfg = small();
        for seed in 0..5 {
            let mut p = ReconNetParams::init(cfg, seed);
            for t in p.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            }
            for img in recon_sequence(&p, &random_inputs(&cfg, 2, 5, seed)).unwrap() {
                assert!(img.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn short_window_frame_order_matters() {
        let cfg = ReconNetConfig::default();
        let p = ReconNetParams::init(cfg, 5);
        let inputs = random_inputs(&cfg, 1, 8, 6);
        let mut shuffled = inputs.clone();
        let plane = 64;
        let data = shuffled.short.data_mut();
        for k in 0..cfg.short_frames / 2 {
            let j = cfg.short_frames - 1 - k;
            for i in 0..plane {
                data.swap(k * plane + i, j * plane + i);
            }
        }
        assert_ne!(recon_sequence(&p, &inputs).unwrap(), recon_sequence(&p, &shuffled).unwrap());
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        let cfg = ReconNetConfig::default();
        let mut p = ReconNetParams::init(cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Non-zero biases and time embedding so their gradients are exercised off zero.
        for (name, t) in cfg.manifest().iter().zip(p.tensors_mut()) {
            if !name.0.ends_with(".weight") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        }
        let inputs = random_inputs(&cfg, 2, 8, 10);
        let rep = check(
            p.tensors(),
            |tape, vars| recon_forward(&p, vars, &inputs, tape),
            &GradCheckOptions {
                max_entries: Some(24),
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
    }

    #[test]
    fn inputs_follow_the_layout() {
        let layout = ExposureLayout::default();
        let mut s = SpikeStream::zeros(137, 2, 2).unwrap();
        s.set(0, 0, 0, true);
        s.set(40, 1, 1, true);
        s.set(41, 1, 1, true);
        let inp = ReconInputs::for_layout(&s, &layout).unwrap();
        assert_eq!(inp.short.shape(), &[13, 41, 2, 2]);
        assert_eq!(inp.long.shape(), &[1, 34, 2, 2]);
        // First window covers frames 0..=40.
        assert_eq!(inp.short.data()[0], 1.0);
        assert_eq!(inp.short.data()[40 * 4 + 3], 1.0);
        assert_eq!(inp.t_norm[0], 0.0);
        assert_eq!(inp.t_norm[12], 1.0);
        let sub = inp.select(&[12]).unwrap();
        assert_eq!(sub.t_norm, vec![1.0]);
        assert!(ReconInputs::for_layout(&SpikeStream::zeros(100, 2, 2).unwrap(), &layout).is_err());
    }
}
