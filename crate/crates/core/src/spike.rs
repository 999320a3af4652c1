//! Spike streams and the integrate-and-fire camera model.
//!
//! A spike camera integrates incoming light per pixel and emits a binary
//! spike whenever the accumulated charge crosses the threshold `C`, carrying
//! the residual over to the next readout tick. Frame indices in this module
//! are zero-based readout ticks.

use serde::{Deserialize, Serialize};
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

/// Magic prefix of the `.spk` container.
pub const SPK_MAGIC: &[u8; 4] = b"SPK1";

/// Relative slack on the firing comparison so that charge summing to exactly
/// `C` in real arithmetic still fires despite rounding.
const FIRE_TOLERANCE: f64 = 1e-9;

/// Bit-packed `K x H x W` binary tensor. Bit `b = k*H*W + y*W + x` lives in
/// byte `b >> 3` at position `b & 7` (least significant bit first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeStream {
    frames: usize,
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl SpikeStream {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("spike stream dimensions must be >= 1"));
        }
        let n = frames
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::invalid("spike stream dimensions overflow"))?;
        Ok(Self {
            frames,
            height,
            width,
            bits: vec![0; n.div_ceil(8)],
        })
    }

    /// Wraps packed bits, validating the length and the zero padding.
    pub fn from_packed(frames: usize, height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        let mut s = Self::zeros(frames, height, width)?;
        if bits.len() != s.bits.len() {
            return Err(Error::format(format!(
                "expected {} packed bytes, got {}",
                s.bits.len(),
                bits.len()
            )));
        }
        let used = s.bit_count() % 8;
        if used != 0 && bits[bits.len() - 1] >> used != 0 {
            return Err(Error::format("padding bits past the last spike are not zero"));
        }
        s.bits = bits;
        Ok(s)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    pub fn bit_count(&self) -> usize {
        self.frames * self.height * self.width
    }

    #[inline]
    fn index(&self, k: usize, y: usize, x: usize) -> usize {
        debug_assert!(k < self.frames && y < self.height && x < self.width);
        (k * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, k: usize, y: usize, x: usize) -> bool {
        let b = self.index(k, y, x);
        (self.bits[b >> 3] >> (b & 7)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, k: usize, y: usize, x: usize, spike: bool) {
        let b = self.index(k, y, x);
        if spike {
            self.bits[b >> 3] |= 1 << (b & 7);
        } else {
            self.bits[b >> 3] &= !(1 << (b & 7));
        }
    }

    /// Total number of spikes in the stream.
    pub fn total_spikes(&self) -> u64 {
        self.bits.iter().map(|b| b.count_ones() as u64).sum()
    }

    /// Spike counts per pixel over the inclusive frame range.
    pub fn counts(&self, window: RangeInclusive<usize>) -> Result<Vec<u32>> {
        self.check_window(&window)?;
        let mut counts = vec![0u32; self.height * self.width];
        for k in window {
            for y in 0..self.height {
                for x in 0..self.width {
                    if self.get(k, y, x) {
                        counts[y * self.width + x] += 1;
                    }
                }
            }
        }
        Ok(counts)
    }

    /// One frame as a 0/1 image.
    pub fn frame_image(&self, k: usize) -> Result<Image> {
        if k >= self.frames {
            return Err(Error::range(format!("frame {k} outside 0..{}", self.frames)));
        }
        let mut data = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                data.push(if self.get(k, y, x) { 1.0 } else { 0.0 });
            }
        }
        Image::new(self.height, self.width, data)
    }

    fn check_window(&self, window: &RangeInclusive<usize>) -> Result<()> {
        if window.is_empty() || *window.end() >= self.frames {
            return Err(Error::range(format!(
                "window {}..={} invalid for {} frames",
                window.start(),
                window.end(),
                self.frames
            )));
        }
        Ok(())
    }

    /// Serialises to the `.spk` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.bits.len());
        out.extend_from_slice(SPK_MAGIC);
        for d in [self.frames, self.height, self.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format("spk header truncated"));
        }
        if &bytes[..4] != SPK_MAGIC {
            return Err(Error::format("bad spk magic"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (k, h, w) = (dim(0), dim(1), dim(2));
        let n = k
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .filter(|n| *n <= (u32::MAX as usize) * 8)
            .ok_or_else(|| Error::format("spk dimensions overflow"))?;
        let payload = &bytes[16..];
        if payload.len() != n.div_ceil(8) {
            return Err(Error::format(format!(
                "spk payload has {} bytes, expected {}",
                payload.len(),
                n.div_ceil(8)
            )));
        }
        Self::from_packed(k, h, w, payload.to_vec())
    }
}

pub fn write_spk(path: impl AsRef<Path>, stream: &SpikeStream) -> Result<()> {
    fs::write(path, stream.to_bytes())?;
    Ok(())
}

pub fn read_spk(path: impl AsRef<Path>) -> Result<SpikeStream> {
    SpikeStream::from_bytes(&fs::read(path)?)
}

/// Light intensity per readout tick, normalised to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensitySequence {
    frames: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl IntensitySequence {
    pub fn new(frames: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("intensity sequence must be non-empty"));
        }
        if values.len() != frames * height * width {
            return Err(Error::shape("intensity value count does not match dimensions"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::range(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            height,
            width,
            values,
        })
    }

    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("intensity sequence must be non-empty"))?;
        let mut values = Vec::with_capacity(images.len() * first.len());
        for img in images {
            if !img.same_shape(first) {
                return Err(Error::shape("frames differ in shape"));
            }
            values.extend_from_slice(img.data());
        }
        Self::new(images.len(), first.height(), first.width(), values)
    }

    /// Constant-intensity sequence, handy for calibration.
    pub fn constant(frames: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(frames, height, width, vec![value; frames * height * width])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[k * n..(k + 1) * n]
    }

    /// Mean intensity over an inclusive frame range.
    pub fn mean_over(&self, window: RangeInclusive<usize>) -> Result<Image> {
        if window.is_empty() || *window.end() >= self.frames {
            return Err(Error::range("mean window outside sequence"));
        }
        let n = self.height * self.width;
        let mut acc = vec![0.0; n];
        let len = window.clone().count() as f64;
        for k in window {
            for (a, v) in acc.iter_mut().zip(self.frame(k)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= len);
        Image::new(self.height, self.width, acc)
    }
}

/// Starting charge of each pixel's integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialCharge {
    /// Every pixel starts at the same value in `[0, C)`.
    Constant(f64),
    /// Independent uniform draws in `[0, C)` from the given seed.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeSimConfig {
    /// Ratio of firing threshold to photoelectric gain (intensity x ticks).
    pub threshold: f64,
    pub initial: InitialCharge,
}

impl SpikeSimConfig {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            initial: InitialCharge::Constant(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::invalid("spike threshold must be positive"));
        }
        if let InitialCharge::Constant(a) = self.initial {
            if !(0.0..self.threshold).contains(&a) {
                return Err(Error::invalid("initial charge must lie in [0, C)"));
            }
        }
        Ok(())
    }
}

impl Default for SpikeSimConfig {
    fn default() -> Self {
        Self::new(0.5)
    }
}

/// Integrate-and-fire with reset by subtraction.
pub fn simulate_spikes(seq: &IntensitySequence, cfg: &SpikeSimConfig) -> Result<SpikeStream> {
    cfg.validate()?;
    let c = cfg.threshold;
    let n = seq.height * seq.width;
    let mut charge = match cfg.initial {
        InitialCharge::Constant(a) => vec![a; n],
        InitialCharge::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.gen_range(0.0..c)).collect()
        }
    };
    let mut out = SpikeStream::zeros(seq.frames, seq.height, seq.width)?;
    let fire_at = c * (1.0 - FIRE_TOLERANCE);
    for k in 0..seq.frames {
        let frame = seq.frame(k);
        for (p, (a, &i)) in charge.iter_mut().zip(frame).enumerate() {
            *a += i;
            if *a >= fire_at {
                *a -= c;
                out.set(k, p / seq.width, p % seq.width, true);
            }
        }
    }
    Ok(out)
}

/// Texture from playback: `E = C * N / T` over an inclusive frame window.
pub fn tfp(stream: &SpikeStream, window: RangeInclusive<usize>, threshold: f64) -> Result<Image> {
    let t = window.clone().count() as f64;
    let counts = stream.counts(window)?;
    let data = counts
        .iter()
        .map(|&n| (threshold * n as f64 / t).clamp(0.0, 1.0))
        .collect();
    Image::new(stream.height, stream.width, data)
}

/// Texture from interval: `C / dt` using the spikes bracketing frame `t`.
///
/// A pixel without a spike on one side of `t` falls back to the full-stream
/// TFP value.
pub fn tfi(stream: &SpikeStream, t: usize, threshold: f64) -> Result<Image> {
    if t >= stream.frames {
        return Err(Error::range(format!("frame {t} outside 0..{}", stream.frames)));
    }
    let fallback = tfp(stream, 0..=stream.frames - 1, threshold)?;
    let mut out = Image::zeros(stream.height, stream.width);
    for y in 0..stream.height {
        for x in 0..stream.width {
            let prev = (0..=t).rev().find(|&k| stream.get(k, y, x));
            let next = (t + 1..stream.frames).find(|&k| stream.get(k, y, x));
            let v = match (prev, next) {
                (Some(p), Some(n)) => (threshold / (n - p) as f64).clamp(0.0, 1.0),
                _ => fallback.get(y, x),
            };
            out.set(y, x, v);
        }
    }
    Ok(out)
}

/// Spike counts pooled over groups of four frames, stored as `count / 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    voxels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn voxels(&self) -> usize {
        self.voxels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Voxel-major values, `voxels x height x width`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, v: usize, y: usize, x: usize) -> f64 {
        self.values[(v * self.height + y) * self.width + x]
    }
}

pub const VOXEL_GROUP: usize = 4;

/// Temporal pooling into `floor(K / 4)` voxels; trailing `K mod 4` frames are dropped.
pub fn voxelize(stream: &SpikeStream) -> Result<VoxelGrid> {
    if stream.frames < VOXEL_GROUP {
        return Err(Error::invalid(format!(
            "voxelization needs at least {VOXEL_GROUP} frames, got {}",
            stream.frames
        )));
    }
    let voxels = stream.frames / VOXEL_GROUP;
    let plane = stream.height * stream.width;
    let mut values = vec![0.0; voxels * plane];
    for v in 0..voxels {
        for k in v * VOXEL_GROUP..(v + 1) * VOXEL_GROUP {
            for y in 0..stream.height {
                for x in 0..stream.width {
                    if stream.get(k, y, x) {
                        values[v * plane + y * stream.width + x] += 1.0;
                    }
                }
            }
        }
    }
    values.iter_mut().for_each(|c| *c /= VOXEL_GROUP as f64);
    Ok(VoxelGrid {
        voxels,
        height: stream.height,
        width: stream.width,
        values,
    })
}

/// Contiguous sub-stream of odd `length` centred on frame `center`.
pub fn extract_window(stream: &SpikeStream, center: usize, length: usize) -> Result<SpikeStream> {
    if length == 0 || length % 2 == 0 {
        return Err(Error::invalid(format!("window length {length} must be odd")));
    }
    let half = (length - 1) / 2;
    if center < half || center + half >= stream.frames {
        return Err(Error::range(format!(
            "window of {length} frames around {center} exceeds {} frames",
            stream.frames
        )));
    }
    let start = center - half;
    let mut out = SpikeStream::zeros(length, stream.height, stream.width)?;
    for k in 0..length {
        for y in 0..stream.height {
            for x in 0..stream.width {
                if stream.get(start + k, y, x) {
                    out.set(k, y, x, true);
                }
            }
        }
    }
    Ok(out)
}

/// Frame geometry of one training view: a long stream, the exposure centred
/// in it, the short window length and the number of sampled timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExposureLayout {
    pub total_frames: usize,
    pub exposure_frames: usize,
    pub short_frames: usize,
    pub samples: usize,
}

impl Default for ExposureLayout {
    fn default() -> Self {
        Self {
            total_frames: 137,
            exposure_frames: 97,
            short_frames: 41,
            samples: 13,
        }
    }
}

impl ExposureLayout {
    pub fn validate(&self) -> Result<()> {
        if self.exposure_frames < 2 || self.exposure_frames > self.total_frames {
            return Err(Error::invalid("exposure must span 2..=total frames"));
        }
        if (self.total_frames - self.exposure_frames) % 2 != 0 {
            return Err(Error::invalid("exposure must sit centred in the stream"));
        }
        if self.short_frames % 2 == 0 {
            return Err(Error::invalid("short window length must be odd"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("at least one timestamp is required"));
        }
        if self.samples > 1 && (self.exposure_frames - 1) % (self.samples - 1) != 0 {
            return Err(Error::invalid(format!(
                "{} timestamps do not land on whole frames of a {}-frame exposure",
                self.samples, self.exposure_frames
            )));
        }
        for c in self.sample_frames() {
            let half = self.short_frames / 2;
            if c < half || c + half >= self.total_frames {
                return Err(Error::range(format!(
                    "short window around frame {c} leaves the {}-frame stream",
                    self.total_frames
                )));
            }
        }
        Ok(())
    }

    /// First exposure frame.
    pub fn margin(&self) -> usize {
        (self.total_frames - self.exposure_frames) / 2
    }

    /// Exposure length in ticks between first and last exposure frame.
    pub fn duration(&self) -> f64 {
        (self.exposure_frames - 1) as f64
    }

    /// Timestamps in ticks from the exposure start: endpoints included, a
    /// single sample sits in the middle.
    pub fn sample_times(&self) -> Vec<f64> {
        self.sample_frames()
            .into_iter()
            .map(|f| (f - self.margin()) as f64)
            .collect()
    }

    /// Stream frame index of every timestamp.
    pub fn sample_frames(&self) -> Vec<usize> {
        let span = self.exposure_frames - 1;
        if self.samples == 1 {
            return vec![self.margin() + span / 2];
        }
        let step = span / (self.samples - 1);
        (0..self.samples).map(|m| self.margin() + m * step).collect()
    }

    /// Normalised exposure time `(t - t_s) / T` of every timestamp.
    pub fn normalized_times(&self) -> Vec<f64> {
        self.sample_times().iter().map(|t| t / self.duration()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn default_layout_windows() {
        let l = ExposureLayout::default();
        l.validate().unwrap();
        let f = l.sample_frames();
        assert_eq!(f.len(), 13);
        // One-based frames 1..=41 for the first window, 97..=137 for the last.
        assert_eq!(f[0] - 20, 0);
        assert_eq!(f[12] + 20, 136);
        assert_eq!(l.sample_times()[6], 48.0);
        let one = ExposureLayout { samples: 1, ..l };
        assert_eq!(one.sample_frames(), vec![68]);
        let bad = ExposureLayout { samples: 10, ..l };
        assert!(bad.validate().is_err());
    }

    fn single_pixel(values: &[f64], c: f64) -> SpikeStream {
        let seq = IntensitySequence::new(values.len(), 1, 1, values.to_vec()).unwrap();
        simulate_spikes(&seq, &SpikeSimConfig::new(c)).unwrap()
    }

    fn fired_frames(s: &SpikeStream) -> Vec<usize> {
        (0..s.frames()).filter(|&k| s.get(k, 0, 0)).map(|k| k + 1).collect()
    }

    #[test]
    fn constant_full_intensity_fires_every_tick() {
        assert_eq!(fired_frames(&single_pixel(&[1.0; 4], 1.0)), vec![1, 2, 3, 4]);
    }

    #[test]
    fn half_intensity_fires_every_other_tick() {
        assert_eq!(fired_frames(&single_pixel(&[0.5; 6], 1.0)), vec![2, 4, 6]);
    }

    #[test]
    fn residual_charge_carries_over() {
        let s = single_pixel(&[0.3; 10], 1.0);
        assert_eq!(fired_frames(&s), vec![4, 7, 10]);
        let e = tfp(&s, 0..=9, 1.0).unwrap();
        assert_eq!(e.get(0, 0), 0.3);
    }

    #[test]
    fn rejects_out_of_range_intensity() {
        assert!(IntensitySequence::new(1, 1, 1, vec![1.5]).is_err());
        assert!(IntensitySequence::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(SpikeSimConfig::new(0.0).validate().is_err());
    }

    #[test]
    fn tfp_edge_cases() {
        let zeros = SpikeStream::zeros(5, 2, 2).unwrap();
        assert!(tfp(&zeros, 0..=4, 1.0).unwrap().data().iter().all(|&v| v == 0.0));
        let ones = single_pixel(&[1.0; 4], 1.0);
        assert_eq!(tfp(&ones, 0..=3, 0.5).unwrap().get(0, 0), 0.5);
        assert!(tfp(&ones, 2..=5, 1.0).is_err());
        #[allow(clippy::reversed_empty_ranges)]
        let empty = 3..=2;
        assert!(tfp(&ones, empty, 1.0).is_err());
    }

    #[test]
    fn tfi_interval_and_fallback() {
        let mut s = SpikeStream::zeros(8, 1, 1).unwrap();
        s.set(1, 0, 0, true);
        s.set(5, 0, 0, true);
        // frames 2 and 6 in one-based numbering, query frame 4
        assert_eq!(tfi(&s, 3, 1.0).unwrap().get(0, 0), 0.25);

        let every = single_pixel(&[1.0; 6], 1.0);
        for t in 0..5 {
            assert_eq!(tfi(&every, t, 1.0).unwrap().get(0, 0), 1.0);
        }
        let silent = SpikeStream::zeros(6, 1, 1).unwrap();
        assert_eq!(tfi(&silent, 2, 1.0).unwrap().get(0, 0), 0.0);
        // one-sided pixel uses full-stream TFP: 2 spikes / 8 frames
        assert_eq!(tfi(&s, 6, 1.0).unwrap().get(0, 0), 0.25);
    }

    #[test]
    fn voxel_examples() {
        let mut s = SpikeStream::zeros(8, 1, 1).unwrap();
        for k in [0, 1, 4] {
            s.set(k, 0, 0, true);
        }
        let v = voxelize(&s).unwrap();
        assert_eq!(v.values(), &[0.5, 0.25]);

        let long = SpikeStream::zeros(137, 2, 3).unwrap();
        assert_eq!(voxelize(&long).unwrap().voxels(), 34);

        let ones = single_pixel(&[1.0; 4], 1.0);
        assert_eq!(voxelize(&ones).unwrap().values(), &[1.0]);
        assert!(voxelize(&SpikeStream::zeros(3, 1, 1).unwrap()).is_err());
    }

    #[test]
    fn window_examples() {
        let seq = IntensitySequence::constant(137, 2, 2, 0.37).unwrap();
        let s = simulate_spikes(&seq, &SpikeSimConfig::new(1.0)).unwrap();
        // one-based centre 21 -> frames 1..=41
        let w = extract_window(&s, 20, 41).unwrap();
        assert_eq!(w.frames(), 41);
        for k in 0..41 {
            assert_eq!(w.get(k, 1, 0), s.get(k, 1, 0));
        }
        assert_eq!(extract_window(&s, 68, 137).unwrap(), s);
        assert_eq!(extract_window(&s, 5, 1).unwrap().frames(), 1);
        assert!(extract_window(&s, 19, 41).is_err());
        assert!(extract_window(&s, 40, 40).is_err());
    }

    #[test]
    fn spk_layout_and_errors() {
        let mut s = SpikeStream::zeros(1, 1, 1).unwrap();
        s.set(0, 0, 0, true);
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), 17);
        assert_eq!(&bytes[16..], &[1]);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SpikeStream::from_bytes(&bad).is_err());
        assert!(SpikeStream::from_bytes(&bytes[..16]).is_err());
        let mut padded = bytes.clone();
        padded[16] = 0b11;
        assert!(SpikeStream::from_bytes(&padded).is_err());
        let mut huge = bytes;
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(SpikeStream::from_bytes(&huge).is_err());
    }

    #[test]
    fn spk_file_roundtrip() {
        let s = single_pixel(&[0.3; 10], 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.spk");
        write_spk(&path, &s).unwrap();
        assert_eq!(read_spk(&path).unwrap(), s);
    }

    #[test]
    fn random_initial_charge_is_seeded() {
        let seq = IntensitySequence::constant(20, 4, 4, 0.2).unwrap();
        let cfg = SpikeSimConfig {
            threshold: 1.0,
            initial: InitialCharge::Random { seed: 9 },
        };
        let a = simulate_spikes(&seq, &cfg).unwrap();
        assert_eq!(a, simulate_spikes(&seq, &cfg).unwrap());
        let zero = simulate_spikes(&seq, &SpikeSimConfig::new(1.0)).unwrap();
        assert_ne!(a, zero);
    }

    proptest! {
        #[test]
        fn spike_count_is_conserved(
            values in proptest::collection::vec(0.0f64..=1.0, 1..80),
            c in 1.0f64..2.0,
            a0_frac in 0.0f64..1.0,
        ) {
            let a0 = a0_frac * c * 0.999;
            let seq = IntensitySequence::new(values.len(), 1, 1, values.clone()).unwrap();
            let cfg = SpikeSimConfig { threshold: c, initial: InitialCharge::Constant(a0) };
            let s = simulate_spikes(&seq, &cfg).unwrap();
            let n = s.total_spikes() as f64;
            let total: f64 = values.iter().sum();
            prop_assert!(n <= ((a0 + total) / c + 1e-6).floor());
            prop_assert!(n >= (total / c).floor() - 1.0);
        }

        #[test]
        fn voxel_sums_match_spike_counts(bits in proptest::collection::vec(any::<bool>(), 4 * 6..=4 * 6 * 3)) {
            let k = bits.len() / 6;
            let mut s = SpikeStream::zeros(k, 2, 3).unwrap();
            for (i, b) in bits.iter().take(k * 6).enumerate() {
                s.set(i / 6, (i % 6) / 3, i % 3, *b);
            }
            let v = voxelize(&s).unwrap();
            let counted: u32 = s.counts(0..=4 * (k / 4) - 1).unwrap().iter().sum();
            let pooled: f64 = v.values().iter().sum::<f64>() * 4.0;
            prop_assert_eq!(pooled, counted as f64);
        }

        #[test]
        fn window_then_tfp_matches_parent(center in 3usize..17, half in 0usize..3, c in 0.3f64..1.0) {
            let seq = IntensitySequence::new(20, 1, 2, (0..40).map(|i| ((i * 7) % 10) as f64 / 10.0).collect()).unwrap();
            let s = simulate_spikes(&seq, &SpikeSimConfig::new(c)).unwrap();
            let len = 2 * half + 1;
            let w = extract_window(&s, center, len).unwrap();
            let a = tfp(&w, 0..=len - 1, c).unwrap();
            let b = tfp(&s, center - half..=center + half, c).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn spk_bytes_roundtrip(k in 1usize..6, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = SpikeStream::zeros(k, h, w).unwrap();
            for kk in 0..k { for y in 0..h { for x in 0..w { s.set(kk, y, x, rng.gen_bool(0.4)); } } }
            prop_assert_eq!(SpikeStream::from_bytes(&s.to_bytes()).unwrap(), s);
        }
    }
}
