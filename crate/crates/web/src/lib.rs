//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Images cross the boundary as RGBA bytes so the page can hand them
//! straight to `ImageData`.

use spikesplat::error::Error;
use spikesplat::image::Image;
use spikesplat::scene::{gen_scene, render_gt_sequence, spike_config, SceneConfig, SceneSpec};
use spikesplat::spike::{simulate_spikes, tfi, tfp, SpikeStream};
use spikesplat::splat::{rasterize, Camera};
use wasm_bindgen::prelude::*;

type JsResult<T> = std::result::Result<T, String>;

fn js(e: Error) -> String {
    e.to_string()
}

/// Grey image in [0, 1] to RGBA bytes.
pub fn to_rgba(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.len() * 4);
    for &v in img.data() {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

#[wasm_bindgen]
pub struct Demo {
    spec: SceneSpec,
    view: usize,
    stream: SpikeStream,
}

#[wasm_bindgen]
impl Demo {
    /// Procedural scene with one moving camera; spikes are simulated at `threshold`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, threshold: f64) -> JsResult<Demo> {
        let cfg = SceneConfig { seed: seed as u64, views: 1, threshold, ..SceneConfig::default() };
        let spec = gen_scene(&cfg).map_err(js)?;
        let stream = Self::simulate(&spec, 0)?;
        Ok(Demo { spec, view: 0, stream })
    }

    fn simulate(spec: &SceneSpec, view: usize) -> JsResult<SpikeStream> {
        let seq = render_gt_sequence(spec, view).map_err(js)?;
        simulate_spikes(&seq, &spike_config(spec, view)).map_err(js)
    }

    pub fn width(&self) -> usize {
        self.stream.width()
    }

    pub fn height(&self) -> usize {
        self.stream.height()
    }

    pub fn frames(&self) -> usize {
        self.stream.frames()
    }

    pub fn total_spikes(&self) -> f64 {
        self.stream.total_spikes() as f64
    }

    /// Re-simulate with a new firing threshold.
    pub fn set_threshold(&mut self, threshold: f64) -> JsResult<()> {
        let mut spec = self.spec.clone();
        spec.threshold = threshold;
        self.stream = Self::simulate(&spec, self.view)?;
        self.spec = spec;
        Ok(())
    }

    /// Raw spike plane at frame `k`.
    pub fn spike_frame(&self, k: usize) -> JsResult<Vec<u8>> {
        Ok(to_rgba(&self.stream.frame_image(k).map_err(js)?))
    }

    /// Firing-rate estimate over `window` frames centred on `center`.
    pub fn tfp(&self, center: usize, window: usize) -> JsResult<Vec<u8>> {
        let half = window / 2;
        if window == 0 || center < half || center + half >= self.frames() {
            return Err(format!("window {window} at {center} leaves the stream"));
        }
        Ok(to_rgba(&tfp(&self.stream, center - half..=center + half, self.spec.threshold).map_err(js)?))
    }

    /// Inter-spike interval estimate at frame `t`.
    pub fn tfi(&self, t: usize) -> JsResult<Vec<u8>> {
        Ok(to_rgba(&tfi(&self.stream, t, self.spec.threshold).map_err(js)?))
    }

    /// Ground-truth render at fraction `s` of the exposure (0 = start, 1 = end).
    pub fn render_at(&self, s: f64) -> JsResult<Vec<u8>> {
        let seg = self.spec.views[self.view].segment(&self.spec.layout).map_err(js)?;
        let pose = seg.pose_at_fraction(s).map_err(js)?;
        let cam = Camera::from_camera_to_world(self.spec.intrinsics, &pose).map_err(js)?;
        Ok(to_rgba(&rasterize(&self.spec.gaussians, &cam).map_err(js)?.image))
    }

    /// Spike train of one pixel, one byte per frame.
    pub fn pixel_train(&self, y: usize, x: usize) -> JsResult<Vec<u8>> {
        if y >= self.height() || x >= self.width() {
            return Err(format!("pixel ({y}, {x}) outside {}x{}", self.height(), self.width()));
        }
        Ok((0..self.frames()).map(|k| self.stream.get(k, y, x) as u8).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_operations_have_the_right_sizes() {
        let d = Demo::new(0, 1.0).unwrap();
        let px = d.width() * d.height() * 4;
        assert_eq!(d.tfp(68, 41).unwrap().len(), px);
        assert_eq!(d.tfi(68).unwrap().len(), px);
        assert_eq!(d.render_at(0.5).unwrap().len(), px);
        assert_eq!(d.spike_frame(0).unwrap().len(), px);
        assert_eq!(d.pixel_train(3, 4).unwrap().len(), d.frames());
        assert!(d.tfp(5, 41).is_err());
        assert!(d.pixel_train(99, 0).is_err());
    }

    #[test]
    fn lower_threshold_fires_more() {
        let mut d = Demo::new(1, 1.0).unwrap();
        let before = d.total_spikes();
        d.set_threshold(0.5).unwrap();
        assert!(d.total_spikes() > before);
    }

    #[test]
    fn tfp_tracks_the_mid_exposure_render() {
        let d = Demo::new(2, 1.0).unwrap();
        let a = d.tfp(68, 41).unwrap();
        let b = d.render_at(0.5).unwrap();
        let err: f64 = a.iter().zip(&b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64;
        assert!(err < 20.0, "mean abs byte error {err}");
    }
}
