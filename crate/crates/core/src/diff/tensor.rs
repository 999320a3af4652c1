use crate::error::{Error, Result};
use crate::image::Image;

/// Dense row-major tensor of rank 0 to 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(Error::shape(format!("rank {} exceeds 4", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Shape padded with leading ones to `[batch, channel, height, width]`.
    pub fn dims4(&self) -> [usize; 4] {
        let mut out = [1; 4];
        let off = 4 - self.shape.len();
        out[off..].copy_from_slice(&self.shape);
        out
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.len() > 4 {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Image as a `[1, 1, H, W]` tensor.
    pub fn from_image(img: &Image) -> Self {
        Self {
            shape: vec![1, 1, img.height(), img.width()],
            data: img.data().to_vec(),
        }
    }

    /// Stacks equally sized images into `[N, 1, H, W]`.
    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero images"))?;
        let mut data = Vec::with_capacity(images.len() * first.len());
        for img in images {
            if !img.same_shape(first) {
                return Err(Error::shape("stacked images differ in shape"));
            }
            data.extend_from_slice(img.data());
        }
        Self::new(&[images.len(), 1, first.height(), first.width()], data)
    }

    /// Plane `(b, c)` of a rank-4 tensor as an image.
    pub fn plane(&self, b: usize, c: usize) -> Result<Image> {
        let [nb, nc, h, w] = self.dims4();
        if b >= nb || c >= nc {
            return Err(Error::range(format!("plane ({b}, {c}) outside {:?}", self.shape)));
        }
        let off = (b * nc + c) * h * w;
        Image::new(h, w, self.data[off..off + h * w].to_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
