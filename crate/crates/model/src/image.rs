//! Observation images as the policy consumes them: RGB floats in [0, 1].

use deskvla_autodiff::Tensor;

use crate::{ModelError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ObsImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB, `height * width * 3` floats.
    pub rgb: Vec<f32>,
}

impl ObsImage {
    pub fn new(width: usize, height: usize, rgb: Vec<f32>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(ModelError::Ingest(format!(
                "image buffer of {} floats does not match {width}x{height} rgb",
                rgb.len()
            )));
        }
        Ok(Self { width, height, rgb })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
        }
    }

    /// Non-overlapping square patches, scanned row-major; each output row is
    /// one flattened `patch*patch*3` block.
    pub fn patches(&self, patch: usize) -> Result<Tensor<f32>> {
        if patch == 0 || self.width % patch != 0 || self.height % patch != 0 {
            return Err(ModelError::Ingest(format!(
                "patch size {patch} does not tile a {}x{} image",
                self.width, self.height
            )));
        }
        let px = self.width / patch;
        let py = self.height / patch;
        let dim = patch * patch * 3;
        let mut data = Vec::with_capacity(px * py * dim);
        for gy in 0..py {
            for gx in 0..px {
                for y in 0..patch {
                    let row = gy * patch + y;
                    let start = (row * self.width + gx * patch) * 3;
                    data.extend_from_slice(&self.rgb[start..start + patch * 3]);
                }
            }
        }
        Ok(Tensor::new(vec![px * py, dim], data).expect("sized above"))
    }
}
