//! Image to keypoints and descriptors.

use crate::backbone::{pad_to_multiple, Backbone, Pyramid};
use crate::clidd::{AuxStats, DescriptionHead, DEFAULT_BLOCK};
use crate::config::ModelConfig;
use crate::detect::{nms_topk, DetectHead, Heatmap, KeypointSet};
use crate::error::{Error, Result};
use crate::tensor::{DescriptorMatrix, FeatureMap};
use crate::weights::WeightStore;

pub const DEFAULT_TOP_K: usize = 4096;
pub const DEFAULT_NMS_RADIUS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescribePath {
    Naive,
    Fused { block: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractOptions {
    pub top_k: usize,
    pub nms_radius: usize,
    pub path: DescribePath,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            nms_radius: DEFAULT_NMS_RADIUS,
            path: DescribePath::Fused { block: DEFAULT_BLOCK },
        }
    }
}

/// Keypoints in original image pixels with their unit descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub width: usize,
    pub height: usize,
    pub keypoints: KeypointSet,
    pub descriptors: DescriptorMatrix,
}

#[derive(Clone, Debug)]
pub struct Extractor {
    config: ModelConfig,
    backbone: Backbone,
    detect: DetectHead,
    describe: DescriptionHead,
}

impl Extractor {
    pub fn new(store: &WeightStore) -> Result<Self> {
        let config = store.config;
        Ok(Self {
            config,
            backbone: Backbone::from_weights(store, &config)?,
            detect: DetectHead::from_weights(store, &config)?,
            describe: DescriptionHead::from_weights(store, &config)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> &DescriptionHead {
        &self.describe
    }

    /// Pads the image to a multiple of 32 and runs the backbone and the
    /// detection head. Returns the original `(height, width)` too.
    pub fn dense(&self, image: &FeatureMap) -> Result<(Pyramid, Heatmap, (usize, usize))> {
        let (padded, orig) = pad_to_multiple(image, 32);
        let pyramid = self.backbone.forward(&padded)?;
        let heatmap = self.detect.forward(&pyramid)?;
        if !heatmap.is_finite() {
            return Err(Error::Numeric("detection heatmap is not finite".into()));
        }
        Ok((pyramid, heatmap, orig))
    }

    pub fn describe(
        &self,
        pyramid: &Pyramid,
        keypoints: &[[f32; 2]],
        path: DescribePath,
    ) -> Result<(DescriptorMatrix, AuxStats)> {
        let (desc, stats) = match path {
            DescribePath::Naive => self.describe.describe_naive_full(pyramid, keypoints)?,
            DescribePath::Fused { block } => self.describe.describe_fused_stats(pyramid, keypoints, block)?,
        };
        if !desc.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("descriptors are not finite".into()));
        }
        Ok((desc, stats))
    }

    pub fn extract(&self, image: &FeatureMap, options: &ExtractOptions) -> Result<Features> {
        let (pyramid, heatmap, (h, w)) = self.dense(image)?;
        let keypoints = nms_topk(&heatmap, options.nms_radius, options.top_k, w, h);
        let (descriptors, _) = self.describe(&pyramid, &keypoints.coords, options.path)?;
        Ok(Features {
            width: w,
            height: h,
            keypoints,
            descriptors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::value_noise;
    use crate::weights::init_weights;

    #[test]
    fn extract_contract() {
        let cfg = ModelConfig::by_name("A48").unwrap();
        let ex = Extractor::new(&init_weights(&cfg, 0)).unwrap();
        let img = value_noise(100, 90, 3);
        let f = ex.extract(&img, &ExtractOptions::default()).unwrap();
        assert_eq!((f.width, f.height), (90, 100));
        assert!(!f.keypoints.is_empty() && f.keypoints.len() <= 4096);
        assert_eq!(f.descriptors.cols, 48);
        assert_eq!(f.descriptors.rows, f.keypoints.len());
        assert!(f.keypoints.coords.iter().all(|p| p[0] < 90.0 && p[1] < 100.0));
        for k in 0..f.descriptors.rows {
            let n: f32 = f.descriptors.row(k).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-4);
        }

        let naive = ExtractOptions {
            path: DescribePath::Naive,
            ..Default::default()
        };
        assert_eq!(ex.extract(&img, &naive).unwrap(), f);

        let dense = ExtractOptions {
            top_k: 10000,
            nms_radius: 0,
            ..Default::default()
        };
        assert_eq!(ex.extract(&img, &dense).unwrap().keypoints.len(), 9000);
    }
}
