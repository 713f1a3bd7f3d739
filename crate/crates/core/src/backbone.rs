//! Convolutional encoder producing features at 1/2, 1/8 and 1/32 resolution.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{avg_pool, conv2d, relu_inplace, FeatureMap, Kernel2D};
use crate::weights::WeightStore;

/// Three feature levels: 1/2 (`c1` channels), 1/8 (`c2`), 1/32 (`c3`).
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: [FeatureMap; 3],
}

impl Pyramid {
    pub fn level(&self, l: usize) -> &FeatureMap {
        &self.levels[l]
    }
}

/// Basic residual block: conv3×3, ReLU, conv3×3, shortcut add, ReLU.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Kernel2D,
    conv2: Kernel2D,
    proj: Option<Kernel2D>,
}

impl ResBlock {
    fn load(store: &WeightStore, prefix: &str) -> Result<Self> {
        let conv1 = store.kernel(&format!("{prefix}.conv1"))?;
        let conv2 = store.kernel(&format!("{prefix}.conv2"))?;
        let proj = if conv1.in_channels != conv1.out_channels {
            Some(store.kernel(&format!("{prefix}.proj"))?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, proj })
    }

    fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let mut y = conv2d(x, &self.conv1, 1, 1)?;
        relu_inplace(&mut y);
        let mut y = conv2d(&y, &self.conv2, 1, 1)?;
        match &self.proj {
            Some(p) => {
                let s = conv2d(x, p, 1, 0)?;
                y.data.iter_mut().zip(&s.data).for_each(|(a, b)| *a += b);
            }
            None => y.data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += b),
        }
        relu_inplace(&mut y);
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: ModelConfig,
    stem1: Kernel2D,
    stem2: Kernel2D,
    stages: [Vec<ResBlock>; 3],
}

impl Backbone {
    pub fn from_weights(store: &WeightStore, config: &ModelConfig) -> Result<Self> {
        if store.config != *config {
            return Err(Error::config(format!(
                "weights are for {}, model is {}",
                store.config.name, config.name
            )));
        }
        let stem1 = store.kernel("stem.0.conv1")?;
        let stem2 = store.kernel("stem.0.conv2")?;
        let stage1 = vec![ResBlock::load(store, "stage1.0")?];
        let stage2 = (0..config.r2)
            .map(|b| ResBlock::load(store, &format!("stage2.{b}")))
            .collect::<Result<Vec<_>>>()?;
        let stage3 = (0..config.r3)
            .map(|b| ResBlock::load(store, &format!("stage3.{b}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: *config,
            stem1,
            stem2,
            stages: [stage1, stage2, stage3],
        })
    }

    pub fn param_count(&self) -> usize {
        let blocks: usize = self
            .stages
            .iter()
            .flatten()
            .map(|b| b.conv1.param_count() + b.conv2.param_count() + b.proj.as_ref().map_or(0, |p| p.param_count()))
            .sum();
        self.stem1.param_count() + self.stem2.param_count() + blocks
    }

    /// Runs the encoder on an `H×W×3` image with `H`, `W` multiples of 32.
    pub fn forward(&self, image: &FeatureMap) -> Result<Pyramid> {
        if image.channels != 3 {
            return Err(Error::config(format!("expected 3 image channels, got {}", image.channels)));
        }
        if image.height == 0 || image.width == 0 || !image.height.is_multiple_of(32) || !image.width.is_multiple_of(32) {
            return Err(Error::shape(format!(
                "image {}x{} must be a non-empty multiple of 32 (pad first)",
                image.height, image.width
            )));
        }
        let mut x = conv2d(image, &self.stem1, 2, 1)?;
        relu_inplace(&mut x);
        let mut x = conv2d(&x, &self.stem2, 1, 1)?;
        relu_inplace(&mut x);
        let mut levels = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = avg_pool(&x, 4)?;
            }
            for block in stage {
                x = block.forward(&x)?;
            }
            levels.push(x.clone());
        }
        debug_assert_eq!(levels[2].channels, self.config.c3);
        let levels: [FeatureMap; 3] = levels.try_into().expect("three stages");
        Ok(Pyramid { levels })
    }
}

/// Replicates the last row/column until both dimensions are multiples of
/// `multiple`. Returns the padded image and the original `(height, width)`.
pub fn pad_to_multiple(image: &FeatureMap, multiple: usize) -> (FeatureMap, (usize, usize)) {
    let orig = (image.height, image.width);
    let round = |v: usize| v.max(1).div_ceil(multiple) * multiple;
    let (h, w) = (round(image.height), round(image.width));
    if (h, w) == orig {
        return (image.clone(), orig);
    }
    let padded = FeatureMap::from_fn(h, w, image.channels, |y, x, c| {
        image.get(y.min(image.height - 1), x.min(image.width - 1), c)
    });
    (padded, orig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{param_count, PRESETS};
    use crate::weights::init_weights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_for_a48() {
        let cfg = ModelConfig::by_name("A48").unwrap();
        let bb = Backbone::from_weights(&init_weights(&cfg, 0), &cfg).unwrap();
        let p = bb.forward(&FeatureMap::filled(64, 64, 3, 0.5)).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|l| (l.height, l.width, l.channels)).collect();
        assert_eq!(dims, vec![(32, 32, 4), (8, 8, 4), (2, 2, 4)]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_pyramid() {
        let cfg = ModelConfig::by_name("T64").unwrap();
        let mut store = init_weights(&cfg, 1);
        for t in &mut store.tensors {
            if t.name.ends_with(".bias") {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let bb = Backbone::from_weights(&store, &cfg).unwrap();
        let p = bb.forward(&FeatureMap::zeros(64, 32, 3)).unwrap();
        assert!(p.levels.iter().all(|l| l.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn consumes_backbone_param_count() {
        for cfg in PRESETS {
            let bb = Backbone::from_weights(&init_weights(&cfg, 0), &cfg).unwrap();
            assert_eq!(bb.param_count(), param_count(&cfg).backbone, "{}", cfg.name);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = ModelConfig::by_name("A48").unwrap();
        let bb = Backbone::from_weights(&init_weights(&cfg, 0), &cfg).unwrap();
        assert!(matches!(bb.forward(&FeatureMap::zeros(48, 64, 3)), Err(Error::Shape(_))));
        let other = ModelConfig::by_name("N64").unwrap();
        assert!(matches!(
            Backbone::from_weights(&init_weights(&other, 0), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shift_by_32_equivariance() {
        let cfg = ModelConfig::by_name("N64").unwrap();
        let bb = Backbone::from_weights(&init_weights(&cfg, 4), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w) = (64, 352);
        let big = FeatureMap::from_fn(h, w + 32, 3, |_, _, _| rng.random_range(0.0..1.0));
        let crop = |x0: usize| FeatureMap::from_fn(h, w, 3, |y, x, c| big.get(y, x + x0, c));
        // image(x) = shifted(x + 32)
        let image = crop(32);
        let shifted = crop(0);
        let pa = bb.forward(&image).unwrap();
        let pb = bb.forward(&shifted).unwrap();
        for (l, cells) in [16usize, 4, 1].into_iter().enumerate() {
            let (a, b) = (&pa.levels[l], &pb.levels[l]);
            // stay clear of the zero-padded borders on both images
            let margin = [24, 8, 4][l];
            for y in 0..a.height {
                for x in margin..a.width - margin - cells {
                    for c in 0..a.channels {
                        let d = (a.get(y, x, c) - b.get(y, x + cells, c)).abs();
                        assert!(d <= 1e-5, "level {l} ({y},{x},{c}) differs by {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn padding_examples() {
        let img = FeatureMap::filled(480, 640, 3, 0.2);
        let (p, orig) = pad_to_multiple(&img, 32);
        assert_eq!((p.height, p.width, orig), (480, 640, (480, 640)));

        let img = FeatureMap::from_fn(481, 640, 3, |y, _, _| y as f32);
        let (p, orig) = pad_to_multiple(&img, 32);
        assert_eq!((p.height, p.width, orig), (512, 640, (481, 640)));
        assert_eq!(p.get(511, 3, 0), 480.0);

        let img = FeatureMap::filled(1, 1, 3, 0.7);
        let (p, _) = pad_to_multiple(&img, 32);
        assert_eq!((p.height, p.width), (32, 32));
        assert!(p.data.iter().all(|&v| v == 0.7));
    }
}
