//! Detection head and heatmap post-processing.

use crate::backbone::Pyramid;
use crate::config::{ModelConfig, LEVEL_STRIDES};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, pixel_shuffle, relu_inplace, FeatureMap, Kernel2D};
use crate::weights::WeightStore;

/// Full-resolution `H×W×1` logit map.
pub type Heatmap = FeatureMap;

#[derive(Clone, Debug)]
pub struct DetectHead {
    compress: [Kernel2D; 3],
    conv1: Kernel2D,
    conv2: Kernel2D,
}

impl DetectHead {
    pub fn from_weights(store: &WeightStore, config: &ModelConfig) -> Result<Self> {
        if store.config != *config {
            return Err(Error::config(format!(
                "weights are for {}, model is {}",
                store.config.name, config.name
            )));
        }
        Ok(Self {
            compress: [
                store.kernel("detect.0.compress1")?,
                store.kernel("detect.0.compress2")?,
                store.kernel("detect.0.compress3")?,
            ],
            conv1: store.kernel("detect.0.conv1")?,
            conv2: store.kernel("detect.0.conv2")?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.compress.iter().map(Kernel2D::param_count).sum::<usize>()
            + self.conv1.param_count()
            + self.conv2.param_count()
    }

    /// Compresses each level with a 1×1 conv, upsamples levels 2 and 3 to the
    /// 1/2 grid by nearest neighbour, sums, refines with two 3×3 convs and
    /// unfolds the four output channels into a full-resolution map.
    pub fn forward(&self, pyramid: &Pyramid) -> Result<Heatmap> {
        let base = pyramid.level(0);
        let (h, w) = (base.height, base.width);
        let mut fused: Option<FeatureMap> = None;
        for (l, kernel) in self.compress.iter().enumerate() {
            let c = conv2d(pyramid.level(l), kernel, 1, 0)?;
            let f = LEVEL_STRIDES[l] / LEVEL_STRIDES[0];
            if c.height * f != h || c.width * f != w {
                return Err(Error::shape(format!(
                    "pyramid level {} is {}x{}, expected {}x{}",
                    l + 1,
                    c.height,
                    c.width,
                    h / f,
                    w / f
                )));
            }
            match fused.as_mut() {
                None => fused = Some(c),
                Some(acc) => {
                    let ch = acc.channels;
                    for y in 0..h {
                        for x in 0..w {
                            let src = c.pixel(y / f, x / f);
                            let start = (y * w + x) * ch;
                            for (a, &v) in acc.data[start..start + ch].iter_mut().zip(src) {
                                *a += v;
                            }
                        }
                    }
                }
            }
        }
        let mut x = fused.expect("three levels");
        relu_inplace(&mut x);
        let mut x = conv2d(&x, &self.conv1, 1, 1)?;
        relu_inplace(&mut x);
        let x = conv2d(&x, &self.conv2, 1, 1)?;
        pixel_shuffle(&x, 2)
    }
}

/// Sparse detections in image pixel coordinates, strongest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeypointSet {
    pub coords: Vec<[f32; 2]>,
    pub scores: Vec<f32>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Strict local maxima of `(2r+1)²` windows inside the valid region, top-`k`
/// by score.
///
/// Only the top-left `valid_w × valid_h` region is considered, both for
/// candidates and for their neighbourhoods. Radius 0 disables suppression.
/// Equal scores are ordered by `(y, x)` ascending.
pub fn nms_topk(heatmap: &Heatmap, radius: usize, k: usize, valid_w: usize, valid_h: usize) -> KeypointSet {
    let w = valid_w.min(heatmap.width);
    let h = valid_h.min(heatmap.height);
    let at = |y: usize, x: usize| heatmap.data[(y * heatmap.width + x) * heatmap.channels];

    let mut candidates: Vec<(f32, u32, u32)> = Vec::new();
    if radius == 0 {
        for y in 0..h {
            for x in 0..w {
                candidates.push((at(y, x), y as u32, x as u32));
            }
        }
    } else {
        // separable window maximum, then a uniqueness check on the survivors
        let mut row_max = vec![f32::NEG_INFINITY; w * h];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                let mut m = f32::NEG_INFINITY;
                for xx in lo..=hi {
                    m = m.max(at(y, xx));
                }
                row_max[y * w + x] = m;
            }
        }
        for y in 0..h {
            let lo_y = y.saturating_sub(radius);
            let hi_y = (y + radius).min(h - 1);
            for x in 0..w {
                let v = at(y, x);
                let mut m = f32::NEG_INFINITY;
                for yy in lo_y..=hi_y {
                    m = m.max(row_max[yy * w + x]);
                }
                if v < m || v.is_nan() {
                    continue;
                }
                let lo_x = x.saturating_sub(radius);
                let hi_x = (x + radius).min(w - 1);
                let unique = (lo_y..=hi_y).all(|yy| (lo_x..=hi_x).all(|xx| (yy == y && xx == x) || at(yy, xx) < v));
                if unique {
                    candidates.push((v, y as u32, x as u32));
                }
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    candidates.truncate(k);
    KeypointSet {
        coords: candidates.iter().map(|&(_, y, x)| [x as f32, y as f32]).collect(),
        scores: candidates.iter().map(|&(s, _, _)| s).collect(),
    }
}

/// Brute-force counterpart of [`nms_topk`] over the whole map: a pixel
/// survives iff every other pixel within Chebyshev distance `r` is strictly
/// smaller. Returns `(score, y, x)`.
pub fn nms_reference(hm: &Heatmap, r: usize, k: usize) -> Vec<(f32, usize, usize)> {
    let mut pts = Vec::new();
    for y in 0..hm.height {
        for x in 0..hm.width {
            pts.push((hm.get(y, x, 0), y, x));
        }
    }
    let mut keep: Vec<_> = pts
        .iter()
        .filter(|p| {
            pts.iter().all(|q| {
                (q.1 == p.1 && q.2 == p.2) || q.1.abs_diff(p.1).max(q.2.abs_diff(p.2)) > r || q.0 < p.0
            })
        })
        .copied()
        .collect();
    keep.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    keep.truncate(k);
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use crate::config::param_count;
    use crate::weights::init_weights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_shape_and_zero_weights() {
        let cfg = ModelConfig::by_name("A48").unwrap();
        let mut store = init_weights(&cfg, 0);
        let pyr = Backbone::from_weights(&store, &cfg)
            .unwrap()
            .forward(&FeatureMap::filled(64, 64, 3, 0.3))
            .unwrap();
        let head = DetectHead::from_weights(&store, &cfg).unwrap();
        assert_eq!(head.param_count(), 356);
        assert_eq!(head.param_count(), param_count(&cfg).detect);
        let hm = head.forward(&pyr).unwrap();
        assert_eq!((hm.height, hm.width, hm.channels), (64, 64, 1));

        for t in &mut store.tensors {
            if t.name.starts_with("detect.") {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let hm = DetectHead::from_weights(&store, &cfg).unwrap().forward(&pyr).unwrap();
        assert!(hm.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_spike() {
        let mut hm = FeatureMap::filled(16, 16, 1, f32::NEG_INFINITY);
        hm.set(5, 9, 0, 2.0);
        let kp = nms_topk(&hm, 2, 4096, 16, 16);
        assert_eq!(kp.coords, vec![[9.0, 5.0]]);
        assert_eq!(kp.scores, vec![2.0]);
    }

    #[test]
    fn close_spikes_keep_stronger() {
        let mut hm = FeatureMap::zeros(16, 16, 1);
        hm.set(8, 4, 0, 1.0);
        hm.set(8, 6, 0, 3.0);
        let kp = nms_topk(&hm, 2, 10, 16, 16);
        assert_eq!(kp.coords, vec![[6.0, 8.0]]);
    }

    #[test]
    fn top_k_of_separated_maxima() {
        let mut hm = FeatureMap::zeros(40, 40, 1);
        for i in 0..10 {
            hm.set(3 + (i / 5) * 20, 3 + (i % 5) * 8, 0, 1.0 + i as f32);
        }
        let kp = nms_topk(&hm, 2, 3, 40, 40);
        assert_eq!(kp.scores, vec![10.0, 9.0, 8.0]);
    }

    #[test]
    fn padded_margin_is_ignored() {
        let mut hm = FeatureMap::zeros(32, 32, 1);
        hm.set(30, 30, 0, 5.0);
        hm.set(10, 10, 0, 1.0);
        let kp = nms_topk(&hm, 2, 10, 20, 20);
        assert_eq!(kp.coords, vec![[10.0, 10.0]]);
    }

    #[test]
    fn matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..40 {
            let r = trial % 4;
            // quantized values create plateaus and ties
            let hm = FeatureMap::from_fn(24, 24, 1, |_, _, _| (rng.random_range(0..20) as f32) * 0.5);
            let got = nms_topk(&hm, r, 50, 24, 24);
            let want = nms_reference(&hm, r, 50);
            let want_coords: Vec<_> = want.iter().map(|&(_, y, x)| [x as f32, y as f32]).collect();
            assert_eq!(got.coords, want_coords, "radius {r}");
            for (i, c) in got.coords.iter().enumerate() {
                for d in &got.coords[i + 1..] {
                    let cheb = (c[0] - d[0]).abs().max((c[1] - d[1]).abs());
                    assert!(r == 0 || cheb > r as f32);
                }
            }
            assert!(got.scores.windows(2).all(|p| p[0] >= p[1]));
        }
    }
}
