//! Cross-layer independent deformable description.
//!
//! For every keypoint the head
//!
//! 1. bilinearly samples one feature vector per pyramid level at the keypoint
//!    and concatenates them into a `C_sum` embedding,
//! 2. maps the embedding to `3 × M` offsets `(dx, dy)`, one set per level, in
//!    that level's own grid units,
//! 3. samples `M` points on every level at keypoint + offset, and
//! 4. aggregates the `M · C_sum` samples with one affine map into a `C_desc`
//!    descriptor, then L2-normalizes it.
//!
//! The aggregation input is ordered sample-major, level-minor:
//! `[s0: L1 | L2 | L3, s1: L1 | L2 | L3, ...]`.
//!
//! Two execution paths produce bit-identical descriptors. The naive path
//! materializes the whole `N × M·C_sum` sample matrix before projecting it.
//! The fused path walks keypoints in blocks and, for each `(sample, level)`
//! pair, projects the freshly sampled vectors through the matching row slice
//! of the aggregation matrix right away, so only one level's samples for one
//! block are ever alive. Both accumulate every output element starting from
//! the bias and adding terms in ascending input index, which is why their
//! results agree exactly for every block size.

use rayon::prelude::*;

use crate::backbone::Pyramid;
use crate::config::{ModelConfig, LEVEL_STRIDES};
use crate::error::{Error, Result};
use crate::tensor::{accumulate_transposed, normalize_row, AffineMap, DescriptorMatrix, Matrix};
use crate::weights::WeightStore;

pub const DEFAULT_BLOCK: usize = 64;

/// Maps an image pixel coordinate into a level's grid (cell-center aligned).
#[inline]
pub fn to_level(v: f32, level: usize) -> f32 {
    let s = LEVEL_STRIDES[level] as f32;
    (v + 0.5) / s - 0.5
}

/// Per-keypoint offsets, laid out `N × 3 × M × 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetSet {
    pub n: usize,
    pub m: usize,
    pub data: Vec<f32>,
}

impl OffsetSet {
    /// `(dx, dy)` of sample `s` on `level` for keypoint `k`.
    #[inline]
    pub fn get(&self, k: usize, level: usize, s: usize) -> (f32, f32) {
        let i = ((k * 3 + level) * self.m + s) * 2;
        (self.data[i], self.data[i + 1])
    }

    fn keypoint(&self, k: usize) -> &[f32] {
        let w = 6 * self.m;
        &self.data[k * w..(k + 1) * w]
    }
}

/// Peak number of auxiliary scalars held by one execution stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AuxStats {
    pub peak_scalars: usize,
}

#[derive(Default)]
struct AuxTracker {
    current: usize,
    peak: usize,
}

impl AuxTracker {
    fn alloc<T: Default + Clone>(&mut self, n: usize) -> Vec<T> {
        self.current += n;
        self.peak = self.peak.max(self.current);
        vec![T::default(); n]
    }

    fn free<T>(&mut self, buf: Vec<T>) {
        self.current -= buf.len();
    }
}

#[derive(Clone, Debug)]
pub struct DescriptionHead {
    config: ModelConfig,
    offset: AffineMap,
    aggregate: AffineMap,
    /// Aggregation weights as `[M·C_sum][C_desc]`; the rows belonging to one
    /// `(sample, level)` pair form a contiguous slice.
    aggregate_t: Vec<f32>,
}

impl DescriptionHead {
    pub fn from_weights(store: &WeightStore, config: &ModelConfig) -> Result<Self> {
        if store.config != *config {
            return Err(Error::config(format!(
                "weights are for {}, model is {}",
                store.config.name, config.name
            )));
        }
        let offset = store.affine("desc.0.offset")?;
        let aggregate = store.affine("desc.0.aggregate")?;
        if offset.in_dim != config.c_sum()
            || offset.out_dim != 6 * config.m
            || aggregate.in_dim != config.sample_dim()
            || aggregate.out_dim != config.c_desc
        {
            return Err(Error::config("description head weights do not match config"));
        }
        let aggregate_t = aggregate.transposed_weights();
        Ok(Self {
            config: *config,
            offset,
            aggregate,
            aggregate_t,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn offset_params(&self) -> usize {
        self.offset.param_count()
    }

    pub fn aggregate_params(&self) -> usize {
        self.aggregate.param_count()
    }

    fn check_pyramid(&self, pyramid: &Pyramid) -> Result<()> {
        for (l, &c) in self.config.level_channels().iter().enumerate() {
            if pyramid.level(l).channels != c {
                return Err(Error::config(format!(
                    "pyramid level {} has {} channels, config expects {c}",
                    l + 1,
                    pyramid.level(l).channels
                )));
            }
        }
        Ok(())
    }

    /// Concatenated per-level features at the keypoint.
    #[inline]
    fn embed_into(&self, pyramid: &Pyramid, kp: [f32; 2], out: &mut [f32]) {
        let mut start = 0;
        for (l, &c) in self.config.level_channels().iter().enumerate() {
            pyramid
                .level(l)
                .bilinear_sample_into(to_level(kp[0], l), to_level(kp[1], l), &mut out[start..start + c]);
            start += c;
        }
    }

    pub fn predict_offsets(&self, pyramid: &Pyramid, keypoints: &[[f32; 2]]) -> Result<OffsetSet> {
        self.check_pyramid(pyramid)?;
        let mut tracker = AuxTracker::default();
        Ok(self.offsets_tracked(pyramid, keypoints, &mut tracker))
    }

    fn offsets_tracked(&self, pyramid: &Pyramid, keypoints: &[[f32; 2]], tracker: &mut AuxTracker) -> OffsetSet {
        let (cs, w) = (self.config.c_sum(), 6 * self.config.m);
        let mut emb: Vec<f32> = tracker.alloc(keypoints.len() * cs);
        let mut data: Vec<f32> = tracker.alloc(keypoints.len() * w);
        for (k, kp) in keypoints.iter().enumerate() {
            self.embed_into(pyramid, *kp, &mut emb[k * cs..(k + 1) * cs]);
        }
        for k in 0..keypoints.len() {
            self.offset.apply(&emb[k * cs..(k + 1) * cs], &mut data[k * w..(k + 1) * w]);
        }
        tracker.free(emb);
        OffsetSet {
            n: keypoints.len(),
            m: self.config.m,
            data,
        }
    }

    /// Reference path: materializes every sample, then projects.
    pub fn describe_naive(
        &self,
        pyramid: &Pyramid,
        keypoints: &[[f32; 2]],
        offsets: &OffsetSet,
    ) -> Result<DescriptorMatrix> {
        self.check_pyramid(pyramid)?;
        if offsets.n != keypoints.len() || offsets.m != self.config.m {
            return Err(Error::shape(format!(
                "offsets for {} keypoints x {} samples, expected {} x {}",
                offsets.n,
                offsets.m,
                keypoints.len(),
                self.config.m
            )));
        }
        let mut tracker = AuxTracker::default();
        Ok(self.naive_tracked(pyramid, keypoints, offsets, &mut tracker))
    }

    fn naive_tracked(
        &self,
        pyramid: &Pyramid,
        keypoints: &[[f32; 2]],
        offsets: &OffsetSet,
        tracker: &mut AuxTracker,
    ) -> DescriptorMatrix {
        let cfg = &self.config;
        let (n, m, cs, dim) = (keypoints.len(), cfg.m, cfg.c_sum(), cfg.sample_dim());
        let channels = cfg.level_channels();
        let mut samples: Vec<f32> = tracker.alloc(n * dim);
        for (k, kp) in keypoints.iter().enumerate() {
            let row = &mut samples[k * dim..(k + 1) * dim];
            for s in 0..m {
                let mut start = s * cs;
                for (l, &c) in channels.iter().enumerate() {
                    let (dx, dy) = offsets.get(k, l, s);
                    let x = to_level(kp[0], l) + dx;
                    let y = to_level(kp[1], l) + dy;
                    pyramid.level(l).bilinear_sample_into(x, y, &mut row[start..start + c]);
                    start += c;
                }
            }
        }
        let mut out = Matrix::zeros(n, cfg.c_desc);
        for k in 0..n {
            let y = out.row_mut(k);
            y.copy_from_slice(&self.aggregate.bias);
            accumulate_transposed(&self.aggregate_t, &samples[k * dim..(k + 1) * dim], y);
            normalize_row(y);
        }
        tracker.free(samples);
        out
    }

    /// Offsets plus naive description, with the auxiliary-memory peak.
    pub fn describe_naive_full(&self, pyramid: &Pyramid, keypoints: &[[f32; 2]]) -> Result<(DescriptorMatrix, AuxStats)> {
        self.check_pyramid(pyramid)?;
        let mut tracker = AuxTracker::default();
        let offsets = self.offsets_tracked(pyramid, keypoints, &mut tracker);
        let desc = self.naive_tracked(pyramid, keypoints, &offsets, &mut tracker);
        tracker.free(offsets.data);
        Ok((desc, AuxStats { peak_scalars: tracker.peak }))
    }

    /// Blocked path: offsets, sampling and aggregation per block of at most
    /// `block` keypoints. Blocks run on the rayon pool; the result does not
    /// depend on the number of workers.
    pub fn describe_fused(&self, pyramid: &Pyramid, keypoints: &[[f32; 2]], block: usize) -> Result<DescriptorMatrix> {
        self.describe_fused_stats(pyramid, keypoints, block).map(|(d, _)| d)
    }

    pub fn describe_fused_stats(
        &self,
        pyramid: &Pyramid,
        keypoints: &[[f32; 2]],
        block: usize,
    ) -> Result<(DescriptorMatrix, AuxStats)> {
        if block == 0 {
            return Err(Error::config("block size must be at least 1"));
        }
        self.check_pyramid(pyramid)?;
        let dim = self.config.c_desc;
        let mut out = Matrix::zeros(keypoints.len(), dim);
        let peak = out
            .data
            .par_chunks_mut(block * dim)
            .zip(keypoints.par_chunks(block))
            .map(|(rows, kps)| self.fused_block(pyramid, kps, rows))
            .max()
            .unwrap_or(0);
        Ok((out, AuxStats { peak_scalars: peak }))
    }

    fn fused_block(&self, pyramid: &Pyramid, kps: &[[f32; 2]], rows: &mut [f32]) -> usize {
        let cfg = &self.config;
        let (m, cs, dim) = (cfg.m, cfg.c_sum(), cfg.c_desc);
        let channels = cfg.level_channels();
        let c_max = channels.iter().copied().max().unwrap_or(0);
        let mut tracker = AuxTracker::default();
        let offsets = self.offsets_tracked(pyramid, kps, &mut tracker);
        let mut buf: Vec<f32> = tracker.alloc(kps.len() * c_max);

        for y in rows.chunks_exact_mut(dim) {
            y.copy_from_slice(&self.aggregate.bias);
        }
        for s in 0..m {
            let mut base = s * cs;
            for (l, &c) in channels.iter().enumerate() {
                let level = pyramid.level(l);
                for (k, kp) in kps.iter().enumerate() {
                    let o = offsets.keypoint(k);
                    let i = (l * m + s) * 2;
                    let x = to_level(kp[0], l) + o[i];
                    let y = to_level(kp[1], l) + o[i + 1];
                    level.bilinear_sample_into(x, y, &mut buf[k * c..(k + 1) * c]);
                }
                let slice = &self.aggregate_t[base * dim..(base + c) * dim];
                for ch in 0..c {
                    let w = &slice[ch * dim..(ch + 1) * dim];
                    for (k, y) in rows.chunks_exact_mut(dim).enumerate() {
                        let v = buf[k * c + ch];
                        for (a, &wv) in y.iter_mut().zip(w) {
                            *a += wv * v;
                        }
                    }
                }
                base += c;
            }
        }
        for y in rows.chunks_exact_mut(dim) {
            normalize_row(y);
        }
        tracker.free(buf);
        tracker.free(offsets.data);
        tracker.peak
    }
}
