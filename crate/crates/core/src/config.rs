//! Model presets and structural accounting.
//!
//! Every preset is fully determined by eight numbers. The architecture walk in
//! [`architecture`] is the single description of the network that the weight
//! layout, parameter counts and FLOP estimates all derive from.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub name: &'static str,
    /// Stable identifier written into weight files.
    pub id: u8,
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub r2: usize,
    pub r3: usize,
    pub c_det: usize,
    /// Deformable samples per pyramid level.
    pub m: usize,
    pub c_desc: usize,
}

const fn preset(
    name: &'static str,
    id: u8,
    [c1, c2, c3]: [usize; 3],
    [r2, r3]: [usize; 2],
    c_det: usize,
    m: usize,
    c_desc: usize,
) -> ModelConfig {
    ModelConfig {
        name,
        id,
        c1,
        c2,
        c3,
        r2,
        r3,
        c_det,
        m,
        c_desc,
    }
}

pub const PRESETS: [ModelConfig; 9] = [
    preset("A48", 0, [4, 4, 4], [1, 1], 4, 4, 48),
    preset("N64", 1, [8, 8, 8], [1, 1], 8, 8, 64),
    preset("T64", 2, [8, 16, 24], [1, 1], 8, 8, 64),
    preset("S64", 3, [8, 24, 32], [1, 1], 8, 16, 64),
    preset("M64", 4, [16, 32, 48], [1, 1], 8, 16, 64),
    preset("L64", 5, [16, 48, 96], [1, 1], 8, 16, 64),
    preset("G128", 6, [16, 64, 256], [1, 1], 8, 32, 128),
    preset("E128", 7, [16, 64, 256], [2, 2], 8, 32, 128),
    preset("U128", 8, [32, 128, 256], [2, 2], 8, 32, 128),
];

/// Published parameter counts in millions, as displayed (backbone, detect,
/// desc, total). The number of decimals shown is the comparison precision.
pub const PUBLISHED_PARAMS: [(&str, [&str; 4]); 9] = [
    ("A48", ["0.00123", "0.00036", "0.003", "0.004"]),
    ("N64", ["0.00448", "0.00109", "0.014", "0.019"]),
    ("T64", ["0.015", "0.00128", "0.027", "0.043"]),
    ("S64", ["0.026", "0.00141", "0.072", "0.100"]),
    ("M64", ["0.058", "0.00167", "0.108", "0.168"]),
    ("L64", ["0.166", "0.00218", "0.179", "0.347"]),
    ("G128", ["0.809", "0.00359", "1.441", "2.254"]),
    ("E128", ["2.063", "0.00359", "1.441", "3.508"]),
    ("U128", ["2.612", "0.00423", "1.784", "4.400"]),
];

/// Loss weights `(w_ds, w_op, w_us)` used to train each preset.
pub const LOSS_WEIGHTS: [(&str, [f32; 3]); 9] = [
    ("A48", [0.05, 1.0, 1.0]),
    ("N64", [0.1, 1.0, 1.0]),
    ("T64", [0.5, 1.0, 1.0]),
    ("S64", [1.0, 0.0, 1.0]),
    ("M64", [1.0, 0.0, 1.0]),
    ("L64", [1.0, 0.0, 1.0]),
    ("G128", [1.0, 0.0, 1.0]),
    ("E128", [1.0, 0.0, 1.0]),
    ("U128", [1.0, 0.0, 1.0]),
];

impl ModelConfig {
    pub fn by_name(name: &str) -> Result<ModelConfig> {
        PRESETS
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
            .copied()
            .ok_or_else(|| Error::config(format!("unknown model config {name:?}")))
    }

    pub fn by_id(id: u8) -> Result<ModelConfig> {
        PRESETS
            .iter()
            .find(|c| c.id == id)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown model config id {id}")))
    }

    pub fn c_sum(&self) -> usize {
        self.c1 + self.c2 + self.c3
    }

    pub fn level_channels(&self) -> [usize; 3] {
        [self.c1, self.c2, self.c3]
    }

    /// Length of the aggregation input, `M · C_sum`.
    pub fn sample_dim(&self) -> usize {
        self.m * self.c_sum()
    }

    pub fn loss_weights(&self) -> [f32; 3] {
        LOSS_WEIGHTS
            .iter()
            .find(|(n, _)| *n == self.name)
            .map(|(_, w)| *w)
            .unwrap_or([1.0, 0.0, 1.0])
    }
}

/// Downsampling factor of each pyramid level.
pub const LEVEL_STRIDES: [usize; 3] = [2, 8, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Backbone,
    Detect,
    Desc,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Square convolution; `level` is the pyramid level (0..3) of its output.
    Conv {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        level: usize,
    },
    /// Per-keypoint fully connected map.
    Affine { in_dim: usize, out_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layer {
    /// `stage.block.layer`, without the `.weight` / `.bias` suffix.
    pub name: String,
    pub component: Component,
    pub kind: LayerKind,
}

impl Layer {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv { in_ch, out_ch, k, .. } => vec![out_ch, in_ch, k, k],
            LayerKind::Affine { in_dim, out_dim } => vec![out_dim, in_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.kind {
            LayerKind::Conv { out_ch, .. } => out_ch,
            LayerKind::Affine { out_dim, .. } => out_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_dim()
    }
}

fn conv(name: String, component: Component, in_ch: usize, out_ch: usize, k: usize, level: usize) -> Layer {
    Layer {
        name,
        component,
        kind: LayerKind::Conv { in_ch, out_ch, k, level },
    }
}

/// Every parameterized layer of the network, in weight-file order.
pub fn architecture(cfg: &ModelConfig) -> Vec<Layer> {
    use Component::*;
    let mut layers = vec![
        conv("stem.0.conv1".into(), Backbone, 3, cfg.c1, 4, 0),
        conv("stem.0.conv2".into(), Backbone, cfg.c1, cfg.c1, 3, 0),
        conv("stage1.0.conv1".into(), Backbone, cfg.c1, cfg.c1, 3, 0),
        conv("stage1.0.conv2".into(), Backbone, cfg.c1, cfg.c1, 3, 0),
    ];
    let stages = [(2, cfg.c1, cfg.c2, cfg.r2), (3, cfg.c2, cfg.c3, cfg.r3)];
    for (stage, c_in, c_out, blocks) in stages {
        let level = stage - 1;
        for b in 0..blocks {
            let first_in = if b == 0 { c_in } else { c_out };
            layers.push(conv(format!("stage{stage}.{b}.conv1"), Backbone, first_in, c_out, 3, level));
            layers.push(conv(format!("stage{stage}.{b}.conv2"), Backbone, c_out, c_out, 3, level));
            if first_in != c_out {
                layers.push(conv(format!("stage{stage}.{b}.proj"), Backbone, first_in, c_out, 1, level));
            }
        }
    }
    for (l, c) in cfg.level_channels().into_iter().enumerate() {
        layers.push(conv(format!("detect.0.compress{}", l + 1), Detect, c, cfg.c_det, 1, l));
    }
    layers.push(conv("detect.0.conv1".into(), Detect, cfg.c_det, cfg.c_det, 3, 0));
    layers.push(conv("detect.0.conv2".into(), Detect, cfg.c_det, 4, 3, 0));
    layers.push(Layer {
        name: "desc.0.offset".into(),
        component: Desc,
        kind: LayerKind::Affine {
            in_dim: cfg.c_sum(),
            out_dim: 6 * cfg.m,
        },
    });
    layers.push(Layer {
        name: "desc.0.aggregate".into(),
        component: Desc,
        kind: LayerKind::Affine {
            in_dim: cfg.sample_dim(),
            out_dim: cfg.c_desc,
        },
    });
    layers
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub backbone: usize,
    pub detect: usize,
    pub desc: usize,
    pub total: usize,
}

pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let mut pc = ParamCount {
        backbone: 0,
        detect: 0,
        desc: 0,
        total: 0,
    };
    for layer in architecture(cfg) {
        let n = layer.param_count();
        match layer.component {
            Component::Backbone => pc.backbone += n,
            Component::Detect => pc.detect += n,
            Component::Desc => pc.desc += n,
        }
        pc.total += n;
    }
    pc
}

/// True when `count` parameters, expressed in millions and rounded to the
/// number of decimals shown in `displayed`, reproduce `displayed` exactly.
pub fn round_matches(count: usize, displayed: &str) -> bool {
    let decimals = displayed.split_once('.').map_or(0, |(_, frac)| frac.len());
    format!("{:.*}", decimals, count as f64 / 1e6) == displayed
}

/// Multiply-accumulate count for one image, counting one MAC as one FLOP.
///
/// Covers every convolution (output cells × per-cell MACs), the two
/// description-head affine maps per keypoint, and bilinear sampling at four
/// MACs per channel per sample.
pub fn flops_estimate(cfg: &ModelConfig, h: usize, w: usize, n_keypoints: usize) -> u64 {
    if h == 0 || w == 0 {
        return 0;
    }
    let cells = |level: usize| -> u64 {
        let s = LEVEL_STRIDES[level];
        ((h / s) * (w / s)) as u64
    };
    let mut total = 0u64;
    for layer in architecture(cfg) {
        match layer.kind {
            LayerKind::Conv { in_ch, out_ch, k, level } => {
                total += cells(level) * (in_ch * out_ch * k * k) as u64;
            }
            LayerKind::Affine { in_dim, out_dim } => {
                total += n_keypoints as u64 * (in_dim * out_dim) as u64;
            }
        }
    }
    // one embedding sample plus M deformable samples per level
    let samples_per_kp = (4 * cfg.c_sum() * (1 + cfg.m)) as u64;
    total + n_keypoints as u64 * samples_per_kp
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form counts, written independently of [`architecture`].
    fn closed_form(c: &ModelConfig) -> [usize; 4] {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let mut bb = conv(3, c.c1, 4) + 3 * conv(c.c1, c.c1, 3);
        for (cp, cc, r) in [(c.c1, c.c2, c.r2), (c.c2, c.c3, c.r3)] {
            bb += conv(cp, cc, 3) + conv(cc, cc, 3) + if cp != cc { conv(cp, cc, 1) } else { 0 };
            bb += (r - 1) * 2 * conv(cc, cc, 3);
        }
        let det = conv(c.c1, c.c_det, 1)
            + conv(c.c2, c.c_det, 1)
            + conv(c.c3, c.c_det, 1)
            + conv(c.c_det, c.c_det, 3)
            + conv(c.c_det, 4, 3);
        let cs = c.c_sum();
        let desc = cs * 6 * c.m + 6 * c.m + c.m * cs * c.c_desc + c.c_desc;
        [bb, det, desc, bb + det + desc]
    }

    #[test]
    fn architecture_agrees_with_closed_form() {
        for cfg in PRESETS {
            let pc = param_count(&cfg);
            assert_eq!([pc.backbone, pc.detect, pc.desc, pc.total], closed_form(&cfg), "{}", cfg.name);
        }
    }

    #[test]
    fn named_examples() {
        let a48 = ModelConfig::by_name("A48").unwrap();
        assert_eq!(param_count(&a48).total, 4252);
        assert_eq!(param_count(&a48).detect, 356);
        let u128 = ModelConfig::by_name("U128").unwrap();
        assert_eq!(param_count(&u128).desc, 1_784_128);
        let e128 = ModelConfig::by_name("E128").unwrap();
        assert_eq!(param_count(&e128).backbone, 2_063_488);
    }

    #[test]
    fn published_table_round_matches() {
        for (cfg, (name, shown)) in PRESETS.iter().zip(PUBLISHED_PARAMS) {
            assert_eq!(cfg.name, name);
            let pc = param_count(cfg);
            for (count, disp) in [pc.backbone, pc.detect, pc.desc, pc.total].into_iter().zip(shown) {
                assert!(round_matches(count, disp), "{name}: {count} vs {disp}");
            }
        }
    }

    #[test]
    fn structural_scaling_limits() {
        for c in PRESETS {
            assert!(c.c1 <= 32);
            assert_eq!(c.c_det, if c.name == "A48" { 4 } else { 8 });
            assert_eq!(c.c_sum(), c.c1 + c.c2 + c.c3);
        }
    }

    #[test]
    fn flops() {
        let a48 = ModelConfig::by_name("A48").unwrap();
        let g = flops_estimate(&a48, 480, 640, 1024) as f64 / 1e9;
        assert!((0.04..=0.12).contains(&g), "{g}");
        assert_eq!(flops_estimate(&a48, 0, 0, 1024), 0);
    }

    #[test]
    fn lookup() {
        assert!(ModelConfig::by_name("X1").is_err());
        assert_eq!(ModelConfig::by_id(8).unwrap().name, "U128");
        assert_eq!(ModelConfig::by_name("s64").unwrap().loss_weights(), [1.0, 0.0, 1.0]);
    }
}
