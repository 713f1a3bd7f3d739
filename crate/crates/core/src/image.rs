//! 8-bit binary PPM/PGM images and procedural test images.
//!
//! Images are `H×W×3` maps with values in `[0, 1]` (byte / 255). Grayscale
//! files are replicated to three channels on load.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&[u8]> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Image("truncated header".into()));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image(format!("bad header field {:?}", String::from_utf8_lossy(t))))
    }
}

/// Parses a binary `P6` or `P5` image with maxval at most 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<FeatureMap> {
    let mut cur = Cursor { bytes, pos: 0 };
    let channels = match cur.token()? {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(Error::Image(format!(
                "unsupported magic {:?}, expected P6 or P5",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = cur.number()?;
    let height = cur.number()?;
    let maxval = cur.number()?;
    if width == 0 || height == 0 {
        return Err(Error::Image("empty image".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!("maxval {maxval} is not 8-bit")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = cur.pos + 1;
    let len = width * height * channels;
    let raster = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::Image(format!("raster needs {len} bytes")))?;
    let max = maxval as f32;
    let data = if channels == 3 {
        raster.iter().map(|&b| b as f32 / max).collect()
    } else {
        raster.iter().flat_map(|&b| [b as f32 / max; 3]).collect()
    };
    FeatureMap::from_vec(height, width, 3, data)
}

pub fn read_pnm(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    decode_pnm(&bytes)
}

/// Encodes a 3-channel map as `P6` or a 1-channel map as `P5`, rounding
/// `v · 255` after clamping to `[0, 1]`.
pub fn encode_pnm(image: &FeatureMap) -> Result<Vec<u8>> {
    let magic = match image.channels {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::Image(format!("cannot encode {c} channels"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_pnm(path: &Path, image: &FeatureMap) -> Result<()> {
    fs::write(path, encode_pnm(image)?)?;
    Ok(())
}

#[inline]
fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest multiple of 1/255, as a round trip
/// through an 8-bit file would.
pub fn quantize(image: &mut FeatureMap) {
    image.data.iter_mut().for_each(|v| *v = to_byte(*v) as f32 / 255.0);
}

/// Cell sizes of the noise octaves, coarse to fine.
const OCTAVES: [usize; 6] = [48, 24, 12, 6, 3, 2];
const GAIN: f32 = 1.4;

/// Seeded multi-scale value noise, quantized to 8 bits.
///
/// Each channel sums independent octaves of smoothly interpolated random
/// lattices, each finer octave `GAIN` times stronger; the sum is stretched to `[0, 1]`.
pub fn value_noise(height: usize, width: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f32; height * width * 3];
    let mut amplitude = 1.0f32;
    for cell in OCTAVES {
        let gw = width / cell + 2;
        let gh = height / cell + 2;
        for c in 0..3 {
            let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.random_range(0.0..1.0)).collect();
            for y in 0..height {
                let fy = y as f32 / cell as f32;
                let (y0, ty) = (fy as usize, smooth(fy.fract()));
                for x in 0..width {
                    let fx = x as f32 / cell as f32;
                    let (x0, tx) = (fx as usize, smooth(fx.fract()));
                    let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
                    let top = at(y0, x0) + tx * (at(y0, x0 + 1) - at(y0, x0));
                    let bottom = at(y0 + 1, x0) + tx * (at(y0 + 1, x0 + 1) - at(y0 + 1, x0));
                    acc[(y * width + x) * 3 + c] += amplitude * (top + ty * (bottom - top));
                }
            }
        }
        amplitude *= GAIN;
    }
    let lo = acc.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = acc.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(f32::EPSILON);
    let mut image = FeatureMap {
        height,
        width,
        channels: 3,
        data: acc.into_iter().map(|v| (v - lo) / span).collect(),
    };
    quantize(&mut image);
    image
}

#[inline]
fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}
