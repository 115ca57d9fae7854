//! Low-quality image synthesis: Gaussian blur, box-downsampling with bilinear
//! re-upsampling, and additive Gaussian noise, composed by recipe strings such
//! as `blur:2.0+sr:4+noise:1.0`.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Step {
    /// Gaussian blur, standard deviation in pixels.
    Blur(f64),
    /// Box-average by `factor`, then bilinear back to full size.
    Downsample(usize),
    /// Additive noise; standard deviation on the 0–255 scale.
    Noise(f64),
}

impl Step {
    fn validate(&self) -> Result<()> {
        match *self {
            Step::Blur(s) if !(s > 0.0 && s.is_finite()) => {
                Err(Error::param(format!("blur sigma must be > 0, got {s}")))
            }
            Step::Downsample(f) if f < 2 => {
                Err(Error::param(format!("downsample factor must be >= 2, got {f}")))
            }
            Step::Noise(s) if !(s >= 0.0 && s.is_finite()) => {
                Err(Error::param(format!("noise sigma must be >= 0, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Blur(s) => write!(f, "blur:{s:?}"),
            Step::Downsample(k) => write!(f, "sr:{k}"),
            Step::Noise(s) => write!(f, "noise:{s:?}"),
        }
    }
}

/// Ordered degradation recipe.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DegradationSpec {
    steps: Vec<Step>,
}

impl DegradationSpec {
    pub fn new(steps: Vec<Step>) -> Result<Self> {
        for s in &steps {
            s.validate()?;
        }
        Ok(DegradationSpec { steps })
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }

    /// The four low-quality recipes used for base training, in table order.
    pub fn table_recipes() -> [DegradationSpec; 4] {
        [
            DegradationSpec { steps: vec![Step::Blur(3.0), Step::Noise(30.0)] },
            DegradationSpec { steps: vec![Step::Downsample(4)] },
            DegradationSpec { steps: vec![Step::Blur(2.0), Step::Downsample(4)] },
            DegradationSpec {
                steps: vec![Step::Blur(2.0), Step::Downsample(4), Step::Noise(1.0)],
            },
        ]
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.steps.is_empty() {
            return f.write_str("none");
        }
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl FromStr for DegradationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::identity());
        }
        let steps = s
            .split('+')
            .map(|part| {
                let (kind, val) = part.trim().split_once(':').ok_or_else(|| {
                    Error::config(format!("degradation step {part:?} lacks ':<value>'"))
                })?;
                let bad = || Error::config(format!("bad value in degradation step {part:?}"));
                match kind {
                    "blur" => Ok(Step::Blur(val.parse().map_err(|_| bad())?)),
                    "sr" => Ok(Step::Downsample(val.parse().map_err(|_| bad())?)),
                    "noise" => Ok(Step::Noise(val.parse().map_err(|_| bad())?)),
                    _ => Err(Error::config(format!("unknown degradation step {kind:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(steps)
    }
}

impl Serialize for DegradationSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DegradationSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Normalized `k×k` Gaussian with `k = 2·ceil(3σ) + 1`.
pub fn gaussian_kernel(sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let k = 2 * radius + 1;
    let mut data = Vec::with_capacity(k * k);
    for y in 0..k {
        for x in 0..k {
            let (dy, dx) = (y as f64 - radius as f64, x as f64 - radius as f64);
            data.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Tensor::new(&[k, k], data)
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Gaussian blur with reflect padding, clamped to `[0, 1]`.
///
/// Each output is accumulated as `x[p] + Σ k_i·(x[p+i] − x[p])`, which equals
/// the plain weighted sum for a normalized kernel and leaves constant regions
/// bit-exact.
pub fn blur(img: &Image, sigma: f64) -> Result<Image> {
    let kernel = gaussian_kernel(sigma)?;
    let k = kernel.shape()[0];
    let (c, h, w) = img.dims();
    if k > 2 * w || k > 2 * h {
        return Err(Error::param(format!(
            "blur kernel {k}×{k} (sigma {sigma}) too wide for a {h}×{w} image"
        )));
    }
    let r = (k / 2) as isize;
    let kd = kernel.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let center = img.get(ch, y, x);
                let mut acc = 0.0;
                for dy in 0..k {
                    let sy = reflect(y as isize + dy as isize - r, h);
                    for dx in 0..k {
                        let sx = reflect(x as isize + dx as isize - r, w);
                        acc += kd[dy * k + dx] * (img.get(ch, sy, sx) - center);
                    }
                }
                out[(ch * h + y) * w + x] = center + acc;
            }
        }
    }
    Ok(Image::new(c, h, w, out)?.clamped())
}

/// Box-average pooling by `factor`. The mean is taken relative to the block's
/// first sample so constant blocks pool exactly.
pub fn box_downsample(img: &Image, factor: usize) -> Result<Image> {
    let (c, h, w) = img.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::param(format!(
            "image {h}×{w} is not divisible by downsample factor {factor}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let n = (factor * factor) as f64;
    Image::from_fn(c, ho, wo, |ch, y, x| {
        let base = img.get(ch, y * factor, x * factor);
        let mut dev = 0.0;
        for by in 0..factor {
            for bx in 0..factor {
                dev += img.get(ch, y * factor + by, x * factor + bx) - base;
            }
        }
        base + dev / n
    })
}

/// Half-pixel-centered bilinear resize to `h×w`, edge-clamped.
pub fn bilinear_resize(img: &Image, h: usize, w: usize) -> Result<Image> {
    let (c, hs, ws) = img.dims();
    let coord = |dst: usize, src_n: usize, dst_n: usize| {
        let s = ((dst as f64 + 0.5) * src_n as f64 / dst_n as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src_n - 1);
        let i1 = (i0 + 1).min(src_n - 1);
        (i0, i1, s - i0 as f64)
    };
    Image::from_fn(c, h, w, |ch, y, x| {
        let (y0, y1, wy) = coord(y, hs, h);
        let (x0, x1, wx) = coord(x, ws, w);
        let (a, b) = (img.get(ch, y0, x0), img.get(ch, y0, x1));
        let (p, q) = (img.get(ch, y1, x0), img.get(ch, y1, x1));
        let top = a + wx * (b - a);
        let bottom = p + wx * (q - p);
        top + wy * (bottom - top)
    })
}

/// Super-resolution degradation: pool by `factor`, then resize back.
pub fn downsample_up(img: &Image, factor: usize) -> Result<Image> {
    if factor == 1 {
        return Ok(img.clone());
    }
    let small = box_downsample(img, factor)?;
    Ok(bilinear_resize(&small, img.height(), img.width())?.clamped())
}

/// Adds i.i.d. `N(0, (sigma255/255)²)` noise and clamps to `[0, 1]`.
pub fn add_noise(img: &Image, sigma255: f64, seed: u64) -> Result<Image> {
    noise_with(img, sigma255, SeedStream::new(seed).split("noise"))
}

fn noise_with(img: &Image, sigma255: f64, stream: SeedStream) -> Result<Image> {
    Step::Noise(sigma255).validate()?;
    if sigma255 == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma255 / 255.0).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = stream.rng();
    let mut out = img.clone();
    out.pixels_mut()
        .iter_mut()
        .for_each(|p| *p += normal.sample(&mut rng));
    Ok(out.clamped())
}

/// Applies every step in order; noise draws come from `seed` and the step
/// index.
pub fn apply(spec: &DegradationSpec, img: &Image, seed: u64) -> Result<Image> {
    let stream = SeedStream::new(seed).split("degrade");
    let mut cur = img.clone();
    for (i, step) in spec.steps().iter().enumerate() {
        let res = match *step {
            Step::Blur(s) => blur(&cur, s),
            Step::Downsample(f) => downsample_up(&cur, f),
            Step::Noise(s) => noise_with(&cur, s, stream.index(i as u64)),
        };
        cur = res.map_err(|e| Error::param(format!("degradation step {i} ({step}): {e}")))?;
    }
    Ok(cur)
}
