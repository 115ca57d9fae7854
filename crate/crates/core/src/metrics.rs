//! Full-reference quality metrics and the per-image evaluation report.

use std::fmt::Write as _;

use serde::Serialize;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::image::Image;
use crate::net::{Model, NetParams};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_dims(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dim(format!(
            "{what}: image dims {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b, "mse")?;
    let n = a.pixels().len() as f64;
    Ok(a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak 1.0; identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

fn window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ 1.5), averaged over
/// valid window positions and then over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b, "ssim")?;
    let (c, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::param(format!(
            "ssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let k = window();
    let hw = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x = &a.pixels()[ch * hw..(ch + 1) * hw];
        let y = &b.pixels()[ch * hw..(ch + 1) * hw];
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let mxx = filter_valid(&prod(x, x), h, w, &k);
        let myy = filter_valid(&prod(y, y), h, w, &k);
        let mxy = filter_valid(&prod(x, y), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + C1) * (2.0 * cxy + C2))
                / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Encoder activations of an image, each spatial position's channel vector
/// scaled to unit length.
fn features(img: &Image, model: &Model) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let x = g.constant(img.to_tensor());
    model.check_image(g.shape(x))?;
    let s = g.space_to_depth(x, crate::net::DOWNSCALE)?;
    let w1 = model.weight(&mut g, "enc.conv1.w")?;
    let b1 = model.weight(&mut g, "enc.conv1.b")?;
    let h = g.conv2d(s, w1, 1)?;
    let h = g.add_channel_bias(h, b1)?;
    let h = g.silu(h);
    let z = model.encode_var(&mut g, x)?;
    Ok([h, z].iter().map(|&v| unit_channels(g.value(v))).collect())
}

fn unit_channels(t: &Tensor) -> Tensor {
    let (c, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    let mut out = t.clone();
    for p in 0..hw {
        let norm = (0..c).map(|ch| t.data()[ch * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
        for ch in 0..c {
            out.data_mut()[ch * hw + p] /= norm;
        }
    }
    out
}

/// Mean squared distance between normalized encoder features, averaged
/// over the two encoder stages and both horizontal orientations. A
/// learned-feature stand-in for LPIPS built on this model's own encoder;
/// not comparable to LPIPS values.
pub fn perceptual_proxy(a: &Image, b: &Image, params: &NetParams) -> Result<f64> {
    same_dims(a, b, "pproxy")?;
    let m = Model::frozen(params);
    // the pair and its mirror image, so the value ignores horizontal flips
    let mut total = 0.0;
    for (a, b) in [(a.clone(), b.clone()), (a.flip_horizontal(), b.flip_horizontal())] {
        let (fa, fb) = (features(&a, &m)?, features(&b, &m)?);
        for (x, y) in fa.iter().zip(&fb) {
            total += x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
                / (x.len() * fa.len()) as f64;
        }
    }
    Ok(total / 2.0)
}

#[derive(Clone, Debug)]
pub struct EvalPair {
    pub id: String,
    pub spec: String,
    pub clean: Image,
    pub restored: Image,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub id: String,
    pub spec: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub pproxy: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
}

pub const REPORT_HEADER: &str = "id,spec,psnr_db,ssim,pproxy,wall_ms";

fn fmt_num(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    /// Arithmetic means of the per-row values (dB averaged as dB).
    pub fn from_rows(rows: Vec<MetricRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::param("metric report needs at least one row"));
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let mean = MetricRow {
            id: "MEAN".into(),
            spec: String::new(),
            psnr_db: avg(|r| r.psnr_db),
            ssim: avg(|r| r.ssim),
            pproxy: avg(|r| r.pproxy),
            wall_ms: avg(|r| r.wall_ms),
        };
        Ok(MetricReport { rows, mean })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.id,
                r.spec,
                fmt_num(r.psnr_db),
                fmt_num(r.ssim),
                fmt_num(r.pproxy),
                format_args!("{:.3}", r.wall_ms)
            );
        }
        s
    }
}

pub fn evaluate(pairs: &[EvalPair], params: &NetParams, par: Parallelism) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::param("nothing to evaluate"));
    }
    let rows = par.try_map(pairs.len(), |i| {
        let p = &pairs[i];
        Ok::<_, Error>(MetricRow {
            id: p.id.clone(),
            spec: p.spec.clone(),
            psnr_db: psnr(&p.clean, &p.restored)?,
            ssim: ssim(&p.clean, &p.restored)?,
            pproxy: perceptual_proxy(&p.clean, &p.restored, params)?,
            wall_ms: p.wall_ms,
        })
    })?;
    MetricReport::from_rows(rows)
}
