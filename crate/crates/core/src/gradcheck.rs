//! Central finite-difference validation of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::dataset::synth_dataset;
use crate::degrade::blur;
use crate::diffusion::{forward_diffuse, make_schedule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::lora::{attach, reg_loss, LoraAdapter, LoraConfig};
use crate::net::{is_zero_init, CondVars, Model, NetConfig, NetParams, Trainable};
use crate::prompt::PromptId;
use crate::tensor::Tensor;

/// Relative error used by every check: `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), false);
    let out = f(&mut g, v)?;
    if g.value(out).len() != 1 {
        return Err(Error::contract(format!(
            "finite-difference target must be scalar, got {:?}",
            g.shape(out)
        )));
    }
    Ok(g.value(out).item())
}

/// Analytic gradient of `f` at `x` from one backward pass.
pub fn analytic_grad<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = f(&mut g, v)?;
    if !g.requires_grad(out) {
        // f ignores its input entirely
        return Ok(Tensor::zeros(x.shape()));
    }
    g.backward(out)?;
    Ok(g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Maximum relative error between the analytic gradient of `f` and central
/// differences with step `eps`, over every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, eps, &coords)
}

/// As [`finite_diff_check`], restricted to the listed flat coordinates.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::param(format!("finite-difference step must be > 0, got {eps}")));
    }
    let first = eval(&f, x)?;
    let second = eval(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {first} vs {second} at the same input"
        )));
    }
    let analytic = analytic_grad(&f, x)?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Pass bound for [`suite`].
pub const SUITE_TOLERANCE: f64 = 1e-4;

const STEP: f64 = 1e-5;
/// Coordinates probed per parameter tensor in the network checks.
const PROBES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < SUITE_TOLERANCE
    }

    pub fn worst(&self) -> Option<&CheckResult> {
        self.checks.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

type Case = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn op_cases(seed: u64) -> Vec<(&'static str, Tensor, Case)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
    let m = Tensor::randn(&[4, 3], 1.0, &mut r);
    let k = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
    let b = Tensor::randn(&[3], 1.0, &mut r);
    let w = Tensor::randn(&[8, 2, 2], 1.0, &mut r);
    let t = Tensor::randn(&[5, 4, 4], 1.0, &mut r);
    let (k1, k2, b1) = (k.clone(), k.clone(), b.clone());
    vec![
        ("add", x.clone(), Box::new(|g: &mut Graph, x| { let y = g.add(x, x)?; let y = g.mul(y, x)?; Ok(g.sum(y)) })),
        ("sub+mul", x.clone(), Box::new(|g: &mut Graph, x| { let s = g.tanh(x); let d = g.sub(x, s)?; let p = g.mul(d, x)?; Ok(g.sum(p)) })),
        ("scale+add_scalar+mean", x.clone(), Box::new(|g: &mut Graph, x| { let y = g.scale(x, -1.5); let y = g.add_scalar(y, 0.3); let y = g.mul(y, y)?; Ok(g.mean(y)) })),
        ("silu", x.clone(), Box::new(|g: &mut Graph, x| { let y = g.silu(x); Ok(g.frobenius_norm_sq(y)) })),
        ("tanh", x.clone(), Box::new(|g: &mut Graph, x| { let y = g.tanh(x); Ok(g.frobenius_norm_sq(y)) })),
        ("sigmoid", x.clone(), Box::new(|g: &mut Graph, x| { let y = g.sigmoid(x); let y = g.mul(y, x)?; Ok(g.sum(y)) })),
        ("relu", x.clone(), Box::new(|g: &mut Graph, x| { let y = g.relu(x); Ok(g.frobenius_norm_sq(y)) })),
        ("reshape+matmul+transpose", x.clone(), Box::new(move |g: &mut Graph, x| {
            let x2 = g.reshape(x, &[8, 4])?;
            let mm = g.constant(m.clone());
            let y = g.matmul(x2, mm)?;
            let yt = g.transpose(y)?;
            let z = g.matmul(yt, x2)?;
            Ok(g.frobenius_norm_sq(z))
        })),
        ("conv2d input", x.clone(), Box::new(move |g: &mut Graph, x| {
            let kk = g.constant(k1.clone());
            let y = g.conv2d(x, kk, 1)?;
            let y = g.silu(y);
            Ok(g.frobenius_norm_sq(y))
        })),
        ("conv2d kernel", k.clone(), {
            let xv = x.clone();
            Box::new(move |g: &mut Graph, k| {
                let xx = g.constant(xv.clone());
                let y = g.conv2d(xx, k, 0)?;
                let y = g.tanh(y);
                Ok(g.sum(y))
            })
        }),
        ("channel bias", b.clone(), {
            let xv = x.clone();
            Box::new(move |g: &mut Graph, b| {
                let xx = g.constant(xv.clone());
                let kk = g.constant(k2.clone());
                let y = g.conv2d(xx, kk, 1)?;
                let y = g.add_channel_bias(y, b)?;
                let y = g.sigmoid(y);
                Ok(g.sum(y))
            })
        }),
        ("pool+upsample+concat+mse", x.clone(), Box::new(move |g: &mut Graph, x| {
            let kk = g.constant(k.clone());
            let bb = g.constant(b1.clone());
            let y = g.conv2d(x, kk, 1)?;
            let y = g.add_channel_bias(y, bb)?;
            let p = g.avg_pool(y, 2)?;
            let u = g.upsample(p, 2)?;
            let c = g.concat_channels(&[u, x])?;
            let tt = g.constant(t.clone());
            g.mse(c, tt)
        })),
        ("space_to_depth+depth_to_space", x, Box::new(move |g: &mut Graph, x| {
            let d = g.space_to_depth(x, 2)?;
            let ww = g.constant(w.clone());
            let y = g.mul(d, ww)?;
            let y = g.tanh(y);
            let u = g.depth_to_space(y, 2)?;
            Ok(g.frobenius_norm_sq(u))
        })),
    ]
}

/// Diffusion loss of the whole network plus the reconstruction term, on
/// 16×16 images (8×8 latents). `z_t` may be supplied as a variable.
fn network_loss(g: &mut Graph, m: &Model, clean: &Image, lq: &Image, zt: Option<Var>, seed: u64) -> Result<Var> {
    let sched = make_schedule(10, 1e-3, 0.2)?;
    let x = g.constant(clean.to_tensor());
    let z0 = m.encode_var(g, x)?;
    let y = g.constant(lq.to_tensor());
    let z_enc = m.encode_var(g, y)?;
    let pemb = m.prompt_var(g, &[PromptId::Disk, PromptId::HighQuality])?;
    let z_lq = m.control_var(g, z_enc, pemb)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let latent = Tensor::randn(g.shape(z0), 1.0, &mut r);
    let eps = Tensor::randn(g.shape(z0), 1.0, &mut r);
    let zt = match zt {
        Some(v) => v,
        None => g.constant(forward_diffuse(&latent, 6, &eps, &sched)?),
    };
    let cond = CondVars { z_lq, pemb };
    let pred = m.denoise_var(g, zt, sched.timesteps[6], &cond)?;
    let target = g.constant(eps);
    let l = g.mse(pred, target)?;
    let rec = m.decode_var(g, z0)?;
    let r = g.mse(rec, x)?;
    let r = g.scale(r, 0.1);
    g.add(l, r)
}

fn probes(len: usize) -> Vec<usize> {
    (0..len).step_by((len / PROBES).max(1)).collect()
}

/// Every primitive op, every parameter of the composed denoiser loss, the
/// noisy latent input, and the adapter factors under the diffusion loss and
/// the Frobenius regularizer, each against central differences.
pub fn suite(seed: u64) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for (name, x, f) in op_cases(seed) {
        checks.push(CheckResult {
            name: format!("op {name}"),
            max_rel_err: finite_diff_check(f, &x, STEP)?,
        });
    }

    let mut p = NetParams::init(NetConfig::tiny(), seed)?;
    // zero-initialized tensors are lifted so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let names: Vec<String> = p.names().map(String::from).collect();
    for n in &names {
        if is_zero_init(n) {
            let shape = p.get(n)?.shape().to_vec();
            p.set(n, Tensor::randn(&shape, 0.2, &mut rng))?;
        }
    }
    let clean = synth_dataset(seed, 2, 16)?[1].clean.clone();
    let lq = blur(&clean, 1.0)?;
    for name in &names {
        let x = p.get(name)?.clone();
        let err = finite_diff_check_at(
            |g, v| {
                g.bind_param(name, v)?;
                let m = Model::new(&p, &[], Trainable::Nothing);
                network_loss(g, &m, &clean, &lq, None, seed)
            },
            &x,
            STEP,
            &probes(x.len()),
        )?;
        checks.push(CheckResult {
            name: format!("param {name}"),
            max_rel_err: err,
        });
    }
    let latent_shape = [p.config().latent_channels, 8, 8];
    let zt = Tensor::randn(&latent_shape, 1.0, &mut rng);
    let err = finite_diff_check(
        |g, v| {
            let m = Model::new(&p, &[], Trainable::Nothing);
            network_loss(g, &m, &clean, &lq, Some(v), seed)
        },
        &zt,
        STEP,
    )?;
    checks.push(CheckResult {
        name: "latent z_t".into(),
        max_rel_err: err,
    });

    let cfg = LoraConfig {
        rank: 2,
        ..LoraConfig::default()
    };
    let mut adapters = attach(&p, &cfg, seed)?;
    for a in adapters.iter_mut() {
        a.b = Tensor::randn(a.b.shape(), 0.3, &mut rng);
    }
    for (i, ad) in adapters.iter().enumerate() {
        let (an, bn) = ad.var_names();
        for (vn, x) in [(&an, &ad.a), (&bn, &ad.b)] {
            let err = finite_diff_check_at(
                |g, v| {
                    g.bind_param(vn, v)?;
                    let m = Model::new(&p, &adapters, Trainable::Nothing);
                    let l = network_loss(g, &m, &clean, &lq, None, seed)?;
                    let r = reg_loss(g, std::slice::from_ref::<LoraAdapter>(&adapters[i]), 0.05)?;
                    g.add(l, r)
                },
                x,
                STEP,
                &probes(x.len()),
            )?;
            checks.push(CheckResult {
                name: format!("adapter {vn}"),
                max_rel_err: err,
            });
        }
    }
    Ok(SuiteReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn sum_is_exact() {
        let x = rand(&[5], 1).map(|v| v * 0.5);
        let err = finite_diff_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn mse_matches_closed_form() {
        let x = rand(&[3, 4], 2);
        let target = rand(&[3, 4], 3);
        // analytic route agrees with 2(x − t)/n
        let grad = analytic_grad(
            &|g: &mut Graph, x: Var| {
                let t = g.constant(target.clone());
                g.mse(x, t)
            },
            &x,
        )
        .unwrap();
        let expected = x.zip_map(&target, |a, b| 2.0 * (a - b) / 12.0).unwrap();
        assert!(grad.max_abs_diff(&expected) < 1e-15);
        let err = finite_diff_check(
            |g, x| {
                let t = g.constant(target.clone());
                g.mse(x, t)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn each_op_passes() {
        let eps = 1e-5;
        let x = rand(&[2, 3, 4], 4);
        let m = rand(&[4, 3], 5);
        type F = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;
        let m2 = m.clone();
        let cases: Vec<(&str, F)> = vec![
            ("add", Box::new(|g, x| { let y = g.add(x, x)?; Ok(g.sum(y)) })),
            ("sub+mul", Box::new(|g, x| { let s = g.silu(x); let d = g.sub(x, s)?; let p = g.mul(d, x)?; Ok(g.sum(p)) })),
            ("scale+scalar", Box::new(|g, x| { let y = g.scale(x, -1.5); let y = g.add_scalar(y, 0.3); let y = g.mul(y, y)?; Ok(g.mean(y)) })),
            ("tanh", Box::new(|g, x| { let y = g.tanh(x); Ok(g.frobenius_norm_sq(y)) })),
            ("sigmoid", Box::new(|g, x| { let y = g.sigmoid(x); let y = g.mul(y, x)?; Ok(g.sum(y)) })),
            ("relu", Box::new(|g, x| { let y = g.relu(x); Ok(g.frobenius_norm_sq(y)) })),
            ("reshape+matmul+transpose", Box::new(move |g, x| {
                let x2 = g.reshape(x, &[6, 4])?;
                let mm = g.constant(m2.clone());
                let y = g.matmul(x2, mm)?;
                let yt = g.transpose(y)?;
                let z = g.matmul(yt, x2)?;
                Ok(g.frobenius_norm_sq(z))
            })),
        ];
        for (name, f) in cases {
            let err = finite_diff_check(f, &x, eps).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn conv_pipeline_gradients() {
        let x = rand(&[2, 4, 4], 8);
        let k = rand(&[3, 2, 3, 3], 9);
        let b = rand(&[3], 10);
        let f = |g: &mut Graph, x: Var| {
            let kk = g.constant(k.clone());
            let bb = g.constant(b.clone());
            let y = g.conv2d(x, kk, 1)?;
            let y = g.add_channel_bias(y, bb)?;
            let y = g.silu(y);
            let p = g.avg_pool(y, 2)?;
            let u = g.upsample(p, 2)?;
            let c = g.concat_channels(&[u, x])?;
            let t = g.constant(Tensor::full(&[5, 4, 4], 0.1));
            g.mse(c, t)
        };
        assert!(finite_diff_check(f, &x, 1e-5).unwrap() < 1e-6);
        // kernel and bias as the differentiated input
        let xv = x.clone();
        let fk = |g: &mut Graph, k: Var| {
            let xx = g.constant(xv.clone());
            let y = g.conv2d(xx, k, 1)?;
            let y = g.tanh(y);
            Ok(g.frobenius_norm_sq(y))
        };
        assert!(finite_diff_check(fk, &k, 1e-5).unwrap() < 1e-6);
        let fb = |g: &mut Graph, b: Var| {
            let xx = g.constant(x.clone());
            let kk = g.constant(k.clone());
            let y = g.conv2d(xx, kk, 0)?;
            let y = g.add_channel_bias(y, b)?;
            let y = g.sigmoid(y);
            Ok(g.sum(y))
        };
        assert!(finite_diff_check(fb, &b, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn nondeterministic_function_is_reported() {
        let calls = Cell::new(0u32);
        let f = |g: &mut Graph, x: Var| {
            calls.set(calls.get() + 1);
            let s = g.sum(x);
            Ok(g.add_scalar(s, calls.get() as f64))
        };
        let err = finite_diff_check(f, &Tensor::ones(&[2]), 1e-5).unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }

    #[test]
    fn full_suite_passes() {
        let r = suite(7).unwrap();
        assert!(r.checks.len() > 40);
        assert!(r.passed(), "{:?}", r.worst());
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff_check(|g, x| Ok(g.sum(x)), &Tensor::ones(&[1]), 0.0).is_err());
    }
}
