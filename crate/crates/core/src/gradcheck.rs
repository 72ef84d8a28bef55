//! Central finite-difference verification of tape gradients.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::net::{build_model, forward, init_gain, ModelConfig, ParameterStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Inputs with more elements than this are checked on a random sample of
    /// `sample` coordinates.
    pub exhaustive_limit: usize,
    pub sample: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            exhaustive_limit: 256,
            sample: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub failures: Vec<CoordinateError>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Folds several reports into one, keeping the worst error.
    pub fn merge(reports: impl IntoIterator<Item = GradcheckReport>) -> Option<GradcheckReport> {
        reports.into_iter().reduce(|mut acc, r| {
            acc.max_rel_error = acc.max_rel_error.max(r.max_rel_error);
            acc.checked += r.checked;
            acc.tolerance = acc.tolerance.min(r.tolerance);
            acc.failures.extend(r.failures);
            acc
        })
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` records a scalar-valued computation of its input on the given tape.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let coords: Vec<usize> = if x.numel() <= cfg.exhaustive_limit {
        (0..x.numel()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked = index::sample(&mut rng, x.numel(), cfg.sample.min(x.numel())).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: coords.len(),
        tolerance: cfg.tolerance,
        failures: Vec::new(),
    };
    for &i in &coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += cfg.step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= cfg.step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * cfg.step);
        let a = analytic.data()[i];
        let relative = relative_error(a, numeric);
        report.max_rel_error = report.max_rel_error.max(relative);
        if relative >= cfg.tolerance || !relative.is_finite() {
            report.failures.push(CoordinateError {
                index: i,
                analytic: a,
                numeric,
                relative,
            });
        }
    }
    Ok(report)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape matches")
}

/// Moves values within `margin` of any point in `kinks` to `margin` away from it.
fn away_from(t: Tensor<f64>, kinks: &[f64], margin: f64) -> Tensor<f64> {
    t.map(|mut v| {
        for &k in kinks {
            if (v - k).abs() < margin {
                v = if v >= k { k + margin } else { k - margin };
            }
        }
        v
    })
}

/// `Σ y ⊙ w` for a fixed random `w`, turning any output into a scalar with a
/// generic gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(tape.value(y).shape(), -1.0, 1.0, seed ^ 0xabcd);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Result of one named check over several random inputs.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub trials: usize,
    pub report: GradcheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    /// Random inputs per check.
    pub trials: usize,
    pub seed: u64,
    /// Also run the end-to-end network checks.
    pub include_network: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials: 5,
            seed: 0,
            include_network: true,
        }
    }
}

type Check = Box<dyn Fn(u64, &GradcheckConfig) -> Result<GradcheckReport>>;

fn op_checks() -> Vec<(&'static str, Check)> {
    use crate::autograd::{BinaryKind, Reduction};

    fn binary(kind: BinaryKind, wrt_rhs: bool, broadcast: bool) -> Check {
        Box::new(move |seed, cfg| {
            let a = uniform(&[2, 3, 4], -1.0, 1.0, seed);
            let rhs_shape: &[usize] = if broadcast { &[1] } else { &[2, 3, 4] };
            let b = match kind {
                BinaryKind::Div => away_from(uniform(rhs_shape, -2.0, 2.0, seed + 1), &[0.0], 0.5),
                _ => uniform(rhs_shape, -1.0, 1.0, seed + 1),
            };
            let (x, other) = if wrt_rhs { (b, a) } else { (a, b) };
            gradcheck(
                |t, v| {
                    let o = t.constant(other.clone());
                    let y = if wrt_rhs {
                        t.elementwise(o, v, kind)?
                    } else {
                        t.elementwise(v, o, kind)?
                    };
                    project(t, y, seed)
                },
                &x,
                cfg,
            )
        })
    }

    fn with_scalar(kind: BinaryKind) -> Check {
        Box::new(move |seed, cfg| {
            let x = uniform(&[3, 5], -1.0, 1.0, seed);
            gradcheck(
                |t, v| {
                    let y = t.elementwise_scalar(v, 1.7, kind)?;
                    project(t, y, seed)
                },
                &x,
                cfg,
            )
        })
    }

    fn unary(
        shape: &'static [usize],
        kinks: &'static [f64],
        f: fn(&mut Tape<f64>, Var) -> Result<Var>,
    ) -> Check {
        Box::new(move |seed, cfg| {
            let x = away_from(uniform(shape, -1.5, 1.5, seed), kinks, 0.01);
            gradcheck(
                |t, v| {
                    let y = f(t, v)?;
                    project(t, y, seed)
                },
                &x,
                cfg,
            )
        })
    }

    fn conv(part: usize, pad: usize) -> Check {
        Box::new(move |seed, cfg| {
            let inputs = [
                uniform(&[2, 3, 5, 6], -1.0, 1.0, seed),
                uniform(&[4, 3, 3, 3], -1.0, 1.0, seed + 1),
                uniform(&[4], -1.0, 1.0, seed + 2),
            ];
            gradcheck(
                |t, v| {
                    let mut vars = [v; 3];
                    for (i, value) in inputs.iter().enumerate() {
                        if i != part {
                            vars[i] = t.constant(value.clone());
                        }
                    }
                    let y = t.conv2d(vars[0], vars[1], Some(vars[2]), pad)?;
                    project(t, y, seed)
                },
                &inputs[part],
                cfg,
            )
        })
    }

    fn reduce(kind: Reduction) -> Check {
        Box::new(move |seed, cfg| {
            let x = uniform(&[2, 3, 2, 4], -1.0, 1.0, seed);
            gradcheck(
                |t, v| {
                    let y = t.reduce(v, kind)?;
                    project(t, y, seed)
                },
                &x,
                cfg,
            )
        })
    }

    fn matmul(wrt_rhs: bool) -> Check {
        Box::new(move |seed, cfg| {
            let a = uniform(&[3, 4], -1.0, 1.0, seed);
            let b = uniform(&[4, 5], -1.0, 1.0, seed + 1);
            let (x, other) = if wrt_rhs { (b, a) } else { (a, b) };
            gradcheck(
                |t, v| {
                    let o = t.constant(other.clone());
                    let y = if wrt_rhs {
                        t.matmul(o, v)?
                    } else {
                        t.matmul(v, o)?
                    };
                    project(t, y, seed)
                },
                &x,
                cfg,
            )
        })
    }

    fn scale_channels(wrt_mask: bool) -> Check {
        Box::new(move |seed, cfg| {
            let x = uniform(&[2, 3, 2, 3], -1.0, 1.0, seed);
            let m = uniform(&[2, 3, 1, 1], -1.0, 1.0, seed + 1);
            let (probe, other) = if wrt_mask { (m, x) } else { (x, m) };
            gradcheck(
                |t, v| {
                    let o = t.constant(other.clone());
                    let y = if wrt_mask {
                        t.scale_channels(o, v)?
                    } else {
                        t.scale_channels(v, o)?
                    };
                    project(t, y, seed)
                },
                &probe,
                cfg,
            )
        })
    }

    vec![
        ("add", binary(BinaryKind::Add, false, false)),
        ("add/rhs-broadcast", binary(BinaryKind::Add, true, true)),
        ("sub/lhs", binary(BinaryKind::Sub, false, false)),
        ("sub/rhs", binary(BinaryKind::Sub, true, false)),
        ("mul/lhs", binary(BinaryKind::Mul, false, false)),
        ("mul/rhs-broadcast", binary(BinaryKind::Mul, true, true)),
        ("div/lhs", binary(BinaryKind::Div, false, false)),
        ("div/rhs", binary(BinaryKind::Div, true, false)),
        ("add-scalar", with_scalar(BinaryKind::Add)),
        ("mul-scalar", with_scalar(BinaryKind::Mul)),
        ("div-scalar", with_scalar(BinaryKind::Div)),
        ("relu", unary(&[4, 6], &[0.0], |t, v| t.relu(v))),
        ("sigmoid", unary(&[4, 6], &[], |t, v| t.sigmoid(v))),
        (
            "clamp",
            unary(&[4, 6], &[-0.5, 0.5], |t, v| t.clamp(v, -0.5, 0.5)),
        ),
        ("conv2d/input", conv(0, 1)),
        ("conv2d/kernel", conv(1, 1)),
        ("conv2d/bias", conv(2, 1)),
        ("conv2d/unpadded", conv(0, 0)),
        (
            "desubpixel",
            unary(&[2, 2, 4, 6], &[], |t, v| t.desubpixel(v, 2)),
        ),
        (
            "subpixel",
            unary(&[2, 8, 2, 3], &[], |t, v| t.subpixel(v, 2)),
        ),
        ("sum", reduce(Reduction::Sum)),
        ("mean", reduce(Reduction::Mean)),
        ("global_avg_pool", reduce(Reduction::GlobalAvgPool)),
        ("frobenius_sq", reduce(Reduction::FrobeniusSq)),
        ("matmul/lhs", matmul(false)),
        ("matmul/rhs", matmul(true)),
        ("transpose", unary(&[3, 5], &[], |t, v| t.transpose(v))),
        ("scale_channels/x", scale_channels(false)),
        ("scale_channels/mask", scale_channels(true)),
        (
            "patch_unroll",
            unary(&[2, 2, 4, 8], &[], |t, v| t.patch_unroll(v, 2)),
        ),
        ("select", unary(&[3, 2, 4], &[], |t, v| t.select(v, 1))),
    ]
}

fn loss_checks() -> Vec<(&'static str, Check)> {
    use crate::loss::{
        edge_aware_loss, pixel_loss, texture_matching_loss, EdgeLossNetwork, TextureLossConfig,
    };

    fn loss(f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Check {
        Box::new(move |seed, cfg| {
            let target = uniform(&[2, 3, 8, 8], 0.0, 1.0, seed);
            let restored = uniform(&[2, 3, 8, 8], 0.0, 1.0, seed + 1);
            gradcheck(
                |t, v| {
                    let b = t.constant(target.clone());
                    f(t, b, v)
                },
                &restored,
                cfg,
            )
        })
    }

    vec![
        ("loss/pixel", loss(pixel_loss)),
        (
            "loss/edge",
            loss(|t, b, v| {
                let phi = EdgeLossNetwork::new(3);
                edge_aware_loss(t, b, v, &phi)
            }),
        ),
        (
            "loss/texture",
            loss(|t, b, v| texture_matching_loss(t, b, v, &TextureLossConfig::default())),
        ),
    ]
}

/// Default network whose zero-started kernels get small fan-in-scaled random
/// values and whose biases are small and non-zero, so every path carries
/// gradient while the output stays inside the clamp.
/// The default network in `f64` with the zero-started kernels, the output kernel and all biases
/// given small random values, so every path carries gradient.
pub fn gradcheck_model(seed: u64) -> Result<(ModelConfig, ParameterStore<f64>)> {
    let cfg = ModelConfig {
        seed,
        ..ModelConfig::default()
    };
    let mut store = build_model(&cfg)?.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7477);
    for (name, t) in store.iter_mut() {
        let he = if t.rank() == 4 {
            (2.0 / t.shape()[1..].iter().product::<usize>() as f64).sqrt()
        } else {
            1.0
        };
        let scale = if name == "tail.kernel" {
            0.05 * he
        } else if init_gain(name) == 0.0 {
            0.5 * he
        } else if name.ends_with(".bias") {
            1e-2
        } else {
            continue;
        };
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = scale * rng.random_range(-1.0..1.0));
    }
    Ok((cfg, store))
}

fn network_checks() -> Vec<(&'static str, Check)> {
    fn through_network(param: Option<&'static str>) -> Check {
        Box::new(move |seed, cfg| {
            let (model, store) = gradcheck_model(seed)?;
            let image = uniform(&[1, 3, 8, 8], 0.25, 0.75, seed + 1);
            let target = uniform(&[1, 3, 8, 8], 0.0, 1.0, seed + 2);
            let probe = match param {
                Some(name) => store.get(name)?.clone(),
                None => image.clone(),
            };
            gradcheck(
                |t, v| {
                    let mut vars = store.register(t, false);
                    let input = match param {
                        Some(name) => {
                            vars.replace(name, v)?;
                            t.constant(image.clone())
                        }
                        None => v,
                    };
                    let out = forward(t, &vars, &model, input)?;
                    let b = t.constant(target.clone());
                    let d = t.sub(out.restored, b)?;
                    t.reduce(d, crate::autograd::Reduction::FrobeniusSq)
                },
                &probe,
                cfg,
            )
        })
    }

    vec![
        ("network/input", through_network(None)),
        ("network/head.kernel", through_network(Some("head.kernel"))),
        (
            "network/trunk.block0.conv1.kernel",
            through_network(Some("trunk.block0.conv1.kernel")),
        ),
        (
            "network/trunk.block7.ca.down.kernel",
            through_network(Some("trunk.block7.ca.down.kernel")),
        ),
        ("network/tail.kernel", through_network(Some("tail.kernel"))),
    ]
}

/// Tolerance for checks through the full network.
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Finite-difference step for checks through the full network; small enough
/// that a probe rarely moves a ReLU input across zero.
pub const NETWORK_STEP: f64 = 1e-4;

/// Every tape operation, every loss and, optionally, the full default network,
/// each on `cfg.trials` random inputs. Ops and losses use step `1e-3` and
/// tolerance `1e-4`; network checks use [`NETWORK_STEP`] and
/// [`NETWORK_TOLERANCE`] on sampled coordinates.
pub fn suite(cfg: &SuiteConfig) -> Result<Vec<SuiteEntry>> {
    let strict = GradcheckConfig::default();
    let network = GradcheckConfig {
        tolerance: NETWORK_TOLERANCE,
        sample: 32,
        exhaustive_limit: 0,
        step: NETWORK_STEP,
        ..GradcheckConfig::default()
    };
    let mut groups: Vec<(&'static str, Check, &GradcheckConfig)> = op_checks()
        .into_iter()
        .chain(loss_checks())
        .map(|(n, c)| (n, c, &strict))
        .collect();
    if cfg.include_network {
        groups.extend(network_checks().into_iter().map(|(n, c)| (n, c, &network)));
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(i, (name, check, gc))| {
            let reports = (0..cfg.trials)
                .map(|trial| {
                    let seed = cfg
                        .seed
                        .wrapping_mul(1_000)
                        .wrapping_add((i * 37 + trial * 1_013) as u64);
                    check(seed, &GradcheckConfig { seed, ..gc.clone() })
                })
                .collect::<Result<Vec<_>>>()?;
            let report = GradcheckReport::merge(reports).unwrap_or(GradcheckReport {
                max_rel_error: 0.0,
                checked: 0,
                tolerance: gc.tolerance,
                failures: Vec::new(),
            });
            Ok(SuiteEntry {
                name: name.to_string(),
                trials: cfg.trials,
                report,
            })
        })
        .collect()
}
