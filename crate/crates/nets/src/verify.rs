//! Self-verification: finite-difference checks of every differentiable
//! operation and loss, formation round trips and metric oracles.

use intrinsic_autodiff::{gradcheck, BnState, Graph, Mode, OpKind, Shape, Tensor, Var};
use intrinsic_core::metrics::{dssim, lmse, scaled_mse, WindowSpec};
use intrinsic_core::rng::{derive_seed, stream};
use intrinsic_core::synth::{render_index, Formation, SceneParams};
use intrinsic_core::{compose_diffuse, derive_shading, Image, DEFAULT_SHADING_EPSILON};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::LossWeights;
use crate::losses::{loss_cl, loss_fl, loss_frm, loss_imf, loss_s1, FullModelTerms};
use crate::Result;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ROUND_TRIP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random instances per check.
    pub trials: usize,
    /// Scales the backward pass of one operation (negative control).
    pub inject_fault: Option<OpKind>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            trials: 20,
            inject_fault: None,
        }
    }
}

/// Outcome of one check over all its trials; `seed` and `max_error` belong
/// to the worst trial.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub op: String,
    pub trials: usize,
    pub seed: u64,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {:<24} op={:<10} trials={:<4} worst_seed={:<20} max_err={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.op,
            self.trials,
            self.seed,
            self.max_error,
            self.tolerance
        )
    }
}

type Case = Box<dyn Fn(&mut ChaCha8Rng, Option<OpKind>) -> Result<f64>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn mse_head(g: &mut Graph<f64>, y: Var, target: &Tensor<f64>) -> intrinsic_autodiff::Result<Var> {
    let t = g.input(target.clone());
    g.mse_loss(y, t)
}

fn check(inputs: &[Tensor<f64>], fault: Option<OpKind>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let report = gradcheck(inputs, fault, |g, v| {
        f(g, v).map_err(|e| match e {
            crate::Error::Engine(e) => e,
            other => intrinsic_autodiff::Error::Usage(other.to_string()),
        })
    })?;
    Ok(report.max_rel_error)
}

fn conv_case(stride: usize) -> Case {
    Box::new(move |rng, fault| {
        let (n, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
        let x = rand_tensor(rng, Shape::new(n, cin, h, w), -1.0, 1.0);
        let k = rand_tensor(rng, Shape::new(cout, cin, 3, 3), -1.0, 1.0);
        let b = rand_tensor(rng, Shape::new(1, cout, 1, 1), -1.0, 1.0);
        let target = rand_tensor(rng, Shape::new(n, cout, h.div_ceil(stride), w.div_ceil(stride)), -1.0, 1.0);
        check(&[x, k, b], fault, |g, v| {
            let y = g.conv3x3(v[0], v[1], Some(v[2]), stride)?;
            Ok(mse_head(g, y, &target)?)
        })
    })
}

fn deconv_case() -> Case {
    Box::new(|rng, fault| {
        let (n, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
        let x = rand_tensor(rng, Shape::new(n, cin, h, w), -1.0, 1.0);
        let k = rand_tensor(rng, Shape::new(cin, cout, 4, 4), -1.0, 1.0);
        let b = rand_tensor(rng, Shape::new(1, cout, 1, 1), -1.0, 1.0);
        let target = rand_tensor(rng, Shape::new(n, cout, 2 * h, 2 * w), -1.0, 1.0);
        check(&[x, k, b], fault, |g, v| {
            let y = g.deconv4x4_s2(v[0], v[1], Some(v[2]))?;
            Ok(mse_head(g, y, &target)?)
        })
    })
}

fn batchnorm_case(mode: Mode) -> Case {
    Box::new(move |rng, fault| {
        let c = rng.random_range(1..4);
        let shape = Shape::new(rng.random_range(2..4), c, 3, 3);
        let x = rand_tensor(rng, shape, -1.0, 1.0);
        let gamma = rand_tensor(rng, Shape::new(1, c, 1, 1), 0.5, 2.0);
        let beta = rand_tensor(rng, Shape::new(1, c, 1, 1), -1.0, 1.0);
        let target = rand_tensor(rng, shape, -1.0, 1.0);
        let mut stats = BnState::<f64>::new(c);
        stats.running_mean = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        stats.running_var = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        check(&[x, gamma, beta], fault, |g, v| {
            let mut st = stats.clone();
            let y = g.batchnorm(v[0], v[1], v[2], &mut st, mode)?;
            Ok(mse_head(g, y, &target)?)
        })
    })
}

fn relu_case() -> Case {
    Box::new(|rng, fault| {
        let shape = Shape::new(2, 3, 4, 4);
        let x = Tensor::from_fn(shape, |_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random() {
                m
            } else {
                -m
            }
        });
        let target = rand_tensor(rng, shape, -1.0, 1.0);
        check(&[x], fault, |g, v| {
            let y = g.relu(v[0]);
            Ok(mse_head(g, y, &target)?)
        })
    })
}

fn concat_case() -> Case {
    Box::new(|rng, fault| {
        let (ca, cb) = (rng.random_range(1..4), rng.random_range(1..4));
        let a = rand_tensor(rng, Shape::new(2, ca, 3, 4), -1.0, 1.0);
        let b = rand_tensor(rng, Shape::new(2, cb, 3, 4), -1.0, 1.0);
        let target = rand_tensor(rng, Shape::new(2, ca + cb, 3, 4), -1.0, 1.0);
        check(&[a, b], fault, |g, v| {
            let y = g.concat_c(v)?;
            Ok(mse_head(g, y, &target)?)
        })
    })
}

fn slice_case() -> Case {
    Box::new(|rng, fault| {
        let c = rng.random_range(2..6);
        let start = rng.random_range(0..c - 1);
        let count = rng.random_range(1..=c - start);
        let x = rand_tensor(rng, Shape::new(2, c, 3, 3), -1.0, 1.0);
        let target = rand_tensor(rng, Shape::new(2, count, 3, 3), -1.0, 1.0);
        check(&[x], fault, |g, v| {
            let y = g.slice_c(v[0], start, count)?;
            Ok(mse_head(g, y, &target)?)
        })
    })
}

fn mul_case() -> Case {
    Box::new(|rng, fault| {
        let full = Shape::new(2, 3, 3, 4);
        let a = rand_tensor(rng, full, -1.0, 1.0);
        let b = rand_tensor(rng, full, -1.0, 1.0);
        let e = rand_tensor(rng, Shape::new(2, 3, 1, 1), -1.0, 1.0);
        let target = rand_tensor(rng, full, -1.0, 1.0);
        check(&[a, b, e], fault, |g, v| {
            let ab = g.mul_elem(v[0], v[1])?;
            let y = g.mul_elem(ab, v[2])?;
            Ok(mse_head(g, y, &target)?)
        })
    })
}

fn add_case() -> Case {
    Box::new(|rng, fault| {
        let full = Shape::new(2, 3, 3, 4);
        let a = rand_tensor(rng, full, -1.0, 1.0);
        let b = rand_tensor(rng, Shape::new(1, 3, 1, 1), -1.0, 1.0);
        let target = rand_tensor(rng, full, -1.0, 1.0);
        check(&[a, b], fault, |g, v| {
            let y = g.add(v[0], v[1])?;
            Ok(mse_head(g, y, &target)?)
        })
    })
}

fn scale_case() -> Case {
    Box::new(|rng, fault| {
        let shape = Shape::new(2, 3, 3, 4);
        let a = rand_tensor(rng, shape, -1.0, 1.0);
        let target = rand_tensor(rng, shape, -1.0, 1.0);
        let s: f64 = rng.random_range(-2.0..2.0);
        check(&[a], fault, |g, v| {
            let y = g.scale(v[0], s);
            Ok(mse_head(g, y, &target)?)
        })
    })
}

fn mse_case() -> Case {
    Box::new(|rng, fault| {
        let shape = Shape::new(rng.random_range(1..3), 3, 4, 4);
        let p = rand_tensor(rng, shape, -1.0, 1.0);
        let t = rand_tensor(rng, shape, -1.0, 1.0);
        check(&[p, t], fault, |g, v| Ok(g.mse_loss(v[0], v[1])?))
    })
}

fn weights(rng: &mut ChaCha8Rng) -> LossWeights {
    LossWeights {
        gamma_r: rng.random_range(0.1..2.0),
        gamma_s: rng.random_range(0.1..2.0),
        gamma_imf: rng.random_range(0.1..2.0),
        gamma_h: rng.random_range(0.1..2.0),
        gamma_e: rng.random_range(0.1..2.0),
    }
}

const LOSS_SHAPE: Shape = Shape([1, 3, 4, 4]);

/// Predictions, targets and image with intrinsic-like positive values.
fn intrinsic_inputs(rng: &mut ChaCha8Rng, count: usize) -> Vec<Tensor<f64>> {
    (0..count).map(|_| rand_tensor(rng, LOSS_SHAPE, 0.05, 1.5)).collect()
}

fn loss_cl_case() -> Case {
    Box::new(|rng, fault| {
        let w = weights(rng);
        check(&intrinsic_inputs(rng, 4), fault, |g, v| loss_cl(g, v[0], v[1], v[2], v[3], &w))
    })
}

fn loss_imf_case() -> Case {
    Box::new(|rng, fault| {
        let w = weights(rng);
        check(&intrinsic_inputs(rng, 3), fault, |g, v| loss_imf(g, v[0], v[1], v[2], w.gamma_imf))
    })
}

fn loss_fl_case() -> Case {
    Box::new(|rng, fault| {
        let w = weights(rng);
        check(&intrinsic_inputs(rng, 5), fault, |g, v| loss_fl(g, v[0], v[1], v[2], v[3], v[4], &w))
    })
}

fn loss_frm_case(global_light: bool) -> Case {
    Box::new(move |rng, fault| {
        let w = weights(rng);
        let mut inputs = intrinsic_inputs(rng, 7);
        let e_shape = if global_light {
            Shape::new(1, 3, 1, 1)
        } else {
            LOSS_SHAPE
        };
        inputs.insert(6, rand_tensor(rng, e_shape, 0.5, 1.5));
        inputs.insert(7, rand_tensor(rng, e_shape, 0.5, 1.5));
        check(&inputs, fault, |g, v| {
            let t = FullModelTerms {
                r_hat: v[0],
                r: v[1],
                s_hat: v[2],
                s: v[3],
                h_hat: v[4],
                h: v[5],
                e_hat: v[6],
                e: v[7],
                image: v[8],
            };
            loss_frm(g, t, &w)
        })
    })
}

fn loss_s1_case() -> Case {
    Box::new(|rng, fault| {
        let w = weights(rng);
        check(&intrinsic_inputs(rng, 4), fault, |g, v| loss_s1(g, v[0], v[1], v[2], v[3], &w))
    })
}

/// Every finite-difference case: `(name, op)`; operations used by other
/// checks' scalar heads come first so the first failure names the culprit.
fn gradient_cases() -> Vec<(&'static str, &'static str, Case)> {
    vec![
        ("mse_loss", "mse_loss", mse_case()),
        ("mul_elem", "mul_elem", mul_case()),
        ("add_broadcast", "add", add_case()),
        ("scale", "scale", scale_case()),
        ("conv3x3_stride1", "conv2d", conv_case(1)),
        ("conv3x3_stride2", "conv2d", conv_case(2)),
        ("deconv4x4_s2", "deconv2d", deconv_case()),
        ("batchnorm_train", "batchnorm", batchnorm_case(Mode::Train)),
        ("batchnorm_eval", "batchnorm", batchnorm_case(Mode::Eval)),
        ("relu", "relu", relu_case()),
        ("concat", "concat_c", concat_case()),
        ("slice", "slice_c", slice_case()),
        ("loss_cl", "loss_cl", loss_cl_case()),
        ("loss_imf", "loss_imf", loss_imf_case()),
        ("loss_fl", "loss_fl", loss_fl_case()),
        ("loss_frm_pixel_light", "loss_frm", loss_frm_case(false)),
        ("loss_frm_global_light", "loss_frm", loss_frm_case(true)),
        ("loss_s1", "loss_s1", loss_s1_case()),
    ]
}

fn run_trials(
    name: &str,
    op: &str,
    tolerance: f64,
    opts: &VerifyOptions,
    mut trial: impl FnMut(u64) -> Result<f64>,
) -> Result<CheckOutcome> {
    let mut worst = CheckOutcome {
        name: name.to_string(),
        op: op.to_string(),
        trials: opts.trials,
        seed: 0,
        max_error: f64::NEG_INFINITY,
        tolerance,
        passed: true,
    };
    for t in 0..opts.trials {
        let seed = derive_seed(opts.seed, name, &[t as u64]);
        let err = trial(seed)?;
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > worst.max_error {
            worst.max_error = err;
            worst.seed = seed;
        }
    }
    worst.max_error = worst.max_error.max(0.0);
    worst.passed = worst.max_error < tolerance || (tolerance == 0.0 && worst.max_error == 0.0);
    Ok(worst)
}

/// Gradient checks for every operation and loss composition.
pub fn gradient_checks(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    gradient_cases()
        .into_iter()
        .map(|(name, op, case)| {
            run_trials(name, op, GRAD_TOLERANCE, opts, |seed| {
                case(&mut stream(seed, "verify", &[]), opts.inject_fault)
            })
        })
        .collect()
}

/// Largest recomposition error of a rendered sample, and the largest
/// `derive_shading` round-trip error on its diffuse body.
pub fn formation_errors(seed: u64, index: usize, formation: Formation, params: &SceneParams) -> Result<(f64, f64)> {
    let s = render_index(seed, index, formation, params)?;
    let recompose = s.set.compose()?.max_abs_diff(&s.image) as f64;
    let body = compose_diffuse(&s.set.reflectance, &s.set.shading)?;
    let shading = s.set.shading.broadcast_channels(body.channels())?;
    let derived = derive_shading(&body, &s.set.reflectance, DEFAULT_SHADING_EPSILON)?;
    Ok((recompose, derived.max_abs_diff(&shading) as f64))
}

/// Constructive consistency and shading round trip for each formation.
pub fn formation_checks(opts: &VerifyOptions, samples: usize) -> Result<Vec<CheckOutcome>> {
    let params = SceneParams::default();
    let per = VerifyOptions { trials: samples, ..*opts };
    let mut out = Vec::new();
    for formation in Formation::ALL {
        let mut round_trip = 0.0f64;
        let name = format!("recompose_{}", formation.name());
        let mut c = run_trials(&name, "compose", 0.0, &per, |seed| {
            let (e, d) = formation_errors(seed, 0, formation, &params)?;
            round_trip = round_trip.max(d);
            Ok(e)
        })?;
        out.push(c.clone());
        c.name = format!("derive_shading_{}", formation.name());
        c.op = "derive_shading".into();
        c.max_error = round_trip;
        c.tolerance = ROUND_TRIP_TOLERANCE;
        c.passed = round_trip <= ROUND_TRIP_TOLERANCE;
        out.push(c);
    }
    Ok(out)
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f32, hi: f32) -> Image {
    Image::from_fn(h, w, 3, |_, _, _| rng.random_range(lo..hi))
}

/// Minimum over a dense grid of scale factors, refined twice around the best
/// coarse point.
pub fn brute_force_scaled_mse(pred: &Image, gt: &Image) -> f64 {
    let err = |a: f64| {
        pred.data()
            .iter()
            .zip(gt.data())
            .map(|(&p, &g)| (a * p as f64 - g as f64).powi(2))
            .sum::<f64>()
            / pred.len() as f64
    };
    let (mut lo, mut hi, mut best) = (-4.0f64, 4.0f64, 0.0f64);
    for _ in 0..3 {
        let steps = 2000;
        let h = (hi - lo) / steps as f64;
        best = (0..=steps)
            .map(|i| lo + i as f64 * h)
            .min_by(|&a, &b| err(a).total_cmp(&err(b)))
            .expect("non-empty grid");
        lo = best - 2.0 * h;
        hi = best + 2.0 * h;
    }
    err(best)
}

/// Metric oracles: scaled MSE against brute force, LMSE normalization,
/// DSSIM identity and the LMSE window count.
pub fn metric_checks(opts: &VerifyOptions, images: usize) -> Result<Vec<CheckOutcome>> {
    let per = VerifyOptions { trials: images, ..*opts };
    let window = WindowSpec::new(20)?;
    let mut out = vec![
        run_trials("scaled_mse_brute_force", "scaled_mse", 1e-6, &per, |seed| {
            let mut rng = stream(seed, "metric", &[]);
            let (h, w) = (rng.random_range(2..9), rng.random_range(2..9));
            let gt = random_image(&mut rng, h, w, 0.0, 1.0);
            let pred = random_image(&mut rng, h, w, 0.05, 1.0);
            Ok((scaled_mse(&pred, &gt)? - brute_force_scaled_mse(&pred, &gt)).abs())
        })?,
        run_trials("lmse_zero_predictor", "lmse", 1e-9, &per, |seed| {
            let mut rng = stream(seed, "metric", &[]);
            let gt = random_image(&mut rng, 40, 40, 0.05, 1.0);
            Ok((lmse(&Image::zeros(40, 40, 3), &gt, window)? - 1.0).abs())
        })?,
        run_trials("dssim_identity", "dssim", 0.0, &per, |seed| {
            let mut rng = stream(seed, "metric", &[]);
            let x = random_image(&mut rng, 16, 16, 0.0, 2.0);
            Ok(dssim(&x, &x)?.abs())
        })?,
    ];
    let count = window.window_count(120, 160)?;
    out.push(CheckOutcome {
        name: "lmse_window_count".into(),
        op: "lmse".into(),
        trials: 1,
        seed: 0,
        max_error: (count as f64 - 165.0).abs(),
        tolerance: 0.0,
        passed: count == 165,
    });
    Ok(out)
}

/// The whole suite.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let mut out = gradient_checks(opts)?;
    out.extend(formation_checks(opts, opts.trials)?);
    out.extend(metric_checks(opts, opts.trials)?);
    Ok(out)
}
