//! Finite-difference verification of every differentiable piece: the tensor
//! primitives, the loss terms, and the full network in each ablation variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss;
use crate::model::{Model, ModelConfig};
use crate::tensor::{
    self, check_gradient, check_gradient_refined, check_gradient_with, conv2d_backward, conv2d_forward, ConvParams,
    GradCheckReport, Stencil, Tensor,
};

mod precise;

use precise::{Objective, Probe};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Step for the loss checks, which use the fourth-order stencil: the SSIM
/// term has components near 1e-6 that a two-point difference at 1e-6 cannot
/// resolve to 1e-5 relative in double precision.
pub const LOSS_EPS: f64 = 1e-3;

/// The four configurations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoResidual,
    NoDense,
    NoSsim,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoResidual,
        Variant::NoDense,
        Variant::NoSsim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "UWCNN",
            Variant::NoResidual => "woRL",
            Variant::NoDense => "woDC",
            Variant::NoSsim => "woSSIM",
        }
    }

    pub fn model_config(self, seed: u64) -> ModelConfig {
        ModelConfig {
            residual_learning: self != Variant::NoResidual,
            dense_concat: self != Variant::NoDense,
            seed,
            ..ModelConfig::default()
        }
    }

    pub fn include_ssim(self) -> bool {
        self != Variant::NoSsim
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One named check and its outcome.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.report.max_rel_error < tolerance
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed(self.tolerance))
    }

    /// One line per check: `name  PASS|FAIL  max_rel_error  checked  skipped`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{}\t{}\t{:.3e}\t{}\t{}\t{}\n",
                c.name,
                if c.passed(self.tolerance) {
                    "PASS"
                } else {
                    "FAIL"
                },
                c.report.max_rel_error,
                c.report.checked,
                c.report.skipped,
                c.report.refined,
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    /// Check at most this many weights per layer (biases are always all
    /// checked); `None` checks every parameter.
    pub weights_per_layer: Option<usize>,
    /// Deliberately perturb the analytic model gradients, to prove the
    /// harness can fail.
    pub corrupt_backward: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            height: 8,
            width: 8,
            seed: 0,
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            weights_per_layer: None,
            corrupt_backward: false,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(lo..hi))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Scalar probe applied to the network output during a model check.
fn model_objective(
    variant: Variant,
    out: &Tensor,
    target: &Tensor,
    proj: &Tensor,
) -> Result<(f64, Tensor)> {
    let big = out.height() >= loss::SSIM_WINDOW && out.width() >= loss::SSIM_WINDOW;
    match variant {
        Variant::NoSsim => {
            let r = loss::objective(out, target, false)?;
            Ok((r.total, r.grad))
        }
        Variant::Full if big => {
            let r = loss::objective(out, target, true)?;
            Ok((r.total, r.grad))
        }
        // Too small for the SSIM window: a random linear functional of the
        // output exercises every path of the backward pass.
        _ => Ok((dot(out, proj), proj.clone())),
    }
}

/// The double-double counterpart of [`model_objective`], when there is one.
fn precise_objective<'a>(
    variant: Variant,
    out: &Tensor,
    target: &'a Tensor,
    proj: &'a Tensor,
) -> Option<Objective<'a>> {
    let big = out.height() >= loss::SSIM_WINDOW && out.width() >= loss::SSIM_WINDOW;
    match variant {
        Variant::NoSsim => Some(Objective::Mse(target)),
        Variant::Full if big => None,
        _ => Some(Objective::Linear(proj)),
    }
}

fn parameter_indices(model: &Model, per_layer: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut indices = Vec::new();
    let mut offset = 0;
    for layer in model.layers() {
        let nk = layer.kernel().len();
        match per_layer {
            Some(n) if n < nk => {
                let mut picked: Vec<usize> =
                    rand::seq::index::sample(rng, nk, n).into_iter().collect();
                picked.sort_unstable();
                indices.extend(picked.into_iter().map(|i| offset + i));
            }
            _ => indices.extend(offset..offset + nk),
        }
        indices.extend(offset + nk..offset + nk + layer.bias().len());
        offset += layer.parameter_count();
    }
    indices
}

/// Checks parameter and input gradients of one network variant.
pub fn check_model(variant: Variant, options: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let (h, w) = (options.height, options.width);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let model = Model::build(variant.model_config(options.seed))?;
    let input = uniform(&mut rng, h, w, 3, 0.0, 1.0);
    let target = uniform(&mut rng, h, w, 3, 0.0, 1.0);
    let proj = uniform(&mut rng, h, w, 3, -1.0, 1.0);

    let base = model.forward(&input)?;
    let pattern = base.cache.relu_pattern();
    let (_, grad_out) = model_objective(variant, &base.enhanced, &target, &proj)?;
    let (grads, grad_input) = model.backward(&base.cache, &grad_out)?;
    let mut analytic = grads.flatten();
    let mut analytic_input = grad_input.into_vec();
    if options.corrupt_backward {
        corrupt(&mut analytic);
        corrupt(&mut analytic_input);
    }

    // A probe is comparable only if no ReLU changed state.
    let evaluate = |m: &Model, x: &Tensor| -> Result<Option<f64>> {
        let out = m.forward(x)?;
        if out.cache.relu_pattern() != pattern {
            return Ok(None);
        }
        Ok(Some(
            model_objective(variant, &out.enhanced, &target, &proj)?.0,
        ))
    };

    let indices = parameter_indices(&model, options.weights_per_layer, &mut rng);
    let mut probe_model = model.clone();
    let params = model.flat_parameters();
    let weight_fn = |v: &[f64]| {
        probe_model.set_flat_parameters(v)?;
        evaluate(&probe_model, &input)
    };
    let input_fn = |v: &[f64]| evaluate(&model, &input.with_data(v.to_vec()));
    // Components within a decade of the tolerance get the double-double
    // difference, so reported errors are not dominated by f64 round-off.
    let (weights, inputs) = match precise_objective(variant, &base.enhanced, &target, &proj) {
        Some(objective) => {
            let refine = |probe| {
                precise::central_difference(&model, &input, objective, &pattern, probe, options.eps)
            };
            (
                check_gradient_refined(
                    weight_fn,
                    |i| refine(Probe::Parameter(i)),
                    &params,
                    &analytic,
                    options.eps,
                    Some(&indices),
                    options.tolerance / 10.0,
                )?,
                check_gradient_refined(
                    input_fn,
                    |i| refine(Probe::Input(i)),
                    input.data(),
                    &analytic_input,
                    options.eps,
                    None,
                    options.tolerance / 10.0,
                )?,
            )
        }
        None => (
            check_gradient(weight_fn, &params, &analytic, options.eps, Some(&indices))?,
            check_gradient(input_fn, input.data(), &analytic_input, options.eps, None)?,
        ),
    };
    Ok(vec![
        CheckResult {
            name: format!("model/{variant}/weights"),
            report: weights,
        },
        CheckResult {
            name: format!("model/{variant}/input"),
            report: inputs,
        },
    ])
}

fn corrupt(values: &mut [f64]) {
    for v in values.iter_mut().step_by(7) {
        *v *= 1.05;
    }
}

/// Checks for conv, ReLU, concatenation, addition and the loss terms.
pub fn check_primitives(options: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let (h, w) = (options.height, options.width);
    let eps = options.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5eed);
    let mut out = Vec::new();

    // Convolution: input, kernel and bias gradients of <r, conv(x)>.
    let (cin, cout) = (3, 4);
    let x = uniform(&mut rng, h, w, cin, -1.0, 1.0);
    let kernel: Vec<f64> = (0..9 * cin * cout)
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect();
    let params = ConvParams::new(cin, cout, kernel.clone(), bias.clone())?;
    let r = uniform(&mut rng, h, w, cout, -1.0, 1.0);
    let g = conv2d_backward(&r, &x, &params)?;
    let conv_at = |x: &Tensor, k: &[f64], b: &[f64]| -> Result<Option<f64>> {
        let p = ConvParams::new(cin, cout, k.to_vec(), b.to_vec())?;
        Ok(Some(dot(&conv2d_forward(x, &p)?, &r)))
    };
    out.push(CheckResult {
        name: "conv/input".into(),
        report: check_gradient(
            |v| conv_at(&x.with_data(v.to_vec()), &kernel, &bias),
            x.data(),
            g.input.data(),
            eps,
            None,
        )?,
    });
    out.push(CheckResult {
        name: "conv/kernel".into(),
        report: check_gradient(|v| conv_at(&x, v, &bias), &kernel, &g.kernel, eps, None)?,
    });
    out.push(CheckResult {
        name: "conv/bias".into(),
        report: check_gradient(|v| conv_at(&x, &kernel, v), &bias, &g.bias, eps, None)?,
    });

    // ReLU away from the kink.
    let x = Tensor::from_fn(h, w, 2, |_, _, _| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let r = uniform(&mut rng, h, w, 2, -1.0, 1.0);
    let gx = tensor::relu_backward(&r, &x)?;
    out.push(CheckResult {
        name: "relu".into(),
        report: check_gradient(
            |v| {
                Ok(Some(dot(
                    &tensor::relu_forward(&x.with_data(v.to_vec())),
                    &r,
                )))
            },
            x.data(),
            gx.data(),
            eps,
            None,
        )?,
    });

    // Concatenation of two parts, checked through the first part.
    let a = uniform(&mut rng, h, w, 2, -1.0, 1.0);
    let b = uniform(&mut rng, h, w, 3, -1.0, 1.0);
    let r = uniform(&mut rng, h, w, 5, -1.0, 1.0);
    let parts = tensor::concat_backward(&r, &[2, 3])?;
    let joint: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
    let analytic: Vec<f64> = parts[0]
        .data()
        .iter()
        .chain(parts[1].data())
        .copied()
        .collect();
    let split = a.len();
    out.push(CheckResult {
        name: "concat".into(),
        report: check_gradient(
            |v| {
                let pa = a.with_data(v[..split].to_vec());
                let pb = b.with_data(v[split..].to_vec());
                Ok(Some(dot(&tensor::concat_channels(&[&pa, &pb])?, &r)))
            },
            &joint,
            &analytic,
            eps,
            None,
        )?,
    });

    // Residual addition: the cotangent reaches both addends unchanged.
    let a = uniform(&mut rng, h, w, 3, -1.0, 1.0);
    let b = uniform(&mut rng, h, w, 3, -1.0, 1.0);
    let r = uniform(&mut rng, h, w, 3, -1.0, 1.0);
    out.push(CheckResult {
        name: "add".into(),
        report: check_gradient(
            |v| Ok(Some(dot(&tensor::add(&a.with_data(v.to_vec()), &b)?, &r))),
            a.data(),
            r.data(),
            eps,
            None,
        )?,
    });

    // Loss terms, on an image large enough for the SSIM window.
    let (lh, lw) = (h.max(loss::SSIM_WINDOW + 1), w.max(loss::SSIM_WINDOW + 1));
    let p = uniform(&mut rng, lh, lw, 3, 0.0, 1.0);
    let t = uniform(&mut rng, lh, lw, 3, 0.0, 1.0);
    type LossFn = fn(&Tensor, &Tensor) -> Result<(f64, Tensor)>;
    let terms: [(&str, LossFn); 3] = [
        ("loss/mse", loss::mse_loss),
        ("loss/ssim", loss::ssim_loss),
        ("loss/total", |p, t| {
            let r = loss::total_loss(p, t)?;
            Ok((r.total, r.grad))
        }),
    ];
    for (name, f) in terms {
        let (_, g) = f(&p, &t)?;
        out.push(CheckResult {
            name: name.into(),
            report: check_gradient_with(
                |v| Ok(Some(f(&p.with_data(v.to_vec()), &t)?.0)),
                p.data(),
                g.data(),
                LOSS_EPS,
                None,
                Stencil::FivePoint,
            )?,
        });
    }
    Ok(out)
}

/// Primitives plus all four network variants.
pub fn run_suite(options: &SuiteOptions) -> Result<SuiteReport> {
    if options.height == 0 || options.width == 0 {
        return Err(Error::Config(
            "gradient check needs a non-empty image".into(),
        ));
    }
    let mut checks = check_primitives(options)?;
    for v in Variant::ALL {
        checks.extend(check_model(v, options)?);
    }
    Ok(SuiteReport {
        checks,
        tolerance: options.tolerance,
    })
}
