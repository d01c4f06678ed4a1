//! Double-precision verification suites: finite-difference Jacobians against
//! the flow's log-determinant, round-trip invertibility, gradient checks for
//! every tensor op and for the end-to-end objective, density normalization
//! by grid quadrature, the closed-form KL against Monte Carlo, and the
//! conv/deconv adjoint identity.
//!
//! Everything here recomputes expected values through routes that do not
//! share code with the paths being checked (finite differences, LU
//! elimination, quadrature, direct simulation).

use std::time::Instant;

use crate::data::{dequantize, logit_transform, synthetic_image_corpus};
use crate::dist::{kl_to_standard_normal, GaussianParams};
use crate::error::Result;
use crate::flow::{randomize_params, FlowConfig, FlowStack};
use crate::model::{ModelConfig, VapnevModel};
use crate::net::{Binder, Parameterized};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Reduced case counts, for a sub-minute smoke pass.
    pub quick: bool,
    /// Test hook: name of a suite to corrupt on purpose.
    pub sabotage: Option<String>,
}

pub fn run_all(opts: &VerifyOptions) -> Vec<CheckResult> {
    vec![
        check_op_gradients(opts),
        check_conv_adjoint(opts),
        check_invertibility(opts),
        check_logdet_oracle(opts),
        check_normalization(opts),
        check_elbo_gradient(opts),
        check_kl_closed_form(opts),
    ]
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f();
    CheckResult { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

// ── numeric helpers ──────────────────────────────────────────────────

/// log |det A| by LU elimination with partial pivoting. A is row-major n*n.
pub fn lu_log_abs_det(a: &[f64], n: usize) -> f64 {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut log_det = 0.0;
    for col in 0..n {
        let mut pivot = col;
        let mut best = m[col * n + col].abs();
        for row in col + 1..n {
            let v = m[row * n + col].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best == 0.0 {
            return f64::NEG_INFINITY;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
        }
        let diag = m[col * n + col];
        log_det += diag.abs().ln();
        for row in col + 1..n {
            let factor = m[row * n + col] / diag;
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
        }
    }
    log_det
}

/// Dense Jacobian of `f` at `x` by central differences, column-major over
/// inputs: J[i][j] = d f_i / d x_j. Output length inferred from one call.
pub fn fd_jacobian(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let out_dim = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; out_dim];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let orig = xp[j];
        xp[j] = orig + h;
        let up = f(&xp);
        xp[j] = orig - h;
        let dn = f(&xp);
        xp[j] = orig;
        for i in 0..out_dim {
            jac[i][j] = (up[i] - dn[i]) / (2.0 * h);
        }
    }
    jac
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// ── suite: per-op gradient checks ────────────────────────────────────

struct OpCase {
    name: &'static str,
    input_shapes: Vec<Vec<usize>>,
    positive_inputs: bool,
    /// Margin around non-differentiable points; coordinates inside are
    /// skipped by the finite-difference comparison.
    kink: Option<fn(f64) -> bool>,
    run: Box<dyn Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>>,
}

/// Deterministic per-element weights so the loss exercises every output.
fn weighted_sum(out: &Var<f64>) -> Result<Var<f64>> {
    let n = out.numel();
    let w: Vec<f64> = (0..n).map(|i| (0.7 * i as f64 + 0.3).cos()).collect();
    let wt = out.tape().constant(Tensor::new(out.shape(), w)?);
    Ok(out.mul(&wt)?.sum_all())
}

fn op_cases() -> Vec<OpCase> {
    use crate::conv::Padding;
    let mut cases: Vec<OpCase> = Vec::new();
    let mut push = |name: &'static str,
                    shapes: Vec<Vec<usize>>,
                    run: Box<dyn Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>>| {
        cases.push(OpCase { name, input_shapes: shapes, positive_inputs: false, kink: None, run });
    };

    push("add", vec![vec![2, 3], vec![2, 3]], Box::new(|_, v| weighted_sum(&v[0].add(&v[1])?)));
    push("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|_, v| weighted_sum(&v[0].sub(&v[1])?)));
    push("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|_, v| weighted_sum(&v[0].mul(&v[1])?)));
    push(
        "mul-broadcast-channel",
        vec![vec![2, 2, 2, 3], vec![3]],
        Box::new(|_, v| weighted_sum(&v[0].mul(&v[1])?)),
    );
    push(
        "add-broadcast-scalar-shape",
        vec![vec![2, 3], vec![1]],
        Box::new(|_, v| weighted_sum(&v[0].add(&v[1])?)),
    );
    push("neg", vec![vec![5]], Box::new(|_, v| weighted_sum(&v[0].neg())));
    push("exp", vec![vec![4]], Box::new(|_, v| weighted_sum(&v[0].exp()?)));
    push("sigmoid", vec![vec![6]], Box::new(|_, v| weighted_sum(&v[0].sigmoid())));
    push("tanh", vec![vec![6]], Box::new(|_, v| weighted_sum(&v[0].tanh())));
    push("mul_scalar", vec![vec![4]], Box::new(|_, v| weighted_sum(&v[0].mul_scalar(-1.7))));
    push("add_scalar", vec![vec![4]], Box::new(|_, v| weighted_sum(&v[0].add_scalar(0.9))));
    push("square", vec![vec![5]], Box::new(|_, v| weighted_sum(&v[0].square())));
    push(
        "matmul",
        vec![vec![3, 4], vec![4, 2]],
        Box::new(|_, v| weighted_sum(&v[0].matmul(&v[1])?)),
    );
    push(
        "conv2d-same",
        vec![vec![1, 4, 4, 2], vec![3, 3, 2, 2]],
        Box::new(|_, v| weighted_sum(&v[0].conv2d(&v[1], 1, Padding::Same)?)),
    );
    push(
        "conv2d-valid-stride2",
        vec![vec![1, 5, 5, 1], vec![2, 2, 1, 3]],
        Box::new(|_, v| weighted_sum(&v[0].conv2d(&v[1], 2, Padding::Valid)?)),
    );
    push(
        "deconv2d-stride2",
        vec![vec![1, 2, 3, 2], vec![2, 2, 3, 2]],
        Box::new(|_, v| weighted_sum(&v[0].deconv2d(&v[1], 2)?)),
    );
    push("sum_all", vec![vec![2, 3]], Box::new(|_, v| Ok(v[0].sum_all())));
    push("mean_all", vec![vec![2, 3]], Box::new(|_, v| Ok(v[0].mean_all())));
    push(
        "sum_per_sample",
        vec![vec![3, 2, 2]],
        Box::new(|_, v| weighted_sum(&v[0].sum_per_sample()?)),
    );
    push(
        "reshape",
        vec![vec![2, 6]],
        Box::new(|_, v| weighted_sum(&v[0].reshape(&[3, 4])?)),
    );
    push(
        "squeeze2x2",
        vec![vec![1, 4, 4, 2]],
        Box::new(|_, v| weighted_sum(&v[0].squeeze2x2()?)),
    );
    push(
        "unsqueeze2x2",
        vec![vec![1, 2, 2, 8]],
        Box::new(|_, v| weighted_sum(&v[0].unsqueeze2x2()?)),
    );
    push(
        "crop2d",
        vec![vec![1, 4, 5, 2]],
        Box::new(|_, v| weighted_sum(&v[0].crop2d(1, 2, 2, 3)?)),
    );

    cases.push(OpCase {
        name: "ln",
        input_shapes: vec![vec![4]],
        positive_inputs: true,
        kink: None,
        run: Box::new(|_, v| weighted_sum(&v[0].ln()?)),
    });
    cases.push(OpCase {
        name: "leaky_relu",
        input_shapes: vec![vec![8]],
        positive_inputs: false,
        kink: Some(|x| x.abs() < 1e-3),
        run: Box::new(|_, v| weighted_sum(&v[0].leaky_relu(0.01))),
    });
    cases.push(OpCase {
        name: "clamp",
        input_shapes: vec![vec![8]],
        positive_inputs: false,
        kink: Some(|x| (x.abs() - 0.75).abs() < 1e-3),
        run: Box::new(|_, v| weighted_sum(&v[0].clamp(-0.75, 0.75))),
    });
    cases
}

pub fn check_op_gradients(opts: &VerifyOptions) -> CheckResult {
    let instances = if opts.quick { 3 } else { 20 };
    timed("gradient-ops", || {
        let mut rng = SeedRng::from_seed(0x9e3779b9);
        let mut worst: f64 = 0.0;
        let mut worst_op = "";
        for case in op_cases() {
            for _ in 0..instances {
                let inputs: Vec<Tensor<f64>> = case
                    .input_shapes
                    .iter()
                    .map(|s| {
                        let t = rng.normal_tensor::<f64>(s);
                        if case.positive_inputs {
                            t.map(|v| (0.5 * v).exp() + 0.1)
                        } else {
                            t
                        }
                    })
                    .collect();

                let eval = |xs: &[Tensor<f64>]| -> f64 {
                    let tape = Tape::new();
                    let vars: Vec<Var<f64>> =
                        xs.iter().map(|t| tape.constant(t.clone())).collect();
                    (case.run)(&tape, &vars).expect("op evaluates").item_f64().unwrap()
                };

                // analytic gradients
                let tape = Tape::new();
                let vars: Vec<Var<f64>> =
                    inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
                let loss = (case.run)(&tape, &vars).expect("op evaluates");
                let grads = tape.backward(&loss).expect("backward");

                // central differences per coordinate
                let h = 1e-5;
                for (k, input) in inputs.iter().enumerate() {
                    let analytic = grads.of(&vars[k]);
                    let mut perturbed = inputs.clone();
                    for j in 0..input.numel() {
                        let xj = input.data()[j];
                        if let Some(kink) = case.kink {
                            if kink(xj) {
                                continue;
                            }
                        }
                        perturbed[k].data_mut()[j] = xj + h;
                        let up = eval(&perturbed);
                        perturbed[k].data_mut()[j] = xj - h;
                        let dn = eval(&perturbed);
                        perturbed[k].data_mut()[j] = xj;
                        let fd = (up - dn) / (2.0 * h);
                        let err = rel_err(fd, analytic.data()[j]);
                        if err > worst {
                            worst = err;
                            worst_op = case.name;
                        }
                    }
                }
            }
        }
        let passed = worst < 1e-4;
        (passed, format!("worst rel err {worst:.2e} ({worst_op}), threshold 1e-4"))
    })
}

// ── suite: conv/deconv adjoint ───────────────────────────────────────

pub fn check_conv_adjoint(opts: &VerifyOptions) -> CheckResult {
    use crate::conv::{conv_forward, conv_grad_input, ConvGeom, Padding};
    let cases = if opts.quick { 4 } else { 20 };
    timed("conv-adjoint", || {
        let mut rng = SeedRng::from_seed(77);
        let mut worst: f64 = 0.0;
        for i in 0..cases {
            let stride = 1 + i % 2;
            let pad = if i % 3 == 0 { Padding::Valid } else { Padding::Same };
            let ishape = [1 + i % 2, 4 + i % 3, 4 + (i / 2) % 3, 1 + i % 3];
            let kshape = [2 + i % 2, 2 + i % 2, ishape[3], 1 + (i + 1) % 3];
            let Ok(g) = ConvGeom::resolve(&ishape, &kshape, stride, pad) else { continue };
            let x = rng.normal_tensor::<f64>(&ishape).into_data();
            let k = rng.normal_tensor::<f64>(&kshape).into_data();
            let y = rng.normal_tensor::<f64>(&g.out_shape()).into_data();
            let lhs: f64 = conv_forward(&x, &k, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = conv_grad_input(&y, &k, &g).iter().zip(&x).map(|(a, b)| a * b).sum();
            worst = worst.max((lhs - rhs).abs());
        }
        (worst < 1e-10, format!("worst |<conv x,y> - <x,deconv y>| = {worst:.2e}, threshold 1e-10"))
    })
}

// ── suite: invertibility ─────────────────────────────────────────────

fn desk_flow<E: Scalar>(seed: u64) -> (FlowStack<E>, SeedRng) {
    let cfg = ModelConfig::desk();
    let mut rng = SeedRng::from_seed(seed);
    let mut stack = FlowStack::<E>::init(&cfg.flow, cfg.input, cfg.z_dim, &mut rng).unwrap();
    randomize_params(&mut stack, 0.5, &mut rng);
    (stack, rng)
}

fn roundtrip_err<E: Scalar>(stack: &FlowStack<E>, rng: &mut SeedRng) -> f64 {
    let (h, w, c) = stack.in_shape();
    let tape = Tape::new();
    let x = tape.constant(rng.normal_tensor::<E>(&[2, h, w, c]));
    let z = tape.constant(rng.normal_tensor::<E>(&[2, 64]));
    let mut b = Binder::new(&tape, false);
    let (y, _) = stack.forward(&mut b, "flow", &x, Some(&z)).unwrap();
    let back = stack.inverse(&mut b, "flow", &y, Some(&z)).unwrap();
    x.value()
        .data()
        .iter()
        .zip(back.value().data())
        .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
        .fold(0.0, f64::max)
}

pub fn check_invertibility(opts: &VerifyOptions) -> CheckResult {
    let stacks = if opts.quick { 10 } else { 100 };
    timed("invertibility", || {
        let mut worst32: f64 = 0.0;
        let mut worst64: f64 = 0.0;
        for i in 0..stacks {
            let (s32, mut rng32) = desk_flow::<f32>(1000 + i);
            worst32 = worst32.max(roundtrip_err(&s32, &mut rng32));
            let (s64, mut rng64) = desk_flow::<f64>(1000 + i);
            worst64 = worst64.max(roundtrip_err(&s64, &mut rng64));
        }
        let passed = worst32 < 1e-4 && worst64 < 1e-9;
        (
            passed,
            format!(
                "{stacks} stacks: worst single {worst32:.2e} (<1e-4), worst double {worst64:.2e} (<1e-9)"
            ),
        )
    })
}

// ── suite: log-det against a dense finite-difference Jacobian ────────

/// Apply a flow to a flattened D-vector for Jacobian probing; z held fixed.
fn flow_as_fn(
    stack: &FlowStack<f64>,
    shape: &[usize],
    z: Option<&Tensor<f64>>,
) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    let shape = shape.to_vec();
    let z = z.cloned();
    move |x: &[f64]| {
        let tape = Tape::new();
        let xv = tape.constant(Tensor::new(&shape, x.to_vec()).unwrap());
        let zv = z.as_ref().map(|t| tape.constant(t.clone()));
        let mut b = Binder::new(&tape, false);
        let (y, _) = stack.forward(&mut b, "flow", &xv, zv.as_ref()).unwrap();
        y.value().data().to_vec()
    }
}

fn stack_logdet(stack: &FlowStack<f64>, shape: &[usize], x: &[f64], z: Option<&Tensor<f64>>) -> f64 {
    let tape = Tape::new();
    let xv = tape.constant(Tensor::new(shape, x.to_vec()).unwrap());
    let zv = z.map(|t| tape.constant(t.clone()));
    let mut b = Binder::new(&tape, false);
    let (_, ld) = stack.forward(&mut b, "flow", &xv, zv.as_ref()).unwrap();
    ld.value().data()[0].to_f64()
}

pub fn check_logdet_oracle(opts: &VerifyOptions) -> CheckResult {
    let per_d = if opts.quick { 4 } else { 20 };
    let sabotage = opts.sabotage.as_deref() == Some("logdet-oracle");
    timed("logdet-oracle", || {
        let mut rng = SeedRng::from_seed(4242);
        let mut worst: f64 = 0.0;
        let mut cases = 0usize;
        for &d in &[2usize, 4, 8, 16] {
            for case in 0..per_d {
                // alternate between flat checkerboard chains and, for larger
                // D, a squeeze stack with channelwise couplings
                let use_squeeze = d >= 4 && case % 2 == 1;
                let (shape, cfg) = if use_squeeze {
                    (
                        vec![1usize, 2, d / 2, 1],
                        FlowConfig {
                            scales: 1,
                            checkerboard_per_scale: 1,
                            channelwise_per_scale: 1,
                            filters: 4,
                            conditional: true,
                        },
                    )
                } else {
                    (
                        vec![1usize, 1, d, 1],
                        FlowConfig {
                            scales: 0,
                            checkerboard_per_scale: 2 + case % 2,
                            channelwise_per_scale: 0,
                            filters: 4,
                            conditional: true,
                        },
                    )
                };
                let z_dim = 4;
                let mut stack = FlowStack::<f64>::init(
                    &cfg,
                    (shape[1], shape[2], shape[3]),
                    z_dim,
                    &mut rng,
                )
                .unwrap();
                randomize_params(&mut stack, 0.5, &mut rng);
                let x = rng.normal_tensor::<f64>(&shape).into_data();
                let z = rng.normal_tensor::<f64>(&[1, z_dim]);

                let f = flow_as_fn(&stack, &shape, Some(&z));
                let jac = fd_jacobian(&f, &x, 1e-5);
                let flat: Vec<f64> = jac.iter().flat_map(|row| row.iter().copied()).collect();
                let oracle = lu_log_abs_det(&flat, d);
                let mut got = stack_logdet(&stack, &shape, &x, Some(&z));
                if sabotage {
                    got += 0.5;
                }
                worst = worst.max(rel_err(got, oracle).max((got - oracle).abs().min(1.0) * 0.0));
                let err = if oracle.abs() > 1e-7 {
                    (got - oracle).abs() / oracle.abs().max(got.abs())
                } else {
                    (got - oracle).abs()
                };
                worst = worst.max(err);
                cases += 1;
            }
        }
        let passed = worst < 1e-5;
        (passed, format!("{cases} cases over D in {{2,4,8,16}}: worst rel err {worst:.2e}, threshold 1e-5"))
    })
}

// ── suite: density normalization on the 2-d toy flow ─────────────────

pub fn check_normalization(opts: &VerifyOptions) -> CheckResult {
    let step = if opts.quick { 0.08 } else { 0.04 };
    timed("normalization", || {
        let mut rng = SeedRng::from_seed(31337);
        let cfg = ModelConfig::toy2d();
        let mut model = VapnevModel::<f64>::init(cfg, &mut rng).unwrap();
        randomize_params(&mut model, 0.3, &mut rng);

        let lo = -8.0;
        let hi = 8.0;
        let n_axis = ((hi - lo) / step).round() as usize;
        let mut mass = 0.0;
        let chunk = 4096;
        let mut pts: Vec<f64> = Vec::with_capacity(chunk * 2);
        let mut flush = |pts: &mut Vec<f64>, mass: &mut f64| {
            if pts.is_empty() {
                return;
            }
            let n = pts.len() / 2;
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(&[n, 1, 2, 1], std::mem::take(pts)).unwrap());
            let mut scratch = SeedRng::from_seed(0);
            let out = model.elbo(&tape, &x, None, &mut scratch, 1.0, false).unwrap();
            for lp in out.breakdown.elbo {
                *mass += lp.exp() * step * step;
            }
        };
        for i in 0..n_axis {
            for j in 0..n_axis {
                pts.push(lo + (i as f64 + 0.5) * step);
                pts.push(lo + (j as f64 + 0.5) * step);
                if pts.len() / 2 == chunk {
                    flush(&mut pts, &mut mass);
                }
            }
        }
        flush(&mut pts, &mut mass);
        let passed = (mass - 1.0).abs() < 0.02;
        (passed, format!("grid mass over [-8,8]^2 = {mass:.5}, want 1.00 +- 0.02"))
    })
}

// ── suite: end-to-end ELBO gradient ──────────────────────────────────

pub fn check_elbo_gradient(opts: &VerifyOptions) -> CheckResult {
    timed("gradient-elbo", || {
        let mut rng = SeedRng::from_seed(2024);
        let cfg = ModelConfig::toy4x4();
        let mut model = VapnevModel::<f64>::init(cfg, &mut rng).unwrap();
        randomize_params(&mut model, 0.2, &mut rng);

        // fixed batch in logit space
        let corpus = synthetic_image_corpus::<f64>(2, 4, 4, 1, &mut rng);
        let unit = dequantize(&corpus, &mut rng).unwrap();
        let (logit, corr) = logit_transform(&unit, 0.05).unwrap();
        let x = logit.pixels;

        // flatten parameters in visit order
        let mut layout: Vec<(String, usize)> = Vec::new();
        let mut base: Vec<f64> = Vec::new();
        model.visit("", &mut |name, t| {
            layout.push((name.to_string(), t.numel()));
            base.extend(t.data().iter().copied());
        });

        let noise_seed = 7u64;
        let eval = |model: &VapnevModel<f64>| -> f64 {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let mut noise = SeedRng::from_seed(noise_seed);
            model
                .elbo(&tape, &xv, Some(&corr), &mut noise, 1.0, false)
                .unwrap()
                .loss
                .item_f64()
                .unwrap()
        };
        let write_params = |model: &mut VapnevModel<f64>, flat: &[f64]| {
            let mut off = 0usize;
            model.visit_mut("", &mut |_, t| {
                let n = t.numel();
                for (dst, src) in t.data_mut().iter_mut().zip(&flat[off..off + n]) {
                    *dst = *src;
                }
                off += n;
            });
        };

        // analytic gradient at the base point
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut noise = SeedRng::from_seed(noise_seed);
        let out = model.elbo(&tape, &xv, Some(&corr), &mut noise, 1.0, true).unwrap();
        let grads = tape.backward(&out.loss).unwrap();
        let mut by_name = std::collections::BTreeMap::new();
        for (name, var) in &out.bound {
            by_name.insert(name.clone(), grads.of(var));
        }
        let mut analytic: Vec<f64> = Vec::with_capacity(base.len());
        for (name, numel) in &layout {
            let g = &by_name[name];
            assert_eq!(g.numel(), *numel);
            analytic.extend(g.data().iter().copied());
        }

        // central differences; quick mode probes a stride per group
        let h = 1e-5;
        let stride = if opts.quick { 37 } else { 1 };
        let mut flat = base.clone();
        let mut worst: f64 = 0.0;
        let mut worst_name = String::new();
        let mut checked = 0usize;
        let mut off = 0usize;
        for (name, numel) in &layout {
            let mut j = 0usize;
            while j < *numel {
                let idx = off + j;
                let orig = flat[idx];
                flat[idx] = orig + h;
                write_params(&mut model, &flat);
                let up = eval(&model);
                flat[idx] = orig - h;
                write_params(&mut model, &flat);
                let dn = eval(&model);
                flat[idx] = orig;
                let fd = (up - dn) / (2.0 * h);
                let err = rel_err(fd, analytic[idx]);
                if err > worst {
                    worst = err;
                    worst_name = name.clone();
                }
                checked += 1;
                j += stride;
            }
            off += numel;
        }
        write_params(&mut model, &base);
        let passed = worst < 1e-3;
        (
            passed,
            format!(
                "{checked} of {} parameters checked across {} groups: worst rel err {worst:.2e} ({worst_name}), threshold 1e-3",
                base.len(),
                layout.len()
            ),
        )
    })
}

// ── suite: closed-form KL vs Monte Carlo ─────────────────────────────

pub fn check_kl_closed_form(opts: &VerifyOptions) -> CheckResult {
    let draws = if opts.quick { 10 } else { 50 };
    let samples = 20_000usize;
    timed("kl-closed-form", || {
        let mut rng = SeedRng::from_seed(99991);
        let mut worst_sigma: f64 = 0.0;
        for _ in 0..draws {
            let d = 1 + rng.below(6);
            let mu: Vec<f64> = (0..d).map(|_| 1.5 * rng.normal()).collect();
            let lv: Vec<f64> = (0..d).map(|_| 0.7 * rng.normal()).collect();

            let tape = Tape::new();
            let p = GaussianParams::new(
                tape.constant(Tensor::from_f64s(&[1, d], &mu).unwrap()),
                tape.constant(Tensor::from_f64s(&[1, d], &lv).unwrap()),
            )
            .unwrap();
            let closed = kl_to_standard_normal(&p).unwrap().value().data()[0];

            // direct simulation of E_q[log q(z) - log p(z)]
            let mut vals = Vec::with_capacity(samples);
            for _ in 0..samples {
                let mut term = 0.0;
                for i in 0..d {
                    let sigma = (0.5 * lv[i]).exp();
                    let z = mu[i] + sigma * rng.normal();
                    let log_q = -0.5 * ((z - mu[i]) / sigma).powi(2)
                        - sigma.ln()
                        - 0.5 * crate::dist::LN_2PI;
                    let log_p = -0.5 * z * z - 0.5 * crate::dist::LN_2PI;
                    term += log_q - log_p;
                }
                vals.push(term);
            }
            let mean = vals.iter().sum::<f64>() / samples as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (samples as f64 - 1.0);
            let se = (var / samples as f64).sqrt();
            let sigmas = (closed - mean).abs() / se.max(1e-12);
            worst_sigma = worst_sigma.max(sigmas);
        }
        let passed = worst_sigma < 3.0;
        (
            passed,
            format!("{draws} random parameter draws: worst deviation {worst_sigma:.2} standard errors, threshold 3"),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_det_known_matrices() {
        // det of identity is 1
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        assert!(lu_log_abs_det(&eye, 2).abs() < 1e-14);
        // [[2,1],[1,3]] -> det 5
        let m = vec![2.0, 1.0, 1.0, 3.0];
        assert!((lu_log_abs_det(&m, 2) - 5.0f64.ln()).abs() < 1e-12);
        // permutation matrix: |det| = 1
        let p = vec![0.0, 1.0, 1.0, 0.0];
        assert!(lu_log_abs_det(&p, 2).abs() < 1e-14);
        // singular
        let s = vec![1.0, 2.0, 2.0, 4.0];
        assert_eq!(lu_log_abs_det(&s, 2), f64::NEG_INFINITY);
    }

    #[test]
    fn fd_jacobian_of_linear_map_recovers_matrix() {
        let a = [1.5, -0.5, 2.0, 0.25];
        let f = |x: &[f64]| vec![a[0] * x[0] + a[1] * x[1], a[2] * x[0] + a[3] * x[1]];
        let jac = fd_jacobian(&f, &[0.3, -0.7], 1e-6);
        assert!((jac[0][0] - a[0]).abs() < 1e-8);
        assert!((jac[0][1] - a[1]).abs() < 1e-8);
        assert!((jac[1][0] - a[2]).abs() < 1e-8);
        assert!((jac[1][1] - a[3]).abs() < 1e-8);
    }

    #[test]
    fn quick_suites_pass() {
        let opts = VerifyOptions { quick: true, sabotage: None };
        for result in run_all(&opts) {
            assert!(result.passed, "{} failed: {}", result.name, result.detail);
        }
    }

    #[test]
    fn sabotage_hook_breaks_logdet_suite() {
        let opts =
            VerifyOptions { quick: true, sabotage: Some("logdet-oracle".to_string()) };
        let result = check_logdet_oracle(&opts);
        assert!(!result.passed);
        assert_eq!(result.name, "logdet-oracle");
    }
}
