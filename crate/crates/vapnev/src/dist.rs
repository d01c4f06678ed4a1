//! Diagonal Gaussians: exact log-density, closed-form KL to the standard
//! normal, and reparametrized sampling. All three are differentiable
//! through the tape; densities are in nats.

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::Var;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Mean and log-variance of a diagonal Gaussian, element-shaped alike.
/// Parametrizing the variance by its log keeps it positive with no clamping
/// at sampling time.
pub struct GaussianParams<E: Scalar> {
    pub mu: Var<E>,
    pub log_var: Var<E>,
}

impl<E: Scalar> GaussianParams<E> {
    pub fn new(mu: Var<E>, log_var: Var<E>) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(Error::shape(format!(
                "mu shape {:?} != log_var shape {:?}",
                mu.shape(),
                log_var.shape()
            )));
        }
        Ok(GaussianParams { mu, log_var })
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }
}

/// Exact per-sample log-density of `y` under the diagonal Gaussian:
/// -1/2 sum(log_var + (y-mu)^2/exp(log_var) + log 2pi). Returns shape [N].
pub fn diag_gaussian_log_prob<E: Scalar>(
    y: &Var<E>,
    p: &GaussianParams<E>,
) -> Result<Var<E>> {
    if y.shape() != p.shape() {
        return Err(Error::shape(format!(
            "value shape {:?} != parameter shape {:?}",
            y.shape(),
            p.shape()
        )));
    }
    let diff = y.sub(&p.mu)?;
    let inv_var = p.log_var.neg().exp()?;
    let quad = diff.square().mul(&inv_var)?;
    let per_elem = p.log_var.add(&quad)?.add_scalar(LN_2PI).mul_scalar(-0.5);
    per_elem.sum_per_sample()
}

/// KL(N(mu, sigma^2) || N(0, I)) per sample:
/// 1/2 sum(mu^2 + sigma^2 - 1 - log sigma^2). Returns shape [N].
pub fn kl_to_standard_normal<E: Scalar>(q: &GaussianParams<E>) -> Result<Var<E>> {
    let var = q.log_var.exp()?;
    let term = q
        .mu
        .square()
        .add(&var)?
        .add_scalar(-1.0)
        .sub(&q.log_var)?
        .mul_scalar(0.5);
    term.sum_per_sample()
}

/// mu + sigma * eps with eps ~ N(0, I). Gradients flow to mu and log_var
/// only; the noise enters as a constant leaf.
pub fn reparam_sample<E: Scalar>(p: &GaussianParams<E>, rng: &mut SeedRng) -> Result<Var<E>> {
    let eps = p.mu.tape().constant(rng.normal_tensor(p.shape()));
    let sigma = p.log_var.mul_scalar(0.5).exp()?;
    p.mu.add(&sigma.mul(&eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn params(tape: &Tape<f64>, mu: &[f64], log_var: &[f64]) -> GaussianParams<f64> {
        let n = mu.len();
        GaussianParams::new(
            tape.leaf(Tensor::from_f64s(&[1, n], mu).unwrap(), true),
            tape.leaf(Tensor::from_f64s(&[1, n], log_var).unwrap(), true),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_origin() {
        let tape = Tape::new();
        let p = params(&tape, &[0.0], &[0.0]);
        let y = tape.constant(Tensor::from_f64s(&[1, 1], &[0.0]).unwrap());
        let lp = diag_gaussian_log_prob(&y, &p).unwrap();
        assert!((lp.value().data()[0] + 0.9189385332046727).abs() < 1e-12);
    }

    #[test]
    fn density_maximal_at_mean() {
        let tape = Tape::new();
        let p = params(&tape, &[0.7, -1.2], &[0.3, -0.5]);
        let at_mean = tape.constant(Tensor::from_f64s(&[1, 2], &[0.7, -1.2]).unwrap());
        let lp0 = diag_gaussian_log_prob(&at_mean, &p).unwrap().value().data()[0];
        for delta in [0.05, -0.1, 0.4] {
            let y = tape.constant(Tensor::from_f64s(&[1, 2], &[0.7 + delta, -1.2]).unwrap());
            let lp = diag_gaussian_log_prob(&y, &p).unwrap().value().data()[0];
            assert!(lp < lp0);
        }
    }

    #[test]
    fn log_prob_matches_independent_formula() {
        // separate evaluation path: per-component scalar arithmetic
        let mut rng = SeedRng::from_seed(17);
        let tape = Tape::new();
        let d = 5;
        let mu: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.normal() * 0.5).collect();
        let yv: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let p = params(&tape, &mu, &lv);
        let y = tape.constant(Tensor::from_f64s(&[1, d], &yv).unwrap());
        let got = diag_gaussian_log_prob(&y, &p).unwrap().value().data()[0];
        let mut want = 0.0;
        for i in 0..d {
            let var = lv[i].exp();
            want += -0.5 * (var.ln() + (yv[i] - mu[i]).powi(2) / var + LN_2PI);
        }
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let tape = Tape::new();
        let p = params(&tape, &[0.0, 0.0], &[0.0, 0.0]);
        let y = tape.constant(Tensor::<f64>::zeros(&[1, 3]));
        assert!(diag_gaussian_log_prob(&y, &p).is_err());
        let mu = tape.constant(Tensor::<f64>::zeros(&[1, 2]));
        let lv = tape.constant(Tensor::<f64>::zeros(&[1, 3]));
        assert!(GaussianParams::new(mu, lv).is_err());
    }

    #[test]
    fn kl_zero_for_standard_normal() {
        let tape = Tape::new();
        let p = params(&tape, &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]);
        let kl = kl_to_standard_normal(&p).unwrap();
        assert!(kl.value().data()[0].abs() < 1e-12);
    }

    #[test]
    fn kl_unit_mean_shift() {
        let tape = Tape::new();
        let p = params(&tape, &[1.0], &[0.0]);
        let kl = kl_to_standard_normal(&p).unwrap();
        assert!((kl.value().data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_on_random_params() {
        let mut rng = SeedRng::from_seed(23);
        for _ in 0..50 {
            let tape = Tape::new();
            let d = 1 + rng.below(6);
            let mu: Vec<f64> = (0..d).map(|_| 2.0 * rng.normal()).collect();
            let lv: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let p = params(&tape, &mu, &lv);
            let kl = kl_to_standard_normal(&p).unwrap();
            assert!(kl.value().data()[0] >= 0.0);
        }
    }

    #[test]
    fn reparam_collapses_to_mean_at_tiny_variance() {
        let mut rng = SeedRng::from_seed(31);
        let tape = Tape::new();
        let p = params(&tape, &[2.5, -1.0], &[-60.0, -60.0]);
        let z = reparam_sample(&p, &mut rng).unwrap();
        assert!((z.value().data()[0] - 2.5).abs() < 1e-10);
        assert!((z.value().data()[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn reparam_sample_mean_matches_mu() {
        let mut rng = SeedRng::from_seed(37);
        let n = 100_000;
        let tape = Tape::new();
        let p = params(&tape, &[0.3], &[0.2]);
        let mut acc = 0.0;
        for _ in 0..n {
            acc += reparam_sample(&p, &mut rng).unwrap().value().data()[0];
        }
        let mean = acc / n as f64;
        let sigma = (0.2f64.exp()).sqrt();
        let tol = 3.0 * sigma / (n as f64).sqrt();
        assert!((mean - 0.3).abs() < tol, "{mean} vs 0.3 +- {tol}");
    }

    #[test]
    fn reparam_reproducible_under_fixed_seed() {
        let draw = || {
            let mut rng = SeedRng::from_seed(5);
            let tape = Tape::new();
            let p = params(&tape, &[0.0, 1.0], &[0.5, -0.5]);
            reparam_sample(&p, &mut rng).unwrap().value().data().to_vec()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn reparam_gradient_reaches_mu_and_log_var_not_eps() {
        let mut rng = SeedRng::from_seed(41);
        let tape = Tape::new();
        let p = params(&tape, &[0.2, 0.4], &[0.1, -0.3]);
        let z = reparam_sample(&p, &mut rng).unwrap();
        let loss = z.sum_all();
        let grads = tape.backward(&loss).unwrap();
        // d z / d mu = 1 exactly
        assert_eq!(grads.of(&p.mu).data(), &[1.0, 1.0]);
        // log_var gradient nonzero almost surely
        assert!(grads.of(&p.log_var).data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn gaussian_log_prob_integrates_to_one_in_1d() {
        // grid quadrature over a wide interval
        let tape = Tape::new();
        let p = params(&tape, &[0.35], &[-0.4]);
        let step = 1e-3;
        let mut mass = 0.0;
        let mut x = -8.0;
        while x < 8.0 {
            let y = tape.constant(Tensor::from_f64s(&[1, 1], &[x]).unwrap());
            let lp = diag_gaussian_log_prob(&y, &p).unwrap().value().data()[0];
            mass += lp.exp() * step;
            x += step;
        }
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }
}
