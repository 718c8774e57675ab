//! Non-gated building blocks: divisive normalization (GDN / inverse GDN),
//! squeeze-and-excitation channel attention, and their parameter containers.
//!
//! Parameter structs store *raw* (unconstrained) values. Binding a struct
//! onto a [`Graph`] produces leaf vars for the raw values; the positivity
//! constraints (beta >= 1e-6, gamma >= 0) are enforced in-graph through a
//! softplus map so they hold at every optimizer step, not just at init.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// Floor added to the softplus-mapped beta.
pub const BETA_FLOOR: f64 = 1e-6;

/// Inverse of softplus: the raw value whose softplus equals `y` (> 0).
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Raw parameters of one (I)GDN layer over `c` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GdnParams<T> {
    /// (1, c, 1, 1); effective beta = softplus(raw) + 1e-6.
    pub raw_beta: Tensor<T>,
    /// (c, c, 1, 1); effective gamma = softplus(raw).
    pub raw_gamma: Tensor<T>,
}

impl<T: Scalar> GdnParams<T> {
    /// Near-identity start: effective beta ~ 1, gamma ~ 0.1 on the diagonal
    /// and ~ 1e-3 elsewhere.
    pub fn init(channels: usize) -> Self {
        let raw_one = T::from_f64_lossy(softplus_inverse(1.0));
        let raw_diag = T::from_f64_lossy(softplus_inverse(0.1));
        let raw_off = T::from_f64_lossy(softplus_inverse(1e-3));
        let mut raw_gamma = Tensor::full([channels, channels, 1, 1], raw_off);
        for c in 0..channels {
            raw_gamma.set(c, c, 0, 0, raw_diag);
        }
        Self {
            raw_beta: Tensor::full([1, channels, 1, 1], raw_one),
            raw_gamma,
        }
    }

    pub fn channels(&self) -> usize {
        self.raw_beta.shape()[1]
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.raw_beta"), &self.raw_beta);
        f(&format!("{prefix}.raw_gamma"), &self.raw_gamma);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.raw_beta"), &mut self.raw_beta);
        f(&format!("{prefix}.raw_gamma"), &mut self.raw_gamma);
    }
}

/// Raw (I)GDN parameters bound onto a graph.
#[derive(Debug, Clone, Copy)]
pub struct GdnVars {
    pub raw_beta: Var,
    pub raw_gamma: Var,
}

impl GdnVars {
    /// Vars in the same order as [`GdnParams::visit`].
    pub fn collect(&self, out: &mut Vec<Var>) {
        out.push(self.raw_beta);
        out.push(self.raw_gamma);
    }
}

pub fn bind_gdn<T: Scalar>(g: &mut Graph<T>, p: &GdnParams<T>, trainable: bool) -> GdnVars {
    GdnVars {
        raw_beta: g.leaf(p.raw_beta.clone(), trainable),
        raw_gamma: g.leaf(p.raw_gamma.clone(), trainable),
    }
}

/// Map raw (I)GDN vars to effective (beta, gamma) satisfying the
/// positivity constraints.
pub fn gdn_effective<T: Scalar>(g: &mut Graph<T>, raw: GdnVars) -> (Var, Var) {
    let sp = g.softplus(raw.raw_beta);
    let beta = g.add_scalar(sp, T::from_f64_lossy(BETA_FLOOR));
    let gamma = g.softplus(raw.raw_gamma);
    (beta, gamma)
}

/// Shared denominator of GDN and its inverse:
/// d_i = beta_i + sum_j gamma_ij * x_j^2, per spatial position.
///
/// gamma acts as a 1x1 convolution kernel (c, c, 1, 1) and beta as its
/// bias (1, c, 1, 1). The tiny clamp only guards against caller-supplied
/// effective values below the floor; reparameterized params never hit it.
fn gdn_pool<T: Scalar>(g: &mut Graph<T>, x: Var, beta: Var, gamma: Var) -> Result<Var> {
    let x2 = g.mul(x, x)?;
    let den = g.conv2d(x2, gamma, Some(beta), 1, 0)?;
    Ok(g.clamp_min(den, T::from_f64_lossy(BETA_FLOOR)))
}

/// y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2).
pub fn gdn<T: Scalar>(g: &mut Graph<T>, x: Var, beta: Var, gamma: Var) -> Result<Var> {
    let den = gdn_pool(g, x, beta, gamma)?;
    let scale = g.pow_const(den, T::from_f64_lossy(-0.5));
    g.mul(x, scale)
}

/// y_i = x_i * sqrt(beta_i + sum_j gamma_ij * x_j^2).
pub fn igdn<T: Scalar>(g: &mut Graph<T>, x: Var, beta: Var, gamma: Var) -> Result<Var> {
    let den = gdn_pool(g, x, beta, gamma)?;
    let scale = g.pow_const(den, T::from_f64_lossy(0.5));
    g.mul(x, scale)
}

/// Convenience: bind raw params, map through the constraint, apply.
pub fn gdn_from_raw<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    raw: GdnVars,
    inverse: bool,
) -> Result<Var> {
    let (beta, gamma) = gdn_effective(g, raw);
    if inverse {
        igdn(g, x, beta, gamma)
    } else {
        gdn(g, x, beta, gamma)
    }
}

/// Squeeze-and-excitation parameters for `c` channels with reduction `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeParams<T> {
    /// (c/r, c, 1, 1)
    pub reduce_w: Tensor<T>,
    /// (1, c/r, 1, 1)
    pub reduce_b: Tensor<T>,
    /// (c, c/r, 1, 1)
    pub expand_w: Tensor<T>,
    /// (1, c, 1, 1)
    pub expand_b: Tensor<T>,
}

impl<T: Scalar> SeParams<T> {
    pub fn init<R: Rng>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::InvalidConfig(format!(
                "SE reduction {} must divide channel count {}",
                reduction, channels
            )));
        }
        let mid = channels / reduction;
        Ok(Self {
            reduce_w: uniform_fan_in([mid, channels, 1, 1], rng),
            reduce_b: Tensor::zeros([1, mid, 1, 1]),
            expand_w: uniform_fan_in([channels, mid, 1, 1], rng),
            expand_b: Tensor::zeros([1, channels, 1, 1]),
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce_w.shape()[1]
    }

    pub fn reduction(&self) -> usize {
        self.channels() / self.reduce_w.shape()[0]
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.reduce_w"), &self.reduce_w);
        f(&format!("{prefix}.reduce_b"), &self.reduce_b);
        f(&format!("{prefix}.expand_w"), &self.expand_w);
        f(&format!("{prefix}.expand_b"), &self.expand_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.reduce_w"), &mut self.reduce_w);
        f(&format!("{prefix}.reduce_b"), &mut self.reduce_b);
        f(&format!("{prefix}.expand_w"), &mut self.expand_w);
        f(&format!("{prefix}.expand_b"), &mut self.expand_b);
    }
}

/// Kernel or bias tensor drawn uniformly from [-s, s], s = 1/sqrt(fan-in).
pub fn uniform_fan_in<T: Scalar, R: Rng>(shape: [usize; 4], rng: &mut R) -> Tensor<T> {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
    let s = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::from_f64_lossy(rng.gen_range(-s..=s));
    }
    t
}

#[derive(Debug, Clone, Copy)]
pub struct SeVars {
    pub reduce_w: Var,
    pub reduce_b: Var,
    pub expand_w: Var,
    pub expand_b: Var,
}

impl SeVars {
    /// Vars in the same order as [`SeParams::visit`].
    pub fn collect(&self, out: &mut Vec<Var>) {
        out.push(self.reduce_w);
        out.push(self.reduce_b);
        out.push(self.expand_w);
        out.push(self.expand_b);
    }
}

pub fn bind_se<T: Scalar>(g: &mut Graph<T>, p: &SeParams<T>, trainable: bool) -> SeVars {
    SeVars {
        reduce_w: g.leaf(p.reduce_w.clone(), trainable),
        reduce_b: g.leaf(p.reduce_b.clone(), trainable),
        expand_w: g.leaf(p.expand_w.clone(), trainable),
        expand_b: g.leaf(p.expand_b.clone(), trainable),
    }
}

/// Channel attention: x scaled per channel by
/// sigmoid(W_e * relu(W_r * mean_hw(x) + b_r) + b_e).
pub fn se_block<T: Scalar>(g: &mut Graph<T>, x: Var, se: &SeVars) -> Result<Var> {
    let pooled = g.global_avg_pool(x);
    let squeezed = g.conv2d(pooled, se.reduce_w, Some(se.reduce_b), 1, 0)?;
    let hidden = g.relu(squeezed);
    let logits = g.conv2d(hidden, se.expand_w, Some(se.expand_b), 1, 0)?;
    let scale = g.sigmoid(logits);
    g.mul_channelwise(x, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{compare_gradients, finite_diff_gradient};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn constant_gdn(g: &mut Graph<f64>, c: usize, beta: f64, gamma: f64) -> (Var, Var) {
        let b = g.constant(Tensor::full([1, c, 1, 1], beta));
        let gm = g.constant(Tensor::full([c, c, 1, 1], gamma));
        (b, gm)
    }

    #[test]
    fn gdn_identity_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = random_tensor([1, 4, 3, 3], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let (beta, gamma) = constant_gdn(&mut g, 4, 1.0, 0.0);
        let y = gdn(&mut g, x, beta, gamma).unwrap();
        assert_eq!(g.value(y), &x0);
        let yi = igdn(&mut g, x, beta, gamma).unwrap();
        assert_eq!(g.value(yi), &x0);
    }

    #[test]
    fn gdn_unit_scalar_shrinks_by_sqrt_two() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 1, 1, 1], 1.0_f64));
        let (beta, gamma) = constant_gdn(&mut g, 1, 1.0, 1.0);
        let y = gdn(&mut g, x, beta, gamma).unwrap();
        assert!((g.value(y).data()[0] - 1.0 / 2.0_f64.sqrt()).abs() < 1e-12);
        let yi = igdn(&mut g, x, beta, gamma).unwrap();
        assert!((g.value(yi).data()[0] - 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn igdn_with_zero_gamma_scales_by_sqrt_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = random_tensor([1, 2, 2, 2], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let (beta, gamma) = constant_gdn(&mut g, 2, 4.0, 0.0);
        let y = igdn(&mut g, x, beta, gamma).unwrap();
        for (out, inp) in g.value(y).data().iter().zip(x0.data()) {
            assert!((out - 2.0 * inp).abs() < 1e-12);
        }
    }

    #[test]
    fn gdn_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros([1, 3, 2, 2]));
        let (beta, gamma) = constant_gdn(&mut g, 4, 1.0, 0.1);
        assert!(gdn(&mut g, x, beta, gamma).is_err());
    }

    #[test]
    fn reparameterized_gdn_is_finite_and_sign_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random_tensor([2, 5, 4, 4], &mut rng).map(|v| v * 3.0);
        let params = GdnParams::<f64> {
            raw_beta: random_tensor([1, 5, 1, 1], &mut rng).map(|v| v * 4.0),
            raw_gamma: random_tensor([5, 5, 1, 1], &mut rng).map(|v| v * 4.0),
        };
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let raw = bind_gdn(&mut g, &params, false);
        for inverse in [false, true] {
            let y = gdn_from_raw(&mut g, x, raw, inverse).unwrap();
            assert!(g.value(y).all_finite());
            for (out, inp) in g.value(y).data().iter().zip(x0.data()) {
                assert!(out.signum() * inp.signum() >= 0.0, "sign flipped");
            }
        }
    }

    #[test]
    fn gdn_never_amplifies_when_beta_at_least_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = random_tensor([1, 3, 4, 4], &mut rng).map(|v| v * 5.0);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let beta = g.constant(Tensor::new([1, 3, 1, 1], vec![1.0, 2.5, 7.0]).unwrap());
        let gamma = {
            let t = random_tensor([3, 3, 1, 1], &mut rng).map(|v| v.abs());
            g.constant(t)
        };
        let y = gdn(&mut g, x, beta, gamma).unwrap();
        for (out, inp) in g.value(y).data().iter().zip(x0.data()) {
            assert!(out.abs() <= inp.abs() + 1e-12);
        }
    }

    #[test]
    fn se_with_zero_params_halves_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = random_tensor([1, 8, 3, 3], &mut rng);
        let params = SeParams::<f64> {
            reduce_w: Tensor::zeros([2, 8, 1, 1]),
            reduce_b: Tensor::zeros([1, 2, 1, 1]),
            expand_w: Tensor::zeros([8, 2, 1, 1]),
            expand_b: Tensor::zeros([1, 8, 1, 1]),
        };
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let se = bind_se(&mut g, &params, false);
        let y = se_block(&mut g, x, &se).unwrap();
        for (out, inp) in g.value(y).data().iter().zip(x0.data()) {
            assert!((out - 0.5 * inp).abs() < 1e-15);
        }
    }

    /// Direct, graph-free SE evaluation used as the oracle.
    fn se_oracle(x: &Tensor<f64>, p: &SeParams<f64>) -> Tensor<f64> {
        let [b, c, h, w] = x.shape();
        let mid = p.reduce_w.shape()[0];
        let mut out = Tensor::zeros([b, c, h, w]);
        for bi in 0..b {
            let mut pooled = vec![0.0; c];
            for (ci, pv) in pooled.iter_mut().enumerate() {
                let mut s = 0.0;
                for y in 0..h {
                    for xw in 0..w {
                        s += x.at(bi, ci, y, xw);
                    }
                }
                *pv = s / (h * w) as f64;
            }
            let mut hidden = vec![0.0; mid];
            for (m, hv) in hidden.iter_mut().enumerate() {
                let mut s = p.reduce_b.at(0, m, 0, 0);
                for ci in 0..c {
                    s += p.reduce_w.at(m, ci, 0, 0) * pooled[ci];
                }
                *hv = s.max(0.0);
            }
            for ci in 0..c {
                let mut logit = p.expand_b.at(0, ci, 0, 0);
                for m in 0..mid {
                    logit += p.expand_w.at(ci, m, 0, 0) * hidden[m];
                }
                let scale = 1.0 / (1.0 + (-logit).exp());
                assert!(scale > 0.0 && scale < 1.0);
                for y in 0..h {
                    for xw in 0..w {
                        out.set(bi, ci, y, xw, x.at(bi, ci, y, xw) * scale);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn se_matches_direct_evaluation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = random_tensor([1, 8, 4, 4], &mut rng);
        let mut params = SeParams::<f64>::init(8, 4, &mut rng).unwrap();
        params.reduce_b = random_tensor([1, 2, 1, 1], &mut rng);
        params.expand_b = random_tensor([1, 8, 1, 1], &mut rng);
        let expect = se_oracle(&x0, &params);

        let mut g = Graph::new();
        let x = g.constant(x0);
        let se = bind_se(&mut g, &params, false);
        let y = se_block(&mut g, x, &se).unwrap();
        for (got, want) in g.value(y).data().iter().zip(expect.data()) {
            assert!((got - want).abs() < 1e-6, "{} vs {}", got, want);
        }
    }

    #[test]
    fn se_constant_channel_pools_to_itself() {
        // squeeze of a constant channel must equal the constant exactly
        let mut x0 = Tensor::<f64>::zeros([1, 4, 3, 5]);
        for ci in 0..4 {
            let v = 0.25 * (ci as f64 + 1.0);
            for y in 0..3 {
                for x in 0..5 {
                    x0.set(0, ci, y, x, v);
                }
            }
        }
        let mut g = Graph::new();
        let x = g.constant(x0);
        let pooled = g.global_avg_pool(x);
        for ci in 0..4 {
            assert_eq!(g.value(pooled).at(0, ci, 0, 0), 0.25 * (ci as f64 + 1.0));
        }
    }

    #[test]
    fn se_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = SeParams::<f64>::init(8, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros([1, 6, 2, 2]));
        let se = bind_se(&mut g, &params, false);
        assert!(se_block(&mut g, x, &se).is_err());
    }

    #[test]
    fn se_init_rejects_bad_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(SeParams::<f64>::init(6, 4, &mut rng).is_err());
        assert!(SeParams::<f64>::init(8, 0, &mut rng).is_err());
    }

    #[test]
    fn leaky_relu_reference_points() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1, 1, 1, 3], vec![3.0_f64, -1.0, 0.0]).unwrap());
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data(), &[3.0, -0.2, 0.0]);
    }

    #[test]
    fn softplus_inverse_roundtrips() {
        for y in [1e-4, 1e-2, 0.1, 1.0, 3.0, 20.0] {
            let raw = softplus_inverse(y);
            let sp = raw.max(0.0) + (-raw.abs()).exp().ln_1p();
            assert!((sp - y).abs() < 1e-12 * y.max(1.0), "{} vs {}", sp, y);
        }
    }

    fn gradcheck_scalar_fn(
        build: impl Fn(&mut Graph<f64>, Var) -> Var,
        x0: &Tensor<f64>,
    ) {
        let run = |xt: &Tensor<f64>| -> (f64, Tensor<f64>) {
            let mut g = Graph::new();
            let x = g.leaf(xt.clone(), true);
            let y = build(&mut g, x);
            let loss = g.sum(y);
            let v = g.scalar_value(loss);
            let grads = g.backward(loss).unwrap();
            (v, grads.get(x).unwrap().clone())
        };
        let (_, analytic) = run(x0);
        let numeric = finite_diff_gradient(|p| run(p).0, x0, 1e-6);
        let report = compare_gradients(&analytic, &numeric, 1e-6);
        assert!(
            report.passes(1.0, 1e-6),
            "gradient check failed: {:?}",
            report
        );
    }

    #[test]
    fn gdn_and_igdn_input_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = random_tensor([1, 3, 3, 3], &mut rng);
        let params = GdnParams::<f64>::init(3);
        for inverse in [false, true] {
            let p = params.clone();
            gradcheck_scalar_fn(
                move |g, x| {
                    let raw = bind_gdn(g, &p, false);
                    gdn_from_raw(g, x, raw, inverse).unwrap()
                },
                &x0,
            );
        }
    }

    #[test]
    fn gdn_raw_parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = random_tensor([1, 3, 2, 2], &mut rng);
        let base = GdnParams::<f64>::init(3);
        // differentiate w.r.t. raw_gamma with x fixed
        let run = |gamma_raw: &Tensor<f64>| -> (f64, Tensor<f64>) {
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let raw = GdnVars {
                raw_beta: g.leaf(base.raw_beta.clone(), true),
                raw_gamma: g.leaf(gamma_raw.clone(), true),
            };
            let y = gdn_from_raw(&mut g, x, raw, false).unwrap();
            let loss = g.sum(y);
            let v = g.scalar_value(loss);
            let grads = g.backward(loss).unwrap();
            (v, grads.get(raw.raw_gamma).unwrap().clone())
        };
        let (_, analytic) = run(&base.raw_gamma);
        let numeric = finite_diff_gradient(|p| run(p).0, &base.raw_gamma, 1e-6);
        let report = compare_gradients(&analytic, &numeric, 1e-6);
        assert!(report.passes(1.0, 1e-6), "{:?}", report);
    }

    #[test]
    fn se_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random_tensor([1, 4, 3, 3], &mut rng);
        let params = SeParams::<f64>::init(4, 2, &mut rng).unwrap();
        gradcheck_scalar_fn(
            move |g, x| {
                let se = bind_se(g, &params, false);
                se_block(g, x, &se).unwrap()
            },
            &x0,
        );
    }
}
