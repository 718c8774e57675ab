//! Cross-branch gated units.
//!
//! Each significance branch owns an LSTM-style cell, but state flows across
//! *branches* within a layer instead of across time: a forward sweep passes
//! (h, c) from branch l-1 to branch l, a backward sweep from l+1 to l, and
//! the two hidden states are concatenated before fusion. Boundary states
//! are zero. No weights are shared between branches unless the layer is
//! built in shared mode.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{
    bind_gdn, bind_se, gdn_from_raw, se_block, uniform_fan_in, GdnParams, GdnVars, SeParams,
    SeVars,
};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};
use rand::Rng;

/// Slope of the Leaky ReLU that replaces (I)GDN in the activation ablation.
pub const LEAKY_RELU_ALPHA: f64 = 0.2;

/// How a unit's input path changes resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// Input convolutions use stride 2; output extent is halved.
    Down,
    /// Input convolutions emit 4x channels, then pixel-shuffle by 2;
    /// output extent is doubled.
    Up,
    /// Stride 1, extent preserved (scalar oracles and tests).
    None,
}

/// One gate's convolutions: input path, hidden path, bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GateConvs<T> {
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub bias: Tensor<T>,
}

/// One direction's four gates (input, forget, output, update).
#[derive(Debug, Clone, PartialEq)]
pub struct GateSet<T> {
    pub input: GateConvs<T>,
    pub forget: GateConvs<T>,
    pub output: GateConvs<T>,
    pub update: GateConvs<T>,
}

impl<T: Scalar> GateSet<T> {
    /// Uniform +-1/sqrt(fan-in) kernels; forget bias +1, others zero.
    pub fn init<R: Rng>(
        in_channels: usize,
        hidden: usize,
        kernel: usize,
        resample: Resample,
        rng: &mut R,
    ) -> Self {
        let x_out = if resample == Resample::Up { 4 * hidden } else { hidden };
        let mut mk = |bias_val: f64| GateConvs {
            w_x: uniform_fan_in([x_out, in_channels, kernel, kernel], rng),
            w_h: uniform_fan_in([hidden, hidden, kernel, kernel], rng),
            bias: Tensor::full([1, hidden, 1, 1], T::from_f64_lossy(bias_val)),
        };
        GateSet {
            input: mk(0.0),
            forget: mk(1.0),
            output: mk(0.0),
            update: mk(0.0),
        }
    }

    pub fn zeros(in_channels: usize, hidden: usize, kernel: usize, resample: Resample) -> Self {
        let x_out = if resample == Resample::Up { 4 * hidden } else { hidden };
        let mk = || GateConvs {
            w_x: Tensor::zeros([x_out, in_channels, kernel, kernel]),
            w_h: Tensor::zeros([hidden, hidden, kernel, kernel]),
            bias: Tensor::zeros([1, hidden, 1, 1]),
        };
        GateSet {
            input: mk(),
            forget: mk(),
            output: mk(),
            update: mk(),
        }
    }
}

/// Both directions of one branch's gates. At least one direction present;
/// unidirectional variants drop the other.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    pub forward: Option<GateSet<T>>,
    pub backward: Option<GateSet<T>>,
}

/// Gate weights of a whole layer: either one set per branch (the default,
/// unshared design) or a single set reused by every branch.
#[derive(Debug, Clone, PartialEq)]
pub enum GateStorage<T> {
    PerBranch(Vec<GateParams<T>>),
    Shared(GateParams<T>),
}

/// Post-sweep pipeline of one branch: optional channel attention, the
/// fusion convolution, and either (I)GDN (`Some`) or Leaky ReLU (`None`).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPost<T> {
    pub se: Option<SeParams<T>>,
    pub fuse_w: Tensor<T>,
    pub fuse_b: Tensor<T>,
    pub norm: Option<GdnParams<T>>,
}

/// One gated layer over N branches.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub gates: GateStorage<T>,
    pub post: Vec<BranchPost<T>>,
}

impl<T: Scalar> GateConvs<T> {
    fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.w_x"), &self.w_x);
        f(&format!("{prefix}.w_h"), &self.w_h);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.w_x"), &mut self.w_x);
        f(&format!("{prefix}.w_h"), &mut self.w_h);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T: Scalar> GateParams<T> {
    fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &Tensor<T>)) {
        for (dir, set) in [("fwd", &self.forward), ("bwd", &self.backward)] {
            if let Some(s) = set {
                for (gate, convs) in [
                    ("i", &s.input),
                    ("f", &s.forget),
                    ("o", &s.output),
                    ("in", &s.update),
                ] {
                    convs.visit(&format!("{prefix}.{dir}.{gate}"), f);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        for (dir, set) in [
            ("fwd", &mut self.forward),
            ("bwd", &mut self.backward),
        ] {
            if let Some(s) = set {
                for (gate, convs) in [
                    ("i", &mut s.input),
                    ("f", &mut s.forget),
                    ("o", &mut s.output),
                    ("in", &mut s.update),
                ] {
                    convs.visit_mut(&format!("{prefix}.{dir}.{gate}"), f);
                }
            }
        }
    }
}

impl<T: Scalar> LayerParams<T> {
    pub fn branch_count(&self) -> usize {
        self.post.len()
    }

    /// Canonical traversal: gate weights (per branch, or once when shared),
    /// then each branch's post block (SE, fusion conv, normalization).
    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &Tensor<T>)) {
        match &self.gates {
            GateStorage::PerBranch(per) => {
                for (l, p) in per.iter().enumerate() {
                    p.visit(&format!("{prefix}.branch{l}.gates"), f);
                }
            }
            GateStorage::Shared(p) => p.visit(&format!("{prefix}.shared.gates"), f),
        }
        for (l, post) in self.post.iter().enumerate() {
            let pp = format!("{prefix}.branch{l}");
            if let Some(se) = &post.se {
                se.visit(&format!("{pp}.se"), f);
            }
            f(&format!("{pp}.fuse_w"), &post.fuse_w);
            f(&format!("{pp}.fuse_b"), &post.fuse_b);
            if let Some(norm) = &post.norm {
                norm.visit(&format!("{pp}.norm"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        match &mut self.gates {
            GateStorage::PerBranch(per) => {
                for (l, p) in per.iter_mut().enumerate() {
                    p.visit_mut(&format!("{prefix}.branch{l}.gates"), f);
                }
            }
            GateStorage::Shared(p) => p.visit_mut(&format!("{prefix}.shared.gates"), f),
        }
        for (l, post) in self.post.iter_mut().enumerate() {
            let pp = format!("{prefix}.branch{l}");
            if let Some(se) = &mut post.se {
                se.visit_mut(&format!("{pp}.se"), f);
            }
            f(&format!("{pp}.fuse_w"), &mut post.fuse_w);
            f(&format!("{pp}.fuse_b"), &mut post.fuse_b);
            if let Some(norm) = &mut post.norm {
                norm.visit_mut(&format!("{pp}.norm"), f);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateConvVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GateSetVars {
    pub input: GateConvVars,
    pub forget: GateConvVars,
    pub output: GateConvVars,
    pub update: GateConvVars,
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub forward: Option<GateSetVars>,
    pub backward: Option<GateSetVars>,
}

#[derive(Debug, Clone)]
pub struct BranchPostVars {
    pub se: Option<SeVars>,
    pub fuse_w: Var,
    pub fuse_b: Var,
    pub norm: Option<GdnVars>,
}

/// A layer bound onto a graph. `gates` always has one entry per branch; in
/// shared mode the entries alias the same vars, which is what makes the
/// sharing real for both forward values and gradients.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub gates: Vec<GateVars>,
    pub post: Vec<BranchPostVars>,
    shared_gates: bool,
}

impl GateSetVars {
    fn collect(&self, out: &mut Vec<Var>) {
        for convs in [&self.input, &self.forget, &self.output, &self.update] {
            out.push(convs.w_x);
            out.push(convs.w_h);
            out.push(convs.bias);
        }
    }
}

impl GateVars {
    fn collect(&self, out: &mut Vec<Var>) {
        if let Some(s) = &self.forward {
            s.collect(out);
        }
        if let Some(s) = &self.backward {
            s.collect(out);
        }
    }
}

impl LayerVars {
    /// Vars in the same order as [`LayerParams::visit`]: shared gates once.
    pub fn collect(&self, out: &mut Vec<Var>) {
        if self.shared_gates {
            self.gates[0].collect(out);
        } else {
            for gv in &self.gates {
                gv.collect(out);
            }
        }
        for post in &self.post {
            if let Some(se) = &post.se {
                se.collect(out);
            }
            out.push(post.fuse_w);
            out.push(post.fuse_b);
            if let Some(norm) = &post.norm {
                norm.collect(out);
            }
        }
    }
}

pub fn bind_gate_set<T: Scalar>(
    g: &mut Graph<T>,
    s: &GateSet<T>,
    trainable: bool,
) -> GateSetVars {
    let mut bind = |c: &GateConvs<T>| GateConvVars {
        w_x: g.leaf(c.w_x.clone(), trainable),
        w_h: g.leaf(c.w_h.clone(), trainable),
        bias: g.leaf(c.bias.clone(), trainable),
    };
    GateSetVars {
        input: bind(&s.input),
        forget: bind(&s.forget),
        output: bind(&s.output),
        update: bind(&s.update),
    }
}

fn bind_gate_params<T: Scalar>(
    g: &mut Graph<T>,
    p: &GateParams<T>,
    trainable: bool,
) -> GateVars {
    GateVars {
        forward: p.forward.as_ref().map(|s| bind_gate_set(g, s, trainable)),
        backward: p.backward.as_ref().map(|s| bind_gate_set(g, s, trainable)),
    }
}

pub fn bind_layer<T: Scalar>(
    g: &mut Graph<T>,
    layer: &LayerParams<T>,
    trainable: bool,
) -> LayerVars {
    let n = layer.branch_count();
    let shared_gates = matches!(layer.gates, GateStorage::Shared(_));
    let gates = match &layer.gates {
        GateStorage::PerBranch(per) => {
            per.iter().map(|p| bind_gate_params(g, p, trainable)).collect()
        }
        GateStorage::Shared(p) => {
            let one = bind_gate_params(g, p, trainable);
            vec![one; n]
        }
    };
    let post = layer
        .post
        .iter()
        .map(|p| BranchPostVars {
            se: p.se.as_ref().map(|s| bind_se(g, s, trainable)),
            fuse_w: g.leaf(p.fuse_w.clone(), trainable),
            fuse_b: g.leaf(p.fuse_b.clone(), trainable),
            norm: p.norm.as_ref().map(|n| bind_gdn(g, n, trainable)),
        })
        .collect();
    LayerVars { gates, post, shared_gates }
}

/// Output shape of a gated unit given its input shape and resampling mode.
fn unit_output_shape<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    set: &GateSetVars,
    resample: Resample,
) -> Result<[usize; 4]> {
    let [b, _, h, w] = g.value(x).shape();
    let hidden = g.value(set.input.w_h).shape()[0];
    let k = g.value(set.input.w_x).shape()[2];
    let pad = k / 2;
    let stride = if resample == Resample::Down { 2 } else { 1 };
    let (oh, ow) = match (
        tensor::conv_extent(h, k, stride, pad),
        tensor::conv_extent(w, k, stride, pad),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "input extent {}x{} too small for kernel {}",
                h, w, k
            )))
        }
    };
    match resample {
        Resample::Up => Ok([b, hidden, 2 * oh, 2 * ow]),
        _ => Ok([b, hidden, oh, ow]),
    }
}

/// Input-path transform of one gate: convolution, plus pixel-shuffle when
/// upsampling.
fn input_path<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w_x: Var,
    resample: Resample,
) -> Result<Var> {
    let k = g.value(w_x).shape()[2];
    let pad = k / 2;
    match resample {
        Resample::Down => g.conv2d(x, w_x, None, 2, pad),
        Resample::None => g.conv2d(x, w_x, None, 1, pad),
        Resample::Up => {
            let c = g.conv2d(x, w_x, None, 1, pad)?;
            g.pixel_shuffle(c, 2)
        }
    }
}

/// One gated update (Eqs. of the unit):
/// i = sig(Wix*x + Wih*h + bi), f and o likewise,
/// in = tanh(Winx*x + Winh*h + bin),
/// c_out = f.c_in + i.in, h_out = o.tanh(c_out).
pub fn gated_step<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    h_in: Var,
    c_in: Var,
    set: &GateSetVars,
    resample: Resample,
) -> Result<(Var, Var)> {
    let pre = |g: &mut Graph<T>, convs: &GateConvVars| -> Result<Var> {
        let xs = input_path(g, x, convs.w_x, resample)?;
        let k = g.value(convs.w_h).shape()[2];
        let hs = g.conv2d(h_in, convs.w_h, Some(convs.bias), 1, k / 2)?;
        g.add(xs, hs)
    };
    let pi = pre(g, &set.input)?;
    let pf = pre(g, &set.forget)?;
    let po = pre(g, &set.output)?;
    let pu = pre(g, &set.update)?;
    let i = g.sigmoid(pi);
    let f = g.sigmoid(pf);
    let o = g.sigmoid(po);
    let update = g.tanh(pu);
    let keep = g.mul(f, c_in)?;
    let write = g.mul(i, update)?;
    let c_out = g.add(keep, write)?;
    let ct = g.tanh(c_out);
    let h_out = g.mul(o, ct)?;
    Ok((h_out, c_out))
}

/// One sweep over the branches. `reverse = false` walks 1..N passing state
/// from l-1 to l; `reverse = true` walks N..1 passing state from l+1 to l.
/// Returned (h, c) pairs are in branch order either way.
pub fn sweep<T: Scalar>(
    g: &mut Graph<T>,
    inputs: &[Var],
    sets: &[GateSetVars],
    resample: Resample,
    reverse: bool,
) -> Result<Vec<(Var, Var)>> {
    if inputs.len() != sets.len() {
        return Err(Error::InvalidConfig(format!(
            "{} branch inputs but {} gate sets",
            inputs.len(),
            sets.len()
        )));
    }
    let n = inputs.len();
    let mut states: Vec<Option<(Var, Var)>> = vec![None; n];
    let mut neighbor: Option<(Var, Var)> = None;
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for l in order {
        let (h_in, c_in) = match neighbor {
            Some(hc) => hc,
            None => {
                let shape = unit_output_shape(g, inputs[l], &sets[l], resample)?;
                let z = g.constant(Tensor::zeros(shape));
                (z, z)
            }
        };
        let (h, c) = gated_step(g, inputs[l], h_in, c_in, &sets[l], resample)?;
        // the just-updated state is what the next branch sees
        neighbor = Some((h, c));
        states[l] = Some((h, c));
    }
    Ok(states.into_iter().map(|s| s.unwrap()).collect())
}

/// Hidden output per branch before post-processing: concat(h_fwd, h_bwd)
/// when both sweeps run, the single sweep's h otherwise.
pub fn layer_hidden<T: Scalar>(
    g: &mut Graph<T>,
    inputs: &[Var],
    vars: &LayerVars,
    resample: Resample,
) -> Result<Vec<Var>> {
    let n = inputs.len();
    if vars.gates.len() != n {
        return Err(Error::InvalidConfig(format!(
            "layer built for {} branches, got {} inputs",
            vars.gates.len(),
            n
        )));
    }
    let fwd_sets: Option<Vec<GateSetVars>> = collect_direction(&vars.gates, true)?;
    let bwd_sets: Option<Vec<GateSetVars>> = collect_direction(&vars.gates, false)?;
    if fwd_sets.is_none() && bwd_sets.is_none() {
        return Err(Error::InvalidConfig(
            "layer has neither forward nor backward gates".into(),
        ));
    }
    let fwd = match &fwd_sets {
        Some(sets) => Some(sweep(g, inputs, sets, resample, false)?),
        None => None,
    };
    let bwd = match &bwd_sets {
        Some(sets) => Some(sweep(g, inputs, sets, resample, true)?),
        None => None,
    };
    (0..n)
        .map(|l| match (&fwd, &bwd) {
            (Some(f), Some(b)) => g.concat_channels(&[f[l].0, b[l].0]),
            (Some(f), None) => Ok(f[l].0),
            (None, Some(b)) => Ok(b[l].0),
            (None, None) => unreachable!(),
        })
        .collect()
}

/// All branches must agree on which directions exist.
fn collect_direction(
    gates: &[GateVars],
    forward: bool,
) -> Result<Option<Vec<GateSetVars>>> {
    let pick = |gv: &GateVars| if forward { gv.forward } else { gv.backward };
    let present = gates.iter().filter(|gv| pick(gv).is_some()).count();
    if present == 0 {
        Ok(None)
    } else if present == gates.len() {
        Ok(Some(gates.iter().map(|gv| pick(gv).unwrap()).collect()))
    } else {
        Err(Error::InvalidConfig(
            "branches disagree on sweep directions".into(),
        ))
    }
}

/// Full layer: sweeps, per-branch attention, fusion convolution, and
/// normalization ((I)GDN per `inverse_norm`, or Leaky ReLU when the branch
/// has no GDN params).
pub fn apply_layer<T: Scalar>(
    g: &mut Graph<T>,
    inputs: &[Var],
    vars: &LayerVars,
    resample: Resample,
    inverse_norm: bool,
) -> Result<Vec<Var>> {
    if vars.post.len() != inputs.len() {
        return Err(Error::InvalidConfig(format!(
            "layer has {} post blocks, got {} inputs",
            vars.post.len(),
            inputs.len()
        )));
    }
    let hidden = layer_hidden(g, inputs, vars, resample)?;
    hidden
        .into_iter()
        .zip(&vars.post)
        .map(|(y, post)| {
            let y = match &post.se {
                Some(se) => se_block(g, y, se)?,
                None => y,
            };
            let k = g.value(post.fuse_w).shape()[2];
            let y = g.conv2d(y, post.fuse_w, Some(post.fuse_b), 1, k / 2)?;
            match &post.norm {
                Some(raw) => gdn_from_raw(g, y, *raw, inverse_norm),
                None => Ok(g.leaky_relu(y, T::from_f64_lossy(LEAKY_RELU_ALPHA))),
            }
        })
        .collect()
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

    fn scalar_gate_set(v: [f64; 12]) -> GateSet<f64> {
        let t = |x: f64| Tensor::full([1, 1, 1, 1], x);
        GateSet {
            input: GateConvs { w_x: t(v[0]), w_h: t(v[1]), bias: t(v[2]) },
            forget: GateConvs { w_x: t(v[3]), w_h: t(v[4]), bias: t(v[5]) },
            output: GateConvs { w_x: t(v[6]), w_h: t(v[7]), bias: t(v[8]) },
            update: GateConvs { w_x: t(v[9]), w_h: t(v[10]), bias: t(v[11]) },
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Graph-free scalar recurrence used as the oracle for 1x1x1 configs.
    fn scalar_step(x: f64, h: f64, c: f64, v: &[f64; 12]) -> (f64, f64) {
        let i = sigmoid(v[0] * x + v[1] * h + v[2]);
        let f = sigmoid(v[3] * x + v[4] * h + v[5]);
        let o = sigmoid(v[6] * x + v[7] * h + v[8]);
        let inp = (v[9] * x + v[10] * h + v[11]).tanh();
        let c_out = f * c + i * inp;
        (o * c_out.tanh(), c_out)
    }

    fn scalar_sweep(inputs: &[f64], sets: &[[f64; 12]], reverse: bool) -> Vec<(f64, f64)> {
        let n = inputs.len();
        let mut out = vec![(0.0, 0.0); n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        let (mut h, mut c) = (0.0, 0.0);
        for l in order {
            let (hn, cn) = scalar_step(inputs[l], h, c, &sets[l]);
            h = hn;
            c = cn;
            out[l] = (h, c);
        }
        out
    }

    fn run_step_scalar(x: f64, h: f64, c: f64, v: [f64; 12]) -> (f64, f64) {
        let mut g = Graph::new();
        let set = bind_gate_set(&mut g, &scalar_gate_set(v), false);
        let xv = g.constant(Tensor::full([1, 1, 1, 1], x));
        let hv = g.constant(Tensor::full([1, 1, 1, 1], h));
        let cv = g.constant(Tensor::full([1, 1, 1, 1], c));
        let (ho, co) = gated_step(&mut g, xv, hv, cv, &set, Resample::None).unwrap();
        (g.value(ho).data()[0], g.value(co).data()[0])
    }

    #[test]
    fn zero_everything_is_a_fixed_point() {
        let (h, c) = run_step_scalar(0.0, 0.0, 0.0, [0.0; 12]);
        assert_eq!((h, c), (0.0, 0.0));
    }

    #[test]
    fn unit_weights_hand_evaluation() {
        // all weights 1, biases 0, x = h = c = 1:
        // every gate sees 2, so i = f = o = sigmoid(2), in = tanh(2)
        let v = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let (h, c) = run_step_scalar(1.0, 1.0, 1.0, v);
        let s2 = sigmoid(2.0);
        let c_expect = s2 * (1.0 + 2.0_f64.tanh());
        assert!((c - c_expect).abs() < 1e-12);
        assert!((h - s2 * c_expect.tanh()).abs() < 1e-12);
        assert!((c - 1.7300).abs() < 1e-3, "c = {}", c);
        assert!((h - 0.8269).abs() < 1e-3, "h = {}", h);
    }

    #[test]
    fn large_forget_bias_carries_the_cell_state() {
        let w = 0.1;
        let v = [w, w, 0.0, w, w, 10.0, w, w, 0.0, w, w, 0.0];
        let (x, h_in, c_in) = (0.3, 0.3, 5.0);
        let (_, c) = run_step_scalar(x, h_in, c_in, v);
        let i = sigmoid(w * x + w * h_in);
        let inp = (w * x + w * h_in).tanh();
        assert!((c - (c_in + i * inp)).abs() < 1e-3, "c = {}", c);
    }

    #[test]
    fn step_output_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let set_params = GateSet::<f64>::init(2, 3, 3, Resample::Down, &mut rng);
        let set = bind_gate_set(&mut g, &set_params, false);
        let x = g.constant(random_tensor([1, 2, 4, 4], &mut rng).map(|v| v * 100.0));
        let h = g.constant(random_tensor([1, 3, 2, 2], &mut rng).map(|v| v * 100.0));
        let c = g.constant(random_tensor([1, 3, 2, 2], &mut rng).map(|v| v * 100.0));
        let (ho, co) = gated_step(&mut g, x, h, c, &set, Resample::Down).unwrap();
        assert!(g.value(co).all_finite());
        for &v in g.value(ho).data() {
            assert!(v > -1.0 && v < 1.0, "h escaped (-1,1): {}", v);
        }
    }

    #[test]
    fn step_rejects_mismatched_state_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let set_params = GateSet::<f64>::init(2, 3, 3, Resample::Down, &mut rng);
        let set = bind_gate_set(&mut g, &set_params, false);
        let x = g.constant(Tensor::<f64>::zeros([1, 2, 4, 4]));
        // state at input resolution instead of the halved output resolution
        let h = g.constant(Tensor::<f64>::zeros([1, 3, 4, 4]));
        let c = g.constant(Tensor::<f64>::zeros([1, 3, 4, 4]));
        assert!(gated_step(&mut g, x, h, c, &set, Resample::Down).is_err());
    }

    fn scalar_layer(sets_f: &[[f64; 12]], sets_b: Option<&[[f64; 12]]>) -> LayerParams<f64> {
        let n = sets_f.len();
        let branches: Vec<GateParams<f64>> = (0..n)
            .map(|l| GateParams {
                forward: Some(scalar_gate_set(sets_f[l])),
                backward: sets_b.map(|sb| scalar_gate_set(sb[l])),
            })
            .collect();
        let y_ch = if sets_b.is_some() { 2 } else { 1 };
        let post = (0..n)
            .map(|_| BranchPost {
                se: None,
                fuse_w: {
                    // identity on the first channel
                    let mut w = Tensor::zeros([1, y_ch, 1, 1]);
                    w.set(0, 0, 0, 0, 1.0);
                    w
                },
                fuse_b: Tensor::zeros([1, 1, 1, 1]),
                norm: None,
            })
            .collect();
        LayerParams {
            gates: GateStorage::PerBranch(branches),
            post,
        }
    }

    #[test]
    fn sweeps_match_scalar_oracle_for_small_branch_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=4usize {
            let sets_f: Vec<[f64; 12]> =
                (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
            let sets_b: Vec<[f64; 12]> =
                (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let params = scalar_layer(&sets_f, Some(&sets_b));
            let mut g = Graph::new();
            let vars = bind_layer(&mut g, &params, false);
            let inputs: Vec<Var> = xs
                .iter()
                .map(|&x| g.constant(Tensor::full([1, 1, 1, 1], x)))
                .collect();
            let ys = layer_hidden(&mut g, &inputs, &vars, Resample::None).unwrap();

            let of = scalar_sweep(&xs, &sets_f, false);
            let ob = scalar_sweep(&xs, &sets_b, true);
            for l in 0..n {
                let y = g.value(ys[l]);
                assert_eq!(y.shape(), [1, 2, 1, 1]);
                assert!((y.at(0, 0, 0, 0) - of[l].0).abs() < 1e-9, "n={} l={} fwd", n, l);
                assert!((y.at(0, 1, 0, 0) - ob[l].0).abs() < 1e-9, "n={} l={} bwd", n, l);
            }
        }
    }

    #[test]
    fn zeroed_backward_weights_reduce_to_the_forward_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 3;
        let sets_f: Vec<[f64; 12]> =
            (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let zeros = vec![[0.0; 12]; n];
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let bidir = scalar_layer(&sets_f, Some(&zeros));
        let mut g = Graph::new();
        let vars = bind_layer(&mut g, &bidir, false);
        let inputs: Vec<Var> = xs
            .iter()
            .map(|&x| g.constant(Tensor::full([1, 1, 1, 1], x)))
            .collect();
        let ys = layer_hidden(&mut g, &inputs, &vars, Resample::None).unwrap();

        let uni = scalar_layer(&sets_f, None);
        let mut g2 = Graph::new();
        let vars2 = bind_layer(&mut g2, &uni, false);
        let inputs2: Vec<Var> = xs
            .iter()
            .map(|&x| g2.constant(Tensor::full([1, 1, 1, 1], x)))
            .collect();
        let ys2 = layer_hidden(&mut g2, &inputs2, &vars2, Resample::None).unwrap();

        for l in 0..n {
            let bi = g.value(ys[l]);
            let un = g2.value(ys2[l]);
            // forward halves agree bit-for-bit; zero-weight backward half is 0
            assert_eq!(bi.at(0, 0, 0, 0), un.at(0, 0, 0, 0));
            assert_eq!(bi.at(0, 1, 0, 0), 0.0);
        }
    }

    #[test]
    fn forward_sweep_is_causal_backward_sweep_is_anticausal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 3;
        let mk_layer = |rng: &mut ChaCha8Rng| -> LayerParams<f64> {
            let branches = (0..n)
                .map(|_| GateParams {
                    forward: Some(GateSet::init(2, 2, 3, Resample::Down, rng)),
                    backward: Some(GateSet::init(2, 2, 3, Resample::Down, rng)),
                })
                .collect();
            let post = (0..n)
                .map(|_| BranchPost {
                    se: None,
                    fuse_w: uniform_fan_in([2, 4, 3, 3], rng),
                    fuse_b: Tensor::zeros([1, 2, 1, 1]),
                    norm: None,
                })
                .collect();
            LayerParams { gates: GateStorage::PerBranch(branches), post }
        };
        let layer = mk_layer(&mut rng);

        let base: Vec<Tensor<f64>> =
            (0..n).map(|_| random_tensor([1, 2, 4, 4], &mut rng)).collect();
        let mut perturbed = base.clone();
        perturbed[1] = perturbed[1].map(|v| v + 0.25); // poke the middle branch

        let eval = |inputs: &[Tensor<f64>]| -> Vec<Tensor<f64>> {
            let mut g = Graph::new();
            let vars = bind_layer(&mut g, &layer, false);
            let ivars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let ys = layer_hidden(&mut g, &ivars, &vars, Resample::Down).unwrap();
            ys.iter().map(|&y| g.value(y).clone()).collect()
        };
        let a = eval(&base);
        let b = eval(&perturbed);

        let half = |t: &Tensor<f64>, second: bool| -> Vec<f64> {
            let [_, c, h, w] = t.shape();
            let (lo, hi) = if second { (c / 2, c) } else { (0, c / 2) };
            let mut out = Vec::new();
            for ci in lo..hi {
                for y in 0..h {
                    for x in 0..w {
                        out.push(t.at(0, ci, y, x));
                    }
                }
            }
            out
        };
        // branch 0 forward state precedes the perturbation; branch 2
        // backward state likewise
        assert_eq!(half(&a[0], false), half(&b[0], false));
        assert_eq!(half(&a[2], true), half(&b[2], true));
        // everything downstream of the poke must move
        assert_ne!(half(&a[1], false), half(&b[1], false));
        assert_ne!(half(&a[2], false), half(&b[2], false));
        assert_ne!(half(&a[0], true), half(&b[0], true));
    }

    #[test]
    fn zero_parameter_layer_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 2;
        for use_gdn in [true, false] {
            let branches = (0..n)
                .map(|_| GateParams {
                    forward: Some(GateSet::<f64>::zeros(3, 2, 3, Resample::Down)),
                    backward: Some(GateSet::<f64>::zeros(3, 2, 3, Resample::Down)),
                })
                .collect();
            let post = (0..n)
                .map(|_| BranchPost {
                    se: Some(SeParams::init(4, 2, &mut rng).unwrap()),
                    fuse_w: Tensor::zeros([2, 4, 3, 3]),
                    fuse_b: Tensor::zeros([1, 2, 1, 1]),
                    norm: use_gdn.then(|| GdnParams::init(2)),
                })
                .collect();
            let layer = LayerParams { gates: GateStorage::PerBranch(branches), post };
            let mut g = Graph::new();
            let vars = bind_layer(&mut g, &layer, false);
            let inputs: Vec<Var> = (0..n)
                .map(|_| {
                    let t = random_tensor([1, 3, 4, 4], &mut rng);
                    g.constant(t)
                })
                .collect();
            for inverse in [false, true] {
                let ys = apply_layer(&mut g, &inputs, &vars, Resample::Down, inverse).unwrap();
                for &y in &ys {
                    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
                    assert_eq!(g.value(y).shape(), [1, 2, 2, 2]);
                }
            }
        }
    }

    #[test]
    fn upsampling_layer_doubles_the_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 2;
        let branches = (0..n)
            .map(|_| GateParams {
                forward: Some(GateSet::init(3, 2, 3, Resample::Up, &mut rng)),
                backward: Some(GateSet::init(3, 2, 3, Resample::Up, &mut rng)),
            })
            .collect();
        let post = (0..n)
            .map(|_| BranchPost {
                se: Some(SeParams::init(4, 2, &mut rng).unwrap()),
                fuse_w: uniform_fan_in([5, 4, 3, 3], &mut rng),
                fuse_b: Tensor::zeros([1, 5, 1, 1]),
                norm: Some(GdnParams::init(5)),
            })
            .collect();
        let layer = LayerParams { gates: GateStorage::PerBranch(branches), post };
        let mut g = Graph::new();
        let vars = bind_layer(&mut g, &layer, false);
        let inputs: Vec<Var> = (0..n)
            .map(|_| {
                let t = random_tensor([1, 3, 3, 5], &mut rng);
                g.constant(t)
            })
            .collect();
        let ys = apply_layer(&mut g, &inputs, &vars, Resample::Up, true).unwrap();
        for &y in &ys {
            assert_eq!(g.value(y).shape(), [1, 5, 6, 10]);
            assert!(g.value(y).all_finite());
        }
    }

    #[test]
    fn shared_gates_alias_across_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let set: [f64; 12] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let shared = LayerParams {
            gates: GateStorage::Shared(GateParams {
                forward: Some(scalar_gate_set(set)),
                backward: None,
            }),
            post: (0..2)
                .map(|_| BranchPost {
                    se: None,
                    fuse_w: Tensor::full([1, 1, 1, 1], 1.0),
                    fuse_b: Tensor::zeros([1, 1, 1, 1]),
                    norm: None,
                })
                .collect(),
        };
        // identical nonzero inputs: branch 2 still differs, because only
        // the neighbor state distinguishes the branches
        let mut g = Graph::new();
        let vars = bind_layer(&mut g, &shared, false);
        assert_eq!(
            vars.gates[0].forward.unwrap().input.w_x,
            vars.gates[1].forward.unwrap().input.w_x,
            "shared storage must bind each weight once"
        );
        let x = g.constant(Tensor::full([1, 1, 1, 1], 0.4_f64));
        let ys = layer_hidden(&mut g, &[x, x], &vars, Resample::None).unwrap();
        let (y0, y1) = (g.value(ys[0]).data()[0], g.value(ys[1]).data()[0]);
        assert_ne!(y0, y1);
        // oracle agreement: recurrent application of one scalar cell
        let o = scalar_sweep(&[0.4, 0.4], &[set, set], false);
        assert!((y0 - o[0].0).abs() < 1e-12);
        assert!((y1 - o[1].0).abs() < 1e-12);

        // with zero biases, zero inputs collapse both branches to the zero
        // fixed point and the branch asymmetry disappears
        let mut no_bias = set;
        for i in [2, 5, 8, 11] {
            no_bias[i] = 0.0;
        }
        let shared_nb = LayerParams {
            gates: GateStorage::Shared(GateParams {
                forward: Some(scalar_gate_set(no_bias)),
                backward: None,
            }),
            post: shared.post.clone(),
        };
        let vars_nb = bind_layer(&mut g, &shared_nb, false);
        let z = g.constant(Tensor::full([1, 1, 1, 1], 0.0_f64));
        let ys0 = layer_hidden(&mut g, &[z, z], &vars_nb, Resample::None).unwrap();
        assert_eq!(g.value(ys0[0]).data()[0], 0.0);
        assert_eq!(g.value(ys0[1]).data()[0], 0.0);
    }

    #[test]
    fn shared_single_branch_equals_unshared() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set: [f64; 12] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let post = || {
            vec![BranchPost {
                se: None,
                fuse_w: Tensor::full([1, 1, 1, 1], 1.0_f64),
                fuse_b: Tensor::zeros([1, 1, 1, 1]),
                norm: None,
            }]
        };
        let gp = GateParams { forward: Some(scalar_gate_set(set)), backward: None };
        let shared = LayerParams { gates: GateStorage::Shared(gp.clone()), post: post() };
        let unshared = LayerParams { gates: GateStorage::PerBranch(vec![gp]), post: post() };
        let eval = |layer: &LayerParams<f64>| {
            let mut g = Graph::new();
            let vars = bind_layer(&mut g, layer, false);
            let x = g.constant(Tensor::full([1, 1, 1, 1], -0.3_f64));
            let ys = apply_layer(&mut g, &[x], &vars, Resample::None, false).unwrap();
            g.value(ys[0]).data()[0]
        };
        assert_eq!(eval(&shared), eval(&unshared));
    }

    #[test]
    fn branch_count_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layer = scalar_layer(
            &[std::array::from_fn(|_| rng.gen_range(-1.0..1.0))],
            None,
        );
        let mut g = Graph::new();
        let vars = bind_layer(&mut g, &layer, false);
        let x = g.constant(Tensor::full([1, 1, 1, 1], 0.1_f64));
        assert!(apply_layer(&mut g, &[x, x], &vars, Resample::None, false).is_err());
    }

    #[test]
    fn gradients_flow_through_a_two_layer_three_branch_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 3;
        let mk_layer = |in_ch: usize, hid: usize, rng: &mut ChaCha8Rng| -> LayerParams<f64> {
            let branches = (0..n)
                .map(|_| GateParams {
                    forward: Some(GateSet::init(in_ch, hid, 3, Resample::Down, rng)),
                    backward: Some(GateSet::init(in_ch, hid, 3, Resample::Down, rng)),
                })
                .collect();
            let post = (0..n)
                .map(|_| BranchPost {
                    se: Some(SeParams::init(2 * hid, 2, rng).unwrap()),
                    fuse_w: uniform_fan_in([hid, 2 * hid, 3, 3], rng),
                    fuse_b: Tensor::zeros([1, hid, 1, 1]),
                    norm: Some(GdnParams::init(hid)),
                })
                .collect();
            LayerParams { gates: GateStorage::PerBranch(branches), post }
        };
        let layer1 = mk_layer(2, 2, &mut rng);
        let layer2 = mk_layer(2, 2, &mut rng);
        let x0 = random_tensor([1, 2, 4, 4], &mut rng);

        // loss as a function of the first branch's input
        let run = |xt: &Tensor<f64>| -> (f64, Tensor<f64>, Tensor<f64>) {
            let mut g = Graph::new();
            let v1 = bind_layer(&mut g, &layer1, true);
            let v2 = bind_layer(&mut g, &layer2, true);
            let x = g.leaf(xt.clone(), true);
            let fixed: Vec<Var> = (0..n - 1)
                .map(|i| g.constant(Tensor::full([1, 2, 4, 4], 0.1 * (i as f64 + 1.0))))
                .collect();
            let inputs = [vec![x], fixed].concat();
            let mid = apply_layer(&mut g, &inputs, &v1, Resample::Down, false).unwrap();
            let out = apply_layer(&mut g, &mid, &v2, Resample::Down, false).unwrap();
            let sums: Vec<Var> = out.iter().map(|&o| g.sum(o)).collect();
            let mut total = sums[0];
            for &s in &sums[1..] {
                total = g.add(total, s).unwrap();
            }
            let v = g.scalar_value(total);
            let grads = g.backward(total).unwrap();
            let w_probe = v1.gates[1].forward.unwrap().update.w_x;
            (
                v,
                grads.get(x).unwrap().clone(),
                grads.get(w_probe).unwrap().clone(),
            )
        };
        let (_, gx, gw) = run(&x0);
        let fd = finite_diff_gradient(|p| run(p).0, &x0, 1e-6);
        let report = compare_gradients(&gx, &fd, 1e-6);
        assert!(report.passes(1.0, 1e-6), "input grads: {:?}", report);
        // weight gradient must be alive: the stack actually trains
        assert!(gw.data().iter().any(|&v| v != 0.0));
    }
}
