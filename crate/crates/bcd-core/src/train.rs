//! Optimization: the weighted multi-level loss and an Adam trainer.
//!
//! Every training step encodes an image with all branches switched on,
//! decodes every level in one pass, and scores each unclamped cumulative
//! reconstruction against the original. The loss is the beta-weighted sum
//! of those per-level distortions, so coarse levels keep producing a usable
//! image while finer levels learn to refine it.

use crate::codec::{
    branch_inputs, decoder_graph, encoder_graph, pad_reflect, quantize, CodecModel,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Per-level loss weights (beta), one per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights(pub Vec<f64>);

impl LossWeights {
    pub fn uniform(levels: usize) -> Self {
        Self(vec![1.0; levels])
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.0.len() != levels {
            return Err(Error::InvalidArgument(format!(
                "{} loss weights for {} levels",
                self.0.len(),
                levels
            )));
        }
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistortionKind {
    L1,
    Mse,
}

fn distortion<T: Scalar>(g: &mut Graph<T>, kind: DistortionKind, a: Var, b: Var) -> Result<Var> {
    match kind {
        DistortionKind::L1 => crate::metrics::l1(g, a, b),
        DistortionKind::Mse => {
            let d = g.sub(a, b)?;
            let sq = g.mul(d, d)?;
            Ok(g.mean(sq))
        }
    }
}

/// The loss graph for one image plus handles to its pieces.
pub struct LossBreakdown {
    /// Weighted total, a scalar.
    pub loss: Var,
    /// Per-level distortion scalars, index 0 = level 1.
    pub per_level: Vec<Var>,
    /// Unclamped cumulative reconstructions, one per level.
    pub cumulative: Vec<Var>,
}

/// Build the full forward pass and the weighted multi-level loss on `g`.
/// All branches are active; the binarizer mode comes from the model config.
pub fn scalable_loss<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    vars: &crate::codec::CodecVars,
    model: &CodecModel<T>,
    image: &crate::bitplane::RgbImage,
    weights: &LossWeights,
    kind: DistortionKind,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let config = &model.config;
    weights.validate(config.branches)?;
    let (padded, _) = pad_reflect(image, config.spatial_factor())?;
    let target = g.constant(padded.to_tensor::<T>());
    let inputs = branch_inputs(g, vars, config, &padded)?;
    let feats = encoder_graph(g, vars, config, &inputs)?;
    let codes = feats
        .iter()
        .zip(&vars.quant)
        .map(|(&f, qc)| quantize(g, f, *qc, config.binarizer, rng))
        .collect::<Result<Vec<_>>>()?;
    let ys = decoder_graph(g, vars, config, &codes)?;

    let mut cumulative = Vec::with_capacity(ys.len());
    let mut running: Option<Var> = None;
    for &y in &ys {
        let next = match running {
            Some(prev) => g.add(prev, y)?,
            None => y,
        };
        cumulative.push(next);
        running = Some(next);
    }
    let mut per_level = Vec::with_capacity(ys.len());
    let mut loss: Option<Var> = None;
    for (l, &cum) in cumulative.iter().enumerate() {
        let d = distortion(g, kind, cum, target)?;
        per_level.push(d);
        let w = weights.0[l];
        if w == 0.0 {
            continue;
        }
        let weighted = g.mul_scalar(d, T::from_f64_lossy(w));
        loss = Some(match loss {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
    }
    let loss = loss.ok_or_else(|| {
        Error::InvalidArgument("all loss weights are zero; nothing to optimize".into())
    })?;
    Ok(LossBreakdown { loss, per_level, cumulative })
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self { m: Vec::new(), v: Vec::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One Adam update of a single tensor. `step` starts at 1.
pub fn adam_update_tensor<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    step: u64,
    cfg: &AdamConfig,
) {
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let pd = param.data_mut();
    let gd = grad.data();
    let md = m.data_mut();
    let vd = v.data_mut();
    for i in 0..pd.len() {
        let g = gd[i].to_f64().unwrap();
        let mi = b1 * md[i].to_f64().unwrap() + (1.0 - b1) * g;
        let vi = b2 * vd[i].to_f64().unwrap() + (1.0 - b2) * g * g;
        md[i] = T::from_f64_lossy(mi);
        vd[i] = T::from_f64_lossy(vi);
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let p = pd[i].to_f64().unwrap();
        let update = cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) + cfg.lr * cfg.weight_decay * p;
        pd[i] = T::from_f64_lossy(p - update);
    }
}

/// Apply one Adam step to every model parameter. `grads` must align with
/// the model's visit order (the leaf order returned by `bind`); a `None`
/// gradient is treated as zero.
pub fn adam_step<T: Scalar>(
    model: &mut CodecModel<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut shapes = Vec::new();
    model.visit(&mut |_, t| shapes.push(t.shape()));
    if grads.len() != shapes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients for {} parameter tensors",
            grads.len(),
            shapes.len()
        )));
    }
    if state.m.is_empty() {
        state.m = shapes.iter().map(|&s| Tensor::zeros(s)).collect();
        state.v = shapes.iter().map(|&s| Tensor::zeros(s)).collect();
    } else if state.m.len() != shapes.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state holds {} tensors, model has {}",
            state.m.len(),
            shapes.len()
        )));
    }
    state.step += 1;
    let step = state.step;
    let mut idx = 0usize;
    let mut bad: Option<Error> = None;
    model.visit_mut(&mut |name, param| {
        if bad.is_some() {
            return;
        }
        let zero;
        let grad = match &grads[idx] {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(param.shape());
                &zero
            }
        };
        if grad.shape() != param.shape() {
            bad = Some(Error::InvalidArgument(format!(
                "gradient shape {:?} does not match {} {:?}",
                grad.shape(),
                name,
                param.shape()
            )));
            return;
        }
        adam_update_tensor(param, grad, &mut state.m[idx], &mut state.v[idx], step, cfg);
        idx += 1;
    });
    match bad {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub distortion: DistortionKind,
    pub seed: u64,
    /// Emit log rows every this many steps (and always for the final step).
    pub log_every: usize,
}

impl TrainConfig {
    pub fn toy(levels: usize, steps: usize) -> Self {
        Self {
            steps,
            adam: AdamConfig::default(),
            weights: LossWeights::uniform(levels),
            distortion: DistortionKind::L1,
            seed: 0,
            log_every: 1,
        }
    }
}

/// One (step, level) log record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub level: usize,
    pub distortion: f64,
    pub loss: f64,
    /// Raw code rate up to this level; entropy coding can only improve it.
    pub bpp_estimate: f64,
}

/// Train in place over a round-robin of images. Returns the log rows.
pub fn train<T: Scalar>(
    model: &mut CodecModel<T>,
    images: &[crate::bitplane::RgbImage],
    tc: &TrainConfig,
) -> Result<Vec<TrainLogRow>> {
    use rand::SeedableRng;
    if images.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    tc.weights.validate(model.config.branches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut state = AdamState::new();
    let mut log = Vec::new();
    let basic = model.config.basic_bitrate();
    for step in 1..=tc.steps {
        let image = &images[(step - 1) % images.len()];
        let mut g = Graph::new();
        let (vars, leaves) = model.bind(&mut g, true);
        let breakdown =
            scalable_loss(&mut g, &vars, model, image, &tc.weights, tc.distortion, &mut rng)?;
        let loss_value = g.scalar_value(breakdown.loss).to_f64().unwrap();
        let per_level: Vec<f64> = breakdown
            .per_level
            .iter()
            .map(|&d| g.scalar_value(d).to_f64().unwrap())
            .collect();
        if !loss_value.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "loss diverged to {} at step {}",
                loss_value, step
            )));
        }
        let grads = g.backward(breakdown.loss)?;
        let grad_list: Vec<Option<Tensor<T>>> =
            leaves.iter().map(|&v| grads.get(v).cloned()).collect();
        adam_step(model, &grad_list, &mut state, &tc.adam)?;
        if step % tc.log_every == 0 || step == tc.steps {
            for (l, &d) in per_level.iter().enumerate() {
                log.push(TrainLogRow {
                    step,
                    level: l + 1,
                    distortion: d,
                    loss: loss_value,
                    bpp_estimate: basic * (l + 1) as f64,
                });
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, SweepDirection};
    use crate::synth::{render, Fixture};
    use rand::SeedableRng;

    fn toy_config(branches: usize) -> CodecConfig {
        CodecConfig {
            branches,
            channels: [4, 4, 4, 4],
            binary_channels: 4,
            se_reduction: 2,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut p = Tensor::new([1, 1, 1, 1], vec![1.0f64]).unwrap();
        let grad = Tensor::new([1, 1, 1, 1], vec![0.5f64]).unwrap();
        let mut m = Tensor::zeros([1, 1, 1, 1]);
        let mut v = Tensor::zeros([1, 1, 1, 1]);
        adam_update_tensor(&mut p, &grad, &mut m, &mut v, 1, &cfg);
        // m = 0.05, v = 2.5e-4; bias-corrected: m_hat = 0.5, v_hat = 0.25
        assert!((m.data()[0] - 0.05).abs() < 1e-12);
        assert!((v.data()[0] - 2.5e-4).abs() < 1e-12);
        let expect = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-12);

        // decoupled decay subtracts lr * wd * p on top
        let cfg_wd = AdamConfig { weight_decay: 0.01, ..cfg };
        let mut p2 = Tensor::new([1, 1, 1, 1], vec![1.0f64]).unwrap();
        let mut m2 = Tensor::zeros([1, 1, 1, 1]);
        let mut v2 = Tensor::zeros([1, 1, 1, 1]);
        adam_update_tensor(&mut p2, &grad, &mut m2, &mut v2, 1, &cfg_wd);
        assert!((p2.data()[0] - (expect - 0.1 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn adam_with_zero_gradient_and_no_decay_is_a_no_op() {
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut p = Tensor::new([1, 1, 1, 2], vec![0.7f64, -1.3]).unwrap();
        let before = p.clone();
        let grad = Tensor::zeros([1, 1, 1, 2]);
        let mut m = Tensor::zeros([1, 1, 1, 2]);
        let mut v = Tensor::zeros([1, 1, 1, 2]);
        for step in 1..=5 {
            adam_update_tensor(&mut p, &grad, &mut m, &mut v, step, &cfg);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let cfg = AdamConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut w = Tensor::new([1, 1, 1, 1], vec![0.0f64]).unwrap();
        let mut m = Tensor::zeros([1, 1, 1, 1]);
        let mut v = Tensor::zeros([1, 1, 1, 1]);
        for step in 1..=2000 {
            let grad = w.map(|x| 2.0 * (x - 3.0));
            adam_update_tensor(&mut w, &grad, &mut m, &mut v, step, &cfg);
        }
        assert!((w.data()[0] - 3.0).abs() < 1e-3, "w = {}", w.data()[0]);
    }

    #[test]
    fn loss_matches_manual_assembly_for_one_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model: CodecModel<f32> = CodecModel::init(toy_config(1), &mut rng).unwrap();
        let img = render(Fixture::Plasma, 16, 16);
        let mut g = Graph::new();
        let (vars, _) = model.bind(&mut g, false);
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        let got = scalable_loss(
            &mut g,
            &vars,
            &model,
            &img,
            &LossWeights::uniform(1),
            DistortionKind::L1,
            &mut no_rng,
        )
        .unwrap();
        let got_loss = g.scalar_value(got.loss);

        // manual: encode, decode, L1 against the (unpadded) image
        let enc = crate::codec::encode(&model, &img, &[true], &mut rng).unwrap();
        let levels = crate::codec::decode_residuals(&model, &enc, 1).unwrap();
        let target = img.to_tensor::<f32>();
        let manual: f32 = levels.cumulative[0]
            .zip_map(&target, |a, b| (a - b).abs())
            .unwrap()
            .data()
            .iter()
            .sum::<f32>()
            / target.numel() as f32;
        assert!(
            (got_loss - manual).abs() < 1e-6,
            "{} vs {}",
            got_loss,
            manual
        );
        assert_eq!(got.per_level.len(), 1);
    }

    #[test]
    fn loss_matches_manual_assembly_for_two_weighted_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let model: CodecModel<f32> = CodecModel::init(toy_config(2), &mut rng).unwrap();
        let img = render(Fixture::Disks, 16, 16);
        let weights = LossWeights(vec![0.25, 2.0]);
        let mut g = Graph::new();
        let (vars, _) = model.bind(&mut g, false);
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        let got = scalable_loss(
            &mut g,
            &vars,
            &model,
            &img,
            &weights,
            DistortionKind::Mse,
            &mut no_rng,
        )
        .unwrap();
        let got_loss = g.scalar_value(got.loss) as f64;

        let enc = crate::codec::encode(&model, &img, &[true, true], &mut rng).unwrap();
        let levels = crate::codec::decode_residuals(&model, &enc, 2).unwrap();
        let target = img.to_tensor::<f32>();
        // accumulate in f32, in data order, to mirror the graph's reduction
        let mse = |t: &Tensor<f32>| {
            t.zip_map(&target, |a, b| (a - b) * (a - b))
                .unwrap()
                .data()
                .iter()
                .sum::<f32>()
                / target.numel() as f32
        };
        let manual = 0.25f32 * mse(&levels.cumulative[0]) + 2.0f32 * mse(&levels.cumulative[1]);
        assert!(
            (got_loss - manual as f64).abs() < 1e-6,
            "{} vs {}",
            got_loss,
            manual
        );
        // per-level distortions match their pieces
        assert!((g.scalar_value(got.per_level[0]) - mse(&levels.cumulative[0])).abs() < 1e-6);
        assert!((g.scalar_value(got.per_level[1]) - mse(&levels.cumulative[1])).abs() < 1e-6);
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            let mut model: CodecModel<f32> = CodecModel::init(toy_config(2), &mut rng).unwrap();
            let images = vec![render(Fixture::Gradient, 16, 16), render(Fixture::Checker, 16, 16)];
            let tc = TrainConfig {
                steps: 4,
                adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
                ..TrainConfig::toy(2, 4)
            };
            let log = train(&mut model, &images, &tc).unwrap();
            let mut params = Vec::new();
            model.visit(&mut |_, t| params.extend_from_slice(t.data()));
            (log, params)
        };
        let (log_a, par_a) = run();
        let (log_b, par_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(par_a, par_b);
        assert_eq!(log_a.len(), 4 * 2); // one row per step per level
        assert!(log_a.iter().all(|r| r.loss.is_finite() && r.distortion.is_finite()));
        assert!((log_a[0].bpp_estimate - 4.0 / 256.0).abs() < 1e-12);
        assert!((log_a[1].bpp_estimate - 8.0 / 256.0).abs() < 1e-12);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut model: CodecModel<f32> = CodecModel::init(toy_config(1), &mut rng).unwrap();
        assert!(train(&mut model, &[], &TrainConfig::toy(1, 1)).is_err());
    }

    #[test]
    fn level_one_loss_leaves_downstream_branches_untouched_in_one_directional_models() {
        // with strictly forward sweeps, branch 2 feeds nothing that level 1
        // sees, so a loss on level 1 alone must give branch-2-only
        // parameters zero gradient
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let config = CodecConfig {
            encoder_direction: SweepDirection::Down,
            decoder_direction: SweepDirection::Down,
            se_enabled: false,
            ..toy_config(2)
        };
        let model: CodecModel<f32> = CodecModel::init(config, &mut rng).unwrap();
        let img = render(Fixture::Stripes, 16, 16);
        let mut g = Graph::new();
        let (vars, leaves) = model.bind(&mut g, true);
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        let breakdown = scalable_loss(
            &mut g,
            &vars,
            &model,
            &img,
            &LossWeights(vec![1.0, 0.0]),
            DistortionKind::L1,
            &mut no_rng,
        )
        .unwrap();
        let grads = g.backward(breakdown.loss).unwrap();
        let mut names = Vec::new();
        model.visit(&mut |name, _| names.push(name.to_string()));
        let mut saw_live_branch1 = false;
        for (name, &leaf) in names.iter().zip(&leaves) {
            let norm: f64 = grads
                .get(leaf)
                .map(|t| t.data().iter().map(|&v| (v as f64).abs()).sum())
                .unwrap_or(0.0);
            if name.contains("branch1") {
                assert_eq!(norm, 0.0, "{} should be dead under a level-1 loss", name);
            }
            if name.contains("branch0") && norm > 0.0 {
                saw_live_branch1 = true;
            }
        }
        assert!(saw_live_branch1);
    }

    /// The first unit of each sweep direction sees a zero neighbour state,
    /// so (for unshared gates) its hidden-state convolutions and its whole
    /// forget gate provably get zero gradient; those tensors never affect
    /// the output either. This names that set.
    fn structurally_dead(name: &str, branches: usize) -> bool {
        let fwd_boundary = name.contains("branch0.gates.fwd");
        let bwd_boundary = name.contains(&format!("branch{}.gates.bwd", branches - 1));
        (fwd_boundary || bwd_boundary) && (name.ends_with(".w_h") || name.contains(".f."))
    }

    #[test]
    fn gradients_reach_exactly_the_parameters_that_can_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let model: CodecModel<f32> = CodecModel::init(toy_config(3), &mut rng).unwrap();
        let img = render(Fixture::Walk, 16, 16);
        let mut g = Graph::new();
        let (vars, leaves) = model.bind(&mut g, true);
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        let breakdown = scalable_loss(
            &mut g,
            &vars,
            &model,
            &img,
            &LossWeights::uniform(3),
            DistortionKind::L1,
            &mut no_rng,
        )
        .unwrap();
        let grads = g.backward(breakdown.loss).unwrap();
        let mut names = Vec::new();
        model.visit(&mut |name, _| names.push(name.to_string()));
        let mut expected_dead = 0;
        for (name, &leaf) in names.iter().zip(&leaves) {
            let norm = grads
                .get(leaf)
                .map(|t| {
                    assert!(
                        t.data().iter().all(|v| v.is_finite()),
                        "{} has non-finite gradient",
                        name
                    );
                    t.data().iter().map(|&v| (v as f64).abs()).sum::<f64>()
                })
                .unwrap_or(0.0);
            if structurally_dead(name, 3) {
                assert_eq!(norm, 0.0, "{} should be dead at the sweep boundary", name);
                expected_dead += 1;
            } else if norm == 0.0 {
                // a freshly initialized SE squeeze can land in a dead-ReLU
                // region; anything else dead is a routing bug
                assert!(name.contains(".se."), "{} received no gradient", name);
            }
        }
        // 6 layers x 2 boundary units x 6 tensors each
        assert_eq!(expected_dead, 72);
    }

    #[test]
    fn shared_gates_revive_the_boundary_parameters() {
        // interior branches reuse the shared tensors, so even the tensors
        // that are dead at a sweep boundary accumulate gradient
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let config = CodecConfig {
            sharing: crate::codec::GateSharing::Shared,
            se_enabled: false,
            ..toy_config(3)
        };
        let model: CodecModel<f32> = CodecModel::init(config, &mut rng).unwrap();
        let img = render(Fixture::Plasma, 16, 16);
        let mut g = Graph::new();
        let (vars, leaves) = model.bind(&mut g, true);
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        let breakdown = scalable_loss(
            &mut g,
            &vars,
            &model,
            &img,
            &LossWeights::uniform(3),
            DistortionKind::L1,
            &mut no_rng,
        )
        .unwrap();
        let grads = g.backward(breakdown.loss).unwrap();
        let mut names = Vec::new();
        model.visit(&mut |name, _| names.push(name.to_string()));
        for (name, &leaf) in names.iter().zip(&leaves) {
            let norm = grads
                .get(leaf)
                .map(|t| t.data().iter().map(|&v| (v as f64).abs()).sum::<f64>())
                .unwrap_or(0.0);
            assert!(norm > 0.0, "{} received no gradient", name);
        }
    }

    #[test]
    fn a_few_steps_of_training_reduce_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut model: CodecModel<f32> = CodecModel::init(toy_config(2), &mut rng).unwrap();
        let images = vec![render(Fixture::Disks, 16, 16)];
        let tc = TrainConfig {
            steps: 60,
            adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            ..TrainConfig::toy(2, 60)
        };
        let log = train(&mut model, &images, &tc).unwrap();
        let first = log.iter().find(|r| r.level == 1).unwrap().loss;
        let last = log.last().unwrap().loss;
        assert!(
            last < 0.8 * first,
            "loss did not move: {} -> {}",
            first,
            last
        );
    }

    #[test]
    fn adam_step_rejects_misaligned_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let mut model: CodecModel<f32> = CodecModel::init(toy_config(1), &mut rng).unwrap();
        let mut state = AdamState::new();
        let err = adam_step(&mut model, &[None, None], &mut state, &AdamConfig::default());
        assert!(err.is_err());
    }
}
