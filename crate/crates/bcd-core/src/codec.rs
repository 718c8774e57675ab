//! Full encoder/decoder assembly.
//!
//! Encoding: per significance level, the three bit planes of R, G, B (values
//! mapped to -1/+1) pass through a stride-2 convolution, three downsampling
//! gated layers, and a binarizing quantizer, giving each branch a code at
//! 1/16 resolution. Decoding runs every branch back up through entry
//! convolution, three upsampling gated layers, a pixel-shuffle head, and an
//! exit convolution to a signed residual image Y; the level-l reconstruction
//! is clamp(Y1 + ... + Yl). Inactive or unavailable branches contribute
//! all-zero codes but still traverse the decoder, because the sweeps mix
//! state across branches.

use crate::bitplane::{BitPlanes, RgbImage, BIT_DEPTH};
use crate::error::{Error, Result};
use crate::gates::{
    apply_layer, GateParams, GateSet, GateStorage, LayerParams, LayerVars, Resample,
};
use crate::graph::{Graph, Var};
use crate::layers::{uniform_fan_in, GdnParams, SeParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use std::io::{Read, Write};
use std::path::Path;

/// Stride-2 stages between image and code resolution (first convolution
/// plus three gated layers), fixed by the architecture.
pub const STRIDE_STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepDirection {
    Bidirectional,
    /// Forward sweep only: state flows from more to less significant branches.
    Down,
    /// Backward sweep only.
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateSharing {
    Unshared,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    BitPlanes,
    /// One shared convolution over the raw image, sliced channel-wise into
    /// per-branch groups of three.
    ConvSlice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Gdn,
    LeakyRelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinarizerMode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    /// Branch count N; branch l codes significance level l.
    pub branches: usize,
    /// Feature widths: first-conv output, then each gated layer's output.
    pub channels: [usize; 4],
    /// Binary channels B per branch code.
    pub binary_channels: usize,
    pub kernel_size: usize,
    pub se_reduction: usize,
    pub encoder_direction: SweepDirection,
    pub decoder_direction: SweepDirection,
    pub sharing: GateSharing,
    pub input_mode: InputMode,
    pub se_enabled: bool,
    pub normalization: Normalization,
    pub binarizer: BinarizerMode,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            branches: 8,
            channels: [32, 32, 32, 32],
            binary_channels: 8,
            kernel_size: 3,
            se_reduction: 4,
            encoder_direction: SweepDirection::Bidirectional,
            decoder_direction: SweepDirection::Bidirectional,
            sharing: GateSharing::Unshared,
            input_mode: InputMode::BitPlanes,
            se_enabled: true,
            normalization: Normalization::Gdn,
            binarizer: BinarizerMode::Deterministic,
        }
    }
}

impl CodecConfig {
    /// Total downsampling factor s between image and code resolution.
    pub fn spatial_factor(&self) -> usize {
        1 << STRIDE_STAGES
    }

    /// Raw bits per pixel contributed by one active branch.
    pub fn basic_bitrate(&self) -> f64 {
        basic_bitrate(self.binary_channels, self.spatial_factor())
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 || self.branches > BIT_DEPTH {
            return Err(Error::InvalidConfig(format!(
                "branch count {} outside 1..={}",
                self.branches, BIT_DEPTH
            )));
        }
        if self.binary_channels == 0 {
            return Err(Error::InvalidConfig("binary channel count is zero".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig("zero-width feature layer".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Raw pre-entropy-coding rate: B binary channels at 1/s^2 of the pixels.
pub fn basic_bitrate(binary_channels: usize, spatial_factor: usize) -> f64 {
    binary_channels as f64 / (spatial_factor * spatial_factor) as f64
}

/// Plain convolution weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    fn init<R: Rng>(out_ch: usize, in_ch: usize, k: usize, rng: &mut R) -> Self {
        Self {
            w: uniform_fan_in([out_ch, in_ch, k, k], rng),
            b: Tensor::zeros([1, out_ch, 1, 1]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}

/// Every trainable tensor of the codec.
#[derive(Debug, Clone)]
pub struct CodecModel<T> {
    pub config: CodecConfig,
    /// Shared image convolution for conv-slice input mode.
    pub frontend: Option<ConvParams<T>>,
    /// Per-branch stride-2 first convolution.
    pub first: Vec<ConvParams<T>>,
    pub enc_layers: Vec<LayerParams<T>>,
    /// Per-branch 1x1 quantizer convolution.
    pub quant: Vec<ConvParams<T>>,
    /// Per-branch 1x1 decoder entry convolution.
    pub entry: Vec<ConvParams<T>>,
    pub dec_layers: Vec<LayerParams<T>>,
    /// Per-branch pixel-path convolution (c0 -> 4 c0, then shuffle).
    pub pixel: Vec<ConvParams<T>>,
    /// Per-branch 1x1 exit convolution to 3 channels.
    pub exit: Vec<ConvParams<T>>,
}

fn build_layer<T: Scalar, R: Rng>(
    cfg: &CodecConfig,
    in_ch: usize,
    out_ch: usize,
    direction: SweepDirection,
    resample: Resample,
    rng: &mut R,
) -> Result<LayerParams<T>> {
    let k = cfg.kernel_size;
    let has_fwd = direction != SweepDirection::Up;
    let has_bwd = direction != SweepDirection::Down;
    let mk_gates = |rng: &mut R| GateParams {
        forward: has_fwd.then(|| GateSet::init(in_ch, out_ch, k, resample, rng)),
        backward: has_bwd.then(|| GateSet::init(in_ch, out_ch, k, resample, rng)),
    };
    let gates = match cfg.sharing {
        GateSharing::Unshared => {
            GateStorage::PerBranch((0..cfg.branches).map(|_| mk_gates(rng)).collect())
        }
        GateSharing::Shared => GateStorage::Shared(mk_gates(rng)),
    };
    let y_ch = if has_fwd && has_bwd { 2 * out_ch } else { out_ch };
    let post = (0..cfg.branches)
        .map(|_| {
            let se = if cfg.se_enabled {
                Some(SeParams::init(y_ch, cfg.se_reduction, rng)?)
            } else {
                None
            };
            Ok(crate::gates::BranchPost {
                se,
                fuse_w: uniform_fan_in([out_ch, y_ch, k, k], rng),
                fuse_b: Tensor::zeros([1, out_ch, 1, 1]),
                norm: (cfg.normalization == Normalization::Gdn).then(|| GdnParams::init(out_ch)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerParams { gates, post })
}

impl<T: Scalar> CodecModel<T> {
    /// Fresh model with seeded random weights.
    pub fn init<R: Rng>(config: CodecConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let [c0, c1, c2, c3] = config.channels;
        let n = config.branches;
        let k = config.kernel_size;
        let frontend = match config.input_mode {
            InputMode::BitPlanes => None,
            InputMode::ConvSlice => Some(ConvParams::init(3 * n, 3, k, rng)),
        };
        let first = (0..n).map(|_| ConvParams::init(c0, 3, k, rng)).collect();
        let enc_dims = [(c0, c1), (c1, c2), (c2, c3)];
        let enc_layers = enc_dims
            .iter()
            .map(|&(i, o)| {
                build_layer(&config, i, o, config.encoder_direction, Resample::Down, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let quant = (0..n)
            .map(|_| ConvParams::init(config.binary_channels, c3, 1, rng))
            .collect();
        let entry = (0..n)
            .map(|_| ConvParams::init(c3, config.binary_channels, 1, rng))
            .collect();
        let dec_dims = [(c3, c2), (c2, c1), (c1, c0)];
        let dec_layers = dec_dims
            .iter()
            .map(|&(i, o)| {
                build_layer(&config, i, o, config.decoder_direction, Resample::Up, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let pixel = (0..n).map(|_| ConvParams::init(4 * c0, c0, k, rng)).collect();
        let exit = (0..n).map(|_| ConvParams::init(3, c0, 1, rng)).collect();
        Ok(Self {
            config,
            frontend,
            first,
            enc_layers,
            quant,
            entry,
            dec_layers,
            pixel,
            exit,
        })
    }

    /// Structure-only model (all parameters zero); used by deserialization.
    pub fn zeroed(config: CodecConfig) -> Result<Self> {
        // Build through init with a throwaway rng, then blank every tensor;
        // keeps the structural logic in one place.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::init(config, &mut rng)?;
        model.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = T::zero();
            }
        });
        Ok(model)
    }

    /// Visit every parameter tensor in the canonical order used by
    /// serialization and the optimizer. Shared gate weights appear once.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor<T>)) {
        if let Some(fr) = &self.frontend {
            fr.visit("frontend", f);
        }
        for (l, c) in self.first.iter().enumerate() {
            c.visit(&format!("enc.first.branch{l}"), f);
        }
        for (i, layer) in self.enc_layers.iter().enumerate() {
            layer.visit(&format!("enc.layer{i}"), f);
        }
        for (l, c) in self.quant.iter().enumerate() {
            c.visit(&format!("quant.branch{l}"), f);
        }
        for (l, c) in self.entry.iter().enumerate() {
            c.visit(&format!("dec.entry.branch{l}"), f);
        }
        for (i, layer) in self.dec_layers.iter().enumerate() {
            layer.visit(&format!("dec.layer{i}"), f);
        }
        for (l, c) in self.pixel.iter().enumerate() {
            c.visit(&format!("dec.pixel.branch{l}"), f);
        }
        for (l, c) in self.exit.iter().enumerate() {
            c.visit(&format!("dec.exit.branch{l}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<T>)) {
        if let Some(fr) = &mut self.frontend {
            fr.visit_mut("frontend", f);
        }
        for (l, c) in self.first.iter_mut().enumerate() {
            c.visit_mut(&format!("enc.first.branch{l}"), f);
        }
        for (i, layer) in self.enc_layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("enc.layer{i}"), f);
        }
        for (l, c) in self.quant.iter_mut().enumerate() {
            c.visit_mut(&format!("quant.branch{l}"), f);
        }
        for (l, c) in self.entry.iter_mut().enumerate() {
            c.visit_mut(&format!("dec.entry.branch{l}"), f);
        }
        for (i, layer) in self.dec_layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("dec.layer{i}"), f);
        }
        for (l, c) in self.pixel.iter_mut().enumerate() {
            c.visit_mut(&format!("dec.pixel.branch{l}"), f);
        }
        for (l, c) in self.exit.iter_mut().enumerate() {
            c.visit_mut(&format!("dec.exit.branch{l}"), f);
        }
    }

    /// (name, element count) for every parameter tensor.
    pub fn census(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.numel())));
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Bind all parameters onto a graph. Returns the bound structure plus
    /// the leaf vars in visit order (for optimizer/gradient pairing).
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> (CodecVars, Vec<Var>) {
        let mut leaves = Vec::new();
        let bind_conv = |g: &mut Graph<T>, c: &ConvParams<T>| {
            let w = g.leaf(c.w.clone(), trainable);
            let b = g.leaf(c.b.clone(), trainable);
            ConvVars { w, b }
        };
        let frontend = self.frontend.as_ref().map(|c| bind_conv(g, c));
        let first: Vec<ConvVars> = self.first.iter().map(|c| bind_conv(g, c)).collect();
        let enc_layers: Vec<LayerVars> = self
            .enc_layers
            .iter()
            .map(|l| crate::gates::bind_layer(g, l, trainable))
            .collect();
        let quant: Vec<ConvVars> = self.quant.iter().map(|c| bind_conv(g, c)).collect();
        let entry: Vec<ConvVars> = self.entry.iter().map(|c| bind_conv(g, c)).collect();
        let dec_layers: Vec<LayerVars> = self
            .dec_layers
            .iter()
            .map(|l| crate::gates::bind_layer(g, l, trainable))
            .collect();
        let pixel: Vec<ConvVars> = self.pixel.iter().map(|c| bind_conv(g, c)).collect();
        let exit: Vec<ConvVars> = self.exit.iter().map(|c| bind_conv(g, c)).collect();

        let push_conv = |leaves: &mut Vec<Var>, c: &ConvVars| {
            leaves.push(c.w);
            leaves.push(c.b);
        };
        if let Some(c) = &frontend {
            push_conv(&mut leaves, c);
        }
        first.iter().for_each(|c| push_conv(&mut leaves, c));
        enc_layers.iter().for_each(|l| l.collect(&mut leaves));
        quant.iter().for_each(|c| push_conv(&mut leaves, c));
        entry.iter().for_each(|c| push_conv(&mut leaves, c));
        dec_layers.iter().for_each(|l| l.collect(&mut leaves));
        pixel.iter().for_each(|c| push_conv(&mut leaves, c));
        exit.iter().for_each(|c| push_conv(&mut leaves, c));

        (
            CodecVars {
                frontend,
                first,
                enc_layers,
                quant,
                entry,
                dec_layers,
                pixel,
                exit,
            },
            leaves,
        )
    }
}

/// The model bound onto a graph.
#[derive(Debug, Clone)]
pub struct CodecVars {
    pub frontend: Option<ConvVars>,
    pub first: Vec<ConvVars>,
    pub enc_layers: Vec<LayerVars>,
    pub quant: Vec<ConvVars>,
    pub entry: Vec<ConvVars>,
    pub dec_layers: Vec<LayerVars>,
    pub pixel: Vec<ConvVars>,
    pub exit: Vec<ConvVars>,
}

/// Per-branch binary codes plus switch state.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchCodes<T> {
    pub codes: Vec<Tensor<T>>,
    pub active: Vec<bool>,
}

impl<T: Scalar> BranchCodes<T> {
    /// Active codes must be strictly -1/+1; inactive all zero.
    pub fn validate(&self) -> Result<()> {
        if self.codes.len() != self.active.len() {
            return Err(Error::InvalidArgument(format!(
                "{} code tensors but {} switch flags",
                self.codes.len(),
                self.active.len()
            )));
        }
        for (l, (code, &on)) in self.codes.iter().zip(&self.active).enumerate() {
            for &v in code.data() {
                let ok = if on {
                    v == T::one() || v == -T::one()
                } else {
                    v == T::zero()
                };
                if !ok {
                    return Err(Error::InvalidArgument(format!(
                        "branch {} carries value {} ({} branch)",
                        l + 1,
                        v,
                        if on { "active" } else { "inactive" }
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Codes plus the geometry needed to reverse padding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage<T> {
    pub codes: BranchCodes<T>,
    pub height: usize,
    pub width: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

/// One decoded quality level.
#[derive(Debug, Clone)]
pub struct LevelReconstruction<T> {
    pub level: usize,
    /// Clamped to [0,1] and cropped to the original extent, (1, 3, h, w).
    pub tensor: Tensor<T>,
    pub image: RgbImage,
}

/// Mirror-pad bottom and right (edge pixel not repeated) so both extents
/// become multiples of `factor`.
pub fn pad_reflect(img: &RgbImage, factor: usize) -> Result<(RgbImage, (usize, usize))> {
    let (h, w) = (img.height(), img.width());
    let pad_h = (factor - h % factor) % factor;
    let pad_w = (factor - w % factor) % factor;
    if pad_h >= h || pad_w >= w {
        return Err(Error::UnpaddableImage {
            height: h,
            width: w,
            factor,
            pad_h,
            pad_w,
        });
    }
    if pad_h == 0 && pad_w == 0 {
        return Ok((img.clone(), (0, 0)));
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
    let mut out = RgbImage::filled(h + pad_h, w + pad_w, 0);
    for y in 0..h + pad_h {
        let sy = reflect(y, h);
        for x in 0..w + pad_w {
            let sx = reflect(x, w);
            for c in 0..3 {
                out.set(y, x, c, img.get(sy, sx, c));
            }
        }
    }
    Ok((out, (pad_h, pad_w)))
}

/// Top-left crop of a (1, c, H, W) tensor.
pub fn crop_tensor<T: Scalar>(t: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let [b, c, _, _] = t.shape();
    debug_assert_eq!(b, 1);
    Tensor::from_fn([1, c, height, width], |_, ci, y, x| t.at(0, ci, y, x))
}

/// Values clamped into [0, 1].
pub fn clamp01<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()).min(T::one()))
}

/// Per-branch inputs on the tape, shaped (1, 3, h, w) each.
pub fn branch_inputs<T: Scalar>(
    g: &mut Graph<T>,
    vars: &CodecVars,
    config: &CodecConfig,
    image: &RgbImage,
) -> Result<Vec<Var>> {
    match config.input_mode {
        InputMode::BitPlanes => {
            let planes = BitPlanes::decompose(image, config.branches)?;
            (1..=config.branches)
                .map(|l| {
                    let t = planes.level_tensor::<T>(l)?;
                    Ok(g.constant(t))
                })
                .collect()
        }
        InputMode::ConvSlice => {
            let fr = vars
                .frontend
                .ok_or_else(|| Error::InvalidConfig("conv-slice mode without frontend".into()))?;
            let img = g.constant(image.to_tensor::<T>());
            conv_slice_frontend(g, img, fr, config.branches)
        }
    }
}

/// Shared convolution over the image, sliced into equal channel groups.
pub fn conv_slice_frontend<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    frontend: ConvVars,
    branches: usize,
) -> Result<Vec<Var>> {
    let k = g.value(frontend.w).shape()[2];
    let y = g.conv2d(image, frontend.w, Some(frontend.b), 1, k / 2)?;
    let total = g.value(y).shape()[1];
    if total % branches != 0 {
        return Err(Error::InvalidConfig(format!(
            "{} frontend channels not divisible into {} branches",
            total, branches
        )));
    }
    let group = total / branches;
    (0..branches)
        .map(|l| g.slice_channels(y, l * group, group))
        .collect()
}

/// Encoder features at code resolution, one per branch.
pub fn encoder_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &CodecVars,
    config: &CodecConfig,
    inputs: &[Var],
) -> Result<Vec<Var>> {
    if inputs.len() != config.branches {
        return Err(Error::InvalidArgument(format!(
            "{} branch inputs for {} branches",
            inputs.len(),
            config.branches
        )));
    }
    let k = config.kernel_size;
    let mut feats: Vec<Var> = inputs
        .iter()
        .zip(&vars.first)
        .map(|(&x, c)| g.conv2d(x, c.w, Some(c.b), 2, k / 2))
        .collect::<Result<_>>()?;
    for layer in &vars.enc_layers {
        feats = apply_layer(g, &feats, layer, Resample::Down, false)?;
    }
    Ok(feats)
}

/// Quantizer: 1x1 convolution, tanh, binarize. Gradient passes straight
/// through the binarizer.
pub fn quantize<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    feature: Var,
    conv: ConvVars,
    mode: BinarizerMode,
    rng: &mut R,
) -> Result<Var> {
    let z0 = g.conv2d(feature, conv.w, Some(conv.b), 1, 0)?;
    let z = g.tanh(z0);
    Ok(match mode {
        BinarizerMode::Deterministic => g.binarize_deterministic(z),
        BinarizerMode::Stochastic => g.binarize_stochastic(z, rng),
    })
}

/// Per-branch residual images Y at full (padded) resolution.
pub fn decoder_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &CodecVars,
    config: &CodecConfig,
    codes: &[Var],
) -> Result<Vec<Var>> {
    if codes.len() != config.branches {
        return Err(Error::InvalidArgument(format!(
            "{} code tensors for {} branches",
            codes.len(),
            config.branches
        )));
    }
    let k = config.kernel_size;
    let mut feats: Vec<Var> = codes
        .iter()
        .zip(&vars.entry)
        .map(|(&c, conv)| g.conv2d(c, conv.w, Some(conv.b), 1, 0))
        .collect::<Result<_>>()?;
    for layer in &vars.dec_layers {
        feats = apply_layer(g, &feats, layer, Resample::Up, true)?;
    }
    feats
        .iter()
        .zip(&vars.pixel)
        .zip(&vars.exit)
        .map(|((&f, pc), ec)| {
            let up = g.conv2d(f, pc.w, Some(pc.b), 1, k / 2)?;
            let full = g.pixel_shuffle(up, 2)?;
            g.conv2d(full, ec.w, Some(ec.b), 1, 0)
        })
        .collect()
}

/// Encode an image: pad, decompose, run the encoder, binarize. Branches
/// switched off by `mask` are zero-filled. The rng is consulted only in
/// stochastic binarizer mode.
pub fn encode<T: Scalar, R: Rng>(
    model: &CodecModel<T>,
    image: &RgbImage,
    mask: &[bool],
    rng: &mut R,
) -> Result<EncodedImage<T>> {
    let config = &model.config;
    if mask.len() != config.branches {
        return Err(Error::InvalidArgument(format!(
            "switch mask has {} entries for {} branches",
            mask.len(),
            config.branches
        )));
    }
    let (padded, (pad_h, pad_w)) = pad_reflect(image, config.spatial_factor())?;
    let mut g = Graph::new();
    let (vars, _) = model.bind(&mut g, false);
    let inputs = branch_inputs(&mut g, &vars, config, &padded)?;
    let feats = encoder_graph(&mut g, &vars, config, &inputs)?;
    let codes = feats
        .iter()
        .zip(&vars.quant)
        .zip(mask)
        .map(|((&f, qc), &on)| {
            if on {
                let q = quantize(&mut g, f, *qc, config.binarizer, rng)?;
                Ok(g.value(q).clone())
            } else {
                let shape = {
                    let [b, _, h, w] = g.value(f).shape();
                    [b, config.binary_channels, h, w]
                };
                Ok(Tensor::zeros(shape))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedImage {
        codes: BranchCodes { codes, active: mask.to_vec() },
        height: image.height(),
        width: image.width(),
        pad_h,
        pad_w,
    })
}

/// Residuals and unclamped cumulative sums for levels 1..=level, with codes
/// of branches above `level` zero-filled.
pub struct DecodedLevels<T> {
    pub residuals: Vec<Tensor<T>>,
    pub cumulative: Vec<Tensor<T>>,
}

pub fn decode_residuals<T: Scalar>(
    model: &CodecModel<T>,
    enc: &EncodedImage<T>,
    level: usize,
) -> Result<DecodedLevels<T>> {
    let config = &model.config;
    if level == 0 || level > config.branches {
        return Err(Error::InvalidArgument(format!(
            "level {} outside 1..={}",
            level, config.branches
        )));
    }
    let mut g = Graph::new();
    let (vars, _) = model.bind(&mut g, false);
    let code_vars: Vec<Var> = enc
        .codes
        .codes
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let use_zero = i + 1 > level || !enc.codes.active[i];
            let value = if use_zero { Tensor::zeros(t.shape()) } else { t.clone() };
            g.constant(value)
        })
        .collect();
    let ys = decoder_graph(&mut g, &vars, config, &code_vars)?;
    let mut residuals = Vec::with_capacity(level);
    let mut cumulative = Vec::with_capacity(level);
    let mut running: Option<Tensor<T>> = None;
    for &y in ys.iter().take(level) {
        let yt = g.value(y).clone();
        let next = match &running {
            Some(prev) => prev.zip_map(&yt, |a, b| a + b)?,
            None => yt.clone(),
        };
        residuals.push(yt);
        cumulative.push(next.clone());
        running = Some(next);
    }
    Ok(DecodedLevels { residuals, cumulative })
}

/// Decode to the level-l image: clamp the cumulative sum, crop the padding.
pub fn decode<T: Scalar>(
    model: &CodecModel<T>,
    enc: &EncodedImage<T>,
    level: usize,
) -> Result<LevelReconstruction<T>> {
    let levels = decode_residuals(model, enc, level)?;
    let clamped = clamp01(&levels.cumulative[level - 1]);
    let cropped = crop_tensor(&clamped, enc.height, enc.width);
    let image = RgbImage::from_tensor(&cropped)?;
    Ok(LevelReconstruction {
        level,
        tensor: cropped,
        image,
    })
}

// --- model serialization ---

const MODEL_MAGIC: &[u8; 4] = b"BCDM";
const MODEL_VERSION: u8 = 1;

fn dir_code(d: SweepDirection) -> u8 {
    match d {
        SweepDirection::Bidirectional => 0,
        SweepDirection::Down => 1,
        SweepDirection::Up => 2,
    }
}

fn dir_from(v: u8) -> Result<SweepDirection> {
    Ok(match v {
        0 => SweepDirection::Bidirectional,
        1 => SweepDirection::Down,
        2 => SweepDirection::Up,
        _ => return Err(Error::Format(format!("unknown direction code {}", v))),
    })
}

/// Write the model: magic, version, config block, then every parameter as
/// little-endian f32 in visit order.
pub fn write_model<T: Scalar>(w: &mut impl Write, model: &CodecModel<T>) -> Result<()> {
    let cfg = &model.config;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[MODEL_VERSION])?;
    w.write_all(&[
        cfg.branches as u8,
        cfg.binary_channels as u8,
        cfg.kernel_size as u8,
        cfg.se_reduction as u8,
        dir_code(cfg.encoder_direction),
        dir_code(cfg.decoder_direction),
        (cfg.sharing == GateSharing::Shared) as u8,
        (cfg.input_mode == InputMode::ConvSlice) as u8,
        cfg.se_enabled as u8,
        (cfg.normalization == Normalization::LeakyRelu) as u8,
        (cfg.binarizer == BinarizerMode::Stochastic) as u8,
    ])?;
    for c in cfg.channels {
        let c16 = u16::try_from(c)
            .map_err(|_| Error::InvalidConfig(format!("channel width {} exceeds u16", c)))?;
        w.write_all(&c16.to_le_bytes())?;
    }
    let count = model.parameter_count() as u64;
    w.write_all(&count.to_le_bytes())?;
    let mut io_err: Option<std::io::Error> = None;
    model.visit(&mut |_, t| {
        if io_err.is_some() {
            return;
        }
        for &v in t.data() {
            let bytes = (v.to_f64().unwrap() as f32).to_le_bytes();
            if let Err(e) = w.write_all(&bytes) {
                io_err = Some(e);
                return;
            }
        }
    });
    match io_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub fn read_model<T: Scalar>(r: &mut impl Read) -> Result<CodecModel<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("model file shorter than its magic".into()))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "bad model magic {:?}, expected {:?}",
            magic, MODEL_MAGIC
        )));
    }
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("truncated model header".into()))?;
    if head[0] != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {}",
            head[0]
        )));
    }
    let mut chan = [0u8; 8];
    r.read_exact(&mut chan)
        .map_err(|_| Error::Format("truncated channel block".into()))?;
    let channels = [
        u16::from_le_bytes([chan[0], chan[1]]) as usize,
        u16::from_le_bytes([chan[2], chan[3]]) as usize,
        u16::from_le_bytes([chan[4], chan[5]]) as usize,
        u16::from_le_bytes([chan[6], chan[7]]) as usize,
    ];
    let config = CodecConfig {
        branches: head[1] as usize,
        channels,
        binary_channels: head[2] as usize,
        kernel_size: head[3] as usize,
        se_reduction: head[4] as usize,
        encoder_direction: dir_from(head[5])?,
        decoder_direction: dir_from(head[6])?,
        sharing: if head[7] != 0 { GateSharing::Shared } else { GateSharing::Unshared },
        input_mode: if head[8] != 0 { InputMode::ConvSlice } else { InputMode::BitPlanes },
        se_enabled: head[9] != 0,
        normalization: if head[10] != 0 { Normalization::LeakyRelu } else { Normalization::Gdn },
        binarizer: if head[11] != 0 { BinarizerMode::Stochastic } else { BinarizerMode::Deterministic },
    };
    let mut count_bytes = [0u8; 8];
    r.read_exact(&mut count_bytes)
        .map_err(|_| Error::Format("truncated parameter count".into()))?;
    let count = u64::from_le_bytes(count_bytes) as usize;

    let mut model = CodecModel::<T>::zeroed(config)?;
    if model.parameter_count() != count {
        return Err(Error::Format(format!(
            "model declares {} parameters, structure holds {}",
            count,
            model.parameter_count()
        )));
    }
    let mut payload = vec![0u8; count * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Format("model parameter block truncated".into()))?;
    let mut offset = 0usize;
    model.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            let raw = f32::from_le_bytes([
                payload[offset],
                payload[offset + 1],
                payload[offset + 2],
                payload[offset + 3],
            ]);
            *v = T::from_f64_lossy(raw as f64);
            offset += 4;
        }
    });
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after model payload".into()));
    }
    Ok(model)
}

pub fn write_model_file<T: Scalar>(path: impl AsRef<Path>, model: &CodecModel<T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut f, model)
}

pub fn read_model_file<T: Scalar>(path: impl AsRef<Path>) -> Result<CodecModel<T>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_model(&mut f)
}
