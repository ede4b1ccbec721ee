//! Network assembly: SplitMixer variants, the ConvMixer baseline and the
//! ablation toggles, plus feature-map dumps.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::{GradStore, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Axis;
use crate::mixing::{fraction_to_f64, Allocation, ChannelMixer, Fraction, MixVariant, MixerSpec};
use crate::nn::{self, ActivationKind, ConvParams, Mode, NormKind, NormState};
use crate::tensor::{Element, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Split(MixVariant),
    ConvMixer,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Split(v) => write!(f, "SplitMixer-{v}"),
            Variant::ConvMixer => f.write_str("ConvMixer"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Residual {
    AfterSpatial,
    AfterChannel,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpatialMode {
    /// Width then height 1D depthwise convs, each followed by activation and norm.
    Separable1d,
    /// One `k x k` depthwise conv.
    Full2d,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelMode {
    /// The variant's segment mixer.
    Split,
    /// The variant's mixer with block 0's segment choice in every block, so rotating
    /// variants keep updating the same channels.
    Fixed,
    /// One pointwise conv over all channels.
    Full,
    None,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($text:literal => $val:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
                    $($text => Ok($val),)+
                    other => Err(Error::Parse(format!(
                        concat!("unknown ", $what, " '{}' (expected one of: {})"),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl $ty {
            pub fn keyword(self) -> &'static str {
                $(if self == $val { return $text; })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(ActivationKind, "activation", "gelu" => ActivationKind::Gelu, "relu" => ActivationKind::Relu);
keyword_enum!(NormKind, "norm", "batch" => NormKind::Batch, "layer" => NormKind::Layer);
keyword_enum!(Residual, "residual placement",
    "after_spatial" => Residual::AfterSpatial,
    "after_channel" => Residual::AfterChannel,
    "none" => Residual::None);
keyword_enum!(SpatialMode, "spatial mode",
    "separable1d" => SpatialMode::Separable1d,
    "full2d" => SpatialMode::Full2d,
    "none" => SpatialMode::None);
keyword_enum!(ChannelMode, "channel mode",
    "split" => ChannelMode::Split,
    "fixed" => ChannelMode::Fixed,
    "full" => ChannelMode::Full,
    "none" => ChannelMode::None);

/// Complete description of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub h: usize,
    pub b: usize,
    pub p: usize,
    pub k: usize,
    pub alpha: Option<Fraction>,
    pub segments: Option<usize>,
    pub classes: usize,
    pub in_channels: usize,
    pub activation: ActivationKind,
    pub norm: NormKind,
    pub residual: Residual,
    pub spatial: SpatialMode,
    pub channel: ChannelMode,
}

impl ModelConfig {
    /// Defaults: `p=2, k=5`, 10 classes, 3 input channels, GELU, BatchNorm, residual after
    /// spatial mixing; `alpha=2/3` for I/V and `s=2` for segment variants.
    pub fn new(variant: Variant, h: usize, b: usize) -> Self {
        let (alpha, segments, spatial, channel) = match variant {
            Variant::Split(v) => (
                v.uses_alpha().then(|| Fraction::new(2, 3)),
                v.uses_segments().then_some(2),
                SpatialMode::Separable1d,
                ChannelMode::Split,
            ),
            Variant::ConvMixer => (None, None, SpatialMode::Full2d, ChannelMode::Full),
        };
        Self {
            variant,
            h,
            b,
            p: 2,
            k: 5,
            alpha,
            segments,
            classes: 10,
            in_channels: 3,
            activation: ActivationKind::Gelu,
            norm: NormKind::Batch,
            residual: Residual::AfterSpatial,
            spatial,
            channel,
        }
    }

    /// Reads `SplitMixer-<A>-<h>/<b>` or `ConvMixer-<h>/<b>` and fills the rest with defaults.
    pub fn parse_name(text: &str) -> Result<Self> {
        let grammar = || {
            Error::Parse(format!(
                "bad model name '{text}'; expected SplitMixer-<I|II|III|IV|V|3D|Full>-<h>/<b> or ConvMixer-<h>/<b>"
            ))
        };
        let (variant, dims) = if let Some(rest) = text.strip_prefix("SplitMixer-") {
            let (a, dims) = rest.split_once('-').ok_or_else(grammar)?;
            (Variant::Split(a.parse().map_err(|_| grammar())?), dims)
        } else if let Some(dims) = text.strip_prefix("ConvMixer-") {
            (Variant::ConvMixer, dims)
        } else {
            return Err(grammar());
        };
        let (h, b) = dims.split_once('/').ok_or_else(grammar)?;
        let h: usize = h.parse().map_err(|_| grammar())?;
        let b: usize = b.parse().map_err(|_| grammar())?;
        Ok(Self::new(variant, h, b))
    }

    /// Canonical `SplitMixer-I-256/8` style name.
    pub fn name(&self) -> String {
        format!("{}-{}/{}", self.variant, self.h, self.b)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.h < 8 {
            return fail(format!("hidden dimension must be >= 8, got {}", self.h));
        }
        if self.b == 0 {
            return fail("need at least one block".into());
        }
        if self.p == 0 {
            return fail("patch size must be >= 1".into());
        }
        if self.k.is_multiple_of(2) {
            return fail(format!("kernel size must be odd, got {}", self.k));
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.in_channels == 0 {
            return fail("need at least one input channel".into());
        }
        if self.spatial == SpatialMode::None && self.channel == ChannelMode::None {
            return fail("spatial and channel mixing cannot both be disabled".into());
        }
        match self.variant {
            Variant::ConvMixer => {
                if self.alpha.is_some() || self.segments.is_some() {
                    return fail("ConvMixer takes neither alpha nor a segment count".into());
                }
                if matches!(self.channel, ChannelMode::Split | ChannelMode::Fixed) {
                    return fail("ConvMixer has no split channel mixer".into());
                }
            }
            Variant::Split(v) => {
                // Validates alpha/segment presence against the variant.
                MixerSpec {
                    variant: v,
                    h: self.h,
                    alpha: self.alpha,
                    segments: self.segments,
                    block_index: 0,
                }
                .validate()?;
            }
        }
        Ok(())
    }

    /// Mixer used at `block`, if the channel mixer is enabled.
    pub fn mixer_spec(&self, block: usize) -> Option<MixerSpec> {
        match (self.channel, self.variant) {
            (ChannelMode::None, _) => None,
            (mode @ (ChannelMode::Split | ChannelMode::Fixed), Variant::Split(v)) => Some(MixerSpec {
                variant: v,
                h: self.h,
                alpha: self.alpha,
                segments: self.segments,
                block_index: if mode == ChannelMode::Fixed { 0 } else { block },
            }),
            _ => Some(MixerSpec {
                variant: MixVariant::Full,
                h: self.h,
                alpha: None,
                segments: None,
                block_index: block,
            }),
        }
    }

    /// `(name, value)` pairs used for config echoes and mismatch reports.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("h", self.h.to_string()),
            ("b", self.b.to_string()),
            ("p", self.p.to_string()),
            ("k", self.k.to_string()),
            ("alpha", self.alpha.map_or("-".into(), |a| a.to_string())),
            ("segments", self.segments.map_or("-".into(), |s| s.to_string())),
            ("classes", self.classes.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("activation", self.activation.keyword().into()),
            ("norm", self.norm.keyword().into()),
            ("residual", self.residual.keyword().into()),
            ("spatial", self.spatial.keyword().into()),
            ("channel", self.channel.keyword().into()),
        ]
    }

    /// Human summary, e.g. `SplitMixer-I-256/8 (p=2 k=5 alpha=2/3 ...)`.
    pub fn describe(&self) -> String {
        let mut s = format!("{} (p={} k={}", self.name(), self.p, self.k);
        if let Some(a) = self.alpha {
            s += &format!(" alpha={a}~{:.4}", fraction_to_f64(a));
        }
        if let Some(seg) = self.segments {
            s += &format!(" s={seg}");
        }
        s += &format!(
            " classes={} act={} norm={} residual={} spatial={} channel={})",
            self.classes,
            self.activation.keyword(),
            self.norm.keyword(),
            self.residual.keyword(),
            self.spatial.keyword(),
            self.channel.keyword()
        );
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Spatial {
    Separable { width: ConvParams, height: ConvParams },
    Full(ConvParams),
    None,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    spatial: Spatial,
    /// Indices into `Model::norms`, one per spatial conv.
    spatial_norms: Vec<usize>,
    mixer: Option<(ChannelMixer, usize)>,
}

/// A built network: parameters, normalization state and layer wiring.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    norms: Vec<(String, NormState<T>)>,
    patch: ConvParams,
    patch_norm: usize,
    blocks: Vec<Block>,
    head: ConvParams,
}

fn sub_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Element> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.h;
        let k = config.k;
        let mut params = ParamStore::new();
        let mut norms = Vec::new();
        let mut next_seed = 0u64;
        let mut seed_for = || {
            next_seed += 1;
            sub_seed(seed, next_seed)
        };
        let mut add_norm = |params: &mut ParamStore<T>, name: String| -> Result<usize> {
            let state = NormState::register(params, &name, config.norm, h)?;
            norms.push((name, state));
            Ok(norms.len() - 1)
        };

        let c = config.in_channels;
        let patch = ConvParams::register(&mut params, "patch", [h, c, config.p, config.p], c * config.p * config.p, seed_for())?;
        let patch_norm = add_norm(&mut params, "patch.norm".into())?;

        let mut blocks = Vec::with_capacity(config.b);
        for l in 0..config.b {
            let prefix = format!("blocks.{l}");
            let (spatial, spatial_norms) = match config.spatial {
                SpatialMode::Separable1d => {
                    let width = ConvParams::register(&mut params, &format!("{prefix}.dw_w"), [h, 1, 1, k], k, seed_for())?;
                    let nw = add_norm(&mut params, format!("{prefix}.dw_w.norm"))?;
                    let height = ConvParams::register(&mut params, &format!("{prefix}.dw_h"), [h, 1, k, 1], k, seed_for())?;
                    let nh = add_norm(&mut params, format!("{prefix}.dw_h.norm"))?;
                    (Spatial::Separable { width, height }, vec![nw, nh])
                }
                SpatialMode::Full2d => {
                    let dw = ConvParams::register(&mut params, &format!("{prefix}.dw"), [h, 1, k, k], k * k, seed_for())?;
                    let n = add_norm(&mut params, format!("{prefix}.dw.norm"))?;
                    (Spatial::Full(dw), vec![n])
                }
                SpatialMode::None => (Spatial::None, Vec::new()),
            };
            let mixer = match config.mixer_spec(l) {
                Some(spec) => {
                    let m = ChannelMixer::register(&mut params, &format!("{prefix}.mix"), spec, Allocation::ActiveOnly, seed_for())?;
                    let n = add_norm(&mut params, format!("{prefix}.mix.norm"))?;
                    Some((m, n))
                }
                None => None,
            };
            blocks.push(Block {
                spatial,
                spatial_norms,
                mixer,
            });
        }
        let head = ConvParams::register(&mut params, "head", [config.classes, h, 1, 1], h, seed_for())?;
        Ok(Self {
            config,
            params,
            norms,
            patch,
            patch_norm,
            blocks,
            head,
        })
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_params(&self) -> usize {
        self.params.numel()
    }

    /// Named normalization layers in registration order.
    pub fn norms(&self) -> &[(String, NormState<T>)] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [(String, NormState<T>)] {
        &mut self.norms
    }

    /// Block mixers, `None` where channel mixing is disabled.
    pub fn mixers(&self) -> impl Iterator<Item = Option<&ChannelMixer>> {
        self.blocks.iter().map(|b| b.mixer.as_ref().map(|(m, _)| m))
    }

    fn act_norm(&mut self, tape: &mut Tape<T>, x: Var, norm: usize, mode: Mode) -> Result<Var> {
        let a = nn::activation(tape, x, self.config.activation);
        self.norms[norm].1.apply(tape, &self.params, a, mode)
    }

    /// Logits of shape `(n, classes, 1, 1)`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        self.forward_impl(tape, x, mode, None)
    }

    /// Logits plus the feature maps after patch embedding and after each block.
    pub fn forward_with_taps(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Vec<Var>)> {
        let mut taps = Vec::with_capacity(self.config.b + 1);
        let logits = self.forward_impl(tape, x, mode, Some(&mut taps))?;
        Ok((logits, taps))
    }

    fn forward_impl(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, mut taps: Option<&mut Vec<Var>>) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got input {xs}",
                self.config.in_channels
            )));
        }
        let (w, b) = self.patch.vars(tape, &self.params);
        let z = nn::patch_embed(tape, x, w, b, self.config.p)?;
        let mut z = self.act_norm(tape, z, self.patch_norm, mode)?;
        if let Some(t) = taps.as_deref_mut() {
            t.push(z);
        }
        for l in 0..self.blocks.len() {
            let input = z;
            let spatial = self.blocks[l].spatial.clone();
            let spatial_norms = self.blocks[l].spatial_norms.clone();
            match spatial {
                Spatial::Separable { width, height } => {
                    let (w, b) = width.vars(tape, &self.params);
                    z = nn::depthwise1d(tape, z, w, b, Axis::Width)?;
                    z = self.act_norm(tape, z, spatial_norms[0], mode)?;
                    let (w, b) = height.vars(tape, &self.params);
                    z = nn::depthwise1d(tape, z, w, b, Axis::Height)?;
                    z = self.act_norm(tape, z, spatial_norms[1], mode)?;
                }
                Spatial::Full(dw) => {
                    let (w, b) = dw.vars(tape, &self.params);
                    z = nn::depthwise2d(tape, z, w, b)?;
                    z = self.act_norm(tape, z, spatial_norms[0], mode)?;
                }
                Spatial::None => {}
            }
            if self.config.residual == Residual::AfterSpatial && self.config.spatial != SpatialMode::None {
                z = tape.add(z, input)?;
            }
            if let Some((mixer, norm)) = self.blocks[l].mixer.clone() {
                z = mixer.forward(tape, &self.params, z)?;
                z = self.act_norm(tape, z, norm, mode)?;
            }
            if self.config.residual == Residual::AfterChannel {
                z = tape.add(z, input)?;
            }
            if let Some(t) = taps.as_deref_mut() {
                t.push(z);
            }
        }
        let pooled = nn::global_avg_pool(tape, z);
        let (w, b) = self.head.vars(tape, &self.params);
        nn::linear(tape, pooled, w, b)
    }

    /// Logits for a batch, without keeping the tape.
    pub fn predict(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = self.forward(&mut tape, v, mode)?;
        Ok(tape.value(y).clone())
    }

    /// Mean cross-entropy loss, parameter gradients and logits for one training batch.
    pub fn loss_and_grads(&mut self, x: &Tensor4<T>, labels: &[usize], mode: Mode) -> Result<(T, GradStore<T>, Tensor4<T>)> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let logits = self.forward(&mut tape, v, mode)?;
        let loss = nn::cross_entropy(&mut tape, logits, labels)?;
        let grads = tape.backward(loss, &self.params)?;
        Ok((tape.value(loss).data()[0], grads, tape.value(logits).clone()))
    }

    /// Same network in another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
            norms: self
                .norms
                .iter()
                .map(|(name, n)| {
                    let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect();
                    (
                        name.clone(),
                        NormState {
                            kind: n.kind,
                            gamma: n.gamma,
                            beta: n.beta,
                            running_mean: conv(&n.running_mean),
                            running_var: conv(&n.running_var),
                            momentum: n.momentum,
                            eps: n.eps,
                        },
                    )
                })
                .collect(),
            patch: self.patch,
            patch_norm: self.patch_norm,
            blocks: self.blocks.clone(),
            head: self.head,
        }
    }
}

/// Writes every feature map of one image as `tap<t>_ch<c>.pgm` (8-bit, min-max scaled per map).
///
/// Tap 0 follows patch embedding; tap `l` follows block `l`. Eval mode is used.
pub fn dump_features<T: Element>(model: &mut Model<T>, image: &Tensor4<T>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if image.shape().n != 1 {
        return Err(Error::Shape(format!("feature dump takes a single image, got {}", image.shape())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    let (_, taps) = model.forward_with_taps(&mut tape, x, Mode::Eval)?;
    let mut written = Vec::new();
    for (t, &tap) in taps.iter().enumerate() {
        let v = tape.value(tap);
        let s = v.shape();
        for c in 0..s.c {
            let path = out_dir.join(format!("tap{t}_ch{c}.pgm"));
            fs::write(&path, pgm_bytes(v.plane(0, c), s.w, s.h)).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Binary PGM (P5) with values min-max scaled to 0..=255; a constant map becomes all zeros.
pub fn pgm_bytes<T: Element>(map: &[T], width: usize, height: usize) -> Vec<u8> {
    let vals: Vec<f64> = map.iter().map(|v| v.as_f64()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(vals.iter().map(|&v| {
        if range > 0.0 {
            ((v - lo) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn headline() -> ModelConfig {
        ModelConfig::parse_name("SplitMixer-I-256/8").unwrap()
    }

    #[test]
    fn parse_names() {
        let c = headline();
        assert_eq!(c.variant, Variant::Split(MixVariant::I));
        assert_eq!((c.h, c.b), (256, 8));
        let c = ModelConfig::parse_name("ConvMixer-256/8").unwrap();
        assert_eq!(c.variant, Variant::ConvMixer);
        assert_eq!(c.spatial, SpatialMode::Full2d);
        for bad in ["SplitMixer-256", "SplitMixer-VI-8/2", "ConvMixer-8", "Mixer-8/2", "SplitMixer-I-8/x"] {
            assert!(matches!(ModelConfig::parse_name(bad), Err(Error::Parse(_))), "{bad}");
        }
        assert_eq!(ModelConfig::parse_name("SplitMixer-3D-16/2").unwrap().name(), "SplitMixer-3D-16/2");
    }

    #[test]
    fn headline_parameter_count() {
        let m = Model::<f32>::build(headline(), 0).unwrap();
        assert_eq!(m.trainable_params(), 275_834);
        let m = Model::<f32>::build(ModelConfig::parse_name("ConvMixer-256/8").unwrap(), 0).unwrap();
        assert_eq!(m.trainable_params(), 594_186);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::parse_name("SplitMixer-III-10/2").unwrap();
        c.segments = Some(3);
        assert!(matches!(Model::<f32>::build(c, 0), Err(Error::Config(_))));
        let mut c = headline();
        c.k = 4;
        assert!(c.validate().is_err());
        let mut c = headline();
        c.h = 4;
        assert!(c.validate().is_err());
        let mut c = headline();
        c.segments = Some(2);
        assert!(c.validate().is_err());
    }

    fn small(name: &str) -> ModelConfig {
        let mut c = ModelConfig::parse_name(name).unwrap();
        c.k = 3;
        c
    }

    fn batch(n: usize, seed: u64) -> Tensor4<f64> {
        Tensor4::alloc_dims([n, 3, 8, 8], Fill::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap()
    }

    #[test]
    fn logits_shape_and_eval_determinism() {
        let mut m = Model::<f64>::build(small("SplitMixer-II-8/3"), 1).unwrap();
        let x = batch(4, 3);
        let a = m.predict(&x, Mode::Eval).unwrap();
        assert_eq!(a.shape().dims(), [4, 10, 1, 1]);
        assert_eq!(a, m.predict(&x, Mode::Eval).unwrap());
    }

    #[test]
    fn zero_parameters_give_equal_logits() {
        let mut m = Model::<f64>::build(small("SplitMixer-I-8/2"), 1).unwrap();
        for (_, p) in m.params.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let y = m.predict(&batch(2, 4), Mode::Eval).unwrap();
        assert!(y.data().iter().all(|&v| v == y.data()[0]));
    }

    #[test]
    fn eval_forward_is_batch_equivariant() {
        let mut m = Model::<f64>::build(small("SplitMixer-IV-8/2"), 2).unwrap();
        let x = batch(3, 5);
        let y = m.predict(&x, Mode::Eval).unwrap();
        let xr = x.gather_batch(&[2, 0, 1]).unwrap();
        let yr = m.predict(&xr, Mode::Eval).unwrap();
        assert_eq!(yr, y.gather_batch(&[2, 0, 1]).unwrap());
    }

    #[test]
    fn input_errors() {
        let mut m = Model::<f64>::build(small("SplitMixer-I-8/2"), 1).unwrap();
        let odd = Tensor4::alloc_dims([1, 3, 7, 7], Fill::Constant(0.0)).unwrap();
        assert!(matches!(m.predict(&odd, Mode::Eval), Err(Error::Shape(_))));
        let gray = Tensor4::alloc_dims([1, 1, 8, 8], Fill::Constant(0.0)).unwrap();
        assert!(matches!(m.predict(&gray, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn residual_removal_changes_values_not_shapes() {
        let base = small("SplitMixer-I-8/2");
        let mut with = Model::<f64>::build(base, 7).unwrap();
        let mut without = Model::<f64>::build(ModelConfig { residual: Residual::None, ..base }, 7).unwrap();
        assert_eq!(with.trainable_params(), without.trainable_params());
        let x = batch(2, 9);
        let a = with.predict(&x, Mode::Train).unwrap();
        let b = without.predict(&x, Mode::Train).unwrap();
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(&b).unwrap() > 1e-6);
    }

    #[test]
    fn cast_round_trip_preserves_outputs_closely() {
        let mut m = Model::<f32>::build(small("SplitMixer-V-8/2"), 3).unwrap();
        let mut m64 = m.cast::<f64>();
        let x = batch(2, 1);
        let a = m.predict(&x.cast(), Mode::Eval).unwrap().cast::<f64>();
        let b = m64.predict(&x, Mode::Eval).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-4);
    }

    #[test]
    fn pgm_encoding() {
        let bytes = pgm_bytes(&[0.0f64, 0.5, 1.0, 1.0], 2, 2);
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 255]);
        assert_eq!(&pgm_bytes(&[3.0f64; 4], 2, 2)[11..], &[0, 0, 0, 0]);
    }

    #[test]
    fn feature_dump_counts_and_dims() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::<f32>::build(small("SplitMixer-I-8/2"), 1).unwrap();
        let img = Tensor4::alloc_dims([1, 3, 8, 8], Fill::Uniform { lo: 0.0, hi: 1.0, seed: 2 }).unwrap();
        let files = dump_features(&mut m, &img, dir.path()).unwrap();
        assert_eq!(files.len(), 8 * 3);
        let bytes = std::fs::read(dir.path().join("tap2_ch7.pgm")).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(bytes.len(), 11 + 16);
    }
}
