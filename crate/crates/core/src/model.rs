//! Generator and discriminator: strided-convolution encoders mirrored by
//! transposed-convolution decoders, with channel-concatenation skips between
//! mirrored stages.
//!
//! Both networks share [`EncoderDecoder`]. Every convolution is followed by a
//! LeakyReLU except the last decoder layer, which ends in `tanh` so outputs
//! live in `[-1, 1]` like the normalized images. The innermost (bottleneck)
//! encoder output has no skip partner; every later decoder stage concatenates
//! `(decoder feature, mirrored encoder feature)` in that order.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::{
    concat_channels, conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward,
    leaky_relu, leaky_relu_backward, split_channels, tanh, tanh_backward, Conv2dOptions,
    ConvSpec, Direction,
};
use crate::params::{init_params, ParameterSet};
use crate::tensor::{Real, Tensor};

pub const IMAGE_CHANNELS: usize = 3;
pub const PAIR_CHANNELS: usize = 2 * IMAGE_CHANNELS;
pub const DEFAULT_IMAGE_SIZE: usize = 128;
pub const DEFAULT_SLOPE: f64 = 0.2;

const GENERATOR_ENCODER: [usize; 6] = [64, 128, 256, 512, 512, 512];
const GENERATOR_DECODER: [usize; 5] = [512, 512, 256, 128, 64];
const DISCRIMINATOR_ENCODER: [usize; 5] = [64, 128, 256, 512, 512];
const DISCRIMINATOR_DECODER: [usize; 4] = [512, 256, 128, 64];

/// Rational scale applied to every hidden channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WidthMultiplier {
    num: usize,
    den: usize,
}

impl WidthMultiplier {
    pub const ONE: WidthMultiplier = WidthMultiplier { num: 1, den: 1 };

    pub fn new(num: usize, den: usize) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Invalid(format!(
                "width multiplier {num}/{den} must be positive"
            )));
        }
        Ok(WidthMultiplier { num, den })
    }

    /// Scaled channel count, rounded down, never below one.
    pub fn apply(&self, channels: usize) -> usize {
        (channels * self.num / self.den).max(1)
    }
}

impl Default for WidthMultiplier {
    fn default() -> Self {
        Self::ONE
    }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for WidthMultiplier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("width multiplier {s:?} is not `n` or `n/d`"));
        let (num, den) = match s.trim().split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        WidthMultiplier::new(num.parse().map_err(|_| bad())?, den.parse().map_err(|_| bad())?)
    }
}

/// Spatial size and channel count of one feature map, displayed `HxWxC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        FeatureShape {
            height,
            width,
            channels,
        }
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}", self.height, self.width, self.channels)
    }
}

/// Joins a shape trace with arrows, tagging the first and last entries:
/// `128×128×3(input) → 64×64×64 → ... → 128×128×3(output)`.
pub fn format_trace(trace: &[FeatureShape]) -> String {
    let last = trace.len().saturating_sub(1);
    trace
        .iter()
        .enumerate()
        .map(|(i, s)| match i {
            0 => format!("{s}(input)"),
            i if i == last => format!("{s}(output)"),
            _ => s.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" → ")
}

/// Concrete layer layout shared by both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoder {
    pub name: &'static str,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Output channels of each downsampling stage.
    pub encoder: Vec<usize>,
    /// Pre-concatenation output channels of each upsampling stage; the last
    /// entry equals `out_channels`.
    pub decoder: Vec<usize>,
    pub image_size: usize,
    pub slope: f64,
}

/// The generator: six downsampling and six upsampling stages, BHR in, HR out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    pub width: WidthMultiplier,
    pub image_size: usize,
    pub slope: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            width: WidthMultiplier::ONE,
            image_size: DEFAULT_IMAGE_SIZE,
            slope: DEFAULT_SLOPE,
        }
    }
}

impl GeneratorSpec {
    pub fn layout(&self) -> EncoderDecoder {
        build_layout(
            "generator",
            IMAGE_CHANNELS,
            &GENERATOR_ENCODER,
            &GENERATOR_DECODER,
            self.width,
            self.image_size,
            self.slope,
        )
    }
}

/// The discriminator: a five-stage autoencoder over 6-channel
/// (condition, candidate) pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorSpec {
    pub width: WidthMultiplier,
    pub image_size: usize,
    pub slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            width: WidthMultiplier::ONE,
            image_size: DEFAULT_IMAGE_SIZE,
            slope: DEFAULT_SLOPE,
        }
    }
}

impl DiscriminatorSpec {
    pub fn layout(&self) -> EncoderDecoder {
        build_layout(
            "discriminator",
            PAIR_CHANNELS,
            &DISCRIMINATOR_ENCODER,
            &DISCRIMINATOR_DECODER,
            self.width,
            self.image_size,
            self.slope,
        )
    }
}

fn build_layout(
    name: &'static str,
    io_channels: usize,
    encoder: &[usize],
    decoder: &[usize],
    width: WidthMultiplier,
    image_size: usize,
    slope: f64,
) -> EncoderDecoder {
    let mut dec: Vec<usize> = decoder.iter().map(|&c| width.apply(c)).collect();
    dec.push(io_channels);
    EncoderDecoder {
        name,
        in_channels: io_channels,
        out_channels: io_channels,
        encoder: encoder.iter().map(|&c| width.apply(c)).collect(),
        decoder: dec,
        image_size,
        slope,
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real> {
    input: Tensor<T>,
    /// Post-activation output of each encoder stage.
    encoder: Vec<Tensor<T>>,
    /// Input of each decoder stage (the bottleneck, then concatenations).
    decoder_in: Vec<Tensor<T>>,
    /// Post-activation, pre-concatenation output of each hidden decoder stage.
    decoder_act: Vec<Tensor<T>>,
    output: Tensor<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn into_output(self) -> Tensor<T> {
        self.output
    }

    /// Shapes of the input, every encoder output, every post-concatenation
    /// decoder feature and the output, for sample 0.
    pub fn shapes(&self) -> Vec<FeatureShape> {
        let fs = |t: &Tensor<T>| {
            let s = t.shape();
            FeatureShape::new(s[2], s[3], s[1])
        };
        let mut out = vec![fs(&self.input)];
        out.extend(self.encoder.iter().map(fs));
        out.extend(self.decoder_in.iter().skip(1).map(fs));
        out.push(fs(&self.output));
        out
    }
}

impl EncoderDecoder {
    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    fn check_consistent(&self) -> Result<()> {
        if self.encoder.is_empty() || self.decoder.len() != self.encoder.len() {
            return Err(Error::Spec(format!(
                "{}: {} encoder stages but {} decoder stages",
                self.name,
                self.encoder.len(),
                self.decoder.len()
            )));
        }
        if self.decoder.last() != Some(&self.out_channels) {
            return Err(Error::Spec(format!(
                "{}: final decoder stage must produce {} channels",
                self.name, self.out_channels
            )));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::Spec(format!(
                "{}: LeakyReLU slope {} outside (0, 1)",
                self.name, self.slope
            )));
        }
        Ok(())
    }

    /// Named layer list: `enc0..` then `dec0..`.
    pub fn layers(&self) -> Vec<(String, ConvSpec)> {
        let n = self.depth();
        let mut layers = Vec::with_capacity(2 * n);
        let mut prev = self.in_channels;
        for (i, &c) in self.encoder.iter().enumerate() {
            layers.push((format!("enc{i}"), self.conv(prev, c, Direction::Down)));
            prev = c;
        }
        for (j, &c) in self.decoder.iter().enumerate() {
            let input = if j == 0 {
                self.encoder[n - 1]
            } else {
                self.decoder[j - 1] + self.encoder[n - 1 - j]
            };
            layers.push((format!("dec{j}"), self.conv(input, c, Direction::Up)));
        }
        layers
    }

    fn conv(&self, cin: usize, cout: usize, direction: Direction) -> ConvSpec {
        ConvSpec {
            in_channels: cin,
            out_channels: cout,
            direction,
            options: Conv2dOptions::default(),
            activation_slope: self.slope,
        }
    }

    pub fn conv_layer_count(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.param_count()).sum()
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParameterSet<T> {
        init_params(&self.layers(), seed)
    }

    /// Shape of every feature map for a square input of side `size`, without
    /// touching any parameters. Decoder entries are post-concatenation.
    pub fn shape_trace(&self, size: usize) -> Result<Vec<FeatureShape>> {
        self.check_consistent()?;
        let n = self.depth();
        let mut trace = vec![FeatureShape::new(size, size, self.in_channels)];
        let mut s = size;
        let mut enc_sizes = Vec::with_capacity(n);
        for &c in &self.encoder {
            if s < 2 || !s.is_multiple_of(2) {
                return Err(Error::Spec(format!(
                    "{}: feature size {s} cannot be halved",
                    self.name
                )));
            }
            s /= 2;
            enc_sizes.push(s);
            trace.push(FeatureShape::new(s, s, c));
        }
        for (j, &c) in self.decoder.iter().enumerate() {
            s *= 2;
            if j + 1 < n {
                let partner = n - 2 - j;
                debug_assert_eq!(enc_sizes[partner], s);
                trace.push(FeatureShape::new(s, s, c + self.encoder[partner]));
            } else {
                trace.push(FeatureShape::new(s, s, c));
            }
        }
        Ok(trace)
    }

    fn check_input<T: Real>(&self, input: &Tensor<T>) -> Result<()> {
        self.check_consistent()?;
        let [_, c, h, w] = input.dims4(self.name)?;
        if c != self.in_channels {
            return Err(Error::Shape {
                op: self.name,
                dim: "channels",
                expected: self.in_channels,
                actual: c,
            });
        }
        if h != w {
            return Err(Error::Shape {
                op: self.name,
                dim: "width",
                expected: h,
                actual: w,
            });
        }
        let min = 1usize << self.depth();
        if !h.is_power_of_two() || h < min {
            return Err(Error::Spec(format!(
                "{}: input size {h} must be a power of two >= {min}",
                self.name
            )));
        }
        Ok(())
    }

    /// Runs the network and keeps the activations needed by [`backward`](Self::backward).
    pub fn forward<T: Real>(
        &self,
        params: &ParameterSet<T>,
        input: &Tensor<T>,
    ) -> Result<ForwardCache<T>> {
        self.check_input(input)?;
        let opts = Conv2dOptions::default();
        let n = self.depth();
        let mut encoder = Vec::with_capacity(n);
        for i in 0..n {
            let prev = if i == 0 { input } else { &encoder[i - 1] };
            let pre = conv2d(
                prev,
                params.require(&format!("enc{i}.weight"))?,
                params.require(&format!("enc{i}.bias"))?,
                opts,
            )?;
            encoder.push(leaky_relu(&pre, self.slope));
        }

        let mut decoder_in = Vec::with_capacity(n);
        let mut decoder_act = Vec::with_capacity(n - 1);
        let mut h = encoder[n - 1].clone();
        let mut output = None;
        for j in 0..n {
            let pre = conv_transpose2d(
                &h,
                params.require(&format!("dec{j}.weight"))?,
                params.require(&format!("dec{j}.bias"))?,
                opts,
            )?;
            decoder_in.push(h);
            if j + 1 == n {
                output = Some(tanh(&pre));
                break;
            }
            let act = leaky_relu(&pre, self.slope);
            h = concat_channels(&act, &encoder[n - 2 - j])?;
            decoder_act.push(act);
        }
        let output = output.expect("at least one decoder stage");
        output.ensure_finite(&format!("{} output", self.name))?;
        Ok(ForwardCache {
            input: input.clone(),
            encoder,
            decoder_in,
            decoder_act,
            output,
        })
    }

    /// Backpropagates `grad_out` (gradient of a scalar loss with respect to the
    /// output) through the cached pass. Returns parameter gradients in the
    /// same order as the parameters, plus the input gradient when requested.
    pub fn backward<T: Real>(
        &self,
        params: &ParameterSet<T>,
        cache: &ForwardCache<T>,
        grad_out: &Tensor<T>,
        want_input_grad: bool,
    ) -> Result<(ParameterSet<T>, Option<Tensor<T>>)> {
        cache.output.check_same_shape("backward", grad_out)?;
        let opts = Conv2dOptions::default();
        let n = self.depth();
        let mut grads = params.zeros_like();
        let mut enc_grad: Vec<Option<Tensor<T>>> = vec![None; n];
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| -> Result<()> {
            match slot {
                Some(acc) => acc.axpy(T::one(), &g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };

        let mut g_h: Option<Tensor<T>> = None;
        for j in (0..n).rev() {
            let g_pre = if j + 1 == n {
                tanh_backward(&cache.output, grad_out)?
            } else {
                let g_concat = g_h.take().expect("set by the later stage");
                let act = &cache.decoder_act[j];
                let (g_act, g_skip) = split_channels(&g_concat, act.shape()[1])?;
                accumulate(&mut enc_grad[n - 2 - j], g_skip)?;
                leaky_relu_backward(act, &g_act, self.slope)?
            };
            let name = format!("dec{j}");
            let cg = conv_transpose2d_backward(
                &cache.decoder_in[j],
                params.require(&format!("{name}.weight"))?,
                &g_pre,
                opts,
                true,
            )?;
            *grads.get_mut(&format!("{name}.weight")).expect("layout") = cg.weight;
            *grads.get_mut(&format!("{name}.bias")).expect("layout") = cg.bias;
            g_h = cg.input;
        }
        accumulate(&mut enc_grad[n - 1], g_h.take().expect("bottleneck gradient"))?;

        let mut input_grad = None;
        for i in (0..n).rev() {
            let g_act = enc_grad[i].take().expect("every encoder stage feeds the decoder");
            let g_pre = leaky_relu_backward(&cache.encoder[i], &g_act, self.slope)?;
            let prev = if i == 0 {
                &cache.input
            } else {
                &cache.encoder[i - 1]
            };
            let name = format!("enc{i}");
            let cg = conv2d_backward(
                prev,
                params.require(&format!("{name}.weight"))?,
                &g_pre,
                opts,
                i > 0 || want_input_grad,
            )?;
            *grads.get_mut(&format!("{name}.weight")).expect("layout") = cg.weight;
            *grads.get_mut(&format!("{name}.bias")).expect("layout") = cg.bias;
            if i > 0 {
                accumulate(&mut enc_grad[i - 1], cg.input.expect("requested"))?;
            } else {
                input_grad = cg.input;
            }
        }
        Ok((grads, input_grad))
    }
}

/// Generator forward pass on a batch of normalized BHR images `[N, 3, S, S]`.
pub fn generator_forward<T: Real>(
    spec: &GeneratorSpec,
    params: &ParameterSet<T>,
    bhr: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(spec.layout().forward(params, bhr)?.into_output())
}

/// Discriminator reconstruction of a batch of pairs `[N, 6, S, S]`.
pub fn discriminator_forward<T: Real>(
    spec: &DiscriminatorSpec,
    params: &ParameterSet<T>,
    pair: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(spec.layout().forward(params, pair)?.into_output())
}

/// Stacks `(condition, candidate)` along channels: condition in channels
/// 0..3, candidate in 3..6.
pub fn make_pair<T: Real>(condition: &Tensor<T>, candidate: &Tensor<T>) -> Result<Tensor<T>> {
    condition.check_same_shape("make_pair", candidate)?;
    concat_channels(condition, candidate)
}
