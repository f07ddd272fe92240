//! Toy depth networks with named tap points.
//!
//! A [`Model`] is an ordered list of layers. The boundary before layer `i`
//! is tap `i`: tap 0 is the model input, tap `i > 0` carries the name of
//! layer `i - 1`. The boundary after the output layer is not a tap.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng;
use crate::sparsity::SparseDepth;
use crate::tensor::Tensor;

pub const INPUT_TAP: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    PlainCnn,
    EncDec,
    CoarseFine,
    /// Hand-assembled layer stack.
    Custom,
}

impl Arch {
    pub fn code(self) -> u32 {
        match self {
            Arch::Custom => 0,
            Arch::PlainCnn => 1,
            Arch::EncDec => 2,
            Arch::CoarseFine => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => Arch::Custom,
            1 => Arch::PlainCnn,
            2 => Arch::EncDec,
            3 => Arch::CoarseFine,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::PlainCnn => "plain_cnn",
            Arch::EncDec => "encdec",
            Arch::CoarseFine => "coarse_fine",
            Arch::Custom => "custom",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain_cnn" => Ok(Arch::PlainCnn),
            "encdec" => Ok(Arch::EncDec),
            "coarse_fine" => Ok(Arch::CoarseFine),
            other => Err(Error::Config(format!(
                "unknown arch '{other}' (expected plain_cnn, encdec or coarse_fine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputMode {
    Rgb,
    /// Sparse depth and its mask as two channels.
    Sd,
    /// RGB followed by sparse depth and mask (early fusion).
    RgbSd,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::Rgb => 3,
            InputMode::Sd => 2,
            InputMode::RgbSd => 5,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            InputMode::Rgb => 0,
            InputMode::Sd => 1,
            InputMode::RgbSd => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => InputMode::Rgb,
            1 => InputMode::Sd,
            2 => InputMode::RgbSd,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            InputMode::Rgb => "rgb",
            InputMode::Sd => "sd",
            InputMode::RgbSd => "rgb+sd",
        }
    }

    /// Builds the network input tensor `[1, channels, H, W]`.
    pub fn assemble(self, rgb: &Tensor, sparse: &SparseDepth) -> Result<Tensor> {
        match self {
            InputMode::Rgb => Ok(rgb.clone()),
            InputMode::Sd => Tensor::concat_channels(&[&sparse.values, &sparse.mask]),
            InputMode::RgbSd => Tensor::concat_channels(&[rgb, &sparse.values, &sparse.mask]),
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(InputMode::Rgb),
            "sd" => Ok(InputMode::Sd),
            "rgb+sd" | "rgbsd" | "rgb_sd" => Ok(InputMode::RgbSd),
            other => Err(Error::Config(format!(
                "unknown input mode '{other}' (expected rgb, sd or rgb+sd)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        /// `[c_out, c_in, k, k]`
        weight: Tensor,
        /// `[c_out]`
        bias: Tensor,
        stride: usize,
        pad: usize,
        relu: bool,
    },
    Downsample,
    Upsample,
    /// Appends the model input along the channel axis. The input enters as a
    /// constant, so it is never updated by refinement.
    ConcatInput,
}

impl Layer {
    /// Same-padded stride-1 `k`x`k` convolution with zero parameters.
    pub fn conv(c_in: usize, c_out: usize, k: usize, relu: bool) -> Self {
        Layer::Conv {
            weight: Tensor::zeros(&[c_out, c_in, k, k]),
            bias: Tensor::zeros(&[c_out]),
            stride: 1,
            pad: k / 2,
            relu,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Downsample => "downsample2x",
            Layer::Upsample => "upsample2x",
            Layer::ConcatInput => "concat_input",
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv { weight, bias, .. } => vec![weight, bias],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv { weight, bias, .. } => vec![weight, bias],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub layer: Layer,
}

/// Parameter leaves of one layer inside a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub input_mode: InputMode,
    pub layers: Vec<NamedLayer>,
}

const WIDTH: usize = 8;

impl Model {
    pub fn new(arch: Arch, input_mode: InputMode, layers: Vec<(&str, Layer)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        let layers: Vec<NamedLayer> = layers
            .into_iter()
            .map(|(name, layer)| NamedLayer {
                name: name.to_string(),
                layer,
            })
            .collect();
        for (i, l) in layers.iter().enumerate() {
            if l.name == INPUT_TAP || layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::Config(format!("duplicate or reserved layer name '{}'", l.name)));
            }
        }
        Ok(Self {
            arch,
            input_mode,
            layers,
        })
    }

    /// Builds an architecture with He-scaled weights drawn from `seed`.
    pub fn build(arch: Arch, input_mode: InputMode, seed: u64) -> Result<Self> {
        let c = input_mode.channels();
        let w = WIDTH;
        let encdec = |c_in: usize| {
            vec![
                ("enc1", Layer::conv(c_in, w, 3, true)),
                ("down1", Layer::Downsample),
                ("enc2", Layer::conv(w, 2 * w, 3, true)),
                ("down2", Layer::Downsample),
                ("bottleneck", Layer::conv(2 * w, 2 * w, 3, true)),
                ("up1", Layer::Upsample),
                ("dec1", Layer::conv(2 * w, w, 3, true)),
                ("up2", Layer::Upsample),
                ("dec2", Layer::conv(w, w, 3, true)),
            ]
        };
        let layers = match arch {
            Arch::PlainCnn => vec![
                ("conv1", Layer::conv(c, w, 3, true)),
                ("conv2", Layer::conv(w, w, 3, true)),
                ("conv3", Layer::conv(w, w, 3, true)),
                ("conv4", Layer::conv(w, w, 3, true)),
                ("out", Layer::conv(w, 1, 3, false)),
            ],
            Arch::EncDec => {
                let mut l = encdec(c);
                l.push(("out", Layer::conv(w, 1, 3, false)));
                l
            }
            Arch::CoarseFine => {
                let mut l = encdec(c);
                l.push(("coarse", Layer::conv(w, 1, 3, false)));
                l.push(("fuse", Layer::ConcatInput));
                l.push(("refine1", Layer::conv(1 + c, w, 3, true)));
                l.push(("out", Layer::conv(w, 1, 3, false)));
                l
            }
            Arch::Custom => {
                return Err(Error::Config("custom models are assembled with Model::new".into()))
            }
        };
        let mut model = Model::new(arch, input_mode, layers)?;
        model.init_he(seed);
        Ok(model)
    }

    /// He fan-in initialisation of every conv weight; biases are zeroed.
    pub fn init_he(&mut self, seed: u64) {
        let mut rng = rng::derived(seed, 0x4e45_5457);
        for nl in &mut self.layers {
            if let Layer::Conv { weight, bias, .. } = &mut nl.layer {
                let s = weight.shape();
                let fan_in = (s[1] * s[2] * s[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                for v in weight.data_mut() {
                    *v = normal.sample(&mut rng);
                }
                bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
            }
        }
    }

    /// Legal split points, ordered from input to the boundary before the output layer.
    pub fn taps(&self) -> Vec<String> {
        std::iter::once(INPUT_TAP.to_string())
            .chain(self.layers[..self.layers.len() - 1].iter().map(|l| l.name.clone()))
            .collect()
    }

    /// Index of a tap: the number of layers in the front segment.
    pub fn tap_index(&self, tap: &str) -> Result<usize> {
        self.taps().iter().position(|t| t == tap).ok_or_else(|| {
            Error::Config(format!(
                "unknown tap '{tap}'; valid taps: {}",
                self.taps().join(", ")
            ))
        })
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.layer.params()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.layer.params_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Copy with every weight replaced by its magnitude, biases zeroed and
    /// ReLUs removed. Its response to a non-negative impulse is non-negative
    /// with support equal to the union of all weight paths.
    pub fn linearized(&self) -> Model {
        let mut m = self.clone();
        for nl in &mut m.layers {
            if let Layer::Conv { weight, bias, relu, .. } = &mut nl.layer {
                weight.data_mut().iter_mut().for_each(|w| *w = w.abs());
                bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
                *relu = false;
            }
        }
        m
    }

    /// Pushes every parameter as a leaf. Frozen parameters carry no gradient.
    pub fn push_params(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Option<ParamNodes>>> {
        self.push_params_for(g, trainable, 0..self.layers.len())
    }

    /// Like [`Model::push_params`], restricted to the layers in `range`.
    pub fn push_params_for(
        &self,
        g: &mut Graph,
        trainable: bool,
        range: std::ops::Range<usize>,
    ) -> Result<Vec<Option<ParamNodes>>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, nl)| match &nl.layer {
                Layer::Conv { .. } if !range.contains(&i) => Ok(None),
                Layer::Conv { weight, bias, .. } => Ok(Some(ParamNodes {
                    weight: g.leaf(weight.clone(), trainable)?,
                    bias: g.leaf(bias.clone(), trainable)?,
                })),
                _ => Ok(None),
            })
            .collect()
    }

    /// Applies layers `from..to` to `state`, with `input` available to
    /// input-concatenating layers.
    pub fn apply_layers(
        &self,
        g: &mut Graph,
        params: &[Option<ParamNodes>],
        mut state: NodeId,
        input: NodeId,
        from: usize,
        to: usize,
    ) -> Result<NodeId> {
        for (i, nl) in self.layers.iter().enumerate().take(to).skip(from) {
            state = match &nl.layer {
                Layer::Conv { stride, pad, relu, .. } => {
                    let p = params[i].ok_or_else(|| {
                        Error::Graph(format!("missing parameters for layer '{}'", nl.name))
                    })?;
                    let y = g.conv2d(state, p.weight, *stride, *pad)?;
                    let y = g.bias(y, p.bias)?;
                    if *relu {
                        g.relu(y)?
                    } else {
                        y
                    }
                }
                Layer::Downsample => g.downsample2x(state)?,
                Layer::Upsample => g.upsample2x(state)?,
                Layer::ConcatInput => g.concat(&[state, input])?,
            };
        }
        Ok(state)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.input_mode.channels() {
            return Err(Error::Shape {
                op: "model input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_mode.channels()],
            });
        }
        Ok(())
    }

    /// Full forward pass, `[n, c, H, W]` to `[n, 1, H, W]`.
    pub fn run(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let params = self.push_params(&mut g, false)?;
        let xn = g.leaf(x.clone(), false)?;
        let out = self.apply_layers(&mut g, &params, xn, xn, 0, self.layers.len())?;
        Ok(g.value(out).clone())
    }

    pub fn split(&self, tap: &str) -> Result<(Front<'_>, Rear<'_>)> {
        let at = self.tap_index(tap)?;
        Ok((Front { model: self, at }, Rear { model: self, at }))
    }
}

/// Layers before a tap.
#[derive(Debug, Clone, Copy)]
pub struct Front<'a> {
    model: &'a Model,
    at: usize,
}

impl Front<'_> {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.model.check_input(x)?;
        let mut g = Graph::new();
        let params = self.model.push_params_for(&mut g, false, 0..self.at)?;
        let xn = g.leaf(x.clone(), false)?;
        let z = self.model.apply_layers(&mut g, &params, xn, xn, 0, self.at)?;
        Ok(g.value(z).clone())
    }

    pub fn layer_count(&self) -> usize {
        self.at
    }
}

/// Layers from a tap to the output.
#[derive(Debug, Clone, Copy)]
pub struct Rear<'a> {
    model: &'a Model,
    at: usize,
}

impl<'a> Rear<'a> {
    pub fn model(&self) -> &'a Model {
        self.model
    }

    pub fn tap_index(&self) -> usize {
        self.at
    }

    /// Adds the rear segment to `g`, reading the tap value from `z` and the
    /// model input from `x`. Parameters are pushed frozen.
    pub fn build(&self, g: &mut Graph, z: NodeId, x: NodeId) -> Result<NodeId> {
        let params = self.model.push_params_for(g, false, self.at..self.model.layers.len())?;
        self.model
            .apply_layers(g, &params, z, x, self.at, self.model.layers.len())
    }

    pub fn apply(&self, z: &Tensor, x: &Tensor) -> Result<Tensor> {
        self.model.check_input(x)?;
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), false)?;
        let zn = g.leaf(z.clone(), false)?;
        let out = self.build(&mut g, zn, xn)?;
        Ok(g.value(out).clone())
    }
}
