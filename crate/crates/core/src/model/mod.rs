//! The seven-layer planted CNN: five 3x3 convolutions followed by two fully
//! connected layers, with per-element freeze masks.

pub mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{ops, Tape, Tensor4, Var};
use crate::seed;

pub const CONV_LAYERS: usize = 5;
pub const INPUT_CHANNELS: usize = 3;
/// Width of the hidden fully connected layer.
pub const FC_HIDDEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// 32x32 inputs; pooling after conv1, conv2 and conv5.
    Cifar,
    /// 96x96 inputs; pooling after conv1, conv2, conv3 and conv5.
    Stl,
}

impl Variant {
    pub fn pools_after(self) -> [bool; CONV_LAYERS] {
        match self {
            Variant::Cifar => [true, true, false, false, true],
            Variant::Stl => [true, true, true, false, true],
        }
    }

    fn downsample(self) -> usize {
        1 << self.pools_after().iter().filter(|&&p| p).count()
    }
}

/// Layer topology plus input geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    /// `(channels, height, width)` of one input image.
    pub input: [usize; 3],
}

impl ArchitectureSpec {
    pub fn cifar() -> Self {
        ArchitectureSpec {
            variant: Variant::Cifar,
            input: [INPUT_CHANNELS, 32, 32],
        }
    }

    pub fn stl() -> Self {
        ArchitectureSpec {
            variant: Variant::Stl,
            input: [INPUT_CHANNELS, 96, 96],
        }
    }

    /// Same topology on a different image size, e.g. 8x8 synthetic data.
    /// Height and width must survive every pooling stage evenly.
    pub fn with_input(variant: Variant, height: usize, width: usize) -> Result<Self> {
        let d = variant.downsample();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "{variant:?} topology needs spatial dims divisible by {d}, got {height}x{width}"
            )));
        }
        Ok(ArchitectureSpec {
            variant,
            input: [INPUT_CHANNELS, height, width],
        })
    }

    /// Spatial area of the last conv feature map, after its pooling.
    pub fn final_area(&self) -> usize {
        let d = self.variant.downsample();
        (self.input[1] / d) * (self.input[2] / d)
    }

    pub fn fc_input(&self, last_conv_channels: usize) -> usize {
        last_conv_channels * self.final_area()
    }

    /// Closed-form parameter count (weights and biases) for `channels`.
    pub fn param_count(&self, channels: &ChannelConfig) -> usize {
        let k2 = ops::KERNEL * ops::KERNEL;
        let mut total = 0;
        let mut prev = self.input[0];
        for &c in &channels.conv {
            total += c * prev * k2 + c;
            prev = c;
        }
        let mut prev = self.fc_input(prev);
        for &f in &channels.fc {
            total += f * prev + f;
            prev = f;
        }
        total
    }
}

/// Output widths of the five conv layers and the two FC layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub conv: [usize; CONV_LAYERS],
    pub fc: [usize; 2],
}

impl ChannelConfig {
    pub fn new(conv: [usize; CONV_LAYERS], classes: usize) -> Self {
        ChannelConfig {
            conv,
            fc: [FC_HIDDEN, classes],
        }
    }

    /// Every conv layer at `width`.
    pub fn uniform(width: usize, classes: usize) -> Self {
        Self::new([width; CONV_LAYERS], classes)
    }

    pub fn classes(&self) -> usize {
        self.fc[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv.iter().chain(&self.fc).any(|&c| c == 0) {
            return Err(Error::invalid(format!(
                "channel counts must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Parameter tensor with a per-element freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    value: Tensor4,
    frozen: Vec<bool>,
}

impl Param {
    pub fn trainable(value: Tensor4) -> Self {
        let frozen = vec![false; value.len()];
        Param { value, frozen }
    }

    pub fn from_parts(value: Tensor4, frozen: Vec<bool>) -> Result<Self> {
        if frozen.len() != value.len() {
            return Err(Error::shape("freeze mask does not match tensor length"));
        }
        Ok(Param { value, frozen })
    }

    pub fn value(&self) -> &Tensor4 {
        &self.value
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    pub fn trainable_count(&self) -> usize {
        self.frozen.len() - self.frozen_count()
    }

    pub fn has_trainable(&self) -> bool {
        self.frozen.iter().any(|&f| !f)
    }

    pub(crate) fn value_mut(&mut self) -> &mut Tensor4 {
        &mut self.value
    }

    pub fn bit_eq(&self, other: &Param) -> bool {
        self.frozen == other.frozen && self.value.bit_eq(&other.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Fc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Param,
    pub bias: Param,
}

/// How `plant_channels` initializes the slices it adds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantInit {
    /// He-uniform new filters, zero successor slices: the network computes
    /// the same function right after planting.
    #[default]
    Preserving,
    /// He-uniform everywhere new.
    Random,
}

/// The student (or teacher) network.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantableNetwork {
    spec: ArchitectureSpec,
    channels: ChannelConfig,
    layers: Vec<Layer>,
}

fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn weight_dims(spec: &ArchitectureSpec, channels: &ChannelConfig) -> Vec<[usize; 4]> {
    let k = ops::KERNEL;
    let mut dims = Vec::with_capacity(CONV_LAYERS + 2);
    let mut prev = spec.input[0];
    for &c in &channels.conv {
        dims.push([c, prev, k, k]);
        prev = c;
    }
    let mut prev = spec.fc_input(prev);
    for &f in &channels.fc {
        dims.push([f, prev, 1, 1]);
        prev = f;
    }
    dims
}

fn fan_in(dims: [usize; 4]) -> usize {
    dims[1] * dims[2] * dims[3]
}

impl PlantableNetwork {
    /// Fresh network: He-uniform weights, zero biases, nothing frozen.
    pub fn build(spec: ArchitectureSpec, channels: ChannelConfig, seed: u64) -> Result<Self> {
        channels.validate()?;
        let mut rng = seed::rng(seed);
        let layers = weight_dims(&spec, &channels)
            .into_iter()
            .enumerate()
            .map(|(i, dims)| {
                let bound = he_bound(fan_in(dims));
                let len = dims.iter().product();
                let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
                Layer {
                    kind: if i < CONV_LAYERS {
                        LayerKind::Conv
                    } else {
                        LayerKind::Fc
                    },
                    weight: Param::trainable(Tensor4::from_vec(dims, data).expect("dims")),
                    bias: Param::trainable(Tensor4::zeros([dims[0], 1, 1, 1])),
                }
            })
            .collect();
        Ok(PlantableNetwork {
            spec,
            channels,
            layers,
        })
    }

    /// Reassembles a network from stored parameters, checking every shape.
    pub fn from_parts(
        spec: ArchitectureSpec,
        channels: ChannelConfig,
        params: Vec<Param>,
    ) -> Result<Self> {
        channels.validate()?;
        let dims = weight_dims(&spec, &channels);
        if params.len() != 2 * dims.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                2 * dims.len(),
                params.len()
            )));
        }
        let mut it = params.into_iter();
        let mut layers = Vec::with_capacity(dims.len());
        for (i, d) in dims.into_iter().enumerate() {
            let weight = it.next().expect("length checked");
            let bias = it.next().expect("length checked");
            if weight.value.dims() != d || bias.value.dims() != [d[0], 1, 1, 1] {
                return Err(Error::shape(format!(
                    "layer {} has weight {:?} / bias {:?}, expected {d:?}",
                    i + 1,
                    weight.value.dims(),
                    bias.value.dims()
                )));
            }
            layers.push(Layer {
                kind: if i < CONV_LAYERS {
                    LayerKind::Conv
                } else {
                    LayerKind::Fc
                },
                weight,
                bias,
            });
        }
        Ok(PlantableNetwork {
            spec,
            channels,
            layers,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn channels(&self) -> &ChannelConfig {
        &self.channels
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.channels.classes()
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count(&self.channels)
    }

    /// Weight and bias of every layer, in layer order.
    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn frozen_count(&self) -> usize {
        self.params().map(Param::frozen_count).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params().map(Param::trainable_count).sum()
    }

    /// Bitwise equality of values and freeze masks.
    pub fn bit_eq(&self, other: &PlantableNetwork) -> bool {
        self.spec == other.spec
            && self.channels == other.channels
            && self.params().zip(other.params()).all(|(a, b)| a.bit_eq(b))
    }

    /// Input and teacher compatibility: same image geometry and class count.
    pub fn compatible_with(&self, other: &PlantableNetwork) -> Result<()> {
        if self.spec.input != other.spec.input || self.classes() != other.classes() {
            return Err(Error::shape(format!(
                "networks disagree on input {:?} vs {:?} or classes {} vs {}",
                self.spec.input,
                other.spec.input,
                self.classes(),
                other.classes()
            )));
        }
        Ok(())
    }

    fn check_input(&self, dims: [usize; 4]) -> Result<()> {
        if dims[1..] != self.spec.input {
            return Err(Error::shape(format!(
                "batch item dims {:?} do not match network input {:?}",
                &dims[1..],
                self.spec.input
            )));
        }
        Ok(())
    }

    /// Logits `(batch, classes, 1, 1)` without recording a tape.
    pub fn forward(&self, batch: &Tensor4) -> Result<Tensor4> {
        self.check_input(batch.dims())?;
        let pools = self.spec.variant.pools_after();
        let mut x = batch.clone();
        for (layer, &pool) in self.layers[..CONV_LAYERS].iter().zip(&pools) {
            x = ops::relu(&ops::conv2d(&x, layer.weight.value(), layer.bias.value())?);
            if pool {
                x = ops::maxpool2x2(&x)?.0;
            }
        }
        let fc1 = &self.layers[CONV_LAYERS];
        x = ops::relu(&ops::linear(&x, fc1.weight.value(), fc1.bias.value())?);
        let fc2 = &self.layers[CONV_LAYERS + 1];
        ops::linear(&x, fc2.weight.value(), fc2.bias.value())
    }

    /// Records the forward pass on `tape`. Returns the logits and one
    /// parameter handle per tensor, in [`PlantableNetwork::params`] order.
    pub fn forward_taped(&self, tape: &mut Tape, batch: Tensor4) -> Result<(Var, Vec<Var>)> {
        self.check_input(batch.dims())?;
        let params: Vec<Var> = self.params().map(|p| tape.param(p.value.clone())).collect();
        let pools = self.spec.variant.pools_after();
        let mut x = tape.constant(batch);
        for l in 0..CONV_LAYERS {
            x = tape.conv2d(x, params[2 * l], params[2 * l + 1])?;
            x = tape.relu(x)?;
            if pools[l] {
                x = tape.maxpool2x2(x)?;
            }
        }
        let (w1, b1) = (params[2 * CONV_LAYERS], params[2 * CONV_LAYERS + 1]);
        x = tape.linear(x, w1, b1)?;
        x = tape.relu(x)?;
        let (w2, b2) = (params[2 * CONV_LAYERS + 2], params[2 * CONV_LAYERS + 3]);
        let logits = tape.linear(x, w2, b2)?;
        Ok((logits, params))
    }

    /// Adds `n` output channels to each conv layer in `group` (1-based
    /// indices). Every existing value is copied and frozen; new filters,
    /// their biases and the matching input slices of each successor layer are
    /// trainable.
    pub fn plant_channels(
        &self,
        group: &[usize],
        n: usize,
        seed: u64,
        init: PlantInit,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("must plant at least one channel"));
        }
        if group.is_empty() {
            return Err(Error::invalid("planting group is empty"));
        }
        let mut planted = [false; CONV_LAYERS];
        for &l in group {
            match l {
                1..=CONV_LAYERS => planted[l - 1] = true,
                l if l <= CONV_LAYERS + 2 => {
                    return Err(Error::invalid(format!(
                        "layer {l} is fully connected; only conv layers 1..={CONV_LAYERS} can be planted"
                    )))
                }
                l => return Err(Error::invalid(format!("no layer {l}"))),
            }
        }

        let mut channels = self.channels;
        for (c, &p) in channels.conv.iter_mut().zip(&planted) {
            if p {
                *c += n;
            }
        }
        let new_dims = weight_dims(&self.spec, &channels);
        let mut rng = seed::rng(seed);

        let layers = self
            .layers
            .iter()
            .zip(new_dims)
            .enumerate()
            .map(|(i, (old, dims))| {
                let grows_out = i < CONV_LAYERS && planted[i];
                let bound = he_bound(fan_in(dims));
                let weight = expand(&old.weight, dims, &mut rng, |new_out, _| {
                    if new_out || init == PlantInit::Random {
                        Some(bound)
                    } else {
                        None
                    }
                });
                debug_assert!(grows_out || dims[0] == old.weight.value.dims()[0]);
                let bias = expand(&old.bias, [dims[0], 1, 1, 1], &mut rng, |_, _| None);
                Layer {
                    kind: old.kind,
                    weight,
                    bias,
                }
            })
            .collect();

        Ok(PlantableNetwork {
            spec: self.spec,
            channels,
            layers,
        })
    }
}

/// Copies `old` into the top-left corner of a tensor of `dims`, freezing the
/// copied block. `init(new_out, new_in)` decides each new element: `Some(b)`
/// draws from `U(-b, b)`, `None` leaves zero.
fn expand(
    old: &Param,
    dims: [usize; 4],
    rng: &mut ChaCha8Rng,
    init: impl Fn(bool, bool) -> Option<f64>,
) -> Param {
    let od = old.value.dims();
    let (old_out, old_in) = (od[0], od[1] * od[2] * od[3]);
    let (new_out, new_in) = (dims[0], dims[1] * dims[2] * dims[3]);
    let mut value = Tensor4::zeros(dims);
    let mut frozen = vec![false; value.len()];
    {
        let v = value.data_mut();
        let src = old.value.data();
        for o in 0..new_out {
            for j in 0..new_in {
                let dst = o * new_in + j;
                if o < old_out && j < old_in {
                    v[dst] = src[o * old_in + j];
                    frozen[dst] = true;
                } else if let Some(b) = init(o >= old_out, j >= old_in) {
                    v[dst] = rng.gen_range(-b..b);
                }
            }
        }
    }
    Param { value, frozen }
}
