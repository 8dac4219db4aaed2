//! U-shaped networks: the base U-Net (with skips, used as the segmentation
//! U-Net), its skip-less variant (the encoding U-Net), and a plain
//! contracting/expanding U-Net used as the parameter-count baseline.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    Block, DenseBlock, DenseBlockSpec, DownBlock, DownBlockSpec, TransitionBlock, TransitionBlockSpec, UpBlock,
    UpBlockSpec,
};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvRelu, ConvSpec, ConvTranspose2d, MaxPool2d, Mode, Param, Parameterized, Sigmoid};
use crate::tensor::Tensor;

/// Number of inception-bearing blocks (down + transition) on the encoding path.
pub const INCEPTION_BLOCKS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BlockEntry {
    Transition(TransitionBlockSpec),
    Down(DownBlockSpec),
    Dense(DenseBlockSpec),
    Up(UpBlockSpec),
}

impl BlockEntry {
    pub fn kind(&self) -> &'static str {
        match self {
            BlockEntry::Transition(_) => "transition",
            BlockEntry::Down(_) => "down",
            BlockEntry::Dense(_) => "dense",
            BlockEntry::Up(_) => "up",
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            BlockEntry::Transition(s) => s.a,
            BlockEntry::Down(s) => s.a,
            BlockEntry::Dense(s) => s.a,
            BlockEntry::Up(s) => s.a,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BlockEntry::Transition(s) => s.b,
            BlockEntry::Down(s) => s.b,
            BlockEntry::Dense(s) => s.a,
            BlockEntry::Up(s) => s.b,
        }
    }

    pub fn num_parameters(&self) -> usize {
        match self {
            BlockEntry::Transition(s) => s.num_parameters(),
            BlockEntry::Down(s) => s.num_parameters(),
            BlockEntry::Dense(s) => s.num_parameters(),
            BlockEntry::Up(s) => s.num_parameters(),
        }
    }

    fn set_in_channels(&mut self, a: usize) {
        match self {
            BlockEntry::Transition(s) => s.a = a,
            BlockEntry::Down(s) => s.a = a,
            BlockEntry::Dense(s) => s.a = a,
            BlockEntry::Up(s) => s.a = a,
        }
    }
}

/// Declarative description of a base U-Net: an encoding path of transition
/// and down blocks, one dense bottleneck block, and a decoding path of up
/// blocks followed by a 1x1 sigmoid head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default)]
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub skip_connections: bool,
    pub blocks: Vec<BlockEntry>,
}

/// Derived layout of a validated [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub encoder: usize,
    pub downs: usize,
    /// Channel count of the feature entering each down block (the skip sources).
    pub skip_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub head_in: usize,
}

impl NetworkSpec {
    /// Checks block order, the inception-block count and the channel chain.
    pub fn layout(&self) -> Result<Layout> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("network channel counts must be positive"));
        }
        let encoder = self
            .blocks
            .iter()
            .take_while(|b| matches!(b, BlockEntry::Transition(_) | BlockEntry::Down(_)))
            .count();
        if encoder != INCEPTION_BLOCKS {
            return Err(Error::config(format!(
                "encoding path must contain exactly {INCEPTION_BLOCKS} transition/down blocks, found {encoder}"
            )));
        }
        match self.blocks.get(encoder) {
            Some(BlockEntry::Dense(_)) => {}
            other => {
                return Err(Error::config(format!(
                    "block #{encoder} must be the dense bottleneck block, found {}",
                    other.map_or("nothing", BlockEntry::kind)
                )))
            }
        }
        let downs = self.blocks[..encoder]
            .iter()
            .filter(|b| matches!(b, BlockEntry::Down(_)))
            .count();
        let ups = &self.blocks[encoder + 1..];
        if let Some((i, b)) = ups.iter().enumerate().find(|(_, b)| !matches!(b, BlockEntry::Up(_))) {
            return Err(Error::config(format!(
                "block #{} ({}) found on the decoding path, which holds only up blocks",
                encoder + 1 + i,
                b.kind()
            )));
        }
        if ups.len() != downs {
            return Err(Error::config(format!(
                "{} up blocks cannot undo {} down blocks",
                ups.len(),
                downs
            )));
        }

        let mut channels = self.in_channels;
        let mut skip_channels = Vec::with_capacity(downs);
        for (i, block) in self.blocks[..=encoder].iter().enumerate() {
            if let BlockEntry::Down(_) = block {
                skip_channels.push(channels);
            }
            if block.in_channels() != channels {
                return Err(Error::config(format!(
                    "block #{i} ({}) declares {} input channels but receives {}",
                    block.kind(),
                    block.in_channels(),
                    channels
                )));
            }
            channels = block.out_channels();
        }
        let bottleneck_channels = channels;
        for (i, block) in ups.iter().enumerate() {
            let idx = encoder + 1 + i;
            if block.in_channels() != channels {
                return Err(Error::config(format!(
                    "block #{idx} (up) declares {} input channels but receives {}{}",
                    block.in_channels(),
                    channels,
                    if self.skip_connections && i > 0 {
                        " (including skip channels)"
                    } else {
                        ""
                    }
                )));
            }
            channels = block.out_channels();
            if self.skip_connections {
                channels += skip_channels[downs - 1 - i];
            }
        }
        for (i, block) in self.blocks.iter().enumerate() {
            let res = match block {
                BlockEntry::Transition(s) => s.validate(),
                BlockEntry::Down(s) => s.validate(),
                BlockEntry::Dense(s) => s.validate(),
                BlockEntry::Up(s) => s.validate(),
            };
            res.map_err(|e| Error::config(format!("block #{i}: {e}")))?;
        }
        Ok(Layout {
            encoder,
            downs,
            skip_channels,
            bottleneck_channels,
            head_in: channels,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.layout().map(|_| ())
    }

    /// The same network with skip connections removed; up-block input
    /// channels shrink to the previous up block's output alone.
    pub fn without_skips(&self) -> Result<NetworkSpec> {
        let layout = self.layout()?;
        let mut spec = self.clone();
        spec.skip_connections = false;
        if !spec.name.is_empty() {
            spec.name = format!("{}-encoding", spec.name);
        }
        let mut channels = layout.bottleneck_channels;
        for block in spec.blocks[layout.encoder + 1..].iter_mut() {
            block.set_in_channels(channels);
            channels = block.out_channels();
        }
        spec.validate()?;
        Ok(spec)
    }

    /// The network used to encode label maps: single-channel input, no skips.
    pub fn encoding_variant(&self) -> Result<NetworkSpec> {
        let mut spec = self.without_skips()?;
        if spec.in_channels != 1 {
            spec.in_channels = 1;
            if let Some(first) = spec.blocks.first_mut() {
                first.set_in_channels(1);
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Walks an `h x w` input through every block; any block that cannot
    /// accept its incoming size is reported.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let layout = self.layout()?;
        let factor = 1usize << layout.downs;
        if h == 0 || w == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
            return Err(Error::shape(format!(
                "{h}x{w} input is not divisible by 2^{} = {factor}",
                layout.downs
            )));
        }
        let (mut ch, mut cw) = (h, w);
        for (i, block) in self.blocks[..layout.encoder].iter().enumerate() {
            let out = match block {
                BlockEntry::Transition(s) => s.output_shape(ch, cw),
                BlockEntry::Down(s) => s.output_shape(ch, cw),
                _ => unreachable!("encoder holds transition and down blocks"),
            };
            let (_, oh, ow) = out.ok_or_else(|| {
                Error::shape(format!(
                    "block #{i} ({}) cannot process a {ch}x{cw} input",
                    block.kind()
                ))
            })?;
            (ch, cw) = (oh, ow);
        }
        Ok(())
    }

    /// Length of the flattened bottleneck code for an `h x w` input.
    pub fn bottleneck_len(&self, h: usize, w: usize) -> Result<usize> {
        self.check_input_size(h, w)?;
        let layout = self.layout()?;
        let factor = 1usize << layout.downs;
        Ok(layout.bottleneck_channels * (h / factor) * (w / factor))
    }

    pub fn head_spec(&self) -> Result<ConvSpec> {
        Ok(ConvSpec::new(self.layout()?.head_in, self.out_channels, 1))
    }

    /// `(label, count)` per block plus the output head.
    pub fn parameter_table(&self) -> Result<Vec<(String, usize)>> {
        let head = self.head_spec()?;
        let mut downs = 0;
        let mut ups = 0;
        let mut rows: Vec<(String, usize)> = self
            .blocks
            .iter()
            .map(|b| {
                let label = match b {
                    BlockEntry::Transition(s) => format!("Trans ({}, {})", s.a, s.b),
                    BlockEntry::Down(s) => {
                        downs += 1;
                        format!("Down{downs} ({}, {}, {})", s.a, s.p, s.b)
                    }
                    BlockEntry::Dense(s) => format!("Dense ({}, {})", s.a, s.k),
                    BlockEntry::Up(s) => {
                        ups += 1;
                        format!("Up{ups} ({}, {}, {}, {})", s.a, s.p, s.b, s.k)
                    }
                };
                (label, b.num_parameters())
            })
            .collect();
        rows.push((
            format!("Head ({}, {})", head.in_channels, head.out_channels),
            head.num_parameters(),
        ));
        Ok(rows)
    }

    pub fn num_parameters(&self) -> Result<usize> {
        Ok(self.parameter_table()?.iter().map(|(_, n)| n).sum())
    }
}

/// Plain contracting/expanding U-Net: two 3x3 convolutions per level, 2x2 max
/// pooling, stride-2 transposed convolutions and channel-concatenating skips.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginalUNetSpec {
    #[serde(default)]
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels per level, from the top level down to the bottleneck.
    pub widths: Vec<usize>,
    #[serde(default = "default_up_kernel")]
    pub up_kernel: usize,
}

fn default_up_kernel() -> usize {
    2
}

impl OriginalUNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config("a U-Net needs at least two levels"));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.widths.contains(&0) {
            return Err(Error::config("U-Net channel counts must be positive"));
        }
        if self.up_kernel < 2 || self.up_kernel > 4 {
            return Err(Error::config(format!(
                "up-convolution kernel {} must lie in 2..=4 for exact 2x upsampling",
                self.up_kernel
            )));
        }
        Ok(())
    }

    fn up_spec(&self, from: usize, to: usize) -> ConvSpec {
        ConvSpec::new(from, to, self.up_kernel)
            .stride(2)
            .padding((self.up_kernel - 1) / 2)
    }

    pub fn parameter_table(&self) -> Result<Vec<(String, usize)>> {
        self.validate()?;
        let double = |a: usize, b: usize| {
            ConvSpec::new(a, b, 3).padding(1).num_parameters() + ConvSpec::new(b, b, 3).padding(1).num_parameters()
        };
        let mut rows = Vec::new();
        let mut c = self.in_channels;
        let depth = self.widths.len();
        for (i, &w) in self.widths.iter().enumerate() {
            let label = if i + 1 == depth {
                "Bottom".to_string()
            } else {
                format!("Enc{}", i + 1)
            };
            rows.push((format!("{label} ({c}, {w})"), double(c, w)));
            c = w;
        }
        for i in (0..depth - 1).rev() {
            let w = self.widths[i];
            let n = self.up_spec(c, w).num_parameters() + double(2 * w, w);
            rows.push((format!("Dec{} ({c}, {w})", i + 1), n));
            c = w;
        }
        rows.push((
            format!("Head ({c}, {})", self.out_channels),
            ConvSpec::new(c, self.out_channels, 1).num_parameters(),
        ));
        Ok(rows)
    }

    pub fn num_parameters(&self) -> Result<usize> {
        Ok(self.parameter_table()?.iter().map(|(_, n)| n).sum())
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let factor = 1usize << (self.widths.len() - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
            return Err(Error::shape(format!("{h}x{w} input is not divisible by {factor}")));
        }
        Ok(())
    }
}

/// Contents of a network description file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "kebab-case")]
pub enum ModelSpec {
    BaseUnet(NetworkSpec),
    OriginalUnet(OriginalUNetSpec),
}

impl ModelSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: ModelSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::TomlDe(e) => Error::format(path, e.to_string()),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::BaseUnet(s) => s.validate(),
            ModelSpec::OriginalUnet(s) => s.validate(),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            ModelSpec::BaseUnet(s) => &s.name,
            ModelSpec::OriginalUnet(s) => &s.name,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            ModelSpec::BaseUnet(s) => s.in_channels,
            ModelSpec::OriginalUnet(s) => s.in_channels,
        }
    }

    pub fn parameter_table(&self) -> Result<Vec<(String, usize)>> {
        match self {
            ModelSpec::BaseUnet(s) => s.parameter_table(),
            ModelSpec::OriginalUnet(s) => s.parameter_table(),
        }
    }

    pub fn num_parameters(&self) -> Result<usize> {
        Ok(self.parameter_table()?.iter().map(|(_, n)| n).sum())
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        match self {
            ModelSpec::BaseUnet(s) => s.check_input_size(h, w),
            ModelSpec::OriginalUnet(s) => s.check_input_size(h, w),
        }
    }

    pub fn build(&self, seed: u64) -> Result<Network> {
        match self {
            ModelSpec::BaseUnet(s) => Ok(Network::Base(UNet::new(s.clone(), seed)?)),
            ModelSpec::OriginalUnet(s) => Ok(Network::Original(OriginalUNet::new(s.clone(), seed)?)),
        }
    }
}

/// A segmentation network exposing its bottleneck feature map.
pub trait SegmentationNetwork: Parameterized {
    fn in_channels(&self) -> usize;

    /// Sigmoid probability map and the bottleneck feature map, from one pass.
    fn forward_with_bottleneck(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)>;

    /// Back-propagates a gradient on the probability map and, optionally, on
    /// the bottleneck feature map. Returns the input gradient.
    fn backward(&mut self, d_prob: &Tensor, d_code: Option<&Tensor>) -> Result<Tensor>;

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_with_bottleneck(x, mode)?.0)
    }
}

#[derive(Debug, Clone)]
enum EncoderBlock {
    Transition(TransitionBlock),
    Down(DownBlock),
}

impl EncoderBlock {
    fn block(&mut self) -> &mut dyn Block {
        match self {
            EncoderBlock::Transition(b) => b,
            EncoderBlock::Down(b) => b,
        }
    }

    fn params(&self) -> &dyn Block {
        match self {
            EncoderBlock::Transition(b) => b,
            EncoderBlock::Down(b) => b,
        }
    }
}

/// A built base U-Net (with or without skip connections).
#[derive(Debug, Clone)]
pub struct UNet {
    spec: NetworkSpec,
    layout: Layout,
    encoder: Vec<EncoderBlock>,
    dense: DenseBlock,
    ups: Vec<UpBlock>,
    head: Conv2d,
    sigmoid: Sigmoid,
}

impl UNet {
    /// Builds and initializes the network; parameters are drawn from a
    /// ChaCha stream seeded with `seed` in block order.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let layout = spec.layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(layout.encoder);
        let mut dense = None;
        let mut ups = Vec::with_capacity(layout.downs);
        for block in &spec.blocks {
            match *block {
                BlockEntry::Transition(s) => encoder.push(EncoderBlock::Transition(TransitionBlock::new(s, &mut rng)?)),
                BlockEntry::Down(s) => encoder.push(EncoderBlock::Down(DownBlock::new(s, &mut rng)?)),
                BlockEntry::Dense(s) => dense = Some(DenseBlock::new(s, &mut rng)?),
                BlockEntry::Up(s) => ups.push(UpBlock::new(s, &mut rng)?),
            }
        }
        let head = Conv2d::new(spec.head_spec()?, &mut rng)?;
        Ok(UNet {
            layout,
            encoder,
            dense: dense.expect("validated layout has a dense block"),
            ups,
            head,
            sigmoid: Sigmoid::default(),
            spec,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }
}

impl SegmentationNetwork for UNet {
    fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    fn forward_with_bottleneck(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        if x.channels() != self.spec.in_channels {
            return Err(Error::config(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels,
                x.channels()
            )));
        }
        self.spec.check_input_size(x.height(), x.width())?;
        let mut skips = Vec::with_capacity(self.layout.downs);
        let mut h = x.clone();
        for block in &mut self.encoder {
            if matches!(block, EncoderBlock::Down(_)) && self.spec.skip_connections {
                skips.push(h.clone());
            }
            h = block.block().forward(&h, mode)?;
        }
        let code = self.dense.forward(&h, mode)?;
        h = code.clone();
        for up in &mut self.ups {
            h = up.forward(&h, mode)?;
            if let Some(skip) = skips.pop() {
                h = Tensor::concat_channels(&[&h, &skip])?;
            }
        }
        let logits = self.head.forward(&h, mode)?;
        Ok((self.sigmoid.forward(&logits, mode), code))
    }

    fn backward(&mut self, d_prob: &Tensor, d_code: Option<&Tensor>) -> Result<Tensor> {
        let d = self.sigmoid.backward(d_prob)?;
        let mut d = self.head.backward(&d)?;
        let downs = self.layout.downs;
        let mut d_skips: Vec<Option<Tensor>> = vec![None; downs];
        for (i, up) in self.ups.iter_mut().enumerate().rev() {
            if self.spec.skip_connections {
                let j = downs - 1 - i;
                let out = up.spec().b;
                let mut parts = d.split_channels(&[out, self.layout.skip_channels[j]]).into_iter();
                d = parts.next().unwrap();
                d_skips[j] = parts.next();
            }
            d = up.backward(&d)?;
        }
        if let Some(dc) = d_code {
            if dc.shape() != d.shape() {
                return Err(Error::shape(format!(
                    "bottleneck gradient {:?} does not match code {:?}",
                    dc.shape(),
                    d.shape()
                )));
            }
            d.add_assign(dc);
        }
        d = self.dense.backward(&d)?;
        let mut down_index = downs;
        for block in self.encoder.iter_mut().rev() {
            d = block.block().backward(&d)?;
            if matches!(block, EncoderBlock::Down(_)) {
                down_index -= 1;
                if let Some(ds) = d_skips[down_index].take() {
                    d.add_assign(&ds);
                }
            }
        }
        Ok(d)
    }
}

impl Parameterized for UNet {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for b in &self.encoder {
            b.params().visit_params(f);
        }
        self.dense.visit_params(f);
        for u in &self.ups {
            u.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.encoder {
            b.block().visit_params_mut(f);
        }
        self.dense.visit_params_mut(f);
        for u in &mut self.ups {
            u.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    first: ConvRelu,
    second: ConvRelu,
}

impl DoubleConv {
    fn new(a: usize, b: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(DoubleConv {
            first: ConvRelu::new(ConvSpec::new(a, b, 3).padding(1), rng)?,
            second: ConvRelu::new(ConvSpec::new(b, b, 3).padding(1), rng)?,
        })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.first.forward(x, mode)?;
        self.second.forward(&h, mode)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let d = self.second.backward(dy)?;
        self.first.backward(&d)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.first.visit_params(f);
        self.second.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.first.visit_params_mut(f);
        self.second.visit_params_mut(f);
    }
}

/// A built plain U-Net.
#[derive(Debug, Clone)]
pub struct OriginalUNet {
    spec: OriginalUNetSpec,
    down: Vec<DoubleConv>,
    pools: Vec<MaxPool2d>,
    up_convs: Vec<ConvTranspose2d>,
    up: Vec<DoubleConv>,
    head: Conv2d,
    sigmoid: Sigmoid,
}

impl OriginalUNet {
    pub fn new(spec: OriginalUNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = spec.widths.len();
        let mut down = Vec::with_capacity(depth);
        let mut c = spec.in_channels;
        for &w in &spec.widths {
            down.push(DoubleConv::new(c, w, &mut rng)?);
            c = w;
        }
        let mut up_convs = Vec::new();
        let mut up = Vec::new();
        for i in (0..depth - 1).rev() {
            let w = spec.widths[i];
            up_convs.push(ConvTranspose2d::new(spec.up_spec(c, w), &mut rng)?);
            up.push(DoubleConv::new(2 * w, w, &mut rng)?);
            c = w;
        }
        let head = Conv2d::new(ConvSpec::new(c, spec.out_channels, 1), &mut rng)?;
        Ok(OriginalUNet {
            pools: (0..depth - 1).map(|_| MaxPool2d::new(2, 2, 0)).collect(),
            spec,
            down,
            up_convs,
            up,
            head,
            sigmoid: Sigmoid::default(),
        })
    }

    pub fn spec(&self) -> &OriginalUNetSpec {
        &self.spec
    }
}

impl SegmentationNetwork for OriginalUNet {
    fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    fn forward_with_bottleneck(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        if x.channels() != self.spec.in_channels {
            return Err(Error::config(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels,
                x.channels()
            )));
        }
        self.spec.check_input_size(x.height(), x.width())?;
        let depth = self.spec.widths.len();
        let mut skips = Vec::with_capacity(depth - 1);
        let mut h = x.clone();
        for i in 0..depth {
            h = self.down[i].forward(&h, mode)?;
            if i + 1 < depth {
                skips.push(h.clone());
                h = self.pools[i].forward(&h, mode)?;
            }
        }
        let code = h.clone();
        for (upc, dc) in self.up_convs.iter_mut().zip(self.up.iter_mut()) {
            let u = upc.forward(&h, mode)?;
            let skip = skips.pop().expect("one skip per level");
            h = dc.forward(&Tensor::concat_channels(&[&u, &skip])?, mode)?;
        }
        let logits = self.head.forward(&h, mode)?;
        Ok((self.sigmoid.forward(&logits, mode), code))
    }

    fn backward(&mut self, d_prob: &Tensor, d_code: Option<&Tensor>) -> Result<Tensor> {
        let depth = self.spec.widths.len();
        let d = self.sigmoid.backward(d_prob)?;
        let mut d = self.head.backward(&d)?;
        let mut d_skips = Vec::with_capacity(depth - 1);
        for (upc, dc) in self.up_convs.iter_mut().zip(self.up.iter_mut()).rev() {
            let dcat = dc.backward(&d)?;
            let w = upc.spec().out_channels;
            let mut parts = dcat.split_channels(&[w, w]).into_iter();
            let du = parts.next().unwrap();
            d_skips.push(parts.next().unwrap());
            d = upc.backward(&du)?;
        }
        if let Some(dc) = d_code {
            d.add_assign(dc);
        }
        // d_skips is ordered from the top level down
        for i in (0..depth).rev() {
            if i + 1 < depth {
                d = self.pools[i].backward(&d)?;
                d.add_assign(&d_skips[i]);
            }
            d = self.down[i].backward(&d)?;
        }
        Ok(d)
    }
}

impl Parameterized for OriginalUNet {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for d in &self.down {
            d.visit_params(f);
        }
        for (u, d) in self.up_convs.iter().zip(&self.up) {
            u.visit_params(f);
            d.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for d in &mut self.down {
            d.visit_params_mut(f);
        }
        for (u, d) in self.up_convs.iter_mut().zip(&mut self.up) {
            u.visit_params_mut(f);
            d.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
}

/// Any network a [`ModelSpec`] can describe.
#[derive(Debug, Clone)]
pub enum Network {
    Base(UNet),
    Original(OriginalUNet),
}

impl Network {
    pub fn spec(&self) -> ModelSpec {
        match self {
            Network::Base(n) => ModelSpec::BaseUnet(n.spec().clone()),
            Network::Original(n) => ModelSpec::OriginalUnet(n.spec().clone()),
        }
    }

    fn inner(&self) -> &dyn SegmentationNetwork {
        match self {
            Network::Base(n) => n,
            Network::Original(n) => n,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn SegmentationNetwork {
        match self {
            Network::Base(n) => n,
            Network::Original(n) => n,
        }
    }
}

impl SegmentationNetwork for Network {
    fn in_channels(&self) -> usize {
        self.inner().in_channels()
    }

    fn forward_with_bottleneck(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        self.inner_mut().forward_with_bottleneck(x, mode)
    }

    fn backward(&mut self, d_prob: &Tensor, d_code: Option<&Tensor>) -> Result<Tensor> {
        self.inner_mut().backward(d_prob, d_code)
    }
}

impl Parameterized for Network {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.inner().visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.inner_mut().visit_params_mut(f)
    }
}

/// Builds the segmentation U-Net (skip connections required).
pub fn build_base_unet(spec: &NetworkSpec, seed: u64) -> Result<UNet> {
    if !spec.skip_connections {
        return Err(Error::config("the base U-Net requires skip connections"));
    }
    UNet::new(spec.clone(), seed)
}

/// Builds the skip-less encoding U-Net. Accepts either a skip-less spec or a
/// base spec, which is converted with [`NetworkSpec::encoding_variant`].
pub fn build_encoding_unet(spec: &NetworkSpec, seed: u64) -> Result<UNet> {
    let spec = if spec.skip_connections {
        spec.encoding_variant()?
    } else {
        spec.clone()
    };
    UNet::new(spec, seed)
}

pub fn build_original_unet(spec: &OriginalUNetSpec, seed: u64) -> Result<OriginalUNet> {
    OriginalUNet::new(spec.clone(), seed)
}

/// Flattens each sample of a bottleneck feature map into its code vector.
pub fn flatten_codes(code: &Tensor) -> Vec<Vec<f64>> {
    (0..code.batch()).map(|i| code.sample(i).to_vec()).collect()
}

/// Exact count of trainable scalars held by a built network or block.
pub fn count_parameters(model: &dyn Parameterized) -> usize {
    model.num_parameters()
}

/// A base U-Net schedule with the stem transition, five doubling down
/// blocks, a dense bottleneck and mirrored up blocks.
///
/// `down_inner` and `up_inner` map `(a, b)` of each block to its inner width.
pub fn doubling_schedule(
    in_channels: usize,
    widths: &[usize],
    growth: usize,
    up_kernel: usize,
    down_inner: impl Fn(usize, usize) -> usize,
    up_inner: impl Fn(usize, usize, usize) -> usize,
    skip_connections: bool,
) -> NetworkSpec {
    let mut blocks = vec![BlockEntry::Transition(TransitionBlockSpec {
        a: in_channels,
        b: widths[0],
    })];
    for pair in widths.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        blocks.push(BlockEntry::Down(DownBlockSpec {
            a,
            p: down_inner(a, b),
            b,
        }));
    }
    let bottom = *widths.last().expect("non-empty widths");
    blocks.push(BlockEntry::Dense(DenseBlockSpec { a: bottom, k: growth }));
    let mut c = bottom;
    for (i, &b) in widths[..widths.len() - 1].iter().rev().enumerate() {
        blocks.push(BlockEntry::Up(UpBlockSpec {
            a: c,
            p: up_inner(i, c, b),
            b,
            k: up_kernel,
        }));
        c = if skip_connections { 2 * b } else { b };
    }
    NetworkSpec {
        name: String::new(),
        in_channels,
        out_channels: 1,
        skip_connections,
        blocks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(in_channels: usize) -> NetworkSpec {
        doubling_schedule(in_channels, &[2, 2, 3, 3, 4, 4], 2, 4, |a, _| a, |_, _, b| b, true)
    }

    #[test]
    fn tiny_spec_is_consistent() {
        let spec = tiny(1);
        let layout = spec.layout().unwrap();
        assert_eq!(layout.downs, 5);
        assert_eq!(layout.skip_channels, vec![2, 2, 3, 3, 4]);
        assert_eq!(layout.head_in, 4);
    }

    #[test]
    fn broken_chain_names_offending_block() {
        let mut spec = tiny(1);
        if let BlockEntry::Down(d) = &mut spec.blocks[2] {
            d.a = 7;
        }
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("block #2 (down)"), "{err}");
    }

    #[test]
    fn rejects_wrong_inception_count() {
        let mut spec = tiny(1);
        spec.blocks.remove(0);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn without_skips_shrinks_up_inputs() {
        let spec = tiny(1);
        let enc = spec.without_skips().unwrap();
        let ups: Vec<usize> = enc
            .blocks
            .iter()
            .filter_map(|b| match b {
                BlockEntry::Up(u) => Some(u.a),
                _ => None,
            })
            .collect();
        assert_eq!(ups, vec![4, 4, 3, 3, 2]);
        assert_eq!(enc.layout().unwrap().head_in, 2);
    }

    #[test]
    fn analytic_count_matches_built_network() {
        for spec in [tiny(1), tiny(3), tiny(1).without_skips().unwrap()] {
            let net = UNet::new(spec.clone(), 0).unwrap();
            assert_eq!(count_parameters(&net), spec.num_parameters().unwrap());
        }
        let orig = OriginalUNetSpec {
            name: String::new(),
            in_channels: 1,
            out_channels: 1,
            widths: vec![2, 3, 4],
            up_kernel: 2,
        };
        let net = OriginalUNet::new(orig.clone(), 0).unwrap();
        assert_eq!(count_parameters(&net), orig.num_parameters().unwrap());
    }

    #[test]
    fn model_spec_toml_round_trip() {
        let spec = ModelSpec::BaseUnet(tiny(1));
        let text = spec.to_toml_string().unwrap();
        assert_eq!(ModelSpec::from_toml_str(&text).unwrap(), spec);
    }
}
