//! Network variants as explicit layer graphs.
//!
//! Each variant is a single path of typed layers plus skip edges. A `Tap`
//! layer stores the current activation in a numbered slot and a later
//! `Concat` layer appends it (decoder channels first, encoder channels
//! second). Max-pools that feed an unpool publish their indices on a
//! numbered level; levels must be consumed in LIFO order.
//!
//! Channel widths are a reconstruction. With encoder widths 64/128/256,
//! batch normalization after every 3×3 conv except the classifier, and a
//! biased 1×1 merge conv (no BN) behind each skip, the learnable parameter
//! totals come out at 3,475,396 for SegNet and 3,483,652 for U-SegNet.

mod checkpoint;
mod exec;
pub mod gradcheck;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{checkpoint_size, load_weights, save_weights, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use exec::{ForwardCache, ForwardOutput};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormParams, ConvParams, Param, UpConvParams};

pub const INPUT_CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 4;
pub const PATCH_SIDE: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    SegNet,
    USegNet,
    USegNet2,
    UNetVariant,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [Self::SegNet, Self::USegNet, Self::USegNet2, Self::UNetVariant];

    pub fn name(self) -> &'static str {
        match self {
            Self::SegNet => "segnet",
            Self::USegNet => "usegnet",
            Self::USegNet2 => "usegnet2",
            Self::UNetVariant => "unet",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "segnet" => Ok(Self::SegNet),
            "usegnet" => Ok(Self::USegNet),
            "usegnet2" => Ok(Self::USegNet2),
            "unet" | "unetvariant" => Ok(Self::UNetVariant),
            _ => Err(Error::InvalidArgument(format!(
                "unknown model '{s}' (expected segnet, usegnet, usegnet2 or unet)"
            ))),
        }
    }
}

/// Channel widths and initialization seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Encoder widths at 40×40, 20×20 and 10×10.
    pub widths: [usize; 3],
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            widths: [64, 128, 256],
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// All widths divided by `divisor` (used for fast gradient checks).
    pub fn reduced(divisor: usize, seed: u64) -> Self {
        let d = divisor.max(1);
        Self {
            widths: [64 / d, 128 / d, 256 / d].map(|w| w.max(1)),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        params: ConvParams,
        padding: usize,
    },
    BatchNorm(BatchNormParams),
    Relu,
    /// `level: Some(l)` publishes the argmax indices for the unpool of level `l`.
    Pool {
        level: Option<usize>,
    },
    Unpool {
        level: usize,
    },
    UpConv(UpConvParams),
    Tap {
        slot: usize,
    },
    Concat {
        slot: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match &self.kind {
            LayerKind::Conv { params, .. } => params.param_count(),
            LayerKind::BatchNorm(bn) => bn.param_count(),
            LayerKind::UpConv(p) => p.param_count(),
            _ => 0,
        }
    }

    pub fn is_parametric(&self) -> bool {
        self.param_count() > 0
    }

    pub fn params(&self) -> Vec<&Param> {
        match &self.kind {
            LayerKind::Conv { params, .. } => vec![&params.weights, &params.bias],
            LayerKind::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            LayerKind::UpConv(p) => vec![&p.weights, &p.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.kind {
            LayerKind::Conv { params, .. } => vec![&mut params.weights, &mut params.bias],
            LayerKind::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            LayerKind::UpConv(p) => vec![&mut p.weights, &mut p.bias],
            _ => Vec::new(),
        }
    }

    /// Canonical description used for the topology fingerprint.
    fn spec(&self) -> String {
        match &self.kind {
            LayerKind::Conv { params, padding } => format!(
                "conv{k}x{k}({},{},p{padding})",
                params.in_channels,
                params.out_channels,
                k = params.kernel
            ),
            LayerKind::BatchNorm(bn) => format!("bn({})", bn.channels),
            LayerKind::Relu => "relu".into(),
            LayerKind::Pool { level: Some(l) } => format!("pool@{l}"),
            LayerKind::Pool { level: None } => "pool".into(),
            LayerKind::Unpool { level } => format!("unpool@{level}"),
            LayerKind::UpConv(p) => format!("upconv2x2({},{})", p.in_channels, p.out_channels),
            LayerKind::Tap { slot } => format!("tap#{slot}"),
            LayerKind::Concat { slot } => format!("concat#{slot}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    variant: Option<ModelVariant>,
    layers: Vec<Layer>,
}

impl LayerGraph {
    /// Validates the structural invariants: channel/resolution consistency on a
    /// 40×40 input, LIFO pool/unpool pairing, and same-resolution skip edges.
    pub fn new(variant: Option<ModelVariant>, layers: Vec<Layer>) -> Result<Self> {
        let g = Self { variant, layers };
        g.validate()?;
        Ok(g)
    }

    pub fn empty() -> Self {
        Self {
            variant: None,
            layers: Vec::new(),
        }
    }

    pub fn build(variant: ModelVariant, cfg: &NetConfig) -> Self {
        let layers = match variant {
            ModelVariant::SegNet => index_net(cfg, false, false),
            ModelVariant::USegNet => index_net(cfg, true, false),
            ModelVariant::USegNet2 => index_net(cfg, true, true),
            ModelVariant::UNetVariant => unet_variant(cfg),
        };
        Self::new(Some(variant), layers).expect("built-in variants are valid")
    }

    pub fn variant(&self) -> Option<ModelVariant> {
        self.variant
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_id(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Conv weights + biases and BN gamma/beta.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// (layer name, learnable count) for every parametric layer, in graph order.
    pub fn param_breakdown(&self) -> Vec<(&str, usize)> {
        self.layers
            .iter()
            .filter(|l| l.is_parametric())
            .map(|l| (l.name.as_str(), l.param_count()))
            .collect()
    }

    pub fn parametric_layer_ids(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_parametric())
            .collect()
    }

    pub fn spec_string(&self) -> String {
        let mut s = self.layers.iter().map(Layer::spec).collect::<Vec<_>>().join(";");
        s.push_str(";softmax");
        s
    }

    /// FNV-1a hash of the layer spec string.
    pub fn fingerprint(&self) -> u64 {
        self.spec_string().bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            layer.params_mut().into_iter().for_each(Param::zero_grad);
        }
    }

    pub fn batchnorms(&self) -> impl Iterator<Item = &BatchNormParams> {
        self.layers.iter().filter_map(|l| match &l.kind {
            LayerKind::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    /// Whether any index-publishing pool feeds an unpool.
    pub fn uses_pool_indices(&self) -> bool {
        self.layers.iter().any(|l| matches!(l.kind, LayerKind::Unpool { .. }))
    }

    fn validate(&self) -> Result<()> {
        let bad = |i: usize, msg: String| Error::InvalidGraph(format!("layer {i} ({}): {msg}", self.layers[i].name));
        let (mut c, mut h, mut w) = (INPUT_CHANNELS, PATCH_SIDE, PATCH_SIDE);
        let mut levels: Vec<(usize, usize, usize)> = Vec::new(); // (level, h, w) before pooling
        let mut taps: Vec<Option<(usize, usize, usize)>> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::Conv { params, padding } => {
                    if params.in_channels != c {
                        return Err(bad(i, format!("expects {} channels, receives {c}", params.in_channels)));
                    }
                    if 2 * padding + 1 != params.kernel {
                        return Err(bad(i, "padding must preserve spatial size".into()));
                    }
                    c = params.out_channels;
                }
                LayerKind::BatchNorm(bn) => {
                    if bn.channels != c {
                        return Err(bad(i, format!("expects {} channels, receives {c}", bn.channels)));
                    }
                }
                LayerKind::Relu => {}
                LayerKind::Pool { level } => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(bad(i, format!("cannot pool {h}x{w}")));
                    }
                    if let Some(l) = level {
                        levels.push((*l, h, w));
                    }
                    h /= 2;
                    w /= 2;
                }
                LayerKind::Unpool { level } => match levels.pop() {
                    Some((l, ph, pw)) if l == *level && ph == 2 * h && pw == 2 * w => {
                        h = ph;
                        w = pw;
                    }
                    Some((l, ..)) => return Err(bad(i, format!("consumes level {level}, but level {l} is on top"))),
                    None => return Err(bad(i, format!("no pool indices for level {level}"))),
                },
                LayerKind::UpConv(p) => {
                    if p.in_channels != c {
                        return Err(bad(i, format!("expects {} channels, receives {c}", p.in_channels)));
                    }
                    c = p.out_channels;
                    h *= 2;
                    w *= 2;
                }
                LayerKind::Tap { slot } => {
                    if taps.len() <= *slot {
                        taps.resize(slot + 1, None);
                    }
                    taps[*slot] = Some((c, h, w));
                }
                LayerKind::Concat { slot } => match taps.get(*slot).copied().flatten() {
                    Some((tc, th, tw)) if th == h && tw == w => c += tc,
                    Some((_, th, tw)) => return Err(bad(i, format!("skip from {th}x{tw} into {h}x{w}"))),
                    None => return Err(bad(i, format!("no tap for slot {slot}"))),
                },
            }
        }
        if let Some((l, ..)) = levels.last() {
            return Err(Error::InvalidGraph(format!("pool level {l} never unpooled")));
        }
        if !self.layers.is_empty() && (c != NUM_CLASSES || h != PATCH_SIDE || w != PATCH_SIDE) {
            return Err(Error::InvalidGraph(format!(
                "graph ends with {c} channels at {h}x{w}, expected {NUM_CLASSES} at {PATCH_SIDE}x{PATCH_SIDE}"
            )));
        }
        Ok(())
    }
}

pub fn build_segnet(cfg: &NetConfig) -> LayerGraph {
    LayerGraph::build(ModelVariant::SegNet, cfg)
}

pub fn build_usegnet(cfg: &NetConfig) -> LayerGraph {
    LayerGraph::build(ModelVariant::USegNet, cfg)
}

pub fn build_usegnet2(cfg: &NetConfig) -> LayerGraph {
    LayerGraph::build(ModelVariant::USegNet2, cfg)
}

pub fn build_unet_variant(cfg: &NetConfig) -> LayerGraph {
    LayerGraph::build(ModelVariant::UNetVariant, cfg)
}

struct Builder {
    layers: Vec<Layer>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            layers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: impl Into<String>, kind: LayerKind) {
        self.layers.push(Layer {
            name: name.into(),
            kind,
        });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize) {
        let params = ConvParams::he_normal(cin, cout, kernel, &mut self.rng);
        self.push(
            name,
            LayerKind::Conv {
                params,
                padding: kernel / 2,
            },
        );
    }

    /// 3×3 conv followed by batch normalization and ReLU.
    fn conv_block(&mut self, name: &str, cin: usize, cout: usize) {
        self.conv(name, cin, cout, 3);
        self.push(format!("{name}.bn"), LayerKind::BatchNorm(BatchNormParams::new(cout)));
        self.push(format!("{name}.relu"), LayerKind::Relu);
    }

    /// Concatenates skip `slot` and consolidates `2·width` channels back to `width` with a biased 1×1 conv.
    fn skip_merge(&mut self, prefix: &str, slot: usize, width: usize) {
        self.push(format!("{prefix}.concat"), LayerKind::Concat { slot });
        self.conv(&format!("{prefix}.merge"), 2 * width, width, 1);
        self.push(format!("{prefix}.merge.relu"), LayerKind::Relu);
    }

    fn upconv(&mut self, name: &str, cin: usize, cout: usize) {
        let p = UpConvParams::he_normal(cin, cout, &mut self.rng);
        self.push(name, LayerKind::UpConv(p));
    }

    fn finish(self) -> Vec<Layer> {
        self.layers
    }
}

/// SegNet-style network with index unpooling; optional skips at the top (40×40)
/// and second (20×20) decoder levels.
fn index_net(cfg: &NetConfig, top_skip: bool, second_skip: bool) -> Vec<Layer> {
    let [a, b, c] = cfg.widths;
    let mut n = Builder::new(cfg.seed);
    n.conv_block("enc1.conv1", INPUT_CHANNELS, a);
    n.conv_block("enc1.conv2", a, a);
    if top_skip {
        n.push("enc1.tap", LayerKind::Tap { slot: 0 });
    }
    n.push("enc1.pool", LayerKind::Pool { level: Some(1) });
    n.conv_block("enc2.conv1", a, b);
    n.conv_block("enc2.conv2", b, b);
    if second_skip {
        n.push("enc2.tap", LayerKind::Tap { slot: 1 });
    }
    n.push("enc2.pool", LayerKind::Pool { level: Some(2) });
    n.conv_block("enc3.conv1", b, c);
    n.conv_block("enc3.conv2", c, c);
    n.conv_block("enc3.conv3", c, c);
    n.push("enc3.pool", LayerKind::Pool { level: Some(3) });

    n.push("dec3.unpool", LayerKind::Unpool { level: 3 });
    n.conv_block("dec3.conv1", c, c);
    n.conv_block("dec3.conv2", c, c);
    n.conv_block("dec3.conv3", c, b);
    n.push("dec2.unpool", LayerKind::Unpool { level: 2 });
    if second_skip {
        n.skip_merge("dec2", 1, b);
    }
    n.conv_block("dec2.conv1", b, b);
    n.conv_block("dec2.conv2", b, a);
    n.push("dec1.unpool", LayerKind::Unpool { level: 1 });
    if top_skip {
        n.skip_merge("dec1", 0, a);
    }
    n.conv_block("dec1.conv1", a, a);
    n.conv("classifier", a, NUM_CLASSES, 3);
    n.finish()
}

/// Same encoder; learnable 2×2 stride-2 upsampling and a skip at every level,
/// each merged by a 3×3 conv over the doubled channels.
fn unet_variant(cfg: &NetConfig) -> Vec<Layer> {
    let [a, b, c] = cfg.widths;
    let mut n = Builder::new(cfg.seed);
    n.conv_block("enc1.conv1", INPUT_CHANNELS, a);
    n.conv_block("enc1.conv2", a, a);
    n.push("enc1.tap", LayerKind::Tap { slot: 0 });
    n.push("enc1.pool", LayerKind::Pool { level: None });
    n.conv_block("enc2.conv1", a, b);
    n.conv_block("enc2.conv2", b, b);
    n.push("enc2.tap", LayerKind::Tap { slot: 1 });
    n.push("enc2.pool", LayerKind::Pool { level: None });
    n.conv_block("enc3.conv1", b, c);
    n.conv_block("enc3.conv2", c, c);
    n.conv_block("enc3.conv3", c, c);
    n.push("enc3.tap", LayerKind::Tap { slot: 2 });
    n.push("enc3.pool", LayerKind::Pool { level: None });

    n.upconv("dec3.up", c, c);
    n.push("dec3.concat", LayerKind::Concat { slot: 2 });
    n.conv_block("dec3.conv1", 2 * c, c);
    n.conv_block("dec3.conv2", c, c);
    n.conv_block("dec3.conv3", c, b);
    n.upconv("dec2.up", b, b);
    n.push("dec2.concat", LayerKind::Concat { slot: 1 });
    n.conv_block("dec2.conv1", 2 * b, b);
    n.conv_block("dec2.conv2", b, a);
    n.upconv("dec1.up", a, a);
    n.push("dec1.concat", LayerKind::Concat { slot: 0 });
    n.conv_block("dec1.conv1", 2 * a, a);
    n.conv("classifier", a, NUM_CLASSES, 3);
    n.finish()
}
