//! The full U-shaped network: three conv encoder stages, the K-Attention +
//! Fusion-Layer stage, a patch-embedding bottleneck, and three MSAGF decoder
//! levels ending in a 1×1 classification head.

use crate::attention::{k_attention_forward, KAttentionParams};
use crate::error::{Error, Result};
use crate::fusion::{from_tokens, fusion_forward, to_tokens, FusionLayerParams};
use crate::msagf::{msagf_fuse, MsagfParams};
use crate::tensor::{he_uniform, BatchNormState, ParamId, ParamStore, Rng, Session, Tensor, Var};

/// Which of the three contributed blocks are active. A disabled block is
/// replaced by the identity (attention, fusion layer) or by a plain sum of
/// the two inputs (MSAGF).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleSet {
    pub k_attention: bool,
    pub fusion_layer: bool,
    pub msagf: bool,
}

impl ModuleSet {
    pub const ALL: Self = Self {
        k_attention: true,
        fusion_layer: true,
        msagf: true,
    };
    pub const NONE: Self = Self {
        k_attention: false,
        fusion_layer: false,
        msagf: false,
    };
}

impl Default for ModuleSet {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RichUNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_channels: [usize; 3],
    pub heads: usize,
    pub topk: usize,
    pub drop_rate: f64,
    pub patch_size: usize,
    pub bottleneck_channels: usize,
    pub reduction: usize,
    pub modules: ModuleSet,
}

impl Default for RichUNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            stage_channels: [16, 32, 64],
            heads: 4,
            topk: 8,
            drop_rate: 0.1,
            patch_size: 2,
            bottleneck_channels: 128,
            reduction: 4,
            modules: ModuleSet::ALL,
        }
    }
}

impl RichUNetConfig {
    /// Small configuration used for desk-scale training runs.
    pub fn micro() -> Self {
        Self {
            stage_channels: [8, 16, 32],
            heads: 2,
            topk: 8,
            bottleneck_channels: 32,
            ..Self::default()
        }
    }

    /// Tiny configuration for end-to-end gradient checks.
    pub fn gradcheck() -> Self {
        Self {
            stage_channels: [2, 3, 4],
            heads: 2,
            topk: 4,
            drop_rate: 0.0,
            bottleneck_channels: 4,
            reduction: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 {
            return fail("in_channels must be >= 1".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be >= 1".into());
        }
        let [a, b, c] = self.stage_channels;
        if a == 0 || !(a < b && b < c) {
            return fail(format!("stage_channels ascending: got {:?}", self.stage_channels));
        }
        if self.heads == 0 || c % self.heads != 0 {
            return fail(format!("heads {} must divide stage_channels[2] = {c}", self.heads));
        }
        if self.bottleneck_channels == 0 || !self.bottleneck_channels.is_multiple_of(self.heads) {
            return fail(format!(
                "bottleneck_channels {} must be divisible by heads {}",
                self.bottleneck_channels, self.heads
            ));
        }
        if self.topk == 0 {
            return fail("topk must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return fail(format!("drop_rate {} outside [0, 1)", self.drop_rate));
        }
        if !self.patch_size.is_power_of_two() {
            return fail(format!("patch_size {} must be a power of two", self.patch_size));
        }
        if self.reduction == 0 || self.stage_channels.iter().any(|ch| ch % self.reduction != 0) {
            return fail(format!(
                "reduction {} must divide every stage channel count {:?}",
                self.reduction, self.stage_channels
            ));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        8 * self.patch_size
    }

    pub fn validate_input(&self, shape: &[usize]) -> Result<()> {
        let d = self.spatial_divisor();
        match *shape {
            [_, c, h, w] if c == self.in_channels && h % d == 0 && w % d == 0 => Ok(()),
            _ => Err(Error::Shape {
                op: "rich_unet",
                detail: format!(
                    "input {shape:?} must be [B,{},H,W] with H, W divisible by {d}",
                    self.in_channels
                ),
            }),
        }
    }
}

/// 3×3 (or patch-size) convolution without bias, then batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub weight: ParamId,
    pub bn: BatchNormState,
    pub stride: usize,
    pub padding: usize,
}

impl ConvBnRelu {
    fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, rng: &mut Rng) -> Self {
        let weight = store.add_param(
            format!("{prefix}.weight"),
            he_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
        );
        Self {
            weight,
            bn: BatchNormState::new(store, &format!("{prefix}.bn"), cout),
            stride,
            padding,
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.tape.conv2d(x, w, None, self.stride, self.padding)?;
        let y = self.bn.forward(s, y)?;
        s.tape.relu(y)
    }
}

/// 1×1 convolution with bias.
#[derive(Debug, Clone)]
pub struct PointwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PointwiseConv {
    fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self {
            weight: store.add_param(format!("{prefix}.weight"), he_uniform(&[cout, cin, 1, 1], cin, rng)),
            bias: store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        s.tape.conv2d(x, w, Some(b), 1, 0)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLevel {
    pub channel_match: PointwiseConv,
    pub msagf: Option<MsagfParams>,
    pub block: ConvBnRelu,
}

/// Outputs of the bottleneck.
pub struct BottleneckOutput {
    /// Patch embedding, `[B, bottleneck_channels, h/p, w/p]`.
    pub embedded: Var,
    /// Projected back to `stage_channels[2]` at `h × w`.
    pub restored: Var,
}

pub struct Encoded {
    /// Pre-pool activations of the three stages, finest first.
    pub skips: [Var; 3],
    pub deepest: Var,
}

#[derive(Debug, Clone)]
pub struct RichUNet {
    config: RichUNetConfig,
    store: ParamStore,
    encoder: Vec<[ConvBnRelu; 2]>,
    attention: Option<KAttentionParams>,
    fusion: Option<FusionLayerParams>,
    patch_embed: ConvBnRelu,
    bottleneck_proj: PointwiseConv,
    decoder: Vec<DecoderLevel>,
    head: PointwiseConv,
}

impl RichUNet {
    pub fn build(config: &RichUNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let [c0, c1, c2] = config.stage_channels;

        let mut encoder = Vec::with_capacity(3);
        let mut cin = config.in_channels;
        for (i, &ch) in config.stage_channels.iter().enumerate() {
            encoder.push([
                ConvBnRelu::new(&mut store, &format!("enc{i}.conv0"), cin, ch, 3, 1, 1, rng),
                ConvBnRelu::new(&mut store, &format!("enc{i}.conv1"), ch, ch, 3, 1, 1, rng),
            ]);
            cin = ch;
        }

        let attention = config
            .modules
            .k_attention
            .then(|| KAttentionParams::new(&mut store, "kattn", c2, config.heads, config.topk, config.drop_rate, rng))
            .transpose()?;
        let fusion = config
            .modules
            .fusion_layer
            .then(|| FusionLayerParams::new(&mut store, "fusion", c2, rng))
            .transpose()?;

        let p = config.patch_size;
        let patch_embed = ConvBnRelu::new(&mut store, "bottleneck.embed", c2, config.bottleneck_channels, p, p, 0, rng);
        let bottleneck_proj = PointwiseConv::new(&mut store, "bottleneck.proj", config.bottleneck_channels, c2, rng);

        let mut decoder = Vec::with_capacity(3);
        let mut prev = c2;
        for (level, &skip_ch) in [c2, c1, c0].iter().enumerate() {
            let prefix = format!("dec{level}");
            let channel_match = PointwiseConv::new(&mut store, &format!("{prefix}.match"), prev, skip_ch, rng);
            let msagf = config
                .modules
                .msagf
                .then(|| MsagfParams::new(&mut store, &format!("{prefix}.msagf"), skip_ch, config.reduction, rng))
                .transpose()?;
            let block = ConvBnRelu::new(&mut store, &format!("{prefix}.conv"), skip_ch, skip_ch, 3, 1, 1, rng);
            decoder.push(DecoderLevel {
                channel_match,
                msagf,
                block,
            });
            prev = skip_ch;
        }
        let head = PointwiseConv::new(&mut store, "head", c0, config.num_classes, rng);

        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            attention,
            fusion,
            patch_embed,
            bottleneck_proj,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &RichUNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn attention(&self) -> Option<&KAttentionParams> {
        self.attention.as_ref()
    }

    pub fn fusion(&self) -> Option<&FusionLayerParams> {
        self.fusion.as_ref()
    }

    pub fn decoder(&self) -> &[DecoderLevel] {
        &self.decoder
    }

    pub fn encode(&self, s: &mut Session, x: Var) -> Result<Encoded> {
        self.config.validate_input(s.tape.shape(x))?;
        let mut h = x;
        let mut skips = Vec::with_capacity(3);
        for [a, b] in &self.encoder {
            h = a.forward(s, h)?;
            h = b.forward(s, h)?;
            skips.push(h);
            h = s.tape.maxpool2d(h, 2)?;
        }
        Ok(Encoded {
            skips: [skips[0], skips[1], skips[2]],
            deepest: h,
        })
    }

    /// K-Attention over the deepest map's pixel tokens, then the Fusion-Layer.
    pub fn attend_stage(&self, s: &mut Session, deepest: Var) -> Result<Var> {
        let (h, w) = {
            let shape = s.tape.shape(deepest);
            (shape[2], shape[3])
        };
        let mut out = deepest;
        if let Some(p) = &self.attention {
            let tokens = to_tokens(s, out)?;
            let attended = k_attention_forward(s, tokens, p)?;
            out = from_tokens(s, attended, h, w)?;
        }
        if let Some(p) = &self.fusion {
            out = fusion_forward(s, out, p)?;
        }
        Ok(out)
    }

    pub fn bottleneck(&self, s: &mut Session, x: Var) -> Result<BottleneckOutput> {
        let p = self.config.patch_size;
        let shape = s.tape.shape(x);
        if shape.len() != 4 || !shape[2].is_multiple_of(p) || !shape[3].is_multiple_of(p) {
            return Err(Error::Shape {
                op: "bottleneck",
                detail: format!("{shape:?} not divisible by patch size {p}"),
            });
        }
        let embedded = self.patch_embed.forward(s, x)?;
        let mut restored = self.bottleneck_proj.forward(s, embedded)?;
        for _ in 0..p.trailing_zeros() {
            restored = s.tape.upsample2x(restored)?;
        }
        Ok(BottleneckOutput { embedded, restored })
    }

    /// Three decoder levels, coarsest first, each fusing with its skip.
    pub fn decode(&self, s: &mut Session, x: Var, skips: &[Var; 3]) -> Result<Var> {
        let mut h = x;
        for (level, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = s.tape.upsample2x(h)?;
            let matched = level.channel_match.forward(s, up)?;
            let fused = match &level.msagf {
                Some(p) => msagf_fuse(s, matched, *skip, p)?,
                None => s.tape.add(matched, *skip)?,
            };
            h = level.block.forward(s, fused)?;
        }
        Ok(h)
    }

    /// Logits `[B, num_classes, H, W]` for an input `[B, in_channels, H, W]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let enc = self.encode(s, x)?;
        let attended = self.attend_stage(s, enc.deepest)?;
        let bridge = self.bottleneck(s, attended)?;
        let decoded = self.decode(s, bridge.restored, &enc.skips)?;
        self.head.forward(s, decoded)
    }
}

/// Per-pixel argmax over the class axis of `[B,K,H,W]` logits; returns one
/// label map per batch item.
pub fn argmax_classes(logits: &Tensor) -> Vec<Vec<usize>> {
    let [b, k, h, w] = *logits.shape() else {
        panic!("argmax_classes expects [B,K,H,W], got {:?}", logits.shape());
    };
    let plane = h * w;
    (0..b)
        .map(|n| {
            (0..plane)
                .map(|i| {
                    (0..k)
                        .max_by(|&a, &c| {
                            let va = logits.data()[(n * k + a) * plane + i];
                            let vc = logits.data()[(n * k + c) * plane + i];
                            va.total_cmp(&vc).then(c.cmp(&a))
                        })
                        .unwrap()
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn config_rejections() {
        let mut c = RichUNetConfig {
            stage_channels: [32, 16, 8],
            ..RichUNetConfig::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("stage_channels ascending"), "{err}");
        c = RichUNetConfig {
            num_classes: 0,
            ..RichUNetConfig::default()
        };
        assert!(c.validate().is_err());
        c = RichUNetConfig {
            patch_size: 3,
            ..RichUNetConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(RichUNetConfig::default().validate().is_ok());
        assert!(RichUNetConfig::micro().validate().is_ok());
        assert!(RichUNetConfig::gradcheck().validate().is_ok());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let logits = Tensor::new(&[1, 2, 1, 3], vec![0.0, 1.0, 2.0, 0.0, 3.0, 2.0]).unwrap();
        assert_eq!(argmax_classes(&logits), vec![vec![0, 1, 0]]);
    }

    #[test]
    fn ablation_has_no_block_params() {
        let config = RichUNetConfig {
            modules: ModuleSet::NONE,
            ..RichUNetConfig::micro()
        };
        let net = RichUNet::build(&config, &mut seeded_rng(0)).unwrap();
        assert!(net.attention().is_none() && net.fusion().is_none());
        assert!(net.store().params().all(|(n, _)| !n.contains("msagf")));
    }
}
