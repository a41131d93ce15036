//! The joint encoder and decoder.
//!
//! Encoder: 3×3 stem, then per stage a residual block and a stride-2
//! convolution, then three residual blocks with one attention block at the
//! deepest width, then GroupNorm, Swish and the two-convolution latent head.
//! The decoder mirrors it with nearest-neighbour upsampling and ends in Tanh.

pub mod checkpoint;
pub mod layers;
pub mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coding::LatentStats;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use layers::{
    join, AttentionBlock, Block, BlockCache, Conv2d, ConvCache, GroupNorm, Module, Param, ResBlock,
    Sequential, Visit, VisitMut,
};

fn default_input_channels() -> usize {
    3
}

fn default_stage_widths() -> Vec<usize> {
    vec![32, 64, 128, 192]
}

fn default_latent_channels() -> usize {
    16
}

fn default_group_size() -> usize {
    32
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub image_size: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    #[serde(default = "default_stage_widths")]
    pub stage_widths: Vec<usize>,
    #[serde(default = "default_latent_channels")]
    pub latent_channels: usize,
    #[serde(default = "default_group_size")]
    pub groupnorm_group_size: usize,
    #[serde(default = "default_true")]
    pub attention_enabled: bool,
    #[serde(default = "default_true")]
    pub emit_variance: bool,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            image_size: 256,
            input_channels: default_input_channels(),
            stage_widths: default_stage_widths(),
            latent_channels: default_latent_channels(),
            groupnorm_group_size: default_group_size(),
            attention_enabled: true,
            emit_variance: true,
        }
    }
}

impl ArchitectureConfig {
    /// 32×32 images, two stages, four latent channels.
    pub fn desk() -> Self {
        ArchitectureConfig {
            image_size: 32,
            stage_widths: vec![32, 64],
            latent_channels: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stage_widths.is_empty() {
            return fail("stage_widths must not be empty".into());
        }
        if self.stage_widths.contains(&0) {
            return fail("stage widths must be positive".into());
        }
        if self.input_channels == 0 || self.latent_channels == 0 || self.groupnorm_group_size == 0 {
            return fail("channel counts and group size must be positive".into());
        }
        let factor = 1usize
            .checked_shl(self.stage_widths.len() as u32)
            .filter(|f| *f <= self.image_size.max(1));
        match factor {
            Some(f) if self.image_size > 0 && self.image_size % f == 0 => Ok(()),
            _ => fail(format!(
                "image_size {} is not divisible by 2^{} (one halving per stage)",
                self.image_size,
                self.stage_widths.len()
            )),
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size >> self.stage_widths.len()
    }

    /// `[k, h, w]` of one latent map.
    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.latent_size();
        [self.latent_channels, s, s]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.input_channels, self.image_size, self.image_size]
    }

    /// Channel symbols per source value; doubled when the variance map is sent too.
    pub fn bandwidth_ratio(&self, transmit_variance: bool) -> f64 {
        let [k, h, w] = self.latent_shape();
        let [c, hh, ww] = self.image_shape();
        let factor = if transmit_variance { 2.0 } else { 1.0 };
        factor * (k * h * w) as f64 / (c * hh * ww) as f64
    }

    fn head_channels(&self) -> usize {
        if self.emit_variance {
            2 * self.latent_channels
        } else {
            self.latent_channels
        }
    }

    fn deepest(&self) -> usize {
        *self.stage_widths.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone)]
pub enum EncoderOutput<T> {
    Stats(LatentStats<T>),
    Latent(Tensor<T>),
}

impl<T: Scalar> EncoderOutput<T> {
    /// The map that is put on the channel.
    pub fn mean(&self) -> &Tensor<T> {
        match self {
            EncoderOutput::Stats(s) => s.mean(),
            EncoderOutput::Latent(z) => z,
        }
    }

    pub fn stats(&self) -> Option<&LatentStats<T>> {
        match self {
            EncoderOutput::Stats(s) => Some(s),
            EncoderOutput::Latent(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    config: ArchitectureConfig,
    body: Sequential<T>,
    head: Sequential<T>,
    pre_channel: Conv2d<T>,
}

pub struct EncoderCache<T> {
    body: Vec<BlockCache<T>>,
    head: Vec<BlockCache<T>>,
    pre_channel: ConvCache<T>,
}

fn res<T: Scalar, R: Rng + ?Sized>(
    cfg: &ArchitectureConfig,
    cin: usize,
    cout: usize,
    rng: &mut R,
) -> Block<T> {
    Block::Res(ResBlock::new(cin, cout, cfg.groupnorm_group_size, rng))
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(config: &ArchitectureConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut body = Sequential::new();
        body.push(Block::Conv(Conv2d::new(c.input_channels, c.stage_widths[0], 3, 1, rng)));
        let mut prev = c.stage_widths[0];
        for &w in &c.stage_widths {
            body.push(res(c, prev, w, rng));
            body.push(Block::Conv(Conv2d::new(w, w, 3, 2, rng)));
            prev = w;
        }
        body.push(res(c, prev, prev, rng));
        body.push(res(c, prev, prev, rng));
        if c.attention_enabled {
            body.push(Block::Attention(AttentionBlock::new(prev, c.groupnorm_group_size, rng)));
        }
        body.push(res(c, prev, prev, rng));

        let mut head = Sequential::new();
        head.push(Block::Norm(GroupNorm::with_group_size(prev, c.groupnorm_group_size)))
            .push(Block::Swish)
            .push(Block::Conv(Conv2d::new(prev, c.head_channels(), 3, 1, rng)));
        let k = c.latent_channels;
        Ok(Encoder {
            config: c.clone(),
            body,
            head,
            pre_channel: Conv2d::new(k, k, 1, 1, rng),
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [c, h, w] = self.config.image_shape();
        x.expect_shape([x.batch(), c, h, w])?;
        if x.batch() == 0 {
            return Err(crate::error::invalid("empty batch"));
        }
        Ok(())
    }

    fn split(&self, head: Tensor<T>) -> (Tensor<T>, Option<Tensor<T>>) {
        let k = self.config.latent_channels;
        if self.config.emit_variance {
            let mean = head.narrow_channels(0, k).expect("head has 2k channels");
            let lv = head.narrow_channels(k, k).expect("head has 2k channels");
            (mean, Some(lv))
        } else {
            (head, None)
        }
    }

    fn wrap(mean: Tensor<T>, lv: Option<Tensor<T>>) -> EncoderOutput<T> {
        match lv {
            Some(lv) => {
                EncoderOutput::Stats(LatentStats::new(mean, lv).expect("mean and log-variance agree"))
            }
            None => EncoderOutput::Latent(mean),
        }
    }

    /// Inference pass; keeps no intermediate state.
    pub fn encode(&self, x: Tensor<T>) -> Result<EncoderOutput<T>> {
        self.check_input(&x)?;
        let h = self.head.infer(self.body.infer(x));
        let (mean, lv) = self.split(h);
        Ok(Self::wrap(self.pre_channel.infer(mean), lv))
    }

    pub fn forward(&self, x: Tensor<T>) -> Result<(EncoderOutput<T>, EncoderCache<T>)> {
        self.check_input(&x)?;
        let (h, body) = self.body.forward(x);
        let (h, head) = self.head.forward(h);
        let (mean, lv) = self.split(h);
        let (mean, pre_channel) = self.pre_channel.forward(mean);
        Ok((
            Self::wrap(mean, lv),
            EncoderCache {
                body,
                head,
                pre_channel,
            },
        ))
    }

    /// Backpropagates gradients of the channel input (and the log-variance
    /// map when the encoder emits one) to the image.
    pub fn backward(
        &mut self,
        cache: EncoderCache<T>,
        grad_mean: Tensor<T>,
        grad_log_variance: Option<Tensor<T>>,
    ) -> Tensor<T> {
        let g = self.pre_channel.backward(cache.pre_channel, grad_mean);
        let g = match (self.config.emit_variance, grad_log_variance) {
            (true, Some(glv)) => Tensor::concat_channels(&g, &glv).expect("latent shapes agree"),
            (true, None) => {
                let zeros = Tensor::zeros(g.shape());
                Tensor::concat_channels(&g, &zeros).expect("latent shapes agree")
            }
            (false, _) => g,
        };
        let g = self.head.backward(cache.head, g);
        self.body.backward(cache.body, g)
    }

    pub fn visit(&self, prefix: &str, f: Visit<'_, T>) {
        self.body.visit(&join(prefix, "body"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.pre_channel.visit(&join(prefix, "pre_channel"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: VisitMut<'_, T>) {
        self.body.visit_mut(&join(prefix, "body"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.pre_channel.visit_mut(&join(prefix, "pre_channel"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<T> {
    config: ArchitectureConfig,
    post_channel: Conv2d<T>,
    body: Sequential<T>,
}

pub struct DecoderCache<T> {
    post_channel: ConvCache<T>,
    body: Vec<BlockCache<T>>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(config: &ArchitectureConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let k = c.latent_channels;
        let post_channel = Conv2d::new(k, k, 1, 1, rng);
        let mut prev = c.deepest();
        let mut body = Sequential::new();
        body.push(Block::Conv(Conv2d::new(k, prev, 3, 1, rng)));
        body.push(res(c, prev, prev, rng));
        body.push(res(c, prev, prev, rng));
        if c.attention_enabled {
            body.push(Block::Attention(AttentionBlock::new(prev, c.groupnorm_group_size, rng)));
        }
        for &w in c.stage_widths.iter().rev() {
            body.push(res(c, prev, w, rng));
            body.push(Block::Upsample);
            body.push(Block::Conv(Conv2d::new(w, w, 3, 1, rng)));
            prev = w;
        }
        body.push(res(c, prev, prev, rng));
        body.push(res(c, prev, prev, rng));
        body.push(Block::Conv(Conv2d::new(prev, c.input_channels, 3, 1, rng)));
        body.push(Block::Tanh);
        Ok(Decoder {
            config: c.clone(),
            post_channel,
            body,
        })
    }

    fn check_latent(&self, z: &Tensor<T>) -> Result<()> {
        let [k, h, w] = self.config.latent_shape();
        z.expect_shape([z.batch(), k, h, w])?;
        if z.batch() == 0 {
            return Err(crate::error::invalid("empty batch"));
        }
        Ok(())
    }

    pub fn decode(&self, z: Tensor<T>) -> Result<Tensor<T>> {
        self.check_latent(&z)?;
        Ok(self.body.infer(self.post_channel.infer(z)))
    }

    pub fn forward(&self, z: Tensor<T>) -> Result<(Tensor<T>, DecoderCache<T>)> {
        self.check_latent(&z)?;
        let (h, post_channel) = self.post_channel.forward(z);
        let (y, body) = self.body.forward(h);
        Ok((y, DecoderCache { post_channel, body }))
    }

    pub fn backward(&mut self, cache: DecoderCache<T>, grad: Tensor<T>) -> Tensor<T> {
        let g = self.body.backward(cache.body, grad);
        self.post_channel.backward(cache.post_channel, g)
    }

    pub fn visit(&self, prefix: &str, f: Visit<'_, T>) {
        self.post_channel.visit(&join(prefix, "post_channel"), f);
        self.body.visit(&join(prefix, "body"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: VisitMut<'_, T>) {
        self.post_channel.visit_mut(&join(prefix, "post_channel"), f);
        self.body.visit_mut(&join(prefix, "body"), f);
    }
}

/// Encoder and decoder built from one configuration.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng + ?Sized>(config: &ArchitectureConfig, rng: &mut R) -> Result<Self> {
        Ok(Network {
            encoder: Encoder::new(config, rng)?,
            decoder: Decoder::new(config, rng)?,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        self.encoder.config()
    }

    pub fn visit(&self, f: Visit<'_, T>) {
        self.encoder.visit("encoder", f);
        self.decoder.visit("decoder", f);
    }

    pub fn visit_mut(&mut self, f: VisitMut<'_, T>) {
        self.encoder.visit_mut("encoder", f);
        self.decoder.visit_mut("decoder", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, p| p.zero_grad());
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p: &Param<T>| n += p.len());
        n
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut values = Vec::new();
        self.visit(&mut |_, p| values.push(p.value.clone()));
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut out = Network::<U>::new(self.config(), &mut rng).expect("config already validated");
        let mut it = values.into_iter();
        out.visit_mut(&mut |_, p| {
            let v = it.next().expect("same layout");
            p.value = v.into_iter().map(|x| U::of(x.f64())).collect();
        });
        out
    }
}
