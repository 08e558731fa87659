//! Two-stream encoder/decoder. Each stream is encoder -> aggregation -> residual dilated
//! decoder; the streams share an architecture but own separate parameters.

mod checkpoint;
mod features;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use features::write_feature_csv;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::imageio::{ColorSpace, Image};
use crate::tensor::{Conv2dParams, Graph, Tensor, Var};

pub const DECODER_DILATIONS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Output channels of encoder blocks 1..n; its length is the depth n.
    pub channels: Vec<usize>,
    /// Width of the aggregation and decoder layers.
    pub fuse_channels: usize,
    /// Start the final convolution at zero, so the first output is 0.5 everywhere.
    pub zero_init_output: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: vec![8, 16, 32, 32, 32],
            fuse_channels: 16,
            zero_init_output: false,
        }
    }
}

impl NetConfig {
    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    /// Input sides must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.fuse_channels == 0 {
            return contract(format!(
                "encoder channels {:?} and fuse width {} must be nonempty and positive",
                self.channels, self.fuse_channels
            ));
        }
        Ok(())
    }

    fn aggregation_convs(&self) -> usize {
        (self.depth() - 1).max(1)
    }

    /// (name, weight shape) for every convolution of one stream, in storage order.
    fn conv_layout(&self) -> Vec<(String, [usize; 4])> {
        let n = self.depth();
        let f = self.fuse_channels;
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            out.push((format!("enc{}", i + 1), [c, cin, 3, 3]));
            cin = c;
        }
        if n == 1 {
            out.push(("agg1".into(), [f, self.channels[0], 3, 3]));
        } else {
            let mut deep = self.channels[n - 1];
            for (k, level) in (0..n - 1).rev().enumerate() {
                out.push((format!("agg{}", k + 1), [f, deep + self.channels[level], 3, 3]));
                deep = f;
            }
        }
        for b in 1..=DECODER_DILATIONS.len() {
            out.push((format!("dec{b}.a"), [f, f, 3, 3]));
            out.push((format!("dec{b}.b"), [f, f, 3, 3]));
        }
        out.push(("out".into(), [3, f, 3, 3]));
        out
    }

    /// (name, shape) of every parameter tensor of one stream, weights before biases.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        self.conv_layout()
            .into_iter()
            .flat_map(|(name, w)| [(format!("{name}.weight"), w.to_vec()), (format!("{name}.bias"), vec![w[0]])])
            .collect()
    }
}

/// Parameters of one stream in [`NetConfig::param_layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamParams {
    pub tensors: Vec<Tensor>,
}

impl StreamParams {
    pub fn init(config: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let layout = config.conv_layout();
        let last = layout.len() - 1;
        let mut tensors = Vec::with_capacity(2 * layout.len());
        for (k, (_, shape)) in layout.iter().enumerate() {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let n: usize = shape.iter().product();
            let data = if k == last && config.zero_init_output {
                vec![0.0; n]
            } else {
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                (0..n).map(|_| normal.sample(rng)).collect()
            };
            tensors.push(Tensor::new(shape.to_vec(), data).expect("layout shape"));
            tensors.push(Tensor::zeros(&[shape[0]]));
        }
        StreamParams { tensors }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Albedo,
    Shading,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Albedo => "albedo",
            Stream::Shading => "shading",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStreamModel {
    pub config: NetConfig,
    pub albedo: StreamParams,
    pub shading: StreamParams,
}

impl TwoStreamModel {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let albedo = StreamParams::init(&config, &mut rng);
        let shading = StreamParams::init(&config, &mut rng);
        Ok(TwoStreamModel { config, albedo, shading })
    }

    pub fn stream(&self, s: Stream) -> &StreamParams {
        match s {
            Stream::Albedo => &self.albedo,
            Stream::Shading => &self.shading,
        }
    }

    /// Fully qualified names (`albedo.enc1.weight`, ...) paired with tensors, albedo first.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let layout = self.config.param_layout();
        [Stream::Albedo, Stream::Shading]
            .into_iter()
            .flat_map(|s| {
                layout
                    .iter()
                    .zip(&self.stream(s).tensors)
                    .map(move |((name, _), t)| (format!("{}.{name}", s.name()), t))
            })
            .collect()
    }

    /// All parameters, albedo first, in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.albedo.tensors.iter_mut().chain(self.shading.tensors.iter_mut())
    }

    /// Registers every parameter on `g`; `trainable` decides whether gradients are kept.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> BoundModel<'g> {
        let put = |t: &Tensor| if trainable { g.param(t) } else { g.constant(t.clone()) };
        BoundModel {
            config: self.config.clone(),
            albedo: self.albedo.tensors.iter().map(put).collect(),
            shading: self.shading.tensors.iter().map(put).collect(),
        }
    }

    /// Inference on an RGB image; returns (albedo, shading) as 3-channel images.
    pub fn decompose_image(&self, image: &Image) -> Result<(Image, Image)> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let x = g.constant(image.to_rgb().to_tensor());
        let d = bound.decompose(x)?;
        Ok((
            Image::from_tensor(&d.albedo.value(), ColorSpace::Srgb)?,
            Image::from_tensor(&d.shading.value(), ColorSpace::Srgb)?,
        ))
    }
}

/// Model parameters registered on a graph.
pub struct BoundModel<'g> {
    pub config: NetConfig,
    pub albedo: Vec<Var<'g>>,
    pub shading: Vec<Var<'g>>,
}

pub struct Decomposition<'g> {
    pub albedo: Var<'g>,
    pub shading: Var<'g>,
    pub taps_albedo: Vec<Var<'g>>,
    pub taps_shading: Vec<Var<'g>>,
}

fn conv<'g>(x: Var<'g>, params: &[Var<'g>], layer: usize, dilation: usize) -> Result<Var<'g>> {
    Ok(x.conv2d(params[2 * layer], Some(params[2 * layer + 1]), Conv2dParams::same(3, dilation))?)
}

impl<'g> BoundModel<'g> {
    pub fn stream(&self, s: Stream) -> &[Var<'g>] {
        match s {
            Stream::Albedo => &self.albedo,
            Stream::Shading => &self.shading,
        }
    }

    /// Encoder taps f^{E_1..E_n}; block i > 1 starts with a 2x2 max pool.
    pub fn encode(&self, image: Var<'g>, s: Stream) -> Result<Vec<Var<'g>>> {
        let shape = image.shape();
        let div = self.config.divisor();
        if shape.len() != 3 || shape[0] != 3 {
            return contract(format!("encode expects a [3, H, W] image, got {shape:?}"));
        }
        if shape[1] % div != 0 || shape[2] % div != 0 || shape[1] == 0 || shape[2] == 0 {
            return contract(format!(
                "image size {}x{} must be divisible by {div} for a depth-{} encoder",
                shape[2],
                shape[1],
                self.config.depth()
            ));
        }
        let params = self.stream(s);
        let mut taps = Vec::with_capacity(self.config.depth());
        let mut x = image;
        for i in 0..self.config.depth() {
            if i > 0 {
                x = x.maxpool2x2()?;
            }
            x = conv(x, params, i, 1)?.relu()?;
            taps.push(x);
        }
        Ok(taps)
    }

    /// Upsample the deeper map, concatenate the next shallower tap, conv + relu; repeated
    /// up to the finest level.
    pub fn aggregate(&self, taps: &[Var<'g>], s: Stream) -> Result<Var<'g>> {
        let n = self.config.depth();
        if taps.len() != n {
            return contract(format!("aggregate expects {n} taps, got {}", taps.len()));
        }
        let params = self.stream(s);
        if n == 1 {
            return Ok(conv(taps[0], params, n, 1)?.relu()?);
        }
        let g = taps[0].graph();
        let mut x = taps[n - 1];
        for (k, level) in (0..n - 1).rev().enumerate() {
            let up = x.upsample2x()?;
            x = conv(g.concat(&[up, taps[level]])?, params, n + k, 1)?.relu()?;
        }
        Ok(x)
    }

    /// Residual dilated blocks x + conv_d(relu(conv_d(x))), then a 3-channel conv and sigmoid.
    pub fn decode(&self, fused: Var<'g>, s: Stream) -> Result<Var<'g>> {
        let params = self.stream(s);
        let base = self.config.depth() + self.config.aggregation_convs();
        let mut x = fused;
        for (b, &d) in DECODER_DILATIONS.iter().enumerate() {
            let h = conv(x, params, base + 2 * b, d)?.relu()?;
            x = x.add(conv(h, params, base + 2 * b + 1, d)?)?;
        }
        Ok(conv(x, params, base + 2 * DECODER_DILATIONS.len(), 1)?.sigmoid()?)
    }

    pub fn run_stream(&self, image: Var<'g>, s: Stream) -> Result<(Var<'g>, Vec<Var<'g>>)> {
        let taps = self.encode(image, s)?;
        let fused = self.aggregate(&taps, s)?;
        Ok((self.decode(fused, s)?, taps))
    }

    pub fn decompose(&self, image: Var<'g>) -> Result<Decomposition<'g>> {
        let (albedo, taps_albedo) = self.run_stream(image, Stream::Albedo)?;
        let (shading, taps_shading) = self.run_stream(image, Stream::Shading)?;
        Ok(Decomposition {
            albedo,
            shading,
            taps_albedo,
            taps_shading,
        })
    }
}
