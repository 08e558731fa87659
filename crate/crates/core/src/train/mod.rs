//! Training loop for the dense, sparse and video objectives.

mod adam;
mod augment;
mod pool;

pub use adam::{AdamConfig, AdamState};
pub use augment::{augment, draw_window, Window};
pub use pool::ImagePool;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{JudgedImage, Scene};
use crate::error::{contract, Result};
use crate::imageio::{FlowField, Image};
use crate::judgements::JudgementSet;
use crate::losses::{
    albedo_smoothness, cosine_squared, fdc, fdd, gradient_loss, ordinal_loss, reconstruction_loss, shading_smoothness,
    temporal_loss, total_loss_dense, total_loss_sparse, LossWeights, Terms,
};
use crate::net::{BoundModel, Decomposition, NetConfig, Stream, TwoStreamModel};
use crate::synth::DenseSample;
use crate::tensor::{Graph, Tensor, Var};

pub const ALBEDO_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dense,
    Sparse,
    Video,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub net: NetConfig,
    /// Falls back to the mode's defaults when absent.
    pub losses: Option<LossWeights>,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub crop_size: usize,
    pub scale_range: [f64; 2],
    pub flip: bool,
    pub pool_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Dense,
            net: NetConfig::default(),
            losses: None,
            optimizer: AdamConfig::default(),
            epochs: 1,
            batch_size: 4,
            seed: 42,
            crop_size: 288,
            scale_range: [0.8, 1.3],
            flip: true,
            pool_capacity: 64,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        match (&self.losses, self.mode) {
            (Some(w), _) => w.clone(),
            (None, Mode::Sparse) => LossWeights::sparse_default(),
            (None, _) => LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights().validate(self.net.depth())?;
        self.optimizer.validate()?;
        let div = self.net.divisor();
        if self.crop_size == 0 || self.crop_size % div != 0 {
            return contract(format!("crop size {} must be a positive multiple of {div}", self.crop_size));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return contract(format!("scale range [{lo}, {hi}] must satisfy 0 < min <= max"));
        }
        if self.batch_size == 0 || self.pool_capacity == 0 {
            return contract("batch size and pool capacity must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// mean_c(I / max(A, 1e-6)) clamped to [0, 1], as a `[1, H, W]` tensor.
pub fn synthesize_shading(image: &Tensor, albedo: &Tensor) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape != albedo.shape() {
        return contract(format!("synthesize_shading: shapes {shape:?} and {:?}", albedo.shape()));
    }
    let (c, plane) = (shape[0], shape[1] * shape[2]);
    let (i, a) = (image.data(), albedo.data());
    let data = (0..plane)
        .map(|p| {
            let s: f64 = (0..c).map(|k| i[k * plane + p] / a[k * plane + p].max(ALBEDO_FLOOR)).sum();
            (s / c as f64).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Tensor::new(vec![1, shape[1], shape[2]], data)?)
}

fn repeat3(t: &Tensor) -> Tensor {
    if t.shape()[0] == 3 {
        return t.clone();
    }
    let data = [t.data(); 3].concat();
    Tensor::new(vec![3, t.shape()[1], t.shape()[2]], data).expect("three planes")
}

#[derive(Clone, Debug)]
pub struct SparseSample {
    pub image: Image,
    pub judgements: JudgementSet,
}

#[derive(Clone, Debug)]
pub struct FramePair {
    pub first: DenseSample,
    pub second: DenseSample,
    /// Maps `first` onto `second`.
    pub flow: FlowField,
    pub occlusion: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub enum Dataset {
    Dense(Vec<DenseSample>),
    Sparse(Vec<SparseSample>),
    Video(Vec<FramePair>),
}

impl Dataset {
    pub fn mode(&self) -> Mode {
        match self {
            Dataset::Dense(_) => Mode::Dense,
            Dataset::Sparse(_) => Mode::Sparse,
            Dataset::Video(_) => Mode::Video,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Dense(d) => d.len(),
            Dataset::Sparse(d) => d.len(),
            Dataset::Video(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every frame as a dense sample, or consecutive frames with flow as pairs.
    pub fn from_scenes(mode: Mode, scenes: &[Scene]) -> Result<Dataset> {
        match mode {
            Mode::Dense => Ok(Dataset::Dense(scenes.iter().flat_map(|s| s.frames.iter().map(|f| f.dense())).collect())),
            Mode::Video => Ok(Dataset::Video(
                scenes
                    .iter()
                    .flat_map(|s| {
                        s.frames.windows(2).filter_map(|w| {
                            Some(FramePair { first: w[0].dense(), second: w[1].dense(), flow: w[0].flow.clone()?, occlusion: w[0].occlusion.clone() })
                        })
                    })
                    .collect(),
            )),
            Mode::Sparse => contract("sparse training reads images with judgement files, not scenes"),
        }
    }

    pub fn from_judged(items: &[JudgedImage]) -> Dataset {
        Dataset::Sparse(items.iter().map(|it| SparseSample { image: it.image.clone(), judgements: it.judgements.clone() }).collect())
    }
}

/// Per-epoch means of the unweighted loss terms; terms a mode does not use stay empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub samples: usize,
    pub skipped_batches: usize,
    pub skipped_tensors: usize,
    pub upscaled: usize,
    pub total: f64,
    pub rec: Option<f64>,
    pub grad: Option<f64>,
    pub fdd: Option<f64>,
    pub fdc: Option<f64>,
    pub ordinal: Option<f64>,
    pub albedo_smooth: Option<f64>,
    pub shading_smooth: Option<f64>,
    pub temporal: Option<f64>,
}

#[derive(Clone, Copy, Default)]
struct TermValues([Option<f64>; 8]);

impl TermValues {
    fn of(t: &Terms<'_>, fdc_used: bool) -> Self {
        let v = |x: Option<Var<'_>>| x.map(|x| x.item());
        TermValues([
            v(t.rec),
            v(t.grad),
            v(t.fdd),
            if fdc_used { v(t.fdc) } else { None },
            v(t.ordinal),
            v(t.albedo_smooth),
            v(t.shading_smooth),
            v(t.temporal),
        ])
    }

    fn average(self, other: Self) -> Self {
        let mut out = self;
        for k in 0..8 {
            out.0[k] = match (self.0[k], other.0[k]) {
                (Some(a), Some(b)) => Some(0.5 * (a + b)),
                (a, b) => a.or(b),
            };
        }
        out
    }
}

#[derive(Default)]
struct Accumulator {
    sums: [f64; 8],
    seen: [bool; 8],
    total: f64,
    samples: usize,
}

impl Accumulator {
    fn add(&mut self, total: f64, t: &TermValues) {
        self.total += total;
        self.samples += 1;
        for k in 0..8 {
            if let Some(v) = t.0[k] {
                self.sums[k] += v;
                self.seen[k] = true;
            }
        }
    }

    fn finish(&self, epoch: usize) -> EpochStats {
        let n = self.samples.max(1) as f64;
        let m = |k: usize| self.seen[k].then(|| self.sums[k] / n);
        EpochStats {
            epoch,
            samples: self.samples,
            total: self.total / n,
            rec: m(0),
            grad: m(1),
            fdd: m(2),
            fdc: m(3),
            ordinal: m(4),
            albedo_smooth: m(5),
            shading_smooth: m(6),
            temporal: m(7),
            ..Default::default()
        }
    }
}

/// Objective terms shared by every mode. `refs` are the FDC reference layers (ground truth in
/// dense mode, pool samples in sparse mode); both encoders run on predictions and references.
fn base_terms<'g>(
    m: &BoundModel<'g>,
    d: &Decomposition<'g>,
    image: Var<'g>,
    a_gt: Option<Var<'g>>,
    s_gt: Var<'g>,
    refs: (Var<'g>, Var<'g>),
    w: &LossWeights,
) -> Result<(Terms<'g>, bool)> {
    let g = image.graph();
    let rec = reconstruction_loss(d.albedo, d.shading, image, a_gt, s_gt, w.l1, w.ssim)?;
    let grad = gradient_loss(d.albedo, a_gt, d.shading, s_gt)?;
    let fdd_term = fdd(&d.taps_albedo, &d.taps_shading, &w.omega, w.alpha_fdd, w.beta_fdd)?;
    let fdc_used = w.lambda[3] != 0.0 && w.gamma.iter().any(|&x| x != 0.0);
    let fdc_term = if fdc_used {
        let pred_a = m.encode(d.albedo, Stream::Albedo)?;
        let real_a = m.encode(refs.0, Stream::Albedo)?;
        let pred_s = m.encode(d.shading, Stream::Shading)?;
        let real_s = m.encode(refs.1, Stream::Shading)?;
        fdc(&pred_a, &real_a, &pred_s, &real_s, &w.gamma, w.alpha_fdc, w.beta_fdc)?
    } else {
        g.scalar(0.0)
    };
    let terms = Terms { rec: Some(rec), grad: Some(grad), fdd: Some(fdd_term), fdc: Some(fdc_term), ..Default::default() };
    Ok((terms, fdc_used))
}

fn dense_objective<'g>(m: &BoundModel<'g>, s: &DenseSample, w: &LossWeights) -> Result<(Var<'g>, TermValues, Decomposition<'g>)> {
    let g = m.albedo[0].graph();
    let x = g.constant(s.image.to_rgb().to_tensor());
    let a_gt = g.constant(s.albedo.to_rgb().to_tensor());
    let s_gt = g.constant(repeat3(&s.shading.to_tensor()));
    let d = m.decompose(x)?;
    let (terms, fdc_used) = base_terms(m, &d, x, Some(a_gt), s_gt, (a_gt, s_gt), w)?;
    Ok((total_loss_dense(&terms, w.lambda)?, TermValues::of(&terms, fdc_used), d))
}

struct Pools {
    albedo: ImagePool,
    shading: ImagePool,
}

fn sparse_objective<'g>(
    m: &BoundModel<'g>,
    s: &SparseSample,
    w: &LossWeights,
    pools: &mut Pools,
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'g>, TermValues)> {
    let g = m.albedo[0].graph();
    let guide = s.image.to_rgb().to_tensor();
    let x = g.constant(guide.clone());
    let d = m.decompose(x)?;
    let (a_val, s_val) = (d.albedo.value(), d.shading.value());
    let s_target = g.constant(repeat3(&synthesize_shading(&guide, &a_val)?));
    pools.albedo.push(a_val, rng);
    pools.shading.push(s_val, rng);
    let a_ref = g.constant(pools.albedo.sample(rng)?.clone());
    let s_ref = g.constant(pools.shading.sample(rng)?.clone());
    let (mut terms, fdc_used) = base_terms(m, &d, x, None, s_target, (a_ref, s_ref), w)?;
    terms.ordinal = Some(ordinal_loss(d.albedo, &s.judgements, w.margin)?);
    terms.albedo_smooth = Some(albedo_smoothness(d.albedo, &guide, &w.smoothness)?);
    terms.shading_smooth = Some(shading_smoothness(d.shading, &w.smoothness)?);
    Ok((total_loss_sparse(&terms, w)?, TermValues::of(&terms, fdc_used)))
}

fn video_objective<'g>(m: &BoundModel<'g>, p: &FramePair, w: &LossWeights) -> Result<(Var<'g>, TermValues)> {
    let (l1, v1, d1) = dense_objective(m, &p.first, w)?;
    let (l2, v2, d2) = dense_objective(m, &p.second, w)?;
    let (temporal, _) = temporal_loss(
        d1.albedo,
        d2.albedo,
        d1.shading,
        d2.shading,
        &p.flow,
        p.occlusion.as_deref(),
        w.temporal_albedo,
        w.temporal_shading,
    )?;
    let mut values = v1.average(v2);
    values.0[7] = Some(temporal.item());
    Ok((l1.add(l2)?.scale(0.5)?.add(temporal)?, values))
}

enum Item {
    Dense(DenseSample),
    Sparse(SparseSample),
    Video(FramePair),
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: TwoStreamModel,
    pub optimizer: AdamState,
    weights: LossWeights,
    rng: ChaCha8Rng,
    pools: Pools,
    epoch: usize,
}

impl Trainer {
    /// Fresh model initialized from the config seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = TwoStreamModel::new(config.net.clone(), config.seed)?;
        Self::with_model(config, model)
    }

    pub fn with_model(config: TrainConfig, model: TwoStreamModel) -> Result<Self> {
        config.validate()?;
        if model.config != config.net {
            return contract("model architecture differs from the config's net section");
        }
        let optimizer = AdamState::new(model.named_params().into_iter().map(|(_, t)| t));
        let pools = Pools { albedo: ImagePool::new(config.pool_capacity)?, shading: ImagePool::new(config.pool_capacity)? };
        Ok(Trainer {
            weights: config.weights(),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9)),
            model,
            optimizer,
            pools,
            config,
            epoch: 0,
        })
    }

    fn augmented(&mut self, data: &Dataset, k: usize) -> Result<(Item, bool)> {
        let c = &self.config;
        let rng = &mut self.rng;
        Ok(match data {
            Dataset::Dense(d) => {
                let (s, up) = augment(&d[k], c.crop_size, c.scale_range, c.flip, rng)?;
                (Item::Dense(s), up)
            }
            Dataset::Sparse(d) => {
                let s = &d[k];
                let win = draw_window(s.image.width, s.image.height, c.crop_size, c.scale_range, c.flip, rng)?;
                (Item::Sparse(SparseSample { image: win.image(&s.image)?, judgements: win.judgements(&s.judgements) }), win.upscaled)
            }
            Dataset::Video(d) => {
                let p = &d[k];
                let f = &p.first.image;
                let win = draw_window(f.width, f.height, c.crop_size, c.scale_range, c.flip, rng)?;
                let layers = |s: &DenseSample| -> Result<DenseSample> {
                    Ok(DenseSample { image: win.image(&s.image)?, albedo: win.image(&s.albedo)?, shading: win.image(&s.shading)? })
                };
                let pair = FramePair {
                    first: layers(&p.first)?,
                    second: layers(&p.second)?,
                    flow: win.flow(&p.flow)?,
                    occlusion: p.occlusion.as_deref().map(|m| win.mask(m)).transpose()?,
                };
                (Item::Video(pair), win.upscaled)
            }
        })
    }

    fn objective<'g>(&mut self, m: &BoundModel<'g>, item: &Item) -> Result<(Var<'g>, TermValues)> {
        match item {
            Item::Dense(s) => dense_objective(m, s, &self.weights).map(|(l, v, _)| (l, v)),
            Item::Sparse(s) => sparse_objective(m, s, &self.weights, &mut self.pools, &mut self.rng),
            Item::Video(p) => video_objective(m, p, &self.weights),
        }
    }

    fn check_mode(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return contract("training set is empty");
        }
        if data.mode() != self.config.mode {
            return contract(format!("{:?} training needs a {:?} dataset", self.config.mode, data.mode()));
        }
        Ok(())
    }

    /// One shuffled pass: per batch, forward, backward of the mean loss and one Adam step.
    /// Batches with a non-finite loss are skipped whole.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        self.check_mode(data)?;
        self.epoch += 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut acc = Accumulator::default();
        let (mut skipped_batches, mut skipped_tensors, mut upscaled) = (0, 0, 0);
        let nparams = self.optimizer.m.len();
        for batch in order.chunks(self.config.batch_size) {
            let mut grads: Vec<Vec<f64>> = self.optimizer.m.iter().map(|m| vec![0.0; m.len()]).collect();
            let mut seen = Vec::with_capacity(batch.len());
            let mut finite = true;
            for &k in batch {
                let (item, up) = self.augmented(data, k)?;
                upscaled += usize::from(up);
                let g = Graph::new();
                let bound = self.model.bind(&g, true);
                let (loss, values) = self.objective(&bound, &item)?;
                let total = loss.item();
                if !total.is_finite() {
                    finite = false;
                    break;
                }
                g.backward(loss.scale(1.0 / batch.len() as f64)?)?;
                for (acc_g, v) in grads.iter_mut().zip(bound.albedo.iter().chain(&bound.shading)) {
                    if let Some(gv) = v.grad() {
                        acc_g.iter_mut().zip(gv).for_each(|(a, b)| *a += b);
                    }
                }
                seen.push((total, values));
            }
            if !finite {
                skipped_batches += 1;
                continue;
            }
            debug_assert_eq!(grads.len(), nparams);
            let skipped = self.optimizer.step(self.model.params_mut(), &grads, &self.config.optimizer)?;
            skipped_tensors += skipped.iter().filter(|&&s| s).count();
            seen.iter().for_each(|(t, v)| acc.add(*t, v));
        }
        let mut stats = acc.finish(self.epoch);
        stats.skipped_batches = skipped_batches;
        stats.skipped_tensors = skipped_tensors;
        stats.upscaled = upscaled;
        Ok(stats)
    }

    /// Runs `config.epochs` epochs, rewriting the CSV log after each one when a path is given.
    pub fn fit(&mut self, data: &Dataset, log: Option<&Path>) -> Result<Vec<EpochStats>> {
        let mut all = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            all.push(self.train_epoch(data)?);
            if let Some(p) = log {
                write_log(&all, p)?;
            }
        }
        Ok(all)
    }

    /// Loss of the current model on full, unaugmented samples, without updating anything.
    /// Sparse references come from a scratch copy of the pools.
    pub fn evaluate(&self, data: &Dataset) -> Result<EpochStats> {
        self.check_mode(data)?;
        let mut pools = Pools { albedo: self.pools.albedo.clone(), shading: self.pools.shading.clone() };
        let mut rng = self.rng.clone();
        let mut acc = Accumulator::default();
        for k in 0..data.len() {
            let g = Graph::new();
            let m = self.model.bind(&g, false);
            let (loss, values) = match data {
                Dataset::Dense(d) => dense_objective(&m, &d[k], &self.weights).map(|(l, v, _)| (l, v))?,
                Dataset::Sparse(d) => sparse_objective(&m, &d[k], &self.weights, &mut pools, &mut rng)?,
                Dataset::Video(d) => video_objective(&m, &d[k], &self.weights)?,
            };
            acc.add(loss.item(), &values);
        }
        Ok(acc.finish(self.epoch))
    }
}

pub fn write_log(stats: &[EpochStats], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stats {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean squared cosine between the two streams' taps, per encoder level.
pub fn tap_cosines(model: &TwoStreamModel, images: &[Image]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return contract("tap_cosines needs at least one image");
    }
    let mut sums = vec![0.0; model.config.depth()];
    for img in images {
        let g = Graph::new();
        let m = model.bind(&g, false);
        let d = m.decompose(g.constant(img.to_rgb().to_tensor()))?;
        for (s, (a, b)) in sums.iter_mut().zip(d.taps_albedo.iter().zip(&d.taps_shading)) {
            *s += cosine_squared(*a, *b)?.item();
        }
    }
    Ok(sums.into_iter().map(|s| s / images.len() as f64).collect())
}

/// Mean masked L1 difference between the predicted albedo of each first frame and the
/// flow-warped prediction of its successor.
pub fn albedo_warp_error(model: &TwoStreamModel, pairs: &[FramePair]) -> Result<f64> {
    if pairs.is_empty() {
        return contract("albedo_warp_error needs at least one pair");
    }
    let mut total = 0.0;
    for p in pairs {
        let g = Graph::new();
        let m = model.bind(&g, false);
        let d1 = m.decompose(g.constant(p.first.image.to_rgb().to_tensor()))?;
        let d2 = m.decompose(g.constant(p.second.image.to_rgb().to_tensor()))?;
        let (e, _) = temporal_loss(d1.albedo, d2.albedo, d1.shading, d2.shading, &p.flow, p.occlusion.as_deref(), 1.0, 0.0)?;
        total += e.item();
    }
    Ok(total / pairs.len() as f64)
}

/// Consecutive frames of synthetic videos as training pairs.
pub fn video_pairs(frames: &[crate::synth::VideoFrame]) -> Vec<FramePair> {
    frames
        .windows(2)
        .filter_map(|w| Some(FramePair { first: w[0].sample.clone(), second: w[1].sample.clone(), flow: w[0].flow.clone()?, occlusion: None }))
        .collect()
}
