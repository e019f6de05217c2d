//! The 3D U-Net generator and the PatchGAN discriminator variants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Conv3d, Linear, Mode, UpBlock, INIT_STD};
use crate::params::ParamStore;
use crate::tensor::{conv_out_len, Element, Tensor};
use crate::time_conditioning::{concat_time_channel, time_seed, TimeExpander, TimeExpanderConfig, TimeLag};

const SAME3: ConvGeom = ConvGeom::new(3, 1, 1);
const DOWN4: ConvGeom = ConvGeom::new(4, 2, 1);
const UP4: ConvGeom = ConvGeom::new(4, 2, 1);
const STAY4: ConvGeom = ConvGeom::new(4, 1, 1);
const POINT: ConvGeom = ConvGeom::new(1, 1, 0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Channel width never exceeds `channel_cap × base_channels`.
    #[serde(default = "default_cap")]
    pub channel_cap: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub patch_side: usize,
    /// Channel schedule override for the time expander.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_channels: Option<Vec<usize>>,
}

fn default_cap() -> usize {
    16
}

impl GeneratorConfig {
    pub fn desk_scale() -> Self {
        GeneratorConfig {
            levels: 4,
            base_channels: 16,
            channel_cap: 16,
            in_channels: 4,
            out_channels: 1,
            patch_side: 24,
            time_channels: None,
        }
    }

    pub fn paper_scale() -> Self {
        GeneratorConfig {
            levels: 6,
            base_channels: 32,
            patch_side: 128,
            ..Self::desk_scale()
        }
    }

    pub fn time_expander(&self) -> TimeExpanderConfig {
        TimeExpanderConfig {
            target_side: self.patch_side,
            channel_schedule: self.time_channels.clone(),
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.channel_cap * self.base_channels)
    }

    /// Spatial side at every encoder level, top to bottom.
    pub fn resolution_ladder(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.patch_side >> l).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.channel_cap == 0 {
            return Err(Error::invalid("generator levels, base_channels and channel_cap must be positive"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("generator channel counts must be positive"));
        }
        let div = 1usize << (self.levels - 1);
        if self.patch_side == 0 || self.patch_side % div != 0 {
            return Err(Error::invalid(format!(
                "patch side {} is not divisible by 2^(levels-1) = {}",
                self.patch_side, div
            )));
        }
        self.time_expander().schedule()?;
        Ok(())
    }
}

/// 3D U-Net with the time map concatenated after the first conv block.
#[derive(Clone, Debug)]
pub struct Generator<T: Element> {
    cfg: GeneratorConfig,
    store: ParamStore<T>,
    expander: TimeExpander,
    stem: ConvBlock,
    stem_mix: ConvBlock,
    down: Vec<(ConvBlock, ConvBlock)>,
    up: Vec<(UpBlock, ConvBlock)>,
    head: Conv3d,
}

impl<T: Element> Generator<T> {
    pub fn new(cfg: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let c0 = cfg.channels_at(0);
        let expander = TimeExpander::new(s, "g.time", cfg.time_expander(), rng)?;
        let stem = ConvBlock::new(s, "g.enc0a", cfg.in_channels, c0, SAME3, true, true, rng);
        let stem_mix = ConvBlock::new(s, "g.enc0b", c0 + 1, c0, SAME3, true, true, rng);
        let mut down = Vec::new();
        for l in 1..cfg.levels {
            let (ci, co) = (cfg.channels_at(l - 1), cfg.channels_at(l));
            down.push((
                ConvBlock::new(s, &format!("g.down{l}"), ci, co, DOWN4, true, true, rng),
                ConvBlock::new(s, &format!("g.enc{l}"), co, co, SAME3, true, true, rng),
            ));
        }
        let mut up = Vec::new();
        for l in (1..cfg.levels).rev() {
            let (ci, co) = (cfg.channels_at(l), cfg.channels_at(l - 1));
            up.push((
                UpBlock::new(s, &format!("g.up{l}"), ci, co, UP4, rng),
                ConvBlock::new(s, &format!("g.dec{}", l - 1), 2 * co, co, SAME3, true, true, rng),
            ));
        }
        let head = Conv3d::new(s, "g.head", c0, cfg.out_channels, POINT, true, INIT_STD, rng);
        Ok(Generator {
            cfg,
            store,
            expander,
            stem,
            stem_mix,
            down,
            up,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn expander(&self) -> &TimeExpander {
        &self.expander
    }

    /// Records `G(x, t)` for `source: [N, 4, S, S, S]` and `seed: [N, 1, 1, 1, 1]`.
    pub fn forward(&mut self, g: &mut Graph<T>, source: Var, seed: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(source).to_vec();
        let side = self.cfg.patch_side;
        if s.len() != 5 || s[1] != self.cfg.in_channels || s[2..] != [side, side, side] {
            return Err(Error::shape(format!(
                "generator expects [N, {}, {side}, {side}, {side}], got {:?}",
                self.cfg.in_channels, s
            )));
        }
        if g.shape(seed)[0] != s[0] {
            return Err(Error::shape("time seed batch does not match source batch"));
        }
        let st = &mut self.store;
        let tm = self.expander.forward(g, st, seed, mode)?;
        let h = self.stem.forward(g, st, source, mode)?;
        let h = concat_time_channel(g, h, tm)?;
        let mut h = self.stem_mix.forward(g, st, h, mode)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (down, enc) in &self.down {
            skips.push(h);
            h = down.forward(g, st, h, mode)?;
            h = enc.forward(g, st, h, mode)?;
        }
        for (up, dec) in &self.up {
            h = up.forward(g, st, h, mode)?;
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_channels(h, skip)?;
            h = dec.forward(g, st, h, mode)?;
        }
        let h = self.head.forward(g, st, h, mode)?;
        Ok(g.tanh(h))
    }

    /// Evaluation-mode prediction for a batch of patches.
    pub fn predict(&mut self, source: &Tensor<T>, lags: &[TimeLag]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(source.clone());
        let seed = g.constant(time_seed(lags));
        let y = self.forward(&mut g, x, seed, Mode::EVAL)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorVariant {
    Plain,
    TimeConditioned,
    Acgan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub variant: DiscriminatorVariant,
    pub in_channels: usize,
    #[serde(default)]
    pub n_classes: usize,
    /// Stride-2 blocks before the two stride-1 blocks.
    pub downsampling_blocks: usize,
    pub base_channels: usize,
    pub patch_side: usize,
}

impl DiscriminatorConfig {
    pub fn desk_scale(variant: DiscriminatorVariant) -> Self {
        DiscriminatorConfig {
            variant,
            in_channels: 5,
            n_classes: if variant == DiscriminatorVariant::Acgan { 5 } else { 0 },
            downsampling_blocks: 2,
            base_channels: 16,
            patch_side: 24,
        }
    }

    pub fn paper_scale(variant: DiscriminatorVariant) -> Self {
        DiscriminatorConfig {
            downsampling_blocks: 3,
            base_channels: 64,
            patch_side: 128,
            ..Self::desk_scale(variant)
        }
    }

    /// Strides of the full block stack.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![2; self.downsampling_blocks];
        s.extend([1, 1]);
        s
    }

    /// Spatial side after each block, starting from the patch side.
    pub fn side_ladder(&self) -> Option<Vec<usize>> {
        let mut sides = vec![self.patch_side];
        for st in self.strides() {
            let next = conv_out_len(*sides.last().unwrap(), 4, st, 1)?;
            if next == 0 {
                return None;
            }
            sides.push(next);
        }
        Some(sides)
    }

    /// Side of the PatchGAN score grid.
    pub fn score_grid_side(&self) -> Option<usize> {
        self.side_ladder().map(|s| *s.last().unwrap())
    }

    fn channels_at(&self, block: usize) -> usize {
        (self.base_channels << block).min(8 * self.base_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == DiscriminatorVariant::Acgan && self.n_classes < 2 {
            return Err(Error::invalid("acgan discriminator needs n_classes >= 2"));
        }
        if self.in_channels < 2 || self.base_channels == 0 || self.downsampling_blocks == 0 {
            return Err(Error::invalid("discriminator needs in_channels >= 2 and at least one stride-2 block"));
        }
        if self.score_grid_side().is_none() {
            return Err(Error::invalid(format!(
                "patch side {} too small for {} stride-2 blocks",
                self.patch_side, self.downsampling_blocks
            )));
        }
        if self.variant == DiscriminatorVariant::TimeConditioned {
            self.time_expander().schedule()?;
        }
        Ok(())
    }

    fn time_expander(&self) -> TimeExpanderConfig {
        TimeExpanderConfig::new(self.side_ladder().map(|s| s[1]).unwrap_or(0))
    }
}

/// Discriminator outputs for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DiscOutput {
    /// Pre-sigmoid score grid `[N, 1, g, g, g]`.
    pub logits: Var,
    /// `sigmoid(logits)`, each in (0, 1).
    pub scores: Var,
    /// Class logits `[N, K]` (ACGAN only).
    pub class_logits: Option<Var>,
    /// Softmax over classes `[N, K]` (ACGAN only).
    pub posterior: Option<Var>,
}

/// Conditional PatchGAN over the channelwise concatenation of source and
/// candidate.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Element> {
    cfg: DiscriminatorConfig,
    store: ParamStore<T>,
    expander: Option<TimeExpander>,
    blocks: Vec<ConvBlock>,
    classifier: Option<Linear>,
}

impl<T: Element> Discriminator<T> {
    pub fn new(cfg: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let time = cfg.variant == DiscriminatorVariant::TimeConditioned;
        let expander = if time {
            Some(TimeExpander::new(s, "d.time", cfg.time_expander(), rng)?)
        } else {
            None
        };
        let strides = cfg.strides();
        let n = strides.len();
        let mut blocks = Vec::with_capacity(n);
        let mut cin = cfg.in_channels;
        for (i, &st) in strides.iter().enumerate() {
            let first = i == 0;
            let last = i + 1 == n;
            let cout = if last { 1 } else { cfg.channels_at(i) };
            let geom = if st == 2 { DOWN4 } else { STAY4 };
            blocks.push(ConvBlock::new(s, &format!("d.block{i}"), cin, cout, geom, !first && !last, !last, rng));
            cin = cout + usize::from(first && time);
        }
        let classifier = (cfg.variant == DiscriminatorVariant::Acgan)
            .then(|| Linear::new(s, "d.classifier", cfg.channels_at(n - 2), cfg.n_classes, rng));
        Ok(Discriminator {
            cfg,
            store,
            expander,
            blocks,
            classifier,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// `D(x, y[, t])` for `source: [N, 4, S³]`, `candidate: [N, 1, S³]`.
    pub fn forward(&mut self, g: &mut Graph<T>, source: Var, candidate: Var, seed: Option<Var>, mode: Mode) -> Result<DiscOutput> {
        let time = self.cfg.variant == DiscriminatorVariant::TimeConditioned;
        match (time, seed.is_some()) {
            (true, false) => {
                return Err(Error::invalid("time-conditioned discriminator requires a time lag"))
            }
            (false, true) => {
                return Err(Error::invalid(format!(
                    "{:?} discriminator does not accept a time lag",
                    self.cfg.variant
                )))
            }
            _ => {}
        }
        let (ss, cs) = (g.shape(source).to_vec(), g.shape(candidate).to_vec());
        let side = self.cfg.patch_side;
        if ss.len() != 5 || cs.len() != 5 || ss[2..] != [side; 3] || cs[2..] != [side; 3] || ss[0] != cs[0] {
            return Err(Error::shape(format!(
                "discriminator expects side {side} inputs, got {:?} and {:?}",
                ss, cs
            )));
        }
        if ss[1] + cs[1] != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "discriminator expects {} input channels, got {}",
                self.cfg.in_channels,
                ss[1] + cs[1]
            )));
        }
        let st = &mut self.store;
        let mut h = g.concat_channels(source, candidate)?;
        let n = self.blocks.len();
        let mut shared = h;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, st, h, mode)?;
            if i == 0 {
                if let (Some(ex), Some(seed)) = (&self.expander, seed) {
                    let tm = ex.forward(g, st, seed, mode)?;
                    h = concat_time_channel(g, h, tm)?;
                }
            }
            if i + 2 == n {
                shared = h;
            }
        }
        let logits = h;
        let scores = g.sigmoid(logits);
        let (class_logits, posterior) = match &self.classifier {
            Some(lin) => {
                let pooled = g.global_avg_pool(shared)?;
                let cl = lin.forward(g, st, pooled, mode)?;
                let post = g.softmax(cl)?;
                (Some(cl), Some(post))
            }
            None => (None, None),
        };
        Ok(DiscOutput {
            logits,
            scores,
            class_logits,
            posterior,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_gen() -> GeneratorConfig {
        GeneratorConfig {
            levels: 3,
            base_channels: 4,
            patch_side: 8,
            ..GeneratorConfig::desk_scale()
        }
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn resolution_ladders() {
        assert_eq!(GeneratorConfig::paper_scale().resolution_ladder(), vec![128, 64, 32, 16, 8, 4]);
        assert_eq!(GeneratorConfig::desk_scale().resolution_ladder(), vec![24, 12, 6, 3]);
        let bad = GeneratorConfig {
            patch_side: 100,
            ..GeneratorConfig::paper_scale()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn channel_cap_applies() {
        let c = GeneratorConfig::paper_scale();
        assert_eq!(c.channels_at(0), 32);
        assert_eq!(c.channels_at(4), 512);
        assert_eq!(c.channels_at(5), 512);
    }

    #[test]
    fn score_grid_sides() {
        let d = DiscriminatorConfig::paper_scale(DiscriminatorVariant::Plain);
        assert_eq!(d.side_ladder().unwrap(), vec![128, 64, 32, 16, 15, 14]);
        let d = DiscriminatorConfig::desk_scale(DiscriminatorVariant::Plain);
        assert_eq!(d.side_ladder().unwrap(), vec![24, 12, 6, 5, 4]);
    }

    #[test]
    fn generator_output_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g: Generator<f64> = Generator::new(tiny_gen(), &mut rng).unwrap();
        let x = rand_input(&[2, 4, 8, 8, 8], 1);
        let lags = [crate::time_conditioning::normalize_time_lag(365).unwrap(); 2];
        let y = g.predict(&x, &lags).unwrap();
        assert_eq!(y.shape(), &[2, 1, 8, 8, 8]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(y, g.predict(&x, &lags).unwrap());
    }

    #[test]
    fn discriminator_variant_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = rand_input(&[1, 4, 16, 16, 16], 3);
        let cand = rand_input(&[1, 1, 16, 16, 16], 4);
        for variant in [DiscriminatorVariant::Plain, DiscriminatorVariant::TimeConditioned, DiscriminatorVariant::Acgan] {
            let cfg = DiscriminatorConfig {
                base_channels: 4,
                patch_side: 16,
                ..DiscriminatorConfig::desk_scale(variant)
            };
            let mut d: Discriminator<f64> = Discriminator::new(cfg.clone(), &mut rng).unwrap();
            let mut g = Graph::new();
            let (s, c) = (g.constant(src.clone()), g.constant(cand.clone()));
            let seed = g.constant(Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.5]).unwrap());
            let needs_t = variant == DiscriminatorVariant::TimeConditioned;
            assert!(d.forward(&mut g, s, c, (!needs_t).then_some(seed), Mode::EVAL).is_err());
            let out = d.forward(&mut g, s, c, needs_t.then_some(seed), Mode::EVAL).unwrap();
            let side = cfg.score_grid_side().unwrap();
            assert_eq!(g.shape(out.scores), &[1, 1, side, side, side]);
            assert!(g.value(out.scores).data().iter().all(|&v| v > 0.0 && v < 1.0));
            assert_eq!(out.posterior.is_some(), variant == DiscriminatorVariant::Acgan);
            if let Some(p) = out.posterior {
                let sum: f64 = g.value(p).data().iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a: Generator<f32> = Generator::new(tiny_gen(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b: Generator<f32> = Generator::new(tiny_gen(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.store().num_parameters(), b.store().num_parameters());
        assert_eq!(a.store().checksum(), b.store().checksum());
    }
}
