//! Time-lag handling: normalization to years, the learned transposed
//! convolution expansion into a spatial map, channel concatenation, and
//! whole-year class labels for the auxiliary classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvTranspose3d, Mode, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub const DAYS_PER_YEAR: f64 = 365.0;

/// Each expander layer exactly doubles the spatial side.
pub const EXPANDER_GEOM: ConvGeom = ConvGeom::new(4, 2, 1);

/// Channel schedule for a 7-layer (side 128) expander; shorter stacks use
/// its tail.
pub const DEFAULT_SCHEDULE: [usize; 7] = [8, 8, 8, 8, 4, 2, 1];

/// Elapsed time between the source and target examinations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeLag {
    days: i64,
    years: f64,
}

impl TimeLag {
    pub fn days(&self) -> i64 {
        self.days
    }

    pub fn years(&self) -> f64 {
        self.years
    }
}

/// `days / 365`, rejecting same-day or reversed pairs.
pub fn normalize_time_lag(days: i64) -> Result<TimeLag> {
    if days <= 0 {
        return Err(Error::invalid(format!("time lag must be positive, got {days} days")));
    }
    Ok(TimeLag {
        days,
        years: days as f64 / DAYS_PER_YEAR,
    })
}

/// Auxiliary-classifier target derived from the time lag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub index: usize,
    pub nominal_years: usize,
}

/// Rounds the lag to whole years (ties away from zero) and clamps into
/// `[1, n_classes]`.
pub fn class_from_time_lag(days: i64, n_classes: usize) -> Result<ClassLabel> {
    if days <= 0 {
        return Err(Error::invalid(format!("time lag must be positive, got {days} days")));
    }
    if n_classes == 0 {
        return Err(Error::invalid("n_classes must be at least 1"));
    }
    let rounded = (days as f64 / DAYS_PER_YEAR).round() as usize;
    let nominal_years = rounded.clamp(1, n_classes);
    Ok(ClassLabel {
        index: nominal_years - 1,
        nominal_years,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeExpanderConfig {
    /// Spatial side of the produced map.
    pub target_side: usize,
    /// Output channels per layer, ending in 1. Defaults to the tail of
    /// [`DEFAULT_SCHEDULE`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_schedule: Option<Vec<usize>>,
}

impl TimeExpanderConfig {
    pub fn new(target_side: usize) -> Self {
        TimeExpanderConfig {
            target_side,
            channel_schedule: None,
        }
    }

    /// Side of the stack output before any center crop.
    pub fn built_side(&self) -> usize {
        self.target_side.next_power_of_two()
    }

    pub fn num_layers(&self) -> usize {
        self.built_side().trailing_zeros() as usize
    }

    pub fn schedule(&self) -> Result<Vec<usize>> {
        if self.target_side < 2 {
            return Err(Error::invalid(format!(
                "time expander target side must be at least 2, got {}",
                self.target_side
            )));
        }
        let n = self.num_layers();
        let sched = match &self.channel_schedule {
            Some(s) => s.clone(),
            None if n <= DEFAULT_SCHEDULE.len() => DEFAULT_SCHEDULE[DEFAULT_SCHEDULE.len() - n..].to_vec(),
            None => {
                let mut s = vec![8; n - DEFAULT_SCHEDULE.len()];
                s.extend_from_slice(&DEFAULT_SCHEDULE);
                s
            }
        };
        if sched.len() != n {
            return Err(Error::invalid(format!(
                "channel schedule has {} entries but side {} needs {} layers",
                sched.len(),
                self.built_side(),
                n
            )));
        }
        if sched.last() != Some(&1) || sched.contains(&0) {
            return Err(Error::invalid("channel schedule must be positive and end in 1"));
        }
        Ok(sched)
    }
}

/// Learned transposed-convolution stack turning the scalar lag into a
/// one-channel volume.
#[derive(Clone, Debug)]
pub struct TimeExpander {
    layers: Vec<ConvTranspose3d>,
    cfg: TimeExpanderConfig,
}

impl TimeExpander {
    /// Weights are drawn with a fan-in scaled standard deviation so the map
    /// magnitude tracks the lag instead of shrinking geometrically with depth.
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cfg: TimeExpanderConfig, rng: &mut impl Rng) -> Result<Self> {
        let sched = cfg.schedule()?;
        let taps = (EXPANDER_GEOM.kernel / EXPANDER_GEOM.stride).pow(3);
        let mut layers = Vec::with_capacity(sched.len());
        let mut cin = 1;
        for (i, &cout) in sched.iter().enumerate() {
            let last = i + 1 == sched.len();
            let gain = if last { 1.0 } else { (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt() };
            let std = gain / ((cin * taps) as f64).sqrt();
            layers.push(ConvTranspose3d::new(
                store,
                &format!("{name}.{i}"),
                cin,
                cout,
                EXPANDER_GEOM,
                true,
                std,
                rng,
            ));
            cin = cout;
        }
        Ok(TimeExpander { layers, cfg })
    }

    pub fn config(&self) -> &TimeExpanderConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[ConvTranspose3d] {
        &self.layers
    }

    /// Expands a `[N, 1, 1, 1, 1]` seed holding `t.years` into `[N, 1, S, S, S]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seed: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(seed);
        if s.len() != 5 || s[1..] != [1, 1, 1, 1] {
            return Err(Error::shape(format!("time seed must be [N,1,1,1,1], got {:?}", s)));
        }
        let mut h = seed;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h, mode)?;
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        let built = self.cfg.built_side();
        let side = self.cfg.target_side;
        if built != side {
            let o = (built - side) / 2;
            h = g.crop3d(h, [o; 3], [side; 3])?;
        }
        Ok(h)
    }
}

/// `[N, 1, 1, 1, 1]` tensor of lags in years.
pub fn time_seed<T: Element>(lags: &[TimeLag]) -> Tensor<T> {
    Tensor::from_vec(&[lags.len(), 1, 1, 1, 1], lags.iter().map(|l| T::lit(l.years())).collect()).expect("seed shape")
}

/// Appends the time map as the last channel of `features`.
pub fn concat_time_channel<T: Element>(g: &mut Graph<T>, features: Var, time_map: Var) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    let ts = g.shape(time_map).to_vec();
    if fs.len() != 5 || ts.len() != 5 {
        return Err(Error::shape("concat_time_channel expects 5-d tensors"));
    }
    if fs[1] == 0 {
        return Err(Error::shape("feature map has zero channels"));
    }
    if ts[1] != 1 {
        return Err(Error::shape(format!("time map must have 1 channel, got {}", ts[1])));
    }
    if fs[0] != ts[0] || fs[2..] != ts[2..] {
        return Err(Error::shape(format!(
            "time map {:?} does not match features {:?}",
            ts, fs
        )));
    }
    g.concat_channels(features, time_map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::EntryKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_time_lag(365).unwrap().years(), 1.0);
        assert_eq!(normalize_time_lag(730).unwrap().years(), 2.0);
        assert!(normalize_time_lag(0).is_err());
        assert!(normalize_time_lag(-3).is_err());
    }

    #[test]
    fn class_label_examples() {
        assert_eq!(class_from_time_lag(370, 5).unwrap(), ClassLabel { index: 0, nominal_years: 1 });
        assert_eq!(class_from_time_lag(1095, 5).unwrap(), ClassLabel { index: 2, nominal_years: 3 });
        assert_eq!(class_from_time_lag(100, 5).unwrap(), ClassLabel { index: 0, nominal_years: 1 });
        assert_eq!(class_from_time_lag(5000, 5).unwrap().nominal_years, 5);
        // 547.5 days is exactly 1.5 years: ties round away from zero
        assert_eq!(class_from_time_lag(548, 5).unwrap().nominal_years, 2);
        assert!(class_from_time_lag(0, 5).is_err());
    }

    #[test]
    fn class_label_is_monotone_in_days() {
        let mut prev = 0;
        for d in 1..3000 {
            let c = class_from_time_lag(d, 6).unwrap().nominal_years;
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn layer_count_and_schedule() {
        let c = TimeExpanderConfig::new(128);
        assert_eq!(c.num_layers(), 7);
        assert_eq!(c.schedule().unwrap(), DEFAULT_SCHEDULE.to_vec());
        let c = TimeExpanderConfig::new(24);
        assert_eq!(c.built_side(), 32);
        assert_eq!(c.schedule().unwrap(), vec![8, 8, 4, 2, 1]);
        let bad = TimeExpanderConfig {
            target_side: 16,
            channel_schedule: Some(vec![4, 2]),
        };
        assert!(bad.schedule().is_err());
    }

    fn expand(side: usize, years: f64, zero_weights: bool, zero_bias: bool) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ex = TimeExpander::new(&mut store, "t", TimeExpanderConfig::new(side), &mut rng).unwrap();
        for i in 0..store.len() {
            let is_bias = store.entries()[i].name.ends_with("bias");
            assert_eq!(store.kind(i), EntryKind::Param);
            let v = store.value_mut(i);
            if (is_bias && zero_bias) || (!is_bias && zero_weights) {
                v.data_mut().iter_mut().for_each(|x| *x = 0.0);
            } else if is_bias {
                v.data_mut().iter_mut().for_each(|x| *x = 0.05);
            }
        }
        let mut g = Graph::new();
        let seed = g.constant(Tensor::from_vec(&[1, 1, 1, 1, 1], vec![years]).unwrap());
        let out = ex.forward(&mut g, &store, seed, Mode::EVAL).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn expands_to_target_side() {
        assert_eq!(expand(16, 1.0, false, false).shape(), &[1, 1, 16, 16, 16]);
        // non power of two: built at 32 and cropped
        assert_eq!(expand(24, 1.0, false, false).shape(), &[1, 1, 24, 24, 24]);
    }

    #[test]
    fn zero_parameters_give_zero_map() {
        let t = expand(16, 2.5, true, true);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_lag_with_zero_bias_gives_zero_map() {
        let t = expand(16, 0.0, false, true);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_free_map_is_positively_homogeneous_in_lag() {
        let a = expand(8, 1.0, false, true);
        let b = expand(8, 3.0, false, true);
        assert!(a.scale(3.0).max_abs_diff(&b) < 1e-12);
        assert!(a.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn concat_checks() {
        let mut g: Graph<f64> = Graph::new();
        let f = g.constant(Tensor::full(&[1, 16, 4, 4, 4], 0.5));
        let tm = g.constant(Tensor::full(&[1, 1, 4, 4, 4], 2.0));
        let c = concat_time_channel(&mut g, f, tm).unwrap();
        assert_eq!(g.shape(c), &[1, 17, 4, 4, 4]);
        assert!(g.value(c).data()[..16 * 64].iter().all(|&v| v == 0.5));
        assert!(g.value(c).data()[16 * 64..].iter().all(|&v| v == 2.0));
        let small = g.constant(Tensor::full(&[1, 1, 2, 2, 2], 2.0));
        assert!(concat_time_channel(&mut g, f, small).is_err());
        let empty = g.constant(Tensor::zeros(&[1, 0, 4, 4, 4]));
        assert!(concat_time_channel(&mut g, empty, tm).is_err());
    }
}
