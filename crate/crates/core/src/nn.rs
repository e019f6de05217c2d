//! Parameterized layers recorded onto a [`Graph`].

use rand::Rng;

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::Result;
use crate::params::{EntryKind, ParamStore};
use crate::tensor::{Element, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;
pub const BN_MOMENTUM: f64 = 0.1;

/// How a forward pass treats normalization layers and parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Batch statistics (and running-stat updates) instead of running stats.
    pub train: bool,
    /// Whether parameters are differentiable leaves.
    pub trainable: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        train: true,
        trainable: true,
    };
    /// Training-mode normalization with frozen parameters, used when the
    /// gradient only needs to flow through a network to its inputs.
    pub const FROZEN: Mode = Mode {
        train: true,
        trainable: false,
    };
    pub const EVAL: Mode = Mode {
        train: false,
        trainable: false,
    };
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    weight: usize,
    bias: Option<usize>,
    geom: ConvGeom,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let k = geom.kernel;
        let weight = store.add_normal(format!("{name}.weight"), &[cout, cin, k, k, k], std, rng);
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), EntryKind::Param, &[cout], 0.0));
        Conv3d { weight, bias, geom }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let w = g.param(store, self.weight, mode.trainable);
        let b = self.bias.map(|b| g.param(store, b, mode.trainable));
        g.conv3d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    weight: usize,
    bias: Option<usize>,
    geom: ConvGeom,
}

impl ConvTranspose3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let k = geom.kernel;
        let weight = store.add_normal(format!("{name}.weight"), &[cin, cout, k, k, k], std, rng);
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), EntryKind::Param, &[cout], 0.0));
        ConvTranspose3d { weight, bias, geom }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let w = g.param(store, self.weight, mode.trainable);
        let b = self.bias.map(|b| g.param(store, b, mode.trainable));
        g.conv_transpose3d(x, w, b, self.geom)
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn bias_index(&self) -> Option<usize> {
        self.bias
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add_const(format!("{name}.gamma"), EntryKind::Param, &[channels], 1.0),
            beta: store.add_const(format!("{name}.beta"), EntryKind::Param, &[channels], 0.0),
            running_mean: store.add_const(format!("{name}.running_mean"), EntryKind::Buffer, &[channels], 0.0),
            running_var: store.add_const(format!("{name}.running_var"), EntryKind::Buffer, &[channels], 1.0),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma, mode.trainable);
        let beta = g.param(store, self.beta, mode.trainable);
        if !mode.train {
            let (rm, rv) = (store.value(self.running_mean).clone(), store.value(self.running_var).clone());
            let (y, _) = g.batch_norm(x, gamma, beta, Some((rm.data(), rv.data())))?;
            return Ok(y);
        }
        let (y, stats) = g.batch_norm(x, gamma, beta, None)?;
        if let Some((mean, var)) = stats {
            let m = T::lit(BN_MOMENTUM);
            let keep = T::one() - m;
            for (r, &v) in store.value_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in store.value_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                *r = keep * *r + m * v;
            }
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: store.add_normal(format!("{name}.weight"), &[fan_out, fan_in], INIT_STD, rng),
            bias: store.add_const(format!("{name}.bias"), EntryKind::Param, &[fan_out], 0.0),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let w = g.param(store, self.weight, mode.trainable);
        let b = g.param(store, self.bias, mode.trainable);
        g.linear(x, w, b)
    }
}

/// Convolution, optional batch normalization, optional LeakyReLU(0.2).
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv: Conv3d,
    norm: Option<BatchNorm>,
    activate: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        norm: bool,
        activate: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let conv = Conv3d::new(store, &format!("{name}.conv"), cin, cout, geom, !norm, INIT_STD, rng);
        let norm = norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), cout));
        ConvBlock { conv, norm, activate }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = self.conv.forward(g, store, x, mode)?;
        if let Some(bn) = &self.norm {
            h = bn.forward(g, store, h, mode)?;
        }
        if self.activate {
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(h)
    }
}

/// Transposed convolution + batch normalization + LeakyReLU(0.2).
#[derive(Clone, Debug)]
pub struct UpBlock {
    conv: ConvTranspose3d,
    norm: BatchNorm,
}

impl UpBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, geom: ConvGeom, rng: &mut impl Rng) -> Self {
        UpBlock {
            conv: ConvTranspose3d::new(store, &format!("{name}.convt"), cin, cout, geom, false, INIT_STD, rng),
            norm: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv.forward(g, store, x, mode)?;
        let h = self.norm.forward(g, store, h, mode)?;
        Ok(g.leaky_relu(h, LEAKY_SLOPE))
    }
}

/// Copies a tensor into a fresh graph as a constant and runs `f` on it.
pub fn with_constant<T: Element, R>(t: &Tensor<T>, f: impl FnOnce(&mut Graph<T>, Var) -> R) -> R {
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    f(&mut g, v)
}
