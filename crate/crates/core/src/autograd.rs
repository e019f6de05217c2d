//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with the operation that produced it. Nodes are appended in evaluation
//! order, so walking the tape backwards from a root visits nodes in reverse
//! topological order. Volumetric tensors use the `[N, C, D, H, W]` layout.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{conv_out_len, conv_transpose_out_len, gemm, Element, MatLayout, Tensor};

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 22;

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            kernel,
            stride,
            pad,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    Ln {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddConst {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    AddScalar {
        x: Var,
        s: Var,
    },
    Mean {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Crop {
        x: Var,
        start: [usize; 3],
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    Select {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Link between a graph leaf and the parameter it was copied from.
#[derive(Clone, Copy, Debug)]
struct ParamLink {
    store: u64,
    index: usize,
    var: Var,
}

/// Recording tape for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    links: Vec<ParamLink>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every parameter of `store` that appeared on `graph`,
    /// in store order. Parameters absent from the pass get `None`.
    pub fn for_store(&self, graph: &Graph<T>, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = vec![None; store.len()];
        for link in graph.links.iter().filter(|l| l.store == store.key()) {
            if let Some(g) = self.get(link.var) {
                match &mut out[link.index] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

fn vol(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

/// Output z-slices per im2col chunk.
fn z_chunk(rows: usize, small: [usize; 3]) -> usize {
    let per_slice = (rows * small[1] * small[2]).max(1);
    (COL_BUDGET / per_slice).clamp(1, small[0].max(1))
}

/// Gathers receptive fields of the `small` grid positions with z in
/// `zr` from `src` (a `channels × large` volume) into `cols`, a
/// `(channels·k³) × (|zr|·small_h·small_w)` row-major matrix.
fn im2col<T: Element>(
    src: &[T],
    channels: usize,
    large: [usize; 3],
    small: [usize; 3],
    g: ConvGeom,
    zr: Range<usize>,
    cols: &mut [T],
) {
    let k = g.kernel;
    let (s, p) = (g.stride as isize, g.pad as isize);
    let ncols = zr.len() * small[1] * small[2];
    let lvol = vol(large);
    let (ld, lh, lw) = (large[0] as isize, large[1] as isize, large[2] as isize);
    let mut row = 0;
    for c in 0..channels {
        let plane = &src[c * lvol..(c + 1) * lvol];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    let mut j = 0;
                    for oz in zr.clone() {
                        let iz = oz as isize * s + kz as isize - p;
                        if iz < 0 || iz >= ld {
                            let n = small[1] * small[2];
                            dst[j..j + n].fill(T::zero());
                            j += n;
                            continue;
                        }
                        for oy in 0..small[1] {
                            let iy = oy as isize * s + ky as isize - p;
                            let out = &mut dst[j..j + small[2]];
                            j += small[2];
                            if iy < 0 || iy >= lh {
                                out.fill(T::zero());
                                continue;
                            }
                            let base = (iz * lh + iy) * lw;
                            let (lo, hi) = valid_range(kx, s, p, lw, small[2]);
                            out[..lo].fill(T::zero());
                            out[hi..].fill(T::zero());
                            let first = (base + lo as isize * s + kx as isize - p) as usize;
                            if s == 1 {
                                out[lo..hi].copy_from_slice(&plane[first..first + hi - lo]);
                            } else {
                                for (o, &v) in out[lo..hi].iter_mut().zip(plane[first..].iter().step_by(s as usize)) {
                                    *o = v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Output positions `lo..hi` along the fastest axis whose input index
/// `o·s + k - p` falls inside `0..len`.
fn valid_range(k: usize, s: isize, p: isize, len: isize, n_out: usize) -> (usize, usize) {
    let off = k as isize - p;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let last = len - 1 - off;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = (hi as usize).min(n_out);
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

/// Adjoint of [`im2col`]: scatters `cols` back, accumulating into `dst`.
fn col2im<T: Element>(
    cols: &[T],
    channels: usize,
    large: [usize; 3],
    small: [usize; 3],
    g: ConvGeom,
    zr: Range<usize>,
    dst: &mut [T],
) {
    let k = g.kernel;
    let (s, p) = (g.stride as isize, g.pad as isize);
    let ncols = zr.len() * small[1] * small[2];
    let lvol = vol(large);
    let (ld, lh, lw) = (large[0] as isize, large[1] as isize, large[2] as isize);
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut dst[c * lvol..(c + 1) * lvol];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    let mut j = 0;
                    for oz in zr.clone() {
                        let iz = oz as isize * s + kz as isize - p;
                        if iz < 0 || iz >= ld {
                            j += small[1] * small[2];
                            continue;
                        }
                        for oy in 0..small[1] {
                            let iy = oy as isize * s + ky as isize - p;
                            let inp = &src[j..j + small[2]];
                            j += small[2];
                            if iy < 0 || iy >= lh {
                                continue;
                            }
                            let base = (iz * lh + iy) * lw;
                            let (lo, hi) = valid_range(kx, s, p, lw, small[2]);
                            let first = (base + lo as isize * s + kx as isize - p) as usize;
                            for (o, &v) in plane[first..].iter_mut().step_by(s as usize).zip(&inp[lo..hi]) {
                                *o += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Element>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn sign<T: Element>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            links: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient flows to it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies parameter `index` of `store` onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize, trainable: bool) -> Var {
        let v = self.push(store.value(index).clone(), Op::Leaf, trainable);
        if trainable {
            self.links.push(ParamLink {
                store: store.key(),
                index,
                var: v,
            });
        }
        v
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || ws[2] != geom.kernel {
            return Err(Error::shape(format!("conv3d: input {:?} weight {:?}", xs, ws)));
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        let ind = dims3(&xs);
        let mut outd = [0; 3];
        for a in 0..3 {
            outd[a] = conv_out_len(ind[a], geom.kernel, geom.stride, geom.pad)
                .ok_or_else(|| Error::shape(format!("conv3d: input side {} too small", ind[a])))?;
        }
        let rows = cin * geom.kernel.pow(3);
        let (isp, osp) = (vol(ind), vol(outd));
        let mut out = vec![T::zero(); n * cout * osp];
        let zc = z_chunk(rows, outd);
        let mut cols = vec![T::zero(); rows * zc * outd[1] * outd[2]];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for item in 0..n {
                let src = &xv[item * cin * isp..(item + 1) * cin * isp];
                let mut z0 = 0;
                while z0 < outd[0] {
                    let z1 = (z0 + zc).min(outd[0]);
                    let ncols = (z1 - z0) * outd[1] * outd[2];
                    im2col(src, cin, ind, outd, geom, z0..z1, &mut cols[..rows * ncols]);
                    gemm(
                        cout,
                        rows,
                        ncols,
                        T::one(),
                        wv,
                        MatLayout::row_major(rows),
                        &cols,
                        MatLayout::row_major(ncols),
                        T::zero(),
                        &mut out,
                        MatLayout {
                            offset: item * cout * osp + z0 * outd[1] * outd[2],
                            rs: osp,
                            cs: 1,
                        },
                    );
                    z0 = z1;
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for item in 0..n {
                    for c in 0..cout {
                        let off = (item * cout + c) * osp;
                        for o in &mut out[off..off + osp] {
                            *o += bv[c];
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, cout, outd[0], outd[1], outd[2]], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Conv3d { x, w, b, geom }, rg))
    }

    /// Transposed convolution; weight layout `[C_in, C_out, k, k, k]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[0] != xs[1] || ws[2] != geom.kernel {
            return Err(Error::shape(format!(
                "conv_transpose3d: input {:?} weight {:?}",
                xs, ws
            )));
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[1]);
        let ind = dims3(&xs);
        let mut outd = [0; 3];
        for a in 0..3 {
            outd[a] = conv_transpose_out_len(ind[a], geom.kernel, geom.stride, geom.pad)
                .ok_or_else(|| Error::shape("conv_transpose3d: negative output size"))?;
        }
        let rows = cout * geom.kernel.pow(3);
        let (isp, osp) = (vol(ind), vol(outd));
        let mut out = vec![T::zero(); n * cout * osp];
        let zc = z_chunk(rows, ind);
        let mut cols = vec![T::zero(); rows * zc * ind[1] * ind[2]];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for item in 0..n {
                let dst = &mut out[item * cout * osp..(item + 1) * cout * osp];
                let mut z0 = 0;
                while z0 < ind[0] {
                    let z1 = (z0 + zc).min(ind[0]);
                    let ncols = (z1 - z0) * ind[1] * ind[2];
                    gemm(
                        rows,
                        cin,
                        ncols,
                        T::one(),
                        wv,
                        MatLayout::transposed(rows),
                        xv,
                        MatLayout {
                            offset: item * cin * isp + z0 * ind[1] * ind[2],
                            rs: isp,
                            cs: 1,
                        },
                        T::zero(),
                        &mut cols,
                        MatLayout::row_major(ncols),
                    );
                    col2im(&cols[..rows * ncols], cout, outd, ind, geom, z0..z1, dst);
                    z0 = z1;
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for item in 0..n {
                    for c in 0..cout {
                        let off = (item * cout + c) * osp;
                        for o in &mut out[off..off + osp] {
                            *o += bv[c];
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, cout, outd[0], outd[1], outd[2]], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::ConvTranspose3d { x, w, b, geom }, rg))
    }

    /// Per-channel normalization over batch and spatial axes.
    ///
    /// With `running = None` the batch statistics are used and returned as
    /// `(mean, unbiased variance)` so the caller can update running buffers.
    /// With `running = Some((mean, var))` those statistics are applied as
    /// constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("batch_norm needs [N, C, ...]"));
        }
        let (n, c) = (xs[0], xs[1]);
        let sp: usize = xs[2..].iter().product();
        let m = n * sp;
        let eps = T::lit(BN_EPS);
        let xv = self.value(x).data();
        let (mean, var_b, stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), None),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mf = T::from_usize(m).unwrap();
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for item in 0..n {
                        let off = (item * c + ch) * sp;
                        acc += xv[off..off + sp].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                    }
                    let mu = T::lit(acc) / mf;
                    let mut sq = T::zero();
                    for item in 0..n {
                        let off = (item * c + ch) * sp;
                        for &v in &xv[off..off + sp] {
                            let d = v - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / mf;
                }
                let unbiased: Vec<T> = if m > 1 {
                    var.iter()
                        .map(|&v| v * mf / T::from_usize(m - 1).unwrap())
                        .collect()
                } else {
                    var.clone()
                };
                (mean.clone(), var, Some((mean, unbiased)))
            }
        };
        if mean.len() != c || var_b.len() != c {
            return Err(Error::shape("batch_norm: statistics length"));
        }
        let inv_std: Vec<T> = var_b.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        for item in 0..n {
            for ch in 0..c {
                let off = (item * c + ch) * sp;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for (o, &v) in out[off..off + sp].iter_mut().zip(&xv[off..off + sp]) {
                    *o = (v - mu) * is * ga + be;
                }
            }
        }
        let t = Tensor::from_vec(&xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let batch_stats = stats.is_some();
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.unary(x, move |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu { x, slope: s })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus { x })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs { x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, move |v| v * c, Op::Scale { x, c })
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.unary(x, move |v| v + c, Op::AddConst { x })
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{}: {:?} vs {:?}",
                name,
                self.shape(a),
                self.shape(b)
            )));
        }
        let t = self.value(a).zip_map(self.value(b), f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// `x * s` where `s` holds a single element.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar: scalar operand must have one element"));
        }
        let sv = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::MulScalar { x, s }, rg))
    }

    /// `x + s` where `s` holds a single element.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("add_scalar: scalar operand must have one element"));
        }
        let sv = self.value(s).data()[0];
        let t = self.value(x).map(|v| v + sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::AddScalar { x, s }, rg))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(t, Op::Mean { x }, rg)
    }

    /// Concatenates along the channel axis (axis 1).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(format!("concat: {:?} vs {:?}", sa, sb)));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let sp: usize = sa[2..].iter().product();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * sp);
        for item in 0..n {
            out.extend_from_slice(&av[item * ca * sp..(item + 1) * ca * sp]);
            out.extend_from_slice(&bv[item * cb * sp..(item + 1) * cb * sp]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let t = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Concat { a, b }, rg))
    }

    /// Spatial sub-block `[start, start + size)` of a `[N, C, D, H, W]` tensor.
    pub fn crop3d(&mut self, x: Var, start: [usize; 3], size: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(Error::shape("crop3d needs a 5-d tensor"));
        }
        let ind = dims3(&xs);
        for a in 0..3 {
            if start[a] + size[a] > ind[a] {
                return Err(Error::shape(format!(
                    "crop3d: window {:?}+{:?} exceeds {:?}",
                    start, size, ind
                )));
            }
        }
        let nc = xs[0] * xs[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(nc * vol(size));
        for plane in 0..nc {
            let base = plane * vol(ind);
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let off = base + ((start[0] + z) * ind[1] + start[1] + y) * ind[2] + start[2];
                    out.extend_from_slice(&xv[off..off + size[2]]);
                }
            }
        }
        let t = Tensor::from_vec(&[xs[0], xs[1], size[0], size[1], size[2]], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Crop { x, start }, rg))
    }

    /// `[N, C, ...] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape("global_avg_pool needs spatial axes"));
        }
        let sp: usize = xs[2..].iter().product();
        let spf = T::from_usize(sp).unwrap();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(sp)
            .map(|c| c.iter().copied().sum::<T>() / spf)
            .collect();
        let t = Tensor::from_vec(&xs[..2], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GlobalAvgPool { x }, rg))
    }

    /// Affine map `[N, I] -> [N, O]` with weight `[O, I]` and bias `[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(format!("linear: x {:?} w {:?} b {:?}", xs, ws, bs)));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        gemm(
            n,
            i,
            o,
            T::one(),
            self.value(x).data(),
            MatLayout::row_major(i),
            self.value(w).data(),
            MatLayout::transposed(i),
            T::zero(),
            &mut out,
            MatLayout::row_major(o),
        );
        let bv = self.value(b).data();
        for row in out.chunks_mut(o) {
            for (v, &bb) in row.iter_mut().zip(bv) {
                *v += bb;
            }
        }
        let t = Tensor::from_vec(&[n, o], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    fn row_softmax(&self, x: Var, log: bool) -> Result<Tensor<T>> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::shape("softmax expects [N, K]"));
        }
        let k = xs[1];
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(k) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| if log { v - lse } else { (v - lse).exp() }));
        }
        Tensor::from_vec(xs, out)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.row_softmax(x, false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.row_softmax(x, true)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x }, rg))
    }

    /// Picks `x[n, idx[n]]` from an `[N, K]` tensor, giving `[N]`.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != idx.len() {
            return Err(Error::shape(format!("select: x {:?} with {} indices", xs, idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xs[1]) {
            return Err(Error::invalid(format!(
                "class index {} out of range for {} classes",
                bad, xs[1]
            )));
        }
        let xv = self.value(x).data();
        let out: Vec<T> = idx.iter().enumerate().map(|(r, &c)| xv[r * xs[1] + c]).collect();
        let t = Tensor::from_vec(&[idx.len()], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Select {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => self.conv3d_backward(*x, *w, *b, *geom, gy, grads),
            Op::ConvTranspose3d { x, w, b, geom } => {
                self.conv_transpose3d_backward(*x, *w, *b, *geom, gy, grads)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => self.batch_norm_backward(*x, *gamma, *beta, mean, inv_std, *batch_stats, gy, grads),
            Op::LeakyRelu { x, slope } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let s = *slope;
                    let g = gy.zip_map(xv, |g, v| if v > T::zero() { g } else { g * s });
                    Self::accumulate(grads, *x, g);
                }
            }
            Op::Tanh { x } => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, gy.zip_map(y, |g, t| g * (T::one() - t * t)));
                }
            }
            Op::Sigmoid { x } => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, gy.zip_map(y, |g, s| g * s * (T::one() - s)));
                }
            }
            Op::Softplus { x } => {
                if self.wants(*x) {
                    let g = gy.zip_map(self.value(*x), |g, v| g * sigmoid(v));
                    Self::accumulate(grads, *x, g);
                }
            }
            Op::Ln { x } => {
                if self.wants(*x) {
                    let g = gy.zip_map(self.value(*x), |g, v| g / v);
                    Self::accumulate(grads, *x, g);
                }
            }
            Op::Abs { x } => {
                if self.wants(*x) {
                    let g = gy.zip_map(self.value(*x), |g, v| g * sign(v));
                    Self::accumulate(grads, *x, g);
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, gy.scale(*c));
                }
            }
            Op::AddConst { x } => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, gy.clone());
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, gy.clone());
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, gy.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, gy.clone());
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, gy.scale(-T::one()));
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, gy.zip_map(self.value(*b), |g, v| g * v));
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, gy.zip_map(self.value(*a), |g, v| g * v));
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                if self.wants(*x) {
                    Self::accumulate(grads, *x, gy.scale(sv));
                }
                if self.wants(*s) {
                    let d: T = gy
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &v)| g * v)
                        .sum();
                    Self::accumulate(grads, *s, Tensor::from_vec(self.shape(*s), vec![d]).unwrap());
                }
            }
            Op::AddScalar { x, s } => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, gy.clone());
                }
                if self.wants(*s) {
                    Self::accumulate(grads, *s, Tensor::from_vec(self.shape(*s), vec![gy.sum()]).unwrap());
                }
            }
            Op::Mean { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let g = gy.data()[0] / T::from_usize(xv.numel()).unwrap();
                    Self::accumulate(grads, *x, Tensor::full(xv.shape(), g));
                }
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                let sp: usize = sa[2..].iter().product();
                let gd = gy.data();
                if self.wants(*a) {
                    let mut ga = Vec::with_capacity(n * ca * sp);
                    for item in 0..n {
                        let off = item * (ca + cb) * sp;
                        ga.extend_from_slice(&gd[off..off + ca * sp]);
                    }
                    Self::accumulate(grads, *a, Tensor::from_vec(&sa, ga).unwrap());
                }
                if self.wants(*b) {
                    let mut gb = Vec::with_capacity(n * cb * sp);
                    for item in 0..n {
                        let off = item * (ca + cb) * sp + ca * sp;
                        gb.extend_from_slice(&gd[off..off + cb * sp]);
                    }
                    Self::accumulate(grads, *b, Tensor::from_vec(&sb, gb).unwrap());
                }
            }
            Op::Crop { x, start } => {
                if self.wants(*x) {
                    let xs = self.shape(*x).to_vec();
                    let ind = dims3(&xs);
                    let size = dims3(y.shape());
                    let mut g = vec![T::zero(); xs.iter().product()];
                    let gd = gy.data();
                    let mut j = 0;
                    for plane in 0..xs[0] * xs[1] {
                        let base = plane * vol(ind);
                        for z in 0..size[0] {
                            for yy in 0..size[1] {
                                let off = base
                                    + ((start[0] + z) * ind[1] + start[1] + yy) * ind[2]
                                    + start[2];
                                g[off..off + size[2]].copy_from_slice(&gd[j..j + size[2]]);
                                j += size[2];
                            }
                        }
                    }
                    Self::accumulate(grads, *x, Tensor::from_vec(&xs, g).unwrap());
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.wants(*x) {
                    let xs = self.shape(*x).to_vec();
                    let sp: usize = xs[2..].iter().product();
                    let inv = T::one() / T::from_usize(sp).unwrap();
                    let mut g = Vec::with_capacity(xs.iter().product());
                    for &gv in gy.data() {
                        g.extend(std::iter::repeat(gv * inv).take(sp));
                    }
                    Self::accumulate(grads, *x, Tensor::from_vec(&xs, g).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let (n, i, o) = (xs[0], xs[1], ws[0]);
                if self.wants(*x) {
                    let mut g = vec![T::zero(); n * i];
                    gemm(
                        n,
                        o,
                        i,
                        T::one(),
                        gy.data(),
                        MatLayout::row_major(o),
                        self.value(*w).data(),
                        MatLayout::row_major(i),
                        T::zero(),
                        &mut g,
                        MatLayout::row_major(i),
                    );
                    Self::accumulate(grads, *x, Tensor::from_vec(&xs, g).unwrap());
                }
                if self.wants(*w) {
                    let mut g = vec![T::zero(); o * i];
                    gemm(
                        o,
                        n,
                        i,
                        T::one(),
                        gy.data(),
                        MatLayout::transposed(o),
                        self.value(*x).data(),
                        MatLayout::row_major(i),
                        T::zero(),
                        &mut g,
                        MatLayout::row_major(i),
                    );
                    Self::accumulate(grads, *w, Tensor::from_vec(&ws, g).unwrap());
                }
                if self.wants(*b) {
                    let mut g = vec![T::zero(); o];
                    for row in gy.data().chunks(o) {
                        for (a, &v) in g.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Self::accumulate(grads, *b, Tensor::from_vec(&[o], g).unwrap());
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let k = y.shape()[1];
                    let mut g = Vec::with_capacity(y.numel());
                    for (yr, gr) in y.data().chunks(k).zip(gy.data().chunks(k)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        g.extend(yr.iter().zip(gr).map(|(&p, &gg)| p * (gg - dot)));
                    }
                    Self::accumulate(grads, *x, Tensor::from_vec(y.shape(), g).unwrap());
                }
            }
            Op::LogSoftmax { x } => {
                if self.wants(*x) {
                    let k = y.shape()[1];
                    let mut g = Vec::with_capacity(y.numel());
                    for (yr, gr) in y.data().chunks(k).zip(gy.data().chunks(k)) {
                        let total: T = gr.iter().copied().sum();
                        g.extend(yr.iter().zip(gr).map(|(&ly, &gg)| gg - ly.exp() * total));
                    }
                    Self::accumulate(grads, *x, Tensor::from_vec(y.shape(), g).unwrap());
                }
            }
            Op::Select { x, idx } => {
                if self.wants(*x) {
                    let xs = self.shape(*x).to_vec();
                    let mut g = vec![T::zero(); xs[0] * xs[1]];
                    for (r, (&c, &gv)) in idx.iter().zip(gy.data()).enumerate() {
                        g[r * xs[1] + c] += gv;
                    }
                    Self::accumulate(grads, *x, Tensor::from_vec(&xs, g).unwrap());
                }
            }
        }
    }

    fn bias_grad(gy: &Tensor<T>) -> Tensor<T> {
        let s = gy.shape();
        let (n, c) = (s[0], s[1]);
        let sp: usize = s[2..].iter().product();
        let mut g = vec![T::zero(); c];
        for item in 0..n {
            for (ch, acc) in g.iter_mut().enumerate() {
                let off = (item * c + ch) * sp;
                *acc += gy.data()[off..off + sp].iter().copied().sum::<T>();
            }
        }
        Tensor::from_vec(&[c], g).unwrap()
    }

    fn conv3d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        let ind = dims3(&xs);
        let outd = dims3(gy.shape());
        let rows = cin * geom.kernel.pow(3);
        let (isp, osp) = (vol(ind), vol(outd));
        let (need_x, need_w) = (self.wants(x), self.wants(w));
        let mut gx = if need_x { vec![T::zero(); n * cin * isp] } else { Vec::new() };
        let mut gw = if need_w { vec![T::zero(); cout * rows] } else { Vec::new() };
        if need_x || need_w {
            let zc = z_chunk(rows, outd);
            let cap = rows * zc * outd[1] * outd[2];
            let mut cols = vec![T::zero(); cap];
            let mut dcols = if need_x { vec![T::zero(); cap] } else { Vec::new() };
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let gd = gy.data();
            for item in 0..n {
                let src = &xv[item * cin * isp..(item + 1) * cin * isp];
                let mut z0 = 0;
                while z0 < outd[0] {
                    let z1 = (z0 + zc).min(outd[0]);
                    let ncols = (z1 - z0) * outd[1] * outd[2];
                    let gl = MatLayout {
                        offset: item * cout * osp + z0 * outd[1] * outd[2],
                        rs: osp,
                        cs: 1,
                    };
                    if need_w {
                        im2col(src, cin, ind, outd, geom, z0..z1, &mut cols[..rows * ncols]);
                        gemm(
                            cout,
                            ncols,
                            rows,
                            T::one(),
                            gd,
                            gl,
                            &cols,
                            MatLayout::transposed(ncols),
                            T::one(),
                            &mut gw,
                            MatLayout::row_major(rows),
                        );
                    }
                    if need_x {
                        gemm(
                            rows,
                            cout,
                            ncols,
                            T::one(),
                            wv,
                            MatLayout::transposed(rows),
                            gd,
                            gl,
                            T::zero(),
                            &mut dcols,
                            MatLayout::row_major(ncols),
                        );
                        let dst = &mut gx[item * cin * isp..(item + 1) * cin * isp];
                        col2im(&dcols[..rows * ncols], cin, ind, outd, geom, z0..z1, dst);
                    }
                    z0 = z1;
                }
            }
        }
        if need_x {
            Self::accumulate(grads, x, Tensor::from_vec(&xs, gx).unwrap());
        }
        if need_w {
            Self::accumulate(grads, w, Tensor::from_vec(&ws, gw).unwrap());
        }
        if let Some(b) = b {
            if self.wants(b) {
                Self::accumulate(grads, b, Self::bias_grad(gy));
            }
        }
    }

    fn conv_transpose3d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, cin, cout) = (xs[0], xs[1], ws[1]);
        let ind = dims3(&xs);
        let outd = dims3(gy.shape());
        let rows = cout * geom.kernel.pow(3);
        let (isp, osp) = (vol(ind), vol(outd));
        let (need_x, need_w) = (self.wants(x), self.wants(w));
        let mut gx = if need_x { vec![T::zero(); n * cin * isp] } else { Vec::new() };
        let mut gw = if need_w { vec![T::zero(); cin * rows] } else { Vec::new() };
        if need_x || need_w {
            let zc = z_chunk(rows, ind);
            let mut cols = vec![T::zero(); rows * zc * ind[1] * ind[2]];
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let gd = gy.data();
            for item in 0..n {
                let gsrc = &gd[item * cout * osp..(item + 1) * cout * osp];
                let mut z0 = 0;
                while z0 < ind[0] {
                    let z1 = (z0 + zc).min(ind[0]);
                    let ncols = (z1 - z0) * ind[1] * ind[2];
                    im2col(gsrc, cout, outd, ind, geom, z0..z1, &mut cols[..rows * ncols]);
                    let xl = MatLayout {
                        offset: item * cin * isp + z0 * ind[1] * ind[2],
                        rs: isp,
                        cs: 1,
                    };
                    if need_x {
                        gemm(
                            cin,
                            rows,
                            ncols,
                            T::one(),
                            wv,
                            MatLayout::row_major(rows),
                            &cols,
                            MatLayout::row_major(ncols),
                            T::zero(),
                            &mut gx,
                            xl,
                        );
                    }
                    if need_w {
                        gemm(
                            cin,
                            ncols,
                            rows,
                            T::one(),
                            xv,
                            xl,
                            &cols,
                            MatLayout::transposed(ncols),
                            T::one(),
                            &mut gw,
                            MatLayout::row_major(rows),
                        );
                    }
                    z0 = z1;
                }
            }
        }
        if need_x {
            Self::accumulate(grads, x, Tensor::from_vec(&xs, gx).unwrap());
        }
        if need_w {
            Self::accumulate(grads, w, Tensor::from_vec(&ws, gw).unwrap());
        }
        if let Some(b) = b {
            if self.wants(b) {
                Self::accumulate(grads, b, Self::bias_grad(gy));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let sp: usize = xs[2..].iter().product();
        let mf = T::from_usize(n * sp).unwrap();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let gd = gy.data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for item in 0..n {
            for ch in 0..c {
                let off = (item * c + ch) * sp;
                for (&g, &v) in gd[off..off + sp].iter().zip(&xv[off..off + sp]) {
                    sum_g[ch] += g;
                    sum_gx[ch] += g * (v - mean[ch]) * inv_std[ch];
                }
            }
        }
        if self.wants(x) {
            let mut gx = vec![T::zero(); xv.len()];
            for item in 0..n {
                for ch in 0..c {
                    let off = (item * c + ch) * sp;
                    let k = gv[ch] * inv_std[ch];
                    for ((o, &g), &v) in gx[off..off + sp]
                        .iter_mut()
                        .zip(&gd[off..off + sp])
                        .zip(&xv[off..off + sp])
                    {
                        *o = if batch_stats {
                            let xhat = (v - mean[ch]) * inv_std[ch];
                            k * (g - sum_g[ch] / mf - xhat * sum_gx[ch] / mf)
                        } else {
                            k * g
                        };
                    }
                }
            }
            Self::accumulate(grads, x, Tensor::from_vec(&xs, gx).unwrap());
        }
        if self.wants(gamma) {
            Self::accumulate(grads, gamma, Tensor::from_vec(&[c], sum_gx).unwrap());
        }
        if self.wants(beta) {
            Self::accumulate(grads, beta, Tensor::from_vec(&[c], sum_g).unwrap());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct 7-loop convolution used as the reference.
    fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let (n, cin, cout, k) = (xs[0], xs[1], ws[0], g.kernel);
        let ind = dims3(xs);
        let outd: Vec<usize> = ind
            .iter()
            .map(|&i| conv_out_len(i, k, g.stride, g.pad).unwrap())
            .collect();
        let mut out = Tensor::zeros(&[n, cout, outd[0], outd[1], outd[2]]);
        let at = |t: &Tensor<f64>, i: [usize; 5]| {
            let s = t.shape();
            t.data()[(((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]) * s[4] + i[4]]
        };
        for b in 0..n {
            for co in 0..cout {
                for oz in 0..outd[0] {
                    for oy in 0..outd[1] {
                        for ox in 0..outd[2] {
                            let mut acc = 0.0;
                            for ci in 0..cin {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= ind[0] as isize
                                                || iy >= ind[1] as isize
                                                || ix >= ind[2] as isize
                                            {
                                                continue;
                                            }
                                            acc += at(x, [b, ci, iz as usize, iy as usize, ix as usize])
                                                * at(w, [co, ci, kz, ky, kx]);
                                        }
                                    }
                                }
                            }
                            let idx = (((b * cout + co) * outd[0] + oz) * outd[1] + oy) * outd[2] + ox;
                            out.data_mut()[idx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(side, geom) in &[(6, ConvGeom::new(3, 1, 1)), (8, ConvGeom::new(4, 2, 1)), (5, ConvGeom::new(4, 1, 1))] {
            let x = rand_tensor(&[2, 3, side, side + 1, side], &mut rng);
            let w = rand_tensor(&[4, 3, geom.kernel, geom.kernel, geom.kernel], &mut rng);
            let want = naive_conv3d(&x, &w, geom);
            let mut g = Graph::new();
            let (xv, wv) = (g.constant(x), g.constant(w));
            let y = g.conv3d(xv, wv, None, geom).unwrap();
            assert_eq!(g.shape(y), want.shape());
            assert!(g.value(y).max_abs_diff(&want) < 1e-12);
        }
    }

    /// The transposed convolution is the adjoint of the convolution:
    /// <conv(x), y> = <x, conv_t(y)> for shared weights.
    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geom = ConvGeom::new(4, 2, 1);
        let x = rand_tensor(&[1, 2, 6, 6, 6], &mut rng);
        let w = rand_tensor(&[3, 2, 4, 4, 4], &mut rng);
        let y = rand_tensor(&[1, 3, 3, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()));
        let cx = g.conv3d(xv, wv, None, geom).unwrap();
        let ty = g.conv_transpose3d(yv, wv, None, geom).unwrap();
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.value(ty).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    /// Central finite differences on a loss through every differentiable op.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(&[2, 2, 4, 4, 4], &mut rng);
        let w1 = rand_tensor(&[3, 2, 3, 3, 3], &mut rng).scale(0.3);
        let wt = rand_tensor(&[2, 3, 4, 4, 4], &mut rng).scale(0.3);
        let gam = rand_tensor(&[3], &mut rng);
        let lw = rand_tensor(&[4, 6], &mut rng);
        let lb = rand_tensor(&[4], &mut rng);
        let inputs = vec![x0, w1, wt, gam, lw, lb];

        let f = |vals: &[Tensor<f64>], want_grad: bool| -> (f64, Vec<Tensor<f64>>) {
            let mut g = Graph::new();
            let v: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
            let beta = g.constant(Tensor::full(&[3], 0.1));
            let h = g.conv3d(v[0], v[1], None, ConvGeom::new(3, 1, 1)).unwrap();
            let (h, _) = g.batch_norm(h, v[3], beta, None).unwrap();
            let h = g.leaky_relu(h, 0.2);
            let d = g.conv3d(h, v[2], None, ConvGeom::new(4, 2, 1)).unwrap();
            let d = g.tanh(d);
            let u = g.conv_transpose3d(d, v[2], None, ConvGeom::new(4, 2, 1)).unwrap();
            let u = g.crop3d(u, [1, 0, 1], [3, 4, 2]).unwrap();
            let p = g.global_avg_pool(h).unwrap();
            let side = g.global_avg_pool(u).unwrap();
            let cat = g.concat_channels(p, side).unwrap();
            let logits = g.linear(cat, v[4], v[5]).unwrap();
            let ls = g.log_softmax(logits).unwrap();
            let pick = g.select(ls, &[1, 3]).unwrap();
            let sm = g.softmax(logits).unwrap();
            let sp = g.softplus(sm);
            let s = g.sigmoid(u);
            let ab = g.abs(s);
            let a1 = g.mean(pick);
            let a2 = g.mean(sp);
            let a3 = g.mean(ab);
            let t = g.add(a1, a2).unwrap();
            let loss = g.sub(t, a3).unwrap();
            let val = g.value(loss).data()[0];
            if !want_grad {
                return (val, vec![]);
            }
            let gr = g.backward(loss);
            (val, v.iter().map(|&vv| gr.get(vv).unwrap().clone()).collect())
        };
        let (_, analytic) = f(&inputs, true);
        let h = 1e-6;
        for (ti, t) in inputs.iter().enumerate() {
            for idx in (0..t.numel()).step_by((t.numel() / 7).max(1)) {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[idx] -= h;
                let fd = (f(&plus, false).0 - f(&minus, false).0) / (2.0 * h);
                let an = analytic[ti].data()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "input {ti} idx {idx}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::full(&[2], 1.0));
        let b = g.input(Tensor::full(&[2], 2.0));
        let c = g.mul(a, b).unwrap();
        let m = g.mean(c);
        let gr = g.backward(m);
        assert!(gr.get(a).is_none());
        assert_eq!(gr.get(b).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn select_rejects_out_of_range_class() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.select(x, &[0, 3]).is_err());
    }
}
