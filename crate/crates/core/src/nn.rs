//! Minimal sequential network engine with hand-written backward passes.
//!
//! A [`Stack`] is an ordered list of [`Layer`]s over per-sample tensors of
//! shape `(c, h, w)`; batches are stored sample-major (`n × c × h × w`).
//! Convolutions are lowered to im2col plus one gemm per batch.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{matmul, MatRef, Scalar};

/// Slope of the leaky rectifier used by every hidden layer.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn flat(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    fn transposed_out_len(&self, len: usize) -> Option<usize> {
        ((len - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Conv(ConvSpec),
    /// Transposed convolution; weight shape `[cin, cout, k, k]`.
    Deconv(ConvSpec),
    Dense { din: usize, dout: usize },
    Reshape(Shape3),
    LeakyRelu,
    Tanh,
    /// Appends `channels` constant planes, one per conditioning value.
    ConcatCond { channels: usize },
}

impl Layer {
    fn param_shapes(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            Layer::Conv(c) => Some((vec![c.cout, c.cin, c.kernel, c.kernel], c.cout)),
            Layer::Deconv(c) => Some((vec![c.cin, c.cout, c.kernel, c.kernel], c.cout)),
            Layer::Dense { din, dout } => Some((vec![dout, din], dout)),
            _ => None,
        }
    }

    /// Fan-in used to scale the initial weights.
    fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv(c) => c.cin * c.patch(),
            Layer::Deconv(c) => (c.cin * c.patch() / (c.stride * c.stride)).max(1),
            Layer::Dense { din, .. } => din,
            _ => 0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("layer {index} of `{stack}` cannot accept input shape {shape:?}")]
    Incompatible { stack: String, index: usize, shape: Shape3 },
    #[error("`{stack}` expects {expected} values per sample, got {got}")]
    Input { stack: String, expected: usize, got: usize },
    #[error("`{stack}` expects {expected} conditioning values per sample, got {got}")]
    Cond { stack: String, expected: usize, got: usize },
    #[error("parameter set does not match the layout of `{stack}`")]
    Params { stack: String },
}

/// One named, shaped parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered collection of the parameter arrays of one or more stacks.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor { name: t.name.clone(), shape: t.shape.clone(), data: vec![T::zero(); t.data.len()] })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor { name: t.name.clone(), shape: t.shape.clone(), data: crate::tensor::cast_slice(&t.data) })
                .collect(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Visits every scalar in order; used by finite-difference checks.
    pub fn scalar_mut(&mut self, mut flat: usize) -> &mut T {
        for t in &mut self.tensors {
            if flat < t.data.len() {
                return &mut t.data[flat];
            }
            flat -= t.data.len();
        }
        panic!("scalar index out of range");
    }

    pub fn flat_values(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// SHA-256 over names, shapes and little-endian f64 values.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tensors {
            hasher.update(t.name.as_bytes());
            for d in &t.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                hasher.update(Scalar::to_f64(*v).to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Activations recorded during a forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    pub n: usize,
    acts: Vec<Vec<T>>,
}

impl<T> Tape<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("tape always holds the input")
    }

    pub fn into_output(mut self) -> Vec<T> {
        self.acts.pop().expect("tape always holds the input")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    pub name: String,
    pub input: Shape3,
    pub layers: Vec<Layer>,
    shapes: Vec<Shape3>,
    cond_len: usize,
}

impl Stack {
    pub fn new(name: impl Into<String>, input: Shape3, layers: Vec<Layer>) -> Result<Self, ShapeError> {
        let name = name.into();
        let mut shapes = vec![input];
        let mut cond_len = 0;
        let mut cur = input;
        for (index, layer) in layers.iter().enumerate() {
            let next = match *layer {
                Layer::Conv(c) if c.cin == cur.c && c.stride > 0 => {
                    c.out_len(cur.h).zip(c.out_len(cur.w)).map(|(h, w)| Shape3::new(c.cout, h, w))
                }
                Layer::Deconv(c) if c.cin == cur.c && c.stride > 0 && cur.h > 0 && cur.w > 0 => c
                    .transposed_out_len(cur.h)
                    .zip(c.transposed_out_len(cur.w))
                    .map(|(h, w)| Shape3::new(c.cout, h, w)),
                Layer::Dense { din, dout } if din == cur.len() => Some(Shape3::flat(dout)),
                Layer::Reshape(s) if s.len() == cur.len() => Some(s),
                Layer::LeakyRelu | Layer::Tanh => Some(cur),
                Layer::ConcatCond { channels } if cond_len == 0 => {
                    cond_len = channels;
                    Some(Shape3::new(cur.c + channels, cur.h, cur.w))
                }
                _ => None,
            };
            cur = match next {
                Some(s) if !s.is_empty() => s,
                _ => return Err(ShapeError::Incompatible { stack: name.clone(), index, shape: cur }),
            };
            shapes.push(cur);
        }
        Ok(Self { name, input, layers, shapes, cond_len })
    }

    pub fn output_shape(&self) -> Shape3 {
        *self.shapes.last().expect("shape list includes the input")
    }

    pub fn cond_len(&self) -> usize {
        self.cond_len
    }

    /// Expected `(name, shape)` of every parameter array, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((w, b)) = layer.param_shapes() {
                out.push((format!("{}.{i}.weight", self.name), w));
                out.push((format!("{}.{i}.bias", self.name), vec![b]));
            }
        }
        out
    }

    /// Weights drawn from `N(0, gain² / fan_in)`, biases zero. The gain is
    /// √2 ahead of a leaky rectifier and 1 otherwise.
    pub fn init_params<T: Scalar, R: Rng>(&self, rng: &mut R) -> ParamSet<T> {
        let mut tensors = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let Some((wshape, blen)) = layer.param_shapes() else { continue };
            let gain: f64 = match self.layers.get(i + 1) {
                Some(Layer::LeakyRelu) => 2.0,
                Some(Layer::Reshape(_)) if matches!(self.layers.get(i + 2), Some(Layer::LeakyRelu)) => 2.0,
                _ => 1.0,
            };
            let std = (gain / layer.fan_in() as f64).sqrt();
            let count: usize = wshape.iter().product();
            let data = (0..count)
                .map(|_| {
                    let g: f64 = rng.sample(StandardNormal);
                    T::from_f64(g * std)
                })
                .collect();
            tensors.push(ParamTensor { name: format!("{}.{i}.weight", self.name), shape: wshape, data });
            tensors.push(ParamTensor { name: format!("{}.{i}.bias", self.name), shape: vec![blen], data: vec![T::zero(); blen] });
        }
        ParamSet { tensors }
    }

    /// Index of this stack's first array inside `params`, after checking the layout.
    fn locate<T: Scalar>(&self, params: &ParamSet<T>) -> Result<usize, ShapeError> {
        let layout = self.param_layout();
        let err = || ShapeError::Params { stack: self.name.clone() };
        if layout.is_empty() {
            return Ok(0);
        }
        let start = params.tensors.iter().position(|t| t.name == layout[0].0).ok_or_else(err)?;
        for (off, (name, shape)) in layout.iter().enumerate() {
            let t = params.tensors.get(start + off).ok_or_else(err)?;
            if &t.name != name || &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(err());
            }
        }
        Ok(start)
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        input: &[T],
        n: usize,
        cond: Option<&[T]>,
    ) -> Result<Tape<T>, ShapeError> {
        self.run(params, input, n, cond, true)
    }

    /// Forward pass that keeps only the output.
    pub fn infer<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        input: &[T],
        n: usize,
        cond: Option<&[T]>,
    ) -> Result<Vec<T>, ShapeError> {
        Ok(self.run(params, input, n, cond, false)?.into_output())
    }

    fn run<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        input: &[T],
        n: usize,
        cond: Option<&[T]>,
        keep: bool,
    ) -> Result<Tape<T>, ShapeError> {
        if input.len() != n * self.input.len() {
            return Err(ShapeError::Input { stack: self.name.clone(), expected: self.input.len(), got: input.len() / n.max(1) });
        }
        let cond_len = cond.map_or(0, |c| c.len());
        if cond_len != n * self.cond_len {
            return Err(ShapeError::Cond { stack: self.name.clone(), expected: self.cond_len, got: cond_len / n.max(1) });
        }
        let mut pi = self.locate(params)?;
        let mut acts: Vec<Vec<T>> = vec![input.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let x = acts.last().expect("non-empty");
            let (si, so) = (self.shapes[i], self.shapes[i + 1]);
            let y = match *layer {
                Layer::Conv(c) => {
                    let (w, b) = (&params.tensors[pi].data, &params.tensors[pi + 1].data);
                    pi += 2;
                    conv_forward(c, si, so, n, x, w, b)
                }
                Layer::Deconv(c) => {
                    let (w, b) = (&params.tensors[pi].data, &params.tensors[pi + 1].data);
                    pi += 2;
                    deconv_forward(c, si, so, n, x, w, b)
                }
                Layer::Dense { din, dout } => {
                    let (w, b) = (&params.tensors[pi].data, &params.tensors[pi + 1].data);
                    pi += 2;
                    let mut y = vec![T::zero(); n * dout];
                    matmul(MatRef::new(x, n, din), MatRef::new(w, dout, din).t(), &mut y, false);
                    for row in y.chunks_exact_mut(dout) {
                        row.iter_mut().zip(b).for_each(|(v, &bb)| *v = *v + bb);
                    }
                    y
                }
                Layer::Reshape(_) => x.clone(),
                Layer::LeakyRelu => {
                    let slope = T::from_f64(LEAKY_SLOPE);
                    x.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect()
                }
                Layer::Tanh => x.iter().map(|v| v.tanh()).collect(),
                Layer::ConcatCond { channels } => {
                    let cond = cond.expect("checked above");
                    let plane = si.h * si.w;
                    let mut y = Vec::with_capacity(n * so.len());
                    for s in 0..n {
                        y.extend_from_slice(&x[s * si.len()..(s + 1) * si.len()]);
                        for j in 0..channels {
                            let v = cond[s * channels + j];
                            y.extend(std::iter::repeat_n(v, plane));
                        }
                    }
                    y
                }
            };
            if keep {
                acts.push(y);
            } else {
                acts = vec![y];
            }
        }
        Ok(Tape { n, acts })
    }

    /// Back-propagates `grad_out` through the recorded pass. Parameter
    /// gradients are accumulated into `param_grads` when given; the input
    /// gradient is returned when `want_input_grad`.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        tape: &Tape<T>,
        grad_out: Vec<T>,
        mut param_grads: Option<&mut ParamSet<T>>,
        want_input_grad: bool,
    ) -> Result<Option<Vec<T>>, ShapeError> {
        assert_eq!(tape.acts.len(), self.layers.len() + 1, "backward needs a full tape");
        let n = tape.n;
        assert_eq!(grad_out.len(), n * self.output_shape().len());
        let start = self.locate(params)?;
        if let Some(g) = param_grads.as_deref() {
            if self.locate(g)? != start {
                return Err(ShapeError::Params { stack: self.name.clone() });
            }
        }
        // Parameter index of each layer's weight.
        let mut pidx = Vec::with_capacity(self.layers.len());
        let mut p = start;
        for layer in &self.layers {
            pidx.push(p);
            if layer.param_shapes().is_some() {
                p += 2;
            }
        }
        let first_param = self.layers.iter().position(|l| l.param_shapes().is_some()).unwrap_or(self.layers.len());
        if !want_input_grad && param_grads.is_none() {
            return Ok(None);
        }
        let stop = if want_input_grad { 0 } else { first_param };
        let mut grad = grad_out;
        for i in (stop..self.layers.len()).rev() {
            let need_dx = want_input_grad || i > first_param;
            let (si, so) = (self.shapes[i], self.shapes[i + 1]);
            let x = &tape.acts[i];
            let pi = pidx[i];
            grad = match self.layers[i] {
                Layer::Conv(c) => {
                    let w = &params.tensors[pi].data;
                    let pg = param_grads.as_deref_mut().map(|g| split_pair(g, pi));
                    conv_backward(c, si, so, n, x, w, &grad, pg, need_dx)
                }
                Layer::Deconv(c) => {
                    let w = &params.tensors[pi].data;
                    let pg = param_grads.as_deref_mut().map(|g| split_pair(g, pi));
                    deconv_backward(c, si, so, n, x, w, &grad, pg, need_dx)
                }
                Layer::Dense { din, dout } => {
                    let w = &params.tensors[pi].data;
                    if let Some(g) = param_grads.as_deref_mut() {
                        let (gw, gb) = split_pair(g, pi);
                        matmul(MatRef::new(&grad, n, dout).t(), MatRef::new(x, n, din), gw, true);
                        for row in grad.chunks_exact(dout) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                        }
                    }
                    if need_dx {
                        let mut dx = vec![T::zero(); n * din];
                        matmul(MatRef::new(&grad, n, dout), MatRef::new(w, dout, din), &mut dx, false);
                        dx
                    } else {
                        Vec::new()
                    }
                }
                Layer::Reshape(_) => grad,
                Layer::LeakyRelu => {
                    let slope = T::from_f64(LEAKY_SLOPE);
                    grad.iter().zip(x).map(|(&g, &v)| if v > T::zero() { g } else { g * slope }).collect()
                }
                Layer::Tanh => {
                    let y = &tape.acts[i + 1];
                    grad.iter().zip(y).map(|(&g, &v)| g * (T::one() - v * v)).collect()
                }
                Layer::ConcatCond { .. } => {
                    let mut dx = Vec::with_capacity(n * si.len());
                    for s in 0..n {
                        dx.extend_from_slice(&grad[s * so.len()..s * so.len() + si.len()]);
                    }
                    dx
                }
            };
            debug_assert!(!need_dx || grad.len() == n * si.len());
        }
        Ok(if want_input_grad { Some(grad) } else { None })
    }
}

fn split_pair<T>(g: &mut ParamSet<T>, pi: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = g.tensors.split_at_mut(pi + 1);
    (&mut a[pi].data, &mut b[0].data)
}

/// Lays out patches of `x` (one sample, `c×h×w`) as columns
/// `[c·k·k, ho·wo]` starting at column `col0` of a matrix with `ld` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], s: Shape3, c: ConvSpec, ho: usize, wo: usize, cols: &mut [T], ld: usize, col0: usize) {
    let k = c.kernel;
    for ci in 0..s.c {
        let plane = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ld + col0..row * ld + col0 + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= s.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                        *v = if ix < 0 || ix >= s.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, accumulating.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], s: Shape3, c: ConvSpec, ho: usize, wo: usize, ld: usize, col0: usize, x: &mut [T]) {
    let k = c.kernel;
    for ci in 0..s.c {
        let plane = &mut x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ld + col0..row * ld + col0 + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for ox in 0..wo {
                        let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, hw]` → `[c, n·hw]`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for ci in 0..c {
            let src = &x[(s * c + ci) * hw..(s * c + ci + 1) * hw];
            out[ci * n * hw + s * hw..ci * n * hw + (s + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// `[c, n·hw]` → `[n, c, hw]`.
fn from_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        for s in 0..n {
            let src = &x[ci * n * hw + s * hw..ci * n * hw + (s + 1) * hw];
            out[(s * c + ci) * hw..(s * c + ci + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

fn conv_forward<T: Scalar>(c: ConvSpec, si: Shape3, so: Shape3, n: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let ckk = c.cin * c.patch();
    let hw = so.h * so.w;
    let ld = n * hw;
    let mut cols = vec![T::zero(); ckk * ld];
    for s in 0..n {
        im2col(&x[s * si.len()..(s + 1) * si.len()], si, c, so.h, so.w, &mut cols, ld, s * hw);
    }
    let mut out = vec![T::zero(); c.cout * ld];
    matmul(MatRef::new(w, c.cout, ckk), MatRef::new(&cols, ckk, ld), &mut out, false);
    for (co, row) in out.chunks_exact_mut(ld).enumerate() {
        row.iter_mut().for_each(|v| *v = *v + b[co]);
    }
    from_channel_major(&out, n, c.cout, hw)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    c: ConvSpec,
    si: Shape3,
    so: Shape3,
    n: usize,
    x: &[T],
    w: &[T],
    grad: &[T],
    pg: Option<(&mut [T], &mut [T])>,
    need_dx: bool,
) -> Vec<T> {
    let ckk = c.cin * c.patch();
    let hw = so.h * so.w;
    let ld = n * hw;
    let g = to_channel_major(grad, n, c.cout, hw);
    if let Some((gw, gb)) = pg {
        let mut cols = vec![T::zero(); ckk * ld];
        for s in 0..n {
            im2col(&x[s * si.len()..(s + 1) * si.len()], si, c, so.h, so.w, &mut cols, ld, s * hw);
        }
        matmul(MatRef::new(&g, c.cout, ld), MatRef::new(&cols, ckk, ld).t(), gw, true);
        for (co, row) in g.chunks_exact(ld).enumerate() {
            gb[co] = row.iter().fold(gb[co], |a, &v| a + v);
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dcols = vec![T::zero(); ckk * ld];
    matmul(MatRef::new(w, c.cout, ckk).t(), MatRef::new(&g, c.cout, ld), &mut dcols, false);
    let mut dx = vec![T::zero(); n * si.len()];
    for s in 0..n {
        col2im(&dcols, si, c, so.h, so.w, ld, s * hw, &mut dx[s * si.len()..(s + 1) * si.len()]);
    }
    dx
}

// A transposed convolution from `si` to `so` is the adjoint of a convolution
// from `so` to `si` with the same kernel geometry: the output plays the role of
// the convolution's image and the input the role of its output grid.
fn deconv_forward<T: Scalar>(c: ConvSpec, si: Shape3, so: Shape3, n: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let okk = c.cout * c.patch();
    let hw = si.h * si.w;
    let ld = n * hw;
    let xg = to_channel_major(x, n, c.cin, hw);
    let mut cols = vec![T::zero(); okk * ld];
    matmul(MatRef::new(w, c.cin, okk).t(), MatRef::new(&xg, c.cin, ld), &mut cols, false);
    let mut y = vec![T::zero(); n * so.len()];
    let plane = so.h * so.w;
    for s in 0..n {
        let ys = &mut y[s * so.len()..(s + 1) * so.len()];
        col2im(&cols, so, c, si.h, si.w, ld, s * hw, ys);
        for (co, p) in ys.chunks_exact_mut(plane).enumerate() {
            p.iter_mut().for_each(|v| *v = *v + b[co]);
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn deconv_backward<T: Scalar>(
    c: ConvSpec,
    si: Shape3,
    so: Shape3,
    n: usize,
    x: &[T],
    w: &[T],
    grad: &[T],
    pg: Option<(&mut [T], &mut [T])>,
    need_dx: bool,
) -> Vec<T> {
    let okk = c.cout * c.patch();
    let hw = si.h * si.w;
    let ld = n * hw;
    let mut dcols = vec![T::zero(); okk * ld];
    for s in 0..n {
        im2col(&grad[s * so.len()..(s + 1) * so.len()], so, c, si.h, si.w, &mut dcols, ld, s * hw);
    }
    if let Some((gw, gb)) = pg {
        let xg = to_channel_major(x, n, c.cin, hw);
        matmul(MatRef::new(&xg, c.cin, ld), MatRef::new(&dcols, okk, ld).t(), gw, true);
        let plane = so.h * so.w;
        for s in 0..n {
            for (co, p) in grad[s * so.len()..(s + 1) * so.len()].chunks_exact(plane).enumerate() {
                gb[co] = p.iter().fold(gb[co], |a, &v| a + v);
            }
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dxg = vec![T::zero(); c.cin * ld];
    matmul(MatRef::new(w, c.cin, okk), MatRef::new(&dcols, okk, ld), &mut dxg, false);
    from_channel_major(&dxg, n, c.cin, hw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvSpec {
        ConvSpec { cin, cout, kernel: k, stride, pad }
    }

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &[f64], s: Shape3, c: ConvSpec, w: &[f64], b: &[f64]) -> Vec<f64> {
        let ho = (s.h + 2 * c.pad - c.kernel) / c.stride + 1;
        let wo = (s.w + 2 * c.pad - c.kernel) / c.stride + 1;
        let mut out = vec![0.0; c.cout * ho * wo];
        for co in 0..c.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..c.cin {
                        for ky in 0..c.kernel {
                            for kx in 0..c.kernel {
                                let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                    acc += x[(ci * s.h + iy as usize) * s.w + ix as usize]
                                        * w[((co * c.cin + ci) * c.kernel + ky) * c.kernel + kx];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape3::new(2, 5, 6);
        let c = conv(2, 3, 3, 2, 1);
        let stack = Stack::new("t", s, vec![Layer::Conv(c)]).unwrap();
        let params: ParamSet<f64> = stack.init_params(&mut rng);
        let mut params = params;
        params.tensors[1].data = vec![0.1, -0.2, 0.3];
        let x: Vec<f64> = (0..2 * s.len()).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
        let y = stack.infer(&params, &x, 2, None).unwrap();
        let per = stack.output_shape().len();
        for smp in 0..2 {
            let expect = naive_conv(&x[smp * s.len()..(smp + 1) * s.len()], s, c, &params.tensors[0].data, &params.tensors[1].data);
            for (a, b) in y[smp * per..(smp + 1) * per].iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> when both share the kernel and have zero bias.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let big = Shape3::new(2, 8, 8);
        let c = conv(2, 3, 4, 2, 1);
        let cs = Stack::new("c", big, vec![Layer::Conv(c)]).unwrap();
        let small = cs.output_shape();
        let ds = Stack::new("d", small, vec![Layer::Deconv(conv(3, 2, 4, 2, 1))]).unwrap();
        assert_eq!(ds.output_shape(), big);
        let cp: ParamSet<f64> = cs.init_params(&mut rng);
        // conv weight [cout=3, cin=2, k, k] reinterpreted as deconv weight [cin=3, cout=2, k, k].
        let mut dp: ParamSet<f64> = ds.init_params(&mut rng);
        dp.tensors[0].data = cp.tensors[0].data.clone();
        let x: Vec<f64> = (0..big.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..small.len()).map(|i| (i as f64 * 0.91).cos()).collect();
        let cx = cs.infer(&cp, &x, 1, None).unwrap();
        let dy = ds.infer(&dp, &y, 1, None).unwrap();
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dy).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stack = Stack::new(
            "g",
            Shape3::new(3, 4, 4),
            vec![
                Layer::Conv(conv(3, 4, 3, 2, 1)),
                Layer::LeakyRelu,
                Layer::ConcatCond { channels: 2 },
                Layer::Conv(conv(6, 5, 3, 2, 1)),
                Layer::Tanh,
                Layer::Reshape(Shape3::new(5, 1, 1)),
                Layer::Dense { din: 5, dout: 8 },
                Layer::Reshape(Shape3::new(2, 2, 2)),
                Layer::Deconv(conv(2, 3, 4, 2, 1)),
                Layer::Tanh,
            ],
        )
        .unwrap();
        let mut params: ParamSet<f64> = stack.init_params(&mut rng);
        for t in &mut params.tensors {
            if t.name.ends_with("bias") {
                t.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * i as f64 - 0.1);
            }
        }
        let n = 2;
        let x: Vec<f64> = (0..n * 48).map(|i| ((i as f64) * 0.613).sin()).collect();
        let cond = vec![0.0, 1.0, 1.0, 0.0];
        let target: Vec<f64> = (0..n * stack.output_shape().len()).map(|i| ((i as f64) * 0.29).cos() * 0.5).collect();
        let loss = |p: &ParamSet<f64>, x: &[f64]| -> f64 {
            let y = stack.infer(p, x, n, Some(&cond)).unwrap();
            y.iter().zip(&target).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
        };
        let tape = stack.forward(&params, &x, n, Some(&cond)).unwrap();
        let g: Vec<f64> = tape.output().iter().zip(&target).map(|(a, b)| a - b).collect();
        let mut grads = params.zeros_like();
        let dx = stack.backward(&params, &tape, g, Some(&mut grads), true).unwrap().unwrap();
        let h = 1e-6;
        for i in 0..params.scalar_count() {
            let mut p = params.clone();
            *p.scalar_mut(i) += h;
            let up = loss(&p, &x);
            *p.scalar_mut(i) -= 2.0 * h;
            let down = loss(&p, &x);
            let fd = (up - down) / (2.0 * h);
            let an = grads.flat_values()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} analytic {an}");
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let up = loss(&params, &xp);
            xp[i] -= 2.0 * h;
            let down = loss(&params, &xp);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dx[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "input {i}: fd {fd} analytic {}", dx[i]);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Stack::new("x", Shape3::new(3, 4, 4), vec![Layer::Conv(conv(2, 4, 3, 1, 1))]).is_err());
        assert!(Stack::new("x", Shape3::new(3, 4, 4), vec![Layer::Dense { din: 10, dout: 2 }]).is_err());
        let s = Stack::new("x", Shape3::new(1, 2, 2), vec![Layer::Dense { din: 4, dout: 2 }]).unwrap();
        let p: ParamSet<f32> = s.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(s.infer(&p, &[0.0; 3], 1, None), Err(ShapeError::Input { .. })));
    }
}
