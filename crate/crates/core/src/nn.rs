//! Minimal CPU layers with hand-written backward passes.
//!
//! Every layer works on a single sample (`Tensor`); batching happens one
//! level up. Parameters live in a [`ParamStore`] addressed by [`ParamId`] so
//! optimizers and checkpoints can treat them as a flat, named list.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            values: self.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub values: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values.iter_mut().flatten() {
            *v *= factor;
        }
    }
}

/// `c = a · b + beta · c` for row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds follow from the asserted shapes; strides index within
    // `a` (m×k) and `b` (k×n) as laid out by every caller below.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn he_normal<R: Rng + ?Sized>(fan_in: usize, len: usize, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    (0..len).map(|_| normal.sample(rng)).collect()
}

fn uniform_fan_in<R: Rng + ?Sized>(fan_in: usize, len: usize, rng: &mut R) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    (0..len).map(|_| dist.sample(rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvInit {
    He,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: ConvInit,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let len = out_channels * fan_in;
        let w = match init {
            ConvInit::He => he_normal(fan_in, len, rng),
            ConvInit::Zero => vec![0.0; len],
        };
        let weight = store.add(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            w,
        );
        let bias = store.add(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels]);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::Shape(format!(
                "{h}x{w} input is smaller than a {k}x{k} kernel",
                k = self.kernel
            )));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    pub fn forward(&self, params: &ParamStore, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        if x.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} channels, got {}",
                self.in_channels, x.channels
            )));
        }
        let (ho, wo) = self.out_hw(x.height, x.width)?;
        let k = self.kernel;
        let rows = self.in_channels * k * k;
        let spatial = ho * wo;
        let mut cols = vec![0.0; rows * spatial];
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * spatial..(row + 1) * spatial];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < x.width as isize {
                                dst[oy * wo + ox] = x.get(c, iy as usize, ix as usize);
                            }
                        }
                    }
                }
            }
        }
        let bias = params.data(self.bias);
        let mut out = vec![0.0; self.out_channels * spatial];
        for (o, chunk) in out.chunks_mut(spatial).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(
            self.out_channels,
            rows,
            spatial,
            params.data(self.weight),
            (rows as isize, 1),
            &cols,
            (spatial as isize, 1),
            1.0,
            &mut out,
        );
        Ok((
            Tensor::from_vec(self.out_channels, ho, wo, out)?,
            ConvCache {
                cols,
                in_shape: x.shape(),
                out_hw: (ho, wo),
            },
        ))
    }

    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &ConvCache,
        dy: &Tensor,
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let k = self.kernel;
        let rows = self.in_channels * k * k;
        let (ho, wo) = cache.out_hw;
        let spatial = ho * wo;
        {
            let db = grads.get_mut(self.bias);
            for (o, chunk) in dy.data.chunks(spatial).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        // dW += dy (O×S) · colsᵀ (S×R)
        gemm(
            self.out_channels,
            spatial,
            rows,
            &dy.data,
            (spatial as isize, 1),
            &cache.cols,
            (1, spatial as isize),
            1.0,
            grads.get_mut(self.weight),
        );
        if !need_input_grad {
            return None;
        }
        // dcols = Wᵀ (R×O) · dy (O×S)
        let mut dcols = vec![0.0; rows * spatial];
        gemm(
            rows,
            self.out_channels,
            spatial,
            params.data(self.weight),
            (1, rows as isize),
            &dy.data,
            (spatial as isize, 1),
            0.0,
            &mut dcols,
        );
        let (c_in, h, w) = cache.in_shape;
        let mut dx = Tensor::zeros(c_in, h, w);
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &dcols[row * spatial..(row + 1) * spatial];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                let i = dx.index(c, iy as usize, ix as usize);
                                dx.data[i] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform `±1/√fan_in` init, as for a standard fully connected classifier.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let w = uniform_fan_in(in_features, in_features * out_features, rng);
        let b = uniform_fan_in(in_features, out_features, rng);
        let weight = store.add(format!("{name}.weight"), vec![out_features, in_features], w);
        let bias = store.add(format!("{name}.bias"), vec![out_features], b);
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    /// He-normal weights and zero bias, for hidden layers followed by ReLU.
    pub fn new_hidden<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let w = he_normal(in_features, in_features * out_features, rng);
        let weight = store.add(format!("{name}.weight"), vec![out_features, in_features], w);
        let bias = store.add(format!("{name}.bias"), vec![out_features], vec![0.0; out_features]);
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward(&self, params: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_features {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {}",
                self.in_features,
                x.len()
            )));
        }
        let w = params.data(self.weight);
        let b = params.data(self.bias);
        Ok((0..self.out_features)
            .map(|o| {
                let row = &w[o * self.in_features..(o + 1) * self.in_features];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }

    pub fn backward(
        &self,
        params: &ParamStore,
        x: &[f64],
        dy: &[f64],
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        {
            let dw = grads.get_mut(self.weight);
            for (o, &g) in dy.iter().enumerate() {
                if g != 0.0 {
                    let row = &mut dw[o * self.in_features..(o + 1) * self.in_features];
                    for (r, xi) in row.iter_mut().zip(x) {
                        *r += g * xi;
                    }
                }
            }
        }
        {
            let db = grads.get_mut(self.bias);
            for (b, g) in db.iter_mut().zip(dy) {
                *b += g;
            }
        }
        if !need_input_grad {
            return None;
        }
        let w = params.data(self.weight);
        let mut dx = vec![0.0; self.in_features];
        for (o, &g) in dy.iter().enumerate() {
            let row = &w[o * self.in_features..(o + 1) * self.in_features];
            for (d, wi) in dx.iter_mut().zip(row) {
                *d += g * wi;
            }
        }
        Some(dx)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        channels: x.channels,
        height: x.height,
        width: x.width,
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Gradient of ReLU given its output.
pub fn relu_backward(output: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        channels: dy.channels,
        height: dy.height,
        width: dy.width,
        data: output
            .data
            .iter()
            .zip(&dy.data)
            .map(|(y, g)| if *y > 0.0 { *g } else { 0.0 })
            .collect(),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    pub fn forward(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        let ho = (x.height + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (x.width + 2 * self.padding - self.kernel) / self.stride + 1;
        let mut out = Tensor::zeros(x.channels, ho, wo);
        let mut argmax = vec![0; out.len()];
        for c in 0..x.channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            let i = x.index(c, iy as usize, ix as usize);
                            if x.data[i] > best {
                                best = x.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = out.index(c, oy, ox);
                    out.data[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        (out, argmax)
    }

    pub fn backward(in_shape: (usize, usize, usize), argmax: &[usize], dy: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(in_shape.0, in_shape.1, in_shape.2);
        for (g, &i) in dy.data.iter().zip(argmax) {
            dx.data[i] += g;
        }
        dx
    }
}

/// Adaptive average pooling to an `out × out` grid, with bins
/// `[floor(i·H/out), ceil((i+1)·H/out))`.
#[derive(Clone, Copy, Debug)]
pub struct AdaptiveAvgPool {
    pub out: usize,
}

impl AdaptiveAvgPool {
    fn bins(len: usize, out: usize) -> Vec<(usize, usize)> {
        (0..out)
            .map(|i| ((i * len) / out, ((i + 1) * len).div_ceil(out)))
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let ybins = Self::bins(x.height, self.out);
        let xbins = Self::bins(x.width, self.out);
        let mut out = Tensor::zeros(x.channels, self.out, self.out);
        for c in 0..x.channels {
            for (oy, &(y0, y1)) in ybins.iter().enumerate() {
                for (ox, &(x0, x1)) in xbins.iter().enumerate() {
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            sum += x.get(c, y, xx);
                        }
                    }
                    out.set(c, oy, ox, sum / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        out
    }

    pub fn backward(&self, in_shape: (usize, usize, usize), dy: &Tensor) -> Tensor {
        let (c_in, h, w) = in_shape;
        let ybins = Self::bins(h, self.out);
        let xbins = Self::bins(w, self.out);
        let mut dx = Tensor::zeros(c_in, h, w);
        for c in 0..c_in {
            for (oy, &(y0, y1)) in ybins.iter().enumerate() {
                for (ox, &(x0, x1)) in xbins.iter().enumerate() {
                    let g = dy.get(c, oy, ox) / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let i = dx.index(c, y, xx);
                            dx.data[i] += g;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Two 3×3 convolutions with an identity (or 1×1 projection) shortcut.
/// The second convolution starts at zero so a fresh block is the identity
/// map, which keeps deep stacks trainable without normalization layers.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub downsample: Option<Conv2d>,
}

pub struct BlockCache {
    c1: ConvCache,
    h1: Tensor,
    c2: ConvCache,
    ds: Option<ConvCache>,
    out: Tensor,
}

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(
            store,
            &format!("{name}.conv1"),
            in_channels,
            out_channels,
            3,
            stride,
            1,
            ConvInit::He,
            rng,
        );
        let conv2 = Conv2d::new(
            store,
            &format!("{name}.conv2"),
            out_channels,
            out_channels,
            3,
            1,
            1,
            ConvInit::Zero,
            rng,
        );
        let downsample = (stride != 1 || in_channels != out_channels).then(|| {
            Conv2d::new(
                store,
                &format!("{name}.downsample"),
                in_channels,
                out_channels,
                1,
                stride,
                0,
                ConvInit::He,
                rng,
            )
        });
        Self {
            conv1,
            conv2,
            downsample,
        }
    }

    pub fn forward(&self, params: &ParamStore, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (a1, c1) = self.conv1.forward(params, x)?;
        let h1 = relu(&a1);
        let (mut a2, c2) = self.conv2.forward(params, &h1)?;
        let ds = match &self.downsample {
            Some(conv) => {
                let (s, cache) = conv.forward(params, x)?;
                add_into(&mut a2, &s)?;
                Some(cache)
            }
            None => {
                add_into(&mut a2, x)?;
                None
            }
        };
        let out = relu(&a2);
        Ok((
            out.clone(),
            BlockCache {
                c1,
                h1,
                c2,
                ds,
                out,
            },
        ))
    }

    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &BlockCache,
        dy: &Tensor,
        grads: &mut Gradients,
    ) -> Tensor {
        let d_sum = relu_backward(&cache.out, dy);
        let dh1 = self
            .conv2
            .backward(params, &cache.c2, &d_sum, grads, true)
            .unwrap();
        let da1 = relu_backward(&cache.h1, &dh1);
        let mut dx = self
            .conv1
            .backward(params, &cache.c1, &da1, grads, true)
            .unwrap();
        let d_short = match (&self.downsample, &cache.ds) {
            (Some(conv), Some(c)) => conv.backward(params, c, &d_sum, grads, true).unwrap(),
            _ => d_sum,
        };
        for (a, b) in dx.data.iter_mut().zip(&d_short.data) {
            *a += b;
        }
        dx
    }
}

fn add_into(acc: &mut Tensor, other: &Tensor) -> Result<()> {
    if acc.shape() != other.shape() {
        return Err(Error::Shape(format!(
            "residual add of {:?} and {:?}",
            acc.shape(),
            other.shape()
        )));
    }
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
