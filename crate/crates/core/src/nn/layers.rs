//! Layers with explicit forward caches and reverse passes. A forward call
//! returns the output together with everything its backward pass needs;
//! backward accumulates parameter gradients and returns the input gradient.

use rand::Rng;

use super::tensor::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::parameter(shape, data)
}

fn zeros_param<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    t.enable_grad();
    t
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub padding: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, padding: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            weight: kaiming_uniform(&[out_ch, in_ch, kernel], in_ch * kernel, rng)?,
            bias: zeros_param(&[out_ch]),
            padding,
        })
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2])
    }

    fn compute(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        x.expect_rank(3, "conv1d")?;
        let (cout, cin, k) = self.dims();
        let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if c != cin {
            return Err(Error::shape(format!("conv1d expects {cin} channels, got {c}")));
        }
        let p = self.padding;
        if l + 2 * p < k {
            return Err(Error::shape(format!("conv1d input length {l} shorter than kernel {k}")));
        }
        let lout = l + 2 * p - k + 1;
        let nl = n * lout;
        let xd = x.data();

        let mut col = vec![T::zero(); cin * k * nl];
        for ci in 0..cin {
            for kk in 0..k {
                let row = &mut col[(ci * k + kk) * nl..(ci * k + kk + 1) * nl];
                for ni in 0..n {
                    let src = &xd[(ni * c + ci) * l..(ni * c + ci + 1) * l];
                    let dst = &mut row[ni * lout..(ni + 1) * lout];
                    // Output t reads input t + kk - p.
                    let t_lo = p.saturating_sub(kk);
                    let t_hi = (l + p).saturating_sub(kk).min(lout);
                    if t_lo < t_hi {
                        let s_lo = t_lo + kk - p;
                        dst[t_lo..t_hi].copy_from_slice(&src[s_lo..s_lo + (t_hi - t_lo)]);
                    }
                }
            }
        }

        let mut out_mat = vec![T::zero(); cout * nl];
        gemm(
            MatRef::row_major(self.weight.data(), cout, cin * k),
            MatRef::row_major(&col, cin * k, nl),
            T::zero(),
            &mut out_mat,
        );
        let mut y = vec![T::zero(); n * cout * lout];
        let bias = self.bias.data();
        for o in 0..cout {
            for ni in 0..n {
                let src = &out_mat[o * nl + ni * lout..o * nl + (ni + 1) * lout];
                let dst = &mut y[(ni * cout + o) * lout..(ni * cout + o + 1) * lout];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bias[o];
                }
            }
        }
        Ok((
            Tensor::from_vec(&[n, cout, lout], y)?,
            Cache::Conv {
                col,
                input_shape: [n, c, l],
                lout,
            },
        ))
    }

    fn backward(&mut self, col: &[T], input_shape: [usize; 3], lout: usize, gy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let (cout, cin, k) = self.dims();
        let [n, _, l] = input_shape;
        let nl = n * lout;
        if gy.shape() != [n, cout, lout] {
            return Err(Error::shape("conv1d backward: gradient shape mismatch"));
        }
        let g = gy.data();
        let mut gmat = vec![T::zero(); cout * nl];
        for ni in 0..n {
            for o in 0..cout {
                gmat[o * nl + ni * lout..o * nl + (ni + 1) * lout]
                    .copy_from_slice(&g[(ni * cout + o) * lout..(ni * cout + o + 1) * lout]);
            }
        }
        if let Some(dw) = self.weight.grad_mut() {
            gemm(
                MatRef::row_major(&gmat, cout, nl),
                MatRef::row_major(col, cin * k, nl).t(),
                T::one(),
                dw,
            );
        }
        if let Some(db) = self.bias.grad_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += gmat[o * nl..(o + 1) * nl].iter().copied().sum::<T>();
            }
        }
        if !need_dx {
            return Ok(None);
        }
        let mut dcol = vec![T::zero(); cin * k * nl];
        gemm(
            MatRef::row_major(self.weight.data(), cout, cin * k).t(),
            MatRef::row_major(&gmat, cout, nl),
            T::zero(),
            &mut dcol,
        );
        let p = self.padding;
        let mut dx = vec![T::zero(); n * cin * l];
        for ci in 0..cin {
            for kk in 0..k {
                let row = &dcol[(ci * k + kk) * nl..(ci * k + kk + 1) * nl];
                for ni in 0..n {
                    let src = &row[ni * lout..(ni + 1) * lout];
                    let dst = &mut dx[(ni * cin + ci) * l..(ni * cin + ci + 1) * l];
                    let t_lo = p.saturating_sub(kk);
                    let t_hi = (l + p).saturating_sub(kk).min(lout);
                    if t_lo < t_hi {
                        let s_lo = t_lo + kk - p;
                        add_into(&mut dst[s_lo..s_lo + (t_hi - t_lo)], &src[t_lo..t_hi]);
                    }
                }
            }
        }
        Ok(Some(Tensor::from_vec(&[n, cin, l], dx)?))
    }
}

/// Batch normalization over `[N, C]` or `[N, C, L]`, statistics per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub fn new(channels: usize) -> Self {
        let mut weight = Tensor::from_vec(&[channels], vec![T::one(); channels]).expect("shape");
        weight.enable_grad();
        Self {
            weight,
            bias: zeros_param(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![T::one(); channels]).expect("shape"),
        }
    }

    fn layout(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let c = self.weight.len();
        let (n, xc, l) = match *x.shape() {
            [n, xc] => (n, xc, 1),
            [n, xc, l] => (n, xc, l),
            _ => return Err(Error::shape(format!("batchnorm expects rank 2 or 3, got {:?}", x.shape()))),
        };
        if xc != c {
            return Err(Error::shape(format!("batchnorm expects {c} channels, got {xc}")));
        }
        Ok((n, c, l))
    }

    fn compute(&self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, Cache<T>)> {
        let (n, c, l) = self.layout(x)?;
        let m = n * l;
        if train && m < 2 {
            return Err(Error::shape("batchnorm in training mode needs more than one value per channel"));
        }
        let xd = x.data();
        let eps = T::from_f64(BN_EPS);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            let inv_m = T::from_f64(1.0 / m as f64);
            for ci in 0..c {
                let mut s = T::zero();
                for ni in 0..n {
                    s += xd[(ni * c + ci) * l..(ni * c + ci + 1) * l].iter().copied().sum::<T>();
                }
                let mu = s * inv_m;
                let mut v = T::zero();
                for ni in 0..n {
                    for &xv in &xd[(ni * c + ci) * l..(ni * c + ci + 1) * l] {
                        v += (xv - mu) * (xv - mu);
                    }
                }
                mean[ci] = mu;
                var[ci] = v * inv_m;
            }
        } else {
            mean.copy_from_slice(self.running_mean.data());
            var.copy_from_slice(self.running_var.data());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gamma, beta) = (self.weight.data(), self.bias.data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * l;
                for i in off..off + l {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    y[i] = gamma[ci] * h + beta[ci];
                }
            }
        }
        Ok((
            Tensor::from_vec(x.shape(), y)?,
            Cache::BatchNorm {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                shape: x.shape().to_vec(),
                train,
            },
        ))
    }

    fn update_running(&mut self, mean: &[T], var: &[T], count: usize) {
        let mom = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - mom;
        let unbias = T::from_f64(count as f64 / (count as f64 - 1.0));
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + mom * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = keep * *r + mom * v * unbias;
        }
    }

    fn backward(&mut self, xhat: &[T], inv_std: &[T], shape: &[usize], train: bool, gy: &Tensor<T>) -> Result<Tensor<T>> {
        if gy.shape() != shape {
            return Err(Error::shape("batchnorm backward: gradient shape mismatch"));
        }
        let c = self.weight.len();
        let n = shape[0];
        let l = if shape.len() == 3 { shape[2] } else { 1 };
        let m = T::from_f64((n * l) as f64);
        let g = gy.data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * l;
                for i in off..off + l {
                    sum_g[ci] += g[i];
                    sum_gx[ci] += g[i] * xhat[i];
                }
            }
        }
        if let Some(dg) = self.weight.grad_mut() {
            add_into(dg, &sum_gx);
        }
        if let Some(db) = self.bias.grad_mut() {
            add_into(db, &sum_g);
        }
        let gamma = self.weight.data();
        let mut dx = vec![T::zero(); g.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * l;
                let scale = gamma[ci] * inv_std[ci];
                for i in off..off + l {
                    dx[i] = if train {
                        scale * (g[i] - (sum_g[ci] + xhat[i] * sum_gx[ci]) / m)
                    } else {
                        scale * g[i]
                    };
                }
            }
        }
        Tensor::from_vec(shape, dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            weight: kaiming_uniform(&[out_features, in_features], in_features, rng)?,
            bias: zeros_param(&[out_features]),
        })
    }

    fn compute(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
        x.expect_rank(2, "linear")?;
        let (out_f, in_f) = (self.weight.shape()[0], self.weight.shape()[1]);
        let n = x.shape()[0];
        if x.shape()[1] != in_f {
            return Err(Error::shape(format!("linear expects {in_f} features, got {}", x.shape()[1])));
        }
        let mut y = vec![T::zero(); n * out_f];
        for row in y.chunks_exact_mut(out_f) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(
            MatRef::row_major(x.data(), n, in_f),
            MatRef::row_major(self.weight.data(), out_f, in_f).t(),
            T::one(),
            &mut y,
        );
        Ok((
            Tensor::from_vec(&[n, out_f], y)?,
            Cache::Linear {
                input: x.data().to_vec(),
                n,
            },
        ))
    }

    fn backward(&mut self, input: &[T], n: usize, gy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let (out_f, in_f) = (self.weight.shape()[0], self.weight.shape()[1]);
        if gy.shape() != [n, out_f] {
            return Err(Error::shape("linear backward: gradient shape mismatch"));
        }
        let g = gy.data();
        if let Some(dw) = self.weight.grad_mut() {
            gemm(
                MatRef::row_major(g, n, out_f).t(),
                MatRef::row_major(input, n, in_f),
                T::one(),
                dw,
            );
        }
        if let Some(db) = self.bias.grad_mut() {
            for row in g.chunks_exact(out_f) {
                add_into(db, row);
            }
        }
        if !need_dx {
            return Ok(None);
        }
        let mut dx = vec![T::zero(); n * in_f];
        gemm(
            MatRef::row_major(g, n, out_f),
            MatRef::row_major(self.weight.data(), out_f, in_f),
            T::zero(),
            &mut dx,
        );
        Ok(Some(Tensor::from_vec(&[n, in_f], dx)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv1d(Conv1d<T>),
    BatchNorm1d(BatchNorm1d<T>),
    Relu,
    /// Elementwise magnitude.
    Abs,
    /// Kernel and stride.
    MaxPool1d(usize),
    /// Kernel and stride.
    AvgPool1d(usize),
    /// Output length.
    AdaptiveAvgPool1d(usize),
    Flatten,
    Linear(Linear<T>),
    L2Normalize,
}

/// What a layer's backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    Conv {
        col: Vec<T>,
        input_shape: [usize; 3],
        lout: usize,
    },
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_mean: Vec<T>,
        batch_var: Vec<T>,
        shape: Vec<usize>,
        train: bool,
    },
    Relu {
        active: Vec<bool>,
        shape: Vec<usize>,
    },
    Abs {
        negative: Vec<bool>,
        shape: Vec<usize>,
    },
    MaxPool {
        argmax: Vec<usize>,
        input_shape: [usize; 3],
    },
    AvgPool {
        input_shape: [usize; 3],
    },
    Flatten {
        input_shape: Vec<usize>,
    },
    Linear {
        input: Vec<T>,
        n: usize,
    },
    L2 {
        output: Vec<T>,
        norms: Vec<T>,
        dim: usize,
    },
}

fn pool_window(i: usize, out: usize, len: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv1d(_) => "conv1d",
            Layer::BatchNorm1d(_) => "batchnorm1d",
            Layer::Relu => "relu",
            Layer::Abs => "abs",
            Layer::MaxPool1d(_) => "maxpool1d",
            Layer::AvgPool1d(_) => "avgpool1d",
            Layer::AdaptiveAvgPool1d(_) => "adaptive_avg_pool1d",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
            Layer::L2Normalize => "l2_normalize",
        }
    }

    /// Forward without touching running statistics.
    pub(crate) fn compute(&self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, Cache<T>)> {
        match self {
            Layer::Conv1d(conv) => conv.compute(x),
            Layer::BatchNorm1d(bn) => bn.compute(x, train),
            Layer::Linear(lin) => lin.compute(x),
            Layer::Relu => {
                let active: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
                let y = x
                    .data()
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { T::zero() })
                    .collect();
                Ok((
                    Tensor::from_vec(x.shape(), y)?,
                    Cache::Relu {
                        active,
                        shape: x.shape().to_vec(),
                    },
                ))
            }
            Layer::Abs => {
                let negative: Vec<bool> = x.data().iter().map(|&v| v < T::zero()).collect();
                let y = x.data().iter().map(|&v| v.abs()).collect();
                Ok((
                    Tensor::from_vec(x.shape(), y)?,
                    Cache::Abs {
                        negative,
                        shape: x.shape().to_vec(),
                    },
                ))
            }
            Layer::MaxPool1d(k) => {
                x.expect_rank(3, "maxpool1d")?;
                let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let k = *k;
                let lout = l / k;
                if lout == 0 {
                    return Err(Error::shape(format!("maxpool1d: length {l} shorter than kernel {k}")));
                }
                let xd = x.data();
                let mut y = Vec::with_capacity(n * c * lout);
                let mut argmax = Vec::with_capacity(n * c * lout);
                for row in 0..n * c {
                    let base = row * l;
                    for t in 0..lout {
                        let mut best = base + t * k;
                        for j in 1..k {
                            if xd[base + t * k + j] > xd[best] {
                                best = base + t * k + j;
                            }
                        }
                        y.push(xd[best]);
                        argmax.push(best);
                    }
                }
                Ok((
                    Tensor::from_vec(&[n, c, lout], y)?,
                    Cache::MaxPool {
                        argmax,
                        input_shape: [n, c, l],
                    },
                ))
            }
            Layer::AvgPool1d(k) => {
                x.expect_rank(3, "avgpool1d")?;
                let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let k = *k;
                let lout = l / k;
                if lout == 0 {
                    return Err(Error::shape(format!("avgpool1d: length {l} shorter than kernel {k}")));
                }
                let xd = x.data();
                let scale = T::from_f64(1.0 / k as f64);
                let mut y = Vec::with_capacity(n * c * lout);
                for row in 0..n * c {
                    let src = &xd[row * l..row * l + lout * k];
                    y.extend(src.chunks_exact(k).map(|w| w.iter().copied().sum::<T>() * scale));
                }
                Ok((
                    Tensor::from_vec(&[n, c, lout], y)?,
                    Cache::AvgPool {
                        input_shape: [n, c, l],
                    },
                ))
            }
            Layer::AdaptiveAvgPool1d(out) => {
                x.expect_rank(3, "adaptive_avg_pool1d")?;
                let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let out = *out;
                if out == 0 || l == 0 {
                    return Err(Error::shape("adaptive_avg_pool1d: empty input or output"));
                }
                let xd = x.data();
                let mut y = Vec::with_capacity(n * c * out);
                for row in 0..n * c {
                    let src = &xd[row * l..(row + 1) * l];
                    for i in 0..out {
                        let (s, e) = pool_window(i, out, l);
                        let sum: T = src[s..e].iter().copied().sum();
                        y.push(sum / T::from_f64((e - s) as f64));
                    }
                }
                Ok((
                    Tensor::from_vec(&[n, c, out], y)?,
                    Cache::AvgPool {
                        input_shape: [n, c, l],
                    },
                ))
            }
            Layer::Flatten => {
                let n = *x.shape().first().ok_or_else(|| Error::shape("flatten of a scalar"))?;
                let rest = x.len() / n.max(1);
                Ok((
                    x.clone().reshape(&[n, rest])?,
                    Cache::Flatten {
                        input_shape: x.shape().to_vec(),
                    },
                ))
            }
            Layer::L2Normalize => {
                x.expect_rank(2, "l2_normalize")?;
                let dim = x.shape()[1];
                let eps = T::from_f64(L2_EPS);
                let mut output = Vec::with_capacity(x.len());
                let mut norms = Vec::with_capacity(x.shape()[0]);
                for row in x.rows() {
                    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let denom = norm.max(eps);
                    output.extend(row.iter().map(|&v| v / denom));
                    norms.push(norm);
                }
                Ok((
                    Tensor::from_vec(x.shape(), output.clone())?,
                    Cache::L2 { output, norms, dim },
                ))
            }
        }
    }

    /// Forward pass. In training mode batch normalization uses and records
    /// batch statistics.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, Cache<T>)> {
        let (y, cache) = self.compute(x, train)?;
        if let (Layer::BatchNorm1d(bn), Cache::BatchNorm { batch_mean, batch_var, shape, train: true, .. }) =
            (&mut *self, &cache)
        {
            let count = shape[0] * shape.get(2).copied().unwrap_or(1);
            bn.update_running(batch_mean, batch_var, count);
        }
        Ok((y, cache))
    }

    /// Evaluation-mode forward without caches or state updates.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.compute(x, false)?.0)
    }

    /// Reverse pass; accumulates parameter gradients and returns the input
    /// gradient when `need_dx`.
    pub fn backward(&mut self, cache: &Cache<T>, gy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let mismatch = || Error::shape("cache does not belong to this layer");
        match (self, cache) {
            (Layer::Conv1d(conv), Cache::Conv { col, input_shape, lout }) => {
                conv.backward(col, *input_shape, *lout, gy, need_dx)
            }
            (Layer::BatchNorm1d(bn), Cache::BatchNorm { xhat, inv_std, shape, train, .. }) => {
                Ok(Some(bn.backward(xhat, inv_std, shape, *train, gy)?))
            }
            (Layer::Linear(lin), Cache::Linear { input, n }) => lin.backward(input, *n, gy, need_dx),
            (Layer::Relu, Cache::Relu { active, shape }) => {
                if gy.shape() != shape.as_slice() {
                    return Err(Error::shape("relu backward: gradient shape mismatch"));
                }
                let dx = gy
                    .data()
                    .iter()
                    .zip(active)
                    .map(|(&g, &a)| if a { g } else { T::zero() })
                    .collect();
                Ok(Some(Tensor::from_vec(shape, dx)?))
            }
            (Layer::Abs, Cache::Abs { negative, shape }) => {
                if gy.shape() != shape.as_slice() {
                    return Err(Error::shape("abs backward: gradient shape mismatch"));
                }
                let dx = gy
                    .data()
                    .iter()
                    .zip(negative)
                    .map(|(&g, &neg)| if neg { -g } else { g })
                    .collect();
                Ok(Some(Tensor::from_vec(shape, dx)?))
            }
            (Layer::MaxPool1d(_), Cache::MaxPool { argmax, input_shape }) => {
                let mut dx = vec![T::zero(); input_shape.iter().product()];
                if gy.len() != argmax.len() {
                    return Err(Error::shape("maxpool backward: gradient shape mismatch"));
                }
                for (&g, &i) in gy.data().iter().zip(argmax) {
                    dx[i] += g;
                }
                Ok(Some(Tensor::from_vec(input_shape, dx)?))
            }
            (Layer::AvgPool1d(k), Cache::AvgPool { input_shape }) => {
                let [n, c, l] = *input_shape;
                let k = *k;
                let lout = l / k;
                if gy.shape() != [n, c, lout] {
                    return Err(Error::shape("avgpool1d backward: gradient shape mismatch"));
                }
                let scale = T::from_f64(1.0 / k as f64);
                let mut dx = vec![T::zero(); n * c * l];
                for (row, g) in gy.data().chunks_exact(lout).enumerate() {
                    for (t, &gt) in g.iter().enumerate() {
                        let start = row * l + t * k;
                        for d in &mut dx[start..start + k] {
                            *d = gt * scale;
                        }
                    }
                }
                Ok(Some(Tensor::from_vec(input_shape, dx)?))
            }
            (Layer::AdaptiveAvgPool1d(out), Cache::AvgPool { input_shape }) => {
                let [n, c, l] = *input_shape;
                let out = *out;
                if gy.shape() != [n, c, out] {
                    return Err(Error::shape("avgpool backward: gradient shape mismatch"));
                }
                let g = gy.data();
                let mut dx = vec![T::zero(); n * c * l];
                for row in 0..n * c {
                    for i in 0..out {
                        let (s, e) = pool_window(i, out, l);
                        let share = g[row * out + i] / T::from_f64((e - s) as f64);
                        for d in &mut dx[row * l + s..row * l + e] {
                            *d += share;
                        }
                    }
                }
                Ok(Some(Tensor::from_vec(input_shape, dx)?))
            }
            (Layer::Flatten, Cache::Flatten { input_shape }) => Ok(Some(gy.clone().reshape(input_shape)?)),
            (Layer::L2Normalize, Cache::L2 { output, norms, dim }) => {
                let eps = T::from_f64(L2_EPS);
                let g = gy.data();
                if g.len() != output.len() {
                    return Err(Error::shape("l2 backward: gradient shape mismatch"));
                }
                let mut dx = Vec::with_capacity(g.len());
                for ((gr, yr), &norm) in g.chunks_exact(*dim).zip(output.chunks_exact(*dim)).zip(norms) {
                    if norm > eps {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        dx.extend(gr.iter().zip(yr).map(|(&a, &b)| (a - b * dot) / norm));
                    } else {
                        dx.extend(gr.iter().map(|&a| a / eps));
                    }
                }
                Ok(Some(Tensor::from_vec(gy.shape(), dx)?))
            }
            _ => Err(mismatch()),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Conv1d(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            Layer::BatchNorm1d(b) => vec![("weight", &b.weight), ("bias", &b.bias)],
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::Conv1d(c) => vec![("weight", &mut c.weight), ("bias", &mut c.bias)],
            Layer::BatchNorm1d(b) => vec![("weight", &mut b.weight), ("bias", &mut b.bias)],
            Layer::Linear(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            _ => Vec::new(),
        }
    }

    /// Parameters followed by buffers, in one borrow.
    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::BatchNorm1d(b) => vec![
                ("weight", &mut b.weight),
                ("bias", &mut b.bias),
                ("running_mean", &mut b.running_mean),
                ("running_var", &mut b.running_var),
            ],
            other => other.params_mut(),
        }
    }

    /// Non-trainable state saved with checkpoints.
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::BatchNorm1d(b) => vec![("running_mean", &b.running_mean), ("running_var", &b.running_var)],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::BatchNorm1d(b) => vec![
                ("running_mean", &mut b.running_mean),
                ("running_var", &mut b.running_var),
            ],
            _ => Vec::new(),
        }
    }
}

/// Recorded forward pass of a [`Sequential`], consumed by its backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    /// The identity map.
    pub fn empty() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, Tape<T>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(&cur, train)?;
            caches.push(cache);
            cur = y;
        }
        Ok((cur, Tape { caches }))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(&cur)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, tape: Tape<T>, grad: Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::shape("tape does not match network depth"));
        }
        let mut g = grad;
        let last = self.layers.len();
        for (i, (layer, cache)) in self.layers.iter_mut().zip(&tape.caches).enumerate().rev() {
            let need = need_dx || i > 0;
            match layer.backward(cache, &g, need)? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
            debug_assert!(i < last);
        }
        Ok(Some(g))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params_mut().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.buffers().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.buffers_mut().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    pub fn named_state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.state_mut().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv1d(c) => Layer::Conv1d(Conv1d {
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                    padding: c.padding,
                }),
                Layer::BatchNorm1d(b) => Layer::BatchNorm1d(BatchNorm1d {
                    weight: b.weight.cast(),
                    bias: b.bias.cast(),
                    running_mean: b.running_mean.cast(),
                    running_var: b.running_var.cast(),
                }),
                Layer::Linear(x) => Layer::Linear(Linear {
                    weight: x.weight.cast(),
                    bias: x.bias.cast(),
                }),
                Layer::Relu => Layer::Relu,
                Layer::Abs => Layer::Abs,
                Layer::MaxPool1d(k) => Layer::MaxPool1d(*k),
                Layer::AvgPool1d(k) => Layer::AvgPool1d(*k),
                Layer::AdaptiveAvgPool1d(o) => Layer::AdaptiveAvgPool1d(*o),
                Layer::Flatten => Layer::Flatten,
                Layer::L2Normalize => Layer::L2Normalize,
            })
            .collect();
        Sequential { layers }
    }
}
