use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndiff::store::ParameterStore;
use crate::ndiff::tensor::{axpy, dot, Scalar, Tensor};

pub(crate) fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> S {
    S::from_f64(rng.gen_range(lo..hi))
}

/// Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub(crate) fn init_weight<S: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<S> {
    let a = 1.0 / (fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| uniform::<S>(rng, -a, a)).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Affine map `y = Wx + b` with `W: [output, input]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            input,
            output,
            bias: true,
        }
    }

    pub fn no_bias(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            input,
            output,
            bias: false,
        }
    }

    fn w_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    fn b_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = vec![self.w_name()];
        if self.bias {
            v.push(self.b_name());
        }
        v
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, rng: &mut ChaCha8Rng) {
        ps.insert(
            self.w_name(),
            init_weight(rng, &[self.output, self.input], self.input),
        );
        if self.bias {
            ps.insert(self.b_name(), Tensor::zeros(&[self.output]));
        }
    }

    pub fn forward_vec<S: Scalar>(&self, ps: &ParameterStore<S>, x: &[S]) -> Result<Vec<S>> {
        if x.len() != self.input {
            return Err(Error::shape(&self.prefix, self.input, x.len()));
        }
        let w = ps.get(&self.w_name())?;
        let mut y = vec![S::zero(); self.output];
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = dot(w.row(o), x);
        }
        if self.bias {
            let b = ps.get(&self.b_name())?;
            for (yo, &bo) in y.iter_mut().zip(b.data()) {
                *yo = *yo + bo;
            }
        }
        Ok(y)
    }

    /// Backprop for one vector application. Accumulates into `grads`,
    /// returns `dx`.
    pub fn backward_vec<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        x: &[S],
        dy: &[S],
    ) -> Result<Vec<S>> {
        let w = ps.get(&self.w_name())?;
        let dw = grads.get_mut(&self.w_name())?;
        for (o, &g) in dy.iter().enumerate() {
            axpy(dw.row_mut(o), g, x);
        }
        if self.bias {
            let db = grads.get_mut(&self.b_name())?;
            axpy(db.data_mut(), S::one(), dy);
        }
        let mut dx = vec![S::zero(); self.input];
        for (o, &g) in dy.iter().enumerate() {
            axpy(&mut dx, g, w.row(o));
        }
        Ok(dx)
    }

    /// Applies the map to every row of `x`.
    pub fn forward_seq<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        x: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let n = x.rows();
        let mut out = Tensor::zeros(&[n, self.output]);
        for r in 0..n {
            let y = self.forward_vec(ps, x.row(r))?;
            out.row_mut(r).copy_from_slice(&y);
        }
        Ok(out)
    }

    pub fn backward_seq<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        x: &Tensor<S>,
        dy: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let n = x.rows();
        let mut dx = Tensor::zeros(&[n, self.input]);
        for r in 0..n {
            let d = self.backward_vec(ps, grads, x.row(r), dy.row(r))?;
            dx.row_mut(r).copy_from_slice(&d);
        }
        Ok(dx)
    }
}

/// 1-d convolution along the time axis with stride 1 and zero padding
/// that preserves length. Weight layout `[out_ch, in_ch, kernel]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(prefix: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "conv kernel must be odd");
        Conv1d {
            prefix: prefix.into(),
            in_ch,
            out_ch,
            kernel,
        }
    }

    fn w_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    fn b_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.w_name(), self.b_name()]
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, rng: &mut ChaCha8Rng) {
        let fan_in = self.in_ch * self.kernel;
        ps.insert(
            self.w_name(),
            init_weight(rng, &[self.out_ch, self.in_ch, self.kernel], fan_in),
        );
        ps.insert(self.b_name(), Tensor::zeros(&[self.out_ch]));
    }

    pub fn forward<S: Scalar>(&self, ps: &ParameterStore<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.cols() != self.in_ch {
            return Err(Error::shape(&self.prefix, self.in_ch, x.cols()));
        }
        let n = x.rows();
        let w = ps.get(&self.w_name())?;
        let b = ps.get(&self.b_name())?;
        let pad = self.kernel / 2;
        let mut y = Tensor::zeros(&[n, self.out_ch]);
        let wd = w.data();
        for t in 0..n {
            let yr = y.row_mut(t);
            for co in 0..self.out_ch {
                let mut acc = b.data()[co];
                let wbase = co * self.in_ch * self.kernel;
                for k in 0..self.kernel {
                    let src = t as isize + k as isize - pad as isize;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    let xr = x.row(src as usize);
                    for ci in 0..self.in_ch {
                        acc = acc + wd[wbase + ci * self.kernel + k] * xr[ci];
                    }
                }
                yr[co] = acc;
            }
        }
        Ok(y)
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        x: &Tensor<S>,
        dy: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let n = x.rows();
        let w = ps.get(&self.w_name())?.clone();
        let pad = self.kernel / 2;
        let mut dx = Tensor::zeros(&[n, self.in_ch]);
        {
            let dw = grads.get_mut(&self.w_name())?;
            let dwd = dw.data_mut();
            for t in 0..n {
                let dyr = dy.row(t);
                for co in 0..self.out_ch {
                    let g = dyr[co];
                    if g == S::zero() {
                        continue;
                    }
                    let wbase = co * self.in_ch * self.kernel;
                    for k in 0..self.kernel {
                        let src = t as isize + k as isize - pad as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        let xr = x.row(src as usize);
                        for ci in 0..self.in_ch {
                            dwd[wbase + ci * self.kernel + k] =
                                dwd[wbase + ci * self.kernel + k] + g * xr[ci];
                        }
                    }
                }
            }
        }
        {
            let db = grads.get_mut(&self.b_name())?;
            for t in 0..n {
                axpy(db.data_mut(), S::one(), dy.row(t));
            }
        }
        let wd = w.data();
        for t in 0..n {
            let dyr = dy.row(t);
            for co in 0..self.out_ch {
                let g = dyr[co];
                if g == S::zero() {
                    continue;
                }
                let wbase = co * self.in_ch * self.kernel;
                for k in 0..self.kernel {
                    let src = t as isize + k as isize - pad as isize;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    let dxr = dx.row_mut(src as usize);
                    for ci in 0..self.in_ch {
                        dxr[ci] = dxr[ci] + g * wd[wbase + ci * self.kernel + k];
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// Per-channel normalization over the time axis of one sequence, with
/// learned scale and shift. Running statistics are kept in the store but
/// never receive gradients.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub prefix: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

pub struct BnCache<S> {
    mean: Vec<S>,
    inv_std: Vec<S>,
    xhat: Tensor<S>,
}

impl BatchNorm {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            prefix: prefix.into(),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.name("gamma"), self.name("beta")]
    }

    /// Every store entry this layer owns: the trainable pair plus the
    /// running statistics.
    pub fn state_names(&self) -> Vec<String> {
        vec![
            self.name("gamma"),
            self.name("beta"),
            self.name("running_mean"),
            self.name("running_var"),
        ]
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, _rng: &mut ChaCha8Rng) {
        let mut gamma = Tensor::zeros(&[self.channels]);
        gamma.fill(S::one());
        let mut rvar = Tensor::zeros(&[self.channels]);
        rvar.fill(S::one());
        ps.insert(self.name("gamma"), gamma);
        ps.insert(self.name("beta"), Tensor::zeros(&[self.channels]));
        ps.insert(self.name("running_mean"), Tensor::zeros(&[self.channels]));
        ps.insert(self.name("running_var"), rvar);
    }

    pub fn forward_train<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        x: &Tensor<S>,
    ) -> Result<(Tensor<S>, BnCache<S>)> {
        if x.cols() != self.channels {
            return Err(Error::shape(&self.prefix, self.channels, x.cols()));
        }
        let n = x.rows();
        let inv_n = S::from_f64(1.0 / n as f64);
        let mut mean = vec![S::zero(); self.channels];
        for t in 0..n {
            axpy(&mut mean, inv_n, x.row(t));
        }
        let mut var = vec![S::zero(); self.channels];
        for t in 0..n {
            let r = x.row(t);
            for c in 0..self.channels {
                let d = r[c] - mean[c];
                var[c] = var[c] + d * d * inv_n;
            }
        }
        let eps = S::from_f64(self.eps);
        let inv_std: Vec<S> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let gamma = ps.get(&self.name("gamma"))?;
        let beta = ps.get(&self.name("beta"))?;
        let mut xhat = Tensor::zeros(&[n, self.channels]);
        let mut y = Tensor::zeros(&[n, self.channels]);
        for t in 0..n {
            let xr = x.row(t);
            for c in 0..self.channels {
                let h = (xr[c] - mean[c]) * inv_std[c];
                xhat.set2(t, c, h);
                y.set2(t, c, gamma.data()[c] * h + beta.data()[c]);
            }
        }
        Ok((
            y,
            BnCache {
                mean,
                inv_std,
                xhat,
            },
        ))
    }

    pub fn forward_eval<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        x: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        if x.cols() != self.channels {
            return Err(Error::shape(&self.prefix, self.channels, x.cols()));
        }
        let mean = ps.get(&self.name("running_mean"))?.clone();
        let var = ps.get(&self.name("running_var"))?.clone();
        let gamma = ps.get(&self.name("gamma"))?;
        let beta = ps.get(&self.name("beta"))?;
        let eps = S::from_f64(self.eps);
        let n = x.rows();
        let mut y = Tensor::zeros(&[n, self.channels]);
        for t in 0..n {
            let xr = x.row(t);
            for c in 0..self.channels {
                let h = (xr[c] - mean.data()[c]) / (var.data()[c] + eps).sqrt();
                y.set2(t, c, gamma.data()[c] * h + beta.data()[c]);
            }
        }
        Ok(y)
    }

    /// Folds the cached batch statistics into the running estimates.
    pub fn update_running<S: Scalar>(
        &self,
        ps: &mut ParameterStore<S>,
        cache: &BnCache<S>,
    ) -> Result<()> {
        let m = S::from_f64(self.momentum);
        let keep = S::one() - m;
        let eps = S::from_f64(self.eps);
        {
            let rm = ps.get_mut(&self.name("running_mean"))?;
            for (r, &b) in rm.data_mut().iter_mut().zip(&cache.mean) {
                *r = keep * *r + m * b;
            }
        }
        {
            let rv = ps.get_mut(&self.name("running_var"))?;
            for (r, &istd) in rv.data_mut().iter_mut().zip(&cache.inv_std) {
                let v = istd.recip() * istd.recip() - eps;
                *r = keep * *r + m * v;
            }
        }
        Ok(())
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        cache: &BnCache<S>,
        dy: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let n = dy.rows();
        let inv_n = S::from_f64(1.0 / n as f64);
        let gamma = ps.get(&self.name("gamma"))?.clone();
        {
            let dgamma = grads.get_mut(&self.name("gamma"))?;
            for t in 0..n {
                let dyr = dy.row(t);
                let xr = cache.xhat.row(t);
                for c in 0..self.channels {
                    dgamma.data_mut()[c] = dgamma.data_mut()[c] + dyr[c] * xr[c];
                }
            }
        }
        {
            let dbeta = grads.get_mut(&self.name("beta"))?;
            for t in 0..n {
                axpy(dbeta.data_mut(), S::one(), dy.row(t));
            }
        }
        // dxhat = dy * gamma; then the usual normalized-input backward:
        // dx = inv_std/N * (N*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
        let mut sum_dxhat = vec![S::zero(); self.channels];
        let mut sum_dxhat_xhat = vec![S::zero(); self.channels];
        for t in 0..n {
            let dyr = dy.row(t);
            let xr = cache.xhat.row(t);
            for c in 0..self.channels {
                let dxh = dyr[c] * gamma.data()[c];
                sum_dxhat[c] = sum_dxhat[c] + dxh;
                sum_dxhat_xhat[c] = sum_dxhat_xhat[c] + dxh * xr[c];
            }
        }
        let mut dx = Tensor::zeros(&[n, self.channels]);
        let nn = S::from_f64(n as f64);
        for t in 0..n {
            let dyr = dy.row(t);
            let xr = cache.xhat.row(t);
            let dxr = dx.row_mut(t);
            for c in 0..self.channels {
                let dxh = dyr[c] * gamma.data()[c];
                dxr[c] = cache.inv_std[c]
                    * inv_n
                    * (nn * dxh - sum_dxhat[c] - xr[c] * sum_dxhat_xhat[c]);
            }
        }
        Ok(dx)
    }
}

/// Token-to-vector lookup table with weight `[vocab, dim]`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub prefix: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(prefix: impl Into<String>, vocab: usize, dim: usize) -> Self {
        Embedding {
            prefix: prefix.into(),
            vocab,
            dim,
        }
    }

    fn w_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.w_name()]
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, rng: &mut ChaCha8Rng) {
        let len = self.vocab * self.dim;
        let data = (0..len).map(|_| uniform::<S>(rng, -0.1, 0.1)).collect();
        ps.insert(
            self.w_name(),
            Tensor::from_vec(&[self.vocab, self.dim], data).expect("embedding shape"),
        );
    }

    pub fn forward<S: Scalar>(&self, ps: &ParameterStore<S>, tokens: &[usize]) -> Result<Tensor<S>> {
        let w = ps.get(&self.w_name())?;
        let mut out = Tensor::zeros(&[tokens.len(), self.dim]);
        for (r, &tok) in tokens.iter().enumerate() {
            if tok >= self.vocab {
                return Err(Error::InvalidArg(format!(
                    "token id {tok} out of range for vocab {}",
                    self.vocab
                )));
            }
            out.row_mut(r).copy_from_slice(w.row(tok));
        }
        Ok(out)
    }

    pub fn backward<S: Scalar>(
        &self,
        grads: &mut ParameterStore<S>,
        tokens: &[usize],
        dy: &Tensor<S>,
    ) -> Result<()> {
        let dw = grads.get_mut(&self.w_name())?;
        for (r, &tok) in tokens.iter().enumerate() {
            axpy(dw.row_mut(tok), S::one(), dy.row(r));
        }
        Ok(())
    }
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Gelu,
    Tanh,
    Sigmoid,
    Relu,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Act {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        let v = x.to_f64();
        let y = match self {
            Act::Gelu => 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
            Act::Tanh => v.tanh(),
            Act::Sigmoid => sigmoid_f64(v),
            Act::Relu => v.max(0.0),
        };
        S::from_f64(y)
    }

    /// Derivative as a function of the cached input.
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        let v = x.to_f64();
        let d = match self {
            Act::Gelu => {
                let u = GELU_C * (v + GELU_A * v * v * v);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
            }
            Act::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Act::Sigmoid => {
                let s = sigmoid_f64(v);
                s * (1.0 - s)
            }
            Act::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        };
        S::from_f64(d)
    }

    pub fn forward_seq<S: Scalar>(self, x: &Tensor<S>) -> Tensor<S> {
        x.map(|v| self.apply(v))
    }

    pub fn backward_seq<S: Scalar>(self, x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
        let mut dx = dy.clone();
        for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
            *d = *d * self.derivative(xv);
        }
        dx
    }
}

pub fn sigmoid_f64(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Inverted dropout. The mask holds `0` or `1/(1-p)` so that eval mode is
/// the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0, 1)");
        Dropout { p }
    }

    pub fn make_mask<S: Scalar>(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<S> {
        if self.p == 0.0 {
            return vec![S::one(); len];
        }
        let keep = S::from_f64(1.0 / (1.0 - self.p));
        (0..len)
            .map(|_| {
                if rng.gen_range(0.0..1.0) < self.p {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect()
    }

    pub fn apply<S: Scalar>(x: &[S], mask: &[S]) -> Vec<S> {
        x.iter().zip(mask).map(|(&v, &m)| v * m).collect()
    }
}

/// Numerically stable softmax of one vector.
pub fn softmax<S: Scalar>(x: &[S]) -> Vec<S> {
    let max = x
        .iter()
        .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v.to_f64()));
    let exps: Vec<f64> = x.iter().map(|&v| (v.to_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| S::from_f64(e / sum)).collect()
}

/// Jacobian-vector product of softmax: `dx = (dy - <dy, y>) * y`.
pub fn softmax_backward<S: Scalar>(y: &[S], dy: &[S]) -> Vec<S> {
    let inner = dot(dy, y);
    y.iter()
        .zip(dy)
        .map(|(&yi, &di)| (di - inner) * yi)
        .collect()
}

/// Stable binary cross entropy on a logit.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (1.0 + (-logit.abs()).exp()).ln()
}

/// d(bce)/d(logit) = sigmoid(logit) - target.
pub fn bce_with_logit_grad(logit: f64, target: f64) -> f64 {
    sigmoid_f64(logit) - target
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_matches_manual() {
        let lin = Linear::new("l", 2, 2);
        let mut ps = ParameterStore::<f64>::new();
        ps.insert(
            "l.weight",
            Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        ps.insert("l.bias", Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap());
        let y = lin.forward_vec(&ps, &[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![1.0 - 2.0 + 0.5, 3.0 - 4.0 - 0.5]);
    }

    #[test]
    fn conv_identity_kernel() {
        let conv = Conv1d::new("c", 1, 1, 3);
        let mut ps = ParameterStore::<f64>::new();
        ps.insert(
            "c.weight",
            Tensor::from_vec(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap(),
        );
        ps.insert("c.bias", Tensor::zeros(&[1]));
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv.forward(&ps, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_shift_kernel_pads_with_zero() {
        let conv = Conv1d::new("c", 1, 1, 3);
        let mut ps = ParameterStore::<f64>::new();
        // kernel position 0 looks one step back
        ps.insert(
            "c.weight",
            Tensor::from_vec(&[1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap(),
        );
        ps.insert("c.bias", Tensor::zeros(&[1]));
        let x = Tensor::from_vec(&[3, 1], vec![5.0, 6.0, 7.0]).unwrap();
        let y = conv.forward(&ps, &x).unwrap();
        assert_eq!(y.data(), &[0.0, 5.0, 6.0]);
    }

    #[test]
    fn batchnorm_normalizes_per_channel() {
        let bn = BatchNorm::new("bn", 2);
        let mut ps = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        bn.init(&mut ps, &mut rng);
        let x = Tensor::from_vec(&[4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0])
            .unwrap();
        let (y, _) = bn.forward_train(&ps, &x).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..4).map(|t| y.at2(t, c)).sum::<f64>() / 4.0;
            let var: f64 = (0..4).map(|t| (y.at2(t, c) - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let y = softmax(&[1.0f64, 2.0, 3.0, -50.0]);
        let s: f64 = y.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(y[2] > y[1] && y[1] > y[0] && y[0] > y[3]);
    }

    #[test]
    fn gelu_reference_values() {
        // tanh-approximation values
        let g0: f64 = Act::Gelu.apply(0.0f64);
        let g1: f64 = Act::Gelu.apply(1.0f64);
        assert!(g0.abs() < 1e-12);
        assert!((g1 - 0.841192).abs() < 1e-5);
    }

    #[test]
    fn dropout_mask_scales() {
        let d = Dropout::new(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mask = d.make_mask::<f64>(&mut rng, 1000);
        for &m in &mask {
            assert!(m == 0.0 || m == 2.0);
        }
        let kept = mask.iter().filter(|&&m| m > 0.0).count();
        assert!(kept > 400 && kept < 600);
    }

    #[test]
    fn bce_matches_naive() {
        for &(z, t) in &[(0.3f64, 1.0f64), (-2.0, 0.0), (5.0, 0.0), (-7.0, 1.0)] {
            let s = sigmoid_f64(z);
            let naive = -(t * s.ln() + (1.0 - t) * (1.0 - s).ln());
            assert!((bce_with_logit(z, t) - naive).abs() < 1e-9);
        }
    }
}
