use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndiff::layers::BnCache;
use crate::ndiff::store::ParameterStore;
use crate::ndiff::tensor::axpy;
use crate::ndiff::{Act, BatchNorm, Conv1d, Linear, Lstm, LstmState, LstmStepCache, Scalar, Tensor};

/// Width bundle for the context-conditioned decoder. Kept separate from
/// the full model config so the conversion model can build a decoder
/// with byte-compatible parameter shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderDims {
    pub ctx_dim: usize,
    pub spk_dim: usize,
    pub prenet_units: usize,
    pub dec_units: usize,
    pub bands: usize,
    pub postnet_filters: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
}

/// Recurrent mel decoder. Every step consumes
/// `concat(context, speaker, prenet_slot)`; autoregressive modes fill the
/// prenet slot from the previous frame, framewise mode feeds zeros there
/// so the parameter shapes stay identical across modes.
pub(crate) struct Decoder {
    pub dims: DecoderDims,
    pub prenet0: Linear,
    pub prenet1: Linear,
    pub lstm0: Lstm,
    pub lstm1: Lstm,
    pub proj: Linear,
    pub stop: Linear,
    pub postnet: Postnet,
}

/// Residual refinement stack: conv + batch-norm per layer, tanh between
/// layers, output added back onto the input.
pub(crate) struct Postnet {
    convs: Vec<Conv1d>,
    bns: Vec<BatchNorm>,
}

impl Postnet {
    /// `prefix` owns the parameter names: conv `i` is `{prefix}{i}`, its
    /// batch norm `{prefix}_bn{i}`.
    pub fn new(prefix: &str, bands: usize, filters: usize, layers: usize, kernel: usize) -> Self {
        let mut convs = Vec::with_capacity(layers);
        let mut bns = Vec::with_capacity(layers);
        for i in 0..layers {
            let in_ch = if i == 0 { bands } else { filters };
            let out_ch = if i + 1 == layers { bands } else { filters };
            convs.push(Conv1d::new(format!("{prefix}{i}"), in_ch, out_ch, kernel));
            bns.push(BatchNorm::new(format!("{prefix}_bn{i}"), out_ch));
        }
        Postnet { convs, bns }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (c, b) in self.convs.iter().zip(&self.bns) {
            names.extend(c.param_names());
            names.extend(b.param_names());
        }
        names
    }

    /// Parameters plus batch-norm running statistics.
    pub fn store_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (c, b) in self.convs.iter().zip(&self.bns) {
            names.extend(c.param_names());
            names.extend(b.state_names());
        }
        names
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, rng: &mut ChaCha8Rng) {
        for (c, b) in self.convs.iter().zip(&self.bns) {
            c.init(ps, rng);
            b.init(ps, rng);
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        pre: &Tensor<S>,
        train: bool,
    ) -> Result<(Tensor<S>, Option<PostnetCache<S>>)> {
        let last = self.convs.len() - 1;
        let mut x = pre.clone();
        let mut conv_in = Vec::new();
        let mut bn = Vec::new();
        let mut act_in = Vec::new();
        for (i, (c, b)) in self.convs.iter().zip(&self.bns).enumerate() {
            if train {
                conv_in.push(x.clone());
            }
            let y = c.forward(ps, &x)?;
            let normed = if train {
                let (normed, cache) = b.forward_train(ps, &y)?;
                bn.push(cache);
                normed
            } else {
                b.forward_eval(ps, &y)?
            };
            if i < last {
                if train {
                    act_in.push(normed.clone());
                }
                x = Act::Tanh.forward_seq(&normed);
            } else {
                x = normed;
            }
        }
        let post = pre.add(&x)?;
        let cache = train.then_some(PostnetCache {
            conv_in,
            bn,
            act_in,
        });
        Ok((post, cache))
    }

    /// Backprop of the residual branch only; the identity path of
    /// `post = pre + residual(pre)` is the caller's to add.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        cache: &PostnetCache<S>,
        d_residual: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let last = self.convs.len() - 1;
        let mut dx = d_residual.clone();
        for i in (0..self.convs.len()).rev() {
            let d_norm = if i < last {
                Act::Tanh.backward_seq(&cache.act_in[i], &dx)
            } else {
                dx
            };
            let d_conv = self.bns[i].backward(ps, grads, &cache.bn[i], &d_norm)?;
            dx = self.convs[i].backward(ps, grads, &cache.conv_in[i], &d_conv)?;
        }
        Ok(dx)
    }

    pub fn update_running<S: Scalar>(
        &self,
        ps: &mut ParameterStore<S>,
        cache: &PostnetCache<S>,
    ) -> Result<()> {
        for (b, c) in self.bns.iter().zip(&cache.bn) {
            b.update_running(ps, c)?;
        }
        Ok(())
    }
}

pub(crate) struct DecStepCache<S> {
    prenet_in: Vec<S>,
    pre0: Vec<S>,
    a0: Vec<S>,
    pre1: Vec<S>,
    l0: LstmStepCache<S>,
    l1: LstmStepCache<S>,
    /// First LSTM's state after this step; the next attention query.
    pub h0: Vec<S>,
    h1: Vec<S>,
    pub frame: Vec<S>,
    pub stop_logit: S,
    prenet_active: bool,
}

pub(crate) struct PostnetCache<S> {
    conv_in: Vec<Tensor<S>>,
    bn: Vec<BnCache<S>>,
    act_in: Vec<Tensor<S>>,
}

/// What fills the prenet slot at each step.
pub(crate) enum Feedback<'a, S> {
    /// Ground-truth previous frame.
    Teacher(&'a Tensor<S>),
    /// Nothing; the slot is zeroed and the step is a pure function of
    /// context and speaker.
    Framewise,
    /// The model's own previous (pre-postnet) frame.
    FreeRun,
}

pub(crate) struct DecRun<S> {
    pub steps: Vec<DecStepCache<S>>,
    pub pre: Tensor<S>,
    pub post: Tensor<S>,
    pub post_cache: Option<PostnetCache<S>>,
}

pub(crate) struct StepBack<S> {
    pub d_ctx: Vec<S>,
    pub dh0: Vec<S>,
    pub dc0: Vec<S>,
    pub dh1: Vec<S>,
    pub dc1: Vec<S>,
}

impl Decoder {
    pub fn new(dims: &DecoderDims) -> Self {
        let lstm_in = dims.ctx_dim + dims.spk_dim + dims.prenet_units;
        Decoder {
            dims: dims.clone(),
            prenet0: Linear::new("decoder.prenet0", dims.bands, dims.prenet_units),
            prenet1: Linear::new("decoder.prenet1", dims.prenet_units, dims.prenet_units),
            lstm0: Lstm::new("decoder.lstm0", lstm_in, dims.dec_units),
            lstm1: Lstm::new("decoder.lstm1", dims.dec_units, dims.dec_units),
            proj: Linear::new("decoder.proj", dims.dec_units, dims.bands),
            stop: Linear::new("decoder.stop", dims.dec_units, 1),
            postnet: Postnet::new(
                "decoder.postnet",
                dims.bands,
                dims.postnet_filters,
                dims.postnet_layers,
                dims.postnet_kernel,
            ),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.prenet0.param_names();
        names.extend(self.prenet1.param_names());
        names.extend(self.lstm0.param_names());
        names.extend(self.lstm1.param_names());
        names.extend(self.proj.param_names());
        names.extend(self.stop.param_names());
        names.extend(self.postnet.param_names());
        names
    }

    /// Every store entry the decoder owns, batch-norm running statistics
    /// included. This is the full set a parameter transfer must carry.
    pub fn store_names(&self) -> Vec<String> {
        let mut names = self.prenet0.param_names();
        names.extend(self.prenet1.param_names());
        names.extend(self.lstm0.param_names());
        names.extend(self.lstm1.param_names());
        names.extend(self.proj.param_names());
        names.extend(self.stop.param_names());
        names.extend(self.postnet.store_names());
        names
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, rng: &mut ChaCha8Rng) {
        self.prenet0.init(ps, rng);
        self.prenet1.init(ps, rng);
        self.lstm0.init(ps, rng);
        self.lstm1.init(ps, rng);
        self.proj.init(ps, rng);
        self.stop.init(ps, rng);
        self.postnet.init(ps, rng);
    }

    pub fn step<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        ctx: &[S],
        z: &[S],
        prev_frame: Option<&[S]>,
        st0: &mut LstmState<S>,
        st1: &mut LstmState<S>,
    ) -> Result<DecStepCache<S>> {
        let d = &self.dims;
        if ctx.len() != d.ctx_dim {
            return Err(Error::shape("decoder context", d.ctx_dim, ctx.len()));
        }
        if z.len() != d.spk_dim {
            return Err(Error::shape("decoder speaker input", d.spk_dim, z.len()));
        }
        let (prenet_in, pre0, a0, pre1, p, prenet_active) = match prev_frame {
            Some(prev) => {
                let pre0 = self.prenet0.forward_vec(ps, prev)?;
                let a0: Vec<S> = pre0.iter().map(|&v| Act::Relu.apply(v)).collect();
                let pre1 = self.prenet1.forward_vec(ps, &a0)?;
                let p: Vec<S> = pre1.iter().map(|&v| Act::Relu.apply(v)).collect();
                (prev.to_vec(), pre0, a0, pre1, p, true)
            }
            None => (
                Vec::new(),
                Vec::new(),
                Vec::new(),
                Vec::new(),
                vec![S::zero(); d.prenet_units],
                false,
            ),
        };
        let mut x = Vec::with_capacity(d.ctx_dim + d.spk_dim + d.prenet_units);
        x.extend_from_slice(ctx);
        x.extend_from_slice(z);
        x.extend_from_slice(&p);
        let l0 = self.lstm0.step(ps, &x, st0)?;
        let h0 = st0.h.clone();
        let l1 = self.lstm1.step(ps, &h0, st1)?;
        let h1 = st1.h.clone();
        let frame = self.proj.forward_vec(ps, &h1)?;
        let stop_logit = self.stop.forward_vec(ps, &h1)?[0];
        Ok(DecStepCache {
            prenet_in,
            pre0,
            a0,
            pre1,
            l0,
            l1,
            h0,
            h1,
            frame,
            stop_logit,
            prenet_active,
        })
    }

    /// Backprop for one decoder step. `d_frame`/`d_stop` are the output
    /// gradients, `dh0_in`..`dc1_in` the carries arriving from the
    /// following step (with any attention-query gradient already folded
    /// into `dh0_in`). The prenet gradient w.r.t. the previous frame is
    /// dropped: it is either ground truth or handled by the caller's own
    /// unrolling, and no mode here trains through it.
    #[allow(clippy::too_many_arguments)]
    pub fn step_backward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        cache: &DecStepCache<S>,
        d_frame: &[S],
        d_stop: Option<S>,
        dh0_in: &[S],
        dc0_in: &[S],
        dh1_in: &[S],
        dc1_in: &[S],
    ) -> Result<StepBack<S>> {
        let d = &self.dims;
        let mut dh1 = self.proj.backward_vec(ps, grads, &cache.h1, d_frame)?;
        if let Some(ds) = d_stop {
            let extra = self.stop.backward_vec(ps, grads, &cache.h1, &[ds])?;
            axpy(&mut dh1, S::one(), &extra);
        }
        axpy(&mut dh1, S::one(), dh1_in);
        let (dx1, dh1_prev, dc1_prev) =
            self.lstm1.step_backward(ps, grads, &cache.l1, &dh1, dc1_in)?;
        let mut dh0 = dx1;
        axpy(&mut dh0, S::one(), dh0_in);
        let (dx, dh0_prev, dc0_prev) =
            self.lstm0.step_backward(ps, grads, &cache.l0, &dh0, dc0_in)?;
        let d_ctx = dx[..d.ctx_dim].to_vec();
        if cache.prenet_active {
            let dp = &dx[d.ctx_dim + d.spk_dim..];
            let dpre1: Vec<S> = dp
                .iter()
                .zip(&cache.pre1)
                .map(|(&g, &v)| g * Act::Relu.derivative(v))
                .collect();
            let da0 = self.prenet1.backward_vec(ps, grads, &cache.a0, &dpre1)?;
            let dpre0: Vec<S> = da0
                .iter()
                .zip(&cache.pre0)
                .map(|(&g, &v)| g * Act::Relu.derivative(v))
                .collect();
            self.prenet0
                .backward_vec(ps, grads, &cache.prenet_in, &dpre0)?;
        }
        Ok(StepBack {
            d_ctx,
            dh0: dh0_prev,
            dc0: dc0_prev,
            dh1: dh1_prev,
            dc1: dc1_prev,
        })
    }

    pub fn postnet_forward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        pre: &Tensor<S>,
        train: bool,
    ) -> Result<(Tensor<S>, Option<PostnetCache<S>>)> {
        self.postnet.forward(ps, pre, train)
    }

    /// Backprop of the residual branch only; the identity path of
    /// `post = pre + residual(pre)` is the caller's to add.
    pub fn postnet_backward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        cache: &PostnetCache<S>,
        d_residual: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        self.postnet.backward(ps, grads, cache, d_residual)
    }

    pub fn postnet_update_running<S: Scalar>(
        &self,
        ps: &mut ParameterStore<S>,
        cache: &PostnetCache<S>,
    ) -> Result<()> {
        self.postnet.update_running(ps, cache)
    }

    /// Runs the decoder over a fixed context sequence, one step per row.
    pub fn run_with_context<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        h: &Tensor<S>,
        z: &[S],
        fb: Feedback<S>,
        train: bool,
    ) -> Result<DecRun<S>> {
        let n = h.rows();
        if n == 0 {
            return Err(Error::InvalidArg(
                "cannot decode an empty context sequence".into(),
            ));
        }
        if h.cols() != self.dims.ctx_dim {
            return Err(Error::shape("decoder context", self.dims.ctx_dim, h.cols()));
        }
        if let Feedback::Teacher(y) = &fb {
            if y.rows() != n {
                return Err(Error::shape("teacher frames", n, y.rows()));
            }
            if y.cols() != self.dims.bands {
                return Err(Error::shape("teacher bands", self.dims.bands, y.cols()));
            }
        }
        let mut st0 = LstmState::zeros(self.dims.dec_units);
        let mut st1 = LstmState::zeros(self.dims.dec_units);
        let mut steps = Vec::with_capacity(n);
        let mut pre = Tensor::zeros(&[n, self.dims.bands]);
        let zeros = vec![S::zero(); self.dims.bands];
        for t in 0..n {
            let prev: Option<&[S]> = match &fb {
                Feedback::Teacher(y) => Some(if t == 0 { &zeros } else { y.row(t - 1) }),
                Feedback::Framewise => None,
                Feedback::FreeRun => Some(if t == 0 { &zeros } else { pre.row(t - 1) }),
            };
            let cache = self.step(ps, h.row(t), z, prev, &mut st0, &mut st1)?;
            pre.row_mut(t).copy_from_slice(&cache.frame);
            steps.push(cache);
        }
        let (post, post_cache) = self.postnet_forward(ps, &pre, train)?;
        Ok(DecRun {
            steps,
            pre,
            post,
            post_cache,
        })
    }

    /// Full backprop of a context-driven run. Returns the gradient on the
    /// context rows. `d_pre`/`d_post` are the loss gradients on the two
    /// outputs; pass zeros for whichever a loss does not use.
    pub fn backward_with_context<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        run: &DecRun<S>,
        d_pre: &Tensor<S>,
        d_post: &Tensor<S>,
        d_stop: Option<&[S]>,
    ) -> Result<Tensor<S>> {
        let cache = run.post_cache.as_ref().ok_or_else(|| {
            Error::InvalidArg("decoder run was not made in training mode".into())
        })?;
        let n = run.steps.len();
        let mut d_pre_total = d_pre.add(d_post)?;
        let through = self.postnet_backward(ps, grads, cache, d_post)?;
        d_pre_total = d_pre_total.add(&through)?;
        let units = self.dims.dec_units;
        let mut dh0 = vec![S::zero(); units];
        let mut dc0 = vec![S::zero(); units];
        let mut dh1 = vec![S::zero(); units];
        let mut dc1 = vec![S::zero(); units];
        let mut d_h = Tensor::zeros(&[n, self.dims.ctx_dim]);
        for t in (0..n).rev() {
            let back = self.step_backward(
                ps,
                grads,
                &run.steps[t],
                d_pre_total.row(t),
                d_stop.map(|d| d[t]),
                &dh0,
                &dc0,
                &dh1,
                &dc1,
            )?;
            d_h.row_mut(t).copy_from_slice(&back.d_ctx);
            dh0 = back.dh0;
            dc0 = back.dc0;
            dh1 = back.dh1;
            dc1 = back.dc1;
        }
        Ok(d_h)
    }
}
