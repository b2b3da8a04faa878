use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ndiff::store::ParameterStore;
use crate::ndiff::tensor::{axpy, dot};
use crate::ndiff::{softmax, softmax_backward, Conv1d, Linear, Scalar, Tensor};
use crate::taco::TtsConfig;

/// Location-sensitive additive attention. Energies are
/// `v . tanh(Q h_prev + K o_m + L conv([alpha_prev; cum_prev])_m)`;
/// the convolution over the previous and cumulative weights is what lets
/// the mechanism track its own position.
pub(crate) struct Attention {
    pub query: Linear,
    pub memory: Linear,
    pub loc_conv: Conv1d,
    pub loc_proj: Linear,
    pub v: Linear,
}

pub(crate) struct AttnStepCache<S> {
    q_in: Vec<S>,
    loc_in: Tensor<S>,
    conv_out: Tensor<S>,
    tanh_out: Tensor<S>,
    pub alpha: Vec<S>,
}

pub(crate) struct AttnStepGrads<S> {
    /// Gradient on the query input (the previous decoder LSTM state).
    pub d_q_in: Vec<S>,
    /// Gradient on the projected memory rows; summed over steps and fed
    /// through the memory layer once per sequence.
    pub d_keys: Tensor<S>,
    /// Direct gradient on the memory rows from the context sum.
    pub d_memory: Tensor<S>,
    pub d_alpha_prev: Vec<S>,
    pub d_cum_prev: Vec<S>,
}

impl Attention {
    pub fn new(cfg: &TtsConfig) -> Self {
        Attention {
            query: Linear::no_bias("attention.query", cfg.dec_units, cfg.attn_dim),
            memory: Linear::new("attention.memory", cfg.context_dim(), cfg.attn_dim),
            loc_conv: Conv1d::new("attention.loc_conv", 2, cfg.loc_filters, cfg.loc_kernel),
            loc_proj: Linear::no_bias("attention.loc_proj", cfg.loc_filters, cfg.attn_dim),
            v: Linear::no_bias("attention.v", cfg.attn_dim, 1),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.query.param_names();
        names.extend(self.memory.param_names());
        names.extend(self.loc_conv.param_names());
        names.extend(self.loc_proj.param_names());
        names.extend(self.v.param_names());
        names
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, rng: &mut ChaCha8Rng) {
        self.query.init(ps, rng);
        self.memory.init(ps, rng);
        self.loc_conv.init(ps, rng);
        self.loc_proj.init(ps, rng);
        self.v.init(ps, rng);
    }

    /// Projects the encoder output once per sequence.
    pub fn keys<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        memory: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        self.memory.forward_seq(ps, memory)
    }

    pub fn step<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        keys: &Tensor<S>,
        memory: &Tensor<S>,
        h_prev: &[S],
        alpha_prev: &[S],
        cum_prev: &[S],
    ) -> Result<(Vec<S>, AttnStepCache<S>)> {
        let m = memory.rows();
        let attn = keys.cols();
        let q = self.query.forward_vec(ps, h_prev)?;
        let mut loc_in = Tensor::zeros(&[m, 2]);
        for r in 0..m {
            loc_in.set2(r, 0, alpha_prev[r]);
            loc_in.set2(r, 1, cum_prev[r]);
        }
        let conv_out = self.loc_conv.forward(ps, &loc_in)?;
        let loc_feat = self.loc_proj.forward_seq(ps, &conv_out)?;
        let mut tanh_out = Tensor::zeros(&[m, attn]);
        for r in 0..m {
            let kr = keys.row(r);
            let lr = loc_feat.row(r);
            let ur = tanh_out.row_mut(r);
            for a in 0..attn {
                ur[a] = (q[a] + kr[a] + lr[a]).tanh();
            }
        }
        let e = self.v.forward_seq(ps, &tanh_out)?;
        let alpha = softmax(e.data());
        let mut ctx = vec![S::zero(); memory.cols()];
        for r in 0..m {
            axpy(&mut ctx, alpha[r], memory.row(r));
        }
        let cache = AttnStepCache {
            q_in: h_prev.to_vec(),
            loc_in,
            conv_out,
            tanh_out,
            alpha,
        };
        Ok((ctx, cache))
    }

    /// One attention step of backprop. `d_alpha_extra` carries the
    /// gradient arriving at this step's weights from later steps (the
    /// cumulative-weight chain and the next location convolution).
    pub fn step_backward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        cache: &AttnStepCache<S>,
        memory: &Tensor<S>,
        d_ctx: &[S],
        d_alpha_extra: &[S],
    ) -> Result<AttnStepGrads<S>> {
        let m = memory.rows();
        let attn = cache.tanh_out.cols();
        let mut d_alpha = vec![S::zero(); m];
        let mut d_memory = Tensor::zeros(&[m, memory.cols()]);
        for r in 0..m {
            d_alpha[r] = dot(d_ctx, memory.row(r)) + d_alpha_extra[r];
            axpy(d_memory.row_mut(r), cache.alpha[r], d_ctx);
        }
        let d_e = softmax_backward(&cache.alpha, &d_alpha);
        let d_e = Tensor::from_vec(&[m, 1], d_e)?;
        let d_u = self.v.backward_seq(ps, grads, &cache.tanh_out, &d_e)?;
        let mut d_tanh_in = Tensor::zeros(&[m, attn]);
        let mut d_q = vec![S::zero(); attn];
        for r in 0..m {
            let ur = cache.tanh_out.row(r);
            let gr = d_u.row(r);
            let tr = d_tanh_in.row_mut(r);
            for a in 0..attn {
                tr[a] = gr[a] * (S::one() - ur[a] * ur[a]);
            }
            axpy(&mut d_q, S::one(), tr);
        }
        let d_q_in = self.query.backward_vec(ps, grads, &cache.q_in, &d_q)?;
        let d_conv_out = self
            .loc_proj
            .backward_seq(ps, grads, &cache.conv_out, &d_tanh_in)?;
        let d_loc_in = self
            .loc_conv
            .backward(ps, grads, &cache.loc_in, &d_conv_out)?;
        let mut d_alpha_prev = vec![S::zero(); m];
        let mut d_cum_prev = vec![S::zero(); m];
        for r in 0..m {
            d_alpha_prev[r] = d_loc_in.at2(r, 0);
            d_cum_prev[r] = d_loc_in.at2(r, 1);
        }
        Ok(AttnStepGrads {
            d_q_in,
            d_keys: d_tanh_in,
            d_memory,
            d_alpha_prev,
            d_cum_prev,
        })
    }
}
