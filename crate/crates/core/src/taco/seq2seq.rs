use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndiff::layers::sigmoid_f64;
use crate::ndiff::store::ParameterStore;
use crate::ndiff::tensor::axpy;
use crate::ndiff::{LstmState, Scalar, Tensor};
use crate::taco::attention::{Attention, AttnStepCache};
use crate::taco::decoder::{DecStepCache, Decoder, PostnetCache};
use crate::taco::encoder::{EncoderCache, TextEncoder};
use crate::taco::TtsConfig;

/// The full attentive synthesis model: text encoder, location-sensitive
/// attention and the shared mel decoder.
pub(crate) struct TacoModel {
    pub cfg: TtsConfig,
    pub encoder: TextEncoder,
    pub attn: Attention,
    pub dec: Decoder,
}

/// Everything one teacher-forced pass produces, kept for backprop.
pub(crate) struct AttentiveRun<S> {
    pub enc_out: Tensor<S>,
    enc_cache: Option<EncoderCache<S>>,
    attn_steps: Vec<AttnStepCache<S>>,
    dec_steps: Vec<DecStepCache<S>>,
    /// Attention matrix, one row per output frame.
    pub weights: Tensor<S>,
    /// Context sequence, `weights * enc_out` row by row.
    pub contexts: Tensor<S>,
    pub pre: Tensor<S>,
    pub post: Tensor<S>,
    pub stop_logits: Vec<S>,
    post_cache: Option<PostnetCache<S>>,
}

pub(crate) struct FreeRunOutput<S> {
    pub post: Tensor<S>,
    pub stop_probs: Vec<f64>,
    pub weights: Tensor<S>,
    pub truncated: bool,
}

impl TacoModel {
    pub fn new(cfg: &TtsConfig) -> Self {
        TacoModel {
            cfg: cfg.clone(),
            encoder: TextEncoder::new(cfg),
            attn: Attention::new(cfg),
            dec: Decoder::new(&cfg.decoder_dims()),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.encoder.param_names();
        names.extend(self.attn.param_names());
        names.extend(self.dec.param_names());
        names
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, rng: &mut ChaCha8Rng) {
        self.encoder.init(ps, rng);
        self.attn.init(ps, rng);
        self.dec.init(ps, rng);
    }

    /// One teacher-forced pass over an utterance: encode, attend, decode
    /// with the ground-truth previous frame in the prenet slot.
    pub fn run_teacher_forced<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        tokens: &[usize],
        z: &[S],
        y: &Tensor<S>,
        train: bool,
    ) -> Result<AttentiveRun<S>> {
        if tokens.is_empty() {
            return Err(Error::InvalidArg("cannot align empty text".into()));
        }
        let n = y.rows();
        if n == 0 {
            return Err(Error::InvalidArg("cannot align an empty mel target".into()));
        }
        if y.cols() != self.cfg.bands {
            return Err(Error::shape("alignment target bands", self.cfg.bands, y.cols()));
        }
        let (enc_out, enc_cache) = self.encoder.forward(ps, tokens, train)?;
        let keys = self.attn.keys(ps, &enc_out)?;
        let m = tokens.len();
        let c = self.cfg.context_dim();
        let mut st0 = LstmState::zeros(self.cfg.dec_units);
        let mut st1 = LstmState::zeros(self.cfg.dec_units);
        let mut alpha_prev = vec![S::zero(); m];
        alpha_prev[0] = S::one();
        let mut cum = vec![S::zero(); m];
        let zeros = vec![S::zero(); self.cfg.bands];
        let mut attn_steps = Vec::with_capacity(n);
        let mut dec_steps: Vec<DecStepCache<S>> = Vec::with_capacity(n);
        let mut weights = Tensor::zeros(&[n, m]);
        let mut contexts = Tensor::zeros(&[n, c]);
        let mut pre = Tensor::zeros(&[n, self.cfg.bands]);
        let mut stop_logits = Vec::with_capacity(n);
        for t in 0..n {
            let h0_prev = if t == 0 {
                vec![S::zero(); self.cfg.dec_units]
            } else {
                dec_steps[t - 1].h0.clone()
            };
            let (ctx, acache) =
                self.attn
                    .step(ps, &keys, &enc_out, &h0_prev, &alpha_prev, &cum)?;
            let prev: &[S] = if t == 0 { &zeros } else { y.row(t - 1) };
            let dcache = self.dec.step(ps, &ctx, z, Some(prev), &mut st0, &mut st1)?;
            weights.row_mut(t).copy_from_slice(&acache.alpha);
            contexts.row_mut(t).copy_from_slice(&ctx);
            pre.row_mut(t).copy_from_slice(&dcache.frame);
            stop_logits.push(dcache.stop_logit);
            axpy(&mut cum, S::one(), &acache.alpha);
            alpha_prev = acache.alpha.clone();
            attn_steps.push(acache);
            dec_steps.push(dcache);
        }
        let (post, post_cache) = self.dec.postnet_forward(ps, &pre, train)?;
        Ok(AttentiveRun {
            enc_out,
            enc_cache,
            attn_steps,
            dec_steps,
            weights,
            contexts,
            pre,
            post,
            stop_logits,
            post_cache,
        })
    }

    /// Full backprop of a teacher-forced run.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        run: &AttentiveRun<S>,
        d_pre: &Tensor<S>,
        d_post: &Tensor<S>,
        d_stop: &[S],
    ) -> Result<()> {
        let post_cache = run.post_cache.as_ref().ok_or_else(|| {
            Error::InvalidArg("run was not made in training mode".into())
        })?;
        let enc_cache = run.enc_cache.as_ref().ok_or_else(|| {
            Error::InvalidArg("run was not made in training mode".into())
        })?;
        let n = run.dec_steps.len();
        let m = run.enc_out.rows();
        let units = self.cfg.dec_units;
        let mut d_pre_total = d_pre.add(d_post)?;
        let through = self.dec.postnet_backward(ps, grads, post_cache, d_post)?;
        d_pre_total = d_pre_total.add(&through)?;
        let mut dh0 = vec![S::zero(); units];
        let mut dc0 = vec![S::zero(); units];
        let mut dh1 = vec![S::zero(); units];
        let mut dc1 = vec![S::zero(); units];
        let mut d_alpha_loc = vec![S::zero(); m];
        let mut d_cum = vec![S::zero(); m];
        let mut d_keys_sum = Tensor::zeros(&[m, self.cfg.attn_dim]);
        let mut d_memory = Tensor::zeros(&[m, self.cfg.context_dim()]);
        for t in (0..n).rev() {
            let back = self.dec.step_backward(
                ps,
                grads,
                &run.dec_steps[t],
                d_pre_total.row(t),
                Some(d_stop[t]),
                &dh0,
                &dc0,
                &dh1,
                &dc1,
            )?;
            dh0 = back.dh0;
            dc0 = back.dc0;
            dh1 = back.dh1;
            dc1 = back.dc1;
            // The running attention-weight sum makes alpha_t visible to
            // every later step; fold that chain into this step's weights.
            let mut d_alpha_extra = d_cum.clone();
            axpy(&mut d_alpha_extra, S::one(), &d_alpha_loc);
            let ag = self.attn.step_backward(
                ps,
                grads,
                &run.attn_steps[t],
                &run.enc_out,
                &back.d_ctx,
                &d_alpha_extra,
            )?;
            // The query was the previous step's first-LSTM state.
            axpy(&mut dh0, S::one(), &ag.d_q_in);
            d_alpha_loc = ag.d_alpha_prev;
            axpy(&mut d_cum, S::one(), &ag.d_cum_prev);
            d_keys_sum = d_keys_sum.add(&ag.d_keys)?;
            d_memory = d_memory.add(&ag.d_memory)?;
        }
        let via_keys = self
            .attn
            .memory
            .backward_seq(ps, grads, &run.enc_out, &d_keys_sum)?;
        d_memory = d_memory.add(&via_keys)?;
        self.encoder.backward(ps, grads, enc_cache, &d_memory)
    }

    /// Folds all cached batch statistics of a training-mode run into the
    /// running estimates.
    pub fn update_running<S: Scalar>(
        &self,
        ps: &mut ParameterStore<S>,
        run: &AttentiveRun<S>,
    ) -> Result<()> {
        if let Some(c) = &run.enc_cache {
            self.encoder.update_running(ps, c)?;
        }
        if let Some(c) = &run.post_cache {
            self.dec.postnet_update_running(ps, c)?;
        }
        Ok(())
    }

    /// Autoregressive synthesis: the model feeds itself its own previous
    /// frame and halts when the stop head fires (or at `max_frames`).
    pub fn run_free<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        tokens: &[usize],
        z: &[S],
        max_frames: usize,
        stop_threshold: f64,
    ) -> Result<FreeRunOutput<S>> {
        if tokens.is_empty() {
            return Err(Error::InvalidArg("cannot synthesize empty text".into()));
        }
        if max_frames == 0 {
            return Err(Error::InvalidArg("max_frames must be positive".into()));
        }
        let (enc_out, _) = self.encoder.forward(ps, tokens, false)?;
        let keys = self.attn.keys(ps, &enc_out)?;
        let m = tokens.len();
        let mut st0 = LstmState::zeros(self.cfg.dec_units);
        let mut st1 = LstmState::zeros(self.cfg.dec_units);
        let mut alpha_prev = vec![S::zero(); m];
        alpha_prev[0] = S::one();
        let mut cum = vec![S::zero(); m];
        let mut h0_prev = vec![S::zero(); self.cfg.dec_units];
        let mut prev = vec![S::zero(); self.cfg.bands];
        let mut frames: Vec<Vec<S>> = Vec::new();
        let mut alphas: Vec<Vec<S>> = Vec::new();
        let mut stop_probs = Vec::new();
        let mut truncated = true;
        for _ in 0..max_frames {
            let (ctx, acache) =
                self.attn
                    .step(ps, &keys, &enc_out, &h0_prev, &alpha_prev, &cum)?;
            let dcache = self.dec.step(ps, &ctx, z, Some(&prev), &mut st0, &mut st1)?;
            let prob = sigmoid_f64(dcache.stop_logit.to_f64());
            axpy(&mut cum, S::one(), &acache.alpha);
            alpha_prev = acache.alpha.clone();
            alphas.push(acache.alpha);
            h0_prev = dcache.h0.clone();
            prev = dcache.frame.clone();
            frames.push(dcache.frame);
            stop_probs.push(prob);
            if prob > stop_threshold {
                truncated = false;
                break;
            }
        }
        let n = frames.len();
        let mut pre = Tensor::zeros(&[n, self.cfg.bands]);
        let mut weights = Tensor::zeros(&[n, m]);
        for (t, f) in frames.iter().enumerate() {
            pre.row_mut(t).copy_from_slice(f);
            weights.row_mut(t).copy_from_slice(&alphas[t]);
        }
        let (post, _) = self.dec.postnet_forward(ps, &pre, false)?;
        Ok(FreeRunOutput {
            post,
            stop_probs,
            weights,
            truncated,
        })
    }
}
