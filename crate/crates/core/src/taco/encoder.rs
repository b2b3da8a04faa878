use rand_chacha::ChaCha8Rng;

use crate::corpus::ALPHABET;
use crate::error::Result;
use crate::ndiff::layers::BnCache;
use crate::ndiff::rnn::BiLstmCache;
use crate::ndiff::{Act, BatchNorm, BiLstm, Conv1d, Embedding, Scalar, Tensor};
use crate::ndiff::store::ParameterStore;
use crate::taco::TtsConfig;

/// Character embedding, a convolution stack and a bidirectional LSTM.
/// Output width is `2 * enc_units`, one row per input character.
pub(crate) struct TextEncoder {
    pub embed: Embedding,
    pub convs: Vec<Conv1d>,
    pub bns: Vec<BatchNorm>,
    pub birnn: BiLstm,
}

pub(crate) struct EncoderCache<S> {
    tokens: Vec<usize>,
    /// Input to each convolution layer.
    conv_in: Vec<Tensor<S>>,
    bn: Vec<BnCache<S>>,
    /// Normalized output, the input of each activation.
    act_in: Vec<Tensor<S>>,
    rnn: BiLstmCache<S>,
}

impl TextEncoder {
    pub fn new(cfg: &TtsConfig) -> Self {
        let mut convs = Vec::with_capacity(cfg.enc_conv_layers);
        let mut bns = Vec::with_capacity(cfg.enc_conv_layers);
        for i in 0..cfg.enc_conv_layers {
            let in_ch = if i == 0 { cfg.char_embed } else { cfg.enc_filters };
            convs.push(Conv1d::new(
                format!("encoder.conv{i}"),
                in_ch,
                cfg.enc_filters,
                cfg.enc_kernel,
            ));
            bns.push(BatchNorm::new(format!("encoder.bn{i}"), cfg.enc_filters));
        }
        TextEncoder {
            embed: Embedding::new("encoder.embed", ALPHABET.len(), cfg.char_embed),
            convs,
            bns,
            birnn: BiLstm::new("encoder.birnn", cfg.enc_filters, cfg.enc_units),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.embed.param_names();
        for (c, b) in self.convs.iter().zip(&self.bns) {
            names.extend(c.param_names());
            names.extend(b.param_names());
        }
        names.extend(self.birnn.param_names());
        names
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, rng: &mut ChaCha8Rng) {
        self.embed.init(ps, rng);
        for (c, b) in self.convs.iter().zip(&self.bns) {
            c.init(ps, rng);
            b.init(ps, rng);
        }
        self.birnn.init(ps, rng);
    }

    /// Runs the encoder over one token sequence. `train` selects batch
    /// statistics (and produces a cache); eval mode uses running
    /// statistics and returns no cache.
    pub fn forward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        tokens: &[usize],
        train: bool,
    ) -> Result<(Tensor<S>, Option<EncoderCache<S>>)> {
        let mut x = self.embed.forward(ps, tokens)?;
        let mut conv_in = Vec::new();
        let mut bn = Vec::new();
        let mut act_in = Vec::new();
        for (c, b) in self.convs.iter().zip(&self.bns) {
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
            if train {
                act_in.push(normed.clone());
            }
            x = Act::Gelu.forward_seq(&normed);
        }
        let (out, rnn) = self.birnn.forward_seq(ps, &x)?;
        let cache = train.then(|| EncoderCache {
            tokens: tokens.to_vec(),
            conv_in,
            bn,
            act_in,
            rnn,
        });
        Ok((out, cache))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        cache: &EncoderCache<S>,
        d_out: &Tensor<S>,
    ) -> Result<()> {
        let mut dx = self.birnn.backward_seq(ps, grads, &cache.rnn, d_out)?;
        for i in (0..self.convs.len()).rev() {
            let d_norm = Act::Gelu.backward_seq(&cache.act_in[i], &dx);
            let d_conv = self.bns[i].backward(ps, grads, &cache.bn[i], &d_norm)?;
            dx = self.convs[i].backward(ps, grads, &cache.conv_in[i], &d_conv)?;
        }
        self.embed.backward(grads, &cache.tokens, &dx)
    }

    /// Folds the cached batch statistics into the running estimates.
    pub fn update_running<S: Scalar>(
        &self,
        ps: &mut ParameterStore<S>,
        cache: &EncoderCache<S>,
    ) -> Result<()> {
        for (b, c) in self.bns.iter().zip(&cache.bn) {
            b.update_running(ps, c)?;
        }
        Ok(())
    }
}
