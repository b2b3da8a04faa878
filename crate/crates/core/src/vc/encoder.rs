use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndiff::layers::BnCache;
use crate::ndiff::rnn::BiLstmCache;
use crate::ndiff::store::ParameterStore;
use crate::ndiff::{Act, BatchNorm, BiLstm, Conv1d, Linear, Scalar, Tensor};

/// The speech-side encoder: a per-frame linear projection followed by the
/// same conv + batch-norm + GELU trunk and bidirectional LSTM as the text
/// encoder. One context-width row out per mel frame in.
pub(crate) struct SpeechEncoder {
    pub proj: Linear,
    pub convs: Vec<Conv1d>,
    pub bns: Vec<BatchNorm>,
    pub birnn: BiLstm,
}

pub(crate) struct SpeechEncCache<S> {
    frames: Tensor<S>,
    conv_in: Vec<Tensor<S>>,
    bn: Vec<BnCache<S>>,
    act_in: Vec<Tensor<S>>,
    rnn: BiLstmCache<S>,
}

impl SpeechEncoder {
    pub fn new(
        bands: usize,
        proj_dim: usize,
        conv_layers: usize,
        filters: usize,
        kernel: usize,
        units: usize,
    ) -> Self {
        let mut convs = Vec::with_capacity(conv_layers);
        let mut bns = Vec::with_capacity(conv_layers);
        for i in 0..conv_layers {
            let in_ch = if i == 0 { proj_dim } else { filters };
            convs.push(Conv1d::new(format!("encoder.conv{i}"), in_ch, filters, kernel));
            bns.push(BatchNorm::new(format!("encoder.bn{i}"), filters));
        }
        SpeechEncoder {
            proj: Linear::new("encoder.in_proj", bands, proj_dim),
            convs,
            bns,
            birnn: BiLstm::new("encoder.birnn", filters, units),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.proj.param_names();
        for (c, b) in self.convs.iter().zip(&self.bns) {
            names.extend(c.param_names());
            names.extend(b.param_names());
        }
        names.extend(self.birnn.param_names());
        names
    }

    /// Parameters plus batch-norm running statistics.
    pub fn store_names(&self) -> Vec<String> {
        let mut names = self.proj.param_names();
        for (c, b) in self.convs.iter().zip(&self.bns) {
            names.extend(c.param_names());
            names.extend(b.state_names());
        }
        names.extend(self.birnn.param_names());
        names
    }

    pub fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, rng: &mut ChaCha8Rng) {
        self.proj.init(ps, rng);
        for (c, b) in self.convs.iter().zip(&self.bns) {
            c.init(ps, rng);
            b.init(ps, rng);
        }
        self.birnn.init(ps, rng);
    }

    /// Runs the encoder over one utterance. `train` selects batch
    /// statistics (and produces a cache); eval mode uses running
    /// statistics and returns no cache.
    pub fn forward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        frames: &Tensor<S>,
        train: bool,
    ) -> Result<(Tensor<S>, Option<SpeechEncCache<S>>)> {
        if frames.rows() == 0 {
            return Err(Error::InvalidArg(
                "cannot encode an empty mel sequence".into(),
            ));
        }
        let mut x = self.proj.forward_seq(ps, frames)?;
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
        let cache = train.then(|| SpeechEncCache {
            frames: frames.clone(),
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
        cache: &SpeechEncCache<S>,
        d_out: &Tensor<S>,
    ) -> Result<()> {
        let mut dx = self.birnn.backward_seq(ps, grads, &cache.rnn, d_out)?;
        for i in (0..self.convs.len()).rev() {
            let d_norm = Act::Gelu.backward_seq(&cache.act_in[i], &dx);
            let d_conv = self.bns[i].backward(ps, grads, &cache.bn[i], &d_norm)?;
            dx = self.convs[i].backward(ps, grads, &cache.conv_in[i], &d_conv)?;
        }
        self.proj.backward_seq(ps, grads, &cache.frames, &dx)?;
        Ok(())
    }

    /// Folds the cached batch statistics into the running estimates.
    pub fn update_running<S: Scalar>(
        &self,
        ps: &mut ParameterStore<S>,
        cache: &SpeechEncCache<S>,
    ) -> Result<()> {
        for (b, c) in self.bns.iter().zip(&cache.bn) {
            b.update_running(ps, c)?;
        }
        Ok(())
    }
}
