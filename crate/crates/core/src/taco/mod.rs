//! Attentive text-to-mel synthesis: a character encoder, location-
//! sensitive attention and an autoregressive decoder, all conditioned on
//! a fixed speaker vector. The decoder is built so its parameters can be
//! lifted verbatim into the conversion model.

mod attention;
pub(crate) mod decoder;
pub(crate) mod encoder;
pub(crate) mod seq2seq;

pub use decoder::DecoderDims;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{text_to_indices, Manifest, Split};
use crate::error::{Error, Result};
use crate::ndiff::layers::{bce_with_logit, bce_with_logit_grad, uniform};
use crate::ndiff::store::{load_feature, save_feature, FeatureRole, ParameterStore};
use crate::ndiff::{Scalar, Sgd, SgdConfig, Tensor};
use crate::sigproc::MelSpectrogram;
use crate::spkenc::{SpeakerEmbedding, SpeakerTable};
use crate::taco::decoder::{Decoder, Feedback};
use crate::taco::encoder::TextEncoder;
use crate::taco::seq2seq::TacoModel;

/// Model widths and training knobs. The defaults describe the desk-scale
/// model used throughout.
#[derive(Debug, Clone)]
pub struct TtsConfig {
    pub char_embed: usize,
    pub enc_conv_layers: usize,
    pub enc_filters: usize,
    pub enc_kernel: usize,
    /// Per direction; the context width is twice this.
    pub enc_units: usize,
    pub attn_dim: usize,
    pub loc_filters: usize,
    pub loc_kernel: usize,
    pub prenet_units: usize,
    pub dec_units: usize,
    pub bands: usize,
    pub postnet_layers: usize,
    pub postnet_filters: usize,
    pub postnet_kernel: usize,
    pub spk_dim: usize,
    /// Free-running synthesis halts when the stop probability passes this.
    pub stop_threshold: f64,
    /// When set, the mel loss reads only the post-postnet output instead
    /// of the pre + post sum.
    pub single_mel_loss: bool,
    pub lr: f64,
}

impl Default for TtsConfig {
    fn default() -> Self {
        TtsConfig {
            char_embed: 64,
            enc_conv_layers: 3,
            enc_filters: 64,
            enc_kernel: 5,
            enc_units: 32,
            attn_dim: 32,
            loc_filters: 8,
            loc_kernel: 15,
            prenet_units: 32,
            dec_units: 128,
            bands: 80,
            postnet_layers: 5,
            postnet_filters: 64,
            postnet_kernel: 5,
            spk_dim: 16,
            stop_threshold: 0.5,
            single_mel_loss: false,
            lr: 0.05,
        }
    }
}

impl TtsConfig {
    /// Width of the encoder output and therefore of every context vector.
    pub fn context_dim(&self) -> usize {
        2 * self.enc_units
    }

    pub fn decoder_dims(&self) -> DecoderDims {
        DecoderDims {
            ctx_dim: self.context_dim(),
            spk_dim: self.spk_dim,
            prenet_units: self.prenet_units,
            dec_units: self.dec_units,
            bands: self.bands,
            postnet_filters: self.postnet_filters,
            postnet_layers: self.postnet_layers,
            postnet_kernel: self.postnet_kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("char_embed", self.char_embed),
            ("enc_conv_layers", self.enc_conv_layers),
            ("enc_filters", self.enc_filters),
            ("enc_units", self.enc_units),
            ("attn_dim", self.attn_dim),
            ("loc_filters", self.loc_filters),
            ("prenet_units", self.prenet_units),
            ("dec_units", self.dec_units),
            ("bands", self.bands),
            ("postnet_filters", self.postnet_filters),
            ("spk_dim", self.spk_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, k) in [
            ("enc_kernel", self.enc_kernel),
            ("loc_kernel", self.loc_kernel),
            ("postnet_kernel", self.postnet_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if self.postnet_layers < 2 {
            return Err(Error::Config(
                "postnet needs at least two layers".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Mean squared error per frame, summed over bands:
/// `(1/N) * sum_n ||y_n - yhat_n||^2`.
pub fn loss_mel(y: &MelSpectrogram, yhat: &MelSpectrogram) -> Result<f64> {
    seq_mse(&y.frames, &yhat.frames)
}

pub(crate) fn seq_mse<S: Scalar>(y: &Tensor<S>, yhat: &Tensor<S>) -> Result<f64> {
    if y.shape() != yhat.shape() {
        return Err(Error::shape("mel loss", y.shape(), yhat.shape()));
    }
    let n = y.rows();
    if n == 0 {
        return Err(Error::InvalidArg("mel loss over zero frames".into()));
    }
    let mut acc = 0.0;
    for (&a, &b) in y.data().iter().zip(yhat.data()) {
        let d = a.to_f64() - b.to_f64();
        acc += d * d;
    }
    Ok(acc / n as f64)
}

/// Gradient of `scale * seq_mse` with respect to the prediction.
pub(crate) fn seq_mse_grad<S: Scalar>(y: &Tensor<S>, yhat: &Tensor<S>, scale: f64) -> Tensor<S> {
    let n = y.rows() as f64;
    let k = S::from_f64(2.0 * scale / n);
    let mut out = Tensor::zeros(y.shape());
    for ((o, &a), &b) in out.data_mut().iter_mut().zip(yhat.data()).zip(y.data()) {
        *o = k * (a - b);
    }
    out
}

/// Mean binary cross-entropy of the stop head: target 1 on the final
/// frame, 0 before it.
pub(crate) fn stop_loss<S: Scalar>(logits: &[S]) -> (f64, Vec<S>) {
    let n = logits.len();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (t, &logit) in logits.iter().enumerate() {
        let target = if t + 1 == n { 1.0 } else { 0.0 };
        loss += bce_with_logit(logit.to_f64(), target);
        grad.push(S::from_f64(bce_with_logit_grad(logit.to_f64(), target) / n as f64));
    }
    (loss / n as f64, grad)
}

/// Names of every trainable tensor in the model (excludes batch-norm
/// running statistics).
pub fn tts_param_names(cfg: &TtsConfig) -> Vec<String> {
    TacoModel::new(cfg).param_names()
}

/// Checks the analytic gradient of the complete training loss (both mel
/// terms plus the stop-head term) against central finite differences in
/// `f64`, on a seeded two-frame toy problem.
pub fn gradcheck_tts(cfg: &TtsConfig, seed: u64) -> Result<crate::ndiff::GradCheckReport> {
    cfg.validate()?;
    let model = TacoModel::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParameterStore::<f64>::new();
    model.init(&mut ps, &mut rng);
    // The fresh init is a special point: zeroed biases and the zeroed
    // first feedback frame leave the prenet rectifiers exactly on their
    // kink, where the loss is not differentiable. Jitter every tensor
    // into general position before differencing.
    for name in model.param_names() {
        for v in ps.get_mut(&name)?.data_mut() {
            *v += uniform::<f64>(&mut rng, -0.05, 0.05);
        }
    }
    let tokens = text_to_indices("ab")?;
    let mut y = Tensor::<f64>::zeros(&[2, cfg.bands]);
    for v in y.data_mut() {
        *v = uniform(&mut rng, -1.5, 1.5);
    }
    let z: Vec<f64> = (0..cfg.spk_dim).map(|_| uniform(&mut rng, -0.8, 0.8)).collect();
    let loss_of = |p: &ParameterStore<f64>| -> Result<f64> {
        let run = model.run_teacher_forced(p, &tokens, &z, &y, true)?;
        let mel = if cfg.single_mel_loss {
            seq_mse(&y, &run.post)?
        } else {
            seq_mse(&y, &run.pre)? + seq_mse(&y, &run.post)?
        };
        let (stop, _) = stop_loss(&run.stop_logits);
        Ok(mel + stop)
    };
    let grads_of = |p: &ParameterStore<f64>| -> Result<ParameterStore<f64>> {
        let run = model.run_teacher_forced(p, &tokens, &z, &y, true)?;
        let d_pre = if cfg.single_mel_loss {
            Tensor::zeros(y.shape())
        } else {
            seq_mse_grad(&y, &run.pre, 1.0)
        };
        let d_post = seq_mse_grad(&y, &run.post, 1.0);
        let (_, d_stop) = stop_loss(&run.stop_logits);
        let mut grads = p.zeros_like();
        model.backward(p, &mut grads, &run, &d_pre, &d_post, &d_stop)?;
        Ok(grads)
    };
    crate::ndiff::gradient_check(
        &ps,
        &model.param_names(),
        loss_of,
        grads_of,
        &crate::ndiff::GradCheckConfig::default(),
    )
}

/// Builds an initialized (untrained) parameter store for the model.
pub fn init_tts(cfg: &TtsConfig, seed: u64) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    let model = TacoModel::new(cfg);
    let mut ps = ParameterStore::new();
    model.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ps)
}

/// Encodes text into one context-width vector per character.
pub fn encode_text(
    text: &str,
    ps: &ParameterStore<f32>,
    cfg: &TtsConfig,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    if text.is_empty() {
        return Err(Error::InvalidArg("cannot encode empty text".into()));
    }
    let tokens = text_to_indices(text)?;
    let enc = TextEncoder::new(cfg);
    let (out, _) = enc.forward(ps, &tokens, false)?;
    Ok(out)
}

/// Which model produced a context sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextSource {
    Tts,
    Vc,
}

/// A frame-aligned sequence of context vectors: one row per mel frame,
/// one column per context dimension.
#[derive(Debug, Clone)]
pub struct ContextSequence {
    pub vectors: Tensor<f32>,
    pub source: ContextSource,
}

impl ContextSequence {
    pub fn frames(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// A teacher-forced pass: the attention matrix (one row per frame), the
/// context sequence it induces, and the predicted mel.
pub struct Alignment {
    pub weights: Tensor<f32>,
    pub contexts: ContextSequence,
    pub predicted: MelSpectrogram,
}

pub fn teacher_forced_align(
    text: &str,
    y: &MelSpectrogram,
    z: &SpeakerEmbedding,
    ps: &ParameterStore<f32>,
    cfg: &TtsConfig,
) -> Result<Alignment> {
    cfg.validate()?;
    check_speaker_dim(cfg, &z.vector)?;
    let tokens = text_to_indices(text)?;
    let model = TacoModel::new(cfg);
    let run = model.run_teacher_forced(ps, &tokens, &z.vector, &y.frames, false)?;
    Ok(Alignment {
        weights: run.weights,
        contexts: ContextSequence {
            vectors: run.contexts,
            source: ContextSource::Tts,
        },
        predicted: MelSpectrogram {
            frames: run.post,
            frame_shift: y.frame_shift,
            frame_length: y.frame_length,
        },
    })
}

/// How the decoder's prenet slot is fed when decoding from a fixed
/// context sequence.
pub enum DecodeMode<'a> {
    /// Previous ground-truth frame (must match the context length).
    TeacherForced(&'a MelSpectrogram),
    /// Slot zeroed; each frame is a pure function of context and speaker.
    Framewise,
    /// The model's own previous frame.
    FreeRunning,
}

/// Decodes one mel frame per context row. Output length always equals
/// the context length.
pub fn decode(
    h: &ContextSequence,
    z: &SpeakerEmbedding,
    ps: &ParameterStore<f32>,
    cfg: &TtsConfig,
    mode: DecodeMode,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    check_speaker_dim(cfg, &z.vector)?;
    let dec = Decoder::new(&cfg.decoder_dims());
    let fb = match mode {
        DecodeMode::TeacherForced(y) => Feedback::Teacher(&y.frames),
        DecodeMode::Framewise => Feedback::Framewise,
        DecodeMode::FreeRunning => Feedback::FreeRun,
    };
    let run = dec.run_with_context(ps, &h.vectors, &z.vector, fb, false)?;
    Ok(run.post)
}

fn check_speaker_dim(cfg: &TtsConfig, z: &[f32]) -> Result<()> {
    if z.len() != cfg.spk_dim {
        return Err(Error::shape("speaker vector", cfg.spk_dim, z.len()));
    }
    Ok(())
}

/// Mean attention mass on the ground-truth character of each frame.
pub(crate) fn diagonality<S: Scalar>(weights: &Tensor<S>, gt_alignment: &[usize]) -> f64 {
    let n = weights.rows().min(gt_alignment.len());
    if n == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for t in 0..n {
        acc += weights.at2(t, gt_alignment[t]).to_f64();
    }
    acc / n as f64
}

#[derive(Debug, Clone, Copy)]
pub struct TtsEval {
    /// Mean `loss_mel` of the post-postnet output against the target.
    pub loss_mel: f64,
    /// Mean attention mass on the true character.
    pub diagonality: f64,
}

#[derive(Debug, Clone)]
pub struct TtsTrainReport {
    /// One `epoch<TAB>loss<TAB>diagonality` line per epoch; the loss is
    /// the trained mel objective averaged over the epoch.
    pub log: Vec<String>,
    pub held_out: TtsEval,
}

/// Teacher-forced training over the train split. Deterministic for a
/// fixed seed; `epochs = 0` returns the freshly initialized store.
pub fn train_tts(
    manifest: &Manifest,
    cfg: &TtsConfig,
    speakers: &SpeakerTable,
    epochs: usize,
    seed: u64,
) -> Result<(ParameterStore<f32>, TtsTrainReport)> {
    cfg.validate()?;
    if !speakers.is_empty() && speakers.dim() != cfg.spk_dim {
        return Err(Error::Config(format!(
            "speaker table width {} does not match spk_dim {}",
            speakers.dim(),
            cfg.spk_dim
        )));
    }
    let (gen, spk_params, corpus_seed) = manifest.load_params()?;
    let records: Vec<_> = manifest.records_in(Split::Train).collect();
    if records.is_empty() {
        return Err(Error::InvalidArg("manifest has no training rows".into()));
    }
    let mut utts = Vec::with_capacity(records.len());
    let mut tokens = Vec::with_capacity(records.len());
    let mut zs = Vec::with_capacity(records.len());
    for r in &records {
        utts.push(manifest.regenerate(r, &gen, &spk_params, corpus_seed)?);
        tokens.push(text_to_indices(&r.text)?);
        zs.push(speakers.get(&r.speaker_id)?.to_vec());
    }
    let model = TacoModel::new(cfg);
    let mut ps = ParameterStore::new();
    model.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut opt = Sgd::new(SgdConfig {
        lr: cfg.lr,
        momentum: 0.9,
        clip_norm: 1.0,
    });
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut shuffle_rng);
        let mut epoch_mel = 0.0;
        let mut epoch_diag = 0.0;
        for &i in &order {
            let y = &utts[i].mel.frames;
            let run = model.run_teacher_forced(&ps, &tokens[i], &zs[i], y, true)?;
            let mel_pre = seq_mse(y, &run.pre)?;
            let mel_post = seq_mse(y, &run.post)?;
            let mel = if cfg.single_mel_loss {
                mel_post
            } else {
                mel_pre + mel_post
            };
            let (stop, d_stop) = stop_loss(&run.stop_logits);
            let total = mel + stop;
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, utterance {}",
                    records[i].id
                )));
            }
            let d_pre = if cfg.single_mel_loss {
                Tensor::zeros(y.shape())
            } else {
                seq_mse_grad(y, &run.pre, 1.0)
            };
            let d_post = seq_mse_grad(y, &run.post, 1.0);
            let mut grads = ps.zeros_like();
            model.backward(&ps, &mut grads, &run, &d_pre, &d_post, &d_stop)?;
            model.update_running(&mut ps, &run)?;
            opt.step(&mut ps, &grads)?;
            epoch_mel += mel;
            epoch_diag += diagonality(&run.weights, &utts[i].gt_alignment);
        }
        let k = records.len() as f64;
        log.push(format!(
            "{epoch}\t{:.6}\t{:.6}",
            epoch_mel / k,
            epoch_diag / k
        ));
    }
    let held_out = evaluate_tts(manifest, Split::HeldOut, cfg, speakers, &ps)?;
    Ok((ps, TtsTrainReport { log, held_out }))
}

/// Teacher-forced evaluation over one split: literal mel loss on the
/// final output plus attention diagonality.
pub fn evaluate_tts(
    manifest: &Manifest,
    split: Split,
    cfg: &TtsConfig,
    speakers: &SpeakerTable,
    ps: &ParameterStore<f32>,
) -> Result<TtsEval> {
    cfg.validate()?;
    let (gen, spk_params, corpus_seed) = manifest.load_params()?;
    let model = TacoModel::new(cfg);
    let mut loss = 0.0;
    let mut diag = 0.0;
    let mut count = 0usize;
    for r in manifest.records_in(split) {
        let u = manifest.regenerate(r, &gen, &spk_params, corpus_seed)?;
        let toks = text_to_indices(&r.text)?;
        let z = speakers.get(&r.speaker_id)?;
        let run = model.run_teacher_forced(ps, &toks, z, &u.mel.frames, false)?;
        loss += seq_mse(&u.mel.frames, &run.post)?;
        diag += diagonality(&run.weights, &u.gt_alignment);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArg(format!(
            "manifest has no rows in split {:?}",
            split.as_str()
        )));
    }
    Ok(TtsEval {
        loss_mel: loss / count as f64,
        diagonality: diag / count as f64,
    })
}

pub struct Synthesis {
    pub mel: MelSpectrogram,
    pub stop_probs: Vec<f64>,
    /// Attention matrix of the free run, one row per emitted frame.
    pub attention: Tensor<f32>,
    /// Set when decoding hit `max_frames` without the stop head firing.
    pub truncated: bool,
}

/// Free-running synthesis. Frame timing metadata is taken from the
/// caller since the model itself is timing-agnostic.
pub fn synthesize(
    text: &str,
    z: &SpeakerEmbedding,
    ps: &ParameterStore<f32>,
    cfg: &TtsConfig,
    max_frames: usize,
    frame_shift: f64,
    frame_length: f64,
) -> Result<Synthesis> {
    cfg.validate()?;
    check_speaker_dim(cfg, &z.vector)?;
    let tokens = text_to_indices(text)?;
    let model = TacoModel::new(cfg);
    let out = model.run_free(ps, &tokens, &z.vector, max_frames, cfg.stop_threshold)?;
    Ok(Synthesis {
        mel: MelSpectrogram {
            frames: out.post,
            frame_shift,
            frame_length,
        },
        stop_probs: out.stop_probs,
        attention: out.weights,
        truncated: out.truncated,
    })
}

#[derive(Debug, Clone)]
pub struct ContextEntry {
    pub id: String,
    pub path: PathBuf,
    pub frames: usize,
    /// Frames whose attention row entropy exceeded the threshold.
    pub flagged_frames: usize,
    /// Set when more than half of the frames were flagged.
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct ContextReport {
    pub entries: Vec<ContextEntry>,
    pub entropy_threshold: f64,
}

impl ContextReport {
    pub fn flagged_ids(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.flagged)
            .map(|e| e.id.as_str())
            .collect()
    }
}

pub fn context_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.ctx.ttlv"))
}

/// Teacher-forced context extraction over the train and held-out splits.
/// Writes one context file per utterance (length exactly the mel frame
/// count) and flags, without dropping, utterances whose attention looks
/// diffuse. Reruns are bit-identical.
pub fn extract_context(
    manifest: &Manifest,
    ps: &ParameterStore<f32>,
    cfg: &TtsConfig,
    speakers: &SpeakerTable,
    out_dir: &Path,
    entropy_threshold: f64,
) -> Result<ContextReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let model = TacoModel::new(cfg);
    let mut entries = Vec::new();
    let records = manifest
        .records_in(Split::Train)
        .chain(manifest.records_in(Split::HeldOut));
    for r in records {
        let frames = load_feature(&manifest.mel_file(r), FeatureRole::Mel)?;
        let toks = text_to_indices(&r.text)?;
        let z = speakers.get(&r.speaker_id)?;
        let run = model.run_teacher_forced(ps, &toks, z, &frames, false)?;
        let path = context_file(out_dir, &r.id);
        save_feature(&path, FeatureRole::Ctx, &run.contexts)?;
        let n = run.weights.rows();
        let mut flagged_frames = 0usize;
        for t in 0..n {
            let mut h = 0.0;
            for &a in run.weights.row(t) {
                let a = a as f64;
                if a > 0.0 {
                    h -= a * a.ln();
                }
            }
            if h > entropy_threshold {
                flagged_frames += 1;
            }
        }
        entries.push(ContextEntry {
            id: r.id.clone(),
            path,
            frames: n,
            flagged_frames,
            flagged: 2 * flagged_frames > n,
        });
    }
    Ok(ContextReport {
        entries,
        entropy_threshold,
    })
}
