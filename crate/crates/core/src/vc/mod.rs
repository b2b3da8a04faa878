//! Voice conversion by transfer from the text-to-mel model. A speech
//! encoder learns to reproduce the teacher's context vectors from audio
//! alone, the teacher's decoder is carried over verbatim as the starting
//! point, and the pair is adapted under a joint context + mel objective.
//! Conversion is then zero-shot: encode the source utterance, decode with
//! the target speaker vector. A bottleneck autoencoder baseline lives in
//! the same module for comparison runs.

mod autovc;
mod encoder;

pub use autovc::{
    autovc_latent, autovc_param_names, convert_autovc, evaluate_autovc, gradcheck_autovc,
    init_autovc, latent_length, train_autovc, AutoVcConfig, AutoVcTrainReport,
};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Manifest, Split};
use crate::error::{Error, Result};
use crate::ndiff::layers::uniform;
use crate::ndiff::store::{load_feature, FeatureRole, ParameterStore};
use crate::ndiff::{GradCheckConfig, GradCheckReport, Scalar, Sgd, SgdConfig, Tensor};
use crate::sigproc::MelSpectrogram;
use crate::spkenc::{SpeakerEmbedding, SpeakerTable};
use crate::taco::decoder::{Decoder, Feedback};
use crate::taco::{context_file, seq_mse, seq_mse_grad, ContextSequence, ContextSource};
use crate::taco::{DecoderDims, TtsConfig};
use crate::vc::encoder::SpeechEncoder;

/// Conversion-model widths and training knobs. The encoder trunk mirrors
/// the synthesis encoder with the character embedding replaced by a
/// per-frame projection; the decoder block is byte-compatible with the
/// synthesis decoder so its parameters can be transplanted.
#[derive(Debug, Clone)]
pub struct VcConfig {
    pub bands: usize,
    /// Width the frame projection maps into; the conv stack's input.
    pub proj_dim: usize,
    pub enc_conv_layers: usize,
    pub enc_filters: usize,
    pub enc_kernel: usize,
    /// Per direction; the encoder output width is twice this and must
    /// equal the decoder's context width.
    pub enc_units: usize,
    pub dec: DecoderDims,
    /// Keep every decoder tensor (running statistics included) untouched
    /// during training; only the encoder adapts.
    pub freeze_decoder: bool,
    pub w_cont: f64,
    pub w_mel: f64,
    /// When set, the mel term reads only the post-postnet output instead
    /// of the pre + post sum.
    pub single_mel_loss: bool,
    pub lr: f64,
}

impl VcConfig {
    /// The conversion model matching a synthesis model: same encoder
    /// trunk sizes, identical decoder block, unit loss weights.
    pub fn from_tts(tts: &TtsConfig) -> VcConfig {
        VcConfig {
            bands: tts.bands,
            proj_dim: tts.char_embed,
            enc_conv_layers: tts.enc_conv_layers,
            enc_filters: tts.enc_filters,
            enc_kernel: tts.enc_kernel,
            enc_units: tts.enc_units,
            dec: tts.decoder_dims(),
            freeze_decoder: false,
            w_cont: 1.0,
            w_mel: 1.0,
            single_mel_loss: tts.single_mel_loss,
            lr: tts.lr,
        }
    }

    /// Width of the encoder output rows.
    pub fn context_dim(&self) -> usize {
        2 * self.enc_units
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bands", self.bands),
            ("proj_dim", self.proj_dim),
            ("enc_conv_layers", self.enc_conv_layers),
            ("enc_filters", self.enc_filters),
            ("enc_units", self.enc_units),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.enc_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "enc_kernel must be odd, got {}",
                self.enc_kernel
            )));
        }
        if self.context_dim() != self.dec.ctx_dim {
            return Err(Error::Config(format!(
                "encoder output width {} must equal the decoder context width {}",
                self.context_dim(),
                self.dec.ctx_dim
            )));
        }
        if self.bands != self.dec.bands {
            return Err(Error::Config(format!(
                "input bands {} must equal decoder bands {}",
                self.bands, self.dec.bands
            )));
        }
        for (name, w) in [("w_cont", self.w_cont), ("w_mel", self.w_mel)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("bad loss weight {name} = {w}")));
            }
        }
        if self.w_cont == 0.0 && self.w_mel == 0.0 {
            return Err(Error::Config("both loss weights are zero".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

impl Default for VcConfig {
    fn default() -> Self {
        VcConfig::from_tts(&TtsConfig::default())
    }
}

struct VcModel {
    enc: SpeechEncoder,
    dec: Decoder,
}

impl VcModel {
    fn new(cfg: &VcConfig) -> Self {
        VcModel {
            enc: SpeechEncoder::new(
                cfg.bands,
                cfg.proj_dim,
                cfg.enc_conv_layers,
                cfg.enc_filters,
                cfg.enc_kernel,
                cfg.enc_units,
            ),
            dec: Decoder::new(&cfg.dec),
        }
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = self.enc.param_names();
        names.extend(self.dec.param_names());
        names
    }

    fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, rng: &mut ChaCha8Rng) {
        self.enc.init(ps, rng);
        self.dec.init(ps, rng);
    }
}

fn check_input(cfg: &VcConfig, frames: &Tensor<f32>) -> Result<()> {
    if frames.rows() == 0 {
        return Err(Error::InvalidArg(
            "cannot convert an empty mel sequence".into(),
        ));
    }
    if frames.cols() != cfg.bands {
        return Err(Error::shape("speech encoder input", cfg.bands, frames.cols()));
    }
    Ok(())
}

fn check_speaker(cfg: &VcConfig, z: &[f32]) -> Result<()> {
    if z.len() != cfg.dec.spk_dim {
        return Err(Error::shape("speaker vector", cfg.dec.spk_dim, z.len()));
    }
    Ok(())
}

/// Encodes an utterance into one context-width vector per frame, with no
/// attention involved: output length always equals input length.
pub fn encode_speech(
    y: &MelSpectrogram,
    ps: &ParameterStore<f32>,
    cfg: &VcConfig,
) -> Result<ContextSequence> {
    cfg.validate()?;
    check_input(cfg, &y.frames)?;
    let model = VcModel::new(cfg);
    let (vectors, _) = model.enc.forward(ps, &y.frames, false)?;
    Ok(ContextSequence {
        vectors,
        source: ContextSource::Vc,
    })
}

/// Mean squared distance between two frame-aligned context sequences:
/// `(1/N) * sum_n ||a_n - b_n||^2`.
pub fn loss_cont(h_s: &ContextSequence, h_t: &ContextSequence) -> Result<f64> {
    if h_s.vectors.shape() != h_t.vectors.shape() {
        return Err(Error::shape(
            "context pair",
            h_t.vectors.shape(),
            h_s.vectors.shape(),
        ));
    }
    seq_mse(&h_t.vectors, &h_s.vectors)
}

/// The joint objective, decomposed. Both parts carry their weights, so
/// `total = cont + mel` holds exactly by construction.
#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: f64,
    pub cont: f64,
    pub mel: f64,
}

/// Weighted sum of the context loss and the mel reconstruction loss.
pub fn loss_joint(
    h_s: &ContextSequence,
    h_t: &ContextSequence,
    y: &MelSpectrogram,
    y_hat: &MelSpectrogram,
    cfg: &VcConfig,
) -> Result<JointLoss> {
    let cont = cfg.w_cont * loss_cont(h_s, h_t)?;
    let mel = cfg.w_mel * crate::taco::loss_mel(y, y_hat)?;
    Ok(JointLoss {
        total: cont + mel,
        cont,
        mel,
    })
}

/// What a parameter transfer produced: decoder entries copied verbatim
/// from the teacher, encoder entries freshly seeded. Both lists are
/// sorted.
#[derive(Debug, Clone)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
}

/// Builds the conversion store from a trained synthesis store: every
/// decoder-scoped entry (batch-norm running statistics included) is
/// copied bit-for-bit under its own name; the speech encoder is seeded
/// fresh.
pub fn init_vc_from_tts(
    tts: &ParameterStore<f32>,
    cfg: &VcConfig,
    seed: u64,
) -> Result<(ParameterStore<f32>, TransferReport)> {
    cfg.validate()?;
    let model = VcModel::new(cfg);
    let mut ps = ParameterStore::new();
    // Salted so a pipeline reusing one seed everywhere still cannot
    // reproduce the teacher's encoder stream here.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7663_656e_63);
    model.enc.init(&mut ps, &mut rng);
    let mut fresh = model.enc.store_names();
    fresh.sort();
    let mut copied = model.dec.store_names();
    copied.sort();
    for name in &copied {
        let t = tts.get(name)?;
        ps.insert(name.clone(), t.clone());
    }
    Ok((ps, TransferReport { copied, fresh }))
}

/// Fresh random initialization of the whole conversion model (the
/// no-transfer ablation).
pub fn init_vc(cfg: &VcConfig, seed: u64) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    let model = VcModel::new(cfg);
    let mut ps = ParameterStore::new();
    model.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ps)
}

/// Names of every trainable tensor in the conversion model.
pub fn vc_param_names(cfg: &VcConfig) -> Vec<String> {
    VcModel::new(cfg).param_names()
}

/// Literal (unweighted) joint-loss parts over one split, eval mode.
#[derive(Debug, Clone, Copy)]
pub struct VcEval {
    pub loss_cont: f64,
    pub loss_mel: f64,
}

#[derive(Debug, Clone)]
pub struct VcTrainReport {
    /// One `epoch<TAB>cont<TAB>mel` line per epoch: the weighted parts of
    /// the trained objective averaged over the epoch.
    pub log: Vec<String>,
    /// Held-out parts under the initial store.
    pub held_out_initial: VcEval,
    /// Held-out parts after the final epoch.
    pub held_out: VcEval,
}

struct LoadedUtt {
    id: String,
    mel: Tensor<f32>,
    h_t: Tensor<f32>,
    z: Vec<f32>,
}

/// Loads mel frames, teacher contexts and speaker vectors for one split.
/// Utterances without a context file are collected and reported in one
/// error.
fn load_split(
    manifest: &Manifest,
    context_dir: &Path,
    split: Split,
    cfg: &VcConfig,
    speakers: &SpeakerTable,
) -> Result<Vec<LoadedUtt>> {
    let mut missing = Vec::new();
    let mut utts: Vec<LoadedUtt> = Vec::new();
    for r in manifest.records_in(split) {
        let ctx_path = context_file(context_dir, &r.id);
        if !ctx_path.exists() {
            missing.push(r.id.clone());
            continue;
        }
        let mel = load_feature(&manifest.mel_file(r), FeatureRole::Mel)?;
        let h_t = load_feature(&ctx_path, FeatureRole::Ctx)?;
        if h_t.rows() != mel.rows() || h_t.cols() != cfg.dec.ctx_dim {
            return Err(Error::shape(
                format!("teacher context for {}", r.id),
                [mel.rows(), cfg.dec.ctx_dim],
                [h_t.rows(), h_t.cols()],
            ));
        }
        if mel.cols() != cfg.bands {
            return Err(Error::shape(
                format!("mel frames for {}", r.id),
                cfg.bands,
                mel.cols(),
            ));
        }
        let z = speakers.get(&r.speaker_id)?.to_vec();
        utts.push(LoadedUtt {
            id: r.id.clone(),
            mel,
            h_t,
            z,
        });
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::MissingArtifact(format!(
            "no context file for: {}",
            missing.join(", ")
        )));
    }
    if utts.is_empty() {
        return Err(Error::InvalidArg(format!(
            "manifest has no rows in split {}",
            split.as_str()
        )));
    }
    Ok(utts)
}

/// Adapts the conversion model on precomputed teacher contexts. The
/// teacher itself is never consulted: its knowledge enters only through
/// the frozen context files and the transplanted decoder in `init`.
/// Deterministic for a fixed seed; `epochs = 0` returns `init` as is.
pub fn train_vc(
    manifest: &Manifest,
    context_dir: &Path,
    cfg: &VcConfig,
    init: &ParameterStore<f32>,
    speakers: &SpeakerTable,
    epochs: usize,
    seed: u64,
) -> Result<(ParameterStore<f32>, VcTrainReport)> {
    cfg.validate()?;
    if !speakers.is_empty() && speakers.dim() != cfg.dec.spk_dim {
        return Err(Error::Config(format!(
            "speaker table width {} does not match spk_dim {}",
            speakers.dim(),
            cfg.dec.spk_dim
        )));
    }
    let utts = load_split(manifest, context_dir, Split::Train, cfg, speakers)?;
    let model = VcModel::new(cfg);
    let mut ps = init.clone();
    let held_out_initial = evaluate_vc(manifest, Split::HeldOut, cfg, speakers, &ps, context_dir)?;
    let mut opt = Sgd::new(SgdConfig {
        lr: cfg.lr,
        momentum: 0.9,
        clip_norm: 1.0,
    });
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..utts.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut shuffle_rng);
        let mut epoch_cont = 0.0;
        let mut epoch_mel = 0.0;
        for &i in &order {
            let u = &utts[i];
            let (h_s, enc_cache) = model.enc.forward(&ps, &u.mel, true)?;
            let enc_cache = enc_cache.expect("training forward always caches");
            let run = model
                .dec
                .run_with_context(&ps, &h_s, &u.z, Feedback::Framewise, true)?;
            let cont_part = cfg.w_cont * seq_mse(&u.h_t, &h_s)?;
            let mel_raw = if cfg.single_mel_loss {
                seq_mse(&u.mel, &run.post)?
            } else {
                seq_mse(&u.mel, &run.pre)? + seq_mse(&u.mel, &run.post)?
            };
            let mel_part = cfg.w_mel * mel_raw;
            if !(cont_part + mel_part).is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, utterance {}",
                    u.id
                )));
            }
            let d_pre = if cfg.single_mel_loss {
                Tensor::zeros(u.mel.shape())
            } else {
                seq_mse_grad(&u.mel, &run.pre, cfg.w_mel)
            };
            let d_post = seq_mse_grad(&u.mel, &run.post, cfg.w_mel);
            let mut grads = ps.zeros_like();
            let d_h = model
                .dec
                .backward_with_context(&ps, &mut grads, &run, &d_pre, &d_post, None)?;
            let d_h = d_h.add(&seq_mse_grad(&u.h_t, &h_s, cfg.w_cont))?;
            model.enc.backward(&ps, &mut grads, &enc_cache, &d_h)?;
            if cfg.freeze_decoder {
                for name in model.dec.param_names() {
                    grads.get_mut(&name)?.fill(0.0);
                }
            }
            model.enc.update_running(&mut ps, &enc_cache)?;
            if !cfg.freeze_decoder {
                if let Some(pc) = &run.post_cache {
                    model.dec.postnet_update_running(&mut ps, pc)?;
                }
            }
            opt.step(&mut ps, &grads)?;
            epoch_cont += cont_part;
            epoch_mel += mel_part;
        }
        let k = utts.len() as f64;
        log.push(format!(
            "{epoch}\t{:.6}\t{:.6}",
            epoch_cont / k,
            epoch_mel / k
        ));
    }
    let held_out = if epochs == 0 {
        held_out_initial
    } else {
        evaluate_vc(manifest, Split::HeldOut, cfg, speakers, &ps, context_dir)?
    };
    Ok((
        ps,
        VcTrainReport {
            log,
            held_out_initial,
            held_out,
        },
    ))
}

/// Literal unweighted loss parts over one split: context distance of the
/// encoder output against the stored teacher contexts, mel distance of
/// the final decoded output against the input. Eval mode throughout.
pub fn evaluate_vc(
    manifest: &Manifest,
    split: Split,
    cfg: &VcConfig,
    speakers: &SpeakerTable,
    ps: &ParameterStore<f32>,
    context_dir: &Path,
) -> Result<VcEval> {
    cfg.validate()?;
    let utts = load_split(manifest, context_dir, split, cfg, speakers)?;
    let model = VcModel::new(cfg);
    let mut cont = 0.0;
    let mut mel = 0.0;
    for u in &utts {
        let (h_s, _) = model.enc.forward(ps, &u.mel, false)?;
        let run = model
            .dec
            .run_with_context(ps, &h_s, &u.z, Feedback::Framewise, false)?;
        cont += seq_mse(&u.h_t, &h_s)?;
        mel += seq_mse(&u.mel, &run.post)?;
    }
    let k = utts.len() as f64;
    Ok(VcEval {
        loss_cont: cont / k,
        loss_mel: mel / k,
    })
}

/// Zero-shot conversion: encode the source utterance, decode with the
/// target speaker vector. Output frame count always equals the input's;
/// no text, attention or teacher involvement.
pub fn convert(
    y: &MelSpectrogram,
    z_target: &SpeakerEmbedding,
    ps: &ParameterStore<f32>,
    cfg: &VcConfig,
) -> Result<MelSpectrogram> {
    cfg.validate()?;
    check_input(cfg, &y.frames)?;
    check_speaker(cfg, &z_target.vector)?;
    let model = VcModel::new(cfg);
    let (h, _) = model.enc.forward(ps, &y.frames, false)?;
    let run = model
        .dec
        .run_with_context(ps, &h, &z_target.vector, Feedback::Framewise, false)?;
    Ok(MelSpectrogram {
        frames: run.post,
        frame_shift: y.frame_shift,
        frame_length: y.frame_length,
    })
}

/// Checks the analytic gradient of the joint objective (context term plus
/// mel term) against central finite differences in `f64`, on a seeded
/// two-frame toy problem.
pub fn gradcheck_vc(cfg: &VcConfig, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let model = VcModel::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParameterStore::<f64>::new();
    model.init(&mut ps, &mut rng);
    // Same reasoning as the synthesis-side check: move off the zeroed
    // init point before differencing.
    for name in model.param_names() {
        for v in ps.get_mut(&name)?.data_mut() {
            *v += uniform::<f64>(&mut rng, -0.05, 0.05);
        }
    }
    let mut y = Tensor::<f64>::zeros(&[2, cfg.bands]);
    for v in y.data_mut() {
        *v = uniform(&mut rng, -1.5, 1.5);
    }
    let mut h_t = Tensor::<f64>::zeros(&[2, cfg.dec.ctx_dim]);
    for v in h_t.data_mut() {
        *v = uniform(&mut rng, -1.0, 1.0);
    }
    let z: Vec<f64> = (0..cfg.dec.spk_dim)
        .map(|_| uniform(&mut rng, -0.8, 0.8))
        .collect();
    let loss_of = |p: &ParameterStore<f64>| -> Result<f64> {
        let (h_s, _) = model.enc.forward(p, &y, true)?;
        let run = model
            .dec
            .run_with_context(p, &h_s, &z, Feedback::Framewise, true)?;
        let cont = cfg.w_cont * seq_mse(&h_t, &h_s)?;
        let mel = if cfg.single_mel_loss {
            seq_mse(&y, &run.post)?
        } else {
            seq_mse(&y, &run.pre)? + seq_mse(&y, &run.post)?
        };
        Ok(cont + cfg.w_mel * mel)
    };
    let grads_of = |p: &ParameterStore<f64>| -> Result<ParameterStore<f64>> {
        let (h_s, cache) = model.enc.forward(p, &y, true)?;
        let cache = cache.expect("training forward always caches");
        let run = model
            .dec
            .run_with_context(p, &h_s, &z, Feedback::Framewise, true)?;
        let d_pre = if cfg.single_mel_loss {
            Tensor::zeros(y.shape())
        } else {
            seq_mse_grad(&y, &run.pre, cfg.w_mel)
        };
        let d_post = seq_mse_grad(&y, &run.post, cfg.w_mel);
        let mut grads = p.zeros_like();
        let d_h = model
            .dec
            .backward_with_context(p, &mut grads, &run, &d_pre, &d_post, None)?;
        let d_h = d_h.add(&seq_mse_grad(&h_t, &h_s, cfg.w_cont))?;
        model.enc.backward(p, &mut grads, &cache, &d_h)?;
        Ok(grads)
    };
    crate::ndiff::gradient_check(
        &ps,
        &model.param_names(),
        loss_of,
        grads_of,
        &GradCheckConfig::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_corpus, CorpusConfig};
    use crate::taco::{extract_context, init_tts};

    fn tiny_tts() -> TtsConfig {
        TtsConfig {
            char_embed: 6,
            enc_conv_layers: 1,
            enc_filters: 6,
            enc_kernel: 3,
            enc_units: 3,
            attn_dim: 4,
            loc_filters: 2,
            loc_kernel: 3,
            prenet_units: 4,
            dec_units: 8,
            bands: 5,
            postnet_layers: 2,
            postnet_filters: 4,
            postnet_kernel: 3,
            spk_dim: 3,
            stop_threshold: 0.5,
            single_mel_loss: false,
            lr: 0.05,
        }
    }

    fn tiny_cfg() -> VcConfig {
        VcConfig::from_tts(&tiny_tts())
    }

    fn random_mel(n: usize, b: usize, seed: u64) -> MelSpectrogram {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * b).map(|_| rng.gen_range(-2.0..2.0)).collect();
        MelSpectrogram {
            frames: Tensor::from_vec(&[n, b], data).unwrap(),
            frame_shift: 0.0125,
            frame_length: 0.05,
        }
    }

    fn spk(v: Vec<f32>) -> SpeakerEmbedding {
        SpeakerEmbedding {
            vector: v,
            speaker_id: None,
        }
    }

    fn ctx_of(vectors: Tensor<f32>, source: ContextSource) -> ContextSequence {
        ContextSequence { vectors, source }
    }

    #[test]
    fn default_config_is_consistent() {
        let cfg = VcConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.context_dim(), 64);
        assert_eq!(cfg.context_dim(), cfg.dec.ctx_dim);
        assert_eq!(cfg.w_cont, 1.0);
        assert_eq!(cfg.w_mel, 1.0);
    }

    #[test]
    fn config_rejects_inconsistent_widths() {
        let mut cfg = tiny_cfg();
        cfg.enc_units += 1;
        assert!(cfg.validate().is_err(), "context width mismatch accepted");

        let mut cfg = tiny_cfg();
        cfg.bands += 1;
        assert!(cfg.validate().is_err(), "band mismatch accepted");

        let mut cfg = tiny_cfg();
        cfg.enc_kernel = 4;
        assert!(cfg.validate().is_err(), "even kernel accepted");

        let mut cfg = tiny_cfg();
        cfg.w_cont = 0.0;
        cfg.w_mel = 0.0;
        assert!(cfg.validate().is_err(), "all-zero loss weights accepted");

        let mut cfg = tiny_cfg();
        cfg.lr = f64::NAN;
        assert!(cfg.validate().is_err(), "non-finite learning rate accepted");
    }

    #[test]
    fn encode_speech_preserves_length_and_validates_input() {
        let cfg = tiny_cfg();
        let ps = init_vc(&cfg, 7).unwrap();
        let y = random_mel(9, cfg.bands, 3);
        let a = encode_speech(&y, &ps, &cfg).unwrap();
        let b = encode_speech(&y, &ps, &cfg).unwrap();
        assert_eq!(a.vectors.rows(), 9, "one context row per input frame");
        assert_eq!(a.vectors.cols(), cfg.context_dim());
        assert_eq!(a.source, ContextSource::Vc);
        assert_eq!(a.vectors.data(), b.vectors.data());

        let empty = MelSpectrogram {
            frames: Tensor::zeros(&[0, cfg.bands]),
            frame_shift: 0.0125,
            frame_length: 0.05,
        };
        assert!(encode_speech(&empty, &ps, &cfg).is_err());
        let wrong = random_mel(4, cfg.bands + 1, 5);
        assert!(encode_speech(&wrong, &ps, &cfg).is_err());
    }

    #[test]
    fn context_loss_matches_hand_values() {
        let a = ctx_of(
            Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap(),
            ContextSource::Vc,
        );
        let b = ctx_of(
            Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap(),
            ContextSource::Tts,
        );
        assert_eq!(loss_cont(&a, &a).unwrap(), 0.0);
        assert!((loss_cont(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(
            loss_cont(&a, &b).unwrap(),
            loss_cont(&b, &a).unwrap(),
            "the distance must be symmetric"
        );

        let two = ctx_of(
            Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
            ContextSource::Vc,
        );
        let zeros = ctx_of(Tensor::zeros(&[2, 2]), ContextSource::Tts);
        assert!((loss_cont(&two, &zeros).unwrap() - 2.5).abs() < 1e-12);

        let short = ctx_of(Tensor::zeros(&[1, 2]), ContextSource::Tts);
        assert!(loss_cont(&two, &short).is_err(), "length mismatch accepted");
    }

    #[test]
    fn joint_loss_decomposes_exactly() {
        let cfg = tiny_cfg();
        let mel = |v: f32| MelSpectrogram {
            frames: Tensor::from_vec(&[1, cfg.bands], vec![v; cfg.bands]).unwrap(),
            frame_shift: 0.0125,
            frame_length: 0.05,
        };
        let h = |v: f32| {
            ctx_of(
                Tensor::from_vec(&[1, cfg.context_dim()], vec![v; cfg.context_dim()]).unwrap(),
                ContextSource::Vc,
            )
        };

        let perfect = loss_joint(&h(0.4), &h(0.4), &mel(0.2), &mel(0.2), &cfg).unwrap();
        assert_eq!(perfect.total, 0.0);

        // One unit vector off in context space, one in mel space, scaled
        // so the parts come out 0.3 and 0.7.
        let d_ctx = (0.3f64 / cfg.context_dim() as f64).sqrt() as f32;
        let d_mel = (0.7f64 / cfg.bands as f64).sqrt() as f32;
        let j = loss_joint(&h(d_ctx), &h(0.0), &mel(0.0), &mel(d_mel), &cfg).unwrap();
        assert!((j.cont - 0.3).abs() < 1e-6, "cont part {}", j.cont);
        assert!((j.mel - 0.7).abs() < 1e-6, "mel part {}", j.mel);
        assert!((j.total - 1.0).abs() < 1e-6, "total {}", j.total);
        assert_eq!(
            j.total,
            j.cont + j.mel,
            "decomposition must be exact, not approximate"
        );

        let mut weighted = cfg.clone();
        weighted.w_cont = 2.0;
        weighted.w_mel = 0.5;
        let w = loss_joint(&h(d_ctx), &h(0.0), &mel(0.0), &mel(d_mel), &weighted).unwrap();
        assert!((w.cont - 0.6).abs() < 1e-6);
        assert!((w.mel - 0.35).abs() < 1e-6);
        assert_eq!(w.total, w.cont + w.mel);
    }

    #[test]
    fn transfer_copies_the_decoder_bit_for_bit() {
        let tts_cfg = tiny_tts();
        let cfg = tiny_cfg();
        let tts = init_tts(&tts_cfg, 3).unwrap();
        let (ps, report) = init_vc_from_tts(&tts, &cfg, 9).unwrap();

        let decoder_names: Vec<String> = {
            let mut v: Vec<String> = tts
                .names()
                .into_iter()
                .filter(|n| n.starts_with("decoder."))
                .map(str::to_string)
                .collect();
            v.sort();
            v
        };
        assert_eq!(
            report.copied, decoder_names,
            "copied set must be exactly the teacher's decoder entries"
        );
        for name in &report.copied {
            assert_eq!(
                ps.get(name).unwrap().data(),
                tts.get(name).unwrap().data(),
                "{name} was not copied verbatim"
            );
        }

        assert!(report.fresh.iter().all(|n| n.starts_with("encoder.")));
        assert!(ps.contains("encoder.in_proj.weight"));
        assert!(!tts.contains("encoder.in_proj.weight"));
        // Trunk names that exist in both stores must nevertheless be
        // freshly seeded here, not inherited.
        assert!(tts.contains("encoder.conv0.weight"));
        assert_ne!(
            ps.get("encoder.conv0.weight").unwrap().data(),
            tts.get("encoder.conv0.weight").unwrap().data()
        );

        let mut broken = tts.clone();
        broken.remove("decoder.proj.weight");
        let err = init_vc_from_tts(&broken, &cfg, 9).unwrap_err();
        assert!(
            err.to_string().contains("decoder.proj.weight"),
            "error must name the missing entry, got: {err}"
        );
    }

    #[test]
    fn joint_loss_gradcheck_on_two_frame_toy() {
        let report = gradcheck_vc(&tiny_cfg(), 42).unwrap();
        assert!(report.pass, "{}", report.render());
    }

    #[test]
    fn gradcheck_covers_weighted_post_only_variant() {
        let mut cfg = tiny_cfg();
        cfg.w_cont = 0.7;
        cfg.w_mel = 1.3;
        cfg.single_mel_loss = true;
        let report = gradcheck_vc(&cfg, 7).unwrap();
        assert!(report.pass, "{}", report.render());
    }

    #[test]
    fn convert_preserves_length_and_checks_inputs() {
        let cfg = tiny_cfg();
        let ps = init_vc(&cfg, 11).unwrap();
        let z = spk(vec![0.3, -0.2, 0.5]);
        for n in [1usize, 5, 23] {
            let y = random_mel(n, cfg.bands, n as u64);
            let out = convert(&y, &z, &ps, &cfg).unwrap();
            assert_eq!(out.num_frames(), n, "conversion changed the length");
            assert_eq!(out.frames.cols(), cfg.bands);
            assert_eq!(out.frame_shift, y.frame_shift);
            let again = convert(&y, &z, &ps, &cfg).unwrap();
            assert_eq!(out.frames.data(), again.frames.data());
        }
        let y = random_mel(4, cfg.bands + 2, 1);
        assert!(convert(&y, &z, &ps, &cfg).is_err());
        let y = random_mel(4, cfg.bands, 1);
        assert!(convert(&y, &spk(vec![0.0; 2]), &ps, &cfg).is_err());
    }

    fn small_corpus(dir: &Path, seed: u64) -> Manifest {
        make_corpus(
            dir,
            &CorpusConfig {
                n_speakers: 4,
                n_unseen: 2,
                utts_per_speaker: 6,
                held_out_per_speaker: 1,
                bands: 16,
                noise_sigma: 0.05,
                text_len: (5, 8),
                seed,
            },
        )
        .unwrap()
    }

    fn small_tts_cfg() -> TtsConfig {
        TtsConfig {
            char_embed: 16,
            enc_conv_layers: 1,
            enc_filters: 16,
            enc_kernel: 5,
            enc_units: 8,
            attn_dim: 8,
            loc_filters: 4,
            loc_kernel: 7,
            prenet_units: 8,
            dec_units: 32,
            bands: 16,
            postnet_layers: 2,
            postnet_filters: 16,
            postnet_kernel: 5,
            spk_dim: 4,
            stop_threshold: 0.5,
            single_mel_loss: false,
            lr: 0.05,
        }
    }

    fn handmade_speakers(manifest: &Manifest, dim: usize) -> SpeakerTable {
        let mut table = SpeakerTable::from_store(&ParameterStore::new());
        for (i, s) in manifest.speakers().iter().enumerate() {
            let mut v = vec![0.0f32; dim];
            v[i % dim] = 1.0;
            v[(i + 1) % dim] = if i / dim % 2 == 0 { 0.5 } else { -0.5 };
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            table.insert(s.clone(), v.iter().map(|x| x / norm).collect());
        }
        table
    }

    /// Corpus, context files from an initialized teacher, and a
    /// transferred starting store, ready for adaptation.
    fn training_fixture(
        dir: &Path,
        seed: u64,
    ) -> (Manifest, std::path::PathBuf, VcConfig, SpeakerTable, ParameterStore<f32>) {
        let manifest = small_corpus(dir, seed);
        let tts_cfg = small_tts_cfg();
        let speakers = handmade_speakers(&manifest, tts_cfg.spk_dim);
        let tts = init_tts(&tts_cfg, 21).unwrap();
        let ctx_dir = dir.join("ctx");
        extract_context(&manifest, &tts, &tts_cfg, &speakers, &ctx_dir, 1.5).unwrap();
        let cfg = VcConfig::from_tts(&tts_cfg);
        let (init, _) = init_vc_from_tts(&tts, &cfg, 5).unwrap();
        (manifest, ctx_dir, cfg, speakers, init)
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, ctx_dir, cfg, speakers, init) = training_fixture(dir.path(), 77);

        let (ps0, rep0) =
            train_vc(&manifest, &ctx_dir, &cfg, &init, &speakers, 0, 5).unwrap();
        assert!(rep0.log.is_empty());
        assert_eq!(
            ps0.to_bytes(),
            init.to_bytes(),
            "zero-epoch training must return the starting store"
        );
        assert_eq!(rep0.held_out.loss_cont, rep0.held_out_initial.loss_cont);

        let (_, report) = train_vc(&manifest, &ctx_dir, &cfg, &init, &speakers, 4, 5).unwrap();
        assert_eq!(report.log.len(), 4);
        let total_at = |line: &str| -> f64 {
            let mut cols = line.split('\t').skip(1);
            let cont: f64 = cols.next().unwrap().parse().unwrap();
            let mel: f64 = cols.next().unwrap().parse().unwrap();
            cont + mel
        };
        let first = total_at(&report.log[0]);
        let last = total_at(&report.log[3]);
        assert!(
            last < first,
            "joint loss failed to descend: {first} -> {last}"
        );
        let ho_first = report.held_out_initial.loss_cont + report.held_out_initial.loss_mel;
        let ho_last = report.held_out.loss_cont + report.held_out.loss_mel;
        assert!(
            ho_last < ho_first,
            "held-out joint loss did not improve: {ho_first} -> {ho_last}"
        );

        // With the mel term switched off the context term is the whole
        // objective and must descend on its own.
        let mut cont_only = cfg.clone();
        cont_only.w_mel = 0.0;
        let (_, rep_c) =
            train_vc(&manifest, &ctx_dir, &cont_only, &init, &speakers, 3, 5).unwrap();
        let cont_at = |line: &str| -> f64 { line.split('\t').nth(1).unwrap().parse().unwrap() };
        assert!(
            cont_at(&rep_c.log[2]) < cont_at(&rep_c.log[0]),
            "context loss failed to descend without the mel term"
        );
        assert!(
            rep_c.held_out.loss_cont < rep_c.held_out_initial.loss_cont,
            "held-out context loss did not improve: {} -> {}",
            rep_c.held_out_initial.loss_cont,
            rep_c.held_out.loss_cont
        );

        let (ps_a, rep_a) = train_vc(&manifest, &ctx_dir, &cfg, &init, &speakers, 2, 9).unwrap();
        let (ps_b, rep_b) = train_vc(&manifest, &ctx_dir, &cfg, &init, &speakers, 2, 9).unwrap();
        assert_eq!(ps_a.to_bytes(), ps_b.to_bytes());
        assert_eq!(rep_a.log, rep_b.log);
    }

    #[test]
    fn freezing_the_decoder_keeps_it_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, ctx_dir, mut cfg, speakers, init) = training_fixture(dir.path(), 31);
        cfg.freeze_decoder = true;

        let (ps, _) = train_vc(&manifest, &ctx_dir, &cfg, &init, &speakers, 2, 5).unwrap();
        let mut encoder_changed = false;
        for name in init.names() {
            let before = init.get(&name).unwrap().data();
            let after = ps.get(&name).unwrap().data();
            if name.starts_with("decoder.") {
                assert_eq!(before, after, "{name} moved despite the freeze");
            } else if before != after {
                encoder_changed = true;
            }
        }
        assert!(encoder_changed, "the encoder should still adapt");
    }

    #[test]
    fn missing_context_files_are_reported_together() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, ctx_dir, cfg, speakers, init) = training_fixture(dir.path(), 13);

        let ids: Vec<String> = manifest
            .records_in(Split::Train)
            .take(2)
            .map(|r| r.id.clone())
            .collect();
        for id in &ids {
            std::fs::remove_file(context_file(&ctx_dir, id)).unwrap();
        }
        let err = train_vc(&manifest, &ctx_dir, &cfg, &init, &speakers, 1, 5).unwrap_err();
        let msg = err.to_string();
        for id in &ids {
            assert!(msg.contains(id.as_str()), "error must list {id}, got: {msg}");
        }
    }

}

