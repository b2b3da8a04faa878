//! Bottleneck autoencoder baseline. The same speech-encoder trunk feeds
//! a narrow projection that is downsampled in time; the decoder is a
//! framewise recurrent stack conditioned on the speaker vector. Trained
//! by self-reconstruction only; conversion swaps the speaker vector at
//! decode time and relies on the bottleneck having squeezed speaker
//! identity out of the code.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Manifest, Split};
use crate::error::{Error, Result};
use crate::ndiff::layers::uniform;
use crate::ndiff::store::{load_feature, FeatureRole, ParameterStore};
use crate::ndiff::{
    GradCheckConfig, GradCheckReport, Linear, Lstm, LstmStepCache, Scalar, Sgd, SgdConfig, Tensor,
};
use crate::sigproc::MelSpectrogram;
use crate::spkenc::{SpeakerEmbedding, SpeakerTable};
use crate::taco::decoder::{Postnet, PostnetCache};
use crate::taco::{seq_mse, seq_mse_grad};
use crate::vc::encoder::{SpeechEncCache, SpeechEncoder};

/// Baseline autoencoder widths and training knobs.
#[derive(Debug, Clone)]
pub struct AutoVcConfig {
    pub bands: usize,
    /// Bottleneck code width.
    pub latent: usize,
    /// Temporal sampling factor: one code vector kept per this many
    /// frames.
    pub factor: usize,
    pub proj_dim: usize,
    pub enc_conv_layers: usize,
    pub enc_filters: usize,
    pub enc_kernel: usize,
    pub enc_units: usize,
    pub dec_units: usize,
    pub postnet_layers: usize,
    pub postnet_filters: usize,
    pub postnet_kernel: usize,
    pub spk_dim: usize,
    pub single_mel_loss: bool,
    pub lr: f64,
}

impl Default for AutoVcConfig {
    fn default() -> Self {
        AutoVcConfig {
            bands: 80,
            latent: 8,
            factor: 8,
            proj_dim: 64,
            enc_conv_layers: 3,
            enc_filters: 64,
            enc_kernel: 5,
            enc_units: 32,
            dec_units: 128,
            postnet_layers: 5,
            postnet_filters: 64,
            postnet_kernel: 5,
            spk_dim: 16,
            single_mel_loss: false,
            lr: 0.05,
        }
    }
}

impl AutoVcConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bands", self.bands),
            ("latent", self.latent),
            ("factor", self.factor),
            ("proj_dim", self.proj_dim),
            ("enc_conv_layers", self.enc_conv_layers),
            ("enc_filters", self.enc_filters),
            ("enc_units", self.enc_units),
            ("dec_units", self.dec_units),
            ("postnet_layers", self.postnet_layers),
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
            ("postnet_kernel", self.postnet_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// How many code vectors a sequence of `frames` rows keeps at a given
/// sampling factor: the count of rows `0, factor, 2*factor, ...` that
/// exist, i.e. `ceil(frames / factor)`.
pub fn latent_length(frames: usize, factor: usize) -> usize {
    frames.div_ceil(factor)
}

/// Keeps every `factor`-th row.
fn downsample<S: Scalar>(x: &Tensor<S>, factor: usize) -> Tensor<S> {
    let k = latent_length(x.rows(), factor);
    let mut out = Tensor::zeros(&[k, x.cols()]);
    for j in 0..k {
        out.row_mut(j).copy_from_slice(x.row(j * factor));
    }
    out
}

/// Adjoint of `downsample`: scatters back into the strided rows, zeros
/// elsewhere.
fn downsample_backward<S: Scalar>(d_ds: &Tensor<S>, factor: usize, n: usize) -> Tensor<S> {
    let mut out = Tensor::zeros(&[n, d_ds.cols()]);
    for j in 0..d_ds.rows() {
        out.row_mut(j * factor).copy_from_slice(d_ds.row(j));
    }
    out
}

/// Repeats each code row `factor` times, truncated to `n` rows.
fn upsample<S: Scalar>(lat: &Tensor<S>, factor: usize, n: usize) -> Tensor<S> {
    let mut out = Tensor::zeros(&[n, lat.cols()]);
    for t in 0..n {
        out.row_mut(t).copy_from_slice(lat.row(t / factor));
    }
    out
}

/// Adjoint of `upsample`: sums each repeat group back onto its code row.
fn upsample_backward<S: Scalar>(d_up: &Tensor<S>, factor: usize, k: usize) -> Tensor<S> {
    let mut out = Tensor::zeros(&[k, d_up.cols()]);
    for t in 0..d_up.rows() {
        let row = out.row_mut(t / factor);
        for (o, &d) in row.iter_mut().zip(d_up.row(t)) {
            *o = *o + d;
        }
    }
    out
}

struct AutoVcModel {
    enc: SpeechEncoder,
    bottleneck: Linear,
    lstm0: Lstm,
    lstm1: Lstm,
    proj: Linear,
    postnet: Postnet,
    latent: usize,
    factor: usize,
}

struct AvRun<S> {
    enc_cache: Option<SpeechEncCache<S>>,
    /// Downsampled encoder rows, the bottleneck's input.
    ds: Tensor<S>,
    caches0: Vec<LstmStepCache<S>>,
    caches1: Vec<LstmStepCache<S>>,
    h1: Tensor<S>,
    pre: Tensor<S>,
    post: Tensor<S>,
    post_cache: Option<PostnetCache<S>>,
}

impl AutoVcModel {
    fn new(cfg: &AutoVcConfig) -> Self {
        AutoVcModel {
            enc: SpeechEncoder::new(
                cfg.bands,
                cfg.proj_dim,
                cfg.enc_conv_layers,
                cfg.enc_filters,
                cfg.enc_kernel,
                cfg.enc_units,
            ),
            bottleneck: Linear::new("encoder.bottleneck", 2 * cfg.enc_units, cfg.latent),
            lstm0: Lstm::new("decoder.lstm0", cfg.latent + cfg.spk_dim, cfg.dec_units),
            lstm1: Lstm::new("decoder.lstm1", cfg.dec_units, cfg.dec_units),
            proj: Linear::new("decoder.proj", cfg.dec_units, cfg.bands),
            postnet: Postnet::new(
                "decoder.postnet",
                cfg.bands,
                cfg.postnet_filters,
                cfg.postnet_layers,
                cfg.postnet_kernel,
            ),
            latent: cfg.latent,
            factor: cfg.factor,
        }
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = self.enc.param_names();
        names.extend(self.bottleneck.param_names());
        names.extend(self.lstm0.param_names());
        names.extend(self.lstm1.param_names());
        names.extend(self.proj.param_names());
        names.extend(self.postnet.param_names());
        names
    }

    fn init<S: Scalar>(&self, ps: &mut ParameterStore<S>, rng: &mut ChaCha8Rng) {
        self.enc.init(ps, rng);
        self.bottleneck.init(ps, rng);
        self.lstm0.init(ps, rng);
        self.lstm1.init(ps, rng);
        self.proj.init(ps, rng);
        self.postnet.init(ps, rng);
    }

    fn run<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        frames: &Tensor<S>,
        z: &[S],
        train: bool,
    ) -> Result<AvRun<S>> {
        if z.len() != self.lstm0.input - self.latent {
            return Err(Error::shape(
                "speaker vector",
                self.lstm0.input - self.latent,
                z.len(),
            ));
        }
        let n = frames.rows();
        let (enc_out, enc_cache) = self.enc.forward(ps, frames, train)?;
        let ds = downsample(&enc_out, self.factor);
        let lat = self.bottleneck.forward_seq(ps, &ds)?;
        let up = upsample(&lat, self.factor, n);
        let mut x = Tensor::zeros(&[n, self.lstm0.input]);
        for t in 0..n {
            let row = x.row_mut(t);
            row[..self.latent].copy_from_slice(up.row(t));
            row[self.latent..].copy_from_slice(z);
        }
        let (h0, caches0) = self.lstm0.forward_seq(ps, &x)?;
        let (h1, caches1) = self.lstm1.forward_seq(ps, &h0)?;
        let pre = self.proj.forward_seq(ps, &h1)?;
        let (post, post_cache) = self.postnet.forward(ps, &pre, train)?;
        Ok(AvRun {
            enc_cache,
            ds,
            caches0,
            caches1,
            h1,
            pre,
            post,
            post_cache,
        })
    }

    /// Full backprop of a training run. The speaker input is a fixed
    /// conditioning vector, so its slice of the gradient is dropped.
    fn backward<S: Scalar>(
        &self,
        ps: &ParameterStore<S>,
        grads: &mut ParameterStore<S>,
        run: &AvRun<S>,
        d_pre: &Tensor<S>,
        d_post: &Tensor<S>,
    ) -> Result<()> {
        let pc = run.post_cache.as_ref().ok_or_else(|| {
            Error::InvalidArg("autoencoder run was not made in training mode".into())
        })?;
        let enc_cache = run
            .enc_cache
            .as_ref()
            .expect("training run always carries the encoder cache");
        let d_res = self.postnet.backward(ps, grads, pc, d_post)?;
        let d_pre_total = d_pre.add(d_post)?.add(&d_res)?;
        let dh1 = self.proj.backward_seq(ps, grads, &run.h1, &d_pre_total)?;
        let dh0 = self.lstm1.backward_seq(ps, grads, &run.caches1, &dh1)?;
        let dx = self.lstm0.backward_seq(ps, grads, &run.caches0, &dh0)?;
        let n = dx.rows();
        let mut d_up = Tensor::zeros(&[n, self.latent]);
        for t in 0..n {
            d_up.row_mut(t).copy_from_slice(&dx.row(t)[..self.latent]);
        }
        let d_lat = upsample_backward(&d_up, self.factor, run.ds.rows());
        let d_ds = self.bottleneck.backward_seq(ps, grads, &run.ds, &d_lat)?;
        let d_enc = downsample_backward(&d_ds, self.factor, n);
        self.enc.backward(ps, grads, enc_cache, &d_enc)
    }

    fn update_running<S: Scalar>(&self, ps: &mut ParameterStore<S>, run: &AvRun<S>) -> Result<()> {
        if let Some(c) = &run.enc_cache {
            self.enc.update_running(ps, c)?;
        }
        if let Some(c) = &run.post_cache {
            self.postnet.update_running(ps, c)?;
        }
        Ok(())
    }
}

fn check_frames(cfg: &AutoVcConfig, frames: &Tensor<f32>) -> Result<()> {
    if frames.rows() == 0 {
        return Err(Error::InvalidArg(
            "cannot encode an empty mel sequence".into(),
        ));
    }
    if frames.cols() != cfg.bands {
        return Err(Error::shape(
            "autoencoder input",
            cfg.bands,
            frames.cols(),
        ));
    }
    Ok(())
}

/// Fresh random initialization of the autoencoder.
pub fn init_autovc(cfg: &AutoVcConfig, seed: u64) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    let model = AutoVcModel::new(cfg);
    let mut ps = ParameterStore::new();
    model.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ps)
}

/// Names of every trainable tensor in the autoencoder.
pub fn autovc_param_names(cfg: &AutoVcConfig) -> Vec<String> {
    AutoVcModel::new(cfg).param_names()
}

/// The code an utterance maps to: `latent_length` rows of `latent`
/// columns, eval mode.
pub fn autovc_latent(
    y: &MelSpectrogram,
    ps: &ParameterStore<f32>,
    cfg: &AutoVcConfig,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    check_frames(cfg, &y.frames)?;
    let model = AutoVcModel::new(cfg);
    let (enc_out, _) = model.enc.forward(ps, &y.frames, false)?;
    model
        .bottleneck
        .forward_seq(ps, &downsample(&enc_out, cfg.factor))
}

/// Decodes the source utterance's code under the target speaker vector.
/// Output frame count always equals the input's.
pub fn convert_autovc(
    y: &MelSpectrogram,
    z_target: &SpeakerEmbedding,
    ps: &ParameterStore<f32>,
    cfg: &AutoVcConfig,
) -> Result<MelSpectrogram> {
    cfg.validate()?;
    check_frames(cfg, &y.frames)?;
    let model = AutoVcModel::new(cfg);
    let run = model.run(ps, &y.frames, &z_target.vector, false)?;
    Ok(MelSpectrogram {
        frames: run.post,
        frame_shift: y.frame_shift,
        frame_length: y.frame_length,
    })
}

struct AvUtt {
    id: String,
    mel: Tensor<f32>,
    z: Vec<f32>,
}

fn load_split(
    manifest: &Manifest,
    split: Split,
    cfg: &AutoVcConfig,
    speakers: &SpeakerTable,
) -> Result<Vec<AvUtt>> {
    let mut utts = Vec::new();
    for r in manifest.records_in(split) {
        let mel = load_feature(&manifest.mel_file(r), FeatureRole::Mel)?;
        if mel.cols() != cfg.bands {
            return Err(Error::shape(
                format!("mel frames for {}", r.id),
                cfg.bands,
                mel.cols(),
            ));
        }
        let z = speakers.get(&r.speaker_id)?.to_vec();
        utts.push(AvUtt {
            id: r.id.clone(),
            mel,
            z,
        });
    }
    if utts.is_empty() {
        return Err(Error::InvalidArg(format!(
            "manifest has no rows in split {}",
            split.as_str()
        )));
    }
    Ok(utts)
}

#[derive(Debug, Clone)]
pub struct AutoVcTrainReport {
    /// One `epoch<TAB>mel` line per epoch (trained reconstruction loss
    /// averaged over the epoch).
    pub log: Vec<String>,
    /// Held-out reconstruction loss under the initial store.
    pub held_out_initial: f64,
    /// Held-out reconstruction loss after the final epoch.
    pub held_out: f64,
}

/// Trains the autoencoder by self-reconstruction: every utterance is
/// encoded and decoded under its own speaker vector. Deterministic for a
/// fixed seed; `epochs = 0` returns the fresh initialization.
pub fn train_autovc(
    manifest: &Manifest,
    cfg: &AutoVcConfig,
    speakers: &SpeakerTable,
    epochs: usize,
    seed: u64,
) -> Result<(ParameterStore<f32>, AutoVcTrainReport)> {
    cfg.validate()?;
    if !speakers.is_empty() && speakers.dim() != cfg.spk_dim {
        return Err(Error::Config(format!(
            "speaker table width {} does not match spk_dim {}",
            speakers.dim(),
            cfg.spk_dim
        )));
    }
    let utts = load_split(manifest, Split::Train, cfg, speakers)?;
    let model = AutoVcModel::new(cfg);
    let mut ps = ParameterStore::new();
    model.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(seed));
    let held_out_initial = evaluate_autovc(manifest, Split::HeldOut, cfg, speakers, &ps)?;
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
        let mut epoch_mel = 0.0;
        for &i in &order {
            let u = &utts[i];
            let run = model.run(&ps, &u.mel, &u.z, true)?;
            let mel = if cfg.single_mel_loss {
                seq_mse(&u.mel, &run.post)?
            } else {
                seq_mse(&u.mel, &run.pre)? + seq_mse(&u.mel, &run.post)?
            };
            if !mel.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, utterance {}",
                    u.id
                )));
            }
            let d_pre = if cfg.single_mel_loss {
                Tensor::zeros(u.mel.shape())
            } else {
                seq_mse_grad(&u.mel, &run.pre, 1.0)
            };
            let d_post = seq_mse_grad(&u.mel, &run.post, 1.0);
            let mut grads = ps.zeros_like();
            model.backward(&ps, &mut grads, &run, &d_pre, &d_post)?;
            model.update_running(&mut ps, &run)?;
            opt.step(&mut ps, &grads)?;
            epoch_mel += mel;
        }
        log.push(format!("{epoch}\t{:.6}", epoch_mel / utts.len() as f64));
    }
    let held_out = if epochs == 0 {
        held_out_initial
    } else {
        evaluate_autovc(manifest, Split::HeldOut, cfg, speakers, &ps)?
    };
    Ok((
        ps,
        AutoVcTrainReport {
            log,
            held_out_initial,
            held_out,
        },
    ))
}

/// Mean self-reconstruction loss (final output only) over one split,
/// eval mode.
pub fn evaluate_autovc(
    manifest: &Manifest,
    split: Split,
    cfg: &AutoVcConfig,
    speakers: &SpeakerTable,
    ps: &ParameterStore<f32>,
) -> Result<f64> {
    cfg.validate()?;
    let utts = load_split(manifest, split, cfg, speakers)?;
    let model = AutoVcModel::new(cfg);
    let mut total = 0.0;
    for u in &utts {
        let run = model.run(ps, &u.mel, &u.z, false)?;
        total += seq_mse(&u.mel, &run.post)?;
    }
    Ok(total / utts.len() as f64)
}

/// Checks the analytic gradient of the reconstruction loss against
/// central finite differences in `f64`. The toy input spans `factor + 1`
/// frames so both a full repeat group and a truncated one are exercised.
pub fn gradcheck_autovc(cfg: &AutoVcConfig, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let model = AutoVcModel::new(cfg);
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
    let n = cfg.factor + 1;
    let mut y = Tensor::<f64>::zeros(&[n, cfg.bands]);
    for v in y.data_mut() {
        *v = uniform(&mut rng, -1.5, 1.5);
    }
    let z: Vec<f64> = (0..cfg.spk_dim)
        .map(|_| uniform(&mut rng, -0.8, 0.8))
        .collect();
    let loss_of = |p: &ParameterStore<f64>| -> Result<f64> {
        let run = model.run(p, &y, &z, true)?;
        Ok(if cfg.single_mel_loss {
            seq_mse(&y, &run.post)?
        } else {
            seq_mse(&y, &run.pre)? + seq_mse(&y, &run.post)?
        })
    };
    let grads_of = |p: &ParameterStore<f64>| -> Result<ParameterStore<f64>> {
        let run = model.run(p, &y, &z, true)?;
        let d_pre = if cfg.single_mel_loss {
            Tensor::zeros(y.shape())
        } else {
            seq_mse_grad(&y, &run.pre, 1.0)
        };
        let d_post = seq_mse_grad(&y, &run.post, 1.0);
        let mut grads = p.zeros_like();
        model.backward(p, &mut grads, &run, &d_pre, &d_post)?;
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
    use std::path::Path;

    fn tiny_cfg() -> AutoVcConfig {
        AutoVcConfig {
            bands: 5,
            latent: 2,
            factor: 2,
            proj_dim: 6,
            enc_conv_layers: 1,
            enc_filters: 6,
            enc_kernel: 3,
            enc_units: 3,
            dec_units: 8,
            postnet_layers: 2,
            postnet_filters: 4,
            postnet_kernel: 3,
            spk_dim: 3,
            single_mel_loss: false,
            lr: 0.05,
        }
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

    #[test]
    fn default_config_is_consistent() {
        let cfg = AutoVcConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.latent, 8);
        assert_eq!(cfg.factor, 8);
    }

    #[test]
    fn latent_length_matches_the_ceiling_law() {
        for (n, f, want) in [
            (1usize, 8usize, 1usize),
            (7, 8, 1),
            (8, 8, 1),
            (9, 8, 2),
            (16, 8, 2),
            (17, 8, 3),
            (5, 2, 3),
            (5, 1, 5),
        ] {
            assert_eq!(latent_length(n, f), want, "n={n} f={f}");
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn frobenius(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn sampling_backwards_are_true_adjoints() {
        // <D x, y> == <x, D^T y> pins the backward ops to the forwards
        // exactly, for lengths that do and do not divide the factor.
        for (n, f) in [(6usize, 2usize), (7, 2), (9, 4), (3, 5)] {
            let k = latent_length(n, f);
            let x = rand_tensor(&[n, 3], 100 + n as u64);
            let y = rand_tensor(&[k, 3], 200 + n as u64);
            let lhs = frobenius(&downsample(&x, f), &y);
            let rhs = frobenius(&x, &downsample_backward(&y, f, n));
            assert!((lhs - rhs).abs() < 1e-12, "downsample adjoint n={n} f={f}");

            let l = rand_tensor(&[k, 3], 300 + n as u64);
            let w = rand_tensor(&[n, 3], 400 + n as u64);
            let lhs = frobenius(&upsample(&l, f, n), &w);
            let rhs = frobenius(&l, &upsample_backward(&w, f, k));
            assert!((lhs - rhs).abs() < 1e-12, "upsample adjoint n={n} f={f}");
        }
    }

    #[test]
    fn latent_code_has_the_bottleneck_shape() {
        let cfg = tiny_cfg();
        let ps = init_autovc(&cfg, 7).unwrap();
        for n in [1usize, 4, 9] {
            let y = random_mel(n, cfg.bands, n as u64);
            let code = autovc_latent(&y, &ps, &cfg).unwrap();
            assert_eq!(code.rows(), latent_length(n, cfg.factor));
            assert_eq!(code.cols(), cfg.latent);
        }
        let y = random_mel(4, cfg.bands, 1);
        let a = autovc_latent(&y, &ps, &cfg).unwrap();
        let b = autovc_latent(&y, &ps, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn convert_preserves_length_and_checks_inputs() {
        let cfg = tiny_cfg();
        let ps = init_autovc(&cfg, 11).unwrap();
        let z = spk(vec![0.3, -0.2, 0.5]);
        for n in [1usize, 5, 23] {
            let y = random_mel(n, cfg.bands, n as u64);
            let out = convert_autovc(&y, &z, &ps, &cfg).unwrap();
            assert_eq!(out.num_frames(), n, "conversion changed the length");
            assert_eq!(out.frames.cols(), cfg.bands);
            let again = convert_autovc(&y, &z, &ps, &cfg).unwrap();
            assert_eq!(out.frames.data(), again.frames.data());
        }
        let y = random_mel(4, cfg.bands + 1, 1);
        assert!(convert_autovc(&y, &z, &ps, &cfg).is_err());
        let y = random_mel(4, cfg.bands, 1);
        assert!(convert_autovc(&y, &spk(vec![0.0; 2]), &ps, &cfg).is_err());
        let empty = MelSpectrogram {
            frames: Tensor::zeros(&[0, cfg.bands]),
            frame_shift: 0.0125,
            frame_length: 0.05,
        };
        assert!(convert_autovc(&empty, &z, &ps, &cfg).is_err());
    }

    #[test]
    fn reconstruction_gradcheck_on_a_toy_input() {
        let report = gradcheck_autovc(&tiny_cfg(), 42).unwrap();
        assert!(report.pass, "{}", report.render());
    }

    #[test]
    fn gradcheck_covers_post_only_loss_too() {
        let mut cfg = tiny_cfg();
        cfg.single_mel_loss = true;
        let report = gradcheck_autovc(&cfg, 7).unwrap();
        assert!(report.pass, "{}", report.render());
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

    fn small_cfg() -> AutoVcConfig {
        AutoVcConfig {
            bands: 16,
            latent: 4,
            factor: 4,
            proj_dim: 16,
            enc_conv_layers: 1,
            enc_filters: 16,
            enc_kernel: 5,
            enc_units: 8,
            dec_units: 32,
            postnet_layers: 2,
            postnet_filters: 16,
            postnet_kernel: 5,
            spk_dim: 4,
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

    #[test]
    fn self_reconstruction_training_descends_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = small_corpus(dir.path(), 77);
        let cfg = small_cfg();
        let speakers = handmade_speakers(&manifest, cfg.spk_dim);

        let (ps0, rep0) = train_autovc(&manifest, &cfg, &speakers, 0, 5).unwrap();
        assert!(rep0.log.is_empty());
        assert_eq!(
            ps0.to_bytes(),
            init_autovc(&cfg, 5).unwrap().to_bytes(),
            "zero-epoch training must return the seeded initialization"
        );
        assert_eq!(rep0.held_out, rep0.held_out_initial);

        let (_, report) = train_autovc(&manifest, &cfg, &speakers, 4, 5).unwrap();
        assert_eq!(report.log.len(), 4);
        let loss_at = |line: &str| -> f64 { line.split('\t').nth(1).unwrap().parse().unwrap() };
        let first = loss_at(&report.log[0]);
        let last = loss_at(&report.log[3]);
        assert!(last < first, "loss failed to descend: {first} -> {last}");
        assert!(
            report.held_out < report.held_out_initial,
            "held-out reconstruction did not improve: {} -> {}",
            report.held_out_initial,
            report.held_out
        );

        let (ps_a, rep_a) = train_autovc(&manifest, &cfg, &speakers, 2, 9).unwrap();
        let (ps_b, rep_b) = train_autovc(&manifest, &cfg, &speakers, 2, 9).unwrap();
        assert_eq!(ps_a.to_bytes(), ps_b.to_bytes());
        assert_eq!(rep_a.log, rep_b.log);
    }
}
