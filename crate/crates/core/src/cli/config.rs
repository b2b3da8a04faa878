//! Run configuration: one TOML file covering every stage of the
//! pipeline. Unknown keys are rejected so a typo cannot silently fall
//! back to a default, and the effective config (file plus command-line
//! overrides) is echoed into the run directory so any stage can be
//! re-run from the echo alone.

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::spkenc::SpkEncConfig;
use crate::taco::TtsConfig;
use crate::vc::{AutoVcConfig, VcConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; every stage derives its randomness from this.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub spkenc: SpkEncSection,
    pub tts: TtsSection,
    pub vc: VcSection,
    pub autovc: AutoVcSection,
    pub eval: EvalSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1234,
            corpus: CorpusSection::default(),
            spkenc: SpkEncSection::default(),
            tts: TtsSection::default(),
            vc: VcSection::default(),
            autovc: AutoVcSection::default(),
            eval: EvalSection::default(),
            io: IoSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_speakers: usize,
    pub n_unseen: usize,
    pub utts_per_speaker: usize,
    pub held_out_per_speaker: usize,
    pub bands: usize,
    pub noise_sigma: f32,
    pub text_len_min: usize,
    pub text_len_max: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        CorpusSection {
            n_speakers: c.n_speakers,
            n_unseen: c.n_unseen,
            utts_per_speaker: c.utts_per_speaker,
            held_out_per_speaker: c.held_out_per_speaker,
            bands: c.bands,
            noise_sigma: c.noise_sigma,
            text_len_min: c.text_len.0,
            text_len_max: c.text_len.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpkEncSection {
    pub layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub window: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for SpkEncSection {
    fn default() -> Self {
        let c = SpkEncConfig::default();
        SpkEncSection {
            layers: c.layers,
            hidden: c.hidden,
            embed_dim: c.embed_dim,
            window: c.window,
            lr: c.lr,
            epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtsSection {
    pub char_embed: usize,
    pub enc_conv_layers: usize,
    pub enc_filters: usize,
    pub enc_kernel: usize,
    pub enc_units: usize,
    pub attn_dim: usize,
    pub loc_filters: usize,
    pub loc_kernel: usize,
    pub prenet_units: usize,
    pub dec_units: usize,
    pub postnet_layers: usize,
    pub postnet_filters: usize,
    pub postnet_kernel: usize,
    pub stop_threshold: f64,
    pub single_mel_loss: bool,
    pub lr: f64,
    pub epochs: usize,
    /// Frame cap for free-running synthesis.
    pub max_frames: usize,
    /// Attention-entropy level above which an extracted frame counts as
    /// diffuse in the context report.
    pub entropy_threshold: f64,
}

impl Default for TtsSection {
    fn default() -> Self {
        let c = TtsConfig::default();
        TtsSection {
            char_embed: c.char_embed,
            enc_conv_layers: c.enc_conv_layers,
            enc_filters: c.enc_filters,
            enc_kernel: c.enc_kernel,
            enc_units: c.enc_units,
            attn_dim: c.attn_dim,
            loc_filters: c.loc_filters,
            loc_kernel: c.loc_kernel,
            prenet_units: c.prenet_units,
            dec_units: c.dec_units,
            postnet_layers: c.postnet_layers,
            postnet_filters: c.postnet_filters,
            postnet_kernel: c.postnet_kernel,
            stop_threshold: c.stop_threshold,
            single_mel_loss: c.single_mel_loss,
            lr: c.lr,
            epochs: 40,
            max_frames: 400,
            entropy_threshold: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VcSection {
    pub enc_conv_layers: usize,
    pub enc_filters: usize,
    pub enc_kernel: usize,
    pub proj_dim: usize,
    pub freeze_decoder: bool,
    pub w_cont: f64,
    pub w_mel: f64,
    pub single_mel_loss: bool,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for VcSection {
    fn default() -> Self {
        let c = VcConfig::default();
        VcSection {
            enc_conv_layers: c.enc_conv_layers,
            enc_filters: c.enc_filters,
            enc_kernel: c.enc_kernel,
            proj_dim: c.proj_dim,
            freeze_decoder: c.freeze_decoder,
            w_cont: c.w_cont,
            w_mel: c.w_mel,
            single_mel_loss: c.single_mel_loss,
            lr: c.lr,
            epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoVcSection {
    pub latent: usize,
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
    pub single_mel_loss: bool,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for AutoVcSection {
    fn default() -> Self {
        let c = AutoVcConfig::default();
        AutoVcSection {
            latent: c.latent,
            factor: c.factor,
            proj_dim: c.proj_dim,
            enc_conv_layers: c.enc_conv_layers,
            enc_filters: c.enc_filters,
            enc_kernel: c.enc_kernel,
            enc_units: c.enc_units,
            dec_units: c.dec_units,
            postnet_layers: c.postnet_layers,
            postnet_filters: c.postnet_filters,
            postnet_kernel: c.postnet_kernel,
            single_mel_loss: c.single_mel_loss,
            lr: c.lr,
            epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Cepstral order used for MCD and alignment.
    pub mcc_order: usize,
    pub skip_unvoiced_converted: bool,
    /// Source utterances evaluated per conversion direction; 0 means all.
    pub utts_per_pair: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let c = EvalConfig::default();
        EvalSection {
            mcc_order: c.mcc_order,
            skip_unvoiced_converted: c.skip_unvoiced_converted,
            utts_per_pair: 5,
        }
    }
}

/// Artifact locations, each resolved against the run directory unless
/// absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub corpus_dir: String,
    pub checkpoints_dir: String,
    pub contexts_dir: String,
    pub converted_dir: String,
    pub reports_dir: String,
    pub plots_dir: String,
    pub logs_dir: String,
    pub synth_dir: String,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            corpus_dir: "corpus".into(),
            checkpoints_dir: "checkpoints".into(),
            contexts_dir: "contexts".into(),
            converted_dir: "converted".into(),
            reports_dir: "reports".into(),
            plots_dir: "plots".into(),
            logs_dir: "logs".into(),
            synth_dir: "synth".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(body: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(body).map_err(|e| Error::Config(format!("config: {}", one_line(&e.to_string()))))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Widths shared between sections are stated once: mel bands come
    /// from the corpus and the speaker dimension from the speaker
    /// encoder, so the stages cannot disagree.
    pub fn corpus_config(&self) -> CorpusConfig {
        let c = &self.corpus;
        CorpusConfig {
            n_speakers: c.n_speakers,
            n_unseen: c.n_unseen,
            utts_per_speaker: c.utts_per_speaker,
            held_out_per_speaker: c.held_out_per_speaker,
            bands: c.bands,
            noise_sigma: c.noise_sigma,
            text_len: (c.text_len_min, c.text_len_max),
            seed: self.seed,
        }
    }

    pub fn spkenc_config(&self) -> SpkEncConfig {
        let c = &self.spkenc;
        SpkEncConfig {
            layers: c.layers,
            hidden: c.hidden,
            embed_dim: c.embed_dim,
            window: c.window,
            lr: c.lr,
        }
    }

    pub fn tts_config(&self) -> TtsConfig {
        let c = &self.tts;
        TtsConfig {
            char_embed: c.char_embed,
            enc_conv_layers: c.enc_conv_layers,
            enc_filters: c.enc_filters,
            enc_kernel: c.enc_kernel,
            enc_units: c.enc_units,
            attn_dim: c.attn_dim,
            loc_filters: c.loc_filters,
            loc_kernel: c.loc_kernel,
            prenet_units: c.prenet_units,
            dec_units: c.dec_units,
            bands: self.corpus.bands,
            postnet_layers: c.postnet_layers,
            postnet_filters: c.postnet_filters,
            postnet_kernel: c.postnet_kernel,
            spk_dim: self.spkenc.embed_dim,
            stop_threshold: c.stop_threshold,
            single_mel_loss: c.single_mel_loss,
            lr: c.lr,
        }
    }

    /// The conversion model is pinned to the synthesis model wherever the
    /// transfer demands it (decoder block, encoder output width); only
    /// the remaining knobs are taken from the `vc` section.
    pub fn vc_config(&self) -> VcConfig {
        let mut cfg = VcConfig::from_tts(&self.tts_config());
        let c = &self.vc;
        cfg.enc_conv_layers = c.enc_conv_layers;
        cfg.enc_filters = c.enc_filters;
        cfg.enc_kernel = c.enc_kernel;
        cfg.proj_dim = c.proj_dim;
        cfg.freeze_decoder = c.freeze_decoder;
        cfg.w_cont = c.w_cont;
        cfg.w_mel = c.w_mel;
        cfg.single_mel_loss = c.single_mel_loss;
        cfg.lr = c.lr;
        cfg
    }

    pub fn autovc_config(&self) -> AutoVcConfig {
        let c = &self.autovc;
        AutoVcConfig {
            bands: self.corpus.bands,
            latent: c.latent,
            factor: c.factor,
            proj_dim: c.proj_dim,
            enc_conv_layers: c.enc_conv_layers,
            enc_filters: c.enc_filters,
            enc_kernel: c.enc_kernel,
            enc_units: c.enc_units,
            dec_units: c.dec_units,
            postnet_layers: c.postnet_layers,
            postnet_filters: c.postnet_filters,
            postnet_kernel: c.postnet_kernel,
            spk_dim: self.spkenc.embed_dim,
            single_mel_loss: c.single_mel_loss,
            lr: c.lr,
        }
    }

    pub fn eval_config(&self, model: &str) -> EvalConfig {
        EvalConfig {
            model: model.into(),
            mcc_order: self.eval.mcc_order,
            skip_unvoiced_converted: self.eval.skip_unvoiced_converted,
            ..EvalConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus_config().validate()?;
        self.spkenc_config().validate()?;
        self.tts_config().validate()?;
        self.vc_config().validate()?;
        self.autovc_config().validate()?;
        if self.eval.mcc_order == 0 {
            return Err(Error::Config("eval.mcc_order must be positive".into()));
        }
        if self.eval.mcc_order >= self.corpus.bands {
            return Err(Error::Config(format!(
                "eval.mcc_order {} must be below corpus.bands {}",
                self.eval.mcc_order, self.corpus.bands
            )));
        }
        if self.tts.max_frames == 0 {
            return Err(Error::Config("tts.max_frames must be positive".into()));
        }
        if !self.tts.entropy_threshold.is_finite() {
            return Err(Error::Config("tts.entropy_threshold must be finite".into()));
        }
        Ok(())
    }
}

pub(crate) fn one_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_module_defaults() {
        let cfg = RunConfig::default();
        let corpus = cfg.corpus_config();
        let want = CorpusConfig {
            seed: cfg.seed,
            ..CorpusConfig::default()
        };
        assert_eq!(format!("{corpus:?}"), format!("{want:?}"));
        assert_eq!(format!("{:?}", cfg.spkenc_config()), format!("{:?}", SpkEncConfig::default()));
        assert_eq!(format!("{:?}", cfg.tts_config()), format!("{:?}", TtsConfig::default()));
        assert_eq!(format!("{:?}", cfg.vc_config()), format!("{:?}", VcConfig::default()));
        assert_eq!(format!("{:?}", cfg.autovc_config()), format!("{:?}", AutoVcConfig::default()));
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_is_exact() {
        let cfg = RunConfig::default();
        let body = cfg.to_toml();
        let back = RunConfig::from_toml(&body).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(body, back.to_toml());
    }

    #[test]
    fn partial_file_fills_in_defaults() {
        let cfg = RunConfig::from_toml(
            "seed = 7\n\n[corpus]\nn_speakers = 6\nbands = 24\n\n[tts]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.corpus.n_speakers, 6);
        assert_eq!(cfg.corpus.bands, 24);
        assert_eq!(cfg.corpus.n_unseen, CorpusSection::default().n_unseen);
        assert_eq!(cfg.tts.epochs, 3);
        assert_eq!(cfg.tts.char_embed, TtsSection::default().char_embed);
        assert_eq!(cfg.tts_config().bands, 24);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[tts]\nchar_embd = 32\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("char_embd"), "{msg}");
        assert!(!msg.contains('\n'), "{msg}");
        assert!(RunConfig::from_toml("verbose = true\n").is_err());
    }

    #[test]
    fn shared_widths_flow_from_their_owners() {
        let cfg = RunConfig::from_toml("[corpus]\nbands = 32\n\n[spkenc]\nembed_dim = 8\n").unwrap();
        assert_eq!(cfg.tts_config().bands, 32);
        assert_eq!(cfg.tts_config().spk_dim, 8);
        assert_eq!(cfg.vc_config().bands, 32);
        assert_eq!(cfg.autovc_config().spk_dim, 8);
        assert_eq!(cfg.vc_config().dec.spk_dim, 8);
    }

    #[test]
    fn bad_values_are_reported_at_validation() {
        let err = RunConfig::from_toml("[corpus]\nn_speakers = 2\n").unwrap_err();
        assert!(err.to_string().contains("speakers"), "{}", err);
        let err = RunConfig::from_toml("[eval]\nmcc_order = 90\n").unwrap_err();
        assert!(err.to_string().contains("mcc_order"), "{}", err);
    }
}
