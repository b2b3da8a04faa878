//! Speaker encoder: stacked LSTMs whose final state is projected to a
//! unit-norm embedding, trained with a softmax speaker-classification
//! head that is dropped after training. Includes verification EER and a
//! PCA projection for inspection.

pub mod pca;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Manifest, Split};
use crate::error::{Error, Result};
use crate::ndiff::{
    load_feature, softmax, FeatureRole, Linear, Lstm, LstmStepCache, ParameterStore, Sgd,
    SgdConfig, Tensor,
};
use crate::sigproc::MelSpectrogram;

pub use pca::project_2d;

#[derive(Debug, Clone)]
pub struct SpkEncConfig {
    pub layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Minimum frames per embedding segment; shorter inputs are padded
    /// by repetition.
    pub window: usize,
    pub lr: f64,
}

impl Default for SpkEncConfig {
    fn default() -> Self {
        SpkEncConfig {
            layers: 2,
            hidden: 32,
            embed_dim: 16,
            window: 40,
            lr: 0.05,
        }
    }
}

impl SpkEncConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.embed_dim == 0 || self.window == 0 {
            return Err(Error::Config(
                "speaker encoder sizes must all be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn lstms(&self, bands: usize) -> Vec<Lstm> {
        (0..self.layers)
            .map(|i| {
                let input = if i == 0 { bands } else { self.hidden };
                Lstm::new(format!("spkenc.lstm{i}"), input, self.hidden)
            })
            .collect()
    }

    fn proj(&self) -> Linear {
        Linear::new("spkenc.proj", self.hidden, self.embed_dim)
    }

    /// Fresh encoder parameters (no classification head).
    pub fn init(&self, bands: usize, seed: u64) -> Result<ParameterStore<f32>> {
        self.validate()?;
        let mut ps = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in self.lstms(bands) {
            l.init(&mut ps, &mut rng);
        }
        self.proj().init(&mut ps, &mut rng);
        Ok(ps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f32>,
    pub speaker_id: Option<String>,
}

impl SpeakerEmbedding {
    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        cosine(&self.vector, &other.vector)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-30)
}

/// Repeats the input frames until at least `window` rows are present.
fn pad_by_repetition(frames: &Tensor<f32>, window: usize) -> Tensor<f32> {
    let n = frames.rows();
    if n >= window {
        return frames.clone();
    }
    let cols = frames.cols();
    let mut out = Tensor::zeros(&[window, cols]);
    for t in 0..window {
        out.row_mut(t).copy_from_slice(frames.row(t % n));
    }
    out
}

struct EmbedCache {
    input: Tensor<f32>,
    layer_io: Vec<(Tensor<f32>, Vec<LstmStepCache<f32>>)>,
    final_state: Vec<f32>,
    norm: f64,
    z: Vec<f32>,
}

fn embed_forward(
    frames: &Tensor<f32>,
    ps: &ParameterStore<f32>,
    cfg: &SpkEncConfig,
) -> Result<EmbedCache> {
    if frames.rows() == 0 {
        return Err(Error::InvalidArg("cannot embed an empty mel input".into()));
    }
    let input = pad_by_repetition(frames, cfg.window);
    let mut layer_io = Vec::with_capacity(cfg.layers);
    let mut x = input.clone();
    for l in cfg.lstms(input.cols()) {
        let (y, cache) = l.forward_seq(ps, &x)?;
        layer_io.push((x, cache));
        x = y;
    }
    let final_state = x.row(x.rows() - 1).to_vec();
    let raw = cfg.proj().forward_vec(ps, &final_state)?;
    let norm = raw.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Numeric(
            "projection collapsed to the zero vector".into(),
        ));
    }
    let z = raw.iter().map(|&v| (v as f64 / norm) as f32).collect();
    Ok(EmbedCache {
        input,
        layer_io,
        final_state,
        norm,
        z,
    })
}

/// Gradient of the embedding output back through normalization,
/// projection and the LSTM stack; accumulates into `grads`.
fn embed_backward(
    cache: &EmbedCache,
    dz: &[f32],
    ps: &ParameterStore<f32>,
    grads: &mut ParameterStore<f32>,
    cfg: &SpkEncConfig,
) -> Result<()> {
    // z = raw/|raw|: draw = (dz - z (z·dz)) / |raw|
    let zdot: f64 = cache
        .z
        .iter()
        .zip(dz)
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum();
    let draw: Vec<f32> = dz
        .iter()
        .zip(&cache.z)
        .map(|(&d, &zv)| ((d as f64 - zv as f64 * zdot) / cache.norm) as f32)
        .collect();
    let dstate = cfg
        .proj()
        .backward_vec(ps, grads, &cache.final_state, &draw)?;
    let lstms = cfg.lstms(cache.input.cols());
    let mut dy = Tensor::zeros(&[cache.input.rows(), cfg.hidden]);
    dy.row_mut(cache.input.rows() - 1).copy_from_slice(&dstate);
    for (l, (x, lcache)) in lstms.iter().zip(&cache.layer_io).rev() {
        let dx = l.backward_seq(ps, grads, lcache, &dy)?;
        let _ = x;
        dy = dx;
    }
    Ok(())
}

/// Embeds one mel input: final recurrent state, projected and
/// L2-normalized.
pub fn embed(
    m: &MelSpectrogram,
    ps: &ParameterStore<f32>,
    cfg: &SpkEncConfig,
) -> Result<SpeakerEmbedding> {
    let cache = embed_forward(&m.frames, ps, cfg)?;
    Ok(SpeakerEmbedding {
        vector: cache.z,
        speaker_id: None,
    })
}

#[derive(Debug, Clone)]
pub struct SpkTrainReport {
    /// One `epoch<TAB>loss<TAB>accuracy` line per epoch.
    pub log: Vec<String>,
    pub final_accuracy: f64,
}

/// Trains the encoder on the manifest's train split with a softmax
/// speaker-classification head; the head is dropped from the returned
/// store. `epochs = 0` returns the seeded initialization unchanged.
pub fn train_spkenc(
    manifest: &Manifest,
    cfg: &SpkEncConfig,
    epochs: usize,
    seed: u64,
) -> Result<(ParameterStore<f32>, SpkTrainReport)> {
    cfg.validate()?;
    let records: Vec<_> = manifest.records_in(Split::Train).collect();
    if records.is_empty() {
        return Err(Error::InvalidArg("manifest has no train records".into()));
    }
    let mut speakers: Vec<String> = records.iter().map(|r| r.speaker_id.clone()).collect();
    speakers.sort();
    speakers.dedup();
    if speakers.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "need at least 2 training speakers, got {}",
            speakers.len()
        )));
    }
    let class_of = |id: &str| speakers.iter().position(|s| s == id).expect("train speaker");

    let mut mels = Vec::with_capacity(records.len());
    for r in &records {
        let frames = load_feature(&manifest.mel_file(r), FeatureRole::Mel)?;
        mels.push(frames);
    }
    let bands = mels[0].cols();

    let mut ps = cfg.init(bands, seed)?;
    let head = Linear::new("spkenc.classifier", cfg.embed_dim, speakers.len());
    let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5_5f1e);
    head.init(&mut ps, &mut head_rng);

    let mut opt = Sgd::new(SgdConfig {
        lr: cfg.lr,
        ..SgdConfig::default()
    });
    let mut log = Vec::with_capacity(epochs);
    let mut final_accuracy = 0.0;
    let mut order: Vec<usize> = (0..records.len()).collect();
    for epoch in 0..epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for &k in &order {
            let target = class_of(&records[k].speaker_id);
            let cache = embed_forward(&mels[k], &ps, cfg)?;
            let logits = head.forward_vec(&ps, &cache.z)?;
            let probs = softmax(&logits);
            loss_sum += -(probs[target].max(1e-12) as f64).ln();
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .map(|(i, _)| i)
                .expect("nonempty");
            if pred == target {
                correct += 1;
            }
            let mut dlogits: Vec<f32> = probs.clone();
            dlogits[target] -= 1.0;
            let mut grads = ps.zeros_like();
            let dz = head.backward_vec(&ps, &mut grads, &cache.z, &dlogits)?;
            embed_backward(&cache, &dz, &ps, &mut grads, cfg)?;
            opt.step(&mut ps, &grads)?;
        }
        let loss = loss_sum / records.len() as f64;
        final_accuracy = correct as f64 / records.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "speaker encoder loss became non-finite at epoch {epoch}"
            )));
        }
        log.push(format!("{epoch}\t{loss:.6}\t{final_accuracy:.4}"));
    }
    for name in head.param_names() {
        ps.remove(&name);
    }
    Ok((ps, SpkTrainReport { log, final_accuracy }))
}

/// Equal error rate over verification trials: sweeps an accept
/// threshold over the cosine scores and returns the smallest balanced
/// error (false-accept + false-reject)/2, which sits where the two
/// interpolated rates cross.
pub fn verification_eer(pairs: &[(SpeakerEmbedding, SpeakerEmbedding, bool)]) -> Result<f64> {
    let scores: Vec<(f64, bool)> = pairs
        .iter()
        .map(|(a, b, same)| (a.cosine(b), *same))
        .collect();
    eer_from_scores(&scores)
}

/// EER on raw (score, same-speaker) trials; higher scores mean more
/// similar.
pub fn eer_from_scores(scores: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|(_, s)| *s).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArg(format!(
            "need at least one positive and one negative trial, got {n_pos} and {n_neg}"
        )));
    }
    let mut thresholds: Vec<f64> = scores.iter().map(|(v, _)| *v).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite score"));
    thresholds.dedup();
    let mut best = 1.0f64;
    // accept-all and reject-all endpoints plus every score as threshold
    let mut eval = |t: f64, strict: bool| {
        let mut fa = 0usize;
        let mut fr = 0usize;
        for &(v, same) in scores {
            let accept = if strict { v > t } else { v >= t };
            match (accept, same) {
                (true, false) => fa += 1,
                (false, true) => fr += 1,
                _ => {}
            }
        }
        let balanced = 0.5 * (fa as f64 / n_neg as f64 + fr as f64 / n_pos as f64);
        if balanced < best {
            best = balanced;
        }
    };
    for &t in &thresholds {
        eval(t, false);
        eval(t, true);
    }
    Ok(best)
}

/// Builds labeled verification trials from embeddings: all pairs.
pub fn all_pairs_trials(embeddings: &[SpeakerEmbedding]) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for i in 0..embeddings.len() {
        for j in (i + 1)..embeddings.len() {
            let same = match (&embeddings[i].speaker_id, &embeddings[j].speaker_id) {
                (Some(a), Some(b)) => a == b,
                _ => continue,
            };
            out.push((embeddings[i].cosine(&embeddings[j]), same));
        }
    }
    out
}

/// One fixed embedding per speaker: the renormalized mean of that
/// speaker's per-utterance embeddings. Synthesis and conversion condition
/// on these vectors.
#[derive(Debug, Clone)]
pub struct SpeakerTable {
    entries: std::collections::BTreeMap<String, Vec<f32>>,
}

impl SpeakerTable {
    /// Embeds every utterance in the manifest (all splits, so unseen
    /// speakers are usable as conversion targets) and averages per
    /// speaker.
    pub fn build(
        manifest: &Manifest,
        ps: &ParameterStore<f32>,
        cfg: &SpkEncConfig,
    ) -> Result<SpeakerTable> {
        let mut sums: std::collections::BTreeMap<String, (Vec<f64>, usize)> =
            std::collections::BTreeMap::new();
        for r in &manifest.records {
            let frames = load_feature(&manifest.mel_file(r), FeatureRole::Mel)?;
            let mel = MelSpectrogram {
                frames,
                frame_shift: 0.0,
                frame_length: 0.0,
            };
            let e = embed(&mel, ps, cfg)?;
            let slot = sums
                .entry(r.speaker_id.clone())
                .or_insert_with(|| (vec![0.0; cfg.embed_dim], 0));
            for (s, &v) in slot.0.iter_mut().zip(&e.vector) {
                *s += v as f64;
            }
            slot.1 += 1;
        }
        let mut entries = std::collections::BTreeMap::new();
        for (speaker, (sum, count)) in sums {
            let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            entries.insert(speaker, mean.iter().map(|v| (v / norm) as f32).collect());
        }
        Ok(SpeakerTable { entries })
    }

    pub fn get(&self, speaker: &str) -> Result<&[f32]> {
        self.entries
            .get(speaker)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::InvalidArg(format!("no embedding for speaker {speaker:?}")))
    }

    pub fn embedding(&self, speaker: &str) -> Result<SpeakerEmbedding> {
        Ok(SpeakerEmbedding {
            vector: self.get(speaker)?.to_vec(),
            speaker_id: Some(speaker.to_string()),
        })
    }

    pub fn insert(&mut self, speaker: impl Into<String>, vector: Vec<f32>) {
        self.entries.insert(speaker.into(), vector);
    }

    pub fn speakers(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.values().next().map_or(0, |v| v.len())
    }

    pub fn to_store(&self) -> ParameterStore<f32> {
        let mut ps = ParameterStore::new();
        for (speaker, v) in &self.entries {
            ps.insert(
                speaker.clone(),
                Tensor::from_vec(&[v.len()], v.clone()).expect("embedding shape"),
            );
        }
        ps
    }

    pub fn from_store(ps: &ParameterStore<f32>) -> SpeakerTable {
        let mut entries = std::collections::BTreeMap::new();
        for (name, t) in ps.iter() {
            entries.insert(name.to_string(), t.data().to_vec());
        }
        SpeakerTable { entries }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_store().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<SpeakerTable> {
        Ok(SpeakerTable::from_store(&ParameterStore::load(path)?))
    }
}
