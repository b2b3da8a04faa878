//! Corpus directory layout and manifest handling.
//!
//! A corpus directory holds `manifest.tsv`, `params.ttlv` (generator
//! tables plus speakers) and `feats/{id}.{mel,f0}.ttlv`. Everything is a
//! pure function of the corpus seed, so any record can be regenerated
//! from the manifest alone.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndiff::{save_feature, FeatureRole, ParameterStore, Tensor};

use super::{
    params_from_store, params_to_store, seeded_distinct_speakers, synth_utterance, utterance_seed,
    GenParams, SpeakerParams, Utterance,
};


#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    HeldOut,
    UnseenSpeaker,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldOut => "held_out",
            Split::UnseenSpeaker => "unseen_speaker",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "held_out" => Ok(Split::HeldOut),
            "unseen_speaker" => Ok(Split::UnseenSpeaker),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub speaker_id: String,
    pub split: Split,
    pub text: String,
    pub mel_path: PathBuf,
    pub f0_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for r in &self.records {
            set.insert(r.speaker_id.clone());
        }
        set.into_iter().collect()
    }

    pub fn mel_file(&self, r: &ManifestRecord) -> PathBuf {
        self.root.join(&r.mel_path)
    }

    pub fn f0_file(&self, r: &ManifestRecord) -> PathBuf {
        self.root.join(&r.f0_path)
    }

    pub fn params_file(&self) -> PathBuf {
        self.root.join("params.ttlv")
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join("manifest.tsv");
        let mut out = String::from("id\tspeaker\tsplit\ttext\tmel\tf0\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.speaker_id,
                r.split,
                r.text,
                r.mel_path.display(),
                r.f0_path.display()
            ));
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Manifest> {
        let path = root.join("manifest.tsv");
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = body.lines();
        match lines.next() {
            Some(h) if h.starts_with("id\t") => {}
            _ => return Err(Error::Format(format!("{}: missing manifest header", path.display()))),
        }
        let mut records = Vec::new();
        let mut ids = BTreeSet::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(Error::Format(format!(
                    "{}:{}: expected 6 tab-separated fields, got {}",
                    path.display(),
                    lineno + 2,
                    cols.len()
                )));
            }
            if !ids.insert(cols[0].to_string()) {
                return Err(Error::Format(format!("duplicate utterance id {:?}", cols[0])));
            }
            records.push(ManifestRecord {
                id: cols[0].to_string(),
                speaker_id: cols[1].to_string(),
                split: Split::parse(cols[2])?,
                text: cols[3].to_string(),
                mel_path: PathBuf::from(cols[4]),
                f0_path: PathBuf::from(cols[5]),
            });
        }
        let m = Manifest {
            root: root.to_path_buf(),
            records,
        };
        m.check_split_consistency()?;
        Ok(m)
    }

    /// Unseen speakers must not appear in train or held_out rows.
    fn check_split_consistency(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut unseen = BTreeSet::new();
        for r in &self.records {
            match r.split {
                Split::UnseenSpeaker => unseen.insert(r.speaker_id.clone()),
                _ => seen.insert(r.speaker_id.clone()),
            };
        }
        if let Some(bad) = seen.intersection(&unseen).next() {
            return Err(Error::Format(format!(
                "speaker {bad:?} appears in both seen and unseen splits"
            )));
        }
        Ok(())
    }

    /// Loads generator tables and speaker params saved next to the manifest.
    pub fn load_params(&self) -> Result<(GenParams, Vec<SpeakerParams>, u64)> {
        let ps: ParameterStore<f32> = ParameterStore::load(&self.params_file())?;
        params_from_store(&ps)
    }

    /// Regenerates an utterance (with ground-truth alignment) from its
    /// manifest row; bit-identical to what `make_corpus` wrote.
    pub fn regenerate(
        &self,
        record: &ManifestRecord,
        gen: &GenParams,
        speakers: &[SpeakerParams],
        corpus_seed: u64,
    ) -> Result<Utterance> {
        let spk = speakers
            .iter()
            .find(|s| s.speaker_id == record.speaker_id)
            .ok_or_else(|| {
                Error::Format(format!("speaker {:?} absent from params file", record.speaker_id))
            })?;
        let mut u = synth_utterance(&record.text, spk, gen, utterance_seed(corpus_seed, &record.id))?;
        u.id = record.id.clone();
        Ok(u)
    }
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub n_unseen: usize,
    pub utts_per_speaker: usize,
    pub held_out_per_speaker: usize,
    pub bands: usize,
    pub noise_sigma: f32,
    pub text_len: (usize, usize),
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 8,
            n_unseen: 4,
            utts_per_speaker: 20,
            held_out_per_speaker: 3,
            bands: 80,
            noise_sigma: 0.05,
            text_len: (8, 14),
            seed: 1234,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.n_speakers < 4 {
            return Err(Error::InvalidArg(format!(
                "need at least 4 speakers, got {}",
                self.n_speakers
            )));
        }
        if self.n_unseen < 2 || self.n_unseen >= self.n_speakers {
            return Err(Error::InvalidArg(format!(
                "need at least 2 unseen speakers and at least one seen, got {} of {}",
                self.n_unseen, self.n_speakers
            )));
        }
        if self.held_out_per_speaker >= self.utts_per_speaker {
            return Err(Error::InvalidArg(
                "held_out_per_speaker must leave training utterances".into(),
            ));
        }
        if self.text_len.0 < 2 || self.text_len.0 > self.text_len.1 {
            return Err(Error::InvalidArg(format!(
                "bad text length range {:?}",
                self.text_len
            )));
        }
        Ok(())
    }
}

fn seeded_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..=7);
    (0..len)
        .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
        .collect()
}

fn seeded_text(rng: &mut ChaCha8Rng, len_range: (usize, usize)) -> String {
    loop {
        let words = rng.gen_range(1..=3);
        let text: String = (0..words)
            .map(|_| seeded_word(rng))
            .collect::<Vec<_>>()
            .join(" ");
        if text.len() >= len_range.0 && text.len() <= len_range.1 {
            return text;
        }
    }
}

/// Generates a full corpus directory under `root`.
pub fn make_corpus(root: &Path, cfg: &CorpusConfig) -> Result<Manifest> {
    cfg.validate()?;
    let feats = root.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;

    let gen = GenParams::seeded(cfg.bands, cfg.noise_sigma, cfg.seed);
    let mut spk_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ spk_seed_mix());
    let speakers = seeded_distinct_speakers(cfg.n_speakers, &gen, &mut spk_rng);
    params_to_store(&gen, &speakers, cfg.seed)
        .save(&root.join("params.ttlv"))?;

    let mut text_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7357_7357_7357_7357);
    let n_seen = cfg.n_speakers - cfg.n_unseen;
    let mut records = Vec::new();
    for (si, spk) in speakers.iter().enumerate() {
        let unseen = si >= n_seen;
        for j in 0..cfg.utts_per_speaker {
            let id = format!("{}_u{j:03}", spk.speaker_id);
            let text = seeded_text(&mut text_rng, cfg.text_len);
            let mut u = synth_utterance(&text, spk, &gen, utterance_seed(cfg.seed, &id))?;
            u.id = id.clone();
            let mel_path = PathBuf::from(format!("feats/{id}.mel.ttlv"));
            let f0_path = PathBuf::from(format!("feats/{id}.f0.ttlv"));
            save_feature(&root.join(&mel_path), FeatureRole::Mel, &u.mel.frames)?;
            let n = u.f0.values.len();
            save_feature(
                &root.join(&f0_path),
                FeatureRole::F0,
                &Tensor::from_vec(&[n], u.f0.values.clone())?,
            )?;
            let split = if unseen {
                Split::UnseenSpeaker
            } else if j >= cfg.utts_per_speaker - cfg.held_out_per_speaker {
                Split::HeldOut
            } else {
                Split::Train
            };
            records.push(ManifestRecord {
                id,
                speaker_id: spk.speaker_id.clone(),
                split,
                text,
                mel_path,
                f0_path,
            });
        }
    }
    let manifest = Manifest {
        root: root.to_path_buf(),
        records,
    };
    manifest.save()?;
    Ok(manifest)
}

const fn spk_seed_mix() -> u64 {
    0x1f3d_5b79_9b57_d31f
}
