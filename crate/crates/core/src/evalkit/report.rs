//! Report generation over groups of conversion pairs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ndiff::{load_feature, FeatureRole};
use crate::sigproc::{
    estimate_f0, load_wav, mel_spectrogram, mel_to_mcc, F0Config, F0Track, MccSequence, MelConfig,
    MelSpectrogram,
};

use super::{dtw_align, f0_rmse_with, mcd};

/// One side of an evaluation pair: either a wav file to analyze or
/// precomputed mel (and optionally F0) feature files.
#[derive(Debug, Clone)]
pub enum FeatureInput {
    Wav(PathBuf),
    Mel { mel: PathBuf, f0: Option<PathBuf> },
}

#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub group: String,
    pub converted: FeatureInput,
    pub reference: FeatureInput,
    /// Unconverted source features; when present the report also carries
    /// a "source" model row measuring the no-conversion baseline.
    pub source: Option<FeatureInput>,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub model: String,
    pub mcc_order: usize,
    pub mel: MelConfig,
    pub f0: F0Config,
    pub skip_unvoiced_converted: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            model: "model".into(),
            mcc_order: 25,
            mel: MelConfig::default(),
            f0: F0Config::default(),
            skip_unvoiced_converted: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairMetrics {
    pub id: String,
    pub group: String,
    pub model: String,
    pub mcd_db: f64,
    /// Absent when either side carried no F0 information.
    pub f0_rmse_hz: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupRow {
    pub group: String,
    pub model: String,
    pub mean_mcd_db: f64,
    pub mean_f0_rmse_hz: Option<f64>,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub pairs: Vec<PairMetrics>,
    pub groups: Vec<GroupRow>,
    /// (pair id, error) for inputs that could not be evaluated.
    pub skipped: Vec<(String, String)>,
}

impl EvalReport {
    /// Tab-separated table, one row per (group, model).
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("group\tmodel\tmcd_db\tf0_rmse_hz\tpairs\n");
        for g in &self.groups {
            let rmse = g
                .mean_f0_rmse_hz
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{}\t{}\n",
                g.group, g.model, g.mean_mcd_db, rmse, g.pairs
            ));
        }
        out
    }

    /// Line-delimited JSON records: every pair, then every group row.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&serde_json::to_string(&Record::Pair(p)).expect("serialize"));
            out.push('\n');
        }
        for g in &self.groups {
            out.push_str(&serde_json::to_string(&Record::Group(g)).expect("serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record<'a> {
    Pair(&'a PairMetrics),
    Group(&'a GroupRow),
}

struct SideFeatures {
    mcc: MccSequence,
    f0: Option<F0Track>,
}

fn load_side(input: &FeatureInput, cfg: &EvalConfig) -> Result<SideFeatures> {
    match input {
        FeatureInput::Wav(path) => {
            let w = load_wav(path)?;
            let mel = mel_spectrogram(&w, &cfg.mel)?;
            let mcc = mel_to_mcc(&mel, cfg.mcc_order)?;
            let f0 = estimate_f0(&w, &cfg.mel, &cfg.f0)?;
            Ok(SideFeatures { mcc, f0: Some(f0) })
        }
        FeatureInput::Mel { mel, f0 } => {
            let frames = load_feature(mel, FeatureRole::Mel)?;
            let m = MelSpectrogram {
                frames,
                frame_shift: cfg.mel.frame_shift,
                frame_length: cfg.mel.frame_length,
            };
            let mcc = mel_to_mcc(&m, cfg.mcc_order)?;
            let f0 = match f0 {
                Some(path) => {
                    let t = load_feature(path, FeatureRole::F0)?;
                    Some(F0Track::from_values(t.data().to_vec()))
                }
                None => None,
            };
            Ok(SideFeatures { mcc, f0 })
        }
    }
}

fn eval_one(
    conv: &SideFeatures,
    reference: &SideFeatures,
    cfg: &EvalConfig,
    id: &str,
    group: &str,
    model: &str,
) -> Result<PairMetrics> {
    let mcd_db = mcd(&conv.mcc, &reference.mcc)?;
    let f0_rmse_hz = match (&conv.f0, &reference.f0) {
        (Some(c), Some(r)) => {
            let (path, _) = dtw_align(&conv.mcc, &reference.mcc)?;
            Some(f0_rmse_with(c, r, &path, cfg.skip_unvoiced_converted)?)
        }
        _ => None,
    };
    Ok(PairMetrics {
        id: id.into(),
        group: group.into(),
        model: model.into(),
        mcd_db,
        f0_rmse_hz,
    })
}

/// Evaluates every pair and aggregates (group, model) means. Unreadable
/// pairs are listed in `skipped`; the report is still produced for the
/// rest. Errors only when no pair could be evaluated.
pub fn make_report(pairs: &[EvalPair], cfg: &EvalConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArg("no evaluation pairs given".into()));
    }
    let mut metrics = Vec::new();
    let mut skipped = Vec::new();
    for pair in pairs {
        let outcome = (|| -> Result<Vec<PairMetrics>> {
            let reference = load_side(&pair.reference, cfg)?;
            let conv = load_side(&pair.converted, cfg)?;
            let mut rows = vec![eval_one(&conv, &reference, cfg, &pair.id, &pair.group, &cfg.model)?];
            if let Some(src) = &pair.source {
                let src = load_side(src, cfg)?;
                rows.push(eval_one(&src, &reference, cfg, &pair.id, &pair.group, "source")?);
            }
            Ok(rows)
        })();
        match outcome {
            Ok(rows) => metrics.extend(rows),
            Err(e) => skipped.push((pair.id.clone(), e.to_string())),
        }
    }
    if metrics.is_empty() {
        return Err(Error::InvalidArg(format!(
            "no evaluation pair could be processed; first failure: {}",
            skipped
                .first()
                .map(|(id, e)| format!("{id}: {e}"))
                .unwrap_or_default()
        )));
    }
    let mut grouped: BTreeMap<(String, String), Vec<&PairMetrics>> = BTreeMap::new();
    for m in &metrics {
        grouped
            .entry((m.group.clone(), m.model.clone()))
            .or_default()
            .push(m);
    }
    let groups = grouped
        .into_iter()
        .map(|((group, model), rows)| {
            let mean_mcd_db = rows.iter().map(|r| r.mcd_db).sum::<f64>() / rows.len() as f64;
            let with_f0: Vec<f64> = rows.iter().filter_map(|r| r.f0_rmse_hz).collect();
            let mean_f0_rmse_hz = if with_f0.is_empty() {
                None
            } else {
                Some(with_f0.iter().sum::<f64>() / with_f0.len() as f64)
            };
            GroupRow {
                group,
                model,
                mean_mcd_db,
                mean_f0_rmse_hz,
                pairs: rows.len(),
            }
        })
        .collect();
    Ok(EvalReport {
        pairs: metrics,
        groups,
        skipped,
    })
}
