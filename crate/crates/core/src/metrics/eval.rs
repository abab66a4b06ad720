//! Test-set evaluation: enhance every record, score it against the clean
//! reference, aggregate per SNR level and overall.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pesq_adapter, sdi_metric, stoi_metric, PesqMode};
use crate::data::{materialize, MixtureManifest, MixtureRecord, Split};
use crate::dsp::{write_wav, WavEncoding, Waveform};
use crate::error::{Error, Result};
use crate::model::{enhance, prepare_context, Model, ModelConfig};
use crate::train::{clip_key, record_video_source};
use crate::util::write_atomic;

pub const SCORES_CSV: &str = "scores.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Published reference points, printed next to local results for format
/// comparison only: (system, loss, PESQ, STOI, SDI).
pub const REFERENCE_ROWS: [(&str, &str, f64, f64, f64); 2] =
    [("Noisy", "-", 1.326, 0.447, 3.061), ("E-AVSE", "MAE", 1.685, 0.703, 1.994)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub clip_id: String,
    pub snr_db: f64,
    pub pesq: Option<f64>,
    pub stoi: Option<f64>,
    pub sdi: Option<f64>,
    /// Set when any stage failed for this utterance.
    pub error: Option<String>,
}

/// Mean of the present values and how many there were.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMean {
    pub mean: Option<f64>,
    pub count: usize,
}

impl MetricMean {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (sum, count) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        Self { mean: (count > 0).then(|| sum / count as f64), count }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub utterances: usize,
    pub failures: usize,
    pub pesq: MetricMean,
    pub stoi: MetricMean,
    pub sdi: MetricMean,
}

impl Summary {
    fn of<'a>(scores: impl Iterator<Item = &'a UtteranceScore> + Clone) -> Self {
        Self {
            utterances: scores.clone().count(),
            failures: scores.clone().filter(|s| s.error.is_some()).count(),
            pesq: MetricMean::of(scores.clone().filter_map(|s| s.pesq)),
            stoi: MetricMean::of(scores.clone().filter_map(|s| s.stoi)),
            sdi: MetricMean::of(scores.filter_map(|s| s.sdi)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrSummary {
    pub snr_db: f64,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Vec<UtteranceScore>,
    pub per_snr: Vec<SnrSummary>,
    pub overall: Summary,
    pub pesq_available: bool,
    pub notes: Vec<String>,
    pub config: ModelConfig,
}

impl EvalReport {
    /// Aggregates per-utterance scores; SNR groups are keyed to 1e-6 dB.
    pub fn from_scores(scores: Vec<UtteranceScore>, config: ModelConfig, pesq_available: bool) -> Self {
        let mut groups: BTreeMap<i64, Vec<&UtteranceScore>> = BTreeMap::new();
        for s in &scores {
            groups.entry((s.snr_db * 1e6).round() as i64).or_default().push(s);
        }
        let per_snr = groups
            .into_iter()
            .map(|(k, v)| SnrSummary { snr_db: k as f64 / 1e6, summary: Summary::of(v.into_iter()) })
            .collect();
        let overall = Summary::of(scores.iter());
        let mut notes = Vec::new();
        if !pesq_available {
            notes.push("pesq: unavailable".to_string());
        }
        if overall.failures > 0 {
            notes.push(format!("{} of {} utterances failed", overall.failures, overall.utterances));
        }
        Self { scores, per_snr, overall, pesq_available, notes, config }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut out = String::from("clip_id,snr_db,pesq,stoi,sdi,error\n");
        for s in &self.scores {
            let err = s.error.as_deref().unwrap_or("").replace('"', "'");
            let err = if err.is_empty() { err } else { format!("\"{err}\"") };
            let _ = writeln!(out, "{},{},{},{},{},{}", s.clip_id, s.snr_db, opt(s.pesq), opt(s.stoi), opt(s.sdi), err);
        }
        out
    }

    /// Writes `scores.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(SCORES_CSV), self.to_csv().as_bytes())?;
        write_atomic(&dir.join(SUMMARY_JSON), &serde_json::to_vec_pretty(self)?)
    }

    pub fn read(dir_or_file: &Path) -> Result<Self> {
        let path = if dir_or_file.is_dir() { dir_or_file.join(SUMMARY_JSON) } else { dir_or_file.to_path_buf() };
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Plain-text table: one row per SNR level, the overall mean, then the
    /// reference rows.
    pub fn render(&self) -> String {
        let f = |m: &MetricMean| m.mean.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
        let mut out = format!("mode: {}   loss: {}\n", self.config.mode_name(), self.config.loss);
        let _ = writeln!(out, "{:<10} {:>5} {:>6} {:>7} {:>7} {:>7}", "snr_db", "n", "failed", "pesq", "stoi", "sdi");
        let row = |out: &mut String, label: String, s: &Summary| {
            let _ = writeln!(
                out,
                "{label:<10} {:>5} {:>6} {:>7} {:>7} {:>7}",
                s.utterances,
                s.failures,
                f(&s.pesq),
                f(&s.stoi),
                f(&s.sdi)
            );
        };
        for g in &self.per_snr {
            row(&mut out, format!("{:+.1}", g.snr_db), &g.summary);
        }
        row(&mut out, "overall".into(), &self.overall);
        let _ = writeln!(out, "\nreference (full-scale training, not reproduced here):");
        for (system, loss, pesq, stoi, sdi) in REFERENCE_ROWS {
            let _ = writeln!(out, "{:<10} {:>5} {:>6} {pesq:>7.3} {stoi:>7.3} {sdi:>7.3}", system, loss, "");
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub split: Option<Split>,
    pub pesq_bin: Option<PathBuf>,
    pub pesq_mode: PesqMode,
    pub workers: Option<usize>,
    pub crops_dir: Option<PathBuf>,
    pub emotion_cache: Option<PathBuf>,
}

fn pesq_pair(bin: Option<&Path>, mode: PesqMode, clean: &Waveform<f32>, enhanced: &Waveform<f32>) -> Result<Option<f64>> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let (r, d) = (dir.path().join("ref.wav"), dir.path().join("deg.wav"));
    write_wav(&r, clean, WavEncoding::Pcm16)?;
    write_wav(&d, enhanced, WavEncoding::Pcm16)?;
    pesq_adapter(bin, &r, &d, mode)
}

fn score_record(model: &Model<f32>, record: &MixtureRecord, opts: &EvalOptions, pesq_bin: Option<&Path>) -> Result<UtteranceScore> {
    let mix = materialize::<f32>(record)?;
    let key = clip_key(record);
    let source = record_video_source(record, opts.crops_dir.as_deref());
    let cache = opts.emotion_cache.as_deref().map(|d| (d, key.as_str()));
    let ctx = prepare_context(model, &source, mix.clean.duration_secs(), cache)?;
    let out = enhance(model, &mix.noisy, &ctx)?.waveform;
    let stoi = stoi_metric(&mix.clean, &out)?;
    let sdi = sdi_metric(&mix.clean.samples, &out.samples)?;
    let pesq = match pesq_bin {
        Some(bin) => pesq_pair(Some(bin), opts.pesq_mode, &mix.clean, &out)?,
        None => None,
    };
    Ok(UtteranceScore { clip_id: record.id.clone(), snr_db: record.target_snr_db, pesq, stoi: Some(stoi), sdi: Some(sdi), error: None })
}

/// Scores every record of the chosen split (default: test). Per-utterance
/// failures are recorded in the report rather than aborting the run.
pub fn evaluate(manifest: &MixtureManifest, model: &Model<f32>, opts: &EvalOptions) -> Result<EvalReport> {
    let split = opts.split.unwrap_or(Split::Test);
    let records: Vec<&MixtureRecord> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(Error::invalid(format!("manifest has no {split} records")));
    }
    let pesq_bin = super::resolve_pesq_bin(opts.pesq_bin.as_deref());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let scores: Vec<UtteranceScore> = pool.install(|| {
        records
            .par_iter()
            .map(|r| {
                score_record(model, r, opts, pesq_bin.as_deref()).unwrap_or_else(|e| UtteranceScore {
                    clip_id: r.id.clone(),
                    snr_db: r.target_snr_db,
                    pesq: None,
                    stoi: None,
                    sdi: None,
                    error: Some(e.to_string()),
                })
            })
            .collect()
    });
    let pesq_available = scores.iter().any(|s| s.pesq.is_some());
    Ok(EvalReport::from_scores(scores, model.config.clone(), pesq_available))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(id: &str, snr: f64, stoi: Option<f64>, sdi: Option<f64>) -> UtteranceScore {
        UtteranceScore { clip_id: id.into(), snr_db: snr, pesq: None, stoi, sdi, error: stoi.is_none().then(|| "boom".into()) }
    }

    #[test]
    fn per_snr_means_recompose_overall() {
        let scores = vec![
            score("a", -3.0, Some(0.5), Some(1.0)),
            score("b", -3.0, Some(0.7), Some(2.0)),
            score("c", 6.0, Some(0.9), Some(0.5)),
            score("d", 6.0, None, None),
        ];
        let r = EvalReport::from_scores(scores, ModelConfig::default(), false);
        assert_eq!(r.per_snr.len(), 2);
        assert_eq!(r.overall.failures, 1);
        let (num, den) = r
            .per_snr
            .iter()
            .fold((0.0, 0), |(s, n), g| (s + g.summary.stoi.mean.unwrap() * g.summary.stoi.count as f64, n + g.summary.stoi.count));
        assert!((num / den as f64 - r.overall.stoi.mean.unwrap()).abs() < 1e-9);
        assert!(r.notes.iter().any(|n| n == "pesq: unavailable"));
        assert!(r.render().contains("overall"));
        assert_eq!(r.to_csv().lines().count(), 5);
    }

    #[test]
    fn write_and_read_round_trip() {
        let r = EvalReport::from_scores(vec![score("a", 0.0, Some(0.5), Some(1.0))], ModelConfig::default(), false);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        assert_eq!(EvalReport::read(dir.path()).unwrap(), r);
        assert!(dir.path().join(SCORES_CSV).is_file());
    }
}
