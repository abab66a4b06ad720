//! Reproducible noisy mixtures: clip segmentation, SNR-controlled mixing and
//! JSON-lines manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use emoavse_tensor::Scalar;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, Waveform, WavReadOptions};
use crate::error::{Error, Result};
use crate::util::{mix_seed, write_atomic};

pub const SEGMENT_SECONDS: f64 = 4.0;
pub const SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.75, 0.15, 0.10];
pub const DEFAULT_TEST_SNRS: [f64; 6] = [-9.0, -6.0, -3.0, 0.0, 3.0, 6.0];
pub const TRAIN_SNR_RANGE: (f64, f64) = (-9.0, 6.0);
pub const MANIFEST_FORMAT: &str = "emoavse-manifest/1";
pub const VIDEO_EXTENSIONS: [&str; 4] = ["avi", "mp4", "mkv", "mov"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?}")))
    }
}

/// One mixture: which clean segment, which noise window, at what SNR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub id: String,
    pub clean_id: String,
    pub clean_path: PathBuf,
    /// First sample of the 4 s segment within the clean file.
    pub clean_offset: usize,
    pub noise_id: String,
    pub noise_path: PathBuf,
    pub noise_offset: usize,
    pub target_snr_db: f64,
    pub split: Split,
    pub seed: u64,
    /// Gain applied to both clean and noisy to keep the mixture peak ≤ 1.
    pub gain: f64,
    pub video_path: Option<PathBuf>,
}

/// First line of a manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub noise_split_fractions: [f64; 3],
    pub global_seed: u64,
    /// Seconds since the epoch, from `SOURCE_DATE_EPOCH` (0 when unset).
    pub created_at: u64,
    pub segment_seconds: f64,
    pub sample_rate: u32,
    pub test_snrs: Vec<f64>,
    pub skipped_silent: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureManifest {
    pub header: ManifestHeader,
    pub records: Vec<MixtureRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnrConfig {
    pub train_range: (f64, f64),
    pub test_levels: Vec<f64>,
}

impl Default for SnrConfig {
    fn default() -> Self {
        Self { train_range: TRAIN_SNR_RANGE, test_levels: DEFAULT_TEST_SNRS.to_vec() }
    }
}

/// `(start, available)` sample spans of non-overlapping segments. A trailing
/// remainder is kept (to be zero-padded) only if it covers at least half a segment.
pub fn segment_spans(len: usize, segment: usize) -> Vec<(usize, usize)> {
    let mut spans: Vec<_> = (0..len / segment).map(|k| (k * segment, segment)).collect();
    let rest = len % segment;
    if rest > 0 && 2 * rest >= segment {
        spans.push((len - rest, rest));
    }
    spans
}

/// Splits `source` into `length_s` chunks; see [`segment_spans`].
pub fn segment_clip<T: Scalar>(source: &Waveform<T>, length_s: f64) -> Result<Vec<Waveform<T>>> {
    if source.is_empty() {
        return Err(Error::invalid("cannot segment an empty waveform"));
    }
    let seg = (length_s * source.sample_rate as f64).round() as usize;
    if seg == 0 {
        return Err(Error::invalid(format!("segment length {length_s}s is shorter than one sample")));
    }
    Ok(segment_spans(source.len(), seg)
        .into_iter()
        .map(|(start, n)| {
            let mut s = source.samples[start..start + n].to_vec();
            s.resize(seg, T::zero());
            Waveform { samples: s, sample_rate: source.sample_rate }
        })
        .collect())
}

/// `len` samples of `noise` starting at `offset`, wrapping around cyclically.
pub fn noise_window<T: Copy>(noise: &[T], offset: usize, len: usize) -> Vec<T> {
    (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
}

/// Adds noise (tiled from `offset`) to `clean` so that the clean-to-noise
/// energy ratio equals `snr_db`. Returns the mixture and the noise scale.
pub fn mix_at_snr<T: Scalar>(clean: &Waveform<T>, noise: &Waveform<T>, snr_db: f64, offset: usize) -> Result<(Waveform<T>, f64)> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::invalid(format!(
            "sample rates differ: clean {} Hz, noise {} Hz",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if noise.is_empty() || clean.is_empty() {
        return Err(Error::invalid("empty clean or noise waveform"));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("invalid SNR {snr_db}")));
    }
    let window = noise_window(&noise.samples, offset, clean.len());
    let rc = crate::dsp::rms(&clean.samples).as_f64();
    let rn = crate::dsp::rms(&window).as_f64();
    if rc == 0.0 {
        return Err(Error::invalid("clean signal is silent; SNR is undefined"));
    }
    if rn == 0.0 {
        return Err(Error::invalid("noise window is silent; SNR is undefined"));
    }
    let scale = rc / rn * 10f64.powf(-snr_db / 20.0);
    let s = T::lit(scale);
    let samples = clean.samples.iter().zip(&window).map(|(&c, &n)| c + s * n).collect();
    Ok((Waveform { samples, sample_rate: clean.sample_rate }, scale))
}

/// Clean-to-noise energy ratio in dB.
pub fn measured_snr_db<T: Scalar>(clean: &[T], noisy: &[T]) -> f64 {
    let (mut es, mut en) = (0.0, 0.0);
    for (&c, &y) in clean.iter().zip(noisy) {
        let (c, y) = (c.as_f64(), y.as_f64());
        es += c * c;
        en += (y - c) * (y - c);
    }
    10.0 * (es / en).log10()
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sibling_video(p: &Path) -> Option<PathBuf> {
    VIDEO_EXTENSIONS.iter().map(|e| p.with_extension(e)).find(|v| v.is_file())
}

/// Split sizes for `n` items: rounded fractions, with the remainder going to
/// the last split so the sizes sum to `n`.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let a = ((n as f64 * fractions[0]).round() as usize).min(n);
    let b = ((n as f64 * fractions[1]).round() as usize).min(n - a);
    [a, b, n - a - b]
}

fn validate_fractions(f: [f64; 3]) -> Result<()> {
    if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {f:?} must be in [0, 1] and sum to 1")));
    }
    Ok(())
}

fn partition<T: Clone>(items: &[T], fractions: [f64; 3], rng: &mut ChaCha8Rng) -> BTreeMap<Split, Vec<T>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let sizes = split_sizes(items.len(), fractions);
    let mut out = BTreeMap::new();
    let mut it = order.into_iter();
    for (split, n) in Split::ALL.into_iter().zip(sizes) {
        let mut idx: Vec<usize> = it.by_ref().take(n).collect();
        idx.sort_unstable();
        out.insert(split, idx.into_iter().map(|i| items[i].clone()).collect());
    }
    out
}

fn source_date_epoch() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
}

/// Builds a manifest: clean files and noise files are each partitioned into
/// train/val/test, clean files are cut into 4 s segments, and every segment
/// is paired with a noise window from its own split.
pub fn build_manifest(
    clean_dir: &Path,
    noise_dirs: &[PathBuf],
    fractions: [f64; 3],
    snr: &SnrConfig,
    seed: u64,
) -> Result<MixtureManifest> {
    validate_fractions(fractions)?;
    if snr.test_levels.is_empty() {
        return Err(Error::invalid("at least one test SNR level is required"));
    }
    let clean_files = list_wavs(clean_dir)?;
    let mut noise_files = Vec::new();
    for d in noise_dirs {
        noise_files.extend(list_wavs(d)?);
    }
    if clean_files.is_empty() {
        return Err(Error::invalid(format!("no .wav files in {}", clean_dir.display())));
    }
    if noise_files.is_empty() {
        return Err(Error::invalid("no .wav files in the noise directories"));
    }
    let mut seen = BTreeSet::new();
    for p in &noise_files {
        if !seen.insert(stem(p)) {
            return Err(Error::invalid(format!("duplicate noise id {:?}", stem(p))));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_split = partition(&noise_files, fractions, &mut rng);
    let clean_split = partition(&clean_files, fractions, &mut rng);
    let opts = WavReadOptions { sample_rate: SAMPLE_RATE, downmix: true };
    let seg_len = (SEGMENT_SECONDS * SAMPLE_RATE as f64) as usize;

    let mut noise_audio: BTreeMap<PathBuf, Waveform<f64>> = BTreeMap::new();
    for p in &noise_files {
        noise_audio.insert(p.clone(), read_wav(p, opts)?);
    }

    let mut records = Vec::new();
    let mut skipped = 0;
    for split in Split::ALL {
        let noises = &noise_split[&split];
        let mut test_slot = 0usize;
        for clean_path in &clean_split[&split] {
            if noises.is_empty() {
                break;
            }
            let clean = read_wav::<f64>(clean_path, opts)?;
            for (k, seg) in segment_clip(&clean, SEGMENT_SECONDS)?.into_iter().enumerate() {
                let record_seed = mix_seed(seed, records.len() as u64 + skipped as u64);
                let mut r = ChaCha8Rng::seed_from_u64(record_seed);
                let noise_path = &noises[r.random_range(0..noises.len())];
                let noise = &noise_audio[noise_path];
                let noise_offset = r.random_range(0..noise.len());
                let target_snr_db = match split {
                    Split::Test => {
                        let v = snr.test_levels[test_slot % snr.test_levels.len()];
                        test_slot += 1;
                        v
                    }
                    _ => r.random_range(snr.train_range.0..=snr.train_range.1),
                };
                let Ok((noisy, _)) = mix_at_snr(&seg, noise, target_snr_db, noise_offset) else {
                    skipped += 1;
                    continue;
                };
                let peak = noisy.peak();
                let gain = if peak > 1.0 { 1.0 / peak } else { 1.0 };
                records.push(MixtureRecord {
                    id: format!("{split}-{:05}", records.len()),
                    clean_id: format!("{}:{k}", stem(clean_path)),
                    clean_path: clean_path.clone(),
                    clean_offset: k * seg_len,
                    noise_id: stem(noise_path),
                    noise_path: noise_path.clone(),
                    noise_offset,
                    target_snr_db,
                    split,
                    seed: record_seed,
                    gain,
                    video_path: sibling_video(clean_path),
                });
            }
        }
    }
    let manifest = MixtureManifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            noise_split_fractions: fractions,
            global_seed: seed,
            created_at: source_date_epoch(),
            segment_seconds: SEGMENT_SECONDS,
            sample_rate: SAMPLE_RATE,
            test_snrs: snr.test_levels.clone(),
            skipped_silent: skipped,
        },
        records,
    };
    manifest.check_partition()?;
    Ok(manifest)
}

impl MixtureManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &MixtureRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Ids (clean or noise) that appear in more than one of the given splits.
    pub fn leaks(&self, splits: &[Split]) -> Vec<String> {
        let mut owner: BTreeMap<String, Split> = BTreeMap::new();
        let mut leaks = BTreeSet::new();
        for r in self.records.iter().filter(|r| splits.contains(&r.split)) {
            for id in [format!("clean:{}", r.clean_id), format!("noise:{}", r.noise_id)] {
                match owner.get(&id) {
                    Some(&s) if s != r.split => {
                        leaks.insert(id);
                    }
                    Some(_) => {}
                    None => {
                        owner.insert(id, r.split);
                    }
                }
            }
        }
        leaks.into_iter().collect()
    }

    pub fn check_partition(&self) -> Result<()> {
        let leaks = self.leaks(&Split::ALL);
        if leaks.is_empty() {
            Ok(())
        } else {
            Err(Error::SplitLeak(leaks.join(", ")))
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader =
            serde_json::from_str(lines.next().ok_or_else(|| Error::invalid("manifest is empty"))?)?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::invalid(format!("unsupported manifest format {:?}", header.format)));
        }
        let records = lines.map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// A materialised record.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture<T> {
    pub noisy: Waveform<T>,
    pub clean: Waveform<T>,
    pub scale: f64,
}

/// Rebuilds a record's mixture from its files; a pure function of the record.
pub fn materialize<T: Scalar>(record: &MixtureRecord) -> Result<Mixture<T>> {
    let wrap = |e: Error| Error::Record { record: record.id.clone(), source: Box::new(e) };
    let opts = WavReadOptions { sample_rate: SAMPLE_RATE, downmix: true };
    let src: Waveform<f64> = read_wav(&record.clean_path, opts).map_err(wrap)?;
    let noise: Waveform<f64> = read_wav(&record.noise_path, opts).map_err(wrap)?;
    let seg_len = (SEGMENT_SECONDS * SAMPLE_RATE as f64) as usize;
    if record.clean_offset >= src.len() {
        return Err(wrap(Error::invalid(format!(
            "clean offset {} beyond {} samples",
            record.clean_offset,
            src.len()
        ))));
    }
    let end = (record.clean_offset + seg_len).min(src.len());
    let mut seg = src.samples[record.clean_offset..end].to_vec();
    seg.resize(seg_len, 0.0);
    let clean = Waveform { samples: seg, sample_rate: SAMPLE_RATE };
    let (noisy, scale) = mix_at_snr(&clean, &noise, record.target_snr_db, record.noise_offset).map_err(wrap)?;
    let g = record.gain;
    Ok(Mixture {
        noisy: Waveform { samples: noisy.samples.iter().map(|&v| T::lit(v * g)).collect(), sample_rate: SAMPLE_RATE },
        clean: Waveform { samples: clean.samples.iter().map(|&v| T::lit(v * g)).collect(), sample_rate: SAMPLE_RATE },
        scale,
    })
}
