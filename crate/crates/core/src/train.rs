//! Training loop: Adam with global-norm clipping over manifest-driven batches,
//! best-by-validation checkpoints, resumable state and CSV telemetry.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use emoavse_tensor::ndarray::{stack, Array2, Array3, ArrayD, Axis, Ix2, Ix3};
use emoavse_tensor::{Graph, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{materialize, SAMPLE_RATE, MixtureManifest, MixtureRecord, Split};
use crate::dsp::{Spectrogram, StftPlan, Waveform};
use crate::error::{Error, Result, StageExt};
use crate::losses::{mae_loss, stoi_loss, LossKind, ModulationConfig, ModulationLoss};
use crate::model::{forward, load_checkpoint, prepare_context, save_checkpoint, Checkpoint, Context, Model, ModelConfig, ModelInput, VideoSource};
use crate::nn::{Binder, ParamSet};

pub const CONFIG_VERSION: u32 = 1;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub device: String,
    pub workers: Option<usize>,
    /// Precomputed crops, `<crops_dir>/<clip>/<frame:05>.png`.
    pub crops_dir: Option<PathBuf>,
    /// EMO1 embedding cache directory.
    pub emotion_cache: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            manifest: PathBuf::new(),
            out_dir: PathBuf::from("runs/default"),
            batch_size: 4,
            learning_rate: 2e-4,
            grad_clip: 5.0,
            max_steps: 1000,
            eval_every: 100,
            seed: 0,
            device: "cpu".into(),
            workers: None,
            crops_dir: None,
            emotion_cache: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // relative paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [Some(&mut cfg.manifest), Some(&mut cfg.out_dir), cfg.crops_dir.as_mut(), cfg.emotion_cache.as_mut()]
            .into_iter()
            .flatten()
        {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!("unsupported device {:?} (only \"cpu\")", self.device)));
        }
        self.model.validate()
    }
}

/// A materialised utterance with everything the network needs precomputed.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub id: String,
    pub noisy: Waveform<T>,
    pub clean: Waveform<T>,
    pub noisy_spec: Spectrogram<T>,
    pub clean_mag: Array2<T>,
    pub context: Context<T>,
}

impl<T: Scalar> Example<T> {
    pub fn new(id: impl Into<String>, noisy: Waveform<T>, clean: Waveform<T>, context: Context<T>, config: &ModelConfig) -> Result<Self> {
        if noisy.len() != clean.len() {
            return Err(Error::shape("noisy and clean lengths differ"));
        }
        let plan = StftPlan::new(config.stft)?;
        let noisy_spec = plan.stft(&noisy)?;
        let clean_mag = plan.stft(&clean)?.magnitude;
        Ok(Self { id: id.into(), noisy, clean, noisy_spec, clean_mag, context })
    }
}

/// Cache key for a record's face context: its clean segment id, path-safe.
pub fn clip_key(record: &MixtureRecord) -> String {
    record.clean_id.replace([':', '/', '\\'], "_")
}

/// Crops under `crops_dir/<clip_key>/` win over the record's video file.
pub fn record_video_source(record: &MixtureRecord, crops_dir: Option<&Path>) -> VideoSource {
    let key = clip_key(record);
    match (crops_dir, &record.video_path) {
        (Some(dir), _) if dir.join(&key).is_dir() => VideoSource::Crops { dir: dir.to_path_buf(), clip_id: key, fps: 30.0 },
        (_, Some(v)) => VideoSource::File { path: v.clone(), start_s: record.clean_offset as f64 / SAMPLE_RATE as f64 },
        _ => VideoSource::None,
    }
}

/// Materialises records and runs the frozen front ends, in parallel.
pub fn prepare_examples(
    model: &Model<f32>,
    records: &[&MixtureRecord],
    crops_dir: Option<&Path>,
    emotion_cache: Option<&Path>,
    workers: Option<usize>,
) -> Result<Vec<Example<f32>>> {
    let build = |r: &&MixtureRecord| -> Result<Example<f32>> {
        let wrap = |e: Error| match e {
            e @ Error::Record { .. } => e,
            e => Error::Record { record: r.id.clone(), source: Box::new(e) },
        };
        let mix = materialize::<f32>(r)?;
        let key = clip_key(r);
        let source = record_video_source(r, crops_dir);
        let ctx = prepare_context(model, &source, mix.clean.duration_secs(), emotion_cache.map(|d| (d, key.as_str())))
            .map_err(wrap)?;
        Example::new(r.id.clone(), mix.noisy, mix.clean, ctx, &model.config).map_err(wrap)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    pool.install(|| records.par_iter().map(build).collect())
}

fn stack_context(items: &[&Example<f32>], pick: impl Fn(&Context<f32>) -> Option<&Array2<f32>>) -> Result<Option<Array3<f32>>> {
    let views: Vec<_> = items.iter().filter_map(|e| pick(&e.context).map(|a| a.view())).collect();
    if views.is_empty() {
        return Ok(None);
    }
    if views.len() != items.len() {
        return Err(Error::invalid("some batch items lack context features"));
    }
    stack(Axis(0), &views).map(Some).map_err(|e| Error::shape(format!("context features differ in shape: {e}")))
}

fn batch_input(items: &[&Example<f32>]) -> Result<ModelInput<f32>> {
    let mags: Vec<_> = items.iter().map(|e| e.noisy_spec.magnitude.view()).collect();
    Ok(ModelInput {
        noisy_mag: stack(Axis(0), &mags).map_err(|e| Error::shape(format!("batch items differ in length: {e}")))?,
        visual: stack_context(items, |c| c.visual.as_ref())?,
        emotion: stack_context(items, |c| c.emotion.as_ref())?,
    })
}

/// Batch-mean loss on enhanced magnitudes `[B, 257, T]` and its gradient.
/// MAE compares log1p-compressed magnitudes; the STOI and modulation losses
/// compare waveforms resynthesised with the noisy phase.
pub struct LossEvaluator {
    kind: LossKind,
    plan: StftPlan<f32>,
    modulation: Option<(usize, ModulationLoss<f64>)>,
}

impl LossEvaluator {
    pub fn new(kind: LossKind, config: &ModelConfig) -> Result<Self> {
        Ok(Self { kind, plan: StftPlan::new(config.stft)?, modulation: None })
    }

    pub fn evaluate(&mut self, enhanced: &Array3<f32>, items: &[&Example<f32>]) -> Result<(f64, Array3<f32>)> {
        let b = items.len();
        let mut grad = Array3::zeros(enhanced.dim());
        let mut total = 0.0;
        for (i, ex) in items.iter().enumerate() {
            let est = enhanced.index_axis(Axis(0), i);
            let (value, g) = match self.kind {
                LossKind::Mae => {
                    let e = est.mapv(|v| (v as f64).ln_1p()).into_dyn();
                    let r = ex.clean_mag.mapv(|v| (v as f64).ln_1p()).into_dyn();
                    let (l, g) = mae_loss(e.view(), r.view())?;
                    let g = g.into_dimensionality::<Ix2>().expect("rank 2");
                    let chain = &g / &est.mapv(|v| 1.0 + v as f64);
                    (l.value, chain.mapv(|v| v as f32))
                }
                LossKind::Stoi | LossKind::Modulation => {
                    let phase = ex.noisy_spec.phase.view();
                    let wave = self.plan.istft(est, phase, ex.clean.len())?;
                    let w64: Vec<f64> = wave.iter().map(|&v| v as f64).collect();
                    let c64: Vec<f64> = ex.clean.samples.iter().map(|&v| v as f64).collect();
                    let fs = ex.clean.sample_rate as usize;
                    let (l, gw) = if self.kind == LossKind::Stoi {
                        stoi_loss(&w64, &c64, fs)?
                    } else {
                        if self.modulation.as_ref().is_none_or(|(n, _)| *n != w64.len()) {
                            let m = ModulationLoss::new(ModulationConfig::default(), fs, w64.len())?;
                            self.modulation = Some((w64.len(), m));
                        }
                        self.modulation.as_ref().expect("built above").1.evaluate(&w64, &c64)?
                    };
                    let gw: Vec<f32> = gw.iter().map(|&v| v as f32).collect();
                    (l.value, self.plan.istft_adjoint(&gw, phase)?)
                }
            };
            total += value;
            grad.index_axis_mut(Axis(0), i).assign(&(g / b as f32));
        }
        Ok((total / b as f64, grad))
    }
}

/// Resumable trainer state; serialised into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub best_val: Option<f64>,
    pub last_loss: Option<f64>,
    pub mean_loss: Option<f64>,
    pub rng: ChaCha8Rng,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub state: TrainState,
    moments: BTreeMap<String, (ArrayD<f32>, ArrayD<f32>)>,
    loss: LossEvaluator,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone())?;
        let loss = LossEvaluator::new(config.model.loss, &config.model)?;
        let state = TrainState { step: 0, best_val: None, last_loss: None, mean_loss: None, rng: ChaCha8Rng::seed_from_u64(config.seed) };
        Ok(Self { config, model, state, moments: BTreeMap::new(), loss })
    }

    /// Restores parameters, optimiser moments and RNG from a checkpoint.
    pub fn from_checkpoint(config: TrainConfig, ck: Checkpoint<f32>) -> Result<Self> {
        let mut t = Self::new(TrainConfig { model: ck.config.clone(), ..config })?;
        let state = ck.state.clone().ok_or_else(|| Error::Checkpoint {
            path: PathBuf::new(),
            reason: "checkpoint carries no trainer state".into(),
        })?;
        t.state = serde_json::from_value(state)?;
        for (name, m) in &ck.extra {
            if let Some(param) = name.strip_prefix("adam.m.") {
                let v = ck.extra.get(&format!("adam.v.{param}")).cloned().unwrap_or_else(|| ArrayD::zeros(m.raw_dim()));
                t.moments.insert(param.to_string(), (m.clone(), v));
            }
        }
        t.model = ck.into_model();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<f32>> {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.state = Some(serde_json::to_value(&self.state)?);
        for (name, (m, v)) in &self.moments {
            ck.extra.insert(format!("adam.m.{name}"), m.clone());
            ck.extra.insert(format!("adam.v.{name}"), v.clone());
        }
        Ok(ck)
    }

    /// Draws batch indices from the trainer's RNG.
    pub fn sample_batch(&mut self, n: usize) -> Vec<usize> {
        (0..self.config.batch_size).map(|_| self.state.rng.random_range(0..n)).collect()
    }

    /// Forward, backward and one Adam update on `items`. Returns the loss.
    pub fn step(&mut self, items: &[&Example<f32>]) -> Result<f64> {
        let input = batch_input(items)?;
        let g = Graph::new();
        let b = Binder::new(&g, &self.model.params);
        let out = forward(&b, &self.model.config, &input).stage("model")?;
        let enhanced = g.value(out.enhanced).as_ref().clone().into_dimensionality::<Ix3>().expect("rank 3");
        let (loss, seed) = self.loss.evaluate(&enhanced, items).stage("loss")?;
        let step = self.state.step + 1;
        if !loss.is_finite() || seed.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step, batch: items.iter().map(|e| e.id.clone()).collect() });
        }
        let mut grads = g.backward(out.enhanced, seed.into_dyn());
        let vars = b.trainable_vars();
        drop(b);
        let mut named: Vec<(String, ArrayD<f32>)> = vars
            .into_iter()
            .map(|(n, v)| {
                let shape = self.model.params.get(&n).expect("bound").value.raw_dim();
                (n, grads.take(v).unwrap_or_else(|| ArrayD::zeros(shape)))
            })
            .collect();
        let norm = named.iter().map(|(_, g)| g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { step, batch: items.iter().map(|e| e.id.clone()).collect() });
        }
        if norm > self.config.grad_clip {
            let s = (self.config.grad_clip / norm) as f32;
            named.iter_mut().for_each(|(_, g)| g.mapv_inplace(|v| v * s));
        }
        self.adam_update(step, named);
        self.state.step = step;
        self.state.last_loss = Some(loss);
        let n = step as f64;
        self.state.mean_loss = Some(self.state.mean_loss.map_or(loss, |m| m + (loss - m) / n));
        Ok(loss)
    }

    fn adam_update(&mut self, step: u64, grads: Vec<(String, ArrayD<f32>)>) {
        let lr = self.config.learning_rate;
        let c1 = 1.0 - BETA1.powi(step as i32);
        let c2 = 1.0 - BETA2.powi(step as i32);
        for (name, g) in grads {
            let p = self.model.params.get_mut(&name).expect("trainable parameter");
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            for (((w, m), v), &g) in p.value.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.iter()) {
                *m = (BETA1 * *m as f64 + (1.0 - BETA1) * g as f64) as f32;
                *v = (BETA2 * *v as f64 + (1.0 - BETA2) * (g as f64).powi(2)) as f32;
                let mh = *m as f64 / c1;
                let vh = *v as f64 / c2;
                *w = (*w as f64 - lr * mh / (vh.sqrt() + ADAM_EPS)) as f32;
            }
        }
    }

    /// Mean loss over `items` without touching parameters.
    pub fn validate(&mut self, items: &[Example<f32>]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::invalid("validation split is empty"));
        }
        let mut total = 0.0;
        for chunk in items.chunks(self.config.batch_size) {
            let refs: Vec<&Example<f32>> = chunk.iter().collect();
            total += self.loss_only(&refs)? * refs.len() as f64;
        }
        Ok(total / items.len() as f64)
    }

    /// Loss of the current parameters on `items` (inference only).
    pub fn loss_only(&mut self, items: &[&Example<f32>]) -> Result<f64> {
        let input = batch_input(items)?;
        let g = Graph::inference();
        let b = Binder::new(&g, &self.model.params);
        let out = forward(&b, &self.model.config, &input)?;
        let enhanced = g.value(out.enhanced).as_ref().clone().into_dimensionality::<Ix3>().expect("rank 3");
        Ok(self.loss.evaluate(&enhanced, items)?.0)
    }
}

/// Whether every frozen parameter of `after` equals its value in `before`.
pub fn frozen_unchanged<T: Scalar>(before: &ParamSet<T>, after: &ParamSet<T>) -> bool {
    before.iter().filter(|(_, p)| p.frozen).all(|(n, p)| after.get(n).is_some_and(|q| q.value == p.value))
}

/// Appends `(step, split, loss)` rows, writing the header on creation.
pub struct Telemetry {
    file: std::fs::File,
    path: PathBuf,
}

impl Telemetry {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "step,split,loss").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file, path: path.to_path_buf() })
    }

    pub fn log(&mut self, step: u64, split: Split, loss: f64) -> Result<()> {
        writeln!(self.file, "{step},{split},{loss:.9e}").map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub losses: Vec<f64>,
    pub best_val: Option<f64>,
}

/// Refuses manifests where a clean or noise id is shared by train and val.
pub fn check_no_leak(manifest: &MixtureManifest) -> Result<()> {
    let leaks = manifest.leaks(&[Split::Train, Split::Val]);
    if leaks.is_empty() {
        Ok(())
    } else {
        Err(Error::SplitLeak(leaks.join(", ")))
    }
}

/// Runs training from a config; resumes from `resume` when given.
pub fn train(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = MixtureManifest::read(&config.manifest)?;
    check_no_leak(&manifest)?;
    let train_recs: Vec<&MixtureRecord> = manifest.split(Split::Train).collect();
    let val_recs: Vec<&MixtureRecord> = manifest.split(Split::Val).collect();
    if train_recs.is_empty() || val_recs.is_empty() {
        return Err(Error::invalid(format!(
            "manifest needs train and val records (found {} and {})",
            train_recs.len(),
            val_recs.len()
        )));
    }
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(config.clone(), load_checkpoint(p)?)?,
        None => Trainer::new(config.clone())?,
    };
    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let crops = config.crops_dir.as_deref();
    let cache = config.emotion_cache.as_deref();
    if let Some(c) = cache {
        std::fs::create_dir_all(c).map_err(|e| Error::io(c, e))?;
    }
    let train_set = prepare_examples(&trainer.model, &train_recs, crops, cache, config.workers)?;
    let val_set = prepare_examples(&trainer.model, &val_recs, crops, cache, config.workers)?;
    let mut telemetry = Telemetry::open(&config.out_dir.join("telemetry.csv"))?;
    let last = config.out_dir.join("last.ckpt");
    let best = config.out_dir.join("best.ckpt");
    let frozen_before = trainer.model.params.clone();
    let mut losses = Vec::new();
    while trainer.state.step < config.max_steps {
        let idx = trainer.sample_batch(train_set.len());
        let batch: Vec<&Example<f32>> = idx.iter().map(|&i| &train_set[i]).collect();
        let loss = trainer.step(&batch)?;
        losses.push(loss);
        let step = trainer.state.step;
        telemetry.log(step, Split::Train, loss)?;
        if step % config.eval_every == 0 || step == config.max_steps {
            let v = trainer.validate(&val_set)?;
            telemetry.log(step, Split::Val, v)?;
            if trainer.state.best_val.is_none_or(|b| v < b) {
                trainer.state.best_val = Some(v);
                save_checkpoint(&best, &trainer.checkpoint()?)?;
            }
            save_checkpoint(&last, &trainer.checkpoint()?)?;
        }
    }
    debug_assert!(frozen_unchanged(&frozen_before, &trainer.model.params));
    if !last.exists() {
        save_checkpoint(&last, &trainer.checkpoint()?)?;
    }
    Ok(TrainOutcome {
        last_checkpoint: last,
        best_checkpoint: best.exists().then_some(best),
        losses,
        best_val: trainer.state.best_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mix_at_snr;
    use crate::synth::{noise, speech_like, NoiseKind};

    fn tiny_config(loss: LossKind) -> TrainConfig {
        TrainConfig {
            batch_size: 1,
            learning_rate: 1e-3,
            max_steps: 10,
            model: ModelConfig { channels: vec![2, 2, 3, 3, 4], use_video: false, use_emotion: false, loss, seed: 5, ..Default::default() },
            ..Default::default()
        }
    }

    fn example(seed: u64, seconds: f64) -> Example<f32> {
        let clean: Waveform<f32> = speech_like(seconds, 16_000, seed);
        let n: Waveform<f32> = noise(NoiseKind::White, seconds, 16_000, seed + 100);
        let (noisy, _) = mix_at_snr(&clean, &n, 0.0, 0).unwrap();
        Example::new(format!("ex{seed}"), noisy, clean, Context::default(), &tiny_config(LossKind::Mae).model).unwrap()
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = tiny_config(LossKind::Stoi);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("[model]\nloss = \"l2\"").is_err());
    }

    #[test]
    fn steps_reduce_loss_and_resume_is_exact() {
        let ex = example(1, 0.5);
        let items = [&ex];
        let mut a = Trainer::new(tiny_config(LossKind::Mae)).unwrap();
        let trace: Vec<f64> = (0..6).map(|_| a.step(&items).unwrap()).collect();
        assert!(trace[5] < trace[0], "{trace:?}");

        let mut b = Trainer::new(tiny_config(LossKind::Mae)).unwrap();
        for _ in 0..3 {
            b.step(&items).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.ckpt");
        save_checkpoint(&p, &b.checkpoint().unwrap()).unwrap();
        let mut c = Trainer::from_checkpoint(tiny_config(LossKind::Mae), load_checkpoint(&p).unwrap()).unwrap();
        assert_eq!(c.state, b.state);
        let resumed: Vec<f64> = (0..3).map(|_| c.step(&items).unwrap()).collect();
        assert_eq!(resumed, trace[3..]);
        assert_eq!(c.model.params, a.model.params);
    }

    #[test]
    fn waveform_losses_train() {
        for kind in [LossKind::Stoi, LossKind::Modulation] {
            let ex = example(2, 0.6);
            let mut t = Trainer::new(tiny_config(kind)).unwrap();
            let l0 = t.step(&[&ex]).unwrap();
            assert!(l0.is_finite());
            let before = t.loss_only(&[&ex]).unwrap();
            assert_eq!(before, t.loss_only(&[&ex]).unwrap());
        }
    }

    #[test]
    fn validation_does_not_mutate() {
        let ex = example(3, 0.5);
        let mut t = Trainer::new(tiny_config(LossKind::Mae)).unwrap();
        let p = t.model.params.clone();
        let v1 = t.validate(std::slice::from_ref(&ex)).unwrap();
        let v2 = t.validate(std::slice::from_ref(&ex)).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(p, t.model.params);
        assert!(t.validate(&[]).is_err());
    }
}
