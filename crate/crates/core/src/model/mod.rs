//! The enhancement network: a spectrogram UNet whose bottleneck fuses audio,
//! visual and emotion features, emitting a sigmoid mask on the noisy magnitude.

mod checkpoint;
mod enhance;

use emoavse_tensor::ndarray::{Array3, ArrayD, Axis, IxDyn, Slice};
use emoavse_tensor::{ConvGeometry, Graph, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::dsp::StftParams;
use crate::emotion::{broadcast_upsample, init_emotion_front, init_emotion_projection, project, EmotionBackend, EMOTION_DIM};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::nn::{Binder, ParamSet};
use crate::visual::{init_tcn, init_visual_front, tcn_forward, VisualFrontKind, VISUAL_DIM};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use enhance::{enhance, prepare_context, Context, DetectorConfig, Enhanced, VideoSource};

pub const REFERENCE_CHANNELS: [usize; 5] = [64, 128, 256, 384, 512];
const LEAK: f64 = 0.2;
/// Frequency rows the network sees (the Nyquist row is bypassed).
pub const NET_BINS: usize = 256;
/// Total downsampling of the time axis by the two strided convolutions.
pub const TIME_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskActivation {
    #[default]
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stft: StftParams,
    /// Encoder widths: two strided convs, then three conv blocks. The last entry
    /// is the width of every fused branch.
    pub channels: Vec<usize>,
    pub mask: MaskActivation,
    pub loss: LossKind,
    pub seed: u64,
    pub use_video: bool,
    pub use_emotion: bool,
    pub visual_front: VisualFrontKind,
    pub emotion_backend: EmotionBackend,
    pub detector: DetectorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stft: StftParams::default(),
            channels: REFERENCE_CHANNELS.to_vec(),
            mask: MaskActivation::Sigmoid,
            loss: LossKind::Mae,
            seed: 0,
            use_video: true,
            use_emotion: true,
            visual_front: VisualFrontKind::Stub,
            emotion_backend: EmotionBackend::Stub,
            detector: DetectorConfig::Stub,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.channels.len() != 5 || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "channel plan must list 5 positive widths, got {:?}",
                self.channels
            )));
        }
        if self.stft.fft_size / 2 != NET_BINS {
            return Err(Error::Config(format!(
                "the network expects {} frequency bins plus Nyquist (fft_size 512), got fft_size {}",
                NET_BINS, self.stft.fft_size
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.channels[4]
    }

    /// Branches fused at the bottleneck (audio always present).
    pub fn branches(&self) -> usize {
        1 + self.use_video as usize + self.use_emotion as usize
    }

    pub fn needs_faces(&self) -> bool {
        self.use_video || self.use_emotion
    }

    pub fn mode_name(&self) -> &'static str {
        match (self.use_video, self.use_emotion) {
            (false, false) => "ase",
            (true, false) => "avse",
            (false, true) => "ease",
            (true, true) => "e-avse",
        }
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialisation of every parameter the configuration needs.
    /// Disabled branches get no parameters at all.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let c = &config.channels;
        let mut ps = ParamSet::new();
        ps.init_conv("enc.1", c[0], 1, &[4, 4], 1.0, seed, false);
        ps.init_conv("enc.2", c[1], c[0], &[4, 4], 1.0, seed, false);
        for (i, (&cin, &cout)) in c[1..4].iter().zip(&c[2..5]).enumerate() {
            ps.init_conv(&format!("enc.b{}.0", i + 3), cout, cin, &[3, 3], 1.0, seed, false);
            ps.init_conv(&format!("enc.b{}.1", i + 3), cout, cout, &[3, 3], 1.0, seed, false);
        }
        let w = config.width();
        if config.use_video {
            init_visual_front(&mut ps, config.visual_front, seed);
            init_tcn(&mut ps, w, seed);
        }
        if config.use_emotion {
            init_emotion_front(&mut ps, seed);
            init_emotion_projection(&mut ps, w, seed);
        }
        ps.init_conv("bottleneck", w, w * config.branches(), &[1, 1], 1.0, seed, false);
        // decoder blocks mirror encoder blocks 5, 4, 3 and take the skip concatenated
        for (stage, i) in [(5usize, 4usize), (4, 3), (3, 2)] {
            let cin = 2 * c[i];
            let cout = c[i - 1];
            ps.init_conv(&format!("dec.b{stage}.0"), cout, cin, &[3, 3], 1.0, seed, false);
            ps.init_conv(&format!("dec.b{stage}.1"), cout, cout, &[3, 3], 1.0, seed, false);
        }
        ps.init_conv_transpose("dec.up2", 2 * c[1], c[0], &[4, 4], 1.0, seed, false);
        ps.init_conv_transpose("dec.head", 2 * c[0], 1, &[4, 4], 1.0, seed, false);
        Ok(Self { config, params: ps })
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Sets the mask-head bias; large values saturate the mask towards 1.
    pub fn set_head_bias(&mut self, value: f64) {
        if let Some(p) = self.params.get_mut("dec.head.b") {
            p.value.fill(T::lit(value));
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }
}

/// One batch of network inputs. Context features are the frozen front-end
/// outputs: `[B, 512, Nv]` visual and `[B, 1280, Ne]` emotion.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    pub noisy_mag: Array3<T>,
    pub visual: Option<Array3<T>>,
    pub emotion: Option<Array3<T>>,
}

/// Network outputs plus the shape of every named stage, in order.
pub struct Forward {
    pub enhanced: Var,
    pub mask: Var,
    pub shapes: Vec<(&'static str, Vec<usize>)>,
}

impl Forward {
    pub fn shape_of(&self, stage: &str) -> Option<&[usize]> {
        self.shapes.iter().find(|(s, _)| *s == stage).map(|(_, v)| v.as_slice())
    }
}

fn conv<T: Scalar>(b: &Binder<T>, x: Var, name: &str, geom: ConvGeometry) -> Var {
    b.graph.conv(x, b.var(&format!("{name}.w")), Some(b.var(&format!("{name}.b"))), geom)
}

fn conv_block<T: Scalar>(b: &Binder<T>, x: Var, name: &str) -> Var {
    let g = b.graph;
    let leak = T::lit(LEAK);
    let same = ConvGeometry::d2((1, 1), (1, 1));
    let h = g.leaky_relu(conv(b, x, &format!("{name}.0"), same), leak);
    g.leaky_relu(conv(b, h, &format!("{name}.1"), same), leak)
}

/// Audio encoder output and the skips kept for the decoder.
pub struct Encoded {
    pub features: Var,
    pub skips: Vec<Var>,
}

/// `[B, 1, 256, T]` → `[B, C5, 8, T/4]`.
pub fn audio_encode<T: Scalar>(b: &Binder<T>, x: Var, shapes: &mut Vec<(&'static str, Vec<usize>)>) -> Result<Encoded> {
    let g = b.graph;
    let s = g.shape(x);
    if s.len() != 4 || s[1] != 1 || s[2] != NET_BINS || !s[3].is_multiple_of(TIME_STRIDE) || s[3] == 0 {
        return Err(Error::shape(format!(
            "audio encoder expects [B, 1, {NET_BINS}, T] with T a positive multiple of {TIME_STRIDE}, got {s:?}"
        )));
    }
    let leak = T::lit(LEAK);
    let strided = ConvGeometry::d2((2, 2), (1, 1));
    let e1 = g.leaky_relu(conv(b, x, "enc.1", strided), leak);
    shapes.push(("enc1", g.shape(e1)));
    let e2 = g.leaky_relu(conv(b, e1, "enc.2", strided), leak);
    shapes.push(("enc2", g.shape(e2)));
    let mut skips = vec![e1, e2];
    let mut h = e2;
    for (i, name) in ["enc3", "enc4", "enc5"].into_iter().enumerate() {
        let pre = conv_block(b, h, &format!("enc.b{}", i + 3));
        skips.push(pre);
        h = g.avg_pool_axis(pre, 2, 2);
        shapes.push((name, g.shape(h)));
    }
    Ok(Encoded { features: h, skips })
}

/// Channel concatenation of the branch grids `[B, C, 8, T']`.
pub fn fuse<T: Scalar>(g: &Graph<T>, audio: Var, visual: Option<Var>, emotion: Option<Var>) -> Result<Var> {
    let parts: Vec<Var> = [Some(audio), visual, emotion].into_iter().flatten().collect();
    let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| g.shape(p)).collect();
    let a = &shapes[0];
    if shapes.iter().any(|s| s.len() != 4 || s[0] != a[0] || s[2] != a[2] || s[3] != a[3]) {
        let times: Vec<String> = shapes.iter().map(|s| s.last().map_or("?".into(), |t| t.to_string())).collect();
        return Err(Error::shape(format!(
            "fusion inputs disagree (time lengths audio/visual/emotion = {}; shapes {shapes:?})",
            times.join("/")
        )));
    }
    Ok(g.concat(&parts, 1))
}

/// 1×1 convolution from the fused width back to the branch width.
pub fn bottleneck<T: Scalar>(b: &Binder<T>, f: Var) -> Result<Var> {
    let w = b.params.get("bottleneck.w").ok_or_else(|| Error::invalid("missing bottleneck"))?;
    let cin = w.value.shape()[1];
    let got = b.graph.shape(f)[1];
    if got != cin {
        return Err(Error::shape(format!("bottleneck expects {cin} channels, got {got}")));
    }
    Ok(conv(b, f, "bottleneck", ConvGeometry::d2((1, 1), (0, 0))))
}

/// Decoder: three unpool + skip + conv-block stages, then two transposed
/// convs with skips, ending in the pre-activation mask `[B, 1, 256, T]`.
pub fn decode<T: Scalar>(b: &Binder<T>, z: Var, skips: &[Var], shapes: &mut Vec<(&'static str, Vec<usize>)>) -> Result<Var> {
    let g = b.graph;
    if skips.len() != 5 {
        return Err(Error::shape(format!("decoder needs 5 skips, got {}", skips.len())));
    }
    let leak = T::lit(LEAK);
    let mut h = z;
    for (stage, skip, name) in [(5, skips[4], "dec5"), (4, skips[3], "dec4"), (3, skips[2], "dec3")] {
        let up = g.repeat_axis(h, 2, 2);
        if g.shape(up) != g.shape(skip) {
            return Err(Error::shape(format!("decoder stage {stage}: {:?} vs skip {:?}", g.shape(up), g.shape(skip))));
        }
        h = conv_block(b, g.concat(&[up, skip], 1), &format!("dec.b{stage}"));
        shapes.push((name, g.shape(h)));
    }
    let strided = ConvGeometry::d2((2, 2), (1, 1));
    let h = g.concat(&[h, skips[1]], 1);
    let h = g.leaky_relu(g.conv_transpose(h, b.var("dec.up2.w"), Some(b.var("dec.up2.b")), strided), leak);
    shapes.push(("dec2", g.shape(h)));
    let h = g.concat(&[h, skips[0]], 1);
    let logits = g.conv_transpose(h, b.var("dec.head.w"), Some(b.var("dec.head.b")), strided);
    shapes.push(("dec1", g.shape(logits)));
    Ok(logits)
}

fn context_branch<T: Scalar>(
    b: &Binder<T>,
    features: Option<&Array3<T>>,
    channels: usize,
    what: &str,
    batch: usize,
) -> Result<Var> {
    let f = features.ok_or_else(|| Error::invalid(format!("{what} features are required by this configuration")))?;
    if f.shape()[0] != batch || f.shape()[1] != channels || f.shape()[2] == 0 {
        return Err(Error::shape(format!("{what} features {:?}, expected [{batch}, {channels}, N]", f.shape())));
    }
    Ok(b.graph.constant(f.clone().into_dyn()))
}

/// Full forward pass on `b.graph`.
pub fn forward<T: Scalar>(b: &Binder<T>, config: &ModelConfig, input: &ModelInput<T>) -> Result<Forward> {
    let g = b.graph;
    let (batch, bins, frames) = input.noisy_mag.dim();
    if bins != NET_BINS + 1 {
        return Err(Error::shape(format!("expected {} frequency bins, got {bins}", NET_BINS + 1)));
    }
    let used = frames / TIME_STRIDE * TIME_STRIDE;
    if used == 0 {
        return Err(Error::shape(format!("need at least {TIME_STRIDE} frames, got {frames}")));
    }
    let mut shapes = vec![("spectrogram", vec![batch, bins, frames])];
    let compressed = input
        .noisy_mag
        .slice_axis(Axis(1), Slice::from(0..NET_BINS))
        .slice_axis(Axis(2), Slice::from(0..used))
        .mapv(|v| v.ln_1p())
        .into_shape_with_order((batch, 1, NET_BINS, used))
        .expect("contiguous")
        .into_dyn();
    let x = g.constant(compressed);
    shapes.push(("input", g.shape(x)));
    let enc = audio_encode(b, x, &mut shapes)?;
    let t_feat = g.shape(enc.features)[3];

    let visual = if config.use_video {
        let v = context_branch(b, input.visual.as_ref(), VISUAL_DIM, "visual", batch)?;
        let v = broadcast_upsample(g, tcn_forward(b, v), t_feat);
        shapes.push(("visual", g.shape(v)));
        Some(v)
    } else {
        None
    };
    let emotion = if config.use_emotion {
        let e = context_branch(b, input.emotion.as_ref(), EMOTION_DIM, "emotion", batch)?;
        let e = broadcast_upsample(g, project(b, e), t_feat);
        shapes.push(("emotion", g.shape(e)));
        Some(e)
    } else {
        None
    };
    let fused = fuse(g, enc.features, visual, emotion)?;
    shapes.push(("fused", g.shape(fused)));
    let z = bottleneck(b, fused)?;
    shapes.push(("bottleneck", g.shape(z)));
    let logits = decode(b, z, &enc.skips, &mut shapes)?;
    let mask = g.sigmoid(logits);
    shapes.push(("mask", g.shape(mask)));

    // back to [B, 257, T]: reuse the last mask column for cropped frames and
    // pass the Nyquist row through unchanged
    let mut m = g.reshape(mask, &[batch, NET_BINS, used]);
    if frames > used {
        let last = g.narrow(m, 2, used - 1, used);
        let mut parts = vec![m];
        parts.extend(std::iter::repeat_n(last, frames - used));
        m = g.concat(&parts, 2);
    }
    let ones = g.constant(ArrayD::from_elem(IxDyn(&[batch, 1, frames]), T::one()));
    let full = g.concat(&[m, ones], 1);
    let noisy = g.constant(input.noisy_mag.clone().into_dyn());
    let enhanced = g.mul(full, noisy);
    shapes.push(("enhanced", g.shape(enhanced)));
    Ok(Forward { enhanced, mask, shapes })
}

/// Ablation configurations in increasing order of context.
pub fn ablation_modes() -> [(&'static str, bool, bool); 3] {
    [("ase", false, false), ("avse", true, false), ("e-avse", true, true)]
}
