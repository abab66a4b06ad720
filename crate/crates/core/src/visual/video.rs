//! Frame I/O. AVI files with uncompressed (`DIB `) or motion-JPEG video are
//! decoded natively; other containers go through an `ffmpeg` executable when
//! one is available on `PATH`.

use std::io::Cursor;
use std::path::Path;
use std::process::Command;

use image::{ImageEncoder, RgbImage};

use crate::error::{Error, Result};

/// RGB frames stored contiguously as N × H × W × 3 bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub data: Vec<u8>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
}

impl FrameSequence {
    pub fn new(data: Vec<u8>, frames: usize, height: usize, width: usize, fps: f64) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("frame sequence must have at least one non-empty frame"));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::invalid(format!("invalid frame rate {fps}")));
        }
        if data.len() != frames * height * width * 3 {
            return Err(Error::shape(format!(
                "{} bytes for {frames}×{height}×{width}×3 frames",
                data.len()
            )));
        }
        Ok(Self { data, frames, height, width, fps })
    }

    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn frame_bytes(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.frame_bytes();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_image(&self, i: usize) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.frame(i).to_vec()).expect("frame buffer size")
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames as f64 / self.fps
    }

    /// Frames covering `[start_s, start_s + length_s)`: `round(length_s·fps)`
    /// frames, repeating the last frame if the clip is shorter.
    pub fn segment(&self, start_s: f64, length_s: f64) -> Result<Self> {
        let n = (length_s * self.fps).round() as usize;
        let first = (start_s * self.fps).round() as usize;
        if n == 0 || first >= self.frames {
            return Err(Error::invalid(format!(
                "segment at {start_s}s of {length_s}s is outside a {:.3}s clip",
                self.duration_secs()
            )));
        }
        let mut data = Vec::with_capacity(n * self.frame_bytes());
        for i in 0..n {
            data.extend_from_slice(self.frame((first + i).min(self.frames - 1)));
        }
        Self::new(data, n, self.height, self.width, self.fps)
    }
}

/// Decodes every frame of a video file at its native rate.
pub fn read_frames(path: &Path) -> Result<FrameSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 12 && &bytes[0..4] == b"RIFF" {
        match &bytes[8..12] {
            b"AVI " => return read_avi(path, &bytes),
            b"WAVE" => return Err(Error::NoVideoStream(path.to_path_buf())),
            _ => {}
        }
    }
    read_with_ffmpeg(path)
}

fn video_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Video { path: path.to_path_buf(), reason: reason.into() }
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn le_i32(b: &[u8], at: usize) -> i32 {
    le_u32(b, at) as i32
}

struct Chunk<'a> {
    id: [u8; 4],
    /// For LIST/RIFF chunks, the list type; otherwise zero.
    list_type: [u8; 4],
    body: &'a [u8],
}

fn chunks(mut b: &[u8]) -> Vec<Chunk<'_>> {
    let mut out = Vec::new();
    while b.len() >= 8 {
        let id = [b[0], b[1], b[2], b[3]];
        let size = le_u32(b, 4) as usize;
        let end = (8 + size).min(b.len());
        let body = &b[8..end];
        if &id == b"LIST" || &id == b"RIFF" {
            if body.len() >= 4 {
                out.push(Chunk { id, list_type: [body[0], body[1], body[2], body[3]], body: &body[4..] });
            }
        } else {
            out.push(Chunk { id, list_type: [0; 4], body });
        }
        let next = 8 + size + (size & 1);
        if next > b.len() {
            break;
        }
        b = &b[next..];
    }
    out
}

struct VideoStream {
    index: usize,
    handler: [u8; 4],
    compression: [u8; 4],
    width: usize,
    height: i32,
    bit_count: u16,
    fps: f64,
}

fn find_video_stream(hdrl: &[u8]) -> Option<VideoStream> {
    let mut index = 0;
    for c in chunks(hdrl) {
        if &c.id != b"LIST" || &c.list_type != b"strl" {
            continue;
        }
        let inner = chunks(c.body);
        let strh = inner.iter().find(|s| &s.id == b"strh").map(|s| s.body);
        let strf = inner.iter().find(|s| &s.id == b"strf").map(|s| s.body);
        if let (Some(h), Some(f)) = (strh, strf) {
            if h.len() >= 32 && &h[0..4] == b"vids" && f.len() >= 40 {
                let scale = le_u32(h, 20).max(1) as f64;
                let rate = le_u32(h, 24) as f64;
                return Some(VideoStream {
                    index,
                    handler: [h[4], h[5], h[6], h[7]],
                    compression: [f[16], f[17], f[18], f[19]],
                    width: le_i32(f, 4).unsigned_abs() as usize,
                    height: le_i32(f, 8),
                    bit_count: u16::from_le_bytes([f[14], f[15]]),
                    fps: rate / scale,
                });
            }
        }
        index += 1;
    }
    None
}

fn collect_movi<'a>(list: &'a [u8], prefix: &[u8; 2], out: &mut Vec<&'a [u8]>, compressed_only: bool) {
    for c in chunks(list) {
        if &c.id == b"LIST" {
            collect_movi(c.body, prefix, out, compressed_only);
        } else if c.id[0..2] == prefix[..] && (&c.id[2..4] == b"dc" || (!compressed_only && &c.id[2..4] == b"db")) {
            out.push(c.body);
        }
    }
}

fn read_avi(path: &Path, bytes: &[u8]) -> Result<FrameSequence> {
    let riff = chunks(bytes);
    let top = riff
        .first()
        .filter(|c| &c.list_type == b"AVI ")
        .ok_or_else(|| video_err(path, "malformed RIFF header"))?;
    let parts = chunks(top.body);
    let hdrl = parts
        .iter()
        .find(|c| &c.list_type == b"hdrl")
        .ok_or_else(|| video_err(path, "missing hdrl list"))?;
    let stream = find_video_stream(hdrl.body).ok_or_else(|| Error::NoVideoStream(path.to_path_buf()))?;
    let movi = parts
        .iter()
        .find(|c| &c.list_type == b"movi")
        .ok_or_else(|| video_err(path, "missing movi list"))?;
    if !(stream.fps > 0.0 && stream.fps.is_finite()) {
        return Err(video_err(path, "stream header has no frame rate"));
    }
    let prefix = format!("{:02}", stream.index);
    let prefix = [prefix.as_bytes()[0], prefix.as_bytes()[1]];
    let is_mjpeg = matches!(&stream.compression, b"MJPG" | b"mjpg") || matches!(&stream.handler, b"MJPG" | b"mjpg");
    let is_raw = stream.compression == [0; 4] || &stream.compression == b"DIB ";
    let mut payloads = Vec::new();
    collect_movi(movi.body, &prefix, &mut payloads, false);
    if payloads.is_empty() {
        return Err(video_err(path, "video stream has no frames"));
    }
    let (w, h) = (stream.width, stream.height.unsigned_abs() as usize);
    let mut data = Vec::with_capacity(payloads.len() * w * h * 3);
    for (i, p) in payloads.iter().enumerate() {
        if is_mjpeg {
            let img = image::load_from_memory_with_format(p, image::ImageFormat::Jpeg)
                .map_err(|e| video_err(path, format!("frame {i}: {e}")))?
                .to_rgb8();
            if img.width() as usize != w || img.height() as usize != h {
                return Err(video_err(path, format!("frame {i} has size {}×{}", img.width(), img.height())));
            }
            data.extend_from_slice(img.as_raw());
        } else if is_raw && stream.bit_count == 24 {
            let stride = (w * 3).div_ceil(4) * 4;
            if p.len() < stride * h {
                return Err(video_err(path, format!("frame {i} is truncated")));
            }
            let bottom_up = stream.height > 0;
            for row in 0..h {
                let src = if bottom_up { h - 1 - row } else { row };
                for x in 0..w {
                    let o = src * stride + x * 3;
                    data.extend_from_slice(&[p[o + 2], p[o + 1], p[o]]);
                }
            }
        } else {
            return Err(video_err(
                path,
                format!(
                    "unsupported codec {:?}/{} bpp (native reader handles MJPG and 24-bit DIB)",
                    String::from_utf8_lossy(&stream.compression),
                    stream.bit_count
                ),
            ));
        }
    }
    FrameSequence::new(data, payloads.len(), h, w, stream.fps)
}

fn read_with_ffmpeg(path: &Path) -> Result<FrameSequence> {
    let probe = Command::new("ffprobe")
        .args(["-v", "error", "-select_streams", "v:0", "-show_entries", "stream=width,height,r_frame_rate", "-of", "csv=p=0"])
        .arg(path)
        .output()
        .map_err(|e| video_err(path, format!("not an AVI file and ffprobe is unavailable: {e}")))?;
    if !probe.status.success() {
        return Err(video_err(path, String::from_utf8_lossy(&probe.stderr).trim().to_string()));
    }
    let text = String::from_utf8_lossy(&probe.stdout);
    let line = text.lines().next().unwrap_or("").trim();
    if line.is_empty() {
        return Err(Error::NoVideoStream(path.to_path_buf()));
    }
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() < 3 {
        return Err(video_err(path, format!("unexpected ffprobe output {line:?}")));
    }
    let width: usize = fields[0].parse().map_err(|_| video_err(path, "bad width"))?;
    let height: usize = fields[1].parse().map_err(|_| video_err(path, "bad height"))?;
    let fps = match fields[2].split_once('/') {
        Some((n, d)) => n.parse::<f64>().unwrap_or(0.0) / d.parse::<f64>().unwrap_or(1.0),
        None => fields[2].parse().unwrap_or(0.0),
    };
    let out = Command::new("ffmpeg")
        .args(["-v", "error", "-i"])
        .arg(path)
        .args(["-map", "0:v:0", "-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
        .output()
        .map_err(|e| video_err(path, format!("ffmpeg unavailable: {e}")))?;
    if !out.status.success() {
        return Err(video_err(path, String::from_utf8_lossy(&out.stderr).trim().to_string()));
    }
    let frame = width * height * 3;
    if frame == 0 || out.stdout.len() % frame != 0 {
        return Err(video_err(path, "decoded byte count is not a whole number of frames"));
    }
    let n = out.stdout.len() / frame;
    FrameSequence::new(out.stdout, n, height, width, fps)
}

/// Video codec used by [`write_avi`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AviCodec {
    /// Lossless 24-bit bottom-up BGR.
    Raw,
    /// Motion JPEG at the given quality (1–100).
    Mjpeg(u8),
}

fn push_chunk(out: &mut Vec<u8>, id: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(id);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
    if body.len() % 2 == 1 {
        out.push(0);
    }
}

fn push_list(out: &mut Vec<u8>, kind: &[u8; 4], list_type: &[u8; 4], body: &[u8]) {
    let mut inner = Vec::with_capacity(body.len() + 4);
    inner.extend_from_slice(list_type);
    inner.extend_from_slice(body);
    push_chunk(out, kind, &inner);
}

fn u32s(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes a single-stream AVI file.
pub fn write_avi(path: &Path, seq: &FrameSequence, codec: AviCodec) -> Result<()> {
    let (w, h) = (seq.width, seq.height);
    let mut payloads = Vec::with_capacity(seq.frames);
    for i in 0..seq.frames {
        match codec {
            AviCodec::Raw => {
                let stride = (w * 3).div_ceil(4) * 4;
                let mut buf = vec![0u8; stride * h];
                let f = seq.frame(i);
                for row in 0..h {
                    let dst = (h - 1 - row) * stride;
                    for x in 0..w {
                        let s = (row * w + x) * 3;
                        buf[dst + x * 3] = f[s + 2];
                        buf[dst + x * 3 + 1] = f[s + 1];
                        buf[dst + x * 3 + 2] = f[s];
                    }
                }
                payloads.push(buf);
            }
            AviCodec::Mjpeg(q) => {
                let mut buf = Vec::new();
                image::codecs::jpeg::JpegEncoder::new_with_quality(Cursor::new(&mut buf), q.clamp(1, 100))
                    .write_image(seq.frame(i), w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
                payloads.push(buf);
            }
        }
    }
    let (fourcc, compression, chunk_id): (&[u8; 4], [u8; 4], &[u8; 4]) = match codec {
        AviCodec::Raw => (b"DIB ", [0; 4], b"00db"),
        AviCodec::Mjpeg(_) => (b"MJPG", *b"MJPG", b"00dc"),
    };
    // Frame rate as a rational with microsecond resolution.
    let scale = 1000u32;
    let rate = (seq.fps * scale as f64).round() as u32;
    let max_payload = payloads.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let frames = seq.frames as u32;

    let mut avih = u32s(&[
        (1e6 / seq.fps).round() as u32,
        max_payload.saturating_mul(seq.fps.ceil() as u32),
        0,
        0x10,
        frames,
        0,
        1,
        max_payload,
        w as u32,
        h as u32,
    ]);
    avih.extend_from_slice(&[0u8; 16]);

    let mut strh = Vec::with_capacity(56);
    strh.extend_from_slice(b"vids");
    strh.extend_from_slice(fourcc);
    strh.extend_from_slice(&u32s(&[0, 0, 0, scale, rate, 0, frames, max_payload, u32::MAX, 0]));
    for v in [0u16, 0, w as u16, h as u16] {
        strh.extend_from_slice(&v.to_le_bytes());
    }
    let mut strf = u32s(&[40, w as u32, h as u32]);
    strf.extend_from_slice(&1u16.to_le_bytes());
    strf.extend_from_slice(&24u16.to_le_bytes());
    strf.extend_from_slice(&compression);
    strf.extend_from_slice(&u32s(&[(w * h * 3) as u32, 0, 0, 0, 0]));

    let mut strl = Vec::new();
    push_chunk(&mut strl, b"strh", &strh);
    push_chunk(&mut strl, b"strf", &strf);
    let mut hdrl = Vec::new();
    push_chunk(&mut hdrl, b"avih", &avih);
    push_list(&mut hdrl, b"LIST", b"strl", &strl);

    let mut movi = Vec::new();
    let mut index = Vec::new();
    for p in &payloads {
        let offset = movi.len() as u32 + 4;
        push_chunk(&mut movi, chunk_id, p);
        index.extend_from_slice(chunk_id);
        index.extend_from_slice(&u32s(&[0x10, offset, p.len() as u32]));
    }

    let mut body = Vec::new();
    push_list(&mut body, b"LIST", b"hdrl", &hdrl);
    push_list(&mut body, b"LIST", b"movi", &movi);
    push_chunk(&mut body, b"idx1", &index);
    let mut file = Vec::with_capacity(body.len() + 12);
    push_list(&mut file, b"RIFF", b"AVI ", &body);
    crate::util::write_atomic(path, &file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(frames: usize, h: usize, w: usize, fps: f64) -> FrameSequence {
        let mut data = Vec::with_capacity(frames * h * w * 3);
        for t in 0..frames {
            for y in 0..h {
                for x in 0..w {
                    data.extend_from_slice(&[(x * 4) as u8, (y * 4) as u8, (t * 10) as u8]);
                }
            }
        }
        FrameSequence::new(data, frames, h, w, fps).unwrap()
    }

    #[test]
    fn raw_avi_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clip.avi");
        let seq = gradient(7, 10, 13, 30.0);
        write_avi(&p, &seq, AviCodec::Raw).unwrap();
        let back = read_frames(&p).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn mjpeg_avi_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clip.avi");
        let seq = gradient(5, 32, 48, 25.0);
        write_avi(&p, &seq, AviCodec::Mjpeg(95)).unwrap();
        let back = read_frames(&p).unwrap();
        assert_eq!((back.frames, back.height, back.width), (5, 32, 48));
        assert!((back.fps - 25.0).abs() < 1e-9);
        let err: f64 = back.data.iter().zip(&seq.data).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>()
            / seq.data.len() as f64;
        assert!(err < 4.0, "{err}");
    }

    #[test]
    fn four_seconds_at_30_and_25_fps() {
        for (fps, n) in [(30.0, 120), (25.0, 100)] {
            let seq = gradient((4.0 * fps) as usize, 4, 4, fps);
            assert_eq!(seq.segment(0.0, 4.0).unwrap().len(), n);
        }
    }

    #[test]
    fn wav_file_has_no_video_stream() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("audio.wav");
        let w = crate::dsp::Waveform::new(vec![0.0f32; 100], 16_000).unwrap();
        crate::dsp::write_wav(&p, &w, crate::dsp::WavEncoding::Pcm16).unwrap();
        assert!(matches!(read_frames(&p), Err(Error::NoVideoStream(_))));
    }

    #[test]
    fn corrupt_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.avi");
        std::fs::write(&p, b"RIFF\x04\x00\x00\x00AVI ").unwrap();
        assert!(read_frames(&p).is_err());
        assert!(read_frames(&dir.path().join("missing.avi")).is_err());
    }
}
