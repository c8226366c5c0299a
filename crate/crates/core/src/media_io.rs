//! Audio and video ingestion with the pipeline's fixed conventions:
//! 16 kHz mono audio, 3 s clips (48 000 samples), 75 frames at 25 FPS,
//! 112x112 RGB frames with values in `[0, 1]`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const FPS: u32 = 25;
pub const CLIP_SAMPLES: usize = 48_000;
pub const CLIP_FRAMES: usize = 75;
pub const FRAME_SIZE: usize = 112;
pub const PEAK_TARGET: f32 = 0.95;

/// Magic bytes of the raw frame tensor file.
pub const FRAME_TENSOR_MAGIC: [u8; 4] = *b"AVSF";

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>) -> Self {
        Self { samples, sample_rate_hz: SAMPLE_RATE_HZ }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Frames stored frame-major as `[T, H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
}

impl VideoClip {
    pub const CHANNELS: usize = 3;

    pub fn new(frames: Vec<f32>, num_frames: usize, height: usize, width: usize) -> Self {
        assert_eq!(frames.len(), num_frames * height * width * Self::CHANNELS, "video buffer size mismatch");
        Self { frames, num_frames, height, width, fps: FPS }
    }

    pub fn zeros(num_frames: usize, height: usize, width: usize) -> Self {
        Self::new(vec![0.0; num_frames * height * width * 3], num_frames, height, width)
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * Self::CHANNELS
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.frames[((t * self.height + y) * self.width + x) * 3 + c]
    }
}

/// Read a 16-bit PCM WAV at 16 kHz, averaging channels into mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::NotFound(path.display().to_string())
        }
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, format!("not a readable WAV file ({other})")),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(path, "sample format must be integer PCM"));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::format(path, format!("bit depth {} is unsupported (need 16)", spec.bits_per_sample)));
    }
    if spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(Error::format(
            path,
            format!("sample rate {} Hz is unsupported (need {SAMPLE_RATE_HZ})", spec.sample_rate),
        ));
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path, format!("corrupt sample data ({e})")))?;
    let samples = raw
        .chunks(channels)
        .map(|frame| {
            let sum: f32 = frame.iter().map(|&s| s as f32 / 32768.0).sum();
            sum / channels as f32
        })
        .collect();
    Ok(AudioClip::new(samples))
}

/// Write a 16-bit PCM mono WAV at 16 kHz. Samples saturate at the integer limits.
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &clip.samples {
        writer.write_sample(quantize(s)).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

pub fn quantize(s: f32) -> i16 {
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Truncate the tail or zero-pad it so the clip has exactly `target_len` samples.
pub fn clip_or_pad_audio(clip: &AudioClip, target_len: usize) -> AudioClip {
    let mut samples = clip.samples.clone();
    samples.resize(target_len, 0.0);
    AudioClip { samples, sample_rate_hz: clip.sample_rate_hz }
}

/// Truncate, or pad by repeating the final frame, to exactly `target_frames`.
pub fn clip_or_pad_video(clip: &VideoClip, target_frames: usize) -> Result<VideoClip> {
    if clip.num_frames == 0 && target_frames > 0 {
        return Err(Error::Argument("cannot pad an empty video: no frame to repeat".into()));
    }
    let n = clip.frame_len();
    let keep = clip.num_frames.min(target_frames);
    let mut frames = clip.frames[..keep * n].to_vec();
    if target_frames > keep {
        let last = clip.frame(clip.num_frames - 1).to_vec();
        for _ in keep..target_frames {
            frames.extend_from_slice(&last);
        }
    }
    Ok(VideoClip { frames, num_frames: target_frames, height: clip.height, width: clip.width, fps: clip.fps })
}

/// Bilinear resampling (half-pixel centers) of every frame to `size x size`,
/// followed by clamping to `[0, 1]`.
pub fn resize_frames(clip: &VideoClip, size: usize) -> Result<VideoClip> {
    if size == 0 {
        return Err(Error::Argument("frame size must be positive".into()));
    }
    if clip.num_frames == 0 || clip.height == 0 || clip.width == 0 {
        return Err(Error::Argument("cannot resize an empty video".into()));
    }
    let (h, w) = (clip.height, clip.width);
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let rows = axis(size, h);
    let cols = axis(size, w);
    let mut frames = Vec::with_capacity(clip.num_frames * size * size * 3);
    for t in 0..clip.num_frames {
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                for c in 0..3 {
                    let p00 = clip.pixel(t, y0, x0, c);
                    let p01 = clip.pixel(t, y0, x1, c);
                    let p10 = clip.pixel(t, y1, x0, c);
                    let p11 = clip.pixel(t, y1, x1, c);
                    let top = p00 + (p01 - p00) * fx;
                    let bot = p10 + (p11 - p10) * fx;
                    frames.push((top + (bot - top) * fy).clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(VideoClip { frames, num_frames: clip.num_frames, height: size, width: size, fps: clip.fps })
}

/// Scale so the largest magnitude is 0.95; silent clips are returned unchanged.
pub fn peak_normalize(clip: &AudioClip) -> AudioClip {
    let peak = clip.peak();
    if peak <= 0.0 {
        return clip.clone();
    }
    let gain = PEAK_TARGET / peak;
    AudioClip {
        samples: clip.samples.iter().map(|&s| s * gain).collect(),
        sample_rate_hz: clip.sample_rate_hz,
    }
}

/// Write the raw frame tensor: magic, then T, H, W, C as little-endian u32,
/// then frame-major little-endian f32 pixels.
pub fn save_frame_tensor(clip: &VideoClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(20);
    header.extend_from_slice(&FRAME_TENSOR_MAGIC);
    for v in [clip.num_frames, clip.height, clip.width, VideoClip::CHANNELS] {
        header.extend_from_slice(&(v as u32).to_le_bytes());
    }
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut body = Vec::with_capacity(clip.frames.len() * 4);
    for &p in &clip.frames {
        body.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&body).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_frame_tensor(path: impl AsRef<Path>) -> Result<VideoClip> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path.display().to_string())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || bytes[..4] != FRAME_TENSOR_MAGIC {
        return Err(Error::format(path, "missing frame tensor header"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, h, w, c) = (field(0), field(1), field(2), field(3));
    if c != VideoClip::CHANNELS {
        return Err(Error::format(path, format!("channel count {c} is unsupported (need 3)")));
    }
    let expected = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format(path, "frame tensor dimensions overflow"))?;
    if bytes.len() != 20 + expected * 4 {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, found {}", expected * 4, bytes.len() - 20),
        ));
    }
    let frames: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if frames.iter().any(|p| !p.is_finite()) {
        return Err(Error::format(path, "non-finite pixel value"));
    }
    Ok(VideoClip::new(frames, t, h, w))
}

/// Load a directory of per-frame 8-bit RGB images in lexicographic order.
pub fn load_frame_dir(dir: impl AsRef<Path>) -> Result<VideoClip> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(dir.display().to_string())
            } else {
                Error::io(dir, e)
            }
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut frames = Vec::new();
    let mut dims = None;
    for p in &paths {
        let img = image::open(p).map_err(|e| Error::format(p, e.to_string()))?.to_rgb8();
        let (w, h) = img.dimensions();
        match dims {
            None => dims = Some((h as usize, w as usize)),
            Some(d) if d != (h as usize, w as usize) => {
                return Err(Error::format(p, format!("frame size {w}x{h} differs from earlier frames")));
            }
            _ => {}
        }
        frames.extend(img.into_raw().into_iter().map(|v| v as f32 / 255.0));
    }
    let (h, w) = dims.ok_or_else(|| Error::NotFound(format!("no frame images in {}", dir.display())))?;
    Ok(VideoClip::new(frames, paths.len(), h, w))
}

/// Write frames as `frame_00000.png`, ... into `dir`.
pub fn save_frame_dir(clip: &VideoClip, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..clip.num_frames {
        let raw: Vec<u8> = clip.frame(t).iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::RgbImage::from_raw(clip.width as u32, clip.height as u32, raw)
            .expect("frame buffer matches its dimensions");
        let p = dir.join(format!("frame_{t:05}.png"));
        img.save(&p).map_err(|e| Error::format(&p, e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_raw_wav(path: &Path, channels: u16, rate: u32, bits: u16, data: &[i16]) {
        let spec = hound::WavSpec { channels, sample_rate: rate, bits_per_sample: bits, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in data {
            if bits == 16 {
                w.write_sample(s).unwrap();
            } else {
                w.write_sample(s as i32).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn one_second_mono_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let mut data = vec![0i16; 16000];
        data[0] = 16384;
        write_raw_wav(&p, 1, 16000, 16, &data);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.len(), 16000);
        assert_eq!(clip.samples[0], 0.5);
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw_wav(&p, 2, 16000, 16, &[16384, -16384, 8192, 8192]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples, vec![0.0, 0.25]);
    }

    #[test]
    fn rejects_bad_rate_depth_and_non_wav() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        write_raw_wav(&p, 1, 44100, 16, &[0; 10]);
        let err = load_wav(&p).unwrap_err().to_string();
        assert!(err.contains("sample rate 44100"), "{err}");
        let p = dir.path().join("b.wav");
        write_raw_wav(&p, 1, 16000, 24, &[0; 10]);
        let err = load_wav(&p).unwrap_err().to_string();
        assert!(err.contains("bit depth 24"), "{err}");
        let p = dir.path().join("junk.wav");
        fs::write(&p, b"definitely not riff").unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Format { .. })));
        assert!(matches!(load_wav(dir.path().join("missing.wav")), Err(Error::NotFound(_))));
    }

    #[test]
    fn save_saturates_and_zero_clip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        save_wav(&AudioClip::new(vec![0.0; 48000]), &p).unwrap();
        let mut r = hound::WavReader::open(&p).unwrap();
        let raw: Vec<i16> = r.samples::<i16>().map(|s| s.unwrap()).collect();
        assert_eq!(raw.len(), 48000);
        assert!(raw.iter().all(|&s| s == 0));
        assert_eq!(quantize(1.0), 32767);
        assert_eq!(quantize(-1.0), -32768);
        let err = save_wav(&AudioClip::new(vec![0.0]), dir.path().join("no/such/dir.wav"));
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn clip_or_pad_audio_cases() {
        let clip = AudioClip::new((0..50000).map(|i| (i as f32 * 1e-3).sin()).collect());
        let same = clip_or_pad_audio(&AudioClip::new(clip.samples[..48000].to_vec()), 48000);
        assert_eq!(same.samples, clip.samples[..48000]);
        let short = clip_or_pad_audio(&AudioClip::new(clip.samples[..40000].to_vec()), 48000);
        assert_eq!(short.len(), 48000);
        assert!(short.samples[40000..].iter().all(|&s| s == 0.0));
        let long = clip_or_pad_audio(&clip, 48000);
        assert_eq!(long.samples, clip.samples[..48000]);
    }

    fn numbered_video(frames: usize) -> VideoClip {
        let (h, w) = (4, 4);
        let data = (0..frames).flat_map(|t| std::iter::repeat(t as f32 / 100.0).take(h * w * 3)).collect();
        VideoClip::new(data, frames, h, w)
    }

    #[test]
    fn clip_or_pad_video_cases() {
        let v = numbered_video(75);
        assert_eq!(clip_or_pad_video(&v, 75).unwrap(), v);
        let v70 = numbered_video(70);
        let padded = clip_or_pad_video(&v70, 75).unwrap();
        assert_eq!(padded.num_frames, 75);
        for t in 70..75 {
            assert_eq!(padded.frame(t), v70.frame(69));
        }
        let v80 = numbered_video(80);
        let cut = clip_or_pad_video(&v80, 75).unwrap();
        assert_eq!(cut.frames, v80.frames[..75 * v80.frame_len()]);
        assert!(clip_or_pad_video(&VideoClip::zeros(0, 4, 4), 75).is_err());
    }

    #[test]
    fn resize_constant_identity_and_clamp() {
        let v = VideoClip::new(vec![0.3; 224 * 224 * 3], 1, 224, 224);
        let r = resize_frames(&v, 112).unwrap();
        assert_eq!((r.height, r.width), (112, 112));
        assert!(r.frames.iter().all(|&p| (p - 0.3).abs() < 1e-6));

        let data: Vec<f32> = (0..112 * 112 * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let v = VideoClip::new(data.clone(), 1, 112, 112);
        assert_eq!(resize_frames(&v, 112).unwrap().frames, data);

        let v = VideoClip::new(vec![1.2; 8 * 8 * 3], 1, 8, 8);
        assert!(resize_frames(&v, 5).unwrap().frames.iter().all(|&p| p <= 1.0));
        assert!(resize_frames(&v, 0).is_err());
    }

    #[test]
    fn peak_normalize_cases() {
        let clip = AudioClip::new(vec![0.5, -0.25, 0.1]);
        let n = peak_normalize(&clip);
        assert!((n.samples[0] - 0.95).abs() < 1e-7);
        assert!((n.samples[1] + 0.475).abs() < 1e-7);
        let z = AudioClip::new(vec![0.0; 10]);
        assert_eq!(peak_normalize(&z), z);
        let p = AudioClip::new(vec![0.95, -0.3]);
        let q = peak_normalize(&p);
        assert!(q.samples.iter().zip(&p.samples).all(|(a, b)| (a - b).abs() < 1e-7));
    }

    #[test]
    fn frame_tensor_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let v = numbered_video(3);
        save_frame_tensor(&v, &p).unwrap();
        assert_eq!(load_frame_tensor(&p).unwrap(), v);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_frame_tensor(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn frame_dir_round_trip_within_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let v = numbered_video(3);
        save_frame_dir(&v, dir.path().join("frames")).unwrap();
        let back = load_frame_dir(dir.path().join("frames")).unwrap();
        assert_eq!(back.num_frames, 3);
        assert!(back.frames.iter().zip(&v.frames).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn wav_round_trip_within_one_step(samples in proptest::collection::vec(-1.0f32..(1.0 - 1.0 / 32768.0), 1..400)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("rt.wav");
            let clip = AudioClip::new(samples);
            save_wav(&clip, &p).unwrap();
            let back = load_wav(&p).unwrap();
            prop_assert_eq!(back.len(), clip.len());
            for (a, b) in back.samples.iter().zip(&clip.samples) {
                prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }

        #[test]
        fn audio_length_always_target(len in 0usize..=96000) {
            let clip = AudioClip::new(vec![0.1; len]);
            prop_assert_eq!(clip_or_pad_audio(&clip, 48000).len(), 48000);
        }

        #[test]
        fn peak_normalize_idempotent(samples in proptest::collection::vec(-3.0f32..3.0, 1..200)) {
            let once = peak_normalize(&AudioClip::new(samples));
            let twice = peak_normalize(&once);
            for (a, b) in once.samples.iter().zip(&twice.samples) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn resize_preserves_constants(value in 0.0f32..1.0, h in 1usize..40, w in 1usize..40, size in 1usize..50) {
            let v = VideoClip::new(vec![value; h * w * 3], 1, h, w);
            let r = resize_frames(&v, size).unwrap();
            prop_assert!(r.frames.iter().all(|&p| (p - value).abs() < 1e-6));
        }
    }
}
