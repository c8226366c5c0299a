//! Short-time objective intelligibility, numerically matching the widely
//! used Python reference (`pystoi`, non-extended mode).

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const FS: u32 = 10_000;
pub const FRAME_LEN: usize = 256;
pub const NFFT: usize = 512;
pub const NUM_BANDS: usize = 15;
pub const MIN_FREQ: f64 = 150.0;
/// Frames per analysis segment (30 hops of 12.8 ms, 384 ms).
pub const SEGMENT: usize = 30;
pub const BETA_DB: f64 = -15.0;
pub const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..500 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(n: usize, beta: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let denom = bessel_i0(beta);
    (0..n)
        .map(|i| {
            let r = 2.0 * i as f64 / (n - 1) as f64 - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser-windowed low-pass for `p/q` resampling (Octave `resample` design),
/// normalized to unit sum.
fn resample_window(p: u64, q: u64) -> Vec<f64> {
    let rejection_db = 60.0;
    let cutoff = 1.0 / (2 * p.max(q)) as f64;
    let roll_off = cutoff / 10.0;
    let l = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as i64;
    let beta = 0.1102 * (rejection_db - 8.7);
    let win = kaiser((2 * l + 1) as usize, beta);
    let h: Vec<f64> = (-l..=l)
        .zip(&win)
        .map(|(t, &w)| w * 2.0 * p as f64 * cutoff * sinc(2.0 * cutoff * t as f64))
        .collect();
    let s: f64 = h.iter().sum();
    h.into_iter().map(|v| v / s).collect()
}

/// Polyphase rational resampling from `fs_in` to `fs_out` with the filter above.
pub fn resample(x: &[f64], fs_out: u32, fs_in: u32) -> Vec<f64> {
    if fs_out == fs_in {
        return x.to_vec();
    }
    let g = gcd(fs_out as u64, fs_in as u64);
    let (up, down) = (fs_out as u64 / g, fs_in as u64 / g);
    let h: Vec<f64> = resample_window(up, down).into_iter().map(|v| v * up as f64).collect();
    let half = (h.len() - 1) / 2;
    let (up, down) = (up as usize, down as usize);
    let n_out = (x.len() * up).div_ceil(down);
    (0..n_out)
        .map(|k| {
            // y[k] = sum_n x[n] h[half + k*down - n*up]
            let centre = half + k * down;
            let n_hi = (centre / up).min(x.len().saturating_sub(1));
            let n_lo = (centre + 1).saturating_sub(h.len()).div_ceil(up);
            let mut acc = 0.0;
            let mut n = n_lo;
            while n <= n_hi {
                acc += x[n] * h[centre - n * up];
                n += 1;
            }
            acc
        })
        .collect()
}

/// Symmetric Hann window without its zero endpoints (`hanning(n + 2)[1:-1]`).
fn hann(n: usize) -> Vec<f64> {
    let m = n + 2;
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (m - 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(frame)).step_by(hop)
}

/// Drop frames whose clean-signal energy is more than `dyn_range` dB below the loudest frame.
pub fn remove_silent_frames(x: &[f64], y: &[f64], dyn_range: f64, frame: usize, hop: usize) -> (Vec<f64>, Vec<f64>) {
    let w = hann(frame);
    let windowed = |s: &[f64], i: usize| -> Vec<f64> { (0..frame).map(|j| w[j] * s[i + j]).collect() };
    let starts: Vec<usize> = frame_starts(x.len(), frame, hop).collect();
    let xf: Vec<Vec<f64>> = starts.iter().map(|&i| windowed(x, i)).collect();
    let yf: Vec<Vec<f64>> = starts.iter().map(|&i| windowed(y, i)).collect();
    let energies: Vec<f64> =
        xf.iter().map(|f| 20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10()).collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..xf.len()).filter(|&i| max - dyn_range - energies[i] < 0.0).collect();
    let ola = |frames: &[Vec<f64>]| -> Vec<f64> {
        if keep.is_empty() {
            return Vec::new();
        }
        let mut out = vec![0.0; (keep.len() - 1) * hop + frame];
        for (n, &i) in keep.iter().enumerate() {
            for j in 0..frame {
                out[n * hop + j] += frames[i][j];
            }
        }
        out
    };
    (ola(&xf), ola(&yf))
}

/// One-third octave band matrix `[bands][nfft/2 + 1]` as inclusive-exclusive bin ranges.
pub fn third_octave_bands(fs: u32, nfft: usize, num_bands: usize, min_freq: f64) -> Vec<(usize, usize)> {
    let bins = nfft / 2 + 1;
    let step = fs as f64 / nfft as f64;
    let f: Vec<f64> = (0..bins).map(|i| i as f64 * step).collect();
    let nearest = |target: f64| -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &fi) in f.iter().enumerate() {
            let d = (fi - target).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };
    (0..num_bands)
        .map(|k| {
            let k = k as f64;
            let lo = min_freq * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = min_freq * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Band envelopes `[bands][frames]` of `x`.
fn band_envelopes(x: &[f64], bands: &[(usize, usize)], planner: &mut FftPlanner<f64>) -> Vec<Vec<f64>> {
    let w = hann(FRAME_LEN);
    let fft = planner.plan_fft_forward(NFFT);
    let starts: Vec<usize> = frame_starts(x.len(), FRAME_LEN, FRAME_LEN / 2).collect();
    let mut env = vec![Vec::with_capacity(starts.len()); bands.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    for &s in &starts {
        for (j, b) in buf.iter_mut().enumerate() {
            *b = if j < FRAME_LEN { Complex::new(w[j] * x[s + j], 0.0) } else { Complex::new(0.0, 0.0) };
        }
        fft.process(&mut buf);
        for (bi, &(lo, hi)) in bands.iter().enumerate() {
            let p: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            env[bi].push(p.sqrt());
        }
    }
    env
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// STOI of `degraded` against `clean`, both at `fs` Hz.
pub fn stoi<S: Copy + Into<f64>>(degraded: &[S], clean: &[S], fs: u32) -> Result<f64> {
    if degraded.len() != clean.len() {
        return Err(Error::Argument(format!(
            "STOI needs equal lengths, got {} and {}",
            degraded.len(),
            clean.len()
        )));
    }
    if fs == 0 {
        return Err(Error::Argument("sample rate must be positive".into()));
    }
    let to64 = |s: &[S]| -> Vec<f64> { s.iter().map(|&v| v.into()).collect() };
    let x = resample(&to64(clean), FS, fs);
    let y = resample(&to64(degraded), FS, fs);
    let (x, y) = remove_silent_frames(&x, &y, DYN_RANGE_DB, FRAME_LEN, FRAME_LEN / 2);
    let bands = third_octave_bands(FS, NFFT, NUM_BANDS, MIN_FREQ);
    let mut planner = FftPlanner::new();
    let xe = band_envelopes(&x, &bands, &mut planner);
    let ye = band_envelopes(&y, &bands, &mut planner);
    let frames = xe.first().map_or(0, Vec::len);
    if frames < SEGMENT {
        return Err(Error::InsufficientSignal(format!(
            "{frames} non-silent frames remain; STOI needs at least {SEGMENT} (384 ms)"
        )));
    }
    let clip = 10f64.powf(-BETA_DB / 20.0);
    let mut total = 0.0;
    let segments = frames - SEGMENT + 1;
    for m in SEGMENT..=frames {
        for b in 0..NUM_BANDS {
            let xs = &xe[b][m - SEGMENT..m];
            let ys = &ye[b][m - SEGMENT..m];
            let scale = norm(xs) / (norm(ys) + EPS);
            let mut yp: Vec<f64> = ys.iter().zip(xs).map(|(&yv, &xv)| (yv * scale).min(xv * (1.0 + clip))).collect();
            let mut xc = xs.to_vec();
            let my = yp.iter().sum::<f64>() / SEGMENT as f64;
            let mx = xc.iter().sum::<f64>() / SEGMENT as f64;
            yp.iter_mut().for_each(|v| *v -= my);
            xc.iter_mut().for_each(|v| *v -= mx);
            let (ny, nx) = (norm(&yp) + EPS, norm(&xc) + EPS);
            total += yp.iter().zip(&xc).map(|(a, b)| (a / ny) * (b / nx)).sum::<f64>();
        }
    }
    Ok(total / (segments * NUM_BANDS) as f64)
}
