//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every export returns a JSON string; the page parses it with `JSON.parse`.
//! The `*_json` functions hold the logic and also run natively in tests.

use avse_core::metrics::si_sdr;
use avse_core::scene_data::{achieved_snr_db, mix_scene, synth_scene, SynthConfig};
use avse_core::stoi::stoi;
use avse_core::video_encoder::shift_mask;
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// One second of audio at 25 frames per second, 64-pixel frames.
pub fn demo_config() -> SynthConfig {
    SynthConfig { samples: 16_000, frames: 25, frame_size: 64, ..Default::default() }
}

/// Per-bucket (min, max) pairs for drawing a waveform at `buckets` columns.
pub fn envelope(samples: &[f32], buckets: usize) -> Vec<[f32; 2]> {
    let buckets = buckets.clamp(1, samples.len().max(1));
    let per = samples.len().div_ceil(buckets).max(1);
    samples
        .chunks(per)
        .map(|c| c.iter().fold([f32::INFINITY, f32::NEG_INFINITY], |[lo, hi], &v| [lo.min(v), hi.max(v)]))
        .collect()
}

#[derive(Serialize)]
struct Preview {
    id: String,
    snr_db: f64,
    interferers: usize,
    samples: usize,
    frames: usize,
    frame_size: usize,
    mixture: Vec<[f32; 2]>,
    target: Vec<[f32; 2]>,
    frame_rgba: Vec<u8>,
}

pub fn scene_preview_json(seed: u64, snr_db: f64, frame: usize, buckets: usize) -> Result<String, String> {
    let cfg = SynthConfig { snr_min_db: snr_db, snr_max_db: snr_db, ..demo_config() };
    let scene = synth_scene(seed, &cfg).map_err(|e| e.to_string())?;
    let v = &scene.video;
    let f = frame.min(v.num_frames - 1);
    let frame_rgba = v
        .frame(f)
        .chunks(3)
        .flat_map(|px| {
            let q = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
            [q(px[0]), q(px[1]), q(px[2]), 255]
        })
        .collect();
    let p = Preview {
        id: scene.id.clone(),
        snr_db: scene.snr_db,
        interferers: scene.interferers.len(),
        samples: scene.mixture.len(),
        frames: v.num_frames,
        frame_size: v.width,
        mixture: envelope(&scene.mixture.samples, buckets),
        target: envelope(&scene.target.samples, buckets),
        frame_rgba,
    };
    serde_json::to_string(&p).map_err(|e| e.to_string())
}

/// The noisy mixture scored against its clean target at `steps` SNRs in `[lo, hi]`.
pub fn metrics_vs_snr_json(seed: u64, lo: f64, hi: f64, steps: usize) -> Result<String, String> {
    if steps < 2 || !(lo < hi) {
        return Err("need at least 2 steps and lo < hi".into());
    }
    let scene = synth_scene(seed, &demo_config()).map_err(|e| e.to_string())?;
    if scene.interferers.is_empty() {
        return Err("scene has no interferers".into());
    }
    let target = &scene.target;
    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let snr = lo + (hi - lo) * k as f64 / (steps - 1) as f64;
        let mix = mix_scene(target, &scene.interferers, snr).map_err(|e| e.to_string())?;
        rows.push(json!({
            "snr_db": snr,
            "achieved_db": achieved_snr_db(target, &mix),
            "si_sdr_db": si_sdr(&mix.samples, &target.samples).map_err(|e| e.to_string())?,
            "stoi": stoi(&mix.samples, &target.samples, target.sample_rate_hz).map_err(|e| e.to_string())?,
        }));
    }
    Ok(json!({ "id": scene.id, "interferers": scene.interferers.len(), "rows": rows }).to_string())
}

/// Region labels of the rolled `size`x`size` grid as seen by the attention mask,
/// plus the allowed-pair matrix of window `selected`.
pub fn shift_mask_json(size: usize, window: usize, shift: usize, selected: usize) -> Result<String, String> {
    if window == 0 || size % window != 0 || shift >= window {
        return Err(format!("need window dividing {size} and shift < window"));
    }
    let mask = shift_mask::<f32>(size, size, window, shift);
    let l = window * window;
    let per_row = size / window;
    let windows = per_row * per_row;
    // Tokens that may attend each other share a label; the label is the
    // smallest such token index, so it comes straight from the mask.
    let mut labels = vec![0usize; size * size];
    for w in 0..windows {
        let m = &mask.data()[w * l * l..(w + 1) * l * l];
        for i in 0..l {
            let first = (0..l).find(|&j| m[i * l + j] == 0.0).unwrap_or(i);
            let (y, x) = ((w / per_row) * window + i / window, (w % per_row) * window + i % window);
            let (fy, fx) = ((w / per_row) * window + first / window, (w % per_row) * window + first % window);
            labels[y * size + x] = fy * size + fx;
        }
    }
    // Compact labels to 0..n in raster order.
    let mut seen = std::collections::BTreeMap::new();
    let labels: Vec<usize> = labels
        .iter()
        .map(|&lab| {
            let n = seen.len();
            *seen.entry(lab).or_insert(n)
        })
        .collect();
    let sel = selected.min(windows - 1);
    let allowed: Vec<u8> = mask.data()[sel * l * l..(sel + 1) * l * l].iter().map(|&v| u8::from(v == 0.0)).collect();
    let masked = allowed.iter().filter(|&&a| a == 0).count();
    Ok(json!({
        "size": size,
        "window": window,
        "shift": shift,
        "windows": windows,
        "regions": seen.len(),
        "labels": labels,
        "selected": sel,
        "allowed": allowed,
        "masked_pairs": masked,
    })
    .to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn scene_preview(seed: u32, snr_db: f64, frame: u32, buckets: u32) -> Result<String, JsError> {
    js(scene_preview_json(seed as u64, snr_db, frame as usize, buckets as usize))
}

#[wasm_bindgen]
pub fn metrics_vs_snr(seed: u32, lo: f64, hi: f64, steps: u32) -> Result<String, JsError> {
    js(metrics_vs_snr_json(seed as u64, lo, hi, steps as usize))
}

#[wasm_bindgen]
pub fn shift_mask_view(size: u32, window: u32, shift: u32, selected: u32) -> Result<String, JsError> {
    js(shift_mask_json(size as usize, window as usize, shift as usize, selected as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: Result<String, String>) -> Value {
        serde_json::from_str(&s.unwrap()).unwrap()
    }

    #[test]
    fn preview_has_waveforms_and_a_frame() {
        let v = parse(scene_preview_json(3, 5.0, 10, 200));
        assert_eq!(v["samples"], 16000);
        assert_eq!(v["mixture"].as_array().unwrap().len(), 200);
        assert_eq!(v["frame_rgba"].as_array().unwrap().len(), 64 * 64 * 4);
        assert!((v["snr_db"].as_f64().unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(envelope(&[0.5, -1.0, 0.25], 2), vec![[-1.0, 0.5], [0.25, 0.25]]);
    }

    #[test]
    fn mixture_scores_rise_with_snr() {
        let v = parse(metrics_vs_snr_json(1, -10.0, 10.0, 5));
        let rows = v["rows"].as_array().unwrap();
        for w in rows.windows(2) {
            assert!(w[1]["si_sdr_db"].as_f64() > w[0]["si_sdr_db"].as_f64());
            assert!(w[1]["stoi"].as_f64() > w[0]["stoi"].as_f64());
        }
        for r in rows {
            assert!((r["achieved_db"].as_f64().unwrap() - r["snr_db"].as_f64().unwrap()).abs() < 1e-4);
        }
        assert!(metrics_vs_snr_json(1, 5.0, 5.0, 5).is_err());
    }

    #[test]
    fn mask_view_finds_nine_regions() {
        let v = parse(shift_mask_json(14, 7, 3, 3));
        assert_eq!(v["windows"], 4);
        assert_eq!(v["regions"], 9);
        assert!(v["masked_pairs"].as_u64().unwrap() > 0);
        let plain = parse(shift_mask_json(14, 7, 0, 0));
        assert_eq!(plain["regions"], 4);
        assert_eq!(plain["masked_pairs"], 0);
        assert!(shift_mask_json(14, 5, 1, 0).is_err());
    }
}
