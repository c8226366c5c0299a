//! STOI against frozen scores from the Python reference implementation
//! (regenerate with `python3 tools/stoi_reference.py`).

use std::path::PathBuf;

use avse_core::stoi::stoi;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn read_f32(name: &str) -> Vec<f32> {
    let bytes = std::fs::read(data(name)).unwrap();
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

#[test]
fn matches_python_reference() {
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data("stoi_ref.json")).unwrap()).unwrap();
    let fs = meta["fs"].as_u64().unwrap() as u32;
    let clean = read_f32(meta["clean"].as_str().unwrap());
    let mut last = f64::INFINITY;
    for case in meta["cases"].as_array().unwrap() {
        let mix = read_f32(case["file"].as_str().unwrap());
        let expected = case["stoi"].as_f64().unwrap();
        let got = stoi(&mix, &clean, fs).unwrap();
        assert!((got - expected).abs() < 1e-6, "snr {}: {got} vs {expected}", case["snr_db"]);
        assert!(got < last, "scores should fall with SNR");
        last = got;
    }
}
