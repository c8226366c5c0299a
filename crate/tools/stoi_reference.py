"""Freeze pystoi scores for a few synthetic mixtures.

Writes crates/core/tests/data/stoi_ref_*.f32 (little-endian float32) and
stoi_ref.json. Run from the repository root.
"""
import json
import pathlib

import numpy as np
from pystoi import stoi

FS = 16000
OUT = pathlib.Path("crates/core/tests/data")


def speechlike(rng, n):
    t = np.arange(n) / FS
    f0 = 120 + 30 * np.sin(2 * np.pi * 0.7 * t)
    phase = 2 * np.pi * np.cumsum(f0) / FS
    voiced = sum(np.sin(k * phase) / k for k in range(1, 9))
    env = np.clip(np.sin(2 * np.pi * 3.1 * t), 0, None) ** 1.5
    return (0.3 * env * voiced + 0.01 * rng.standard_normal(n)).astype(np.float32)


def main():
    rng = np.random.default_rng(7)
    n = 2 * FS
    clean = speechlike(rng, n)
    noise = rng.standard_normal(n).astype(np.float32)
    OUT.mkdir(parents=True, exist_ok=True)
    clean.astype("<f4").tofile(OUT / "stoi_ref_clean.f32")
    cases = []
    pt, pn = float(np.mean(clean.astype(np.float64) ** 2)), float(np.mean(noise.astype(np.float64) ** 2))
    for snr in (10, 0, -10):
        g = np.sqrt(pt / (pn * 10 ** (snr / 10)))
        mix = (clean + g * noise).astype(np.float32)
        name = f"stoi_ref_snr{snr:+d}.f32"
        mix.astype("<f4").tofile(OUT / name)
        cases.append({"file": name, "snr_db": snr, "stoi": float(stoi(clean.astype(np.float64), mix.astype(np.float64), FS))})
    json.dump({"fs": FS, "clean": "stoi_ref_clean.f32", "cases": cases}, open(OUT / "stoi_ref.json", "w"), indent=2)


if __name__ == "__main__":
    main()
