//! Training loss and objective evaluation metrics: MSE, SI-SDR, STOI, and
//! PESQ through an external command.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::error::{Error, Result};
use crate::media_io::{save_wav, AudioClip};
use crate::tensor::{Real, Tensor};

pub use crate::stoi::stoi;

pub const SI_SDR_CAP_DB: f64 = 60.0;
pub const SI_SDR_EPS: f64 = 1e-12;
pub const PESQ_RANGE: [f64; 2] = [-0.5, 4.5];
/// Environment variable consulted when no PESQ command is given explicitly.
pub const PESQ_ENV: &str = "AUREXA_PESQ_CMD";

/// Mean squared error over every element.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("mse: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    if pred.numel() == 0 {
        return Err(Error::Argument("mse of an empty batch".into()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(s / pred.numel() as f64)
}

/// Scale-invariant SDR in dB, capped to ±60.
pub fn si_sdr<S: Copy + Into<f64>>(est: &[S], reference: &[S]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Shape(format!("si_sdr: lengths {} and {}", est.len(), reference.len())));
    }
    if est.len() < 2 {
        return Err(Error::Argument("si_sdr needs at least two samples".into()));
    }
    let centred = |x: &[S]| -> Vec<f64> {
        let m = x.iter().map(|&v| v.into()).sum::<f64>() / x.len() as f64;
        x.iter().map(|&v| v.into() - m).collect()
    };
    let (e, r) = (centred(est), centred(reference));
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::Degenerate("si_sdr reference is constant".into()));
    }
    // A constant estimate recovers nothing of the reference; without this the
    // epsilons cancel to 0 dB.
    if e.iter().all(|&v| v == 0.0) {
        return Ok(-SI_SDR_CAP_DB);
    }
    let alpha = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (a, b) in e.iter().zip(&r) {
        let s = alpha * b;
        target += s * s;
        noise += (a - s) * (a - s);
    }
    let db = 10.0 * ((target + SI_SDR_EPS) / (noise + SI_SDR_EPS)).log10();
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// External PESQ evaluator. The template may use `{ref}` and `{est}`; if it
/// names neither, the two paths are appended in that order. Runs under `sh -c`.
#[derive(Clone, Debug, PartialEq)]
pub struct PesqCommand {
    pub template: String,
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.to_string_lossy().replace('\'', "'\\''"))
}

impl PesqCommand {
    pub fn new(template: impl Into<String>) -> Self {
        Self { template: template.into() }
    }

    /// The explicit template if given, else the environment variable, else none.
    pub fn resolve(explicit: Option<&str>) -> Option<Self> {
        explicit
            .map(str::to_string)
            .or_else(|| std::env::var(PESQ_ENV).ok())
            .filter(|t| !t.trim().is_empty())
            .map(Self::new)
    }

    pub fn command_line(&self, reference: &Path, est: &Path) -> String {
        let (r, e) = (shell_quote(reference), shell_quote(est));
        if self.template.contains("{ref}") || self.template.contains("{est}") {
            self.template.replace("{ref}", &r).replace("{est}", &e)
        } else {
            format!("{} {r} {e}", self.template)
        }
    }

    /// Score one pair. A failed launch, nonzero exit, unparsable output or
    /// out-of-range value all yield `None`.
    pub fn score(&self, reference: &Path, est: &Path) -> Option<f64> {
        let out = Command::new("sh").arg("-c").arg(self.command_line(reference, est)).output().ok()?;
        if !out.status.success() {
            return None;
        }
        let v: f64 = String::from_utf8_lossy(&out.stdout).split_whitespace().last()?.parse().ok()?;
        (PESQ_RANGE[0]..=PESQ_RANGE[1]).contains(&v).then_some(v)
    }
}

/// One estimate/reference pair. Paths are handed to the PESQ tool when known;
/// otherwise temporary WAVs are written.
#[derive(Clone, Debug)]
pub struct ClipPair {
    pub id: String,
    pub est: AudioClip,
    pub reference: AudioClip,
    pub paths: Option<(PathBuf, PathBuf)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMetrics {
    pub id: String,
    pub pesq: Option<f64>,
    pub stoi: f64,
    pub si_sdr_db: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub pesq: Option<f64>,
    pub stoi: f64,
    pub si_sdr_db: f64,
    pub mse: f64,
    pub clips: Vec<ClipMetrics>,
    /// Clips dropped because a metric failed, with the reason.
    pub failures: Vec<(String, String)>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub pesq: Option<PesqCommand>,
}

pub fn clip_metrics(pair: &ClipPair, opts: &EvalOptions) -> Result<ClipMetrics> {
    let (est, reference) = (&pair.est, &pair.reference);
    if est.sample_rate_hz != reference.sample_rate_hz {
        return Err(Error::Argument(format!(
            "sample rates differ: {} vs {}",
            est.sample_rate_hz, reference.sample_rate_hz
        )));
    }
    let n = est.len();
    let mse = mse_loss(
        &Tensor::from_vec(&[n], est.samples.clone()),
        &Tensor::from_vec(&[reference.len()], reference.samples.clone()),
    )?;
    let sdr = si_sdr(&est.samples, &reference.samples)?;
    let st = stoi(&est.samples, &reference.samples, est.sample_rate_hz)?;
    let pesq = match &opts.pesq {
        None => None,
        Some(cmd) => match &pair.paths {
            Some((r, e)) => cmd.score(r, e),
            None => {
                let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
                let (r, e) = (dir.path().join("ref.wav"), dir.path().join("est.wav"));
                save_wav(reference, &r)?;
                save_wav(est, &e)?;
                cmd.score(&r, &e)
            }
        },
    };
    Ok(ClipMetrics { id: pair.id.clone(), pesq, stoi: st, si_sdr_db: sdr, mse })
}

/// Per-clip metrics averaged over the surviving clips.
pub fn evaluate_batch(pairs: &[ClipPair], opts: &EvalOptions) -> Result<MetricsReport> {
    let mut clips = Vec::new();
    let mut failures = Vec::new();
    for p in pairs {
        match clip_metrics(p, opts) {
            Ok(m) => clips.push(m),
            Err(e) => failures.push((p.id.clone(), e.to_string())),
        }
    }
    if clips.is_empty() {
        let why = failures.first().map(|(id, e)| format!(" (first: {id}: {e})")).unwrap_or_default();
        return Err(Error::Argument(format!("no clip could be evaluated{why}")));
    }
    let n = clips.len() as f64;
    let mean = |f: fn(&ClipMetrics) -> f64| clips.iter().map(f).sum::<f64>() / n;
    let pesqs: Vec<f64> = clips.iter().filter_map(|c| c.pesq).collect();
    Ok(MetricsReport {
        pesq: (!pesqs.is_empty()).then(|| pesqs.iter().sum::<f64>() / pesqs.len() as f64),
        stoi: mean(|c| c.stoi),
        si_sdr_db: mean(|c| c.si_sdr_db),
        mse: mean(|c| c.mse),
        clips,
        failures,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsReport {
    /// `id,pesq,stoi,si_sdr,mse`, one row per clip then a `mean` row. Absent PESQ is an empty field.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,pesq,stoi,si_sdr,mse\n");
        for c in &self.clips {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{:.8}", c.id, opt(c.pesq), c.stoi, c.si_sdr_db, c.mse);
        }
        let _ = writeln!(s, "mean,{},{:.6},{:.6},{:.8}", opt(self.pesq), self.stoi, self.si_sdr_db, self.mse);
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn tone(n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let t = i as f32 / 16000.0;
                0.4 * (t * 2.0 * std::f32::consts::PI * 180.0).sin() * (1.0 + (t * 19.0).sin()) * 0.5
            })
            .collect()
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::from_f64(&[2, 3], &noise(6, 1));
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((mse_loss(&b, &a).unwrap() - 0.01).abs() < 1e-12);
        assert!(matches!(mse_loss(&a, &Tensor::<f64>::zeros(&[3, 2])), Err(Error::Shape(_))));
    }

    #[test]
    fn mse_matches_double_loop() {
        let (p, t) = (noise(4 * 37, 2), noise(4 * 37, 3));
        let mut acc = 0.0;
        for b in 0..4 {
            for i in 0..37 {
                acc += (p[b * 37 + i] - t[b * 37 + i]).powi(2);
            }
        }
        let want = acc / (4.0 * 37.0);
        let got = mse_loss(&Tensor::<f64>::from_f64(&[4, 37], &p), &Tensor::from_f64(&[4, 37], &t)).unwrap();
        assert!(((got - want) / want).abs() < 1e-10);
    }

    #[test]
    fn si_sdr_worked_examples() {
        let r = noise(1000, 4);
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP_DB);
        assert_eq!(si_sdr(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), -SI_SDR_CAP_DB);
        let triple: Vec<f64> = r.iter().map(|v| 3.0 * v).collect();
        assert!((si_sdr(&triple, &r).unwrap() - si_sdr(&r, &r).unwrap()).abs() < 1e-6);
        assert!(matches!(si_sdr(&[1.0, 2.0], &[0.5, 0.5]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn si_sdr_of_known_mixture() {
        // Orthogonal unit-power noise at gain g gives exactly -20 log10 g.
        let r: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let n: Vec<f64> = (0..1000).map(|i| if (i / 2) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let e: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + 0.1 * b).collect();
        assert!((si_sdr(&e, &r).unwrap() - 20.0).abs() < 1e-9);
    }

    fn pair(id: &str, est: Vec<f32>, reference: Vec<f32>) -> ClipPair {
        ClipPair { id: id.into(), est: AudioClip::new(est), reference: AudioClip::new(reference), paths: None }
    }

    #[test]
    fn batch_of_identical_pairs() {
        let s = tone(16000);
        let rep = evaluate_batch(&[pair("a", s.clone(), s.clone())], &EvalOptions::default()).unwrap();
        assert!((rep.stoi - 1.0).abs() < 1e-6);
        assert_eq!(rep.si_sdr_db, 60.0);
        assert_eq!(rep.pesq, None);
        assert_eq!(rep.clips[0].stoi, rep.stoi);
        assert_eq!(rep.mse, 0.0);
    }

    #[test]
    fn batch_means_and_failures() {
        let s = tone(16000);
        let n: Vec<f32> = s.iter().enumerate().map(|(i, v)| if i % 2 == 0 { *v } else { -*v }).collect();
        let half: Vec<f32> = s.iter().zip(&n).map(|(a, b)| 0.5 * (a + b)).collect();
        let tenth: Vec<f32> = s.iter().zip(&n).map(|(a, b)| a + 0.3 * b).collect();
        let r0 = si_sdr(&half, &s).unwrap();
        let r1 = si_sdr(&tenth, &s).unwrap();
        let rep = evaluate_batch(
            &[pair("x", half, s.clone()), pair("y", tenth, s.clone()), pair("short", vec![0.1; 100], vec![0.2; 100])],
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.clips.len(), 2);
        assert_eq!(rep.failures.len(), 1);
        assert!((rep.si_sdr_db - 0.5 * (r0 + r1)).abs() < 1e-12);
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "id,pesq,stoi,si_sdr,mse");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean,,"));
    }

    #[test]
    fn pesq_hook() {
        let s = tone(16000);
        let ok = EvalOptions { pesq: Some(PesqCommand::new("echo 2.5 #")) };
        let rep = evaluate_batch(&[pair("a", s.clone(), s.clone())], &ok).unwrap();
        assert_eq!(rep.pesq, Some(2.5));
        let seen = PesqCommand::new("test -f {ref} && test -f {est} && echo 1.25");
        assert_eq!(evaluate_batch(&[pair("a", s.clone(), s.clone())], &EvalOptions { pesq: Some(seen) }).unwrap().pesq, Some(1.25));
        for bad in ["exit 3", "echo 7.0", "echo nope"] {
            let o = EvalOptions { pesq: Some(PesqCommand::new(bad)) };
            assert_eq!(evaluate_batch(&[pair("a", s.clone(), s.clone())], &o).unwrap().clips[0].pesq, None, "{bad}");
        }
        let cmd = PesqCommand::new("pesq");
        assert_eq!(cmd.command_line(Path::new("a b.wav"), Path::new("it's.wav")), "pesq 'a b.wav' 'it'\\''s.wav'");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn si_sdr_is_scale_and_offset_invariant(seed in 0u64..10_000, c in prop::sample::select(vec![0.1, 3.0, 10.0]), dc in -2.0f64..2.0) {
            let r = noise(256, seed);
            let e: Vec<f64> = noise(256, seed + 1).iter().zip(&r).map(|(n, r)| r + 0.5 * n).collect();
            let base = si_sdr(&e, &r).unwrap();
            let scaled: Vec<f64> = e.iter().map(|v| c * v).collect();
            let shifted: Vec<f64> = e.iter().map(|v| v + dc).collect();
            prop_assert!((si_sdr(&scaled, &r).unwrap() - base).abs() < 1e-6);
            prop_assert!((si_sdr(&shifted, &r).unwrap() - base).abs() < 1e-6);
        }

        #[test]
        fn mse_is_symmetric(seed in 0u64..10_000, n in 1usize..300) {
            let a = Tensor::<f64>::from_f64(&[n], &noise(n, seed));
            let b = Tensor::from_f64(&[n], &noise(n, seed + 7));
            prop_assert_eq!(mse_loss(&a, &b).unwrap(), mse_loss(&b, &a).unwrap());
            prop_assert!(mse_loss(&a, &b).unwrap() >= 0.0);
        }

        #[test]
        fn stoi_of_identical_signals_is_one(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f32> = tone(12000).iter().map(|v| v + 0.05 * rng.random_range(-1.0f32..1.0)).collect();
            prop_assert!((stoi(&s, &s, 16000).unwrap() - 1.0).abs() < 1e-6);
        }
    }
}
