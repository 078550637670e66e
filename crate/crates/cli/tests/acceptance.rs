//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Two criteria have a documented failing clause (see README). Such a failure is
//! tagged `known` only when every other clause passes and the failing clause
//! fails in the documented way; any other failure makes the process exit non-zero.
//!
//! Positional arguments select criteria by number (`cargo test --test acceptance -- 4 8`).

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use despeckle::forward::{corrupt_log, Dims, ImageTensor, LogImage};
use despeckle::imgio::{encode_pnm, from_intensity, RawImage};
use despeckle::metrics::{gaussian_window, psnr, psnr_from_mse, ssim, PSNR_CAP_DB};
use despeckle::nn::{Architecture, MlpConfig};
use despeckle::rng::RandomSource;
use despeckle::samplers::{predict_y0, reverse_pass, Method, SamplerConfig};
use despeckle::score::{analytic_gaussian_score, DeltaScore, ScoreModel};
use despeckle::train::{load_checkpoint, save_checkpoint, train, InMemoryDataset, TrainConfig};
use despeckle::verify::{self, PropertyResult, VerifyOptions};
use despeckle::NoiseSchedule;

struct Outcome {
    passed: bool,
    summary: String,
    known: Option<&'static str>,
}

impl Outcome {
    fn new(passed: bool, summary: impl Into<String>) -> Self {
        Self {
            passed,
            summary: summary.into(),
            known: None,
        }
    }

    fn known_if(mut self, cond: bool, why: &'static str) -> Self {
        if !self.passed && cond {
            self.known = Some(why);
        }
        self
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn full_opts() -> VerifyOptions {
    VerifyOptions {
        seed: 2024,
        samples: 100_000,
        grad_seeds: 10,
        flip_drift: false,
    }
}

fn property(r: &PropertyResult) -> String {
    format!("{} (measured {:.3e}, limit {:.3e})", r.detail, r.measured, r.threshold)
}

fn c1() -> Outcome {
    let (r, t) = timed(|| verify::forward_kernel(&full_opts(), 200).unwrap());
    Outcome::new(
        r.passed && t.as_secs_f64() < 5.0,
        format!("{}; {:.2}s", property(&r), t.as_secs_f64()),
    )
}

fn c2() -> Outcome {
    let (r, t) = timed(|| verify::martingale(&full_opts(), &[100, 200, 300]).unwrap());
    Outcome::new(
        r.passed && t.as_secs_f64() < 5.0,
        format!("{}; {:.2}s", property(&r), t.as_secs_f64()),
    )
}

fn c3() -> Outcome {
    let r = verify::path_equivalence(&full_opts(), 200).unwrap();
    Outcome::new(r.passed, property(&r))
}

fn c4() -> Outcome {
    let (out, t) = timed(|| {
        let s = NoiseSchedule::default();
        let k = 300;
        let mut r = RandomSource::new(7, 40);
        let n = 256;
        let y0 = LogImage::new(
            Dims::new(1, 1, n),
            (0..n).map(|_| -5.5 * r.uniform()).collect(),
        )
        .unwrap();
        let model = DeltaScore::new(y0.clone(), s.clone());
        let sample = corrupt_log(&y0, k, &s, &mut r).unwrap();
        let max_err = |a: &LogImage| {
            a.data()
                .iter()
                .zip(y0.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        let pred = predict_y0(&sample.y_k, k, &model, &s).unwrap();
        let run = |m: Method, rng: &mut RandomSource| {
            let cfg = SamplerConfig::new(m, &s);
            reverse_pass(vec![sample.y_k.clone()], k, &model, &s, &cfg, rng)
                .unwrap()
                .remove(0)
        };
        let ddim = run(Method::Ddim, &mut r);
        let ode = run(Method::Ode, &mut r);
        // Euler on the flow contracts y - y0 + eta/2 by (1 - 1/(2j)) per step, so the
        // residual is the start offset times prod_j (1 - 1/(2j)).
        let contraction: f64 = (1..=k).map(|j| 1.0 - 0.5 / j as f64).product();
        let predicted = sample
            .noise
            .iter()
            .map(|z| (s.eta(k).unwrap().sqrt() * z * contraction).abs())
            .fold(0.0, f64::max);
        (max_err(&pred), max_err(&ddim), max_err(&ode), predicted)
    });
    let (ep, ed, eo, predicted) = out;
    let exact_ok = ep <= 1e-12 && ed <= 1e-12 && t.as_secs_f64() < 1.0;
    let passed = exact_ok && eo <= 1e-3;
    Outcome::new(
        passed,
        format!(
            "predict_y0 {ep:.2e} (<=1e-12), DDIM {ed:.2e} (<=1e-12), ODE {eo:.3e} (<=1e-3; \
             Euler residual predicted {predicted:.3e}); {:.3}s",
            t.as_secs_f64()
        ),
    )
    .known_if(
        exact_ok && (eo - predicted).abs() <= 1e-9 * predicted,
        "Euler ODE residual equals the closed-form contraction, not <=1e-3",
    )
}

fn c5() -> Outcome {
    let opts = full_opts();
    let mut worst = 0.0f64;
    let mut all = true;
    let mut parts = Vec::new();
    for k in [50, 200, 400] {
        for f in [0.0, 0.5] {
            let r = verify::ddim_marginal(&opts, k, f).unwrap();
            all &= r.passed;
            worst = worst.max(r.measured);
            parts.push(format!("k={k},z={f}: z={:.2}", r.measured));
        }
    }
    Outcome::new(all, format!("worst z {worst:.2} (<5); {}", parts.join(" ")))
}

fn c6() -> Outcome {
    let r = verify::gradient_checks(&full_opts()).unwrap();
    Outcome::new(r.passed, property(&r))
}

fn c7() -> Outcome {
    let ((worst, detail), t) = timed(|| {
        let mut r = RandomSource::new(1, 77);
        let batch = 512;
        let items: Vec<ImageTensor> = (0..batch * 50)
            .map(|_| ImageTensor::new(Dims::new(1, 1, 1), vec![r.normal().exp()]).unwrap())
            .collect();
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: batch,
            learning_rate: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        let arch = Architecture::Mlp(MlpConfig::default());
        let mut data = InMemoryDataset::new(items, 1).unwrap();
        let c = train(cfg, arch, &mut data, |_| Ok(())).unwrap();
        let s = c.schedule.clone();
        let m = c.network.score_model(&s);
        let mut worst = 0.0f64;
        let mut detail = Vec::new();
        for k in [100, 200, 300] {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..=600 {
                let y = -3.0 + 0.01 * i as f64;
                let li = LogImage::new(Dims::new(1, 1, 1), vec![y]).unwrap();
                let a = m.score(&li, k).unwrap()[0];
                let b = analytic_gaussian_score(&li, k, &[0.0], &[1.0], &s).unwrap()[0];
                num += (a - b) * (a - b);
                den += b * b;
            }
            let rel = (num / den).sqrt();
            worst = worst.max(rel);
            detail.push(format!("k={k}: {:.2}%", 100.0 * rel));
        }
        (worst, detail.join(", "))
    });
    Outcome::new(
        worst < 0.10 && t.as_secs_f64() < 600.0,
        format!("relative L2 {detail} (<10%); {:.1}s", t.as_secs_f64()),
    )
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_despeckle"));
    for (k, _) in std::env::vars() {
        if k.starts_with("DESPECKLE_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(cmd: &mut Command) -> Result<String, String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{:?} failed: {}",
            cmd,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Smooth random grayscale content: a gradient, Gaussian blobs and one soft-edged disc.
fn synthetic_patch(r: &mut RandomSource, size: usize) -> RawImage {
    let base = 0.25 + 0.4 * r.uniform();
    let (gx, gy) = (0.3 * (r.uniform() - 0.5), 0.3 * (r.uniform() - 0.5));
    let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                size as f64 * r.uniform(),
                size as f64 * r.uniform(),
                2.0 + 6.0 * r.uniform(),
                0.5 * (r.uniform() - 0.5),
            )
        })
        .collect();
    let (dx, dy, dr, da) = (
        size as f64 * r.uniform(),
        size as f64 * r.uniform(),
        4.0 + 8.0 * r.uniform(),
        0.4 * (r.uniform() - 0.5),
    );
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let mut v = base + gx * (fx / size as f64 - 0.5) + gy * (fy / size as f64 - 0.5);
            for &(cx, cy, rad, a) in &blobs {
                let d2 = (fx - cx).powi(2) + (fy - cy).powi(2);
                v += a * (-d2 / (2.0 * rad * rad)).exp();
            }
            let d = ((fx - dx).powi(2) + (fy - dy).powi(2)).sqrt();
            v += da / (1.0 + ((d - dr) / 0.8).exp());
            data.push(v.clamp(0.05, 0.95));
        }
    }
    let t = ImageTensor::new(Dims::new(1, size, size), data).unwrap();
    from_intensity(&t).unwrap()
}

fn write_set(dir: &Path, count: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut r = RandomSource::new(seed, 50);
    for i in 0..count {
        let img = synthetic_patch(&mut r, 32);
        std::fs::write(dir.join(format!("p{i:04}.pgm")), encode_pnm(&img)).unwrap();
    }
}

fn mean_psnr(clean: &Path, test: &Path) -> Result<f64, String> {
    let csv = run(bin().args(["eval", "--clean"]).arg(clean).arg("--test").arg(test))?;
    let mean = csv
        .lines()
        .find(|l| l.starts_with("mean,"))
        .ok_or("no mean row")?;
    mean.split(',').nth(2).unwrap().parse().map_err(|e| format!("{e}"))
}

fn c8_inner(root: &Path) -> Result<Outcome, String> {
    let train_dir = root.join("train");
    let clean = root.join("clean");
    let noisy = root.join("noisy");
    write_set(&train_dir, 512, 1);
    write_set(&clean, 50, 2);
    run(bin()
        .args(["corrupt", "--level", "0.08", "--seed", "11", "--input"])
        .arg(&clean)
        .arg("--output")
        .arg(&noisy))?;
    let ckpt = root.join("model.ckpt");
    let (res, t_train) = timed(|| {
        run(bin()
            .args(["train", "--seed", "5", "--data"])
            .arg(&train_dir)
            .arg("--out")
            .arg(&ckpt))
    });
    res?;
    let base = mean_psnr(&clean, &noisy)?;
    let mut scores = Vec::new();
    for m in ["ode", "ddim", "stochastic"] {
        let out = root.join(m);
        run(bin()
            .args(["denoise", "--level", "0.08", "--seed", "3", "--method", m, "--checkpoint"])
            .arg(&ckpt)
            .arg("--input")
            .arg(&noisy)
            .arg("--output")
            .arg(&out))?;
        scores.push(mean_psnr(&clean, &out)?);
    }
    let (ode, ddim, sto) = (scores[0], scores[1], scores[2]);
    let gain = ode - base;
    let ordered = ode >= ddim && ddim >= sto;
    Ok(Outcome::new(
        gain >= 2.0 && ordered,
        format!(
            "noisy {base:.2} dB; ODE {ode:.2} (gain {gain:+.2}, need >=2), DDIM {ddim:.2}, \
             stochastic {sto:.2}; ordering ODE>=DDIM>=stochastic {}; training {:.0}s",
            if ordered { "holds" } else { "does not hold" },
            t_train.as_secs_f64()
        ),
    )
    .known_if(
        gain >= 2.0 && ddim >= sto && ode < ddim,
        "DDIM outscores ODE at desk scale; gain and DDIM>=stochastic hold",
    ))
}

fn c8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (r, t) = timed(|| c8_inner(dir.path()));
    match r {
        Ok(o) => {
            let in_time = t.as_secs_f64() < 3600.0;
            Outcome {
                passed: o.passed && in_time,
                summary: format!("{}; total {:.0}s", o.summary, t.as_secs_f64()),
                known: o.known.filter(|_| in_time),
            }
        }
        Err(e) => Outcome::new(false, e),
    }
}

fn c9_inner(root: &Path) -> Result<Outcome, String> {
    let data = root.join("data");
    write_set(&data, 8, 3);
    let train_once = |name: &str| -> Result<Vec<u8>, String> {
        let out = root.join(name);
        run(bin()
            .args([
                "train", "--epochs", "2", "--batch", "4", "--base-width", "8", "--emb-dim", "8",
                "--seed", "9", "--data",
            ])
            .arg(&data)
            .arg("--out")
            .arg(&out))?;
        std::fs::read(&out).map_err(|e| e.to_string())
    };
    let a = train_once("a.ckpt")?;
    let b = train_once("b.ckpt")?;
    let train_same = a == b;

    let noisy = root.join("noisy");
    run(bin()
        .args(["corrupt", "--level", "0.08", "--input"])
        .arg(&data)
        .arg("--output")
        .arg(&noisy))?;
    let denoise_once = |name: &str| -> Result<Vec<Vec<u8>>, String> {
        let out = root.join(name);
        run(bin()
            .args(["denoise", "--method", "ode", "--level", "0.08", "--checkpoint"])
            .arg(root.join("a.ckpt"))
            .arg("--input")
            .arg(&noisy)
            .arg("--output")
            .arg(&out))?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(&out)
            .map_err(|e| e.to_string())?
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        Ok(files.iter().map(|p| std::fs::read(p).unwrap()).collect())
    };
    let d1 = denoise_once("d1")?;
    let d2 = denoise_once("d2")?;
    let denoise_same = d1 == d2 && !d1.is_empty();

    let loaded = load_checkpoint(root.join("a.ckpt")).map_err(|e| e.to_string())?;
    let again = root.join("again.ckpt");
    save_checkpoint(&loaded, &again).map_err(|e| e.to_string())?;
    let round_trip = std::fs::read(&again).map_err(|e| e.to_string())? == a;

    Ok(Outcome::new(
        train_same && denoise_same && round_trip,
        format!(
            "seeded training identical: {train_same}; ODE denoise identical ({} files): \
             {denoise_same}; checkpoint round trip identical: {round_trip}",
            d1.len()
        ),
    ))
}

fn c9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    c9_inner(dir.path()).unwrap_or_else(|e| Outcome::new(false, e))
}

/// Direct SSIM: the full 2-D Gaussian window at every valid position.
fn ssim_reference(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window(11, 1.5);
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let mut total = 0.0;
    let mut count = 0.0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = g[i] * g[j];
                    let (p, q) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    total / count
}

fn c10() -> Outcome {
    let mut r = RandomSource::new(10, 60);
    let mut worst_ssim = 0.0f64;
    let mut worst_psnr = 0.0f64;
    for _ in 0..10 {
        let a: Vec<f64> = (0..1024).map(|_| 1e-3 + r.uniform() * 0.999).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|v| (v + 0.2 * (r.uniform() - 0.5)).clamp(1e-3, 1.0))
            .collect();
        let ta = ImageTensor::new(Dims::new(1, 32, 32), a.clone()).unwrap();
        let tb = ImageTensor::new(Dims::new(1, 32, 32), b.clone()).unwrap();
        worst_ssim = worst_ssim.max((ssim(&ta, &tb).unwrap() - ssim_reference(&a, &b, 32, 32)).abs());
        let m: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 1024.0;
        let reference = 10.0 * (1.0 / m).log10();
        worst_psnr = worst_psnr.max((psnr(&ta, &tb, 1.0).unwrap() - reference).abs());
    }
    let x = ImageTensor::new(
        Dims::new(1, 32, 32),
        (0..1024).map(|_| 1e-3 + r.uniform() * 0.999).collect(),
    )
    .unwrap();
    let self_ssim = ssim(&x, &x).unwrap();
    let self_psnr = psnr(&x, &x, 1.0).unwrap();
    let tiny = psnr_from_mse(1e-30, 1.0);
    let passed = worst_ssim <= 1e-9
        && worst_psnr <= 1e-9
        && (self_ssim - 1.0).abs() <= 1e-12
        && self_psnr == PSNR_CAP_DB
        && tiny == PSNR_CAP_DB;
    Outcome::new(
        passed,
        format!(
            "SSIM vs direct {worst_ssim:.1e}, PSNR vs direct {worst_psnr:.1e} (<=1e-9); \
             ssim(x,x)={self_ssim}; psnr(x,x)={self_psnr}; psnr(mse=1e-30)={tiny} (cap {PSNR_CAP_DB})"
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "forward kernel", c1),
    (2, "martingale", c2),
    (3, "path/closed-form equivalence", c3),
    (4, "exact-score recovery", c4),
    (5, "DDIM marginal preservation", c5),
    (6, "autodiff correctness", c6),
    (7, "learning sanity", c7),
    (8, "end-to-end denoising", c8),
    (9, "determinism", c9),
    (10, "metric oracles", c10),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.trim_start_matches(['C', 'c']).parse().ok())
        .collect();
    let (mut known, mut unexpected) = (0, 0);
    for (n, name, f) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let o = f();
        let tag = match (o.passed, o.known) {
            (true, _) => String::new(),
            (false, Some(why)) => {
                known += 1;
                format!(" [known: {why}]")
            }
            (false, None) => {
                unexpected += 1;
                String::new()
            }
        };
        println!(
            "[{}] C{n} {name}: {}{tag}",
            if o.passed { "PASS" } else { "FAIL" },
            o.summary
        );
    }
    println!("{known} known failure(s), {unexpected} unexpected failure(s)");
    if unexpected > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
