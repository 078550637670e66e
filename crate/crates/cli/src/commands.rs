use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use despeckle::forward::corrupt_intensity;
use despeckle::imgio::{from_intensity, list_pnm_files, load_dataset, read_pnm, to_intensity, write_pnm};
use despeckle::metrics::{MetricReport, MetricRow};
use despeckle::nn::{Architecture, UNetConfig};
use despeckle::rng::{streams, RandomSource};
use despeckle::samplers::{denoise_batch, Method, SamplerConfig, Start};
use despeckle::train::{load_checkpoint, save_checkpoint, train as run_training, TrainConfig};
use despeckle::verify::{run_all, VerifyOptions};
use despeckle::{Error, ImageTensor, NoiseSchedule, Result};

use crate::config::{ConfigFile, Resolver};
use crate::manifest::{file_id, unix_now, RunManifest};
use crate::{CorruptArgs, DenoiseArgs, EvalArgs, TrainArgs, VerifyArgs};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Input/output pairs: one file to one file, or every PNM in a directory into a directory.
fn plan_io(input: &Path, output: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if input.is_dir() {
        std::fs::create_dir_all(output).map_err(io_err(output))?;
        let files = list_pnm_files(input)?;
        if files.is_empty() {
            return Err(Error::Config(format!("{}: no PNM files", input.display())));
        }
        Ok(files
            .into_iter()
            .map(|f| {
                let name = f.file_name().expect("listed files have names").to_owned();
                (f, output.join(name))
            })
            .collect())
    } else {
        Ok(vec![(input.to_path_buf(), output.to_path_buf())])
    }
}

fn start_from(step: Option<usize>, level: Option<f64>) -> Result<Start> {
    match (step, level) {
        (Some(_), Some(_)) => Err(Error::Config("give either a step or a level, not both".into())),
        (Some(k), None) => Ok(Start::Step(k)),
        (None, Some(v)) => Ok(Start::Level(v)),
        (None, None) => Err(Error::Config("missing required setting 'step' or 'level'".into())),
    }
}

pub fn corrupt(a: CorruptArgs, file: &ConfigFile) -> Result<()> {
    let started = unix_now();
    let mut r = Resolver::new(file);
    let input: PathBuf = r.required("input", a.input)?;
    let output: PathBuf = r.required("output", a.output)?;
    let step = r.optional("step", a.step)?;
    let level = r.optional("level", a.level)?;
    let steps = r.value("steps", a.steps, NoiseSchedule::DEFAULT_STEPS)?;
    let eps = r.value("eta_per_step", a.eta_per_step, NoiseSchedule::DEFAULT_ETA_PER_STEP)?;
    let seed = r.value("seed", a.seed, 0u64)?;
    let settings = r.finish()?;

    let schedule = NoiseSchedule::linear(steps, eps)?;
    let k = start_from(step, level)?.resolve(&schedule)?;
    let mut rng = RandomSource::new(seed, streams::CORRUPT);
    for (src, dst) in plan_io(&input, &output)? {
        let x = to_intensity(&read_pnm(&src)?);
        let (noisy, _) = corrupt_intensity(&x, k, &schedule, &mut rng)?;
        write_pnm(&from_intensity(&noisy)?, &dst)?;
        log::info!("{} -> {} (k = {k})", src.display(), dst.display());
    }
    RunManifest {
        subcommand: "corrupt",
        settings,
        schedule: Some(schedule),
        checkpoint_id: None,
        started,
        finished: unix_now(),
    }
    .write_next_to(&output)?;
    Ok(())
}

pub fn train(a: TrainArgs, file: &ConfigFile) -> Result<()> {
    let started = unix_now();
    let d = TrainConfig::default();
    let u = UNetConfig::default();
    let mut r = Resolver::new(file);
    let data: PathBuf = r.required("data", a.data)?;
    let out: PathBuf = r.required("out", a.out)?;
    let config = TrainConfig {
        epochs: r.value("epochs", a.epochs, d.epochs)?,
        batch_size: r.value("batch", a.batch, d.batch_size)?,
        learning_rate: r.value("lr", a.lr, d.learning_rate)?,
        steps: r.value("steps", a.steps, d.steps)?,
        eta_per_step: r.value("eta_per_step", a.eta_per_step, d.eta_per_step)?,
        seed: r.value("seed", a.seed, d.seed)?,
        patch_size: r.value("patch", a.patch, d.patch_size)?,
        dataset: data.clone(),
        checkpoint_interval: r.value("checkpoint_interval", a.checkpoint_interval, d.checkpoint_interval)?,
    };
    let base_width = r.value("base_width", a.base_width, u.base_width)?;
    let levels = r.value("levels", a.levels, u.levels)?;
    let emb_dim = r.value("emb_dim", a.emb_dim, u.emb_dim)?;
    let settings = r.finish()?;
    config.validate()?;

    let mut stream = load_dataset(&data, config.patch_size, config.seed)?;
    let arch = Architecture::UNet(UNetConfig {
        channels: stream.channels(),
        base_width,
        levels,
        emb_dim,
    });
    log::info!(
        "training {arch} ({} parameters) on {} images",
        despeckle::nn::Network::count_for(&arch),
        stream.len()
    );
    let ckpt = run_training(config, arch, &mut stream, |c| {
        let p = PathBuf::from(format!("{}.epoch-{}", out.display(), c.epoch));
        log::info!("writing {}", p.display());
        save_checkpoint(c, &p)
    })?;
    save_checkpoint(&ckpt, &out)?;
    RunManifest {
        subcommand: "train",
        settings,
        schedule: Some(ckpt.schedule.clone()),
        checkpoint_id: Some(file_id(&out)?),
        started,
        finished: unix_now(),
    }
    .write_next_to(&out)?;
    Ok(())
}

pub fn denoise(a: DenoiseArgs, file: &ConfigFile) -> Result<()> {
    let started = unix_now();
    let mut r = Resolver::new(file);
    let ckpt_path: PathBuf = r.required("checkpoint", a.checkpoint)?;
    let input: PathBuf = r.required("input", a.input)?;
    let output: PathBuf = r.required("output", a.output)?;
    let method: Method = r.value("method", a.method, "ode".to_string())?.parse()?;
    let step = r.optional("step", a.step)?;
    let level = r.optional("level", a.level)?;
    let zeta = r.value("zeta", a.zeta, 0.0)?;
    let stride = r.value("stride", a.stride, 1usize)?;
    let seed = r.value("seed", a.seed, 0u64)?;
    let batch = r.value("batch", a.batch, 16usize)?;
    let settings = r.finish()?;
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }

    let ckpt = load_checkpoint(&ckpt_path)?;
    let schedule = &ckpt.schedule;
    let start = start_from(step, level)?;
    let k_start = start.resolve(schedule)?;
    let cfg = SamplerConfig::new(method, schedule)
        .with_zeta_fraction(zeta, schedule)?
        .with_stride(stride)?;
    let model = ckpt.network.score_model(schedule);
    let mut rng = RandomSource::new(seed, streams::SAMPLER);
    log::info!("denoising from k = {k_start} with {method}");

    let jobs = plan_io(&input, &output)?;
    let mut i = 0;
    while i < jobs.len() {
        let first = to_intensity(&read_pnm(&jobs[i].0)?);
        let mut group: Vec<ImageTensor> = vec![first];
        let mut j = i + 1;
        while j < jobs.len() && group.len() < batch {
            let next = to_intensity(&read_pnm(&jobs[j].0)?);
            if next.dims() != group[0].dims() {
                break;
            }
            group.push(next);
            j += 1;
        }
        let clean = denoise_batch(&group, Start::Step(k_start), &model, schedule, &cfg, &mut rng)?;
        for (x, (_, dst)) in clean.iter().zip(&jobs[i..j]) {
            write_pnm(&from_intensity(x)?, dst)?;
        }
        i = j;
    }
    RunManifest {
        subcommand: "denoise",
        settings,
        schedule: Some(schedule.clone()),
        checkpoint_id: Some(file_id(&ckpt_path)?),
        started,
        finished: unix_now(),
    }
    .write_next_to(&output)?;
    Ok(())
}

fn by_name(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_pnm_files(dir)?
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect())
}

pub fn eval(a: EvalArgs, file: &ConfigFile) -> Result<()> {
    let started = unix_now();
    let mut r = Resolver::new(file);
    let clean: PathBuf = r.required("clean", a.clean)?;
    let test: PathBuf = r.required("test", a.test)?;
    let out: Option<PathBuf> = r.optional("out", a.out)?;
    let settings = r.finish()?;

    let c = by_name(&clean)?;
    let t = by_name(&test)?;
    let unmatched: Vec<&str> = c
        .keys()
        .filter(|k| !t.contains_key(*k))
        .chain(t.keys().filter(|k| !c.contains_key(*k)))
        .map(String::as_str)
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Contract(format!(
            "clean and test directories differ; unmatched: {}",
            unmatched.join(", ")
        )));
    }
    if c.is_empty() {
        return Err(Error::Config(format!("{}: no PNM files", clean.display())));
    }
    let rows = c
        .iter()
        .map(|(name, p)| {
            let a = to_intensity(&read_pnm(p)?);
            let b = to_intensity(&read_pnm(&t[name])?);
            MetricRow::compute(name.clone(), &a, &b)
        })
        .collect::<Result<Vec<_>>>()?;
    let csv = MetricReport { rows }.to_csv();
    match out {
        Some(p) => {
            std::fs::write(&p, &csv).map_err(io_err(&p))?;
            RunManifest {
                subcommand: "eval",
                settings,
                schedule: None,
                checkpoint_id: None,
                started,
                finished: unix_now(),
            }
            .write_next_to(&p)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn verify(a: VerifyArgs, file: &ConfigFile) -> Result<()> {
    let d = VerifyOptions::default();
    let mut r = Resolver::new(file);
    let opts = VerifyOptions {
        seed: r.value("seed", a.seed, d.seed)?,
        samples: r.value("samples", a.samples, d.samples)?,
        grad_seeds: r.value("grad_seeds", a.grad_seeds, d.grad_seeds)?,
        flip_drift: a.inject_fault,
    };
    r.finish()?;
    if opts.samples < 2 {
        return Err(Error::Config("samples must be at least 2".into()));
    }
    let results = run_all(&opts)?;
    for p in &results {
        println!(
            "[{}] {}: {}",
            if p.passed { "PASS" } else { "FAIL" },
            p.name,
            p.detail
        );
    }
    match results.iter().find(|p| !p.passed) {
        None => Ok(()),
        Some(p) => Err(Error::Contract(format!(
            "property '{}' failed: measured {:.6e}, threshold {:.6e}",
            p.name, p.measured, p.threshold
        ))),
    }
}
