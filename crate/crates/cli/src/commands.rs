//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lbm::bandwidth::{estimate_f_eff, EstimatorConfig};
use lbm::checkpoint::{load_codec, save_codec, save_predictor};
use lbm::codec::{fit_latent_scale, train_codec as fit_codec, Codec};
use lbm::config::{parse_toml, validate_chain, CodecRunConfig, StageConfig};
use lbm::corpus::{toy_clip, ToyCorpusConfig};
use lbm::metrics::{evaluate_pair, PairMetrics};
use lbm::nn::Adam;
use lbm::pipeline::{
    eval_stft_params, simulate_lr, train_stage, tune_augmentation, AugGrid, DegradationPolicy, PostReplace, Stage,
    StitchConfig, UpsampleOptions,
};
use lbm::predictor::Predictor;
use lbm::wav::{read_wav, write_wav_atomic, WavFormat};
use lbm::Waveform;
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::io::{file_name, list_wavs, read_corpus, write_text_atomic, RunManifest};
use crate::{
    DegradeArgs, DetectBwArgs, EvalArgs, ToyCorpusArgs, TrainBridgeArgs, TrainCodecArgs, TuneAugArgs, UpsampleArgs,
};

const OUTPUT_FORMAT: WavFormat = WavFormat::Float32;

/// Independent generator for item `index` of a seeded batch, so results do not
/// depend on how items are spread over threads.
fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// One row per logging interval: its first step and the mean of each column over the interval.
fn interval_rows(columns: &[Vec<f64>], every: usize) -> Vec<Vec<String>> {
    let every = every.max(1);
    let n = columns.first().map_or(0, Vec::len);
    (0..n)
        .step_by(every)
        .map(|start| {
            let end = (start + every).min(n);
            let mut row = vec![start.to_string()];
            for c in columns {
                row.push((c[start..end].iter().sum::<f64>() / (end - start) as f64).to_string());
            }
            row
        })
        .collect()
}

fn default_loss_csv(out: &Path) -> PathBuf {
    crate::io::sidecar(out, ".loss.csv")
}

pub fn train_codec(a: TrainCodecArgs) -> Result<()> {
    let mut cfg = CodecRunConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if let Some(seed) = a.seed {
        cfg.training.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.training.steps = steps;
    }
    let mut manifest = RunManifest::start("train-codec", Some(cfg.training.seed));
    manifest.config.push(a.config.clone());
    manifest.inputs.push(a.corpus.clone());
    let corpus: Vec<Waveform> = read_corpus(&a.corpus)?.into_iter().map(|(_, w)| w).collect();
    info!("training codec on {} clips for {} steps", corpus.len(), cfg.training.steps);

    let mut codec = Codec::new(cfg.model.clone(), cfg.training.seed)?;
    let mut opt = Adam::new(cfg.training.lr);
    let trace = fit_codec(&mut codec, &corpus, &cfg.training, &mut opt)?;
    let scale = fit_latent_scale(&codec, &corpus)?;
    codec.set_scale(scale)?;
    info!("latent scale s = {scale:.6}");
    save_codec(&a.out, &codec).with_context(|| format!("writing {}", a.out.display()))?;

    let loss_csv = a.loss_csv.unwrap_or_else(|| default_loss_csv(&a.out));
    let columns = vec![
        trace.iter().map(|t| t.0).collect(),
        trace.iter().map(|t| t.1).collect(),
    ];
    let text = csv_string(&["step", "loss", "reconstruction"], interval_rows(&columns, cfg.training.log_every))?;
    write_text_atomic(&loss_csv, &text)?;
    manifest.outputs.extend([a.out.clone(), loss_csv]);
    manifest.finish(&a.out)
}

pub fn train_bridge(a: TrainBridgeArgs) -> Result<()> {
    let mut cfg = StageConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if let Some(seed) = a.seed {
        cfg.training.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.training.steps = steps;
    }
    let mut manifest = RunManifest::start("train-bridge", Some(cfg.training.seed));
    manifest.config.push(a.config.clone());
    manifest.inputs.extend([a.corpus.clone(), cfg.codec.clone()]);
    let codec = load_codec(&cfg.codec).with_context(|| format!("loading codec {}", cfg.codec.display()))?;
    let corpus: Vec<Waveform> = read_corpus(&a.corpus)?.into_iter().map(|(_, w)| w).collect();
    info!(
        "training stage {} ({} Hz, cascaded: {}) on {} clips for {} steps",
        cfg.name,
        cfg.target_sr,
        cfg.cascaded,
        corpus.len(),
        cfg.training.steps
    );
    let mut predictor = Predictor::new(cfg.model, cfg.training.seed)?;
    let mut opt = Adam::new(cfg.training.lr);
    let trace = train_stage(&codec, &mut predictor, &cfg, &corpus, &mut opt)
        .with_context(|| format!("training on {}", a.corpus.display()))?;

    let out = a.out.unwrap_or_else(|| cfg.predictor.clone());
    let meta = lbm::pipeline::StageMeta {
        target_sr: cfg.target_sr,
        cascaded: cfg.cascaded,
        schedule: cfg.schedule,
    };
    save_predictor(&out, &predictor, &meta).with_context(|| format!("writing {}", out.display()))?;
    let loss_csv = a.loss_csv.unwrap_or_else(|| default_loss_csv(&out));
    let text = csv_string(&["step", "loss"], interval_rows(&[trace], cfg.training.log_every))?;
    write_text_atomic(&loss_csv, &text)?;
    manifest.outputs.extend([out.clone(), loss_csv]);
    manifest.finish(&out)
}

pub fn upsample(a: UpsampleArgs) -> Result<()> {
    let cfgs = a
        .stages
        .iter()
        .map(|p| StageConfig::load(p).with_context(|| format!("loading stage {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    validate_chain(&cfgs)?;
    let stages = cfgs
        .iter()
        .map(|c| Stage::from_config(c).with_context(|| format!("loading models for stage {}", c.name)))
        .collect::<Result<Vec<_>>>()?;
    let opts = UpsampleOptions {
        n_steps: a.steps,
        post_replace: if a.post_replace {
            PostReplace::Final
        } else {
            PostReplace::Configured
        },
        stitch: a.stitch.map(|window_s| StitchConfig {
            window_s,
            ..StitchConfig::default()
        }),
        ..UpsampleOptions::default()
    };
    let mut manifest = RunManifest::start("upsample", Some(a.seed));
    manifest.config = a.stages.clone();

    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        std::fs::create_dir_all(&a.output)?;
        list_wavs(&a.input)?
            .into_iter()
            .map(|p| {
                let out = a.output.join(file_name(&p));
                (p, out)
            })
            .collect()
    } else {
        vec![(a.input.clone(), a.output.clone())]
    };
    if jobs.is_empty() {
        bail!("no WAV files in {}", a.input.display());
    }
    let results: Vec<Result<()>> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, (src, dst))| {
            let wav = read_wav(src)?;
            let y = lbm::pipeline::upsample(&wav, &stages, &opts, &mut item_rng(a.seed, i))
                .with_context(|| format!("upsampling {}", src.display()))?;
            write_wav_atomic(dst, &y, OUTPUT_FORMAT).with_context(|| format!("writing {}", dst.display()))?;
            info!("{} -> {} ({} Hz)", src.display(), dst.display(), y.sample_rate());
            Ok(())
        })
        .collect();
    let mut failed = 0;
    for r in results {
        if let Err(e) = r {
            warn!("{e:#}");
            failed += 1;
        }
    }
    manifest.inputs = jobs.iter().map(|j| j.0.clone()).collect();
    manifest.outputs = jobs.iter().map(|j| j.1.clone()).collect();
    manifest.finish(&a.output)?;
    if failed > 0 {
        bail!("{failed} of {} files failed", jobs.len());
    }
    Ok(())
}

pub const EVAL_COLUMNS: [&str; 5] = ["file", "lsd", "lsd_lf", "lsd_hf", "ssim"];

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut pairs = Vec::new();
    for r in list_wavs(&a.reference)? {
        let e = a.estimate.join(file_name(&r));
        if e.is_file() {
            pairs.push((r, e));
        } else {
            warn!("no estimate for {}; skipping", r.display());
        }
    }
    if pairs.is_empty() {
        bail!("no matching files between {} and {}", a.reference.display(), a.estimate.display());
    }
    let metrics = pairs
        .par_iter()
        .map(|(r, e)| {
            let reference = read_wav(r)?;
            let est = read_wav(e)?;
            let params = eval_stft_params(reference.sample_rate());
            let split = match (a.band_split, &a.input) {
                (Some(hz), _) => hz,
                (None, Some(dir)) => {
                    let input = read_wav(&dir.join(file_name(r)))?;
                    estimate_f_eff(&input, &EstimatorConfig::default())?.f_eff.min(input.nyquist())
                }
                (None, None) => bail!("either --band-split or --input is required"),
            };
            evaluate_pair(&reference, &est, split, &params).with_context(|| format!("evaluating {}", e.display()))
        })
        .collect::<Result<Vec<PairMetrics>>>()?;
    let n = metrics.len() as f64;
    let fmt = |m: &PairMetrics| vec![m.lsd.to_string(), m.lsd_lf.to_string(), m.lsd_hf.to_string(), m.ssim.to_string()];
    let mean = PairMetrics {
        lsd: metrics.iter().map(|m| m.lsd).sum::<f64>() / n,
        lsd_lf: metrics.iter().map(|m| m.lsd_lf).sum::<f64>() / n,
        lsd_hf: metrics.iter().map(|m| m.lsd_hf).sum::<f64>() / n,
        ssim: metrics.iter().map(|m| m.ssim).sum::<f64>() / n,
    };
    let mut rows: Vec<Vec<String>> = pairs
        .iter()
        .zip(&metrics)
        .map(|((r, _), m)| {
            let mut row = vec![file_name(r).to_string_lossy().into_owned()];
            row.extend(fmt(m));
            row
        })
        .collect();
    let mut last = vec!["mean".to_string()];
    last.extend(fmt(&mean));
    rows.push(last);
    write_text_atomic(&a.out, &csv_string(&EVAL_COLUMNS, rows)?)?;
    info!(
        "{} files: lsd {:.4}, lsd_lf {:.4}, lsd_hf {:.4}, ssim {:.4}",
        metrics.len(),
        mean.lsd,
        mean.lsd_lf,
        mean.lsd_hf,
        mean.ssim
    );
    Ok(())
}

pub fn degrade(a: DegradeArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.policy).with_context(|| format!("reading {}", a.policy.display()))?;
    let policy: DegradationPolicy = parse_toml(&text).with_context(|| format!("parsing {}", a.policy.display()))?;
    let files = list_wavs(&a.corpus)?;
    if files.is_empty() {
        bail!("no WAV files in {}", a.corpus.display());
    }
    std::fs::create_dir_all(&a.out)?;
    let mut manifest = RunManifest::start("degrade", Some(a.seed));
    manifest.config.push(a.policy.clone());
    manifest.inputs.push(a.corpus.clone());
    let results: Vec<Option<(String, f64)>> = files
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let run = || -> Result<(String, f64)> {
                let wav = read_wav(path)?;
                let (lr, cutoff) = simulate_lr(&wav, &policy, &mut item_rng(a.seed, i))?;
                let name = file_name(path);
                write_wav_atomic(a.out.join(&name), &lr, OUTPUT_FORMAT)?;
                let name = name.to_string_lossy().into_owned();
                info!("{name}: cutoff {cutoff:.1} Hz");
                Ok((name, cutoff))
            };
            run().map_err(|e| warn!("skipping {}: {e:#}", path.display())).ok()
        })
        .collect();
    let rows: Vec<Vec<String>> = results
        .iter()
        .flatten()
        .map(|(name, c)| vec![name.clone(), c.to_string()])
        .collect();
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let manifest_csv = a.out.join("f_prior.csv");
    write_text_atomic(&manifest_csv, &csv_string(&["file", "f_prior_hz"], rows)?)?;
    manifest.outputs.extend([a.out.clone(), manifest_csv]);
    manifest.finish(&a.out.join("degrade"))?;
    if skipped > 0 {
        bail!("{skipped} of {} files could not be degraded", files.len());
    }
    Ok(())
}

pub fn detect_bw(a: DetectBwArgs) -> Result<()> {
    let files = if a.input.is_dir() {
        list_wavs(&a.input)?
    } else {
        vec![a.input.clone()]
    };
    let cfg = EstimatorConfig::default();
    let mut failed = 0;
    for path in files {
        match read_wav(&path).map_err(anyhow::Error::from).and_then(|w| Ok((estimate_f_eff(&w, &cfg)?, w.nyquist()))) {
            Ok((est, nyq)) => println!(
                "file={} f_eff_hz={:.1} nyquist_hz={:.1} trunc_index={} spectrum_len={}",
                path.display(),
                est.f_eff,
                nyq,
                est.trunc_index,
                est.spectrum_len
            ),
            Err(e) => {
                warn!("{}: {e:#}", path.display());
                failed += 1;
            }
        }
    }
    if failed > 0 {
        bail!("{failed} files could not be analysed");
    }
    Ok(())
}

pub fn tune_aug(a: TuneAugArgs) -> Result<()> {
    let cfg = StageConfig::load(&a.stage).with_context(|| format!("loading {}", a.stage.display()))?;
    let stage = Stage::from_config(&cfg)?;
    let mut pairs = Vec::new();
    let mut inputs = Vec::new();
    for path in list_wavs(&a.inputs)? {
        let reference = a.references.join(file_name(&path));
        if !reference.is_file() {
            warn!("no reference for {}; skipping", path.display());
            continue;
        }
        pairs.push((read_wav(&path)?, read_wav(&reference)?));
        inputs.push(path);
    }
    if pairs.is_empty() {
        bail!("no validation pairs between {} and {}", a.inputs.display(), a.references.display());
    }
    let mut manifest = RunManifest::start("tune-aug", Some(a.seed));
    manifest.config.push(a.stage.clone());
    manifest.inputs = inputs;
    let grid = AugGrid {
        b_r: a.b_r.clone(),
        margin_hz: a.margins.clone(),
    };
    let result = tune_augmentation(&stage, &pairs, &grid, a.steps, a.seed)?;
    write_text_atomic(&a.out, &result.to_csv())?;
    println!(
        "b_r_star={} margin_hz={} mean_lsd={}",
        result.best.b_r, result.best.margin_hz, result.best.mean_lsd
    );
    manifest.outputs.push(a.out.clone());
    manifest.finish(&a.out)
}

pub fn toy_corpus(a: ToyCorpusArgs) -> Result<()> {
    let cfg = ToyCorpusConfig {
        sample_rate: a.sample_rate,
        duration_s: a.seconds,
        ..ToyCorpusConfig::default()
    };
    std::fs::create_dir_all(&a.out)?;
    let mut manifest = RunManifest::start("toy-corpus", Some(a.seed));
    let paths = (0..a.count)
        .into_par_iter()
        .map(|i| {
            let clip = toy_clip(&cfg, &mut item_rng(a.seed, i))?;
            let path = a.out.join(format!("toy_{i:04}.wav"));
            write_wav_atomic(&path, &clip, OUTPUT_FORMAT)?;
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    info!("wrote {} clips to {}", paths.len(), a.out.display());
    manifest.outputs = paths;
    manifest.finish(&a.out.join("toy-corpus"))
}
