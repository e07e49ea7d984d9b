use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use diffvoc::audio_data::{
    load_wav, mel_features, synth_corpus, write_wav, CorpusManifest, Dataset, DatasetSplit, FeatureConfig,
    ManifestEntry, MelConditioner, Segment, SynthSpec,
};
use diffvoc::config::RunConfig;
use diffvoc::diffusion::{generate, SamplerOptions};
use diffvoc::evaluation::{
    emit_metrics, emit_sweep, evaluate_metrics, generate_for_clip, grid_search, plot_spectrogram, plot_sweep,
    sensitivity_sweep, ReportFormat,
};
use diffvoc::noise_model::{load_checkpoint, Checkpoint, NetworkConfig, NoisePredictor, Preset};
use diffvoc::schedules::{
    enumerate_grid, stratified_grid, validate_inference_schedule, InferenceSchedule, NoiseSchedule, ScheduleRange,
    ValidationPolicy,
};
use diffvoc::trainer::{run_training, Phase, RunOutput, TrainingJob};

use crate::manifest::{file_digest, sha256_hex, RunManifest};
use crate::{
    EvaluateArgs, FinetuneArgs, FormatArg, MakeDatasetArgs, SampleArgs, ScheduleArgs, SplitArg, SweepArgs, TrainArgs,
    UsageError, ValidationError,
};

const DEFAULT_STRATA: usize = 3;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// `explicit`, or `<root>/<command>-<first 12 digest chars>[-s<seed>]`.
fn run_dir(root: &Path, explicit: Option<PathBuf>, command: &str, digest: &str, seed: Option<u64>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut name = format!("{command}-{}", &digest[..12]);
        if let Some(s) = seed {
            name.push_str(&format!("-s{s}"));
        }
        root.join(name)
    })
}

fn load_config(path: &Path) -> Result<(RunConfig, String)> {
    let cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    Ok((cfg, file_digest(path)?))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| usage("the config has no [data] section naming a corpus manifest"))?;
    Dataset::from_manifest(&data.manifest, cfg.features.clone())
        .with_context(|| format!("loading corpus {}", data.manifest.display()))
}

fn load_model(path: &Path, network: &NetworkConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ckpt.expect_config(network)
        .with_context(|| format!("checkpoint {} does not match the configured network", path.display()))?;
    Ok(ckpt)
}

fn formats(f: FormatArg) -> Vec<(ReportFormat, &'static str)> {
    match f {
        FormatArg::Json => vec![(ReportFormat::Json, "json")],
        FormatArg::Csv => vec![(ReportFormat::Csv, "csv")],
        FormatArg::Both => vec![(ReportFormat::Json, "json"), (ReportFormat::Csv, "csv")],
    }
}

pub fn make_dataset(root: &Path, args: MakeDatasetArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| root.join("dataset"));
    let manifest_path = out.join("manifest.json");
    if manifest_path.exists() && !args.force {
        return Err(usage(format!(
            "{} already exists; pass --force to overwrite",
            manifest_path.display()
        )));
    }
    let spec = SynthSpec {
        samples_per_clip: args.samples,
        ..SynthSpec::desk(args.n_clips, args.seed)
    };
    let clips = synth_corpus(&spec)?;
    let ids: Vec<String> = clips.iter().map(|c| c.clip.id.clone()).collect();
    let split = if ids.is_empty() {
        log::warn!("n_clips is 0; writing an empty manifest");
        DatasetSplit {
            train_ids: vec![],
            search_ids: vec![],
            test_ids: vec![],
        }
    } else {
        DatasetSplit::from_counts(&ids, args.search, args.test)?
    };
    prepare_dir(&out.join("clips"))?;
    let mut entries = Vec::with_capacity(clips.len());
    for c in &clips {
        let rel = PathBuf::from("clips").join(format!("{}.wav", c.clip.id));
        write_wav(out.join(&rel), &c.clip.samples, c.clip.sample_rate)?;
        entries.push(ManifestEntry {
            id: c.clip.id.clone(),
            path: rel,
            duration_seconds: c.clip.duration_seconds(),
            split: split.membership(&c.clip.id).expect("every id is split"),
            fundamental_hz: Some(c.fundamental_hz),
        });
    }
    let manifest = CorpusManifest {
        sample_rate: spec.sample_rate,
        clips: entries,
    };
    manifest.save(&manifest_path)?;
    let settings = serde_json::json!({
        "n_clips": args.n_clips,
        "seed": args.seed,
        "search": args.search,
        "test": args.test,
        "samples": args.samples,
    });
    RunManifest::new(
        "make-dataset",
        None,
        sha256_hex(settings.to_string().as_bytes()),
        Some(args.seed),
        &out,
    )
    .write(&out.join("run_manifest.json"))?;
    println!("wrote {} clips to {}", manifest.clips.len(), out.display());
    println!("manifest digest {}", file_digest(&manifest_path)?);
    Ok(())
}

fn run_phase(root: &Path, command: &str, phase: Phase, args: TrainArgs, init: Option<PathBuf>) -> Result<()> {
    let (mut cfg, digest) = load_config(&args.config)?;
    if cfg.training.phase != phase {
        let other = if phase == Phase::Pretrain { "finetune" } else { "train" };
        return Err(usage(format!(
            "{} configures the {:?} phase; use `diffvoc {other}`",
            args.config.display(),
            cfg.training.phase
        )));
    }
    if phase == Phase::Finetune && init.is_none() && args.resume.is_none() {
        return Err(usage("finetune needs a pretrained checkpoint: pass --init <path> (or --resume)"));
    }
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
    }
    let seed = cfg.training.seed;
    let out = run_dir(root, args.out, command, &digest, Some(seed));
    prepare_dir(&out)?;
    RunManifest::new(command, Some(&args.config), digest, Some(seed), &out).write(&out.join("run_manifest.json"))?;

    let context = || format!("{command} run in {}", out.display());
    let dataset = load_dataset(&cfg).with_context(context)?;
    let resume = args
        .resume
        .as_deref()
        .map(|p| load_model(p, &cfg.network))
        .transpose()
        .with_context(context)?;
    let start = match (&resume, phase, init) {
        (Some(_), _, _) => None,
        (None, Phase::Pretrain, _) => Some(NoisePredictor::init(cfg.network.clone(), seed)?),
        (None, Phase::Finetune, path) => {
            let path = path.expect("checked above");
            Some(load_model(&path, &cfg.network).with_context(context)?.predictor)
        }
    };
    let curve = cfg.train_schedule.alpha_bar();
    let loss = cfg.infer_loss()?;
    let job = TrainingJob {
        training: &cfg.training,
        curve: &curve,
        loss: &loss,
        dataset: &dataset,
    };
    let output = RunOutput { dir: out.clone() };
    let outcome = run_training(&job, start, resume, Some(&output)).with_context(context)?;
    if let Some(last) = outcome.records.last() {
        println!("step {} total loss {:.6}", last.step, last.losses.total);
    }
    println!("final checkpoint {}", output.final_path().display());
    println!("model digest {}", outcome.checkpoint.predictor.digest());
    Ok(())
}

pub fn train(root: &Path, args: TrainArgs) -> Result<()> {
    run_phase(root, "train", Phase::Pretrain, args, None)
}

pub fn finetune(root: &Path, args: FinetuneArgs) -> Result<()> {
    run_phase(root, "finetune", Phase::Finetune, args.run, args.init)
}

fn read_schedule(args: &ScheduleArgs) -> Result<InferenceSchedule> {
    match (&args.schedule, &args.schedule_file) {
        (Some(betas), None) => Ok(InferenceSchedule::new(betas.clone())?),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            InferenceSchedule::from_json(&text).with_context(|| format!("parsing schedule file {}", path.display()))
        }
        _ => Err(usage("pass exactly one of --schedule or --schedule-file")),
    }
}

fn check_schedule(schedule: &InferenceSchedule, train: &NoiseSchedule, allow_invalid: bool) -> Result<()> {
    let report = validate_inference_schedule(schedule, train, &ValidationPolicy::for_training(train));
    if report.passed() {
        return Ok(());
    }
    if allow_invalid {
        log::warn!("schedule {schedule} breaks the validity rules ({report}); continuing because of --allow-invalid");
        return Ok(());
    }
    Err(anyhow!(ValidationError(format!(
        "schedule {schedule} is invalid: {report}; pass --allow-invalid to use it anyway"
    ))))
}

#[derive(Debug, Serialize, Deserialize)]
struct MelFile {
    n_mels: usize,
    frames: Vec<Vec<f64>>,
}

fn read_mel(path: &Path, features: &FeatureConfig) -> Result<MelConditioner> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mel: MelFile = serde_json::from_str(&text).with_context(|| format!("parsing mel file {}", path.display()))?;
    if mel.frames.is_empty() || mel.frames.iter().any(|f| f.len() != mel.n_mels) {
        return Err(usage(format!("{}: every frame must have n_mels = {} values", path.display(), mel.n_mels)));
    }
    Ok(MelConditioner {
        n_frames: mel.frames.len(),
        n_mels: mel.n_mels,
        frames: mel.frames.concat(),
        config_digest: features.digest(),
    })
}

pub fn sample(args: SampleArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let network = ckpt.predictor.config().clone();
    let (features, train, sampler, digest) = match &args.config {
        Some(path) => {
            let (cfg, digest) = load_config(path)?;
            ckpt.expect_config(&cfg.network)?;
            (cfg.features, cfg.train_schedule, cfg.training.sampler, digest)
        }
        None => {
            let features = match network.preset {
                Preset::Desk => FeatureConfig::desk(),
                Preset::Full => FeatureConfig::standard(),
                Preset::Custom => return Err(usage("a custom network needs --config for its features")),
            };
            let settings = serde_json::json!({ "features": features, "network": network });
            let digest = sha256_hex(settings.to_string().as_bytes());
            (features, NoiseSchedule::standard(), SamplerOptions::default(), digest)
        }
    };
    let schedule = read_schedule(&args.schedule)?;
    check_schedule(&schedule, &train, args.schedule.allow_invalid)?;
    let mel = match (&args.input_wav, &args.mel) {
        (Some(wav), None) => {
            let clip = load_wav(wav).with_context(|| format!("reading {}", wav.display()))?;
            mel_features(&clip, &features)?
        }
        (None, Some(path)) => read_mel(path, &features)?,
        _ => return Err(usage("pass exactly one of --input-wav or --mel")),
    };
    if mel.n_mels != network.n_mels {
        return Err(usage(format!(
            "conditioner has {} bands but the network expects {}",
            mel.n_mels, network.n_mels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let audio = generate(&ckpt.predictor, &mel, &schedule, &mut rng, sampler)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_dir(parent)?;
    }
    write_wav(&args.out, &audio, features.sample_rate)?;
    RunManifest::new("sample", args.config.as_deref(), digest, Some(args.seed), &args.out)
        .write(&args.out.with_extension("run.json"))?;
    println!(
        "wrote {} samples ({:.3} s) to {}",
        audio.len(),
        audio.len() as f64 / features.sample_rate as f64,
        args.out.display()
    );
    Ok(())
}

fn split_ids(dataset: &Dataset, split: SplitArg) -> &[String] {
    let s = dataset.split();
    match split {
        SplitArg::Train => &s.train_ids,
        SplitArg::Search => &s.search_ids,
        SplitArg::Test => &s.test_ids,
    }
}

fn eval_clips(dataset: &Dataset, split: SplitArg) -> Result<Vec<Segment>> {
    let ids = split_ids(dataset, split);
    if ids.is_empty() {
        return Err(usage(format!("the {split:?} split is empty")));
    }
    Ok(ids.iter().map(|id| dataset.centre_segment(id)).collect::<diffvoc::Result<_>>()?)
}

fn build_grid(cfg: &RunConfig, args: &SweepArgs) -> Result<(Vec<InferenceSchedule>, String)> {
    if let Some(path) = &args.grid_file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let grid: Vec<InferenceSchedule> =
            serde_json::from_str(&text).with_context(|| format!("parsing grid file {}", path.display()))?;
        if grid.is_empty() {
            return Err(usage(format!("{} lists no schedules", path.display())));
        }
        let description = format!("{} schedules from {}", grid.len(), path.display());
        return Ok((grid, description));
    }
    let range = match cfg.training.ranges_by_n.get(&args.steps) {
        Some(r) => r.clone(),
        None => ScheduleRange::standard(args.steps)
            .ok_or_else(|| usage(format!("no schedule range configured for N={}", args.steps)))?,
    };
    Ok(match &args.mantissas {
        Some(m) => (enumerate_grid(&range, m)?, format!("mantissas {m:?} over {range}")),
        None => {
            let k = args.strata.unwrap_or(DEFAULT_STRATA);
            (stratified_grid(&range, k)?, format!("{k} strata midpoints over {range}"))
        }
    })
}

pub fn sweep(root: &Path, command: &str, args: SweepArgs) -> Result<()> {
    let (cfg, digest) = load_config(&args.config)?;
    let ckpt = load_model(&args.checkpoint, &cfg.network)?;
    let out = run_dir(root, args.out.clone(), command, &digest, None);
    prepare_dir(&out)?;
    RunManifest::new(command, Some(&args.config), digest, None, &out).write(&out.join("run_manifest.json"))?;

    let dataset = load_dataset(&cfg)?;
    let default_split = if command == "grid-search" { SplitArg::Search } else { SplitArg::Test };
    let clips = eval_clips(&dataset, args.split.unwrap_or(default_split))?;
    let (grid, description) = build_grid(&cfg, &args)?;
    let settings = cfg.eval_settings();
    let report = if command == "grid-search" {
        grid_search(&ckpt.predictor, &clips, &grid, &description, &settings)?
    } else {
        sensitivity_sweep(&ckpt.predictor, &clips, &grid, &description, &settings)?
    };
    let stem = command.replace('-', "_");
    for (format, ext) in formats(args.format) {
        emit_sweep(&report, format, &out.join(format!("{stem}.{ext}")))?;
    }
    if args.plot {
        plot_sweep(&report, &out.join(format!("{stem}.png")))?;
    }
    println!(
        "{} schedules on {} clips: mean {:.6} std {:.6}",
        report.results.len(),
        clips.len(),
        report.mean,
        report.std
    );
    match report.best {
        Some(i) => {
            let r = &report.results[i];
            let note = if r.violations.is_empty() {
                String::new()
            } else {
                format!(" (breaks: {})", r.violations.join(", "))
            };
            println!("best {:?} l1_mel {:.6}{note}", r.schedule, r.l1_mel.unwrap_or(f64::NAN));
        }
        None => println!("every schedule failed to generate"),
    }
    println!("reports in {}", out.display());
    Ok(())
}

pub fn evaluate(root: &Path, args: EvaluateArgs) -> Result<()> {
    let (cfg, digest) = load_config(&args.config)?;
    let ckpt = load_model(&args.checkpoint, &cfg.network)?;
    let schedule = read_schedule(&args.schedule)?;
    check_schedule(&schedule, &cfg.train_schedule, args.schedule.allow_invalid)?;
    let out = run_dir(root, args.out.clone(), "evaluate", &digest, None);
    prepare_dir(&out)?;
    RunManifest::new("evaluate", Some(&args.config), digest, None, &out).write(&out.join("run_manifest.json"))?;

    let dataset = load_dataset(&cfg)?;
    let clips = eval_clips(&dataset, args.split)?;
    let settings = cfg.eval_settings();
    let report = evaluate_metrics(&ckpt.predictor, &clips, &schedule, &settings)?;
    for (format, ext) in formats(args.format) {
        emit_metrics(&report, format, &out.join(format!("metrics.{ext}")))?;
    }
    if args.plot {
        let dir = out.join("spectrograms");
        prepare_dir(&dir)?;
        for clip in &clips {
            let generated = generate_for_clip(&ckpt.predictor, clip, &schedule, settings.sampler)?;
            plot_spectrogram(&clip.audio, &cfg.features, &dir.join(format!("{}-reference.png", clip.clip_id)))?;
            plot_spectrogram(&generated, &cfg.features, &dir.join(format!("{}-generated.png", clip.clip_id)))?;
        }
    }
    println!(
        "{} clips with {schedule}: ls_mse {:.6} mrstft {:.6} l1_mel {:.6}",
        report.clip_count, report.ls_mse, report.mrstft, report.l1_mel
    );
    println!("reports in {}", out.display());
    Ok(())
}
