//! Acceptance checks. Each criterion prints one PASS/FAIL line; the binary
//! exits nonzero if any criterion fails. The desk-scale training runs take
//! a few minutes in the optimised test profile.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffvoc::audio_data::{synth_corpus, Dataset, DatasetSplit, FeatureConfig, Segment, SynthSpec};
use diffvoc::diffusion::{forward_sample, generate, reverse_step, standard_normal, SamplerOptions, SigmaMode};
use diffvoc::evaluation::{
    emit_metrics, emit_sweep, evaluate_metrics, generate_for_clip, generation_seed, grid_search, l1_mel, ls_mse,
    mrstft_metric, plot_sweep, sensitivity_sweep, EvalSettings, ReportFormat, SweepReport,
};
use diffvoc::losses::{diffusion_loss, infer_loss, loss_mag, loss_pha, MultiResConfig, MultiResLoss, PHASE_LOSS_BOUND};
use diffvoc::noise_model::{load_checkpoint, NetworkConfig, NoisePredictor};
use diffvoc::schedules::{
    corrected_two_step_schedule, enumerate_grid, searched_baseline_schedule, stratified_grid,
    validate_inference_schedule, InferenceSchedule, NoiseSchedule, Rule, ScheduleRange, ValidationPolicy,
};
use diffvoc::trainer::{
    draw_diffusion, draw_unroll, gradcheck, run_training, step_objective, RunOutput, StepDraws, StepRecord,
    TrainingConfig, TrainingJob,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Ledger {
    lines: Vec<(bool, String)>,
}

impl Ledger {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let line = format!("[{}] {name} ({secs:.1} s): {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((pass, line));
    }
}

// ---------------------------------------------------------------------------
// schedule algebra and validation

/// `prod (1 - beta_t)` of the linear 1e-6..1e-2, T = 1000 schedule in exact
/// integer arithmetic: `beta_t = (999 + 9999 (t - 1)) / (999 * 10^6)`.
fn exact_final_alpha_bar() -> f64 {
    let den_one = BigInt::from(999_000_000u64);
    let mut num = BigInt::from(1);
    let mut den = BigInt::from(1);
    for t in 0..1000u64 {
        num *= BigInt::from(999_000_000u64 - 999 - 9999 * t);
        den *= &den_one;
    }
    let scale = BigInt::from(10u32).pow(40);
    let q = (num * scale) / den;
    q.to_f64().expect("fits") / 1e40
}

fn schedule_algebra() -> Check {
    let oracle = exact_final_alpha_bar();
    let start = Instant::now();
    let got = NoiseSchedule::standard().alpha_bar().last();
    let elapsed = start.elapsed();
    let rel = (got - oracle).abs() / oracle;
    ensure(rel < 1e-9, format!("alpha_bar_T {got:e} vs exact {oracle:e}, rel {rel:e}"))?;
    ensure(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("alpha_bar_T = {got:.12e}, exact {oracle:.12e}, rel err {rel:.1e}"))
}

fn validator_cases() -> Check {
    let start = Instant::now();
    let train = NoiseSchedule::standard();
    let policy = ValidationPolicy::for_training(&train);
    let six = searched_baseline_schedule(6).unwrap();
    let fixed = corrected_two_step_schedule();
    let searched_two = searched_baseline_schedule(2).unwrap();
    let r6 = validate_inference_schedule(&six, &train, &policy);
    let rf = validate_inference_schedule(&fixed, &train, &policy);
    let r2 = validate_inference_schedule(&searched_two, &train, &policy);
    ensure(r6.passed(), format!("six-step schedule {six}: {r6}"))?;
    ensure(rf.passed(), format!("corrected schedule {fixed}: {rf}"))?;
    let ratio = r2.violations.iter().find(|v| v.rule == Rule::Ratio);
    let ratio = ratio.ok_or_else(|| format!("{searched_two} should break the ratio rule: {r2}"))?;
    ensure((ratio.measured - 3000.0).abs() < 1e-6, format!("ratio {}", ratio.measured))?;
    ensure(start.elapsed() < Duration::from_secs(1), "too slow")?;
    Ok(format!(
        "{six} and {fixed} pass; {searched_two} breaks ratio ({:.0} > {:.0})",
        ratio.measured, ratio.bound
    ))
}

// ---------------------------------------------------------------------------
// diffusion identities

fn exact_recovery() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let beta: f64 = rng.random_range(1e-6..0.999);
        let len = rng.random_range(1..64);
        let x0 = standard_normal(len, &mut rng);
        let eps = standard_normal(len, &mut rng);
        let xt = forward_sample(&x0, 1.0 - beta, &eps).map_err(e2s)?;
        let back = reverse_step(&xt, &eps, beta, 1.0 - beta, 1.0, &[], SigmaMode::Posterior, false).map_err(e2s)?;
        worst = back.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure(worst < 1e-12, format!("max abs error {worst:e}"))?;
    Ok(format!("1000 cases, max abs error {worst:.1e}"))
}

fn forward_statistics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // the 1% band on the mean must sit well outside the sampling error
    // (sqrt(0.5 / n) = 0.0022), which needs |x0| of order 1 or more
    let x0 = [1.0, -2.0];
    let n = 100_000;
    let mut sums = [0.0; 2];
    let mut sq = [0.0; 2];
    for _ in 0..n {
        let eps = standard_normal(2, &mut rng);
        let x = forward_sample(&x0, 0.5, &eps).map_err(e2s)?;
        for i in 0..2 {
            sums[i] += x[i];
            sq[i] += x[i] * x[i];
        }
    }
    let mut detail = Vec::new();
    for i in 0..2 {
        let mean = sums[i] / n as f64;
        let var = sq[i] / n as f64 - mean * mean;
        let want = 0.5f64.sqrt() * x0[i];
        ensure((mean - want).abs() <= 0.01 * want.abs(), format!("mean {mean} vs {want}"))?;
        ensure((var - 0.5).abs() <= 0.02 * 0.5, format!("variance {var}"))?;
        detail.push(format!("x0={}: mean {mean:.4} (want {want:.4}), var {var:.4}", x0[i]));
    }
    Ok(detail.join("; "))
}

// ---------------------------------------------------------------------------
// gradients

fn small_dataset(n: usize, seed: u64, search: usize, test: usize) -> Dataset {
    let clips: Vec<_> = synth_corpus(&SynthSpec::desk(n, seed))
        .unwrap()
        .into_iter()
        .map(|c| c.clip)
        .collect();
    let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
    Dataset::new(clips, DatasetSplit::from_counts(&ids, search, test).unwrap(), FeatureConfig::desk()).unwrap()
}

fn gradient_fidelity() -> Check {
    let ds = small_dataset(8, 3, 1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let batch = ds.sample_batch(&ds.split().train_ids, 2, &mut rng).map_err(e2s)?;
    let predictor = NoisePredictor::init(NetworkConfig::desk(), 4).map_err(e2s)?;
    let loss = MultiResLoss::new(MultiResConfig::desk(), &FeatureConfig::desk()).map_err(e2s)?;
    let curve = NoiseSchedule::standard().alpha_bar();
    let mut detail = Vec::new();
    let mut worst: f64 = 0.0;
    for n in [2usize, 3] {
        let cfg = TrainingConfig::finetune(0, 1, 2, vec![n]);
        let (levels, eps) = draw_diffusion(&batch, &curve, &mut rng);
        let unroll = draw_unroll(&batch, &cfg, &mut rng).map_err(e2s)?;
        for lambda in [cfg.lambda_by_n[&n], 1.0] {
            let draws = StepDraws {
                levels: levels.clone(),
                eps: eps.clone(),
                unroll: Some(diffvoc::trainer::UnrollDraw {
                    lambda,
                    ..unroll.clone()
                }),
            };
            let objective = |p: &NoisePredictor, want: bool| {
                step_objective(p, &batch, &draws, &loss, cfg.sampler, want).map(|(l, g)| (l.total, g))
            };
            let report = gradcheck(&objective, &predictor, 1e-6, 50, 100 + n as u64).map_err(e2s)?;
            worst = worst.max(report.max_rel_error);
            detail.push(format!("N={n} lambda={lambda:e}: {:.1e}", report.max_rel_error));
        }
    }
    ensure(worst < 1e-4, detail.join(", "))?;
    Ok(format!(
        "{} params, 50 sampled; max rel error {}",
        predictor.param_count(),
        detail.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// losses

fn loss_identities() -> Check {
    let features = FeatureConfig::desk();
    let mr = MultiResConfig::desk();
    let loss = MultiResLoss::new(mr.clone(), &features).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = standard_normal(256, &mut rng);
    let zero_checks = [
        ("diffusion_loss", diffusion_loss(&x, &x).map_err(e2s)?),
        ("infer_loss", infer_loss(&x, &x, &loss).map_err(e2s)?.total),
        ("ls_mse", ls_mse(&x, &x, &features).map_err(e2s)?),
        ("mrstft_metric", mrstft_metric(&x, &x, &mr).map_err(e2s)?),
        ("l1_mel", l1_mel(&x, &x, &features).map_err(e2s)?),
    ];
    for (name, v) in zero_checks {
        ensure(v == 0.0, format!("{name}(x, x) = {v:e}"))?;
    }
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let mut flip = Vec::new();
    let mut max_pha: f64 = 0.0;
    for (i, res) in mr.resolutions.iter().enumerate() {
        ensure(loss_mag(&x, &x, res, loss.filterbank(i)).map_err(e2s)? == 0.0, "loss_mag(x, x) != 0")?;
        ensure(loss_pha(&x, &x, res, true).map_err(e2s)? == 0.0, "loss_pha(x, x) != 0")?;
        for _ in 0..20 {
            let y = standard_normal(256, &mut rng);
            let p = loss_pha(&x, &y, res, false).map_err(e2s)?;
            max_pha = max_pha.max(p);
        }
        let f = loss_pha(&x, &neg, res, true).map_err(e2s)?;
        ensure(
            (f - PHASE_LOSS_BOUND).abs() < 1e-9,
            format!("sign flip at fft {}: {f}", res.fft_size),
        )?;
        flip.push(f);
    }
    ensure(max_pha <= PHASE_LOSS_BOUND, format!("loss_pha {max_pha} above pi^2"))?;
    Ok(format!(
        "all seven losses are 0 on identical inputs; max loss_pha on random pairs {max_pha:.4} <= {PHASE_LOSS_BOUND:.4}; sign flip {:.10} (pi^2 = {PHASE_LOSS_BOUND:.10})",
        flip.iter().cloned().fold(f64::NAN, f64::min)
    ))
}

// ---------------------------------------------------------------------------
// desk-scale runs

struct DeskRuns {
    dataset: Dataset,
    loss: MultiResLoss,
    pretrained: NoisePredictor,
    pretrain_log: Vec<StepRecord>,
    specified3: NoisePredictor,
    specified3_log: Vec<StepRecord>,
    specified2: NoisePredictor,
    general: NoisePredictor,
    /// Same fine-tune run with lambda = 0: continued epsilon-loss training only.
    control: NoisePredictor,
    pretrain_time: Duration,
    finetune_time: Duration,
}

const PRETRAIN_STEPS: u64 = 5000;
const FINETUNE_STEPS: u64 = 2000;
const BATCH: usize = 8;

fn finetune_from(start: &NoisePredictor, n_modes: Vec<usize>, lambda: Option<f64>, job: &TrainingJob) -> (NoisePredictor, Vec<StepRecord>) {
    let mut cfg = TrainingConfig::finetune(2, FINETUNE_STEPS, BATCH, n_modes);
    if let Some(l) = lambda {
        cfg.lambda_by_n.values_mut().for_each(|v| *v = l);
    }
    let job = TrainingJob { training: &cfg, ..job.clone() };
    let out = run_training(&job, Some(start.clone()), None, None).expect("fine-tuning runs");
    (out.checkpoint.predictor, out.records)
}

fn desk_runs() -> DeskRuns {
    let dataset = small_dataset(200, 0, 10, 20);
    let loss = MultiResLoss::new(MultiResConfig::desk(), &FeatureConfig::desk()).unwrap();
    let curve = NoiseSchedule::standard().alpha_bar();
    let pre_cfg = TrainingConfig::pretrain(1, PRETRAIN_STEPS, BATCH);
    let job = TrainingJob {
        training: &pre_cfg,
        curve: &curve,
        loss: &loss,
        dataset: &dataset,
    };
    let t0 = Instant::now();
    let init = NoisePredictor::init(NetworkConfig::desk(), 0).unwrap();
    let pre = run_training(&job, Some(init), None, None).expect("pretraining runs");
    let pretrain_time = t0.elapsed();
    let pretrained = pre.checkpoint.predictor;
    let t1 = Instant::now();
    let (specified3, specified3_log) = finetune_from(&pretrained, vec![3], None, &job);
    let finetune_time = t1.elapsed();
    let (specified2, _) = finetune_from(&pretrained, vec![2], None, &job);
    let (general, _) = finetune_from(&pretrained, vec![2, 3], None, &job);
    let (control, _) = finetune_from(&pretrained, vec![3], Some(0.0), &job);
    println!(
        "  desk runs: pretrain {:.1} s, specified N=3 fine-tune {:.1} s",
        pretrain_time.as_secs_f64(),
        finetune_time.as_secs_f64()
    );
    DeskRuns {
        dataset,
        loss,
        pretrained,
        pretrain_log: pre.records,
        specified3,
        specified3_log,
        specified2,
        general,
        control,
        pretrain_time,
        finetune_time,
    }
}

fn test_clips(ds: &Dataset) -> Vec<Segment> {
    ds.split().test_ids.iter().map(|id| ds.centre_segment(id).unwrap()).collect()
}

fn search_clips(ds: &Dataset) -> Vec<Segment> {
    ds.split().search_ids.iter().map(|id| ds.centre_segment(id).unwrap()).collect()
}

fn settings() -> EvalSettings {
    EvalSettings::new(FeatureConfig::desk(), MultiResConfig::desk())
}

fn window_mean(records: &[StepRecord], f: impl Fn(&StepRecord) -> f64, head: bool) -> f64 {
    let w = 100.min(records.len());
    let slice = if head { &records[..w] } else { &records[records.len() - w..] };
    slice.iter().map(f).sum::<f64>() / w as f64
}

fn desk_effect(runs: &DeskRuns) -> Check {
    let grid = stratified_grid(&ScheduleRange::standard(3).unwrap(), 3).map_err(e2s)?;
    let clips = test_clips(&runs.dataset);
    let desc = "3 strata midpoints per step over the N=3 training range";
    let start = Instant::now();
    let before = sensitivity_sweep(&runs.pretrained, &clips, &grid, desc, &settings()).map_err(e2s)?;
    let after = sensitivity_sweep(&runs.specified3, &clips, &grid, desc, &settings()).map_err(e2s)?;
    let total = runs.pretrain_time + runs.finetune_time + start.elapsed();
    let control = sensitivity_sweep(&runs.control, &clips, &grid, desc, &settings()).map_err(e2s)?;
    println!(
        "  control (lambda = 0, same steps): mean {:.4} std {:.4}",
        control.mean, control.std
    );
    let failed = |r: &SweepReport| r.results.iter().filter(|s| s.l1_mel.is_none()).count();
    let detail = format!(
        "{} clips x {} schedules; pretrain-only mean {:.4} std {:.4} -> fine-tuned mean {:.4} std {:.4}; {:.0} s total",
        clips.len(),
        grid.len(),
        before.mean,
        before.std,
        after.mean,
        after.std,
        total.as_secs_f64()
    );
    ensure(failed(&before) == 0 && failed(&after) == 0, format!("generation failures; {detail}"))?;
    ensure(after.mean < before.mean, format!("mean did not decrease; {detail}"))?;
    ensure(after.std < before.std, format!("std did not decrease; {detail}"))?;
    ensure(total < Duration::from_secs(30 * 60), format!("over budget; {detail}"))?;
    Ok(detail)
}

fn training_health(runs: &DeskRuns) -> Check {
    let ld = |r: &StepRecord| r.losses.l_d;
    let pre_start = window_mean(&runs.pretrain_log, ld, true);
    let pre_end = window_mean(&runs.pretrain_log, ld, false);
    let ft_start = window_mean(&runs.specified3_log, ld, true);
    let ft_end = window_mean(&runs.specified3_log, ld, false);
    let detail = format!(
        "pretrain L_D {pre_start:.4} -> {pre_end:.4}; fine-tune L_D {ft_start:.4} -> {ft_end:.4} (100-step windows)"
    );
    ensure(pre_end <= 0.5 * pre_start, format!("pretraining loss fell by less than half; {detail}"))?;
    ensure(ft_end <= 3.0 * ft_start, format!("fine-tuning inflated L_D; {detail}"))?;
    Ok(detail)
}

/// Independent second pass over the grid: plain loops over `generate` and
/// `l1_mel`, then an explicit argmin with the lexicographic tie-break.
fn brute_force(predictor: &NoisePredictor, clips: &[Segment], grid: &[InferenceSchedule]) -> (Vec<f64>, usize) {
    let cfg = FeatureConfig::desk();
    let mut values = Vec::new();
    for s in grid {
        let mut acc = 0.0;
        for c in clips {
            let mut rng = ChaCha8Rng::seed_from_u64(generation_seed(s, &c.clip_id));
            let x_hat = generate(predictor, &c.mel, s, &mut rng, SamplerOptions::default()).unwrap();
            acc += l1_mel(&c.audio, &x_hat, &cfg).unwrap();
        }
        values.push(acc / clips.len() as f64);
    }
    let mut best = 0;
    for i in 1..grid.len() {
        let (a, b) = (values[i], values[best]);
        let lex_smaller = grid[i]
            .betas()
            .iter()
            .zip(grid[best].betas())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .is_some_and(|o| o.is_lt());
        if a < b || (a == b && lex_smaller) {
            best = i;
        }
    }
    (values, best)
}

fn grid_search_parity(runs: &DeskRuns) -> Check {
    let clips = search_clips(&runs.dataset);
    let grids = [
        ("N=3 mantissas {1,5}", enumerate_grid(&ScheduleRange::standard(3).unwrap(), &[1.0, 5.0]).unwrap()),
        ("N=2 3 strata", stratified_grid(&ScheduleRange::standard(2).unwrap(), 3).unwrap()),
        ("single schedule", vec![corrected_two_step_schedule()]),
    ];
    let mut detail = Vec::new();
    for (name, grid) in &grids {
        ensure(grid.len() <= 50, format!("{name} has {} candidates", grid.len()))?;
        for (model_name, model) in [("pretrained", &runs.pretrained), ("fine-tuned", &runs.specified3)] {
            let report = grid_search(model, &clips, grid, name, &settings()).map_err(e2s)?;
            let (values, best) = brute_force(model, &clips, grid);
            for (r, v) in report.results.iter().zip(&values) {
                ensure(
                    r.l1_mel.map(f64::to_bits) == Some(v.to_bits()),
                    format!("{name}/{model_name}: {:?} vs {v}", r.l1_mel),
                )?;
            }
            ensure(report.best == Some(best), format!("{name}/{model_name}: best {:?} vs {best}", report.best))?;
            detail.push(format!("{name} ({}) {model_name} best {:?}", grid.len(), grid[best].betas()));
        }
    }
    Ok(format!("bit-exact on {} grid/model pairs; {}", detail.len(), detail.join("; ")))
}

/// Mean infer loss over the test clips and the 3-strata grid for `n` steps.
fn held_out_infer_loss(model: &NoisePredictor, runs: &DeskRuns, n: usize) -> f64 {
    let grid = stratified_grid(&ScheduleRange::standard(n).unwrap(), 3).unwrap();
    let clips = test_clips(&runs.dataset);
    let mut acc = 0.0;
    for s in &grid {
        for c in &clips {
            let x_hat = generate_for_clip(model, c, s, SamplerOptions::default()).unwrap();
            acc += runs.loss.evaluate(&c.audio, &x_hat).unwrap().total;
        }
    }
    acc / (grid.len() * clips.len()) as f64
}

fn general_mode_parity(runs: &DeskRuns) -> Check {
    let mut detail = Vec::new();
    let mut ok = true;
    for (n, specified) in [(2usize, &runs.specified2), (3, &runs.specified3)] {
        let p = held_out_infer_loss(&runs.pretrained, runs, n);
        let s = held_out_infer_loss(specified, runs, n);
        let g = held_out_infer_loss(&runs.general, runs, n);
        let rel = (g - s).abs() / s;
        ok &= rel <= 0.25;
        detail.push(format!(
            "N={n}: specified {s:.4}, general {g:.4} ({:+.2}%), pretrain-only {p:.4}",
            100.0 * (g - s) / s
        ));
    }
    ensure(ok, detail.join("; "))?;
    Ok(detail.join("; "))
}

// ---------------------------------------------------------------------------
// determinism

fn train_into(job: &TrainingJob, start: Option<&NoisePredictor>, resume: Option<&Path>, dir: &Path) -> Vec<u8> {
    let resume = resume.map(|p| load_checkpoint(p).unwrap());
    run_training(job, start.cloned(), resume, Some(&RunOutput { dir: dir.to_path_buf() })).unwrap();
    std::fs::read(dir.join("final.ckpt")).unwrap()
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let root = tmp.path();
    let ds = small_dataset(16, 9, 2, 3);
    let loss = MultiResLoss::new(MultiResConfig::desk(), &FeatureConfig::desk()).map_err(e2s)?;
    let curve = NoiseSchedule::standard().alpha_bar();
    let init = NoisePredictor::init(NetworkConfig::desk(), 7).map_err(e2s)?;

    let mut pre = TrainingConfig::pretrain(5, 30, 4);
    pre.checkpoint_every = 10;
    let job = TrainingJob {
        training: &pre,
        curve: &curve,
        loss: &loss,
        dataset: &ds,
    };
    let a = train_into(&job, Some(&init), None, &root.join("pre-a"));
    let b = train_into(&job, Some(&init), None, &root.join("pre-b"));
    std::fs::create_dir_all(root.join("pre-c")).map_err(e2s)?;
    std::fs::copy(root.join("pre-a/step-0000020.ckpt"), root.join("pre-c/step-0000020.ckpt")).map_err(e2s)?;
    let c = train_into(&job, None, Some(&root.join("pre-c/step-0000020.ckpt")), &root.join("pre-c"));
    ensure(a == b, "pretraining checkpoints differ between identical runs")?;
    ensure(a == c, "resumed pretraining differs from the uninterrupted run")?;
    let pretrained = load_checkpoint(root.join("pre-a/final.ckpt")).map_err(e2s)?.predictor;

    let mut ft = TrainingConfig::finetune(6, 6, 2, vec![2, 3]);
    ft.checkpoint_every = 3;
    let job = TrainingJob { training: &ft, ..job };
    let fa = train_into(&job, Some(&pretrained), None, &root.join("ft-a"));
    let fb = train_into(&job, Some(&pretrained), None, &root.join("ft-b"));
    let fc = train_into(&job, None, Some(&root.join("ft-a/step-0000003.ckpt")), &root.join("ft-c"));
    ensure(fa == fb, "fine-tuning checkpoints differ between identical runs")?;
    ensure(fa == fc, "resumed fine-tuning differs from the uninterrupted run")?;
    let tuned = load_checkpoint(root.join("ft-a/final.ckpt")).map_err(e2s)?.predictor;

    let clips: Vec<Segment> = ds.split().test_ids.iter().map(|id| ds.centre_segment(id).unwrap()).collect();
    let grid = stratified_grid(&ScheduleRange::standard(2).unwrap(), 2).map_err(e2s)?;
    let mut files = Vec::new();
    for tag in ["r1", "r2"] {
        let dir = root.join(tag);
        std::fs::create_dir_all(&dir).map_err(e2s)?;
        let sweep = sensitivity_sweep(&tuned, &clips, &grid, "2 strata", &settings()).map_err(e2s)?;
        emit_sweep(&sweep, ReportFormat::Json, &dir.join("sweep.json")).map_err(e2s)?;
        emit_sweep(&sweep, ReportFormat::Csv, &dir.join("sweep.csv")).map_err(e2s)?;
        plot_sweep(&sweep, &dir.join("sweep.png")).map_err(e2s)?;
        let metrics = evaluate_metrics(&tuned, &clips, &corrected_two_step_schedule(), &settings()).map_err(e2s)?;
        emit_metrics(&metrics, ReportFormat::Json, &dir.join("metrics.json")).map_err(e2s)?;
        emit_metrics(&metrics, ReportFormat::Csv, &dir.join("metrics.csv")).map_err(e2s)?;
        files.push(dir);
    }
    for name in ["sweep.json", "sweep.csv", "sweep.png", "metrics.json", "metrics.csv"] {
        let x = std::fs::read(files[0].join(name)).map_err(e2s)?;
        let y = std::fs::read(files[1].join(name)).map_err(e2s)?;
        ensure(x == y, format!("{name} differs between identical runs"))?;
    }
    Ok(format!(
        "pretrain/fine-tune checkpoints identical across reruns and resume; model {}; 5 report files byte-identical",
        &tuned.digest()[..16]
    ))
}

fn main() {
    let mut ledger = Ledger { lines: Vec::new() };
    ledger.run("schedule algebra", schedule_algebra);
    ledger.run("validator cases", validator_cases);
    ledger.run("exact recovery", exact_recovery);
    ledger.run("forward statistics", forward_statistics);
    ledger.run("gradient fidelity", gradient_fidelity);
    ledger.run("loss identities", loss_identities);
    ledger.run("determinism", determinism);

    let started = Instant::now();
    let runs = catch_unwind(desk_runs);
    println!("  desk training total {:.1} s", started.elapsed().as_secs_f64());
    match &runs {
        Ok(runs) => {
            ledger.run("desk fine-tuning effect", || desk_effect(runs));
            ledger.run("desk training health", || training_health(runs));
            ledger.run("grid-search parity", || grid_search_parity(runs));
            ledger.run("general-mode parity", || general_mode_parity(runs));
        }
        Err(_) => {
            for name in ["desk fine-tuning effect", "desk training health", "grid-search parity", "general-mode parity"] {
                ledger.run(name, || Err("desk training runs failed".into()));
            }
        }
    }

    let failed = ledger.lines.iter().filter(|(p, _)| !p).count();
    println!("acceptance: {} passed, {failed} failed", ledger.lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
