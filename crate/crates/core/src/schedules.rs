//! Noise-schedule algebra: training schedules, few-step inference schedules,
//! noise-level curves, validity rules, range sampling and grid enumeration.
//!
//! All arithmetic is `f64`; products of near-unity factors lose too much in
//! single precision.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum draws before [`ScheduleRange::sample`] gives up on a monotone vector.
pub const MAX_SAMPLE_ATTEMPTS: usize = 100;

fn check_betas(betas: &[f64], what: &str) -> Result<()> {
    if betas.is_empty() {
        return Err(Error::Config(format!("{what}: at least one step is required")));
    }
    for (i, &b) in betas.iter().enumerate() {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::Config(format!("{what}: beta[{}] = {b} is outside (0, 1)", i + 1)));
        }
    }
    for (i, w) in betas.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::Config(format!(
                "{what}: betas must be strictly increasing (beta[{}] = {} >= beta[{}] = {})",
                i + 1,
                w[0],
                i + 2,
                w[1]
            )));
        }
    }
    Ok(())
}

/// Training (forward-process) schedule `beta_1 < ... < beta_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrainingScheduleDoc", into = "TrainingScheduleDoc")]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    linear: Option<(f64, f64)>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        check_betas(&betas, "training schedule")?;
        Ok(Self { betas, linear: None })
    }

    /// `beta_t = beta_min + (t - 1) (beta_max - beta_min) / (T - 1)`.
    pub fn linear(beta_min: f64, beta_max: f64, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("linear schedule needs T >= 2, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "linear schedule needs 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let span = beta_max - beta_min;
        let denom = (steps - 1) as f64;
        let mut betas: Vec<f64> = (0..steps).map(|i| beta_min + i as f64 * span / denom).collect();
        // pin the endpoint against accumulated rounding
        betas[steps - 1] = beta_max;
        check_betas(&betas, "linear schedule")?;
        Ok(Self {
            betas,
            linear: Some((beta_min, beta_max)),
        })
    }

    /// The training schedule used throughout: T = 1000, linear 1e-6 to 1e-2.
    pub fn standard() -> Self {
        Self::linear(1e-6, 1e-2, 1000).expect("valid constants")
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self) -> AlphaBarCurve {
        AlphaBarCurve::from_betas(&self.betas)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum TrainingScheduleDoc {
    Linear {
        beta_min: f64,
        beta_max: f64,
        #[serde(rename = "T")]
        steps: usize,
    },
    Explicit {
        betas: Vec<f64>,
    },
}

impl TryFrom<TrainingScheduleDoc> for NoiseSchedule {
    type Error = Error;
    fn try_from(doc: TrainingScheduleDoc) -> Result<Self> {
        match doc {
            TrainingScheduleDoc::Linear {
                beta_min,
                beta_max,
                steps,
            } => NoiseSchedule::linear(beta_min, beta_max, steps),
            TrainingScheduleDoc::Explicit { betas } => NoiseSchedule::new(betas),
        }
    }
}

impl From<NoiseSchedule> for TrainingScheduleDoc {
    fn from(s: NoiseSchedule) -> Self {
        match s.linear {
            Some((beta_min, beta_max)) => TrainingScheduleDoc::Linear {
                beta_min,
                beta_max,
                steps: s.betas.len(),
            },
            None => TrainingScheduleDoc::Explicit { betas: s.betas },
        }
    }
}

/// Noise levels `alpha_bar_0 = 1, alpha_bar_t = prod_{s <= t} (1 - beta_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaBarCurve {
    values: Vec<f64>,
}

impl AlphaBarCurve {
    /// Running product over arbitrary betas. No validation is done here so
    /// degenerate test schedules (e.g. all zeros) can be expressed.
    pub fn from_betas(betas: &[f64]) -> Self {
        let mut values = Vec::with_capacity(betas.len() + 1);
        values.push(1.0);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            values.push(acc);
        }
        Self { values }
    }

    /// Values indexed `0..=T`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    /// `alpha_bar_T`.
    pub fn last(&self) -> f64 {
        *self.values.last().expect("curve is never empty")
    }
}

/// Few-step reverse-process schedule `beta_hat_1 < ... < beta_hat_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InferenceScheduleDoc", into = "InferenceScheduleDoc")]
pub struct InferenceSchedule {
    betas_hat: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InferenceScheduleDoc {
    betas_hat: Vec<f64>,
}

impl TryFrom<InferenceScheduleDoc> for InferenceSchedule {
    type Error = Error;
    fn try_from(doc: InferenceScheduleDoc) -> Result<Self> {
        InferenceSchedule::new(doc.betas_hat)
    }
}

impl From<InferenceSchedule> for InferenceScheduleDoc {
    fn from(s: InferenceSchedule) -> Self {
        Self { betas_hat: s.betas_hat }
    }
}

impl InferenceSchedule {
    pub fn new(betas_hat: Vec<f64>) -> Result<Self> {
        check_betas(&betas_hat, "inference schedule")?;
        Ok(Self { betas_hat })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas_hat
    }

    /// Number of reverse steps `N`.
    pub fn steps(&self) -> usize {
        self.betas_hat.len()
    }

    /// `alpha_bar_hat_0 ..= alpha_bar_hat_N`.
    pub fn alpha_bar(&self) -> Vec<f64> {
        AlphaBarCurve::from_betas(&self.betas_hat).values
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schedule serializes")
    }
}

impl fmt::Display for InferenceSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, b) in self.betas_hat.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{b}")?;
        }
        write!(f, "]")
    }
}

/// Either kind of schedule file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleDocument {
    Training(NoiseSchedule),
    Inference(InferenceSchedule),
}

/// Schedules reported for the baseline after grid search, keyed by `N`.
pub fn searched_baseline_schedule(steps: usize) -> Option<InferenceSchedule> {
    let betas = match steps {
        6 => vec![0.000006, 0.00002, 0.0001, 0.001, 0.02, 0.3],
        3 => vec![0.00005, 0.005, 0.3],
        2 => vec![0.0001, 0.3],
        _ => return None,
    };
    Some(InferenceSchedule::new(betas).expect("valid constants"))
}

/// The hand-corrected two-step schedule used in place of the searched one.
pub fn corrected_two_step_schedule() -> InferenceSchedule {
    InferenceSchedule::new(vec![0.001, 0.5]).expect("valid constants")
}

/// Half-open interval `[low, high)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.low && x < self.high
    }
}

/// Per-step intervals from which inference betas are drawn or enumerated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Interval>", into = "Vec<Interval>")]
pub struct ScheduleRange {
    steps: Vec<Interval>,
}

impl TryFrom<Vec<Interval>> for ScheduleRange {
    type Error = Error;
    fn try_from(v: Vec<Interval>) -> Result<Self> {
        ScheduleRange::new(v)
    }
}

impl From<ScheduleRange> for Vec<Interval> {
    fn from(r: ScheduleRange) -> Self {
        r.steps
    }
}

impl ScheduleRange {
    pub fn new(steps: Vec<Interval>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("schedule range needs at least one step".into()));
        }
        for (i, iv) in steps.iter().enumerate() {
            if !(iv.low > 0.0 && iv.low < iv.high && iv.high <= 1.0) {
                return Err(Error::Config(format!(
                    "step {} range [{}, {}) must satisfy 0 < low < high <= 1",
                    i + 1,
                    iv.low,
                    iv.high
                )));
            }
        }
        if steps.windows(2).any(|w| w[1].low < w[0].low) {
            return Err(Error::Config("range lower bounds must be nondecreasing by step".into()));
        }
        Ok(Self { steps })
    }

    /// Fine-tuning ranges for the supported step counts (2, 3 and 6).
    ///
    /// For six steps, step `n` covers the decade `[10^(n-7), 10^(n-6))`.
    pub fn standard(steps: usize) -> Option<Self> {
        let iv = Interval::new;
        let v = match steps {
            6 => (1..=6)
                .map(|n: i32| iv(dec(n - 7), dec(n - 6)))
                .collect(),
            3 => vec![iv(1e-6, 1e-4), iv(1e-4, 1e-2), iv(1e-1, 1.0)],
            2 => vec![iv(1e-5, 1e-2), iv(1e-1, 1.0)],
            _ => return None,
        };
        Some(Self::new(v).expect("valid constants"))
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.steps
    }

    pub fn steps(&self) -> usize {
        self.steps.len()
    }

    /// Draws each beta uniformly from its interval, rejecting non-monotone
    /// vectors up to [`MAX_SAMPLE_ATTEMPTS`] times.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<InferenceSchedule> {
        for _ in 0..MAX_SAMPLE_ATTEMPTS {
            let betas: Vec<f64> = self.steps.iter().map(|iv| uniform_in(iv, rng)).collect();
            if betas.windows(2).all(|w| w[0] < w[1]) {
                return InferenceSchedule::new(betas);
            }
        }
        Err(Error::Sampling(format!(
            "no strictly increasing schedule after {MAX_SAMPLE_ATTEMPTS} draws; ranges overlap too much"
        )))
    }
}

fn dec(exp: i32) -> f64 {
    format!("1e{exp}").parse().expect("decimal literal")
}

fn uniform_in<R: Rng + ?Sized>(iv: &Interval, rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        let v = iv.low + (iv.high - iv.low) * u;
        if v < iv.high {
            return v;
        }
    }
}

impl fmt::Display for ScheduleRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, iv) in self.steps.iter().enumerate() {
            if i > 0 {
                write!(f, " x ")?;
            }
            write!(f, "[{:e}, {:e})", iv.low, iv.high)?;
        }
        Ok(())
    }
}

/// Enumerates `m * 10^d` grids over whole-decade ranges.
///
/// Every step's interval must start and end on a power of ten. The result
/// is the lexicographically ordered Cartesian product, restricted to
/// strictly increasing schedules.
pub fn enumerate_grid(range: &ScheduleRange, mantissas: &[f64]) -> Result<Vec<InferenceSchedule>> {
    if mantissas.is_empty() {
        return Err(Error::Config("mantissa set is empty".into()));
    }
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(range.steps());
    for (i, iv) in range.intervals().iter().enumerate() {
        let lo = decade_exponent(iv.low)
            .ok_or_else(|| Error::Config(format!("step {} lower bound {} is not a power of ten", i + 1, iv.low)))?;
        let hi = decade_exponent(iv.high)
            .ok_or_else(|| Error::Config(format!("step {} upper bound {} is not a power of ten", i + 1, iv.high)))?;
        let mut values: Vec<f64> = Vec::new();
        for d in lo..hi {
            for &m in mantissas {
                let v: f64 = format!("{m}e{d}")
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid mantissa {m}")))?;
                if iv.contains(v) {
                    values.push(v);
                }
            }
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        axes.push(values);
    }
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(axes.len());
    product(&axes, &mut current, &mut out);
    if out.is_empty() {
        return Err(Error::Config("grid enumeration produced no strictly increasing schedule".into()));
    }
    Ok(out)
}

/// Splits each interval into `per_step` equal-width strata and takes their
/// midpoints, so the grid covers the range the same way uniform sampling does.
pub fn stratified_grid(range: &ScheduleRange, per_step: usize) -> Result<Vec<InferenceSchedule>> {
    if per_step == 0 {
        return Err(Error::Config("stratified grid needs at least one point per step".into()));
    }
    let axes: Vec<Vec<f64>> = range
        .intervals()
        .iter()
        .map(|iv| {
            (0..per_step)
                .map(|k| iv.low + (iv.high - iv.low) * (k as f64 + 0.5) / per_step as f64)
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(axes.len());
    product(&axes, &mut current, &mut out);
    if out.is_empty() {
        return Err(Error::Config("stratified grid produced no strictly increasing schedule".into()));
    }
    Ok(out)
}

/// The default mantissa set `{1, ..., 9}`.
pub fn default_mantissas() -> Vec<f64> {
    (1..=9).map(f64::from).collect()
}

fn product(axes: &[Vec<f64>], current: &mut Vec<f64>, out: &mut Vec<InferenceSchedule>) {
    let depth = current.len();
    if depth == axes.len() {
        out.push(InferenceSchedule {
            betas_hat: current.clone(),
        });
        return;
    }
    for &v in &axes[depth] {
        if current.last().is_some_and(|&p| v <= p) {
            continue;
        }
        current.push(v);
        product(axes, current, out);
        current.pop();
    }
}

fn decade_exponent(x: f64) -> Option<i32> {
    let e = x.log10().round();
    let exact: f64 = format!("1e{e}").parse().ok()?;
    ((x - exact).abs() <= 1e-12 * exact).then_some(e as i32)
}

/// Thresholds for the inference-schedule validity rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPolicy {
    /// Upper bound on `beta_hat_n / beta_hat_{n-1}`.
    pub max_ratio: f64,
    /// Upper bound on `alpha_bar_hat_N`.
    pub alpha_bar_final_max: f64,
    /// Lower bound on `alpha_bar_hat_N`, normally `alpha_bar_T` of training.
    pub alpha_bar_final_min: f64,
}

impl ValidationPolicy {
    /// Default thresholds paired with a training schedule.
    pub fn for_training(train: &NoiseSchedule) -> Self {
        Self {
            max_ratio: 1e3,
            alpha_bar_final_max: 0.7,
            alpha_bar_final_min: train.alpha_bar().last(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.max_ratio > 1.0) {
            return Err(Error::Config(format!("max_ratio must exceed 1, got {}", self.max_ratio)));
        }
        if !(0.0 < self.alpha_bar_final_min
            && self.alpha_bar_final_min < self.alpha_bar_final_max
            && self.alpha_bar_final_max < 1.0)
        {
            return Err(Error::Config(format!(
                "need 0 < alpha_bar_final_min < alpha_bar_final_max < 1, got {} and {}",
                self.alpha_bar_final_min, self.alpha_bar_final_max
            )));
        }
        Ok(())
    }
}

/// Identifies which validity rule a violation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// `beta_1 <= beta_hat_1 < ... < beta_hat_N < 1`
    Range,
    /// `beta_hat_n / beta_hat_{n-1} <= max_ratio`
    Ratio,
    /// `alpha_bar_hat_N` within `[alpha_bar_T, alpha_bar_final_max]`
    FinalNoiseLevel,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::Range => "range",
            Rule::Ratio => "ratio",
            Rule::FinalNoiseLevel => "final-noise-level",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    /// 1-based step index, when the rule concerns a single step.
    pub step: Option<usize>,
    pub measured: f64,
    pub bound: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rule '{}'", self.rule.id())?;
        if let Some(s) = self.step {
            write!(f, " at step {s}")?;
        }
        write!(f, ": measured {} vs bound {}", self.measured, self.bound)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violates(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return write!(f, "passed");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks an inference schedule against the range, ratio and final
/// noise-level rules, collecting every violation.
pub fn validate_inference_schedule(
    infer: &InferenceSchedule,
    train: &NoiseSchedule,
    policy: &ValidationPolicy,
) -> ValidationReport {
    let b = infer.betas();
    let mut violations = Vec::new();
    let beta_1 = train.betas()[0];
    if b[0] < beta_1 {
        violations.push(Violation {
            rule: Rule::Range,
            step: Some(1),
            measured: b[0],
            bound: beta_1,
        });
    }
    for n in 1..b.len() {
        if b[n] <= b[n - 1] {
            violations.push(Violation {
                rule: Rule::Range,
                step: Some(n + 1),
                measured: b[n],
                bound: b[n - 1],
            });
        }
    }
    let last = b[b.len() - 1];
    if last >= 1.0 {
        violations.push(Violation {
            rule: Rule::Range,
            step: Some(b.len()),
            measured: last,
            bound: 1.0,
        });
    }
    for n in 1..b.len() {
        let ratio = b[n] / b[n - 1];
        if ratio > policy.max_ratio {
            violations.push(Violation {
                rule: Rule::Ratio,
                step: Some(n + 1),
                measured: ratio,
                bound: policy.max_ratio,
            });
        }
    }
    let final_level = infer.alpha_bar()[b.len()];
    if final_level > policy.alpha_bar_final_max {
        violations.push(Violation {
            rule: Rule::FinalNoiseLevel,
            step: None,
            measured: final_level,
            bound: policy.alpha_bar_final_max,
        });
    }
    if final_level < policy.alpha_bar_final_min {
        violations.push(Violation {
            rule: Rule::FinalNoiseLevel,
            step: None,
            measured: final_level,
            bound: policy.alpha_bar_final_min,
        });
    }
    ValidationReport { violations }
}
