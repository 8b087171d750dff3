//! Mini-batch training loop, optimizers and per-step telemetry.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objectives::{evaluate, ObjectiveRegistry};
use crate::policy::PolicyModel;
use crate::rewards::{check_same_vocab, reference_log_probs, ObjectiveConfig};
use crate::synthdata::Dataset;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (expected adam or sgd)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: String,
    pub objective_cfg: ObjectiveConfig,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: "acpo".into(),
            objective_cfg: ObjectiveConfig::default(),
            lr: 1e-3,
            steps: 2000,
            batch_size: 32,
            seed: 1,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.objective_cfg.validate()
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), state.m.len(), "optimizer state has wrong length");
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

pub fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// Seeded epoch-wise shuffler yielding index batches; the trailing partial
/// batch of each epoch is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let batch = batch.min(n).max(1);
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
            batch,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch;
        &self.order[start..self.cursor]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub step: usize,
    pub loss: f64,
    pub mean_r_w: f64,
    pub mean_r_l: f64,
    pub mean_margin: f64,
    pub mean_logp_w: f64,
    pub mean_logp_l: f64,
    pub mean_alpha: Option<f64>,
    pub min_alpha: Option<f64>,
    pub max_alpha: Option<f64>,
    pub frac_alpha_lo: Option<f64>,
    pub frac_alpha_hi: Option<f64>,
    pub effective_beta: Option<f64>,
}

pub const TELEMETRY_HEADER: &str = "step,loss,mean_r_w,mean_r_l,mean_margin,mean_logp_w,mean_logp_l,mean_alpha,min_alpha,max_alpha,frac_alpha_lo,frac_alpha_hi,effective_beta";

/// `%.9g`-style rendering.
pub fn format_sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map(format_sig9).unwrap_or_default()
}

impl TelemetryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            format_sig9(self.loss),
            format_sig9(self.mean_r_w),
            format_sig9(self.mean_r_l),
            format_sig9(self.mean_margin),
            format_sig9(self.mean_logp_w),
            format_sig9(self.mean_logp_l),
            opt(self.mean_alpha),
            opt(self.min_alpha),
            opt(self.max_alpha),
            opt(self.frac_alpha_lo),
            opt(self.frac_alpha_hi),
            opt(self.effective_beta),
        )
    }
}

pub fn write_csv<W: Write>(rows: &[TelemetryRow], mut w: W) -> Result<()> {
    writeln!(w, "{TELEMETRY_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", row.to_csv())?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv(rows: &[TelemetryRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_csv(rows, std::io::BufWriter::new(f))
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<TelemetryRow>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?;
    if header.as_deref() != Some(TELEMETRY_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: "missing telemetry header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(bad(format!("expected 13 fields, found {}", fields.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
        let maybe = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        rows.push(TelemetryRow {
            step: fields[0].parse().map_err(|_| bad(format!("bad step `{}`", fields[0])))?,
            loss: num(fields[1])?,
            mean_r_w: num(fields[2])?,
            mean_r_l: num(fields[3])?,
            mean_margin: num(fields[4])?,
            mean_logp_w: num(fields[5])?,
            mean_logp_l: num(fields[6])?,
            mean_alpha: maybe(fields[7])?,
            min_alpha: maybe(fields[8])?,
            max_alpha: maybe(fields[9])?,
            frac_alpha_lo: maybe(fields[10])?,
            frac_alpha_hi: maybe(fields[11])?,
            effective_beta: maybe(fields[12])?,
        });
    }
    Ok(rows)
}

pub fn load_csv(path: &Path) -> Result<Vec<TelemetryRow>> {
    read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PolicyModel,
    pub telemetry: Vec<TelemetryRow>,
}

/// Trains `model` against the frozen `reference`. Each step evaluates the
/// sampled batch, records telemetry from that (pre-update) pass, then
/// applies the optimizer. `on_row` sees every row as it is produced.
pub fn train(
    mut model: PolicyModel,
    reference: &PolicyModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    registry: &ObjectiveRegistry,
    mut on_row: impl FnMut(&TelemetryRow) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !reference.is_frozen() {
        return Err(Error::Config("reference policy must be frozen".into()));
    }
    check_same_vocab(&model, reference)?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    for p in &dataset.pairs {
        model.vocab().check(&p.prompt)?;
        model.vocab().check(&p.chosen)?;
        model.vocab().check(&p.rejected)?;
    }
    let mut objective = registry.build(&cfg.objective, &cfg.objective_cfg)?;
    let refs = reference_log_probs(reference, &dataset.pairs)?;
    let mut sampler = BatchSampler::new(dataset.len(), cfg.batch_size, cfg.seed);
    let mut adam = AdamState::new(model.params().len());
    let mut telemetry = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = sampler.next_batch().to_vec();
        let pairs: Vec<_> = idx.iter().map(|&i| &dataset.pairs[i]).collect();
        let batch_refs: Vec<_> = idx.iter().map(|&i| refs[i]).collect();
        let (eval, breakdown) = evaluate(
            objective.as_ref(),
            &model,
            &pairs,
            &batch_refs,
            &cfg.objective_cfg,
            None,
            true,
        )?;
        let grad = eval.grad.as_deref().unwrap_or_default();
        if !eval.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step, batch: step });
        }

        let mean_r_w = mean(&eval.r_w);
        let mean_r_l = mean(&eval.r_l);
        let mut row = TelemetryRow {
            step,
            loss: eval.loss,
            mean_r_w,
            mean_r_l,
            mean_margin: mean_r_w - mean_r_l,
            mean_logp_w: mean(&eval.logp_w),
            mean_logp_l: mean(&eval.logp_l),
            mean_alpha: None,
            min_alpha: None,
            max_alpha: None,
            frac_alpha_lo: None,
            frac_alpha_hi: None,
            effective_beta: eval.effective_beta,
        };
        if let Some(alphas) = &eval.alphas {
            let n = alphas.len() as f64;
            let hats: Vec<f64> = alphas.iter().map(|a| a.alpha_hat).collect();
            row.mean_alpha = Some(mean(&hats));
            row.min_alpha = hats.iter().copied().reduce(f64::min);
            row.max_alpha = hats.iter().copied().reduce(f64::max);
            row.frac_alpha_lo = Some(alphas.iter().filter(|a| a.clamped_lo).count() as f64 / n);
            row.frac_alpha_hi = Some(alphas.iter().filter(|a| a.clamped_hi).count() as f64 / n);
        }

        let params = model.params_mut()?;
        match cfg.optimizer {
            OptimizerKind::Adam => adam_update(params, grad, &mut adam, cfg.lr),
            OptimizerKind::Sgd => sgd_update(params, grad, cfg.lr),
        }
        objective.observe(&breakdown);
        on_row(&row)?;
        telemetry.push(row);
    }
    Ok(TrainOutcome { model, telemetry })
}
