//! Preference objectives behind a common trait, and a name-keyed registry.
//!
//! Every objective maps a [`RewardBatch`] to a scalar loss node (batch
//! mean). Quantities an objective treats as constants (the ACPO coefficient,
//! the beta-DPO temperature) are reported in [`FrozenTerms`] so a caller can
//! replay the same surrogate at perturbed parameters.

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Array, Graph, NodeId};
use crate::policy::PolicyModel;
use crate::rewards::{build_rewards, AlphaBounds, ObjectiveConfig, RefLogProbs, RewardBatch, ShiftMode, TauMode};
use crate::synthdata::PreferencePair;

/// Constants captured during one loss evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrozenTerms {
    /// ACPO coefficient per pair (a single entry in batch mode).
    pub alpha: Option<Vec<f64>>,
    /// beta-DPO temperature.
    pub beta: Option<f64>,
}

/// Pre-clamp and clamped ACPO coefficient for one pair (or batch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaRecord {
    pub alpha_raw: f64,
    pub alpha_hat: f64,
    pub clamped_lo: bool,
    pub clamped_hi: bool,
    pub denom_floored: bool,
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Scalar batch-mean loss.
    pub loss: NodeId,
    /// Per-pair margin argument (inside the sigmoid, or the IPO log-ratio gap).
    pub margins: Vec<f64>,
    pub alphas: Option<Vec<AlphaRecord>>,
    pub effective_beta: Option<f64>,
    /// Mean unscaled log-ratio margin of the batch.
    pub raw_margin_mean: f64,
    pub frozen: FrozenTerms,
}

pub trait Objective: Send {
    fn name(&self) -> &'static str;

    /// Builds the loss. With `frozen`, constants are taken from a previous
    /// evaluation instead of being recomputed.
    fn loss(&self, g: &mut Graph, batch: &RewardBatch, frozen: Option<&FrozenTerms>) -> Result<LossBreakdown>;

    /// Updates running statistics after an optimizer step.
    fn observe(&mut self, _breakdown: &LossBreakdown) {}
}

fn raw_margin_mean(g: &Graph, batch: &RewardBatch) -> f64 {
    let w = g.value(batch.ratio_w).data();
    let l = g.value(batch.ratio_l).data();
    w.iter().zip(l).map(|(a, b)| a - b).sum::<f64>() / w.len() as f64
}

// mean(-log sigmoid(u)) = mean(softplus(-u))
fn logistic_loss(g: &mut Graph, u: NodeId) -> NodeId {
    let neg = g.neg(u);
    let per_pair = g.softplus(neg);
    g.mean(per_pair)
}

fn column_values(g: &Graph, id: NodeId) -> Vec<f64> {
    g.value(id).data().to_vec()
}

/// `-log sigmoid(r_w - r_l)`.
#[derive(Debug, Clone)]
pub struct Dpo;

impl Objective for Dpo {
    fn name(&self) -> &'static str {
        "dpo"
    }

    fn loss(&self, g: &mut Graph, batch: &RewardBatch, _frozen: Option<&FrozenTerms>) -> Result<LossBreakdown> {
        let u = g.sub(batch.r_w, batch.r_l)?;
        let loss = logistic_loss(g, u);
        Ok(LossBreakdown {
            loss,
            margins: column_values(g, u),
            alphas: None,
            effective_beta: None,
            raw_margin_mean: raw_margin_mean(g, batch),
            frozen: FrozenTerms::default(),
        })
    }
}

/// `(h_w - h_l - 1/(2 beta))^2` on unscaled log-ratios `h` (squared-loss
/// IPO form).
#[derive(Debug, Clone)]
pub struct Ipo {
    beta: f64,
}

impl Objective for Ipo {
    fn name(&self) -> &'static str {
        "ipo"
    }

    fn loss(&self, g: &mut Graph, batch: &RewardBatch, _frozen: Option<&FrozenTerms>) -> Result<LossBreakdown> {
        let gap = g.sub(batch.ratio_w, batch.ratio_l)?;
        let target = g.constant_scalar(1.0 / (2.0 * self.beta));
        let err = g.sub(gap, target)?;
        let sq = g.mul(err, err)?;
        let loss = g.mean(sq);
        Ok(LossBreakdown {
            loss,
            margins: column_values(g, gap),
            alphas: None,
            effective_beta: None,
            raw_margin_mean: raw_margin_mean(g, batch),
            frozen: FrozenTerms::default(),
        })
    }
}

/// Reference-free, length-normalised:
/// `-log sigmoid(b/|y_w| log pi(y_w) - b/|y_l| log pi(y_l) - gamma)`.
#[derive(Debug, Clone)]
pub struct SimPo {
    scale: f64,
    gamma: f64,
}

impl Objective for SimPo {
    fn name(&self) -> &'static str {
        "simpo"
    }

    fn loss(&self, g: &mut Graph, batch: &RewardBatch, _frozen: Option<&FrozenTerms>) -> Result<LossBreakdown> {
        let coef = |lens: &[usize]| Array::column(lens.iter().map(|&n| self.scale / n as f64).collect());
        let cw = g.leaf(coef(&batch.len_w));
        let cl = g.leaf(coef(&batch.len_l));
        let a = g.mul(batch.logp_w, cw)?;
        let b = g.mul(batch.logp_l, cl)?;
        let d = g.sub(a, b)?;
        let gamma = g.constant_scalar(self.gamma);
        let u = g.sub(d, gamma)?;
        let loss = logistic_loss(g, u);
        Ok(LossBreakdown {
            loss,
            margins: column_values(g, u),
            alphas: None,
            effective_beta: None,
            raw_margin_mean: raw_margin_mean(g, batch),
            frozen: FrozenTerms::default(),
        })
    }
}

/// Batch-adaptive temperature:
/// `beta_t = clamp(beta0 * (1 + c * (m_batch - m_ema)), beta0/2, 2 beta0)`,
/// where `m` is the mean unscaled log-ratio margin and `m_ema` its moving
/// average (initialised to the first batch mean).
pub fn beta_dpo_beta(beta0: f64, c: f64, batch_mean: f64, ema: f64) -> f64 {
    (beta0 * (1.0 + c * (batch_mean - ema))).clamp(beta0 / 2.0, 2.0 * beta0)
}

#[derive(Debug, Clone)]
pub struct BetaDpo {
    beta0: f64,
    c: f64,
    decay: f64,
    ema: Option<f64>,
}

impl BetaDpo {
    pub fn margin_ema(&self) -> Option<f64> {
        self.ema
    }
}

impl Objective for BetaDpo {
    fn name(&self) -> &'static str {
        "beta-dpo"
    }

    fn loss(&self, g: &mut Graph, batch: &RewardBatch, frozen: Option<&FrozenTerms>) -> Result<LossBreakdown> {
        let mean = raw_margin_mean(g, batch);
        let beta = match frozen.and_then(|f| f.beta) {
            Some(b) => b,
            None => beta_dpo_beta(self.beta0, self.c, mean, self.ema.unwrap_or(mean)),
        };
        let rw = g.scale(batch.ratio_w, beta);
        let rl = g.scale(batch.ratio_l, beta);
        let u = g.sub(rw, rl)?;
        let loss = logistic_loss(g, u);
        Ok(LossBreakdown {
            loss,
            margins: column_values(g, u),
            alphas: None,
            effective_beta: Some(beta),
            raw_margin_mean: mean,
            frozen: FrozenTerms {
                alpha: None,
                beta: Some(beta),
            },
        })
    }

    fn observe(&mut self, breakdown: &LossBreakdown) {
        let m = breakdown.raw_margin_mean;
        self.ema = Some(match self.ema {
            Some(e) => self.decay * e + (1.0 - self.decay) * m,
            None => m,
        });
    }
}

#[derive(Debug, Clone)]
pub struct DpoShift {
    lambda: f64,
    mode: ShiftMode,
}

impl Objective for DpoShift {
    fn name(&self) -> &'static str {
        "dpo-shift"
    }

    fn loss(&self, g: &mut Graph, batch: &RewardBatch, _frozen: Option<&FrozenTerms>) -> Result<LossBreakdown> {
        let u = match self.mode {
            ShiftMode::Scale => {
                let shifted = g.scale(batch.r_l, self.lambda);
                g.sub(batch.r_w, shifted)?
            }
            ShiftMode::Offset => {
                let gap = g.sub(batch.r_w, batch.r_l)?;
                let offset = g.constant_scalar(self.lambda);
                g.sub(gap, offset)?
            }
        };
        let loss = logistic_loss(g, u);
        Ok(LossBreakdown {
            loss,
            margins: column_values(g, u),
            alphas: None,
            effective_beta: None,
            raw_margin_mean: raw_margin_mean(g, batch),
            frozen: FrozenTerms::default(),
        })
    }
}

/// Closed-form ACPO coefficient for one pair:
/// `clamp((r_w - tau) / (sign(r_l) * max(|r_l|, eps)), lo, hi)`, `sign(0) = -1`.
pub fn acpo_alpha(r_w: f64, r_l: f64, tau: f64, bounds: AlphaBounds, epsilon: f64) -> AlphaRecord {
    let denom = crate::graph::floor_magnitude(r_l, epsilon);
    let alpha_raw = (r_w - tau) / denom;
    AlphaRecord {
        alpha_raw,
        alpha_hat: alpha_raw.clamp(bounds.lo, bounds.hi),
        clamped_lo: alpha_raw < bounds.lo,
        clamped_hi: alpha_raw > bounds.hi,
        denom_floored: r_l.abs() < epsilon,
    }
}

/// `-log sigmoid(r_w - sg[alpha] * r_l)` with the clamped coefficient.
#[derive(Debug, Clone)]
pub struct Acpo {
    bounds: AlphaBounds,
    epsilon: f64,
    batch_level: bool,
    detach: bool,
}

impl Acpo {
    // Coefficient expression built from the reward nodes themselves, so that
    // only the stop-gradient keeps it out of the derivative.
    fn alpha_node(&self, g: &mut Graph, batch: &RewardBatch) -> Result<(NodeId, NodeId, NodeId)> {
        let (rw, rl, tau) = if self.batch_level {
            let rw = g.mean(batch.r_w);
            let rl = g.mean(batch.r_l);
            let tau = g.constant_scalar(batch.tau[0]);
            (rw, rl, tau)
        } else {
            let tau = g.leaf(Array::column(batch.tau.clone()));
            (batch.r_w, batch.r_l, tau)
        };
        let num = g.sub(rw, tau)?;
        let den = g.floor_magnitude(rl, self.epsilon);
        let raw = g.div(num, den)?;
        let hat = g.clamp(raw, self.bounds.lo, self.bounds.hi);
        let alpha = if self.detach { g.detach(hat) } else { hat };
        Ok((alpha, raw, rl))
    }
}

impl Objective for Acpo {
    fn name(&self) -> &'static str {
        "acpo"
    }

    fn loss(&self, g: &mut Graph, batch: &RewardBatch, frozen: Option<&FrozenTerms>) -> Result<LossBreakdown> {
        let (alpha, records) = match frozen.and_then(|f| f.alpha.as_ref()) {
            Some(values) => {
                let node = if self.batch_level {
                    g.constant_scalar(values[0])
                } else {
                    g.leaf(Array::column(values.clone()))
                };
                (node, None)
            }
            None => {
                let (alpha, raw, rl) = self.alpha_node(g, batch)?;
                let raw = g.value(raw).data().to_vec();
                let rl = g.value(rl).data().to_vec();
                let hats = g.value(alpha).data();
                let records = raw
                    .iter()
                    .zip(hats)
                    .zip(&rl)
                    .map(|((&alpha_raw, &alpha_hat), &r_l)| AlphaRecord {
                        alpha_raw,
                        alpha_hat,
                        clamped_lo: alpha_raw < self.bounds.lo,
                        clamped_hi: alpha_raw > self.bounds.hi,
                        denom_floored: r_l.abs() < self.epsilon,
                    })
                    .collect::<Vec<_>>();
                (alpha, Some(records))
            }
        };
        let scaled = g.mul(batch.r_l, alpha)?;
        let u = g.sub(batch.r_w, scaled)?;
        let loss = logistic_loss(g, u);
        let alpha_values = g.value(alpha).data().to_vec();
        let alphas = records.unwrap_or_else(|| {
            alpha_values
                .iter()
                .map(|&a| AlphaRecord {
                    alpha_raw: a,
                    alpha_hat: a,
                    clamped_lo: false,
                    clamped_hi: false,
                    denom_floored: false,
                })
                .collect()
        });
        Ok(LossBreakdown {
            loss,
            margins: column_values(g, u),
            alphas: Some(alphas),
            effective_beta: None,
            raw_margin_mean: raw_margin_mean(g, batch),
            frozen: FrozenTerms {
                alpha: Some(alpha_values),
                beta: None,
            },
        })
    }
}

/// Constructor registered under an objective name.
pub type ObjectiveFactory = fn(&ObjectiveConfig) -> Result<Box<dyn Objective>>;

/// Objectives selectable by name, in registration order.
#[derive(Clone)]
pub struct ObjectiveRegistry {
    entries: Vec<(&'static str, ObjectiveFactory)>,
}

impl std::fmt::Debug for ObjectiveRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl Default for ObjectiveRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

fn build_dpo(_cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
    Ok(Box::new(Dpo))
}

fn build_ipo(cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
    Ok(Box::new(Ipo { beta: cfg.beta }))
}

fn build_simpo(cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
    Ok(Box::new(SimPo {
        scale: cfg.simpo_beta,
        gamma: cfg.gamma,
    }))
}

fn build_beta_dpo(cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
    Ok(Box::new(BetaDpo {
        beta0: cfg.beta,
        c: cfg.beta_dpo_c,
        decay: cfg.beta_dpo_decay,
        ema: None,
    }))
}

fn build_dpo_shift(cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
    if !(cfg.lambda > 0.0 && cfg.lambda <= 1.0) {
        return Err(Error::Config(format!("dpo-shift lambda must lie in (0, 1], got {}", cfg.lambda)));
    }
    Ok(Box::new(DpoShift {
        lambda: cfg.lambda,
        mode: cfg.shift_mode,
    }))
}

fn build_acpo(cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
    Ok(Box::new(Acpo {
        bounds: cfg.alpha,
        epsilon: cfg.epsilon,
        batch_level: cfg.tau_mode == TauMode::BatchMean,
        detach: cfg.detach_alpha,
    }))
}

impl ObjectiveRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("dpo", build_dpo);
        r.register("ipo", build_ipo);
        r.register("simpo", build_simpo);
        r.register("beta-dpo", build_beta_dpo);
        r.register("dpo-shift", build_dpo_shift);
        r.register("acpo", build_acpo);
        r
    }

    /// Adds or replaces an entry.
    pub fn register(&mut self, name: &'static str, factory: ObjectiveFactory) {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(entry) => entry.1 = factory,
            None => self.entries.push((name, factory)),
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    pub fn build(&self, name: &str, cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
        cfg.validate()?;
        let factory = self
            .entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| *f)
            .ok_or_else(|| Error::UnknownObjective {
                name: name.to_string(),
                known: self.names().join(", "),
            })?;
        factory(cfg)
    }
}

/// Plain values of one objective evaluation on a batch.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Option<Vec<f64>>,
    pub r_w: Vec<f64>,
    pub r_l: Vec<f64>,
    pub logp_w: Vec<f64>,
    pub logp_l: Vec<f64>,
    pub margins: Vec<f64>,
    pub alphas: Option<Vec<AlphaRecord>>,
    pub effective_beta: Option<f64>,
    pub raw_margin_mean: f64,
    pub frozen: FrozenTerms,
}

/// Forward (and optionally backward) pass of `objective` on `pairs` at the
/// parameters of `model`.
pub fn evaluate(
    objective: &dyn Objective,
    model: &PolicyModel,
    pairs: &[&PreferencePair],
    refs: &[RefLogProbs],
    cfg: &ObjectiveConfig,
    frozen: Option<&FrozenTerms>,
    with_grad: bool,
) -> Result<(Evaluation, LossBreakdown)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let batch = build_rewards(&mut g, model, &bound, pairs, refs, cfg)?;
    let breakdown = objective.loss(&mut g, &batch, frozen)?;
    let grad = if with_grad {
        g.backward(breakdown.loss)?;
        Some(model.gradient(&g, &bound))
    } else {
        None
    };
    let eval = Evaluation {
        loss: g.value(breakdown.loss).item(),
        grad,
        r_w: column_values(&g, batch.r_w),
        r_l: column_values(&g, batch.r_l),
        logp_w: column_values(&g, batch.logp_w),
        logp_l: column_values(&g, batch.logp_l),
        margins: breakdown.margins.clone(),
        alphas: breakdown.alphas.clone(),
        effective_beta: breakdown.effective_beta,
        raw_margin_mean: breakdown.raw_margin_mean,
        frozen: breakdown.frozen.clone(),
    };
    Ok((eval, breakdown))
}

/// ACPO gradient assembled from the chain rule with the coefficient held
/// fixed: `-(1 - sigmoid(u)) (grad r_w - alpha * grad r_l)`, batch-averaged.
///
/// Uses one backward pass through the chosen rewards alone and one through
/// the rejected rewards alone; coefficients come from plain arithmetic on
/// the reward values, not from the loss graph.
#[derive(Debug, Clone)]
pub struct AnalyticGradient {
    pub grad: Vec<f64>,
    pub alphas: Vec<AlphaRecord>,
    pub margins: Vec<f64>,
    /// Batch-averaged `-(1 - sigmoid(u)) grad r_w` part.
    pub chosen_part: Vec<f64>,
    /// Batch-averaged `(1 - sigmoid(u)) alpha grad r_l` part.
    pub rejected_part: Vec<f64>,
}

pub fn acpo_analytic_gradient(
    model: &PolicyModel,
    pairs: &[&PreferencePair],
    refs: &[RefLogProbs],
    cfg: &ObjectiveConfig,
) -> Result<AnalyticGradient> {
    let b = pairs.len() as f64;
    let reward_values = {
        let mut g = Graph::no_grad();
        let bound = model.bind(&mut g);
        let batch = build_rewards(&mut g, model, &bound, pairs, refs, cfg)?;
        (column_values(&g, batch.r_w), column_values(&g, batch.r_l), batch.tau)
    };
    let (r_w, r_l, tau) = reward_values;
    let alphas: Vec<AlphaRecord> = if cfg.tau_mode == TauMode::BatchMean {
        let mw = r_w.iter().sum::<f64>() / b;
        let ml = r_l.iter().sum::<f64>() / b;
        vec![acpo_alpha(mw, ml, tau[0], cfg.alpha, cfg.epsilon); pairs.len()]
    } else {
        (0..pairs.len())
            .map(|i| acpo_alpha(r_w[i], r_l[i], tau[i], cfg.alpha, cfg.epsilon))
            .collect()
    };
    let margins: Vec<f64> = (0..pairs.len()).map(|i| r_w[i] - alphas[i].alpha_hat * r_l[i]).collect();
    let pressure: Vec<f64> = margins.iter().map(|&u| 1.0 - sigmoid(u)).collect();

    let weighted_grad = |chosen: bool, weights: Vec<f64>| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let batch = build_rewards(&mut g, model, &bound, pairs, refs, cfg)?;
        let r = if chosen { batch.r_w } else { batch.r_l };
        let w = g.leaf(Array::column(weights));
        let weighted = g.mul(r, w)?;
        let seed = g.sum(weighted);
        g.backward(seed)?;
        Ok(model.gradient(&g, &bound))
    };
    let chosen_part = weighted_grad(true, pressure.iter().map(|p| -p / b).collect())?;
    let rejected_part = weighted_grad(
        false,
        pressure.iter().zip(&alphas).map(|(p, a)| p * a.alpha_hat / b).collect(),
    )?;
    let grad = chosen_part.iter().zip(&rejected_part).map(|(a, b)| a + b).collect();
    Ok(AnalyticGradient {
        grad,
        alphas,
        margins,
        chosen_part,
        rejected_part,
    })
}
