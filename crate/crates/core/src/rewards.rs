//! Implicit rewards, average step-wise advantage and the length-adaptive
//! advantage target.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Array, Graph, NodeId};
use crate::policy::{BoundPolicy, PolicyModel, Token};
use crate::synthdata::PreferencePair;

/// How the advantage target is attached to pairs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TauMode {
    /// `delta * (|y_w| + |y_l|)` for each pair.
    #[default]
    PerPair,
    /// Per-pair targets averaged over the batch; ACPO then solves one
    /// coefficient for the whole batch.
    BatchMean,
    /// Fixed target independent of length (the static-margin ablation).
    Static(f64),
}

impl fmt::Display for TauMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauMode::PerPair => f.write_str("pair"),
            TauMode::BatchMean => f.write_str("batch"),
            TauMode::Static(v) => write!(f, "static:{v}"),
        }
    }
}

impl FromStr for TauMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair" | "per-pair" => Ok(TauMode::PerPair),
            "batch" | "batch-mean" => Ok(TauMode::BatchMean),
            other => match other.strip_prefix("static:") {
                Some(v) => v
                    .parse()
                    .map(TauMode::Static)
                    .map_err(|_| Error::Config(format!("bad static target `{v}`"))),
                None => Err(Error::Config(format!(
                    "unknown tau mode `{other}` (expected pair, batch or static:<value>)"
                ))),
            },
        }
    }
}

/// Multiplicative (`r_w - lambda * r_l`) or additive (`r_w - r_l - lambda`)
/// DPO-Shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShiftMode {
    #[default]
    Scale,
    Offset,
}

impl FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale" => Ok(ShiftMode::Scale),
            "offset" => Ok(ShiftMode::Offset),
            other => Err(Error::Config(format!("unknown shift mode `{other}` (expected scale or offset)"))),
        }
    }
}

impl fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftMode::Scale => "scale",
            ShiftMode::Offset => "offset",
        })
    }
}

/// Clamp window for the ACPO coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaBounds {
    pub lo: f64,
    pub hi: f64,
}

impl AlphaBounds {
    pub const FORMAL: AlphaBounds = AlphaBounds { lo: 0.0, hi: 1.0 };
    pub const EMPIRICAL: AlphaBounds = AlphaBounds { lo: 0.3, hi: 0.95 };
}

/// Hyperparameters shared by every objective, plus baseline-specific knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub alpha: AlphaBounds,
    pub tau_mode: TauMode,
    /// SimPO reward scale.
    pub simpo_beta: f64,
    /// SimPO target margin.
    pub gamma: f64,
    /// DPO-Shift coefficient.
    pub lambda: f64,
    pub shift_mode: ShiftMode,
    /// beta-DPO sensitivity to the margin deviation.
    pub beta_dpo_c: f64,
    /// beta-DPO moving-average decay.
    pub beta_dpo_decay: f64,
    /// Fault injection for verification: when false, the ACPO coefficient
    /// is left attached to the graph.
    pub detach_alpha: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            delta: 0.1,
            epsilon: 1e-5,
            alpha: AlphaBounds::FORMAL,
            tau_mode: TauMode::PerPair,
            simpo_beta: 2.0,
            gamma: 0.5,
            lambda: 0.95,
            shift_mode: ShiftMode::Scale,
            beta_dpo_c: 0.1,
            beta_dpo_decay: 0.9,
            detach_alpha: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("beta", self.beta), ("delta", self.delta), ("epsilon", self.epsilon)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        let AlphaBounds { lo, hi } = self.alpha;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("alpha bounds must satisfy 0 <= lo <= hi <= 1, got [{lo}, {hi}]")));
        }
        if !(0.0..1.0).contains(&self.beta_dpo_decay) {
            return Err(Error::Config(format!("beta-dpo decay must lie in [0, 1), got {}", self.beta_dpo_decay)));
        }
        if let TauMode::Static(v) = self.tau_mode {
            if !v.is_finite() {
                return Err(Error::Config("static target must be finite".into()));
            }
        }
        Ok(())
    }
}

/// `beta * (log pi(y|x) - log pi_ref(y|x))`; the reference term is a constant.
pub fn implicit_reward(
    g: &mut Graph,
    model: &PolicyModel,
    bound: &BoundPolicy,
    reference: &PolicyModel,
    x: &[Token],
    y: &[Token],
    beta: f64,
) -> Result<NodeId> {
    check_same_vocab(model, reference)?;
    let logp = model.seq_log_prob(g, bound, x, y)?;
    let ref_logp = reference.seq_log_prob_value(x, y)?;
    let ref_node = g.leaf(Array::scalar(ref_logp));
    let ratio = g.sub(logp, ref_node)?;
    Ok(g.scale(ratio, beta))
}

pub fn check_same_vocab(model: &PolicyModel, reference: &PolicyModel) -> Result<()> {
    if model.vocab() != reference.vocab() || model.kind() != reference.kind() {
        return Err(Error::Vocab(format!(
            "policy ({} over {}) and reference ({} over {}) differ",
            model.kind(),
            model.vocab().size(),
            reference.kind(),
            reference.vocab().size()
        )));
    }
    Ok(())
}

/// `r / len`.
pub fn avg_step_advantage(reward: f64, len: usize) -> Result<f64> {
    if len == 0 {
        return Err(Error::EmptySequence("average step-wise advantage needs len >= 1"));
    }
    Ok(reward / len as f64)
}

/// `delta * (len_w + len_l)`.
pub fn advantage_target(len_w: usize, len_l: usize, delta: f64) -> f64 {
    delta * (len_w + len_l) as f64
}

/// Reference log-probabilities of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefLogProbs {
    pub chosen: f64,
    pub rejected: f64,
}

/// Reference log-probabilities for every pair, computed once without a graph.
pub fn reference_log_probs(reference: &PolicyModel, pairs: &[PreferencePair]) -> Result<Vec<RefLogProbs>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let mut seqs: Vec<(&[Token], &[Token])> = chunk.iter().map(|p| (p.prompt.as_slice(), p.chosen.as_slice())).collect();
        seqs.extend(chunk.iter().map(|p| (p.prompt.as_slice(), p.rejected.as_slice())));
        let values = reference.seq_log_prob_values(&seqs)?;
        let (w, l) = values.split_at(chunk.len());
        out.extend(w.iter().zip(l).map(|(&chosen, &rejected)| RefLogProbs { chosen, rejected }));
    }
    Ok(out)
}

/// Rewards of one mini-batch as `B x 1` graph nodes.
#[derive(Debug, Clone)]
pub struct RewardBatch {
    pub logp_w: NodeId,
    pub logp_l: NodeId,
    /// `log pi - log pi_ref` (unscaled).
    pub ratio_w: NodeId,
    pub ratio_l: NodeId,
    /// `beta * ratio`.
    pub r_w: NodeId,
    pub r_l: NodeId,
    pub ref_w: Vec<f64>,
    pub ref_l: Vec<f64>,
    pub len_w: Vec<usize>,
    pub len_l: Vec<usize>,
    pub tau: Vec<f64>,
    pub beta: f64,
}

/// Plain-value view of one pair of a [`RewardBatch`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardPack {
    pub r_w: f64,
    pub r_l: f64,
    pub logp_w_ref: f64,
    pub logp_l_ref: f64,
    pub len_w: usize,
    pub len_l: usize,
    pub tau: f64,
}

impl RewardBatch {
    pub fn len(&self) -> usize {
        self.len_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len_w.is_empty()
    }

    pub fn pack(&self, g: &Graph, i: usize) -> RewardPack {
        RewardPack {
            r_w: g.value(self.r_w).data()[i],
            r_l: g.value(self.r_l).data()[i],
            logp_w_ref: self.ref_w[i],
            logp_l_ref: self.ref_l[i],
            len_w: self.len_w[i],
            len_l: self.len_l[i],
            tau: self.tau[i],
        }
    }
}

/// Per-pair targets under `mode`.
pub fn batch_targets(len_w: &[usize], len_l: &[usize], delta: f64, mode: TauMode) -> Vec<f64> {
    let per_pair: Vec<f64> = len_w.iter().zip(len_l).map(|(&w, &l)| advantage_target(w, l, delta)).collect();
    match mode {
        TauMode::PerPair => per_pair,
        TauMode::BatchMean => {
            let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
            vec![mean; per_pair.len()]
        }
        TauMode::Static(v) => vec![v; per_pair.len()],
    }
}

/// Builds rewards for `pairs` in one batched forward pass of `model`.
pub fn build_rewards(
    g: &mut Graph,
    model: &PolicyModel,
    bound: &BoundPolicy,
    pairs: &[&PreferencePair],
    refs: &[RefLogProbs],
    cfg: &ObjectiveConfig,
) -> Result<RewardBatch> {
    if pairs.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if refs.len() != pairs.len() {
        return Err(Error::Config(format!(
            "{} reference entries for {} pairs",
            refs.len(),
            pairs.len()
        )));
    }
    let b = pairs.len();
    let mut seqs: Vec<(&[Token], &[Token])> = pairs.iter().map(|p| (p.prompt.as_slice(), p.chosen.as_slice())).collect();
    seqs.extend(pairs.iter().map(|p| (p.prompt.as_slice(), p.rejected.as_slice())));
    let logp = model.seq_log_probs(g, bound, &seqs)?;
    let shape = crate::error::Shape::new(b, 1);
    let logp_w = g.gather(logp, (0..b).collect(), shape)?;
    let logp_l = g.gather(logp, (b..2 * b).collect(), shape)?;
    let ref_w: Vec<f64> = refs.iter().map(|r| r.chosen).collect();
    let ref_l: Vec<f64> = refs.iter().map(|r| r.rejected).collect();
    let ref_w_node = g.leaf(Array::column(ref_w.clone()));
    let ref_l_node = g.leaf(Array::column(ref_l.clone()));
    let ratio_w = g.sub(logp_w, ref_w_node)?;
    let ratio_l = g.sub(logp_l, ref_l_node)?;
    let r_w = g.scale(ratio_w, cfg.beta);
    let r_l = g.scale(ratio_l, cfg.beta);
    let len_w: Vec<usize> = pairs.iter().map(|p| p.chosen.len()).collect();
    let len_l: Vec<usize> = pairs.iter().map(|p| p.rejected.len()).collect();
    let tau = batch_targets(&len_w, &len_l, cfg.delta, cfg.tau_mode);
    Ok(RewardBatch {
        logp_w,
        logp_l,
        ratio_w,
        ratio_l,
        r_w,
        r_l,
        ref_w,
        ref_l,
        len_w,
        len_l,
        tau,
        beta: cfg.beta,
    })
}
