//! Numerical self-checks: finite differences for every objective, the
//! closed-form ACPO gradient, coefficient bounds and degeneration identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{finite_diff_check, relative_error};
use crate::objectives::{acpo_alpha, acpo_analytic_gradient, evaluate, ObjectiveRegistry};
use crate::policy::{MlpDims, PolicyKind, PolicyModel, Vocab};
use crate::rewards::{reference_log_probs, AlphaBounds, ObjectiveConfig, RefLogProbs, ShiftMode};
use crate::synthdata::{gen_dataset, PreferencePair, WorldSpec};

/// Toy dimensions used by the checks: 340 parameters at V = 32.
pub const CHECK_DIMS: MlpDims = MlpDims {
    embed: 4,
    window: 3,
    hidden: 4,
};
pub const CHECK_VOCAB: usize = 32;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seeds: u64,
    pub coords: usize,
    pub h: f64,
    pub fd_tol: f64,
    pub oracle_tol: f64,
    pub fuzz: usize,
    /// Leave the ACPO coefficient attached (mutation run).
    pub no_detach: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            coords: 200,
            h: 1e-4,
            fd_tol: 1e-4,
            oracle_tol: 1e-10,
            fuzz: 1000,
            no_detach: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    /// Largest error seen (relative, or absolute count of violations).
    pub max_error: f64,
    pub tol: f64,
    pub passed: bool,
    /// Seed or case that produced `max_error`, or the first failure.
    pub detail: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{:<28} max err {:<12.3e} tol {:<9.1e} {}  {}",
            self.name,
            self.max_error,
            self.tol,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

/// Perturbed policy, its frozen starting point and a small batch.
pub struct ToyProblem {
    pub model: PolicyModel,
    pub reference: PolicyModel,
    pub pairs: Vec<PreferencePair>,
    pub refs: Vec<RefLogProbs>,
}

impl ToyProblem {
    pub fn new(seed: u64, pairs: usize, spread: f64) -> Result<Self> {
        let vocab = Vocab::new(CHECK_VOCAB)?;
        let init = PolicyModel::init(PolicyKind::Mlp(CHECK_DIMS), vocab, seed);
        let reference = init.clone_as_reference();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed);
        let params: Vec<f64> = init.params().iter().map(|p| p + rng.gen_range(-spread..spread)).collect();
        let model = init.with_params(&params)?;
        let world = WorldSpec {
            vocab: CHECK_VOCAB,
            prompt_len: 3,
            resp_len: 6,
            // shared positions cancel exactly in pairwise losses, leaving
            // zero-gradient coordinates where differences see only round-off
            overlap: 0.0,
            seed,
            ..WorldSpec::default()
        };
        let data = gen_dataset(&world, pairs)?;
        let refs = reference_log_probs(&reference, &data.pairs)?;
        Ok(Self {
            model,
            reference,
            pairs: data.pairs,
            refs,
        })
    }

    pub fn batch(&self) -> Vec<&PreferencePair> {
        self.pairs.iter().collect()
    }
}

fn sample_coords(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec()
}

/// Max relative error between reverse-mode and central differences for one
/// objective over `opts.seeds` toy problems. Detached terms are frozen at the
/// base point.
pub fn gradcheck_objective(name: &str, cfg: &ObjectiveConfig, opts: &VerifyOptions) -> Result<CheckOutcome> {
    let registry = ObjectiveRegistry::with_builtins();
    let mut worst = (0.0f64, 0u64);
    for seed in 0..opts.seeds {
        let toy = ToyProblem::new(seed, 6, 0.5)?;
        let batch = toy.batch();
        let mut objective = registry.build(name, cfg)?;
        // move the beta-DPO running average off the current batch mean
        let warm = ToyProblem::new(seed + 10_000, 6, 0.5)?;
        let (_, warm_breakdown) = evaluate(objective.as_ref(), &warm.model, &warm.batch(), &warm.refs, cfg, None, false)?;
        objective.observe(&warm_breakdown);

        let (base, _) = evaluate(objective.as_ref(), &toy.model, &batch, &toy.refs, cfg, None, true)?;
        let analytic = base.grad.expect("gradient requested");
        let coords = sample_coords(analytic.len(), opts.coords, seed);
        let report = finite_diff_check(
            |p| {
                let m = toy.model.with_params(p)?;
                let (e, _) = evaluate(objective.as_ref(), &m, &batch, &toy.refs, cfg, Some(&base.frozen), false)?;
                Ok(e.loss)
            },
            toy.model.params(),
            &analytic,
            &coords,
            opts.h,
            opts.fd_tol,
        )?;
        if report.max_rel_error >= worst.0 {
            worst = (report.max_rel_error, seed);
        }
    }
    Ok(CheckOutcome {
        name: format!("gradcheck {name}"),
        max_error: worst.0,
        tol: opts.fd_tol,
        passed: worst.0 < opts.fd_tol,
        detail: format!("worst seed {}", worst.1),
    })
}

/// Configuration for the closed-form gradient comparison: a small target and
/// unit beta so that many coefficients land strictly inside the clamp window,
/// where a missing stop-gradient changes the derivative.
pub fn oracle_config(no_detach: bool) -> ObjectiveConfig {
    ObjectiveConfig {
        beta: 1.0,
        delta: 1e-3,
        detach_alpha: !no_detach,
        ..ObjectiveConfig::default()
    }
}

/// Autodiff gradient of the ACPO loss against the two-pass closed form.
pub fn acpo_oracle(opts: &VerifyOptions) -> Result<CheckOutcome> {
    let cfg = oracle_config(opts.no_detach);
    let registry = ObjectiveRegistry::with_builtins();
    let objective = registry.build("acpo", &cfg)?;
    let mut worst = (0.0f64, 0u64);
    let mut interior = 0usize;
    for seed in 0..opts.seeds {
        let toy = ToyProblem::new(seed, 8, 0.5)?;
        let batch = toy.batch();
        let (auto, _) = evaluate(objective.as_ref(), &toy.model, &batch, &toy.refs, &cfg, None, true)?;
        let auto = auto.grad.expect("gradient requested");
        let oracle = acpo_analytic_gradient(&toy.model, &batch, &toy.refs, &cfg)?;
        interior += oracle.alphas.iter().filter(|a| !a.clamped_lo && !a.clamped_hi).count();
        let err = auto
            .iter()
            .zip(&oracle.grad)
            .map(|(a, o)| relative_error(*a, *o))
            .fold(0.0, f64::max);
        if err >= worst.0 {
            worst = (err, seed);
        }
    }
    Ok(CheckOutcome {
        name: if opts.no_detach {
            "acpo oracle (no detach)".into()
        } else {
            "acpo oracle".into()
        },
        max_error: worst.0,
        tol: opts.oracle_tol,
        passed: worst.0 < opts.oracle_tol && interior > 0,
        detail: format!("worst seed {}, {interior} unclamped coefficients", worst.1),
    })
}

/// Worked boundary cases plus fuzzed inputs under both clamp presets.
pub fn alpha_table(opts: &VerifyOptions) -> CheckOutcome {
    let f = AlphaBounds::FORMAL;
    let mut failures = Vec::new();
    let cases: [(f64, f64, f64, f64, f64); 4] = [
        (1.0, -2.0, 2.0, 0.5, 0.5),
        (3.0, -2.0, 2.0, -0.5, 0.0),
        (-1.0, -1.0, 2.0, 3.0, 1.0),
        (0.0, 1e-9, 2.0, -2e5, 0.0),
    ];
    for (i, &(rw, rl, tau, raw, hat)) in cases.iter().enumerate() {
        let a = acpo_alpha(rw, rl, tau, f, 1e-5);
        // 2 / 1e-5 is not exact in binary, so the raw value gets a relative check
        if (a.alpha_raw - raw).abs() > 1e-12 * raw.abs() || a.alpha_hat != hat {
            failures.push(format!("case {i}: raw {} hat {}", a.alpha_raw, a.alpha_hat));
        }
    }
    if !acpo_alpha(0.0, 1e-9, 2.0, f, 1e-5).denom_floored {
        failures.push("case 3 not floored".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xa1fa);
    for bounds in [AlphaBounds::FORMAL, AlphaBounds::EMPIRICAL] {
        for k in 0..opts.fuzz {
            let scale = 10f64.powi(rng.gen_range(-8..4));
            let rw = rng.gen_range(-1.0..1.0) * scale;
            let rl = match k % 4 {
                0 => 0.0,
                1 => rng.gen_range(-1e-6..1e-6),
                _ => rng.gen_range(-1.0..1.0) * 10f64.powi(rng.gen_range(-8..4)),
            };
            let tau = rng.gen_range(0.0..50.0);
            let a = acpo_alpha(rw, rl, tau, bounds, 1e-5);
            if !(a.alpha_raw.is_finite() && a.alpha_hat.is_finite() && bounds.lo <= a.alpha_hat && a.alpha_hat <= bounds.hi) {
                failures.push(format!("fuzz ({rw}, {rl}, {tau}) -> {}", a.alpha_hat));
            }
        }
    }
    CheckOutcome {
        name: "alpha boundary table".into(),
        max_error: failures.len() as f64,
        tol: 1.0,
        passed: failures.is_empty(),
        detail: failures
            .first()
            .cloned()
            .unwrap_or_else(|| format!("4 cases + {} fuzzed", 2 * opts.fuzz)),
    }
}

fn bitwise_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Loss and gradient of `name` under `cfg` must equal DPO's bit for bit.
pub fn degeneration(name: &str, cfg: &ObjectiveConfig, label: &str, opts: &VerifyOptions) -> Result<CheckOutcome> {
    let registry = ObjectiveRegistry::with_builtins();
    let dpo = registry.build("dpo", cfg)?;
    let other = registry.build(name, cfg)?;
    let mut mismatches = 0usize;
    let mut first = None;
    for seed in 0..opts.seeds {
        let toy = ToyProblem::new(seed, 8, 0.5)?;
        let batch = toy.batch();
        let (a, _) = evaluate(dpo.as_ref(), &toy.model, &batch, &toy.refs, cfg, None, true)?;
        let (b, _) = evaluate(other.as_ref(), &toy.model, &batch, &toy.refs, cfg, None, true)?;
        let same = a.loss.to_bits() == b.loss.to_bits() && bitwise_equal(a.grad.as_deref().unwrap(), b.grad.as_deref().unwrap());
        if !same {
            mismatches += 1;
            first.get_or_insert(seed);
        }
    }
    Ok(CheckOutcome {
        name: label.into(),
        max_error: mismatches as f64,
        tol: 1.0,
        passed: mismatches == 0,
        detail: match first {
            Some(s) => format!("first mismatch at seed {s}"),
            None => format!("{} batches bitwise equal", opts.seeds),
        },
    })
}

pub fn alpha_one_config() -> ObjectiveConfig {
    ObjectiveConfig {
        alpha: AlphaBounds { lo: 1.0, hi: 1.0 },
        ..ObjectiveConfig::default()
    }
}

pub fn shift_one_config() -> ObjectiveConfig {
    ObjectiveConfig {
        lambda: 1.0,
        shift_mode: ShiftMode::Scale,
        ..ObjectiveConfig::default()
    }
}

/// Every check, in report order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let cfg = ObjectiveConfig::default();
    for name in ObjectiveRegistry::with_builtins().names() {
        out.push(gradcheck_objective(name, &cfg, opts)?);
    }
    out.push(acpo_oracle(opts)?);
    out.push(alpha_table(opts));
    out.push(degeneration("acpo", &alpha_one_config(), "acpo alpha=1 == dpo", opts)?);
    out.push(degeneration("dpo-shift", &shift_one_config(), "dpo-shift lambda=1 == dpo", opts)?);
    Ok(out)
}
