//! Flat `key=value` settings shared by config files, flags and manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use acpo_core::policy::{MlpDims, PolicyKind};
use acpo_core::rewards::{AlphaBounds, ObjectiveConfig, ShiftMode, TauMode};
use acpo_core::trainer::{OptimizerKind, TrainConfig};

use crate::Failure;

/// Keys accepted in a config file, in manifest order.
pub const TRAIN_KEYS: &[&str] = &[
    "data",
    "objective",
    "objectives",
    "beta",
    "delta",
    "epsilon",
    "alpha-lo",
    "alpha-hi",
    "tau-mode",
    "lambda",
    "shift-mode",
    "gamma",
    "simpo-beta",
    "beta-dpo-c",
    "beta-dpo-decay",
    "lr",
    "steps",
    "batch",
    "seed",
    "optimizer",
    "model",
    "embed",
    "window",
    "hidden",
    "out-dir",
    "out",
];

/// Written by the tool into manifests; ignored when a manifest is read back.
pub const MANIFEST_ONLY_KEYS: &[&str] = &["tool", "command", "data-sha256", "telemetry", "checkpoint"];

pub type Settings = BTreeMap<String, String>;

pub fn parse_config(text: &str, origin: &Path) -> Result<Settings, Failure> {
    let mut out = Settings::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Failure::usage(format!("{}:{}: expected key=value, got `{line}`", origin.display(), i + 1))
        })?;
        let key = key.trim();
        if MANIFEST_ONLY_KEYS.contains(&key) {
            continue;
        }
        if !TRAIN_KEYS.contains(&key) {
            return Err(Failure::usage(format!("{}:{}: unknown key `{key}`", origin.display(), i + 1)));
        }
        out.insert(key.to_string(), value.trim().to_string());
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<Settings, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, path)
}

fn get<T: FromStr>(s: &Settings, key: &str, default: T) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    match s.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|e| Failure::usage(format!("invalid value `{v}` for {key}: {e}"))),
    }
}

/// Fully resolved training settings.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub data: PathBuf,
    pub train: TrainConfig,
    pub kind: PolicyKind,
}

pub fn resolve(s: &Settings) -> Result<Resolved, Failure> {
    let data = s
        .get("data")
        .map(PathBuf::from)
        .ok_or_else(|| Failure::usage("missing --data (or data= in the config file)"))?;
    let d = ObjectiveConfig::default();
    let tau_mode = match s.get("tau-mode") {
        None => d.tau_mode,
        Some(v) => TauMode::from_str(v).map_err(Failure::from)?,
    };
    let shift_mode = match s.get("shift-mode") {
        None => d.shift_mode,
        Some(v) => ShiftMode::from_str(v).map_err(Failure::from)?,
    };
    let objective_cfg = ObjectiveConfig {
        beta: get(s, "beta", d.beta)?,
        delta: get(s, "delta", d.delta)?,
        epsilon: get(s, "epsilon", d.epsilon)?,
        alpha: AlphaBounds {
            lo: get(s, "alpha-lo", d.alpha.lo)?,
            hi: get(s, "alpha-hi", d.alpha.hi)?,
        },
        tau_mode,
        simpo_beta: get(s, "simpo-beta", d.simpo_beta)?,
        gamma: get(s, "gamma", d.gamma)?,
        lambda: get(s, "lambda", d.lambda)?,
        shift_mode,
        beta_dpo_c: get(s, "beta-dpo-c", d.beta_dpo_c)?,
        beta_dpo_decay: get(s, "beta-dpo-decay", d.beta_dpo_decay)?,
        detach_alpha: true,
    };
    let t = TrainConfig::default();
    let optimizer = match s.get("optimizer") {
        None => t.optimizer,
        Some(v) => OptimizerKind::from_str(v).map_err(Failure::from)?,
    };
    let train = TrainConfig {
        objective: s.get("objective").cloned().unwrap_or(t.objective),
        objective_cfg,
        lr: get(s, "lr", t.lr)?,
        steps: get(s, "steps", t.steps)?,
        batch_size: get(s, "batch", t.batch_size)?,
        seed: get(s, "seed", t.seed)?,
        optimizer,
    };
    let dims = MlpDims::default();
    let kind = match s.get("model").map(String::as_str).unwrap_or("mlp") {
        "mlp" => PolicyKind::Mlp(MlpDims {
            embed: get(s, "embed", dims.embed)?,
            window: get(s, "window", dims.window)?,
            hidden: get(s, "hidden", dims.hidden)?,
        }),
        "bigram" => PolicyKind::Bigram,
        other => return Err(Failure::usage(format!("unknown model `{other}` (expected mlp or bigram)"))),
    };
    if let PolicyKind::Mlp(m) = kind {
        if m.embed == 0 || m.window == 0 || m.hidden == 0 {
            return Err(Failure::usage("embed, window and hidden must be at least 1"));
        }
    }
    train.validate().map_err(Failure::from)?;
    Ok(Resolved { data, train, kind })
}

/// Resolved settings as manifest lines, readable back through `--config`.
pub fn settings_lines(r: &Resolved) -> Vec<(String, String)> {
    let c = &r.train.objective_cfg;
    let mut v: Vec<(&str, String)> = vec![
        ("data", r.data.display().to_string()),
        ("objective", r.train.objective.clone()),
        ("beta", c.beta.to_string()),
        ("delta", c.delta.to_string()),
        ("epsilon", c.epsilon.to_string()),
        ("alpha-lo", c.alpha.lo.to_string()),
        ("alpha-hi", c.alpha.hi.to_string()),
        ("tau-mode", c.tau_mode.to_string()),
        ("lambda", c.lambda.to_string()),
        ("shift-mode", c.shift_mode.to_string()),
        ("gamma", c.gamma.to_string()),
        ("simpo-beta", c.simpo_beta.to_string()),
        ("beta-dpo-c", c.beta_dpo_c.to_string()),
        ("beta-dpo-decay", c.beta_dpo_decay.to_string()),
        ("lr", r.train.lr.to_string()),
        ("steps", r.train.steps.to_string()),
        ("batch", r.train.batch_size.to_string()),
        ("seed", r.train.seed.to_string()),
        ("optimizer", r.train.optimizer.to_string()),
        ("model", r.kind.name().to_string()),
    ];
    if let PolicyKind::Mlp(m) = r.kind {
        v.push(("embed", m.embed.to_string()));
        v.push(("window", m.window.to_string()));
        v.push(("hidden", m.hidden.to_string()));
    }
    v.into_iter().map(|(k, val)| (k.to_string(), val)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_unknown_keys() {
        let s = parse_config("# run\nobjective = dpo\n\nlr=0.01\ntool=acpo 0.1.0\n", Path::new("c")).unwrap();
        assert_eq!(s.get("objective").unwrap(), "dpo");
        assert_eq!(s.get("lr").unwrap(), "0.01");
        assert!(!s.contains_key("tool"));
        assert_eq!(parse_config("colour=red", Path::new("c")).unwrap_err().code, 2);
        assert_eq!(parse_config("no equals sign", Path::new("c")).unwrap_err().code, 2);
    }

    #[test]
    fn manifest_lines_resolve_to_the_same_settings() {
        let mut s = Settings::new();
        s.insert("data".into(), "d.txt".into());
        s.insert("tau-mode".into(), "static:0.5".into());
        s.insert("lr".into(), "0.003".into());
        s.insert("model".into(), "bigram".into());
        let r = resolve(&s).unwrap();
        let back: Settings = settings_lines(&r).into_iter().collect();
        let r2 = resolve(&back).unwrap();
        assert_eq!(r.train, r2.train);
        assert_eq!(r.kind, r2.kind);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let mut s = Settings::new();
        s.insert("data".into(), "d.txt".into());
        s.insert("batch".into(), "0".into());
        assert_eq!(resolve(&s).unwrap_err().code, 2);
        s.insert("batch".into(), "many".into());
        assert_eq!(resolve(&s).unwrap_err().code, 2);
    }
}
