//! Seeded synthetic preference pairs with a controlled shared prefix.
//!
//! Chosen responses follow a planted next-token chain: every token maps to a
//! preferred successor through a seeded permutation, taken with probability
//! `1 - PLANTED_NOISE` (otherwise a uniform token). Rejected responses copy
//! the first `floor(overlap * len)` chosen tokens and corrupt the rest.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::policy::Token;

/// Probability that a chosen token ignores the planted successor.
pub const PLANTED_NOISE: f64 = 0.1;

const MAX_PAIR_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Corruption {
    /// Every token after the shared prefix is replaced.
    #[default]
    SuffixReplace,
    /// Every other token after the shared prefix is replaced.
    Interleave,
}

impl Corruption {
    pub fn name(&self) -> &'static str {
        match self {
            Corruption::SuffixReplace => "suffix-replace",
            Corruption::Interleave => "interleave",
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "suffix-replace" => Ok(Corruption::SuffixReplace),
            "interleave" => Ok(Corruption::Interleave),
            other => Err(Error::Config(format!(
                "unknown corruption mode `{other}` (expected suffix-replace or interleave)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldSpec {
    pub vocab: usize,
    pub prompt_len: usize,
    pub resp_len: usize,
    pub overlap: f64,
    pub corruption: Corruption,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            vocab: 32,
            prompt_len: 4,
            resp_len: 10,
            overlap: 0.8,
            corruption: Corruption::SuffixReplace,
            seed: 1,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(Error::Config(format!("vocab must be at least 4, got {}", self.vocab)));
        }
        if self.prompt_len < 1 {
            return Err(Error::Config("prompt length must be at least 1".into()));
        }
        if self.resp_len < 1 {
            return Err(Error::Config("response length must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "overlap must leave at least one differing token (overlap must lie in [0, 1), got {})",
                self.overlap
            )));
        }
        let shared = (self.overlap * self.resp_len as f64 - 1e-9).ceil().max(0.0) as usize;
        if shared + 1 > self.resp_len {
            return Err(Error::Config(format!(
                "overlap must leave at least one differing token (overlap {} of {} tokens)",
                self.overlap, self.resp_len
            )));
        }
        Ok(())
    }

    /// Number of leading response tokens shared by chosen and rejected.
    pub fn shared_prefix(&self) -> usize {
        (self.overlap * self.resp_len as f64 + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PreferencePair {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

impl PreferencePair {
    pub fn shared_prefix_len(&self) -> usize {
        self.chosen
            .iter()
            .zip(&self.rejected)
            .take_while(|(a, b)| a == b)
            .count()
    }
}

/// The ground-truth next-token chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Planted {
    successor: Vec<Token>,
}

impl Planted {
    pub fn from_rng<R: Rng>(vocab: usize, rng: &mut R) -> Self {
        let mut successor: Vec<Token> = (0..vocab as Token).collect();
        successor.shuffle(rng);
        Self { successor }
    }

    pub fn successor(&self, token: Token) -> Token {
        self.successor[token as usize]
    }

    /// Planted log-likelihood of `y` after `x`.
    pub fn log_likelihood(&self, x: &[Token], y: &[Token]) -> f64 {
        let v = self.successor.len() as f64;
        let mut prev = *x.last().expect("prompt is non-empty");
        let mut total = 0.0;
        for &t in y {
            let hit = if self.successor(prev) == t { 1.0 - PLANTED_NOISE } else { 0.0 };
            total += (hit + PLANTED_NOISE / v).ln();
            prev = t;
        }
        total
    }
}

fn corrupt_token<R: Rng>(rng: &mut R, vocab: usize, avoid: [Token; 2]) -> Token {
    loop {
        let t = rng.gen_range(0..vocab as Token);
        if !avoid.contains(&t) {
            return t;
        }
    }
}

/// Draws one pair. Retries until the chosen response has strictly higher
/// planted likelihood than the rejected one.
pub fn sample_pair<R: Rng>(world: &WorldSpec, planted: &Planted, rng: &mut R) -> Result<PreferencePair> {
    world.validate()?;
    let v = world.vocab;
    let shared = world.shared_prefix();
    for _ in 0..MAX_PAIR_ATTEMPTS {
        let prompt: Vec<Token> = (0..world.prompt_len).map(|_| rng.gen_range(0..v as Token)).collect();
        let mut prev = *prompt.last().expect("prompt_len >= 1");
        let mut chosen = Vec::with_capacity(world.resp_len);
        for _ in 0..world.resp_len {
            let t = if rng.gen_bool(1.0 - PLANTED_NOISE) {
                planted.successor(prev)
            } else {
                rng.gen_range(0..v as Token)
            };
            chosen.push(t);
            prev = t;
        }
        let mut rejected = chosen[..shared].to_vec();
        let mut prev = rejected.last().copied().unwrap_or(*prompt.last().unwrap());
        for (i, &w) in chosen.iter().enumerate().skip(shared) {
            let replace = match world.corruption {
                Corruption::SuffixReplace => true,
                Corruption::Interleave => (i - shared).is_multiple_of(2),
            };
            let t = if replace {
                corrupt_token(rng, v, [w, planted.successor(prev)])
            } else {
                w
            };
            rejected.push(t);
            prev = t;
        }
        if planted.log_likelihood(&prompt, &chosen) > planted.log_likelihood(&prompt, &rejected) {
            return Ok(PreferencePair {
                prompt,
                chosen,
                rejected,
            });
        }
    }
    Err(Error::Config(format!(
        "could not draw a correctly ordered pair in {MAX_PAIR_ATTEMPTS} attempts"
    )))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Option<WorldSpec>,
    pub pairs: Vec<PreferencePair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Largest token id + 1 over all pairs.
    pub fn token_span(&self) -> usize {
        self.pairs
            .iter()
            .flat_map(|p| p.prompt.iter().chain(&p.chosen).chain(&p.rejected))
            .map(|&t| t as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# acpo-dataset v1")?;
        if let Some(world) = &self.manifest {
            writeln!(w, "# vocab={}", world.vocab)?;
            writeln!(w, "# prompt_len={}", world.prompt_len)?;
            writeln!(w, "# resp_len={}", world.resp_len)?;
            writeln!(w, "# overlap={}", world.overlap)?;
            writeln!(w, "# corruption={}", world.corruption)?;
            writeln!(w, "# seed={}", world.seed)?;
        }
        writeln!(w, "# pairs={}", self.pairs.len())?;
        let join = |ts: &[Token]| ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        for p in &self.pairs {
            writeln!(w, "{} | {} | {}", join(&p.prompt), join(&p.chosen), join(&p.rejected))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut keys: Vec<(String, String)> = Vec::new();
        let mut pairs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            if let Some(comment) = text.strip_prefix('#') {
                if let Some((k, v)) = comment.trim().split_once('=') {
                    keys.push((k.trim().to_string(), v.trim().to_string()));
                }
                continue;
            }
            let fields: Vec<&str> = text.split('|').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected `x | y_w | y_l`, got {} fields", fields.len()),
                });
            }
            let parse = |s: &str| -> Result<Vec<Token>> {
                s.split_whitespace()
                    .map(|t| {
                        t.parse::<Token>().map_err(|e| Error::Parse {
                            line: lineno,
                            msg: format!("bad token `{t}`: {e}"),
                        })
                    })
                    .collect()
            };
            pairs.push(PreferencePair {
                prompt: parse(fields[0])?,
                chosen: parse(fields[1])?,
                rejected: parse(fields[2])?,
            });
        }
        let manifest = parse_manifest(&keys)?;
        if let Some(declared) = keys.iter().find(|(k, _)| k == "pairs") {
            if declared.1.parse::<usize>().ok() != Some(pairs.len()) {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("manifest declares {} pairs, file has {}", declared.1, pairs.len()),
                });
            }
        }
        Ok(Self { manifest, pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }

    /// Regenerates from the embedded manifest.
    pub fn regenerate(&self) -> Result<Self> {
        let world = self
            .manifest
            .ok_or_else(|| Error::Config("dataset has no generation manifest".into()))?;
        gen_dataset(&world, self.pairs.len())
    }
}

fn parse_manifest(keys: &[(String, String)]) -> Result<Option<WorldSpec>> {
    let get = |name: &str| keys.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str());
    let bad = |name: &str, v: &str| Error::Parse {
        line: 0,
        msg: format!("bad manifest value {name}={v}"),
    };
    let (Some(vocab), Some(prompt_len), Some(resp_len), Some(overlap), Some(corruption), Some(seed)) = (
        get("vocab"),
        get("prompt_len"),
        get("resp_len"),
        get("overlap"),
        get("corruption"),
        get("seed"),
    ) else {
        return Ok(None);
    };
    Ok(Some(WorldSpec {
        vocab: vocab.parse().map_err(|_| bad("vocab", vocab))?,
        prompt_len: prompt_len.parse().map_err(|_| bad("prompt_len", prompt_len))?,
        resp_len: resp_len.parse().map_err(|_| bad("resp_len", resp_len))?,
        overlap: overlap.parse().map_err(|_| bad("overlap", overlap))?,
        corruption: corruption.parse()?,
        seed: seed.parse().map_err(|_| bad("seed", seed))?,
    }))
}

/// `m` pairs drawn sequentially from one seeded stream.
pub fn gen_dataset(world: &WorldSpec, m: usize) -> Result<Dataset> {
    world.validate()?;
    if m == 0 {
        return Err(Error::Config("pair count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    let planted = Planted::from_rng(world.vocab, &mut rng);
    let pairs = (0..m)
        .map(|_| sample_pair(world, &planted, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: Some(*world),
        pairs,
    })
}

/// The planted chain of a world, reconstructed from its seed.
pub fn planted_for(world: &WorldSpec) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(world.seed);
    Planted::from_rng(world.vocab, &mut rng)
}
