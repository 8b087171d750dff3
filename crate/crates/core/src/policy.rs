//! Tiny autoregressive token policies.
//!
//! Two architectures are provided: a bigram logit table (context is exactly
//! the previous token) and a windowed MLP over token embeddings. Both score
//! a response `y` given a prompt `x` as the sum of per-token conditional
//! log-probabilities; prompt tokens condition but are never scored.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, Shape};
use crate::graph::{Array, Graph, NodeId};

pub type Token = u32;

/// Half-width of the uniform parameter initialisation.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocab(usize);

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("vocabulary size must be at least 2, got {size}")));
        }
        Ok(Self(size))
    }

    pub fn size(self) -> usize {
        self.0
    }

    /// Reserved context-padding id (one past the last real token).
    pub fn pad(self) -> Token {
        self.0 as Token
    }

    pub fn check(self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.0) {
            Some(t) => Err(Error::Vocab(format!("token {t} outside vocabulary of size {}", self.0))),
            None => Ok(()),
        }
    }
}

/// Embedding width, context window and hidden width of the MLP policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MlpDims {
    pub embed: usize,
    pub window: usize,
    pub hidden: usize,
}

impl Default for MlpDims {
    fn default() -> Self {
        Self {
            embed: 16,
            window: 8,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Bigram,
    Mlp(MlpDims),
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Bigram => "bigram",
            PolicyKind::Mlp(_) => "mlp",
        }
    }

    /// Number of trainable parameters for a vocabulary of `v` tokens. The
    /// MLP pad embedding is a fixed zero row and is not counted.
    pub fn param_count(&self, v: usize) -> usize {
        match *self {
            PolicyKind::Bigram => v * v,
            PolicyKind::Mlp(d) => {
                v * d.embed + d.window * d.embed * d.hidden + d.hidden + d.hidden * v + v
            }
        }
    }

    // (rows, cols) of each parameter tensor, in flat layout order.
    fn tensor_shapes(&self, v: usize) -> Vec<Shape> {
        match *self {
            PolicyKind::Bigram => vec![Shape::new(v, v)],
            PolicyKind::Mlp(d) => vec![
                Shape::new(v, d.embed),
                Shape::new(d.window * d.embed, d.hidden),
                Shape::new(1, d.hidden),
                Shape::new(d.hidden, v),
                Shape::new(1, v),
            ],
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An autoregressive policy with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    kind: PolicyKind,
    vocab: Vocab,
    params: Vec<f64>,
    frozen: bool,
}

/// Parameter tensors of one model bound as leaves of a graph.
#[derive(Debug, Clone)]
pub struct BoundPolicy {
    tensors: Vec<NodeId>,
}

impl PolicyModel {
    /// Parameters i.i.d. uniform in `[-0.1, 0.1)`, determined by `seed`.
    pub fn init(kind: PolicyKind, vocab: Vocab, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..kind.param_count(vocab.size()))
            .map(|_| rng.gen_range(-INIT_SCALE..INIT_SCALE))
            .collect();
        Self {
            kind,
            vocab,
            params,
            frozen: false,
        }
    }

    pub fn from_params(kind: PolicyKind, vocab: Vocab, params: Vec<f64>) -> Result<Self> {
        let expected = kind.param_count(vocab.size());
        if params.len() != expected {
            return Err(Error::Config(format!(
                "{kind} policy over {} tokens needs {expected} parameters, got {}",
                vocab.size(),
                params.len()
            )));
        }
        Ok(Self {
            kind,
            vocab,
            params,
            frozen: false,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::Config("cannot update a frozen reference policy".into()));
        }
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                op: "set_params",
                left: Shape::new(1, self.params.len()),
                right: Shape::new(1, params.len()),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn params_mut(&mut self) -> Result<&mut [f64]> {
        if self.frozen {
            return Err(Error::Config("cannot update a frozen reference policy".into()));
        }
        Ok(&mut self.params)
    }

    /// Same parameters with a different architecture-compatible vector,
    /// unfrozen. Used for perturbation probes.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        Self::from_params(self.kind, self.vocab, params.to_vec())
    }

    /// Frozen deep copy.
    pub fn clone_as_reference(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    /// Adds each parameter tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundPolicy {
        let v = self.vocab.size();
        let mut offset = 0;
        let mut tensors = Vec::new();
        for (i, shape) in self.kind.tensor_shapes(v).into_iter().enumerate() {
            let mut data = self.params[offset..offset + shape.len()].to_vec();
            offset += shape.len();
            let mut rows = shape.rows;
            if let (PolicyKind::Mlp(d), 0) = (self.kind, i) {
                // zero embedding row for the pad token
                data.extend(std::iter::repeat_n(0.0, d.embed));
                rows += 1;
            }
            let array = Array::new(rows, shape.cols, data).expect("layout arithmetic");
            tensors.push(g.leaf(array));
        }
        BoundPolicy { tensors }
    }

    /// Flattens the gradients of the bound parameter leaves into the model's
    /// parameter layout.
    pub fn gradient(&self, g: &Graph, bound: &BoundPolicy) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.params.len());
        let shapes = self.kind.tensor_shapes(self.vocab.size());
        for (shape, &node) in shapes.iter().zip(&bound.tensors) {
            let grad = g.grad(node);
            // pad embedding row is dropped here
            out.extend_from_slice(&grad.data()[..shape.len()]);
        }
        out
    }

    fn check_pair(&self, x: &[Token], y: &[Token]) -> Result<()> {
        if y.is_empty() {
            return Err(Error::EmptySequence("response"));
        }
        if matches!(self.kind, PolicyKind::Bigram) && x.is_empty() {
            return Err(Error::EmptySequence("prompt (bigram context)"));
        }
        self.vocab.check(x)?;
        self.vocab.check(y)
    }

    // Row-wise next-token logits for each context. A context is the full
    // token history preceding the predicted position.
    fn logits(&self, g: &mut Graph, bound: &BoundPolicy, contexts: &[&[Token]]) -> Result<NodeId> {
        let v = self.vocab.size();
        let n = contexts.len();
        match self.kind {
            PolicyKind::Bigram => {
                let table = bound.tensors[0];
                let mut idx = Vec::with_capacity(n * v);
                for ctx in contexts {
                    let prev = *ctx.last().ok_or(Error::EmptySequence("bigram context"))? as usize;
                    idx.extend(prev * v..(prev + 1) * v);
                }
                g.gather(table, idx, Shape::new(n, v))
            }
            PolicyKind::Mlp(d) => {
                let [emb, w1, b1, w2, b2] = bound.tensors[..] else {
                    unreachable!("mlp binds five tensors")
                };
                let pad = self.vocab.pad() as usize;
                let mut idx = Vec::with_capacity(n * d.window * d.embed);
                for ctx in contexts {
                    let tail = &ctx[ctx.len().saturating_sub(d.window)..];
                    let padding = d.window - tail.len();
                    let slots = std::iter::repeat_n(pad, padding)
                        .chain(tail.iter().map(|&t| t as usize));
                    for tok in slots {
                        idx.extend(tok * d.embed..(tok + 1) * d.embed);
                    }
                }
                let ctx = g.gather(emb, idx, Shape::new(n, d.window * d.embed))?;
                let pre = g.matmul(ctx, w1)?;
                let pre = g.add(pre, b1)?;
                let hidden = g.sigmoid(pre);
                let out = g.matmul(hidden, w2)?;
                g.add(out, b2)
            }
        }
    }

    /// Log-probabilities of each `(x, y)` response, as an `n x 1` node.
    pub fn seq_log_probs(
        &self,
        g: &mut Graph,
        bound: &BoundPolicy,
        pairs: &[(&[Token], &[Token])],
    ) -> Result<NodeId> {
        let v = self.vocab.size();
        let mut histories: Vec<Vec<Token>> = Vec::with_capacity(pairs.len());
        let mut targets = Vec::new();
        let mut owner = Vec::new();
        for (i, (x, y)) in pairs.iter().enumerate() {
            self.check_pair(x, y)?;
            let mut full = x.to_vec();
            full.extend_from_slice(y);
            for (t, &tok) in y.iter().enumerate() {
                targets.push(tok as usize);
                owner.push(i);
                histories.push(full[..x.len() + t].to_vec());
            }
        }
        let contexts: Vec<&[Token]> = histories.iter().map(|h| h.as_slice()).collect();
        let n = contexts.len();
        let logits = self.logits(g, bound, &contexts)?;
        let logp = g.log_softmax(logits);
        let idx = targets.iter().enumerate().map(|(row, &t)| row * v + t).collect();
        let picked = g.gather(logp, idx, Shape::new(n, 1))?;
        let mut segments = vec![0.0; pairs.len() * n];
        for (row, &i) in owner.iter().enumerate() {
            segments[i * n + row] = 1.0;
        }
        let segments = g.leaf(Array::new(pairs.len(), n, segments)?);
        g.matmul(segments, picked)
    }

    /// `log pi(y | x)` as a scalar node of `g`.
    pub fn seq_log_prob(&self, g: &mut Graph, bound: &BoundPolicy, x: &[Token], y: &[Token]) -> Result<NodeId> {
        self.seq_log_probs(g, bound, &[(x, y)])
    }

    /// Log-probabilities evaluated without recording a graph.
    pub fn seq_log_prob_values(&self, pairs: &[(&[Token], &[Token])]) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad();
        let bound = self.bind(&mut g);
        let node = self.seq_log_probs(&mut g, &bound, pairs)?;
        Ok(g.value(node).data().to_vec())
    }

    pub fn seq_log_prob_value(&self, x: &[Token], y: &[Token]) -> Result<f64> {
        Ok(self.seq_log_prob_values(&[(x, y)])?[0])
    }

    /// Full next-token log-distribution after `history` (prompt plus any
    /// response prefix).
    pub fn next_token_log_probs(&self, history: &[Token]) -> Result<Vec<f64>> {
        self.vocab.check(history)?;
        let mut g = Graph::no_grad();
        let bound = self.bind(&mut g);
        let logits = self.logits(&mut g, &bound, &[history])?;
        let logp = g.log_softmax(logits);
        Ok(g.value(logp).data().to_vec())
    }

    /// Writes the text checkpoint format (see README).
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "acpo-policy v1")?;
        writeln!(w, "kind={}", self.kind.name())?;
        writeln!(w, "vocab={}", self.vocab.size())?;
        if let PolicyKind::Mlp(d) = self.kind {
            writeln!(w, "embed={}", d.embed)?;
            writeln!(w, "window={}", d.window)?;
            writeln!(w, "hidden={}", d.hidden)?;
        }
        writeln!(w, "params={}", self.params.len())?;
        for p in &self.params {
            writeln!(w, "{p:e}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |expect: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, line)) => Ok((i + 1, line?)),
                None => Err(Error::Parse {
                    line: 0,
                    msg: format!("unexpected end of checkpoint, expected {expect}"),
                }),
            }
        };
        let (line, magic) = next("header")?;
        if magic.trim() != "acpo-policy v1" {
            return Err(Error::Parse {
                line,
                msg: format!("bad checkpoint header `{magic}`"),
            });
        }
        let mut field = |key: &str| -> Result<String> {
            let (line, text) = next(key)?;
            match text.trim().split_once('=') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                _ => Err(Error::Parse {
                    line,
                    msg: format!("expected `{key}=...`, got `{text}`"),
                }),
            }
        };
        let usize_field = |s: String, key: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                line: 0,
                msg: format!("bad {key} value `{s}`"),
            })
        };
        let kind_name = field("kind")?;
        let vocab = Vocab::new(usize_field(field("vocab")?, "vocab")?)?;
        let kind = match kind_name.as_str() {
            "bigram" => PolicyKind::Bigram,
            "mlp" => PolicyKind::Mlp(MlpDims {
                embed: usize_field(field("embed")?, "embed")?,
                window: usize_field(field("window")?, "window")?,
                hidden: usize_field(field("hidden")?, "hidden")?,
            }),
            other => {
                return Err(Error::Parse {
                    line: 2,
                    msg: format!("unknown policy kind `{other}`"),
                })
            }
        };
        let count = usize_field(field("params")?, "params")?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let (line, text) = next("parameter")?;
            params.push(text.trim().parse::<f64>().map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?);
        }
        Self::from_params(kind, vocab, params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(v: usize, seed: u64) -> PolicyModel {
        PolicyModel::init(PolicyKind::Mlp(MlpDims::default()), Vocab::new(v).unwrap(), seed)
    }

    #[test]
    fn vocab_too_small() {
        assert!(Vocab::new(1).is_err());
        assert!(Vocab::new(2).is_ok());
    }

    #[test]
    fn init_is_deterministic() {
        let v = Vocab::new(4).unwrap();
        let a = PolicyModel::init(PolicyKind::Bigram, v, 7);
        let b = PolicyModel::init(PolicyKind::Bigram, v, 7);
        assert_eq!(a, b);
        assert!(a.params().iter().all(|p| p.abs() <= INIT_SCALE));
        assert_ne!(a, PolicyModel::init(PolicyKind::Bigram, v, 8));
    }

    #[test]
    fn mlp_param_count() {
        let d = MlpDims::default();
        let m = mlp(32, 1);
        let (e, w, h) = (d.embed, d.window, d.hidden);
        assert_eq!(m.params().len(), 32 * e + w * e * h + h + h * 32 + 32);
    }

    #[test]
    fn uniform_model_sequence_log_prob() {
        let v = Vocab::new(4).unwrap();
        let m = PolicyModel::from_params(PolicyKind::Bigram, v, vec![0.0; 16]).unwrap();
        let lp = m.seq_log_prob_value(&[1], &[0, 3, 2]).unwrap();
        assert!((lp + 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((lp - (-4.158883083359672)).abs() < 1e-12);
    }

    #[test]
    fn bigram_peaked_row() {
        let v = Vocab::new(4).unwrap();
        let mut params = vec![0.0; 16];
        params[2 * 4] = 8f64.ln();
        let m = PolicyModel::from_params(PolicyKind::Bigram, v, params).unwrap();
        let lp = m.seq_log_prob_value(&[2], &[0]).unwrap();
        // ln(8/11) from a 30-digit evaluation
        assert!((lp - (-0.3184537311185346)).abs() < 1e-12);
    }

    #[test]
    fn distributions_normalise() {
        for seed in 0..5 {
            for m in [mlp(9, seed), PolicyModel::init(PolicyKind::Bigram, Vocab::new(9).unwrap(), seed)] {
                for history in [&[3u32][..], &[1, 2, 3, 4, 5, 6, 7, 8, 0, 1][..]] {
                    let lp = m.next_token_log_probs(history).unwrap();
                    let s: f64 = lp.iter().map(|x| x.exp()).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                    assert!(lp.iter().all(|&x| x <= 0.0));
                }
            }
        }
    }

    #[test]
    fn empty_and_out_of_vocab_sequences() {
        let m = mlp(8, 0);
        assert!(matches!(m.seq_log_prob_value(&[1], &[]), Err(Error::EmptySequence(_))));
        assert!(matches!(m.seq_log_prob_value(&[1], &[8]), Err(Error::Vocab(_))));
        // mlp accepts an empty prompt (all pad context)
        assert!(m.seq_log_prob_value(&[], &[1]).is_ok());
        let b = PolicyModel::init(PolicyKind::Bigram, Vocab::new(8).unwrap(), 0);
        assert!(b.seq_log_prob_value(&[], &[1]).is_err());
    }

    #[test]
    fn batched_values_match_single() {
        let m = mlp(10, 3);
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = vec![(vec![1, 2], vec![3, 4, 5]), (vec![9], vec![0]), (vec![], vec![7, 7])];
        let views: Vec<(&[u32], &[u32])> = pairs.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect();
        let batched = m.seq_log_prob_values(&views).unwrap();
        for (i, (x, y)) in views.iter().enumerate() {
            assert_eq!(batched[i].to_bits(), m.seq_log_prob_value(x, y).unwrap().to_bits());
        }
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let node = m.seq_log_probs(&mut g, &bound, &views).unwrap();
        assert_eq!(g.value(node).data(), batched.as_slice());
    }

    #[test]
    fn reference_is_frozen_and_idempotent() {
        let m = mlp(6, 2);
        let mut r = m.clone_as_reference();
        assert!(r.is_frozen());
        assert!(r.set_params(m.params()).is_err());
        assert!(r.params_mut().is_err());
        assert_eq!(r.clone_as_reference(), r);
    }

    #[test]
    fn pad_row_receives_no_trainable_gradient() {
        let m = mlp(5, 4);
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let lp = m.seq_log_prob(&mut g, &bound, &[1], &[2, 3]).unwrap();
        g.backward(lp).unwrap();
        let grad = m.gradient(&g, &bound);
        assert_eq!(grad.len(), m.params().len());
        assert!(grad.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        for m in [mlp(7, 11), PolicyModel::init(PolicyKind::Bigram, Vocab::new(5).unwrap(), 2)] {
            let mut buf = Vec::new();
            m.write_checkpoint(&mut buf).unwrap();
            let back = PolicyModel::read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back, m);
        }
        assert!(PolicyModel::read_checkpoint("nonsense\n".as_bytes()).is_err());
    }
}
