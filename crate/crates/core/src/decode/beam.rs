use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::tokenizer::{BOS, EOS, PAD};

/// How a hypothesis' log-probability is normalised by its length `n`
/// (generated tokens, EOS included).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LengthNorm {
    /// `logprob / n^λ`.
    Power(Real),
    /// `logprob / ((5 + n) / 6)^λ`.
    Gnmt(Real),
}

impl LengthNorm {
    pub fn apply(self, log_prob: Real, len: usize) -> Real {
        let n = len.max(1) as Real;
        match self {
            LengthNorm::Power(l) => log_prob / n.powf(l),
            LengthNorm::Gnmt(l) => log_prob / ((5.0 + n) / 6.0).powf(l),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS; ends with EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: Real,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens, EOS included.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn score(&self, norm: LengthNorm) -> Real {
        norm.apply(self.log_prob, self.len())
    }

    /// Generated tokens without BOS and EOS.
    pub fn content(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }
}

/// Next-token log-probabilities for a set of equal-length prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    /// One `vocab_size` row per prefix.
    fn log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<Real>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub norm: LengthNorm,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
    /// Tokens never generated.
    pub banned: Vec<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 5,
            norm: LengthNorm::Power(0.7),
            max_len: 200,
            banned: vec![PAD, BOS],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// No hypothesis emitted EOS within `max_len`; `best` is unfinished.
    pub unfinished: bool,
}

fn better(a: &Hypothesis, b: &Hypothesis, norm: LengthNorm) -> bool {
    let (sa, sb) = (a.score(norm), b.score(norm));
    sa > sb || (sa == sb && a.tokens < b.tokens)
}

/// Beam search: each step keeps the `beam` best continuations by cumulative
/// log-probability; continuations ending in EOS leave the beam for the
/// finished pool. Returns the finished hypothesis with the best normalised
/// score, or the best unfinished one if nothing finished.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, cfg: &BeamConfig) -> Result<BeamResult> {
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(Error::Config("beam size and max length must be positive".into()));
    }
    let v = scorer.vocab_size();
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let rows = scorer.log_probs(&prefixes)?;
        let mut cands: Vec<(Real, usize, usize)> = Vec::with_capacity(live.len() * v);
        for (b, (h, row)) in live.iter().zip(&rows).enumerate() {
            if row.len() != v {
                return Err(Error::Contract(format!("scorer returned {} scores for vocabulary {v}", row.len())));
            }
            for (tok, &lp) in row.iter().enumerate() {
                if !cfg.banned.contains(&tok) {
                    cands.push((h.log_prob + lp, b, tok));
                }
            }
        }
        // Highest score first; ties broken by beam index then token id.
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        cands.truncate(cfg.beam);
        let mut next = Vec::with_capacity(cands.len());
        for (lp, b, tok) in cands {
            let mut tokens = live[b].tokens.clone();
            tokens.push(tok);
            let h = Hypothesis {
                tokens,
                log_prob: lp,
                finished: tok == EOS,
            };
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
    }
    let pick = |pool: Vec<Hypothesis>| {
        pool.into_iter()
            .reduce(|a, b| if better(&b, &a, cfg.norm) { b } else { a })
    };
    if let Some(best) = pick(finished) {
        return Ok(BeamResult { best, unfinished: false });
    }
    let best = pick(live).ok_or_else(|| Error::Contract("beam search produced no hypotheses".into()))?;
    Ok(BeamResult { best, unfinished: true })
}

/// Step-by-step argmax decoding.
pub fn greedy_search<S: StepScorer + ?Sized>(scorer: &S, max_len: usize, banned: &[usize]) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    };
    while h.len() < max_len && !h.finished {
        let row = scorer.log_probs(std::slice::from_ref(&h.tokens))?.remove(0);
        let (tok, lp) = row
            .iter()
            .enumerate()
            .filter(|(t, _)| !banned.contains(t))
            .fold((usize::MAX, Real::NEG_INFINITY), |acc, (t, &lp)| if lp > acc.1 { (t, lp) } else { acc });
        if tok == usize::MAX {
            return Err(Error::Contract("every token is banned".into()));
        }
        h.tokens.push(tok);
        h.log_prob += lp;
        h.finished = tok == EOS;
    }
    Ok(h)
}
