//! Token ids and the output grammar `REASON* ACTION_START CODE{T} EOS`.

use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::microworld::trajectory::Lateral;
use crate::nnkit::tape::log_softmax_at;
use crate::nnkit::Tensor;

/// Id layout: codebook `[0, K)`, one reason token per lateral maneuver,
/// `ACTION_START`, `EOS`, and an input-only `BOS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocabulary {
    pub codebook_size: usize,
    pub action_len: usize,
    pub max_reason: usize,
}

impl TokenVocabulary {
    pub fn new(codebook_size: usize, action_len: usize, max_reason: usize) -> Self {
        Self { codebook_size, action_len, max_reason }
    }

    pub fn reason(&self, l: Lateral) -> usize {
        self.codebook_size + Lateral::ALL.iter().position(|x| *x == l).unwrap_or(0)
    }

    pub fn action_start(&self) -> usize {
        self.codebook_size + Lateral::ALL.len()
    }

    pub fn eos(&self) -> usize {
        self.action_start() + 1
    }

    /// Number of output classes.
    pub fn size(&self) -> usize {
        self.eos() + 1
    }

    /// Input-only start token.
    pub fn bos(&self) -> usize {
        self.size()
    }

    pub fn is_code(&self, t: usize) -> bool {
        t < self.codebook_size
    }

    pub fn reason_of(&self, t: usize) -> Option<Lateral> {
        if t >= self.codebook_size && t < self.action_start() {
            Some(Lateral::ALL[t - self.codebook_size])
        } else {
            None
        }
    }

    pub fn name(&self, t: usize) -> String {
        if self.is_code(t) {
            format!("A{t}")
        } else if let Some(l) = self.reason_of(t) {
            format!("REASON_{}", l.name())
        } else if t == self.action_start() {
            "ACTION_START".into()
        } else if t == self.eos() {
            "EOS".into()
        } else if t == self.bos() {
            "BOS".into()
        } else {
            format!("?{t}")
        }
    }

    /// Target sequence for reasoning tags followed by action codes.
    pub fn build(&self, tags: &[Lateral], codes: &[usize]) -> Result<Vec<usize>, PolicyError> {
        let mut seq: Vec<usize> = tags.iter().map(|&l| self.reason(l)).collect();
        seq.push(self.action_start());
        seq.extend_from_slice(codes);
        seq.push(self.eos());
        self.validate(&seq)?;
        Ok(seq)
    }

    /// Check a full sequence against the grammar; returns the reasoning length.
    pub fn validate(&self, seq: &[usize]) -> Result<usize, PolicyError> {
        let mut g = GrammarState::default();
        for &t in seq {
            g.advance(self, t)?;
        }
        if !g.done {
            return Err(PolicyError::Grammar(format!("sequence of {} tokens is incomplete", seq.len())));
        }
        Ok(g.reason)
    }

    /// Reasoning tags and action codes of a valid sequence.
    pub fn split(&self, seq: &[usize]) -> (Vec<Lateral>, Vec<usize>) {
        let tags = seq.iter().map_while(|&t| self.reason_of(t)).collect();
        let codes = seq.iter().copied().filter(|&t| self.is_code(t)).collect();
        (tags, codes)
    }
}

/// Decoding position within the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GrammarState {
    pub reason: usize,
    pub action_started: bool,
    pub codes: usize,
    pub done: bool,
}

impl GrammarState {
    pub fn allows(&self, v: &TokenVocabulary, t: usize) -> bool {
        if self.done || t >= v.size() {
            return false;
        }
        if !self.action_started {
            return t == v.action_start() || (v.reason_of(t).is_some() && self.reason < v.max_reason);
        }
        if self.codes < v.action_len {
            v.is_code(t)
        } else {
            t == v.eos()
        }
    }

    pub fn advance(&mut self, v: &TokenVocabulary, t: usize) -> Result<(), PolicyError> {
        if !self.allows(v, t) {
            return Err(PolicyError::Grammar(format!("{} not allowed after {:?}", v.name(t), self)));
        }
        if v.reason_of(t).is_some() {
            self.reason += 1;
        } else if t == v.action_start() {
            self.action_started = true;
        } else if v.is_code(t) {
            self.codes += 1;
        } else {
            self.done = true;
        }
        Ok(())
    }

    /// Additive mask row (0 allowed, -inf forbidden).
    pub fn mask(&self, v: &TokenVocabulary) -> Vec<f64> {
        (0..v.size()).map(|t| if self.allows(v, t) { 0.0 } else { f64::NEG_INFINITY }).collect()
    }
}

/// Grammar masks for teacher forcing: row `j` is the mask before emitting `seq[j]`.
pub fn teacher_masks(v: &TokenVocabulary, seq: &[usize]) -> Result<Tensor, PolicyError> {
    let mut g = GrammarState::default();
    let mut data = Vec::with_capacity(seq.len() * v.size());
    for &t in seq {
        data.extend(g.mask(v));
        g.advance(v, t)?;
    }
    Ok(Tensor { rows: seq.len(), cols: v.size(), data })
}

/// `(L_LM, L_Action)`: mean negative log-likelihood over all rows, and over
/// the rows after the first `reason_len` (the action part).
pub fn sequence_nll(logits: &Tensor, targets: &[usize], reason_len: usize) -> (f64, f64) {
    let nll: Vec<f64> = targets.iter().enumerate().map(|(r, &t)| -log_softmax_at(logits.row(r), t)).collect();
    let all = nll.iter().sum::<f64>() / nll.len().max(1) as f64;
    let act = &nll[reason_len.min(nll.len())..];
    (all, act.iter().sum::<f64>() / act.len().max(1) as f64)
}

/// Sum of target log-probabilities.
pub fn sequence_logprob(logits: &Tensor, targets: &[usize]) -> f64 {
    targets.iter().enumerate().map(|(r, &t)| log_softmax_at(logits.row(r), t)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v() -> TokenVocabulary {
        TokenVocabulary::new(16, 3, 2)
    }

    #[test]
    fn id_ranges_are_disjoint() {
        let v = v();
        let mut ids: Vec<usize> = (0..16).collect();
        ids.extend(Lateral::ALL.iter().map(|&l| v.reason(l)));
        ids.push(v.action_start());
        ids.push(v.eos());
        ids.push(v.bos());
        let mut s = ids.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), ids.len());
        assert_eq!(v.size(), 23);
    }

    #[test]
    fn grammar_accepts_and_rejects() {
        let v = v();
        let ok = v.build(&[Lateral::ChangeLeft], &[1, 2, 3]).unwrap();
        assert_eq!(v.validate(&ok).unwrap(), 1);
        assert_eq!(v.split(&ok), (vec![Lateral::ChangeLeft], vec![1, 2, 3]));
        assert!(v.build(&[], &[1, 2]).is_err());
        assert!(v.validate(&[1, v.action_start(), 1, 2, 3, v.eos()]).is_err());
        let too_many = [Lateral::Straight; 3];
        assert!(v.build(&too_many, &[0, 0, 0]).is_err());
        assert!(v.validate(&[v.action_start(), 1, 2, 3]).is_err());
    }

    #[test]
    fn mask_blocks_codes_before_action_start() {
        let v = v();
        let m = GrammarState::default().mask(&v);
        assert!((0..16).all(|t| m[t] == f64::NEG_INFINITY));
        assert_eq!(m[v.action_start()], 0.0);
        assert_eq!(m[v.eos()], f64::NEG_INFINITY);
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let logits = Tensor::zeros(3, 4);
        let (lm, act) = sequence_nll(&logits, &[0, 3, 1], 1);
        assert!((lm - 4f64.ln()).abs() < 1e-12 && (act - 4f64.ln()).abs() < 1e-12);
        assert!((sequence_logprob(&Tensor::zeros(1, 9), &[4]) + 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_give_zero_loss() {
        let mut logits = Tensor::filled(2, 3, f64::NEG_INFINITY);
        logits.set(0, 2, 0.0);
        logits.set(1, 0, 0.0);
        let (lm, act) = sequence_nll(&logits, &[2, 0], 0);
        assert_eq!((lm, act), (0.0, 0.0));
    }
}
