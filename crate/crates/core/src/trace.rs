//! Scripted stand-in for the transformer backend.
//!
//! A trace file scripts, for each step of a block, the per-position logits
//! and the two early-layer attention score tensors the engine would otherwise
//! compute. Scheduling runs (budget, selection, commit timing, metrics) can
//! then be driven deterministically without any tensor math.
//!
//! Tape semantics: line `t` describes a block that has been forwarded `t`
//! times, and the tape is replayed from line 0 for every block of the
//! sequence. This keeps one trace valid for every selection strategy even
//! though slower strategies spend more steps (and hence more tape) per block.
//! Asking for a step past the end of the tape is an error, not a wrap.
//!
//! File format: JSON Lines, one step per line:
//! `{"step": n, "logits": [[...]], "scores_l0": [[[...]]], "scores_l1": [[[...]]]}`
//! where `logits` is block-size x vocab and each score tensor is
//! heads x block-size x block-size.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// One scripted engine step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedStep {
    pub step: usize,
    pub logits: Vec<Vec<f64>>,
    pub scores_l0: Vec<Vec<Vec<f64>>>,
    pub scores_l1: Vec<Vec<Vec<f64>>>,
}

/// A validated sequence of scripted steps.
#[derive(Debug, Clone)]
pub struct OracleTrace {
    steps: Vec<ScriptedStep>,
    block_len: usize,
    vocab: usize,
    heads: usize,
}

impl OracleTrace {
    pub fn new(steps: Vec<ScriptedStep>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("oracle trace has no steps".into()));
        }
        let block_len = steps[0].logits.len();
        let vocab = steps[0].logits.first().map_or(0, |r| r.len());
        let heads = steps[0].scores_l0.len();
        if block_len == 0 || vocab < 2 || heads == 0 {
            return Err(Error::Config(format!(
                "oracle trace needs block>=1, vocab>=2, heads>=1; got {}x{} logits, {} heads",
                block_len, vocab, heads
            )));
        }
        for (i, s) in steps.iter().enumerate() {
            if s.step != i {
                return Err(Error::Config(format!(
                    "oracle trace step field {} at line {}; steps must be consumed in order",
                    s.step, i
                )));
            }
            if s.logits.len() != block_len || s.logits.iter().any(|r| r.len() != vocab) {
                return Err(Error::Config(format!("trace step {}: ragged logits", i)));
            }
            for scores in [&s.scores_l0, &s.scores_l1] {
                if scores.len() != heads
                    || scores
                        .iter()
                        .any(|h| h.len() != block_len || h.iter().any(|r| r.len() != block_len))
                {
                    return Err(Error::Config(format!(
                        "trace step {}: score tensors must be {} x {} x {}",
                        i, heads, block_len, block_len
                    )));
                }
            }
        }
        Ok(OracleTrace {
            steps,
            block_len,
            vocab,
            heads,
        })
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// The scripted step at tape position `step`.
    pub fn step(&self, step: usize) -> Result<&ScriptedStep> {
        self.steps.get(step).ok_or(Error::TraceExhausted {
            step,
            len: self.steps.len(),
        })
    }

    /// Per-head intra-block score matrices for the given step, restricted to
    /// the listed block positions (rows and columns alike, so the result is
    /// square).
    pub fn scores_at(&self, step: usize, layer1: bool, active: &[usize]) -> Result<Vec<Matrix>> {
        let s = self.step(step)?;
        let tensor = if layer1 { &s.scores_l1 } else { &s.scores_l0 };
        let mut out = Vec::with_capacity(self.heads);
        for head in tensor {
            let mut m = Matrix::zeros(active.len(), active.len());
            for (r, &i) in active.iter().enumerate() {
                if i >= self.block_len {
                    return Err(Error::Shape(format!(
                        "active position {} outside scripted block of {}",
                        i, self.block_len
                    )));
                }
                for (c, &j) in active.iter().enumerate() {
                    m.set(r, c, head[i][j]);
                }
            }
            out.push(m);
        }
        Ok(out)
    }

    /// Scripted logits rows for the given block positions, in that order.
    pub fn logits_at(&self, step: usize, positions: &[usize]) -> Result<Matrix> {
        let s = self.step(step)?;
        let mut m = Matrix::zeros(positions.len(), self.vocab);
        for (r, &p) in positions.iter().enumerate() {
            if p >= self.block_len {
                return Err(Error::Shape(format!(
                    "logit position {} outside scripted block of {}",
                    p, self.block_len
                )));
            }
            m.row_mut(r).copy_from_slice(&s.logits[p]);
        }
        Ok(m)
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut steps = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            steps.push(serde_json::from_str(&line)?);
        }
        OracleTrace::new(steps)
    }

    pub fn from_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_step(step: usize, b: usize) -> ScriptedStep {
        ScriptedStep {
            step,
            logits: vec![vec![0.0, 1.0]; b],
            scores_l0: vec![vec![vec![0.0; b]; b]],
            scores_l1: vec![vec![vec![1.0; b]; b]],
        }
    }

    #[test]
    fn trace_validates_and_slices() {
        let t = OracleTrace::new(vec![tiny_step(0, 3), tiny_step(1, 3)]).unwrap();
        assert_eq!((t.block_len(), t.vocab(), t.heads()), (3, 2, 1));
        let s = t.scores_at(1, true, &[0, 2]).unwrap();
        assert_eq!(s[0].rows(), 2);
        assert_eq!(s[0].get(1, 0), 1.0);
        let l = t.logits_at(0, &[2]).unwrap();
        assert_eq!(l.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn trace_exhaustion_is_an_error() {
        let t = OracleTrace::new(vec![tiny_step(0, 2)]).unwrap();
        assert!(matches!(
            t.step(1),
            Err(Error::TraceExhausted { step: 1, len: 1 })
        ));
    }

    #[test]
    fn trace_rejects_out_of_order_steps() {
        let r = OracleTrace::new(vec![tiny_step(0, 2), tiny_step(2, 2)]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn trace_jsonl_roundtrip() {
        let t = OracleTrace::new(vec![tiny_step(0, 2), tiny_step(1, 2)]).unwrap();
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let back = OracleTrace::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.step(1).unwrap().logits, t.step(1).unwrap().logits);
    }
}
