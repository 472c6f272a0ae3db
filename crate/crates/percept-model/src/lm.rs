//! Small causal language model over visual-token prefix + text, with the
//! pooling operations that turn its hidden states into instruction
//! embeddings and the summary vector.

use crate::attention::causal_mask;
use crate::model::{Model, ModelError};
use crate::tokenizer::TokenSequence;
use percept_autograd::{Graph, NodeId};

/// Which perception granularity a prompt drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// Candidate phrase list; one embedding per label.
    WordBased,
    /// One referring expression; a single pooled embedding.
    SentenceBased,
}

/// Hidden states and next-token logits for one sequence.
pub struct LmOutput {
    /// `[prefix + text_len, d_lm]`, one row per input position.
    pub hidden: NodeId,
    /// `[prefix + text_len, vocab]`.
    pub logits: NodeId,
    /// Number of visual-token positions preceding the text.
    pub prefix: usize,
    pub text_len: usize,
}

impl Model {
    /// Causal transformer pass over `[visual tokens; text tokens]`.
    pub fn lm_forward(
        &self,
        g: &mut Graph,
        visual: Option<NodeId>,
        seq: &TokenSequence,
    ) -> Result<LmOutput, ModelError> {
        let prefix = visual.map(|v| g.value(v).rows()).unwrap_or(0);
        let text_len = seq.ids.len();
        let total = prefix + text_len;
        if total > self.config.context_cap {
            return Err(ModelError::ContextOverflow {
                len: total,
                prefix,
                cap: self.config.context_cap,
            });
        }
        let tok_embed = g.param(&self.store, self.pid("lm.tok_embed"));
        let text = g.gather_rows(tok_embed, seq.ids.iter().map(|&i| i as usize).collect());
        let mut x = match visual {
            Some(v) => g.concat_rows(&[v, text]),
            None => text,
        };
        let pos_all = g.param(&self.store, self.pid("lm.pos_embed"));
        let pos = g.slice_rows(pos_all, 0, total);
        x = g.add(x, pos);
        let mask = g.constant(causal_mask(total));
        for i in 0..self.config.lm_layers {
            let n = self.norm_named(g, x, &format!("lm.{i}.ln1"));
            let a = self.mha(g, n, &format!("lm.{i}.attn"), self.config.lm_heads, Some(mask));
            x = g.add(x, a);
            x = self.ffn_block(g, x, &format!("lm.{i}.ln2"), &format!("lm.{i}.ff"));
        }
        let hidden = self.norm_named(g, x, "lm.lnf");
        let logits = self.linear_named(g, hidden, "lm.head");
        Ok(LmOutput { hidden, logits, prefix, text_len })
    }

    /// Mean-pools hidden states over each recorded label span. Word-based
    /// prompts yield one row per candidate label; sentence-based prompts
    /// must carry exactly one span (the whole expression) and yield one row.
    /// Output is `[M, d_lm]`.
    pub fn instruction_embeddings(
        &self,
        g: &mut Graph,
        lm: &LmOutput,
        seq: &TokenSequence,
        kind: Granularity,
    ) -> Result<NodeId, ModelError> {
        if seq.label_spans.is_empty() {
            return Err(ModelError::NoTextEmbeddings);
        }
        if kind == Granularity::SentenceBased && seq.label_spans.len() != 1 {
            return Err(ModelError::CountMismatch {
                detail: format!(
                    "sentence-based prompt carries {} spans, expected 1",
                    seq.label_spans.len()
                ),
            });
        }
        let mut rows = Vec::with_capacity(seq.label_spans.len());
        for (i, &(s, e)) in seq.label_spans.iter().enumerate() {
            if s >= e {
                return Err(ModelError::EmptySpan { index: i });
            }
            let span = g.slice_rows(lm.hidden, lm.prefix + s, e - s);
            let sum = g.sum_cols(span);
            rows.push(g.scale(sum, 1.0 / (e - s) as f64));
        }
        Ok(g.concat_rows(&rows))
    }

    /// Hidden state at the summary-token position, `[1, d_lm]`.
    pub fn summary_hidden(
        &self,
        g: &mut Graph,
        lm: &LmOutput,
        seq: &TokenSequence,
    ) -> Result<NodeId, ModelError> {
        let pos = seq.summary_pos.ok_or(ModelError::MissingSummary)?;
        Ok(g.gather_rows(lm.hidden, vec![lm.prefix + pos]))
    }

    /// Mean next-token cross-entropy over the response span only (prompt
    /// positions contribute nothing). The response runs from
    /// `seq.response_start` to the end of the sequence including EOS.
    pub fn lm_loss(&self, g: &mut Graph, lm: &LmOutput, seq: &TokenSequence) -> Result<NodeId, ModelError> {
        let start = seq.response_start.ok_or(ModelError::EmptyResponse)?;
        let len = seq.ids.len();
        if start == 0 || start >= len {
            return Err(ModelError::EmptyResponse);
        }
        // Logits at position p predict token p+1; response tokens
        // ids[start..len] are predicted from rows start-1 .. len-1.
        let idx: Vec<usize> = (lm.prefix + start - 1..lm.prefix + len - 1).collect();
        let rows = g.gather_rows(lm.logits, idx);
        let targets: Vec<usize> = seq.ids[start..].iter().map(|&i| i as usize).collect();
        let ce = g.cross_entropy_rows(rows, targets);
        Ok(g.mean_all(ce))
    }
}
