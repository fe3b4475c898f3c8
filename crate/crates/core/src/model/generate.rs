use serde::{Deserialize, Serialize};

use super::tokenizer::{self, BOS, EOS};
use super::{Batch, ToyModel};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub max_new_tokens: usize,
    /// `<= 0` decodes greedily.
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    /// Prompts decoded together per forward pass.
    pub batch_size: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { max_new_tokens: 200, temperature: 0.01, top_p: 0.95, seed: 0, batch_size: 32 }
    }
}

impl GenOptions {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { max_new_tokens, temperature: 0.0, ..Self::default() }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in row.iter().enumerate() {
        if z > row[best] {
            best = i;
        }
    }
    best
}

/// Nucleus sampling at `temperature` over the smallest prefix of the sorted
/// distribution whose mass reaches `top_p`.
pub(crate) fn sample_token(row: &[f64], temperature: f64, top_p: f64, rng: &mut Rng) -> usize {
    if temperature <= 0.0 {
        return argmax(row);
    }
    let mut probs: Vec<f64> = row.iter().map(|z| z / temperature).collect();
    crate::autodiff::softmax_in_place(&mut probs);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += probs[i];
        kept += 1;
        if mass >= top_p {
            break;
        }
    }
    let mut u = rng.uniform() * mass;
    for &i in &order[..kept] {
        u -= probs[i];
        if u < 0.0 {
            return i;
        }
    }
    order[kept - 1]
}

impl ToyModel {
    /// Continuations (without `BOS`, prompt or `EOS`) for each prompt.
    ///
    /// Decoding stops at `EOS`, after `max_new_tokens`, or when the context is
    /// full; a prompt that already fills the context yields nothing.
    pub fn generate_batch(&self, prompts: &[Vec<usize>], opts: &GenOptions) -> Result<Vec<Vec<usize>>> {
        self.generate_rows(prompts, opts, 0)
    }

    fn generate_rows(&self, prompts: &[Vec<usize>], opts: &GenOptions, first: usize) -> Result<Vec<Vec<usize>>> {
        let max_len = self.config.max_seq_len;
        let mut prefixes: Vec<Vec<usize>> = prompts
            .iter()
            .map(|p| {
                let mut s = Vec::with_capacity(p.len() + 1);
                s.push(BOS);
                s.extend_from_slice(p);
                s
            })
            .collect();
        let mut rngs: Vec<Rng> = (0..prompts.len()).map(|i| Rng::seed(Rng::derive_seed(opts.seed, (first + i) as u64))).collect();
        let mut out = vec![Vec::new(); prompts.len()];
        let mut active: Vec<usize> =
            (0..prompts.len()).filter(|&i| prefixes[i].len() < max_len && opts.max_new_tokens > 0).collect();
        while !active.is_empty() {
            let batch = Batch::from_prefixes(&active.iter().map(|&i| prefixes[i].clone()).collect::<Vec<_>>())?;
            let logits = self.logits(&batch)?;
            let vocab = self.config.vocab_size;
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let pos = r * batch.seq_len + prefixes[i].len() - 1;
                let row = &logits.data()[pos * vocab..(pos + 1) * vocab];
                let tok = sample_token(row, opts.temperature, opts.top_p, &mut rngs[i]);
                if tok == EOS {
                    continue;
                }
                out[i].push(tok);
                prefixes[i].push(tok);
                if out[i].len() < opts.max_new_tokens && prefixes[i].len() < max_len {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(out)
    }

    pub fn generate(&self, prompt: &[usize], opts: &GenOptions) -> Result<Vec<usize>> {
        Ok(self.generate_batch(&[prompt.to_vec()], opts)?.remove(0))
    }

    /// Text-in, text-out generation in chunks of `opts.batch_size`. Each
    /// prompt's sampling stream depends only on its index.
    pub fn generate_text(&self, prompts: &[String], opts: &GenOptions) -> Result<Vec<String>> {
        let encoded: Vec<Vec<usize>> = prompts.iter().map(|p| tokenizer::encode(p)).collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(prompts.len());
        let size = opts.batch_size.max(1);
        for (c, chunk) in encoded.chunks(size).enumerate() {
            out.extend(self.generate_rows(chunk, opts, c * size)?.iter().map(|t| tokenizer::decode(t)));
        }
        Ok(out)
    }
}
