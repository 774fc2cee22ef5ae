//! Pre-norm transformer encoder over token ids. The `[CLS]` output is the
//! node summary.

use autograd::{ParamStore, Real, Tape, Var};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;
use crate::text::{Vocabulary, PAD};

pub const PREFIX: &str = "lm.";

/// Additive attention score for `[PAD]` keys.
const PAD_SCORE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl LmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 64,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            max_len: 128,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!("max sequence length must be ≥ 3, got {}", self.max_len)));
        }
        if self.vocab_size == 0 || self.layers == 0 || self.ff_mult == 0 {
            return Err(Error::Config("vocab size, layers and ff multiplier must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Output of a forward pass: `hidden` is `[B·S, d]`, row `b·S + t` holding
/// position `t` of sequence `b`. `attention[l]` is `[B·heads, S, S]`.
pub struct LmOutput {
    pub hidden: Var,
    pub attention: Vec<Var>,
    pub batch: usize,
    pub seq_len: usize,
}

impl LmOutput {
    /// Row indices of the `[CLS]` positions.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq_len).collect()
    }
}

/// Drops trailing columns that are `[PAD]` in every sequence. Outputs at
/// the remaining positions are unchanged because `[PAD]` keys are masked.
pub fn trim_padding(ids: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let len = ids
        .iter()
        .map(|s| s.iter().rposition(|&t| t != PAD).map_or(1, |p| p + 1))
        .max()
        .unwrap_or(0);
    ids.iter().map(|s| s[..len.min(s.len())].to_vec()).collect()
}

#[derive(Clone, Debug)]
pub struct LmEncoder {
    pub config: LmConfig,
}

fn name(rest: &str) -> String {
    format!("{PREFIX}{rest}")
}

impl LmEncoder {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Adds freshly initialized `lm.` parameters to `store`.
    pub fn init_params<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let c = &self.config;
        let (d, f) = (c.hidden, c.hidden * c.ff_mult);
        store.normal(&name("tok_emb"), &[c.vocab_size, d], 0.02, rng);
        store.normal(&name("pos_emb"), &[c.max_len, d], 0.02, rng);
        for l in 0..c.layers {
            let p = |s: &str| name(&format!("l{l}.{s}"));
            store.ones(&p("ln1.g"), &[d]);
            store.zeros(&p("ln1.b"), &[d]);
            for w in ["q", "k", "v", "o"] {
                store.xavier(&p(&format!("attn.w{w}")), d, d, rng);
                store.zeros(&p(&format!("attn.b{w}")), &[d]);
            }
            store.ones(&p("ln2.g"), &[d]);
            store.zeros(&p("ln2.b"), &[d]);
            store.xavier(&p("ff.w1"), d, f, rng);
            store.zeros(&p("ff.b1"), &[f]);
            store.xavier(&p("ff.w2"), f, d, rng);
            store.zeros(&p("ff.b2"), &[d]);
        }
        store.ones(&name("ln_f.g"), &[d]);
        store.zeros(&name("ln_f.b"), &[d]);
    }

    fn linear<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = tape.param(store, w)?;
        let b = tape.param(store, b)?;
        let y = tape.matmul(x, w, false)?;
        Ok(tape.add_row(y, b)?)
    }

    /// Encodes a batch of equal-length id sequences.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ids: &[Vec<u32>],
        rng: &mut impl Rng,
    ) -> Result<LmOutput> {
        let c = &self.config;
        let (d, heads) = (c.hidden, c.heads);
        let dh = d / heads;
        let batch = ids.len();
        if batch == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let s = ids[0].len();
        if ids.iter().any(|x| x.len() != s) {
            return Err(Error::Config("sequences in a batch must share one length".into()));
        }
        if s > c.max_len || s == 0 {
            return Err(Error::Config(format!("sequence length {s} exceeds maximum {}", c.max_len)));
        }
        let flat: Vec<usize> = ids.iter().flatten().map(|&i| i as usize).collect();
        if let Some(&bad) = flat.iter().find(|&&i| i >= c.vocab_size) {
            return Err(Error::Config(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }

        let tok = tape.param(store, &name("tok_emb"))?;
        let pos = tape.param(store, &name("pos_emb"))?;
        let tok = tape.gather_rows(tok, &flat)?;
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..s).collect();
        let pos = tape.gather_rows(pos, &pos_idx)?;
        let mut x = tape.add(tok, pos)?;
        x = tape.dropout(x, c.dropout, rng)?;

        let mut mask = Vec::with_capacity(batch * heads * s * s);
        for seq in ids {
            let row: Vec<T> = seq
                .iter()
                .map(|&id| if id == PAD { T::c(PAD_SCORE) } else { T::zero() })
                .collect();
            for _ in 0..heads * s {
                mask.extend_from_slice(&row);
            }
        }
        let mask = tape.constant(&[batch * heads, s, s], mask)?;
        let scale = T::c(1.0 / (dh as f64).sqrt());

        let split = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
            let v = tape.reshape(v, &[batch, s, heads, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            Ok(tape.reshape(v, &[batch * heads, s, dh])?)
        };

        let mut attention = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = |s: &str| name(&format!("l{l}.{s}"));
            let g1 = tape.param(store, &p("ln1.g"))?;
            let b1 = tape.param(store, &p("ln1.b"))?;
            let h = tape.layer_norm(x, g1, b1, 1e-5)?;
            let q = Self::linear(tape, store, h, &p("attn.wq"), &p("attn.bq"))?;
            let k = Self::linear(tape, store, h, &p("attn.wk"), &p("attn.bk"))?;
            let v = Self::linear(tape, store, h, &p("attn.wv"), &p("attn.bv"))?;
            let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.add(scores, mask)?;
            let probs = tape.softmax(scores)?;
            attention.push(probs);
            let ctx = tape.bmm(probs, v, false)?;
            let ctx = tape.reshape(ctx, &[batch, heads, s, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[batch * s, d])?;
            let out = Self::linear(tape, store, ctx, &p("attn.wo"), &p("attn.bo"))?;
            let out = tape.dropout(out, c.dropout, rng)?;
            x = tape.add(x, out)?;

            let g2 = tape.param(store, &p("ln2.g"))?;
            let b2 = tape.param(store, &p("ln2.b"))?;
            let h = tape.layer_norm(x, g2, b2, 1e-5)?;
            let h = Self::linear(tape, store, h, &p("ff.w1"), &p("ff.b1"))?;
            let h = tape.gelu(h)?;
            let h = Self::linear(tape, store, h, &p("ff.w2"), &p("ff.b2"))?;
            let h = tape.dropout(h, c.dropout, rng)?;
            x = tape.add(x, h)?;
        }
        let gf = tape.param(store, &name("ln_f.g"))?;
        let bf = tape.param(store, &name("ln_f.b"))?;
        let hidden = tape.layer_norm(x, gf, bf, 1e-5)?;
        Ok(LmOutput {
            hidden,
            attention,
            batch,
            seq_len: s,
        })
    }

    /// `[CLS]` outputs in eval mode for already encoded sequences, `[n, d]`
    /// row-major. Batches of `batch_size` run in parallel.
    pub fn embed_ids<T: Real>(&self, store: &ParamStore<T>, ids: &[Vec<u32>], batch_size: usize) -> Result<Vec<T>> {
        let batch_size = batch_size.max(1);
        let d = self.config.hidden;
        let parts: Vec<Vec<T>> = ids
            .par_chunks(batch_size)
            .map(|chunk| -> Result<Vec<T>> {
                let mut tape = Tape::eval();
                let out = self.forward(&mut tape, store, &trim_padding(chunk), &mut rand::rng())?;
                let h = tape.value(out.hidden);
                let mut rows = Vec::with_capacity(chunk.len() * d);
                for r in out.cls_rows() {
                    rows.extend_from_slice(&h[r * d..(r + 1) * d]);
                }
                Ok(rows)
            })
            .collect::<Result<_>>()?;
        Ok(parts.concat())
    }

    /// `[CLS]` embeddings of the unmasked texts of `nodes`, `[nodes, d]`.
    pub fn embed_texts<T: Real>(
        &self,
        store: &ParamStore<T>,
        vocab: &Vocabulary,
        g: &TextAttributedGraph,
        nodes: &[usize],
        batch_size: usize,
    ) -> Result<Vec<T>> {
        for &v in nodes {
            g.check_node(v)?;
        }
        let ids: Vec<Vec<u32>> = nodes.iter().map(|&v| vocab.encode(g.text(v), self.config.max_len)).collect();
        self.embed_ids(store, &ids, batch_size)
    }

    pub fn embed_label_text<T: Real>(&self, store: &ParamStore<T>, vocab: &Vocabulary, text: &str) -> Result<Vec<T>> {
        self.embed_ids(store, &[vocab.encode(text, self.config.max_len)], 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{CLS, SEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(vocab: usize, max_len: usize) -> (LmEncoder, ParamStore<f64>) {
        let cfg = LmConfig {
            max_len,
            ..LmConfig::new(vocab)
        };
        let lm = LmEncoder::new(cfg).unwrap();
        let mut store = ParamStore::new();
        lm.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        (lm, store)
    }

    fn seq(content: &[u32], len: usize) -> Vec<u32> {
        let mut s = vec![CLS];
        s.extend_from_slice(content);
        s.push(SEP);
        s.resize(len, PAD);
        s
    }

    fn cls(lm: &LmEncoder, store: &ParamStore<f64>, ids: &[Vec<u32>]) -> Vec<f64> {
        lm.embed_ids(store, ids, ids.len()).unwrap()
    }

    #[test]
    fn output_shape() {
        let (lm, store) = model(20, 16);
        let mut t = Tape::eval();
        let ids = vec![seq(&[5, 6, 7], 8), seq(&[9], 8)];
        let out = lm.forward(&mut t, &store, &ids, &mut rand::rng()).unwrap();
        assert_eq!(t.shape(out.hidden), &[16, 64]);
        assert_eq!(out.attention.len(), 2);
        assert_eq!(t.shape(out.attention[0]), &[8, 8, 8]);
    }

    #[test]
    fn trailing_pad_does_not_change_cls() {
        let (lm, store) = model(20, 16);
        let a = cls(&lm, &store, &[seq(&[5, 6, 7], 6)]);
        let b = cls(&lm, &store, &[seq(&[5, 6, 7], 12)]);
        assert_eq!(a, b);
    }

    #[test]
    fn attention_rows_sum_to_one_and_skip_pad() {
        let (lm, store) = model(20, 16);
        let mut t = Tape::eval();
        let ids = vec![seq(&[5, 6], 7)];
        let out = lm.forward(&mut t, &store, &ids, &mut rand::rng()).unwrap();
        for &a in &out.attention {
            for row in t.value(a).chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row[4..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn too_long_or_out_of_vocab_is_an_error() {
        let (lm, store) = model(20, 8);
        let mut t = Tape::eval();
        assert!(lm.forward(&mut t, &store, &[seq(&[5], 9)], &mut rand::rng()).is_err());
        assert!(lm.forward(&mut t, &store, &[seq(&[25], 8)], &mut rand::rng()).is_err());
        assert!(LmEncoder::new(LmConfig { heads: 3, ..LmConfig::new(10) }).is_err());
    }

    #[test]
    fn batching_does_not_change_embeddings() {
        let (lm, store) = model(30, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ids: Vec<Vec<u32>> = (0..100)
            .map(|_| {
                let n = rng.random_range(0..10);
                let c: Vec<u32> = (0..n).map(|_| rng.random_range(5..30)).collect();
                seq(&c, 16)
            })
            .collect();
        let one = lm.embed_ids(&store, &ids, 1).unwrap();
        let many = lm.embed_ids(&store, &ids, 32).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn trimming_keeps_longest_content() {
        let ids = vec![seq(&[5, 6], 8), seq(&[5], 8)];
        let t = trim_padding(&ids);
        assert_eq!(t, vec![vec![CLS, 5, 6, SEP], vec![CLS, 5, SEP, PAD]]);
    }

    #[test]
    fn positions_matter() {
        let (lm, store) = model(20, 16);
        let a = cls(&lm, &store, &[seq(&[5, 6, 7], 8)]);
        let b = cls(&lm, &store, &[seq(&[6, 5, 7], 8)]);
        assert_ne!(a, b);
    }

    #[test]
    fn eval_forward_is_bitwise_repeatable() {
        let (lm, store) = model(20, 16);
        let ids = [seq(&[5, 9, 11], 10)];
        assert_eq!(cls(&lm, &store, &ids), cls(&lm, &store, &ids));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (lm, store) = model(12, 8);
        let mut t = Tape::new();
        let ids: Vec<Vec<u32>> = (0..3).map(|i| seq(&[5 + i, 6 + i, 7 + i], 8)).collect();
        let out = lm.forward(&mut t, &store, &ids, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w: Vec<f64> = (0..t.value(out.hidden).len()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let loss = autograd::gradcheck::project(&mut t, out.hidden, &w).unwrap();
        let g = t.backward(loss).unwrap().params(&t);
        for (n, grad) in &g {
            assert!(grad.iter().any(|&x| x != 0.0), "{n} has zero gradient");
        }
        assert_eq!(g.len(), store.len());
    }
}
