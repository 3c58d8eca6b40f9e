//! Forward passes: unimodal encoders, the cross-modal encoder and the heads.

use crate::error::{Error, Result};
use crate::model::params::{AttentionParams, EncoderBlock, FeedForwardParams, LayerNormParams, Layout, Linear};
use crate::model::{ModelConfig, ParamId, Params};
use crate::numerics::{Graph, Tensor, Var};
use crate::textproc::{TokenId, CLS_ID, UNK_ID};

/// Unimodal encoder output; row 0 is the global (`[CLS]`) representation.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub reps: Var,
}

impl EncoderOutput {
    pub fn value<'g>(&self, g: &'g Graph) -> &'g Tensor {
        g.value(self.reps)
    }

    pub fn global(&self, g: &mut Graph) -> Result<Var> {
        g.row(self.reps, 0)
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.value(self.reps).rows()
    }
}

/// Image representations plus the per-layer cross-attention keys and
/// values, computed once and shared by every text fused with this image.
#[derive(Clone, Debug)]
pub struct ImageMemory {
    pub image: EncoderOutput,
    keys: Vec<Var>,
    values: Vec<Var>,
}

/// One head of a traced cross-attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrace {
    /// Attention weights, `(L_text+1) × (L_img+1)`, rows sum to 1.
    pub a: Tensor,
    /// Projected image values, `(L_img+1) × d'`.
    pub v: Tensor,
    /// Projected text queries, `(L_text+1) × d'`.
    pub q: Tensor,
}

/// Per-head attention of one cross layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// 1-based layer index.
    pub layer: usize,
    pub heads: Vec<HeadTrace>,
}

impl AttentionTrace {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn image_len(&self) -> usize {
        self.heads[0].a.cols()
    }

    pub fn text_len(&self) -> usize {
        self.heads[0].a.rows()
    }
}

/// Cross-modal encoder output.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub reps: Var,
    pub trace: Option<AttentionTrace>,
    /// Graph handles of the traced attention matrices, one per head.
    pub trace_vars: Vec<Var>,
}

struct AttentionOut {
    out: Var,
    probs: Vec<Var>,
    values: Vec<Var>,
    queries: Vec<Var>,
}

/// Parameters bound as graph leaves.
#[derive(Clone, Debug)]
pub struct Net {
    pub config: ModelConfig,
    pub layout: Layout,
    vars: Vec<Var>,
}

impl Params {
    /// Registers every parameter as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Net {
        self.bind_with(g, |_| None)
    }

    /// As [`Params::bind`], substituting tensors returned by `replace`.
    pub fn bind_with<'a>(&'a self, g: &mut Graph, replace: impl Fn(ParamId) -> Option<&'a Tensor>) -> Net {
        let vars = self
            .store
            .iter()
            .map(|(id, _, t)| g.leaf(replace(id).unwrap_or(t).clone()))
            .collect();
        Net {
            config: self.config.clone(),
            layout: self.layout.clone(),
            vars,
        }
    }
}

impl Net {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// `(id, var)` for every bound parameter.
    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().map(|(i, &v)| (ParamId(i), v))
    }

    pub fn linear(&self, g: &mut Graph, x: Var, lin: &Linear) -> Result<Var> {
        let y = g.matmul(x, self.var(lin.w))?;
        match lin.b {
            Some(b) => g.add_row(y, self.var(b)),
            None => Ok(y),
        }
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, ln: &LayerNormParams) -> Result<Var> {
        g.layer_norm(x, self.var(ln.gamma), self.var(ln.beta))
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, ff: &FeedForwardParams) -> Result<Var> {
        let h = self.linear(g, x, &ff.up)?;
        let h = g.gelu(h);
        self.linear(g, h, &ff.down)
    }

    /// Multi-head scaled dot-product attention of queries from `x` over
    /// precomputed `keys` / `values` (each `m × d`).
    fn attention(&self, g: &mut Graph, x: Var, keys: Var, values: Var, p: &AttentionParams) -> Result<AttentionOut> {
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = g.matmul(x, self.var(p.wq))?;
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut out = AttentionOut {
            out: q,
            probs: Vec::new(),
            values: Vec::new(),
            queries: Vec::new(),
        };
        for h in 0..self.config.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(keys, h * dh, dh)?;
            let vh = g.slice_cols(values, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let a = g.row_softmax(scores);
            heads.push(g.matmul(a, vh)?);
            out.probs.push(a);
            out.values.push(vh);
            out.queries.push(qh);
        }
        let merged = g.concat_cols(&heads)?;
        out.out = self.linear(g, merged, &p.out)?;
        Ok(out)
    }

    fn self_attention(&self, g: &mut Graph, x: Var, p: &AttentionParams) -> Result<Var> {
        let k = g.matmul(x, self.var(p.wk))?;
        let v = g.matmul(x, self.var(p.wv))?;
        Ok(self.attention(g, x, k, v, p)?.out)
    }

    /// Post-norm transformer block.
    fn encoder_block(&self, g: &mut Graph, x: Var, b: &EncoderBlock) -> Result<Var> {
        let a = self.self_attention(g, x, &b.attn)?;
        let x = g.add(x, a)?;
        let x = self.layer_norm(g, x, &b.ln_attn)?;
        let f = self.feed_forward(g, x, &b.ff)?;
        let x = g.add(x, f)?;
        self.layer_norm(g, x, &b.ln_ff)
    }

    /// Linear patch embedding, `[CLS]` prepend, positions, self-attention.
    /// `patches` is `L_I × p` or `rows × cols × p`.
    pub fn encode_image(&self, g: &mut Graph, patches: &Tensor) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let expected = [cfg.num_patches(), cfg.patch_pixels];
        let grid = [cfg.patch_grid.0, cfg.patch_grid.1, cfg.patch_pixels];
        if patches.shape() != expected && patches.shape() != grid {
            return Err(Error::shape("encode_image", patches.shape(), &expected));
        }
        let flat = patches.clone().reshape(&expected)?;
        let lp = &self.layout.image;
        let x = g.constant(flat);
        let emb = self.linear(g, x, &lp.patch_embed)?;
        let seq = g.concat_rows(&[self.var(lp.cls), emb])?;
        let seq = g.add(seq, self.var(lp.pos_emb))?;
        let mut h = self.layer_norm(g, seq, &lp.ln_emb)?;
        for b in &lp.blocks {
            h = self.encoder_block(g, h, b)?;
        }
        Ok(EncoderOutput { reps: h })
    }

    /// Token embedding with `[CLS]` prepended, positions from 0, self-attention.
    /// Ids outside the vocabulary are read as `[UNK]`.
    pub fn encode_text(&self, g: &mut Graph, ids: &[TokenId]) -> Result<EncoderOutput> {
        let cfg = &self.config;
        if ids.len() > cfg.max_text_len {
            return Err(Error::Argument(format!(
                "text of {} tokens exceeds max_text_len {}",
                ids.len(),
                cfg.max_text_len
            )));
        }
        let lp = &self.layout.text;
        let seq: Vec<usize> = std::iter::once(CLS_ID)
            .chain(ids.iter().map(|&i| if i < cfg.vocab_size { i } else { UNK_ID }))
            .collect();
        let tok = g.gather(self.var(lp.token_emb), &seq)?;
        let pos = g.slice_rows(self.var(lp.pos_emb), 0, seq.len())?;
        let x = g.add(tok, pos)?;
        let mut h = self.layer_norm(g, x, &lp.ln_emb)?;
        for b in &lp.blocks {
            h = self.encoder_block(g, h, b)?;
        }
        Ok(EncoderOutput { reps: h })
    }

    /// Precomputes cross-attention keys and values of every layer.
    pub fn image_memory(&self, g: &mut Graph, image: EncoderOutput) -> Result<ImageMemory> {
        let mut keys = Vec::with_capacity(self.layout.cross.len());
        let mut values = Vec::with_capacity(self.layout.cross.len());
        for block in &self.layout.cross {
            keys.push(g.matmul(image.reps, self.var(block.cross_attn.wk))?);
            values.push(g.matmul(image.reps, self.var(block.cross_attn.wv))?);
        }
        Ok(ImageMemory { image, keys, values })
    }

    /// Text self-attention, cross-attention to the image and feed-forward,
    /// per layer. `trace_layer` (1-based) captures that layer's attention.
    pub fn cross_encode(
        &self,
        g: &mut Graph,
        text: EncoderOutput,
        memory: &ImageMemory,
        trace_layer: Option<usize>,
    ) -> Result<FusionOutput> {
        let n_layers = self.layout.cross.len();
        if let Some(l) = trace_layer {
            if l == 0 || l > n_layers {
                return Err(Error::Config(format!("trace layer {l} outside 1..={n_layers}")));
            }
        }
        let mut x = text.reps;
        let mut trace = None;
        let mut trace_vars = Vec::new();
        for (i, block) in self.layout.cross.iter().enumerate() {
            let a = self.self_attention(g, x, &block.self_attn)?;
            x = g.add(x, a)?;
            x = self.layer_norm(g, x, &block.ln_self)?;

            let att = self.attention(g, x, memory.keys[i], memory.values[i], &block.cross_attn)?;
            if trace_layer == Some(i + 1) {
                let heads = (0..att.probs.len())
                    .map(|h| HeadTrace {
                        a: g.value(att.probs[h]).clone(),
                        v: g.value(att.values[h]).clone(),
                        q: g.value(att.queries[h]).clone(),
                    })
                    .collect();
                trace = Some(AttentionTrace { layer: i + 1, heads });
                trace_vars = att.probs.clone();
            }
            x = g.add(x, att.out)?;
            x = self.layer_norm(g, x, &block.ln_cross)?;

            let f = self.feed_forward(g, x, &block.ff)?;
            x = g.add(x, f)?;
            x = self.layer_norm(g, x, &block.ln_ff)?;
        }
        Ok(FusionOutput {
            reps: x,
            trace,
            trace_vars,
        })
    }

    /// `sim_fine = f^O · W^O` on the fused global row.
    pub fn fine_score(&self, g: &mut Graph, fusion: &FusionOutput) -> Result<Var> {
        let cls = g.row(fusion.reps, 0)?;
        g.matmul(cls, self.var(self.layout.itm_head))
    }

    /// Maps global rows to the coarse embedding space.
    pub fn project(&self, g: &mut Graph, x: Var, proj: &Linear) -> Result<Var> {
        self.linear(g, x, proj)
    }

    /// Vocabulary logits of the masked-phrase classifier for rows of `x`.
    pub fn mpm_logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.linear(g, x, &self.layout.mpm_hidden)?;
        let h = g.gelu(h);
        self.linear(g, h, &self.layout.mpm_out)
    }

    pub fn log_tau(&self) -> Var {
        self.var(self.layout.log_tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    pub(crate) fn small_params() -> Params {
        let cfg = ModelConfig {
            d: 32,
            heads: 4,
            patch_grid: (4, 4),
            patch_pixels: 12,
            vocab_size: 40,
            ..ModelConfig::default()
        };
        Params::init(&cfg, &mut Rng::seed(0)).unwrap()
    }

    fn image(seed: u64, p: &Params) -> Tensor {
        let mut rng = Rng::seed(seed);
        let n = p.config.num_patches() * p.config.patch_pixels;
        Tensor::new(
            vec![p.config.num_patches(), p.config.patch_pixels],
            (0..n).map(|_| rng.uniform()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn image_shape_contract() {
        let p = small_params();
        let mut g = Graph::inference();
        let net = p.bind(&mut g);
        let out = net.encode_image(&mut g, &image(1, &p)).unwrap();
        assert_eq!(out.value(&g).shape(), &[17, 32]);
        let bad = Tensor::zeros(&[15, 12]);
        assert!(matches!(net.encode_image(&mut g, &bad), Err(Error::Shape { .. })));
        let grid = image(1, &p).reshape(&[4, 4, 12]).unwrap();
        let again = net.encode_image(&mut g, &grid).unwrap();
        assert_eq!(out.value(&g), again.value(&g));
    }

    #[test]
    fn swapping_patches_changes_output() {
        let p = small_params();
        let mut g = Graph::inference();
        let net = p.bind(&mut g);
        let img = image(2, &p);
        let mut swapped = img.clone();
        let w = p.config.patch_pixels;
        for c in 0..w {
            swapped.data_mut().swap(c, 5 * w + c);
        }
        let a = net.encode_image(&mut g, &img).unwrap();
        let b = net.encode_image(&mut g, &swapped).unwrap();
        let (ta, tb) = (a.value(&g), b.value(&g));
        assert!(ta.row_slice(1).iter().zip(tb.row_slice(1)).any(|(x, y)| (x - y).abs() > 1e-9));
        assert!(ta.row_slice(6).iter().zip(tb.row_slice(6)).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn text_shape_and_determinism() {
        let p = small_params();
        let mut g = Graph::inference();
        let net = p.bind(&mut g);
        let a = net.encode_text(&mut g, &[10, 11, 12]).unwrap();
        assert_eq!(a.value(&g).shape(), &[4, 32]);
        let b = net.encode_text(&mut g, &[10, 11, 12]).unwrap();
        assert_eq!(a.value(&g), b.value(&g));
        let masked = net.encode_text(&mut g, &[crate::textproc::MASK_ID]).unwrap();
        assert_eq!(masked.value(&g).rows(), 2);
        // Out-of-vocabulary ids read as [UNK].
        let unk = net.encode_text(&mut g, &[UNK_ID]).unwrap();
        let oov = net.encode_text(&mut g, &[999]).unwrap();
        assert_eq!(unk.value(&g), oov.value(&g));
    }

    #[test]
    fn cross_encode_trace_is_row_stochastic() {
        let p = small_params();
        let mut g = Graph::inference();
        let net = p.bind(&mut g);
        let img = net.encode_image(&mut g, &image(3, &p)).unwrap();
        let mem = net.image_memory(&mut g, img).unwrap();
        let txt = net.encode_text(&mut g, &[10, 20, 30, 5]).unwrap();
        let fused = net.cross_encode(&mut g, txt, &mem, Some(3)).unwrap();
        assert_eq!(g.value(fused.reps).shape(), &[5, 32]);
        let trace = fused.trace.unwrap();
        assert_eq!(trace.layer, 3);
        assert_eq!(trace.num_heads(), 4);
        for head in &trace.heads {
            assert_eq!(head.a.shape(), &[5, 17]);
            assert_eq!(head.v.shape(), &[17, 8]);
            for r in 0..5 {
                assert!((head.a.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!(net.cross_encode(&mut g, txt, &mem, Some(7)).is_err());
        assert!(net.cross_encode(&mut g, txt, &mem, Some(0)).is_err());
        let untraced = net.cross_encode(&mut g, txt, &mem, None).unwrap();
        assert!(untraced.trace.is_none());
        assert_eq!(g.value(untraced.reps), g.value(fused.reps));
    }

    #[test]
    fn text_and_phrase_streams_share_cross_parameters() {
        let p = small_params();
        let mut g = Graph::train();
        let net = p.bind(&mut g);
        let img = net.encode_image(&mut g, &image(4, &p)).unwrap();
        let mem = net.image_memory(&mut g, img).unwrap();
        let text = net.encode_text(&mut g, &[10, 11, 12, 13]).unwrap();
        let phrase = net.encode_text(&mut g, &[12, 13]).unwrap();
        let a = net.cross_encode(&mut g, text, &mem, None).unwrap();
        let b = net.cross_encode(&mut g, phrase, &mem, None).unwrap();
        let sa = net.fine_score(&mut g, &a).unwrap();
        let sb = net.fine_score(&mut g, &b).unwrap();
        let wq = net.var(p.layout.cross[0].cross_attn.wq);
        // Both streams hang off the same leaf.
        g.backward(sa).unwrap();
        let ga = g.grad(wq);
        g.zero_grad();
        g.backward(sb).unwrap();
        let gb = g.grad(wq);
        g.zero_grad();
        let total = g.add(sa, sb).unwrap();
        let total = g.sum(total);
        g.backward(total).unwrap();
        let both = g.grad(wq);
        for i in 0..both.numel() {
            assert!((both.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-12);
        }
        assert!(ga.max_abs() > 0.0 && gb.max_abs() > 0.0);
    }

    #[test]
    fn inference_allocates_no_gradients() {
        let p = small_params();
        let mut g = Graph::inference();
        let net = p.bind(&mut g);
        let img = net.encode_image(&mut g, &image(5, &p)).unwrap();
        let _ = net.encode_text(&mut g, &[10]).unwrap();
        let mem = net.image_memory(&mut g, img).unwrap();
        let t = net.encode_text(&mut g, &[10]).unwrap();
        let _ = net.cross_encode(&mut g, t, &mem, Some(1)).unwrap();
        assert_eq!(g.grad_allocations(), 0);
    }
}
