use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{Rng, Tensor};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat, ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// All entries concatenated in id order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites every entry from a flat vector produced by [`ParamStore::flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Argument(format!("expected {} values, got {}", self.numel(), flat.len())));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    /// `in × out`
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Multi-head attention. Each `d × d` projection holds the per-head
/// `d × d'` matrices side by side as column blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedForwardParams {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub attn: AttentionParams,
    pub ln_attn: LayerNormParams,
    pub ff: FeedForwardParams,
    pub ln_ff: LayerNormParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossBlock {
    pub self_attn: AttentionParams,
    pub ln_self: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln_cross: LayerNormParams,
    pub ff: FeedForwardParams,
    pub ln_ff: LayerNormParams,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderParams {
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub ln_emb: LayerNormParams,
    pub blocks: Vec<EncoderBlock>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderParams {
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos_emb: ParamId,
    pub ln_emb: LayerNormParams,
    pub blocks: Vec<EncoderBlock>,
}

/// Typed view over the ids of every model tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub text: TextEncoderParams,
    pub image: ImageEncoderParams,
    pub cross: Vec<CrossBlock>,
    /// `d' × 1` masked-token score head.
    pub score_head: ParamId,
    /// `d × 1` fine-similarity head.
    pub itm_head: ParamId,
    pub proj_image: Linear,
    pub proj_text: Linear,
    /// Separate phrase projection, present only when not shared with text.
    pub proj_phrase: Option<Linear>,
    pub mpm_hidden: Linear,
    pub mpm_out: Linear,
    /// `1 × 1` log temperature.
    pub log_tau: ParamId,
}

impl Layout {
    pub fn phrase_projection(&self) -> Linear {
        self.proj_phrase.unwrap_or(self.proj_text)
    }

    /// Ids mirrored by the momentum encoders: both unimodal encoders and the
    /// coarse projections.
    pub fn momentum_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, name, _)| {
                name.starts_with("text.") || name.starts_with("image.") || name.starts_with("proj.")
            })
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Parameters owned by the local-alignment and masked-phrase heads.
    pub fn local_head_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.score_head, self.mpm_hidden.w, self.mpm_out.w];
        ids.extend(self.mpm_hidden.b);
        ids.extend(self.mpm_out.b);
        ids
    }
}

/// Model parameters: configuration, tensor store and typed layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: Layout,
}

pub const INIT_TAU: f64 = 0.07;

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut Rng,
    std: f64,
}

impl Init<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let data = (0..rows * cols).map(|_| self.rng.truncated_normal(self.std)).collect();
        self.store.add(name, Tensor::from_parts(vec![rows, cols], data))
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[rows, cols]))
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize, bias: bool) -> Linear {
        Linear {
            w: self.weight(format!("{name}.w"), inp, out),
            b: bias.then(|| self.zeros(format!("{name}.b"), 1, out)),
        }
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> LayerNormParams {
        LayerNormParams {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::ones(&[1, d])),
            beta: self.zeros(format!("{name}.beta"), 1, d),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttentionParams {
        AttentionParams {
            wq: self.weight(format!("{name}.wq"), d, d),
            wk: self.weight(format!("{name}.wk"), d, d),
            wv: self.weight(format!("{name}.wv"), d, d),
            out: self.linear(&format!("{name}.out"), d, d, true),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, hidden: usize) -> FeedForwardParams {
        FeedForwardParams {
            up: self.linear(&format!("{name}.up"), d, hidden, true),
            down: self.linear(&format!("{name}.down"), hidden, d, true),
        }
    }

    fn encoder_block(&mut self, name: &str, cfg: &ModelConfig) -> EncoderBlock {
        EncoderBlock {
            attn: self.attention(&format!("{name}.attn"), cfg.d),
            ln_attn: self.layer_norm(&format!("{name}.ln_attn"), cfg.d),
            ff: self.feed_forward(&format!("{name}.ff"), cfg.d, cfg.d * cfg.ff_mult),
            ln_ff: self.layer_norm(&format!("{name}.ln_ff"), cfg.d),
        }
    }
}

impl Params {
    /// Truncated-normal weights, zero biases, unit LayerNorm gains, τ = 0.07.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let d = cfg.d;
        let mut init = Init {
            store: ParamStore::default(),
            rng,
            std: cfg.init_std,
        };

        let text = TextEncoderParams {
            token_emb: init.weight("text.token_emb".into(), cfg.vocab_size, d),
            pos_emb: init.weight("text.pos_emb".into(), cfg.max_text_len + 1, d),
            ln_emb: init.layer_norm("text.ln_emb", d),
            blocks: (0..cfg.n_self_layers)
                .map(|i| init.encoder_block(&format!("text.block{i}"), cfg))
                .collect(),
        };
        let image = ImageEncoderParams {
            patch_embed: init.linear("image.patch_embed", cfg.patch_pixels, d, true),
            cls: init.weight("image.cls".into(), 1, d),
            pos_emb: init.weight("image.pos_emb".into(), cfg.num_patches() + 1, d),
            ln_emb: init.layer_norm("image.ln_emb", d),
            blocks: (0..cfg.n_self_layers)
                .map(|i| init.encoder_block(&format!("image.block{i}"), cfg))
                .collect(),
        };
        let cross = (0..cfg.n_cross_layers)
            .map(|i| {
                let name = format!("cross.layer{}", i + 1);
                CrossBlock {
                    self_attn: init.attention(&format!("{name}.self_attn"), d),
                    ln_self: init.layer_norm(&format!("{name}.ln_self"), d),
                    cross_attn: init.attention(&format!("{name}.cross_attn"), d),
                    ln_cross: init.layer_norm(&format!("{name}.ln_cross"), d),
                    ff: init.feed_forward(&format!("{name}.ff"), d, d * cfg.ff_mult),
                    ln_ff: init.layer_norm(&format!("{name}.ln_ff"), d),
                }
            })
            .collect();
        let score_head = init.weight("head.score".into(), cfg.head_dim(), 1);
        let itm_head = init.weight("head.itm".into(), d, 1);
        let proj_image = init.linear("proj.image", d, cfg.proj_dim, false);
        let proj_text = init.linear("proj.text", d, cfg.proj_dim, false);
        let proj_phrase = (!cfg.share_phrase_projection).then(|| init.linear("proj.phrase", d, cfg.proj_dim, false));
        let mpm_hidden = init.linear("head.mpm_hidden", d, d, true);
        let mpm_out = init.linear("head.mpm_out", d, cfg.vocab_size, true);
        let log_tau = init.store.add("log_tau", Tensor::from_parts(vec![1, 1], vec![INIT_TAU.ln()]));

        Ok(Self {
            config: cfg.clone(),
            store: init.store,
            layout: Layout {
                text,
                image,
                cross,
                score_head,
                itm_head,
                proj_image,
                proj_text,
                proj_phrase,
                mpm_hidden,
                mpm_out,
                log_tau,
            },
        })
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.layout.log_tau).item().exp()
    }

    pub fn is_finite(&self) -> bool {
        self.store.iter().all(|(_, _, t)| t.is_finite())
    }

    /// Rebuilds the typed layout for a store produced by [`Params::init`]
    /// with the same configuration (used when loading checkpoints).
    pub fn with_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let template = Params::init(config, &mut Rng::seed(0))?;
        if template.store.len() != store.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                template.store.len(),
                store.len()
            )));
        }
        for ((_, tn, tt), (_, sn, st)) in template.store.iter().zip(store.iter()) {
            if tn != sn || tt.shape() != st.shape() {
                return Err(Error::Config(format!(
                    "tensor {sn} {:?} does not match expected {tn} {:?}",
                    st.shape(),
                    tt.shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            store,
            layout: template.layout,
        })
    }
}
