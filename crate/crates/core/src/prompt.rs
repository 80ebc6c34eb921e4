//! Decoupled visual prompts.
//!
//! Modality prompts are projected, layer by layer, from a trainable
//! embedding of the modality's attribute word. Semantic prompts are free
//! trainable token blocks, one per modality and layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{Modality, Segments, TokenSequence, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptConfig {
    /// Modality-prompt tokens M per layer (0 disables).
    pub modal_len: usize,
    /// Semantic-prompt tokens S per layer (0 disables).
    pub semantic_len: usize,
    pub layers: usize,
    pub d_v: usize,
    pub d_t: usize,
    /// One projection shared by all layers instead of one per layer.
    pub shared_projection: bool,
}

impl PromptConfig {
    pub fn projection_count(&self) -> usize {
        if self.modal_len == 0 {
            0
        } else if self.shared_projection {
            1
        } else {
            self.layers
        }
    }

    pub fn modality_param_count(&self) -> usize {
        if self.modal_len == 0 {
            return 0;
        }
        NUM_MODALITIES * self.modal_len * self.d_t
            + self.projection_count() * Linear::param_count(self.d_t, self.d_v)
    }

    pub fn semantic_param_count(&self) -> usize {
        NUM_MODALITIES * self.layers * self.semantic_len * self.d_v
    }
}

#[derive(Clone, Debug)]
pub struct PromptBank {
    pub config: PromptConfig,
    /// `semantic[m][l]`: `S×d_v`.
    pub semantic: Vec<Vec<ParamId>>,
    /// `modal_embed[m]`: `M×d_t`; empty when M = 0.
    pub modal_embed: Vec<ParamId>,
    /// Projections 𝒫 from `d_t` to `d_v`, shared by all modalities.
    pub proj: Vec<Linear>,
}

/// Uniform `[-a, a]` with `a = sqrt(6 / (S + d_v))`, for every modality
/// and layer. Returns `[modality][layer]`.
pub fn init_semantic_prompts(s: usize, layers: usize, d_v: usize, seed: u64) -> Vec<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = semantic_init_bound(s, d_v);
    Modality::ALL
        .iter()
        .map(|_| {
            (0..layers)
                .map(|_| Tensor::uniform(&[s, d_v], bound, &mut rng))
                .collect()
        })
        .collect()
}

pub fn semantic_init_bound(s: usize, d_v: usize) -> f64 {
    if s + d_v == 0 {
        0.0
    } else {
        (6.0 / (s + d_v) as f64).sqrt()
    }
}

impl PromptBank {
    /// `word_embeddings[m]` is the `1×d_t` vocabulary embedding of modality
    /// m's attribute word; it seeds the trainable modal embedding.
    pub fn register(
        store: &mut ParamStore,
        config: PromptConfig,
        word_embeddings: &[Tensor],
        seed: u64,
    ) -> Result<Self> {
        if word_embeddings.len() != NUM_MODALITIES {
            return Err(Error::Config("need one word embedding per modality".into()));
        }
        let mut semantic = vec![Vec::new(); NUM_MODALITIES];
        if config.semantic_len > 0 {
            let init = init_semantic_prompts(config.semantic_len, config.layers, config.d_v, seed);
            for (m, layers) in Modality::ALL.iter().zip(init) {
                for (l, t) in layers.into_iter().enumerate() {
                    semantic[m.index()].push(store.add(format!("prompt/semantic/{m}/{l}"), t, false)?);
                }
            }
        }

        let mut modal_embed = Vec::new();
        let mut proj = Vec::new();
        if config.modal_len > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6461_6c00);
            let noise = Normal::new(0.0, 0.02).expect("std");
            for (m, word) in Modality::ALL.iter().zip(word_embeddings) {
                if word.len() != config.d_t {
                    return Err(Error::dim("modal_embed", word.shape(), &[config.d_t]));
                }
                let mut data = Vec::with_capacity(config.modal_len * config.d_t);
                for row in 0..config.modal_len {
                    for &w in word.data() {
                        data.push(if row == 0 { w } else { w + noise.sample(&mut rng) });
                    }
                }
                let t = Tensor::matrix(config.modal_len, config.d_t, data)?;
                modal_embed.push(store.add(format!("prompt/modal_embed/{m}"), t, false)?);
            }
            for l in 0..config.projection_count() {
                proj.push(Linear::register(
                    store,
                    &format!("prompt/proj/{l}"),
                    config.d_t,
                    config.d_v,
                    false,
                    &mut rng,
                )?);
            }
        }
        Ok(PromptBank {
            config,
            semantic,
            modal_embed,
            proj,
        })
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.layers {
            return Err(Error::Index {
                what: "prompt layer",
                index: layer,
                len: self.config.layers,
            });
        }
        Ok(())
    }

    /// Trainable modal-word tokens, `M×d_t`.
    pub fn embed_modal_words<'g>(&self, p: &Bound<'g>, modality: Modality) -> Option<Var<'g>> {
        self.modal_embed.get(modality.index()).map(|&id| p[id])
    }

    /// `𝒫_l(embed(m))`, `M×d_v`; an empty block when M = 0.
    pub fn project_modal_prompt<'g>(&self, p: &Bound<'g>, modality: Modality, layer: usize) -> Result<Var<'g>> {
        self.check_layer(layer)?;
        match self.embed_modal_words(p, modality) {
            Some(words) => {
                let proj = if self.config.shared_projection { &self.proj[0] } else { &self.proj[layer] };
                proj.forward(p, words)
            }
            None => Ok(empty_block(p, self.config.d_v)),
        }
    }

    /// `S×d_v` semantic prompt of modality m at layer l; empty when S = 0.
    pub fn semantic_prompt<'g>(&self, p: &Bound<'g>, modality: Modality, layer: usize) -> Result<Var<'g>> {
        self.check_layer(layer)?;
        Ok(match self.semantic[modality.index()].get(layer) {
            Some(&id) => p[id],
            None => empty_block(p, self.config.d_v),
        })
    }

    /// `(modality prompt, semantic prompt)` for every layer.
    pub fn layer_prompts<'g>(&self, p: &Bound<'g>, modality: Modality) -> Result<Vec<(Var<'g>, Var<'g>)>> {
        (0..self.config.layers)
            .map(|l| Ok((self.project_modal_prompt(p, modality, l)?, self.semantic_prompt(p, modality, l)?)))
            .collect()
    }
}

fn empty_block<'g>(p: &Bound<'g>, width: usize) -> Var<'g> {
    p.graph().constant(Tensor::zeros(&[0, width]))
}

/// Concatenates `[cls, modality prompts, semantic prompts, patches]`.
pub fn assemble_sequence<'g>(
    cls: Var<'g>,
    modal: Var<'g>,
    semantic: Var<'g>,
    patches: Var<'g>,
) -> Result<TokenSequence<'g>> {
    let d = cls.cols();
    for v in [modal, semantic, patches] {
        if v.cols() != d || v.shape().len() != 2 {
            return Err(Error::dim("assemble_sequence", &cls.shape(), &v.shape()));
        }
    }
    if cls.rows() != 1 {
        return Err(Error::dim("assemble_sequence", &cls.shape(), &[1, d]));
    }
    let tokens = cls.graph().concat_rows(&[cls, modal, semantic, patches])?;
    Ok(TokenSequence {
        tokens,
        segments: Segments::new(modal.rows(), semantic.rows(), patches.rows()),
    })
}
