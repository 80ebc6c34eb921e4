//! Bind-prompt interaction layer.
//!
//! External interaction: the three modalities' semantic prompts are
//! projected into a shared space and averaged into a bind prompt, which
//! each modality then reads through a single-head cross-attention.
//! Internal interaction: each modality's full token sequence, with the
//! coupled semantic prompts swapped in, passes through its own
//! self-attention block. Levels stack to depth k.

use rand::Rng;

use crate::backbone::{Modality, ModalityFeatures, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::numerics::{scaled_dot_attention, BlockShape, Bound, Linear, ParamStore, Tensor, TransformerBlock, Var};
use crate::prompt::assemble_sequence;

/// Bind construction and B-to-M cross-attention parameters of one level.
#[derive(Clone, Debug)]
pub struct ExternalParams {
    /// `W∘_m`, per modality, into the pre-alignment space.
    pub pre_align: Vec<Linear>,
    /// `W_b`, shared, applied to the bind prompt.
    pub bind_proj: Linear,
    /// `W_m`, per modality, applied to that modality's semantic prompts.
    pub mod_proj: Vec<Linear>,
}

impl ExternalParams {
    pub fn param_count(width: usize) -> usize {
        (2 * NUM_MODALITIES + 1) * Linear::param_count(width, width)
    }
}

#[derive(Clone, Debug)]
pub struct InteractionLevel {
    /// Absent when the bind prompt is disabled.
    pub external: Option<ExternalParams>,
    /// `𝒮𝒜_m`, per modality.
    pub self_attn: Vec<TransformerBlock>,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Interaction {
    pub levels: Vec<InteractionLevel>,
}

impl Interaction {
    pub fn param_count(depth: usize, shape: BlockShape, with_bind: bool) -> usize {
        let external = if with_bind { ExternalParams::param_count(shape.width) } else { 0 };
        depth * (external + NUM_MODALITIES * shape.param_count())
    }

    /// `W∘` starts at the identity; `W_b`, `W_m` are Gaussian; every
    /// self-attention block starts as the identity map.
    pub fn register(
        store: &mut ParamStore,
        depth: usize,
        shape: BlockShape,
        with_bind: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        shape.validate()?;
        let d = shape.width;
        let mut levels = Vec::with_capacity(depth);
        for k in 0..depth {
            let external = if with_bind {
                let mut pre_align = Vec::new();
                for m in Modality::ALL {
                    pre_align.push(Linear::register_with(
                        store,
                        &format!("interaction/{k}/{m}/pre_align"),
                        Tensor::identity(d),
                        Tensor::zeros(&[d]),
                        false,
                    )?);
                }
                let bind_proj = Linear::register(store, &format!("interaction/{k}/bind/proj"), d, d, false, rng)?;
                let mut mod_proj = Vec::new();
                for m in Modality::ALL {
                    mod_proj.push(Linear::register(
                        store,
                        &format!("interaction/{k}/{m}/proj"),
                        d,
                        d,
                        false,
                        rng,
                    )?);
                }
                Some(ExternalParams {
                    pre_align,
                    bind_proj,
                    mod_proj,
                })
            } else {
                None
            };
            let self_attn = Modality::ALL
                .iter()
                .map(|m| {
                    TransformerBlock::register(store, &format!("interaction/{k}/{m}/self_attn"), shape, false, true, rng)
                })
                .collect::<Result<_>>()?;
            levels.push(InteractionLevel {
                external,
                self_attn,
                width: d,
            });
        }
        Ok(Interaction { levels })
    }

    /// Applies every level in order; the bind is re-derived at each level
    /// from the current semantic segments.
    pub fn forward<'g>(&self, p: &Bound<'g>, bundle: Vec<ModalityFeatures<'g>>) -> Result<Vec<ModalityFeatures<'g>>> {
        self.levels.iter().try_fold(bundle, |acc, level| level.forward(p, acc))
    }
}

impl InteractionLevel {
    /// `(1/3) Σ_m W∘_m(Ŝ_m)`.
    pub fn compute_bind<'g>(&self, p: &Bound<'g>, semantic: &[Var<'g>]) -> Result<Var<'g>> {
        let ext = self.external()?;
        if semantic.len() != NUM_MODALITIES {
            return Err(Error::Config(format!("bind needs {NUM_MODALITIES} prompt blocks")));
        }
        let shape = semantic[0].shape();
        let mut acc: Option<Var<'g>> = None;
        for (s, proj) in semantic.iter().zip(&ext.pre_align) {
            if s.shape() != shape {
                return Err(Error::dim("compute_bind", &shape, &s.shape()));
            }
            let projected = proj.forward(p, *s)?;
            acc = Some(match acc {
                None => projected,
                Some(a) => a.add(projected)?,
            });
        }
        Ok(acc.expect("three modalities").scale(1.0 / NUM_MODALITIES as f64))
    }

    /// `Ŝ_m + Softmax((Ŝ_m W_m)(bind W_b)ᵀ / √d_v) (bind W_b)`.
    pub fn b2m_cross_attention<'g>(
        &self,
        p: &Bound<'g>,
        bind: Var<'g>,
        semantic: Var<'g>,
        modality: Modality,
    ) -> Result<Var<'g>> {
        let ext = self.external()?;
        if bind.cols() != self.width || semantic.cols() != self.width {
            return Err(Error::dim("b2m_cross_attention", &bind.shape(), &semantic.shape()));
        }
        if semantic.rows() == 0 || bind.rows() == 0 {
            return Ok(semantic);
        }
        let bind_t = ext.bind_proj.forward(p, bind)?;
        let query = ext.mod_proj[modality.index()].forward(p, semantic)?;
        let attended = scaled_dot_attention(query, bind_t, bind_t, 1.0 / (self.width as f64).sqrt())?;
        semantic.add(attended)
    }

    /// Runs `[ĉ, M̂, S_b2m, Ê]` through the modality's self-attention block.
    pub fn internal_interaction<'g>(
        &self,
        p: &Bound<'g>,
        modality: Modality,
        features: ModalityFeatures<'g>,
    ) -> Result<ModalityFeatures<'g>> {
        let seq = assemble_sequence(features.cls, features.modal, features.semantic, features.patches)?;
        let tokens = self.self_attn[modality.index()].forward(p, seq.tokens)?;
        let out = crate::backbone::TokenSequence {
            tokens,
            segments: seq.segments,
        }
        .disassemble()?;
        if out.lengths() != features.lengths() {
            return Err(Error::Integrity("interaction changed segment lengths".into()));
        }
        Ok(out)
    }

    /// One full level: bind, B-to-M for every modality, then internal.
    pub fn forward<'g>(&self, p: &Bound<'g>, bundle: Vec<ModalityFeatures<'g>>) -> Result<Vec<ModalityFeatures<'g>>> {
        if bundle.len() != NUM_MODALITIES {
            return Err(Error::Config(format!("expected {NUM_MODALITIES} modalities, got {}", bundle.len())));
        }
        let coupled: Vec<Var<'g>> = match &self.external {
            Some(_) => {
                let semantic: Vec<Var<'g>> = bundle.iter().map(|f| f.semantic).collect();
                let bind = self.compute_bind(p, &semantic)?;
                Modality::ALL
                    .iter()
                    .map(|&m| self.b2m_cross_attention(p, bind, semantic[m.index()], m))
                    .collect::<Result<_>>()?
            }
            None => bundle.iter().map(|f| f.semantic).collect(),
        };
        Modality::ALL
            .iter()
            .zip(bundle)
            .zip(coupled)
            .map(|((&m, f), s)| self.internal_interaction(p, m, ModalityFeatures { semantic: s, ..f }))
            .collect()
    }

    fn external(&self) -> Result<&ExternalParams> {
        self.external
            .as_ref()
            .ok_or_else(|| Error::Config("bind prompt is disabled at this level".into()))
    }
}
