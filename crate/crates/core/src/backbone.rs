//! Frozen multi-stream backbone: one vision encoder per modality, a shared
//! text encoder, and the projections into the joint vision-language space.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{BlockShape, Bound, LayerNorm, Linear, ParamId, ParamStore, Tensor, TransformerBlock, Var};
use crate::prompt::assemble_sequence;

pub const NUM_MODALITIES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Nir,
    Tir,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [Modality::Rgb, Modality::Nir, Modality::Tir];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::Index {
            what: "modality",
            index: i,
            len: NUM_MODALITIES,
        })
    }

    /// The attribute word naming this modality in its text prompt.
    pub fn word(self) -> &'static str {
        match self {
            Modality::Rgb => "visible",
            Modality::Nir => "near-infrared",
            Modality::Tir => "thermal-infrared",
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Nir => "nir",
            Modality::Tir => "tir",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "nir" => Ok(Modality::Nir),
            "tir" => Ok(Modality::Tir),
            other => Err(Error::Lookup(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ObjectKind {
    #[default]
    Person,
    Vehicle,
}

impl ObjectKind {
    pub fn word(self) -> &'static str {
        match self {
            ObjectKind::Person => "person",
            ObjectKind::Vehicle => "vehicle",
        }
    }
}

impl FromStr for ObjectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "person" => Ok(ObjectKind::Person),
            "vehicle" => Ok(ObjectKind::Vehicle),
            other => Err(Error::Config(format!("unknown object kind {other:?}"))),
        }
    }
}

/// Closed whitespace vocabulary covering the three prompt sentences.
pub const VOCAB: [&str; 8] = [
    "a",
    "visible",
    "near-infrared",
    "thermal-infrared",
    "photo",
    "of",
    "person",
    "vehicle",
];

pub fn text_prompt(modality: Modality, object: ObjectKind) -> String {
    format!("a {} photo of a {}", modality.word(), object.word())
}

pub fn tokenize(sentence: &str) -> Result<Vec<usize>> {
    sentence
        .split_whitespace()
        .map(|w| {
            VOCAB
                .iter()
                .position(|v| *v == w)
                .ok_or_else(|| Error::Lookup(format!("word {w:?} is not in the vocabulary")))
        })
        .collect()
}

/// Tokens per text prompt.
pub const TEXT_TOKENS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Encoder depth L (vision and text).
    pub layers: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub d_e: usize,
    pub heads: usize,
    /// Patches per image side.
    pub grid: usize,
    /// Pixels per patch side.
    pub patch: usize,
    pub channels: usize,
    /// FFN hidden width as a multiple of the token width.
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            d_v: 32,
            d_t: 32,
            d_e: 32,
            heads: 4,
            grid: 2,
            patch: 4,
            channels: 1,
            ffn_mult: 2,
        }
    }
}

impl EncoderConfig {
    pub fn patch_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn image_side(&self) -> usize {
        self.grid * self.patch
    }

    pub fn image_len(&self) -> usize {
        self.image_side() * self.image_side() * self.channels
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn vision_block(&self) -> BlockShape {
        BlockShape {
            width: self.d_v,
            hidden: self.d_v * self.ffn_mult,
            heads: self.heads,
        }
    }

    pub fn text_block(&self) -> BlockShape {
        BlockShape {
            width: self.d_t,
            hidden: self.d_t * self.ffn_mult,
            heads: self.heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("d_e", self.d_e),
            ("heads", self.heads),
            ("grid", self.grid),
            ("patch", self.patch),
            ("channels", self.channels),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.vision_block().validate()?;
        self.text_block().validate()
    }

    /// Frozen parameter count of the backbone built from this config.
    pub fn frozen_count(&self) -> usize {
        let (d_v, d_t, d_e) = (self.d_v, self.d_t, self.d_e);
        let vision = Linear::param_count(self.patch_dim(), d_v)
            + self.patch_tokens() * d_v
            + d_v
            + self.layers * self.vision_block().param_count();
        let text = VOCAB.len() * d_t
            + TEXT_TOKENS * d_t
            + self.layers * self.text_block().param_count()
            + 2 * d_t
            + Linear::param_count(d_t, d_e);
        NUM_MODALITIES * (vision + Linear::param_count(d_v, d_e)) + text
    }
}

/// Index ranges of the `[cls | modality prompts | semantic prompts | patches]` blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    pub cls: Range<usize>,
    pub modal: Range<usize>,
    pub semantic: Range<usize>,
    pub patches: Range<usize>,
}

impl Segments {
    pub fn new(modal: usize, semantic: usize, patches: usize) -> Self {
        let m_end = 1 + modal;
        let s_end = m_end + semantic;
        Segments {
            cls: 0..1,
            modal: 1..m_end,
            semantic: m_end..s_end,
            patches: s_end..s_end + patches,
        }
    }

    pub fn total(&self) -> usize {
        self.patches.end
    }

    pub fn lengths(&self) -> (usize, usize, usize, usize) {
        (
            self.cls.len(),
            self.modal.len(),
            self.semantic.len(),
            self.patches.len(),
        )
    }
}

/// Concatenated token block with its segment boundaries.
#[derive(Clone, Debug)]
pub struct TokenSequence<'g> {
    pub tokens: Var<'g>,
    pub segments: Segments,
}

impl<'g> TokenSequence<'g> {
    /// Splits back into `(cls, modality prompts, semantic prompts, patches)`.
    pub fn disassemble(&self) -> Result<ModalityFeatures<'g>> {
        let s = &self.segments;
        if self.tokens.rows() != s.total() {
            return Err(Error::Integrity(format!(
                "sequence has {} tokens, segments cover {}",
                self.tokens.rows(),
                s.total()
            )));
        }
        Ok(ModalityFeatures {
            cls: self.tokens.slice_rows(s.cls.start, s.cls.end)?,
            modal: self.tokens.slice_rows(s.modal.start, s.modal.end)?,
            semantic: self.tokens.slice_rows(s.semantic.start, s.semantic.end)?,
            patches: self.tokens.slice_rows(s.patches.start, s.patches.end)?,
        })
    }
}

/// One modality's token blocks: cls `1×d_v`, modality prompts `M×d_v`,
/// semantic prompts `S×d_v`, patch tokens `T_v×d_v`.
#[derive(Clone, Copy, Debug)]
pub struct ModalityFeatures<'g> {
    pub cls: Var<'g>,
    pub modal: Var<'g>,
    pub semantic: Var<'g>,
    pub patches: Var<'g>,
}

impl<'g> ModalityFeatures<'g> {
    pub fn lengths(&self) -> (usize, usize, usize, usize) {
        (
            self.cls.rows(),
            self.modal.rows(),
            self.semantic.rows(),
            self.patches.rows(),
        )
    }
}

/// Encoder outputs for all three modalities plus their joint-space pairs.
#[derive(Clone, Debug)]
pub struct FeatureBundle<'g> {
    pub modalities: Vec<ModalityFeatures<'g>>,
    /// Text features `t_m`, `1×d_e`.
    pub text: Vec<Var<'g>>,
    /// Joint image features `z_m`, `1×d_e`.
    pub joint: Vec<Var<'g>>,
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch_proj: Linear,
    pub pos: ParamId,
    pub cls: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: EncoderConfig,
    pub object: ObjectKind,
    pub vision: Vec<VisionEncoder>,
    pub image_proj: Vec<Linear>,
    pub text: TextEncoder,
}

impl Backbone {
    /// Registers a randomly initialized, frozen backbone.
    pub fn register(
        store: &mut ParamStore,
        config: EncoderConfig,
        object: ObjectKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (d_v, d_t) = (config.d_v, config.d_t);
        let mut vision = Vec::with_capacity(NUM_MODALITIES);
        let mut image_proj = Vec::with_capacity(NUM_MODALITIES);
        for m in Modality::ALL {
            let prefix = format!("backbone/vision/{m}");
            let patch_proj =
                Linear::register(store, &format!("{prefix}/patch"), config.patch_dim(), d_v, true, rng)?;
            let pos = store.add(
                format!("{prefix}/pos"),
                Tensor::randn(&[config.patch_tokens(), d_v], 0.1, rng),
                true,
            )?;
            let cls = store.add(format!("{prefix}/cls"), Tensor::randn(&[1, d_v], 1.0, rng), true)?;
            let blocks = (0..config.layers)
                .map(|l| {
                    TransformerBlock::register(
                        store,
                        &format!("{prefix}/block{l}"),
                        config.vision_block(),
                        true,
                        false,
                        rng,
                    )
                })
                .collect::<Result<_>>()?;
            vision.push(VisionEncoder {
                patch_proj,
                pos,
                cls,
                blocks,
            });
            image_proj.push(Linear::register(
                store,
                &format!("backbone/image_proj/{m}"),
                d_v,
                config.d_e,
                true,
                rng,
            )?);
        }
        let token_embed = store.add(
            "backbone/text/token_embed",
            Tensor::randn(&[VOCAB.len(), d_t], 1.0, rng),
            true,
        )?;
        let pos = store.add(
            "backbone/text/pos",
            Tensor::randn(&[TEXT_TOKENS, d_t], 0.1, rng),
            true,
        )?;
        let blocks = (0..config.layers)
            .map(|l| {
                TransformerBlock::register(
                    store,
                    &format!("backbone/text/block{l}"),
                    config.text_block(),
                    true,
                    false,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let ln_final = LayerNorm::register(store, "backbone/text/ln_final", d_t, true)?;
        let proj = Linear::register(store, "backbone/text_proj", d_t, config.d_e, true, rng)?;
        Ok(Backbone {
            config,
            object,
            vision,
            image_proj,
            text: TextEncoder {
                token_embed,
                pos,
                blocks,
                ln_final,
                proj,
            },
        })
    }

    /// Frozen word embedding of a modality's attribute word (`1×d_t`).
    pub fn word_embedding(&self, store: &ParamStore, modality: Modality) -> Result<Tensor> {
        let idx = tokenize(modality.word())?[0];
        let table = &store.get(self.text.token_embed).value;
        Tensor::matrix(1, table.cols(), table.row(idx).to_vec())
    }

    /// Frozen per-patch linear projection plus positional embedding.
    pub fn patch_embed<'g>(&self, p: &Bound<'g>, image: &[f64], modality: Modality) -> Result<Var<'g>> {
        let cfg = &self.config;
        if image.len() != cfg.image_len() {
            return Err(Error::dim("patch_embed", &[image.len()], &[cfg.image_len()]));
        }
        let enc = &self.vision[modality.index()];
        let patches = patchify(image, cfg);
        let x = p.graph().constant(patches);
        enc.patch_proj.forward(p, x)?.add(p[enc.pos])
    }

    pub fn cls<'g>(&self, p: &Bound<'g>, modality: Modality) -> Var<'g> {
        p[self.vision[modality.index()].cls]
    }

    /// Prompt-free forward: `[c, E]` through every layer.
    pub fn encode_plain<'g>(
        &self,
        p: &Bound<'g>,
        modality: Modality,
        cls: Var<'g>,
        patches: Var<'g>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let enc = &self.vision[modality.index()];
        let g = cls.graph();
        let mut x = g.concat_rows(&[cls, patches])?;
        for block in &enc.blocks {
            x = block.forward(p, x)?;
        }
        let t = x.rows();
        Ok((x.slice_rows(0, 1)?, x.slice_rows(1, t)?))
    }

    /// Deep-prompted forward. At every layer the incoming prompt tokens are
    /// replaced by that layer's fresh prompts; only the last layer's prompt
    /// outputs are kept.
    pub fn encode_vision<'g>(
        &self,
        p: &Bound<'g>,
        modality: Modality,
        cls: Var<'g>,
        patches: Var<'g>,
        prompts_per_layer: &[(Var<'g>, Var<'g>)],
    ) -> Result<ModalityFeatures<'g>> {
        let enc = &self.vision[modality.index()];
        if prompts_per_layer.len() != enc.blocks.len() {
            return Err(Error::Config(format!(
                "expected {} prompt layers, got {}",
                enc.blocks.len(),
                prompts_per_layer.len()
            )));
        }
        let (mut c, mut e) = (cls, patches);
        let mut last = None;
        for (block, &(mp, sp)) in enc.blocks.iter().zip(prompts_per_layer) {
            let seq = assemble_sequence(c, mp, sp, e)?;
            let out = TokenSequence {
                tokens: block.forward(p, seq.tokens)?,
                segments: seq.segments,
            }
            .disassemble()?;
            c = out.cls;
            e = out.patches;
            last = Some(out);
        }
        last.ok_or_else(|| Error::Config("encoder has no layers".into()))
    }

    /// Frozen text feature `t_m` (`1×d_e`) for a modality's fixed prompt.
    pub fn encode_text<'g>(&self, p: &Bound<'g>, modality: Modality) -> Result<Var<'g>> {
        let ids = tokenize(&text_prompt(modality, self.object))?;
        let table = p[self.text.token_embed];
        let rows = ids
            .iter()
            .map(|&i| table.slice_rows(i, i + 1))
            .collect::<Result<Vec<_>>>()?;
        let mut x = table.graph().concat_rows(&rows)?.add(p[self.text.pos])?;
        for block in &self.text.blocks {
            x = block.forward(p, x)?;
        }
        let x = self.text.ln_final.forward(p, x)?;
        let last = x.rows() - 1;
        self.text.proj.forward(p, x.slice_rows(last, last + 1)?)
    }

    /// Frozen `ImageProj` of a cls token into the joint space.
    pub fn project_joint<'g>(&self, p: &Bound<'g>, modality: Modality, cls: Var<'g>) -> Result<Var<'g>> {
        if cls.cols() != self.config.d_v {
            return Err(Error::dim("project_joint", &cls.shape(), &[self.config.d_v]));
        }
        self.image_proj[modality.index()].forward(p, cls)
    }
}

/// `T_v × (patch² · channels)` matrix, patches in raster order, each
/// flattened as `(dy, dx, channel)`.
pub fn patchify(image: &[f64], cfg: &EncoderConfig) -> Tensor {
    let (side, ps, ch) = (cfg.image_side(), cfg.patch, cfg.channels);
    let mut data = Vec::with_capacity(image.len());
    for py in 0..cfg.grid {
        for px in 0..cfg.grid {
            for dy in 0..ps {
                for dx in 0..ps {
                    let (y, x) = (py * ps + dy, px * ps + dx);
                    let base = (y * side + x) * ch;
                    data.extend_from_slice(&image[base..base + ch]);
                }
            }
        }
    }
    Tensor::matrix(cfg.patch_tokens(), cfg.patch_dim(), data).expect("patch layout")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_layout() {
        let s = Segments::new(1, 32, 16);
        assert_eq!((s.cls, s.modal, s.semantic, s.patches), (0..1, 1..2, 2..34, 34..50));
        let s = Segments::new(0, 32, 16);
        assert_eq!((s.modal, s.semantic, s.patches), (1..1, 1..33, 33..49));
    }

    #[test]
    fn prompts_tokenize_to_same_length() {
        for m in Modality::ALL {
            for o in [ObjectKind::Person, ObjectKind::Vehicle] {
                assert_eq!(tokenize(&text_prompt(m, o)).unwrap().len(), TEXT_TOKENS);
            }
        }
        assert!(tokenize("a purple photo").is_err());
    }

    #[test]
    fn modality_parse() {
        assert_eq!("NIR".parse::<Modality>().unwrap(), Modality::Nir);
        assert!(matches!("uv".parse::<Modality>(), Err(Error::Lookup(_))));
        assert!(Modality::from_index(3).is_err());
    }
}
