//! The assembled model: frozen backbone, prompt bank, interaction stack,
//! classifier head and the optional text-alignment anchors.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, EncoderConfig, Modality, ModalityFeatures, ObjectKind, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::interaction::Interaction;
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::objectives::{BatchFeatures, JointPair};
use crate::prompt::{PromptBank, PromptConfig};

/// Which prompt components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub semantic: bool,
    pub modality: bool,
    pub bind: bool,
    pub text: bool,
}

impl Components {
    pub const FULL: Components = Components {
        semantic: true,
        modality: true,
        bind: true,
        text: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.bind && !self.semantic {
            return Err(Error::Config("bind prompt requires semantic prompts".into()));
        }
        if self.modality && !self.semantic {
            return Err(Error::Config("modality prompts require semantic prompts".into()));
        }
        Ok(())
    }

    /// Parses a `+`-separated list such as `semantic+bind`; `none` is empty.
    pub fn parse(s: &str) -> Result<Self> {
        let mut c = Components {
            semantic: false,
            modality: false,
            bind: false,
            text: false,
        };
        for part in s.split('+').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "semantic" => c.semantic = true,
                "modality" => c.modality = true,
                "bind" => c.bind = true,
                "text" => c.text = true,
                "none" => {}
                "full" => c = Components::FULL,
                other => return Err(Error::Config(format!("unknown component {other:?}"))),
            }
        }
        Ok(c)
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.semantic, "semantic"),
            (self.modality, "modality"),
            (self.bind, "bind"),
            (self.text, "text"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

/// Contrastive anchor set: the three modality sentences, or one learnable
/// offset per identity on top of each modality sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorMode {
    Modality,
    Identity,
}

impl fmt::Display for AnchorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorMode::Modality => "modality",
            AnchorMode::Identity => "identity",
        })
    }
}

impl FromStr for AnchorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modality" => Ok(AnchorMode::Modality),
            "identity" => Ok(AnchorMode::Identity),
            _ => Err(Error::Config(format!("unknown anchor mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub object: ObjectKind,
    pub semantic_len: usize,
    pub modal_len: usize,
    pub depth: usize,
    pub components: Components,
    pub anchor_mode: AnchorMode,
    pub shared_projection: bool,
    pub num_ids: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.components.validate()?;
        if self.num_ids == 0 {
            return Err(Error::Config("num_ids must be positive".into()));
        }
        Ok(())
    }

    pub fn prompt_config(&self) -> PromptConfig {
        let c = self.components;
        PromptConfig {
            modal_len: if c.modality { self.modal_len } else { 0 },
            semantic_len: if c.semantic { self.semantic_len } else { 0 },
            layers: self.encoder.layers,
            d_v: self.encoder.d_v,
            d_t: self.encoder.d_t,
            shared_projection: self.shared_projection,
        }
    }

    /// Interaction levels actually built: none unless the bind prompt is on
    /// and there are semantic tokens to bind.
    pub fn effective_depth(&self) -> usize {
        if self.components.bind && self.prompt_config().semantic_len > 0 {
            self.depth
        } else {
            0
        }
    }

    pub fn feature_dim(&self) -> usize {
        NUM_MODALITIES * self.encoder.d_v
    }

    /// Closed-form trainable counts per component.
    pub fn param_breakdown(&self) -> ParamBreakdown {
        let pc = self.prompt_config();
        let text = if self.components.text && self.anchor_mode == AnchorMode::Identity {
            NUM_MODALITIES * self.num_ids * self.encoder.d_e
        } else {
            0
        };
        ParamBreakdown {
            semantic: pc.semantic_param_count(),
            modality: pc.modality_param_count(),
            interaction: Interaction::param_count(self.effective_depth(), self.encoder.vision_block(), true),
            head: self.feature_dim() * self.num_ids,
            text,
            frozen: self.encoder.frozen_count(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub semantic: usize,
    pub modality: usize,
    pub interaction: usize,
    pub head: usize,
    pub text: usize,
    pub frozen: usize,
}

impl ParamBreakdown {
    pub fn trainable(&self) -> usize {
        self.semantic + self.modality + self.interaction + self.head + self.text
    }
}

/// Trainable/frozen split of a built model.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub trainable_count: usize,
    pub frozen_count: usize,
}

impl Partition {
    pub fn ratio(&self) -> f64 {
        let total = self.trainable_count + self.frozen_count;
        if total == 0 {
            0.0
        } else {
            self.trainable_count as f64 / total as f64
        }
    }
}

/// One tri-modal input, one flat `side×side×channels` grid per modality.
pub type Images<'a> = [&'a [f64]; NUM_MODALITIES];

/// Per-sample forward outputs.
#[derive(Clone, Debug)]
pub struct SampleOutput<'g> {
    /// Post-interaction features per modality.
    pub modalities: Vec<ModalityFeatures<'g>>,
    /// `1×3d_v` concatenated cls tokens.
    pub feature: Var<'g>,
    /// Joint-space image features `z_m` of the encoder cls tokens.
    pub joint: Vec<Var<'g>>,
}

#[derive(Clone, Debug)]
pub struct DmptModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub prompts: PromptBank,
    pub interaction: Interaction,
    /// `3d_v × N`, bias-free.
    pub head: ParamId,
    /// Per-modality `N×d_e` identity offsets (identity anchor mode only).
    pub text_offsets: Vec<ParamId>,
    /// Cached frozen text features, `3×d_e`.
    pub text_features: Tensor,
}

/// Independent RNG streams so one component's shape never perturbs
/// another's initialization.
fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

impl DmptModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::register(&mut store, config.encoder, config.object, &mut stream(seed, 1))?;
        let words = Modality::ALL
            .iter()
            .map(|&m| backbone.word_embedding(&store, m))
            .collect::<Result<Vec<_>>>()?;
        let prompts = PromptBank::register(&mut store, config.prompt_config(), &words, seed.wrapping_add(2))?;
        let interaction = Interaction::register(
            &mut store,
            config.effective_depth(),
            config.encoder.vision_block(),
            true,
            &mut stream(seed, 3),
        )?;
        let d = config.feature_dim();
        let mut rng = stream(seed, 4);
        let head = store.add(
            "head/weight",
            Tensor::randn(&[d, config.num_ids], 1.0 / (d as f64).sqrt(), &mut rng),
            false,
        )?;
        let mut text_offsets = Vec::new();
        if config.components.text && config.anchor_mode == AnchorMode::Identity {
            for m in Modality::ALL {
                text_offsets.push(store.add(
                    format!("text/offset/{m}"),
                    Tensor::randn(&[config.num_ids, config.encoder.d_e], 0.02, &mut rng),
                    false,
                )?);
            }
        }

        let mut model = DmptModel {
            config,
            store,
            backbone,
            prompts,
            interaction,
            head,
            text_offsets,
            text_features: Tensor::zeros(&[NUM_MODALITIES, config.encoder.d_e]),
        };
        model.refresh_text_features()?;
        Ok(model)
    }

    /// Recomputes the cached `3×d_e` text features from the frozen weights.
    pub fn refresh_text_features(&mut self) -> Result<()> {
        let g = Graph::new();
        let p = self.store.bind(&g);
        let rows = Modality::ALL
            .iter()
            .map(|&m| self.backbone.encode_text(&p, m))
            .collect::<Result<Vec<_>>>()?;
        self.text_features = g.concat_rows(&rows)?.value();
        Ok(())
    }

    /// Per-modality layer prompts, built once per graph and shared by every
    /// sample in a batch.
    pub fn layer_prompts<'g>(&self, p: &Bound<'g>) -> Result<Vec<Vec<(Var<'g>, Var<'g>)>>> {
        Modality::ALL.iter().map(|&m| self.prompts.layer_prompts(p, m)).collect()
    }

    pub fn forward_sample<'g>(
        &self,
        p: &Bound<'g>,
        prompts: &[Vec<(Var<'g>, Var<'g>)>],
        images: Images<'_>,
        with_joint: bool,
    ) -> Result<SampleOutput<'g>> {
        let mut encoded = Vec::with_capacity(NUM_MODALITIES);
        let mut joint = Vec::new();
        for m in Modality::ALL {
            let e = self.backbone.patch_embed(p, images[m.index()], m)?;
            let cls = self.backbone.cls(p, m);
            let f = self.backbone.encode_vision(p, m, cls, e, &prompts[m.index()])?;
            if with_joint {
                joint.push(self.backbone.project_joint(p, m, f.cls)?);
            }
            encoded.push(f);
        }
        let modalities = self.interaction.forward(p, encoded)?;
        let cls: Vec<Var<'g>> = modalities.iter().map(|f| f.cls).collect();
        let feature = p.graph().concat_cols(&cls)?;
        Ok(SampleOutput {
            modalities,
            feature,
            joint,
        })
    }

    /// Features, logits and joint pairs for a labelled batch.
    pub fn forward_batch<'g>(&self, p: &Bound<'g>, batch: &[Images<'_>], labels: &[usize]) -> Result<BatchFeatures<'g>> {
        if batch.len() != labels.len() {
            return Err(Error::dim("forward_batch", &[batch.len()], &[labels.len()]));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.config.num_ids) {
            return Err(Error::Index {
                what: "identity label",
                index: y,
                len: self.config.num_ids,
            });
        }
        let g = p.graph();
        let with_joint = self.config.components.text;
        let prompts = self.layer_prompts(p)?;
        let outputs = batch
            .iter()
            .map(|images| self.forward_sample(p, &prompts, *images, with_joint))
            .collect::<Result<Vec<_>>>()?;
        let features = g.concat_rows(&outputs.iter().map(|o| o.feature).collect::<Vec<_>>())?;
        let logits = features.matmul(p[self.head])?;
        let mut joint = Vec::new();
        if with_joint {
            for m in Modality::ALL {
                let z = g.concat_rows(&outputs.iter().map(|o| o.joint[m.index()]).collect::<Vec<_>>())?;
                let pair = match self.config.anchor_mode {
                    AnchorMode::Modality => JointPair {
                        z,
                        anchors: g.constant(self.text_features.clone()),
                        targets: vec![m.index(); batch.len()],
                    },
                    AnchorMode::Identity => {
                        let t = g.constant(Tensor::vector(self.text_features.row(m.index()).to_vec()));
                        JointPair {
                            z,
                            anchors: p[self.text_offsets[m.index()]].add_row(t)?,
                            targets: labels.to_vec(),
                        }
                    }
                };
                joint.push(pair);
            }
        }
        Ok(BatchFeatures {
            features,
            labels: labels.to_vec(),
            logits,
            joint,
        })
    }

    /// Unit-norm `3d_v` retrieval feature of one sample.
    pub fn extract_feature(&self, images: Images<'_>) -> Result<Vec<f64>> {
        for (m, img) in Modality::ALL.iter().zip(images) {
            if img.is_empty() {
                return Err(Error::Input(format!("sample has no {m} image")));
            }
        }
        let g = Graph::new();
        let p = self.store.bind(&g);
        let prompts = self.layer_prompts(&p)?;
        let out = self.forward_sample(&p, &prompts, images, false)?;
        crate::retrieval::l2_normalize(out.feature.value().data())
    }

    pub fn parameter_partition(&self) -> Result<Partition> {
        let mut trainable = Vec::new();
        let mut frozen = Vec::new();
        let (mut tc, mut fc) = (0, 0);
        for (_, param) in self.store.iter() {
            let is_backbone = param.name.starts_with("backbone/");
            if is_backbone != param.frozen {
                return Err(Error::Integrity(format!(
                    "parameter {} is {} but belongs to the {} set",
                    param.name,
                    if param.frozen { "frozen" } else { "trainable" },
                    if is_backbone { "backbone" } else { "prompt" }
                )));
            }
            if param.frozen {
                fc += param.value.len();
                frozen.push(param.name.clone());
            } else {
                tc += param.value.len();
                trainable.push(param.name.clone());
            }
        }
        Ok(Partition {
            trainable,
            frozen,
            trainable_count: tc,
            frozen_count: fc,
        })
    }
}
