//! The dual-stream network: student and teacher encoders, the latent
//! hallucinator, auxiliary decoders, attention fusion and the classifier.
//!
//! Parameters live in a [`ParamStore`] under dotted names:
//!
//! | prefix           | component                                   |
//! |------------------|---------------------------------------------|
//! | `student.`       | H&E encoder                                 |
//! | `teacher.`       | IHC encoder (frozen) and its pretrain head  |
//! | `hallucinator.`  | residual latent mapping                     |
//! | `decoder.`       | nuclei and membrane heads                   |
//! | `fusion.`        | shared channel MLP and spatial gate         |
//! | `classifier.`    | final dense layer                           |

use std::fmt;
use std::str::FromStr;

use crate::error::{LgdError, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Graph, ParamStore, PoolKind, Tensor, Var};

/// Channel width of every latent feature map.
pub const FEATURE_CHANNELS: usize = 64;
/// Number of HER2 classes (0, 1+, 2+, 3+).
pub const NUM_CLASSES: usize = 4;

const ENCODER_WIDTHS: [usize; 4] = [16, 32, 64, FEATURE_CHANNELS];
/// Stages followed by 2x2 max pooling; the others keep resolution.
const POOLED_STAGES: [bool; 4] = [true, true, false, false];
const FUSION_HIDDEN: usize = 32;

/// Mechanism switches of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub hallucination: bool,
    pub attention: bool,
    pub nuclei_aux: bool,
    pub membrane_aux: bool,
}

impl Variant {
    pub const A: Variant = Variant::flags(false, false, false, false);
    pub const B: Variant = Variant::flags(true, false, false, false);
    pub const C: Variant = Variant::flags(true, true, false, false);
    pub const D: Variant = Variant::flags(true, true, true, false);
    pub const E: Variant = Variant::flags(true, true, false, true);
    pub const F: Variant = Variant::flags(true, true, true, true);

    const fn flags(hallucination: bool, attention: bool, nuclei: bool, membrane: bool) -> Self {
        Self {
            hallucination,
            attention,
            nuclei_aux: nuclei,
            membrane_aux: membrane,
        }
    }

    /// Feature distillation is active whenever the hallucinator is.
    pub fn distillation(&self) -> bool {
        self.hallucination
    }

    pub fn needs_teacher(&self) -> bool {
        self.distillation()
    }

    pub fn validate(&self) -> Result<()> {
        let needs_halluc = self.attention || self.nuclei_aux || self.membrane_aux;
        if needs_halluc && !self.hallucination {
            return Err(LgdError::InconsistentVariant(
                "attention and auxiliary decoders operate on hallucinated features".into(),
            ));
        }
        Ok(())
    }
}

/// Every trainable configuration: ablation variants A-F plus the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    A,
    B,
    C,
    D,
    E,
    F,
    /// Teacher encoder with its own head, trained on IHC alone.
    IhcUnimodal,
    /// One encoder over the 6-channel stack of H&E and real IHC.
    ImageConcat,
    /// Student and frozen teacher features fused with attention; needs real
    /// IHC at test time.
    FeatureConcat,
}

impl ModelKind {
    pub const ABLATION: [ModelKind; 6] = [
        ModelKind::A,
        ModelKind::B,
        ModelKind::C,
        ModelKind::D,
        ModelKind::E,
        ModelKind::F,
    ];

    pub fn variant(&self) -> Option<Variant> {
        Some(match self {
            ModelKind::A => Variant::A,
            ModelKind::B => Variant::B,
            ModelKind::C => Variant::C,
            ModelKind::D => Variant::D,
            ModelKind::E => Variant::E,
            ModelKind::F => Variant::F,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::A => "A",
            ModelKind::B => "B",
            ModelKind::C => "C",
            ModelKind::D => "D",
            ModelKind::E => "E",
            ModelKind::F => "F",
            ModelKind::IhcUnimodal => "ihc_unimodal",
            ModelKind::ImageConcat => "image_concat",
            ModelKind::FeatureConcat => "feature_concat",
        }
    }

    pub fn needs_teacher(&self) -> bool {
        match self {
            ModelKind::FeatureConcat => true,
            ModelKind::IhcUnimodal | ModelKind::ImageConcat => false,
            k => k.variant().is_some_and(|v| v.needs_teacher()),
        }
    }

    /// Whether inference reads the IHC image.
    pub fn uses_ihc_at_inference(&self) -> bool {
        matches!(
            self,
            ModelKind::IhcUnimodal | ModelKind::ImageConcat | ModelKind::FeatureConcat
        )
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = LgdError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "A" | "a" => ModelKind::A,
            "B" | "b" => ModelKind::B,
            "C" | "c" => ModelKind::C,
            "D" | "d" => ModelKind::D,
            "E" | "e" => ModelKind::E,
            "F" | "f" => ModelKind::F,
            "ihc_unimodal" => ModelKind::IhcUnimodal,
            "image_concat" => ModelKind::ImageConcat,
            "feature_concat" => ModelKind::FeatureConcat,
            other => {
                return Err(LgdError::InvalidArgument(format!(
                    "unknown variant `{other}`"
                )))
            }
        })
    }
}

/// Attention map and gated features of the fusion block.
#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    pub attention: Option<Var>,
    pub fused: Var,
}

/// A mini-batch of registered pairs with their supervision.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[N, 3, H, W]` normalised H&E.
    pub he: Tensor,
    /// `[N, 3, H, W]` normalised IHC.
    pub ihc: Tensor,
    pub labels: Vec<usize>,
    /// `[N, 1, g, g]` nuclei density targets.
    pub density: Tensor,
    /// `[N, 1, g, g]` membrane mask targets.
    pub mask: Tensor,
    /// Precomputed frozen-teacher features `[N, C, h, w]`; recomputed from
    /// `ihc` when absent.
    pub teacher_features: Option<Tensor>,
}

/// Everything one training pass produces; disabled parts are `None`.
#[derive(Debug, Clone, Copy)]
pub struct TrainOutputs {
    pub logits: Var,
    pub z_hat: Option<Var>,
    pub z_ihc: Option<Var>,
    pub nuclei: Option<Var>,
    pub membrane: Option<Var>,
}

/// Dual-stream network with its parameters.
#[derive(Debug, Clone)]
pub struct LgdNet {
    kind: ModelKind,
    params: ParamStore,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Gaussian init with the given std; each tensor gets its own stream derived
/// from `(seed, name)` so components initialise identically across variants.
fn gaussian(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut rng = SplitMix64::new(derive_seed(seed, name_hash(name)));
    Tensor::from_fn(shape, |_| (rng.normal() * std) as f32)
}

fn add_conv(
    store: &mut ParamStore,
    seed: u64,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<()> {
    let wname = format!("{prefix}.weight");
    let fan_in = (cin * k * k) as f64;
    store.insert(
        &wname,
        gaussian(seed, &wname, &[cout, cin, k, k], (2.0 / fan_in).sqrt()),
    )?;
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[cout]))
}

fn add_dense(store: &mut ParamStore, seed: u64, prefix: &str, din: usize, dout: usize, gain: f64) -> Result<()> {
    let wname = format!("{prefix}.weight");
    store.insert(
        &wname,
        gaussian(seed, &wname, &[din, dout], (gain / din as f64).sqrt()),
    )?;
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[dout]))
}

/// Adds a 4-stage encoder under `prefix`.
pub fn init_encoder(store: &mut ParamStore, seed: u64, prefix: &str, in_channels: usize) -> Result<()> {
    let mut cin = in_channels;
    for (i, &w) in ENCODER_WIDTHS.iter().enumerate() {
        add_conv(store, seed, &format!("{prefix}.conv{}", i + 1), cin, w, 3)?;
        cin = w;
    }
    Ok(())
}

/// Teacher encoder plus its temporary classification head.
pub fn init_teacher(seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    init_encoder(&mut store, seed, "teacher", 3)?;
    add_dense(&mut store, seed, "teacher.head", FEATURE_CHANNELS, NUM_CLASSES, 1.0)?;
    Ok(store)
}

impl LgdNet {
    /// Fresh network of the given kind. Teacher weights are not created;
    /// attach a pretrained teacher with [`LgdNet::attach_teacher`].
    pub fn new(kind: ModelKind, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        match kind {
            ModelKind::IhcUnimodal => params = init_teacher(seed)?,
            ModelKind::ImageConcat => {
                init_encoder(&mut params, seed, "student", 6)?;
                add_dense(&mut params, seed, "classifier", FEATURE_CHANNELS, NUM_CLASSES, 1.0)?;
            }
            ModelKind::FeatureConcat => {
                init_encoder(&mut params, seed, "student", 3)?;
                init_fusion(&mut params, seed)?;
                add_dense(&mut params, seed, "classifier", 2 * FEATURE_CHANNELS, NUM_CLASSES, 1.0)?;
            }
            k => {
                let v = k.variant().expect("ablation kind");
                v.validate()?;
                init_encoder(&mut params, seed, "student", 3)?;
                let width = if v.hallucination {
                    add_conv(&mut params, seed, "hallucinator.conv1", FEATURE_CHANNELS, FEATURE_CHANNELS, 3)?;
                    add_conv(&mut params, seed, "hallucinator.conv2", FEATURE_CHANNELS, FEATURE_CHANNELS, 3)?;
                    // zero residual branch: the mapping starts as the identity
                    params
                        .get_mut("hallucinator.conv2.weight")
                        .expect("just inserted")
                        .data_mut()
                        .fill(0.0);
                    2 * FEATURE_CHANNELS
                } else {
                    FEATURE_CHANNELS
                };
                if v.attention {
                    init_fusion(&mut params, seed)?;
                }
                if v.nuclei_aux {
                    add_conv(&mut params, seed, "decoder.nuclei", FEATURE_CHANNELS, 1, 1)?;
                    params
                        .get_mut("decoder.nuclei.weight")
                        .expect("just inserted")
                        .data_mut()
                        .fill(0.0);
                    params
                        .get_mut("decoder.nuclei.bias")
                        .expect("just inserted")
                        .data_mut()
                        .fill(0.1);
                }
                if v.membrane_aux {
                    add_conv(&mut params, seed, "decoder.membrane", FEATURE_CHANNELS, 1, 1)?;
                }
                add_dense(&mut params, seed, "classifier", width, NUM_CLASSES, 1.0)?;
            }
        }
        Ok(Self { kind, params })
    }

    /// Rebuilds a network from stored parameters, e.g. a stripped inference
    /// checkpoint.
    pub fn from_params(kind: ModelKind, params: ParamStore) -> Self {
        Self { kind, params }
    }

    /// Guesses the kind of a checkpoint from its parameter names.
    pub fn infer_kind(params: &ParamStore) -> Result<ModelKind> {
        let conv1_in = params
            .get("student.conv1.weight")
            .map(|w| w.shape()[1]);
        Ok(match conv1_in {
            None if params.contains("teacher.head.weight") => ModelKind::IhcUnimodal,
            None => {
                return Err(LgdError::InvalidArgument(
                    "checkpoint has neither a student nor a teacher encoder".into(),
                ))
            }
            Some(6) => ModelKind::ImageConcat,
            Some(_) if params.has_prefix("fusion.") && !params.has_prefix("hallucinator.") => {
                ModelKind::FeatureConcat
            }
            Some(_) => match (
                params.has_prefix("hallucinator."),
                params.has_prefix("fusion."),
            ) {
                (false, _) => ModelKind::A,
                (true, false) => ModelKind::B,
                (true, true) => {
                    // decoders may be stripped; C..F share one inference graph
                    match (
                        params.has_prefix("decoder.nuclei."),
                        params.has_prefix("decoder.membrane."),
                    ) {
                        (true, true) => ModelKind::F,
                        (true, false) => ModelKind::D,
                        (false, true) => ModelKind::E,
                        (false, false) => ModelKind::C,
                    }
                }
            },
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn variant(&self) -> Option<Variant> {
        self.kind.variant()
    }

    pub fn has_teacher(&self) -> bool {
        self.params.contains("teacher.conv1.weight")
    }

    /// Copies the pretrained teacher encoder in and freezes it. The
    /// pretraining head is not copied.
    pub fn attach_teacher(&mut self, teacher: &ParamStore) -> Result<()> {
        for i in 1..=ENCODER_WIDTHS.len() {
            for part in ["weight", "bias"] {
                let name = format!("teacher.conv{i}.{part}");
                let t = teacher.get(&name).ok_or_else(|| {
                    LgdError::NotPretrained(format!("teacher checkpoint lacks `{name}`"))
                })?;
                if self.params.contains(&name) {
                    *self.params.get_mut(&name).expect("present") = t.clone();
                } else {
                    self.params.insert(&name, t.clone())?;
                }
            }
        }
        self.params.set_trainable("teacher.", false);
        Ok(())
    }

    /// Parameters needed for H&E-only inference: teacher and decoders
    /// removed (IHC-reading baselines keep their teacher).
    pub fn inference_params(&self) -> ParamStore {
        let mut p = self.params.clone();
        p.remove_prefix("decoder.");
        if !self.kind.uses_ihc_at_inference() {
            p.remove_prefix("teacher.");
        }
        p.zero_grad();
        p
    }

    fn encoder(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &pooled) in POOLED_STAGES.iter().enumerate() {
            let w = g.param(&self.params, &format!("{prefix}.conv{}.weight", i + 1))?;
            let b = g.param(&self.params, &format!("{prefix}.conv{}.bias", i + 1))?;
            h = g.conv2d(h, w, b, 1, 1)?;
            h = g.relu(h);
            if pooled {
                h = g.pool2d(h, PoolKind::Max)?;
            }
        }
        Ok(h)
    }

    fn check_input(g: &Graph, x: Var, channels: usize) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != channels || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) {
            return Err(LgdError::InvalidShape(format!(
                "expected [N, {channels}, H, W] with H, W divisible by 4, got {s:?}"
            )));
        }
        Ok(())
    }

    /// `[N, 3, H, W]` H&E → `[N, 64, H/4, W/4]`.
    pub fn encode_student(&self, g: &mut Graph, x_he: Var) -> Result<Var> {
        let channels = if self.kind == ModelKind::ImageConcat { 6 } else { 3 };
        Self::check_input(g, x_he, channels)?;
        self.encoder(g, "student", x_he)
    }

    /// `[N, 3, H, W]` IHC → `[N, 64, H/4, W/4]` through the frozen teacher.
    pub fn encode_teacher(&self, g: &mut Graph, x_ihc: Var) -> Result<Var> {
        if !self.has_teacher() {
            return Err(LgdError::NotPretrained(
                "no teacher encoder attached; pretrain or load a teacher checkpoint".into(),
            ));
        }
        Self::check_input(g, x_ihc, 3)?;
        self.encoder(g, "teacher", x_ihc)
    }

    /// Residual latent mapping `z + f(z)`.
    pub fn hallucinate(&self, g: &mut Graph, z_he: Var) -> Result<Var> {
        let s = g.shape(z_he);
        if s.len() != 4 || s[1] != FEATURE_CHANNELS {
            return Err(LgdError::InvalidShape(format!(
                "hallucinator expects [N, {FEATURE_CHANNELS}, h, w], got {s:?}"
            )));
        }
        let w1 = g.param(&self.params, "hallucinator.conv1.weight")?;
        let b1 = g.param(&self.params, "hallucinator.conv1.bias")?;
        let w2 = g.param(&self.params, "hallucinator.conv2.weight")?;
        let b2 = g.param(&self.params, "hallucinator.conv2.bias")?;
        let h = g.conv2d(z_he, w1, b1, 1, 1)?;
        let h = g.relu(h);
        let h = g.conv2d(h, w2, b2, 1, 1)?;
        g.add(z_he, h)
    }

    fn head(&self, g: &mut Graph, z: Var, name: &str) -> Result<Var> {
        let w = g.param(&self.params, &format!("decoder.{name}.weight"))?;
        let b = g.param(&self.params, &format!("decoder.{name}.bias"))?;
        g.conv2d(z, w, b, 1, 0)
    }

    /// Nonnegative density estimate `[N, 1, h, w]`.
    pub fn decode_nuclei(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let h = self.head(g, z, "nuclei")?;
        Ok(g.relu(h))
    }

    /// Membrane probability map `[N, 1, h, w]`.
    pub fn decode_membrane(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let h = self.head(g, z, "membrane")?;
        Ok(g.sigmoid(h))
    }

    /// Concatenates the two feature maps and gates them with a
    /// spatial-channel attention map.
    ///
    /// Channel logits come from average- and max-pooled channel statistics
    /// passed through one shared two-layer MLP; a 1x1 convolution gives a
    /// spatial logit map. Their broadcast product goes through a sigmoid.
    pub fn fuse(&self, g: &mut Graph, z_he: Var, z_aux: Var) -> Result<FusionOutput> {
        if g.shape(z_he) != g.shape(z_aux) {
            return Err(LgdError::InvalidShape(format!(
                "fusion inputs differ: {:?} vs {:?}",
                g.shape(z_he),
                g.shape(z_aux)
            )));
        }
        let cat = g.concat(&[z_he, z_aux], 1)?;
        let shape = g.shape(cat).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let avg = g.mean(cat, &[2, 3])?;
        let mx = g.max(cat, &[2, 3])?;
        let w1 = g.param(&self.params, "fusion.mlp1.weight")?;
        let b1 = g.param(&self.params, "fusion.mlp1.bias")?;
        let w2 = g.param(&self.params, "fusion.mlp2.weight")?;
        let b2 = g.param(&self.params, "fusion.mlp2.bias")?;
        let mut channel = None;
        for stat in [avg, mx] {
            let h = g.dense(stat, w1, b1)?;
            let h = g.relu(h);
            let o = g.dense(h, w2, b2)?;
            channel = Some(match channel {
                None => o,
                Some(acc) => g.add(acc, o)?,
            });
        }
        let channel = g.reshape(channel.expect("two stats"), &[n, c, 1, 1])?;
        let ws = g.param(&self.params, "fusion.spatial.weight")?;
        let bs = g.param(&self.params, "fusion.spatial.bias")?;
        let spatial = g.conv2d(cat, ws, bs, 1, 0)?;
        let logits = g.mul(channel, spatial)?;
        let attention = g.sigmoid(logits);
        let fused = g.mul(cat, attention)?;
        Ok(FusionOutput {
            attention: Some(attention),
            fused,
        })
    }

    /// Global average pooling and a dense layer to 4 logits.
    pub fn classify(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let pooled = g.mean(fused, &[2, 3])?;
        let prefix = if self.kind == ModelKind::IhcUnimodal {
            "teacher.head"
        } else {
            "classifier"
        };
        let w = g.param(&self.params, &format!("{prefix}.weight"))?;
        let b = g.param(&self.params, &format!("{prefix}.bias"))?;
        g.dense(pooled, w, b)
    }

    fn teacher_features(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        match &batch.teacher_features {
            Some(t) => Ok(g.constant(t.clone())),
            None => {
                let x = g.constant(batch.ihc.clone());
                let z = self.encode_teacher(g, x)?;
                Ok(g.detach(z))
            }
        }
    }

    /// One training pass over `batch`.
    pub fn forward_train(&self, g: &mut Graph, batch: &Batch) -> Result<TrainOutputs> {
        let mut z_hat = None;
        let mut z_ihc = None;
        let mut nuclei = None;
        let mut membrane = None;
        let logits = match self.kind {
            ModelKind::IhcUnimodal => {
                let x = g.constant(batch.ihc.clone());
                let z = self.encoder(g, "teacher", x)?;
                self.classify(g, z)?
            }
            ModelKind::ImageConcat => {
                let he = g.constant(batch.he.clone());
                let ihc = g.constant(batch.ihc.clone());
                let x = g.concat(&[he, ihc], 1)?;
                let z = self.encode_student(g, x)?;
                self.classify(g, z)?
            }
            ModelKind::FeatureConcat => {
                let zt = self.teacher_features(g, batch)?;
                let x = g.constant(batch.he.clone());
                let z_he = self.encode_student(g, x)?;
                let f = self.fuse(g, z_he, zt)?;
                self.classify(g, f.fused)?
            }
            kind => {
                let v = kind.variant().expect("ablation kind");
                if v.needs_teacher() && !self.has_teacher() && batch.teacher_features.is_none() {
                    return Err(LgdError::NotPretrained(format!(
                        "variant {kind} distils from a teacher but none is attached"
                    )));
                }
                let x = g.constant(batch.he.clone());
                let z_he = self.encode_student(g, x)?;
                let fused = if v.hallucination {
                    let zh = self.hallucinate(g, z_he)?;
                    z_hat = Some(zh);
                    z_ihc = Some(self.teacher_features(g, batch)?);
                    if v.nuclei_aux {
                        nuclei = Some(self.decode_nuclei(g, zh)?);
                    }
                    if v.membrane_aux {
                        membrane = Some(self.decode_membrane(g, zh)?);
                    }
                    if v.attention {
                        self.fuse(g, z_he, zh)?.fused
                    } else {
                        g.concat(&[z_he, zh], 1)?
                    }
                } else {
                    z_he
                };
                self.classify(g, fused)?
            }
        };
        Ok(TrainOutputs {
            logits,
            z_hat,
            z_ihc,
            nuclei,
            membrane,
        })
    }

    /// Logits from the inference path only: no teacher, no decoders.
    /// `x_ihc` is read only by the IHC-consuming baselines.
    pub fn forward_infer(&self, g: &mut Graph, x_he: &Tensor, x_ihc: Option<&Tensor>) -> Result<Var> {
        let need_ihc = || {
            x_ihc.cloned().ok_or_else(|| {
                LgdError::InvalidArgument(format!("{} needs the IHC image at inference", self.kind))
            })
        };
        match self.kind {
            ModelKind::IhcUnimodal => {
                let x = g.constant(need_ihc()?);
                let z = self.encoder(g, "teacher", x)?;
                self.classify(g, z)
            }
            ModelKind::ImageConcat => {
                let he = g.constant(x_he.clone());
                let ihc = g.constant(need_ihc()?);
                let x = g.concat(&[he, ihc], 1)?;
                let z = self.encode_student(g, x)?;
                self.classify(g, z)
            }
            ModelKind::FeatureConcat => {
                let ihc = g.constant(need_ihc()?);
                let z_ihc = self.encode_teacher(g, ihc)?;
                let he = g.constant(x_he.clone());
                let z_he = self.encode_student(g, he)?;
                let f = self.fuse(g, z_he, z_ihc)?;
                self.classify(g, f.fused)
            }
            kind => {
                let v = kind.variant().expect("ablation kind");
                let x = g.constant(x_he.clone());
                let z_he = self.encode_student(g, x)?;
                let fused = if v.hallucination {
                    let z_hat = self.hallucinate(g, z_he)?;
                    if v.attention {
                        self.fuse(g, z_he, z_hat)?.fused
                    } else {
                        g.concat(&[z_he, z_hat], 1)?
                    }
                } else {
                    z_he
                };
                self.classify(g, fused)
            }
        }
    }

    /// Convenience: logits as a plain tensor.
    pub fn predict_logits(&self, x_he: &Tensor, x_ihc: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.forward_infer(&mut g, x_he, x_ihc)?;
        Ok(g.value(v).clone())
    }
}

fn init_fusion(store: &mut ParamStore, seed: u64) -> Result<()> {
    let c = 2 * FEATURE_CHANNELS;
    add_dense(store, seed, "fusion.mlp1", c, FUSION_HIDDEN, 2.0)?;
    add_dense(store, seed, "fusion.mlp2", FUSION_HIDDEN, c, 1.0)?;
    add_conv(store, seed, "fusion.spatial", c, 1, 1)
}

/// Row-wise argmax with ties resolved to the lower class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}
