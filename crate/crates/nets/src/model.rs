//! Model descriptions, persistence and inference.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use intrinsic_autodiff::{Checkpoint, Graph, Mode, Tensor};
use intrinsic_core::metrics::dssim;
use intrinsic_core::{Image, IntrinsicSet};
use serde::{Deserialize, Serialize};

use crate::config::{GradientMode, IntrinsicNetConfig, RetiNetConfig, TrainConfig};
use crate::data::{batch_tensor, gradient_features, tensor_image, to_rgb, Padding, TrainSample};
use crate::layers::{Bound, ParamStore};
use crate::network::{IntrinsicNet, Stage2Net};
use crate::{Error, Result};

pub const MODEL_FILE: &str = "model.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.txt";
const STAGE1_PREFIX: &str = "stage1.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Intrinsicnet,
    RetinetS1,
    RetinetS2,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Intrinsicnet => "intrinsicnet",
            ModelKind::RetinetS1 => "retinet-s1",
            ModelKind::RetinetS2 => "retinet-s2",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ModelKind::Intrinsicnet, ModelKind::RetinetS1, ModelKind::RetinetS2]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown model {s:?}; expected intrinsicnet, retinet-s1 or retinet-s2")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Intrinsicnet {
        net: IntrinsicNetConfig,
    },
    RetinetS1 {
        retinet: RetiNetConfig,
    },
    RetinetS2 {
        retinet: RetiNetConfig,
        /// Stage 2 consumes ground-truth gradients instead of stage-1
        /// predictions, in training and at inference.
        gt_gradients: bool,
        /// Add the image formation term to the stage-2 objective.
        use_imf_loss: bool,
    },
}

impl Architecture {
    pub fn kind(&self) -> ModelKind {
        match self {
            Architecture::Intrinsicnet { .. } => ModelKind::Intrinsicnet,
            Architecture::RetinetS1 { .. } => ModelKind::RetinetS1,
            Architecture::RetinetS2 { .. } => ModelKind::RetinetS2,
        }
    }

    /// Default desk-scale (or paper-scale) architecture of a kind.
    pub fn preset(kind: ModelKind, paper_scale: bool) -> Self {
        let (net, retinet) = if paper_scale {
            (IntrinsicNetConfig::paper(), RetiNetConfig::paper())
        } else {
            (IntrinsicNetConfig::desk(), RetiNetConfig::desk())
        };
        match kind {
            ModelKind::Intrinsicnet => Architecture::Intrinsicnet { net },
            ModelKind::RetinetS1 => Architecture::RetinetS1 { retinet },
            ModelKind::RetinetS2 => Architecture::RetinetS2 {
                retinet,
                gt_gradients: false,
                use_imf_loss: true,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Intrinsicnet { net } => {
                net.validate()?;
                if net.input_channels != 3 || net.output_channels != 3 {
                    return Err(Error::Config("IntrinsicNet maps 3 channels to 3 + 3".into()));
                }
                Ok(())
            }
            Architecture::RetinetS1 { retinet } | Architecture::RetinetS2 { retinet, .. } => retinet.validate(),
        }
    }

    pub fn imf_enabled(&self) -> bool {
        match self {
            Architecture::Intrinsicnet { net } => net.use_imf_loss,
            Architecture::RetinetS1 { .. } => false,
            Architecture::RetinetS2 { use_imf_loss, .. } => *use_imf_loss,
        }
    }

    pub fn set_imf(&mut self, on: bool) {
        match self {
            Architecture::Intrinsicnet { net } => net.use_imf_loss = on,
            Architecture::RetinetS1 { retinet } => retinet.stage1.use_imf_loss = on,
            Architecture::RetinetS2 { use_imf_loss, .. } => *use_imf_loss = on,
        }
    }

    pub fn loss_weights(&self) -> crate::LossWeights {
        match self {
            Architecture::Intrinsicnet { net } => net.loss_weights,
            Architecture::RetinetS1 { retinet } | Architecture::RetinetS2 { retinet, .. } => retinet.stage1.loss_weights,
        }
    }

    /// Input extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self {
            Architecture::Intrinsicnet { net } => net.size_multiple(),
            Architecture::RetinetS1 { retinet } | Architecture::RetinetS2 { retinet, .. } => {
                retinet.stage1.size_multiple()
            }
        }
    }
}

/// Everything needed to rebuild a trained model: `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub train: TrainConfig,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Network tensors and targets of one batch.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub input: Tensor<f32>,
    pub image: Tensor<f32>,
    pub target_r: Tensor<f32>,
    pub target_s: Tensor<f32>,
}

/// A network ready to train or run.
#[derive(Debug, Clone)]
pub enum Model {
    Intrinsic(IntrinsicNet),
    Stage1 {
        net: IntrinsicNet,
        gradients: GradientMode,
    },
    Stage2 {
        net: Stage2Net,
        /// Frozen, required unless `gt_gradients`.
        stage1: Option<IntrinsicNet>,
        gradients: GradientMode,
        gt_gradients: bool,
    },
}

impl Model {
    /// Fresh weights; each kind draws from its own init stream.
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(match arch {
            Architecture::Intrinsicnet { net } => Model::Intrinsic(IntrinsicNet::new(net.clone(), seed, 0)?),
            Architecture::RetinetS1 { retinet } => Model::Stage1 {
                net: IntrinsicNet::new(retinet.stage1.clone(), seed, 1)?,
                gradients: retinet.gradients,
            },
            Architecture::RetinetS2 {
                retinet, gt_gradients, ..
            } => Model::Stage2 {
                net: Stage2Net::new(retinet.stage2.clone(), seed, 2)?,
                stage1: None,
                gradients: retinet.gradients,
                gt_gradients: *gt_gradients,
            },
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Intrinsic(_) => ModelKind::Intrinsicnet,
            Model::Stage1 { .. } => ModelKind::RetinetS1,
            Model::Stage2 { .. } => ModelKind::RetinetS2,
        }
    }

    /// Trainable parameters.
    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Intrinsic(n) | Model::Stage1 { net: n, .. } => &n.store,
            Model::Stage2 { net, .. } => &net.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Intrinsic(n) | Model::Stage1 { net: n, .. } => &mut n.store,
            Model::Stage2 { net, .. } => &mut net.store,
        }
    }

    /// Attaches a frozen stage-1 network to a stage-2 model.
    pub fn set_stage1(&mut self, s1: IntrinsicNet) -> Result<()> {
        match self {
            Model::Stage2 { stage1, .. } => {
                *stage1 = Some(s1);
                Ok(())
            }
            _ => Err(Error::Usage("only retinet-s2 models take a stage-1 network".into())),
        }
    }

    /// The network input and targets of already padded samples.
    pub fn prepare(&mut self, samples: &[&TrainSample]) -> Result<PreparedBatch> {
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let image = batch_tensor(&images)?;
        let intrinsic = |f: fn(&TrainSample) -> &Image| batch_tensor(&samples.iter().map(|s| f(s)).collect::<Vec<_>>());
        match self {
            Model::Intrinsic(_) => Ok(PreparedBatch {
                input: image.clone(),
                image,
                target_r: intrinsic(|s| &s.reflectance)?,
                target_s: intrinsic(|s| &s.shading)?,
            }),
            Model::Stage1 { gradients, .. } => {
                let feats = |f: fn(&TrainSample) -> &Image| -> Result<Tensor<f32>> {
                    let maps = samples
                        .iter()
                        .map(|s| gradient_features(f(s), *gradients))
                        .collect::<Result<Vec<_>>>()?;
                    batch_tensor(&maps.iter().collect::<Vec<_>>())
                };
                let grad_i = feats(|s| &s.image)?;
                Ok(PreparedBatch {
                    input: cat(&[&image, &grad_i])?,
                    target_r: feats(|s| &s.reflectance)?,
                    target_s: feats(|s| &s.shading)?,
                    image,
                })
            }
            Model::Stage2 {
                stage1,
                gradients,
                gt_gradients,
                ..
            } => {
                let mode = *gradients;
                let feats = |f: fn(&TrainSample) -> &Image| -> Result<Tensor<f32>> {
                    let maps = samples
                        .iter()
                        .map(|s| gradient_features(f(s), mode))
                        .collect::<Result<Vec<_>>>()?;
                    batch_tensor(&maps.iter().collect::<Vec<_>>())
                };
                let (gr, gs) = if *gt_gradients {
                    (feats(|s| &s.reflectance)?, feats(|s| &s.shading)?)
                } else {
                    let s1 = stage1.as_mut().ok_or_else(|| {
                        Error::Usage("retinet-s2 needs a stage-1 network or ground-truth gradients".into())
                    })?;
                    let x = cat(&[&image, &feats(|s| &s.image)?])?;
                    let mut g = Graph::new();
                    let bound = s1.store.bind(&mut g, false);
                    let xv = g.input(x);
                    let (r, s) = s1.forward(&mut g, &bound, xv, Mode::Eval)?;
                    (g.value(r).clone(), g.value(s).clone())
                };
                Ok(PreparedBatch {
                    input: cat(&[&image, &gr, &gs])?,
                    target_r: intrinsic(|s| &s.reflectance)?,
                    target_s: intrinsic(|s| &s.shading)?,
                    image,
                })
            }
        }
    }

    /// Registers the trainable parameters on `g`.
    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Bound {
        self.store().bind(g, trainable)
    }

    /// Prediction pair for the `input` variable.
    pub fn forward(
        &mut self,
        g: &mut Graph<f32>,
        bound: &Bound,
        input: intrinsic_autodiff::Var,
        mode: Mode,
    ) -> Result<(intrinsic_autodiff::Var, intrinsic_autodiff::Var)> {
        match self {
            Model::Intrinsic(n) | Model::Stage1 { net: n, .. } => n.forward(g, bound, input, mode),
            Model::Stage2 { net, .. } => net.forward(g, bound, input, mode),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        self.store().export("", &mut ckpt);
        if let Model::Stage2 { stage1: Some(s1), .. } = self {
            s1.store.export(STAGE1_PREFIX, &mut ckpt);
        }
        ckpt
    }

    /// Restores weights (and momentum when `with_momentum`).
    pub fn restore(&mut self, ckpt: &Checkpoint, with_momentum: bool) -> Result<()> {
        self.store_mut().import("", ckpt, with_momentum)?;
        if let Model::Stage2 { stage1, .. } = self {
            if let Some(s1) = stage1 {
                s1.store.import(STAGE1_PREFIX, ckpt, false)?;
            }
        }
        Ok(())
    }

    /// Decomposes one image: pad, evaluate, crop, clamp at zero.
    pub fn decompose(&mut self, image: &Image, multiple: usize) -> Result<Decomposition> {
        self.decompose_with_gradients(image, None, multiple)
    }

    /// As [`Model::decompose`]; a stage-2 model in ground-truth mode takes
    /// the true reflectance and shading to derive its gradients from.
    pub fn decompose_with_gradients(
        &mut self,
        image: &Image,
        truth: Option<(&Image, &Image)>,
        multiple: usize,
    ) -> Result<Decomposition> {
        if let Model::Stage1 { .. } = self {
            return Err(Error::Usage(
                "retinet-s1 predicts gradients only; decompose with a retinet-s2 model".into(),
            ));
        }
        let image = to_rgb(image)?;
        let padding = Padding::for_size(image.height(), image.width(), multiple);
        let (r, s) = match truth {
            Some((r, s)) => (padding.apply(&to_rgb(r)?), padding.apply(&to_rgb(s)?)),
            None => {
                if let Model::Stage2 { gt_gradients: true, .. } = self {
                    return Err(Error::Usage(
                        "this stage-2 model consumes ground-truth gradients; supply reflectance and shading".into(),
                    ));
                }
                let z = Image::zeros(image.height() + padding.top + padding.bottom, image.width() + padding.left + padding.right, 3);
                (z.clone(), z)
            }
        };
        let sample = TrainSample {
            image: padding.apply(&image),
            reflectance: r,
            shading: s,
        };
        let batch = self.prepare(&[&sample])?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.input(batch.input);
        let (rv, sv) = self.forward(&mut g, &bound, x, Mode::Eval)?;
        let clamp = |t: &Tensor<f32>| -> Result<Image> { Ok(padding.remove(&tensor_image(t, 0)?)?.map(|v| v.max(0.0))) };
        let set = IntrinsicSet::new(clamp(g.value(rv))?, clamp(g.value(sv))?)?;
        Ok(Decomposition { set, padding })
    }
}

fn cat(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let vars: Vec<_> = parts.iter().map(|t| g.input((*t).clone())).collect();
    let y = g.concat_c(&vars)?;
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub set: IntrinsicSet,
    /// Padding added before the forward pass and removed afterwards.
    pub padding: Padding,
}

/// A model with its description, as stored in a model directory.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub spec: ModelSpec,
    pub model: Model,
    pub checkpoint: Checkpoint,
}

impl SavedModel {
    /// Loads `model.json` and `checkpoint.bin` from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "model directory not found"),
            ));
        }
        let spec = ModelSpec::load(dir.join(MODEL_FILE))?;
        let checkpoint = Checkpoint::load(dir.join(CHECKPOINT_FILE))?;
        let mut model = Model::new(&spec.arch, spec.train.seed)?;
        if let Architecture::RetinetS2 { retinet, .. } = &spec.arch {
            let name = format!("{STAGE1_PREFIX}{}", retinet_first_param(retinet)?);
            if checkpoint.param(&name).is_some() {
                model.set_stage1(IntrinsicNet::new(retinet.stage1.clone(), spec.train.seed, 1)?)?;
            }
        }
        model.restore(&checkpoint, true)?;
        Ok(SavedModel {
            spec,
            model,
            checkpoint,
        })
    }

    /// A trained stage-1 network from its model directory.
    pub fn load_stage1(dir: impl AsRef<Path>) -> Result<IntrinsicNet> {
        let dir = dir.as_ref();
        let saved = SavedModel::load(dir)?;
        match saved.model {
            Model::Stage1 { net, .. } => Ok(net),
            other => Err(Error::Usage(format!(
                "{} holds a {} model, not retinet-s1",
                dir.display(),
                other.kind()
            ))),
        }
    }

    pub fn decompose(&mut self, image: &Image) -> Result<Decomposition> {
        let m = self.spec.arch.size_multiple();
        self.model.decompose(image, m)
    }

    pub fn model_path(dir: &Path) -> PathBuf {
        dir.join(MODEL_FILE)
    }
}

fn retinet_first_param(retinet: &RetiNetConfig) -> Result<String> {
    let probe = IntrinsicNet::new(retinet.stage1.clone(), 0, 0)?;
    Ok(probe.store.params[0].name.clone())
}

/// Mean over samples of the average reflectance and shading DSSIM.
pub fn validation_dssim(model: &mut Model, samples: &[TrainSample], multiple: usize, use_truth: bool) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let truth = use_truth.then_some((&s.reflectance, &s.shading));
        let d = model.decompose_with_gradients(&s.image, truth, multiple)?;
        total += 0.5 * (dssim(&d.set.reflectance, &s.reflectance)? + dssim(&d.set.shading, &s.shading)?);
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Mean `mse(R̂ ⊙ Ŝ, I)` over samples.
pub fn reconstruction_mse(model: &mut Model, samples: &[TrainSample], multiple: usize) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let d = model.decompose(&s.image, multiple)?;
        let recon = intrinsic_core::compose_diffuse(&d.set.reflectance, &d.set.shading)?;
        let n = recon.len() as f64;
        total += recon
            .data()
            .iter()
            .zip(s.image.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n;
    }
    Ok(total / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> TrainSample {
        let r = Image::from_fn(h, w, 3, |i, j, c| 0.2 + ((i * 3 + j + c) % 7) as f32 / 10.0);
        let s = Image::from_fn(h, w, 3, |i, _, _| 0.3 + i as f32 / h as f32);
        let img = intrinsic_core::compose_diffuse(&r, &s).unwrap();
        TrainSample::new(img, r, s).unwrap()
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [ModelKind::Intrinsicnet, ModelKind::RetinetS1, ModelKind::RetinetS2] {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!(matches!("unet".parse::<ModelKind>(), Err(Error::Usage(_))));
    }

    #[test]
    fn spec_json_round_trip() {
        for kind in [ModelKind::Intrinsicnet, ModelKind::RetinetS1, ModelKind::RetinetS2] {
            let spec = ModelSpec {
                arch: Architecture::preset(kind, false),
                train: TrainConfig::desk(),
            };
            let back: ModelSpec = serde_json::from_str(&spec.to_json()).unwrap();
            assert_eq!(back, spec);
        }
    }

    #[test]
    fn untrained_decompose_is_finite_and_cropped() {
        let arch = Architecture::preset(ModelKind::Intrinsicnet, false);
        let mut m = Model::new(&arch, 5).unwrap();
        let s = sample(13, 21);
        let d = m.decompose(&s.image, arch.size_multiple()).unwrap();
        assert_eq!(d.set.reflectance.shape(), (13, 21, 3));
        assert_eq!(d.padding, Padding::for_size(13, 21, 8));
        assert!(d.set.reflectance.data().iter().chain(d.set.shading.data()).all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn stage2_requires_gradients_source() {
        let arch = Architecture::preset(ModelKind::RetinetS2, false);
        let mut m = Model::new(&arch, 5).unwrap();
        let s = sample(16, 16);
        assert!(matches!(m.decompose(&s.image, 8), Err(Error::Usage(_))));
        let Architecture::RetinetS2 { retinet, .. } = &arch else { unreachable!() };
        m.set_stage1(IntrinsicNet::new(retinet.stage1.clone(), 5, 1).unwrap()).unwrap();
        let d = m.decompose(&s.image, 8).unwrap();
        assert_eq!(d.set.shading.shape(), (16, 16, 3));
    }

    #[test]
    fn checkpoint_restores_weights() {
        let arch = Architecture::preset(ModelKind::RetinetS1, false);
        let a = Model::new(&arch, 1).unwrap();
        let mut b = Model::new(&arch, 2).unwrap();
        assert_ne!(a.store().params[0].value, b.store().params[0].value);
        b.restore(&a.checkpoint(), true).unwrap();
        assert_eq!(a.store(), b.store());
    }
}
