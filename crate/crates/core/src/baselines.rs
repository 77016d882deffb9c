//! Systems compared in the ablations: the self-recycled network, the blocked
//! flow, and two "overconfigured" variants that add an assistant network.
//!
//! The control assistant is a trainable copy of the encoder path whose
//! per-scale features pass through zero-initialized 1x1 adapters and are
//! added to the base decoder's skip connections. The reference assistant is
//! a full copy of the denoiser whose extraction pass fills the signature
//! cache in place of the base network.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    ComposedInput, Denoiser, DenoiserConfig, EncoderPath, ForwardOptions, Mode, SemanticTokens, SignatureCache,
};
use crate::error::{Error, Result};
use crate::nn::{Conv1x1, ParamStore, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SystemKind {
    Symbiotic,
    ControlNet,
    ReferenceNet,
    Blocked,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [
        SystemKind::Symbiotic,
        SystemKind::ControlNet,
        SystemKind::ReferenceNet,
        SystemKind::Blocked,
    ];
}

impl FromStr for SystemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symbiotic" => Ok(SystemKind::Symbiotic),
            "controlnet" => Ok(SystemKind::ControlNet),
            "referencenet" => Ok(SystemKind::ReferenceNet),
            "blocked" => Ok(SystemKind::Blocked),
            other => Err(Error::Config(format!("unknown system `{other}`"))),
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemKind::Symbiotic => "symbiotic",
            SystemKind::ControlNet => "controlnet",
            SystemKind::ReferenceNet => "referencenet",
            SystemKind::Blocked => "blocked",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssistantKind {
    ControlResidual,
    ReferenceAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssistantConfig {
    pub kind: AssistantKind,
    pub shares_init_with_base: bool,
    pub trainable: bool,
}

impl AssistantConfig {
    pub fn for_system(kind: SystemKind) -> Option<Self> {
        let kind = match kind {
            SystemKind::ControlNet => AssistantKind::ControlResidual,
            SystemKind::ReferenceNet => AssistantKind::ReferenceAttention,
            _ => return None,
        };
        Some(Self { kind, shares_init_with_base: true, trainable: true })
    }
}

/// Copy of the encoder path with zero-initialized output adapters.
#[derive(Debug, Clone)]
pub struct ControlAssistant {
    path: EncoderPath,
    adapters: Vec<Conv1x1>,
}

impl ControlAssistant {
    pub fn new(vb: &Scope<'_>, cfg: &DenoiserConfig) -> Result<Self> {
        let adapters = (0..cfg.num_scales())
            .map(|s| Conv1x1::new(&vb.pp(format!("adapter{s}")), cfg.channels(s), cfg.channels(s), true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { path: EncoderPath::new(vb, cfg)?, adapters })
    }

    /// One residual per decoder scale, indexed by scale.
    pub fn forward(&self, subject: &ComposedInput, ts: &[usize], tokens: Option<&SemanticTokens>) -> Result<Vec<Tensor>> {
        let feats = self.path.features(subject, ts, tokens)?;
        if feats.len() != self.adapters.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature scales for {} adapters",
                feats.len(),
                self.adapters.len()
            )));
        }
        feats.iter().zip(&self.adapters).map(|(f, a)| a.forward(f)).collect()
    }
}

#[derive(Debug, Clone)]
pub enum Assistant {
    None,
    Control(ControlAssistant),
    Reference(Denoiser),
}

/// A trainable system: the base denoiser plus its optional assistant, each
/// with its own parameter store.
pub struct Model {
    pub kind: SystemKind,
    pub cfg: DenoiserConfig,
    pub base_params: ParamStore,
    pub base: Denoiser,
    pub assistant_params: Option<ParamStore>,
    pub assistant: Assistant,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("kind", &self.kind)
            .field("base_params", &self.base_params)
            .field("assistant_params", &self.assistant_params)
            .finish()
    }
}

impl Model {
    pub fn new(kind: SystemKind, cfg: &DenoiserConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let base_params = ParamStore::new(seed, dtype, device);
        let base = Denoiser::new(&base_params.root(), cfg)?;
        let (assistant_params, assistant) = match kind {
            SystemKind::Symbiotic | SystemKind::Blocked => (None, Assistant::None),
            SystemKind::ControlNet => {
                let store = ParamStore::new(seed ^ 0xA55A, dtype, device);
                let a = ControlAssistant::new(&store.root(), cfg)?;
                store.copy_from(&base_params)?;
                (Some(store), Assistant::Control(a))
            }
            SystemKind::ReferenceNet => {
                let store = ParamStore::new(seed ^ 0xA55A, dtype, device);
                let a = Denoiser::new(&store.root(), cfg)?;
                store.copy_from(&base_params)?;
                (Some(store), Assistant::Reference(a))
            }
        };
        Ok(Self { kind, cfg: cfg.clone(), base_params, base, assistant_params, assistant })
    }

    /// Every trainable variable, base first, with `base.`/`assistant.` name
    /// prefixes.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> =
            self.base_params.vars().into_iter().map(|(k, v)| (format!("base.{k}"), v)).collect();
        if let Some(a) = &self.assistant_params {
            out.extend(a.vars().into_iter().map(|(k, v)| (format!("assistant.{k}"), v)));
        }
        out
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    pub fn num_params(&self) -> usize {
        self.base_params.num_params() + self.assistant_params.as_ref().map_or(0, |a| a.num_params())
    }

    pub fn dtype(&self) -> DType {
        self.base_params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.base_params.device()
    }

    /// Whether the system delivers signatures through the attention cache.
    pub fn recycles(&self) -> bool {
        matches!(self.kind, SystemKind::Symbiotic | SystemKind::ReferenceNet)
    }

    /// Copies the base weights into a model of another kind with the same
    /// configuration (the assistant keeps its own weights).
    pub fn load_base_from(&self, other: &Model) -> Result<usize> {
        self.base_params.copy_from(&other.base_params)
    }
}

pub fn control_forward(
    model: &Model,
    subject: &ComposedInput,
    ts: &[usize],
    tokens: Option<&SemanticTokens>,
) -> Result<Vec<Tensor>> {
    match &model.assistant {
        Assistant::Control(a) => a.forward(subject, ts, tokens),
        _ => Err(Error::Config(format!("system {} has no control assistant", model.kind))),
    }
}

pub fn reference_forward(
    model: &Model,
    subject: &ComposedInput,
    ts: &[usize],
    tokens: Option<&SemanticTokens>,
) -> Result<SignatureCache> {
    match &model.assistant {
        Assistant::Reference(a) => {
            let out = a.forward(subject, ts, tokens, Mode::Extract, ForwardOptions::default())?;
            Ok(out.cache.expect("extract mode returns a cache"))
        }
        _ => Err(Error::Config(format!("system {} has no reference assistant", model.kind))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::compose_subject;
    use crate::grid::LatentGrid;
    use crate::rng;

    fn inputs(cfg: &DenoiserConfig) -> (ComposedInput, ComposedInput) {
        let (c, s) = (cfg.latent_channels(), cfg.latent_size());
        let g = |seed| {
            LatentGrid::latent(
                rng::normal_tensor(&mut rng::stream(seed, &[]), &[1, c, s, s], DType::F32, &Device::Cpu).unwrap(),
            )
            .unwrap()
        };
        let gen = ComposedInput {
            noisy: g(1),
            masked_scene: g(2),
            mask: Tensor::ones((1, 1, s, s), DType::F32, &Device::Cpu).unwrap(),
        };
        (gen, compose_subject(&g(3), &g(4)).unwrap())
    }

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn control_at_init_is_a_no_op() {
        let cfg = DenoiserConfig::desk();
        let m = Model::new(SystemKind::ControlNet, &cfg, 5, DType::F32, &Device::Cpu).unwrap();
        let (gen, sub) = inputs(&cfg);
        let res = control_forward(&m, &sub, &[300], None).unwrap();
        assert_eq!(res.len(), cfg.num_scales());
        assert!(res.iter().all(|r| flat(r).iter().all(|&v| v == 0.0)));
        let with = m
            .base
            .forward(&gen, &[300], None, Mode::Blocked, ForwardOptions { control: Some(&res), ..Default::default() })
            .unwrap();
        let without = m.base.forward(&gen, &[300], None, Mode::Blocked, ForwardOptions::default()).unwrap();
        assert_eq!(flat(with.eps.tensor()), flat(without.eps.tensor()));
        let again = control_forward(&m, &sub, &[300], None).unwrap();
        assert_eq!(flat(&res[0]), flat(&again[0]));
    }

    #[test]
    fn reference_copy_reproduces_recycled_cache() {
        let cfg = DenoiserConfig::desk();
        let m = Model::new(SystemKind::ReferenceNet, &cfg, 5, DType::F32, &Device::Cpu).unwrap();
        let (_, sub) = inputs(&cfg);
        let from_ref = reference_forward(&m, &sub, &[300], None).unwrap();
        let from_base = m
            .base
            .forward(&sub, &[300], None, Mode::Extract, ForwardOptions::default())
            .unwrap()
            .cache
            .unwrap();
        assert_eq!(from_ref.sites(), from_base.sites());
        for (site, t) in from_base.delivered() {
            assert_eq!(flat(t), flat(from_ref.get(site).unwrap()), "{site}");
        }
    }

    #[test]
    fn system_names_round_trip() {
        for k in SystemKind::ALL {
            assert_eq!(k.to_string().parse::<SystemKind>().unwrap(), k);
        }
        assert!("overconfigured".parse::<SystemKind>().is_err());
    }
}
