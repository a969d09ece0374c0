//! The full model: both encoders, the prompt bank and the primitive
//! temperatures, all backed by one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ag::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::alignment::ScoreMode;
use crate::encoders::{
    is_adapter_param, is_prompt_param, EncoderConfig, ImageEncoder, ImageFeatures, Init, PromptBank, PromptKind,
    TextEncoder,
};
use crate::error::{Error, Result};
use crate::moe::MoeConfig;
use crate::scalar::Scalar;

pub const TEMP_STATE: &str = "temp.state";
pub const TEMP_OBJECT: &str = "temp.object";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub moe: MoeConfig,
    pub n_states: usize,
    pub n_objects: usize,
    /// Contrastive temperature, fixed.
    pub tau: f64,
    pub score_mode: ScoreMode,
    /// Run the adapters at all. Off gives the frozen-encoder baseline.
    pub adapters: bool,
    /// Seed for the frozen base, prompts and adapter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            moe: MoeConfig::default(),
            n_states: 8,
            n_objects: 10,
            tau: 0.01,
            score_mode: ScoreMode::Renormalized,
            adapters: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.moe.validate(self.encoder.width)?;
        if self.n_states == 0 || self.n_objects == 0 {
            return Err(Error::Config("label space needs at least one state and one object".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// `softplus⁻¹(1)`, so both primitive temperatures start at 1.
fn unit_softplus_raw() -> f64 {
    (1f64.exp() - 1.0).ln()
}

#[derive(Clone, Debug)]
pub struct EvaModel<T> {
    pub cfg: ModelConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub prompts: PromptBank,
    pub temp_state: ParamId,
    pub temp_object: ParamId,
    pub store: ParamStore<T>,
}

impl<T: Scalar> EvaModel<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let mut init = Init { rng: &mut rng };
        let image = ImageEncoder::init(&mut store, &mut init, &cfg.encoder, &cfg.moe)?;
        let (text, prompts) =
            TextEncoder::init(&mut store, &mut init, &cfg.encoder, &cfg.moe, cfg.n_states, cfg.n_objects)?;
        let raw = Tensor::vector(vec![T::lit(unit_softplus_raw())]);
        let temp_state = store.add(TEMP_STATE, raw.clone(), true)?;
        let temp_object = store.add(TEMP_OBJECT, raw, true)?;
        store.set_trainable_where(is_adapter_param, cfg.adapters);
        Ok(Self {
            cfg,
            image,
            text,
            prompts,
            temp_state,
            temp_object,
            store,
        })
    }

    /// Freezes or unfreezes every adapter weight.
    pub fn set_adapters_trainable(&mut self, on: bool) -> usize {
        self.store.set_trainable_where(is_adapter_param, on)
    }

    pub fn set_prompts_trainable(&mut self, on: bool) -> usize {
        self.store.set_trainable_where(is_prompt_param, on)
    }

    /// Names of parameters that are never trained.
    pub fn is_base_param(name: &str) -> bool {
        !is_adapter_param(name) && !is_prompt_param(name) && !name.starts_with("temp.")
    }

    pub fn tau(&self) -> T {
        T::lit(self.cfg.tau)
    }

    /// Text features `[n, joint]` for a batch of prompts of one family.
    pub fn text_features(&self, g: &mut Graph<T>, kind: PromptKind, items: &[(usize, usize)]) -> Result<Var> {
        let (tokens, len) = self.text.build_prompts(g, &self.store, &self.prompts, kind, items)?;
        let (f, _) = self.text.encode(g, &self.store, tokens, items.len(), len, self.cfg.adapters)?;
        Ok(f)
    }

    pub fn composition_text(&self, g: &mut Graph<T>, pairs: &[(usize, usize)]) -> Result<Var> {
        self.text_features(g, PromptKind::Composition, pairs)
    }

    pub fn state_text(&self, g: &mut Graph<T>) -> Result<Var> {
        let items: Vec<_> = (0..self.cfg.n_states).map(|s| (s, 0)).collect();
        self.text_features(g, PromptKind::State, &items)
    }

    pub fn object_text(&self, g: &mut Graph<T>) -> Result<Var> {
        let items: Vec<_> = (0..self.cfg.n_objects).map(|o| (0, o)).collect();
        self.text_features(g, PromptKind::Object, &items)
    }

    /// Encodes `patches: [batch, patches, patch_dim]`.
    pub fn image_features(&self, g: &mut Graph<T>, patches: Var, want_variants: bool) -> Result<ImageFeatures> {
        self.image
            .encode(g, &self.store, patches, self.cfg.adapters, want_variants)
    }

    /// `(τ_s, τ_o)` as graph nodes of shape `[1]`.
    pub fn temperatures(&self, g: &mut Graph<T>) -> (Var, Var) {
        let s = g.param(&self.store, self.temp_state);
        let o = g.param(&self.store, self.temp_object);
        (g.softplus(s), g.softplus(o))
    }

    pub fn temperature_values(&self) -> (T, T) {
        let sp = |x: T| if x > T::lit(30.0) { x } else { x.exp().ln_1p() };
        (
            sp(self.store.get(self.temp_state).item()),
            sp(self.store.get(self.temp_object).item()),
        )
    }
}
