//! The full model: transfer network, classifier head and evaluation stack
//! over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::discriminative::{DiscriminativeConfig, DynGraphParams};
use crate::error::{Error, Result};
use crate::evaluation::{EvalStackConfig, EvalStackParams};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::transfer::{TransferConfig, TransferParams};

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub transfer: TransferConfig,
    pub classifier: DiscriminativeConfig,
    pub eval_stack: EvalStackConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            transfer: TransferConfig::default(),
            classifier: DiscriminativeConfig::default(),
            eval_stack: EvalStackConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Defaults with the data dimensions overridden everywhere they occur.
    pub fn with_dims(channels: usize, bands: usize, classes: usize) -> Self {
        let mut cfg = ModelConfig::default();
        cfg.transfer.channels = channels;
        cfg.transfer.bands = bands;
        cfg.classifier.channels = channels;
        cfg.classifier.bands = bands;
        cfg.classifier.classes = classes;
        cfg.eval_stack.channels = channels;
        cfg.eval_stack.bands = bands;
        cfg
    }

    /// Downscaled dimensions for fast synthetic experiments and checks.
    pub fn small(channels: usize, bands: usize, classes: usize) -> Self {
        ModelConfig {
            transfer: TransferConfig {
                channels,
                bands,
                model_dim: 8,
                heads: 2,
                ffn_dim: 16,
                decoder_layers: 3,
            },
            classifier: DiscriminativeConfig {
                channels,
                bands,
                cheb_order: 3,
                graph_features: 8,
                hidden: 16,
                classes,
                normalize_graph: false,
            },
            eval_stack: EvalStackConfig {
                channels,
                bands,
                f1: 2,
                depth_mult: 2,
                f2: 2,
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.transfer.channels
    }

    pub fn bands(&self) -> usize {
        self.transfer.bands
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes
    }

    pub fn validate(&self) -> Result<()> {
        self.transfer.validate()?;
        self.classifier.validate()?;
        self.eval_stack.validate()?;
        if self.transfer.channels != self.classifier.channels
            || self.transfer.channels != self.eval_stack.channels
            || self.transfer.bands != self.classifier.bands
            || self.transfer.bands != self.eval_stack.bands
        {
            return Err(Error::config(
                "channel/band dimensions disagree across modules",
            ));
        }
        Ok(())
    }

    /// key=value rendering (one per line), used by the checkpoint header
    /// and the optional config file.
    pub fn to_kv(&self) -> String {
        let t = &self.transfer;
        let c = &self.classifier;
        let e = &self.eval_stack;
        [
            format!("channels={}", t.channels),
            format!("bands={}", t.bands),
            format!("model_dim={}", t.model_dim),
            format!("heads={}", t.heads),
            format!("ffn_dim={}", t.ffn_dim),
            format!("decoder_layers={}", t.decoder_layers),
            format!("cheb_order={}", c.cheb_order),
            format!("graph_features={}", c.graph_features),
            format!("hidden={}", c.hidden),
            format!("classes={}", c.classes),
            format!("normalize_graph={}", c.normalize_graph),
            format!("eval_f1={}", e.f1),
            format!("eval_depth={}", e.depth_mult),
            format!("eval_f2={}", e.f2),
        ]
        .join("\n")
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let usize_of = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::config(format!("invalid integer '{v}' for {key}")))
        };
        match key {
            "channels" => {
                let v = usize_of(value)?;
                self.transfer.channels = v;
                self.classifier.channels = v;
                self.eval_stack.channels = v;
            }
            "bands" => {
                let v = usize_of(value)?;
                self.transfer.bands = v;
                self.classifier.bands = v;
                self.eval_stack.bands = v;
            }
            "model_dim" => self.transfer.model_dim = usize_of(value)?,
            "heads" => self.transfer.heads = usize_of(value)?,
            "ffn_dim" => self.transfer.ffn_dim = usize_of(value)?,
            "decoder_layers" => self.transfer.decoder_layers = usize_of(value)?,
            "cheb_order" => self.classifier.cheb_order = usize_of(value)?,
            "graph_features" => self.classifier.graph_features = usize_of(value)?,
            "hidden" => self.classifier.hidden = usize_of(value)?,
            "classes" => self.classifier.classes = usize_of(value)?,
            "normalize_graph" => {
                self.classifier.normalize_graph = value
                    .parse()
                    .map_err(|_| Error::config(format!("invalid bool '{value}'")))?
            }
            "eval_f1" => self.eval_stack.f1 = usize_of(value)?,
            "eval_depth" => self.eval_stack.depth_mult = usize_of(value)?,
            "eval_f2" => self.eval_stack.f2 = usize_of(value)?,
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected key=value, got '{line}'")))?;
            cfg.apply_kv(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub transfer: TransferParams,
    pub classifier: DynGraphParams,
    pub eval_stack: EvalStackParams,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with seeded initialization. Parameter registration order
    /// is fixed, so the same seed always yields the same store.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transfer = TransferParams::init(&mut store, &mut rng, &config.transfer);
        let classifier = DynGraphParams::init(&mut store, &mut rng, &config.classifier);
        let eval_stack = EvalStackParams::init(&mut store, &mut rng, &config.eval_stack);
        Ok(Model {
            config,
            store,
            transfer,
            classifier,
            eval_stack,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            transfer: self.transfer.clone(),
            classifier: self.classifier.clone(),
            eval_stack: self.eval_stack.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_kv_round_trips() {
        let mut cfg = ModelConfig::small(6, 4, 3);
        cfg.classifier.normalize_graph = true;
        let text = cfg.to_kv();
        let parsed = ModelConfig::from_kv(&text).unwrap();
        assert_eq!(parsed.to_kv(), text);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut cfg = ModelConfig::small(4, 3, 2);
        cfg.classifier.channels = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::small(4, 3, 2);
        let a = Model::<f32>::new(cfg.clone(), 9).unwrap();
        let b = Model::<f32>::new(cfg, 9).unwrap();
        for ((_, na, ta), (_, nb, tb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
    }
}
