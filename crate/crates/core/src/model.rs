//! Every trained piece of the system behind one parameter set.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptor::{Adaptor, AdaptorConfig};
use crate::numerics::{Graph, ParamSet, Tensor};
use crate::quantizer::Codebook;
use crate::transducer::{greedy_decode, Hypothesis, Transducer, TransducerConfig};
use crate::waitk::{WaitKConfig, WaitKModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub transducer: TransducerConfig,
    pub adaptor: AdaptorConfig,
    pub waitk: WaitKConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.transducer.encoder.validate()?;
        self.waitk.validate()?;
        self.adaptor.validate()?;
        if self.transducer.pred_dim == 0 || self.transducer.joint_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter counts per module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub transducer: usize,
    pub adaptor: usize,
    pub waitk: usize,
    pub codebook: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.transducer + self.adaptor + self.waitk + self.codebook
    }
}

/// Offline front end output for one utterance.
#[derive(Debug, Clone)]
pub struct FrontEnd {
    pub h_enc: Tensor,
    pub hypothesis: Hypothesis,
    pub h_apt: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub cfg: ModelConfig,
    pub vocab: usize,
    pub feature_dim: usize,
    pub set: ParamSet,
    pub transducer: Transducer,
    pub adaptor: Adaptor,
    pub waitk: WaitKModel,
    pub codebook: Codebook,
}

impl ModelBundle {
    /// Fresh parameters for `vocab` labels over `feature_dim` inputs.
    pub fn init(cfg: &ModelConfig, feature_dim: usize, vocab: usize, codebook: Codebook, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let transducer = Transducer::init(&mut set, &cfg.transducer, feature_dim, vocab, &mut rng)?;
        let adaptor = Adaptor::init(&mut set, &cfg.adaptor, vocab, cfg.transducer.encoder.model_dim, &mut rng)?;
        let waitk = WaitKModel::init(&mut set, &cfg.waitk, cfg.adaptor.dim, codebook.codes(), &mut rng)?;
        codebook.write_into(&mut set)?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            feature_dim,
            set,
            transducer,
            adaptor,
            waitk,
            codebook,
        })
    }

    /// Rebuild from a parameter set, reading sizes off the stored shapes.
    pub fn from_params(cfg: &ModelConfig, set: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let shape = |name: &str| -> Result<Vec<usize>> {
            set.by_name(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::contract(format!("checkpoint is missing {name}")))
        };
        let vocab = shape("tr.joint.out.w")?[0];
        let feature_dim = shape("tr.enc.in.w")?[1];
        let codebook = Codebook::read_from(&set)?;
        let transducer = Transducer::resolve(&set, &cfg.transducer, feature_dim, vocab)?;
        let adaptor = Adaptor::resolve(&set, &cfg.adaptor, vocab, cfg.transducer.encoder.model_dim)?;
        let waitk = WaitKModel::resolve(&set, &cfg.waitk, cfg.adaptor.dim, codebook.codes())?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            feature_dim,
            set,
            transducer,
            adaptor,
            waitk,
            codebook,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.set.save(path)
    }

    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        Self::from_params(cfg, ParamSet::load(path)?)
    }

    pub fn param_counts(&self) -> ParamCounts {
        let mut counts = ParamCounts {
            transducer: 0,
            adaptor: 0,
            waitk: 0,
            codebook: 0,
        };
        for (_, name, t) in self.set.iter() {
            let slot = match name.split('.').next() {
                Some(crate::transducer::PREFIX) => &mut counts.transducer,
                Some(crate::adaptor::PREFIX) => &mut counts.adaptor,
                Some(crate::waitk::PREFIX) => &mut counts.waitk,
                _ if name == "cb.entries" => &mut counts.codebook,
                _ => continue,
            };
            *slot += t.len();
        }
        counts
    }

    /// Recognise `x` and compute the adaptor frames, as the streaming path
    /// would.
    pub fn front_end(&self, x: &Tensor) -> Result<FrontEnd> {
        let mut g = Graph::new();
        let p = self.set.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let h_enc = self.transducer.encode(&mut g, &p, xv)?;
        let h_enc_value = g.value(h_enc).clone();
        let hypothesis = greedy_decode(&self.transducer, &self.set, &h_enc_value);
        let lat = self.transducer.lattice(&mut g, &p, h_enc, &hypothesis.tokens)?;
        let h_apt = self.adaptor.forward(&mut g, &p, &lat, &hypothesis.path)?;
        Ok(FrontEnd {
            h_enc: h_enc_value,
            h_apt: g.value(h_apt).clone(),
            hypothesis,
        })
    }
}
