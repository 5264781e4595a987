use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::envs::{Env, EnvSpec};
use crate::error::{Error, Result};
use crate::latent::KlDirection;
use crate::marl::{LossWeights, MixerKind, ModelDims, QInput};

use super::explore::ExplorationSchedule;

/// Training variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Full objective with the encoder weight clamp.
    Cromac,
    /// No adversarial term and no clamp.
    NoRobust,
    /// No adversarial term; clamp kept.
    NoAdv,
    /// Ablated message ensemble: message-fed Q head trained on random
    /// message subsets, plurality vote at test time.
    Ame,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cromac => "cromac",
            Method::NoRobust => "no-robust",
            Method::NoAdv => "no-adv",
            Method::Ame => "ame",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cromac" => Ok(Method::Cromac),
            "no-robust" => Ok(Method::NoRobust),
            "no-adv" => Ok(Method::NoAdv),
            "ame" => Ok(Method::Ame),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

/// Every knob of a training run. Serialised as flat `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: String,
    pub method: Method,
    pub seed: u64,
    pub epsilon: f64,
    pub kappa: f64,
    pub c_max: f64,
    pub clamp_weights: bool,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub t_r: u64,
    pub gamma: f64,
    pub total_steps: u64,
    pub rnn_hidden_dim: usize,
    pub z_dim: usize,
    pub vae_hidden_dim: usize,
    pub q_hidden_dim: usize,
    pub msg_hidden_dim: usize,
    pub mixer: MixerKind,
    pub mixing_embed_dim: usize,
    pub explore_start: f64,
    pub explore_end: f64,
    pub explore_anneal_steps: u64,
    pub target_update_interval: u64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub train_q_input: QInput,
    pub kl_direction: KlDirection,
    pub double_q: bool,
    /// Ablation size for message-subset training and voting; 0 disables.
    pub ame_k: usize,
    /// Trainer steps between checkpoint writes; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl RunConfig {
    /// Hyperparameters for an environment id, with the full step budget.
    pub fn preset(env: &str) -> Result<Self> {
        let base = Self {
            env: env.to_string(),
            method: Method::Cromac,
            seed: 0,
            epsilon: 0.5,
            kappa: 5.0,
            c_max: 0.1,
            clamp_weights: true,
            alpha1: 0.1,
            alpha2: 0.001,
            alpha3: 0.3,
            t_r: 700_000,
            gamma: 0.99,
            total_steps: 2_000_000,
            rnn_hidden_dim: 16,
            z_dim: 16,
            vae_hidden_dim: 32,
            q_hidden_dim: 0,
            msg_hidden_dim: 0,
            mixer: MixerKind::Qmix,
            mixing_embed_dim: 32,
            explore_start: 1.0,
            explore_end: 0.05,
            explore_anneal_steps: 50_000,
            target_update_interval: 200,
            buffer_capacity: 5000,
            batch_size: 32,
            lr: 5e-4,
            grad_clip: 10.0,
            train_q_input: QInput::State,
            kl_direction: KlDirection::StateToMessage,
            double_q: false,
            ame_k: 0,
            checkpoint_interval: 0,
        };
        let wide = |c: Self| Self { rnn_hidden_dim: 32, z_dim: 32, vae_hidden_dim: 64, alpha1: 0.01, ..c };
        let cfg = match env {
            "hallway-4x5x6" => base,
            "hallway-3x3x4x4" => Self { kappa: 10.0, c_max: 0.2, ..base },
            "hallway-3x4x5" | "hallway-small" => {
                Self { env: "hallway-3x4x5".into(), total_steps: 300_000, t_r: 150_000, ..base }
            }
            "lbf-3p1f" => Self { c_max: 0.3, t_r: 800_000, epsilon: 0.03, ..wide(base) },
            "lbf-4p1f" => Self { c_max: 0.3, t_r: 800_000, epsilon: 0.05, kappa: 10.0, ..wide(base) },
            "tj-slow" => Self { c_max: 0.3, t_r: 1_000_000, epsilon: 0.0005, kappa: 10.0, ..wide(base) },
            "tj-fast" => Self { c_max: 0.6, t_r: 1_000_000, epsilon: 0.001, kappa: 10.0, ..wide(base) },
            other if other.starts_with("hallway-") => base,
            other => return Err(Error::Config(format!("no preset for environment {other:?}"))),
        };
        Env::from_id(&cfg.env)?;
        Ok(cfg)
    }

    /// Switch the training variant, keeping the environment's other values.
    pub fn with_method(mut self, method: Method) -> Result<Self> {
        let table = Self::preset(&self.env)?;
        self.method = method;
        match method {
            Method::Cromac => {
                self.alpha3 = table.alpha3;
                self.clamp_weights = true;
                self.train_q_input = QInput::State;
                self.ame_k = 0;
            }
            Method::NoRobust | Method::NoAdv => {
                self.alpha3 = 0.0;
                self.clamp_weights = method == Method::NoAdv;
                self.train_q_input = QInput::State;
                self.ame_k = 0;
            }
            Method::Ame => {
                let n = Env::from_id(&self.env)?.spec().n_agents;
                self.alpha1 = 0.0;
                self.alpha2 = 0.0;
                self.alpha3 = 0.0;
                self.clamp_weights = false;
                self.train_q_input = QInput::Message;
                self.ame_k = ((n - 1) / 2).max(1);
            }
        }
        Ok(self)
    }

    pub fn c_min(&self) -> f64 {
        -self.c_max
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha1, self.alpha2, self.alpha3, self.t_r)
    }

    pub fn exploration(&self) -> ExplorationSchedule {
        ExplorationSchedule { start: self.explore_start, end: self.explore_end, anneal_steps: self.explore_anneal_steps }
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        Ok(Env::from_id(&self.env)?.spec().clone())
    }

    pub fn model_dims(&self) -> Result<ModelDims> {
        let spec = self.env_spec()?;
        Ok(ModelDims {
            obs_dim: spec.obs_dim,
            state_dim: spec.state_dim,
            n_agents: spec.n_agents,
            n_actions: spec.n_actions,
            rnn_dim: self.rnn_hidden_dim,
            z_dim: self.z_dim,
            vae_hidden: self.vae_hidden_dim,
            q_hidden: self.q_hidden_dim,
            msg_hidden: if self.msg_hidden_dim == 0 { Vec::new() } else { vec![self.msg_hidden_dim] },
            mixer: self.mixer,
            mixing_embed: self.mixing_embed_dim,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let spec = self.env_spec()?;
        for (k, v) in [("epsilon", self.epsilon), ("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{k} must be finite and ≥ 0"));
            }
        }
        for (k, v) in [("kappa", self.kappa), ("C_MAX", self.c_max), ("lr", self.lr), ("grad_clip", self.grad_clip)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{k} must be finite and positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.explore_start) || !(0.0..=1.0).contains(&self.explore_end) {
            return bad("exploration rates must lie in [0, 1]".into());
        }
        let dims = [self.rnn_hidden_dim, self.z_dim, self.vae_hidden_dim, self.mixing_embed_dim, self.buffer_capacity, self.batch_size];
        if dims.contains(&0) || self.total_steps == 0 || self.target_update_interval == 0 {
            return bad("dims, sizes, step budget and target interval must be positive".into());
        }
        if self.t_r >= self.total_steps {
            return bad(format!("T_r = {} must be below total_steps = {}", self.t_r, self.total_steps));
        }
        if self.ame_k > 0 && self.ame_k + 1 > spec.n_agents {
            return bad(format!("ame_k = {} needs at least {} agents", self.ame_k, self.ame_k + 1));
        }
        if self.ame_k > 0 && self.train_q_input != QInput::Message {
            return bad("message ablation needs train_q_input = message".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("env", self.env.clone());
        kv("method", self.method.as_str().into());
        kv("seed", self.seed.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("kappa", self.kappa.to_string());
        kv("C_MAX", self.c_max.to_string());
        kv("C_MIN", self.c_min().to_string());
        kv("clamp_weights", self.clamp_weights.to_string());
        kv("alpha1", self.alpha1.to_string());
        kv("alpha2", self.alpha2.to_string());
        kv("alpha3", self.alpha3.to_string());
        kv("T_r", self.t_r.to_string());
        kv("gamma", self.gamma.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("rnn_hidden_dim", self.rnn_hidden_dim.to_string());
        kv("z_dim", self.z_dim.to_string());
        kv("vae_hidden_dim", self.vae_hidden_dim.to_string());
        kv("q_hidden_dim", self.q_hidden_dim.to_string());
        kv("msg_hidden_dim", self.msg_hidden_dim.to_string());
        kv("mixer", self.mixer.as_str().into());
        kv("mixing_embed_dim", self.mixing_embed_dim.to_string());
        kv("explore_start", self.explore_start.to_string());
        kv("explore_end", self.explore_end.to_string());
        kv("explore_anneal_steps", self.explore_anneal_steps.to_string());
        kv("target_update_interval", self.target_update_interval.to_string());
        kv("buffer_capacity", self.buffer_capacity.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("train_q_input", self.train_q_input.as_str().into());
        kv("kl_direction", self.kl_direction.as_str().into());
        kv("double_q", self.double_q.to_string());
        kv("ame_k", self.ame_k.to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        s
    }

    /// Parse `key = value` lines. `env` selects the preset, `method` the
    /// variant; every other key overrides one field. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {:?}", n + 1, k.trim())));
            }
        }
        let env = map.remove("env").unwrap_or_else(|| "hallway-3x4x5".into());
        let mut c = Self::preset(&env)?;
        if let Some(m) = map.remove("method") {
            c = c.with_method(Method::parse(&m)?)?;
        }
        let c_min = map.remove("C_MIN");
        for (k, v) in &map {
            c.set(k, v)?;
        }
        if let Some(v) = c_min {
            let x: f64 = num("C_MIN", &v)?;
            if x != c.c_min() {
                return Err(Error::Config(format!("C_MIN must equal −C_MAX = {}, got {x}", c.c_min())));
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Override one field by key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "env" => {
                Env::from_id(v)?;
                self.env = v.to_string();
            }
            "method" => *self = self.clone().with_method(Method::parse(v)?)?,
            "seed" => self.seed = num(key, v)?,
            "epsilon" => self.epsilon = num(key, v)?,
            "kappa" => self.kappa = num(key, v)?,
            "C_MAX" => self.c_max = num(key, v)?,
            "clamp_weights" => self.clamp_weights = num(key, v)?,
            "alpha1" => self.alpha1 = num(key, v)?,
            "alpha2" => self.alpha2 = num(key, v)?,
            "alpha3" => self.alpha3 = num(key, v)?,
            "T_r" => self.t_r = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "total_steps" => self.total_steps = num(key, v)?,
            "rnn_hidden_dim" => self.rnn_hidden_dim = num(key, v)?,
            "z_dim" => self.z_dim = num(key, v)?,
            "vae_hidden_dim" => self.vae_hidden_dim = num(key, v)?,
            "q_hidden_dim" => self.q_hidden_dim = num(key, v)?,
            "msg_hidden_dim" => self.msg_hidden_dim = num(key, v)?,
            "mixer" => self.mixer = MixerKind::parse(v)?,
            "mixing_embed_dim" => self.mixing_embed_dim = num(key, v)?,
            "explore_start" => self.explore_start = num(key, v)?,
            "explore_end" => self.explore_end = num(key, v)?,
            "explore_anneal_steps" => self.explore_anneal_steps = num(key, v)?,
            "target_update_interval" => self.target_update_interval = num(key, v)?,
            "buffer_capacity" => self.buffer_capacity = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "train_q_input" => self.train_q_input = QInput::parse(v)?,
            "kl_direction" => self.kl_direction = KlDirection::parse(v)?,
            "double_q" => self.double_q = num(key, v)?,
            "ame_k" => self.ame_k = num(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hallway_table_values() {
        let c = RunConfig::preset("hallway-4x5x6").unwrap();
        assert_eq!((c.rnn_hidden_dim, c.z_dim, c.vae_hidden_dim), (16, 16, 32));
        assert_eq!((c.alpha1, c.alpha2, c.alpha3), (0.1, 0.001, 0.3));
        assert_eq!((c.kappa, c.c_max, c.c_min(), c.t_r), (5.0, 0.1, -0.1, 700_000));
        assert_eq!(c.epsilon, 0.5);
        let s = RunConfig::preset("hallway-small").unwrap();
        assert_eq!((s.env.as_str(), s.total_steps, s.t_r), ("hallway-3x4x5", 300_000, 150_000));
        let t = RunConfig::preset("tj-fast").unwrap();
        assert_eq!((t.c_max, t.epsilon, t.kappa), (0.6, 0.001, 10.0));
    }

    #[test]
    fn text_round_trip() {
        for env in crate::envs::ENV_IDS {
            for m in [Method::Cromac, Method::NoRobust, Method::NoAdv, Method::Ame] {
                let c = RunConfig::preset(env).unwrap().with_method(m).unwrap();
                c.validate().unwrap();
                assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c, "{env} {m:?}");
            }
        }
    }

    #[test]
    fn overrides_and_errors() {
        let c = RunConfig::parse("env = hallway-3x4x5\nmethod = no-robust\nseed = 7 # comment\nC_MAX = 0.2\n").unwrap();
        assert_eq!((c.seed, c.alpha3, c.clamp_weights, c.c_max), (7, 0.0, false, 0.2));
        assert!(RunConfig::parse("C_MAX = 0.1\nC_MIN = -0.2").is_err());
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("T_r = 400000").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("env = smac").is_err());
        let ame = RunConfig::parse("method = ame").unwrap();
        assert_eq!((ame.ame_k, ame.train_q_input), (1, QInput::Message));
    }
}
