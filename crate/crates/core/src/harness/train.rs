use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::actor::{Actor, Fusion};
use super::buffer::ReplayBuffer;
use super::config::RunConfig;
use super::metrics::{hex, MetricsRow, MetricsWriter, RunManifest};
use super::rollout::run_episode;
use crate::attacks::{AmePolicy, AttackSpec};
use crate::bounds::fused_message_bounds;
use crate::diffcore::{clip_grad_norm, AdamState, Checkpoint, Graph, ParamStore, Tensor};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::marl::{compute_losses, target_update, total_loss, CromacModel, LossSettings, QInput};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Independent random streams of a run.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Model topology for a config; parameter values come from the seed.
pub fn build_model(config: &RunConfig) -> Result<(CromacModel, ParamStore)> {
    config.validate()?;
    let (model, mut store) = CromacModel::new(config.model_dims()?, &mut stream(config.seed, 0));
    if config.clamp_weights {
        model.msg_enc.clamp_weights(&mut store, config.c_min(), config.c_max);
    }
    Ok((model, store))
}

/// Fusion used while collecting training data.
pub fn training_fusion(config: &RunConfig) -> Result<Fusion> {
    let n = config.env_spec()?.n_agents;
    Ok(if config.ame_k > 0 { Fusion::RandomSubset(AmePolicy::new(config.ame_k, n)?) } else { Fusion::All })
}

/// Fusion used at test time.
pub fn evaluation_fusion(config: &RunConfig) -> Result<Fusion> {
    let n = config.env_spec()?.n_agents;
    Ok(if config.ame_k > 0 { Fusion::Vote(AmePolicy::new(config.ame_k, n)?) } else { Fusion::All })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CromacModel,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub env_steps: u64,
    pub episodes: u64,
    pub trainer_steps: u64,
}

/// Train with the config's seed, writing metrics, manifest and checkpoint
/// into `out_dir` when given.
pub fn run_training(config: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    run_training_with(config, out_dir, &mut |_| {})
}

/// As [`run_training`], calling `on_row` after every update.
pub fn run_training_with(config: &RunConfig, out_dir: Option<&Path>, on_row: &mut dyn FnMut(&MetricsRow)) -> Result<TrainOutcome> {
    let (model, mut store) = build_model(config)?;
    let mut target = store.clone();
    let mut adam = AdamState::new(store.tensors(), config.lr);
    let mut env = Env::from_id(&config.env)?;
    let n_actions = env.spec().n_actions;
    let weights = config.loss_weights()?;
    let schedule = config.exploration();
    let fusion = training_fusion(config)?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    let (mut env_rng, mut act_rng, mut train_rng) = (stream(config.seed, 1), stream(config.seed, 2), stream(config.seed, 3));
    let config_text = config.to_text();

    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(MetricsWriter::new(BufWriter::new(File::create(dir.join(METRICS_FILE))?))?)
        }
        None => None,
    };

    let base = LossSettings {
        q_input: config.train_q_input,
        kl_direction: config.kl_direction,
        gamma: config.gamma,
        double_q: config.double_q,
        with_vae: config.alpha1 > 0.0,
        with_kl: config.alpha2 > 0.0 && (config.alpha1 > 0.0 || config.train_q_input == QInput::State),
        adv_radius: (config.alpha3 > 0.0).then_some(config.kappa * config.epsilon),
        message_masks: None,
    };

    let (mut env_steps, mut episodes, mut trainer_steps) = (0u64, 0u64, 0u64);
    let mut metrics = Vec::new();
    while env_steps < config.total_steps {
        let explore = schedule.value(env_steps);
        let (ep, summary) = {
            let mut actor = Actor::new(&model, &store, fusion);
            actor.explore_eps = explore;
            actor.sample_latent = true;
            run_episode(&mut env, &mut actor, &AttackSpec::natural(), &mut env_rng, &mut act_rng)?
        };
        env_steps += summary.len as u64;
        episodes += 1;
        buffer.insert(ep);
        if buffer.len() < config.batch_size {
            continue;
        }

        let batch = buffer.sample(config.batch_size, n_actions, &mut train_rng)?;
        let settings = LossSettings { message_masks: batch.msg_masks.clone(), ..base.clone() };
        let (values, mut grads) = {
            let mut g = Graph::trainable(&store);
            let terms = compute_losses(&mut g, &model, &batch, &target, &settings, &mut train_rng)?;
            let total = total_loss(&mut g, terms.td, terms.vae, terms.kl, terms.adv, &weights, env_steps);
            let values = [g.scalar(terms.td), g.scalar(terms.vae), g.scalar(terms.kl), terms.adv.map_or(0.0, |a| g.scalar(a)), g.scalar(total)];
            (values, g.param_grads(total)?)
        };
        if values.iter().any(|v| !v.is_finite()) {
            let msg = format!(
                "non-finite loss at env step {env_steps} (trainer step {trainer_steps}): td={} psi={} phi={} adv={} total={}",
                values[0], values[1], values[2], values[3], values[4]
            );
            if let Some(dir) = out_dir {
                fs::write(dir.join("diagnostic.txt"), format!("{msg}\n\n{config_text}"))?;
            }
            return Err(Error::Numeric(msg));
        }
        clip_grad_norm(&mut grads, config.grad_clip);
        adam.adam_step(store.tensors_mut(), &grads)?;
        if config.clamp_weights {
            model.msg_enc.clamp_weights(&mut store, config.c_min(), config.c_max);
            debug_assert!(model
                .msg_enc
                .weight_ids()
                .iter()
                .all(|id| store.get(*id).data().iter().all(|w| (config.c_min()..=config.c_max).contains(w))));
        }
        trainer_steps += 1;
        if trainer_steps % config.target_update_interval == 0 {
            target_update(&store, &mut target)?;
        }

        let rows: Vec<Tensor> = (0..summary.last_messages.rows()).map(|r| Tensor::row(summary.last_messages.row_slice(r))).collect();
        let (_, int_err) = fused_message_bounds(&rows, config.epsilon, &model.msg_enc, &store)?;
        let row = MetricsRow {
            step: env_steps,
            episode: episodes,
            episode_return: summary.total_reward,
            win: summary.win,
            l_td: values[0],
            l_psi: values[1],
            l_phi: values[2],
            l_adv: values[3],
            explore_eps: explore,
            int_err_bound: int_err,
        };
        if let Some(w) = writer.as_mut() {
            w.write(&row)?;
        }
        on_row(&row);
        metrics.push(row);

        if let (Some(dir), true) = (out_dir, config.checkpoint_interval > 0 && trainer_steps % config.checkpoint_interval == 0) {
            Checkpoint::new(config_text.clone(), store.clone()).save(&dir.join(CHECKPOINT_FILE))?;
        }
    }

    let checkpoint = Checkpoint::new(config_text.clone(), store);
    if let Some(dir) = out_dir {
        if let Some(mut w) = writer {
            w.flush()?;
        }
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        let manifest = RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            env: config.env.clone(),
            method: config.method.as_str().to_string(),
            seed: config.seed,
            config_hash: hex(&checkpoint.config_hash),
            config: config_text,
            env_steps,
            episodes,
            trainer_steps,
            metrics_file: METRICS_FILE.into(),
            checkpoint_file: CHECKPOINT_FILE.into(),
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    }
    Ok(TrainOutcome { model, checkpoint, metrics, env_steps, episodes, trainer_steps })
}
