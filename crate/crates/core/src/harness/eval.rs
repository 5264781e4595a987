use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::actor::{Actor, Policy};
use super::config::RunConfig;
use super::train::{build_model, evaluation_fusion};
use crate::attacks::AttackSpec;
use crate::bounds::{fused_message_bounds, BoundReportWriter};
use crate::diffcore::{Checkpoint, ParamStore, Tensor};
use crate::envs::Env;
use crate::error::{contract_err, Error, Result};
use crate::latent::state_encoder_calls;
use crate::marl::CromacModel;

/// Win rates of one attack setting.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub attack: AttackSpec,
    pub episodes_per_seed: usize,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
    pub mean_return: f64,
    /// Largest per-coordinate message change seen in any step.
    pub max_deviation: f64,
}

/// Random stream of evaluation episode `episode` under `seed`, kept apart
/// from the training streams.
fn episode_rng(seed: u64, episode: u64, which: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1_0000_0000);
    r.set_stream(2 * episode + which);
    r
}

/// Rebuild the model a checkpoint was trained with.
pub fn load_model(ckpt: &Checkpoint) -> Result<(RunConfig, CromacModel, ParamStore)> {
    let config = RunConfig::parse(&ckpt.config_text)?;
    let (model, mut store) = build_model(&config)?;
    let ids: Vec<_> = store.ids().collect();
    store.copy_from(&ckpt.params, &ids).map_err(|e| Error::Contract(format!("checkpoint does not fit its config: {e}")))?;
    Ok((config, model, store))
}

/// Play `episodes` greedy episodes per seed under `attack`.
pub fn evaluate_policy<P: Policy, W: Write>(
    env_id: &str,
    policy: &mut P,
    attack: &AttackSpec,
    episodes: usize,
    seeds: &[u64],
    mut latents: Option<(&mut BoundReportWriter<W>, &CromacModel, &ParamStore)>,
) -> Result<EvalReport> {
    if episodes == 0 || seeds.is_empty() {
        return contract_err("evaluation needs at least one episode and one seed");
    }
    let mut env = Env::from_id(env_id)?;
    let (mut per_seed, mut returns, mut max_dev) = (Vec::new(), 0.0, 0.0f64);
    let mut logged_step = 0u64;
    for (si, &seed) in seeds.iter().enumerate() {
        let mut wins = 0usize;
        for e in 0..episodes as u64 {
            let (mut env_rng, mut act_rng) = (episode_rng(seed, e, 0), episode_rng(seed, e, 1));
            policy.reset();
            let mut r = env.reset(&mut env_rng);
            loop {
                let d = policy.act(&r.obs, attack, &mut act_rng)?;
                if d.deviation > attack.budget() {
                    return contract_err(format!("message moved by {} under budget {}", d.deviation, attack.budget()));
                }
                max_dev = max_dev.max(d.deviation);
                if let (Some((w, model, store)), 0) = (latents.as_mut(), si) {
                    let rows: Vec<Tensor> = (0..d.messages.rows()).map(|i| Tensor::row(d.messages.row_slice(i))).collect();
                    let (fused, err) = fused_message_bounds(&rows, attack.budget(), &model.msg_enc, store)?;
                    for agent in 0..rows.len() {
                        w.write_row(logged_step, agent, &fused.mean, err)?;
                    }
                    logged_step += 1;
                }
                r = env.step(&d.actions, &mut env_rng)?;
                returns += r.reward;
                if r.done() {
                    wins += usize::from(r.info.win);
                    break;
                }
            }
        }
        per_seed.push(wins as f64 / episodes as f64);
    }
    let k = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / k;
    let std = (per_seed.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / k).sqrt();
    Ok(EvalReport {
        attack: *attack,
        episodes_per_seed: episodes,
        per_seed,
        mean,
        std,
        mean_return: returns / (k * episodes as f64),
        max_deviation: max_dev,
    })
}

/// Greedy decentralised evaluation of a checkpoint on its own environment.
/// Only the message path runs; the state encoder is never called.
pub fn run_evaluation(ckpt: &Checkpoint, attack: &AttackSpec, episodes: usize, seeds: &[u64]) -> Result<EvalReport> {
    run_evaluation_with::<Vec<u8>>(ckpt, None, attack, episodes, seeds, None)
}

/// As [`run_evaluation`], optionally checking the environment id and
/// streaming fused-latent bounds of the first seed.
pub fn run_evaluation_with<W: Write>(
    ckpt: &Checkpoint,
    env_id: Option<&str>,
    attack: &AttackSpec,
    episodes: usize,
    seeds: &[u64],
    latents: Option<&mut BoundReportWriter<W>>,
) -> Result<EvalReport> {
    let (config, model, store) = load_model(ckpt)?;
    if let Some(id) = env_id {
        let want = Env::from_id(id)?.spec().clone();
        if want != config.env_spec()? {
            return contract_err(format!("checkpoint was trained on {}, not {id}", config.env));
        }
    }
    let mut actor = Actor::new(&model, &store, evaluation_fusion(&config)?);
    let before = state_encoder_calls();
    let report = evaluate_policy(&config.env, &mut actor, attack, episodes, seeds, latents.map(|w| (w, &model, &store)))?;
    if state_encoder_calls() != before {
        return contract_err("state encoder ran during decentralised evaluation");
    }
    Ok(report)
}

/// The eight attack settings of the robustness table: natural, random,
/// PGD and FGSM at the training budget, then FGSM at the four listed budgets.
pub fn table_attacks(train_eps: f64, fgsm_budgets: [f64; 4]) -> Result<Vec<(String, AttackSpec)>> {
    let mut out = vec![
        ("natural".to_string(), AttackSpec::natural()),
        ("random".to_string(), AttackSpec::random(train_eps)?),
        ("pgd".to_string(), AttackSpec::pgd(train_eps)?),
        ("fgsm".to_string(), AttackSpec::fgsm(train_eps)?),
    ];
    for (i, e) in fgsm_budgets.iter().enumerate() {
        out.push((format!("fgsm_{}", i + 1), AttackSpec::fgsm(*e)?));
    }
    Ok(out)
}

/// FGSM budgets (1) to (4) per environment family.
pub fn fgsm_schedule(env: &str, train_eps: f64) -> [f64; 4] {
    if env.starts_with("hallway") {
        [0.3, 0.4, 0.6, 0.7]
    } else if env.starts_with("lbf") {
        [0.02, 0.25, 0.35, 0.4]
    } else if env.starts_with("tj") {
        [0.0003, 0.0004, 0.0006, 0.0007]
    } else {
        [0.6, 0.8, 1.2, 1.4].map(|r| r * train_eps)
    }
}
