//! Fixtures shared by the benchmarks.

use agrolearn::env::{N_ACTIONS, OBS_DIM};
use agrolearn::ppo::{PolicyNet, PpoConfig, RolloutBuffer, Transition};
use agrolearn::rng::seeded;
use agrolearn::Result;
use rand::Rng;

/// A finalized buffer of `n` synthetic steps for `net`, episodes of 200 steps.
pub fn filled_buffer(net: &PolicyNet, cfg: &PpoConfig, n: usize, seed: u64) -> Result<RolloutBuffer> {
    let mut rng = seeded(seed);
    let mut buf = RolloutBuffer::new(n);
    for i in 0..n {
        let observation: Vec<f64> = (0..OBS_DIM).map(|_| rng.random_range(0.0..1.0)).collect();
        let sample = net.act(&observation, &mut rng)?;
        buf.push(Transition {
            observation,
            action: sample.action,
            log_prob: sample.log_prob,
            reward_ext: rng.random_range(-50.0..0.0),
            reward_int: rng.random_range(0.0..1.0),
            v_ext: sample.v_ext,
            v_int: sample.v_int,
            done: (i + 1) % 200 == 0,
        })?;
    }
    buf.finalize((0.0, 0.0), cfg, 0.5)?;
    Ok(buf)
}

/// Uniformly random action indices.
pub fn random_actions(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.random_range(0..N_ACTIONS)).collect()
}
