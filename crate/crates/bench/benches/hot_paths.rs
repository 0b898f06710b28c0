use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use agrolearn::env::OBS_DIM;
use agrolearn::nn::{Activation, Mlp};
use agrolearn::ppo::{gae, ppo_update, PolicyNet, PolicyOptimizer, PpoConfig};
use agrolearn::rng::seeded;
use agrolearn::{ActionChoice, Environment, RewardWeights, ScenarioConfig, SurrogateEnv};
use agrolearn_bench::{filled_buffer, random_actions};

fn mlp(c: &mut Criterion) {
    let mut rng = seeded(1);
    let net = Mlp::he_uniform(&[OBS_DIM, 256, 256, 256, 25], Activation::Identity, &mut rng).unwrap();
    let x = vec![0.3; OBS_DIM];
    let g = vec![1.0; 25];
    c.bench_function("mlp_forward_256x3", |b| b.iter(|| net.forward(black_box(&x)).unwrap()));
    c.bench_function("mlp_backward_256x3", |b| {
        b.iter(|| net.backward(black_box(&x), &g).unwrap())
    });
}

fn advantage(c: &mut Criterion) {
    let n = 2048;
    let rewards: Vec<f64> = (0..n).map(|i| (i % 7) as f64 - 3.0).collect();
    let values: Vec<f64> = (0..=n).map(|i| (i % 5) as f64).collect();
    let dones: Vec<bool> = (0..n).map(|i| (i + 1) % 200 == 0).collect();
    c.bench_function("gae_2048", |b| {
        b.iter(|| gae(black_box(&rewards), &values, &dones, 0.99, 0.95).unwrap())
    });
}

fn episode(c: &mut Criterion) {
    let actions = random_actions(200, 2);
    let mut env = SurrogateEnv::new(ScenarioConfig::florida(), RewardWeights::default()).unwrap();
    c.bench_function("surrogate_episode", |b| {
        b.iter(|| {
            env.reset(7).unwrap();
            for &a in &actions {
                if env.step(ActionChoice::from_index(a).unwrap()).unwrap().done {
                    break;
                }
            }
        })
    });
}

fn update(c: &mut Criterion) {
    let cfg = PpoConfig {
        hidden: 64,
        epochs: 1,
        ..PpoConfig::default()
    };
    let net = PolicyNet::new(cfg.hidden, cfg.hidden_layers, &mut seeded(3)).unwrap();
    let buf = filled_buffer(&net, &cfg, 2048, 4).unwrap();
    let mut group = c.benchmark_group("ppo");
    group.sample_size(10);
    group.bench_function("update_2048_one_epoch_h64", |b| {
        b.iter_batched(
            || (net.clone(), PolicyOptimizer::new(&net), seeded(5)),
            |(mut n, mut opt, mut rng)| ppo_update(&mut n, &mut opt, &buf, &cfg, 3e-4, &mut rng).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, mlp, advantage, episode, update);
criterion_main!(benches);
