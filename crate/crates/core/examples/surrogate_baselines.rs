//! Prints season outcomes of a few hand-written management rules on the
//! surrogate environment.

use agrolearn::env::{idx, run_episode, ActionChoice, RewardWeights, ScenarioConfig, SurrogateEnv};
use agrolearn::policy::{FixedManagement, Policy};

fn summarize(name: &str, scenario: &ScenarioConfig, mut rule: impl FnMut(&[f64]) -> ActionChoice) {
    let mut env = SurrogateEnv::new(scenario.clone(), RewardWeights::default()).unwrap();
    let seeds = 0..40u64;
    let n = seeds.clone().count() as f64;
    let (mut score, mut yld, mut irr, mut nit, mut leach) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for seed in seeds {
        let rows = run_episode(&mut env, seed, |o| rule(o)).unwrap();
        score += rows.iter().map(|r| r.reward).sum::<f64>();
        let last = rows.last().unwrap();
        yld += last.info.yield_kg_ha;
        irr += rows.iter().map(|r| r.info.irrigation_applied).sum::<f64>();
        nit += rows.iter().map(|r| r.info.nitrogen_applied).sum::<f64>();
        leach += rows.iter().map(|r| r.info.nitrate_leached).sum::<f64>();
    }
    println!(
        "{:>10} {:<28} score {:>8.1} yield {:>8.1} irrigation {:>6.1} nitrogen {:>6.1} leached {:>6.1}",
        scenario.name.to_string(),
        name,
        score / n,
        yld / n,
        irr / n,
        nit / n,
        leach / n
    );
}

fn main() {
    for scenario in [ScenarioConfig::florida(), ScenarioConfig::zaragoza()] {
        let mut fixed = FixedManagement::default();
        summarize("fixed management", &scenario, |o| fixed.decide(o).unwrap());
        summarize("no inputs", &scenario, |_| ActionChoice::from_index(0).unwrap());
        summarize("nitrogen only", &scenario, |o| {
            let day = o[idx::DAY] as u32;
            let n = if day == 10 || day == 45 { 80.0 } else { 0.0 };
            ActionChoice::from_amounts(0.0, n).unwrap()
        });
        summarize("moisture-triggered", &scenario, |o| {
            let day = o[idx::DAY] as u32;
            let n = if (day == 20 || day == 50) && o[idx::RAINFALL] < 2.0 {
                80.0
            } else {
                0.0
            };
            let w = if o[idx::SOIL_MOISTURE] < 0.21 && o[idx::RAINFALL] < 3.0 {
                12.0
            } else {
                0.0
            };
            ActionChoice::from_amounts(w, n).unwrap()
        });
        summarize("heat-aware", &scenario, |o| {
            let day = o[idx::DAY] as u32;
            let n = if (day == 20 || day == 50) && o[idx::RAINFALL] < 2.0 {
                80.0
            } else {
                0.0
            };
            let thresh = if o[idx::TEMPERATURE] > 29.0 { 0.24 } else { 0.20 };
            let w = if o[idx::SOIL_MOISTURE] < thresh && o[idx::RAINFALL] < 3.0 {
                12.0
            } else {
                0.0
            };
            ActionChoice::from_amounts(w, n).unwrap()
        });
    }
}
