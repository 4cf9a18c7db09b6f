use mpr_core::rl::{ObsNorm, ReplayBuffer, SacAgent, SacConfig, Transition, TransitionSource, sample_symmetric};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

fn main() {
    let obs_dim = 71;
    let mut agent = SacAgent::init(obs_dim, SacConfig::default(), ObsNorm::identity(obs_dim)).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let mk = |rng: &mut ChaCha12Rng, src| Transition {
        obs: (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        residual: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        reward: rng.random_range(-1.0..0.0),
        next_obs: (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        done: false,
        source: src,
    };
    let mut offline = ReplayBuffer::new();
    let mut online = ReplayBuffer::new();
    for _ in 0..500 {
        offline.push(mk(&mut rng, TransitionSource::Offline));
        online.push(mk(&mut rng, TransitionSource::Online));
    }
    // Warmup
    for _ in 0..20 {
        let b = sample_symmetric(&offline, &online, 64, &mut rng).unwrap();
        agent.update(&b, &mut rng).unwrap();
    }
    let t0 = Instant::now();
    let n = 300;
    let mut phases = [0.0f64; 4];
    for _ in 0..n {
        let b = sample_symmetric(&offline, &online, 64, &mut rng).unwrap();
        let p = agent.update_profiled(&b, &mut rng).unwrap();
        for i in 0..4 { phases[i] += p[i]; }
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("{n} updates in {dt:.2}s -> {:.1} ms/update", dt * 1000.0 / n as f64);
    println!("phases ms: targets {:.1} critic {:.1} actor {:.1} alpha+polyak {:.1}",
        phases[0]*1000.0/n as f64, phases[1]*1000.0/n as f64, phases[2]*1000.0/n as f64, phases[3]*1000.0/n as f64);
    let t0 = Instant::now();
    let (f, l) = agent.pretrain_critic(&offline, 200, &mut rng).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("200 pretrain steps in {dt:.2}s -> {:.1} ms/step (loss {f:.3}->{l:.3})", dt * 1000.0 / 200.0);
}
