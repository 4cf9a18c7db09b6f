use mpr_core::rl::bc::{train_bc, BcConfig};
use mpr_core::rl::evaluate_policy;
use mpr_core::worldsim::{generate_corpus, reset, CorpusSpec, Embodiment, EnvKind, EnvParams};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let params = EnvParams::robot(EnvKind::HingedDoor);
    for (p_h, kmax) in [(0.06f64, 16u32), (0.09, 20), (0.12, 24)] {
        let spec = CorpusSpec {
            env_id: EnvKind::HingedDoor,
            n_episodes: 60,
            hesitation_prob: p_h,
            pause_length_range: [8, kmax],
            camera_jitter_std: 0.0,
            expert_noise_std: 0.1,
            embodiment: Embodiment::Robot,
            seed: 11,
            vary_style: false,
        };
        let all = generate_corpus(&spec).unwrap();
        let succ_eps: Vec<_> = all.iter().filter(|d| d.success).take(20).cloned().collect();
        let expert_rate = all.iter().filter(|d| d.success).count();
        if succ_eps.len() < 20 { println!("p_h {p_h}: only {} successes", succ_eps.len()); continue; }
        let mean_len: f64 = succ_eps.iter().map(|e| e.seq.len() as f64).sum::<f64>() / 20.0;
        let cfg = BcConfig { epochs: 700, batch_size: 64, lr: 1e-3, seed: 7 };
        let (policy, mse) = train_bc(EnvKind::HingedDoor, &succ_eps, 20, &cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(555);
        let battery: Vec<_> = (0..40).map(|_| reset(&params, &mut rng)).collect();
        let succ = evaluate_policy(&params, &battery, &policy, None, 0.0).unwrap();
        println!("p_h {p_h:.2} kmax {kmax}: expert {expert_rate}/60 demo_len {mean_len:.0} mse {mse:.4} eval {succ:.2}");
    }
}
