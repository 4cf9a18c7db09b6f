use mpr_core::numcore::nn::{Mlp, ParamStore};
use mpr_core::numcore::tape::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

fn timeit<F: FnMut() -> f64>(name: &str, reps: usize, mut f: F) {
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..reps {
        sink += f();
    }
    println!("{name}: {:.3} ms (sink {sink:.1})", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let _net = Mlp::orthogonal(&mut store, "c", &[77, 256, 256, 256, 1], true, 1.4, 1.0, &mut rng).unwrap();
    let x: Vec<f64> = (0..64 * 77).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..256 * 256).map(|_| rng.random_range(-0.06..0.06)).collect();
    let h: Vec<f64> = (0..64 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let reps = 300;

    timeit("register only", reps, || {
        let mut tape = Tape::new();
        let ids = store.register(&mut tape);
        ids.len() as f64
    });
    timeit("one 64x256x256 tape matmul", reps, || {
        let mut tape = Tape::new();
        let a = tape.leaf(64, 256, &h, true);
        let b = tape.leaf(256, 256, &w, true);
        let c = tape.matmul(a, b).unwrap();
        tape.value(c)[0]
    });
    timeit("raw 64x256x256 matmul", reps, || {
        let mut out = vec![0.0; 64 * 256];
        mpr_core::numcore::tape::matmul_acc(&h, &w, &mut out, 64, 256, 256);
        out[0]
    });
    timeit("leaf 256x256 alone", reps, || {
        let mut tape = Tape::new();
        let b = tape.leaf(256, 256, &w, true);
        tape.value(b)[0]
    });
    timeit("relu 64x256", reps, || {
        let mut tape = Tape::new();
        let a = tape.leaf(64, 256, &h, true);
        let r = tape.relu(a).unwrap();
        tape.value(r)[0]
    });
    timeit("layernorm 64x256", reps, || {
        let mut tape = Tape::new();
        let a = tape.leaf(64, 256, &h, true);
        let g = tape.leaf(1, 256, &w[..256], true);
        let be = tape.leaf(1, 256, &w[256..512], true);
        let l = tape.layernorm(a, g, be).unwrap();
        tape.value(l)[0]
    });
    let _ = x;
}
