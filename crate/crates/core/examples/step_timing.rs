//! Times one forward + backward pass of the reconstructor at a few sizes.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sud::diffcore::{Graph, Tensor};
use sud::losses::{loss_graph, DiceOptions, LabelMap, LossKind, ProbField};
use sud::nets::{build_reconstructor, forward_graph, NetConfig};

fn main() {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    for (base, cap, cpl) in [(8, 64, 2), (4, 32, 2), (4, 32, 1), (6, 48, 1)] {
        let mut cfg = NetConfig::reconstructor(1, 4);
        cfg.base_features = base;
        cfg.max_features = cap;
        cfg.convs_per_level = cpl;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = build_reconstructor(&cfg, &mut rng).unwrap();
        let x = Tensor::full(&[1, size, size], 0.3);
        let y = ProbField::one_hot(&LabelMap::filled(size, size, 4, 1));
        let reps = 20;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut g = Graph::new();
            let b = p.bind(&mut g, "", true);
            let xv = g.input("x", x.clone());
            let out = forward_graph(&cfg, &mut g, &b, xv, Some(&mut rng)).unwrap();
            let l = loss_graph(LossKind::CrossEntropy, &mut g, &y, out, DiceOptions::default()).unwrap();
            let _ = g.backward(l, None).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        println!("base {base} cap {cap} convs/level {cpl}: params {} fwd+bwd {:.2} ms", p.num_parameters(), dt * 1e3);
    }
}
