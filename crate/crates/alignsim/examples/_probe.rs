// scratch probe
use alignsim::aggregate::mesas_filter;
use alignsim::policy::ClientUpdate;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    for n in [10usize, 15, 20, 30] {
        for dim in [64usize, 256] {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut rej = 0usize;
            let mut tot = 0usize;
            for _ in 0..120 {
                let updates: Vec<ClientUpdate> = (0..n)
                    .map(|i| {
                        let delta: Vec<f64> = (0..dim)
                            .map(|_| {
                                let u1: f64 = rng.gen_range(1e-12..1.0f64);
                                let u2: f64 = rng.gen::<f64>();
                                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                            })
                            .collect();
                        ClientUpdate { adapter_delta: delta, n_samples: 100, client_id: i }
                    })
                    .collect();
                let out = mesas_filter(&updates).unwrap();
                rej += out.rejected.len();
                tot += n;
            }
            println!("n={n} dim={dim}: rejection rate {:.4}", rej as f64 / tot as f64);
        }
    }
}
