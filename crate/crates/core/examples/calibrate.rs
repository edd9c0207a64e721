//! Recomputes the reference scores stored in `envs`.
use dits::data::Behavior;
use dits::envs::*;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    for env in [EnvName::Bridge2d, EnvName::Chain1d] {
        for (b, noise) in [
            (Behavior::Random, 0.0),
            (Behavior::Expert, 0.0),
            (Behavior::Medium, medium_noise(env)),
        ] {
            let (m, s) = reference_score(env, b, noise, n, 0);
            println!("{env} {b:?} noise={noise} mean={m:.6} std={s:.6}");
        }
    }
}
