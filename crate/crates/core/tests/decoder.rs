mod common;

use common::{max_gradient_error, random_batch, tiny_decoder};
use mmdecode::decoder::{init_params, AdamConfig, AdamState, Architecture};
use mmdecode::Band;

#[test]
fn gradient_matches_finite_differences_on_several_seeds() {
    for seed in 0..3 {
        let params = tiny_decoder(seed, 4);
        let batch = random_batch(seed + 100, 4, 32, 4);
        let (err, at) = max_gradient_error(&params, &batch, 1e-5);
        assert!(
            err < 1e-4,
            "seed {seed}: relative error {err:e} at parameter {at}"
        );
    }
}

#[test]
fn different_seeds_differ() {
    let a = init_params(1, Band::Gamma, Architecture::default(), 512.0).unwrap();
    let b = init_params(2, Band::Gamma, Architecture::default(), 512.0).unwrap();
    assert!(a.values.iter().zip(&b.values).any(|(x, y)| x != y));
    assert_eq!(a.layout().total, a.values.len());
}

#[test]
fn adam_descends_a_quadratic() {
    let mut x = vec![3.0, -2.0];
    let mut state = AdamState::new(
        2,
        AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
    );
    for _ in 0..2000 {
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        state.step(&mut x, &g).unwrap();
    }
    assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    assert_eq!(state.t, 2000);
}
