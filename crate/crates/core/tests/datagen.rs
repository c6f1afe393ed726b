use proptest::prelude::*;
use truthlab::datagen::{oracle_conditional, sample_batch, sample_example, Batch, WorldSpec};
use truthlab::rng::{self, Stream};

#[test]
fn golden_trace() {
    let world = WorldSpec::toy(8, 3).unwrap();
    let mut rng = rng::stream(11, Stream::Train);
    let tokens: Vec<[usize; 4]> = sample_batch(&world, 0.7, 6, &mut rng)
        .unwrap()
        .iter()
        .map(|e| e.tokens())
        .collect();
    assert_eq!(world.g, GOLDEN_G);
    assert_eq!(tokens, GOLDEN_TOKENS);
}

const GOLDEN_G: [usize; 8] = [0, 5, 4, 7, 6, 3, 2, 1];
const GOLDEN_TOKENS: [[usize; 4]; 6] = [
    [3, 8, 2, 13],
    [2, 13, 1, 10],
    [1, 13, 4, 14],
    [5, 11, 3, 10],
    [1, 8, 0, 11],
    [4, 14, 6, 10],
];

fn within_binomial(hits: usize, k: usize, p: f64) -> bool {
    let freq = hits as f64 / k as f64;
    (freq - p).abs() <= 4.0 * (p * (1.0 - p) / k as f64).sqrt()
}

#[test]
fn truth_frequencies_match_oracle() {
    let k = 200_000;
    for &(n_attributes, rho) in &[(2usize, 0.5), (16, 0.9), (50, 0.3)] {
        let world = WorldSpec::random(30, n_attributes, 5).unwrap();
        let mut rng = rng::stream(1, Stream::Custom(30));
        let (mut first, mut second) = (0, 0);
        for _ in 0..k {
            let e = sample_example(&world, rho, &mut rng).unwrap();
            first += (e.y == world.truth_token(e.x)) as usize;
            second += (e.y_prime == world.truth_token(e.x_prime)) as usize;
        }
        let oracle = oracle_conditional(&world, rho, 0).unwrap();
        let p = oracle[world.g[0]];
        assert!((p - (rho + (1.0 - rho) / n_attributes as f64)).abs() < 1e-15);
        assert!(within_binomial(second, k, p), "y′ rate {} vs {p}", second as f64 / k as f64);
        assert!(within_binomial(first, k, p), "y rate {} vs {p}", first as f64 / k as f64);
    }
}

#[test]
fn batch_csv_round_trip_through_text() {
    let world = WorldSpec::toy(5, 0).unwrap();
    let mut rng = rng::stream(0, Stream::Train);
    let examples = sample_batch(&world, 0.6, 40, &mut rng).unwrap();
    let batch = Batch {
        examples,
        rho: 0.6,
        seed: 0,
    };
    let mut text = Vec::new();
    batch.write_csv(&mut text).unwrap();
    assert!(text.starts_with(b"x,y,x_prime,y_prime,truth\n"));
    let back = Batch::read_csv(text.as_slice(), 0.6, 0).unwrap();
    assert_eq!(back.sequences(), batch.sequences());
    assert_eq!(back.labels(), batch.labels());
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn oracle_is_a_distribution(n_attributes in 1usize..600, rho in 0.0f64..=1.0, x in 0usize..10) {
        let world = WorldSpec::random(10, n_attributes, 1).unwrap();
        let probs = oracle_conditional(&world, rho, x).unwrap();
        let total: f64 = probs.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(probs.iter().all(|&p| p >= 0.0));
    }
}
