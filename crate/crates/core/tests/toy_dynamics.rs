use truthlab::datagen::WorldSpec;
use truthlab::toy::{fit_structured, minibatch_sgd_train, sequential_training, OneHotConfig, SgdConfig};

/// First snapshot step whose value reaches half of the final value.
fn half_time(steps: &[usize], values: &[f64]) -> usize {
    let target = 0.5 * values[values.len() - 1];
    assert!(target > 0.0, "block did not grow: final mean {}", values[values.len() - 1]);
    let i = values.iter().position(|&v| v >= target).expect("final value reaches its own half");
    steps[i]
}

#[test]
fn subject_block_forms_before_attribute_block() {
    let n = 20;
    let config = OneHotConfig::new(n).unwrap();
    let world = WorldSpec::toy(n, 0).unwrap();
    let sgd = SgdConfig {
        rho: 0.8,
        lr: 1.0,
        batch_size: 16,
        steps: 3000,
        snapshot_every: 10,
        seed: 0,
    };
    let snaps = minibatch_sgd_train(&config, &world, &sgd).unwrap();
    let steps: Vec<usize> = snaps.iter().map(|s| s.step).collect();
    let fits: Vec<_> = snaps.iter().map(|s| fit_structured(&config, &s.w, &world).unwrap()).collect();
    let subject: Vec<f64> = fits.iter().map(|f| f.blocks.ex_to_ugx).collect();
    let attribute: Vec<f64> = fits.iter().map(|f| f.blocks.ey_to_eginv).collect();
    let (ts, ta) = (half_time(&steps, &subject), half_time(&steps, &attribute));
    println!("half-time subject block {ts}, attribute block {ta}");
    assert!(ts < ta, "subject block at {ts}, attribute block at {ta}");

    let last = fits.last().unwrap();
    println!("final coefficients {:?}", last.coeffs);
    assert!(last.positive, "learned coefficients should all be positive");
    assert!(last.blocks.ex_to_ugx > 0.0, "{:?}", last.blocks);
    assert!(last.blocks.ex_to_ex < 0.0, "negative identity on subjects: {:?}", last.blocks);
}

#[test]
fn sequential_iterates_match_limits() {
    let blocks = |n: usize| {
        let config = OneHotConfig::euclidean_without_positions(n)
            .unwrap()
            .with_max_enumeration_n(128);
        let world = WorldSpec::toy(n, 0).unwrap();
        let it = sequential_training(&config, &world, 1.0, Some(n as f64)).unwrap();
        let w2 = fit_structured(&config, &it.w2, &world).unwrap();
        let w3 = fit_structured(&config, &it.w3, &world).unwrap();
        (w2.blocks.ex_to_ugx, w3.residual_max)
    };
    let expected = 1.0 + 1.0 / (2.0 * 2f64.sqrt());
    let (mean20, off20) = blocks(20);
    println!("N=20 block mean {mean20} (limit {expected}), off-structure max {off20}");
    assert!((mean20 - expected).abs() <= 10.0 / 20.0, "{mean20}");

    let (_, off40) = blocks(40);
    let (_, off80) = blocks(80);
    println!("off-structure max: N=20 {off20}, N=40 {off40}, N=80 {off80}");
    for (small, large) in [(off20, off40), (off40, off80)] {
        let ratio = small / large;
        assert!((1.0..=4.0).contains(&ratio), "halving ratio {ratio}");
    }
}
