use truthlab::dense::{dense_train, diagonal_contrast, sorted_kernel_view, vo_kernel, DenseConfig};

/// A full reduced-scale training run (minutes in release); run with
/// `cargo test --release -p truthlab --test kernel_structure -- --ignored`.
/// The diagonal belongs to the truth-encoding phase, which this scale does
/// not reach at seed 0 (contrast ≈ 0.4σ), so the check currently fails.
#[test]
#[ignore = "slow; fails until the second training phase emerges at this scale"]
fn frozen_embedding_kernel_has_dominant_diagonal() {
    let config = DenseConfig {
        embeddings_trainable: false,
        ..DenseConfig::ci()
    };
    let run = dense_train(&config).unwrap();
    let kernel = &vo_kernel(&run.params)[0];
    let view = sorted_kernel_view(kernel, &run.world, 20).unwrap();
    let k = 20;
    let upper_right = view.matrix.slice(ndarray::s![..k, k..]).to_owned();
    println!("upper-right (x → g(x)) contrast {:?}", diagonal_contrast(&upper_right));
    let (diag, off_mean, off_std) = diagonal_contrast(&view.lower_left());
    println!("lower-left contrast: diagonal {diag:.4e}, off-diagonal {off_mean:.4e} ± {off_std:.4e}");
    assert!(diag - off_mean > 3.0 * off_std, "{diag} {off_mean} {off_std}");
}
