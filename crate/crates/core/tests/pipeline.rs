//! Library-level pipeline: train a dictionary on synthetic data, compress a
//! stream through prefill + decode, snapshot it, and check the books.

use sparkv_core::analysis::{generate_subspace_mixture, SubspaceMixtureSpec};
use sparkv_core::dict::{train_dictionary, DictRole, LrSchedule, TrainConfig};
use sparkv_core::engine::{
    read_snapshot, write_snapshot, CacheConfig, CompressedKvState, KeyedState,
};
use sparkv_core::tensor::DenseVector;
use sparkv_core::ValueMode;

#[test]
fn train_compress_decode_snapshot_cycle() {
    let spec = SubspaceMixtureSpec {
        ambient_dim: 16,
        n_subspaces: 4,
        subspace_dim: 2,
        rows_per_subspace: 80,
        noise_sigma: 0.01,
        seed: 99,
    };
    let data = generate_subspace_mixture(&spec).unwrap();
    let train = data.row_range(0, 256).unwrap();
    let stream = data.row_range(256, 320).unwrap();

    let train_cfg = TrainConfig {
        learning_rate: 3e-3,
        epochs: 6,
        schedule: LrSchedule::CosineDecay,
        sparsity: 4,
        minibatch_rows: 64,
        rng_seed: 5,
        ..TrainConfig::default()
    };
    let (dict, report) = train_dictionary(&train, 16, 64, &train_cfg).unwrap();
    assert_eq!(report.epoch_mean_loss.len(), 6);
    assert!(report.atom_norm_max_deviation <= 1e-5);

    // same dictionary for both roles is fine for a single-stream cycle
    let cfg = CacheConfig {
        sparsity: 4,
        buffer_len: 8,
        rel_error_threshold: Some(0.3),
        value_mode: ValueMode::Fp8E4M3,
        ..CacheConfig::new(4)
    };
    let prompt_k = stream.row_range(0, 48).unwrap();
    let prompt_v = stream.row_range(0, 48).unwrap();
    let mut state = CompressedKvState::prefill(
        &prompt_k,
        &prompt_v,
        dict.clone().with_role(DictRole::Key, 0),
        dict.clone().with_role(DictRole::Value, 0),
        cfg,
    )
    .unwrap();
    assert_eq!(state.compressed_rows(), 40);
    assert_eq!(state.buffered_rows(), 8);

    for i in 48..64 {
        let row = DenseVector::new(stream.row(i).to_vec()).unwrap();
        let out = state.decode_step(&row, &row, &row).unwrap();
        assert_eq!(out.scores.len(), i + 1);
        state.check_invariants().unwrap();
    }
    assert_eq!(state.token_count(), 64);

    let stats = state.memory_stats();
    assert_eq!(stats.full_cache_bytes, 64 * 2 * 16 * 2);
    assert!(
        stats.kv_size_percent < 100.0,
        "compression achieved nothing"
    );
    // early termination engaged: some rows need fewer than 4 atoms
    let mean_nnz = state
        .k_block()
        .row_lengths()
        .iter()
        .map(|l| *l as f64)
        .sum::<f64>()
        / state.compressed_rows() as f64;
    assert!(mean_nnz <= 4.0);

    let mut buf = Vec::new();
    write_snapshot(
        &mut buf,
        &[KeyedState {
            layer: 0,
            head: 0,
            state: state.clone(),
        }],
    )
    .unwrap();
    let loaded = read_snapshot(&mut buf.as_slice(), |_, role| {
        Ok(dict.clone().with_role(role, 0))
    })
    .unwrap();
    assert_eq!(loaded[0].state.memory_stats(), stats);
    let (k1, _) = state.reconstruct_cache().unwrap();
    let (k2, _) = loaded[0].state.reconstruct_cache().unwrap();
    assert_eq!(k1.as_slice(), k2.as_slice());
}
