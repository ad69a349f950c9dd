use sparkv_core::dict::DictRole;
use sparkv_core::dump::TensorDump;
use sparkv_core::engine::{write_snapshot, CompressedKvState, KeyedState};
use sparkv_core::tensor::l2_distance;

use crate::config::RunConfig;
use crate::util::{load_dict_dir, require_dict, StagedWrites};
use crate::{CliError, CompressArgs};

pub fn run(args: &CompressArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let dump = TensorDump::load(&args.dump)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.dump.display())))?;
    if dump.roles() != 2 {
        return Err(CliError::Data(format!(
            "compress needs key and value roles, dump has {}",
            dump.roles()
        )));
    }
    let dicts = load_dict_dir(&args.dicts)?;
    let cache_cfg = cfg.cache_config();
    let m = dump.head_dim();

    let mut states: Vec<KeyedState> = Vec::new();
    // (rel error sum, row count) per (layer, role)
    let mut errors = vec![(0.0f64, 0usize); dump.layers() * 2];
    for layer in 0..dump.layers() {
        let dict_k = require_dict(&dicts, layer as u16, DictRole::Key)?;
        let dict_v = require_dict(&dicts, layer as u16, DictRole::Value)?;
        if dict_k.head_dim() != m || dict_v.head_dim() != m {
            return Err(CliError::Data(format!(
                "dump head_dim {m} does not match layer {layer} dictionaries ({}, {})",
                dict_k.head_dim(),
                dict_v.head_dim()
            )));
        }
        for head in 0..dump.heads() {
            let keys = dump.rows_for(layer, 0, head)?;
            let values = dump.rows_for(layer, 1, head)?;
            let state = CompressedKvState::prefill(
                &keys,
                &values,
                dict_k.clone(),
                dict_v.clone(),
                cache_cfg.clone(),
            )?;
            let (k_hat, v_hat) = state.reconstruct_cache()?;
            for (role, (orig, recon)) in [(0usize, (&keys, &k_hat)), (1, (&values, &v_hat))] {
                let slot = &mut errors[layer * 2 + role];
                for i in 0..orig.rows() {
                    slot.0 += relative_row_error(orig.row(i), recon.row(i));
                    slot.1 += 1;
                }
            }
            states.push(KeyedState {
                layer: layer as u16,
                head: head as u16,
                state,
            });
        }
    }

    // aggregate stats
    let mut compressed = 0usize;
    let mut buffered = 0usize;
    let mut full = 0usize;
    let mut k_bytes = 0usize;
    let mut v_bytes = 0usize;
    let mut k_rows = 0usize;
    for ks in &states {
        let stats = ks.state.memory_stats();
        compressed += stats.compressed_bytes;
        buffered += stats.buffer_bytes;
        full += stats.full_cache_bytes;
        k_bytes += ks.state.k_block().packed_byte_size();
        v_bytes += ks.state.v_block().packed_byte_size();
        k_rows += ks.state.compressed_rows();
    }

    for layer in 0..dump.layers() {
        for role in 0..2usize {
            let (sum, count) = errors[layer * 2 + role];
            println!(
                "layer={layer} role={} mean_rel_error={:.6}",
                if role == 0 { "key" } else { "value" },
                sum / count.max(1) as f64
            );
        }
    }
    if k_rows > 0 {
        println!(
            "k_bytes_per_row={:.2} v_bytes_per_row={:.2}",
            k_bytes as f64 / k_rows as f64,
            v_bytes as f64 / k_rows as f64
        );
    }
    let percent = 100.0 * (compressed + buffered) as f64 / full.max(1) as f64;
    println!(
        "kv_size_percent={percent:.4} compressed_bytes={compressed} \
         buffer_bytes={buffered} full_cache_bytes={full}"
    );

    let mut staged = StagedWrites::new();
    staged.stage(&args.out, |w| {
        write_snapshot(w, &states).map_err(Into::into)
    })?;
    staged.commit()?;
    println!("state written to {}", args.out.display());
    Ok(())
}

fn relative_row_error(orig: &[f32], recon: &[f32]) -> f64 {
    let norm: f64 = orig.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return 0.0;
    }
    l2_distance(orig, recon) / norm
}
