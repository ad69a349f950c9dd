use sparkv_core::dict::DictRole;
use sparkv_core::dump::TensorDump;
use sparkv_core::sweep::threshold_sweep;
use sparkv_core::tensor::DenseMatrix;

use crate::config::RunConfig;
use crate::util::{load_dict_dir, require_dict, StagedWrites};
use crate::{CliError, SweepArgs};

pub fn run(args: &SweepArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let thresholds = parse_thresholds(&args.thresholds)?;
    let dump = TensorDump::load(&args.dump)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.dump.display())))?;
    let dicts = load_dict_dir(&args.dicts)?;

    let mut sets: Vec<(DenseMatrix, &sparkv_core::Dictionary)> = Vec::new();
    for layer in 0..dump.layers() {
        for role_idx in 0..dump.roles().min(2) {
            let role = if role_idx == 0 {
                DictRole::Key
            } else {
                DictRole::Value
            };
            let dict = require_dict(&dicts, layer as u16, role)?;
            if dict.head_dim() != dump.head_dim() {
                return Err(CliError::Data(format!(
                    "dump head_dim {} does not match layer {layer} dictionary {}",
                    dump.head_dim(),
                    dict.head_dim()
                )));
            }
            sets.push((dump.samples_for(layer, role_idx)?, dict));
        }
    }
    let set_refs: Vec<(&DenseMatrix, &sparkv_core::Dictionary)> =
        sets.iter().map(|(m, d)| (m, *d)).collect();
    let rows = threshold_sweep(&set_refs, &cfg.omp_config(), cfg.value_mode, &thresholds)?;

    let mut table = String::from("delta\tmean_sparsity\tkv_size_percent\tmean_rel_error\n");
    for row in &rows {
        table.push_str(&format!(
            "{:.3}\t{:.4}\t{:.4}\t{:.6}\n",
            row.delta, row.mean_sparsity, row.kv_size_percent, row.mean_rel_error
        ));
    }
    print!("{table}");

    if let Some(out) = &args.out {
        let mut staged = StagedWrites::new();
        staged.stage(out, |w| {
            use std::io::Write;
            w.write_all(table.as_bytes())
                .map_err(|e| CliError::Data(e.to_string()))
        })?;
        staged.commit()?;
    }
    Ok(())
}

fn parse_thresholds(raw: &str) -> Result<Vec<f32>, CliError> {
    let values: Vec<f32> = raw
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f32>()
                .map_err(|e| CliError::Usage(format!("bad threshold '{s}': {e}")))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(CliError::Usage("threshold list is empty".into()));
    }
    for v in &values {
        if !(*v > 0.0 && *v <= 1.0) {
            return Err(CliError::Usage(format!("threshold {v} outside (0, 1]")));
        }
    }
    Ok(values)
}
