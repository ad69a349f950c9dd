use sparkv_core::dict::{train_dictionary, DictRole, TrainConfig};
use sparkv_core::dump::TensorDump;

use crate::config::RunConfig;
use crate::util::{dict_file_name, report_file_name, StagedWrites};
use crate::{CliError, TrainArgs};

pub fn run(args: &TrainArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let dump = TensorDump::load(&args.dump)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.dump.display())))?;
    if dump.roles() > 2 {
        return Err(CliError::Data(format!(
            "dump carries {} roles, expected at most key/value",
            dump.roles()
        )));
    }
    if dump.layers() > u16::MAX as usize {
        return Err(CliError::Data(
            "more layers than the dictionary format supports".into(),
        ));
    }
    let m = dump.head_dim();
    if cfg.sparsity > m.min(cfg.dict_width) {
        return Err(CliError::Usage(format!(
            "sparsity {} exceeds min(head_dim {m}, dict_width {})",
            cfg.sparsity, cfg.dict_width
        )));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("create {}: {e}", args.out.display())))?;

    let base = cfg.train_config();
    let mut staged = StagedWrites::new();
    for layer in 0..dump.layers() {
        for role_idx in 0..dump.roles() {
            let role = if role_idx == 0 {
                DictRole::Key
            } else {
                DictRole::Value
            };
            let samples = dump.samples_for(layer, role_idx)?;
            let train_cfg = TrainConfig {
                // distinct deterministic stream per (layer, role)
                rng_seed: cfg.rng_seed.wrapping_add((layer * 2 + role_idx) as u64),
                ..base.clone()
            };
            let (dict, report) = train_dictionary(&samples, m, cfg.dict_width, &train_cfg)?;
            let dict = dict.with_role(role, layer as u16);
            staged.stage(&args.out.join(dict_file_name(layer as u16, role)), |w| {
                dict.write_to(w).map_err(Into::into)
            })?;
            staged.stage(&args.out.join(report_file_name(layer as u16, role)), |w| {
                report.write_csv(w).map_err(Into::into)
            })?;
            println!(
                "layer={layer} role={} rows={} epochs={} final_mean_rel_error={:.6} \
                 atom_norm_max_deviation={:.2e}",
                role.label(),
                samples.rows(),
                report.epoch_mean_loss.len(),
                report.final_mean_rel_error,
                report.atom_norm_max_deviation
            );
        }
    }
    staged.commit()?;
    println!("dictionaries written to {}", args.out.display());
    Ok(())
}
