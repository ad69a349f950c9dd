use sparkv_core::analysis::SubspaceMixtureSpec;
use sparkv_core::dump::synthetic_dump;

use crate::config::RunConfig;
use crate::util::StagedWrites;
use crate::{CliError, GenSyntheticArgs};

pub fn run(args: &GenSyntheticArgs, cfg: &RunConfig) -> Result<(), CliError> {
    if args.layers == 0 {
        return Err(CliError::Usage("--layers must be >= 1".into()));
    }
    let spec = SubspaceMixtureSpec {
        ambient_dim: args.m,
        n_subspaces: args.subspaces,
        subspace_dim: args.subspace_dim,
        rows_per_subspace: args.rows_per_subspace,
        noise_sigma: args.noise_sigma,
        seed: cfg.rng_seed,
    };
    spec.validate()?;
    let dump = synthetic_dump(&spec, args.layers)?;

    let mut staged = StagedWrites::new();
    staged.stage(&args.out, |w| dump.write_to(w).map_err(Into::into))?;
    staged.commit()?;
    println!(
        "wrote dump dims=(layers={}, roles={}, tokens={}, heads={}, head_dim={}) seed={} to {}",
        dump.layers(),
        dump.roles(),
        dump.tokens(),
        dump.heads(),
        dump.head_dim(),
        cfg.rng_seed,
        args.out.display()
    );
    Ok(())
}
