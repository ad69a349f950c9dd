use sparkv_core::analysis::cosine_similarity_map;
use sparkv_core::dump::TensorDump;

use crate::config::RunConfig;
use crate::util::StagedWrites;
use crate::{CliError, SimilarityArgs};

pub fn run(args: &SimilarityArgs, _cfg: &RunConfig) -> Result<(), CliError> {
    let dump = TensorDump::load(&args.dump)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.dump.display())))?;
    if args.layer >= dump.layers() {
        return Err(CliError::Usage(format!(
            "layer {} out of range: dump has {} layers",
            args.layer,
            dump.layers()
        )));
    }
    // keys are role 0
    let rows = dump.samples_for(args.layer, 0)?;
    let sim = cosine_similarity_map(&rows, true);

    let csv_path = args.out.with_extension("csv");
    let pgm_path = args.out.with_extension("pgm");
    let mut staged = StagedWrites::new();
    staged.stage(&csv_path, |w| sim.write_csv(w).map_err(Into::into))?;
    staged.stage(&pgm_path, |w| sim.write_pgm(w).map_err(Into::into))?;
    staged.commit()?;
    println!(
        "similarity map over {} key rows (layer {}) written to {} and {}",
        rows.rows(),
        args.layer,
        csv_path.display(),
        pgm_path.display()
    );
    Ok(())
}
