use std::collections::BTreeMap;

use sparkv_core::dump::{DumpDtype, TensorDump};
use sparkv_core::engine::read_snapshot;
use sparkv_core::tensor::DenseMatrix;

use crate::config::RunConfig;
use crate::util::{load_dict_dir, require_dict, StagedWrites};
use crate::{CliError, DecompressArgs};

pub fn run(args: &DecompressArgs, _cfg: &RunConfig) -> Result<(), CliError> {
    let dicts = load_dict_dir(&args.dicts)?;
    let mut file = std::io::BufReader::new(
        std::fs::File::open(&args.state)
            .map_err(|e| CliError::Data(format!("{}: {e}", args.state.display())))?,
    );
    let states = read_snapshot(&mut file, |layer, role| {
        require_dict(&dicts, layer, role)
            .cloned()
            .map_err(|e| sparkv_core::Error::Corrupt(e.message().to_string()))
    })?;

    // the snapshot must cover a dense (layer, head) grid with equal lengths
    let layers = states.iter().map(|s| s.layer as usize).max().unwrap_or(0) + 1;
    let heads = states.iter().map(|s| s.head as usize).max().unwrap_or(0) + 1;
    if states.len() != layers * heads {
        return Err(CliError::Data(format!(
            "snapshot holds {} states, expected a dense {layers}x{heads} grid",
            states.len()
        )));
    }
    let tokens = states[0].state.token_count();
    if states.iter().any(|s| s.state.token_count() != tokens) {
        return Err(CliError::Data("states disagree on token count".into()));
    }

    let mut grid: BTreeMap<(u16, u16), (DenseMatrix, DenseMatrix)> = BTreeMap::new();
    for ks in &states {
        let pair = ks.state.reconstruct_cache()?;
        if grid.insert((ks.layer, ks.head), pair).is_some() {
            return Err(CliError::Data(format!(
                "duplicate state for layer {} head {}",
                ks.layer, ks.head
            )));
        }
    }

    let mut streams: Vec<Vec<Vec<DenseMatrix>>> = Vec::with_capacity(layers);
    for layer in 0..layers {
        let mut k_heads = Vec::with_capacity(heads);
        let mut v_heads = Vec::with_capacity(heads);
        for head in 0..heads {
            let (k, v) = grid
                .get(&(layer as u16, head as u16))
                .ok_or_else(|| {
                    CliError::Data(format!("missing state for layer {layer} head {head}"))
                })?
                .clone();
            k_heads.push(k);
            v_heads.push(v);
        }
        streams.push(vec![k_heads, v_heads]);
    }
    let dump = TensorDump::from_streams(DumpDtype::F32, &streams)?;

    let mut staged = StagedWrites::new();
    staged.stage(&args.out, |w| dump.write_to(w).map_err(Into::into))?;
    staged.commit()?;
    println!(
        "reconstructed dump dims=(layers={layers}, roles=2, tokens={tokens}, heads={heads}, \
         head_dim={}) to {}",
        dump.head_dim(),
        args.out.display()
    );
    Ok(())
}
