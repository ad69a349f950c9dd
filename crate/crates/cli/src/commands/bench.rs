use std::time::Duration;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparkv_core::analysis::reference_attention;
use sparkv_core::engine::read_snapshot;
use sparkv_core::tensor::{DenseMatrix, DenseVector};

use crate::config::RunConfig;
use crate::util::{load_dict_dir, require_dict, StagedWrites};
use crate::{BenchArgs, CliError};

/// Discarded leading steps: first-touch allocation and cache warmup.
const WARMUP_STEPS: usize = 10;

/// Element tolerance for the split-path equivalence check.
const EQUIVALENCE_TOL: f32 = 1e-4;

pub fn run(args: &BenchArgs, cfg: &RunConfig) -> Result<(), CliError> {
    if args.steps == 0 {
        println!("steps=0: nothing to measure");
        return Ok(());
    }
    let dicts = load_dict_dir(&args.dicts)?;
    let mut file = std::io::BufReader::new(
        std::fs::File::open(&args.state)
            .map_err(|e| CliError::Data(format!("{}: {e}", args.state.display())))?,
    );
    let mut states = read_snapshot(&mut file, |layer, role| {
        require_dict(&dicts, layer, role)
            .cloned()
            .map_err(|e| sparkv_core::Error::Corrupt(e.message().to_string()))
    })?;
    let m = states[0].state.dict_k().head_dim();
    if states.iter().any(|s| s.state.dict_k().head_dim() != m) {
        return Err(CliError::Data("states disagree on head_dim".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut attention_times: Vec<Duration> = Vec::with_capacity(args.steps);
    let mut eviction_times: Vec<Duration> = Vec::with_capacity(args.steps);
    let mut checks = 0usize;
    let mut failures = 0usize;
    let mut max_diff = 0.0f32;

    for step in 0..args.steps {
        let q = random_vector(&mut rng, m, 1.0);
        let k_t = random_vector(&mut rng, m, 0.5);
        let v_t = random_vector(&mut rng, m, 0.5);
        let check = args.check_cadence > 0 && step % args.check_cadence == 0;

        let mut attention = Duration::ZERO;
        let mut eviction = Duration::ZERO;
        for ks in states.iter_mut() {
            let reference = if check {
                Some(reference_output(&ks.state, &q, &k_t, &v_t)?)
            } else {
                None
            };
            let (out, timing) = ks.state.decode_step_timed(&q, &k_t, &v_t)?;
            attention += timing.attention;
            eviction += timing.eviction;
            if let Some(want) = reference {
                checks += 1;
                let diff = out
                    .attention_out
                    .as_slice()
                    .iter()
                    .zip(want.as_slice())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                max_diff = max_diff.max(diff);
                if diff > EQUIVALENCE_TOL {
                    failures += 1;
                }
            }
        }
        attention_times.push(attention);
        eviction_times.push(eviction);
    }

    let mut report = format!(
        "steps={} warmup_discarded={} states={}\n",
        args.steps,
        WARMUP_STEPS.min(args.steps),
        states.len()
    );
    let measured_attention = &attention_times[WARMUP_STEPS.min(attention_times.len())..];
    let measured_eviction = &eviction_times[WARMUP_STEPS.min(eviction_times.len())..];
    if measured_attention.is_empty() {
        report.push_str("too few steps after warmup for timing statistics\n");
    } else {
        let (att_med, att_mean) = stats_us(measured_attention);
        let (ev_med, ev_mean) = stats_us(measured_eviction);
        report.push_str(&format!(
            "attention_us median={att_med:.2} mean={att_mean:.2}\n\
             omp_eviction_us median={ev_med:.2} mean={ev_mean:.2}\n\
             total_us median={:.2}\n",
            att_med + ev_med
        ));
    }
    report.push_str(&format!(
        "equivalence_checks={checks} failures={failures} max_abs_diff={max_diff:.3e} \
         tolerance={EQUIVALENCE_TOL:.0e}\n"
    ));
    print!("{report}");

    if let Some(out) = &args.out {
        let mut staged = StagedWrites::new();
        staged.stage(out, |w| {
            use std::io::Write;
            w.write_all(report.as_bytes())
                .map_err(|e| CliError::Data(e.to_string()))
        })?;
        staged.commit()?;
    }
    if failures > 0 {
        return Err(CliError::Data(format!(
            "{failures} of {checks} equivalence checks exceeded {EQUIVALENCE_TOL}"
        )));
    }
    Ok(())
}

/// Full-precision attention over the reconstructed cache plus the incoming
/// token: the oracle the split path is checked against.
fn reference_output(
    state: &sparkv_core::CompressedKvState,
    q: &DenseVector,
    k_t: &DenseVector,
    v_t: &DenseVector,
) -> Result<DenseVector, CliError> {
    let (k_hat, v_hat) = state.reconstruct_cache()?;
    let k_full = append_row(&k_hat, k_t)?;
    let v_full = append_row(&v_hat, v_t)?;
    Ok(reference_attention(q, &k_full, &v_full)?)
}

fn append_row(matrix: &DenseMatrix, row: &DenseVector) -> Result<DenseMatrix, CliError> {
    let mut data = matrix.as_slice().to_vec();
    data.extend_from_slice(row.as_slice());
    Ok(DenseMatrix::new(data, matrix.rows() + 1, matrix.cols())?)
}

fn random_vector(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> DenseVector {
    DenseVector::new((0..len).map(|_| rng.gen_range(-scale..=scale)).collect())
        .expect("finite by construction")
}

fn stats_us(times: &[Duration]) -> (f64, f64) {
    let mut us: Vec<f64> = times.iter().map(|d| d.as_secs_f64() * 1e6).collect();
    us.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = us[us.len() / 2];
    let mean = us.iter().sum::<f64>() / us.len() as f64;
    (median, mean)
}
