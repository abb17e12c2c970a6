use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::store::ParamStore;
use super::tape::Tape;
use super::{mix_seed, EngineError};

/// Outcome of comparing analytic gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (tensor, flat index, analytic, numeric) for the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

const FD_STEP: f64 = 1e-4;

/// Compare the tape's gradients with (L(θ+h) - L(θ-h)) / 2h on randomly
/// sampled coordinates of every tensor the loss touches. `build` must
/// reconstruct the identical forward pass from whatever store it is given.
pub fn grad_check<F>(
    store: &ParamStore,
    build: F,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, EngineError>
where
    F: Fn(&ParamStore, &mut Tape) -> super::tape::Var,
{
    let mut tape = Tape::new();
    let root = build(store, &mut tape);
    let analytic = tape.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x47524144]));
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut scratch = store.clone();
    for (name, grad) in analytic.iter() {
        let len = grad.len();
        for _ in 0..coords_per_tensor.min(len) {
            let idx = rng.gen_range(0..len);
            let orig = scratch.get(name).data()[idx];

            scratch.get_mut(name).data_mut()[idx] = orig + FD_STEP;
            let mut tp = Tape::new();
            let r = build(&scratch, &mut tp);
            let up = tp.value(r).item();

            scratch.get_mut(name).data_mut()[idx] = orig - FD_STEP;
            let mut tm = Tape::new();
            let r = build(&scratch, &mut tm);
            let down = tm.value(r).item();

            scratch.get_mut(name).data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), idx, a, numeric));
            }
        }
    }
    Ok(report)
}
