//! Finite-difference validation of tape gradients.
//!
//! The check runs entirely in double precision: parameters are copied to
//! f64, the loss is rebuilt through the same builder, and sampled
//! coordinates are perturbed with central differences. All sampled noise
//! and discrete choices (stop-gradients, rounding offsets, codebook
//! assignments) are recorded on the first build and replayed for every
//! perturbed evaluation, so the differenced function is exactly the one
//! whose gradient the tape reports.

use crate::error::{Error, Result};
use crate::nn::ctx::SampleCtx;
use crate::nn::params::{ParamStore, PerturbedParams};
use crate::nn::tape::{NodeId, Tape};
use crate::rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Worst coordinate: (parameter name, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Check d(loss)/d(params) for every trainable parameter accepted by
/// `filter`, sampling `coords_per_param` coordinates of each.
///
/// `build` receives a fresh tape, the (possibly perturbed) parameter
/// source, and the record/replay context; it must return a scalar node.
pub fn grad_check<F>(
    store: &ParamStore,
    filter: impl Fn(&str) -> bool,
    coords_per_param: usize,
    eps: f64,
    seed: u64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &PerturbedParams, &mut SampleCtx<f64>) -> NodeId,
{
    let mut params = PerturbedParams::from_store(store);
    let mut ctx = SampleCtx::<f64>::record(seed);

    // Base build: analytic gradients.
    let mut tape = Tape::new();
    let loss = build(&mut tape, &params, &mut ctx);
    let base = tape.scalar(loss);
    if !base.is_finite() {
        return Err(Error::Training(format!("non-finite loss {base}")));
    }
    let grads = tape.backward(loss);
    drop(tape);
    ctx.start_replay();

    let mut coord_rng = rng::seeded(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;

    let name_by_idx: Vec<(usize, String)> = params
        .names
        .iter()
        .map(|(n, &i)| (i, n.clone()))
        .collect();
    let mut ordered = name_by_idx;
    ordered.sort();

    for (idx, name) in ordered {
        if !params.trainable[idx] || !filter(&name) {
            continue;
        }
        let len = params.values[idx].len();
        let take = coords_per_param.min(len);
        for _ in 0..take {
            let flat = rng::uniform_step(&mut coord_rng, 0, len - 1);
            params.nudge(idx, flat, eps);
            ctx.rewind();
            let mut tp = Tape::new();
            let lp = build(&mut tp, &params, &mut ctx);
            let f_plus = tp.scalar(lp);
            drop(tp);
            params.nudge(idx, flat, -2.0 * eps);
            ctx.rewind();
            let mut tm = Tape::new();
            let lm = build(&mut tm, &params, &mut ctx);
            let f_minus = tm.scalar(lm);
            drop(tm);
            params.nudge(idx, flat, eps);

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let analytic = grads
                .by_param
                .get(&idx)
                .map(|g| g.as_slice().unwrap()[flat])
                .unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = Some((name.clone(), flat, analytic, numeric));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: checked,
        worst,
    })
}
