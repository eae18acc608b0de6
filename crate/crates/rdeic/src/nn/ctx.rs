//! Record/replay context for the discrete and sampled parts of a loss.
//!
//! Losses contain pieces a tape cannot differentiate through: sampled
//! noise, stop-gradients, straight-through rounding offsets, and nearest
//! codebook assignments. The tape treats each of these as a constant
//! captured during the forward pass. For finite-difference checks the
//! *same* constants must be replayed while parameters are perturbed —
//! that is exactly the function whose gradient the tape computes. This
//! context records every such draw on the first build and replays it on
//! subsequent builds.

use ndarray::ArrayD;

use crate::element::Element;
use crate::nn::tape::{NodeId, Tape};
use crate::rng::{self, Rng};

enum Recorded<E: Element> {
    Tensor(ArrayD<E>),
    Indices(Vec<usize>),
    Step(usize),
}

enum Mode {
    Record,
    Replay,
}

pub struct SampleCtx<E: Element> {
    mode: Mode,
    rng: Rng,
    log: Vec<Recorded<E>>,
    cursor: usize,
}

impl<E: Element> SampleCtx<E> {
    pub fn record(seed: u64) -> Self {
        SampleCtx {
            mode: Mode::Record,
            rng: rng::seeded(seed),
            log: Vec::new(),
            cursor: 0,
        }
    }

    /// Switch to replay; every subsequent build must make the identical
    /// sequence of draws.
    pub fn start_replay(&mut self) {
        self.mode = Mode::Replay;
        self.cursor = 0;
    }

    /// Rewind the replay cursor for another build.
    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    fn take(&mut self) -> &Recorded<E> {
        let r = &self.log[self.cursor];
        self.cursor += 1;
        r
    }

    fn tensor_draw(&mut self, make: impl FnOnce(&mut Rng) -> ArrayD<E>) -> ArrayD<E> {
        match self.mode {
            Mode::Record => {
                let t = make(&mut self.rng);
                self.log.push(Recorded::Tensor(t.clone()));
                t
            }
            Mode::Replay => match self.take() {
                Recorded::Tensor(t) => t.clone(),
                _ => panic!("replay sequence mismatch: expected tensor"),
            },
        }
    }

    pub fn normal(&mut self, dims: &[usize]) -> ArrayD<E> {
        self.tensor_draw(|rng| rng::normal_tensor(rng, dims))
    }

    pub fn uniform_half(&mut self, dims: &[usize]) -> ArrayD<E> {
        self.tensor_draw(|rng| rng::uniform_half_tensor(rng, dims))
    }

    pub fn step_uniform(&mut self, lo: usize, hi: usize) -> usize {
        match self.mode {
            Mode::Record => {
                let s = rng::uniform_step(&mut self.rng, lo, hi);
                self.log.push(Recorded::Step(s));
                s
            }
            Mode::Replay => match self.take() {
                Recorded::Step(s) => *s,
                _ => panic!("replay sequence mismatch: expected step"),
            },
        }
    }

    /// Stop-gradient: the node's value enters the graph as a constant.
    /// On replay the value captured at record time is reused, so finite
    /// differences see the same function the tape differentiates.
    pub fn sg(&mut self, tape: &mut Tape<E>, node: NodeId) -> NodeId {
        let v = match self.mode {
            Mode::Record => {
                let v = tape.value(node).clone();
                self.log.push(Recorded::Tensor(v.clone()));
                v
            }
            Mode::Replay => match self.take() {
                Recorded::Tensor(t) => t.clone(),
                _ => panic!("replay sequence mismatch: expected sg tensor"),
            },
        };
        tape.constant(v)
    }

    /// Mean-centered rounding with straight-through gradients: the output
    /// value is `round(x)` (ties away from zero) but the tape sees
    /// `x + const(round(x) - x)`, whose derivative is exactly 1.
    pub fn round_ste(&mut self, tape: &mut Tape<E>, node: NodeId) -> NodeId {
        let offset = match self.mode {
            Mode::Record => {
                let off = tape
                    .value(node)
                    .mapv(|v| E::from_f64(v.into_f64().round()) - v);
                self.log.push(Recorded::Tensor(off.clone()));
                off
            }
            Mode::Replay => match self.take() {
                Recorded::Tensor(t) => t.clone(),
                _ => panic!("replay sequence mismatch: expected rounding offset"),
            },
        };
        let off = tape.constant(offset);
        tape.add(node, off)
    }

    /// Nearest-codebook assignment of row vectors.
    ///
    /// Returns the assignment indices, the gathered entries (gradients
    /// flow into the codebook rows), and the straight-through projection
    /// of the input (value equals the gathered entries, gradient passes
    /// to the input vectors).
    pub fn vq_nearest_ste(
        &mut self,
        tape: &mut Tape<E>,
        codebook: NodeId,
        vectors: NodeId,
    ) -> VqAssign {
        let idx = match self.mode {
            Mode::Record => {
                let table = tape.value(codebook);
                let vecs = tape.value(vectors);
                let idx = nearest_indices(table, vecs);
                self.log.push(Recorded::Indices(idx.clone()));
                idx
            }
            Mode::Replay => match self.take() {
                Recorded::Indices(i) => i.clone(),
                _ => panic!("replay sequence mismatch: expected vq indices"),
            },
        };
        let gathered = tape.gather_rows(codebook, idx.clone());
        // passthrough = vectors + const(gathered - vectors)
        let delta = match self.mode {
            Mode::Record => {
                let d = tape.value(gathered).clone() - tape.value(vectors);
                self.log.push(Recorded::Tensor(d.clone()));
                d
            }
            Mode::Replay => match self.take() {
                Recorded::Tensor(t) => t.clone(),
                _ => panic!("replay sequence mismatch: expected vq delta"),
            },
        };
        let delta = tape.constant(delta);
        let passthrough = tape.add(vectors, delta);
        VqAssign {
            indices: idx,
            gathered,
            passthrough,
        }
    }
}

pub struct VqAssign {
    pub indices: Vec<usize>,
    pub gathered: NodeId,
    pub passthrough: NodeId,
}

/// Exhaustive nearest-entry search; ties break to the lowest index.
pub fn nearest_indices<E: Element>(table: &ArrayD<E>, vecs: &ArrayD<E>) -> Vec<usize> {
    let t = table
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("codebook is 2-d");
    let v = vecs
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("vectors are 2-d");
    assert_eq!(t.ncols(), v.ncols(), "codebook dim mismatch");
    assert!(t.nrows() >= 2, "codebook must have at least 2 entries");
    let mut out = Vec::with_capacity(v.nrows());
    for row in v.rows() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, entry) in t.rows().into_iter().enumerate() {
            let mut d = 0.0f64;
            for (a, b) in row.iter().zip(entry.iter()) {
                let diff = a.into_f64() - b.into_f64();
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        out.push(best);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn replay_reproduces_draws() {
        let mut ctx = SampleCtx::<f64>::record(9);
        let a = ctx.normal(&[3, 3]);
        let b = ctx.uniform_half(&[5]);
        let s = ctx.step_uniform(1, 300);
        ctx.start_replay();
        assert_eq!(ctx.normal(&[3, 3]), a);
        assert_eq!(ctx.uniform_half(&[5]), b);
        assert_eq!(ctx.step_uniform(1, 300), s);
        ctx.rewind();
        assert_eq!(ctx.normal(&[3, 3]), a);
    }

    #[test]
    fn sg_blocks_gradient() {
        let mut ctx = SampleCtx::<f64>::record(1);
        let mut tape = Tape::new();
        let x = tape.param(0, ArrayD::from_elem(IxDyn(&[4]), 2.0));
        let frozen = ctx.sg(&mut tape, x);
        // loss = sum(sg(x) * x): gradient must be sg(x) = 2, not 2x = 4.
        let prod = tape.mul(frozen, x);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        let g = &grads.by_param[&0];
        assert!(g.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn round_ste_value_and_gradient() {
        let mut ctx = SampleCtx::<f64>::record(1);
        let mut tape = Tape::new();
        let x = tape.param(0, ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.4, 0.5, -0.5, 1.6]).unwrap());
        let q = ctx.round_ste(&mut tape, x);
        // Ties away from zero.
        let vals: Vec<f64> = tape.value(q).iter().copied().collect();
        assert_eq!(vals, vec![0.0, 1.0, -1.0, 2.0]);
        let loss = tape.sum_all(q);
        let grads = tape.backward(loss);
        assert!(grads.by_param[&0].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn vq_assignment_and_tie_break() {
        let table = ArrayD::from_shape_vec(IxDyn(&[3, 1]), vec![0.0, 1.0, 2.0]).unwrap();
        let vecs = ArrayD::from_shape_vec(IxDyn(&[3, 1]), vec![0.1, 0.5, 1.9]).unwrap();
        let idx = nearest_indices(&table, &vecs);
        // 0.5 is equidistant between entries 0 and 1: lowest index wins.
        assert_eq!(idx, vec![0, 0, 2]);
    }

    #[test]
    fn vq_passthrough_gradient_is_identity() {
        let mut ctx = SampleCtx::<f64>::record(1);
        let mut tape = Tape::new();
        let table = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.0, 0.0, 1.0, 1.0]).unwrap(),
        );
        let vecs = tape.param(
            0,
            ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.9, 0.8]).unwrap(),
        );
        let vq = ctx.vq_nearest_ste(&mut tape, table, vecs);
        assert_eq!(vq.indices, vec![1]);
        // passthrough value equals the selected entry
        let v: Vec<f64> = tape.value(vq.passthrough).iter().copied().collect();
        assert_eq!(v, vec![1.0, 1.0]);
        let loss = tape.sum_all(vq.passthrough);
        let grads = tape.backward(loss);
        assert!(grads.by_param[&0].iter().all(|&g| g == 1.0));
    }
}
