//! GRU baseline over linearly interpolated inputs.

use ndarray::Array2;
use rand::Rng;

use super::{maybe_dropout, Dropout, ModelConfig, ModelInput};
use crate::autodiff::{Tape, Var};
use crate::domain::{CLASSES, STEPS};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Fill masked entries of each column by linear interpolation between the
/// nearest observed steps, holding the edge value constant beyond them.
/// Fails if some column has no observation.
pub fn linear_interpolate(x: &Array2<f64>, mask: &Array2<bool>) -> Result<Array2<f64>> {
    let (t, f) = x.dim();
    let mut out = x.clone();
    for k in 0..f {
        let obs: Vec<usize> = (0..t).filter(|&s| mask[[s, k]]).collect();
        let (Some(&first), Some(&last)) = (obs.first(), obs.last()) else {
            return Err(Error::EmptySeries);
        };
        for s in 0..t {
            if mask[[s, k]] {
                continue;
            }
            out[[s, k]] = if s < first {
                x[[first, k]]
            } else if s > last {
                x[[last, k]]
            } else {
                let lo = *obs.iter().rev().find(|&&o| o < s).expect("bracketed");
                let hi = *obs.iter().find(|&&o| o > s).expect("bracketed");
                let w = (s - lo) as f64 / (hi - lo) as f64;
                x[[lo, k]] * (1.0 - w) + x[[hi, k]] * w
            };
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnLayout {
    hidden: usize,
    w_in: usize,
    b_in: usize,
    w_hidden: usize,
    b_hidden: usize,
    w_out: usize,
    b_out: usize,
}

impl RnnLayout {
    pub(super) fn init(config: &ModelConfig, features: usize, p: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let h = config.hidden_dim;
        Self {
            hidden: h,
            w_in: p.add_weight("gru.w_in", features, 3 * h, rng),
            b_in: p.add_zeros("gru.b_in", 1, 3 * h),
            w_hidden: p.add_weight("gru.w_hidden", h, 3 * h, rng),
            b_hidden: p.add_zeros("gru.b_hidden", 1, 3 * h),
            w_out: p.add_weight("classifier.w", h, CLASSES, rng),
            b_out: p.add_zeros("classifier.b", 1, CLASSES),
        }
    }

    pub(super) fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        input: &ModelInput,
        mut drop: Option<Dropout>,
    ) -> Var {
        let h = self.hidden;
        let filled = linear_interpolate(&input.x, &input.mask)
            .expect("inputs are checked by Model::check_input");
        let x = tape.constant(filled);
        let gates_x = tape.affine(x, p[self.w_in], p[self.b_in]);
        let mut state = tape.constant(Array2::zeros((1, h)));
        let mut states = Vec::with_capacity(STEPS);
        for s in 0..STEPS {
            let gx = tape.slice_rows(gates_x, s, s + 1);
            let gh = tape.affine(state, p[self.w_hidden], p[self.b_hidden]);
            let zx = tape.slice_cols(gx, 0, h);
            let zh = tape.slice_cols(gh, 0, h);
            let rx = tape.slice_cols(gx, h, 2 * h);
            let rh = tape.slice_cols(gh, h, 2 * h);
            let nx = tape.slice_cols(gx, 2 * h, 3 * h);
            let nh = tape.slice_cols(gh, 2 * h, 3 * h);
            let z = tape.add(zx, zh);
            let z = tape.sigmoid(z);
            let r = tape.add(rx, rh);
            let r = tape.sigmoid(r);
            let rn = tape.mul(r, nh);
            let n = tape.add(nx, rn);
            let n = tape.tanh(n);
            // h' = n + z ⊙ (h − n)
            let diff = tape.sub(state, n);
            let keep = tape.mul(z, diff);
            state = tape.add(n, keep);
            states.push(state);
        }
        let hs = tape.concat_rows(&states);
        let hs = maybe_dropout(tape, &mut drop, hs);
        tape.affine(hs, p[self.w_out], p[self.b_out])
    }
}
