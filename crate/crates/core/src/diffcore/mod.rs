//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! The tape records every operation in evaluation order. `round_st` and
//! `hardmax_st` are straight-through operations: hard in the forward pass,
//! smooth in the backward pass. A tape built in [`Mode::Soft`] replaces their
//! forward pass by the smooth surrogate, which makes the whole graph
//! checkable with finite differences.

mod tape;
mod tensor;

pub use tape::{argmax, sigmoid, softmax_slice, softmax_vjp, CustomOp, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of bounds for length {len}")]
    OutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("{0}: the same tensor was passed twice")]
    DuplicateInput(&'static str),
}

/// Smallest magnitude used as denominator of the relative error.
pub const FD_REL_FLOOR: f64 = 1e-6;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|a - n| / max(|a|, |n|, FD_REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `f` at `params` with central differences.
///
/// `f` receives a fresh tape and the variable holding `params`, and returns
/// the scalar loss. Use [`Mode::Soft`] for graphs containing straight-through
/// operations.
pub fn finite_diff_check<F>(
    mode: Mode,
    f: F,
    params: &Tensor,
    step: f64,
) -> Result<FdReport, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    let eval = |p: &Tensor| -> Result<f64, DiffError> {
        let mut tape = Tape::with_mode(mode);
        let v = tape.leaf(p.clone());
        let loss = f(&mut tape, v)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::with_mode(mode);
    let v = tape.leaf(params.clone());
    let loss = f(&mut tape, v)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(v).expect("leaf gradient").data().to_vec();

    let mut numeric = Vec::with_capacity(params.len());
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(FdReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn elementwise_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec_t(&[1.0, 2.0]));
        let b = tape.leaf(vec_t(&[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);

        let x = tape.leaf(vec_t(&[0.3, -1.2, 5.0]));
        let ones = tape.leaf(Tensor::ones(&[3]));
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec_t(&[1.0, 2.0]));
        let b = tape.leaf(vec_t(&[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(DiffError::ShapeMismatch { .. })));
        assert!(tape.sub(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
        let w = tape.leaf(Tensor::identity(2));
        assert!(tape.matvec(w, b).is_err());
    }

    #[test]
    fn sub_self_has_zero_gradient() {
        let x0 = vec_t(&[0.4, -1.3, 2.2]);
        let report = finite_diff_check(
            Mode::Hard,
            |t, x| {
                let d = t.sub(x, x)?;
                assert!(t.value(d).data().iter().all(|&v| v == 0.0));
                Ok(t.sum(d))
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(report.analytic.iter().all(|&g| g == 0.0));
        assert!(report.numeric.iter().all(|&g| g.abs() < 1e-9));
    }

    #[test]
    fn matvec_values_and_gradient() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::identity(2));
        let v = tape.leaf(vec_t(&[3.0, 5.0]));
        let out = tape.matvec(i2, v).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 5.0]);

        let w = tape.leaf(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let ones = tape.leaf(vec_t(&[1.0, 1.0]));
        let out = tape.matvec(w, ones).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);

        let w0 = Tensor::matrix(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]]).unwrap();
        let report = finite_diff_check(
            Mode::Hard,
            |t, w| {
                let v = t.leaf(vec_t(&[0.7, -0.2, 1.1]));
                let y = t.matvec(w, v)?;
                Ok(t.sum(y))
            },
            &w0,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn sigmoid_and_tanh() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        let t = tape.tanh_act(z);
        assert_eq!(tape.value(s).item(), 0.5);
        assert_eq!(tape.value(t).item(), 0.0);

        let report = finite_diff_check(Mode::Hard, |t, z| Ok(t.sigmoid(z)), &Tensor::scalar(1.0), 1e-6)
            .unwrap();
        let s1 = sigmoid(1.0);
        assert!((report.analytic[0] - s1 * (1.0 - s1)).abs() < 1e-15);
        assert!((report.analytic[0] - 0.19661).abs() < 1e-5);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn round_st_rounds_half_away_and_passes_gradient() {
        let mut tape = Tape::new();
        let z = tape.leaf(vec_t(&[0.49, 0.5, -0.5, 1.7, -2.2]));
        let r = tape.round_st(z);
        assert_eq!(tape.value(r).data(), &[0.0, 1.0, -1.0, 2.0, -2.0]);
        let loss = tape.sum(r);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn hardmax_st_forward_and_surrogate_backward() {
        let mut tape = Tape::new();
        let z = tape.leaf(vec_t(&[0.1, 2.0, -1.0]));
        let h = tape.hardmax_st(z).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 1.0, 0.0]);
        let tie = tape.leaf(vec_t(&[5.0, 5.0]));
        let h2 = tape.hardmax_st(tie).unwrap();
        assert_eq!(tape.value(h2).data(), &[1.0, 0.0]);

        let z0 = vec_t(&[0.3, -0.8, 1.2, 0.1]);
        let w = [0.5, -1.5, 2.0, 0.25];
        let objective = |use_hardmax: bool| {
            move |t: &mut Tape, z: Var| {
                let p = if use_hardmax { t.hardmax_st(z)? } else { t.softmax(z)? };
                let wv = t.leaf(vec_t(&w));
                let pw = t.mul(p, wv)?;
                Ok(t.sum(pw))
            }
        };
        let hard = finite_diff_check(Mode::Hard, objective(true), &z0, 1e-6).unwrap();
        let soft = finite_diff_check(Mode::Hard, objective(false), &z0, 1e-6).unwrap();
        assert_eq!(hard.analytic, soft.analytic);
        assert!(soft.max_rel_error < 1e-6, "{soft:?}");
    }

    #[test]
    fn softmax_and_cross_entropy() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[3]));
        let p = tape.softmax(z).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let ce = tape.cross_entropy(z, 1).unwrap();
        assert!((tape.value(ce).item() - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(
            tape.cross_entropy(z, 3),
            Err(DiffError::TargetOutOfRange { .. })
        ));

        let z0 = vec_t(&[0.2, -1.1, 0.7]);
        let report = finite_diff_check(Mode::Hard, |t, z| t.cross_entropy(z, 2), &z0, 1e-6).unwrap();
        let probs = softmax_slice(z0.data());
        for k in 0..3 {
            let expected = probs[k] - if k == 2 { 1.0 } else { 0.0 };
            assert!((report.analytic[k] - expected).abs() < 1e-15);
        }
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec_t(&[1.0, -2.0, 3.0]));
        let p = tape.leaf(vec_t(&[4.0, 5.0]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(tape.backward(x), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn composite_sigmoid_matvec_matches_finite_differences() {
        let w0 = Tensor::matrix(&[vec![0.3, -0.6], vec![1.2, 0.4], vec![-0.9, 0.8]]).unwrap();
        let report = finite_diff_check(
            Mode::Hard,
            |t, w| {
                let x = t.leaf(vec_t(&[0.5, -1.5]));
                let h = t.matvec(w, x)?;
                let s = t.sigmoid(h);
                let target = t.leaf(vec_t(&[1.0, 0.0, 0.5]));
                let d = t.sub(s, target)?;
                let sq = t.mul(d, d)?;
                Ok(t.sum(sq))
            },
            &w0,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn quadratic_oracle() {
        let report =
            finite_diff_check(Mode::Hard, |t, p| t.mul(p, p), &Tensor::scalar(3.0), 1e-6).unwrap();
        assert!((report.analytic[0] - 6.0).abs() < 1e-12);
        assert!((report.numeric[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn soft_mode_relaxes_straight_through_ops() {
        let mut tape = Tape::with_mode(Mode::Soft);
        let z = tape.leaf(vec_t(&[0.3, 0.9]));
        let r = tape.round_st(z);
        assert_eq!(tape.value(r).data(), &[0.3, 0.9]);
        let h = tape.hardmax_st(z).unwrap();
        let expected = softmax_slice(&[0.3, 0.9]);
        assert_eq!(tape.value(h).data(), expected.as_slice());
    }

    #[test]
    fn smooth_ops_match_finite_differences_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let n = 4;
            let x0 = Tensor::vector((0..n).map(|_| rng.random_range(-2.0..2.0)).collect());
            let w = Tensor::matrix(
                &(0..3)
                    .map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let c: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let target = trial % 3;
            let report = finite_diff_check(
                Mode::Hard,
                |t, x| {
                    let cv = t.leaf(Tensor::vector(c.clone()));
                    let wv = t.leaf(w.clone());
                    let a = t.mul(x, cv)?;
                    let b = t.add(a, x)?;
                    let s = t.sigmoid(b);
                    let th = t.tanh_act(x);
                    let e = t.sub(s, th)?;
                    let sm = t.softmax(e)?;
                    let y = t.matvec(wv, sm)?;
                    let half = t.scale(x, 0.5);
                    let dd = t.dot(half, e)?;
                    let ce = t.cross_entropy(y, target)?;
                    t.add(ce, dd)
                },
                &x0,
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "trial {trial}: {report:?}");
        }
    }

    #[test]
    fn gradient_accumulates_over_repeated_use() {
        // x used three times must equal three distinct copies.
        let x0 = vec_t(&[0.7, -0.4]);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let a = tape.tanh_act(x);
        let b = tape.sigmoid(x);
        let c = tape.mul(a, x).unwrap();
        let s = tape.add_n(&[a, b, c]).unwrap();
        let loss = tape.sum(s);
        let shared = tape.backward(loss).unwrap().get(x).unwrap().clone();

        let mut tape = Tape::new();
        let x1 = tape.leaf(x0.clone());
        let x2 = tape.leaf(x0.clone());
        let x3 = tape.leaf(x0.clone());
        let x4 = tape.leaf(x0);
        let a = tape.tanh_act(x1);
        let b = tape.sigmoid(x2);
        let a2 = tape.tanh_act(x3);
        let c = tape.mul(a2, x4).unwrap();
        let s = tape.add_n(&[a, b, c]).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        let mut total = Tensor::zeros(&[2]);
        for v in [x1, x2, x3, x4] {
            total.add_assign(g.get(v).unwrap());
        }
        for (p, q) in shared.data().iter().zip(total.data()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(vec_t(&[0.1, 0.2, -0.3]));
            let h = tape.hardmax_st(x).unwrap();
            let s = tape.sigmoid(x);
            let m = tape.mul(h, s).unwrap();
            let loss = tape.cross_entropy(m, 0).unwrap();
            let g = tape.backward(loss).unwrap();
            g.get(x).unwrap().clone()
        };
        let a = build();
        let b = build();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn concat_slice_row_route_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec_t(&[1.0, 2.0]));
        let m = tape.leaf(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let c = tape.concat(&[a, m]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0]);
        let s = tape.slice(c, 1, 3).unwrap();
        let r = tape.row(m, 1).unwrap();
        let sr = tape.sum(r);
        let ss = tape.sum(s);
        let loss = tape.add(sr, ss).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(g.get(m).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(tape.slice(c, 5, 3).is_err());
    }
}
