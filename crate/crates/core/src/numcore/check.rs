use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors: adjoints smaller than this are
/// compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Compares tape adjoints of a scalar function with central finite
/// differences and returns the largest elementwise relative error,
/// `|tape − fd| / max(|tape|, |fd|, GRAD_CHECK_FLOOR)`.
///
/// `f` receives a fresh tape with `params` registered in order and must
/// return a 1×1 node.
pub fn grad_check<F>(f: F, params: &[Matrix], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "grad_check eps must be positive, got {eps}"
        )));
    }
    let eval = |ps: &[Matrix]| -> Result<(f64, Option<Vec<Matrix>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v}")));
        }
        Ok((v, Some(tape.backward(out)?.params())))
    };
    let value_only = |ps: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v}")));
        }
        Ok(v)
    };

    let (_, adjoints) = eval(params)?;
    let adjoints = adjoints.expect("eval returns adjoints");
    let mut work: Vec<Matrix> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, adj) in adjoints.iter().enumerate() {
        for k in 0..adj.len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = value_only(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = value_only(&work)?;
            work[pi].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = adj.data()[k];
            let denom = a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn half_squared_norm() {
        let x = Matrix::row_vector(&[0.3, -1.2, 2.0]);
        let err = grad_check(
            |t, p| {
                let sq = t.hadamard(p[0], p[0])?;
                let s = t.sum(sq);
                Ok(t.scale(s, 0.5))
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");

        let mut t = Tape::new();
        let v = t.param(x.clone());
        let sq = t.hadamard(v, v).unwrap();
        let s = t.sum(sq);
        let h = t.scale(s, 0.5);
        assert!(t.backward(h).unwrap().params()[0].max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn constant_function_has_zero_adjoints() {
        let x = Matrix::row_vector(&[1.0, 2.0]);
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let c = t.input(Matrix::scalar(4.0));
        let s = t.sum(c);
        let _ = v;
        assert_eq!(t.backward(s).unwrap().params()[0], Matrix::zeros(1, 2));
        let err = grad_check(|t, _| Ok(t.input(Matrix::scalar(4.0))), &[x], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_value_is_numeric_error() {
        let x = Matrix::row_vector(&[1.0]);
        let r = grad_check(
            |t, _| Ok(t.input(Matrix::from_vec_unchecked(1, 1, vec![f64::NAN]))),
            &[x],
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn l2_normalize_first_coordinate_adjoint() {
        let err = grad_check(
            |t, p| {
                let n = t.l2_normalize_rows(p[0])?;
                let first = t.slice_cols(n, 0, 1)?;
                Ok(t.sum(first))
            },
            &[Matrix::row_vector(&[1.0, 1.0])],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    /// Every primitive on random inputs in [-1, 1], five seeds.
    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(3, 4, &mut rng);
            let b = random(4, 2, &mut rng);
            let c = random(3, 4, &mut rng);
            let row = random(1, 4, &mut rng);
            let targets: Vec<f64> = (0..3).map(|i| (i % 2) as f64).collect();
            let err = grad_check(
                |t, p| {
                    let ab = t.matmul(p[0], p[1])?;
                    let sum = t.add(p[0], p[2])?;
                    let diff = t.sub(sum, p[2])?;
                    let shifted = t.add_row(diff, p[3])?;
                    let prod = t.hadamard(shifted, p[2])?;
                    let th = t.tanh(prod);
                    let sg = t.sigmoid(ab);
                    let sm = t.softmax_rows(th);
                    let tr = t.transpose(sm);
                    let nrm = t.l2_normalize_rows(tr)?;
                    let rl = t.relu(nrm);
                    let gathered = t.gather_rows(rl, &[0, 2, 2])?;
                    let sliced = t.slice_cols(gathered, 1, 3)?;
                    let cat = t.concat_cols(&[sliced, sg])?;
                    let lse = t.logsumexp(cat)?;
                    let sc = t.scale(lse, 0.7);
                    let probs = t.slice_cols(sg, 0, 1)?;
                    let bce = t.bce(probs, &targets)?;
                    let logits = t.slice_cols(ab, 1, 2)?;
                    let bcel = t.bce_with_logits(logits, &targets)?;
                    let mean = t.mean(cat)?;
                    let s1 = t.add(sc, bce)?;
                    let s2 = t.add(s1, bcel)?;
                    t.add(s2, mean)
                },
                &[a, b, c, row],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn linearized_node_chains() {
        // f(x) = 3·Σx through an externally supplied gradient.
        let x = Matrix::row_vector(&[0.5, -0.25]);
        let err = grad_check(
            |t, p| {
                let v: f64 = t.value(p[0]).data().iter().sum::<f64>() * 3.0;
                let g = Matrix::filled(1, 2, 3.0);
                let l = t.linearized(p[0], v, g)?;
                Ok(t.scale(l, 2.0))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9);
    }
}
