use memedit_core::editors::{batched_edit, rank_one_edit, CovarianceStats};
use memedit_core::linalg::Matrix;
use memedit_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn stats(c: Matrix, ridge: f64) -> CovarianceStats {
    CovarianceStats::new(0, c, 1, ridge).unwrap()
}

fn random_matrix(rows: usize, cols: usize, vals: &[f64]) -> Matrix {
    Matrix::from_row_slice(rows, cols, &vals[..rows * cols])
}

/// `C = A Aᵀ / m` from `m` sample columns, well conditioned by a small ridge.
fn sample_covariance(n: usize, samples: &[f64]) -> Matrix {
    let m = samples.len() / n;
    let a = DMatrix::from_row_slice(n, m, &samples[..n * m]);
    let c = &a * a.transpose() / m as f64;
    Matrix::from_row_slice(n, n, c.transpose().as_slice())
}

/// Solves `min tr(Δ C̃ Δᵀ)` s.t. `(W + Δ) K = V` row by row through the
/// bordered system `[2C̃ K; Kᵀ 0]`.
fn kkt_oracle(w: &Matrix, c_reg: &Matrix, keys: &Matrix, values: &Matrix) -> Matrix {
    let (n, b) = (keys.rows(), keys.cols());
    let mut sys = DMatrix::zeros(n + b, n + b);
    for i in 0..n {
        for j in 0..n {
            sys[(i, j)] = 2.0 * c_reg[(i, j)];
        }
        for j in 0..b {
            sys[(i, n + j)] = keys[(i, j)];
            sys[(n + j, i)] = keys[(i, j)];
        }
    }
    let lu = sys.lu();
    let wk = w.matmul(keys);
    let mut out = w.clone();
    for r in 0..w.rows() {
        let mut rhs = DVector::zeros(n + b);
        for j in 0..b {
            rhs[n + j] = values[(r, j)] - wk[(r, j)];
        }
        let sol = lu.solve(&rhs).expect("bordered system is nonsingular");
        for i in 0..n {
            out[(r, i)] += sol[i];
        }
    }
    out
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn identity_example() {
    let w = Matrix::identity(2);
    let out = rank_one_edit(&w, &stats(Matrix::identity(2), 0.0), &[1.0, 0.0], &[2.0, 0.0]).unwrap();
    assert_eq!(out.as_slice(), &[2.0, 0.0, 0.0, 1.0]);
    assert_eq!(out.matvec(&[1.0, 0.0]), vec![2.0, 0.0]);
}

#[test]
fn satisfied_constraint_leaves_w_unchanged() {
    let w = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.25]);
    let k = [0.3, -0.2, 0.7];
    let v = w.matvec(&k);
    let out = rank_one_edit(&w, &stats(Matrix::identity(3), 0.1), &k, &v).unwrap();
    assert_eq!(out, w);
}

#[test]
fn zero_key_is_rejected() {
    let w = Matrix::identity(2);
    let err = rank_one_edit(&w, &stats(Matrix::identity(2), 0.0), &[0.0, 0.0], &[1.0, 1.0]).unwrap_err();
    assert!(matches!(err, Error::ZeroDenominator(_)), "{err}");
}

#[test]
fn singular_covariance_is_rejected() {
    let c = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let err = rank_one_edit(&Matrix::identity(2), &stats(c, 0.0), &[1.0, 0.0], &[2.0, 0.0]).unwrap_err();
    assert!(matches!(err, Error::NotPositiveDefinite { .. }), "{err}");
}

#[test]
fn batched_orthonormal_example() {
    let w = Matrix::identity(2);
    let v = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
    let out = batched_edit(&w, &stats(Matrix::identity(2), 0.0), &Matrix::identity(2), &v).unwrap();
    assert!(max_abs(out.as_slice(), &[2.0, 0.0, 0.0, 3.0]) <= 1e-12);
}

#[test]
fn batched_rejects_duplicated_keys() {
    let keys = Matrix::from_columns(&[vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 0.0]]);
    let v = Matrix::zeros(2, 2);
    let err = batched_edit(&Matrix::zeros(2, 3), &stats(Matrix::identity(3), 0.0), &keys, &v).unwrap_err();
    assert!(matches!(err, Error::RankDeficient { rank: 1, cols: 2 }), "{err}");
}

fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (4usize..=12, 2usize..=12).prop_flat_map(|(n, d)| {
        let len = d * n + 3 * n * n + n + d + 8 * n;
        (Just(n), Just(d), prop::collection::vec(-1.0f64..1.0, len))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rank_one_is_exact_minimal_and_rank_one((n, d, vals) in instance(), ridge in 0.0f64..0.5) {
        let w = random_matrix(d, n, &vals);
        let mut rest = &vals[d * n..];
        let c = sample_covariance(n, &rest[..3 * n * n]);
        rest = &rest[3 * n * n..];
        let mut k = rest[..n].to_vec();
        k[0] += 1.5;
        let v: Vec<f64> = rest[n..n + d].iter().map(|x| 3.0 * x).collect();
        let st = CovarianceStats::new(0, c, 3 * n, ridge + 1e-3).unwrap();
        let out = rank_one_edit(&w, &st, &k, &v).unwrap();

        prop_assert!(max_abs(&out.matvec(&k), &v) <= 1e-5);

        let oracle = kkt_oracle(&w, &st.regularized(), &Matrix::from_columns(std::slice::from_ref(&k)), &Matrix::from_columns(&[v.clone()]));
        prop_assert!(out.max_abs_diff(&oracle) <= 1e-4, "oracle diff {}", out.max_abs_diff(&oracle));

        // Every row of Δ is parallel to C̃⁻¹k.
        let delta = out.sub(&w);
        prop_assert!(delta.column_rank(1e-9) <= 1);
        let dir = st.factor().unwrap().solve(&k);
        let dn = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        for r in 0..d {
            let row = delta.row(r);
            let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if rn > 1e-9 {
                let cos = row.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>() / (rn * dn);
                prop_assert!(cos.abs() >= 1.0 - 1e-6, "cosine {cos}");
            }
        }
    }

    #[test]
    fn batched_is_exact_and_minimal((n, d, vals) in instance(), b in 1usize..4) {
        let b = b.min(n - 1);
        let w = random_matrix(d, n, &vals);
        let rest = &vals[d * n..];
        let c = sample_covariance(n, &rest[..3 * n * n]);
        let st = CovarianceStats::new(0, c, 3 * n, 1e-2).unwrap();
        // Keys: shifted basis vectors plus noise, so full column rank.
        let cols: Vec<Vec<f64>> = (0..b)
            .map(|j| (0..n).map(|i| if i == j { 2.0 } else { 0.1 * rest[(i * 7 + j) % rest.len()] }).collect())
            .collect();
        let keys = Matrix::from_columns(&cols);
        let vcols: Vec<Vec<f64>> = (0..b).map(|j| (0..d).map(|i| rest[(i * 5 + j * 3 + 1) % rest.len()]).collect()).collect();
        let values = Matrix::from_columns(&vcols);
        let out = batched_edit(&w, &st, &keys, &values).unwrap();
        prop_assert!(out.matmul(&keys).max_abs_diff(&values) <= 1e-4);
        let oracle = kkt_oracle(&w, &st.regularized(), &keys, &values);
        prop_assert!(out.max_abs_diff(&oracle) <= 1e-4);
    }

    #[test]
    fn batched_with_one_key_matches_rank_one((n, d, vals) in instance()) {
        let w = random_matrix(d, n, &vals);
        let rest = &vals[d * n..];
        let st = CovarianceStats::new(0, sample_covariance(n, &rest[..3 * n * n]), 3 * n, 1e-2).unwrap();
        let rest = &rest[3 * n * n..];
        let mut k = rest[..n].to_vec();
        k[1] += 1.0;
        let v = rest[n..n + d].to_vec();
        let one = rank_one_edit(&w, &st, &k, &v).unwrap();
        let many = batched_edit(&w, &st, &Matrix::from_columns(&[k]), &Matrix::from_columns(&[v])).unwrap();
        prop_assert!(one.max_abs_diff(&many) <= 1e-6);
    }
}
