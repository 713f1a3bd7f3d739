//! Forward evaluation of the training objectives: dual-softmax correspondence
//! loss, orthogonal-Procrustes distillation loss with low-rank teacher
//! compression, the patch-wise unfold-softmax detection loss, and their
//! weighted total.
//!
//! Everything here runs in `f64` on `nalgebra` matrices. Descriptor rows are
//! samples, columns are dimensions.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Matrix};

pub use crate::matcher::LOSS_TEMPERATURE;

/// Window edge of the unfold-softmax patches.
pub const UNFOLD_WINDOW: usize = 8;

const LOG_EPS: f64 = 1e-12;
const SVD_EPS: f64 = 1e-14;
const SVD_MAX_ITERS: usize = 10_000;

/// Widens an engine descriptor matrix for loss evaluation.
pub fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows, m.cols, |i, j| m.get(i, j) as f64)
}

/// Paired descriptors `d_a[i] <-> d_b[i]` with a visibility mask.
#[derive(Clone, Debug)]
pub struct CorrespondenceBatch {
    pub d_a: DMatrix<f64>,
    pub d_b: DMatrix<f64>,
    pub mask: Vec<bool>,
}

/// `-(1/Σm) Σ m_i log(max(P_ii, ε))` with `P` the dual-softmax of
/// `d_a d_bᵀ / temperature`.
pub fn dual_softmax_loss(batch: &CorrespondenceBatch, temperature: f64) -> Result<f64> {
    let n = batch.d_a.nrows();
    if batch.d_b.nrows() != n || batch.mask.len() != n {
        return Err(Error::shape(format!(
            "batch rows differ: d_a {n}, d_b {}, mask {}",
            batch.d_b.nrows(),
            batch.mask.len()
        )));
    }
    if batch.d_a.ncols() != batch.d_b.ncols() {
        return Err(Error::shape("descriptor dimensions differ"));
    }
    let visible = batch.mask.iter().filter(|&&m| m).count();
    if visible == 0 {
        return Err(Error::Numeric("no visible correspondences".into()));
    }
    let logits = (&batch.d_a * batch.d_b.transpose()) / temperature;
    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp(logits.row(i).iter().copied())).collect();
    let col_lse: Vec<f64> = (0..n).map(|j| log_sum_exp(logits.column(j).iter().copied())).collect();
    let mut total = 0.0;
    for i in (0..n).filter(|&i| batch.mask[i]) {
        let l = logits[(i, i)];
        let p = (l - row_lse[i]).exp() * (l - col_lse[i]).exp();
        total -= p.max(LOG_EPS).ln();
    }
    Ok(total / visible as f64)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Rank-reduced teacher descriptors.
#[derive(Clone, Debug)]
pub struct LowRank {
    /// `U_C Σ_C`.
    pub d_l: DMatrix<f64>,
    /// Rows of `d_l` scaled to unit norm.
    pub d_n: DMatrix<f64>,
    /// Rows of `d_l` that were zero and stay zero in `d_n`.
    pub zero_rows: Vec<usize>,
    /// All singular values of the teacher, descending.
    pub singular_values: Vec<f64>,
}

/// Truncated SVD of the stacked teacher batch to `target_dim` columns.
///
/// Each left singular vector is signed so its first nonzero entry is positive.
pub fn lra_compress(teacher: &DMatrix<f64>, target_dim: usize) -> Result<LowRank> {
    let (rows, cols) = teacher.shape();
    if target_dim == 0 || rows < target_dim || cols < target_dim {
        return Err(Error::shape(format!(
            "cannot compress a {rows}x{cols} teacher to {target_dim} dimensions"
        )));
    }
    let svd = nalgebra::SVD::try_new(teacher.clone(), true, false, SVD_EPS, SVD_MAX_ITERS)
        .ok_or_else(|| Error::Numeric("teacher SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("requested U");
    let mut d_l = DMatrix::zeros(rows, target_dim);
    for k in 0..target_dim {
        let col = u.column(k);
        let sign = match col.iter().find(|v| v.abs() > 1e-12) {
            Some(&v) if v < 0.0 => -1.0,
            _ => 1.0,
        };
        let scale = sign * svd.singular_values[k];
        for i in 0..rows {
            d_l[(i, k)] = col[i] * scale;
        }
    }
    let mut d_n = d_l.clone();
    let mut zero_rows = Vec::new();
    for i in 0..rows {
        let norm = d_n.row(i).norm();
        if norm > 1e-12 {
            d_n.row_mut(i).unscale_mut(norm);
        } else {
            d_n.row_mut(i).fill(0.0);
            zero_rows.push(i);
        }
    }
    Ok(LowRank {
        d_l,
        d_n,
        zero_rows,
        singular_values: svd.singular_values.iter().copied().collect(),
    })
}

/// Orthogonal `Ω` maximizing `tr(d_aᵀ reference Ω)`, i.e. the rotation that
/// best maps `reference` onto `d_a`.
pub fn opp_solve(d_a: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if d_a.shape() != reference.shape() {
        return Err(Error::shape(format!(
            "alignment needs equal shapes, got {:?} and {:?}",
            d_a.shape(),
            reference.shape()
        )));
    }
    let cross = d_a.transpose() * reference;
    let svd = nalgebra::SVD::try_new(cross, true, true, SVD_EPS, SVD_MAX_ITERS)
        .ok_or_else(|| Error::Numeric("alignment SVD did not converge".into()))?;
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V");
    Ok(v_t.transpose() * u.transpose())
}

/// `Σ_i (1 − (d_n Ω d_aᵀ)_ii)²`.
pub fn op_loss(d_a: &DMatrix<f64>, d_n: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<f64> {
    if d_a.nrows() != d_n.nrows() || d_n.ncols() != omega.nrows() || omega.ncols() != d_a.ncols() {
        return Err(Error::shape("op_loss operand shapes disagree"));
    }
    let aligned = d_n * omega;
    Ok((0..d_a.nrows())
        .map(|i| {
            let c = aligned.row(i).dot(&d_a.row(i));
            (1.0 - c) * (1.0 - c)
        })
        .sum())
}

/// Which teacher representation `Ω` is solved against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OpAlignment {
    /// Solve and evaluate against the normalized rows.
    #[default]
    Normalized,
    /// Solve against the unnormalized low-rank rows, evaluate against the
    /// normalized ones.
    Mixed,
}

/// Compresses the teacher, aligns it to the student and evaluates [`op_loss`].
pub fn distillation_loss(d_a: &DMatrix<f64>, teacher: &DMatrix<f64>, alignment: OpAlignment) -> Result<f64> {
    let lr = lra_compress(teacher, d_a.ncols())?;
    let reference = match alignment {
        OpAlignment::Normalized => &lr.d_n,
        OpAlignment::Mixed => &lr.d_l,
    };
    let omega = opp_solve(d_a, reference)?;
    op_loss(d_a, &lr.d_n, &omega)
}

/// `‖d_a d_aᵀ − r rᵀ‖_F²`.
pub fn gram_residual(d_a: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<f64> {
    if d_a.nrows() != reference.nrows() {
        return Err(Error::shape("gram_residual needs equal row counts"));
    }
    let diff = d_a * d_a.transpose() - reference * reference.transpose();
    Ok(diff.norm_squared())
}

/// Mean over non-overlapping `window × window` patches of the cross-entropy
/// between the teacher's and the student's patch softmax.
pub fn unfold_softmax_loss(student: &FeatureMap, teacher: &FeatureMap, window: usize) -> Result<f64> {
    let dims = (student.height, student.width, student.channels);
    if dims != (teacher.height, teacher.width, teacher.channels) {
        return Err(Error::shape(format!(
            "student {:?} and teacher {:?} differ",
            dims,
            (teacher.height, teacher.width, teacher.channels)
        )));
    }
    if student.channels != 1 {
        return Err(Error::shape("logit maps must have one channel"));
    }
    if window == 0 || student.height == 0 || !student.height.is_multiple_of(window) || !student.width.is_multiple_of(window) {
        return Err(Error::shape(format!(
            "{}x{} map is not divisible into {window}x{window} patches",
            student.height, student.width
        )));
    }
    let mut s = Vec::with_capacity(window * window);
    let mut t = Vec::with_capacity(window * window);
    let mut total = 0.0;
    let mut patches = 0usize;
    for py in (0..student.height).step_by(window) {
        for px in (0..student.width).step_by(window) {
            s.clear();
            t.clear();
            for y in py..py + window {
                for x in px..px + window {
                    s.push(student.get(y, x, 0) as f64);
                    t.push(teacher.get(y, x, 0) as f64);
                }
            }
            let s_lse = log_sum_exp(s.iter().copied());
            let t_lse = log_sum_exp(t.iter().copied());
            total -= t
                .iter()
                .zip(&s)
                .map(|(&tv, &sv)| (tv - t_lse).exp() * (sv - s_lse))
                .sum::<f64>();
            patches += 1;
        }
    }
    Ok(total / patches as f64)
}

/// `w_ds·l_ds + w_op·l_op + w_us·l_us`.
pub fn total_loss(l_ds: f64, l_op: f64, l_us: f64, weights: [f32; 3]) -> f64 {
    debug_assert!(weights.iter().all(|&w| w >= 0.0));
    let [w_ds, w_op, w_us] = weights.map(f64::from);
    let term = |w: f64, l: f64| if w == 0.0 { 0.0 } else { w * l };
    term(w_ds, l_ds) + term(w_op, l_op) + term(w_us, l_us)
}

/// Random orthogonal `d × d` matrix: QR of a uniform matrix, with column signs
/// drawn independently so both determinants occur.
pub fn random_orthogonal<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    loop {
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let qr = m.qr();
        if qr.r().diagonal().iter().any(|v: &f64| v.abs() < 1e-9) {
            continue;
        }
        let mut q = qr.q();
        for j in 0..d {
            if rng.random_bool(0.5) {
                q.column_mut(j).neg_mut();
            }
        }
        return q;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn unit_rows(mut m: DMatrix<f64>) -> DMatrix<f64> {
        for mut row in m.row_iter_mut() {
            let n = row.norm();
            row.unscale_mut(n);
        }
        m
    }

    fn batch(d_a: DMatrix<f64>, d_b: DMatrix<f64>) -> CorrespondenceBatch {
        let mask = vec![true; d_a.nrows()];
        CorrespondenceBatch { d_a, d_b, mask }
    }

    #[test]
    fn dual_softmax_examples() {
        let one = DMatrix::from_row_slice(1, 3, &[0.6, 0.0, 0.8]);
        assert_eq!(dual_softmax_loss(&batch(one.clone(), one), 20.0).unwrap(), 0.0);

        let eye = DMatrix::<f64>::identity(2, 4);
        let l = dual_softmax_loss(&batch(eye.clone(), eye), 20.0).unwrap();
        // P_ii = (e^{1/20} / (e^{1/20} + 1))²
        let p = (0.05f64.exp() / (0.05f64.exp() + 1.0)).powi(2);
        assert!((p - 0.26266).abs() < 1e-5);
        assert!((l + p.ln()).abs() < 1e-12);
        assert!((l - 1.337).abs() < 1e-3);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = DMatrix::<f64>::identity(3, 3);
        let mut b = batch(m.clone(), m);
        b.mask = vec![false; 3];
        assert!(matches!(dual_softmax_loss(&b, 20.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = unit_rows(random_matrix(&mut rng, 6, 5));
        let b = unit_rows(random_matrix(&mut rng, 6, 5));
        let mut bt = batch(a.clone(), b.clone());
        bt.mask = vec![true, false, true, false, false, false];
        let got = dual_softmax_loss(&bt, 20.0).unwrap();
        // loop oracle
        let s = &a * b.transpose() / 20.0;
        let p = |i: usize| {
            let r: f64 = (0..6).map(|j| s[(i, j)].exp()).sum();
            let c: f64 = (0..6).map(|j| s[(j, i)].exp()).sum();
            s[(i, i)].exp() / r * s[(i, i)].exp() / c
        };
        let want = -(p(0).ln() + p(2).ln()) / 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn permuting_off_diagonal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = unit_rows(random_matrix(&mut rng, 5, 4));
        let b = unit_rows(random_matrix(&mut rng, 5, 4));
        let base = dual_softmax_loss(&batch(a.clone(), b.clone()), 20.0).unwrap();
        // swapping two masked-out rows of d_b permutes columns 3 and 4 only
        let mut bp = b.clone();
        bp.swap_rows(3, 4);
        let mut x = batch(a.clone(), b);
        let mut y = batch(a, bp);
        x.mask = vec![true, true, true, false, false];
        y.mask = x.mask.clone();
        let lx = dual_softmax_loss(&x, 20.0).unwrap();
        let ly = dual_softmax_loss(&y, 20.0).unwrap();
        assert!((lx - ly).abs() < 1e-12);
        assert!(base > 0.0);
    }

    #[test]
    fn lra_exact_for_low_rank_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let left = random_matrix(&mut rng, 40, 6);
        let right = random_matrix(&mut rng, 6, 16);
        let teacher = &left * &right;
        let lr = lra_compress(&teacher, 8).unwrap();
        let diff = &teacher * teacher.transpose() - &lr.d_l * lr.d_l.transpose();
        assert!(diff.norm() < 1e-5 * teacher.norm_squared().max(1.0));
        assert!(diff.abs().max() < 1e-5);
    }

    #[test]
    fn lra_truncation_error_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let teacher = random_matrix(&mut rng, 30, 12);
            let target = 5;
            let lr = lra_compress(&teacher, target).unwrap();
            let gram = &teacher * teacher.transpose();
            let got = (&gram - &lr.d_l * lr.d_l.transpose()).norm();
            let mut eig: Vec<f64> = gram.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            let want = eig[target..].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn lra_beats_random_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let teacher = random_matrix(&mut rng, 24, 10);
        let target = 4;
        let gram = &teacher * teacher.transpose();
        let lr = lra_compress(&teacher, target).unwrap();
        let best = (&gram - &lr.d_l * lr.d_l.transpose()).norm();
        for _ in 0..1000 {
            let q = random_orthogonal(&mut rng, 10);
            let p = q.columns(0, target).into_owned();
            let proj = &teacher * p;
            let err = (&gram - &proj * proj.transpose()).norm();
            assert!(best <= err + 1e-9);
        }
    }

    #[test]
    fn lra_sign_convention_and_zero_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut teacher = random_matrix(&mut rng, 12, 6);
        teacher.row_mut(0).fill(0.0);
        let lr = lra_compress(&teacher, 3).unwrap();
        assert_eq!(lr.zero_rows, vec![0]);
        assert!(lr.d_n.row(0).iter().all(|&v| v == 0.0));
        for k in 0..3 {
            let first = lr.d_l.column(k).iter().copied().find(|v| v.abs() > 1e-12).unwrap();
            assert!(first > 0.0);
        }
        for i in 1..12 {
            assert!((lr.d_n.row(i).norm() - 1.0).abs() < 1e-12);
        }
        let neg = -teacher.clone();
        let ln = lra_compress(&neg, 3).unwrap();
        assert!((&ln.d_l - &lr.d_l).abs().max() < 1e-9);
        assert!(matches!(lra_compress(&teacher, 13), Err(Error::Shape(_))));
    }

    #[test]
    fn opp_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d_l = random_matrix(&mut rng, 20, 6);
        let omega = opp_solve(&d_l, &d_l).unwrap();
        assert!((&d_l * &omega - &d_l).abs().max() < 1e-5);

        let r = random_orthogonal(&mut rng, 6);
        let d_a = &d_l * &r;
        let omega = opp_solve(&d_a, &d_l).unwrap();
        assert!((&d_l * &omega - &d_a).norm() <= 1e-5);
    }

    #[test]
    fn opp_beats_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d_a = random_matrix(&mut rng, 10, 4);
        let d_l = random_matrix(&mut rng, 10, 4);
        let cross = d_a.transpose() * &d_l;
        let omega = opp_solve(&d_a, &d_l).unwrap();
        let best = (&cross * &omega).trace();
        for _ in 0..1000 {
            let q = random_orthogonal(&mut rng, 4);
            assert!((&cross * q).trace() <= best + 1e-9);
        }
    }

    #[test]
    fn op_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d_n = unit_rows(random_matrix(&mut rng, 7, 5));
        let omega = random_orthogonal(&mut rng, 5);
        let d_a = &d_n * &omega;
        assert!(op_loss(&d_a, &d_n, &omega).unwrap() < 1e-20);

        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let n = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let eye = DMatrix::identity(2, 2);
        assert_eq!(op_loss(&a, &n, &eye).unwrap(), 1.0);

        let d_a = random_matrix(&mut rng, 7, 5);
        let got = op_loss(&d_a, &d_n, &omega).unwrap();
        let mut want = 0.0;
        for i in 0..7 {
            let mut c = 0.0;
            for j in 0..5 {
                for k in 0..5 {
                    c += d_n[(i, k)] * omega[(k, j)] * d_a[(i, j)];
                }
            }
            want += (1.0 - c) * (1.0 - c);
        }
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn distillation_alignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let teacher = random_matrix(&mut rng, 32, 16);
        let d_a = unit_rows(random_matrix(&mut rng, 32, 4));
        let n = distillation_loss(&d_a, &teacher, OpAlignment::Normalized).unwrap();
        let m = distillation_loss(&d_a, &teacher, OpAlignment::Mixed).unwrap();
        assert!(n.is_finite() && m.is_finite() && n >= 0.0 && m >= 0.0);
        // a student equal to the compressed teacher is perfectly aligned
        let lr = lra_compress(&teacher, 4).unwrap();
        let l = distillation_loss(&lr.d_n, &teacher, OpAlignment::Normalized).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn gram_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_matrix(&mut rng, 6, 3);
        assert_eq!(gram_residual(&a, &a).unwrap(), 0.0);

        let eye = DMatrix::<f64>::identity(5, 5);
        assert!((gram_residual(&eye, &DMatrix::zeros(5, 5)).unwrap() - 5.0).abs() < 1e-15);

        let mut neg = a.clone();
        neg.row_mut(2).neg_mut();
        let got = gram_residual(&a, &neg).unwrap();
        let mut want = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                let g1: f64 = (0..3).map(|k| a[(i, k)] * a[(j, k)]).sum();
                let g2: f64 = (0..3).map(|k| neg[(i, k)] * neg[(j, k)]).sum();
                want += (g1 - g2) * (g1 - g2);
            }
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn unfold_examples() {
        let flat = FeatureMap::filled(4, 4, 1, 0.3);
        let l = unfold_softmax_loss(&flat, &flat, 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let mut spike = FeatureMap::zeros(8, 8, 1);
        spike.set(3, 5, 0, 60.0);
        let uniform = FeatureMap::zeros(8, 8, 1);
        let l = unfold_softmax_loss(&uniform, &spike, 8).unwrap();
        assert!((l - 64f64.ln()).abs() < 1e-9);

        assert!(matches!(
            unfold_softmax_loss(&uniform, &FeatureMap::zeros(8, 16, 1), 8),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            unfold_softmax_loss(&FeatureMap::zeros(12, 12, 1), &FeatureMap::zeros(12, 12, 1), 8),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn unfold_self_equals_mean_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = FeatureMap::from_fn(16, 16, 1, |_, _, _| rng.random_range(-3.0..3.0));
        let got = unfold_softmax_loss(&t, &t, 8).unwrap();
        let mut want = 0.0;
        for (py, px) in [(0, 0), (0, 8), (8, 0), (8, 8)] {
            let z: f64 = (0..64).map(|i| (t.get(py + i / 8, px + i % 8, 0) as f64).exp()).sum();
            for i in 0..64 {
                let p = (t.get(py + i / 8, px + i % 8, 0) as f64).exp() / z;
                want -= p * p.ln();
            }
        }
        assert!((got - want / 4.0).abs() < 1e-10);
    }

    #[test]
    fn total_loss_examples() {
        let a48 = crate::config::ModelConfig::by_name("A48").unwrap().loss_weights();
        assert_eq!(a48, [0.05, 1.0, 1.0]);
        assert!((total_loss(2.0, 3.0, 4.0, a48) - 7.1).abs() < 1e-6);
        assert_eq!(total_loss(0.0, 0.0, 0.0, a48), 0.0);
        let s64 = crate::config::ModelConfig::by_name("S64").unwrap().loss_weights();
        assert_eq!(s64, [1.0, 0.0, 1.0]);
        assert_eq!(total_loss(1.0, 5.0, 2.0, s64), 3.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn dual_softmax_nonnegative_and_monotone(seed in any::<u64>(), n in 2usize..8, boost in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = unit_rows(random_matrix(&mut rng, n, 6));
            let b = unit_rows(random_matrix(&mut rng, n, 6));
            let before = dual_softmax_loss(&batch(a.clone(), b.clone()), 20.0).unwrap();
            prop_assert!(before >= 0.0);
            // an extra dimension used only by pair 0 raises S_00 alone
            let mut a2 = a.clone().insert_column(6, 0.0);
            let mut b2 = b.clone().insert_column(6, 0.0);
            a2[(0, 6)] = 1.0;
            b2[(0, 6)] = boost;
            let after = dual_softmax_loss(&batch(a2, b2), 20.0).unwrap();
            prop_assert!(after <= before + 1e-12);
        }

        #[test]
        fn opp_is_orthogonal(seed in any::<u64>(), d in 2usize..9, n in 9usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d_a = random_matrix(&mut rng, n, d);
            let d_l = random_matrix(&mut rng, n, d);
            let omega = opp_solve(&d_a, &d_l).unwrap();
            let err = (omega.transpose() * &omega - DMatrix::identity(d, d)).abs().max();
            prop_assert!(err <= 1e-5);
        }

        #[test]
        fn opp_optimal_against_sampling(seed in any::<u64>(), d in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d_a = random_matrix(&mut rng, 12, d);
            let d_l = random_matrix(&mut rng, 12, d);
            let cross = d_a.transpose() * &d_l;
            let best = (&cross * opp_solve(&d_a, &d_l).unwrap()).trace();
            for _ in 0..50 {
                prop_assert!((&cross * random_orthogonal(&mut rng, d)).trace() <= best + 1e-9);
            }
        }

        #[test]
        fn unfold_minimized_by_teacher(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = FeatureMap::from_fn(16, 8, 1, |_, _, _| rng.random_range(-4.0..4.0));
            let s = FeatureMap::from_fn(16, 8, 1, |_, _, _| rng.random_range(-4.0..4.0));
            prop_assert!(unfold_softmax_loss(&t, &t, 8).unwrap() <= unfold_softmax_loss(&s, &t, 8).unwrap() + 1e-12);
        }
    }
}
