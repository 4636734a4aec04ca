//! Case-wise Gram matrices, row-normalized relation matrices and the two
//! teacher-student consistency losses built on them.
//!
//! Each loss comes in two forms: a value function on plain tensors, and a
//! `*_tape` function that records the same computation for differentiation.
//! The teacher side is always a constant on the tape.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-L2-normalized Gram matrix of one mini-batch, tagged with the dataset
/// ids of its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    pub values: Tensor,
    pub batch_ids: Vec<u64>,
    /// Rows whose features were all zero (left as zero rows).
    pub zero_rows: Vec<usize>,
}

impl RelationMatrix {
    pub fn size(&self) -> usize {
        self.batch_ids.len()
    }
}

pub(crate) fn check_aligned(a: &[u64], b: &[u64]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Alignment(format!(
            "batch ids differ ({} vs {} samples)",
            a.len(),
            b.len()
        )))
    }
}

fn check_features(features: &Tensor) -> Result<(usize, usize)> {
    let (b, k) = features.expect_matrix("gram_matrix")?;
    if b == 0 || k == 0 {
        return Err(Error::Shape {
            op: "gram_matrix",
            left: features.shape().to_vec(),
            right: alloc::vec![1, 1],
        });
    }
    Ok((b, k))
}

/// `M = D·Dᵀ` for features `D` of shape `[B × K]`.
pub fn gram_matrix(features: &Tensor) -> Result<Tensor> {
    check_features(features)?;
    features.matmul(&features.transpose()?)
}

pub fn relation_matrix(features: &Tensor, batch_ids: &[u64]) -> Result<RelationMatrix> {
    let (b, _) = check_features(features)?;
    if batch_ids.len() != b {
        return Err(Error::Alignment(format!(
            "{} batch ids for {b} feature rows",
            batch_ids.len()
        )));
    }
    let normalized = gram_matrix(features)?.row_l2_normalize()?;
    Ok(RelationMatrix {
        values: normalized.tensor,
        batch_ids: batch_ids.to_vec(),
        zero_rows: normalized.zero_rows,
    })
}

pub fn gram_tape(tape: &mut Tape, features: Var) -> Result<Var> {
    check_features(tape.value(features))?;
    let t = tape.transpose(features)?;
    tape.matmul(features, t)
}

/// Relation matrix node plus the indices of zero rows.
pub fn relation_tape(tape: &mut Tape, features: Var) -> Result<(Var, Vec<usize>)> {
    let m = gram_tape(tape, features)?;
    tape.row_l2_normalize(m)
}

/// Mean over the batch of `‖p_s − p_t‖²`.
pub fn individual_consistency_loss(p_student: &Tensor, p_teacher: &Tensor) -> Result<f64> {
    p_student.expect_same_shape(p_teacher, "individual_consistency_loss")?;
    let (b, _) = p_student.expect_matrix("individual_consistency_loss")?;
    Ok(p_student.sub(p_teacher)?.squared_frobenius() / b as f64)
}

pub fn individual_consistency_tape(tape: &mut Tape, p_student: Var, p_teacher: Var) -> Result<Var> {
    let (b, _) = tape.value(p_student).expect_matrix("individual_consistency_loss")?;
    let d = tape.sub(p_student, p_teacher)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / b as f64)
}

/// `(1/B)·‖R_s − R_t‖²_F`. Both matrices must describe the same samples in
/// the same order.
pub fn spatial_consistency_loss(r_student: &RelationMatrix, r_teacher: &RelationMatrix) -> Result<f64> {
    check_aligned(&r_student.batch_ids, &r_teacher.batch_ids)?;
    let b = r_student.size() as f64;
    Ok(r_student.values.sub(&r_teacher.values)?.squared_frobenius() / b)
}

pub fn spatial_consistency_tape(tape: &mut Tape, r_student: Var, r_teacher: Var) -> Result<Var> {
    let (b, _) = tape.value(r_student).expect_matrix("spatial_consistency_loss")?;
    let d = tape.sub(r_student, r_teacher)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d3() -> Tensor {
        Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap()
    }

    #[test]
    fn gram_examples() {
        assert_eq!(gram_matrix(&Tensor::identity(3)).unwrap(), Tensor::identity(3));
        let single = Tensor::from_rows(&[[3.0, 4.0, 1.0]]).unwrap();
        assert_eq!(gram_matrix(&single).unwrap().item(), 26.0);
        let expect = Tensor::from_rows(&[[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 2.0]]).unwrap();
        assert_eq!(gram_matrix(&d3()).unwrap(), expect);
        assert!(gram_matrix(&Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn relation_example_rows() {
        let r = relation_matrix(&d3(), &[10, 11, 12]).unwrap();
        let s2 = 1.0 / 2f64.sqrt();
        let s6 = 1.0 / 6f64.sqrt();
        let expect = [[s2, 0.0, s2], [0.0, s2, s2], [s6, s6, 2.0 * s6]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r.values.get(i, j) - expect[i][j]).abs() < 1e-15);
            }
        }
        assert!(r.zero_rows.is_empty());
    }

    #[test]
    fn relation_zero_feature_row_warned() {
        let f = Tensor::from_rows(&[[0.0, 0.0], [1.0, 2.0]]).unwrap();
        let r = relation_matrix(&f, &[0, 1]).unwrap();
        assert_eq!(r.zero_rows, alloc::vec![0]);
        assert_eq!(r.values.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn relation_id_count_checked() {
        assert!(matches!(relation_matrix(&d3(), &[1, 2]), Err(Error::Alignment(_))));
    }

    #[test]
    fn individual_examples() {
        let p = Tensor::from_rows(&[[0.3, 0.7], [0.9, 0.1]]).unwrap();
        assert_eq!(individual_consistency_loss(&p, &p).unwrap(), 0.0);
        let a = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(individual_consistency_loss(&a, &b).unwrap(), 2.0);
        assert!(individual_consistency_loss(&a, &p).is_err());
    }

    #[test]
    fn spatial_examples() {
        let ids = alloc::vec![4, 9];
        let eye = RelationMatrix { values: Tensor::identity(2), batch_ids: ids.clone(), zero_rows: Vec::new() };
        let swap = RelationMatrix {
            values: Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap(),
            batch_ids: ids,
            zero_rows: Vec::new(),
        };
        assert_eq!(spatial_consistency_loss(&eye, &eye).unwrap(), 0.0);
        assert_eq!(spatial_consistency_loss(&eye, &swap).unwrap(), 2.0);
        assert_eq!(spatial_consistency_loss(&swap, &eye).unwrap(), 2.0);
        let other = RelationMatrix { batch_ids: alloc::vec![4, 8], ..swap };
        assert!(matches!(spatial_consistency_loss(&eye, &other), Err(Error::Alignment(_))));
    }

    #[test]
    fn tape_forms_agree_with_values() {
        let f = Tensor::from_rows(&[[0.2, 1.0, -0.4], [0.9, 0.1, 0.3], [-0.5, 0.6, 0.8]]).unwrap();
        let g = Tensor::from_rows(&[[0.1, 1.1, -0.2], [0.7, 0.2, 0.3], [-0.4, 0.5, 0.9]]).unwrap();
        let ids = [0, 1, 2];
        let rs = relation_matrix(&f, &ids).unwrap();
        let rt = relation_matrix(&g, &ids).unwrap();
        let mut tape = Tape::new();
        let fv = tape.param(f);
        let (r, _) = relation_tape(&mut tape, fv).unwrap();
        assert_eq!(tape.value(r), &rs.values);
        let t = tape.constant(rt.values.clone());
        let l = spatial_consistency_tape(&mut tape, r, t).unwrap();
        let expect = spatial_consistency_loss(&rs, &rt).unwrap();
        assert!((tape.value(l).item() - expect).abs() < 1e-15);
        let grads = tape.backward(l).unwrap();
        assert!(!grads.contains(t));
    }
}
