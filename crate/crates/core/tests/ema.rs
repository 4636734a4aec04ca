use stsc_core::model::{ema_update, init_params, HeadMode};

#[test]
fn constant_student_matches_closed_form() {
    let student = init_params(&[3, 4, 2], HeadMode::SingleLabel, 1).unwrap();
    let teacher0 = init_params(&[3, 4, 2], HeadMode::SingleLabel, 2).unwrap();
    for alpha in [0.0, 0.5, 0.99, 1.0] {
        let mut teacher = teacher0.clone();
        for t in 1..=100i32 {
            teacher = ema_update(&teacher, &student, alpha).unwrap();
            let at = alpha.powi(t);
            for ((th, t0), s) in teacher.tensors().iter().zip(teacher0.tensors()).zip(student.tensors()) {
                for ((&v, &v0), &sv) in th.data().iter().zip(t0.data()).zip(s.data()) {
                    let expect = at * v0 + (1.0 - at) * sv;
                    assert!((v - expect).abs() <= 1e-12, "alpha {alpha} t {t}: {v} vs {expect}");
                }
            }
        }
    }
}

#[test]
fn rejects_bad_alpha_and_shapes() {
    let a = init_params(&[3, 4, 2], HeadMode::SingleLabel, 1).unwrap();
    let b = init_params(&[3, 5, 2], HeadMode::SingleLabel, 1).unwrap();
    assert!(ema_update(&a, &a, 1.5).is_err());
    assert!(ema_update(&a, &b, 0.5).is_err());
}
