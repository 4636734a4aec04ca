//! Central finite differences, used as an independent check on
//! [`Tape::backward`](crate::Tape::backward).

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::Labels;
use crate::error::{Error, Result};
use crate::relation::{individual_consistency_tape, relation_matrix, relation_tape, spatial_consistency_tape};
use crate::rng::{stream_rng, Stream};
use crate::temporal::{binarize, stable_substructures, temporal_consistency_tape, StableSubstructureSet};
use crate::tensor::Tensor;
use crate::trainer::supervised_loss_tape;

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every coordinate `i`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let scale = libm::sqrt(a.squared_frobenius()).max(libm::sqrt(b.squared_frobenius()));
    if scale == 0.0 {
        0.0
    } else {
        libm::sqrt(diff) / scale
    }
}

/// Loss terms covered by [`loss_term_suite`], in report order.
pub const LOSS_TERMS: [&str; 4] = ["L_s", "L_c", "L_sc", "L_tc"];

#[derive(Debug, Clone, PartialEq)]
pub struct TermCheck {
    pub term: &'static str,
    pub instances: usize,
    pub max_relative_error: f64,
}

impl TermCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// One random problem: the differentiated input and the loss built from it.
struct Instance {
    x: Tensor,
    build: alloc::boxed::Box<dyn Fn(&mut Tape, Var) -> Result<Var>>,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_parts(alloc::vec![rows, cols], data)
}

fn random_labels(rng: &mut impl Rng, b: usize, c: usize, multi: bool) -> Labels {
    if multi {
        Labels::Multi {
            classes: c,
            bits: (0..b).map(|_| (0..c).map(|_| rng.random_bool(0.5)).collect()).collect(),
        }
    } else {
        Labels::Single {
            classes: c,
            labels: (0..b).map(|_| rng.random_range(0..c)).collect(),
        }
    }
}

fn probs(tape: &mut Tape, z: Var, multi: bool) -> Result<Var> {
    if multi {
        tape.sigmoid(z)
    } else {
        tape.softmax_rows(z)
    }
}

fn make_instance(term: &'static str, rng: &mut impl Rng) -> Result<Instance> {
    let b = rng.random_range(2..=6usize);
    // a single feature column normalizes to ±1, leaving R locally constant
    let k_min = if term == "L_sc" || term == "L_tc" { 2 } else { 1 };
    let k = rng.random_range(k_min..=8usize);
    let c = rng.random_range(2..=4usize);
    let multi = rng.random_bool(0.5);
    let ids: Vec<u64> = (0..b as u64).collect();
    Ok(match term {
        "L_s" => {
            let labels = random_labels(rng, b, c, multi);
            Instance {
                x: uniform(rng, b, c, -3.0, 3.0),
                build: alloc::boxed::Box::new(move |t, z| supervised_loss_tape(t, z, &labels)),
            }
        }
        "L_c" => {
            let zt = uniform(rng, b, c, -3.0, 3.0);
            let pt = if multi {
                zt.map(crate::autodiff::sigmoid)
            } else {
                crate::autodiff::softmax_rows(&zt)?
            };
            Instance {
                x: uniform(rng, b, c, -3.0, 3.0),
                build: alloc::boxed::Box::new(move |t, z| {
                    let ps = probs(t, z, multi)?;
                    let pt = t.constant(pt.clone());
                    individual_consistency_tape(t, ps, pt)
                }),
            }
        }
        "L_sc" => {
            let rt = relation_matrix(&uniform(rng, b, k, -1.0, 1.0), &ids)?.values;
            Instance {
                x: uniform(rng, b, k, -1.0, 1.0),
                build: alloc::boxed::Box::new(move |t, d| {
                    let (r, _) = relation_tape(t, d)?;
                    let rt = t.constant(rt.clone());
                    spatial_consistency_tape(t, r, rt)
                }),
            }
        }
        "L_tc" => {
            // Nonnegative features (as after a ReLU) give graphs with edges;
            // redraw until at least one stable sub-structure exists.
            loop {
                let d = uniform(rng, b, k, 0.05, 1.0);
                let prev = relation_matrix(&uniform(rng, b, k, 0.05, 1.0), &ids)?;
                let cur = relation_matrix(&d, &ids)?;
                let tau = rng.random_range(0.3..0.6);
                let s: StableSubstructureSet = stable_substructures(&binarize(&cur, tau), &binarize(&prev, tau))?;
                if s.is_empty() {
                    continue;
                }
                break Instance {
                    x: d,
                    build: alloc::boxed::Box::new(move |t, d| {
                        let (r, _) = relation_tape(t, d)?;
                        temporal_consistency_tape(t, r, &prev, &s)
                    }),
                };
            }
        }
        other => return Err(Error::contract(alloc::format!("unknown loss term {other}"))),
    })
}

/// Compares tape gradients of each loss term against central differences on
/// `instances` random problems per term (batch 2..=6, width up to 8). The
/// optional `fault` corrupts one backward rule of the analytic pass.
pub fn loss_term_suite(
    seed: u64,
    instances: usize,
    eps: f64,
    fault: Option<(&'static str, f64)>,
) -> Result<Vec<TermCheck>> {
    let mut out = Vec::with_capacity(LOSS_TERMS.len());
    for (t, &term) in LOSS_TERMS.iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::Check, t as u64);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let inst = make_instance(term, &mut rng)?;
            let mut tape = Tape::new();
            if let Some((op, factor)) = fault {
                tape.inject_adjoint_fault(op, factor);
            }
            let x = tape.param(inst.x.clone());
            let loss = (inst.build)(&mut tape, x)?;
            let grads = tape.backward(loss)?;
            let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(inst.x.shape()));
            let numeric = finite_difference_grad(
                |v| {
                    let mut tape = Tape::new();
                    let x = tape.param(v.clone());
                    let l = (inst.build)(&mut tape, x)?;
                    Ok(tape.value(l).item())
                },
                &inst.x,
                eps,
            )?;
            worst = worst.max(relative_error(&analytic, &numeric));
        }
        out.push(TermCheck {
            term,
            instances,
            max_relative_error: worst,
        });
    }
    Ok(out)
}


#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn suite_passes_and_detects_faults() {
        let ok = loss_term_suite(3, 10, 1e-5, None).unwrap();
        assert_eq!(ok.len(), 4);
        assert!(ok.iter().all(|c| c.passes(1e-4)), "{ok:?}");
        let bad = loss_term_suite(3, 10, 1e-5, Some(("matmul", 1.5))).unwrap();
        assert!(bad.iter().any(|c| !c.passes(1e-4)));
    }
}
