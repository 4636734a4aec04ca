use stsc_core::data::Labels;
use stsc_core::gradcheck::{finite_difference_grad, relative_error};
use stsc_core::model::{forward, init_params, HeadMode, Perturbation};
use stsc_core::relation::relation_matrix;
use stsc_core::temporal::{binarize, CacheEntry};
use stsc_core::trainer::{build_loss_graph, LossSwitches, LossWeights, StepInputs};
use stsc_core::Tensor;

/// Full-network parameter gradients of the combined loss, including every
/// unsupervised term, against central differences.
#[test]
fn combined_loss_parameter_gradients() {
    for seed in 0..6u64 {
        let mut student = init_params(&[3, 5, 4, 2], HeadMode::SingleLabel, seed).unwrap();
        // positive biases keep every feature row away from the all-zero
        // point, where row normalization is not differentiable
        for layer in &mut student.layers {
            layer.bias = Tensor::full(layer.bias.shape(), 0.3);
        }
        let teacher = init_params(&[3, 5, 4, 2], HeadMode::SingleLabel, seed + 100).unwrap();
        let b = 5;
        let x = Tensor::new(vec![b, 3], (0..b * 3).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
        let ids: Vec<u64> = (0..b as u64).map(|i| 10 + i).collect();
        let teacher_out = forward(&teacher, &x, &Perturbation::none()).unwrap();
        let prev_rel = relation_matrix(&teacher_out.features, &ids).unwrap();
        let prev = CacheEntry { adjacency: binarize(&prev_rel, 0.0), relation: prev_rel, iteration: 0 };
        let targets = Labels::Single { classes: 2, labels: vec![1, 0] };
        let inputs = StepInputs {
            x: &x,
            batch_ids: &ids,
            labeled: &[0, 3],
            targets: &targets,
            teacher_out: &teacher_out,
            student_pert: Perturbation::none(),
            previous: Some(&prev),
            iteration: 1,
        };
        let weights = LossWeights { lambda: 0.7, beta: 1.3, gamma: 2.0, switches: LossSwitches::ALL };
        // tau = 0 makes every pair an edge, so the stable set cannot change
        // under the small finite-difference probes.
        let graph = build_loss_graph(&student, &inputs, &weights, 0.0).unwrap();
        assert!(graph.l_tc.is_some());
        let grads = graph.tape.backward(graph.total).unwrap();
        for (k, &var) in graph.bound.vars.iter().enumerate() {
            let analytic = grads.get(var).unwrap();
            let numeric = finite_difference_grad(
                |t| {
                    let mut p = student.clone();
                    *p.tensors_mut()[k] = t.clone();
                    let g = build_loss_graph(&p, &inputs, &weights, 0.0)?;
                    Ok(g.tape.value(g.total).item())
                },
                student.tensors()[k],
                1e-6,
            )
            .unwrap();
            let err = relative_error(analytic, &numeric);
            assert!(err < 1e-5, "seed {seed} tensor {k}: {err} {analytic:?} {numeric:?}");
        }
    }
}
