use gradcost::analysis::{
    convergence_experiment, theorem_bound, BoundInputs, BoundMethod, MethodKind, ObjectiveSpec, Problem,
    RunConfig,
};
use gradcost::forward_ad::jvp;
use gradcost::nn::{init_params, Batch, InitScheme, LossSpec, Model, Target};
use gradcost::objective::{ModelObjective, Objective, Quadratic};
use gradcost::optim::{max_stable_eta, Optimizer, OptimizerConfig, OptimizerKind};
use gradcost::reverse_ad::{backward_checkpointed, backward_vanilla, BackwardMode, CheckpointPlan};
use gradcost::tensor::{matmul, reduce, FlopCounter, Reduction, Tensor};
use gradcost::variants::{apply_mask, estimate_multiple, sparse_mask, Base, EstimatorConfig, Mode};
use gradcost::zero_order::{zo_estimate, zo_estimate_dir, Perturbation, ZoConfig};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Net {
    spec: String,
    rows: usize,
    seed: u64,
}

fn net() -> impl Strategy<Value = Net> {
    (
        1usize..5,
        prop::collection::vec((1usize..6, 0usize..4), 1..5),
        1usize..5,
        any::<u64>(),
    )
        .prop_map(|(input, hidden, rows, seed)| {
            let mut parts = Vec::new();
            let mut w = input;
            for (out, act) in hidden {
                parts.push(format!("linear:{w}:{out}"));
                match act {
                    0 => parts.push("tanh".to_string()),
                    1 => parts.push("softplus".to_string()),
                    2 => parts.push("relu".to_string()),
                    _ => {}
                }
                w = out;
            }
            parts.push(format!("linear:{w}:2"));
            Net {
                spec: parts.join(","),
                rows,
                seed,
            }
        })
}

fn build(n: &Net) -> (ModelObjective, Vec<f64>) {
    let model = Model::parse(&n.spec).unwrap();
    let inw = model.input_width().unwrap();
    let x = Tensor::new(vec![n.rows, inw], Perturbation::new(n.seed, n.rows * inw).regenerate()).unwrap();
    let y = Tensor::new(vec![n.rows, 2], Perturbation::new(n.seed ^ 1, n.rows * 2).regenerate()).unwrap();
    let obj = ModelObjective::new(model.clone(), Batch::new(x, Target::Dense(y)).unwrap(), LossSpec::Mse).unwrap();
    let w = init_params(&model, n.seed ^ 2, InitScheme::ScaledUniform).into_vec();
    (obj, w)
}

fn fresh() -> FlopCounter {
    FlopCounter::new()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_costs_exactly_2mkn(m in 1usize..12, k in 1usize..12, n in 1usize..12) {
        let a = Tensor::zeros(vec![m, k]).unwrap();
        let b = Tensor::zeros(vec![k, n]).unwrap();
        let mut fc = fresh();
        matmul(&a, &b, &mut fc).unwrap();
        prop_assert_eq!(fc.total(), (2 * m * k * n) as u64);
    }

    #[test]
    fn tensor_ops_are_deterministic(data in prop::collection::vec(-1e3f64..1e3, 1..64)) {
        let t = Tensor::vector(data.clone()).unwrap();
        let a = reduce(&t, Reduction::Sum, &mut fresh()).unwrap();
        let b = reduce(&t, Reduction::Sum, &mut fresh()).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        let sq = Tensor::new(vec![1, data.len()], data.clone()).unwrap();
        let c1 = matmul(&sq, &sq.transpose().unwrap(), &mut fresh()).unwrap();
        let c2 = matmul(&sq, &sq.transpose().unwrap(), &mut fresh()).unwrap();
        prop_assert_eq!(c1.data()[0].to_bits(), c2.data()[0].to_bits());
    }

    #[test]
    fn checkpointed_gradient_equals_vanilla(n in net(), seg in 1usize..10) {
        let (obj, w) = build(&n);
        let depth = obj.model.depth();
        let plan = CheckpointPlan::new(depth, seg.min(depth)).unwrap();
        let v = backward_vanilla(&obj.model, &w, &obj.batch, obj.loss, &mut fresh()).unwrap();
        let c = backward_checkpointed(&obj.model, &w, &obj.batch, obj.loss, &plan, &mut fresh()).unwrap();
        for (a, b) in v.grad.iter().zip(&c.grad) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(f64::MIN_POSITIVE));
        }
        let widths = obj.model.widths(obj.model.input_width().unwrap()).unwrap();
        let c_max = (widths.iter().max().unwrap() * n.rows) as u64;
        let s = plan.segment();
        prop_assert!(c.peak_act_units <= (depth.div_ceil(s) + s) as u64 * c_max);
        prop_assert_eq!(v.peak_act_units, (widths.iter().sum::<usize>() * n.rows) as u64);
        prop_assert!(c.flops > v.flops);
    }

    #[test]
    fn gradient_matches_central_differences(n in net()) {
        let (obj, w) = build(&n);
        let g = obj.gradient(&w, BackwardMode::Vanilla, &mut fresh()).unwrap().grad;
        let h = 1e-5;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (obj.evaluate(&wp, &mut fresh()).unwrap().loss
                - obj.evaluate(&wm, &mut fresh()).unwrap().loss)
                / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1e-4), "coord {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn jvp_equals_gradient_projection(n in net(), vseed in any::<u64>()) {
        let (obj, w) = build(&n);
        let g = obj.gradient(&w, BackwardMode::Vanilla, &mut fresh()).unwrap().grad;
        let v = Perturbation::new(vseed, w.len()).regenerate();
        let j = jvp(&obj.model, &w, &obj.batch, obj.loss, &v, &mut fresh()).unwrap().jvp;
        let dot: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        let scale: f64 = g.iter().zip(&v).map(|(a, b)| (a * b).abs()).sum();
        prop_assert!((j - dot).abs() <= 1e-10 * scale.max(1e-300));

        let mut u = Perturbation::new(vseed ^ 7, w.len()).regenerate();
        let gg: f64 = g.iter().map(|x| x * x).sum();
        prop_assume!(gg > 1e-20);
        let ug: f64 = u.iter().zip(&g).map(|(a, b)| a * b).sum();
        for (ui, gi) in u.iter_mut().zip(&g) {
            *ui -= ug / gg * gi;
        }
        let jo = obj.jvp(&w, &u, &mut fresh()).unwrap().jvp;
        prop_assert!(jo.abs() < 1e-10 * (1.0 + scale));
    }

    #[test]
    fn jvp_is_linear(n in net(), alpha in -10.0f64..10.0) {
        let (obj, w) = build(&n);
        let v = Perturbation::new(n.seed ^ 3, w.len()).regenerate();
        let av: Vec<f64> = v.iter().map(|x| alpha * x).collect();
        let j = obj.jvp(&w, &v, &mut fresh()).unwrap().jvp;
        let ja = obj.jvp(&w, &av, &mut fresh()).unwrap().jvp;
        prop_assert!((ja - alpha * j).abs() <= 1e-12 * (1.0 + (alpha * j).abs()));
    }

    #[test]
    fn zo_leaves_parameters_untouched(n in net(), eps in 1e-5f64..1e-1) {
        let (obj, w) = build(&n);
        let before: Vec<u64> = w.iter().map(|x| x.to_bits()).collect();
        zo_estimate(&obj, &w, &Perturbation::new(n.seed, w.len()), ZoConfig::new(eps).unwrap(), &mut fresh()).unwrap();
        let after: Vec<u64> = w.iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn zo_is_exact_on_quadratics(d in 1usize..20, kappa in 1.0f64..100.0, eps in 1e-4f64..1.0, seed in any::<u64>()) {
        let q = Quadratic::ill_conditioned(1.0, kappa, d).unwrap();
        let w = Perturbation::new(seed, d).regenerate();
        let v = Perturbation::new(seed ^ 9, d).regenerate();
        let j = q.jvp(&w, &v, &mut fresh()).unwrap().jvp;
        let s = zo_estimate_dir(&q, &w, &v, ZoConfig::new(eps).unwrap(), &mut fresh()).unwrap().jvps[0];
        prop_assert!((s - j).abs() <= 1e-9 * (1.0 + j.abs()) / eps.min(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parallel_and_sequential_multiple_agree(n in net(), k in 1usize..8, zo in any::<bool>()) {
        let (obj, w) = build(&n);
        let base = if zo { Base::Zo } else { Base::Fmad };
        let seq = EstimatorConfig { mode: Mode::Sequential, n: k, ..EstimatorConfig::new(base) };
        let par = EstimatorConfig { mode: Mode::Parallel, ..seq };
        let perts = seq.perturbations(n.seed, 3, w.len());
        let single = estimate_multiple(&obj, &w, &seq, &perts[..1], None, &mut fresh()).unwrap();
        let mut fs = fresh();
        let mut fp = fresh();
        let s = estimate_multiple(&obj, &w, &seq, &perts, None, &mut fs).unwrap();
        let p = estimate_multiple(&obj, &w, &par, &perts, None, &mut fp).unwrap();
        let sb: Vec<u64> = s.grad.iter().map(|x| x.to_bits()).collect();
        let pb: Vec<u64> = p.grad.iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(sb, pb);
        prop_assert_eq!(p.peak_act_units, k as u64 * s.peak_act_units);
        prop_assert_eq!(s.peak_act_units, single.peak_act_units);
        prop_assert_eq!(fs.total(), fp.total());
    }

    #[test]
    fn masked_updates_leave_other_coordinates(n in net(), fraction in 0.01f64..1.0, zo in any::<bool>()) {
        let (obj, mut w) = build(&n);
        let mask = sparse_mask(&w, fraction).unwrap();
        let cfg = EstimatorConfig::new(if zo { Base::Zo } else { Base::Fmad });
        let perts = cfg.perturbations(n.seed, 0, w.len());
        let g = estimate_multiple(&obj, &w, &cfg, &perts, Some(&mask), &mut fresh()).unwrap();
        let before = w.clone();
        let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::AdamW, 0.1), w.len()).unwrap();
        opt.step(&mut w, &g.grad, Some(&mask)).unwrap();
        for i in 0..w.len() {
            if !mask.contains(&i) {
                prop_assert_eq!(w[i].to_bits(), before[i].to_bits());
                prop_assert_eq!(g.grad[i], 0.0);
            }
        }
        let mut v = vec![1.0; w.len()];
        apply_mask(&mut v, &mask);
        prop_assert_eq!(v.iter().filter(|x| **x != 0.0).count(), mask.len());
    }
}

proptest! {
    #[test]
    fn step_threshold_is_monotone(l in 0.1f64..10.0, d in 1usize..10_000, n in 1usize..100) {
        prop_assert!(max_stable_eta(l, d + 1, n) < max_stable_eta(l, d, n));
        prop_assert!(max_stable_eta(l, d, n + 1) > max_stable_eta(l, d, n));
        prop_assert!(max_stable_eta(l, d, n) < 2.0 / l);
    }

    #[test]
    fn bounds_grow_with_d_and_shrink_with_n(d in 1usize..500, n in 1usize..20, zo in any::<bool>()) {
        let method = if zo { BoundMethod::Zo } else { BoundMethod::Fmad };
        let eta = 0.25 * max_stable_eta(1.0, d + 1, n);
        let rhs = |d: usize, n: usize| {
            theorem_bound(method, BoundInputs { l: 1.0, eta, d, n, t: 100, f_first: 3.0, f_last: 1.0, epsilon: 1e-3 })
                .unwrap()
                .rhs
        };
        prop_assert!(rhs(d + 1, n) > rhs(d, n));
        prop_assert!(rhs(d, n + 1) < rhs(d, n));
    }

    #[test]
    fn optimizer_steps_are_pure(g in prop::collection::vec(-5.0f64..5.0, 1..16), kind in 0usize..3) {
        let kind = [OptimizerKind::Sgd, OptimizerKind::Nesterov, OptimizerKind::AdamW][kind];
        let run = || {
            let mut w = vec![0.5; g.len()];
            let mut opt = Optimizer::new(OptimizerConfig::new(kind, 0.01), g.len()).unwrap();
            for _ in 0..3 {
                opt.step(&mut w, &g, None).unwrap();
            }
            w.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn perturbations_are_reproducible(seed in any::<u64>(), d in 1usize..100, s2 in 0.01f64..4.0) {
        let a = Perturbation::new(seed, d).with_sigma2(s2).regenerate();
        let b = Perturbation::new(seed, d).with_sigma2(s2).regenerate();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn vanilla_peak_is_linear_and_checkpointed_is_sqrt() {
    for depth in [16usize, 64, 256] {
        let spec: Vec<String> = (0..depth).map(|_| "linear:8:8:nobias".to_string()).collect();
        let model = Model::parse(&spec.join(",")).unwrap();
        let x = Tensor::new(vec![1, 8], vec![0.1; 8]).unwrap();
        let y = Tensor::new(vec![1, 8], vec![0.0; 8]).unwrap();
        let batch = Batch::new(x, Target::Dense(y)).unwrap();
        let w = init_params(&model, 1, InitScheme::ScaledUniform).into_vec();
        let plan = CheckpointPlan::default_for(depth);
        let s = plan.segment();
        let v = backward_vanilla(&model, &w, &batch, LossSpec::Mse, &mut fresh()).unwrap();
        let c = backward_checkpointed(&model, &w, &batch, LossSpec::Mse, &plan, &mut fresh()).unwrap();
        assert_eq!(v.peak_act_units, 8 * depth as u64);
        assert_eq!(c.peak_act_units, ((depth.div_ceil(s) + s) * 8) as u64);
        assert_eq!(v.grad, c.grad);
    }
}

#[test]
fn experiments_are_deterministic() {
    let p = Problem::build(&ObjectiveSpec::Quadratic { l: 1.0, d: 20, kappa: 10.0 }, 0).unwrap();
    for method in MethodKind::ALL {
        let mut cfg = RunConfig::new(method, OptimizerConfig::sgd(0.01), 30, 9);
        cfg.estimator.accumulate_k = 3;
        cfg.estimator.n = 3;
        let a = convergence_experiment(&p, &cfg).unwrap();
        let b = convergence_experiment(&p, &cfg).unwrap();
        assert_eq!(format!("{:?}", a.records), format!("{:?}", b.records), "{method}");
        let iters: Vec<u64> = a.records.iter().map(|r| r.iter).collect();
        assert!(iters.windows(2).all(|w| w[0] < w[1]));
    }
}
