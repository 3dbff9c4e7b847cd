use fisherflow::fr_gaussian::ExpectationMode;
use fisherflow::fr_mixture::{integrate_mixture_flow, MixtureFlowState};
use fisherflow::gaussian::{GaussianParams, Matrix, MixtureParams, Vector};
use fisherflow::integrator::OdeConfig;
use fisherflow::quadrature::gh_rule_nd;
use fisherflow::targets::{FunnelModel, LogisticRegressionModel, RangeModel, TargetModel, generate_logreg_dataset};
use nalgebra::{dmatrix, dvector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn range_model() -> RangeModel {
    RangeModel::new(dvector![1.0, 1.0], dmatrix![5.5, -1.5; -1.5, 5.5], 2.0, dvector![4.7, -3.1].norm()).unwrap()
}

#[test]
fn permuting_free_components_permutes_trajectories() {
    let m = range_model();
    let comps = vec![
        GaussianParams::new(dvector![3.0, -2.0], Matrix::identity(2, 2) * 2.0).unwrap(),
        GaussianParams::new(dvector![-1.0, 2.5], dmatrix![1.5, 0.2; 0.2, 1.0]).unwrap(),
        GaussianParams::new(dvector![4.0, 3.0], Matrix::identity(2, 2)).unwrap(),
        GaussianParams::new(dvector![0.0, -4.0], Matrix::identity(2, 2) * 3.0).unwrap(),
    ];
    let log_odds = dvector![0.3, -0.2, 0.5, 0.0];
    let perm = [2usize, 0, 1, 3];
    let permuted: Vec<_> = perm.iter().map(|&i| comps[i].clone()).collect();
    let permuted_eta = Vector::from_iterator(4, perm.iter().map(|&i| log_odds[i]));
    let rule = gh_rule_nd(5, 2).unwrap();
    let ode = OdeConfig::rk4(5e-3);
    let run = |c: Vec<GaussianParams>, eta: Vector| {
        let init = MixtureFlowState::new(&MixtureParams::new(c, eta).unwrap(), vec![rule.clone()], ExpectationMode::Stein)
            .unwrap();
        integrate_mixture_flow(&init, &m, 1.0, &ode).unwrap()
    };
    let a = run(comps, log_odds);
    let b = run(permuted, permuted_eta);
    for (j, &i) in perm.iter().enumerate() {
        let (ca, cb) = (&a.components[i], &b.components[j]);
        assert!((ca.mean() - cb.mean()).amax() < 1e-10);
        assert!((ca.params.prec() - cb.params.prec()).amax() < 1e-10);
        assert!((ca.particles.positions() - cb.particles.positions()).amax() < 1e-10);
        assert!((a.log_odds[i] - b.log_odds[j]).abs() < 1e-10);
    }
}

fn check_derivatives(model: &dyn TargetModel, points: &[Vector]) {
    let h = 1e-5;
    for x in points {
        let g = model.grad_log_joint(x).unwrap();
        let hs = model.hess_log_joint(x).unwrap();
        for k in 0..x.len() {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (model.log_joint(&up).unwrap() - model.log_joint(&dn).unwrap()) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-4 * g[k].abs().max(1.0), "grad {k}: {fd} vs {}", g[k]);
            let fdh = (model.grad_log_joint(&up).unwrap() - model.grad_log_joint(&dn).unwrap()) / (2.0 * h);
            let col = hs.column(k);
            assert!((fdh - col).amax() <= 1e-4 * col.amax().max(1.0), "hess column {k}");
        }
    }
}

fn random_points(n: usize, count: usize, scale: f64, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Vector::from_fn(n, |_, _| rng.gen_range(-scale..scale)))
        .collect()
}

#[test]
fn model_derivatives_match_finite_differences_at_random_points() {
    let range = range_model();
    let pts: Vec<_> = random_points(2, 100, 6.0, 1).into_iter().filter(|x| x.norm() > 0.1).collect();
    check_derivatives(&range, &pts);

    let funnel = FunnelModel::new(5).unwrap();
    check_derivatives(&funnel, &random_points(5, 100, 2.0, 2));

    let logreg: LogisticRegressionModel = generate_logreg_dataset(4, 200, 3).unwrap();
    check_derivatives(&logreg, &random_points(4, 100, 1.5, 4));
}
