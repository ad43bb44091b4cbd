use mfdelay_core::model::ControlProcess;
use mfdelay_core::models::{linear_toy, LinearToy};
use mfdelay_core::paths::{make_grid, sample_noise};
use mfdelay_core::pipeline::solve;
use mfdelay_core::regression::RegressionBasis;
use mfdelay_core::verification::{necessary_residual, InformationFlow};

// lambda' = -rho lambda from 1, p' = -(theta p + lambda) with p(T) = lambda(T).
fn exact_lambda(p: &LinearToy, t: f64) -> f64 {
    (-p.rho * t).exp()
}

fn exact_p(p: &LinearToy, t: f64, t_end: f64) -> f64 {
    let (th, rho) = (p.theta, p.rho);
    let tail = ((th - rho) * t_end).exp() - ((th - rho) * t).exp();
    (-th * t).exp() * (((th - rho) * t_end).exp() + tail / (th - rho))
}

#[test]
fn adjoints_match_closed_form_and_feedback_zeroes_residual() {
    let params = LinearToy::default();
    let grid = make_grid(1.0, 0.01, 0.0).unwrap();
    let model = linear_toy(&grid, params);
    let basis = RegressionBasis::default();
    let noise = sample_noise(&grid, &model.jumps, 2000, 9).unwrap();

    let probe = solve(&model, &grid, &ControlProcess::constant(&grid, 0.0), &noise, &basis).unwrap();
    let lambda = probe.adjoint.lambda_mean();
    let p = probe.adjoint.p_mean();
    for k in 0..grid.n_main() {
        let t = grid.main_time(k);
        assert!((lambda[k] - exact_lambda(&params, t)).abs() < 2e-3, "lambda at {t}");
        assert!((p[k] - exact_p(&params, t, 1.0)).abs() < 2e-2, "p at {t}: {} vs {}", p[k], exact_p(&params, t, 1.0));
    }

    // dH/du = p - lambda u vanishes at u = p_bar / lambda.
    let n = grid.n_steps();
    let mut u: Vec<f64> = (0..n).map(|k| probe.adjoint.p_cont.mean(k) / lambda[k]).collect();
    u.push(u[n - 1]);
    let pi = ControlProcess::from_main(&grid, u).unwrap();
    let sol = solve(&model, &grid, &pi, &noise, &basis).unwrap();
    let res = necessary_residual(&sol, InformationFlow::FullInfo, &basis).unwrap();
    assert!(res.sup() < 1e-8, "{}", res.sup());

    let off = solve(&model, &grid, &ControlProcess::constant(&grid, 0.0), &noise, &basis).unwrap();
    let res_off = necessary_residual(&off, InformationFlow::FullInfo, &basis).unwrap();
    assert!(res_off.sup() > 0.5);
}
