use std::f64::consts::PI;

use bmfal::cost::Cost;
use bmfal::simulators::{
    interpolate, solve_poisson, HeatParams, HeatSolver, MeshSpec, OracleSpec, PoissonSolver,
    Problem,
};
use bmfal::Fidelity;
use proptest::prelude::*;

fn mode(s1: f64, s2: f64) -> f64 {
    (PI * s1).sin() * (PI * s2).sin()
}

fn max_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn poisson_error(n: usize) -> f64 {
    let mesh = MeshSpec::new(n).unwrap();
    let source = mesh.sample(|s1, s2| 2.0 * PI * PI * mode(s1, s2));
    let u = PoissonSolver::new(mesh).unwrap().solve(&source).unwrap();
    max_error(&u, &mesh.sample(mode))
}

fn heat_error(n: usize, dt: f64) -> f64 {
    let mesh = MeshSpec::new(n).unwrap();
    let params = HeatParams {
        alpha: 0.01,
        dt,
        t_final: 1.0,
    };
    let u = HeatSolver::new(mesh, params)
        .unwrap()
        .solve(&mesh.sample(mode))
        .unwrap();
    let decay = (-2.0 * PI * PI * params.alpha * params.t_final).exp();
    let exact = mesh.sample(|s1, s2| decay * mode(s1, s2));
    max_error(&u, &exact) / decay
}

#[test]
fn poisson_converges_at_second_order() {
    let errs: Vec<f64> = [17, 33, 65].iter().map(|&n| poisson_error(n)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!(
            (3.5..=4.5).contains(&ratio),
            "error ratio {ratio} ({errs:?})"
        );
    }
}

#[test]
fn heat_eigenmode_decays_at_the_exact_rate() {
    let rel = heat_error(33, 1e-2);
    assert!(rel < 0.02, "relative error {rel}");
    assert!(heat_error(65, 5e-3) < rel);
}

#[test]
fn poisson_field_is_positive_inside_and_zero_on_the_boundary() {
    let mesh = MeshSpec::new(17).unwrap();
    let u = solve_poisson(&[0.3, 0.6], mesh).unwrap();
    for j in 0..17 {
        for i in 0..17 {
            let v = u[mesh.index(i, j)];
            if mesh.is_boundary(i, j) {
                assert_eq!(v, 0.0);
            } else {
                assert!(v > 0.0);
            }
        }
    }
}

#[test]
fn ladder_costs_and_shapes() {
    for problem in [Problem::Poisson, Problem::Heat, Problem::Synthetic] {
        let oracle = OracleSpec::new(problem, 2).build().unwrap();
        let ladder = oracle.ladder();
        assert_eq!(ladder.lambdas, vec![Cost::integer(1), Cost::integer(3)]);
        assert_eq!(ladder.output_dims(), vec![17 * 17, 33 * 33]);
        let x = [0.5, 0.5];
        let total: Cost = (0..2)
            .map(|m| oracle.query(&x, Fidelity::from_index(m)).unwrap().1)
            .sum();
        assert_eq!(total, Cost::integer(4));
    }
}

#[test]
fn reference_agrees_with_interpolated_top_fidelity() {
    for problem in [Problem::Poisson, Problem::Heat] {
        let oracle = OracleSpec::new(problem, 3).build().unwrap();
        let x = [0.45, 0.55];
        let top = oracle.field(&x, Fidelity::level(3)).unwrap();
        // top mesh and evaluation mesh coincide in the three-level ladder
        let eval = oracle.ladder().eval_mesh;
        let up = interpolate(&top, oracle.ladder().top_mesh(), eval).unwrap();
        assert!(max_error(&up, &oracle.reference(&x).unwrap()) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn poisson_solution_is_linear_in_the_source(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mesh = MeshSpec::new(17).unwrap();
        let solver = PoissonSolver::new(mesh).unwrap();
        let f = mesh.sample(|s1, s2| s1 * s2);
        let g = mesh.sample(|s1, s2| (3.0 * s1).cos() + s2);
        let mix: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let uf = solver.solve(&f).unwrap();
        let ug = solver.solve(&g).unwrap();
        let um = solver.solve(&mix).unwrap();
        for k in 0..um.len() {
            prop_assert!((um[k] - a * uf[k] - b * ug[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn heat_never_amplifies(x1 in 0.1f64..0.9, x2 in 0.1f64..0.9) {
        let oracle = OracleSpec::new(Problem::Heat, 2).build().unwrap();
        let mesh = oracle.ladder().meshes[0];
        let u = oracle.field(&[x1, x2], Fidelity::level(1)).unwrap();
        let start = mesh.sample(bmfal::simulators::bump(&[x1, x2], 1.0));
        let peak = start.iter().cloned().fold(0.0, f64::max);
        prop_assert!(u.iter().all(|&v| v >= -1e-12 && v <= peak + 1e-12));
    }
}
