//! Linear-residual problems have Gaussian posteriors, so the variational
//! answers can be checked against dense Gaussian conditioning.

use collogp::baseline::{evidence, gpr_predict, GprModel};
use collogp::equation::preset;
use collogp::infer::{draw_eps, elbo_with_eps, train, Problem, TrainConfig, VariationalState};
use collogp::kernel::{DerivOp, PointSet};
use collogp::linalg::{JitterPolicy, LowerTriangular, Matrix};
use collogp::model::{log_joint, BlockId, LatentVector, ModelParams};
use collogp::predict::rmse;
use collogp::rng::SeedStream;
use nalgebra::{DMatrix, DVector};

fn dm(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Observation operator `G` and targets for `[y; 0]` under the residual
/// `dt(u) + b·u − c − g`, written as `G f = obs`.
fn linear_system(problem: &Problem, params: &ModelParams) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let layout = problem.layout();
    let spec = problem.spec().unwrap();
    let (n, m, p) = (layout.n_train(), layout.m_colloc(), layout.total());
    let coeffs = params.coeff_map(spec);
    let (b, c) = (coeffs["b"], coeffs["c"]);
    let val = layout.range(BlockId::Feature(layout.feature_index(&DerivOp::value(1)).unwrap()));
    let dt = layout.range(BlockId::Feature(layout.feature_index(&DerivOp::new(vec![1]).unwrap()).unwrap()));
    let g = layout.range(BlockId::Source(0));
    let mut gm = DMatrix::zeros(n + m, p);
    let mut obs = DVector::zeros(n + m);
    let mut noise = DVector::zeros(n + m);
    for i in 0..n {
        gm[(i, i)] = 1.0;
        obs[i] = problem.train_targets()[i];
        noise[i] = 1.0 / params.beta();
    }
    for j in 0..m {
        gm[(n + j, dt.start + j)] = 1.0;
        gm[(n + j, val.start + j)] = b;
        gm[(n + j, g.start + j)] = -1.0;
        obs[n + j] = c;
        noise[n + j] = params.v();
    }
    (gm, obs, noise)
}

struct Exact {
    /// posterior of f
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    log_evidence: f64,
}

fn condition(sigma: &DMatrix<f64>, gm: &DMatrix<f64>, obs: &DVector<f64>, noise: &DVector<f64>) -> Exact {
    let s = gm * sigma * gm.transpose() + DMatrix::from_diagonal(noise);
    let chol = s.clone().cholesky().unwrap();
    let alpha = chol.solve(obs);
    let k = sigma * gm.transpose();
    let mean = &k * &alpha;
    let cov = sigma - &k * chol.solve(&k.transpose());
    let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let q = obs.len() as f64;
    let log_evidence = -0.5 * obs.dot(&alpha) - 0.5 * logdet - 0.5 * q * (2.0 * std::f64::consts::PI).ln();
    Exact { mean, cov, log_evidence }
}

fn toy(n: usize, m: usize, seed: u64) -> Problem {
    let mut rng = SeedStream::new(seed).rng("toy");
    use rand::Rng;
    let mut tx: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
    tx.sort_by(f64::total_cmp);
    let y: Vec<f64> = tx.iter().map(|t| (1.3 * t).sin() + 0.5).collect();
    let cx: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..4.0)).collect();
    Problem::new(
        Some(preset("first_order_latent_force").unwrap()),
        PointSet::from_scalars(&tx),
        y,
        PointSet::from_scalars(&cx),
    )
    .unwrap()
}

fn frozen(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        mc_samples: 20,
        learn_v: false,
        learn_beta: false,
        learn_kernel: false,
        learn_coeffs: false,
        ..TrainConfig::default()
    }
}

#[test]
fn trained_mean_matches_gaussian_conditioning() {
    let problem = toy(10, 5, 1);
    let params = problem.initial_params();
    let trace = train(&problem, None, &frozen(4000), None).unwrap();
    let a = problem.prepare(&params, &JitterPolicy::default()).unwrap().factor().clone();
    let sigma = dm(&a.reconstruct());
    let (gm, obs, noise) = linear_system(&problem, &params);
    let exact = condition(&sigma, &gm, &obs, &noise);

    let queries = PointSet::from_scalars(&(0..41).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
    let got = trace.last.predict_mean_u(&queries, &DerivOp::value(1)).unwrap();
    // u(z*) has mean cov(u*, f) Σ⁻¹ m_f
    let post = problem
        .posterior(&params, a, VariationalState::prior(problem.layout().total()))
        .unwrap();
    let w = sigma.clone().cholesky().unwrap().solve(&exact.mean);
    let want = post.predict_mean_u(&queries, &DerivOp::value(1)).unwrap();
    assert!(want.iter().all(|v| *v == 0.0));
    let rows = cross_u(&problem, &params, &queries);
    let want: Vec<f64> = (rows * w).iter().copied().collect();
    let err = rmse(&got, &want).unwrap();
    assert!(err < 1e-2, "rmse vs conditioning {err}");
}

fn cross_u(problem: &Problem, params: &ModelParams, queries: &PointSet) -> DMatrix<f64> {
    use collogp::kernel::{cross_cov_matrix, CovBlock};
    use collogp::model::u_blocks;
    let rows = [CovBlock {
        op: DerivOp::value(1),
        points: queries.clone(),
    }];
    let cols = u_blocks(problem.layout(), problem.train_inputs(), problem.colloc_inputs());
    let c = cross_cov_matrix(&rows, &cols, &params.kernel_u).unwrap();
    let mut out = DMatrix::zeros(queries.len(), problem.layout().total());
    for i in 0..c.rows() {
        for j in 0..c.cols() {
            out[(i, j)] = c.row(i)[j];
        }
    }
    out
}

#[test]
fn without_collocation_training_matches_exact_regression() {
    let full = toy(10, 5, 2);
    let problem = Problem::new(None, full.train_inputs().clone(), full.train_targets().to_vec(), PointSet::empty(1)).unwrap();
    let params = problem.initial_params();
    let trace = train(&problem, None, &frozen(4000), None).unwrap();
    let gpr = GprModel::new(
        params.kernel_u.clone(),
        params.log_beta,
        problem.train_inputs().clone(),
        problem.train_targets().to_vec(),
    )
    .unwrap();
    let queries = PointSet::from_scalars(&(0..41).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
    let got = trace.last.predict_mean_u(&queries, &DerivOp::value(1)).unwrap();
    let want = gpr_predict(&gpr, &queries).unwrap().mean;
    let err = rmse(&got, &want).unwrap();
    assert!(err < 1e-2, "rmse vs exact regression {err}");
}

/// Whitened optimum `q*(η)`: `μ = A⁻¹ m`, `LLᵀ = A⁻¹ C A⁻ᵀ`.
fn whitened_optimum(a: &LowerTriangular, exact: &Exact) -> VariationalState {
    let ad = dm(a.as_matrix());
    let p = ad.nrows();
    let mu = ad.clone().solve_lower_triangular(&exact.mean).unwrap();
    let ainv = ad.solve_lower_triangular(&DMatrix::identity(p, p)).unwrap();
    let s = &ainv * &exact.cov * ainv.transpose();
    let s = (&s + s.transpose()) * 0.5;
    let l = s.cholesky().unwrap().l();
    let chol = Matrix::from_fn(p, p, |i, j| l[(i, j)]);
    VariationalState::new(mu.iter().copied().collect(), LowerTriangular::new(chol).unwrap()).unwrap()
}

#[test]
fn elbo_at_the_exact_posterior_equals_the_evidence() {
    let problem = toy(3, 2, 3);
    let params = problem.initial_params();
    let prepared = problem.prepare(&params, &JitterPolicy::default()).unwrap();
    let a = prepared.factor().clone();
    let sigma = dm(&a.reconstruct());
    let (gm, obs, noise) = linear_system(&problem, &params);
    let exact = condition(&sigma, &gm, &obs, &noise);
    let state = whitened_optimum(&a, &exact);

    let s = 100_000;
    let mut rng = SeedStream::new(4).rng("elbo");
    let eps = draw_eps(&mut rng, problem.layout().total(), s);
    let total = elbo_with_eps(&problem, &prepared, &state, &params, &eps, false).unwrap().0;
    // per-draw values give the Monte Carlo standard error
    let singles: Vec<f64> = eps
        .chunks(1)
        .map(|e| elbo_with_eps(&problem, &prepared, &state, &params, e, false).unwrap().0)
        .collect();
    let mean = singles.iter().sum::<f64>() / s as f64;
    let var = singles.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
    let se = (var / s as f64).sqrt();
    assert!((total - mean).abs() < 1e-9 * mean.abs().max(1.0));
    assert!(
        (total - exact.log_evidence).abs() < 2.0 * se,
        "elbo {total} vs evidence {} (se {se})",
        exact.log_evidence
    );
}

#[test]
fn log_joint_without_collocation_recovers_the_evidence() {
    let full = toy(6, 1, 5);
    let problem = Problem::new(None, full.train_inputs().clone(), full.train_targets().to_vec(), PointSet::empty(1)).unwrap();
    let params = problem.initial_params();
    let a = problem.prepare(&params, &JitterPolicy::default()).unwrap().factor().clone();
    let gpr = GprModel::new(
        params.kernel_u.clone(),
        params.log_beta,
        problem.train_inputs().clone(),
        problem.train_targets().to_vec(),
    )
    .unwrap();
    let ev = evidence(&gpr).unwrap();
    // log p(y) = log p(y, f) − log p(f | y) at any f
    let sigma = dm(&a.reconstruct());
    let n = problem.layout().n_train();
    let noise = DVector::from_element(n, 1.0 / params.beta());
    let y = DVector::from_column_slice(problem.train_targets());
    let exact = condition(&sigma, &DMatrix::identity(n, n), &y, &noise);
    let post_chol = exact.cov.clone().cholesky().unwrap();
    for shift in [0.0, 0.3, -1.0] {
        let f: Vec<f64> = exact.mean.iter().map(|m| m + shift).collect();
        let lj = log_joint(LatentVector::new(problem.layout(), &f).unwrap(), problem.train_targets(), None, &params, &a).unwrap();
        let d = DVector::from_column_slice(&f) - &exact.mean;
        let quad = d.dot(&post_chol.solve(&d));
        let logdet: f64 = post_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let log_post = -0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        assert!((lj - log_post - ev).abs() < 1e-6 * ev.abs().max(1.0), "{} vs {ev}", lj - log_post);
    }
}
