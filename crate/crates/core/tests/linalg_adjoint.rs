use collogp::linalg::{cholesky, cholesky_backward, JitterPolicy, LowerTriangular, Matrix};
use collogp::rng::SeedStream;
use proptest::prelude::*;
use rand::Rng;

fn random_spd(n: usize, rng: &mut impl Rng) -> Matrix {
    let b = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut s = b.matmul(&b.transpose()).unwrap();
    s.add_diagonal(0.5);
    s
}

fn factor(s: &Matrix) -> LowerTriangular {
    let policy = JitterPolicy {
        max_tries: 0,
        ..JitterPolicy::default()
    };
    cholesky(s, &policy).unwrap().0
}

// objective ⟨W, chol(S)⟩ for a fixed lower-triangular weight W
fn objective(s: &Matrix, w: &Matrix) -> f64 {
    factor(s).as_matrix().inner(w)
}

#[test]
fn adjoint_matches_central_differences() {
    let mut rng = SeedStream::new(3).rng("chol-backward");
    let h = 1e-6;
    for n in [1, 2, 4, 7] {
        let s = random_spd(n, &mut rng);
        let w = Matrix::from_fn(n, n, |i, j| if j <= i { rng.random_range(-1.0..1.0) } else { 0.0 });
        let l = factor(&s);
        let adj = cholesky_backward(&l, &LowerTriangular::from_lower_part(w.clone()).unwrap()).unwrap();
        for i in 0..n {
            for j in 0..=i {
                // symmetric perturbation of entries (i, j) and (j, i)
                let bump = |d: f64| {
                    let mut t = s.clone();
                    t.row_mut(i)[j] += d;
                    if i != j {
                        t.row_mut(j)[i] += d;
                    }
                    objective(&t, &w)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let analytic = if i == j { adj.row(i)[i] } else { 2.0 * adj.row(i)[j] };
                let err = (fd - analytic).abs() / fd.abs().max(1.0);
                assert!(err < 1e-5, "n={n} ({i},{j}): fd {fd} vs {analytic}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn factor_reconstructs(seed in any::<u64>(), n in 1usize..9) {
        let mut rng = SeedStream::new(seed).rng("spd");
        let s = random_spd(n, &mut rng);
        let l = factor(&s);
        let r = l.reconstruct();
        let err = r.sub(&s).unwrap().max_abs();
        prop_assert!(err < 1e-10 * s.max_abs());
    }

    #[test]
    fn adjoint_is_symmetric(seed in any::<u64>(), n in 1usize..9) {
        let mut rng = SeedStream::new(seed).rng("adj");
        let s = random_spd(n, &mut rng);
        let w = Matrix::from_fn(n, n, |i, j| if j <= i { rng.random_range(-1.0..1.0) } else { 0.0 });
        let adj = cholesky_backward(&factor(&s), &LowerTriangular::from_lower_part(w).unwrap()).unwrap();
        prop_assert_eq!(adj.asymmetry(), 0.0);
    }
}
