use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use subtype_core::cohort::{Cohort, EyeSeries, ValueRange};
use subtype_core::lcmm::{
    eye_class_log_density, fit, log_likelihood, log_likelihood_gradient, posterior_memberships, BasisFn, Model,
    ModelSpec, ParamLayout, Parameters,
};
use subtype_core::link::{LinkKind, LinkSpec};

fn eye(id: &str, times: &[f64], values: &[f64]) -> EyeSeries {
    EyeSeries {
        eye_id: id.into(),
        subject_id: id.into(),
        times: times.to_vec(),
        values: values.to_vec(),
        covariates: BTreeMap::new(),
    }
}

fn cohort(eyes: Vec<EyeSeries>) -> Cohort {
    Cohort::from_eyes(eyes, Default::default()).unwrap()
}

fn toy_eyes(rng: &mut ChaCha8Rng, n: usize, max_visits: usize) -> Vec<EyeSeries> {
    (0..n)
        .map(|i| {
            let k = rng.random_range(1..=max_visits);
            let mut t = 0.0;
            let mut times = Vec::new();
            let mut values = Vec::new();
            for _ in 0..k {
                times.push(t);
                values.push(rng.random_range(-2.0..2.0));
                t += rng.random_range(0.3..1.5);
            }
            eye(&format!("e{i}"), &times, &values)
        })
        .collect()
}

fn basis_matrix(basis: &[BasisFn], times: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(times.len(), basis.len(), |i, j| basis[j].eval(times[i]))
}

/// Gauss-Hermite nodes and weights for ∫ e^{-x²} f(x) dx (Golub-Welsch).
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn lower(chol_b: &[f64], q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(q, q, |i, j| if j <= i { chol_b[i * q + j] } else { 0.0 })
}

/// Marginal density by integrating the conditional normal over the random
/// effects with a tensor Gauss-Hermite rule.
fn quadrature_log_density(
    y: &[f64],
    mu: &DVector<f64>,
    z: &DMatrix<f64>,
    l: &DMatrix<f64>,
    sigma: f64,
    degree: usize,
) -> f64 {
    let (nodes, weights) = gauss_hermite(degree);
    let q = z.ncols();
    let n = y.len();
    let mut total = 0.0;
    let mut idx = vec![0usize; q];
    loop {
        let x = DVector::from_iterator(q, idx.iter().map(|&k| nodes[k]));
        let w: f64 = idx.iter().map(|&k| weights[k]).product();
        let b = l * x * 2f64.sqrt();
        let mean = mu + z * b;
        let ss: f64 = (0..n).map(|i| (y[i] - mean[i]).powi(2)).sum();
        let cond =
            (-0.5 * ss / (sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).powf(n as f64 / 2.0);
        total += w * cond;
        let mut d = 0;
        loop {
            if d == q {
                return (total / std::f64::consts::PI.powf(q as f64 / 2.0)).ln();
            }
            idx[d] += 1;
            if idx[d] < degree {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// Closed-form multivariate normal log-density.
fn mvn_log_density(y: &DVector<f64>, mu: &DVector<f64>, v: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let chol = v.clone().cholesky().unwrap();
    let r = y - mu;
    let sol = chol.solve(&r);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&sol))
}

fn class_mean(spec: &ModelSpec, p: &Parameters, g: usize, times: &[f64]) -> DVector<f64> {
    let x2 = basis_matrix(&spec.class_fixed_basis, times);
    let x1 = basis_matrix(&spec.common_fixed_basis, times);
    let mut mu = x2 * DVector::from_vec(p.class_effects[g].clone());
    if !spec.common_fixed_basis.is_empty() {
        mu += x1 * DVector::from_vec(p.beta.clone());
    }
    mu
}

fn oracle_log_density(spec: &ModelSpec, p: &Parameters, g: usize, e: &EyeSeries) -> f64 {
    let z = basis_matrix(&spec.random_basis, &e.times);
    let q = spec.random_basis.len();
    let l = lower(&p.chol_b, q);
    let v = &z * &l * l.transpose() * z.transpose() + DMatrix::identity(e.times.len(), e.times.len()) * p.sigma.powi(2);
    mvn_log_density(
        &DVector::from_vec(e.values.clone()),
        &class_mean(spec, p, g, &e.times),
        &v,
    )
}

fn random_parameters(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> Parameters {
    let layout = ParamLayout::new(spec);
    let x: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-0.8..0.8)).collect();
    let mut p = layout.unpack(&x);
    p.normalize_cholesky();
    p
}

fn spec_with(random: Vec<BasisFn>, g: usize) -> ModelSpec {
    ModelSpec {
        random_basis: random,
        ..ModelSpec::with_classes(g)
    }
}

#[test]
fn standard_normal_single_visit() {
    let spec = spec_with(vec![], 1);
    let mut p = random_parameters(&mut ChaCha8Rng::seed_from_u64(0), &spec);
    p.class_effects[0] = vec![0.0, 0.0];
    p.sigma = 1.0;
    let d = eye_class_log_density(&eye("a", &[0.0], &[0.0]), 0, &p, &spec, None).unwrap();
    assert!((d - (-0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
    assert!((d + 0.91894).abs() < 1e-5);
}

#[test]
fn random_intercept_two_visits_closed_form() {
    let spec = spec_with(vec![BasisFn::Intercept], 1);
    let mut p = random_parameters(&mut ChaCha8Rng::seed_from_u64(0), &spec);
    p.class_effects[0] = vec![0.0, 0.0];
    p.chol_b = vec![1.0];
    p.sigma = 1.0;
    let d = eye_class_log_density(&eye("a", &[0.0, 1.0], &[0.0, 0.0]), 0, &p, &spec, None).unwrap();
    let expected = -(2.0 * std::f64::consts::PI).ln() - 0.5 * 3f64.ln();
    assert!((d - expected).abs() < 1e-12);
    assert!((d + 2.3871).abs() < 1e-4);
}

#[test]
fn density_matches_gauss_hermite_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for random in [vec![BasisFn::Intercept], vec![BasisFn::Intercept, BasisFn::Time]] {
        let spec = spec_with(random, 2);
        for e in toy_eyes(&mut rng, 10, 3) {
            let mut p = random_parameters(&mut rng, &spec);
            p.sigma = rng.random_range(0.4..1.2);
            for g in 0..2 {
                let got = eye_class_log_density(&e, g, &p, &spec, None).unwrap();
                let z = basis_matrix(&spec.random_basis, &e.times);
                let l = lower(&p.chol_b, spec.random_basis.len());
                let quad = quadrature_log_density(&e.values, &class_mean(&spec, &p, g, &e.times), &z, &l, p.sigma, 40);
                let rel = ((got - quad).exp() - 1.0).abs();
                assert!(rel < 1e-6, "eye {} class {g}: {got} vs {quad}", e.eye_id);
            }
        }
    }
}

#[test]
fn beta_one_one_link_reduces_to_identity_on_rescaled_values() {
    let spec_beta = ModelSpec {
        link: LinkKind::Beta,
        ..ModelSpec::with_classes(1)
    };
    let spec_id = ModelSpec::with_classes(1);
    let range = ValueRange::new(0.0, 1.0).unwrap();
    let e = eye("a", &[0.0, 0.5, 1.2], &[0.1, 0.45, 0.9]);
    let mut p = random_parameters(&mut ChaCha8Rng::seed_from_u64(3), &spec_beta);
    p.link = Some(subtype_core::lcmm::BetaShape {
        shape_a: 1.0,
        shape_b: 1.0,
        offset: 0.0,
        scale: 1.0,
    });
    p.sigma = 1.0;
    p.class_effects[0][0] = 0.0;
    let beta = eye_class_log_density(&e, 0, &p, &spec_beta, Some(range)).unwrap();
    let link = p.link_spec(Some(range)).unwrap();
    let rescaled: Vec<f64> = e.values.iter().map(|&y| link.transform(y).unwrap()).collect();
    let log_jac: f64 = e.values.iter().map(|&y| link.log_jacobian(y).unwrap()).sum();
    let mut p_id = p.clone();
    p_id.link = None;
    let id = eye_class_log_density(&eye("a", &e.times, &rescaled), 0, &p_id, &spec_id, None).unwrap();
    assert!((beta - (id + log_jac)).abs() < 1e-9);
    // The Jacobian itself is the constant guard rescaling.
    let w = 1.0 + 2.0 * subtype_core::link::RESCALE_GUARD;
    assert!((log_jac + 3.0 * w.ln()).abs() < 1e-12);
}

#[test]
fn mixture_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eyes = toy_eyes(&mut rng, 3, 4);
    let c = cohort(eyes.clone());
    let spec = ModelSpec::with_classes(2);
    let p = random_parameters(&mut rng, &spec);
    let pi = p.proportions();
    let dens: Vec<Vec<f64>> = eyes
        .iter()
        .map(|e| (0..2).map(|g| oracle_log_density(&spec, &p, g, e).exp()).collect())
        .collect();
    let mut total = 0.0;
    for assign in 0..8u32 {
        let mut term = 1.0;
        for (i, d) in dens.iter().enumerate() {
            let g = ((assign >> i) & 1) as usize;
            term *= pi[g] * d[g];
        }
        total += term;
    }
    let ll = log_likelihood(&c, &p, &spec).unwrap();
    assert!((ll - total.ln()).abs() < 1e-10, "{ll} vs {}", total.ln());
}

#[test]
fn single_class_equals_linear_mixed_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eyes = toy_eyes(&mut rng, 8, 5);
    let c = cohort(eyes.clone());
    let spec = ModelSpec::with_classes(1);
    let p = random_parameters(&mut rng, &spec);
    let oracle: f64 = eyes.iter().map(|e| oracle_log_density(&spec, &p, 0, e)).sum();
    assert!((log_likelihood(&c, &p, &spec).unwrap() - oracle).abs() < 1e-10);
}

#[test]
fn duplicating_every_eye_doubles_the_log_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eyes = toy_eyes(&mut rng, 6, 4);
    let mut doubled = eyes.clone();
    doubled.extend(eyes.iter().map(|e| EyeSeries {
        eye_id: format!("{}-copy", e.eye_id),
        ..e.clone()
    }));
    let spec = ModelSpec::with_classes(3);
    let p = random_parameters(&mut rng, &spec);
    let a = log_likelihood(&cohort(eyes), &p, &spec).unwrap();
    let b = log_likelihood(&cohort(doubled), &p, &spec).unwrap();
    assert!((b - 2.0 * a).abs() < 1e-10 * b.abs());
}

fn gradient_check(spec: &ModelSpec, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eyes = toy_eyes(&mut rng, 30, 6);
    let c = cohort(eyes);
    let model = Model::new(&c, spec, None).unwrap();
    let layout = ParamLayout::new(spec);
    for _ in 0..10 {
        let x: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-0.8..0.8)).collect();
        let (_, grad) = model.gradient_at(&x).unwrap();
        for k in 0..x.len() {
            let h = 1e-5 * x[k].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (model.log_likelihood_at(&xp).unwrap() - model.log_likelihood_at(&xm).unwrap()) / (2.0 * h);
            let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1.0);
            assert!(rel < 1e-5, "{}: analytic {} vs fd {fd}", layout.names()[k], grad[k]);
        }
    }
}

#[test]
fn gradient_matches_finite_differences_identity_link() {
    gradient_check(&ModelSpec::with_classes(3), 21);
}

#[test]
fn gradient_matches_finite_differences_beta_link() {
    let spec = ModelSpec {
        link: LinkKind::Beta,
        ..ModelSpec::with_classes(2)
    };
    gradient_check(&spec, 22);
}

#[test]
fn permuting_classes_permutes_gradient_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = cohort(toy_eyes(&mut rng, 12, 5));
    let spec = ModelSpec::with_classes(3);
    let p = random_parameters(&mut rng, &spec);
    let order = [1, 2, 0];
    let q = p.permute_classes(&order);
    let layout = ParamLayout::new(&spec);
    let slots = layout.slots();
    let gp = log_likelihood_gradient(&c, &p, &spec).unwrap();
    let gq = log_likelihood_gradient(&c, &q, &spec).unwrap();
    assert!((log_likelihood(&c, &p, &spec).unwrap() - log_likelihood(&c, &q, &spec).unwrap()).abs() < 1e-10);
    for (pos, slot) in slots.iter().enumerate() {
        if let subtype_core::lcmm::Slot::Class(g, k) = *slot {
            let src = slots
                .iter()
                .position(|s| *s == subtype_core::lcmm::Slot::Class(order[g], k))
                .unwrap();
            assert!((gq[pos] - gp[src]).abs() < 1e-9 * gp[src].abs().max(1.0));
        }
    }
}

#[test]
fn no_random_effects_single_class_matches_pooled_ols() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let eyes: Vec<EyeSeries> = (0..40)
        .map(|i| {
            let times: Vec<f64> = (0..6).map(|k| k as f64 * 0.5 + rng.random_range(0.0..0.1)).collect();
            let values: Vec<f64> = times
                .iter()
                .map(|t| 0.3 - 0.2 * t + rng.random_range(-0.5..0.5))
                .collect();
            eye(&format!("e{i}"), &times, &values)
        })
        .collect();
    let c = cohort(eyes.clone());
    let mut spec = spec_with(vec![], 1);
    spec.optimizer.n_starts = 2;
    let f = fit(&c, &spec).unwrap();

    let times: Vec<f64> = eyes.iter().flat_map(|e| e.times.clone()).collect();
    let y = DVector::from_iterator(times.len(), eyes.iter().flat_map(|e| e.values.clone()));
    let x = DMatrix::from_fn(times.len(), 2, |i, j| if j == 0 { 1.0 } else { times[i] });
    let qr = x.clone().qr();
    let coef = qr.r().solve_upper_triangular(&(qr.q().transpose() * &y)).unwrap();
    let rss = (&y - &x * &coef).norm_squared();
    assert!((f.params.class_effects[0][0] - coef[0]).abs() < 1e-6);
    assert!((f.params.class_effects[0][1] - coef[1]).abs() < 1e-6);
    assert!((f.params.sigma - (rss / times.len() as f64).sqrt()).abs() < 1e-6);
}

#[test]
fn noise_free_line_is_reproduced() {
    let eyes: Vec<EyeSeries> = (0..10)
        .map(|i| {
            let times: Vec<f64> = (0..6).map(|k| k as f64 * (0.5 + 0.01 * i as f64)).collect();
            let values: Vec<f64> = times.iter().map(|t| 1.0 - 0.2 * t).collect();
            eye(&format!("e{i}"), &times, &values)
        })
        .collect();
    let c = cohort(eyes);
    let mut spec = spec_with(vec![], 1);
    spec.optimizer.n_starts = 1;
    let f = fit(&c, &spec).unwrap();
    assert!((f.params.class_effects[0][0] - 1.0).abs() < 1e-9);
    assert!((f.params.class_effects[0][1] + 0.2).abs() < 1e-9);
    assert!(f.params.sigma < 2.0 * subtype_core::lcmm::SIGMA_FLOOR);
    let summary = subtype_core::lcmm::class_trajectory_summary(&c, &f, 5).unwrap();
    assert!((summary.classes[0].slope.value + 0.2).abs() < 1e-9);
}

#[test]
fn posteriors_are_trivial_for_one_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let c = cohort(toy_eyes(&mut rng, 15, 6));
    let mut spec = ModelSpec::with_classes(1);
    spec.optimizer.n_starts = 1;
    let f = fit(&c, &spec).unwrap();
    let m = posterior_memberships(&c, &f).unwrap();
    assert!(m.tau.iter().all(|row| row == &vec![1.0]));
    assert!(f.convergence.gradient_norm < 1e-5);
}

#[test]
fn fit_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = cohort(toy_eyes(&mut rng, 40, 6));
    let mut spec = ModelSpec::with_classes(2);
    spec.optimizer.n_starts = 3;
    let a = fingerprint(&fit(&c, &spec).unwrap());
    let b = fingerprint(&fit(&c, &spec).unwrap());
    assert_eq!(a, b);
}

fn fingerprint(f: &subtype_core::lcmm::FitResult) -> String {
    format!("{f:?}")
}

#[test]
fn too_many_classes_is_a_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let c = cohort(toy_eyes(&mut rng, 2, 3));
    assert!(fit(&c, &ModelSpec::with_classes(3)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn posterior_rows_are_simplices_and_mixture_dominates(seed in 0u64..10_000, g in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cohort(toy_eyes(&mut rng, 8, 5));
        let spec = ModelSpec::with_classes(g);
        let p = random_parameters(&mut rng, &spec);
        let model = Model::new(&c, &spec, None).unwrap();
        let tau = model.posteriors(&p).unwrap();
        for row in &tau {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(row.iter().all(|&t| (0.0..=1.0).contains(&t)));
        }
        let per_eye = model.eye_log_likelihoods(&p).unwrap();
        let dens = model.class_log_densities(&p).unwrap();
        let weights = model.class_log_weights(&p);
        for i in 0..c.len() {
            for k in 0..g {
                prop_assert!(per_eye[i] >= dens[i][k] + weights[i][k] - 1e-12);
            }
        }
    }

    #[test]
    fn log_likelihood_is_permutation_invariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cohort(toy_eyes(&mut rng, 6, 4));
        let spec = ModelSpec::with_classes(3);
        let p = random_parameters(&mut rng, &spec);
        let a = log_likelihood(&c, &p, &spec).unwrap();
        let b = log_likelihood(&c, &p.permute_classes(&[2, 0, 1]), &spec).unwrap();
        prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn identity_link_transform_is_exact(y in -50.0f64..50.0) {
        prop_assert_eq!(LinkSpec::Identity.transform(y).unwrap(), y);
    }
}
