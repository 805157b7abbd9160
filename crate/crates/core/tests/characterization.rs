use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use subtype_core::characterization::{
    association_chord_table, characterize, compare_across_clusters, fast_progressor_odds, gee_fit, kaplan_meier,
    product_limit, CharacterizationError, Contrast, Family, GeeData, OddsRatioRow, WorkingCorrelation,
};
use subtype_core::cohort::{Cohort, CovariateKind, CovariateSchema, EventRecord, EyeEvent, EyeSeries};
use subtype_core::lcmm::MembershipTable;
use subtype_core::synthetic::{
    generate, ClassConfig, CovariateConfig, CovariateDistribution, GeneratorConfig, SyntheticCohort,
};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_design(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { 2.0 * normal(rng) + j as f64 })
}

fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{j}")).collect()
}

fn singletons(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn independence_gee_reproduces_ols_and_hc0() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for design in 0..5 {
        let n = 25 + 7 * design;
        let p = 2 + design % 3;
        let x = random_design(&mut rng, n, p);
        let y = DVector::from_fn(n, |i, _| {
            let het = 0.5 + x[(i, p - 1)].abs();
            1.0 + (0..p).map(|j| 0.3 * j as f64 * x[(i, j)]).sum::<f64>() + het * normal(&mut rng)
        });

        let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
        let beta = &xtx_inv * x.transpose() * &y;
        let resid = &y - &x * &beta;
        let mut meat = DMatrix::zeros(p, p);
        for i in 0..n {
            let xi = x.row(i).transpose();
            meat += &xi * xi.transpose() * resid[i].powi(2);
        }
        let hc0 = &xtx_inv * meat * &xtx_inv;

        let data = GeeData {
            outcome: "y".into(),
            predictors: names(p),
            y: y.iter().copied().collect(),
            x: x.clone(),
            clusters: singletons(n),
        };
        let fit = gee_fit(&data, Family::GaussianIdentity, WorkingCorrelation::Independence).unwrap();
        for j in 0..p {
            assert!(close(fit.coefficients[j], beta[j], 1e-8), "design {design} coef {j}");
            assert!(
                close(fit.robust_se[j], hc0[(j, j)].sqrt(), 1e-8),
                "design {design} se {j}"
            );
            for k in 0..p {
                assert!(close(fit.robust_covariance[j][k], hc0[(j, k)], 1e-8));
            }
        }
        assert_eq!((fit.n_clusters, fit.n_units), (n, n));
        assert!(fit.p_values.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

/// Logistic regression by Newton-Raphson with the HC0 sandwich.
fn logistic_oracle(x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, p) = x.shape();
    let mut beta = DVector::zeros(p);
    for _ in 0..100 {
        let mu = DVector::from_fn(n, |i, _| 1.0 / (1.0 + (-(x.row(i) * &beta)[(0, 0)]).exp()));
        let w = DMatrix::from_diagonal(&mu.map(|m| m * (1.0 - m)));
        let info = x.transpose() * w * x;
        let step = info.clone().lu().solve(&(x.transpose() * (y - &mu))).unwrap();
        beta += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    let mu = DVector::from_fn(n, |i, _| 1.0 / (1.0 + (-(x.row(i) * &beta)[(0, 0)]).exp()));
    let w = DMatrix::from_diagonal(&mu.map(|m| m * (1.0 - m)));
    let bread = (x.transpose() * w * x).try_inverse().unwrap();
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..n {
        let xi = x.row(i).transpose();
        meat += &xi * xi.transpose() * (y[i] - mu[i]).powi(2);
    }
    (beta, &bread * meat * &bread)
}

#[test]
fn independence_binomial_gee_reproduces_logistic_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for design in 0..3 {
        let n = 200;
        let p = 2 + design;
        let x = random_design(&mut rng, n, p);
        let y = DVector::from_fn(n, |i, _| {
            let eta = -0.5 + 0.4 * x[(i, 1)] - 0.3 * (x[(i, p - 1)] - p as f64 + 1.0);
            f64::from(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())))
        });
        let (beta, cov) = logistic_oracle(&x, &y);
        let data = GeeData {
            outcome: "y".into(),
            predictors: names(p),
            y: y.iter().copied().collect(),
            x,
            clusters: singletons(n),
        };
        let fit = gee_fit(&data, Family::BinomialLogit, WorkingCorrelation::Independence).unwrap();
        for j in 0..p {
            assert!(close(fit.coefficients[j], beta[j], 1e-8));
            assert!(close(fit.robust_se[j], cov[(j, j)].sqrt(), 1e-8));
        }
    }
}

/// Residual vector orthogonal to the design whose within-pair products sum to
/// zero, so the moment estimate of the exchangeable correlation is exactly 0.
fn uncorrelated_pair_residuals(rng: &mut ChaCha8Rng, x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows();
    let hat = x * (x.transpose() * x).try_inverse().unwrap() * x.transpose();
    let project = |v: DVector<f64>| &v - &hat * &v;
    let pair_sum = |u: &DVector<f64>, v: &DVector<f64>| {
        (0..n / 2)
            .map(|k| u[2 * k] * v[2 * k + 1] + u[2 * k + 1] * v[2 * k])
            .sum::<f64>()
            / 2.0
    };
    loop {
        let r1 = project(DVector::from_fn(n, |_, _| normal(rng)));
        let r2 = project(DVector::from_fn(n, |_, _| normal(rng)));
        // q(s) = pairs(r1 + s r2) = a + 2 b s + c s^2
        let (a, b, c) = (pair_sum(&r1, &r1), pair_sum(&r1, &r2), pair_sum(&r2, &r2));
        let disc = b * b - a * c;
        if disc > 0.0 && c.abs() > 1e-6 {
            let s = (-b + disc.sqrt()) / c;
            return r1 + r2 * s;
        }
    }
}

#[test]
fn exchangeable_equals_independence_when_pairs_are_uncorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 60;
    let x = random_design(&mut rng, n, 3);
    let e = uncorrelated_pair_residuals(&mut rng, &x);
    let y = &x * DVector::from_vec(vec![1.0, -0.5, 0.25]) + e;
    let data = GeeData {
        outcome: "y".into(),
        predictors: names(3),
        y: y.iter().copied().collect(),
        x,
        clusters: (0..n).map(|i| format!("s{}", i / 2)).collect(),
    };
    let ind = gee_fit(&data, Family::GaussianIdentity, WorkingCorrelation::Independence).unwrap();
    let exch = gee_fit(&data, Family::GaussianIdentity, WorkingCorrelation::Exchangeable).unwrap();
    assert!(exch.alpha.abs() < 1e-10, "alpha {}", exch.alpha);
    for j in 0..3 {
        assert!(close(ind.coefficients[j], exch.coefficients[j], 1e-8));
    }
    assert_eq!(exch.n_clusters, 30);
}

fn one_class(n_eyes: usize, seed: u64, covariates: Vec<CovariateConfig>) -> GeneratorConfig {
    GeneratorConfig {
        n_eyes,
        seed,
        classes: vec![ClassConfig {
            label: "All".into(),
            proportion: 1.0,
            intercept: 0.0,
            slope: -0.1,
            hazard: 0.02,
        }],
        covariates,
        ..GeneratorConfig::default()
    }
}

fn continuous(name: &str, rho: f64, means: Vec<f64>, sds: Vec<f64>) -> CovariateConfig {
    CovariateConfig {
        name: name.into(),
        within_subject_correlation: rho,
        distribution: CovariateDistribution::Continuous { means, sds },
    }
}

#[test]
fn exchangeable_alpha_recovers_within_subject_correlation() {
    let config = one_class(1000, 17, vec![continuous("x", 0.5, vec![10.0], vec![2.0])]);
    let synth = generate(&config).unwrap();
    assert_eq!(synth.cohort.n_subjects(), 500);
    let n = synth.cohort.len();
    let data = GeeData {
        outcome: "x".into(),
        predictors: vec!["intercept".into()],
        y: synth.cohort.eyes.iter().map(|e| e.covariate("x").unwrap()).collect(),
        x: DMatrix::from_element(n, 1, 1.0),
        clusters: synth.cohort.eyes.iter().map(|e| e.subject_id.clone()).collect(),
    };
    let fit = gee_fit(&data, Family::GaussianIdentity, WorkingCorrelation::Exchangeable).unwrap();
    assert!((fit.alpha - 0.5).abs() < 0.1, "alpha {}", fit.alpha);
    assert!((fit.coefficients[0] - 10.0).abs() < 0.3);
}

#[test]
fn constant_binary_outcome_is_a_boundary() {
    let n = 20;
    let data = GeeData {
        outcome: "y".into(),
        predictors: names(2),
        y: vec![0.0; n],
        x: DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 }),
        clusters: singletons(n),
    };
    let err = gee_fit(&data, Family::BinomialLogit, WorkingCorrelation::Exchangeable).unwrap_err();
    assert!(matches!(err, CharacterizationError::Boundary(_)), "{err:?}");
}

#[test]
fn collinear_design_lists_offending_columns() {
    let n = 20;
    let data = GeeData {
        outcome: "y".into(),
        predictors: vec!["a".into(), "b".into(), "twice_b".into()],
        y: (0..n).map(|i| i as f64).collect(),
        x: DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => (i * i) as f64,
            _ => 2.0 * (i * i) as f64,
        }),
        clusters: singletons(n),
    };
    match gee_fit(&data, Family::GaussianIdentity, WorkingCorrelation::Independence) {
        Err(CharacterizationError::RankDeficient(cols)) => assert_eq!(cols, vec!["twice_b".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn km_without_censoring_equals_empirical_survival() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let times: Vec<f64> = (0..300)
        .map(|_| (rng.random::<f64>() * 40.0).round() / 4.0 + 0.25)
        .collect();
    let records: Vec<(f64, bool)> = times.iter().map(|&t| (t, true)).collect();
    let points = product_limit(&records);
    assert_eq!(points[0].survival, 1.0);
    for p in &points {
        let empirical = times.iter().filter(|&&t| t > p.time).count() as f64 / times.len() as f64;
        assert!(
            (p.survival - empirical).abs() < 1e-12,
            "t={} {} vs {empirical}",
            p.time,
            p.survival
        );
    }
    assert!(points.windows(2).all(|w| w[1].survival <= w[0].survival));
}

fn tiny_cohort(classes: &[usize], values: &[f64]) -> (Cohort, MembershipTable) {
    let eyes: Vec<EyeSeries> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| EyeSeries {
            eye_id: format!("E{i}"),
            subject_id: format!("S{i}"),
            times: (0..5).map(f64::from).collect(),
            values: vec![0.0, -0.1, -0.2, -0.3, -0.4],
            covariates: [("v".to_string(), Some(v))].into_iter().collect(),
        })
        .collect();
    let schema = CovariateSchema {
        columns: vec![("v".into(), CovariateKind::Binary)],
    };
    let ids = eyes.iter().map(|e| e.eye_id.clone()).collect();
    let g = classes.iter().max().unwrap() + 1;
    (
        Cohort::from_eyes(eyes, schema).unwrap(),
        MembershipTable::from_labels(ids, classes, g.max(3)),
    )
}

#[test]
fn km_risk_sets_at_zero_sum_to_eyes_with_events() {
    let (cohort, table) = tiny_cohort(&[0, 0, 1, 1, 2, 2, 2], &[0.0; 7]);
    let events: Vec<EyeEvent> = cohort
        .eyes
        .iter()
        .enumerate()
        .map(|(i, e)| EyeEvent {
            eye_id: e.eye_id.clone(),
            record: EventRecord {
                event_time_years: 1.0 + i as f64,
                event: i % 2 == 0,
            },
        })
        .collect();
    let curves = kaplan_meier(&table, &events).unwrap();
    assert_eq!(curves.iter().map(|c| c.points[0].n_risk).sum::<usize>(), 7);
    assert!(curves.iter().all(|c| c.points[0].survival == 1.0));

    let mut bad = events.clone();
    bad[0].record.event_time_years = -1.0;
    assert!(kaplan_meier(&table, &bad).is_err());
    bad[0] = EyeEvent {
        eye_id: "unknown".into(),
        record: EventRecord {
            event_time_years: 1.0,
            event: true,
        },
    };
    assert!(kaplan_meier(&table, &bad).is_err());
}

#[test]
fn odds_ratio_of_complement_is_reciprocal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 400;
    let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let values: Vec<f64> = classes
        .iter()
        .map(|&c| f64::from(u8::from(rng.random::<f64>() < if c == 2 { 0.6 } else { 0.3 })))
        .collect();
    let complement: Vec<f64> = values.iter().map(|v| 1.0 - v).collect();
    let (c1, t1) = tiny_cohort(&classes, &values);
    let (c2, t2) = tiny_cohort(&classes, &complement);
    let a = fast_progressor_odds(&t1, &c1, "v").unwrap();
    let b = fast_progressor_odds(&t2, &c2, "v").unwrap();
    let (ora, orb) = (a.odds_ratio.unwrap(), b.odds_ratio.unwrap());
    assert!((ora * orb - 1.0).abs() < 1e-10, "{ora} {orb}");
    let (ca, cb) = (a.ci.unwrap(), b.ci.unwrap());
    assert!((ca.0 * cb.1 - 1.0).abs() < 1e-8 && (ca.1 * cb.0 - 1.0).abs() < 1e-8);
    assert!(ca.0 <= ora && ora <= ca.1);
    assert!((a.p_value.unwrap() - b.p_value.unwrap()).abs() < 1e-8);
}

#[test]
fn degenerate_odds_ratios_are_flagged() {
    let classes = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
    let (cohort, table) = tiny_cohort(&classes, &[0.0; 10]);
    let row = fast_progressor_odds(&table, &cohort, "v").unwrap();
    assert!(row.boundary.is_some() && row.odds_ratio.is_none());

    let values = [0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0];
    let (cohort, table) = tiny_cohort(&classes, &values);
    let row = fast_progressor_odds(&table, &cohort, "v").unwrap();
    assert!(row.boundary.unwrap().contains("empty cell"));
}

#[test]
fn single_cluster_has_no_contrast() {
    let (cohort, _) = tiny_cohort(&[0, 0, 0, 0], &[0.0, 1.0, 1.0, 0.0]);
    let ids = cohort.eyes.iter().map(|e| e.eye_id.clone()).collect();
    let table = MembershipTable::from_labels(ids, &[0, 0, 0, 0], 1);
    assert!(matches!(
        compare_across_clusters(&table, &cohort, "v"),
        Err(CharacterizationError::NoContrast(_))
    ));
}

fn true_memberships(synth: &SyntheticCohort, g: usize) -> MembershipTable {
    let ids = synth.cohort.eyes.iter().map(|e| e.eye_id.clone()).collect();
    MembershipTable::from_labels(ids, &synth.class_indices(), g)
}

#[test]
fn default_cohort_characterization_shows_age_gradient_and_survival_order() {
    let synth = generate(&GeneratorConfig::default()).unwrap();
    let table = true_memberships(&synth, 4);
    let age = compare_across_clusters(&table, &synth.cohort, "age").unwrap();
    assert!(age.p_value < 0.001, "p {}", age.p_value);
    assert_eq!(age.df, 3);

    let curves = kaplan_meier(&table, &synth.events).unwrap();
    let terminal: Vec<f64> = curves.iter().map(|c| c.terminal_survival()).collect();
    let fast = terminal[3];
    assert!(terminal[..3].iter().all(|&s| s > fast), "{terminal:?}");
    assert!(terminal[1..].iter().all(|&s| s < terminal[0]), "{terminal:?}");
    for c in &curves {
        assert!(c.points.windows(2).all(|w| w[1].survival <= w[0].survival));
        assert!(c.points.iter().all(|p| (0.0..=1.0).contains(&p.survival)));
    }

    let names: Vec<String> = synth.cohort.covariate_schema.names().map(String::from).collect();
    let report = characterize(&table, &synth.cohort, &names).unwrap();
    assert_eq!(report.rows.len() + report.excluded_rare.len(), names.len());
    let csv = report.to_csv();
    assert!(csv.starts_with("variable,c1,c2,c3,c4,p_all,p_4_vs_12,or,or_low,or_high\n"));
    let age_row = report.rows.iter().find(|r| r.variable == "age").unwrap();
    let or = age_row.fast_odds.as_ref().unwrap();
    assert_eq!(or.contrast, Contrast::FastVsNonProgressors);
    let (lo, hi) = or.ci.unwrap();
    assert!(lo <= or.odds_ratio.unwrap() && or.odds_ratio.unwrap() <= hi && lo > 1.0);
}

#[test]
fn null_variable_p_values_are_uniform() {
    // Balanced classes keep about 50 subjects per cluster; the sandwich
    // variance is biased downward when a cluster holds only a handful.
    let mut config = GeneratorConfig {
        n_eyes: 400,
        covariates: vec![continuous("noise", 0.5, vec![0.0; 4], vec![1.0; 4])],
        ..GeneratorConfig::default()
    };
    for c in &mut config.classes {
        c.proportion = 0.25;
    }
    let mut p: Vec<f64> = (0..200)
        .map(|rep| {
            config.seed = 1000 + rep;
            let synth = generate(&config).unwrap();
            compare_across_clusters(&true_memberships(&synth, 4), &synth.cohort, "noise")
                .unwrap()
                .p_value
        })
        .collect();
    p.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    let ks = p
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i as f64 + 1.0) / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max);
    // 1% critical value of the one-sample Kolmogorov-Smirnov statistic.
    assert!(ks < 1.63 / n.sqrt(), "KS {ks}");
}

#[test]
fn chord_table_filters_and_sorts() {
    assert!(association_chord_table(&[]).is_empty());
    let rows: Vec<OddsRatioRow> = [("ccb", 2.24), ("migraine", 0.36), ("african_american", 1.65)]
        .iter()
        .map(|(v, or)| OddsRatioRow {
            variable: v.to_string(),
            cluster: 4,
            contrast: Contrast::FastVsNonProgressors,
            odds_ratio: Some(*or),
            ci: None,
            p_value: None,
            boundary: None,
        })
        .collect();
    let table = association_chord_table(&rows);
    let kept: Vec<f64> = table.iter().map(|r| r.odds_ratio).collect();
    assert_eq!(kept, vec![2.24, 1.65]);
}

#[test]
fn eye_level_null_variable_odds_ratio_has_honest_interval() {
    let mut covered = 0;
    for rep in 0..40 {
        let config = GeneratorConfig {
            n_eyes: 2000,
            seed: 500 + rep,
            covariates: vec![continuous("noise", 0.5, vec![25.0; 4], vec![3.0; 4])],
            ..GeneratorConfig::default()
        };
        let synth = generate(&config).unwrap();
        let row = fast_progressor_odds(&true_memberships(&synth, 4), &synth.cohort, "noise").unwrap();
        let (lo, hi) = row.ci.unwrap();
        assert!(hi - lo > 0.05, "interval ({lo}, {hi}) is implausibly narrow");
        covered += usize::from(lo < 1.0 && 1.0 < hi);
    }
    assert!(covered >= 34, "covered {covered} of 40");
}
