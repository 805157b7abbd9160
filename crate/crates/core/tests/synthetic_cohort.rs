use subtype_core::cohort::{load_cohort, summarize_baseline, BaselineRow, MIN_VISITS};
use subtype_core::synthetic::{
    generate, read_labels, write_cohort, ClassConfig, CohortFiles, CovariateConfig, CovariateDistribution,
    GeneratorConfig, RandomEffects,
};

fn small(n_eyes: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_eyes,
        seed,
        ..GeneratorConfig::default()
    }
}

#[test]
fn write_then_load_reproduces_values_bit_for_bit() {
    let config = small(300, 11);
    let synth = generate(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_cohort(&synth.cohort, &synth.events, &synth.labels, dir.path()).unwrap();
    let loaded = load_cohort(&files.trajectories, &files.covariates, Some(&files.events), None).unwrap();

    assert!(loaded.exclusions.is_empty());
    assert_eq!(loaded.cohort.len(), synth.cohort.len());
    for (a, b) in loaded.cohort.eyes.iter().zip(&synth.cohort.eyes) {
        assert_eq!(a.eye_id, b.eye_id);
        assert_eq!(a.subject_id, b.subject_id);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.times), bits(&b.times));
        assert_eq!(bits(&a.values), bits(&b.values));
        assert_eq!(a.covariates, b.covariates);
    }
    assert_eq!(loaded.events, synth.events);
    assert_eq!(read_labels(&files.labels).unwrap(), synth.labels);
}

#[test]
fn loading_twice_gives_identical_cohorts() {
    let synth = generate(&small(120, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_cohort(&synth.cohort, &synth.events, &synth.labels, dir.path()).unwrap();
    let a = load_cohort(&files.trajectories, &files.covariates, Some(&files.events), None).unwrap();
    let b = load_cohort(&files.trajectories, &files.covariates, Some(&files.events), None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn same_seed_writes_byte_identical_files() {
    let config = small(250, 99);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&d1, &d2] {
        let s = generate(&config).unwrap();
        write_cohort(&s.cohort, &s.events, &s.labels, dir.path()).unwrap();
    }
    let (f1, f2) = (CohortFiles::in_dir(d1.path()), CohortFiles::in_dir(d2.path()));
    for (a, b) in f1.all().iter().zip(f2.all()) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), "{}", a.display());
    }

    let other = generate(&small(250, 100)).unwrap();
    let first = generate(&config).unwrap();
    assert_ne!(other.cohort.eyes[0].values, first.cohort.eyes[0].values);
}

#[test]
fn labels_file_has_one_row_per_eye() {
    let config = small(301, 5);
    let synth = generate(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_cohort(&synth.cohort, &synth.events, &synth.labels, dir.path()).unwrap();
    let labels = read_labels(&files.labels).unwrap();
    assert_eq!(labels.len(), 301);
    assert!(labels.iter().all(|l| (1..=4).contains(&l.class)));
    let text = std::fs::read_to_string(&files.labels).unwrap();
    assert!(text.starts_with("eye_id,class\n"));
    let covariates = std::fs::read_to_string(&files.covariates).unwrap();
    assert!(!covariates.lines().next().unwrap().contains("class"));
}

#[test]
fn default_cohort_has_expected_shape() {
    let synth = generate(&GeneratorConfig::default()).unwrap();
    assert_eq!(synth.cohort.len(), 3133);
    assert_eq!(synth.cohort.n_subjects(), 1567);
    assert_eq!(synth.cohort.mean_visits(), 22.0);
    assert!(synth
        .cohort
        .eyes
        .iter()
        .all(|e| e.n_visits() >= MIN_VISITS && e.validate().is_ok()));
}

fn class_counts(classes: &[usize], g: usize) -> Vec<f64> {
    let mut counts = vec![0.0; g];
    for &c in classes {
        counts[c] += 1.0;
    }
    counts
}

#[test]
fn class_counts_within_three_standard_errors() {
    let config = GeneratorConfig::default();
    let synth = generate(&config).unwrap();
    let counts = class_counts(&synth.class_indices(), 4);
    // Both eyes of a subject share a class, so eye counts are twice a
    // subject-level multinomial count.
    let n_subjects = synth.cohort.n_subjects() as f64;
    for (g, c) in config.classes.iter().enumerate() {
        let p = c.proportion;
        let expected = config.n_eyes as f64 * p;
        let se = 2.0 * (n_subjects * p * (1.0 - p)).sqrt();
        assert!(
            (counts[g] - expected).abs() < 3.0 * se,
            "class {g}: {} vs {expected}",
            counts[g]
        );
    }

    let mut single = GeneratorConfig::default();
    single.subjects.two_eyes = false;
    let synth = generate(&single).unwrap();
    let counts = class_counts(&synth.class_indices(), 4);
    let n = single.n_eyes as f64;
    for (g, c) in single.classes.iter().enumerate() {
        let p = c.proportion;
        let se = (n * p * (1.0 - p)).sqrt();
        assert!((counts[g] - n * p).abs() < 3.0 * se);
    }
}

fn ols_slope(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len() as f64;
    let (mt, my) = (t.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - mt) * (b - my)).sum();
    let sxx: f64 = t.iter().map(|a| (a - mt) * (a - mt)).sum();
    sxy / sxx
}

#[test]
fn noise_free_eyes_lie_on_their_class_line() {
    let mut config = small(400, 8);
    config.error_sd = 0.0;
    config.random_effects = RandomEffects {
        intercept_sd: 0.0,
        slope_sd: 0.0,
        correlation: 0.0,
    };
    let synth = generate(&config).unwrap();
    for (eye, label) in synth.cohort.eyes.iter().zip(&synth.labels) {
        let class = &config.classes[label.class - 1];
        let intercept = config.intercept_db(label.class - 1);
        for (t, y) in eye.times.iter().zip(&eye.values) {
            assert_eq!(*y, intercept + class.slope * t);
        }
        assert!((ols_slope(&eye.times, &eye.values) - class.slope).abs() < 1e-12);
    }
}

#[test]
fn full_sharing_gives_identical_random_effects_for_both_eyes() {
    let mut config = small(200, 21);
    config.error_sd = 0.0;
    config.subjects.sharing_weight = 1.0;
    let synth = generate(&config).unwrap();
    for pair in synth.cohort.eyes.chunks(2) {
        let (a, b) = (&pair[0], &pair[1]);
        assert_eq!(a.subject_id, b.subject_id);
        // With no measurement error the values are intercept + b0 + (slope + b1) t.
        let fit = |e: &subtype_core::cohort::EyeSeries| {
            let s = ols_slope(&e.times, &e.values);
            (s, e.values[0])
        };
        let ((sa, ia), (sb, ib)) = (fit(a), fit(b));
        assert!((sa - sb).abs() < 1e-10);
        assert_eq!(ia, ib);
    }
}

#[test]
fn continuous_covariate_moments_match_configuration() {
    let config = GeneratorConfig {
        n_eyes: 4000,
        seed: 2,
        ..GeneratorConfig::default()
    };
    let synth = generate(&config).unwrap();
    let classes = synth.class_indices();
    for cov in &config.covariates {
        let CovariateDistribution::Continuous { means, sds } = &cov.distribution else {
            continue;
        };
        for g in 0..4 {
            let xs: Vec<f64> = synth
                .cohort
                .eyes
                .iter()
                .zip(&classes)
                .filter(|(_, c)| **c == g)
                .map(|(e, _)| e.covariate(&cov.name).unwrap())
                .collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            // Eye pairs are correlated, so the effective sample size lies
            // between the subject and eye counts; use the subject count.
            let n_eff = n / 2.0;
            let se_mean = sds[g] / n_eff.sqrt();
            let se_var = sds[g].powi(2) * (2.0 / (n_eff - 1.0)).sqrt();
            assert!(
                (mean - means[g]).abs() < 3.0 * se_mean,
                "{} class {g} mean {mean}",
                cov.name
            );
            assert!(
                (var - sds[g].powi(2)).abs() < 3.0 * se_var,
                "{} class {g} var {var}",
                cov.name
            );
        }
    }
}

#[test]
fn binary_covariate_prevalences_match_configuration() {
    let config = GeneratorConfig {
        n_eyes: 4000,
        seed: 4,
        ..GeneratorConfig::default()
    };
    let synth = generate(&config).unwrap();
    let classes = synth.class_indices();
    for cov in &config.covariates {
        let CovariateDistribution::Binary { prevalence } = &cov.distribution else {
            continue;
        };
        for (g, &p) in prevalence.iter().enumerate() {
            let xs: Vec<f64> = synth
                .cohort
                .eyes
                .iter()
                .zip(&classes)
                .filter(|(_, c)| **c == g)
                .map(|(e, _)| e.covariate(&cov.name).unwrap())
                .collect();
            assert!(xs.iter().all(|x| *x == 0.0 || *x == 1.0));
            let n = xs.len() as f64;
            let se = (p * (1.0 - p) / (n / 2.0)).sqrt();
            let phat = xs.iter().sum::<f64>() / n;
            assert!((phat - p).abs() < 3.0 * se, "{} class {g}: {phat} vs {p}", cov.name);
        }
    }
}

#[test]
fn conversion_fraction_follows_hazard_order() {
    let synth = generate(&GeneratorConfig::default()).unwrap();
    let classes = synth.class_indices();
    let mut converted = [0.0; 4];
    let mut totals = [0.0; 4];
    let index = synth.cohort.index_of();
    for (e, &c) in synth.events.iter().zip(&classes) {
        totals[c] += 1.0;
        if e.record.event {
            converted[c] += 1.0;
        }
        let eye = &synth.cohort.eyes[index[e.eye_id.as_str()]];
        assert!(e.record.event_time_years <= eye.last_time());
    }
    let frac: Vec<f64> = (0..4).map(|g| converted[g] / totals[g]).collect();
    assert!(frac.windows(2).all(|w| w[0] < w[1]), "{frac:?}");
}

#[test]
fn baseline_summary_recovers_configured_age() {
    let config = GeneratorConfig {
        classes: vec![ClassConfig {
            label: "All".into(),
            proportion: 1.0,
            intercept: 0.0,
            slope: -0.1,
            hazard: 0.01,
        }],
        covariates: vec![
            CovariateConfig {
                name: "age".into(),
                within_subject_correlation: 1.0,
                distribution: CovariateDistribution::Continuous {
                    means: vec![56.0],
                    sds: vec![9.5],
                },
            },
            CovariateConfig {
                name: "never".into(),
                within_subject_correlation: 1.0,
                distribution: CovariateDistribution::Binary { prevalence: vec![0.0] },
            },
        ],
        ..GeneratorConfig::default()
    };
    let synth = generate(&config).unwrap();
    let rows = summarize_baseline(&synth.cohort);
    assert_eq!(rows.len(), 2);
    for row in rows {
        match row {
            BaselineRow::Continuous { name, mean, sd, .. } => {
                assert_eq!(name, "age");
                assert!((mean - 56.0).abs() < 0.5, "mean {mean}");
                assert!((sd - 9.5).abs() < 0.5, "sd {sd}");
            }
            BaselineRow::Binary {
                name, count, percent, ..
            } => {
                assert_eq!(name, "never");
                assert_eq!((count, percent), (0, 0.0));
            }
        }
    }
}

#[test]
fn latent_intercepts_map_onto_reference_range() {
    let mut config = GeneratorConfig {
        intercept_scale: subtype_core::synthetic::InterceptScale::Latent,
        ..GeneratorConfig::default()
    };
    for (c, v) in config.classes.iter_mut().zip([0.0, 0.68, 0.93, 0.98]) {
        c.intercept = v;
    }
    assert_eq!(config.intercept_db(0), -2.0);
    assert!((config.intercept_db(1) - 0.72).abs() < 1e-12);
}

#[test]
fn mismatched_class_lists_are_rejected() {
    let mut config = GeneratorConfig::default();
    config.classes.pop();
    assert!(generate(&config).is_err());
    let mut config = GeneratorConfig::default();
    config.classes[0].proportion += 0.01;
    assert!(config.validate().is_err());
}
