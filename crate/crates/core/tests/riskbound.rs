use fastweight_core::adapters::AdapterMatrix;
use fastweight_core::linalg::{gaussian_vector, sym_eigen_desc};
use fastweight_core::prototypes::*;
use fastweight_core::riskbound::*;
use fastweight_core::seeds::rng_from;
use fastweight_core::stats::{mean, Resampler};
use fastweight_core::synthdata::{generate_corpus, Corpus, FeatureMap, GeneratorConfig, Sample};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn truth_matrix(corpus: &Corpus, idx: &[usize]) -> AdapterMatrix {
    let d = corpus.config.d_theta;
    let rows = DMatrix::from_fn(idx.len(), d, |i, j| corpus.tasks[idx[i]].theta_true.as_ref().unwrap()[j]);
    AdapterMatrix {
        rows,
        task_ids: idx.iter().map(|&i| corpus.tasks[i].task_id.clone()).collect(),
        ridge_alpha: 0.0,
        canonicalized: false,
    }
}

fn certified_memory(corpus: &Corpus, pre: &[usize], k: usize, r: usize, r_sparse: usize) -> PrototypeMemory {
    let theta = truth_matrix(corpus, pre);
    let (_, vecs) = sym_eigen_desc(&(theta.rows.transpose() * &theta.rows));
    let proj = Projection::from_basis(vecs.columns(0, r).into_owned(), 1.0).unwrap();
    let (mut mem, _) = cluster_prototypes(&theta, &proj, k, 4, 5).unwrap();
    merge_prototypes(&mut mem, &MergeConfig::default(), None).unwrap();
    mem.freeze();
    let s = r_sparse.min(mem.k());
    coverage_certificate(&mut mem, &theta, s, L0Mode::Omp, &Resampler::random(1000, 3)).unwrap();
    mem
}

#[test]
fn bound_chain_holds_on_fifty_tasks() {
    let cfg = GeneratorConfig { n_tasks: 200, noise_sigma: 0.3, ..GeneratorConfig::default() };
    let corpus = generate_corpus(&cfg).unwrap();
    let pre: Vec<usize> = (0..150).collect();
    let mem = certified_memory(&corpus, &pre, 6, 2, 1);
    let reports: Vec<BoundReport> = (150..200)
        .map(|t| {
            let task = &corpus.tasks[t];
            check_bound(task, &corpus.feature_map, &mem, 1, L0Mode::Omp, &task.query, None).unwrap()
        })
        .collect();
    let summary = summarize(&reports);
    assert_eq!(summary.n_tasks, 50);
    assert_eq!(summary.triangle_rate, 1.0);
    assert_eq!(summary.task_bound_rate, 1.0);
    assert!(summary.certified_rate >= 0.9, "{summary:?}");
    for r in &reports {
        assert!(r.eps_app > 0.0 && r.eps_task >= 0.0 && r.lipschitz > 0.0 && r.emp_gap >= 0.0);
        assert_eq!(r.satisfied, r.emp_gap <= r.deterministic_bound + TRIANGLE_TOL);
    }
}

#[test]
fn prototype_task_has_zero_terms() {
    let cfg = GeneratorConfig { n_tasks: 30, ..GeneratorConfig::default() };
    let mut corpus = generate_corpus(&cfg).unwrap();
    let pre: Vec<usize> = (0..24).collect();
    let mem = certified_memory(&corpus, &pre, 6, 2, 2);
    // plant a task exactly on a prototype row
    let row = mem.row(0);
    let t = &mut corpus.tasks[29];
    t.theta_true = Some(row);
    let rep = check_bound(&corpus.tasks[29], &corpus.feature_map, &mem, 1, L0Mode::Exact, &corpus.tasks[29].query, None).unwrap();
    assert!(rep.eps_app < 1e-12 && rep.eps_task < 1e-12 && rep.approx_error < 1e-12);
    assert!(rep.emp_gap < 1e-12 && rep.task_bound < 1e-10);

    // in-subspace but off-dictionary: only the sparse residual remains
    let off = mem.projection().lift(&DVector::from_vec(vec![0.3, -1.7]));
    corpus.tasks[28].theta_true = Some(off);
    let rep = check_bound(&corpus.tasks[28], &corpus.feature_map, &mem, 1, L0Mode::Exact, &corpus.tasks[28].query, None).unwrap();
    assert!(rep.eps_app < 1e-12);
    assert!((rep.task_bound - rep.lipschitz * rep.eps_task).abs() < 1e-12);

    corpus.tasks[27].theta_true = None;
    assert!(check_bound(&corpus.tasks[27], &corpus.feature_map, &mem, 1, L0Mode::Omp, &corpus.tasks[27].query, None).is_err());
}

fn logistic(theta: &DVector<f64>, phi: &DVector<f64>, y: u8) -> f64 {
    let z = theta.dot(phi);
    (1.0 + (-z).exp()).ln() + (1.0 - f64::from(y)) * z
}

#[test]
fn lipschitz_constant_dominates_random_pairs() {
    let mut rng = rng_from(61);
    let feats: Vec<DVector<f64>> = (0..200)
        .map(|_| {
            let v = gaussian_vector(5, &mut rng);
            let radius = 2.0 * rng.random::<f64>();
            v.normalize() * radius
        })
        .collect();
    let lip = lipschitz_constant(&feats).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let a = gaussian_vector(5, &mut rng) * 3.0;
        let b = gaussian_vector(5, &mut rng) * 3.0;
        let phi = &feats[rng.random_range(0..feats.len())];
        let y = rng.random_range(0..2u8);
        let ratio = (logistic(&a, phi, y) - logistic(&b, phi, y)).abs() / (&a - &b).norm();
        worst = worst.max(ratio);
    }
    assert!(worst <= lip, "{worst} > {lip}");
    assert!(lipschitz_constant(&[]).is_err());
}

#[test]
fn capacity_term_monotonicity() {
    let base = sparsity_capacity_term(2, 10.0, 100, 0.05).unwrap();
    assert!(sparsity_capacity_term(3, 10.0, 100, 0.05).unwrap() > base);
    assert!(sparsity_capacity_term(2, 20.0, 100, 0.05).unwrap() > base);
    assert!(sparsity_capacity_term(2, 10.0, 200, 0.05).unwrap() < base);
    assert!(sparsity_capacity_term(2, 10.0, 100, 0.1).unwrap() < base);
}

fn features(fmap: &FeatureMap, samples: &[Sample]) -> (Vec<DVector<f64>>, Vec<u8>) {
    (samples.iter().map(|s| fmap.apply(&s.x)).collect(), samples.iter().map(|s| s.y).collect())
}

#[test]
fn generalisation_gap_decays_like_inverse_sqrt() {
    let cfg = GeneratorConfig { n_tasks: 30, ..GeneratorConfig::default() };
    let corpus = generate_corpus(&cfg).unwrap();
    let sizes = [50usize, 100, 200, 400];
    let mut gaps = Vec::new();
    for &n in &sizes {
        let mut per_task = Vec::new();
        for t in 0..corpus.tasks.len() {
            let theta = corpus.tasks[t].theta_true.as_ref().unwrap();
            let (pf, pl) = features(&corpus.feature_map, &corpus.draw_fresh(t, 20_000, 0).unwrap());
            let pop = empirical_risk(theta, &pf, &pl);
            for rep in 0..20u64 {
                let (qf, ql) = features(&corpus.feature_map, &corpus.draw_fresh(t, n, 1 + rep).unwrap());
                per_task.push((empirical_risk(theta, &qf, &ql) - pop).abs());
            }
        }
        gaps.push(mean(&per_task));
    }
    let fit = fit_inverse_sqrt(&sizes, &gaps, 2.0).unwrap();
    assert!(fit.within_factor, "{fit:?} gaps {gaps:?}");
    assert!(gaps[3] < gaps[0]);
}
