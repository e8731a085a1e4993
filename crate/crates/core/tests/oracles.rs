use fedunlearn_core::config::{DatasetConfig, ExperimentConfig, SynthConfig};
use fedunlearn_core::data;
use fedunlearn_core::experiment::{Experiment, Method};
use fedunlearn_core::federated::ServerState;
use fedunlearn_core::fim::estimate_block_fim;
use fedunlearn_core::seed;
use fedunlearn_core::{Example, ModelSpec, ParamVector};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn affine(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| w[rows * cols + r] + (0..cols).map(|j| w[r * cols + j] * x[j]).sum::<f64>())
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[test]
fn mlp_matches_reference_forward_pass() {
    let spec = ModelSpec::mlp(4, 7, 3, 0.0);
    let mut rng = seed::rng(5, &[]);
    for _ in 0..50 {
        let w: Vec<f64> = (0..spec.param_count()).map(|_| normal(&mut rng)).collect();
        let x: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
        let split = 4 * 7 + 7;
        let hidden: Vec<f64> = affine(&w[..split], &x, 7).iter().map(|a| a.tanh()).collect();
        let expected = softmax(&affine(&w[split..], &hidden, 3));
        let got = spec.predict(&ParamVector::new(w), &x).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14, "{got:?} vs {expected:?}");
        }
    }
}

#[test]
fn block_fim_matches_outer_product_average() {
    let mut rng = seed::rng(6, &[]);
    let (n, d, b) = (9, 11, 4);
    let grads: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
    let fim = estimate_block_fim(&grads, n, b).unwrap();
    let mut full = DMatrix::<f64>::zeros(d, d);
    for g in &grads {
        let v = DVector::from_column_slice(g);
        full += &v * v.transpose();
    }
    full /= n as f64;
    assert_eq!(fim.blocks.len(), 3);
    assert_eq!(fim.blocks[2].size, 3);
    for block in &fim.blocks {
        for r in 0..block.size {
            for c in 0..block.size {
                let want = full[(block.offset + r, block.offset + c)];
                assert!((block.data[r * block.size + c] - want).abs() < 1e-13);
            }
        }
    }
    for j in 0..d {
        assert!((fim.gamma[j] - full[(j, j)]).abs() < 1e-13);
    }
}

#[test]
fn mean_gradient_is_bitwise_mean_of_per_sample_gradients() {
    let mut rng = seed::rng(7, &[]);
    for spec in [
        ModelSpec::linear_regression(5, 0.1),
        ModelSpec::softmax(5, 4, 0.0),
        ModelSpec::softmax(5, 4, 0.01),
        ModelSpec::mlp(5, 3, 4, 0.01),
    ] {
        let w = data::random_true_params(&spec, 1.0, 9);
        let batch: Vec<Example> = (0..17)
            .map(|_| Example::new((0..5).map(|_| normal(&mut rng)).collect(), rng.random_range(0..4) as f64))
            .collect();
        let full = spec.gradient(&w, &batch).unwrap();
        let mean = spec.mean_gradient(&w, &batch).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&full.mean), bits(&mean), "{:?}", spec.kind);
    }
}

/// Newton's method on the unregularized softmax likelihood.
fn softmax_mle(spec: &ModelSpec, data: &[Example]) -> Vec<f64> {
    let (i, c) = (spec.input_dim, spec.num_classes);
    let d = spec.param_count();
    let idx = |k: usize, j: usize| if j < i { k * i + j } else { c * i + k };
    let mut w = vec![0.0; d];
    for _ in 0..30 {
        let mut g = DVector::<f64>::zeros(d);
        let mut h = DMatrix::<f64>::zeros(d, d);
        for ex in data {
            let p = softmax(&affine(&w, &ex.x, c));
            let xt: Vec<f64> = ex.x.iter().copied().chain([1.0]).collect();
            for k in 0..c {
                let dz = p[k] - f64::from(k == ex.y as usize);
                for j in 0..=i {
                    g[idx(k, j)] += dz * xt[j];
                }
                for k2 in 0..c {
                    let a = p[k] * (f64::from(k == k2) - p[k2]);
                    for j in 0..=i {
                        for j2 in 0..=i {
                            h[(idx(k, j), idx(k2, j2))] += a * xt[j] * xt[j2];
                        }
                    }
                }
            }
        }
        // the likelihood is invariant to a common shift of all classes;
        // a tiny ridge picks the minimum-norm direction
        for j in 0..d {
            h[(j, j)] += 1e-9 * data.len() as f64;
        }
        let step = h.cholesky().unwrap().solve(&g);
        w.iter_mut().zip(step.iter()).for_each(|(a, s)| *a -= s);
        if step.amax() < 1e-10 {
            break;
        }
    }
    w
}

#[test]
fn synthetic_classification_is_consistent() {
    let spec = ModelSpec::softmax(10, 2, 0.0);
    let truth = data::random_true_params(&spec, 0.5, 11);
    let sample = data::synth_logistic(&spec, &truth, 100_000, 12).unwrap();
    let fit = softmax_mle(&spec, &sample);
    // only differences between class scores are identified
    let (i, c) = (spec.input_dim, spec.num_classes);
    let contrast = |w: &[f64], j: usize| {
        if j < i {
            w[i + j] - w[j]
        } else {
            w[c * i + 1] - w[c * i]
        }
    };
    let t = truth.as_slice();
    let worst = (0..=i).map(|j| (contrast(&fit, j) - contrast(t, j)).abs()).fold(0.0, f64::max);
    assert!(worst < 0.1, "L-inf error {worst}");
}

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.model = ModelSpec::mlp(5, 4, 3, 1e-3);
    c.dataset = DatasetConfig::Synth(SynthConfig {
        n_train: 600,
        n_test: 100,
        ..SynthConfig::default()
    });
    c.federation.clients = 6;
    c.federation.rounds = 4;
    c.federation.batch_size = 16;
    c.federation.participation = 0.5;
    c.optimizer.eta = 0.01;
    c.optimizer.block_size = 3;
    c.unlearning.deletion_rate = 0.05;
    c.unlearning.unlearned_clients = 2;
    c
}

#[test]
fn thread_count_does_not_change_results() {
    let exp = Experiment::load(small_config()).unwrap();
    let server = ServerState {
        global_params: ParamVector::zeros(exp.spec().param_count()),
        weights: Vec::new(),
        round: 0,
    };
    let run_in = |threads: usize, method: Method| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| exp.unlearn(method, &server).unwrap())
    };
    for method in [Method::Fim, Method::Baseline] {
        let a = run_in(1, method);
        let b = run_in(4, method);
        let bits = |p: &ParamVector| p.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.outcome.unlearned_params), bits(&b.outcome.unlearned_params));
        assert_eq!(a.outcome.rounds.len(), b.outcome.rounds.len());
        for (x, y) in a.outcome.rounds.iter().zip(&b.outcome.rounds) {
            assert_eq!(x.global_loss.to_bits(), y.global_loss.to_bits());
            assert_eq!(x.participants, y.participants);
        }
    }
}

#[test]
fn loss_threshold_stops_early_and_is_reported() {
    let mut c = small_config();
    c.federation.participation = 1.0;
    c.federation.rounds = 50;
    c.stop.loss_threshold = Some(10.0);
    let exp = Experiment::load(c).unwrap();
    let run = exp.train().unwrap();
    assert_eq!(run.rounds.len(), 1);
    assert_eq!(run.rounds_to_threshold, Some(1));
    let report = exp.train_report(&run, 0).unwrap();
    assert_eq!(report.summary.rounds_to_threshold, Some(1));
}
