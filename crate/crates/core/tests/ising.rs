use proptest::prelude::*;
use qising::diffusion::{Panel, PanelRecord};
use qising::graph::{gen_sbm, BinPartition, Graph};
use qising::ising::{
    belief_no_intervention, build_state, fit_emvs, fit_emvs_design, hamiltonian, leapfrog, log_likelihood,
    one_step_auc, sample_posterior, sample_posterior_with, simulate_panel, HmcOptions, IsingDesign, IsingParams,
    LogPosterior, PriorSpec, EmvsOptions, Target,
};
use qising::rng::rng_from_seed;
use rand::Rng;

fn truth() -> IsingParams {
    IsingParams {
        beta0: vec![-2.0, -1.5, -2.5],
        beta1: vec![3.0, 2.5, 3.0],
        beta2: vec![2.0, 1.5, 2.5],
        beta3: vec![0.8, 0.6, 1.0],
        gamma: vec![vec![0.8, 0.0, 0.6], vec![0.0, 0.7, 0.0], vec![-0.6, 0.0, 0.9]],
    }
}

fn sbm_setup(seed: u64) -> (Graph, BinPartition) {
    gen_sbm(&[20, 20, 20], 0.2, 0.05, seed).unwrap()
}

#[test]
fn emvs_recovers_signs_and_predicts_holdout() {
    let (g, p) = sbm_setup(3);
    let params = truth();
    let panel = simulate_panel(&params, &g, &p, 2500, 11).unwrap();
    let train = panel.window(1, 2000).unwrap();
    let holdout = panel.window(2001, 2500).unwrap();
    let fit = fit_emvs(&train, &g, &p, &PriorSpec::default(), &EmvsOptions::default()).unwrap();
    assert!(fit.converged);
    let truth_flat = params.to_flat();
    let est_flat = fit.params.to_flat();
    for (t, e) in truth_flat.iter().zip(&est_flat) {
        if t.abs() >= 0.5 {
            assert_eq!(t.signum(), e.signum(), "true {t} estimated {e}");
        }
    }
    let auc = one_step_auc(&fit.params, &holdout, &g, &p).unwrap();
    assert!(auc >= 0.8, "auc {auc}");
}

#[test]
fn em_objective_never_decreases() {
    let (g, p) = sbm_setup(5);
    let panel = simulate_panel(&truth(), &g, &p, 300, 2).unwrap();
    let fit = fit_emvs(&panel, &g, &p, &PriorSpec::default(), &EmvsOptions::default()).unwrap();
    assert!(fit.objective_trace.len() >= 2);
    for w in fit.objective_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }
    for row in &fit.inclusion {
        for &p in row {
            // strictly inside mathematically; large couplings round to 1.0
            assert!(p > 0.0 && p <= 1.0);
        }
    }
}

#[test]
fn silent_panel_shrinks_couplings() {
    let (g, p) = sbm_setup(1);
    let panel = Panel { y0: vec![0; 60], records: vec![PanelRecord { action: None, y: vec![0; 60] }; 50] };
    let fit = fit_emvs(&panel, &g, &p, &PriorSpec::default(), &EmvsOptions::default()).unwrap();
    // every coefficient except the intercept has no data
    for k in 0..3 {
        assert!(fit.params.beta0[k] < 0.0);
        for v in [fit.params.beta1[k], fit.params.beta2[k], fit.params.beta3[k]] {
            assert!(v.abs() < 1e-6);
        }
        for v in &fit.params.gamma[k] {
            assert!(v.abs() < 1e-6);
        }
    }
}

#[test]
fn gradient_matches_central_differences() {
    let (g, p) = sbm_setup(7);
    let panel = simulate_panel(&truth(), &g, &p, 60, 4).unwrap();
    let design = IsingDesign::from_panel(&panel, &g, &p).unwrap();
    let target = LogPosterior::new(&design, PriorSpec::default()).unwrap();
    let mut rng = rng_from_seed(99);
    for _ in 0..100 {
        let q: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, grad) = target.value_and_gradient(&q);
        for i in 0..q.len() {
            let h = 1e-5;
            let mut up = q.clone();
            let mut down = q.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (target.value_and_gradient(&up).0 - target.value_and_gradient(&down).0) / (2.0 * h);
            let err = (fd - grad[i]).abs() / grad[i].abs().max(1.0);
            assert!(err < 1e-5, "coordinate {i}: analytic {} numeric {fd}", grad[i]);
        }
    }
}

#[test]
fn leapfrog_energy_error_is_second_order() {
    let (g, p) = sbm_setup(7);
    let panel = simulate_panel(&truth(), &g, &p, 40, 4).unwrap();
    let design = IsingDesign::from_panel(&panel, &g, &p).unwrap();
    let target = LogPosterior::new(&design, PriorSpec::default()).unwrap();
    let dim = target.dim();
    let mut rng = rng_from_seed(5);
    let q0: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect();
    let p0: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let inv_mass = vec![1.0; dim];
    let mut grad = vec![0.0; dim];
    let h0 = hamiltonian(target.log_density(&q0, &mut grad), &p0, &inv_mass);
    // same trajectory length, halving the step each time
    let errors: Vec<f64> = [1e-3, 5e-4, 2.5e-4]
        .iter()
        .map(|&eps| {
            let steps = (0.02 / eps as f64).round() as usize;
            let (mut q, mut mom) = (q0.clone(), p0.clone());
            let lp = leapfrog(&target, &mut q, &mut mom, eps, steps, &inv_mass);
            (hamiltonian(lp, &mom, &inv_mass) - h0).abs()
        })
        .collect();
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.0..5.0).contains(&ratio), "errors {errors:?}");
    }
}

#[test]
fn hmc_is_seed_deterministic() {
    let (g, p) = sbm_setup(2);
    let panel = simulate_panel(&truth(), &g, &p, 30, 1).unwrap();
    let prior = PriorSpec::default();
    let a = sample_posterior(&panel, &g, &p, &prior, 20, 20, 8).unwrap();
    let b = sample_posterior(&panel, &g, &p, &prior, 20, 20, 8).unwrap();
    assert_eq!(a, b);
    let c = sample_posterior(&panel, &g, &p, &prior, 20, 20, 9).unwrap();
    assert_ne!(a.draws, c.draws);
}

#[test]
fn hmc_returns_the_prior_without_information() {
    // one silent period: only the intercepts see data
    let (g, p) = sbm_setup(1);
    let panel = Panel { y0: vec![0; 60], records: vec![PanelRecord { action: None, y: vec![0; 60] }] };
    let prior = PriorSpec::default();
    let draws = sample_posterior(&panel, &g, &p, &prior, 3000, 1000, 21).unwrap();
    assert!(!draws.flagged);
    let mean = draws.mean().unwrap();
    let mut sq = 0.0;
    let mut count = 0.0;
    for d in &draws.draws {
        for k in 0..3 {
            for (v, m) in [(d.beta1[k], mean.beta1[k]), (d.beta2[k], mean.beta2[k]), (d.beta3[k], mean.beta3[k])] {
                sq += (v - m) * (v - m);
                count += 1.0;
            }
        }
    }
    let var = sq / (count - 9.0);
    assert!((var - prior.tau2).abs() < 0.3 * prior.tau2, "pooled variance {var}");
}

#[test]
fn posterior_mean_agrees_with_emvs_on_long_panels() {
    let (g, p) = sbm_setup(3);
    let params = truth();
    let panel = simulate_panel(&params, &g, &p, 1500, 17).unwrap();
    let design = IsingDesign::from_panel(&panel, &g, &p).unwrap();
    let prior = PriorSpec::default();
    let fit = fit_emvs_design(&design, &prior, &EmvsOptions::default()).unwrap();
    let draws =
        sample_posterior_with(&design, &prior, 600, 400, 5, &HmcOptions::default(), Some(&fit.params)).unwrap();
    let mean = draws.mean().unwrap().to_flat();
    let sd = draws.std_dev().unwrap();
    for ((m, s), e) in mean.iter().zip(&sd).zip(fit.params.to_flat()) {
        assert!((m - e).abs() <= 2.0 * s, "posterior mean {m} sd {s} vs EMVS {e}");
    }
}

#[test]
fn zero_params_saturate_at_half() {
    let (g, p) = sbm_setup(4);
    let panel = simulate_panel(&truth(), &g, &p, 5, 3).unwrap();
    let ll = log_likelihood(&IsingParams::zeros(3), &panel, &g, &p).unwrap();
    assert!((ll + 300.0 * 2f64.ln()).abs() < 1e-9);
}

fn arb_params(k: usize) -> impl Strategy<Value = IsingParams> {
    prop::collection::vec(-3.0f64..3.0, k * (4 + k)).prop_map(move |v| IsingParams::from_flat(k, &v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn likelihood_is_invariant_to_relabeling(params in arb_params(2), seed in 0u64..1000, perm_seed in 0u64..1000) {
        let (g, p) = gen_sbm(&[5, 4], 0.5, 0.2, seed).unwrap();
        let panel = simulate_panel(&params, &g, &p, 6, seed).unwrap();
        let n = g.n();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = rng_from_seed(perm_seed);
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let g2 = Graph::new(n, g.edges().iter().map(|&(u, v)| (perm[u], perm[v]))).unwrap();
        let mut bins = vec![0; n];
        for v in 0..n {
            bins[perm[v]] = p.bin_of(v);
        }
        let p2 = BinPartition::new(bins).unwrap();
        let relabel = |y: &[u8]| {
            let mut out = vec![0; n];
            for v in 0..n {
                out[perm[v]] = y[v];
            }
            out
        };
        let panel2 = Panel {
            y0: relabel(&panel.y0),
            records: panel
                .records
                .iter()
                .map(|r| PanelRecord { action: r.action.map(|a| perm[a]), y: relabel(&r.y) })
                .collect(),
        };
        let a = log_likelihood(&params, &panel, &g, &p).unwrap();
        let b = log_likelihood(&params, &panel2, &g2, &p2).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn beliefs_and_states_stay_in_range(params in arb_params(2), seed in 0u64..1000, y in prop::collection::vec(0u8..2, 9)) {
        let (g, p) = gen_sbm(&[5, 4], 0.5, 0.2, seed).unwrap();
        let l0 = belief_no_intervention(&params, &g, &p, &y).unwrap();
        prop_assert!(l0.iter().all(|&v| v > 0.0 && v < 1.0));
        let s = build_state(&l0, &y, &p).unwrap();
        prop_assert!(s.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn inclusion_grows_with_magnitude(a in 0.0f64..4.0, b in 0.0f64..4.0, size in 1usize..200) {
        let prior = PriorSpec::default();
        let w = prior.inclusion_weight(size);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let p_lo = prior.inclusion_probability(lo, w);
        let p_hi = prior.inclusion_probability(-hi, w);
        prop_assert!(p_lo <= p_hi);
        if w < 1.0 {
            prop_assert!(p_lo > 0.0 && p_hi <= 1.0);
        }
    }
}
