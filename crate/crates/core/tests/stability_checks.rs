use tdlab::envs::{build_env, EnvName};
use tdlab::learners::{AlgoSpec, RegFn};
use tdlab::numkit::eig_sym_extreme;
use tdlab::odelab::{closed_loop, linear_closed_loop_matrix};
use tdlab::stability::{
    check_beta_tdc_slow, check_nonlinear, check_tdcpp, conditions_for, is_hurwitz, lyapunov_sample_check,
    soundness_grid, stability_report, DEFAULT_LYAPUNOV_SAMPLES,
};
use tdlab::tdcore::expected_matrices;

#[test]
fn satisfied_conditions_imply_hurwitz() {
    let mut satisfied = 0;
    for name in EnvName::ALL {
        let km = expected_matrices(&build_env(name.as_str()).unwrap()).unwrap();
        for algo in soundness_grid().into_iter().filter(|a| a.reg_fn.is_identity()) {
            let conds = conditions_for(&algo, &km).unwrap();
            if conds.is_empty() || !conds.iter().all(|c| c.satisfied) {
                continue;
            }
            satisfied += 1;
            let m = linear_closed_loop_matrix(&algo, &km).unwrap();
            let (ok, max_re) = is_hurwitz(&m).unwrap();
            assert!(ok, "{name}/{}: max Re {max_re:e}", algo.label());
        }
    }
    assert!(satisfied > 0);
}

#[test]
fn baird_beta_threshold_recomputed() {
    let km = expected_matrices(&build_env("baird").unwrap()).unwrap();
    let (c_min, _) = eig_sym_extreme(&km.c).unwrap();
    let (a_min, _) = eig_sym_extreme(&km.a.sym_part()).unwrap();
    assert!(a_min < 0.0);
    let report = check_beta_tdc_slow(&km, 0.1).unwrap();
    assert!((report.threshold - (-c_min / a_min)).abs() <= 1e-12);
}

#[test]
fn baird_tdcpp_report_matches_spectrum() {
    let km = expected_matrices(&build_env("baird").unwrap()).unwrap();
    let report = check_tdcpp(&km, 1.0, 1.0, 1.0).unwrap();
    let m = linear_closed_loop_matrix(&AlgoSpec::tdcpp(1.0, 1.0, 1.0, RegFn::Identity, 0.01), &km).unwrap();
    let (hurwitz, _) = is_hurwitz(&m).unwrap();
    assert!(!report.satisfied || hurwitz);
}

#[test]
fn lyapunov_sampling_agrees_with_hurwitz_when_beta_is_zero() {
    for name in EnvName::ALL {
        let km = expected_matrices(&build_env(name.as_str()).unwrap()).unwrap();
        for (eta, kappa) in [(1.0, 1.0), (0.5, 2.0), (2.0, 0.1)] {
            let algo = AlgoSpec::tdcpp(eta, 0.0, kappa, RegFn::Identity, 0.01);
            if !check_tdcpp(&km, eta, 0.0, kappa).unwrap().satisfied {
                continue;
            }
            let sys = closed_loop(&algo, &km).unwrap();
            let report = lyapunov_sample_check(&sys, &km, eta, kappa, DEFAULT_LYAPUNOV_SAMPLES, 3).unwrap();
            let (hurwitz, _) = is_hurwitz(sys.linear_parts().unwrap().0).unwrap();
            assert_eq!(report.passed, hurwitz, "{name} eta={eta} kappa={kappa}");
        }
    }
}

#[test]
fn nonlinear_checks_pass_lyapunov_sampling() {
    for name in EnvName::ALL {
        let km = expected_matrices(&build_env(name.as_str()).unwrap()).unwrap();
        for f in [RegFn::Relu, RegFn::LeakyRelu { slope: 0.2 }] {
            for kappa in [0.1, 1.0] {
                let report = check_nonlinear(&km, 1.0, 0.5, kappa, f.growth_constant()).unwrap();
                if !report.satisfied {
                    continue;
                }
                let sys = closed_loop(&AlgoSpec::tdcpp(1.0, 0.5, kappa, f, 0.01), &km).unwrap();
                let lyap = lyapunov_sample_check(&sys, &km, 1.0, kappa, DEFAULT_LYAPUNOV_SAMPLES, 4).unwrap();
                assert!(lyap.passed, "{name} {f} kappa={kappa}: witness {:?}", lyap.witness);
            }
        }
    }
}

#[test]
fn report_lists_conditions_and_spectrum() {
    let km = expected_matrices(&build_env("boyan").unwrap()).unwrap();
    let report = stability_report("boyan", &AlgoSpec::tdc_fast(1.0, 0.01), &km).unwrap();
    let json = serde_json::to_value(&report).unwrap();
    assert!(json.is_object());
    assert!(!report.conditions.is_empty());
}
