use sdeorder::pkpd::{effect_report, simulate_cohort, EffectConfig, EffectPipeline, PKPDParams, Regime, VOLUME_FLOOR};
use sdeorder::RngSeed;

fn small_cfg() -> EffectConfig {
    EffectConfig { mc_paths: 256, ..Default::default() }
}

#[test]
fn report_invariants_and_sign() {
    let cohort = simulate_cohort(300, &PKPDParams::default(), Regime::Policy, RngSeed(1)).unwrap();
    let rep = effect_report(&cohort, EffectPipeline::TrueOrder, &small_cfg(), RngSeed(2)).unwrap();
    let mean = rep.ite.iter().sum::<f64>() / rep.ite.len() as f64;
    assert_eq!(rep.ate, mean);
    assert!(rep.ate < 0.0 && rep.ate_true < 0.0);
    assert!(rep.cf_rmse >= 0.0);
    assert_eq!(rep.t_star, PKPDParams::default().n_steps);
}

#[test]
fn no_treatment_effect_gives_null_ate() {
    let p = PKPDParams { beta_c: 0.0, alpha_r: 0.0, beta_r: 0.0, ..Default::default() };
    let cohort = simulate_cohort(400, &p, Regime::Policy, RngSeed(3)).unwrap();
    let rep = effect_report(&cohort, EffectPipeline::TrueOrder, &small_cfg(), RngSeed(4)).unwrap();
    assert_eq!(rep.ate_true, 0.0);
    let reference = simulate_cohort(400, &PKPDParams::default(), Regime::Policy, RngSeed(3)).unwrap();
    let treated = effect_report(&reference, EffectPipeline::TrueOrder, &small_cfg(), RngSeed(4)).unwrap();
    assert!(rep.ate.abs() < 0.05 * treated.ate.abs(), "{} vs {}", rep.ate, treated.ate);
}

#[test]
fn floor_rarely_binds() {
    let cohort = simulate_cohort(500, &PKPDParams::default(), Regime::Policy, RngSeed(5)).unwrap();
    let total: usize = cohort.iter().map(|s| 2 * s.factual_latent.len()).sum();
    let floored: usize = cohort
        .iter()
        .flat_map(|s| s.factual_latent.iter().chain(&s.counterfactual_path))
        .filter(|&&x| x <= VOLUME_FLOOR)
        .count();
    assert!((floored as f64) <= 1e-3 * total as f64);
}

#[test]
fn policy_assigns_both_arms() {
    let cohort = simulate_cohort(200, &PKPDParams::default(), Regime::Policy, RngSeed(6)).unwrap();
    let treated = cohort.iter().filter(|s| s.arm == 1).count();
    assert!(treated > 50 && treated < 150);
}
