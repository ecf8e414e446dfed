use mhmm::diagnostics::{gelman_rubin_param, summarize};
use mhmm::model::{population, ModelSpec};
use mhmm::sampler::{run_mcmc, McmcConfig, PriorSettings};
use mhmm::simulate::{simulate_dataset, InitialChoice, ScenarioSpec};
use mhmm::study::Population;

#[test]
fn two_chains_recover_separated_states() {
    let scenario = ScenarioSpec {
        id: "sampler-recovery".into(),
        group: Population::baseline().group(0.25, 0.1).unwrap(),
        n_subjects: 15,
        n_occasions: 300,
        zeta: 0.25,
        q_var: 0.1,
        n_sim: 1,
        seed: 9,
        initial: InitialChoice::Stationary,
    };
    let data = simulate_dataset(&scenario, 0).unwrap().dataset;
    let hyper = PriorSettings::default().hyperpriors(&data, 3).unwrap();
    let mut config = McmcConfig::new(1500, 500, 1, 21);
    config.n_chains = 2;
    let chains = run_mcmc(&data, &ModelSpec::new(3, 3).unwrap(), &hyper, &config).unwrap();
    assert_eq!(chains.len(), 2);
    assert_eq!(chains[0].draws.len(), 1000);

    let means = population::baseline_means();
    for k in 0..3 {
        for i in 0..3 {
            let name = format!("emiss_mean.{}.{}", k + 1, i + 1);
            // states keep their labels: each median sits next to its own population mean
            for chain in &chains {
                let med = summarize(chain, &name).unwrap().median;
                assert!(
                    (med - means[(k, i)]).abs() < 0.5,
                    "{name}: {med} vs {}",
                    means[(k, i)]
                );
            }
            let rhat = gelman_rubin_param(&chains, &name, false).unwrap();
            assert!(rhat < 1.1, "{name}: R-hat {rhat}");
        }
    }
    let tpm = population::baseline_tpm();
    for i in 0..3 {
        let med = summarize(&chains[0], &format!("gamma.{}.{}", i + 1, i + 1))
            .unwrap()
            .median;
        assert!((med - tpm[(i, i)]).abs() < 0.1, "gamma.{i}.{i}: {med}");
    }
    for chain in &chains {
        assert!(chain.meta.acceptance.iter().all(|&a| a > 0.05 && a < 0.95));
    }
}
