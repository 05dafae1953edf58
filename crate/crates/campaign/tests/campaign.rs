use chrono::Utc;
use groupwise::commands::run_step_loop;
use groupwise::{Campaign, CampaignError, CampaignStore, Status};
use groupwise_core::policies::{PolicySpec, PolicyStage, SelectorSpec, SwitchCondition};
use groupwise_core::posterior::SmcConfig;
use groupwise_core::simulator::{run_simulation, NoiseSpec, RateSpec, SessionConfig, SimulationConfig};

fn session_config(policy: &str, n: usize, k: usize, n_max: usize) -> SessionConfig {
    SessionConfig {
        n,
        q: RateSpec::Uniform(0.1),
        noise: NoiseSpec::constant(0.95, 0.8),
        k,
        n_max,
        policy: PolicySpec::preset(policy).unwrap(),
        assay: None,
        smc: SmcConfig {
            num_particles: 600,
            ..Default::default()
        },
        decoder: Default::default(),
        seed: 21,
    }
}

#[test]
fn campaign_fed_simulated_outcomes_matches_simulator() {
    for policy in ["g_mimax", "random", "dorfman"] {
        let mut cfg = SimulationConfig::new(vec![PolicySpec::preset(policy).unwrap()]);
        cfg.n = 16;
        cfg.k = 3;
        cfg.cycles = 3;
        cfg.n_max = 5;
        cfg.q = RateSpec::Uniform(0.1);
        cfg.smc.num_particles = 500;
        cfg.seed = 77;
        let traj = run_simulation(&cfg, 0, 0).unwrap();
        let mut c = Campaign::create("sim", cfg.session(0).unwrap(), Utc::now()).unwrap();
        for rec in &traj.cycles {
            let p = c.propose().unwrap();
            assert_eq!(p.groups, rec.groups, "{policy} cycle {}", rec.cycle);
            c.submit(&rec.outcomes).unwrap();
            let same = c.marginal().iter().zip(&rec.marginal).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{policy} cycle {} marginal differs", rec.cycle);
        }
    }
}

/// Brute-force posterior marginals of independent Bernoulli(q) individuals
/// after tests `(members, outcome)` with constant noise.
fn exact_marginal(n: usize, q: f64, spec: f64, sens: f64, tests: &[(Vec<usize>, bool)]) -> Vec<f64> {
    let mut num = vec![0.0; n];
    let mut z = 0.0;
    for x in 0..(1u32 << n) {
        let mut w = 1.0;
        for i in 0..n {
            w *= if x >> i & 1 == 1 { q } else { 1.0 - q };
        }
        for (members, y) in tests {
            let infected = members.iter().any(|&i| x >> i & 1 == 1);
            let p_pos = if infected { sens } else { 1.0 - spec };
            w *= if *y { p_pos } else { 1.0 - p_pos };
        }
        z += w;
        for (i, v) in num.iter_mut().enumerate() {
            if x >> i & 1 == 1 {
                *v += w;
            }
        }
    }
    num.iter().map(|v| v / z).collect()
}

#[test]
fn all_negative_outcomes_on_a_toy_campaign() {
    let cfg = session_config("g_mimax", 3, 1, 3);
    let mut c = Campaign::create("toy", cfg, Utc::now()).unwrap();
    let p = c.propose().unwrap();
    assert_eq!(p.groups.len(), 1);
    c.submit(&[false]).unwrap();
    let exact = exact_marginal(3, 0.1, 0.95, 0.8, &[(p.groups[0].clone(), false)]);
    for i in 0..3 {
        assert!((c.marginal()[i] - exact[i]).abs() < 1e-9);
        if p.groups[0].contains(&i) {
            assert!(c.marginal()[i] < 0.1);
        }
    }
}

#[test]
fn contradictory_outcomes_flag_the_campaign() {
    // A fixed first batch, then a design stage so a particle posterior is kept.
    let policy = PolicySpec {
        name: "nested_then_mimax".into(),
        stages: vec![
            PolicyStage {
                selector: SelectorSpec::FixedAssay {
                    path: None,
                    groups: Some(vec![vec![0, 1], vec![0]]),
                },
                until: SwitchCondition::Exhausted,
            },
            PolicyStage {
                selector: SelectorSpec::GMimax { forward: 3, backward: 2 },
                until: SwitchCondition::Forever,
            },
        ],
    };
    let mut cfg = session_config("g_mimax", 4, 2, 4);
    cfg.policy = policy;
    cfg.noise = NoiseSpec::constant(1.0, 1.0);
    let mut c = Campaign::create("noiseless", cfg, Utc::now()).unwrap();
    let p = c.propose().unwrap();
    assert_eq!(p.groups, [vec![0, 1], vec![0]]);
    let before = c.events().to_vec();
    // {0, 1} negative but {0} positive cannot happen without noise.
    let r = c.submit(&[false, true]);
    assert!(matches!(r, Err(CampaignError::Degenerate(_))), "{r:?}");
    assert!(c.flag().is_some());
    assert_eq!(c.status(), Status::AwaitingResults);
    assert_eq!(c.events(), &before[..]);
    assert_eq!(c.marginal(), &[0.1; 4]);
    c.submit(&[true, true]).unwrap();
    assert!(c.flag().is_none());
    assert!(c.marginal()[0] > 0.99);
}

#[test]
fn step_loop_drives_a_stored_campaign() {
    let dir = tempfile::tempdir().unwrap();
    let store = CampaignStore::open(dir.path()).unwrap();
    store.create(Some("s".into()), session_config("individual", 3, 2, 2)).unwrap();
    let input = "1 0 0\nbogus\n10\n0\n";
    let mut out = Vec::new();
    run_step_loop(&store, "s", input.as_bytes(), &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains("expected 2 outcomes, got 3"), "{text}");
    assert!(text.contains("cannot read \"bogus\""), "{text}");
    assert!(text.contains("exhausted after 3 tests"), "{text}");
    let view = store.view("s").unwrap();
    assert_eq!(view.status, Status::Exhausted);
    assert_eq!(view.tests_used, 3);

    // Reopening replays the same log.
    let again = CampaignStore::open(dir.path()).unwrap();
    assert_eq!(*again.view("s").unwrap(), *view);
}
