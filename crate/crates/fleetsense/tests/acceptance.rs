//! End-to-end acceptance checks. Each test prints one PASS/FAIL line so a
//! full run reads as a checklist; tolerances are pinned in the asserts.

use std::collections::HashMap;

use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use fleetsense::baselines::{run_episode, FleetController};
use fleetsense::config::ExperimentConfig;
use fleetsense::env::{Action, Env, Event};
use fleetsense::graph::{build_graph, FeatureBounds, NodeType, Rgcn, RgcnConfig};
use fleetsense::harness::{metrics_csv, run_simulate, EpisodeRow};
use fleetsense::mappo::{
    collect_rollout, compute_gae, evaluate, mean_std, ppo_forward, train, PolicyModel, TrainConfig,
};
use fleetsense::nn::{seeded_rng, stage_params, Tape};
use fleetsense::ranktuner::TunerState;
use fleetsense::sensing::{data_utility, DistributionTag, RankModel, TaskSpec};

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!("acceptance {criterion}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "acceptance {criterion} failed: {detail}");
}

fn desk_toml(policy: &str) -> String {
    format!(
        r#"
policy = "{policy}"
episodes = 1
seeds = [0]
output_dir = "unused"

[env]
rows = 4
cols = 4
num_vehicles = 10
horizon = 200
alpha = 0.5
beta = 0.5

[env.demand]
rate = 0.25
seed = 11

[env.pois]
distribution = "divergent"
total_per_task = 1.5
seed = 12
"#
    )
}

fn desk_config(policy: &str, overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml(&desk_toml(policy), &overrides).unwrap()
}

fn desk_env(overrides: &[&str], tag: DistributionTag) -> Env {
    Env::new(desk_config("random", overrides).build_env_config(tag).unwrap()).unwrap()
}

/// Criterion 1: recomputed alpha*ADI + beta*ADU equals reported QoS
/// within 1e-9 relative, on every episode of several configurations.
#[test]
fn criterion_01_qos_identity() {
    let mut worst: f64 = 0.0;
    for (alpha, beta, seed) in [(0.5, 0.5, 1u64), (0.2, 0.8, 2), (1.0, 0.0, 3), (0.0, 1.0, 4)] {
        let overrides = [format!("env.alpha={alpha}"), format!("env.beta={beta}")];
        let refs: Vec<&str> = overrides.iter().map(String::as_str).collect();
        let mut env = desk_env(&refs, DistributionTag::Divergent);
        let mut controller = FleetController::Random;
        let mut rng = seeded_rng(seed);
        let m = run_episode(&mut env, &mut controller, seed, &mut rng).unwrap();
        let recomputed = alpha * m.adi + beta * m.adu;
        let reported = m.qos(alpha, beta);
        let scale = reported.abs().max(1.0);
        worst = worst.max((recomputed - reported).abs() / scale);
    }
    verdict("1 QoS identity", worst <= 1e-9, &format!("max rel err {worst:.3e}"));
}

/// Criterion 2: 200-slot random run with 20 vehicles on a 4x4 grid —
/// exactly one action per available agent per slot, single-claim on
/// orders and PoIs, and the 15-slot order expiry, all violation-free.
#[test]
fn criterion_02_constraint_audit() {
    let mut env = desk_env(&["env.num_vehicles=20"], DistributionTag::Divergent);
    env.enable_event_log();
    env.reset(77).unwrap();
    let mut rng = seeded_rng(77);
    let mut action_violations = 0u64;
    while !env.done() {
        let available = env.available_agents();
        let mut actions: Vec<Option<Action>> = vec![None; env.config.num_vehicles];
        for &a in &available {
            let mask = env.legal_mask(a).unwrap();
            let legal: Vec<usize> =
                mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
            actions[a] = Some(env.action_from_index(a, legal[rng.gen_range(0..legal.len())]));
        }
        // exactly one action per available agent, none for busy agents
        let supplied = actions.iter().filter(|a| a.is_some()).count();
        if supplied != available.len() {
            action_violations += 1;
        }
        env.step(&actions).unwrap();
    }
    let events = env.events.clone().unwrap();
    let mut order_created: HashMap<u64, u64> = HashMap::new();
    let mut order_claims: HashMap<u64, u64> = HashMap::new();
    let mut poi_claims: HashMap<u64, u64> = HashMap::new();
    let mut expiry_violations = 0u64;
    for event in &events {
        match event {
            Event::OrderNew { slot, id, .. } => {
                order_created.insert(*id, *slot);
            }
            Event::OrderServed { slot, id, .. } => {
                *order_claims.entry(*id).or_default() += 1;
                let created = order_created[id];
                if *slot < created || *slot >= created + 15 {
                    expiry_violations += 1;
                }
            }
            Event::PoiCollected { id, .. } => {
                *poi_claims.entry(*id).or_default() += 1;
            }
            _ => {}
        }
    }
    let double_orders = order_claims.values().filter(|&&n| n > 1).count();
    let double_pois = poi_claims.values().filter(|&&n| n > 1).count();
    let ok = action_violations == 0
        && double_orders == 0
        && double_pois == 0
        && expiry_violations == 0
        && !order_claims.is_empty()
        && !poi_claims.is_empty();
    verdict(
        "2 constraint audit",
        ok,
        &format!(
            "action={action_violations} double_order={double_orders} double_poi={double_pois} \
             expiry={expiry_violations} served={} collected={}",
            order_claims.len(),
            poi_claims.len()
        ),
    );
}

/// Criterion 3: the rank lookup reproduces all six published rows.
#[test]
fn criterion_03_rank_table_fidelity() {
    let model = RankModel::default();
    let expected = [
        (1u32, 1.00, 0.70),
        (2, 1.45, 0.76),
        (3, 3.71, 0.98),
        (4, 5.05, 0.99),
        (5, 6.00, 0.99365),
        (6, 5.31, 1.00),
    ];
    let mut ok = true;
    for (rank, time, acc) in expected {
        let (t, a) = model.lookup(rank).unwrap();
        ok &= t == time && a == acc;
    }
    ok &= model.lookup(0).is_err() && model.lookup(7).is_err();
    verdict("3 rank table fidelity", ok, "six rows exact, out-of-range rejected");
}

/// Criterion 4: on a stationary episode, an exhaustive per-rank oracle
/// picks the best rank; RankTuner's modal rank over its last 50 episodes
/// lands within one of it.
#[test]
fn criterion_04_ranktuner_oracle() {
    let fixed_seed = 4242u64;
    // moderately scarce PoIs: low ranks are supply-limited (utility tracks
    // accuracy), high ranks time-limited — a unimodal trade-off
    let run_at_rank = |rank: u32| {
        let mut env = desk_env(&["env.pois.total_per_task=0.5"], DistributionTag::Divergent);
        env.set_rank(rank).unwrap();
        let mut controller = FleetController::GreedyFt;
        // fresh rng per episode: the landscape seen by the tuner is
        // exactly the oracle's
        let mut rng = seeded_rng(7);
        run_episode(&mut env, &mut controller, fixed_seed, &mut rng).unwrap().adu
    };
    let mut oracle = (0u32, f64::NEG_INFINITY);
    for rank in 1..=6 {
        let adu = run_at_rank(rank);
        if adu > oracle.1 {
            oracle = (rank, adu);
        }
    }
    let mut tuner = TunerState::new(1, 1, 1, 6);
    for _ in 0..120 {
        let adu = run_at_rank(tuner.rank);
        tuner.ranktuner_step(adu);
    }
    let modal = tuner.modal_rank(50).unwrap();
    let ok = modal.abs_diff(oracle.0) <= 1;
    verdict(
        "4 ranktuner oracle",
        ok,
        &format!("oracle rank {} modal rank {modal} (published claim holds iff oracle = 3)", oracle.0),
    );
}

/// One-sided Welch p-value for mean(a) > mean(b).
fn welch_p_greater(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let va = sa * sa * na / (na - 1.0);
    let vb = sb * sb * nb / (nb - 1.0);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).unwrap();
    1.0 - dist.cdf(t)
}

/// Criterion 5: order-first beats collect-first on income, and vice
/// versa on data utility, each at one-sided Welch p < 0.05 over 10 seeds.
#[test]
fn criterion_05_baseline_ordering() {
    let mut adi = HashMap::new();
    let mut adu = HashMap::new();
    for name in ["os", "ft"] {
        let mut adis = Vec::new();
        let mut adus = Vec::new();
        for seed in 0..10u64 {
            let mut env = desk_env(&[], DistributionTag::Divergent);
            let mut controller =
                if name == "os" { FleetController::GreedyOs } else { FleetController::GreedyFt };
            let mut rng = seeded_rng(seed ^ 0xba5e);
            let m = run_episode(&mut env, &mut controller, seed, &mut rng).unwrap();
            adis.push(m.adi);
            adus.push(m.adu);
        }
        adi.insert(name, adis);
        adu.insert(name, adus);
    }
    let p_adi = welch_p_greater(&adi["os"], &adi["ft"]);
    let p_adu = welch_p_greater(&adu["ft"], &adu["os"]);
    let ok = p_adi < 0.05 && p_adu < 0.05;
    verdict(
        "5 baseline ordering",
        ok,
        &format!(
            "ADI os {:.0} > ft {:.0} (p={p_adi:.2e}); ADU ft {:.1} > os {:.1} (p={p_adu:.2e})",
            mean_std(&adi["os"]).0,
            mean_std(&adi["ft"]).0,
            mean_std(&adu["ft"]).0,
            mean_std(&adu["os"]).0,
        ),
    );
}

/// Criterion 7: analytic gradients of the PPO loss through the graph
/// encoder and heads match central finite differences.
#[test]
fn criterion_07_gradient_oracle() {
    let config = desk_config("mappo", &["env.rows=2", "env.cols=2", "env.num_vehicles=2", "env.horizon=20"]);
    let mut env = Env::new(config.build_env_config(DistributionTag::Divergent).unwrap()).unwrap();
    let train = TrainConfig {
        rgcn: RgcnConfig { hidden: 2, output: 2 },
        mlp_hidden: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut model = PolicyModel::new(&env.config, &train);
    let total_params: usize =
        model.param_names().iter().map(|n| model.store.get(n).data.len()).sum();
    assert!(total_params <= 500, "model too large for the oracle: {total_params}");

    let bounds = FeatureBounds::from_env(&env);
    let mut rng = seeded_rng(5);
    let mut ep_seed = 0u64;
    env.reset(0).unwrap();
    let buffer = collect_rollout(&mut env, &model, &bounds, 8, &mut rng, &mut ep_seed).unwrap();
    let (adv, ret) = compute_gae(&buffer, train.gamma, train.gae_lambda).unwrap();

    let mut fwd = ppo_forward(&model, &buffer, &adv, &ret, &train);
    fwd.tape.backward(fwd.loss);
    let analytic: Vec<(String, Vec<f64>)> = fwd
        .leaves
        .iter()
        .map(|(name, id)| (name.clone(), fwd.tape.grad(*id).to_vec()))
        .collect();

    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    for (name, grads) in &analytic {
        for i in 0..grads.len() {
            let orig = model.store.get(name).data[i];
            model.store.get_mut(name).data[i] = orig + h;
            let fp = ppo_forward(&model, &buffer, &adv, &ret, &train);
            let up = fp.tape.scalar_value(fp.loss);
            model.store.get_mut(name).data[i] = orig - h;
            let fm = ppo_forward(&model, &buffer, &adv, &ret, &train);
            let down = fm.tape.scalar_value(fm.loss);
            model.store.get_mut(name).data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = (grads[i].abs() + numeric.abs()).max(1e-8);
            max_rel = max_rel.max((grads[i] - numeric).abs() / denom);
        }
    }
    verdict(
        "7 gradient oracle",
        max_rel <= 1e-4,
        &format!("{total_params} params, max rel err {max_rel:.3e}"),
    );
}

/// Criterion 8: relabeling nodes within a type permutes the encoder
/// output rows exactly; 100 random trials.
#[test]
fn criterion_08_rgcn_equivariance() {
    let mut rng = seeded_rng(8);
    let mut max_diff: f64 = 0.0;
    for trial in 0..100u64 {
        let mut env = desk_env(&["env.num_vehicles=5"], DistributionTag::Uniform);
        env.reset(trial).unwrap();
        // random warm-up so orders and PoIs exist
        for _ in 0..5 {
            let avail = env.available_agents();
            let mut actions: Vec<Option<Action>> = vec![None; env.config.num_vehicles];
            for &a in &avail {
                let mask = env.legal_mask(a).unwrap();
                let legal: Vec<usize> =
                    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
                actions[a] = Some(env.action_from_index(a, legal[rng.gen_range(0..legal.len())]));
            }
            env.step(&actions).unwrap();
        }
        let bounds = FeatureBounds::from_env(&env);
        let graph = build_graph(&env, &bounds);
        let m = env.config.num_vehicles;
        let mut store = fleetsense::nn::ParamStore::new();
        let dims = Rgcn::input_dims(env.config.map.num_grids(), m, env.config.tasks.len());
        let rgcn = Rgcn::declare(&mut store, RgcnConfig { hidden: 8, output: 4 }, dims, &mut rng);
        let names = rgcn.param_names();

        let forward = |g: &fleetsense::graph::TopologyGraph| {
            let mut tape = Tape::new();
            let (leaves, _) = stage_params(&store, &mut tape, &names);
            let out = rgcn.forward(&mut tape, &leaves, g);
            tape.value(out).to_vec()
        };
        let base = forward(&graph);

        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut shuffled = graph.clone();
        shuffled.permute_type(NodeType::Vehicle, &perm);
        if shuffled.num_orders > 1 {
            let mut operm: Vec<usize> = (0..shuffled.num_orders).collect();
            for i in (1..operm.len()).rev() {
                operm.swap(i, rng.gen_range(0..=i));
            }
            shuffled.permute_type(NodeType::Order, &operm);
        }
        let out = forward(&shuffled);
        let width = base.len() / m;
        for (new_row, &old_row) in perm.iter().enumerate() {
            for j in 0..width {
                let d = (out[new_row * width + j] - base[old_row * width + j]).abs();
                max_diff = max_diff.max(d);
            }
        }
    }
    verdict("8 rgcn equivariance", max_diff <= 1e-9, &format!("100 trials, max diff {max_diff:.3e}"));
}

/// Criterion 9: utility is monotone in volume and staleness, bounded by
/// the ceiling, with exact values at the reference points.
#[test]
fn criterion_09_utility_monotonicity() {
    let model = RankModel::default();
    let tasks = TaskSpec::defaults();
    let mut rng = seeded_rng(9);
    let mut ok = true;
    for _ in 0..10_000 {
        let task = &tasks[rng.gen_range(0..tasks.len())];
        let d = rng.gen_range(0..=task.volume_ref * 2);
        let lam = rng.gen_range(0..=task.freshness_horizon * 2);
        let rank = rng.gen_range(1..=6);
        let u = data_utility(task, d, lam, rank, &model).unwrap();
        ok &= (0.0..=task.ceiling).contains(&u);
        let u_more_volume = data_utility(task, d + 1, lam, rank, &model).unwrap();
        ok &= u_more_volume >= u - 1e-12;
        let u_staler = data_utility(task, d, lam + 1, rank, &model).unwrap();
        ok &= u_staler <= u + 1e-12;
    }
    for task in &tasks {
        let (_, acc) = model.lookup(6).unwrap();
        let fresh_full = data_utility(task, task.volume_ref, 0, 6, &model).unwrap();
        // F(0) = 1 and V(volume_ref) = 1 exactly
        ok &= (fresh_full - task.ceiling * acc).abs() < 1e-12;
    }
    verdict("9 utility monotonicity", ok, "10^4 triples, bounds and reference points");
}

/// Criterion 11: identical (config, seed) yields byte-identical metrics
/// CSVs. Wall-clock timing is the one measured (non-derivable) column,
/// so the comparison strips it; everything else must match exactly.
#[test]
fn criterion_11_reproducibility() {
    let config = desk_config("mab", &["episodes=3"]);
    let strip_wall = |rows: &[EpisodeRow]| {
        let csv = metrics_csv(&config.hash(), 5, "mab", "divergent", 0.5, 0.5, rows);
        csv.lines()
            .map(|l| {
                if l.starts_with('#') || l.starts_with("episode") {
                    l.to_string()
                } else {
                    l.rsplit_once(',').unwrap().0.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let (a, _) = run_simulate(&config, DistributionTag::Divergent, 5).unwrap();
    let (b, _) = run_simulate(&config, DistributionTag::Divergent, 5).unwrap();
    let (a, b) = (strip_wall(&a), strip_wall(&b));
    verdict("11 reproducibility", a == b, &format!("{} bytes compared", a.len()));
}

/// Criteria 6 and 10 share the trained models. 6: the trained policy
/// clears 1.15x Random and the better greedy on at least 3 of 5 seeds.
/// 10: sign test of Aligned vs Divergent evaluation QoS (report-only).
#[test]
fn criterion_06_learning_and_10_distribution_robustness() {
    let overrides = ["env.alpha=0.066", "env.beta=0.934", "env.collect_rate=4"];
    let config = desk_config("mappo", &overrides);
    let env_config = config.build_env_config(DistributionTag::Divergent).unwrap();
    let (alpha, beta) = (env_config.alpha, env_config.beta);

    // baseline reference levels over 20 episodes each
    let mut reference = HashMap::new();
    for (name, which) in [("random", 0usize), ("greedy_os", 1), ("greedy_ft", 2)] {
        let mut qos = Vec::new();
        let mut env = Env::new(env_config.clone()).unwrap();
        let mut controller = match which {
            0 => FleetController::Random,
            1 => FleetController::GreedyOs,
            _ => FleetController::GreedyFt,
        };
        let mut rng = seeded_rng(0xbead);
        for e in 0..20u64 {
            let m = run_episode(&mut env, &mut controller, 90_000 + e, &mut rng).unwrap();
            qos.push(m.qos(alpha, beta));
        }
        reference.insert(name, mean_std(&qos).0);
    }
    let random_bar = 1.15 * reference["random"];
    let greedy_bar = reference["greedy_os"].max(reference["greedy_ft"]);

    let train_config = TrainConfig {
        rgcn: RgcnConfig { hidden: 32, output: 10 },
        mlp_hidden: 32,
        episodes: 220,
        ..TrainConfig::default()
    };
    let mut wins = 0;
    let mut sign_aligned = 0;
    let mut details = Vec::new();
    for seed in 0..5u64 {
        let mut env = Env::new(env_config.clone()).unwrap();
        let mut tc = train_config.clone();
        tc.seed = seed;
        let model = train(&mut env, &tc, |_, _, _| {}).unwrap();

        let eval_qos = |tag: DistributionTag, model: &PolicyModel| {
            let mut env =
                Env::new(config.build_env_config(tag).unwrap()).unwrap();
            let ms = evaluate(&mut env, model, 20, 55_000 + seed).unwrap();
            mean_std(&ms.iter().map(|m| m.qos(alpha, beta)).collect::<Vec<_>>()).0
        };
        let divergent = eval_qos(DistributionTag::Divergent, &model);
        let aligned = eval_qos(DistributionTag::Aligned, &model);
        if divergent >= random_bar && divergent >= greedy_bar {
            wins += 1;
        }
        if aligned >= divergent {
            sign_aligned += 1;
        }
        details.push(format!("seed {seed}: div {divergent:.1} ali {aligned:.1}"));
    }
    let detail = format!(
        "bars: 1.15x random {random_bar:.1}, best greedy {greedy_bar:.1}; {}",
        details.join("; ")
    );
    verdict("6 learning check", wins >= 3, &format!("{wins}/5 seeds cleared; {detail}"));

    // report-only sign test: a desk-scale miss is documented, not failed
    println!(
        "acceptance 10 distribution robustness: {} ({sign_aligned}/5 seeds aligned >= divergent)",
        if sign_aligned >= 3 { "PASS" } else { "REPORT-ONLY MISS" }
    );
}
