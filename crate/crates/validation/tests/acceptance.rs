//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits with status 1 if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use drlmcts::agent::{
    actor_loss_and_grad, critic_loss_and_grad, detect_greedy_drl, self_play_episode, state_value_loss_and_grad,
    AgentDims, AgentNets, Episode, TrainConfig, Trainer,
};
use drlmcts::baseline::detect_ml;
use drlmcts::bench::{draw_instance, measure_runtime, run_sweep, DetectorSpec, Scenario, Sweep};
use drlmcts::drl_mcts::{detect_drl_mcts, detect_drl_mcts_with_stats, DrlMctsConfig};
use drlmcts::mcts::{detect_mcts, MctsConfig};
use drlmcts::signal::{path_metric, stream_rng, Constellation, RealSystem};
use rand::Rng;

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, n: usize, name: &str, pass: bool, detail: String) {
        println!("{} criterion {n} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(n);
        }
    }
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn constellations() -> [Constellation; 2] {
    [Constellation::bpsk(), Constellation::qpsk()]
}

fn oracle_equivalence(report: &mut Report) {
    let start = Instant::now();
    let mut rng = stream_rng(101, 0);
    let mut mismatches = 0;
    let total = 2000;
    for i in 0..total {
        let n = [2, 4][i % 2];
        let c = &constellations()[(i / 2) % 2];
        let snr = [0.0, 6.0, 12.0][(i / 4) % 3];
        let sys = common::random_system(&mut rng, n, n, c, snr);
        if detect_ml(&sys).unwrap() != common::exhaustive_argmin(&sys, common::reduced_metric) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report.line(
        1,
        "pruned ML equals exhaustive search",
        mismatches == 0 && secs < 60.0,
        format!("{mismatches} mismatches in {total} instances, {secs:.1} s"),
    );
}

fn metric_identity(report: &mut Report) {
    let mut rng = stream_rng(102, 0);
    let (mut worst, mut argmin_diffs) = (0.0f64, 0);
    let total = 500;
    for _ in 0..total {
        let c = &constellations()[rng.random_range(0..2)];
        let max_nt = if c.is_real() { 8 } else { 4 };
        let n_t = rng.random_range(1..=max_nt);
        let n_r = rng.random_range(n_t..=n_t + 2);
        let snr = rng.random_range(-5.0..20.0);
        let sys = common::random_system(&mut rng, n_t, n_r, c, snr);
        for x in common::all_vectors(c.pam_levels(), sys.m()) {
            let d = path_metric(&sys, &x).unwrap();
            worst = worst.max((d - common::reduced_metric(&sys, &x)).abs());
        }
        let a = common::exhaustive_argmin(&sys, common::reduced_metric);
        let b = common::exhaustive_argmin(&sys, common::received_metric);
        argmin_diffs += usize::from(a != b);
    }
    report.line(
        2,
        "metric identity",
        worst <= 1e-9 && argmin_diffs == 0,
        format!("max |d - ||y-Rx||²| = {worst:.2e}, {argmin_diffs} argmin disagreements in {total} instances"),
    );
}

fn gradient_batch(c: &Constellation, nets: &AgentNets, seed: u64) -> Vec<Episode> {
    let mut rng = stream_rng(seed, 0);
    (0..6)
        .map(|i| {
            let sys = common::random_system(&mut rng, 2, 2, c, [0.0, 6.0, 12.0][i % 3]);
            self_play_episode(&sys, nets, &mut rng).unwrap()
        })
        .collect()
}

fn gradient_suite(report: &mut Report) {
    let start = Instant::now();
    let (mut checked, mut failures, mut straddling, mut worst) = (0, 0, 0, 0.0f64);
    let mut tally = |g: common::GradCheck| {
        checked += g.checked;
        failures += g.failures;
        straddling += g.straddling;
        worst = worst.max(g.worst_excess);
    };
    let (h, rel, abs) = (1e-5, 1e-4, 1e-7);
    for c in [Constellation::bpsk(), Constellation::qpsk(), Constellation::qam16()] {
        for seed in 0..3 {
            let dims = AgentDims::new(2, 2, &c);
            let nets = AgentNets::new(dims, 40 + seed);
            let cfg = TrainConfig::for_receive_dim(dims.n);
            let data = gradient_batch(&c, &nets, seed);

            let g = critic_loss_and_grad(&data, &nets, &cfg).unwrap().grads;
            tally(common::check_gradients(
                &nets.critic,
                &g,
                &common::state_inputs(&data),
                |p| common::critic_loss(&data, &AgentNets { critic: p.clone(), ..nets.clone() }, &nets.critic, &cfg),
                h,
                rel,
                abs,
            ));
            let g = actor_loss_and_grad(&data, &nets, &cfg).unwrap().grads;
            tally(common::check_gradients(
                &nets.actor,
                &g,
                &common::state_inputs(&data),
                |p| common::actor_loss(&data, &AgentNets { actor: p.clone(), ..nets.clone() }, &nets.critic, &cfg),
                h,
                rel,
                abs,
            ));
            let g = state_value_loss_and_grad(&data, &nets, &cfg).unwrap().grads;
            tally(common::check_gradients(
                &nets.state_value,
                &g,
                &common::state_value_inputs(&data, &nets.actor),
                |p| {
                    let probe = AgentNets { state_value: p.clone(), ..nets.clone() };
                    common::state_value_loss(&data, &probe, &nets.actor, &cfg)
                },
                h,
                rel,
                abs,
            ));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report.line(
        3,
        "loss gradients match finite differences",
        failures == 0 && straddling * 100 < checked && secs < 300.0,
        format!(
            "{failures} of {checked} parameters outside tolerance (worst {worst:.2} of allowed), \
             {straddling} skipped at a ReLU kink, {secs:.1} s"
        ),
    );
}

fn mcts_sanity(report: &mut Report) {
    let c = Constellation::bpsk();
    let mut rng = stream_rng(104, 0);
    let mut agree = 0;
    for i in 0..200 {
        let sys = common::random_system(&mut rng, 2, 2, &c, 12.0);
        let cfg = MctsConfig { c_uct: 0.0, playouts_initial: 500, beta_p: 0.95, rng_seed: i };
        agree += usize::from(detect_mcts(&sys, &cfg).unwrap() == detect_ml(&sys).unwrap());
    }
    let oracle_ok = agree >= 190;

    let mut sc = Scenario::load(&scenario_path("bpsk_8x8.txt")).unwrap();
    sc.detectors = [5, 20, 200]
        .iter()
        .map(|&p| DetectorSpec::Mcts { c_uct: 350.0, playouts: p, beta_p: 0.95 })
        .collect();
    let sweep = run_sweep(&sc, None).unwrap();
    let mut violations = Vec::new();
    let mut table = Vec::new();
    for &snr in &sc.snr_grid_db {
        let e: Vec<usize> = ["mcts-5", "mcts-20", "mcts-200"]
            .iter()
            .map(|d| sweep.get(d, snr).unwrap().symbol_errors)
            .collect();
        if !(e[0] >= e[1] && e[1] >= e[2]) {
            violations.push(snr);
        }
        table.push(format!("{snr}dB {}/{}/{}", e[0], e[1], e[2]));
    }
    report.line(
        4,
        "MCTS sanity",
        oracle_ok && violations.is_empty(),
        format!(
            "c_uct=0 agrees with ML on {agree}/200 (need 190); 8x8 errors for 5/20/200 playouts: {}; \
             monotonicity violations at {violations:?}",
            table.join(", ")
        ),
    );
}

fn degeneracy(report: &mut Report, trained: &AgentNets, sc: &Scenario) {
    let cfg = DrlMctsConfig::new(0.5, 1, sc.train.reward_scale);
    let channel = sc.base_channel().unwrap();
    let mut differ = 0;
    for trial in 0..1000 {
        let sys = draw_instance(sc, &channel, trial % sc.snr_grid_db.len(), trial).unwrap().sys;
        differ += usize::from(detect_drl_mcts(&sys, trained, &cfg).unwrap() != detect_greedy_drl(&sys, trained).unwrap());
    }
    let mut rng = stream_rng(105, 0);
    for i in 0..1000u64 {
        let c = &[Constellation::bpsk(), Constellation::qpsk(), Constellation::qam16()][(i % 3) as usize];
        let sys = common::random_system(&mut rng, 3, 3, c, 8.0);
        let nets = AgentNets::new(AgentDims::of_system(&sys, 3), i);
        let cfg = DrlMctsConfig::new(20.0, 1, 1.0 / 6.0);
        differ += usize::from(detect_drl_mcts(&sys, &nets, &cfg).unwrap() != detect_greedy_drl(&sys, &nets).unwrap());
    }
    report.line(
        5,
        "one playout equals greedy DRL",
        differ == 0,
        format!("{differ} differences in 1000 trained + 1000 untrained instances"),
    );
}

fn train(sc: &Scenario) -> (AgentNets, f64) {
    let start = Instant::now();
    let mut trainer = Trainer::new(sc.train.clone(), sc.training_scenario().unwrap()).unwrap();
    for _ in 0..sc.train.total_updates {
        trainer.run_update().unwrap();
    }
    (trainer.into_nets(), start.elapsed().as_secs_f64())
}

fn headline(report: &mut Report, sc: &Scenario, nets: &AgentNets, train_secs: f64) -> Sweep {
    let sweep = run_sweep(sc, Some(nets)).unwrap();
    let mut bad = Vec::new();
    let mut table = Vec::new();
    for &snr in &sc.snr_grid_db {
        let e = |d: &str| sweep.get(d, snr).unwrap().symbol_errors;
        let (dm, m, g) = (e("drl_mcts-20"), e("mcts-200"), e("drl"));
        if !(dm < m && dm < g) {
            bad.push(snr);
        }
        table.push(format!("{snr}dB {dm}/{m}/{g}"));
    }
    report.line(
        6,
        "DRL-MCTS-20 beats MCTS-200 and greedy DRL",
        bad.is_empty() && train_secs < 7200.0,
        format!(
            "4x4 BPSK, {} trials, trained in {train_secs:.0} s; errors drl_mcts-20/mcts-200/drl: {}; failing at {bad:?}",
            sc.trials,
            table.join(", ")
        ),
    );
    sweep
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn runtime_trends(report: &mut Report, sc: &Scenario, nets: &AgentNets) {
    let channel = sc.base_channel().unwrap();
    let mcts = MctsConfig { c_uct: 350.0, playouts_initial: 200, beta_p: 0.95, rng_seed: 0 };
    let drl = DrlMctsConfig::new(0.5, 20, sc.train.reward_scale);
    let (mut t_mcts, mut t_drl, mut evals) = (Vec::new(), Vec::new(), Vec::new());
    for (i, _) in sc.snr_grid_db.iter().enumerate() {
        let systems: Vec<RealSystem> = (0..300).map(|t| draw_instance(sc, &channel, i, t).unwrap().sys).collect();
        t_mcts.push(median((0..5).map(|_| measure_runtime(|s| detect_mcts(s, &mcts), &systems).unwrap()).collect()));
        t_drl.push(median(
            (0..5).map(|_| measure_runtime(|s| detect_drl_mcts(s, nets, &drl), &systems).unwrap()).collect(),
        ));
        let count: usize = systems.iter().map(|s| detect_drl_mcts_with_stats(s, nets, &drl).unwrap().1.policy).sum();
        evals.push(count as f64 / systems.len() as f64);
    }
    let at10 = sc.snr_grid_db.iter().position(|&s| s == 10.0).unwrap();
    let ratio = t_drl[at10] / t_mcts[at10];
    let flat = t_mcts.iter().cloned().fold(0.0, f64::max) / t_mcts.iter().cloned().fold(f64::INFINITY, f64::min);
    let rho = common::spearman(&sc.snr_grid_db, &t_drl);
    let us = |v: &[f64]| v.iter().map(|t| format!("{:.0}", t * 1e6)).collect::<Vec<_>>().join("/");
    report.line(
        7,
        "runtime trends",
        ratio < 1.0 && flat < 1.1 && rho < 0.0,
        format!(
            "DRL-MCTS-20/MCTS-200 at 10 dB = {ratio:.2} (need < 1); MCTS max/min = {flat:.3} (need < 1.1); \
             DRL-MCTS Spearman vs SNR = {rho:.2} (need < 0); µs MCTS {} DRL-MCTS {}; network calls per detection {}",
            us(&t_mcts),
            us(&t_drl),
            evals.iter().map(|e| format!("{e:.2}")).collect::<Vec<_>>().join("/")
        ),
    );
}

fn determinism(report: &mut Report, sc: &Scenario, nets: &AgentNets) {
    let mut small = sc.clone();
    small.train.total_updates = 25;
    small.train.episodes_per_update = 32;
    let a = train(&small).0.to_bytes();
    let b = train(&small).0.to_bytes();

    small.trials = 500;
    let counts = || {
        run_sweep(&small, Some(nets))
            .unwrap()
            .results
            .into_iter()
            .map(|r| (r.detector, r.snr_db.to_bits(), r.symbol_errors))
            .collect::<Vec<_>>()
    };
    let (first, second) = (counts(), counts());
    report.line(
        8,
        "determinism",
        a == b && first == second,
        format!(
            "checkpoints after 25 updates identical: {}; {} SER counts identical: {}",
            a == b,
            first.len(),
            first == second
        ),
    );
}

fn round_trip(report: &mut Report, nets: &AgentNets) {
    let path = std::env::temp_dir().join(format!("drlmcts-acceptance-{}.ckpt", std::process::id()));
    nets.save(&path).unwrap();
    let loaded = AgentNets::load(&path).unwrap();
    let _ = std::fs::remove_file(&path);
    let mut rng = stream_rng(109, 0);
    let mut differ = 0;
    for _ in 0..100 {
        let s: Vec<f64> = (0..nets.state_len()).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v: Vec<f64> = (0..nets.state_len() + nets.actions()).map(|_| rng.random_range(-5.0..5.0)).collect();
        let pairs = [
            (nets.actor.predict(&s).unwrap(), loaded.actor.predict(&s).unwrap()),
            (nets.critic.predict(&s).unwrap(), loaded.critic.predict(&s).unwrap()),
            (nets.state_value.predict(&v).unwrap(), loaded.state_value.predict(&v).unwrap()),
        ];
        for (x, y) in pairs {
            differ += x.iter().zip(&y).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
        }
    }
    report.line(
        9,
        "checkpoint round trip",
        differ == 0,
        format!("{differ} outputs differ bitwise over 100 inputs × 3 networks"),
    );
}

fn main() {
    let mut report = Report { failed: Vec::new() };
    oracle_equivalence(&mut report);
    metric_identity(&mut report);
    gradient_suite(&mut report);
    mcts_sanity(&mut report);

    let sc = Scenario::load(&scenario_path("bpsk_4x4.txt")).unwrap();
    let (nets, train_secs) = train(&sc);
    degeneracy(&mut report, &nets, &sc);
    headline(&mut report, &sc, &nets, train_secs);
    runtime_trends(&mut report, &sc, &nets);
    determinism(&mut report, &sc, &nets);
    round_trip(&mut report, &nets);

    if report.failed.is_empty() {
        println!("acceptance: all 9 criteria passed");
    } else {
        println!("acceptance: criteria {:?} failed", report.failed);
        std::process::exit(1);
    }
}
