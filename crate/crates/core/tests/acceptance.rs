//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line to
//! the real stdout (bypassing the test harness capture) and the test fails if
//! any criterion does.
//!
//! The learning criteria train two desk-scale policies, so this target takes
//! several minutes on a single core.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tracklab::autodiff::{Graph, ParamSet, Tensor};
use tracklab::ddpg::{
    aux_graph, mix_schedule, soft_update, train, EpisodeRecord, MixConfig, ReplayBuffer, Source, TrainConfig, TrainOptions, TrainSetup,
    Trajectory, Transition, ACTOR_FILE, LOG_FILE,
};
use tracklab::env::EnvConfig;
use tracklab::eval::{metrics_oracle, read_log, run_scenario, step_scores, write_log, EvalPolicy, EvalSettings, MetricParams, Scenario};
use tracklab::gradcheck::{check_network, check_params, op_suite};
use tracklab::htg::{htg_policy, HtgParams, NoiseConfig};
use tracklab::nets::{ConvSpec, NetConfig};
use tracklab::observe::{ObsKind, Observation};
use tracklab::sim::{reward, ActionCommand, RelativeState, RewardParams};

const HAND_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(id: u32, title: &str, o: &Outcome) {
    let mut out = std::io::stdout().lock();
    let tag = if o.pass { "PASS" } else { "FAIL" };
    writeln!(out, "[{tag}] criterion {id}: {title} | {}", o.detail).unwrap();
}

fn scenario(s: &str) -> Scenario {
    s.parse().unwrap()
}

fn eval20() -> EvalSettings {
    EvalSettings {
        runs: 20,
        steps: 250,
        ..EvalSettings::default()
    }
}

fn htg_table() -> Outcome {
    let t = Instant::now();
    let sc = scenario("circular:3:3:0.01");
    let (clean, _) = run_scenario(&EvalPolicy::Htg, &sc, &eval20()).unwrap();
    let (noisy, _) = run_scenario(&EvalPolicy::HtgNoisy(NoiseConfig::default()), &sc, &eval20()).unwrap();
    let el = t.elapsed();
    let pass = clean.mean.p_v >= 0.95 && clean.mean.p_rho >= 0.85 && noisy.mean.p_theta < clean.mean.p_theta && el < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "htg p_v {:.4} (>= 0.95), p_rho {:.4} (>= 0.85); p_theta noisy {:.4} < clean {:.4}; {:.1}s (< 60s)",
            clean.mean.p_v,
            clean.mean.p_rho,
            noisy.mean.p_theta,
            clean.mean.p_theta,
            el.as_secs_f64()
        ),
    )
}

fn htg_speed_sweep() -> Outcome {
    let pcs: Vec<f64> = ["circular:3:3:0.01", "circular:5:5:0.01", "circular:8:8:0.01"]
        .iter()
        .map(|s| run_scenario(&EvalPolicy::Htg, &scenario(s), &eval20()).unwrap().0.mean.p_c)
        .collect();
    let pass = pcs.windows(2).all(|w| w[1] < w[0]);
    outcome(pass, format!("htg p_c (3,3) {:.4} > (5,5) {:.4} > (8,8) {:.4}", pcs[0], pcs[1], pcs[2]))
}

fn desk_setup(htg_seeding: bool) -> TrainSetup {
    TrainSetup {
        env: EnvConfig::default(),
        net: NetConfig::default().with_width(64),
        train: TrainConfig {
            workers: 4,
            episodes: 2000,
            htg_seeding,
            checkpoint_every: 0,
            ..TrainConfig::default()
        },
    }
}

fn actor_means(records: &[EpisodeRecord], n: usize) -> (f64, f64, usize) {
    let mut actor: Vec<&EpisodeRecord> = records.iter().filter(|r| r.source == Source::Actor).collect();
    actor.sort_by_key(|r| r.episode);
    let n = n.min(actor.len() / 2);
    let mean = |v: &[&EpisodeRecord]| v.iter().map(|r| r.mean_reward).sum::<f64>() / v.len() as f64;
    (mean(&actor[..n]), mean(&actor[actor.len() - n..]), n)
}

fn learning(seeded: &(TrainSetup, tracklab::ddpg::TrainOutcome, Duration)) -> Outcome {
    let (setup, out, el) = seeded;
    let policy = EvalPolicy::Learned {
        net: setup.net.clone(),
        actor: out.actor.clone(),
        name: "learned".into(),
    };
    let sc = scenario("circular:3:3:0.01");
    let (learned, _) = run_scenario(&policy, &sc, &eval20()).unwrap();
    let (random, _) = run_scenario(&EvalPolicy::Random, &sc, &eval20()).unwrap();
    let margin = learned.mean.p_c - random.mean.p_c;
    let pass = learned.mean.p_c >= 0.6 && learned.mean.p_v >= 0.8 && margin >= 0.5 && *el < Duration::from_secs(30 * 60);
    outcome(
        pass,
        format!(
            "learned p_c {:.4} (>= 0.6), p_v {:.4} (>= 0.8); random p_c {:.4}, margin {:.4} (>= 0.5); trained in {:.0}s (< 1800s)",
            learned.mean.p_c,
            learned.mean.p_v,
            random.mean.p_c,
            margin,
            el.as_secs_f64()
        ),
    )
}

fn learning_curve(seeded: &tracklab::ddpg::TrainOutcome, ablation: &tracklab::ddpg::TrainOutcome) -> Outcome {
    // Heuristic episodes score well from the start, so the curve is read on
    // the learned-policy episodes only.
    let (first, last, n) = actor_means(&seeded.records, 200);
    let (_, abl_last, _) = actor_means(&ablation.records, 200);
    let pass = last >= 3.0 * first && abl_last <= 0.5 * last;
    outcome(
        pass,
        format!(
            "seeded actor episodes: first {n} {first:.5}, last {n} {last:.5} (ratio {:.1} >= 3); no-HTG last 200 {abl_last:.5} (<= 0.5x seeded, ratio {:.3})",
            last / first.max(f64::MIN_POSITIVE),
            abl_last / last.max(f64::MIN_POSITIVE)
        ),
    )
}

fn small_raster() -> NetConfig {
    NetConfig {
        obs_kind: ObsKind::Raster,
        raster_width: 20,
        raster_height: 24,
        conv1: ConvSpec {
            channels: 4,
            kernel: 4,
            stride: 2,
        },
        conv2: ConvSpec {
            channels: 4,
            kernel: 3,
            stride: 2,
        },
        norm_groups: 2,
        ..NetConfig::default().with_width(5)
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let seeds = 10u64;
    let mut worst = (0.0f64, String::new());
    let mut note = |err: f64, what: String| {
        if err > worst.0 || worst.1.is_empty() {
            worst = (err.max(worst.0), what);
        }
    };
    let mut ops = 0;
    let (mut checked, mut kinks) = (0, 0);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in op_suite(&mut rng) {
            let r = check_params(&case.params, case.build, None, &mut rng).unwrap();
            note(r.max_rel_error, format!("op {} seed {seed}", case.name));
            (checked, kinks) = (checked + r.checked, kinks + r.kinks);
            ops += 1;
        }
        let nets = [("vector", NetConfig::default().with_width(6)), ("raster", small_raster())];
        for (kind, cfg) in &nets {
            for critic in [false, true] {
                let r = check_network(cfg, critic, seed, None).unwrap();
                let role = if critic { "critic" } else { "actor" };
                note(r.max_rel_error, format!("{kind} {role} seed {seed}"));
                (checked, kinks) = (checked + r.checked, kinks + r.kinks);
            }
        }
    }
    let el = t.elapsed();
    // probes that straddle a ReLU kink at every step size are skipped, and
    // must stay rare
    let pass = worst.0 < GRAD_TOL && kinks * 100 <= checked && el < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "{ops} op checks and 4 network variants over {seeds} seeds, {checked} elements ({kinks} skipped at kinks); max rel err {:.2e} at {} (< 1e-4); {:.1}s (< 60s)",
            worst.0,
            worst.1,
            el.as_secs_f64()
        ),
    )
}

fn hand_values() -> Outcome {
    let deg = f64::to_radians;
    let rel = |rho: f64, theta: f64| RelativeState { rho, theta };
    let mut errs: Vec<(&str, f64)> = Vec::new();

    let rp = RewardParams::default();
    for (r, want) in [(rel(50.0, 0.0), 0.1), (rel(70.0, 0.0), 0.0), (rel(60.0, deg(5.0)), 0.025)] {
        errs.push(("reward", (reward(&r, &rp) - want).abs()));
    }

    let hp = HtgParams::default();
    let cases = [(rel(50.0, 0.0), (0.0, 0.0)), (rel(50.0, deg(45.0)), (0.0, -1.0)), (rel(70.0, deg(5.0)), (1.0, -10.0 / 90.0))];
    for (r, (v, w)) in cases {
        let a: ActionCommand = htg_policy(&r, &hp);
        errs.push(("htg", (a.v - v).abs().max((a.w - w).abs())));
    }

    // two-step window: fit term averages squared errors over steps, temporal
    // term covers the single consecutive pair
    let mut g = Graph::<f64>::new();
    let e0 = g.constant(Tensor::matrix(1, 2, &[0.2, -0.1]).unwrap()).unwrap();
    let e1 = g.constant(Tensor::matrix(1, 2, &[0.5, 0.3]).unwrap()).unwrap();
    let ys = vec![Tensor::matrix(1, 2, &[0.0, 0.0]).unwrap(), Tensor::matrix(1, 2, &[0.4, 0.1]).unwrap()];
    let l = aux_graph(&mut g, &[e0, e1], &ys).unwrap();
    let want = ((0.04 + 0.01) + (0.01 + 0.04)) / 2.0 + (0.09 + 0.16);
    errs.push(("aux", (g.value(l).data()[0] - want).abs()));

    let mut online = ParamSet::<f64>::new();
    online.insert("w", Tensor::from_vec(vec![1.0, -2.0, 4.0]));
    let mut target = ParamSet::<f64>::new();
    target.insert("w", Tensor::from_vec(vec![0.0, 2.0, 4.0]));
    soft_update(&mut target, &online, 0.01).unwrap();
    let got = target.get("w").unwrap().data();
    let want = [0.01, 0.01 * -2.0 + 0.99 * 2.0, 4.0];
    errs.push(("soft update", got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)));

    let mp = MetricParams::default();
    for (r, want) in [
        (rel(50.0, 0.0), [1.0, 1.0, 1.0, 1.0]),
        (rel(200.0, 0.0), [0.0; 4]),
        (rel(125.0, deg(22.5)), [0.5, 0.5, 0.5, 1.0]),
    ] {
        let s = step_scores(&r, &mp);
        let got = [s.p_rho, s.p_theta, s.p_c, s.p_v];
        errs.push(("step scores", got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)));
    }

    let (name, worst) = errs.iter().fold(("", 0.0), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    let pass = worst <= HAND_TOL;
    let where_ = if name.is_empty() { String::new() } else { format!(" ({name})") };
    outcome(pass, format!("{} hand cases, max abs err {worst:.1e}{where_} (<= 1e-10)", errs.len()))
}

fn oracle() -> Outcome {
    let settings = EvalSettings {
        runs: 100,
        steps: 250,
        seed: 5,
        ..EvalSettings::default()
    };
    let mut checked = 0;
    let mut all = true;
    for policy in [EvalPolicy::Random, EvalPolicy::HtgNoisy(NoiseConfig::default())] {
        let sc = scenario("circular:5:5:0.01");
        let (streamed, log) = run_scenario(&policy, &sc, &settings).unwrap();
        let mut buf = Vec::new();
        write_log(&log, &mut buf).unwrap();
        let reread = read_log(buf.as_slice()).unwrap();
        let recomputed = metrics_oracle(&reread, &settings.metric, &sc.name, policy.name()).unwrap();
        let bits = |r: &tracklab::eval::RunReport| {
            let mut v: Vec<u64> = r.runs.iter().flat_map(|s| [s.mean.p_rho, s.mean.p_theta, s.mean.p_c, s.mean.p_v]).map(f64::to_bits).collect();
            v.extend([r.mean.p_rho, r.mean.p_theta, r.mean.p_c, r.mean.p_v].map(f64::to_bits));
            v
        };
        all &= streamed.runs.len() == 100 && bits(&streamed) == bits(&recomputed);
        checked += streamed.runs.len();
    }
    outcome(all, format!("{checked} runs (random and noisy htg) recomputed from JSONL logs, bit-identical: {all}"))
}

fn replay_and_schedule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let capacity = 40;
    let mut buf = ReplayBuffer::new(capacity);
    let mut next_id = 0usize;
    let (mut samples, mut crossings, mut over) = (0usize, 0usize, 0usize);
    let l = 5;
    while samples < 100_000 {
        for _ in 0..3 {
            // transition reward encodes (trajectory id, step)
            let len = rng.random_range(1..=80);
            let transitions = (0..len)
                .map(|k| Transition {
                    obs: Observation::features([0.0; 4]),
                    action: ActionCommand::new(0.0, 0.0),
                    reward: (next_id * 1000 + k) as f64,
                    next_obs: Observation::features([0.0; 4]),
                    true_rho: 0.0,
                    true_theta: 0.0,
                })
                .collect();
            let source = if next_id.is_multiple_of(5) { Source::Actor } else { Source::Htg };
            buf.push(Trajectory { source, transitions });
            next_id += 1;
            over += usize::from(buf.len() > capacity);
        }
        let Ok(batch) = buf.sample(64, l, &mut rng) else { continue };
        for w in &batch.windows {
            samples += 1;
            let id = w[0].reward as usize / 1000;
            let ok = w.len() == l && w.windows(2).all(|p| p[1].reward == p[0].reward + 1.0) && w.iter().all(|t| t.reward as usize / 1000 == id);
            crossings += usize::from(!ok);
        }
    }
    let mix = MixConfig::default();
    let n = 100_000u64;
    let actor = (0..n).filter(|&i| mix_schedule(i, &mix) == Source::Actor).count() as u64;
    let htg = n - actor;
    let pass = crossings == 0 && over == 0 && htg == 4 * actor;
    outcome(
        pass,
        format!("{samples} windows, {crossings} crossing a boundary; capacity exceeded {over} times; schedule over {n} episodes actor {actor} : htg {htg}"),
    )
}

fn determinism() -> Outcome {
    let setup = TrainSetup {
        env: EnvConfig::default(),
        net: NetConfig::default().with_width(12),
        train: TrainConfig {
            workers: 1,
            episodes: 10,
            batch_size: 16,
            checkpoint_every: 0,
            seed: 21,
            ..TrainConfig::default()
        },
    };
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut updates = 0;
    for d in &dirs {
        let opts = TrainOptions {
            out_dir: Some(d.path().to_path_buf()),
            ..TrainOptions::default()
        };
        updates = train(&setup, &opts).unwrap().updates;
    }
    let logs: Vec<Vec<u8>> = dirs.iter().map(|d| std::fs::read(d.path().join(LOG_FILE)).unwrap()).collect();
    let same_log = !logs[0].is_empty() && logs[0] == logs[1];

    let path = dirs[0].path().join(ACTOR_FILE);
    let bytes = std::fs::read(&path).unwrap();
    let (params, meta) = ParamSet::<f32>::from_bytes(&bytes).unwrap();
    let again = params.to_bytes(meta);
    let reload = ParamSet::<f32>::from_bytes(&again).unwrap().0;
    let bit_equal = |a: &ParamSet<f32>, b: &ParamSet<f32>| {
        a.same_layout(b) && a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
    };
    let round_trip = again == bytes && bit_equal(&params, &reload);
    outcome(
        same_log && round_trip && updates > 0,
        format!(
            "two single-worker runs ({updates} updates, {} log bytes) identical: {same_log}; weights file round trip bit-exact: {round_trip}",
            logs[0].len()
        ),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut run = |id: u32, title: &'static str, o: Outcome| {
        report(id, title, &o);
        results.push((id, title, o));
    };

    run(1, "heuristic tracker on the slow moving target", htg_table());
    run(2, "heuristic tracker degrades with target speed", htg_speed_sweep());
    run(5, "reverse-mode gradients match central differences", gradients());
    run(6, "hand-computed values", hand_values());
    run(7, "streaming metrics equal recomputation from logs", oracle());
    run(8, "replay windows and episode schedule", replay_and_schedule());
    run(9, "determinism and weights round trip", determinism());

    let train_timed = |setup: TrainSetup| {
        let t = Instant::now();
        let out = train(&setup, &TrainOptions::default()).unwrap();
        let el = t.elapsed();
        (setup, out, el)
    };
    let seeded = train_timed(desk_setup(true));
    run(3, "desk-scale learning beats the random baseline", learning(&seeded));
    let ablation = train_timed(desk_setup(false));
    run(4, "learning curve and heuristic-seeding ablation", learning_curve(&seeded.1, &ablation.1));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
