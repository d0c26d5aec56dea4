//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Run with `cargo test -p semnav --test acceptance --
//! --nocapture` to see the lines; criteria with runtime budgets serialize
//! through a global gate so timings are not distorted by concurrent tests.

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semnav::cost_model::{cost_forward, ArchConfig, CostField};
use semnav::gridworld::io::DemoItem;
use semnav::gridworld::{
    generate_environment, generate_expert_demo, sample_road_cell, ExpertOptions, GeneratorParams,
};
use semnav::learner::{
    demo_loss_and_grad, train, OptimizerKind, StepOptions, ThetaParams, TrainConfig,
};
use semnav::metrics::{evaluate, mhd, nll, rollout_success, EvalOptions};
use semnav::planner::{
    backward_astar, dijkstra_oracle, value_iteration_reference, Heuristic, NodeStatus, StopRule,
};
use semnav::semantic_map::{
    apply_scan, delta_p, endpoint_cell, softmax, EncoderMode, LogOddsGrid, MapEncoderParams,
};
use semnav::{Control, EnvironmentSpec, LabeledPoint, SemanticPointCloud, SensorParams, State};
use std::sync::Mutex;
use std::time::Instant;

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn random_cost_field(
    width: usize,
    height: usize,
    rng: &mut ChaCha8Rng,
    floor: f64,
    hi: f64,
) -> CostField {
    let cells: Vec<f64> = (0..width * height)
        .map(|_| floor + (hi - floor) * rng.random::<f64>())
        .collect();
    CostField::new(width, height, cells, vec![false; width * height], floor).unwrap()
}

#[test]
fn acceptance_1_planner_oracle_equivalence() {
    let _g = gate();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let floor = 1e-3;
    let mut open_checked = 0usize;
    for trial in 0..100 {
        let cost = random_cost_field(32, 32, &mut rng, floor, 2.0);
        let goal = State::new(rng.random_range(0..32), rng.random_range(0..32));
        let query = State::new(rng.random_range(0..32), rng.random_range(0..32));
        let plan =
            backward_astar(&cost, goal, query, Heuristic::Zero, StopRule::QueryCovered).unwrap();
        let oracle = dijkstra_oracle(&cost, goal).unwrap();
        for idx in 0..cost.cells() {
            match plan.status[idx] {
                NodeStatus::Closed => {
                    let want = oracle.get(idx).expect("closed node reachable");
                    assert!(
                        (plan.g[idx] - want).abs() <= 1e-9,
                        "trial {trial}: closed {idx} g {} vs oracle {want}",
                        plan.g[idx]
                    );
                }
                NodeStatus::Open => {
                    let want = oracle.get(idx).expect("open node reachable");
                    assert!(
                        plan.g[idx] >= want - 1e-9,
                        "trial {trial}: open {idx} g {} below oracle {want}",
                        plan.g[idx]
                    );
                    open_checked += 1;
                }
                NodeStatus::Unvisited => {}
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(open_checked > 0, "no open-list states were exercised");
    assert!(elapsed < 30.0, "took {elapsed:.1}s, budget 30s");
    println!(
        "ACCEPTANCE 1 PASS: backward A* matches Dijkstra on CLOSED and upper-bounds OPEN \
         over 100 random 32x32 fields ({open_checked} open states, {elapsed:.1}s)"
    );
}

#[test]
fn acceptance_2_value_iteration_cross_check() {
    let _g = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for trial in 0..20 {
        let cost = random_cost_field(16, 16, &mut rng, 0.9, 1.1);
        let goal = State::new(rng.random_range(2..14), rng.random_range(2..14));
        let vi = value_iteration_reference(&cost, goal, 200).unwrap();
        let oracle = dijkstra_oracle(&cost, goal).unwrap();
        for idx in 0..cost.cells() {
            let want = oracle.get(idx).unwrap();
            assert!(
                (vi.v[idx] - want).abs() <= 1e-9,
                "trial {trial}: VI {idx} {} vs {want}",
                vi.v[idx]
            );
        }
        // Query within width/3 of the goal: A* must settle strictly fewer
        // than J states.
        let sep: i32 = 16 / 3;
        let query = State::new(
            (goal.i + rng.random_range(1..=sep)).clamp(0, 15),
            (goal.j - rng.random_range(0..=sep)).clamp(0, 15),
        );
        let plan =
            backward_astar(&cost, goal, query, Heuristic::FloorEuclid, StopRule::QueryCovered)
                .unwrap();
        assert!(
            plan.expanded() < cost.cells(),
            "trial {trial}: A* expanded {} of {}",
            plan.expanded(),
            cost.cells()
        );
    }
    println!(
        "ACCEPTANCE 2 PASS: converged value iteration equals Dijkstra within 1e-9 on 20 maps; \
         A* expands strictly fewer states than J at separation <= width/3"
    );
}

/// 8x8 two-class environment with a road ring and scattered visible
/// obstacles, plus a short expert demo.
fn gradient_instance(seed: u64) -> (EnvironmentSpec, semnav::Demonstration) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut labels = vec![0u8; 64];
        for k in 0..64 {
            let (i, j) = ((k % 8) as i32, (k / 8) as i32);
            if i == 2 || j == 2 || i == 5 || j == 5 {
                labels[k] = 1;
            }
        }
        for _ in 0..6 {
            let idx = rng.random_range(0..64);
            labels[idx] = 2;
        }
        let env = EnvironmentSpec {
            id: seed as u32,
            width: 8,
            height: 8,
            resolution: 1.0,
            num_classes: 2,
            labels,
            obstacle_classes: vec![2],
            ray_visible_classes: vec![],
            seed,
        };
        if env.validate().is_err() {
            continue;
        }
        let sensor = SensorParams {
            num_rays: 48,
            max_range: 10.0,
            label_noise: 0.1,
        };
        let free: Vec<State> = (0..64)
            .filter(|&k| !env.is_obstacle(env.state_of(k)))
            .map(|k| env.state_of(k))
            .collect();
        let start = free[rng.random_range(0..free.len())];
        let goal = free[rng.random_range(0..free.len())];
        let (di, dj) = ((start.i - goal.i).abs(), (start.j - goal.j).abs());
        if di.max(dj) < 3 || !env.connected(start, goal) {
            continue;
        }
        if let Ok(demo) = generate_expert_demo(
            &env,
            start,
            goal,
            &[2.0, 1.0, 1.0],
            &sensor,
            &ExpertOptions::default(),
        ) {
            if !demo.is_empty() {
                return (env, demo);
            }
        }
    }
}

#[test]
fn acceptance_3_end_to_end_gradient_check() {
    let _g = gate();
    let start = Instant::now();
    let arch = ArchConfig {
        kernel: 3,
        widths: [2, 3],
        min_cost: 1e-3,
    };
    let mut checked_total = 0usize;
    for instance in 0..10 {
        let (env, demo) = gradient_instance(300 + instance);
        let mode = if instance % 2 == 0 {
            EncoderMode::Linear
        } else {
            EncoderMode::Network
        };
        let theta = ThetaParams::init(instance, 2, mode, arch.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(instance ^ 0xBEEF);
        // Per-cell jitter breaks optimal-path ties so tau* is unique and the
        // loss is differentiable at the evaluation point.
        let jitter: Vec<f64> = (0..64).map(|_| 0.08 * (rng.random::<f64>() - 0.5)).collect();
        let opts = StepOptions {
            temperature: 1.0,
            want_grad: true,
            freeze_map: false,
            jitter: Some(&jitter),
            heuristic: Heuristic::Zero,
        };
        let out = demo_loss_and_grad(&theta, &env, &demo, &opts).unwrap();
        assert_eq!(out.skipped, 0, "instance {instance} skipped steps");
        let grad = out.grad.unwrap();

        let nll_at = |flat: &[f64]| -> f64 {
            let mut t = theta.clone();
            t.set_from_flat(flat);
            let eval_opts = StepOptions {
                temperature: 1.0,
                want_grad: false,
                freeze_map: false,
                jitter: Some(&jitter),
                heuristic: Heuristic::Zero,
            };
            demo_loss_and_grad(&t, &env, &demo, &eval_opts).unwrap().nll_sum
        };
        let flat = theta.to_flat();
        let h = 1e-5;
        for idx in 0..flat.len() {
            let mut plus = flat.clone();
            plus[idx] += h;
            let mut minus = flat.clone();
            minus[idx] -= h;
            let fd = (nll_at(&plus) - nll_at(&minus)) / (2.0 * h);
            let analytic = grad[idx];
            let diff = (fd - analytic).abs();
            if analytic.abs() < 1e-8 {
                // Too small for the difference quotient: compare absolutely.
                assert!(
                    diff < 1e-8,
                    "instance {instance} coord {idx}: fd {fd} vs {analytic}"
                );
            } else {
                // Central differences at h = 1e-5 resolve no finer than
                // roughly eps * |loss| / h ~ 1e-9; differences below that
                // floor are roundoff, not disagreement.
                let rel = diff / fd.abs().max(analytic.abs());
                assert!(
                    rel <= 1e-4 || diff <= 1e-9,
                    "instance {instance} coord {idx}: fd {fd} vs {analytic} (rel {rel:.2e})"
                );
            }
            checked_total += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "took {elapsed:.1}s, budget 120s");
    println!(
        "ACCEPTANCE 3 PASS: analytic loss gradient matches central finite differences on 10 \
         jittered 8x8 instances ({checked_total} coordinates, {elapsed:.1}s)"
    );
}

#[test]
fn acceptance_4_bayes_filter_equivalence() {
    let _g = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (width, height) = (4usize, 3usize);
    for trial in 0u64..1000 {
        let k = 2 + (trial as usize % 3);
        let params = if trial % 2 == 0 {
            MapEncoderParams::new(EncoderMode::Linear, k, trial)
        } else {
            MapEncoderParams::new(EncoderMode::Network, k, trial)
        };
        let mut grid = LogOddsGrid::new(width, height, k, None);
        let rows = k + 1;
        let mut oracle: Vec<Vec<f64>> = (0..width * height)
            .map(|_| vec![1.0 / rows as f64; rows])
            .collect();
        let x = State::new(0, 1);
        let steps = 1 + (trial as usize % 20);
        for _ in 0..steps {
            let mut points = Vec::new();
            for _ in 0..3 {
                let px = rng.random_range(0.6..3.9);
                let py = rng.random_range(0.1..2.9);
                let mut y: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-6).collect();
                let sum: f64 = y.iter().sum();
                y.iter_mut().for_each(|v| *v /= sum);
                points.push(LabeledPoint { p: [px, py], y });
            }
            // Independent per-cell Bayes filter in probability space.
            for point in &points {
                if let Some(cell) = endpoint_cell(x, point, width, height) {
                    let (dp, d) = delta_p(x, point, cell, width);
                    if dp <= params.epsilon {
                        let g = params.increment(&point.y, dp, d, grid.h0());
                        let p = &mut oracle[cell];
                        let mut z = 0.0;
                        for c in 0..rows {
                            p[c] *= (g[c] - grid.h0()[c]).exp();
                            z += p[c];
                        }
                        p.iter_mut().for_each(|v| *v /= z);
                    }
                }
            }
            apply_scan(&mut grid, x, &SemanticPointCloud { points }, &params);
            for cell in 0..width * height {
                assert_eq!(grid.row(cell)[0], 0.0, "trial {trial}: class-0 log-odds moved");
            }
        }
        for cell in 0..width * height {
            let post = grid.posterior_cell(cell);
            for c in 0..rows {
                assert!(
                    (post[c] - oracle[cell][c]).abs() <= 1e-9,
                    "trial {trial} cell {cell} class {c}: {} vs {}",
                    post[c],
                    oracle[cell][c]
                );
            }
        }
    }
    println!(
        "ACCEPTANCE 4 PASS: recurrent log-odds posterior equals the direct per-cell Bayes \
         filter on 1000 random sequences (K<=4, length<=20) within 1e-9; class-0 pinned at 0"
    );
}

#[test]
fn acceptance_5_softmax_log_ratio_identity() {
    let _g = gate();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let dim = rng.random_range(2..8);
        let z: Vec<f64> = (0..dim).map(|_| 100.0 * rng.random::<f64>() - 50.0).collect();
        let s = softmax(&z);
        for a in 0..dim {
            for b in 0..dim {
                let err = ((s[a] / s[b]).ln() - (z[a] - z[b])).abs();
                worst = worst.max(err);
                assert!(err <= 1e-12, "identity violated: {err:.2e} on {z:?}");
            }
        }
    }
    println!(
        "ACCEPTANCE 5 PASS: log(sigma_k/sigma_k') = z_k - z_k' within 1e-12 on 10000 random \
         vectors with entries up to +-50 (worst {worst:.2e})"
    );
}

fn recovery_items(base_seed: u64, offset: u64, count: usize, cfg: &RecoveryConfig) -> Vec<DemoItem> {
    let params = GeneratorParams::default();
    let sensor = SensorParams::default();
    let mut items = Vec::with_capacity(count);
    for n in 0..count {
        let seed = base_seed + offset + n as u64;
        let mut env = generate_environment(32, 32, 3, seed, &params).expect("generation");
        env.id = (offset + n as u64) as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5EED);
        let demo = loop {
            let start = sample_road_cell(&env, &mut rng).unwrap();
            let goal = sample_road_cell(&env, &mut rng).unwrap();
            let (di, dj) = ((start.i - goal.i) as f64, (start.j - goal.j) as f64);
            if (di * di + dj * dj).sqrt() < cfg.min_separation || !env.connected(start, goal) {
                continue;
            }
            if let Ok(demo) = generate_expert_demo(
                &env,
                start,
                goal,
                &cfg.true_cost,
                &sensor,
                &ExpertOptions::default(),
            ) {
                break demo;
            }
        };
        items.push(DemoItem { env, demo });
    }
    items
}

struct RecoveryConfig {
    min_separation: f64,
    true_cost: [f64; 4],
}

#[test]
fn acceptance_6_desk_scale_recovery() {
    let _g = gate();
    let start = Instant::now();
    // Road costs 1, sidewalk 5, obstacles block; free background priced like
    // sidewalk so the expert stays on roads.
    let cfg = RecoveryConfig {
        min_separation: 12.0,
        true_cost: [5.0, 1.0, 5.0, 1.0],
    };
    let train_items = recovery_items(1000, 0, 100, &cfg);
    let test_items = recovery_items(1000, 10_000, 20, &cfg);

    let encoder = semnav::pipeline::EncoderConfig::default();
    let theta0 = encoder.build_theta(7, 3);
    let train_cfg = TrainConfig {
        learning_rate: 0.02,
        optimizer: OptimizerKind::Adam,
        batch_size: Some(2),
        max_epochs: 40,
        window: 8,
        tolerance: 1e-3,
        seed: 7,
        temperature: 1.0,
        threads: 0,
        freeze_map: false,
    };
    let result = train(&train_items, theta0, &train_cfg).unwrap();
    let report = evaluate(&test_items, &result.theta, &EvalOptions::default()).unwrap();

    // Ordinal recovery: mean learned cell cost on sidewalk exceeds road,
    // measured on the held-out worlds' final replayed maps.
    let (mut road_sum, mut road_n, mut side_sum, mut side_n) = (0.0, 0.0, 0.0, 0.0);
    for item in &test_items {
        let mut grid = LogOddsGrid::new(32, 32, 3, None);
        for step in &item.demo.steps {
            let cloud = SemanticPointCloud {
                points: step.points.clone(),
            };
            apply_scan(&mut grid, step.state, &cloud, &result.theta.map);
        }
        let (cells, _) = cost_forward(&result.theta.cost, &grid.posterior(), 32, 32).unwrap();
        for (k, &label) in item.env.labels.iter().enumerate() {
            match label {
                1 => {
                    road_sum += cells[k];
                    road_n += 1.0;
                }
                2 => {
                    side_sum += cells[k];
                    side_n += 1.0;
                }
                _ => {}
            }
        }
    }
    let road_mean = road_sum / road_n;
    let side_mean = side_sum / side_n;
    let elapsed = start.elapsed().as_secs_f64();

    println!(
        "ACCEPTANCE 6 metrics: NLL {:.4} Acc {:.1}% Succ {:.1}% MHD {:.3} | road {road_mean:.3} \
         sidewalk {side_mean:.3} | {} epochs, {elapsed:.0}s",
        report.nll,
        100.0 * report.acc,
        100.0 * report.traj_succ_rate,
        report.mhd,
        result.epochs_run,
    );
    assert!(report.nll < 1.0, "test NLL {} must be below 1.0", report.nll);
    assert!(report.acc >= 0.85, "test Acc {} must be at least 0.85", report.acc);
    assert!(
        report.traj_succ_rate >= 0.90,
        "success rate {} must be at least 0.90",
        report.traj_succ_rate
    );
    assert!(report.mhd <= 1.5, "mean MHD {} must be at most 1.5", report.mhd);
    assert!(
        side_mean > road_mean,
        "ordinal recovery failed: sidewalk {side_mean} vs road {road_mean}"
    );
    assert!(elapsed <= 600.0, "took {elapsed:.0}s, budget 600s");
    println!(
        "ACCEPTANCE 6 PASS: held-out NLL {:.3} < 1.0, Acc {:.1}% >= 85%, Succ {:.1}% >= 90%, \
         MHD {:.3} <= 1.5, sidewalk cost > road cost, {elapsed:.0}s <= 600s",
        report.nll,
        100.0 * report.acc,
        100.0 * report.traj_succ_rate,
        report.mhd
    );
}

#[test]
fn acceptance_7_metric_unit_checks() {
    let _g = gate();
    // Uniform policy over 8 controls: exactly ln 8.
    assert_eq!(nll(vec![(0.125f64, Control(0))]), 8f64.ln());
    // Offset parallel lines: MHD equals the offset.
    let a: Vec<State> = (0..6).map(|i| State::new(i, 0)).collect();
    let b: Vec<State> = (0..6).map(|i| State::new(i, 4)).collect();
    assert_eq!(mhd(&a, &b), 4.0);
    // Success boundary: exactly 2 T_expert accepted, one more rejected.
    assert!(rollout_success(
        semnav::RolloutOutcome::ReachedGoal,
        14,
        7
    ));
    assert!(!rollout_success(
        semnav::RolloutOutcome::ReachedGoal,
        15,
        7
    ));
    println!(
        "ACCEPTANCE 7 PASS: uniform-policy NLL is exactly ln 8; offset-line MHD equals the \
         offset; success boundary inclusive at 2x expert steps"
    );
}

#[test]
fn acceptance_8_pipeline_determinism() {
    let _g = gate();
    use semnav::pipeline::{gen_train_eval, EncoderConfig, GenConfig};
    let gen_cfg = GenConfig {
        count: 8,
        width: 20,
        height: 20,
        num_classes: 3,
        seed: 11,
        min_separation: 8.0,
        road_width: 2,
        sidewalk_width: 1,
        h_roads: 1,
        v_roads: 1,
        obstacle_fraction_min: 0.03,
        obstacle_fraction_max: 0.2,
        ..GenConfig::default()
    };
    let encoder = EncoderConfig::default();
    let train_cfg = TrainConfig {
        learning_rate: 0.02,
        batch_size: Some(2),
        max_epochs: 5,
        threads: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let eval_opts = EvalOptions::default();

    let base = std::env::temp_dir().join(format!("semnav_accept8_{}", std::process::id()));
    let run = |tag: &str| {
        let dir = base.join(tag);
        std::fs::create_dir_all(&dir).unwrap();
        gen_train_eval(&dir, &gen_cfg, &encoder, &train_cfg, &eval_opts).unwrap()
    };
    let (_, ckpt_a, report_a) = run("a");
    let (_, ckpt_b, report_b) = run("b");
    assert_eq!(ckpt_a, ckpt_b, "checkpoints differ between identical runs");
    assert_eq!(report_a, report_b, "eval reports differ between identical runs");
    // The generated datasets are byte-identical too.
    for id in 0..8 {
        for name in [format!("env_{id}.json"), format!("demo_{id}.jsonl")] {
            let a = std::fs::read(base.join("a").join("data").join(&name)).unwrap();
            let b = std::fs::read(base.join("b").join("data").join(&name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }
    std::fs::remove_dir_all(&base).ok();
    println!(
        "ACCEPTANCE 8 PASS: gen+train+eval with a fixed seed in single-threaded mode produces \
         bitwise-identical datasets, checkpoints, and reports across two runs"
    );
}
