//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pollisim::classify::{compute_metrics, cross_entropy_loss, loss_gradient, softmax, ClassDistribution};
use pollisim::geometry::Pose3;
use pollisim::kinematics::{reduced_pseudoinverse_velocities, solve_joint_velocities, IkOptions, SerialArmModel};
use pollisim::mapping::factor_graph::{optimize_tracks, FactorGraph};
use pollisim::planning::{nearest_neighbor, solve_tsp, tour_cost, two_opt, CostMatrix};
use pollisim::segmentation::{build_lut, classify_pixel};
use pollisim::servo::{run_servo, KnownFlower, ServoPhase};
use pollisim::sim::pipeline::run_mapping_sweep;
use pollisim::sim::report::{report_csv, trials_csv, Bench};
use pollisim::sim::scene::{Leaf, SceneSpec};
use pollisim::sim::{generate_scene, run_bench, sweep_poses, NoiseLevel, SimConfig, SimContext};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-12)
}

fn random_q<R: Rng>(arm: &SerialArmModel, rng: &mut R) -> Vec<f64> {
    arm.joints
        .iter()
        .map(|j| {
            let (lo, hi) = (j.lower.max(-3.0), j.upper.min(3.0));
            rng.random_range(lo..hi)
        })
        .collect()
}

fn lut_equivalence(ctx: &SimContext) -> Verdict {
    let model = &ctx.perception.models.color;
    let t0 = Instant::now();
    let lut = build_lut(model);
    let build = t0.elapsed();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mismatches = (0..100_000)
        .filter(|_| {
            let px: [u8; 3] = rng.random();
            lut.lookup(px) != classify_pixel(model, px)
        })
        .count();
    verdict(
        mismatches == 0 && build < Duration::from_secs(10),
        format!("{mismatches} mismatches in 100000 colors, build {:.2} s", build.as_secs_f64()),
    )
}

fn gradient_check() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut bounded = true;
    for _ in 0..100 {
        let k = rng.random_range(2..6);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let q = ClassDistribution::from_weights(w).unwrap();
        let g = loss_gradient(&softmax(&z), &q);
        bounded &= g.iter().all(|v| (-1.0..=1.0).contains(v));
        // oracle: central differences of the loss in the logits
        let fd: Vec<f64> = (0..k)
            .map(|i| {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += h;
                zm[i] -= h;
                (cross_entropy_loss(&softmax(&zp), &q) - cross_entropy_loss(&softmax(&zm), &q)) / (2.0 * h)
            })
            .collect();
        let (a, b) = (DMatrix::from_row_slice(1, k, &g), DMatrix::from_row_slice(1, k, &fd));
        worst = worst.max(rel_err(&a, &b));
    }
    verdict(worst < 1e-5 && bounded, format!("max relative error {worst:.2e}, bounded {bounded}"))
}

fn fd_jacobian(arm: &SerialArmModel, q: &[f64]) -> DMatrix<f64> {
    let h = 1e-6;
    let mut j = DMatrix::zeros(6, q.len());
    for i in 0..q.len() {
        let mut qp = q.to_vec();
        let mut qm = q.to_vec();
        qp[i] += h;
        qm[i] -= h;
        let (p, m) = (arm.forward_kinematics(&qp).unwrap(), arm.forward_kinematics(&qm).unwrap());
        let lin = (p.position - m.position) / (2.0 * h);
        let ang = (p.orientation() * m.orientation().inverse()).scaled_axis() / (2.0 * h);
        for r in 0..3 {
            j[(r, i)] = lin[r];
            j[(r + 3, i)] = ang[r];
        }
    }
    j
}

fn jacobian_check(arm: &SerialArmModel) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_j, mut worst_full, mut worst_reduced) = (0.0f64, 0.0f64, 0.0f64);
    let mut solved = 0;
    let mut minimal = true;
    for _ in 0..100 {
        let q = random_q(arm, &mut rng);
        let j = arm.jacobian(&q).unwrap();
        worst_j = worst_j.max(rel_err(&j, &fd_jacobian(arm, &q)));

        let xdot = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        if let Ok(qd) = solve_joint_velocities(&j, &xdot, 1e6) {
            worst_full = worst_full.max((&j * qd - &xdot).norm());
            solved += 1;
        }

        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let qd = reduced_pseudoinverse_velocities(&j, &v).unwrap();
        let jr = j.rows(0, 3).into_owned();
        worst_reduced = worst_reduced.max((&jr * &qd - DVector::from_column_slice(v.as_slice())).norm());
        // oracle: any null-space step keeps the constraint and cannot shorten qd
        let m = (&jr * jr.transpose()).try_inverse().unwrap();
        for _ in 0..100 {
            let r = DVector::from_fn(q.len(), |_, _| rng.random_range(-1.0..1.0));
            let n = &r - jr.transpose() * (&m * (&jr * &r));
            minimal &= (&qd + n).norm() >= qd.norm() - 1e-12;
        }
    }
    let pass = worst_j < 1e-5 && worst_full < 1e-9 && worst_reduced < 1e-9 && minimal && solved >= 90;
    verdict(
        pass,
        format!(
            "Jacobian rel err {worst_j:.2e}; full solve residual {worst_full:.2e} ({solved}/100 well conditioned); \
             reduced residual {worst_reduced:.2e}; minimal norm {minimal}"
        ),
    )
}

fn random_spd<R: Rng>(rng: &mut R, scale: f64) -> Matrix3<f64> {
    let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    (a * a.transpose() + Matrix3::identity() * 0.1) * scale
}

fn nlls_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(1..30);
        let mut g = FactorGraph::new();
        let x = g.add_variable();
        let mut info = Matrix3::zeros();
        let mut rhs = Vector3::zeros();
        for _ in 0..k {
            let z = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0));
            let cov = random_spd(&mut rng, 1e-4);
            g.add_position_measurement(x, z, cov).unwrap();
            let w = cov.try_inverse().unwrap();
            info += w;
            rhs += w * z;
        }
        // oracle: closed-form weighted least squares
        let expected = info.try_inverse().unwrap() * rhs;
        let got = optimize_tracks(&g, &[Vector3::zeros()]).unwrap().values[0];
        worst = worst.max((got - expected).norm());
    }

    let (k, sigma, trials) = (25, 0.005, 500);
    let mut sq = 0.0;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + t);
        let truth = Vector3::new(rng.random_range(0.3..0.7), rng.random_range(-0.3..0.3), rng.random_range(0.2..0.6));
        let mut g = FactorGraph::new();
        let x = g.add_variable();
        for _ in 0..k {
            let e = Vector3::from_fn(|_, _| {
                let n: f64 = StandardNormal.sample(&mut rng);
                sigma * n
            });
            g.add_position_measurement(x, truth + e, Matrix3::identity() * sigma * sigma).unwrap();
        }
        let est = optimize_tracks(&g, &[Vector3::zeros()]).unwrap().values[0];
        sq += (est - truth).norm_squared();
    }
    // per-axis RMSE against the sigma/sqrt(K) of an average of K samples
    let rmse = (sq / (3.0 * trials as f64)).sqrt();
    let bound = 1.3 * sigma / (k as f64).sqrt();
    verdict(
        worst < 1e-9 && rmse <= bound,
        format!("max deviation {worst:.2e} m; fused RMSE {:.3} mm (bound {:.3} mm)", rmse * 1e3, bound * 1e3),
    )
}

fn random_costs<R: Rng>(rng: &mut R, n: usize) -> CostMatrix {
    let pts: Vec<Vector3<f64>> = (0..n)
        .map(|_| Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
        .collect();
    let asym = rng.random_bool(0.5);
    CostMatrix(DMatrix::from_fn(n, n, |i, j| {
        let d = (pts[i] - pts[j]).norm();
        if asym && i < j { d * 1.3 } else { d }
    }))
}

fn brute_force(costs: &CostMatrix) -> f64 {
    fn go(costs: &CostMatrix, order: &mut Vec<usize>, left: &mut Vec<usize>, best: &mut f64) {
        if left.is_empty() {
            *best = best.min(tour_cost(costs, order));
            return;
        }
        for i in 0..left.len() {
            let v = left.remove(i);
            order.push(v);
            go(costs, order, left, best);
            order.pop();
            left.insert(i, v);
        }
    }
    let mut best = f64::INFINITY;
    go(costs, &mut vec![0], &mut (1..costs.len()).collect(), &mut best);
    best
}

fn tsp_optimality() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = true;
    for n in 1..=8 {
        for _ in 0..50 {
            let c = random_costs(&mut rng, n);
            let tour = solve_tsp(&c, 0).unwrap();
            exact &= (tour.cost - brute_force(&c)).abs() <= 1e-12 * tour.cost.max(1.0);
        }
    }
    let mut improved = true;
    for n in 2..=20 {
        for _ in 0..50 {
            let c = random_costs(&mut rng, n);
            let nn = nearest_neighbor(&c, 0);
            let opt = two_opt(&c, nn.clone());
            improved &= tour_cost(&c, &opt) <= tour_cost(&c, &nn) + 1e-12;
        }
    }
    verdict(exact && improved, format!("exact for N<=8: {exact}; 2-opt never worse than nearest neighbor: {improved}"))
}

fn servo_convergence(ctx: &SimContext) -> Verdict {
    let cfg = &ctx.config;
    let ik = IkOptions::default();
    let upright = IkOptions { free_roll: false, ..ik };
    let params = cfg.servo_params();
    let (mut total, mut ok) = (0, 0);
    let mut worst: f64 = 0.0;
    let mut first_failure = None;
    for seed in 0..50u64 {
        for template in &cfg.trials.scenarios {
            let scene = generate_scene(template, seed).unwrap();
            for i in scene.reachable() {
                let f = scene.flowers[i];
                total += 1;
                let vantage = Pose3::look_at(f.position + f.normal * cfg.planner.standoff, f.position, -Vector3::z());
                let q0 = ctx.arm.solve_ik(&vantage, None, &upright).or_else(|_| ctx.arm.solve_ik(&vantage, None, &ik));
                let Ok(q0) = q0 else {
                    first_failure.get_or_insert(format!("seed {seed} scenario {}: vantage unreachable", template.id));
                    continue;
                };
                let mut world = KnownFlower(Pose3::with_z_axis(f.position, f.normal));
                let run = run_servo(&ctx.arm, &q0, &params, &mut world).unwrap();
                let tip = ctx.arm.forward_kinematics(&run.q).unwrap();
                let w = tip.position - f.position;
                let lateral = (w - f.normal * w.dot(&f.normal)).norm();
                if run.state.phase == ServoPhase::Contact && run.state.step <= 500 && lateral < 0.002 {
                    ok += 1;
                    worst = worst.max(lateral);
                } else {
                    first_failure.get_or_insert(format!(
                        "seed {seed} scenario {}: {} after {} steps, lateral {:.2} mm",
                        template.id,
                        run.state.phase.name(),
                        run.state.step,
                        lateral * 1e3
                    ));
                }
            }
        }
    }
    let mut detail = format!("{ok}/{total} converged, worst lateral tip error {:.3} mm", worst * 1e3);
    if let Some(f) = first_failure {
        detail.push_str(&format!("; first failure: {f}"));
    }
    verdict(ok == total, detail)
}

fn bench_reproduction(bench: &Bench, elapsed: Duration) -> Verdict {
    let reports = bench.reports();
    let all = reports.last().unwrap();
    let misses = bench.failure_miss_distances();
    let close = misses.iter().filter(|&&d| d <= 0.02).count();
    // with no failures at all the miss-distance clause holds trivially
    let close_ok = misses.is_empty() || close as f64 >= 0.9 * misses.len() as f64;
    let pass = elapsed < Duration::from_secs(300)
        && all.detection_pct >= 90.0
        && all.pollinated_pct >= 70.0
        && all.touched_pct >= 85.0
        && all.false_positives <= 3
        && close_ok;
    verdict(
        pass,
        format!(
            "{} trials in {:.0} s; detection {:.1}%, pollinated {:.1}%, touched {:.1}%, false positives {}, \
             failures within 2 cm {close}/{}",
            all.trials,
            elapsed.as_secs_f64(),
            all.detection_pct,
            all.pollinated_pct,
            all.touched_pct,
            all.false_positives,
            misses.len()
        ),
    )
}

fn metrics_exactness() -> Verdict {
    // flower row: 99 of 126 flower predictions correct, 99 of 110 flowers found
    let mut preds = Vec::new();
    preds.extend(std::iter::repeat_n((0, 0), 99));
    preds.extend(std::iter::repeat_n((1, 0), 11));
    preds.extend(std::iter::repeat_n((0, 1), 27));
    preds.extend(std::iter::repeat_n((1, 1), 263));
    let m = compute_metrics(&preds, 2);
    let p = m.per_class[0].precision.unwrap();
    let r = m.per_class[0].recall.unwrap();
    let shown = format!("{:.1}%/{:.1}%", 100.0 * p, 100.0 * r);
    let flower_ok = p == 99.0 / 126.0 && r == 0.9 && shown == "78.6%/90.0%";

    // three classes, confusion[actual][predicted] = [[5,1,0],[2,6,2],[0,1,3]]
    let counts = [[5, 1, 0], [2, 6, 2], [0, 1, 3]];
    let mut preds = Vec::new();
    for (actual, row) in counts.iter().enumerate() {
        for (pred, &n) in row.iter().enumerate() {
            preds.extend(std::iter::repeat_n((pred, actual), n));
        }
    }
    let m = compute_metrics(&preds, 3);
    let expected = [(5.0 / 7.0, 5.0 / 6.0), (6.0 / 8.0, 6.0 / 10.0), (3.0 / 5.0, 3.0 / 4.0)];
    let three_ok = m
        .per_class
        .iter()
        .zip(expected)
        .all(|(c, (p, r))| c.precision == Some(p) && c.recall == Some(r));
    verdict(flower_ok && three_ok, format!("flower row {shown}; three-class matrix exact: {three_ok}"))
}

fn determinism(first: &Bench, second: &Bench) -> Verdict {
    let same_report = report_csv(&first.reports()) == report_csv(&second.reports());
    let same_trials = trials_csv(&first.trials) == trials_csv(&second.trials);
    verdict(same_report && same_trials, format!("report identical {same_report}, trials identical {same_trials}"))
}

fn octree_fidelity(ctx: &SimContext) -> Verdict {
    // a sensor without depth noise, so ground-truth cells are well defined
    let mut cfg = ctx.config.clone();
    cfg.noise.level = NoiseLevel::Off;
    let ctx = SimContext::new(cfg, ctx.perception.models.clone()).unwrap();
    let leaf = Leaf {
        center: Vector3::new(0.8, 0.0, 0.45),
        normal: -Vector3::x(),
        major_axis: Vector3::y(),
        semi_major: 0.6,
        semi_minor: 0.4,
    };
    let mut scene = SceneSpec::empty(0);
    scene.leaves.push(leaf);
    let poses = sweep_poses(&ctx.config.sweep);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let octree = run_mapping_sweep(&ctx, &scene, &poses, &mut rng).unwrap().octree;

    // oracle: cast the scanned pixels against the plane analytically
    let k = ctx.intrinsics;
    let stride = ctx.config.map.scan_stride;
    let res = octree.resolution();
    let minor_axis = leaf.normal.cross(&leaf.major_axis);
    let mut occupied = HashSet::new();
    let mut free = HashSet::new();
    for pose in &poses {
        for v in (0..k.height).step_by(stride) {
            for u in (0..k.width).step_by(stride) {
                let d = pose.rotate(&Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0));
                let t = (leaf.center - pose.position).dot(&leaf.normal) / d.dot(&leaf.normal);
                if !(t > 0.0) {
                    continue;
                }
                let hit = pose.position + d * t;
                let r = hit - leaf.center;
                let (a, b) = (r.dot(&leaf.major_axis) / leaf.semi_major, r.dot(&minor_axis) / leaf.semi_minor);
                if a * a + b * b > 1.0 || (hit - pose.position).norm() > ctx.config.map.max_range {
                    continue;
                }
                occupied.insert(octree.key(&hit).unwrap());
                for key in octree.ray_keys(&pose.position, &hit) {
                    // cells touching the plane are neither clearly free nor occupied
                    if (octree.key_center(key) - hit).dot(&leaf.normal).abs() > 2.0 * res {
                        free.insert(key);
                    }
                }
            }
        }
    }
    let marked = occupied.iter().filter(|&&key| octree.is_occupied(&octree.key_center(key))).count();
    let wrong = free.iter().filter(|&&key| octree.is_occupied(&octree.key_center(key))).count();
    let hit_rate = marked as f64 / occupied.len() as f64;
    let false_rate = wrong as f64 / free.len() as f64;
    verdict(
        hit_rate >= 0.95 && false_rate <= 0.02,
        format!(
            "{marked}/{} plane cells occupied ({:.1}%), {wrong}/{} free cells occupied ({:.2}%)",
            occupied.len(),
            100.0 * hit_rate,
            free.len(),
            100.0 * false_rate
        ),
    )
}

fn main() {
    let started = Instant::now();
    let ctx = SimContext::with_synthetic_training(SimConfig::default()).expect("training");
    let training = started.elapsed();

    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |n: usize, name: &'static str, v: Verdict| {
        println!("{} {n:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };

    record(1, "LUT matches per-pixel MAP", lut_equivalence(&ctx));
    record(2, "loss gradient", gradient_check());
    record(3, "Jacobian and velocity solvers", jacobian_check(&ctx.arm));
    record(4, "NLLS fusion", nlls_oracle());
    record(5, "tour optimality", tsp_optimality());
    record(6, "servo convergence", servo_convergence(&ctx));

    let t0 = Instant::now();
    let first = run_bench(&ctx, |_| {}).expect("bench");
    record(7, "bench reproduction", bench_reproduction(&first, training + t0.elapsed()));
    record(8, "metrics exactness", metrics_exactness());
    let second = run_bench(&ctx, |_| {}).expect("bench");
    record(9, "determinism", determinism(&first, &second));
    record(10, "octree fidelity", octree_fidelity(&ctx));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
