//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion
//! and fails if any criterion fails.
//!
//! ```text
//! cargo test --release -p nbm-core --test acceptance -- --nocapture
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use nbm_core::detection::{group_episodes, AlarmEpisode, EpisodeSet, DEFAULT_MERGE_GAP_S};
use nbm_core::evaluation::{label_episodes, ConfusionCounts, Coverage, EvalConfig};
use nbm_core::experiment::{run_experiment, run_experiment_to_dir, ExperimentConfig, ExperimentResult};
use nbm_core::features::{DesignMatrix, ModelName};
use nbm_core::gbdt::{fit, regression_metrics, Node, TrainParams};
use nbm_core::scada_data::{FailureRecord, FarmDataset, Timestamp, HSS_BEARING_TEMP, IMS_BEARING_TEMP, SECONDS_PER_DAY};
use nbm_core::simulator::{simulate_farm, thermal_step, SimConfig, ThermalInputs, ThermalState, TurbineParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DEFAULT_SEED: u64 = 2012;
const ALTERNATIVE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const DAY: i64 = SECONDS_PER_DAY;

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn config(seed: u64, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::simulated_default(out);
    cfg.seed = seed;
    cfg.resolved()
}

fn mae(r: &ExperimentResult, m: ModelName) -> f64 {
    r.model(m).unwrap().regression.test.mae
}

/// Each strict inequality with a 5 % relative margin.
fn regression_ordering(r: &ExperimentResult) -> bool {
    use ModelName::*;
    mae(r, Snbm) <= 0.95 * mae(r, Cnbm) && mae(r, Acnbm) <= 0.95 * mae(r, Cnbm) && mae(r, Asnbm) <= 1.05 * mae(r, Snbm)
}

fn gt(a: Option<f64>, b: Option<f64>) -> bool {
    matches!((a, b), (Some(a), Some(b)) if a > b)
}

fn detection_inversion(r: &ExperimentResult) -> bool {
    use ModelName::*;
    gt(r.auprc(Cnbm), r.auprc(Snbm)) && gt(r.auprc(Cnbm), r.auprc(Asnbm))
}

fn fmt_auprc(r: &ExperimentResult) -> String {
    let f = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.3}"));
    let mut parts: Vec<String> = ModelName::ALL.iter().map(|m| format!("{m} {}", f(r.auprc(*m)))).collect();
    parts.push(format!("baseline {}", f(r.baseline.auprc)));
    parts.join(", ")
}

fn fmt_mae(r: &ExperimentResult) -> String {
    ModelName::ALL
        .iter()
        .map(|m| format!("{m} {:.3}", mae(r, *m)))
        .collect::<Vec<_>>()
        .join(", ")
}

fn metrics_consistent(r: &ExperimentResult) -> bool {
    r.models
        .iter()
        .all(|m| m.regression.train.rmse >= m.regression.train.mae && m.regression.test.rmse >= m.regression.test.mae)
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn experiment_criteria(out: &mut Vec<Outcome>, rmse_ok: &mut bool) {
    let tmp = tempfile::tempdir().unwrap();
    let (dir_a, dir_b) = (tmp.path().join("a"), tmp.path().join("b"));
    let default = run_experiment_to_dir(&config(DEFAULT_SEED, &dir_a)).unwrap();
    *rmse_ok &= metrics_consistent(&default);
    eprintln!("seed {DEFAULT_SEED}: MAE {}; AUPRC {}", fmt_mae(&default), fmt_auprc(&default));

    let mut alternatives = Vec::new();
    for seed in ALTERNATIVE_SEEDS {
        let r = run_experiment(&config(seed, tmp.path())).unwrap();
        *rmse_ok &= metrics_consistent(&r);
        eprintln!("seed {seed}: MAE {}; AUPRC {}", fmt_mae(&r), fmt_auprc(&r));
        alternatives.push((seed, r));
    }

    let count = |f: fn(&ExperimentResult) -> bool| alternatives.iter().filter(|(_, r)| f(r)).count();
    let failing = |f: fn(&ExperimentResult) -> bool| {
        alternatives
            .iter()
            .filter(|(_, r)| !f(r))
            .map(|(s, _)| s.to_string())
            .collect::<Vec<_>>()
    };

    let (d, k) = (regression_ordering(&default), count(regression_ordering));
    out.push(Outcome {
        id: 1,
        name: "regression ordering",
        pass: d && k >= 4,
        detail: format!("default seed {}, {k}/5 alternative seeds (failing: {:?})", ok(d), failing(regression_ordering)),
    });

    let (d, k) = (detection_inversion(&default), count(detection_inversion));
    out.push(Outcome {
        id: 2,
        name: "detection inversion",
        pass: d && k >= 4,
        detail: format!("default seed {}, {k}/5 alternative seeds (failing: {:?})", ok(d), failing(detection_inversion)),
    });

    let baseline_wins = |r: &ExperimentResult| gt(r.baseline.auprc, r.auprc(ModelName::Snbm));
    let d = baseline_wins(&default);
    let losing: Vec<u64> = alternatives.iter().filter(|(_, r)| !baseline_wins(r)).map(|(s, _)| *s).collect();
    out.push(Outcome {
        id: 3,
        name: "baseline beats SNBM",
        pass: d,
        detail: format!(
            "default seed {} (baseline {:?} vs SNBM {:?}); alternative seeds where it fails: {losing:?}",
            ok(d),
            default.baseline.auprc,
            default.auprc(ModelName::Snbm)
        ),
    });

    run_experiment_to_dir(&config(DEFAULT_SEED, &dir_b)).unwrap();
    let mut files = vec!["metrics.csv".to_string(), "auprc.csv".to_string(), "pr_baseline.csv".to_string()];
    files.extend(ModelName::ALL.iter().map(|m| format!("pr_{m}.csv")));
    let differing: Vec<&String> = files.iter().filter(|f| read(&dir_a, f) != read(&dir_b, f)).collect();
    out.push(Outcome {
        id: 8,
        name: "determinism",
        pass: differing.is_empty(),
        detail: format!("{} files compared, differing: {differing:?}", files.len()),
    });
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fails"
    }
}

/// Brute-force labelling: overlap is tested second by second on integer
/// closed intervals.
fn oracle(episodes: &EpisodeSet, failures: &[FailureRecord], cfg: &EvalConfig) -> ConfusionCounts {
    let overlaps = |e: &AlarmEpisode, lo: i64, hi: i64| e.start.0.max(lo) <= e.end.0.min(hi);
    let window = |f: &FailureRecord| {
        let t = f.failure_time.0;
        (t - cfg.window_days * DAY, t - cfg.lead_days * DAY - 1)
    };
    let ignore = |f: &FailureRecord| {
        let t = f.failure_time.0;
        (t - cfg.lead_days * DAY, t + cfg.blackout_days * DAY)
    };
    let all: Vec<&AlarmEpisode> = episodes.values().flatten().collect();
    let tp = failures
        .iter()
        .filter(|f| {
            let (lo, hi) = window(f);
            all.iter().any(|e| e.turbine_id == f.turbine_id && overlaps(e, lo, hi))
        })
        .count();
    let (mut fp, mut ignored) = (0, 0);
    for e in &all {
        let mine: Vec<&FailureRecord> = failures.iter().filter(|f| f.turbine_id == e.turbine_id).collect();
        if mine.iter().any(|f| {
            let (lo, hi) = window(f);
            overlaps(e, lo, hi)
        }) {
            continue;
        }
        if mine.iter().any(|f| {
            let (lo, hi) = ignore(f);
            overlaps(e, lo, hi)
        }) {
            ignored += 1;
        } else {
            fp += 1;
        }
    }
    let fn_ = failures.len() - tp;
    ConfusionCounts {
        tp,
        fp,
        fn_,
        ignored,
        precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
        recall: (!failures.is_empty()).then(|| tp as f64 / failures.len() as f64),
    }
}

fn random_instance(rng: &mut ChaCha8Rng, cfg: &EvalConfig) -> (EpisodeSet, Vec<FailureRecord>) {
    let ids = ["T01", "T02", "T03"];
    let n_failures = rng.random_range(0..=5);
    let failures: Vec<FailureRecord> = (0..n_failures)
        .map(|_| FailureRecord {
            turbine_id: ids[rng.random_range(0..ids.len())].into(),
            failure_time: Timestamp(rng.random_range(100..400) * DAY),
            component: "gearbox_ims_bearing".into(),
        })
        .collect();
    // anchor endpoints on window and ignore-zone boundaries half of the time
    let mut anchors = Vec::new();
    for f in &failures {
        let t = f.failure_time.0;
        for b in [
            t - cfg.window_days * DAY,
            t - cfg.lead_days * DAY,
            t,
            t + cfg.blackout_days * DAY,
        ] {
            anchors.extend([b - 1, b, b + 1]);
        }
    }
    let point = |rng: &mut ChaCha8Rng| {
        if !anchors.is_empty() && rng.random_bool(0.5) {
            anchors[rng.random_range(0..anchors.len())]
        } else {
            rng.random_range(0..500 * DAY)
        }
    };
    let mut set: EpisodeSet = ids.iter().map(|id| (id.to_string(), Vec::new())).collect();
    for _ in 0..rng.random_range(0..=20) {
        let id = ids[rng.random_range(0..ids.len())];
        let (a, b) = (point(rng), point(rng));
        let (a, b) = if rng.random_bool(0.3) { (a, a) } else { (a.min(b), a.max(b)) };
        set.get_mut(id).unwrap().push(AlarmEpisode {
            turbine_id: id.into(),
            start: Timestamp(a),
            end: Timestamp(b),
        });
    }
    (set, failures)
}

fn oracle_equivalence() -> Outcome {
    let cfg = EvalConfig::default();
    let coverage = Coverage::unbounded(["T01", "T02", "T03"]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (set, failures) = random_instance(&mut rng, &cfg);
        let got = label_episodes(&set, &failures, &cfg, &coverage).unwrap();
        if got != oracle(&set, &failures, &cfg) {
            mismatches += 1;
        }
    }
    Outcome {
        id: 4,
        name: "evaluator oracle equivalence",
        pass: mismatches == 0,
        detail: format!("{mismatches} mismatches in 1000 instances"),
    }
}

fn schematic_window() -> Outcome {
    let f = FailureRecord {
        turbine_id: "T01".into(),
        failure_time: "2012-06-01T00:00:00Z".parse().unwrap(),
        component: "gearbox_ims_bearing".into(),
    };
    let alarms: Vec<Timestamp> = [55i64, 45, 32, 20].iter().map(|d| f.failure_time.plus_days(-d)).collect();
    let episodes: EpisodeSet = [("T01".to_string(), group_episodes("T01", &alarms, DEFAULT_MERGE_GAP_S))].into();
    let c = label_episodes(&episodes, &[f], &EvalConfig::default(), &Coverage::unbounded(["T01"])).unwrap();
    Outcome {
        id: 5,
        name: "four alarms in one window",
        pass: (c.tp, c.fp, c.fn_) == (1, 0, 0),
        detail: format!("tp={} fp={} fn={} from {} episodes", c.tp, c.fp, c.fn_, episodes["T01"].len()),
    }
}

/// Exhaustive least-squares root split: `(feature, threshold, rows left)`.
fn exhaustive_split(rows: &[Vec<f64>], y: &[f64], min_leaf: usize) -> Option<(usize, f64, usize)> {
    let sse = |idx: &[usize]| {
        let m = idx.iter().map(|i| y[*i]).sum::<f64>() / idx.len() as f64;
        idx.iter().map(|i| (y[*i] - m).powi(2)).sum::<f64>()
    };
    let all: Vec<usize> = (0..y.len()).collect();
    let parent = sse(&all);
    let mut best: Option<(f64, usize, f64, usize)> = None;
    for f in 0..rows[0].len() {
        let distinct: BTreeSet<u64> = rows.iter().map(|r| r[f].to_bits()).collect();
        let mut values: Vec<f64> = distinct.into_iter().map(f64::from_bits).collect();
        values.sort_by(f64::total_cmp);
        for w in values.windows(2) {
            let t = w[0] + (w[1] - w[0]) / 2.0;
            let (l, r): (Vec<usize>, Vec<usize>) = all.iter().partition(|i| rows[**i][f] <= t);
            if l.len() < min_leaf || r.len() < min_leaf {
                continue;
            }
            let cost = sse(&l) + sse(&r);
            if cost < parent && best.is_none_or(|b| cost < b.0) {
                best = Some((cost, f, t, l.len()));
            }
        }
    }
    best.map(|(_, f, t, n)| (f, t, n))
}

fn gbdt_correctness(rmse_ok: &mut bool) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut split_mismatches = 0;
    let instances = 300;
    for _ in 0..instances {
        let n = rng.random_range(10..=200);
        let p = rng.random_range(1..=3);
        let levels = rng.random_range(2..=40);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(0..levels) as f64 * 0.37).collect())
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0].sin() * 3.0 + rng.random_range(-1.0..1.0)).collect();
        let names = (0..p).map(|i| format!("x{i}")).collect();
        let m = DesignMatrix::from_rows(names, &rows, y.clone()).unwrap();
        let min_leaf = rng.random_range(1..=5);
        let params = TrainParams {
            max_trees: 1,
            max_depth: 1,
            min_samples_leaf: min_leaf,
            n_bins: 64,
            ..TrainParams::default()
        };
        let model = fit(&m, &m, &params).unwrap();
        let got = model.trees.first().and_then(|t| match t.nodes()[0] {
            Node::Split { feature, threshold, .. } => {
                let n_left = rows.iter().filter(|r| r[feature] <= threshold).count();
                Some((feature, threshold, n_left))
            }
            Node::Leaf { .. } => None,
        });
        if got != exhaustive_split(&rows, &y, min_leaf) {
            split_mismatches += 1;
        }
    }

    let mut mse_violations = 0;
    let mut short_runs = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0] * r[1] + r[2] + rng.random_range(-0.5..0.5)).collect();
        let m = DesignMatrix::from_rows(vec!["a".into(), "b".into(), "c".into()], &rows, y.clone()).unwrap();
        let params = TrainParams {
            max_trees: 100,
            learning_rate: 0.3,
            max_depth: 3,
            min_samples_leaf: 2,
            early_stopping_rounds: 100,
            ..TrainParams::default()
        };
        let model = fit(&m, &m, &params).unwrap();
        let h = &model.train_mse_history;
        short_runs += usize::from(h.len() != 101);
        mse_violations += h.windows(2).filter(|w| w[1] > w[0]).count();
        let metrics = regression_metrics(&model.predict(&m).unwrap(), &y).unwrap();
        *rmse_ok &= metrics.rmse >= metrics.mae;
    }
    Outcome {
        id: 6,
        name: "GBDT correctness",
        pass: split_mismatches == 0 && mse_violations == 0 && short_runs == 0,
        detail: format!(
            "{split_mismatches}/{instances} root split mismatches, {mse_violations} MSE increases over 20x100 stages ({short_runs} runs stopped early)"
        ),
    }
}

fn window_samples(d: &FarmDataset, f: &FailureRecord, channel: &str) -> Vec<(Timestamp, f64)> {
    let t = d.turbine(&f.turbine_id).unwrap();
    let (lo, hi) = (f.failure_time.plus_days(-60), f.failure_time.plus_days(-15));
    t.timestamps()
        .iter()
        .zip(t.channel(channel).unwrap())
        .filter(|(ts, _)| **ts >= lo && **ts < hi)
        .map(|(ts, v)| (*ts, v.unwrap()))
        .collect()
}

fn simulator_physics() -> Outcome {
    // fixed point against the 2x2 linear solve
    let mut worst: f64 = 0.0;
    for (h, c, power, ambient, m) in [(0.25, 0.05, 1500.0, 10.0, 1.0), (0.2, 0.1, 800.0, -5.0, 1.4), (0.0, 0.1, 2000.0, 20.0, 2.0)] {
        let p = TurbineParams { h, c, ..TurbineParams::default() };
        let inputs = ThermalInputs {
            power_kw: power,
            ambient,
            fault_multiplier: m,
        };
        let mut s = ThermalState { ims: ambient, hss: ambient };
        for _ in 0..100_000 {
            s = thermal_step(s, inputs, &p);
        }
        let (qi, qh) = (p.a_ims * power * m, p.a_hss * power);
        // [c+h, -h; -h, c+h] [x; y] = [qi; qh]
        let det = (c + h) * (c + h) - h * h;
        let x = ((c + h) * qi + h * qh) / det;
        let y = (h * qi + (c + h) * qh) / det;
        worst = worst.max((s.ims - ambient - x).abs()).max((s.hss - ambient - y).abs());
    }

    // h = 0: the same farm with and without fault heat
    let mut faulty = SimConfig::default();
    faulty.params.h = 0.0;
    let mut healthy = faulty.clone();
    healthy.faults.clear();
    let (a, failures) = simulate_farm(&faulty).unwrap();
    let (b, _) = simulate_farm(&healthy).unwrap();
    let mut hss_ok = true;
    let mut ims_ok = true;
    let mut detail = Vec::new();
    for f in &failures {
        let mean = |s: &[(Timestamp, f64)]| s.iter().map(|v| v.1).sum::<f64>() / s.len() as f64;
        let diff = |ch: &str, sd: f64| {
            let x = window_samples(&a, f, ch);
            let y: Vec<(Timestamp, f64)> = window_samples(&b, f, ch).into_iter().filter(|p| x.binary_search_by_key(&p.0, |q| q.0).is_ok()).collect();
            assert_eq!(x.len(), y.len());
            let se = sd * (2.0 / x.len() as f64).sqrt();
            (mean(&x) - mean(&y), se)
        };
        let (dh, se_h) = diff(HSS_BEARING_TEMP, faulty.noise.hss_temp);
        let (di, se_i) = diff(IMS_BEARING_TEMP, faulty.noise.ims_temp);
        hss_ok &= dh.abs() < 3.0 * se_h;
        ims_ok &= di > 3.0 * se_i;
        detail.push(format!("{} dHSS {dh:.4} dIMS {di:.3}", f.turbine_id));
    }
    Outcome {
        id: 7,
        name: "simulator physics",
        pass: worst < 1e-9 && hss_ok && ims_ok,
        detail: format!("fixed point error {worst:.2e}; {}", detail.join(", ")),
    }
}

#[test]
fn acceptance() {
    let mut rmse_ok = true;
    let mut out = Vec::new();
    out.push(oracle_equivalence());
    out.push(schematic_window());
    let mut gbdt = gbdt_correctness(&mut rmse_ok);
    out.push(simulator_physics());
    experiment_criteria(&mut out, &mut rmse_ok);
    gbdt.pass &= rmse_ok;
    gbdt.detail.push_str(&format!("; RMSE >= MAE everywhere: {rmse_ok}"));
    out.push(gbdt);
    out.sort_by_key(|o| o.id);

    for o in &out {
        println!("criterion {} {}: {} ({})", o.id, o.name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u8> = out.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
