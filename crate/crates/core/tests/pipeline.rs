use nbm_core::detection::{empirical_quantile, episodes_at, raw_target_scores, threshold_sweep, DEFAULT_MERGE_GAP_S};
use nbm_core::evaluation::{label_episodes, pr_curve, Coverage, EvalConfig};
use nbm_core::features::{build_design_matrix, standard_configs, ModelName, DEFAULT_LAG_STEPS};
use nbm_core::gbdt::TrainParams;
use nbm_core::nbm::{compute_residuals, train_nbm, ExclusionSettings, NbmModel, Pooling, TrainSpec};
use nbm_core::scada_data::{FailureRecord, FarmDataset, Interval, SplitIntervals, Timestamp, IMS_BEARING_TEMP};
use nbm_core::simulator::{simulate_farm, FaultScenario, SimConfig};

fn ts(s: &str) -> Timestamp {
    s.parse().unwrap()
}

fn farm() -> (FarmDataset, Vec<FailureRecord>) {
    let cfg = SimConfig {
        seed: 21,
        n_turbines: 3,
        period: Interval {
            start: ts("2010-01-01T00:00:00Z"),
            end: ts("2010-07-01T00:00:00Z"),
        },
        faults: vec![
            FaultScenario {
                turbine_id: "T01".into(),
                failure_time: ts("2010-06-10T00:00:00Z"),
                onset_lead_days: 60,
                severity: 0.5,
            },
            FaultScenario {
                turbine_id: "T03".into(),
                failure_time: ts("2010-06-25T00:00:00Z"),
                onset_lead_days: 60,
                severity: 0.5,
            },
        ],
        ..SimConfig::default()
    };
    simulate_farm(&cfg).unwrap()
}

fn spec(pooling: Pooling) -> TrainSpec {
    TrainSpec {
        split: SplitIntervals {
            train: Interval {
                start: ts("2010-01-01T00:00:00Z"),
                end: ts("2010-03-01T00:00:00Z"),
            },
            validation: Interval {
                start: ts("2010-03-01T00:00:00Z"),
                end: ts("2010-04-01T00:00:00Z"),
            },
            test: Interval {
                start: ts("2010-04-01T00:00:00Z"),
                end: ts("2010-07-01T00:00:00Z"),
            },
        },
        exclusion: ExclusionSettings::default(),
        params: TrainParams {
            max_trees: 30,
            learning_rate: 0.3,
            max_depth: 4,
            ..TrainParams::default()
        },
        pooling,
    }
}

fn model(d: &FarmDataset, failures: &[FailureRecord], name: ModelName, pooling: Pooling) -> NbmModel {
    let cfg = standard_configs(&DEFAULT_LAG_STEPS)
        .unwrap()
        .into_iter()
        .find(|c| c.name == name)
        .unwrap();
    train_nbm(d, failures, &cfg, &spec(pooling)).unwrap()
}

#[test]
fn sweep_matches_single_threshold_runs() {
    let (d, _) = farm();
    let series = raw_target_scores(&d, IMS_BEARING_TEMP).unwrap();
    let mut reference: Vec<f64> = series.iter().flat_map(|r| r.residuals.iter().copied()).collect();
    let quantiles: Vec<f64> = (1..=20).map(|i| 0.5 + 0.49 * i as f64 / 20.0).collect();
    let sweep = threshold_sweep(&series, &reference, &quantiles, DEFAULT_MERGE_GAP_S).unwrap();
    assert_eq!(sweep.len(), 20);
    reference.sort_by(f64::total_cmp);
    let mut last = usize::MAX;
    for point in &sweep {
        let q = point.quantile.unwrap();
        assert_eq!(point.threshold, empirical_quantile(&reference, q).unwrap());
        assert_eq!(point.episodes, episodes_at(&series, point.threshold, DEFAULT_MERGE_GAP_S));
        let alarms: usize = series
            .iter()
            .flat_map(|r| &r.residuals)
            .filter(|v| **v > point.threshold)
            .count();
        assert!(alarms <= last);
        last = alarms;
    }
}

#[test]
fn pr_curve_points_equal_independent_labelling() {
    let (d, failures) = farm();
    let series = raw_target_scores(&d, IMS_BEARING_TEMP).unwrap();
    let reference: Vec<f64> = series.iter().flat_map(|r| r.residuals.iter().copied()).collect();
    let quantiles: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let sweep = threshold_sweep(&series, &reference, &quantiles, DEFAULT_MERGE_GAP_S).unwrap();
    let cfg = EvalConfig::default();
    let coverage = Coverage::from_dataset(&d);
    let curve = pr_curve(&sweep, &failures, &cfg, &coverage).unwrap();
    assert_eq!(curve.points.len(), sweep.len());
    for (p, s) in curve.points.iter().zip(&sweep) {
        assert_eq!(p.threshold, s.threshold);
        assert_eq!(p.counts, label_episodes(&s.episodes, &failures, &cfg, &coverage).unwrap());
    }
    // the lowest threshold alarms almost everywhere
    assert_eq!(curve.points[0].recall(), Some(1.0));
}

#[test]
fn residuals_are_observed_minus_predicted() {
    let (d, failures) = farm();
    let m = model(&d, &failures, ModelName::Acnbm, Pooling::Pooled);
    let residuals = compute_residuals(&m, &d).unwrap();
    let design = build_design_matrix(&d, &m.config).unwrap();
    let pred = m.predict(&design).unwrap();
    let flat: Vec<f64> = residuals.iter().flat_map(|r| r.residuals.iter().copied()).collect();
    assert_eq!(flat.len(), design.n_rows());
    for (i, r) in flat.iter().enumerate() {
        assert_eq!(*r, design.target()[i] - pred[i]);
    }
    // the first lagged rows of every turbine are dropped
    for (r, t) in residuals.iter().zip(d.turbines()) {
        assert_eq!(r.timestamps.len(), t.len() - 6);
        assert_eq!(r.timestamps[0], t.timestamps()[6]);
    }
}

#[test]
fn model_file_round_trips() {
    let (d, failures) = farm();
    for pooling in [Pooling::Pooled, Pooling::PerTurbine] {
        let m = model(&d, &failures, ModelName::Cnbm, pooling);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = NbmModel::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(compute_residuals(&back, &d).unwrap(), compute_residuals(&m, &d).unwrap());
    }
}

#[test]
fn simultaneity_model_fits_healthy_data_better() {
    let (d, failures) = farm();
    let mae = |name| {
        let m = model(&d, &failures, name, Pooling::Pooled);
        let r = compute_residuals(&m, &d).unwrap();
        let v: Vec<f64> = r
            .iter()
            .filter(|s| s.turbine_id == "T02")
            .flat_map(|s| s.residuals.iter().map(|x| x.abs()))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mae(ModelName::Snbm) < mae(ModelName::Cnbm));
}
