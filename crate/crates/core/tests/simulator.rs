use nbm_core::scada_data::{Interval, Timestamp, HSS_BEARING_TEMP, IMS_BEARING_TEMP, SECONDS_PER_DAY};
use nbm_core::simulator::{simulate_farm, thermal_step, wind_process, SimConfig, ThermalInputs, ThermalState, TurbineParams};

fn small(seed: u64) -> SimConfig {
    let start: Timestamp = "2010-01-01T00:00:00Z".parse().unwrap();
    let mut cfg = SimConfig {
        seed,
        n_turbines: 3,
        period: Interval {
            start,
            end: start.plus_days(120),
        },
        ..SimConfig::default()
    };
    cfg.faults.clear();
    cfg.faults.push(nbm_core::simulator::FaultScenario {
        turbine_id: "T02".into(),
        failure_time: start.plus_days(70),
        onset_lead_days: 40,
        severity: 0.5,
    });
    cfg
}

fn column(d: &nbm_core::scada_data::FarmDataset, id: &str, ch: &str) -> Vec<(Timestamp, f64)> {
    let t = d.turbine(id).unwrap();
    t.timestamps()
        .iter()
        .zip(t.channel(ch).unwrap())
        .map(|(ts, v)| (*ts, v.unwrap()))
        .collect()
}

#[test]
fn wind_is_persistent_with_plausible_mean() {
    let w = wind_process(7, 52_560, 600);
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    assert!((6.0..=10.0).contains(&mean), "mean {mean}");
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let cov = w.windows(2).map(|p| (p[0] - mean) * (p[1] - mean)).sum::<f64>() / (n - 1.0);
    assert!(cov / var > 0.9, "lag-1 autocorrelation {}", cov / var);
    assert!(w.iter().all(|x| *x >= 0.0));
}

#[test]
fn thermal_step_converges_for_every_stable_coupling() {
    for (h, c) in [(0.0, 0.05), (0.25, 0.05), (0.45, 0.1), (0.9, 0.05)] {
        let p = TurbineParams { h, c, ..TurbineParams::default() };
        let inputs = ThermalInputs {
            power_kw: 1500.0,
            ambient: -3.0,
            fault_multiplier: 1.2,
        };
        let mut s = ThermalState { ims: 0.0, hss: 0.0 };
        for _ in 0..20_000 {
            s = thermal_step(s, inputs, &p);
        }
        let next = thermal_step(s, inputs, &p);
        assert!((next.ims - s.ims).abs() < 1e-12 && (next.hss - s.hss).abs() < 1e-12, "h={h} c={c}");
        assert!(s.ims > inputs.ambient && s.hss > inputs.ambient);
    }
}

#[test]
fn same_seed_same_farm_and_seed_changes_it() {
    let (a, fa) = simulate_farm(&small(3)).unwrap();
    let (b, fb) = simulate_farm(&small(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(fa, fb);
    let (c, _) = simulate_farm(&small(4)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn fault_touches_only_its_turbine_before_failure() {
    let faulty = small(5);
    let mut healthy = faulty.clone();
    healthy.faults.clear();
    let (a, failures) = simulate_farm(&faulty).unwrap();
    let (b, _) = simulate_farm(&healthy).unwrap();
    assert_eq!(failures.len(), 1);
    for id in ["T01", "T03"] {
        assert_eq!(a.turbine(id), b.turbine(id), "{id}");
    }
    let f = failures[0].failure_time;
    let onset = f.plus_days(-40);
    let ims_a = column(&a, "T02", IMS_BEARING_TEMP);
    let ims_b = column(&b, "T02", IMS_BEARING_TEMP);
    // identical up to onset
    let before: Vec<_> = ims_a.iter().take_while(|(t, _)| *t < onset).collect();
    assert!(!before.is_empty());
    assert!(before.iter().zip(&ims_b).all(|(x, y)| x.1 == y.1));
    // hotter in the last week before failure
    let week = |s: &[(Timestamp, f64)]| {
        let v: Vec<f64> = s
            .iter()
            .filter(|(t, _)| *t >= f.plus_days(-7) && *t < f)
            .map(|(_, v)| *v)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(week(&ims_a) > week(&ims_b) + 0.5);
}

#[test]
fn failed_turbine_is_down_for_the_repair_gap() {
    let cfg = small(6);
    let gap = cfg.repair_gap_days.unwrap();
    let (d, failures) = simulate_farm(&cfg).unwrap();
    let f = failures[0].failure_time;
    let t = d.turbine("T02").unwrap();
    assert!(!t.timestamps().iter().any(|ts| *ts >= f && *ts < f.plus_days(gap)));
    assert!(t.timestamps().contains(&f.plus_days(gap)));
    let full = d.turbine("T01").unwrap().len();
    assert_eq!(full - t.len(), (gap * SECONDS_PER_DAY / cfg.resolution_s) as usize);
}

#[test]
fn hss_without_coupling_ignores_the_fault() {
    let mut faulty = small(8);
    faulty.params.h = 0.0;
    let mut healthy = faulty.clone();
    healthy.faults.clear();
    let (a, failures) = simulate_farm(&faulty).unwrap();
    let (b, _) = simulate_farm(&healthy).unwrap();
    let f = failures[0].failure_time;
    let upto = |d| column(d, "T02", HSS_BEARING_TEMP).into_iter().filter(|(t, _)| *t < f).collect::<Vec<_>>();
    assert_eq!(upto(&a), upto(&b));
    assert_ne!(column(&a, "T02", IMS_BEARING_TEMP)[..upto(&a).len()], column(&b, "T02", IMS_BEARING_TEMP)[..upto(&a).len()]);
}

#[test]
fn scenario_toml_round_trips() {
    let cfg = SimConfig::default();
    let back = SimConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
}
