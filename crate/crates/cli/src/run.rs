use serde_json::{json, Value};
use sunspin::analysis::{fit_damped_sine, fit_sine};
use sunspin::protocols::*;
use sunspin::readout::{ANCILLA_A, ANCILLA_B};
use sunspin::spin_core::{index_of, projection, DIM};

use crate::config::{Experiment, Scan};
use crate::output::Output;
use crate::CliError;

fn sim(e: sunspin::Error) -> CliError {
    CliError::Simulation(e.to_string())
}

fn frac(m: f64) -> String {
    format!("{}/2", (2.0 * m).round() as i64)
}

fn level_header(prefix: &str, unit: &str) -> Vec<String> {
    (0..DIM).map(|k| format!("{prefix}({}) [{unit}]", frac(projection(k)))).collect()
}

fn scan_column(r: &InterferometerResult) -> String {
    match r.scan_name.rsplit_once('_') {
        Some((name, unit)) => format!("{name} [{unit}]"),
        None => r.scan_name.clone(),
    }
}

fn write_interferometer(out: &mut Output, r: &InterferometerResult) -> Result<(), CliError> {
    let mut header = vec![scan_column(r)];
    header.extend(level_header("P", "1"));
    let rows: Vec<Vec<f64>> = r.scan.iter().zip(r.mean_populations()).map(|(x, p)| std::iter::once(*x).chain(p).collect()).collect();
    out.csv("populations.csv", &header, &rows)?;
    if r.shots.iter().any(|s| !s.is_empty()) {
        let mut header = vec!["point [1]".to_string(), scan_column(r), "shot [1]".to_string()];
        header.extend(level_header("N", "atoms"));
        let mut rows = Vec::new();
        for (p, shots) in r.shots.iter().enumerate() {
            for s in shots {
                let mut row = vec![p as f64, r.scan[p], s.shot as f64];
                row.extend(s.detected.iter().map(|&c| c as f64));
                rows.push(row);
            }
        }
        out.csv("counts.csv", &header, &rows)?;
    }
    Ok(())
}

fn fit_json(fit: sunspin::Result<sunspin::analysis::FitResult>) -> Value {
    match fit {
        Ok(f) => serde_json::to_value(f).unwrap(),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

/// Runs a validated experiment, writing CSV tables and `summary.json`.
pub fn run_experiment(x: &Experiment, out: &mut Output) -> Result<(), CliError> {
    let protocol = x.config.protocol.name();
    let summary = match &x.scan {
        Scan::Leakage(c) => {
            let rows = leakage_scan(c, &x.tol).map_err(sim)?;
            let header = ["ratio [1]", "max Oz/N [1]", "min Oz/N [1]", "mean Oz/N [1]"].map(String::from);
            out.csv("leakage.csv", &header, &rows.iter().map(|r| vec![r.ratio, r.max, r.min, r.mean]).collect::<Vec<_>>())?;
            json!({ "protocol": protocol, "rows": rows })
        }
        scan => {
            let model = x.model.as_ref().expect("validated model");
            let (r, extra) = match scan {
                Scan::Rabi(c) => {
                    let r = rabi_scan(c, model, &x.noise, &x.settings, &x.tol).map_err(sim)?;
                    let target = if c.initial == c.pair.low { c.pair.high } else { c.pair.low };
                    let (l, h) = c.pair.indices();
                    let outside = r.mean_populations().iter().map(|p| 1.0 - p[l] - p[h]).fold(0.0, f64::max);
                    let fit = fit_damped_sine(&r.scan, &r.level(target).map_err(sim)?, None);
                    (r, json!({ "fit_level": target, "fit": fit_json(fit), "max_population_outside_pair": outside }))
                }
                Scan::Ramsey(c) => {
                    let r = ramsey(c, model, &x.noise, &x.settings, &x.tol).map_err(sim)?;
                    let other = if c.initial == c.pair.low { c.pair.high } else { c.pair.low };
                    let fit = fit_sine(&r.scan, &r.level(other).map_err(sim)?, None);
                    (r, json!({ "fit_level": other, "fit": fit_json(fit) }))
                }
                Scan::Dual(c) => {
                    let r = parallel_ramsey(c, model, &x.noise, &x.settings, &x.tol).map_err(sim)?;
                    let inv = match fit_dual_fringes(&r, c.window_detuning, model.fields.q, model.fields.b) {
                        Ok(v) => serde_json::to_value(v).unwrap(),
                        Err(e) => json!({ "error": e.to_string() }),
                    };
                    (r, json!({ "signals": DUAL_SIGNALS, "inversion": inv }))
                }
                Scan::Ancilla(c) => {
                    let r = ancilla_measurement(c, model, &x.noise, &x.settings, &x.tol).map_err(sim)?;
                    let (a, b) = (index_of(ANCILLA_A).unwrap(), index_of(ANCILLA_B).unwrap());
                    let oz: Vec<f64> = r.mean_populations().iter().map(|p| p[a] - p[b]).collect();
                    (r, json!({ "o_z_per_atom": oz }))
                }
                Scan::Leakage(_) => unreachable!(),
            };
            write_interferometer(out, &r)?;
            let mut s = json!({ "protocol": protocol, "points": r.scan.len(), "shots_per_point": x.settings.n_shots });
            s.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
            s
        }
    };
    out.json("summary.json", &summary)
}
