//! The four experiment commands behind the CLI.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::asymptotics::{clt_covariance, fixed_point_and_jacobian, AsymptoticReport, Regime};
use crate::config::{ExperimentConfig, OutputFormat, VariantKind};
use crate::engine::{run, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::harness::{
    compare_to_theory, monte_carlo, write_histogram_csv, write_json, write_montecarlo_csv, write_trajectory_csv,
    Comparison, MonteCarloResult,
};
use crate::numerics::DenseVector;
use crate::protocols::{check_contraction, ContractionReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Configuration problems exit with 2, everything else with 1.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Json(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub contraction: ContractionReport,
    pub hurwitz_margin: Option<f64>,
    /// `1/(2L)` when `a = 1`.
    pub step_bound: Option<f64>,
    pub failures: Vec<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn render(&self) -> String {
        let c = &self.contraction;
        let mut s = String::new();
        let _ = writeln!(s, "rho = {:.12} ({})", c.rho, if c.passes { "< 1" } else { "not < 1" });
        let _ = writeln!(s, "row stochastic: {}", c.flags.row_stochastic);
        let _ = writeln!(s, "doubly stochastic per draw: {}", c.flags.doubly_stochastic_each_draw);
        let _ = writeln!(s, "doubly stochastic in mean: {}", c.flags.doubly_stochastic_in_mean);
        match self.hurwitz_margin {
            Some(l) => {
                let _ = writeln!(s, "hurwitz margin L = {l:.12}");
            }
            None => {
                let _ = writeln!(s, "hurwitz margin L = unavailable");
            }
        }
        if let Some(b) = self.step_bound {
            let _ = writeln!(s, "step condition gamma_star > 1/(2L) = {b:.12}");
        }
        for f in &self.failures {
            let _ = writeln!(s, "FAIL {f}");
        }
        let _ = write!(s, "{}", if self.passed() { "all assumptions hold" } else { "assumption check failed" });
        s
    }
}

pub fn cmd_check(cfg: &ExperimentConfig) -> Result<CheckOutcome> {
    let exp = cfg.build()?;
    let contraction = check_contraction(&exp.protocol)?;
    let mut failures = Vec::new();
    let mut hurwitz_margin = None;
    let mut step_bound = None;
    if !contraction.passes {
        failures.push(format!("contraction: rho = {} is not below 1", contraction.rho));
    } else {
        match fixed_point_and_jacobian(&exp.protocol, exp.objective.as_ref(), &exp.noise, None) {
            Ok(fp) => hurwitz_margin = Some(fp.hurwitz_margin),
            Err(e) => failures.push(format!("hurwitz: {e}")),
        }
    }
    if Regime::of(&exp.schedule) == Regime::Critical {
        if let Some(l) = hurwitz_margin {
            let bound = 1.0 / (2.0 * l);
            step_bound = Some(bound);
            if exp.schedule.gamma_star() <= bound {
                failures.push(format!(
                    "step size: gamma_star = {} must exceed 1/(2L) = {bound} when a = 1",
                    exp.schedule.gamma_star()
                ));
            }
        }
    }
    Ok(CheckOutcome {
        contraction,
        hurwitz_margin,
        step_bound,
        failures,
    })
}

fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.dir.clone())
}

fn require_plain(cfg: &ExperimentConfig, what: &str) -> Result<()> {
    if cfg.run.variant == VariantKind::Weighted {
        return Err(Error::InvalidParameter(format!(
            "{what} covers the plain variant only; the weighted variant changes the noise law per agent"
        )));
    }
    Ok(())
}

pub fn cmd_analyze(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<AsymptoticReport> {
    let exp = cfg.build()?;
    let report = clt_covariance(&exp.protocol, exp.objective.as_ref(), &exp.noise, &exp.schedule, None)?;
    if cfg.output.wants(OutputFormat::Json) {
        write_json(&report, &output_dir(cfg, out).join("report.json"))?;
    }
    Ok(report)
}

pub fn cmd_run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrajectoryRecord> {
    let exp = cfg.build()?;
    let record = run(&cfg.run_config(&exp)?)?;
    if cfg.output.wants(OutputFormat::Csv) {
        write_trajectory_csv(&record, &output_dir(cfg, out).join("trajectory.csv"))?;
    }
    Ok(record)
}

pub fn render_run(record: &TrajectoryRecord) -> String {
    match record.last() {
        Some(s) => format!(
            "n = {}\naverage = {:?}\nagent 1 = {:?}\ndisagreement s_n = {:e}\nscaled disagreement = {:e}",
            s.n, s.average, s.agent1, s.disagreement, s.scaled_disagreement
        ),
        None => "no samples recorded".to_string(),
    }
}

pub fn cmd_montecarlo(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(MonteCarloResult, Comparison)> {
    require_plain(cfg, "the Monte Carlo comparison")?;
    let exp = cfg.build()?;
    let report = clt_covariance(&exp.protocol, exp.objective.as_ref(), &exp.noise, &exp.schedule, None)?;
    let theta_star = DenseVector::new(report.theta_star.clone())?;
    let rc = cfg.run_config(&exp)?;
    let mut mc = monte_carlo(&rc, cfg.montecarlo.runs, &theta_star, cfg.montecarlo.workers)?;
    mc.theoretical_v = Some(report.v_matrix.clone());
    let cmp = compare_to_theory(&mc, &report)?;
    let dir = output_dir(cfg, out);
    if cfg.output.wants(OutputFormat::Csv) {
        write_montecarlo_csv(&mc, &dir.join("montecarlo.csv"))?;
        for (k, (h, dens)) in mc.histograms.iter().zip(&cmp.density_at_centers).enumerate() {
            let name = if k == 0 {
                "histogram.csv".to_string()
            } else {
                format!("histogram_{}.csv", k + 1)
            };
            write_histogram_csv(h, dens, &dir.join(name))?;
        }
    }
    if cfg.output.wants(OutputFormat::Json) {
        write_json(&cmp, &dir.join("comparison.json"))?;
    }
    Ok((mc, cmp))
}

pub fn render_comparison(cmp: &Comparison) -> String {
    format!(
        "empirical covariance = {:?}\ntheoretical V = {:?}\nrelative error = {:.4}\nskewness = {:?}\nkurtosis = {:?}",
        cmp.empirical_cov, cmp.theoretical_v, cmp.rel_error, cmp.skewness, cmp.kurtosis
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundled() -> ExperimentConfig {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/paper.json");
        ExperimentConfig::from_path(Path::new(path)).unwrap()
    }

    #[test]
    fn bundled_config_passes_check() {
        let out = cmd_check(&bundled()).unwrap();
        assert!(out.passed(), "{}", out.render());
        assert!(out.contraction.rho < 1.0);
    }

    #[test]
    fn identity_protocol_fails_check() {
        let mut cfg = bundled();
        cfg.protocol.kind = crate::config::ProtocolKind::Identity;
        let out = cmd_check(&cfg).unwrap();
        assert!(!out.passed());
        assert!((out.contraction.rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn critical_step_condition_fails_check() {
        let mut cfg = bundled();
        cfg.step.a = 1.0;
        cfg.step.gamma_star = 0.5;
        let out = cmd_check(&cfg).unwrap();
        assert!(!out.passed());
        assert!(out.failures[0].contains("step size"));
        cfg.step.gamma_star = 0.6;
        assert!(cmd_check(&cfg).unwrap().passed());
    }

    #[test]
    fn exit_codes() {
        let usage = Error::Config {
            path: "x".into(),
            message: "y".into(),
        };
        assert_eq!(exit_code(&usage), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Numerical("z".into())), EXIT_FAILURE);
    }

    #[test]
    fn analyze_writes_report() {
        let dir = tempfile::tempdir().unwrap();
        let rep = cmd_analyze(&bundled(), Some(dir.path())).unwrap();
        assert!((rep.theta_star[0] - 1.0).abs() < 1e-12);
        let back: AsymptoticReport = crate::harness::read_json(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn weighted_variant_rejected_for_montecarlo() {
        let mut cfg = bundled();
        cfg.run.variant = VariantKind::Weighted;
        assert!(matches!(cmd_montecarlo(&cfg, None), Err(Error::InvalidParameter(_))));
    }
}
