//! Verification suites: run configuration, report types, CSV/manifest
//! output and experiment dispatch.
//!
//! Every experiment is a pure function of its [`RunConfig`]; sweep points run
//! concurrently but reports are assembled in a fixed order, so a run is
//! reproducible bit-for-bit from `(config, seed)`.

pub mod experiments;
pub mod fields;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::DomainSpec;
use crate::error::{invalid, Error, Result};

/// Experiments in the order `all` runs them.
pub const EXPERIMENTS: [&str; 11] = [
    "l2",
    "lq",
    "interface",
    "oscillation",
    "caccioppoli",
    "pressure-osc",
    "divergence",
    "sharp-maximal",
    "oracle",
    "geometry",
    "solve",
];

/// Geometry families selectable from a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainKind {
    PeriodicBox,
    DirichletBox,
    HalfStrip,
    LipschitzGraph,
}

impl DomainKind {
    pub fn name(self) -> &'static str {
        match self {
            DomainKind::PeriodicBox => "periodic-box",
            DomainKind::DirichletBox => "dirichlet-box",
            DomainKind::HalfStrip => "half-strip",
            DomainKind::LipschitzGraph => "lipschitz-graph",
        }
    }

    /// Unit-size two-dimensional instance with `n` cells per axis. The graph
    /// domain is `x₁ > 1/8 + ρ·(1/2 − |x₂ − 1/2|)`, whose Lipschitz constant
    /// is exactly `ρ`.
    pub fn build(self, n: usize, rho: f64) -> Result<DomainSpec> {
        match self {
            DomainKind::PeriodicBox => DomainSpec::periodic_box(2, 1.0, n),
            DomainKind::DirichletBox => DomainSpec::dirichlet_box(2, 1.0, n),
            DomainKind::HalfStrip => DomainSpec::half_strip(2, 1.0, 1.0, n),
            DomainKind::LipschitzGraph => {
                DomainSpec::lipschitz_graph_fn(2, 1.0, n, |x| 0.125 + rho * (0.5 - (x[0] - 0.5).abs()), rho)
            }
        }
    }
}

/// All parameters of one experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub seed: u64,
    /// Relative residual tolerance of every solve.
    pub tol: f64,
    pub domains: Vec<DomainKind>,
    /// Grid sizes (cells per axis); single-grid experiments use the first.
    pub grids: Vec<usize>,
    /// Integrability exponents.
    pub q: Vec<f64>,
    /// Interface counts of the layered sweeps.
    pub jumps: Vec<usize>,
    /// Radius ratios `κ = R/r`.
    pub kappas: Vec<f64>,
    pub delta: f64,
    /// Layer viscosities (alternated, or range endpoints for random layers).
    pub viscosities: Vec<f64>,
    /// Amplitude `ε` of an `x₂`-dependent perturbation added to the layers.
    pub perturbation: f64,
    /// Imposed shear stress of the interface scan.
    pub sigma: f64,
    /// Inner radius `r`.
    pub radius: f64,
    /// Outer radius `R`.
    pub outer_radius: f64,
    /// Flatness of the graph domain.
    pub rho: f64,
    /// Ensemble size of randomized experiments.
    pub ensemble: usize,
    /// Finest level of the dyadic filtration.
    pub levels: u32,
    /// Retention fraction of the dyadic filtration.
    pub retention: f64,
    /// Output directory for CSV and manifest.
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: "solve".into(),
            seed: 20_260_301,
            tol: 1e-10,
            domains: vec![DomainKind::PeriodicBox],
            grids: vec![64],
            q: vec![2.0],
            jumps: vec![4],
            kappas: vec![16.0, 32.0, 64.0],
            delta: 0.25,
            viscosities: vec![0.3, 3.0],
            perturbation: 0.0,
            sigma: 1.0,
            radius: 0.125,
            outer_radius: 0.25,
            rho: 0.05,
            ensemble: 20,
            levels: 4,
            retention: 0.5,
            output: None,
        }
    }
}

impl RunConfig {
    /// Defaults of a named experiment (the acceptance settings).
    pub fn for_experiment(name: &str) -> Result<Self> {
        use DomainKind::*;
        let base = Self { experiment: name.to_string(), ..Self::default() };
        let cfg = match name {
            "solve" => base,
            "l2" => Self {
                domains: vec![PeriodicBox, HalfStrip],
                grids: vec![128],
                jumps: vec![1, 2, 4, 8, 16, 32, 64],
                q: vec![2.0],
                ..base
            },
            "lq" => Self {
                domains: vec![PeriodicBox, HalfStrip],
                grids: vec![128],
                jumps: vec![1, 2, 4, 8, 16, 32, 64],
                q: vec![4.0 / 3.0, 4.0, 8.0],
                ..base
            },
            "interface" => Self {
                domains: vec![HalfStrip],
                grids: vec![64, 128, 256],
                viscosities: vec![1.0, 10.0],
                delta: 0.1,
                ..base
            },
            "oscillation" => Self {
                grids: vec![256],
                jumps: vec![12],
                outer_radius: 0.375,
                ensemble: 4,
                ..base
            },
            "caccioppoli" | "pressure-osc" => Self {
                grids: vec![128],
                jumps: vec![32],
                radius: 0.125,
                outer_radius: 0.25,
                ensemble: 20,
                ..base
            },
            "divergence" => Self {
                domains: vec![DirichletBox, HalfStrip, LipschitzGraph],
                grids: vec![32, 64, 128],
                tol: 1e-12,
                ..base
            },
            "sharp-maximal" => Self {
                domains: vec![PeriodicBox, LipschitzGraph],
                grids: vec![32, 64],
                q: vec![2.0, 4.0],
                ensemble: 1000,
                ..base
            },
            "oracle" => Self {
                domains: vec![HalfStrip],
                grids: vec![16, 32, 64],
                jumps: vec![1, 8],
                tol: 1e-13,
                ..base
            },
            "geometry" => Self {
                domains: vec![DirichletBox, HalfStrip, LipschitzGraph],
                grids: vec![32],
                ..base
            },
            other => return Err(invalid(format!("unknown experiment '{other}'"))),
        };
        Ok(cfg)
    }

    /// Defaults of `name` overlaid with the keys of a TOML document.
    pub fn from_toml(name: &str, text: &str) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        if let Some(exp) = overlay.get("experiment").and_then(|v| v.as_str()) {
            if exp != name {
                return Err(invalid(format!("config is for '{exp}', requested '{name}'")));
            }
        }
        let base = Self::for_experiment(name)?;
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Parse(e.to_string()))?;
        for (k, v) in overlay {
            table.insert(k, v);
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit; larger seeds could not be recorded
        if i64::try_from(self.seed).is_err() {
            return Err(invalid(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        if let Some(q) = self.q.iter().find(|q| !(1.2..=16.0).contains(*q)) {
            return Err(invalid(format!("exponent q = {q} outside [1.2, 16]")));
        }
        if let Some(k) = self.kappas.iter().find(|k| !(**k >= 16.0)) {
            return Err(invalid(format!("radius ratio κ = {k} below 16")));
        }
        if !(1e-14..=1e-6).contains(&self.tol) {
            return Err(invalid(format!("tolerance {} not in [1e-14, 1e-6]", self.tol)));
        }
        if self.grids.is_empty() || self.grids.iter().any(|n| *n < 8) {
            return Err(invalid("grid sizes must be nonempty and at least 8"));
        }
        if self.domains.is_empty() {
            return Err(invalid("at least one domain is required"));
        }
        if self.viscosities.is_empty() || self.viscosities.iter().any(|v| !(*v > 0.0)) {
            return Err(invalid("viscosities must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("δ = {} not in (0, 1)", self.delta)));
        }
        if !(self.radius > 0.0 && self.radius < self.outer_radius) {
            return Err(invalid("need 0 < radius < outer_radius"));
        }
        if self.ensemble == 0 {
            return Err(invalid("ensemble size must be positive"));
        }
        Ok(())
    }

    /// Canonical TOML text of the configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of [`RunConfig::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub(crate) fn grid(&self) -> usize {
        self.grids[0]
    }
}

/// One measured estimate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateReport {
    pub experiment: String,
    /// Sweep point, `key=value` pairs separated by `;`.
    pub param: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs/rhs`, NaN when `rhs = 0` (degenerate).
    pub ratio: f64,
    pub pass: bool,
}

impl EstimateReport {
    pub fn new(experiment: &str, param: impl Into<String>, lhs: f64, rhs: f64, pass: bool) -> Self {
        let ratio = if rhs > 0.0 { lhs / rhs } else { f64::NAN };
        Self { experiment: experiment.into(), param: param.into(), lhs, rhs, ratio, pass }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.rhs > 0.0)
    }
}

/// Result of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub experiment: String,
    /// The pass criterion in words (written to the CSV header).
    pub criterion: String,
    pub rows: Vec<EstimateReport>,
    /// Named summary measurements (written to the CSV header).
    pub summary: Vec<(String, f64)>,
    pub pass: bool,
}

impl Report {
    pub fn summary_value(&self, key: &str) -> Option<f64> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// CSV with `#` header lines (criterion, verdict, summary), then columns
    /// `experiment,param,lhs,rhs,ratio,pass`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# criterion: {}", self.criterion)?;
        writeln!(w, "# pass: {}", self.pass)?;
        for (k, v) in &self.summary {
            writeln!(w, "# {k}: {v:e}")?;
        }
        let mut csv = csv::Writer::from_writer(w);
        for row in &self.rows {
            csv.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        csv.flush()?;
        Ok(())
    }
}

/// Run one named experiment.
pub fn run(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    use experiments::*;
    match cfg.experiment.as_str() {
        "solve" => run_solve(cfg),
        "l2" => run_l2_estimate(cfg),
        "lq" => run_lq_sweep(cfg),
        "interface" => run_interface_scan(cfg),
        "oscillation" => run_oscillation_decay(cfg),
        "caccioppoli" => run_caccioppoli(cfg),
        "pressure-osc" => run_pressure_oscillation(cfg),
        "divergence" => run_divergence_check(cfg),
        "sharp-maximal" => run_sharp_maximal(cfg),
        "oracle" => run_oracle_checks(cfg),
        "geometry" => run_geometry_checks(cfg),
        other => Err(invalid(format!("unknown experiment '{other}'"))),
    }
}

/// Write `<dir>/<experiment>.csv` and append to `<dir>/manifest.txt`.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, report: &Report) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.csv", report.experiment));
    report.write_csv(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
    let mut manifest =
        std::fs::OpenOptions::new().create(true).append(true).open(dir.join("manifest.txt"))?;
    writeln!(manifest, "[{}]", report.experiment)?;
    writeln!(manifest, "csv = \"{}\"", path.file_name().and_then(|s| s.to_str()).unwrap_or_default())?;
    writeln!(manifest, "config_sha256 = \"{}\"", cfg.hash())?;
    writeln!(manifest, "seed = {}", cfg.seed)?;
    writeln!(manifest, "pass = {}", report.pass)?;
    writeln!(manifest, "stokes_lab = \"{}\"", env!("CARGO_PKG_VERSION"))?;
    writeln!(manifest, "backend = \"faer 0.24 sparse LDLT; nalgebra 0.35 dense oracle\"")?;
    writeln!(manifest, "config = '''\n{}'''\n", cfg.canonical())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_stably() {
        for name in EXPERIMENTS {
            let cfg = RunConfig::for_experiment(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.hash(), RunConfig::for_experiment(name).unwrap().hash());
        }
        assert!(RunConfig::for_experiment("nope").is_err());
    }

    #[test]
    fn toml_overlay() {
        let cfg = RunConfig::from_toml("l2", "seed = 5\njumps = [1, 2]\ndomains = [\"half-strip\"]\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.jumps, vec![1, 2]);
        assert_eq!(cfg.domains, vec![DomainKind::HalfStrip]);
        assert_eq!(cfg.grids, vec![128]);
        assert!(RunConfig::from_toml("l2", "sede = 5").is_err());
        assert!(RunConfig::from_toml("l2", "q = [20.0]").is_err());
        assert!(RunConfig::from_toml("l2", "kappas = [8.0]").is_err());
        assert!(RunConfig::from_toml("l2", "experiment = \"lq\"").is_err());
        let back = RunConfig::from_toml("l2", &cfg.canonical()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn csv_layout() {
        let report = Report {
            experiment: "x".into(),
            criterion: "ratio ≤ 2".into(),
            rows: vec![EstimateReport::new("x", "n=8", 1.0, 2.0, true), EstimateReport::new("x", "n=16", 0.0, 0.0, false)],
            summary: vec![("spread".into(), 1.5)],
            pass: true,
        };
        assert!(report.rows[1].is_degenerate());
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# criterion: ratio ≤ 2");
        assert_eq!(lines[1], "# pass: true");
        assert_eq!(lines[3], "experiment,param,lhs,rhs,ratio,pass");
        assert_eq!(lines[4], "x,n=8,1.0,2.0,0.5,true");
        assert_eq!(lines[5], "x,n=16,0.0,0.0,NaN,false");
    }
}
