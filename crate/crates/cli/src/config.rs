//! Run configuration: a strict TOML schema, command-line overrides and
//! validation against the numerical preconditions.
//!
//! Keys live in five tables (`system`, `ancilla`, `noise`, `run`,
//! `output`) and may be written either as tables or as flat dotted keys
//! such as `noise.lambda = 0.5`. Unknown keys are rejected. Keys left unset
//! in `noise` and `run` take a per-subcommand default, listed in `--help`.

use std::fmt;
use std::path::{Path, PathBuf};

use decoh_core::noise::NoiseKind;
use decoh_core::spinops::make_spin;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DECOH_OUT_DIR";
/// Output directory when neither config, flag nor environment names one.
pub const FALLBACK_OUT_DIR: &str = "decoh-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub n_s: usize,
    pub eta_s: Option<f64>,
    pub gamma_s: f64,
    pub delta_s: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            n_s: 1,
            eta_s: None,
            gamma_s: 0.5,
            delta_s: -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AncillaSection {
    pub n_a: usize,
    pub eta_a: f64,
    pub gamma_a: f64,
    pub delta_a: f64,
    pub ell: f64,
    pub delta_offset: f64,
    pub sigma2: f64,
}

impl Default for AncillaSection {
    fn default() -> Self {
        Self {
            n_a: 1,
            eta_a: 0.0,
            gamma_a: 0.0,
            delta_a: -1.0,
            ell: 0.5,
            delta_offset: 0.0,
            sigma2: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum KindName {
    White,
    Ou,
    OneOverF,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: Option<KindName>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub tau_c: f64,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            kind: None,
            lambda: None,
            alpha: None,
            tau_c: 5.0,
            f_min: 1e-3,
            f_max: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Master,
    Trajectories,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub t_final: Option<f64>,
    pub dt: Option<f64>,
    pub n_traj: Option<usize>,
    pub seed: u64,
    pub method: Method,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            formats: vec![Format::Csv, Format::Json, Format::Svg],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    pub ancilla: AncillaSection,
    pub noise: NoiseSection,
    pub run: RunSection,
    pub output: OutputSection,
}

/// A configuration problem, naming the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub constraint: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.constraint)
    }
}

impl std::error::Error for ConfigError {}

fn bad(key: &str, constraint: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        constraint: constraint.into(),
    }
}

/// Command-line values that replace file values when present.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// System boson number `system.n_s` [default: 1]
    #[arg(long = "n", global = true)]
    pub n_s: Option<usize>,
    /// `system.eta_s` [default: 1 for fig3b, else 0]
    #[arg(long, global = true)]
    pub eta_s: Option<f64>,
    /// `system.gamma_s` [default: 0.5]
    #[arg(long, global = true)]
    pub gamma_s: Option<f64>,
    /// `system.delta_s` [default: -1]
    #[arg(long, global = true)]
    pub delta_s: Option<f64>,
    /// Ancilla boson number `ancilla.n_a` [default: 1]
    #[arg(long, global = true)]
    pub n_a: Option<usize>,
    /// `ancilla.eta_a` [default: 0]
    #[arg(long, global = true)]
    pub eta_a: Option<f64>,
    /// `ancilla.gamma_a` [default: 0]
    #[arg(long, global = true)]
    pub gamma_a: Option<f64>,
    /// `ancilla.delta_a` [default: -1]
    #[arg(long, global = true)]
    pub delta_a: Option<f64>,
    /// Ancilla level `ancilla.ell` [default: 0.5]
    #[arg(long, global = true)]
    pub ell: Option<f64>,
    /// Preparation offset `ancilla.delta_offset` [default: 0]
    #[arg(long, global = true)]
    pub delta_offset: Option<f64>,
    /// Preparation variance `ancilla.sigma2` [default: 0]
    #[arg(long, global = true)]
    pub sigma2: Option<f64>,
    /// Noise spectrum `noise.kind`
    #[arg(long, global = true, value_enum)]
    pub kind: Option<KindName>,
    /// Dephasing strength `noise.lambda`
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Coupling `noise.alpha`, the single fig2 curve when `--alphas` is absent
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// OU correlation time `noise.tau_c` [default: 5]
    #[arg(long, global = true)]
    pub tau_c: Option<f64>,
    /// Lower 1/f band edge `noise.f_min` [default: 0.001]
    #[arg(long, global = true)]
    pub f_min: Option<f64>,
    /// Upper 1/f band edge `noise.f_max` [default: 10]
    #[arg(long, global = true)]
    pub f_max: Option<f64>,
    /// `run.t_final`
    #[arg(long, global = true)]
    pub t_final: Option<f64>,
    /// `run.dt`
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    /// `run.n_traj`
    #[arg(long, global = true)]
    pub n_traj: Option<usize>,
    /// Master seed `run.seed` [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `run.method` [default: master]
    #[arg(long, global = true, value_enum)]
    pub method: Option<Method>,
    /// Output directory `output.dir` [default: $DECOH_OUT_DIR, else ./decoh-out]
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Comma-separated `output.formats` [default: csv,json,svg]
    #[arg(long, global = true, value_enum, value_delimiter = ',')]
    pub formats: Option<Vec<Format>>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| bad("config", e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad("config", format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            return Self::from_manifest_json(&text)
                .map_err(|e| bad(&e.key, format!("{} ({})", e.constraint, path.display())));
        }
        Self::from_toml(&text).map_err(|e| bad(&e.key, format!("{} ({})", e.constraint, path.display())))
    }

    /// The `config` object of a run manifest.
    pub fn from_manifest_json(text: &str) -> Result<Self, ConfigError> {
        let mut v: serde_json::Value = serde_json::from_str(text).map_err(|e| bad("config", e.to_string()))?;
        let cfg = v
            .get_mut("config")
            .map(serde_json::Value::take)
            .ok_or_else(|| bad("config", "manifest has no `config` object"))?;
        serde_json::from_value(cfg).map_err(|e| bad("config", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        fn set_opt<T: Clone>(slot: &mut Option<T>, v: &Option<T>) {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        set(&mut self.system.n_s, &o.n_s);
        set_opt(&mut self.system.eta_s, &o.eta_s);
        set(&mut self.system.gamma_s, &o.gamma_s);
        set(&mut self.system.delta_s, &o.delta_s);
        set(&mut self.ancilla.n_a, &o.n_a);
        set(&mut self.ancilla.eta_a, &o.eta_a);
        set(&mut self.ancilla.gamma_a, &o.gamma_a);
        set(&mut self.ancilla.delta_a, &o.delta_a);
        set(&mut self.ancilla.ell, &o.ell);
        set(&mut self.ancilla.delta_offset, &o.delta_offset);
        set(&mut self.ancilla.sigma2, &o.sigma2);
        set_opt(&mut self.noise.kind, &o.kind);
        set_opt(&mut self.noise.lambda, &o.lambda);
        set_opt(&mut self.noise.alpha, &o.alpha);
        set(&mut self.noise.tau_c, &o.tau_c);
        set(&mut self.noise.f_min, &o.f_min);
        set(&mut self.noise.f_max, &o.f_max);
        set_opt(&mut self.run.t_final, &o.t_final);
        set_opt(&mut self.run.dt, &o.dt);
        set_opt(&mut self.run.n_traj, &o.n_traj);
        set(&mut self.run.seed, &o.seed);
        set(&mut self.run.method, &o.method);
        set_opt(&mut self.output.dir, &o.out_dir);
        set(&mut self.output.formats, &o.formats);
    }

    /// Fills unset `noise` and `run` keys from a subcommand's defaults.
    pub fn resolve(&mut self, d: &Defaults) {
        self.system.eta_s.get_or_insert(d.eta_s);
        self.noise.kind.get_or_insert(d.kind);
        self.noise.lambda.get_or_insert(d.lambda);
        self.run.t_final.get_or_insert(d.t_final);
        self.run.dt.get_or_insert(d.dt);
        self.run.n_traj.get_or_insert(d.n_traj);
        if self.output.dir.is_none() {
            self.output.dir = Some(
                std::env::var_os(OUT_DIR_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR)),
            );
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let finite = |key: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(bad(key, "must be finite"))
            }
        };
        let s = &self.system;
        if s.n_s < 1 {
            return Err(bad("system.n_s", "must be >= 1"));
        }
        if let Some(eta) = s.eta_s {
            finite("system.eta_s", eta)?;
        }
        finite("system.gamma_s", s.gamma_s)?;
        finite("system.delta_s", s.delta_s)?;
        let a = &self.ancilla;
        if a.n_a < 1 {
            return Err(bad("ancilla.n_a", "must be >= 1"));
        }
        finite("ancilla.eta_a", a.eta_a)?;
        finite("ancilla.gamma_a", a.gamma_a)?;
        finite("ancilla.delta_a", a.delta_a)?;
        finite("ancilla.delta_offset", a.delta_offset)?;
        finite("ancilla.ell", a.ell)?;
        if a.ell == 0.0 {
            return Err(bad("ancilla.ell", "must be nonzero"));
        }
        let spin = make_spin::<f64>(a.n_a + 1).map_err(|e| bad("ancilla.n_a", e.to_string()))?;
        if spin.index_of(a.ell).is_none() {
            return Err(bad(
                "ancilla.ell",
                format!("must be a Jz eigenvalue of an ancilla with {} bosons", a.n_a),
            ));
        }
        if !(a.sigma2 >= 0.0) || !a.sigma2.is_finite() {
            return Err(bad("ancilla.sigma2", "must be >= 0"));
        }
        let n = &self.noise;
        if let Some(l) = n.lambda {
            if !(l > 0.0) || !l.is_finite() {
                return Err(bad("noise.lambda", "must be > 0"));
            }
        }
        if let Some(al) = n.alpha {
            finite("noise.alpha", al)?;
        }
        if !(n.tau_c > 0.0) || !n.tau_c.is_finite() {
            return Err(bad("noise.tau_c", "must be > 0"));
        }
        if !(n.f_min > 0.0) || !n.f_min.is_finite() {
            return Err(bad("noise.f_min", "must be > 0"));
        }
        if !(n.f_max > n.f_min) || !n.f_max.is_finite() {
            return Err(bad("noise.f_max", "must be > noise.f_min"));
        }
        let r = &self.run;
        if let Some(t) = r.t_final {
            if !(t > 0.0) || !t.is_finite() {
                return Err(bad("run.t_final", "must be > 0"));
            }
        }
        if let Some(dt) = r.dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(bad("run.dt", "must be > 0"));
            }
            if r.t_final.is_some_and(|t| dt > t) {
                return Err(bad("run.dt", "must be <= run.t_final"));
            }
        }
        if r.n_traj == Some(0) {
            return Err(bad("run.n_traj", "must be >= 1"));
        }
        if self.output.formats.is_empty() {
            return Err(bad("output.formats", "must name at least one of csv, json, svg"));
        }
        Ok(())
    }

    pub fn noise_kind(&self) -> NoiseKind<f64> {
        match self.noise.kind.unwrap_or(KindName::White) {
            KindName::White => NoiseKind::White,
            KindName::Ou => NoiseKind::Ou {
                tau_c: self.noise.tau_c,
            },
            KindName::OneOverF => NoiseKind::OneOverF {
                f_min: self.noise.f_min,
                f_max: self.noise.f_max,
                per_decade: 3,
            },
        }
    }

    pub fn eta_s(&self) -> f64 {
        self.system.eta_s.expect("resolved configuration")
    }

    pub fn lambda(&self) -> f64 {
        self.noise.lambda.expect("resolved configuration")
    }

    pub fn t_final(&self) -> f64 {
        self.run.t_final.expect("resolved configuration")
    }

    pub fn dt(&self) -> f64 {
        self.run.dt.expect("resolved configuration")
    }

    pub fn n_traj(&self) -> usize {
        self.run.n_traj.expect("resolved configuration")
    }

    pub fn out_dir(&self) -> &Path {
        self.output.dir.as_deref().expect("resolved configuration")
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}

/// Per-subcommand values for keys left unset.
#[derive(Clone, Copy, Debug)]
pub struct Defaults {
    pub eta_s: f64,
    pub kind: KindName,
    pub lambda: f64,
    pub t_final: f64,
    pub dt: f64,
    pub n_traj: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_valid_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("[noise]\nlamda = 0.1\n").unwrap_err();
        assert!(e.constraint.contains("lamda"), "{e}");
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
        assert!(RunConfig::from_toml("[noise]\nlambda = \"big\"\n").is_err());
    }

    #[test]
    fn negative_lambda_names_key() {
        let c = RunConfig::from_toml("noise.lambda = -1.0\n").unwrap();
        let e = c.validate().unwrap_err();
        assert_eq!(e.key, "noise.lambda");
        assert_eq!(e.constraint, "must be > 0");
    }

    #[test]
    fn flags_override_file() {
        let mut c = RunConfig::from_toml("[noise]\nalpha = 0.0\n").unwrap();
        c.apply(&Overrides {
            alpha: Some(-2.0),
            ..Default::default()
        });
        assert_eq!(c.noise.alpha, Some(-2.0));
    }

    #[test]
    fn manifest_config_is_loadable() {
        let c = RunConfig::from_toml("noise.lambda = 0.2\nrun.seed = 9\n").unwrap();
        let text = serde_json::json!({ "command": "fig2", "config": c }).to_string();
        assert_eq!(RunConfig::from_manifest_json(&text).unwrap(), c);
    }

    #[test]
    fn dotted_and_table_forms_agree() {
        let a = RunConfig::from_toml("system.n_s = 3\nancilla.ell = -0.5\n").unwrap();
        let b = RunConfig::from_toml("[system]\nn_s = 3\n[ancilla]\nell = -0.5\n").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ell_must_fit_the_ancilla() {
        let c = RunConfig::from_toml("ancilla.ell = 1.0\n").unwrap();
        assert_eq!(c.validate().unwrap_err().key, "ancilla.ell");
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.resolve(&Defaults {
            eta_s: 0.0,
            kind: KindName::Ou,
            lambda: 0.3,
            t_final: 7.0,
            dt: 0.1,
            n_traj: 5,
        });
        c.output.dir = Some(PathBuf::from("x"));
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
