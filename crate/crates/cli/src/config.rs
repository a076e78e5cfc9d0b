//! Run configuration: TOML schema, validation and translation into harness
//! method specs. Nothing here evaluates `g`.

use std::path::{Path, PathBuf};

use nofis_core::baselines::{AisConfig, SssConfig, SusConfig};
use nofis_core::harness::{MethodSpec, OracleMode};
use nofis_core::nofis::TrainConfig;
use nofis_core::problems::{make_problem, suggest_schedule, Level, Problem, ThresholdSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Output directory used when neither the flag nor the config names one.
pub const OUT_DIR_ENV: &str = "NOFIS_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "nofis-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Nofis,
    Mc,
    Sus,
    Sss,
    Ais,
}

impl MethodName {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "nofis" => Ok(Self::Nofis),
            "mc" => Ok(Self::Mc),
            "sus" => Ok(Self::Sus),
            "sss" => Ok(Self::Sss),
            "ais" => Ok(Self::Ais),
            other => Err(CliError::Config(format!(
                "unknown method '{other}' (expected nofis, mc, sus, sss or ais)"
            ))),
        }
    }
}

/// Where the reference probability comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum GoldenSpec {
    /// The value attached to the catalog problem.
    Catalog,
    Analytic,
    Quadrature2d,
    Mc { samples: u64 },
}

/// Exactly one of the fields must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    /// Plain thresholds `a_1 > ... > a_M` for upper or lower bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
    /// Explicit `[lower, upper]` pairs for band bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bands: Option<Vec<[f64; 2]>>,
    /// Distances by which each level widens the bound; the last must be 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relax: Option<Vec<f64>>,
    /// Pilot sample count for the quantile helper.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_pilot: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub samples: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { samples: 50_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    /// Method for `run`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<MethodName>,
    /// Methods for `compare`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<MethodName>,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Save the trained flow of every successful NOFIS trial.
    #[serde(default)]
    pub checkpoint: bool,
    #[serde(default = "catalog_golden")]
    pub golden: GoldenSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nofis: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sus: Option<SusConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sss: Option<SssConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ais: Option<AisConfig>,
}

fn one() -> usize {
    1
}

fn catalog_golden() -> GoldenSpec {
    GoldenSpec::Catalog
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub repeats: Option<usize>,
    pub method: Option<String>,
}

impl RunConfig {
    /// Parses TOML, reporting the field path of any schema violation.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(format!("invalid TOML: {e}")))?;
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at '{path}': {}", e.into_inner()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out_dir = Some(out.clone());
        }
        if let Some(r) = o.repeats {
            self.repeats = r;
        }
        if let Some(m) = &o.method {
            let names = m
                .split(',')
                .map(|s| MethodName::parse(s.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            self.method = names.first().copied();
            self.methods = names;
        }
        Ok(())
    }

    /// Flag, then config, then the environment, then a fixed default.
    pub fn resolved_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    /// Methods for `compare`: the list, or the single `method`.
    pub fn compare_methods(&self) -> Result<Vec<MethodName>, CliError> {
        let mut names = if self.methods.is_empty() {
            self.method.into_iter().collect()
        } else {
            self.methods.clone()
        };
        if names.is_empty() {
            return Err(CliError::Config("no method given (set 'method' or 'methods')".into()));
        }
        names.sort_by_key(|m| format!("{m:?}").to_lowercase());
        names.dedup();
        Ok(names)
    }

    pub fn run_method(&self) -> Result<MethodName, CliError> {
        self.method
            .or_else(|| (self.methods.len() == 1).then(|| self.methods[0]))
            .ok_or_else(|| CliError::Config("'run' needs exactly one method".into()))
    }

    pub fn oracle_mode(&self) -> Option<OracleMode> {
        match self.golden {
            GoldenSpec::Catalog => None,
            GoldenSpec::Analytic => Some(OracleMode::Analytic),
            GoldenSpec::Quadrature2d => Some(OracleMode::Quadrature2d),
            GoldenSpec::Mc { samples } => Some(OracleMode::Mc { samples }),
        }
    }

    /// Checks everything that can be checked without evaluating `g`.
    pub fn validate(&self, methods: &[MethodName]) -> Result<Problem, CliError> {
        if self.repeats == 0 {
            return Err(CliError::Config("repeats must be at least 1".into()));
        }
        let problem = make_problem(&self.problem).map_err(|e| CliError::Config(e.to_string()))?;
        match self.golden {
            GoldenSpec::Catalog if problem.golden().is_none() => {
                return Err(CliError::Config(format!("problem '{}' has no catalog golden value", self.problem)));
            }
            GoldenSpec::Mc { samples: 0 } => return Err(CliError::Config("golden.samples must be positive".into())),
            GoldenSpec::Quadrature2d if problem.dim() != 2 => {
                return Err(CliError::Config(format!(
                    "quadrature needs a 2-D problem, '{}' has D = {}",
                    self.problem,
                    problem.dim()
                )));
            }
            _ => {}
        }
        for &m in methods {
            if m == MethodName::Nofis {
                let cfg = self.nofis.clone().unwrap_or_default();
                cfg.validate().map_err(|e| CliError::Config(format!("nofis: {e}")))?;
                let spec = self.schedule.as_ref().ok_or_else(|| {
                    CliError::Config("nofis needs a [schedule] block".into())
                })?;
                if spec.auto_pilot.is_none() {
                    let schedule = explicit_schedule(spec, &problem.bound())?;
                    if schedule.len() != cfg.steps {
                        return Err(CliError::Config(format!(
                            "schedule has {} levels but nofis.steps is {}",
                            schedule.len(),
                            cfg.steps
                        )));
                    }
                } else {
                    schedule_kind_count(spec)?;
                }
            } else {
                self.method_spec_without_schedule(m)?
                    .validate()
                    .map_err(|e| CliError::Config(format!("{m:?}: {e}").to_lowercase()))?;
            }
        }
        Ok(problem)
    }

    fn method_spec_without_schedule(&self, m: MethodName) -> Result<MethodSpec, CliError> {
        Ok(match m {
            MethodName::Mc => MethodSpec::Mc {
                samples: self.mc.unwrap_or_default().samples,
            },
            MethodName::Sus => MethodSpec::Sus(self.sus.clone().unwrap_or_default()),
            MethodName::Sss => MethodSpec::Sss(self.sss.clone().unwrap_or_default()),
            MethodName::Ais => MethodSpec::Ais(self.ais.clone().unwrap_or_default()),
            MethodName::Nofis => unreachable!("nofis specs need a schedule"),
        })
    }

    /// Builds the method spec; an automatic schedule spends pilot calls on a
    /// separate counter.
    pub fn method_spec(&self, m: MethodName, problem: &Problem) -> Result<MethodSpec, CliError> {
        if m != MethodName::Nofis {
            return self.method_spec_without_schedule(m);
        }
        let config = TrainConfig {
            seed: self.seed,
            ..self.nofis.clone().unwrap_or_default()
        };
        let spec = self
            .schedule
            .as_ref()
            .ok_or_else(|| CliError::Config("nofis needs a [schedule] block".into()))?;
        let schedule = match spec.auto_pilot {
            Some(pilot) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                suggest_schedule(&problem.fresh(), config.steps, pilot, &mut rng)?
            }
            None => explicit_schedule(spec, &problem.bound())?,
        };
        Ok(MethodSpec::Nofis { config, schedule })
    }
}

fn schedule_kind_count(spec: &ScheduleSpec) -> Result<(), CliError> {
    let set = [
        spec.thresholds.is_some(),
        spec.bands.is_some(),
        spec.relax.is_some(),
        spec.auto_pilot.is_some(),
    ]
    .iter()
    .filter(|b| **b)
    .count();
    if set != 1 {
        return Err(CliError::Config(
            "schedule needs exactly one of thresholds, bands, relax or auto_pilot".into(),
        ));
    }
    Ok(())
}

fn explicit_schedule(spec: &ScheduleSpec, bound: &Level) -> Result<ThresholdSchedule, CliError> {
    schedule_kind_count(spec)?;
    let sched = if let Some(t) = &spec.thresholds {
        ThresholdSchedule::from_thresholds(t, bound)
    } else if let Some(b) = &spec.bands {
        ThresholdSchedule::new(
            b.iter()
                .map(|&[lower, upper]| Level::Band { lower, upper })
                .collect(),
            bound,
        )
    } else if let Some(r) = &spec.relax {
        if r.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(CliError::Config("schedule.relax distances must be non-negative".into()));
        }
        ThresholdSchedule::new(r.iter().map(|&d| bound.relaxed(d)).collect(), bound)
    } else {
        unreachable!("checked by schedule_kind_count")
    };
    sched.map_err(|e| CliError::Config(format!("schedule: {e}")))
}
