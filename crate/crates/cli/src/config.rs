//! Strict JSON study configuration.
//!
//! A document has the sections `model`, `chain` or `twoscale`, `sim`,
//! `study` and `output`. Every section is checked for unknown keys and
//! every problem in the document is reported, not just the first.

use std::fmt;
use std::path::PathBuf;

use mfswitch::chain::GeneratorMatrix;
use mfswitch::dynamics::{BuiltinModel, Checkpoints, CoefficientModel, InitialCondition, SimConfig};
use mfswitch::harness::{ChainSetup, StudyKind, StudySpec, TwoScaleSetup};
use mfswitch::measure::TestFunction;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_REPLICAS: usize = 20;
pub const DEFAULT_SE_WINDOW: f64 = 3.0;
pub const DEFAULT_REFERENCE_SIZE: usize = 8192;
pub const DEFAULT_CHAIN_PATHS: usize = 10_000;
pub const DEFAULT_TV_THRESHOLD: f64 = 0.02;

pub const STUDY_KINDS: [&str; 5] = ["simulate", "lln", "martingale", "twoscale", "chain-check"];
const MODEL_NAMES: [&str; 3] = ["mean-reverting-switch", "kernel-interaction", "ornstein-uhlenbeck"];

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaViolation {
    /// Dotted path of the offending key, e.g. `sim.dt`.
    pub key: String,
    pub reason: String,
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.reason)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Parse { line: usize, column: usize, message: String },
    Schema(Vec<SchemaViolation>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Parse { line, column, message } => {
                write!(f, "ParseError at line {line}, column {column}: {message}")
            }
            Self::Schema(violations) => {
                write!(f, "{} schema violation(s):", violations.len())?;
                for v in violations {
                    write!(f, "\n  SchemaViolation({v})")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

/// Closest candidate by edit distance, if it is plausibly a typo.
pub fn nearest<'a>(key: &str, candidates: &[&'a str]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (strsim::levenshtein(key, c), *c))
        .min()
        .filter(|(d, c)| *d <= (c.len().max(key.len()) / 2).max(2))
        .map(|(_, c)| c)
}

/// Reads keys out of one JSON object, remembering which keys are valid.
struct Section<'a> {
    path: String,
    map: Map<String, Value>,
    known: Vec<&'a str>,
    errors: &'a mut Vec<SchemaViolation>,
}

impl<'a> Section<'a> {
    fn new(path: &str, value: Value, errors: &'a mut Vec<SchemaViolation>) -> Option<Self> {
        match value {
            Value::Object(map) => Some(Self {
                path: path.to_owned(),
                map,
                known: Vec::new(),
                errors,
            }),
            other => {
                errors.push(SchemaViolation {
                    key: path.to_owned(),
                    reason: format!("expected an object, found {}", kind_of(&other)),
                });
                None
            }
        }
    }

    fn key(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.path)
        }
    }

    fn violation(&mut self, name: &str, reason: impl Into<String>) {
        let key = self.key(name);
        self.errors.push(SchemaViolation {
            key,
            reason: reason.into(),
        });
    }

    fn optional<T: DeserializeOwned>(&mut self, name: &'a str) -> Option<T> {
        self.known.push(name);
        let value = self.map.remove(name)?;
        match serde_json::from_value(value) {
            Ok(v) => Some(v),
            Err(e) => {
                self.violation(name, e.to_string());
                None
            }
        }
    }

    fn required<T: DeserializeOwned>(&mut self, name: &'a str) -> Option<T> {
        let present = self.map.contains_key(name);
        let out = self.optional(name);
        if !present {
            self.violation(name, "required key is missing");
        }
        out
    }

    /// Reports every key that was never asked for.
    fn finish(self) {
        let mut unknown: Vec<&String> = self.map.keys().collect();
        unknown.sort();
        for key in unknown {
            let reason = match nearest(key, &self.known) {
                Some(near) => format!("unknown key; did you mean \"{near}\"?"),
                None => format!("unknown key; expected one of {:?}", self.known),
            };
            let key = self.key(key);
            self.errors.push(SchemaViolation { key, reason });
        }
    }
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// Parses and validates a configuration document for the study `kind`
/// (one of [`STUDY_KINDS`]).
pub fn parse_config(text: &str, kind: &str) -> Result<StudySpec, ConfigError> {
    let root: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut errors = Vec::new();
    let spec = build(root, kind, &mut errors);
    if let Some(spec) = &spec {
        errors.extend(validate(spec));
    }
    match spec {
        Some(spec) if errors.is_empty() => Ok(spec),
        _ => Err(ConfigError::Schema(errors)),
    }
}

/// Reads and parses a configuration file.
pub fn parse_config_file(path: &std::path::Path, kind: &str) -> Result<StudySpec, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse {
        line: 0,
        column: 0,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_config(&text, kind)
}

/// Spec-level validation, with each problem attributed to a section.
pub fn validate(spec: &StudySpec) -> Vec<SchemaViolation> {
    spec.violations()
        .into_iter()
        .map(|v| match v.split_once(": ") {
            Some((section, reason)) if ["model", "sim", "chain", "twoscale", "study"].contains(&section) => {
                SchemaViolation {
                    key: section.to_owned(),
                    reason: reason.to_owned(),
                }
            }
            _ => SchemaViolation {
                key: "study".into(),
                reason: v,
            },
        })
        .collect()
}

fn build(root: Value, kind: &str, errors: &mut Vec<SchemaViolation>) -> Option<StudySpec> {
    if !STUDY_KINDS.contains(&kind) {
        errors.push(SchemaViolation {
            key: "study.kind".into(),
            reason: format!("unknown study kind {kind:?}"),
        });
        return None;
    }
    let mut top = Section::new("", root, errors)?;
    let model_value: Option<Value> = top.required("model");
    let chain_value: Option<Value> = top.optional("chain");
    let twoscale_value: Option<Value> = top.optional("twoscale");
    let sim_value: Option<Value> = top.required("sim");
    let study_value: Option<Value> = top.optional("study");
    let output_value: Option<Value> = top.optional("output");
    top.finish();

    let model = model_value.and_then(|v| parse_model(v, errors));
    let dim = model.as_ref().map(BuiltinModel::dim);
    let sim = sim_value.and_then(|v| parse_sim(v, dim, errors));
    let horizon = sim.as_ref().map(|s| s.horizon);

    let wants_twoscale = kind == "twoscale";
    let (section_needed, section_other) = if wants_twoscale {
        ("twoscale", "chain")
    } else {
        ("chain", "twoscale")
    };
    let (needed, other) = if wants_twoscale {
        (twoscale_value, chain_value)
    } else {
        (chain_value, twoscale_value)
    };
    if other.is_some() {
        errors.push(SchemaViolation {
            key: section_other.into(),
            reason: format!("a {kind} study takes a \"{section_needed}\" section, not \"{section_other}\""),
        });
    }
    let mut chain = None;
    let mut twoscale = None;
    match needed {
        None => errors.push(SchemaViolation {
            key: section_needed.into(),
            reason: format!("required section is missing for a {kind} study"),
        }),
        Some(v) if wants_twoscale => twoscale = parse_twoscale(v, errors),
        Some(v) => chain = parse_chain(v, errors),
    }

    let study = parse_study(study_value.unwrap_or(Value::Object(Map::new())), kind, horizon, errors);
    let output = output_value.and_then(|v| parse_output(v, errors));

    let (model, sim, (id, kind_fields, replicas, master_seed, se_window)) = (model?, sim?, study?);
    let kind = match kind_fields {
        KindFields::Simulate { test_functions } => StudyKind::Simulate {
            chain: chain?,
            test_functions,
        },
        KindFields::Lln {
            n_list,
            reference_size,
            checkpoint,
            slope_window,
        } => StudyKind::Lln {
            chain: chain?,
            n_list,
            reference_size,
            checkpoint,
            slope_window,
        },
        KindFields::Martingale {
            test_functions,
            times,
            ratio_window,
        } => StudyKind::Martingale {
            chain: chain?,
            test_functions,
            times,
            ratio_window,
        },
        KindFields::Twoscale {
            test_functions,
            sigma_control,
            residual_function,
        } => StudyKind::Twoscale {
            twoscale: twoscale?,
            test_functions,
            sigma_control,
            residual_function,
        },
        KindFields::ChainCheck {
            times,
            paths,
            tv_threshold,
        } => StudyKind::ChainCheck {
            chain: chain?,
            times,
            paths,
            tv_threshold,
        },
    };
    Some(StudySpec {
        id,
        kind,
        model,
        sim,
        replicas,
        master_seed,
        se_window,
        output: output.flatten(),
    })
}

fn parse_model(value: Value, errors: &mut Vec<SchemaViolation>) -> Option<BuiltinModel> {
    let mut s = Section::new("model", value, errors)?;
    let name: Option<String> = s.required("name");
    let name = name?;
    let Some(&canonical) = MODEL_NAMES.iter().find(|n| **n == name) else {
        let hint = match nearest(&name, &MODEL_NAMES) {
            Some(near) => format!("unknown built-in model {name:?}; did you mean \"{near}\"?"),
            None => format!("unknown built-in model {name:?}; available: {MODEL_NAMES:?}"),
        };
        s.violation("name", hint);
        return None;
    };
    let dim: Option<usize> = s.required("dim");
    let model = match canonical {
        "kernel-interaction" => {
            let (k, sd) = (s.required("k"), s.required("s"));
            Some(BuiltinModel::KernelInteraction { dim: dim?, k: k?, s: sd? })
        }
        _ => {
            let (a, c, sd) = (s.required("a"), s.required("c"), s.required("s"));
            let (dim, a, c, sd) = (dim?, a?, c?, sd?);
            Some(if canonical == "ornstein-uhlenbeck" {
                BuiltinModel::OrnsteinUhlenbeck { dim, a, c, s: sd }
            } else {
                BuiltinModel::MeanRevertingSwitch { dim, a, c, s: sd }
            })
        }
    };
    s.finish();
    model
}

fn parse_sim(value: Value, dim: Option<usize>, errors: &mut Vec<SchemaViolation>) -> Option<SimConfig> {
    let mut s = Section::new("sim", value, errors)?;
    let num_particles: Option<usize> = s.required("num_particles");
    let horizon: Option<f64> = s.required("horizon");
    let dt: f64 = s.optional("dt").unwrap_or(DEFAULT_DT);
    let initial: Option<InitialCondition> = s.optional("initial");
    let checkpoints: Checkpoints = s.optional("checkpoints").unwrap_or(Checkpoints::Terminal);
    s.finish();
    let initial = match initial {
        Some(i) => i,
        None => InitialCondition::Constant {
            point: vec![0.0; dim?],
        },
    };
    Some(SimConfig {
        num_particles: num_particles?,
        horizon: horizon?,
        dt,
        initial,
        checkpoints,
    })
}

fn parse_chain(value: Value, errors: &mut Vec<SchemaViolation>) -> Option<ChainSetup> {
    let mut s = Section::new("chain", value, errors)?;
    let rows: Option<Vec<Vec<f64>>> = s.required("generator");
    let initial_state: usize = s.optional("initial_state").unwrap_or(0);
    let generator = rows.and_then(|rows| match GeneratorMatrix::from_rows(&rows) {
        Ok(g) => Some(g),
        Err(e) => {
            s.violation(
                "generator",
                format!("{e}; a generator needs nonnegative off-diagonal rates and zero row sums"),
            );
            None
        }
    });
    s.finish();
    Some(ChainSetup {
        generator: generator?,
        initial_state,
    })
}

fn parse_twoscale(value: Value, errors: &mut Vec<SchemaViolation>) -> Option<TwoScaleSetup> {
    let mut s = Section::new("twoscale", value, errors)?;
    let blocks: Option<Vec<Vec<Vec<f64>>>> = s.required("blocks");
    let slow: Option<Vec<Vec<f64>>> = s.required("slow");
    let initial_state: usize = s.optional("initial_state").unwrap_or(0);
    let eps_list: Option<Vec<f64>> = s.required("eps_list");
    s.finish();
    Some(TwoScaleSetup {
        blocks: blocks?,
        slow: slow?,
        initial_state,
        eps_list: eps_list?,
    })
}

fn parse_output(value: Value, errors: &mut Vec<SchemaViolation>) -> Option<Option<PathBuf>> {
    let mut s = Section::new("output", value, errors)?;
    let dir: Option<PathBuf> = s.optional("dir");
    s.finish();
    Some(dir)
}

enum KindFields {
    Simulate {
        test_functions: Vec<TestFunction>,
    },
    Lln {
        n_list: Vec<usize>,
        reference_size: usize,
        checkpoint: f64,
        slope_window: Option<(f64, f64)>,
    },
    Martingale {
        test_functions: Vec<TestFunction>,
        times: Vec<f64>,
        ratio_window: (f64, f64),
    },
    Twoscale {
        test_functions: Vec<TestFunction>,
        sigma_control: bool,
        residual_function: Option<TestFunction>,
    },
    ChainCheck {
        times: Vec<f64>,
        paths: usize,
        tv_threshold: f64,
    },
}

type StudyFields = (String, KindFields, usize, u64, f64);

fn parse_study(
    value: Value,
    kind: &str,
    horizon: Option<f64>,
    errors: &mut Vec<SchemaViolation>,
) -> Option<StudyFields> {
    let mut s = Section::new("study", value, errors)?;
    let declared: Option<String> = s.optional("kind");
    if let Some(declared) = declared {
        if declared != kind {
            s.violation(
                "kind",
                format!("config declares a {declared:?} study but the {kind:?} subcommand was run"),
            );
        }
    }
    let id: String = s.optional("id").unwrap_or_else(|| kind.to_owned());
    let replicas: usize = s.optional("replicas").unwrap_or(DEFAULT_REPLICAS);
    let master_seed: u64 = s.optional("master_seed").unwrap_or(0);
    let se_window: f64 = s.optional("se_window").unwrap_or(DEFAULT_SE_WINDOW);
    let fields = match kind {
        "simulate" => Some(KindFields::Simulate {
            test_functions: s.optional("test_functions").unwrap_or_default(),
        }),
        "lln" => {
            let n_list = s.required("n_list");
            let reference_size = s.optional("reference_size").unwrap_or(DEFAULT_REFERENCE_SIZE);
            let checkpoint = s.optional("checkpoint").or(horizon);
            let slope_window = s.optional("slope_window");
            Some(KindFields::Lln {
                n_list: n_list?,
                reference_size,
                checkpoint: checkpoint?,
                slope_window,
            })
        }
        "martingale" => {
            let test_functions = s.required("test_functions");
            let times = s.optional("times").unwrap_or_default();
            let ratio_window = s.optional("ratio_window").unwrap_or((0.7, 1.3));
            Some(KindFields::Martingale {
                test_functions: test_functions?,
                times,
                ratio_window,
            })
        }
        "twoscale" => Some(KindFields::Twoscale {
            test_functions: s.optional("test_functions").unwrap_or_else(|| vec![TestFunction::SquaredNorm]),
            sigma_control: s.optional("sigma_control").unwrap_or(false),
            residual_function: s.optional("residual_function"),
        }),
        _ => {
            let times = s.optional("times").or_else(|| horizon.map(|h| vec![h]));
            let paths = s.optional("paths").unwrap_or(DEFAULT_CHAIN_PATHS);
            let tv_threshold = s.optional("tv_threshold").unwrap_or(DEFAULT_TV_THRESHOLD);
            Some(KindFields::ChainCheck {
                times: times?,
                paths,
                tv_threshold,
            })
        }
    };
    s.finish();
    Some((id, fields?, replicas, master_seed, se_window))
}
