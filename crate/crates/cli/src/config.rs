//! Flat `key = value` experiment files with `[scenario]`, `[pipeline]` and
//! `[run]` sections.
//!
//! Values are numbers (`0.5`, `1e-3`, `2pi`), comma-separated number lists
//! (`1, 0, 0` or `[1, 0, 0]`), booleans or bare words. `#` starts a comment.
//! Every key must be consumed by the scenario or pipeline it configures;
//! leftovers are reported with their line number.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::PathBuf;

use thiserror::Error;

use shadowlab::scenarios::builtin_params;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown section [{name}] (expected [scenario], [pipeline] or [run])")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: section [{name}] appears twice")]
    DuplicateSection { line: usize, name: String },
    #[error("line {line}: key `{key}` in [{section}] appears twice")]
    DuplicateKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("missing section [{0}]")]
    MissingSection(String),
    #[error("missing key `{key}` in [{section}]")]
    MissingKey { section: String, key: String },
    #[error("line {line}: unknown key `{key}` in [{section}]{expected}")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
        expected: String,
    },
    #[error("line {line}: bad value for `{key}` in [{section}]: {message}")]
    BadValue {
        line: usize,
        section: String,
        key: String,
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub value: String,
    pub line: usize,
}

/// Allowed range of a numeric value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Range {
    Any,
    Positive,
    NonNegative,
    /// Open interval `(0, 1)`.
    Unit,
}

impl Range {
    fn admits(self, v: f64) -> bool {
        v.is_finite()
            && match self {
                Range::Any => true,
                Range::Positive => v > 0.0,
                Range::NonNegative => v >= 0.0,
                Range::Unit => v > 0.0 && v < 1.0,
            }
    }

    fn describe(self) -> &'static str {
        match self {
            Range::Any => "must be finite",
            Range::Positive => "must be > 0",
            Range::NonNegative => "must be >= 0",
            Range::Unit => "must lie in (0, 1)",
        }
    }
}

/// Keys of one section. Getters consume keys; [`Params::finish`] rejects
/// whatever was not consumed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    section: String,
    entries: BTreeMap<String, Entry>,
    known: BTreeSet<&'static str>,
}

fn parse_number(raw: &str) -> Option<f64> {
    let s = raw.trim();
    if let Some(head) = s.strip_suffix("pi") {
        let head = head.trim().trim_end_matches('*').trim();
        let k = if head.is_empty() {
            1.0
        } else {
            head.parse::<f64>().ok()?
        };
        return Some(k * PI);
    }
    s.parse::<f64>().ok()
}

impl Params {
    pub fn new(section: &str) -> Self {
        Self {
            section: section.to_string(),
            ..Self::default()
        }
    }

    pub fn section(&self) -> &str {
        &self.section
    }

    pub fn insert(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        if self.entries.contains_key(key) {
            return Err(ConfigError::DuplicateKey {
                line,
                section: self.section.clone(),
                key: key.to_string(),
            });
        }
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                line,
            },
        );
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn entries(&self) -> &BTreeMap<String, Entry> {
        &self.entries
    }

    fn take(&mut self, key: &'static str) -> Option<Entry> {
        self.known.insert(key);
        self.entries.remove(key)
    }

    fn missing(&self, key: &str) -> ConfigError {
        ConfigError::MissingKey {
            section: self.section.clone(),
            key: key.to_string(),
        }
    }

    pub fn bad(&self, key: &str, line: usize, message: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            line,
            section: self.section.clone(),
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub fn string_opt(&mut self, key: &'static str) -> Option<(String, usize)> {
        self.take(key)
            .map(|e| (e.value.trim_matches('"').to_string(), e.line))
    }

    pub fn string_req(&mut self, key: &'static str) -> Result<(String, usize), ConfigError> {
        self.string_opt(key).ok_or_else(|| self.missing(key))
    }

    pub fn f64_opt(&mut self, key: &'static str, range: Range) -> Result<Option<f64>, ConfigError> {
        let Some(e) = self.take(key) else {
            return Ok(None);
        };
        let v = parse_number(&e.value)
            .ok_or_else(|| self.bad(key, e.line, format!("`{}` is not a number", e.value)))?;
        if !range.admits(v) {
            return Err(self.bad(key, e.line, format!("{} (got {v})", range.describe())));
        }
        Ok(Some(v))
    }

    pub fn f64_req(&mut self, key: &'static str, range: Range) -> Result<f64, ConfigError> {
        self.f64_opt(key, range)?.ok_or_else(|| self.missing(key))
    }

    pub fn f64_or(
        &mut self,
        key: &'static str,
        default: f64,
        range: Range,
    ) -> Result<f64, ConfigError> {
        Ok(self.f64_opt(key, range)?.unwrap_or(default))
    }

    pub fn usize_opt(
        &mut self,
        key: &'static str,
        min: usize,
    ) -> Result<Option<usize>, ConfigError> {
        let Some(e) = self.take(key) else {
            return Ok(None);
        };
        let v: usize = e.value.trim().parse().map_err(|_| {
            self.bad(
                key,
                e.line,
                format!("`{}` is not a non-negative integer", e.value),
            )
        })?;
        if v < min {
            return Err(self.bad(key, e.line, format!("must be >= {min} (got {v})")));
        }
        Ok(Some(v))
    }

    pub fn usize_or(
        &mut self,
        key: &'static str,
        default: usize,
        min: usize,
    ) -> Result<usize, ConfigError> {
        Ok(self.usize_opt(key, min)?.unwrap_or(default))
    }

    pub fn u64_opt(&mut self, key: &'static str) -> Result<Option<u64>, ConfigError> {
        let Some(e) = self.take(key) else {
            return Ok(None);
        };
        e.value.trim().parse().map(Some).map_err(|_| {
            self.bad(
                key,
                e.line,
                format!("`{}` is not a non-negative integer", e.value),
            )
        })
    }

    pub fn bool_or(&mut self, key: &'static str, default: bool) -> Result<bool, ConfigError> {
        let Some(e) = self.take(key) else {
            return Ok(default);
        };
        match e.value.trim() {
            "true" | "yes" | "on" => Ok(true),
            "false" | "no" | "off" => Ok(false),
            other => Err(self.bad(key, e.line, format!("`{other}` is not a boolean"))),
        }
    }

    /// Number list, optionally of a fixed length.
    pub fn list_opt(
        &mut self,
        key: &'static str,
        len: Option<usize>,
    ) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(e) = self.take(key) else {
            return Ok(None);
        };
        let body = e.value.trim().trim_start_matches('[').trim_end_matches(']');
        let mut out = Vec::new();
        for item in body.split(',') {
            let v = parse_number(item)
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    self.bad(key, e.line, format!("`{}` is not a number", item.trim()))
                })?;
            out.push(v);
        }
        if let Some(n) = len {
            if out.len() != n {
                return Err(self.bad(
                    key,
                    e.line,
                    format!("expected {n} numbers, got {}", out.len()),
                ));
            }
        }
        Ok(Some(out))
    }

    pub fn list_req(
        &mut self,
        key: &'static str,
        len: Option<usize>,
    ) -> Result<Vec<f64>, ConfigError> {
        self.list_opt(key, len)?.ok_or_else(|| self.missing(key))
    }

    /// Reject keys no getter asked for.
    pub fn finish(&self) -> Result<(), ConfigError> {
        if let Some((key, e)) = self.entries.iter().min_by_key(|(_, e)| e.line) {
            let expected = if self.known.is_empty() {
                " (this section takes no keys)".to_string()
            } else {
                format!(
                    " (expected one of: {})",
                    self.known.iter().copied().collect::<Vec<_>>().join(", ")
                )
            };
            return Err(ConfigError::UnknownKey {
                line: e.line,
                section: self.section.clone(),
                key: key.clone(),
                expected,
            });
        }
        Ok(())
    }
}

/// Sections of an experiment file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawConfig {
    pub scenario: Params,
    pub pipeline: Params,
    pub run: Params,
}

pub fn parse_sections(text: &str) -> Result<RawConfig, ConfigError> {
    let mut sections: BTreeMap<String, Params> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.split('#').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Syntax {
                    line,
                    message: format!("unterminated section header `{s}`"),
                })?
                .trim();
            if !matches!(name, "scenario" | "pipeline" | "run") {
                return Err(ConfigError::UnknownSection {
                    line,
                    name: name.to_string(),
                });
            }
            if sections.contains_key(name) {
                return Err(ConfigError::DuplicateSection {
                    line,
                    name: name.to_string(),
                });
            }
            sections.insert(name.to_string(), Params::new(name));
            current = Some(name.to_string());
            continue;
        }
        let (key, value) = s.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("expected `key = value`, got `{s}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(ConfigError::Syntax {
                line,
                message: format!("invalid key `{key}`"),
            });
        }
        if value.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                message: format!("empty value for `{key}`"),
            });
        }
        let section = current.as_ref().ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("key `{key}` appears before any section header"),
        })?;
        sections
            .get_mut(section)
            .expect("section registered")
            .insert(key, value, line)?;
    }
    let mut take = |name: &str| sections.remove(name);
    Ok(RawConfig {
        scenario: take("scenario").ok_or_else(|| ConfigError::MissingSection("scenario".into()))?,
        pipeline: take("pipeline").ok_or_else(|| ConfigError::MissingSection("pipeline".into()))?,
        run: take("run").unwrap_or_else(|| Params::new("run")),
    })
}

/// A parsed experiment: the scenario is validated, pipeline keys are left in
/// `pipeline_params` for the pipeline to consume.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub scenario_params: BTreeMap<String, f64>,
    pub pipeline: String,
    pub pipeline_line: usize,
    pub pipeline_params: Params,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw = parse_sections(text)?;
        let mut sc = raw.scenario;
        let (scenario, line) = sc.string_req("name")?;
        let defaults =
            builtin_params(&scenario).map_err(|e| sc.bad("name", line, e.to_string()))?;
        let mut scenario_params = BTreeMap::new();
        for (k, _) in &defaults {
            if let Some(v) = sc.f64_opt(k, Range::Any)? {
                scenario_params.insert(k.to_string(), v);
            }
        }
        sc.finish()?;

        let mut pipeline_params = raw.pipeline;
        let (pipeline, pipeline_line) = pipeline_params.string_req("name")?;

        let mut run = raw.run;
        let seed = run.u64_opt("seed")?;
        let out = run.string_opt("out").map(|(s, _)| PathBuf::from(s));
        let threads = run.usize_opt("threads", 1)?;
        run.finish()?;
        Ok(Self {
            scenario,
            scenario_params,
            pipeline,
            pipeline_line,
            pipeline_params,
            seed,
            out,
            threads,
        })
    }
}
