//! Versioned JSON experiment reports.

use std::collections::BTreeMap;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Bumped on any change to the report fields.
pub const SCHEMA_VERSION: u32 = 1;

/// A real number that survives JSON: finite values are numbers, the rest
/// the strings `"inf"`, `"-inf"` and `"nan"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Real(pub f64);

impl From<f64> for Real {
    fn from(x: f64) -> Self {
        Real(x)
    }
}

impl Serialize for Real {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let x = self.0;
        if x.is_finite() {
            s.serialize_f64(x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::Number(n) => n.as_f64().map(Real).ok_or_else(|| de::Error::custom("bad number")),
            Value::String(s) => match s.as_str() {
                "inf" => Ok(Real(f64::INFINITY)),
                "-inf" => Ok(Real(f64::NEG_INFINITY)),
                "nan" => Ok(Real(f64::NAN)),
                other => Err(de::Error::custom(format!("not a real: {other}"))),
            },
            other => Err(de::Error::custom(format!("not a real: {other}"))),
        }
    }
}

/// JSON value of a real, following the [`Real`] convention.
pub fn real(x: f64) -> Value {
    serde_json::to_value(Real(x)).expect("reals serialise")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `value < tolerance`.
    Below,
    /// `value > tolerance`.
    Above,
    /// A boolean property; `value` is 1 when it holds.
    Holds,
    /// Recorded only; never fails.
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub value: Real,
    pub tolerance: Real,
    pub comparison: Comparison,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub experiment: String,
    #[serde(default)]
    pub config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ModelParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    pub seeds: Vec<u64>,
    pub statistics: BTreeMap<String, Value>,
    pub criteria: Vec<Criterion>,
    pub warnings: Vec<String>,
    pub pass: bool,
    pub runtime_seconds: f64,
}

impl Report {
    pub fn new(experiment: impl Into<String>) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            experiment: experiment.into(),
            config: Value::Null,
            params: None,
            sites: None,
            particles: None,
            seeds: Vec::new(),
            statistics: BTreeMap::new(),
            criteria: Vec::new(),
            warnings: Vec::new(),
            pass: true,
            runtime_seconds: 0.0,
        }
    }

    pub fn with_model(mut self, params: ModelParams, sites: Option<usize>, particles: Option<usize>) -> Self {
        self.params = Some(params);
        self.sites = sites;
        self.particles = particles;
        self
    }

    pub fn stat(&mut self, key: impl Into<String>, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.statistics.insert(key.into(), v);
    }

    pub fn stat_real(&mut self, key: impl Into<String>, x: f64) {
        self.statistics.insert(key.into(), real(x));
    }

    fn push(&mut self, name: String, value: f64, tolerance: f64, comparison: Comparison, pass: bool, detail: Option<String>) -> bool {
        self.pass &= pass;
        self.criteria.push(Criterion {
            name,
            value: Real(value),
            tolerance: Real(tolerance),
            comparison,
            pass,
            detail,
        });
        pass
    }

    /// Records `value < tolerance`; NaN fails.
    pub fn below(&mut self, name: impl Into<String>, value: f64, tolerance: f64) -> bool {
        self.push(name.into(), value, tolerance, Comparison::Below, value < tolerance, None)
    }

    pub fn above(&mut self, name: impl Into<String>, value: f64, tolerance: f64) -> bool {
        self.push(name.into(), value, tolerance, Comparison::Above, value > tolerance, None)
    }

    pub fn holds(&mut self, name: impl Into<String>, ok: bool, detail: impl Into<String>) -> bool {
        let d = detail.into();
        let detail = (!d.is_empty()).then_some(d);
        self.push(name.into(), ok as u8 as f64, 1.0, Comparison::Holds, ok, detail)
    }

    pub fn info(&mut self, name: impl Into<String>, value: f64, reference: f64) {
        self.push(name.into(), value, reference, Comparison::Info, true, None);
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }

    /// Appends the criteria, statistics and warnings of `other` under a prefix.
    pub fn absorb(&mut self, prefix: &str, other: Report) {
        for mut c in other.criteria {
            c.name = format!("{prefix}/{}", c.name);
            self.pass &= c.pass;
            self.criteria.push(c);
        }
        for (k, v) in other.statistics {
            self.statistics.insert(format!("{prefix}/{k}"), v);
        }
        self.warnings.extend(other.warnings.into_iter().map(|w| format!("{prefix}: {w}")));
        self.seeds.extend(other.seeds);
        self.seeds.sort_unstable();
        self.seeds.dedup();
    }

    pub fn failures(&self) -> impl Iterator<Item = &Criterion> {
        self.criteria.iter().filter(|c| !c.pass)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        validate_report(&v)?;
        Ok(serde_json::from_value(v)?)
    }
}

/// Checks a parsed report against schema version [`SCHEMA_VERSION`].
pub fn validate_report(v: &Value) -> Result<()> {
    let bad = |m: String| Err(Error::Format(format!("report schema: {m}")));
    let obj = match v.as_object() {
        Some(o) => o,
        None => return bad("top level is not an object".into()),
    };
    match obj.get("schema_version").and_then(Value::as_u64) {
        Some(x) if x == SCHEMA_VERSION as u64 => {}
        other => return bad(format!("schema_version {other:?}, expected {SCHEMA_VERSION}")),
    }
    let required = [
        ("experiment", Value::is_string as fn(&Value) -> bool),
        ("seeds", Value::is_array),
        ("statistics", Value::is_object),
        ("criteria", Value::is_array),
        ("warnings", Value::is_array),
        ("pass", Value::is_boolean),
        ("runtime_seconds", Value::is_number),
    ];
    for (key, check) in required {
        match obj.get(key) {
            Some(x) if check(x) => {}
            Some(_) => return bad(format!("field {key} has the wrong type")),
            None => return bad(format!("missing field {key}")),
        }
    }
    if obj["seeds"].as_array().is_some_and(|s| s.iter().any(|x| !x.is_u64())) {
        return bad("seeds must be unsigned integers".into());
    }
    let is_real = |x: &Value| x.is_number() || matches!(x.as_str(), Some("inf" | "-inf" | "nan"));
    let mut all = true;
    for (i, c) in obj["criteria"].as_array().into_iter().flatten().enumerate() {
        let ok = c.get("name").is_some_and(Value::is_string)
            && c.get("value").is_some_and(is_real)
            && c.get("tolerance").is_some_and(is_real)
            && c.get("pass").is_some_and(Value::is_boolean)
            && c.get("comparison")
                .and_then(Value::as_str)
                .is_some_and(|s| matches!(s, "below" | "above" | "holds" | "info"));
        if !ok {
            return bad(format!("criterion {i} is malformed"));
        }
        all &= c["pass"].as_bool().unwrap_or(false);
    }
    if obj["pass"].as_bool() != Some(all) {
        return bad("pass flag disagrees with criteria".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_validation() {
        let mut r = Report::new("demo").with_model(ModelParams::power_law(2.5).unwrap(), Some(3), Some(5));
        r.seeds.push(7);
        r.stat_real("sigma2", f64::INFINITY);
        r.below("ks", 0.01, 0.05);
        r.info("throughput", 123.0, 100.0);
        let text = r.to_json().unwrap();
        assert!(text.contains("\"inf\""));
        let back = Report::from_json(&text).unwrap();
        assert_eq!(back.criteria, r.criteria);
        assert!(back.pass);
        assert_eq!(back.statistics["sigma2"], Value::String("inf".into()));
    }

    #[test]
    fn failures_propagate() {
        let mut r = Report::new("demo");
        r.below("nan fails", f64::NAN, 1.0);
        assert!(!r.pass);
        let mut outer = Report::new("outer");
        outer.absorb("inner", r);
        assert!(!outer.pass);
        assert_eq!(outer.failures().next().unwrap().name, "inner/nan fails");
    }

    #[test]
    fn validator_rejects_malformed() {
        let good = serde_json::to_value(Report::new("x")).unwrap();
        assert!(validate_report(&good).is_ok());
        let mut v = good.clone();
        v["schema_version"] = Value::from(99);
        assert!(validate_report(&v).is_err());
        let mut v = good.clone();
        v.as_object_mut().unwrap().remove("criteria");
        assert!(validate_report(&v).is_err());
        let mut v = good;
        v["pass"] = Value::Bool(false);
        assert!(validate_report(&v).is_err());
    }
}
