//! Pass/fail evidence shared by every verification routine.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

/// One inequality `observed <= bound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub label: String,
    pub observed: f64,
    pub bound: f64,
    pub passed: bool,
}

impl Check {
    pub fn margin(&self) -> f64 {
        self.bound - self.observed
    }
}

/// Worst-case point found by a sampling check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub description: String,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub status: Status,
    pub checks: Vec<Check>,
    pub witness: Option<Witness>,
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl ConditionReport {
    pub fn new(name: impl Into<String>) -> Self {
        ConditionReport {
            name: name.into(),
            status: Status::Pass,
            checks: Vec::new(),
            witness: None,
            metrics: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    /// Records `observed <= bound`. NaN observations fail.
    pub fn check(&mut self, label: impl Into<String>, observed: f64, bound: f64) -> bool {
        let passed = observed <= bound;
        self.checks.push(Check { label: label.into(), observed, bound, passed });
        if !passed && self.status == Status::Pass {
            self.status = Status::Fail;
        }
        passed
    }

    pub fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn witness(&mut self, description: impl Into<String>, point: Vec<f64>) {
        self.witness = Some(Witness { description: description.into(), point });
    }

    pub fn not_applicable(mut self, reason: impl Into<String>) -> Self {
        self.status = Status::NotApplicable;
        self.notes.push(reason.into());
        self
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    pub fn failed(&self) -> bool {
        self.status == Status::Fail
    }

    pub fn check_named(&self, label: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.label == label)
    }

    /// Smallest margin over all checks; `+inf` when there are none.
    pub fn worst_margin(&self) -> f64 {
        self.checks.iter().map(Check::margin).fold(f64::INFINITY, f64::min)
    }
}
