//! Return-on-investment model for business cases.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::money::{DecimalInput, Exact, Fixed};

pub const DEFAULT_SECONDS_SAVED_PER_DOC: i128 = 30;
pub const DEFAULT_FTE_ANNUAL_HOURS: i128 = 1650;

fn default_seconds() -> DecimalInput {
    DecimalInput(Exact::from_integer(DEFAULT_SECONDS_SAVED_PER_DOC))
}

fn default_fte_hours() -> DecimalInput {
    DecimalInput(Exact::from_integer(DEFAULT_FTE_ANNUAL_HOURS))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiInputs {
    pub apps_per_year: DecimalInput,
    pub docs_per_app: DecimalInput,
    #[serde(default = "default_seconds")]
    pub seconds_saved_per_doc: DecimalInput,
    pub officer_hourly_cost: DecimalInput,
    pub annual_system_cost: DecimalInput,
    pub one_off_cost: DecimalInput,
    #[serde(default = "default_fte_hours")]
    pub fte_annual_hours: DecimalInput,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RoiError {
    #[error("{0} must be non-negative")]
    Negative(&'static str),
    #[error("fte_annual_hours must be positive")]
    NonPositiveFteHours,
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

impl RoiInputs {
    pub fn validate(&self) -> Result<(), RoiError> {
        let zero = Exact::from_integer(0);
        let fields = [
            ("apps_per_year", &self.apps_per_year),
            ("docs_per_app", &self.docs_per_app),
            ("seconds_saved_per_doc", &self.seconds_saved_per_doc),
            ("officer_hourly_cost", &self.officer_hourly_cost),
            ("annual_system_cost", &self.annual_system_cost),
            ("one_off_cost", &self.one_off_cost),
            ("fte_annual_hours", &self.fte_annual_hours),
        ];
        for (name, v) in fields {
            if v.0 < zero {
                return Err(RoiError::Negative(name));
            }
        }
        if self.fte_annual_hours.0 == zero {
            return Err(RoiError::NonPositiveFteHours);
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, RoiError> {
        let inputs: RoiInputs = toml::from_str(text).map_err(|e| RoiError::Scenario(e.to_string()))?;
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn load(path: &Path) -> Result<Self, RoiError> {
        let text = std::fs::read_to_string(path).map_err(|e| RoiError::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Scenario names shipped with the library.
pub fn bundled_scenario(name: &str) -> Option<RoiInputs> {
    let text = match name {
        "authorityA" => include_str!("../config/roi/authorityA.toml"),
        _ => return None,
    };
    Some(RoiInputs::from_toml(text).expect("bundled scenario is valid"))
}

/// Unrounded outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiExact {
    pub annual_hours_saved: Exact,
    pub fte_unlocked: Exact,
    pub gross_benefit: Exact,
    pub net_benefit: Exact,
    pub payback_months: Option<Exact>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payback {
    Months(Fixed),
    Never,
}

impl fmt::Display for Payback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payback::Months(m) => m.fmt(f),
            Payback::Never => f.write_str("never"),
        }
    }
}

impl Serialize for Payback {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

/// Outputs as reported: hours and currency to 2 places, FTE to 2, payback
/// months to 1, all rounded half-to-even.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoiOutputs {
    pub annual_hours_saved: Fixed,
    pub fte_unlocked: Fixed,
    pub gross_benefit: Fixed,
    pub net_benefit: Fixed,
    pub payback_months: Payback,
}

pub fn compute_roi_exact(inputs: &RoiInputs) -> RoiExact {
    let hours = inputs.apps_per_year.0 * inputs.docs_per_app.0 * inputs.seconds_saved_per_doc.0 / Exact::from_integer(3600);
    let gross = hours * inputs.officer_hourly_cost.0;
    let net = gross - inputs.annual_system_cost.0;
    let payback = (net > Exact::from_integer(0)).then(|| Exact::from_integer(12) * inputs.one_off_cost.0 / net);
    RoiExact { annual_hours_saved: hours, fte_unlocked: hours / inputs.fte_annual_hours.0, gross_benefit: gross, net_benefit: net, payback_months: payback }
}

pub fn compute_roi(inputs: &RoiInputs) -> RoiOutputs {
    let e = compute_roi_exact(inputs);
    RoiOutputs {
        annual_hours_saved: Fixed::from_exact(&e.annual_hours_saved, 2),
        fte_unlocked: Fixed::from_exact(&e.fte_unlocked, 2),
        gross_benefit: Fixed::from_exact(&e.gross_benefit, 2),
        net_benefit: Fixed::from_exact(&e.net_benefit, 2),
        payback_months: e.payback_months.map_or(Payback::Never, |m| Payback::Months(Fixed::from_exact(&m, 1))),
    }
}
