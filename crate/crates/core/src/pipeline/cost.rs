use serde::{Deserialize, Serialize};

use super::config::ProviderPath;
use super::provider::ProviderResponse;
use crate::money::Micros;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRecord {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub calls: u64,
    pub input_cost: Micros,
    pub output_cost: Micros,
    pub call_cost: Micros,
    pub total: Micros,
    pub path: String,
    pub attempts: u32,
}

impl CostRecord {
    pub fn zero(path: &ProviderPath) -> Self {
        CostRecord {
            input_tokens: 0,
            output_tokens: 0,
            calls: 0,
            input_cost: Micros::ZERO,
            output_cost: Micros::ZERO,
            call_cost: Micros::ZERO,
            total: Micros::ZERO,
            path: path.id(),
            attempts: 0,
        }
    }

    /// Sums two records; the path becomes `a→b` when they differ.
    pub fn combine(&self, other: &CostRecord) -> CostRecord {
        let path = if self.path == other.path || other.attempts == 0 {
            self.path.clone()
        } else if self.attempts == 0 {
            other.path.clone()
        } else {
            format!("{}→{}", self.path, other.path)
        };
        CostRecord {
            input_tokens: self.input_tokens + other.input_tokens,
            output_tokens: self.output_tokens + other.output_tokens,
            calls: self.calls + other.calls,
            input_cost: self.input_cost + other.input_cost,
            output_cost: self.output_cost + other.output_cost,
            call_cost: self.call_cost + other.call_cost,
            total: self.total + other.total,
            path,
            attempts: self.attempts + other.attempts,
        }
    }

    /// The total rounded half-to-even to three decimals.
    pub fn report_total(&self) -> String {
        self.total.report(3)
    }
}

/// Token- and call-accounted cost of a set of responses on one path. Each
/// component is computed exactly and stored in micro-units.
pub fn account_cost(responses: &[ProviderResponse], path: &ProviderPath) -> CostRecord {
    let input_tokens: u64 = responses.iter().map(|r| r.input_tokens).sum();
    let output_tokens: u64 = responses.iter().map(|r| r.output_tokens).sum();
    let calls: u64 = responses.iter().map(|r| r.tool_calls).sum();
    let input_cost = Micros::from_exact(&path.input_rate.cost(input_tokens));
    let output_cost = Micros::from_exact(&path.output_rate.cost(output_tokens));
    let call_cost = Micros::from_exact(&path.per_call_fee.cost(calls));
    CostRecord {
        input_tokens,
        output_tokens,
        calls,
        input_cost,
        output_cost,
        call_cost,
        total: input_cost + output_cost + call_cost,
        path: path.id(),
        attempts: responses.len() as u32,
    }
}
