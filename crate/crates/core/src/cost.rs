//! Token/price/FLOP accounting over agent-call logs.
//!
//! Prices come from a TOML file with one `[[endpoint]]` table per priced
//! endpoint (keys: endpoint, price_in_per_1m, price_out_per_1m, params);
//! the report groups totals per endpoint and per (layer, agent) and is
//! additive over log concatenation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moa::CostRecord;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EndpointPrice {
    pub endpoint: String,
    /// Currency units per 1e6 input tokens.
    pub price_in_per_1m: f64,
    /// Currency units per 1e6 output tokens.
    pub price_out_per_1m: f64,
    /// Parameter-count estimate for the 2 * params * tokens FLOP rule.
    pub params: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct PriceTable {
    #[serde(rename = "endpoint", default)]
    pub endpoints: Vec<EndpointPrice>,
}

impl PriceTable {
    pub fn parse(text: &str) -> Result<PriceTable> {
        let table: PriceTable =
            toml::from_str(text).map_err(|e| Error::Config(format!("price table: {e}")))?;
        for e in &table.endpoints {
            if e.price_in_per_1m < 0.0 || e.price_out_per_1m < 0.0 || e.params < 0.0 {
                return Err(Error::Config(format!(
                    "negative price or params for endpoint {}",
                    e.endpoint
                )));
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<PriceTable> {
        PriceTable::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, endpoint: &str) -> Option<&EndpointPrice> {
        self.endpoints.iter().find(|e| e.endpoint == endpoint)
    }
}

#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct CostTotals {
    pub calls: usize,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub cost: f64,
    pub flop: f64,
}

impl CostTotals {
    fn add(&mut self, other: &CostTotals) {
        self.calls += other.calls;
        self.tokens_in += other.tokens_in;
        self.tokens_out += other.tokens_out;
        self.cost += other.cost;
        self.flop += other.flop;
    }
}

#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct CostReport {
    pub total: CostTotals,
    pub per_endpoint: BTreeMap<String, CostTotals>,
    pub per_layer_agent: BTreeMap<String, CostTotals>,
}

/// cost = tokens_in/1e6 * price_in + tokens_out/1e6 * price_out;
/// FLOP = 2 * params * tokens_in. Every logged endpoint must be priced.
///
/// Token counts are tallied as integers first and priced from the group
/// totals, so round hand-arithmetic cases come out exact.
pub fn cost_report(log: &[CostRecord], prices: &PriceTable) -> Result<CostReport> {
    let mut report = CostReport::default();
    // integer tallies keyed by (endpoint, layer.agent)
    let mut tallies: BTreeMap<(String, String), (usize, usize, usize)> = BTreeMap::new();
    for rec in log {
        if prices.get(&rec.endpoint).is_none() {
            return Err(Error::UnknownEndpoint(rec.endpoint.clone()));
        }
        let key = (rec.endpoint.clone(), format!("{}.{}", rec.layer, rec.agent));
        let t = tallies.entry(key).or_insert((0, 0, 0));
        t.0 += 1;
        t.1 += rec.tokens_in;
        t.2 += rec.tokens_out;
    }
    for ((endpoint, layer_agent), (calls, tokens_in, tokens_out)) in tallies {
        let price = prices.get(&endpoint).expect("validated above");
        let entry = CostTotals {
            calls,
            tokens_in,
            tokens_out,
            cost: tokens_in as f64 / 1e6 * price.price_in_per_1m
                + tokens_out as f64 / 1e6 * price.price_out_per_1m,
            flop: 2.0 * price.params * tokens_in as f64,
        };
        report.total.add(&entry);
        report.per_endpoint.entry(endpoint).or_default().add(&entry);
        report
            .per_layer_agent
            .entry(layer_agent)
            .or_default()
            .add(&entry);
    }
    Ok(report)
}

impl CostReport {
    /// Line-delimited JSON: per-endpoint rows then the total.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (endpoint, totals) in &self.per_endpoint {
            let mut v = serde_json::to_value(totals).expect("totals serialize");
            v["endpoint"] = serde_json::Value::String(endpoint.clone());
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let mut v = serde_json::to_value(&self.total).expect("totals serialize");
        v["endpoint"] = serde_json::Value::String("TOTAL".into());
        out.push_str(&v.to_string());
        out.push('\n');
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from(
            "endpoint          calls   tokens_in  tokens_out        cost          flop\n",
        );
        let mut row = |name: &str, t: &CostTotals| {
            out.push_str(&format!(
                "{name:<16} {:>6} {:>11} {:>11} {:>11.6} {:>13.3e}\n",
                t.calls, t.tokens_in, t.tokens_out, t.cost, t.flop
            ));
        };
        for (endpoint, totals) in &self.per_endpoint {
            row(endpoint, totals);
        }
        row("TOTAL", &self.total);
        out
    }
}

/// Append cost records as line-delimited JSON.
pub fn write_cost_log<W: Write>(mut w: W, log: &[CostRecord]) -> Result<()> {
    for rec in log {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a line-delimited JSON cost log; blank lines are skipped.
pub fn read_cost_log<R: BufRead>(r: R) -> Result<Vec<CostRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
