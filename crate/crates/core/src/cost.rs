//! Append-only token-cost ledger and the per-addition cost curves.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostAction {
    Pretrain,
    Midtrain,
    Sft,
    Rlvr,
    Router,
    BaselineRetrain,
}

impl CostAction {
    pub fn as_str(self) -> &'static str {
        match self {
            CostAction::Pretrain => "pretrain",
            CostAction::Midtrain => "midtrain",
            CostAction::Sft => "sft",
            CostAction::Rlvr => "rlvr",
            CostAction::Router => "router",
            CostAction::BaselineRetrain => "baseline-retrain",
        }
    }
}

impl fmt::Display for CostAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CostAction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain" => CostAction::Pretrain,
            "midtrain" => CostAction::Midtrain,
            "sft" => CostAction::Sft,
            "rlvr" => CostAction::Rlvr,
            "router" => CostAction::Router,
            "baseline-retrain" => CostAction::BaselineRetrain,
            other => return Err(Error::Config(format!("unknown cost action {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEvent {
    pub action: CostAction,
    /// `+`-joined when an event covers several domains.
    pub domains: String,
    pub tokens: u64,
    /// 1-based position of the domain addition this event pays for.
    pub addition: Option<usize>,
}

impl CostEvent {
    pub fn new(action: CostAction, domains: impl Into<String>, tokens: u64) -> Self {
        Self {
            action,
            domains: domains.into(),
            tokens,
            addition: None,
        }
    }

    pub fn tagged(mut self, addition: usize) -> Self {
        self.addition = Some(addition);
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostLedger {
    events: Vec<CostEvent>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: CostEvent) {
        self.events.push(event);
    }

    pub fn extend(&mut self, events: impl IntoIterator<Item = CostEvent>) {
        self.events.extend(events);
    }

    pub fn events(&self) -> &[CostEvent] {
        &self.events
    }

    pub fn total_tokens(&self) -> u64 {
        self.events.iter().map(|e| e.tokens).sum()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.events {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let events = r.deserialize().collect::<std::result::Result<Vec<CostEvent>, _>>()?;
        Ok(Self { events })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostMode {
    /// Each addition pays for its own expert pipeline plus a router retrain.
    Bar,
    /// Each addition retrains the pipelines of every domain added so far.
    Retrain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostSummary {
    pub per_addition: Vec<u64>,
    pub cumulative: Vec<u64>,
}

/// Cost of each domain addition in token units.
///
/// Events without an addition tag (pre-training, baselines) are ignored.
pub fn cost_summary(ledger: &CostLedger, mode: CostMode) -> Result<CostSummary> {
    let mut pipeline: BTreeMap<usize, u64> = BTreeMap::new();
    let mut router: BTreeMap<usize, u64> = BTreeMap::new();
    for e in ledger.events() {
        let Some(n) = e.addition else { continue };
        if n == 0 {
            return Err(Error::Config("addition indices are 1-based".into()));
        }
        let slot = if e.action == CostAction::Router {
            router.entry(n).or_default()
        } else {
            pipeline.entry(n).or_default()
        };
        *slot += e.tokens;
    }
    let n_additions = pipeline.keys().chain(router.keys()).max().copied().unwrap_or(0);
    let mut per_addition = Vec::with_capacity(n_additions);
    let mut retrain_so_far = 0;
    for n in 1..=n_additions {
        let own = pipeline.get(&n).copied().unwrap_or(0);
        per_addition.push(match mode {
            CostMode::Bar => own + router.get(&n).copied().unwrap_or(0),
            CostMode::Retrain => {
                retrain_so_far += own;
                retrain_so_far
            }
        });
    }
    let cumulative = per_addition
        .iter()
        .scan(0u64, |acc, &c| {
            *acc += c;
            Some(*acc)
        })
        .collect();
    Ok(CostSummary {
        per_addition,
        cumulative,
    })
}
