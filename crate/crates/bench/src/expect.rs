use hpcledger_core::sim::RunOutput;
use serde::Deserialize;

/// Assertions a scenario makes about each of its runs.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    pub blocks_failed: Option<u64>,
    pub min_blocks_proposed: Option<u64>,
    /// Every proposed block committed, one way or the other.
    pub all_committed: Option<bool>,
    pub ledger_validity_pct: Option<f64>,
    pub storage_validations: Option<u64>,
    /// Live nodes hold byte-identical chains.
    pub identical_ledgers: Option<bool>,
    /// No empty throughput bucket after the first one.
    pub no_zero_buckets: Option<bool>,
    pub max_restarts: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub invariant: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.invariant, self.detail)
    }
}

impl Expectations {
    pub fn check(&self, out: &RunOutput) -> Vec<Failure> {
        let r = &out.report;
        let mut fails = Vec::new();
        let mut want = |ok: bool, invariant: &'static str, detail: String| {
            if !ok {
                fails.push(Failure { invariant, detail });
            }
        };
        want(r.blocks_conserved(), "blocks_conserved", format!("{} proposed", r.blocks_proposed));
        want((0.0..=100.0).contains(&r.ledger_validity_pct), "validity_range", format!("{}", r.ledger_validity_pct));
        if let Some(v) = self.blocks_failed {
            want(r.blocks_failed == v, "blocks_failed", format!("{} != {v}", r.blocks_failed));
        }
        if let Some(v) = self.min_blocks_proposed {
            want(r.blocks_proposed >= v, "min_blocks_proposed", format!("{} < {v}", r.blocks_proposed));
        }
        if self.all_committed == Some(true) {
            let done = r.blocks_committed + r.blocks_storage_committed;
            want(done == r.blocks_proposed, "all_committed", format!("{done} of {}", r.blocks_proposed));
        }
        if let Some(v) = self.ledger_validity_pct {
            want(r.ledger_validity_pct >= v, "ledger_validity_pct", format!("{} < {v}", r.ledger_validity_pct));
        }
        if let Some(v) = self.storage_validations {
            want(r.storage_validations == v, "storage_validations", format!("{} != {v}", r.storage_validations));
        }
        if self.identical_ledgers == Some(true) {
            let mut live = out.node_ledgers.iter().filter(|l| l.alive);
            let same = match live.next() {
                Some(first) => live.all(|l| l.ledger.same_chain(&first.ledger)) && first.ledger.same_chain(&out.storage_ledger),
                None => false,
            };
            want(same, "identical_ledgers", "live replicas differ".into());
        }
        if self.no_zero_buckets == Some(true) {
            let span = r.workload_buckets.min(r.timeseries.len());
            let zero = r.timeseries.iter().take(span).skip(1).position(|&v| v == 0);
            want(zero.is_none(), "no_zero_buckets", format!("bucket {} empty", zero.map_or(0, |z| z + 1)));
        }
        if let Some(v) = self.max_restarts {
            want(r.restarts <= v, "max_restarts", format!("{} > {v}", r.restarts));
        }
        fails
    }
}
