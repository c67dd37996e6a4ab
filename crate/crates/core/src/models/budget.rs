use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Token budget shared by every query charged against it.
///
/// A limit of 0 means unlimited. Charges are all-or-nothing: a query whose
/// cost would push `consumed` past the limit is refused and nothing is
/// recorded, so `consumed <= limit` always holds.
#[derive(Debug)]
pub struct Budget {
    limit: u64,
    ledger: Mutex<Ledger>,
}

#[derive(Debug, Default, Clone)]
struct Ledger {
    consumed: u64,
    queries: u64,
    per_model: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSnapshot {
    pub limit: u64,
    pub consumed: u64,
    pub queries: u64,
    pub per_model: BTreeMap<String, u64>,
}

impl Budget {
    pub fn new(limit: u64) -> Self {
        Budget {
            limit,
            ledger: Mutex::new(Ledger::default()),
        }
    }

    pub fn unlimited() -> Self {
        Budget::new(0)
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }

    pub fn is_unlimited(&self) -> bool {
        self.limit == 0
    }

    pub fn consumed(&self) -> u64 {
        self.ledger.lock().unwrap().consumed
    }

    /// Tokens left, or `None` for an unlimited budget.
    pub fn remaining(&self) -> Option<u64> {
        if self.is_unlimited() {
            None
        } else {
            Some(self.limit - self.consumed())
        }
    }

    pub fn try_charge(&self, model_id: &str, cost: u64) -> Result<(), ModelError> {
        let mut ledger = self.ledger.lock().unwrap();
        if self.limit > 0 && ledger.consumed + cost > self.limit {
            return Err(ModelError::BudgetExhausted {
                limit: self.limit,
                consumed: ledger.consumed,
                requested: cost,
            });
        }
        ledger.consumed += cost;
        ledger.queries += 1;
        *ledger.per_model.entry(model_id.to_string()).or_default() += cost;
        Ok(())
    }

    pub fn snapshot(&self) -> BudgetSnapshot {
        let ledger = self.ledger.lock().unwrap();
        BudgetSnapshot {
            limit: self.limit,
            consumed: ledger.consumed,
            queries: ledger.queries,
            per_model: ledger.per_model.clone(),
        }
    }
}

/// Largest number of full-prompt queries the remaining budget affords:
/// `floor(remaining / prompt_cost)`. Unlimited budgets return `ceiling`.
pub fn k_max(budget: &Budget, prompt_cost: u64, ceiling: usize) -> usize {
    match budget.remaining() {
        None => ceiling,
        Some(_) if prompt_cost == 0 => ceiling,
        Some(rem) => (rem / prompt_cost) as usize,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_max_examples() {
        assert_eq!(k_max(&Budget::new(10_000), 400, 1000), 25);
        assert_eq!(k_max(&Budget::new(399), 400, 1000), 0);
        let b = Budget::new(10_000);
        for _ in 0..10 {
            b.try_charge("t", 400).unwrap();
        }
        assert_eq!(b.consumed(), 4000);
        assert_eq!(k_max(&b, 400, 1000), 15);
        assert_eq!(k_max(&Budget::unlimited(), 400, 1000), 1000);
    }

    #[test]
    fn refuses_overdraft() {
        let b = Budget::new(100);
        b.try_charge("m", 60).unwrap();
        let err = b.try_charge("m", 41).unwrap_err();
        assert!(matches!(err, ModelError::BudgetExhausted { consumed: 60, .. }));
        assert_eq!(b.consumed(), 60);
        b.try_charge("m", 40).unwrap();
        assert_eq!(b.consumed(), 100);
    }

    #[test]
    fn per_model_ledgers() {
        let b = Budget::unlimited();
        b.try_charge("a", 3).unwrap();
        b.try_charge("b", 5).unwrap();
        b.try_charge("a", 1).unwrap();
        let s = b.snapshot();
        assert_eq!(s.consumed, 9);
        assert_eq!(s.queries, 3);
        assert_eq!(s.per_model["a"], 4);
        assert_eq!(s.per_model["b"], 5);
    }
}
