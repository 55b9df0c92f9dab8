//! Grid-free evaluation of `V_k` by direct recursion through the operators.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::model::{PdmpModel, StatePoint};
use crate::operators::{op_lscript, Evaluable, SearchOptions};

/// Deepest level the recursive evaluator accepts.
pub const K_EXACT: usize = 3;
const KEY_RESOLUTION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactOptions {
    pub search: SearchOptions,
    /// Maximum number of distinct `(k, state)` evaluations.
    pub budget: usize,
}

impl Default for ExactOptions {
    fn default() -> Self {
        ExactOptions {
            search: SearchOptions::default(),
            budget: 100_000,
        }
    }
}

type Key = (usize, usize, Vec<i64>);

struct Shared<'a> {
    m: &'a PdmpModel,
    h: &'a dyn Evaluable,
    eps: f64,
    opts: ExactOptions,
    memo: Mutex<HashMap<Key, f64>>,
    evaluations: AtomicUsize,
}

struct Level<'a, 'b> {
    shared: &'b Shared<'a>,
    k: usize,
}

impl Evaluable for Level<'_, '_> {
    fn eval(&self, x: &StatePoint) -> Result<f64> {
        let s = self.shared;
        if self.k == 0 {
            return s.h.eval(x);
        }
        let key = (
            self.k,
            x.mode.0,
            x.zeta
                .iter()
                .map(|z| (z / KEY_RESOLUTION).round() as i64)
                .collect(),
        );
        if let Some(v) = s.memo.lock().expect("memo lock").get(&key) {
            return Ok(*v);
        }
        if s.evaluations.fetch_add(1, Ordering::Relaxed) >= s.opts.budget {
            return Err(Error::Resource(format!(
                "recursive evaluation exceeded {} states",
                s.opts.budget
            )));
        }
        let lower = Level {
            shared: s,
            k: self.k - 1,
        };
        let v = op_lscript(s.m, &lower, x, s.eps, &s.opts.search)?.value;
        s.memo.lock().expect("memo lock").insert(key, v);
        Ok(v)
    }

    fn bound(&self) -> f64 {
        let s = self.shared;
        s.h.bound() + self.k as f64 * (s.m.cost_upper + s.eps)
    }
}

/// `V_k(x)` from `V_0 = h` by recursion, with memoisation on states rounded
/// to `1e-9`.
pub fn eval_vk_exact(
    m: &PdmpModel,
    h: &dyn Evaluable,
    k: usize,
    x: &StatePoint,
    eps: f64,
    opts: &ExactOptions,
) -> Result<f64> {
    if k > K_EXACT {
        return Err(Error::Resource(format!(
            "recursive evaluation is limited to k ≤ {K_EXACT}, got {k}"
        )));
    }
    let shared = Shared {
        m,
        h,
        eps,
        opts: *opts,
        memo: Mutex::new(HashMap::new()),
        evaluations: AtomicUsize::new(0),
    };
    Level { shared: &shared, k }.eval(x)
}
