//! The black-box boundary. A teacher is reachable only through
//! [`HardLabelOracle::query`], which returns one class index per image and
//! charges the budget once per image.

mod http;
pub mod wire;

use std::path::Path;

pub use http::{HttpOracle, RetryPolicy};

use crate::error::{Error, Result};
use crate::nn::{Classifier, TeacherNet};
use crate::tensor::Tensor;

/// Budget `Q` and the monotone count of images already answered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryLedger {
    budget: usize,
    used: usize,
}

impl QueryLedger {
    pub fn new(budget: usize) -> Self {
        Self { budget, used: 0 }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.used
    }

    /// Charges `n` queries, or nothing when that would exceed the budget.
    pub fn charge(&mut self, n: usize) -> Result<()> {
        if n > self.remaining() {
            return Err(Error::BudgetExhausted {
                requested: n,
                remaining: self.remaining(),
            });
        }
        self.used += n;
        Ok(())
    }
}

/// A teacher that answers with hard labels only.
pub trait HardLabelOracle {
    /// Top-1 class per image of a `(B, channels, H, W)` batch. Charges `B`.
    fn query(&mut self, images: &Tensor) -> Result<Vec<usize>>;

    fn ledger(&self) -> QueryLedger;

    fn remaining(&self) -> usize {
        self.ledger().remaining()
    }
}

/// Teacher weights held in-process behind the same contract as the remote form.
pub struct LocalOracle {
    teacher: TeacherNet,
    ledger: QueryLedger,
}

impl LocalOracle {
    pub fn new(teacher: TeacherNet, budget: usize) -> Self {
        Self {
            teacher,
            ledger: QueryLedger::new(budget),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.teacher.input_shape()
    }

    pub fn classes(&self) -> usize {
        self.teacher.classes()
    }
}

pub fn make_local_oracle(teacher_weights: &Path, budget: usize) -> Result<LocalOracle> {
    Ok(LocalOracle::new(Classifier::load(teacher_weights)?, budget))
}

pub fn make_http_oracle(endpoint: &str, api_key: &str) -> Result<HttpOracle> {
    HttpOracle::connect(endpoint, api_key, RetryPolicy::default())
}

impl HardLabelOracle for LocalOracle {
    fn query(&mut self, images: &Tensor) -> Result<Vec<usize>> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.teacher.input_shape() {
            return Err(Error::Shape {
                op: "query",
                detail: format!("teacher expects (B, {:?}) images, got {s:?}", self.teacher.input_shape()),
            });
        }
        self.ledger.charge(s[0])?;
        self.teacher.predict_labels(images)
    }

    fn ledger(&self) -> QueryLedger {
        self.ledger
    }
}

/// Wraps an oracle and counts every call that reaches it.
pub struct CountingOracle<O> {
    inner: O,
    calls: usize,
    images: usize,
}

impl<O: HardLabelOracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            calls: 0,
            images: 0,
        }
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

impl<O: HardLabelOracle> HardLabelOracle for CountingOracle<O> {
    fn query(&mut self, images: &Tensor) -> Result<Vec<usize>> {
        self.calls += 1;
        self.images += images.shape().first().copied().unwrap_or(0);
        self.inner.query(images)
    }

    fn ledger(&self) -> QueryLedger {
        self.inner.ledger()
    }
}
