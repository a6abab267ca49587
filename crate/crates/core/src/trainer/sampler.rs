use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::types::Label;

/// Endless shuffled cycle over one class; reshuffles when exhausted.
struct ClassCycle {
    pool: Vec<usize>,
    queue: Vec<usize>,
}

impl ClassCycle {
    fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.queue.is_empty() {
            self.queue = self.pool.clone();
            self.queue.shuffle(rng);
        }
        self.queue.pop().expect("non-empty pool")
    }
}

/// One epoch of class-balanced batches: `ceil(N/B)` batches, each with
/// `ceil(B/2)` security and `floor(B/2)` non-security samples. A class
/// that runs out is redrawn from a fresh shuffle.
pub fn balanced_batches(labels: &[Label], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let security: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_security()).collect();
    let other: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].is_security()).collect();
    if security.is_empty() {
        return Err(Error::EmptyClass(Label::Security));
    }
    if other.is_empty() {
        return Err(Error::EmptyClass(Label::NonSecurity));
    }
    let mut sec = ClassCycle { pool: security, queue: vec![] };
    let mut non = ClassCycle { pool: other, queue: vec![] };
    let n_batches = labels.len().div_ceil(batch_size);
    let (n_sec, n_non) = (batch_size.div_ceil(2), batch_size / 2);
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut batch: Vec<usize> = (0..n_sec).map(|_| sec.next(rng)).collect();
        batch.extend((0..n_non).map(|_| non.next(rng)));
        batch.shuffle(rng);
        batches.push(batch);
    }
    Ok(batches)
}
