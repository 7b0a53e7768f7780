//! Finite-difference verification of the BRM training gradient on small
//! random instances.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::brm::{batch_loss, pseudo_labels, Batch, BrmError, BrmParams};
use crate::numerics::grad_check;
use crate::session::{expand_events, Interaction, Session};

pub const BLOCKS: [&str; 4] = ["user_emb", "item_emb", "gate_w", "gate_b"];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCase {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub beta: f64,
    pub n_events: usize,
    /// Max relative error per block, in [`BLOCKS`] order.
    pub block_errors: [f64; 4],
}

impl ToyCase {
    pub fn max_error(&self) -> f64 {
        self.block_errors.iter().copied().fold(0.0, f64::max)
    }
}

impl fmt::Display for ToyCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seed={} users={} items={} d={} beta={} events={}", self.seed, self.n_users, self.n_items, self.dim, self.beta, self.n_events)?;
        for (name, err) in BLOCKS.iter().zip(self.block_errors) {
            write!(f, " {name}={err:.2e}")?;
        }
        Ok(())
    }
}

/// Random histories cut into sessions of 2..=4 items, expanded into
/// events with their real pseudo-labels. Some users get a single session,
/// so empty recent sets show up.
pub fn toy_instance(seed: u64, n_users: usize, n_items: usize, dim: usize) -> (BrmParams, Vec<Vec<Interaction>>, Vec<Session>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BrmParams::init(n_users, n_items, dim, seed);
    // a trained-looking gate rather than the near-zero init
    for w in params.gate_w.iter_mut() {
        *w = rng.gen_range(-1.0..1.0);
    }
    params.gate_b = rng.gen_range(-0.5..0.5);

    let mut histories = vec![Vec::new(); n_users];
    let mut sessions = Vec::new();
    for (u, history) in histories.iter_mut().enumerate() {
        let n_sessions = rng.gen_range(1..=3);
        for _ in 0..n_sessions {
            let len = rng.gen_range(2..=4);
            let offset = history.len();
            let items: Vec<u32> = (0..len).map(|_| rng.gen_range(0..n_items) as u32).collect();
            for &item in &items {
                let timestamp = history.len() as i64;
                history.push(Interaction { user: u as u32, item, timestamp });
            }
            sessions.push(Session {
                id: sessions.len() as u32,
                user: u as u32,
                start_time: offset as i64,
                end_time: history.len() as i64 - 1,
                items,
                offset,
            });
        }
    }
    (params, histories, sessions)
}

fn check_one(seed: u64, n_users: usize, n_items: usize, dim: usize, beta: f64) -> Result<ToyCase, BrmError> {
    let (params, histories, sessions) = toy_instance(seed, n_users, n_items, dim);
    let dataset = crate::session::Dataset {
        users: crate::session::Vocab::from_names((0..n_users).map(|u| u.to_string())),
        items: crate::session::Vocab::from_names((0..n_items).map(|v| v.to_string())),
        histories,
    };
    let events = expand_events(&sessions, &dataset, 3);
    let labels = events.iter().map(|e| pseudo_labels(e, dataset.history(e.user))).collect();
    let batch = Batch::new(events.iter().collect(), labels);
    let (_, grads) = batch_loss(&params, &batch, beta, true)?;
    let analytic = grads.expect("gradient requested").to_flat();
    let x = params.to_flat();

    let sizes = [n_users * dim, n_items * dim, 3 * dim, 1];
    let mut block_errors = [0.0; 4];
    let mut start = 0;
    for (b, &size) in sizes.iter().enumerate() {
        let range = start..start + size;
        let f = |xb: &[f64]| {
            let mut full = x.clone();
            full[range.clone()].copy_from_slice(xb);
            batch_loss(&params.with_flat(&full), &batch, beta, false).map(|(l, _)| l.total).unwrap_or(f64::NAN)
        };
        block_errors[b] = grad_check(f, &x[range.clone()], &analytic[range.clone()], 1e-5)?;
        start += size;
    }
    Ok(ToyCase { seed, n_users, n_items, dim, beta, n_events: events.len(), block_errors })
}

/// Run `n_cases` toys with 3-10 users, 5-20 items, d in {2, 8} and
/// beta in {0, 1, 10}.
pub fn run_suite(n_cases: usize, seed: u64) -> Result<Vec<ToyCase>, BrmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_cases)
        .map(|i| {
            let n_users = rng.gen_range(3..=10);
            let n_items = rng.gen_range(5..=20);
            let dim = if i % 2 == 0 { 2 } else { 8 };
            let beta = [0.0, 1.0, 10.0][i % 3];
            check_one(rng.gen(), n_users, n_items, dim, beta)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let cases = run_suite(3, 1).unwrap();
        assert_eq!(cases.len(), 3);
        for c in &cases {
            assert!(c.n_events > 0);
            assert!(c.max_error() <= 1e-4, "{c}");
        }
    }

    #[test]
    fn toy_sessions_tile_histories() {
        let (_, histories, sessions) = toy_instance(4, 5, 9, 2);
        let total: usize = sessions.iter().map(Session::len).sum();
        assert_eq!(total, histories.iter().map(Vec::len).sum::<usize>());
        for s in &sessions {
            let h = &histories[s.user as usize];
            assert!(s.items.iter().enumerate().all(|(k, &v)| h[s.offset + k].item == v));
        }
    }
}
