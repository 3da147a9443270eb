//! Examples-proportional mixing with a per-dataset size cap.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RetrievalError;
use crate::scalar::Scalar;

/// Default dataset size cap `K = 2^19`.
pub const DEFAULT_MIXING_CAP: u64 = 1 << 19;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent<T> {
    pub id: String,
    pub examples: u64,
    pub rate: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec<T> {
    pub components: Vec<MixtureComponent<T>>,
    pub cap: u64,
}

/// `rate_m = min(e_m, K) / Σ_n min(e_n, K)`.
pub fn mixture_rates<T: Scalar>(
    sizes: &[(String, u64)],
    cap: u64,
) -> Result<MixtureSpec<T>, RetrievalError> {
    if sizes.is_empty() {
        return Err(RetrievalError::EmptySizes);
    }
    if cap == 0 {
        return Err(RetrievalError::ZeroCap);
    }
    if let Some((id, _)) = sizes.iter().find(|(_, n)| *n == 0) {
        return Err(RetrievalError::ZeroSize { id: id.clone() });
    }
    let capped: Vec<T> = sizes
        .iter()
        .map(|(_, n)| T::from_u64((*n).min(cap)).expect("u64 fits in a float"))
        .collect();
    let total: T = capped.iter().copied().sum();
    Ok(MixtureSpec {
        components: sizes
            .iter()
            .zip(capped)
            .map(|((id, n), c)| MixtureComponent {
                id: id.clone(),
                examples: *n,
                rate: c / total,
            })
            .collect(),
        cap,
    })
}

/// Seeded stream of `(component index, example)` pairs. Components are
/// drawn i.i.d. by rate; within a component examples are visited in a
/// shuffled order that is reshuffled after every full pass.
pub struct MixtureStream<'a, E> {
    rng: ChaCha8Rng,
    chooser: WeightedIndex<f64>,
    pools: Vec<Pool<'a, E>>,
    remaining: usize,
}

struct Pool<'a, E> {
    items: &'a [E],
    order: Vec<usize>,
    pos: usize,
}

impl<'a, E> Pool<'a, E> {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> &'a E {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let item = &self.items[self.order[self.pos]];
        self.pos += 1;
        item
    }
}

impl<'a, E> Iterator for MixtureStream<'a, E> {
    type Item = (usize, &'a E);

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let m = self.chooser.sample(&mut self.rng);
        Some((m, self.pools[m].next(&mut self.rng)))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl<E> ExactSizeIterator for MixtureStream<'_, E> {}

pub fn compose_mixture<'a, T: Scalar, E>(
    spec: &MixtureSpec<T>,
    datasets: &'a BTreeMap<String, Vec<E>>,
    total_examples: usize,
    seed: u64,
) -> Result<MixtureStream<'a, E>, RetrievalError> {
    if total_examples == 0 {
        return Err(RetrievalError::NoDraws);
    }
    if spec.components.is_empty() {
        return Err(RetrievalError::EmptySizes);
    }
    let mut pools = Vec::with_capacity(spec.components.len());
    for c in &spec.components {
        let items = datasets
            .get(&c.id)
            .ok_or_else(|| RetrievalError::MissingDataset(c.id.clone()))?;
        if items.is_empty() {
            return Err(RetrievalError::EmptyDataset(c.id.clone()));
        }
        pools.push(Pool {
            items,
            order: (0..items.len()).collect(),
            // forces a shuffle before the first draw
            pos: items.len(),
        });
    }
    let chooser = WeightedIndex::new(spec.components.iter().map(|c| c.rate.widen()))
        .map_err(|_| RetrievalError::EmptySizes)?;
    Ok(MixtureStream {
        rng: ChaCha8Rng::seed_from_u64(seed),
        chooser,
        pools,
        remaining: total_examples,
    })
}
