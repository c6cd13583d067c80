use std::collections::{BTreeMap, HashSet};

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::manifest::{Manifest, Modality, Split};
use crate::error::{Error, Result};

/// One epoch of P x K batches over manifest record indices.
///
/// Inside a batch, each identity occupies `K` consecutive slots: `K/2`
/// optical records followed by `K/2` SAR records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub p: usize,
    pub k: usize,
    pub batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// Checks the P x K and modality-balance invariants of every batch.
    pub fn validate(&self, manifest: &Manifest) -> Result<()> {
        let half = self.k / 2;
        for (b, batch) in self.batches.iter().enumerate() {
            if batch.len() != self.p * self.k {
                return Err(Error::Validation(format!(
                    "batch {b} has {} samples, expected {}",
                    batch.len(),
                    self.p * self.k
                )));
            }
            let mut seen = HashSet::new();
            for group in batch.chunks(self.k) {
                let id = manifest.records[group[0]].identity;
                if !seen.insert(id) {
                    return Err(Error::Validation(format!("batch {b}: identity {id} repeated")));
                }
                for (j, &i) in group.iter().enumerate() {
                    let rec = &manifest.records[i];
                    let want = if j < half { Modality::Optical } else { Modality::Sar };
                    if rec.identity != id || rec.modality != want || rec.split != Split::Train {
                        return Err(Error::Validation(format!(
                            "batch {b}: record {i} breaks the identity/modality layout"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

struct IdentityPool {
    identity: usize,
    optical: Vec<usize>,
    sar: Vec<usize>,
}

impl IdentityPool {
    /// Splits both modalities into `half`-sized chunks: a shuffled pass
    /// without replacement, topped up with random repeats.
    fn chunks(&self, half: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let n = self.optical.len().max(self.sar.len()).div_ceil(half);
        let mut draw = |pool: &[usize]| {
            let mut v = pool.to_vec();
            v.shuffle(rng);
            while v.len() < n * half {
                v.push(*pool.choose(rng).expect("non-empty pool"));
            }
            v
        };
        let opt = draw(&self.optical);
        let sar = draw(&self.sar);
        (0..n)
            .map(|c| {
                let mut chunk = opt[c * half..(c + 1) * half].to_vec();
                chunk.extend_from_slice(&sar[c * half..(c + 1) * half]);
                chunk
            })
            .collect()
    }
}

/// Builds one epoch of strict cross-modal P x K batches from the train split.
pub fn plan_batches(manifest: &Manifest, p: usize, k: usize, rng: &mut impl Rng) -> Result<BatchPlan> {
    if p == 0 || k == 0 || !k.is_multiple_of(2) {
        return Err(Error::Config(format!("need P >= 1 and even K >= 2, got P={p} K={k}")));
    }
    let half = k / 2;
    let mut by_id: BTreeMap<usize, IdentityPool> = BTreeMap::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        if rec.split != Split::Train {
            continue;
        }
        let pool = by_id.entry(rec.identity).or_insert_with(|| IdentityPool {
            identity: rec.identity,
            optical: Vec::new(),
            sar: Vec::new(),
        });
        match rec.modality {
            Modality::Optical => pool.optical.push(i),
            Modality::Sar => pool.sar.push(i),
        }
    }
    let (pools, excluded): (Vec<_>, Vec<_>) = by_id
        .into_values()
        .partition(|p| p.optical.len() >= half && p.sar.len() >= half);
    if !excluded.is_empty() {
        let ids: Vec<usize> = excluded.iter().map(|p| p.identity).collect();
        warn!("{} identities lack {half} images per modality and are skipped: {ids:?}", ids.len());
    }
    if pools.is_empty() {
        return Err(Error::Config(format!(
            "no training identity has {half} optical and {half} SAR images"
        )));
    }
    if pools.len() < p {
        return Err(Error::Config(format!(
            "only {} qualifying identities for P={p}",
            pools.len()
        )));
    }

    let mut remaining: Vec<Vec<Vec<usize>>> = pools.iter().map(|pool| pool.chunks(half, rng)).collect();
    let mut seen = vec![false; pools.len()];
    let mut batches = Vec::new();
    loop {
        let live: Vec<usize> = (0..pools.len()).filter(|&i| !remaining[i].is_empty()).collect();
        if live.len() < p {
            break;
        }
        let mut batch = Vec::with_capacity(p * k);
        for &i in live.choose_multiple(rng, p) {
            batch.extend(remaining[i].pop().expect("live pool"));
            seen[i] = true;
        }
        batches.push(batch);
    }
    // Top up so that every qualifying identity shows up at least once.
    let mut unseen: Vec<usize> = (0..pools.len()).filter(|&i| !seen[i]).collect();
    unseen.shuffle(rng);
    while !unseen.is_empty() {
        let take = unseen.len().min(p);
        let mut chosen: Vec<usize> = unseen.drain(..take).collect();
        let others: Vec<usize> = (0..pools.len()).filter(|i| !chosen.contains(i)).collect();
        chosen.extend(others.choose_multiple(rng, p - take));
        let mut batch = Vec::with_capacity(p * k);
        for &i in &chosen {
            let chunk = match remaining[i].pop() {
                Some(c) => c,
                None => pools[i].chunks(half, rng).swap_remove(0),
            };
            batch.extend(chunk);
        }
        batches.push(batch);
    }
    let plan = BatchPlan { p, k, batches };
    plan.validate(manifest)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{Role, SampleRecord};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn manifest(counts: &[(usize, usize)]) -> Manifest {
        let mut records = Vec::new();
        for (id, &(no, ns)) in counts.iter().enumerate() {
            for (m, n) in [(Modality::Optical, no), (Modality::Sar, ns)] {
                for j in 0..n {
                    records.push(SampleRecord {
                        image_ref: format!("{id}_{m}_{j}"),
                        identity: id,
                        modality: m,
                        split: Split::Train,
                        role: Role::None,
                    });
                }
            }
        }
        Manifest::new(records)
    }

    #[test]
    fn batch_of_32_is_balanced() {
        let m = manifest(&[(8, 8); 10]);
        let plan = plan_batches(&m, 8, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(plan.batches.iter().all(|b| b.len() == 32));
        for b in &plan.batches {
            let opt = b.iter().filter(|&&i| m.records[i].modality == Modality::Optical).count();
            assert_eq!(opt, 16);
        }
    }

    #[test]
    fn minimal_case() {
        let m = manifest(&[(1, 1)]);
        let plan = plan_batches(&m, 1, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(plan.batches, vec![vec![0, 1]]);
    }

    #[test]
    fn every_identity_appears() {
        let m = manifest(&[(2, 2), (9, 3), (4, 4), (2, 7), (5, 5), (2, 2), (3, 3)]);
        for seed in 0..20 {
            let plan = plan_batches(&m, 3, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let ids: HashSet<usize> = plan.batches.iter().flatten().map(|&i| m.records[i].identity).collect();
            assert_eq!(ids.len(), 7);
        }
    }

    #[test]
    fn unqualified_identities_are_skipped() {
        let m = manifest(&[(4, 1), (2, 2), (2, 2)]);
        let plan = plan_batches(&m, 2, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(plan.batches.iter().flatten().all(|&i| m.records[i].identity != 0));
        assert!(matches!(
            plan_batches(&manifest(&[(1, 0)]), 1, 2, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            plan_batches(&m, 1, 3, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config(_))
        ));
    }
}
