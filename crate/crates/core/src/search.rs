//! Subnet search: pick the `k` blocks to prune that maximize supernet
//! validation accuracy. A genetic algorithm handles realistic sizes and an
//! exhaustive search serves as the oracle on small instances.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use updp_tensor::{Element, ParamStore};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::supernet::{PruneMask, Supernet};
use crate::train::accuracy;

pub const BRUTE_FORCE_LIMIT: u128 = 10_000;
const EVAL_BATCH: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    #[serde(default)]
    pub k: usize,
    pub population: usize,
    pub generations: usize,
    /// Probability that a child receives one swap mutation.
    pub mutation_rate: f64,
    pub elite: usize,
    pub tournament: usize,
    pub eval_subset: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k: 1,
            population: 50,
            generations: 20,
            mutation_rate: 0.1,
            elite: 10,
            tournament: 3,
            eval_subset: 1000,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Search(format!("{msg} in {self:?}")));
        if self.population == 0 || self.generations == 0 {
            return bad("population and generations must be positive");
        }
        if self.elite >= self.population {
            return bad("elite count must be below the population size");
        }
        if self.tournament == 0 {
            return bad("tournament size must be positive");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("mutation rate must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub mask: PruneMask,
    pub fitness: f64,
}

/// Higher fitness wins; equal fitness goes to the lexicographically smaller mask.
fn better(a: &Individual, b: &Individual) -> bool {
    a.fitness > b.fitness || (a.fitness == b.fitness && a.mask < b.mask)
}

fn rank(pop: &mut [Individual]) {
    pop.sort_by(|a, b| b.fitness.total_cmp(&a.fitness).then_with(|| a.mask.cmp(&b.mask)));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_fitness: f64,
    pub best_mask: PruneMask,
    pub population: Vec<Individual>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: Individual,
    pub trace: Vec<GenerationRecord>,
    /// Distinct masks whose fitness was computed.
    pub evaluations: usize,
}

impl SearchOutcome {
    pub fn write_trace(&self, mut out: impl Write) -> Result<()> {
        for rec in &self.trace {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Top-1 eval-mode accuracy of the subnet selected by `mask`.
pub fn evaluate_fitness<T: Element>(net: &Supernet, params: &ParamStore<T>, mask: &PruneMask, data: &Dataset) -> Result<f64> {
    net.check_mask(mask)?;
    accuracy(data, EVAL_BATCH, |x| net.forward(params, x, mask))
}

/// The fixed subset of at most `n` samples used for every fitness evaluation of one search.
pub fn draw_eval_subset(data: &Dataset, n: usize, seed: u64) -> Dataset {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    data.select(&idx)
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((n - i) as u128) / (i as u128 + 1))
}

fn feasible_positions(feasible: &[bool]) -> Vec<usize> {
    (0..feasible.len()).filter(|&i| feasible[i]).collect()
}

fn check_budget(feasible: &[bool], k: usize) -> Result<Vec<usize>> {
    let pos = feasible_positions(feasible);
    if k > feasible.len() {
        return Err(Error::Search(format!("k = {k} exceeds the {} blocks", feasible.len())));
    }
    if k > pos.len() {
        return Err(Error::Search(format!("k = {k} exceeds the {} prunable blocks", pos.len())));
    }
    Ok(pos)
}

fn random_mask<R: Rng + ?Sized>(n: usize, pos: &[usize], k: usize, rng: &mut R) -> PruneMask {
    PruneMask::from_indices(n, &pos.choose_multiple(rng, k).copied().collect::<Vec<_>>())
}

/// Child that keeps the bits both parents agree on and draws the rest at
/// random, then flips disagreeing positions until the popcount matches.
pub fn crossover_repair<R: Rng + ?Sized>(a: &PruneMask, b: &PruneMask, rng: &mut R) -> Result<PruneMask> {
    if a.len() != b.len() || a.popcount() != b.popcount() {
        return Err(Error::Search(format!("parents {a} and {b} are not comparable")));
    }
    let k = a.popcount();
    let mut child = a.clone();
    let mut differ = Vec::new();
    for i in 0..a.len() {
        if a.get(i) != b.get(i) {
            child.set(i, rng.gen_bool(0.5));
            differ.push(i);
        }
    }
    while child.popcount() != k {
        let want = child.popcount() < k;
        let i = *differ
            .iter()
            .filter(|&&i| child.get(i) != want)
            .choose(rng)
            .expect("disagreeing positions hold enough of both bit values");
        child.set(i, want);
    }
    Ok(child)
}

/// Exchanges one pruned and one unpruned feasible position.
pub fn mutate_swap<R: Rng + ?Sized>(mask: &PruneMask, feasible: &[bool], rng: &mut R) -> PruneMask {
    let ones: Vec<usize> = mask.indices();
    let zeros: Vec<usize> = (0..mask.len()).filter(|&i| feasible[i] && !mask.get(i)).collect();
    let mut out = mask.clone();
    if let (Some(&on), Some(&off)) = (ones.choose(rng), zeros.choose(rng)) {
        out.set(on, false);
        out.set(off, true);
    }
    out
}

struct FitnessCache<'f, F> {
    fitness: &'f F,
    known: HashMap<PruneMask, f64>,
}

impl<F: Fn(&PruneMask) -> Result<f64> + Sync> FitnessCache<'_, F> {
    /// Scores `masks`, computing uncached ones in parallel and storing them in
    /// sorted order so results do not depend on scheduling.
    fn score(&mut self, masks: &[PruneMask]) -> Result<Vec<Individual>> {
        let mut fresh: Vec<PruneMask> = masks.iter().filter(|m| !self.known.contains_key(*m)).cloned().collect();
        fresh.sort();
        fresh.dedup();
        let values: Vec<Result<f64>> = fresh.par_iter().map(|m| (self.fitness)(m)).collect();
        for (m, v) in fresh.into_iter().zip(values) {
            let v = v?;
            if !v.is_finite() {
                return Err(Error::Search(format!("fitness of {m} is {v}")));
            }
            self.known.insert(m, v);
        }
        Ok(masks
            .iter()
            .map(|m| Individual {
                mask: m.clone(),
                fitness: self.known[m],
            })
            .collect())
    }

    fn best(&self) -> Individual {
        let mut best: Option<Individual> = None;
        for (mask, &fitness) in &self.known {
            let cand = Individual { mask: mask.clone(), fitness };
            if best.as_ref().map_or(true, |b| better(&cand, b)) {
                best = Some(cand);
            }
        }
        best.expect("at least one evaluation")
    }
}

fn tournament<'a, R: Rng + ?Sized>(pop: &'a [Individual], size: usize, rng: &mut R) -> &'a Individual {
    let mut best = &pop[rng.gen_range(0..pop.len())];
    for _ in 1..size {
        let c = &pop[rng.gen_range(0..pop.len())];
        if better(c, best) {
            best = c;
        }
    }
    best
}

/// Genetic search over masks with exactly `cfg.k` bits set, restricted to
/// `feasible` positions. Returns the best individual ever evaluated.
pub fn genetic_search<F>(feasible: &[bool], cfg: &SearchConfig, fitness: F) -> Result<SearchOutcome>
where
    F: Fn(&PruneMask) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let n = feasible.len();
    let pos = check_budget(feasible, cfg.k)?;
    let mut cache = FitnessCache {
        fitness: &fitness,
        known: HashMap::new(),
    };
    if binomial(pos.len(), cfg.k) == 1 {
        let only = PruneMask::from_indices(n, &pos[..cfg.k]);
        let best = cache.score(&[only])?.remove(0);
        return Ok(SearchOutcome {
            trace: vec![GenerationRecord {
                generation: 0,
                best_fitness: best.fitness,
                best_mask: best.mask.clone(),
                population: vec![best.clone()],
            }],
            best,
            evaluations: 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut masks: Vec<PruneMask> = (0..cfg.population).map(|_| random_mask(n, &pos, cfg.k, &mut rng)).collect();
    let mut trace = Vec::with_capacity(cfg.generations);
    for generation in 0..cfg.generations {
        let mut pop = cache.score(&masks)?;
        rank(&mut pop);
        let best = cache.best();
        trace.push(GenerationRecord {
            generation,
            best_fitness: best.fitness,
            best_mask: best.mask,
            population: pop.clone(),
        });
        if generation + 1 == cfg.generations {
            break;
        }
        masks = pop[..cfg.elite].iter().map(|i| i.mask.clone()).collect();
        while masks.len() < cfg.population {
            let a = tournament(&pop, cfg.tournament, &mut rng);
            let b = tournament(&pop, cfg.tournament, &mut rng);
            let mut child = crossover_repair(&a.mask, &b.mask, &mut rng)?;
            if rng.gen_bool(cfg.mutation_rate) {
                child = mutate_swap(&child, feasible, &mut rng);
            }
            masks.push(child);
        }
    }
    Ok(SearchOutcome {
        best: cache.best(),
        trace,
        evaluations: cache.known.len(),
    })
}

/// Exact argmax over every feasible mask with `k` bits set.
pub fn brute_force_search<F>(feasible: &[bool], k: usize, fitness: F) -> Result<SearchOutcome>
where
    F: Fn(&PruneMask) -> Result<f64> + Sync,
{
    let n = feasible.len();
    let pos = check_budget(feasible, k)?;
    let count = binomial(pos.len(), k);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::Search(format!("{count} candidate masks exceed the exhaustive limit {BRUTE_FORCE_LIMIT}")));
    }
    let mut all = Vec::with_capacity(count as usize);
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        all.push(PruneMask::from_indices(n, &idx.iter().map(|&i| pos[i]).collect::<Vec<_>>()));
        // Advance to the next k-combination of 0..pos.len().
        let Some(i) = (0..k).rev().find(|&i| idx[i] < pos.len() - k + i) else {
            break;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    let mut cache = FitnessCache {
        fitness: &fitness,
        known: HashMap::new(),
    };
    let mut pop = cache.score(&all)?;
    rank(&mut pop);
    Ok(SearchOutcome {
        best: cache.best(),
        trace: vec![GenerationRecord {
            generation: 0,
            best_fitness: pop[0].fitness,
            best_mask: pop[0].mask.clone(),
            population: pop,
        }],
        evaluations: all.len(),
    })
}

/// Genetic search scored by supernet accuracy on a fixed subset of `data`.
pub fn search_supernet<T: Element>(net: &Supernet, params: &ParamStore<T>, data: &Dataset, cfg: &SearchConfig) -> Result<SearchOutcome> {
    let subset = draw_eval_subset(data, cfg.eval_subset, cfg.seed);
    if subset.is_empty() {
        return Err(Error::Search("evaluation set is empty".into()));
    }
    genetic_search(&net.prunable(), cfg, |m| evaluate_fitness(net, params, m, &subset))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_fitness(m: &PruneMask) -> Result<f64> {
        // Deterministic, many ties: depends on a weighted index sum modulo 7.
        let s: usize = m.indices().iter().map(|i| (i * i + 3 * i) % 7).sum();
        Ok((s % 5) as f64 / 4.0)
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(6, 2), 15);
        assert_eq!(binomial(8, 3), 56);
        assert_eq!(binomial(4, 0), 1);
        assert_eq!(binomial(3, 5), 0);
    }

    #[test]
    fn brute_force_enumerates_every_combination() {
        let out = brute_force_search(&[true; 6], 2, table_fitness).unwrap();
        assert_eq!(out.evaluations, 15);
        let pop = &out.trace[0].population;
        let mut masks: Vec<_> = pop.iter().map(|i| i.mask.clone()).collect();
        masks.dedup();
        assert_eq!(masks.len(), 15);
        assert!(pop.iter().all(|i| i.mask.popcount() == 2));
        let max = pop.iter().map(|i| i.fitness).fold(f64::MIN, f64::max);
        assert_eq!(out.best.fitness, max);
        let smallest = pop.iter().filter(|i| i.fitness == max).map(|i| &i.mask).min().unwrap();
        assert_eq!(&out.best.mask, smallest);
    }

    #[test]
    fn brute_force_respects_infeasible_blocks_and_limit() {
        let feasible = [true, false, true, true];
        let out = brute_force_search(&feasible, 2, table_fitness).unwrap();
        assert_eq!(out.evaluations, 3);
        assert!(out.trace[0].population.iter().all(|i| !i.mask.get(1)));
        assert!(brute_force_search(&[true; 40], 20, table_fitness).is_err());
    }

    #[test]
    fn degenerate_budgets_return_immediately() {
        let cfg = SearchConfig { k: 0, ..SearchConfig::default() };
        let out = genetic_search(&[true; 5], &cfg, table_fitness).unwrap();
        assert_eq!(out.best.mask, PruneMask::zeros(5));
        assert_eq!(out.evaluations, 1);
        let cfg = SearchConfig { k: 5, ..cfg };
        assert_eq!(genetic_search(&[true; 5], &cfg, table_fitness).unwrap().best.mask, PruneMask::ones(5));
        let cfg = SearchConfig { k: 6, ..cfg };
        assert!(genetic_search(&[true; 5], &cfg, table_fitness).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = SearchConfig { elite: 50, ..SearchConfig::default() };
        assert!(bad.validate().is_err());
        assert!(SearchConfig::default().validate().is_ok());
    }

    #[test]
    fn evaluation_order_does_not_change_results() {
        let cfg = SearchConfig { k: 3, population: 12, generations: 5, elite: 3, seed: 4, ..SearchConfig::default() };
        let a = genetic_search(&[true; 9], &cfg, table_fitness).unwrap();
        let b = genetic_search(&[true; 9], &cfg, table_fitness).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_trace(&mut buf).unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&buf).unwrap().lines().collect();
        assert_eq!(lines.len(), 5);
        let rec: GenerationRecord = serde_json::from_str(lines[4]).unwrap();
        assert_eq!(rec.generation, 4);
    }
}
