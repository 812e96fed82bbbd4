//! Mutation-only evolutionary search over architecture and learning rate.
//!
//! Each generation evaluates genomes without a cached fitness, keeps the
//! top `ceil(25%)` unchanged, and fills the remaining slots with mutated
//! winners of size-2 tournaments. Fitness ties break toward the lower index.

use std::collections::BTreeMap;
use std::fmt;

use log::{info, warn};
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{ArchConfig, BranchLayer, Model, Variant};
use crate::rng::{rng_for, Rng as StdRng};
use crate::train::{evaluate, train, TrainConfig};

pub const EMBED_DIMS: [usize; 3] = [32, 64, 128];
pub const LR_FACTORS: [f64; 2] = [2.0, 3.16];
/// Learning rates are kept inside this range.
pub const LR_RANGE: (f64, f64) = (1e-5, 1.0);
/// Widest channel count a grown branch layer may reach.
pub const MAX_BRANCH_CHANNELS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Genome {
    pub arch: ArchConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub fitness: Option<f64>,
    pub lineage: u64,
}

impl Genome {
    pub fn new(arch: ArchConfig, learning_rate: f64, epochs: usize) -> Self {
        Self {
            arch,
            learning_rate,
            epochs,
            fitness: None,
            lineage: 0,
        }
    }

    /// Canonical single-line form: sorted `key=value` pairs joined by `;`.
    pub fn to_line(&self) -> String {
        let mut kv: BTreeMap<String, String> = self
            .arch
            .to_line()
            .split(';')
            .filter_map(|e| e.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        kv.insert("epochs".into(), self.epochs.to_string());
        kv.insert("learning_rate".into(), format!("{:?}", self.learning_rate));
        kv.into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut arch = Vec::new();
        let (mut lr, mut epochs) = (None, None);
        for entry in line.split(';').map(str::trim).filter(|e| !e.is_empty()) {
            match entry.split_once('=') {
                Some(("learning_rate", v)) => {
                    lr = Some(
                        v.parse()
                            .map_err(|_| Error::config(format!("bad learning_rate `{v}`")))?,
                    )
                }
                Some(("epochs", v)) => {
                    epochs = Some(
                        v.parse()
                            .map_err(|_| Error::config(format!("bad epochs `{v}`")))?,
                    )
                }
                _ => arch.push(entry),
            }
        }
        Ok(Self::new(
            ArchConfig::parse(&arch.join(";"))?,
            lr.ok_or_else(|| Error::config("genome missing learning_rate"))?,
            epochs.ok_or_else(|| Error::config("genome missing epochs"))?,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.epochs == 0 {
            return Err(Error::config(
                "genome needs a positive learning rate and epoch budget",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gene {
    Truncation,
    LearningRate,
    BranchDepth,
    EmbedDim,
}

/// Genes that have an effect on `variant`.
pub fn genes_for(variant: Variant) -> &'static [Gene] {
    match variant {
        Variant::TruncatedResnet => &[Gene::Truncation, Gene::LearningRate],
        Variant::GramAttention => &[Gene::Truncation, Gene::LearningRate, Gene::EmbedDim],
        Variant::MultiPatch => &[Gene::LearningRate, Gene::BranchDepth],
    }
}

fn try_mutate(g: &Genome, gene: Gene, rng: &mut StdRng) -> Option<Genome> {
    let mut child = g.clone();
    child.fitness = None;
    match gene {
        Gene::Truncation => {
            let delta = [-2i64, -1, 1, 2][rng.random_range(0..4)];
            let t = g.arch.truncation as i64 + delta;
            if t < 1 || t > g.arch.max_truncation() as i64 {
                return None;
            }
            child.arch.truncation = t as usize;
        }
        Gene::LearningRate => {
            let f = LR_FACTORS[rng.random_range(0..LR_FACTORS.len())];
            let lr = if rng.random_bool(0.5) {
                g.learning_rate * f
            } else {
                g.learning_rate / f
            };
            if !(LR_RANGE.0..=LR_RANGE.1).contains(&lr) {
                return None;
            }
            child.learning_rate = lr;
        }
        Gene::BranchDepth => {
            let b = rng.random_range(0..child.arch.branches.len());
            let branch = &mut child.arch.branches[b];
            if rng.random_bool(0.5) {
                let last = *branch.last()?;
                branch.push(BranchLayer::new(
                    last.kernel,
                    last.stride,
                    (last.channels * 2).min(MAX_BRANCH_CHANNELS),
                ));
            } else {
                if branch.len() <= 1 {
                    return None;
                }
                branch.pop();
            }
        }
        Gene::EmbedDim => {
            let choices: Vec<usize> = EMBED_DIMS
                .iter()
                .copied()
                .filter(|&d| d != g.arch.embed_dim)
                .collect();
            child.arch.embed_dim = choices[rng.random_range(0..choices.len())];
        }
    }
    child.validate().ok()?;
    Some(child)
}

/// Change exactly one applicable gene. Draws that would leave the legal
/// range or break an architecture invariant are resampled; `None` only if
/// no legal mutation was found.
pub fn mutate(g: &Genome, rng: &mut StdRng) -> Option<Genome> {
    let genes = genes_for(g.arch.variant);
    for _ in 0..64 {
        let gene = genes[rng.random_range(0..genes.len())];
        if let Some(c) = try_mutate(g, gene, rng) {
            return Some(c);
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub seed: u64,
    pub elite_fraction: f64,
    pub tournament: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 8,
            generations: 5,
            seed: 0,
            elite_fraction: 0.25,
            tournament: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best: Genome,
}

impl fmt::Display for GenerationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "generation={} best_fitness={:?} mean_fitness={:?} best_genome={}",
            self.generation,
            self.best_fitness,
            self.mean_fitness,
            self.best.to_line()
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub best: Genome,
    pub history: Vec<GenerationRecord>,
}

/// `base` followed by `size - 1` single-mutation variants of it.
pub fn initial_population(base: &Genome, size: usize, seed: u64) -> Vec<Genome> {
    let mut rng = rng_for(seed, "search:init");
    let mut pop = vec![base.clone()];
    while pop.len() < size {
        let mut g = mutate(base, &mut rng).unwrap_or_else(|| base.clone());
        g.lineage = pop.len() as u64;
        pop.push(g);
    }
    pop
}

fn best_index(pop: &[Genome]) -> usize {
    let mut best = 0;
    for (i, g) in pop.iter().enumerate() {
        if g.fitness > pop[best].fitness {
            best = i;
        }
    }
    best
}

/// Run the search from an explicit initial population with a caller-supplied
/// fitness function. A failing evaluation scores 0.
pub fn evolve_with(
    cfg: &SearchConfig,
    mut pop: Vec<Genome>,
    mut fitness: impl FnMut(&Genome) -> Result<f64>,
) -> Result<SearchResult> {
    if cfg.population < 2 || pop.len() != cfg.population {
        return Err(Error::config(format!(
            "population must be >= 2 and match the initial genomes ({} vs {})",
            cfg.population,
            pop.len()
        )));
    }
    if cfg.generations < 1 || cfg.tournament < 1 {
        return Err(Error::config(
            "generations and tournament size must be >= 1",
        ));
    }
    for g in &pop {
        g.validate()?;
    }
    let mut rng = rng_for(cfg.seed, "search:select");
    let mut next_lineage = pop.iter().map(|g| g.lineage).max().unwrap_or(0) + 1;
    let mut history = Vec::with_capacity(cfg.generations);
    for generation in 0..cfg.generations {
        for g in pop.iter_mut().filter(|g| g.fitness.is_none()) {
            let f = match fitness(g) {
                Ok(f) if f.is_finite() => f,
                Ok(f) => {
                    warn!("genome {} returned fitness {f}; scored 0", g.lineage);
                    0.0
                }
                Err(e) => {
                    warn!("genome {} failed to evaluate: {e}; scored 0", g.lineage);
                    0.0
                }
            };
            g.fitness = Some(f);
        }
        let scores: Vec<f64> = pop.iter().map(|g| g.fitness.expect("evaluated")).collect();
        let best = best_index(&pop);
        let record = GenerationRecord {
            generation,
            best_fitness: scores[best],
            mean_fitness: scores.iter().sum::<f64>() / scores.len() as f64,
            best: pop[best].clone(),
        };
        info!("{record}");
        history.push(record);
        if generation + 1 == cfg.generations {
            break;
        }

        let mut ranked: Vec<usize> = (0..pop.len()).collect();
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let n_elite =
            ((cfg.population as f64 * cfg.elite_fraction).ceil() as usize).clamp(1, cfg.population);
        let mut next: Vec<Genome> = ranked[..n_elite].iter().map(|&i| pop[i].clone()).collect();
        while next.len() < cfg.population {
            let mut winner = rng.random_range(0..pop.len());
            for _ in 1..cfg.tournament {
                let c = rng.random_range(0..pop.len());
                if scores[c] > scores[winner] || (scores[c] == scores[winner] && c < winner) {
                    winner = c;
                }
            }
            let mut child = mutate(&pop[winner], &mut rng).unwrap_or_else(|| {
                let mut same = pop[winner].clone();
                same.fitness = None;
                same
            });
            child.lineage = next_lineage;
            next_lineage += 1;
            next.push(child);
        }
        pop = next;
    }
    let best = history
        .iter()
        .fold(&history[0], |acc, r| {
            if r.best_fitness > acc.best_fitness {
                r
            } else {
                acc
            }
        })
        .best
        .clone();
    Ok(SearchResult { best, history })
}

/// Fitness = validation macro-F1 after training for the genome's epoch budget.
pub fn train_fitness(
    genome: &Genome,
    train_set: &Dataset,
    val_set: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    let mut model = Model::<f32>::build(&genome.arch)?;
    let tc = TrainConfig {
        epochs: genome.epochs,
        batch_size,
        learning_rate: genome.learning_rate,
        seed: genome.arch.seed,
        ..TrainConfig::default()
    };
    train(&mut model, train_set, None, &tc)?;
    Ok(evaluate(&model, val_set)?.macro_f1)
}

/// Full search: the base genome seeds the population, each genome is
/// trained on `train_set` and scored on `val_set`.
pub fn evolve(
    cfg: &SearchConfig,
    base: &Genome,
    train_set: &Dataset,
    val_set: &Dataset,
    batch_size: usize,
) -> Result<SearchResult> {
    if base.epochs == 0 {
        return Err(Error::config("epoch budget must allow at least one epoch"));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config(
            "search needs non-empty train and validation sets",
        ));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    let pop = initial_population(base, cfg.population, cfg.seed);
    evolve_with(cfg, pop, |g| {
        train_fitness(g, train_set, val_set, batch_size)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(v: Variant) -> Genome {
        Genome::new(ArchConfig::new(v), 3e-3, 2)
    }

    #[test]
    fn genome_line_roundtrips() {
        let g = base(Variant::GramAttention);
        assert_eq!(Genome::parse(&g.to_line()).unwrap(), g);
        assert!(g.to_line().starts_with("branch_configs="));
    }

    #[test]
    fn mutation_changes_exactly_one_gene() {
        let mut rng = rng_for(1, "t");
        for v in Variant::ALL {
            let g = base(v);
            for _ in 0..200 {
                let c = mutate(&g, &mut rng).unwrap();
                let changed = [
                    c.arch.truncation != g.arch.truncation,
                    c.learning_rate != g.learning_rate,
                    c.arch.branches != g.arch.branches,
                    c.arch.embed_dim != g.arch.embed_dim,
                ];
                assert_eq!(changed.iter().filter(|&&x| x).count(), 1, "{v}");
            }
        }
    }

    #[test]
    fn identical_population_one_generation() {
        let g = base(Variant::TruncatedResnet);
        let cfg = SearchConfig {
            population: 4,
            generations: 1,
            ..Default::default()
        };
        let r = evolve_with(&cfg, vec![g; 4], |_| Ok(0.625)).unwrap();
        assert_eq!(r.best.fitness, Some(0.625));
        assert_eq!(r.history.len(), 1);
    }

    #[test]
    fn failed_evaluation_scores_zero() {
        let g = base(Variant::TruncatedResnet);
        let cfg = SearchConfig {
            population: 2,
            generations: 1,
            ..Default::default()
        };
        let r = evolve_with(&cfg, vec![g.clone(), g], |_| Err(Error::config("boom"))).unwrap();
        assert_eq!(r.history[0].best_fitness, 0.0);
    }
}
