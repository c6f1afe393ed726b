//! Truth-correlated four-token sequences `x y x' y'`.
//!
//! Tokens are vocabulary ids: subjects occupy `0..n_subjects` and attributes
//! occupy `n_subjects..n_subjects + n_attributes`. A latent truth bit is drawn
//! once per example; true examples use the ground-truth attribute for both
//! subjects, false examples draw both attributes uniformly from all attributes
//! (which may coincide with the ground truth by chance).

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_probability, Error, Result};
use crate::rng::{self, Rng, Stream};

/// Vocabulary sizes and the ground-truth map `g`.
///
/// `g[s]` is the attribute index (not token id) of subject `s`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_subjects: usize,
    pub n_attributes: usize,
    pub g: Vec<usize>,
    pub seed: u64,
}

impl WorldSpec {
    pub fn new(n_subjects: usize, n_attributes: usize, g: Vec<usize>, seed: u64) -> Result<Self> {
        let world = WorldSpec {
            n_subjects,
            n_attributes,
            g,
            seed,
        };
        world.validate()?;
        Ok(world)
    }

    /// Toy-mode world: `n` subjects, `n` attributes and a random bijection.
    pub fn toy(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n", "need at least one subject"));
        }
        let mut g: Vec<usize> = (0..n).collect();
        g.shuffle(&mut rng::stream(seed, Stream::World));
        Self::new(n, n, g, seed)
    }

    /// Random world: a bijection when the vocabularies match, otherwise an
    /// i.i.d. uniform attribute per subject.
    pub fn random(n_subjects: usize, n_attributes: usize, seed: u64) -> Result<Self> {
        if n_subjects == n_attributes {
            return Self::toy(n_subjects, seed);
        }
        if n_attributes == 0 {
            return Err(Error::invalid("n_attributes", "need at least one attribute"));
        }
        let mut rng = rng::stream(seed, Stream::World);
        let g = (0..n_subjects).map(|_| rng.random_range(0..n_attributes)).collect();
        Self::new(n_subjects, n_attributes, g, seed)
    }

    /// World with `g(s) = s`; handy for hand-checked fixtures.
    pub fn identity(n: usize) -> Result<Self> {
        Self::new(n, n, (0..n).collect(), 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_attributes == 0 {
            return Err(Error::invalid("world", "vocabulary sizes must be positive"));
        }
        if self.g.len() != self.n_subjects {
            return Err(Error::invalid(
                "g",
                format!("has {} entries for {} subjects", self.g.len(), self.n_subjects),
            ));
        }
        if let Some(bad) = self.g.iter().find(|&&a| a >= self.n_attributes) {
            return Err(Error::invalid("g", format!("attribute index {bad} out of range")));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.n_subjects + self.n_attributes
    }

    pub fn attribute_token(&self, attribute: usize) -> usize {
        self.n_subjects + attribute
    }

    pub fn is_subject(&self, token: usize) -> bool {
        token < self.n_subjects
    }

    pub fn is_attribute(&self, token: usize) -> bool {
        (self.n_subjects..self.vocab_size()).contains(&token)
    }

    /// Token id of `g(x)` for a subject token `x`.
    pub fn truth_token(&self, subject: usize) -> usize {
        self.attribute_token(self.g[subject])
    }

    pub fn is_bijective(&self) -> bool {
        if self.n_subjects != self.n_attributes {
            return false;
        }
        let mut seen = vec![false; self.n_attributes];
        self.g.iter().all(|&a| !std::mem::replace(&mut seen[a], true))
    }

    /// `g⁻¹` as attribute index -> subject token. Toy mode only.
    pub fn inverse(&self) -> Result<Vec<usize>> {
        if !self.is_bijective() {
            return Err(Error::NonBijective(format!(
                "{} subjects, {} attributes",
                self.n_subjects, self.n_attributes
            )));
        }
        let mut inv = vec![0; self.n_attributes];
        for (s, &a) in self.g.iter().enumerate() {
            inv[a] = s;
        }
        Ok(inv)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let world: WorldSpec = serde_json::from_str(text)?;
        world.validate()?;
        Ok(world)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub x: usize,
    pub y: usize,
    pub x_prime: usize,
    pub y_prime: usize,
    pub truth: bool,
}

impl Example {
    pub fn tokens(&self) -> [usize; 4] {
        [self.x, self.y, self.x_prime, self.y_prime]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub examples: Vec<Example>,
    pub rho: f64,
    pub seed: u64,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn sequences(&self) -> Vec<[usize; 4]> {
        self.examples.iter().map(Example::tokens).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.examples.iter().map(|e| e.truth).collect()
    }

    pub fn truth_rate(&self) -> f64 {
        let hits = self.examples.iter().filter(|e| e.truth).count();
        hits as f64 / self.examples.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,y,x_prime,y_prime,truth")?;
        for e in &self.examples {
            writeln!(out, "{},{},{},{},{}", e.x, e.y, e.x_prime, e.y_prime, u8::from(e.truth))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, rho: f64, seed: u64) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "x,y,x_prime,y_prime,truth" {
            return Err(Error::Format("missing batch CSV header".into()));
        }
        let mut examples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<usize> = line
                .split(',')
                .map(|f| f.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("row {}: {e}", i + 2)))?;
            let [x, y, x_prime, y_prime, truth] = fields[..] else {
                return Err(Error::Format(format!("row {}: expected 5 fields", i + 2)));
            };
            examples.push(Example {
                x,
                y,
                x_prime,
                y_prime,
                truth: truth == 1,
            });
        }
        Ok(Batch { examples, rho, seed })
    }
}

/// Draws one example with an explicit truth bit.
pub fn sample_with_truth(world: &WorldSpec, truth: bool, rng: &mut Rng) -> Example {
    let x = rng.random_range(0..world.n_subjects);
    let x_prime = rng.random_range(0..world.n_subjects);
    let (y, y_prime) = if truth {
        (world.truth_token(x), world.truth_token(x_prime))
    } else {
        (
            world.attribute_token(rng.random_range(0..world.n_attributes)),
            world.attribute_token(rng.random_range(0..world.n_attributes)),
        )
    };
    Example {
        x,
        y,
        x_prime,
        y_prime,
        truth,
    }
}

pub fn sample_example(world: &WorldSpec, rho: f64, rng: &mut Rng) -> Result<Example> {
    check_probability("rho", rho)?;
    let truth = rng.random_bool(rho);
    Ok(sample_with_truth(world, truth, rng))
}

pub fn sample_batch(world: &WorldSpec, rho: f64, size: usize, rng: &mut Rng) -> Result<Vec<Example>> {
    check_probability("rho", rho)?;
    Ok((0..size)
        .map(|_| {
            let truth = rng.random_bool(rho);
            sample_with_truth(world, truth, rng)
        })
        .collect())
}

/// Balanced probe set: exactly half true, half false, in shuffled order.
pub fn make_balanced_probe_set(world: &WorldSpec, size: usize, seed: u64) -> Result<Batch> {
    if !size.is_multiple_of(2) {
        return Err(Error::invalid("size", format!("{size} is odd; a balanced set needs an even size")));
    }
    let mut rng = rng::stream(seed, Stream::Probe);
    let mut examples: Vec<Example> = (0..size)
        .map(|i| sample_with_truth(world, i < size / 2, &mut rng))
        .collect();
    examples.shuffle(&mut rng);
    Ok(Batch {
        examples,
        rho: 0.5,
        seed,
    })
}

/// Conditional distribution of `y'` given `(x, y, x')` for a model that does
/// not infer the truth bit, indexed by attribute index.
pub fn oracle_conditional(world: &WorldSpec, rho: f64, x_prime: usize) -> Result<Vec<f64>> {
    check_probability("rho", rho)?;
    if !world.is_subject(x_prime) {
        return Err(Error::invalid("x_prime", format!("token {x_prime} is not a subject")));
    }
    let a = world.n_attributes as f64;
    let background = (1.0 - rho) / a;
    let mut dist = vec![background; world.n_attributes];
    dist[world.g[x_prime]] = rho + background;
    Ok(dist)
}
