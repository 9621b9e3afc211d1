use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One environment step as stored for off-policy learning.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub c: f64,
    pub s_next: Vec<f64>,
    /// True terminal: the bootstrap term is dropped.
    pub terminal: bool,
}

/// A minibatch laid out row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Array1<f64>,
    pub c: Array1<f64>,
    pub s_next: Array2<f64>,
    /// `1.0` for non-terminal transitions, `0.0` for terminal ones.
    pub not_done: Array1<f64>,
}

impl Batch {
    pub fn from_transitions(items: &[&Transition]) -> Self {
        let b = items.len();
        let n = items.first().map_or(0, |t| t.s.len());
        let m = items.first().map_or(0, |t| t.a.len());
        let rows = |f: &dyn Fn(&Transition) -> &Vec<f64>, w: usize| {
            Array2::from_shape_fn((b, w), |(i, j)| f(items[i])[j])
        };
        Self {
            s: rows(&|t| &t.s, n),
            a: rows(&|t| &t.a, m),
            r: items.iter().map(|t| t.r).collect(),
            c: items.iter().map(|t| t.c).collect(),
            s_next: rows(&|t| &t.s_next, n),
            not_done: items.iter().map(|t| if t.terminal { 0.0 } else { 1.0 }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Fixed-capacity ring buffer with its own seeded sampler.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends, overwriting the oldest item once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices(&mut self, batch: usize) -> Vec<usize> {
        let n = self.items.len();
        if n == 0 {
            return Vec::new();
        }
        (0..batch).map(|_| self.rng.gen_range(0..n)).collect()
    }

    pub fn sample(&mut self, batch: usize) -> Option<Batch> {
        let idx = self.sample_indices(batch);
        if idx.is_empty() {
            return None;
        }
        let items: Vec<&Transition> = idx.iter().map(|&i| &self.items[i]).collect();
        Some(Batch::from_transitions(&items))
    }
}
