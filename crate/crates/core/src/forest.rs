//! Bagged regression trees: the in-repo nonparametric conditional-mean
//! learner. Defaults: 100 trees, mtry = ceil(d/3), minimum leaf size 5,
//! full-depth growth on bootstrap resamples. Deterministic given the seed.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::seed::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Candidate features per split; defaults to ceil(d/3).
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 100, mtry: None, min_leaf: 5, seed: 0 }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: u32, right: u32 },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_row(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    idx = if x[(row, *feature)] <= *threshold { *left as usize } else { *right as usize };
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaggedForest {
    trees: Vec<Tree>,
    pub n_features: usize,
}

impl BaggedForest {
    /// Fit on the given rows of `x` (n x d, no intercept column) and targets.
    pub fn fit(x: &DMatrix<f64>, y: &[f64], rows: &[usize], params: &ForestParams) -> Self {
        let d = x.ncols();
        let mtry = params.mtry.unwrap_or_else(|| d.div_ceil(3)).clamp(1, d.max(1));
        let mut trees = Vec::with_capacity(params.n_trees);
        for t in 0..params.n_trees {
            let mut rng = stream_rng(params.seed, t as u64);
            let sample: Vec<usize> =
                (0..rows.len()).map(|_| rows[rng.random_range(0..rows.len())]).collect();
            let mut builder = TreeBuilder { x, y, mtry, min_leaf: params.min_leaf, rng: &mut rng, nodes: Vec::new() };
            builder.grow(sample);
            trees.push(Tree { nodes: builder.nodes });
        }
        BaggedForest { trees, n_features: d }
    }

    pub fn predict_row(&self, x: &DMatrix<f64>, row: usize) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_row(x, row)).sum();
        sum / self.trees.len() as f64
    }
}

struct TreeBuilder<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    mtry: usize,
    min_leaf: usize,
    rng: &'a mut ChaCha12Rng,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, rows: Vec<usize>) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { value: 0.0 });
        let mean = rows.iter().map(|&i| self.y[i]).sum::<f64>() / rows.len() as f64;
        if rows.len() < 2 * self.min_leaf {
            self.nodes[id as usize] = Node::Leaf { value: mean };
            return id;
        }
        match self.best_split(&rows) {
            None => {
                self.nodes[id as usize] = Node::Leaf { value: mean };
                id
            }
            Some((feature, threshold)) => {
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
                    rows.into_iter().partition(|&i| self.x[(i, feature)] <= threshold);
                let left = self.grow(left_rows);
                let right = self.grow(right_rows);
                self.nodes[id as usize] = Node::Split { feature, threshold, left, right };
                id
            }
        }
    }

    /// Best SSE-reducing split over a random subset of mtry features.
    fn best_split(&mut self, rows: &[usize]) -> Option<(usize, f64)> {
        let d = self.x.ncols();
        if d == 0 {
            return None;
        }
        // partial Fisher-Yates for the candidate features
        let mut features: Vec<usize> = (0..d).collect();
        for j in 0..self.mtry.min(d) {
            let pick = self.rng.random_range(j..d);
            features.swap(j, pick);
        }
        let total_sum: f64 = rows.iter().map(|&i| self.y[i]).sum();
        let n = rows.len() as f64;
        let mut best: Option<(usize, f64, f64)> = None; // feature, threshold, score
        let mut order: Vec<usize> = rows.to_vec();
        for &f in features.iter().take(self.mtry.min(d)) {
            order.sort_by(|&a, &b| self.x[(a, f)].partial_cmp(&self.x[(b, f)]).unwrap());
            let mut left_sum = 0.0;
            for (pos, &i) in order.iter().enumerate().take(order.len() - 1) {
                left_sum += self.y[i];
                let n_left = pos + 1;
                let n_right = order.len() - n_left;
                if n_left < self.min_leaf || n_right < self.min_leaf {
                    continue;
                }
                let xl = self.x[(i, f)];
                let xr = self.x[(order[pos + 1], f)];
                if xr <= xl {
                    continue; // no gap to split in
                }
                let right_sum = total_sum - left_sum;
                let score = left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64;
                if best.map_or(true, |(_, _, s)| score > s) {
                    best = Some((f, 0.5 * (xl + xr), score));
                }
            }
        }
        // require an actual variance reduction
        best.and_then(|(f, thr, score)| {
            if score > total_sum * total_sum / n + 1e-12 {
                Some((f, thr))
            } else {
                None
            }
        })
    }
}
