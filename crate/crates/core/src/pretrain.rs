//! Stage 1: noise-perturbed light graph convolution trained with
//! `L = L_rec + λ L_cl (+ L2)` where `L_cl` contrasts layer `K` against
//! layer `K*` of the same forward pass.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{
    backpropagate, pooled_grad_to_layers, propagate, propagate_clean, xavier_init, EmbeddingState,
    NoiseSpec,
};
use crate::error::{HgclError, Result};
use crate::graph::{normalize_adjacency, triples_for_edges, BipartiteGraph, NormalizedAdjacency, Triple};
use crate::losses::{bpr_pooled, cross_layer_infonce, l2_reg};
use crate::matrix::Matrix;
use crate::optim::AdamState;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    /// Propagation depth `K`.
    pub layers: usize,
    /// Layer `K*` contrasted with layer `K`.
    pub cl_layer: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2_coeff: f64,
    pub seed: u64,
    /// Stop after this many epochs without a better selection score.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            layers: 3,
            cl_layer: 1,
            lambda: 0.2,
            epsilon: 0.2,
            tau: 0.15,
            lr: 1e-4,
            batch_size: 2048,
            epochs: 50,
            l2_coeff: 1e-4,
            seed: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(HgclError::config(key, msg));
        if self.d == 0 {
            return bad("d", "must be >= 1");
        }
        if self.layers == 0 {
            return bad("layers", "must be >= 1");
        }
        if self.cl_layer > self.layers {
            return bad("cl_layer", "must satisfy 0 <= K* <= K");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", "must be >= 0");
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon", "must be >= 0");
        }
        if !(self.tau > 0.0) {
            return bad("tau", "must be > 0");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.l2_coeff >= 0.0) {
            return bad("l2", "must be >= 0");
        }
        Ok(())
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec::with_epsilon(self.epsilon)
    }
}

/// Shuffled edge order for one epoch, cut into batches; the last partial
/// batch is kept.
pub fn epoch_schedule<R: Rng>(num_edges: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..num_edges).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Loss components of one optimizer step. `total = rec + λ·cl + l2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub rec: f64,
    pub cl: f64,
    pub l2: f64,
    pub total: f64,
}

impl StepLoss {
    fn accumulate(&mut self, other: &StepLoss) {
        self.rec += other.rec;
        self.cl += other.cl;
        self.l2 += other.l2;
        self.total += other.total;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub steps: usize,
    /// Sums over the epoch's steps.
    pub sum: StepLoss,
}

/// `L_rec + λ L_cl` on one bipartite graph and its gradient w.r.t. the
/// stacked layer-0 table.
pub struct GraphObjective {
    pub rec: f64,
    pub cl: f64,
    pub grad: Matrix,
}

#[allow(clippy::too_many_arguments)]
pub fn graph_objective<R: Rng>(
    adj: &NormalizedAdjacency,
    e0: &Matrix,
    layers: usize,
    cl_layer: usize,
    noise: &NoiseSpec,
    lambda: f64,
    tau: f64,
    triples: &[Triple],
    rng: &mut R,
) -> Result<GraphObjective> {
    let state = propagate(adj, e0, layers, noise, rng)?;
    let rec = bpr_pooled(triples, &state.pooled, adj.m);
    let mut pooled_grad = Matrix::zeros(e0.rows(), e0.cols());
    rec.grads.scatter_into(&mut pooled_grad, 1.0);
    let mut layer_grads = pooled_grad_to_layers(&pooled_grad, layers);

    let mut cl = 0.0;
    if lambda > 0.0 {
        let (users, items) = contrast_batches(triples, adj.m);
        for batch in [users, items] {
            let c = cross_layer_infonce(
                &state.layers[layers],
                &state.layers[cl_layer],
                &batch,
                tau,
            )?;
            cl += c.value;
            c.grad_k.scatter_into(&mut layer_grads[layers], lambda);
            c.grad_kstar.scatter_into(&mut layer_grads[cl_layer], lambda);
        }
    }
    let grad = backpropagate(adj, &layer_grads);
    Ok(GraphObjective {
        rec: rec.value,
        cl,
        grad,
    })
}

/// Distinct users and distinct positive items (as node ids) of a batch, sorted.
pub fn contrast_batches(triples: &[Triple], m: usize) -> (Vec<usize>, Vec<usize>) {
    let mut users: Vec<usize> = triples.iter().map(|t| t.user).collect();
    users.sort_unstable();
    users.dedup();
    let mut items: Vec<usize> = triples.iter().map(|t| m + t.pos).collect();
    items.sort_unstable();
    items.dedup();
    (users, items)
}

/// Layer-0 rows a batch reads: its users, positives and negatives.
pub fn touched_rows(triples: &[Triple], m: usize) -> Vec<usize> {
    triples
        .iter()
        .flat_map(|t| [t.user, m + t.pos, m + t.neg])
        .collect()
}

pub struct Pretrainer<'g> {
    graph: &'g BipartiteGraph,
    adj: NormalizedAdjacency,
    cfg: TrainConfig,
    params: Matrix,
    adam: AdamState,
    rng: ChaCha8Rng,
    steps_done: usize,
}

impl<'g> Pretrainer<'g> {
    /// Xavier-initializes the `(m+n) x d` table from `rng`, which then drives
    /// shuffling, negative sampling and noise.
    pub fn new(graph: &'g BipartiteGraph, cfg: TrainConfig, mut rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let params = xavier_init(graph.m + graph.n, cfg.d, &mut rng);
        Self::with_params(graph, cfg, params, rng)
    }

    pub fn with_params(
        graph: &'g BipartiteGraph,
        cfg: TrainConfig,
        params: Matrix,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if graph.edge_count() == 0 {
            return Err(HgclError::InvalidArgument("training graph has no edges".into()));
        }
        if params.rows() != graph.m + graph.n || params.cols() != cfg.d {
            return Err(HgclError::Dimension(format!(
                "parameters are {}x{}, expected {}x{}",
                params.rows(),
                params.cols(),
                graph.m + graph.n,
                cfg.d
            )));
        }
        let adam = AdamState::new(params.rows(), params.cols(), cfg.lr);
        Ok(Pretrainer {
            graph,
            adj: normalize_adjacency(graph),
            cfg,
            params,
            adam,
            rng,
            steps_done: 0,
        })
    }

    pub fn params(&self) -> &Matrix {
        &self.params
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        &self.adj
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch_plan(&mut self) -> Vec<Vec<usize>> {
        epoch_schedule(self.graph.edge_count(), self.cfg.batch_size, &mut self.rng)
    }

    /// One optimizer step on the given training edges.
    pub fn step(&mut self, edges: &[usize]) -> Result<StepLoss> {
        let cfg = &self.cfg;
        let triples = triples_for_edges(self.graph, edges, &mut self.rng)?;
        let obj = graph_objective(
            &self.adj,
            &self.params,
            cfg.layers,
            cfg.cl_layer,
            &cfg.noise(),
            cfg.lambda,
            cfg.tau,
            &triples,
            &mut self.rng,
        )?;
        let l2 = l2_reg(&self.params, &touched_rows(&triples, self.graph.m), cfg.l2_coeff);
        let loss = StepLoss {
            rec: obj.rec,
            cl: obj.cl,
            l2: l2.value,
            total: obj.rec + cfg.lambda * obj.cl + l2.value,
        };
        let mut grad = obj.grad;
        l2.grads.scatter_into(&mut grad, 1.0);
        if !loss.total.is_finite() || !grad.is_finite() {
            return Err(HgclError::NonFinite {
                step: self.steps_done,
                detail: format!(
                    "rec={} cl={} l2={} total={}",
                    loss.rec, loss.cl, loss.l2, loss.total
                ),
            });
        }
        self.adam.step(&mut self.params, &grad);
        self.steps_done += 1;
        Ok(loss)
    }

    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochLoss> {
        let plan = self.epoch_plan();
        let mut out = EpochLoss {
            epoch,
            ..Default::default()
        };
        for batch in &plan {
            let l = self.step(batch)?;
            out.sum.accumulate(&l);
            out.steps += 1;
        }
        Ok(out)
    }

    /// Noise-free forward of the current parameters.
    pub fn embeddings(&self) -> Result<EmbeddingState> {
        propagate_clean(&self.adj, &self.params, self.cfg.layers)
    }
}

/// Result of a training run: the selected layer-0 table and its noise-free
/// forward.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Matrix,
    pub state: EmbeddingState,
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
}

/// Runs `cfg.epochs` epochs. After each, `eval_hook` sees the noise-free
/// forward and may return a selection score (higher is better); the best
/// scoring epoch's parameters are returned, or the last epoch's when the hook
/// never scores.
pub fn pretrain<F>(
    g: &BipartiteGraph,
    cfg: &TrainConfig,
    rng: ChaCha8Rng,
    mut eval_hook: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLoss, &EmbeddingState) -> Result<Option<f64>>,
{
    let mut trainer = Pretrainer::new(g, cfg.clone(), rng)?;
    let mut selector = Selector::new(cfg.patience);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let loss = trainer.run_epoch(epoch)?;
        let state = trainer.embeddings()?;
        let score = eval_hook(&loss, &state)?;
        history.push(loss);
        if selector.observe(epoch, score, || (trainer.params().clone(), state)) {
            break;
        }
    }
    let (best_epoch, params, state) = match selector.take() {
        Some((epoch, (params, state))) => (epoch, params, state),
        None => {
            let state = trainer.embeddings()?;
            (cfg.epochs, trainer.params().clone(), state)
        }
    };
    Ok(TrainOutcome {
        params,
        state,
        history,
        best_epoch,
    })
}

/// Best-epoch tracking with optional patience.
pub(crate) struct Selector<T> {
    best: Option<(usize, f64, T)>,
    last: Option<(usize, T)>,
    patience: Option<usize>,
    since_best: usize,
    scored: bool,
}

impl<T> Selector<T> {
    pub(crate) fn new(patience: Option<usize>) -> Self {
        Selector {
            best: None,
            last: None,
            patience,
            since_best: 0,
            scored: false,
        }
    }

    /// Records an epoch; returns true when training should stop early.
    pub(crate) fn observe(&mut self, epoch: usize, score: Option<f64>, snapshot: impl FnOnce() -> T) -> bool {
        match score {
            Some(s) => {
                self.scored = true;
                let better = self.best.as_ref().is_none_or(|(_, b, _)| s > *b);
                if better {
                    self.best = Some((epoch, s, snapshot()));
                    self.since_best = 0;
                } else {
                    self.since_best += 1;
                }
                self.patience.is_some_and(|p| self.since_best >= p)
            }
            None => {
                self.last = Some((epoch, snapshot()));
                false
            }
        }
    }

    pub(crate) fn take(self) -> Option<(usize, T)> {
        if self.scored {
            self.best.map(|(e, _, t)| (e, t))
        } else {
            self.last
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn schedule_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = epoch_schedule(3, 2, &mut rng);
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 1]);
        assert_eq!(epoch_schedule(10_000, 2048, &mut rng).len(), 5);
        let a = epoch_schedule(50, 7, &mut ChaCha8Rng::seed_from_u64(4));
        let b = epoch_schedule(50, 7, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            tau: -1.0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(HgclError::Config { key, .. }) if key == "tau"));
        let c = TrainConfig {
            cl_layer: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn selector_keeps_best() {
        let mut s = Selector::new(None);
        s.observe(1, Some(0.1), || "a");
        s.observe(2, Some(0.3), || "b");
        s.observe(3, Some(0.2), || "c");
        assert_eq!(s.take(), Some((2, "b")));

        let mut s = Selector::new(Some(1));
        s.observe(1, Some(0.5), || 1);
        assert!(s.observe(2, Some(0.4), || 2));

        let mut s = Selector::new(None);
        s.observe(1, None, || 1);
        s.observe(2, None, || 2);
        assert_eq!(s.take(), Some((2, 2)));
    }

    #[test]
    fn loss_decomposes() {
        let pairs: Vec<_> = (0..8).flat_map(|u| [(u, u % 5), (u, (u + 2) % 5)]).collect();
        let g = BipartiteGraph::from_pairs(8, 5, &pairs);
        let cfg = TrainConfig {
            d: 4,
            layers: 2,
            cl_layer: 1,
            batch_size: 5,
            lr: 0.01,
            epochs: 1,
            ..Default::default()
        };
        let mut t = Pretrainer::new(&g, cfg.clone(), ChaCha8Rng::seed_from_u64(1)).unwrap();
        for batch in t.epoch_plan() {
            let l = t.step(&batch).unwrap();
            assert!(l.cl >= 0.0);
            assert!((l.total - (l.rec + cfg.lambda * l.cl + l.l2)).abs() < 1e-10);
        }
    }
}
