//! Stage 3: joint training on the user-item and user-cluster graphs with
//! `L = L_rec^ui + L_rec^uc + λ L_cl^ui (+ L2)`, and the cluster-augmented
//! score `ŷ_ij = e_u · (e_j + Σ_k w_jk e_k)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{propagate_clean, xavier_bound, NoiseSpec};
use crate::error::{HgclError, Result};
use crate::graph::{normalize_adjacency, triples_for_edges, BipartiteGraph, NormalizedAdjacency, Triple, sample_negative};
use crate::hierarchy::HierarchyGraph;
use crate::losses::l2_reg;
use crate::matrix::{dot, Matrix};
use crate::optim::AdamState;
use crate::polar::ClusterAssignment;
use crate::pretrain::{epoch_schedule, graph_objective, EpochLoss, Selector, StepLoss, TrainConfig};

#[derive(Clone, Debug)]
pub struct HgclModel {
    /// Layer-0 parameters.
    pub user: Matrix,
    pub item: Matrix,
    pub cluster: Matrix,
    /// Noise-free pooled representations used for scoring.
    pub pooled_user: Matrix,
    pub pooled_item: Matrix,
    pub pooled_cluster: Matrix,
    pub assignment: ClusterAssignment,
}

impl HgclModel {
    pub fn num_users(&self) -> usize {
        self.user.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item.rows()
    }

    pub fn num_clusters(&self) -> usize {
        self.cluster.rows()
    }

    pub fn dim(&self) -> usize {
        self.user.cols()
    }

    /// Recomputes the pooled matrices: users and items from the user-item
    /// graph, clusters from the user-cluster graph.
    pub fn refresh(&mut self, base: &NormalizedAdjacency, hier: &NormalizedAdjacency, layers: usize) -> Result<()> {
        let m = self.num_users();
        let ui = propagate_clean(base, &Matrix::vstack(&self.user, &self.item), layers)?;
        self.pooled_user = ui.pooled.slice_rows(0, m);
        self.pooled_item = ui.pooled.slice_rows(m, ui.pooled.rows());
        let uc = propagate_clean(hier, &Matrix::vstack(&self.user, &self.cluster), layers)?;
        self.pooled_cluster = uc.pooled.slice_rows(m, uc.pooled.rows());
        Ok(())
    }

    /// Item-side vector `e_j + e_{cluster(j)}` that a user row is dotted with.
    pub fn item_vector(&self, item: usize) -> Vec<f64> {
        let k = self.assignment.assign[item];
        self.pooled_item
            .row(item)
            .iter()
            .zip(self.pooled_cluster.row(k))
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// Warm start: users and items copy the pre-trained layer-0 rows; each
/// cluster starts at the mean of its members' pre-trained pooled rows, and an
/// empty cluster gets a Xavier row.
pub fn init_finetune<R: Rng>(
    params: &Matrix,
    pooled: &Matrix,
    m: usize,
    a: &ClusterAssignment,
    rng: &mut R,
) -> Result<HgclModel> {
    if params.rows() != pooled.rows() || params.cols() != pooled.cols() {
        return Err(HgclError::Dimension("parameter and pooled tables differ in shape".into()));
    }
    if m > params.rows() || params.rows() - m != a.num_items() {
        return Err(HgclError::Dimension(format!(
            "pre-trained table has {} rows; expected {} users + {} items",
            params.rows(),
            m,
            a.num_items()
        )));
    }
    let d = params.cols();
    let c = a.num_clusters();
    let mut cluster = Matrix::zeros(c, d);
    for (j, &k) in a.assign.iter().enumerate() {
        for (dst, src) in cluster.row_mut(k).iter_mut().zip(pooled.row(m + j)) {
            *dst += src;
        }
    }
    let bound = xavier_bound(c, d);
    for k in 0..c {
        if a.sizes[k] == 0 {
            for v in cluster.row_mut(k) {
                *v = rng.random_range(-bound..=bound);
            }
        } else {
            let inv = 1.0 / a.sizes[k] as f64;
            cluster.row_mut(k).iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(HgclModel {
        user: params.slice_rows(0, m),
        item: params.slice_rows(m, params.rows()),
        pooled_user: pooled.slice_rows(0, m),
        pooled_item: pooled.slice_rows(m, pooled.rows()),
        pooled_cluster: cluster.clone(),
        cluster,
        assignment: a.clone(),
    })
}

pub fn predict_score(model: &HgclModel, user: usize, item: usize) -> Result<f64> {
    if user >= model.num_users() {
        return Err(HgclError::OutOfRange {
            what: "user",
            index: user,
            limit: model.num_users(),
        });
    }
    if item >= model.num_items() {
        return Err(HgclError::OutOfRange {
            what: "item",
            index: item,
            limit: model.num_items(),
        });
    }
    Ok(dot(model.pooled_user.row(user), &model.item_vector(item)))
}

/// Loss components of one fine-tuning step.
/// `total = rec_ui + rec_uc + λ·cl + l2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointLoss {
    pub rec_ui: f64,
    pub rec_uc: f64,
    pub cl: f64,
    pub l2: f64,
    pub total: f64,
}

impl JointLoss {
    fn accumulate(&mut self, o: &JointLoss) {
        self.rec_ui += o.rec_ui;
        self.rec_uc += o.rec_uc;
        self.cl += o.cl;
        self.l2 += o.l2;
        self.total += o.total;
    }

    /// Folds the two recommendation terms together.
    pub fn as_step_loss(&self) -> StepLoss {
        StepLoss {
            rec: self.rec_ui + self.rec_uc,
            cl: self.cl,
            l2: self.l2,
            total: self.total,
        }
    }
}

#[derive(Clone, Debug)]
pub struct JointObjective {
    pub loss: JointLoss,
    pub grad_user: Matrix,
    pub grad_item: Matrix,
    pub grad_cluster: Matrix,
}

/// Joint loss and its gradient w.r.t. the three layer-0 blocks. Noise and the
/// contrastive term apply to the user-item path only.
#[allow(clippy::too_many_arguments)]
pub fn joint_objective<R: Rng>(
    base: &NormalizedAdjacency,
    hier: &NormalizedAdjacency,
    user: &Matrix,
    item: &Matrix,
    cluster: &Matrix,
    cfg: &TrainConfig,
    triples_ui: &[Triple],
    triples_uc: &[Triple],
    rng: &mut R,
) -> Result<JointObjective> {
    let m = user.rows();
    let ui = graph_objective(
        base,
        &Matrix::vstack(user, item),
        cfg.layers,
        cfg.cl_layer,
        &cfg.noise(),
        cfg.lambda,
        cfg.tau,
        triples_ui,
        rng,
    )?;
    let uc = graph_objective(
        hier,
        &Matrix::vstack(user, cluster),
        cfg.layers,
        cfg.cl_layer,
        &NoiseSpec::off(),
        0.0,
        cfg.tau,
        triples_uc,
        rng,
    )?;

    let users: Vec<usize> = triples_ui
        .iter()
        .chain(triples_uc)
        .map(|t| t.user)
        .collect();
    let items: Vec<usize> = triples_ui.iter().flat_map(|t| [t.pos, t.neg]).collect();
    let clusters: Vec<usize> = triples_uc.iter().flat_map(|t| [t.pos, t.neg]).collect();
    let l2_u = l2_reg(user, &users, cfg.l2_coeff);
    let l2_i = l2_reg(item, &items, cfg.l2_coeff);
    let l2_c = l2_reg(cluster, &clusters, cfg.l2_coeff);
    let l2 = l2_u.value + l2_i.value + l2_c.value;

    let mut grad_user = ui.grad.slice_rows(0, m);
    grad_user.add_scaled(&uc.grad.slice_rows(0, m), 1.0);
    l2_u.grads.scatter_into(&mut grad_user, 1.0);
    let mut grad_item = ui.grad.slice_rows(m, ui.grad.rows());
    l2_i.grads.scatter_into(&mut grad_item, 1.0);
    let mut grad_cluster = uc.grad.slice_rows(m, uc.grad.rows());
    l2_c.grads.scatter_into(&mut grad_cluster, 1.0);

    Ok(JointObjective {
        loss: JointLoss {
            rec_ui: ui.rec,
            rec_uc: uc.rec,
            cl: ui.cl,
            l2,
            total: ui.rec + uc.rec + cfg.lambda * ui.cl + l2,
        },
        grad_user,
        grad_item,
        grad_cluster,
    })
}

/// Uniform `(user, cluster)` edges restricted to users that still have at
/// least one unlinked cluster, each with a rejection-sampled negative.
#[derive(Clone, Debug)]
pub struct HierarchySampler {
    eligible: Vec<usize>,
}

impl HierarchySampler {
    pub fn new(h: &BipartiteGraph) -> Result<Self> {
        let eligible: Vec<usize> = (0..h.edge_count())
            .filter(|&e| h.user_to_items.degree(h.edge(e).0) < h.n)
            .collect();
        if eligible.is_empty() {
            return Err(HgclError::Sampling(format!(
                "every user is linked to all {} clusters; the user-cluster graph needs rho*theta >= 2",
                h.n
            )));
        }
        Ok(HierarchySampler { eligible })
    }

    pub fn sample<R: Rng>(&self, h: &BipartiteGraph, batch: usize, rng: &mut R) -> Result<Vec<Triple>> {
        (0..batch)
            .map(|_| {
                let (user, pos) = h.edge(self.eligible[rng.random_range(0..self.eligible.len())]);
                let neg = sample_negative(h, user, rng)?;
                Ok(Triple { user, pos, neg })
            })
            .collect()
    }
}

pub struct Finetuner<'g> {
    graph: &'g BipartiteGraph,
    hier: &'g HierarchyGraph,
    base_adj: NormalizedAdjacency,
    sampler: HierarchySampler,
    cfg: TrainConfig,
    model: HgclModel,
    adam_user: AdamState,
    adam_item: AdamState,
    adam_cluster: AdamState,
    rng: ChaCha8Rng,
    steps_done: usize,
}

impl<'g> Finetuner<'g> {
    pub fn new(
        graph: &'g BipartiteGraph,
        hier: &'g HierarchyGraph,
        model: HgclModel,
        cfg: TrainConfig,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.num_users() != graph.m || model.num_items() != graph.n {
            return Err(HgclError::Dimension("model does not match the user-item graph".into()));
        }
        if hier.num_users() != graph.m || hier.num_clusters() != model.num_clusters() {
            return Err(HgclError::Dimension("model does not match the user-cluster graph".into()));
        }
        if model.dim() != cfg.d {
            return Err(HgclError::Dimension(format!(
                "model dimension {} differs from config d={}",
                model.dim(),
                cfg.d
            )));
        }
        if graph.edge_count() == 0 {
            return Err(HgclError::InvalidArgument("training graph has no edges".into()));
        }
        let sampler = HierarchySampler::new(&hier.graph)?;
        let d = cfg.d;
        Ok(Finetuner {
            graph,
            hier,
            base_adj: normalize_adjacency(graph),
            sampler,
            adam_user: AdamState::new(graph.m, d, cfg.lr),
            adam_item: AdamState::new(graph.n, d, cfg.lr),
            adam_cluster: AdamState::new(model.num_clusters(), d, cfg.lr),
            cfg,
            model,
            rng,
            steps_done: 0,
        })
    }

    pub fn model(&self) -> &HgclModel {
        &self.model
    }

    pub fn step(&mut self, edges: &[usize]) -> Result<JointLoss> {
        let triples_ui = triples_for_edges(self.graph, edges, &mut self.rng)?;
        let triples_uc = self.sampler.sample(&self.hier.graph, edges.len(), &mut self.rng)?;
        let obj = joint_objective(
            &self.base_adj,
            &self.hier.adj,
            &self.model.user,
            &self.model.item,
            &self.model.cluster,
            &self.cfg,
            &triples_ui,
            &triples_uc,
            &mut self.rng,
        )?;
        let l = obj.loss;
        let grads_finite =
            obj.grad_user.is_finite() && obj.grad_item.is_finite() && obj.grad_cluster.is_finite();
        if !l.total.is_finite() || !grads_finite {
            return Err(HgclError::NonFinite {
                step: self.steps_done,
                detail: format!(
                    "rec_ui={} rec_uc={} cl={} l2={} total={}",
                    l.rec_ui, l.rec_uc, l.cl, l.l2, l.total
                ),
            });
        }
        self.adam_user.step(&mut self.model.user, &obj.grad_user);
        self.adam_item.step(&mut self.model.item, &obj.grad_item);
        self.adam_cluster.step(&mut self.model.cluster, &obj.grad_cluster);
        self.steps_done += 1;
        Ok(l)
    }

    pub fn run_epoch(&mut self, epoch: usize) -> Result<(EpochLoss, JointLoss)> {
        let plan = epoch_schedule(self.graph.edge_count(), self.cfg.batch_size, &mut self.rng);
        let mut sum = JointLoss::default();
        for batch in &plan {
            sum.accumulate(&self.step(batch)?);
        }
        Ok((
            EpochLoss {
                epoch,
                steps: plan.len(),
                sum: sum.as_step_loss(),
            },
            sum,
        ))
    }

    /// Current model with pooled matrices refreshed.
    pub fn refreshed_model(&self) -> Result<HgclModel> {
        let mut model = self.model.clone();
        model.refresh(&self.base_adj, &self.hier.adj, self.cfg.layers)?;
        Ok(model)
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: HgclModel,
    pub history: Vec<JointLoss>,
    pub best_epoch: usize,
}

/// Runs `cfg.epochs` epochs of joint training with the same best-epoch
/// selection rule as pre-training.
pub fn finetune<F>(
    g: &BipartiteGraph,
    h: &HierarchyGraph,
    model: HgclModel,
    cfg: &TrainConfig,
    rng: ChaCha8Rng,
    mut eval_hook: F,
) -> Result<FinetuneOutcome>
where
    F: FnMut(&EpochLoss, &JointLoss, &HgclModel) -> Result<Option<f64>>,
{
    let mut trainer = Finetuner::new(g, h, model, cfg.clone(), rng)?;
    let mut selector = Selector::new(cfg.patience);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (loss, joint) = trainer.run_epoch(epoch)?;
        let model = trainer.refreshed_model()?;
        let score = eval_hook(&loss, &joint, &model)?;
        history.push(joint);
        if selector.observe(epoch, score, || model) {
            break;
        }
    }
    let (best_epoch, model) = match selector.take() {
        Some(best) => best,
        None => (0, trainer.refreshed_model()?),
    };
    Ok(FinetuneOutcome {
        model,
        history,
        best_epoch,
    })
}
