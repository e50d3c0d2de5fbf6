//! Fusion head over the selected feature points of all blocks.
//!
//! Three variants, all ending in a linear classifier:
//! - ADD: mean of the node vectors.
//! - MLP: flatten nodes in block-then-confidence order through one linear
//!   layer (order-sensitive by construction, so the input width is fixed).
//! - GCN (default): treat nodes as a graph whose edge weights are clamped
//!   cosine similarities with self-loops, row-normalized; propagate, then
//!   soft-assign nodes to a smaller budget of super nodes per layer (each
//!   super node is the assignment-weighted mean of its members), and
//!   classify the mean super-node feature.
//!
//! Everything is differentiable through the node features — including the
//! adjacency, which is rebuilt from the features on every forward pass.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{LinearParams, ParamStore, TapeBinding};
use crate::scalar::Real;
use crate::selector::SelectionResult;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombinerVariant {
    Add,
    Mlp,
    Gcn,
}

impl std::str::FromStr for CombinerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(CombinerVariant::Add),
            "mlp" => Ok(CombinerVariant::Mlp),
            "gcn" => Ok(CombinerVariant::Gcn),
            other => Err(Error::invalid(
                "combiner",
                format!("unknown variant {other:?} (expected add, mlp, or gcn)"),
            )),
        }
    }
}

impl std::fmt::Display for CombinerVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CombinerVariant::Add => "add",
            CombinerVariant::Mlp => "mlp",
            CombinerVariant::Gcn => "gcn",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinerConfig {
    pub variant: CombinerVariant,
    pub gcn_layers: usize,
    /// One pooling ratio per layer; layer i keeps
    /// `max(1, round(N * ratios[0] * .. * ratios[i]))` super nodes.
    pub pool_ratios: Vec<f64>,
    pub hidden: usize,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        CombinerConfig {
            variant: CombinerVariant::Gcn,
            gcn_layers: 1,
            pool_ratios: vec![1.0 / 32.0],
            hidden: 64,
        }
    }
}

impl CombinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::invalid("combiner", "zero hidden width"));
        }
        if self.variant == CombinerVariant::Gcn {
            if self.gcn_layers == 0 {
                return Err(Error::invalid("combiner", "gcn needs at least one layer"));
            }
            if self.pool_ratios.len() != self.gcn_layers {
                return Err(Error::invalid(
                    "combiner",
                    format!(
                        "{} pool ratios for {} layers",
                        self.pool_ratios.len(),
                        self.gcn_layers
                    ),
                ));
            }
            if self.pool_ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
                return Err(Error::invalid("combiner", "pool ratios must be positive"));
            }
        }
        Ok(())
    }

    /// Super-node budget after each layer for `n` input nodes.
    pub fn budgets(&self, n: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.gcn_layers);
        let mut cum = 1.0;
        let mut prev = n;
        for &r in &self.pool_ratios {
            cum *= r;
            let budget = ((n as f64) * cum).round().max(1.0) as usize;
            if budget > prev {
                return Err(Error::invalid(
                    "combiner",
                    format!("pooling would grow {prev} nodes to {budget}"),
                ));
            }
            out.push(budget);
            prev = budget;
        }
        Ok(out)
    }
}

/// Node features plus the similarity graph built over them.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    /// `[N, C]`, blocks concatenated in ascending block order, each block's
    /// rows in confidence order.
    pub nodes: Var,
    /// `[N, N]` row-stochastic.
    pub adjacency: Var,
    /// Originating block of each node row.
    pub block_of_node: Vec<usize>,
}

/// Stack every block's selected features into the combiner's node matrix.
pub fn concat_selected<F: Real>(
    tape: &mut Tape<F>,
    selections: &[SelectionResult],
) -> Result<(Var, Vec<usize>)> {
    let mut feats = Vec::new();
    let mut block_of_node = Vec::new();
    for sr in selections {
        if let Some(f) = sr.selected_features {
            feats.push(f);
            block_of_node.extend(std::iter::repeat(sr.block_index).take(sr.num_selected()));
        }
    }
    if feats.is_empty() {
        return Err(Error::invalid("combiner", "no selected points to combine"));
    }
    let nodes = if feats.len() == 1 {
        feats[0]
    } else {
        tape.concat(&feats, 0)?
    };
    Ok((nodes, block_of_node))
}

/// Edge weights from node features: cosine similarity clamped to >= 0,
/// plus a self-loop on every node, rows normalized to sum to 1.
pub fn build_graph<F: Real>(
    tape: &mut Tape<F>,
    selections: &[SelectionResult],
) -> Result<GraphBatch> {
    let (nodes, block_of_node) = concat_selected(tape, selections)?;
    let adjacency = adjacency_from_nodes(tape, nodes)?;
    Ok(GraphBatch { nodes, adjacency, block_of_node })
}

fn adjacency_from_nodes<F: Real>(tape: &mut Tape<F>, nodes: Var) -> Result<Var> {
    let n = tape.value(nodes).shape()[0];
    let unit = tape.normalize_rows_l2(nodes, F::from_f64(1e-12))?;
    let unit_t = tape.transpose2d(unit)?;
    let sim = tape.matmul(unit, unit_t)?;
    let clamped = tape.clamp(sim, F::zero(), F::infinity());
    let eye = tape.constant(identity::<F>(n)?);
    let with_loops = tape.add(clamped, eye)?;
    tape.normalize_rows_sum(with_loops)
}

fn identity<F: Real>(n: usize) -> Result<Tensor<F>> {
    let mut t = Tensor::zeros(vec![n, n])?;
    for i in 0..n {
        t.data_mut()[i * n + i] = F::one();
    }
    Ok(t)
}

#[derive(Debug)]
struct GcnLayer {
    weight: LinearParams,
    assign: LinearParams,
    budget: usize,
}

/// Learnable state of the fusion head. The node count is part of the
/// contract: MLP flattening and the assignment widths depend on it.
#[derive(Debug)]
pub struct Combiner {
    pub cfg: CombinerConfig,
    pub node_count: usize,
    pub feature_width: usize,
    pub num_classes: usize,
    layers: Vec<GcnLayer>,
    head: LinearParams,
}

impl Combiner {
    pub fn create<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: CombinerConfig,
        node_count: usize,
        feature_width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if node_count == 0 {
            return Err(Error::invalid("combiner", "zero nodes"));
        }
        let mut layers = Vec::new();
        let head = match cfg.variant {
            CombinerVariant::Add => {
                LinearParams::create(store, rng, "combiner.head", feature_width, num_classes)?
            }
            CombinerVariant::Mlp => LinearParams::create(
                store,
                rng,
                "combiner.head",
                node_count * feature_width,
                num_classes,
            )?,
            CombinerVariant::Gcn => {
                let budgets = cfg.budgets(node_count)?;
                let mut in_width = feature_width;
                for (i, &budget) in budgets.iter().enumerate() {
                    let weight = LinearParams::create_relu(
                        store,
                        rng,
                        &format!("combiner.gcn.layer{i}.w"),
                        in_width,
                        cfg.hidden,
                    )?;
                    let assign = LinearParams::create(
                        store,
                        rng,
                        &format!("combiner.gcn.layer{i}.assign"),
                        cfg.hidden,
                        budget,
                    )?;
                    layers.push(GcnLayer { weight, assign, budget });
                    in_width = cfg.hidden;
                }
                LinearParams::create(store, rng, "combiner.head", cfg.hidden, num_classes)?
            }
        };
        Ok(Combiner {
            cfg,
            node_count,
            feature_width,
            num_classes,
            layers,
            head,
        })
    }

    /// Dispatch on the configured variant. Returns class scores `[1, C']`.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        selections: &[SelectionResult],
    ) -> Result<Var> {
        match self.cfg.variant {
            CombinerVariant::Add => {
                let (nodes, _) = concat_selected(tape, selections)?;
                self.add_forward(tape, binding, nodes)
            }
            CombinerVariant::Mlp => {
                let (nodes, _) = concat_selected(tape, selections)?;
                self.mlp_forward(tape, binding, nodes)
            }
            CombinerVariant::Gcn => {
                let graph = build_graph(tape, selections)?;
                Ok(self.gcn_forward(tape, binding, &graph)?.0)
            }
        }
    }

    /// Mean node vector through the classifier.
    pub fn add_forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        nodes: Var,
    ) -> Result<Var> {
        let mean = tape.mean_axis(nodes, 0)?;
        let row = tape.reshape(mean, vec![1, self.feature_width])?;
        self.head.apply(tape, binding, row)
    }

    /// Flattened nodes through the classifier; the node count must match
    /// the width this head was built for.
    pub fn mlp_forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        nodes: Var,
    ) -> Result<Var> {
        let numel = tape.value(nodes).numel();
        let want = self.node_count * self.feature_width;
        if numel != want {
            return Err(Error::invalid(
                "combiner",
                format!("{numel} node values for an mlp head of width {want}"),
            ));
        }
        let row = tape.reshape(nodes, vec![1, want])?;
        self.head.apply(tape, binding, row)
    }

    /// Propagate-pool layers, then classify the mean super-node feature.
    /// Also returns the final pooled feature matrix `[N', hidden]`.
    pub fn gcn_forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        binding: &TapeBinding,
        graph: &GraphBatch,
    ) -> Result<(Var, Var)> {
        let mut h = graph.nodes;
        let mut a = graph.adjacency;
        for (i, layer) in self.layers.iter().enumerate() {
            let ah = tape.matmul(a, h)?;
            let hw = layer.weight.apply(tape, binding, ah)?;
            let act = tape.relu(hw);
            let s_logits = layer.assign.apply(tape, binding, act)?;
            let s = tape.softmax(s_logits, 1)?;
            // each super node takes the assignment-weighted MEAN of its
            // members (rows of S^T re-normalized to sum 1), so pooled
            // magnitudes stay at feature scale no matter how many nodes
            // feed a super node; softmax output is positive, so no row of
            // S^T has zero mass
            let s_t = tape.transpose2d(s)?;
            let s_t = tape.normalize_rows_sum(s_t)?;
            h = tape.matmul(s_t, act)?;
            debug_assert_eq!(tape.value(h).shape()[0], layer.budget);
            if i + 1 < self.layers.len() {
                // carry the graph down to super-node resolution
                let sa = tape.matmul(s_t, a)?;
                let sas = tape.matmul(sa, s)?;
                a = tape.normalize_rows_sum(sas)?;
            }
        }
        let mean = tape.mean_axis(h, 0)?;
        let row = tape.reshape(mean, vec![1, self.cfg.hidden])?;
        let scores = self.head.apply(tape, binding, row)?;
        Ok((scores, h))
    }
}
