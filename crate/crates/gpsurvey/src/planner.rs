//! Adaptive sampling-based replanning: an RRT* biased toward the current
//! maximum-entropy point, with path selection by length-normalized
//! cumulative entropy within a radius of the root.

use rand::Rng;

use crate::data::{MapPosterior, PosteriorPrediction};
use crate::error::{Error, Result};
use crate::vehicle::Path;
use crate::world::{segment_collides, Bounds, ObstacleMap};
use crate::Point;

/// Differential entropy of a Gaussian marginal, 0.5 ln(2 pi e s2), with the
/// variance floored at 1e-12 so depleted cells cannot produce -inf.
pub fn entropy(prediction: &PosteriorPrediction) -> f64 {
    let v = prediction.variance.max(1e-12);
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * v).ln()
}

#[derive(Clone, Copy, Debug)]
pub struct PlannerConfig {
    /// Probability of steering toward the max-entropy point instead of a
    /// uniform random target.
    pub epsilon: f64,
    /// Selection radius r: the chosen node must satisfy d(node) <= r.
    pub selection_radius: f64,
    /// Tree size at which expansion stops (including the root).
    pub max_nodes: usize,
    pub steer_step: f64,
    pub rewire_radius: f64,
    /// Nodes are never packed tighter than this. Keeps the length
    /// normalization of the information gain from blowing up on
    /// near-duplicate nodes next to the root.
    pub min_node_separation: f64,
    /// Coarse candidate count for the entropy argmax.
    pub entropy_candidates: usize,
    /// Obstacle inflation used for collision checks, and the margin by
    /// which sampling stays inside the domain.
    pub inflation: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            selection_radius: 20.0,
            max_nodes: 200,
            steer_step: 5.0,
            rewire_radius: 10.0,
            min_node_separation: 5.0,
            entropy_candidates: 256,
            inflation: 3.0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidInput(format!("epsilon {} not in [0,1]", self.epsilon)));
        }
        for (name, v) in [
            ("selection_radius", self.selection_radius),
            ("steer_step", self.steer_step),
            ("rewire_radius", self.rewire_radius),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidInput(format!("{name} {v} must be positive")));
            }
        }
        if self.max_nodes < 1 || self.entropy_candidates < 1 {
            return Err(Error::InvalidInput("node and candidate counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// RRT* node: position, per-node entropy H cached at insertion, cumulative
/// entropy h along the root path, distance from root d, and tree links.
#[derive(Clone, Debug)]
pub struct TreeNode {
    pub position: Point,
    /// H(node), cached from the posterior snapshot at insertion time.
    pub entropy: f64,
    /// h(node) = h(parent) + H(node); h(root) = H(root).
    pub cum_entropy: f64,
    /// d(node) = d(parent) + |node - parent|; d(root) = 0.
    pub dist_from_root: f64,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// Length-normalized cumulative entropy h(node)/d(node). Undefined on the
/// root (d = 0); callers must exclude it.
pub fn info_gain(node: &TreeNode) -> f64 {
    node.cum_entropy / node.dist_from_root
}

#[derive(Clone, Debug)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn new(root: Point, root_entropy: f64) -> Self {
        Self {
            nodes: vec![TreeNode {
                position: root,
                entropy: root_entropy,
                cum_entropy: root_entropy,
                dist_from_root: 0.0,
                parent: None,
                children: Vec::new(),
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    fn nearest(&self, target: Point) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, n) in self.nodes.iter().enumerate() {
            let d = (n.position - target).norm_squared();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    fn neighbors_within(&self, p: Point, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| (n.position - p).norm_squared() <= r2)
            .map(|(i, _)| i)
            .collect()
    }

    /// Recompute d and h for the subtree rooted at `id` from its parent's
    /// values and the cached per-node entropies.
    fn refresh_subtree(&mut self, id: usize) {
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            if let Some(parent) = self.nodes[cur].parent {
                let edge = (self.nodes[cur].position - self.nodes[parent].position).norm();
                self.nodes[cur].dist_from_root = self.nodes[parent].dist_from_root + edge;
                self.nodes[cur].cum_entropy =
                    self.nodes[parent].cum_entropy + self.nodes[cur].entropy;
            }
            stack.extend(self.nodes[cur].children.iter().copied());
        }
    }

    /// One expansion attempt toward `target`. Returns the new node id, or
    /// None if the steer collided or degenerated.
    pub fn grow_once(
        &mut self,
        target: Point,
        config: &PlannerConfig,
        posterior: &dyn MapPosterior,
        obstacles: &ObstacleMap,
    ) -> Option<usize> {
        let nearest = self.nearest(target);
        let from = self.nodes[nearest].position;
        let to_target = target - from;
        let dist = to_target.norm();
        if dist < 1e-12 {
            return None;
        }
        let new_pos = from + to_target * (config.steer_step.min(dist) / dist);
        if (new_pos - from).norm() < config.min_node_separation - 1e-9 {
            return None;
        }

        if segment_collides(from, new_pos, obstacles, config.inflation) {
            return None;
        }

        // Choose the parent minimizing d among collision-free neighbors.
        let mut candidates = self.neighbors_within(new_pos, config.rewire_radius);
        if !candidates.contains(&nearest) {
            candidates.push(nearest);
        }
        let mut best_parent = nearest;
        let mut best_d =
            self.nodes[nearest].dist_from_root + (new_pos - from).norm();
        for &cand in &candidates {
            if cand == nearest {
                continue;
            }
            let d = self.nodes[cand].dist_from_root
                + (new_pos - self.nodes[cand].position).norm();
            if d < best_d - 1e-12
                && !segment_collides(self.nodes[cand].position, new_pos, obstacles, config.inflation)
            {
                best_d = d;
                best_parent = cand;
            }
        }

        let h_new = entropy(&posterior.predict_one(new_pos));
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            position: new_pos,
            entropy: h_new,
            cum_entropy: self.nodes[best_parent].cum_entropy + h_new,
            dist_from_root: best_d,
            parent: Some(best_parent),
            children: Vec::new(),
        });
        self.nodes[best_parent].children.push(id);

        // Rewire neighbors through the new node where that shortens d.
        for &cand in &candidates {
            if cand == best_parent || self.nodes[cand].parent.is_none() {
                continue;
            }
            let through = best_d + (self.nodes[cand].position - new_pos).norm();
            if through < self.nodes[cand].dist_from_root - 1e-12
                && !segment_collides(self.nodes[cand].position, new_pos, obstacles, config.inflation)
            {
                let old_parent = self.nodes[cand].parent.unwrap();
                self.nodes[old_parent].children.retain(|&c| c != cand);
                self.nodes[cand].parent = Some(id);
                self.nodes[id].children.push(cand);
                self.refresh_subtree(cand);
            }
        }
        Some(id)
    }

    /// Waypoints from the root to `id`, inclusive.
    pub fn path_to(&self, id: usize) -> Vec<Point> {
        let mut rev = Vec::new();
        let mut cur = Some(id);
        while let Some(i) = cur {
            rev.push(self.nodes[i].position);
            cur = self.nodes[i].parent;
        }
        rev.reverse();
        rev
    }

    /// Debug dump: one node per line, `id parent x y h d` (root parent -1).
    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map_or(-1i64, |p| p as i64);
            out.push_str(&format!(
                "{i} {parent} {} {} {} {}\n",
                n.position.x, n.position.y, n.cum_entropy, n.dist_from_root
            ));
        }
        out
    }
}

/// Best point found for argmax of the posterior entropy: coarse uniform
/// candidates followed by a few rounds of shrinking coordinate descent.
/// Deterministic given the RNG state.
pub fn argmax_entropy<R: Rng>(
    posterior: &dyn MapPosterior,
    bounds: &Bounds,
    config: &PlannerConfig,
    rng: &mut R,
) -> Point {
    let sample_bounds = bounds.inset(config.inflation.min(bounds.width() / 4.0));
    let candidates: Vec<Point> =
        (0..config.entropy_candidates).map(|_| sample_bounds.sample(rng)).collect();
    let preds = posterior.predict_at(&candidates);
    let mut best = candidates[0];
    let mut best_var = preds[0].variance;
    for (c, p) in candidates.iter().zip(&preds) {
        if p.variance > best_var {
            best_var = p.variance;
            best = *c;
        }
    }

    // Local refinement; never accepts a worse point than the coarse best.
    let mut step = (sample_bounds.width().max(sample_bounds.height())) / 32.0;
    for _ in 0..3 {
        for (dx, dy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
            let trial = sample_bounds
                .clamp(Point::new(best.x + dx * step, best.y + dy * step));
            let v = posterior.predict_one(trial).variance;
            if v > best_var {
                best_var = v;
                best = trial;
            }
        }
        step *= 0.5;
    }
    best
}

/// Expand the tree until it holds `max_nodes` nodes: steer toward the
/// max-entropy point with probability epsilon, otherwise toward a uniform
/// random target. Collision skips count toward an attempt cap of
/// 50 * max_nodes so a boxed-in root still terminates.
pub fn expand_tree<R: Rng>(
    tree: &mut Tree,
    x_star: Point,
    config: &PlannerConfig,
    posterior: &dyn MapPosterior,
    obstacles: &ObstacleMap,
    bounds: &Bounds,
    rng: &mut R,
) {
    let sample_bounds = bounds.inset(config.inflation.min(bounds.width() / 4.0));
    let mut attempts = 0;
    let cap = 50 * config.max_nodes;
    while tree.len() < config.max_nodes && attempts < cap {
        attempts += 1;
        let target = if rng.gen::<f64>() < config.epsilon {
            x_star
        } else {
            sample_bounds.sample(rng)
        };
        tree.grow_once(target, config, posterior, obstacles);
    }
}

/// Best path within the selection radius: the non-root node maximizing
/// info gain among those with d <= r, ties broken by larger d then lower
/// id. With no node inside the radius the farthest reachable node is used;
/// a root-only tree is a planner error and callers keep their current path.
pub fn select_path(tree: &Tree, radius: f64) -> Result<Path> {
    let mut best: Option<(usize, f64, f64)> = None; // (id, gain, d)
    for (i, n) in tree.nodes().iter().enumerate().skip(1) {
        if n.dist_from_root > radius {
            continue;
        }
        let gain = info_gain(n);
        let better = match best {
            None => true,
            Some((bid, bg, bd)) => {
                gain > bg
                    || (gain == bg && (n.dist_from_root > bd
                        || (n.dist_from_root == bd && i < bid)))
            }
        };
        if better {
            best = Some((i, gain, n.dist_from_root));
        }
    }
    let chosen = match best {
        Some((id, _, _)) => id,
        None => {
            // Fall back to the farthest reachable node.
            let far = tree
                .nodes()
                .iter()
                .enumerate()
                .skip(1)
                .max_by(|(ai, a), (bi, b)| {
                    a.dist_from_root
                        .partial_cmp(&b.dist_from_root)
                        .unwrap()
                        .then(bi.cmp(ai))
                })
                .map(|(i, _)| i);
            far.ok_or_else(|| Error::Planner("tree has no nodes beyond the root".into()))?
        }
    };
    Path::new(tree.path_to(chosen))
}

pub struct ReplanOutcome {
    pub path: Path,
    pub tree: Tree,
    pub entropy_target: Point,
}

/// One full replanning cycle: entropy argmax, epsilon-biased RRT*
/// expansion, and radius-bounded best-path selection from `root`.
pub fn replan<R: Rng>(
    root: Point,
    posterior: &dyn MapPosterior,
    obstacles: &ObstacleMap,
    bounds: &Bounds,
    config: &PlannerConfig,
    rng: &mut R,
) -> Result<ReplanOutcome> {
    config.validate()?;
    let x_star = argmax_entropy(posterior, bounds, config, rng);
    let root_entropy = entropy(&posterior.predict_one(root));
    let mut tree = Tree::new(root, root_entropy);
    expand_tree(&mut tree, x_star, config, posterior, obstacles, bounds, rng);
    let path = select_path(&tree, config.selection_radius)?;
    Ok(ReplanOutcome { path, tree, entropy_target: x_star })
}
