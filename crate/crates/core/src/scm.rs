//! Structural causal models with additive-noise mechanisms.
//!
//! A [`Scm`] pairs a [`Dag`] with one [`Mechanism`] per node. Exogenous noises
//! are independent standard normals scaled by each mechanism's `sigma`, so the
//! noise of every stochastic node can be recovered exactly from a full
//! observation (which is what [`counterfactual`] relies on).

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::stats::normal_log_pdf;

/// Directed acyclic graph stored as sorted parent sets.
///
/// In ordered mode every edge `i -> j` satisfies `i < j`, so the identity is a
/// topological order. Unordered mode only requires acyclicity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "DagRepr", into = "DagRepr")]
pub struct Dag {
    n: usize,
    parents: Vec<Vec<usize>>,
    ordered: bool,
}

#[derive(Serialize, Deserialize)]
struct DagRepr {
    n: usize,
    parents: Vec<Vec<usize>>,
    #[serde(default = "default_true")]
    ordered: bool,
}

fn default_true() -> bool {
    true
}

impl TryFrom<DagRepr> for Dag {
    type Error = Error;

    fn try_from(r: DagRepr) -> Result<Self> {
        if r.parents.len() != r.n {
            return Err(Error::Config(format!("dag declares {} nodes but lists {} parent sets", r.n, r.parents.len())));
        }
        if r.ordered {
            Dag::new(r.parents)
        } else {
            Dag::unordered(r.parents)
        }
    }
}

impl From<Dag> for DagRepr {
    fn from(d: Dag) -> Self {
        DagRepr { n: d.n, parents: d.parents, ordered: d.ordered }
    }
}

impl Dag {
    /// Ordered-mode DAG: every parent index must be smaller than its child.
    pub fn new(parents: Vec<Vec<usize>>) -> Result<Self> {
        let dag = Self::build(parents, true)?;
        for (j, pa) in dag.parents.iter().enumerate() {
            if let Some(&bad) = pa.iter().find(|&&p| p >= j) {
                return Err(Error::Cycle(format!(
                    "edge {bad} -> {j} violates the partial order i < j of ordered mode"
                )));
            }
        }
        Ok(dag)
    }

    /// Unordered-mode DAG: only acyclicity is enforced.
    pub fn unordered(parents: Vec<Vec<usize>>) -> Result<Self> {
        let dag = Self::build(parents, false)?;
        if dag.topological_order().len() != dag.n {
            return Err(Error::Cycle("parent sets induce a directed cycle".into()));
        }
        Ok(dag)
    }

    fn build(mut parents: Vec<Vec<usize>>, ordered: bool) -> Result<Self> {
        let n = parents.len();
        for (j, pa) in parents.iter_mut().enumerate() {
            pa.sort_unstable();
            pa.dedup();
            if let Some(&bad) = pa.iter().find(|&&p| p >= n) {
                return Err(Error::Config(format!("node {j} lists parent {bad} but the graph has {n} nodes")));
            }
            if pa.contains(&j) {
                return Err(Error::Cycle(format!("self-loop at node {j}")));
            }
        }
        Ok(Self { n, parents, ordered })
    }

    pub fn empty(n: usize) -> Self {
        Self { n, parents: vec![Vec::new(); n], ordered: true }
    }

    /// Builds a DAG from an edge list `(from, to)`; ordered mode is used when
    /// every edge respects the index order.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut parents = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Config(format!("edge {i} -> {j} out of range for {n} nodes")));
            }
            parents[j].push(i);
        }
        if edges.iter().all(|&(i, j)| i < j) {
            Self::new(parents)
        } else {
            Self::unordered(parents)
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_ordered(&self) -> bool {
        self.ordered
    }

    pub fn parents(&self, j: usize) -> &[usize] {
        &self.parents[j]
    }

    pub fn parent_sets(&self) -> &[Vec<usize>] {
        &self.parents
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.parents[j].binary_search(&i).is_ok()).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.parents[j].binary_search(&i).is_ok()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> =
            self.parents.iter().enumerate().flat_map(|(j, pa)| pa.iter().map(move |&i| (i, j))).collect();
        e.sort_unstable();
        e
    }

    pub fn edge_count(&self) -> usize {
        self.parents.iter().map(Vec::len).sum()
    }

    /// Kahn's algorithm, smallest available index first. Returns fewer than
    /// `n` nodes iff the graph has a cycle.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let children: Vec<Vec<usize>> = (0..self.n).map(|i| self.children(i)).collect();
        let mut ready: BTreeSet<usize> = (0..self.n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &c in &children[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        order
    }

    pub fn ancestors_of(&self, set: &[usize]) -> BTreeSet<usize> {
        let mut out: BTreeSet<usize> = set.iter().copied().collect();
        let mut queue: VecDeque<usize> = set.iter().copied().collect();
        while let Some(v) = queue.pop_front() {
            for &p in &self.parents[v] {
                if out.insert(p) {
                    queue.push_back(p);
                }
            }
        }
        out
    }

    /// Compact edge string such as `0->1,0->2`; `empty` for no edges.
    pub fn edge_string(&self) -> String {
        let e = self.edges();
        if e.is_empty() {
            return "empty".into();
        }
        e.iter().map(|(i, j)| format!("{i}->{j}")).collect::<Vec<_>>().join(",")
    }
}

/// Smooth scalar function given by samples on a grid, interpolated with
/// cubic Hermite splines (finite-difference slopes) and extended linearly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tabulated {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
}

impl Tabulated {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots.len() != values.len() {
            return Err(Error::Config("tabulated function needs >= 2 knots with matching values".into()));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("tabulated knots must be strictly increasing".into()));
        }
        Ok(Self { knots, values })
    }

    pub fn from_fn(lo: f64, hi: f64, count: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let knots: Vec<f64> = (0..count).map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64).collect();
        let values = knots.iter().map(|&x| f(x)).collect();
        Self::new(knots, values)
    }

    fn slope(&self, k: usize) -> f64 {
        let (x, y) = (&self.knots, &self.values);
        let last = x.len() - 1;
        if k == 0 {
            (y[1] - y[0]) / (x[1] - x[0])
        } else if k == last {
            (y[last] - y[last - 1]) / (x[last] - x[last - 1])
        } else {
            (y[k + 1] - y[k - 1]) / (x[k + 1] - x[k - 1])
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.eval_with_derivative(t).0
    }

    pub fn eval_with_derivative(&self, t: f64) -> (f64, f64) {
        let (x, y) = (&self.knots, &self.values);
        let last = x.len() - 1;
        if t <= x[0] {
            let m = self.slope(0);
            return (y[0] + m * (t - x[0]), m);
        }
        if t >= x[last] {
            let m = self.slope(last);
            return (y[last] + m * (t - x[last]), m);
        }
        let k = x.partition_point(|&v| v <= t) - 1;
        let h = x[k + 1] - x[k];
        let u = (t - x[k]) / h;
        let (m0, m1) = (self.slope(k) * h, self.slope(k + 1) * h);
        let (u2, u3) = (u * u, u * u * u);
        let value = (2.0 * u3 - 3.0 * u2 + 1.0) * y[k]
            + (u3 - 2.0 * u2 + u) * m0
            + (-2.0 * u3 + 3.0 * u2) * y[k + 1]
            + (u3 - u2) * m1;
        let dvalue = (6.0 * u2 - 6.0 * u) * y[k]
            + (3.0 * u2 - 4.0 * u + 1.0) * m0
            + (-6.0 * u2 + 6.0 * u) * y[k + 1]
            + (3.0 * u2 - 2.0 * u) * m1;
        (value, dvalue / h)
    }
}

/// Structural assignment of one node given its parents (in sorted parent order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Mechanism {
    /// `v = bias + weights·pa + sigma·u`
    LinearGaussian { weights: Vec<f64>, bias: f64, sigma: f64 },
    /// `v = bias + Σ_k terms[k](pa_k) + sigma·u`
    LocationScale { terms: Vec<Tabulated>, bias: f64, sigma: f64 },
    /// Deterministic `v = value + weights·pa`; with no weights this is a hard
    /// intervention `do(v = value)`.
    PointMass { weights: Vec<f64>, value: f64 },
}

impl Mechanism {
    pub fn gaussian(mean: f64, sigma: f64) -> Self {
        Mechanism::LinearGaussian { weights: Vec::new(), bias: mean, sigma }
    }

    pub fn linear_gaussian(weights: Vec<f64>, bias: f64, sigma: f64) -> Self {
        Mechanism::LinearGaussian { weights, bias, sigma }
    }

    pub fn constant(value: f64) -> Self {
        Mechanism::PointMass { weights: Vec::new(), value }
    }

    pub fn parent_count(&self) -> usize {
        match self {
            Mechanism::LinearGaussian { weights, .. } | Mechanism::PointMass { weights, .. } => weights.len(),
            Mechanism::LocationScale { terms, .. } => terms.len(),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        !matches!(self, Mechanism::PointMass { .. })
    }

    /// Noise scale; zero for point masses.
    pub fn sigma(&self) -> f64 {
        match self {
            Mechanism::LinearGaussian { sigma, .. } | Mechanism::LocationScale { sigma, .. } => *sigma,
            Mechanism::PointMass { .. } => 0.0,
        }
    }

    /// Conditional mean given parent values.
    pub fn location(&self, pa: &[f64]) -> f64 {
        match self {
            Mechanism::LinearGaussian { weights, bias, .. } => {
                bias + weights.iter().zip(pa).map(|(w, x)| w * x).sum::<f64>()
            }
            Mechanism::LocationScale { terms, bias, .. } => {
                bias + terms.iter().zip(pa).map(|(t, x)| t.eval(*x)).sum::<f64>()
            }
            Mechanism::PointMass { weights, value } => {
                value + weights.iter().zip(pa).map(|(w, x)| w * x).sum::<f64>()
            }
        }
    }

    pub fn assign(&self, pa: &[f64], noise: f64) -> f64 {
        self.location(pa) + self.sigma() * noise
    }

    pub fn log_density(&self, v: f64, pa: &[f64]) -> Option<f64> {
        self.is_stochastic().then(|| normal_log_pdf(v, self.location(pa), self.sigma()))
    }

    /// `∂/∂v log p(v | pa)`.
    pub fn d_log_density_dv(&self, v: f64, pa: &[f64]) -> Option<f64> {
        self.is_stochastic().then(|| {
            let s = self.sigma();
            -(v - self.location(pa)) / (s * s)
        })
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, Mechanism::LocationScale { .. })
    }

    /// Linear weights, for linear-Gaussian and point-mass kinds.
    pub fn linear_weights(&self) -> Option<(&[f64], f64)> {
        match self {
            Mechanism::LinearGaussian { weights, bias, .. } => Some((weights, *bias)),
            Mechanism::PointMass { weights, value } => Some((weights, *value)),
            Mechanism::LocationScale { .. } => None,
        }
    }

    fn validate(&self, node: usize, parent_count: usize) -> Result<()> {
        if self.parent_count() != parent_count {
            return Err(Error::Config(format!(
                "mechanism of node {node} expects {} parents but the graph gives {parent_count}",
                self.parent_count()
            )));
        }
        if self.is_stochastic() && !(self.sigma() > 0.0 && self.sigma().is_finite()) {
            return Err(Error::Config(format!("mechanism of node {node} needs a positive finite sigma")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScmRepr", into = "ScmRepr")]
pub struct Scm {
    dag: Dag,
    mechanisms: Vec<Mechanism>,
}

#[derive(Serialize, Deserialize)]
struct ScmRepr {
    dag: Dag,
    mechanisms: Vec<Mechanism>,
}

impl TryFrom<ScmRepr> for Scm {
    type Error = Error;

    fn try_from(r: ScmRepr) -> Result<Self> {
        Scm::new(r.dag, r.mechanisms)
    }
}

impl From<Scm> for ScmRepr {
    fn from(s: Scm) -> Self {
        ScmRepr { dag: s.dag, mechanisms: s.mechanisms }
    }
}

impl Scm {
    pub fn new(dag: Dag, mechanisms: Vec<Mechanism>) -> Result<Self> {
        if mechanisms.len() != dag.n() {
            return Err(Error::Config(format!("{} mechanisms for {} nodes", mechanisms.len(), dag.n())));
        }
        for (j, m) in mechanisms.iter().enumerate() {
            m.validate(j, dag.parents(j).len())?;
        }
        Ok(Self { dag, mechanisms })
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn n(&self) -> usize {
        self.dag.n()
    }

    pub fn mechanisms(&self) -> &[Mechanism] {
        &self.mechanisms
    }

    pub fn mechanism(&self, j: usize) -> &Mechanism {
        &self.mechanisms[j]
    }

    pub fn parent_values(&self, j: usize, v: &[f64]) -> Vec<f64> {
        self.dag.parents(j).iter().map(|&p| v[p]).collect()
    }

    /// Propagates standardized noises through the structural equations.
    pub fn solve(&self, noise: &[f64]) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.n()];
        for j in self.dag.topological_order() {
            let pa = self.parent_values(j, &v);
            let x = self.mechanisms[j].assign(&pa, noise[j]);
            if !x.is_finite() {
                return Err(Error::NonFinite { node: j });
            }
            v[j] = x;
        }
        Ok(v)
    }

    pub fn log_conditional(&self, j: usize, v: &[f64]) -> Result<f64> {
        self.mechanisms[j].log_density(v[j], &self.parent_values(j, v)).ok_or(Error::UnsupportedDensity { node: j })
    }

    /// Mean and covariance of the induced Gaussian when every mechanism is
    /// linear (point masses contribute zero variance).
    pub fn linear_gaussian_moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let n = self.n();
        let mut b = DMatrix::zeros(n, n);
        let mut bias = DVector::zeros(n);
        let mut d = DMatrix::zeros(n, n);
        for j in 0..n {
            let (w, c) = self.mechanisms[j].linear_weights()?;
            for (&p, &wk) in self.dag.parents(j).iter().zip(w) {
                b[(j, p)] = wk;
            }
            bias[j] = c;
            d[(j, j)] = self.mechanisms[j].sigma();
        }
        let a = (DMatrix::identity(n, n) - b).try_inverse()?;
        let mean = &a * bias;
        let ad = &a * d;
        let cov = &ad * ad.transpose();
        Some((mean, cov))
    }

    /// Whether every mechanism is linear-Gaussian (no point masses, no
    /// tabulated conditioners).
    pub fn is_linear_gaussian(&self) -> bool {
        self.mechanisms.iter().all(|m| matches!(m, Mechanism::LinearGaussian { .. }))
    }
}

/// One replaced structural equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionTarget {
    pub node: usize,
    pub replacement: Mechanism,
    /// Parent set of the replacement; must be empty for perfect interventions.
    #[serde(default)]
    pub parents: Vec<usize>,
    pub perfect: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub targets: Vec<InterventionTarget>,
}

impl InterventionSpec {
    pub fn observational() -> Self {
        Self::default()
    }

    /// Perfect (parentless) replacement of a single node.
    pub fn perfect(node: usize, replacement: Mechanism) -> Self {
        Self { targets: vec![InterventionTarget { node, replacement, parents: Vec::new(), perfect: true }] }
    }

    /// Hard intervention `do(V_node = value)`.
    pub fn hard(node: usize, value: f64) -> Self {
        Self::perfect(node, Mechanism::constant(value))
    }

    /// Soft replacement keeping an explicit parent set.
    pub fn soft(node: usize, parents: Vec<usize>, replacement: Mechanism) -> Self {
        Self { targets: vec![InterventionTarget { node, replacement, parents, perfect: false }] }
    }

    pub fn and(mut self, other: InterventionSpec) -> Self {
        self.targets.extend(other.targets);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn target_nodes(&self) -> Vec<usize> {
        self.targets.iter().map(|t| t.node).collect()
    }
}

/// Replaces the targeted structural equations; all other mechanisms are
/// carried over unchanged.
pub fn apply_intervention(scm: &Scm, spec: &InterventionSpec) -> Result<Scm> {
    let n = scm.n();
    let mut parents: Vec<Vec<usize>> = scm.dag.parents.clone();
    let mut mechanisms = scm.mechanisms.clone();
    let mut seen = BTreeSet::new();
    for t in &spec.targets {
        if t.node >= n {
            return Err(Error::Config(format!("intervention target {} out of range", t.node)));
        }
        if !seen.insert(t.node) {
            return Err(Error::Config(format!("intervention target {} listed twice", t.node)));
        }
        if t.perfect && !t.parents.is_empty() {
            return Err(Error::Config(format!("perfect intervention on {} must have no parents", t.node)));
        }
        let mut pa = t.parents.clone();
        pa.sort_unstable();
        pa.dedup();
        if pa.len() != t.parents.len() {
            return Err(Error::Config(format!("replacement parents of {} contain duplicates", t.node)));
        }
        parents[t.node] = pa;
        mechanisms[t.node] = t.replacement.clone();
    }
    let ordered = scm.dag.ordered && parents.iter().enumerate().all(|(j, pa)| pa.iter().all(|&p| p < j));
    let dag = if ordered { Dag::new(parents)? } else { Dag::unordered(parents)? };
    Scm::new(dag, mechanisms)
}

/// Draws `count` i.i.d. rows from the entailed distribution.
pub fn ancestral_sample(scm: &Scm, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = rng_from_seed(seed);
    ancestral_sample_with(scm, count, &mut rng)
}

pub fn ancestral_sample_with<R: Rng + ?Sized>(scm: &Scm, count: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let n = scm.n();
    let order = scm.dag.topological_order();
    let mut out = DMatrix::zeros(count, n);
    let mut noise = vec![0.0; n];
    let mut v = vec![0.0; n];
    for r in 0..count {
        for u in noise.iter_mut() {
            *u = rng.sample(StandardNormal);
        }
        for &j in &order {
            let pa = scm.parent_values(j, &v);
            let x = scm.mechanisms[j].assign(&pa, noise[j]);
            if !x.is_finite() {
                return Err(Error::NonFinite { node: j });
            }
            v[j] = x;
        }
        for j in 0..n {
            out[(r, j)] = v[j];
        }
    }
    Ok(out)
}

/// Causal Markov factorization: sum of per-node conditional log-densities.
pub fn log_density(scm: &Scm, v: &[f64]) -> Result<f64> {
    if v.len() != scm.n() {
        return Err(Error::Dimension(format!("point of length {} for {} nodes", v.len(), scm.n())));
    }
    (0..scm.n()).map(|j| scm.log_conditional(j, v)).sum()
}

/// Abduction, action, prediction for a fully observed unit.
pub fn counterfactual(scm: &Scm, evidence: &[f64], spec: &InterventionSpec) -> Result<Vec<f64>> {
    let n = scm.n();
    if evidence.len() != n {
        return Err(Error::Dimension(format!("evidence of length {} for {n} nodes", evidence.len())));
    }
    let mut noise = vec![0.0; n];
    for j in 0..n {
        let m = &scm.mechanisms[j];
        let loc = m.location(&scm.parent_values(j, evidence));
        if m.is_stochastic() {
            noise[j] = (evidence[j] - loc) / m.sigma();
        } else if (evidence[j] - loc).abs() > 1e-12 * (1.0 + loc.abs()) {
            return Err(Error::Abduction {
                node: j,
                reason: format!("evidence {} contradicts deterministic value {loc}", evidence[j]),
            });
        }
    }
    let post = apply_intervention(scm, spec)?;
    post.solve(&noise)
}

/// d-separation of `i` and `j` given `given` (reachability / Bayes-ball).
pub fn d_separated(dag: &Dag, i: usize, j: usize, given: &[usize]) -> Result<bool> {
    let n = dag.n();
    if i >= n || j >= n || given.iter().any(|&s| s >= n) {
        return Err(Error::Config("d-separation query references a missing node".into()));
    }
    if i == j || given.contains(&i) || given.contains(&j) {
        return Err(Error::Config("d-separation query needs distinct endpoints outside the conditioning set".into()));
    }
    let in_given: Vec<bool> = (0..n).map(|v| given.contains(&v)).collect();
    let anc = dag.ancestors_of(given);
    let children: Vec<Vec<usize>> = (0..n).map(|v| dag.children(v)).collect();

    // (node, arrived_from_child): true = travelling up, false = travelling down.
    let mut visited = vec![[false; 2]; n];
    let mut queue = VecDeque::from([(i, true)]);
    while let Some((v, up)) = queue.pop_front() {
        let slot = usize::from(up);
        if visited[v][slot] {
            continue;
        }
        visited[v][slot] = true;
        if v == j && !in_given[v] {
            return Ok(false);
        }
        if up {
            if !in_given[v] {
                queue.extend(dag.parents(v).iter().map(|&p| (p, true)));
                queue.extend(children[v].iter().map(|&c| (c, false)));
            }
        } else {
            if !in_given[v] {
                queue.extend(children[v].iter().map(|&c| (c, false)));
            }
            if anc.contains(&v) {
                queue.extend(dag.parents(v).iter().map(|&p| (p, true)));
            }
        }
    }
    Ok(true)
}

pub const MAX_ENUMERATION_NODES: usize = 4;

/// All labeled DAGs on `n <= 4` nodes (unordered mode), without duplicates.
///
/// Each unordered pair is assigned one of {no edge, i->j, j->i}; cyclic
/// assignments are discarded.
pub fn enumerate_dags(n: usize) -> Result<Vec<Dag>> {
    if n == 0 || n > MAX_ENUMERATION_NODES {
        return Err(Error::Capacity(format!(
            "DAG enumeration supports 1..={MAX_ENUMERATION_NODES} nodes, got {n}"
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let total = 3usize.pow(pairs.len() as u32);
    let mut out = Vec::new();
    for code in 0..total {
        let mut c = code;
        let mut parents = vec![Vec::new(); n];
        for &(i, j) in &pairs {
            match c % 3 {
                1 => parents[j].push(i),
                2 => parents[i].push(j),
                _ => {}
            }
            c /= 3;
        }
        if let Ok(dag) = Dag::unordered(parents) {
            out.push(dag);
        }
    }
    Ok(out)
}

/// The three-node linear SCM `V1 := U1, V2 := V1 + U2, V3 := V1 + V2 + U3`
/// with standard normal noises.
pub fn three_node_linear_example() -> Scm {
    let dag = Dag::new(vec![vec![], vec![0], vec![0, 1]]).expect("valid example graph");
    Scm::new(
        dag,
        vec![
            Mechanism::gaussian(0.0, 1.0),
            Mechanism::linear_gaussian(vec![1.0], 0.0, 1.0),
            Mechanism::linear_gaussian(vec![1.0, 1.0], 0.0, 1.0),
        ],
    )
    .expect("valid example scm")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::LN_2PI;

    fn chain() -> Dag {
        Dag::new(vec![vec![], vec![0], vec![1]]).unwrap()
    }

    #[test]
    fn ordered_mode_rejects_backward_edges() {
        assert!(matches!(Dag::new(vec![vec![1], vec![]]), Err(Error::Cycle(_))));
        assert!(Dag::unordered(vec![vec![1], vec![]]).is_ok());
        assert!(matches!(Dag::unordered(vec![vec![1], vec![0]]), Err(Error::Cycle(_))));
    }

    #[test]
    fn standard_normal_node_density() {
        let scm = Scm::new(Dag::empty(1), vec![Mechanism::gaussian(0.0, 1.0)]).unwrap();
        assert!((log_density(&scm, &[0.0]).unwrap() + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn point_mass_density_is_refused() {
        let scm = Scm::new(Dag::empty(1), vec![Mechanism::constant(1.0)]).unwrap();
        assert!(matches!(log_density(&scm, &[1.0]), Err(Error::UnsupportedDensity { node: 0 })));
    }

    #[test]
    fn deterministic_chain_samples() {
        let dag = Dag::new(vec![vec![], vec![0]]).unwrap();
        let scm = Scm::new(
            dag,
            vec![Mechanism::constant(1.0), Mechanism::PointMass { weights: vec![2.0], value: 0.0 }],
        )
        .unwrap();
        let s = ancestral_sample(&scm, 50, 9).unwrap();
        for r in 0..50 {
            assert_eq!((s[(r, 0)], s[(r, 1)]), (1.0, 2.0));
        }
    }

    #[test]
    fn non_finite_output_names_the_node() {
        let dag = Dag::new(vec![vec![], vec![0]]).unwrap();
        let scm = Scm::new(
            dag,
            vec![Mechanism::constant(f64::MAX), Mechanism::PointMass { weights: vec![10.0], value: 0.0 }],
        )
        .unwrap();
        assert!(matches!(ancestral_sample(&scm, 1, 0), Err(Error::NonFinite { node: 1 })));
    }

    #[test]
    fn counterfactual_examples() {
        let scm = three_node_linear_example();
        let cf = counterfactual(&scm, &[1.0, 2.0, 2.0], &InterventionSpec::hard(1, 3.0)).unwrap();
        assert_eq!(cf, vec![1.0, 3.0, 3.0]);
        let cf = counterfactual(&scm, &[1.0, 2.0, 2.0], &InterventionSpec::hard(0, 0.0)).unwrap();
        assert_eq!(cf, vec![0.0, 1.0, 0.0]);
        let cf = counterfactual(&scm, &[1.0, 2.0, 2.0], &InterventionSpec::observational()).unwrap();
        assert_eq!(cf, vec![1.0, 2.0, 2.0]);
    }

    #[test]
    fn inconsistent_evidence_fails_abduction() {
        let post = apply_intervention(&three_node_linear_example(), &InterventionSpec::hard(1, 3.0)).unwrap();
        let err = counterfactual(&post, &[0.0, 1.0, 0.0], &InterventionSpec::observational());
        assert!(matches!(err, Err(Error::Abduction { node: 1, .. })));
    }

    #[test]
    fn perfect_intervention_removes_parents() {
        let scm = three_node_linear_example();
        let post = apply_intervention(&scm, &InterventionSpec::hard(2, 0.5)).unwrap();
        assert!(post.dag().parents(2).is_empty());
        assert_eq!(post.mechanism(0), scm.mechanism(0));
        assert_eq!(post.mechanism(1), scm.mechanism(1));
        let same = apply_intervention(&scm, &InterventionSpec::observational()).unwrap();
        assert_eq!(same, scm);
    }

    #[test]
    fn cyclic_replacement_is_rejected() {
        let scm = Scm::new(chain(), vec![
            Mechanism::gaussian(0.0, 1.0),
            Mechanism::linear_gaussian(vec![1.0], 0.0, 1.0),
            Mechanism::linear_gaussian(vec![1.0], 0.0, 1.0),
        ])
        .unwrap();
        let spec = InterventionSpec::soft(0, vec![2], Mechanism::linear_gaussian(vec![1.0], 0.0, 1.0));
        assert!(matches!(apply_intervention(&scm, &spec), Err(Error::Cycle(_))));
    }

    #[test]
    fn duplicate_targets_are_rejected() {
        let scm = three_node_linear_example();
        let spec = InterventionSpec::hard(1, 0.0).and(InterventionSpec::hard(1, 2.0));
        assert!(matches!(apply_intervention(&scm, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn d_separation_basics() {
        assert!(d_separated(&chain(), 0, 2, &[1]).unwrap());
        assert!(!d_separated(&chain(), 0, 2, &[]).unwrap());
        let collider = Dag::new(vec![vec![], vec![], vec![0, 1]]).unwrap();
        assert!(d_separated(&collider, 0, 1, &[]).unwrap());
        assert!(!d_separated(&collider, 0, 1, &[2]).unwrap());
        let full = three_node_linear_example();
        for (i, j, k) in [(0, 1, 2), (0, 2, 1), (1, 2, 0)] {
            assert!(!d_separated(full.dag(), i, j, &[]).unwrap());
            assert!(!d_separated(full.dag(), i, j, &[k]).unwrap());
        }
    }

    #[test]
    fn dag_enumeration_guard() {
        assert!(matches!(enumerate_dags(5), Err(Error::Capacity(_))));
        assert_eq!(enumerate_dags(1).unwrap().len(), 1);
    }

    #[test]
    fn tabulated_interpolates_smoothly() {
        let t = Tabulated::from_fn(-3.0, 3.0, 61, f64::sin).unwrap();
        for k in 0..50 {
            let x = -2.9 + 0.117 * k as f64;
            let (v, d) = t.eval_with_derivative(x);
            assert!((v - x.sin()).abs() < 2e-4);
            assert!((d - x.cos()).abs() < 5e-3);
        }
    }

    #[test]
    fn descriptor_roundtrip() {
        let scm = three_node_linear_example();
        let json = serde_json::to_string(&scm).unwrap();
        assert!(json.contains("\"kind\":\"linear-gaussian\""));
        let back: Scm = serde_json::from_str(&json).unwrap();
        assert_eq!(back, scm);
        let bad = r#"{"dag":{"n":2,"parents":[[1],[0]],"ordered":false},"mechanisms":[]}"#;
        assert!(serde_json::from_str::<Scm>(bad).is_err());
    }
}
