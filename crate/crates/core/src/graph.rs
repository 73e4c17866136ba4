//! Sparse data-graph execution engine.
//!
//! Three execution shapes: vertex-parallel maps, edge-parallel maps, and
//! bulk-synchronous message passing. In a message-passing round every vertex
//! gathers from the previous round's snapshot and applies into a fresh
//! payload map, so the result never depends on scheduling or thread count.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type VertexId = u32;

/// Undirected edge key, always stored as `(low, high)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeKey {
    pub low: VertexId,
    pub high: VertexId,
}

impl EdgeKey {
    pub fn new(a: VertexId, b: VertexId) -> Result<Self, GraphError> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Ok(EdgeKey { low: a, high: b }),
            std::cmp::Ordering::Greater => Ok(EdgeKey { low: b, high: a }),
            std::cmp::Ordering::Equal => Err(GraphError::SelfLoop(a)),
        }
    }

    pub fn other(&self, v: VertexId) -> VertexId {
        if v == self.low {
            self.high
        } else {
            self.low
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("self-loop on vertex {0}")]
    SelfLoop(VertexId),
    #[error("unknown vertex {0}")]
    UnknownVertex(VertexId),
    #[error("duplicate vertex {0}")]
    DuplicateVertex(VertexId),
    #[error("{} vertex update(s) failed ({completed} completed): {failures:?}", failures.len())]
    VertexFailure {
        failures: Vec<(VertexId, String)>,
        completed: usize,
    },
    #[error("{} edge update(s) failed ({completed} completed): {failures:?}", failures.len())]
    EdgeFailure {
        failures: Vec<(EdgeKey, String)>,
        completed: usize,
    },
    #[error("non-finite residual in round {round} at vertex {vertex}")]
    NonFiniteResidual { round: usize, vertex: VertexId },
    #[error("max_rounds must be at least 1")]
    ZeroRounds,
    #[error("halt tolerance must be non-negative, got {0}")]
    NegativeTolerance(f64),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataGraph<V, E> {
    vertices: BTreeMap<VertexId, V>,
    edges: BTreeMap<EdgeKey, E>,
    adjacency: BTreeMap<VertexId, BTreeSet<VertexId>>,
}

impl<V, E> Default for DataGraph<V, E> {
    fn default() -> Self {
        DataGraph {
            vertices: BTreeMap::new(),
            edges: BTreeMap::new(),
            adjacency: BTreeMap::new(),
        }
    }
}

impl<V, E> DataGraph<V, E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_vertex(&mut self, id: VertexId, payload: V) -> Result<(), GraphError> {
        if self.vertices.contains_key(&id) {
            return Err(GraphError::DuplicateVertex(id));
        }
        self.vertices.insert(id, payload);
        self.adjacency.entry(id).or_default();
        Ok(())
    }

    /// Inserts or replaces the edge between `a` and `b`.
    pub fn add_edge(&mut self, a: VertexId, b: VertexId, payload: E) -> Result<EdgeKey, GraphError> {
        let key = EdgeKey::new(a, b)?;
        for v in [a, b] {
            if !self.vertices.contains_key(&v) {
                return Err(GraphError::UnknownVertex(v));
            }
        }
        self.edges.insert(key, payload);
        self.adjacency.entry(a).or_default().insert(b);
        self.adjacency.entry(b).or_default().insert(a);
        Ok(key)
    }

    pub fn vertex(&self, id: VertexId) -> Option<&V> {
        self.vertices.get(&id)
    }

    pub fn vertices(&self) -> &BTreeMap<VertexId, V> {
        &self.vertices
    }

    pub fn edge(&self, a: VertexId, b: VertexId) -> Option<&E> {
        EdgeKey::new(a, b).ok().and_then(|k| self.edges.get(&k))
    }

    pub fn edges(&self) -> &BTreeMap<EdgeKey, E> {
        &self.edges
    }

    pub fn neighbors(&self, id: VertexId) -> impl Iterator<Item = VertexId> + '_ {
        self.adjacency.get(&id).into_iter().flatten().copied()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<VertexId>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &start in self.vertices.keys() {
            if !seen.insert(start) {
                continue;
            }
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for n in self.neighbors(v) {
                    if seen.insert(n) {
                        comp.push(n);
                        queue.push_back(n);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }

    /// Greedy colouring in id order; adjacent vertices never share a colour.
    pub fn greedy_coloring(&self) -> BTreeMap<VertexId, usize> {
        let mut colors = BTreeMap::new();
        for &v in self.vertices.keys() {
            let used: BTreeSet<usize> = self.neighbors(v).filter_map(|n| colors.get(&n).copied()).collect();
            let c = (0..).find(|c| !used.contains(c)).unwrap();
            colors.insert(v, c);
        }
        colors
    }

    pub fn into_parts(self) -> (BTreeMap<VertexId, V>, BTreeMap<EdgeKey, E>) {
        (self.vertices, self.edges)
    }

    /// Same topology with new edge payloads; edges mapped to `None` are dropped.
    pub fn filter_map_edges<F>(self, mut f: impl FnMut(EdgeKey, E) -> Option<F>) -> DataGraph<V, F> {
        let mut g = DataGraph {
            vertices: self.vertices,
            edges: BTreeMap::new(),
            adjacency: BTreeMap::new(),
        };
        for &v in g.vertices.keys() {
            g.adjacency.insert(v, BTreeSet::new());
        }
        for (k, e) in self.edges {
            if let Some(p) = f(k, e) {
                g.edges.insert(k, p);
                g.adjacency.get_mut(&k.low).unwrap().insert(k.high);
                g.adjacency.get_mut(&k.high).unwrap().insert(k.low);
            }
        }
        g
    }
}

/// What a vertex sees of one neighbour during gather.
pub struct Neighbor<'a, V, E> {
    pub id: VertexId,
    pub payload: &'a V,
    pub edge_key: EdgeKey,
    pub edge: &'a E,
}

/// A gather/apply computation run in bulk-synchronous rounds.
///
/// `gather` only reads; `apply` returns the vertex's next payload together
/// with a non-negative local residual. The run halts once the largest
/// residual of a round falls below [`VertexProgram::tolerance`].
pub trait VertexProgram<V, E>: Sync {
    type Summary: Send;

    fn gather(&self, round: usize, id: VertexId, vertex: &V, neighbors: &[Neighbor<'_, V, E>]) -> Self::Summary;

    fn apply(&self, round: usize, id: VertexId, vertex: &V, summary: Self::Summary) -> (V, f64);

    fn tolerance(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub rounds: usize,
    pub final_residual: f64,
    pub residual_trace: Vec<f64>,
    pub converged: bool,
}

/// Runs graph computations on a dedicated thread pool.
pub struct Executor {
    pool: rayon::ThreadPool,
}

impl Executor {
    pub fn new(threads: usize) -> Result<Self, GraphError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| GraphError::Pool(e.to_string()))?;
        Ok(Executor { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Runs `f` inside this executor's pool, so nested rayon work uses it.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    pub fn run_vertex_parallel<V, E, Err>(
        &self,
        graph: DataGraph<V, E>,
        f: impl Fn(VertexId, &V) -> Result<V, Err> + Sync,
    ) -> Result<DataGraph<V, E>, GraphError>
    where
        V: Send + Sync,
        E: Send,
        Err: std::fmt::Display + Send,
    {
        let DataGraph {
            vertices,
            edges,
            adjacency,
        } = graph;
        let items: Vec<(VertexId, V)> = vertices.into_iter().collect();
        let results: Vec<(VertexId, Result<V, Err>)> = self
            .pool
            .install(|| items.par_iter().map(|(id, v)| (*id, f(*id, v))).collect());
        let mut out = BTreeMap::new();
        let mut failures = Vec::new();
        for (id, r) in results {
            match r {
                Ok(v) => {
                    out.insert(id, v);
                }
                Err(e) => failures.push((id, e.to_string())),
            }
        }
        if !failures.is_empty() {
            return Err(GraphError::VertexFailure {
                completed: out.len(),
                failures,
            });
        }
        Ok(DataGraph {
            vertices: out,
            edges,
            adjacency,
        })
    }

    /// Maps each edge, with read access to both endpoint payloads.
    pub fn run_edge_parallel<V, E, F, Err>(
        &self,
        graph: DataGraph<V, E>,
        g: impl Fn(EdgeKey, &E, &V, &V) -> Result<F, Err> + Sync,
    ) -> Result<DataGraph<V, F>, GraphError>
    where
        V: Send + Sync,
        E: Send + Sync,
        F: Send,
        Err: std::fmt::Display + Send,
    {
        let DataGraph {
            vertices,
            edges,
            adjacency,
        } = graph;
        let items: Vec<(EdgeKey, E)> = edges.into_iter().collect();
        let results: Vec<(EdgeKey, Result<F, Err>)> = self.pool.install(|| {
            items
                .par_iter()
                .map(|(k, e)| (*k, g(*k, e, &vertices[&k.low], &vertices[&k.high])))
                .collect()
        });
        let mut out = BTreeMap::new();
        let mut failures = Vec::new();
        for (k, r) in results {
            match r {
                Ok(e) => {
                    out.insert(k, e);
                }
                Err(e) => failures.push((k, e.to_string())),
            }
        }
        if !failures.is_empty() {
            return Err(GraphError::EdgeFailure {
                completed: out.len(),
                failures,
            });
        }
        Ok(DataGraph {
            vertices,
            edges: out,
            adjacency,
        })
    }

    pub fn run_message_passing<V, E, P>(
        &self,
        graph: DataGraph<V, E>,
        program: &P,
        max_rounds: usize,
    ) -> Result<(DataGraph<V, E>, ExecutionReport), GraphError>
    where
        V: Send + Sync,
        E: Send + Sync,
        P: VertexProgram<V, E>,
    {
        self.run_message_passing_observed(graph, program, max_rounds, |_, _| {})
    }

    /// Like [`Executor::run_message_passing`], calling `observer` with the
    /// graph state after every round.
    pub fn run_message_passing_observed<V, E, P>(
        &self,
        mut graph: DataGraph<V, E>,
        program: &P,
        max_rounds: usize,
        mut observer: impl FnMut(usize, &DataGraph<V, E>),
    ) -> Result<(DataGraph<V, E>, ExecutionReport), GraphError>
    where
        V: Send + Sync,
        E: Send + Sync,
        P: VertexProgram<V, E>,
    {
        if max_rounds == 0 {
            return Err(GraphError::ZeroRounds);
        }
        let tol = program.tolerance();
        if !(tol >= 0.0) {
            return Err(GraphError::NegativeTolerance(tol));
        }
        let mut trace = Vec::new();
        let mut converged = false;
        for round in 0..max_rounds {
            let snapshot = &graph;
            let ids: Vec<VertexId> = snapshot.vertices.keys().copied().collect();
            let updates: Vec<(VertexId, V, f64)> = self.pool.install(|| {
                ids.par_iter()
                    .map(|&id| {
                        let vertex = &snapshot.vertices[&id];
                        let neighbors: Vec<Neighbor<'_, V, E>> = snapshot
                            .neighbors(id)
                            .map(|n| {
                                let edge_key = EdgeKey::new(id, n).expect("no self loops");
                                Neighbor {
                                    id: n,
                                    payload: &snapshot.vertices[&n],
                                    edge_key,
                                    edge: &snapshot.edges[&edge_key],
                                }
                            })
                            .collect();
                        let summary = program.gather(round, id, vertex, &neighbors);
                        let (next, residual) = program.apply(round, id, vertex, summary);
                        (id, next, residual)
                    })
                    .collect()
            });
            let mut max_residual: f64 = 0.0;
            let mut next = BTreeMap::new();
            for (id, v, r) in updates {
                if !r.is_finite() {
                    return Err(GraphError::NonFiniteResidual { round, vertex: id });
                }
                max_residual = max_residual.max(r.abs());
                next.insert(id, v);
            }
            graph.vertices = next;
            trace.push(max_residual);
            observer(round, &graph);
            if max_residual < tol || (tol == 0.0 && max_residual == 0.0) {
                converged = true;
                break;
            }
        }
        let report = ExecutionReport {
            rounds: trace.len(),
            final_residual: *trace.last().unwrap(),
            residual_trace: trace,
            converged,
        };
        Ok((graph, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph(values: &[f64]) -> DataGraph<f64, ()> {
        let mut g = DataGraph::new();
        for (i, v) in values.iter().enumerate() {
            g.add_vertex(i as VertexId, *v).unwrap();
        }
        for i in 1..values.len() {
            g.add_edge(i as VertexId - 1, i as VertexId, ()).unwrap();
        }
        g
    }

    struct Identity;
    impl VertexProgram<f64, ()> for Identity {
        type Summary = ();
        fn gather(&self, _: usize, _: VertexId, _: &f64, _: &[Neighbor<'_, f64, ()>]) {}
        fn apply(&self, _: usize, _: VertexId, v: &f64, _: ()) -> (f64, f64) {
            (*v, 0.0)
        }
        fn tolerance(&self) -> f64 {
            1e-12
        }
    }

    struct Average;
    impl VertexProgram<f64, ()> for Average {
        type Summary = (f64, usize);
        fn gather(&self, _: usize, _: VertexId, _: &f64, ns: &[Neighbor<'_, f64, ()>]) -> (f64, usize) {
            (ns.iter().map(|n| *n.payload).sum(), ns.len())
        }
        fn apply(&self, _: usize, _: VertexId, v: &f64, (sum, n): (f64, usize)) -> (f64, f64) {
            let next = (v + sum) / (n as f64 + 1.0);
            (next, (next - v).abs())
        }
        fn tolerance(&self) -> f64 {
            1e-9
        }
    }

    #[test]
    fn graph_structure_invariants() {
        let mut g: DataGraph<(), ()> = DataGraph::new();
        g.add_vertex(0, ()).unwrap();
        g.add_vertex(1, ()).unwrap();
        assert_eq!(g.add_edge(1, 1, ()), Err(GraphError::SelfLoop(1)));
        assert_eq!(g.add_edge(0, 7, ()), Err(GraphError::UnknownVertex(7)));
        assert_eq!(g.add_vertex(0, ()), Err(GraphError::DuplicateVertex(0)));
        let k = g.add_edge(1, 0, ()).unwrap();
        assert_eq!(k, EdgeKey { low: 0, high: 1 });
        assert!(g.edge(0, 1).is_some() && g.edge(1, 0).is_some());
        assert_eq!(g.neighbors(0).collect::<Vec<_>>(), vec![1]);
        g.add_vertex(5, ()).unwrap();
        assert_eq!(g.components(), vec![vec![0, 1], vec![5]]);
        let colors = g.greedy_coloring();
        assert_ne!(colors[&0], colors[&1]);
    }

    #[test]
    fn vertex_map_identity_and_failures() {
        let ex = Executor::new(2).unwrap();
        let g = path_graph(&[1.0, 2.0, 3.0]);
        let same = ex.run_vertex_parallel(g.clone(), |_, v| Ok::<_, String>(*v)).unwrap();
        assert_eq!(same, g);

        let g = path_graph(&[0.0; 8]);
        let err = ex
            .run_vertex_parallel(g, |id, v| if id == 3 { Err("boom") } else { Ok(*v + 1.0) })
            .unwrap_err();
        assert_eq!(
            err,
            GraphError::VertexFailure {
                failures: vec![(3, "boom".into())],
                completed: 7
            }
        );
    }

    #[test]
    fn vertex_map_is_thread_count_independent() {
        let g = path_graph(&(0..8).map(f64::from).collect::<Vec<_>>());
        let f = |id: VertexId, v: &f64| Ok::<_, String>((v * 1.7 + id as f64).sin());
        let one = Executor::new(1).unwrap().run_vertex_parallel(g.clone(), f).unwrap();
        let four = Executor::new(4).unwrap().run_vertex_parallel(g, f).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn edge_maps() {
        let ex = Executor::new(3).unwrap();
        let empty: DataGraph<f64, ()> = path_graph(&[1.0]);
        let out = ex.run_edge_parallel(empty, |_, _, _, _| Ok::<_, String>(9u8)).unwrap();
        assert_eq!(out.edge_count(), 0);

        let g = path_graph(&[1.0, 2.0, 3.0, 4.0]);
        let out = ex.run_edge_parallel(g.clone(), |_, _, _, _| Ok::<_, String>(7u8)).unwrap();
        assert!(out.edges().values().all(|&e| e == 7));

        let g2 = ex
            .run_edge_parallel(g.clone(), |k, _, a, b| Ok::<_, String>(a * b + k.low as f64))
            .unwrap();
        let serial = Executor::new(1)
            .unwrap()
            .run_edge_parallel(g, |k, _, a, b| Ok::<_, String>(a * b + k.low as f64))
            .unwrap();
        assert_eq!(g2, serial);
    }

    #[test]
    fn identity_program_halts_after_one_round() {
        let ex = Executor::new(2).unwrap();
        let (g, report) = ex.run_message_passing(path_graph(&[1.0, 5.0]), &Identity, 10).unwrap();
        assert_eq!(report.rounds, 1);
        assert_eq!(report.final_residual, 0.0);
        assert!(report.converged);
        assert_eq!(g.vertex(1), Some(&5.0));
    }

    #[test]
    fn zero_rounds_rejected() {
        let ex = Executor::new(1).unwrap();
        assert_eq!(
            ex.run_message_passing(path_graph(&[0.0]), &Identity, 0).unwrap_err(),
            GraphError::ZeroRounds
        );
    }

    #[test]
    fn averaging_on_two_vertex_path_matches_hand_iteration() {
        // Hand iteration of v' = mean(self, neighbour) on v0 = 0, v1 = 6:
        // one round maps (0, 6) to (3, 3), which is then a fixed point.
        // On a three-vertex path (0, 6, 0) the rounds are:
        //   r1: (3, 2, 3)        residual 4
        //   r2: (2.5, 8/3, 2.5)  residual 2/3
        //   r3: (31/12, 23/9, 31/12) residual 1/9
        //   r4: residual 1/54, r5: residual 1/324
        let ex = Executor::new(2).unwrap();
        let (g, report) = ex.run_message_passing(path_graph(&[0.0, 6.0]), &Average, 50).unwrap();
        assert_eq!(g.vertex(0), Some(&3.0));
        assert_eq!(g.vertex(1), Some(&3.0));
        assert_eq!(report.residual_trace[0], 3.0);

        let (_, report) = ex.run_message_passing(path_graph(&[0.0, 6.0, 0.0]), &Average, 5).unwrap();
        let expected = [4.0, 2.0 / 3.0, 1.0 / 9.0, 1.0 / 54.0, 1.0 / 324.0];
        assert_eq!(report.rounds, 5);
        for (got, want) in report.residual_trace.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(report.residual_trace.windows(2).all(|w| w[1] < w[0]));
    }

    struct Marker;
    // Each vertex payload is (round it was last written, value). Gather
    // records the rounds observed in neighbours; a neighbour written in the
    // current round would betray a broken snapshot.
    impl VertexProgram<(usize, u64), ()> for Marker {
        type Summary = bool;
        fn gather(&self, round: usize, _: VertexId, _: &(usize, u64), ns: &[Neighbor<'_, (usize, u64), ()>]) -> bool {
            ns.iter().all(|n| round == 0 || n.payload.0 == round - 1)
        }
        fn apply(&self, round: usize, _: VertexId, v: &(usize, u64), isolated: bool) -> ((usize, u64), f64) {
            assert!(isolated, "gather saw a write from the current round");
            ((round, v.1 + 1), 1.0)
        }
        fn tolerance(&self) -> f64 {
            0.5
        }
    }

    #[test]
    fn rounds_are_isolated() {
        let mut g = DataGraph::new();
        for i in 0..30 {
            g.add_vertex(i, (0, 0)).unwrap();
        }
        for i in 0..30u32 {
            g.add_edge(i, (i + 1) % 30, ()).unwrap();
            g.add_edge(i, (i * 7 + 3) % 30, ()).ok();
        }
        let ex = Executor::new(8).unwrap();
        let (g, report) = ex.run_message_passing(g, &Marker, 12).unwrap();
        assert_eq!(report.rounds, 12);
        assert!(!report.converged);
        assert!(g.vertices().values().all(|v| *v == (11, 12)));
    }

    struct Diverge;
    impl VertexProgram<f64, ()> for Diverge {
        type Summary = ();
        fn gather(&self, _: usize, _: VertexId, _: &f64, _: &[Neighbor<'_, f64, ()>]) {}
        fn apply(&self, _: usize, _: VertexId, v: &f64, _: ()) -> (f64, f64) {
            (v * 1e200, f64::INFINITY)
        }
        fn tolerance(&self) -> f64 {
            1e-6
        }
    }

    #[test]
    fn divergence_is_reported() {
        let ex = Executor::new(1).unwrap();
        assert!(matches!(
            ex.run_message_passing(path_graph(&[1.0]), &Diverge, 3),
            Err(GraphError::NonFiniteResidual { round: 0, vertex: 0 })
        ));
    }
}
