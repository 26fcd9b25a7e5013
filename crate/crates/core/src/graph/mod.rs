//! Structured-grid graph generation.
//!
//! Nodes are either the pixels of an H×W feature map (id = `row * W + col`,
//! row-major) or, in channel mode, the C channels of the map. Because the
//! topology is fixed by the grid, adjacency is generated directly from
//! index arithmetic on row slices — no pairwise distance computation ever
//! runs. A deliberately naive O(N²) scan, [`oracle_adjacency`], exists
//! purely as the correctness and speed baseline.

mod bench;

pub use bench::{bench_csv, bench_generation, BenchRow};

use crate::error::{Error, Result};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

/// Dimensions of the feature map a graph is built over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl GridSpec {
    /// All extents must be at least 1.
    pub fn new(h: usize, w: usize, c: usize) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Invalid(format!(
                "grid extents must be at least 1, got h={h} w={w} c={c}"
            )));
        }
        Ok(Self { h, w, c })
    }

    /// Node count for a mode: pixels (`h * w`) for the spatial modes,
    /// channels (`c`) for the channel chain.
    pub fn nodes(&self, mode: NeighborMode) -> usize {
        match mode {
            NeighborMode::Four | NeighborMode::Eight => self.h * self.w,
            NeighborMode::TwoChannel => self.c,
        }
    }

    /// Pixel (row, col) → node id, row-major.
    pub fn node_id(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.h && col < self.w);
        row * self.w + col
    }

    /// Node id → pixel (row, col).
    pub fn pixel_of(&self, node: usize) -> (usize, usize) {
        debug_assert!(node < self.h * self.w);
        (node / self.w, node % self.w)
    }
}

/// Neighborhood structure of the generated graph.
///
/// `Four` and `Eight` connect pixels at Manhattan resp. Chebyshev distance
/// exactly 1; `TwoChannel` chains the channels of the map, so each node's
/// feature is a flattened H·W map and interior nodes have degree 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NeighborMode {
    Four,
    Eight,
    TwoChannel,
}

impl NeighborMode {
    pub const ALL: [NeighborMode; 3] =
        [NeighborMode::Four, NeighborMode::Eight, NeighborMode::TwoChannel];

    /// Upper bound on any node's degree in this mode.
    pub fn max_degree(self) -> usize {
        match self {
            NeighborMode::Four => 4,
            NeighborMode::Eight => 8,
            NeighborMode::TwoChannel => 2,
        }
    }
}

impl fmt::Display for NeighborMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NeighborMode::Four => "four",
            NeighborMode::Eight => "eight",
            NeighborMode::TwoChannel => "two-channel",
        };
        f.write_str(s)
    }
}

impl FromStr for NeighborMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "four" => Ok(NeighborMode::Four),
            "eight" => Ok(NeighborMode::Eight),
            "two-channel" => Ok(NeighborMode::TwoChannel),
            other => Err(Error::Config(format!(
                "unknown neighbor mode `{other}` (expected four, eight, or two-channel)"
            ))),
        }
    }
}

/// Paired (node, neighbor) id vectors: one directed edge per position.
/// Generators emit both orientations of every undirected edge.
#[derive(Clone, Debug, Default)]
pub struct EdgeList {
    pub node: Vec<usize>,
    pub neighbor: Vec<usize>,
}

impl EdgeList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self { node: Vec::with_capacity(n), neighbor: Vec::with_capacity(n) }
    }

    pub fn push(&mut self, node: usize, neighbor: usize) {
        self.node.push(node);
        self.neighbor.push(neighbor);
    }

    /// Number of directed entries.
    pub fn len(&self) -> usize {
        self.node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.is_empty()
    }
}

/// Symmetric boolean adjacency in compact sparse-row form.
///
/// `row_offsets` has `n + 1` entries; the neighbors of node `i` are
/// `col_indices[row_offsets[i]..row_offsets[i + 1]]`, strictly ascending
/// within each row. The structure is immutable after construction and safe
/// to share; the dense boolean view is materialized lazily on first use.
/// Graphs produced by the default generators have a zero diagonal — the
/// residual path of the attention layer carries self-information instead —
/// but self-loops can be requested explicitly for experiments.
#[derive(Debug)]
pub struct Adjacency {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    dense: OnceLock<Vec<bool>>,
}

impl PartialEq for Adjacency {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.row_offsets == other.row_offsets
            && self.col_indices == other.col_indices
    }
}

impl Eq for Adjacency {}

impl Clone for Adjacency {
    fn clone(&self) -> Self {
        Self {
            n: self.n,
            row_offsets: self.row_offsets.clone(),
            col_indices: self.col_indices.clone(),
            dense: OnceLock::new(),
        }
    }
}

impl Adjacency {
    /// Builds the symmetric closure of an edge list over `n` nodes:
    /// both orientations of every pair are inserted, duplicates collapse,
    /// and each row ends up sorted. Ids at or beyond `n` are an error that
    /// names the offending index.
    pub fn from_pairs(edges: &EdgeList, n: usize) -> Result<Self> {
        for (&a, &b) in edges.node.iter().zip(&edges.neighbor) {
            for id in [a, b] {
                if id >= n {
                    return Err(Error::NodeOutOfRange { index: id, nodes: n });
                }
            }
        }
        let mut directed: Vec<(usize, usize)> = Vec::with_capacity(edges.len() * 2);
        for (&a, &b) in edges.node.iter().zip(&edges.neighbor) {
            directed.push((a, b));
            directed.push((b, a));
        }
        directed.sort_unstable();
        directed.dedup();

        let mut row_offsets = vec![0usize; n + 1];
        for &(a, _) in &directed {
            row_offsets[a + 1] += 1;
        }
        for i in 0..n {
            row_offsets[i + 1] += row_offsets[i];
        }
        let col_indices = directed.into_iter().map(|(_, b)| b).collect();
        Ok(Self { n, row_offsets, col_indices, dense: OnceLock::new() })
    }

    /// Complete graph on `n` nodes: all ones off the diagonal.
    pub fn complete(n: usize) -> Self {
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::with_capacity(n.saturating_sub(1) * n);
        row_offsets.push(0);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    col_indices.push(j);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Self { n, row_offsets, col_indices, dense: OnceLock::new() }
    }

    /// Edgeless graph on `n` nodes (every row empty).
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            row_offsets: vec![0; n + 1],
            col_indices: Vec::new(),
            dense: OnceLock::new(),
        }
    }

    /// Wraps already-ordered sparse rows. Callers must supply `n + 1`
    /// monotone offsets and strictly ascending in-range rows; the shift
    /// generators guarantee this by construction (and are held to it by
    /// the oracle-equivalence suite), so no per-call check runs and
    /// generation stays O(edges) even in checked builds.
    fn from_sorted_csr(n: usize, row_offsets: Vec<usize>, col_indices: Vec<usize>) -> Self {
        Self { n, row_offsets, col_indices, dense: OnceLock::new() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Count of stored directed edges (twice the undirected count when the
    /// diagonal is empty).
    pub fn num_directed_edges(&self) -> usize {
        self.col_indices.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    /// Membership test via binary search within the row.
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Dense row-major boolean view, built on first call and cached.
    pub fn dense(&self) -> &[bool] {
        self.dense.get_or_init(|| {
            let mut d = vec![false; self.n * self.n];
            for i in 0..self.n {
                for &j in self.neighbors(i) {
                    d[i * self.n + j] = true;
                }
            }
            d
        })
    }

    /// Structural validation: monotone offsets, sorted duplicate-free rows,
    /// in-range columns, and symmetry.
    pub fn validate(&self) -> Result<()> {
        if self.row_offsets.len() != self.n + 1
            || self.row_offsets[0] != 0
            || *self.row_offsets.last().unwrap() != self.col_indices.len()
        {
            return Err(Error::Invalid("adjacency row offsets are malformed".into()));
        }
        for i in 0..self.n {
            if self.row_offsets[i] > self.row_offsets[i + 1] {
                return Err(Error::Invalid(format!("adjacency row {i} has negative length")));
            }
            let row = self.neighbors(i);
            for pair in row.windows(2) {
                if pair[0] >= pair[1] {
                    return Err(Error::Invalid(format!(
                        "adjacency row {i} is not strictly ascending"
                    )));
                }
            }
            for &j in row {
                if j >= self.n {
                    return Err(Error::NodeOutOfRange { index: j, nodes: self.n });
                }
            }
        }
        for i in 0..self.n {
            for &j in self.neighbors(i) {
                if !self.contains(j, i) {
                    return Err(Error::Invalid(format!("adjacency is asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    /// True when no node is its own neighbor.
    pub fn diagonal_free(&self) -> bool {
        (0..self.n).all(|i| !self.contains(i, i))
    }
}

/// Generates the grid graph for `spec` under `mode` without self-loops.
pub fn generate_grid_graph(spec: GridSpec, mode: NeighborMode) -> Result<Adjacency> {
    generate_grid_graph_with_options(spec, mode, false)
}

/// Grid-graph generation from index shifts.
///
/// For the spatial modes the pixel-id matrix is `range(h*w)` reshaped to
/// (h, w); a node's neighbors are its id shifted by ±1 within the row and
/// ±w across rows (plus the four combined shifts in eight-neighbor mode).
/// Because a shift by (dr, dc) changes the id by `dr·w + dc` and the
/// shifts are enumerated in lexicographic (dr, dc) order, every sparse
/// row comes out strictly ascending by construction, so the adjacency is
/// assembled directly — no sorting, deduplication, or distance
/// computation ever runs and total work is O(max_degree · nodes). The
/// channel mode chains consecutive channel ids the same way. `self_loops`
/// additionally links every node to itself (off by default; the attention
/// layer's residual carries self-information instead).
pub fn generate_grid_graph_with_options(
    spec: GridSpec,
    mode: NeighborMode,
    self_loops: bool,
) -> Result<Adjacency> {
    let n = spec.nodes(mode);
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut cols =
        Vec::with_capacity(expected_directed_edges(spec, mode) + if self_loops { n } else { 0 });
    row_offsets.push(0);
    match mode {
        NeighborMode::Four | NeighborMode::Eight => {
            let (h, w) = (spec.h, spec.w);
            let diagonals = mode == NeighborMode::Eight;
            for r in 0..h {
                for c in 0..w {
                    let i = r * w + c;
                    if r > 0 {
                        if diagonals && c > 0 {
                            cols.push(i - w - 1);
                        }
                        cols.push(i - w);
                        if diagonals && c + 1 < w {
                            cols.push(i - w + 1);
                        }
                    }
                    if c > 0 {
                        cols.push(i - 1);
                    }
                    if self_loops {
                        cols.push(i);
                    }
                    if c + 1 < w {
                        cols.push(i + 1);
                    }
                    if r + 1 < h {
                        if diagonals && c > 0 {
                            cols.push(i + w - 1);
                        }
                        cols.push(i + w);
                        if diagonals && c + 1 < w {
                            cols.push(i + w + 1);
                        }
                    }
                    row_offsets.push(cols.len());
                }
            }
        }
        NeighborMode::TwoChannel => {
            for i in 0..spec.c {
                if i > 0 {
                    cols.push(i - 1);
                }
                if self_loops {
                    cols.push(i);
                }
                if i + 1 < spec.c {
                    cols.push(i + 1);
                }
                row_offsets.push(cols.len());
            }
        }
    }
    Ok(Adjacency::from_sorted_csr(n, row_offsets, cols))
}

/// Brute-force baseline: scans all N² node pairs and connects those at
/// coordinate distance exactly 1 (Manhattan for four-neighbor, Chebyshev
/// for eight-neighbor, index distance for the channel chain). Exists only
/// to check and benchmark [`generate_grid_graph`].
pub fn oracle_adjacency(spec: GridSpec, mode: NeighborMode) -> Result<Adjacency> {
    let n = spec.nodes(mode);
    let mut edges = EdgeList::new();
    match mode {
        NeighborMode::Four | NeighborMode::Eight => {
            for a in 0..n {
                let (ar, ac) = spec.pixel_of(a);
                for b in 0..n {
                    if a == b {
                        continue;
                    }
                    let (br, bc) = spec.pixel_of(b);
                    let dr = ar.abs_diff(br);
                    let dc = ac.abs_diff(bc);
                    let connected = match mode {
                        NeighborMode::Four => dr + dc == 1,
                        NeighborMode::Eight => dr.max(dc) == 1,
                        NeighborMode::TwoChannel => unreachable!(),
                    };
                    if connected {
                        edges.push(a, b);
                    }
                }
            }
        }
        NeighborMode::TwoChannel => {
            for a in 0..n {
                for b in 0..n {
                    if a.abs_diff(b) == 1 {
                        edges.push(a, b);
                    }
                }
            }
        }
    }
    Adjacency::from_pairs(&edges, n)
}

/// Closed-form directed edge count for a grid graph without self-loops.
pub fn expected_directed_edges(spec: GridSpec, mode: NeighborMode) -> usize {
    let (h, w, c) = (spec.h, spec.w, spec.c);
    match mode {
        NeighborMode::Four => 2 * (h * (w - 1) + w * (h - 1)),
        NeighborMode::Eight => {
            2 * (h * (w - 1) + w * (h - 1)) + 4 * (h - 1) * (w - 1)
        }
        NeighborMode::TwoChannel => 2 * (c - 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(h: usize, w: usize) -> GridSpec {
        GridSpec::new(h, w, 1).unwrap()
    }

    #[test]
    fn single_pixel_grid_has_no_edges() {
        for mode in [NeighborMode::Four, NeighborMode::Eight] {
            let adj = generate_grid_graph(spec(1, 1), mode).unwrap();
            assert_eq!(adj.n(), 1);
            assert_eq!(adj.num_directed_edges(), 0);
        }
    }

    #[test]
    fn two_by_two_four_neighbor_exact_edge_set() {
        let adj = generate_grid_graph(spec(2, 2), NeighborMode::Four).unwrap();
        let mut got: Vec<(usize, usize)> = Vec::new();
        for i in 0..4 {
            for &j in adj.neighbors(i) {
                got.push((i, j));
            }
        }
        let expected = vec![
            (0, 1),
            (0, 2),
            (1, 0),
            (1, 3),
            (2, 0),
            (2, 3),
            (3, 1),
            (3, 2),
        ];
        assert_eq!(got, expected);
    }

    #[test]
    fn three_by_three_eight_neighbor_center_sees_everyone() {
        let adj = generate_grid_graph(spec(3, 3), NeighborMode::Eight).unwrap();
        assert_eq!(adj.neighbors(4), &[0, 1, 2, 3, 5, 6, 7, 8]);
    }

    #[test]
    fn sixteen_by_eight_map_has_464_directed_edges() {
        let adj = generate_grid_graph(spec(16, 8), NeighborMode::Four).unwrap();
        assert_eq!(adj.num_directed_edges(), 464);
        assert_eq!(expected_directed_edges(spec(16, 8), NeighborMode::Four), 464);
    }

    #[test]
    fn channel_chain_of_512_has_1022_directed_edges() {
        let g = GridSpec::new(1, 1, 512).unwrap();
        let adj = generate_grid_graph(g, NeighborMode::TwoChannel).unwrap();
        assert_eq!(adj.num_directed_edges(), 1022);
        for i in 1..511 {
            assert_eq!(adj.degree(i), 2);
        }
        assert_eq!(adj.degree(0), 1);
        assert_eq!(adj.degree(511), 1);
    }

    #[test]
    fn degenerate_single_row_eight_neighbor_is_a_path() {
        // One-row grids have no diagonal pairs, so eight-neighbor collapses
        // to the chain.
        let adj = generate_grid_graph(spec(1, 5), NeighborMode::Eight).unwrap();
        let four = generate_grid_graph(spec(1, 5), NeighborMode::Four).unwrap();
        assert_eq!(adj, four);
        assert_eq!(adj.degree(0), 1);
        assert_eq!(adj.degree(2), 2);
    }

    #[test]
    fn from_pairs_takes_symmetric_closure_and_dedups() {
        let mut e = EdgeList::new();
        e.push(0, 1);
        let adj = Adjacency::from_pairs(&e, 2).unwrap();
        assert!(adj.contains(0, 1));
        assert!(adj.contains(1, 0));
        assert_eq!(adj.num_directed_edges(), 2);

        let mut dup = EdgeList::new();
        dup.push(0, 1);
        dup.push(1, 0);
        dup.push(0, 1);
        let adj2 = Adjacency::from_pairs(&dup, 2).unwrap();
        assert_eq!(adj, adj2);

        let empty = Adjacency::from_pairs(&EdgeList::new(), 3).unwrap();
        assert_eq!(empty.num_directed_edges(), 0);
        assert_eq!(empty.n(), 3);
    }

    #[test]
    fn from_pairs_names_the_offending_index() {
        let mut e = EdgeList::new();
        e.push(0, 7);
        match Adjacency::from_pairs(&e, 4) {
            Err(Error::NodeOutOfRange { index, nodes }) => {
                assert_eq!(index, 7);
                assert_eq!(nodes, 4);
            }
            other => panic!("expected NodeOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn generator_matches_oracle_on_all_small_grids() {
        for h in 1..=8 {
            for w in 1..=8 {
                for mode in [NeighborMode::Four, NeighborMode::Eight] {
                    let s = spec(h, w);
                    let fast = generate_grid_graph(s, mode).unwrap();
                    let slow = oracle_adjacency(s, mode).unwrap();
                    assert_eq!(fast, slow, "mismatch at {h}x{w} {mode}");
                    fast.validate().unwrap();
                }
            }
        }
        for c in 1..=16 {
            let s = GridSpec::new(1, 1, c).unwrap();
            let mode = NeighborMode::TwoChannel;
            assert_eq!(
                generate_grid_graph(s, mode).unwrap(),
                oracle_adjacency(s, mode).unwrap(),
                "mismatch at c={c}"
            );
        }
    }

    #[test]
    fn edge_count_formulas_hold_up_to_16() {
        for h in 1..=16 {
            for w in 1..=16 {
                let s = spec(h, w);
                for mode in [NeighborMode::Four, NeighborMode::Eight] {
                    let adj = generate_grid_graph(s, mode).unwrap();
                    assert_eq!(
                        adj.num_directed_edges(),
                        expected_directed_edges(s, mode),
                        "count mismatch at {h}x{w} {mode}"
                    );
                }
            }
        }
        for c in 1..=16 {
            let s = GridSpec::new(2, 2, c).unwrap();
            let adj = generate_grid_graph(s, NeighborMode::TwoChannel).unwrap();
            assert_eq!(adj.num_directed_edges(), 2 * (c - 1));
        }
    }

    #[test]
    fn degrees_respect_mode_bounds_and_corners() {
        let four = generate_grid_graph(spec(5, 7), NeighborMode::Four).unwrap();
        let eight = generate_grid_graph(spec(5, 7), NeighborMode::Eight).unwrap();
        for i in 0..four.n() {
            assert!(four.degree(i) >= 2 && four.degree(i) <= 4);
            assert!(eight.degree(i) >= 3 && eight.degree(i) <= 8);
        }
        // Corners of any grid with h, w >= 2.
        let s = spec(5, 7);
        for corner in [
            s.node_id(0, 0),
            s.node_id(0, 6),
            s.node_id(4, 0),
            s.node_id(4, 6),
        ] {
            assert_eq!(four.degree(corner), 2);
            assert_eq!(eight.degree(corner), 3);
        }
    }

    #[test]
    fn self_loop_flag_adds_exactly_the_diagonal() {
        let s = spec(3, 4);
        let plain = generate_grid_graph(s, NeighborMode::Four).unwrap();
        let looped =
            generate_grid_graph_with_options(s, NeighborMode::Four, true).unwrap();
        assert!(plain.diagonal_free());
        assert!(!looped.diagonal_free());
        assert_eq!(
            looped.num_directed_edges(),
            plain.num_directed_edges() + s.nodes(NeighborMode::Four)
        );
        for i in 0..looped.n() {
            assert!(looped.contains(i, i));
        }
    }

    #[test]
    fn complete_graph_is_all_ones_off_diagonal() {
        let adj = Adjacency::complete(5);
        adj.validate().unwrap();
        assert!(adj.diagonal_free());
        assert_eq!(adj.num_directed_edges(), 5 * 4);
        for i in 0..5 {
            assert_eq!(adj.degree(i), 4);
        }
    }

    #[test]
    fn dense_view_matches_sparse_membership() {
        let adj = generate_grid_graph(spec(4, 3), NeighborMode::Eight).unwrap();
        let d = adj.dense();
        for i in 0..adj.n() {
            for j in 0..adj.n() {
                assert_eq!(d[i * adj.n() + j], adj.contains(i, j));
            }
        }
    }

    #[test]
    fn node_pixel_mapping_round_trips() {
        let s = spec(16, 8);
        assert_eq!(s.pixel_of(5), (0, 5));
        assert_eq!(s.node_id(0, 5), 5);
        for node in 0..s.h * s.w {
            let (r, c) = s.pixel_of(node);
            assert_eq!(s.node_id(r, c), node);
        }
    }
}
