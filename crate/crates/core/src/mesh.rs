//! Triangulated rectangular domains and their node adjacency.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("mesh needs at least one subdivision per side")]
    NoSubdivisions,
    #[error("invalid rectangle [{0}, {1}] x [{2}, {3}]")]
    InvalidRectangle(f64, f64, f64, f64),
    #[error("element {element} is degenerate (zero area)")]
    DegenerateElement { element: usize },
    #[error("element {element} references node {node}, but the mesh has {n_nodes} nodes")]
    BadNodeIndex {
        element: usize,
        node: usize,
        n_nodes: usize,
    },
    #[error("mesh file parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Axis-aligned bounding rectangle of a mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };

    pub fn diameter(&self) -> f64 {
        (self.x1 - self.x0).hypot(self.y1 - self.y0)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn on_boundary(&self, p: [f64; 2], tol: f64) -> bool {
        (p[0] - self.x0).abs() <= tol
            || (p[0] - self.x1).abs() <= tol
            || (p[1] - self.y0).abs() <= tol
            || (p[1] - self.y1).abs() <= tol
    }
}

/// A triangulated planar domain with counter-clockwise elements.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    nodes: Vec<[f64; 2]>,
    elements: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    h: f64,
    bounds: Rect,
    /// Node-to-element incidence in CSR form.
    node_elem_offsets: Vec<usize>,
    node_elems: Vec<usize>,
    /// Structured grid resolution, when the mesh was generated here.
    grid: Option<usize>,
}

/// Per-node sorted neighbour lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors.iter().enumerate().all(|(i, list)| {
            list.iter()
                .all(|&j| j != i && self.neighbors[j].binary_search(&i).is_ok())
        })
    }
}

pub fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `n x n` right-triangle mesh of the unit square.
pub fn structured_unit_square(n: usize) -> Result<TriMesh, MeshError> {
    structured_rectangle(n, Rect::UNIT)
}

/// Structured mesh of `rect`, an affine image of the unit-square mesh.
pub fn structured_rectangle(n: usize, rect: Rect) -> Result<TriMesh, MeshError> {
    if n == 0 {
        return Err(MeshError::NoSubdivisions);
    }
    if !(rect.x1 > rect.x0 && rect.y1 > rect.y0) || !rect.diameter().is_finite() {
        return Err(MeshError::InvalidRectangle(rect.x0, rect.x1, rect.y0, rect.y1));
    }
    let stride = n + 1;
    let mut nodes = Vec::with_capacity(stride * stride);
    let mut boundary = Vec::with_capacity(stride * stride);
    for j in 0..=n {
        for i in 0..=n {
            let (s, t) = (i as f64 / n as f64, j as f64 / n as f64);
            nodes.push([
                rect.x0 + s * (rect.x1 - rect.x0),
                rect.y0 + t * (rect.y1 - rect.y0),
            ]);
            boundary.push(i == 0 || j == 0 || i == n || j == n);
        }
    }
    let mut elements = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let a = j * stride + i;
            let b = a + 1;
            let c = a + stride + 1;
            let d = a + stride;
            elements.push([a, b, c]);
            elements.push([a, c, d]);
        }
    }
    let h = ((rect.x1 - rect.x0) / n as f64).max((rect.y1 - rect.y0) / n as f64);
    let mut mesh = TriMesh::assemble(nodes, elements, boundary, h, rect)?;
    mesh.grid = Some(n);
    Ok(mesh)
}

impl TriMesh {
    /// Builds a mesh from raw parts. Clockwise elements are reoriented.
    pub fn from_parts(
        nodes: Vec<[f64; 2]>,
        elements: Vec<[usize; 3]>,
        boundary: Vec<bool>,
    ) -> Result<Self, MeshError> {
        let bounds = nodes.iter().fold(
            Rect {
                x0: f64::INFINITY,
                x1: f64::NEG_INFINITY,
                y0: f64::INFINITY,
                y1: f64::NEG_INFINITY,
            },
            |r, p| Rect {
                x0: r.x0.min(p[0]),
                x1: r.x1.max(p[0]),
                y0: r.y0.min(p[1]),
                y1: r.y1.max(p[1]),
            },
        );
        let mut h: f64 = 0.0;
        for e in &elements {
            for k in 0..3 {
                if let (Some(a), Some(b)) = (nodes.get(e[k]), nodes.get(e[(k + 1) % 3])) {
                    h = h.max(distance(*a, *b));
                }
            }
        }
        Self::assemble(nodes, elements, boundary, h, bounds)
    }

    fn assemble(
        nodes: Vec<[f64; 2]>,
        mut elements: Vec<[usize; 3]>,
        boundary: Vec<bool>,
        h: f64,
        bounds: Rect,
    ) -> Result<Self, MeshError> {
        let n_nodes = nodes.len();
        for (k, e) in elements.iter_mut().enumerate() {
            for &v in e.iter() {
                if v >= n_nodes {
                    return Err(MeshError::BadNodeIndex {
                        element: k,
                        node: v,
                        n_nodes,
                    });
                }
            }
            let area = signed_area(nodes[e[0]], nodes[e[1]], nodes[e[2]]);
            let scale = h.max(f64::MIN_POSITIVE);
            if area.abs() <= 1e-14 * scale * scale {
                return Err(MeshError::DegenerateElement { element: k });
            }
            if area < 0.0 {
                e.swap(1, 2);
            }
        }
        let mut counts = vec![0usize; n_nodes + 1];
        for e in &elements {
            for &v in e {
                counts[v + 1] += 1;
            }
        }
        for i in 0..n_nodes {
            counts[i + 1] += counts[i];
        }
        let mut node_elems = vec![0usize; counts[n_nodes]];
        let mut next = counts.clone();
        for (k, e) in elements.iter().enumerate() {
            for &v in e {
                node_elems[next[v]] = k;
                next[v] += 1;
            }
        }
        Ok(Self {
            nodes,
            elements,
            boundary,
            h,
            bounds,
            node_elem_offsets: counts,
            node_elems,
            grid: None,
        })
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> [f64; 2] {
        self.nodes[i]
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn element(&self, k: usize) -> [usize; 3] {
        self.elements[k]
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        self.boundary[i]
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn bounds(&self) -> Rect {
        self.bounds
    }

    pub fn diameter(&self) -> f64 {
        self.bounds.diameter()
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| !self.boundary[i]).collect()
    }

    /// Elements having node `i` as a vertex.
    pub fn elements_of_node(&self, i: usize) -> &[usize] {
        &self.node_elems[self.node_elem_offsets[i]..self.node_elem_offsets[i + 1]]
    }

    pub fn element_area(&self, k: usize) -> f64 {
        let [a, b, c] = self.elements[k];
        signed_area(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_elements()).map(|k| self.element_area(k)).sum()
    }

    pub fn centroid(&self, k: usize) -> [f64; 2] {
        let [a, b, c] = self.elements[k];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        [(pa[0] + pb[0] + pc[0]) / 3.0, (pa[1] + pb[1] + pc[1]) / 3.0]
    }

    /// Barycentric coordinates of `x` in element `k`.
    pub fn barycentric(&self, k: usize, x: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.elements[k];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        let area = signed_area(pa, pb, pc);
        [
            signed_area(x, pb, pc) / area,
            signed_area(pa, x, pc) / area,
            signed_area(pa, pb, x) / area,
        ]
    }

    /// Locates an element containing `x`, with barycentric coordinates.
    pub fn locate(&self, x: [f64; 2]) -> Option<(usize, [f64; 3])> {
        const TOL: f64 = 1e-12;
        if let Some(n) = self.grid {
            let r = self.bounds;
            let s = (x[0] - r.x0) / (r.x1 - r.x0) * n as f64;
            let t = (x[1] - r.y0) / (r.y1 - r.y0) * n as f64;
            if s < -TOL || t < -TOL || s > n as f64 + TOL || t > n as f64 + TOL {
                return None;
            }
            let i = (s.floor().max(0.0) as usize).min(n - 1);
            let j = (t.floor().max(0.0) as usize).min(n - 1);
            for k in [2 * (j * n + i), 2 * (j * n + i) + 1] {
                let bc = self.barycentric(k, x);
                if bc.iter().all(|&l| l >= -TOL) {
                    return Some((k, bc));
                }
            }
            return None;
        }
        (0..self.n_elements()).find_map(|k| {
            let bc = self.barycentric(k, x);
            bc.iter().all(|&l| l >= -TOL).then_some((k, bc))
        })
    }

    /// Parses the whitespace-separated text format (`nodes N` / `elements E` blocks).
    pub fn from_text(text: &str) -> Result<Self, MeshError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let parse_err = |line: usize, message: &str| MeshError::Parse {
            line,
            message: message.to_string(),
        };
        let header = |lines: &mut dyn Iterator<Item = (usize, &str)>, key: &str| {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| parse_err(0, &format!("missing `{key}` header")))?;
            let mut it = l.split_whitespace();
            if it.next() != Some(key) {
                return Err(parse_err(ln, &format!("expected `{key} <count>`")));
            }
            it.next()
                .and_then(|c| c.parse::<usize>().ok())
                .ok_or_else(|| parse_err(ln, "bad count"))
        };
        let n_nodes = header(&mut lines, "nodes")?;
        let mut nodes = Vec::with_capacity(n_nodes);
        let mut boundary = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let (ln, l) = lines.next().ok_or_else(|| parse_err(0, "too few node lines"))?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(parse_err(ln, "expected `x y b`"));
            }
            let x = f[0].parse::<f64>().map_err(|_| parse_err(ln, "bad x"))?;
            let y = f[1].parse::<f64>().map_err(|_| parse_err(ln, "bad y"))?;
            let b = match f[2] {
                "0" => false,
                "1" => true,
                _ => return Err(parse_err(ln, "boundary flag must be 0 or 1")),
            };
            nodes.push([x, y]);
            boundary.push(b);
        }
        let n_elems = header(&mut lines, "elements")?;
        let mut elements = Vec::with_capacity(n_elems);
        for _ in 0..n_elems {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| parse_err(0, "too few element lines"))?;
            let v: Vec<usize> = l
                .split_whitespace()
                .map(|s| s.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| parse_err(ln, "bad element index"))?;
            if v.len() != 3 {
                return Err(parse_err(ln, "expected `i j k`"));
            }
            elements.push([v[0], v[1], v[2]]);
        }
        Self::from_parts(nodes, elements, boundary)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "nodes {}", self.n_nodes()).unwrap();
        for (p, &b) in self.nodes.iter().zip(&self.boundary) {
            writeln!(s, "{:?} {:?} {}", p[0], p[1], u8::from(b)).unwrap();
        }
        writeln!(s, "elements {}", self.n_elements()).unwrap();
        for e in &self.elements {
            writeln!(s, "{} {} {}", e[0], e[1], e[2]).unwrap();
        }
        s
    }
}

/// Node adjacency along element edges.
pub fn node_adjacency(mesh: &TriMesh) -> Adjacency {
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); mesh.n_nodes()];
    for e in mesh.elements() {
        for a in 0..3 {
            for b in 0..3 {
                if a != b {
                    neighbors[e[a]].push(e[b]);
                }
            }
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
        list.dedup();
    }
    Adjacency { neighbors }
}

/// Elements with at least one vertex in `nodes`, sorted ascending.
pub fn elements_touching(mesh: &TriMesh, nodes: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = nodes
        .iter()
        .flat_map(|&i| mesh.elements_of_node(i).iter().copied())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}
