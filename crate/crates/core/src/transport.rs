//! Uncapacitated minimum-cost flow by the primal network simplex method.
//!
//! The spanning tree is kept strongly feasible (zero-flow tree arcs point
//! toward the artificial root) and the leaving arc is chosen by the
//! last-blocking-arc rule, which rules out cycling on degenerate pivots.

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("supplies do not balance (sum = {0})")]
    Unbalanced(f64),
    #[error("network simplex did not converge within {0} pivots")]
    PivotLimit(usize),
    #[error("problem is infeasible on the given arcs")]
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct MinCostFlow {
    n: usize,
    root: usize,
    src: Vec<u32>,
    dst: Vec<u32>,
    cost: Vec<f64>,
    flow: Vec<f64>,
    in_tree: Vec<bool>,
    artificial_from: usize,
    parent: Vec<usize>,
    pred: Vec<usize>,
    up: Vec<bool>,
    depth: Vec<u32>,
    pi: Vec<f64>,
    children: Vec<Vec<usize>>,
    next_arc: usize,
    pub pivots: usize,
}

impl MinCostFlow {
    /// Starts from the all-artificial tree over `supply.len()` real nodes.
    ///
    /// `scale` bounds the cost of any real path; artificial arcs cost more.
    pub fn new(supply: &[f64], scale: f64) -> Result<Self, FlowError> {
        let n = supply.len();
        let total: f64 = supply.iter().sum();
        let mag: f64 = supply.iter().map(|s| s.abs()).sum();
        if total.abs() > 1e-9 * mag.max(1.0) {
            return Err(FlowError::Unbalanced(total));
        }
        let art = (n as f64 + 1.0) * (scale + 1.0);
        let root = n;
        let mut me = Self {
            n,
            root,
            src: Vec::new(),
            dst: Vec::new(),
            cost: Vec::new(),
            flow: Vec::new(),
            in_tree: Vec::new(),
            artificial_from: 0,
            parent: vec![root; n + 1],
            pred: vec![usize::MAX; n + 1],
            up: vec![false; n + 1],
            depth: vec![1; n + 1],
            pi: vec![0.0; n + 1],
            children: vec![Vec::new(); n + 1],
            next_arc: 0,
            pivots: 0,
        };
        me.depth[root] = 0;
        // Absorb the rounding residue in the largest supply so the root balances.
        let mut b = supply.to_vec();
        if let Some(big) = (0..n).max_by(|&a, &c| b[a].abs().total_cmp(&b[c].abs())) {
            b[big] -= total;
        }
        for (v, &s) in b.iter().enumerate() {
            let a = me.src.len();
            if s >= 0.0 {
                me.push_arc(v, root, 0.0);
                me.flow[a] = s;
                me.up[v] = true;
                me.pi[v] = 0.0;
            } else {
                me.push_arc(root, v, art);
                me.flow[a] = -s;
                me.up[v] = false;
                me.pi[v] = art;
            }
            me.in_tree[a] = true;
            me.pred[v] = a;
            me.children[root].push(v);
        }
        me.artificial_from = 0;
        Ok(me)
    }

    fn push_arc(&mut self, u: usize, v: usize, c: f64) -> usize {
        self.src.push(u as u32);
        self.dst.push(v as u32);
        self.cost.push(c);
        self.flow.push(0.0);
        self.in_tree.push(false);
        self.src.len() - 1
    }

    /// Index of the first real arc; artificial arcs occupy `0..n`.
    pub fn first_real_arc(&self) -> usize {
        self.n
    }

    pub fn add_arc(&mut self, u: usize, v: usize, cost: f64) -> usize {
        assert!(u < self.n && v < self.n && u != v);
        self.push_arc(u, v, cost)
    }

    pub fn arc_count(&self) -> usize {
        self.src.len()
    }

    pub fn arc(&self, a: usize) -> (usize, usize) {
        (self.src[a] as usize, self.dst[a] as usize)
    }

    pub fn flow(&self, a: usize) -> f64 {
        self.flow[a]
    }

    pub fn cost(&self, a: usize) -> f64 {
        self.cost[a]
    }

    /// Node potentials with `cost + π_src − π_dst ≥ 0` at optimality; root at 0.
    pub fn potential(&self, v: usize) -> f64 {
        self.pi[v]
    }

    pub fn set_cost(&mut self, a: usize, c: f64) {
        assert!(a >= self.n, "artificial costs are fixed");
        self.cost[a] = c;
    }

    /// Recomputes all potentials from the current tree.
    pub fn refresh_potentials(&mut self) {
        let mut stack = vec![self.root];
        self.pi[self.root] = 0.0;
        while let Some(u) = stack.pop() {
            for k in 0..self.children[u].len() {
                let w = self.children[u][k];
                self.set_from_parent(w);
                stack.push(w);
            }
        }
    }

    fn set_from_parent(&mut self, w: usize) {
        let p = self.parent[w];
        let c = self.cost[self.pred[w]];
        self.pi[w] = if self.up[w] { self.pi[p] - c } else { self.pi[p] + c };
        self.depth[w] = self.depth[p] + 1;
    }

    #[inline]
    fn reduced(&self, a: usize) -> f64 {
        self.cost[a] + self.pi[self.src[a] as usize] - self.pi[self.dst[a] as usize]
    }

    pub fn reduced_cost(&self, a: usize) -> f64 {
        self.reduced(a)
    }

    /// Block pricing: the most negative reduced cost within the first block that has one.
    fn find_entering(&mut self, tol: f64) -> Option<usize> {
        let m = self.src.len();
        if m == 0 {
            return None;
        }
        let block = ((m as f64).sqrt() as usize).max(20);
        let mut best = None;
        let mut best_rc = -tol;
        let mut scanned = 0;
        let mut a = self.next_arc % m;
        let mut in_block = 0;
        while scanned < m {
            if !self.in_tree[a] {
                let rc = self.reduced(a);
                if rc < best_rc {
                    best_rc = rc;
                    best = Some(a);
                }
            }
            a += 1;
            if a == m {
                a = 0;
            }
            scanned += 1;
            in_block += 1;
            if in_block == block {
                if best.is_some() {
                    break;
                }
                in_block = 0;
            }
        }
        self.next_arc = a;
        best
    }

    fn pivot(&mut self, e: usize) {
        let (u, v) = (self.src[e] as usize, self.dst[e] as usize);
        // Join node.
        let (mut a, mut b) = (u, v);
        while a != b {
            if self.depth[a] >= self.depth[b] {
                a = self.parent[a];
            } else {
                b = self.parent[b];
            }
        }
        let join = a;
        let mut delta = f64::INFINITY;
        let mut out_node = usize::MAX;
        let mut out_side = 0;
        let mut w = u;
        while w != join {
            if self.up[w] {
                let d = self.flow[self.pred[w]];
                if d < delta {
                    delta = d;
                    out_node = w;
                    out_side = 1;
                }
            }
            w = self.parent[w];
        }
        let mut w = v;
        while w != join {
            if !self.up[w] {
                let d = self.flow[self.pred[w]];
                if d <= delta {
                    delta = d;
                    out_node = w;
                    out_side = 2;
                }
            }
            w = self.parent[w];
        }
        assert!(out_side != 0, "unbounded cycle in an uncapacitated network with nonnegative costs");
        if delta > 0.0 {
            self.flow[e] += delta;
            let mut w = u;
            while w != join {
                let a = self.pred[w];
                if self.up[w] {
                    self.flow[a] -= delta;
                } else {
                    self.flow[a] += delta;
                }
                w = self.parent[w];
            }
            let mut w = v;
            while w != join {
                let a = self.pred[w];
                if self.up[w] {
                    self.flow[a] += delta;
                } else {
                    self.flow[a] -= delta;
                }
                w = self.parent[w];
            }
        }
        let leaving = self.pred[out_node];
        self.flow[leaving] = self.flow[leaving].max(0.0);
        let (u_in, v_in) = if out_side == 1 { (u, v) } else { (v, u) };
        let mut stem = vec![u_in];
        while *stem.last().unwrap() != out_node {
            let top = *stem.last().unwrap();
            stem.push(self.parent[top]);
        }
        let old_parent = self.parent[out_node];
        remove_child(&mut self.children[old_parent], out_node);
        for j in (1..stem.len()).rev() {
            let (wj, below) = (stem[j], stem[j - 1]);
            remove_child(&mut self.children[wj], below);
            self.parent[wj] = below;
            self.pred[wj] = self.pred[below];
            self.up[wj] = !self.up[below];
            self.children[below].push(wj);
        }
        self.parent[u_in] = v_in;
        self.pred[u_in] = e;
        self.up[u_in] = self.src[e] as usize == u_in;
        self.children[v_in].push(u_in);
        self.in_tree[leaving] = false;
        self.in_tree[e] = true;
        let mut stack = vec![u_in];
        while let Some(x) = stack.pop() {
            self.set_from_parent(x);
            for k in 0..self.children[x].len() {
                stack.push(self.children[x][k]);
            }
        }
        self.pivots += 1;
    }

    /// Pivots until no arc has reduced cost below `−tol`.
    pub fn solve(&mut self, tol: f64, max_pivots: usize) -> Result<(), FlowError> {
        let start = self.pivots;
        while let Some(e) = self.find_entering(tol) {
            if self.pivots - start >= max_pivots {
                return Err(FlowError::PivotLimit(max_pivots));
            }
            self.pivot(e);
        }
        let art_flow: f64 = (0..self.n).map(|a| self.flow[a]).sum();
        let mag: f64 = self.flow.iter().map(|f| f.abs()).fold(0.0, f64::max).max(1.0);
        if art_flow > 1e-9 * mag {
            return Err(FlowError::Infeasible);
        }
        Ok(())
    }

    /// Total cost over real arcs.
    pub fn total_cost(&self) -> f64 {
        (self.n..self.src.len()).map(|a| self.cost[a] * self.flow[a]).sum()
    }

    pub fn real_arcs(&self) -> std::ops::Range<usize> {
        self.n..self.src.len()
    }

    pub fn artificial_from(&self) -> usize {
        self.artificial_from
    }
}

fn remove_child(list: &mut Vec<usize>, c: usize) {
    if let Some(p) = list.iter().position(|&x| x == c) {
        list.swap_remove(p);
    }
}
