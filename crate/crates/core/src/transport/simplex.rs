//! Primal network simplex for balanced transportation problems.
//!
//! Spanning-tree bookkeeping follows the thread/successor representation
//! popularized by LEMON: every node stores its parent, the tree arc to the
//! parent, the next node in a preorder walk (`thread`), the subtree size and
//! the last node of its subtree in that walk. Entering arcs are chosen by
//! block search. Supplies are integral, costs are floating point.

const NONE: usize = usize::MAX;
const UP: i8 = 1;
const DOWN: i8 = -1;
const LOWER: i8 = 1;
const TREE: i8 = 0;

pub(crate) struct Transportation<'a> {
    n: usize,
    m: usize,
    cost: &'a [f64],
}

struct Solver {
    source: Vec<usize>,
    target: Vec<usize>,
    cost: Vec<f64>,
    flow: Vec<i64>,
    state: Vec<i8>,
    search_arcs: usize,
    block: usize,
    next_arc: usize,

    parent: Vec<usize>,
    pred: Vec<usize>,
    pred_dir: Vec<i8>,
    thread: Vec<usize>,
    rev_thread: Vec<usize>,
    succ_num: Vec<usize>,
    last_succ: Vec<usize>,
    pi: Vec<f64>,
    root: usize,
    eps: f64,

    in_arc: usize,
    join: usize,
    u_in: usize,
    v_in: usize,
    u_out: usize,
    delta: i64,
    dirty: Vec<usize>,
}

impl<'a> Transportation<'a> {
    /// `cost` is row-major `n x m`; arc `i * m + j` goes from source `i` to
    /// sink `j`.
    pub(crate) fn new(n: usize, m: usize, cost: &'a [f64]) -> Self {
        assert_eq!(cost.len(), n * m);
        Self { n, m, cost }
    }

    /// Optimal integral flow for balanced `supply` and `demand`. Returns the
    /// flow on every arc.
    pub(crate) fn solve(&self, supply: &[i64], demand: &[i64]) -> Vec<i64> {
        assert_eq!(supply.len(), self.n);
        assert_eq!(demand.len(), self.m);
        debug_assert_eq!(supply.iter().sum::<i64>(), demand.iter().sum::<i64>());
        let mut s = Solver::new(self, supply, demand);
        s.run();
        s.flow.truncate(self.n * self.m);
        s.flow
    }
}

impl Solver {
    fn new(p: &Transportation<'_>, supply: &[i64], demand: &[i64]) -> Self {
        let node_num = p.n + p.m;
        let arc_num = p.n * p.m;
        let all = arc_num + node_num;
        let mut source = Vec::with_capacity(all);
        let mut target = Vec::with_capacity(all);
        for i in 0..p.n {
            for j in 0..p.m {
                source.push(i);
                target.push(p.n + j);
            }
        }
        let mut cost = p.cost.to_vec();
        let max_cost = cost.iter().fold(0.0f64, |a, &c| a.max(c.abs()));
        let art = (max_cost + 1.0) * node_num as f64;
        let root = node_num;

        let mut flow = vec![0i64; all];
        let mut state = vec![LOWER; all];
        let mut parent = vec![NONE; node_num + 1];
        let mut pred = vec![NONE; node_num + 1];
        let mut pred_dir = vec![UP; node_num + 1];
        let mut thread = vec![0; node_num + 1];
        let mut rev_thread = vec![0; node_num + 1];
        let mut succ_num = vec![1; node_num + 1];
        let mut last_succ = vec![0; node_num + 1];
        let mut pi = vec![0.0; node_num + 1];

        thread[root] = 0;
        rev_thread[0] = root;
        succ_num[root] = node_num + 1;
        last_succ[root] = root - 1;
        for u in 0..node_num {
            let e = arc_num + u;
            let sup = if u < p.n { supply[u] } else { -demand[u - p.n] };
            parent[u] = root;
            pred[u] = e;
            thread[u] = u + 1;
            rev_thread[u + 1] = u;
            last_succ[u] = u;
            state[e] = TREE;
            if sup >= 0 {
                pred_dir[u] = UP;
                source.push(u);
                target.push(root);
                flow[e] = sup;
                cost.push(0.0);
            } else {
                pred_dir[u] = DOWN;
                pi[u] = art;
                source.push(root);
                target.push(u);
                flow[e] = -sup;
                cost.push(art);
            }
        }
        let block = ((arc_num as f64).sqrt().ceil() as usize).max(10);
        Solver {
            source,
            target,
            cost,
            flow,
            state,
            search_arcs: arc_num,
            block,
            next_arc: 0,
            parent,
            pred,
            pred_dir,
            thread,
            rev_thread,
            succ_num,
            last_succ,
            pi,
            root,
            eps: 1e-13 * art,
            in_arc: 0,
            join: 0,
            u_in: 0,
            v_in: 0,
            u_out: 0,
            delta: 0,
            dirty: Vec::new(),
        }
    }

    fn run(&mut self) {
        let refresh = self.parent.len().max(64);
        let mut pivots = 0usize;
        loop {
            if !self.find_entering() {
                // drift in the potentials can hide improving arcs
                self.recompute_potentials();
                if !self.find_entering() {
                    break;
                }
            }
            self.find_join();
            self.find_leaving();
            self.change_flow();
            self.update_tree();
            self.update_potential();
            pivots += 1;
            if pivots.is_multiple_of(refresh) {
                self.recompute_potentials();
            }
        }
    }

    #[inline]
    fn reduced(&self, e: usize) -> f64 {
        self.state[e] as f64 * (self.cost[e] + self.pi[self.source[e]] - self.pi[self.target[e]])
    }

    fn find_entering(&mut self) -> bool {
        if self.search_arcs == 0 {
            return false;
        }
        let mut min = -self.eps;
        let mut found = false;
        let mut cnt = self.block;
        let order = (self.next_arc..self.search_arcs).chain(0..self.next_arc);
        for e in order {
            let c = self.reduced(e);
            if c < min {
                min = c;
                self.in_arc = e;
                found = true;
            }
            cnt -= 1;
            if cnt == 0 {
                if found {
                    self.next_arc = e + 1;
                    if self.next_arc == self.search_arcs {
                        self.next_arc = 0;
                    }
                    return true;
                }
                cnt = self.block;
            }
        }
        found
    }

    fn find_join(&mut self) {
        let (mut u, mut v) = (self.source[self.in_arc], self.target[self.in_arc]);
        while u != v {
            if self.succ_num[u] < self.succ_num[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        self.join = u;
    }

    fn find_leaving(&mut self) {
        let (first, second) = if self.state[self.in_arc] == LOWER {
            (self.source[self.in_arc], self.target[self.in_arc])
        } else {
            (self.target[self.in_arc], self.source[self.in_arc])
        };
        let mut delta = i64::MAX;
        let mut result = 0;
        let mut u = first;
        while u != self.join {
            if self.pred_dir[u] == UP {
                let d = self.flow[self.pred[u]];
                if d < delta {
                    delta = d;
                    self.u_out = u;
                    result = 1;
                }
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != self.join {
            if self.pred_dir[u] == DOWN {
                let d = self.flow[self.pred[u]];
                if d <= delta {
                    delta = d;
                    self.u_out = u;
                    result = 2;
                }
            }
            u = self.parent[u];
        }
        assert!(result != 0, "transportation problem is unbounded");
        if result == 1 {
            self.u_in = first;
            self.v_in = second;
        } else {
            self.u_in = second;
            self.v_in = first;
        }
        self.delta = delta;
    }

    fn change_flow(&mut self) {
        if self.delta > 0 {
            let val = self.state[self.in_arc] as i64 * self.delta;
            self.flow[self.in_arc] += val;
            let mut u = self.source[self.in_arc];
            while u != self.join {
                self.flow[self.pred[u]] -= self.pred_dir[u] as i64 * val;
                u = self.parent[u];
            }
            let mut u = self.target[self.in_arc];
            while u != self.join {
                self.flow[self.pred[u]] += self.pred_dir[u] as i64 * val;
                u = self.parent[u];
            }
        }
        self.state[self.in_arc] = TREE;
        self.state[self.pred[self.u_out]] = LOWER;
    }

    fn update_tree(&mut self) {
        let (u_in, v_in, u_out, join) = (self.u_in, self.v_in, self.u_out, self.join);
        let old_rev_thread = self.rev_thread[u_out];
        let old_succ_num = self.succ_num[u_out];
        let old_last_succ = self.last_succ[u_out];
        let v_out = self.parent[u_out];

        if u_in == u_out {
            self.parent[u_in] = v_in;
            self.pred[u_in] = self.in_arc;
            self.pred_dir[u_in] = if u_in == self.source[self.in_arc] { UP } else { DOWN };
            if self.thread[v_in] != u_out {
                let mut after = self.thread[old_last_succ];
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
                after = self.thread[v_in];
                self.thread[v_in] = u_out;
                self.rev_thread[u_out] = v_in;
                self.thread[old_last_succ] = after;
                self.rev_thread[after] = old_last_succ;
            }
        } else {
            let thread_continue = if old_rev_thread == v_in { self.thread[old_last_succ] } else { self.thread[v_in] };
            // re-hang the stem u_in -> ... -> u_out below v_in
            let mut stem = u_in;
            let mut par_stem = v_in;
            let mut last = self.last_succ[u_in];
            let mut after = self.thread[last];
            self.thread[v_in] = u_in;
            self.dirty.clear();
            self.dirty.push(v_in);
            while stem != u_out {
                let next_stem = self.parent[stem];
                self.thread[last] = next_stem;
                self.dirty.push(last);

                let before = self.rev_thread[stem];
                self.thread[before] = after;
                self.rev_thread[after] = before;

                self.parent[stem] = par_stem;
                par_stem = stem;
                stem = next_stem;

                last = if self.last_succ[stem] == self.last_succ[par_stem] {
                    self.rev_thread[par_stem]
                } else {
                    self.last_succ[stem]
                };
                after = self.thread[last];
            }
            self.parent[u_out] = par_stem;
            self.thread[last] = thread_continue;
            self.rev_thread[thread_continue] = last;
            self.last_succ[u_out] = last;

            if old_rev_thread != v_in {
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
            }
            for &u in &self.dirty {
                self.rev_thread[self.thread[u]] = u;
            }

            let mut tmp_sc = 0usize;
            let tmp_ls = self.last_succ[u_out];
            let mut u = u_out;
            while u != u_in {
                let p = self.parent[u];
                self.pred[u] = self.pred[p];
                self.pred_dir[u] = -self.pred_dir[p];
                tmp_sc = tmp_sc + self.succ_num[u] - self.succ_num[p];
                self.succ_num[u] = tmp_sc;
                self.last_succ[p] = tmp_ls;
                u = p;
            }
            self.pred[u_in] = self.in_arc;
            self.pred_dir[u_in] = if u_in == self.source[self.in_arc] { UP } else { DOWN };
            self.succ_num[u_in] = old_succ_num;
        }

        let up_limit_out = if self.last_succ[join] == v_in { join } else { NONE };
        let last_succ_out = self.last_succ[u_out];
        let mut u = v_in;
        while u != NONE && self.last_succ[u] == v_in {
            self.last_succ[u] = last_succ_out;
            u = self.parent[u];
        }
        if join != old_rev_thread && v_in != old_rev_thread {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = old_rev_thread;
                u = self.parent[u];
            }
        } else if last_succ_out != old_last_succ {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = last_succ_out;
                u = self.parent[u];
            }
        }

        let mut u = v_in;
        while u != join {
            self.succ_num[u] += old_succ_num;
            u = self.parent[u];
        }
        let mut u = v_out;
        while u != join {
            self.succ_num[u] -= old_succ_num;
            u = self.parent[u];
        }
    }

    fn update_potential(&mut self) {
        let sigma = self.pi[self.v_in] - self.pi[self.u_in] - self.pred_dir[self.u_in] as f64 * self.cost[self.in_arc];
        let end = self.thread[self.last_succ[self.u_in]];
        let mut u = self.u_in;
        while u != end {
            self.pi[u] += sigma;
            u = self.thread[u];
        }
    }

    /// Rebuilds all potentials from the tree, walking the preorder thread.
    fn recompute_potentials(&mut self) {
        self.pi[self.root] = 0.0;
        let mut u = self.thread[self.root];
        while u != self.root {
            let (p, e) = (self.parent[u], self.pred[u]);
            self.pi[u] = if self.pred_dir[u] == UP { self.pi[p] - self.cost[e] } else { self.pi[p] + self.cost[e] };
            u = self.thread[u];
        }
    }
}
