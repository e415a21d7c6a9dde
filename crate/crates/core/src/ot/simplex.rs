//! Primal network simplex for the uncapacitated transportation problem.
//!
//! The spanning-tree bookkeeping (thread / reverse-thread / successor counts)
//! and the strongly feasible leaving-arc rule follow LEMON's
//! `NetworkSimplex`, restricted to infinite capacities and equality supply
//! constraints. Costs and flows are integers so that pricing, ratio tests and
//! potentials are exact; strongly feasible trees then rule out cycling.

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;
const INF: i64 = i64::MAX;

const STATE_TREE: i8 = 0;
const STATE_LOWER: i8 = 1;

const DIR_UP: i64 = 1;
const DIR_DOWN: i64 = -1;

const MIN_BLOCK_SIZE: usize = 10;

/// Optimal basis of a transportation problem.
#[derive(Debug, Clone)]
pub(crate) struct Solution {
    /// Positive flows on real arcs as `(source, target, units)`.
    pub flows: Vec<(usize, usize, i64)>,
    /// Node potentials in LEMON's convention: the reduced cost of arc
    /// `s -> t` is `cost + pi[s] - pi[t]`. Sources first, then targets.
    pub potentials: Vec<i64>,
    pub pivots: u64,
}

pub(crate) struct TransportSimplex {
    sources: usize,
    targets: usize,
    node_num: usize,
    arc_num: usize,
    root: usize,

    // arc data, real arcs first (`i * targets + j`), then one artificial arc per node
    arc_source: Vec<u32>,
    arc_target: Vec<u32>,
    cost: Vec<i64>,
    flow: Vec<i64>,
    state: Vec<i8>,

    // spanning tree
    parent: Vec<usize>,
    pred: Vec<usize>,
    pred_dir: Vec<i64>,
    thread: Vec<usize>,
    rev_thread: Vec<usize>,
    succ_num: Vec<usize>,
    last_succ: Vec<usize>,
    pi: Vec<i64>,
    dirty_revs: Vec<usize>,

    // pivot state
    block_size: usize,
    next_arc: usize,
    in_arc: usize,
    join: usize,
    u_in: usize,
    v_in: usize,
    u_out: usize,
    delta: i64,
}

impl TransportSimplex {
    /// `cost` is row-major `supply.len() x demand.len()`; supplies and
    /// demands must be non-negative with equal totals.
    pub fn new(supply: &[i64], demand: &[i64], cost: Vec<i64>) -> Self {
        let sources = supply.len();
        let targets = demand.len();
        let node_num = sources + targets;
        let arc_num = sources * targets;
        let all_arc_num = arc_num + node_num;
        debug_assert_eq!(cost.len(), arc_num);
        debug_assert_eq!(supply.iter().sum::<i64>(), demand.iter().sum::<i64>());
        debug_assert!(node_num < u32::MAX as usize);

        let mut arc_source = Vec::with_capacity(all_arc_num);
        let mut arc_target = Vec::with_capacity(all_arc_num);
        for i in 0..sources {
            for j in 0..targets {
                arc_source.push(i as u32);
                arc_target.push((sources + j) as u32);
            }
        }
        arc_source.resize(all_arc_num, 0);
        arc_target.resize(all_arc_num, 0);

        let max_cost = cost.iter().copied().max().unwrap_or(0);
        let art_cost = (max_cost + 1) * node_num as i64;

        let mut cost = cost;
        cost.resize(all_arc_num, 0);
        let mut state = vec![STATE_LOWER; all_arc_num];
        let mut flow = vec![0i64; all_arc_num];

        let root = node_num;
        let mut parent = vec![NONE; node_num + 1];
        let mut pred = vec![NONE; node_num + 1];
        let mut pred_dir = vec![0; node_num + 1];
        let mut thread = vec![0; node_num + 1];
        let mut rev_thread = vec![0; node_num + 1];
        let mut succ_num = vec![1; node_num + 1];
        let mut last_succ = vec![0; node_num + 1];
        let mut pi = vec![0i64; node_num + 1];

        for u in 0..node_num {
            let e = arc_num + u;
            let node_supply = if u < sources {
                supply[u]
            } else {
                -demand[u - sources]
            };
            parent[u] = root;
            pred[u] = e;
            thread[u] = u + 1;
            rev_thread[u + 1] = u;
            succ_num[u] = 1;
            last_succ[u] = u;
            state[e] = STATE_TREE;
            if node_supply >= 0 {
                pred_dir[u] = DIR_UP;
                pi[u] = 0;
                arc_source[e] = u as u32;
                arc_target[e] = root as u32;
                flow[e] = node_supply;
                cost[e] = 0;
            } else {
                pred_dir[u] = DIR_DOWN;
                pi[u] = art_cost;
                arc_source[e] = root as u32;
                arc_target[e] = u as u32;
                flow[e] = -node_supply;
                cost[e] = art_cost;
            }
        }
        parent[root] = NONE;
        pred[root] = NONE;
        thread[root] = 0;
        rev_thread[0] = root;
        succ_num[root] = node_num + 1;
        last_succ[root] = root - 1;
        pi[root] = 0;

        let block_size = ((arc_num as f64).sqrt().ceil() as usize).max(MIN_BLOCK_SIZE);

        Self {
            sources,
            targets,
            node_num,
            arc_num,
            root,
            arc_source,
            arc_target,
            cost,
            flow,
            state,
            parent,
            pred,
            pred_dir,
            thread,
            rev_thread,
            succ_num,
            last_succ,
            pi,
            dirty_revs: Vec::with_capacity(node_num),
            block_size,
            next_arc: 0,
            in_arc: 0,
            join: 0,
            u_in: 0,
            v_in: 0,
            u_out: 0,
            delta: 0,
        }
    }

    #[inline]
    fn reduced_cost(&self, e: usize) -> i64 {
        self.cost[e] + self.pi[self.arc_source[e] as usize] - self.pi[self.arc_target[e] as usize]
    }

    /// Block search pricing: scan blocks of arcs cyclically and take the most
    /// negative reduced cost of the first block that has one.
    fn find_entering_arc(&mut self) -> bool {
        let mut min = 0i64;
        let mut cnt = self.block_size;
        let mut e = self.next_arc;
        let mut scanned = 0;
        while scanned < self.arc_num {
            let c = self.state[e] as i64 * self.reduced_cost(e);
            if c < min {
                min = c;
                self.in_arc = e;
            }
            cnt -= 1;
            scanned += 1;
            e += 1;
            if e == self.arc_num {
                e = 0;
            }
            if cnt == 0 {
                if min < 0 {
                    break;
                }
                cnt = self.block_size;
            }
        }
        if min >= 0 {
            return false;
        }
        self.next_arc = e;
        true
    }

    fn find_join_node(&mut self) {
        let mut u = self.arc_source[self.in_arc] as usize;
        let mut v = self.arc_target[self.in_arc] as usize;
        while u != v {
            if self.succ_num[u] < self.succ_num[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        self.join = u;
    }

    /// Returns false when the entering arc itself would leave, which cannot
    /// happen without capacities but is kept for parity with the general rule.
    fn find_leaving_arc(&mut self) -> bool {
        let (first, second) = if self.state[self.in_arc] == STATE_LOWER {
            (
                self.arc_source[self.in_arc] as usize,
                self.arc_target[self.in_arc] as usize,
            )
        } else {
            (
                self.arc_target[self.in_arc] as usize,
                self.arc_source[self.in_arc] as usize,
            )
        };
        self.delta = INF;
        let mut result = 0;

        let mut u = first;
        while u != self.join {
            let e = self.pred[u];
            let d = if self.pred_dir[u] == DIR_DOWN {
                INF
            } else {
                self.flow[e]
            };
            if d < self.delta {
                self.delta = d;
                self.u_out = u;
                result = 1;
            }
            u = self.parent[u];
        }

        let mut u = second;
        while u != self.join {
            let e = self.pred[u];
            let d = if self.pred_dir[u] == DIR_UP {
                INF
            } else {
                self.flow[e]
            };
            if d <= self.delta {
                self.delta = d;
                self.u_out = u;
                result = 2;
            }
            u = self.parent[u];
        }

        if result == 1 {
            self.u_in = first;
            self.v_in = second;
        } else {
            self.u_in = second;
            self.v_in = first;
        }
        result != 0
    }

    fn change_flow(&mut self, change: bool) {
        if self.delta > 0 {
            let val = self.state[self.in_arc] as i64 * self.delta;
            self.flow[self.in_arc] += val;
            let mut u = self.arc_source[self.in_arc] as usize;
            while u != self.join {
                self.flow[self.pred[u]] -= self.pred_dir[u] * val;
                u = self.parent[u];
            }
            let mut u = self.arc_target[self.in_arc] as usize;
            while u != self.join {
                self.flow[self.pred[u]] += self.pred_dir[u] * val;
                u = self.parent[u];
            }
        }
        if change {
            self.state[self.in_arc] = STATE_TREE;
            // uncapacitated: a leaving arc always drops to zero flow
            self.state[self.pred[self.u_out]] = STATE_LOWER;
        } else {
            self.state[self.in_arc] = -self.state[self.in_arc];
        }
    }

    fn update_tree_structure(&mut self) {
        let u_in = self.u_in;
        let v_in = self.v_in;
        let u_out = self.u_out;
        let join = self.join;
        let in_arc = self.in_arc;

        let old_rev_thread = self.rev_thread[u_out];
        let old_succ_num = self.succ_num[u_out];
        let old_last_succ = self.last_succ[u_out];
        let v_out = self.parent[u_out];

        let in_dir = if u_in == self.arc_source[in_arc] as usize {
            DIR_UP
        } else {
            DIR_DOWN
        };

        if u_in == u_out {
            self.parent[u_in] = v_in;
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = in_dir;

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
            let thread_continue = if old_rev_thread == v_in {
                self.thread[old_last_succ]
            } else {
                self.thread[v_in]
            };

            // reverse the stem between u_in and u_out
            let mut stem = u_in;
            let mut par_stem = v_in;
            let mut last = self.last_succ[u_in];
            let mut after = self.thread[last];
            self.thread[v_in] = u_in;
            self.dirty_revs.clear();
            self.dirty_revs.push(v_in);
            while stem != u_out {
                let next_stem = self.parent[stem];
                self.thread[last] = next_stem;
                self.dirty_revs.push(last);

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

            for &u in &self.dirty_revs {
                self.rev_thread[self.thread[u]] = u;
            }

            let mut tmp_sc = 0usize;
            let tmp_ls = self.last_succ[u_out];
            let mut u = u_out;
            while u != u_in {
                let p = self.parent[u];
                self.pred[u] = self.pred[p];
                self.pred_dir[u] = -self.pred_dir[p];
                tmp_sc += self.succ_num[u] - self.succ_num[p];
                self.succ_num[u] = tmp_sc;
                self.last_succ[p] = tmp_ls;
                u = p;
            }
            self.pred[u_in] = in_arc;
            self.pred_dir[u_in] = in_dir;
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
            while u != up_limit_out && u != NONE && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = old_rev_thread;
                u = self.parent[u];
            }
        } else if last_succ_out != old_last_succ {
            let mut u = v_out;
            while u != up_limit_out && u != NONE && self.last_succ[u] == old_last_succ {
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
        let c = self.cost[self.in_arc];
        let sigma =
            self.pi[self.v_in] - self.pi[self.u_in] - self.pred_dir[self.u_in] * c;
        let end = self.thread[self.last_succ[self.u_in]];
        let mut u = self.u_in;
        while u != end {
            self.pi[u] += sigma;
            u = self.thread[u];
        }
    }

    /// Runs pivots until no arc prices out, or fails after `max_pivots`.
    pub fn solve(mut self, max_pivots: u64) -> Result<Solution> {
        let mut pivots = 0u64;
        while self.find_entering_arc() {
            if pivots >= max_pivots {
                return Err(Error::NonConvergence { iterations: pivots });
            }
            pivots += 1;
            self.find_join_node();
            let change = self.find_leaving_arc();
            if self.delta == INF {
                // a negative cycle of infinite capacity; impossible with
                // non-negative costs on a bipartite graph
                return Err(Error::validation("transportation problem is unbounded"));
            }
            self.change_flow(change);
            if change {
                self.update_tree_structure();
                self.update_potential();
            }
        }

        if (self.arc_num..self.arc_num + self.node_num).any(|e| self.flow[e] != 0) {
            return Err(Error::validation(
                "transportation problem is infeasible: supplies and demands do not balance",
            ));
        }

        let mut flows = Vec::with_capacity(self.node_num);
        for u in 0..self.node_num {
            let e = self.pred[u];
            if e < self.arc_num && self.flow[e] > 0 {
                flows.push((e / self.targets, e % self.targets, self.flow[e]));
            }
        }
        flows.sort_unstable();
        debug_assert!(flows.iter().all(|&(i, _, _)| i < self.sources));

        let mut potentials = self.pi;
        potentials.truncate(self.root);
        Ok(Solution {
            flows,
            potentials,
            pivots,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_prefers_the_diagonal() {
        let s = TransportSimplex::new(&[1, 1], &[1, 1], vec![0, 5, 5, 0])
            .solve(1000)
            .unwrap();
        assert_eq!(s.flows, vec![(0, 0, 1), (1, 1, 1)]);
    }

    #[test]
    fn unequal_supplies_split_mass() {
        // one source of 3 units to three sinks of 1 unit
        let s = TransportSimplex::new(&[3], &[1, 1, 1], vec![1, 2, 3])
            .solve(1000)
            .unwrap();
        assert_eq!(s.flows, vec![(0, 0, 1), (0, 1, 1), (0, 2, 1)]);
    }

    #[test]
    fn pivot_budget_is_enforced() {
        let err = TransportSimplex::new(&[1, 1], &[1, 1], vec![5, 0, 0, 5])
            .solve(0)
            .unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 0 }));
    }

    #[test]
    fn potentials_price_tree_arcs_at_zero() {
        let cost = vec![4, 1, 3, 2, 0, 5, 3, 2, 2];
        let s = TransportSimplex::new(&[2, 2, 2], &[2, 2, 2], cost.clone())
            .solve(1000)
            .unwrap();
        let pi = &s.potentials;
        for &(i, j, _) in &s.flows {
            assert_eq!(cost[i * 3 + j] + pi[i] - pi[3 + j], 0);
        }
        for i in 0..3 {
            for j in 0..3 {
                assert!(cost[i * 3 + j] + pi[i] - pi[3 + j] >= 0);
            }
        }
        let total: i64 = s.flows.iter().map(|&(i, j, f)| f * cost[i * 3 + j]).sum();
        // optimum found by hand: 0->1 (1), 1->0 (2), 2->2 (2) in units of 2
        assert_eq!(total, 2 * (1 + 2 + 2));
    }
}
