//! Boykov-Kolmogorov max-flow / min-cut on sparse graphs.
//!
//! Search trees grow from both terminals and are reused between augmentations;
//! orphans are re-adopted with the timestamp/distance heuristic. Capacities are
//! `f64`; integer-valued capacities are handled exactly.

use std::collections::VecDeque;

const NONE: usize = usize::MAX;
const TERMINAL: usize = usize::MAX - 1;
const ORPHAN: usize = usize::MAX - 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Sink,
}

#[derive(Clone, Debug, Default)]
pub struct FlowGraph {
    // per node
    first: Vec<usize>,
    tr_cap: Vec<f64>,
    parent: Vec<usize>,
    is_sink: Vec<bool>,
    ts: Vec<u64>,
    dist: Vec<u32>,
    active: Vec<bool>,
    // per arc; arcs come in pairs (a, a ^ 1)
    head: Vec<usize>,
    next: Vec<usize>,
    r_cap: Vec<f64>,
    flow: f64,
    solved: bool,
}

impl FlowGraph {
    pub fn new(nodes: usize) -> Self {
        FlowGraph {
            first: vec![NONE; nodes],
            tr_cap: vec![0.0; nodes],
            parent: vec![NONE; nodes],
            is_sink: vec![false; nodes],
            ts: vec![0; nodes],
            dist: vec![0; nodes],
            active: vec![false; nodes],
            ..Default::default()
        }
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        let mut g = FlowGraph::new(nodes);
        g.head.reserve(2 * edges);
        g.next.reserve(2 * edges);
        g.r_cap.reserve(2 * edges);
        g
    }

    pub fn node_count(&self) -> usize {
        self.first.len()
    }

    /// Adds `i -> j` with capacity `cap` and `j -> i` with `rev_cap`.
    pub fn add_edge(&mut self, i: usize, j: usize, cap: f64, rev_cap: f64) {
        debug_assert!(cap >= 0.0 && rev_cap >= 0.0 && i != j);
        let a = self.head.len();
        self.head.push(j);
        self.next.push(self.first[i]);
        self.r_cap.push(cap);
        self.first[i] = a;
        self.head.push(i);
        self.next.push(self.first[j]);
        self.r_cap.push(rev_cap);
        self.first[j] = a + 1;
    }

    /// Adds terminal capacities `source -> i` and `i -> sink`.
    pub fn add_tweights(&mut self, i: usize, to_source: f64, to_sink: f64) {
        debug_assert!(to_source >= 0.0 && to_sink >= 0.0);
        let (mut cs, mut ct) = (to_source, to_sink);
        let delta = self.tr_cap[i];
        if delta > 0.0 {
            cs += delta;
        } else {
            ct -= delta;
        }
        self.flow += cs.min(ct);
        self.tr_cap[i] = cs - ct;
    }

    fn set_active(&mut self, q: &mut VecDeque<usize>, i: usize) {
        if !self.active[i] {
            self.active[i] = true;
            q.push_back(i);
        }
    }

    /// Computes the maximum flow value.
    pub fn maxflow(&mut self) -> f64 {
        let n = self.node_count();
        let mut queue = VecDeque::new();
        let mut orphans: VecDeque<usize> = VecDeque::new();
        let mut time: u64 = 0;
        for i in 0..n {
            self.active[i] = false;
            self.ts[i] = 0;
            if self.tr_cap[i] > 0.0 {
                self.is_sink[i] = false;
                self.parent[i] = TERMINAL;
                self.dist[i] = 1;
                self.set_active(&mut queue, i);
            } else if self.tr_cap[i] < 0.0 {
                self.is_sink[i] = true;
                self.parent[i] = TERMINAL;
                self.dist[i] = 1;
                self.set_active(&mut queue, i);
            } else {
                self.parent[i] = NONE;
            }
        }
        let mut current: Option<usize> = None;
        loop {
            let i = match current {
                Some(i) if self.parent[i] != NONE => i,
                _ => {
                    let mut found = None;
                    while let Some(i) = queue.pop_front() {
                        self.active[i] = false;
                        if self.parent[i] != NONE {
                            found = Some(i);
                            break;
                        }
                    }
                    match found {
                        Some(i) => i,
                        None => break,
                    }
                }
            };
            // grow
            let mut bridge = NONE;
            let mut a = self.first[i];
            if !self.is_sink[i] {
                while a != NONE {
                    if self.r_cap[a] > 0.0 {
                        let j = self.head[a];
                        if self.parent[j] == NONE {
                            self.is_sink[j] = false;
                            self.parent[j] = a ^ 1;
                            self.ts[j] = self.ts[i];
                            self.dist[j] = self.dist[i] + 1;
                            self.set_active(&mut queue, j);
                        } else if self.is_sink[j] {
                            bridge = a;
                            break;
                        } else if self.ts[j] <= self.ts[i] && self.dist[j] > self.dist[i] {
                            self.parent[j] = a ^ 1;
                            self.ts[j] = self.ts[i];
                            self.dist[j] = self.dist[i] + 1;
                        }
                    }
                    a = self.next[a];
                }
            } else {
                while a != NONE {
                    if self.r_cap[a ^ 1] > 0.0 {
                        let j = self.head[a];
                        if self.parent[j] == NONE {
                            self.is_sink[j] = true;
                            self.parent[j] = a ^ 1;
                            self.ts[j] = self.ts[i];
                            self.dist[j] = self.dist[i] + 1;
                            self.set_active(&mut queue, j);
                        } else if !self.is_sink[j] {
                            bridge = a ^ 1;
                            break;
                        } else if self.ts[j] <= self.ts[i] && self.dist[j] > self.dist[i] {
                            self.parent[j] = a ^ 1;
                            self.ts[j] = self.ts[i];
                            self.dist[j] = self.dist[i] + 1;
                        }
                    }
                    a = self.next[a];
                }
            }
            time += 1;
            if bridge == NONE {
                current = None;
                continue;
            }
            current = Some(i);
            self.augment(bridge, &mut orphans);
            // adopt
            while let Some(o) = orphans.pop_front() {
                self.process_orphan(o, time, &mut queue, &mut orphans);
            }
        }
        self.solved = true;
        self.flow
    }

    fn augment(&mut self, middle: usize, orphans: &mut VecDeque<usize>) {
        // `middle` goes from a source-tree node to a sink-tree node
        let mut bottleneck = self.r_cap[middle];
        let mut i = self.head[middle ^ 1];
        loop {
            let a = self.parent[i];
            if a == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.r_cap[a ^ 1]);
            i = self.head[a];
        }
        bottleneck = bottleneck.min(self.tr_cap[i]);
        let mut i = self.head[middle];
        loop {
            let a = self.parent[i];
            if a == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.r_cap[a]);
            i = self.head[a];
        }
        bottleneck = bottleneck.min(-self.tr_cap[i]);

        self.r_cap[middle ^ 1] += bottleneck;
        self.r_cap[middle] -= bottleneck;
        let mut i = self.head[middle ^ 1];
        loop {
            let a = self.parent[i];
            if a == TERMINAL {
                break;
            }
            self.r_cap[a] += bottleneck;
            self.r_cap[a ^ 1] -= bottleneck;
            if self.r_cap[a ^ 1] <= 0.0 {
                self.parent[i] = ORPHAN;
                orphans.push_front(i);
            }
            i = self.head[a];
        }
        self.tr_cap[i] -= bottleneck;
        if self.tr_cap[i] <= 0.0 {
            self.parent[i] = ORPHAN;
            orphans.push_front(i);
        }
        let mut i = self.head[middle];
        loop {
            let a = self.parent[i];
            if a == TERMINAL {
                break;
            }
            self.r_cap[a ^ 1] += bottleneck;
            self.r_cap[a] -= bottleneck;
            if self.r_cap[a] <= 0.0 {
                self.parent[i] = ORPHAN;
                orphans.push_front(i);
            }
            i = self.head[a];
        }
        self.tr_cap[i] += bottleneck;
        if self.tr_cap[i] >= 0.0 {
            self.parent[i] = ORPHAN;
            orphans.push_front(i);
        }
        self.flow += bottleneck;
    }

    fn process_orphan(&mut self, i: usize, time: u64, queue: &mut VecDeque<usize>, orphans: &mut VecDeque<usize>) {
        let sink = self.is_sink[i];
        let mut best_arc = NONE;
        let mut best_d = u32::MAX;
        let mut a0 = self.first[i];
        while a0 != NONE {
            let cap = if sink { self.r_cap[a0] } else { self.r_cap[a0 ^ 1] };
            let mut j = self.head[a0];
            if cap > 0.0 && self.is_sink[j] == sink && self.parent[j] != NONE {
                // distance to the terminal through j, or MAX if j hangs off an orphan
                let mut d: u32 = 0;
                loop {
                    if self.ts[j] == time {
                        d += self.dist[j];
                        break;
                    }
                    let a = self.parent[j];
                    d += 1;
                    if a == TERMINAL {
                        self.ts[j] = time;
                        self.dist[j] = 1;
                        break;
                    }
                    if a == ORPHAN {
                        d = u32::MAX;
                        break;
                    }
                    j = self.head[a];
                }
                if d < u32::MAX {
                    if d < best_d {
                        best_arc = a0;
                        best_d = d;
                    }
                    let mut j = self.head[a0];
                    let mut dd = d;
                    while self.ts[j] != time {
                        self.ts[j] = time;
                        self.dist[j] = dd;
                        dd -= 1;
                        j = self.head[self.parent[j]];
                    }
                }
            }
            a0 = self.next[a0];
        }
        if best_arc != NONE {
            self.parent[i] = best_arc;
            self.ts[i] = time;
            self.dist[i] = best_d + 1;
            return;
        }
        self.parent[i] = NONE;
        let mut a0 = self.first[i];
        while a0 != NONE {
            let j = self.head[a0];
            if self.is_sink[j] == sink && self.parent[j] != NONE {
                let cap = if sink { self.r_cap[a0] } else { self.r_cap[a0 ^ 1] };
                if cap > 0.0 {
                    self.set_active(queue, j);
                }
                let a = self.parent[j];
                if a != TERMINAL && a != ORPHAN && self.head[a] == i {
                    self.parent[j] = ORPHAN;
                    orphans.push_back(j);
                }
            }
            a0 = self.next[a0];
        }
    }

    /// Side of the minimum cut; nodes unreachable from either terminal go to the sink.
    pub fn side(&self, i: usize) -> Side {
        assert!(self.solved, "call maxflow first");
        if self.parent[i] != NONE && !self.is_sink[i] {
            Side::Source
        } else {
            Side::Sink
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    struct Spec {
        n: usize,
        t: Vec<(f64, f64)>,
        e: Vec<(usize, usize, f64, f64)>,
    }

    fn build(s: &Spec) -> FlowGraph {
        let mut g = FlowGraph::new(s.n);
        for (i, &(a, b)) in s.t.iter().enumerate() {
            g.add_tweights(i, a, b);
        }
        for &(i, j, c, r) in &s.e {
            g.add_edge(i, j, c, r);
        }
        g
    }

    fn cut_value(s: &Spec, source_side: &[bool]) -> f64 {
        let mut v = 0.0;
        for (i, &(a, b)) in s.t.iter().enumerate() {
            v += if source_side[i] { b } else { a };
        }
        for &(i, j, c, r) in &s.e {
            if source_side[i] && !source_side[j] {
                v += c;
            }
            if source_side[j] && !source_side[i] {
                v += r;
            }
        }
        v
    }

    fn brute_min_cut(s: &Spec) -> f64 {
        (0..1u32 << s.n)
            .map(|mask| cut_value(s, &(0..s.n).map(|i| mask >> i & 1 == 1).collect::<Vec<_>>()))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn two_node_example() {
        let mut g = FlowGraph::new(1);
        g.add_tweights(0, 3.0, 2.0);
        assert_eq!(g.maxflow(), 2.0);
        assert_eq!(g.side(0), Side::Source);
    }

    #[test]
    fn zero_capacities() {
        let mut g = FlowGraph::new(3);
        g.add_edge(0, 1, 0.0, 0.0);
        g.add_edge(1, 2, 0.0, 0.0);
        assert_eq!(g.maxflow(), 0.0);
    }

    #[test]
    fn random_graphs_match_exhaustive_cut() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..150 {
            let n = rng.gen_range(1..=12);
            let t = (0..n)
                .map(|_| {
                    let a = if rng.gen_bool(0.5) { rng.gen_range(0..10) as f64 } else { 0.0 };
                    let b = if rng.gen_bool(0.5) { rng.gen_range(0..10) as f64 } else { 0.0 };
                    (a, b)
                })
                .collect();
            let mut e = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.gen_bool(0.35) {
                        e.push((i, j, rng.gen_range(0..8) as f64, rng.gen_range(0..8) as f64));
                    }
                }
            }
            let s = Spec { n, t, e };
            let mut g = build(&s);
            let f = g.maxflow();
            let oracle = brute_min_cut(&s);
            assert_eq!(f, oracle, "trial {trial}");
            let side: Vec<bool> = (0..n).map(|i| g.side(i) == Side::Source).collect();
            assert_eq!(cut_value(&s, &side), f, "trial {trial}: partition does not attain flow");
        }
    }

    #[test]
    fn grid_matches_exhaustive_cut() {
        // 3x4 grid, the shape the segmentation graphs take
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (w, h) = (4, 3);
            let n = w * h;
            let t = (0..n).map(|_| (rng.gen_range(0..20) as f64, rng.gen_range(0..20) as f64)).collect();
            let mut e = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    let i = x + w * y;
                    if x + 1 < w {
                        let c = rng.gen_range(0..15) as f64;
                        e.push((i, i + 1, c, c));
                    }
                    if y + 1 < h {
                        let c = rng.gen_range(0..15) as f64;
                        e.push((i, i + w, c, c));
                    }
                }
            }
            let s = Spec { n, t, e };
            let mut g = build(&s);
            assert_eq!(g.maxflow(), brute_min_cut(&s));
        }
    }
}
