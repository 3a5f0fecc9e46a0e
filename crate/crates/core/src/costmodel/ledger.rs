//! Shape-only replay of the tape's accounting rules. No values are stored,
//! so presets with a billion parameters cost microseconds to walk.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{Region, RegionStats, TapeStats};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Id(usize);

#[derive(Debug, Clone, Copy)]
enum Rule {
    Free,
    MatMul { a: usize, b: usize, macs: u64 },
    Attention { q: usize, k: usize, v: usize, unit: u64 },
}

#[derive(Debug, Clone)]
struct Node {
    inputs: Vec<usize>,
    shape: Vec<usize>,
    ng: bool,
    param: bool,
    saved: bool,
    internal: usize,
    region: Region,
    fwd: u64,
    rule: Rule,
}

/// Parameter shapes and trainability by name.
pub(crate) type ParamTable = HashMap<String, (Vec<usize>, bool)>;

pub(crate) struct Ledger<'a> {
    nodes: Vec<Node>,
    region: Region,
    table: &'a ParamTable,
    params: HashMap<String, usize>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [m, n] => (*m, *n),
        [n] => (1, *n),
        _ => (1, shape.iter().product()),
    }
}

impl<'a> Ledger<'a> {
    pub fn new(table: &'a ParamTable) -> Self {
        Self {
            nodes: Vec::new(),
            region: Region::Backbone,
            table,
            params: HashMap::new(),
        }
    }

    pub fn set_region(&mut self, r: Region) -> Region {
        std::mem::replace(&mut self.region, r)
    }

    pub fn shape(&self, x: Id) -> &[usize] {
        &self.nodes[x.0].shape
    }

    pub fn rows(&self, x: Id) -> usize {
        dims2(self.shape(x)).0
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.table.contains_key(name)
    }

    fn push(&mut self, inputs: Vec<usize>, shape: Vec<usize>, fwd: u64, rule: Rule) -> Id {
        let ng = inputs.iter().any(|&i| self.nodes[i].ng);
        self.nodes.push(Node {
            inputs,
            shape,
            ng,
            param: false,
            saved: false,
            internal: 0,
            region: self.region,
            fwd,
            rule,
        });
        Id(self.nodes.len() - 1)
    }

    fn save(&mut self, i: usize) {
        if !self.nodes[i].param {
            self.nodes[i].saved = true;
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Id> {
        if let Some(&id) = self.params.get(name) {
            return Ok(Id(id));
        }
        let (shape, trainable) = self
            .table
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        self.nodes.push(Node {
            inputs: vec![],
            shape,
            ng: trainable,
            param: true,
            saved: false,
            internal: 0,
            region: self.region,
            fwd: 0,
            rule: Rule::Free,
        });
        let id = self.nodes.len() - 1;
        self.params.insert(name.to_string(), id);
        Ok(Id(id))
    }

    pub fn constant(&mut self, shape: &[usize]) -> Id {
        self.push(vec![], shape.to_vec(), 0, Rule::Free)
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Result<Id> {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        if k != k2 {
            return Err(Error::Shape {
                op: "ledger matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        if self.nodes[a.0].ng {
            self.save(b.0);
        }
        if self.nodes[b.0].ng {
            self.save(a.0);
        }
        let macs = (m * k * n) as u64;
        Ok(self.push(vec![a.0, b.0], vec![m, n], macs, Rule::MatMul { a: a.0, b: b.0, macs }))
    }

    /// Elementwise op whose output has the shape of `x` and saves nothing.
    pub fn pointwise(&mut self, inputs: &[Id], x: Id) -> Id {
        let shape = self.shape(x).to_vec();
        self.push(inputs.iter().map(|i| i.0).collect(), shape, 0, Rule::Free)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        self.pointwise(&[a, b], a)
    }

    pub fn scale(&mut self, x: Id, alpha: Id) -> Id {
        if self.nodes[alpha.0].ng {
            self.save(x.0);
        }
        self.pointwise(&[x, alpha], x)
    }

    /// Ops that save their first input when their output needs a gradient:
    /// gelu, layer norm, cross-entropy.
    fn saving_unary(&mut self, inputs: &[Id], shape: Vec<usize>) -> Id {
        let id = self.push(inputs.iter().map(|i| i.0).collect(), shape, 0, Rule::Free);
        if self.nodes[id.0].ng {
            self.save(inputs[0].0);
        }
        id
    }

    pub fn gelu(&mut self, x: Id) -> Id {
        let s = self.shape(x).to_vec();
        self.saving_unary(&[x], s)
    }

    pub fn layer_norm(&mut self, x: Id, g: Id, b: Id) -> Id {
        let s = self.shape(x).to_vec();
        self.saving_unary(&[x, g, b], s)
    }

    pub fn cross_entropy(&mut self, logits: Id) -> Id {
        self.saving_unary(&[logits], vec![])
    }

    pub fn attention(&mut self, q: Id, k: Id, v: Id, heads: usize) -> Id {
        let (nq, d) = dims2(self.shape(q));
        let nk = self.rows(k);
        let (qng, kng, vng) = (self.nodes[q.0].ng, self.nodes[k.0].ng, self.nodes[v.0].ng);
        if kng {
            self.save(q.0);
        }
        if qng {
            self.save(k.0);
        }
        if qng || kng {
            self.save(v.0);
        }
        let unit = (nq * nk * d) as u64;
        let id = self.push(
            vec![q.0, k.0, v.0],
            vec![nq, d],
            2 * unit,
            Rule::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                unit,
            },
        );
        if qng || kng || vng {
            self.nodes[id.0].internal = heads * nq * nk;
        }
        id
    }

    pub fn reshape_op(&mut self, x: Id, shape: Vec<usize>) -> Id {
        self.push(vec![x.0], shape, 0, Rule::Free)
    }

    pub fn concat_rows(&mut self, a: Id, b: Id) -> Id {
        let (m1, n) = dims2(self.shape(a));
        let m2 = self.rows(b);
        self.push(vec![a.0, b.0], vec![m1 + m2, n], 0, Rule::Free)
    }

    /// Backward walk from `loss` followed by aggregation, mirroring
    /// [`crate::autodiff::Tape::tape_stats`].
    pub fn finish(&self, loss: Id, bytes_per_elem: u64) -> TapeStats {
        let mut bwd = vec![0u64; self.nodes.len()];
        let mut has_grad = vec![false; self.nodes.len()];
        has_grad[loss.0] = self.nodes[loss.0].ng;
        for id in (0..=loss.0).rev() {
            let n = &self.nodes[id];
            if !n.ng || !has_grad[id] {
                continue;
            }
            let ng = |i: usize| self.nodes[i].ng;
            bwd[id] = match n.rule {
                Rule::Free => 0,
                Rule::MatMul { a, b, macs } => macs * (u64::from(ng(a)) + u64::from(ng(b))),
                Rule::Attention { q, k, v, unit } => {
                    unit * (u64::from(ng(q) || ng(k)) + u64::from(ng(v)) + u64::from(ng(q)) + u64::from(ng(k)))
                }
            };
            for &i in &n.inputs {
                if ng(i) {
                    has_grad[i] = true;
                }
            }
        }
        let mut per_region: BTreeMap<Region, RegionStats> =
            Region::ALL.iter().map(|r| (*r, RegionStats::default())).collect();
        for (n, b) in self.nodes.iter().zip(&bwd) {
            let numel: usize = n.shape.iter().product();
            let cached = if n.saved { numel } else { 0 } + n.internal;
            let e = per_region.entry(n.region).or_default();
            e.fwd_macs += n.fwd;
            e.bwd_macs += b;
            e.cached_bytes += cached as u64 * bytes_per_elem;
        }
        let mut stats = TapeStats {
            per_region,
            ..TapeStats::default()
        };
        for r in stats.per_region.values() {
            stats.total_fwd_macs += r.fwd_macs;
            stats.total_bwd_macs += r.bwd_macs;
            stats.cached_bytes += r.cached_bytes;
        }
        stats
    }
}
