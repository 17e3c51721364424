//! Randomized kd-forest: plaintext build, encryption and encrypted search.
//!
//! Trees are built over the approximated L1 vectors `v̂`, one image per
//! node. A node splits on one coordinate `s`; the left subtree holds values
//! `<=` the node's own value at `s` and the right subtree strictly greater.
//! Descent compares OPE images of the request coordinate and the split
//! value, and back-tracking prunes a branch when the worst queued `Comp`
//! is already below the node's hyperplane `Comp`.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::sync::Mutex;

use num_bigint::BigInt;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, KlFixed};
use crate::ive::{self, read_u32, read_u64, write_u32, write_u64, Ciphertext};
use crate::modmath;
use crate::ope::{Ope, OpeCiphertext};
use crate::secure_compare::{self, CompareKeys, CompareParams, PreparedRequest};

pub const DEFAULT_TREES: usize = 10;
pub const DEFAULT_QUEUE: usize = 10;
/// Split dimensions are drawn among this many highest-variance coordinates.
pub const TOP_VARIANCE_DIMS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlainNode {
    pub image: u32,
    /// `(dimension, value)`; `None` for leaves.
    pub split: Option<(usize, i64)>,
    pub left: Option<u32>,
    pub right: Option<u32>,
}

/// Nodes stored in pre-order; the root is index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlainTree {
    pub nodes: Vec<PlainNode>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlainForest {
    pub trees: Vec<PlainTree>,
}

impl PlainForest {
    /// `(tree, node, split dim)` for every non-leaf node.
    pub fn plan(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (t, tree) in self.trees.iter().enumerate() {
            for (i, n) in tree.nodes.iter().enumerate() {
                if let Some((s, _)) = n.split {
                    out.push((t, i, s));
                }
            }
        }
        out
    }

    pub fn split_fields(&self) -> Vec<usize> {
        features::split_fields(&self.plan())
    }
}

/// Builds `num_trees` trees over `vectors`, indexed by their position's id.
pub fn build_forest<R: Rng + ?Sized>(
    vectors: &[(u32, Vec<i64>)],
    num_trees: usize,
    rng: &mut R,
) -> Result<PlainForest> {
    if vectors.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let dim = vectors[0].1.len();
    if let Some((_, v)) = vectors.iter().find(|(_, v)| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    let mut trees = Vec::with_capacity(num_trees);
    for _ in 0..num_trees {
        let mut nodes = Vec::with_capacity(vectors.len());
        let idx: Vec<usize> = (0..vectors.len()).collect();
        build_node(vectors, idx, &mut nodes, rng);
        trees.push(PlainTree { nodes });
    }
    Ok(PlainForest { trees })
}

fn build_node<R: Rng + ?Sized>(
    vectors: &[(u32, Vec<i64>)],
    mut idx: Vec<usize>,
    nodes: &mut Vec<PlainNode>,
    rng: &mut R,
) -> Option<u32> {
    if idx.is_empty() {
        return None;
    }
    let me = nodes.len();
    if idx.len() == 1 {
        nodes.push(PlainNode {
            image: vectors[idx[0]].0,
            split: None,
            left: None,
            right: None,
        });
        return Some(me as u32);
    }
    let s = choose_split(vectors, &idx, rng);
    idx.sort_by_key(|&i| (vectors[i].1[s], vectors[i].0));
    let median = vectors[idx[(idx.len() - 1) / 2]].1[s];
    let pos = idx
        .iter()
        .rposition(|&i| vectors[i].1[s] == median)
        .expect("median is present");
    let right = idx.split_off(pos + 1);
    let node = idx.pop().expect("pivot is present");
    nodes.push(PlainNode {
        image: vectors[node].0,
        split: Some((s, median)),
        left: None,
        right: None,
    });
    let l = build_node(vectors, idx, nodes, rng);
    let r = build_node(vectors, right, nodes, rng);
    nodes[me].left = l;
    nodes[me].right = r;
    Some(me as u32)
}

fn choose_split<R: Rng + ?Sized>(vectors: &[(u32, Vec<i64>)], idx: &[usize], rng: &mut R) -> usize {
    let dim = vectors[idx[0]].1.len();
    let n = idx.len() as f64;
    let mut var: Vec<(f64, usize)> = (0..dim)
        .map(|d| {
            let mean = idx.iter().map(|&i| vectors[i].1[d] as f64).sum::<f64>() / n;
            let v = idx
                .iter()
                .map(|&i| (vectors[i].1[d] as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            (v, d)
        })
        .filter(|(v, _)| *v > 0.0)
        .collect();
    if var.is_empty() {
        return 0;
    }
    var.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    var.truncate(TOP_VARIANCE_DIMS);
    var[rng.gen_range(0..var.len())].1
}

/// Per-image ciphertexts shared by every tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageCipher {
    pub l1: Ciphertext,
    pub kl: Ciphertext,
    /// Sealed keyword list, opaque to the cloud.
    pub keywords: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitCipher {
    pub dim: u32,
    pub ope: OpeCiphertext,
    pub l1_hyper: Ciphertext,
    pub kl_hyper: Ciphertext,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedNode {
    pub image: u32,
    pub split: Option<SplitCipher>,
    pub left: Option<u32>,
    pub right: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedTree {
    pub nodes: Vec<EncryptedNode>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedForest {
    pub q: BigInt,
    pub default_queue: u32,
    pub split_fields: Vec<usize>,
    pub images: BTreeMap<u32, ImageCipher>,
    pub trees: Vec<EncryptedTree>,
}

impl EncryptedForest {
    pub fn node_count(&self) -> usize {
        self.images.len()
    }
}

/// Adds hyperplane ciphertexts and OPE split values to a plaintext forest.
#[allow(clippy::too_many_arguments)]
pub fn encrypt_forest<R: Rng + ?Sized>(
    forest: &PlainForest,
    plain: &BTreeMap<u32, (Vec<i64>, KlFixed)>,
    images: BTreeMap<u32, ImageCipher>,
    ope: &Ope,
    params: &CompareParams,
    keys: &CompareKeys,
    default_queue: u32,
    rng: &mut R,
) -> Result<EncryptedForest> {
    let (r, e) = (params.obf.r, params.obf.eps_max);
    let mut trees = Vec::with_capacity(forest.trees.len());
    for tree in &forest.trees {
        let mut nodes = Vec::with_capacity(tree.nodes.len());
        for n in &tree.nodes {
            if !images.contains_key(&n.image) {
                return Err(Error::MissingCipher(n.image));
            }
            let split = match n.split {
                None => None,
                Some((s, value)) => {
                    let (v_hat, kl) = plain.get(&n.image).ok_or(Error::MissingCipher(n.image))?;
                    let eps = |rng: &mut R| if e == 0 { 0 } else { rng.gen_range(-e..=e) };
                    let h = secure_compare::l1_hyper_vector(v_hat, s, r, eps(rng));
                    let k = secure_compare::kl_hyper_vector(kl, None, r, eps(rng));
                    Some(SplitCipher {
                        dim: s as u32,
                        ope: ope.encrypt_signed(value)?,
                        l1_hyper: ive::encrypt(&keys.hyper_data, &h, &params.ive, rng)?,
                        kl_hyper: ive::encrypt(&keys.kl_data, &k, &params.ive, rng)?,
                    })
                }
            };
            nodes.push(EncryptedNode {
                image: n.image,
                split,
                left: n.left,
                right: n.right,
            });
        }
        trees.push(EncryptedTree { nodes });
    }
    Ok(EncryptedForest {
        q: params.ive.q.clone(),
        default_queue,
        split_fields: forest.split_fields(),
        images,
        trees,
    })
}

/// Inserts `(comp, id)` keeping the queue sorted and at most `cap` long.
/// Returns whether the queue changed.
pub fn queue_push(queue: &mut Vec<(i128, u32)>, cap: usize, comp: i128, id: u32) -> bool {
    let entry = (comp, id);
    if queue.len() >= cap {
        match queue.last() {
            Some(worst) if entry < *worst => {
                queue.pop();
            }
            _ => return false,
        }
    }
    let pos = queue.partition_point(|e| *e < entry);
    queue.insert(pos, entry);
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetMode {
    /// Stop a tree once the shared visited set reaches the budget.
    Shared,
    /// Each tree counts only its own comparisons.
    PerTree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    /// One node step per tree per turn on a single thread.
    RoundRobin,
    /// One thread per tree over shared state.
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub ap_percent: f64,
    pub queue_size: usize,
    pub budget_mode: BudgetMode,
    pub schedule: Schedule,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            ap_percent: 100.0,
            queue_size: DEFAULT_QUEUE,
            budget_mode: BudgetMode::Shared,
            schedule: Schedule::RoundRobin,
        }
    }
}

impl SearchConfig {
    pub fn budget(&self, nodes: usize) -> usize {
        ((self.ap_percent / 100.0) * nodes as f64).ceil() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.ap_percent > 0.0 && self.ap_percent <= 100.0) {
            return Err(Error::InvalidParams(format!(
                "ap_percent {} outside (0, 100]",
                self.ap_percent
            )));
        }
        if self.queue_size == 0 {
            return Err(Error::InvalidParams("queue size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything the cloud receives for one query.
#[derive(Clone, Debug)]
pub struct SearchRequest {
    pub prepared: PreparedRequest,
    /// OPE image of the request coordinate for each split field.
    pub split_values: BTreeMap<usize, OpeCiphertext>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompareKind {
    Node,
    Hyperplane,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub tree: u32,
    pub image: u32,
    pub kind: CompareKind,
    pub comp: i128,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Final queue, ascending by `(Comp, id)`.
    pub results: Vec<(u32, i128)>,
    pub log: Vec<LogEntry>,
    pub inner_products: u64,
    pub visited: usize,
}

impl SearchOutcome {
    pub fn ids(&self) -> Vec<u32> {
        self.results.iter().map(|(id, _)| *id).collect()
    }
}

#[derive(Default)]
struct Shared {
    queue: Vec<(i128, u32)>,
    visited: HashSet<u32>,
    log: Vec<LogEntry>,
    inner_products: u64,
}

struct TreeCursor {
    tree: u32,
    cursor: Option<u32>,
    stack: Vec<(u32, u32)>,
    own_visits: usize,
    done: bool,
}

struct Searcher<'a> {
    forest: &'a EncryptedForest,
    req: &'a SearchRequest,
    cfg: &'a SearchConfig,
    budget: usize,
}

impl Searcher<'_> {
    /// One node step of one tree; takes the shared lock only around reads
    /// and writes of the queue and visited set.
    fn step(&self, t: &mut TreeCursor, shared: &Mutex<Shared>) -> Result<()> {
        if t.done {
            return Ok(());
        }
        let tree = &self.forest.trees[t.tree as usize];
        match t.cursor {
            Some(ix) => {
                let node = tree
                    .nodes
                    .get(ix as usize)
                    .ok_or_else(|| Error::format("forest", "bad child offset"))?;
                let fresh = {
                    let mut g = shared.lock().expect("search state poisoned");
                    if g.visited.contains(&node.image) {
                        false
                    } else {
                        let spent = match self.cfg.budget_mode {
                            BudgetMode::Shared => g.visited.len(),
                            BudgetMode::PerTree => t.own_visits,
                        };
                        if spent >= self.budget {
                            t.done = true;
                            return Ok(());
                        }
                        g.visited.insert(node.image);
                        true
                    }
                };
                if fresh {
                    t.own_visits += 1;
                    let img = self
                        .forest
                        .images
                        .get(&node.image)
                        .ok_or(Error::MissingCipher(node.image))?;
                    let comp = self.req.prepared.comp_vectors(&img.l1, &img.kl)?;
                    let mut g = shared.lock().expect("search state poisoned");
                    g.inner_products += 2;
                    g.log.push(LogEntry {
                        tree: t.tree,
                        image: node.image,
                        kind: CompareKind::Node,
                        comp,
                    });
                    queue_push(&mut g.queue, self.cfg.queue_size, comp, node.image);
                }
                t.cursor = match &node.split {
                    None => None,
                    Some(sp) => {
                        let c = self
                            .req
                            .split_values
                            .get(&(sp.dim as usize))
                            .ok_or_else(|| {
                                Error::Validation(format!("request lacks split field {}", sp.dim))
                            })?;
                        let (near, far) = if *c <= sp.ope {
                            (node.left, node.right)
                        } else {
                            (node.right, node.left)
                        };
                        if let Some(f) = far {
                            t.stack.push((ix, f));
                        }
                        near
                    }
                };
            }
            None => {
                let Some((ix, far)) = t.stack.pop() else {
                    t.done = true;
                    return Ok(());
                };
                let node = &tree.nodes[ix as usize];
                let sp = node
                    .split
                    .as_ref()
                    .ok_or_else(|| Error::format("forest", "branch without split"))?;
                let comp_h = self
                    .req
                    .prepared
                    .comp_hyper_vectors(&sp.l1_hyper, &sp.kl_hyper)?;
                let mut g = shared.lock().expect("search state poisoned");
                g.inner_products += 2;
                g.log.push(LogEntry {
                    tree: t.tree,
                    image: node.image,
                    kind: CompareKind::Hyperplane,
                    comp: comp_h,
                });
                let prune = g.queue.len() >= self.cfg.queue_size
                    && g.queue.last().is_some_and(|w| w.0 < comp_h);
                if !prune {
                    t.cursor = Some(far);
                }
            }
        }
        Ok(())
    }
}

/// Runs the shared-queue, shared-visited-set search over every tree.
pub fn search(
    forest: &EncryptedForest,
    req: &SearchRequest,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    for &s in &forest.split_fields {
        if !req.split_values.contains_key(&s) {
            return Err(Error::Validation(format!("request lacks split field {s}")));
        }
    }
    let searcher = Searcher {
        forest,
        req,
        cfg,
        budget: cfg.budget(forest.node_count()),
    };
    let shared = Mutex::new(Shared::default());
    let mut cursors: Vec<TreeCursor> = (0..forest.trees.len())
        .map(|t| TreeCursor {
            tree: t as u32,
            cursor: (!forest.trees[t].nodes.is_empty()).then_some(0),
            stack: Vec::new(),
            own_visits: 0,
            done: false,
        })
        .collect();

    match cfg.schedule {
        Schedule::RoundRobin => {
            while cursors.iter().any(|c| !c.done) {
                for c in cursors.iter_mut() {
                    searcher.step(c, &shared)?;
                }
            }
        }
        Schedule::Parallel => {
            let results: Vec<Result<()>> = std::thread::scope(|scope| {
                let handles: Vec<_> = cursors
                    .iter_mut()
                    .map(|c| {
                        let (searcher, shared) = (&searcher, &shared);
                        scope.spawn(move || {
                            while !c.done {
                                searcher.step(c, shared)?;
                            }
                            Ok(())
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("search thread panicked"))
                    .collect()
            });
            results.into_iter().collect::<Result<Vec<()>>>()?;
        }
    }

    let g = shared.into_inner().expect("search state poisoned");
    Ok(SearchOutcome {
        results: g.queue.iter().map(|&(c, id)| (id, c)).collect(),
        log: g.log,
        inner_products: g.inner_products,
        visited: g.visited.len(),
    })
}

// ---------------------------------------------------------------------------
// File format: "RKDF", version, tree count, default L, split fields, modulus,
// image table, then each tree's nodes in pre-order with child indices.
// ---------------------------------------------------------------------------

pub const RKDF_MAGIC: &[u8; 4] = b"RKDF";
pub const RKDF_VERSION: u32 = 1;
const NONE_CHILD: u32 = u32::MAX;

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    write_u64(w, b.len() as u64)?;
    w.write_all(b)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u64(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::format("forest", format!("byte run of {n}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn write_ct<W: Write>(w: &mut W, c: &Ciphertext, limbs: usize) -> Result<()> {
    ive::write_residues(w, &c.c, limbs)
}

fn read_ct<R: Read>(r: &mut R, limbs: usize) -> Result<Ciphertext> {
    Ok(Ciphertext {
        c: ive::read_residues(r, limbs, 1 << 20)?,
    })
}

impl EncryptedForest {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let limbs = modmath::limbs_for(&self.q);
        w.write_all(RKDF_MAGIC)?;
        write_u32(w, RKDF_VERSION)?;
        write_u32(w, self.trees.len() as u32)?;
        write_u32(w, self.default_queue)?;
        write_u32(w, self.split_fields.len() as u32)?;
        for &s in &self.split_fields {
            write_u32(w, s as u32)?;
        }
        write_u32(w, limbs as u32)?;
        for word in modmath::to_limbs(&self.q, limbs) {
            write_u64(w, word)?;
        }
        write_u32(w, self.images.len() as u32)?;
        for (id, img) in &self.images {
            write_u32(w, *id)?;
            write_ct(w, &img.l1, limbs)?;
            write_ct(w, &img.kl, limbs)?;
            write_bytes(w, &img.keywords)?;
        }
        for tree in &self.trees {
            write_u32(w, tree.nodes.len() as u32)?;
            for n in &tree.nodes {
                write_u32(w, n.image)?;
                write_u32(w, n.left.unwrap_or(NONE_CHILD))?;
                write_u32(w, n.right.unwrap_or(NONE_CHILD))?;
                match &n.split {
                    None => w.write_all(&[0])?,
                    Some(sp) => {
                        w.write_all(&[1])?;
                        write_u32(w, sp.dim)?;
                        write_u64(w, sp.ope.0)?;
                        write_ct(w, &sp.l1_hyper, limbs)?;
                        write_ct(w, &sp.kl_hyper, limbs)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != RKDF_MAGIC {
            return Err(Error::format("forest", "bad magic"));
        }
        let version = read_u32(r)?;
        if version != RKDF_VERSION {
            return Err(Error::format(
                "forest",
                format!("unsupported version {version}"),
            ));
        }
        let n_trees = read_u32(r)? as usize;
        let default_queue = read_u32(r)?;
        let n_sf = read_u32(r)? as usize;
        let split_fields = (0..n_sf)
            .map(|_| read_u32(r).map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        let limbs = read_u32(r)? as usize;
        if limbs == 0 || limbs > 64 {
            return Err(Error::format("forest", format!("limb count {limbs}")));
        }
        let words = (0..limbs)
            .map(|_| read_u64(r))
            .collect::<Result<Vec<_>>>()?;
        let q = modmath::from_limbs(&words);
        let n_images = read_u32(r)?;
        let mut images = BTreeMap::new();
        for _ in 0..n_images {
            let id = read_u32(r)?;
            let l1 = read_ct(r, limbs)?;
            let kl = read_ct(r, limbs)?;
            let keywords = read_bytes(r)?;
            images.insert(id, ImageCipher { l1, kl, keywords });
        }
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let n = read_u32(r)? as usize;
            let mut nodes = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let image = read_u32(r)?;
                let child = |x: u32| -> Result<Option<u32>> {
                    match x {
                        NONE_CHILD => Ok(None),
                        x if (x as usize) < n => Ok(Some(x)),
                        x => Err(Error::format(
                            "forest",
                            format!("child offset {x} out of range"),
                        )),
                    }
                };
                let left = child(read_u32(r)?)?;
                let right = child(read_u32(r)?)?;
                let mut flag = [0u8; 1];
                r.read_exact(&mut flag)?;
                let split = match flag[0] {
                    0 => None,
                    1 => Some(SplitCipher {
                        dim: read_u32(r)?,
                        ope: OpeCiphertext(read_u64(r)?),
                        l1_hyper: read_ct(r, limbs)?,
                        kl_hyper: read_ct(r, limbs)?,
                    }),
                    f => return Err(Error::format("forest", format!("node flag {f}"))),
                };
                nodes.push(EncryptedNode {
                    image,
                    split,
                    left,
                    right,
                });
            }
            trees.push(EncryptedTree { nodes });
        }
        Ok(Self {
            q,
            default_queue,
            split_fields,
            images,
            trees,
        })
    }
}
