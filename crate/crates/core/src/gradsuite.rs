//! Finite-difference checks over every loss and layer family of the model.
//!
//! Each check records which operation families its graph used, so a failing
//! suite can point at the op whose backward rule is wrong.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{roi_align, rpn_forward, Binding, ModelConfig, ModelPair, Side};
use crate::error::Result;
use crate::geometry::BBox;
use crate::image::Image;
use crate::losses::{det_loss, match_anchors, rpn_loss, sim_loss, total_loss, view_pyramids, AnchorLabel, AnchorMatch, MatchConfig};
use crate::numerics::{gradient_check, CheckOptions, GradReport, Graph, OpKind, Probe, Tensor, Var};
use crate::views::{make_views, ViewConfig, ViewTriple};

/// Outcome of one family.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub ops: BTreeSet<OpKind>,
    pub report: GradReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub seed: u64,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.report.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn excluded(&self) -> usize {
        self.entries.iter().map(|e| e.report.excluded).sum()
    }

    /// Ops used by every failing check and by no passing one.
    pub fn suspect_ops(&self) -> BTreeSet<OpKind> {
        let mut failing = self.entries.iter().filter(|e| !e.report.passed);
        let Some(first) = failing.next() else { return BTreeSet::new() };
        let common = failing.fold(first.ops.clone(), |acc, e| acc.intersection(&e.ops).copied().collect());
        let clean: BTreeSet<OpKind> = self.entries.iter().filter(|e| e.report.passed).flat_map(|e| e.ops.iter().copied()).collect();
        let narrowed: BTreeSet<OpKind> = common.difference(&clean).copied().collect();
        if narrowed.is_empty() {
            common
        } else {
            narrowed
        }
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>7} {:>8} {:>12}  result", "check", "checked", "excluded", "max_rel_err")?;
        for e in &self.entries {
            let r = &e.report;
            let verdict = if r.passed { "ok" } else { "FAIL" };
            writeln!(f, "{:<16} {:>7} {:>8} {:>12.3e}  {verdict}", e.name, r.checked, r.excluded, r.max_rel_error)?;
        }
        if self.passed() {
            write!(f, "all {} checks passed, max relative error {:.3e}, {} kink-adjacent coordinates excluded", self.entries.len(), self.max_rel_error(), self.excluded())
        } else {
            let failed: Vec<&str> = self.entries.iter().filter(|e| !e.report.passed).map(|e| e.name).collect();
            let ops: Vec<String> = self.suspect_ops().iter().map(|k| k.to_string()).collect();
            write!(f, "FAILED: {}; suspect op: {}", failed.join(", "), ops.join(", "))
        }
    }
}

/// Reduces any tensor to a scalar with uneven weights so that every output
/// coordinate carries a distinct gradient.
fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let w = g.constant(Tensor::new(g.shape(y).to_vec(), w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn new_graph(fault: Option<OpKind>) -> Graph {
    let mut g = Graph::new();
    if let Some(k) = fault {
        g.inject_fault(k);
    }
    g
}

struct Runner {
    rng: ChaCha8Rng,
    fault: Option<OpKind>,
    max_coords: usize,
    entries: Vec<SuiteEntry>,
}

impl Runner {
    fn uniform(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()
    }

    fn options(&mut self, n: usize) -> CheckOptions {
        let coords = (n > self.max_coords).then(|| {
            let mut c = rand::seq::index::sample(&mut self.rng, n, self.max_coords).into_vec();
            c.sort_unstable();
            c
        });
        CheckOptions { coords, ..Default::default() }
    }

    /// Checks `build(graph, x)` with respect to a single leaf `x`.
    fn leaf(&mut self, name: &'static str, shape: &[usize], x: Vec<f64>, build: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<()> {
        let fault = self.fault;
        let probe = |v: &[f64], want: bool| -> Result<(Probe, BTreeSet<OpKind>)> {
            let mut g = new_graph(fault);
            let leaf = g.param(Tensor::new(shape.to_vec(), v.to_vec())?);
            let loss = build(&mut g, leaf)?;
            let value = g.item(loss);
            let signature = g.kink_signature();
            let ops = g.op_kinds();
            let grad = if want { Some(g.backward(loss)?.get_or_zeros(leaf, v.len())) } else { None };
            Ok((Probe { value, signature, grad }, ops))
        };
        let ops = probe(&x, false)?.1;
        let opts = self.options(x.len());
        let report = gradient_check(|v, w| probe(v, w).map(|p| p.0), &x, &opts)?;
        self.entries.push(SuiteEntry { name, ops, report });
        Ok(())
    }

    /// Checks a model loss with respect to the named online parameters.
    fn model(&mut self, name: &'static str, pair: &ModelPair, names: &[&str], loss: impl Fn(&mut Graph, &Binding) -> Result<Var>) -> Result<()> {
        let fault = self.fault;
        let probe = |v: &[f64], want: bool| -> Result<(Probe, BTreeSet<OpKind>)> {
            let mut pair = pair.clone();
            let mut off = 0;
            for n in names {
                let t = pair.params.get_mut(n)?;
                let len = t.numel();
                t.data_mut().copy_from_slice(&v[off..off + len]);
                off += len;
            }
            let mut g = new_graph(fault);
            let mut b = Binding::new();
            b.bind_side(&mut g, &pair.params, Side::Online, true);
            b.bind_side(&mut g, &pair.params, Side::Target, false);
            let l = loss(&mut g, &b)?;
            let value = g.item(l);
            let signature = g.kink_signature();
            let ops = g.op_kinds();
            let grad = if want {
                let grads = g.backward(l)?;
                let all = b.gradients(&g, &grads);
                Some(names.iter().flat_map(|n| all[*n].clone()).collect())
            } else {
                None
            };
            Ok((Probe { value, signature, grad }, ops))
        };
        let x: Vec<f64> = names.iter().map(|n| pair.params.get(n).map(|t| t.data().to_vec())).collect::<Result<Vec<_>>>()?.concat();
        let ops = probe(&x, false)?.1;
        let opts = self.options(x.len());
        let report = gradient_check(|v, w| probe(v, w).map(|p| p.0), &x, &opts)?;
        self.entries.push(SuiteEntry { name, ops, report });
        Ok(())
    }
}

fn suite_views(seed: u64) -> Result<ViewTriple> {
    let img = Image::from_fn(96, 96, 3, |y, x, c| (((x / 8 + y / 8 + c) % 3) as f64 * 0.4 + (x as f64 * 0.05).sin() * 0.1).clamp(0.0, 1.0));
    let props = [BBox::new(8.0, 8.0, 40.0, 40.0)?, BBox::new(20.0, 10.0, 80.0, 70.0)?, BBox::new(0.0, 50.0, 45.0, 96.0)?];
    make_views(&img, &props, seed, &ViewConfig { size: 96, ..Default::default() })
}

/// Runs every check. `fault` corrupts one op's backward rule, to show the
/// suite catches it.
pub fn gradient_suite(seed: u64, fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut r = Runner { rng: ChaCha8Rng::seed_from_u64(seed), fault, max_coords: 48, entries: Vec::new() };

    let x = r.uniform(16, -2.0, 2.0);
    r.leaf("smooth_l1", &[16], x, |g, x| {
        let y = g.smooth_l1(x);
        weighted_sum(g, y)
    })?;

    let x = r.uniform(8, -3.0, 3.0);
    let labels: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
    r.leaf("log_loss", &[8], x, move |g, x| {
        let p = g.sigmoid(x);
        let p = g.clamp(p, 1e-7, 1.0 - 1e-7);
        let q = g.scale(p, -1.0);
        let q = g.add_scalar(q, 1.0);
        let (lp, lq) = (g.log(p), g.log(q));
        let y = g.constant(Tensor::vector(labels.clone()));
        let not_y = g.constant(Tensor::vector(labels.iter().map(|v| 1.0 - v).collect()));
        let a = g.mul(lp, y)?;
        let b = g.mul(lq, not_y)?;
        let s = g.add(a, b)?;
        let m = g.mean(s);
        Ok(g.scale(m, -1.0))
    })?;

    let targets: Vec<Option<[f64; 4]>> = (0..6).map(|i| (i % 3 == 0).then(|| [0.1 * i as f64, -0.2, 0.3, 0.05])).collect();
    let m = AnchorMatch {
        labels: targets.iter().map(|t| if t.is_some() { AnchorLabel::Positive } else { AnchorLabel::Negative }).collect(),
        targets,
        sampled: (0..6).collect(),
        num_positions: 2,
    };
    let x = r.uniform(30, -1.8, 1.8);
    r.leaf("rpn_loss", &[30], x, move |g, v| {
        let l = g.gather(v, &(0..6).collect::<Vec<_>>())?;
        let d = g.gather(v, &(6..30).collect::<Vec<_>>())?;
        Ok(rpn_loss(g, l, d, &m, 1.0)?.total)
    })?;

    let x = r.uniform(12, -1.0, 1.0);
    let (t1, t2) = (r.uniform(12, -1.0, 1.0), r.uniform(12, -1.0, 1.0));
    r.leaf("sim_loss", &[3, 4], x, move |g, a| {
        let t1 = g.constant(Tensor::new(vec![3, 4], t1.clone())?);
        let t2 = g.constant(Tensor::new(vec![3, 4], t2.clone())?);
        sim_loss(g, a, t1, t2)
    })?;

    let x = r.uniform(12, -1.0, 1.0);
    r.leaf("l2_normalize", &[3, 4], x, |g, x| {
        let y = g.l2_normalize(x)?;
        weighted_sum(g, y)
    })?;

    let img = r.uniform(2 * 6 * 6, -1.0, 1.0);
    let (w, b) = (r.uniform(3 * 2 * 3 * 3, -1.0, 1.0), r.uniform(3, -1.0, 1.0));
    r.leaf("conv2d", &[2, 6, 6], img.clone(), move |g, x| {
        let w = g.constant(Tensor::new(vec![3, 2, 3, 3], w.clone())?);
        let b = g.constant(Tensor::vector(b.clone()));
        let y = g.conv2d(x, w, Some(b), 2, 1)?;
        weighted_sum(g, y)
    })?;
    let w = r.uniform(3 * 2 * 3 * 3, -1.0, 1.0);
    let img2 = img.clone();
    r.leaf("conv2d_weight", &[3, 2, 3, 3], w, move |g, w| {
        let x = g.constant(Tensor::new(vec![2, 6, 6], img2.clone())?);
        let y = g.conv2d(x, w, None, 1, 1)?;
        weighted_sum(g, y)
    })?;
    r.leaf("max_pool2d", &[2, 6, 6], img.clone(), |g, x| {
        let y = g.max_pool2d(x, 2, 2)?;
        weighted_sum(g, y)
    })?;
    r.leaf("upsample_nearest", &[2, 6, 6], img.clone(), |g, x| {
        let y = g.upsample_nearest(x, 2)?;
        weighted_sum(g, y)
    })?;
    let (w, b) = (r.uniform(12, -1.0, 1.0), r.uniform(4, -1.0, 1.0));
    let x = r.uniform(6, -1.0, 1.0);
    r.leaf("linear", &[2, 3], x, move |g, x| {
        let w = g.constant(Tensor::new(vec![4, 3], w.clone())?);
        let b = g.constant(Tensor::vector(b.clone()));
        let y = g.linear(x, w, Some(b))?;
        weighted_sum(g, y)
    })?;
    let roi = BBox::new(3.3, 5.1, 17.9, 21.4)?;
    r.leaf("roi_align", &[2, 6, 6], img, move |g, x| {
        let y = roi_align(g, x, &roi, 4.0, 2, 2)?;
        weighted_sum(g, y)
    })?;

    // one check per remaining graph op, so a failure can be pinned down
    let x = r.uniform(12, -1.5, 1.5);
    let other = r.uniform(12, -1.0, 1.0);
    r.leaf("relu", &[3, 4], x.clone(), |g, x| {
        let y = g.relu(x);
        weighted_sum(g, y)
    })?;
    r.leaf("sigmoid", &[3, 4], x.clone(), |g, x| {
        let y = g.sigmoid(x);
        weighted_sum(g, y)
    })?;
    r.leaf("exp", &[3, 4], x.clone(), |g, x| {
        let y = g.exp(x);
        weighted_sum(g, y)
    })?;
    r.leaf("log", &[3, 4], x.iter().map(|v| v.abs() + 0.5).collect(), |g, x| {
        let y = g.log(x);
        weighted_sum(g, y)
    })?;
    r.leaf("clamp", &[3, 4], x.clone(), |g, x| {
        let y = g.clamp(x, -1.0, 1.0);
        weighted_sum(g, y)
    })?;
    r.leaf("softmax", &[3, 4], x.clone(), |g, x| {
        let y = g.softmax(x)?;
        weighted_sum(g, y)
    })?;
    r.leaf("affine", &[3, 4], x.clone(), |g, x| {
        let y = g.scale(x, -1.7);
        let y = g.add_scalar(y, 0.3);
        weighted_sum(g, y)
    })?;
    let o = other.clone();
    r.leaf("add", &[3, 4], x.clone(), move |g, x| {
        let c = g.constant(Tensor::new(vec![3, 4], o.clone())?);
        let y = g.add(x, c)?;
        weighted_sum(g, y)
    })?;
    let o = other.clone();
    r.leaf("sub", &[3, 4], x.clone(), move |g, x| {
        let c = g.constant(Tensor::new(vec![3, 4], o.clone())?);
        let y = g.sub(c, x)?;
        weighted_sum(g, y)
    })?;
    let o = other.clone();
    r.leaf("matmul", &[3, 4], x.clone(), move |g, x| {
        let c = g.constant(Tensor::new(vec![4, 3], o.clone())?);
        let y = g.matmul(x, c)?;
        weighted_sum(g, y)
    })?;
    r.leaf("reductions", &[3, 4], x.clone(), |g, x| {
        let rows = g.sum_last(x)?;
        let rows = weighted_sum(g, rows)?;
        let m = g.mean(x);
        let m = g.scale(m, 0.5);
        g.add(rows, m)
    })?;
    r.leaf("mean_groups", &[3, 4], x.clone(), |g, x| {
        let y = g.mean_groups(x, 2)?;
        weighted_sum(g, y)
    })?;
    r.leaf("reshape", &[3, 4], x.clone(), |g, x| {
        let y = g.reshape(x, &[2, 6])?;
        weighted_sum(g, y)
    })?;
    r.leaf("concat_rows", &[3, 4], x.clone(), |g, x| {
        let y = g.concat_rows(&[x, x])?;
        weighted_sum(g, y)
    })?;
    r.leaf("gather", &[3, 4], x, |g, x| {
        let y = g.gather(x, &[5, 0, 5, 11, 3])?;
        weighted_sum(g, y)
    })?;

    let cfg = ModelConfig::tiny();
    let pair = ModelPair::new(cfg.clone(), seed)?;
    let views = suite_views(seed)?;
    let det_params = ["online.q.fc2.weight", "online.p.fc1.bias", "online.g.fc1.bias", "online.f.lateral3.weight", "online.f.stage2.conv1.weight"];
    r.model("det_loss", &pair, &det_params, |g, b| {
        let vp = view_pyramids(g, b, &cfg, &views)?;
        Ok(det_loss(g, b, &cfg, &vp, &views.boxes)?.total)
    })?;

    let gt: Vec<BBox> = views.boxes.iter().map(|vb| vb.v1).collect();
    let total_params = ["online.rpn.obj.weight", "online.rpn.delta.bias", "online.rpn.conv.bias", "online.f.stage3.conv2.weight", "online.p.fc2.bias"];
    r.model("total_loss", &pair, &total_params, |g, b| {
        let vp = view_pyramids(g, b, &cfg, &views)?;
        let rpn = rpn_forward(g, b, &cfg, &vp.online[0])?;
        let m = match_anchors(&rpn.anchors, &gt, &MatchConfig { batch_size: 32, max_positives: 16, ..Default::default() }, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let l_rpn = rpn_loss(g, rpn.logits, rpn.deltas, &m, 1.0)?;
        let d = det_loss(g, b, &cfg, &vp, &views.boxes)?;
        total_loss(g, l_rpn.total, d.total)
    })?;

    Ok(SuiteReport { seed, entries: r.entries })
}
