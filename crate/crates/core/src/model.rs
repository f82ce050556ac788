//! The core tuple of a functional tree tensor network and its evaluation.
//!
//! Forward evaluation contracts the feature matrices bottom-up with one
//! MTTKRP per internal node; the coefficient tensor itself is never formed.
//! Backpropagation reuses the bottom-up states and distributes output-space
//! cotangents top-down, so a pass costs about two forward passes.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{dim_err, FtnError, Result};
use crate::features::FeatureBatch;
use crate::kernels::{khatri_rao, mttkrp, thin_qr, DenseTensor};
use crate::random::{seeded, std_normal};
use crate::topology::{Child, TreeTopology};

/// Batches are processed in chunks of this many rows. The chunking is fixed so
/// reductions happen in the same order whatever the worker count.
pub const CHUNK_ROWS: usize = 256;

/// Relative size below which a diagonal entry of an R factor counts as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Core tensors, one per internal node, in bottom-up node order.
#[derive(Debug, Clone, PartialEq)]
pub struct TtnParams {
    topology: TreeTopology,
    cores: Vec<DenseTensor>,
}

/// One perturbation tensor per core.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentTuple {
    blocks: Vec<DenseTensor>,
}

impl TangentTuple {
    pub fn new(blocks: Vec<DenseTensor>) -> Self {
        Self { blocks }
    }

    pub fn zeros_like(params: &TtnParams) -> Self {
        Self {
            blocks: params
                .cores
                .iter()
                .map(|c| DenseTensor::zeros(c.shape().to_vec()))
                .collect(),
        }
    }

    pub fn blocks(&self) -> &[DenseTensor] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.blocks
    }

    pub fn block(&self, k: usize) -> &DenseTensor {
        &self.blocks[k]
    }

    pub fn into_blocks(self) -> Vec<DenseTensor> {
        self.blocks
    }

    /// Euclidean inner product of the flattened tuples.
    pub fn inner(&self, other: &TangentTuple) -> Result<f64> {
        self.check_shapes(other)?;
        Ok(self.blocks.iter().zip(&other.blocks).map(|(a, b)| a.dot(b)).sum())
    }

    pub fn norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.dot(b)).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.blocks.iter_mut().for_each(|b| b.scale(c));
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &TangentTuple) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.axpy(c, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.is_finite())
    }

    /// A tuple that keeps block `k` and zeroes all others.
    pub fn restricted_to(&self, k: usize) -> Self {
        let mut out = self.clone();
        for (j, b) in out.blocks.iter_mut().enumerate() {
            if j != k {
                b.scale(0.0);
            }
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.data().iter().copied()).collect()
    }

    /// Inverse of [`TangentTuple::flatten`] using `like` for the shapes.
    pub fn unflatten(like: &TangentTuple, flat: &[f64]) -> Result<Self> {
        let total: usize = like.blocks.iter().map(|b| b.len()).sum();
        if flat.len() != total {
            return dim_err("flat tangent length mismatch");
        }
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(like.blocks.len());
        for b in &like.blocks {
            let n = b.len();
            blocks.push(DenseTensor::new(
                b.shape().to_vec(),
                flat[offset..offset + n].to_vec(),
            )?);
            offset += n;
        }
        Ok(Self { blocks })
    }

    fn check_shapes(&self, other: &TangentTuple) -> Result<()> {
        if self.blocks.len() != other.blocks.len()
            || self
                .blocks
                .iter()
                .zip(&other.blocks)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return dim_err("tangent shapes differ");
        }
        Ok(())
    }
}

/// Bottom-up node states `W_t` (rows x r_t) for a batch, plus the leaf inputs.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub leaves: Vec<Array2<f64>>,
    pub states: Vec<Array2<f64>>,
}

impl Sweep {
    pub fn input(&self, child: Child) -> ArrayView2<'_, f64> {
        match child {
            Child::Leaf(nu) => self.leaves[nu].view(),
            Child::Node(c) => self.states[c].view(),
        }
    }

    pub fn rows(&self) -> usize {
        self.leaves[0].nrows()
    }

    /// Repeats rows according to `rows` (row `r` of the result is row
    /// `rows[r]` of `self`).
    pub fn expanded(&self, rows: &[usize]) -> Sweep {
        Sweep {
            leaves: self.leaves.iter().map(|a| a.select(Axis(0), rows)).collect(),
            states: self.states.iter().map(|a| a.select(Axis(0), rows)).collect(),
        }
    }
}

impl TtnParams {
    pub fn new(topology: TreeTopology, cores: Vec<DenseTensor>) -> Result<Self> {
        if cores.len() != topology.node_count() {
            return dim_err(format!(
                "{} cores for {} internal nodes",
                cores.len(),
                topology.node_count()
            ));
        }
        for (k, core) in cores.iter().enumerate() {
            if core.shape() != topology.core_shape(k) {
                return dim_err(format!(
                    "core {k} has shape {:?}, expected {:?}",
                    core.shape(),
                    topology.core_shape(k)
                ));
            }
        }
        Ok(Self { topology, cores })
    }

    pub fn topology(&self) -> &TreeTopology {
        &self.topology
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub fn core(&self, k: usize) -> &DenseTensor {
        &self.cores[k]
    }

    pub fn into_cores(self) -> Vec<DenseTensor> {
        self.cores
    }

    /// Replaces one core, keeping its shape.
    pub fn with_core(&self, k: usize, core: DenseTensor) -> Result<Self> {
        let mut cores = self.cores.clone();
        cores[k] = core;
        Self::new(self.topology.clone(), cores)
    }

    /// Largest entry of `A^T A - I` over the non-root unfoldings.
    pub fn stiefel_defect(&self) -> f64 {
        let root = self.topology.root();
        self.cores
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != root)
            .map(|(_, c)| {
                let a = c.unfold();
                let g = a.t().dot(&a) - Array2::<f64>::eye(a.ncols());
                g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
            })
            .fold(0.0, f64::max)
    }

    pub fn check_stiefel(&self, tol: f64) -> Result<()> {
        let defect = self.stiefel_defect();
        if defect > tol || !defect.is_finite() {
            return Err(FtnError::InvalidArgument(format!(
                "Stiefel constraint violated: max |A^T A - I| = {defect:.3e}"
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &FeatureBatch) -> Result<()> {
        let dims = self.topology.leaf_dims();
        if batch.mode_count() != dims.len() {
            return dim_err(format!(
                "batch has {} modes, model has {}",
                batch.mode_count(),
                dims.len()
            ));
        }
        for (nu, &n) in dims.iter().enumerate() {
            if batch.mode(nu).ncols() != n {
                return dim_err(format!(
                    "mode {nu} has width {}, expected {n}",
                    batch.mode(nu).ncols()
                ));
            }
        }
        Ok(())
    }

    /// Bottom-up states for `batch`.
    pub fn sweep(&self, batch: &FeatureBatch) -> Result<Sweep> {
        self.check_batch(batch)?;
        let mut sweep = Sweep {
            leaves: batch.modes().to_vec(),
            states: Vec::with_capacity(self.cores.len()),
        };
        for (k, node) in self.topology.nodes().iter().enumerate() {
            let w = mttkrp(&self.cores[k], sweep.input(node.left), sweep.input(node.right))?;
            sweep.states.push(w);
        }
        Ok(sweep)
    }

    /// Model outputs, one row of length `n_0` per sample.
    pub fn forward(&self, batch: &FeatureBatch) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let parts: Result<Vec<Array2<f64>>> = chunk_ranges(batch.len())
            .into_par_iter()
            .map(|(s, e)| {
                let mut sweep = self.sweep(&batch.slice(s, e))?;
                Ok(sweep.states.pop().expect("at least one node"))
            })
            .collect();
        let parts = parts?;
        stack_rows(&parts, self.topology.output_dim())
    }

    /// Output-space cotangents distributed to every node: entry `k` is the
    /// `rows x r_k` matrix of cotangents of the state `W_k`.
    pub fn top_down(&self, sweep: &Sweep, root_cotangent: Array2<f64>) -> Result<Vec<Array2<f64>>> {
        let n = self.cores.len();
        let root = self.topology.root();
        if root_cotangent.dim() != (sweep.rows(), self.topology.output_dim()) {
            return dim_err("cotangent shape does not match the batch");
        }
        let mut cot: Vec<Option<Array2<f64>>> = vec![None; n];
        cot[root] = Some(root_cotangent);
        for k in (0..n).rev() {
            let node = self.topology.node(k);
            let (l_internal, r_internal) = (
                matches!(node.left, Child::Node(_)),
                matches!(node.right, Child::Node(_)),
            );
            if !l_internal && !r_internal {
                continue;
            }
            let vk = cot[k].as_ref().expect("parents are visited first");
            let [rl, rr, _] = self.topology.core_shape(k);
            // t[i, a*rr + b] = sum_c A[a, b, c] v[i, c]
            let t = vk.dot(&self.cores[k].unfold().t());
            let wl = sweep.input(node.left);
            let wr = sweep.input(node.right);
            let rows = vk.nrows();
            if let Child::Node(c) = node.left {
                let mut vl = Array2::<f64>::zeros((rows, rl));
                for i in 0..rows {
                    let ti = t.row(i);
                    let wri = wr.row(i);
                    for a in 0..rl {
                        let mut s = 0.0;
                        for b in 0..rr {
                            s += ti[a * rr + b] * wri[b];
                        }
                        vl[[i, a]] = s;
                    }
                }
                cot[c] = Some(vl);
            }
            if let Child::Node(c) = node.right {
                let mut vr = Array2::<f64>::zeros((rows, rr));
                for i in 0..rows {
                    let ti = t.row(i);
                    let wli = wl.row(i);
                    for a in 0..rl {
                        let wa = wli[a];
                        for b in 0..rr {
                            vr[[i, b]] += wa * ti[a * rr + b];
                        }
                    }
                }
                cot[c] = Some(vr);
            }
        }
        Ok(cot.into_iter().map(|c| c.expect("every node reached")).collect())
    }

    /// `weight * sum_i Dtau^*[v^i (x) Phi(x^i)]`: the gradient of
    /// `weight * sum_i <v^i, F(x^i)>` with respect to the cores.
    pub fn backprop(
        &self,
        batch: &FeatureBatch,
        cotangents: ArrayView2<'_, f64>,
        weight: f64,
    ) -> Result<TangentTuple> {
        self.check_batch(batch)?;
        if cotangents.dim() != (batch.len(), self.topology.output_dim()) {
            return dim_err(format!(
                "cotangents have shape {:?}, expected ({}, {})",
                cotangents.dim(),
                batch.len(),
                self.topology.output_dim()
            ));
        }
        let parts: Result<Vec<TangentTuple>> = chunk_ranges(batch.len())
            .into_par_iter()
            .map(|(s, e)| {
                let sweep = self.sweep(&batch.slice(s, e))?;
                let cot = self.top_down(&sweep, cotangents.slice(ndarray::s![s..e, ..]).to_owned())?;
                let blocks = self
                    .topology
                    .nodes()
                    .iter()
                    .enumerate()
                    .map(|(k, node)| {
                        let kr = khatri_rao(sweep.input(node.left), sweep.input(node.right))?;
                        DenseTensor::from_unfolding(&self.topology.core_shape(k)[..2], kr.t().dot(&cot[k]))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TangentTuple::new(blocks))
            })
            .collect();
        let mut total = TangentTuple::zeros_like(self);
        for part in parts? {
            total.axpy(1.0, &part);
        }
        total.scale(weight);
        Ok(total)
    }

    /// Directional derivative of the outputs, `DF(params)[direction](x^i)`.
    pub fn apply_dtau(&self, batch: &FeatureBatch, direction: &TangentTuple) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let zero = TangentTuple::zeros_like(self);
        zero.check_shapes(direction)?;
        let parts: Result<Vec<Array2<f64>>> = chunk_ranges(batch.len())
            .into_par_iter()
            .map(|(s, e)| self.tangent_forward(&batch.slice(s, e), direction))
            .collect();
        stack_rows(&parts?, self.topology.output_dim())
    }

    /// Forward-mode pass: propagates `(W_t, dW_t)` jointly, which sums the
    /// Leibniz terms of all cores in one sweep.
    fn tangent_forward(&self, batch: &FeatureBatch, direction: &TangentTuple) -> Result<Array2<f64>> {
        let sweep = self.sweep(batch)?;
        let mut tangents: Vec<Array2<f64>> = Vec::with_capacity(self.cores.len());
        for (k, node) in self.topology.nodes().iter().enumerate() {
            let (wl, wr) = (sweep.input(node.left), sweep.input(node.right));
            let mut dw = mttkrp(direction.block(k), wl, wr)?;
            if let Child::Node(c) = node.left {
                dw += &mttkrp(&self.cores[k], tangents[c].view(), wr)?;
            }
            if let Child::Node(c) = node.right {
                dw += &mttkrp(&self.cores[k], wl, tangents[c].view())?;
            }
            tangents.push(dw);
        }
        Ok(tangents.pop().expect("at least one node"))
    }

    /// Reparametrizes for the basis `psi_nu = M_nu^{-1} phi_nu`: the returned
    /// parameters evaluated on `psi` features reproduce `self` on `phi`.
    pub fn change_of_basis(&self, transforms: &[Array2<f64>]) -> Result<TtnParams> {
        let dims = self.topology.leaf_dims();
        if transforms.len() != dims.len()
            || transforms
                .iter()
                .zip(dims)
                .any(|(m, &n)| m.dim() != (n, n))
        {
            return dim_err("one square transform per leaf mode required");
        }
        let mut cores = self.cores.clone();
        for (k, node) in self.topology.nodes().iter().enumerate() {
            let left = match node.left {
                Child::Leaf(nu) => Some(transforms[nu].t().to_owned()),
                Child::Node(_) => None,
            };
            let right = match node.right {
                Child::Leaf(nu) => Some(transforms[nu].t().to_owned()),
                Child::Node(_) => None,
            };
            if left.is_some() || right.is_some() {
                cores[k] = mode_product(&cores[k], left.as_ref(), right.as_ref())?;
            }
        }
        orthonormalize(&self.topology, cores).map_err(|e| match e {
            FtnError::Degenerate(_) => {
                FtnError::Degenerate("basis transform is singular".into())
            }
            other => other,
        })
    }

    /// Random parameters: Gaussian cores, non-root cores orthonormalized and
    /// the root scaled to unit output RMS on `probe`.
    pub fn random_init(topology: &TreeTopology, probe: &FeatureBatch, seed: u64) -> Result<TtnParams> {
        topology.validate()?;
        let mut rng = seeded(seed);
        let root = topology.root();
        let mut cores = Vec::with_capacity(topology.node_count());
        for k in 0..topology.node_count() {
            let shape = topology.core_shape(k);
            let data: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| std_normal(&mut rng))
                .collect();
            let mut core = DenseTensor::new(shape.to_vec(), data)?;
            if k != root {
                let (q, _) = thin_qr(core.unfold())?;
                core = DenseTensor::from_unfolding(&shape[..2], q)?;
            }
            cores.push(core);
        }
        let mut params = TtnParams::new(topology.clone(), cores)?;
        let out = params.forward(probe)?;
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
        if !(rms.is_finite() && rms > 0.0) {
            return Err(FtnError::Degenerate("probe outputs vanish".into()));
        }
        params.cores[root].scale(1.0 / rms);
        Ok(params)
    }

    /// Writes the binary checkpoint: `FTNC`, version, topology descriptor,
    /// then all cores in node order as little-endian f64.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let desc = self.topology.descriptor();
        w.write_u32::<LittleEndian>(desc.len() as u32)?;
        for v in desc {
            w.write_u32::<LittleEndian>(v)?;
        }
        for core in &self.cores {
            for &v in core.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint. Shapes are checked; the Stiefel constraint is not
    /// (see [`TtnParams::check_stiefel`]).
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<TtnParams> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FtnError::Format("not a core checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(FtnError::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        if len > 1 << 20 {
            return Err(FtnError::Format("topology descriptor too long".into()));
        }
        let desc = (0..len)
            .map(|_| r.read_u32::<LittleEndian>())
            .collect::<std::io::Result<Vec<u32>>>()?;
        let topology = TreeTopology::from_descriptor(&desc)?;
        let mut cores = Vec::with_capacity(topology.node_count());
        for k in 0..topology.node_count() {
            let shape = topology.core_shape(k);
            let mut data = vec![0.0; shape.iter().product()];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            cores.push(DenseTensor::new(shape.to_vec(), data)?);
        }
        TtnParams::new(topology, cores)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FTNC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `(X (x) Y) * unfold(core)`: multiplies `x` into the left child mode and `y`
/// into the right child mode (`None` leaves the mode untouched).
///
/// Fails with `NonFinite` when the product overflows.
pub fn mode_product(core: &DenseTensor, x: Option<&Array2<f64>>, y: Option<&Array2<f64>>) -> Result<DenseTensor> {
    let [rl, rr, rt] = [core.shape()[0], core.shape()[1], core.shape()[2]];
    let mut data = core.data().to_vec();
    if let Some(x) = x {
        // new[a, :, :] = sum_a0 x[a, a0] old[a0, :, :]
        let old = ArrayView2::from_shape((rl, rr * rt), &data).expect("row-major");
        data = x.dot(&old).into_raw_vec_and_offset().0;
    }
    if let Some(y) = y {
        let mut out = vec![0.0; data.len()];
        for a in 0..rl {
            let block = ArrayView2::from_shape((rr, rt), &data[a * rr * rt..(a + 1) * rr * rt])
                .expect("row-major");
            let prod = y.dot(&block);
            out[a * rr * rt..(a + 1) * rr * rt]
                .copy_from_slice(prod.as_slice().expect("fresh array is contiguous"));
        }
        data = out;
    }
    DenseTensor::new(vec![rl, rr, rt], data)
}

/// Bottom-up QR sweep: every non-root core is replaced by the Q factor of its
/// unfolding and the R factor is pushed into the parent's matching child mode.
/// The represented tensor is unchanged.
pub fn orthonormalize(topology: &TreeTopology, mut cores: Vec<DenseTensor>) -> Result<TtnParams> {
    let root = topology.root();
    let mut pending: Vec<(Option<Array2<f64>>, Option<Array2<f64>>)> =
        vec![(None, None); topology.node_count()];
    for k in 0..topology.node_count() {
        let (x, y) = std::mem::take(&mut pending[k]);
        if x.is_some() || y.is_some() {
            cores[k] = mode_product(&cores[k], x.as_ref(), y.as_ref())?;
        }
        if k == root {
            continue;
        }
        let shape = topology.core_shape(k);
        let (q, r) = thin_qr(cores[k].unfold())?;
        let scale = cores[k].unfold().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diag_min = r.diag().iter().fold(f64::INFINITY, |m, v| m.min(*v));
        if !diag_min.is_finite() || diag_min <= RANK_TOL * scale.max(f64::MIN_POSITIVE) {
            return Err(FtnError::Degenerate(format!(
                "rank collapse at node {k} (min R diagonal {diag_min:.3e})"
            )));
        }
        cores[k] = DenseTensor::from_unfolding(&shape[..2], q)?;
        let parent = topology.node(k).parent.expect("non-root node has a parent");
        if topology.node(parent).left == Child::Node(k) {
            pending[parent].0 = Some(r);
        } else {
            pending[parent].1 = Some(r);
        }
    }
    TtnParams::new(topology.clone(), cores)
}

/// Fixed-size row ranges covering `0..m`.
pub fn chunk_ranges(m: usize) -> Vec<(usize, usize)> {
    (0..m)
        .step_by(CHUNK_ROWS)
        .map(|s| (s, (s + CHUNK_ROWS).min(m)))
        .collect()
}

fn stack_rows(parts: &[Array2<f64>], cols: usize) -> Result<Array2<f64>> {
    if parts.is_empty() {
        return Ok(Array2::zeros((0, cols)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| FtnError::Dimension(e.to_string()))
}
