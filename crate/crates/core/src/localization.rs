//! Domain localization for larger systems: the state ring is tiled into
//! core patches, each forecast by its own reservoir that reads a haloed
//! input window, and each updated by an ETKF restricted to observations
//! inside that window. Halo exchange happens through the assembled global
//! readout at every step.

use nalgebra::{DMatrix, DVector};

use crate::assimilation::{
    etkf_update, mean_of, mean_spread, CycleContext, CycleDiagnostics, DivergenceGuard,
    RecordBuilder,
};
use crate::error::{Error, Result};
use crate::l96::Trajectory;
use crate::reservoir::{init_reservoir, train_readout_streaming, MacroParams, ReservoirModel};
use crate::rng::{stream, stream_rng};

/// Cyclic tiling of a ring of `system_dim` nodes into contiguous cores of
/// `patch_size` nodes, each extended by `halo` nodes on both sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLayout {
    system_dim: usize,
    patch_size: usize,
    halo: usize,
}

impl PatchLayout {
    pub fn new(system_dim: usize, patch_size: usize, halo: usize) -> Result<Self> {
        if patch_size == 0 || system_dim == 0 {
            return Err(Error::Layout("patch and system sizes must be positive".into()));
        }
        if system_dim % patch_size != 0 {
            return Err(Error::Layout(format!(
                "patch size {patch_size} does not tile {system_dim} nodes"
            )));
        }
        if patch_size + 2 * halo > system_dim {
            return Err(Error::Layout(format!(
                "input window {} exceeds the ring of {system_dim} nodes",
                patch_size + 2 * halo
            )));
        }
        Ok(PatchLayout {
            system_dim,
            patch_size,
            halo,
        })
    }

    pub fn system_dim(&self) -> usize {
        self.system_dim
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn halo(&self) -> usize {
        self.halo
    }

    pub fn n_patches(&self) -> usize {
        self.system_dim / self.patch_size
    }

    /// Per-patch reservoir input width.
    pub fn input_dim(&self) -> usize {
        self.patch_size + 2 * self.halo
    }

    /// Nodes owned by patch `p` (contiguous by construction).
    pub fn core_range(&self, p: usize) -> std::ops::Range<usize> {
        let start = p * self.patch_size;
        start..start + self.patch_size
    }

    /// Input-window nodes of patch `p` in ring order, halo wrapping around.
    pub fn input_nodes(&self, p: usize) -> Vec<usize> {
        let d = self.system_dim as isize;
        let start = (p * self.patch_size) as isize - self.halo as isize;
        (0..self.input_dim() as isize)
            .map(|k| (start + k).rem_euclid(d) as usize)
            .collect()
    }

    /// Copy the patch's input window out of a global state.
    pub fn gather(&self, p: usize, global: &DVector<f64>) -> DVector<f64> {
        let nodes = self.input_nodes(p);
        DVector::from_fn(nodes.len(), |i, _| global[nodes[i]])
    }

    /// Positions (into the observation vector) of observed nodes that fall
    /// inside patch `p`'s input window.
    pub fn local_obs(&self, p: usize, obs_nodes: &[usize]) -> Vec<usize> {
        let window = self.input_nodes(p);
        obs_nodes
            .iter()
            .enumerate()
            .filter(|(_, node)| window.contains(node))
            .map(|(slot, _)| slot)
            .collect()
    }
}

/// One reservoir per patch, globally coupled through the readout.
pub struct PatchedReservoir {
    layout: PatchLayout,
    patches: Vec<ReservoirModel>,
}

impl PatchedReservoir {
    pub fn new(layout: PatchLayout, patches: Vec<ReservoirModel>) -> Result<Self> {
        if patches.len() != layout.n_patches() {
            return Err(Error::Layout(format!(
                "{} patch models for a layout of {} patches",
                patches.len(),
                layout.n_patches()
            )));
        }
        for (p, model) in patches.iter().enumerate() {
            if model.input_dim() != layout.input_dim() {
                return Err(Error::dimension(
                    "patched reservoir",
                    format!("patch {p} input {}", layout.input_dim()),
                    model.input_dim().to_string(),
                ));
            }
            if model.output_dim() != Some(layout.patch_size()) {
                return Err(Error::dimension(
                    "patched reservoir",
                    format!("patch {p} trained readout of {} rows", layout.patch_size()),
                    format!("{:?}", model.output_dim()),
                ));
            }
        }
        Ok(PatchedReservoir { layout, patches })
    }

    pub fn layout(&self) -> &PatchLayout {
        &self.layout
    }

    pub fn patches(&self) -> &[ReservoirModel] {
        &self.patches
    }

    /// Global prediction: each patch's readout written into its core.
    pub fn assemble_readout(&self, hidden: &[DVector<f64>]) -> Result<DVector<f64>> {
        if hidden.len() != self.patches.len() {
            return Err(Error::dimension(
                "assemble_readout",
                format!("{} hidden states", self.patches.len()),
                hidden.len().to_string(),
            ));
        }
        let mut global = DVector::zeros(self.layout.system_dim());
        for (p, (model, s)) in self.patches.iter().zip(hidden).enumerate() {
            let local = model.readout(s)?;
            global
                .rows_mut(self.layout.core_range(p).start, self.layout.patch_size())
                .copy_from(&local);
        }
        Ok(global)
    }

    /// One closed-loop step of every patch: assemble the global readout,
    /// then advance each hidden state on its gathered input window.
    pub fn step(&self, hidden: &mut [DVector<f64>], scratch: &mut [DVector<f64>]) -> Result<()> {
        let global = self.assemble_readout(hidden)?;
        if !global.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                cycle: 0,
                nrmse: f64::INFINITY,
            });
        }
        for (p, (model, s)) in self.patches.iter().zip(hidden.iter_mut()).enumerate() {
            let input = self.layout.gather(p, &global);
            model.step_hidden_buf(s, &input, &mut scratch[p]);
        }
        Ok(())
    }

    /// Synchronize one hidden state per patch over a global driving window
    /// (every patch sees its gathered rows), starting from zero.
    pub fn drive(&self, driving: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
        if driving.nrows() != self.layout.system_dim() {
            return Err(Error::dimension(
                "patched drive",
                self.layout.system_dim().to_string(),
                driving.nrows().to_string(),
            ));
        }
        self.patches
            .iter()
            .enumerate()
            .map(|(p, model)| {
                let nodes = self.layout.input_nodes(p);
                let local = DMatrix::from_fn(nodes.len(), driving.ncols(), |i, j| {
                    driving[(nodes[i], j)]
                });
                model.drive(&local, &DVector::zeros(model.hidden_dim()))
            })
            .collect()
    }

    /// Inductive closed-loop forecast, same convention as the global
    /// model: the first input is the data state x0, every later input the
    /// assembled readout. Output column j is the prediction at t0+(j+1)dt.
    pub fn free_forecast(
        &self,
        hidden: &mut [DVector<f64>],
        x0: &DVector<f64>,
        n_steps: usize,
    ) -> Result<DMatrix<f64>> {
        let d = self.layout.system_dim();
        if x0.len() != d {
            return Err(Error::dimension("patched free_forecast", d.to_string(), x0.len().to_string()));
        }
        if n_steps == 0 {
            return Err(Error::Config("free_forecast needs n_steps >= 1".into()));
        }
        let mut scratch: Vec<DVector<f64>> = self
            .patches
            .iter()
            .map(|m| DVector::zeros(m.hidden_dim()))
            .collect();
        let mut out = DMatrix::zeros(d, n_steps);
        let mut input = x0.clone();
        for j in 0..n_steps {
            for (p, (model, s)) in self.patches.iter().zip(hidden.iter_mut()).enumerate() {
                let local = self.layout.gather(p, &input);
                model.step_hidden_buf(s, &local, &mut scratch[p]);
            }
            let x = self.assemble_readout(hidden)?;
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged {
                    cycle: j + 1,
                    nrmse: f64::INFINITY,
                });
            }
            out.column_mut(j).copy_from(&x);
            input.copy_from(&x);
        }
        Ok(out)
    }
}

/// Train one reservoir per patch on the gathered training data. Patch `p`
/// draws its wiring from a seed offset in the patch stream block so the
/// patches are mutually independent.
pub fn train_patched(
    layout: PatchLayout,
    hidden_dim: usize,
    density: f64,
    macro_params: MacroParams,
    train: &Trajectory,
    washout: usize,
    master_seed: u64,
) -> Result<PatchedReservoir> {
    if train.dim() != layout.system_dim() {
        return Err(Error::dimension(
            "train_patched",
            layout.system_dim().to_string(),
            train.dim().to_string(),
        ));
    }
    let t = train.len();
    let mut patches = Vec::with_capacity(layout.n_patches());
    for p in 0..layout.n_patches() {
        let seed = master_seed.wrapping_add(stream::PATCH_BASE + p as u64 * stream::PATCH_STRIDE);
        let mut model = init_reservoir(
            hidden_dim,
            layout.input_dim(),
            layout.patch_size(),
            density,
            macro_params,
            seed,
        )?;
        let nodes = layout.input_nodes(p);
        let driving = DMatrix::from_fn(nodes.len(), t, |i, j| train.states[(nodes[i], j)]);
        let targets = train
            .states
            .rows(layout.core_range(p).start, layout.patch_size())
            .clone_owned();
        train_readout_streaming(&mut model, &driving, &targets, washout)?;
        patches.push(model);
    }
    PatchedReservoir::new(layout, patches)
}

/// Per-member perturbed-data spinup, mirroring the global-model recipe:
/// member `m` drives every patch with one noisy copy of the truth window.
pub fn init_patched_members(
    patched: &PatchedReservoir,
    nature: &Trajectory,
    start_idx: usize,
    window: usize,
    sigma_init: f64,
    k: usize,
    master_seed: u64,
) -> Result<Vec<Vec<DVector<f64>>>> {
    if start_idx < window {
        return Err(Error::Config(format!(
            "member init needs {window} steps of history before the start index {start_idx}"
        )));
    }
    let d = nature.dim();
    let base = nature.states.columns(start_idx - window, window);
    let mut members = Vec::with_capacity(k);
    for m in 0..k {
        let mut rng = stream_rng(master_seed, stream::MEMBER_BASE + m as u64);
        let mut perturbed = base.clone_owned();
        for j in 0..window {
            for i in 0..d {
                let noise: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
                perturbed[(i, j)] += sigma_init * noise;
            }
        }
        members.push(patched.drive(&perturbed)?);
    }
    Ok(members)
}

/// Cycled LETKF. Observations and innovations are global; each patch's
/// update sees only observations inside its input window. Patch updates
/// commute (they read shared pre-update statistics), so the loop order is
/// immaterial; `letkf_analysis` takes it explicitly to make that testable.
pub fn letkf_cycle(
    patched: &PatchedReservoir,
    mut members: Vec<Vec<DVector<f64>>>,
    ctx: &CycleContext,
    sigma_obs: f64,
) -> Result<CycleDiagnostics> {
    let k = members.len();
    if k < 2 {
        return Err(Error::Config(format!("LETKF cycling needs k >= 2, got {k}")));
    }
    let stride = crate::l96::step_multiple(ctx.cfg.tau_da, ctx.nature.dt, "tau_da")?;
    let layout = patched.layout();
    let order: Vec<usize> = (0..layout.n_patches()).collect();
    let builder = RecordBuilder::new(ctx);
    let mut guard = DivergenceGuard::new(&ctx.cfg);
    let mut records = Vec::with_capacity(ctx.cfg.n_cycles);
    let mut diverged_at = None;
    let mut scratch: Vec<DVector<f64>> = patched
        .patches()
        .iter()
        .map(|m| DVector::zeros(m.hidden_dim()))
        .collect();
    'cycles: for cycle in 0..ctx.cfg.n_cycles {
        let time = ctx.nature.time(ctx.start_idx + cycle * stride);
        let truth = ctx.nature.state(ctx.start_idx + cycle * stride);
        let col = ctx
            .obs
            .batch_at(time, ctx.nature.dt)
            .ok_or_else(|| Error::Alignment(format!("no observation batch at analysis time {time}")))?;
        let y = ctx.obs.values.column(col).clone_owned();
        let sys: Vec<DVector<f64>> = members
            .iter()
            .map(|m| patched.assemble_readout(m))
            .collect::<Result<_>>()?;
        let bg_mean = mean_of(&sys);
        let spread = mean_spread(&sys, &bg_mean);
        let mut z_pred = DMatrix::zeros(ctx.obs.obs_indices.len(), k);
        for (c, s) in sys.iter().enumerate() {
            for (slot, &node) in ctx.obs.obs_indices.iter().enumerate() {
                z_pred[(slot, c)] = s[node];
            }
        }
        let innovation = &y - z_pred.column_mean();
        letkf_analysis(
            patched,
            &mut members,
            &z_pred,
            &y,
            &ctx.obs.obs_indices,
            sigma_obs,
            ctx.cfg.gamma,
            &order,
        )?;
        let an_sys: Vec<DVector<f64>> = members
            .iter()
            .map(|m| patched.assemble_readout(m))
            .collect::<Result<_>>()?;
        let an_mean = mean_of(&an_sys);
        let record = builder.build(time, &truth, &bg_mean, &an_mean, spread, &innovation);
        let stop = guard.check(record.an_nrmse_all);
        records.push(record);
        if stop {
            diverged_at = Some(cycle);
            break;
        }
        for member in members.iter_mut() {
            for _ in 0..stride {
                match patched.step(member, &mut scratch) {
                    Ok(()) => {}
                    Err(Error::Diverged { .. }) => {
                        diverged_at = Some(cycle);
                        break 'cycles;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(CycleDiagnostics {
        records,
        diverged_at,
        var_trace: Vec::new(),
    })
}

/// One analysis pass over the patches in the given order. The predicted
/// observation ensemble is fixed beforehand, so every patch reads the same
/// background statistics no matter where it sits in the order.
#[allow(clippy::too_many_arguments)]
fn letkf_analysis(
    patched: &PatchedReservoir,
    members: &mut [Vec<DVector<f64>>],
    z_pred: &DMatrix<f64>,
    y: &DVector<f64>,
    obs_nodes: &[usize],
    sigma_obs: f64,
    gamma: f64,
    order: &[usize],
) -> Result<()> {
    let k = members.len();
    let layout = patched.layout();
    for &p in order {
        let slots = layout.local_obs(p, obs_nodes);
        if slots.is_empty() {
            continue;
        }
        let n_p = patched.patches()[p].hidden_dim();
        let mut local_members = DMatrix::zeros(n_p, k);
        for (c, member) in members.iter().enumerate() {
            local_members.column_mut(c).copy_from(&member[p]);
        }
        let mut z_local = DMatrix::zeros(slots.len(), k);
        let mut y_local = DVector::zeros(slots.len());
        for (i, &slot) in slots.iter().enumerate() {
            y_local[i] = y[slot];
            for c in 0..k {
                z_local[(i, c)] = z_pred[(slot, c)];
            }
        }
        let update = etkf_update(&local_members, &z_local, &y_local, sigma_obs, gamma)?;
        for (c, member) in members.iter_mut().enumerate() {
            member[p].copy_from(&update.analysis.column(c));
        }
    }
    Ok(())
}
