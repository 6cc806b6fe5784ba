//! Window partitioning and group-sequential membrane propagation.
//!
//! A layer's output map is split into groups that are updated strictly in
//! order. Group `p` receives the membrane (and spikes) of group `p - 1` as
//! its carry, and the previous layer's membrane at its own location as the
//! second fusion direction.
//!
//! Two partitions alternate between layers:
//!
//! * non-dilated: `P` equal, non-overlapping windows on a grid;
//! * dilated: four `M × M` windows, `M = 3L/4`, anchored at the corners of
//!   the `L × L` map. Neighbouring windows overlap by `w_o = 2M - L`.
//!
//! Dilated outputs are merged back with [`weighted_condense`]: overlap strips
//! are averaged pairwise, first horizontally then vertically. Averaging
//! binary spikes produces median spikes (0.25, 0.5, 0.75), which the region
//! threshold promotes to full spikes in [`MsMode::Activate`].

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::fusion::FusionConfig;
use crate::grad::{SurrogateSpec, Tape, Var};
use crate::lif::{record_update, LifParams, Threshold};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    #[default]
    NonDilated,
    Dilated,
}

/// What happens to fractional values produced by the weighted condense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsMode {
    /// Values above the region threshold become 1.
    #[default]
    Activate,
    /// Fractions are kept.
    Passthrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub groups: usize,
    pub mode: WindowMode,
    pub region_threshold: f64,
    pub ms_mode: MsMode,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self::non_dilated(4)
    }
}

impl WindowConfig {
    pub fn non_dilated(groups: usize) -> Self {
        Self {
            groups,
            mode: WindowMode::NonDilated,
            region_threshold: 0.1,
            ms_mode: MsMode::Activate,
        }
    }

    pub fn dilated() -> Self {
        Self {
            groups: 4,
            mode: WindowMode::Dilated,
            region_threshold: 0.1,
            ms_mode: MsMode::Activate,
        }
    }

    pub fn with_ms_mode(mut self, ms_mode: MsMode) -> Self {
        self.ms_mode = ms_mode;
        self
    }

    /// Checks the configuration against an `h × w` map.
    pub fn validate_for(&self, h: usize, w: usize) -> Result<()> {
        match self.mode {
            WindowMode::NonDilated => {
                let (rows, cols) = grid_for(self.groups)?;
                if !h.is_multiple_of(rows) || !w.is_multiple_of(cols) {
                    return Err(Error::Config(format!(
                        "{h}x{w} map cannot be tiled by a {rows}x{cols} window grid"
                    )));
                }
            }
            WindowMode::Dilated => {
                if self.groups != 4 {
                    return Err(Error::Config(format!(
                        "dilated windows always use 4 groups, got {}",
                        self.groups
                    )));
                }
                DilatedGeometry::new(h)?;
                DilatedGeometry::new(w)?;
            }
        }
        Ok(())
    }
}

/// Window grid `(rows, cols)` for `groups` non-dilated windows: the most
/// square factorisation with `rows <= cols`.
pub fn grid_for(groups: usize) -> Result<(usize, usize)> {
    if groups == 0 {
        return Err(Error::Config("window groups must be at least 1".into()));
    }
    let rows = (1..=groups)
        .take_while(|d| d * d <= groups)
        .filter(|d| groups.is_multiple_of(*d))
        .last()
        .unwrap_or(1);
    Ok((rows, groups / rows))
}

/// Dilated window size and overlap for a feature extent `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DilatedGeometry {
    /// Feature extent L.
    pub l: usize,
    /// Window size M = 3L/4.
    pub m: usize,
    /// Overlap w_o = 2M - L.
    pub offset: usize,
}

impl DilatedGeometry {
    pub fn new(l: usize) -> Result<Self> {
        if l == 0 || !l.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "dilated windows need a feature extent divisible by 4, got {l}"
            )));
        }
        let m = 3 * l / 4;
        Ok(Self {
            l,
            m,
            offset: 2 * m - l,
        })
    }

    /// Start of the second window along this axis (`L - M`).
    pub fn far_origin(&self) -> usize {
        self.l - self.m
    }

    /// Number of windows covering coordinate `i`.
    pub fn coverage(&self, i: usize) -> usize {
        if i >= self.far_origin() && i < self.m {
            2
        } else {
            1
        }
    }
}

/// Spatial window of a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

/// Window regions of one layer's output map, in processing order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLayout {
    pub mode: WindowMode,
    pub height: usize,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
    pub regions: Vec<Region>,
}

impl WindowLayout {
    pub fn new(cfg: &WindowConfig, height: usize, width: usize) -> Result<Self> {
        cfg.validate_for(height, width)?;
        match cfg.mode {
            WindowMode::NonDilated => {
                let (rows, cols) = grid_for(cfg.groups)?;
                let (h, w) = (height / rows, width / cols);
                let regions = (0..rows)
                    .flat_map(|r| {
                        (0..cols).map(move |c| Region {
                            y0: r * h,
                            x0: c * w,
                            h,
                            w,
                        })
                    })
                    .collect();
                Ok(Self {
                    mode: cfg.mode,
                    height,
                    width,
                    rows,
                    cols,
                    regions,
                })
            }
            WindowMode::Dilated => {
                let gy = DilatedGeometry::new(height)?;
                let gx = DilatedGeometry::new(width)?;
                let regions = [
                    (0, 0),
                    (0, gx.far_origin()),
                    (gy.far_origin(), 0),
                    (gy.far_origin(), gx.far_origin()),
                ]
                .into_iter()
                .map(|(y0, x0)| Region {
                    y0,
                    x0,
                    h: gy.m,
                    w: gx.m,
                })
                .collect();
                Ok(Self {
                    mode: cfg.mode,
                    height,
                    width,
                    rows: 2,
                    cols: 2,
                    regions,
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Crops a full-map node into one node per window.
    pub fn split(&self, tape: &mut Tape, full: Var) -> Result<Vec<Var>> {
        let (_, _, h, w) = tape.value(full).dims4()?;
        if (h, w) != (self.height, self.width) {
            return dim_err(format!(
                "map is {h}x{w}, layout expects {}x{}",
                self.height, self.width
            ));
        }
        self.regions
            .iter()
            .map(|r| tape.crop(full, r.y0, r.x0, r.h, r.w))
            .collect()
    }

    /// Inverse of [`WindowLayout::split`]: tiling for non-dilated windows,
    /// weighted condense for dilated ones.
    pub fn merge(&self, tape: &mut Tape, parts: &[Var]) -> Result<Var> {
        if parts.len() != self.len() {
            return dim_err(format!(
                "{} windows for a layout of {}",
                parts.len(),
                self.len()
            ));
        }
        match self.mode {
            WindowMode::NonDilated => tape.tile(parts, self.rows, self.cols),
            WindowMode::Dilated => tape.condense([parts[0], parts[1], parts[2], parts[3]]),
        }
    }
}

/// Splits `x` into the non-dilated groups `G^1..G^P` in raster order.
pub fn partition_non_dilated(x: &Tensor, cfg: &WindowConfig) -> Result<Vec<Tensor>> {
    if cfg.mode != WindowMode::NonDilated {
        return Err(Error::Config(
            "partition_non_dilated needs a non-dilated config".into(),
        ));
    }
    let (_, _, h, w) = x.dims4()?;
    let layout = WindowLayout::new(cfg, h, w)?;
    layout
        .regions
        .iter()
        .map(|r| x.crop(r.y0, r.x0, r.h, r.w))
        .collect()
}

/// Splits `x` into the four corner-anchored dilated windows `G1..G4`.
pub fn partition_dilated(x: &Tensor, cfg: &WindowConfig) -> Result<[Tensor; 4]> {
    if cfg.mode != WindowMode::Dilated {
        return Err(Error::Config(
            "partition_dilated needs a dilated config".into(),
        ));
    }
    let (_, _, h, w) = x.dims4()?;
    let layout = WindowLayout::new(cfg, h, w)?;
    let r = &layout.regions;
    Ok([
        x.crop(r[0].y0, r[0].x0, r[0].h, r[0].w)?,
        x.crop(r[1].y0, r[1].x0, r[1].h, r[1].w)?,
        x.crop(r[2].y0, r[2].x0, r[2].h, r[2].w)?,
        x.crop(r[3].y0, r[3].x0, r[3].h, r[3].w)?,
    ])
}

/// Places equally sized windows on a grid in raster order.
pub fn tile_windows(parts: &[&Tensor], rows: usize, cols: usize) -> Result<Tensor> {
    if parts.len() != rows * cols || parts.is_empty() {
        return dim_err(format!("{} windows for a {rows}x{cols} grid", parts.len()));
    }
    let (b, c, h, w) = parts[0].dims4()?;
    if parts.iter().any(|p| p.shape() != parts[0].shape()) {
        return dim_err("windows differ in shape");
    }
    let (hh, ww) = (rows * h, cols * w);
    let mut out = Tensor::zeros(&[b, c, hh, ww]);
    for (i, p) in parts.iter().enumerate() {
        scatter_add_window(&mut out, p, (i / cols) * h, (i % cols) * w)?;
    }
    Ok(out)
}

/// Recomposes non-dilated groups into the original map.
pub fn recompose_non_dilated(groups: &[Tensor], cfg: &WindowConfig) -> Result<Tensor> {
    let (rows, cols) = grid_for(cfg.groups)?;
    let refs: Vec<&Tensor> = groups.iter().collect();
    tile_windows(&refs, rows, cols)
}

/// Adds `part` into `full` at spatial offset `(y0, x0)`.
pub fn scatter_add_window(full: &mut Tensor, part: &Tensor, y0: usize, x0: usize) -> Result<()> {
    let (b, c, hh, ww) = full.dims4()?;
    let (pb, pc, h, w) = part.dims4()?;
    if (pb, pc) != (b, c) || y0 + h > hh || x0 + w > ww {
        return dim_err(format!(
            "window {:?} at ({y0},{x0}) does not fit map {:?}",
            part.shape(),
            full.shape()
        ));
    }
    let src = part.data();
    let dst = full.data_mut();
    for plane in 0..b * c {
        for y in 0..h {
            let d = plane * hh * ww + (y0 + y) * ww + x0;
            let s = (plane * h + y) * w;
            for x in 0..w {
                dst[d + x] += src[s + x];
            }
        }
    }
    Ok(())
}

/// Condenses two windows that overlap along the last axis:
/// `[left[:o/2], (left[o/2:3o/2] + right[:o]) / 2, right[o:3o/2]]`.
fn condense_cols(left: &Tensor, right: &Tensor, offset: usize) -> Result<Tensor> {
    let (b, c, h, m) = left.dims4()?;
    left.expect_same_shape(right)?;
    let half = offset / 2;
    let out_w = 2 * offset;
    if 3 * half != m {
        return dim_err(format!("window width {m} does not match overlap {offset}"));
    }
    let (l, r) = (left.data(), right.data());
    let mut out = Vec::with_capacity(b * c * h * out_w);
    for row in 0..b * c * h {
        let lrow = &l[row * m..(row + 1) * m];
        let rrow = &r[row * m..(row + 1) * m];
        out.extend_from_slice(&lrow[..half]);
        out.extend(
            lrow[half..3 * half]
                .iter()
                .zip(&rrow[..offset])
                .map(|(a, b)| (a + b) / 2.0),
        );
        out.extend_from_slice(&rrow[offset..3 * half]);
    }
    Tensor::new(vec![b, c, h, out_w], out)
}

/// Same as [`condense_cols`] along the height axis.
fn condense_rows(top: &Tensor, bottom: &Tensor, offset: usize) -> Result<Tensor> {
    let (b, c, m, w) = top.dims4()?;
    top.expect_same_shape(bottom)?;
    let half = offset / 2;
    let out_h = 2 * offset;
    if 3 * half != m {
        return dim_err(format!("window height {m} does not match overlap {offset}"));
    }
    let (t, d) = (top.data(), bottom.data());
    let mut out = Vec::with_capacity(b * c * out_h * w);
    for plane in 0..b * c {
        let tp = &t[plane * m * w..(plane + 1) * m * w];
        let bp = &d[plane * m * w..(plane + 1) * m * w];
        out.extend_from_slice(&tp[..half * w]);
        out.extend(
            tp[half * w..3 * half * w]
                .iter()
                .zip(&bp[..offset * w])
                .map(|(a, b)| (a + b) / 2.0),
        );
        out.extend_from_slice(&bp[offset * w..3 * half * w]);
    }
    Tensor::new(vec![b, c, out_h, w], out)
}

/// Weighted condense of four dilated windows without the region threshold.
pub fn condense_windows(groups: [&Tensor; 4]) -> Result<Tensor> {
    let (_, _, mh, mw) = groups[0].dims4()?;
    if mh % 3 != 0 || mw % 3 != 0 {
        return dim_err(format!("{mh}x{mw} is not a dilated window size"));
    }
    // M = 3L/4 and w_o = 2M - L = L/2 = 2M/3.
    let (oh, ow) = (2 * mh / 3, 2 * mw / 3);
    let top = condense_cols(groups[0], groups[1], ow)?;
    let bottom = condense_cols(groups[2], groups[3], ow)?;
    condense_rows(&top, &bottom, oh)
}

/// Adjoint of [`condense_windows`]: each window receives the output
/// gradient divided by the number of windows covering that location.
pub fn condense_adjoint(grad: &Tensor) -> Result<[Tensor; 4]> {
    let (b, c, h, w) = grad.dims4()?;
    let gy = DilatedGeometry::new(h)?;
    let gx = DilatedGeometry::new(w)?;
    let origins = [
        (0, 0),
        (0, gx.far_origin()),
        (gy.far_origin(), 0),
        (gy.far_origin(), gx.far_origin()),
    ];
    let g = grad.data();
    let parts = origins.map(|(y0, x0)| {
        let mut d = Vec::with_capacity(b * c * gy.m * gx.m);
        for plane in 0..b * c {
            for y in 0..gy.m {
                let yy = y0 + y;
                for x in 0..gx.m {
                    let xx = x0 + x;
                    let k = (gy.coverage(yy) * gx.coverage(xx)) as f64;
                    d.push(g[(plane * h + yy) * w + xx] / k);
                }
            }
        }
        Tensor::new(vec![b, c, gy.m, gx.m], d).expect("window shape")
    });
    Ok(parts)
}

/// Recomposes dilated groups into the original `L × L` extent, applying the
/// region threshold in [`MsMode::Activate`].
pub fn weighted_condense(groups: &[Tensor; 4], cfg: &WindowConfig) -> Result<Tensor> {
    let merged = condense_windows([&groups[0], &groups[1], &groups[2], &groups[3]])?;
    Ok(match cfg.ms_mode {
        MsMode::Activate => merged.map(|v| if v > cfg.region_threshold { 1.0 } else { v }),
        MsMode::Passthrough => merged,
    })
}

/// Produces a layer's per-window input currents.
pub trait SpikingLayer {
    /// `(channels, height, width)` of the layer output for input shape `x`.
    fn output_dims(&self, input_shape: &[usize]) -> Result<(usize, usize, usize)>;

    /// Input current of every window of `layout`, in processing order.
    fn currents(&self, tape: &mut Tape, x: Var, layout: &WindowLayout) -> Result<Vec<Var>>;
}

/// Layer whose input current is its input: useful for probing the engine.
#[derive(Debug, Clone, Copy, Default)]
pub struct DirectCurrent;

impl SpikingLayer for DirectCurrent {
    fn output_dims(&self, input_shape: &[usize]) -> Result<(usize, usize, usize)> {
        match *input_shape {
            [_, c, h, w] => Ok((c, h, w)),
            _ => dim_err(format!("expected rank-4 input, got {input_shape:?}")),
        }
    }

    fn currents(&self, tape: &mut Tape, x: Var, layout: &WindowLayout) -> Result<Vec<Var>> {
        layout.split(tape, x)
    }
}

/// Post-update membrane and spikes of the most recently processed group.
#[derive(Debug, Clone, Copy)]
pub struct GroupCarry {
    pub membrane: Var,
    pub spikes: Var,
}

/// Membrane maps carried across layers and groups within one forward pass.
///
/// Handles refer to nodes of the tape the pass is recorded on.
#[derive(Debug, Clone, Default)]
pub struct MembraneStore {
    layers: Vec<Option<Var>>,
    carry: Option<GroupCarry>,
    hops: Vec<Vec<usize>>,
}

impl MembraneStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    /// Full membrane map of layer `index`, if it has been processed.
    pub fn layer_map(&self, index: usize) -> Option<Var> {
        self.layers.get(index).copied().flatten()
    }

    pub fn set_layer_map(&mut self, index: usize, map: Var) {
        if self.layers.len() <= index {
            self.layers.resize(index + 1, None);
        }
        self.layers[index] = Some(map);
    }

    pub fn carry(&self) -> Option<GroupCarry> {
        self.carry
    }

    /// Per-group membrane-update hop counts recorded for layer `index`.
    pub fn hops(&self, index: usize) -> Option<&[usize]> {
        self.hops
            .get(index)
            .map(Vec::as_slice)
            .filter(|h| !h.is_empty())
    }

    pub fn total_hops(&self, index: usize) -> usize {
        self.hops(index).map_or(0, |h| h.iter().sum())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Hops a conventional per-group LIF needs to match: `P · T`.
pub fn conventional_hops(groups: usize, time_steps: usize) -> usize {
    groups * time_steps
}

/// Neuron dynamics shared by every group of a layer.
#[derive(Debug, Clone, Copy)]
pub struct Dynamics {
    pub lif: LifParams,
    pub surrogate: SurrogateSpec,
    pub threshold: Threshold,
}

impl Dynamics {
    pub fn new(lif: LifParams, surrogate: SurrogateSpec) -> Self {
        Self {
            lif,
            surrogate,
            threshold: Threshold::Fixed(lif.delta),
        }
    }
}

/// Runs one layer group by group and recomposes its spikes.
///
/// Group `p` is updated with `m_group` = post-update membrane of group
/// `p - 1` (zeros for the first group) and `m_layer` = membrane map of layer
/// `layer_index - 1` cropped to group `p`'s region (zeros for the first
/// layer). The previous layer's map is resampled nearest-neighbour when
/// channel count or spatial extent differ. On return the store holds this
/// layer's full membrane map and its hop counters.
#[allow(clippy::too_many_arguments)]
pub fn propagate_groups(
    tape: &mut Tape,
    layer: &dyn SpikingLayer,
    x: Var,
    store: &mut MembraneStore,
    layer_index: usize,
    cfg: &WindowConfig,
    fusion: &FusionConfig,
    dynamics: &Dynamics,
) -> Result<Var> {
    fusion.validate()?;
    let batch = tape.value(x).dims4()?.0;
    let (c, h, w) = layer.output_dims(tape.shape(x))?;
    let layout = WindowLayout::new(cfg, h, w)?;
    let currents = layer.currents(tape, x, &layout)?;
    if currents.len() != layout.len() {
        return dim_err(format!(
            "layer produced {} window currents for {} windows",
            currents.len(),
            layout.len()
        ));
    }

    let m_layer_full = if layer_index == 0 {
        tape.constant(Tensor::zeros(&[batch, c, h, w]))
    } else {
        let prev = store.layer_map(layer_index - 1).ok_or_else(|| {
            Error::State(format!(
                "membrane map of layer {} missing from store",
                layer_index - 1
            ))
        })?;
        let (pb, _, _, _) = tape.value(prev).dims4()?;
        if pb != batch {
            return dim_err(format!(
                "stored membrane batch {pb} differs from input batch {batch}"
            ));
        }
        tape.resample_nearest(prev, c, h, w)?
    };

    store.carry = None;
    let mut membranes = Vec::with_capacity(layout.len());
    let mut spikes = Vec::with_capacity(layout.len());
    let mut hops = Vec::with_capacity(layout.len());
    for (p, (region, &current)) in layout.regions.iter().zip(&currents).enumerate() {
        let (m_group, o_prev) = match store.carry {
            Some(carry) => (carry.membrane, carry.spikes),
            None => {
                let z = tape.zeros_like(current);
                (z, z)
            }
        };
        let m_layer = tape.crop(m_layer_full, region.y0, region.x0, region.h, region.w)?;
        let fused = fusion.fuse(tape, m_group, m_layer)?;
        let (v, s) = record_update(
            tape,
            fused,
            current,
            o_prev,
            &dynamics.lif,
            dynamics.threshold,
            dynamics.surrogate,
        )?;
        store.carry = Some(GroupCarry {
            membrane: v,
            spikes: s,
        });
        hops.push(if p == 0 { 1 } else { hops[p - 1] + 1 });
        membranes.push(v);
        spikes.push(s);
    }

    let membrane_map = layout.merge(tape, &membranes)?;
    let mut out = layout.merge(tape, &spikes)?;
    if layout.mode == WindowMode::Dilated && cfg.ms_mode == MsMode::Activate {
        out = tape.region_threshold(out, cfg.region_threshold);
    }
    store.set_layer_map(layer_index, membrane_map);
    if store.hops.len() <= layer_index {
        store.hops.resize(layer_index + 1, Vec::new());
    }
    store.hops[layer_index] = hops;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        assert_eq!(grid_for(1).unwrap(), (1, 1));
        assert_eq!(grid_for(2).unwrap(), (1, 2));
        assert_eq!(grid_for(4).unwrap(), (2, 2));
        assert_eq!(grid_for(8).unwrap(), (2, 4));
        assert_eq!(grid_for(16).unwrap(), (4, 4));
        assert!(grid_for(0).is_err());
    }

    #[test]
    fn dilated_geometry() {
        let g = DilatedGeometry::new(8).unwrap();
        assert_eq!((g.m, g.offset), (6, 4));
        let g = DilatedGeometry::new(4).unwrap();
        assert_eq!((g.m, g.offset), (3, 2));
        assert!(DilatedGeometry::new(6).is_err());
    }

    #[test]
    fn non_dilated_round_trip_4x4() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let cfg = WindowConfig::non_dilated(4);
        let groups = partition_non_dilated(&x, &cfg).unwrap();
        assert_eq!(groups.len(), 4);
        assert!(groups.iter().all(|g| g.shape() == [1, 1, 2, 2]));
        assert_eq!(recompose_non_dilated(&groups, &cfg).unwrap(), x);
    }

    #[test]
    fn single_group_is_whole_map() {
        let x = Tensor::from_fn(&[2, 3, 4, 6], |i| i as f64);
        let groups = partition_non_dilated(&x, &WindowConfig::non_dilated(1)).unwrap();
        assert_eq!(groups, vec![x]);
    }

    #[test]
    fn second_group_is_top_right_quadrant() {
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| i as f64);
        let groups = partition_non_dilated(&x, &WindowConfig::non_dilated(4)).unwrap();
        let expected: Vec<f64> = (0..4)
            .flat_map(|r| (4..8).map(move |c| (r * 8 + c) as f64))
            .collect();
        assert_eq!(groups[1].data(), expected.as_slice());
    }

    #[test]
    fn indivisible_tiling_is_config_error() {
        let x = Tensor::zeros(&[1, 1, 5, 4]);
        let r = partition_non_dilated(&x, &WindowConfig::non_dilated(4));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn mode_mismatch_is_config_error() {
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(partition_non_dilated(&x, &WindowConfig::dilated()).is_err());
        assert!(partition_dilated(&x, &WindowConfig::non_dilated(4)).is_err());
    }

    #[test]
    fn dilated_center_in_all_windows() {
        // Mark every position with its own index, then check each window
        // contains the central 4x4 block.
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| i as f64);
        let groups = partition_dilated(&x, &WindowConfig::dilated()).unwrap();
        for g in &groups {
            assert_eq!(g.shape(), &[1, 1, 6, 6]);
            for y in 2..6 {
                for xx in 2..6 {
                    let v = (y * 8 + xx) as f64;
                    assert!(g.data().contains(&v));
                }
            }
        }
    }

    #[test]
    fn dilated_requires_divisible_by_four() {
        let x = Tensor::zeros(&[1, 1, 6, 6]);
        assert!(matches!(
            partition_dilated(&x, &WindowConfig::dilated()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn constant_windows() {
        let x = Tensor::full(&[1, 2, 8, 8], 0.7);
        for g in partition_dilated(&x, &WindowConfig::dilated()).unwrap() {
            assert!(g.data().iter().all(|&v| v == 0.7));
        }
    }

    #[test]
    fn condense_all_ones() {
        let ones = Tensor::full(&[1, 1, 6, 6], 1.0);
        let groups = [ones.clone(), ones.clone(), ones.clone(), ones];
        for ms in [MsMode::Activate, MsMode::Passthrough] {
            let out =
                weighted_condense(&groups, &WindowConfig::dilated().with_ms_mode(ms)).unwrap();
            assert_eq!(out.shape(), &[1, 1, 8, 8]);
            assert!(out.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn condense_all_zeros() {
        let z = Tensor::zeros(&[2, 3, 3, 3]);
        let out = weighted_condense(
            &[z.clone(), z.clone(), z.clone(), z],
            &WindowConfig::dilated(),
        )
        .unwrap();
        assert_eq!(out.shape(), &[2, 3, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_center_spike_becomes_quarter() {
        let mut g1 = Tensor::zeros(&[1, 1, 6, 6]);
        // Local (3, 3) of G1 is global (3, 3): inside the 4-fold centre.
        g1.data_mut()[3 * 6 + 3] = 1.0;
        let z = Tensor::zeros(&[1, 1, 6, 6]);
        let groups = [g1, z.clone(), z.clone(), z];
        let pass = weighted_condense(
            &groups,
            &WindowConfig::dilated().with_ms_mode(MsMode::Passthrough),
        )
        .unwrap();
        assert_eq!(pass.at4(0, 0, 3, 3), 0.25);
        assert_eq!(pass.sum(), 0.25);
        let act = weighted_condense(&groups, &WindowConfig::dilated()).unwrap();
        assert_eq!(act.at4(0, 0, 3, 3), 1.0);
        assert_eq!(act.sum(), 1.0);
    }

    #[test]
    fn activate_threshold_is_strict() {
        let mut g1 = Tensor::zeros(&[1, 1, 6, 6]);
        g1.data_mut()[3 * 6 + 3] = 1.0;
        let z = Tensor::zeros(&[1, 1, 6, 6]);
        let cfg = WindowConfig {
            region_threshold: 0.25,
            ..WindowConfig::dilated()
        };
        let out = weighted_condense(&[g1, z.clone(), z.clone(), z], &cfg).unwrap();
        assert_eq!(out.at4(0, 0, 3, 3), 0.25);
    }

    #[test]
    fn carry_hops_count_up() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 0.2));
        let mut store = MembraneStore::new();
        let dyn_ = Dynamics::new(LifParams::default(), SurrogateSpec::default());
        propagate_groups(
            &mut tape,
            &DirectCurrent,
            x,
            &mut store,
            0,
            &WindowConfig::non_dilated(4),
            &FusionConfig::default(),
            &dyn_,
        )
        .unwrap();
        assert_eq!(store.hops(0).unwrap(), &[1, 2, 3, 4]);
        assert_eq!(store.total_hops(0), 10);
        assert_eq!(conventional_hops(4, 1), 4);
    }

    #[test]
    fn missing_previous_layer_is_state_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let mut store = MembraneStore::new();
        let dyn_ = Dynamics::new(LifParams::default(), SurrogateSpec::default());
        let r = propagate_groups(
            &mut tape,
            &DirectCurrent,
            x,
            &mut store,
            2,
            &WindowConfig::non_dilated(4),
            &FusionConfig::default(),
            &dyn_,
        );
        assert!(matches!(r, Err(Error::State(_))));
    }
}
