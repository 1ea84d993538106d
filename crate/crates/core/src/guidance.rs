//! Editing energies and their regional gradient combination.
//!
//! The editing energy measures cosine distance between current-latent patches
//! at destination coordinates and memory-bank patches at source coordinates;
//! the content energy measures cosine distance outside the edit mask. Their
//! gradients are max-normalized and blended per pixel by the mask, then added
//! to the noise prediction scaled by the guidance learning rate.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{BankEntry, MemoryBank};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Side length of the square latent patches compared by the energies.
pub const ENERGY_PATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditTask {
    Move,
    Resize,
    Paste,
    Replace,
    Drag,
}

/// Grid coordinate as (col, row), i.e. (x, y).
pub type Coord = (usize, usize);

/// An editing task: the mask locating the edit area, the pairing of bank
/// source coordinates to current-latent destination coordinates, and an
/// optional reference-image handle.
#[derive(Debug, Clone)]
pub struct EditSpec {
    pub task: EditTask,
    /// Soft mask in [0, 1] over the latent grid.
    pub mask: Tensor,
    /// (source, destination) coordinate pairs.
    pub region_map: Vec<(Coord, Coord)>,
    pub reference_id: Option<String>,
}

impl EditSpec {
    /// Checks the spec invariants against a latent shape: mask range and
    /// shape, destinations inside the mask support, injective destinations.
    pub fn validate(&self, latent_shape: &[usize]) -> Result<()> {
        if self.mask.shape() != latent_shape {
            return Err(Error::EditSpec(format!(
                "mask shape {:?} does not match latent shape {:?}",
                self.mask.shape(),
                latent_shape
            )));
        }
        if self.mask.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::EditSpec("mask values outside [0, 1]".into()));
        }
        let (h, w) = self.mask.dims2()?;
        let mut seen = std::collections::HashSet::new();
        for &((sx, sy), (dx, dy)) in &self.region_map {
            if sx >= w || sy >= h || dx >= w || dy >= h {
                return Err(Error::EditSpec(format!(
                    "coordinate pair ({sx},{sy})->({dx},{dy}) outside {w}x{h} grid"
                )));
            }
            if self.mask.at2(dy, dx) <= 0.0 {
                return Err(Error::EditSpec(format!(
                    "destination ({dx},{dy}) outside the mask support"
                )));
            }
            if !seen.insert((dx, dy)) {
                return Err(Error::EditSpec(format!(
                    "destination ({dx},{dy}) mapped twice"
                )));
            }
        }
        Ok(())
    }

    /// An identity edit: empty region map and an all-zero mask. Guidance has
    /// nothing to do, so sampling reduces to the reconstruction path.
    pub fn is_identity(&self) -> bool {
        self.region_map.is_empty() && self.mask.data().iter().all(|&v| v == 0.0)
    }

    /// Whether source patches come from the reference entries of the bank.
    pub fn uses_reference(&self) -> bool {
        matches!(self.task, EditTask::Paste | EditTask::Replace)
    }
}

/// Energies and the combined regional gradient at one timestep.
#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub e_edit: f64,
    pub e_content: f64,
    pub grad: Tensor,
}

/// Flat indices of the `ENERGY_PATCH` x `ENERGY_PATCH` window around a
/// coordinate, clamped at the borders.
fn patch_flat_indices(h: usize, w: usize, (cx, cy): Coord) -> Vec<usize> {
    let mut idx = Vec::with_capacity(ENERGY_PATCH * ENERGY_PATCH);
    for dr in -1i64..=(ENERGY_PATCH as i64 - 2) {
        for dc in -1i64..=(ENERGY_PATCH as i64 - 2) {
            let r = (cy as i64 + dr).clamp(0, h as i64 - 1) as usize;
            let c = (cx as i64 + dc).clamp(0, w as i64 - 1) as usize;
            idx.push(r * w + c);
        }
    }
    idx
}

fn source_latent<'a>(entry: &'a BankEntry, spec: &EditSpec, t: usize) -> Result<&'a Tensor> {
    if spec.uses_reference() {
        entry.z_ref.as_ref().ok_or(Error::MissingBankRef(t))
    } else {
        Ok(&entry.z_gud)
    }
}

/// Builds the editing energy on the tape: one minus the mean cosine
/// similarity between destination patches of `z` and source patches of the
/// bank latent. Returns a constant zero for an empty region map.
fn build_energy_edit(
    tape: &mut Tape,
    z: Var,
    entry: &BankEntry,
    spec: &EditSpec,
    t: usize,
) -> Result<Var> {
    if spec.region_map.is_empty() {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let (h, w) = spec.mask.dims2()?;
    let source = source_latent(entry, spec, t)?;
    let mut acc: Option<Var> = None;
    for &(src, dst) in &spec.region_map {
        let dst_idx = Arc::new(patch_flat_indices(h, w, dst));
        let src_idx = patch_flat_indices(h, w, src);
        let u = tape.gather(z, dst_idx)?;
        let v = tape.leaf(source.gather(&src_idx)?);
        let c = tape.cosine_sim(u, v)?;
        acc = Some(match acc {
            None => c,
            Some(a) => tape.add(a, c)?,
        });
    }
    let mean_cos = tape.scale(
        acc.expect("non-empty map"),
        1.0 / spec.region_map.len() as f64,
    )?;
    let one = tape.leaf(Tensor::scalar(1.0));
    tape.sub(one, mean_cos)
}

/// Builds the content energy: one minus the cosine similarity between the
/// current latent and the bank latent, both restricted to the complement of
/// the mask support. Empty complement returns a constant zero.
fn build_energy_content(
    tape: &mut Tape,
    z: Var,
    entry: &BankEntry,
    spec: &EditSpec,
) -> Result<Var> {
    let complement = spec.mask.map(|m| if m > 0.0 { 0.0 } else { 1.0 });
    if complement.data().iter().all(|&v| v == 0.0) {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let comp = tape.leaf(complement.clone());
    let u = tape.mul(z, comp)?;
    let v = tape.leaf(entry.z_gud.mul(&complement)?);
    let c = tape.cosine_sim(u, v)?;
    let one = tape.leaf(Tensor::scalar(1.0));
    tape.sub(one, c)
}

/// Editing energy scalar; in [0, 2].
pub fn energy_edit(z_t: &Tensor, bank: &MemoryBank, spec: &EditSpec, t: usize) -> Result<f64> {
    let entry = bank.entry(t)?;
    let mut tape = Tape::new();
    let z = tape.leaf(z_t.clone());
    let e = build_energy_edit(&mut tape, z, entry, spec, t)?;
    tape.value(e).item()
}

/// Content-consistency energy scalar; in [0, 2].
pub fn energy_content(z_t: &Tensor, bank: &MemoryBank, spec: &EditSpec, t: usize) -> Result<f64> {
    let entry = bank.entry(t)?;
    let mut tape = Tape::new();
    let z = tape.leaf(z_t.clone());
    let e = build_energy_content(&mut tape, z, entry, spec)?;
    tape.value(e).item()
}

fn max_normalize(g: &Tensor) -> Tensor {
    let m = g.max_abs();
    g.scale(1.0 / (m + 1e-8))
}

/// Unnormalized gradient of the editing energy with respect to the latent.
pub fn raw_edit_gradient(
    z_t: &Tensor,
    bank: &MemoryBank,
    spec: &EditSpec,
    t: usize,
) -> Result<Tensor> {
    let entry = bank.entry(t)?;
    let mut tape = Tape::new();
    let z = tape.leaf(z_t.clone());
    let e = build_energy_edit(&mut tape, z, entry, spec, t)?;
    tape.grad(e, z)
}

/// Unnormalized gradient of the content energy with respect to the latent.
pub fn raw_content_gradient(
    z_t: &Tensor,
    bank: &MemoryBank,
    spec: &EditSpec,
    t: usize,
) -> Result<Tensor> {
    let entry = bank.entry(t)?;
    let mut tape = Tape::new();
    let z = tape.leaf(z_t.clone());
    let e = build_energy_content(&mut tape, z, entry, spec)?;
    tape.grad(e, z)
}

pub fn normalized_edit_gradient(
    z_t: &Tensor,
    bank: &MemoryBank,
    spec: &EditSpec,
    t: usize,
) -> Result<Tensor> {
    Ok(max_normalize(&raw_edit_gradient(z_t, bank, spec, t)?))
}

pub fn normalized_content_gradient(
    z_t: &Tensor,
    bank: &MemoryBank,
    spec: &EditSpec,
    t: usize,
) -> Result<Tensor> {
    Ok(max_normalize(&raw_content_gradient(z_t, bank, spec, t)?))
}

/// Both energies and their masked gradient combination: per pixel,
/// `m * g_edit + (1 - m) * g_content` over the max-normalized gradients.
/// At exactly 0 or 1 the blend selects the single branch bitwise.
pub fn regional_gradient(
    z_t: &Tensor,
    bank: &MemoryBank,
    spec: &EditSpec,
    t: usize,
) -> Result<EnergyReport> {
    let entry = bank.entry(t)?;
    z_t.same_shape(&entry.z_gud, "regional_gradient")?;
    let mut tape = Tape::new();
    let z = tape.leaf(z_t.clone());
    let e_edit = build_energy_edit(&mut tape, z, entry, spec, t)?;
    let e_content = build_energy_content(&mut tape, z, entry, spec)?;

    let g_edit = max_normalize(&tape.grad(e_edit, z)?);
    let g_content = max_normalize(&tape.grad(e_content, z)?);

    let mut grad = Tensor::zeros(z_t.shape());
    for i in 0..grad.len() {
        let m = spec.mask.data()[i];
        grad.data_mut()[i] = if m == 0.0 {
            g_content.data()[i]
        } else if m == 1.0 {
            g_edit.data()[i]
        } else {
            m * g_edit.data()[i] + (1.0 - m) * g_content.data()[i]
        };
    }
    Ok(EnergyReport {
        e_edit: tape.value(e_edit).item()?,
        e_content: tape.value(e_content).item()?,
        grad,
    })
}

/// Guided noise update: `eps + lr * grad`.
pub fn guided_eps(eps: &Tensor, report: &EnergyReport, lr: f64) -> Result<Tensor> {
    eps.zip_map(&report.grad, "guided_eps", |e, g| e + lr * g)
}

fn disk(h: usize, w: usize, center: Coord, radius: f64) -> Vec<Coord> {
    let mut out = Vec::new();
    let r2 = radius * radius;
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - center.0 as f64;
            let dy = y as f64 - center.1 as f64;
            if dx * dx + dy * dy <= r2 {
                out.push((x, y));
            }
        }
    }
    out
}

fn mask_from_coords(h: usize, w: usize, coords: impl IntoIterator<Item = Coord>) -> Tensor {
    let mut mask = Tensor::zeros(&[h, w]);
    for (x, y) in coords {
        mask.data_mut()[y * w + x] = 1.0;
    }
    mask
}

fn shift(c: Coord, dx: i64, dy: i64, h: usize, w: usize) -> Option<Coord> {
    let x = c.0 as i64 + dx;
    let y = c.1 as i64 + dy;
    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
        None
    } else {
        Some((x as usize, y as usize))
    }
}

/// Picks a background sampling offset whose shifted disk stays in bounds and
/// clear of the mask.
fn background_offset(
    h: usize,
    w: usize,
    region: &[Coord],
    mask: &Tensor,
    dist: i64,
) -> Result<(i64, i64)> {
    let candidates = [(0, -dist), (0, dist), (-dist, 0), (dist, 0)];
    'outer: for &(dx, dy) in &candidates {
        for &c in region {
            match shift(c, dx, dy, h, w) {
                Some((x, y)) if mask.at2(y, x) == 0.0 => {}
                _ => continue 'outer,
            }
        }
        return Ok((dx, dy));
    }
    Err(Error::EditSpec(
        "no background sampling region clear of the mask".into(),
    ))
}

/// Object move: pulls the object's appearance onto the destination region and
/// background appearance over the vacated source region.
pub fn move_task(
    latent: (usize, usize),
    src: Coord,
    dst: Coord,
    object_radius: f64,
    mask_radius: f64,
) -> Result<EditSpec> {
    let (h, w) = latent;
    let mask_coords: Vec<Coord> = disk(h, w, src, mask_radius)
        .into_iter()
        .chain(disk(h, w, dst, mask_radius))
        .collect();
    let mask = mask_from_coords(h, w, mask_coords);
    let (ox, oy) = (dst.0 as i64 - src.0 as i64, dst.1 as i64 - src.1 as i64);
    let object = disk(h, w, src, object_radius);
    let bg = background_offset(h, w, &object, &mask, 2 * mask_radius.ceil() as i64 + 2)?;
    let mut region_map = Vec::new();
    let mut claimed = std::collections::HashSet::new();
    for &p in &object {
        let d = shift(p, ox, oy, h, w)
            .ok_or_else(|| Error::EditSpec(format!("destination of {p:?} out of bounds")))?;
        region_map.push((p, d));
        claimed.insert(d);
    }
    // Background appearance over the vacated source region; object pairs win
    // where source and destination disks overlap.
    for &p in &object {
        if claimed.contains(&p) {
            continue;
        }
        let b = shift(p, bg.0, bg.1, h, w).expect("checked by background_offset");
        region_map.push((b, p));
    }
    let spec = EditSpec {
        task: EditTask::Move,
        mask,
        region_map,
        reference_id: None,
    };
    spec.validate(&[h, w])?;
    Ok(spec)
}

/// Content drag: straight-line pairing from a handle point to a target point
/// with a circular neighborhood.
pub fn drag_task(latent: (usize, usize), handle: Coord, target: Coord) -> Result<EditSpec> {
    const DRAG_RADIUS: f64 = 3.0;
    let (h, w) = latent;
    // Mask: disks swept along the handle-target segment.
    let steps = ((target.0 as f64 - handle.0 as f64)
        .hypot(target.1 as f64 - handle.1 as f64)
        .ceil() as usize)
        .max(1);
    let mut coords = Vec::new();
    for i in 0..=steps {
        let f = i as f64 / steps as f64;
        let cx = handle.0 as f64 + f * (target.0 as f64 - handle.0 as f64);
        let cy = handle.1 as f64 + f * (target.1 as f64 - handle.1 as f64);
        coords.extend(disk(
            h,
            w,
            (cx.round() as usize, cy.round() as usize),
            DRAG_RADIUS + 1.0,
        ));
    }
    let mask = mask_from_coords(h, w, coords);
    let (ox, oy) = (
        target.0 as i64 - handle.0 as i64,
        target.1 as i64 - handle.1 as i64,
    );
    let neighborhood = disk(h, w, handle, DRAG_RADIUS);
    let bg = background_offset(h, w, &neighborhood, &mask, 2 * (DRAG_RADIUS as i64) + 4)?;
    let mut region_map = Vec::new();
    let mut claimed = std::collections::HashSet::new();
    for &p in &neighborhood {
        let d = shift(p, ox, oy, h, w)
            .ok_or_else(|| Error::EditSpec(format!("drag destination of {p:?} out of bounds")))?;
        region_map.push((p, d));
        claimed.insert(d);
    }
    for &p in &neighborhood {
        if claimed.contains(&p) {
            continue;
        }
        let b = shift(p, bg.0, bg.1, h, w).expect("checked by background_offset");
        region_map.push((b, p));
    }
    let spec = EditSpec {
        task: EditTask::Drag,
        mask,
        region_map,
        reference_id: None,
    };
    spec.validate(&[h, w])?;
    Ok(spec)
}

/// Object resize about a center: destination pixels pull from
/// nearest-neighbor scaled source coordinates.
pub fn resize_task(
    latent: (usize, usize),
    center: Coord,
    object_radius: f64,
    scale: f64,
) -> Result<EditSpec> {
    if scale <= 0.0 {
        return Err(Error::EditSpec(format!("scale {scale} must be positive")));
    }
    let (h, w) = latent;
    let dst_radius = object_radius * scale;
    let mask_radius = object_radius.max(dst_radius) + 1.0;
    let mask = mask_from_coords(h, w, disk(h, w, center, mask_radius));
    let mut region_map = Vec::new();
    for q in disk(h, w, center, dst_radius) {
        // Nearest-neighbor source under coordinate scaling about the center.
        let sx = (center.0 as f64 + (q.0 as f64 - center.0 as f64) / scale).round();
        let sy = (center.1 as f64 + (q.1 as f64 - center.1 as f64) / scale).round();
        if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
            return Err(Error::EditSpec(format!(
                "resize source of {q:?} out of bounds"
            )));
        }
        region_map.push(((sx as usize, sy as usize), q));
    }
    // When shrinking, pull background over the vacated ring.
    if scale < 1.0 {
        let ring: Vec<Coord> = disk(h, w, center, object_radius)
            .into_iter()
            .filter(|&(x, y)| {
                let dx = x as f64 - center.0 as f64;
                let dy = y as f64 - center.1 as f64;
                dx * dx + dy * dy > dst_radius * dst_radius
            })
            .collect();
        let bg = background_offset(h, w, &ring, &mask, 2 * mask_radius.ceil() as i64 + 2)?;
        for &p in &ring {
            let b = shift(p, bg.0, bg.1, h, w).expect("checked by background_offset");
            region_map.push((b, p));
        }
    }
    let spec = EditSpec {
        task: EditTask::Resize,
        mask,
        region_map,
        reference_id: None,
    };
    spec.validate(&[h, w])?;
    Ok(spec)
}

/// Object paste: pulls a region of the reference image onto a destination
/// region of the edited image.
pub fn paste_task(
    latent: (usize, usize),
    ref_center: Coord,
    dst_center: Coord,
    radius: f64,
    reference_id: String,
) -> Result<EditSpec> {
    let (h, w) = latent;
    let mask = mask_from_coords(h, w, disk(h, w, dst_center, radius + 1.0));
    let (ox, oy) = (
        dst_center.0 as i64 - ref_center.0 as i64,
        dst_center.1 as i64 - ref_center.1 as i64,
    );
    let mut region_map = Vec::new();
    for p in disk(h, w, ref_center, radius) {
        let d = shift(p, ox, oy, h, w)
            .ok_or_else(|| Error::EditSpec(format!("paste destination of {p:?} out of bounds")))?;
        region_map.push((p, d));
    }
    let spec = EditSpec {
        task: EditTask::Paste,
        mask,
        region_map,
        reference_id: Some(reference_id),
    };
    spec.validate(&[h, w])?;
    Ok(spec)
}

/// Appearance replace: pulls the reference appearance onto the same
/// coordinates inside the masked region.
pub fn replace_task(
    latent: (usize, usize),
    center: Coord,
    radius: f64,
    reference_id: String,
) -> Result<EditSpec> {
    let (h, w) = latent;
    let region = disk(h, w, center, radius);
    let mask = mask_from_coords(h, w, region.iter().copied());
    let region_map = region.into_iter().map(|p| (p, p)).collect();
    let spec = EditSpec {
        task: EditTask::Replace,
        mask,
        region_map,
        reference_id: Some(reference_id),
    };
    spec.validate(&[h, w])?;
    Ok(spec)
}

/// An identity edit over a latent grid: all-zero mask, empty region map.
pub fn identity_task(latent: (usize, usize)) -> EditSpec {
    EditSpec {
        task: EditTask::Move,
        mask: Tensor::zeros(&[latent.0, latent.1]),
        region_map: Vec::new(),
        reference_id: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::sampler::MemoryBank;

    fn bank_with(z_gud: Tensor, z_ref: Option<Tensor>, t: usize) -> MemoryBank {
        let mut bank = MemoryBank::new(z_gud.shape().to_vec());
        bank.insert(
            t,
            BankEntry {
                z_gud,
                z_ref,
                kv_gud: Vec::new(),
                kv_ref: Vec::new(),
            },
        );
        bank
    }

    fn simple_spec(h: usize, w: usize) -> EditSpec {
        // One pair: source (2,2) -> destination (5,5); mask covers dest.
        let mask = mask_from_coords(h, w, disk(h, w, (5, 5), 2.0));
        EditSpec {
            task: EditTask::Move,
            mask,
            region_map: vec![((2, 2), (5, 5))],
            reference_id: None,
        }
    }

    #[test]
    fn identical_patches_zero_energy() {
        let mut rng = crate::test_rng(1);
        let z = Tensor::randn(&[8, 8], &mut rng);
        // Bank latent whose (2,2) patch equals z's (5,5) patch.
        let mut g = Tensor::randn(&[8, 8], &mut rng);
        let si = patch_flat_indices(8, 8, (2, 2));
        let di = patch_flat_indices(8, 8, (5, 5));
        for (s, d) in si.iter().zip(&di) {
            g.data_mut()[*s] = z.data()[*d];
        }
        let bank = bank_with(g, None, 100);
        let e = energy_edit(&z, &bank, &simple_spec(8, 8), 100).unwrap();
        assert!(e.abs() < 1e-9, "e_edit {e}");
    }

    #[test]
    fn orthogonal_patches_unit_energy_antialigned_two() {
        // Build z and bank so the compared patches are orthogonal, then
        // anti-aligned.
        let mut z = Tensor::zeros(&[8, 8]);
        let mut g = Tensor::zeros(&[8, 8]);
        let di = patch_flat_indices(8, 8, (5, 5));
        let si = patch_flat_indices(8, 8, (2, 2));
        z.data_mut()[di[0]] = 1.0;
        g.data_mut()[si[1]] = 1.0; // orthogonal
        let bank = bank_with(g.clone(), None, 7);
        let e = energy_edit(&z, &bank, &simple_spec(8, 8), 7).unwrap();
        assert!((e - 1.0).abs() < 1e-9, "orthogonal e {e}");

        let mut g2 = Tensor::zeros(&[8, 8]);
        g2.data_mut()[si[0]] = -1.0; // anti-aligned
        let bank = bank_with(g2, None, 7);
        let e = energy_edit(&z, &bank, &simple_spec(8, 8), 7).unwrap();
        assert!((e - 2.0).abs() < 1e-9, "anti-aligned e {e}");
    }

    #[test]
    fn content_energy_identical_and_empty_complement() {
        let mut rng = crate::test_rng(2);
        let z = Tensor::randn(&[8, 8], &mut rng);
        let bank = bank_with(z.clone(), None, 3);
        let spec = simple_spec(8, 8);
        assert!(energy_content(&z, &bank, &spec, 3).unwrap().abs() < 1e-9);

        let all_mask = EditSpec {
            mask: Tensor::full(&[8, 8], 1.0),
            ..simple_spec(8, 8)
        };
        let other = Tensor::randn(&[8, 8], &mut rng);
        assert_eq!(energy_content(&other, &bank, &all_mask, 3).unwrap(), 0.0);
    }

    #[test]
    fn content_energy_antialigned_complement() {
        let mut rng = crate::test_rng(3);
        let z = Tensor::randn(&[8, 8], &mut rng);
        let bank = bank_with(z.scale(-1.0), None, 3);
        let spec = simple_spec(8, 8);
        let e = energy_content(&z, &bank, &spec, 3).unwrap();
        assert!((e - 2.0).abs() < 1e-9, "e_content {e}");
    }

    #[test]
    fn missing_bank_entry_is_error() {
        let z = Tensor::zeros(&[8, 8]);
        let bank = bank_with(z.clone(), None, 3);
        assert!(matches!(
            energy_edit(&z, &bank, &simple_spec(8, 8), 4),
            Err(Error::MissingBankEntry(4))
        ));
    }

    #[test]
    fn gradient_limits_at_extreme_masks() {
        let mut rng = crate::test_rng(4);
        let z = Tensor::randn(&[8, 8], &mut rng);
        let g = Tensor::randn(&[8, 8], &mut rng);
        let bank = bank_with(g, None, 9);

        let mut spec = simple_spec(8, 8);
        spec.mask = Tensor::full(&[8, 8], 1.0);
        let report = regional_gradient(&z, &bank, &spec, 9).unwrap();
        // mask == 1 everywhere: combined gradient is the normalized edit
        // gradient exactly; content term contributes nothing.
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let entry = bank.entry(9).unwrap();
        let e = build_energy_edit(&mut tape, zv, entry, &spec, 9).unwrap();
        let want = max_normalize(&tape.grad(e, zv).unwrap());
        assert_eq!(report.grad, want);

        let mut spec0 = simple_spec(8, 8);
        spec0.mask = Tensor::zeros(&[8, 8]);
        spec0.region_map.clear(); // destinations must lie in support
        let report = regional_gradient(&z, &bank, &spec0, 9).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let e = build_energy_content(&mut tape, zv, entry, &spec0).unwrap();
        let want = max_normalize(&tape.grad(e, zv).unwrap());
        assert_eq!(report.grad, want);
    }

    #[test]
    fn raw_energy_gradients_match_finite_differences() {
        let mut rng = crate::test_rng(5);
        let z0 = Tensor::randn(&[8, 8], &mut rng);
        let g = Tensor::randn(&[8, 8], &mut rng);
        let bank = bank_with(g, None, 11);
        let spec = simple_spec(8, 8);
        let entry = bank.entry(11).unwrap();

        let mut tape = Tape::new();
        let zv = tape.leaf(z0.clone());
        let e_edit = build_energy_edit(&mut tape, zv, entry, &spec, 11).unwrap();
        let e_cont = build_energy_content(&mut tape, zv, entry, &spec).unwrap();
        let ge = tape.grad(e_edit, zv).unwrap();
        let gc = tape.grad(e_cont, zv).unwrap();

        let fd_e =
            oracle::finite_diff_grad(&z0, 1e-5, |z| energy_edit(z, &bank, &spec, 11).unwrap());
        let fd_c =
            oracle::finite_diff_grad(&z0, 1e-5, |z| energy_content(z, &bank, &spec, 11).unwrap());
        assert!(
            oracle::rel_err(&ge, &fd_e) < 1e-4,
            "edit {}",
            oracle::rel_err(&ge, &fd_e)
        );
        assert!(
            oracle::rel_err(&gc, &fd_c) < 1e-4,
            "content {}",
            oracle::rel_err(&gc, &fd_c)
        );
    }

    #[test]
    fn energies_scale_invariant() {
        let mut rng = crate::test_rng(6);
        let z = Tensor::randn(&[8, 8], &mut rng);
        let g = Tensor::randn(&[8, 8], &mut rng);
        let spec = simple_spec(8, 8);
        let e1 = energy_edit(&z, &bank_with(g.clone(), None, 1), &spec, 1).unwrap();
        let e2 = energy_edit(&z.scale(3.0), &bank_with(g.scale(7.0), None, 1), &spec, 1).unwrap();
        assert!((e1 - e2).abs() < 1e-9, "{e1} vs {e2}");
    }

    #[test]
    fn guided_eps_limits() {
        let mut rng = crate::test_rng(7);
        let eps = Tensor::randn(&[4, 4], &mut rng);
        let grad = Tensor::randn(&[4, 4], &mut rng);
        let report = EnergyReport {
            e_edit: 0.0,
            e_content: 0.0,
            grad: grad.clone(),
        };
        assert_eq!(guided_eps(&eps, &report, 0.0).unwrap(), eps);
        let zero_report = EnergyReport {
            e_edit: 0.0,
            e_content: 0.0,
            grad: Tensor::zeros(&[4, 4]),
        };
        assert_eq!(guided_eps(&eps, &zero_report, 0.7).unwrap(), eps);
        let from_zero = guided_eps(&Tensor::zeros(&[4, 4]), &report, 2.0).unwrap();
        assert_eq!(from_zero, grad.scale(2.0));
    }

    #[test]
    fn paste_uses_reference_and_missing_ref_errors() {
        let mut rng = crate::test_rng(8);
        let z = Tensor::randn(&[16, 16], &mut rng);
        let spec = paste_task((16, 16), (4, 4), (11, 11), 2.0, "ref".into()).unwrap();
        let bank = bank_with(z.clone(), None, 5);
        assert!(matches!(
            energy_edit(&z, &bank, &spec, 5),
            Err(Error::MissingBankRef(5))
        ));
        let bank = bank_with(z.clone(), Some(z.clone()), 5);
        assert!(energy_edit(&z, &bank, &spec, 5).is_ok());
    }

    #[test]
    fn validate_rejects_bad_specs() {
        let (h, w) = (8, 8);
        let mut spec = simple_spec(h, w);
        // destination outside support
        spec.region_map.push(((0, 0), (0, 0)));
        assert!(spec.validate(&[h, w]).is_err());

        let mut spec = simple_spec(h, w);
        // duplicate destination
        spec.region_map.push(((3, 3), (5, 5)));
        assert!(spec.validate(&[h, w]).is_err());

        let mut spec = simple_spec(h, w);
        spec.mask.data_mut()[0] = 1.5;
        assert!(spec.validate(&[h, w]).is_err());
    }

    #[test]
    fn task_builders_produce_valid_specs() {
        let latent = (32, 32);
        assert!(move_task(latent, (10, 16), (22, 16), 4.0, 5.0).is_ok());
        assert!(drag_task(latent, (12, 12), (20, 20)).is_ok());
        assert!(resize_task(latent, (16, 16), 4.0, 1.5).is_ok());
        assert!(resize_task(latent, (16, 16), 4.0, 0.5).is_ok());
        assert!(paste_task(latent, (8, 8), (24, 24), 3.0, "r".into()).is_ok());
        assert!(replace_task(latent, (16, 16), 4.0, "r".into()).is_ok());
        let id = identity_task(latent);
        assert!(id.is_identity());
        assert!(id.validate(&[32, 32]).is_ok());
    }
}
