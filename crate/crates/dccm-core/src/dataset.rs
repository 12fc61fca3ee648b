//! Training-set generation: a full lattice sweep over parameters, states and
//! inputs, storing `{r, x_k, x_{k+1}, A_k, B_k}` per tuple, plus an on-disk
//! format (JSON header + fixed-width binary records).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IntervalBox, PlantModel};

/// Lattice step sizes per dimension for the `R x X x U` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub state_step: Vec<f64>,
    pub input_step: Vec<f64>,
    pub param_step: Vec<f64>,
}

impl GridSpec {
    /// Broadcast scalar steps across each box of the model.
    pub fn uniform(model: &PlantModel, state: f64, input: f64, param: f64) -> Self {
        Self {
            state_step: vec![state; model.n],
            input_step: vec![input; model.m],
            param_step: vec![param; model.ell],
        }
    }

    /// The case-study resolution: state 1/60, input 1/10, parameter 1/10.
    pub fn full_resolution(model: &PlantModel) -> Self {
        Self::uniform(model, 1.0 / 60.0, 1.0 / 10.0, 1.0 / 10.0)
    }

    /// Desk-scale resolution: state 1/10, input 1/5, parameter 1/2.
    pub fn desk_scale(model: &PlantModel) -> Self {
        Self::uniform(model, 1.0 / 10.0, 1.0 / 5.0, 1.0 / 2.0)
    }

    pub fn validate(&self, model: &PlantModel) -> Result<()> {
        let check = |steps: &[f64], bx: &IntervalBox, what: &str| -> Result<()> {
            if steps.len() != bx.dim() {
                return Err(Error::Config(format!(
                    "{what} step count {} does not match box dimension {}",
                    steps.len(),
                    bx.dim()
                )));
            }
            for (i, &s) in steps.iter().enumerate() {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Config(format!("{what} step {i} must be > 0, got {s}")));
                }
            }
            Ok(())
        };
        check(&self.state_step, &model.state_box, "state")?;
        check(&self.input_step, &model.input_box, "input")?;
        check(&self.param_step, &model.param_box, "param")?;
        Ok(())
    }
}

/// Inclusive 1-D lattice `lo, lo+step, ..` with `floor((hi-lo)/step)+1` points.
///
/// The small slack absorbs representation dust like `(3-1)/0.1` landing just
/// below an integer.
pub fn axis_points(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("grid step must be > 0, got {step}")));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| lo + i as f64 * step).collect())
}

/// Inclusive lattice over a box, one step per dimension, row-major with the
/// last dimension varying fastest. A zero-dimensional box yields the single
/// empty point.
pub fn grid_points(bx: &IntervalBox, steps: &[f64]) -> Result<Vec<Vec<f64>>> {
    if steps.len() != bx.dim() {
        return Err(Error::DimensionMismatch {
            context: "grid_points steps",
            expected: bx.dim(),
            got: steps.len(),
        });
    }
    let axes: Vec<Vec<f64>> = bx
        .lo
        .iter()
        .zip(bx.hi.iter().zip(steps))
        .map(|(&lo, (&hi, &s))| axis_points(lo, hi, s))
        .collect::<Result<_>>()?;
    let total: usize = axes.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; axes.len()];
    for _ in 0..total {
        out.push(idx.iter().zip(&axes).map(|(&i, ax)| ax[i]).collect());
        for d in (0..axes.len()).rev() {
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(out)
}

/// Number of lattice tuples the sweep will produce, by lattice arithmetic.
pub fn element_count(model: &PlantModel, grid: &GridSpec) -> Result<u64> {
    grid.validate(model)?;
    let count_axis = |bx: &IntervalBox, steps: &[f64]| -> Result<u64> {
        let mut c = 1u64;
        for (i, &s) in steps.iter().enumerate() {
            let pts = ((bx.width(i)) / s + 1e-9).floor() as u64 + 1;
            c = c.checked_mul(pts).ok_or(Error::Numeric("lattice count overflow".into()))?;
        }
        Ok(c)
    };
    Ok(count_axis(&model.param_box, &grid.param_step)?
        .checked_mul(count_axis(&model.state_box, &grid.state_step)?)
        .and_then(|c| c.checked_mul(count_axis(&model.input_box, &grid.input_step).ok()?))
        .ok_or(Error::Numeric("lattice count overflow".into()))?)
}

/// One stored record, viewed in place.
#[derive(Debug, Clone, Copy)]
pub struct ElementRef<'a> {
    pub r: &'a [f64],
    pub x_k: &'a [f64],
    pub x_k1: &'a [f64],
    /// Row-major n x n Jacobian of the one-step map w.r.t. x.
    pub a: &'a [f64],
    /// Row-major n x m Jacobian w.r.t. u.
    pub b: &'a [f64],
    /// Successor left the state box.
    pub flagged: bool,
}

/// Columnar storage for the generated sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub model_name: String,
    pub n: usize,
    pub m: usize,
    pub ell: usize,
    pub grid: GridSpec,
    pub state_box: IntervalBox,
    pub input_box: IntervalBox,
    pub param_box: IntervalBox,
    pub skipped_nonfinite: u64,
    data: Vec<f64>,
    flags: Vec<u8>,
}

impl Dataset {
    pub fn stride(&self) -> usize {
        record_stride(self.n, self.m, self.ell)
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn element(&self, i: usize) -> ElementRef<'_> {
        let s = self.stride();
        let rec = &self.data[i * s..(i + 1) * s];
        let (n, m, ell) = (self.n, self.m, self.ell);
        ElementRef {
            r: &rec[0..ell],
            x_k: &rec[ell..ell + n],
            x_k1: &rec[ell + n..ell + 2 * n],
            a: &rec[ell + 2 * n..ell + 2 * n + n * n],
            b: &rec[ell + 2 * n + n * n..ell + 2 * n + n * n + n * m],
            flagged: self.flags[i] != 0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = ElementRef<'_>> {
        (0..self.len()).map(move |i| self.element(i))
    }

    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f != 0).count()
    }
}

fn record_stride(n: usize, m: usize, ell: usize) -> usize {
    ell + 2 * n + n * n + n * m
}

/// Run the lattice sweep. Ordering is parameter-major, then state, then
/// input; generation parallelizes over parameter slices and merges them back
/// in lattice order, so two runs produce identical datasets.
pub fn generate_dataset(model: &PlantModel, grid: &GridSpec) -> Result<Dataset> {
    grid.validate(model)?;
    let r_lattice = grid_points(&model.param_box, &grid.param_step)?;
    let x_lattice = grid_points(&model.state_box, &grid.state_step)?;
    let u_lattice = grid_points(&model.input_box, &grid.input_step)?;
    let stride = record_stride(model.n, model.m, model.ell);

    let slices: Vec<Result<(Vec<f64>, Vec<u8>, u64)>> = r_lattice
        .par_iter()
        .map(|r| {
            let mut data = Vec::with_capacity(x_lattice.len() * u_lattice.len() * stride);
            let mut flags = Vec::with_capacity(x_lattice.len() * u_lattice.len());
            let mut skipped = 0u64;
            for x in &x_lattice {
                for u in &u_lattice {
                    let next = match model.step(r, x, u) {
                        Ok(v) => v,
                        Err(Error::NonFinite { .. }) => {
                            skipped += 1;
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    let (a, b) = model.jacobians(r, x, u)?;
                    data.extend_from_slice(r);
                    data.extend_from_slice(x);
                    data.extend(next.iter());
                    data.extend(a.row_iter().flat_map(|row| row.iter().copied().collect::<Vec<_>>()));
                    data.extend(b.row_iter().flat_map(|row| row.iter().copied().collect::<Vec<_>>()));
                    flags.push(u8::from(!model.state_box.contains(next.as_slice())));
                }
            }
            Ok((data, flags, skipped))
        })
        .collect();

    let mut data = Vec::new();
    let mut flags = Vec::new();
    let mut skipped_nonfinite = 0;
    for slice in slices {
        let (d, f, s) = slice?;
        data.extend_from_slice(&d);
        flags.extend_from_slice(&f);
        skipped_nonfinite += s;
    }
    Ok(Dataset {
        model_name: model.name.clone(),
        n: model.n,
        m: model.m,
        ell: model.ell,
        grid: grid.clone(),
        state_box: model.state_box.clone(),
        input_box: model.input_box.clone(),
        param_box: model.param_box.clone(),
        skipped_nonfinite,
        data,
        flags,
    })
}

const DATASET_MAGIC: &[u8; 8] = b"DCCMDS1\n";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    model_name: String,
    n: usize,
    m: usize,
    ell: usize,
    grid: GridSpec,
    state_box: IntervalBox,
    input_box: IntervalBox,
    param_box: IntervalBox,
    element_count: u64,
    skipped_nonfinite: u64,
}

/// Write a dataset: magic, little-endian header length, JSON header, then
/// per record `stride` f64 values plus one flag byte.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&pstr, e))?;
    let mut w = BufWriter::new(file);
    let header = DatasetHeader {
        model_name: ds.model_name.clone(),
        n: ds.n,
        m: ds.m,
        ell: ds.ell,
        grid: ds.grid.clone(),
        state_box: ds.state_box.clone(),
        input_box: ds.input_box.clone(),
        param_box: ds.param_box.clone(),
        element_count: ds.len() as u64,
        skipped_nonfinite: ds.skipped_nonfinite,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Config(format!("header encode: {e}")))?;
    w.write_all(DATASET_MAGIC).map_err(|e| Error::io(&pstr, e))?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(&pstr, e))?;
    w.write_all(&header_bytes).map_err(|e| Error::io(&pstr, e))?;
    let stride = ds.stride();
    for i in 0..ds.len() {
        for v in &ds.data[i * stride..(i + 1) * stride] {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&pstr, e))?;
        }
        w.write_all(&[ds.flags[i]]).map_err(|e| Error::io(&pstr, e))?;
    }
    w.flush().map_err(|e| Error::io(&pstr, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&pstr, e))?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;
    let parse_err = |offset: u64, message: &str| Error::Parse {
        path: pstr.clone(),
        offset,
        message: message.into(),
    };

    let mut magic = [0u8; 8];
    read_exact_at(&mut r, &mut magic, &mut offset, &pstr)?;
    if &magic != DATASET_MAGIC {
        return Err(parse_err(0, "bad magic, not a dataset file"));
    }
    let mut len_bytes = [0u8; 4];
    read_exact_at(&mut r, &mut len_bytes, &mut offset, &pstr)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_at(&mut r, &mut header_bytes, &mut offset, &pstr)?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| parse_err(12, &format!("header decode: {e}")))?;

    let stride = record_stride(header.n, header.m, header.ell);
    let count = header.element_count as usize;
    let mut data = Vec::with_capacity(count * stride);
    let mut flags = Vec::with_capacity(count);
    let mut buf = vec![0u8; stride * 8 + 1];
    for i in 0..count {
        let rec_offset = offset;
        r.read_exact(&mut buf).map_err(|_| {
            Error::Parse {
                path: pstr.clone(),
                offset: rec_offset,
                message: format!("truncated record {i} of {count}"),
            }
        })?;
        offset += buf.len() as u64;
        for c in buf[..stride * 8].chunks_exact(8) {
            data.push(f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        }
        flags.push(buf[stride * 8]);
    }
    Ok(Dataset {
        model_name: header.model_name,
        n: header.n,
        m: header.m,
        ell: header.ell,
        grid: header.grid,
        state_box: header.state_box,
        input_box: header.input_box,
        param_box: header.param_box,
        skipped_nonfinite: header.skipped_nonfinite,
        data,
        flags,
    })
}

fn read_exact_at(
    r: &mut impl Read,
    buf: &mut [u8],
    offset: &mut u64,
    path: &str,
) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Parse {
        path: path.to_string(),
        offset: *offset,
        message: format!("truncated file, expected {} more bytes", buf.len()),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

/// Plain-text export for inspection.
pub fn export_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&pstr, e))?;
    let mut w = BufWriter::new(file);
    let mut cols: Vec<String> = Vec::new();
    cols.extend((0..ds.ell).map(|i| format!("r{}", i + 1)));
    cols.extend((0..ds.n).map(|i| format!("x{}_k", i + 1)));
    cols.extend((0..ds.n).map(|i| format!("x{}_k1", i + 1)));
    for i in 0..ds.n {
        cols.extend((0..ds.n).map(move |j| format!("a{}{}", i + 1, j + 1)));
    }
    for i in 0..ds.n {
        cols.extend((0..ds.m).map(move |j| format!("b{}{}", i + 1, j + 1)));
    }
    cols.push("flagged".into());
    writeln!(w, "{}", cols.join(",")).map_err(|e| Error::io(&pstr, e))?;
    let stride = ds.stride();
    for i in 0..ds.len() {
        let rec = &ds.data[i * stride..(i + 1) * stride];
        let mut line = rec.iter().map(|v| v.to_string()).collect::<Vec<_>>();
        line.push((ds.flags[i] as usize).to_string());
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(&pstr, e))?;
    }
    w.flush().map_err(|e| Error::io(&pstr, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cstr, scalar_linear, CstrParams};

    #[test]
    fn axis_counts_match_lattice_arithmetic() {
        let pts = axis_points(0.1, 1.1, 1.0 / 60.0).unwrap();
        assert_eq!(pts.len(), 61);
        assert!((pts[0] - 0.1).abs() < 1e-12);
        assert!((pts[60] - 1.1).abs() < 1e-12);

        let pts = axis_points(-1.0, 1.0, 0.1).unwrap();
        assert_eq!(pts.len(), 21);

        // Degenerate: step larger than the width leaves the lower bound only.
        let pts = axis_points(2.0, 2.0 + 1e-6, 0.5).unwrap();
        assert_eq!(pts, vec![2.0]);

        assert!(axis_points(0.0, 1.0, 0.0).is_err());
        assert!(axis_points(0.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn full_resolution_count_is_1640961() {
        let model = cstr(CstrParams::default()).unwrap();
        let grid = GridSpec::full_resolution(&model);
        assert_eq!(element_count(&model, &grid).unwrap(), 1_640_961);
    }

    #[test]
    fn desk_scale_count_is_6655() {
        let model = cstr(CstrParams::default()).unwrap();
        let grid = GridSpec::desk_scale(&model);
        assert_eq!(element_count(&model, &grid).unwrap(), 6_655);
        let ds = generate_dataset(&model, &grid).unwrap();
        assert_eq!(ds.len(), 6_655);
    }

    #[test]
    fn single_point_grid_produces_one_element() {
        let model = scalar_linear(2.0, 1.0, [-1.0, 1.0], [-3.0, 3.0]).unwrap();
        let grid = GridSpec::uniform(&model, 2.5, 6.5, 1.0);
        let ds = generate_dataset(&model, &grid).unwrap();
        assert_eq!(ds.len(), 1);
        let e = ds.element(0);
        assert_eq!(e.x_k, &[-1.0]);
        assert_eq!(e.a, &[2.0]);
        assert_eq!(e.b, &[1.0]);
    }

    #[test]
    fn elements_are_consistent_with_step() {
        let model = cstr(CstrParams::default()).unwrap();
        let grid = GridSpec::uniform(&model, 0.5, 1.0, 1.0);
        let ds = generate_dataset(&model, &grid).unwrap();
        for e in ds.iter() {
            // x_k1 must be reachable from x_k under some lattice input.
            let u_lattice = grid_points(&model.input_box, &grid.input_step).unwrap();
            let ok = u_lattice.iter().any(|u| {
                let next = model.step(e.r, e.x_k, u).unwrap();
                next.iter().zip(e.x_k1).all(|(a, b)| (a - b).abs() < 1e-12)
            });
            assert!(ok);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let model = cstr(CstrParams::default()).unwrap();
        let grid = GridSpec::uniform(&model, 0.25, 0.5, 1.0);
        let a = generate_dataset(&model, &grid).unwrap();
        let b = generate_dataset(&model, &grid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let model = cstr(CstrParams::default()).unwrap();
        let grid = GridSpec::uniform(&model, 0.25, 0.5, 1.0);
        let ds = generate_dataset(&model, &grid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);

        let bytes_a = std::fs::read(&path).unwrap();
        save_dataset(&ds, &path).unwrap();
        let bytes_b = std::fs::read(&path).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let model = scalar_linear(2.0, 1.0, [-1.0, 1.0], [-3.0, 3.0]).unwrap();
        let grid = GridSpec::uniform(&model, 2.5, 6.5, 1.0);
        let mut ds = generate_dataset(&model, &grid).unwrap();
        ds.data.clear();
        ds.flags.clear();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 0);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let model = cstr(CstrParams::default()).unwrap();
        let grid = GridSpec::uniform(&model, 0.5, 1.0, 1.0);
        let ds = generate_dataset(&model, &grid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { offset, message, .. }) => {
                assert!(offset > 0);
                assert!(message.contains("truncated"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_box_successors_are_flagged_not_dropped() {
        let model = cstr(CstrParams::default()).unwrap();
        // Coarse grid with strong inputs drives x2 out of [0.1, 1.1].
        let grid = GridSpec::uniform(&model, 0.5, 1.0, 1.0);
        let ds = generate_dataset(&model, &grid).unwrap();
        assert!(ds.flagged_count() > 0);
        assert_eq!(ds.len() as u64, element_count(&model, &grid).unwrap());
    }
}
