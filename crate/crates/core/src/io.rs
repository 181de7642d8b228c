//! File formats for grids, waveforms, magnetization, and design history.
//!
//! All text formats are plain CSV with fixed headers and units spelled
//! out in the column names. Floating point values are written with 17
//! significant digits so that write followed by read reproduces every
//! f64 bit for bit. Parse errors carry the file path and 1-based line
//! number of the offending row.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write as IoWrite};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{Magnetization, Pulse, SpinGrid};
use crate::objective::VoxelLabel;
use crate::optim::HistoryRecord;
use crate::vec3::Vec3;

pub const GRID_HEADER: &str = "x_cm,y_cm,z_cm,offres_rad_s,t1_s,t2_s,mask";
pub const PULSE_HEADER: &str =
    "index,rf_real_gauss,rf_imag_gauss,gx_gauss_per_cm,gy_gauss_per_cm,gz_gauss_per_cm";
pub const MAGNETIZATION_HEADER: &str = "voxel,mx,my,mz";
pub const HISTORY_HEADER: &str = "iter,block,loss,nrmse,peak_b,peak_g,peak_s,seconds";
pub const LABELS_HEADER: &str = "label";

const DT_COMMENT_PREFIX: &str = "# dt_s=";

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path_str(path), e))
}

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path_str(path), e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path_str(path),
        line,
        message: message.into(),
    }
}

fn parse_field(path: &Path, line: usize, name: &str, raw: &str) -> Result<f64> {
    let value: f64 = raw
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("{name} is not a number: {raw:?}")))?;
    if !value.is_finite() {
        return Err(parse_err(path, line, format!("{name} is not finite: {raw:?}")));
    }
    Ok(value)
}

fn split_row<'a>(
    path: &Path,
    line: usize,
    row: &'a str,
    want: usize,
) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = row.split(',').collect();
    if fields.len() != want {
        return Err(parse_err(
            path,
            line,
            format!("expected {want} comma-separated fields, found {}", fields.len()),
        ));
    }
    Ok(fields)
}

/// Writes a grid as CSV with header [`GRID_HEADER`].
pub fn write_grid_csv(path: &Path, grid: &SpinGrid) -> Result<()> {
    grid.ensure_valid()?;
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path_str(path), e);
    writeln!(w, "{GRID_HEADER}").map_err(io_err)?;
    for v in 0..grid.n_voxels() {
        let p = grid.positions[v];
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            fmt_f64(p[0]),
            fmt_f64(p[1]),
            fmt_f64(p[2]),
            fmt_f64(grid.offres[v]),
            fmt_f64(grid.t1[v]),
            fmt_f64(grid.t2[v]),
            u8::from(grid.mask[v]),
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a grid from CSV written in the [`GRID_HEADER`] layout.
pub fn read_grid_csv(path: &Path) -> Result<SpinGrid> {
    let reader = open_reader(path)?;
    let mut grid = SpinGrid {
        positions: Vec::new(),
        offres: Vec::new(),
        t1: Vec::new(),
        t2: Vec::new(),
        mask: Vec::new(),
    };
    let mut saw_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path_str(path), e))?;
        let row = line.trim();
        if row.is_empty() {
            continue;
        }
        if !saw_header {
            if row != GRID_HEADER {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected header {GRID_HEADER:?}, found {row:?}"),
                ));
            }
            saw_header = true;
            continue;
        }
        let f = split_row(path, line_no, row, 7)?;
        grid.positions.push([
            parse_field(path, line_no, "x_cm", f[0])?,
            parse_field(path, line_no, "y_cm", f[1])?,
            parse_field(path, line_no, "z_cm", f[2])?,
        ]);
        grid.offres.push(parse_field(path, line_no, "offres_rad_s", f[3])?);
        grid.t1.push(parse_field(path, line_no, "t1_s", f[4])?);
        grid.t2.push(parse_field(path, line_no, "t2_s", f[5])?);
        let mask = parse_field(path, line_no, "mask", f[6])?;
        grid.mask.push(mask != 0.0);
    }
    if !saw_header {
        return Err(parse_err(path, 1, "file is empty"));
    }
    if grid.n_voxels() == 0 {
        return Err(parse_err(path, 2, "grid has a header but no voxels"));
    }
    Ok(grid)
}

const GRID_BINARY_COLUMNS: usize = 7;

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Writes a grid as little-endian f64 rows plus a JSON sidecar
/// (`<path>.json`) describing the layout.
pub fn write_grid_binary(path: &Path, grid: &SpinGrid) -> Result<()> {
    grid.ensure_valid()?;
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path_str(path), e);
    for v in 0..grid.n_voxels() {
        let p = grid.positions[v];
        let row = [
            p[0],
            p[1],
            p[2],
            grid.offres[v],
            grid.t1[v],
            grid.t2[v],
            f64::from(u8::from(grid.mask[v])),
        ];
        for value in row {
            w.write_all(&value.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;

    let sidecar = serde_json::json!({
        "rows": grid.n_voxels(),
        "columns": GRID_HEADER.split(',').collect::<Vec<_>>(),
        "dtype": "f64-le",
        "order": "row-major",
    });
    let sc_path = sidecar_path(path);
    std::fs::write(&sc_path, format!("{sidecar:#}\n"))
        .map_err(|e| Error::io(path_str(&sc_path), e))
}

/// Reads a grid written by [`write_grid_binary`], validating it against
/// its JSON sidecar.
pub fn read_grid_binary(path: &Path) -> Result<SpinGrid> {
    let sc_path = sidecar_path(path);
    let sidecar_text = std::fs::read_to_string(&sc_path)
        .map_err(|e| Error::io(path_str(&sc_path), e))?;
    let sidecar: serde_json::Value = serde_json::from_str(&sidecar_text)
        .map_err(|e| parse_err(&sc_path, e.line(), e.to_string()))?;
    let rows = sidecar["rows"].as_u64().ok_or_else(|| {
        parse_err(&sc_path, 1, "sidecar is missing a numeric \"rows\" field")
    })? as usize;
    let dtype = sidecar["dtype"].as_str().unwrap_or_default();
    if dtype != "f64-le" {
        return Err(parse_err(
            &sc_path,
            1,
            format!("unsupported dtype {dtype:?}, expected \"f64-le\""),
        ));
    }
    let columns: Vec<&str> = sidecar["columns"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_str()).collect())
        .unwrap_or_default();
    let want: Vec<&str> = GRID_HEADER.split(',').collect();
    if columns != want {
        return Err(parse_err(
            &sc_path,
            1,
            format!("sidecar columns {columns:?} do not match {want:?}"),
        ));
    }

    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path_str(path), e))?;
    let expected = rows * GRID_BINARY_COLUMNS * 8;
    if bytes.len() != expected {
        return Err(Error::Validation(format!(
            "{} holds {} bytes but the sidecar promises {rows} rows ({expected} bytes)",
            path_str(path),
            bytes.len()
        )));
    }
    let mut grid = SpinGrid {
        positions: Vec::with_capacity(rows),
        offres: Vec::with_capacity(rows),
        t1: Vec::with_capacity(rows),
        t2: Vec::with_capacity(rows),
        mask: Vec::with_capacity(rows),
    };
    for v in 0..rows {
        let mut row = [0.0f64; GRID_BINARY_COLUMNS];
        for (c, slot) in row.iter_mut().enumerate() {
            let at = (v * GRID_BINARY_COLUMNS + c) * 8;
            *slot = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        }
        grid.positions.push([row[0], row[1], row[2]]);
        grid.offres.push(row[3]);
        grid.t1.push(row[4]);
        grid.t2.push(row[5]);
        grid.mask.push(row[6] != 0.0);
    }
    Ok(grid)
}

/// Reads a grid, choosing the format from the file extension
/// (`.csv` or `.bin`).
pub fn read_grid(path: &Path) -> Result<SpinGrid> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_grid_csv(path),
        Some("bin") => read_grid_binary(path),
        other => Err(Error::Validation(format!(
            "unsupported grid extension {other:?} for {}; use .csv or .bin",
            path_str(path)
        ))),
    }
}

/// Writes a waveform as CSV: a canonical `# dt_s=` comment, the
/// [`PULSE_HEADER`] line, then one row per sample.
pub fn write_pulse_csv(path: &Path, pulse: &Pulse) -> Result<()> {
    pulse.validate()?;
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path_str(path), e);
    writeln!(w, "{DT_COMMENT_PREFIX}{}", fmt_f64(pulse.dt)).map_err(io_err)?;
    writeln!(w, "{PULSE_HEADER}").map_err(io_err)?;
    for t in 0..pulse.n_samples() {
        writeln!(
            w,
            "{t},{},{},{},{},{}",
            fmt_f64(pulse.rf[t].re),
            fmt_f64(pulse.rf[t].im),
            fmt_f64(pulse.grad[t][0]),
            fmt_f64(pulse.grad[t][1]),
            fmt_f64(pulse.grad[t][2]),
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a waveform written in the [`write_pulse_csv`] layout. The
/// leading `# dt_s=` comment is required; sample indices must count up
/// from zero.
pub fn read_pulse_csv(path: &Path) -> Result<Pulse> {
    let reader = open_reader(path)?;
    let mut dt: Option<f64> = None;
    let mut saw_header = false;
    let mut rf: Vec<Complex64> = Vec::new();
    let mut grad: Vec<Vec3> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path_str(path), e))?;
        let row = line.trim();
        if row.is_empty() {
            continue;
        }
        if dt.is_none() {
            let Some(raw) = row.strip_prefix(DT_COMMENT_PREFIX) else {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("first line must be the {DT_COMMENT_PREFIX:?} comment, found {row:?}"),
                ));
            };
            let value = parse_field(path, line_no, "dt_s", raw)?;
            if value <= 0.0 {
                return Err(parse_err(path, line_no, format!("dt_s must be positive, got {value}")));
            }
            dt = Some(value);
            continue;
        }
        if !saw_header {
            if row != PULSE_HEADER {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected header {PULSE_HEADER:?}, found {row:?}"),
                ));
            }
            saw_header = true;
            continue;
        }
        let f = split_row(path, line_no, row, 6)?;
        let index: usize = f[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("index is not an integer: {:?}", f[0])))?;
        if index != rf.len() {
            return Err(parse_err(
                path,
                line_no,
                format!("sample index {index} out of order, expected {}", rf.len()),
            ));
        }
        rf.push(Complex64::new(
            parse_field(path, line_no, "rf_real_gauss", f[1])?,
            parse_field(path, line_no, "rf_imag_gauss", f[2])?,
        ));
        grad.push([
            parse_field(path, line_no, "gx_gauss_per_cm", f[3])?,
            parse_field(path, line_no, "gy_gauss_per_cm", f[4])?,
            parse_field(path, line_no, "gz_gauss_per_cm", f[5])?,
        ]);
    }
    let Some(dt) = dt else {
        return Err(parse_err(path, 1, "file is empty"));
    };
    if !saw_header {
        return Err(parse_err(path, 2, "missing waveform header"));
    }
    let pulse = Pulse { rf, grad, dt };
    pulse.validate()?;
    Ok(pulse)
}

/// Writes per-voxel magnetization as CSV with header
/// [`MAGNETIZATION_HEADER`].
pub fn write_magnetization_csv(path: &Path, mag: &Magnetization) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path_str(path), e);
    writeln!(w, "{MAGNETIZATION_HEADER}").map_err(io_err)?;
    for (v, m) in mag.m.iter().enumerate() {
        writeln!(w, "{v},{},{},{}", fmt_f64(m[0]), fmt_f64(m[1]), fmt_f64(m[2])).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads magnetization written in the [`write_magnetization_csv`] layout.
pub fn read_magnetization_csv(path: &Path) -> Result<Magnetization> {
    let reader = open_reader(path)?;
    let mut m: Vec<Vec3> = Vec::new();
    let mut saw_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path_str(path), e))?;
        let row = line.trim();
        if row.is_empty() {
            continue;
        }
        if !saw_header {
            if row != MAGNETIZATION_HEADER {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected header {MAGNETIZATION_HEADER:?}, found {row:?}"),
                ));
            }
            saw_header = true;
            continue;
        }
        let f = split_row(path, line_no, row, 4)?;
        let index: usize = f[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("voxel is not an integer: {:?}", f[0])))?;
        if index != m.len() {
            return Err(parse_err(
                path,
                line_no,
                format!("voxel index {index} out of order, expected {}", m.len()),
            ));
        }
        m.push([
            parse_field(path, line_no, "mx", f[1])?,
            parse_field(path, line_no, "my", f[2])?,
            parse_field(path, line_no, "mz", f[3])?,
        ]);
    }
    if !saw_header {
        return Err(parse_err(path, 1, "file is empty"));
    }
    Ok(Magnetization { m })
}

/// Writes design history rows as CSV with header [`HISTORY_HEADER`].
pub fn write_history_csv(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path_str(path), e);
    writeln!(w, "{HISTORY_HEADER}").map_err(io_err)?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.outer_iter,
            r.block.as_str(),
            fmt_f64(r.loss),
            fmt_f64(r.nrmse),
            fmt_f64(r.peak_rf),
            fmt_f64(r.peak_grad),
            fmt_f64(r.peak_slew),
            fmt_f64(r.seconds),
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Writes voxel labels (0 = outer, 1 = inner, 2 = don't-care), one per
/// row under a `label` header.
pub fn write_labels_csv(path: &Path, labels: &[VoxelLabel]) -> Result<()> {
    let mut w = open_writer(path)?;
    let io_err = |e| Error::io(path_str(path), e);
    writeln!(w, "{LABELS_HEADER}").map_err(io_err)?;
    for l in labels {
        let code = match l {
            VoxelLabel::Outer => 0,
            VoxelLabel::Inner => 1,
            VoxelLabel::DontCare => 2,
        };
        writeln!(w, "{code}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads voxel labels written in the [`write_labels_csv`] layout.
pub fn read_labels_csv(path: &Path) -> Result<Vec<VoxelLabel>> {
    let reader = open_reader(path)?;
    let mut labels = Vec::new();
    let mut saw_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path_str(path), e))?;
        let row = line.trim();
        if row.is_empty() {
            continue;
        }
        if !saw_header {
            if row != LABELS_HEADER {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected header {LABELS_HEADER:?}, found {row:?}"),
                ));
            }
            saw_header = true;
            continue;
        }
        let label = match row {
            "0" => VoxelLabel::Outer,
            "1" => VoxelLabel::Inner,
            "2" => VoxelLabel::DontCare,
            other => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("label must be 0, 1, or 2, found {other:?}"),
                ))
            }
        };
        labels.push(label);
    }
    if !saw_header {
        return Err(parse_err(path, 1, "file is empty"));
    }
    Ok(labels)
}
